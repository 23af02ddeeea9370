//! Model geometries used as canonical simulation configurations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::SimConfig;
use crate::trace::TraceGenConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 48 layers of 128 experts, top-8, 17.3 MB per expert.
    Qwen,
    /// 30 layers of 72 experts, top-6 plus 2 shared, 23.6 MB per expert.
    Deepseek,
    /// Whatever the config sections say.
    #[default]
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub shared_experts: usize,
    pub expert_size: f64,
}

pub const QWEN: Geometry = Geometry {
    num_layers: 48,
    num_experts: 128,
    top_k: 8,
    shared_experts: 0,
    expert_size: 17.3,
};

pub const DEEPSEEK: Geometry = Geometry {
    num_layers: 30,
    num_experts: 72,
    top_k: 6,
    shared_experts: 2,
    expert_size: 23.6,
};

impl Preset {
    pub fn geometry(self) -> Option<Geometry> {
        match self {
            Preset::Qwen => Some(QWEN),
            Preset::Deepseek => Some(DEEPSEEK),
            Preset::Custom => None,
        }
    }

    /// Overwrites the geometry fields of both configs.
    pub fn apply(self, trace: &mut TraceGenConfig, sim: &mut SimConfig) {
        if let Some(g) = self.geometry() {
            g.apply_trace(trace);
            sim.expert_size = g.expert_size;
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Qwen => "qwen",
            Preset::Deepseek => "deepseek",
            Preset::Custom => "custom",
        }
    }
}

impl Geometry {
    pub fn apply_trace(&self, trace: &mut TraceGenConfig) {
        trace.num_layers = self.num_layers;
        trace.num_experts = self.num_experts;
        trace.top_k = self.top_k;
        trace.shared_experts = self.shared_experts;
        trace.cluster_support = trace.cluster_support.clamp(self.top_k, self.num_experts);
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qwen" => Ok(Preset::Qwen),
            "deepseek" => Ok(Preset::Deepseek),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::invalid("preset", format!("unknown preset {other:?}"))),
        }
    }
}
