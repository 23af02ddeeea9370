use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::{build_features, build_targets, Phase, RequestView, TrainConfig};
use crate::error::{Error, Result};

/// One supervised pair: concatenated features and decayed targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Examples for every phase at layers `first_layer ..= L - 2`.
pub fn build_dataset(
    view: &RequestView<'_>,
    phases: &[Phase],
    first_layer: usize,
    cfg: &TrainConfig,
) -> Result<Vec<Example>> {
    let last = view.trace.num_layers.saturating_sub(1);
    let mut out = Vec::new();
    for &phase in phases {
        for layer in first_layer..last {
            let features = build_features(view, phase, layer, cfg.history_decay)?.concat();
            let targets = build_targets(view, phase, layer, cfg.window, cfg.gamma);
            out.push(Example { features, targets });
        }
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(data: &[Example], mut out: W) -> Result<()> {
    for ex in data {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
