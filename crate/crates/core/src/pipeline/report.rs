use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Column order of [`SimReport::csv_record`].
pub const REPORT_COLUMNS: [&str; 19] = [
    "label",
    "makespan_ms",
    "total_compute_ms",
    "cpu_compute_ms",
    "total_transfer_ms",
    "exposed_transfer_ms",
    "overlapped_transfer_ms",
    "needs",
    "hits",
    "misses",
    "stalls",
    "on_demand_transfers",
    "prefetch_transfers",
    "inflight_waits",
    "rejected_loads",
    "cpu_dispatches",
    "hit_rate",
    "prefill_ms",
    "decode_ms_mean",
];

/// Column order of [`SimReport::write_timeline`].
pub const TIMELINE_COLUMNS: [&str; 8] = [
    "pass",
    "layer",
    "start_ms",
    "end_ms",
    "stall_ms",
    "transfers",
    "hits",
    "cpu_dispatches",
];

/// Execution window of one layer in one pass. Pass 0 is prefill; pass `n`
/// is decode step `n - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub pass: usize,
    pub layer: usize,
    pub start_ms: f64,
    pub end_ms: f64,
    pub stall_ms: f64,
    /// Transfers started while the layer was executing.
    pub transfers: usize,
    pub hits: usize,
    pub cpu_dispatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan: f64,
    /// GPU busy time. Host-side setup overlaps the prefix and is not counted.
    pub total_compute: f64,
    pub cpu_compute: f64,
    /// Channel busy time up to the makespan.
    pub total_transfer: f64,
    /// Transfer time during which neither GPU nor CPU computes.
    pub exposed_transfer: f64,
    pub overlapped_transfer: f64,
    /// Demanded (pass, layer, expert) triples outside the pinned prefix.
    pub needs: usize,
    pub hits: usize,
    pub misses: usize,
    /// Expert executions that waited for their transfer.
    pub stalls: usize,
    pub on_demand_transfers: usize,
    pub prefetch_transfers: usize,
    pub inflight_waits: usize,
    pub rejected_loads: usize,
    pub cpu_dispatches: usize,
    pub hit_rate: f64,
    pub prefill_ms: f64,
    pub decode_ms_per_step: Vec<f64>,
    pub per_layer: Vec<LayerTiming>,
}

impl SimReport {
    pub fn decode_ms_mean(&self) -> f64 {
        if self.decode_ms_per_step.is_empty() {
            0.0
        } else {
            self.decode_ms_per_step.iter().sum::<f64>() / self.decode_ms_per_step.len() as f64
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Values in [`REPORT_COLUMNS`] order.
    pub fn csv_record(&self, label: &str) -> Vec<String> {
        vec![
            label.to_string(),
            self.makespan.to_string(),
            self.total_compute.to_string(),
            self.cpu_compute.to_string(),
            self.total_transfer.to_string(),
            self.exposed_transfer.to_string(),
            self.overlapped_transfer.to_string(),
            self.needs.to_string(),
            self.hits.to_string(),
            self.misses.to_string(),
            self.stalls.to_string(),
            self.on_demand_transfers.to_string(),
            self.prefetch_transfers.to_string(),
            self.inflight_waits.to_string(),
            self.rejected_loads.to_string(),
            self.cpu_dispatches.to_string(),
            self.hit_rate.to_string(),
            self.prefill_ms.to_string(),
            self.decode_ms_mean().to_string(),
        ]
    }

    /// Writes a header and one row per labelled report.
    pub fn write_csv<'a, W: Write>(rows: impl IntoIterator<Item = (&'a str, &'a SimReport)>, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_COLUMNS)?;
        for (label, r) in rows {
            w.write_record(r.csv_record(label))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_timeline<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(TIMELINE_COLUMNS)?;
        for row in &self.per_layer {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}
