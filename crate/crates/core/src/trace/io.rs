//! JSON Lines trace files.
//!
//! Line 1 is a header, followed by one line per token and then one line per
//! (layer, token) route in layer-major order. Floats use shortest round-trip
//! formatting so a save/load cycle is lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Route, RoutingTrace, Token};
use crate::error::{Error, Result};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "E")]
    experts: usize,
    k: usize,
    #[serde(rename = "N")]
    tokens: usize,
    #[serde(rename = "D_v")]
    embed_dim: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    shared: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    phase_marks: Vec<usize>,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteLine {
    layer: usize,
    token: usize,
    experts: Vec<usize>,
    gates: Vec<f64>,
}

#[derive(Serialize)]
struct RouteLineRef<'a> {
    layer: usize,
    token: usize,
    experts: &'a [usize],
    gates: &'a [f64],
}

pub fn write_trace<W: Write>(trace: &RoutingTrace, mut out: W) -> Result<()> {
    let header = Header {
        version: TRACE_VERSION,
        layers: trace.num_layers,
        experts: trace.num_experts,
        k: trace.top_k,
        tokens: trace.tokens.len(),
        embed_dim: trace.embed_dim,
        shared: trace.shared_experts,
        seed: trace.seed,
        phase_marks: trace.phase_marks.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for tok in &trace.tokens {
        serde_json::to_writer(&mut out, tok)?;
        out.write_all(b"\n")?;
    }
    for (layer, routes) in trace.routes.iter().enumerate() {
        for (token, r) in routes.iter().enumerate() {
            let line = RouteLineRef {
                layer,
                token,
                experts: &r.experts,
                gates: &r.gates,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_trace(trace: &RoutingTrace, path: impl AsRef<Path>) -> Result<()> {
    let violations = trace.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidTrace(violations));
    }
    write_trace(trace, BufWriter::new(File::create(path)?))
}

fn parse<T: for<'de> Deserialize<'de>>(line: &str, no: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: no,
        message: e.to_string(),
    })
}

/// Parses and validates a trace.
pub fn read_trace<R: Read>(input: R) -> Result<RoutingTrace> {
    let mut lines = BufReader::new(input).lines().enumerate().map(|(i, l)| (i + 1, l));
    let (no, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty trace file".into(),
    })?;
    let header: Header = parse(&first?, no)?;
    if header.version != TRACE_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported trace version {}", header.version),
        });
    }

    let mut tokens = Vec::with_capacity(header.tokens);
    let mut routes: Vec<Vec<Option<Route>>> = vec![vec![None; header.tokens]; header.layers];
    let mut last_line = no;
    for (no, line) in lines {
        let line = line?;
        last_line = no;
        if line.trim().is_empty() {
            continue;
        }
        if tokens.len() < header.tokens {
            tokens.push(parse::<Token>(&line, no)?);
            continue;
        }
        let r: RouteLine = parse(&line, no)?;
        let slot = routes
            .get_mut(r.layer)
            .and_then(|l| l.get_mut(r.token))
            .ok_or_else(|| Error::Parse {
                line: no,
                message: format!(
                    "route (layer {}, token {}) outside the header geometry",
                    r.layer, r.token
                ),
            })?;
        if slot.is_some() {
            return Err(Error::Parse {
                line: no,
                message: format!("duplicate route for layer {} token {}", r.layer, r.token),
            });
        }
        *slot = Some(Route {
            experts: r.experts,
            gates: r.gates,
        });
    }
    if tokens.len() < header.tokens {
        return Err(Error::Parse {
            line: last_line,
            message: format!("expected {} token lines, found {}", header.tokens, tokens.len()),
        });
    }
    let mut full = Vec::with_capacity(header.layers);
    for (l, layer) in routes.into_iter().enumerate() {
        let mut out = Vec::with_capacity(layer.len());
        for (t, r) in layer.into_iter().enumerate() {
            out.push(r.ok_or_else(|| Error::Parse {
                line: last_line,
                message: format!("missing route for layer {l} token {t}"),
            })?);
        }
        full.push(out);
    }

    let trace = RoutingTrace {
        num_layers: header.layers,
        num_experts: header.experts,
        top_k: header.k,
        embed_dim: header.embed_dim,
        shared_experts: header.shared,
        seed: header.seed,
        tokens,
        routes: full,
        phase_marks: header.phase_marks,
    };
    let violations = trace.validate();
    if violations.is_empty() {
        Ok(trace)
    } else {
        Err(Error::InvalidTrace(violations))
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<RoutingTrace> {
    read_trace(File::open(path)?)
}
