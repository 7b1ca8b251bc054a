//! Flow checkpoints: one line of JSON header, then the owned metric values
//! as little-endian `f64`, row-major over
//! `(chart, node_row, node_col, matrix_row, matrix_col, re/im)`.
//! Ghost values are rebuilt from the gluing on load.

use crate::bundle::{Bundle, MetricField};
use crate::error::{Error, Result};
use crate::flow::FlowState;
use crate::geometry::BaseKind;
use crate::linalg::Mat;
use crate::C64;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::path::Path;

pub const FORMAT: &str = "hymlab-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub base: Value,
    /// Charts and owned `(rows, cols)` per chart.
    pub charts: usize,
    pub grid: [usize; 2],
    pub rank: usize,
    pub gluing: Value,
    pub t: f64,
    pub dt: f64,
    pub c_hat: f64,
    pub m: f64,
    pub step: u64,
    pub streak: u32,
    pub rejected: u64,
    pub values: usize,
}

fn base_descriptor(kind: BaseKind) -> Value {
    match kind {
        BaseKind::Torus { tau } => serde_json::json!({ "kind": "torus", "tau": [tau.re, tau.im] }),
        BaseKind::Sphere { overlap } => serde_json::json!({ "kind": "sphere", "overlap": overlap }),
    }
}

fn header_for(bundle: &Bundle, state: &FlowState) -> Header {
    let geom = &bundle.geom;
    let (rows, cols) = geom.owned_shape();
    let rank = bundle.rank();
    Header {
        format: FORMAT.into(),
        base: base_descriptor(geom.kind),
        charts: geom.n_charts(),
        grid: [rows, cols],
        rank,
        gluing: bundle.spec.descriptor(),
        t: state.t,
        dt: state.dt,
        c_hat: state.c_hat,
        m: state.m,
        step: state.step,
        streak: state.streak,
        rejected: state.rejected,
        values: geom.n_charts() * rows * cols * rank * rank * 2,
    }
}

pub fn encode(bundle: &Bundle, state: &FlowState) -> Result<Vec<u8>> {
    let header = header_for(bundle, state);
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(header.values * 8);
    for (c, n) in bundle.geom.owned_nodes() {
        let m = &state.h.charts[c][n];
        for i in 0..header.rank {
            for j in 0..header.rank {
                out.extend_from_slice(&m[(i, j)].re.to_le_bytes());
                out.extend_from_slice(&m[(i, j)].im.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn write(path: &Path, bundle: &Bundle, state: &FlowState) -> Result<()> {
    let bytes = encode(bundle, state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn decode(bytes: &[u8], bundle: &Bundle) -> Result<FlowState> {
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])?;
    let expected = header_for(bundle, &FlowState {
        t: 0.0,
        h: MetricField::from_charts(vec![]),
        dt: 0.0,
        c_hat: 0.0,
        step: 0,
        streak: 0,
        m: 0.0,
        rejected: 0,
    });
    let mut mismatches = Vec::new();
    if header.format != FORMAT {
        mismatches.push(format!("format {} (expected {FORMAT})", header.format));
    }
    if header.base != expected.base {
        mismatches.push(format!("base {} (config has {})", header.base, expected.base));
    }
    if header.charts != expected.charts || header.grid != expected.grid {
        mismatches.push(format!("grid {:?} (config has {:?})", header.grid, expected.grid));
    }
    if header.rank != expected.rank {
        mismatches.push(format!("rank {} (config has {})", header.rank, expected.rank));
    }
    if header.gluing != expected.gluing {
        mismatches.push(format!("gluing {} (config has {})", header.gluing, expected.gluing));
    }
    if !mismatches.is_empty() {
        return Err(Error::Checkpoint(format!("does not match the configured bundle: {}", mismatches.join("; "))));
    }
    let data = &bytes[split + 1..];
    if data.len() != expected.values * 8 || header.values != expected.values {
        return Err(Error::Checkpoint(format!(
            "expected {} values, found {} bytes of payload",
            expected.values,
            data.len()
        )));
    }
    let mut words = data.chunks_exact(8).map(|w| f64::from_le_bytes(w.try_into().expect("chunks of 8")));
    let r = header.rank;
    let geom = &bundle.geom;
    let mut h = geom.constant(Mat::identity(r));
    for (c, n) in geom.owned_nodes() {
        let mut m = Mat::identity(r);
        for i in 0..r {
            for j in 0..r {
                let re = words.next().expect("length checked");
                let im = words.next().expect("length checked");
                m[(i, j)] = C64::new(re, im);
            }
        }
        h.charts[c][n] = m;
    }
    bundle.sync_metric(&mut h);
    bundle.validate(&h)?;
    Ok(FlowState {
        t: header.t,
        h,
        dt: header.dt,
        c_hat: header.c_hat,
        step: header.step,
        streak: header.streak,
        m: header.m,
        rejected: header.rejected,
    })
}

pub fn read(path: &Path, bundle: &Bundle) -> Result<FlowState> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes, bundle)
}
