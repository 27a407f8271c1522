//! Episode result files and the metrics CSV.
//!
//! Trajectories are persisted as f32, so the J written to the header and the
//! metrics row is recomputed from the quantized values. Anyone re-reading the
//! file reproduces that J bitwise, which is what the post-run re-validation
//! checks.

use crate::config::Method;
use cldpc_core::burgers::{objective_j, Setting};
use cldpc_core::io::{read_framed, write_framed, RESULT_MAGIC};
use cldpc_core::samplers::ControlResult;
use cldpc_core::window::ObsMask;
use cldpc_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultHeader {
    pub method: String,
    pub setting: Setting,
    pub seed: u64,
    /// Objective of the stored (quantized) trajectory.
    pub j: f64,
    pub nfe: usize,
    pub wall_clock_s: f64,
    pub failed: bool,
    pub k: usize,
    pub horizon: usize,
    /// Episode length the task asked for; on failure the trajectory is shorter.
    pub n: usize,
    pub d_x: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ddim_steps: Option<usize>,
    pub lambda: f64,
    pub n_states: usize,
    pub n_controls: usize,
}

/// The loaded trajectory payload, dequantized to f64.
#[derive(Debug, Clone)]
pub struct StoredResult {
    pub header: ResultHeader,
    pub u_d: Vec<Vec<f64>>,
    pub env_states: Vec<Vec<f64>>,
    pub executed_w: Vec<Vec<f64>>,
}

fn quantize_rows(rows: &[Vec<f64>], out: &mut Vec<f32>) {
    for row in rows {
        out.extend(row.iter().map(|&v| v as f32));
    }
}

fn dequantize_rows(flat: &[f32], rows: usize, width: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|r| flat[r * width..(r + 1) * width].iter().map(|&v| v as f64).collect())
        .collect()
}

/// Objective weights are fixed by the grid and episode length.
pub fn quadrature(d_x: usize, n: usize) -> (f64, f64) {
    (1.0 / (d_x - 1) as f64, 1.0 / n as f64)
}

/// Quantize, recompute J on the stored values, and write the file. Returns
/// the stored J.
#[allow(clippy::too_many_arguments)]
pub fn save_result(
    path: &Path,
    method: Method,
    setting: Setting,
    result: &ControlResult,
    u_d: &[Vec<f64>],
    k: usize,
    horizon: usize,
    h: Option<usize>,
    ddim_steps: Option<usize>,
    lambda: f64,
) -> Result<f64> {
    let d_x = result.env_states[0].len();
    let n = u_d.len();
    let mut payload = Vec::with_capacity((n + result.env_states.len() + result.executed_w.len()) * d_x);
    quantize_rows(u_d, &mut payload);
    quantize_rows(&result.env_states, &mut payload);
    quantize_rows(&result.executed_w, &mut payload);

    let u_d_q = dequantize_rows(&payload[..n * d_x], n, d_x);
    let states_q = dequantize_rows(&payload[n * d_x..(n + result.env_states.len()) * d_x], result.env_states.len(), d_x);
    let (dx, dt) = quadrature(d_x, n);
    let mask = setting.mask(d_x);
    let j = objective_j(&states_q[1..], &u_d_q[..result.executed_w.len()], &mask, dx, dt);

    let header = ResultHeader {
        method: method.as_str().to_string(),
        setting,
        seed: result.seed,
        j,
        nfe: result.nfe,
        wall_clock_s: result.wall_clock,
        failed: result.failed,
        k,
        horizon,
        n,
        d_x,
        h,
        ddim_steps,
        lambda,
        n_states: result.env_states.len(),
        n_controls: result.executed_w.len(),
    };
    write_framed(path, RESULT_MAGIC, &header, &payload)?;
    Ok(j)
}

pub fn load_result(path: &Path) -> Result<StoredResult> {
    let (header, payload): (ResultHeader, Vec<f32>) = read_framed(path, RESULT_MAGIC)?;
    let d = header.d_x;
    let want = (header.n + header.n_states + header.n_controls) * d;
    if payload.len() != want {
        return Err(Error::format(
            path.display().to_string(),
            format!("payload holds {} values, header implies {want}", payload.len()),
        ));
    }
    let u_d = dequantize_rows(&payload[..header.n * d], header.n, d);
    let env_states =
        dequantize_rows(&payload[header.n * d..(header.n + header.n_states) * d], header.n_states, d);
    let executed_w = dequantize_rows(
        &payload[(header.n + header.n_states) * d..],
        header.n_controls,
        d,
    );
    Ok(StoredResult { header, u_d, env_states, executed_w })
}

/// Recompute the stored trajectory's objective exactly as `save_result` did.
pub fn recompute_j(r: &StoredResult) -> f64 {
    let (dx, dt) = quadrature(r.header.d_x, r.header.n);
    let mask: ObsMask = r.header.setting.mask(r.header.d_x);
    objective_j(&r.env_states[1..], &r.u_d[..r.header.n_controls], &mask, dx, dt)
}

pub const METRICS_COLUMNS: &str = "method,setting,seed,J,nfe,wall_clock_s,K,H,N,h,ddim_steps,lambda";

/// One metrics line; optional fields stay empty.
pub fn metrics_row(h: &ResultHeader) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        h.method,
        match h.setting {
            Setting::FO => "fo",
            Setting::PO => "po",
        },
        h.seed,
        h.j,
        h.nfe,
        h.wall_clock_s,
        h.k,
        h.horizon,
        h.n,
        h.h.map(|v| v.to_string()).unwrap_or_default(),
        h.ddim_steps.map(|v| v.to_string()).unwrap_or_default(),
        h.lambda,
    )
}
