//! Noise-prediction network over planning windows.
//!
//! Input is the window (channels w, u) plus the conditioning state broadcast
//! as a third channel; output is a per-frame, per-channel noise prediction.
//! Each residual block adds a learned projection of the frame's denoising
//! level, applies a spatial conv over the grid, then a temporal conv across
//! frames. All parameters live in one flat f64 vector; gradients are
//! accumulated by a hand-written reverse pass into a buffer of the same
//! layout. The observation mask zeroes hidden cells of all inputs and all
//! outputs, so nothing flows through unobserved locations.

use crate::error::{Error, Result};
use crate::rng::{domain, substream};
use crate::window::{ObsMask, Window, CHANNELS};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const INPUT_CHANNELS: usize = 3;
const K_SPATIAL: usize = 3;
const K_TEMPORAL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sync,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub horizon: usize,
    pub grid: usize,
    pub channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.grid == 0 || self.channels == 0 || self.depth == 0 {
            return Err(Error::config(format!("arch dimensions must be positive: {self:?}")));
        }
        if self.embed_dim < 4 || self.embed_dim % 2 != 0 {
            return Err(Error::config(format!(
                "embed_dim must be even and >= 4, got {}",
                self.embed_dim
            )));
        }
        Ok(())
    }

    fn stem_len(&self) -> usize {
        self.channels * INPUT_CHANNELS * K_SPATIAL + self.channels
    }

    fn block_len(&self) -> usize {
        let c = self.channels;
        (c * self.embed_dim + c) + (c * c * K_SPATIAL + c) + (c * K_TEMPORAL * c + c)
    }

    fn head_len(&self) -> usize {
        CHANNELS * self.channels * K_SPATIAL + CHANNELS
    }

    pub fn param_count(&self) -> usize {
        self.stem_len() + self.depth * self.block_len() + self.head_len()
    }

    fn block_base(&self, d: usize) -> usize {
        self.stem_len() + d * self.block_len()
    }

    pub fn stem_w(&self) -> std::ops::Range<usize> {
        0..self.channels * INPUT_CHANNELS * K_SPATIAL
    }

    pub fn stem_b(&self) -> std::ops::Range<usize> {
        let s = self.stem_w().end;
        s..s + self.channels
    }

    pub fn emb_w(&self, d: usize) -> std::ops::Range<usize> {
        let s = self.block_base(d);
        s..s + self.channels * self.embed_dim
    }

    pub fn emb_b(&self, d: usize) -> std::ops::Range<usize> {
        let s = self.emb_w(d).end;
        s..s + self.channels
    }

    pub fn conv_s_w(&self, d: usize) -> std::ops::Range<usize> {
        let s = self.emb_b(d).end;
        s..s + self.channels * self.channels * K_SPATIAL
    }

    pub fn conv_s_b(&self, d: usize) -> std::ops::Range<usize> {
        let s = self.conv_s_w(d).end;
        s..s + self.channels
    }

    pub fn conv_t_w(&self, d: usize) -> std::ops::Range<usize> {
        let s = self.conv_s_b(d).end;
        s..s + self.channels * K_TEMPORAL * self.channels
    }

    pub fn conv_t_b(&self, d: usize) -> std::ops::Range<usize> {
        let s = self.conv_t_w(d).end;
        s..s + self.channels
    }

    pub fn head_w(&self) -> std::ops::Range<usize> {
        let s = self.block_base(self.depth);
        s..s + CHANNELS * self.channels * K_SPATIAL
    }

    pub fn head_b(&self) -> std::ops::Range<usize> {
        let s = self.head_w().end;
        s..s + CHANNELS
    }
}

#[derive(Debug, Clone)]
pub struct ScoreModel {
    pub arch: Arch,
    pub kind: ModelKind,
    pub params: Vec<f64>,
}

/// Gradient accumulator with the same layout as `ScoreModel::params`.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub data: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(arch: &Arch) -> Self {
        GradBuffer { data: vec![0.0; arch.param_count()] }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

/// Reusable forward/backward buffers; one per worker thread.
pub struct Scratch {
    arch: Arch,
    xin: Vec<f64>,
    h: Vec<f64>,
    emb: Vec<f64>,
    ebias: Vec<f64>,
    a: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
    t2: Vec<Vec<f64>>,
    d_h: Vec<f64>,
    d_t1: Vec<f64>,
    d_t2: Vec<f64>,
    out: Vec<f64>,
    d_out: Vec<f64>,
}

impl Scratch {
    pub fn new(arch: &Arch) -> Self {
        let hidden = arch.horizon * arch.channels * arch.grid;
        let per_block = || (0..arch.depth).map(|_| vec![0.0; hidden]).collect();
        Scratch {
            arch: *arch,
            xin: vec![0.0; arch.horizon * INPUT_CHANNELS * arch.grid],
            h: vec![0.0; hidden],
            emb: vec![0.0; arch.horizon * arch.embed_dim],
            ebias: vec![0.0; arch.horizon * arch.channels],
            a: per_block(),
            s: per_block(),
            cs: per_block(),
            t2: per_block(),
            d_h: vec![0.0; hidden],
            d_t1: vec![0.0; hidden],
            d_t2: vec![0.0; hidden],
            out: vec![0.0; arch.horizon * CHANNELS * arch.grid],
            d_out: vec![0.0; arch.horizon * CHANNELS * arch.grid],
        }
    }
}

/// Sinusoidal features of a denoising level.
pub fn sinusoidal_embedding(level: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    debug_assert!(half >= 2 && out.len() == dim);
    let log_base = (10_000f64).ln() / (half - 1) as f64;
    for m in 0..half {
        let freq = (-(m as f64) * log_base).exp();
        out[m] = (level * freq).sin();
        out[half + m] = (level * freq).cos();
    }
}

#[inline(always)]
fn act(x: f64) -> f64 {
    // x * sigma(x) with the algebraic sigmoid 0.5 (1 + x / sqrt(1 + x^2));
    // smooth like SiLU, but branch- and libm-free so the loops vectorize.
    let r = (1.0 + x * x).sqrt().recip();
    0.5 * x + 0.5 * x * x * r
}

#[inline(always)]
fn act_deriv(x: f64) -> f64 {
    let r = (1.0 + x * x).sqrt().recip();
    let xr = x * r;
    0.5 + xr * (1.0 - 0.5 * xr * xr)
}

/// Dot product with interleaved lane accumulators; float adds cannot be
/// reassociated by the compiler, so the independent chains are spelled out.
#[inline(always)]
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..16 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut s = 0.0;
    for (xa, xb) in ra.iter().zip(rb) {
        s += xa * xb;
    }
    s + lanes.iter().sum::<f64>()
}

/// Split four consecutive rows of length dx out of a buffer.
#[inline(always)]
fn rows4(buf: &mut [f64], dx: usize) -> (&mut [f64], &mut [f64], &mut [f64], &mut [f64]) {
    debug_assert!(buf.len() >= 4 * dx);
    let (r0, rest) = buf.split_at_mut(dx);
    let (r1, rest) = rest.split_at_mut(dx);
    let (r2, rest) = rest.split_at_mut(dx);
    (r0, r1, r2, &mut rest[..dx])
}

/// out[f][co][x] = b[co] + sum_{ci,k} w[co][ci][k] in[f][ci][x+k-1], zero pad.
/// Output channels are processed four at a time so each input row is loaded
/// once per block instead of once per channel.
fn conv_spatial(
    inp: &[f64],
    out: &mut [f64],
    w: &[f64],
    b: &[f64],
    frames: usize,
    cin: usize,
    cout: usize,
    dx: usize,
) {
    for f in 0..frames {
        let in_f = &inp[f * cin * dx..(f + 1) * cin * dx];
        let out_f = &mut out[f * cout * dx..(f + 1) * cout * dx];
        let mut co = 0;
        while co + 4 <= cout {
            let (o0, o1, o2, o3) = rows4(&mut out_f[co * dx..], dx);
            o0.iter_mut().for_each(|v| *v = b[co]);
            o1.iter_mut().for_each(|v| *v = b[co + 1]);
            o2.iter_mut().for_each(|v| *v = b[co + 2]);
            o3.iter_mut().for_each(|v| *v = b[co + 3]);
            for ci in 0..cin {
                let xi = &in_f[ci * dx..(ci + 1) * dx];
                let wr: [&[f64]; 4] = [
                    &w[((co) * cin + ci) * K_SPATIAL..][..3],
                    &w[((co + 1) * cin + ci) * K_SPATIAL..][..3],
                    &w[((co + 2) * cin + ci) * K_SPATIAL..][..3],
                    &w[((co + 3) * cin + ci) * K_SPATIAL..][..3],
                ];
                o0[0] += wr[0][1] * xi[0] + wr[0][2] * xi[1];
                o1[0] += wr[1][1] * xi[0] + wr[1][2] * xi[1];
                o2[0] += wr[2][1] * xi[0] + wr[2][2] * xi[1];
                o3[0] += wr[3][1] * xi[0] + wr[3][2] * xi[1];
                let it = o0[1..dx - 1]
                    .iter_mut()
                    .zip(o1[1..dx - 1].iter_mut())
                    .zip(o2[1..dx - 1].iter_mut())
                    .zip(o3[1..dx - 1].iter_mut())
                    .zip(xi.windows(3));
                for ((((v0, v1), v2), v3), win) in it {
                    let (a, m, z) = (win[0], win[1], win[2]);
                    *v0 += wr[0][0] * a + wr[0][1] * m + wr[0][2] * z;
                    *v1 += wr[1][0] * a + wr[1][1] * m + wr[1][2] * z;
                    *v2 += wr[2][0] * a + wr[2][1] * m + wr[2][2] * z;
                    *v3 += wr[3][0] * a + wr[3][1] * m + wr[3][2] * z;
                }
                o0[dx - 1] += wr[0][0] * xi[dx - 2] + wr[0][1] * xi[dx - 1];
                o1[dx - 1] += wr[1][0] * xi[dx - 2] + wr[1][1] * xi[dx - 1];
                o2[dx - 1] += wr[2][0] * xi[dx - 2] + wr[2][1] * xi[dx - 1];
                o3[dx - 1] += wr[3][0] * xi[dx - 2] + wr[3][1] * xi[dx - 1];
            }
            co += 4;
        }
        for co in co..cout {
            let o = &mut out_f[co * dx..(co + 1) * dx];
            o.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..cin {
                let xi = &in_f[ci * dx..(ci + 1) * dx];
                let wb = (co * cin + ci) * K_SPATIAL;
                let (w0, w1, w2) = (w[wb], w[wb + 1], w[wb + 2]);
                o[0] += w1 * xi[0] + w2 * xi[1];
                for (ov, win) in o[1..dx - 1].iter_mut().zip(xi.windows(3)) {
                    *ov += w0 * win[0] + w1 * win[1] + w2 * win[2];
                }
                o[dx - 1] += w0 * xi[dx - 2] + w1 * xi[dx - 1];
            }
        }
    }
}

/// d_in[f][ci][x] = sum_{co,k} w[co][ci][k] d_out[f][co][x-k+1] (overwrites).
/// Input rows are processed four at a time, mirroring the forward blocking.
fn conv_spatial_bwd_data(
    d_out: &[f64],
    d_in: &mut [f64],
    w: &[f64],
    frames: usize,
    cin: usize,
    cout: usize,
    dx: usize,
) {
    d_in.iter_mut().for_each(|v| *v = 0.0);
    for f in 0..frames {
        let go = &d_out[f * cout * dx..(f + 1) * cout * dx];
        let gi = &mut d_in[f * cin * dx..(f + 1) * cin * dx];
        let mut ci = 0;
        while ci + 4 <= cin {
            let (t0, t1, t2r, t3) = rows4(&mut gi[ci * dx..], dx);
            for co in 0..cout {
                let g = &go[co * dx..(co + 1) * dx];
                let wr: [&[f64]; 4] = [
                    &w[(co * cin + ci) * K_SPATIAL..][..3],
                    &w[(co * cin + ci + 1) * K_SPATIAL..][..3],
                    &w[(co * cin + ci + 2) * K_SPATIAL..][..3],
                    &w[(co * cin + ci + 3) * K_SPATIAL..][..3],
                ];
                // Transposed kernel: contributions flow the opposite way.
                t0[0] += wr[0][1] * g[0] + wr[0][0] * g[1];
                t1[0] += wr[1][1] * g[0] + wr[1][0] * g[1];
                t2r[0] += wr[2][1] * g[0] + wr[2][0] * g[1];
                t3[0] += wr[3][1] * g[0] + wr[3][0] * g[1];
                let it = t0[1..dx - 1]
                    .iter_mut()
                    .zip(t1[1..dx - 1].iter_mut())
                    .zip(t2r[1..dx - 1].iter_mut())
                    .zip(t3[1..dx - 1].iter_mut())
                    .zip(g.windows(3));
                for ((((v0, v1), v2), v3), win) in it {
                    let (a, m, z) = (win[0], win[1], win[2]);
                    *v0 += wr[0][2] * a + wr[0][1] * m + wr[0][0] * z;
                    *v1 += wr[1][2] * a + wr[1][1] * m + wr[1][0] * z;
                    *v2 += wr[2][2] * a + wr[2][1] * m + wr[2][0] * z;
                    *v3 += wr[3][2] * a + wr[3][1] * m + wr[3][0] * z;
                }
                t0[dx - 1] += wr[0][2] * g[dx - 2] + wr[0][1] * g[dx - 1];
                t1[dx - 1] += wr[1][2] * g[dx - 2] + wr[1][1] * g[dx - 1];
                t2r[dx - 1] += wr[2][2] * g[dx - 2] + wr[2][1] * g[dx - 1];
                t3[dx - 1] += wr[3][2] * g[dx - 2] + wr[3][1] * g[dx - 1];
            }
            ci += 4;
        }
        for ci in ci..cin {
            let t = &mut gi[ci * dx..(ci + 1) * dx];
            for co in 0..cout {
                let g = &go[co * dx..(co + 1) * dx];
                let wb = (co * cin + ci) * K_SPATIAL;
                let (w0, w1, w2) = (w[wb], w[wb + 1], w[wb + 2]);
                t[0] += w1 * g[0] + w0 * g[1];
                for (tv, win) in t[1..dx - 1].iter_mut().zip(g.windows(3)) {
                    *tv += w2 * win[0] + w1 * win[1] + w0 * win[2];
                }
                t[dx - 1] += w2 * g[dx - 2] + w1 * g[dx - 1];
            }
        }
    }
}

fn conv_spatial_bwd_weights(
    d_out: &[f64],
    inp: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    frames: usize,
    cin: usize,
    cout: usize,
    dx: usize,
) {
    for f in 0..frames {
        let go = &d_out[f * cout * dx..(f + 1) * cout * dx];
        let in_f = &inp[f * cin * dx..(f + 1) * cin * dx];
        for co in 0..cout {
            let g = &go[co * dx..(co + 1) * dx];
            db[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let xi = &in_f[ci * dx..(ci + 1) * dx];
                let wb = (co * cin + ci) * K_SPATIAL;
                dw[wb] += dot_lanes(&g[1..], &xi[..dx - 1]);
                dw[wb + 1] += dot_lanes(g, xi);
                dw[wb + 2] += dot_lanes(&g[..dx - 1], &xi[1..]);
            }
        }
    }
}

/// out[j][co][x] = b[co] + sum_{dj,ci} w[co][dj][ci] in[j+dj-1][ci][x], zero
/// pad at the window edges. Mixes frames; channel-mixing at every tap.
fn conv_temporal(inp: &[f64], out: &mut [f64], w: &[f64], b: &[f64], h: usize, c: usize, dx: usize) {
    for j in 0..h {
        let out_j = &mut out[j * c * dx..(j + 1) * c * dx];
        for co in 0..c {
            let o = &mut out_j[co * dx..(co + 1) * dx];
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for dj in 0..K_TEMPORAL {
            let jj = j as isize + dj as isize - 1;
            if jj < 0 || jj >= h as isize {
                continue;
            }
            let in_j = &inp[jj as usize * c * dx..(jj as usize + 1) * c * dx];
            let mut co = 0;
            while co + 4 <= c {
                let (o0, o1, o2, o3) = rows4(&mut out_j[co * dx..], dx);
                for ci in 0..c {
                    let xi = &in_j[ci * dx..(ci + 1) * dx];
                    let w0 = w[(co * K_TEMPORAL + dj) * c + ci];
                    let w1 = w[((co + 1) * K_TEMPORAL + dj) * c + ci];
                    let w2 = w[((co + 2) * K_TEMPORAL + dj) * c + ci];
                    let w3 = w[((co + 3) * K_TEMPORAL + dj) * c + ci];
                    let it = o0.iter_mut().zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut()).zip(xi);
                    for ((((v0, v1), v2), v3), &xv) in it {
                        *v0 += w0 * xv;
                        *v1 += w1 * xv;
                        *v2 += w2 * xv;
                        *v3 += w3 * xv;
                    }
                }
                co += 4;
            }
            for co in co..c {
                let o = &mut out_j[co * dx..(co + 1) * dx];
                for ci in 0..c {
                    let wv = w[(co * K_TEMPORAL + dj) * c + ci];
                    let xi = &in_j[ci * dx..(ci + 1) * dx];
                    for (ov, xv) in o.iter_mut().zip(xi) {
                        *ov += wv * xv;
                    }
                }
            }
        }
    }
}

fn conv_temporal_bwd_data(d_out: &[f64], d_in: &mut [f64], w: &[f64], h: usize, c: usize, dx: usize) {
    d_in.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..h {
        let go = &d_out[j * c * dx..(j + 1) * c * dx];
        for dj in 0..K_TEMPORAL {
            let jj = j as isize + dj as isize - 1;
            if jj < 0 || jj >= h as isize {
                continue;
            }
            let gi = &mut d_in[jj as usize * c * dx..(jj as usize + 1) * c * dx];
            let mut ci = 0;
            while ci + 4 <= c {
                let (t0, t1, t2, t3) = rows4(&mut gi[ci * dx..], dx);
                for co in 0..c {
                    let g = &go[co * dx..(co + 1) * dx];
                    let wbase = (co * K_TEMPORAL + dj) * c + ci;
                    let (w0, w1, w2, w3) = (w[wbase], w[wbase + 1], w[wbase + 2], w[wbase + 3]);
                    let it = t0.iter_mut().zip(t1.iter_mut()).zip(t2.iter_mut()).zip(t3.iter_mut()).zip(g);
                    for ((((v0, v1), v2), v3), &gv) in it {
                        *v0 += w0 * gv;
                        *v1 += w1 * gv;
                        *v2 += w2 * gv;
                        *v3 += w3 * gv;
                    }
                }
                ci += 4;
            }
            for ci in ci..c {
                for co in 0..c {
                    let g = &go[co * dx..(co + 1) * dx];
                    let wv = w[(co * K_TEMPORAL + dj) * c + ci];
                    let t = &mut gi[ci * dx..(ci + 1) * dx];
                    for (tv, gv) in t.iter_mut().zip(g) {
                        *tv += wv * gv;
                    }
                }
            }
        }
    }
}

fn conv_temporal_bwd_weights(
    d_out: &[f64],
    inp: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    h: usize,
    c: usize,
    dx: usize,
) {
    for j in 0..h {
        let go = &d_out[j * c * dx..(j + 1) * c * dx];
        for co in 0..c {
            let g = &go[co * dx..(co + 1) * dx];
            db[co] += g.iter().sum::<f64>();
        }
        for dj in 0..K_TEMPORAL {
            let jj = j as isize + dj as isize - 1;
            if jj < 0 || jj >= h as isize {
                continue;
            }
            let in_j = &inp[jj as usize * c * dx..(jj as usize + 1) * c * dx];
            for co in 0..c {
                let g = &go[co * dx..(co + 1) * dx];
                for ci in 0..c {
                    let xi = &in_j[ci * dx..(ci + 1) * dx];
                    dw[(co * K_TEMPORAL + dj) * c + ci] += dot_lanes(g, xi);
                }
            }
        }
    }
}

impl ScoreModel {
    /// Fan-in-scaled uniform init for every layer; the head starts at zero
    /// so an untrained model predicts zero noise.
    pub fn init(arch: Arch, kind: ModelKind, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.param_count()];
        let mut rng = substream(seed, domain::MODEL_INIT, 0);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, params: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for i in range {
                params[i] = rng.gen_range(-bound..bound);
            }
        };
        fill(arch.stem_w(), INPUT_CHANNELS * K_SPATIAL, &mut params);
        fill(arch.stem_b(), INPUT_CHANNELS * K_SPATIAL, &mut params);
        for d in 0..arch.depth {
            fill(arch.emb_w(d), arch.embed_dim, &mut params);
            fill(arch.emb_b(d), arch.embed_dim, &mut params);
            fill(arch.conv_s_w(d), arch.channels * K_SPATIAL, &mut params);
            fill(arch.conv_s_b(d), arch.channels * K_SPATIAL, &mut params);
            fill(arch.conv_t_w(d), arch.channels * K_TEMPORAL, &mut params);
            fill(arch.conv_t_b(d), arch.channels * K_TEMPORAL, &mut params);
        }
        // arch.head_w(), arch.head_b() stay zero.
        Ok(ScoreModel { arch, kind, params })
    }

    fn assemble_input(&self, window: &Window, cond: &[f64], mask: &ObsMask, xin: &mut [f64]) {
        let (h, dx) = (self.arch.horizon, self.arch.grid);
        assert_eq!(window.horizon, h);
        assert_eq!(window.grid, dx);
        assert_eq!(cond.len(), dx);
        assert_eq!(mask.grid(), dx);
        for j in 0..h {
            for (c, src) in [window.frame(j, 0), window.frame(j, 1), cond].iter().enumerate() {
                let dst = &mut xin[(j * INPUT_CHANNELS + c) * dx..(j * INPUT_CHANNELS + c + 1) * dx];
                for x in 0..dx {
                    dst[x] = src[x] * mask.cells[x];
                }
            }
        }
    }

    fn embed_levels(&self, levels: &[usize], emb: &mut [f64]) {
        let e = self.arch.embed_dim;
        assert_eq!(levels.len(), self.arch.horizon);
        for (j, &l) in levels.iter().enumerate() {
            sinusoidal_embedding(l as f64, e, &mut emb[j * e..(j + 1) * e]);
        }
    }

    fn run_forward(&self, scr: &mut Scratch, levels: &[usize], mask: &ObsMask) {
        let Arch { horizon: h, grid: dx, channels: c, depth, embed_dim: e } = self.arch;
        let p = &self.params;
        self.embed_levels(levels, &mut scr.emb);
        conv_spatial(
            &scr.xin,
            &mut scr.h,
            &p[self.arch.stem_w()],
            &p[self.arch.stem_b()],
            h,
            INPUT_CHANNELS,
            c,
            dx,
        );
        for d in 0..depth {
            let emb_w = &p[self.arch.emb_w(d)];
            let emb_b = &p[self.arch.emb_b(d)];
            for j in 0..h {
                let ej = &scr.emb[j * e..(j + 1) * e];
                for co in 0..c {
                    let row = &emb_w[co * e..(co + 1) * e];
                    let mut acc = emb_b[co];
                    for m in 0..e {
                        acc += row[m] * ej[m];
                    }
                    scr.ebias[j * c + co] = acc;
                }
            }
            for jc in 0..h * c {
                let bias = scr.ebias[jc];
                let hrow = &scr.h[jc * dx..(jc + 1) * dx];
                let arow = &mut scr.a[d][jc * dx..(jc + 1) * dx];
                for x in 0..dx {
                    arow[x] = hrow[x] + bias;
                }
            }
            {
                let a_d = &scr.a[d];
                let s_d = &mut scr.s[d];
                for (sv, av) in s_d.iter_mut().zip(a_d.iter()) {
                    *sv = act(*av);
                }
            }
            conv_spatial(
                &scr.s[d],
                &mut scr.cs[d],
                &p[self.arch.conv_s_w(d)],
                &p[self.arch.conv_s_b(d)],
                h,
                c,
                c,
                dx,
            );
            {
                let cs_d = &scr.cs[d];
                let t2_d = &mut scr.t2[d];
                for (tv, cv) in t2_d.iter_mut().zip(cs_d.iter()) {
                    *tv = act(*cv);
                }
            }
            // d_t1 doubles as the temporal-conv output buffer.
            conv_temporal(&scr.t2[d], &mut scr.d_t1, &p[self.arch.conv_t_w(d)], &p[self.arch.conv_t_b(d)], h, c, dx);
            for (hv, tv) in scr.h.iter_mut().zip(scr.d_t1.iter()) {
                *hv += tv;
            }
        }
        conv_spatial(&scr.h, &mut scr.out, &p[self.arch.head_w()], &p[self.arch.head_b()], h, c, CHANNELS, dx);
        for j in 0..h {
            for ch in 0..CHANNELS {
                let o = &mut scr.out[(j * CHANNELS + ch) * dx..(j * CHANNELS + ch + 1) * dx];
                for x in 0..dx {
                    o[x] *= mask.cells[x];
                }
            }
        }
    }

    /// Predict per-frame noise for a window at the given levels.
    pub fn forward(
        &self,
        window: &Window,
        cond: &[f64],
        levels: &[usize],
        mask: &ObsMask,
        scr: &mut Scratch,
    ) -> Window {
        assert_eq!(scr.arch, self.arch, "scratch built for a different arch");
        self.assemble_input(window, cond, mask, &mut scr.xin);
        self.run_forward(scr, levels, mask);
        Window { horizon: self.arch.horizon, grid: self.arch.grid, data: scr.out.clone() }
    }

    /// Masked mean-squared error against `target` plus parameter gradients,
    /// accumulated into `grads`. Returns the loss. The mean runs over
    /// horizon x channels x observed cells only.
    pub fn forward_backward(
        &self,
        window: &Window,
        cond: &[f64],
        levels: &[usize],
        mask: &ObsMask,
        target: &Window,
        scr: &mut Scratch,
        grads: &mut GradBuffer,
    ) -> f64 {
        assert_eq!(scr.arch, self.arch, "scratch built for a different arch");
        let Arch { horizon: h, grid: dx, channels: c, depth, embed_dim: e } = self.arch;
        self.assemble_input(window, cond, mask, &mut scr.xin);
        self.run_forward(scr, levels, mask);

        let count = (h * CHANNELS * mask.observed_count()) as f64;
        let mut loss = 0.0;
        for j in 0..h {
            for ch in 0..CHANNELS {
                let base = (j * CHANNELS + ch) * dx;
                for x in 0..dx {
                    let err = (scr.out[base + x] - target.data[base + x]) * mask.cells[x];
                    loss += err * err;
                    scr.d_out[base + x] = 2.0 * err / count;
                }
            }
        }
        loss /= count;

        let p = &self.params;
        let g = &mut grads.data;
        // Weight and bias ranges are adjacent per layer; split one mutable
        // view of the combined range into the two slices the kernels want.
        fn wb(g: &mut [f64], w: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [f64], &mut [f64]) {
            debug_assert_eq!(w.end, b.start);
            g[w.start..b.end].split_at_mut(w.end - w.start)
        }

        // Head.
        {
            let (dw, db) = wb(g, self.arch.head_w(), self.arch.head_b());
            conv_spatial_bwd_weights(&scr.d_out, &scr.h, dw, db, h, c, CHANNELS, dx);
        }
        conv_spatial_bwd_data(&scr.d_out, &mut scr.d_h, &p[self.arch.head_w()], h, c, CHANNELS, dx);

        for d in (0..depth).rev() {
            // d_h is the gradient at the block output; the residual carries
            // it straight through, the conv chain adds to it below.
            {
                let (dw, db) = wb(g, self.arch.conv_t_w(d), self.arch.conv_t_b(d));
                conv_temporal_bwd_weights(&scr.d_h, &scr.t2[d], dw, db, h, c, dx);
            }
            conv_temporal_bwd_data(&scr.d_h, &mut scr.d_t1, &p[self.arch.conv_t_w(d)], h, c, dx);
            for (dv, cv) in scr.d_t1.iter_mut().zip(scr.cs[d].iter()) {
                *dv *= act_deriv(*cv);
            }
            {
                let (dw, db) = wb(g, self.arch.conv_s_w(d), self.arch.conv_s_b(d));
                conv_spatial_bwd_weights(&scr.d_t1, &scr.s[d], dw, db, h, c, c, dx);
            }
            conv_spatial_bwd_data(&scr.d_t1, &mut scr.d_t2, &p[self.arch.conv_s_w(d)], h, c, c, dx);
            for (dv, av) in scr.d_t2.iter_mut().zip(scr.a[d].iter()) {
                *dv *= act_deriv(*av);
            }
            // Level-embedding projection: gradient is the per-(frame,
            // channel) sum of d_a.
            {
                let gw = self.arch.emb_w(d);
                let gb = self.arch.emb_b(d);
                for j in 0..h {
                    let ej = &scr.emb[j * e..(j + 1) * e];
                    for co in 0..c {
                        let base = (j * c + co) * dx;
                        let sum: f64 = scr.d_t2[base..base + dx].iter().sum();
                        g[gb.start + co] += sum;
                        let row = &mut g[gw.start + co * e..gw.start + (co + 1) * e];
                        for m in 0..e {
                            row[m] += sum * ej[m];
                        }
                    }
                }
            }
            for (dh, da) in scr.d_h.iter_mut().zip(scr.d_t2.iter()) {
                *dh += da;
            }
        }

        {
            let (dw, db) = wb(g, self.arch.stem_w(), self.arch.stem_b());
            conv_spatial_bwd_weights(&scr.d_h, &scr.xin, dw, db, h, INPUT_CHANNELS, c, dx);
        }
        loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normal, randn};

    fn tiny_arch() -> Arch {
        Arch { horizon: 4, grid: 8, channels: 6, depth: 2, embed_dim: 8 }
    }

    fn random_inputs(arch: &Arch, seed: u64) -> (Window, Vec<f64>, Vec<usize>, Window) {
        let mut rng = substream(seed, 0, 9);
        let mut window = Window::zeros(arch.horizon, arch.grid);
        fill_normal(&mut rng, &mut window.data, 1.0);
        let mut cond = vec![0.0; arch.grid];
        fill_normal(&mut rng, &mut cond, 1.0);
        let levels: Vec<usize> = (0..arch.horizon).map(|j| 3 + 50 * j).collect();
        let mut target = Window::zeros(arch.horizon, arch.grid);
        fill_normal(&mut rng, &mut target.data, 1.0);
        (window, cond, levels, target)
    }

    /// Head-zero init predicts exactly zero; tests that need a live network
    /// fill the head from a seeded stream instead of training.
    fn wake_head(model: &mut ScoreModel, seed: u64) {
        let mut rng = substream(seed, 0, 10);
        let (hw, hb) = (model.arch.head_w(), model.arch.head_b());
        for i in hw.chain(hb) {
            model.params[i] = 0.3 * randn(&mut rng);
        }
    }

    #[test]
    fn param_count_matches_layout() {
        let desk = Arch { horizon: 16, grid: 64, channels: 32, depth: 3, embed_dim: 32 };
        assert_eq!(desk.param_count(), 22306);
        assert_eq!(desk.head_b().end, desk.param_count());
        let t = tiny_arch();
        assert_eq!(t.head_b().end, t.param_count());
    }

    #[test]
    fn arch_validation_rejects_bad_embed_dim() {
        let mut a = tiny_arch();
        a.embed_dim = 7;
        assert!(a.validate().is_err());
        a.embed_dim = 2;
        assert!(a.validate().is_err());
        a.embed_dim = 8;
        a.depth = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn zero_head_means_zero_output() {
        let arch = tiny_arch();
        let model = ScoreModel::init(arch, ModelKind::Sync, 5).unwrap();
        let (window, cond, levels, _) = random_inputs(&arch, 1);
        let mask = ObsMask::full(arch.grid);
        let mut scr = Scratch::new(&arch);
        let out = model.forward(&window, &cond, &levels, &mask, &mut scr);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeds_decorrelate_initialization() {
        let arch = Arch { horizon: 16, grid: 64, channels: 32, depth: 3, embed_dim: 32 };
        let a = ScoreModel::init(arch, ModelKind::Sync, 1).unwrap();
        let b = ScoreModel::init(arch, ModelKind::Sync, 2).unwrap();
        let differing = a.params.iter().zip(&b.params).filter(|(x, y)| x != y).count();
        assert!(
            differing as f64 >= 0.99 * arch.param_count() as f64,
            "{differing}/{} entries differ",
            arch.param_count()
        );
    }

    #[test]
    fn hidden_cells_cannot_influence_output() {
        let arch = tiny_arch();
        let mut model = ScoreModel::init(arch, ModelKind::Sync, 5).unwrap();
        wake_head(&mut model, 6);
        let mask = ObsMask::hide_band(arch.grid, 0.25, 0.75);
        let (window, cond, levels, _) = random_inputs(&arch, 2);
        let mut scr = Scratch::new(&arch);
        let clean = model.forward(&window, &cond, &levels, &mask, &mut scr);

        let mut dirty_window = window.clone();
        let mut dirty_cond = cond.clone();
        let mut rng = substream(99, 0, 11);
        for x in 0..arch.grid {
            if mask.cells[x] == 0.0 {
                for j in 0..arch.horizon {
                    for ch in 0..CHANNELS {
                        let i = dirty_window.idx(j, ch, x);
                        dirty_window.data[i] = 100.0 * randn(&mut rng);
                    }
                }
                dirty_cond[x] = -55.0;
            }
        }
        let dirty = model.forward(&dirty_window, &dirty_cond, &levels, &mask, &mut scr);
        assert_eq!(clean.data, dirty.data);
        for j in 0..arch.horizon {
            for x in 0..arch.grid {
                if mask.cells[x] == 0.0 {
                    assert_eq!(clean.frame(j, 0)[x], 0.0);
                    assert_eq!(clean.frame(j, 1)[x], 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_loss_ignores_hidden_targets() {
        let arch = tiny_arch();
        let mut model = ScoreModel::init(arch, ModelKind::Sync, 5).unwrap();
        wake_head(&mut model, 6);
        let mask = ObsMask::hide_band(arch.grid, 0.25, 0.75);
        let (window, cond, levels, target) = random_inputs(&arch, 3);
        let mut scr = Scratch::new(&arch);

        let mut g1 = GradBuffer::zeros(&arch);
        let l1 = model.forward_backward(&window, &cond, &levels, &mask, &target, &mut scr, &mut g1);

        let mut target2 = target.clone();
        for x in 0..arch.grid {
            if mask.cells[x] == 0.0 {
                for j in 0..arch.horizon {
                    for ch in 0..CHANNELS {
                        let i = target2.idx(j, ch, x);
                        target2.data[i] = 1e6;
                    }
                }
            }
        }
        let mut g2 = GradBuffer::zeros(&arch);
        let l2 = model.forward_backward(&window, &cond, &levels, &mask, &target2, &mut scr, &mut g2);
        assert_eq!(l1, l2);
        assert_eq!(g1.data, g2.data);
        assert!(l1 > 0.0);
    }

    #[test]
    fn level_embedding_reaches_each_frame() {
        let arch = tiny_arch();
        let mut model = ScoreModel::init(arch, ModelKind::Async, 5).unwrap();
        wake_head(&mut model, 6);
        let (window, cond, levels, _) = random_inputs(&arch, 4);
        let mask = ObsMask::full(arch.grid);
        let mut scr = Scratch::new(&arch);
        let base = model.forward(&window, &cond, &levels, &mask, &mut scr);
        for j in 0..arch.horizon {
            let mut shifted = levels.clone();
            shifted[j] += 17;
            let out = model.forward(&window, &cond, &shifted, &mask, &mut scr);
            let delta: f64 = (0..arch.grid)
                .map(|x| (out.frame(j, 0)[x] - base.frame(j, 0)[x]).abs()
                    + (out.frame(j, 1)[x] - base.frame(j, 1)[x]).abs())
                .sum();
            assert!(delta > 1e-9, "frame {j} insensitive to its level");
        }
    }

    /// Central-difference check of the hand-written reverse pass.
    #[test]
    fn gradients_match_finite_differences() {
        let arch = tiny_arch();
        let mut model = ScoreModel::init(arch, ModelKind::Sync, 7).unwrap();
        wake_head(&mut model, 8);
        let (window, cond, levels, target) = random_inputs(&arch, 5);
        let mask = ObsMask::full(arch.grid);
        let mut scr = Scratch::new(&arch);

        let mut grads = GradBuffer::zeros(&arch);
        model.forward_backward(&window, &cond, &levels, &mask, &target, &mut scr, &mut grads);

        let mut rng = substream(123, 0, 12);
        let n = arch.param_count();
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let i = rng.gen_range(0..n);
            let h = 1e-4 * model.params[i].abs().max(1.0);
            let orig = model.params[i];
            model.params[i] = orig + h;
            let lp = model.forward_backward(&window, &cond, &levels, &mask, &target, &mut scr, &mut GradBuffer::zeros(&arch));
            model.params[i] = orig - h;
            let lm = model.forward_backward(&window, &cond, &levels, &mask, &target, &mut scr, &mut GradBuffer::zeros(&arch));
            model.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.data[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst:.3e}");
    }

    #[test]
    fn gradcheck_holds_under_partial_observation() {
        let arch = tiny_arch();
        let mut model = ScoreModel::init(arch, ModelKind::Sync, 9).unwrap();
        wake_head(&mut model, 10);
        let (window, cond, levels, target) = random_inputs(&arch, 6);
        let mask = ObsMask::hide_band(arch.grid, 0.25, 0.75);
        let mut scr = Scratch::new(&arch);

        let mut grads = GradBuffer::zeros(&arch);
        model.forward_backward(&window, &cond, &levels, &mask, &target, &mut scr, &mut grads);

        let mut rng = substream(321, 0, 13);
        let n = arch.param_count();
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let i = rng.gen_range(0..n);
            let h = 1e-4 * model.params[i].abs().max(1.0);
            let orig = model.params[i];
            model.params[i] = orig + h;
            let lp = model.forward_backward(&window, &cond, &levels, &mask, &target, &mut scr, &mut GradBuffer::zeros(&arch));
            model.params[i] = orig - h;
            let lm = model.forward_backward(&window, &cond, &levels, &mask, &target, &mut scr, &mut GradBuffer::zeros(&arch));
            model.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.data[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst:.3e}");
    }

    /// Throughput probe for budget planning; run with --ignored --nocapture.
    #[test]
    #[ignore]
    fn bench_forward_backward_desk_arch() {
        let arch = Arch { horizon: 16, grid: 64, channels: 32, depth: 3, embed_dim: 32 };
        let mut model = ScoreModel::init(arch, ModelKind::Sync, 7).unwrap();
        wake_head(&mut model, 8);
        let (window, cond, levels, target) = random_inputs(&arch, 5);
        let mask = ObsMask::full(arch.grid);
        let mut scr = Scratch::new(&arch);
        let mut grads = GradBuffer::zeros(&arch);
        let reps = 200;
        let t0 = std::time::Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            sink += model.forward_backward(&window, &cond, &levels, &mask, &target, &mut scr, &mut grads);
        }
        let dt = t0.elapsed().as_secs_f64();
        let t1 = std::time::Instant::now();
        for _ in 0..reps {
            sink += model.forward(&window, &cond, &levels, &mask, &mut scr).data[0];
        }
        let dtf = t1.elapsed().as_secs_f64();
        println!(
            "fwd+bwd {:.3} ms/call, fwd {:.3} ms/call (sink {sink:.3e})",
            1e3 * dt / reps as f64,
            1e3 * dtf / reps as f64
        );
    }

    #[test]
    fn embedding_features_are_bounded_and_distinct() {
        let mut e1 = vec![0.0; 32];
        let mut e2 = vec![0.0; 32];
        sinusoidal_embedding(3.0, 32, &mut e1);
        sinusoidal_embedding(53.0, 32, &mut e2);
        assert!(e1.iter().all(|v| v.abs() <= 1.0));
        assert!(e1 != e2);
        // Slowest frequency distinguishes levels across the whole range.
        assert!((e1[15] - e2[15]).abs() > 1e-4 || (e1[31] - e2[31]).abs() > 1e-4);
    }
}
