//! Denoising losses, their noising rules, Adam, and the training loop.
//!
//! Both losses share one mechanism: slice an H-frame window out of a stored
//! trajectory, noise it, and regress the model's output onto the drawn noise
//! over observed cells. They differ only in the level pattern. The constant
//! pattern noises every frame to one shared level; the staircase pattern
//! noises frame j to base + j*(K/H), so a window holds progressively noisier
//! frames the further they sit in the future.
//!
//! Each batch element owns an RNG substream keyed by (seed, step, slot), so
//! results do not depend on thread scheduling and a rerun is bitwise equal.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::save_checkpoint;
use crate::rng::{domain, substream};
use crate::schedule::NoiseSchedule;
use crate::scorenet::{GradBuffer, ModelKind, ScoreModel, Scratch};
use crate::window::{ObsMask, Window, CHANNELS, CH_U, CH_W};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

/// One training sample before noising.
#[derive(Debug, Clone)]
pub struct Drawn {
    pub window: Window,
    pub cond: Vec<f64>,
}

/// Slice a window starting at a uniform tau in 1..=N-H+1; frame j pairs the
/// control applied during step tau+j with the state it produced, and the
/// condition is the state preceding the window.
pub fn draw_sample(ds: &Dataset, horizon: usize, rng: &mut ChaCha8Rng) -> Drawn {
    let n = ds.header.n;
    assert!(horizon >= 1 && n >= horizon, "window of {horizon} frames needs {horizon} steps, episode has {n}");
    let rec = rng.gen_range(0..ds.trajectories.len());
    let tau = rng.gen_range(1..=n - horizon + 1);
    let traj = &ds.trajectories[rec];
    let mut window = Window::zeros(horizon, ds.header.d_x);
    for j in 0..horizon {
        window.frame_mut(j, CH_W).copy_from_slice(&traj.controls[tau - 1 + j]);
        window.frame_mut(j, CH_U).copy_from_slice(&traj.states[tau + j]);
    }
    Drawn { window, cond: traj.states[tau - 1].clone() }
}

/// Batch of samples, each carrying the remainder of its own RNG stream for
/// the noising draws that follow.
pub fn draw_batch(
    ds: &Dataset,
    horizon: usize,
    seed: u64,
    step: usize,
    batch: usize,
) -> Vec<(Drawn, ChaCha8Rng)> {
    (0..batch)
        .map(|b| {
            let mut rng = substream(seed, domain::TRAIN, (step * batch + b) as u64);
            let drawn = draw_sample(ds, horizon, &mut rng);
            (drawn, rng)
        })
        .collect()
}

/// Per-frame schedule indices for constant-level noising.
pub fn sync_indices(i: usize, horizon: usize) -> Vec<usize> {
    vec![i; horizon]
}

/// Per-frame schedule indices for staircase noising.
pub fn async_indices(base: usize, stride: usize, horizon: usize) -> Vec<usize> {
    (0..horizon).map(|j| base + j * stride).collect()
}

/// Noise frame j of `win` to schedule index `indices[j]`; returns the noised
/// window and the drawn noise, which is the regression target.
pub fn noise_window(
    win: &Window,
    sched: &NoiseSchedule,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Window, Window) {
    assert_eq!(indices.len(), win.horizon, "one index per frame");
    let mut noised = Window::zeros(win.horizon, win.grid);
    let mut eps = Window::zeros(win.horizon, win.grid);
    let span = CHANNELS * win.grid;
    for (j, &idx) in indices.iter().enumerate() {
        let ab = sched.alpha_bars()[idx];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let base = j * span;
        for off in base..base + span {
            let e = crate::rng::randn(rng);
            eps.data[off] = e;
            noised.data[off] = sa * win.data[off] + sn * e;
        }
    }
    (noised, eps)
}

/// Mean squared error over observed cells, the reduction both losses use.
pub fn masked_mse(pred: &Window, target: &Window, mask: &ObsMask) -> f64 {
    let count = (pred.horizon * CHANNELS * mask.observed_count()) as f64;
    let mut loss = 0.0;
    for j in 0..pred.horizon {
        for ch in 0..CHANNELS {
            let p = pred.frame(j, ch);
            let t = target.frame(j, ch);
            for ((&pv, &tv), &m) in p.iter().zip(t).zip(&mask.cells) {
                let e = (pv - tv) * m;
                loss += e * e;
            }
        }
    }
    loss / count
}

fn loss_batch(
    model: &ScoreModel,
    batch: Vec<(Drawn, ChaCha8Rng)>,
    sched: &NoiseSchedule,
    mask: &ObsMask,
) -> (f64, GradBuffer) {
    let b = batch.len();
    assert!(b > 0, "empty batch");
    let h = model.arch.horizon;
    let stride = sched.k() / h;
    if model.kind == ModelKind::Async {
        assert_eq!(stride * h, sched.k(), "K must be divisible by H");
    }
    let per_sample: Vec<(f64, GradBuffer)> = batch
        .into_par_iter()
        .map_init(
            || Scratch::new(&model.arch),
            |scr, (drawn, mut rng)| {
                let indices = match model.kind {
                    ModelKind::Sync => sync_indices(rng.gen_range(0..sched.k()), h),
                    ModelKind::Async => async_indices(rng.gen_range(0..stride), stride, h),
                };
                let (noised, eps) = noise_window(&drawn.window, sched, &indices, &mut rng);
                let levels: Vec<usize> = indices.iter().map(|&i| i + 1).collect();
                let mut grads = GradBuffer::zeros(&model.arch);
                let loss = model
                    .forward_backward(&noised, &drawn.cond, &levels, mask, &eps, scr, &mut grads);
                (loss, grads)
            },
        )
        .collect();
    let mut grads = GradBuffer::zeros(&model.arch);
    let mut loss = 0.0;
    let scale = 1.0 / b as f64;
    for (l, g) in &per_sample {
        loss += l * scale;
        grads.add_scaled(g, scale);
    }
    (loss, grads)
}

/// Constant-level denoising loss over a batch: one level per sample, all
/// frames noised to it.
pub fn loss_synch_batch(
    model: &ScoreModel,
    batch: Vec<(Drawn, ChaCha8Rng)>,
    sched: &NoiseSchedule,
    mask: &ObsMask,
) -> (f64, GradBuffer) {
    assert_eq!(model.kind, ModelKind::Sync, "constant-level loss trains the sync model");
    loss_batch(model, batch, sched, mask)
}

/// Staircase denoising loss over a batch: one base level per sample, frame j
/// noised `j * K/H` levels deeper.
pub fn loss_asynch_batch(
    model: &ScoreModel,
    batch: Vec<(Drawn, ChaCha8Rng)>,
    sched: &NoiseSchedule,
    mask: &ObsMask,
) -> (f64, GradBuffer) {
    assert_eq!(model.kind, ModelKind::Async, "staircase loss trains the async model");
    loss_batch(model, batch, sched, mask)
}

/// Adam accumulators plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl OptimState {
    pub fn new(param_len: usize) -> Self {
        OptimState {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            step: 0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], st: &mut OptimState) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), st.m.len());
    st.step += 1;
    let bc1 = 1.0 - st.beta1.powi(st.step as i32);
    let bc2 = 1.0 - st.beta2.powi(st.step as i32);
    for i in 0..params.len() {
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
        let mhat = st.m[i] / bc1;
        let vhat = st.v[i] / bc2;
        params[i] -= st.lr * mhat / (vhat.sqrt() + st.eps_stab);
    }
}

/// Cosine annealing from `lr0` at step 0 to 0 at `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
    pub train_seed: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
            train_seed: 0,
            checkpoint_every: 1000,
        }
    }
}

/// Fixed-step training loop with cosine annealing. Returns `(step, loss, lr)`
/// rows; with an output directory it also writes `loss.csv`, periodic
/// checkpoints, and the final `model.cldpc`.
pub fn train(
    model: &mut ScoreModel,
    ds: &Dataset,
    sched: &NoiseSchedule,
    mask: &ObsMask,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<(usize, f64, f64)>> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::config("training needs at least one step and one sample"));
    }
    if ds.header.d_x != model.arch.grid {
        return Err(Error::config(format!(
            "dataset grid {} does not match model grid {}",
            ds.header.d_x, model.arch.grid
        )));
    }
    if ds.header.n < model.arch.horizon {
        return Err(Error::config(format!(
            "episodes of {} steps cannot hold {}-frame windows",
            ds.header.n, model.arch.horizon
        )));
    }
    if model.kind == ModelKind::Async && sched.k() % model.arch.horizon != 0 {
        return Err(Error::config(format!(
            "K={} not divisible by H={}",
            sched.k(),
            model.arch.horizon
        )));
    }
    if mask.grid() != model.arch.grid {
        return Err(Error::config("mask grid does not match model grid"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut opt = OptimState::new(model.params.len());
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.eps_stab = cfg.eps_stab;
    let mut curve = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        opt.lr = cosine_lr(cfg.lr, s, cfg.steps);
        let batch = draw_batch(ds, model.arch.horizon, cfg.train_seed, s, cfg.batch);
        let (loss, grads) = loss_batch(model, batch, sched, mask);
        adam_step(&mut model.params, &grads.data, &mut opt);
        curve.push((s, loss, opt.lr));
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 && s + 1 != cfg.steps
            {
                let path = dir.join(format!("ckpt_{:06}.cldpc", s + 1));
                save_checkpoint(&path, model, cfg.train_seed, s + 1)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("model.cldpc"), model, cfg.train_seed, cfg.steps)?;
        let mut csv = String::from("step,loss,lr\n");
        for (s, l, lr) in &curve {
            csv.push_str(&format!("{s},{l},{lr}\n"));
        }
        std::fs::write(dir.join("loss.csv"), csv)?;
    }
    Ok(curve)
}
