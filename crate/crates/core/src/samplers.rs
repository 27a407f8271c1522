//! Guided window samplers and the closed-loop controller.
//!
//! Three layers. `Denoiser` and `Environment` abstract the learned noise
//! predictor and the physics so controllers can run against analytic stand-ins.
//! `sample_sync_window` runs the constant-level reverse chain and reads out a
//! staircase of intermediate iterates; `async_sweep` advances a staircase
//! window by one physical step's worth of denoising. The controllers wire
//! those into full episodes and record J, NFE, and wall clock.
//!
//! Levels are schedule levels (0 = clean, K = terminal); a frame at level l
//! uses array index l-1 for its marginal coefficients. Guidance is applied in
//! noise space: eps_eff = eps + sqrt(1-abar)/sqrt(abar) * grad, with the
//! gradient taken at the posterior-mean estimate of the clean window.

use crate::burgers::{
    env_step, guidance_grad, make_control_sequence, objective_j, BurgersParams, ControlTask,
};
use crate::error::{Error, Result};
use crate::rng::fill_normal;
use crate::schedule::{async_levels, NoiseSchedule};
use crate::scorenet::{ScoreModel, Scratch};
use crate::window::{ObsMask, Window, CHANNELS, CH_U, CH_W};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Per-frame noise prediction for a window of latents.
pub trait Denoiser {
    /// `levels[j]` is frame j's current schedule level, each in 1..=K.
    /// Output is zeroed at unobserved cells.
    fn predict(
        &mut self,
        window: &Window,
        cond: &[f64],
        levels: &[usize],
        mask: &ObsMask,
    ) -> Window;
}

/// A frozen score network plus its private scratch space.
pub struct NetDenoiser<'a> {
    model: &'a ScoreModel,
    scr: Scratch,
}

impl<'a> NetDenoiser<'a> {
    pub fn new(model: &'a ScoreModel) -> Self {
        NetDenoiser { model, scr: Scratch::new(&model.arch) }
    }
}

impl Denoiser for NetDenoiser<'_> {
    fn predict(
        &mut self,
        window: &Window,
        cond: &[f64],
        levels: &[usize],
        mask: &ObsMask,
    ) -> Window {
        self.model.forward(window, cond, levels, mask, &mut self.scr)
    }
}

/// Counts network calls; controllers report its total as NFE.
pub struct CountingDenoiser<'a> {
    inner: &'a mut dyn Denoiser,
    pub calls: usize,
}

impl<'a> CountingDenoiser<'a> {
    pub fn new(inner: &'a mut dyn Denoiser) -> Self {
        CountingDenoiser { inner, calls: 0 }
    }
}

impl Denoiser for CountingDenoiser<'_> {
    fn predict(
        &mut self,
        window: &Window,
        cond: &[f64],
        levels: &[usize],
        mask: &ObsMask,
    ) -> Window {
        self.calls += 1;
        self.inner.predict(window, cond, levels, mask)
    }
}

/// One physical transition. `u_prev` is the environment's current state, `w`
/// the executed control, `sampled_u` the sampler's own next-state guess.
pub trait Environment {
    fn step(&self, u_prev: &[f64], w: &[f64], sampled_u: &[f64]) -> Result<Vec<f64>>;
}

/// Viscous Burgers dynamics; ignores the sampled state.
pub struct BurgersEnv {
    pub params: BurgersParams,
}

impl Environment for BurgersEnv {
    fn step(&self, u_prev: &[f64], w: &[f64], _sampled_u: &[f64]) -> Result<Vec<f64>> {
        env_step(u_prev, w, &self.params)
    }
}

/// Analytic stand-ins for standard-normal data. The oracle predictor is the
/// exact conditional noise for z0 ~ N(0, I); the identity environment echoes
/// the sampled state back, closing the loop without physics.
pub mod oracle {
    use super::{Denoiser, Environment};
    use crate::error::Result;
    use crate::schedule::NoiseSchedule;
    use crate::window::{ObsMask, Window, CHANNELS};

    pub struct GaussianOracle {
        sched: NoiseSchedule,
    }

    impl GaussianOracle {
        pub fn new(sched: &NoiseSchedule) -> Self {
            GaussianOracle { sched: sched.clone() }
        }
    }

    impl Denoiser for GaussianOracle {
        fn predict(
            &mut self,
            window: &Window,
            _cond: &[f64],
            levels: &[usize],
            mask: &ObsMask,
        ) -> Window {
            let mut out = Window::zeros(window.horizon, window.grid);
            for j in 0..window.horizon {
                let b = (1.0 - self.sched.alpha_bar_at_level(levels[j])).sqrt();
                for ch in 0..CHANNELS {
                    for (x, (o, &z)) in
                        out.frame_mut(j, ch).iter_mut().zip(window.frame(j, ch)).enumerate()
                    {
                        *o = b * z * mask.cells[x];
                    }
                }
            }
            out
        }
    }

    pub struct IdentityEnv;

    impl Environment for IdentityEnv {
        fn step(&self, _u_prev: &[f64], _w: &[f64], sampled_u: &[f64]) -> Result<Vec<f64>> {
            Ok(sampled_u.to_vec())
        }
    }

    /// Always returns the same state; isolates the sampler from feedback.
    pub struct FrozenEnv {
        pub state: Vec<f64>,
    }

    impl Environment for FrozenEnv {
        fn step(&self, _u_prev: &[f64], _w: &[f64], _sampled_u: &[f64]) -> Result<Vec<f64>> {
            Ok(self.state.clone())
        }
    }
}

/// Reverse-chain stepping rule. `jump` is the level decrement per network
/// call; the subsampled chain must land exactly on every staircase snapshot
/// level, so `jump` has to divide both the span and the readout stride.
#[derive(Debug, Clone, PartialEq)]
pub enum StepMode {
    Ancestral,
    Ddim { jump: usize, eta: f64 },
}

impl StepMode {
    fn jump(&self) -> usize {
        match self {
            StepMode::Ancestral => 1,
            StepMode::Ddim { jump, .. } => *jump,
        }
    }
}

/// Everything the guidance term needs: target frames for the window's
/// physical steps (may be shorter than the horizon near the episode end;
/// frames past the end get zero weight), the observation mask, the
/// objective's quadrature weights, and the highest level guidance acts on.
pub struct GuidanceCtx<'a> {
    pub target: Vec<&'a [f64]>,
    pub mask: &'a ObsMask,
    pub lambda: f64,
    pub dx: f64,
    pub dt_control: f64,
    /// Frames above this level skip guidance; their posterior-mean estimate
    /// carries more model error than signal.
    pub max_level: usize,
    /// Per-frame trust region: the guidance term's norm is capped at this
    /// multiple of the noise prediction's norm. Keeps one step's pull from
    /// overwhelming the score where the posterior-mean estimate is noisy;
    /// direction is preserved. Infinite disables the cap.
    pub max_ratio: f64,
}

impl<'a> GuidanceCtx<'a> {
    pub fn unguided(mask: &'a ObsMask) -> Self {
        GuidanceCtx {
            target: Vec::new(),
            mask,
            lambda: 0.0,
            dx: 1.0,
            dt_control: 1.0,
            max_level: usize::MAX,
            max_ratio: f64::INFINITY,
        }
    }
}

/// Target slices for a window whose frame 0 is physical step `phys_start`
/// (1-based). Steps past the end of `u_d` are simply absent.
pub fn window_targets(u_d: &[Vec<f64>], phys_start: usize, horizon: usize) -> Vec<&[f64]> {
    (0..horizon)
        .filter_map(|j| u_d.get(phys_start - 1 + j))
        .map(|v| v.as_slice())
        .collect()
}

/// Guidance evaluates the objective gradient at a clamped copy of the
/// posterior-mean estimate. The estimate divides by sqrt(alpha_bar), so at
/// high levels it amplifies prediction error without bound; an unclamped
/// gradient feeds that amplitude back into the chain and can run away.
/// States live well inside [-3, 3], so the clamp is inert once the estimate
/// is informative. The chain update itself always consumes the raw eps.
pub const GUIDE_STATE_CLAMP: f64 = 3.0;

/// Noise-space guided prediction: form the posterior-mean window, take the
/// objective gradient there, and fold it back per frame with that frame's
/// own marginal coefficients.
fn guided_eps(
    sched: &NoiseSchedule,
    win: &Window,
    eps: &Window,
    levels: &[usize],
    gd: &GuidanceCtx,
) -> Window {
    let mut out = eps.clone();
    if gd.lambda == 0.0 || gd.target.is_empty() {
        return out;
    }
    let mut zhat = Window::zeros(win.horizon, win.grid);
    for (j, &lvl) in levels.iter().enumerate() {
        if lvl > gd.max_level {
            continue;
        }
        for ch in 0..CHANNELS {
            let hat = sched.tweedie_hat(win.frame(j, ch), eps.frame(j, ch), lvl - 1);
            zhat.frame_mut(j, ch).copy_from_slice(&hat);
        }
    }
    for v in zhat.data.iter_mut() {
        *v = v.clamp(-GUIDE_STATE_CLAMP, GUIDE_STATE_CLAMP);
    }
    let g = guidance_grad(&zhat, &gd.target, gd.mask, gd.lambda, gd.dx, gd.dt_control);
    for (j, &lvl) in levels.iter().enumerate() {
        if lvl > gd.max_level {
            continue;
        }
        let ab = sched.alpha_bar_at_level(lvl);
        let mut c = (1.0 - ab).sqrt() / ab.sqrt();
        if gd.max_ratio.is_finite() {
            let t_norm = c * norm(g.frame(j, CH_U));
            let e_norm = norm(eps.frame(j, CH_U));
            if t_norm > gd.max_ratio * e_norm {
                c *= gd.max_ratio * e_norm / t_norm;
            }
        }
        for (o, &gv) in out.frame_mut(j, CH_U).iter_mut().zip(g.frame(j, CH_U)) {
            *o += c * gv;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// An H-frame window of latents with per-frame noise levels.
#[derive(Debug, Clone)]
pub struct LatentWindow {
    pub frames: Window,
    pub levels: Vec<usize>,
    /// Physical step index (1-based) of frame 0.
    pub phys_start: usize,
}

impl LatentWindow {
    /// Retire frame 0, slide the rest forward, and append a fresh terminal
    /// latent ~ N(0, sigma_T^2) at level K. Restores the sweep entry levels.
    pub fn shift_append(&mut self, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) {
        let h = self.frames.horizon;
        let span = CHANNELS * self.frames.grid;
        self.frames.data.copy_within(span.., 0);
        fill_normal(rng, &mut self.frames.data[(h - 1) * span..], sched.sigma_t_sq().sqrt());
        for j in 0..h - 1 {
            self.levels[j] = self.levels[j + 1];
        }
        self.levels[h - 1] = sched.k();
        self.phys_start += 1;
    }
}

/// Constant-level reverse chain from `from_level` down to `to_level` with a
/// staircase readout: frame j freezes once the chain reaches (j+1)*to_level,
/// keeping the intermediate iterate it had there. With to_level = K/H this
/// returns the staircase window that seeds the per-step sweeps; with
/// to_level = 0 every frame is fully denoised. One network call per chain
/// step, each at the chain's current level for all frames.
pub fn sample_sync_window(
    den: &mut dyn Denoiser,
    u_cond: &[f64],
    sched: &NoiseSchedule,
    gd: &GuidanceCtx,
    horizon: usize,
    from_level: usize,
    to_level: usize,
    mode: &StepMode,
    phys_start: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LatentWindow> {
    let k = sched.k();
    if horizon == 0 || from_level <= to_level || from_level > k {
        return Err(Error::config(format!(
            "window chain must descend within 0..={k}, got {from_level} -> {to_level}"
        )));
    }
    let jump = mode.jump();
    if jump == 0 || (from_level - to_level) % jump != 0 || to_level % jump != 0 {
        return Err(Error::config(format!(
            "level jump {jump} must divide the span {from_level}-{to_level} and the readout level {to_level}"
        )));
    }
    let grid = gd.mask.grid();
    let freeze: Vec<usize> = (0..horizon).map(|j| ((j + 1) * to_level).min(from_level)).collect();
    let mut win = Window::zeros(horizon, grid);
    fill_normal(rng, &mut win.data, sched.sigma_t_sq().sqrt());
    let mut xi = vec![0.0; grid];
    let mut lvl = from_level;
    while lvl > to_level {
        let next = lvl - jump;
        let levels = vec![lvl; horizon];
        let eps = den.predict(&win, u_cond, &levels, gd.mask);
        let eps = guided_eps(sched, &win, &eps, &levels, gd);
        for j in 0..horizon {
            if freeze[j] >= lvl {
                continue;
            }
            for ch in 0..CHANNELS {
                fill_normal(rng, &mut xi, 1.0);
                let stepped = match mode {
                    StepMode::Ancestral => {
                        sched.ancestral_step(win.frame(j, ch), eps.frame(j, ch), lvl, &xi)
                    }
                    StepMode::Ddim { eta, .. } => {
                        sched.ddim_step(win.frame(j, ch), eps.frame(j, ch), lvl, next, *eta, &xi)
                    }
                };
                win.frame_mut(j, ch).copy_from_slice(&stepped);
            }
        }
        lvl = next;
    }
    Ok(LatentWindow { frames: win, levels: freeze, phys_start })
}

/// One physical step's denoising of a staircase window: K/H guided steps in
/// which frame j walks from (j+1)*K/H down to j*K/H, always exactly j*K/H
/// levels above frame 0. Conditioned on the latest environment state. One
/// network call per inner step.
pub fn async_sweep(
    den: &mut dyn Denoiser,
    mut lw: LatentWindow,
    u_env_prev: &[f64],
    sched: &NoiseSchedule,
    gd: &GuidanceCtx,
    mode: &StepMode,
    rng: &mut ChaCha8Rng,
) -> Result<LatentWindow> {
    let k = sched.k();
    let h = lw.frames.horizon;
    let entry = async_levels(k / h.max(1), h, k)?;
    if lw.levels != entry {
        return Err(Error::config(format!(
            "sweep entry levels {:?} must be the staircase {:?}",
            lw.levels, entry
        )));
    }
    let stride = k / h;
    let jump = mode.jump();
    if jump == 0 || stride % jump != 0 {
        return Err(Error::config(format!(
            "level jump {jump} must divide the sweep stride {stride}"
        )));
    }
    let mut xi = vec![0.0; lw.frames.grid];
    let mut t = stride;
    while t > 0 {
        let next = t - jump;
        let levels: Vec<usize> = (0..h).map(|j| t + j * stride).collect();
        assert!(
            levels.iter().enumerate().all(|(j, &l)| l - levels[0] == j * stride),
            "staircase offsets drifted"
        );
        let eps = den.predict(&lw.frames, u_env_prev, &levels, gd.mask);
        let eps = guided_eps(sched, &lw.frames, &eps, &levels, gd);
        for j in 0..h {
            let lvl = levels[j];
            for ch in 0..CHANNELS {
                fill_normal(rng, &mut xi, 1.0);
                let stepped = match mode {
                    StepMode::Ancestral => {
                        sched.ancestral_step(lw.frames.frame(j, ch), eps.frame(j, ch), lvl, &xi)
                    }
                    StepMode::Ddim { eta, .. } => sched.ddim_step(
                        lw.frames.frame(j, ch),
                        eps.frame(j, ch),
                        lvl,
                        next + j * stride,
                        *eta,
                        &xi,
                    ),
                };
                lw.frames.frame_mut(j, ch).copy_from_slice(&stepped);
            }
        }
        for (j, l) in lw.levels.iter_mut().enumerate() {
            *l = next + j * stride;
        }
        t = next;
    }
    Ok(lw)
}

/// Controller knobs shared by the episode runners.
#[derive(Debug, Clone)]
pub struct CtrlConfig {
    /// Planning window length H.
    pub horizon: usize,
    pub mode: StepMode,
    /// Quadrature weights of the objective and its guidance gradient.
    pub dx: f64,
    pub dt_control: f64,
    /// Highest noise level guidance acts on; usize::MAX guides everywhere.
    pub guide_max_level: usize,
    /// Per-frame cap on guidance norm relative to the noise prediction.
    pub guide_max_ratio: f64,
}

impl CtrlConfig {
    /// Unit quadrature; for analytic-oracle runs where J is dimensionless.
    pub fn unit(horizon: usize) -> Self {
        CtrlConfig {
            horizon,
            mode: StepMode::Ancestral,
            dx: 1.0,
            dt_control: 1.0,
            guide_max_level: usize::MAX,
            guide_max_ratio: f64::INFINITY,
        }
    }

    pub fn for_params(horizon: usize, p: &BurgersParams) -> Self {
        CtrlConfig {
            horizon,
            mode: StepMode::Ancestral,
            dx: p.dx,
            dt_control: p.dt_control(),
            guide_max_level: usize::MAX,
            guide_max_ratio: f64::INFINITY,
        }
    }
}

impl Default for CtrlConfig {
    fn default() -> Self {
        CtrlConfig::unit(16)
    }
}

/// One finished (or aborted) control episode.
#[derive(Debug, Clone)]
pub struct ControlResult {
    pub executed_w: Vec<Vec<f64>>,
    /// Environment states including the initial one; entry 0 is u0.
    pub env_states: Vec<Vec<f64>>,
    /// Objective recomputed from the environment trajectory.
    pub j: f64,
    /// Network calls across initialization and all replanning.
    pub nfe: usize,
    pub wall_clock: f64,
    pub seed: u64,
    /// Environment blew up; the trajectory is the partial prefix.
    pub failed: bool,
}

fn finish(
    task: &ControlTask,
    cfg: &CtrlConfig,
    executed_w: Vec<Vec<f64>>,
    env_states: Vec<Vec<f64>>,
    nfe: usize,
    started: Instant,
    seed: u64,
    failed: bool,
) -> ControlResult {
    let j = objective_j(
        &env_states[1..],
        &task.u_d[..executed_w.len()],
        &task.obs_mask,
        cfg.dx,
        cfg.dt_control,
    );
    ControlResult {
        executed_w,
        env_states,
        j,
        nfe,
        wall_clock: started.elapsed().as_secs_f64(),
        seed,
        failed,
    }
}

/// Closed-loop control: one expensive initialization from terminal noise down
/// to the staircase, then one cheap sweep per physical step. Each sweep is
/// conditioned on the state the environment actually returned; the sampler's
/// own next-state guess is discarded after being offered to the environment.
pub fn closed_loop_control(
    phi: &mut dyn Denoiser,
    theta: &mut dyn Denoiser,
    env: &dyn Environment,
    task: &ControlTask,
    sched: &NoiseSchedule,
    cfg: &CtrlConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<ControlResult> {
    let started = Instant::now();
    let n = task.u_d.len();
    let (k, h) = (sched.k(), cfg.horizon);
    if n == 0 {
        return Err(Error::config("empty target trajectory"));
    }
    if h == 0 || k % h != 0 {
        return Err(Error::config(format!("horizon {h} must divide the schedule length {k}")));
    }
    let stride = k / h;
    let mask = &task.obs_mask;
    let mut phi_c = CountingDenoiser::new(phi);
    let mut theta_c = CountingDenoiser::new(theta);

    let gd = GuidanceCtx {
        target: window_targets(&task.u_d, 1, h),
        mask,
        lambda: task.lambda,
        dx: cfg.dx,
        dt_control: cfg.dt_control,
        max_level: cfg.guide_max_level,
        max_ratio: cfg.guide_max_ratio,
    };
    let mut lw = sample_sync_window(
        &mut phi_c,
        &mask.masked_copy(&task.u0),
        sched,
        &gd,
        h,
        k,
        stride,
        &cfg.mode,
        1,
        rng,
    )?;

    let mut u_env = task.u0.clone();
    let mut env_states = Vec::with_capacity(n + 1);
    env_states.push(u_env.clone());
    let mut executed_w = Vec::with_capacity(n);
    let mut failed = false;
    for tau in 1..=n {
        let gd = GuidanceCtx {
            target: window_targets(&task.u_d, tau, h),
            mask,
            lambda: task.lambda,
            dx: cfg.dx,
            dt_control: cfg.dt_control,
            max_level: cfg.guide_max_level,
            max_ratio: cfg.guide_max_ratio,
        };
        lw = async_sweep(
            &mut theta_c,
            lw,
            &mask.masked_copy(&u_env),
            sched,
            &gd,
            &cfg.mode,
            rng,
        )?;
        let w = mask.masked_copy(lw.frames.frame(0, CH_W));
        match env.step(&u_env, &w, lw.frames.frame(0, CH_U)) {
            Ok(next) => {
                executed_w.push(w);
                u_env = next.clone();
                env_states.push(next);
            }
            Err(Error::Blowup { .. }) | Err(Error::Unstable { .. }) => {
                failed = true;
                break;
            }
            Err(e) => return Err(e),
        }
        lw.shift_append(sched, rng);
    }
    let nfe = phi_c.calls + theta_c.calls;
    Ok(finish(task, cfg, executed_w, env_states, nfe, started, seed, failed))
}

/// Receding-horizon baseline: every `h_exec` steps, sample a full window from
/// terminal noise to clean conditioned on the current state, then execute its
/// first `h_exec` controls open-loop.
pub fn diffphycon_h_control(
    phi: &mut dyn Denoiser,
    env: &dyn Environment,
    task: &ControlTask,
    sched: &NoiseSchedule,
    h_exec: usize,
    cfg: &CtrlConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<ControlResult> {
    let started = Instant::now();
    let n = task.u_d.len();
    let h = cfg.horizon;
    if n == 0 {
        return Err(Error::config("empty target trajectory"));
    }
    if h_exec == 0 || h_exec > h {
        return Err(Error::config(format!(
            "replan interval {h_exec} must lie in 1..={h}"
        )));
    }
    let mask = &task.obs_mask;
    let mut phi_c = CountingDenoiser::new(phi);
    let mut u_env = task.u0.clone();
    let mut env_states = Vec::with_capacity(n + 1);
    env_states.push(u_env.clone());
    let mut executed_w = Vec::with_capacity(n);
    let mut failed = false;
    let mut tau = 1usize;
    'episode: while tau <= n {
        let gd = GuidanceCtx {
            target: window_targets(&task.u_d, tau, h),
            mask,
            lambda: task.lambda,
            dx: cfg.dx,
            dt_control: cfg.dt_control,
            max_level: cfg.guide_max_level,
            max_ratio: cfg.guide_max_ratio,
        };
        let lw = sample_sync_window(
            &mut phi_c,
            &mask.masked_copy(&u_env),
            sched,
            &gd,
            h,
            sched.k(),
            0,
            &cfg.mode,
            tau,
            rng,
        )?;
        let take = h_exec.min(n - tau + 1);
        for i in 0..take {
            let w = mask.masked_copy(lw.frames.frame(i, CH_W));
            match env.step(&u_env, &w, lw.frames.frame(i, CH_U)) {
                Ok(next) => {
                    executed_w.push(w);
                    u_env = next.clone();
                    env_states.push(next);
                }
                Err(Error::Blowup { .. }) | Err(Error::Unstable { .. }) => {
                    failed = true;
                    break 'episode;
                }
                Err(e) => return Err(e),
            }
        }
        tau += take;
    }
    Ok(finish(task, cfg, executed_w, env_states, phi_c.calls, started, seed, failed))
}

/// Performance floor: execute a bump-distributed random forcing sequence.
pub fn random_control(
    env: &dyn Environment,
    task: &ControlTask,
    p: &BurgersParams,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<ControlResult> {
    let started = Instant::now();
    let n = task.u_d.len();
    if p.n_ctrl != n {
        return Err(Error::config(format!(
            "control sequence length {} does not match the target's {n} steps",
            p.n_ctrl
        )));
    }
    let cfg = CtrlConfig::for_params(1, p);
    let mask = &task.obs_mask;
    let w_seq = make_control_sequence(rng, p);
    let mut u_env = task.u0.clone();
    let mut env_states = Vec::with_capacity(n + 1);
    env_states.push(u_env.clone());
    let mut executed_w = Vec::with_capacity(n);
    let mut failed = false;
    for w_raw in &w_seq {
        let w = mask.masked_copy(w_raw);
        match env.step(&u_env, &w, &u_env) {
            Ok(next) => {
                executed_w.push(w);
                u_env = next.clone();
                env_states.push(next);
            }
            Err(Error::Blowup { .. }) | Err(Error::Unstable { .. }) => {
                failed = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(finish(task, &cfg, executed_w, env_states, 0, started, seed, failed))
}

/// Pick the guidance strength that makes the guidance drift a fixed fraction
/// of the score drift at mid-schedule, probed on target-trajectory windows.
/// The trust-region cap in the sampler bounds the noisier levels, so the
/// probe sits where the posterior-mean estimate is representative.
pub fn calibrate_lambda(
    den: &mut dyn Denoiser,
    task: &ControlTask,
    sched: &NoiseSchedule,
    cfg: &CtrlConfig,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let h = cfg.horizon;
    let mask = &task.obs_mask;
    let grid = mask.grid();
    let mid = (sched.k() / 2).min(cfg.guide_max_level).max(1);
    let i = mid - 1;
    let cond = mask.masked_copy(&task.u0);
    let mut clean = Window::zeros(h, grid);
    for j in 0..h {
        let t = &task.u_d[j.min(task.u_d.len() - 1)];
        clean.frame_mut(j, CH_U).copy_from_slice(t);
    }
    let target = window_targets(&task.u_d, 1, h);
    let levels = vec![mid; h];
    let ab = sched.alpha_bars()[i];
    let chain = (1.0 - ab).sqrt() / ab.sqrt();
    let (mut score_sq, mut guide_sq) = (0.0, 0.0);
    let mut eps = vec![0.0; grid];
    for _ in 0..8 {
        let mut noised = Window::zeros(h, grid);
        for j in 0..h {
            for ch in 0..CHANNELS {
                fill_normal(rng, &mut eps, 1.0);
                noised.frame_mut(j, ch).copy_from_slice(&sched.noise_to(clean.frame(j, ch), i, &eps));
            }
        }
        let pred = den.predict(&noised, &cond, &levels, mask);
        let mut zhat = Window::zeros(h, grid);
        for j in 0..h {
            for ch in 0..CHANNELS {
                let hat = sched.tweedie_hat(noised.frame(j, ch), pred.frame(j, ch), i);
                zhat.frame_mut(j, ch).copy_from_slice(&hat);
            }
        }
        for v in zhat.data.iter_mut() {
            *v = v.clamp(-GUIDE_STATE_CLAMP, GUIDE_STATE_CLAMP);
        }
        let g = guidance_grad(&zhat, &target, mask, 1.0, cfg.dx, cfg.dt_control);
        score_sq += pred.data.iter().map(|v| v * v).sum::<f64>();
        guide_sq += g.data.iter().map(|v| (chain * v) * (chain * v)).sum::<f64>();
    }
    if guide_sq <= 0.0 {
        return 0.0;
    }
    fraction * (score_sq / guide_sq).sqrt()
}
