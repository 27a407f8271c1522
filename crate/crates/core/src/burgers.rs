//! 1D viscous Burgers environment on [0,1] with Dirichlet boundaries.
//!
//! State vectors have length `d_x` and span the closed domain: cell i sits at
//! x = i/(d_x-1), and cells 0 and d_x-1 are the boundary, pinned to exactly
//! 0.0 by every operation that produces a state. The explicit scheme uses
//! central differences for both the advection and diffusion terms and runs
//! `substeps` solver updates per control step, holding the forcing constant
//! across them. The quadratic tracking objective and its analytic gradient
//! (used to steer sampling) live here too, so the gradient can be checked
//! against finite differences of the objective in one place.

use crate::error::{Error, Result};
use crate::window::{ObsMask, Window, CH_U};
use rand::Rng;

/// Solver and episode geometry. `dt_solver * substeps * n_ctrl = 1`: an
/// episode always spans unit time regardless of resolution.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BurgersParams {
    /// Grid cells including the two boundary cells.
    pub d_x: usize,
    /// Grid spacing; cell i sits at x = i*dx.
    pub dx: f64,
    /// Viscosity.
    pub nu: f64,
    /// Solver updates per control step.
    pub substeps: usize,
    /// Solver time increment.
    pub dt_solver: f64,
    /// Control steps per episode.
    pub n_ctrl: usize,
}

impl BurgersParams {
    /// Unit-domain, unit-time parameters at the given resolution.
    pub fn new(d_x: usize, nu: f64, substeps: usize, n_ctrl: usize) -> Result<Self> {
        if d_x < 3 {
            return Err(Error::config("d_x must be at least 3"));
        }
        let p = BurgersParams {
            d_x,
            dx: 1.0 / (d_x - 1) as f64,
            nu,
            substeps,
            dt_solver: 1.0 / (substeps * n_ctrl) as f64,
            n_ctrl,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x < 3 || self.substeps == 0 || self.n_ctrl == 0 {
            return Err(Error::config("degenerate grid or step counts"));
        }
        if !(self.dx > 0.0) || !(self.nu >= 0.0) || !(self.dt_solver > 0.0) {
            return Err(Error::config("dx, nu, dt_solver must be positive"));
        }
        let span = self.dt_solver * (self.substeps * self.n_ctrl) as f64;
        if (span - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "episode must span unit time, got {span}"
            )));
        }
        let diff = self.nu * self.dt_solver / (self.dx * self.dx);
        if diff > 0.5 {
            return Err(Error::config(format!(
                "diffusion number {diff:.4} exceeds 0.5"
            )));
        }
        Ok(())
    }

    /// Control-step duration, the quadrature weight of the objective in time.
    #[inline]
    pub fn dt_control(&self) -> f64 {
        self.dt_solver * self.substeps as f64
    }
}

impl Default for BurgersParams {
    fn default() -> Self {
        BurgersParams::new(64, 0.01, 32, 32).expect("default parameters are stable")
    }
}

/// One episode: `states[0]` is the initial condition, `states[t]` the state
/// after control step t, `controls[t-1]` the forcing applied during it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

/// Advance one control step: `substeps` explicit updates of
/// u <- u + dt*(-u*D1(u) + nu*D2(u) + w) with w held constant.
pub fn env_step(u: &[f64], w: &[f64], p: &BurgersParams) -> Result<Vec<f64>> {
    let n = p.d_x;
    assert_eq!(u.len(), n, "state length");
    assert_eq!(w.len(), n, "control length");
    let dt = p.dt_solver;
    let inv2dx = 1.0 / (2.0 * p.dx);
    let invdx2 = 1.0 / (p.dx * p.dx);
    let mut cur = u.to_vec();
    let mut next = vec![0.0; n];
    for s in 0..p.substeps {
        let umax = cur.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let cfl = umax * dt / p.dx;
        if cfl > 1.0 {
            return Err(Error::Unstable { substep: s, cfl });
        }
        next[0] = 0.0;
        next[n - 1] = 0.0;
        for i in 1..n - 1 {
            let d1 = (cur[i + 1] - cur[i - 1]) * inv2dx;
            let d2 = (cur[i + 1] - 2.0 * cur[i] + cur[i - 1]) * invdx2;
            next[i] = cur[i] + dt * (-cur[i] * d1 + p.nu * d2 + w[i]);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup { substep: s });
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Roll the dynamics forward through every control in `w_seq`.
pub fn rollout(u0: &[f64], w_seq: &[Vec<f64>], p: &BurgersParams) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(w_seq.len() + 1);
    states.push(u0.to_vec());
    for w in w_seq {
        let next = env_step(states.last().expect("nonempty"), w, p)?;
        states.push(next);
    }
    Ok(Trajectory { states, controls: w_seq.to_vec() })
}

/// Riemann-sum tracking error over observed cells:
/// sum_t sum_x mask*(u - u_d)^2 * dx * dt_control.
pub fn objective_j(
    traj_u: &[Vec<f64>],
    u_d: &[Vec<f64>],
    mask: &ObsMask,
    dx: f64,
    dt_control: f64,
) -> f64 {
    assert_eq!(traj_u.len(), u_d.len(), "trajectory/target length");
    let mut j = 0.0;
    for (u, d) in traj_u.iter().zip(u_d) {
        for ((&uv, &dv), &m) in u.iter().zip(d).zip(&mask.cells) {
            let e = uv - dv;
            j += m * e * e;
        }
    }
    j * dx * dt_control
}

/// lambda * dJ/dz for a window's clean estimate: 2*lambda*mask*(u - u_d)*dx*dt
/// on the state channel, zero on the control channel. `target` holds only the
/// in-episode frames; any window frame at index >= target.len() lies past the
/// episode end and gets zero gradient.
pub fn guidance_grad(
    window_hat: &Window,
    target: &[&[f64]],
    mask: &ObsMask,
    lambda: f64,
    dx: f64,
    dt_control: f64,
) -> Window {
    assert!(target.len() <= window_hat.horizon, "target frames exceed horizon");
    let mut g = Window::zeros(window_hat.horizon, window_hat.grid);
    if lambda == 0.0 {
        return g;
    }
    let scale = 2.0 * lambda * dx * dt_control;
    for (j, d) in target.iter().enumerate() {
        let u = window_hat.frame(j, CH_U);
        let out = g.frame_mut(j, CH_U);
        for (((o, &uv), &dv), &m) in out.iter_mut().zip(u).zip(*d).zip(&mask.cells) {
            *o = scale * m * (uv - dv);
        }
    }
    g
}

/// Objective restricted to a window's state channel, the function
/// guidance_grad differentiates. Frames past `target.len()` carry no weight.
pub fn window_objective(
    window: &Window,
    target: &[&[f64]],
    mask: &ObsMask,
    dx: f64,
    dt_control: f64,
) -> f64 {
    let mut j = 0.0;
    for (jf, d) in target.iter().enumerate() {
        let u = window.frame(jf, CH_U);
        for ((&uv, &dv), &m) in u.iter().zip(*d).zip(&mask.cells) {
            let e = uv - dv;
            j += m * e * e;
        }
    }
    j * dx * dt_control
}

fn two_bump_field(rng: &mut impl Rng, p: &BurgersParams) -> Vec<f64> {
    let mut centers = [0.0; 2];
    let mut widths = [0.0; 2];
    let mut amps = [0.0; 2];
    for b in 0..2 {
        centers[b] = rng.gen_range(0.2..0.8);
        widths[b] = rng.gen_range(0.05..0.15);
        amps[b] = rng.gen_range(-1.5..1.5);
    }
    let n = p.d_x;
    let mut u = vec![0.0; n];
    for (i, v) in u.iter_mut().enumerate() {
        let x = i as f64 * p.dx;
        for b in 0..2 {
            let t = (x - centers[b]) / widths[b];
            *v += amps[b] * (-0.5 * t * t).exp();
        }
    }
    u[0] = 0.0;
    u[n - 1] = 0.0;
    u
}

/// Sum of two Gaussian bumps, boundary cells clamped to exactly zero.
pub fn make_initial_state(rng: &mut impl Rng, p: &BurgersParams) -> Vec<f64> {
    two_bump_field(rng, p)
}

/// Forcing sequence for data generation: two-bump spatial fields sampled at
/// every eighth control step and linearly interpolated between them.
pub fn make_control_sequence(rng: &mut impl Rng, p: &BurgersParams) -> Vec<Vec<f64>> {
    const KNOT_EVERY: usize = 8;
    let n = p.n_ctrl;
    let n_knots = (n - 1) / KNOT_EVERY + 2;
    let knots: Vec<Vec<f64>> = (0..n_knots).map(|_| two_bump_field(rng, p)).collect();
    (0..n)
        .map(|t| {
            let s = t as f64 / KNOT_EVERY as f64;
            let k = s as usize;
            let f = s - k as f64;
            knots[k]
                .iter()
                .zip(&knots[k + 1])
                .map(|(&a, &b)| a * (1.0 - f) + b * f)
                .collect()
        })
        .collect()
}

/// Target trajectory: the controlled states (after step 1..=N) of a uniformly
/// drawn element of `pool`.
pub fn make_target(rng: &mut impl Rng, pool: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
    if pool.is_empty() {
        return Err(Error::config("empty trajectory pool for target draw"));
    }
    let idx = rng.gen_range(0..pool.len());
    Ok(pool[idx].states[1..].to_vec())
}

/// Observation split of the control problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Setting {
    /// Every cell observed, controlled, and scored.
    FO,
    /// Only the outer quarters [0,1/4) and [3/4,1] observed; the central
    /// band is hidden from the controller and excluded from the objective.
    PO,
}

impl Setting {
    pub fn mask(&self, d_x: usize) -> ObsMask {
        match self {
            Setting::FO => ObsMask::full(d_x),
            Setting::PO => ObsMask::hide_band(d_x, 0.25, 0.75),
        }
    }
}

/// One control episode's inputs.
#[derive(Debug, Clone)]
pub struct ControlTask {
    pub u0: Vec<f64>,
    pub u_d: Vec<Vec<f64>>,
    pub obs_mask: ObsMask,
    pub lambda: f64,
    pub setting: Setting,
}
