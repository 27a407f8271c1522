//! Variance-preserving noise schedule and the elementary denoising steps.
//!
//! Levels run 0..=K: level 0 is clean data, level K is (approximately) pure
//! noise with unit variance. `betas` and `alpha_bars` are 0-indexed arrays of
//! length K; the state at level l >= 1 has marginal coefficient
//! `alpha_bars[l-1]`, and alpha_bar(0) := 1. `noise_to` / `tweedie_hat` take
//! the array index i (producing or inverting the state at level i+1);
//! `ancestral_step` / `ddim_step` take levels.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma_t_sq: f64,
}

impl NoiseSchedule {
    /// Build from an explicit beta sequence. Betas must lie strictly inside
    /// (0, 1) and strictly increase; at least two steps are required.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::config(format!(
                "noise schedule needs K >= 2 steps, got {}",
                betas.len()
            )));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("beta[{i}] = {b} outside (0, 1)")));
            }
            if i > 0 && b <= betas[i - 1] {
                return Err(Error::config(format!(
                    "betas must strictly increase: beta[{}] = {} >= beta[{i}] = {b}",
                    i - 1,
                    betas[i - 1]
                )));
            }
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars, sigma_t_sq: 1.0 })
    }

    /// Linear beta ramp from `beta_min` to `beta_max` over K steps.
    pub fn linear(k: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::config(format!("noise schedule needs K >= 2 steps, got {k}")));
        }
        if !(beta_min < beta_max) {
            return Err(Error::config(format!(
                "beta_min {beta_min} must be below beta_max {beta_max}"
            )));
        }
        let betas = (0..k)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (k - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.betas.len()
    }

    #[inline]
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    #[inline]
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Variance of the level-K initialization noise.
    #[inline]
    pub fn sigma_t_sq(&self) -> f64 {
        self.sigma_t_sq
    }

    /// Marginal coefficient at a level in 0..=K; alpha_bar(0) = 1.
    #[inline]
    pub fn alpha_bar_at_level(&self, level: usize) -> f64 {
        assert!(level <= self.k(), "level {level} outside 0..={}", self.k());
        if level == 0 {
            1.0
        } else {
            self.alpha_bars[level - 1]
        }
    }

    /// Marginal coefficient of the terminal (level K) distribution. Sampling
    /// quality requires this to be near zero; callers configuring short
    /// schedules for bookkeeping tests may ignore it.
    pub fn terminal_alpha_bar(&self) -> f64 {
        *self.alpha_bars.last().unwrap()
    }

    /// Forward-noise clean data to the state at level i+1 (array index i):
    /// sqrt(ab[i]) z0 + sqrt(1 - ab[i]) eps.
    pub fn noise_to(&self, z0: &[f64], i: usize, eps: &[f64]) -> Vec<f64> {
        assert!(i < self.k(), "array index {i} outside 0..{}", self.k());
        assert_eq!(z0.len(), eps.len());
        let ab = self.alpha_bars[i];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect()
    }

    /// Posterior-mean estimate of the clean data from the state at level i+1
    /// (array index i) and its predicted noise.
    pub fn tweedie_hat(&self, z: &[f64], eps: &[f64], i: usize) -> Vec<f64> {
        assert!(i < self.k(), "array index {i} outside 0..{}", self.k());
        assert_eq!(z.len(), eps.len());
        let ab = self.alpha_bars[i];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z.iter().zip(eps).map(|(&z, &e)| (z - b * e) / a).collect()
    }

    /// One backward transition from `level` to `level - 1`. `level` ranges
    /// over 1..=K; the step onto clean data (level 1) suppresses the noise.
    pub fn ancestral_step(&self, z: &[f64], eps: &[f64], level: usize, xi: &[f64]) -> Vec<f64> {
        assert!(
            level >= 1 && level <= self.k(),
            "ancestral_step level {level} outside 1..={}",
            self.k()
        );
        assert!(z.len() == eps.len() && z.len() == xi.len());
        let beta = self.betas[level - 1];
        let ab = self.alpha_bars[level - 1];
        let drift = 1.0 / (1.0 - beta).sqrt();
        let score_coef = -beta / (1.0 - ab).sqrt();
        let noise = if level == 1 { 0.0 } else { beta.sqrt() };
        z.iter()
            .zip(eps)
            .zip(xi)
            .map(|((&z, &e), &x)| drift * z + score_coef * e + noise * x)
            .collect()
    }

    /// One (possibly multi-level) DDIM transition from `level` down to
    /// `level_next`. eta = 0 is deterministic; eta = 1 matches the ancestral
    /// variance on adjacent levels. A jump to level 0 returns the posterior
    /// mean exactly.
    pub fn ddim_step(
        &self,
        z: &[f64],
        eps: &[f64],
        level: usize,
        level_next: usize,
        eta: f64,
        xi: &[f64],
    ) -> Vec<f64> {
        assert!(
            level >= 1 && level <= self.k() && level_next < level,
            "ddim_step needs 0 <= level_next < level <= K, got {level_next} < {level}"
        );
        assert!(z.len() == eps.len() && z.len() == xi.len());
        let ab = self.alpha_bar_at_level(level);
        let abn = self.alpha_bar_at_level(level_next);
        let sigma = eta * ((1.0 - abn) / (1.0 - ab)).sqrt() * (1.0 - ab / abn).sqrt();
        // Rounding can push the direction radicand a hair below zero.
        let dir = (1.0 - abn - sigma * sigma).max(0.0).sqrt();
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let san = abn.sqrt();
        z.iter()
            .zip(eps)
            .zip(xi)
            .map(|((&z, &e), &x)| {
                let zhat0 = (z - sb * e) / sa;
                san * zhat0 + dir * e + sigma * x
            })
            .collect()
    }

    /// Descending uniform level grid for subsampled chains. The span must
    /// divide evenly so staircase snapshot levels stay on the grid.
    pub fn ddim_grid(from_level: usize, to_level: usize, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || from_level <= to_level {
            return Err(Error::config(format!(
                "ddim grid needs steps >= 1 and from > to, got {steps} steps over {from_level}..{to_level}"
            )));
        }
        let span = from_level - to_level;
        if span % steps != 0 {
            return Err(Error::config(format!(
                "ddim steps {steps} must divide the level span {span}"
            )));
        }
        let f = span / steps;
        Ok((0..=steps).map(|s| from_level - s * f).collect())
    }
}

/// Per-frame denoising levels of a planning window.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelVector {
    pub levels: Vec<usize>,
    pub stride: usize,
}

impl LevelVector {
    /// All frames at the same level (synchronous denoising).
    pub fn constant(level: usize, horizon: usize) -> Self {
        LevelVector { levels: vec![level; horizon], stride: 0 }
    }

    /// Arithmetic staircase base + j * stride (asynchronous denoising).
    pub fn staircase(base: usize, stride: usize, horizon: usize) -> Self {
        LevelVector { levels: (0..horizon).map(|j| base + j * stride).collect(), stride }
    }

    #[inline]
    pub fn as_slice(&self) -> &[usize] {
        &self.levels
    }
}

/// Staircase levels i + j*(K/H) for a window whose leading frame sits at
/// base level i. Requires H to divide K and i <= K/H so every level stays
/// within 0..=K.
pub fn async_levels(i: usize, h: usize, k: usize) -> Result<Vec<usize>> {
    if h == 0 || k % h != 0 {
        return Err(Error::config(format!("horizon {h} must divide the schedule length {k}")));
    }
    let stride = k / h;
    if i > stride {
        return Err(Error::config(format!(
            "base level {i} exceeds the stride {stride}; frame {} would pass level {k}",
            h - 1
        )));
    }
    Ok((0..h).map(|j| i + j * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normal, randn, substream};

    fn desk() -> NoiseSchedule {
        NoiseSchedule::linear(800, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn worked_example_two_steps() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert_eq!(s.alpha_bars()[0], 0.9);
        assert_eq!(s.alpha_bars()[1], 0.9 * 0.8);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.sigma_t_sq(), 1.0);

        let z = s.noise_to(&[1.0], 1, &[0.5]);
        let expect = 0.72f64.sqrt() + 0.28f64.sqrt() * 0.5;
        assert_eq!(z[0], expect);
        assert!((z[0] - 1.1131).abs() < 1e-4);
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 0.02).is_err());
    }

    #[test]
    fn linear_ramp_endpoints_and_recurrence() {
        let s = desk();
        assert_eq!(s.k(), 800);
        assert_eq!(s.betas()[0], 1e-4);
        assert_eq!(s.betas()[799], 0.02);
        for i in 1..s.k() {
            assert!(s.betas()[i] > s.betas()[i - 1] && s.betas()[i] < 1.0);
            assert!(s.alpha_bars()[i] < s.alpha_bars()[i - 1]);
            // The cumulative product recurrence must hold bitwise.
            assert_eq!(s.alpha_bars()[i], s.alpha_bars()[i - 1] * (1.0 - s.betas()[i]));
        }
    }

    #[test]
    fn terminal_alpha_bar_matches_log_sum_oracle() {
        let s = desk();
        // Independent oracle: accumulate in log space instead of a product.
        let log_sum: f64 = s.betas().iter().map(|&b| (-b).ln_1p()).sum();
        let oracle = log_sum.exp();
        let got = s.terminal_alpha_bar();
        assert!((got - oracle).abs() / oracle < 1e-10, "got {got}, oracle {oracle}");
        assert!(got < 1e-3, "terminal alpha_bar {got} not close enough to zero");
        assert!((got - 3.053116241667667e-4).abs() < 1e-15, "frozen literal drifted: {got:e}");
    }

    #[test]
    fn tweedie_inverts_forward_noising() {
        let s = desk();
        let mut rng = substream(42, 0, 0);
        for &i in &[0usize, 1, 399, 798, 799] {
            let mut z0 = vec![0.0; 32];
            let mut eps = vec![0.0; 32];
            fill_normal(&mut rng, &mut z0, 1.0);
            fill_normal(&mut rng, &mut eps, 1.0);
            let z = s.noise_to(&z0, i, &eps);
            let back = s.tweedie_hat(&z, &eps, i);
            for (a, b) in back.iter().zip(&z0) {
                assert!((a - b).abs() < 1e-10, "index {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "array index")]
    fn noise_to_rejects_out_of_range_index() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        s.noise_to(&[1.0], 2, &[0.0]);
    }

    #[test]
    #[should_panic(expected = "ancestral_step level")]
    fn ancestral_step_rejects_level_zero() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        s.ancestral_step(&[1.0], &[0.0], 0, &[0.0]);
    }

    #[test]
    fn alpha_bar_at_level_maps_levels_to_entries() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert_eq!(s.alpha_bar_at_level(0), 1.0);
        assert_eq!(s.alpha_bar_at_level(1), 0.9);
        assert_eq!(s.alpha_bar_at_level(2), 0.9 * 0.8);
    }

    /// Full backward chain with the exact score of N(0,1) data returns
    /// N(0,1) samples up to the Euler discretization bias.
    #[test]
    fn ancestral_chain_gaussian_closure() {
        let s = desk();
        let mut rng = substream(7, 0, 1);
        let n = 10_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let mut z = randn(&mut rng) * s.sigma_t_sq().sqrt();
            for level in (1..=s.k()).rev() {
                let ab = s.alpha_bar_at_level(level);
                let eps = (1.0 - ab).sqrt() * z;
                let xi = randn(&mut rng);
                z = s.ancestral_step(&[z], &[eps], level, &[xi])[0];
            }
            sum += z;
            sum2 += z * z;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "terminal mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "terminal var {var}");
    }

    /// On adjacent levels, eta = 1 DDIM and the ancestral step agree in
    /// distribution (same mean and variance up to O(beta^2)).
    #[test]
    fn ddim_adjacent_matches_ancestral_moments() {
        let s = desk();
        let level = 400;
        let ab = s.alpha_bar_at_level(level);
        let mut rng = substream(13, 0, 2);
        let n = 10_000;
        let (mut ma, mut va, mut md, mut vd) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let z = randn(&mut rng);
            let eps = (1.0 - ab).sqrt() * z;
            let a = s.ancestral_step(&[z], &[eps], level, &[randn(&mut rng)])[0];
            let d = s.ddim_step(&[z], &[eps], level, level - 1, 1.0, &[randn(&mut rng)])[0];
            ma += a;
            va += a * a;
            md += d;
            vd += d * d;
        }
        let (ma, md) = (ma / n as f64, md / n as f64);
        let (va, vd) = (va / n as f64 - ma * ma, vd / n as f64 - md * md);
        let se_mean = (2.0 / n as f64).sqrt();
        let se_var = 2.0 * (2.0 / n as f64).sqrt();
        assert!((ma - md).abs() < 3.0 * se_mean, "means {ma} vs {md}");
        assert!((va - vd).abs() < 3.0 * se_var, "vars {va} vs {vd}");
    }

    /// Coarse DDIM jumps contract the marginal of wide (non-degenerate)
    /// data; the exact linear-Gaussian recursion below is the reference the
    /// Monte-Carlo chain must match. For N(0,1) data and the exact
    /// eps-predictor every update is linear in z, so the output variance
    /// obeys v' = c^2 v + sigma^2 exactly.
    #[test]
    fn ddim_subsampled_chain_matches_linear_gaussian_oracle() {
        let s = desk();
        let steps = 30;
        let grid: Vec<usize> =
            (0..=steps).map(|j| ((800 * (steps - j)) as f64 / steps as f64).round() as usize).collect();
        assert_eq!(grid[0], 800);
        assert_eq!(grid[steps], 0);

        let mut v_oracle = s.sigma_t_sq();
        for w in grid.windows(2) {
            let (ab, abn) = (s.alpha_bar_at_level(w[0]), s.alpha_bar_at_level(w[1]));
            let sigma = ((1.0 - abn) / (1.0 - ab)).sqrt() * (1.0 - ab / abn).sqrt();
            let dir = (1.0 - abn - sigma * sigma).max(0.0).sqrt();
            // Exact predictor: eps = sqrt(1-ab) z, zhat0 = sqrt(ab) z.
            let c = (abn * ab).sqrt() + dir * (1.0 - ab).sqrt();
            v_oracle = c * c * v_oracle + sigma * sigma;
        }
        assert!((v_oracle - 0.8032910377833912).abs() < 1e-12, "frozen literal drifted: {v_oracle}");

        let mut rng = substream(17, 0, 3);
        let n = 10_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let mut z = randn(&mut rng);
            for w in grid.windows(2) {
                let ab = s.alpha_bar_at_level(w[0]);
                let eps = (1.0 - ab).sqrt() * z;
                z = s.ddim_step(&[z], &[eps], w[0], w[1], 1.0, &[randn(&mut rng)])[0];
            }
            sum += z;
            sum2 += z * z;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let se_mean = (v_oracle / n as f64).sqrt();
        let se_var = v_oracle * (2.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - v_oracle).abs() < 3.0 * se_var, "var {var} vs oracle {v_oracle}");
    }

    #[test]
    fn ddim_final_jump_returns_posterior_mean() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let z = [1.3];
        let eps = [0.4];
        let out = s.ddim_step(&z, &eps, 1, 0, 1.0, &[99.0]);
        let zhat0 = (z[0] - (1.0f64 - 0.9).sqrt() * eps[0]) / 0.9f64.sqrt();
        assert!((out[0] - zhat0).abs() < 1e-14);
    }

    #[test]
    fn staircase_levels_follow_the_stride() {
        let levels = async_levels(3, 16, 800).unwrap();
        assert_eq!(levels.len(), 16);
        assert_eq!(levels[0], 3);
        assert_eq!(levels[1], 53);
        assert_eq!(levels[15], 3 + 15 * 50);
        for w in levels.windows(2) {
            assert_eq!(w[1] - w[0], 50);
        }

        let exit = async_levels(0, 16, 800).unwrap();
        assert_eq!(exit[0], 0);
        assert_eq!(exit[15], 750);

        assert!(async_levels(3, 16, 801).is_err());
        assert!(async_levels(51, 16, 800).is_err());
        assert!(async_levels(3, 0, 800).is_err());
    }

    #[test]
    fn level_vectors_are_monotone() {
        let c = LevelVector::constant(7, 5);
        assert!(c.levels.iter().all(|&l| l == 7));
        let st = LevelVector::staircase(2, 50, 16);
        assert!(st.levels.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(st.levels[15], 2 + 15 * 50);
    }

    #[test]
    fn ddim_grid_requires_divisibility() {
        let g = NoiseSchedule::ddim_grid(50, 0, 10).unwrap();
        assert_eq!(g, vec![50, 45, 40, 35, 30, 25, 20, 15, 10, 5, 0]);
        let g = NoiseSchedule::ddim_grid(800, 50, 150).unwrap();
        assert_eq!(g.len(), 151);
        assert_eq!(g[0], 800);
        assert_eq!(g[150], 50);
        assert!(NoiseSchedule::ddim_grid(50, 0, 7).is_err());
        assert!(NoiseSchedule::ddim_grid(50, 50, 1).is_err());
        assert!(NoiseSchedule::ddim_grid(50, 0, 0).is_err());
    }
}
