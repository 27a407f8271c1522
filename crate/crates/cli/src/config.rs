//! Run configuration: a flat key = value file with [section] headers.
//!
//! Parsing is strict. Unknown sections or keys are errors, so a typo can
//! never silently fall back to a default. Serialization emits every key in
//! one canonical order, and parse(serialize(parse(text))) == parse(text).

use cldpc_core::burgers::Setting;
use cldpc_core::{Error, Result};
use std::fmt::Write as _;
use std::path::PathBuf;

/// Episode controller selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Cl,
    ClDdim,
    DpcH,
    Random,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Cl => "cl",
            Method::ClDdim => "cl-ddim",
            Method::DpcH => "dpc-h",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cl" => Ok(Method::Cl),
            "cl-ddim" => Ok(Method::ClDdim),
            "dpc-h" => Ok(Method::DpcH),
            "random" => Ok(Method::Random),
            other => Err(Error::config(format!(
                "unknown method '{other}' (expected cl, cl-ddim, dpc-h, or random)"
            ))),
        }
    }
}

/// Every tunable of the pipeline. Defaults are the desk-scale run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub setting: Setting,
    // [schedule]
    pub k: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    // [env]
    pub d_x: usize,
    pub nu: f64,
    pub substeps: usize,
    pub n_ctrl: usize,
    // [data]
    pub m: usize,
    pub data_seed: u64,
    // [model]
    pub horizon: usize,
    pub channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    // [train]
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
    pub train_seed: u64,
    pub checkpoint_every: usize,
    // [control]
    pub method: Method,
    pub episodes: usize,
    pub control_seed: u64,
    /// Replan interval; only meaningful (and only allowed) for dpc-h.
    pub h: Option<usize>,
    pub ddim_steps: usize,
    pub eta: f64,
    /// 0 means calibrate automatically from `guidance_fraction`.
    pub lambda: f64,
    pub guidance_fraction: f64,
    /// Fraction of the schedule (from the clean end) where guidance acts.
    pub guide_level_fraction: f64,
    // [paths]
    pub data_path: PathBuf,
    pub sync_model_path: PathBuf,
    pub async_model_path: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            setting: Setting::FO,
            k: 800,
            beta_min: 1e-4,
            beta_max: 0.02,
            d_x: 64,
            nu: 0.01,
            substeps: 32,
            n_ctrl: 32,
            m: 2000,
            data_seed: 0,
            horizon: 16,
            channels: 32,
            depth: 3,
            embed_dim: 32,
            steps: 5000,
            batch: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
            train_seed: 0,
            checkpoint_every: 1000,
            method: Method::Cl,
            episodes: 20,
            control_seed: 0,
            h: None,
            ddim_steps: 10,
            eta: 0.0,
            lambda: 0.0,
            guidance_fraction: 0.1,
            guide_level_fraction: 0.5,
            data_path: PathBuf::from("dataset.cldpc"),
            sync_model_path: PathBuf::from("sync/model.cldpc"),
            async_model_path: PathBuf::from("async/model.cldpc"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(format!("[{section}] {key} = {value} is not a valid value"))
    })
}

impl RunConfig {
    /// Apply one key = value assignment addressed as "section.key".
    pub fn set(&mut self, addr: &str, value: &str) -> Result<()> {
        let (section, key) = addr
            .split_once('.')
            .ok_or_else(|| Error::config(format!("override '{addr}' must look like section.key")))?;
        self.assign(section, key, value)
    }

    fn assign(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("run", "setting") => {
                self.setting = match value {
                    "fo" => Setting::FO,
                    "po" => Setting::PO,
                    other => {
                        return Err(Error::config(format!(
                            "unknown setting '{other}' (expected fo or po)"
                        )))
                    }
                }
            }
            ("schedule", "k") => self.k = parse_num(section, key, value)?,
            ("schedule", "beta_min") => self.beta_min = parse_num(section, key, value)?,
            ("schedule", "beta_max") => self.beta_max = parse_num(section, key, value)?,
            ("env", "d_x") => self.d_x = parse_num(section, key, value)?,
            ("env", "nu") => self.nu = parse_num(section, key, value)?,
            ("env", "substeps") => self.substeps = parse_num(section, key, value)?,
            ("env", "n_ctrl") => self.n_ctrl = parse_num(section, key, value)?,
            ("data", "m") => self.m = parse_num(section, key, value)?,
            ("data", "seed") => self.data_seed = parse_num(section, key, value)?,
            ("model", "horizon") => self.horizon = parse_num(section, key, value)?,
            ("model", "channels") => self.channels = parse_num(section, key, value)?,
            ("model", "depth") => self.depth = parse_num(section, key, value)?,
            ("model", "embed_dim") => self.embed_dim = parse_num(section, key, value)?,
            ("train", "steps") => self.steps = parse_num(section, key, value)?,
            ("train", "batch") => self.batch = parse_num(section, key, value)?,
            ("train", "lr") => self.lr = parse_num(section, key, value)?,
            ("train", "beta1") => self.beta1 = parse_num(section, key, value)?,
            ("train", "beta2") => self.beta2 = parse_num(section, key, value)?,
            ("train", "eps_stab") => self.eps_stab = parse_num(section, key, value)?,
            ("train", "seed") => self.train_seed = parse_num(section, key, value)?,
            ("train", "checkpoint_every") => {
                self.checkpoint_every = parse_num(section, key, value)?
            }
            ("control", "method") => self.method = Method::parse(value)?,
            ("control", "episodes") => self.episodes = parse_num(section, key, value)?,
            ("control", "seed") => self.control_seed = parse_num(section, key, value)?,
            ("control", "h") => self.h = Some(parse_num(section, key, value)?),
            ("control", "ddim_steps") => self.ddim_steps = parse_num(section, key, value)?,
            ("control", "eta") => self.eta = parse_num(section, key, value)?,
            ("control", "lambda") => self.lambda = parse_num(section, key, value)?,
            ("control", "guidance_fraction") => {
                self.guidance_fraction = parse_num(section, key, value)?
            }
            ("control", "guide_level_fraction") => {
                self.guide_level_fraction = parse_num(section, key, value)?
            }
            ("paths", "data") => self.data_path = PathBuf::from(value),
            ("paths", "sync_model") => self.sync_model_path = PathBuf::from(value),
            ("paths", "async_model") => self.async_model_path = PathBuf::from(value),
            _ => {
                return Err(Error::config(format!("unknown config key [{section}] {key}")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}: unterminated section header", no + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value, got '{line}'", no + 1))
            })?;
            if section.is_empty() {
                return Err(Error::config(format!(
                    "line {}: key before any [section] header",
                    no + 1
                )));
            }
            cfg.assign(&section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form; the absent replan interval is simply omitted.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[run]");
        let _ = writeln!(
            w,
            "setting = {}",
            match self.setting {
                Setting::FO => "fo",
                Setting::PO => "po",
            }
        );
        let _ = writeln!(w, "\n[schedule]");
        let _ = writeln!(w, "k = {}", self.k);
        let _ = writeln!(w, "beta_min = {}", self.beta_min);
        let _ = writeln!(w, "beta_max = {}", self.beta_max);
        let _ = writeln!(w, "\n[env]");
        let _ = writeln!(w, "d_x = {}", self.d_x);
        let _ = writeln!(w, "nu = {}", self.nu);
        let _ = writeln!(w, "substeps = {}", self.substeps);
        let _ = writeln!(w, "n_ctrl = {}", self.n_ctrl);
        let _ = writeln!(w, "\n[data]");
        let _ = writeln!(w, "m = {}", self.m);
        let _ = writeln!(w, "seed = {}", self.data_seed);
        let _ = writeln!(w, "\n[model]");
        let _ = writeln!(w, "horizon = {}", self.horizon);
        let _ = writeln!(w, "channels = {}", self.channels);
        let _ = writeln!(w, "depth = {}", self.depth);
        let _ = writeln!(w, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(w, "\n[train]");
        let _ = writeln!(w, "steps = {}", self.steps);
        let _ = writeln!(w, "batch = {}", self.batch);
        let _ = writeln!(w, "lr = {}", self.lr);
        let _ = writeln!(w, "beta1 = {}", self.beta1);
        let _ = writeln!(w, "beta2 = {}", self.beta2);
        let _ = writeln!(w, "eps_stab = {}", self.eps_stab);
        let _ = writeln!(w, "seed = {}", self.train_seed);
        let _ = writeln!(w, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(w, "\n[control]");
        let _ = writeln!(w, "method = {}", self.method.as_str());
        let _ = writeln!(w, "episodes = {}", self.episodes);
        let _ = writeln!(w, "seed = {}", self.control_seed);
        if let Some(h) = self.h {
            let _ = writeln!(w, "h = {h}");
        }
        let _ = writeln!(w, "ddim_steps = {}", self.ddim_steps);
        let _ = writeln!(w, "eta = {}", self.eta);
        let _ = writeln!(w, "lambda = {}", self.lambda);
        let _ = writeln!(w, "guidance_fraction = {}", self.guidance_fraction);
        let _ = writeln!(w, "guide_level_fraction = {}", self.guide_level_fraction);
        let _ = writeln!(w, "\n[paths]");
        let _ = writeln!(w, "data = {}", self.data_path.display());
        let _ = writeln!(w, "sync_model = {}", self.sync_model_path.display());
        let _ = writeln!(w, "async_model = {}", self.async_model_path.display());
        s
    }

    /// Cross-field checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.horizon == 0 || self.k % self.horizon != 0 {
            return Err(Error::config(format!(
                "schedule length {} must be a positive multiple of the horizon {}",
                self.k, self.horizon
            )));
        }
        if self.horizon > self.n_ctrl {
            return Err(Error::config(format!(
                "horizon {} exceeds the episode length {}",
                self.horizon, self.n_ctrl
            )));
        }
        if self.lambda < 0.0 || self.guidance_fraction <= 0.0 {
            return Err(Error::config("lambda must be >= 0 and guidance_fraction > 0"));
        }
        if self.guide_level_fraction <= 0.0 || self.guide_level_fraction > 1.0 {
            return Err(Error::config("guide_level_fraction must lie in (0, 1]"));
        }
        if self.episodes == 0 || self.m == 0 || self.steps == 0 || self.batch == 0 {
            return Err(Error::config("episodes, data size, steps, and batch must be positive"));
        }
        Ok(())
    }

    /// Divisibility the subsampled chains depend on.
    pub fn validate_ddim(&self) -> Result<()> {
        let stride = self.k / self.horizon;
        if self.ddim_steps == 0 || stride % self.ddim_steps != 0 {
            return Err(Error::config(format!(
                "ddim_steps {} must divide the sweep stride {stride}",
                self.ddim_steps
            )));
        }
        Ok(())
    }

    /// Method-specific rules for the single-method control command: the
    /// replan interval must be present exactly when the method uses it.
    pub fn validate_control(&self) -> Result<()> {
        self.validate()?;
        match (self.method, self.h) {
            (Method::DpcH, None) => {
                return Err(Error::config("method dpc-h needs control.h"));
            }
            (Method::DpcH, Some(h)) if h == 0 || h > self.horizon => {
                return Err(Error::config(format!(
                    "replan interval {h} must lie in 1..={}",
                    self.horizon
                )));
            }
            (m, Some(_)) if m != Method::DpcH => {
                return Err(Error::config("control.h only applies to method dpc-h"));
            }
            _ => {}
        }
        if self.method == Method::ClDdim {
            self.validate_ddim()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.method = Method::DpcH;
        cfg.h = Some(15);
        cfg.lambda = 0.125;
        cfg.setting = Setting::PO;
        let text = cfg.serialize();
        let re = RunConfig::parse(&text).unwrap();
        assert_eq!(re, cfg);
        assert_eq!(re.serialize(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[schedule]\nkk = 800\n").is_err());
        assert!(RunConfig::parse("[scheduler]\nk = 800\n").is_err());
        assert!(RunConfig::parse("k = 800\n").is_err());
        assert!(RunConfig::parse("[schedule]\nk : 800\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# top\n[schedule]\n; note\n\nk = 40\n").unwrap();
        assert_eq!(cfg.k, 40);
    }

    #[test]
    fn overrides_use_dotted_addresses() {
        let mut cfg = RunConfig::default();
        cfg.set("control.method", "random").unwrap();
        assert_eq!(cfg.method, Method::Random);
        cfg.set("env.d_x", "16").unwrap();
        assert_eq!(cfg.d_x, 16);
        assert!(cfg.set("control.methud", "cl").is_err());
        assert!(cfg.set("no-dot", "1").is_err());
    }

    #[test]
    fn validation_rules() {
        let mut cfg = RunConfig::default();
        cfg.k = 801;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.method = Method::DpcH;
        assert!(cfg.validate_control().is_err());
        cfg.h = Some(15);
        assert!(cfg.validate_control().is_ok());
        cfg.h = Some(17);
        assert!(cfg.validate_control().is_err());
        let mut cfg = RunConfig::default();
        cfg.h = Some(3);
        assert!(cfg.validate_control().is_err());
        let mut cfg = RunConfig::default();
        cfg.method = Method::ClDdim;
        cfg.ddim_steps = 7;
        assert!(cfg.validate_control().is_err());
        cfg.ddim_steps = 10;
        assert!(cfg.validate_control().is_ok());
    }
}
