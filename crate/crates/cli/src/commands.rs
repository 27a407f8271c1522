//! Subcommand bodies. Each one reads a validated config, works entirely
//! through files under the output root, and prints a short account of what
//! it wrote.
//!
//! Relative paths in [paths] resolve against the output root, so a single
//! --out flag moves the whole pipeline: gen-data writes the dataset where
//! train-sync expects it, and control finds both checkpoints without any
//! per-command wiring.

use crate::config::{Method, RunConfig};
use crate::plot;
use crate::results::{load_result, metrics_row, recompute_j, save_result, METRICS_COLUMNS};
use cldpc_core::burgers::{make_initial_state, make_target, BurgersParams, ControlTask, Setting};
use cldpc_core::dataset::{generate_dataset, spot_check, Dataset};
use cldpc_core::io::{load_checkpoint, RESULT_MAGIC};
use cldpc_core::rng::{domain, substream};
use cldpc_core::samplers::{
    calibrate_lambda, closed_loop_control, diffphycon_h_control, random_control, BurgersEnv,
    ControlResult, CtrlConfig, NetDenoiser, StepMode,
};
use cldpc_core::schedule::NoiseSchedule;
use cldpc_core::scorenet::{Arch, ModelKind, ScoreModel};
use cldpc_core::training::{train, TrainConfig};
use cldpc_core::{Error, Result};
use rayon::prelude::*;
use std::fs;
use std::path::{Path, PathBuf};

/// How a finished command maps to a process exit code.
pub struct Outcome {
    /// Episodes whose environment blew up; nonzero exits with code 3.
    pub failed_episodes: usize,
}

impl Outcome {
    fn clean() -> Self {
        Outcome { failed_episodes: 0 }
    }
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn burgers_params(cfg: &RunConfig) -> Result<BurgersParams> {
    BurgersParams::new(cfg.d_x, cfg.nu, cfg.substeps, cfg.n_ctrl)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let p = burgers_params(cfg)?;
    let ds = generate_dataset(cfg.m, &p, cfg.setting, cfg.data_seed)?;
    spot_check(&ds, 1e-5)?;
    let path = resolve(out, &cfg.data_path);
    ensure_parent(&path)?;
    ds.save(&path)?;
    println!(
        "wrote {} trajectories ({} resampled) to {}",
        ds.header.m,
        ds.header.generator.resampled,
        path.display()
    );
    Ok(Outcome::clean())
}

fn load_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let path = resolve(out, &cfg.data_path);
    let ds = Dataset::load(&path)?;
    if ds.header.d_x != cfg.d_x || ds.header.n != cfg.n_ctrl {
        return Err(Error::config(format!(
            "dataset {} is {}x{} but the config asks for {}x{}",
            path.display(),
            ds.header.d_x,
            ds.header.n,
            cfg.d_x,
            cfg.n_ctrl
        )));
    }
    if ds.header.generator.setting != cfg.setting {
        return Err(Error::config(format!(
            "dataset {} was generated under the other observation setting",
            path.display()
        )));
    }
    Ok(ds)
}

pub fn train_model(cfg: &RunConfig, out: &Path, kind: ModelKind) -> Result<Outcome> {
    cfg.validate()?;
    let ds = load_dataset(cfg, out)?;
    let sched = NoiseSchedule::linear(cfg.k, cfg.beta_min, cfg.beta_max)?;
    let mask = cfg.setting.mask(cfg.d_x);
    let arch = Arch {
        horizon: cfg.horizon,
        grid: cfg.d_x,
        channels: cfg.channels,
        depth: cfg.depth,
        embed_dim: cfg.embed_dim,
    };
    let mut model = ScoreModel::init(arch, kind, cfg.train_seed)?;
    let model_path = resolve(
        out,
        match kind {
            ModelKind::Sync => &cfg.sync_model_path,
            ModelKind::Async => &cfg.async_model_path,
        },
    );
    ensure_parent(&model_path)?;
    let train_dir = model_path.parent().unwrap().to_path_buf();
    let tc = TrainConfig {
        steps: cfg.steps,
        batch: cfg.batch,
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps_stab: cfg.eps_stab,
        train_seed: cfg.train_seed,
        checkpoint_every: cfg.checkpoint_every,
    };
    let history = train(&mut model, &ds, &sched, &mask, &tc, Some(&train_dir))?;
    let written = train_dir.join("model.cldpc");
    if written != model_path {
        fs::rename(&written, &model_path)?;
    }
    let (first, last) = (history.first().unwrap().1, history.last().unwrap().1);
    println!(
        "trained {} model for {} steps (loss {first:.4} -> {last:.4}), wrote {}",
        match kind {
            ModelKind::Sync => "constant-level",
            ModelKind::Async => "staircase-level",
        },
        cfg.steps,
        model_path.display()
    );
    Ok(Outcome::clean())
}

fn load_model(cfg: &RunConfig, out: &Path, kind: ModelKind) -> Result<ScoreModel> {
    let path = resolve(
        out,
        match kind {
            ModelKind::Sync => &cfg.sync_model_path,
            ModelKind::Async => &cfg.async_model_path,
        },
    );
    let (model, header) = load_checkpoint(&path)?;
    if model.kind != kind {
        return Err(Error::config(format!(
            "{} holds the wrong model family for this role",
            path.display()
        )));
    }
    if model.arch.grid != cfg.d_x || model.arch.horizon != cfg.horizon {
        return Err(Error::config(format!(
            "{} was trained on grid {} horizon {}, config asks for {} and {}",
            path.display(),
            model.arch.grid,
            model.arch.horizon,
            cfg.d_x,
            cfg.horizon
        )));
    }
    let _ = header;
    Ok(model)
}

/// One episode of one method; `e` indexes the task and noise substreams.
struct Job {
    method: Method,
    h: Option<usize>,
    e: u64,
}

struct JobOut {
    row: String,
    method: Method,
    j: f64,
    nfe: usize,
    wall: f64,
    failed: bool,
}

fn step_mode(cfg: &RunConfig, method: Method) -> StepMode {
    match method {
        Method::ClDdim => StepMode::Ddim {
            jump: (cfg.k / cfg.horizon) / cfg.ddim_steps,
            eta: cfg.eta,
        },
        _ => StepMode::Ancestral,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_job(
    cfg: &RunConfig,
    p: &BurgersParams,
    sched: &NoiseSchedule,
    pool: &Dataset,
    sync_model: Option<&ScoreModel>,
    async_model: Option<&ScoreModel>,
    results_dir: &Path,
    job: &Job,
) -> Result<JobOut> {
    let mask = cfg.setting.mask(cfg.d_x);
    let mut trng = substream(cfg.control_seed, domain::TASK, job.e);
    let mut u0 = make_initial_state(&mut trng, p);
    mask.apply(&mut u0);
    let u_d = make_target(&mut trng, &pool.trajectories)?;
    let mut task = ControlTask {
        u0,
        u_d,
        obs_mask: mask,
        lambda: 0.0,
        setting: cfg.setting,
    };

    let mut ctrl = CtrlConfig::for_params(cfg.horizon, p);
    ctrl.mode = step_mode(cfg, job.method);
    ctrl.guide_max_level = ((cfg.guide_level_fraction * cfg.k as f64) as usize).max(1);

    if job.method != Method::Random {
        let sync = sync_model.expect("planner methods need the constant-level model");
        task.lambda = if cfg.lambda > 0.0 {
            cfg.lambda
        } else {
            let mut den = NetDenoiser::new(sync);
            calibrate_lambda(&mut den, &task, sched, &ctrl, cfg.guidance_fraction, &mut trng)
        };
    }

    let env = BurgersEnv { params: p.clone() };
    let mut erng = substream(cfg.control_seed, domain::EPISODE, job.e);
    let result: ControlResult = match job.method {
        Method::Cl | Method::ClDdim => {
            let mut phi = NetDenoiser::new(sync_model.unwrap());
            let mut theta = NetDenoiser::new(async_model.unwrap());
            closed_loop_control(&mut phi, &mut theta, &env, &task, sched, &ctrl, job.e, &mut erng)?
        }
        Method::DpcH => {
            let mut phi = NetDenoiser::new(sync_model.unwrap());
            let h = job.h.unwrap();
            diffphycon_h_control(&mut phi, &env, &task, sched, h, &ctrl, job.e, &mut erng)?
        }
        Method::Random => random_control(&env, &task, p, job.e, &mut erng)?,
    };

    let file = results_dir.join(format!("{}_{:03}.cldpc", job.method.as_str(), job.e));
    let ddim = (job.method == Method::ClDdim).then_some(cfg.ddim_steps);
    save_result(
        &file,
        job.method,
        cfg.setting,
        &result,
        &task.u_d,
        cfg.k,
        cfg.horizon,
        job.h,
        ddim,
        task.lambda,
    )?;
    let stored = load_result(&file)?;
    let again = recompute_j(&stored);
    if (again - stored.header.j).abs() > 1e-9 {
        return Err(Error::format(
            file.display().to_string(),
            format!("stored J {} does not reproduce ({again})", stored.header.j),
        ));
    }
    Ok(JobOut {
        row: metrics_row(&stored.header),
        method: job.method,
        j: stored.header.j,
        nfe: stored.header.nfe,
        wall: stored.header.wall_clock_s,
        failed: stored.header.failed,
    })
}

/// Run `episodes` tasks for every (method, h) pair and write metrics.csv.
fn run_episodes(
    cfg: &RunConfig,
    out: &Path,
    specs: &[(Method, Option<usize>)],
    summary: bool,
) -> Result<Outcome> {
    let p = burgers_params(cfg)?;
    let sched = NoiseSchedule::linear(cfg.k, cfg.beta_min, cfg.beta_max)?;
    let pool = load_dataset(cfg, out)?;

    let needs_sync = specs.iter().any(|(m, _)| *m != Method::Random);
    let needs_async = specs
        .iter()
        .any(|(m, _)| matches!(m, Method::Cl | Method::ClDdim));
    let sync_model = if needs_sync {
        Some(load_model(cfg, out, ModelKind::Sync)?)
    } else {
        None
    };
    let async_model = if needs_async {
        Some(load_model(cfg, out, ModelKind::Async)?)
    } else {
        None
    };

    let results_dir = out.join("results");
    fs::create_dir_all(&results_dir)?;

    let jobs: Vec<Job> = specs
        .iter()
        .flat_map(|&(method, h)| (0..cfg.episodes as u64).map(move |e| Job { method, h, e }))
        .collect();
    let outs: Vec<JobOut> = jobs
        .par_iter()
        .map(|job| {
            run_job(
                cfg,
                &p,
                &sched,
                &pool,
                sync_model.as_ref(),
                async_model.as_ref(),
                &results_dir,
                job,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let metrics_path = out.join("metrics.csv");
    let mut text = String::from(METRICS_COLUMNS);
    text.push('\n');
    for o in &outs {
        text.push_str(&o.row);
        text.push('\n');
    }
    fs::write(&metrics_path, &text)?;

    let mut failed_total = 0usize;
    for &(method, _) in specs {
        let rows: Vec<&JobOut> = outs.iter().filter(|o| o.method == method).collect();
        let ok: Vec<&&JobOut> = rows.iter().filter(|o| !o.failed).collect();
        let failed = rows.len() - ok.len();
        failed_total += failed;
        let mean = |f: &dyn Fn(&JobOut) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|o| f(o)).sum::<f64>() / ok.len() as f64
            }
        };
        println!(
            "{:8} episodes={} failed={} mean_J={:.6} mean_nfe={:.1} mean_wall={:.2}s",
            method.as_str(),
            rows.len(),
            failed,
            mean(&|o| o.j),
            mean(&|o| o.nfe as f64),
            mean(&|o| o.wall),
        );
    }

    if summary {
        let mut s = String::from("method,setting,episodes,failed,mean_J,mean_nfe,mean_wall_clock_s\n");
        for &(method, _) in specs {
            let rows: Vec<&JobOut> = outs.iter().filter(|o| o.method == method).collect();
            let ok: Vec<&&JobOut> = rows.iter().filter(|o| !o.failed).collect();
            let mean = |f: &dyn Fn(&JobOut) -> f64| {
                if ok.is_empty() {
                    String::new()
                } else {
                    format!("{}", ok.iter().map(|o| f(o)).sum::<f64>() / ok.len() as f64)
                }
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                method.as_str(),
                match cfg.setting {
                    Setting::FO => "fo",
                    Setting::PO => "po",
                },
                rows.len(),
                rows.len() - ok.len(),
                mean(&|o| o.j),
                mean(&|o| o.nfe as f64),
                mean(&|o| o.wall),
            ));
        }
        fs::write(out.join("summary.csv"), s)?;
    }

    println!("wrote {}", metrics_path.display());
    Ok(Outcome {
        failed_episodes: failed_total,
    })
}

pub fn control(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate_control()?;
    let h = (cfg.method == Method::DpcH).then(|| cfg.h.unwrap());
    run_episodes(cfg, out, &[(cfg.method, h)], false)
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    cfg.validate_ddim()?;
    let h = cfg.h.unwrap_or_else(|| (cfg.horizon - 1).max(1));
    if h == 0 || h > cfg.horizon {
        return Err(Error::config(format!(
            "replan interval {h} must lie in 1..={}",
            cfg.horizon
        )));
    }
    let specs = [
        (Method::Cl, None),
        (Method::ClDdim, None),
        (Method::DpcH, Some(h)),
        (Method::Random, None),
    ];
    run_episodes(cfg, out, &specs, true)
}

pub fn plot_files(out: &Path, inputs: &[PathBuf]) -> Result<Outcome> {
    if inputs.is_empty() {
        return Err(Error::config("plot needs at least one input file"));
    }
    fs::create_dir_all(out)?;
    for input in inputs {
        let head = fs::read(input).map_err(|e| {
            Error::config(format!("cannot read {}: {e}", input.display()))
        })?;
        let svg_path;
        let svg;
        if head.len() >= 8 && &head[..8] == RESULT_MAGIC {
            let stored = load_result(input)?;
            let stem = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "trace".into());
            svg_path = out.join(format!("{stem}.svg"));
            svg = plot::heat_strip_svg(&stored);
        } else {
            let text = String::from_utf8(head).map_err(|_| {
                Error::config(format!("{} is neither a trace nor a metrics CSV", input.display()))
            })?;
            let rows = plot::parse_metrics(&text)?;
            svg_path = out.join("j_distribution.svg");
            svg = plot::j_distribution_svg(&rows);
        }
        fs::write(&svg_path, svg)?;
        println!("wrote {}", svg_path.display());
    }
    Ok(Outcome::clean())
}
