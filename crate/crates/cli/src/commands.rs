//! Subcommand bodies; `main` only parses flags and maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use npnorm::cohort::{generate, split, Cohort, Label};
use npnorm::neural_process::NpModel;

use crate::config::RunConfig;
use crate::exit::CliError;
use crate::pipeline::{self, Evaluation};
use crate::report;

/// Grids above this many voxels are accepted with a warning.
pub const LARGE_GRID: usize = 20_000;

fn counts(c: &Cohort) -> String {
    Label::ALL
        .iter()
        .map(|&l| format!("{} {}", l.as_str(), c.count(l)))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf> {
    let voxels = cfg.cohort.voxels();
    if voxels > LARGE_GRID {
        log::warn!(
            "grid {:?} has {voxels} voxels; generation and training will be slow and memory hungry",
            cfg.cohort.grid
        );
    }
    let cohort = generate(&cfg.cohort)?;
    let dir = cfg.output.join("cohort");
    cohort.save(&dir)?;
    println!("{} subjects ({}) on grid {:?} -> {}", cohort.n(), counts(&cohort), cohort.grid(), dir.display());
    Ok(dir)
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), cfg.dump() + "\n").context("writing config.json")
}

pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let cohort = pipeline::load_cohort(&cfg.cohort_dir())?;
    let s = split(&cohort, &cfg.split_protocol()).map_err(|e| CliError::Config(format!("split: {e}")))?;
    let model = pipeline::fit(cfg, &cohort, &s)?;
    let dir = cfg.model_dir();
    model.save(&dir)?;
    pipeline::save_split(&dir, &s)?;
    write_config(cfg, &cfg.output)?;
    if let (Some(first), Some(last)) = (model.log.first(), model.log.last()) {
        println!(
            "trained {} epochs on {} subjects: loss {:.4} -> {:.4}; model in {}",
            model.log.len(),
            s.train.len(),
            first.loss(),
            last.loss(),
            dir.display()
        );
    }
    Ok(dir)
}

/// Evaluates the trained model; with `repeats > 1` the whole pipeline is
/// rerun for seeds `seed, seed + 1, ...` and metrics report mean and std.
pub fn cmd_evaluate(cfg: &RunConfig, repeats: usize) -> Result<PathBuf> {
    if repeats == 0 {
        return Err(CliError::Config("--repeats must be at least 1".into()).into());
    }
    let cohort = pipeline::load_cohort(&cfg.cohort_dir())?;
    let model_dir = cfg.model_dir();
    if !model_dir.join("arch.json").exists() {
        return Err(CliError::Input(format!("no trained model in {}", model_dir.display())).into());
    }
    let model = NpModel::load(&model_dir)?;
    let s = pipeline::load_split(&model_dir)?;
    let mut evals: Vec<Evaluation> = vec![pipeline::evaluate(cfg, &cohort, &model, &s)?];
    for r in 1..repeats {
        let mut rc = cfg.clone();
        rc.seed = cfg.seed + r as u64;
        rc.cohort.seed = rc.seed;
        let rep_cohort = match &cfg.input {
            Some(_) => cohort.clone(),
            None => generate(&rc.cohort)?,
        };
        let rs = split(&rep_cohort, &rc.split_protocol())?;
        let m = pipeline::fit(&rc, &rep_cohort, &rs).with_context(|| format!("repeat seed {}", rc.seed))?;
        evals.push(pipeline::evaluate(&rc, &rep_cohort, &m, &rs)?);
        log::info!("repeat {}/{repeats} done", r + 1);
    }
    let run_id = if repeats == 1 {
        format!("seed{}", cfg.seed)
    } else {
        format!("seed{}x{repeats}", cfg.seed)
    };
    let dir = cfg.eval_dir();
    pipeline::write_evaluation(&dir, &run_id, &cohort, &evals)?;
    for row in pipeline::metrics_rows(&run_id, &evals) {
        println!("{:<8} {:<7} M={:<3} AUC {:.3} ± {:.3}", row.method, row.group, row.m, row.auc, row.auc_std);
    }
    Ok(dir)
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(CliError::Input("report needs at least one evaluated run".into()).into());
    }
    let agg = report::report(runs, out)?;
    println!("{} cells from {} runs -> {}", agg.len(), runs.len(), out.display());
    Ok(())
}
