//! The generate -> train -> evaluate pipeline over in-memory values, plus
//! the writers for its on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use npnorm::cohort::{generate, split, Cohort, Label, Split};
use npnorm::mixed_effect::{
    baseline_blr_normative, build_context_set, fit_fixed_effect, predict_fixed_effect, residuals, DesignMatrix,
    Standardizer,
};
use npnorm::neural_process::{predict_with, train_model, NpModel, QuantileTransform, NOISE_VAR_FLOOR};
use npnorm::normative::{
    abnormality_probabilities, auc, compute_npm, group_difference_maps, npm_from_moments, region_association,
    summaries, NoveltyScores, Npm, RegionResult,
};
use npnorm::tensorcore::io::write_tensor;
use npnorm::tensorcore::{Rng, Tensor};

use crate::config::{GevdPopulation, NoiseInit, RunConfig};
use crate::exit::CliError;

/// Streams derived from the master seed.
const STREAM_CONTEXT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_PREDICT: u64 = 3;
const STREAM_CONTROL: u64 = 4;

pub const METHOD_NP: &str = "np";
pub const METHOD_BASELINE: &str = "baseline";

/// The configured cohort: loaded from `input`, or generated.
pub fn obtain_cohort(cfg: &RunConfig) -> Result<Cohort> {
    match &cfg.input {
        Some(dir) => load_cohort(dir),
        None => Ok(generate(&cfg.cohort)?),
    }
}

pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    if !dir.join("meta.json").exists() {
        return Err(CliError::Input(format!("no cohort at {} (meta.json missing)", dir.display())).into());
    }
    Cohort::load(dir).with_context(|| format!("loading cohort {}", dir.display()))
}

/// Standardizes covariates, quantile-transforms responses, builds the
/// bootstrap context set and trains the model on the training rows.
pub fn fit(cfg: &RunConfig, cohort: &Cohort, split: &Split) -> Result<NpModel> {
    let root = Rng::new(cfg.seed);
    let x = cohort.x.select_rows(&split.train);
    let y = cohort.y.select_rows(&split.train);
    let standardizer = Standardizer::fit(&x);
    let xs = standardizer.apply(&x)?;
    let quantile = QuantileTransform::fit(&y, cfg.quantile.eps)?;
    let yq = quantile.apply(&y)?;
    let f = build_context_set(&xs.with_intercept(), &yq, cfg.context.m, &root.split(STREAM_CONTEXT))?;
    let arch = cfg.architecture.build(cohort.grid(), xs.d(), cfg.context.m);
    arch.validate().map_err(|e| CliError::Config(format!("architecture: {e}")))?;
    let train_rng = root.split(STREAM_TRAIN);
    // same initialization stream as `train`
    let mut model = NpModel::init(arch, &train_rng.split(0))?;
    if cfg.architecture.noise_init == NoiseInit::Residual {
        model.set_log_noise_var(residual_log_variance(&xs.with_intercept(), &yq)?)?;
    }
    let mut model = train_model(model, &xs, &yq, &f, &cfg.schedule, &train_rng).context("training")?;
    model.quantile = Some(quantile);
    model.standardizer = Some(standardizer);
    Ok(model)
}

/// Log of the unbiased per-voxel residual variance of an OLS fit, floored
/// at the noise-variance floor.
pub fn residual_log_variance(x: &DesignMatrix, y: &Tensor) -> Result<Tensor> {
    let fit = fit_fixed_effect(x, y)?;
    let r = residuals(y, &predict_fixed_effect(&fit.coeffs, x)?)?;
    let (n, t) = (x.n(), r.row_len());
    let dof = n.saturating_sub(x.d()).max(1) as f64;
    let mut var = vec![0.0; t];
    for i in 0..n {
        var.iter_mut().zip(r.row(i)).for_each(|(v, e)| *v += e * e);
    }
    let data = var.iter().map(|v| (v / dof).max(NOISE_VAR_FLOOR).ln()).collect();
    Ok(Tensor::new(y.shape()[1..].to_vec(), data)?)
}

/// Scores of one normative method.
#[derive(Clone, Debug)]
pub struct MethodResult {
    pub method: String,
    /// NPMs of every subject, cohort order.
    pub npm: Npm,
    pub summaries: Vec<f64>,
    /// Abnormality probability of every subject under the fitted GEVD.
    pub probabilities: Vec<f64>,
    pub novelty: NoveltyScores,
    /// Patient group vs healthy test subjects, one entry per group present.
    pub aucs: Vec<(Label, f64)>,
    /// Two random halves of the healthy test subjects against each other.
    pub control_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub np: MethodResult,
    pub baseline: Option<MethodResult>,
    /// Per patient group, on its test subjects.
    pub regions: Vec<(Label, Vec<RegionResult>)>,
    /// Test-subject group mean NPM minus healthy mean.
    pub difference_maps: Vec<(Label, Tensor)>,
    pub split: Split,
    pub m: usize,
}

fn rows_where(rows: &[usize], labels: &[Label], keep: impl Fn(Label) -> bool) -> Vec<usize> {
    rows.iter().copied().filter(|&i| keep(labels[i])).collect()
}

fn score_method(
    cfg: &RunConfig,
    method: &str,
    npm: Npm,
    cohort: &Cohort,
    split: &Split,
) -> Result<MethodResult> {
    let summary = summaries(&npm, &cfg.novelty.summary())?;
    let labels = &cohort.labels;
    let reference_rows = match cfg.novelty.gevd_population {
        GevdPopulation::Train => split.train.clone(),
        GevdPopulation::TrainHealthy => rows_where(&split.train, labels, |l| l == Label::Healthy),
        GevdPopulation::Test => split.test.clone(),
        GevdPopulation::HealthyTest => rows_where(&split.test, labels, |l| l == Label::Healthy),
    };
    let reference: Vec<f64> = reference_rows.iter().map(|&i| summary[i]).collect();
    let novelty = abnormality_probabilities(&reference, &summary)
        .with_context(|| format!("{method}: extreme-value fit on {} summaries", reference.len()))?;
    let probabilities = novelty.probabilities.clone();

    let healthy_test = rows_where(&split.test, labels, |l| l == Label::Healthy);
    let mut aucs = Vec::new();
    for group in Label::PATIENT_GROUPS {
        let cases = rows_where(&split.test, labels, |l| l == group);
        if cases.is_empty() || healthy_test.is_empty() {
            continue;
        }
        let (scores, flags) = labelled(&probabilities, &cases, &healthy_test);
        aucs.push((group, auc(&scores, &flags)?));
    }
    let control_auc = if healthy_test.len() >= 2 {
        let mut shuffled = healthy_test.clone();
        Rng::new(cfg.seed).split(STREAM_CONTROL).shuffle(&mut shuffled);
        let (a, b) = shuffled.split_at(shuffled.len() / 2);
        let (scores, flags) = labelled(&probabilities, b, a);
        Some(auc(&scores, &flags)?)
    } else {
        None
    };
    Ok(MethodResult {
        method: method.to_string(),
        npm,
        summaries: summary,
        probabilities,
        novelty,
        aucs,
        control_auc,
    })
}

fn labelled(scores: &[f64], positive: &[usize], negative: &[usize]) -> (Vec<f64>, Vec<u8>) {
    let s = positive.iter().chain(negative).map(|&i| scores[i]).collect();
    let f = positive.iter().map(|_| 1).chain(negative.iter().map(|_| 0)).collect();
    (s, f)
}

/// Region masks from the config file, or the cohort's ground truth.
pub fn region_masks(cfg: &RunConfig, cohort: &Cohort) -> Result<Option<Vec<Vec<usize>>>> {
    if let Some(path) = &cfg.analysis.region_masks {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read region masks {}: {e}", path.display())))?;
        let masks: Vec<Vec<usize>> = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("region masks {}: {e}", path.display())))?;
        return Ok(Some(masks));
    }
    Ok(cohort.truth.as_ref().map(|t| t.regions.clone()))
}

/// Predicts every subject, derives NPMs, novelty scores, AUCs, the
/// baseline comparison and the region association.
pub fn evaluate(cfg: &RunConfig, cohort: &Cohort, model: &NpModel, split: &Split) -> Result<Evaluation> {
    let standardizer = model
        .standardizer
        .as_ref()
        .ok_or_else(|| CliError::Input("model has no covariate standardizer".into()))?;
    let quantile = model
        .quantile
        .as_ref()
        .ok_or_else(|| CliError::Input("model has no quantile transform".into()))?;
    let f = model
        .context
        .as_ref()
        .ok_or_else(|| CliError::Input("model has no context set".into()))?;
    let xs = standardizer.apply(&cohort.x)?;
    let yq = quantile.apply(&cohort.y)?;
    let rng = Rng::new(cfg.seed).split(STREAM_PREDICT);
    let pred = predict_with(model, &xs, f, &cfg.prediction.to_predict(), &rng)?;
    let npm = compute_npm(&yq, &pred)?;
    let np = score_method(cfg, METHOD_NP, npm, cohort, split)?;

    let baseline = if cfg.analysis.baseline {
        let xi = xs.with_intercept();
        let b = baseline_blr_normative(&xi.select_rows(&split.train), &yq.select_rows(&split.train), &xi)?;
        let npm = npm_from_moments(&yq, &b.mean, &b.variance)?;
        Some(score_method(cfg, METHOD_BASELINE, npm, cohort, split)?)
    } else {
        None
    };

    let mut regions = Vec::new();
    if let Some(masks) = region_masks(cfg, cohort)? {
        for group in Label::PATIENT_GROUPS {
            let rows = rows_where(&split.test, &cohort.labels, |l| l == group);
            if rows.len() < 3 {
                log::warn!("{}: {} test subjects, region analysis skipped", group.as_str(), rows.len());
                continue;
            }
            let sub = Npm {
                values: np.npm.values.select_rows(&rows),
            };
            let x: DesignMatrix = cohort.x.select_rows(&rows);
            regions.push((group, region_association(&sub, &masks, &x, cfg.analysis.alpha)?));
        }
    }
    let test_npm = Npm {
        values: np.npm.values.select_rows(&split.test),
    };
    let test_labels: Vec<Label> = split.test.iter().map(|&i| cohort.labels[i]).collect();
    let difference_maps = if test_labels.contains(&Label::Healthy) {
        group_difference_maps(&test_npm, &test_labels)?
    } else {
        Vec::new()
    };
    Ok(Evaluation {
        np,
        baseline,
        regions,
        difference_maps,
        split: split.clone(),
        m: cfg.context.m,
    })
}

/// Generate (or load), split, fit and evaluate in memory.
pub fn run_in_memory(cfg: &RunConfig) -> Result<(Cohort, NpModel, Evaluation)> {
    let cohort = obtain_cohort(cfg)?;
    let s = split(&cohort, &cfg.split_protocol())?;
    let model = fit(cfg, &cohort, &s)?;
    let eval = evaluate(cfg, &cohort, &model, &s)?;
    Ok((cohort, model, eval))
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    train: Vec<usize>,
    test: Vec<usize>,
}

pub fn save_split(dir: &Path, s: &Split) -> Result<()> {
    let text = serde_json::to_string_pretty(&SplitFile {
        train: s.train.clone(),
        test: s.test.clone(),
    })?;
    fs::write(dir.join("split.json"), text + "\n").with_context(|| format!("writing {}", dir.display()))?;
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<Split> {
    let path = dir.join("split.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let f: SplitFile = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(Split {
        train: f.train,
        test: f.test,
    })
}

/// One metrics row per method and patient group.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub method: String,
    pub group: String,
    pub m: usize,
    pub auc: f64,
    pub auc_std: f64,
}

pub const METRICS_HEADER: &str = "run_id,method,group,M,auc,auc_std";

pub fn metrics_rows(run_id: &str, evals: &[Evaluation]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    let first = &evals[0];
    let methods: Vec<&str> = std::iter::once(METHOD_NP)
        .chain(first.baseline.as_ref().map(|_| METHOD_BASELINE))
        .collect();
    for method in methods {
        for group in Label::PATIENT_GROUPS {
            let values: Vec<f64> = evals
                .iter()
                .filter_map(|e| {
                    let r = if method == METHOD_NP { Some(&e.np) } else { e.baseline.as_ref() };
                    r.and_then(|r| r.aucs.iter().find(|(g, _)| *g == group).map(|(_, a)| *a))
                })
                .collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            rows.push(MetricRow {
                run_id: run_id.to_string(),
                method: method.to_string(),
                group: group.as_str().to_string(),
                m: first.m,
                auc: mean,
                auc_std: std,
            });
        }
    }
    rows
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.run_id, r.method, r.group, r.m, r.auc, r.auc_std);
    }
    out
}

pub fn scores_csv(cohort: &Cohort, result: &MethodResult, rows: &[usize]) -> String {
    let mut out = String::from("subject_id,label,summary,probability\n");
    for &i in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            i,
            cohort.labels[i].as_str(),
            result.summaries[i],
            result.probabilities[i]
        );
    }
    out
}

pub fn regions_csv(regions: &[(Label, Vec<RegionResult>)]) -> String {
    let mut out = String::from("group,region,r2,f,p,p_corrected,significant\n");
    for (group, results) in regions {
        for r in results {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                group.as_str(),
                r.region,
                r.r2,
                r.f,
                r.p_value,
                r.p_corrected,
                r.significant
            );
        }
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `metrics.csv`, `scores.csv`, `gevd.json`, `control.json`, NPM volumes
/// and group difference maps. Repeated evaluations contribute to the
/// metrics; the other artifacts describe the first one.
pub fn write_evaluation(dir: &Path, run_id: &str, cohort: &Cohort, evals: &[Evaluation]) -> Result<()> {
    fs::create_dir_all(dir.join("npm")).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("metrics.csv"), &metrics_csv(&metrics_rows(run_id, evals)))?;
    let e = &evals[0];
    write(&dir.join("scores.csv"), &scores_csv(cohort, &e.np, &e.split.test))?;
    let mut gevd = serde_json::Map::new();
    let mut control = serde_json::Map::new();
    for r in std::iter::once(&e.np).chain(e.baseline.as_ref()) {
        gevd.insert(r.method.clone(), serde_json::to_value(r.novelty.gevd)?);
        let controls: Vec<Option<f64>> = evals
            .iter()
            .map(|ev| if r.method == METHOD_NP { ev.np.control_auc } else { ev.baseline.as_ref().and_then(|b| b.control_auc) })
            .collect();
        control.insert(r.method.clone(), serde_json::to_value(controls)?);
        write_tensor(dir.join("npm").join(format!("{}_test.npnt", r.method)), &r.npm.values.select_rows(&e.split.test))?;
    }
    write(&dir.join("gevd.json"), &(serde_json::to_string_pretty(&gevd)? + "\n"))?;
    write(&dir.join("control.json"), &(serde_json::to_string_pretty(&control)? + "\n"))?;
    for (group, map) in &e.difference_maps {
        write_tensor(dir.join(format!("difference_{}.npnt", group.as_str())), map)?;
    }
    if !e.regions.is_empty() {
        write(&dir.join("regions.csv"), &regions_csv(&e.regions))?;
    }
    Ok(())
}
