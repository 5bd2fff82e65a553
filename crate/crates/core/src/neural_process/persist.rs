//! Model directory layout:
//!
//! ```text
//! arch.json            architecture, schedule, seed, parameter names
//! params/NNN_name.npnt one tensor per parameter slot
//! params/<bn>.running_{mean,var}.npnt
//! quantile.npnt        reference quantiles (T x n), if attached
//! standardizer.npnt    covariate means and stds (2 x D), if attached
//! context/             fixed-effect set, if attached
//! trainlog.csv         epoch,recon,kl,lr
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixed_effect::{FixedEffectSet, Standardizer};
use crate::neural_process::arch::NpArchitecture;
use crate::neural_process::model::NpModel;
use crate::neural_process::quantile::QuantileTransform;
use crate::neural_process::train::{EpochLog, TrainSchedule};
use crate::tensorcore::io::{read_tensor, write_tensor};
use crate::tensorcore::{RunningStats, Tensor};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    architecture: NpArchitecture,
    schedule: Option<TrainSchedule>,
    seed: u64,
    quantile_eps: Option<f64>,
    params: Vec<String>,
}

const TRAINLOG_HEADER: &str = "epoch,recon,kl,lr";

fn param_file(dir: &Path, i: usize, name: &str) -> PathBuf {
    dir.join("params").join(format!("{i:03}_{name}.npnt"))
}

fn running_file(dir: &Path, name: &str, which: &str) -> PathBuf {
    dir.join("params").join(format!("{name}.running_{which}.npnt"))
}

fn vector(v: &[f64]) -> Result<Tensor> {
    Tensor::new(vec![v.len()], v.to_vec())
}

pub fn trainlog_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(TRAINLOG_HEADER);
    out.push('\n');
    for e in log {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.recon, e.kl, e.lr);
    }
    out
}

fn parse_trainlog(text: &str, path: &Path) -> Result<Vec<EpochLog>> {
    let bad = |line: usize, detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        offset: line as u64,
        detail,
    };
    let mut lines = text.lines();
    if lines.next() != Some(TRAINLOG_HEADER) {
        return Err(bad(0, format!("expected header {TRAINLOG_HEADER:?}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 1, format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, format!("{s:?}: {e}")));
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|e| bad(i + 1, format!("{:?}: {e}", f[0])))?,
                recon: num(f[1])?,
                kl: num(f[2])?,
                lr: num(f[3])?,
            })
        })
        .collect()
}

impl NpModel {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let pdir = dir.join("params");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let meta = ArchFile {
            architecture: self.arch().clone(),
            schedule: self.schedule.clone(),
            seed: self.seed,
            quantile_eps: self.quantile.as_ref().map(|q| q.eps()),
            params: self.param_names().to_vec(),
        };
        let path = dir.join("arch.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        for (i, (name, p)) in self.param_names().iter().zip(self.params()).enumerate() {
            write_tensor(param_file(dir, i, name), p)?;
        }
        for (name, r) in self.running() {
            write_tensor(running_file(dir, name, "mean"), &vector(&r.mean)?)?;
            write_tensor(running_file(dir, name, "var"), &vector(&r.var)?)?;
        }
        if let Some(q) = &self.quantile {
            write_tensor(dir.join("quantile.npnt"), q.reference())?;
        }
        if let Some(s) = &self.standardizer {
            let mut data = s.mean.clone();
            data.extend_from_slice(&s.std);
            write_tensor(dir.join("standardizer.npnt"), &Tensor::new(vec![2, s.mean.len()], data)?)?;
        }
        if let Some(f) = &self.context {
            f.save(dir.join("context"))?;
        }
        let path = dir.join("trainlog.csv");
        fs::write(&path, trainlog_csv(&self.log)).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<NpModel> {
        let dir = dir.as_ref();
        let path = dir.join("arch.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ArchFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let params = meta
            .params
            .iter()
            .enumerate()
            .map(|(i, name)| read_tensor(param_file(dir, i, name)))
            .collect::<Result<Vec<_>>>()?;
        let mut running = BTreeMap::new();
        for (name, kind) in meta.architecture.layers()? {
            if let crate::tensorcore::LayerKind::BatchNorm3d { .. } = kind {
                let mean = read_tensor(running_file(dir, &name, "mean"))?.into_data();
                let var = read_tensor(running_file(dir, &name, "var"))?.into_data();
                running.insert(name, RunningStats { mean, var });
            }
        }
        let grid = meta.architecture.grid;
        let mut model = NpModel::from_parts(meta.architecture, params, running, meta.seed)?;
        if model.param_names() != &meta.params[..] {
            return Err(Error::Corrupt {
                path,
                offset: 0,
                detail: "parameter names do not match the architecture".into(),
            });
        }
        model.schedule = meta.schedule;
        if let Some(eps) = meta.quantile_eps {
            let reference = read_tensor(dir.join("quantile.npnt"))?;
            model.quantile = Some(QuantileTransform::from_reference(reference, grid.to_vec(), eps)?);
        }
        let spath = dir.join("standardizer.npnt");
        if spath.exists() {
            let t = read_tensor(&spath)?;
            if t.ndim() != 2 || t.dim(0) != 2 {
                return Err(Error::shape("standardizer.npnt", format!("{:?}", t.shape())));
            }
            model.standardizer = Some(Standardizer {
                mean: t.row(0).to_vec(),
                std: t.row(1).to_vec(),
            });
        }
        let cdir = dir.join("context");
        if cdir.exists() {
            model.context = Some(FixedEffectSet::load(&cdir)?);
        }
        let lpath = dir.join("trainlog.csv");
        let text = fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
        model.log = parse_trainlog(&text, &lpath)?;
        Ok(model)
    }
}
