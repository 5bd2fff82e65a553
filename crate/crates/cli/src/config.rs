//! Run configuration: one JSON document covering every stage.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use npnorm::cohort::{CohortSpec, SplitProtocol};
use npnorm::neural_process::{NpArchitecture, PredictConfig, TrainSchedule, DEFAULT_CLIP, DEFAULT_SAMPLE_BUDGET};
use npnorm::normative::{Block, Sign, SummaryConfig};

use crate::exit::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. It replaces `cohort.seed` and derives every other stream.
    pub seed: u64,
    /// Existing cohort directory; when absent the cohort is generated from
    /// `cohort` into `<output>/cohort`.
    pub input: Option<PathBuf>,
    pub cohort: CohortSpec,
    pub split: SplitConfig,
    pub quantile: QuantileConfig,
    pub context: ContextConfig,
    pub architecture: ArchitectureConfig,
    pub schedule: TrainSchedule,
    pub prediction: PredictionConfig,
    pub novelty: NoveltyConfig,
    pub analysis: AnalysisConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            input: None,
            cohort: CohortSpec::desk(0),
            split: SplitConfig::default(),
            quantile: QuantileConfig::default(),
            context: ContextConfig::default(),
            architecture: ArchitectureConfig::default(),
            schedule: TrainSchedule::default(),
            prediction: PredictionConfig::default(),
            novelty: NoveltyConfig::default(),
            analysis: AnalysisConfig::default(),
            output: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Training subjects per label: healthy, group 1, group 2, group 3.
    pub train: [usize; 4],
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: SplitProtocol::desk(0).train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileConfig {
    pub eps: f64,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig { eps: DEFAULT_CLIP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    #[serde(rename = "M")]
    pub m: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig { m: 20 }
    }
}

/// The data-independent part of [`NpArchitecture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub encoder_dense: usize,
    pub joint_dense: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_dense: Vec<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    /// Used by `noise_init = constant`.
    pub init_log_noise_var: f64,
    pub noise_init: NoiseInit,
}

/// Starting value of the per-voxel log noise variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseInit {
    /// `init_log_noise_var` everywhere.
    Constant,
    /// Log of the per-voxel residual variance of the training OLS fit in
    /// quantile space.
    Residual,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let a = NpArchitecture::desk([1, 1, 1], 1, 1);
        ArchitectureConfig {
            conv_channels: a.conv_channels,
            kernel: a.kernel,
            pool: a.pool,
            encoder_dense: a.encoder_dense,
            joint_dense: a.joint_dense,
            latent_dim: a.latent_dim,
            decoder_dense: a.decoder_dense,
            dropout: a.dropout,
            leaky_slope: a.leaky_slope,
            bn_momentum: a.bn_momentum,
            init_log_noise_var: a.init_log_noise_var,
            noise_init: NoiseInit::Residual,
        }
    }
}

impl ArchitectureConfig {
    pub fn build(&self, grid: [usize; 3], covariates: usize, context_channels: usize) -> NpArchitecture {
        NpArchitecture {
            grid,
            covariates,
            context_channels,
            conv_channels: self.conv_channels.clone(),
            kernel: self.kernel,
            pool: self.pool,
            encoder_dense: self.encoder_dense,
            joint_dense: self.joint_dense.clone(),
            latent_dim: self.latent_dim,
            decoder_dense: self.decoder_dense.clone(),
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
            bn_momentum: self.bn_momentum,
            init_log_noise_var: self.init_log_noise_var,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    /// Dropout passes.
    #[serde(rename = "K")]
    pub k: usize,
    /// Latent draws per pass.
    #[serde(rename = "L")]
    pub l: usize,
    pub mc_dropout: bool,
    pub budget: usize,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            k: 10,
            l: 10,
            mc_dropout: true,
            budget: DEFAULT_SAMPLE_BUDGET,
        }
    }
}

impl PredictionConfig {
    pub fn to_predict(&self) -> PredictConfig {
        PredictConfig {
            k: self.k,
            l: self.l,
            mc_dropout: self.mc_dropout,
            budget: self.budget,
        }
    }
}

/// Which subjects' summaries the extreme-value distribution is fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GevdPopulation {
    Train,
    TrainHealthy,
    Test,
    HealthyTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoveltyConfig {
    pub top_fraction: f64,
    pub sign: Sign,
    pub block: Block,
    pub gevd_population: GevdPopulation,
}

impl Default for NoveltyConfig {
    fn default() -> Self {
        let s = SummaryConfig::default();
        NoveltyConfig {
            top_fraction: s.top_fraction,
            sign: s.sign,
            block: s.block,
            gevd_population: GevdPopulation::Train,
        }
    }
}

impl NoveltyConfig {
    pub fn summary(&self) -> SummaryConfig {
        SummaryConfig {
            top_fraction: self.top_fraction,
            sign: self.sign,
            block: self.block,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// JSON list of voxel-index lists. Without it, generated cohorts use
    /// their ground-truth regions and other cohorts skip the analysis.
    pub region_masks: Option<PathBuf>,
    pub alpha: f64,
    /// Also score the Bayesian linear baseline.
    pub baseline: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            region_masks: None,
            alpha: 0.01,
            baseline: true,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides. Values parse as JSON and fall
    /// back to plain strings.
    pub fn with_overrides(&self, sets: &[String]) -> Result<RunConfig> {
        let mut root = self.to_value();
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {s:?} is not KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key, value)?;
        }
        RunConfig::from_value(root)
    }

    /// Makes the cohort seed follow the master seed and checks the
    /// cross-field constraints.
    pub fn finalize(mut self) -> Result<RunConfig> {
        self.cohort.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m).into());
        if self.context.m == 0 {
            return bad("context.M must be at least 1".into());
        }
        if self.prediction.k == 0 || self.prediction.l == 0 {
            return bad("prediction.K and prediction.L must be at least 1".into());
        }
        if self.prediction.k * self.prediction.l > self.prediction.budget {
            return bad(format!(
                "prediction.K * prediction.L = {} exceeds prediction.budget {}",
                self.prediction.k * self.prediction.l,
                self.prediction.budget
            ));
        }
        if !(self.quantile.eps > 0.0 && self.quantile.eps < 0.5) {
            return bad(format!("quantile.eps {} outside (0, 0.5)", self.quantile.eps));
        }
        let f = self.novelty.top_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("novelty.top_fraction {f} outside (0, 1]"));
        }
        if !(self.analysis.alpha > 0.0 && self.analysis.alpha < 1.0) {
            return bad(format!("analysis.alpha {} outside (0, 1)", self.analysis.alpha));
        }
        self.schedule.validate().map_err(|e| CliError::Config(format!("schedule: {e}")))?;
        if self.input.is_none() {
            self.cohort.validate().map_err(|e| CliError::Config(format!("cohort: {e}")))?;
        }
        Ok(())
    }

    pub fn split_protocol(&self) -> SplitProtocol {
        SplitProtocol {
            train: self.split.train,
            seed: self.seed,
        }
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.input.clone().unwrap_or_else(|| self.output.join("cohort"))
    }

    pub fn model_dir(&self) -> PathBuf {
        self.output.join("model")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output.join("eval")
    }

    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if !map.contains_key(*part) {
                    // optional fields serialize as null; unknown names fail here
                    return Err(CliError::Config(format!("unknown config key {key:?}")).into());
                }
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part).expect("checked")
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::Config(format!("{key:?}: {part:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Config(format!("{key:?}: index {idx} beyond length {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("{key:?}: {part:?} is not a section")).into()),
        };
    }
    Err(CliError::Config("empty override key".into())).context(key.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_value(cfg.to_value()).unwrap(), cfg);
        assert_eq!(RunConfig::from_value(serde_json::json!({})).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_value(serde_json::json!({"sed": 1})).is_err());
        assert!(RunConfig::from_value(serde_json::json!({"context": {"m": 3}})).is_err());
        assert!(RunConfig::default().with_overrides(&["context.N=3".into()]).is_err());
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "context.M=5".into(),
                "novelty.sign=signed".into(),
                "cohort.grid.0=4".into(),
                "input=/tmp/x".into(),
            ])
            .unwrap();
        assert_eq!(cfg.context.m, 5);
        assert_eq!(cfg.novelty.sign, Sign::Signed);
        assert_eq!(cfg.cohort.grid, [4, 10, 6]);
        assert_eq!(cfg.input, Some(PathBuf::from("/tmp/x")));
        assert!(RunConfig::default().with_overrides(&["prediction.K=1001".into()]).unwrap().finalize().is_err());
    }
}
