use crate::error::{Error, Result};
use crate::mixed_effect::{DesignMatrix, FixedEffectSet};
use crate::neural_process::model::{DropoutSource, NpModel};
use crate::neural_process::ops::context_for;
use crate::tensorcore::{Graph, Mode, Rng, Tensor};

/// Default cap on `K * L` decoder evaluations per prediction.
pub const DEFAULT_SAMPLE_BUDGET: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictConfig {
    /// Dropout passes.
    pub k: usize,
    /// Latent draws per pass.
    pub l: usize,
    pub mc_dropout: bool,
    pub budget: usize,
}

impl PredictConfig {
    pub fn new(k: usize, l: usize) -> Self {
        PredictConfig {
            k,
            l,
            mc_dropout: true,
            budget: DEFAULT_SAMPLE_BUDGET,
        }
    }
}

/// Predictive moments per subject and voxel (quantile space).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSummary {
    pub mean: Tensor,
    /// Variance of the per-pass means across dropout passes.
    pub epistemic: Tensor,
    /// Mean within-pass variance across latent draws plus the noise variance.
    pub aleatoric: Tensor,
    /// Learned per-voxel noise variance (one subject's extent).
    pub noise_var: Tensor,
}

impl PredictiveSummary {
    pub fn total(&self) -> Tensor {
        self.epistemic
            .zip_map(&self.aleatoric, |e, a| e + a)
            .expect("summary tensors share a shape")
    }
}

/// Every decoded volume batch, `samples[k * l_count + l]` of shape `[N, T...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleCube {
    pub k: usize,
    pub l: usize,
    pub samples: Vec<Tensor>,
    pub noise_var: Tensor,
}

impl SampleCube {
    pub fn get(&self, k: usize, l: usize) -> &Tensor {
        &self.samples[k * self.l + l]
    }
}

fn mean_and_var(parts: &[&[f64]], out_mean: &mut [f64], out_var: &mut [f64]) {
    let c = parts.len() as f64;
    for (i, (m, v)) in out_mean.iter_mut().zip(out_var.iter_mut()).enumerate() {
        let mu = parts.iter().map(|p| p[i]).sum::<f64>() / c;
        *m = mu;
        *v = parts.iter().map(|p| (p[i] - mu).powi(2)).sum::<f64>() / c;
    }
}

/// Folds passes one at a time; only the per-pass means are retained.
struct Accumulator {
    shape: Vec<usize>,
    pass_means: Vec<Vec<f64>>,
    within: Vec<f64>,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            shape: Vec::new(),
            pass_means: Vec::new(),
            within: Vec::new(),
        }
    }

    fn push_pass(&mut self, draws: &[Tensor]) -> Result<()> {
        let first = draws.first().ok_or_else(|| Error::invalid("pass without latent draws"))?;
        if self.pass_means.is_empty() {
            self.shape = first.shape().to_vec();
            self.within = vec![0.0; first.len()];
        }
        if draws.iter().any(|d| d.shape() != &self.shape[..]) {
            return Err(Error::shape("summarize", "draws differ in shape"));
        }
        let len = first.len();
        let mut pm = vec![0.0; len];
        let mut var = vec![0.0; len];
        let refs: Vec<&[f64]> = draws.iter().map(|d| d.data()).collect();
        mean_and_var(&refs, &mut pm, &mut var);
        self.within.iter_mut().zip(&var).for_each(|(w, v)| *w += v);
        self.pass_means.push(pm);
        Ok(())
    }

    fn finish(self, noise_var: &Tensor) -> Result<PredictiveSummary> {
        let k = self.pass_means.len();
        if k == 0 {
            return Err(Error::invalid("no dropout passes"));
        }
        let len = self.within.len();
        let t = noise_var.len();
        if len % t != 0 {
            return Err(Error::shape("summarize", "noise variance does not tile the samples"));
        }
        let mut mean = vec![0.0; len];
        let mut epistemic = vec![0.0; len];
        let refs: Vec<&[f64]> = self.pass_means.iter().map(|p| p.as_slice()).collect();
        mean_and_var(&refs, &mut mean, &mut epistemic);
        let nv = noise_var.data();
        let aleatoric = self
            .within
            .iter()
            .enumerate()
            .map(|(i, w)| w / k as f64 + nv[i % t])
            .collect();
        Ok(PredictiveSummary {
            mean: Tensor::new(self.shape.clone(), mean)?,
            epistemic: Tensor::new(self.shape.clone(), epistemic)?,
            aleatoric: Tensor::new(self.shape, aleatoric)?,
            noise_var: noise_var.clone(),
        })
    }
}

/// Reduces a sample cube to predictive moments. Variances are population
/// variances, so `epistemic + aleatoric - noise` equals the variance of the
/// pooled samples.
pub fn summarize(cube: &SampleCube) -> Result<PredictiveSummary> {
    if cube.k == 0 || cube.l == 0 || cube.samples.len() != cube.k * cube.l {
        return Err(Error::invalid("sample cube is empty or ragged"));
    }
    let mut acc = Accumulator::new();
    for draws in cube.samples.chunks(cube.l) {
        acc.push_pass(draws)?;
    }
    acc.finish(&cube.noise_var)
}

/// Draws the full `K x L` sample cube at covariates `x_star`.
///
/// Pass `k` uses `rng.split(k)`: its encoder dropout masks, its decoder
/// masks (reused for every latent draw of the pass) and the latent noise of
/// draw `l` come from distinct sub-streams. Masks and latent noise are
/// shared by all subjects of a pass, so each subject's prediction does not
/// depend on which other subjects are in the batch.
pub fn predict_samples(
    model: &NpModel,
    x_star: &DesignMatrix,
    f: &FixedEffectSet,
    cfg: &PredictConfig,
    rng: &Rng,
) -> Result<SampleCube> {
    let mut samples = Vec::with_capacity(cfg.k.min(cfg.budget) * cfg.l.min(cfg.budget));
    run_passes(model, x_star, f, cfg, rng, |draws| {
        samples.extend(draws);
        Ok(())
    })?;
    Ok(SampleCube {
        k: cfg.k,
        l: cfg.l,
        samples,
        noise_var: model.noise_var(),
    })
}

fn run_passes(
    model: &NpModel,
    x_star: &DesignMatrix,
    f: &FixedEffectSet,
    cfg: &PredictConfig,
    rng: &Rng,
    mut visit: impl FnMut(Vec<Tensor>) -> Result<()>,
) -> Result<()> {
    if cfg.k == 0 || cfg.l == 0 {
        return Err(Error::invalid("K and L must be at least 1"));
    }
    if cfg.k.saturating_mul(cfg.l) > cfg.budget {
        return Err(Error::invalid(format!(
            "K * L = {} exceeds the sample budget {}",
            cfg.k as u128 * cfg.l as u128,
            cfg.budget
        )));
    }
    let arch = model.arch();
    if f.m() != arch.context_channels {
        return Err(Error::shape(
            "predict_distribution",
            format!("model expects {} context channels, set has {}", arch.context_channels, f.m()),
        ));
    }
    let c = context_for(f, x_star)?;
    let mode = Mode::Infer { mc_dropout: cfg.mc_dropout };
    let q = arch.latent_dim;
    let n = x_star.n();
    for k in 0..cfg.k {
        let pass = rng.split(k as u64);
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let xn = g.input(x_star.values().clone());
        let cn = g.input(c.clone());
        let mut enc_drop = DropoutSource::new(pass.split(0), true);
        let (mean, std) = model.encoder_nodes(&mut g, &b, xn, cn, false, mode, &mut enc_drop, &mut Vec::new())?;
        let dec_drop = DropoutSource::new(pass.split(1), true);
        let (mv, sv) = (g.value(mean).clone(), g.value(std).clone());
        let mut draws = Vec::with_capacity(cfg.l);
        for l in 0..cfg.l {
            let u = pass.split(2 + l as u64).normals(q);
            let z: Vec<f64> = (0..n * q).map(|i| mv.data()[i] + sv.data()[i] * u[i % q]).collect();
            let mut gd = Graph::new();
            let bd = model.bind(&mut gd, false);
            let xd = gd.input(x_star.values().clone());
            let zn = gd.input(Tensor::new(vec![n, q], z)?);
            let (out, _) = model.decoder_nodes(&mut gd, &bd, xd, zn, mode, &mut dec_drop.clone(), &mut Vec::new())?;
            draws.push(gd.value(out).clone());
        }
        visit(draws)?;
    }
    Ok(())
}

/// Predictive mean with epistemic (MC dropout) and aleatoric (latent draws
/// plus noise) variances at standardized covariates `x_star`.
pub fn predict_distribution(
    model: &NpModel,
    x_star: &DesignMatrix,
    f: &FixedEffectSet,
    k: usize,
    l: usize,
    rng: &Rng,
) -> Result<PredictiveSummary> {
    predict_with(model, x_star, f, &PredictConfig::new(k, l), rng)
}

pub fn predict_with(
    model: &NpModel,
    x_star: &DesignMatrix,
    f: &FixedEffectSet,
    cfg: &PredictConfig,
    rng: &Rng,
) -> Result<PredictiveSummary> {
    let mut acc = Accumulator::new();
    run_passes(model, x_star, f, cfg, rng, |draws| acc.push_pass(&draws))?;
    acc.finish(&model.noise_var())
}
