use crate::error::{Error, Result};
use crate::mixed_effect::{context_functions, DesignMatrix, FixedEffectSet};
use crate::neural_process::arch::NOISE_VAR_FLOOR;
use crate::neural_process::model::{Bound, DropoutSource, NpModel};
use crate::tensorcore::graph::{kl_terms, BatchStats};
use crate::tensorcore::{Graph, Mode, NodeId, Rng, Tensor};

/// Diagonal Gaussian over the global latent variable, one row per subject.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mean: Tensor,
    pub std: Tensor,
}

impl LatentGaussian {
    pub fn new(mean: Tensor, std: Tensor) -> Result<Self> {
        if mean.ndim() != 2 || mean.shape() != std.shape() {
            return Err(Error::shape(
                "LatentGaussian",
                format!("mean {:?} vs std {:?}", mean.shape(), std.shape()),
            ));
        }
        if let Some(s) = std.data().iter().find(|s| !(**s > 0.0)) {
            return Err(Error::invalid(format!("latent std must be positive, got {s}")));
        }
        Ok(LatentGaussian { mean, std })
    }

    pub fn n(&self) -> usize {
        self.mean.dim(0)
    }

    pub fn q(&self) -> usize {
        self.mean.dim(1)
    }
}

/// Design on which the context functions are evaluated: the encoder's
/// covariates, with an intercept column prepended when the fits carry one.
pub fn context_design(f: &FixedEffectSet, x: &DesignMatrix) -> Result<DesignMatrix> {
    let d = f.coeffs()[0].dim(0);
    if d == x.d() {
        Ok(x.clone())
    } else if d == x.d() + 1 {
        Ok(x.with_intercept())
    } else {
        Err(Error::shape(
            "context_functions",
            format!("fits use {d} covariates, design has {}", x.d()),
        ))
    }
}

/// `context_functions` evaluated on [`context_design`].
pub fn context_for(f: &FixedEffectSet, x: &DesignMatrix) -> Result<Tensor> {
    context_functions(f, &context_design(f, x)?)
}

fn latent_from(g: &Graph, mean: NodeId, std: NodeId) -> Result<LatentGaussian> {
    LatentGaussian::new(g.value(mean).clone(), g.value(std).clone())
}

fn volume_channel(y: &Tensor, grid: [usize; 3]) -> Result<Tensor> {
    if y.ndim() != 4 || y.shape()[1..] != grid[..] {
        return Err(Error::shape(
            "encode_target",
            format!("target {:?}: expected [N, {}, {}, {}]", y.shape(), grid[0], grid[1], grid[2]),
        ));
    }
    y.clone().reshape(vec![y.dim(0), 1, grid[0], grid[1], grid[2]])
}

fn dropout_source(mode: Mode, rng: &mut Rng) -> DropoutSource {
    // inference passes share one mask across subjects
    let shared = matches!(mode, Mode::Infer { .. });
    DropoutSource::new(Rng::with_stream(rng.next_u64(), rng.next_u64()), shared)
}

/// Context-conditioned latent distribution `q(Z | X, C)`.
pub fn encode(model: &NpModel, x: &DesignMatrix, c: &Tensor, mode: Mode, rng: &mut Rng) -> Result<LatentGaussian> {
    let m = model.arch().context_channels;
    if c.ndim() != 5 || c.dim(1) != m {
        return Err(Error::shape(
            "encode",
            format!("context {:?}: model expects {m} channels on axis 1", c.shape()),
        ));
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let xn = g.input(x.values().clone());
    let cn = g.input(c.clone());
    let mut drop = dropout_source(mode, rng);
    let (mean, std) = model.encoder_nodes(&mut g, &b, xn, cn, false, mode, &mut drop, &mut Vec::new())?;
    latent_from(&g, mean, std)
}

/// Target-conditioned latent distribution `q(Z | X, Y)`: `y` fills every
/// encoder input channel.
pub fn encode_target(model: &NpModel, x: &DesignMatrix, y: &Tensor, mode: Mode, rng: &mut Rng) -> Result<LatentGaussian> {
    let yc = volume_channel(y, model.arch().grid)?;
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let xn = g.input(x.values().clone());
    let yn = g.input(yc);
    let mut drop = dropout_source(mode, rng);
    let (mean, std) = model.encoder_nodes(&mut g, &b, xn, yn, true, mode, &mut drop, &mut Vec::new())?;
    latent_from(&g, mean, std)
}

/// Reparameterized draw `mean + std * u` with one standard normal per entry.
pub fn sample_latent(q: &LatentGaussian, rng: &mut Rng) -> Tensor {
    let u = rng.normals(q.mean.len());
    let data = q
        .mean
        .data()
        .iter()
        .zip(q.std.data())
        .zip(u)
        .map(|((m, s), u)| m + s * u)
        .collect();
    Tensor::new(q.mean.shape().to_vec(), data).expect("latent shape")
}

/// Decoder output: quantile-space mean volumes and the per-voxel noise
/// variance shared by all subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub mean: Tensor,
    pub noise_var: Tensor,
}

pub fn decode(model: &NpModel, x: &DesignMatrix, z: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Decoded> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let xn = g.input(x.values().clone());
    let zn = g.input(z.clone());
    let mut drop = dropout_source(mode, rng);
    let (mean, _) = model.decoder_nodes(&mut g, &b, xn, zn, mode, &mut drop, &mut Vec::new())?;
    Ok(Decoded {
        mean: g.value(mean).clone(),
        noise_var: model.noise_var(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlDivergence {
    pub per_subject: Vec<f64>,
    pub total: f64,
}

/// Closed-form `KL(q || p)` for diagonal Gaussians, summed over latent
/// dimensions.
pub fn kl_diag_gaussian(q: &LatentGaussian, p: &LatentGaussian) -> Result<KlDivergence> {
    if q.mean.shape() != p.mean.shape() || q.std.shape() != p.std.shape() {
        return Err(Error::shape(
            "kl_diag_gaussian",
            format!("q {:?} vs p {:?}", q.mean.shape(), p.mean.shape()),
        ));
    }
    if q.std.data().iter().chain(p.std.data()).any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("kl_diag_gaussian: nonpositive standard deviation"));
    }
    let qd = q.mean.row_len();
    let terms: Vec<f64> = kl_terms(q.mean.data(), q.std.data(), p.mean.data(), p.std.data()).collect();
    let per_subject: Vec<f64> = terms.chunks(qd).map(|c| c.iter().sum()).collect();
    let total = per_subject.iter().sum();
    Ok(KlDivergence { per_subject, total })
}

/// `sum -1/2 [log(2 pi var) + (y - mean)^2 / var]`. `var` either matches
/// `y` or covers one subject's extent and is shared across subjects.
pub fn gaussian_loglik(y: &Tensor, mean: &Tensor, var: &Tensor) -> Result<f64> {
    if y.shape() != mean.shape() {
        return Err(Error::shape("gaussian_loglik", format!("y {:?} vs mean {:?}", y.shape(), mean.shape())));
    }
    let per_row = if var.shape() == y.shape() {
        y.len()
    } else if var.len() == y.row_len() {
        var.len()
    } else {
        return Err(Error::shape("gaussian_loglik", format!("variance {:?} vs y {:?}", var.shape(), y.shape())));
    };
    if let Some(v) = var.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(format!("gaussian_loglik: nonpositive variance {v}")));
    }
    let vd = var.data();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Ok(y
        .data()
        .iter()
        .zip(mean.data())
        .enumerate()
        .map(|(i, (a, m))| {
            let v = vd[i % per_row];
            -0.5 * (ln2pi + v.ln() + (a - m).powi(2) / v)
        })
        .sum())
}

/// ELBO terms summed over subjects: `loss = -(recon - kl)` with `recon` the
/// Monte Carlo estimate of the expected log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

pub(crate) struct ElboGraph {
    pub loss: NodeId,
    pub terms: ElboTerms,
    /// Batchnorm statistics of the context encoder pass and the last decoder
    /// pass, the ones that reflect inference-time inputs.
    pub stats: Vec<(String, BatchStats)>,
}

/// Builds the training objective. Both encoder passes share one dropout
/// stream so they see the same thinned network; sample `s` draws its
/// latent noise and decoder masks from `rng.split(1 + s)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_elbo(
    model: &NpModel,
    g: &mut Graph,
    b: &Bound,
    x: &DesignMatrix,
    y: &Tensor,
    c: &Tensor,
    mode: Mode,
    rng: &Rng,
    n_mc: usize,
) -> Result<ElboGraph> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be at least 1"));
    }
    let n = x.n();
    if y.dim(0) != n || c.dim(0) != n {
        return Err(Error::shape(
            "elbo_loss",
            format!("{n} covariate rows, {} targets, {} contexts", y.dim(0), c.dim(0)),
        ));
    }
    let m = model.arch().context_channels;
    if c.ndim() != 5 || c.dim(1) != m {
        return Err(Error::shape(
            "elbo_loss",
            format!("context {:?}: model expects {m} channels on axis 1", c.shape()),
        ));
    }
    let shared = matches!(mode, Mode::Infer { .. });
    let xn = g.input(x.values().clone());
    let cn = g.input(c.clone());
    let yn = g.input(volume_channel(y, model.arch().grid)?);

    let enc_drop = DropoutSource::new(rng.split(0), shared);
    let mut stats = Vec::new();
    let (mp, sp) = model.encoder_nodes(g, b, xn, cn, false, mode, &mut enc_drop.clone(), &mut stats)?;
    let (mq, sq) = model.encoder_nodes(g, b, xn, yn, true, mode, &mut enc_drop.clone(), &mut Vec::new())?;

    let q = g.value(mq).shape().to_vec();
    let mut nll_total: Option<NodeId> = None;
    let mut dec_stats = Vec::new();
    for s in 0..n_mc {
        let mut r = rng.split(1 + s as u64);
        let u = g.input(Tensor::new(q.clone(), r.normals(q.iter().product()))?);
        let su = g.mul(sq, u)?;
        let z = g.add(mq, su)?;
        let mut drop = DropoutSource::new(r.split(0), shared);
        dec_stats.clear();
        let (mean, logvar) = model.decoder_nodes(g, b, xn, z, mode, &mut drop, &mut dec_stats)?;
        let nll = g.gaussian_nll(y.clone(), mean, logvar, NOISE_VAR_FLOOR)?;
        nll_total = Some(match nll_total {
            None => nll,
            Some(acc) => g.add(acc, nll)?,
        });
    }
    let nll = g.scale(nll_total.expect("n_mc >= 1"), 1.0 / n_mc as f64);
    let kl = g.kl_diag(mq, sq, mp, sp)?;
    let loss = g.add(nll, kl)?;
    stats.extend(dec_stats);
    let recon = -g.value(nll).data()[0];
    let klv = g.value(kl).data()[0];
    Ok(ElboGraph {
        loss,
        terms: ElboTerms {
            loss: g.value(loss).data()[0],
            recon,
            kl: klv,
        },
        stats,
    })
}

/// Negative ELBO of a batch in training mode (batch statistics, dropout
/// active), with `n_mc` reparameterized samples.
pub fn elbo_loss(
    model: &NpModel,
    x: &DesignMatrix,
    y: &Tensor,
    c: &Tensor,
    rng: &Rng,
    n_mc: usize,
) -> Result<ElboTerms> {
    elbo_loss_mode(model, x, y, c, Mode::Train, rng, n_mc)
}

pub fn elbo_loss_mode(
    model: &NpModel,
    x: &DesignMatrix,
    y: &Tensor,
    c: &Tensor,
    mode: Mode,
    rng: &Rng,
    n_mc: usize,
) -> Result<ElboTerms> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    Ok(build_elbo(model, &mut g, &b, x, y, c, mode, rng, n_mc)?.terms)
}

/// [`elbo_loss`] together with the gradient of `loss` for every parameter
/// slot.
pub fn elbo_gradients(
    model: &NpModel,
    x: &DesignMatrix,
    y: &Tensor,
    c: &Tensor,
    rng: &Rng,
    n_mc: usize,
) -> Result<(ElboTerms, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let e = build_elbo(model, &mut g, &b, x, y, c, Mode::Train, rng, n_mc)?;
    let grads = g.backward(e.loss, model.params().len())?;
    Ok((e.terms, grads.params))
}
