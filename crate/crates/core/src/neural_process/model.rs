use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::mixed_effect::{FixedEffectSet, Standardizer};
use crate::neural_process::arch::{NpArchitecture, STD_FLOOR};
use crate::neural_process::quantile::QuantileTransform;
use crate::neural_process::train::{EpochLog, TrainSchedule};
use crate::tensorcore::graph::BatchStats;
use crate::tensorcore::layers::dropout_mask;
use crate::tensorcore::{Graph, LayerKind, Mode, NodeId, Rng, RunningStats, Tensor};

pub const LOG_NOISE_VAR: &str = "dec.log_noise_var";

/// Trained (or freshly initialized) neural-process model.
///
/// Parameters live in a flat slot list in the order of
/// [`NpArchitecture::layers`], followed by the per-voxel log noise variance.
/// The preprocessing state fitted alongside the network (quantile
/// transform, covariate standardizer, context set) is attached by the
/// pipeline and persisted with the model.
#[derive(Clone, Debug, PartialEq)]
pub struct NpModel {
    arch: NpArchitecture,
    layers: Vec<(String, LayerKind)>,
    first_slot: HashMap<String, usize>,
    param_names: Vec<String>,
    pub(crate) params: Vec<Tensor>,
    pub(crate) running: BTreeMap<String, RunningStats>,
    pub quantile: Option<QuantileTransform>,
    pub standardizer: Option<Standardizer>,
    pub context: Option<FixedEffectSet>,
    pub schedule: Option<TrainSchedule>,
    pub log: Vec<EpochLog>,
    pub seed: u64,
}

fn slot_suffix(kind: &LayerKind, i: usize) -> &'static str {
    match (kind, i) {
        (LayerKind::BatchNorm3d { .. }, 0) => "gamma",
        (LayerKind::BatchNorm3d { .. }, _) => "beta",
        (_, 0) => "weight",
        _ => "bias",
    }
}

impl NpModel {
    /// Fresh parameters; layer `i` draws from `rng.split(i)`.
    pub fn init(arch: NpArchitecture, rng: &Rng) -> Result<NpModel> {
        arch.validate()?;
        let layers = arch.layers()?;
        let mut params = Vec::new();
        for (i, (_, kind)) in layers.iter().enumerate() {
            params.extend(kind.init_params(&mut rng.split(i as u64)));
        }
        params.push(Tensor::full(&arch.grid, arch.init_log_noise_var));
        NpModel::assemble(arch, layers, params, BTreeMap::new(), rng.seed())
    }

    fn assemble(
        arch: NpArchitecture,
        layers: Vec<(String, LayerKind)>,
        params: Vec<Tensor>,
        mut running: BTreeMap<String, RunningStats>,
        seed: u64,
    ) -> Result<NpModel> {
        let mut first_slot = HashMap::new();
        let mut param_names = Vec::new();
        for (name, kind) in &layers {
            first_slot.insert(name.clone(), param_names.len());
            for (i, _) in kind.param_shapes().iter().enumerate() {
                param_names.push(format!("{name}.{}", slot_suffix(kind, i)));
            }
            if let LayerKind::BatchNorm3d { channels } = kind {
                running.entry(name.clone()).or_insert_with(|| RunningStats::new(*channels));
            }
        }
        first_slot.insert(LOG_NOISE_VAR.into(), param_names.len());
        param_names.push(LOG_NOISE_VAR.into());
        let model = NpModel {
            arch,
            layers,
            first_slot,
            param_names,
            params,
            running,
            quantile: None,
            standardizer: None,
            context: None,
            schedule: None,
            log: Vec::new(),
            seed,
        };
        model.check_params()?;
        Ok(model)
    }

    /// Rebuilds a model from stored tensors (slot order of [`Self::param_names`]).
    pub fn from_parts(
        arch: NpArchitecture,
        params: Vec<Tensor>,
        running: BTreeMap<String, RunningStats>,
        seed: u64,
    ) -> Result<NpModel> {
        arch.validate()?;
        let layers = arch.layers()?;
        NpModel::assemble(arch, layers, params, running, seed)
    }

    fn expected_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes: Vec<Vec<usize>> = self.layers.iter().flat_map(|(_, k)| k.param_shapes()).collect();
        shapes.push(self.arch.grid.to_vec());
        shapes
    }

    fn check_params(&self) -> Result<()> {
        let shapes = self.expected_shapes();
        if shapes.len() != self.params.len() {
            return Err(Error::shape(
                "NpModel",
                format!("architecture has {} parameter tensors, got {}", shapes.len(), self.params.len()),
            ));
        }
        for ((shape, p), name) in shapes.iter().zip(&self.params).zip(&self.param_names) {
            if p.shape() != &shape[..] {
                return Err(Error::shape(name.as_str(), format!("expected {:?}, got {:?}", shape, p.shape())));
            }
        }
        for (name, kind) in &self.layers {
            if let LayerKind::BatchNorm3d { channels } = kind {
                let r = &self.running[name];
                if r.mean.len() != *channels || r.var.len() != *channels {
                    return Err(Error::shape(name.as_str(), "running statistics length"));
                }
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> &NpArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable access for optimizers and finite-difference checks; shapes
    /// must be preserved.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn running(&self) -> &BTreeMap<String, RunningStats> {
        &self.running
    }

    pub fn noise_var(&self) -> Tensor {
        use crate::neural_process::arch::NOISE_VAR_FLOOR;
        self.params[self.first_slot[LOG_NOISE_VAR]].map(|v| v.exp().max(NOISE_VAR_FLOOR))
    }

    /// Replaces the per-voxel log noise variance, e.g. with a data-driven
    /// starting value before training.
    pub fn set_log_noise_var(&mut self, log_var: Tensor) -> Result<()> {
        let slot = self.first_slot[LOG_NOISE_VAR];
        if log_var.shape() != self.params[slot].shape() {
            return Err(Error::shape(
                "set_log_noise_var",
                format!("{:?} vs {:?}", log_var.shape(), self.params[slot].shape()),
            ));
        }
        if !log_var.is_finite() {
            return Err(Error::NonFinite("log noise variance".into()));
        }
        self.params[slot] = log_var;
        Ok(())
    }

    /// Places every parameter in `g`, as trainable slots or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| if trainable { g.param(i, p.clone()) } else { g.input(p.clone()) })
            .collect();
        Bound { ids }
    }

    fn slot(&self, name: &str) -> usize {
        self.first_slot[name]
    }

    pub(crate) fn update_running(&mut self, stats: &[(String, BatchStats)]) {
        let momentum = self.arch.bn_momentum;
        for (name, s) in stats {
            if let Some(r) = self.running.get_mut(name) {
                r.update(s, momentum);
            }
        }
    }

    fn batchnorm(
        &self,
        g: &mut Graph,
        b: &Bound,
        name: &str,
        h: NodeId,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<NodeId> {
        let s = self.slot(name);
        match mode {
            Mode::Train => {
                let (id, st) = g.batch_norm_train(h, b.ids[s], b.ids[s + 1])?;
                stats.push((name.to_string(), st));
                Ok(id)
            }
            Mode::Infer { .. } => {
                let r = &self.running[name];
                g.batch_norm_infer(h, b.ids[s], b.ids[s + 1], &r.mean, &r.var)
            }
        }
    }

    fn dense(&self, g: &mut Graph, b: &Bound, name: &str, h: NodeId) -> Result<NodeId> {
        let s = self.slot(name);
        g.linear(h, b.ids[s], Some(b.ids[s + 1]))
    }

    /// Encoder graph. `input` is `[N, M, T1, T2, T3]` context functions, or
    /// with `replicated` set a `[N, 1, T1, T2, T3]` volume standing for M
    /// identical channels (the first conv then uses its kernel summed over
    /// input channels, which is the same linear map).
    #[allow(clippy::too_many_arguments)]
    pub fn encoder_nodes(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: NodeId,
        input: NodeId,
        replicated: bool,
        mode: Mode,
        drop: &mut DropoutSource,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<(NodeId, NodeId)> {
        let a = &self.arch;
        let channels = if replicated { 1 } else { a.context_channels };
        let is = g.shape(input).to_vec();
        if is.len() != 5 || is[1] != channels || is[2..] != a.grid[..] {
            return Err(Error::shape(
                "encoder",
                format!(
                    "input {:?}: expected [N, {channels}, {}, {}, {}]",
                    is, a.grid[0], a.grid[1], a.grid[2]
                ),
            ));
        }
        let n = is[0];
        check_covariates(g.shape(x), n, a.covariates, "encoder")?;

        let mut h = input;
        for i in 0..a.conv_channels.len() {
            let s = self.slot(&format!("enc.conv{i}"));
            let mut w = b.ids[s];
            if i == 0 && replicated {
                w = g.sum_channels(w)?;
            }
            h = g.conv3d(h, w, Some(b.ids[s + 1]), 1, a.pad())?;
            h = self.batchnorm(g, b, &format!("enc.bn{i}"), h, mode, stats)?;
            h = g.avg_pool3d(h, a.pool)?;
            h = g.leaky_relu(h, a.leaky_slope);
        }
        h = g.reshape(h, vec![n, a.bottleneck_len()?])?;
        h = self.dense(g, b, "enc.fc", h)?;
        h = g.leaky_relu(h, a.leaky_slope);
        h = drop.apply(g, h, a.dropout, mode)?;
        h = g.concat(h, x)?;
        for j in 0..a.joint_dense.len() {
            h = self.dense(g, b, &format!("enc.joint{j}"), h)?;
            h = g.leaky_relu(h, a.leaky_slope);
            h = drop.apply(g, h, a.dropout, mode)?;
        }
        let mean = self.dense(g, b, "enc.mean", h)?;
        let raw = self.dense(g, b, "enc.std", h)?;
        let sp = g.softplus(raw);
        let std = g.add_scalar(sp, STD_FLOOR);
        Ok((mean, std))
    }

    /// Decoder graph on `x: [N, D]`, `z: [N, Q]`; returns the `[N, T1, T2,
    /// T3]` mean node and the log-noise-variance parameter node.
    pub fn decoder_nodes(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: NodeId,
        z: NodeId,
        mode: Mode,
        drop: &mut DropoutSource,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<(NodeId, NodeId)> {
        let a = &self.arch;
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != a.latent_dim {
            return Err(Error::shape(
                "decoder",
                format!("latent {:?}: axis 1 must be {}", zs, a.latent_dim),
            ));
        }
        let n = zs[0];
        check_covariates(g.shape(x), n, a.covariates, "decoder")?;

        let mut h = g.concat(x, z)?;
        for j in 0..a.decoder_dense.len() {
            h = self.dense(g, b, &format!("dec.fc{j}"), h)?;
            h = g.leaky_relu(h, a.leaky_slope);
            h = drop.apply(g, h, a.dropout, mode)?;
        }
        h = self.dense(g, b, "dec.out", h)?;
        h = g.leaky_relu(h, a.leaky_slope);
        let plan = a.plan()?;
        let bottom = plan.bottleneck();
        let c_last = *a.conv_channels.last().unwrap();
        h = g.reshape(h, vec![n, c_last, bottom[0], bottom[1], bottom[2]])?;
        let stack = a.decoder_stack()?;
        let last = stack.len() - 1;
        for (i, layer) in stack.iter().enumerate() {
            let LayerKind::ConvTranspose3d { stride, pad, output, .. } = *layer else {
                unreachable!("decoder stack holds transposed convolutions")
            };
            let s = self.slot(&format!("dec.deconv{i}"));
            h = g.conv_transpose3d(h, b.ids[s], Some(b.ids[s + 1]), stride, pad, output)?;
            if i != last {
                h = self.batchnorm(g, b, &format!("dec.bn{i}"), h, mode, stats)?;
                h = g.leaky_relu(h, a.leaky_slope);
            }
        }
        h = g.sigmoid(h);
        let mut shape = vec![n];
        shape.extend_from_slice(&a.grid);
        let mean = g.reshape(h, shape)?;
        Ok((mean, b.ids[self.slot(LOG_NOISE_VAR)]))
    }
}

fn check_covariates(xs: &[usize], n: usize, d: usize, op: &str) -> Result<()> {
    if xs.len() != 2 || xs[0] != n || xs[1] != d {
        return Err(Error::shape(op, format!("covariates {:?}: expected [{n}, {d}]", xs)));
    }
    Ok(())
}

/// Parameter nodes of one graph, indexed by slot.
#[derive(Clone, Debug)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

/// Supplies dropout masks. With `shared_rows` one mask row is drawn per
/// layer and reused for every subject, so a Monte Carlo pass evaluates the
/// same thinned network on all of them.
#[derive(Clone, Debug)]
pub struct DropoutSource {
    rng: Rng,
    shared_rows: bool,
}

impl DropoutSource {
    pub fn new(rng: Rng, shared_rows: bool) -> Self {
        DropoutSource { rng, shared_rows }
    }

    pub fn apply(&mut self, g: &mut Graph, x: NodeId, rate: f64, mode: Mode) -> Result<NodeId> {
        if !mode.dropout_active() || rate == 0.0 {
            return Ok(x);
        }
        let (n, f) = {
            let t = g.value(x);
            (t.dim(0), t.row_len())
        };
        let mask = if self.shared_rows {
            dropout_mask(f, rate, &mut self.rng).repeat(n)
        } else {
            dropout_mask(n * f, rate, &mut self.rng)
        };
        g.mask(x, mask)
    }
}
