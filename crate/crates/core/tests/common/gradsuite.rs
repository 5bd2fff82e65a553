//! Finite-difference gradient checks, one function per differentiable
//! operation or composed network. Each takes a seed and returns the worst
//! relative error for that random instance.

use super::{gradcheck, project, randn};
use npnorm::mixed_effect::{build_context_set, DesignMatrix, FixedEffectSet};
use npnorm::neural_process::{context_for, elbo_gradients, elbo_loss, DropoutSource, NpArchitecture, NpModel};
use npnorm::tensorcore::layers::{apply, LayerKind, Mode, RunningStats};
use npnorm::tensorcore::{Graph, NodeId, Rng, Tensor};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

pub type Check = fn(u64) -> f64;

/// Every check, by name.
pub const ALL: &[(&str, Check)] = &[
    ("dense", dense),
    ("conv3d", conv3d),
    ("conv_transpose3d", conv_transpose3d),
    ("avgpool3d", avgpool3d),
    ("batchnorm3d/train", batchnorm3d_train),
    ("batchnorm3d/infer", batchnorm3d_infer),
    ("leaky_relu", leaky_relu),
    ("softplus", softplus),
    ("sigmoid", sigmoid),
    ("dropout", dropout),
    ("concat/reshape/add/scale/exp", graph_primitives),
    ("sum_channels", sum_channels),
    ("gaussian_nll", gaussian_nll),
    ("kl_diag", kl_diag),
    ("encoder", encoder),
    ("decoder", decoder),
    ("elbo", elbo),
];

/// Worst error of `check` over the standard instance count.
pub fn worst(check: Check) -> f64 {
    (0..INSTANCES).map(check).fold(0.0, f64::max)
}

/// Runs `layer` on a random input as parameter slot 0, with its trainable
/// tensors in the following slots.
fn check_layer(layer: &LayerKind, input_shape: &[usize], mode: Mode, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut params = vec![randn(input_shape, &mut rng)];
    params.extend(layer.param_shapes().iter().map(|s| randn(s, &mut rng)));
    let running = RunningStats {
        mean: vec![0.3; 4],
        var: vec![1.7; 4],
    };
    gradcheck(&params, H, |g, ids| {
        let mut r = Rng::new(seed + 1000);
        let stats = match layer {
            LayerKind::BatchNorm3d { channels } => Some(RunningStats {
                mean: running.mean[..*channels].to_vec(),
                var: running.var[..*channels].to_vec(),
            }),
            _ => None,
        };
        let (out, _) = apply(g, layer, ids[0], &ids[1..], stats.as_ref(), mode, &mut r).unwrap();
        project(g, out, seed)
    })
}

pub fn dense(seed: u64) -> f64 {
    check_layer(&LayerKind::Dense { inputs: 5, outputs: 3 }, &[4, 5], Mode::Train, seed)
}

pub fn conv3d(seed: u64) -> f64 {
    let layer = LayerKind::Conv3d { in_channels: 2, out_channels: 3, kernel: 3, pad: 1 };
    check_layer(&layer, &[2, 2, 3, 4, 2], Mode::Train, seed)
}

pub fn conv_transpose3d(seed: u64) -> f64 {
    let layer = LayerKind::ConvTranspose3d {
        in_channels: 2,
        out_channels: 2,
        kernel: 3,
        stride: 2,
        pad: 1,
        output: [4, 3, 2],
    };
    check_layer(&layer, &[2, 2, 2, 2, 1], Mode::Train, seed)
}

pub fn avgpool3d(seed: u64) -> f64 {
    check_layer(&LayerKind::AvgPool3d { window: 2 }, &[2, 2, 3, 4, 5], Mode::Train, seed)
}

pub fn batchnorm3d_train(seed: u64) -> f64 {
    check_layer(&LayerKind::BatchNorm3d { channels: 3 }, &[3, 3, 2, 2, 2], Mode::Train, seed)
}

pub fn batchnorm3d_infer(seed: u64) -> f64 {
    let mode = Mode::Infer { mc_dropout: false };
    check_layer(&LayerKind::BatchNorm3d { channels: 3 }, &[3, 3, 2, 2, 2], mode, seed)
}

pub fn leaky_relu(seed: u64) -> f64 {
    check_layer(&LayerKind::LeakyRelu { slope: 0.01 }, &[3, 7], Mode::Train, seed)
}

pub fn softplus(seed: u64) -> f64 {
    check_layer(&LayerKind::Softplus, &[3, 7], Mode::Train, seed)
}

pub fn sigmoid(seed: u64) -> f64 {
    check_layer(&LayerKind::Sigmoid, &[3, 7], Mode::Train, seed)
}

/// The mask is drawn from a fixed stream, so both sides see the same one.
pub fn dropout(seed: u64) -> f64 {
    check_layer(&LayerKind::Dropout { rate: 0.3 }, &[4, 6], Mode::Train, seed)
}

pub fn graph_primitives(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let params = vec![randn(&[3, 2], &mut rng), randn(&[3, 4], &mut rng), randn(&[3, 6], &mut rng)];
    gradcheck(&params, H, |g, ids| {
        let c = g.concat(ids[0], ids[1]).unwrap();
        let s = g.add(c, ids[2]).unwrap();
        let e = g.exp(s);
        let k = g.scale(e, 0.7);
        let k = g.add_scalar(k, 2.0);
        let r = g.reshape(k, vec![2, 9]).unwrap();
        project(g, r, seed)
    })
}

/// Channel-summed kernel feeding a convolution, as used for the
/// replicated-target encoder pass.
pub fn sum_channels(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let params = vec![randn(&[2, 3, 2, 2, 2], &mut rng), randn(&[1, 1, 3, 3, 2], &mut rng)];
    gradcheck(&params, H, |g, ids| {
        let w = g.sum_channels(ids[0]).unwrap();
        let y = g.conv3d(ids[1], w, None, 1, 1).unwrap();
        project(g, y, seed)
    })
}

pub fn gaussian_nll(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let y = randn(&[3, 4], &mut rng);
    let params = vec![randn(&[3, 4], &mut rng), randn(&[4], &mut rng)];
    gradcheck(&params, H, |g, ids| g.gaussian_nll(y.clone(), ids[0], ids[1], 1e-6).unwrap())
}

pub fn kl_diag(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let params: Vec<Tensor> = (0..4).map(|_| randn(&[2, 3], &mut rng)).collect();
    gradcheck(&params, H, |g, ids| {
        let sq = g.softplus(ids[1]);
        let sp = g.softplus(ids[3]);
        g.kl_diag(ids[0], sq, ids[2], sp).unwrap()
    })
}

// ---- composed networks ----

pub fn tiny_arch(m: usize) -> NpArchitecture {
    let mut a = NpArchitecture::desk([4, 3, 2], 2, m);
    a.conv_channels = vec![2, 3];
    a.encoder_dense = 4;
    a.joint_dense = vec![5];
    a.latent_dim = 3;
    a.decoder_dense = vec![4];
    a.dropout = 0.2;
    a
}

pub fn design(n: usize, d: usize, rng: &mut Rng) -> DesignMatrix {
    DesignMatrix::unnamed(randn(&[n, d], rng)).unwrap()
}

/// Volumes inside (0, 1), like quantile-transformed targets.
pub fn volumes(n: usize, grid: [usize; 3], rng: &mut Rng) -> Tensor {
    let len = n * grid.iter().product::<usize>();
    let data = (0..len).map(|_| 0.05 + 0.9 * rng.uniform()).collect();
    Tensor::new(vec![n, grid[0], grid[1], grid[2]], data).unwrap()
}

pub struct Fixture {
    pub model: NpModel,
    pub x: DesignMatrix,
    pub y: Tensor,
    pub f: FixedEffectSet,
    pub c: Tensor,
}

pub fn fixture(seed: u64, n: usize, m: usize) -> Fixture {
    let mut rng = Rng::new(seed);
    let arch = tiny_arch(m);
    let model = NpModel::init(arch.clone(), &Rng::new(seed + 100)).unwrap();
    let x = design(n, 2, &mut rng);
    let y = volumes(n, arch.grid, &mut rng);
    let f = build_context_set(&x.with_intercept(), &y, m, &Rng::new(seed + 200)).unwrap();
    let c = context_for(&f, &x).unwrap();
    Fixture { model, x, y, f, c }
}

/// Random `(slot, index)` picks among the parameters whose name passes
/// `filter`.
fn picks(model: &NpModel, count: usize, filter: impl Fn(&str) -> bool, rng: &mut Rng) -> Vec<(usize, usize)> {
    let slots: Vec<usize> = (0..model.params().len()).filter(|&s| filter(&model.param_names()[s])).collect();
    (0..count)
        .map(|_| {
            let s = slots[rng.below(slots.len())];
            (s, rng.below(model.params()[s].len()))
        })
        .collect()
}

/// Relative error `|a - n| / (|a| + |n|)` over the picked coordinates.
fn fd_check(model: &NpModel, coords: &[(usize, usize)], analytic: &[Tensor], eval: impl Fn(&NpModel) -> f64) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for &(s, i) in coords {
        let mut plus = model.clone();
        plus.params_mut()[s].data_mut()[i] += H;
        let mut minus = model.clone();
        minus.params_mut()[s].data_mut()[i] -= H;
        let num = (eval(&plus) - eval(&minus)) / (2.0 * H);
        let a = analytic[s].data()[i];
        diff += (a - num).powi(2);
        na += a * a;
        nn += num * num;
    }
    let (diff, na, nn) = (diff.sqrt(), na.sqrt(), nn.sqrt());
    if na + nn < 1e-12 {
        diff
    } else {
        diff / (na + nn)
    }
}

/// `sum(mean * r1) + sum(std * r2)` over the encoder output, train mode.
fn encoder_objective(model: &NpModel, fx: &Fixture, seed: u64, g: &mut Graph, trainable: bool) -> NodeId {
    let b = model.bind(g, trainable);
    let xn = g.input(fx.x.values().clone());
    let cn = g.input(fx.c.clone());
    let mut drop = DropoutSource::new(Rng::new(seed + 7), false);
    let (mean, std) = model.encoder_nodes(g, &b, xn, cn, false, Mode::Train, &mut drop, &mut Vec::new()).unwrap();
    let shape = g.shape(mean).to_vec();
    let mut r = Rng::new(seed + 9);
    let r1 = g.input(randn(&shape, &mut r));
    let r2 = g.input(randn(&shape, &mut r));
    let a = g.mul(mean, r1).unwrap();
    let bb = g.mul(std, r2).unwrap();
    let s = g.add(a, bb).unwrap();
    g.sum(s)
}

pub fn encoder(seed: u64) -> f64 {
    let fx = fixture(seed, 4, 3);
    let mut g = Graph::new();
    let loss = encoder_objective(&fx.model, &fx, seed, &mut g, true);
    let grads = g.backward(loss, fx.model.params().len()).unwrap().params;
    let coords = picks(&fx.model, 20, |n| n.starts_with("enc."), &mut Rng::new(seed + 3));
    fd_check(&fx.model, &coords, &grads, |m| {
        let mut g = Graph::new();
        let l = encoder_objective(m, &fx, seed, &mut g, false);
        g.value(l).data()[0]
    })
}

fn decoder_objective(model: &NpModel, x: &DesignMatrix, z: &Tensor, seed: u64, g: &mut Graph, trainable: bool) -> NodeId {
    let b = model.bind(g, trainable);
    let xn = g.input(x.values().clone());
    let zn = g.input(z.clone());
    let mut drop = DropoutSource::new(Rng::new(seed + 7), false);
    let (mean, logvar) = model.decoder_nodes(g, &b, xn, zn, Mode::Train, &mut drop, &mut Vec::new()).unwrap();
    let shape = g.shape(mean).to_vec();
    let r = g.input(randn(&shape, &mut Rng::new(seed + 11)));
    let p = g.mul(mean, r).unwrap();
    let s = g.sum(p);
    let e = g.exp(logvar);
    let se = g.sum(e);
    g.add(s, se).unwrap()
}

pub fn decoder(seed: u64) -> f64 {
    let fx = fixture(seed, 4, 2);
    let z = randn(&[4, 3], &mut Rng::new(seed + 5));
    let mut g = Graph::new();
    let loss = decoder_objective(&fx.model, &fx.x, &z, seed, &mut g, true);
    let grads = g.backward(loss, fx.model.params().len()).unwrap().params;
    let coords = picks(&fx.model, 20, |n| n.starts_with("dec."), &mut Rng::new(seed + 3));
    fd_check(&fx.model, &coords, &grads, |m| {
        let mut g = Graph::new();
        let l = decoder_objective(m, &fx.x, &z, seed, &mut g, false);
        g.value(l).data()[0]
    })
}

/// Full training objective through encoder, sampling and decoder.
pub fn elbo(seed: u64) -> f64 {
    let fx = fixture(seed, 5, 3);
    let rng = Rng::new(seed + 40);
    let (terms, grads) = elbo_gradients(&fx.model, &fx.x, &fx.y, &fx.c, &rng, 2).unwrap();
    assert!(terms.loss.is_finite());
    let coords = picks(&fx.model, 20, |_| true, &mut Rng::new(seed + 3));
    fd_check(&fx.model, &coords, &grads, |m| elbo_loss(m, &fx.x, &fx.y, &fx.c, &rng, 2).unwrap().loss)
}
