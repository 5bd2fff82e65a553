use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::graph::{BatchStats, Graph, NodeId};
use crate::tensorcore::{Rng, Tensor};

/// Evaluation mode for stochastic and batch-dependent layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Frozen batchnorm statistics. Dropout stays active only when
    /// `mc_dropout` is set (Monte Carlo dropout).
    Infer { mc_dropout: bool },
}

impl Mode {
    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::Infer { mc_dropout: true })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv3d { in_channels: usize, out_channels: usize, kernel: usize, pad: usize },
    ConvTranspose3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output: [usize; 3],
    },
    AvgPool3d { window: usize },
    BatchNorm3d { channels: usize },
    LeakyRelu { slope: f64 },
    Dropout { rate: f64 },
    Softplus,
    Sigmoid,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv3d { .. } => "conv3d",
            LayerKind::ConvTranspose3d { .. } => "conv_transpose3d",
            LayerKind::AvgPool3d { .. } => "avgpool3d",
            LayerKind::BatchNorm3d { .. } => "batchnorm3d",
            LayerKind::LeakyRelu { .. } => "leaky_relu",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softplus => "softplus",
            LayerKind::Sigmoid => "sigmoid",
        }
    }

    /// Shapes of the trainable tensors, in the order `forward` expects them.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            LayerKind::Conv3d { in_channels, out_channels, kernel, .. } => vec![
                vec![out_channels, in_channels, kernel, kernel, kernel],
                vec![out_channels],
            ],
            LayerKind::ConvTranspose3d { in_channels, out_channels, kernel, .. } => vec![
                vec![in_channels, out_channels, kernel, kernel, kernel],
                vec![out_channels],
            ],
            LayerKind::BatchNorm3d { channels } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }

    /// Fan-in-scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases; batchnorm starts as the identity affine map.
    pub fn init_params(&self, rng: &mut Rng) -> Vec<Tensor> {
        let uniform = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        };
        let shapes = self.param_shapes();
        match *self {
            LayerKind::Dense { inputs, .. } => {
                vec![uniform(&shapes[0], inputs, rng), Tensor::zeros(&shapes[1])]
            }
            LayerKind::Conv3d { in_channels, kernel, .. } => vec![
                uniform(&shapes[0], in_channels * kernel.pow(3), rng),
                Tensor::zeros(&shapes[1]),
            ],
            LayerKind::ConvTranspose3d { in_channels, kernel, stride, .. } => {
                // each output voxel receives about in_channels * (k/s)^3 taps
                let per_axis = kernel.div_ceil(stride.max(1));
                vec![
                    uniform(&shapes[0], in_channels * per_axis.pow(3), rng),
                    Tensor::zeros(&shapes[1]),
                ]
            }
            LayerKind::BatchNorm3d { .. } => {
                vec![Tensor::full(&shapes[0], 1.0), Tensor::zeros(&shapes[1])]
            }
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerKind::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")))
            }
            LayerKind::LeakyRelu { slope } if !slope.is_finite() => {
                Err(Error::invalid("leaky_relu slope must be finite"))
            }
            LayerKind::Conv3d { kernel: 0, .. }
            | LayerKind::ConvTranspose3d { kernel: 0, .. }
            | LayerKind::AvgPool3d { window: 0 } => Err(Error::invalid(format!("{}: zero-sized window", self.name()))),
            _ => Ok(()),
        }
    }
}

/// Batchnorm running estimates, updated as an exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Dropout mask with survivors rescaled by `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect()
}

/// Applies one layer inside a graph. `params` are graph nodes matching
/// [`LayerKind::param_shapes`]. For batchnorm, `running` supplies the frozen
/// statistics in inference mode; in train mode the observed batch
/// statistics are returned for the caller to fold into its running state.
pub fn apply(
    g: &mut Graph,
    layer: &LayerKind,
    x: NodeId,
    params: &[NodeId],
    running: Option<&RunningStats>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(NodeId, Option<BatchStats>)> {
    layer.validate()?;
    let want = layer.param_shapes().len();
    if params.len() != want {
        return Err(Error::shape(
            layer.name(),
            format!("expected {want} parameter tensors, got {}", params.len()),
        ));
    }
    let xs = g.shape(x).to_vec();
    let out = match *layer {
        LayerKind::Dense { inputs, .. } => {
            if xs.len() != 2 || xs[1] != inputs {
                return Err(Error::shape("dense", format!("input {:?}: axis 1 must be {inputs}", xs)));
            }
            g.linear(x, params[0], Some(params[1]))?
        }
        LayerKind::Conv3d { in_channels, pad, .. } => {
            if xs.len() != 5 || xs[1] != in_channels {
                return Err(Error::shape(
                    "conv3d",
                    format!("input {:?}: expected 5-D with {in_channels} channels on axis 1", xs),
                ));
            }
            g.conv3d(x, params[0], Some(params[1]), 1, pad)?
        }
        LayerKind::ConvTranspose3d { in_channels, stride, pad, output, .. } => {
            if xs.len() != 5 || xs[1] != in_channels {
                return Err(Error::shape(
                    "conv_transpose3d",
                    format!("input {:?}: expected 5-D with {in_channels} channels on axis 1", xs),
                ));
            }
            g.conv_transpose3d(x, params[0], Some(params[1]), stride, pad, output)?
        }
        LayerKind::AvgPool3d { window } => g.avg_pool3d(x, window)?,
        LayerKind::BatchNorm3d { channels } => {
            if xs.len() < 2 || xs[1] != channels {
                return Err(Error::shape(
                    "batchnorm3d",
                    format!("input {:?}: axis 1 must be {channels}", xs),
                ));
            }
            match mode {
                Mode::Train => {
                    let (id, stats) = g.batch_norm_train(x, params[0], params[1])?;
                    return Ok((id, Some(stats)));
                }
                Mode::Infer { .. } => {
                    let r = running.ok_or_else(|| {
                        Error::invalid("batchnorm3d in inference mode needs running statistics")
                    })?;
                    g.batch_norm_infer(x, params[0], params[1], &r.mean, &r.var)?
                }
            }
        }
        LayerKind::LeakyRelu { slope } => g.leaky_relu(x, slope),
        LayerKind::Dropout { rate } => {
            if mode.dropout_active() && rate > 0.0 {
                let len = g.value(x).len();
                g.mask(x, dropout_mask(len, rate, rng))?
            } else {
                x
            }
        }
        LayerKind::Softplus => g.softplus(x),
        LayerKind::Sigmoid => g.sigmoid(x),
    };
    Ok((out, None))
}

/// Evaluates a single layer on a tensor, outside any training graph.
/// `params` holds the trainable tensors followed, for batchnorm, by the
/// running mean and running variance.
pub fn forward_layer(
    layer: &LayerKind,
    input: &Tensor,
    params: &[Tensor],
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let n_trainable = layer.param_shapes().len();
    if params.len() < n_trainable {
        return Err(Error::shape(
            layer.name(),
            format!("expected {n_trainable} parameter tensors, got {}", params.len()),
        ));
    }
    let ids: Vec<NodeId> = params[..n_trainable].iter().map(|p| g.input(p.clone())).collect();
    let running = match layer {
        LayerKind::BatchNorm3d { .. } if params.len() >= n_trainable + 2 => Some(RunningStats {
            mean: params[n_trainable].data().to_vec(),
            var: params[n_trainable + 1].data().to_vec(),
        }),
        _ => None,
    };
    let (out, _) = apply(&mut g, layer, x, &ids, running.as_ref(), mode, rng)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_conv_is_identity() {
        let layer = LayerKind::Conv3d { in_channels: 1, out_channels: 1, kernel: 1, pad: 0 };
        let x = Tensor::new(vec![1, 1, 2, 3, 2], (0..12).map(|v| v as f64 - 4.0).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = forward_layer(&layer, &x, &[w, b], Mode::Train, &mut Rng::new(0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let layer = LayerKind::LeakyRelu { slope: 0.01 };
        let x = Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap();
        let y = forward_layer(&layer, &x, &[], Mode::Train, &mut Rng::new(0)).unwrap();
        assert!((y.data()[0] + 0.02).abs() < 1e-15);
        assert_eq!(y.data()[1], 3.0);
    }

    #[test]
    fn dropout_identity_in_inference_unless_mc() {
        let layer = LayerKind::Dropout { rate: 0.5 };
        let x = Tensor::full(&[1000], 1.0);
        let y = forward_layer(&layer, &x, &[], Mode::Infer { mc_dropout: false }, &mut Rng::new(0)).unwrap();
        assert_eq!(y, x);
        let y = forward_layer(&layer, &x, &[], Mode::Infer { mc_dropout: true }, &mut Rng::new(0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(y.data().iter().any(|&v| v == 0.0));
    }

    #[test]
    fn invalid_dropout_rate() {
        let layer = LayerKind::Dropout { rate: 1.0 };
        let x = Tensor::full(&[4], 1.0);
        assert!(forward_layer(&layer, &x, &[], Mode::Train, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn conv_shape_error_names_layer_and_axis() {
        let layer = LayerKind::Conv3d { in_channels: 2, out_channels: 1, kernel: 1, pad: 0 };
        let x = Tensor::zeros(&[1, 3, 2, 2, 2]);
        let p = layer.init_params(&mut Rng::new(0));
        let err = forward_layer(&layer, &x, &p, Mode::Train, &mut Rng::new(0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv3d") && msg.contains("axis 1"), "{msg}");
    }

    #[test]
    fn batchnorm_infer_uses_running_stats() {
        let layer = LayerKind::BatchNorm3d { channels: 1 };
        let x = Tensor::new(vec![1, 1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let params = [
            Tensor::full(&[1], 2.0),
            Tensor::full(&[1], 1.0),
            Tensor::full(&[1], 1.0),
            Tensor::full(&[1], 4.0),
        ];
        let y = forward_layer(&layer, &x, &params, Mode::Infer { mc_dropout: false }, &mut Rng::new(0)).unwrap();
        let s = (4.0 + crate::tensorcore::graph::BN_EPS).sqrt();
        assert!((y.data()[0] - (2.0 * 2.0 / s + 1.0)).abs() < 1e-12);
        assert!((y.data()[1] - (2.0 * 4.0 / s + 1.0)).abs() < 1e-12);
        // missing running statistics in inference mode is an error
        assert!(forward_layer(&layer, &x, &params[..2], Mode::Infer { mc_dropout: false }, &mut Rng::new(0)).is_err());
    }
}
