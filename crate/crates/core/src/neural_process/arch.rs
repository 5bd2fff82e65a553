use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::conv::{ConvGeom, PoolGeom};
use crate::tensorcore::LayerKind;

/// Floor applied to the decoder's per-voxel noise variance.
pub const NOISE_VAR_FLOOR: f64 = 1e-6;
/// Floor added after the softplus of the latent std head.
pub const STD_FLOOR: f64 = 1e-6;

/// Encoder/decoder layout.
///
/// Each encoder stage is `conv3d (stride 1, same padding) -> batchnorm ->
/// avgpool -> leaky ReLU`; pooling uses ceil mode so odd extents keep their
/// border voxels. The decoder mirrors the stages with transposed
/// convolutions of stride `pool` that restore the exact pre-pool extents;
/// every transposed conv except the last is followed by batchnorm and
/// leaky ReLU, and the last one emits a single channel through a sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpArchitecture {
    pub grid: [usize; 3],
    /// Width of the (standardized) covariate vector fed to both networks.
    pub covariates: usize,
    /// Number of context channels M.
    pub context_channels: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    /// Width of the image representation after the conv stack.
    pub encoder_dense: usize,
    /// Hidden layers applied to the concatenated image features and covariates.
    pub joint_dense: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_dense: Vec<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    /// Starting value of every per-voxel log noise variance.
    pub init_log_noise_var: f64,
}

/// Spatial extents of the encoder, from the input grid down to the last
/// pooled map.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub extents: Vec<[usize; 3]>,
}

impl StagePlan {
    pub fn bottleneck(&self) -> [usize; 3] {
        *self.extents.last().expect("plan has the input extent")
    }
}

impl NpArchitecture {
    /// Desk-scale default: three conv stages of widths 8, 16 and 32 with
    /// 3x3x3 kernels and 2x2x2 pooling, Q = 16, dropout 0.1. The noise
    /// variance starts at 1/12, the variance of a uniform variable on [0, 1].
    pub fn desk(grid: [usize; 3], covariates: usize, context_channels: usize) -> Self {
        NpArchitecture {
            grid,
            covariates,
            context_channels,
            conv_channels: vec![8, 16, 32],
            kernel: 3,
            pool: 2,
            encoder_dense: 32,
            joint_dense: vec![32, 32],
            latent_dim: 16,
            decoder_dense: vec![32, 64],
            dropout: 0.1,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            init_log_noise_var: (1.0f64 / 12.0).ln(),
        }
    }

    pub fn voxels(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn plan(&self) -> Result<StagePlan> {
        let mut extents = vec![self.grid];
        for _ in &self.conv_channels {
            let cur = *extents.last().unwrap();
            let conv = ConvGeom::conv(cur, self.kernel, 1, self.pad())?;
            if conv.small != cur {
                return Err(Error::invalid(format!(
                    "kernel {} with padding {} does not preserve extent {:?}",
                    self.kernel,
                    self.pad(),
                    cur
                )));
            }
            extents.push(PoolGeom::new(cur, self.pool)?.output);
        }
        Ok(StagePlan { extents })
    }

    /// Flattened width of the last conv stage.
    pub fn bottleneck_len(&self) -> Result<usize> {
        let plan = self.plan()?;
        let c = *self.conv_channels.last().unwrap_or(&self.context_channels);
        Ok(c * plan.bottleneck().iter().product::<usize>())
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|&g| g == 0) {
            return Err(Error::invalid(format!("grid {:?} has a zero extent", self.grid)));
        }
        if self.context_channels == 0 {
            return Err(Error::invalid("at least one context channel is required"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::invalid("conv stack needs at least one stage of nonzero width"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel {} must be odd", self.kernel)));
        }
        if self.pool == 0 {
            return Err(Error::invalid("pool window must be positive"));
        }
        if self.encoder_dense == 0 || self.joint_dense.contains(&0) || self.decoder_dense.contains(&0) {
            return Err(Error::invalid("dense widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::invalid(format!("batchnorm momentum {} outside (0, 1]", self.bn_momentum)));
        }
        if !self.leaky_slope.is_finite() || !self.init_log_noise_var.is_finite() {
            return Err(Error::invalid("leaky slope and initial log noise variance must be finite"));
        }
        self.decoder_stack()?;
        Ok(())
    }

    /// Transposed convolutions of the decoder, coarsest first.
    pub fn decoder_stack(&self) -> Result<Vec<LayerKind>> {
        let plan = self.plan()?;
        let stages = self.conv_channels.len();
        let mut out = Vec::with_capacity(stages);
        for i in (0..stages).rev() {
            let in_channels = self.conv_channels[i];
            let out_channels = if i == 0 { 1 } else { self.conv_channels[i - 1] };
            let target = plan.extents[i];
            let from = plan.extents[i + 1];
            let pad = self.pad();
            // stride-`pool` transpose of a same-padded kernel: the forward
            // conv of `target` must land on `from`
            let geom = ConvGeom::conv(target, self.kernel, self.pool, pad)?;
            if geom.small != from {
                return Err(Error::invalid(format!(
                    "decoder stage {i}: kernel {} / stride {} cannot map {:?} back to {:?}",
                    self.kernel, self.pool, from, target
                )));
            }
            out.push(LayerKind::ConvTranspose3d {
                in_channels,
                out_channels,
                kernel: self.kernel,
                stride: self.pool,
                pad,
                output: target,
            });
        }
        Ok(out)
    }

    /// Every parametrized layer with its name, in parameter-slot order.
    /// The per-voxel log noise variance is appended after these.
    pub fn layers(&self) -> Result<Vec<(String, LayerKind)>> {
        let mut out = Vec::new();
        let mut cin = self.context_channels;
        for (i, &c) in self.conv_channels.iter().enumerate() {
            out.push((
                format!("enc.conv{i}"),
                LayerKind::Conv3d { in_channels: cin, out_channels: c, kernel: self.kernel, pad: self.pad() },
            ));
            out.push((format!("enc.bn{i}"), LayerKind::BatchNorm3d { channels: c }));
            cin = c;
        }
        out.push((
            "enc.fc".into(),
            LayerKind::Dense { inputs: self.bottleneck_len()?, outputs: self.encoder_dense },
        ));
        let mut width = self.encoder_dense + self.covariates;
        for (j, &w) in self.joint_dense.iter().enumerate() {
            out.push((format!("enc.joint{j}"), LayerKind::Dense { inputs: width, outputs: w }));
            width = w;
        }
        out.push(("enc.mean".into(), LayerKind::Dense { inputs: width, outputs: self.latent_dim }));
        out.push(("enc.std".into(), LayerKind::Dense { inputs: width, outputs: self.latent_dim }));

        let mut width = self.covariates + self.latent_dim;
        for (j, &w) in self.decoder_dense.iter().enumerate() {
            out.push((format!("dec.fc{j}"), LayerKind::Dense { inputs: width, outputs: w }));
            width = w;
        }
        out.push(("dec.out".into(), LayerKind::Dense { inputs: width, outputs: self.bottleneck_len()? }));
        let stack = self.decoder_stack()?;
        let last = stack.len() - 1;
        for (i, layer) in stack.into_iter().enumerate() {
            let channels = match layer {
                LayerKind::ConvTranspose3d { out_channels, .. } => out_channels,
                _ => unreachable!(),
            };
            out.push((format!("dec.deconv{i}"), layer));
            if i != last {
                out.push((format!("dec.bn{i}"), LayerKind::BatchNorm3d { channels }));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_plan_shapes() {
        let a = NpArchitecture::desk([8, 10, 6], 3, 20);
        a.validate().unwrap();
        let plan = a.plan().unwrap();
        assert_eq!(plan.extents, vec![[8, 10, 6], [4, 5, 3], [2, 3, 2], [1, 2, 1]]);
        assert_eq!(a.bottleneck_len().unwrap(), 64);
        let stack = a.decoder_stack().unwrap();
        assert!(matches!(stack[2], LayerKind::ConvTranspose3d { out_channels: 1, output: [8, 10, 6], .. }));
    }

    #[test]
    fn odd_and_unit_grids_plan() {
        for grid in [[1, 1, 1], [5, 7, 3], [49, 61, 40]] {
            NpArchitecture::desk(grid, 2, 1).validate().unwrap();
        }
    }

    #[test]
    fn rejects_invalid() {
        let mut a = NpArchitecture::desk([8, 10, 6], 3, 5);
        a.latent_dim = 0;
        assert!(a.validate().is_err());
        let mut a = NpArchitecture::desk([8, 10, 6], 3, 5);
        a.kernel = 2;
        assert!(a.validate().is_err());
        let mut a = NpArchitecture::desk([8, 10, 6], 3, 5);
        a.dropout = 1.0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn serde_rejects_unknown_keys() {
        let a = NpArchitecture::desk([2, 2, 2], 1, 1);
        let mut v = serde_json::to_value(&a).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<NpArchitecture>(v).is_err());
    }
}
