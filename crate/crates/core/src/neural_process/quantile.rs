//! Per-voxel empirical CDF transform onto `[eps, 1 - eps]`.
//!
//! The sorted training values of each voxel are the reference quantiles.
//! The value of rank `r` (1-based, out of `n`) sits at position
//! `(r - 0.5) / n`; tied values share the mean of their positions. Between
//! knots both directions interpolate linearly, and values outside the
//! training range clip to `eps` / `1 - eps`.

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

pub const DEFAULT_CLIP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileTransform {
    eps: f64,
    voxel_shape: Vec<usize>,
    /// `T x n`, ascending within each voxel.
    reference: Tensor,
    knots: Vec<Knots>,
}

#[derive(Clone, Debug, PartialEq)]
struct Knots {
    values: Vec<f64>,
    positions: Vec<f64>,
}

impl Knots {
    fn from_sorted(sorted: &[f64]) -> Knots {
        let n = sorted.len() as f64;
        let mut values = Vec::new();
        let mut positions = Vec::new();
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            // ranks i+1 ..= j+1
            let mean_rank = (i + j) as f64 / 2.0 + 1.0;
            values.push(sorted[i]);
            positions.push((mean_rank - 0.5) / n);
            i = j + 1;
        }
        Knots { values, positions }
    }

    fn is_constant(&self) -> bool {
        self.values.len() < 2
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    // xs strictly increasing, xs[0] <= x <= xs[last]
    let hi = xs.partition_point(|&v| v < x);
    if hi == 0 {
        return ys[0];
    }
    if hi >= xs.len() {
        return ys[xs.len() - 1];
    }
    if xs[hi] == x {
        return ys[hi];
    }
    let lo = hi - 1;
    let w = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + w * (ys[hi] - ys[lo])
}

impl QuantileTransform {
    /// Fits on `N x T1 x ...` training responses.
    pub fn fit(y_train: &Tensor, eps: f64) -> Result<QuantileTransform> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::invalid(format!("quantile clip {eps} outside (0, 0.5)")));
        }
        if y_train.ndim() < 2 {
            return Err(Error::shape("quantile_fit", format!("need N x voxels, got {:?}", y_train.shape())));
        }
        if !y_train.is_finite() {
            return Err(Error::NonFinite("quantile_fit training data".into()));
        }
        let n = y_train.dim(0);
        let t = y_train.row_len();
        let mut reference = vec![0.0; t * n];
        for v in 0..t {
            let col = &mut reference[v * n..(v + 1) * n];
            for (i, c) in col.iter_mut().enumerate() {
                *c = y_train.row(i)[v];
            }
            col.sort_by(f64::total_cmp);
        }
        let reference = Tensor::new(vec![t, n], reference)?;
        QuantileTransform::from_reference(reference, y_train.shape()[1..].to_vec(), eps)
    }

    /// Rebuilds a transform from stored reference quantiles (`T x n`, each
    /// row ascending).
    pub fn from_reference(reference: Tensor, voxel_shape: Vec<usize>, eps: f64) -> Result<Self> {
        if reference.ndim() != 2 || reference.dim(0) != voxel_shape.iter().product::<usize>() {
            return Err(Error::shape(
                "QuantileTransform",
                format!("reference {:?} vs voxel grid {:?}", reference.shape(), voxel_shape),
            ));
        }
        let knots = (0..reference.dim(0))
            .map(|v| {
                let row = reference.row(v);
                if row.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::invalid(format!("reference quantiles of voxel {v} are not sorted")));
                }
                Ok(Knots::from_sorted(row))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantileTransform {
            eps,
            voxel_shape,
            reference,
            knots,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn reference(&self) -> &Tensor {
        &self.reference
    }

    pub fn voxel_shape(&self) -> &[usize] {
        &self.voxel_shape
    }

    /// Voxels with fewer than two distinct training values; these map to 0.5.
    pub fn constant_voxels(&self) -> Vec<usize> {
        (0..self.knots.len()).filter(|&v| self.knots[v].is_constant()).collect()
    }

    fn check(&self, y: &Tensor, op: &str) -> Result<()> {
        if y.ndim() < 2 || y.shape()[1..] != self.voxel_shape[..] {
            return Err(Error::shape(
                op,
                format!("data {:?} vs fitted voxel grid {:?}", y.shape(), self.voxel_shape),
            ));
        }
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("{op} input")));
        }
        Ok(())
    }

    pub fn apply_value(&self, voxel: usize, y: f64) -> f64 {
        let k = &self.knots[voxel];
        if k.is_constant() {
            return 0.5;
        }
        let last = k.values.len() - 1;
        let u = if y < k.values[0] {
            self.eps
        } else if y > k.values[last] {
            1.0 - self.eps
        } else {
            interpolate(&k.values, &k.positions, y)
        };
        u.clamp(self.eps, 1.0 - self.eps)
    }

    pub fn invert_value(&self, voxel: usize, u: f64) -> f64 {
        let k = &self.knots[voxel];
        if k.is_constant() {
            return k.values[0];
        }
        let last = k.positions.len() - 1;
        if u <= k.positions[0] {
            k.values[0]
        } else if u >= k.positions[last] {
            k.values[last]
        } else {
            interpolate(&k.positions, &k.values, u)
        }
    }

    pub fn apply(&self, y: &Tensor) -> Result<Tensor> {
        self.check(y, "quantile_apply")?;
        let t = y.row_len();
        let data = y.data().iter().enumerate().map(|(i, &v)| self.apply_value(i % t, v)).collect();
        Tensor::new(y.shape().to_vec(), data)
    }

    pub fn invert(&self, u: &Tensor) -> Result<Tensor> {
        self.check(u, "quantile_invert")?;
        let t = u.row_len();
        let data = u.data().iter().enumerate().map(|(i, &v)| self.invert_value(i % t, v)).collect();
        Tensor::new(u.shape().to_vec(), data)
    }
}
