//! Fixed-effect estimation, bootstrap context functions, residual
//! extraction and a mass-univariate Bayesian linear normative baseline.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::io::{read_tensor, write_tensor};
use crate::tensorcore::linalg::{gemm, LeastSquares};
use crate::tensorcore::{Rng, Tensor};

/// `N x D` covariate matrix with column names.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    values: Tensor,
    names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(values: Tensor, names: Vec<String>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::shape("DesignMatrix", format!("expected 2-D, got {:?}", values.shape())));
        }
        if names.len() != values.dim(1) {
            return Err(Error::shape(
                "DesignMatrix",
                format!("{} names for {} columns", names.len(), values.dim(1)),
            ));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("design matrix".into()));
        }
        Ok(DesignMatrix { values, names })
    }

    /// Columns named `x0, x1, ...`.
    pub fn unnamed(values: Tensor) -> Result<Self> {
        let d = values.shape().get(1).copied().unwrap_or(0);
        DesignMatrix::new(values, (0..d).map(|j| format!("x{j}")).collect())
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n(&self) -> usize {
        self.values.dim(0)
    }

    pub fn d(&self) -> usize {
        self.values.dim(1)
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            values: self.values.select_rows(rows),
            names: self.names.clone(),
        }
    }

    /// Prepends a column of ones named `intercept`.
    pub fn with_intercept(&self) -> DesignMatrix {
        let (n, d) = (self.n(), self.d());
        let mut data = Vec::with_capacity(n * (d + 1));
        for i in 0..n {
            data.push(1.0);
            data.extend_from_slice(self.values.row(i));
        }
        let mut names = vec!["intercept".to_string()];
        names.extend(self.names.iter().cloned());
        DesignMatrix {
            values: Tensor::new(vec![n, d + 1], data).expect("intercept shape"),
            names,
        }
    }
}

/// Column means and standard deviations estimated on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Zero-variance columns keep scale 1 so they pass through centered.
    pub fn fit(x: &DesignMatrix) -> Standardizer {
        let (n, d) = (x.n(), x.d());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.values.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in x.values.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let denom = (n.max(2) - 1) as f64;
        let std = var
            .iter()
            .map(|v| {
                let s = (v / denom).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &DesignMatrix) -> Result<DesignMatrix> {
        if x.d() != self.mean.len() {
            return Err(Error::shape(
                "Standardizer",
                format!("fitted on {} columns, got {}", self.mean.len(), x.d()),
            ));
        }
        let values = x.values.clone();
        let d = x.d();
        let mut data = values.into_data();
        for (k, v) in data.iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        DesignMatrix::new(Tensor::new(x.values.shape().to_vec(), data)?, x.names.clone())
    }
}

/// Coefficient tensor `D x T1 x T2 x T3` from per-voxel least squares.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedEffectFit {
    pub coeffs: Tensor,
    pub rank_deficient: bool,
}

fn voxel_count(y: &Tensor, n: usize, context: &str) -> Result<usize> {
    if y.ndim() < 2 || y.dim(0) != n {
        return Err(Error::shape(
            context,
            format!("response {:?} must have {n} subjects on axis 0", y.shape()),
        ));
    }
    Ok(y.row_len())
}

/// Transposes an `N x T` row-major block into `T` contiguous columns.
fn columns(y: &Tensor, n: usize, t: usize) -> Vec<f64> {
    let mut cols = vec![0.0; n * t];
    for i in 0..n {
        for (v, &val) in y.row(i).iter().enumerate() {
            cols[v * n + i] = val;
        }
    }
    cols
}

/// Ordinary least squares independently at every voxel. One factorization
/// of the design is shared by all voxels.
pub fn fit_fixed_effect(x: &DesignMatrix, y: &Tensor) -> Result<FixedEffectFit> {
    let (n, d) = (x.n(), x.d());
    let t = voxel_count(y, n, "fit_fixed_effect")?;
    if n < d {
        return Err(Error::invalid(format!(
            "fit_fixed_effect needs at least as many subjects as covariates (N = {n}, D = {d})"
        )));
    }
    let ls = LeastSquares::factor(x.values())?;
    let cols = columns(y, n, t);
    let mut coeffs = vec![0.0; d * t];
    for v in 0..t {
        let beta = ls.solve(&cols[v * n..(v + 1) * n])?;
        for (j, b) in beta.into_iter().enumerate() {
            coeffs[j * t + v] = b;
        }
    }
    let mut shape = vec![d];
    shape.extend_from_slice(&y.shape()[1..]);
    let coeffs = Tensor::new(shape, coeffs)?;
    if !coeffs.is_finite() {
        return Err(Error::NonFinite("fixed-effect coefficients".into()));
    }
    Ok(FixedEffectFit {
        coeffs,
        rank_deficient: ls.is_rank_deficient(),
    })
}

/// Mode-1 product `X x_1 A`: entry `(n, v) = sum_d X[n, d] A[d, v]`.
pub fn predict_fixed_effect(a: &Tensor, x: &DesignMatrix) -> Result<Tensor> {
    let (n, d) = (x.n(), x.d());
    if a.ndim() < 2 || a.dim(0) != d {
        return Err(Error::shape(
            "predict_fixed_effect",
            format!("coefficients {:?} vs {d} covariates", a.shape()),
        ));
    }
    let t = a.row_len();
    let mut out = vec![0.0; n * t];
    gemm(false, false, n, d, t, 1.0, x.values().data(), a.data(), 0.0, &mut out);
    let mut shape = vec![n];
    shape.extend_from_slice(&a.shape()[1..]);
    Tensor::new(shape, out)
}

/// M bootstrap fixed-effect fits acting as context functions.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedEffectSet {
    coeffs: Vec<Tensor>,
    indices: Vec<Vec<usize>>,
    seed: u64,
    split_id: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixedEffectMeta {
    m: usize,
    seed: u64,
    split_id: String,
    shape: Vec<usize>,
    indices: Vec<Vec<usize>>,
}

pub const MAX_RESAMPLE_ATTEMPTS: usize = 100;

impl FixedEffectSet {
    pub fn new(coeffs: Vec<Tensor>, indices: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        let first = coeffs
            .first()
            .ok_or_else(|| Error::invalid("fixed-effect set needs at least one fit"))?;
        if coeffs.iter().any(|c| c.shape() != first.shape()) {
            return Err(Error::shape("FixedEffectSet", "coefficient tensors differ in shape"));
        }
        if indices.len() != coeffs.len() {
            return Err(Error::shape(
                "FixedEffectSet",
                format!("{} index lists for {} fits", indices.len(), coeffs.len()),
            ));
        }
        Ok(FixedEffectSet {
            coeffs,
            indices,
            seed,
            split_id: String::new(),
        })
    }

    pub fn with_split_id(mut self, id: impl Into<String>) -> Self {
        self.split_id = id.into();
        self
    }

    pub fn m(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[Tensor] {
        &self.coeffs
    }

    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split_id(&self) -> &str {
        &self.split_id
    }

    /// First `m` channels.
    pub fn truncate(&self, m: usize) -> Result<FixedEffectSet> {
        if m == 0 || m > self.m() {
            return Err(Error::invalid(format!("cannot keep {m} of {} channels", self.m())));
        }
        Ok(FixedEffectSet {
            coeffs: self.coeffs[..m].to_vec(),
            indices: self.indices[..m].to_vec(),
            seed: self.seed,
            split_id: self.split_id.clone(),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = FixedEffectMeta {
            m: self.m(),
            seed: self.seed,
            split_id: self.split_id.clone(),
            shape: self.coeffs[0].shape().to_vec(),
            indices: self.indices.clone(),
        };
        let path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        for (m, a) in self.coeffs.iter().enumerate() {
            write_tensor(dir.join(format!("A_{m:03}.npnt")), a)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: FixedEffectMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let coeffs = (0..meta.m)
            .map(|m| read_tensor(dir.join(format!("A_{m:03}.npnt"))))
            .collect::<Result<Vec<_>>>()?;
        if coeffs.iter().any(|c| c.shape() != meta.shape.as_slice()) {
            return Err(Error::shape("FixedEffectSet::load", "tensor shape disagrees with meta.json"));
        }
        Ok(FixedEffectSet::new(coeffs, meta.indices, meta.seed)?.with_split_id(meta.split_id))
    }
}

/// Fits one context channel per supplied resample (row indices into `x`).
pub fn fit_context_set(
    x: &DesignMatrix,
    y: &Tensor,
    resamples: Vec<Vec<usize>>,
    seed: u64,
) -> Result<FixedEffectSet> {
    voxel_count(y, x.n(), "fit_context_set")?;
    let mut coeffs = Vec::with_capacity(resamples.len());
    for rows in &resamples {
        if let Some(&bad) = rows.iter().find(|&&r| r >= x.n()) {
            return Err(Error::invalid(format!("resample index {bad} outside {} training rows", x.n())));
        }
        coeffs.push(fit_fixed_effect(&x.select_rows(rows), &y.select_rows(rows))?.coeffs);
    }
    FixedEffectSet::new(coeffs, resamples, seed)
}

/// Classic bootstrap: `m` resamples of the training rows, with replacement
/// and of full size, each fitted by OLS. Channel `k` draws from its own
/// stream `rng.split(k)`, so growing `m` leaves earlier channels unchanged.
/// Resamples whose design is rank deficient are redrawn.
pub fn build_context_set(x: &DesignMatrix, y: &Tensor, m: usize, rng: &Rng) -> Result<FixedEffectSet> {
    if m == 0 {
        return Err(Error::invalid("context set needs M >= 1"));
    }
    let n = x.n();
    voxel_count(y, n, "build_context_set")?;
    if n < x.d() {
        return Err(Error::invalid(format!(
            "training set of {n} subjects is smaller than D = {}",
            x.d()
        )));
    }
    let mut resamples = Vec::with_capacity(m);
    for k in 0..m {
        let mut stream = rng.split(k as u64);
        let mut attempt = 0;
        let rows = loop {
            let rows: Vec<usize> = (0..n).map(|_| stream.below(n)).collect();
            if !LeastSquares::factor(x.select_rows(&rows).values())?.is_rank_deficient() {
                break rows;
            }
            attempt += 1;
            if attempt >= MAX_RESAMPLE_ATTEMPTS {
                return Err(Error::Numeric(format!(
                    "context channel {k}: {MAX_RESAMPLE_ATTEMPTS} bootstrap resamples were all rank deficient"
                )));
            }
        };
        resamples.push(rows);
    }
    fit_context_set(x, y, resamples, rng.seed())
}

/// Evaluates every context function at `x`: `N x M x T1 x T2 x T3`.
pub fn context_functions(f: &FixedEffectSet, x: &DesignMatrix) -> Result<Tensor> {
    if f.coeffs.is_empty() {
        return Err(Error::invalid("empty fixed-effect set"));
    }
    let preds = f
        .coeffs
        .iter()
        .map(|a| predict_fixed_effect(a, x))
        .collect::<Result<Vec<_>>>()?;
    let (n, m) = (x.n(), f.m());
    let t = preds[0].row_len();
    let mut data = vec![0.0; n * m * t];
    for (k, p) in preds.iter().enumerate() {
        for i in 0..n {
            data[(i * m + k) * t..(i * m + k + 1) * t].copy_from_slice(p.row(i));
        }
    }
    let mut shape = vec![n, m];
    shape.extend_from_slice(&preds[0].shape()[1..]);
    Tensor::new(shape, data)
}

/// `Y - Yhat`: the random effect plus noise.
pub fn residuals(y: &Tensor, yhat: &Tensor) -> Result<Tensor> {
    y.zip_map(yhat, |a, b| a - b)
        .map_err(|_| Error::shape("residuals", format!("{:?} vs {:?}", y.shape(), yhat.shape())))
}

/// Per-voxel predictive distribution from the Bayesian-linear baseline.
#[derive(Clone, Debug)]
pub struct BlrPrediction {
    /// `N* x T...`
    pub mean: Tensor,
    /// `N* x T...`
    pub variance: Tensor,
    /// Unbiased residual variance per voxel.
    pub sigma2: Tensor,
    /// Set when `X^T X` was singular and a ridge penalty was added.
    pub ridge_fallback: bool,
}

pub const BLR_RIDGE: f64 = 1e-6;

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(0.0, f64::max).max(1.0);
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= scale * 1e-13 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[f64], d: usize, b: &mut [f64]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= l[k * d + i] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

/// Mass-univariate Bayesian linear regression with a flat prior: the
/// predictive mean is the OLS prediction and the predictive variance is
/// `sigma2 * (1 + x*^T (X^T X)^-1 x*)`.
pub fn baseline_blr_normative(
    x_train: &DesignMatrix,
    y_train: &Tensor,
    x_test: &DesignMatrix,
) -> Result<BlrPrediction> {
    let (n, d) = (x_train.n(), x_train.d());
    let t = voxel_count(y_train, n, "baseline_blr_normative")?;
    if n <= d + 2 {
        return Err(Error::invalid(format!(
            "baseline needs more than D + 2 = {} training subjects, got {n}",
            d + 2
        )));
    }
    if x_test.d() != d {
        return Err(Error::shape(
            "baseline_blr_normative",
            format!("test covariates have {} columns, training {d}", x_test.d()),
        ));
    }
    let xv = x_train.values().data();
    let mut xtx = vec![0.0; d * d];
    gemm(true, false, d, n, d, 1.0, xv, xv, 0.0, &mut xtx);
    let (chol, ridge) = match cholesky(&xtx, d) {
        Some(l) => (l, false),
        None => {
            log::warn!("X^T X is singular; adding ridge penalty {BLR_RIDGE}");
            let mut r = xtx.clone();
            for i in 0..d {
                r[i * d + i] += BLR_RIDGE;
            }
            let l = cholesky(&r, d)
                .ok_or_else(|| Error::Numeric("ridge-regularized X^T X is not positive definite".into()))?;
            (l, true)
        }
    };

    // coefficients D x T
    let coeffs = if ridge {
        let cols = columns(y_train, n, t);
        let mut beta = vec![0.0; d * t];
        for v in 0..t {
            let yc = &cols[v * n..(v + 1) * n];
            let mut b: Vec<f64> = (0..d).map(|j| (0..n).map(|i| xv[i * d + j] * yc[i]).sum()).collect();
            chol_solve(&chol, d, &mut b);
            for j in 0..d {
                beta[j * t + v] = b[j];
            }
        }
        let mut shape = vec![d];
        shape.extend_from_slice(&y_train.shape()[1..]);
        Tensor::new(shape, beta)?
    } else {
        fit_fixed_effect(x_train, y_train)?.coeffs
    };

    let fitted = predict_fixed_effect(&coeffs, x_train)?;
    let resid = residuals(y_train, &fitted)?;
    let dof = (n - d) as f64;
    let mut sigma2 = vec![0.0; t];
    for i in 0..n {
        for (s, r) in sigma2.iter_mut().zip(resid.row(i)) {
            *s += r * r;
        }
    }
    sigma2.iter_mut().for_each(|s| *s /= dof);

    let mean = predict_fixed_effect(&coeffs, x_test)?;
    let mut variance = vec![0.0; x_test.n() * t];
    for i in 0..x_test.n() {
        let xs = x_test.values().row(i);
        let mut z = xs.to_vec();
        chol_solve(&chol, d, &mut z);
        let leverage: f64 = xs.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        for v in 0..t {
            variance[i * t + v] = sigma2[v] * (1.0 + leverage);
        }
    }
    let voxel_shape = y_train.shape()[1..].to_vec();
    Ok(BlrPrediction {
        variance: Tensor::new(mean.shape().to_vec(), variance)?,
        mean,
        sigma2: Tensor::new(voxel_shape, sigma2)?,
        ridge_fallback: ridge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: &[&[f64]]) -> DesignMatrix {
        DesignMatrix::unnamed(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
            .unwrap()
    }

    fn random_design(n: usize, d: usize, rng: &mut Rng) -> DesignMatrix {
        DesignMatrix::unnamed(Tensor::new(vec![n, d], rng.normals(n * d)).unwrap()).unwrap()
    }

    #[test]
    fn intercept_only_fit_is_voxel_mean() {
        let x = design(&[&[1.0], &[1.0], &[1.0], &[1.0]]);
        let mut rng = Rng::new(3);
        let y = Tensor::new(vec![4, 2, 1, 3], rng.normals(24)).unwrap();
        let fit = fit_fixed_effect(&x, &y).unwrap();
        assert_eq!(fit.coeffs.shape(), &[1, 2, 1, 3]);
        for v in 0..6 {
            let mean = (0..4).map(|i| y.row(i)[v]).sum::<f64>() / 4.0;
            assert!((fit.coeffs.data()[v] - mean).abs() < 1e-12);
        }
        // residuals of an intercept-only fit sum to zero per voxel
        let r = residuals(&y, &predict_fixed_effect(&fit.coeffs, &x).unwrap()).unwrap();
        for v in 0..6 {
            assert!((0..4).map(|i| r.row(i)[v]).sum::<f64>().abs() < 1e-8);
        }
    }

    #[test]
    fn underdetermined_fit_rejected() {
        let x = design(&[&[1.0, 2.0]]);
        assert!(fit_fixed_effect(&x, &Tensor::zeros(&[1, 1, 1, 1])).is_err());
    }

    #[test]
    fn collinear_design_flags_rank_deficiency() {
        let x = design(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let fit = fit_fixed_effect(&x, &Tensor::full(&[3, 1, 1, 2], 2.0)).unwrap();
        assert!(fit.rank_deficient);
        assert!(fit.coeffs.is_finite());
    }

    #[test]
    fn identity_design_prediction_returns_slices() {
        let x = design(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = Tensor::new(vec![2, 1, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = predict_fixed_effect(&a, &x).unwrap();
        assert_eq!(p.data(), a.data());
        assert_eq!(p.shape(), &[2, 1, 2, 1]);
        assert!(predict_fixed_effect(&a, &design(&[&[1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn prediction_matches_direct_contraction() {
        let mut rng = Rng::new(17);
        let x = random_design(3, 2, &mut rng);
        let a = Tensor::new(vec![2, 2, 2, 2], rng.normals(16)).unwrap();
        let p = predict_fixed_effect(&a, &x).unwrap();
        for n in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        let mut s = 0.0;
                        for d in 0..2 {
                            s += x.values().get2(n, d) * a.data()[((d * 2 + i) * 2 + j) * 2 + k];
                        }
                        let got = p.data()[((n * 2 + i) * 2 + j) * 2 + k];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn forced_full_resample_equals_plain_fit() {
        let mut rng = Rng::new(5);
        let x = random_design(12, 3, &mut rng);
        let y = Tensor::new(vec![12, 2, 2, 1], rng.normals(48)).unwrap();
        let set = fit_context_set(&x, &y, vec![(0..12).collect()], 0).unwrap();
        let plain = fit_fixed_effect(&x, &y).unwrap();
        assert_eq!(set.coeffs()[0], plain.coeffs);
        // fitted values are the single context channel
        let c = context_functions(&set, &x).unwrap();
        assert_eq!(c.shape(), &[12, 1, 2, 2, 1]);
        assert_eq!(c.data(), predict_fixed_effect(&plain.coeffs, &x).unwrap().data());
    }

    #[test]
    fn context_set_is_deterministic_and_prefix_stable() {
        let mut rng = Rng::new(8);
        let x = random_design(15, 2, &mut rng);
        let y = Tensor::new(vec![15, 2, 1, 2], rng.normals(60)).unwrap();
        let a = build_context_set(&x, &y, 4, &Rng::new(99)).unwrap();
        let b = build_context_set(&x, &y, 4, &Rng::new(99)).unwrap();
        assert_eq!(a, b);
        let big = build_context_set(&x, &y, 7, &Rng::new(99)).unwrap();
        assert_eq!(big.truncate(4).unwrap(), a);
        assert!(a.indices().iter().flatten().all(|&i| i < 15));
        assert!(a.indices().iter().all(|r| r.len() == 15));
    }

    #[test]
    fn rank_deficient_resamples_are_redrawn_then_fail() {
        // column 1 is nonzero in a single row: many resamples miss it
        let mut rows = vec![vec![1.0, 0.0]; 6];
        rows[0][1] = 1.0;
        let x = DesignMatrix::unnamed(Tensor::from_rows(&rows).unwrap()).unwrap();
        let y = Tensor::zeros(&[6, 1, 1, 1]);
        let set = build_context_set(&x, &y, 5, &Rng::new(1)).unwrap();
        assert!(set.indices().iter().all(|r| r.contains(&0)));
        // a design that is always rank deficient exhausts the attempts
        let x = DesignMatrix::unnamed(Tensor::from_rows(&vec![vec![1.0, 1.0]; 6]).unwrap()).unwrap();
        assert!(matches!(build_context_set(&x, &y, 1, &Rng::new(1)), Err(Error::Numeric(_))));
    }

    #[test]
    fn empty_and_zero_context() {
        assert!(FixedEffectSet::new(vec![], vec![], 0).is_err());
        let set = FixedEffectSet::new(vec![Tensor::zeros(&[2, 1, 1, 3])], vec![vec![0, 1]], 0).unwrap();
        let x = design(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let c = context_functions(&set, &x).unwrap();
        assert_eq!(c.shape(), &[3, 1, 1, 1, 3]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_shape_mismatch() {
        assert!(residuals(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 2])).is_err());
        let y = Tensor::full(&[2, 2], 1.5);
        assert!(residuals(&y, &y).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blr_intercept_hand_computation() {
        let x = design(&[&[1.0], &[1.0], &[1.0]]);
        let y = Tensor::new(vec![3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        // training size must exceed D + 2
        assert!(baseline_blr_normative(&x, &y, &design(&[&[1.0]])).is_err());
        let x = design(&[&[1.0], &[1.0], &[1.0], &[1.0]]);
        let y = Tensor::new(vec![4, 1, 1, 1], vec![1.0, 2.0, 3.0, 2.0]).unwrap();
        let p = baseline_blr_normative(&x, &y, &design(&[&[1.0]])).unwrap();
        // mean 2, sigma2 = (1 + 0 + 1 + 0) / 3, leverage 1/4
        assert!((p.mean.data()[0] - 2.0).abs() < 1e-14);
        assert!((p.sigma2.data()[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((p.variance.data()[0] - 2.0 / 3.0 * 1.25).abs() < 1e-14);
        assert!(!p.ridge_fallback);
    }

    #[test]
    fn blr_singular_design_uses_ridge() {
        let x = design(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let y = Tensor::new(vec![5, 1, 1, 1], vec![1.0, 2.0, 3.0, 2.0, 2.0]).unwrap();
        let p = baseline_blr_normative(&x, &y, &design(&[&[1.0, 1.0]])).unwrap();
        assert!(p.ridge_fallback);
        assert!((p.mean.data()[0] - 2.0).abs() < 1e-5);
        assert!(p.variance.data()[0] >= p.sigma2.data()[0]);
    }

    #[test]
    fn standardizer_uses_training_statistics() {
        let train = design(&[&[1.0, 5.0], &[3.0, 5.0]]);
        let s = Standardizer::fit(&train);
        let z = s.apply(&train).unwrap();
        assert!((z.values().get2(0, 0) + 1.0 / 2f64.sqrt()).abs() < 1e-12);
        // constant column stays finite
        assert_eq!(z.values().get2(0, 1), 0.0);
        assert!(s.apply(&design(&[&[1.0]])).is_err());
    }

    #[test]
    fn fixed_effect_set_persists() {
        let set = FixedEffectSet::new(
            vec![Tensor::full(&[1, 1, 1, 2], 0.25), Tensor::full(&[1, 1, 1, 2], -1.0 / 3.0)],
            vec![vec![0, 0, 1], vec![2, 1, 0]],
            42,
        )
        .unwrap()
        .with_split_id("split-1");
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        assert_eq!(FixedEffectSet::load(dir.path()).unwrap(), set);
    }
}
