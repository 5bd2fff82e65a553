use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::mixed_effect::DesignMatrix;
use crate::normative::npm::Npm;

pub const PC_TOLERANCE: f64 = 1e-10;
pub const PC_MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalComponent {
    /// Unit loading vector, largest-magnitude entry positive.
    pub loadings: Vec<f64>,
    /// Projection of each centered subject onto the loadings.
    pub scores: Vec<f64>,
    /// Leading eigenvalue of the sample covariance (divisor `N - 1`).
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Leading principal component by power iteration on the covariance of
/// the column-centered design. The iteration starts from the covariance
/// column of the most variable covariate and stops once successive unit
/// vectors differ by less than [`PC_TOLERANCE`].
pub fn first_principal_component(x: &DesignMatrix) -> Result<PrincipalComponent> {
    let (n, d) = (x.n(), x.d());
    if n < 2 || d == 0 {
        return Err(Error::invalid(format!("principal component needs N >= 2 and D >= 1, got {n} x {d}")));
    }
    let xv = x.values();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(xv.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| xv.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    if !(trace > 0.0) {
        return Err(Error::invalid("zero-variance design has no principal component"));
    }
    let matvec = |v: &[f64]| -> Vec<f64> { (0..d).map(|a| (0..d).map(|b| cov[a * d + b] * v[b]).sum()).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        norm
    };

    let start = (0..d).max_by(|&a, &b| cov[a * d + a].total_cmp(&cov[b * d + b])).unwrap();
    let mut v: Vec<f64> = (0..d).map(|b| cov[start * d + b]).collect();
    normalize(&mut v);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < PC_MAX_ITERS {
        iterations += 1;
        let mut next = matvec(&v);
        if normalize(&mut next) == 0.0 {
            return Err(Error::Numeric("power iteration collapsed to zero".into()));
        }
        let delta = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < PC_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("power iteration stopped after {PC_MAX_ITERS} iterations without converging");
    }
    let lead = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).unwrap();
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let cv = matvec(&v);
    let eigenvalue = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
    let scores = centered.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
    Ok(PrincipalComponent {
        loadings: v,
        scores,
        eigenvalue,
        iterations,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionResult {
    pub region: usize,
    pub r2: f64,
    pub f: f64,
    pub p_value: f64,
    /// `min(1, p * regions)`.
    pub p_corrected: f64,
    pub significant: bool,
}

/// `(R^2, F)` of the simple regression of `y` on `x` with intercept.
pub fn simple_regression_r2(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return (0.0, 0.0);
    }
    let r2 = ((sxy * sxy) / (sxx * syy)).min(1.0);
    let f = if r2 >= 1.0 {
        f64::INFINITY
    } else {
        r2 * (n - 2.0) / (1.0 - r2)
    };
    (r2, f)
}

/// Regresses each region's mean NPM on the first principal component of
/// `x` and tests `R^2` with `F(1, N - 2)`, Bonferroni-corrected over the
/// regions at level `alpha`.
pub fn region_association(npm: &Npm, masks: &[Vec<usize>], x: &DesignMatrix, alpha: f64) -> Result<Vec<RegionResult>> {
    let n = npm.n();
    if x.n() != n {
        return Err(Error::shape("region_association", format!("{} covariate rows, {n} NPMs", x.n())));
    }
    if n < 3 {
        return Err(Error::invalid("region association needs at least 3 subjects"));
    }
    let t = npm.values.row_len();
    for (r, m) in masks.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::invalid(format!("region {r} is empty")));
        }
        if let Some(v) = m.iter().find(|&&v| v >= t) {
            return Err(Error::invalid(format!("region {r} references voxel {v} outside 0..{t}")));
        }
    }
    let pc = first_principal_component(x)?;
    let dist = FisherSnedecor::new(1.0, (n - 2) as f64).map_err(|e| Error::Numeric(format!("F distribution: {e}")))?;
    let factor = masks.len() as f64;
    Ok(masks
        .iter()
        .enumerate()
        .map(|(region, m)| {
            let means: Vec<f64> = (0..n)
                .map(|i| {
                    let row = npm.subject(i);
                    m.iter().map(|&v| row[v]).sum::<f64>() / m.len() as f64
                })
                .collect();
            let (r2, f) = simple_regression_r2(&pc.scores, &means);
            let p_value = if f.is_infinite() { 0.0 } else { dist.sf(f) };
            let p_corrected = (p_value * factor).min(1.0);
            RegionResult {
                region,
                r2,
                f,
                p_value,
                p_corrected,
                significant: p_corrected < alpha,
            }
        })
        .collect())
}
