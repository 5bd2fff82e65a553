//! Generalized extreme value distribution: CDF, log-likelihood and a
//! maximum-likelihood fit by Nelder-Mead with a Gumbel fallback.

use argmin::core::{CostFunction, Executor, State, TerminationReason};
use argmin::solver::neldermead::NelderMead;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `|xi|` the Gumbel limit is used.
pub const GUMBEL_XI: f64 = 1e-9;
pub const MIN_GEVD_SAMPLES: usize = 20;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const MAX_ABS_XI: f64 = 5.0;
const MAX_ITERS: u64 = 5000;
const SD_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GevdParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevdParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() || !xi.is_finite() {
            return Err(Error::invalid(format!("invalid GEVD parameters mu {mu}, sigma {sigma}, xi {xi}")));
        }
        Ok(GevdParams { mu, sigma, xi })
    }
}

pub fn gevd_cdf(a: f64, p: &GevdParams) -> f64 {
    let z = (a - p.mu) / p.sigma;
    if p.xi.abs() < GUMBEL_XI {
        return (-(-z).exp()).exp();
    }
    let xz = p.xi * z;
    if xz <= -1.0 {
        return if p.xi > 0.0 { 0.0 } else { 1.0 };
    }
    (-(-xz.ln_1p() / p.xi).exp()).exp()
}

/// Sum of log densities; `-inf` when a sample lies outside the support.
pub fn gevd_loglik(samples: &[f64], p: &GevdParams) -> f64 {
    let n = samples.len() as f64;
    let mut acc = -n * p.sigma.ln();
    if p.xi.abs() < GUMBEL_XI {
        for &a in samples {
            let z = (a - p.mu) / p.sigma;
            acc -= z + (-z).exp();
        }
        return acc;
    }
    for &a in samples {
        let xz = p.xi * (a - p.mu) / p.sigma;
        if xz <= -1.0 {
            return f64::NEG_INFINITY;
        }
        let l = xz.ln_1p();
        acc -= (1.0 + 1.0 / p.xi) * l + (-l / p.xi).exp();
    }
    acc
}

/// Outcome of [`fit_gevd`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GevdFit {
    pub params: GevdParams,
    pub loglik: f64,
    /// Set when the three-parameter fit failed and `xi` was fixed at 0.
    pub gumbel_fallback: bool,
    pub iterations: u64,
}

/// Mean negative log-likelihood over `(mu, ln sigma, xi)`; leaving the
/// support costs a penalty that grows with the violation.
struct Nll<'a> {
    samples: &'a [f64],
    fixed_xi: Option<f64>,
}

const PENALTY: f64 = 1e10;

impl Nll<'_> {
    fn params(&self, v: &[f64]) -> GevdParams {
        GevdParams {
            mu: v[0],
            sigma: v[1].exp(),
            xi: self.fixed_xi.unwrap_or_else(|| v[2]),
        }
    }

    fn eval(&self, v: &[f64]) -> f64 {
        let p = self.params(v);
        if !(p.sigma > 0.0 && p.sigma.is_finite()) || !p.mu.is_finite() || !p.xi.is_finite() {
            return PENALTY * 10.0;
        }
        let ll = gevd_loglik(self.samples, &p);
        if ll.is_finite() {
            return -ll / self.samples.len() as f64;
        }
        // distance outside the support
        let worst = self
            .samples
            .iter()
            .map(|&a| -(1.0 + p.xi * (a - p.mu) / p.sigma))
            .fold(0.0f64, f64::max);
        PENALTY * (1.0 + worst)
    }
}

impl CostFunction for Nll<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, v: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(v))
    }
}

/// Runs the simplex from `start` with the given per-coordinate steps.
fn simplex(nll: Nll<'_>, start: Vec<f64>, steps: &[f64]) -> Result<(Vec<f64>, bool, u64)> {
    let mut vertices = vec![start.clone()];
    for (i, s) in steps.iter().enumerate() {
        let mut v = start.clone();
        v[i] += s;
        vertices.push(v);
    }
    let solver = NelderMead::new(vertices)
        .with_sd_tolerance(SD_TOLERANCE)
        .map_err(|e| Error::Numeric(format!("simplex setup: {e}")))?;
    let res = Executor::new(nll, solver)
        .configure(|s| s.max_iters(MAX_ITERS))
        .run()
        .map_err(|e| Error::Numeric(format!("simplex: {e}")))?;
    let state = res.state();
    let converged = matches!(state.get_termination_reason(), Some(TerminationReason::SolverConverged));
    let best = state
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::Numeric("simplex returned no parameters".into()))?;
    Ok((best, converged, state.get_iter()))
}

/// Moment-based Gumbel start: `sigma0 = sd * sqrt(6) / pi`,
/// `mu0 = mean - 0.5772 sigma0`, `xi0 = 0.1`.
pub fn gevd_initial(samples: &[f64]) -> Result<GevdParams> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sigma = var.sqrt() * 6f64.sqrt() / std::f64::consts::PI;
    GevdParams::new(mean - EULER_GAMMA * sigma, sigma, 0.1)
}

fn check_samples(samples: &[f64]) -> Result<()> {
    if samples.len() < MIN_GEVD_SAMPLES {
        return Err(Error::invalid(format!(
            "GEVD fit needs at least {MIN_GEVD_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("GEVD samples".into()));
    }
    if samples.iter().all(|&a| a == samples[0]) {
        return Err(Error::invalid("GEVD fit on constant samples"));
    }
    Ok(())
}

/// Maximum-likelihood GEVD fit. The simplex is restarted once from its
/// first optimum; if the fit does not converge or leaves `|xi| < 5`, a
/// Gumbel fit (`xi = 0`) is returned instead.
pub fn fit_gevd(samples: &[f64]) -> Result<GevdFit> {
    check_samples(samples)?;
    let init = gevd_initial(samples)?;
    let start = vec![init.mu, init.sigma.ln(), init.xi];
    let steps = [0.5 * init.sigma, 0.3, 0.1];
    let nll = || Nll { samples, fixed_xi: None };
    let attempt = simplex(nll(), start, &steps).and_then(|(v, _, it1)| {
        let (v, converged, it2) = simplex(nll(), v, &[0.05 * init.sigma, 0.03, 0.01])?;
        Ok((v, converged, it1 + it2))
    });
    if let Ok((v, true, iterations)) = attempt {
        let params = nll().params(&v);
        let loglik = gevd_loglik(samples, &params);
        if params.xi.abs() < MAX_ABS_XI && loglik.is_finite() {
            return Ok(GevdFit {
                params,
                loglik,
                gumbel_fallback: false,
                iterations,
            });
        }
    }
    log::warn!("GEVD maximum likelihood did not converge; falling back to a Gumbel fit");
    let gumbel = || Nll {
        samples,
        fixed_xi: Some(0.0),
    };
    let (v, _, it1) = simplex(gumbel(), vec![init.mu, init.sigma.ln()], &steps[..2])?;
    let (v, converged, it2) = simplex(gumbel(), v, &[0.05 * init.sigma, 0.03])?;
    if !converged {
        return Err(Error::Numeric("Gumbel fit did not converge".into()));
    }
    let params = gumbel().params(&v);
    Ok(GevdFit {
        params,
        loglik: gevd_loglik(samples, &params),
        gumbel_fallback: true,
        iterations: it1 + it2,
    })
}

/// Inverse CDF, used to draw test samples.
pub fn gevd_quantile(u: f64, p: &GevdParams) -> f64 {
    let y = -u.ln();
    if p.xi.abs() < GUMBEL_XI {
        p.mu - p.sigma * y.ln()
    } else {
        p.mu + p.sigma * (y.powf(-p.xi) - 1.0) / p.xi
    }
}

/// Abnormality probabilities: a GEVD fitted on the reference summaries,
/// evaluated at each test summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltyScores {
    pub gevd: GevdFit,
    pub summaries: Vec<f64>,
    pub probabilities: Vec<f64>,
}

pub fn abnormality_probabilities(reference: &[f64], test: &[f64]) -> Result<NoveltyScores> {
    let gevd = fit_gevd(reference)?;
    let probabilities = test.iter().map(|&a| gevd_cdf(a, &gevd.params)).collect();
    Ok(NoveltyScores {
        gevd,
        summaries: test.to_vec(),
        probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Rng;

    fn p(mu: f64, sigma: f64, xi: f64) -> GevdParams {
        GevdParams::new(mu, sigma, xi).unwrap()
    }

    #[test]
    fn cdf_values() {
        assert!((gevd_cdf(1.3, &p(1.3, 2.0, 0.0)) - (-1f64).exp()).abs() < 1e-12);
        assert!((gevd_cdf(2.0, &p(0.0, 1.0, 0.5)) - (-0.25f64).exp()).abs() < 1e-12);
        // outside the support
        assert_eq!(gevd_cdf(-3.0, &p(0.0, 1.0, 0.5)), 0.0);
        assert_eq!(gevd_cdf(3.0, &p(0.0, 1.0, -0.5)), 1.0);
    }

    #[test]
    fn cdf_monotone_and_continuous_in_xi() {
        for xi in [-0.4, 0.0, 0.3] {
            let mut prev = 0.0;
            for i in 0..1000 {
                let a = -5.0 + 10.0 * i as f64 / 999.0;
                let c = gevd_cdf(a, &p(0.2, 1.1, xi));
                assert!((0.0..=1.0).contains(&c));
                assert!(c >= prev);
                prev = c;
            }
        }
        for i in 0..200 {
            let a = -4.0 + 12.0 * i as f64 / 199.0;
            let g = gevd_cdf(a, &p(0.0, 1.0, 0.0));
            for xi in [1e-7, -1e-7] {
                assert!((gevd_cdf(a, &p(0.0, 1.0, xi)) - g).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for xi in [-0.2, 0.0, 0.3] {
            let q = p(0.5, 2.0, xi);
            for u in [0.01, 0.3, 0.5, 0.9, 0.999] {
                assert!((gevd_cdf(gevd_quantile(u, &q), &q) - u).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_degenerate_samples() {
        assert!(fit_gevd(&[1.0; 50]).is_err());
        assert!(fit_gevd(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn fit_improves_on_initializer() {
        let mut rng = Rng::new(3);
        let truth = p(1.0, 0.5, 0.2);
        let s: Vec<f64> = (0..200).map(|_| gevd_quantile(rng.uniform_open(), &truth)).collect();
        let fit = fit_gevd(&s).unwrap();
        let init = gevd_initial(&s).unwrap();
        assert!(fit.loglik >= gevd_loglik(&s, &init));
        assert!(!fit.gumbel_fallback);
    }
}
