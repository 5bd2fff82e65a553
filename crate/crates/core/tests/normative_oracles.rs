use nalgebra::{DMatrix, SymmetricEigen};
use npnorm::mixed_effect::DesignMatrix;
use npnorm::normative::{
    abnormality_probabilities, auc, first_principal_component, fit_gevd, gevd_cdf, gevd_initial, gevd_loglik,
    group_difference_maps, region_association, simple_regression_r2, summary_statistic, GevdParams, Npm,
};
use npnorm::cohort::Label;
use npnorm::tensorcore::{Rng, Tensor};

fn pair_counting_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

#[test]
fn auc_matches_pair_counting_exactly() {
    let mut rng = Rng::new(11);
    for case in 0..200 {
        let labels: Vec<u8> = (0..50).map(|i| if i < 2 { i as u8 } else { (rng.uniform() < 0.4) as u8 }).collect();
        // coarse grid of values so ties are frequent
        let scores: Vec<f64> = (0..50)
            .map(|i| {
                if case % 2 == 0 {
                    (rng.normal() * 3.0).round() + labels[i] as f64
                } else {
                    rng.normal()
                }
            })
            .collect();
        assert_eq!(auc(&scores, &labels).unwrap(), pair_counting_auc(&scores, &labels), "case {case}");
        let transformed: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() * 3.0 - 1.0).collect();
        assert_eq!(auc(&transformed, &labels).unwrap(), auc(&scores, &labels).unwrap());
    }
}

#[test]
fn auc_hand_cases() {
    assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
    assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
    assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
}

#[test]
fn summary_matches_full_sort_oracle() {
    let mut rng = Rng::new(5);
    for case in 0..100 {
        let t = 20 + rng.below(500);
        let v: Vec<f64> = (0..t)
            .map(|_| if case % 3 == 0 { (rng.normal() * 2.0).round() } else { rng.normal() })
            .collect();
        let fraction = [0.01, 0.05, 0.2, 1.0][case % 4];
        let mut abs: Vec<f64> = v.iter().map(|x| x.abs()).collect();
        abs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = ((fraction * t as f64) - 1e-9).ceil().max(1.0) as usize;
        let oracle = abs[..k].iter().sum::<f64>() / k as f64;
        let got = summary_statistic(&v, fraction).unwrap();
        assert_eq!(got, oracle, "case {case}: t {t}, fraction {fraction}");
        // permutation and sign-flip invariance
        let mut w: Vec<f64> = v.iter().map(|x| -x).collect();
        rng.shuffle(&mut w);
        assert_eq!(summary_statistic(&w, fraction).unwrap(), got);
    }
    let mut vol = vec![0.0; 200];
    vol[17] = 4.0;
    vol[150] = -6.0;
    assert_eq!(summary_statistic(&vol, 0.01).unwrap(), 5.0);
    assert!(summary_statistic(&[], 0.01).is_err());
}

fn random_design(rng: &mut Rng, n: usize, d: usize) -> DesignMatrix {
    let f: Vec<f64> = rng.normals(n);
    let data = (0..n * d).map(|k| f[k / d] * (1.0 + (k % d) as f64 * 0.3) + 0.5 * rng.normal()).collect();
    DesignMatrix::unnamed(Tensor::new(vec![n, d], data).unwrap()).unwrap()
}

#[test]
fn pc1_matches_dense_eigendecomposition() {
    let mut rng = Rng::new(21);
    for case in 0..20 {
        let (n, d) = (5 + rng.below(60), 1 + rng.below(11));
        let x = random_design(&mut rng, n, d);
        let pc = first_principal_component(&x).unwrap();
        let m = DMatrix::from_row_slice(n, d, x.values().data());
        let mean = m.row_mean();
        let mut c = m.clone();
        for i in 0..n {
            let mut r = c.row_mut(i);
            r -= &mean;
        }
        let cov = c.transpose() * &c / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.imax();
        let lambda = eig.eigenvalues[top];
        let mut v: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
        let big = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
        if v[big] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        assert!(pc.converged, "case {case}");
        assert!((pc.eigenvalue - lambda).abs() < 1e-8 * lambda.max(1.0), "case {case}: {} vs {lambda}", pc.eigenvalue);
        for a in 0..d {
            assert!((pc.loadings[a] - v[a]).abs() < 1e-8, "case {case}: loading {a}");
        }
        let ms = pc.scores.iter().sum::<f64>() / n as f64;
        let var = pc.scores.iter().map(|s| (s - ms).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var - lambda).abs() < 1e-8 * lambda.max(1.0));
    }
}

#[test]
fn pc1_axis_aligned_and_barratt_width() {
    let data: Vec<f64> = (0..10).flat_map(|i| [0.0, -(i as f64), 0.0]).collect();
    let x = DesignMatrix::unnamed(Tensor::new(vec![10, 3], data).unwrap()).unwrap();
    let pc = first_principal_component(&x).unwrap();
    assert!((pc.loadings[1] - 1.0).abs() < 1e-12 && pc.loadings[0].abs() < 1e-12);
    let mut rng = Rng::new(2);
    let pc = first_principal_component(&random_design(&mut rng, 40, 11)).unwrap();
    assert_eq!(pc.loadings.len(), 11);
    assert!((pc.loadings.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    let flat = DesignMatrix::unnamed(Tensor::full(&[5, 2], 3.0)).unwrap();
    assert!(first_principal_component(&flat).is_err());
}

#[test]
fn r2_matches_closed_form_regression() {
    let mut rng = Rng::new(8);
    for _ in 0..50 {
        let n = 3 + rng.below(40);
        let x: Vec<f64> = rng.normals(n);
        let y: Vec<f64> = x.iter().map(|v| 0.8 * v + rng.normal()).collect();
        let mx = x.iter().sum::<f64>() / n as f64;
        let my = y.iter().sum::<f64>() / n as f64;
        let slope = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
            / x.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
        let icpt = my - slope * mx;
        let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
        let sst: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let (r2, f) = simple_regression_r2(&x, &y);
        assert!((r2 - (1.0 - sse / sst)).abs() < 1e-10);
        assert!((f - r2 * (n as f64 - 2.0) / (1.0 - r2)).abs() < 1e-8 * f.max(1.0));
    }
}

#[test]
fn region_association_exact_fit_and_bonferroni() {
    let mut rng = Rng::new(3);
    let (n, t) = (12, 30);
    let x = random_design(&mut rng, n, 4);
    let pc = first_principal_component(&x).unwrap();
    let mut values = vec![0.0; n * t];
    for i in 0..n {
        for v in 0..t {
            values[i * t + v] = if v < 5 { 2.0 * pc.scores[i] + 1.0 } else { rng.normal() };
        }
    }
    let npm = Npm { values: Tensor::new(vec![n, t], values).unwrap() };
    let masks: Vec<Vec<usize>> = (0..9).map(|r| if r == 0 { (0..5).collect() } else { vec![5 + 2 * r, 6 + 2 * r] }).collect();
    let res = region_association(&npm, &masks, &x, 0.01).unwrap();
    assert_eq!(res.len(), 9);
    assert!((res[0].r2 - 1.0).abs() < 1e-12);
    assert!(res[0].significant);
    for r in &res {
        assert!((r.p_corrected - (r.p_value * 9.0).min(1.0)).abs() < 1e-15);
    }
    assert!(region_association(&npm, &[vec![t]], &x, 0.01).is_err());
}

fn gevd_sample(rng: &mut Rng, n: usize, mu: f64, sigma: f64, xi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u = rng.uniform_open();
            let e = -u.ln();
            if xi == 0.0 {
                mu - sigma * e.ln()
            } else {
                mu + sigma * (e.powf(-xi) - 1.0) / xi
            }
        })
        .collect()
}

#[test]
fn gevd_recovers_gumbel() {
    let s = gevd_sample(&mut Rng::new(100), 20_000, 0.0, 1.0, 0.0);
    let fit = fit_gevd(&s).unwrap();
    let p = fit.params;
    assert!(p.xi.abs() < 0.05 && p.mu.abs() < 0.05 && (p.sigma - 1.0).abs() < 0.05, "{p:?}");
    assert!(fit.loglik >= gevd_loglik(&s, &gevd_initial(&s).unwrap()));
}

#[test]
fn gevd_recovers_heavy_tail() {
    let s = gevd_sample(&mut Rng::new(101), 20_000, 0.0, 1.0, 0.3);
    let p = fit_gevd(&s).unwrap().params;
    assert!((0.25..=0.35).contains(&p.xi) && p.mu.abs() < 0.05 && (p.sigma - 1.0).abs() < 0.05, "{p:?}");
}

#[test]
fn gevd_degenerate_inputs() {
    assert!(fit_gevd(&[1.5; 50]).is_err());
    assert!(fit_gevd(&(0..19).map(|i| i as f64).collect::<Vec<_>>()).is_err());
}

#[test]
fn abnormality_probability_properties() {
    let mut rng = Rng::new(7);
    let reference = gevd_sample(&mut rng, 500, 2.0, 0.5, 0.0);
    let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut test: Vec<f64> = (0..40).map(|_| 1.0 + 4.0 * rng.uniform()).collect();
    test.push(lo - 2.0);
    let scores = abnormality_probabilities(&reference, &test).unwrap();
    assert!(scores.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(*scores.probabilities.last().unwrap() < 1e-6);
    for i in 0..test.len() {
        for j in 0..test.len() {
            if test[i] < test[j] {
                assert!(scores.probabilities[i] <= scores.probabilities[j]);
            }
        }
    }
    let p = scores.gevd.params;
    let at_mu = gevd_cdf(p.mu, &GevdParams::new(p.mu, p.sigma, 0.0).unwrap());
    assert!((at_mu - (-1f64).exp()).abs() < 1e-12);
}

#[test]
fn difference_maps_match_elementwise_oracle() {
    let mut rng = Rng::new(4);
    let (n, t) = (20, 7);
    let values = Tensor::new(vec![n, t], rng.normals(n * t)).unwrap();
    let labels: Vec<Label> = (0..n).map(|i| Label::ALL[if i < 4 { i } else { rng.below(3) }]).collect();
    let npm = Npm { values: values.clone() };
    let maps = group_difference_maps(&npm, &labels).unwrap();
    for (group, map) in maps {
        for v in 0..t {
            let mean = |l: Label| {
                let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == l).collect();
                rows.iter().map(|&i| values.get2(i, v)).sum::<f64>() / rows.len() as f64
            };
            assert!((map.data()[v] - (mean(group) - mean(Label::Healthy))).abs() < 1e-12);
        }
    }
}
