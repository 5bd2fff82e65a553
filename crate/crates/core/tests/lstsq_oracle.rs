use nalgebra::{DMatrix, DVector};
use npnorm::tensorcore::{lstsq, Rng, Tensor};
use proptest::prelude::*;

fn normal_equations(x: &Tensor, y: &[f64]) -> Vec<f64> {
    let (n, d) = (x.dim(0), x.dim(1));
    let xm = DMatrix::from_row_slice(n, d, x.data());
    let yv = DVector::from_column_slice(y);
    let xtx = xm.transpose() * &xm;
    let xty = xm.transpose() * yv;
    xtx.lu().solve(&xty).expect("full rank").iter().copied().collect()
}

#[test]
fn small_system_matches_normal_equations() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let y = [1.0, 2.0, 3.0];
    let got = lstsq(&x, &y).unwrap().coeffs;
    let want = normal_equations(&x, &y);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{got:?} vs {want:?}");
    }
}

#[test]
fn random_systems_match_normal_equations() {
    let mut rng = Rng::new(12);
    for _ in 0..50 {
        let n = 5 + rng.below(20);
        let d = 1 + rng.below(5);
        let x = Tensor::new(vec![n, d], rng.normals(n * d)).unwrap();
        let y = rng.normals(n);
        let got = lstsq(&x, &y).unwrap().coeffs;
        let want = normal_equations(&x, &y);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

proptest! {
    #[test]
    fn residual_is_orthogonal_to_columns(seed in 0u64..10_000, n in 4usize..30, d in 1usize..4) {
        let mut rng = Rng::new(seed);
        let x = Tensor::new(vec![n, d], rng.normals(n * d)).unwrap();
        let y: Vec<f64> = rng.normals(n).iter().map(|v| v * 10.0).collect();
        let beta = lstsq(&x, &y).unwrap().coeffs;
        let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for j in 0..d {
            let mut dot = 0.0;
            for i in 0..n {
                let fitted: f64 = (0..d).map(|k| x.get2(i, k) * beta[k]).sum();
                dot += x.get2(i, j) * (y[i] - fitted);
            }
            prop_assert!(dot.abs() / (1.0 + ymax) < 1e-8);
        }
    }
}
