//! Least squares via Householder QR with column pivoting.
//!
//! Full-rank systems are solved from `R`. When the numerical rank `r` is
//! below `D`, the leading `r` rows of `R` are reduced by a second QR
//! (complete orthogonal decomposition) so the returned solution is the
//! minimum-norm one.

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// Column-major Householder factorization `A P = Q R` of an `m x n` matrix.
#[derive(Clone, Debug)]
struct HouseholderQr {
    m: usize,
    // R in the upper triangle, reflector tails below the diagonal.
    a: Vec<f64>,
    tau: Vec<f64>,
    perm: Vec<usize>,
}

impl HouseholderQr {
    fn factor(mut a: Vec<f64>, m: usize, n: usize, pivot: bool) -> Self {
        let steps = m.min(n);
        let mut tau = vec![0.0; steps];
        let mut perm: Vec<usize> = (0..n).collect();
        let mut norms: Vec<f64> = (0..n)
            .map(|j| a[j * m..(j + 1) * m].iter().map(|v| v * v).sum())
            .collect();

        for k in 0..steps {
            if pivot {
                let p = (k..n)
                    .max_by(|&i, &j| norms[i].total_cmp(&norms[j]).then(j.cmp(&i)))
                    .unwrap_or(k);
                if p != k {
                    for i in 0..m {
                        a.swap(k * m + i, p * m + i);
                    }
                    norms.swap(k, p);
                    perm.swap(k, p);
                }
            }

            let col = &mut a[k * m..(k + 1) * m];
            let alpha = col[k];
            let tail: f64 = col[k + 1..].iter().map(|v| v * v).sum();
            let norm = (alpha * alpha + tail).sqrt();
            if norm == 0.0 {
                tau[k] = 0.0;
                continue;
            }
            let beta = if alpha >= 0.0 { -norm } else { norm };
            let scale = alpha - beta;
            for v in &mut col[k + 1..] {
                *v /= scale;
            }
            col[k] = beta;
            tau[k] = (beta - alpha) / beta;

            for j in k + 1..n {
                let (head, rest) = a.split_at_mut(j * m);
                let v = &head[k * m..(k + 1) * m];
                let c = &mut rest[..m];
                let mut dot = c[k];
                for i in k + 1..m {
                    dot += v[i] * c[i];
                }
                dot *= tau[k];
                c[k] -= dot;
                for i in k + 1..m {
                    c[i] -= dot * v[i];
                }
                if pivot {
                    norms[j] = c[k + 1..].iter().map(|x| x * x).sum();
                }
            }
        }
        HouseholderQr {
            m,
            a,
            tau,
            perm,
        }
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        self.a[j * self.m + i]
    }

    /// Overwrites `y` (length m) with `Q^T y`.
    fn apply_qt(&self, y: &mut [f64]) {
        let m = self.m;
        for (k, &t) in self.tau.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            let v = &self.a[k * m..(k + 1) * m];
            let mut dot = y[k];
            for i in k + 1..m {
                dot += v[i] * y[i];
            }
            dot *= t;
            y[k] -= dot;
            for i in k + 1..m {
                y[i] -= dot * v[i];
            }
        }
    }

    /// Overwrites `y` (length m) with `Q y`.
    fn apply_q(&self, y: &mut [f64]) {
        let m = self.m;
        for (k, &t) in self.tau.iter().enumerate().rev() {
            if t == 0.0 {
                continue;
            }
            let v = &self.a[k * m..(k + 1) * m];
            let mut dot = y[k];
            for i in k + 1..m {
                dot += v[i] * y[i];
            }
            dot *= t;
            y[k] -= dot;
            for i in k + 1..m {
                y[i] -= dot * v[i];
            }
        }
    }
}

/// Reusable least-squares factorization of an `N x D` design, so that many
/// right-hand sides (one per voxel) share a single decomposition.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    n: usize,
    d: usize,
    rank: usize,
    qr: HouseholderQr,
    // QR of the leading rank rows of R, transposed (d x rank); only when
    // rank < d.
    cod: Option<HouseholderQr>,
}

impl LeastSquares {
    pub fn factor(x: &Tensor) -> Result<Self> {
        if x.ndim() != 2 {
            return Err(Error::shape("lstsq", format!("design must be 2-D, got {:?}", x.shape())));
        }
        let (n, d) = (x.dim(0), x.dim(1));
        if n < d {
            return Err(Error::invalid(format!(
                "lstsq needs N >= D, got N = {n}, D = {d}"
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("lstsq design matrix".into()));
        }
        let mut colmajor = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                colmajor[j * n + i] = x.get2(i, j);
            }
        }
        let qr = HouseholderQr::factor(colmajor, n, d, true);
        let r00 = qr.r(0, 0).abs();
        let tol = r00 * f64::EPSILON * (n.max(d) as f64) * 10.0;
        let rank = if r00 == 0.0 {
            0
        } else {
            (0..d).take_while(|&k| qr.r(k, k).abs() > tol).count()
        };
        let cod = if rank < d && rank > 0 {
            // [R11 R12]^T is d x rank
            let mut t = vec![0.0; d * rank];
            for i in 0..rank {
                for j in i..d {
                    t[i * d + j] = qr.r(i, j);
                }
            }
            Some(HouseholderQr::factor(t, d, rank, false))
        } else {
            None
        };
        Ok(LeastSquares {
            n,
            d,
            rank,
            qr,
            cod,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.d
    }

    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n {
            return Err(Error::shape(
                "lstsq",
                format!("response length {} vs design rows {}", y.len(), self.n),
            ));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lstsq response".into()));
        }
        let mut qty = y.to_vec();
        self.qr.apply_qt(&mut qty);
        let r = self.rank;
        let mut permuted = vec![0.0; self.d];
        match &self.cod {
            None => {
                // back substitution on the leading r x r block
                for i in (0..r).rev() {
                    let mut s = qty[i];
                    for j in i + 1..r {
                        s -= self.qr.r(i, j) * permuted[j];
                    }
                    permuted[i] = s / self.qr.r(i, i);
                }
            }
            Some(cod) => {
                // [R11 R12] = T^T Z^T with T upper triangular (rank x rank).
                // Solve T^T w = qty[..r] (forward), then permuted = Z [w; 0].
                let mut w = vec![0.0; self.d];
                for i in 0..r {
                    let mut s = qty[i];
                    for j in 0..i {
                        s -= cod.r(j, i) * w[j];
                    }
                    w[i] = s / cod.r(i, i);
                }
                cod.apply_q(&mut w);
                permuted = w;
            }
        }
        let mut beta = vec![0.0; self.d];
        for (k, &p) in self.qr.perm.iter().enumerate() {
            beta[p] = permuted[k];
        }
        Ok(beta)
    }
}

/// Least-squares coefficients with a rank diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct LstsqSolution {
    pub coeffs: Vec<f64>,
    pub rank_deficient: bool,
}

/// Minimum-norm least-squares solution of `x * coeffs ~= y`.
pub fn lstsq(x: &Tensor, y: &[f64]) -> Result<LstsqSolution> {
    let ls = LeastSquares::factor(x)?;
    Ok(LstsqSolution {
        coeffs: ls.solve(y)?,
        rank_deficient: ls.is_rank_deficient(),
    })
}

/// Dense matrix product of row-major `a (m x k)` and `b (k x n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(false, false, m, k, n, 1.0, a, b, 0.0, &mut c);
    c
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn intercept_only_returns_mean() {
        let x = mat(&[&[1.0], &[1.0], &[1.0]]);
        let s = lstsq(&x, &[1.0, 2.0, 3.0]).unwrap();
        assert!((s.coeffs[0] - 2.0).abs() < 1e-14);
        assert!(!s.rank_deficient);
    }

    #[test]
    fn identity_design() {
        let x = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = lstsq(&x, &[3.0, 4.0]).unwrap();
        assert!((s.coeffs[0] - 3.0).abs() < 1e-14);
        assert!((s.coeffs[1] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_gives_minimum_norm() {
        // duplicated column: any split a + b = 2 fits; minimum norm is (1, 1)
        let x = mat(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let s = lstsq(&x, &[2.0, 2.0, 2.0]).unwrap();
        assert!(s.rank_deficient);
        assert!((s.coeffs[0] - 1.0).abs() < 1e-12, "{:?}", s.coeffs);
        assert!((s.coeffs[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_column_is_rank_deficient_with_zero_coefficient() {
        let x = mat(&[&[1.0, 0.0], &[2.0, 0.0], &[3.0, 0.0]]);
        let s = lstsq(&x, &[2.0, 4.0, 6.0]).unwrap();
        assert!(s.rank_deficient);
        assert!((s.coeffs[0] - 2.0).abs() < 1e-12);
        assert_eq!(s.coeffs[1], 0.0);
    }

    #[test]
    fn rejects_non_finite_and_underdetermined() {
        let x = mat(&[&[1.0, f64::NAN], &[1.0, 2.0]]);
        assert!(lstsq(&x, &[1.0, 2.0]).is_err());
        let x = mat(&[&[1.0, 2.0]]);
        assert!(lstsq(&x, &[1.0]).is_err());
        let x = mat(&[&[1.0], &[1.0]]);
        assert!(lstsq(&x, &[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        // a^T b^T where a^T is 3x2 stored as a (2x3)... use a as op(a)= a^T: (3x2)
        let mut c = vec![0.0; 9];
        gemm(true, true, 3, 2, 3, 1.0, &a, &b, 0.0, &mut c);
        // a^T = [[1,4],[2,5],[3,6]], b^T = [[1,0,1],[0,1,1]]
        assert_eq!(c, vec![1.0, 4.0, 5.0, 2.0, 5.0, 7.0, 3.0, 6.0, 9.0]);
    }
}
