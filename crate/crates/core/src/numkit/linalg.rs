use super::mat::Mat;
use crate::error::{Error, Result};

/// Multiples of the mean diagonal added, in order, when a factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = A + jitter·I`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Mat,
    jitter: f64,
}

fn check_symmetric(a: &Mat) -> Result<()> {
    let n = a.rows();
    let tol = 1e-10 * a.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (a[(i, j)] - a[(j, i)]).abs();
            if gap > tol || gap.is_nan() {
                return Err(Error::NotSymmetric { row: i, col: j, gap });
            }
        }
    }
    Ok(())
}

fn try_factor(a: &Mat, jitter: f64) -> std::result::Result<Mat, usize> {
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let row_j = l.row(j)[..j].to_vec();
        let d = a[(j, j)] + jitter - row_j.iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let s: f64 = l.row(i)[..j].iter().zip(&row_j).map(|(x, y)| x * y).sum();
            l[(i, j)] = (a[(i, j)] - s) / djj;
        }
    }
    Ok(l)
}

impl Cholesky {
    /// Factor a symmetric positive (semi)definite matrix, escalating through
    /// [`JITTER_LADDER`] (scaled by the mean diagonal) before giving up.
    pub fn factor(a: &Mat) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::DimensionMismatch {
                context: "cholesky (square)",
                expected: a.rows(),
                got: a.cols(),
            });
        }
        check_symmetric(a)?;
        let n = a.rows();
        if n == 0 {
            return Ok(Self {
                l: Mat::zeros(0, 0),
                jitter: 0.0,
            });
        }
        let mut pivot = match try_factor(a, 0.0) {
            Ok(l) => return Ok(Self { l, jitter: 0.0 }),
            Err(p) => p,
        };
        let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
        let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut jitter = 0.0;
        for step in JITTER_LADDER {
            jitter = step * base;
            match try_factor(a, jitter) {
                Ok(l) => return Ok(Self { l, jitter }),
                Err(p) => pivot = p,
            }
        }
        Err(Error::NotPositiveDefinite { pivot, jitter })
    }

    pub fn l(&self) -> &Mat {
        &self.l
    }

    /// Jitter that had to be added to the diagonal (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solve `L z = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut z = b.to_vec();
        for i in 0..n {
            let row = self.l.row(i);
            let s: f64 = row[..i].iter().zip(&z[..i]).map(|(x, y)| x * y).sum();
            z[i] = (z[i] - s) / row[i];
        }
        z
    }

    /// Solve `Lᵀ x = z`.
    pub fn solve_upper(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(z.len(), n);
        let mut x = z.to_vec();
        for i in (0..n).rev() {
            let mut s = 0.0;
            for k in (i + 1)..n {
                s += self.l[(k, i)] * x[k];
            }
            x[i] = (x[i] - s) / self.l[(i, i)];
        }
        x
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Solve `A X = B` column by column.
    pub fn solve_mat(&self, b: &Mat) -> Mat {
        assert_eq!(b.rows(), self.dim());
        let mut out = Mat::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let x = self.solve_vec(&b.col(j));
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// `L⁻¹ B`, used for quadratic forms `bᵀA⁻¹b = ‖L⁻¹b‖²`.
    pub fn solve_lower_mat(&self, b: &Mat) -> Mat {
        assert_eq!(b.rows(), self.dim());
        let mut out = Mat::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let z = self.solve_lower(&b.col(j));
            for (i, v) in z.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    pub fn inverse(&self) -> Mat {
        self.solve_mat(&Mat::identity(self.dim()))
    }

    /// `log |A + jitter·I|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> Mat {
        self.l.matmul_t(&self.l)
    }
}

pub fn cholesky(a: &Mat) -> Result<Mat> {
    Cholesky::factor(a).map(|c| c.l)
}

pub fn solve_psd(a: &Mat, b: &Mat) -> Result<Mat> {
    if b.rows() != a.rows() {
        return Err(Error::DimensionMismatch {
            context: "solve_psd rhs rows",
            expected: a.rows(),
            got: b.rows(),
        });
    }
    Ok(Cholesky::factor(a)?.solve_mat(b))
}

pub fn solve_psd_vec(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows() {
        return Err(Error::DimensionMismatch {
            context: "solve_psd rhs length",
            expected: a.rows(),
            got: b.len(),
        });
    }
    Ok(Cholesky::factor(a)?.solve_vec(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;
    use proptest::prelude::*;

    fn random_psd(n: usize, stream: &mut RngStream) -> Mat {
        let b = Mat::from_vec(n, n, stream.standard_normal(n * n));
        let mut a = b.t_matmul(&b);
        a.add_diag(1e-6);
        a
    }

    #[test]
    fn identity_factor_is_identity() {
        let l = cholesky(&Mat::identity(3)).unwrap();
        assert_eq!(l, Mat::identity(3));
    }

    #[test]
    fn two_by_two_known_factor() {
        let a = Mat::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        let expected = Mat::from_rows(&[[2.0, 0.0], [1.0, 2f64.sqrt()]]);
        assert!(l.sub(&expected).max_abs() < 1e-15);
        // L·Lᵀ by hand: [[4, 2], [2, 1 + 2]]
        assert!(l.matmul_t(&l).sub(&a).max_abs() < 1e-14);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = Mat::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let a = Mat::from_rows(&[[1.0, 0.5], [0.0, 1.0]]);
        assert!(matches!(cholesky(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn singular_gram_matrix_needs_jitter() {
        // rank one
        let a = Mat::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let c = Cholesky::factor(&a).unwrap();
        assert!(c.jitter() > 0.0);
        assert!(c.reconstruct().sub(&a).max_abs() < 1e-6);
    }

    #[test]
    fn solve_simple_cases() {
        let b = vec![3.0, -1.0];
        assert_eq!(solve_psd_vec(&Mat::identity(2), &b).unwrap(), b);
        let d = Mat::from_rows(&[[2.0, 0.0], [0.0, 4.0]]);
        let x = solve_psd_vec(&d, &[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
        assert!(solve_psd_vec(&d, &[1.0]).is_err());
    }

    #[test]
    fn solve_residual_on_random_psd() {
        let mut s = RngStream::new(11);
        let a = random_psd(5, &mut s);
        let b = s.standard_normal(5);
        let x = solve_psd_vec(&a, &b).unwrap();
        let r: Vec<f64> = a.matvec(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(crate::numkit::norm2(&r) < 1e-8 * crate::numkit::norm2(&b));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn reconstruct_round_trips(n in 1usize..=20, seed in any::<u64>()) {
            let mut s = RngStream::new(seed);
            let a = random_psd(n, &mut s);
            let c = Cholesky::factor(&a).unwrap();
            let err = c.reconstruct().sub(&a).frobenius_norm() / a.frobenius_norm();
            prop_assert!(err < 1e-8, "relative error {err}");
        }

        #[test]
        fn solve_matches_explicit_inverse(n in 1usize..=6, seed in any::<u64>()) {
            let mut s = RngStream::new(seed);
            let mut a = random_psd(n, &mut s);
            a.add_diag(0.5);
            let b = s.standard_normal(n);
            let x = solve_psd_vec(&a, &b).unwrap();
            // Gauss-Jordan inverse, independent of the Cholesky path
            let inv = gauss_jordan_inverse(&a);
            let y = inv.matvec(&b);
            for (u, v) in x.iter().zip(&y) {
                prop_assert!((u - v).abs() <= 1e-8 * (1.0 + v.abs()));
            }
        }
    }

    fn gauss_jordan_inverse(a: &Mat) -> Mat {
        let n = a.rows();
        let mut m = a.clone();
        let mut inv = Mat::identity(n);
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| m[(i, c)].abs().total_cmp(&m[(j, c)].abs()))
                .unwrap();
            for k in 0..n {
                let t = m[(c, k)];
                m[(c, k)] = m[(p, k)];
                m[(p, k)] = t;
                let t = inv[(c, k)];
                inv[(c, k)] = inv[(p, k)];
                inv[(p, k)] = t;
            }
            let piv = m[(c, c)];
            for k in 0..n {
                m[(c, k)] /= piv;
                inv[(c, k)] /= piv;
            }
            for r in 0..n {
                if r != c {
                    let f = m[(r, c)];
                    for k in 0..n {
                        m[(r, k)] -= f * m[(c, k)];
                        inv[(r, k)] -= f * inv[(c, k)];
                    }
                }
            }
        }
        inv
    }
}
