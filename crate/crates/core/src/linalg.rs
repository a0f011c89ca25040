//! Small dense decompositions.
//!
//! The matrices in this crate are tiny (at most a few thousand rows by
//! `MAX_P` columns), so both routines are plain Jacobi iterations.

use ndarray::{Array1, Array2, Axis};

const MAX_SWEEPS: usize = 100;

/// Thin SVD `A = U diag(s) Vᵀ` with singular values in ascending order.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m × n`; columns belonging to zero singular values are zero.
    pub u: Array2<f64>,
    pub singular_values: Vec<f64>,
    /// `n × n`, orthogonal.
    pub v: Array2<f64>,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Array2<f64>) -> Svd {
    let (m, n) = a.dim();
    let mut w = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let (x, y) = (w[[r, i]], w[[r, j]]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut w, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|k| w.column(k).dot(&w.column(k)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[x].total_cmp(&norms[y]));

    let mut u = Array2::zeros((m, n));
    let mut v_sorted = Array2::zeros((n, n));
    let mut singular_values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        singular_values.push(sigma);
        v_sorted.column_mut(dst).assign(&v.column(src));
        if sigma > 0.0 {
            u.column_mut(dst).assign(&(&w.column(src) / sigma));
        }
    }
    Svd { u, singular_values, v: v_sorted }
}

fn rotate_columns(x: &mut Array2<f64>, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..x.nrows() {
        let (a, b) = (x[[r, i]], x[[r, j]]);
        x[[r, i]] = c * a - s * b;
        x[[r, j]] = s * a + c * b;
    }
}

/// Singular values of `a`, ascending.
pub fn singular_values(a: &Array2<f64>) -> Vec<f64> {
    svd(a).singular_values
}

/// Count of singular values at or below `rel_tol · σ_max`. A matrix without
/// rows (or all zero) has full nullity.
pub fn nullity_of(singular_values: &[f64], rel_tol: f64) -> usize {
    let max = singular_values.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return singular_values.len();
    }
    singular_values.iter().filter(|&&s| s <= rel_tol * max).count()
}

/// Symmetric eigendecomposition with eigenvalues ascending and eigenvectors
/// as the matching columns.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Array2<f64>,
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix.
pub fn sym_eigen(h: &Array2<f64>) -> SymEigen {
    let n = h.nrows();
    assert_eq!(n, h.ncols(), "sym_eigen needs a square matrix");
    let mut a = h.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        if off.sqrt() <= 1e-15 * scale || scale == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                rotate_columns(&mut v, p, q, c, s);
            }
        }
    }
    let diag: Array1<f64> = a.diag().to_owned();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| diag[x].total_cmp(&diag[y]));
    let values = order.iter().map(|&k| diag[k]).collect();
    let vectors = v.select(Axis(1), &order);
    SymEigen { values, vectors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_matrix(m: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut r = crate::rng::rng(seed);
        Array2::from_shape_fn((m, n), |_| crate::rng::uniform(&mut r, -1.0, 1.0))
    }

    #[test]
    fn svd_reconstructs() {
        for (m, n) in [(5, 3), (3, 5), (8, 8), (1, 4)] {
            let a = random_matrix(m, n, (m * 10 + n) as u64);
            let d = svd(&a);
            let sigma = Array2::from_diag(&Array1::from(d.singular_values.clone()));
            let back = d.u.dot(&sigma).dot(&d.v.t());
            for (x, y) in back.iter().zip(a.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
            let vtv = d.v.t().dot(&d.v);
            for (x, y) in vtv.iter().zip(Array2::<f64>::eye(n).iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
            assert!(d.singular_values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn singular_values_match_nalgebra() {
        for seed in 0..10 {
            let a = random_matrix(7, 5, seed);
            let na = nalgebra::DMatrix::from_fn(7, 5, |r, c| a[[r, c]]);
            let mut expected: Vec<f64> = na.singular_values().iter().cloned().collect();
            expected.sort_by(f64::total_cmp);
            for (x, y) in singular_values(&a).iter().zip(&expected) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rank_deficient_nullity() {
        let a = array![[1.0, -2.0, 1.0, 0.0]];
        assert_eq!(nullity_of(&singular_values(&a), 1e-8), 3);
        let empty = Array2::<f64>::zeros((0, 6));
        assert_eq!(nullity_of(&singular_values(&empty), 1e-8), 6);
    }

    #[test]
    fn eigen_matches_nalgebra() {
        for seed in 0..10 {
            let b = random_matrix(6, 6, 100 + seed);
            let h = b.t().dot(&b);
            let e = sym_eigen(&h);
            let nh = nalgebra::DMatrix::from_fn(6, 6, |r, c| h[[r, c]]);
            let mut expected: Vec<f64> = nh.symmetric_eigen().eigenvalues.iter().cloned().collect();
            expected.sort_by(f64::total_cmp);
            for (x, y) in e.values.iter().zip(&expected) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
            // H v = λ v
            for k in 0..6 {
                let v = e.vectors.column(k);
                let hv = h.dot(&v);
                for (a, b) in hv.iter().zip(v.iter()) {
                    assert_abs_diff_eq!(*a, e.values[k] * b, epsilon = 1e-10);
                }
            }
        }
    }
}
