//! Linear constraint systems built from parallelogram sets.
//!
//! Each parallelogram `(i, j, m, n)` contributes the row `e_i + e_j − e_m − e_n`
//! of `A(P)`. The ground states of the effective loss are the null space of
//! `A(P)`, whose dimension is at least 2 (translations and the ramp
//! `0, 1, …, p−1` always solve every constraint).
//!
//! The Hessian of `ℓ0` is taken as `H = (2/Z0) AᵀA`, which makes
//! `ℓ0 / Z0 = ½ Rᵀ H R` hold exactly; eigenvalues are therefore
//! `λ_i = (2/Z0) σ_i²`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::domain::{split, Fraction, TaskSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::par::Execution;
use crate::parallelogram::{permissible_set, Parallelogram, ParallelogramSet};
use crate::rng;

/// Singular values at or below `RANK_TOL · σ_max` count as zero.
pub const RANK_TOL: f64 = 1e-8;

/// Eigenvalues of `H` at or below `EIGEN_TOL · λ_max` count as zero. Looser
/// than `RANK_TOL²` to absorb rounding in the eigensolver.
pub const EIGEN_TOL: f64 = 1e-12;

/// Signed incidence rows of `A(P)`, one per parallelogram in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintMatrix {
    pub rows: Array2<f64>,
    pub p: usize,
}

impl ConstraintMatrix {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn singular_values(&self) -> Vec<f64> {
        if self.is_empty() {
            return vec![0.0; self.p];
        }
        linalg::singular_values(&self.rows)
    }
}

/// `e_i + e_j − e_m − e_n`; repeated indices accumulate.
pub fn constraint_row(q: &Parallelogram, p: usize) -> Array1<f64> {
    let mut row = Array1::zeros(p);
    row[q.i] += 1.0;
    row[q.j] += 1.0;
    row[q.m] -= 1.0;
    row[q.n] -= 1.0;
    row
}

pub fn build_a(set: &ParallelogramSet, p: usize) -> ConstraintMatrix {
    let mut rows = Array2::zeros((set.len(), p));
    for (r, q) in set.iter().enumerate() {
        rows.row_mut(r).assign(&constraint_row(q, p));
    }
    ConstraintMatrix { rows, p }
}

pub fn nullity(a: &ConstraintMatrix, tol: f64) -> usize {
    linalg::nullity_of(&a.singular_values(), tol)
}

pub fn rank(a: &ConstraintMatrix, tol: f64) -> usize {
    a.p - nullity(a, tol)
}

/// `H = (2/Z0) AᵀA`.
pub fn hessian_of(a: &ConstraintMatrix, z0: f64) -> Result<Array2<f64>> {
    if !(z0 > 0.0 && z0.is_finite()) {
        return Err(Error::ZeroNorm);
    }
    Ok(a.rows.t().dot(&a.rows) * (2.0 / z0))
}

pub fn hessian(set: &ParallelogramSet, p: usize, z0: f64) -> Result<Array2<f64>> {
    hessian_of(&build_a(set, p), z0)
}

#[derive(Clone, Debug)]
pub struct SpectralSummary {
    /// Ascending `σ_1 ≤ … ≤ σ_p`.
    pub singular_values: Vec<f64>,
    pub nullity: usize,
    /// `λ_i = (2/Z0) σ_i²`, ascending, matched with `eigenvectors` columns.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Array2<f64>,
    /// `1/λ_3`, absent when the third eigenvalue vanishes.
    pub t_h: Option<f64>,
    pub tol: f64,
}

pub fn spectral_summary(a: &ConstraintMatrix, z0: f64, tol: f64) -> Result<SpectralSummary> {
    let singular_values = a.singular_values();
    let nullity = linalg::nullity_of(&singular_values, tol);
    let eig = linalg::sym_eigen(&hessian_of(a, z0)?);
    let t_h = if nullity <= 2 && a.p >= 3 { Some(1.0 / eig.values[2]) } else { None };
    Ok(SpectralSummary {
        singular_values,
        nullity,
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
        t_h,
        tol,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timescale {
    pub lambda3: f64,
    /// `1/λ_3`.
    pub t_h: f64,
    /// `1/(λ_3 η)` steps.
    pub n_h: f64,
}

/// Slowest relaxation time of `dR/dt = −HR` and its step count at step size `eta`.
pub fn slowest_timescale(h: &Array2<f64>, eta: f64) -> Result<Timescale> {
    if h.nrows() < 3 {
        return Err(Error::Shape(format!("need at least 3 eigenvalues, got {}", h.nrows())));
    }
    if !(eta > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {eta}")));
    }
    let eig = linalg::sym_eigen(h);
    let max = eig.values.last().copied().unwrap_or(0.0).max(0.0);
    let lambda3 = eig.values[2];
    if max == 0.0 || lambda3 <= EIGEN_TOL * max {
        let nullity = eig.values.iter().filter(|&&l| l <= EIGEN_TOL * max).count();
        return Err(Error::Unconstrained { nullity, lambda3 });
    }
    Ok(Timescale { lambda3, t_h: 1.0 / lambda3, n_h: 1.0 / (lambda3 * eta) })
}

/// One point of the critical-fraction curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub fraction: f64,
    /// Share of trials whose training set pins the linear representation
    /// (nullity exactly 2).
    pub probability: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Monte-Carlo estimate of `Pr[nullity(A(P0(D))) = 2]` per fraction.
///
/// Trial `t` of fraction number `f` uses the split seed
/// `derive_seed(seed, (f << 32) | t)`.
pub fn critical_fraction_mc(
    spec: &TaskSpec,
    fractions: &[Fraction],
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<CriticalPoint>> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let jobs: Vec<(usize, usize)> =
        (0..fractions.len()).flat_map(|f| (0..trials).map(move |t| (f, t))).collect();
    let outcomes = exec.map(&jobs, |&(f, t)| -> Result<bool> {
        let s = split(spec, fractions[f], rng::derive_seed(seed, ((f as u64) << 32) | t as u64))?;
        let a = build_a(&permissible_set(&s.train, spec), spec.p());
        Ok(nullity(&a, RANK_TOL) == 2)
    });
    let mut hits = vec![0usize; fractions.len()];
    for (&(f, _), outcome) in jobs.iter().zip(outcomes) {
        if outcome? {
            hits[f] += 1;
        }
    }
    Ok(fractions
        .iter()
        .zip(hits)
        .map(|(fr, h)| CriticalPoint { fraction: fr.value(), probability: h as f64 / trials as f64, trials, seed })
        .collect())
}

pub const CRITICAL_CSV_HEADER: &str = "fraction,probability,trials,seed";

pub fn critical_csv(points: &[CriticalPoint]) -> String {
    let mut out = String::from(CRITICAL_CSV_HEADER);
    out.push('\n');
    for pt in points {
        out.push_str(&format!("{},{},{},{}\n", pt.fraction, pt.probability, pt.trials, pt.seed));
    }
    out
}

/// Fraction at which a curve first reaches `level`, linearly interpolated
/// between neighbouring points. `None` if it never does.
pub fn crossing(points: &[CriticalPoint], level: f64) -> Option<f64> {
    let first = points.first()?;
    if first.probability >= level {
        return Some(first.fraction);
    }
    points.windows(2).find(|w| w[1].probability >= level).map(|w| {
        let (a, b) = (w[0], w[1]);
        a.fraction + (level - a.probability) / (b.probability - a.probability) * (b.fraction - a.fraction)
    })
}
