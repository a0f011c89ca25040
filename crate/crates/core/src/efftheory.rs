//! Effective theory of representation dynamics.
//!
//! Embeddings descend the effective loss
//!
//! ```text
//! ℓ_eff = ℓ0 / Z0,   ℓ0 = Σ_{(i,j,m,n)∈P} |E_i + E_j − E_m − E_n|²,   Z0 = Σ_k |E_k|²
//! ```
//!
//! by explicit Euler steps on the raw embeddings. The gradient is orthogonal
//! to `R`, so `Z0` is constant along the exact flow; Euler adds exactly
//! `dt² |∇ℓ_eff|²` to `Z0` per step. The translation part `C = Σ_k E_k`
//! evolves as `dC/dt = (2 ℓ0 / Z0²) C`, so it is conserved exactly only
//! when `C = 0` (e.g. after [`normalize`]).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::TaskSpec;
use crate::error::{Error, Result};
use crate::linalg;
use crate::parallelogram::{MatrixNorm, ParallelogramSet, ReprMode, Representation, RqiMeter, DEFAULT_DELTA};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffLoss {
    pub l_eff: f64,
    pub l0: f64,
    pub z0: f64,
}

fn require_vectors(r: &Representation) -> Result<usize> {
    match r.mode() {
        ReprMode::Vector { dim } => Ok(dim),
        ReprMode::Matrix { .. } => Err(Error::Unsupported("effective theory needs vector embeddings")),
    }
}

fn z0_of(data: &Array2<f64>) -> f64 {
    data.iter().map(|x| x * x).sum()
}

fn l0_of(data: &Array2<f64>, set: &ParallelogramSet) -> f64 {
    let dim = data.ncols();
    let mut l0 = 0.0;
    for q in set {
        for c in 0..dim {
            let r = data[[q.i, c]] + data[[q.j, c]] - data[[q.m, c]] - data[[q.n, c]];
            l0 += r * r;
        }
    }
    l0
}

pub fn eff_loss(r: &Representation, set: &ParallelogramSet) -> Result<EffLoss> {
    require_vectors(r)?;
    let z0 = z0_of(r.data());
    if z0 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let l0 = l0_of(r.data(), set);
    Ok(EffLoss { l_eff: l0 / z0, l0, z0 })
}

/// `∂ℓ_eff/∂E = (1/Z0) ∂ℓ0/∂E − (2 ℓ0 / Z0²) E`.
pub fn eff_grad(r: &Representation, set: &ParallelogramSet) -> Result<Array2<f64>> {
    require_vectors(r)?;
    grad_of(r.data(), set)
}

fn grad_of(data: &Array2<f64>, set: &ParallelogramSet) -> Result<Array2<f64>> {
    let z0 = z0_of(data);
    if z0 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dim = data.ncols();
    let mut dl0 = Array2::<f64>::zeros(data.raw_dim());
    let mut l0 = 0.0;
    for q in set {
        for c in 0..dim {
            let r = data[[q.i, c]] + data[[q.j, c]] - data[[q.m, c]] - data[[q.n, c]];
            l0 += r * r;
            dl0[[q.i, c]] += 2.0 * r;
            dl0[[q.j, c]] += 2.0 * r;
            dl0[[q.m, c]] -= 2.0 * r;
            dl0[[q.n, c]] -= 2.0 * r;
        }
    }
    let scale = 2.0 * l0 / (z0 * z0);
    Ok(dl0 / z0 - data * scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservedPair {
    /// `C = Σ_k E_k`.
    pub c: Vec<f64>,
    /// `Z0 = Σ_k |E_k|²`.
    pub z0: f64,
}

pub fn conserved(r: &Representation) -> ConservedPair {
    let c = r.data().sum_axis(ndarray::Axis(0)).to_vec();
    ConservedPair { c, z0: z0_of(r.data()) }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub steps: usize,
    pub dt: f64,
    /// Record a snapshot every `stride` steps (plus the first and last step).
    pub stride: usize,
    /// Tolerance for the RQI column.
    pub delta: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { steps: 10_000, dt: 1e-3, stride: 10, delta: DEFAULT_DELTA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSnapshot {
    pub step: usize,
    pub t: f64,
    pub l_eff: f64,
    pub rqi: f64,
    pub conserved: ConservedPair,
    pub embeddings: Vec<Vec<f64>>,
}

impl FlowSnapshot {
    pub fn c_norm(&self) -> f64 {
        self.conserved.c.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub snapshots: Vec<FlowSnapshot>,
    pub last: Representation,
    /// First step whose RQI exceeded 0.95, checked every step.
    pub step_rqi95: Option<usize>,
}

/// Explicit-Euler integration of `dE/dt = −∂ℓ_eff/∂E`.
pub fn flow(r0: &Representation, set: &ParallelogramSet, cfg: &FlowConfig) -> Result<Trajectory> {
    require_vectors(r0)?;
    if cfg.steps == 0 || !(cfg.dt > 0.0) {
        return Err(Error::Config("flow needs steps >= 1 and dt > 0".into()));
    }
    let spec: TaskSpec = *set.task();
    let meter = RqiMeter::new(&spec, cfg.delta, MatrixNorm::default())?;
    let mode = r0.mode();
    let mut data = r0.data().clone();
    let stride = cfg.stride.max(1);
    let mut snapshots = Vec::new();
    let mut step_rqi95 = None;

    let snapshot = |step: usize, data: &Array2<f64>, rqi: f64| -> Result<FlowSnapshot> {
        let r = Representation::new(mode, data.clone())?;
        let loss = eff_loss(&r, set)?;
        Ok(FlowSnapshot {
            step,
            t: step as f64 * cfg.dt,
            l_eff: loss.l_eff,
            rqi,
            conserved: conserved(&r),
            embeddings: data.rows().into_iter().map(|x| x.to_vec()).collect(),
        })
    };

    let rqi0 = meter.measure(r0);
    if rqi0 > 0.95 {
        step_rqi95 = Some(0);
    }
    snapshots.push(snapshot(0, &data, rqi0)?);
    for step in 1..=cfg.steps {
        let g = grad_of(&data, set)?;
        data.scaled_add(-cfg.dt, &g);
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step, what: "non-finite embedding".into() });
        }
        let record = step % stride == 0 || step == cfg.steps;
        if step_rqi95.is_none() || record {
            let r = Representation::new(mode, data.clone())?;
            let rqi = meter.measure(&r);
            if step_rqi95.is_none() && rqi > 0.95 {
                step_rqi95 = Some(step);
            }
            if record {
                snapshots.push(snapshot(step, &data, rqi)?);
            }
        }
    }
    Ok(Trajectory { snapshots, last: Representation::new(mode, data)?, step_rqi95 })
}

/// Euler integration of the linearised dynamics `dR/dt = −HR` (fixed `Z0`).
pub fn linear_flow(r0: &Representation, h: &Array2<f64>, steps: usize, dt: f64) -> Result<Representation> {
    require_vectors(r0)?;
    check_hessian(r0, h)?;
    let mut data = r0.data().clone();
    for _ in 0..steps {
        let hr = h.dot(&data);
        data.scaled_add(-dt, &hr);
    }
    Representation::new(r0.mode(), data)
}

/// Closed-form solution of `dR/dt = −HR`: `R(t) = Σ_i v_i (v_iᵀ R0) e^{−λ_i t}`.
pub fn analytic_flow(r0: &Representation, h: &Array2<f64>, t: f64) -> Result<Representation> {
    require_vectors(r0)?;
    check_hessian(r0, h)?;
    let eig = linalg::sym_eigen(h);
    let coeffs = eig.vectors.t().dot(r0.data());
    let decay = Array2::from_diag(&ndarray::Array1::from_iter(eig.values.iter().map(|l| (-l * t).exp())));
    let data = eig.vectors.dot(&decay).dot(&coeffs);
    Representation::new(r0.mode(), data)
}

fn check_hessian(r: &Representation, h: &Array2<f64>) -> Result<()> {
    if h.dim() != (r.p(), r.p()) {
        return Err(Error::Shape(format!("Hessian is {:?}, expected {p}×{p}", h.dim(), p = r.p())));
    }
    Ok(())
}

/// Zero mean and `(1/p) Σ |Ẽ_k|² = 1`.
pub fn normalize(r: &Representation) -> Result<Representation> {
    require_vectors(r)?;
    let p = r.p() as f64;
    let mean = r.data().mean_axis(ndarray::Axis(0)).expect("p >= 1");
    let centered = r.data() - &mean;
    let spread = (centered.iter().map(|x| x * x).sum::<f64>() / p).sqrt();
    if spread == 0.0 || !spread.is_finite() {
        return Err(Error::ZeroVariance);
    }
    Representation::new(r.mode(), centered / spread)
}

/// i.i.d. `U[−scale/2, scale/2)` vector embeddings.
pub fn init_uniform(p: usize, dim: usize, scale: f64, seed: u64) -> Representation {
    let mut g = rng::rng(seed);
    let data = Array2::from_shape_fn((p, dim), |_| rng::uniform(&mut g, -scale / 2.0, scale / 2.0));
    Representation::vectors(data).expect("finite")
}

pub const TRAJECTORY_CSV_HEADER: &str = "step,t,l_eff,rqi,Z0,C_norm";

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    for s in &traj.snapshots {
        out.push_str(&format!("{},{},{},{},{},{}\n", s.step, s.t, s.l_eff, s.rqi, s.conserved.z0, s.c_norm()));
    }
    out
}

/// Per-embedding snapshot file: `step,k,e0,e1,…`.
pub fn embeddings_csv(traj: &Trajectory) -> String {
    let dim = traj.last.mode().width();
    let mut out = String::from("step,k");
    for c in 0..dim {
        out.push_str(&format!(",e{c}"));
    }
    out.push('\n');
    for s in &traj.snapshots {
        for (k, e) in s.embeddings.iter().enumerate() {
            out.push_str(&format!("{},{}", s.step, k));
            for x in e {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TaskSpec;
    use crate::parallelogram::full_permissible_set;
    use approx::assert_abs_diff_eq;

    fn p0(p: usize) -> ParallelogramSet {
        full_permissible_set(&TaskSpec::addition(p).unwrap())
    }

    #[test]
    fn p4_loss_by_hand() {
        // E = [0,1,2,4]; residuals of (0,2,1,1), (0,3,1,2), (1,3,2,2) are 0, 1, 1
        let r = Representation::scalars(&[0.0, 1.0, 2.0, 4.0]).unwrap();
        let loss = eff_loss(&r, &p0(4)).unwrap();
        assert_abs_diff_eq!(loss.l0, 2.0);
        assert_abs_diff_eq!(loss.z0, 21.0);
        assert_abs_diff_eq!(loss.l_eff, 2.0 / 21.0);
    }

    #[test]
    fn linear_representation_is_a_ground_state() {
        let r = Representation::linear(10, &[0.2, -0.1], &[0.3, 0.05]).unwrap();
        assert_abs_diff_eq!(eff_loss(&r, &p0(10)).unwrap().l_eff, 0.0, epsilon = 1e-28);
        let g = eff_grad(&r, &p0(10)).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn scale_invariance() {
        let r = init_uniform(10, 2, 1.0, 3);
        let scaled = Representation::vectors(r.data() * 7.5).unwrap();
        assert_abs_diff_eq!(
            eff_loss(&r, &p0(10)).unwrap().l_eff,
            eff_loss(&scaled, &p0(10)).unwrap().l_eff,
            epsilon = 1e-12
        );
    }

    #[test]
    fn gradient_is_orthogonal_to_r() {
        let r = init_uniform(10, 1, 1.0, 9);
        let g = eff_grad(&r, &p0(10)).unwrap();
        let dot: f64 = g.iter().zip(r.data().iter()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn zero_norm_is_an_error() {
        let r = Representation::scalars(&[0.0; 4]).unwrap();
        assert!(matches!(eff_loss(&r, &p0(4)), Err(Error::ZeroNorm)));
    }

    #[test]
    fn empty_constraints_leave_r_fixed() {
        let r = init_uniform(6, 1, 1.0, 2);
        let empty = ParallelogramSet::empty(TaskSpec::addition(6).unwrap());
        let cfg = FlowConfig { steps: 100, ..Default::default() };
        let traj = flow(&r, &empty, &cfg).unwrap();
        assert_eq!(traj.last, r);
    }

    #[test]
    fn euler_z0_drift_is_sum_of_squared_steps() {
        // Z0(n+1) = Z0(n) + dt² |g|² exactly, because g ⟂ R
        let r0 = init_uniform(10, 1, 1.0, 5);
        let set = p0(10);
        let dt = 1e-3;
        let mut data = r0.data().clone();
        let mut predicted = z0_of(&data);
        for _ in 0..200 {
            let g = grad_of(&data, &set).unwrap();
            predicted += dt * dt * g.iter().map(|x| x * x).sum::<f64>();
            data.scaled_add(-dt, &g);
        }
        assert_abs_diff_eq!(z0_of(&data), predicted, epsilon = 1e-12);
    }

    #[test]
    fn centered_start_keeps_c_at_zero() {
        let r0 = normalize(&init_uniform(10, 1, 1.0, 5)).unwrap();
        let traj = flow(&r0, &p0(10), &FlowConfig { steps: 2000, ..Default::default() }).unwrap();
        for s in &traj.snapshots {
            assert!(s.c_norm() < 1e-12);
        }
    }

    #[test]
    fn loss_descends_and_rqi_rises() {
        let r0 = init_uniform(10, 1, 1.0, 8);
        let traj = flow(&r0, &p0(10), &FlowConfig { steps: 3000, stride: 1, ..Default::default() }).unwrap();
        for w in traj.snapshots.windows(2) {
            assert!(w[1].l_eff <= w[0].l_eff + 1e-12);
        }
        assert!(traj.snapshots.last().unwrap().rqi > traj.snapshots[0].rqi);
    }

    #[test]
    fn normalize_properties() {
        let r = init_uniform(10, 3, 2.0, 1);
        let n = normalize(&r).unwrap();
        let mean = n.data().mean_axis(ndarray::Axis(0)).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-14));
        assert_abs_diff_eq!(z0_of(n.data()) / 10.0, 1.0, epsilon = 1e-12);
        let twice = normalize(&n).unwrap();
        for (a, b) in twice.data().iter().zip(n.data().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        let flat = Representation::scalars(&[1.5; 5]).unwrap();
        assert!(matches!(normalize(&flat), Err(Error::ZeroVariance)));
    }

    #[test]
    fn analytic_flow_at_zero_and_kernel() {
        let r0 = init_uniform(10, 1, 1.0, 4);
        let z0 = z0_of(r0.data());
        let h = crate::lintheory::hessian(&p0(10), 10, z0).unwrap();
        let same = analytic_flow(&r0, &h, 0.0).unwrap();
        for (a, b) in same.data().iter().zip(r0.data().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // mean and ramp components survive
        let later = analytic_flow(&r0, &h, 5.0).unwrap();
        let ramp: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let proj = |r: &Representation, v: &[f64]| -> f64 { r.data().column(0).iter().zip(v).map(|(a, b)| a * b).sum() };
        let ones = vec![1.0; 10];
        assert_abs_diff_eq!(proj(&later, &ones), proj(&r0, &ones), epsilon = 1e-10);
        assert_abs_diff_eq!(proj(&later, &ramp), proj(&r0, &ramp), epsilon = 1e-10);
    }

    #[test]
    fn trajectory_csv_header() {
        let r0 = init_uniform(6, 1, 1.0, 4);
        let traj = flow(&r0, &p0(6), &FlowConfig { steps: 20, stride: 10, ..Default::default() }).unwrap();
        let csv = trajectory_csv(&traj);
        assert!(csv.starts_with("step,t,l_eff,rqi,Z0,C_norm\n0,0,"));
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(embeddings_csv(&traj).lines().count(), 1 + 3 * 6);
    }
}
