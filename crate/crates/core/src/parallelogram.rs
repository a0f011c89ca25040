//! Parallelogram algebra over a representation.
//!
//! A parallelogram `(i, j, m, n)` asserts `E_i + E_j = E_m + E_n` (vector
//! mode) or `E_i E_j = E_m E_n` (matrix mode). Quadruples are kept in
//! canonical form: for commutative tasks each pair is sorted, the two pairs
//! are ordered lexicographically, and the degenerate `(i,j) = (m,n)` case is
//! never stored. With that convention `|P0| = 3` for `p = 4` and `70` for
//! `p = 10`.
//!
//! Augmentation is one hop: a validation pair is recovered only when it sits
//! in a parallelogram whose other pair is a training sample. Derived samples
//! are not used to derive further samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::domain::{enumerate_samples, label, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::{linalg, lintheory};

/// Default tolerance for calling a quadruple realized.
pub const DEFAULT_DELTA: f64 = 0.01;

type Pair = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Parallelogram {
    pub i: usize,
    pub j: usize,
    pub m: usize,
    pub n: usize,
}

impl Parallelogram {
    /// Canonical parallelogram joining two sample pairs, or `None` when the
    /// pairs coincide.
    pub fn canonical(commutative: bool, a: Pair, b: Pair) -> Option<Self> {
        let sort = |(x, y): Pair| if commutative && y < x { (y, x) } else { (x, y) };
        let (a, b) = (sort(a), sort(b));
        let (first, second) = match a.cmp(&b) {
            std::cmp::Ordering::Equal => return None,
            std::cmp::Ordering::Less => (a, b),
            std::cmp::Ordering::Greater => (b, a),
        };
        Some(Parallelogram { i: first.0, j: first.1, m: second.0, n: second.1 })
    }

    pub fn pairs(&self) -> (Pair, Pair) {
        ((self.i, self.j), (self.m, self.n))
    }

    pub fn indices(&self) -> [usize; 4] {
        [self.i, self.j, self.m, self.n]
    }
}

/// A canonical set of parallelograms for one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelogramSet {
    task: TaskSpec,
    items: BTreeSet<Parallelogram>,
}

impl ParallelogramSet {
    pub fn empty(task: TaskSpec) -> Self {
        ParallelogramSet { task, items: BTreeSet::new() }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    /// Insert the parallelogram joining `a` and `b`; returns whether it was new.
    pub fn insert_pairs(&mut self, a: Pair, b: Pair) -> bool {
        match Parallelogram::canonical(self.task.commutative(), a, b) {
            Some(q) => self.items.insert(q),
            None => false,
        }
    }

    pub fn insert(&mut self, q: Parallelogram) -> bool {
        let (a, b) = q.pairs();
        self.insert_pairs(a, b)
    }

    pub fn contains(&self, q: &Parallelogram) -> bool {
        self.items.contains(q)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parallelogram> + '_ {
        self.items.iter()
    }

    pub fn is_subset(&self, other: &ParallelogramSet) -> bool {
        self.items.is_subset(&other.items)
    }

    /// One `i j m n` line per parallelogram, in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for q in &self.items {
            let _ = writeln!(out, "{} {} {} {}", q.i, q.j, q.m, q.n);
        }
        out
    }

    pub fn from_text(task: TaskSpec, text: &str) -> Result<Self> {
        let mut set = ParallelogramSet::empty(task);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            let [i, j, m, n] = fields[..] else {
                return Err(Error::Config(format!("line {}: expected 4 indices", lineno + 1)));
            };
            if let Some(&index) = [i, j, m, n].iter().find(|&&x| x >= task.p()) {
                return Err(Error::IndexOutOfRange { index, p: task.p() });
            }
            if !set.insert_pairs((i, j), (m, n)) {
                return Err(Error::Config(format!("line {}: degenerate or duplicate", lineno + 1)));
            }
        }
        Ok(set)
    }
}

impl<'a> IntoIterator for &'a ParallelogramSet {
    type Item = &'a Parallelogram;
    type IntoIter = std::collections::btree_set::Iter<'a, Parallelogram>;
    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

/// Embedding layout: one vector per symbol or one `d × d` matrix per symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprMode {
    Vector { dim: usize },
    Matrix { d: usize },
}

impl ReprMode {
    /// Number of stored coordinates per symbol.
    pub fn width(&self) -> usize {
        match *self {
            ReprMode::Vector { dim } => dim,
            ReprMode::Matrix { d } => d * d,
        }
    }
}

/// Learned embeddings `R = [E_0, …, E_{p-1}]`, one row per symbol. Matrix
/// embeddings are stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ReprRepr", into = "ReprRepr")]
pub struct Representation {
    mode: ReprMode,
    data: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct ReprRepr {
    mode: ReprMode,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<ReprRepr> for Representation {
    type Error = Error;
    fn try_from(r: ReprRepr) -> Result<Self> {
        let width = r.mode.width();
        let p = r.rows.len();
        if r.rows.iter().any(|row| row.len() != width) {
            return Err(Error::Shape(format!("every embedding needs {width} entries")));
        }
        let data = Array2::from_shape_vec((p, width), r.rows.concat())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Representation::new(r.mode, data)
    }
}

impl From<Representation> for ReprRepr {
    fn from(r: Representation) -> Self {
        ReprRepr { mode: r.mode, rows: r.data.rows().into_iter().map(|x| x.to_vec()).collect() }
    }
}

impl Representation {
    pub fn new(mode: ReprMode, data: Array2<f64>) -> Result<Self> {
        if data.ncols() != mode.width() {
            return Err(Error::Shape(format!(
                "{:?} needs {} columns, got {}",
                mode,
                mode.width(),
                data.ncols()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("embedding entries must be finite".into()));
        }
        Ok(Representation { mode, data })
    }

    pub fn vectors(data: Array2<f64>) -> Result<Self> {
        let dim = data.ncols();
        Self::new(ReprMode::Vector { dim }, data)
    }

    /// One-dimensional embeddings from a slice.
    pub fn scalars(values: &[f64]) -> Result<Self> {
        Self::vectors(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("shape"))
    }

    pub fn matrices(d: usize, data: Array2<f64>) -> Result<Self> {
        Self::new(ReprMode::Matrix { d }, data)
    }

    /// `E_k = a + k b`.
    pub fn linear(p: usize, a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape("offset and step must have equal length".into()));
        }
        let data = Array2::from_shape_fn((p, a.len()), |(k, c)| a[c] + k as f64 * b[c]);
        Self::vectors(data)
    }

    pub fn mode(&self) -> ReprMode {
        self.mode
    }

    pub fn p(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn row(&self, k: usize) -> ArrayView1<'_, f64> {
        self.data.row(k)
    }

    fn check_task(&self, spec: &TaskSpec) -> Result<()> {
        if self.p() != spec.p() {
            return Err(Error::Shape(format!("representation has {} symbols, task {}", self.p(), spec)));
        }
        Ok(())
    }

    /// Mismatch of one quadruple: `|E_i+E_j−E_m−E_n|` in vector mode,
    /// `‖E_iE_j − E_mE_n‖_F²` in matrix mode (or its square root with
    /// [`MatrixNorm::Frobenius`]).
    pub fn mismatch(&self, q: &Parallelogram, norm: MatrixNorm) -> f64 {
        match self.mode {
            ReprMode::Vector { dim } => {
                let mut acc = 0.0;
                for c in 0..dim {
                    let r = self.data[[q.i, c]] + self.data[[q.j, c]] - self.data[[q.m, c]] - self.data[[q.n, c]];
                    acc += r * r;
                }
                acc.sqrt()
            }
            ReprMode::Matrix { .. } => {
                let left = self.product(q.i, q.j);
                let right = self.product(q.m, q.n);
                let sq: f64 = left.iter().zip(&right).map(|(a, b)| (a - b) * (a - b)).sum();
                match norm {
                    MatrixNorm::SquaredFrobenius => sq,
                    MatrixNorm::Frobenius => sq.sqrt(),
                }
            }
        }
    }

    /// Row-major `E_a E_b` (matrix mode).
    pub fn product(&self, a: usize, b: usize) -> Vec<f64> {
        let ReprMode::Matrix { d } = self.mode else {
            panic!("product() needs matrix embeddings");
        };
        let (ea, eb) = (self.data.row(a), self.data.row(b));
        let mut out = vec![0.0; d * d];
        for r in 0..d {
            for k in 0..d {
                let x = ea[r * d + k];
                for c in 0..d {
                    out[r * d + c] += x * eb[k * d + c];
                }
            }
        }
        out
    }
}

/// How matrix-mode mismatches are compared with `δ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixNorm {
    /// `‖·‖_F² ≤ δ`.
    #[default]
    SquaredFrobenius,
    /// `‖·‖_F ≤ δ`, matching the units of the vector case.
    Frobenius,
}

/// `P0(D)`: quadruples whose two pairs are both in `D` and share a label.
pub fn permissible_set(d: &[Sample], spec: &TaskSpec) -> ParallelogramSet {
    let mut by_label: BTreeMap<usize, BTreeSet<Pair>> = BTreeMap::new();
    for s in d {
        by_label.entry(s.label).or_default().insert(spec.canonical_pair(s.i, s.j));
    }
    let mut set = ParallelogramSet::empty(*spec);
    for pairs in by_label.values() {
        let pairs: Vec<Pair> = pairs.iter().copied().collect();
        for (k, &a) in pairs.iter().enumerate() {
            for &b in &pairs[k + 1..] {
                set.insert_pairs(a, b);
            }
        }
    }
    set
}

/// `P0 = P0(D0)`.
pub fn full_permissible_set(spec: &TaskSpec) -> ParallelogramSet {
    permissible_set(&enumerate_samples(spec), spec)
}

/// `P(R, δ)` with the default matrix norm.
pub fn realized_set(r: &Representation, spec: &TaskSpec, delta: f64) -> Result<ParallelogramSet> {
    realized_set_with(r, spec, delta, MatrixNorm::default())
}

pub fn realized_set_with(
    r: &Representation,
    spec: &TaskSpec,
    delta: f64,
    norm: MatrixNorm,
) -> Result<ParallelogramSet> {
    r.check_task(spec)?;
    Ok(realized_within(r, &full_permissible_set(spec), delta, norm))
}

/// Members of `candidates` whose mismatch in `r` is at most `delta`.
pub fn realized_within(
    r: &Representation,
    candidates: &ParallelogramSet,
    delta: f64,
    norm: MatrixNorm,
) -> ParallelogramSet {
    let mut out = ParallelogramSet::empty(*candidates.task());
    for q in candidates {
        if r.mismatch(q, norm) <= delta {
            out.items.insert(*q);
        }
    }
    out
}

/// `|P(R, δ)| / |P0|`.
pub fn rqi(r: &Representation, spec: &TaskSpec, delta: f64) -> Result<f64> {
    rqi_with(r, spec, delta, MatrixNorm::default())
}

pub fn rqi_with(r: &Representation, spec: &TaskSpec, delta: f64, norm: MatrixNorm) -> Result<f64> {
    r.check_task(spec)?;
    let p0 = full_permissible_set(spec);
    if p0.is_empty() {
        return Err(Error::DegenerateTask);
    }
    Ok(realized_within(r, &p0, delta, norm).len() as f64 / p0.len() as f64)
}

/// Reusable RQI evaluator that caches `P0` for repeated calls.
#[derive(Clone, Debug)]
pub struct RqiMeter {
    p0: ParallelogramSet,
    delta: f64,
    norm: MatrixNorm,
}

impl RqiMeter {
    pub fn new(spec: &TaskSpec, delta: f64, norm: MatrixNorm) -> Result<Self> {
        let p0 = full_permissible_set(spec);
        if p0.is_empty() {
            return Err(Error::DegenerateTask);
        }
        Ok(RqiMeter { p0, delta, norm })
    }

    pub fn measure(&self, r: &Representation) -> f64 {
        let hits = self.p0.iter().filter(|q| r.mismatch(q, self.norm) <= self.delta).count();
        hits as f64 / self.p0.len() as f64
    }
}

/// One-hop augmented training set `D̄(D, P)`, sorted.
pub fn augment(d: &[Sample], p: &ParallelogramSet) -> Vec<Sample> {
    let spec = *p.task();
    let train: BTreeSet<Pair> = d.iter().map(|s| spec.canonical_pair(s.i, s.j)).collect();
    let mut out = train.clone();
    for q in p {
        let (a, b) = q.pairs();
        if train.contains(&b) {
            out.insert(a);
        }
        if train.contains(&a) {
            out.insert(b);
        }
    }
    out.into_iter()
        .map(|(i, j)| Sample { i, j, label: label(&spec, i, j).expect("pair from a valid set") })
        .collect()
}

/// `|D̄(D, P)| / |D0|`.
pub fn predicted_acc(d: &[Sample], p: &ParallelogramSet) -> f64 {
    augment(d, p).len() as f64 / p.task().num_samples() as f64
}

fn require_commutative(spec: &TaskSpec) -> Result<()> {
    if spec.commutative() {
        Ok(())
    } else {
        Err(Error::Unsupported("rank closure needs a commutative task; use nonabelian_closure"))
    }
}

/// Ideal-model closure `P(D)`: `P0(D)` plus every `q ∈ P0` whose constraint
/// row leaves `rank A(P0(D))` unchanged.
pub fn ideal_closure(d: &[Sample], spec: &TaskSpec) -> Result<ParallelogramSet> {
    require_commutative(spec)?;
    let base = permissible_set(d, spec);
    let mut closure = base.clone();
    if base.is_empty() {
        return Ok(closure);
    }
    let p = spec.p();
    let a = lintheory::build_a(&base, p);
    // appending a row keeps the rank iff the row lies in the row space
    let dec = linalg::svd(&a.rows);
    let smax = dec.singular_values.last().copied().unwrap_or(0.0);
    let basis: Vec<usize> = (0..p)
        .filter(|&k| dec.singular_values[k] > lintheory::RANK_TOL * smax)
        .collect();
    for q in &full_permissible_set(spec) {
        if base.contains(q) {
            continue;
        }
        let row = lintheory::constraint_row(q, p);
        let mut residual = row.clone();
        for &k in &basis {
            let v = dec.v.column(k);
            let c = row.dot(&v);
            residual.scaled_add(-c, &v);
        }
        if residual.dot(&residual).sqrt() <= lintheory::RANK_TOL * smax.max(1.0) {
            closure.items.insert(*q);
        }
    }
    Ok(closure)
}

/// Ideal-model RQI bound `|P(D)| / |P0|`.
pub fn rqi_upper(d: &[Sample], spec: &TaskSpec) -> Result<f64> {
    let closure = ideal_closure(d, spec)?;
    let p0 = full_permissible_set(spec);
    if p0.is_empty() {
        return Err(Error::DegenerateTask);
    }
    Ok(closure.len() as f64 / p0.len() as f64)
}

/// Ideal-model accuracy bound `Acc(D, P(D))`.
pub fn acc_upper(d: &[Sample], spec: &TaskSpec) -> Result<f64> {
    Ok(predicted_acc(d, &ideal_closure(d, spec)?))
}

/// Closure of `P0(D)` under group deduction, for non-commutative tasks.
///
/// Three families of equivalence classes are tracked with one union-find:
/// products `E_aE_b`, left ratios `E_x⁻¹E_y` and right ratios `E_xE_y⁻¹`.
/// A known parallelogram `E_aE_b = E_cE_d` merges the two products, and
/// merges `E_c⁻¹E_a` with `E_dE_b⁻¹` (and the inverse pair `E_a⁻¹E_c` with
/// `E_bE_d⁻¹`). Any `q ∈ P0` whose products or whose left/right ratios land
/// in one class is then known as well. Chaining ratio classes is how three
/// parallelograms yield a fourth; the product classes add transitivity
/// through a shared pair. Iterates to a fixpoint.
pub fn nonabelian_closure(d: &[Sample], spec: &TaskSpec) -> Result<ParallelogramSet> {
    if spec.commutative() {
        return Err(Error::Unsupported("nonabelian_closure is for non-commutative tasks"));
    }
    let p = spec.p();
    let prod = |a: usize, b: usize| a * p + b;
    let left = |x: usize, y: usize| p * p + x * p + y;
    let right = |x: usize, y: usize| 2 * p * p + x * p + y;

    let mut uf = UnionFind::new(3 * p * p);
    let mut known = permissible_set(d, spec);
    let p0 = full_permissible_set(spec);
    let mut pending: Vec<Parallelogram> = known.iter().copied().collect();
    while !pending.is_empty() {
        for q in pending.drain(..) {
            let (a, b, c, dd) = (q.i, q.j, q.m, q.n);
            uf.union(prod(a, b), prod(c, dd));
            uf.union(left(c, a), right(dd, b));
            uf.union(left(a, c), right(b, dd));
        }
        for q in &p0 {
            if known.contains(q) {
                continue;
            }
            let (a, b, c, dd) = (q.i, q.j, q.m, q.n);
            if uf.same(prod(a, b), prod(c, dd)) || uf.same(left(c, a), right(dd, b)) {
                pending.push(*q);
            }
        }
        for q in &pending {
            known.items.insert(*q);
        }
    }
    Ok(known)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }

    fn same(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }
}
