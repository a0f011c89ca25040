//! Tasks, samples and train/validation splits.
//!
//! Three group operations are supported: plain addition on `0..p`, addition
//! modulo `p`, and composition in the symmetric group S3. Commutative tasks
//! identify `(i, j)` with `(j, i)` and store samples with `i <= j`.
//!
//! S3 elements are the six permutations of `{0, 1, 2}` in lexicographic order
//! of their one-line notation:
//!
//! | index | one-line |
//! |-------|----------|
//! | 0     | 012 (identity) |
//! | 1     | 021 |
//! | 2     | 102 |
//! | 3     | 120 |
//! | 4     | 201 |
//! | 5     | 210 |
//!
//! The product `i ∘ j` applies `j` first and then `i` (left acts after right):
//! `(σ_i ∘ σ_j)(x) = σ_i(σ_j(x))`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Largest symbol count accepted anywhere in the crate.
pub const MAX_P: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Addition,
    ModularAddition,
    #[serde(rename = "s3")]
    PermutationS3,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addition" | "add" => Ok(TaskKind::Addition),
            "modular_addition" | "modular" | "mod" => Ok(TaskKind::ModularAddition),
            "s3" | "permutation" | "permutation_s3" => Ok(TaskKind::PermutationS3),
            other => Err(Error::InvalidTask(format!("unknown task kind {other:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Addition => "addition",
            TaskKind::ModularAddition => "modular_addition",
            TaskKind::PermutationS3 => "s3",
        })
    }
}

/// A task: which operation and how many symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TaskSpecRepr", into = "TaskSpecRepr")]
pub struct TaskSpec {
    kind: TaskKind,
    p: usize,
}

#[derive(Serialize, Deserialize)]
struct TaskSpecRepr {
    kind: TaskKind,
    p: usize,
}

impl TryFrom<TaskSpecRepr> for TaskSpec {
    type Error = Error;
    fn try_from(r: TaskSpecRepr) -> Result<Self> {
        TaskSpec::new(r.kind, r.p)
    }
}

impl From<TaskSpec> for TaskSpecRepr {
    fn from(t: TaskSpec) -> Self {
        TaskSpecRepr { kind: t.kind, p: t.p }
    }
}

impl TaskSpec {
    pub fn new(kind: TaskKind, p: usize) -> Result<Self> {
        if p < 2 {
            return Err(Error::InvalidTask(format!("p must be at least 2, got {p}")));
        }
        if p > MAX_P {
            return Err(Error::InvalidTask(format!("p must be at most {MAX_P}, got {p}")));
        }
        if kind == TaskKind::PermutationS3 && p != 6 {
            return Err(Error::InvalidTask(format!("S3 has exactly 6 elements, got p = {p}")));
        }
        Ok(TaskSpec { kind, p })
    }

    pub fn addition(p: usize) -> Result<Self> {
        Self::new(TaskKind::Addition, p)
    }

    pub fn modular_addition(p: usize) -> Result<Self> {
        Self::new(TaskKind::ModularAddition, p)
    }

    pub fn s3() -> Self {
        TaskSpec { kind: TaskKind::PermutationS3, p: 6 }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn commutative(&self) -> bool {
        !matches!(self.kind, TaskKind::PermutationS3)
    }

    /// Number of distinct output classes.
    pub fn num_labels(&self) -> usize {
        match self.kind {
            TaskKind::Addition => 2 * self.p - 1,
            TaskKind::ModularAddition => self.p,
            TaskKind::PermutationS3 => 6,
        }
    }

    /// `|D0|`: `p(p+1)/2` for commutative tasks, `p²` otherwise.
    pub fn num_samples(&self) -> usize {
        if self.commutative() {
            self.p * (self.p + 1) / 2
        } else {
            self.p * self.p
        }
    }

    /// Canonical key of the pair `(i, j)`: sorted for commutative tasks.
    pub fn canonical_pair(&self, i: usize, j: usize) -> (usize, usize) {
        if self.commutative() && j < i {
            (j, i)
        } else {
            (i, j)
        }
    }

    /// Dense index of a canonical pair into `enumerate_samples` order.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        let (i, j) = self.canonical_pair(i, j);
        if self.commutative() {
            // rows 0..i hold p, p-1, ..., p-i+1 entries
            i * self.p - i * (i.saturating_sub(1)) / 2 + (j - i)
        } else {
            i * self.p + j
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(p={})", self.kind, self.p)
    }
}

/// One `(i, j) ↦ label` example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub i: usize,
    pub j: usize,
    pub label: usize,
}

impl Sample {
    pub fn pair(&self) -> (usize, usize) {
        (self.i, self.j)
    }
}

/// Group operation on symbol indices.
pub fn label(spec: &TaskSpec, i: usize, j: usize) -> Result<usize> {
    let p = spec.p();
    for index in [i, j] {
        if index >= p {
            return Err(Error::IndexOutOfRange { index, p });
        }
    }
    Ok(match spec.kind() {
        TaskKind::Addition => i + j,
        TaskKind::ModularAddition => (i + j) % p,
        TaskKind::PermutationS3 => s3_compose(i, j),
    })
}

/// All samples of the task in lexicographic `(i, j)` order.
pub fn enumerate_samples(spec: &TaskSpec) -> Vec<Sample> {
    let p = spec.p();
    let mut out = Vec::with_capacity(spec.num_samples());
    for i in 0..p {
        let start = if spec.commutative() { i } else { 0 };
        for j in start..p {
            let label = label(spec, i, j).expect("indices in range");
            out.push(Sample { i, j, label });
        }
    }
    out
}

/// The six permutations of `{0,1,2}` in lexicographic one-line order.
pub const S3_ELEMENTS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Index of `σ_i ∘ σ_j` (apply `j`, then `i`).
pub fn s3_compose(i: usize, j: usize) -> usize {
    let (a, b) = (S3_ELEMENTS[i], S3_ELEMENTS[j]);
    let prod = [a[b[0]], a[b[1]], a[b[2]]];
    S3_ELEMENTS.iter().position(|e| *e == prod).expect("S3 is closed")
}

pub fn s3_inverse(i: usize) -> usize {
    (0..6).find(|&j| s3_compose(i, j) == 0).expect("every element has an inverse")
}

/// Permutation matrices with `M[σ(x)][x] = 1`, index-aligned with
/// [`S3_ELEMENTS`], so that `M(i ∘ j) = M(i) · M(j)`.
pub fn s3_matrices() -> Vec<[[f64; 3]; 3]> {
    S3_ELEMENTS
        .iter()
        .map(|sigma| {
            let mut m = [[0.0; 3]; 3];
            for (x, &sx) in sigma.iter().enumerate() {
                m[sx][x] = 1.0;
            }
            m
        })
        .collect()
}

/// Training-data fraction, either exact (`"45/55"`) or a float.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fraction {
    Exact { num: u64, den: u64 },
    Float(f64),
}

impl Fraction {
    pub fn exact(num: u64, den: u64) -> Result<Self> {
        let f = Fraction::Exact { num, den };
        f.validate()?;
        Ok(f)
    }

    pub fn float(x: f64) -> Result<Self> {
        let f = Fraction::Float(x);
        f.validate()?;
        Ok(f)
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Fraction::Exact { num, den } => den > 0 && num > 0 && num <= den,
            Fraction::Float(x) => x.is_finite() && x > 0.0 && x <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidFraction(format!("{self} is not in (0, 1]")))
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Fraction::Exact { num, den } => num as f64 / den as f64,
            Fraction::Float(x) => x,
        }
    }

    /// `round(fraction · total)`, halves rounded up.
    pub fn count_of(&self, total: usize) -> usize {
        match *self {
            Fraction::Exact { num, den } => {
                let t = total as u128;
                ((2 * num as u128 * t + den as u128) / (2 * den as u128)) as usize
            }
            Fraction::Float(x) => (x * total as f64).round() as usize,
        }
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fraction::Exact { num, den } => write!(f, "{num}/{den}"),
            Fraction::Float(x) => write!(f, "{x}"),
        }
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidFraction(format!("cannot parse {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let num = n.trim().parse().map_err(|_| bad())?;
            let den = d.trim().parse().map_err(|_| bad())?;
            Fraction::exact(num, den)
        } else {
            Fraction::float(s.parse().map_err(|_| bad())?)
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Str(String),
            Num(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Num(x) => Fraction::float(x).map_err(serde::de::Error::custom),
        }
    }
}

/// Partition of `D0` into training and validation samples, both sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSplit {
    pub task: TaskSpec,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub fraction: Fraction,
    pub seed: u64,
}

impl DataSplit {
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(self.valid.iter())
    }

    /// Recover a split from an explicit training set.
    pub fn from_train(task: TaskSpec, train: &[(usize, usize)]) -> Result<Self> {
        let mut in_train = vec![false; task.num_samples()];
        for &(i, j) in train {
            for index in [i, j] {
                if index >= task.p() {
                    return Err(Error::IndexOutOfRange { index, p: task.p() });
                }
            }
            in_train[task.pair_index(i, j)] = true;
        }
        let (train, valid): (Vec<_>, Vec<_>) = enumerate_samples(&task)
            .into_iter()
            .partition(|s| in_train[task.pair_index(s.i, s.j)]);
        if train.is_empty() {
            return Err(Error::EmptyTrainSet("explicit".into()));
        }
        let fraction = Fraction::Exact { num: train.len() as u64, den: task.num_samples() as u64 };
        Ok(DataSplit { task, train, valid, fraction, seed: 0 })
    }
}

/// Seeded split: Fisher–Yates shuffle of `enumerate_samples`, first
/// `round(fraction · |D0|)` entries become the training set.
pub fn split(spec: &TaskSpec, fraction: Fraction, seed: u64) -> Result<DataSplit> {
    fraction.validate()?;
    let mut samples = enumerate_samples(spec);
    let k = fraction.count_of(samples.len());
    if k == 0 {
        return Err(Error::EmptyTrainSet(fraction.to_string()));
    }
    rng::shuffle(&mut rng::rng(seed), &mut samples);
    let mut valid = samples.split_off(k);
    samples.sort();
    valid.sort();
    Ok(DataSplit { task: *spec, train: samples, valid, fraction, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_counts() {
        assert_eq!(enumerate_samples(&TaskSpec::addition(10).unwrap()).len(), 55);
        assert_eq!(enumerate_samples(&TaskSpec::addition(4).unwrap()).len(), 10);
        assert_eq!(enumerate_samples(&TaskSpec::s3()).len(), 36);
        assert_eq!(enumerate_samples(&TaskSpec::modular_addition(7).unwrap()).len(), 28);
    }

    #[test]
    fn labels() {
        let add = TaskSpec::addition(10).unwrap();
        assert_eq!(label(&add, 6, 8).unwrap(), 14);
        let m = TaskSpec::modular_addition(10).unwrap();
        assert_eq!(label(&m, 9, 9).unwrap(), 8);
        let s3 = TaskSpec::s3();
        for g in 0..6 {
            assert_eq!(label(&s3, 0, g).unwrap(), g);
            assert_eq!(label(&s3, g, 0).unwrap(), g);
        }
        assert!(matches!(label(&add, 10, 0), Err(Error::IndexOutOfRange { index: 10, p: 10 })));
    }

    #[test]
    fn invalid_tasks() {
        assert!(TaskSpec::addition(1).is_err());
        assert!(TaskSpec::new(TaskKind::PermutationS3, 5).is_err());
        assert!(TaskSpec::addition(MAX_P + 1).is_err());
    }

    #[test]
    fn s3_is_a_group() {
        for a in 0..6 {
            for b in 0..6 {
                for c in 0..6 {
                    assert_eq!(s3_compose(s3_compose(a, b), c), s3_compose(a, s3_compose(b, c)));
                }
            }
            assert_eq!(s3_compose(a, s3_inverse(a)), 0);
            assert_eq!(s3_compose(s3_inverse(a), a), 0);
        }
        // non-abelian
        assert!((0..6).any(|a| (0..6).any(|b| s3_compose(a, b) != s3_compose(b, a))));
    }

    #[test]
    fn s3_matrices_are_a_representation() {
        let ms = s3_matrices();
        assert_eq!(ms[0], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let mul = |a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]| {
            let mut c = [[0.0; 3]; 3];
            for r in 0..3 {
                for k in 0..3 {
                    for col in 0..3 {
                        c[r][col] += a[r][k] * b[k][col];
                    }
                }
            }
            c
        };
        for m in &ms {
            let mut mt = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    mt[r][c] = m[c][r];
                }
            }
            assert_eq!(mul(&mt, m), ms[0]);
        }
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(ms[s3_compose(i, j)], mul(&ms[i], &ms[j]), "pair ({i},{j})");
            }
        }
    }

    #[test]
    fn pair_index_matches_enumeration() {
        for spec in [TaskSpec::addition(7).unwrap(), TaskSpec::s3()] {
            for (k, s) in enumerate_samples(&spec).iter().enumerate() {
                assert_eq!(spec.pair_index(s.i, s.j), k);
                if spec.commutative() {
                    assert_eq!(spec.pair_index(s.j, s.i), k);
                }
            }
        }
    }

    #[test]
    fn paper_split_sizes() {
        let add = TaskSpec::addition(10).unwrap();
        let s = split(&add, "45/55".parse().unwrap(), 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len()), (45, 10));
        let s3 = TaskSpec::s3();
        let s = split(&s3, "24/36".parse().unwrap(), 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len()), (24, 12));
        let full = split(&add, Fraction::float(1.0).unwrap(), 9).unwrap();
        assert!(full.valid.is_empty());
        assert_eq!(full.train, enumerate_samples(&add));
    }

    #[test]
    fn split_errors() {
        let add = TaskSpec::addition(10).unwrap();
        assert!(matches!(split(&add, Fraction::Float(0.001), 0), Err(Error::EmptyTrainSet(_))));
        assert!("0".parse::<Fraction>().is_err());
        assert!("3/2".parse::<Fraction>().is_err());
        assert!("abc".parse::<Fraction>().is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let add = TaskSpec::addition(10).unwrap();
        let f = Fraction::float(0.4).unwrap();
        assert_eq!(split(&add, f, 5).unwrap(), split(&add, f, 5).unwrap());
        assert_ne!(split(&add, f, 5).unwrap().train, split(&add, f, 6).unwrap().train);
    }

    #[test]
    fn fraction_serde() {
        let f: Fraction = serde_json::from_str("\"45/55\"").unwrap();
        assert_eq!(f, Fraction::Exact { num: 45, den: 55 });
        let g: Fraction = serde_json::from_str("0.5").unwrap();
        assert_eq!(g.count_of(36), 18);
        assert_eq!(serde_json::to_string(&f).unwrap(), "\"45/55\"");
    }

    #[test]
    fn task_serde_validates() {
        let t: TaskSpec = serde_json::from_str(r#"{"kind":"addition","p":10}"#).unwrap();
        assert_eq!(t, TaskSpec::addition(10).unwrap());
        assert!(serde_json::from_str::<TaskSpec>(r#"{"kind":"s3","p":4}"#).is_err());
    }
}
