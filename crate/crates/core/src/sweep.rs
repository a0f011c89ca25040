//! Hyperparameter grids over the trainer, producing phase-diagram tables.
//!
//! Every (cell, seed) run is independent: the run seed fixes the data split
//! and all initialisation, so results do not depend on scheduling. The
//! output store is `runs.csv` in the sweep directory; finished runs are
//! appended as they complete and the file is rewritten in canonical order at
//! the end, which makes an interrupted sweep resumable and a rerun of a
//! finished one a no-op.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::domain::{split, Fraction, TaskSpec};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng;
use crate::trainer::{self, BatchSize, ModelConfig, OptimConfig, Phase, RunRecord, DEFAULT_GROK_GAP};

pub const RUNS_FILE: &str = "runs.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const RUNS_CSV_HEADER: &str = "x,y,seed,phase,step_train90,step_val90";
pub const AGGREGATE_CSV_HEADER: &str = "x,y,modal_phase,median_train90,median_val90";

/// Phase label for runs that errored.
pub const FAILED: &str = "failed";
/// Phase label for runs without validation data.
pub const NO_PHASE: &str = "none";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperParam {
    DecLr,
    DecWd,
    ReprLr,
    ReprWd,
    BatchSize,
    InitScale,
}

impl HyperParam {
    pub fn name(&self) -> &'static str {
        match self {
            HyperParam::DecLr => "dec_lr",
            HyperParam::DecWd => "dec_wd",
            HyperParam::ReprLr => "repr_lr",
            HyperParam::ReprWd => "repr_wd",
            HyperParam::BatchSize => "batch_size",
            HyperParam::InitScale => "init_scale",
        }
    }

    /// Write `value` into the matching config field.
    pub fn apply(&self, model: &mut ModelConfig, optim: &mut OptimConfig, value: f64) -> Result<()> {
        match self {
            HyperParam::DecLr => optim.dec_lr = value,
            HyperParam::DecWd => optim.dec_wd = value,
            HyperParam::ReprLr => optim.repr_lr = value,
            HyperParam::ReprWd => optim.repr_wd = value,
            HyperParam::InitScale => model.init_scale = value,
            HyperParam::BatchSize => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::Config(format!("batch size must be a positive integer, got {value}")));
                }
                optim.batch_size = BatchSize::Mini(value as usize);
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for HyperParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        use HyperParam::*;
        [DecLr, DecWd, ReprLr, ReprWd, BatchSize, InitScale]
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown hyperparameter {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub param: HyperParam,
    pub values: Vec<f64>,
}

impl GridAxis {
    /// `n` log-spaced values from `lo` to `hi`, endpoints exact.
    pub fn log_spaced(param: HyperParam, lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) || n == 0 {
            return Err(Error::Config(format!("bad log axis {lo}..{hi} x{n}")));
        }
        let values = (0..n)
            .map(|k| match k {
                0 => lo,
                k if k == n - 1 => hi,
                k => lo * (hi / lo).powf(k as f64 / (n - 1) as f64),
            })
            .collect();
        Ok(GridAxis { param, values })
    }

    /// `n` evenly spaced values from `lo` to `hi`.
    pub fn linear(param: HyperParam, lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(hi >= lo) || n == 0 {
            return Err(Error::Config(format!("bad linear axis {lo}..{hi} x{n}")));
        }
        let values = (0..n)
            .map(|k| match k {
                0 => lo,
                k if k == n - 1 => hi,
                k => lo + (hi - lo) * k as f64 / (n - 1) as f64,
            })
            .collect();
        Ok(GridAxis { param, values })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub name: String,
    pub x: GridAxis,
    pub y: GridAxis,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub fraction: Fraction,
    /// Run seeds; each fixes the split and all initialisation of its run.
    pub seeds: Vec<u64>,
    pub grok_gap: usize,
    /// Refuse grids with more runs than this.
    pub max_runs: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.x.values.is_empty() || self.y.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid axes and seed list must be nonempty".into()));
        }
        if self.x.param == self.y.param {
            return Err(Error::Config("grid axes must differ".into()));
        }
        let runs = self.run_count();
        if runs > self.max_runs {
            return Err(Error::Config(format!("grid has {runs} runs, budget is {}", self.max_runs)));
        }
        for &x in &self.x.values {
            for &y in &self.y.values {
                let (m, o) = self.configs(x, y, self.seeds[0])?;
                m.validate()?;
                o.validate()?;
            }
        }
        Ok(())
    }

    pub fn run_count(&self) -> usize {
        self.x.values.len() * self.y.values.len() * self.seeds.len()
    }

    /// Resolved configs for one run.
    pub fn configs(&self, x: f64, y: f64, seed: u64) -> Result<(ModelConfig, OptimConfig)> {
        let mut model = self.model.clone();
        let mut optim = self.optim.clone();
        self.x.param.apply(&mut model, &mut optim, x)?;
        self.y.param.apply(&mut model, &mut optim, y)?;
        optim.seed = seed;
        Ok((model, optim))
    }

    /// Raise the step budget to the 10⁵-step scale.
    pub fn paper_scale(mut self) -> Self {
        self.optim.max_steps = 100_000;
        self
    }
}

/// Split used by a run with seed `seed`; shared with single training runs.
pub fn run_split(task: &TaskSpec, fraction: Fraction, seed: u64) -> Result<crate::domain::DataSplit> {
    split(task, fraction, rng::derive_seed(seed, trainer::streams::SPLIT))
}

/// Train and classify one run.
pub fn run_one(model: &ModelConfig, optim: &OptimConfig, fraction: Fraction, grok_gap: usize) -> Result<(RunRecord, Option<Phase>)> {
    let sp = run_split(&model.task, fraction, optim.seed)?;
    let record = trainer::train(model, optim, &sp)?;
    let phase = trainer::classify_phase(&record, grok_gap);
    Ok((record, phase))
}

pub const PRESETS: [&str; 5] = ["addition-regression", "repr-vs-dec", "batch-size", "init-scale", "repr-wd"];

/// Desk-scale grids: 5×5 cells, 3 seeds, 2×10⁴ steps, p = 10 addition
/// regression on 45 of 55 samples.
pub fn preset(name: &str) -> Result<GridSpec> {
    let task = TaskSpec::addition(10)?;
    let dec_lr = GridAxis::log_spaced(HyperParam::DecLr, 1e-4, 1e-2, 5)?;
    let (x, y) = match name {
        "addition-regression" => (dec_lr, GridAxis::linear(HyperParam::DecWd, 0.0, 10.0, 5)?),
        "repr-vs-dec" => (dec_lr, GridAxis::log_spaced(HyperParam::ReprLr, 1e-4, 1e-2, 5)?),
        "batch-size" => (dec_lr, GridAxis { param: HyperParam::BatchSize, values: vec![4.0, 8.0, 16.0, 32.0, 45.0] }),
        "init-scale" => (dec_lr, GridAxis::log_spaced(HyperParam::InitScale, 0.25, 4.0, 5)?),
        "repr-wd" => (dec_lr, GridAxis::linear(HyperParam::ReprWd, 0.0, 10.0, 5)?),
        other => {
            return Err(Error::Config(format!("unknown preset {other:?}; expected one of {}", PRESETS.join(", "))))
        }
    };
    Ok(GridSpec {
        name: name.to_string(),
        x,
        y,
        model: ModelConfig::regression(task),
        optim: OptimConfig { max_steps: 20_000, ..OptimConfig::default() },
        fraction: Fraction::exact(45, 55)?,
        seeds: vec![0, 1, 2],
        grok_gap: DEFAULT_GROK_GAP,
        max_runs: 10_000,
    })
}

/// Result of one (cell, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub x: f64,
    pub y: f64,
    pub seed: u64,
    /// A phase name, [`NO_PHASE`] or [`FAILED`].
    pub phase: String,
    pub step_train90: Option<usize>,
    pub step_val90: Option<usize>,
}

impl RunOutcome {
    fn csv_line(&self) -> String {
        format!("{},{},{},{},{},{}\n", self.x, self.y, self.seed, self.phase, opt(self.step_train90), opt(self.step_val90))
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let step = |s: &str| if s.is_empty() { Some(None) } else { s.parse().ok().map(Some) };
        Some(RunOutcome {
            x: f[0].parse().ok()?,
            y: f[1].parse().ok()?,
            seed: f[2].parse().ok()?,
            phase: f[3].to_string(),
            step_train90: step(f[4])?,
            step_val90: step(f[5])?,
        })
    }

    fn key(&self) -> (u64, u64, u64) {
        (self.x.to_bits(), self.y.to_bits(), self.seed)
    }
}

fn opt(v: Option<usize>) -> String {
    v.map(|s| s.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub x: f64,
    pub y: f64,
    /// Per-seed labels in seed order.
    pub phases: Vec<String>,
    pub modal_phase: String,
    pub median_train90: Option<f64>,
    pub median_val90: Option<f64>,
}

/// Most frequent label; ties go to the label seen first.
pub fn modal(labels: &[String]) -> String {
    let mut best: Option<(&String, usize)> = None;
    for l in labels {
        let n = labels.iter().filter(|m| *m == l).count();
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((l, n));
        }
    }
    best.map(|(l, _)| l.clone()).unwrap_or_else(|| FAILED.to_string())
}

pub fn median(values: &[usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] as f64 } else { (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0 })
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub cells: Vec<PhaseCell>,
    pub runs: Vec<RunOutcome>,
    /// Runs trained in this invocation.
    pub executed: usize,
    /// Runs taken from the existing store.
    pub reused: usize,
    /// `(x, y, seed, message)` for runs that errored.
    pub failures: Vec<(f64, f64, u64, String)>,
}

/// Run every (cell, seed) of `grid`, reusing runs already in `out_dir`.
pub fn run_sweep(grid: &GridSpec, out_dir: Option<&Path>, exec: Execution) -> Result<SweepOutcome> {
    grid.validate()?;
    let existing = match out_dir {
        Some(dir) => load_runs(&dir.join(RUNS_FILE))?,
        None => BTreeMap::new(),
    };
    let mut pending = Vec::new();
    for &x in &grid.x.values {
        for &y in &grid.y.values {
            for &seed in &grid.seeds {
                if !existing.contains_key(&(x.to_bits(), y.to_bits(), seed)) {
                    pending.push((x, y, seed));
                }
            }
        }
    }

    let store = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(RUNS_FILE);
            let fresh = !path.exists() || fs::metadata(&path)?.len() == 0;
            let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
            if fresh {
                writeln!(file, "{RUNS_CSV_HEADER}")?;
            }
            Some(Mutex::new(file))
        }
        None => None,
    };

    let fresh: Vec<(RunOutcome, Option<String>)> = exec.map(&pending, |&(x, y, seed)| {
        let result = grid.configs(x, y, seed).and_then(|(m, o)| run_one(&m, &o, grid.fraction, grid.grok_gap));
        let (outcome, error) = match result {
            Ok((record, phase)) => (
                RunOutcome {
                    x,
                    y,
                    seed,
                    phase: phase.map(|p| p.to_string()).unwrap_or_else(|| NO_PHASE.to_string()),
                    step_train90: record.step_train90,
                    step_val90: record.step_val90,
                },
                None,
            ),
            Err(e) => (
                RunOutcome { x, y, seed, phase: FAILED.to_string(), step_train90: None, step_val90: None },
                Some(e.to_string()),
            ),
        };
        if let Some(store) = &store {
            let mut file = store.lock().unwrap_or_else(|p| p.into_inner());
            // a lost append only means the run is repeated on resume
            let _ = file.write_all(outcome.csv_line().as_bytes()).and_then(|_| file.flush());
        }
        (outcome, error)
    });

    let executed = fresh.len();
    let mut failures = Vec::new();
    let mut all: BTreeMap<(u64, u64, u64), RunOutcome> = existing;
    let reused = all.len();
    for (o, err) in fresh {
        if let Some(msg) = err {
            failures.push((o.x, o.y, o.seed, msg));
        }
        all.insert(o.key(), o);
    }

    let mut runs = Vec::with_capacity(grid.run_count());
    let mut cells = Vec::new();
    for &x in &grid.x.values {
        for &y in &grid.y.values {
            let cell_runs: Vec<RunOutcome> = grid
                .seeds
                .iter()
                .filter_map(|&s| all.get(&(x.to_bits(), y.to_bits(), s)).cloned())
                .collect();
            let phases: Vec<String> = cell_runs.iter().map(|r| r.phase.clone()).collect();
            let ok: Vec<&String> = phases.iter().filter(|p| p.as_str() != FAILED).collect();
            let modal_phase = if ok.is_empty() {
                FAILED.to_string()
            } else {
                modal(&ok.into_iter().cloned().collect::<Vec<_>>())
            };
            let t90: Vec<usize> = cell_runs.iter().filter_map(|r| r.step_train90).collect();
            let v90: Vec<usize> = cell_runs.iter().filter_map(|r| r.step_val90).collect();
            cells.push(PhaseCell { x, y, phases, modal_phase, median_train90: median(&t90), median_val90: median(&v90) });
            runs.extend(cell_runs);
        }
    }

    if let Some(dir) = out_dir {
        drop(store);
        write_atomic(&dir.join(RUNS_FILE), &runs_csv(&runs))?;
        write_atomic(&dir.join(AGGREGATE_FILE), &aggregate_csv(&cells))?;
    }
    Ok(SweepOutcome { cells, runs, executed, reused, failures })
}

pub fn runs_csv(runs: &[RunOutcome]) -> String {
    let mut out = format!("{RUNS_CSV_HEADER}\n");
    for r in runs {
        out.push_str(&r.csv_line());
    }
    out
}

pub fn aggregate_csv(cells: &[PhaseCell]) -> String {
    let mut out = format!("{AGGREGATE_CSV_HEADER}\n");
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in cells {
        out.push_str(&format!("{},{},{},{},{}\n", c.x, c.y, c.modal_phase, f(c.median_train90), f(c.median_val90)));
    }
    out
}

/// Runs recorded in a store file; a missing file is an empty store.
/// Malformed lines (e.g. a write cut short) are ignored.
pub fn load_runs(path: &Path) -> Result<BTreeMap<(u64, u64, u64), RunOutcome>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(e.into()),
    };
    Ok(text.lines().skip(1).filter_map(RunOutcome::parse).map(|r| (r.key(), r)).collect())
}

/// Write via a temporary sibling and rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_grid() -> GridSpec {
        let mut g = preset("addition-regression").unwrap();
        g.model.task = TaskSpec::addition(5).unwrap();
        g.model.hidden = vec![8];
        g.model.target_dim = 4;
        g.fraction = Fraction::exact(10, 15).unwrap();
        g.optim.max_steps = 40;
        g.optim.stride = 10;
        g.x.values.truncate(2);
        g.y.values.truncate(2);
        g.seeds = vec![3, 4];
        g
    }

    #[test]
    fn axes() {
        let a = GridAxis::log_spaced(HyperParam::DecLr, 1e-4, 1e-2, 5).unwrap();
        assert_eq!(a.values[0], 1e-4);
        assert_eq!(a.values[4], 1e-2);
        assert!((a.values[2] - 1e-3).abs() < 1e-15);
        let w = GridAxis::linear(HyperParam::DecWd, 0.0, 10.0, 5).unwrap();
        assert_eq!(w.values, vec![0.0, 2.5, 5.0, 7.5, 10.0]);
        assert!(GridAxis::log_spaced(HyperParam::DecLr, 0.0, 1.0, 3).is_err());
    }

    #[test]
    fn modal_and_median() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(modal(&s(&["grokking", "memorization", "memorization"])), "memorization");
        assert_eq!(modal(&s(&["confusion", "grokking"])), "confusion");
        assert_eq!(median(&[5, 1, 3]), Some(3.0));
        assert_eq!(median(&[4, 1]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn presets_resolve() {
        for name in PRESETS {
            let g = preset(name).unwrap();
            g.validate().unwrap();
            assert_eq!(g.run_count(), 75);
        }
        assert!(preset("nope").is_err());
        let (m, o) = preset("batch-size").unwrap().configs(1e-3, 8.0, 1).unwrap();
        assert_eq!(o.batch_size, BatchSize::Mini(8));
        assert_eq!((o.dec_lr, o.seed), (1e-3, 1));
        assert_eq!(m.init_scale, 1.0);
    }

    #[test]
    fn budget_is_enforced() {
        let mut g = tiny_grid();
        g.max_runs = 7;
        assert!(matches!(run_sweep(&g, None, Execution::Sequential), Err(Error::Config(_))));
    }

    #[test]
    fn one_cell_matches_single_run() {
        let mut g = tiny_grid();
        g.x.values.truncate(1);
        g.y.values.truncate(1);
        g.seeds.truncate(1);
        let out = run_sweep(&g, None, Execution::Sequential).unwrap();
        assert_eq!(out.cells.len(), 1);
        let (m, o) = g.configs(g.x.values[0], g.y.values[0], g.seeds[0]).unwrap();
        let (rec, phase) = run_one(&m, &o, g.fraction, g.grok_gap).unwrap();
        assert_eq!(out.runs[0].step_train90, rec.step_train90);
        assert_eq!(out.cells[0].modal_phase, phase.unwrap().to_string());
    }

    #[test]
    fn resume_and_order_independence() {
        let dir = tempfile::tempdir().unwrap();
        let g = tiny_grid();
        let first = run_sweep(&g, Some(dir.path()), Execution::Sequential).unwrap();
        assert_eq!(first.executed, 8);
        let runs = fs::read_to_string(dir.path().join(RUNS_FILE)).unwrap();
        let agg = fs::read_to_string(dir.path().join(AGGREGATE_FILE)).unwrap();

        let again = run_sweep(&g, Some(dir.path()), Execution::Parallel { workers: 2 }).unwrap();
        assert_eq!(again.executed, 0);
        assert_eq!(fs::read_to_string(dir.path().join(RUNS_FILE)).unwrap(), runs);
        assert_eq!(fs::read_to_string(dir.path().join(AGGREGATE_FILE)).unwrap(), agg);

        // drop some runs as if interrupted; only those are retrained
        let kept: String = runs.lines().take(4).map(|l| format!("{l}\n")).collect();
        fs::write(dir.path().join(RUNS_FILE), kept).unwrap();
        let resumed = run_sweep(&g, Some(dir.path()), Execution::Parallel { workers: 2 }).unwrap();
        assert_eq!(resumed.executed, 5);
        assert_eq!(fs::read_to_string(dir.path().join(RUNS_FILE)).unwrap(), runs);

        let fresh = tempfile::tempdir().unwrap();
        run_sweep(&g, Some(fresh.path()), Execution::Parallel { workers: 3 }).unwrap();
        assert_eq!(fs::read_to_string(fresh.path().join(RUNS_FILE)).unwrap(), runs);
    }

    #[test]
    fn failures_are_recorded() {
        let mut g = tiny_grid();
        g.x = GridAxis { param: HyperParam::BatchSize, values: vec![2.0, 2.5] };
        assert!(g.validate().is_err());
        g.x.values = vec![2.0];
        g.y = GridAxis { param: HyperParam::DecLr, values: vec![1e-3, 1e300] };
        let out = run_sweep(&g, None, Execution::Sequential).unwrap();
        assert_eq!(out.runs.len(), 4);
        assert_eq!(out.failures.len(), 2);
        assert_eq!(out.runs[2].phase, FAILED);
        assert_ne!(out.runs[1].phase, FAILED);
        assert_eq!(out.cells[1].modal_phase, FAILED);
        assert_ne!(out.cells[0].modal_phase, FAILED);
    }
}
