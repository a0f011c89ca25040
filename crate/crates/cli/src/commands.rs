//! Subcommand implementations. Every command writes its artifacts plus a
//! `manifest.json` under the output directory.
//!
//! Layout:
//! - `efftheory`: `trajectory.csv`, `embeddings.csv`, `spectrum.json`
//! - `mc-critical` (and `efftheory --fractions`): `critical.csv`
//! - `train`: `metrics.csv`, `embeddings.csv`, `record.json`
//! - `sweep`: `runs.csv`, `aggregate.csv`
//! - `analyze`: `accuracy.csv`, plus `pca.csv`, `pca_points.csv`,
//!   `pca_summary.csv` with `--pca`

use std::fs;
use std::path::{Path, PathBuf};

use groklab::analysis::{accuracy_csv, accuracy_row, pca};
use groklab::domain::TaskSpec;
use groklab::efftheory::{embeddings_csv, flow, init_uniform, trajectory_csv};
use groklab::lintheory::{self, build_a, critical_csv, critical_fraction_mc, crossing, slowest_timescale};
use groklab::par::Execution;
use groklab::parallelogram::permissible_set;
use groklab::rng::derive_seed;
use groklab::sweep::{self, preset, run_one, run_split, write_atomic, GridSpec};
use groklab::trainer::{metrics_csv, streams, RunRecord};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{parse_fractions, Overrides, Settings};
use crate::{Failure, VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    version: &'static str,
    seed: Option<u64>,
    config: Value,
    outputs: Vec<String>,
    started: String,
    finished: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

struct Run<'a> {
    command: &'a str,
    argv: &'a [String],
    out: &'a Path,
    started: String,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn start(command: &'a str, argv: &'a [String], out: &'a Path) -> Result<Self, Failure> {
        fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
        Ok(Run { command, argv, out, started: now(), outputs: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        write_atomic(&self.out.join(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(self, seed: Option<u64>, config: Value) -> Result<(), Failure> {
        let manifest = Manifest {
            command: self.command,
            argv: self.argv,
            version: VERSION,
            seed,
            config,
            outputs: self.outputs,
            started: self.started,
            finished: now(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(groklab::Error::from)?;
        write_atomic(&self.out.join(MANIFEST_FILE), &(text + "\n"))?;
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

pub fn efftheory(o: &Overrides, out: &Path, argv: &[String]) -> Result<(), Failure> {
    let s = Settings::resolve(o)?;
    let seed = s.master_seed()?;
    let task = s.task_spec()?;
    if !task.commutative() {
        return Err(Failure::Config("the effective-theory flow needs a vector task (addition or modular_addition)".into()));
    }
    let mut run = Run::start("efftheory", argv, out)?;
    let sp = run_split(&task, s.fraction, seed)?;
    let set = permissible_set(&sp.train, &task);
    let r0 = init_uniform(task.p(), s.flow_dim, s.flow_init_scale, derive_seed(seed, streams::EMBEDDINGS));
    let traj = flow(&r0, &set, &s.flow)?;

    let a = build_a(&set, task.p());
    let nullity = lintheory::nullity(&a, lintheory::RANK_TOL);
    let z0 = groklab::efftheory::conserved(&r0).z0;
    let timescale = lintheory::hessian_of(&a, z0).and_then(|h| slowest_timescale(&h, s.flow.dt));
    let spectrum = json!({
        "train_samples": sp.train.len(),
        "parallelograms": set.len(),
        "nullity": nullity,
        "z0_initial": z0,
        "lambda3": timescale.as_ref().ok().map(|t| t.lambda3),
        "t_h": timescale.as_ref().ok().map(|t| t.t_h),
        "n_h": timescale.as_ref().ok().map(|t| t.n_h),
        "step_rqi95": traj.step_rqi95,
    });
    run.write("trajectory.csv", &trajectory_csv(&traj))?;
    run.write("embeddings.csv", &embeddings_csv(&traj))?;
    run.write("spectrum.json", &(serde_json::to_string_pretty(&spectrum).map_err(groklab::Error::from)? + "\n"))?;
    let last = traj.snapshots.last().expect("final snapshot");
    println!(
        "efftheory: {} parallelograms, nullity {nullity}, final l_eff {:.3e}, rqi {:.3}, rqi>0.95 at step {}",
        set.len(),
        last.l_eff,
        last.rqi,
        traj.step_rqi95.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
    );
    run.finish(Some(seed), to_value(&s))
}

pub fn mc_critical(o: &Overrides, out: &Path, argv: &[String]) -> Result<(), Failure> {
    let s = Settings::resolve(o)?;
    let seed = s.master_seed()?;
    let task = TaskSpec::addition(s.p)?;
    let fractions = parse_fractions(&s.mc_fractions)?;
    let mut run = Run::start("mc-critical", argv, out)?;
    let points = critical_fraction_mc(&task, &fractions, s.mc_trials, seed, Execution::from_env())?;
    run.write("critical.csv", &critical_csv(&points))?;
    match crossing(&points, 0.5) {
        Some(x) => println!("probability of nullity 2 crosses 0.5 at fraction {x:.3}"),
        None => println!("probability of nullity 2 does not cross 0.5 on this grid"),
    }
    run.finish(Some(seed), to_value(&s))
}

fn representation_csv(record: &RunRecord) -> String {
    let data = record.embeddings.data();
    let mut out = String::from("k");
    for c in 0..data.ncols() {
        out.push_str(&format!(",e{c}"));
    }
    out.push('\n');
    for (k, row) in data.rows().into_iter().enumerate() {
        out.push_str(&k.to_string());
        for x in row {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    out
}

pub fn train(o: &Overrides, out: &Path, argv: &[String]) -> Result<(), Failure> {
    let s = Settings::resolve(o)?;
    let seed = s.master_seed()?;
    let model = s.model_config()?;
    let optim = s.optim_config(seed)?;
    let mut run = Run::start("train", argv, out)?;
    let (record, phase) = run_one(&model, &optim, s.fraction, s.grok_gap)?;
    run.write("metrics.csv", &metrics_csv(&record))?;
    run.write("embeddings.csv", &representation_csv(&record))?;
    let text = serde_json::to_string_pretty(&record).map_err(groklab::Error::from)?;
    run.write("record.json", &(text + "\n"))?;
    let fmt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
    println!(
        "train: {} steps, train>90% at {}, val>90% at {}, full accuracy {:.3}, rqi {:.3}",
        record.steps_run,
        fmt(record.step_train90),
        fmt(record.step_val90),
        record.full_acc,
        record.final_rqi
    );
    if let Some(note) = &record.anomaly {
        eprintln!("warning: {note}");
    }
    match phase {
        Some(p) => println!("phase: {p}"),
        None => {
            eprintln!("warning: no validation data (fraction {}); phase is undefined", s.fraction);
            println!("phase: none");
        }
    }
    run.finish(Some(seed), to_value(&s))
}

fn sweep_grid(s: &Settings, o: &Overrides, seed: u64) -> Result<GridSpec, Failure> {
    let name = s.sweep.preset.clone().unwrap_or_else(|| "addition-regression".into());
    let base = preset(&name)?;
    let explicit = |key: &str| o.0.iter().any(|(k, _)| k == key);
    let mut optim = s.optim.clone();
    if !explicit("optim.max_steps") {
        optim.max_steps = base.optim.max_steps;
    }
    let mut grid = GridSpec {
        x: Settings::axis(s.sweep.x_param, &s.sweep.x_values, base.x.clone()),
        y: Settings::axis(s.sweep.y_param, &s.sweep.y_values, base.y.clone()),
        model: s.model_config()?,
        optim,
        fraction: s.fraction,
        seeds: s.sweep.seeds.clone().unwrap_or_else(|| (0..3).map(|k| seed.wrapping_add(k)).collect()),
        grok_gap: s.grok_gap,
        max_runs: s.sweep.max_runs.unwrap_or(base.max_runs),
        name,
    };
    if s.sweep.paper_scale {
        grid = grid.paper_scale();
    }
    grid.validate()?;
    Ok(grid)
}

pub fn sweep(o: &Overrides, out: &Path, resume: bool, argv: &[String]) -> Result<(), Failure> {
    let s = Settings::resolve(o)?;
    let seed = s.master_seed()?;
    let grid = sweep_grid(&s, o, seed)?;
    let mut run = Run::start("sweep", argv, out)?;
    if !resume {
        for name in [sweep::RUNS_FILE, sweep::AGGREGATE_FILE] {
            let path = out.join(name);
            if path.exists() {
                fs::remove_file(&path)?;
            }
        }
    }
    let outcome = sweep::run_sweep(&grid, Some(out), Execution::from_env())?;
    run.outputs.extend([sweep::RUNS_FILE.to_string(), sweep::AGGREGATE_FILE.to_string()]);
    for (x, y, seed, msg) in &outcome.failures {
        eprintln!("warning: run x={x} y={y} seed={seed} failed: {msg}");
    }
    println!(
        "sweep {}: {} runs trained, {} reused, {} failed",
        grid.name,
        outcome.executed,
        outcome.reused,
        outcome.failures.len()
    );
    for cell in &outcome.cells {
        println!("  {}={} {}={} -> {}", grid.x.param.name(), cell.x, grid.y.param.name(), cell.y, cell.modal_phase);
    }
    run.finish(Some(seed), json!({ "settings": to_value(&s), "grid": to_value(&grid) }))
}

fn find_records(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut found = Vec::new();
    for dir in inputs {
        if !dir.exists() {
            return Err(Failure::Config(format!("input {} does not exist", dir.display())));
        }
        for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
            let entry = entry.map_err(|e| Failure::Runtime(e.to_string()))?;
            if entry.file_type().is_file() && entry.file_name() == "record.json" {
                found.push(entry.into_path());
            }
        }
    }
    if found.is_empty() {
        return Err(Failure::Config("no record.json found under the given inputs".into()));
    }
    Ok(found)
}

pub fn analyze(inputs: &[PathBuf], with_pca: bool, out: &Path, argv: &[String]) -> Result<(), Failure> {
    let paths = find_records(inputs)?;
    let mut records = Vec::with_capacity(paths.len());
    for path in &paths {
        let text = fs::read_to_string(path)?;
        let record: RunRecord = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("{} is not a run record: {e}", path.display())))?;
        records.push(record);
    }
    let mut run = Run::start("analyze", argv, out)?;
    let rows = records.iter().map(accuracy_row).collect::<Result<Vec<_>, _>>()?;
    run.write("accuracy.csv", &accuracy_csv(&rows))?;
    for (row, path) in rows.iter().zip(&paths) {
        println!(
            "{}: acc {:.3}, predicted {:.3}, rqi {:.3} (upper {:.3})",
            path.parent().unwrap_or(path).display(),
            row.acc,
            row.acc_pred,
            row.rqi,
            row.rqi_upper
        );
    }
    if with_pca {
        let mut ratios = String::from("source,component,ratio\n");
        let mut points = String::from("source,k,pc1,pc2,pc3\n");
        let mut summary = String::from("source,entropy,effective_dim\n");
        for (record, path) in records.iter().zip(&paths) {
            let source = path.parent().unwrap_or(path).display().to_string();
            let res = pca(record.embeddings.data())?;
            for (c, r) in res.ratios.iter().enumerate() {
                ratios.push_str(&format!("{source},{},{r}\n", c + 1));
            }
            for (k, row) in res.projections.rows().into_iter().enumerate() {
                let pc = |c: usize| row.get(c).map(|x| x.to_string()).unwrap_or_default();
                points.push_str(&format!("{source},{k},{},{},{}\n", pc(0), pc(1), pc(2)));
            }
            summary.push_str(&format!("{source},{},{}\n", res.entropy, res.effective_dim));
            println!("{source}: explained ratios {:?}, effective dim {:.3}", res.ratios, res.effective_dim);
        }
        run.write("pca.csv", &ratios)?;
        run.write("pca_points.csv", &points)?;
        run.write("pca_summary.csv", &summary)?;
    }
    let inputs: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    run.finish(None, json!({ "inputs": inputs, "pca": with_pca }))
}
