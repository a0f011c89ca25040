//! Flat JSON configuration with dotted keys.
//!
//! A config file is one JSON object such as
//! `{"seed": 7, "task.p": 10, "optim.dec_lr": 1e-3}`. Command-line flags are
//! folded into the same key space after the file, so they win. Values may be
//! JSON numbers/strings/arrays or, from flags, plain strings.

use std::path::Path;

use groklab::domain::{Fraction, TaskKind, TaskSpec};
use groklab::efftheory::FlowConfig;
use groklab::sweep::{GridAxis, HyperParam};
use groklab::trainer::{Activation, BatchSize, ModelConfig, OptimConfig, TaskMode, DEFAULT_GROK_GAP};
use serde::Serialize;
use serde_json::Value;

/// Error in user input; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

type Res<T> = Result<T, ConfigError>;

fn bad(key: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("config key {key:?}: {msg}"))
}

#[derive(Clone, Debug, Serialize)]
pub struct Settings {
    pub seed: Option<u64>,
    pub task: TaskKind,
    pub p: usize,
    pub fraction: Fraction,
    pub model: ModelSettings,
    pub optim: OptimConfig,
    pub grok_gap: usize,
    pub flow: FlowConfig,
    pub flow_init_scale: f64,
    pub flow_dim: usize,
    pub mc_fractions: String,
    pub mc_trials: usize,
    pub sweep: SweepSettings,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelSettings {
    pub mode: TaskMode,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
    pub target_dim: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SweepSettings {
    pub preset: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub max_runs: Option<usize>,
    pub x_param: Option<HyperParam>,
    pub x_values: Option<Vec<f64>>,
    pub y_param: Option<HyperParam>,
    pub y_values: Option<Vec<f64>>,
    pub paper_scale: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: None,
            task: TaskKind::Addition,
            p: 10,
            fraction: Fraction::exact(45, 55).expect("valid"),
            model: ModelSettings {
                mode: TaskMode::Regression,
                embed_dim: 1,
                hidden: vec![200, 200],
                activation: Activation::Tanh,
                init_scale: 1.0,
                target_dim: 30,
            },
            optim: OptimConfig::default(),
            grok_gap: DEFAULT_GROK_GAP,
            flow: FlowConfig::default(),
            flow_init_scale: 1.0,
            flow_dim: 1,
            mc_fractions: "0.1:1.0:19".into(),
            mc_trials: 500,
            sweep: SweepSettings::default(),
        }
    }
}

/// Ordered key/value pairs: config file first, then flags.
#[derive(Clone, Debug, Default)]
pub struct Overrides(pub Vec<(String, Value)>);

impl Overrides {
    pub fn from_file(path: &Path) -> Res<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(ConfigError(format!("config {} must be a JSON object", path.display())));
        };
        Ok(Overrides(map.into_iter().collect()))
    }

    pub fn flag(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), Value::String(v.to_string())));
        }
    }

    /// `KEY=VALUE` from `--set`.
    pub fn assignment(&mut self, text: &str) -> Res<()> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set expects KEY=VALUE, got {text:?}")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.0.push((k.trim().to_string(), value));
        Ok(())
    }
}

fn as_str(key: &str, v: &Value) -> Res<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(bad(key, format!("expected a scalar, got {other}"))),
    }
}

fn as_f64(key: &str, v: &Value) -> Res<f64> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| bad(key, "not a number")),
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, format!("expected a number, got {s:?}"))),
        other => Err(bad(key, format!("expected a number, got {other}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Res<u64> {
    match v {
        Value::Number(n) => n.as_u64().ok_or_else(|| bad(key, format!("expected a nonnegative integer, got {n}"))),
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, format!("expected a nonnegative integer, got {s:?}"))),
        other => Err(bad(key, format!("expected an integer, got {other}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Res<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_bool(key: &str, v: &Value) -> Res<bool> {
    match v {
        Value::Bool(b) => Ok(*b),
        Value::String(s) => s.parse().map_err(|_| bad(key, format!("expected true/false, got {s:?}"))),
        other => Err(bad(key, format!("expected a boolean, got {other}"))),
    }
}

/// Arrays, or comma-separated strings.
fn as_list<T>(key: &str, v: &Value, item: fn(&str, &Value) -> Res<T>) -> Res<Vec<T>> {
    match v {
        Value::Array(items) => items.iter().map(|x| item(key, x)).collect(),
        Value::String(s) => s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| item(key, &Value::String(t.trim().to_string())))
            .collect(),
        other => Err(bad(key, format!("expected a list, got {other}"))),
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &Value) -> Res<T>
where
    T::Err: std::fmt::Display,
{
    as_str(key, v)?.parse().map_err(|e| bad(key, e))
}

impl Settings {
    pub fn resolve(overrides: &Overrides) -> Res<Self> {
        let mut s = Settings::default();
        for (k, v) in &overrides.0 {
            s.set(k, v)?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Res<()> {
        let k = key;
        match key {
            "seed" => self.seed = Some(as_u64(k, v)?),
            "task.kind" => self.task = parse(k, v)?,
            "task.p" => self.p = as_usize(k, v)?,
            "split.fraction" => self.fraction = parse(k, v)?,
            "model.mode" => {
                self.model.mode = match as_str(k, v)?.as_str() {
                    "regression" => TaskMode::Regression,
                    "classification" => TaskMode::Classification,
                    other => return Err(bad(k, format!("unknown mode {other:?}"))),
                }
            }
            "model.embed_dim" => self.model.embed_dim = as_usize(k, v)?,
            "model.hidden" => self.model.hidden = as_list(k, v, as_usize)?,
            "model.activation" => {
                self.model.activation = match as_str(k, v)?.as_str() {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    other => return Err(bad(k, format!("unknown activation {other:?}"))),
                }
            }
            "model.init_scale" => self.model.init_scale = as_f64(k, v)?,
            "model.target_dim" => self.model.target_dim = as_usize(k, v)?,
            "optim.repr_lr" => self.optim.repr_lr = as_f64(k, v)?,
            "optim.dec_lr" => self.optim.dec_lr = as_f64(k, v)?,
            "optim.repr_wd" => self.optim.repr_wd = as_f64(k, v)?,
            "optim.dec_wd" => self.optim.dec_wd = as_f64(k, v)?,
            "optim.beta1" => self.optim.beta1 = as_f64(k, v)?,
            "optim.beta2" => self.optim.beta2 = as_f64(k, v)?,
            "optim.eps" => self.optim.eps = as_f64(k, v)?,
            "optim.batch_size" => {
                self.optim.batch_size = match as_str(k, v)?.as_str() {
                    "full" => BatchSize::Full,
                    _ => BatchSize::Mini(as_usize(k, v)?),
                }
            }
            "optim.max_steps" => self.optim.max_steps = as_usize(k, v)?,
            "optim.stride" => self.optim.stride = as_usize(k, v)?,
            "optim.early_stop" => {
                self.optim.early_stop = match v {
                    Value::Null => None,
                    Value::String(s) if s == "off" || s == "none" => None,
                    _ => Some(as_usize(k, v)?),
                }
            }
            "phase.grok_gap" => self.grok_gap = as_usize(k, v)?,
            "flow.steps" => self.flow.steps = as_usize(k, v)?,
            "flow.dt" => self.flow.dt = as_f64(k, v)?,
            "flow.stride" => self.flow.stride = as_usize(k, v)?,
            "flow.delta" => self.flow.delta = as_f64(k, v)?,
            "flow.init_scale" => self.flow_init_scale = as_f64(k, v)?,
            "flow.dim" => self.flow_dim = as_usize(k, v)?,
            "mc.fractions" => self.mc_fractions = as_str(k, v)?,
            "mc.trials" => self.mc_trials = as_usize(k, v)?,
            "sweep.preset" => self.sweep.preset = Some(as_str(k, v)?),
            "sweep.seeds" => self.sweep.seeds = Some(as_list(k, v, as_u64)?),
            "sweep.max_runs" => self.sweep.max_runs = Some(as_usize(k, v)?),
            "sweep.x.param" => self.sweep.x_param = Some(parse(k, v)?),
            "sweep.x.values" => self.sweep.x_values = Some(as_list(k, v, as_f64)?),
            "sweep.y.param" => self.sweep.y_param = Some(parse(k, v)?),
            "sweep.y.values" => self.sweep.y_values = Some(as_list(k, v, as_f64)?),
            "sweep.paper_scale" => self.sweep.paper_scale = as_bool(k, v)?,
            _ => return Err(ConfigError(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn master_seed(&self) -> Res<u64> {
        self.seed.ok_or_else(|| ConfigError("a master seed is required (--seed or \"seed\" in the config)".into()))
    }

    pub fn task_spec(&self) -> Res<TaskSpec> {
        match self.task {
            TaskKind::PermutationS3 => Ok(TaskSpec::s3()),
            kind => TaskSpec::new(kind, self.p).map_err(|e| ConfigError(e.to_string())),
        }
    }

    pub fn model_config(&self) -> Res<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            task: self.task_spec()?,
            mode: m.mode,
            embed_dim: m.embed_dim,
            hidden: m.hidden.clone(),
            activation: m.activation,
            init_scale: m.init_scale,
            target_dim: m.target_dim,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn optim_config(&self, seed: u64) -> Res<OptimConfig> {
        let cfg = OptimConfig { seed, ..self.optim.clone() };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn axis(param: Option<HyperParam>, values: &Option<Vec<f64>>, fallback: GridAxis) -> GridAxis {
        match (param, values) {
            (Some(p), Some(v)) => GridAxis { param: p, values: v.clone() },
            (Some(p), None) => GridAxis { param: p, values: fallback.values },
            (None, Some(v)) => GridAxis { param: fallback.param, values: v.clone() },
            (None, None) => fallback,
        }
    }
}

/// `lo:hi:n` → `n` evenly spaced fractions, or a comma list.
pub fn parse_fractions(text: &str) -> Res<Vec<Fraction>> {
    let err = |m: String| ConfigError(format!("fractions {text:?}: {m}"));
    let parts: Vec<&str> = text.split(':').collect();
    let values: Vec<f64> = match parts.as_slice() {
        [lo, hi, n] => {
            let lo: f64 = lo.trim().parse().map_err(|_| err("bad lower bound".into()))?;
            let hi: f64 = hi.trim().parse().map_err(|_| err("bad upper bound".into()))?;
            let n: usize = n.trim().parse().map_err(|_| err("bad count".into()))?;
            if n == 0 || hi < lo {
                return Err(err("need n > 0 and lo <= hi".into()));
            }
            (0..n)
                .map(|k| if n == 1 { lo } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 })
                .map(|x| (x * 1e9).round() / 1e9)
                .collect()
        }
        [list] => list
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| err(format!("bad value {t:?}"))))
            .collect::<Res<_>>()?,
        _ => return Err(err("expected lo:hi:n or a comma list".into())),
    };
    values.into_iter().map(|x| Fraction::float(x).map_err(|e| err(e.to_string()))).collect()
}
