//! Toy encoder–decoder training.
//!
//! Each symbol owns a learnable embedding. A sample `(a, b)` is fed to an MLP
//! decoder as `E_a + E_b` (vector tasks) or as the flattened product
//! `E_a E_b` of `d × d` embedding matrices (S3). Embeddings and decoder get
//! separate AdamW optimizers, and phases are read off the first steps at
//! which training and validation accuracy exceed 90%.
//!
//! Seeds: everything random in a run derives from `OptimConfig::seed`
//! through [`rng::derive_seed`] with fixed stream tags (see [`streams`]).

use std::time::Instant;

use ndarray::{s, Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::domain::{enumerate_samples, DataSplit, Sample, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::parallelogram::{MatrixNorm, ReprMode, Representation, RqiMeter, DEFAULT_DELTA};
use crate::rng::{self, SplitMix64};

/// Stream tags passed to [`rng::derive_seed`].
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const EMBEDDINGS: u64 = 2;
    pub const DECODER: u64 = 3;
    pub const TARGETS: u64 = 4;
    pub const BATCHES: u64 = 5;
}

/// Accuracy level that defines "reached" for phase classification.
pub const ACC_THRESHOLD: f64 = 0.9;

/// `step(val > 90%) − step(train > 90%)` below this counts as comprehension.
pub const DEFAULT_GROK_GAP: usize = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// MSE against fixed random targets `Y_c`.
    Regression,
    /// Softmax cross-entropy over labels.
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|x| x.max(0.0)),
        }
    }

    /// Multiply `grad` by the derivative, given the activation output.
    fn backprop(self, grad: &mut Array2<f64>, out: &Array2<f64>) {
        match self {
            Activation::Tanh => Zip::from(grad).and(out).for_each(|g, &a| *g *= 1.0 - a * a),
            Activation::Relu => Zip::from(grad).and(out).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: TaskSpec,
    pub mode: TaskMode,
    /// Embedding dimension for vector tasks; S3 always uses 3×3 matrices.
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Embedding entries start i.i.d. in `U[−s/2, s/2)`.
    pub init_scale: f64,
    /// Width of the regression targets.
    pub target_dim: usize,
}

impl ModelConfig {
    /// 1-D embeddings and a 1-200-200-30 regression decoder.
    pub fn regression(task: TaskSpec) -> Self {
        ModelConfig {
            task,
            mode: TaskMode::Regression,
            embed_dim: 1,
            hidden: vec![200, 200],
            activation: Activation::Tanh,
            init_scale: 1.0,
            target_dim: 30,
        }
    }

    pub fn repr_mode(&self) -> ReprMode {
        match self.task.kind() {
            TaskKind::PermutationS3 => ReprMode::Matrix { d: 3 },
            _ => ReprMode::Vector { dim: self.embed_dim },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.repr_mode().width()
    }

    pub fn output_dim(&self) -> usize {
        match self.mode {
            TaskMode::Regression => self.target_dim,
            TaskMode::Classification => self.task.num_labels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden.iter().any(|&h| h == 0) || self.target_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("init_scale must be >= 0, got {}", self.init_scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Mini(usize),
}

impl Serialize for BatchSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Mini(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Str(String),
            Num(u64),
        }
        match Raw::deserialize(d)? {
            Raw::Str(s) if s == "full" => Ok(BatchSize::Full),
            Raw::Str(s) => s
                .parse::<usize>()
                .map(BatchSize::Mini)
                .map_err(|_| serde::de::Error::custom(format!("bad batch size {s:?}"))),
            Raw::Num(0) => Err(serde::de::Error::custom("batch size must be positive")),
            Raw::Num(n) => Ok(BatchSize::Mini(n as usize)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub repr_lr: f64,
    pub dec_lr: f64,
    pub repr_wd: f64,
    pub dec_wd: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: BatchSize,
    pub max_steps: usize,
    pub seed: u64,
    /// Metrics are recorded every `stride` steps.
    pub stride: usize,
    /// Stop once validation accuracy has stayed above 90% for this many
    /// consecutive recorded strides (after both thresholds were crossed).
    pub early_stop: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            repr_lr: 1e-3,
            dec_lr: 1e-3,
            repr_wd: 0.0,
            dec_wd: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: BatchSize::Full,
            max_steps: 100_000,
            seed: 0,
            stride: 50,
            early_stop: Some(50),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("repr_lr", self.repr_lr), ("dec_lr", self.dec_lr), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("repr_wd", self.repr_wd), ("dec_wd", self.dec_wd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.max_steps == 0 || self.stride == 0 {
            return Err(Error::Config("max_steps and stride must be positive".into()));
        }
        if self.batch_size == BatchSize::Mini(0) {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected layer; `w` is `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Cached layer inputs from a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `acts[0]` is the input, `acts[l]` the (post-activation) input of layer `l`.
    pub acts: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    /// Layers `widths[0] → widths[1] → …`, each weight and bias drawn from
    /// `U[−1/√fan_in, 1/√fan_in)`.
    pub fn init(widths: &[usize], activation: Activation, seed: u64) -> Self {
        let mut g = rng::rng(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weights = Array2::from_shape_fn((w[0], w[1]), |_| rng::uniform(&mut g, -bound, bound));
                let bias = Array1::from_shape_fn(w[1], |_| rng::uniform(&mut g, -bound, bound));
                Dense { w: weights, b: bias }
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.len()) })
                .collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Forward> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("decoder expects {} inputs, got {}", self.input_dim(), x.ncols())));
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w);
            z += &layer.b;
            if l < last {
                self.activation.apply(&mut z);
            }
            acts.push(h);
            h = z;
        }
        Ok(Forward { acts, output: h })
    }

    /// Gradients of the parameters and of the input, given `dL/doutput`.
    pub fn backward(&self, fwd: &Forward, d_out: &Array2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.clone();
        for l in (0..self.layers.len()).rev() {
            let input = &fwd.acts[l];
            let dw = input.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            grads.push(Dense { w: dw, b: db });
            let mut d_in = delta.dot(&self.layers[l].w.t());
            if l > 0 {
                self.activation.backprop(&mut d_in, input);
            }
            delta = d_in;
        }
        grads.reverse();
        (Mlp { layers: grads, activation: self.activation }, delta)
    }

    /// Flat views over all parameters, layer by layer (`w` then `b`).
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_slice_mut().expect("contiguous"), l.b.as_slice_mut().expect("contiguous")])
            .collect()
    }

    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().expect("contiguous"), l.b.as_slice().expect("contiguous")])
            .collect()
    }
}

/// AdamW hyperparameters for one parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub wd: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment buffers for one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One AdamW update: decoupled decay `θ ← θ(1 − lr·wd)` (skipped when
/// `wd = 0`), then the bias-corrected Adam step.
pub fn adamw_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], hp: &AdamHyper) {
    debug_assert_eq!(params.len(), grads.len());
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    let decay = 1.0 - hp.lr * hp.wd;
    for k in 0..params.len() {
        let g = grads[k];
        if hp.wd > 0.0 {
            params[k] *= decay;
        }
        state.m[k] = hp.beta1 * state.m[k] + (1.0 - hp.beta1) * g;
        state.v[k] = hp.beta2 * state.v[k] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Learnable state of one model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embeddings: Array2<f64>,
    pub decoder: Mlp,
    /// Regression targets, one row per label.
    pub targets: Option<Array2<f64>>,
}

/// Loss value and gradients for one batch.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub loss: f64,
    pub decoder: Mlp,
    pub embeddings: Array2<f64>,
    /// Samples predicted correctly in the batch.
    pub correct: usize,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let p = config.task.p();
        let width = config.input_dim();
        let s = config.init_scale;
        let mut g = rng::rng(rng::derive_seed(seed, streams::EMBEDDINGS));
        let embeddings = Array2::from_shape_fn((p, width), |_| rng::uniform(&mut g, -s / 2.0, s / 2.0));
        let mut widths = vec![width];
        widths.extend(&config.hidden);
        widths.push(config.output_dim());
        let decoder = Mlp::init(&widths, config.activation, rng::derive_seed(seed, streams::DECODER));
        let targets = match config.mode {
            TaskMode::Regression => {
                let mut g = rng::rng(rng::derive_seed(seed, streams::TARGETS));
                Some(Array2::from_shape_fn((config.task.num_labels(), config.target_dim), |_| {
                    rng::standard_normal(&mut g)
                }))
            }
            TaskMode::Classification => None,
        };
        Ok(Model { config: config.clone(), embeddings, decoder, targets })
    }

    pub fn representation(&self) -> Representation {
        Representation::new(self.config.repr_mode(), self.embeddings.clone()).expect("finite embeddings")
    }

    /// Decoder inputs: `E_a + E_b` or the flattened `E_a E_b`.
    pub fn inputs(&self, batch: &[Sample]) -> Array2<f64> {
        let width = self.config.input_dim();
        let mut x = Array2::zeros((batch.len(), width));
        match self.config.repr_mode() {
            ReprMode::Vector { .. } => {
                for (r, s) in batch.iter().enumerate() {
                    let mut row = x.row_mut(r);
                    row.assign(&self.embeddings.row(s.i));
                    row += &self.embeddings.row(s.j);
                }
            }
            ReprMode::Matrix { d } => {
                for (r, s) in batch.iter().enumerate() {
                    let (ea, eb) = (self.embeddings.row(s.i), self.embeddings.row(s.j));
                    for a in 0..d {
                        for k in 0..d {
                            let x_ak = ea[a * d + k];
                            for c in 0..d {
                                x[[r, a * d + c]] += x_ak * eb[k * d + c];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Predicted labels: nearest target (regression) or argmax (classification).
    pub fn predict(&self, output: &Array2<f64>) -> Vec<usize> {
        match &self.targets {
            Some(y) => output
                .rows()
                .into_iter()
                .map(|o| {
                    let dist = |c: usize| -> f64 { o.iter().zip(y.row(c)).map(|(a, b)| (a - b) * (a - b)).sum() };
                    (0..y.nrows()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).expect("labels")
                })
                .collect(),
            None => output
                .rows()
                .into_iter()
                .map(|o| (0..o.len()).max_by(|&a, &b| o[a].total_cmp(&o[b]).then(b.cmp(&a))).expect("outputs"))
                .collect(),
        }
    }

    /// Mean loss over `batch` and its accuracy, without gradients.
    pub fn evaluate(&self, batch: &[Sample]) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(Error::Shape("cannot evaluate an empty batch".into()));
        }
        let fwd = self.decoder.forward(&self.inputs(batch))?;
        let (loss, _) = self.loss_and_output_grad(&fwd.output, batch);
        let correct = self.count_correct(&fwd.output, batch);
        Ok((loss, correct as f64 / batch.len() as f64))
    }

    fn count_correct(&self, output: &Array2<f64>, batch: &[Sample]) -> usize {
        self.predict(output).iter().zip(batch).filter(|(p, s)| **p == s.label).count()
    }

    /// Batch-mean loss and `dL/doutput`.
    fn loss_and_output_grad(&self, output: &Array2<f64>, batch: &[Sample]) -> (f64, Array2<f64>) {
        let n = batch.len() as f64;
        match &self.targets {
            Some(y) => {
                let k = output.ncols() as f64;
                let mut grad = output.clone();
                for (r, s) in batch.iter().enumerate() {
                    let mut row = grad.row_mut(r);
                    row -= &y.row(s.label);
                }
                let loss = grad.iter().map(|d| d * d).sum::<f64>() / (n * k);
                grad *= 2.0 / (n * k);
                (loss, grad)
            }
            None => {
                let mut grad = Array2::zeros(output.raw_dim());
                let mut loss = 0.0;
                for (r, s) in batch.iter().enumerate() {
                    let o = output.row(r);
                    let max = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = o.iter().map(|v| (v - max).exp()).sum();
                    loss += z.ln() + max - o[s.label];
                    for c in 0..o.len() {
                        grad[[r, c]] = (o[c] - max).exp() / z;
                    }
                    grad[[r, s.label]] -= 1.0;
                }
                grad /= n;
                (loss / n, grad)
            }
        }
    }

    /// Batch-mean loss with gradients for the decoder and all embeddings.
    pub fn loss_and_grads(&self, batch: &[Sample]) -> Result<LossGrads> {
        if batch.is_empty() {
            return Err(Error::Shape("batch must be nonempty".into()));
        }
        let fwd = self.decoder.forward(&self.inputs(batch))?;
        let (loss, d_out) = self.loss_and_output_grad(&fwd.output, batch);
        if !loss.is_finite() {
            return Err(Error::Divergence { step: 0, what: format!("loss is {loss}") });
        }
        let correct = self.count_correct(&fwd.output, batch);
        let (decoder, d_x) = self.decoder.backward(&fwd, &d_out);
        let mut embeddings = Array2::zeros(self.embeddings.raw_dim());
        match self.config.repr_mode() {
            ReprMode::Vector { .. } => {
                for (r, s) in batch.iter().enumerate() {
                    let g = d_x.row(r);
                    let mut a = embeddings.row_mut(s.i);
                    a += &g;
                    let mut b = embeddings.row_mut(s.j);
                    b += &g;
                }
            }
            ReprMode::Matrix { d } => {
                // X = A B  ⇒  dA = dX Bᵀ, dB = Aᵀ dX
                for (r, s) in batch.iter().enumerate() {
                    let g = d_x.row(r);
                    let (ea, eb) = (self.embeddings.row(s.i).to_owned(), self.embeddings.row(s.j).to_owned());
                    for a in 0..d {
                        for k in 0..d {
                            let mut da = 0.0;
                            let mut db = 0.0;
                            for c in 0..d {
                                da += g[a * d + c] * eb[k * d + c];
                                db += ea[c * d + a] * g[c * d + k];
                            }
                            embeddings[[s.i, a * d + k]] += da;
                            embeddings[[s.j, a * d + k]] += db;
                        }
                    }
                }
            }
        }
        Ok(LossGrads { loss, decoder, embeddings, correct })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub train_acc: f64,
    /// `NaN` without validation data.
    pub val_acc: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub rqi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Comprehension,
    Grokking,
    Memorization,
    Confusion,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Comprehension, Phase::Grokking, Phase::Memorization, Phase::Confusion];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Comprehension => "comprehension",
            Phase::Grokking => "grokking",
            Phase::Memorization => "memorization",
            Phase::Confusion => "confusion",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub split: DataSplit,
    pub metrics: Vec<MetricRow>,
    pub step_train90: Option<usize>,
    pub step_val90: Option<usize>,
    pub steps_run: usize,
    pub final_train_acc: f64,
    pub final_val_acc: Option<f64>,
    /// Accuracy over the whole dataset `D0` with the final parameters.
    pub full_acc: f64,
    pub final_rqi: f64,
    pub embeddings: Representation,
    pub targets: Option<Vec<Vec<f64>>>,
    /// Set when validation crossed 90% before training did.
    pub anomaly: Option<String>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn has_validation(&self) -> bool {
        !self.split.valid.is_empty()
    }
}

pub const METRICS_CSV_HEADER: &str = "step,train_acc,val_acc,train_loss,val_loss,rqi";

pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    let opt = |x: f64| if x.is_nan() { String::new() } else { x.to_string() };
    for m in &record.metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.step,
            m.train_acc,
            opt(m.val_acc),
            m.train_loss,
            opt(m.val_loss),
            m.rqi
        ));
    }
    out
}

/// Train embeddings and decoder on `split.train`.
///
/// Metrics are computed at every step before the update, so "step `s`"
/// means the parameters after `s` updates. Crossing steps are exact; the
/// recorded table is strided.
pub fn train(model_cfg: &ModelConfig, optim: &OptimConfig, split: &DataSplit) -> Result<RunRecord> {
    model_cfg.validate()?;
    optim.validate()?;
    if split.task != model_cfg.task {
        return Err(Error::Config(format!("split is for {}, model for {}", split.task, model_cfg.task)));
    }
    let started = Instant::now();
    let mut model = Model::init(model_cfg, optim.seed)?;
    let meter = RqiMeter::new(&model_cfg.task, DEFAULT_DELTA, MatrixNorm::default())?;
    let repr_hp = AdamHyper {
        lr: optim.repr_lr,
        wd: optim.repr_wd,
        beta1: optim.beta1,
        beta2: optim.beta2,
        eps: optim.eps,
    };
    let dec_hp = AdamHyper { lr: optim.dec_lr, wd: optim.dec_wd, ..repr_hp };
    let mut repr_state = AdamState::new(model.embeddings.len());
    let mut dec_states: Vec<AdamState> =
        model.decoder.slices().iter().map(|s| AdamState::new(s.len())).collect();
    let mut batch_rng: SplitMix64 = rng::rng(rng::derive_seed(optim.seed, streams::BATCHES));

    let train_set = &split.train;
    let valid_set = &split.valid;
    let mut metrics = Vec::new();
    let mut step_train90 = None;
    let mut step_val90 = None;
    let mut sustained = 0usize;
    let mut steps_run = optim.max_steps;
    let mut batch_buf: Vec<Sample> = train_set.clone();

    for step in 0..=optim.max_steps {
        // full-batch steps reuse the training forward pass for metrics
        let full_batch = match optim.batch_size {
            BatchSize::Full => true,
            BatchSize::Mini(b) => b >= train_set.len(),
        };
        let grads = if full_batch && step < optim.max_steps {
            Some(model.loss_and_grads(train_set).map_err(|e| at_step(e, step))?)
        } else {
            None
        };
        let (train_loss, train_acc) = match &grads {
            Some(g) => (g.loss, g.correct as f64 / train_set.len() as f64),
            None => model.evaluate(train_set).map_err(|e| at_step(e, step))?,
        };
        if !train_loss.is_finite() {
            return Err(Error::Divergence { step, what: format!("training loss is {train_loss}") });
        }
        let (val_loss, val_acc) = if valid_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            model.evaluate(valid_set).map_err(|e| at_step(e, step))?
        };
        if step_train90.is_none() && train_acc > ACC_THRESHOLD {
            step_train90 = Some(step);
        }
        if step_val90.is_none() && val_acc > ACC_THRESHOLD {
            step_val90 = Some(step);
        }

        if step % optim.stride == 0 || step == optim.max_steps {
            let rqi = meter.measure(&model.representation());
            metrics.push(MetricRow { step, train_acc, val_acc, train_loss, val_loss, rqi });
            if let Some(window) = optim.early_stop {
                if step_train90.is_some() && step_val90.is_some() && val_acc > ACC_THRESHOLD {
                    sustained += 1;
                } else {
                    sustained = 0;
                }
                if sustained >= window {
                    steps_run = step;
                    break;
                }
            }
        }
        if step == optim.max_steps {
            break;
        }

        let grads = match grads {
            Some(g) => g,
            None => {
                let BatchSize::Mini(b) = optim.batch_size else { unreachable!() };
                // partial Fisher–Yates: the first b entries become the batch
                for k in 0..b {
                    let j = k + rng::below(&mut batch_rng, batch_buf.len() - k);
                    batch_buf.swap(k, j);
                }
                model.loss_and_grads(&batch_buf[..b]).map_err(|e| at_step(e, step))?
            }
        };
        adamw_step(
            &mut repr_state,
            model.embeddings.as_slice_mut().expect("contiguous"),
            grads.embeddings.as_slice().expect("contiguous"),
            &repr_hp,
        );
        for ((param, grad), state) in
            model.decoder.slices_mut().into_iter().zip(grads.decoder.slices()).zip(dec_states.iter_mut())
        {
            adamw_step(state, param, grad, &dec_hp);
        }
        if model.embeddings.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step: step + 1, what: "non-finite embedding".into() });
        }
    }

    let final_row = *metrics.last().expect("at least one metric row");
    let (_, full_acc) = model.evaluate(&enumerate_samples(&model_cfg.task))?;
    let anomaly = match (step_train90, step_val90) {
        (Some(t), Some(v)) if v < t => Some(format!("validation reached 90% at step {v}, before training at {t}")),
        _ => None,
    };
    Ok(RunRecord {
        model: model_cfg.clone(),
        optim: optim.clone(),
        split: split.clone(),
        metrics,
        step_train90,
        step_val90,
        steps_run,
        final_train_acc: final_row.train_acc,
        final_val_acc: (!valid_set.is_empty()).then_some(final_row.val_acc),
        full_acc,
        final_rqi: final_row.rqi,
        embeddings: model.representation(),
        targets: model.targets.as_ref().map(|y| y.rows().into_iter().map(|r| r.to_vec()).collect()),
        anomaly,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { what, .. } => Error::Divergence { step, what },
        other => other,
    }
}

/// Table-1 phase of a finished run; `None` without validation data.
pub fn classify_phase(record: &RunRecord, grok_gap: usize) -> Option<Phase> {
    if !record.has_validation() {
        return None;
    }
    Some(phase_from_steps(record.step_train90, record.step_val90, grok_gap))
}

pub fn phase_from_steps(train90: Option<usize>, val90: Option<usize>, grok_gap: usize) -> Phase {
    match (train90, val90) {
        (Some(t), Some(v)) => {
            if v.saturating_sub(t) < grok_gap {
                Phase::Comprehension
            } else {
                Phase::Grokking
            }
        }
        (Some(_), None) => Phase::Memorization,
        // validation without training is treated as a failure to learn
        (None, _) => Phase::Confusion,
    }
}

/// Dense gradient of the batch loss w.r.t. the flattened embeddings, for tests.
pub fn flat_embedding_grad(model: &Model, batch: &[Sample]) -> Result<Vec<f64>> {
    Ok(model.loss_and_grads(batch)?.embeddings.into_raw_vec_and_offset().0)
}

/// Slice of hidden units `[lo, hi)` of layer `l`, for symmetry tests.
pub fn permute_hidden(mlp: &Mlp, layer: usize, perm: &[usize]) -> Mlp {
    let mut out = mlp.clone();
    let w_in = &mlp.layers[layer].w;
    let b_in = &mlp.layers[layer].b;
    let w_next = &mlp.layers[layer + 1].w;
    for (dst, &src) in perm.iter().enumerate() {
        out.layers[layer].w.slice_mut(s![.., dst]).assign(&w_in.slice(s![.., src]));
        out.layers[layer].b[dst] = b_in[src];
        out.layers[layer + 1].w.slice_mut(s![dst, ..]).assign(&w_next.slice(s![src, ..]));
    }
    out
}
