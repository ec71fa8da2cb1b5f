//! Training loop, evaluation, and the curriculum baseline.
//!
//! Updates are Adam with a linear warm-up followed by cosine decay to zero
//! at the last step of the sample budget. Every run is a pure function of
//! its seeds: model init, data, and epoch order each draw from their own
//! stream.

mod curriculum;
mod eval;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use curriculum::{curriculum_train, split_half_zeros, CurriculumConfig, Phase2Data, Threshold};
pub use eval::{
    build_strata, evaluate, predict_samples, score, stratified_eval, BucketAccuracy, EvalConfig, EvalPlan,
    EvalSummary, ModelPredictor, OraclePredictor, Predictor, Stratum, StrataConfig, TauAccuracy, EVAL_CHUNK,
};

use crate::datagen::{Dataset, Sample, SampleStream};
use crate::error::{Error, Result};
use crate::loss::{batch_loss, LossConfig};
use crate::model::checkpoint::{Checkpoint, Moments};
use crate::model::{init, ModelConfig, Parameters, Workspace};

/// Decay of the training-loss moving average.
pub const LOSS_EMA_DECAY: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    /// Total training samples `b`.
    pub budget: u64,
    pub eval_every: u64,
    /// Model initialization seed.
    pub seed: u64,
    pub loss: LossConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Decoupled (AdamW-style) weight decay; 0 is plain Adam.
    #[serde(default)]
    pub weight_decay: f64,
    /// Rescale the batch gradient to at most this global L2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Batch 250, peak lr 3e-5, 1000 warm-up steps, α = 1e-4.
    pub fn standard(budget: u64, eval_every: u64, seed: u64) -> Self {
        Self {
            batch_size: 250,
            lr_peak: 3e-5,
            warmup_steps: 1000,
            budget,
            eval_every,
            seed,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            weight_decay: 0.0,
            grad_clip: None,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.budget / self.batch_size as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if self.budget == 0 || !self.budget.is_multiple_of(self.batch_size as u64) {
            return bad(format!(
                "budget {} must be a positive multiple of batch_size {}",
                self.budget, self.batch_size
            ));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Learning rate for update number `step` (1-based; `step = 0` is before training).
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps.max(1);
    let total = cfg.total_steps();
    if step < w || total <= w {
        return cfg.lr_peak * step.min(w) as f64 / w as f64;
    }
    let progress = ((step - w) as f64 / (total - w) as f64).min(1.0);
    cfg.lr_peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam moments plus the update rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub weight_decay: f64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, weight_decay: f64, len: usize) -> Self {
        Self {
            cfg,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let c1 = (1.0 - self.cfg.beta1.powi(self.t as i32)) as f32;
        let c2 = (1.0 - self.cfg.beta2.powi(self.t as i32)) as f32;
        let eps = self.cfg.eps as f32;
        let lr = lr as f32;
        let decay = lr * self.weight_decay as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let step = (*m / c1) / ((*v / c2).sqrt() + eps);
            *p -= lr * step + decay * *p;
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub samples_seen: u64,
    /// Completed passes over the distinct samples.
    pub epoch: u64,
    /// Curriculum phase (1 or 2); absent for ordinary runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<u8>,
    pub lr: f64,
    /// Mean batch loss since the previous record.
    pub train_loss: f64,
    pub train_loss_ema: f64,
    pub eval_mse: f64,
    pub tau_acc: Vec<TauAccuracy>,
    /// Filled at epoch boundaries when strata are configured.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stratified: Vec<BucketAccuracy>,
    pub degenerate_rate: f64,
    /// Mean raw output magnitude over the test set.
    pub mean_magnitude: f64,
}

impl MetricsRecord {
    pub fn accuracy_at(&self, tau: f64) -> Option<f64> {
        self.tau_acc.iter().find(|t| t.tau == tau).map(|t| t.accuracy)
    }

    pub fn bucket(&self, nonzero: usize) -> Option<f64> {
        self.stratified.iter().find(|b| b.nonzero == nonzero).map(|b| b.accuracy)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// First `samples_seen` with train loss below `loss_bar` and τ-accuracy at
/// least `acc_bar`; `None` if never reached.
pub fn samples_to_threshold(history: &[MetricsRecord], loss_bar: f64, acc_bar: f64, tau: f64) -> Option<u64> {
    history
        .iter()
        .find(|r| r.train_loss < loss_bar && r.accuracy_at(tau).is_some_and(|a| a >= acc_bar))
        .map(|r| r.samples_seen)
}

/// Returned by the evaluation hook to stop training early.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub history: Vec<MetricsRecord>,
    /// Whether the hook ended training before the budget ran out.
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    train: TrainConfig,
    step: u64,
    stream_position: u64,
    loss_ema: Option<f64>,
    interval_loss: f64,
    interval_steps: u64,
    next_epoch_mark: u64,
    phase: Option<u8>,
    history: Vec<MetricsRecord>,
}

/// Owns parameters, optimizer state and the data stream of one run.
pub struct Trainer<'d> {
    model: ModelConfig,
    cfg: TrainConfig,
    params: Parameters<f32>,
    grads: Parameters<f32>,
    adam: Adam,
    ws: Workspace<f32>,
    stream: SampleStream<'d>,
    /// Number of distinct samples, for epoch accounting.
    epoch_len: u64,
    step: u64,
    samples_seen: u64,
    last_grad_norm: f64,
    loss_ema: Option<f64>,
    interval_loss: f64,
    interval_steps: u64,
    next_epoch_mark: u64,
    phase: Option<u8>,
    history: Vec<MetricsRecord>,
}

impl<'d> Trainer<'d> {
    /// A fresh run over `data`; the stream length must equal the budget.
    pub fn new(model: &ModelConfig, data: &'d Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if data.spec.budget != cfg.budget {
            return Err(Error::Config(format!(
                "dataset budget {} differs from training budget {}",
                data.spec.budget, cfg.budget
            )));
        }
        if data.spec.n_terms != model.seq_len || data.spec.q != model.q {
            return Err(Error::Config("dataset (N, q) does not match the model".into()));
        }
        Self::with_stream(model, data.stream(), data.len() as u64, cfg)
    }

    /// A fresh run over an arbitrary stream (used by the curriculum baseline).
    pub fn with_stream(model: &ModelConfig, stream: SampleStream<'d>, epoch_len: u64, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params: Parameters<f32> = init(model, cfg.seed)?;
        let n = params.len();
        Ok(Self {
            model: model.clone(),
            cfg: cfg.clone(),
            grads: Parameters::zeros(params.layout().clone()),
            params,
            adam: Adam::new(cfg.adam, cfg.weight_decay, n),
            ws: Workspace::new(),
            stream,
            epoch_len: epoch_len.max(1),
            step: 0,
            samples_seen: 0,
            last_grad_norm: 0.0,
            loss_ema: None,
            interval_loss: 0.0,
            interval_steps: 0,
            next_epoch_mark: epoch_len.max(1),
            phase: None,
            history: Vec::new(),
        })
    }

    /// Continues a run saved by [`Trainer::checkpoint`] on the same data.
    pub fn resume(ck: &Checkpoint<f32>, data: &'d Dataset) -> Result<Self> {
        let state: TrainerState = serde_json::from_value(ck.state.clone())?;
        let mut t = Self::new(&ck.model, data, &state.train)?;
        let moments = ck
            .moments
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        t.params = ck.params.clone();
        t.adam.m = moments.m.clone();
        t.adam.v = moments.v.clone();
        t.adam.t = state.step;
        t.step = state.step;
        t.samples_seen = state.step * t.cfg.batch_size as u64;
        t.stream.seek(state.stream_position)?;
        t.loss_ema = state.loss_ema;
        t.interval_loss = state.interval_loss;
        t.interval_steps = state.interval_steps;
        t.next_epoch_mark = state.next_epoch_mark;
        t.phase = state.phase;
        t.history = state.history;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        let state = TrainerState {
            train: self.cfg.clone(),
            step: self.step,
            stream_position: self.stream.position(),
            loss_ema: self.loss_ema,
            interval_loss: self.interval_loss,
            interval_steps: self.interval_steps,
            next_epoch_mark: self.next_epoch_mark,
            phase: self.phase,
            history: self.history.clone(),
        };
        Ok(Checkpoint {
            model: self.model.clone(),
            step: self.step,
            seed: self.cfg.seed,
            params: self.params.clone(),
            moments: Some(Moments {
                m: self.adam.m.clone(),
                v: self.adam.v.clone(),
            }),
            state: serde_json::to_value(state)?,
        })
    }

    pub fn params(&self) -> &Parameters<f32> {
        &self.params
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.total_steps()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Global gradient norm of the last step, before clipping.
    pub fn last_grad_norm(&self) -> f64 {
        self.last_grad_norm
    }

    pub fn loss_ema(&self) -> Option<f64> {
        self.loss_ema
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.history
    }

    pub(crate) fn set_phase(&mut self, phase: u8, stream: SampleStream<'d>, epoch_len: u64) {
        self.phase = Some(phase);
        self.stream = stream;
        self.epoch_len = epoch_len.max(1);
        self.next_epoch_mark = self.samples_seen + self.epoch_len;
    }

    /// One optimizer update; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        if self.is_done() {
            return Err(Error::Usage("training budget already spent".into()));
        }
        let batch: Vec<&Sample> = self.stream.next_batch(self.cfg.batch_size);
        if batch.len() != self.cfg.batch_size {
            return Err(Error::Exhausted(format!(
                "data stream ran dry at step {} ({} of {} samples)",
                self.step,
                batch.len(),
                self.cfg.batch_size
            )));
        }
        let refs: Vec<&[u64]> = batch.iter().map(|s| s.a.as_slice()).collect();
        let labels: Vec<u64> = batch.iter().map(|s| s.label).collect();
        let out = self.ws.forward(&self.params, &self.model, &refs)?;
        let step = self.step + 1;
        if !out.all_finite() {
            return Err(self.non_finite(step, "model output", f64::NAN));
        }
        let (loss, dout) = batch_loss(&out.outputs, &labels, self.model.q, &self.cfg.loss)?;
        if !loss.is_finite() {
            return Err(self.non_finite(step, "loss", loss));
        }
        self.ws.backward(&self.params, &self.model, &dout, &mut self.grads)?;
        self.ws.clear();
        let norm = self.grads.as_slice().iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        self.last_grad_norm = norm;
        if let Some(clip) = self.cfg.grad_clip {
            if norm > clip {
                let scale = (clip / norm) as f32;
                self.grads.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
            }
        }
        let lr = lr_at(step, &self.cfg);
        self.adam.update(self.params.as_mut_slice(), self.grads.as_slice(), lr);
        if !self.params.all_finite() {
            return Err(self.non_finite(step, "parameters", loss));
        }
        self.step = step;
        self.samples_seen += self.cfg.batch_size as u64;
        self.loss_ema = Some(match self.loss_ema {
            None => loss,
            Some(e) => LOSS_EMA_DECAY * e + (1.0 - LOSS_EMA_DECAY) * loss,
        });
        self.interval_loss += loss;
        self.interval_steps += 1;
        Ok(loss)
    }

    fn non_finite(&self, step: u64, what: &str, loss: f64) -> Error {
        let tensor = self.params.first_non_finite().unwrap_or("none");
        let grad = self.grads.first_non_finite().unwrap_or("none");
        Error::NonFinite {
            step,
            detail: format!(
                "{what} became non-finite (batch loss {loss}, lr {:.3e}, loss ema {:?}, \
                 first bad parameter tensor {tensor}, first bad gradient tensor {grad})",
                lr_at(step, &self.cfg),
                self.loss_ema
            ),
        }
    }

    /// Evaluates the current parameters and appends a record.
    pub fn record(&mut self, plan: &EvalPlan, with_strata: bool) -> Result<&MetricsRecord> {
        let q = self.model.q;
        let mut predictor = ModelPredictor::new(&self.params, &self.model);
        let summary = evaluate(&mut predictor, &plan.test, q, &plan.taus)?;
        let stratified = if with_strata && !plan.strata.is_empty() {
            stratified_eval(&mut predictor, &plan.strata, q, plan.strata_tau)?
        } else {
            Vec::new()
        };
        let train_loss = if self.interval_steps > 0 {
            self.interval_loss / self.interval_steps as f64
        } else {
            f64::NAN
        };
        self.interval_loss = 0.0;
        self.interval_steps = 0;
        self.history.push(MetricsRecord {
            step: self.step,
            samples_seen: self.samples_seen,
            epoch: self.samples_seen / self.epoch_len,
            phase: self.phase,
            lr: lr_at(self.step, &self.cfg),
            train_loss,
            train_loss_ema: self.loss_ema.unwrap_or(f64::NAN),
            eval_mse: summary.mse,
            tau_acc: summary.tau_acc,
            stratified,
            degenerate_rate: summary.degenerate_rate,
            mean_magnitude: summary.mean_magnitude,
        });
        Ok(self.history.last().unwrap())
    }

    /// Trains to the end of the budget (or until `hook` says stop),
    /// recording every `eval_every` steps, at each epoch boundary, and at the end.
    pub fn run<H>(&mut self, plan: &EvalPlan, mut hook: H) -> Result<bool>
    where
        H: FnMut(&MetricsRecord, &Parameters<f32>, &ModelConfig) -> Result<Control>,
    {
        while !self.is_done() {
            self.train_step()?;
            let epoch_end = self.samples_seen >= self.next_epoch_mark;
            if epoch_end {
                while self.next_epoch_mark <= self.samples_seen {
                    self.next_epoch_mark += self.epoch_len;
                }
            }
            if self.step.is_multiple_of(self.cfg.eval_every) || epoch_end || self.is_done() {
                self.record(plan, epoch_end || self.is_done())?;
                let rec = self.history.last().unwrap().clone();
                if hook(&rec, &self.params, &self.model)? == Control::Stop {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    pub fn into_outcome(self, stopped_early: bool) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            history: self.history,
            stopped_early,
        }
    }
}

/// Trains a fresh model on `data` for the full budget.
pub fn train(model: &ModelConfig, data: &Dataset, cfg: &TrainConfig, plan: &EvalPlan) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, data, cfg)?;
    let stopped = t.run(plan, |_, _, _| Ok(Control::Continue))?;
    Ok(t.into_outcome(stopped))
}
