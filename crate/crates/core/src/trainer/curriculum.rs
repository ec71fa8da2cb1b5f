//! Two-phase curriculum baseline.
//!
//! Phase 1 trains only on samples with at least half of their entries equal
//! to zero (`X₁`). When the threshold fires, phase 2 continues on either the
//! remaining samples (`X₂`) or the whole set for the rest of the budget.

use serde::{Deserialize, Serialize};

use super::{EvalPlan, TrainConfig, TrainOutcome, Trainer};
use crate::datagen::{Dataset, Sample, SampleStream};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::{derive_seed, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Threshold {
    /// Switch after this fraction of the budget.
    Fraction { fraction: f64 },
    /// Switch at the first evaluation where the loss EMA is below `eps`.
    Loss { eps: f64 },
}

impl Threshold {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Threshold::Fraction { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                Err(Error::Config(format!("threshold fraction {fraction} outside (0, 1)")))
            }
            Threshold::Loss { eps } if !(eps > 0.0) => Err(Error::Config(format!("loss threshold {eps} must be positive"))),
            _ => Ok(()),
        }
    }

    /// Whether phase 1 ends now. Loss thresholds only fire at evaluation points.
    pub fn fires(&self, samples_seen: u64, budget: u64, loss_ema: Option<f64>, at_eval: bool) -> bool {
        match *self {
            Threshold::Fraction { fraction } => samples_seen as f64 >= fraction * budget as f64,
            Threshold::Loss { eps } => at_eval && loss_ema.is_some_and(|l| l < eps),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Threshold::Fraction { fraction } => format!("{}%", fraction * 100.0),
            Threshold::Loss { eps } => format!("loss<{eps:e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase2Data {
    /// Only the samples phase 1 never saw.
    Remainder,
    /// Every sample.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub threshold: Threshold,
    pub phase2: Phase2Data,
}

/// `(X₁, X₂)`: samples with at least half zeros, and the rest.
pub fn split_half_zeros(samples: &[Sample]) -> (Vec<Sample>, Vec<Sample>) {
    samples
        .iter()
        .cloned()
        .partition(|s| 2 * s.a.iter().filter(|&&x| x == 0).count() >= s.a.len())
}

/// Runs both phases; the switch appears in the history as the first record
/// with `phase == Some(2)`, and its sample count is returned.
pub fn curriculum_train(
    model: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    cl: &CurriculumConfig,
    plan: &EvalPlan,
) -> Result<(TrainOutcome, Option<u64>)> {
    cl.threshold.validate()?;
    if data.spec.budget != cfg.budget {
        return Err(Error::Config(format!(
            "dataset budget {} differs from training budget {}",
            data.spec.budget, cfg.budget
        )));
    }
    let (x1, x2) = split_half_zeros(&data.samples);
    if x1.is_empty() {
        return Err(Error::Config("no training sample has at least half zeros".into()));
    }
    let phase2_pool: &[Sample] = match cl.phase2 {
        Phase2Data::Remainder => &x2,
        Phase2Data::Full => &data.samples,
    };
    if phase2_pool.is_empty() {
        return Err(Error::Config("phase 2 data is empty".into()));
    }
    let seed = derive_seed(data.spec.seed, Purpose::Curriculum as u64);
    let mut t = Trainer::with_stream(model, SampleStream::new(&x1, seed, cfg.budget), x1.len() as u64, cfg)?;
    t.phase = Some(1);

    let mut switched_at = None;
    while !t.is_done() {
        t.train_step()?;
        let at_eval = t.step % cfg.eval_every == 0;
        if at_eval || t.is_done() {
            t.record(plan, false)?;
        }
        if switched_at.is_none() && !t.is_done() && cl.threshold.fires(t.samples_seen, cfg.budget, t.loss_ema, at_eval) {
            let rest = cfg.budget - t.samples_seen;
            let stream = SampleStream::new(phase2_pool, derive_seed(seed, 2), rest);
            t.set_phase(2, stream, phase2_pool.len() as u64);
            switched_at = Some(t.samples_seen);
        }
    }
    Ok((t.into_outcome(false), switched_at))
}
