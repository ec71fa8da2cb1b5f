use serde::{Deserialize, Serialize};

use crate::datagen::{build_stratified_set, build_test_set, label, Sample, TaskKind};
use crate::error::{domain, Result};
use crate::model::{project_output, ModelConfig, Parameters, Projected, Real, Workspace};
use crate::modring::{encode_angle, within_tau, CirclePoint, Modulus};

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 250;

/// Anything that maps input vectors to raw `(x', y')` outputs.
pub trait Predictor {
    fn predict(&mut self, batch: &[&[u64]]) -> Result<Vec<CirclePoint>>;
}

impl<F> Predictor for F
where
    F: FnMut(&[&[u64]]) -> Result<Vec<CirclePoint>>,
{
    fn predict(&mut self, batch: &[&[u64]]) -> Result<Vec<CirclePoint>> {
        self(batch)
    }
}

/// A parameter snapshot behind the [`Predictor`] interface.
pub struct ModelPredictor<'a, T> {
    params: &'a Parameters<T>,
    cfg: &'a ModelConfig,
    ws: Workspace<T>,
}

impl<'a, T: Real> ModelPredictor<'a, T> {
    pub fn new(params: &'a Parameters<T>, cfg: &'a ModelConfig) -> Self {
        Self {
            params,
            cfg,
            ws: Workspace::new(),
        }
    }
}

impl<T: Real> Predictor for ModelPredictor<'_, T> {
    fn predict(&mut self, batch: &[&[u64]]) -> Result<Vec<CirclePoint>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(EVAL_CHUNK) {
            out.extend(self.ws.forward(self.params, self.cfg, chunk)?.outputs);
        }
        self.ws.clear();
        Ok(out)
    }
}

/// Emits the exact answer's circle point; for plumbing checks.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub task: TaskKind,
    pub q: Modulus,
}

impl Predictor for OraclePredictor {
    fn predict(&mut self, batch: &[&[u64]]) -> Result<Vec<CirclePoint>> {
        batch
            .iter()
            .map(|a| encode_angle(label(&self.task, a, self.q)?, self.q))
            .collect()
    }
}

/// Runs `predictor` over `samples` in chunks.
pub fn predict_samples<P: Predictor + ?Sized>(predictor: &mut P, samples: &[Sample]) -> Result<Vec<CirclePoint>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&[u64]> = chunk.iter().map(|s| s.a.as_slice()).collect();
        let pred = predictor.predict(&refs)?;
        if pred.len() != refs.len() {
            return domain(format!("predictor returned {} outputs for {} inputs", pred.len(), refs.len()));
        }
        out.extend(pred);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauAccuracy {
    pub tau: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub nonzero: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mse: f64,
    pub tau_acc: Vec<TauAccuracy>,
    pub degenerate_rate: f64,
    /// Mean `‖(x', y')‖` of the raw outputs.
    pub mean_magnitude: f64,
}

impl EvalSummary {
    pub fn accuracy_at(&self, tau: f64) -> Option<f64> {
        self.tau_acc.iter().find(|t| t.tau == tau).map(|t| t.accuracy)
    }
}

/// Chord MSE and τ-accuracy of raw outputs against labels.
///
/// Near-origin outputs count as misses and contribute 2 to the MSE, the
/// expected squared chord for an uninformative angle.
pub fn score(outputs: &[CirclePoint], labels: &[u64], q: Modulus, taus: &[f64]) -> Result<EvalSummary> {
    if outputs.is_empty() || outputs.len() != labels.len() {
        return domain(format!(
            "cannot score {} outputs against {} labels",
            outputs.len(),
            labels.len()
        ));
    }
    for &tau in taus {
        if !(tau > 0.0 && tau < 0.5) {
            return domain(format!("tau must lie in (0, 0.5), got {tau}"));
        }
    }
    let projected = project_output(
        &crate::model::PredictionBatch {
            outputs: outputs.to_vec(),
        },
        q,
    )?;
    let mut hits = vec![0usize; taus.len()];
    let mut mse = 0.0;
    let mut degenerate = 0usize;
    for (p, &t) in projected.iter().zip(labels) {
        match p {
            Projected::Degenerate => {
                degenerate += 1;
                mse += 2.0;
            }
            Projected::Point { point, residue } => {
                let truth = encode_angle(t, q)?;
                mse += (truth.x - point.x).powi(2) + (truth.y - point.y).powi(2);
                for (h, &tau) in hits.iter_mut().zip(taus) {
                    if within_tau(*residue, t, q, tau) {
                        *h += 1;
                    }
                }
            }
        }
    }
    let n = outputs.len() as f64;
    Ok(EvalSummary {
        mse: mse / n,
        tau_acc: taus
            .iter()
            .zip(hits)
            .map(|(&tau, h)| TauAccuracy {
                tau,
                accuracy: h as f64 / n,
            })
            .collect(),
        degenerate_rate: degenerate as f64 / n,
        mean_magnitude: outputs.iter().map(|p| p.norm()).sum::<f64>() / n,
    })
}

/// Scores `predictor` on a held-out set.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &mut P,
    test: &[Sample],
    q: Modulus,
    taus: &[f64],
) -> Result<EvalSummary> {
    if test.is_empty() {
        return domain("empty test set");
    }
    let outputs = predict_samples(predictor, test)?;
    let labels: Vec<u64> = test.iter().map(|s| s.label).collect();
    score(&outputs, &labels, q, taus)
}

/// Held-out samples with exactly `nonzero` non-pad entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub nonzero: usize,
    pub samples: Vec<Sample>,
}

pub fn build_strata(
    task: &TaskKind,
    n_terms: usize,
    q: Modulus,
    buckets: &[usize],
    size: usize,
    seed: u64,
) -> Result<Vec<Stratum>> {
    buckets
        .iter()
        .map(|&n| {
            Ok(Stratum {
                nonzero: n,
                samples: build_stratified_set(task, n_terms, q, n, size, seed)?,
            })
        })
        .collect()
}

/// τ-accuracy per nonzero-count bucket.
pub fn stratified_eval<P: Predictor + ?Sized>(
    predictor: &mut P,
    strata: &[Stratum],
    q: Modulus,
    tau: f64,
) -> Result<Vec<BucketAccuracy>> {
    strata
        .iter()
        .map(|s| {
            let summary = evaluate(predictor, &s.samples, q, &[tau])?;
            Ok(BucketAccuracy {
                nonzero: s.nonzero,
                accuracy: summary.tau_acc[0].accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataConfig {
    /// Nonzero counts to probe; empty means every count from 1 to N.
    #[serde(default)]
    pub buckets: Vec<usize>,
    pub size: usize,
    #[serde(default = "default_strata_tau")]
    pub tau: f64,
}

fn default_strata_tau() -> f64 {
    0.005
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub test_size: usize,
    pub seed: u64,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    /// Per-epoch stratified snapshots.
    #[serde(default)]
    pub strata: Option<StrataConfig>,
}

fn default_taus() -> Vec<f64> {
    vec![0.005, 0.01]
}

impl EvalConfig {
    pub fn new(test_size: usize, seed: u64) -> Self {
        Self {
            test_size,
            seed,
            taus: default_taus(),
            strata: None,
        }
    }
}

/// Fixed evaluation data used during training.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    pub test: Vec<Sample>,
    pub taus: Vec<f64>,
    pub strata: Vec<Stratum>,
    pub strata_tau: f64,
}

impl EvalPlan {
    /// Draws the test and stratified sets, keeping the test set disjoint from `exclude`.
    pub fn build(
        cfg: &EvalConfig,
        task: &TaskKind,
        n_terms: usize,
        q: Modulus,
        exclude: &std::collections::HashSet<Vec<u64>>,
    ) -> Result<Self> {
        let test = build_test_set(task, n_terms, q, cfg.test_size, cfg.seed, exclude)?;
        let (strata, strata_tau) = match &cfg.strata {
            None => (Vec::new(), default_strata_tau()),
            Some(s) => {
                let buckets: Vec<usize> = if s.buckets.is_empty() {
                    (1..=n_terms).collect()
                } else {
                    s.buckets.clone()
                };
                (build_strata(task, n_terms, q, &buckets, s.size, cfg.seed)?, s.tau)
            }
        };
        Ok(Self {
            test,
            taus: cfg.taus.clone(),
            strata,
            strata_tau,
        })
    }
}
