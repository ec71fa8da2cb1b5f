//! Error-free LWE with sparse binary secrets.
//!
//! A model trained on pairs `(a, a·s mod q)` is probed coordinate by
//! coordinate: shifting `a_i` by `Δ` moves the answer by `s_i·Δ`, so the
//! predicted angle should rotate by `2πΔ/q` exactly on the support of `s`.
//! Candidates are accepted only if they reproduce a fresh set of pairs.

use std::f64::consts::{PI, TAU};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{build_dataset, pdf_table, sample_vector, Dataset, DatasetSpec, PdfKind, Sample, SparsityPdf, TaskKind};
use crate::error::{domain, Error, Result};
use crate::model::ModelConfig;
use crate::modring::{CirclePoint, Modulus};
use crate::rng::{self, derive_seed, Purpose};
use crate::trainer::{Control, EvalConfig, EvalPlan, MetricsRecord, ModelPredictor, Predictor, TrainConfig, Trainer};

/// Held-out pairs used to confirm a candidate.
pub const DEFAULT_VERIFY_PAIRS: usize = 64;
pub const DEFAULT_PROBES: usize = 64;
pub const DEFAULT_MARGIN: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LweSecret {
    pub s: Vec<u8>,
    pub hamming: usize,
}

impl LweSecret {
    pub fn from_bits(s: Vec<u8>) -> Result<Self> {
        if s.iter().any(|&b| b > 1) {
            return domain("secret entries must be 0 or 1");
        }
        let hamming = s.iter().filter(|&&b| b == 1).count();
        Ok(Self { s, hamming })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// `a·s mod q`.
    pub fn dot(&self, a: &[u64], q: Modulus) -> u64 {
        dot(&self.s, a, q)
    }

    pub fn bit_string(&self) -> String {
        bit_string(&self.s)
    }
}

fn dot(s: &[u8], a: &[u64], q: Modulus) -> u64 {
    let mut acc: u128 = 0;
    for (&b, &x) in s.iter().zip(a) {
        if b == 1 {
            acc += x as u128;
        }
    }
    (acc % q.get() as u128) as u64
}

pub fn bit_string(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
}

/// A secret with a uniformly random support of size `h`.
pub fn gen_secret<R: Rng + ?Sized>(n_terms: usize, h: usize, rng: &mut R) -> Result<LweSecret> {
    if h == 0 || h > n_terms {
        return domain(format!("hamming weight {h} outside [1, {n_terms}]"));
    }
    let mut s = vec![0u8; n_terms];
    for i in index::sample(rng, n_terms, h) {
        s[i] = 1;
    }
    Ok(LweSecret { s, hamming: h })
}

/// `count` pairs with rows drawn through `pdf` and labels `a·s mod q`.
pub fn gen_lwe_pairs<R: Rng + ?Sized>(
    secret: &LweSecret,
    count: usize,
    q: Modulus,
    pdf: &SparsityPdf,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    (0..count)
        .map(|_| {
            let a = sample_vector(pdf, secret.len(), q, rng)?;
            let label = secret.dot(&a, q);
            Ok(Sample { a, label })
        })
        .collect()
}

/// True iff `a·candidate ≡ b (mod q)` for every pair.
pub fn verify_secret(candidate: &[u8], pairs: &[Sample], q: Modulus) -> Result<bool> {
    if pairs.is_empty() {
        return domain("verification needs at least one pair");
    }
    for p in pairs {
        if p.a.len() != candidate.len() {
            return domain(format!(
                "candidate has {} entries, pair has {}",
                candidate.len(),
                p.a.len()
            ));
        }
    }
    Ok(pairs.iter().all(|p| dot(candidate, &p.a, q) == p.label))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistinguisherConfig {
    pub probes: usize,
    /// Coordinate shift; `None` means `⌊q/2⌋`.
    #[serde(default)]
    pub shift: Option<u64>,
    /// Accepted deviation from the expected rotation, as a fraction of it.
    pub margin: f64,
    pub seed: u64,
}

impl Default for DistinguisherConfig {
    fn default() -> Self {
        Self {
            probes: DEFAULT_PROBES,
            shift: None,
            margin: DEFAULT_MARGIN,
            seed: 0,
        }
    }
}

impl DistinguisherConfig {
    pub fn shift_for(&self, q: Modulus) -> u64 {
        self.shift.unwrap_or(q.get() / 2)
    }

    pub fn validate(&self, q: Modulus) -> Result<()> {
        let d = self.shift_for(q);
        if self.probes == 0 {
            return domain("at least one probe is required");
        }
        if d == 0 || d >= q.get() {
            return domain(format!("shift {d} outside (0, {q})"));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return domain(format!("margin {} outside (0, 1)", self.margin));
        }
        Ok(())
    }
}

fn wrap_pi(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

/// Per-coordinate mean rotation of the predicted angle under the shift.
pub fn coordinate_displacements<P: Predictor + ?Sized>(
    predictor: &mut P,
    n_terms: usize,
    q: Modulus,
    probe_pdf: &SparsityPdf,
    cfg: &DistinguisherConfig,
) -> Result<Vec<f64>> {
    cfg.validate(q)?;
    let shift = cfg.shift_for(q);
    let mut out = Vec::with_capacity(n_terms);
    for i in 0..n_terms {
        let mut r = rng::stream(cfg.seed, Purpose::Probe, i as u64);
        let mut inputs: Vec<Vec<u64>> = Vec::with_capacity(2 * cfg.probes);
        for _ in 0..cfg.probes {
            let a = sample_vector(probe_pdf, n_terms, q, &mut r)?;
            let mut shifted = a.clone();
            shifted[i] = q.add(shifted[i], shift);
            inputs.push(a);
            inputs.push(shifted);
        }
        let refs: Vec<&[u64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let pred = predictor.predict(&refs)?;
        if pred.len() != refs.len() {
            return domain("predictor returned the wrong number of outputs");
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for pair in pred.chunks_exact(2) {
            let d = raw_angle(pair[1]) - raw_angle(pair[0]);
            sx += d.cos();
            sy += d.sin();
        }
        out.push(sy.atan2(sx));
    }
    Ok(out)
}

fn raw_angle(p: CirclePoint) -> f64 {
    p.y.atan2(p.x)
}

/// Candidate secret from the coordinate-shift test.
pub fn distinguish<P: Predictor + ?Sized>(
    predictor: &mut P,
    n_terms: usize,
    q: Modulus,
    probe_pdf: &SparsityPdf,
    cfg: &DistinguisherConfig,
) -> Result<Vec<u8>> {
    let expected = wrap_pi(TAU * cfg.shift_for(q) as f64 / q.get() as f64);
    let window = cfg.margin * expected.abs();
    Ok(coordinate_displacements(predictor, n_terms, q, probe_pdf, cfg)?
        .into_iter()
        .map(|d| u8::from(wrap_pi(d - expected).abs() <= window))
        .collect())
}

/// `a·s mod q` on the circle; the reference predictor for the distinguisher.
pub struct SumOracle {
    pub secret: Vec<u8>,
    pub q: Modulus,
}

impl Predictor for SumOracle {
    fn predict(&mut self, batch: &[&[u64]]) -> Result<Vec<CirclePoint>> {
        batch
            .iter()
            .map(|a| crate::modring::encode_angle(dot(&self.secret, a, self.q), self.q))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub hamming: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Distinct training pairs `d`; the budget is `train.budget`.
    pub distinct: u64,
    #[serde(default = "default_pdf")]
    pub pdf: PdfKind,
    /// Model initializations `R`.
    pub inits: usize,
    #[serde(default)]
    pub distinguisher: DistinguisherConfig,
    #[serde(default = "default_verify_pairs")]
    pub verify_pairs: usize,
    pub secret_seed: u64,
    pub data_seed: u64,
    /// Draw a new secret for every init instead of one per experiment.
    #[serde(default)]
    pub fresh_secret_per_init: bool,
    /// End an init as soon as its candidate verifies.
    #[serde(default = "default_true")]
    pub stop_on_recovery: bool,
    pub eval: EvalConfig,
}

fn default_pdf() -> PdfKind {
    PdfKind::InvSqrt
}

fn default_verify_pairs() -> usize {
    DEFAULT_VERIFY_PAIRS
}

fn default_true() -> bool {
    true
}

impl AttackConfig {
    pub fn n_terms(&self) -> usize {
        self.model.seq_len
    }

    pub fn q(&self) -> Modulus {
        self.model.q
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.distinguisher.validate(self.q())?;
        if self.inits == 0 {
            return Err(Error::Config("inits must be at least 1".into()));
        }
        if self.verify_pairs == 0 {
            return Err(Error::Config("verify_pairs must be at least 1".into()));
        }
        if self.hamming == 0 || self.hamming > self.n_terms() {
            return Err(Error::Config(format!(
                "hamming weight {} outside [1, {}]",
                self.hamming,
                self.n_terms()
            )));
        }
        Ok(())
    }

    /// The secret used by init `k`.
    pub fn secret(&self, k: usize) -> Result<LweSecret> {
        let index = if self.fresh_secret_per_init { k as u64 } else { 0 };
        gen_secret(self.n_terms(), self.hamming, &mut rng::stream(self.secret_seed, Purpose::Secret, index))
    }

    pub fn dataset_spec(&self, secret: &LweSecret) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            task: TaskKind::LweDot { secret: secret.s.clone() },
            n_terms: self.n_terms(),
            q: self.q(),
            pdf: pdf_table(self.pdf, self.n_terms(), self.q())?,
            distinct: self.distinct,
            budget: self.train.budget,
            seed: self.data_seed,
        })
    }

    /// Fresh pairs with uniform rows, never part of the training data.
    pub fn verification_pairs(&self, secret: &LweSecret) -> Result<Vec<Sample>> {
        let pdf = pdf_table(PdfKind::Default, self.n_terms(), self.q())?;
        let mut r = rng::stream(self.secret_seed, Purpose::Verify, 0);
        gen_lwe_pairs(secret, self.verify_pairs, self.q(), &pdf, &mut r)
    }
}

/// Outcome of one model initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitResult {
    pub init: usize,
    pub model_seed: u64,
    pub secret: String,
    pub candidate: String,
    pub verified: bool,
    /// Training samples seen when the candidate first verified.
    pub samples_at_recovery: Option<u64>,
    /// Set when training aborted; the init counts as failed.
    pub error: Option<String>,
    /// `(epoch, samples_seen, mean output magnitude)` at each evaluation.
    pub magnitudes: Vec<(u64, u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub inits: Vec<InitResult>,
    pub recovered: usize,
    pub recovery_fraction: f64,
}

impl RecoveryResult {
    fn from_inits(inits: Vec<InitResult>) -> Self {
        let recovered = inits.iter().filter(|r| r.verified).count();
        let recovery_fraction = recovered as f64 / inits.len().max(1) as f64;
        Self {
            inits,
            recovered,
            recovery_fraction,
        }
    }

    /// One JSON line per init, then the aggregate.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.inits {
            s.push_str(&serde_json::to_string(r).expect("serialize"));
            s.push('\n');
        }
        s.push_str(
            &serde_json::json!({
                "recovered": self.recovered,
                "inits": self.inits.len(),
                "recovery_fraction": self.recovery_fraction,
            })
            .to_string(),
        );
        s.push('\n');
        s
    }
}

/// Runs the distinguisher and the verifier once.
pub fn recover<P: Predictor + ?Sized>(
    predictor: &mut P,
    cfg: &AttackConfig,
    probe_pdf: &SparsityPdf,
    verify: &[Sample],
) -> Result<(Vec<u8>, bool)> {
    let candidate = distinguish(predictor, cfg.n_terms(), cfg.q(), probe_pdf, &cfg.distinguisher)?;
    let ok = verify_secret(&candidate, verify, cfg.q())?;
    Ok((candidate, ok))
}

/// Attack with a supplied predictor per init instead of a trained model.
pub fn run_attack_with<P, F>(cfg: &AttackConfig, mut make: F) -> Result<RecoveryResult>
where
    P: Predictor,
    F: FnMut(&LweSecret) -> P,
{
    cfg.validate()?;
    let probe_pdf = pdf_table(cfg.pdf, cfg.n_terms(), cfg.q())?;
    let mut inits = Vec::with_capacity(cfg.inits);
    for k in 0..cfg.inits {
        let secret = cfg.secret(k)?;
        let verify = cfg.verification_pairs(&secret)?;
        let mut p = make(&secret);
        let (candidate, verified) = recover(&mut p, cfg, &probe_pdf, &verify)?;
        inits.push(InitResult {
            init: k,
            model_seed: 0,
            secret: secret.bit_string(),
            candidate: bit_string(&candidate),
            verified,
            samples_at_recovery: verified.then_some(0),
            error: None,
            magnitudes: Vec::new(),
        });
    }
    Ok(RecoveryResult::from_inits(inits))
}

/// Trains `R` models on pairs for a fixed secret and tries to read it out
/// after every evaluation.
pub fn run_attack(cfg: &AttackConfig, mut on_record: impl FnMut(usize, &MetricsRecord)) -> Result<RecoveryResult> {
    cfg.validate()?;
    let probe_pdf = pdf_table(cfg.pdf, cfg.n_terms(), cfg.q())?;
    let mut shared: Option<(LweSecret, Dataset, EvalPlan)> = None;
    let mut inits = Vec::with_capacity(cfg.inits);
    for k in 0..cfg.inits {
        let secret = cfg.secret(k)?;
        if shared.as_ref().is_none_or(|(s, _, _)| *s != secret) {
            let data = build_dataset(&cfg.dataset_spec(&secret)?)?;
            let task = data.spec.task.clone();
            let plan = EvalPlan::build(&cfg.eval, &task, cfg.n_terms(), cfg.q(), &data.vector_set())?;
            shared = Some((secret.clone(), data, plan));
        }
        let (_, data, plan) = shared.as_ref().unwrap();
        let verify = cfg.verification_pairs(&secret)?;
        let mut train = cfg.train.clone();
        train.seed = derive_seed(cfg.train.seed, k as u64);
        let mut result = InitResult {
            init: k,
            model_seed: train.seed,
            secret: secret.bit_string(),
            candidate: bit_string(&vec![0; cfg.n_terms()]),
            verified: false,
            samples_at_recovery: None,
            error: None,
            magnitudes: Vec::new(),
        };
        let run = (|| -> Result<()> {
            let mut trainer = Trainer::new(&cfg.model, data, &train)?;
            trainer.run(plan, |rec, params, model| {
                on_record(k, rec);
                result.magnitudes.push((rec.epoch, rec.samples_seen, rec.mean_magnitude));
                let mut p = ModelPredictor::new(params, model);
                let (candidate, ok) = recover(&mut p, cfg, &probe_pdf, &verify)?;
                if !result.verified {
                    result.candidate = bit_string(&candidate);
                }
                if ok && !result.verified {
                    result.verified = true;
                    result.samples_at_recovery = Some(rec.samples_seen);
                    if cfg.stop_on_recovery {
                        return Ok(Control::Stop);
                    }
                }
                Ok(Control::Continue)
            })?;
            Ok(())
        })();
        if let Err(e) = run {
            result.error = Some(e.to_string());
            result.verified = false;
            result.samples_at_recovery = None;
        }
        inits.push(result);
    }
    Ok(RecoveryResult::from_inits(inits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secret_weight_and_full_support() {
        let mut r = rng::stream(1, Purpose::Secret, 0);
        for h in 1..=10 {
            let s = gen_secret(10, h, &mut r).unwrap();
            assert_eq!(s.s.iter().filter(|&&b| b == 1).count(), h);
        }
        assert_eq!(gen_secret(5, 5, &mut r).unwrap().s, vec![1; 5]);
        assert!(gen_secret(5, 0, &mut r).is_err());
        assert!(gen_secret(5, 6, &mut r).is_err());
    }

    #[test]
    fn constant_predictor_gives_zero_candidate() {
        let q = Modulus::new(257).unwrap();
        let pdf = pdf_table(PdfKind::Default, 8, q).unwrap();
        let mut constant = |b: &[&[u64]]| Ok(vec![CirclePoint::new(0.3, -0.2); b.len()]);
        let c = distinguish(&mut constant, 8, q, &pdf, &DistinguisherConfig::default()).unwrap();
        assert_eq!(c, vec![0; 8]);
    }

    #[test]
    fn wrap_is_into_minus_pi_pi() {
        assert!((wrap_pi(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_pi(-0.1) + 0.1).abs() < 1e-12);
        assert!((wrap_pi(PI) - PI).abs() < 1e-12);
    }
}
