//! Training and test data for every task.
//!
//! A training vector is built by drawing its nonzero count `n` from a
//! [`SparsityPdf`], drawing `n` residues uniformly from `[0, q)`, padding with
//! `N − n` copies of the task's pad value (zero, or `K` for the
//! K-substitution task) and shuffling. A [`Dataset`] holds `d` distinct such
//! vectors; its [`SampleStream`] replays them `b / d` times in a per-epoch
//! shuffled order.

mod pdf;
pub mod store;
mod task;

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use pdf::{kl_divergence, pdf_table, PdfKind, SparsityPdf, MASS_TOLERANCE};
pub use task::{label, TaskKind};

use crate::error::{domain, Error, Result};
use crate::modring::Modulus;
use crate::rng::{self, Purpose};

/// Attempts per index before declaring the distinct-sample space exhausted.
const MAX_DRAWS_PER_SAMPLE: usize = 10_000;

/// Default held-out test set size.
pub const DEFAULT_TEST_SIZE: usize = 100_000;

/// One `(a, b)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub a: Vec<u64>,
    pub label: u64,
}

impl Sample {
    /// Slots not equal to `pad`.
    pub fn nonzero_count(&self, pad: u64) -> usize {
        self.a.iter().filter(|&&x| x != pad).count()
    }
}

/// Draws a vector with structural zeros according to `pdf`.
pub fn sample_vector<R: Rng + ?Sized>(
    pdf: &SparsityPdf,
    n_terms: usize,
    q: Modulus,
    rng: &mut R,
) -> Result<Vec<u64>> {
    pdf.validate_for(n_terms)?;
    Ok(draw_padded(&sampler(pdf)?, n_terms, q, 0, rng).0)
}

/// Like [`sample_vector`] but the padding slots hold `k`.
pub fn sample_vector_k<R: Rng + ?Sized>(
    pdf: &SparsityPdf,
    n_terms: usize,
    q: Modulus,
    k: u64,
    rng: &mut R,
) -> Result<Vec<u64>> {
    pdf.validate_for(n_terms)?;
    q.check(k)?;
    Ok(draw_padded(&sampler(pdf)?, n_terms, q, k, rng).0)
}

pub(crate) fn sampler(pdf: &SparsityPdf) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(pdf.table()).map_err(|e| Error::Domain(format!("invalid pdf: {e}")))
}

/// Returns the vector and the number of drawn (non-structural) slots.
pub(crate) fn draw_padded<R: Rng + ?Sized>(
    counts: &WeightedIndex<f64>,
    n_terms: usize,
    q: Modulus,
    pad: u64,
    rng: &mut R,
) -> (Vec<u64>, usize) {
    let n = counts.sample(rng) + 1;
    let mut a = Vec::with_capacity(n_terms);
    for _ in 0..n {
        a.push(rng.random_range(0..q.get()));
    }
    a.resize(n_terms, pad);
    a.shuffle(rng);
    (a, n)
}

/// Everything needed to regenerate a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: TaskKind,
    pub n_terms: usize,
    pub q: Modulus,
    pub pdf: SparsityPdf,
    /// Number of distinct samples `d`.
    pub distinct: u64,
    /// Training budget `b` in samples; each distinct sample is seen `b / d` times.
    pub budget: u64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_terms == 0 {
            return domain("N must be at least 1");
        }
        self.task.validate(self.n_terms, self.q)?;
        self.pdf.validate_for(self.n_terms)?;
        if self.distinct == 0 {
            return domain("distinct sample count must be at least 1");
        }
        if self.distinct > self.budget {
            return domain(format!(
                "distinct count {} exceeds budget {}",
                self.distinct, self.budget
            ));
        }
        if !self.budget.is_multiple_of(self.distinct) {
            return domain(format!(
                "budget {} is not a multiple of the distinct count {}",
                self.budget, self.distinct
            ));
        }
        Ok(())
    }

    pub fn repeats(&self) -> u64 {
        self.budget / self.distinct
    }
}

/// The `d` distinct samples of a [`DatasetSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

/// Materializes the distinct samples of `spec`.
///
/// Sample `i` is drawn from its own random stream keyed by `(seed, i)`, and
/// duplicates are redrawn from the same stream, so the result does not depend
/// on how generation is scheduled.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let space = (spec.q.get() as u128).checked_pow(spec.n_terms as u32);
    if space.is_some_and(|s| s < spec.distinct as u128) {
        return Err(Error::Exhausted(format!(
            "{} distinct samples requested but q^N = {}",
            spec.distinct,
            space.unwrap()
        )));
    }
    let counts = sampler(&spec.pdf)?;
    let pad = spec.task.pad_value();
    let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(spec.distinct as usize);
    let mut samples = Vec::with_capacity(spec.distinct as usize);
    for i in 0..spec.distinct {
        let mut rng = rng::stream(spec.seed, Purpose::TrainSample, i);
        let mut draws = 0;
        let a = loop {
            let (a, _) = draw_padded(&counts, spec.n_terms, spec.q, pad, &mut rng);
            if !seen.contains(&a) {
                break a;
            }
            draws += 1;
            if draws >= MAX_DRAWS_PER_SAMPLE {
                return Err(Error::Exhausted(format!(
                    "could not find a new distinct sample after {draws} draws at index {i}"
                )));
            }
        };
        seen.insert(a.clone());
        let label = task::label_unchecked(&spec.task, &a, spec.q);
        samples.push(Sample { a, label });
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn epochs(&self) -> u64 {
        self.spec.repeats()
    }

    /// The set of input vectors, for excluding them from test sets.
    pub fn vector_set(&self) -> HashSet<Vec<u64>> {
        self.samples.iter().map(|s| s.a.clone()).collect()
    }

    /// Indices of samples that fail label re-derivation.
    pub fn audit_labels(&self) -> Result<Vec<usize>> {
        let mut bad = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.a.len() != self.spec.n_terms
                || label(&self.spec.task, &s.a, self.spec.q)? != s.label
            {
                bad.push(i);
            }
        }
        Ok(bad)
    }

    /// The training stream: `b` samples, `b / d` shuffled passes.
    pub fn stream(&self) -> SampleStream<'_> {
        SampleStream::new(&self.samples, self.spec.seed, self.spec.budget)
    }
}

/// Epoch-shuffled replay of a fixed sample pool.
///
/// Epoch `e` visits every sample once in the order given by a permutation
/// seeded from `(seed, e)`.
#[derive(Debug, Clone)]
pub struct SampleStream<'a> {
    pool: &'a [Sample],
    seed: u64,
    total: u64,
    position: u64,
    order: Vec<u32>,
    order_epoch: Option<u64>,
}

impl<'a> SampleStream<'a> {
    pub fn new(pool: &'a [Sample], seed: u64, total: u64) -> Self {
        Self {
            pool,
            seed,
            total,
            position: 0,
            order: Vec::new(),
            order_epoch: None,
        }
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn remaining(&self) -> u64 {
        self.total - self.position
    }

    pub fn epoch_len(&self) -> u64 {
        self.pool.len() as u64
    }

    /// Index of the epoch the next sample belongs to.
    pub fn epoch(&self) -> u64 {
        self.position / self.epoch_len().max(1)
    }

    /// Jumps to an absolute position (used when resuming from a checkpoint).
    pub fn seek(&mut self, position: u64) -> Result<()> {
        if position > self.total {
            return domain(format!("seek to {position} past stream end {}", self.total));
        }
        self.position = position;
        Ok(())
    }

    /// Permutation used for epoch `epoch`.
    pub fn epoch_order(pool_len: usize, seed: u64, epoch: u64) -> Vec<u32> {
        let mut order: Vec<u32> = (0..pool_len as u32).collect();
        order.shuffle(&mut rng::stream(seed, Purpose::EpochOrder, epoch));
        order
    }

    /// Up to `n` next samples.
    pub fn next_batch(&mut self, n: usize) -> Vec<&'a Sample> {
        self.by_ref().take(n).collect()
    }
}

impl<'a> Iterator for SampleStream<'a> {
    type Item = &'a Sample;

    fn next(&mut self) -> Option<&'a Sample> {
        if self.position >= self.total || self.pool.is_empty() {
            return None;
        }
        let len = self.pool.len() as u64;
        let epoch = self.position / len;
        if self.order_epoch != Some(epoch) {
            self.order = Self::epoch_order(self.pool.len(), self.seed, epoch);
            self.order_epoch = Some(epoch);
        }
        let idx = self.order[(self.position % len) as usize] as usize;
        self.position += 1;
        Some(&self.pool[idx])
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rem = self.remaining() as usize;
        (rem, Some(rem))
    }
}

/// Held-out samples drawn uniformly from `Z_q^N`, none of which appear in
/// `exclude`.
pub fn build_test_set(
    task: &TaskKind,
    n_terms: usize,
    q: Modulus,
    size: usize,
    seed: u64,
    exclude: &HashSet<Vec<u64>>,
) -> Result<Vec<Sample>> {
    if size == 0 {
        return domain("test set size must be at least 1");
    }
    task.validate(n_terms, q)?;
    let mut out = Vec::with_capacity(size);
    for i in 0..size as u64 {
        let mut rng = rng::stream(seed, Purpose::TestSample, i);
        let mut draws = 0;
        let a = loop {
            let a: Vec<u64> = (0..n_terms).map(|_| rng.random_range(0..q.get())).collect();
            if !exclude.contains(&a) {
                break a;
            }
            draws += 1;
            if draws >= MAX_DRAWS_PER_SAMPLE {
                return Err(Error::Exhausted(format!(
                    "every drawn test vector collides with the training set (index {i})"
                )));
            }
        };
        let label = task::label_unchecked(task, &a, q);
        out.push(Sample { a, label });
    }
    Ok(out)
}

/// Samples with exactly `nonzero` non-pad slots; the other values are drawn
/// from `[0, q)` minus the pad value.
pub fn build_stratified_set(
    task: &TaskKind,
    n_terms: usize,
    q: Modulus,
    nonzero: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if nonzero == 0 || nonzero > n_terms {
        return domain(format!("bucket {nonzero} outside [1, {n_terms}]"));
    }
    task.validate(n_terms, q)?;
    let pad = task.pad_value();
    let mut out = Vec::with_capacity(size);
    for i in 0..size as u64 {
        let mut rng = rng::stream(seed, Purpose::Stratified, (nonzero as u64) << 40 | i);
        let mut a: Vec<u64> = (0..nonzero)
            .map(|_| {
                // uniform over the q - 1 values other than pad
                let v = rng.random_range(0..q.get() - 1);
                if v >= pad {
                    v + 1
                } else {
                    v
                }
            })
            .collect();
        a.resize(n_terms, pad);
        a.shuffle(&mut rng);
        let label = task::label_unchecked(task, &a, q);
        out.push(Sample { a, label });
    }
    Ok(out)
}
