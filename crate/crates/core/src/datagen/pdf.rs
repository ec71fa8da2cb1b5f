//! Sparsity PDFs: probability of a training vector having `n` nonzero slots.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::modring::Modulus;

/// Tolerance on the total mass of a table.
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdfKind {
    /// Nonzero-count law of a uniform draw from `Z_q^N`.
    Default,
    /// Flat over `n ∈ [1, N]`.
    Uni,
    /// `P(n) ∝ 1/√(N − n + 1)`: mostly dense vectors, a tail of sparse ones.
    InvSqrt,
    /// User supplied table.
    Custom,
}

impl PdfKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PdfKind::Default => "default",
            PdfKind::Uni => "uni",
            PdfKind::InvSqrt => "inv_sqrt",
            PdfKind::Custom => "custom",
        }
    }
}

impl fmt::Display for PdfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PdfKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(PdfKind::Default),
            "uni" => Ok(PdfKind::Uni),
            "inv_sqrt" => Ok(PdfKind::InvSqrt),
            "custom" => Ok(PdfKind::Custom),
            other => domain(format!(
                "unknown pdf kind {other:?} (expected default, uni, inv_sqrt or custom)"
            )),
        }
    }
}

/// Distribution over the number of nonzero slots `n ∈ [1, N]`.
///
/// `table[n - 1]` is the probability of exactly `n` nonzero slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPdf {
    kind: PdfKind,
    table: Vec<f64>,
}

impl SparsityPdf {
    /// Builds one of the named tables. `q` only matters for [`PdfKind::Default`].
    pub fn new(kind: PdfKind, n_terms: usize, q: Modulus) -> Result<Self> {
        if n_terms == 0 {
            return domain("number of terms N must be at least 1");
        }
        let table = match kind {
            PdfKind::Uni => vec![1.0 / n_terms as f64; n_terms],
            PdfKind::InvSqrt => normalized(
                (1..=n_terms)
                    .map(|n| 1.0 / ((n_terms - n + 1) as f64).sqrt())
                    .collect(),
            ),
            PdfKind::Default => default_table(n_terms, q),
            PdfKind::Custom => {
                return domain("custom pdfs are built with SparsityPdf::custom");
            }
        };
        Ok(Self { kind, table })
    }

    /// A caller-provided table; must be non-negative with unit mass.
    pub fn custom(table: Vec<f64>) -> Result<Self> {
        if table.is_empty() {
            return domain("pdf table must have at least one entry");
        }
        if table.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return domain("pdf entries must be finite and non-negative");
        }
        let mass: f64 = table.iter().sum();
        if (mass - 1.0).abs() > 1e-9 {
            return domain(format!("pdf table sums to {mass}, expected 1"));
        }
        Ok(Self {
            kind: PdfKind::Custom,
            table: normalized(table),
        })
    }

    /// All mass on exactly `n` nonzero slots.
    pub fn point_mass(n_terms: usize, n: usize) -> Result<Self> {
        if n == 0 || n > n_terms {
            return domain(format!("point mass at {n} outside [1, {n_terms}]"));
        }
        let mut table = vec![0.0; n_terms];
        table[n - 1] = 1.0;
        Self::custom(table)
    }

    pub fn kind(&self) -> PdfKind {
        self.kind
    }

    pub fn n_terms(&self) -> usize {
        self.table.len()
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Probability of exactly `n` nonzero slots (zero outside `[1, N]`).
    pub fn prob(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.table.get(n - 1).copied().unwrap_or(0.0)
        }
    }

    pub(crate) fn validate_for(&self, n_terms: usize) -> Result<()> {
        if self.table.len() != n_terms {
            return domain(format!(
                "pdf covers N = {} but the task has N = {n_terms}",
                self.table.len()
            ));
        }
        Ok(())
    }
}

/// Named-table constructor.
pub fn pdf_table(kind: PdfKind, n_terms: usize, q: Modulus) -> Result<SparsityPdf> {
    SparsityPdf::new(kind, n_terms, q)
}

fn normalized(mut table: Vec<f64>) -> Vec<f64> {
    let mass: f64 = table.iter().sum();
    for p in &mut table {
        *p /= mass;
    }
    table
}

/// `C(N, n) ((q−1)/q)^n (1/q)^(N−n)` for `n ∈ [1, N]`, renormalized to drop the
/// all-zero outcome. Evaluated in log space so large `N` does not underflow
/// before normalization.
fn default_table(n_terms: usize, q: Modulus) -> Vec<f64> {
    let q = q.get() as f64;
    let log_nonzero = ((q - 1.0) / q).ln();
    let log_zero = -q.ln();
    let mut log_binom = 0.0; // ln C(N, 0)
    let logs: Vec<f64> = (1..=n_terms)
        .map(|n| {
            log_binom += ((n_terms - n + 1) as f64).ln() - (n as f64).ln();
            log_binom + n as f64 * log_nonzero + (n_terms - n) as f64 * log_zero
        })
        .collect();
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    normalized(logs.iter().map(|l| (l - peak).exp()).collect())
}

/// `KL(p ‖ r) = Σ p(n) ln(p(n)/r(n))`, in nats.
pub fn kl_divergence(p: &SparsityPdf, r: &SparsityPdf) -> Result<f64> {
    if p.n_terms() != r.n_terms() {
        return domain(format!(
            "pdfs cover different N ({} vs {})",
            p.n_terms(),
            r.n_terms()
        ));
    }
    let mut total = 0.0;
    for (n, (&pn, &rn)) in p.table.iter().zip(&r.table).enumerate() {
        if pn == 0.0 {
            continue;
        }
        if rn <= 0.0 {
            return domain(format!(
                "support violation at n = {}: p > 0 but r = 0",
                n + 1
            ));
        }
        total += pn * (pn / rn).ln();
    }
    Ok(total.max(0.0))
}
