//! Encoder-only transformer with a two-output regression head.
//!
//! Input residues enter either through the angular embedding (the unit-circle
//! point lifted by an affine map) or a learned token table; an optional learned
//! positional table is added. The stack is pre-norm: each block computes
//! `x + Attn(LN(x))` then `x + MLP(LN(x))` with a GELU MLP. A final norm is
//! applied per position, positions are mean-pooled, and a linear head emits
//! `(x', y')`.

pub mod checkpoint;
mod params;
pub(crate) mod real;
mod transformer;

use serde::{Deserialize, Serialize};

pub use params::{init, Layout, Parameters, TensorSlot};
pub use real::{matmul, Real};
pub use transformer::{forward, Trace, Workspace};

use crate::error::{domain, Result};
use crate::modring::{decode_angle, CirclePoint, Modulus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    /// `(cos 2πt/q, sin 2πt/q)` followed by a learned affine lift.
    Angular,
    /// Learned `q × hidden` lookup table.
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    None,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub embedding: Embedding,
    pub positional: Positional,
    pub mlp_expansion: usize,
    /// Number of input terms `N`.
    pub seq_len: usize,
    pub q: Modulus,
}

impl ModelConfig {
    /// Hidden 256, 4 heads, 4 layers, angular input, no positional table.
    pub fn standard(seq_len: usize, q: Modulus) -> Self {
        Self {
            hidden_dim: 256,
            heads: 4,
            layers: 4,
            embedding: Embedding::Angular,
            positional: Positional::None,
            mlp_expansion: 4,
            seq_len,
            q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || self.layers == 0 || self.mlp_expansion == 0 {
            return domain("hidden_dim, heads, layers and mlp_expansion must all be positive");
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return domain(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.seq_len == 0 {
            return domain("seq_len must be positive");
        }
        if self.embedding == Embedding::Token && self.q.get() > 1 << 24 {
            return domain(format!("token embedding with vocabulary q = {} is too large", self.q));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_expansion
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total()
    }
}

/// Raw `(x', y')` per sample; no norm constraint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionBatch {
    pub outputs: Vec<CirclePoint>,
}

impl PredictionBatch {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.outputs.iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }

    /// Mean of `‖(x', y')‖` over the batch.
    pub fn mean_magnitude(&self) -> f64 {
        if self.outputs.is_empty() {
            return 0.0;
        }
        self.outputs.iter().map(|p| p.norm()).sum::<f64>() / self.outputs.len() as f64
    }
}

/// A prediction after projection onto the unit circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projected {
    Point { point: CirclePoint, residue: u64 },
    /// The raw output was too close to the origin to decode.
    Degenerate,
}

impl Projected {
    pub fn residue(&self) -> Option<u64> {
        match self {
            Projected::Point { residue, .. } => Some(*residue),
            Projected::Degenerate => None,
        }
    }

    pub fn point(&self) -> Option<CirclePoint> {
        match self {
            Projected::Point { point, .. } => Some(*point),
            Projected::Degenerate => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, Projected::Degenerate)
    }
}

/// Radial projection and decoding, flagging near-origin outputs per sample.
pub fn project_output(pred: &PredictionBatch, q: Modulus) -> Result<Vec<Projected>> {
    pred.outputs
        .iter()
        .map(|&raw| {
            if !(raw.x.is_finite() && raw.y.is_finite()) {
                return domain(format!("non-finite prediction ({}, {})", raw.x, raw.y));
            }
            if raw.is_degenerate() {
                return Ok(Projected::Degenerate);
            }
            let point = raw.project()?;
            Ok(Projected::Point {
                point,
                residue: decode_angle(point, q)?,
            })
        })
        .collect()
}
