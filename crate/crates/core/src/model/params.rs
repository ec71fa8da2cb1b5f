use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::{Embedding, ModelConfig, Positional};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BlockSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

/// How the tensors of a given [`ModelConfig`] are packed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub(crate) slots: Vec<TensorSlot>,
    pub(crate) total: usize,
    pub(crate) embed_w: usize,
    pub(crate) embed_b: Option<usize>,
    pub(crate) pos: Option<usize>,
    pub(crate) blocks: Vec<BlockSlots>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let f = cfg.mlp_dim();
        let mut slots = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let slot = TensorSlot {
                name,
                shape,
                offset: total,
            };
            total += slot.len();
            slots.push(slot);
            slots.len() - 1
        };
        let (embed_w, embed_b) = match cfg.embedding {
            Embedding::Angular => (
                push("embed.weight".into(), vec![2, d]),
                Some(push("embed.bias".into(), vec![d])),
            ),
            Embedding::Token => (push("embed.table".into(), vec![cfg.q.get() as usize, d]), None),
        };
        let pos = match cfg.positional {
            Positional::None => None,
            Positional::Learned => Some(push("pos.table".into(), vec![cfg.seq_len, d])),
        };
        let blocks = (0..cfg.layers)
            .map(|l| {
                let mut p = |part: &str, shape: Vec<usize>| push(format!("blocks.{l}.{part}"), shape);
                BlockSlots {
                    ln1_g: p("ln1.gain", vec![d]),
                    ln1_b: p("ln1.bias", vec![d]),
                    qkv_w: p("attn.qkv.weight", vec![d, 3 * d]),
                    qkv_b: p("attn.qkv.bias", vec![3 * d]),
                    out_w: p("attn.out.weight", vec![d, d]),
                    out_b: p("attn.out.bias", vec![d]),
                    ln2_g: p("ln2.gain", vec![d]),
                    ln2_b: p("ln2.bias", vec![d]),
                    fc_w: p("mlp.fc.weight", vec![d, f]),
                    fc_b: p("mlp.fc.bias", vec![f]),
                    proj_w: p("mlp.proj.weight", vec![f, d]),
                    proj_b: p("mlp.proj.bias", vec![d]),
                }
            })
            .collect();
        let lnf_g = push("final_ln.gain".into(), vec![d]);
        let lnf_b = push("final_ln.bias".into(), vec![d]);
        let head_w = push("head.weight".into(), vec![d, 2]);
        let head_b = push("head.bias".into(), vec![2]);
        Self {
            slots,
            total,
            embed_w,
            embed_b,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        }
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn total(&self) -> usize {
        self.total
    }

    #[inline]
    pub(crate) fn range(&self, slot: usize) -> std::ops::Range<usize> {
        self.slots[slot].range()
    }
}

/// The full set of learnable tensors, packed in one buffer.
///
/// Gradients use the same type and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub(crate) layout: Arc<Layout>,
    pub(crate) data: Vec<T>,
}

impl<T: Real> Parameters<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![T::zero(); layout.total];
        Self { layout, data }
    }

    pub fn from_data(layout: Arc<Layout>, data: Vec<T>) -> Result<Self> {
        if data.len() != layout.total {
            return Err(Error::Format(format!(
                "parameter buffer has {} values, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The tensor named `name`, if present.
    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .slots
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    #[inline]
    pub(crate) fn slot(&self, slot: usize) -> &[T] {
        &self.data[self.layout.range(slot)]
    }

    #[inline]
    pub(crate) fn slot_mut(&mut self, slot: usize) -> &mut [T] {
        let r = self.layout.range(slot);
        &mut self.data[r]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// First non-finite tensor, by name.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.layout
            .slots
            .iter()
            .find(|s| self.data[s.range()].iter().any(|x| !x.is_finite()))
            .map(|s| s.name.as_str())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    /// Element type conversion (e.g. `f32` training weights to `f64` for checks).
    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }
}

/// Deterministic initialization from `seed`.
///
/// Affine weights and biases: `U(−1/√fan_in, 1/√fan_in)`. Norm gains 1, biases 0.
/// Token and positional tables: `U(−1, 1)` and `U(−0.1, 0.1)`.
pub fn init<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<T>> {
    cfg.validate()?;
    let layout = Arc::new(Layout::new(cfg));
    let mut params = Parameters::<T>::zeros(layout.clone());
    // Each tensor gets its own stream so adding a tensor does not shift the others.
    for (i, slot) in layout.slots.iter().enumerate() {
        let bound = init_bound(cfg, slot);
        let values = &mut params.data[slot.range()];
        match bound {
            Init::Ones => values.iter_mut().for_each(|v| *v = T::one()),
            Init::Zeros => {}
            Init::Uniform(b) => {
                let mut r = rng::stream(seed, Purpose::ModelInit, i as u64);
                for v in values.iter_mut() {
                    *v = T::of(r.random_range(-b..b));
                }
            }
        }
    }
    Ok(params)
}

enum Init {
    Ones,
    Zeros,
    Uniform(f64),
}

fn init_bound(cfg: &ModelConfig, slot: &TensorSlot) -> Init {
    let d = cfg.hidden_dim as f64;
    let name = slot.name.as_str();
    if name.ends_with(".gain") {
        return Init::Ones;
    }
    if name.starts_with("blocks.") && (name.contains(".ln1.") || name.contains(".ln2.")) || name.starts_with("final_ln.") {
        return Init::Zeros;
    }
    let fan_in = match name {
        "embed.weight" | "embed.bias" => 2.0,
        "embed.table" => return Init::Uniform(1.0),
        "pos.table" => return Init::Uniform(0.1),
        _ if name.ends_with("mlp.proj.weight") || name.ends_with("mlp.proj.bias") => cfg.mlp_dim() as f64,
        _ => d,
    };
    Init::Uniform(1.0 / fan_in.sqrt())
}
