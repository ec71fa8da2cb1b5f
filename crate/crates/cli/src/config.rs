//! Experiment files: one TOML document per run.
//!
//! Every table rejects unknown keys, so a typo stops the run before any
//! compute starts instead of silently falling back to a default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sparsemod::datagen::{pdf_table, DatasetSpec, PdfKind, SparsityPdf, TaskKind};
use sparsemod::loss::{LossConfig, DEFAULT_ORIGIN_GUARD};
use sparsemod::lwe::{AttackConfig, DistinguisherConfig, DEFAULT_VERIFY_PAIRS};
use sparsemod::model::{Embedding, ModelConfig, Positional};
use sparsemod::trainer::{AdamConfig, CurriculumConfig, EvalConfig, StrataConfig, TrainConfig};
use sparsemod::Modulus;

/// Output root; relative `output_dir`s resolve against it.
pub const OUT_ENV: &str = "SPARSEMOD_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub eval: EvalSection,
    #[serde(default)]
    pub curriculum: Option<CurriculumConfig>,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub summary: SummarySection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub eval: u64,
    #[serde(default)]
    pub secret: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_task")]
    pub task: TaskKind,
    pub n_terms: usize,
    pub q: u64,
    pub pdf: PdfKind,
    /// Probabilities for `n = 1..=N`; only with `pdf = "custom"`.
    #[serde(default)]
    pub pdf_table: Option<Vec<f64>>,
    pub distinct: u64,
    pub budget: u64,
}

fn default_task() -> TaskKind {
    TaskKind::ModAdd
}

/// Overrides on top of the standard architecture.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub embedding: Option<Embedding>,
    pub positional: Option<Positional>,
    pub mlp_expansion: Option<usize>,
}

/// Overrides on top of the standard optimizer settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub lr_peak: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub eval_every: Option<u64>,
    pub alpha: Option<f64>,
    pub origin_guard: Option<f64>,
    pub adam: Option<AdamConfig>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    /// Save a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub test_size: usize,
    #[serde(default)]
    pub taus: Option<Vec<f64>>,
    #[serde(default)]
    pub strata: Option<StrataConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub hamming: usize,
    pub inits: usize,
    #[serde(default)]
    pub distinguisher: Option<DistinguisherConfig>,
    #[serde(default)]
    pub verify_pairs: Option<usize>,
    #[serde(default)]
    pub fresh_secret_per_init: bool,
    #[serde(default = "yes")]
    pub stop_on_recovery: bool,
}

fn yes() -> bool {
    true
}

/// Bars for the samples-to-threshold column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarySection {
    pub loss_bar: f64,
    pub acc_bar: f64,
    pub tau: f64,
}

impl Default for SummarySection {
    fn default() -> Self {
        Self {
            loss_bar: 0.005,
            acc_bar: 0.9,
            tau: 0.005,
        }
    }
}

/// An experiment with every section resolved into library types.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub checkpoint_every: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.resolve()?;
        if let Some(a) = &cfg.attack {
            cfg.attack_config(a)?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!(
                "{}-n{}-q{}-{}",
                self.data.task.name(),
                self.data.n_terms,
                self.data.q,
                self.data.pdf
            )
        })
    }

    /// `output_dir`, under `$SPARSEMOD_OUT` when it is relative.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn modulus(&self) -> Result<Modulus> {
        Ok(Modulus::new(self.data.q)?)
    }

    pub fn pdf(&self) -> Result<SparsityPdf> {
        let d = &self.data;
        match (d.pdf, &d.pdf_table) {
            (PdfKind::Custom, Some(t)) => {
                if t.len() != d.n_terms {
                    bail!("pdf_table has {} entries, expected N = {}", t.len(), d.n_terms);
                }
                Ok(SparsityPdf::custom(t.clone())?)
            }
            (PdfKind::Custom, None) => bail!("pdf = \"custom\" needs a pdf_table"),
            (_, Some(_)) => bail!("pdf_table is only allowed with pdf = \"custom\""),
            (kind, None) => Ok(pdf_table(kind, d.n_terms, self.modulus()?)?),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let base = ModelConfig::standard(self.data.n_terms, self.modulus()?);
        let cfg = ModelConfig {
            hidden_dim: m.hidden_dim.unwrap_or(base.hidden_dim),
            heads: m.heads.unwrap_or(base.heads),
            layers: m.layers.unwrap_or(base.layers),
            embedding: m.embedding.unwrap_or(base.embedding),
            positional: m.positional.unwrap_or(base.positional),
            mlp_expansion: m.mlp_expansion.unwrap_or(base.mlp_expansion),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, default_alpha: f64) -> Result<TrainConfig> {
        let t = &self.train;
        let base = TrainConfig::standard(self.data.budget, 1000, self.seeds.model);
        let cfg = TrainConfig {
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            lr_peak: t.lr_peak.unwrap_or(base.lr_peak),
            warmup_steps: t.warmup_steps.unwrap_or(base.warmup_steps),
            eval_every: t.eval_every.unwrap_or(base.eval_every),
            loss: LossConfig {
                alpha: t.alpha.unwrap_or(default_alpha),
                origin_guard: t.origin_guard.unwrap_or(DEFAULT_ORIGIN_GUARD),
            },
            adam: t.adam.unwrap_or(base.adam),
            weight_decay: t.weight_decay.unwrap_or(0.0),
            grad_clip: t.grad_clip,
            ..base
        };
        cfg.validate()?;
        if t.checkpoint_every == Some(0) {
            bail!("checkpoint_every must be at least 1");
        }
        Ok(cfg)
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut e = EvalConfig::new(self.eval.test_size, self.seeds.eval);
        if let Some(t) = &self.eval.taus {
            e.taus = t.clone();
        }
        e.strata = self.eval.strata.clone();
        e
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let spec = DatasetSpec {
            task: self.data.task.clone(),
            n_terms: self.data.n_terms,
            q: self.modulus()?,
            pdf: self.pdf()?,
            distinct: self.data.distinct,
            budget: self.data.budget,
            seed: self.seeds.data,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let alpha = if self.attack.is_some() {
            sparsemod::loss::ALPHA_LWE
        } else {
            sparsemod::loss::ALPHA_MODADD
        };
        let model = self.model_config()?;
        let train = self.train_config(alpha)?;
        let eval = self.eval_config();
        for &tau in &eval.taus {
            if !(tau > 0.0 && tau < 0.5) {
                bail!("tau {tau} outside (0, 0.5)");
            }
        }
        if eval.test_size == 0 {
            bail!("eval.test_size must be at least 1");
        }
        if let Some(c) = &self.curriculum {
            c.threshold.validate()?;
        }
        Ok(Resolved {
            data: self.dataset_spec()?,
            model,
            train,
            eval,
            checkpoint_every: self.train.checkpoint_every,
        })
    }

    pub fn attack_config(&self, a: &AttackSection) -> Result<AttackConfig> {
        let r = self.resolve()?;
        if !matches!(self.data.task, TaskKind::ModAdd) {
            bail!("attack experiments generate their own task; leave data.task unset");
        }
        if self.data.pdf == PdfKind::Custom {
            bail!("attack experiments need a named pdf");
        }
        let mut distinguisher = a.distinguisher.unwrap_or_default();
        if a.distinguisher.is_none() {
            distinguisher.seed = self.seeds.secret;
        }
        let cfg = AttackConfig {
            hamming: a.hamming,
            model: r.model,
            train: r.train,
            distinct: self.data.distinct,
            pdf: self.data.pdf,
            inits: a.inits,
            distinguisher,
            verify_pairs: a.verify_pairs.unwrap_or(DEFAULT_VERIFY_PAIRS),
            secret_seed: self.seeds.secret,
            data_seed: self.seeds.data,
            fresh_secret_per_init: a.fresh_secret_per_init,
            stop_on_recovery: a.stop_on_recovery,
            eval: r.eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
