//! Experiment configuration, presets and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::balancing::LossWeights;
use crate::error::{Error, Result};
use crate::layer::Group;
use crate::mixture::MixtureSpec;
use crate::model::{AdapterConfig, ModelConfig, ModelDims, TrainMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GradCheck,
    Balance,
    ImbalanceBaseline,
    Forgetting,
    MixtureSweep,
    RouteDump,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::GradCheck => "grad-check",
            ExperimentKind::Balance => "balance",
            ExperimentKind::ImbalanceBaseline => "imbalance-baseline",
            ExperimentKind::Forgetting => "forgetting",
            ExperimentKind::MixtureSweep => "mixture-sweep",
            ExperimentKind::RouteDump => "route-dump",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab: usize,
    pub d: usize,
    pub blocks: usize,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub rank: usize,
    pub alpha: f64,
    pub tau: f64,
    pub dropout: f64,
    /// One entry per expert; its length is the expert count.
    pub groups: Vec<Group>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub beta: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
    /// Evaluate both held-out splits every this many steps; 0 evaluates only
    /// at the end.
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub seq_len: usize,
    /// Keys in the association table; all of them are pretrained.
    pub n_keys: usize,
    /// Keys held out of fine-tuning and used for the retention evaluation.
    pub eval_keys: usize,
    pub template_tokens: usize,
    /// Fraction of fine-tuning samples that are knowledge recall.
    pub knowledge_fraction: f64,
    pub pretrain_samples: usize,
    pub finetune_samples: usize,
    pub eval_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgettingSection {
    pub pretrain_lr: f64,
    pub pretrain_max_steps: usize,
    pub pretrain_target: f64,
    pub check_every: usize,
    /// Learning rate of the full fine-tuning branch. Defaults to `optim.lr`.
    pub full_lr: Option<f64>,
    /// Learning rate of the single-adapter branch. Defaults to `optim.lr`.
    pub lora_lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub p1: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub var1: f64,
    pub var2: f64,
    pub n: usize,
    pub grid_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    pub d_in: usize,
    pub d_out: usize,
    pub experts: usize,
    pub rank: usize,
    pub tokens: usize,
    pub step: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub precision: Precision,
    pub out: PathBuf,
    /// Mode of single-run training (`balance`).
    pub mode: TrainMode,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub data: DataSection,
    pub forgetting: ForgettingSection,
    pub mixture: MixtureSection,
    pub grad_check: GradCheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        use Group::{Knowledge as K, Task as T};
        Self {
            kind: ExperimentKind::Balance,
            seed: 0,
            precision: Precision::F32,
            out: PathBuf::from("runs/balance"),
            mode: TrainMode::FrozenLoramoe,
            model: ModelSection {
                vocab: 64,
                d: 32,
                blocks: 2,
                n_classes: 4,
            },
            adapter: AdapterSection {
                rank: 4,
                alpha: 32.0,
                tau: 1.0,
                dropout: 0.05,
                groups: vec![K, K, K, T, T, T],
            },
            loss: LossSection { beta: 0.1, delta: 0.1 },
            optim: OptimSection {
                lr: 2e-4,
                steps: 1000,
                batch_size: 32,
                log_every: 50,
                eval_every: 0,
            },
            data: DataSection {
                seq_len: 8,
                n_keys: 32,
                eval_keys: 16,
                template_tokens: 8,
                knowledge_fraction: 0.5,
                pretrain_samples: 2048,
                finetune_samples: 2048,
                eval_samples: 512,
            },
            forgetting: ForgettingSection {
                pretrain_lr: 0.05,
                pretrain_max_steps: 3000,
                pretrain_target: 0.9,
                check_every: 100,
                full_lr: None,
                lora_lr: None,
            },
            mixture: MixtureSection {
                p1: 0.3,
                mu1: 0.0,
                mu2: 4.0,
                var1: 1.0,
                var2: 1.0,
                n: 5000,
                grid_step: 0.05,
            },
            grad_check: GradCheckSection {
                d_in: 8,
                d_out: 6,
                experts: 4,
                rank: 2,
                tokens: 12,
                step: 1e-5,
                tolerance: 1e-4,
            },
        }
    }
}

impl ExperimentConfig {
    /// Canonical settings for each experiment kind. Learning rates are tuned
    /// for plain SGD at this scale.
    pub fn preset(kind: ExperimentKind) -> Self {
        let mut cfg = Self {
            kind,
            out: PathBuf::from(format!("runs/{}", kind.as_str())),
            ..Self::default()
        };
        match kind {
            ExperimentKind::GradCheck => {
                cfg.precision = Precision::F64;
            }
            ExperimentKind::Balance | ExperimentKind::RouteDump => {
                cfg.optim.lr = 0.05;
                cfg.optim.steps = 2000;
                cfg.optim.log_every = 50;
            }
            ExperimentKind::ImbalanceBaseline => {
                cfg.optim.lr = 0.05;
                cfg.optim.steps = 2000;
                cfg.optim.log_every = 100;
            }
            ExperimentKind::Forgetting => {
                cfg.optim.lr = 0.05;
                cfg.optim.steps = 2000;
                cfg.optim.log_every = 100;
                cfg.data.knowledge_fraction = 0.2;
                cfg.forgetting.lora_lr = Some(0.005);
            }
            ExperimentKind::MixtureSweep => {
                cfg.precision = Precision::F64;
            }
        }
        cfg
    }

    /// Parses a JSON config. Missing fields take the preset of the given
    /// `kind` (default `balance`); unknown fields are rejected.
    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_json_with_kind(text, ExperimentKind::Balance)
    }

    /// Like [`Self::from_json_str`] with `default_kind` used when the file
    /// has no `kind`.
    pub fn from_json_with_kind(text: &str, default_kind: ExperimentKind) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("invalid JSON: {e}")]))?;
        if !user.is_object() {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        }
        let kind = match user.get("kind") {
            None => default_kind,
            Some(k) => serde_json::from_value(k.clone()).map_err(|e| Error::Config(vec![format!("kind: {e}")]))?,
        };
        let mut merged = serde_json::to_value(Self::preset(kind))?;
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path, default_kind: ExperimentKind) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        Self::from_json_with_kind(&text, default_kind)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn experts(&self) -> usize {
        self.adapter.groups.len()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.model.vocab,
            d: self.model.d,
            blocks: self.model.blocks,
            n_classes: self.model.n_classes,
        }
    }

    pub fn model_config(&self, mode: TrainMode) -> ModelConfig {
        ModelConfig {
            dims: self.dims(),
            adapter: AdapterConfig {
                rank: self.adapter.rank,
                alpha: self.adapter.alpha,
                tau: self.adapter.tau,
                dropout: self.adapter.dropout,
                groups: self.adapter.groups.clone(),
            },
            mode,
            seed: self.seed,
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.loss.beta, self.loss.delta)
    }

    pub fn mixture_spec(&self, seed: u64) -> MixtureSpec {
        let m = &self.mixture;
        MixtureSpec {
            p1: m.p1,
            mu1: m.mu1,
            mu2: m.mu2,
            var1: m.var1,
            var2: m.var2,
            n: m.n,
            seed,
        }
    }

    /// Task tokens are whatever the vocabulary has left after keys and
    /// template tokens.
    pub fn task_tokens(&self) -> usize {
        self.model
            .vocab
            .saturating_sub(self.data.n_keys + self.data.template_tokens)
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let mut range = |name: &str, v: usize, lo: usize, hi: usize| {
            if v < lo || v > hi {
                p.push(format!("{name} must be in [{lo}, {hi}], got {v}"));
            }
        };
        let m = &self.model;
        range("model.vocab", m.vocab, 2, 100_000);
        range("model.d", m.d, 1, 4096);
        range("model.blocks", m.blocks, 1, 64);
        range("model.n_classes", m.n_classes, 2, 1024);
        let a = &self.adapter;
        range("adapter.groups (expert count)", a.groups.len(), 1, 64);
        range("adapter.rank", a.rank, 1, m.d.max(1));
        let o = &self.optim;
        range("optim.steps", o.steps, 0, 1_000_000);
        range("optim.batch_size", o.batch_size, 1, 4096);
        range("optim.log_every", o.log_every, 1, 1_000_000);
        range("optim.eval_every", o.eval_every, 0, 1_000_000);
        let d = &self.data;
        range("data.seq_len", d.seq_len, 2, 1024);
        range("data.n_keys", d.n_keys, 2, 100_000);
        range("data.eval_keys", d.eval_keys, 1, d.n_keys.saturating_sub(1).max(1));
        range("data.template_tokens", d.template_tokens, 1, 100_000);
        range("data.pretrain_samples", d.pretrain_samples, 1, 1_000_000);
        range("data.finetune_samples", d.finetune_samples, 1, 1_000_000);
        range("data.eval_samples", d.eval_samples, 1, 1_000_000);
        let f = &self.forgetting;
        range("forgetting.pretrain_max_steps", f.pretrain_max_steps, 1, 1_000_000);
        range("forgetting.check_every", f.check_every, 1, 1_000_000);
        let x = &self.mixture;
        range("mixture.n", x.n, 10, 10_000_000);
        let gc = &self.grad_check;
        range("grad_check.d_in", gc.d_in, 1, 256);
        range("grad_check.d_out", gc.d_out, 1, 256);
        range("grad_check.experts", gc.experts, 1, 64);
        range("grad_check.rank", gc.rank, 1, gc.d_in.min(gc.d_out).max(1));
        range("grad_check.tokens", gc.tokens, 1, 4096);

        let mut real = |name: &str, v: f64, ok: bool, want: &str| {
            if !v.is_finite() || !ok {
                p.push(format!("{name} must be {want}, got {v}"));
            }
        };
        real("adapter.alpha", a.alpha, a.alpha > 0.0, "positive");
        real("adapter.tau", a.tau, a.tau > 0.0, "positive");
        real("adapter.dropout", a.dropout, (0.0..1.0).contains(&a.dropout), "in [0, 1)");
        real("loss.beta", self.loss.beta, self.loss.beta >= 0.0, "non-negative");
        real("loss.delta", self.loss.delta, (0.0..=1.0).contains(&self.loss.delta), "in [0, 1]");
        real("optim.lr", o.lr, o.lr > 0.0, "positive");
        real(
            "data.knowledge_fraction",
            d.knowledge_fraction,
            (0.0..=1.0).contains(&d.knowledge_fraction),
            "in [0, 1]",
        );
        real("forgetting.pretrain_lr", f.pretrain_lr, f.pretrain_lr > 0.0, "positive");
        real(
            "forgetting.pretrain_target",
            f.pretrain_target,
            (0.0..=1.0).contains(&f.pretrain_target),
            "in [0, 1]",
        );
        if let Some(lr) = f.full_lr {
            real("forgetting.full_lr", lr, lr > 0.0, "positive");
        }
        if let Some(lr) = f.lora_lr {
            real("forgetting.lora_lr", lr, lr > 0.0, "positive");
        }
        real("mixture.p1", x.p1, x.p1 > 0.0 && x.p1 <= 0.5, "in (0, 0.5]");
        real("mixture.var1", x.var1, x.var1 > 0.0, "positive");
        real("mixture.var2", x.var2, x.var2 > 0.0, "positive");
        real("mixture.mu1", x.mu1, true, "finite");
        real("mixture.mu2", x.mu2, true, "finite");
        real("mixture.grid_step", x.grid_step, x.grid_step > 0.0 && x.grid_step < 0.5, "in (0, 0.5)");
        real("grad_check.step", gc.step, gc.step > 0.0, "positive");
        real("grad_check.tolerance", gc.tolerance, gc.tolerance > 0.0, "positive");

        if a.groups.len() >= 2 && !(a.groups.contains(&Group::Knowledge) && a.groups.contains(&Group::Task)) {
            p.push("adapter.groups must contain both knowledge and task experts".into());
        }
        let task = self.task_tokens();
        if d.n_keys + d.template_tokens + m.n_classes > m.vocab || task < m.n_classes {
            p.push(format!(
                "model.vocab {} too small for {} keys, {} template tokens and at least {} task tokens",
                m.vocab, d.n_keys, d.template_tokens, m.n_classes
            ));
        }
        if d.n_keys < m.n_classes {
            p.push(format!(
                "data.n_keys {} must be at least model.n_classes {}",
                d.n_keys, m.n_classes
            ));
        }
        let lead = majority_count(d.seq_len);
        if (m.n_classes - 1).saturating_mul(lead - 1) < d.seq_len - lead {
            p.push(format!(
                "data.seq_len {} cannot carry a unique majority over {} classes",
                d.seq_len, m.n_classes
            ));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Occurrences of the label colour in a task sample of length `seq_len`.
pub fn majority_count(seq_len: usize) -> usize {
    (seq_len / 2).max(1)
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
