//! Toy residual backbone whose feed-forward linear layers can carry
//! adapters.
//!
//! Tokens are embedded, passed through `blocks` residual blocks
//! `h ← h + W2·gelu(W1·h + b1) + b2` applied token-wise, mean-pooled per
//! sample and projected by a bias-free head. In the frozen modes only
//! adapter and router parameters train.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{Group, LayerConfig, LoraLayer, LoraMoeLayer, Phase};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Segments, Snapshot, Tensor, Var};
use crate::{derive_seed, DetRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    FrozenOnly,
    FullFineTune,
    FrozenLora,
    FrozenLoramoe,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::FrozenOnly => "frozen-only",
            TrainMode::FullFineTune => "full-fine-tune",
            TrainMode::FrozenLora => "frozen-lora",
            TrainMode::FrozenLoramoe => "frozen-loramoe",
        }
    }

    pub fn base_trainable(self) -> bool {
        self == TrainMode::FullFineTune
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d: usize,
    pub blocks: usize,
    pub n_classes: usize,
}

impl ModelDims {
    pub fn hidden(&self) -> usize {
        4 * self.d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub tau: f64,
    pub dropout: f64,
    pub groups: Vec<Group>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub adapter: AdapterConfig,
    pub mode: TrainMode,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub enum FfnLinear {
    Dense { weight: ParamId, bias: ParamId },
    Lora(LoraLayer),
    Moe(LoraMoeLayer),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ffn_in: FfnLinear,
    pub ffn_out: FfnLinear,
}

/// A batch of samples flattened along the token axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub segments: Segments,
}

pub struct ModelOutput {
    /// `M × n_classes`
    pub logits: Var,
    /// Router weights of every wrapped layer, `T × N` each, in layer order.
    pub router_weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ToyBackbone<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub embedding: ParamId,
    pub blocks: Vec<Block>,
    pub head: ParamId,
}

const STREAM_BASE: u64 = 1;
const STREAM_ADAPTER: u64 = 1000;

fn validate(cfg: &ModelConfig) -> Result<()> {
    let d = &cfg.dims;
    let mut problems = Vec::new();
    for (name, v) in [("vocab", d.vocab), ("d", d.d), ("blocks", d.blocks), ("n_classes", d.n_classes)] {
        if v == 0 {
            problems.push(format!("model.{name} must be positive"));
        }
    }
    if d.n_classes == 1 {
        problems.push("model.n_classes must be at least 2".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

/// Deterministic base parameters: embedding, dense FFN weights and head.
fn base_tensors<S: Real>(dims: &ModelDims, seed: u64) -> Vec<(String, Tensor<S>)> {
    let mut rng = DetRng::seed_from_u64(derive_seed(seed, STREAM_BASE));
    let (d, h) = (dims.d, dims.hidden());
    let mut out = vec![("embedding".to_string(), Tensor::randn(&[dims.vocab, d], 1.0, &mut rng))];
    for b in 0..dims.blocks {
        out.push((
            format!("block{b}.ffn_in.weight"),
            Tensor::randn(&[d, h], (1.0 / d as f64).sqrt(), &mut rng),
        ));
        out.push((format!("block{b}.ffn_in.bias"), Tensor::zeros(&[h])));
        out.push((
            format!("block{b}.ffn_out.weight"),
            Tensor::randn(&[h, d], (1.0 / h as f64).sqrt(), &mut rng),
        ));
        out.push((format!("block{b}.ffn_out.bias"), Tensor::zeros(&[d])));
    }
    out.push((
        "head".to_string(),
        Tensor::randn(&[d, dims.n_classes], (1.0 / d as f64).sqrt(), &mut rng),
    ));
    out
}

/// Names of the backbone parameters, in construction order.
pub fn base_param_names(dims: &ModelDims) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for b in 0..dims.blocks {
        for layer in ["ffn_in", "ffn_out"] {
            names.push(format!("block{b}.{layer}.weight"));
            names.push(format!("block{b}.{layer}.bias"));
        }
    }
    names.push("head".to_string());
    names
}

/// Builds a model from the seed alone.
pub fn build_model<S: Real>(cfg: &ModelConfig) -> Result<ToyBackbone<S>> {
    validate(cfg)?;
    let base = Snapshot {
        entries: base_tensors(&cfg.dims, cfg.seed),
    };
    build_model_from_base(cfg, &base)
}

/// Builds a model whose backbone weights are copied from `base` (for
/// example a pretrained snapshot). Adapters are freshly initialized.
pub fn build_model_from_base<S: Real>(cfg: &ModelConfig, base: &Snapshot<S>) -> Result<ToyBackbone<S>> {
    validate(cfg)?;
    let expected = base_tensors::<S>(&cfg.dims, 0);
    let fetch = |name: &str| -> Result<Tensor<S>> {
        let want = expected
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .expect("known name");
        match base.get(name) {
            Some(t) if t.shape() == want.as_slice() => Ok(t.clone()),
            Some(t) => Err(Error::Snapshot(format!("{name}: shape {:?}, expected {want:?}", t.shape()))),
            None => Err(Error::Snapshot(format!("{name} missing from base snapshot"))),
        }
    };

    let trainable = cfg.mode.base_trainable();
    let mut store = ParamStore::new();
    let embedding = store.push("embedding", fetch("embedding")?, trainable);
    let (d, h) = (cfg.dims.d, cfg.dims.hidden());

    let mut blocks = Vec::with_capacity(cfg.dims.blocks);
    for b in 0..cfg.dims.blocks {
        let mut make = |layer: &str, index: u64, d_in: usize, d_out: usize| -> Result<FfnLinear> {
            let name = format!("block{b}.{layer}");
            let w = fetch(&format!("{name}.weight"))?;
            let bias = fetch(&format!("{name}.bias"))?;
            let layer_cfg = LayerConfig {
                d_in,
                d_out,
                rank: cfg.adapter.rank,
                alpha: cfg.adapter.alpha,
                tau: cfg.adapter.tau,
                dropout: cfg.adapter.dropout,
                groups: cfg.adapter.groups.clone(),
                seed: derive_seed(cfg.seed, STREAM_ADAPTER + index),
            };
            Ok(match cfg.mode {
                TrainMode::FrozenOnly | TrainMode::FullFineTune => FfnLinear::Dense {
                    weight: store.push(format!("{name}.weight"), w, trainable),
                    bias: store.push(format!("{name}.bias"), bias, trainable),
                },
                TrainMode::FrozenLora => {
                    FfnLinear::Lora(LoraLayer::init(&mut store, &name, &layer_cfg, Some((w, Some(bias))))?)
                }
                TrainMode::FrozenLoramoe => {
                    FfnLinear::Moe(LoraMoeLayer::init(&mut store, &name, &layer_cfg, Some((w, Some(bias))))?)
                }
            })
        };
        let ffn_in = make("ffn_in", 2 * b as u64, d, h)?;
        let ffn_out = make("ffn_out", 2 * b as u64 + 1, h, d)?;
        blocks.push(Block { ffn_in, ffn_out });
    }
    let head = store.push("head", fetch("head")?, trainable);
    Ok(ToyBackbone {
        config: cfg.clone(),
        store,
        embedding,
        blocks,
        head,
    })
}

fn linear_forward<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    layer: &FfnLinear,
    x: Var,
    phase: Phase<'_>,
    weights_out: &mut Vec<Var>,
) -> Result<Var> {
    match layer {
        FfnLinear::Dense { weight, bias } => {
            let w = g.bind(store, *weight);
            let b = g.bind(store, *bias);
            let y = g.matmul(x, w)?;
            g.add_row_bias(y, b)
        }
        FfnLinear::Lora(l) => l.forward(g, store, x, phase),
        FfnLinear::Moe(l) => {
            let out = l.forward(g, store, x, phase)?;
            weights_out.push(out.weights);
            Ok(out.output)
        }
    }
}

impl<S: Real> ToyBackbone<S> {
    pub fn mode(&self) -> TrainMode {
        self.config.mode
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Wrapped layers in forward order (empty outside LoRAMoE mode).
    pub fn moe_layers(&self) -> Vec<&LoraMoeLayer> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.ffn_in, &b.ffn_out])
            .filter_map(|l| match l {
                FfnLinear::Moe(m) => Some(m),
                _ => None,
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph<S>, batch: &Batch, mut phase: Phase<'_>) -> Result<ModelOutput> {
        let vocab = self.config.dims.vocab;
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        batch.segments.check_covers(batch.tokens.len())?;
        let table = g.bind(&self.store, self.embedding);
        let mut h = g.gather_rows(table, &batch.tokens)?;
        let mut router_weights = Vec::new();
        for block in &self.blocks {
            let u = linear_forward(g, &self.store, &block.ffn_in, h, phase.reborrow(), &mut router_weights)?;
            let a = g.gelu(u);
            let v = linear_forward(g, &self.store, &block.ffn_out, a, phase.reborrow(), &mut router_weights)?;
            h = g.add(h, v)?;
        }
        let pooled = g.segment_mean(h, &batch.segments)?;
        let head = g.bind(&self.store, self.head);
        let logits = g.matmul(pooled, head)?;
        Ok(ModelOutput { logits, router_weights })
    }

    /// Backbone parameters only.
    pub fn base_snapshot(&self) -> Snapshot<S> {
        let names = base_param_names(&self.config.dims);
        self.store.snapshot_where(|e| names.contains(&e.name))
    }

    pub fn snapshot(&self) -> Snapshot<S> {
        self.store.snapshot()
    }
}

/// Parameter count of the adapters and routers in LoRAMoE mode.
pub fn loramoe_trainable_count(dims: &ModelDims, experts: usize, rank: usize) -> usize {
    let (d, h) = (dims.d, dims.hidden());
    let per_layer = |d_in: usize, d_out: usize| experts * (d_in * rank + rank * d_out) + d_in * experts;
    dims.blocks * (per_layer(d, h) + per_layer(h, d))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftEntry {
    pub name: String,
    /// `‖after − before‖_F / ‖before‖_F`, or the absolute norm of the
    /// change when `before` is all zeros.
    pub change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftReport {
    pub entries: Vec<DriftEntry>,
    pub mean: f64,
}

impl DriftReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.change)
    }
}

/// Per-tensor relative Frobenius change between two snapshots of the same
/// structure.
pub fn drift<S: Real>(before: &Snapshot<S>, after: &Snapshot<S>) -> Result<DriftReport> {
    if before.entries.len() != after.entries.len() {
        return Err(Error::Snapshot(format!(
            "{} tensors before, {} after",
            before.entries.len(),
            after.entries.len()
        )));
    }
    let mut entries = Vec::with_capacity(before.entries.len());
    for ((n0, t0), (n1, t1)) in before.entries.iter().zip(&after.entries) {
        if n0 != n1 || t0.shape() != t1.shape() {
            return Err(Error::Snapshot(format!("{n0} {:?} vs {n1} {:?}", t0.shape(), t1.shape())));
        }
        let diff: f64 = t0
            .data()
            .iter()
            .zip(t1.data())
            .map(|(a, b)| (b.as_f64() - a.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = t0.frobenius_norm();
        let change = if norm > 0.0 { diff / norm } else { diff };
        entries.push(DriftEntry { name: n0.clone(), change });
    }
    let mean = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.change).sum::<f64>() / entries.len() as f64
    };
    Ok(DriftReport { entries, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: TrainMode, experts: usize) -> ModelConfig {
        let groups = (0..experts)
            .map(|i| if i < experts / 2 { Group::Knowledge } else { Group::Task })
            .collect();
        ModelConfig {
            dims: ModelDims {
                vocab: 16,
                d: 8,
                blocks: 2,
                n_classes: 3,
            },
            adapter: AdapterConfig {
                rank: 2,
                alpha: 4.0,
                tau: 1.0,
                dropout: 0.0,
                groups,
            },
            mode,
            seed: 3,
        }
    }

    fn batch() -> Batch {
        Batch {
            tokens: vec![1, 2, 3, 4, 5, 15, 0],
            segments: Segments::from_lengths(&[3, 4]).unwrap(),
        }
    }

    fn logits(m: &ToyBackbone<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch(), Phase::Eval).unwrap();
        g.value(out.logits).clone()
    }

    #[test]
    fn trainable_counts() {
        let m: ToyBackbone<f64> = build_model(&cfg(TrainMode::FrozenOnly, 6)).unwrap();
        assert_eq!(m.trainable_count(), 0);
        let c = cfg(TrainMode::FrozenLoramoe, 6);
        let m: ToyBackbone<f64> = build_model(&c).unwrap();
        // enumerate adapter tensors directly
        let enumerated: usize = m
            .store
            .entries()
            .iter()
            .filter(|e| e.name.contains(".expert") || e.name.ends_with(".router"))
            .map(|e| e.value.numel())
            .sum();
        assert_eq!(m.trainable_count(), enumerated);
        assert_eq!(m.trainable_count(), loramoe_trainable_count(&c.dims, 6, 2));
        assert_eq!(m.moe_layers().len(), 4);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: ToyBackbone<f64> = build_model(&cfg(TrainMode::FrozenLoramoe, 4)).unwrap();
        let b: ToyBackbone<f64> = build_model(&cfg(TrainMode::FrozenLoramoe, 4)).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn zero_adapters_match_frozen_base() {
        let frozen: ToyBackbone<f64> = build_model(&cfg(TrainMode::FrozenOnly, 4)).unwrap();
        let moe: ToyBackbone<f64> = build_model(&cfg(TrainMode::FrozenLoramoe, 4)).unwrap();
        let lora: ToyBackbone<f64> = build_model(&cfg(TrainMode::FrozenLora, 4)).unwrap();
        let base = logits(&frozen);
        assert!(logits(&moe).max_abs_diff(&base) < 1e-10);
        assert!(logits(&lora).max_abs_diff(&base) < 1e-10);
        assert_eq!(logits(&frozen), base);

        let mut g = Graph::new();
        let out = moe.forward(&mut g, &batch(), Phase::Eval).unwrap();
        assert_eq!(out.router_weights.len(), 4);
        for w in out.router_weights {
            assert_eq!(g.value(w).shape(), &[7, 4]);
        }
    }

    #[test]
    fn gradients_reach_adapters_only() {
        let m: ToyBackbone<f64> = build_model(&cfg(TrainMode::FrozenLoramoe, 4)).unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch(), Phase::Eval).unwrap();
        let loss = g.cross_entropy(out.logits, &[0, 2]).unwrap();
        g.backward(loss).unwrap();
        let base = base_param_names(&m.config.dims);
        let mut adapter_grads = 0;
        for &(id, var) in g.bound_params() {
            let name = &m.store.entry(id).name;
            if base.contains(name) {
                assert!(g.grad(var).is_none(), "{name} received a gradient");
            } else if g.grad(var).is_some_and(|gr| gr.iter().any(|&v| v != 0.0)) {
                adapter_grads += 1;
            }
        }
        // B starts at zero, so A and router grads vanish but B grads do not
        assert!(adapter_grads > 0);
    }

    #[test]
    fn out_of_vocab_is_an_input_error() {
        let m: ToyBackbone<f64> = build_model(&cfg(TrainMode::FrozenOnly, 2)).unwrap();
        let mut g = Graph::new();
        let bad = Batch {
            tokens: vec![16],
            segments: Segments::from_lengths(&[1]).unwrap(),
        };
        assert!(matches!(m.forward(&mut g, &bad, Phase::Eval), Err(Error::Input(_))));
    }

    #[test]
    fn zeroed_ffn_output_makes_blocks_identity() {
        let mut m: ToyBackbone<f64> = build_model(&cfg(TrainMode::FrozenOnly, 2)).unwrap();
        for b in 0..2 {
            for suffix in ["weight", "bias"] {
                let id = m.store.find(&format!("block{b}.ffn_out.{suffix}")).unwrap();
                let shape = m.store.value(id).shape().to_vec();
                *m.store.value_mut(id) = Tensor::zeros(&shape);
            }
        }
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch(), Phase::Eval).unwrap();
        let table = g.bind(&m.store, m.embedding);
        let h = g.gather_rows(table, &batch().tokens).unwrap();
        let pooled = g.segment_mean(h, &batch().segments).unwrap();
        let head = g.bind(&m.store, m.head);
        let direct = g.matmul(pooled, head).unwrap();
        assert_eq!(g.value(out.logits), g.value(direct));
    }

    #[test]
    fn drift_cases() {
        let m: ToyBackbone<f64> = build_model(&cfg(TrainMode::FrozenOnly, 2)).unwrap();
        let s = m.snapshot();
        let r = drift(&s, &s).unwrap();
        assert!(r.entries.iter().all(|e| e.change == 0.0));
        assert_eq!(r.mean, 0.0);

        let mut scaled = s.clone();
        scaled.entries[0].1 = scaled.entries[0].1.map(|v| v * 1.1);
        let r = drift(&s, &scaled).unwrap();
        assert!((r.get("embedding").unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(r.get("head").unwrap(), 0.0);

        let mut short = s.clone();
        short.entries.pop();
        assert!(matches!(drift(&s, &short), Err(Error::Snapshot(_))));
    }
}
