//! Frozen linear map plus a softmax-gated set of low-rank adapter experts.
//!
//! For an input row `x` the layer computes
//! `o = x·W0 + b0 + (α/r) Σ_i w_i(x) · (x·A_i)·B_i` with
//! `w(x) = softmax(x·W_g / τ)`. A single expert reduces to a plain LoRA
//! layer because its router weight is exactly one.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::DetRng;

/// Expert group label and sample type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Knowledge,
    Task,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Knowledge => "knowledge",
            Group::Task => "task",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "knowledge" | "k" => Ok(Group::Knowledge),
            "task" | "t" => Ok(Group::Task),
            _ => Err(Error::param(format!("unknown group label {s:?}"))),
        }
    }
}

/// Parses labels such as `["K", "K", "T"]` or `["knowledge", "task"]`.
pub fn parse_groups<T: AsRef<str>>(labels: &[T]) -> Result<Vec<Group>> {
    labels.iter().map(|s| s.as_ref().parse()).collect()
}

/// Train-time dropout source, or evaluation.
pub enum Phase<'a> {
    Eval,
    Train(&'a mut DetRng),
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }

    /// Reborrows so the same phase can be passed to several layers.
    pub fn reborrow(&mut self) -> Phase<'_> {
        match self {
            Phase::Eval => Phase::Eval,
            Phase::Train(rng) => Phase::Train(rng),
        }
    }
}

/// Inverted-dropout mask of ones scaled by `1/(1-p)` and zeros.
fn dropout_mask<S: Real>(shape: &[usize], p: f64, rng: &mut DetRng) -> Tensor<S> {
    let keep = S::of(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn apply_dropout<S: Real>(g: &mut Graph<S>, x: Var, p: f64, phase: &mut Phase<'_>) -> Result<Var> {
    match phase {
        Phase::Train(rng) if p > 0.0 => {
            let mask = dropout_mask(g.value(x).shape(), p, rng);
            let m = g.constant(mask);
            g.mul(x, m)
        }
        _ => Ok(x),
    }
}

/// Hyperparameters for building a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub alpha: f64,
    pub tau: f64,
    pub dropout: f64,
    pub groups: Vec<Group>,
    pub seed: u64,
}

impl LayerConfig {
    pub fn experts(&self) -> usize {
        self.groups.len()
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_in == 0 || self.d_out == 0 {
            problems.push(format!("dimensions must be positive, got {}×{}", self.d_in, self.d_out));
        }
        if self.groups.is_empty() {
            problems.push("at least one expert is required".to_string());
        }
        if self.rank == 0 || self.rank > self.d_in.min(self.d_out) {
            problems.push(format!(
                "rank {} must be in 1..={}",
                self.rank,
                self.d_in.min(self.d_out)
            ));
        }
        if !(self.alpha > 0.0) {
            problems.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.tau > 0.0) {
            problems.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.groups.len() >= 2
            && !(self.groups.contains(&Group::Knowledge) && self.groups.contains(&Group::Task))
        {
            problems.push("both expert groups need at least one member".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::param(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertParams {
    /// `d_in × r`
    pub a: ParamId,
    /// `r × d_out`
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct RouterParams {
    /// `d_in × N`
    pub weight: ParamId,
    pub tau: f64,
}

/// Graph handles for one forward pass of a [`LoraMoeLayer`].
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub base_weight: Var,
    pub base_bias: Option<Var>,
    pub experts: Vec<(Var, Var)>,
    pub router: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `T × d_out`
    pub output: Var,
    /// Router weights, `T × N`.
    pub weights: Var,
}

/// Adapter term `(α/r)·(x·A)·B`, without the base map.
pub fn expert_forward<S: Real>(
    g: &mut Graph<S>,
    a: Var,
    b: Var,
    x: Var,
    scaling: f64,
) -> Result<Var> {
    let xa = g.matmul(x, a)?;
    let xab = g.matmul(xa, b)?;
    Ok(g.scale(xab, S::of(scaling)))
}

/// Per-token routing weights `softmax(x·W_g / τ)`.
pub fn route<S: Real>(g: &mut Graph<S>, router: Var, x: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("router temperature must be positive, got {tau}")));
    }
    let logits = g.matmul(x, router)?;
    g.softmax_rows(logits, S::of(tau))
}

fn check_width<S: Real>(g: &Graph<S>, x: Var, d_in: usize) -> Result<()> {
    let (_, w) = g.value(x).dims2("layer input")?;
    if w != d_in {
        return Err(Error::dim("layer input", g.value(x).shape(), &[w, d_in]));
    }
    Ok(())
}

fn base_forward<S: Real>(g: &mut Graph<S>, weight: Var, bias: Option<Var>, x: Var) -> Result<Var> {
    let out = g.matmul(x, weight)?;
    match bias {
        Some(b) => g.add_row_bias(out, b),
        None => Ok(out),
    }
}

#[derive(Clone, Debug)]
pub struct LoraMoeLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub base_weight: ParamId,
    pub base_bias: Option<ParamId>,
    pub experts: Vec<ExpertParams>,
    pub router: RouterParams,
    pub groups: Vec<Group>,
}

impl LoraMoeLayer {
    /// Registers a new layer in `store`.
    ///
    /// `A_i ~ N(0, 1/d_in)`, `B_i = 0`, `W_g ~ N(0, 0.02²)`, drawn in that
    /// order from `cfg.seed`. The base map is frozen; when `base` is `None`
    /// an identity-padded placeholder without bias is used.
    pub fn init<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &LayerConfig,
        base: Option<(Tensor<S>, Option<Tensor<S>>)>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.rank * 2 > cfg.d_in.min(cfg.d_out) {
            log::warn!(
                "{name}: rank {} is not much smaller than min({}, {})",
                cfg.rank,
                cfg.d_in,
                cfg.d_out
            );
        }
        let (w0, b0) = base.unwrap_or_else(|| (Tensor::eye(cfg.d_in, cfg.d_out), None));
        if w0.shape() != [cfg.d_in, cfg.d_out] {
            return Err(Error::dim("base weight", w0.shape(), &[cfg.d_in, cfg.d_out]));
        }
        if let Some(b) = &b0 {
            if b.shape() != [cfg.d_out] {
                return Err(Error::dim("base bias", b.shape(), &[cfg.d_out]));
            }
        }

        let mut rng = DetRng::seed_from_u64(cfg.seed);
        let a_std = (1.0 / cfg.d_in as f64).sqrt();
        let a_init: Vec<Tensor<S>> = (0..cfg.experts())
            .map(|_| Tensor::randn(&[cfg.d_in, cfg.rank], a_std, &mut rng))
            .collect();
        let wg = Tensor::randn(&[cfg.d_in, cfg.experts()], 0.02, &mut rng);

        let base_weight = store.push(format!("{name}.weight"), w0, false);
        let base_bias = b0.map(|b| store.push(format!("{name}.bias"), b, false));
        let experts = a_init
            .into_iter()
            .enumerate()
            .map(|(i, a)| ExpertParams {
                a: store.push(format!("{name}.expert{i}.a"), a, true),
                b: store.push(
                    format!("{name}.expert{i}.b"),
                    Tensor::zeros(&[cfg.rank, cfg.d_out]),
                    true,
                ),
            })
            .collect();
        let router = RouterParams {
            weight: store.push(format!("{name}.router"), wg, true),
            tau: cfg.tau,
        };
        Ok(Self {
            name: name.to_string(),
            d_in: cfg.d_in,
            d_out: cfg.d_out,
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
            base_weight,
            base_bias,
            experts,
            router,
            groups: cfg.groups.clone(),
        })
    }

    pub fn experts(&self) -> usize {
        self.experts.len()
    }

    /// `γ = α / r`
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn bind<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>) -> BoundLayer {
        BoundLayer {
            base_weight: g.bind(store, self.base_weight),
            base_bias: self.base_bias.map(|b| g.bind(store, b)),
            experts: self
                .experts
                .iter()
                .map(|e| (g.bind(store, e.a), g.bind(store, e.b)))
                .collect(),
            router: g.bind(store, self.router.weight),
        }
    }

    /// Forward pass on already-bound handles. Dropout acts on each expert's
    /// output before router weighting, in training only.
    pub fn forward_bound<S: Real>(
        &self,
        g: &mut Graph<S>,
        bound: &BoundLayer,
        x: Var,
        mut phase: Phase<'_>,
    ) -> Result<LayerOutput> {
        check_width(g, x, self.d_in)?;
        if bound.experts.len() != self.experts() {
            return Err(Error::param("bound expert count differs from layer"));
        }
        let mut out = base_forward(g, bound.base_weight, bound.base_bias, x)?;
        let weights = route(g, bound.router, x, self.router.tau)?;
        for (i, &(a, b)) in bound.experts.iter().enumerate() {
            let e = expert_forward(g, a, b, x, self.scaling())?;
            let e = apply_dropout(g, e, self.dropout, &mut phase)?;
            let w = g.column(weights, i)?;
            let weighted = g.scale_rows(e, w)?;
            out = g.add(out, weighted)?;
        }
        Ok(LayerOutput {
            output: out,
            weights,
        })
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        phase: Phase<'_>,
    ) -> Result<LayerOutput> {
        let bound = self.bind(g, store);
        self.forward_bound(g, &bound, x, phase)
    }
}

/// Plain low-rank adapter over a frozen base: `x·W0 + b0 + (α/r)(x·A)·B`.
#[derive(Clone, Debug)]
pub struct LoraLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub base_weight: ParamId,
    pub base_bias: Option<ParamId>,
    pub adapter: ExpertParams,
}

impl LoraLayer {
    /// Same initialization as a one-expert [`LoraMoeLayer`] with the same
    /// seed: `A` is the first draw, `B` starts at zero.
    pub fn init<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &LayerConfig,
        base: Option<(Tensor<S>, Option<Tensor<S>>)>,
    ) -> Result<Self> {
        let single = LayerConfig {
            groups: vec![cfg.groups.first().copied().unwrap_or(Group::Task)],
            ..cfg.clone()
        };
        single.validate()?;
        let (w0, b0) = base.unwrap_or_else(|| (Tensor::eye(cfg.d_in, cfg.d_out), None));
        if w0.shape() != [cfg.d_in, cfg.d_out] {
            return Err(Error::dim("base weight", w0.shape(), &[cfg.d_in, cfg.d_out]));
        }
        let mut rng = DetRng::seed_from_u64(cfg.seed);
        let a = Tensor::randn(&[cfg.d_in, cfg.rank], (1.0 / cfg.d_in as f64).sqrt(), &mut rng);
        let base_weight = store.push(format!("{name}.weight"), w0, false);
        let base_bias = b0.map(|b| store.push(format!("{name}.bias"), b, false));
        let adapter = ExpertParams {
            a: store.push(format!("{name}.lora.a"), a, true),
            b: store.push(
                format!("{name}.lora.b"),
                Tensor::zeros(&[cfg.rank, cfg.d_out]),
                true,
            ),
        };
        Ok(Self {
            name: name.to_string(),
            d_in: cfg.d_in,
            d_out: cfg.d_out,
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
            base_weight,
            base_bias,
            adapter,
        })
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        mut phase: Phase<'_>,
    ) -> Result<Var> {
        check_width(g, x, self.d_in)?;
        let w0 = g.bind(store, self.base_weight);
        let b0 = self.base_bias.map(|b| g.bind(store, b));
        let a = g.bind(store, self.adapter.a);
        let b = g.bind(store, self.adapter.b);
        let base = base_forward(g, w0, b0, x)?;
        let delta = expert_forward(g, a, b, x, self.alpha / self.rank as f64)?;
        let delta = apply_dropout(g, delta, self.dropout, &mut phase)?;
        g.add(base, delta)
    }
}
