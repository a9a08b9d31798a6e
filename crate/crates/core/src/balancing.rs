//! Localized balancing constraint.
//!
//! Per layer and batch, `Q[n, m]` is the router mass expert `n` receives
//! over the tokens of sample `m`. The constant coefficient matrix `I` holds
//! `1 + δ` where the expert's group matches the sample's type and `1 - δ`
//! elsewhere. The loss is the dispersion `σ²(Z) / μ(Z)` of `Z = I ∘ Q`,
//! with population variance.
//!
//! Note on the stationary point: equal entries of `Z` require
//! `Q[n, m] ∝ 1 / I[n, m]`, so on its own the loss is minimised when a
//! sample's matched group holds the `(1 - δ) : (1 + δ)` share.
//! [`balanced_group_share`] returns that share.

use crate::error::{Error, Result};
use crate::layer::Group;
use crate::tensor::{Graph, Real, Segments, Tensor, Var};

/// Smallest `μ(Z)` accepted before the batch is reported as degenerate.
pub const MIN_MEAN: f64 = 1e-12;

/// β and δ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub delta: f64,
}

impl LossWeights {
    pub fn new(beta: f64, delta: f64) -> Result<Self> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::param(format!("beta must be a finite non-negative number, got {beta}")));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::param(format!("delta must be in [0, 1], got {delta}")));
        }
        Ok(Self { beta, delta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.1,
            delta: 0.1,
        }
    }
}

/// `Q[n, m] = Σ_{j ∈ sample m, unmasked} weights[j, n]`, shape `N × M`.
pub fn importance_matrix<S: Real>(
    g: &mut Graph<S>,
    weights: Var,
    segments: &Segments,
    mask: Option<&[bool]>,
) -> Result<Var> {
    g.segment_sum(weights, segments, mask)
}

/// `I[n, m] = 1 + δ` if `expert_groups[n] == sample_types[m]`, else `1 - δ`.
pub fn coefficient_matrix<S: Real>(
    expert_groups: &[Group],
    sample_types: &[Group],
    delta: f64,
) -> Result<Tensor<S>> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::param(format!("delta must be in [0, 1], got {delta}")));
    }
    if expert_groups.is_empty() || sample_types.is_empty() {
        return Err(Error::param("coefficient matrix needs experts and samples"));
    }
    let (hi, lo) = (S::of(1.0 + delta), S::of(1.0 - delta));
    let data = expert_groups
        .iter()
        .flat_map(|e| sample_types.iter().map(move |s| if e == s { hi } else { lo }))
        .collect();
    Tensor::new(vec![expert_groups.len(), sample_types.len()], data)
}

/// `σ²(I ∘ Q) / μ(I ∘ Q)`. `coefficients` is treated as a constant.
pub fn lbc_loss<S: Real>(g: &mut Graph<S>, q: Var, coefficients: &Tensor<S>) -> Result<Var> {
    if g.value(q).shape() != coefficients.shape() {
        return Err(Error::dim("lbc_loss", g.value(q).shape(), coefficients.shape()));
    }
    let i = g.constant(coefficients.clone());
    let z = g.mul(i, q)?;
    let (mean, var) = g.reduce_stats(z)?;
    let mu = g.value(mean).item();
    if !(mu.as_f64() > MIN_MEAN) {
        return Err(Error::Degenerate(format!(
            "mean weighted importance {mu} is not above {MIN_MEAN}; no router mass reached any expert"
        )));
    }
    g.div(var, mean)
}

/// `task_loss + β · mean(lbc_losses)`. With β = 0 the task loss node is
/// returned unchanged.
pub fn total_loss<S: Real>(g: &mut Graph<S>, task_loss: Var, lbc_losses: &[Var], beta: f64) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::param(format!("beta must be non-negative, got {beta}")));
    }
    if beta == 0.0 {
        return Ok(task_loss);
    }
    let Some((&first, rest)) = lbc_losses.split_first() else {
        return Err(Error::param("beta > 0 but no balancing losses were supplied"));
    };
    let mut acc = first;
    for &l in rest {
        acc = g.add(acc, l)?;
    }
    let weighted = g.scale(acc, S::of(beta / lbc_losses.len() as f64));
    g.add(task_loss, weighted)
}

/// Standard deviation over mean (population statistics). Diagnostic only.
pub fn coefficient_of_variation(importance: &[f64]) -> Result<f64> {
    if importance.is_empty() {
        return Err(Error::param("coefficient of variation of an empty vector"));
    }
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::Degenerate(format!("importance mean {mean} is not positive")));
    }
    let var = importance.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Share of a sample's router mass on its matched group at which `Z` is
/// constant for that sample, assuming equal group sizes.
pub fn balanced_group_share(delta: f64) -> f64 {
    (1.0 - delta) / 2.0
}

/// Everything needed to evaluate the balancing loss for one layer and batch.
#[derive(Clone, Debug)]
pub struct ImportanceRecord<S> {
    /// `N × M`, differentiable.
    pub q: Var,
    /// `N × M`, constant.
    pub coefficients: Tensor<S>,
    pub sample_types: Vec<Group>,
    pub token_counts: Vec<usize>,
}

impl<S: Real> ImportanceRecord<S> {
    pub fn build(
        g: &mut Graph<S>,
        weights: Var,
        segments: &Segments,
        mask: Option<&[bool]>,
        expert_groups: &[Group],
        sample_types: &[Group],
        delta: f64,
    ) -> Result<Self> {
        if sample_types.len() != segments.len() {
            return Err(Error::dim("sample types", &[segments.len()], &[sample_types.len()]));
        }
        let (_, n) = g.value(weights).dims2("router weights")?;
        if n != expert_groups.len() {
            return Err(Error::dim("expert groups", &[n], &[expert_groups.len()]));
        }
        let q = importance_matrix(g, weights, segments, mask)?;
        let coefficients = coefficient_matrix(expert_groups, sample_types, delta)?;
        let token_counts = match mask {
            None => segments.lengths(),
            Some(m) => segments
                .ranges()
                .iter()
                .map(|r| m[r.clone()].iter().filter(|&&b| b).count())
                .collect(),
        };
        Ok(Self {
            q,
            coefficients,
            sample_types: sample_types.to_vec(),
            token_counts,
        })
    }

    pub fn loss(&self, g: &mut Graph<S>) -> Result<Var> {
        lbc_loss(g, self.q, &self.coefficients)
    }

    /// Total router mass per expert across the batch.
    pub fn expert_totals(&self, g: &Graph<S>) -> Vec<f64> {
        let q = g.value(self.q);
        let (n, m) = (q.shape()[0], q.shape()[1]);
        (0..n)
            .map(|e| (0..m).map(|s| q.get2(e, s).as_f64()).sum())
            .collect()
    }
}
