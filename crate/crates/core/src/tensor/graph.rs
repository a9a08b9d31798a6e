use std::collections::HashMap;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::{Real, Segments, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, S),
    ScaleRows(Var, Var),
    Column(Var, usize),
    SoftmaxRows(Var, S),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    Gather(Var, Vec<usize>),
    SegmentSum {
        input: Var,
        segments: Segments,
        mask: Option<Vec<bool>>,
    },
    SegmentMean(Var, Segments),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    /// Accumulated gradient, kept for leaves only.
    grad: Option<Vec<S>>,
}

/// Operation tape. Nodes are appended in evaluation order, which is a
/// topological order of the computation.
///
/// A graph is single-threaded; independent graphs share nothing.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    bound: Vec<(ParamId, Var)>,
    bound_index: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
            bound_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a stored parameter onto the graph. Repeated binds of the same
    /// parameter return the same node, so gradients from every use accumulate
    /// in one place.
    pub fn bind(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound_index.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        self.bound.push((id, v));
        self.bound_index.insert(id, v);
        v
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x[T×D] + bias[D]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (t, d) = self.value(x).dims2("add_row_bias")?;
        if self.shape(bias) != [d] {
            return Err(Error::dim("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::new(vec![t, d], data)?, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Multiplies row `t` of `x[T×D]` by `s[t]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (t, d) = self.value(x).dims2("scale_rows")?;
        if self.shape(s) != [t] {
            return Err(Error::dim("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &k) in data.chunks_mut(d).zip(sv) {
            for o in row.iter_mut() {
                *o = *o * k;
            }
        }
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(Tensor::new(vec![t, d], data)?, Op::ScaleRows(x, s), rg))
    }

    /// Column `col` of `x[T×N]` as a length-T vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let (t, n) = self.value(x).dims2("column")?;
        if col >= n {
            return Err(Error::param(format!("column {col} out of range for width {n}")));
        }
        let data = (0..t).map(|r| self.value(x).get2(r, col)).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![t], data)?, Op::Column(x, col), rg))
    }

    /// Row-wise softmax of `x / tau`, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, tau: S) -> Result<Var> {
        if !(tau > S::zero()) {
            return Err(Error::param(format!("softmax temperature must be positive, got {tau}")));
        }
        let (t, n) = self.value(x).dims2("softmax_rows")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row, tau);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![t, n], data)?, Op::SoftmaxRows(x, tau), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = S::of(GELU_C);
        let k = S::of(GELU_K);
        let half = S::of(0.5);
        let value = self
            .value(x)
            .map(|v| half * v * (S::one() + (c * (v + k * v * v * v)).tanh()));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::param("mean of an empty tensor"));
        }
        let s: S = v.data().iter().copied().sum();
        let m = s / S::of(v.numel() as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Population variance (divides by the element count).
    pub fn variance(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::param("variance of an empty tensor"));
        }
        // Shifting by one element makes constant inputs give exactly zero.
        let n = S::of(v.numel() as f64);
        let shift = v.data()[0];
        let mean = v.data().iter().map(|&e| e - shift).sum::<S>() / n;
        let var = v
            .data()
            .iter()
            .map(|&e| (e - shift - mean) * (e - shift - mean))
            .sum::<S>()
            / n;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(var), Op::Variance(x), rg))
    }

    /// `(mean, variance)` of all elements, both differentiable.
    pub fn reduce_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        Ok((self.mean(x)?, self.variance(x)?))
    }

    /// Rows of `table[V×D]` at `ids`, giving `[len(ids)×D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    /// Sums the rows of `x[T×N]` inside each segment, skipping masked-out
    /// tokens, and returns the transposed result `[N×M]`.
    pub fn segment_sum(&mut self, x: Var, segments: &Segments, mask: Option<&[bool]>) -> Result<Var> {
        let (t, n) = self.value(x).dims2("segment_sum")?;
        segments.check_covers(t)?;
        if let Some(m) = mask {
            if m.len() != t {
                return Err(Error::dim("segment_sum mask", &[t], &[m.len()]));
            }
        }
        let m_count = segments.len();
        let xv = self.value(x);
        let mut data = vec![S::zero(); n * m_count];
        for (m, range) in segments.ranges().iter().enumerate() {
            for j in range.clone() {
                if mask.is_some_and(|mk| !mk[j]) {
                    continue;
                }
                for (e, &w) in xv.row(j).iter().enumerate() {
                    data[e * m_count + m] = data[e * m_count + m] + w;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, m_count], data)?,
            Op::SegmentSum {
                input: x,
                segments: segments.clone(),
                mask: mask.map(<[bool]>::to_vec),
            },
            rg,
        ))
    }

    /// Mean of the rows of `x[T×D]` inside each segment, giving `[M×D]`.
    pub fn segment_mean(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let (t, d) = self.value(x).dims2("segment_mean")?;
        segments.check_covers(t)?;
        let xv = self.value(x);
        let mut data = vec![S::zero(); segments.len() * d];
        for (m, range) in segments.ranges().iter().enumerate() {
            let inv = S::one() / S::of(range.len() as f64);
            let out = &mut data[m * d..(m + 1) * d];
            for j in range.clone() {
                for (o, &v) in out.iter_mut().zip(xv.row(j)) {
                    *o = *o + v;
                }
            }
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![segments.len(), d], data)?,
            Op::SegmentMean(x, segments.clone()),
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[M×C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != m {
            return Err(Error::dim("cross_entropy labels", &[m], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} outside {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut nll = S::zero();
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row, S::one());
            nll = nll - row[label].ln();
        }
        let loss = nll / S::of(m as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Runs the reverse pass from a scalar `loss`, adding dLoss/dLeaf into
    /// every differentiable leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::param(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<S>, grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut contributions: Vec<(Var, Vec<S>)> = Vec::new();

        match &nodes[i].op {
            Op::Leaf => {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &d) in acc.iter_mut().zip(&g) {
                            *a = *a + d;
                        }
                    }
                    None => node.grad = Some(g),
                }
                return;
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    contributions.push((*a, kernels::matmul_bt(&g, val(*b).data(), m, k, n)));
                }
                if wants(*b) {
                    contributions.push((*b, kernels::matmul_at(val(*a).data(), &g, m, k, n)));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    contributions.push((*a, g.clone()));
                }
                if wants(*b) {
                    contributions.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    contributions.push((*a, g.clone()));
                }
                if wants(*b) {
                    contributions.push((*b, g.iter().map(|&d| -d).collect()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.iter().zip(val(*b).data()).map(|(&d, &y)| d * y).collect();
                    contributions.push((*a, d));
                }
                if wants(*b) {
                    let d = g.iter().zip(val(*a).data()).map(|(&d, &x)| d * x).collect();
                    contributions.push((*b, d));
                }
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    contributions.push((*a, g.iter().zip(xb).map(|(&d, &y)| d / y).collect()));
                }
                if wants(*b) {
                    let d = g
                        .iter()
                        .zip(xa.iter().zip(xb))
                        .map(|(&d, (&x, &y))| -d * x / (y * y))
                        .collect();
                    contributions.push((*b, d));
                }
            }
            Op::AddRowBias(x, bias) => {
                let d = val(*bias).numel();
                if wants(*bias) {
                    let mut db = vec![S::zero(); d];
                    for row in g.chunks(d) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    contributions.push((*bias, db));
                }
                if wants(*x) {
                    contributions.push((*x, g));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                contributions.push((*x, g.iter().map(|&d| d * c).collect()));
            }
            Op::ScaleRows(x, s) => {
                let d = val(*x).shape()[1];
                if wants(*s) {
                    let ds = g
                        .chunks(d)
                        .zip(val(*x).data().chunks(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&p, &q)| p * q).sum())
                        .collect();
                    contributions.push((*s, ds));
                }
                if wants(*x) {
                    let mut dx = g;
                    for (row, &k) in dx.chunks_mut(d).zip(val(*s).data()) {
                        for o in row.iter_mut() {
                            *o = *o * k;
                        }
                    }
                    contributions.push((*x, dx));
                }
            }
            Op::Column(x, col) => {
                let n = val(*x).shape()[1];
                let mut dx = vec![S::zero(); val(*x).numel()];
                for (r, &d) in g.iter().enumerate() {
                    dx[r * n + col] = d;
                }
                contributions.push((*x, dx));
            }
            Op::SoftmaxRows(x, tau) => {
                let y = nodes[i].value.data();
                let n = nodes[i].value.shape()[1];
                let inv_tau = S::one() / *tau;
                let mut dx = vec![S::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot) * inv_tau;
                    }
                }
                contributions.push((*x, dx));
            }
            Op::Gelu(x) => {
                let c = S::of(GELU_C);
                let k = S::of(GELU_K);
                let half = S::of(0.5);
                let three = S::of(3.0);
                let dx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&d, &v)| {
                        let th = (c * (v + k * v * v * v)).tanh();
                        let dth = (S::one() - th * th) * c * (S::one() + three * k * v * v);
                        d * (half * (S::one() + th) + half * v * dth)
                    })
                    .collect();
                contributions.push((*x, dx));
            }
            Op::Sum(x) => {
                contributions.push((*x, vec![g[0]; val(*x).numel()]));
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                contributions.push((*x, vec![g[0] / S::of(n as f64); n]));
            }
            Op::Variance(x) => {
                let xs = val(*x).data();
                let n = S::of(xs.len() as f64);
                let mean = xs.iter().copied().sum::<S>() / n;
                let k = S::of(2.0) * g[0] / n;
                contributions.push((*x, xs.iter().map(|&v| k * (v - mean)).collect()));
            }
            Op::Gather(table, ids) => {
                let d = val(*table).shape()[1];
                let mut dt = vec![S::zero(); val(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o = *o + v;
                    }
                }
                contributions.push((*table, dt));
            }
            Op::SegmentSum {
                input,
                segments,
                mask,
            } => {
                let n = val(*input).shape()[1];
                let m_count = segments.len();
                let mut dx = vec![S::zero(); val(*input).numel()];
                for (m, range) in segments.ranges().iter().enumerate() {
                    for j in range.clone() {
                        if mask.as_ref().is_some_and(|mk| !mk[j]) {
                            continue;
                        }
                        for e in 0..n {
                            dx[j * n + e] = g[e * m_count + m];
                        }
                    }
                }
                contributions.push((*input, dx));
            }
            Op::SegmentMean(x, segments) => {
                let d = val(*x).shape()[1];
                let mut dx = vec![S::zero(); val(*x).numel()];
                for (m, range) in segments.ranges().iter().enumerate() {
                    let inv = S::one() / S::of(range.len() as f64);
                    for j in range.clone() {
                        for (o, &v) in dx[j * d..(j + 1) * d].iter_mut().zip(&g[m * d..(m + 1) * d]) {
                            *o = v * inv;
                        }
                    }
                }
                contributions.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).shape()[1];
                let k = g[0] / S::of(labels.len() as f64);
                let mut dx: Vec<S> = probs.iter().map(|&p| p * k).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] = dx[r * c + l] - k;
                }
                contributions.push((*logits, dx));
            }
        }

        for (v, d) in contributions {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, &x) in acc.iter_mut().zip(&d) {
                        *a = *a + x;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        }
    }
}

/// Numerically stable softmax of `row / tau`, in place.
pub(crate) fn softmax_in_place<S: Real>(row: &mut [S], tau: S) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
