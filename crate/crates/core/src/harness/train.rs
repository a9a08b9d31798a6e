//! Training loop, evaluation and metrics rows.

use rand::{Rng, SeedableRng};

use super::data::{make_batch, Sample};
use crate::balancing::{coefficient_of_variation, total_loss, ImportanceRecord};
use crate::error::{Error, Result};
use crate::layer::{Group, Phase};
use crate::model::{drift, ToyBackbone};
use crate::tensor::{Graph, Real};
use crate::{derive_seed, DetRng};

const STREAM_BATCHES: u64 = 20;
const STREAM_DROPOUT: u64 = 21;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Name written into the `run` column.
    pub run: String,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub eval_every: usize,
    pub beta: f64,
    pub delta: f64,
    pub seed: u64,
    /// Stop as soon as an evaluation reaches this eval-A accuracy.
    pub stop_at_eval_a: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub step: usize,
    /// Empty on the closing evaluation row.
    pub task_loss: Option<f64>,
    pub lbc_loss: Option<f64>,
    pub lbc_layers: Vec<f64>,
    /// Batch router mass per expert, averaged over layers.
    pub importance: Vec<f64>,
    pub importance_cv: Option<f64>,
    pub within_group_cv: Option<f64>,
    pub cross_group_ratio: Option<f64>,
    pub eval_a: Option<f64>,
    pub eval_b: Option<f64>,
    pub drift: f64,
}

pub const METRICS_HEADER: [&str; 13] = [
    "run",
    "step",
    "task_loss",
    "lbc_loss",
    "lbc_layers",
    "importance",
    "importance_cv",
    "within_group_cv",
    "cross_group_ratio",
    "eval_a",
    "eval_b",
    "drift",
    "lr",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn joined(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub struct MetricsWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
}

impl<W: std::io::Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(METRICS_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow, lr: f64) -> Result<()> {
        self.inner.write_record([
            row.run.clone(),
            row.step.to_string(),
            opt(row.task_loss),
            opt(row.lbc_loss),
            joined(&row.lbc_layers),
            joined(&row.importance),
            opt(row.importance_cv),
            opt(row.within_group_cv),
            opt(row.cross_group_ratio),
            opt(row.eval_a),
            opt(row.eval_b),
            row.drift.to_string(),
            lr.to_string(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

/// Routing statistics of one layer over one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting {
    /// Total router mass per expert.
    pub totals: Vec<f64>,
    /// Mass on experts whose group matches the sample type.
    pub matched: f64,
    pub mismatched: f64,
}

impl LayerRouting {
    pub fn cross_group_ratio(&self) -> f64 {
        if self.mismatched > 0.0 {
            self.matched / self.mismatched
        } else {
            f64::INFINITY
        }
    }

    pub fn cv(&self) -> Result<f64> {
        coefficient_of_variation(&self.totals)
    }

    /// Mean over groups of the CV of that group's experts.
    pub fn within_group_cv(&self, groups: &[Group]) -> Result<f64> {
        let mut acc = Vec::new();
        for g in [Group::Knowledge, Group::Task] {
            let members: Vec<f64> = groups
                .iter()
                .zip(&self.totals)
                .filter(|(e, _)| **e == g)
                .map(|(_, &t)| t)
                .collect();
            if !members.is_empty() {
                acc.push(coefficient_of_variation(&members)?);
            }
        }
        Ok(acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

fn layer_routing<S: Real>(g: &Graph<S>, rec: &ImportanceRecord<S>, groups: &[Group]) -> LayerRouting {
    let q = g.value(rec.q);
    let (mut matched, mut mismatched) = (0.0, 0.0);
    for (e, eg) in groups.iter().enumerate() {
        for (m, st) in rec.sample_types.iter().enumerate() {
            let v = q.get2(e, m).as_f64();
            if eg == st {
                matched += v;
            } else {
                mismatched += v;
            }
        }
    }
    LayerRouting {
        totals: rec.expert_totals(g),
        matched,
        mismatched,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub task_loss: f64,
    pub lbc_layers: Vec<f64>,
    pub routing: Vec<LayerRouting>,
}

/// One forward/backward/update on the given samples.
pub fn train_step<S: Real>(
    model: &mut ToyBackbone<S>,
    samples: &[&Sample],
    lr: f64,
    beta: f64,
    delta: f64,
    dropout_rng: &mut DetRng,
    step: usize,
) -> Result<StepStats> {
    let batch = make_batch(samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let types: Vec<Group> = samples.iter().map(|s| s.sample_type).collect();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch, Phase::Train(dropout_rng))?;
    let task = g.cross_entropy(out.logits, &labels)?;
    let groups = model.config.adapter.groups.clone();
    let mut lbc = Vec::new();
    let mut routing = Vec::new();
    for &w in &out.router_weights {
        let rec = ImportanceRecord::build(&mut g, w, &batch.segments, None, &groups, &types, delta)?;
        routing.push(layer_routing(&g, &rec, &groups));
        lbc.push(rec.loss(&mut g)?);
    }
    let loss = total_loss(&mut g, task, &lbc, beta)?;
    let task_loss = g.value(task).item().as_f64();
    let lbc_layers: Vec<f64> = lbc.iter().map(|&l| g.value(l).item().as_f64()).collect();
    if !task_loss.is_finite() || !g.value(loss).item().as_f64().is_finite() {
        return Err(Error::NonFinite {
            step,
            lr,
            task_loss,
            lbc_loss: mean(&lbc_layers).unwrap_or(f64::NAN),
        });
    }
    g.backward(loss)?;
    model.store.sgd_step(&g, lr);
    Ok(StepStats {
        task_loss,
        lbc_layers,
        routing,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate<S: Real>(model: &ToyBackbone<S>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, Phase::Eval)?;
        let logits = g.value(out.logits);
        for (i, s) in chunk.iter().enumerate() {
            let row = logits.row(i);
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            correct += usize::from(pred == s.label);
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Per-layer routing statistics of a full evaluation pass. The sample types
/// are only used to split the statistics, never by the model.
pub fn routing_on<S: Real>(model: &ToyBackbone<S>, samples: &[Sample], delta: f64) -> Result<Vec<LayerRouting>> {
    let groups = model.config.adapter.groups.clone();
    let mut acc: Vec<LayerRouting> = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let types: Vec<Group> = chunk.iter().map(|s| s.sample_type).collect();
        let batch = make_batch(&refs)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, Phase::Eval)?;
        if out.router_weights.is_empty() {
            return Err(Error::Mode(format!("{} model has no routers", model.mode().as_str())));
        }
        acc.resize(
            out.router_weights.len(),
            LayerRouting {
                totals: vec![0.0; groups.len()],
                matched: 0.0,
                mismatched: 0.0,
            },
        );
        for (l, &w) in out.router_weights.iter().enumerate() {
            let rec = ImportanceRecord::build(&mut g, w, &batch.segments, None, &groups, &types, delta)?;
            let r = layer_routing(&g, &rec, &groups);
            for (a, t) in acc[l].totals.iter_mut().zip(&r.totals) {
                *a += t;
            }
            acc[l].matched += r.matched;
            acc[l].mismatched += r.mismatched;
        }
    }
    Ok(acc)
}

fn summarize(routing: &[LayerRouting], groups: &[Group]) -> Result<(Vec<f64>, Option<f64>, Option<f64>, Option<f64>)> {
    if routing.is_empty() {
        return Ok((Vec::new(), None, None, None));
    }
    let n = routing.len() as f64;
    let mut importance = vec![0.0; routing[0].totals.len()];
    let (mut cv, mut wcv, mut ratio) = (0.0, 0.0, 0.0);
    for r in routing {
        for (a, t) in importance.iter_mut().zip(&r.totals) {
            *a += t / n;
        }
        cv += r.cv()? / n;
        wcv += r.within_group_cv(groups)? / n;
        ratio += r.cross_group_ratio() / n;
    }
    Ok((importance, Some(cv), Some(wcv), Some(ratio)))
}

/// Mean over layers of the expert-importance CV on a held-out pass.
pub fn held_out_cv(routing: &[LayerRouting]) -> Result<f64> {
    let cvs = routing.iter().map(|r| r.cv()).collect::<Result<Vec<_>>>()?;
    mean(&cvs).ok_or_else(|| Error::Mode("no routed layers".into()))
}

pub fn held_out_within_group_cv(routing: &[LayerRouting], groups: &[Group]) -> Result<f64> {
    let cvs = routing
        .iter()
        .map(|r| r.within_group_cv(groups))
        .collect::<Result<Vec<_>>>()?;
    mean(&cvs).ok_or_else(|| Error::Mode("no routed layers".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub steps_run: usize,
    pub eval_a: Option<f64>,
    pub eval_b: Option<f64>,
    pub reached_target: bool,
}

/// Held-out splits evaluated during training.
#[derive(Clone, Copy, Debug)]
pub struct EvalSets<'a> {
    pub eval_a: &'a [Sample],
    pub eval_b: &'a [Sample],
}

/// Trains `model` on `train` with SGD. Rows are logged at step 0, every
/// `log_every` steps and after the last step.
pub fn run_training<S: Real>(
    model: &mut ToyBackbone<S>,
    train: &[Sample],
    evals: Option<EvalSets<'_>>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Input("empty training split".into()));
    }
    if opts.batch_size == 0 || opts.log_every == 0 {
        return Err(Error::param("batch_size and log_every must be positive"));
    }
    log::info!("{}: {} steps at lr {}", opts.run, opts.steps, opts.lr);
    let mut batch_rng = DetRng::seed_from_u64(derive_seed(opts.seed, STREAM_BATCHES));
    let mut dropout_rng = DetRng::seed_from_u64(derive_seed(opts.seed, STREAM_DROPOUT));
    let start = model.base_snapshot();
    let groups = model.config.adapter.groups.clone();
    let mut rows = Vec::new();
    let (mut last_a, mut last_b) = (None, None);
    let mut reached = false;
    let mut steps_run = 0;

    for step in 0..=opts.steps {
        let eval_now = evals.is_some()
            && (step == opts.steps || (opts.eval_every > 0 && step % opts.eval_every == 0));
        let (mut ea, mut eb) = (None, None);
        if eval_now {
            let e = evals.expect("checked");
            ea = Some(evaluate(model, e.eval_a)?);
            eb = Some(evaluate(model, e.eval_b)?);
            last_a = ea;
            last_b = eb;
            log::info!("{} step {step}: eval-a {:?} eval-b {:?}", opts.run, ea, eb);
            if let (Some(target), Some(a)) = (opts.stop_at_eval_a, ea) {
                reached = a >= target;
            }
        }
        let log_now = step % opts.log_every == 0 || step == opts.steps || reached || eval_now;
        if step == opts.steps || reached {
            if log_now {
                rows.push(MetricsRow {
                    run: opts.run.clone(),
                    step,
                    task_loss: None,
                    lbc_loss: None,
                    lbc_layers: Vec::new(),
                    importance: Vec::new(),
                    importance_cv: None,
                    within_group_cv: None,
                    cross_group_ratio: None,
                    eval_a: ea,
                    eval_b: eb,
                    drift: drift(&start, &model.base_snapshot())?.mean,
                });
            }
            break;
        }

        let picks: Vec<&Sample> = (0..opts.batch_size)
            .map(|_| &train[batch_rng.random_range(0..train.len())])
            .collect();
        let stats = train_step(model, &picks, opts.lr, opts.beta, opts.delta, &mut dropout_rng, step)?;
        steps_run = step + 1;
        if log_now {
            let (importance, cv, wcv, ratio) = summarize(&stats.routing, &groups)?;
            rows.push(MetricsRow {
                run: opts.run.clone(),
                step,
                task_loss: Some(stats.task_loss),
                lbc_loss: mean(&stats.lbc_layers),
                lbc_layers: stats.lbc_layers,
                importance,
                importance_cv: cv,
                within_group_cv: wcv,
                cross_group_ratio: ratio,
                eval_a: ea,
                eval_b: eb,
                drift: drift(&start, &model.base_snapshot())?.mean,
            });
        }
    }
    Ok(TrainOutcome {
        rows,
        steps_run,
        eval_a: last_a,
        eval_b: last_b,
        reached_target: reached,
    })
}
