//! The canonical experiments. Each one writes its artifacts under the
//! configured output directory and returns a summary.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use serde::Serialize;

use super::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use super::config::ExperimentConfig;
use super::data::{gen_data, Sample, SyntheticDataset};
use super::routing::{dump_routing, group_shares, specialization_rate, write_routing_csv};
use super::train::{
    held_out_cv, held_out_within_group_cv, routing_on, run_training, EvalSets, MetricsRow, MetricsWriter,
    TrainOptions, TrainOutcome,
};
use crate::balancing::ImportanceRecord;
use crate::error::{Error, Result};
use crate::layer::{BoundLayer, Group, LayerConfig, LoraMoeLayer, Phase};
use crate::mixture::{grid, sample_mixture, sweep_m, write_sweep_csv, Sweep};
use crate::model::{build_model, build_model_from_base, drift, ToyBackbone, TrainMode};
use crate::tensor::{grad_check, Graph, ParamStore, Real, Segments, Tensor};
use crate::{derive_seed, DetRng};

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_metrics(dir: &Path, runs: &[(&[MetricsRow], f64)]) -> Result<()> {
    let mut w = MetricsWriter::new(create(dir, "metrics.csv")?)?;
    for (rows, lr) in runs {
        for r in rows.iter() {
            w.write(r, *lr)?;
        }
    }
    w.finish()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub parameters: usize,
}

/// Compares analytic and central-difference gradients of
/// `mean((y − target)²) + β·L_lbc` for one random layer, with respect to
/// every expert matrix and the router.
pub fn grad_check_layer(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    let gc = &cfg.grad_check;
    let groups: Vec<Group> = (0..gc.experts)
        .map(|i| if i < gc.experts.div_ceil(2) { Group::Knowledge } else { Group::Task })
        .collect();
    let layer_cfg = LayerConfig {
        d_in: gc.d_in,
        d_out: gc.d_out,
        rank: gc.rank,
        alpha: cfg.adapter.alpha,
        tau: cfg.adapter.tau,
        dropout: 0.0,
        groups: groups.clone(),
        seed: derive_seed(cfg.seed, 30),
    };
    let mut rng = DetRng::seed_from_u64(derive_seed(cfg.seed, 31));
    let base = (
        Tensor::<f64>::randn(&[gc.d_in, gc.d_out], 1.0, &mut rng),
        Some(Tensor::randn(&[gc.d_out], 1.0, &mut rng)),
    );
    let mut store = ParamStore::new();
    let layer = LoraMoeLayer::init(&mut store, "check", &layer_cfg, Some(base))?;
    let x = Tensor::<f64>::randn(&[gc.tokens, gc.d_in], 1.0, &mut rng);
    let target = Tensor::<f64>::randn(&[gc.tokens, gc.d_out], 1.0, &mut rng);
    let samples = gc.tokens.min(3).max(1);
    let mut lengths = vec![gc.tokens / samples; samples];
    lengths[samples - 1] += gc.tokens % samples;
    let segments = Segments::from_lengths(&lengths)?;
    let types: Vec<Group> = (0..samples)
        .map(|m| if m % 2 == 0 { Group::Knowledge } else { Group::Task })
        .collect();

    // B starts at zero, which would leave A without gradient; the router is
    // widened so the softmax is away from uniform.
    let mut inputs = Vec::new();
    for e in &layer.experts {
        inputs.push(store.value(e.a).clone());
        inputs.push(Tensor::randn(store.value(e.b).shape(), 0.5, &mut rng));
    }
    inputs.push(Tensor::randn(store.value(layer.router.weight).shape(), 0.5, &mut rng));
    let parameters = inputs.iter().map(|t| t.numel()).sum();

    let beta = cfg.loss.beta;
    let delta = cfg.loss.delta;
    let err = grad_check(
        |g: &mut Graph<f64>, vars: &[crate::tensor::Var]| {
            let bound = BoundLayer {
                base_weight: g.bind(&store, layer.base_weight),
                base_bias: layer.base_bias.map(|b| g.bind(&store, b)),
                experts: vars[..2 * layer.experts()].chunks(2).map(|p| (p[0], p[1])).collect(),
                router: vars[2 * layer.experts()],
            };
            let xv = g.constant(x.clone());
            let out = layer.forward_bound(g, &bound, xv, Phase::Eval)?;
            let t = g.constant(target.clone());
            let diff = g.sub(out.output, t)?;
            let sq = g.mul(diff, diff)?;
            let mse = g.mean(sq)?;
            let rec = ImportanceRecord::build(g, out.weights, &segments, None, &groups, &types, delta)?;
            let lbc = rec.loss(g)?;
            let weighted = g.scale(lbc, beta);
            g.add(mse, weighted)
        },
        &inputs,
        gc.step,
    )?;
    Ok(GradCheckReport {
        max_relative_error: err,
        tolerance: gc.tolerance,
        passed: err < gc.tolerance,
        parameters,
    })
}

pub fn grad_check_experiment(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    let report = grad_check_layer(cfg)?;
    Manifest::new(cfg).write(&cfg.out)?;
    write_json(&cfg.out, "report.json", &report)?;
    Ok(report)
}

fn options(cfg: &ExperimentConfig, run: &str, lr: f64, beta: f64) -> TrainOptions {
    TrainOptions {
        run: run.to_string(),
        lr,
        steps: cfg.optim.steps,
        batch_size: cfg.optim.batch_size,
        log_every: cfg.optim.log_every,
        eval_every: cfg.optim.eval_every,
        beta,
        delta: cfg.loss.delta,
        seed: cfg.seed,
        stop_at_eval_a: None,
    }
}

fn eval_sets(ds: &SyntheticDataset) -> EvalSets<'_> {
    EvalSets {
        eval_a: &ds.eval_a,
        eval_b: &ds.eval_b,
    }
}

/// Both held-out splits, in a fixed order.
pub fn held_out(ds: &SyntheticDataset) -> Vec<Sample> {
    [ds.eval_a.as_slice(), ds.eval_b.as_slice()].concat()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BalanceReport {
    pub run: String,
    pub beta: f64,
    pub delta: f64,
    pub steps: usize,
    pub eval_a: Option<f64>,
    pub eval_b: Option<f64>,
    /// Expert-importance CV on the held-out splits, averaged over layers.
    pub importance_cv: f64,
    pub within_group_cv: f64,
    /// Matched-group over mismatched-group mass on the held-out splits.
    pub cross_group_ratio: f64,
    /// Fraction of held-out samples routed more to their own group than the
    /// other type's samples are, on average.
    pub specialization_rate: f64,
    pub mean_knowledge_share_on_knowledge: f64,
    pub mean_knowledge_share_on_task: f64,
    pub first_lbc: Option<f64>,
    pub last_lbc: Option<f64>,
    pub base_drift: f64,
}

pub struct BalanceRun<S> {
    pub model: ToyBackbone<S>,
    pub outcome: TrainOutcome,
    pub report: BalanceReport,
}

/// Trains a frozen-backbone model on the fine-tuning split and measures its
/// routing on held-out data.
pub fn balance_run<S: Real>(cfg: &ExperimentConfig, ds: &SyntheticDataset, run: &str, beta: f64) -> Result<BalanceRun<S>> {
    let mut model = build_model::<S>(&cfg.model_config(cfg.mode))?;
    let start = model.base_snapshot();
    let opts = options(cfg, run, cfg.optim.lr, if model.moe_layers().is_empty() { 0.0 } else { beta });
    let outcome = run_training(&mut model, &ds.finetune, Some(eval_sets(ds)), &opts)?;
    let base_drift = drift(&start, &model.base_snapshot())?.mean;
    let eval = held_out(ds);
    let routing = routing_on(&model, &eval, cfg.loss.delta)?;
    let groups = &cfg.adapter.groups;
    let shares = group_shares(&dump_routing(&model, &eval)?);
    let mean_k = |t: Group| {
        let v: Vec<f64> = shares.iter().filter(|s| s.sample_type == t).map(|s| s.knowledge).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let total_matched: f64 = routing.iter().map(|r| r.matched).sum();
    let total_mismatched: f64 = routing.iter().map(|r| r.mismatched).sum();
    let lbc: Vec<f64> = outcome.rows.iter().filter_map(|r| r.lbc_loss).collect();
    let report = BalanceReport {
        run: run.to_string(),
        beta: opts.beta,
        delta: cfg.loss.delta,
        steps: outcome.steps_run,
        eval_a: outcome.eval_a,
        eval_b: outcome.eval_b,
        importance_cv: held_out_cv(&routing)?,
        within_group_cv: held_out_within_group_cv(&routing, groups)?,
        cross_group_ratio: total_matched / total_mismatched,
        specialization_rate: specialization_rate(&shares)?,
        mean_knowledge_share_on_knowledge: mean_k(Group::Knowledge),
        mean_knowledge_share_on_task: mean_k(Group::Task),
        first_lbc: lbc.first().copied(),
        last_lbc: lbc.last().copied(),
        base_drift,
    };
    Ok(BalanceRun { model, outcome, report })
}

/// Single constrained run: metrics, checkpoint, held-out routing dump and
/// report.
pub fn balance_experiment<S: Real>(cfg: &ExperimentConfig) -> Result<BalanceReport> {
    if cfg.mode != TrainMode::FrozenLoramoe {
        return Err(Error::Mode(format!("balance needs frozen-loramoe, got {}", cfg.mode.as_str())));
    }
    let ds = gen_data(cfg)?;
    let run = balance_run::<S>(cfg, &ds, "balance", cfg.loss.beta)?;
    let out = &cfg.out;
    write_metrics(out, &[(&run.outcome.rows, cfg.optim.lr)])?;
    save_checkpoint(out, cfg, &run.model)?;
    write_routing_csv(&dump_routing(&run.model, &held_out(&ds))?, create(out, "routing.csv")?)?;
    write_json(out, "report.json", &run.report)?;
    Ok(run.report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImbalanceReport {
    pub unconstrained: BalanceReport,
    pub constrained: BalanceReport,
    /// Unconstrained over constrained held-out importance CV.
    pub cv_ratio: f64,
}

/// The same seed trained with β = 0 and with the configured β.
pub fn imbalance_experiment<S: Real>(cfg: &ExperimentConfig) -> Result<ImbalanceReport> {
    if cfg.mode != TrainMode::FrozenLoramoe {
        return Err(Error::Mode(format!("imbalance-baseline needs frozen-loramoe, got {}", cfg.mode.as_str())));
    }
    if cfg.loss.beta == 0.0 {
        return Err(Error::Config(vec!["imbalance-baseline needs loss.beta > 0 for the constrained run".into()]));
    }
    let ds = gen_data(cfg)?;
    let free = balance_run::<S>(cfg, &ds, "beta=0", 0.0)?;
    let held = balance_run::<S>(cfg, &ds, &format!("beta={}", cfg.loss.beta), cfg.loss.beta)?;
    let out = &cfg.out;
    Manifest::new(cfg).write(out)?;
    write_metrics(out, &[(&free.outcome.rows, cfg.optim.lr), (&held.outcome.rows, cfg.optim.lr)])?;
    save_checkpoint(&out.join("constrained"), cfg, &held.model)?;
    save_checkpoint(&out.join("unconstrained"), cfg, &free.model)?;
    let report = ImbalanceReport {
        cv_ratio: free.report.importance_cv / held.report.importance_cv,
        unconstrained: free.report,
        constrained: held.report,
    };
    write_json(out, "report.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BranchReport {
    pub mode: TrainMode,
    pub lr: f64,
    pub trainable: usize,
    pub eval_a: f64,
    pub eval_b: f64,
    /// Pretrained eval-A accuracy minus this branch's, in points.
    pub retention_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForgettingReport {
    pub pretrain_steps: usize,
    pub pretrained_eval_a: f64,
    pub pretrained_eval_b: f64,
    pub branches: Vec<BranchReport>,
}

impl ForgettingReport {
    pub fn branch(&self, mode: TrainMode) -> Option<&BranchReport> {
        self.branches.iter().find(|b| b.mode == mode)
    }
}

pub const BRANCHES: [TrainMode; 4] = [
    TrainMode::FrozenOnly,
    TrainMode::FullFineTune,
    TrainMode::FrozenLora,
    TrainMode::FrozenLoramoe,
];

/// Pretrains on knowledge recall, then fine-tunes copies of the pretrained
/// backbone in every mode and measures recall of held-out keys.
pub fn forgetting_experiment<S: Real>(cfg: &ExperimentConfig) -> Result<ForgettingReport> {
    let ds = gen_data(cfg)?;
    let f = &cfg.forgetting;
    let mut backbone = build_model::<S>(&cfg.model_config(TrainMode::FullFineTune))?;
    let mut pre_opts = options(cfg, "pretrain", f.pretrain_lr, 0.0);
    pre_opts.steps = f.pretrain_max_steps;
    pre_opts.eval_every = f.check_every;
    pre_opts.stop_at_eval_a = Some(f.pretrain_target);
    let pre = run_training(&mut backbone, &ds.pretrain, Some(eval_sets(&ds)), &pre_opts)?;
    let pretrained_eval_a = pre.eval_a.unwrap_or(0.0);
    if !pre.reached_target {
        return Err(Error::Pretraining {
            steps: pre.steps_run,
            accuracy: pretrained_eval_a,
            target: f.pretrain_target,
        });
    }
    let pretrained_eval_b = pre.eval_b.unwrap_or(0.0);
    let base = backbone.base_snapshot();
    let out = &cfg.out;
    let mut metrics: Vec<(Vec<MetricsRow>, f64)> = vec![(pre.rows, f.pretrain_lr)];
    let mut branches = Vec::new();

    for mode in BRANCHES {
        let mut model = build_model_from_base::<S>(&cfg.model_config(mode), &base)?;
        let lr = match mode {
            TrainMode::FullFineTune => f.full_lr.unwrap_or(cfg.optim.lr),
            TrainMode::FrozenLora => f.lora_lr.unwrap_or(cfg.optim.lr),
            _ => cfg.optim.lr,
        };
        let (eval_a, eval_b) = if mode == TrainMode::FrozenOnly {
            (
                super::train::evaluate(&model, &ds.eval_a)?,
                super::train::evaluate(&model, &ds.eval_b)?,
            )
        } else {
            let beta = if mode == TrainMode::FrozenLoramoe { cfg.loss.beta } else { 0.0 };
            let outcome = run_training(&mut model, &ds.finetune, Some(eval_sets(&ds)), &options(cfg, mode.as_str(), lr, beta))?;
            save_checkpoint(&out.join(mode.as_str()), cfg, &model)?;
            metrics.push((outcome.rows, lr));
            (outcome.eval_a.unwrap_or(0.0), outcome.eval_b.unwrap_or(0.0))
        };
        branches.push(BranchReport {
            mode,
            lr,
            trainable: model.trainable_count(),
            eval_a,
            eval_b,
            retention_drop: 100.0 * (pretrained_eval_a - eval_a),
        });
    }

    let report = ForgettingReport {
        pretrain_steps: pre.steps_run,
        pretrained_eval_a,
        pretrained_eval_b,
        branches,
    };
    Manifest::new(cfg).write(out)?;
    let runs: Vec<(&[MetricsRow], f64)> = metrics.iter().map(|(r, lr)| (r.as_slice(), *lr)).collect();
    write_metrics(out, &runs)?;
    write_json(out, "report.json", &report)?;
    Ok(report)
}

/// Sweep of the fixed mixing weight on data drawn with the configured seed.
pub fn mixture_experiment(cfg: &ExperimentConfig) -> Result<Sweep> {
    let data = sample_mixture(&cfg.mixture_spec(cfg.seed))?;
    let sweep = sweep_m(&data.values, &grid(cfg.mixture.grid_step)?)?;
    Manifest::new(cfg).write(&cfg.out)?;
    write_sweep_csv(&sweep, create(&cfg.out, "sweep.csv")?)?;
    Ok(sweep)
}

/// Routing dump of a saved LoRAMoE checkpoint on the held-out splits of its
/// own dataset.
pub fn route_dump_experiment<S: Real>(checkpoint: &Path, out: &Path) -> Result<usize> {
    let (manifest, model) = load_checkpoint::<S>(checkpoint)?;
    let mut cfg = manifest.config;
    cfg.seed = model.config.seed;
    let ds = gen_data(&cfg)?;
    let rows = dump_routing(&model, &held_out(&ds))?;
    cfg.out = out.to_path_buf();
    Manifest::new(&cfg).write(out)?;
    write_routing_csv(&rows, create(out, "routing.csv")?)?;
    Ok(rows.len())
}

/// Writes every split as CSV.
pub fn gen_data_experiment(cfg: &ExperimentConfig) -> Result<SyntheticDataset> {
    let ds = gen_data(cfg)?;
    Manifest::new(cfg).write(&cfg.out)?;
    ds.write_csv(create(&cfg.out, "dataset.csv")?)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentKind;

    #[test]
    fn layer_gradients_check() {
        let cfg = ExperimentConfig::preset(ExperimentKind::GradCheck);
        let r = grad_check_layer(&cfg).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.parameters, 4 * (8 * 2 + 2 * 6) + 8 * 4);
    }
}
