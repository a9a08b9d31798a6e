//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! status 1 when any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 1 3 7`.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use loramoe::balancing::{coefficient_matrix, lbc_loss};
use loramoe::harness::experiments::{
    balance_experiment, forgetting_experiment, grad_check_experiment, grad_check_layer, imbalance_experiment,
    mixture_experiment, route_dump_experiment,
};
use loramoe::harness::{
    gen_data, run_training, ExperimentConfig, ExperimentKind, Precision, TrainOptions,
};
use loramoe::layer::{LayerConfig, LoraLayer, LoraMoeLayer, Phase};
use loramoe::model::{base_param_names, build_model, drift, TrainMode};
use loramoe::tensor::grad_check;
use loramoe::{DetRng, Graph, Group, ParamStore, Tensor};
use rand::SeedableRng;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

type Outcome = Result<Verdict, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_correctness() -> Outcome {
    let cfg = ExperimentConfig::preset(ExperimentKind::GradCheck);
    let gc = &cfg.grad_check;
    let shape_ok = (gc.d_in, gc.d_out, gc.experts, gc.rank) == (8, 6, 4, 2)
        && gc.step == 1e-5
        && cfg.loss.beta == 0.1
        && cfg.precision == Precision::F64;
    let t = Instant::now();
    let r = grad_check_layer(&cfg).map_err(err)?;
    let elapsed = t.elapsed();
    Ok(Verdict::new(
        shape_ok && r.max_relative_error < 1e-4 && elapsed < Duration::from_secs(5),
        format!(
            "max relative error {:.3e} over {} parameters (< 1e-4), {:.2} s (< 5 s)",
            r.max_relative_error,
            r.parameters,
            secs(elapsed)
        ),
    ))
}

fn layer_cfg(groups: Vec<Group>, seed: u64) -> LayerConfig {
    LayerConfig {
        d_in: 8,
        d_out: 6,
        rank: 2,
        alpha: 32.0,
        tau: 1.0,
        dropout: 0.05,
        groups,
        seed,
    }
}

fn degenerate_equivalences() -> Outcome {
    let mut rng = DetRng::seed_from_u64(2);
    let w0 = Tensor::<f64>::randn(&[8, 6], 1.0, &mut rng);
    let b0 = Tensor::<f64>::randn(&[6], 1.0, &mut rng);

    let mut store = ParamStore::new();
    let single = LoraMoeLayer::init(&mut store, "moe", &layer_cfg(vec![Group::Task], 7), Some((w0.clone(), Some(b0.clone())))).map_err(err)?;
    let lora = LoraLayer::init(&mut store, "lora", &layer_cfg(vec![Group::Task], 7), Some((w0.clone(), Some(b0.clone())))).map_err(err)?;
    let b = Tensor::<f64>::randn(&[2, 6], 1.0, &mut rng);
    *store.value_mut(single.experts[0].b) = b.clone();
    *store.value_mut(lora.adapter.b) = b;
    if store.value(single.experts[0].a) != store.value(lora.adapter.a) {
        return Ok(Verdict::new(false, "one-expert layer and LoRA draw different A"));
    }

    let groups = vec![Group::Knowledge, Group::Knowledge, Group::Knowledge, Group::Task, Group::Task, Group::Task];
    let mut zero_store = ParamStore::new();
    let moe = LoraMoeLayer::init(&mut zero_store, "moe", &layer_cfg(groups, 8), Some((w0.clone(), Some(b0.clone())))).map_err(err)?;

    let (mut worst_lora, mut worst_base) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let a = single.forward(&mut g, &store, xv, Phase::Eval).map_err(err)?.output;
        let l = lora.forward(&mut g, &store, xv, Phase::Eval).map_err(err)?;
        worst_lora = worst_lora.max(g.value(a).max_abs_diff(g.value(l)));

        let mut h = Graph::new();
        let xv = h.constant(x.clone());
        let m = moe.forward(&mut h, &zero_store, xv, Phase::Eval).map_err(err)?.output;
        for t in 0..5 {
            for j in 0..6 {
                let base: f64 = (0..8).map(|k| x.get2(t, k) * w0.get2(k, j)).sum::<f64>() + b0.data()[j];
                worst_base = worst_base.max((h.value(m).get2(t, j) - base).abs());
            }
        }
    }
    Ok(Verdict::new(
        worst_lora < 1e-12 && worst_base < 1e-12,
        format!("one expert vs LoRA {worst_lora:.1e}, zero B vs base {worst_base:.1e} over 100 inputs (< 1e-12)"),
    ))
}

fn lbc_oracle() -> Outcome {
    let groups = [Group::Knowledge, Group::Task];
    let value = |q: &Tensor<f64>, delta: f64| -> Result<f64, String> {
        let coeff = coefficient_matrix::<f64>(&groups, &groups, delta).map_err(err)?;
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let l = lbc_loss(&mut g, qv, &coeff).map_err(err)?;
        Ok(g.value(l).item())
    };
    let q = Tensor::from_rows(&[&[1.0, 3.0], &[3.0, 1.0]]);
    let off = (value(&q, 0.0)? - 0.5).abs();
    // With δ = 0.5 the coefficients are [[1.5, 0.5], [0.5, 1.5]]; Z is
    // constant exactly when Q = [[1, 3], [3, 1]].
    let flat = value(&q, 0.5)?;
    let coeff = coefficient_matrix::<f64>(&groups, &groups, 0.1).map_err(err)?;
    let q2 = Tensor::from_rows(&[&[0.7, 2.1], &[1.3, 0.4]]);
    let fd = grad_check(
        |g: &mut Graph<f64>, v: &[loramoe::Var]| lbc_loss(g, v[0], &coeff),
        &[q2],
        1e-6,
    )
    .map_err(err)?;
    Ok(Verdict::new(
        off < 1e-12 && flat == 0.0 && fd < 1e-6,
        format!("|L - 0.5| = {off:.1e}, constant Z gives {flat:e}, gradient error {fd:.1e} (< 1e-6)"),
    ))
}

fn frozen_backbone() -> Outcome {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::Balance);
    cfg.optim.steps = 500;
    let ds = gen_data(&cfg).map_err(err)?;
    let mut model = build_model::<f32>(&cfg.model_config(TrainMode::FrozenLoramoe)).map_err(err)?;
    let before = model.snapshot();
    let opts = TrainOptions {
        run: "frozen".into(),
        lr: cfg.optim.lr,
        steps: 500,
        batch_size: cfg.optim.batch_size,
        log_every: cfg.optim.log_every,
        eval_every: 0,
        beta: cfg.loss.beta,
        delta: cfg.loss.delta,
        seed: cfg.seed,
        stop_at_eval_a: None,
    };
    run_training(&mut model, &ds.finetune, None, &opts).map_err(err)?;
    let after = model.snapshot();
    let base_names = base_param_names(&cfg.dims());
    let identical = base_names.iter().all(|n| {
        let (a, b) = (before.get(n), after.get(n));
        matches!((a, b), (Some(a), Some(b)) if a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    });
    let report = drift(&before, &after).map_err(err)?;
    let (base, adapters): (Vec<_>, Vec<_>) = report.entries.iter().partition(|e| base_names.contains(&e.name));
    let base_zero = base.iter().all(|e| e.change == 0.0);
    let min_adapter = adapters.iter().map(|e| e.change).fold(f64::INFINITY, f64::min);
    Ok(Verdict::new(
        identical && base_zero && base.len() == base_names.len() && !adapters.is_empty() && min_adapter > 0.0,
        format!(
            "{} base tensors bit-identical: {identical}, base drift all 0: {base_zero}, smallest of {} adapter drifts {min_adapter:.3e}",
            base.len(),
            adapters.len()
        ),
    ))
}

struct Imbalance {
    report: loramoe::harness::experiments::ImbalanceReport,
    elapsed: Duration,
}

fn imbalance_run(dir: &Path) -> Result<Imbalance, String> {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::ImbalanceBaseline);
    cfg.out = dir.to_path_buf();
    let t = Instant::now();
    let report = imbalance_experiment::<f32>(&cfg).map_err(err)?;
    Ok(Imbalance {
        report,
        elapsed: t.elapsed(),
    })
}

fn imbalance_baseline(run: &Imbalance) -> Outcome {
    let r = &run.report;
    Ok(Verdict::new(
        r.cv_ratio >= 2.0 && r.constrained.within_group_cv < 0.2 && run.elapsed < Duration::from_secs(300),
        format!(
            "importance CV beta=0 {:.4} vs beta={} {:.4}, ratio {:.2} (>= 2); within-group CV {:.4} (< 0.2); {:.0} s for both runs (< 300 s)",
            r.unconstrained.importance_cv,
            r.constrained.beta,
            r.constrained.importance_cv,
            r.cv_ratio,
            r.constrained.within_group_cv,
            secs(run.elapsed)
        ),
    ))
}

fn group_specialization(run: &Imbalance) -> Outcome {
    let c = &run.report.constrained;
    Ok(Verdict::new(
        c.specialization_rate >= 0.9,
        format!(
            "{:.1}% of held-out samples favour their own group (>= 90%); knowledge-group share {:.3} on knowledge vs {:.3} on task samples",
            100.0 * c.specialization_rate,
            c.mean_knowledge_share_on_knowledge,
            c.mean_knowledge_share_on_task
        ),
    ))
}

fn mixture_weight(dir: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::MixtureSweep);
    let m = &cfg.mixture;
    let setup_ok = (m.p1, m.mu1, m.mu2, m.var1, m.var2, m.n, m.grid_step) == (0.3, 0.0, 4.0, 1.0, 1.0, 5000, 0.05);
    let t = Instant::now();
    let mut best = Vec::new();
    for seed in 0..3 {
        cfg.seed = seed;
        cfg.out = dir.join(format!("seed{seed}"));
        best.push(mixture_experiment(&cfg).map_err(err)?.best_m);
    }
    let elapsed = t.elapsed();
    let inside = best.iter().filter(|&&m| (0.25..=0.35).contains(&m)).count();
    Ok(Verdict::new(
        setup_ok && inside == 3 && elapsed < Duration::from_secs(60),
        format!("best m per seed {best:?}, {inside}/3 in [0.25, 0.35]; {:.1} s (< 60 s)", secs(elapsed)),
    ))
}

fn forgetting(dir: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::Forgetting);
    cfg.out = dir.to_path_buf();
    let r = forgetting_experiment::<f32>(&cfg).map_err(err)?;
    let get = |mode| r.branch(mode).ok_or_else(|| format!("missing branch {mode:?}"));
    let (full, lora, moe) = (get(TrainMode::FullFineTune)?, get(TrainMode::FrozenLora)?, get(TrainMode::FrozenLoramoe)?);
    let tuned = [full, lora, moe];
    let best_b = tuned.iter().map(|b| b.eval_b).fold(0.0, f64::max);
    let b_close = tuned.iter().all(|b| 100.0 * (best_b - b.eval_b) <= 5.0);
    let ordering = moe.eval_a >= lora.eval_a && lora.eval_a >= full.eval_a;
    Ok(Verdict::new(
        ordering && moe.retention_drop <= 10.0 && full.retention_drop >= 20.0 && b_close,
        format!(
            "pretrained eval-A {:.3}; eval-A full {:.3} lora {:.3} loramoe {:.3} (need loramoe >= lora >= full: {ordering}); \
             drops full {:.1} (>= 20) loramoe {:.1} (<= 10); eval-B within 5 points of best {:.3}: {b_close}",
            r.pretrained_eval_a,
            full.eval_a,
            lora.eval_a,
            moe.eval_a,
            full.retention_drop,
            moe.retention_drop,
            best_b
        ),
    ))
}

fn same_bytes(a: &Path, b: &Path, rel: &str, checked: &mut Vec<String>) -> Result<bool, String> {
    let x = fs::read(a.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
    let y = fs::read(b.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
    checked.push(rel.to_string());
    Ok(x == y)
}

fn determinism(dir: &Path) -> Outcome {
    let mut ok = true;
    let mut checked = Vec::new();
    let mut twice = |name: &str, run: &dyn Fn(&Path) -> loramoe::Result<()>, files: &[&str]| -> Result<(), String> {
        let (a, b) = (dir.join(format!("{name}-1")), dir.join(format!("{name}-2")));
        run(&a).map_err(err)?;
        run(&b).map_err(err)?;
        for f in files {
            let rel = format!("{name}-1/{f}");
            let same = same_bytes(&a, &b, f, &mut checked)?;
            if !same {
                checked.push(format!("{rel} DIFFERS"));
            }
            ok &= same;
        }
        Ok(())
    };

    for precision in [Precision::F32, Precision::F64] {
        let mut cfg = ExperimentConfig::preset(ExperimentKind::Balance);
        cfg.optim.steps = 60;
        cfg.optim.log_every = 10;
        cfg.precision = precision;
        let name = format!("balance-{}", precision.as_str());
        twice(
            &name,
            &|out| {
                let mut c = cfg.clone();
                c.out = out.to_path_buf();
                match c.precision {
                    Precision::F32 => balance_experiment::<f32>(&c).map(|_| ()),
                    Precision::F64 => balance_experiment::<f64>(&c).map(|_| ()),
                }
            },
            &["metrics.csv", "checkpoint.bin", "routing.csv", "report.json"],
        )?;
    }

    let mut cfg = ExperimentConfig::preset(ExperimentKind::ImbalanceBaseline);
    cfg.optim.steps = 40;
    cfg.optim.log_every = 10;
    twice(
        "imbalance",
        &|out| {
            let mut c = cfg.clone();
            c.out = out.to_path_buf();
            imbalance_experiment::<f32>(&c).map(|_| ())
        },
        &["metrics.csv", "constrained/checkpoint.bin", "unconstrained/checkpoint.bin"],
    )?;

    let mut cfg = ExperimentConfig::preset(ExperimentKind::Forgetting);
    cfg.optim.steps = 30;
    cfg.optim.log_every = 10;
    cfg.forgetting.pretrain_target = 0.5;
    cfg.forgetting.check_every = 50;
    twice(
        "forgetting",
        &|out| {
            let mut c = cfg.clone();
            c.out = out.to_path_buf();
            forgetting_experiment::<f32>(&c).map(|_| ())
        },
        &[
            "metrics.csv",
            "report.json",
            "full-fine-tune/checkpoint.bin",
            "frozen-lora/checkpoint.bin",
            "frozen-loramoe/checkpoint.bin",
        ],
    )?;

    let cfg = ExperimentConfig::preset(ExperimentKind::GradCheck);
    twice(
        "grad-check",
        &|out| {
            let mut c = cfg.clone();
            c.out = out.to_path_buf();
            grad_check_experiment(&c).map(|_| ())
        },
        &["report.json"],
    )?;

    let cfg = ExperimentConfig::preset(ExperimentKind::MixtureSweep);
    twice(
        "sweep",
        &|out| {
            let mut c = cfg.clone();
            c.out = out.to_path_buf();
            mixture_experiment(&c).map(|_| ())
        },
        &["sweep.csv"],
    )?;

    let source = dir.join("balance-f32-1");
    twice(
        "route-dump",
        &|out| route_dump_experiment::<f32>(&source, out).map(|_| ()),
        &["routing.csv"],
    )?;

    let differing: Vec<&String> = checked.iter().filter(|c| c.ends_with("DIFFERS")).collect();
    Ok(Verdict::new(
        ok,
        if differing.is_empty() {
            format!("{} artifact pairs byte-identical across repeated runs", checked.len())
        } else {
            format!("mismatched: {differing:?}")
        },
    ))
}

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let scratch = tempfile::tempdir().expect("temporary directory");
    let root = scratch.path();

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if run(n) {
            let outcome = f();
            let line = match &outcome {
                Ok(v) => format!("{} {n}. {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail),
                Err(e) => format!("FAIL {n}. {name}: error: {e}"),
            };
            println!("{line}");
            results.push((n, name, outcome));
        }
    };

    record(1, "gradient correctness", &gradient_correctness);
    record(2, "degenerate equivalences", &degenerate_equivalences);
    record(3, "balancing loss oracle", &lbc_oracle);
    record(4, "frozen backbone", &frozen_backbone);
    if run(5) || run(6) {
        match imbalance_run(&root.join("imbalance")) {
            Ok(im) => {
                record(5, "imbalance baseline", &|| imbalance_baseline(&im));
                record(6, "group specialization", &|| group_specialization(&im));
            }
            Err(e) => {
                record(5, "imbalance baseline", &|| Err(e.clone()));
                record(6, "group specialization", &|| Err(e.clone()));
            }
        }
    }
    record(7, "mixture weight recovery", &|| mixture_weight(&root.join("mixture")));
    record(8, "forgetting", &|| forgetting(&root.join("forgetting")));
    record(9, "determinism", &|| determinism(&root.join("determinism")));

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, o)| !matches!(o, Ok(v) if v.passed))
        .map(|(n, _, _)| *n)
        .collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
