//! Per-sample router weight dumps.

use serde::Serialize;

use super::data::{make_batch, Sample};
use crate::error::{Error, Result};
use crate::layer::{Group, Phase};
use crate::model::{ToyBackbone, TrainMode};
use crate::tensor::{Graph, Real};

const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingRow {
    pub sample_id: usize,
    /// Carried for analysis only; the model never sees it.
    pub sample_type: Group,
    pub layer: usize,
    pub expert_id: usize,
    pub group: Group,
    pub mean_weight: f64,
}

/// Mean router weight per expert over each sample's tokens, for every
/// wrapped layer.
pub fn dump_routing<S: Real>(model: &ToyBackbone<S>, samples: &[Sample]) -> Result<Vec<RoutingRow>> {
    if model.mode() != TrainMode::FrozenLoramoe {
        return Err(Error::Mode(format!(
            "routing dumps need a frozen-loramoe model, got {}",
            model.mode().as_str()
        )));
    }
    let groups = &model.config.adapter.groups;
    let mut rows = Vec::new();
    for (c, chunk) in samples.chunks(CHUNK).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, Phase::Eval)?;
        let means: Vec<_> = out
            .router_weights
            .iter()
            .map(|&w| g.segment_mean(w, &batch.segments))
            .collect::<Result<_>>()?;
        for (i, s) in chunk.iter().enumerate() {
            for (layer, &m) in means.iter().enumerate() {
                let row = g.value(m).row(i);
                for (e, &w) in row.iter().enumerate() {
                    rows.push(RoutingRow {
                        sample_id: c * CHUNK + i,
                        sample_type: s.sample_type,
                        layer,
                        expert_id: e,
                        group: groups[e],
                        mean_weight: w.as_f64(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_routing_csv<W: std::io::Write>(rows: &[RoutingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Router mass of one group for one sample, averaged over layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleShare {
    pub sample_id: usize,
    pub sample_type: Group,
    pub knowledge: f64,
    pub task: f64,
}

/// Group shares per sample. Shares of one sample and layer sum to 1.
pub fn group_shares(rows: &[RoutingRow]) -> Vec<SampleShare> {
    let mut out: Vec<SampleShare> = Vec::new();
    let mut layers: Vec<usize> = Vec::new();
    for r in rows {
        if out.last().map(|s| s.sample_id) != Some(r.sample_id) {
            out.push(SampleShare {
                sample_id: r.sample_id,
                sample_type: r.sample_type,
                knowledge: 0.0,
                task: 0.0,
            });
            layers.push(0);
        }
        let s = out.last_mut().expect("pushed");
        let n = layers.last_mut().expect("pushed");
        *n = (*n).max(r.layer + 1);
        match r.group {
            Group::Knowledge => s.knowledge += r.mean_weight,
            Group::Task => s.task += r.mean_weight,
        }
    }
    for (s, &n) in out.iter_mut().zip(&layers) {
        s.knowledge /= n as f64;
        s.task /= n as f64;
    }
    out
}

/// Fraction of samples whose own group's share exceeds the mean share that
/// group receives on samples of the other type.
pub fn specialization_rate(shares: &[SampleShare]) -> Result<f64> {
    let mean_of = |t: Group, f: fn(&SampleShare) -> f64| {
        let v: Vec<f64> = shares.iter().filter(|s| s.sample_type == t).map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (Some(k_on_t), Some(t_on_k)) = (mean_of(Group::Task, |s| s.knowledge), mean_of(Group::Knowledge, |s| s.task))
    else {
        return Err(Error::Input("specialization needs samples of both types".into()));
    };
    let hits = shares
        .iter()
        .filter(|s| match s.sample_type {
            Group::Knowledge => s.knowledge > k_on_t,
            Group::Task => s.task > t_on_k,
        })
        .count();
    Ok(hits as f64 / shares.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;
    use crate::harness::data::gen_data;
    use crate::model::build_model;

    #[test]
    fn untrained_router_is_uniform() {
        let cfg = ExperimentConfig::default();
        let ds = gen_data(&cfg).unwrap();
        let mut model = build_model::<f64>(&cfg.model_config(TrainMode::FrozenLoramoe)).unwrap();
        for layer in model.moe_layers().iter().map(|l| l.router.weight).collect::<Vec<_>>() {
            model.store.value_mut(layer).data_mut().fill(0.0);
        }
        let samples = [&ds.eval_a[..20], &ds.eval_b[..20]].concat();
        let rows = dump_routing(&model, &samples).unwrap();
        assert_eq!(rows.len(), 40 * 4 * 6);
        assert!(rows.iter().all(|r| (r.mean_weight - 1.0 / 6.0).abs() < 1e-12));
        for s in group_shares(&rows) {
            assert!((s.knowledge + s.task - 1.0).abs() < 1e-9);
            assert!((s.knowledge - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn group_sums_are_one_and_mode_checked() {
        let cfg = ExperimentConfig::default();
        let ds = gen_data(&cfg).unwrap();
        let model = build_model::<f64>(&cfg.model_config(TrainMode::FrozenLoramoe)).unwrap();
        let rows = dump_routing(&model, &ds.eval_b[..300]).unwrap();
        for chunk in rows.chunks(6) {
            let total: f64 = chunk.iter().map(|r| r.mean_weight).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        assert_eq!(rows.last().unwrap().sample_id, 299);
        let lora = build_model::<f64>(&cfg.model_config(TrainMode::FrozenLora)).unwrap();
        assert!(matches!(dump_routing(&lora, &ds.eval_b[..2]), Err(Error::Mode(_))));
    }

    #[test]
    fn specialization_rate_counts() {
        let s = |id, t, k| SampleShare {
            sample_id: id,
            sample_type: t,
            knowledge: k,
            task: 1.0 - k,
        };
        let shares = [
            s(0, Group::Knowledge, 0.7),
            s(1, Group::Knowledge, 0.4),
            s(2, Group::Task, 0.3),
            s(3, Group::Task, 0.5),
        ];
        // knowledge share on task samples averages 0.4, task share on knowledge 0.45
        assert_eq!(specialization_rate(&shares).unwrap(), 0.75);
        assert!(specialization_rate(&shares[..2]).is_err());
    }
}
