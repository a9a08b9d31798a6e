//! Synthetic knowledge-recall and rule-following data.
//!
//! The vocabulary is laid out as `[keys | template tokens | task tokens]`.
//! A knowledge sample is one key among template filler and is labelled with
//! the value stored for that key. A task sample is a run of task tokens,
//! each coloured `token mod n_classes`, labelled with its unique most
//! frequent colour. Neither rule depends on token positions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::config::{majority_count, ExperimentConfig};
use crate::error::{Error, Result};
use crate::layer::Group;
use crate::model::Batch;
use crate::tensor::Segments;
use crate::{derive_seed, DetRng};

const STREAM_DATA: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    Finetune,
    EvalA,
    EvalB,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Finetune, Split::EvalA, Split::EvalB];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::EvalA => "eval-a",
            Split::EvalB => "eval-b",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub sample_type: Group,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n_keys: usize,
    pub template_tokens: usize,
    pub task_tokens: usize,
    pub n_classes: usize,
    pub seq_len: usize,
}

impl Layout {
    pub fn template(&self, i: usize) -> usize {
        self.n_keys + i
    }

    pub fn task(&self, i: usize) -> usize {
        self.n_keys + self.template_tokens + i
    }

    pub fn is_key(&self, token: usize) -> bool {
        token < self.n_keys
    }

    /// Colour of a task token, `None` for keys and templates.
    pub fn colour(&self, token: usize) -> Option<usize> {
        let first = self.n_keys + self.template_tokens;
        (token >= first && token < first + self.task_tokens).then(|| (token - first) % self.n_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticDataset {
    pub layout: Layout,
    /// Stored value of every key.
    pub values: Vec<usize>,
    pub eval_keys: Vec<usize>,
    pub finetune_keys: Vec<usize>,
    pub pretrain: Vec<Sample>,
    pub finetune: Vec<Sample>,
    pub eval_a: Vec<Sample>,
    pub eval_b: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Finetune => &self.finetune,
            Split::EvalA => &self.eval_a,
            Split::EvalB => &self.eval_b,
        }
    }

    /// Value for a knowledge sample, majority colour for a task sample.
    pub fn rule_label(&self, tokens: &[usize]) -> Option<usize> {
        if let Some(&k) = tokens.iter().find(|&&t| self.layout.is_key(t)) {
            return Some(self.values[k]);
        }
        let mut counts = vec![0usize; self.layout.n_classes];
        for &t in tokens {
            counts[self.layout.colour(t)?] += 1;
        }
        let top = *counts.iter().max()?;
        let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == top);
        let (label, _) = winners.next()?;
        winners.next().is_none().then_some(label)
    }

    /// Writes `split,sample_type,label,tokens` with space-separated tokens.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["split", "sample_type", "label", "tokens"])?;
        for split in Split::ALL {
            for s in self.split(split) {
                let tokens = s.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
                w.write_record([split.as_str(), s.sample_type.as_str(), &s.label.to_string(), &tokens])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn knowledge_sample(layout: &Layout, key: usize, value: usize, rng: &mut DetRng) -> Sample {
    let mut tokens: Vec<usize> = (0..layout.seq_len - 1)
        .map(|_| layout.template(rng.random_range(0..layout.template_tokens)))
        .collect();
    let at = rng.random_range(0..layout.seq_len);
    tokens.insert(at, key);
    Sample {
        tokens,
        label: value,
        sample_type: Group::Knowledge,
    }
}

fn task_sample(layout: &Layout, rng: &mut DetRng) -> Sample {
    let c = layout.n_classes;
    let lead = majority_count(layout.seq_len);
    let label = rng.random_range(0..c);
    let mut counts = vec![0usize; c];
    counts[label] = lead;
    let mut colours = vec![label; lead];
    while colours.len() < layout.seq_len {
        let other = (label + 1 + rng.random_range(0..c - 1)) % c;
        if counts[other] + 1 < lead {
            counts[other] += 1;
            colours.push(other);
        }
    }
    colours.shuffle(rng);
    let per_colour = |col: usize| (0..layout.task_tokens).filter(|i| i % c == col).count();
    let tokens = colours
        .into_iter()
        .map(|col| layout.task(col + c * rng.random_range(0..per_colour(col))))
        .collect();
    Sample {
        tokens,
        label,
        sample_type: Group::Task,
    }
}

/// Builds every split deterministically from the config seed.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let d = &cfg.data;
    let layout = Layout {
        n_keys: d.n_keys,
        template_tokens: d.template_tokens,
        task_tokens: cfg.task_tokens(),
        n_classes: cfg.model.n_classes,
        seq_len: d.seq_len,
    };
    if layout.task_tokens < layout.n_classes {
        return Err(Error::Config(vec!["vocabulary too small for the task tokens".into()]));
    }
    let mut rng = DetRng::seed_from_u64(derive_seed(cfg.seed, STREAM_DATA));

    let mut values: Vec<usize> = (0..d.n_keys).map(|k| k % layout.n_classes).collect();
    values.shuffle(&mut rng);
    // Held-out keys are taken round-robin over values so eval-A labels stay
    // balanced.
    let mut by_value: Vec<Vec<usize>> = vec![Vec::new(); layout.n_classes];
    for k in 0..d.n_keys {
        by_value[values[k]].push(k);
    }
    for keys in &mut by_value {
        keys.shuffle(&mut rng);
    }
    let mut eval_keys = Vec::with_capacity(d.eval_keys);
    for round in 0.. {
        for keys in &by_value {
            if eval_keys.len() < d.eval_keys && round < keys.len() {
                eval_keys.push(keys[round]);
            }
        }
        if eval_keys.len() == d.eval_keys {
            break;
        }
    }
    eval_keys.sort_unstable();
    let finetune_keys: Vec<usize> = (0..d.n_keys).filter(|k| !eval_keys.contains(k)).collect();

    let knowledge_from = |pool: &[usize], n: usize, rng: &mut DetRng| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let key = pool[i % pool.len()];
                knowledge_sample(&layout, key, values[key], rng)
            })
            .collect()
    };

    let all_keys: Vec<usize> = (0..d.n_keys).collect();
    let mut pretrain = knowledge_from(&all_keys, d.pretrain_samples, &mut rng);
    pretrain.shuffle(&mut rng);

    let n_knowledge = (d.finetune_samples as f64 * d.knowledge_fraction).round() as usize;
    let mut finetune = knowledge_from(&finetune_keys, n_knowledge, &mut rng);
    finetune.extend((n_knowledge..d.finetune_samples).map(|_| task_sample(&layout, &mut rng)));
    finetune.shuffle(&mut rng);

    let eval_a = knowledge_from(&eval_keys, d.eval_samples, &mut rng);
    let eval_b = (0..d.eval_samples).map(|_| task_sample(&layout, &mut rng)).collect();

    Ok(SyntheticDataset {
        layout,
        values,
        eval_keys,
        finetune_keys,
        pretrain,
        finetune,
        eval_a,
        eval_b,
    })
}

/// Flattens samples into one batch. Sample types are not part of the batch.
pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let lengths: Vec<usize> = samples.iter().map(|s| s.tokens.len()).collect();
    Ok(Batch {
        tokens: samples.iter().flat_map(|s| s.tokens.iter().copied()).collect(),
        segments: Segments::from_lengths(&lengths)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentKind;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::preset(ExperimentKind::Forgetting)
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_data(&cfg()).unwrap(), gen_data(&cfg()).unwrap());
        let mut other = cfg();
        other.seed = 1;
        assert_ne!(gen_data(&cfg()).unwrap().pretrain, gen_data(&other).unwrap().pretrain);
    }

    #[test]
    fn eval_keys_never_fine_tuned() {
        let ds = gen_data(&cfg()).unwrap();
        assert!(ds.eval_keys.iter().all(|k| !ds.finetune_keys.contains(k)));
        let ft_keys: Vec<usize> = ds
            .finetune
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .filter(|&t| ds.layout.is_key(t))
            .collect();
        assert!(ft_keys.iter().all(|k| !ds.eval_keys.contains(k)));
        assert!(ds.eval_a.iter().all(|s| s.tokens.iter().any(|t| ds.eval_keys.contains(t))));
    }

    #[test]
    fn labels_follow_rules() {
        let ds = gen_data(&cfg()).unwrap();
        for split in Split::ALL {
            for s in ds.split(split) {
                assert_eq!(s.tokens.len(), 8);
                assert_eq!(ds.rule_label(&s.tokens), Some(s.label), "{s:?}");
                let keys = s.tokens.iter().filter(|&&t| ds.layout.is_key(t)).count();
                match s.sample_type {
                    Group::Knowledge => assert_eq!(keys, 1),
                    Group::Task => assert_eq!(keys, 0),
                }
            }
        }
        let mut rev = ds.eval_b[0].tokens.clone();
        rev.reverse();
        assert_eq!(ds.rule_label(&rev), Some(ds.eval_b[0].label));
    }

    #[test]
    fn proportions_and_balance() {
        let ds = gen_data(&cfg()).unwrap();
        let k = ds.finetune.iter().filter(|s| s.sample_type == Group::Knowledge).count();
        assert_eq!(k, (2048.0f64 * 0.2).round() as usize);
        for c in 0..4 {
            assert_eq!(ds.values.iter().filter(|&&v| v == c).count(), 8);
            assert_eq!(ds.eval_keys.iter().filter(|&&k| ds.values[k] == c).count(), 4);
            assert_eq!(ds.eval_a.iter().filter(|s| s.label == c).count(), 128);
        }
        assert!(ds.pretrain.iter().all(|s| s.sample_type == Group::Knowledge));
        assert!(ds.eval_b.iter().all(|s| s.sample_type == Group::Task));
    }

    #[test]
    fn vocabulary_too_small() {
        let mut c = cfg();
        c.model.vocab = 42;
        assert!(matches!(gen_data(&c), Err(Error::Config(_))));
    }

    #[test]
    fn batches_concatenate() {
        let ds = gen_data(&cfg()).unwrap();
        let b = make_batch(&[&ds.eval_a[0], &ds.eval_b[0]]).unwrap();
        assert_eq!(b.tokens.len(), 16);
        assert_eq!(b.segments.len(), 2);
    }
}
