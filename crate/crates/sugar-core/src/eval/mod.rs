//! Evaluation protocols, metrics, and the 2D embedding export.

mod ablation;
mod embed2d;

pub use ablation::{
    mean_metric, outcomes_csv, run_bridge_ablation, run_knowledge_ablation,
    run_token_length_sweep, AblationOutcome, BRIDGES, KNOWLEDGE_CHANNELS,
};
pub use embed2d::{export_embeddings_2d, per_class_silhouette, silhouette_score, tsne_2d, TsneConfig};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SugarError};
use crate::skeleton::SkeletonSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    ClosedSet,
    ZeroShotUnseen,
    ZeroShotCrossList,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    BySubject,
    BySample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Top1,
    Top5,
    MeanPerClass,
}

/// Evaluation protocol: which classes train, which are scored, and how.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Protocol {
    pub kind: ProtocolKind,
    pub train_classes: Vec<String>,
    pub eval_classes: Vec<String>,
    pub split: SplitKind,
    pub metrics: Vec<MetricKind>,
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if self.train_classes.is_empty() || self.eval_classes.is_empty() {
            return Err(SugarError::Protocol("empty class lists".into()));
        }
        let overlap: Vec<_> = self
            .eval_classes
            .iter()
            .filter(|c| self.train_classes.contains(c))
            .collect();
        match self.kind {
            ProtocolKind::ClosedSet => {
                if self.train_classes != self.eval_classes {
                    return Err(SugarError::Protocol(
                        "closed-set protocol requires identical train and eval classes".into(),
                    ));
                }
            }
            ProtocolKind::ZeroShotUnseen | ProtocolKind::ZeroShotCrossList => {
                if !overlap.is_empty() {
                    return Err(SugarError::Protocol(format!(
                        "zero-shot eval classes leak into training: {overlap:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        match self.kind {
            ProtocolKind::ClosedSet => "closed_set".into(),
            ProtocolKind::ZeroShotUnseen => "zero_shot_unseen".into(),
            ProtocolKind::ZeroShotCrossList => "zero_shot_cross_list".into(),
        }
    }
}

/// Produces a best-first ranking over an inference action list.
pub trait Ranker {
    fn rank(&self, seq: &SkeletonSequence) -> Result<Vec<String>>;
}

/// One evaluation outcome bound to its exact settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub protocol_id: String,
    pub metrics: BTreeMap<String, f64>,
    pub config_hash: String,
    pub split_hash: String,
    pub seed: u64,
    /// Wall-clock is informational only and never serialized, so records
    /// stay bit-reproducible.
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

/// Raw tallies behind a record.
#[derive(Debug, Clone)]
pub struct EvalBreakdown {
    /// class name -> (top-1 hits, top-5 hits, total)
    pub per_class: BTreeMap<String, (usize, usize, usize)>,
    /// (true class, ranked names) per sample, evaluation order.
    pub predictions: Vec<(String, Vec<String>)>,
}

impl EvalBreakdown {
    pub fn top1_over(&self, classes: &[String]) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for name in classes {
            if let Some(&(h, _, t)) = self.per_class.get(name) {
                hits += h;
                total += t;
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

/// Canonical hex hash of any serializable config.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Score a ranker over labelled sequences. Every sample's class must be in
/// the protocol's eval list; labels index `label_names`.
pub fn evaluate(
    protocol: &Protocol,
    ranker: &dyn Ranker,
    dataset: &[SkeletonSequence],
    label_names: &[String],
    config_hash: &str,
    split_hash: &str,
    seed: u64,
) -> Result<(ResultRecord, EvalBreakdown)> {
    protocol.validate()?;
    let start = Instant::now();
    let mut per_class: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let mut predictions = Vec::with_capacity(dataset.len());
    for (i, seq) in dataset.iter().enumerate() {
        let label = seq
            .label()
            .ok_or_else(|| SugarError::Protocol(format!("sample {i} has no label")))?;
        let name = label_names
            .get(label as usize)
            .ok_or_else(|| SugarError::Protocol(format!("sample {i} label {label} unknown")))?;
        if !protocol.eval_classes.contains(name) {
            return Err(SugarError::Protocol(format!(
                "sample {i} class {name:?} is not in the protocol's eval list"
            )));
        }
        let ranking = ranker.rank(seq)?;
        let entry = per_class.entry(name.clone()).or_insert((0, 0, 0));
        entry.2 += 1;
        if ranking.first() == Some(name) {
            entry.0 += 1;
        }
        if ranking.iter().take(5).any(|r| r == name) {
            entry.1 += 1;
        }
        predictions.push((name.clone(), ranking));
    }

    let totals: (usize, usize, usize) = per_class
        .values()
        .fold((0, 0, 0), |acc, &(h1, h5, t)| (acc.0 + h1, acc.1 + h5, acc.2 + t));
    let mut metrics = BTreeMap::new();
    for metric in &protocol.metrics {
        match metric {
            MetricKind::Top1 => {
                metrics.insert(
                    "top1".to_string(),
                    if totals.2 == 0 {
                        0.0
                    } else {
                        totals.0 as f64 / totals.2 as f64
                    },
                );
            }
            MetricKind::Top5 => {
                metrics.insert(
                    "top5".to_string(),
                    if totals.2 == 0 {
                        0.0
                    } else {
                        totals.1 as f64 / totals.2 as f64
                    },
                );
            }
            MetricKind::MeanPerClass => {
                // Unweighted mean of per-class recalls over the eval list;
                // classes with no samples are skipped.
                let mut sum = 0.0;
                let mut n = 0usize;
                for name in &protocol.eval_classes {
                    if let Some(&(h, _, t)) = per_class.get(name) {
                        if t > 0 {
                            sum += h as f64 / t as f64;
                            n += 1;
                        }
                    }
                }
                metrics.insert(
                    "mean_per_class".to_string(),
                    if n == 0 { 0.0 } else { sum / n as f64 },
                );
            }
        }
    }

    Ok((
        ResultRecord {
            protocol_id: protocol.id(),
            metrics,
            config_hash: config_hash.to_string(),
            split_hash: split_hash.to_string(),
            seed,
            wall_clock_ms: start.elapsed().as_millis(),
        },
        EvalBreakdown {
            per_class,
            predictions,
        },
    ))
}

pub fn write_records_jsonl<P: AsRef<std::path::Path>>(
    path: P,
    records: &[ResultRecord],
) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(std::fs::write(path, out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    fn dummy_dataset(labels: &[usize]) -> Vec<SkeletonSequence> {
        labels
            .iter()
            .map(|&l| {
                SkeletonSequence::new(Array3::zeros((1, 1, 3)), Some(l as i32), None).unwrap()
            })
            .collect()
    }

    fn closed_protocol(classes: &[String]) -> Protocol {
        Protocol {
            kind: ProtocolKind::ClosedSet,
            train_classes: classes.to_vec(),
            eval_classes: classes.to_vec(),
            split: SplitKind::BySample,
            metrics: vec![MetricKind::Top1, MetricKind::Top5, MetricKind::MeanPerClass],
        }
    }

    struct Oracle {
        names: Vec<String>,
    }
    impl Ranker for Oracle {
        fn rank(&self, seq: &SkeletonSequence) -> Result<Vec<String>> {
            let label = seq.label().unwrap() as usize;
            let top = self.names[label].clone();
            let mut out = vec![top.clone()];
            out.extend(self.names.iter().filter(|n| **n != top).cloned());
            Ok(out)
        }
    }

    struct UniformRandom {
        names: Vec<String>,
        rng: RefCell<ChaCha8Rng>,
    }
    impl Ranker for UniformRandom {
        fn rank(&self, _seq: &SkeletonSequence) -> Result<Vec<String>> {
            use rand::seq::SliceRandom;
            let mut order = self.names.clone();
            order.shuffle(&mut *self.rng.borrow_mut());
            Ok(order)
        }
    }

    struct Majority {
        names: Vec<String>,
    }
    impl Ranker for Majority {
        fn rank(&self, _seq: &SkeletonSequence) -> Result<Vec<String>> {
            Ok(self.names.clone())
        }
    }

    #[test]
    fn perfect_oracle_scores_one() {
        let classes = names(6);
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let dataset = dummy_dataset(&labels);
        let oracle = Oracle {
            names: classes.clone(),
        };
        let (record, _) = evaluate(
            &closed_protocol(&classes),
            &oracle,
            &dataset,
            &classes,
            "cfg",
            "split",
            0,
        )
        .unwrap();
        assert_eq!(record.metrics["top1"], 1.0);
        assert_eq!(record.metrics["top5"], 1.0);
        assert_eq!(record.metrics["mean_per_class"], 1.0);
    }

    #[test]
    fn uniform_random_ranker_matches_analytic_expectation() {
        let classes = names(6);
        let labels: Vec<usize> = (0..10_000).map(|i| i % 6).collect();
        let dataset = dummy_dataset(&labels);
        let ranker = UniformRandom {
            names: classes.clone(),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(5)),
        };
        let (record, _) = evaluate(
            &closed_protocol(&classes),
            &ranker,
            &dataset,
            &classes,
            "cfg",
            "split",
            0,
        )
        .unwrap();
        assert!((record.metrics["top1"] - 1.0 / 6.0).abs() < 0.02);
        assert!((record.metrics["top5"] - 5.0 / 6.0).abs() < 0.02);
    }

    #[test]
    fn imbalanced_majority_separates_top1_from_mean_per_class() {
        let classes = names(2);
        let mut labels = vec![0usize; 90];
        labels.extend(vec![1usize; 10]);
        let dataset = dummy_dataset(&labels);
        let ranker = Majority {
            names: classes.clone(),
        };
        let (record, _) = evaluate(
            &closed_protocol(&classes),
            &ranker,
            &dataset,
            &classes,
            "cfg",
            "split",
            0,
        )
        .unwrap();
        assert!((record.metrics["top1"] - 0.9).abs() < 1e-12);
        assert!((record.metrics["mean_per_class"] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sample_outside_eval_list_is_protocol_error() {
        let classes = names(2);
        let dataset = dummy_dataset(&[0, 1, 1]);
        let mut protocol = closed_protocol(&classes);
        protocol.eval_classes = vec![classes[0].clone()];
        protocol.train_classes = vec![classes[0].clone()];
        let oracle = Oracle {
            names: classes.clone(),
        };
        assert!(matches!(
            evaluate(&protocol, &oracle, &dataset, &classes, "c", "s", 0),
            Err(SugarError::Protocol(_))
        ));
    }

    #[test]
    fn zero_shot_protocol_rejects_overlap() {
        let classes = names(3);
        let protocol = Protocol {
            kind: ProtocolKind::ZeroShotUnseen,
            train_classes: vec![classes[0].clone(), classes[1].clone()],
            eval_classes: vec![classes[1].clone(), classes[2].clone()],
            split: SplitKind::BySample,
            metrics: vec![MetricKind::Top1],
        };
        assert!(matches!(
            protocol.validate(),
            Err(SugarError::Protocol(_))
        ));
    }

    #[test]
    fn balanced_symmetric_predictor_makes_mean_per_class_equal_top1() {
        // Constructed confusion: every class has the same recall.
        let classes = names(3);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let dataset = dummy_dataset(&labels);
        struct Cyclic {
            names: Vec<String>,
            counter: RefCell<usize>,
        }
        impl Ranker for Cyclic {
            fn rank(&self, seq: &SkeletonSequence) -> Result<Vec<String>> {
                let mut c = self.counter.borrow_mut();
                *c += 1;
                // Wrong on every third sample of each class, right otherwise.
                let label = seq.label().unwrap() as usize;
                let pick = if *c % 3 == 0 { (label + 1) % 3 } else { label };
                let top = self.names[pick].clone();
                let mut out = vec![top.clone()];
                out.extend(self.names.iter().filter(|n| **n != top).cloned());
                Ok(out)
            }
        }
        let ranker = Cyclic {
            names: classes.clone(),
            counter: RefCell::new(0),
        };
        let (record, _) = evaluate(
            &closed_protocol(&classes),
            &ranker,
            &dataset,
            &classes,
            "cfg",
            "split",
            0,
        )
        .unwrap();
        assert!((record.metrics["top1"] - record.metrics["mean_per_class"]).abs() < 1e-12);
    }

    #[test]
    fn record_serialization_skips_wall_clock() {
        let record = ResultRecord {
            protocol_id: "closed_set".into(),
            metrics: BTreeMap::from([("top1".to_string(), 0.5)]),
            config_hash: "abc".into(),
            split_hash: "def".into(),
            seed: 7,
            wall_clock_ms: 1234,
        };
        let json = serde_json::to_string(&record).unwrap();
        assert!(!json.contains("wall_clock"));
        let again: ResultRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(again.wall_clock_ms, 0);
        assert_eq!(serde_json::to_string(&again).unwrap(), json);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1, "y": "z"}));
        let b = config_hash(&serde_json::json!({"x": 1, "y": "z"}));
        let c = config_hash(&serde_json::json!({"x": 2, "y": "z"}));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn uniform_random_rng_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: f64 = rng.random();
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let b: f64 = rng2.random();
        assert_eq!(a, b);
    }
}
