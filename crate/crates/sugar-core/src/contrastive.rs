//! Contrastive pretraining of the skeleton encoder against per-action text
//! embedding sets: each pooled skeleton vector must match any vector of its
//! own action's set against all sets in the batch.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sugar_autodiff::{Binding, GradAccum, ParamStore, Sgd, Tape, Var};

use crate::encoder::SkeletonEncoder;
use crate::error::{Result, SugarError};
use crate::nn::{Fwd, Linear};
use crate::skeleton::SkeletonSequence;

/// One contrastive batch: pooled unit vectors and, per sample, its positive
/// text set. The negatives pool is the union of all sets in the batch.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub skeleton_features: Array2<f64>,
    pub text_sets: Vec<Vec<Array1<f64>>>,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        let (b, d) = (self.skeleton_features.nrows(), self.skeleton_features.ncols());
        if b != self.text_sets.len() {
            return Err(SugarError::Batch(format!(
                "{b} skeleton rows vs {} text sets",
                self.text_sets.len()
            )));
        }
        for (i, set) in self.text_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(SugarError::Batch(format!("sample {i} has no positives")));
            }
            for v in set {
                if v.len() != d {
                    return Err(SugarError::Batch(format!(
                        "sample {i} has a text vector of dim {}, expected {d}",
                        v.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stack every text set row-wise and mark each sample's own columns.
    fn flatten(&self) -> (Array2<f64>, Array2<f64>) {
        let d = self.skeleton_features.ncols();
        let total: usize = self.text_sets.iter().map(Vec::len).sum();
        let b = self.text_sets.len();
        let mut texts = Array2::<f64>::zeros((total, d));
        let mut mask = Array2::<f64>::zeros((b, total));
        let mut row = 0usize;
        for (i, set) in self.text_sets.iter().enumerate() {
            for v in set {
                texts.row_mut(row).assign(v);
                mask[[i, row]] = 1.0;
                row += 1;
            }
        }
        (texts, mask)
    }
}

/// Multi-positive contrastive loss:
/// -(1/B) sum_i log( sum_{n in pos(i)} exp(s_i.t_n / tau) / sum_n exp(s_i.t_n / tau) ).
pub fn mil_nce_loss(batch: &ContrastiveBatch, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(SugarError::InvalidConfig(format!(
            "temperature {tau} must be positive"
        )));
    }
    batch.validate()?;
    let (texts, mask) = batch.flatten();
    let logits = batch.skeleton_features.dot(&texts.t()) / tau;
    let b = logits.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_all: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let sum_pos: f64 = row
            .iter()
            .zip(mask.row(i).iter())
            .filter(|(_, &m)| m != 0.0)
            .map(|(x, _)| (x - max).exp())
            .sum();
        total += sum_all.ln() - sum_pos.ln();
    }
    Ok(total / b as f64)
}

/// Tape version of the loss for training: `pooled` is the [B, d_t] node.
pub fn mil_nce_loss_var(
    tape: &mut Tape,
    pooled: Var,
    batch_sets: &[Vec<Array1<f64>>],
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(SugarError::InvalidConfig(format!(
            "temperature {tau} must be positive"
        )));
    }
    let d = tape.value(pooled).shape()[1];
    let total: usize = batch_sets.iter().map(Vec::len).sum();
    let b = batch_sets.len();
    let mut texts_t = Array2::<f64>::zeros((d, total));
    let mut mask = Array2::<f64>::zeros((b, total));
    let mut col = 0usize;
    for (i, set) in batch_sets.iter().enumerate() {
        if set.is_empty() {
            return Err(SugarError::Batch(format!("sample {i} has no positives")));
        }
        for v in set {
            texts_t.column_mut(col).assign(v);
            mask[[i, col]] = 1.0;
            col += 1;
        }
    }
    let texts_var = tape.constant(texts_t.into_dyn());
    let sims = tape.matmul(pooled, texts_var)?;
    let logits = tape.scalar_mul(sims, 1.0 / tau);
    Ok(tape.mil_nce(logits, mask)?)
}

/// Global gradient-norm ceiling for both pretraining losses.
const MAX_GRAD_NORM: f64 = 5.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub temperature: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            temperature: 0.07,
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            lr_decay_factor: 0.1,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(SugarError::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.batch_size < 2 {
            return Err(SugarError::InvalidConfig(format!(
                "batch size {} below 2",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(SugarError::InvalidConfig("zero epochs".into()));
        }
        Ok(())
    }

    /// Epochs at whose start the learning rate decays (60% and 80%).
    pub fn decay_epochs(&self) -> [usize; 2] {
        [
            (self.epochs as f64 * 0.6).floor() as usize,
            (self.epochs as f64 * 0.8).floor() as usize,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub retrieval_top1: f64,
    pub lr: f64,
}

pub fn write_metrics_jsonl<P: AsRef<std::path::Path>>(
    path: P,
    metrics: &[EpochMetrics],
) -> Result<()> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(std::fs::write(path, out)?)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"pretrain-epoch");
    hasher.update(seed.to_le_bytes());
    hasher.update((epoch as u64).to_le_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

fn check_labels(dataset: &[SkeletonSequence], num_classes: usize) -> Result<Vec<usize>> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, seq)| match seq.label() {
            Some(label) if (label as usize) < num_classes && label >= 0 => Ok(label as usize),
            Some(label) => Err(SugarError::Dataset(format!(
                "sample {i} has label {label} outside the {num_classes}-class bank"
            ))),
            None => Err(SugarError::Dataset(format!("sample {i} has no label"))),
        })
        .collect()
}

/// Nearest class id by maximum similarity of the pooled vector to any vector
/// in each class set.
pub fn retrieve_class(pooled: &Array1<f64>, class_sets: &[Vec<Array1<f64>>]) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (c, set) in class_sets.iter().enumerate() {
        for v in set {
            let sim = pooled.dot(v);
            if sim > best.1 {
                best = (c, sim);
            }
        }
    }
    best.0
}

/// Encode every sequence with the current parameters (no gradients kept).
pub fn encode_pooled_all(
    encoder: &SkeletonEncoder,
    store: &ParamStore,
    dataset: &[SkeletonSequence],
) -> Result<Array2<f64>> {
    let d_t = encoder.config().projection_dim;
    let mut out = Array2::<f64>::zeros((dataset.len(), d_t));
    for (i, seq) in dataset.iter().enumerate() {
        let mut tape = Tape::new();
        let mut binding = Binding::new(store);
        let mut fwd = Fwd::new(&mut tape, &mut binding, store);
        let enc = encoder.encode(&mut fwd, seq)?;
        let pooled = tape.value(enc.pooled);
        for j in 0..d_t {
            out[[i, j]] = pooled[[0, j]];
        }
    }
    Ok(out)
}

fn retrieval_top1(
    encoder: &SkeletonEncoder,
    store: &ParamStore,
    dataset: &[SkeletonSequence],
    labels: &[usize],
    class_sets: &[Vec<Array1<f64>>],
) -> Result<f64> {
    let pooled = encode_pooled_all(encoder, store, dataset)?;
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = pooled.row(i).to_owned();
        if retrieve_class(&row, class_sets) == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// SGD pretraining with the multi-positive contrastive objective. Batches of
/// size below 2 at the tail of an epoch are dropped. Returns per-epoch
/// metrics; parameters are updated in place.
pub fn pretrain(
    dataset: &[SkeletonSequence],
    class_sets: &[Vec<Array1<f64>>],
    encoder: &SkeletonEncoder,
    store: &mut ParamStore,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(SugarError::Dataset("empty dataset".into()));
    }
    let labels = check_labels(dataset, class_sets.len())?;
    let mut optimizer = Sgd::new(cfg.lr, cfg.momentum, store);
    let decay_epochs = cfg.decay_epochs();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if epoch > 0 && decay_epochs.contains(&epoch) {
            optimizer.set_lr(optimizer.lr() * cfg.lr_decay_factor);
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let mut binding = Binding::new(store);
            let mut fwd = Fwd::new(&mut tape, &mut binding, store);
            let mut rows = Vec::with_capacity(chunk.len());
            let mut batch_sets = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let enc = encoder.encode(&mut fwd, &dataset[idx])?;
                rows.push(enc.pooled);
                batch_sets.push(class_sets[labels[idx]].clone());
            }
            let pooled = tape.concat(0, &rows)?;
            let loss = mil_nce_loss_var(&mut tape, pooled, &batch_sets, cfg.temperature)?;
            epoch_loss += tape.scalar_value(loss);
            batches += 1;
            let grads = tape.backward(loss)?;
            let mut accum = GradAccum::new(store);
            accum.absorb(&binding, &grads);
            accum.clip_global_norm(MAX_GRAD_NORM);
            optimizer.step(store, &accum);
        }

        metrics.push(EpochMetrics {
            epoch,
            loss: if batches > 0 {
                epoch_loss / batches as f64
            } else {
                f64::NAN
            },
            retrieval_top1: retrieval_top1(encoder, store, dataset, &labels, class_sets)?,
            lr: optimizer.lr(),
        });
    }
    Ok(metrics)
}

/// Cross-entropy pretraining with a linear classification head on the pooled
/// vector, for the no-knowledge baseline. The head lives under `probe.` and
/// is not part of any encoder checkpoint.
pub fn pretrain_supervised(
    dataset: &[SkeletonSequence],
    num_classes: usize,
    encoder: &SkeletonEncoder,
    store: &mut ParamStore,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(SugarError::Dataset("empty dataset".into()));
    }
    let labels = check_labels(dataset, num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let head = Linear::new(
        store,
        "probe.head",
        encoder.config().projection_dim,
        num_classes,
        &mut rng,
    );
    let mut optimizer = Sgd::new(cfg.lr, cfg.momentum, store);
    let decay_epochs = cfg.decay_epochs();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if epoch > 0 && decay_epochs.contains(&epoch) {
            optimizer.set_lr(optimizer.lr() * cfg.lr_decay_factor);
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let mut binding = Binding::new(store);
            let mut fwd = Fwd::new(&mut tape, &mut binding, store);
            let mut rows = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let enc = encoder.encode(&mut fwd, &dataset[idx])?;
                rows.push(enc.pooled);
                targets.push(labels[idx]);
            }
            let pooled = fwd.tape.concat(0, &rows)?;
            let logits = head.forward(&mut fwd, pooled)?;
            // Cosine-classifier scaling: pooled vectors are unit-norm, so
            // raw logits live in a +-1 band and need the same sharpening
            // the contrastive objective gets from its temperature.
            let logits = fwd.tape.scalar_mul(logits, 1.0 / cfg.temperature);
            let loss = fwd.tape.cross_entropy(logits, &targets)?;
            epoch_loss += fwd.tape.scalar_value(loss);
            batches += 1;
            let grads = tape.backward(loss)?;
            let mut accum = GradAccum::new(store);
            accum.absorb(&binding, &grads);
            accum.clip_global_norm(MAX_GRAD_NORM);
            optimizer.step(store, &accum);
        }

        // Head accuracy on the train set stands in for retrieval.
        let pooled = encode_pooled_all(encoder, store, dataset)?;
        let w = store.value(head.w);
        let b = store.value(head.b);
        let mut hits = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..num_classes {
                let mut score = b[[c]];
                for j in 0..pooled.ncols() {
                    score += pooled[[i, j]] * w[[j, c]];
                }
                if score > best.1 {
                    best = (c, score);
                }
            }
            if best.0 == label {
                hits += 1;
            }
        }
        metrics.push(EpochMetrics {
            epoch,
            loss: if batches > 0 {
                epoch_loss / batches as f64
            } else {
                f64::NAN
            },
            retrieval_top1: hits as f64 / labels.len().max(1) as f64,
            lr: optimizer.lr(),
        });
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, EncoderConfig};
    use crate::skeleton::SkeletonGraph;
    use rand::Rng;
    use sugar_autodiff::check_gradients;

    fn unit1(v: Vec<f64>) -> Array1<f64> {
        let a = Array1::from_vec(v);
        let n = a.dot(&a).sqrt();
        a / n
    }

    fn random_batch(b: usize, d: usize, seed: u64) -> ContrastiveBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Array2::<f64>::zeros((b, d));
        for mut row in features.rows_mut() {
            let v = unit1((0..d).map(|_| rng.random::<f64>() - 0.5).collect());
            row.assign(&v);
        }
        let text_sets = (0..b)
            .map(|_| {
                let n = 2 + (rng.random::<f64>() * 2.0) as usize;
                (0..n)
                    .map(|_| unit1((0..d).map(|_| rng.random::<f64>() - 0.5).collect()))
                    .collect()
            })
            .collect();
        ContrastiveBatch {
            skeleton_features: features,
            text_sets,
        }
    }

    /// Direct, unstabilized double-loop evaluation.
    fn brute_force_loss(batch: &ContrastiveBatch, tau: f64) -> f64 {
        let b = batch.text_sets.len();
        let mut total = 0.0;
        for i in 0..b {
            let s = batch.skeleton_features.row(i);
            let mut numerator = 0.0;
            for v in &batch.text_sets[i] {
                numerator += (s.dot(v) / tau).exp();
            }
            let mut denominator = 0.0;
            for set in &batch.text_sets {
                for v in set {
                    denominator += (s.dot(v) / tau).exp();
                }
            }
            total += -(numerator / denominator).ln();
        }
        total / b as f64
    }

    #[test]
    fn degenerate_batch_has_zero_loss() {
        let batch = ContrastiveBatch {
            skeleton_features: Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap(),
            text_sets: vec![vec![unit1(vec![0.3, 0.7])]],
        };
        assert_eq!(mil_nce_loss(&batch, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn two_sample_identity_case() {
        // s_1.t_1 = 1, s_1.t_2 = 0 and symmetric: loss = log(1 + e^{-1}).
        let batch = ContrastiveBatch {
            skeleton_features: Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            text_sets: vec![vec![unit1(vec![1.0, 0.0])], vec![unit1(vec![0.0, 1.0])]],
        };
        let loss = mil_nce_loss(&batch, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    }

    #[test]
    fn matches_brute_force_reference() {
        for seed in 0..20 {
            let batch = random_batch(4, 8, seed);
            let got = mil_nce_loss(&batch, 0.2).unwrap();
            let expected = brute_force_loss(&batch, 0.2);
            assert!(
                (got - expected).abs() < 1e-10,
                "seed {seed}: {got} vs {expected}"
            );
            assert!(got >= 0.0 && got.is_finite());
        }
    }

    #[test]
    fn invalid_temperature_and_empty_positives_rejected() {
        let batch = random_batch(3, 4, 1);
        assert!(matches!(
            mil_nce_loss(&batch, 0.0),
            Err(SugarError::InvalidConfig(_))
        ));
        let mut bad = batch.clone();
        bad.text_sets[1].clear();
        assert!(matches!(
            mil_nce_loss(&bad, 1.0),
            Err(SugarError::Batch(_))
        ));
    }

    #[test]
    fn loss_invariant_under_batch_and_set_permutation() {
        let batch = random_batch(5, 6, 3);
        let base = mil_nce_loss(&batch, 0.3).unwrap();

        // Reverse batch order.
        let reversed = ContrastiveBatch {
            skeleton_features: {
                let mut f = batch.skeleton_features.clone();
                for (i, row) in batch.skeleton_features.rows().into_iter().rev().enumerate() {
                    f.row_mut(i).assign(&row);
                }
                f
            },
            text_sets: batch.text_sets.iter().rev().cloned().collect(),
        };
        assert!((mil_nce_loss(&reversed, 0.3).unwrap() - base).abs() < 1e-12);

        // Permute vectors inside a set.
        let mut shuffled = batch.clone();
        shuffled.text_sets[0].reverse();
        assert!((mil_nce_loss(&shuffled, 0.3).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_when_a_positive_similarity_increases() {
        let batch = random_batch(4, 6, 9);
        let base = mil_nce_loss(&batch, 0.3).unwrap();
        // Move s_0 toward its first positive.
        let mut closer = batch.clone();
        let target = closer.text_sets[0][0].clone();
        let mut s0 = closer.skeleton_features.row(0).to_owned();
        s0 = &s0 + &(0.2 * &target);
        let n = s0.dot(&s0).sqrt();
        closer.skeleton_features.row_mut(0).assign(&(&s0 / n));
        let moved = mil_nce_loss(&closer, 0.3).unwrap();
        assert!(moved < base, "{moved} !< {base}");
    }

    #[test]
    fn gradient_wrt_features_matches_finite_differences() {
        let batch = random_batch(4, 6, 5);
        let mut store = ParamStore::new();
        let id = store.add("s", batch.skeleton_features.clone().into_dyn());
        let sets = batch.text_sets.clone();
        let report = check_gradients(
            &mut store,
            &[id],
            1e-6,
            move |store, tape, binding| -> Result<Var> {
                let s = binding.var(tape, store, id);
                mil_nce_loss_var(tape, s, &sets, 0.2)
            },
        )
        .unwrap();
        report.assert_below(1e-6);
    }

    fn tiny_setup() -> (
        SkeletonGraph,
        Vec<SkeletonSequence>,
        Vec<Vec<Array1<f64>>>,
        EncoderConfig,
    ) {
        let graph = SkeletonGraph::toy();
        let specs = crate::toy_action_specs();
        let dataset =
            crate::skeleton::generate_synthetic_dataset(&specs, 4, 16, &graph, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let class_sets: Vec<Vec<Array1<f64>>> = (0..6)
            .map(|_| {
                (0..3)
                    .map(|_| unit1((0..16).map(|_| rng.random::<f64>() - 0.5).collect()))
                    .collect()
            })
            .collect();
        let config = EncoderConfig {
            num_blocks: 2,
            feature_dims: vec![8, 12],
            temporal_kernel_sizes: vec![3],
            activation: Activation::Relu,
            representation_dim: 12,
            projection_dim: 16,
            seed: 2,
        };
        (graph, dataset, class_sets, config)
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let (graph, dataset, class_sets, config) = tiny_setup();
        let mut store = ParamStore::new();
        let encoder = SkeletonEncoder::new(&mut store, &graph, config).unwrap();
        let before: Vec<_> = store
            .ids()
            .map(|id| store.value(id).clone())
            .collect();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::toy()
        };
        pretrain(&dataset, &class_sets, &encoder, &mut store, &cfg).unwrap();
        for (id, old) in store.ids().zip(before.iter()) {
            assert_eq!(store.value(id), old);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (graph, dataset, class_sets, config) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            ..TrainConfig::toy()
        };
        let run = || {
            let mut store = ParamStore::new();
            let encoder = SkeletonEncoder::new(&mut store, &graph, config.clone()).unwrap();
            let metrics =
                pretrain(&dataset, &class_sets, &encoder, &mut store, &cfg).unwrap();
            let snapshot: Vec<_> = store.ids().map(|id| store.value(id).clone()).collect();
            (metrics, snapshot)
        };
        let (metrics_a, params_a) = run();
        let (metrics_b, params_b) = run();
        assert!(metrics_a.last().unwrap().loss < metrics_a.first().unwrap().loss);
        assert_eq!(params_a, params_b);
        let json_a = serde_json::to_string(&metrics_a).unwrap();
        let json_b = serde_json::to_string(&metrics_b).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn missing_label_fails_before_training() {
        let (graph, mut dataset, class_sets, config) = tiny_setup();
        // Out-of-range label.
        let frames = dataset[0].frames().clone();
        dataset[0] = SkeletonSequence::new(frames, Some(99), None).unwrap();
        let mut store = ParamStore::new();
        let encoder = SkeletonEncoder::new(&mut store, &graph, config).unwrap();
        let snapshot: Vec<_> = store.ids().map(|id| store.value(id).clone()).collect();
        let err = pretrain(
            &dataset,
            &class_sets,
            &encoder,
            &mut store,
            &TrainConfig::toy(),
        );
        assert!(matches!(err, Err(SugarError::Dataset(_))));
        for (id, old) in store.ids().zip(snapshot.iter()) {
            assert_eq!(store.value(id), old, "training must not have started");
        }
    }

    #[test]
    fn lr_decays_at_sixty_and_eighty_percent() {
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::toy()
        };
        assert_eq!(cfg.decay_epochs(), [6, 8]);
        let (graph, dataset, class_sets, config) = tiny_setup();
        let mut store = ParamStore::new();
        let encoder = SkeletonEncoder::new(&mut store, &graph, config).unwrap();
        let small = TrainConfig {
            epochs: 10,
            batch_size: 12,
            ..TrainConfig::toy()
        };
        let metrics = pretrain(&dataset, &class_sets, &encoder, &mut store, &small).unwrap();
        assert!((metrics[5].lr - 0.01).abs() < 1e-12);
        assert!((metrics[6].lr - 0.001).abs() < 1e-12);
        assert!((metrics[8].lr - 0.0001).abs() < 1e-12);
    }
}
