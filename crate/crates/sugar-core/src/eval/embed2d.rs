use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SugarError};

/// Mean silhouette coefficient over all samples (Euclidean distances).
/// Samples in singleton clusters score 0.
pub fn silhouette_score(x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let per_sample = silhouette_samples(x, labels)?;
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

/// Mean silhouette per class id (0..num_classes); classes without samples
/// score NaN-free 0.
pub fn per_class_silhouette(
    x: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>> {
    let per_sample = silhouette_samples(x, labels)?;
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&label, &s) in labels.iter().zip(per_sample.iter()) {
        if label < num_classes {
            sums[label] += s;
            counts[label] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(counts.iter())
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

fn silhouette_samples(x: &Array2<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n != labels.len() {
        return Err(SugarError::Dimension(format!(
            "{n} samples vs {} labels",
            labels.len()
        )));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(SugarError::InvalidConfig(
            "silhouette needs at least two classes".into(),
        ));
    }
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let own = labels[i];
        let own_count = labels.iter().filter(|&&l| l == own).count();
        if own_count <= 1 {
            out.push(0.0);
            continue;
        }
        let a: f64 = labels
            .iter()
            .enumerate()
            .filter(|(j, &l)| l == own && *j != i)
            .map(|(j, _)| dist[[i, j]])
            .sum::<f64>()
            / (own_count - 1) as f64;
        let mut b = f64::INFINITY;
        for &other in &classes {
            if other == own {
                continue;
            }
            let count = labels.iter().filter(|&&l| l == other).count();
            if count == 0 {
                continue;
            }
            let mean: f64 = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == other)
                .map(|(j, _)| dist[[i, j]])
                .sum::<f64>()
                / count as f64;
            b = b.min(mean);
        }
        out.push(if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 15.0,
            iterations: 400,
            learning_rate: 100.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 100,
            seed: 3,
        }
    }
}

/// Exact (O(n^2)) t-SNE to two dimensions with a fixed seed.
pub fn tsne_2d(x: &Array2<f64>, cfg: &TsneConfig) -> Result<Array2<f64>> {
    let n = x.nrows();
    if (n as f64) < cfg.perplexity + 1.0 {
        return Err(SugarError::InvalidConfig(format!(
            "{n} samples is fewer than perplexity {} + 1",
            cfg.perplexity
        )));
    }
    // Squared pairwise distances.
    let mut d2 = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[[i, j]] = d;
            d2[[j, i]] = d;
        }
    }
    // Per-row precision via binary search to match log(perplexity) entropy.
    let target_entropy = cfg.perplexity.ln();
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let mut beta = 1.0;
        let (mut beta_min, mut beta_max) = (f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..50 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-beta * d2[[i, j]]).exp();
                sum += w;
                weighted += w * d2[[i, j]];
            }
            let entropy = if sum > 0.0 {
                beta * weighted / sum + sum.ln()
            } else {
                0.0
            };
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_infinite() {
                    beta * 2.0
                } else {
                    (beta + beta_max) / 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_infinite() {
                    beta / 2.0
                } else {
                    (beta + beta_min) / 2.0
                };
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                p[[i, j]] = (-beta * d2[[i, j]]).exp();
                sum += p[[i, j]];
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                p[[i, j]] /= sum;
            }
        }
    }
    // Symmetrize.
    let mut pij = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            pij[[i, j]] = ((p[[i, j]] + p[[j, i]]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y = Array2::<f64>::from_shape_fn((n, 2), |_| {
        use rand::Rng;
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        1e-4 * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    });
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::from_elem((n, 2), 1.0);

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };

        // Student-t affinities.
        let mut q_num = Array2::<f64>::zeros((n, n));
        let mut q_sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d: f64 = (y[[i, 0]] - y[[j, 0]]).powi(2) + (y[[i, 1]] - y[[j, 1]]).powi(2);
                let w = 1.0 / (1.0 + d);
                q_num[[i, j]] = w;
                q_num[[j, i]] = w;
                q_sum += 2.0 * w;
            }
        }
        let q_sum = q_sum.max(1e-12);

        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (q_num[[i, j]] / q_sum).max(1e-12);
                let mult = (exaggeration * pij[[i, j]] - q) * q_num[[i, j]];
                for k in 0..2 {
                    grad[[i, k]] += 4.0 * mult * (y[[i, k]] - y[[j, k]]);
                }
            }
        }
        for i in 0..n {
            for k in 0..2 {
                let same_sign = grad[[i, k]].signum() == velocity[[i, k]].signum();
                gains[[i, k]] = if same_sign {
                    (gains[[i, k]] * 0.8).max(0.01)
                } else {
                    gains[[i, k]] + 0.2
                };
                velocity[[i, k]] =
                    momentum * velocity[[i, k]] - cfg.learning_rate * gains[[i, k]] * grad[[i, k]];
                y[[i, k]] += velocity[[i, k]];
            }
        }
        // Center.
        for k in 0..2 {
            let mean = y.column(k).sum() / n as f64;
            for i in 0..n {
                y[[i, k]] -= mean;
            }
        }
    }
    Ok(y)
}

/// Write 2D coordinates per sample as CSV with silhouette scores (computed
/// on the input representations) in comment headers.
pub fn export_embeddings_2d<P: AsRef<std::path::Path>>(
    representations: &Array2<f64>,
    labels: &[usize],
    class_names: &[String],
    path: P,
    cfg: &TsneConfig,
) -> Result<String> {
    let overall = silhouette_score(representations, labels)?;
    let per_class = per_class_silhouette(representations, labels, class_names.len())?;
    let coords = tsne_2d(representations, cfg)?;
    let mut out = String::new();
    out.push_str(&format!("# silhouette_overall={overall}\n"));
    let per: Vec<String> = class_names
        .iter()
        .zip(per_class.iter())
        .map(|(n, s)| format!("{n}:{s}"))
        .collect();
    out.push_str(&format!("# silhouette_per_class={}\n", per.join(",")));
    out.push_str("x,y,label\n");
    for (i, &label) in labels.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            coords[[i, 0]],
            coords[[i, 1]],
            class_names[label]
        ));
    }
    std::fs::write(path, &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn two_blobs(n_per: usize, gap: f64) -> (Array2<f64>, Vec<usize>) {
        let mut x = Array2::<f64>::zeros((2 * n_per, 3));
        let mut labels = Vec::new();
        for i in 0..n_per {
            x[[i, 0]] = i as f64 * 0.01;
            labels.push(0);
        }
        for i in 0..n_per {
            x[[n_per + i, 0]] = gap + i as f64 * 0.01;
            labels.push(1);
        }
        (x, labels)
    }

    #[test]
    fn separated_blobs_have_high_silhouette() {
        let (x, labels) = two_blobs(10, 10.0);
        let s = silhouette_score(&x, &labels).unwrap();
        assert!(s > 0.9, "silhouette {s}");
        let per = per_class_silhouette(&x, &labels, 2).unwrap();
        assert!(per.iter().all(|&v| v > 0.9));
    }

    #[test]
    fn interleaved_points_have_low_silhouette() {
        let (x, mut labels) = two_blobs(10, 0.005);
        // Shuffle label assignment so clusters are meaningless.
        for i in 0..labels.len() {
            labels[i] = i % 2;
        }
        let s = silhouette_score(&x, &labels).unwrap();
        assert!(s < 0.5, "silhouette {s}");
    }

    #[test]
    fn single_class_is_config_error() {
        let x = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(
            silhouette_score(&x, &[0, 0]),
            Err(SugarError::InvalidConfig(_))
        ));
    }

    #[test]
    fn tsne_requires_enough_samples_for_perplexity() {
        let x = Array2::<f64>::zeros((5, 3));
        let cfg = TsneConfig {
            perplexity: 10.0,
            ..TsneConfig::default()
        };
        assert!(matches!(
            tsne_2d(&x, &cfg),
            Err(SugarError::InvalidConfig(_))
        ));
    }

    #[test]
    fn tsne_separates_two_blobs_deterministically() {
        let (x, labels) = two_blobs(12, 25.0);
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 250,
            ..TsneConfig::default()
        };
        let a = tsne_2d(&x, &cfg).unwrap();
        let b = tsne_2d(&x, &cfg).unwrap();
        assert_eq!(a, b, "same seed must give identical embeddings");
        // 2D silhouette should reflect the separation.
        let s = silhouette_score(&a, &labels).unwrap();
        assert!(s > 0.5, "2d silhouette {s}");
    }

    #[test]
    fn export_writes_headers_and_rows() {
        let (x, labels) = two_blobs(10, 10.0);
        let names = vec!["left".to_string(), "right".to_string()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.csv");
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 100,
            ..TsneConfig::default()
        };
        let content = export_embeddings_2d(&x, &labels, &names, &path, &cfg).unwrap();
        assert!(content.starts_with("# silhouette_overall="));
        assert!(content.contains("# silhouette_per_class=left:"));
        let rows = content.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows - 1, 20, "one data row per sample plus the column header");
        // Identical run writes identical bytes.
        let path2 = dir.path().join("embed2.csv");
        let content2 = export_embeddings_2d(&x, &labels, &names, &path2, &cfg).unwrap();
        assert_eq!(content, content2);
    }
}
