//! Graph-convolutional skeleton encoder: stacked blocks of spatial
//! aggregation over the joint graph followed by multi-scale depthwise
//! temporal convolution, with no pooling along time. A projection head maps
//! the pooled representation into the text-embedding space.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sugar_autodiff::{ParamId, ParamStore, Var};

use crate::error::{Result, SugarError};
use crate::nn::{kaiming_uniform, Fwd, Linear};
use crate::skeleton::{SkeletonGraph, SkeletonSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub feature_dims: Vec<usize>,
    pub temporal_kernel_sizes: Vec<usize>,
    pub activation: Activation,
    /// d: per-time-step representation width; equals the last feature dim.
    pub representation_dim: usize,
    /// d_t: text-embedding width targeted by the projection head.
    pub projection_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            num_blocks: 3,
            feature_dims: vec![16, 32, 64],
            temporal_kernel_sizes: vec![3, 5],
            activation: Activation::Relu,
            representation_dim: 64,
            projection_dim: 256,
            seed: 23,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.feature_dims.len() != self.num_blocks {
            return Err(SugarError::InvalidConfig(format!(
                "num_blocks {} vs {} feature dims",
                self.num_blocks,
                self.feature_dims.len()
            )));
        }
        if self.feature_dims.iter().any(|&f| f == 0)
            || self.representation_dim == 0
            || self.projection_dim == 0
        {
            return Err(SugarError::InvalidConfig("zero dimension".into()));
        }
        if self.temporal_kernel_sizes.is_empty()
            || self.temporal_kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0)
        {
            return Err(SugarError::InvalidConfig(format!(
                "temporal kernel sizes must be odd and >= 1, got {:?}",
                self.temporal_kernel_sizes
            )));
        }
        if *self.feature_dims.last().unwrap() != self.representation_dim {
            return Err(SugarError::InvalidConfig(format!(
                "representation_dim {} must equal the last feature dim {}",
                self.representation_dim,
                self.feature_dims.last().unwrap()
            )));
        }
        Ok(())
    }

    pub fn max_kernel(&self) -> usize {
        *self.temporal_kernel_sizes.iter().max().unwrap()
    }
}

/// One GCN block's parameters.
#[derive(Clone)]
struct Block {
    weight: ParamId,
    spatial_bias: ParamId,
    kernels: Vec<ParamId>,
    temporal_bias: ParamId,
}

/// Encoder output: the full-temporal-length values and the pooled unit
/// vector used for contrastive training.
pub struct EncodeOutput {
    /// [T, d]
    pub values: Var,
    /// [1, d_t], L2-normalized
    pub pooled: Var,
}

#[derive(Clone)]
pub struct SkeletonEncoder {
    config: EncoderConfig,
    graph: SkeletonGraph,
    normalized_adjacency: Array2<f64>,
    blocks: Vec<Block>,
    projection: Linear,
    param_ids: Vec<ParamId>,
}

pub const PARAM_PREFIX: &str = "encoder.";

impl SkeletonEncoder {
    pub fn new(store: &mut ParamStore, graph: &SkeletonGraph, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let before = store.len();
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut in_dim = 3usize;
        for (i, &out_dim) in config.feature_dims.iter().enumerate() {
            let weight = store.add(
                &format!("{PARAM_PREFIX}block{i}.w"),
                kaiming_uniform(&mut rng, in_dim, &[in_dim, out_dim]),
            );
            let spatial_bias = store.add(
                &format!("{PARAM_PREFIX}block{i}.spatial_bias"),
                ArrayD::zeros(IxDyn(&[out_dim])),
            );
            let kernels = config
                .temporal_kernel_sizes
                .iter()
                .enumerate()
                .map(|(j, &k)| {
                    store.add(
                        &format!("{PARAM_PREFIX}block{i}.kernel{j}"),
                        kaiming_uniform(&mut rng, k, &[out_dim, k]),
                    )
                })
                .collect();
            let temporal_bias = store.add(
                &format!("{PARAM_PREFIX}block{i}.temporal_bias"),
                ArrayD::zeros(IxDyn(&[out_dim])),
            );
            blocks.push(Block {
                weight,
                spatial_bias,
                kernels,
                temporal_bias,
            });
            in_dim = out_dim;
        }
        let projection = Linear::new(
            store,
            &format!("{PARAM_PREFIX}proj"),
            config.representation_dim,
            config.projection_dim,
            &mut rng,
        );
        let param_ids = (before..store.len()).map(ParamId).collect();
        Ok(Self {
            config,
            graph: graph.clone(),
            normalized_adjacency: graph.normalized_adjacency(),
            blocks,
            projection,
            param_ids,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// Root-center the sequence and run all blocks. The temporal length of
    /// `values` always equals the input length.
    pub fn encode(&self, fwd: &mut Fwd, seq: &SkeletonSequence) -> Result<EncodeOutput> {
        if seq.num_joints() != self.graph.num_joints() {
            return Err(SugarError::Dimension(format!(
                "sequence has {} joints, graph has {}",
                seq.num_joints(),
                self.graph.num_joints()
            )));
        }
        let t_len = seq.num_frames();
        if t_len < self.config.max_kernel() {
            return Err(SugarError::InvalidConfig(format!(
                "sequence length {t_len} shorter than largest temporal kernel {}",
                self.config.max_kernel()
            )));
        }
        let v_len = seq.num_joints();
        let input = fwd
            .tape
            .constant(motion_input(seq).into_dyn());

        let mut x = input;
        let mut feat = seq.num_channels();
        for block in &self.blocks {
            x = self.spatial_step(fwd, block, x, t_len, v_len, feat)?;
            feat = fwd.tape.value(x).shape()[2];
            x = self.temporal_step(fwd, block, x)?;
        }

        let values = fwd.tape.mean_axis(x, 1)?; // [T, d]
        let pooled_pre = fwd.tape.mean_axis(values, 0)?; // [d]
        let pooled_row = fwd.tape.reshape(pooled_pre, &[1, self.config.representation_dim])?;
        let projected = self.projection.forward(fwd, pooled_row)?;
        let pooled = fwd.tape.l2_normalize_rows(projected, 1e-8)?;
        Ok(EncodeOutput { values, pooled })
    }

    /// sigma(A_hat X W + b) applied frame-wise via reshapes.
    fn spatial_step(
        &self,
        fwd: &mut Fwd,
        block: &Block,
        x: Var,
        t_len: usize,
        v_len: usize,
        feat: usize,
    ) -> Result<Var> {
        let ahat = fwd
            .tape
            .constant(self.normalized_adjacency.clone().into_dyn());
        let xp = fwd.tape.permute(x, &[1, 0, 2])?; // [V, T, F]
        let xr = fwd.tape.reshape(xp, &[v_len, t_len * feat])?;
        let mixed = fwd.tape.matmul(ahat, xr)?;
        let mixed = fwd.tape.reshape(mixed, &[v_len, t_len, feat])?;
        let mixed = fwd.tape.permute(mixed, &[1, 0, 2])?; // [T, V, F]

        let out_dim = fwd.store.value(block.weight).shape()[1];
        let flat = fwd.tape.reshape(mixed, &[t_len * v_len, feat])?;
        let w = fwd.param(block.weight);
        let mapped = fwd.tape.matmul(flat, w)?;
        let bias = fwd.param(block.spatial_bias);
        let mapped = fwd.tape.add_bias(mapped, bias)?;
        let mapped = fwd.tape.reshape(mapped, &[t_len, v_len, out_dim])?;
        Ok(fwd.tape.relu(mapped))
    }

    /// Parallel depthwise temporal branches summed, bias, activation.
    fn temporal_step(&self, fwd: &mut Fwd, block: &Block, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &kernel in &block.kernels {
            let k = fwd.param(kernel);
            let branch = fwd.tape.depthwise_conv1d(x, k)?;
            acc = Some(match acc {
                Some(sum) => fwd.tape.add(sum, branch)?,
                None => branch,
            });
        }
        let summed = acc.expect("at least one kernel");
        let bias = fwd.param(block.temporal_bias);
        let summed = fwd.tape.add_bias(summed, bias)?;
        Ok(fwd.tape.relu(summed))
    }
}

/// Encoder input preprocessing: root-center the sequence, then remove each
/// joint/channel's temporal mean so features are driven by motion rather
/// than the static pose, which otherwise dominates every activation.
pub fn motion_input(seq: &SkeletonSequence) -> Array3<f64> {
    let centered = seq.root_centered(crate::skeleton::TOY_ROOT_JOINT);
    let mut frames = centered.frames().clone();
    let means = frames.mean_axis(ndarray::Axis(0)).unwrap();
    for mut frame in frames.outer_iter_mut() {
        frame -= &means;
    }
    frames
}

/// Single spatial aggregation step on plain arrays: relu(A_hat H W).
/// Reference route for the tape implementation and the public per-frame op.
pub fn gcn_block_forward(
    h: &Array2<f64>,
    graph: &SkeletonGraph,
    w: &Array2<f64>,
) -> Result<Array2<f64>> {
    if h.nrows() != graph.num_joints() {
        return Err(SugarError::Dimension(format!(
            "H has {} rows, graph has {} joints",
            h.nrows(),
            graph.num_joints()
        )));
    }
    if h.ncols() != w.nrows() {
        return Err(SugarError::Dimension(format!(
            "H width {} vs W height {}",
            h.ncols(),
            w.nrows()
        )));
    }
    let ahat = graph.normalized_adjacency();
    Ok(ahat.dot(h).dot(w).mapv(|x| x.max(0.0)))
}

/// Multi-scale depthwise temporal step on plain arrays: the sum over
/// same-padded branches, plus bias, then ReLU. Reference route for the tape
/// implementation.
pub fn temporal_multiscale_forward(
    x: &Array3<f64>,
    kernels: &[Array2<f64>],
    bias: &[f64],
) -> Result<Array3<f64>> {
    let (t_len, v_len, f_len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if kernels.is_empty() {
        return Err(SugarError::InvalidConfig("no temporal kernels".into()));
    }
    for k in kernels {
        if k.nrows() != f_len {
            return Err(SugarError::Dimension(format!(
                "kernel has {} channels, input has {f_len}",
                k.nrows()
            )));
        }
        if k.ncols() % 2 == 0 {
            return Err(SugarError::InvalidConfig("even kernel width".into()));
        }
        if t_len < k.ncols() {
            return Err(SugarError::InvalidConfig(format!(
                "input length {t_len} shorter than kernel {}",
                k.ncols()
            )));
        }
    }
    if bias.len() != f_len {
        return Err(SugarError::Dimension("bias width mismatch".into()));
    }
    let mut out = Array3::<f64>::zeros((t_len, v_len, f_len));
    for kernel in kernels {
        let width = kernel.ncols();
        let half = width / 2;
        for t in 0..t_len {
            for j in 0..width {
                let src = t as isize + j as isize - half as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                for v in 0..v_len {
                    for f in 0..f_len {
                        out[[t, v, f]] += kernel[[f, j]] * x[[src as usize, v, f]];
                    }
                }
            }
        }
    }
    for v in out.indexed_iter_mut() {
        let ((_, _, f), value) = v;
        *value = (*value + bias[f]).max(0.0);
    }
    Ok(out)
}

const CHECKPOINT_KIND: &str = "skeleton-encoder";

pub fn save_encoder_checkpoint<P: AsRef<std::path::Path>>(
    path: P,
    encoder: &SkeletonEncoder,
    store: &ParamStore,
) -> Result<()> {
    let header = serde_json::json!({
        "kind": CHECKPOINT_KIND,
        "config": encoder.config(),
    });
    crate::archive::save_archive(path, &header, store, PARAM_PREFIX)
}

/// Rebuild an encoder from a checkpoint, registering its parameters into
/// `store` and overwriting them with the stored values.
pub fn load_encoder_checkpoint<P: AsRef<std::path::Path>>(
    path: P,
    store: &mut ParamStore,
    graph: &SkeletonGraph,
) -> Result<SkeletonEncoder> {
    let (header, entries) = crate::archive::load_archive(path)?;
    if header.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
        return Err(SugarError::Format {
            offset: 0,
            msg: "not a skeleton encoder checkpoint".into(),
        });
    }
    let config: EncoderConfig = serde_json::from_value(
        header
            .get("config")
            .cloned()
            .ok_or_else(|| SugarError::Format {
                offset: 0,
                msg: "checkpoint header has no config".into(),
            })?,
    )?;
    let encoder = SkeletonEncoder::new(store, graph, config)?;
    crate::archive::apply_entries(store, &entries)?;
    Ok(encoder)
}
