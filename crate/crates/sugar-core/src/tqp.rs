//! Temporal query projection: the full-length skeleton representation is
//! cut into segments and distilled into a fixed number of action tokens by a
//! chain of weight-shared query transformers, where each step's output
//! queries the next segment. Baseline bridges (single query transformer,
//! single cross-attention block, per-step linear map) share the same output
//! contract for the ablations.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sugar_autodiff::{Binding, ParamId, ParamStore, Tape, Var};

use crate::error::{Result, SugarError};
use crate::nn::{normal_init, residual_norm, Ffn, Fwd, LayerNormParams, Linear, Mha};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TqpConfig {
    /// Frames per temporal segment.
    pub segment_length: usize,
    /// Number of query vectors, and so the emitted token count.
    pub query_length: usize,
    /// Width of queries and segments.
    pub model_dim: usize,
    pub qformer_layers: usize,
    pub heads: usize,
    /// Recognizer embedding width targeted by the final linear map.
    pub lm_dim: usize,
    pub seed: u64,
}

impl TqpConfig {
    pub fn toy() -> Self {
        Self {
            segment_length: 16,
            query_length: 16,
            model_dim: 64,
            qformer_layers: 2,
            heads: 4,
            lm_dim: 64,
            seed: 31,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_length == 0 || self.query_length == 0 {
            return Err(SugarError::InvalidConfig(
                "segment_length and query_length must be >= 1".into(),
            ));
        }
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(SugarError::InvalidConfig(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.qformer_layers == 0 || self.lm_dim == 0 {
            return Err(SugarError::InvalidConfig("zero-sized module".into()));
        }
        Ok(())
    }
}

/// Fixed-length token embeddings consumed by the recognizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTokens {
    pub tokens: Array2<f64>,
}

/// Split [T, d] values into ceil(T / segment_length) segments in order,
/// zero-padding the final segment to exactly segment_length frames.
pub fn segment(values: &Array2<f64>, segment_length: usize) -> Result<Vec<Array2<f64>>> {
    if segment_length == 0 {
        return Err(SugarError::InvalidConfig("segment_length 0".into()));
    }
    let t_len = values.nrows();
    if t_len == 0 {
        return Err(SugarError::Precondition("empty representation".into()));
    }
    let count = t_len.div_ceil(segment_length);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * segment_length;
        let end = ((i + 1) * segment_length).min(t_len);
        let mut seg = Array2::<f64>::zeros((segment_length, values.ncols()));
        seg.slice_mut(ndarray::s![..end - start, ..])
            .assign(&values.slice(ndarray::s![start..end, ..]));
        out.push(seg);
    }
    Ok(out)
}

struct QFormerLayer {
    self_attn: Mha,
    ln_self: LayerNormParams,
    cross_attn: Mha,
    ln_cross: LayerNormParams,
    ffn: Ffn,
    ln_ffn: LayerNormParams,
}

/// Stack of query-transformer layers: self-attention over the queries,
/// cross-attention into the segment, position-wise feed-forward, with
/// residual + layer norm around each sublayer.
pub struct QFormer {
    layers: Vec<QFormerLayer>,
}

impl QFormer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let p = format!("{name}.layer{i}");
            layers.push(QFormerLayer {
                self_attn: Mha::new(store, &format!("{p}.self_attn"), dim, heads, rng)?,
                ln_self: LayerNormParams::new(store, &format!("{p}.ln_self"), dim),
                cross_attn: Mha::new(store, &format!("{p}.cross_attn"), dim, heads, rng)?,
                ln_cross: LayerNormParams::new(store, &format!("{p}.ln_cross"), dim),
                ffn: Ffn::new(store, &format!("{p}.ffn"), dim, 2 * dim, rng),
                ln_ffn: LayerNormParams::new(store, &format!("{p}.ln_ffn"), dim),
            });
        }
        Ok(Self { layers })
    }

    /// One pass: queries [L, d] attend to a segment [S, d], output [L, d].
    pub fn step(&self, fwd: &mut Fwd, queries: Var, segment: Var) -> Result<Var> {
        let mut x = queries;
        for layer in &self.layers {
            let sa = layer.self_attn.forward(fwd, x, x, false, None)?;
            x = residual_norm(fwd, &layer.ln_self, x, sa)?;
            let ca = layer.cross_attn.forward(fwd, x, segment, false, None)?;
            x = residual_norm(fwd, &layer.ln_cross, x, ca)?;
            let ff = layer.ffn.forward(fwd, x)?;
            x = residual_norm(fwd, &layer.ln_ffn, x, ff)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeKind {
    Tqp,
    SingleQFormer,
    CrossAttn,
    Linear,
}

impl BridgeKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tqp" => Ok(Self::Tqp),
            "single_q_former" | "one_q_former" => Ok(Self::SingleQFormer),
            "x_attn" | "cross_attn" => Ok(Self::CrossAttn),
            "linear" => Ok(Self::Linear),
            other => Err(SugarError::InvalidConfig(format!(
                "unknown bridge kind {other:?}"
            ))),
        }
    }
}

pub const PARAM_PREFIX: &str = "bridge.";

/// A representation-to-tokens bridge.
pub struct Bridge {
    kind: BridgeKind,
    config: TqpConfig,
    query: Option<ParamId>,
    qformer: Option<QFormer>,
    xattn: Option<(Mha, LayerNormParams)>,
    out: Linear,
    param_ids: Vec<ParamId>,
}

impl Bridge {
    pub fn new(store: &mut ParamStore, kind: BridgeKind, config: TqpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let before = store.len();
        let d = config.model_dim;
        let mut query = None;
        let mut qformer = None;
        let mut xattn = None;
        match kind {
            BridgeKind::Tqp | BridgeKind::SingleQFormer => {
                query = Some(store.add(
                    &format!("{PARAM_PREFIX}query"),
                    normal_init(&mut rng, 0.02, &[config.query_length, d]),
                ));
                qformer = Some(QFormer::new(
                    store,
                    &format!("{PARAM_PREFIX}qformer"),
                    d,
                    config.heads,
                    config.qformer_layers,
                    &mut rng,
                )?);
            }
            BridgeKind::CrossAttn => {
                query = Some(store.add(
                    &format!("{PARAM_PREFIX}query"),
                    normal_init(&mut rng, 0.02, &[config.query_length, d]),
                ));
                let mha = Mha::new(store, &format!("{PARAM_PREFIX}xattn"), d, config.heads, &mut rng)?;
                let ln = LayerNormParams::new(store, &format!("{PARAM_PREFIX}xattn_ln"), d);
                xattn = Some((mha, ln));
            }
            BridgeKind::Linear => {}
        }
        let out = Linear::new(
            store,
            &format!("{PARAM_PREFIX}out"),
            d,
            config.lm_dim,
            &mut rng,
        );
        let param_ids = (before..store.len()).map(ParamId).collect();
        Ok(Self {
            kind,
            config,
            query,
            qformer,
            xattn,
            out,
            param_ids,
        })
    }

    pub fn kind(&self) -> BridgeKind {
        self.kind
    }

    pub fn config(&self) -> &TqpConfig {
        &self.config
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    pub fn qformer(&self) -> Option<&QFormer> {
        self.qformer.as_ref()
    }

    /// Token count for an input of the given temporal length.
    pub fn token_count(&self, input_len: usize) -> usize {
        match self.kind {
            BridgeKind::Linear => input_len,
            _ => self.config.query_length,
        }
    }

    /// Project representation values [T, d] already on the tape.
    pub fn project_values(&self, fwd: &mut Fwd, values: Var) -> Result<Var> {
        let t_len = fwd.tape.value(values).shape()[0];
        let d = fwd.tape.value(values).shape()[1];
        if d != self.config.model_dim {
            return Err(SugarError::Dimension(format!(
                "representation dim {d} vs bridge model_dim {}",
                self.config.model_dim
            )));
        }
        if t_len == 0 {
            return Err(SugarError::Precondition("empty representation".into()));
        }
        let tokens = match self.kind {
            BridgeKind::Tqp => {
                let qformer = self.qformer.as_ref().unwrap();
                let mut x = fwd.param(self.query.unwrap());
                let seg_len = self.config.segment_length;
                let count = t_len.div_ceil(seg_len);
                for i in 0..count {
                    let start = i * seg_len;
                    let end = ((i + 1) * seg_len).min(t_len);
                    let mut seg = fwd.tape.slice(values, 0, start, end - start)?;
                    if end - start < seg_len {
                        let pad = fwd
                            .tape
                            .constant(ArrayD::zeros(IxDyn(&[seg_len - (end - start), d])));
                        seg = fwd.tape.concat(0, &[seg, pad])?;
                    }
                    x = qformer.step(fwd, x, seg)?;
                }
                x
            }
            BridgeKind::SingleQFormer => {
                let qformer = self.qformer.as_ref().unwrap();
                let q = fwd.param(self.query.unwrap());
                qformer.step(fwd, q, values)?
            }
            BridgeKind::CrossAttn => {
                let (mha, ln) = self.xattn.as_ref().unwrap();
                let q = fwd.param(self.query.unwrap());
                let attended = mha.forward(fwd, q, values, false, None)?;
                residual_norm(fwd, ln, q, attended)?
            }
            BridgeKind::Linear => values,
        };
        self.out.forward(fwd, tokens)
    }

    /// Plain-array entry point: builds a scratch tape internally.
    pub fn project(&self, store: &ParamStore, values: &Array2<f64>) -> Result<ActionTokens> {
        let mut tape = Tape::new();
        let mut binding = Binding::new(store);
        let mut fwd = Fwd::new(&mut tape, &mut binding, store);
        let values_var = fwd.tape.constant(values.clone().into_dyn());
        let tokens = self.project_values(&mut fwd, values_var)?;
        let out = tape
            .value(tokens)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        Ok(ActionTokens { tokens: out })
    }
}
