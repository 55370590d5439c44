use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sugar_autodiff::{ParamId, ParamStore};

use crate::error::{Result, SugarError};
use crate::nn::{LoraPair, MhaLora};
use crate::recognizer::ToyLm;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl LoraConfig {
    pub fn toy() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            seed: 41,
        }
    }
}

pub const PARAM_PREFIX: &str = "lora.";
pub const TARGETS: [&str; 4] = ["wq", "wk", "wv", "wo"];

/// Low-rank adapters over the attention projection matrices of every LM
/// layer. Base weights stay untouched; effective weight = W + (alpha/r) B A.
pub struct LoraAdapter {
    pub config: LoraConfig,
    layers: Vec<MhaLora>,
    param_ids: Vec<ParamId>,
}

impl LoraAdapter {
    pub fn new(store: &mut ParamStore, lm: &ToyLm, config: LoraConfig) -> Result<Self> {
        let dim = lm.config().lm_dim;
        if config.rank == 0 || config.rank > dim {
            return Err(SugarError::InvalidConfig(format!(
                "lora rank {} invalid for dim {dim}",
                config.rank
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let before = store.len();
        let mut layers = Vec::with_capacity(lm.config().layers);
        for i in 0..lm.config().layers {
            let p = format!("{PARAM_PREFIX}layer{i}");
            layers.push(MhaLora {
                q: LoraPair::new(store, &format!("{p}.wq"), dim, dim, config.rank, config.alpha, &mut rng)?,
                k: LoraPair::new(store, &format!("{p}.wk"), dim, dim, config.rank, config.alpha, &mut rng)?,
                v: LoraPair::new(store, &format!("{p}.wv"), dim, dim, config.rank, config.alpha, &mut rng)?,
                o: LoraPair::new(store, &format!("{p}.wo"), dim, dim, config.rank, config.alpha, &mut rng)?,
            });
        }
        let param_ids = (before..store.len()).map(ParamId).collect();
        Ok(Self {
            config,
            layers,
            param_ids,
        })
    }

    pub fn layer(&self, i: usize) -> &MhaLora {
        &self.layers[i]
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    pub fn save_checkpoint<P: AsRef<std::path::Path>>(
        &self,
        path: P,
        store: &ParamStore,
    ) -> Result<()> {
        let header = serde_json::json!({
            "kind": "lora-adapter",
            "rank": self.config.rank,
            "alpha": self.config.alpha,
            "targets": TARGETS,
            "config": self.config,
        });
        crate::archive::save_archive(path, &header, store, PARAM_PREFIX)
    }

    /// Load adapter values saved by [`Self::save_checkpoint`] into a store
    /// that already holds a compatible adapter.
    pub fn load_checkpoint<P: AsRef<std::path::Path>>(
        path: P,
        store: &mut ParamStore,
    ) -> Result<LoraConfig> {
        let (header, entries) = crate::archive::load_archive(path)?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("lora-adapter") {
            return Err(SugarError::Format {
                offset: 0,
                msg: "not a lora adapter checkpoint".into(),
            });
        }
        let config: LoraConfig = serde_json::from_value(
            header
                .get("config")
                .cloned()
                .ok_or_else(|| SugarError::Format {
                    offset: 0,
                    msg: "adapter checkpoint has no config".into(),
                })?,
        )?;
        crate::archive::apply_entries(store, &entries)?;
        Ok(config)
    }
}

/// Column-vector adapter application: W x + (alpha/r) B (A x).
/// A is [r, d_in], B is [d_out, r].
pub fn lora_forward(
    x: &Array1<f64>,
    w_base: &Array2<f64>,
    a: &Array2<f64>,
    b: &Array2<f64>,
    rank: usize,
    alpha: f64,
) -> Result<Array1<f64>> {
    let (d_out, d_in) = (w_base.nrows(), w_base.ncols());
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(SugarError::InvalidConfig(format!(
            "rank {rank} invalid for {d_out}x{d_in}"
        )));
    }
    if a.nrows() != rank || a.ncols() != d_in || b.nrows() != d_out || b.ncols() != rank {
        return Err(SugarError::Dimension(format!(
            "adapter shapes A {:?} B {:?} for base {d_out}x{d_in} rank {rank}",
            a.shape(),
            b.shape()
        )));
    }
    if x.len() != d_in {
        return Err(SugarError::Dimension(format!(
            "input dim {} vs base {d_out}x{d_in}",
            x.len()
        )));
    }
    Ok(w_base.dot(x) + (alpha / rank as f64) * b.dot(&a.dot(x)))
}
