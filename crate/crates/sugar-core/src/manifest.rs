//! Run manifest: one TOML file with [data], [knowledge], [encoder], [tqp],
//! [lm], and [protocol] sections pins everything a run needs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::eval::{MetricKind, ProtocolKind, SplitKind};
use crate::tqp::BridgeKind;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub samples_per_class: usize,
    pub frames: usize,
    pub seed: u64,
    pub jitter_std: f64,
    pub amp_jitter_std: f64,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples_per_class: 50,
            frames: 64,
            seed: 7,
            jitter_std: 0.02,
            amp_jitter_std: 0.02,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionChannel {
    Both,
    Motion,
    Visual,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KnowledgeSection {
    pub generator: String,
    pub channel: SupervisionChannel,
    pub dedup_threshold: f64,
    /// d_t, the text-embedding width.
    pub embedding_dim: usize,
    pub encoder_seed: u64,
    pub cache_dir: Option<String>,
    pub endpoint: Option<String>,
}

impl Default for KnowledgeSection {
    fn default() -> Self {
        Self {
            generator: "fixture".into(),
            channel: SupervisionChannel::Both,
            dedup_threshold: 0.85,
            embedding_dim: 256,
            encoder_seed: 11,
            cache_dir: None,
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub feature_dims: Vec<usize>,
    pub kernels: Vec<usize>,
    pub representation_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            feature_dims: vec![16, 32, 64],
            kernels: vec![3, 5],
            representation_dim: 64,
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.1,
            temperature: 0.07,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TqpSection {
    pub bridge: BridgeKind,
    pub segment_length: usize,
    pub query_length: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for TqpSection {
    fn default() -> Self {
        Self {
            bridge: BridgeKind::Tqp,
            segment_length: 16,
            query_length: 16,
            layers: 2,
            heads: 4,
            seed: 31,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSection {
    pub layers: usize,
    pub heads: usize,
    pub lm_dim: usize,
    pub max_len: usize,
    pub embed_seed: u64,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_seed: u64,
    pub eval_subset: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            lm_dim: 64,
            max_len: 192,
            embed_seed: 13,
            seed: 29,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_seed: 41,
            epochs: 5,
            batch_size: 8,
            lr: 1e-3,
            train_seed: 19,
            eval_subset: 60,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSection {
    pub kind: ProtocolKind,
    /// Empty means every class trains.
    pub train_classes: Vec<String>,
    pub split: SplitKind,
    pub metrics: Vec<MetricKind>,
    pub top_k: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::ClosedSet,
            train_classes: Vec::new(),
            split: SplitKind::BySample,
            metrics: vec![MetricKind::Top1, MetricKind::Top5, MetricKind::MeanPerClass],
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Manifest {
    /// Master seed: stage seeds are derived from it when nonzero.
    pub master_seed: u64,
    pub data: DataSection,
    pub knowledge: KnowledgeSection,
    pub encoder: EncoderSection,
    pub tqp: TqpSection,
    pub lm: LmSection,
    pub protocol: ProtocolSection,
}

fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"manifest-seed");
    hasher.update(master.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl Manifest {
    pub fn toy() -> Self {
        Self::default()
    }

    /// Re-seed every training stage from one master seed. The data section
    /// is untouched, so runs with different master seeds share the split.
    pub fn with_master_seed(&self, master: u64) -> Self {
        let mut m = self.clone();
        m.master_seed = master;
        m.encoder.seed = derive_seed(master, "encoder-init");
        m.knowledge.encoder_seed = derive_seed(master, "text-encoder");
        m.tqp.seed = derive_seed(master, "tqp-init");
        m.lm.seed = derive_seed(master, "lm-base");
        m.lm.embed_seed = derive_seed(master, "lm-embed");
        m.lm.lora_seed = derive_seed(master, "lora-init");
        m.lm.train_seed = derive_seed(master, "finetune-order");
        m
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| crate::error::SugarError::InvalidConfig(format!("manifest: {e}")))
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| crate::error::SugarError::InvalidConfig(format!("manifest: {e}")))?;
        Ok(std::fs::write(path, text)?)
    }
}
