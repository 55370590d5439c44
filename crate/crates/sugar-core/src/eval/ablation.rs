//! Controlled sweeps: supervision channels, bridging modules, and token
//! lengths. Every leg of a sweep shares the data split; only the stated
//! variable and the master seed move.

use crate::error::Result;
use crate::eval::ResultRecord;
use crate::manifest::{Manifest, SupervisionChannel};
use crate::pipeline::{build_bank, finish_run, prepare_data, pretrain_stage, run_manifest};
use crate::tqp::BridgeKind;

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub label: String,
    pub seed: u64,
    pub record: ResultRecord,
}

impl AblationOutcome {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.record.metrics.get(name).copied()
    }
}

pub const KNOWLEDGE_CHANNELS: [(&str, SupervisionChannel); 4] = [
    ("none", SupervisionChannel::None),
    ("visual", SupervisionChannel::Visual),
    ("motion", SupervisionChannel::Motion),
    ("both", SupervisionChannel::Both),
];

/// Four pretraining runs per seed differing only in the supervision channel.
pub fn run_knowledge_ablation(base: &Manifest, seeds: &[u64]) -> Result<Vec<AblationOutcome>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for (label, channel) in KNOWLEDGE_CHANNELS {
            let mut manifest = base.with_master_seed(seed);
            manifest.knowledge.channel = channel;
            let result = run_manifest(&manifest)?;
            out.push(AblationOutcome {
                label: label.to_string(),
                seed,
                record: result.record,
            });
        }
    }
    Ok(out)
}

pub const BRIDGES: [(&str, BridgeKind); 4] = [
    ("x_attn", BridgeKind::CrossAttn),
    ("one_q_former", BridgeKind::SingleQFormer),
    ("linear", BridgeKind::Linear),
    ("tqp", BridgeKind::Tqp),
];

/// One pretraining run per seed, then one fine-tuning run per bridge with an
/// identical budget.
pub fn run_bridge_ablation(base: &Manifest, seeds: &[u64]) -> Result<Vec<AblationOutcome>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let manifest = base.with_master_seed(seed);
        let data = prepare_data(&manifest)?;
        let (bank, _) = build_bank(&manifest, &data)?;
        let enc_stage = pretrain_stage(&manifest, &data, &bank)?;
        for (label, bridge) in BRIDGES {
            let mut variant = manifest.clone();
            variant.tqp.bridge = bridge;
            let result = finish_run(&variant, data.clone(), enc_stage.clone())?;
            out.push(AblationOutcome {
                label: label.to_string(),
                seed,
                record: result.record,
            });
        }
    }
    Ok(out)
}

/// One fine-tuning run per query length over a shared pretrained encoder.
pub fn run_token_length_sweep(
    base: &Manifest,
    lengths: &[usize],
    seeds: &[u64],
) -> Result<Vec<AblationOutcome>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let manifest = base.with_master_seed(seed);
        let data = prepare_data(&manifest)?;
        let (bank, _) = build_bank(&manifest, &data)?;
        let enc_stage = pretrain_stage(&manifest, &data, &bank)?;
        for &length in lengths {
            let mut variant = manifest.clone();
            variant.tqp.query_length = length;
            let result = finish_run(&variant, data.clone(), enc_stage.clone())?;
            out.push(AblationOutcome {
                label: format!("len{length}"),
                seed,
                record: result.record,
            });
        }
    }
    Ok(out)
}

/// Mean of one metric over the outcomes carrying a given label.
pub fn mean_metric(outcomes: &[AblationOutcome], label: &str, metric: &str) -> Option<f64> {
    let values: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.label == label)
        .filter_map(|o| o.metric(metric))
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub fn outcomes_csv(outcomes: &[AblationOutcome]) -> String {
    let mut out = String::from("label,seed,protocol,top1,top5,mean_per_class,confusable_top1\n");
    for o in outcomes {
        let get = |k: &str| o.metric(k).map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.label,
            o.seed,
            o.record.protocol_id,
            get("top1"),
            get("top5"),
            get("mean_per_class"),
            get("confusable_top1"),
        ));
    }
    out
}
