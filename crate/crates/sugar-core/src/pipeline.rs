//! End-to-end orchestration: synthetic data, knowledge bank, contrastive
//! pretraining, instruction fine-tuning, evaluation, and artifact output.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use sugar_autodiff::{Binding, ParamStore, Tape};

use crate::contrastive::{
    encode_pooled_all, pretrain, pretrain_supervised, EpochMetrics, TrainConfig,
};
use crate::encoder::{
    save_encoder_checkpoint, Activation, EncoderConfig, SkeletonEncoder,
};
use crate::error::{Result, SugarError};
use crate::eval::{
    config_hash, evaluate, silhouette_score, EvalBreakdown, Protocol, ProtocolKind, Ranker,
    ResultRecord, SplitKind, TsneConfig,
};
use crate::knowledge::{
    encode_bank, generate_knowledge, ActionList, CachingGenerator, EmbeddingBank,
    FixtureGenerator, GeneratorClient, HashedTextEncoder, HttpGenerator, KnowledgeChannel,
    KnowledgeConfig, KnowledgeDoc,
};
use crate::manifest::{Manifest, SupervisionChannel};
use crate::nn::Fwd;
use crate::recognizer::{
    finetune, rank_classes, vocab_texts, BriefSource, FinetuneConfig, FinetuneEpoch, LmConfig,
    LoraAdapter, LoraConfig, Tokenizer, ToyLm, TrainSample,
};
use crate::skeleton::{
    generate_synthetic_dataset_with, GeneratorOptions, SkeletonGraph, SkeletonSequence,
};
use crate::toy::{toy_action_specs, TOY_CONFUSABLE_PAIRS};
use crate::tqp::{Bridge, BridgeKind, TqpConfig};

/// Data, class lists, and the evaluation protocol for one run.
#[derive(Clone)]
pub struct PreparedData {
    pub graph: SkeletonGraph,
    pub full_list: ActionList,
    pub train_list: Vec<String>,
    pub eval_list: Vec<String>,
    /// Action list handed to the recognizer at inference time.
    pub inference_list: Vec<String>,
    /// Training samples; labels are indices into `train_list`.
    pub train: Vec<SkeletonSequence>,
    /// Test samples of eval classes; labels are indices into the full list.
    pub test_eval: Vec<SkeletonSequence>,
    pub split_hash: String,
    pub protocol: Protocol,
}

fn relabel(seq: &SkeletonSequence, label: usize) -> SkeletonSequence {
    SkeletonSequence::new(
        seq.frames().clone(),
        Some(label as i32),
        seq.subject_id(),
    )
    .expect("relabel keeps validity")
}

fn split_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"train-test-split");
    hasher.update(seed.to_le_bytes());
    hasher.update((class as u64).to_le_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

pub fn prepare_data(manifest: &Manifest) -> Result<PreparedData> {
    let graph = SkeletonGraph::toy();
    let specs = toy_action_specs();
    let full_list = ActionList::toy();
    let options = GeneratorOptions {
        jitter_std: manifest.data.jitter_std,
        amp_jitter_std: manifest.data.amp_jitter_std,
        ..GeneratorOptions::default()
    };
    let dataset = generate_synthetic_dataset_with(
        &specs,
        manifest.data.samples_per_class,
        manifest.data.frames,
        &graph,
        manifest.data.seed,
        options,
    )?;

    // Stratified train/test split, deterministic in the data seed.
    let num_classes = full_list.len();
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    match manifest.protocol.split {
        SplitKind::BySample => {
            for class in 0..num_classes {
                let mut members: Vec<usize> = dataset
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.label() == Some(class as i32))
                    .map(|(i, _)| i)
                    .collect();
                members.shuffle(&mut split_rng(manifest.data.seed, class));
                let test_n =
                    ((members.len() as f64) * manifest.data.test_fraction).round() as usize;
                test_idx.extend_from_slice(&members[..test_n]);
                train_idx.extend_from_slice(&members[test_n..]);
            }
        }
        SplitKind::BySubject => {
            let num_subjects = GeneratorOptions::default().num_subjects;
            let test_subjects =
                ((num_subjects as f64) * manifest.data.test_fraction).ceil() as usize;
            let first_test = num_subjects - test_subjects;
            for (i, seq) in dataset.iter().enumerate() {
                let subject = seq.subject_id().unwrap_or(0) as usize;
                if subject >= first_test {
                    test_idx.push(i);
                } else {
                    train_idx.push(i);
                }
            }
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let split_hash = {
        let mut hasher = Sha256::new();
        for &i in &train_idx {
            hasher.update((i as u64).to_le_bytes());
        }
        hasher.update(b"|");
        for &i in &test_idx {
            hasher.update((i as u64).to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    };

    // Class lists per protocol.
    let train_list: Vec<String> = if manifest.protocol.train_classes.is_empty() {
        full_list.names().to_vec()
    } else {
        for name in &manifest.protocol.train_classes {
            if !full_list.contains(name) {
                return Err(SugarError::Protocol(format!(
                    "unknown train class {name:?}"
                )));
            }
        }
        manifest.protocol.train_classes.clone()
    };
    let eval_list: Vec<String> = match manifest.protocol.kind {
        ProtocolKind::ClosedSet => train_list.clone(),
        ProtocolKind::ZeroShotUnseen | ProtocolKind::ZeroShotCrossList => full_list
            .names()
            .iter()
            .filter(|n| !train_list.contains(n))
            .cloned()
            .collect(),
    };
    if eval_list.is_empty() {
        return Err(SugarError::Protocol(
            "protocol leaves no classes to evaluate".into(),
        ));
    }
    let inference_list: Vec<String> = match manifest.protocol.kind {
        ProtocolKind::ClosedSet => train_list.clone(),
        // Unseen-classes protocol ranks against the full dictionary.
        ProtocolKind::ZeroShotUnseen => full_list.names().to_vec(),
        // Cross-list protocol ranks against the foreign list only.
        ProtocolKind::ZeroShotCrossList => eval_list.clone(),
    };

    let protocol = Protocol {
        kind: manifest.protocol.kind,
        train_classes: train_list.clone(),
        eval_classes: eval_list.clone(),
        split: manifest.protocol.split,
        metrics: manifest.protocol.metrics.clone(),
    };
    protocol.validate()?;

    // Training set: train-split samples of train classes, relabelled to
    // train-list indices.
    let mut train = Vec::new();
    for &i in &train_idx {
        let name = &full_list.names()[dataset[i].label().unwrap() as usize];
        if let Some(local) = train_list.iter().position(|n| n == name) {
            train.push(relabel(&dataset[i], local));
        }
    }
    // Eval set: test-split samples of eval classes, full-list labels.
    let mut test_eval = Vec::new();
    for &i in &test_idx {
        let name = &full_list.names()[dataset[i].label().unwrap() as usize];
        if eval_list.contains(name) {
            test_eval.push(dataset[i].clone());
        }
    }
    // The leak assertion of the zero-shot protocols.
    if matches!(
        manifest.protocol.kind,
        ProtocolKind::ZeroShotUnseen | ProtocolKind::ZeroShotCrossList
    ) {
        let leaked: Vec<&String> = train_list
            .iter()
            .filter(|n| eval_list.contains(n))
            .collect();
        if !leaked.is_empty() {
            return Err(SugarError::Protocol(format!(
                "eval classes leaked into training: {leaked:?}"
            )));
        }
    }

    Ok(PreparedData {
        graph,
        full_list,
        train_list,
        eval_list,
        inference_list,
        train,
        test_eval,
        split_hash,
        protocol,
    })
}

/// Build the knowledge bank for the training classes.
pub fn build_bank(
    manifest: &Manifest,
    data: &PreparedData,
) -> Result<(EmbeddingBank, KnowledgeDoc)> {
    let mut generator: Box<dyn GeneratorClient> = match manifest.knowledge.generator.as_str() {
        "fixture" => Box::new(FixtureGenerator::bundled()),
        "http" => {
            let endpoint = manifest.knowledge.endpoint.as_deref().ok_or_else(|| {
                SugarError::InvalidConfig("http generator needs an endpoint".into())
            })?;
            let token = std::env::var("SUGAR_GENERATOR_TOKEN").ok();
            Box::new(HttpGenerator::new(endpoint, token))
        }
        other => {
            return Err(SugarError::InvalidConfig(format!(
                "unknown generator {other:?}"
            )))
        }
    };
    let generator_id = generator.id();
    let actions = ActionList::new(data.train_list.clone())?;
    let config = KnowledgeConfig {
        dedup_threshold: manifest.knowledge.dedup_threshold,
        seed: manifest.data.seed,
        ..KnowledgeConfig::default()
    };
    let (motions, visuals) = match &manifest.knowledge.cache_dir {
        Some(dir) => {
            let mut cached = CachingGenerator::new(generator, Path::new(dir))?;
            generate_knowledge(&actions, &mut cached, &config)?
        }
        None => generate_knowledge(&actions, generator.as_mut(), &config)?,
    };
    let doc = KnowledgeDoc::build(&generator_id, &motions, &visuals);
    let encoder = HashedTextEncoder::new(
        manifest.knowledge.embedding_dim,
        manifest.knowledge.encoder_seed,
    );
    let bank = encode_bank(&motions, &visuals, &encoder)?;
    Ok((bank, doc))
}

/// Encode the full-length values of every sequence with frozen parameters.
pub fn encode_values_all(
    encoder: &SkeletonEncoder,
    store: &ParamStore,
    dataset: &[SkeletonSequence],
) -> Result<Vec<Array2<f64>>> {
    dataset
        .iter()
        .map(|seq| {
            let mut tape = Tape::new();
            let mut binding = Binding::new(store);
            let mut fwd = Fwd::new(&mut tape, &mut binding, store);
            let out = encoder.encode(&mut fwd, seq)?;
            Ok(tape
                .value(out.values)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned())
        })
        .collect()
}

#[derive(Clone)]
pub struct EncoderStage {
    pub store: ParamStore,
    pub encoder: SkeletonEncoder,
    pub metrics: Vec<EpochMetrics>,
    pub silhouette_init: f64,
    pub silhouette_trained: f64,
    pub pooled_init: Array2<f64>,
    pub pooled_trained: Array2<f64>,
    pub train_values: Vec<Array2<f64>>,
    pub test_values: Vec<Array2<f64>>,
}

fn encoder_config(manifest: &Manifest) -> EncoderConfig {
    EncoderConfig {
        num_blocks: manifest.encoder.feature_dims.len(),
        feature_dims: manifest.encoder.feature_dims.clone(),
        temporal_kernel_sizes: manifest.encoder.kernels.clone(),
        activation: Activation::Relu,
        representation_dim: manifest.encoder.representation_dim,
        projection_dim: manifest.knowledge.embedding_dim,
        seed: manifest.encoder.seed,
    }
}

pub fn pretrain_stage(
    manifest: &Manifest,
    data: &PreparedData,
    bank: &EmbeddingBank,
) -> Result<EncoderStage> {
    let mut store = ParamStore::new();
    let encoder = SkeletonEncoder::new(&mut store, &data.graph, encoder_config(manifest))?;
    let labels: Vec<usize> = data
        .train
        .iter()
        .map(|s| s.label().unwrap() as usize)
        .collect();

    let pooled_init = encode_pooled_all(&encoder, &store, &data.train)?;
    let silhouette_init = silhouette_score(&pooled_init, &labels)?;

    let cfg = TrainConfig {
        temperature: manifest.encoder.temperature,
        lr: manifest.encoder.lr,
        momentum: manifest.encoder.momentum,
        epochs: manifest.encoder.epochs,
        batch_size: manifest.encoder.batch_size,
        lr_decay_factor: manifest.encoder.lr_decay,
        seed: manifest.encoder.seed,
    };
    let bank_subset = bank.subset(&data.train_list)?;
    let metrics = match manifest.knowledge.channel {
        SupervisionChannel::None => pretrain_supervised(
            &data.train,
            data.train_list.len(),
            &encoder,
            &mut store,
            &cfg,
        )?,
        channel => {
            let kc = match channel {
                SupervisionChannel::Both => KnowledgeChannel::Both,
                SupervisionChannel::Motion => KnowledgeChannel::MotionOnly,
                SupervisionChannel::Visual => KnowledgeChannel::VisualOnly,
                SupervisionChannel::None => unreachable!(),
            };
            pretrain(
                &data.train,
                &bank_subset.class_sets(kc),
                &encoder,
                &mut store,
                &cfg,
            )?
        }
    };

    let pooled_trained = encode_pooled_all(&encoder, &store, &data.train)?;
    let silhouette_trained = silhouette_score(&pooled_trained, &labels)?;
    let train_values = encode_values_all(&encoder, &store, &data.train)?;
    let test_values = encode_values_all(&encoder, &store, &data.test_eval)?;
    Ok(EncoderStage {
        store,
        encoder,
        metrics,
        silhouette_init,
        silhouette_trained,
        pooled_init,
        pooled_trained,
        train_values,
        test_values,
    })
}

pub struct RecognizerStage {
    pub store: ParamStore,
    pub lm: ToyLm,
    pub bridge: Bridge,
    pub adapter: LoraAdapter,
    pub metrics: Vec<FinetuneEpoch>,
}

fn tqp_config(manifest: &Manifest) -> TqpConfig {
    TqpConfig {
        segment_length: manifest.tqp.segment_length,
        query_length: manifest.tqp.query_length,
        model_dim: manifest.encoder.representation_dim,
        qformer_layers: manifest.tqp.layers,
        heads: manifest.tqp.heads,
        lm_dim: manifest.lm.lm_dim,
        seed: manifest.tqp.seed,
    }
}

fn lm_config(manifest: &Manifest) -> LmConfig {
    LmConfig {
        layers: manifest.lm.layers,
        heads: manifest.lm.heads,
        lm_dim: manifest.lm.lm_dim,
        max_len: manifest.lm.max_len,
        embed_seed: manifest.lm.embed_seed,
        seed: manifest.lm.seed,
        zero_head: false,
    }
}

/// Vocabulary covers the full dictionary and corpus regardless of the train
/// split, the way a pretrained tokenizer would.
pub fn build_tokenizer(data: &PreparedData) -> Tokenizer {
    let corpus = FixtureGenerator::bundled().all_sentences();
    let texts = vocab_texts(data.full_list.names(), &corpus);
    Tokenizer::build(texts.iter().map(String::as_str))
}

pub fn finetune_stage(
    manifest: &Manifest,
    data: &PreparedData,
    train_values: &[Array2<f64>],
) -> Result<RecognizerStage> {
    let mut store = ParamStore::new();
    let lm = ToyLm::new(&mut store, build_tokenizer(data), lm_config(manifest))?;
    let bridge = Bridge::new(&mut store, manifest.tqp.bridge, tqp_config(manifest))?;
    let adapter = LoraAdapter::new(
        &mut store,
        &lm,
        LoraConfig {
            rank: manifest.lm.lora_rank,
            alpha: manifest.lm.lora_alpha,
            seed: manifest.lm.lora_seed,
        },
    )?;
    let briefs = BriefSource::from_fixture(&FixtureGenerator::bundled(), data.full_list.names())?;
    let samples: Vec<TrainSample> = data
        .train
        .iter()
        .zip(train_values)
        .map(|(seq, values)| TrainSample {
            values: values.clone(),
            label: seq.label().unwrap() as usize,
        })
        .collect();
    let cfg = FinetuneConfig {
        epochs: manifest.lm.epochs,
        batch_size: manifest.lm.batch_size,
        lr: manifest.lm.lr,
        seed: manifest.lm.train_seed,
        eval_subset: manifest.lm.eval_subset,
    };
    let metrics = finetune(
        &samples,
        &data.train_list,
        &briefs.briefs,
        &lm,
        &bridge,
        &adapter,
        &mut store,
        &cfg,
    )?;
    Ok(RecognizerStage {
        store,
        lm,
        bridge,
        adapter,
        metrics,
    })
}

/// Everything needed for inference.
pub struct ModelBundle {
    pub enc_store: ParamStore,
    pub encoder: SkeletonEncoder,
    pub rec_store: ParamStore,
    pub lm: ToyLm,
    pub bridge: Bridge,
    pub adapter: LoraAdapter,
    pub inference_list: Vec<String>,
}

impl ModelBundle {
    pub fn rank_names(&self, seq: &SkeletonSequence) -> Result<Vec<String>> {
        let values = encode_values_all(&self.encoder, &self.enc_store, std::slice::from_ref(seq))?
            .pop()
            .unwrap();
        let tokens = self.bridge.project(&self.rec_store, &values)?;
        let ranking = rank_classes(
            &self.lm,
            &self.rec_store,
            Some(&self.adapter),
            &tokens,
            &self.inference_list,
        )?;
        Ok(ranking
            .into_iter()
            .map(|(c, _)| self.inference_list[c].clone())
            .collect())
    }

    pub fn predict(
        &self,
        seq: &SkeletonSequence,
        top_k: usize,
    ) -> Result<crate::recognizer::Prediction> {
        let values = encode_values_all(&self.encoder, &self.enc_store, std::slice::from_ref(seq))?
            .pop()
            .unwrap();
        let tokens = self.bridge.project(&self.rec_store, &values)?;
        crate::recognizer::predict(
            &self.lm,
            &self.rec_store,
            Some(&self.adapter),
            &tokens,
            &self.inference_list,
            top_k,
        )
    }
}

impl Ranker for ModelBundle {
    fn rank(&self, seq: &SkeletonSequence) -> Result<Vec<String>> {
        self.rank_names(seq)
    }
}

pub struct PipelineOutput {
    pub record: ResultRecord,
    pub breakdown: EvalBreakdown,
    pub pretrain_metrics: Vec<EpochMetrics>,
    pub finetune_metrics: Vec<FinetuneEpoch>,
    pub silhouette_init: f64,
    pub silhouette_trained: f64,
    pub pooled_init: Array2<f64>,
    pub pooled_trained: Array2<f64>,
    pub bundle: ModelBundle,
}

/// Top-1 accuracy over eval classes that belong to a confusable pair, from
/// the evaluation tallies. None when no pair class was evaluated.
pub fn confusable_top1(breakdown: &EvalBreakdown, full_names: &[String]) -> Option<f64> {
    let mut pair_classes = Vec::new();
    for &(a, b) in &TOY_CONFUSABLE_PAIRS {
        pair_classes.push(full_names[a].clone());
        pair_classes.push(full_names[b].clone());
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for name in &pair_classes {
        if let Some(&(h, _, t)) = breakdown.per_class.get(name) {
            hits += h;
            total += t;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

pub fn run_manifest(manifest: &Manifest) -> Result<PipelineOutput> {
    let data = prepare_data(manifest)?;
    let (bank, _doc) = build_bank(manifest, &data)?;
    let enc_stage = pretrain_stage(manifest, &data, &bank)?;
    finish_run(manifest, data, enc_stage)
}

/// Fine-tune, evaluate, and assemble the bundle from a finished encoder
/// stage. Separated so sweeps can reuse one pretraining run.
pub fn finish_run(
    manifest: &Manifest,
    data: PreparedData,
    enc_stage: EncoderStage,
) -> Result<PipelineOutput> {
    let rec_stage = finetune_stage(manifest, &data, &enc_stage.train_values)?;
    let bundle = ModelBundle {
        enc_store: enc_stage.store,
        encoder: enc_stage.encoder,
        rec_store: rec_stage.store,
        lm: rec_stage.lm,
        bridge: rec_stage.bridge,
        adapter: rec_stage.adapter,
        inference_list: data.inference_list.clone(),
    };
    let hash = config_hash(manifest);
    let (mut record, breakdown) = evaluate(
        &data.protocol,
        &bundle,
        &data.test_eval,
        data.full_list.names(),
        &hash,
        &data.split_hash,
        manifest.master_seed,
    )?;
    if let Some(pair_acc) = confusable_top1(&breakdown, data.full_list.names()) {
        record.metrics.insert("confusable_top1".to_string(), pair_acc);
    }
    Ok(PipelineOutput {
        record,
        breakdown,
        pretrain_metrics: enc_stage.metrics,
        finetune_metrics: rec_stage.metrics,
        silhouette_init: enc_stage.silhouette_init,
        silhouette_trained: enc_stage.silhouette_trained,
        pooled_init: enc_stage.pooled_init,
        pooled_trained: enc_stage.pooled_trained,
        bundle,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Run and persist every artifact under `out_dir`.
pub fn run_manifest_to_dir(manifest: &Manifest, out_dir: &Path) -> Result<PipelineOutput> {
    std::fs::create_dir_all(out_dir)?;
    let data = prepare_data(manifest)?;
    let (bank, doc) = build_bank(manifest, &data)?;
    crate::skeleton::write_skeleton_file(&data.train, out_dir.join("train.skel"))?;
    crate::skeleton::write_skeleton_file(&data.test_eval, out_dir.join("test.skel"))?;
    crate::knowledge::write_embedding_bank(&bank, out_dir.join("bank.sugb"))?;
    doc.write_file(out_dir.join("knowledge.json"))?;

    let enc_stage = pretrain_stage(manifest, &data, &bank)?;
    save_encoder_checkpoint(out_dir.join("encoder.ckpt"), &enc_stage.encoder, &enc_stage.store)?;
    crate::contrastive::write_metrics_jsonl(
        out_dir.join("pretrain_metrics.jsonl"),
        &enc_stage.metrics,
    )?;

    let labels: Vec<usize> = data
        .train
        .iter()
        .map(|s| s.label().unwrap() as usize)
        .collect();
    let class_names: Vec<String> = data.train_list.clone();
    let tsne = TsneConfig {
        seed: manifest.data.seed,
        ..TsneConfig::default()
    };
    crate::eval::export_embeddings_2d(
        &enc_stage.pooled_trained,
        &labels,
        &class_names,
        out_dir.join("embeddings.csv"),
        &tsne,
    )?;

    let output = finish_run(manifest, data, enc_stage)?;

    save_bridge_checkpoint(
        &out_dir.join("bridge.ckpt"),
        &output.bundle.bridge,
        &output.bundle.rec_store,
    )?;
    output
        .bundle
        .adapter
        .save_checkpoint(out_dir.join("adapter.ckpt"), &output.bundle.rec_store)?;

    let mut finetune_log = String::new();
    for m in &output.finetune_metrics {
        finetune_log.push_str(&serde_json::to_string(m)?);
        finetune_log.push('\n');
    }
    write_atomic(&out_dir.join("finetune_metrics.jsonl"), finetune_log.as_bytes())?;

    let record_json = serde_json::to_string(&output.record)?;
    write_atomic(
        &out_dir.join("results.jsonl"),
        format!("{record_json}\n").as_bytes(),
    )?;
    write_atomic(
        &out_dir.join("summary.csv"),
        summary_csv(std::slice::from_ref(&output.record)).as_bytes(),
    )?;
    manifest.save(out_dir.join("manifest.toml"))?;
    Ok(output)
}

/// One CSV over any set of records: fixed metric columns, blank when absent.
pub fn summary_csv(records: &[ResultRecord]) -> String {
    let mut out = String::from("protocol,seed,top1,top5,mean_per_class,confusable_top1,config_hash\n");
    for r in records {
        let get = |k: &str| {
            r.metrics
                .get(k)
                .map(|v| v.to_string())
                .unwrap_or_default()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.protocol_id,
            r.seed,
            get("top1"),
            get("top5"),
            get("mean_per_class"),
            get("confusable_top1"),
            r.config_hash
        ));
    }
    out
}

const BRIDGE_CHECKPOINT_KIND: &str = "bridge";

pub fn save_bridge_checkpoint(path: &Path, bridge: &Bridge, store: &ParamStore) -> Result<()> {
    let header = serde_json::json!({
        "kind": BRIDGE_CHECKPOINT_KIND,
        "bridge_kind": bridge.kind(),
        "config": bridge.config(),
    });
    crate::archive::save_archive(path, &header, store, crate::tqp::PARAM_PREFIX)
}

pub fn load_bridge_checkpoint(path: &Path, store: &mut ParamStore) -> Result<Bridge> {
    let (header, entries) = crate::archive::load_archive(path)?;
    if header.get("kind").and_then(|k| k.as_str()) != Some(BRIDGE_CHECKPOINT_KIND) {
        return Err(SugarError::Format {
            offset: 0,
            msg: "not a bridge checkpoint".into(),
        });
    }
    let kind: BridgeKind = serde_json::from_value(
        header
            .get("bridge_kind")
            .cloned()
            .ok_or_else(|| SugarError::Format {
                offset: 0,
                msg: "bridge checkpoint has no kind".into(),
            })?,
    )?;
    let config: TqpConfig = serde_json::from_value(
        header
            .get("config")
            .cloned()
            .ok_or_else(|| SugarError::Format {
                offset: 0,
                msg: "bridge checkpoint has no config".into(),
            })?,
    )?;
    let bridge = Bridge::new(store, kind, config)?;
    crate::archive::apply_entries(store, &entries)?;
    Ok(bridge)
}

/// Rebuild a bundle from the artifacts written by [`run_manifest_to_dir`].
pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let manifest = Manifest::load(dir.join("manifest.toml"))?;
    let data = prepare_data(&manifest)?;
    let mut enc_store = ParamStore::new();
    let encoder = crate::encoder::load_encoder_checkpoint(
        dir.join("encoder.ckpt"),
        &mut enc_store,
        &data.graph,
    )?;
    let mut rec_store = ParamStore::new();
    let lm = ToyLm::new(&mut rec_store, build_tokenizer(&data), lm_config(&manifest))?;
    let bridge = load_bridge_checkpoint(&dir.join("bridge.ckpt"), &mut rec_store)?;
    let adapter = LoraAdapter::new(
        &mut rec_store,
        &lm,
        LoraConfig {
            rank: manifest.lm.lora_rank,
            alpha: manifest.lm.lora_alpha,
            seed: manifest.lm.lora_seed,
        },
    )?;
    LoraAdapter::load_checkpoint(dir.join("adapter.ckpt"), &mut rec_store)?;
    Ok(ModelBundle {
        enc_store,
        encoder,
        rec_store,
        lm,
        bridge,
        adapter,
        inference_list: data.inference_list,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest() -> Manifest {
        let mut m = Manifest::toy();
        m.data.samples_per_class = 6;
        m.data.frames = 16;
        m.encoder.feature_dims = vec![8, 12];
        m.encoder.representation_dim = 12;
        m.encoder.kernels = vec![3];
        m.encoder.epochs = 2;
        m.encoder.batch_size = 8;
        m.knowledge.embedding_dim = 32;
        m.tqp.segment_length = 8;
        m.tqp.query_length = 4;
        m.tqp.layers = 1;
        m.tqp.heads = 2;
        m.lm.layers = 1;
        m.lm.heads = 2;
        m.lm.lm_dim = 16;
        m.lm.epochs = 1;
        m.lm.eval_subset = 4;
        m
    }

    #[test]
    fn prepare_data_splits_deterministically() {
        let m = tiny_manifest();
        let a = prepare_data(&m).unwrap();
        let b = prepare_data(&m).unwrap();
        assert_eq!(a.split_hash, b.split_hash);
        assert_eq!(a.train.len(), b.train.len());
        // 6 classes x 6 samples, 20% test: 1 test sample per class.
        assert_eq!(a.test_eval.len(), 6);
        assert_eq!(a.train.len(), 30);
    }

    #[test]
    fn zero_shot_split_excludes_eval_classes_from_training() {
        let mut m = tiny_manifest();
        m.protocol.kind = ProtocolKind::ZeroShotUnseen;
        m.protocol.train_classes = vec![
            "drink from bottle".to_string(),
            "drink from can".to_string(),
            "wipe the table".to_string(),
            "wipe the dishes".to_string(),
        ];
        let data = prepare_data(&m).unwrap();
        assert_eq!(data.eval_list, vec!["wave the hand", "kick the ball"]);
        assert_eq!(data.inference_list.len(), 6);
        assert_eq!(data.train.len(), 20, "4 classes x 5 train samples");
        for seq in &data.train {
            let name = &data.train_list[seq.label().unwrap() as usize];
            assert!(!data.eval_list.contains(name));
        }
        for seq in &data.test_eval {
            let name = &data.full_list.names()[seq.label().unwrap() as usize];
            assert!(data.eval_list.contains(name));
        }
    }

    #[test]
    fn by_subject_split_separates_subjects() {
        let mut m = tiny_manifest();
        m.data.samples_per_class = 20;
        m.protocol.split = SplitKind::BySubject;
        let data = prepare_data(&m).unwrap();
        let train_subjects: std::collections::BTreeSet<i32> = data
            .train
            .iter()
            .map(|s| s.subject_id().unwrap())
            .collect();
        let test_subjects: std::collections::BTreeSet<i32> = data
            .test_eval
            .iter()
            .map(|s| s.subject_id().unwrap())
            .collect();
        assert!(train_subjects.is_disjoint(&test_subjects));
    }

    #[test]
    fn tiny_pipeline_runs_end_to_end_and_is_deterministic() {
        let m = tiny_manifest();
        let a = run_manifest(&m).unwrap();
        let b = run_manifest(&m).unwrap();
        assert_eq!(
            serde_json::to_string(&a.record).unwrap(),
            serde_json::to_string(&b.record).unwrap()
        );
        assert!(a.record.metrics.contains_key("top1"));
        assert!(a.record.metrics.contains_key("confusable_top1"));
        assert_eq!(a.breakdown.predictions.len(), 6);
        // Constrained decoding only emits list members.
        for (_, ranking) in &a.breakdown.predictions {
            for name in ranking {
                assert!(a.bundle.inference_list.contains(name));
            }
        }
    }

    #[test]
    fn artifacts_written_and_bundle_reloads() {
        let m = tiny_manifest();
        let dir = tempfile::tempdir().unwrap();
        let out = run_manifest_to_dir(&m, dir.path()).unwrap();
        for file in [
            "train.skel",
            "test.skel",
            "bank.sugb",
            "knowledge.json",
            "encoder.ckpt",
            "bridge.ckpt",
            "adapter.ckpt",
            "pretrain_metrics.jsonl",
            "finetune_metrics.jsonl",
            "results.jsonl",
            "summary.csv",
            "embeddings.csv",
            "manifest.toml",
        ] {
            assert!(dir.path().join(file).exists(), "missing {file}");
        }
        let bundle = load_bundle(dir.path()).unwrap();
        // Reloaded bundle ranks at f32-checkpoint precision; the top-1 class
        // must agree with the in-memory bundle on every test sample.
        let data = prepare_data(&m).unwrap();
        for seq in &data.test_eval {
            let a = out.bundle.rank_names(seq).unwrap();
            let b = bundle.rank_names(seq).unwrap();
            assert_eq!(a[0], b[0]);
        }
    }
}
