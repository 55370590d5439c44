use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sugar_autodiff::ParamStore;
use sugar_core::contrastive::{pretrain, pretrain_supervised, write_metrics_jsonl, TrainConfig};
use sugar_core::encoder::{save_encoder_checkpoint, SkeletonEncoder};
use sugar_core::eval::{
    outcomes_csv, run_bridge_ablation, run_knowledge_ablation, run_token_length_sweep,
    write_records_jsonl, ProtocolKind, TsneConfig,
};
use sugar_core::knowledge::{
    encode_bank, generate_knowledge, read_embedding_bank, write_embedding_bank, ActionList,
    CachingGenerator, FixtureGenerator, GeneratorClient, HashedTextEncoder, HttpGenerator,
    KnowledgeConfig, KnowledgeDoc,
};
use sugar_core::manifest::{Manifest, SupervisionChannel};
use sugar_core::pipeline::{
    build_bank, finetune_stage, load_bundle, prepare_data, pretrain_stage, run_manifest_to_dir,
    save_bridge_checkpoint,
};
use sugar_core::skeleton::{
    generate_synthetic_dataset_with, read_skeleton_file, write_skeleton_file, GeneratorOptions,
    SkeletonGraph,
};
use sugar_core::toy::toy_action_specs;

#[derive(Parser)]
#[command(name = "sugar", about = "Skeleton action recognition toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorChoice {
    Fixture,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationChoice {
    Knowledge,
    Bridge,
    Tokens,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy dataset as a skeleton file.
    GenData {
        #[arg(long, default_value = "manifest.toml")]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build motion/visual knowledge and the embedding bank.
    BuildKnowledge {
        /// Action list file, one name per line.
        #[arg(long)]
        actions: PathBuf,
        #[arg(long, value_enum, default_value = "fixture")]
        generator: GeneratorChoice,
        #[arg(long)]
        out: PathBuf,
        /// Optional manifest for dimensions and thresholds.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// HTTP generator endpoint (http mode).
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Contrastive pretraining of the skeleton encoder.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Manifest supplying the training configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// LoRA instruction fine-tuning on top of a frozen encoder checkpoint.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory for bridge.ckpt, adapter.ckpt, and metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank actions for every sequence in a skeleton file.
    Predict {
        #[arg(long)]
        input: PathBuf,
        /// Bundle directory produced by `sugar run`.
        #[arg(long)]
        bundle: PathBuf,
        /// Action list supplied at inference time (defaults to the bundle's).
        #[arg(long)]
        actions: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long)]
        json: bool,
    },
    /// Full pipeline from one manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Evaluate under a named protocol.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// closed_set, zero_shot_unseen, or zero_shot_cross_list.
        #[arg(long)]
        protocol: String,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Controlled sweeps over knowledge channels, bridges, or token lengths.
    Ablate {
        #[arg(value_enum)]
        which: AblationChoice,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "64,16,4,1")]
        lengths: Vec<usize>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Pretrain and export 2D embeddings with silhouette headers.
    ExportTsne {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "embeddings.csv")]
        out: PathBuf,
        /// Export the untrained representation instead.
        #[arg(long)]
        init: bool,
    },
}

fn load_manifest_or_toy(path: Option<&Path>) -> Result<Manifest> {
    match path {
        Some(p) => Manifest::load(p).with_context(|| format!("loading manifest {p:?}")),
        None => Ok(Manifest::toy()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let graph = SkeletonGraph::toy();
            let specs = toy_action_specs();
            let options = GeneratorOptions {
                jitter_std: m.data.jitter_std,
                amp_jitter_std: m.data.amp_jitter_std,
                ..GeneratorOptions::default()
            };
            let data = generate_synthetic_dataset_with(
                &specs,
                m.data.samples_per_class,
                m.data.frames,
                &graph,
                m.data.seed,
                options,
            )?;
            write_skeleton_file(&data, &out)?;
            println!("wrote {} sequences to {}", data.len(), out.display());
        }
        Command::BuildKnowledge {
            actions,
            generator,
            out,
            manifest,
            endpoint,
        } => {
            let m = load_manifest_or_toy(manifest.as_deref())?;
            let actions = ActionList::read_file(&actions)?;
            std::fs::create_dir_all(&out)?;
            let inner: Box<dyn GeneratorClient> = match generator {
                GeneratorChoice::Fixture => Box::new(FixtureGenerator::bundled()),
                GeneratorChoice::Http => {
                    let endpoint = endpoint
                        .or(m.knowledge.endpoint.clone())
                        .context("http generator needs --endpoint")?;
                    let token = std::env::var("SUGAR_GENERATOR_TOKEN").ok();
                    Box::new(HttpGenerator::new(&endpoint, token))
                }
            };
            let generator_id = inner.id();
            let mut client = CachingGenerator::new(inner, &out.join("cache"))?;
            let config = KnowledgeConfig {
                dedup_threshold: m.knowledge.dedup_threshold,
                seed: m.data.seed,
                ..KnowledgeConfig::default()
            };
            let (motions, visuals) = generate_knowledge(&actions, &mut client, &config)?;
            let doc = KnowledgeDoc::build(&generator_id, &motions, &visuals);
            doc.write_file(out.join("knowledge.json"))?;
            let encoder =
                HashedTextEncoder::new(m.knowledge.embedding_dim, m.knowledge.encoder_seed);
            let bank = encode_bank(&motions, &visuals, &encoder)?;
            write_embedding_bank(&bank, out.join("bank.sugb"))?;
            println!(
                "built knowledge for {} actions ({} generator calls) -> {}",
                actions.len(),
                client.calls(),
                out.display()
            );
        }
        Command::Pretrain {
            data,
            bank,
            config,
            out,
        } => {
            let m = Manifest::load(&config)?;
            let dataset = read_skeleton_file(&data)?;
            let bank = read_embedding_bank(&bank)?;
            let graph = SkeletonGraph::toy();
            let mut store = ParamStore::new();
            let encoder_config = sugar_core::encoder::EncoderConfig {
                num_blocks: m.encoder.feature_dims.len(),
                feature_dims: m.encoder.feature_dims.clone(),
                temporal_kernel_sizes: m.encoder.kernels.clone(),
                activation: sugar_core::encoder::Activation::Relu,
                representation_dim: m.encoder.representation_dim,
                projection_dim: bank.dim(),
                seed: m.encoder.seed,
            };
            let encoder = SkeletonEncoder::new(&mut store, &graph, encoder_config)?;
            let cfg = TrainConfig {
                temperature: m.encoder.temperature,
                lr: m.encoder.lr,
                momentum: m.encoder.momentum,
                epochs: m.encoder.epochs,
                batch_size: m.encoder.batch_size,
                lr_decay_factor: m.encoder.lr_decay,
                seed: m.encoder.seed,
            };
            let metrics = match m.knowledge.channel {
                SupervisionChannel::None => pretrain_supervised(
                    &dataset,
                    bank.actions().len(),
                    &encoder,
                    &mut store,
                    &cfg,
                )?,
                channel => {
                    let kc = match channel {
                        SupervisionChannel::Both => sugar_core::knowledge::KnowledgeChannel::Both,
                        SupervisionChannel::Motion => {
                            sugar_core::knowledge::KnowledgeChannel::MotionOnly
                        }
                        SupervisionChannel::Visual => {
                            sugar_core::knowledge::KnowledgeChannel::VisualOnly
                        }
                        SupervisionChannel::None => unreachable!(),
                    };
                    pretrain(&dataset, &bank.class_sets(kc), &encoder, &mut store, &cfg)?
                }
            };
            save_encoder_checkpoint(&out, &encoder, &store)?;
            let metrics_path = out.with_extension("metrics.jsonl");
            write_metrics_jsonl(&metrics_path, &metrics)?;
            let last = metrics.last().context("no epochs")?;
            println!(
                "pretrained {} epochs: loss {:.4}, retrieval_top1 {:.3} -> {}",
                metrics.len(),
                last.loss,
                last.retrieval_top1,
                out.display()
            );
        }
        Command::Finetune {
            ckpt,
            data,
            manifest,
            out,
        } => {
            let m = load_manifest_or_toy(manifest.as_deref())?;
            std::fs::create_dir_all(&out)?;
            let graph = SkeletonGraph::toy();
            let mut enc_store = ParamStore::new();
            let encoder =
                sugar_core::encoder::load_encoder_checkpoint(&ckpt, &mut enc_store, &graph)?;
            let dataset = read_skeleton_file(&data)?;
            let mut prepared = prepare_data(&m)?;
            let values =
                sugar_core::pipeline::encode_values_all(&encoder, &enc_store, &dataset)?;
            // Labels in the file must index the manifest's training list.
            for seq in &dataset {
                let label = seq.label().context("finetune data must be labelled")? as usize;
                if label >= prepared.train_list.len() {
                    bail!(
                        "label {label} outside the {}-class train list",
                        prepared.train_list.len()
                    );
                }
            }
            prepared.train = dataset;
            let stage = finetune_stage(&m, &prepared, &values)?;
            save_bridge_checkpoint(&out.join("bridge.ckpt"), &stage.bridge, &stage.store)?;
            stage
                .adapter
                .save_checkpoint(out.join("adapter.ckpt"), &stage.store)?;
            let mut log = String::new();
            for e in &stage.metrics {
                log.push_str(&serde_json::to_string(e)?);
                log.push('\n');
            }
            std::fs::write(out.join("finetune_metrics.jsonl"), log)?;
            let last = stage.metrics.last().context("no epochs")?;
            println!(
                "fine-tuned {} epochs: loss {:.4}, train_top1 {:.3} -> {}",
                stage.metrics.len(),
                last.loss,
                last.train_top1,
                out.display()
            );
        }
        Command::Predict {
            input,
            bundle,
            actions,
            topk,
            json,
        } => {
            let mut bundle = load_bundle(&bundle)?;
            if let Some(path) = actions {
                bundle.inference_list = ActionList::read_file(&path)?.names().to_vec();
            }
            let sequences = read_skeleton_file(&input)?;
            for (i, seq) in sequences.iter().enumerate() {
                let prediction = bundle.predict(seq, topk)?;
                if json {
                    println!("{}", serde_json::to_string(&prediction)?);
                } else {
                    let names: Vec<&str> =
                        prediction.ranking.iter().map(|(n, _)| n.as_str()).collect();
                    println!(
                        "sequence {i}: {} | {}",
                        names.join(" > "),
                        prediction.description
                    );
                }
            }
        }
        Command::Run { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let output = run_manifest_to_dir(&m, &out)?;
            println!("protocol: {}", output.record.protocol_id);
            for (k, v) in &output.record.metrics {
                println!("  {k}: {v:.4}");
            }
            println!(
                "silhouette: {:.4} -> {:.4}",
                output.silhouette_init, output.silhouette_trained
            );
            println!("artifacts in {}", out.display());
        }
        Command::Eval {
            manifest,
            protocol,
            out,
        } => {
            let mut m = Manifest::load(&manifest)?;
            m.protocol.kind = match protocol.as_str() {
                "closed_set" => ProtocolKind::ClosedSet,
                "zero_shot_unseen" => ProtocolKind::ZeroShotUnseen,
                "zero_shot_cross_list" => ProtocolKind::ZeroShotCrossList,
                other => bail!("unknown protocol {other:?}"),
            };
            let output = run_manifest_to_dir(&m, &out)?;
            println!("{}", serde_json::to_string_pretty(&output.record)?);
        }
        Command::Ablate {
            which,
            manifest,
            seeds,
            lengths,
            out,
        } => {
            let m = Manifest::load(&manifest)?;
            std::fs::create_dir_all(&out)?;
            let outcomes = match which {
                AblationChoice::Knowledge => run_knowledge_ablation(&m, &seeds)?,
                AblationChoice::Bridge => run_bridge_ablation(&m, &seeds)?,
                AblationChoice::Tokens => run_token_length_sweep(&m, &lengths, &seeds)?,
            };
            let records: Vec<_> = outcomes.iter().map(|o| o.record.clone()).collect();
            write_records_jsonl(out.join("results.jsonl"), &records)?;
            std::fs::write(out.join("summary.csv"), outcomes_csv(&outcomes))?;
            print!("{}", outcomes_csv(&outcomes));
            println!("written to {}", out.display());
        }
        Command::ExportTsne {
            manifest,
            out,
            init,
        } => {
            let m = Manifest::load(&manifest)?;
            let data = prepare_data(&m)?;
            let (bank, _) = build_bank(&m, &data)?;
            let stage = pretrain_stage(&m, &data, &bank)?;
            let labels: Vec<usize> = data
                .train
                .iter()
                .map(|s| s.label().unwrap() as usize)
                .collect();
            let reps = if init {
                &stage.pooled_init
            } else {
                &stage.pooled_trained
            };
            let cfg = TsneConfig {
                seed: m.data.seed,
                ..TsneConfig::default()
            };
            sugar_core::eval::export_embeddings_2d(reps, &labels, &data.train_list, &out, &cfg)?;
            println!(
                "silhouette init {:.4}, trained {:.4}; coordinates -> {}",
                stage.silhouette_init,
                stage.silhouette_trained,
                out.display()
            );
        }
    }
    Ok(())
}
