//! Decoder-only toy language model with LoRA adapters: classifies skeleton
//! action tokens against a predefined action list under a fixed instruction
//! and emits a brief description. Token embeddings come from the same hashed
//! text space as the knowledge bank, standing in for pretrained semantics;
//! all base weights stay frozen during fine-tuning.

mod lora;
mod tokenizer;

pub use lora::{lora_forward, LoraAdapter, LoraConfig, PARAM_PREFIX as LORA_PARAM_PREFIX, TARGETS};
pub use tokenizer::{Tokenizer, ACT, BOS, EOS};

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sugar_autodiff::{Adam, Binding, GradAccum, ParamId, ParamStore, Tape, Var};

use crate::error::{Result, SugarError};
use crate::knowledge::HashedTextEncoder;
use crate::nn::{normal_init, residual_norm, Ffn, Fwd, LayerNormParams, Mha};
use crate::tqp::{ActionTokens, Bridge};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub lm_dim: usize,
    pub max_len: usize,
    /// Keys the hashed token-embedding space shared with the text encoder.
    pub embed_seed: u64,
    /// Keys the frozen base weights.
    pub seed: u64,
    /// Replace the tied output head with an all-zero matrix, making initial
    /// logits exactly uniform. Test instrumentation only.
    pub zero_head: bool,
}

impl LmConfig {
    pub fn toy() -> Self {
        Self {
            layers: 4,
            heads: 4,
            lm_dim: 64,
            max_len: 192,
            embed_seed: 13,
            seed: 29,
            zero_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.lm_dim == 0 || self.max_len == 0 {
            return Err(SugarError::InvalidConfig("zero-sized LM".into()));
        }
        if self.lm_dim % self.heads != 0 {
            return Err(SugarError::InvalidConfig(format!(
                "lm_dim {} not divisible by {} heads",
                self.lm_dim, self.heads
            )));
        }
        Ok(())
    }
}

struct LmLayer {
    attn: Mha,
    ln_attn: LayerNormParams,
    ffn: Ffn,
    ln_ffn: LayerNormParams,
}

pub const PARAM_PREFIX: &str = "lm.";

/// The frozen base recognizer.
pub struct ToyLm {
    config: LmConfig,
    tokenizer: Tokenizer,
    embed: ParamId,
    pos: ParamId,
    layers: Vec<LmLayer>,
    ln_final: LayerNormParams,
    zero_head: Option<ParamId>,
    param_ids: Vec<ParamId>,
}

impl ToyLm {
    /// Token embeddings are unit-normalized hashed text vectors, so words
    /// shared with the knowledge bank carry the same directions here; the
    /// output head is tied to the embedding table.
    pub fn new(store: &mut ParamStore, tokenizer: Tokenizer, config: LmConfig) -> Result<Self> {
        config.validate()?;
        let before = store.len();
        let d = config.lm_dim;
        let text_space = HashedTextEncoder::new(d, config.embed_seed);
        let vocab_size = tokenizer.vocab_size();
        let mut embed = Array2::<f64>::zeros((vocab_size, d));
        for (i, word) in tokenizer.vocab().iter().enumerate() {
            let mut v = text_space.token_vector(word);
            let norm = v.dot(&v).sqrt();
            if norm > 0.0 {
                v /= norm;
            }
            embed.row_mut(i).assign(&v);
        }
        let embed = store.add_frozen(&format!("{PARAM_PREFIX}embed"), embed.into_dyn());

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pos = store.add_frozen(
            &format!("{PARAM_PREFIX}pos"),
            normal_init(&mut rng, 0.02, &[config.max_len, d]),
        );
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{PARAM_PREFIX}layer{i}");
            layers.push(LmLayer {
                attn: Mha::new(store, &format!("{p}.attn"), d, config.heads, &mut rng)?,
                ln_attn: LayerNormParams::new(store, &format!("{p}.ln_attn"), d),
                ffn: Ffn::new(store, &format!("{p}.ffn"), d, 2 * d, &mut rng),
                ln_ffn: LayerNormParams::new(store, &format!("{p}.ln_ffn"), d),
            });
        }
        let ln_final = LayerNormParams::new(store, &format!("{PARAM_PREFIX}ln_final"), d);
        let zero_head = config.zero_head.then(|| {
            store.add_frozen(
                &format!("{PARAM_PREFIX}zero_head"),
                ArrayD::zeros(IxDyn(&[d, vocab_size])),
            )
        });
        let param_ids: Vec<ParamId> = (before..store.len()).map(ParamId).collect();
        // The whole base is frozen; only adapters and the bridge train.
        for &id in &param_ids {
            store.set_trainable(id, false);
        }
        Ok(Self {
            config,
            tokenizer,
            embed,
            pos,
            layers,
            ln_final,
            zero_head,
            param_ids,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// Run the decoder over an already-embedded sequence; returns logits
    /// [S, vocab].
    pub fn forward_embedded(
        &self,
        fwd: &mut Fwd,
        embedded: Var,
        adapter: Option<&LoraAdapter>,
    ) -> Result<Var> {
        let s_len = fwd.tape.value(embedded).shape()[0];
        if s_len > self.config.max_len {
            return Err(SugarError::Dimension(format!(
                "sequence length {s_len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let pos = fwd.param(self.pos);
        let pos_slice = fwd.tape.slice(pos, 0, 0, s_len)?;
        let mut x = fwd.tape.add(embedded, pos_slice)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let lora = adapter.map(|a| a.layer(i));
            let attn = layer.attn.forward(fwd, x, x, true, lora)?;
            x = residual_norm(fwd, &layer.ln_attn, x, attn)?;
            let ffn = layer.ffn.forward(fwd, x)?;
            x = residual_norm(fwd, &layer.ln_ffn, x, ffn)?;
        }
        let h = self.ln_final.forward(fwd, x)?;
        match self.zero_head {
            Some(head) => {
                let w = fwd.param(head);
                Ok(fwd.tape.matmul(h, w)?)
            }
            None => {
                let embed = fwd.param(self.embed);
                let unembed = fwd.tape.permute(embed, &[1, 0])?;
                Ok(fwd.tape.matmul(h, unembed)?)
            }
        }
    }
}

/// The fixed instruction. `<ACT>` is the single slot replaced by the action
/// tokens at input assembly; the action list rides along in the text.
pub fn build_instruction(action_list: &[String]) -> String {
    format!(
        "Given a sequence of action tokens {ACT} , please choose the top five most compatible actions from the action list : {} . Answer :",
        action_list.join(" , ")
    )
}

/// Target string for one labelled sample.
pub fn build_target(name: &str, brief: &str) -> String {
    format!("{name} . {brief}")
}

/// Every text the tokenizer must cover.
pub fn vocab_texts(
    action_names: &[String],
    corpus_sentences: &[String],
) -> Vec<String> {
    let mut texts = vec![build_instruction(action_names)];
    texts.extend(action_names.iter().cloned());
    texts.extend(corpus_sentences.iter().cloned());
    texts
}

/// Instruction plus action tokens plus an optional target, resolved to ids.
#[derive(Debug, Clone)]
pub struct AssembledLayout {
    pub pre_ids: Vec<usize>,
    pub post_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub act_len: usize,
    /// Index of the first target token in the assembled sequence.
    pub target_start: usize,
    pub total_len: usize,
}

pub fn layout(
    tokenizer: &Tokenizer,
    instruction: &str,
    target: Option<&str>,
    append_eos: bool,
    act_len: usize,
) -> Result<AssembledLayout> {
    let tokens: Vec<&str> = instruction.split_whitespace().collect();
    let slots = tokens.iter().filter(|&&t| t == ACT).count();
    if slots != 1 {
        return Err(SugarError::Precondition(format!(
            "instruction must contain exactly one {ACT} slot, found {slots}"
        )));
    }
    let slot = tokens.iter().position(|&t| t == ACT).unwrap();
    let mut pre_ids = vec![tokenizer.bos()];
    for t in &tokens[..slot] {
        pre_ids.push(tokenizer.id(t)?);
    }
    let mut post_ids = Vec::new();
    for t in &tokens[slot + 1..] {
        post_ids.push(tokenizer.id(t)?);
    }
    let mut target_ids = Vec::new();
    if let Some(target) = target {
        target_ids = tokenizer.encode(target)?;
        if target_ids.is_empty() {
            return Err(SugarError::Precondition("empty target".into()));
        }
        if append_eos {
            target_ids.push(tokenizer.eos());
        }
    }
    let target_start = pre_ids.len() + act_len + post_ids.len();
    let total_len = target_start + target_ids.len();
    Ok(AssembledLayout {
        pre_ids,
        post_ids,
        target_ids,
        act_len,
        target_start,
        total_len,
    })
}

/// Embed the assembled sequence on the tape: text tokens via the embedding
/// table, the `<ACT>` slot spliced with the action-token node.
fn embed_sequence(lm: &ToyLm, fwd: &mut Fwd, lay: &AssembledLayout, act: Var) -> Result<Var> {
    let embed = fwd.param(lm.embed);
    let pre = fwd.tape.gather(embed, &lay.pre_ids)?;
    let mut tail_ids = lay.post_ids.clone();
    tail_ids.extend_from_slice(&lay.target_ids);
    let tail = fwd.tape.gather(embed, &tail_ids)?;
    Ok(fwd.tape.concat(0, &[pre, act, tail])?)
}

/// One labelled instruction-tuning sample.
#[derive(Debug, Clone)]
pub struct InstructionSample {
    pub instruction: String,
    pub action_tokens: ActionTokens,
    pub target: String,
}

/// Token-embedding sequence for a fixed sample, positional encoding
/// included. [S, lm_dim].
pub fn assemble_input(
    lm: &ToyLm,
    store: &ParamStore,
    sample: &InstructionSample,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let mut binding = Binding::new(store);
    let mut fwd = Fwd::new(&mut tape, &mut binding, store);
    let act_len = sample.action_tokens.tokens.nrows();
    let lay = layout(
        lm.tokenizer(),
        &sample.instruction,
        Some(&sample.target),
        true,
        act_len,
    )?;
    let act = fwd
        .tape
        .constant(sample.action_tokens.tokens.clone().into_dyn());
    let embedded = embed_sequence(lm, &mut fwd, &lay, act)?;
    if lay.total_len > lm.config().max_len {
        return Err(SugarError::Dimension(format!(
            "sequence length {} exceeds max_len {}",
            lay.total_len,
            lm.config().max_len
        )));
    }
    let pos = fwd.param(lm.pos);
    let pos_slice = fwd.tape.slice(pos, 0, 0, lay.total_len)?;
    let with_pos = fwd.tape.add(embedded, pos_slice)?;
    Ok(tape
        .value(with_pos)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}

/// Frozen-encoder representation plus class label, the unit of fine-tuning.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub values: Array2<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Number of train samples scored for the per-epoch accuracy estimate.
    pub eval_subset: usize,
}

impl FinetuneConfig {
    pub fn toy() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            lr: 1e-3,
            seed: 19,
            eval_subset: 48,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_top1: f64,
    pub lr: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"finetune-epoch");
    hasher.update(seed.to_le_bytes());
    hasher.update((epoch as u64).to_le_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

/// Per-sample cross-entropy on the target positions only.
fn sample_loss(
    lm: &ToyLm,
    bridge: &Bridge,
    adapter: &LoraAdapter,
    fwd: &mut Fwd,
    instruction: &str,
    sample: &TrainSample,
    target: &str,
) -> Result<Var> {
    let values = fwd.tape.constant(sample.values.clone().into_dyn());
    let act = bridge.project_values(fwd, values)?;
    let act_len = fwd.tape.value(act).shape()[0];
    let lay = layout(lm.tokenizer(), instruction, Some(target), true, act_len)?;
    let embedded = embed_sequence(lm, fwd, &lay, act)?;
    let logits = lm.forward_embedded(fwd, embedded, Some(adapter))?;
    let rows = fwd
        .tape
        .slice(logits, 0, lay.target_start - 1, lay.target_ids.len())?;
    Ok(fwd.tape.cross_entropy(rows, &lay.target_ids)?)
}

/// Instruction fine-tuning: only the adapter and bridge parameters move;
/// the LM base (and anything else frozen in the store) stays bit-identical.
pub fn finetune(
    samples: &[TrainSample],
    action_list: &[String],
    briefs: &BTreeMap<String, String>,
    lm: &ToyLm,
    bridge: &Bridge,
    adapter: &LoraAdapter,
    store: &mut ParamStore,
    cfg: &FinetuneConfig,
) -> Result<Vec<FinetuneEpoch>> {
    if samples.is_empty() {
        return Err(SugarError::Dataset("no fine-tuning samples".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(SugarError::InvalidConfig("zero epochs or batch size".into()));
    }
    let instruction = build_instruction(action_list);
    let targets: Vec<String> = samples
        .iter()
        .map(|s| {
            let name = action_list.get(s.label).ok_or_else(|| {
                SugarError::Dataset(format!("label {} outside the action list", s.label))
            })?;
            let brief = briefs
                .get(name)
                .ok_or_else(|| SugarError::Lookup(format!("no brief for {name:?}")))?;
            Ok(build_target(name, brief))
        })
        .collect::<Result<_>>()?;

    let mut optimizer = Adam::new(cfg.lr, store);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut accum = GradAccum::new(store);
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let mut tape = Tape::new();
                let mut binding = Binding::new(store);
                let mut fwd = Fwd::new(&mut tape, &mut binding, store);
                let loss = sample_loss(
                    lm,
                    bridge,
                    adapter,
                    &mut fwd,
                    &instruction,
                    &samples[idx],
                    &targets[idx],
                )?;
                batch_loss += tape.scalar_value(loss);
                let grads = tape.backward(loss)?;
                accum.absorb(&binding, &grads);
            }
            accum.scale(1.0 / chunk.len() as f64);
            optimizer.step(store, &accum);
            epoch_loss += batch_loss / chunk.len() as f64;
            steps += 1;
        }

        let subset = cfg.eval_subset.min(samples.len());
        let mut hits = 0usize;
        for sample in &samples[..subset] {
            let tokens = bridge.project(store, &sample.values)?;
            let ranking = rank_classes(lm, store, Some(adapter), &tokens, action_list)?;
            if ranking[0].0 == sample.label {
                hits += 1;
            }
        }
        metrics.push(FinetuneEpoch {
            epoch,
            loss: if steps > 0 { epoch_loss / steps as f64 } else { f64::NAN },
            train_top1: hits as f64 / subset.max(1) as f64,
            lr: cfg.lr,
        });
    }
    Ok(metrics)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Score every candidate class by teacher forcing its name tokens and
/// averaging their log-probabilities; returns (class index, score) sorted
/// best first. Deterministic: ties break toward the lower class index.
pub fn rank_classes(
    lm: &ToyLm,
    store: &ParamStore,
    adapter: Option<&LoraAdapter>,
    tokens: &ActionTokens,
    action_list: &[String],
) -> Result<Vec<(usize, f64)>> {
    if action_list.is_empty() {
        return Err(SugarError::InvalidConfig("empty action list".into()));
    }
    let instruction = build_instruction(action_list);
    let mut scored = Vec::with_capacity(action_list.len());
    for (c, name) in action_list.iter().enumerate() {
        let mut tape = Tape::new();
        let mut binding = Binding::new(store);
        let mut fwd = Fwd::new(&mut tape, &mut binding, store);
        let act = fwd.tape.constant(tokens.tokens.clone().into_dyn());
        let lay = layout(
            lm.tokenizer(),
            &instruction,
            Some(name),
            false,
            tokens.tokens.nrows(),
        )?;
        let embedded = embed_sequence(lm, &mut fwd, &lay, act)?;
        let logits = lm.forward_embedded(&mut fwd, embedded, adapter)?;
        let logits_value = tape.value(logits);
        let mut total = 0.0;
        for (k, &token_id) in lay.target_ids.iter().enumerate() {
            let row: Vec<f64> = logits_value
                .index_axis(ndarray::Axis(0), lay.target_start - 1 + k)
                .iter()
                .cloned()
                .collect();
            total += log_softmax_row(&row)[token_id];
        }
        scored.push((c, total / lay.target_ids.len() as f64));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored)
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    /// Class names best-first with their scores, truncated to top_k.
    pub ranking: Vec<(String, f64)>,
    /// Greedy continuation decoded after the top-1 class name.
    pub description: String,
}

/// Constrained prediction: the class slot can only rank members of the
/// action list; the description is decoded greedily conditioned on the
/// top-1 name.
pub fn predict(
    lm: &ToyLm,
    store: &ParamStore,
    adapter: Option<&LoraAdapter>,
    tokens: &ActionTokens,
    action_list: &[String],
    top_k: usize,
) -> Result<Prediction> {
    if action_list.is_empty() {
        return Err(SugarError::InvalidConfig("empty action list".into()));
    }
    if top_k == 0 || top_k > action_list.len() {
        return Err(SugarError::Precondition(format!(
            "top_k {top_k} outside 1..={}",
            action_list.len()
        )));
    }
    let scored = rank_classes(lm, store, adapter, tokens, action_list)?;
    let ranking: Vec<(String, f64)> = scored
        .iter()
        .take(top_k)
        .map(|&(c, s)| (action_list[c].clone(), s))
        .collect();

    // Greedy description conditioned on "<name> .".
    let instruction = build_instruction(action_list);
    let top_name = &ranking[0].0;
    let mut generated: Vec<usize> = lm.tokenizer().encode(&format!("{top_name} ."))?;
    let banned = [lm.tokenizer().bos(), lm.tokenizer().act()];
    for _ in 0..16 {
        let target_text = lm.tokenizer().decode(&generated);
        let mut tape = Tape::new();
        let mut binding = Binding::new(store);
        let mut fwd = Fwd::new(&mut tape, &mut binding, store);
        let act = fwd.tape.constant(tokens.tokens.clone().into_dyn());
        let lay = layout(
            lm.tokenizer(),
            &instruction,
            Some(&target_text),
            false,
            tokens.tokens.nrows(),
        )?;
        let embedded = embed_sequence(lm, &mut fwd, &lay, act)?;
        let logits = lm.forward_embedded(&mut fwd, embedded, adapter)?;
        let last = tape
            .value(logits)
            .index_axis(ndarray::Axis(0), lay.total_len - 1)
            .to_owned();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &v) in last.iter().enumerate() {
            if banned.contains(&i) {
                continue;
            }
            if v > best.1 {
                best = (i, v);
            }
        }
        if best.0 == lm.tokenizer().eos() {
            break;
        }
        generated.push(best.0);
    }
    let name_len = lm.tokenizer().encode(top_name)?.len() + 1;
    let description = lm.tokenizer().decode(&generated[name_len.min(generated.len())..]);
    Ok(Prediction {
        ranking,
        description,
    })
}

/// Helper carrying what finetune and predict need besides the LM.
pub struct BriefSource {
    pub briefs: BTreeMap<String, String>,
}

impl BriefSource {
    pub fn from_fixture(generator: &crate::knowledge::FixtureGenerator, names: &[String]) -> Result<Self> {
        let mut briefs = BTreeMap::new();
        for name in names {
            let brief = generator.brief(name).ok_or_else(|| {
                SugarError::Lookup(format!("fixture has no brief for {name:?}"))
            })?;
            briefs.insert(name.clone(), brief.to_string());
        }
        Ok(Self { briefs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tqp::{BridgeKind, TqpConfig};
    use rand::Rng;
    use sugar_autodiff::check_gradients;

    fn tiny_vocab_texts(names: &[String]) -> Vec<String> {
        vocab_texts(
            names,
            &[
                "lifts a cup high".to_string(),
                "spins a wheel fast".to_string(),
            ],
        )
    }

    fn tiny_lm_config() -> LmConfig {
        LmConfig {
            layers: 1,
            heads: 2,
            lm_dim: 8,
            max_len: 64,
            embed_seed: 3,
            seed: 4,
            zero_head: false,
        }
    }

    fn tiny_bridge_config() -> TqpConfig {
        TqpConfig {
            segment_length: 4,
            query_length: 2,
            model_dim: 6,
            qformer_layers: 1,
            heads: 2,
            lm_dim: 8,
            seed: 6,
        }
    }

    fn tiny_names() -> Vec<String> {
        vec!["lift cup".to_string(), "spin wheel".to_string()]
    }

    fn tiny_setup() -> (ParamStore, ToyLm, Bridge, LoraAdapter, Vec<String>) {
        let names = tiny_names();
        let tokenizer = Tokenizer::build(tiny_vocab_texts(&names).iter().map(String::as_str));
        let mut store = ParamStore::new();
        let lm = ToyLm::new(&mut store, tokenizer, tiny_lm_config()).unwrap();
        let bridge = Bridge::new(&mut store, BridgeKind::Tqp, tiny_bridge_config()).unwrap();
        let adapter = LoraAdapter::new(
            &mut store,
            &lm,
            LoraConfig {
                rank: 2,
                alpha: 4.0,
                seed: 10,
            },
        )
        .unwrap();
        (store, lm, bridge, adapter, names)
    }

    fn random_values(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, d), |_| rng.random::<f64>() - 0.5)
    }

    fn tiny_samples(n: usize, bridge_dim: usize) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                // Two well-separated synthetic representation patterns.
                let mut values = random_values(8, bridge_dim, 100 + i as u64);
                for v in values.column_mut(label).iter_mut() {
                    *v += 2.0;
                }
                TrainSample { values, label }
            })
            .collect()
    }

    #[test]
    fn assembled_length_arithmetic() {
        let (store, lm, _, _, names) = tiny_setup();
        let instruction = build_instruction(&names);
        let instr_tokens = instruction.split_whitespace().count() - 1; // minus <ACT>
        let sample = InstructionSample {
            instruction: instruction.clone(),
            action_tokens: ActionTokens {
                tokens: random_values(5, 8, 1),
            },
            target: "lift cup . lifts a cup high".to_string(),
        };
        let embedded = assemble_input(&lm, &store, &sample).unwrap();
        // BOS + instruction + act tokens + target + EOS.
        assert_eq!(embedded.nrows(), 1 + instr_tokens + 5 + 7 + 1);
        assert_eq!(embedded.ncols(), 8);
    }

    #[test]
    fn splice_isolation_text_positions_identical() {
        let (store, lm, _, _, names) = tiny_setup();
        let instruction = build_instruction(&names);
        let mk = |seed| InstructionSample {
            instruction: instruction.clone(),
            action_tokens: ActionTokens {
                tokens: random_values(4, 8, seed),
            },
            target: "lift cup".to_string(),
        };
        let a = assemble_input(&lm, &store, &mk(1)).unwrap();
        let b = assemble_input(&lm, &store, &mk(2)).unwrap();
        let lay = layout(lm.tokenizer(), &instruction, Some("lift cup"), true, 4).unwrap();
        let act_start = lay.pre_ids.len();
        for row in 0..a.nrows() {
            let inside_act = row >= act_start && row < act_start + 4;
            let equal = a.row(row) == b.row(row);
            assert_eq!(!inside_act, equal, "row {row}");
        }
    }

    #[test]
    fn instruction_round_trips_through_tokenizer() {
        let (_, lm, _, _, names) = tiny_setup();
        let instruction = build_instruction(&names);
        let ids = lm.tokenizer().encode(&instruction).unwrap();
        assert_eq!(lm.tokenizer().decode(&ids), instruction);
    }

    #[test]
    fn unknown_token_in_target_is_vocab_error() {
        let (_, lm, _, _, names) = tiny_setup();
        let instruction = build_instruction(&names);
        assert!(matches!(
            layout(lm.tokenizer(), &instruction, Some("zzz"), true, 2),
            Err(SugarError::Vocab(_))
        ));
    }

    #[test]
    fn zero_head_gives_exact_uniform_loss() {
        let names = tiny_names();
        let tokenizer = Tokenizer::build(tiny_vocab_texts(&names).iter().map(String::as_str));
        let vocab_size = tokenizer.vocab_size();
        let mut store = ParamStore::new();
        let mut config = tiny_lm_config();
        config.zero_head = true;
        let lm = ToyLm::new(&mut store, tokenizer, config).unwrap();
        let bridge = Bridge::new(&mut store, BridgeKind::Tqp, tiny_bridge_config()).unwrap();
        let adapter = LoraAdapter::new(
            &mut store,
            &lm,
            LoraConfig {
                rank: 2,
                alpha: 4.0,
                seed: 10,
            },
        )
        .unwrap();
        let sample = TrainSample {
            values: random_values(8, 6, 3),
            label: 0,
        };
        let mut tape = Tape::new();
        let mut binding = Binding::new(&store);
        let mut fwd = Fwd::new(&mut tape, &mut binding, &store);
        let loss = sample_loss(
            &lm,
            &bridge,
            &adapter,
            &mut fwd,
            &build_instruction(&names),
            &sample,
            "lift cup . lifts a cup high",
        )
        .unwrap();
        let expected = (vocab_size as f64).ln();
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn lora_zero_init_leaves_predictions_identical() {
        let (store, lm, bridge, adapter, names) = tiny_setup();
        let tokens = bridge.project(&store, &random_values(9, 6, 8)).unwrap();
        let with = predict(&lm, &store, Some(&adapter), &tokens, &names, 2).unwrap();
        let without = predict(&lm, &store, None, &tokens, &names, 2).unwrap();
        assert_eq!(with.ranking, without.ranking);
        assert_eq!(with.description, without.description);
    }

    #[test]
    fn finetune_freezes_base_and_reduces_loss() {
        let (mut store, lm, bridge, adapter, names) = tiny_setup();
        let briefs: BTreeMap<String, String> = [
            ("lift cup".to_string(), "lifts a cup high".to_string()),
            ("spin wheel".to_string(), "spins a wheel fast".to_string()),
        ]
        .into();
        let samples = tiny_samples(12, 6);
        let base_before: Vec<_> = lm
            .param_ids()
            .iter()
            .map(|&id| store.value(id).clone())
            .collect();
        let cfg = FinetuneConfig {
            epochs: 6,
            batch_size: 4,
            lr: 2e-3,
            seed: 5,
            eval_subset: 12,
        };
        let metrics = finetune(
            &samples, &names, &briefs, &lm, &bridge, &adapter, &mut store, &cfg,
        )
        .unwrap();
        assert!(metrics.last().unwrap().loss < metrics.first().unwrap().loss);
        for (&id, old) in lm.param_ids().iter().zip(base_before.iter()) {
            assert_eq!(store.value(id), old, "base weight {} moved", store.name(id));
        }
        // Adapters did move.
        let moved = adapter
            .param_ids()
            .iter()
            .any(|&id| store.value(id).iter().any(|&v| v != 0.0));
        assert!(moved);
    }

    #[test]
    fn ranking_contract_and_forced_choice() {
        let (store, lm, bridge, _, names) = tiny_setup();
        let tokens = bridge.project(&store, &random_values(8, 6, 2)).unwrap();
        let single = vec![names[0].clone()];
        let pred = predict(&lm, &store, None, &tokens, &single, 1).unwrap();
        assert_eq!(pred.ranking.len(), 1);
        assert_eq!(pred.ranking[0].0, names[0]);

        let both = predict(&lm, &store, None, &tokens, &names, 2).unwrap();
        assert_eq!(both.ranking.len(), 2);
        assert_ne!(both.ranking[0].0, both.ranking[1].0);

        assert!(matches!(
            predict(&lm, &store, None, &tokens, &names, 3),
            Err(SugarError::Precondition(_))
        ));
        assert!(matches!(
            predict(&lm, &store, None, &tokens, &[], 1),
            Err(SugarError::InvalidConfig(_))
        ));
    }

    #[test]
    fn class_scores_match_per_candidate_oracle() {
        // Independent scoring route: plain log-softmax over per-candidate
        // logits extracted from a fresh forward pass.
        let (store, lm, bridge, adapter, names) = tiny_setup();
        let tokens = bridge.project(&store, &random_values(8, 6, 4)).unwrap();
        let got = rank_classes(&lm, &store, Some(&adapter), &tokens, &names).unwrap();

        let instruction = build_instruction(&names);
        for &(c, score) in &got {
            let name = &names[c];
            let mut tape = Tape::new();
            let mut binding = Binding::new(&store);
            let mut fwd = Fwd::new(&mut tape, &mut binding, &store);
            let act = fwd.tape.constant(tokens.tokens.clone().into_dyn());
            let lay = layout(lm.tokenizer(), &instruction, Some(name), false, 2).unwrap();
            let embedded = embed_sequence(&lm, &mut fwd, &lay, act).unwrap();
            let logits = lm
                .forward_embedded(&mut fwd, embedded, Some(&adapter))
                .unwrap();
            let logits = tape.value(logits);
            let mut expected = 0.0;
            for (k, &tid) in lay.target_ids.iter().enumerate() {
                let row: Vec<f64> = logits
                    .index_axis(ndarray::Axis(0), lay.target_start - 1 + k)
                    .iter()
                    .cloned()
                    .collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                expected += row[tid] - lse;
            }
            expected /= lay.target_ids.len() as f64;
            assert!(
                (score - expected).abs() < 1e-8,
                "class {c}: {score} vs {expected}"
            );
        }
    }

    #[test]
    fn adapter_and_bridge_gradients_match_finite_differences() {
        let (mut store, lm, bridge, adapter, names) = tiny_setup();
        let sample = TrainSample {
            values: random_values(8, 6, 31),
            label: 1,
        };
        let target = "spin wheel . spins a wheel fast".to_string();
        let instruction = build_instruction(&names);
        let mut ids = adapter.param_ids().to_vec();
        ids.extend_from_slice(bridge.param_ids());
        assert!(store.num_elements(&ids) <= 5000);
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        for &id in &ids {
            store
                .value_mut(id)
                .mapv_inplace(|v| v + 0.03 * (rng.random::<f64>() - 0.5));
        }
        let report = check_gradients(
            &mut store,
            &ids,
            1e-5,
            move |store, tape, binding| -> Result<Var> {
                let mut fwd = Fwd::new(tape, binding, store);
                sample_loss(&lm, &bridge, &adapter, &mut fwd, &instruction, &sample, &target)
            },
        )
        .unwrap();
        report.assert_below(1e-4);
    }

    #[test]
    fn adapter_checkpoint_round_trip() {
        let (mut store, _lm, _bridge, adapter, _names) = tiny_setup();
        // Make adapter values non-trivial.
        for &id in adapter.param_ids() {
            store.value_mut(id).fill(0.25);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.ckpt");
        adapter.save_checkpoint(&path, &store).unwrap();

        for &id in adapter.param_ids() {
            store.value_mut(id).fill(0.0);
        }
        let config = LoraAdapter::load_checkpoint(&path, &mut store).unwrap();
        assert_eq!(config.rank, 2);
        for &id in adapter.param_ids() {
            assert!(store.value(id).iter().all(|&v| v == 0.25));
        }
    }
}
