//! Per-action text supervision: motion descriptions decomposed into six body
//! parts, dissimilarity-filtered visual descriptions, and their embeddings.

mod encoder;
mod generator;

pub use encoder::{HashedTextEncoder, TextEncoder};
pub use generator::{
    CachingGenerator, FixtureGenerator, GeneratorClient, HttpGenerator, HttpResponse,
    HttpTransport, UreqTransport,
};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array1;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SugarError};

pub const BODY_PARTS: [&str; 6] = ["head", "hand", "arm", "hip", "leg", "foot"];

/// Ordered list of unique action-class names; the index is the class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionList {
    names: Vec<String>,
}

impl ActionList {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(SugarError::InvalidConfig("empty action list".into()));
        }
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(SugarError::InvalidConfig("blank action name".into()));
            }
            if names[..i].contains(name) {
                return Err(SugarError::InvalidConfig(format!(
                    "duplicate action name {name:?}"
                )));
            }
        }
        Ok(Self { names })
    }

    pub fn toy() -> Self {
        Self::new(crate::toy::TOY_CLASSES.iter().map(|s| s.to_string()).collect())
            .expect("toy list is valid")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    /// One name per line.
    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        Ok(std::fs::write(path, self.names.join("\n") + "\n")?)
    }
}

/// Six body-part sentences describing one action's movement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionDescription {
    pub action: String,
    pub parts: BTreeMap<String, String>,
}

impl MotionDescription {
    pub fn validate(&self) -> Result<()> {
        for part in BODY_PARTS {
            match self.parts.get(part) {
                Some(sentence) if !sentence.trim().is_empty() => {}
                _ => {
                    return Err(SugarError::Precondition(format!(
                        "motion description for {:?} is missing part {part}",
                        self.action
                    )))
                }
            }
        }
        Ok(())
    }

    /// The six sentences joined in canonical part order.
    pub fn joined(&self) -> String {
        BODY_PARTS
            .iter()
            .map(|p| self.parts[*p].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Scene descriptions retained after frame dedup, with their frame ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualDescriptionSet {
    pub action: String,
    pub descriptions: Vec<String>,
    pub source_frame_ids: Vec<usize>,
}

/// Deterministic motion-description prompt for one action.
pub fn build_motion_prompt(actions: &ActionList, action: &str) -> Result<String> {
    if !actions.contains(action) {
        return Err(SugarError::Lookup(format!(
            "action {action:?} is not in the action list"
        )));
    }
    Ok(format!(
        "You are annotating human actions for a motion capture dataset .\n\
         Resolve the action into the movements of six body parts : head , hand , arm , hip , leg , foot .\n\
         Reply with one line per part formatted as part : movement sentence .\n\
         Only describe movements that belong to the action .\n\
         Action : {action}"
    ))
}

/// Deterministic visual-description prompt for one frame of one action.
pub fn build_visual_prompt(actions: &ActionList, action: &str, frame_id: usize) -> Result<String> {
    if !actions.contains(action) {
        return Err(SugarError::Lookup(format!(
            "action {action:?} is not in the action list"
        )));
    }
    Ok(format!(
        "Provide a description of the given image that correctly matches the action .\n\
         Only describe the scene related to the given action .\n\
         Do not provide any text or explanations unrelated to the action .\n\
         Action : {action}\n\
         Frame : {frame_id}"
    ))
}

/// Greedy dissimilarity filter over frame embeddings, in input order. A
/// frame is kept iff its maximum cosine similarity to every previously kept
/// frame is below the threshold; frame 0 is always kept.
pub fn dedup_frames(frame_embeddings: &[Array1<f64>], threshold: f64) -> Result<Vec<usize>> {
    if frame_embeddings.is_empty() {
        return Err(SugarError::Precondition("no frame embeddings".into()));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(SugarError::InvalidConfig(format!(
            "dedup threshold {threshold} outside (0, 1)"
        )));
    }
    for (i, e) in frame_embeddings.iter().enumerate() {
        let norm = e.dot(e).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(SugarError::Precondition(format!(
                "frame embedding {i} has norm {norm}, expected unit"
            )));
        }
    }
    let mut kept = vec![0usize];
    for i in 1..frame_embeddings.len() {
        let max_sim = kept
            .iter()
            .map(|&k| frame_embeddings[i].dot(&frame_embeddings[k]))
            .fold(f64::NEG_INFINITY, f64::max);
        if max_sim < threshold {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Settings for knowledge construction.
#[derive(Debug, Clone)]
pub struct KnowledgeConfig {
    pub dedup_threshold: f64,
    /// Synthetic frames rendered per action before dedup.
    pub frames_per_action: usize,
    /// Distinct scene clusters among those frames.
    pub scene_clusters: usize,
    pub frame_embedding_dim: usize,
    pub seed: u64,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self {
            dedup_threshold: 0.85,
            frames_per_action: 12,
            scene_clusters: 4,
            frame_embedding_dim: 64,
            seed: 17,
        }
    }
}

fn derived_rng(tag: &str, seed: u64, salt: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    hasher.update(seed.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn unit(mut v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v /= norm;
    }
    v
}

/// Synthetic stand-in for CLIP frame features: a handful of distinct scene
/// clusters, each repeated with small perturbations, so dedup has real
/// duplicates to drop. Frames cycle cluster-major: 0..clusters are the
/// distinct scenes, then near-copies follow.
pub fn synthetic_frame_embeddings(action: &str, config: &KnowledgeConfig) -> Vec<Array1<f64>> {
    let mut anchors = Vec::with_capacity(config.scene_clusters);
    for cluster in 0..config.scene_clusters {
        let mut rng = derived_rng("frame-cluster", config.seed, &format!("{action}/{cluster}"));
        anchors.push(unit(Array1::from_shape_fn(
            config.frame_embedding_dim,
            |_| gaussian(&mut rng),
        )));
    }
    (0..config.frames_per_action)
        .map(|frame| {
            let anchor = &anchors[frame % config.scene_clusters];
            if frame < config.scene_clusters {
                anchor.clone()
            } else {
                let mut rng =
                    derived_rng("frame-noise", config.seed, &format!("{action}/{frame}"));
                let noise =
                    Array1::from_shape_fn(config.frame_embedding_dim, |_| 0.05 * gaussian(&mut rng));
                unit(anchor + &noise)
            }
        })
        .collect()
}

/// Build motion and visual knowledge for every action. Failures are
/// collected; if any action cannot be completed the whole call reports the
/// missing actions.
pub fn generate_knowledge(
    actions: &ActionList,
    generator: &mut dyn GeneratorClient,
    config: &KnowledgeConfig,
) -> Result<(Vec<MotionDescription>, Vec<VisualDescriptionSet>)> {
    let mut motions = Vec::with_capacity(actions.len());
    let mut visuals = Vec::with_capacity(actions.len());
    let mut missing = Vec::new();
    for action in actions.names() {
        match build_action_knowledge(actions, generator, config, action) {
            Ok((motion, visual)) => {
                motions.push(motion);
                visuals.push(visual);
            }
            Err(_) => missing.push(action.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(SugarError::PartialResult(missing));
    }
    Ok((motions, visuals))
}

fn build_action_knowledge(
    actions: &ActionList,
    generator: &mut dyn GeneratorClient,
    config: &KnowledgeConfig,
    action: &str,
) -> Result<(MotionDescription, VisualDescriptionSet)> {
    let response = generator.generate(&build_motion_prompt(actions, action)?)?;
    let mut parts = BTreeMap::new();
    for line in response.lines() {
        if let Some((part, sentence)) = line.split_once(':') {
            parts.insert(part.trim().to_string(), sentence.trim().to_string());
        }
    }
    let motion = MotionDescription {
        action: action.to_string(),
        parts,
    };
    motion.validate()?;

    let embeddings = synthetic_frame_embeddings(action, config);
    let retained = dedup_frames(&embeddings, config.dedup_threshold)?;
    let mut descriptions = Vec::with_capacity(retained.len());
    for &frame_id in &retained {
        let sentence = generator.generate(&build_visual_prompt(actions, action, frame_id)?)?;
        let sentence = sentence.trim().to_string();
        if sentence.is_empty() {
            return Err(SugarError::Generator(format!(
                "empty visual description for {action:?} frame {frame_id}"
            )));
        }
        descriptions.push(sentence);
    }
    Ok((
        motion,
        VisualDescriptionSet {
            action: action.to_string(),
            descriptions,
            source_frame_ids: retained,
        },
    ))
}

/// Human-readable knowledge document persisted beside the embedding bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub generator: String,
    pub records: Vec<KnowledgeRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub name: String,
    pub parts: BTreeMap<String, String>,
    pub visual: Vec<String>,
    pub source_frame_ids: Vec<usize>,
}

impl KnowledgeDoc {
    pub fn build(
        generator_id: &str,
        motions: &[MotionDescription],
        visuals: &[VisualDescriptionSet],
    ) -> Self {
        let records = motions
            .iter()
            .zip(visuals)
            .map(|(m, v)| KnowledgeRecord {
                name: m.action.clone(),
                parts: m.parts.clone(),
                visual: v.descriptions.clone(),
                source_frame_ids: v.source_frame_ids.clone(),
            })
            .collect();
        Self {
            generator: generator_id.to_string(),
            records,
        }
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Which supervision channel of the bank to expose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeChannel {
    Both,
    MotionOnly,
    VisualOnly,
}

/// Encoded text vectors per action: one motion vector and one vector per
/// retained visual description, all unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    actions: Vec<String>,
    motion: Vec<Array1<f64>>,
    visual: Vec<Vec<Array1<f64>>>,
}

impl EmbeddingBank {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|n| n == name)
    }

    pub fn motion(&self, idx: usize) -> &Array1<f64> {
        &self.motion[idx]
    }

    pub fn visual(&self, idx: usize) -> &[Array1<f64>] {
        &self.visual[idx]
    }

    /// Combined target set t = {m} ∪ {v_i}, motion first.
    pub fn combined(&self, idx: usize) -> Vec<Array1<f64>> {
        let mut out = vec![self.motion[idx].clone()];
        out.extend(self.visual[idx].iter().cloned());
        out
    }

    /// Per-action target sets for one supervision channel.
    pub fn class_sets(&self, channel: KnowledgeChannel) -> Vec<Vec<Array1<f64>>> {
        (0..self.actions.len())
            .map(|i| match channel {
                KnowledgeChannel::Both => self.combined(i),
                KnowledgeChannel::MotionOnly => vec![self.motion[i].clone()],
                KnowledgeChannel::VisualOnly => self.visual[i].clone(),
            })
            .collect()
    }

    /// Restrict to a subset of actions, preserving their order.
    pub fn subset(&self, names: &[String]) -> Result<EmbeddingBank> {
        let mut actions = Vec::new();
        let mut motion = Vec::new();
        let mut visual = Vec::new();
        for name in names {
            let idx = self.action_index(name).ok_or_else(|| {
                SugarError::Lookup(format!("bank has no action {name:?}"))
            })?;
            actions.push(name.clone());
            motion.push(self.motion[idx].clone());
            visual.push(self.visual[idx].clone());
        }
        Ok(EmbeddingBank {
            dim: self.dim,
            actions,
            motion,
            visual,
        })
    }
}

/// Encode motion and visual descriptions into an [`EmbeddingBank`].
pub fn encode_bank(
    motions: &[MotionDescription],
    visuals: &[VisualDescriptionSet],
    encoder: &dyn TextEncoder,
) -> Result<EmbeddingBank> {
    if motions.len() != visuals.len() {
        return Err(SugarError::Dimension(format!(
            "{} motion descriptions vs {} visual sets",
            motions.len(),
            visuals.len()
        )));
    }
    let mut actions = Vec::with_capacity(motions.len());
    let mut motion = Vec::with_capacity(motions.len());
    let mut visual = Vec::with_capacity(motions.len());
    for (m, v) in motions.iter().zip(visuals) {
        m.validate()?;
        if v.descriptions.is_empty() {
            return Err(SugarError::Encoding(format!(
                "no visual descriptions for {:?}",
                m.action
            )));
        }
        actions.push(m.action.clone());
        motion.push(encoder.encode(&m.joined())?);
        visual.push(
            v.descriptions
                .iter()
                .map(|d| encoder.encode(d))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(EmbeddingBank {
        dim: encoder.dim(),
        actions,
        motion,
        visual,
    })
}

const BANK_MAGIC: &[u8; 4] = b"SUGB";
const BANK_VERSION: u32 = 1;

/// Byte layout: magic "SUGB", version u32 LE, d_t u32 LE, then per action:
/// name length u32 LE, UTF-8 name, vector count u32 LE, count*d_t f32 LE
/// values with the motion vector first. Actions run to end of file.
pub fn write_embedding_bank<P: AsRef<Path>>(bank: &EmbeddingBank, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BANK_MAGIC)?;
    w.write_all(&BANK_VERSION.to_le_bytes())?;
    w.write_all(&(bank.dim as u32).to_le_bytes())?;
    for (idx, name) in bank.actions.iter().enumerate() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let vectors = bank.combined(idx);
        w.write_all(&(vectors.len() as u32).to_le_bytes())?;
        for vector in vectors {
            for v in vector.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_bank<P: AsRef<Path>>(path: P) -> Result<EmbeddingBank> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;
    let mut offset = 0usize;
    let take = |offset: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *offset + n > data.len() {
            return Err(SugarError::Format {
                offset: *offset as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let slice = &data[*offset..*offset + n];
        *offset += n;
        Ok(slice)
    };
    let magic = take(&mut offset, 4, "magic")?;
    if magic != BANK_MAGIC {
        return Err(SugarError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {BANK_MAGIC:?}"),
        });
    }
    let version = u32::from_le_bytes(take(&mut offset, 4, "version")?.try_into().unwrap());
    if version != BANK_VERSION {
        return Err(SugarError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let dim = u32::from_le_bytes(take(&mut offset, 4, "dimension")?.try_into().unwrap()) as usize;
    let mut actions = Vec::new();
    let mut motion = Vec::new();
    let mut visual = Vec::new();
    while offset < data.len() {
        let name_len =
            u32::from_le_bytes(take(&mut offset, 4, "name length")?.try_into().unwrap()) as usize;
        let name_offset = offset;
        let name = String::from_utf8(take(&mut offset, name_len, "name")?.to_vec()).map_err(
            |_| SugarError::Format {
                offset: name_offset as u64,
                msg: "action name is not valid UTF-8".into(),
            },
        )?;
        let count =
            u32::from_le_bytes(take(&mut offset, 4, "vector count")?.try_into().unwrap()) as usize;
        if count == 0 {
            return Err(SugarError::Format {
                offset: offset as u64 - 4,
                msg: format!("action {name:?} has no vectors"),
            });
        }
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = take(&mut offset, dim * 4, "vector values")?;
            let vector = Array1::from_iter(raw.chunks_exact(4).map(|chunk| {
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64
            }));
            vectors.push(vector);
        }
        actions.push(name);
        let mut it = vectors.into_iter();
        motion.push(it.next().unwrap());
        visual.push(it.collect());
    }
    Ok(EmbeddingBank {
        dim,
        actions,
        motion,
        visual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_knowledge() -> (Vec<MotionDescription>, Vec<VisualDescriptionSet>) {
        let actions = ActionList::toy();
        let mut generator = FixtureGenerator::bundled();
        generate_knowledge(&actions, &mut generator, &KnowledgeConfig::default()).unwrap()
    }

    #[test]
    fn motion_prompt_contains_action_and_parts() {
        let actions = ActionList::toy();
        let prompt = build_motion_prompt(&actions, "drink from bottle").unwrap();
        assert!(prompt.contains("drink from bottle"));
        for part in BODY_PARTS {
            assert!(prompt.contains(part), "prompt missing {part}");
        }
    }

    #[test]
    fn unknown_action_is_lookup_error() {
        let actions = ActionList::toy();
        assert!(matches!(
            build_motion_prompt(&actions, ""),
            Err(SugarError::Lookup(_))
        ));
        assert!(matches!(
            build_visual_prompt(&actions, "juggle", 0),
            Err(SugarError::Lookup(_))
        ));
    }

    #[test]
    fn prompts_differ_only_in_action_slot() {
        let actions = ActionList::toy();
        let a = build_motion_prompt(&actions, "drink from bottle").unwrap();
        let b = build_motion_prompt(&actions, "kick the ball").unwrap();
        let a_fixed = a.replace("drink from bottle", "{}");
        let b_fixed = b.replace("kick the ball", "{}");
        assert_eq!(a_fixed, b_fixed);
    }

    #[test]
    fn dedup_collapses_duplicates_and_keeps_orthogonal() {
        let mut e = Array1::<f64>::zeros(4);
        e[0] = 1.0;
        let dup = vec![e.clone(); 5];
        assert_eq!(dedup_frames(&dup, 0.9).unwrap(), vec![0]);

        let mut basis = Vec::new();
        for i in 0..3 {
            let mut v = Array1::<f64>::zeros(4);
            v[i] = 1.0;
            basis.push(v);
        }
        assert_eq!(dedup_frames(&basis, 0.9).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn dedup_rejects_unnormalized_input() {
        let v = Array1::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            dedup_frames(&[v], 0.9),
            Err(SugarError::Precondition(_))
        ));
    }

    #[test]
    fn dedup_matches_brute_force_reference() {
        // Independent O(n^2) reference over a random batch.
        let mut rng = derived_rng("dedup-test", 3, "batch");
        let embeddings: Vec<Array1<f64>> = (0..50)
            .map(|_| unit(Array1::from_shape_fn(16, |_| gaussian(&mut rng))))
            .collect();
        let threshold = 0.8;
        let got = dedup_frames(&embeddings, threshold).unwrap();

        let mut expected: Vec<usize> = Vec::new();
        for i in 0..embeddings.len() {
            let mut keep = true;
            if i > 0 {
                for &k in &expected {
                    if embeddings[i].dot(&embeddings[k]) >= threshold {
                        keep = false;
                        break;
                    }
                }
            }
            if keep || i == 0 {
                expected.push(i);
            }
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn dedup_invariant_to_appended_duplicates_of_kept_frames() {
        let mut rng = derived_rng("dedup-test", 9, "invariance");
        let mut embeddings: Vec<Array1<f64>> = (0..10)
            .map(|_| unit(Array1::from_shape_fn(8, |_| gaussian(&mut rng))))
            .collect();
        let kept = dedup_frames(&embeddings, 0.8).unwrap();
        for &k in &kept {
            embeddings.push(embeddings[k].clone());
        }
        assert_eq!(dedup_frames(&embeddings, 0.8).unwrap(), kept);
    }

    #[test]
    fn generate_knowledge_covers_all_actions() {
        let (motions, visuals) = toy_knowledge();
        assert_eq!(motions.len(), 6);
        assert_eq!(visuals.len(), 6);
        for m in &motions {
            assert_eq!(m.parts.len(), 6);
        }
        for v in &visuals {
            assert!(
                (3..=8).contains(&v.descriptions.len()),
                "{} retained {} visuals",
                v.action,
                v.descriptions.len()
            );
            assert_eq!(v.descriptions.len(), v.source_frame_ids.len());
        }
    }

    #[test]
    fn generate_knowledge_reports_missing_actions() {
        let actions = ActionList::new(vec![
            "drink from bottle".to_string(),
            "juggle three pins".to_string(),
        ])
        .unwrap();
        let mut generator = FixtureGenerator::bundled();
        match generate_knowledge(&actions, &mut generator, &KnowledgeConfig::default()) {
            Err(SugarError::PartialResult(missing)) => {
                assert_eq!(missing, vec!["juggle three pins".to_string()]);
            }
            other => panic!("expected partial result, got {other:?}"),
        }
    }

    #[test]
    fn warm_cache_makes_zero_generator_calls() {
        let dir = tempfile::tempdir().unwrap();
        let actions = ActionList::toy();
        let config = KnowledgeConfig::default();
        {
            let mut client =
                CachingGenerator::new(FixtureGenerator::bundled(), dir.path()).unwrap();
            generate_knowledge(&actions, &mut client, &config).unwrap();
            assert!(client.calls() > 0);
        }
        let mut warm = CachingGenerator::new(FixtureGenerator::bundled(), dir.path()).unwrap();
        let (motions, _) = generate_knowledge(&actions, &mut warm, &config).unwrap();
        assert_eq!(warm.calls(), 0, "warm cache must answer every prompt");
        assert_eq!(motions.len(), 6);
    }

    #[test]
    fn bank_combined_sets_and_normalization() {
        let (motions, visuals) = toy_knowledge();
        let encoder = HashedTextEncoder::new(64, 5);
        let bank = encode_bank(&motions, &visuals, &encoder).unwrap();
        for i in 0..bank.actions().len() {
            let combined = bank.combined(i);
            assert_eq!(combined.len(), 1 + bank.visual(i).len());
            for v in combined {
                assert!((v.dot(&v).sqrt() - 1.0).abs() < 1e-6);
            }
        }
        // Confusable pair: identical motion vectors, distinct visuals.
        let a = bank.action_index("drink from bottle").unwrap();
        let b = bank.action_index("drink from can").unwrap();
        assert_eq!(bank.motion(a), bank.motion(b));
        assert_ne!(bank.visual(a)[0], bank.visual(b)[0]);
    }

    #[test]
    fn encode_bank_rejects_empty_visuals() {
        let (motions, mut visuals) = toy_knowledge();
        visuals[0].descriptions.clear();
        let encoder = HashedTextEncoder::new(32, 5);
        assert!(matches!(
            encode_bank(&motions, &visuals, &encoder),
            Err(SugarError::Encoding(_))
        ));
    }

    #[test]
    fn bank_round_trips_through_file() {
        let (motions, visuals) = toy_knowledge();
        let encoder = HashedTextEncoder::new(32, 5);
        let bank = encode_bank(&motions, &visuals, &encoder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.sugb");
        write_embedding_bank(&bank, &path).unwrap();
        let back = read_embedding_bank(&path).unwrap();
        assert_eq!(back.actions(), bank.actions());
        assert_eq!(back.dim(), bank.dim());
        // Identical bytes when written again.
        let path2 = dir.path().join("bank2.sugb");
        write_embedding_bank(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bank_file_with_bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.sugb");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_embedding_bank(&path),
            Err(SugarError::Format { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn dedup_output_always_starts_at_zero_and_is_sorted(
            n in 1usize..30,
            seed in 0u64..500,
            threshold in 0.05f64..0.95,
        ) {
            let mut rng = derived_rng("dedup-prop", seed, "x");
            let embeddings: Vec<Array1<f64>> = (0..n)
                .map(|_| unit(Array1::from_shape_fn(8, |_| gaussian(&mut rng))))
                .collect();
            let kept = dedup_frames(&embeddings, threshold).unwrap();
            prop_assert_eq!(kept[0], 0);
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            // Pairwise dissimilarity among kept frames.
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(embeddings[a].dot(&embeddings[b]) < threshold);
                }
            }
        }
    }
}
