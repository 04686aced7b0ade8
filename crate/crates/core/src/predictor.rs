//! The inference capability consumed by explainability and metrics code,
//! with a trainable [CLS]-attention classifier and a lookup-table stub.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Label, TokenSequence};
use crate::error::{Error, Result};

pub const DEFAULT_MASK: &str = "<MASK>";
pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
const PAD: &str = "<PAD>";
const UNK: &str = "<UNK>";

pub const DEFAULT_DIM: usize = 64;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    pub p_hate: f64,
    pub p_not_hate: f64,
}

impl ProbDist {
    pub fn new(p_hate: f64, p_not_hate: f64) -> Result<Self> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(p_hate) || !ok(p_not_hate) || (p_hate + p_not_hate - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!(
                "({p_hate}, {p_not_hate}) is not a probability distribution"
            )));
        }
        Ok(ProbDist { p_hate, p_not_hate })
    }

    /// `(p, 1 - p)`.
    pub fn hate(p_hate: f64) -> Result<Self> {
        Self::new(p_hate, 1.0 - p_hate)
    }

    pub fn from_logits(logits: [f64; 2]) -> Self {
        let p = softmax(&logits);
        ProbDist {
            p_hate: p[0],
            p_not_hate: p[1],
        }
    }

    pub fn prob(&self, label: Label) -> f64 {
        match label {
            Label::Hate => self.p_hate,
            Label::NotHate => self.p_not_hate,
        }
    }

    /// Most probable class; ties go to HATE.
    pub fn argmax(&self) -> Label {
        if self.p_hate >= self.p_not_hate {
            Label::Hate
        } else {
            Label::NotHate
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub weights: Vec<f64>,
}

pub trait Predictor: Sync {
    fn predict(&self, seq: &TokenSequence) -> Result<ProbDist>;

    fn attention_profile(&self, _seq: &TokenSequence) -> Option<Result<AttentionProfile>> {
        None
    }

    /// Surface substituted for masked tokens in faithfulness probes.
    fn mask_token(&self) -> &str {
        DEFAULT_MASK
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Token-to-id map with reserved ids PAD=0, MASK=1, UNK=2. Further ids are
/// assigned in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(mask_token: &str) -> Self {
        let mut v = Vocabulary {
            surfaces: Vec::new(),
            ids: HashMap::new(),
        };
        for s in [PAD, mask_token, UNK] {
            v.insert(s);
        }
        v
    }

    fn from_surfaces(surfaces: Vec<String>) -> Result<Self> {
        if surfaces.len() < 3 {
            return Err(Error::Checkpoint("vocabulary is missing reserved entries".into()));
        }
        let mut ids = HashMap::with_capacity(surfaces.len());
        for (i, s) in surfaces.iter().enumerate() {
            if ids.insert(s.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("vocabulary repeats {s:?}")));
            }
        }
        Ok(Vocabulary { surfaces, ids })
    }

    /// Returns the id of `surface`, adding it if absent.
    pub fn insert(&mut self, surface: &str) -> usize {
        if let Some(&id) = self.ids.get(surface) {
            return id;
        }
        let id = self.surfaces.len();
        self.surfaces.push(surface.to_string());
        self.ids.insert(surface.to_string(), id);
        id
    }

    pub fn id(&self, surface: &str) -> usize {
        self.ids.get(surface).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.ids.contains_key(surface)
    }

    pub fn surface(&self, id: usize) -> &str {
        &self.surfaces[id]
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }
}

/// Trainable parameters. `embeddings` is `|V| x dim` row-major; `head` is
/// `dim x 2` row-major with column 0 for HATE and column 1 for NOT_HATE.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub dim: usize,
    pub embeddings: Vec<f64>,
    pub cls: Vec<f64>,
    pub head: Vec<f64>,
    pub bias: [f64; 2],
}

impl Parameters {
    pub fn row(&self, id: usize) -> &[f64] {
        &self.embeddings[id * self.dim..(id + 1) * self.dim]
    }

    pub fn zeros_like(&self) -> Parameters {
        Parameters {
            dim: self.dim,
            embeddings: vec![0.0; self.embeddings.len()],
            cls: vec![0.0; self.dim],
            head: vec![0.0; self.head.len()],
            bias: [0.0; 2],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.embeddings
            .iter()
            .chain(&self.cls)
            .chain(&self.head)
            .chain(&self.bias)
            .all(|x| x.is_finite())
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub attention: Vec<f64>,
    pub pooled: Vec<f64>,
    pub logits: [f64; 2],
    pub probs: ProbDist,
}

/// Embedding lookup, attention pooling against a learned [CLS] vector,
/// and a linear two-class head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceAttentionClassifier {
    vocab: Vocabulary,
    params: Parameters,
    seed: u64,
}

fn derived_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

fn gaussian(seed: u64, label: &str, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, label));
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

impl ReferenceAttentionClassifier {
    /// A fresh model over the reserved tokens only.
    pub fn new(dim: usize, seed: u64, mask_token: &str) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("embedding dimension must be positive"));
        }
        let mut model = ReferenceAttentionClassifier {
            vocab: Vocabulary::new(mask_token),
            params: Parameters {
                dim,
                embeddings: Vec::new(),
                cls: gaussian(seed, "\0cls", dim),
                head: gaussian(seed, "\0head", dim * 2),
                bias: [0.0; 2],
            },
            seed,
        };
        for id in 0..model.vocab.len() {
            let row = model.init_row(model.vocab.surface(id).to_string().as_str());
            model.params.embeddings.extend(row);
        }
        Ok(model)
    }

    /// A fresh model whose vocabulary covers every token of `corpus`.
    pub fn for_corpus(corpus: &Corpus, dim: usize, seed: u64, mask_token: &str) -> Result<Self> {
        let mut model = Self::new(dim, seed, mask_token)?;
        for sample in &corpus.samples {
            for surface in sample.tokens.surfaces() {
                model.add_token(surface);
            }
        }
        Ok(model)
    }

    // Rows are seeded by surface so that parameters do not depend on the
    // order tokens were first seen.
    fn init_row(&self, surface: &str) -> Vec<f64> {
        gaussian(self.seed, &format!("\u{1}{surface}"), self.params.dim)
    }

    pub fn add_token(&mut self, surface: &str) -> usize {
        if self.vocab.contains(surface) {
            return self.vocab.id(surface);
        }
        let row = self.init_row(surface);
        self.params.embeddings.extend(row);
        self.vocab.insert(surface)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn ids(&self, seq: &TokenSequence) -> Vec<usize> {
        seq.surfaces().map(|s| self.vocab.id(s)).collect()
    }

    pub fn forward_ids(&self, ids: &[usize]) -> Result<Forward> {
        if ids.is_empty() {
            return Err(Error::arg("cannot run the classifier on an empty sequence"));
        }
        let p = &self.params;
        let d = p.dim;
        let scores: Vec<f64> = ids.iter().map(|&id| dot(p.row(id), &p.cls)).collect();
        let attention = softmax(&scores);
        let mut pooled = vec![0.0; d];
        for (&id, &a) in ids.iter().zip(&attention) {
            for (acc, h) in pooled.iter_mut().zip(p.row(id)) {
                *acc += a * h;
            }
        }
        let mut logits = p.bias;
        for (j, x) in pooled.iter().enumerate() {
            logits[0] += x * p.head[j * 2];
            logits[1] += x * p.head[j * 2 + 1];
        }
        Ok(Forward {
            ids: ids.to_vec(),
            scores,
            attention,
            pooled,
            logits,
            probs: ProbDist::from_logits(logits),
        })
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<Forward> {
        self.forward_ids(&self.ids(seq))
    }

    pub fn attention(&self, seq: &TokenSequence) -> Result<AttentionProfile> {
        Ok(AttentionProfile {
            weights: self.forward(seq)?.attention,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ckpt)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dim: self.params.dim,
            seed: self.seed,
            vocabulary: self.vocab.surfaces.clone(),
            embeddings: self.params.embeddings.clone(),
            cls: self.params.cls.clone(),
            head: self.params.head.clone(),
            bias: self.params.bias,
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let d = c.dim;
        let vocab = Vocabulary::from_surfaces(c.vocabulary)?;
        if d == 0 || c.embeddings.len() != vocab.len() * d || c.cls.len() != d || c.head.len() != d * 2 {
            return Err(Error::Checkpoint(format!(
                "parameter shapes do not match vocabulary of {} and dim {d}",
                vocab.len()
            )));
        }
        let model = ReferenceAttentionClassifier {
            vocab,
            params: Parameters {
                dim: d,
                embeddings: c.embeddings,
                cls: c.cls,
                head: c.head,
                bias: c.bias,
            },
            seed: c.seed,
        };
        if !model.params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(model)
    }
}

impl Predictor for ReferenceAttentionClassifier {
    fn predict(&self, seq: &TokenSequence) -> Result<ProbDist> {
        Ok(self.forward(seq)?.probs)
    }

    fn attention_profile(&self, seq: &TokenSequence) -> Option<Result<AttentionProfile>> {
        Some(self.attention(seq))
    }

    fn mask_token(&self) -> &str {
        self.vocab.surface(MASK_ID)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const CHECKPOINT_FORMAT: &str = "xmutest-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint container (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub seed: u64,
    pub vocabulary: Vec<String>,
    pub embeddings: Vec<f64>,
    pub cls: Vec<f64>,
    pub head: Vec<f64>,
    pub bias: [f64; 2],
}

/// Exact-match lookup table over token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct StubPredictor {
    table: HashMap<Vec<String>, ProbDist>,
    default: ProbDist,
    mask: String,
}

impl StubPredictor {
    pub fn new(default: ProbDist) -> Self {
        StubPredictor {
            table: HashMap::new(),
            default,
            mask: DEFAULT_MASK.to_string(),
        }
    }

    pub fn with_mask_token(mut self, mask: &str) -> Self {
        self.mask = mask.to_string();
        self
    }

    pub fn insert<S: AsRef<str>>(&mut self, tokens: &[S], dist: ProbDist) {
        self.table
            .insert(tokens.iter().map(|s| s.as_ref().to_string()).collect(), dist);
    }

    pub fn lookup(&self, seq: &TokenSequence) -> ProbDist {
        let key: Vec<String> = seq.surfaces().map(str::to_string).collect();
        self.table.get(&key).copied().unwrap_or(self.default)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: StubFile = serde_json::from_str(text)?;
        let mut stub = StubPredictor::new(ProbDist::new(file.default.p_hate, file.default.p_not_hate)?)
            .with_mask_token(file.mask_token.as_deref().unwrap_or(DEFAULT_MASK));
        for e in file.entries {
            stub.insert(&e.tokens, ProbDist::new(e.dist.p_hate, e.dist.p_not_hate)?);
        }
        Ok(stub)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut entries: Vec<StubEntry> = self
            .table
            .iter()
            .map(|(tokens, dist)| StubEntry {
                tokens: tokens.clone(),
                dist: *dist,
            })
            .collect();
        entries.sort_by(|a, b| a.tokens.cmp(&b.tokens));
        Ok(serde_json::to_string_pretty(&StubFile {
            default: self.default,
            mask_token: Some(self.mask.clone()),
            entries,
        })?)
    }
}

impl Predictor for StubPredictor {
    fn predict(&self, seq: &TokenSequence) -> Result<ProbDist> {
        Ok(self.lookup(seq))
    }

    fn mask_token(&self) -> &str {
        &self.mask
    }
}

/// JSON layout of a stub predictor table.
#[derive(Debug, Serialize, Deserialize)]
struct StubFile {
    default: ProbDist,
    #[serde(default)]
    mask_token: Option<String>,
    entries: Vec<StubEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StubEntry {
    tokens: Vec<String>,
    #[serde(flatten)]
    dist: ProbDist,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use proptest::prelude::*;

    #[test]
    fn attention_of_identical_tokens_is_uniform() {
        let model = ReferenceAttentionClassifier::new(8, 1, DEFAULT_MASK).unwrap();
        let a = model.attention(&tokenize("x x x x")).unwrap();
        for w in &a.weights {
            assert!((w - 0.25).abs() < 1e-15);
        }
        let single = model.attention(&tokenize("x")).unwrap();
        assert_eq!(single.weights, vec![1.0]);
    }

    #[test]
    fn attention_two_token_softmax() {
        let mut model = ReferenceAttentionClassifier::new(1, 1, DEFAULT_MASK).unwrap();
        let a = model.add_token("a");
        let b = model.add_token("b");
        let p = model.params_mut();
        p.cls = vec![1.0];
        p.embeddings[a] = std::f64::consts::LN_2;
        p.embeddings[b] = 0.0;
        let w = model.attention(&tokenize("a b")).unwrap().weights;
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let model = ReferenceAttentionClassifier::new(4, 1, DEFAULT_MASK).unwrap();
        assert!(model.attention(&tokenize("")).is_err());
        assert!(model.predict(&tokenize("  ")).is_err());
    }

    #[test]
    fn zero_head_predicts_even_odds() {
        let mut model = ReferenceAttentionClassifier::new(4, 3, DEFAULT_MASK).unwrap();
        model.params_mut().head.iter_mut().for_each(|w| *w = 0.0);
        let p = model.predict(&tokenize("some words")).unwrap();
        assert_eq!((p.p_hate, p.p_not_hate), (0.5, 0.5));
    }

    #[test]
    fn prediction_is_deterministic() {
        let corpus = crate::synthetic::trigger_corpus(20, 5);
        let a = ReferenceAttentionClassifier::for_corpus(&corpus, 16, 9, DEFAULT_MASK).unwrap();
        let b = ReferenceAttentionClassifier::for_corpus(&corpus, 16, 9, DEFAULT_MASK).unwrap();
        let seq = &corpus.samples[0].tokens;
        assert_eq!(a.predict(seq).unwrap(), b.predict(seq).unwrap());
        assert_eq!(a.predict(seq).unwrap(), a.predict(seq).unwrap());
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let model = ReferenceAttentionClassifier::new(4, 3, DEFAULT_MASK).unwrap();
        assert_eq!(model.ids(&tokenize("never-seen <MASK>")), vec![UNK_ID, MASK_ID]);
        assert!(model.predict(&tokenize("never-seen")).is_ok());
    }

    #[test]
    fn vocabulary_order_does_not_change_predictions() {
        let mut ab = ReferenceAttentionClassifier::new(8, 5, DEFAULT_MASK).unwrap();
        let mut ba = ab.clone();
        for s in ["foo", "bar", "baz"] {
            ab.add_token(s);
        }
        for s in ["baz", "bar", "foo"] {
            ba.add_token(s);
        }
        let seq = tokenize("bar foo baz foo");
        assert_eq!(ab.predict(&seq).unwrap(), ba.predict(&seq).unwrap());
    }

    #[test]
    fn mask_row_is_its_own_parameter() {
        let model = ReferenceAttentionClassifier::new(8, 5, DEFAULT_MASK).unwrap();
        assert_eq!(model.vocabulary().surface(MASK_ID), DEFAULT_MASK);
        assert!(model.params().row(MASK_ID).iter().any(|&x| x != 0.0));
        assert_eq!(model.mask_token(), DEFAULT_MASK);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let model = ReferenceAttentionClassifier::new(4, 3, DEFAULT_MASK).unwrap();
        let mut c = model.to_checkpoint();
        c.vocabulary.push("extra".into());
        assert!(matches!(
            ReferenceAttentionClassifier::from_checkpoint(c),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn stub_lookup_and_default() {
        let mut stub = StubPredictor::new(ProbDist::hate(0.5).unwrap());
        stub.insert(&["a"], ProbDist::new(0.6, 0.4).unwrap());
        assert_eq!(stub.predict(&tokenize("a")).unwrap(), ProbDist::new(0.6, 0.4).unwrap());
        assert_eq!(stub.predict(&tokenize("b")).unwrap(), ProbDist::hate(0.5).unwrap());
        assert_eq!(stub.predict(&tokenize("a")).unwrap(), ProbDist::new(0.6, 0.4).unwrap());
        let back = StubPredictor::from_json(&stub.to_json().unwrap()).unwrap();
        assert_eq!(back, stub);
    }

    #[test]
    fn probdist_validation() {
        assert!(ProbDist::new(0.7, 0.2).is_err());
        assert!(ProbDist::new(1.2, -0.2).is_err());
        assert_eq!(ProbDist::hate(0.5).unwrap().argmax(), Label::Hate);
    }

    proptest! {
        #[test]
        fn outputs_are_normalized(seed in any::<u64>(), words in prop::collection::vec("[a-e]{1,2}", 1..12)) {
            let mut model = ReferenceAttentionClassifier::new(6, seed, DEFAULT_MASK).unwrap();
            for w in &words { model.add_token(w); }
            // blow the parameters up so softmax saturation is exercised
            model.params_mut().embeddings.iter_mut().for_each(|x| *x *= 400.0);
            model.params_mut().cls.iter_mut().for_each(|x| *x *= 400.0);
            let seq = TokenSequence::from_surfaces(words.clone()).unwrap();
            let f = model.forward(&seq).unwrap();
            prop_assert!((f.probs.p_hate + f.probs.p_not_hate - 1.0).abs() < 1e-9);
            prop_assert!((f.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(f.attention.iter().all(|a| (0.0..=1.0).contains(a)));
        }

        #[test]
        fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), scale in -1e6f64..1e6) {
            let mut model = ReferenceAttentionClassifier::new(5, seed, DEFAULT_MASK).unwrap();
            model.add_token("नमस्ते");
            model.params_mut().embeddings.iter_mut().for_each(|x| *x *= scale);
            model.params_mut().bias = [scale.sqrt().max(1e-300), -1.0 / 3.0];
            let text = serde_json::to_string(&model.to_checkpoint()).unwrap();
            let back = ReferenceAttentionClassifier::from_checkpoint(serde_json::from_str(&text).unwrap()).unwrap();
            prop_assert_eq!(&back, &model);
        }
    }
}
