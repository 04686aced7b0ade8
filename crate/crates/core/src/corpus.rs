//! Annotated samples, whitespace tokenization, JSONL ingestion and
//! seeded train/test splitting.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::agreement::aggregate_rationales;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub surface: String,
    pub index: usize,
}

/// An ordered run of whitespace-free tokens with contiguous indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    tokens: Vec<Token>,
}

impl TokenSequence {
    /// Builds a sequence from surfaces, rejecting empty or whitespace-bearing ones.
    pub fn from_surfaces<I, S>(surfaces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = Vec::new();
        for (index, s) in surfaces.into_iter().enumerate() {
            let surface = s.into();
            if surface.is_empty() || surface.chars().any(char::is_whitespace) {
                return Err(Error::arg(format!(
                    "token {index} ({surface:?}) is empty or contains whitespace"
                )));
            }
            tokens.push(Token { surface, index });
        }
        Ok(TokenSequence { tokens })
    }

    // Caller guarantees every surface already satisfies the token invariant.
    pub(crate) fn from_trusted<I, S>(surfaces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = surfaces
            .into_iter()
            .enumerate()
            .map(|(index, s)| Token {
                surface: s.into(),
                index,
            })
            .collect();
        TokenSequence { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> + '_ {
        self.tokens.iter().map(|t| t.surface.as_str())
    }

    pub fn surface(&self, index: usize) -> &str {
        &self.tokens[index].surface
    }

    /// The contiguous window `[start, start + len)` as a fresh, re-indexed sequence.
    pub fn window(&self, start: usize, len: usize) -> TokenSequence {
        TokenSequence::from_trusted(self.tokens[start..start + len].iter().map(|t| t.surface.clone()))
    }

    /// Replaces, in place, every position for which `masked(i)` holds with `mask`.
    pub fn masked_where(&self, mask: &str, masked: impl Fn(usize) -> bool) -> TokenSequence {
        TokenSequence::from_trusted(self.tokens.iter().map(|t| {
            if masked(t.index) {
                mask.to_string()
            } else {
                t.surface.clone()
            }
        }))
    }

    /// Space-joined surfaces.
    pub fn join(&self) -> String {
        self.surfaces().collect::<Vec<_>>().join(" ")
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.join())
    }
}

/// Splits on runs of Unicode whitespace. Never fails.
pub fn tokenize(raw_text: &str) -> TokenSequence {
    TokenSequence::from_trusted(raw_text.split_whitespace())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "HATE")]
    Hate,
    #[serde(rename = "NOT_HATE")]
    NotHate,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Hate => "HATE",
            Label::NotHate => "NOT_HATE",
        }
    }

    /// Class index used by probability vectors and the classifier head.
    pub fn class_index(self) -> usize {
        match self {
            Label::Hate => 0,
            Label::NotHate => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One binary rationale bit per token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RationaleVector(Vec<u8>);

impl RationaleVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::arg(format!("rationale bit {b} is not 0 or 1")));
        }
        Ok(RationaleVector(bits))
    }

    pub fn zeros(len: usize) -> Self {
        RationaleVector(vec![0; len])
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![0; len];
        for i in indices {
            bits[i] = 1;
        }
        RationaleVector(bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }

    pub fn ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn indices(&self) -> BTreeSet<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub raw_text: String,
    pub tokens: TokenSequence,
    pub label: Label,
    pub gold_rationale: Option<RationaleVector>,
    pub annotator_rationales: Option<Vec<RationaleVector>>,
}

impl Sample {
    /// Builds and validates a sample from raw text.
    pub fn new(
        id: impl Into<String>,
        raw_text: &str,
        label: Label,
        gold_rationale: Option<RationaleVector>,
        annotator_rationales: Option<Vec<RationaleVector>>,
    ) -> Result<Self> {
        let raw_text: String = raw_text.nfc().collect();
        let sample = Sample {
            id: id.into(),
            tokens: tokenize(&raw_text),
            raw_text,
            label,
            gold_rationale,
            annotator_rationales,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.tokens.len();
        let invalid = |message: String| Error::Validation {
            id: self.id.clone(),
            message,
        };
        let mut all = Vec::new();
        if let Some(gold) = &self.gold_rationale {
            all.push(("gold_rationale", gold));
        }
        if let Some(annotators) = &self.annotator_rationales {
            if annotators.is_empty() || annotators.len() > 3 {
                return Err(invalid(format!(
                    "expected 1 to 3 annotator rationales, found {}",
                    annotators.len()
                )));
            }
            all.extend(annotators.iter().map(|r| ("rationales", r)));
        }
        for (field, r) in all {
            if r.len() != len {
                return Err(invalid(format!(
                    "{field} has length {} but the text has {len} tokens",
                    r.len()
                )));
            }
            if self.label == Label::NotHate && !r.is_all_zero() {
                return Err(invalid(format!("{field} marks tokens on a NOT_HATE sample")));
            }
        }
        Ok(())
    }

    /// Gold rationale, falling back to the annotator majority vote.
    pub fn gold(&self) -> Option<RationaleVector> {
        if let Some(g) = &self.gold_rationale {
            return Some(g.clone());
        }
        self.annotator_rationales
            .as_ref()
            .and_then(|vs| aggregate_rationales(vs).ok())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum Language {
    Telugu,
    Hindi,
    English,
    #[default]
    Other,
}

impl std::str::FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "telugu" | "te" => Ok(Language::Telugu),
            "hindi" | "hi" => Ok(Language::Hindi),
            "english" | "en" => Ok(Language::English),
            "other" => Ok(Language::Other),
            _ => Err(Error::arg(format!("unknown language {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub language: Language,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn new(language: Language, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation {
                    id: s.id.clone(),
                    message: "duplicate sample id".into(),
                });
            }
        }
        Ok(Corpus { language, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationales: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_rationale: Option<Vec<u8>>,
}

fn record_to_sample(record: Record, line: usize) -> Result<Sample> {
    let bits = |v: Vec<u8>| {
        RationaleVector::new(v).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })
    };
    let gold = record.gold_rationale.map(bits).transpose()?;
    let annotators = record
        .rationales
        .map(|vs| vs.into_iter().map(bits).collect::<Result<Vec<_>>>())
        .transpose()?;
    Sample::new(record.id, &record.text, record.label, gold, annotators)
}

/// Parses JSONL corpus text. Blank lines are ignored; line numbers are 1-based.
pub fn parse_corpus(text: &str, language: Language) -> Result<Corpus> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())), language)
}

fn parse_lines(lines: impl Iterator<Item = std::io::Result<String>>, language: Language) -> Result<Corpus> {
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(record_to_sample(record, i + 1)?);
    }
    Corpus::new(language, samples)
}

pub fn load_corpus(path: &Path, format: CorpusFormat, language: Language) -> Result<Corpus> {
    match format {
        CorpusFormat::Jsonl => {
            let file = std::fs::File::open(path)?;
            parse_lines(BufReader::new(file).lines(), language)
        }
    }
}

/// Writes the corpus in the JSONL interchange format.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    for s in &corpus.samples {
        let record = Record {
            id: s.id.clone(),
            text: s.raw_text.clone(),
            label: s.label,
            rationales: s
                .annotator_rationales
                .as_ref()
                .map(|vs| vs.iter().map(|r| r.bits().to_vec()).collect()),
            gold_rationale: s.gold_rationale.as_ref().map(|r| r.bits().to_vec()),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Number of samples held out for `n` samples at `test_fraction`, rounding half up.
pub fn test_size(n: usize, test_fraction: f64) -> usize {
    ((n as f64 * test_fraction) + 0.5).floor() as usize
}

/// Seeded shuffle split into `(train, test)`. Both parts keep corpus order.
pub fn split_corpus(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::arg(format!("test fraction {test_fraction} must lie in [0, 1)")));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = test_size(n, test_fraction).min(n);
    let mut is_test = vec![false; n];
    for &i in &order[..k] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in corpus.samples.iter().zip(is_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((
        Corpus {
            language: corpus.language,
            samples: train,
        },
        Corpus {
            language: corpus.language,
            samples: test,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(seq: &TokenSequence) -> Vec<&str> {
        seq.surfaces().collect()
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(words(&tokenize("you dog")), ["you", "dog"]);
        assert_eq!(words(&tokenize("a \t b\n c")), ["a", "b", "c"]);
        assert_eq!(tokenize("a \t b\n c").tokens()[2].index, 2);
    }

    #[test]
    fn tokenize_keeps_indic_scripts() {
        let seq = tokenize("तुम कुत्ते हो  నువ్వు\u{3000}కుక్క");
        assert_eq!(words(&seq), ["तुम", "कुत्ते", "हो", "నువ్వు", "కుక్క"]);
    }

    #[test]
    fn from_surfaces_rejects_whitespace() {
        assert!(TokenSequence::from_surfaces(["a b"]).is_err());
        assert!(TokenSequence::from_surfaces([""]).is_err());
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let c = parse_corpus("", Language::Other).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn rationale_length_mismatch_names_sample() {
        let text = r#"{"id":"s9","text":"you dog","label":"HATE","gold_rationale":[0,1,1]}"#;
        match parse_corpus(text, Language::Other) {
            Err(Error::Validation { id, .. }) => assert_eq!(id, "s9"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"HATE\"}\n\n{not json";
        match parse_corpus(text, Language::Other) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn not_hate_rationale_must_be_zero() {
        let text = r#"{"id":"n","text":"hello there","label":"NOT_HATE","rationales":[[0,1]]}"#;
        assert!(matches!(
            parse_corpus(text, Language::Other),
            Err(Error::Validation { .. })
        ));
        let ok = r#"{"id":"n","text":"hello there","label":"NOT_HATE","rationales":[[0,0]]}"#;
        assert!(parse_corpus(ok, Language::Other).is_ok());
    }

    #[test]
    fn non_binary_bits_rejected() {
        let text = r#"{"id":"a","text":"x y","label":"HATE","gold_rationale":[0,2]}"#;
        assert!(matches!(
            parse_corpus(text, Language::Other),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"HATE\"}\n{\"id\":\"a\",\"text\":\"y\",\"label\":\"HATE\"}";
        assert!(matches!(
            parse_corpus(text, Language::Other),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn text_is_nfc_normalized() {
        // "é" as e + combining acute
        let text = "{\"id\":\"a\",\"text\":\"caf\\u0065\\u0301\",\"label\":\"NOT_HATE\"}";
        let c = parse_corpus(text, Language::Other).unwrap();
        assert_eq!(c.samples[0].tokens.surface(0), "caf\u{e9}");
    }

    fn numbered(n: usize) -> Corpus {
        let samples = (0..n)
            .map(|i| Sample::new(format!("s{i}"), "a b", Label::NotHate, None, None).unwrap())
            .collect();
        Corpus::new(Language::Other, samples).unwrap()
    }

    #[test]
    fn split_sizes() {
        let c = numbered(100);
        let (train, test) = split_corpus(&c, 0.15, 7).unwrap();
        assert_eq!((train.len(), test.len()), (85, 15));
        let (train, test) = split_corpus(&c, 0.0, 7).unwrap();
        assert_eq!((train.len(), test.len()), (100, 0));
        assert!(split_corpus(&c, 1.0, 7).is_err());
        assert!(split_corpus(&c, -0.1, 7).is_err());
    }

    #[test]
    fn split_ties_go_to_test() {
        assert_eq!(test_size(10, 0.25), 3);
        assert_eq!(test_size(10, 0.15), 2);
    }

    proptest! {
        #[test]
        fn tokenize_round_trips(words in prop::collection::vec("[a-zà-ÿ\u{0900}-\u{0939}]{1,6}", 0..10),
                                seps in prop::collection::vec("[ \t\n]{1,3}", 10)) {
            let mut raw = String::new();
            for (w, s) in words.iter().zip(seps.iter()) {
                raw.push_str(w);
                raw.push_str(s);
            }
            let seq = tokenize(&raw);
            prop_assert_eq!(tokenize(&seq.join()), seq.clone());
            prop_assert_eq!(seq.len(), words.len());
        }

        #[test]
        fn split_partitions(n in 0usize..60, frac in 0.0f64..0.99, seed in any::<u64>()) {
            let c = numbered(n);
            let (train, test) = split_corpus(&c, frac, seed).unwrap();
            prop_assert_eq!(train.len() + test.len(), n);
            let train_ids: HashSet<_> = train.samples.iter().map(|s| s.id.clone()).collect();
            prop_assert!(test.samples.iter().all(|s| !train_ids.contains(&s.id)));
            let again = split_corpus(&c, frac, seed).unwrap();
            prop_assert_eq!(again.1, test);
        }
    }
}
