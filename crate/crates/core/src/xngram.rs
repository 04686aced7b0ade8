//! Token importance from n-gram probes.
//!
//! Every contiguous unigram, bigram and trigram of a sequence is fed to the
//! predictor on its own (or, in [`ProbeMode::Occlude`], masked inside the
//! full sequence). The absolute change in the reference-class
//! probability relative to the full sequence is spread over the tokens the
//! n-gram covers, averaged per n-gram length and mixed with per-length
//! weights. The result is normalized to a distribution over tokens.

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, TokenSequence};
use crate::error::{Error, Result};
use crate::predictor::Predictor;

pub const MAX_NGRAM: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ngram {
    pub start: usize,
    pub n: usize,
    pub tokens: TokenSequence,
}

impl Ngram {
    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.start + self.n).contains(&t)
    }
}

/// Per-length mixing weights for unigrams, bigrams and trigrams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NgramWeights([f64; MAX_NGRAM]);

impl Default for NgramWeights {
    fn default() -> Self {
        NgramWeights([0.5, 0.3, 0.2])
    }
}

impl NgramWeights {
    pub fn new(unigram: f64, bigram: f64, trigram: f64) -> Result<Self> {
        let w = [unigram, bigram, trigram];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!(
                "n-gram weights {w:?} must be nonnegative and sum to 1"
            )));
        }
        Ok(NgramWeights(w))
    }

    /// Weight for n-grams of length `n` (1-based).
    pub fn get(&self, n: usize) -> f64 {
        self.0[n - 1]
    }

    pub fn as_array(&self) -> [f64; MAX_NGRAM] {
        self.0
    }
}

/// All contiguous n-grams with `n <= min(3, L)`, ordered by `(n, start)`.
pub fn enumerate_ngrams(seq: &TokenSequence) -> Result<Vec<Ngram>> {
    if seq.is_empty() {
        return Err(Error::arg("cannot enumerate n-grams of an empty sequence"));
    }
    let len = seq.len();
    Ok((1..=MAX_NGRAM.min(len))
        .flat_map(|n| {
            (0..=len - n).map(move |start| Ngram {
                start,
                n,
                tokens: seq.window(start, n),
            })
        })
        .collect())
}

/// Number of n-grams of each length covering each token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramIndex {
    len: usize,
}

impl NgramIndex {
    pub fn new(len: usize) -> Self {
        NgramIndex { len }
    }

    /// `N_t^(n)`: n-grams of length `n` that contain token `t`; zero when `n > L`.
    pub fn count(&self, t: usize, n: usize) -> usize {
        if n == 0 || n > self.len || t >= self.len {
            return 0;
        }
        let first = t.saturating_sub(n - 1);
        let last = t.min(self.len - n);
        last - first + 1
    }

    /// Start positions of the n-grams of length `n` that contain `t`.
    pub fn members(&self, t: usize, n: usize) -> std::ops::RangeInclusive<usize> {
        if self.count(t, n) == 0 {
            #[allow(clippy::reversed_empty_ranges)]
            return 1..=0;
        }
        t.saturating_sub(n - 1)..=t.min(self.len - n)
    }
}

/// Probe outcome for one n-gram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NgramProbe {
    pub start: usize,
    pub n: usize,
    /// Reference-class probability with the n-gram as the whole input.
    pub p_ngram: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationScores {
    pub reference_class: Label,
    pub p_orig: f64,
    /// Unnormalized per-token importance.
    pub raw: Vec<f64>,
    /// Per-token importance summing to 1.
    pub normalized: Vec<f64>,
    pub probes: Vec<NgramProbe>,
}

impl ExplanationScores {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// What the predictor sees when an n-gram is probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    /// The n-gram alone is the whole input.
    #[default]
    Isolate,
    /// The full sequence with the n-gram replaced in place by the mask token.
    Occlude,
}

impl std::str::FromStr for ProbeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isolate" => Ok(ProbeMode::Isolate),
            "occlude" => Ok(ProbeMode::Occlude),
            _ => Err(Error::arg(format!("unknown probe mode {s:?}"))),
        }
    }
}

/// Weights plus probe construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Explainer {
    pub weights: NgramWeights,
    pub probe: ProbeMode,
}

impl Explainer {
    pub fn new(weights: NgramWeights, probe: ProbeMode) -> Self {
        Explainer { weights, probe }
    }

    pub fn scores<P: Predictor + ?Sized>(&self, predictor: &P, seq: &TokenSequence) -> Result<ExplanationScores> {
        token_scores_with(predictor, seq, &self.weights, self.probe)
    }
}

/// The input fed to the predictor for `ng`.
pub fn probe_input(seq: &TokenSequence, ng: &Ngram, mode: ProbeMode, mask: &str) -> TokenSequence {
    match mode {
        ProbeMode::Isolate => ng.tokens.clone(),
        ProbeMode::Occlude => seq.masked_where(mask, |i| ng.contains(i)),
    }
}

/// `|P(S)_c - P(ng)_c|` for one n-gram of `seq`, probing the n-gram alone.
pub fn ngram_delta<P: Predictor + ?Sized>(predictor: &P, seq: &TokenSequence, ng: &Ngram, class: Label) -> Result<f64> {
    ngram_delta_with(predictor, seq, ng, class, ProbeMode::Isolate)
}

pub fn ngram_delta_with<P: Predictor + ?Sized>(
    predictor: &P,
    seq: &TokenSequence,
    ng: &Ngram,
    class: Label,
    mode: ProbeMode,
) -> Result<f64> {
    let p_orig = predictor.predict(seq)?.prob(class);
    let probe = probe_input(seq, ng, mode, predictor.mask_token());
    let p_ng = predictor.predict(&probe)?.prob(class);
    Ok((p_orig - p_ng).abs())
}

/// Scores with isolated n-gram probes.
pub fn token_scores<P: Predictor + ?Sized>(
    predictor: &P,
    seq: &TokenSequence,
    weights: &NgramWeights,
) -> Result<ExplanationScores> {
    token_scores_with(predictor, seq, weights, ProbeMode::Isolate)
}

pub fn token_scores_with<P: Predictor + ?Sized>(
    predictor: &P,
    seq: &TokenSequence,
    weights: &NgramWeights,
    mode: ProbeMode,
) -> Result<ExplanationScores> {
    let ngrams = enumerate_ngrams(seq)?;
    let full = predictor.predict(seq)?;
    let class = full.argmax();
    let p_orig = full.prob(class);

    let len = seq.len();
    let index = NgramIndex::new(len);
    let mut raw = vec![0.0; len];
    let mut probes = Vec::with_capacity(ngrams.len());
    for ng in &ngrams {
        let p_ngram = predictor
            .predict(&probe_input(seq, ng, mode, predictor.mask_token()))?
            .prob(class);
        let delta = (p_orig - p_ngram).abs();
        probes.push(NgramProbe {
            start: ng.start,
            n: ng.n,
            p_ngram,
            delta,
        });
        let w = weights.get(ng.n);
        for (t, e) in raw.iter_mut().enumerate().skip(ng.start).take(ng.n) {
            *e += w * delta / index.count(t, ng.n) as f64;
        }
    }

    let total: f64 = raw.iter().sum();
    let normalized = if total > 0.0 {
        raw.iter().map(|e| e / total).collect()
    } else {
        vec![1.0 / len as f64; len]
    };
    Ok(ExplanationScores {
        reference_class: class,
        p_orig,
        raw,
        normalized,
        probes,
    })
}

/// Indices of the `k` highest normalized scores, highest first; ties go to
/// the lower index.
pub fn top_tokens(scores: &ExplanationScores, k: usize) -> Result<Vec<usize>> {
    top_k_indices(&scores.normalized, k)
}

pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::arg(format!("k = {k} is outside 1..={}", values.len())));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::predictor::{ProbDist, StubPredictor};

    fn worked_stub() -> StubPredictor {
        let mut stub = StubPredictor::new(ProbDist::hate(0.5).unwrap());
        for (tokens, p) in [
            (&["a", "b", "c"][..], 0.9),
            (&["a"], 0.6),
            (&["b"], 0.5),
            (&["c"], 0.9),
            (&["a", "b"], 0.4),
            (&["b", "c"], 0.8),
        ] {
            stub.insert(tokens, ProbDist::hate(p).unwrap());
        }
        stub
    }

    #[test]
    fn ngram_counts() {
        assert_eq!(enumerate_ngrams(&tokenize("a")).unwrap().len(), 1);
        assert_eq!(enumerate_ngrams(&tokenize("a b c")).unwrap().len(), 6);
        assert_eq!(enumerate_ngrams(&tokenize("a b c d e")).unwrap().len(), 12);
        assert!(enumerate_ngrams(&tokenize("")).is_err());
        let order: Vec<(usize, usize)> = enumerate_ngrams(&tokenize("a b c"))
            .unwrap()
            .iter()
            .map(|g| (g.n, g.start))
            .collect();
        assert_eq!(order, [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (3, 0)]);
    }

    #[test]
    fn index_counts_are_bounded() {
        for len in 1..12 {
            let idx = NgramIndex::new(len);
            for t in 0..len {
                assert_eq!(idx.count(t, 1), 1);
                for n in 1..=3 {
                    let bound = if n <= len { n.min(len - n + 1) } else { 0 };
                    assert!(idx.count(t, n) <= bound);
                    assert_eq!(idx.members(t, n).count(), idx.count(t, n));
                }
            }
        }
    }

    #[test]
    fn delta_examples() {
        let stub = worked_stub();
        let seq = tokenize("a b c");
        let ngrams = enumerate_ngrams(&seq).unwrap();
        let whole = ngrams.iter().find(|g| g.n == 3).unwrap();
        assert_eq!(ngram_delta(&stub, &seq, whole, Label::Hate).unwrap(), 0.0);
        let ab = ngrams.iter().find(|g| g.n == 2 && g.start == 0).unwrap();
        assert!((ngram_delta(&stub, &seq, ab, Label::Hate).unwrap() - 0.5).abs() < 1e-12);
        let flat = StubPredictor::new(ProbDist::hate(0.7).unwrap());
        for g in &ngrams {
            assert_eq!(ngram_delta(&flat, &seq, g, Label::Hate).unwrap(), 0.0);
        }
    }

    #[test]
    fn worked_example() {
        let s = token_scores(&worked_stub(), &tokenize("a b c"), &NgramWeights::default()).unwrap();
        assert_eq!(s.reference_class, Label::Hate);
        for (got, want) in s.raw.iter().zip([0.30, 0.29, 0.03]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        for (got, want) in s.normalized.iter().zip([0.4839, 0.4677, 0.0484]) {
            assert!((got - want).abs() < 5e-5, "{got} vs {want}");
        }
        assert_eq!(top_tokens(&s, 1).unwrap(), vec![0]);
    }

    #[test]
    fn constant_predictor_gives_uniform_scores() {
        let flat = StubPredictor::new(ProbDist::hate(0.2).unwrap());
        let s = token_scores(&flat, &tokenize("w x y z"), &NgramWeights::default()).unwrap();
        assert_eq!(s.reference_class, Label::NotHate);
        assert_eq!(s.normalized, vec![0.25; 4]);
    }

    #[test]
    fn top_tokens_ordering_and_ties() {
        let mk = |v: Vec<f64>| ExplanationScores {
            reference_class: Label::Hate,
            p_orig: 1.0,
            raw: v.clone(),
            normalized: v,
            probes: vec![],
        };
        assert_eq!(top_tokens(&mk(vec![0.5, 0.3, 0.2]), 2).unwrap(), vec![0, 1]);
        assert_eq!(top_tokens(&mk(vec![0.25; 4]), 2).unwrap(), vec![0, 1]);
        assert_eq!(top_tokens(&mk(vec![0.1, 0.45, 0.45]), 3).unwrap(), vec![1, 2, 0]);
        assert!(top_tokens(&mk(vec![0.5, 0.5]), 0).is_err());
        assert!(top_tokens(&mk(vec![0.5, 0.5]), 3).is_err());
    }

    #[test]
    fn occlusion_probes_mask_in_place() {
        let mut stub = StubPredictor::new(ProbDist::hate(0.9).unwrap());
        stub.insert(&["<MASK>", "b", "c"], ProbDist::hate(0.2).unwrap());
        let seq = tokenize("a b c");
        let ngrams = enumerate_ngrams(&seq).unwrap();
        assert_eq!(
            probe_input(&seq, &ngrams[3], ProbeMode::Occlude, "<MASK>").join(),
            "<MASK> <MASK> c"
        );
        let d = ngram_delta_with(&stub, &seq, &ngrams[0], Label::Hate, ProbeMode::Occlude).unwrap();
        assert!((d - 0.7).abs() < 1e-12);
        let s = Explainer::new(NgramWeights::default(), ProbeMode::Occlude)
            .scores(&stub, &seq)
            .unwrap();
        assert_eq!(top_tokens(&s, 1).unwrap(), vec![0]);
        assert!(s.raw[1] == 0.0 && s.raw[2] == 0.0);
        assert_eq!("occlude".parse::<ProbeMode>().unwrap(), ProbeMode::Occlude);
        assert!("drop".parse::<ProbeMode>().is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(NgramWeights::new(0.5, 0.3, 0.3).is_err());
        assert!(NgramWeights::new(1.2, -0.1, -0.1).is_err());
        assert!(NgramWeights::new(1.0, 0.0, 0.0).is_ok());
    }
}
