//! Inter-annotator agreement (Cohen's and Fleiss' kappa) and majority-vote
//! aggregation of annotator rationales.

use serde::Serialize;

use crate::corpus::{Corpus, RationaleVector};
use crate::error::{Error, Result};

/// Per-item category tallies: `tallies[item][category]` raters chose `category`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMatrix {
    tallies: Vec<Vec<usize>>,
    n_annotators: usize,
}

impl AnnotationMatrix {
    pub fn from_tallies(tallies: Vec<Vec<usize>>) -> Result<Self> {
        let first = tallies
            .first()
            .ok_or_else(|| Error::arg("annotation matrix has no items"))?;
        let n_categories = first.len();
        let n_annotators: usize = first.iter().sum();
        for (i, row) in tallies.iter().enumerate() {
            if row.len() != n_categories {
                return Err(Error::arg(format!(
                    "item {i} has {} categories, expected {n_categories}",
                    row.len()
                )));
            }
            if row.iter().sum::<usize>() != n_annotators {
                return Err(Error::arg(format!("item {i} does not sum to {n_annotators} ratings")));
            }
        }
        Ok(AnnotationMatrix { tallies, n_annotators })
    }

    /// Tallies binary labels where `ratings[annotator][item]` is 0 or 1.
    pub fn from_binary_ratings(ratings: &[&[u8]]) -> Result<Self> {
        let n_items = ratings.first().map_or(0, |r| r.len());
        if ratings.iter().any(|r| r.len() != n_items) {
            return Err(Error::arg("annotators rated different numbers of items"));
        }
        let tallies = (0..n_items)
            .map(|item| {
                let ones = ratings.iter().filter(|r| r[item] == 1).count();
                vec![ratings.len() - ones, ones]
            })
            .collect();
        Self::from_tallies(tallies)
    }

    pub fn n_items(&self) -> usize {
        self.tallies.len()
    }

    pub fn n_annotators(&self) -> usize {
        self.n_annotators
    }

    pub fn n_categories(&self) -> usize {
        self.tallies[0].len()
    }

    pub fn tallies(&self) -> &[Vec<usize>] {
        &self.tallies
    }
}

/// Cohen's kappa between two raters over the same items.
pub fn cohen_kappa<T: PartialEq>(ratings_a: &[T], ratings_b: &[T]) -> Result<f64> {
    if ratings_a.len() != ratings_b.len() {
        return Err(Error::arg(format!(
            "rating lists differ in length ({} vs {})",
            ratings_a.len(),
            ratings_b.len()
        )));
    }
    if ratings_a.is_empty() {
        return Err(Error::arg("cohen_kappa needs at least one rating"));
    }
    let n = ratings_a.len() as f64;
    let agree = ratings_a.iter().zip(ratings_b).filter(|(a, b)| a == b).count();
    if agree == ratings_a.len() {
        return Ok(1.0);
    }
    let p_o = agree as f64 / n;

    let mut categories: Vec<&T> = Vec::new();
    for r in ratings_a.iter().chain(ratings_b) {
        if !categories.contains(&r) {
            categories.push(r);
        }
    }
    let p_e: f64 = categories
        .iter()
        .map(|c| {
            let ca = ratings_a.iter().filter(|r| r == c).count() as f64;
            let cb = ratings_b.iter().filter(|r| r == c).count() as f64;
            (ca / n) * (cb / n)
        })
        .sum();
    if p_e >= 1.0 {
        return Err(Error::Undefined(format!(
            "cohen kappa: chance agreement is 1 but observed agreement is {p_o}"
        )));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Fleiss' kappa over per-item category tallies.
pub fn fleiss_kappa(matrix: &AnnotationMatrix) -> Result<f64> {
    let n_items = matrix.n_items();
    let raters = matrix.n_annotators();
    if n_items < 2 || raters < 2 {
        return Err(Error::arg(format!(
            "fleiss kappa needs >= 2 items and >= 2 annotators (got {n_items} x {raters})"
        )));
    }
    let r = raters as f64;
    let mut p_bar = 0.0;
    let mut category_totals = vec![0usize; matrix.n_categories()];
    for row in matrix.tallies() {
        let sq: usize = row.iter().map(|&c| c * c).sum();
        p_bar += (sq - raters) as f64 / (r * (r - 1.0));
        for (t, &c) in category_totals.iter_mut().zip(row) {
            *t += c;
        }
    }
    p_bar /= n_items as f64;
    let total = (n_items * raters) as f64;
    let p_e: f64 = category_totals
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p
        })
        .sum();
    if p_e >= 1.0 {
        return if p_bar >= 1.0 {
            Ok(1.0)
        } else {
            Err(Error::Undefined("fleiss kappa: chance agreement is 1".into()))
        };
    }
    if p_bar >= 1.0 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Per-token majority vote; a token is marked when more than half the
/// annotators marked it (2 of 3).
pub fn aggregate_rationales(vectors: &[RationaleVector]) -> Result<RationaleVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::arg("no rationale vectors to aggregate"))?;
    let len = first.len();
    if vectors.iter().any(|v| v.len() != len) {
        return Err(Error::arg("rationale vectors differ in length"));
    }
    let need = vectors.len() / 2 + 1;
    let marked = (0..len).filter(|&i| vectors.iter().filter(|v| v.bits()[i] == 1).count() >= need);
    Ok(RationaleVector::from_indices(len, marked))
}

/// Dataset-level agreement over flattened per-token rationale bits.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AgreementReport {
    /// Always "token": kappas are computed over flattened per-token bits.
    pub unit: &'static str,
    pub n_samples: usize,
    pub n_tokens: usize,
    pub n_annotators: usize,
    /// Pairwise Cohen kappa, scaled by 100.
    pub cohen: Vec<PairwiseKappa>,
    /// Fleiss kappa over all annotators, scaled by 100.
    pub fleiss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PairwiseKappa {
    pub annotators: (usize, usize),
    pub kappa: Option<f64>,
}

/// Collects per-annotator bit streams across every sample that carries the
/// full annotator set.
pub fn flatten_annotations(corpus: &Corpus) -> (usize, Vec<Vec<u8>>) {
    let n_annotators = corpus
        .samples
        .iter()
        .filter_map(|s| s.annotator_rationales.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    let mut streams = vec![Vec::new(); n_annotators];
    let mut used = 0;
    for s in &corpus.samples {
        let Some(rs) = &s.annotator_rationales else { continue };
        if rs.len() != n_annotators {
            continue;
        }
        used += 1;
        for (stream, r) in streams.iter_mut().zip(rs) {
            stream.extend_from_slice(r.bits());
        }
    }
    (used, streams)
}

pub fn corpus_agreement(corpus: &Corpus) -> AgreementReport {
    let (n_samples, streams) = flatten_annotations(corpus);
    let n_annotators = streams.len();
    let n_tokens = streams.first().map_or(0, Vec::len);
    let mut cohen = Vec::new();
    for a in 0..n_annotators {
        for b in a + 1..n_annotators {
            let kappa = cohen_kappa(&streams[a], &streams[b]).ok().map(|k| k * 100.0);
            cohen.push(PairwiseKappa {
                annotators: (a, b),
                kappa,
            });
        }
    }
    let refs: Vec<&[u8]> = streams.iter().map(Vec::as_slice).collect();
    let fleiss = AnnotationMatrix::from_binary_ratings(&refs)
        .and_then(|m| fleiss_kappa(&m))
        .ok()
        .map(|k| k * 100.0);
    AgreementReport {
        unit: "token",
        n_samples,
        n_tokens,
        n_annotators,
        cohen,
        fleiss,
    }
}

/// Per-sample Fleiss kappa over that sample's tokens; `None` where undefined.
pub fn per_sample_fleiss(corpus: &Corpus) -> Vec<(String, Option<f64>)> {
    corpus
        .samples
        .iter()
        .filter_map(|s| {
            let rs = s.annotator_rationales.as_ref()?;
            let refs: Vec<&[u8]> = rs.iter().map(|r| r.bits()).collect();
            let k = AnnotationMatrix::from_binary_ratings(&refs)
                .and_then(|m| fleiss_kappa(&m))
                .ok();
            Some((s.id.clone(), k))
        })
        .collect()
}
