//! Two-stage attention-supervised training of the reference classifier.
//!
//! Both stages minimise `alpha * L_att + (1 - alpha) * L_cl` with per-sample
//! SGD. Stage 1 uses gold rationales as the attention target; stage 2 uses
//! binary masks over the top-k tokens of the n-gram explainability scores,
//! recomputed from the current model before every epoch.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, Language, RationaleVector, Sample};
use crate::error::{Error, Result};
use crate::predictor::{AttentionProfile, Forward, Parameters, Predictor, ProbDist, ReferenceAttentionClassifier};
use crate::xngram::{top_tokens, Explainer};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub alpha_stage1: f64,
    pub alpha_stage2: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha_stage1: 0.3,
            alpha_stage2: 0.6,
            epochs_stage1: 3,
            epochs_stage2: 3,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Defaults with the stage-2 weight tuned per language (0.7 for Hindi).
    pub fn for_language(language: Language) -> Self {
        let alpha_stage2 = match language {
            Language::Hindi => 0.7,
            _ => 0.6,
        };
        TrainingConfig {
            alpha_stage2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_stage1", self.alpha_stage1), ("alpha_stage2", self.alpha_stage2)] {
            check_alpha(a).map_err(|_| Error::arg(format!("{name} = {a} is outside [0, 1]")))?;
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::arg(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::arg(format!("alpha = {alpha} is outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_att: f64,
    pub l_cl: f64,
    pub l_total: f64,
}

/// `R / sum(R)`, or `None` for an all-zero rationale.
pub fn rationale_target(rationale: &RationaleVector) -> Option<Vec<f64>> {
    let ones = rationale.ones();
    if ones == 0 {
        return None;
    }
    let w = 1.0 / ones as f64;
    Some(rationale.bits().iter().map(|&b| f64::from(b) * w).collect())
}

/// Cross-entropy between the normalized rationale and the attention weights;
/// zero for an all-zero rationale.
pub fn attention_loss(profile: &AttentionProfile, rationale: &RationaleVector) -> Result<f64> {
    if profile.weights.len() != rationale.len() {
        return Err(Error::arg(format!(
            "attention has {} weights but rationale has {} bits",
            profile.weights.len(),
            rationale.len()
        )));
    }
    Ok(match rationale_target(rationale) {
        None => 0.0,
        Some(target) => -target
            .iter()
            .zip(&profile.weights)
            .filter(|(r, _)| **r > 0.0)
            .map(|(r, a)| r * a.max(f64::MIN_POSITIVE).ln())
            .sum::<f64>(),
    })
}

/// Negative log-likelihood of the true class, with the probability floored at 1e-12.
pub fn classification_loss(pred: &ProbDist, label: Label) -> f64 {
    -pred.prob(label).max(PROB_FLOOR).ln()
}

pub fn combined_loss(l_att: f64, l_cl: f64, alpha: f64) -> Result<LossRecord> {
    check_alpha(alpha)?;
    Ok(LossRecord {
        l_att,
        l_cl,
        l_total: alpha * l_att + (1.0 - alpha) * l_cl,
    })
}

/// Number of top-scoring tokens used as a stage-2 attention target.
pub fn stage2_k(len: usize) -> usize {
    if len >= 10 {
        5
    } else {
        len.div_ceil(2)
    }
}

/// Gradient of the combined loss. Embedding rows are stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub rows: BTreeMap<usize, Vec<f64>>,
    pub cls: Vec<f64>,
    pub head: Vec<f64>,
    pub bias: [f64; 2],
}

impl Gradient {
    /// Dense copy laid out like [`Parameters`].
    pub fn to_dense(&self, like: &Parameters) -> Parameters {
        let mut dense = like.zeros_like();
        let d = like.dim;
        for (&id, row) in &self.rows {
            dense.embeddings[id * d..(id + 1) * d].copy_from_slice(row);
        }
        dense.cls.clone_from(&self.cls);
        dense.head.clone_from(&self.head);
        dense.bias = self.bias;
        dense
    }
}

fn log_softmax_at(scores: &[f64], i: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores[i] - lse
}

fn losses(fwd: &Forward, target: Option<&[f64]>, label: Label, alpha: f64) -> Result<LossRecord> {
    let l_att = match target {
        None => 0.0,
        Some(t) => -t
            .iter()
            .enumerate()
            .filter(|(_, r)| **r > 0.0)
            .map(|(i, r)| r * log_softmax_at(&fwd.scores, i))
            .sum::<f64>(),
    };
    combined_loss(l_att, classification_loss(&fwd.probs, label), alpha)
}

/// Combined loss for one sample without computing gradients.
pub fn sample_loss(
    model: &ReferenceAttentionClassifier,
    ids: &[usize],
    target: Option<&[f64]>,
    label: Label,
    alpha: f64,
) -> Result<LossRecord> {
    losses(&model.forward_ids(ids)?, target, label, alpha)
}

/// Loss and analytic gradient for one sample. `target`, when present, must be
/// a distribution over the sample's tokens.
pub fn loss_and_gradient(
    model: &ReferenceAttentionClassifier,
    ids: &[usize],
    target: Option<&[f64]>,
    label: Label,
    alpha: f64,
) -> Result<(LossRecord, Gradient)> {
    if let Some(t) = target {
        if t.len() != ids.len() {
            return Err(Error::arg("attention target length differs from sequence length"));
        }
    }
    let fwd = model.forward_ids(ids)?;
    let record = losses(&fwd, target, label, alpha)?;
    let p = model.params();
    let d = p.dim;

    // dL/dlogits; the floored NLL is flat where the floor is active.
    let y = label.class_index();
    let probs = [fwd.probs.p_hate, fwd.probs.p_not_hate];
    let mut g_logit = [0.0; 2];
    if probs[y] >= PROB_FLOOR {
        for k in 0..2 {
            let onehot = if k == y { 1.0 } else { 0.0 };
            g_logit[k] = (1.0 - alpha) * (probs[k] - onehot);
        }
    }

    let mut head = vec![0.0; d * 2];
    let mut g_pooled = vec![0.0; d];
    for j in 0..d {
        head[j * 2] = fwd.pooled[j] * g_logit[0];
        head[j * 2 + 1] = fwd.pooled[j] * g_logit[1];
        g_pooled[j] = p.head[j * 2] * g_logit[0] + p.head[j * 2 + 1] * g_logit[1];
    }

    // pooled = sum_i a_i h_i
    let a = &fwd.attention;
    let g_attn: Vec<f64> = ids
        .iter()
        .map(|&id| crate::predictor::dot(p.row(id), &g_pooled))
        .collect();
    let weighted: f64 = a.iter().zip(&g_attn).map(|(a, g)| a * g).sum();
    let mut g_score: Vec<f64> = a.iter().zip(&g_attn).map(|(a, g)| a * (g - weighted)).collect();
    if let Some(t) = target {
        // attention cross-entropy through the softmax: alpha * (a - target)
        for ((gs, a), r) in g_score.iter_mut().zip(a).zip(t) {
            *gs += alpha * (a - r);
        }
    }

    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut cls = vec![0.0; d];
    for (i, &id) in ids.iter().enumerate() {
        let h = p.row(id);
        let row = rows.entry(id).or_insert_with(|| vec![0.0; d]);
        for j in 0..d {
            row[j] += a[i] * g_pooled[j] + g_score[i] * p.cls[j];
            cls[j] += g_score[i] * h[j];
        }
    }
    Ok((
        record,
        Gradient {
            rows,
            cls,
            head,
            bias: g_logit,
        },
    ))
}

fn apply(params: &mut Parameters, grad: &Gradient, lr: f64) {
    let d = params.dim;
    for (&id, row) in &grad.rows {
        for (w, g) in params.embeddings[id * d..(id + 1) * d].iter_mut().zip(row) {
            *w -= lr * g;
        }
    }
    for (w, g) in params.cls.iter_mut().zip(&grad.cls) {
        *w -= lr * g;
    }
    for (w, g) in params.head.iter_mut().zip(&grad.head) {
        *w -= lr * g;
    }
    for (w, g) in params.bias.iter_mut().zip(&grad.bias) {
        *w -= lr * g;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1")]
    Stage1,
    #[serde(rename = "stage2")]
    Stage2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

/// Mean losses over one epoch plus post-epoch training accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub l_att: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub train_accuracy: f64,
}

pub fn write_trace_csv<W: Write>(trace: &[EpochRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,stage,l_att,l_cl,l_total,train_accuracy")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.stage.as_str(),
            r.l_att,
            r.l_cl,
            r.l_total,
            r.train_accuracy
        )?;
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
    let stream = match stage {
        Stage::Stage1 => 1u64,
        Stage::Stage2 => 2u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream << 32 | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn accuracy(model: &ReferenceAttentionClassifier, samples: &[&Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|s| model.predict(&s.tokens).map(|p| p.argmax() == s.label).unwrap_or(false))
        .count();
    correct as f64 / samples.len() as f64
}

fn run_epoch(
    model: &mut ReferenceAttentionClassifier,
    samples: &[&Sample],
    targets: &[Option<Vec<f64>>],
    alpha: f64,
    cfg: &TrainingConfig,
    stage: Stage,
    epoch: usize,
) -> Result<EpochRecord> {
    let mut sums = [0.0; 3];
    for i in epoch_order(samples.len(), cfg.seed, stage, epoch) {
        let s = samples[i];
        let ids = model.ids(&s.tokens);
        let (rec, grad) = loss_and_gradient(model, &ids, targets[i].as_deref(), s.label, alpha)?;
        apply(model.params_mut(), &grad, cfg.learning_rate);
        sums[0] += rec.l_att;
        sums[1] += rec.l_cl;
        sums[2] += rec.l_total;
    }
    let n = samples.len().max(1) as f64;
    Ok(EpochRecord {
        epoch,
        stage,
        l_att: sums[0] / n,
        l_cl: sums[1] / n,
        l_total: sums[2] / n,
        train_accuracy: accuracy(model, samples),
    })
}

fn trainable(corpus: &Corpus) -> Result<Vec<&Sample>> {
    if corpus.is_empty() {
        return Err(Error::arg("cannot train on an empty corpus"));
    }
    Ok(corpus.samples.iter().filter(|s| !s.tokens.is_empty()).collect())
}

/// Stage 1: attention supervised by gold rationales. Samples without a
/// rationale (or with an all-zero one) contribute classification loss only.
pub fn stage1_train(
    model: &mut ReferenceAttentionClassifier,
    corpus: &Corpus,
    cfg: &TrainingConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let samples = trainable(corpus)?;
    let targets: Vec<Option<Vec<f64>>> = samples
        .iter()
        .map(|s| s.gold().as_ref().and_then(rationale_target))
        .collect();
    (1..=cfg.epochs_stage1)
        .map(|epoch| run_epoch(model, &samples, &targets, cfg.alpha_stage1, cfg, Stage::Stage1, epoch))
        .collect()
}

/// Binary mask over the top `stage2_k(L)` tokens by explainability score.
pub fn saliency_mask<P: Predictor + ?Sized>(
    predictor: &P,
    sample: &Sample,
    explainer: &Explainer,
) -> Result<RationaleVector> {
    let len = sample.tokens.len();
    let scores = explainer.scores(predictor, &sample.tokens)?;
    let top = top_tokens(&scores, stage2_k(len))?;
    Ok(RationaleVector::from_indices(len, top))
}

/// Stage 2: attention supervised by n-gram saliency masks of the current model.
pub fn stage2_train(
    model: &mut ReferenceAttentionClassifier,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    explainer: &Explainer,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let samples = trainable(corpus)?;
    let mut trace = Vec::with_capacity(cfg.epochs_stage2);
    for epoch in 1..=cfg.epochs_stage2 {
        let snapshot: &ReferenceAttentionClassifier = model;
        let targets = samples
            .par_iter()
            .map(|s| saliency_mask(snapshot, s, explainer).map(|m| rationale_target(&m)))
            .collect::<Result<Vec<_>>>()?;
        trace.push(run_epoch(
            model,
            &samples,
            &targets,
            cfg.alpha_stage2,
            cfg,
            Stage::Stage2,
            epoch,
        )?);
    }
    Ok(trace)
}

/// Stage 1 followed by stage 2; the trace covers both.
pub fn train_two_stage(
    model: &mut ReferenceAttentionClassifier,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    explainer: &Explainer,
) -> Result<Vec<EpochRecord>> {
    let mut trace = stage1_train(model, corpus, cfg)?;
    trace.extend(stage2_train(model, corpus, cfg, explainer)?);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::predictor::DEFAULT_MASK;
    use proptest::prelude::*;

    fn rv(bits: &[u8]) -> RationaleVector {
        RationaleVector::new(bits.to_vec()).unwrap()
    }

    fn profile(w: &[f64]) -> AttentionProfile {
        AttentionProfile { weights: w.to_vec() }
    }

    #[test]
    fn attention_loss_examples() {
        assert_eq!(
            attention_loss(&profile(&[0.2, 0.3, 0.5]), &rv(&[0, 0, 0])).unwrap(),
            0.0
        );
        let l = attention_loss(&profile(&[0.5, 0.5]), &rv(&[1, 1])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let eps = 1e-9;
        assert!(attention_loss(&profile(&[1.0 - eps, eps]), &rv(&[1, 0])).unwrap() < 1e-8);
        assert!(attention_loss(&profile(&[0.5, 0.5]), &rv(&[1, 0, 1])).is_err());
    }

    #[test]
    fn classification_loss_examples() {
        assert!(classification_loss(&ProbDist::new(1.0, 0.0).unwrap(), Label::Hate) < 1e-12);
        let ln2 = std::f64::consts::LN_2;
        assert!((classification_loss(&ProbDist::hate(0.5).unwrap(), Label::NotHate) - ln2).abs() < 1e-12);
        let l = classification_loss(&ProbDist::new(0.25, 0.75).unwrap(), Label::Hate);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        // floored, finite
        let l = classification_loss(&ProbDist::new(1.0, 0.0).unwrap(), Label::NotHate);
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(1.0, 2.0, 0.0).unwrap().l_total, 2.0);
        assert_eq!(combined_loss(1.0, 2.0, 1.0).unwrap().l_total, 1.0);
        assert!((combined_loss(1.0, 2.0, 0.3).unwrap().l_total - 1.7).abs() < 1e-12);
        assert!(combined_loss(1.0, 2.0, 1.5).is_err());
        assert!(combined_loss(1.0, 2.0, -0.1).is_err());
    }

    #[test]
    fn stage2_k_examples() {
        assert_eq!(stage2_k(12), 5);
        assert_eq!(stage2_k(7), 4);
        assert_eq!(stage2_k(1), 1);
        assert_eq!(stage2_k(4), 2);
    }

    #[test]
    fn language_defaults() {
        assert_eq!(TrainingConfig::for_language(Language::Telugu).alpha_stage2, 0.6);
        assert_eq!(TrainingConfig::for_language(Language::English).alpha_stage2, 0.6);
        assert_eq!(TrainingConfig::for_language(Language::Hindi).alpha_stage2, 0.7);
        assert_eq!(TrainingConfig::default().alpha_stage1, 0.3);
        assert_eq!(TrainingConfig::default().epochs_stage1, 3);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let corpus = crate::synthetic::trigger_corpus(30, 1);
        let cfg = TrainingConfig {
            epochs_stage1: 0,
            epochs_stage2: 0,
            ..Default::default()
        };
        let mut model = ReferenceAttentionClassifier::for_corpus(&corpus, 8, 1, DEFAULT_MASK).unwrap();
        let before = model.clone();
        assert!(stage1_train(&mut model, &corpus, &cfg).unwrap().is_empty());
        assert!(stage2_train(&mut model, &corpus, &cfg, &Explainer::default())
            .unwrap()
            .is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let mut model = ReferenceAttentionClassifier::new(4, 1, DEFAULT_MASK).unwrap();
        assert!(stage1_train(&mut model, &Corpus::default(), &TrainingConfig::default()).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = crate::synthetic::trigger_corpus(40, 2);
        let cfg = TrainingConfig {
            epochs_stage1: 2,
            epochs_stage2: 1,
            seed: 11,
            ..Default::default()
        };
        let run = || {
            let mut m = ReferenceAttentionClassifier::for_corpus(&corpus, 8, 3, DEFAULT_MASK).unwrap();
            let trace = train_two_stage(&mut m, &corpus, &cfg, &Explainer::default()).unwrap();
            (m, trace)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(a.params().all_finite());
    }

    #[test]
    fn saliency_mask_has_k_ones() {
        let model = ReferenceAttentionClassifier::new(8, 1, DEFAULT_MASK).unwrap();
        let sample = Sample::new("x", "w x y z", Label::Hate, None, None).unwrap();
        let mask = saliency_mask(&model, &sample, &Explainer::default()).unwrap();
        assert_eq!(mask.ones(), 2);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        let rec = EpochRecord {
            epoch: 1,
            stage: Stage::Stage2,
            l_att: 0.5,
            l_cl: 0.25,
            l_total: 0.4,
            train_accuracy: 1.0,
        };
        write_trace_csv(&[rec], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,stage,l_att,l_cl,l_total,train_accuracy\n1,stage2,0.5,0.25,0.4,1\n"
        );
    }

    #[test]
    fn loss_from_scores_matches_profile_loss() {
        let mut model = ReferenceAttentionClassifier::new(6, 4, DEFAULT_MASK).unwrap();
        for w in ["p", "q", "r"] {
            model.add_token(w);
        }
        let seq = tokenize("p q r q");
        let r = rv(&[0, 1, 1, 0]);
        let ids = model.ids(&seq);
        let t = rationale_target(&r).unwrap();
        let rec = sample_loss(&model, &ids, Some(&t), Label::Hate, 1.0).unwrap();
        let direct = attention_loss(&model.attention(&seq).unwrap(), &r).unwrap();
        assert!((rec.l_att - direct).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn combined_loss_is_affine_in_alpha(att in 0.0f64..5.0, cl in 0.0f64..5.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let la = combined_loss(att, cl, a).unwrap().l_total;
            let lb = combined_loss(att, cl, b).unwrap().l_total;
            if att > cl && a < b {
                prop_assert!(la <= lb + 1e-12);
            }
            let mid = combined_loss(att, cl, (a + b) / 2.0).unwrap().l_total;
            prop_assert!((mid - (la + lb) / 2.0).abs() < 1e-9);
        }

        #[test]
        fn attention_loss_minimized_at_target(bits in prop::collection::vec(0u8..2, 1..8), noise in prop::collection::vec(0.01f64..1.0, 8)) {
            let r = rv(&bits);
            prop_assume!(!r.is_all_zero());
            let t = rationale_target(&r).unwrap();
            let entropy: f64 = -t.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            let at_target = attention_loss(&profile(&t), &r).unwrap();
            prop_assert!((at_target - entropy).abs() < 1e-12);
            let z: f64 = noise[..bits.len()].iter().sum();
            let other: Vec<f64> = noise[..bits.len()].iter().map(|x| x / z).collect();
            prop_assert!(attention_loss(&profile(&other), &r).unwrap() >= entropy - 1e-12);
        }
    }
}
