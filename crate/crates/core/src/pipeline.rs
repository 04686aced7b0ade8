//! End-to-end phases: explanation, fusion, evaluation, alpha sweeps and
//! stage ablations. Per-sample work runs in parallel; results keep corpus
//! order so every output is deterministic.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Label};
use crate::error::{Error, Result};
use crate::fusion::{ExplanationSets, LlmClient};
use crate::metrics::{
    classification_metrics, comprehensiveness, corpus_token_f1, iou_f1, sufficiency, EvaluatedCounts, IndexSet,
    MetricReport, TokenF1Mode, FAITHFULNESS_TOP_K,
};
use crate::predictor::{Predictor, ReferenceAttentionClassifier};
use crate::trainer::{stage1_train, stage2_k, stage2_train, EpochRecord, TrainingConfig};
use crate::xngram::{top_k_indices, Explainer};

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One line of the explanations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub id: String,
    pub predicted_class: Label,
    pub p_orig: f64,
    #[serde(rename = "E")]
    pub raw: Vec<f64>,
    #[serde(rename = "E_norm")]
    pub normalized: Vec<f64>,
    pub top_tokens: Vec<usize>,
}

/// Scores every nonempty sample; `top_tokens` holds the `stage2_k(L)` best.
pub fn explain_corpus<P: Predictor + ?Sized>(
    predictor: &P,
    corpus: &Corpus,
    explainer: &Explainer,
) -> Result<Vec<Explanation>> {
    corpus
        .samples
        .par_iter()
        .filter(|s| !s.tokens.is_empty())
        .map(|s| {
            let scores = explainer.scores(predictor, &s.tokens)?;
            let top_tokens = top_k_indices(&scores.normalized, stage2_k(s.tokens.len()))?;
            Ok(Explanation {
                id: s.id.clone(),
                predicted_class: scores.reference_class,
                p_orig: scores.p_orig,
                raw: scores.raw,
                normalized: scores.normalized,
                top_tokens,
            })
        })
        .collect()
}

/// One line of the fused-explanations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRecord {
    pub id: String,
    #[serde(flatten)]
    pub sets: ExplanationSets,
}

pub fn fuse_explanations(
    explanations: &[Explanation],
    corpus: &Corpus,
    client: &LlmClient,
) -> Result<Vec<FusedRecord>> {
    let by_id: HashMap<&str, &crate::corpus::Sample> = corpus.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    explanations
        .par_iter()
        .map(|e| {
            let sample = by_id.get(e.id.as_str()).ok_or_else(|| Error::Validation {
                id: e.id.clone(),
                message: "explanation refers to a sample not in the corpus".into(),
            })?;
            let llm = client.consult(sample)?;
            Ok(FusedRecord {
                id: e.id.clone(),
                sets: ExplanationSets::new(e.top_tokens.iter().copied().collect(), llm.resolved),
            })
        })
        .collect()
}

pub fn mean_agreement(records: &[FusedRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    Some(records.iter().map(|r| r.sets.agreement).sum::<f64>() / records.len() as f64)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(items)
}

/// Full metric report on `corpus`. Plausibility compares the fused set (when
/// given) or the explanation's top tokens against gold rationales, over
/// samples whose gold rationale is nonempty. Faithfulness uses the top five
/// tokens of each explanation.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    corpus: &Corpus,
    explanations: &[Explanation],
    fused: Option<&[FusedRecord]>,
    token_f1_mode: TokenF1Mode,
) -> Result<MetricReport> {
    let samples: Vec<_> = corpus.samples.iter().filter(|s| !s.tokens.is_empty()).collect();
    let preds = samples
        .par_iter()
        .map(|s| predictor.predict(&s.tokens).map(|p| p.argmax()))
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let cls = classification_metrics(&preds, &golds)?;

    let expl: HashMap<&str, &Explanation> = explanations.iter().map(|e| (e.id.as_str(), e)).collect();
    let fused: Option<HashMap<&str, &FusedRecord>> = fused.map(|f| f.iter().map(|r| (r.id.as_str(), r)).collect());
    let missing = |id: &str| Error::Validation {
        id: id.to_string(),
        message: "no explanation for this sample".into(),
    };

    let mut pairs: Vec<(IndexSet, IndexSet)> = Vec::new();
    for s in &samples {
        let Some(gold) = s.gold() else { continue };
        if gold.is_all_zero() {
            continue;
        }
        let predicted: IndexSet = match fused.as_ref().and_then(|f| f.get(s.id.as_str())) {
            Some(r) => r.sets.e_final.clone(),
            None => expl
                .get(s.id.as_str())
                .ok_or_else(|| missing(&s.id))?
                .top_tokens
                .iter()
                .copied()
                .collect(),
        };
        pairs.push((predicted, gold.indices()));
    }
    let (token_f1, n_token) = corpus_token_f1(&pairs, token_f1_mode);
    let iou = if n_token > 0 { Some(iou_f1(&pairs)?) } else { None };

    let faith = samples
        .par_iter()
        .map(|s| {
            let e = expl.get(s.id.as_str()).ok_or_else(|| missing(&s.id))?;
            if e.normalized.len() != s.tokens.len() {
                return Err(Error::Validation {
                    id: s.id.clone(),
                    message: "explanation length differs from token count".into(),
                });
            }
            let k = FAITHFULNESS_TOP_K.min(s.tokens.len());
            let rationale: IndexSet = top_k_indices(&e.normalized, k)?.into_iter().collect();
            Ok((
                comprehensiveness(predictor, &s.tokens, &rationale)?,
                sufficiency(predictor, &s.tokens, &rationale)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_faith = faith.len();
    let mean = |f: fn(&(f64, f64)) -> f64| (n_faith > 0).then(|| faith.iter().map(f).sum::<f64>() / n_faith as f64);

    Ok(MetricReport {
        accuracy: cls.accuracy,
        f1_hate: cls.f1_hate,
        macro_f1: cls.macro_f1,
        token_f1,
        iou_f1: iou,
        comprehensiveness: mean(|p| p.0),
        sufficiency: mean(|p| p.1),
        n_evaluated: EvaluatedCounts {
            classification: samples.len(),
            token_f1: n_token,
            iou_f1: n_token,
            faithfulness: n_faith,
        },
    })
}

/// Explains `test` with the model and evaluates without LLM fusion.
pub fn evaluate_model(
    model: &ReferenceAttentionClassifier,
    test: &Corpus,
    explainer: &Explainer,
) -> Result<MetricReport> {
    let explanations = explain_corpus(model, test, explainer)?;
    evaluate(model, test, &explanations, None, TokenF1Mode::Mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub macro_f1: f64,
}

/// Re-runs stage 2 from the same stage-1 model once per alpha and scores
/// classification on `test`.
pub fn alpha_sweep(
    stage1_model: &ReferenceAttentionClassifier,
    train: &Corpus,
    test: &Corpus,
    cfg: &TrainingConfig,
    explainer: &Explainer,
    alphas: &[f64],
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::arg("alpha sweep needs at least one alpha"));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let mut model = stage1_model.clone();
            let run_cfg = TrainingConfig {
                alpha_stage2: alpha,
                ..*cfg
            };
            stage2_train(&mut model, train, &run_cfg, explainer)?;
            let preds = test
                .samples
                .iter()
                .map(|s| model.predict(&s.tokens).map(|p| p.argmax()))
                .collect::<Result<Vec<_>>>()?;
            let golds: Vec<Label> = test.samples.iter().map(|s| s.label).collect();
            let m = classification_metrics(&preds, &golds)?;
            Ok(SweepRow {
                alpha,
                accuracy: m.accuracy,
                f1: m.f1_hate,
                macro_f1: m.macro_f1,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "alpha,accuracy,f1,macro_f1")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.alpha, r.accuracy, r.f1, r.macro_f1)?;
    }
    Ok(())
}

/// Which training stages carry attention supervision. A disabled stage still
/// runs its epochs, with alpha forced to 0 (classification loss only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    Both,
    Stage1Only,
    Stage2Only,
    Neither,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::Both,
        AblationArm::Stage1Only,
        AblationArm::Stage2Only,
        AblationArm::Neither,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Both => "both",
            AblationArm::Stage1Only => "stage1_only",
            AblationArm::Stage2Only => "stage2_only",
            AblationArm::Neither => "neither",
        }
    }

    pub fn config(self, cfg: &TrainingConfig) -> TrainingConfig {
        let (s1, s2) = match self {
            AblationArm::Both => (true, true),
            AblationArm::Stage1Only => (true, false),
            AblationArm::Stage2Only => (false, true),
            AblationArm::Neither => (false, false),
        };
        TrainingConfig {
            alpha_stage1: if s1 { cfg.alpha_stage1 } else { 0.0 },
            alpha_stage2: if s2 { cfg.alpha_stage2 } else { 0.0 },
            ..*cfg
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub arm: AblationArm,
    pub report: MetricReport,
    pub trace: Vec<EpochRecord>,
}

/// Trains one arm from `init`.
pub fn ablate_arm(
    arm: AblationArm,
    init: &ReferenceAttentionClassifier,
    train: &Corpus,
    test: &Corpus,
    cfg: &TrainingConfig,
    explainer: &Explainer,
) -> Result<AblationResult> {
    let mut model = init.clone();
    let arm_cfg = arm.config(cfg);
    let mut trace = stage1_train(&mut model, train, &arm_cfg)?;
    trace.extend(stage2_train(&mut model, train, &arm_cfg, explainer)?);
    Ok(AblationResult {
        arm,
        report: evaluate_model(&model, test, explainer)?,
        trace,
    })
}

/// Trains one model per arm from the same initialization.
pub fn ablate(
    init: &ReferenceAttentionClassifier,
    train: &Corpus,
    test: &Corpus,
    cfg: &TrainingConfig,
    explainer: &Explainer,
) -> Result<Vec<AblationResult>> {
    AblationArm::ALL
        .iter()
        .map(|&arm| ablate_arm(arm, init, train, test, cfg, explainer))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, RationaleVector, Sample};
    use crate::predictor::{ProbDist, StubPredictor};

    #[test]
    fn explanation_json_field_names() {
        let e = Explanation {
            id: "a".into(),
            predicted_class: Label::Hate,
            p_orig: 0.9,
            raw: vec![0.1],
            normalized: vec![1.0],
            top_tokens: vec![0],
        };
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        for k in ["id", "predicted_class", "p_orig", "E", "E_norm", "top_tokens"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["predicted_class"], "HATE");
    }

    #[test]
    fn fused_json_field_names() {
        let r = FusedRecord {
            id: "a".into(),
            sets: ExplanationSets::new([0].into(), [1].into()),
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["id", "e_x", "e_llm", "e_final", "agreement"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let back: FusedRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ablation_arm_alphas() {
        let cfg = TrainingConfig::default();
        assert_eq!(AblationArm::Neither.config(&cfg).alpha_stage1, 0.0);
        assert_eq!(AblationArm::Neither.config(&cfg).alpha_stage2, 0.0);
        assert_eq!(AblationArm::Stage1Only.config(&cfg).alpha_stage1, 0.3);
        assert_eq!(AblationArm::Stage2Only.config(&cfg).alpha_stage2, 0.6);
    }

    // Three samples scored with a stub; expected numbers worked by hand.
    #[test]
    fn evaluate_matches_hand_computation() {
        let mk = |id: &str, text: &str, label, gold: &[u8]| {
            Sample::new(
                id,
                text,
                label,
                Some(RationaleVector::new(gold.to_vec()).unwrap()),
                None,
            )
            .unwrap()
        };
        let corpus = Corpus::new(
            Language::Other,
            vec![
                mk("a", "x bad", Label::Hate, &[0, 1]),
                mk("b", "y z", Label::NotHate, &[0, 0]),
                mk("c", "bad w", Label::Hate, &[1, 0]),
            ],
        )
        .unwrap();
        let mut stub = StubPredictor::new(ProbDist::hate(0.5).unwrap());
        stub.insert(&["x", "bad"], ProbDist::hate(0.9).unwrap());
        stub.insert(&["y", "z"], ProbDist::hate(0.2).unwrap());
        stub.insert(&["bad", "w"], ProbDist::hate(0.4).unwrap());
        // Explanations: a -> {1}, c -> {1} (wrong), b -> {0}
        let ex = |id: &str, norm: Vec<f64>, top: Vec<usize>| Explanation {
            id: id.into(),
            predicted_class: Label::Hate,
            p_orig: 0.0,
            raw: norm.clone(),
            normalized: norm,
            top_tokens: top,
        };
        let explanations = vec![
            ex("a", vec![0.2, 0.8], vec![1]),
            ex("b", vec![0.6, 0.4], vec![0]),
            ex("c", vec![0.3, 0.7], vec![1]),
        ];
        let r = evaluate(&stub, &corpus, &explanations, None, TokenF1Mode::Mean).unwrap();
        // preds: H, N, N vs golds H, N, H
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1_hate - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.macro_f1 - (2.0 / 3.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // plausibility over a, c: F1 1 and 0; one IOU hit of two
        assert_eq!(r.token_f1, Some(0.5));
        assert_eq!(r.iou_f1, Some(0.5));
        assert_eq!(r.n_evaluated.token_f1, 2);
        // faithfulness with top-2 (all tokens): comprehensiveness masks everything
        // a: 0.9 - P(<MASK> <MASK>)=0.5 -> 0.4; b: class N, 0.8 - 0.5 = 0.3; c: class N, 0.6 - 0.5 = 0.1
        assert!((r.comprehensiveness.unwrap() - (0.4 + 0.3 + 0.1) / 3.0).abs() < 1e-12);
        assert_eq!(r.sufficiency, Some(0.0));
    }
}
