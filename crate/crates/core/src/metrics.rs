//! Classification metrics, rationale plausibility (Token-F1, IOU-F1) and
//! faithfulness (comprehensiveness, sufficiency).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, TokenSequence};
use crate::error::{Error, Result};
use crate::predictor::Predictor;

pub type IndexSet = BTreeSet<usize>;

/// Number of top-scoring tokens used as the rationale for faithfulness.
pub const FAITHFULNESS_TOP_K: usize = 5;

/// IOU above which a predicted rationale counts as a match.
pub const IOU_MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1_hate: f64,
    pub macro_f1: f64,
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let tp = tp as f64;
    2.0 * tp / (2.0 * tp + fp as f64 + fn_ as f64)
}

pub fn classification_metrics(preds: &[Label], golds: &[Label]) -> Result<ClassificationMetrics> {
    if preds.len() != golds.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::arg("no predictions to score"));
    }
    let per_class = |c: Label| {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for (&p, &g) in preds.iter().zip(golds) {
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        f1_from_counts(tp, fp, fn_)
    };
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    let f1_hate = per_class(Label::Hate);
    let f1_not = per_class(Label::NotHate);
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / preds.len() as f64,
        f1_hate,
        macro_f1: (f1_hate + f1_not) / 2.0,
    })
}

/// Set F1 of a predicted rationale against gold; `None` when gold is empty.
pub fn token_f1(pred: &IndexSet, gold: &IndexSet) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let overlap = pred.intersection(gold).count() as f64;
    if overlap == 0.0 {
        return Some(0.0);
    }
    let precision = overlap / pred.len() as f64;
    let recall = overlap / gold.len() as f64;
    Some(2.0 * precision * recall / (precision + recall))
}

/// Jaccard overlap; `None` when both sets are empty.
pub fn iou(pred: &IndexSet, gold: &IndexSet) -> Option<f64> {
    let union = pred.union(gold).count();
    if union == 0 {
        return None;
    }
    Some(pred.intersection(gold).count() as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenF1Mode {
    /// Mean of per-sample F1 over samples with a nonempty gold rationale.
    #[default]
    Mean,
    /// F1 of token counts pooled over those samples.
    Micro,
}

/// Corpus Token-F1 and the number of samples that entered it.
pub fn corpus_token_f1(pairs: &[(IndexSet, IndexSet)], mode: TokenF1Mode) -> (Option<f64>, usize) {
    let scored: Vec<&(IndexSet, IndexSet)> = pairs.iter().filter(|(_, g)| !g.is_empty()).collect();
    let n = scored.len();
    if n == 0 {
        return (None, 0);
    }
    let value = match mode {
        TokenF1Mode::Mean => scored.iter().filter_map(|(p, g)| token_f1(p, g)).sum::<f64>() / n as f64,
        TokenF1Mode::Micro => {
            let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
            for (p, g) in &scored {
                tp += p.intersection(g).count();
                n_pred += p.len();
                n_gold += g.len();
            }
            f1_from_counts(tp, n_pred - tp, n_gold - tp)
        }
    };
    (Some(value), n)
}

/// Instance-level F1 where a sample is a hit when IOU strictly exceeds 0.5.
pub fn iou_f1(pairs: &[(IndexSet, IndexSet)]) -> Result<f64> {
    let with_gold = pairs.iter().filter(|(_, g)| !g.is_empty()).count();
    if with_gold == 0 {
        return Err(Error::Undefined("iou_f1 has no sample with a gold rationale".into()));
    }
    let with_pred = pairs.iter().filter(|(p, _)| !p.is_empty()).count();
    let hits = pairs
        .iter()
        .filter(|(p, g)| !g.is_empty() && iou(p, g).is_some_and(|v| v > IOU_MATCH_THRESHOLD))
        .count() as f64;
    let precision = if with_pred == 0 { 0.0 } else { hits / with_pred as f64 };
    let recall = hits / with_gold as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

fn check_indices(seq: &TokenSequence, rationale: &IndexSet) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::arg("faithfulness needs a nonempty sample"));
    }
    match rationale.last() {
        Some(&i) if i >= seq.len() => Err(Error::arg(format!(
            "rationale index {i} is outside a sequence of {} tokens",
            seq.len()
        ))),
        _ => Ok(()),
    }
}

/// Reference-class probability drop when the rationale tokens are replaced
/// in place by the mask token.
pub fn comprehensiveness<P: Predictor + ?Sized>(
    predictor: &P,
    seq: &TokenSequence,
    rationale: &IndexSet,
) -> Result<f64> {
    check_indices(seq, rationale)?;
    let full = predictor.predict(seq)?;
    let class = full.argmax();
    let without = seq.masked_where(predictor.mask_token(), |i| rationale.contains(&i));
    Ok(full.prob(class) - predictor.predict(&without)?.prob(class))
}

/// Reference-class probability gap between the full input and the input with
/// every non-rationale token masked in place.
pub fn sufficiency<P: Predictor + ?Sized>(predictor: &P, seq: &TokenSequence, rationale: &IndexSet) -> Result<f64> {
    check_indices(seq, rationale)?;
    let full = predictor.predict(seq)?;
    let class = full.argmax();
    let only = seq.masked_where(predictor.mask_token(), |i| !rationale.contains(&i));
    Ok(full.prob(class) - predictor.predict(&only)?.prob(class))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct EvaluatedCounts {
    pub classification: usize,
    pub token_f1: usize,
    pub iou_f1: usize,
    pub faithfulness: usize,
}

/// One experiment's classification, plausibility and faithfulness numbers.
/// Plausibility and faithfulness are `null` when no sample qualifies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub f1_hate: f64,
    pub macro_f1: f64,
    pub token_f1: Option<f64>,
    pub iou_f1: Option<f64>,
    pub comprehensiveness: Option<f64>,
    pub sufficiency: Option<f64>,
    pub n_evaluated: EvaluatedCounts,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl MetricReport {
    pub fn table_header() -> String {
        format!(
            "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "", "Acc", "F1", "Macro-F1", "Token-F1", "IOU-F1", "Comp", "Suff"
        )
    }

    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>8} {:>8} {:>8}",
            name,
            self.accuracy,
            self.f1_hate,
            self.macro_f1,
            cell(self.token_f1),
            cell(self.iou_f1),
            cell(self.comprehensiveness),
            cell(self.sufficiency)
        )
    }

    /// Header plus one row per named report.
    pub fn table<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricReport)>) -> String {
        let mut out = Self::table_header();
        out.push('\n');
        for (name, r) in rows {
            let _ = writeln!(out, "{}", r.table_row(name));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::predictor::{ProbDist, StubPredictor};
    use Label::{Hate as H, NotHate as N};

    fn set(v: &[usize]) -> IndexSet {
        v.iter().copied().collect()
    }

    #[test]
    fn classification_examples() {
        let m = classification_metrics(&[H, N, H], &[H, N, H]).unwrap();
        assert_eq!((m.accuracy, m.f1_hate, m.macro_f1), (1.0, 1.0, 1.0));
        let m = classification_metrics(&[H, H, N, N], &[H, N, H, N]).unwrap();
        assert_eq!((m.accuracy, m.f1_hate, m.macro_f1), (0.5, 0.5, 0.5));
        let m = classification_metrics(&[N, N, N], &[H, N, H]).unwrap();
        assert_eq!(m.f1_hate, 0.0);
        assert!(classification_metrics(&[H], &[H, N]).is_err());
        assert!(classification_metrics(&[], &[]).is_err());
        // a class absent everywhere contributes 0 to the macro average
        let m = classification_metrics(&[N, N], &[N, N]).unwrap();
        assert_eq!(m.macro_f1, 0.5);
    }

    #[test]
    fn set_metric_examples() {
        assert_eq!(token_f1(&set(&[1, 2]), &set(&[1, 2])), Some(1.0));
        assert_eq!(token_f1(&set(&[0, 1]), &set(&[1, 2])), Some(0.5));
        assert_eq!(token_f1(&set(&[]), &set(&[1])), Some(0.0));
        assert_eq!(token_f1(&set(&[1]), &set(&[])), None);
        assert_eq!(iou(&set(&[3, 4]), &set(&[3, 4])), Some(1.0));
        assert!((iou(&set(&[0, 1]), &set(&[1, 2])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&set(&[0]), &set(&[1])), Some(0.0));
        assert_eq!(iou(&set(&[]), &set(&[])), None);
    }

    #[test]
    fn iou_f1_examples() {
        let same = vec![(set(&[0, 1]), set(&[0, 1])), (set(&[2]), set(&[2]))];
        assert_eq!(iou_f1(&same).unwrap(), 1.0);
        let boundary = vec![(set(&[0, 1]), set(&[1]))];
        assert_eq!(iou_f1(&boundary).unwrap(), 0.0);
        let half = vec![(set(&[0]), set(&[0])), (set(&[1]), set(&[2]))];
        assert!((iou_f1(&half).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(iou_f1(&[(set(&[1]), set(&[]))]), Err(Error::Undefined(_))));
    }

    #[test]
    fn micro_and_mean_token_f1() {
        let pairs = vec![
            (set(&[0]), set(&[0])),
            (set(&[0, 1, 2]), set(&[3])),
            (set(&[1]), set(&[])),
        ];
        let (mean, n) = corpus_token_f1(&pairs, TokenF1Mode::Mean);
        assert_eq!(n, 2);
        assert!((mean.unwrap() - 0.5).abs() < 1e-15);
        // tp=1, fp=3, fn=1 -> 2/(2+4)
        let (micro, _) = corpus_token_f1(&pairs, TokenF1Mode::Micro);
        assert!((micro.unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    fn faith_stub() -> StubPredictor {
        let mut stub = StubPredictor::new(ProbDist::hate(0.5).unwrap());
        stub.insert(&["you", "dirty", "dog"], ProbDist::hate(0.9).unwrap());
        stub.insert(&["you", "<MASK>", "<MASK>"], ProbDist::hate(0.2).unwrap());
        stub.insert(&["<MASK>", "dirty", "dog"], ProbDist::hate(0.85).unwrap());
        stub
    }

    #[test]
    fn faithfulness_examples() {
        let stub = faith_stub();
        let seq = tokenize("you dirty dog");
        assert!((comprehensiveness(&stub, &seq, &set(&[1, 2])).unwrap() - 0.7).abs() < 1e-12);
        assert!((sufficiency(&stub, &seq, &set(&[1, 2])).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(comprehensiveness(&stub, &seq, &set(&[])).unwrap(), 0.0);
        assert_eq!(sufficiency(&stub, &seq, &set(&[0, 1, 2])).unwrap(), 0.0);
        // empty rationale: everything masked, default 0.5
        assert!((sufficiency(&stub, &seq, &set(&[])).unwrap() - 0.4).abs() < 1e-12);
        // unchanged prediction under masking
        let flat = StubPredictor::new(ProbDist::hate(0.8).unwrap());
        assert_eq!(comprehensiveness(&flat, &seq, &set(&[0])).unwrap(), 0.0);
        assert!(comprehensiveness(&stub, &seq, &set(&[3])).is_err());
        assert!(comprehensiveness(&stub, &tokenize(""), &set(&[])).is_err());
    }

    #[test]
    fn report_table_has_all_columns() {
        let r = MetricReport {
            accuracy: 1.0,
            f1_hate: 1.0,
            macro_f1: 1.0,
            token_f1: Some(0.5),
            iou_f1: None,
            comprehensiveness: Some(0.1),
            sufficiency: Some(-0.02),
            n_evaluated: EvaluatedCounts::default(),
        };
        let t = MetricReport::table([("run", &r)]);
        for col in ["Acc", "F1", "Macro-F1", "Token-F1", "IOU-F1", "Comp", "Suff"] {
            assert!(t.contains(col));
        }
        assert!(t.contains("-0.0200"));
    }
}
