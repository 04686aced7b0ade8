//! Seeded synthetic corpora with planted trigger tokens.
//!
//! Hateful samples contain one or two trigger words from a small lexicon and
//! their rationales mark exactly those positions; non-hateful samples are
//! drawn from filler words only.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Label, Language, RationaleVector, Sample};

const FILLERS: &[&str] = &[
    "the", "people", "from", "that", "city", "always", "talk", "about", "news", "today", "video", "match", "team",
    "road", "market", "school", "phone", "movie", "song", "friend", "bus", "rain", "food", "price", "election",
    "party", "leader", "cricket", "office", "street", "morning", "train", "post", "comment", "share", "watch", "again",
    "very", "their", "these",
];

const TRIGGERS: &[&str] = &["dog", "idiot", "moron", "pig", "vermin", "rat", "scum", "trash"];

/// A balanced corpus of `n` samples in which HATE is decided by trigger words.
pub fn trigger_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let hate = i % 2 == 0;
            let len = rng.gen_range(4..=12);
            let mut words: Vec<&str> = (0..len).map(|_| *FILLERS.choose(&mut rng).expect("fillers")).collect();
            let mut marked = BTreeSet::new();
            if hate {
                let n_triggers = if len >= 8 && rng.gen_bool(0.5) { 2 } else { 1 };
                while marked.len() < n_triggers {
                    marked.insert(rng.gen_range(0..len));
                }
                for &p in &marked {
                    words[p] = TRIGGERS.choose(&mut rng).expect("triggers");
                }
            }
            let label = if hate { Label::Hate } else { Label::NotHate };
            let rationale = RationaleVector::from_indices(len, marked);
            Sample::new(format!("t{i:04}"), &words.join(" "), label, Some(rationale), None)
                .expect("generated sample is valid")
        })
        .collect();
    Corpus::new(Language::English, samples).expect("ids are unique")
}

struct Lexicon {
    tag: &'static str,
    fillers: &'static [&'static str],
    triggers: &'static [&'static str],
}

const MINI_LEXICONS: [Lexicon; 3] = [
    Lexicon {
        tag: "te",
        fillers: &[
            "ఈ",
            "రోజు",
            "మన",
            "ఊరు",
            "లో",
            "వార్తలు",
            "చూసాను",
            "అందరూ",
            "సినిమా",
            "బాగుంది",
            "వాళ్ళు",
            "ఎప్పుడూ",
            "మాట్లాడతారు",
            "బస్సు",
            "వర్షం",
            "పాట",
        ],
        triggers: &["కుక్క", "గాడిద", "మూర్ఖుడు", "పంది"],
    },
    Lexicon {
        tag: "hi",
        fillers: &[
            "आज",
            "हमारे",
            "शहर",
            "में",
            "खबर",
            "देखी",
            "सब",
            "लोग",
            "फिल्म",
            "अच्छी",
            "वे",
            "हमेशा",
            "बात",
            "करते",
            "बारिश",
            "गाना",
        ],
        triggers: &["कुत्ता", "गधा", "बेवकूफ", "सूअर"],
    },
    Lexicon {
        tag: "en",
        fillers: &[
            "today", "our", "town", "in", "news", "watched", "all", "people", "movie", "good", "they", "always",
            "talk", "bus", "rain", "song",
        ],
        triggers: &["dog", "donkey", "idiot", "pig"],
    },
];

/// The 60-sample trilingual mini corpus with three noisy annotators per sample.
pub fn mini_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(60);
    for lex in &MINI_LEXICONS {
        for i in 0..20 {
            let hate = i % 2 == 0;
            let len = rng.gen_range(4..=11);
            let mut words: Vec<&str> = (0..len)
                .map(|_| *lex.fillers.choose(&mut rng).expect("fillers"))
                .collect();
            let mut planted = BTreeSet::new();
            if hate {
                let n_triggers = if len >= 7 && rng.gen_bool(0.4) { 2 } else { 1 };
                while planted.len() < n_triggers {
                    planted.insert(rng.gen_range(0..len));
                }
                for &p in &planted {
                    words[p] = lex.triggers.choose(&mut rng).expect("triggers");
                }
            }
            let annotators = (0..3)
                .map(|_| {
                    if !hate {
                        return RationaleVector::zeros(len);
                    }
                    let marks = (0..len).filter(|p| {
                        if planted.contains(p) {
                            rng.gen_bool(0.9)
                        } else {
                            rng.gen_bool(0.06)
                        }
                    });
                    RationaleVector::from_indices(len, marks.collect::<Vec<_>>())
                })
                .collect();
            let label = if hate { Label::Hate } else { Label::NotHate };
            samples.push(
                Sample::new(
                    format!("{}{i:02}", lex.tag),
                    &words.join(" "),
                    label,
                    None,
                    Some(annotators),
                )
                .expect("generated sample is valid"),
            );
        }
    }
    Corpus::new(Language::Other, samples).expect("ids are unique")
}

/// Offline LLM replies for [`mini_corpus`]: hateful samples get most of their
/// trigger words, occasionally a filler; the rest get an empty list.
pub fn mini_llm_fixture(corpus: &Corpus, seed: u64) -> BTreeMap<String, Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triggers: BTreeSet<&str> = MINI_LEXICONS.iter().flat_map(|l| l.triggers.iter().copied()).collect();
    corpus
        .samples
        .iter()
        .map(|s| {
            let mut words = Vec::new();
            if s.label == Label::Hate {
                for w in s.tokens.surfaces() {
                    if triggers.contains(w) && rng.gen_bool(0.8) && !words.iter().any(|x: &String| x == w) {
                        words.push(w.to_string());
                    }
                }
                if rng.gen_bool(0.2) {
                    let i = rng.gen_range(0..s.tokens.len());
                    words.push(s.tokens.surface(i).to_string());
                }
            }
            (s.id.clone(), words)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigger_corpus_shape() {
        let c = trigger_corpus(200, 1);
        assert_eq!(c.len(), 200);
        assert_eq!(c.count(Label::Hate), 100);
        for s in &c.samples {
            let gold = s.gold().unwrap();
            let has_trigger = s.tokens.surfaces().any(|w| TRIGGERS.contains(&w));
            assert_eq!(has_trigger, s.label == Label::Hate);
            for (i, w) in s.tokens.surfaces().enumerate() {
                assert_eq!(gold.bits()[i] == 1, TRIGGERS.contains(&w), "{}", s.id);
            }
        }
        assert_eq!(trigger_corpus(200, 1), c);
    }

    #[test]
    fn mini_corpus_shape() {
        let c = mini_corpus(7);
        assert_eq!(c.len(), 60);
        assert_eq!(c.count(Label::Hate), 30);
        assert!(c
            .samples
            .iter()
            .all(|s| s.annotator_rationales.as_ref().unwrap().len() == 3));
        let fixture = mini_llm_fixture(&c, 7);
        assert_eq!(fixture.len(), 60);
    }
}
