//! Word error rate and entity-level SLU scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::lattice::{SymbolKind, Vocab};

/// Word-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Word error rate of one hypothesis; an empty reference counts the
/// hypothesis words as errors over 1.
pub fn wer(hyp: &str, reference: &str) -> f64 {
    corpus_wer(&[(hyp.to_string(), reference.to_string())])
}

/// Total word edits over total reference words (at least 1).
pub fn corpus_wer(pairs: &[(String, String)]) -> f64 {
    let (mut edits, mut words) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        edits += edit_distance(&h, &r);
        words += r.len();
    }
    edits as f64 / words.max(1) as f64
}

/// Intent plus a multiset of `(slot type, value)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub intent: Option<String>,
    pub entities: Vec<(String, String)>,
    /// Fragments that could not form an entity.
    #[serde(default)]
    pub dropped: usize,
}

impl EntitySet {
    /// Parses a decoded tag sequence: the first intent token is the intent,
    /// characters accumulate a value that the next slot token closes. Values
    /// without a closing slot and slots with an empty value are dropped.
    pub fn from_tags(ids: &[usize], vocab: &Vocab) -> Self {
        let mut out = EntitySet::default();
        let mut value = String::new();
        for &id in ids {
            match vocab.kind(id) {
                SymbolKind::Intent => {
                    if out.intent.is_none() {
                        out.intent = Some(vocab.label_name(id).to_string());
                    } else {
                        out.dropped += 1;
                    }
                }
                SymbolKind::Char => value.push_str(vocab.symbol(id)),
                SymbolKind::Slot => {
                    let v = value.trim().to_string();
                    value.clear();
                    if v.is_empty() {
                        out.dropped += 1;
                    } else {
                        out.entities.push((vocab.label_name(id).to_string(), v));
                    }
                }
                SymbolKind::Blank => {}
            }
        }
        if !value.trim().is_empty() {
            out.dropped += 1;
        }
        out
    }

    fn counts(&self) -> BTreeMap<&(String, String), usize> {
        let mut m = BTreeMap::new();
        for e in &self.entities {
            *m.entry(e).or_insert(0) += 1;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SluScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub intent_accuracy: f64,
}

/// Micro-averaged entity precision/recall/F1 with multiset matching, and
/// intent accuracy. Undefined ratios (no predictions or no references) are
/// 1 when both sides are empty and 0 otherwise.
pub fn slu_scores(hyps: &[EntitySet], refs: &[EntitySet]) -> SluScores {
    assert_eq!(hyps.len(), refs.len(), "hypothesis/reference count mismatch");
    let (mut tp, mut npred, mut nref, mut intents_ok) = (0usize, 0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (hc, rc) = (h.counts(), r.counts());
        tp += hc.iter().map(|(k, &c)| c.min(rc.get(k).copied().unwrap_or(0))).sum::<usize>();
        npred += h.entities.len();
        nref += r.entities.len();
        if h.intent.is_some() && h.intent == r.intent {
            intents_ok += 1;
        }
    }
    let ratio = |num: usize, den: usize, other: usize| {
        if den > 0 {
            num as f64 / den as f64
        } else if other == 0 {
            1.0
        } else {
            0.0
        }
    };
    let precision = ratio(tp, npred, nref);
    let recall = ratio(tp, nref, npred);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let intent_accuracy = if hyps.is_empty() { 0.0 } else { intents_ok as f64 / hyps.len() as f64 };
    SluScores {
        precision,
        recall,
        f1,
        intent_accuracy,
    }
}
