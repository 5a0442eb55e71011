//! Vocabularies, collapsing functions, and exhaustive alignment enumeration.
//!
//! The enumerators are exponential and exist to check the dynamic-programming
//! losses exactly on small instances; they refuse anything larger than the
//! oracle caps.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLANK: &str = "<b>";
pub const INTENT_PREFIX: &str = "IN-";
pub const SLOT_PREFIX: &str = "b-";

pub const CTC_MAX_FRAMES: usize = 10;
pub const CTC_MAX_TARGET: usize = 5;
pub const RNNT_MAX_FRAMES: usize = 8;
pub const RNNT_MAX_TARGET: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolKind {
    Blank,
    Char,
    Intent,
    Slot,
}

/// Ordered symbol inventory: blank at 0, then characters, intents, slots.
///
/// Characters form a prefix so that an ASR head (blank + characters) and an
/// SLU head (everything) share symbol ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    symbols: Vec<String>,
    kinds: Vec<SymbolKind>,
    index: HashMap<String, usize>,
    blank_id: usize,
}

impl Vocab {
    pub fn new(chars: &[char], intents: &[String], slots: &[String]) -> Result<Self> {
        let mut symbols = vec![BLANK.to_string()];
        let mut kinds = vec![SymbolKind::Blank];
        for c in chars {
            symbols.push(c.to_string());
            kinds.push(SymbolKind::Char);
        }
        for i in intents {
            symbols.push(format!("{INTENT_PREFIX}{i}"));
            kinds.push(SymbolKind::Intent);
        }
        for s in slots {
            symbols.push(format!("{SLOT_PREFIX}{s}"));
            kinds.push(SymbolKind::Slot);
        }
        Self::from_parts(symbols, kinds)
    }

    /// Rebuilds from a serialized symbol list (blank first).
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let kinds = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    SymbolKind::Blank
                } else if s.starts_with(INTENT_PREFIX) {
                    SymbolKind::Intent
                } else if s.starts_with(SLOT_PREFIX) && s.chars().count() > 1 {
                    SymbolKind::Slot
                } else {
                    SymbolKind::Char
                }
            })
            .collect();
        Self::from_parts(symbols, kinds)
    }

    fn from_parts(symbols: Vec<String>, kinds: Vec<SymbolKind>) -> Result<Self> {
        if symbols.first().map(String::as_str) != Some(BLANK) {
            return Err(Error::Invalid("vocab must start with the blank symbol".into()));
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate symbol `{s}`")));
            }
        }
        // Characters must be a contiguous prefix after blank.
        let n_chars = kinds.iter().filter(|k| **k == SymbolKind::Char).count();
        if kinds[1..=n_chars].iter().any(|k| *k != SymbolKind::Char) {
            return Err(Error::Invalid("character symbols must directly follow blank".into()));
        }
        Ok(Self {
            symbols,
            kinds,
            index,
            blank_id: 0,
        })
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Width of an ASR emission layer: blank plus characters.
    pub fn asr_size(&self) -> usize {
        1 + self.kinds.iter().filter(|k| **k == SymbolKind::Char).count()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn kind(&self, id: usize) -> SymbolKind {
        self.kinds[id]
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        self.id(c.encode_utf8(&mut [0u8; 4]))
    }

    pub fn intent_id(&self, intent: &str) -> Option<usize> {
        self.id(&format!("{INTENT_PREFIX}{intent}"))
    }

    pub fn slot_id(&self, slot: &str) -> Option<usize> {
        self.id(&format!("{SLOT_PREFIX}{slot}"))
    }

    /// Ids of intent then slot symbols, the bag-of-entities inventory.
    pub fn entity_label_ids(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| matches!(self.kinds[i], SymbolKind::Intent | SymbolKind::Slot))
            .collect()
    }

    /// Label name without its prefix.
    pub fn label_name(&self, id: usize) -> &str {
        let s = &self.symbols[id];
        match self.kinds[id] {
            SymbolKind::Intent => &s[INTENT_PREFIX.len()..],
            SymbolKind::Slot => &s[SLOT_PREFIX.len()..],
            _ => s,
        }
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        let mut missing = Vec::new();
        let ids: Vec<usize> = text
            .chars()
            .filter_map(|c| {
                let id = self.char_id(c);
                if id.is_none() {
                    missing.push(c.to_string());
                }
                id
            })
            .collect();
        if missing.is_empty() {
            Ok(ids)
        } else {
            Err(Error::UnknownToken(missing))
        }
    }

    pub fn decode_text(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| self.kinds[i] == SymbolKind::Char)
            .map(|&i| self.symbols[i].as_str())
            .collect()
    }

    /// Hex SHA-256 over the newline-joined symbol list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update(s.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Checks that a target sequence uses known, non-blank symbols below `width`.
    pub fn validate_target(&self, target: &[usize], width: usize) -> Result<()> {
        for &s in target {
            if s == self.blank_id || s >= width {
                return Err(Error::Invalid(format!(
                    "target symbol {s} is blank or outside emission width {width}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignmentKind {
    Ctc,
    Rnnt,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Alignment {
    pub symbols: Vec<usize>,
    pub kind: AlignmentKind,
}

impl Alignment {
    pub fn ctc(symbols: Vec<usize>) -> Self {
        Self {
            symbols,
            kind: AlignmentKind::Ctc,
        }
    }

    pub fn rnnt(symbols: Vec<usize>) -> Self {
        Self {
            symbols,
            kind: AlignmentKind::Rnnt,
        }
    }
}

/// Merge adjacent repeats, then drop blanks.
pub fn collapse_ctc(symbols: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in symbols {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Drop blanks; repeats survive.
pub fn collapse_rnnt(symbols: &[usize], blank: usize) -> Vec<usize> {
    symbols.iter().copied().filter(|&s| s != blank).collect()
}

/// Minimum number of frames a CTC alignment of `y` needs: one per label plus
/// one blank between every pair of equal neighbours.
pub fn ctc_min_frames(y: &[usize]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Every CTC alignment of length `frames` that collapses to `y`.
///
/// Walks the blank-interleaved label graph; each alignment corresponds to
/// exactly one walk, so the result has no duplicates.
pub fn enumerate_ctc_alignments(y: &[usize], frames: usize, blank: usize) -> Result<Vec<Alignment>> {
    if frames > CTC_MAX_FRAMES || y.len() > CTC_MAX_TARGET {
        return Err(Error::OracleScale(format!(
            "ctc enumeration limited to T <= {CTC_MAX_FRAMES}, |y| <= {CTC_MAX_TARGET}"
        )));
    }
    if y.contains(&blank) {
        return Err(Error::Invalid("blank in target".into()));
    }
    let mut ext = vec![blank];
    for &s in y {
        ext.push(s);
        ext.push(blank);
    }
    let last = ext.len() - 1;
    let mut out = Vec::new();
    if frames == 0 {
        if y.is_empty() {
            out.push(Alignment::ctc(vec![]));
        }
        return Ok(out);
    }
    let mut path = Vec::with_capacity(frames);
    fn walk(
        ext: &[usize],
        blank: usize,
        state: usize,
        remaining: usize,
        last: usize,
        path: &mut Vec<usize>,
        out: &mut Vec<Alignment>,
    ) {
        path.push(ext[state]);
        if remaining == 0 {
            if state == last || state + 1 == last {
                out.push(Alignment::ctc(path.clone()));
            }
        } else {
            let mut next = vec![state, state + 1];
            if state + 2 <= last && ext[state + 2] != blank && ext[state + 2] != ext[state] {
                next.push(state + 2);
            }
            for n in next {
                if n <= last {
                    walk(ext, blank, n, remaining - 1, last, path, out);
                }
            }
        }
        path.pop();
    }
    for start in [0usize, 1] {
        if start <= last {
            walk(&ext, blank, start, frames - 1, last, &mut path, &mut out);
        }
    }
    Ok(out)
}

/// Every transducer path over `frames` frames emitting `y`: interleavings of
/// `frames` blanks with the labels, ending in a blank.
pub fn enumerate_rnnt_paths(y: &[usize], frames: usize, blank: usize) -> Result<Vec<Alignment>> {
    if frames > RNNT_MAX_FRAMES || y.len() > RNNT_MAX_TARGET {
        return Err(Error::OracleScale(format!(
            "rnnt enumeration limited to T <= {RNNT_MAX_FRAMES}, |y| <= {RNNT_MAX_TARGET}"
        )));
    }
    if frames == 0 {
        return Ok(vec![]);
    }
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(frames + y.len());
    fn walk(y: &[usize], blank: usize, t_left: usize, u: usize, path: &mut Vec<usize>, out: &mut Vec<Alignment>) {
        if t_left == 1 && u == y.len() {
            path.push(blank);
            out.push(Alignment::rnnt(path.clone()));
            path.pop();
            return;
        }
        if u < y.len() {
            path.push(y[u]);
            walk(y, blank, t_left, u + 1, path, out);
            path.pop();
        }
        if t_left > 1 {
            path.push(blank);
            walk(y, blank, t_left - 1, u, path, out);
            path.pop();
        }
    }
    walk(y, blank, frames, 0, &mut path, &mut out);
    Ok(out)
}

/// `C(n, k)` in exact integer arithmetic.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    const B: usize = 0;
    const A: usize = 1;
    const BB: usize = 2;

    /// Reference collapse written as two explicit passes.
    fn collapse_two_pass(xs: &[usize]) -> Vec<usize> {
        let mut merged: Vec<usize> = Vec::new();
        for &x in xs {
            if merged.last() != Some(&x) {
                merged.push(x);
            }
        }
        merged.into_iter().filter(|&x| x != B).collect()
    }

    #[test]
    fn ctc_collapse_examples() {
        assert_eq!(collapse_ctc(&[B, B, A, A, BB, B, BB], B), vec![A, BB, BB]);
        assert_eq!(collapse_ctc(&[B, B, B], B), Vec::<usize>::new());
    }

    #[test]
    fn rnnt_collapse_examples() {
        assert_eq!(collapse_rnnt(&[A, B, BB, B], B), vec![A, BB]);
        assert_eq!(collapse_rnnt(&[B, B], B), Vec::<usize>::new());
        assert_eq!(collapse_rnnt(&[A, A, B, B], B), vec![A, A]);
    }

    proptest! {
        #[test]
        fn ctc_collapse_matches_two_pass(xs in proptest::collection::vec(0usize..4, 0..=6)) {
            prop_assert_eq!(collapse_ctc(&xs, B), collapse_two_pass(&xs));
        }
    }

    #[test]
    fn ctc_enumeration_small_cases() {
        let got: HashSet<Vec<usize>> = enumerate_ctc_alignments(&[A], 2, B)
            .unwrap()
            .into_iter()
            .map(|a| a.symbols)
            .collect();
        let want: HashSet<Vec<usize>> = [vec![A, A], vec![A, B], vec![B, A]].into_iter().collect();
        assert_eq!(got, want);
        assert!(enumerate_ctc_alignments(&[A, A], 2, B).unwrap().is_empty());
        assert_eq!(enumerate_ctc_alignments(&[A, A], 3, B).unwrap().len(), 1);
    }

    fn all_strings(v: usize, t: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..v).map(move |s| {
                        let mut q = p.clone();
                        q.push(s);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn ctc_enumeration_matches_filter_of_all_strings() {
        for (y, t, v) in [
            (vec![A, BB], 3, 3),
            (vec![A], 4, 3),
            (vec![A, A], 5, 3),
            (vec![], 3, 3),
            (vec![A, BB, 3], 6, 4),
        ] {
            let got: Vec<Vec<usize>> = enumerate_ctc_alignments(&y, t, B)
                .unwrap()
                .into_iter()
                .map(|a| a.symbols)
                .collect();
            let set: HashSet<_> = got.iter().cloned().collect();
            assert_eq!(set.len(), got.len(), "duplicates for {y:?}");
            let want: HashSet<_> = all_strings(v, t)
                .into_iter()
                .filter(|s| collapse_ctc(s, B) == y)
                .collect();
            assert_eq!(set, want, "y={y:?} T={t}");
        }
    }

    #[test]
    fn rnnt_enumeration_examples() {
        let p = enumerate_rnnt_paths(&[A], 2, B).unwrap();
        let got: HashSet<Vec<usize>> = p.into_iter().map(|a| a.symbols).collect();
        assert_eq!(got, [vec![A, B, B], vec![B, A, B]].into_iter().collect());
        assert_eq!(enumerate_rnnt_paths(&[], 3, B).unwrap()[0].symbols, vec![B, B, B]);
        assert_eq!(enumerate_rnnt_paths(&[A, BB], 3, B).unwrap().len(), 6);
    }

    proptest! {
        #[test]
        fn rnnt_count_and_collapse(t in 1usize..=6, y in proptest::collection::vec(1usize..4, 0..=4)) {
            let paths = enumerate_rnnt_paths(&y, t, B).unwrap();
            let n = binomial((t + y.len() - 1) as u64, y.len() as u64);
            prop_assert_eq!(paths.len() as u64, n);
            for p in &paths {
                prop_assert_eq!(collapse_rnnt(&p.symbols, B), y.clone());
                prop_assert_eq!(p.symbols.iter().filter(|&&s| s == B).count(), t);
                prop_assert_eq!(*p.symbols.last().unwrap(), B);
            }
        }

        #[test]
        fn ctc_members_collapse_back(t in 0usize..=7, y in proptest::collection::vec(1usize..4, 0..=3)) {
            for a in enumerate_ctc_alignments(&y, t, B).unwrap() {
                prop_assert_eq!(a.symbols.len(), t);
                prop_assert_eq!(collapse_ctc(&a.symbols, B), y.clone());
            }
        }
    }

    #[test]
    fn oracle_caps_enforced() {
        assert!(matches!(
            enumerate_ctc_alignments(&[A], 11, B),
            Err(Error::OracleScale(_))
        ));
        assert!(matches!(
            enumerate_rnnt_paths(&[A; 5], 3, B),
            Err(Error::OracleScale(_))
        ));
    }

    #[test]
    fn vocab_layout_and_hash() {
        let v = Vocab::new(&['a', 'b', ' '], &["weather_query".into()], &["date".into()]).unwrap();
        assert_eq!(v.blank_id(), 0);
        assert_eq!(v.asr_size(), 4);
        assert_eq!(v.intent_id("weather_query"), Some(4));
        assert_eq!(v.slot_id("date"), Some(5));
        assert_eq!(v.entity_label_ids(), vec![4, 5]);
        let back = Vocab::from_symbols(v.symbols().to_vec()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(Vocab::from_symbols(vec!["x".into()]).is_err());
        assert!(v.validate_target(&[0], 6).is_err());
        assert_eq!(ctc_min_frames(&[1, 1, 2]), 4);
    }
}
