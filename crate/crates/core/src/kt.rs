//! Knowledge transfer from a frozen text encoder.
//!
//! Teacher token embeddings are supplied by a [`TeacherProvider`]. Acoustic
//! representations are pooled into one vector per teacher token with a
//! single-head cross-attention whose queries are learned token embeddings,
//! and the two sequences are tied together with a symmetric contrastive loss.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;

pub const CLS: &str = "[CLS]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KtConfig {
    /// Teacher embedding width `e`.
    pub teacher_width: usize,
    /// Seed of the built-in synthetic teacher.
    pub teacher_seed: u64,
}

impl Default for KtConfig {
    fn default() -> Self {
        Self {
            teacher_width: 32,
            teacher_seed: 17,
        }
    }
}

/// Teacher token inventory: `[CLS]` followed by the characters.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherVocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TeacherVocab {
    pub fn new(chars: &[char]) -> Self {
        let mut tokens = vec![CLS.to_string()];
        tokens.extend(chars.iter().map(|c| c.to_string()));
        Self::from_tokens(tokens).expect("distinct characters")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(CLS) {
            return Err(Error::Invalid(format!("teacher vocabulary must start with {CLS}")));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate teacher token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn cls_id(&self) -> usize {
        0
    }

    /// `[CLS]` followed by one token per character of `text`.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        std::iter::once(CLS.to_string())
            .chain(text.chars().map(|c| c.to_string()))
            .collect()
    }

    pub fn ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        let unknown: Vec<String> = tokens.iter().filter(|t| !self.index.contains_key(*t)).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownToken(unknown));
        }
        Ok(tokens.iter().map(|t| self.index[t]).collect())
    }
}

/// Source of frozen teacher embeddings, one row per token.
pub trait TeacherProvider {
    fn width(&self) -> usize;
    fn vocab(&self) -> &TeacherVocab;
    /// `[tokens.len(), width]` for utterance `utt_id`.
    fn embed(&self, utt_id: &str, tokens: &[String]) -> Result<Tensor>;
}

/// Deterministic stand-in for a pretrained text encoder.
///
/// Each token has a fixed random base vector. A content row averages the
/// base vectors of the token and its immediate neighbours; the `[CLS]` row
/// averages its own base vector with the mean content row. Values are
/// rounded to f32 precision so they survive the teacher file exactly.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    vocab: TeacherVocab,
    width: usize,
    seed: u64,
}

impl SyntheticTeacher {
    pub fn new(vocab: TeacherVocab, width: usize, seed: u64) -> Self {
        Self { vocab, width, seed }
    }

    fn base(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut s = [0u8; 8];
        s.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(s));
        (0..self.width).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl TeacherProvider for SyntheticTeacher {
    fn width(&self) -> usize {
        self.width
    }

    fn vocab(&self) -> &TeacherVocab {
        &self.vocab
    }

    fn embed(&self, _utt_id: &str, tokens: &[String]) -> Result<Tensor> {
        self.vocab.ids(tokens)?;
        let e = self.width;
        let bases: Vec<Vec<f64>> = tokens.iter().map(|t| self.base(t)).collect();
        let content: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] != CLS).collect();
        let mut rows = vec![vec![0.0; e]; tokens.len()];
        for (ci, &i) in content.iter().enumerate() {
            let lo = ci.saturating_sub(1);
            let hi = (ci + 1).min(content.len() - 1);
            let n = (hi - lo + 1) as f64;
            for &j in &content[lo..=hi] {
                for (r, b) in rows[i].iter_mut().zip(&bases[j]) {
                    *r += b / n;
                }
            }
        }
        let mut mean = vec![0.0; e];
        for &i in &content {
            for (m, r) in mean.iter_mut().zip(&rows[i]) {
                *m += r / content.len() as f64;
            }
        }
        for i in (0..tokens.len()).filter(|&i| tokens[i] == CLS) {
            rows[i] = if content.is_empty() {
                bases[i].clone()
            } else {
                bases[i].iter().zip(&mean).map(|(b, m)| 0.5 * (b + m)).collect()
            };
        }
        Ok(Tensor::from_rows(&rows)?.map(|v| v as f32 as f64))
    }
}

const TEACHER_MAGIC: &[u8; 8] = b"JSLUTEMB";

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u32(r)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))
}

/// Writes precomputed teacher embeddings.
///
/// Layout (little endian): magic `JSLUTEMB`, u32 version (1), u32 width,
/// u32 vocabulary size and the tokens, u32 utterance count, then per
/// utterance its id, u32 row count and `rows * width` f32 values.
pub fn write_teacher_file<W: Write>(mut w: W, vocab: &TeacherVocab, width: usize, rows: &[(String, Tensor)]) -> Result<()> {
    w.write_all(TEACHER_MAGIC)?;
    put_u32(&mut w, 1)?;
    put_u32(&mut w, width)?;
    put_u32(&mut w, vocab.len())?;
    for t in vocab.tokens() {
        put_str(&mut w, t)?;
    }
    put_u32(&mut w, rows.len())?;
    for (id, t) in rows {
        if t.rank() != 2 || t.shape()[1] != width {
            return Err(Error::Format(format!("teacher rows for {id} have shape {:?}", t.shape())));
        }
        put_str(&mut w, id)?;
        put_u32(&mut w, t.shape()[0])?;
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Embeddings loaded from a teacher file.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    vocab: TeacherVocab,
    width: usize,
    rows: BTreeMap<String, Tensor>,
}

impl FileTeacher {
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TEACHER_MAGIC {
            return Err(Error::Format("not a teacher embedding file".into()));
        }
        let version = get_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported teacher file version {version}")));
        }
        let width = get_u32(&mut r)?;
        let n_tok = get_u32(&mut r)?;
        let tokens = (0..n_tok).map(|_| get_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let vocab = TeacherVocab::from_tokens(tokens)?;
        let n = get_u32(&mut r)?;
        let mut rows = BTreeMap::new();
        for _ in 0..n {
            let id = get_str(&mut r)?;
            let count = get_u32(&mut r)?;
            let mut buf = vec![0u8; count * width * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            rows.insert(id, Tensor::new(vec![count, width], data)?);
        }
        Ok(Self { vocab, width, rows })
    }
}

impl TeacherProvider for FileTeacher {
    fn width(&self) -> usize {
        self.width
    }

    fn vocab(&self) -> &TeacherVocab {
        &self.vocab
    }

    fn embed(&self, utt_id: &str, tokens: &[String]) -> Result<Tensor> {
        self.vocab.ids(tokens)?;
        let t = self
            .rows
            .get(utt_id)
            .ok_or_else(|| Error::Format(format!("no teacher rows for utterance {utt_id}")))?;
        if t.shape()[0] != tokens.len() {
            return Err(Error::Format(format!(
                "utterance {utt_id}: {} teacher rows for {} tokens",
                t.shape()[0],
                tokens.len()
            )));
        }
        Ok(t.clone())
    }
}

/// Adds the attention-pool and token-query parameters.
pub fn init_kt(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &KtConfig, teacher_vocab: usize, d_model: usize) {
    let e = cfg.teacher_width;
    store.insert("kt.query_emb", nn::glorot(rng, teacher_vocab, e));
    store.insert("kt.wq", nn::glorot(rng, e, e));
    store.insert("kt.wk", nn::glorot(rng, e, d_model));
    store.insert("kt.wv", nn::glorot(rng, e, d_model));
}

/// Pooled representations and the attention weights that produced them.
#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    /// `[n, e]`.
    pub values: Var,
    /// `[n, T]`.
    pub weights: Var,
}

/// Cross-attention of teacher-token queries over `h` (`[T, d]`).
pub fn attend_tokens(g: &mut Graph, store: &ParamStore, token_ids: &[usize], h: Var) -> Result<Pooled> {
    let table = g.param(store, "kt.query_emb")?;
    let wq = g.param(store, "kt.wq")?;
    let wk = g.param(store, "kt.wk")?;
    let wv = g.param(store, "kt.wv")?;
    let e = g.value(wq).shape()[0];
    let q = g.gather(table, token_ids)?;
    let q = g.linear(q, wq, None)?;
    let k = g.linear(h, wk, None)?;
    let v = g.linear(h, wv, None)?;
    let s = g.matmul_t(q, false, k, true)?;
    let s = g.scale(s, 1.0 / (e as f64).sqrt())?;
    let weights = g.softmax(s)?;
    let values = g.matmul(weights, v)?;
    Ok(Pooled { values, weights })
}

/// The pooled `[CLS]` vector `[1, e]`.
pub fn cls_query(g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
    Ok(attend_tokens(g, store, &[0], h)?.values)
}

/// Symmetric contrastive alignment between `bx` (student, `[b, e]`) and
/// `by` (teacher, `[b, e]`) over cosine similarities scaled by `1 / tau`.
pub fn align_loss(g: &mut Graph, bx: Var, by: Var, tau: f64) -> Result<Var> {
    let (sx, sy) = (g.value(bx).shape().to_vec(), g.value(by).shape().to_vec());
    if sx != sy || sx.len() != 2 || sx[0] == 0 {
        return Err(Error::Shape {
            op: "align_loss",
            lhs: sx,
            rhs: sy,
        });
    }
    if tau <= 0.0 {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let b = sx[0];
    let xn = g.normalize_rows(bx)?;
    let yn = g.normalize_rows(by)?;
    let s = g.matmul_t(yn, false, xn, true)?;
    let s = g.scale(s, 1.0 / tau)?;
    let st = g.transpose(s)?;
    let rows = g.log_softmax(s)?;
    let cols = g.log_softmax(st)?;
    let both = g.add(rows, cols)?;
    let mut eye = Tensor::zeros(&[b, b]);
    for i in 0..b {
        eye.data_mut()[i * b + i] = 1.0;
    }
    let eye = g.constant(eye)?;
    let diag = g.mul(both, eye)?;
    let total = g.sum(diag)?;
    g.scale(total, -tau / (2.0 * b as f64))
}
