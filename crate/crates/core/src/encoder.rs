//! Self-attention encoder with self-conditioned CTC heads.
//!
//! Layers are grouped by the head positions. After each head, its softmax
//! output is projected back to the model width and added to the next
//! group's input; the last head's projection is added to the final layer
//! output to form `H`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::ctc::ctc_loss_node;
use crate::error::{Error, Result};
use crate::lattice::Vocab;
use crate::nn;

/// Output inventory of an intermediate CTC head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadTarget {
    /// Blank plus characters.
    Asr,
    /// The full vocabulary (characters, intents, slot tags).
    Slu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// 1-based layer indices that carry a CTC head; strictly increasing and
    /// ending at `layers`.
    pub sctc_positions: Vec<usize>,
    pub sctc_targets: Vec<HeadTarget>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            layers: 4,
            d_model: 64,
            heads: 4,
            ff_dim: 128,
            sctc_positions: vec![2, 4],
            sctc_targets: vec![HeadTarget::Asr, HeadTarget::Slu],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.input_dim == 0 || self.ff_dim == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.sctc_positions.is_empty() {
            return bad("at least one CTC head is required".into());
        }
        if self.sctc_positions.windows(2).any(|w| w[0] >= w[1]) || self.sctc_positions[0] == 0 {
            return bad(format!("head positions {:?} must be strictly increasing", self.sctc_positions));
        }
        if *self.sctc_positions.last().unwrap() != self.layers {
            return bad(format!("last head must sit on layer {}", self.layers));
        }
        if self.sctc_targets.len() != self.sctc_positions.len() {
            return bad(format!(
                "{} head targets for {} head positions",
                self.sctc_targets.len(),
                self.sctc_positions.len()
            ));
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.sctc_positions.len()
    }

    pub fn head_width(&self, k: usize, vocab: &Vocab) -> usize {
        match self.sctc_targets[k] {
            HeadTarget::Asr => vocab.asr_size(),
            HeadTarget::Slu => vocab.len(),
        }
    }
}

/// Adds every encoder parameter to `store`.
pub fn init_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig, vocab: &Vocab) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    nn::init_linear(store, rng, "enc.in", d, cfg.input_dim);
    for l in 1..=cfg.layers {
        let p = format!("enc.l{l}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), d);
        for m in ["wq", "wk", "wv", "wo"] {
            if m == "wk" {
                // Keys are bias-free.
                store.insert(format!("{p}.att.wk.w"), nn::glorot(rng, d, d));
            } else {
                nn::init_linear(store, rng, &format!("{p}.att.{m}"), d, d);
            }
        }
        nn::init_layer_norm(store, &format!("{p}.ln2"), d);
        nn::init_linear(store, rng, &format!("{p}.ff1"), cfg.ff_dim, d);
        nn::init_linear(store, rng, &format!("{p}.ff2"), d, cfg.ff_dim);
    }
    for k in 0..cfg.num_heads() {
        let v = cfg.head_width(k, vocab);
        nn::init_linear(store, rng, &format!("enc.head{k}.out"), v, d);
        store.insert(format!("enc.head{k}.cond.w"), nn::glorot(rng, d, v));
    }
    Ok(())
}

/// Tape handles produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderState {
    /// Output of every layer, `[T, d]` each.
    pub layers: Vec<Var>,
    /// Unnormalized scores of each CTC head, `[T, V_k]`.
    pub head_logits: Vec<Var>,
    /// Conditioning projection of each head, `[T, d]`. The implicit
    /// conditioning before the first head is zero.
    pub conditioning: Vec<Var>,
    /// Final representation, `[T, d]`.
    pub h: Var,
}

fn attention(g: &mut Graph, store: &ParamStore, p: &str, heads: usize, x: Var) -> Result<Var> {
    let q = nn::linear(g, store, &format!("{p}.wq"), x)?;
    let wk = g.param(store, &format!("{p}.wk.w"))?;
    let k = g.linear(x, wk, None)?;
    let v = nn::linear(g, store, &format!("{p}.wv"), x)?;
    let d = g.value(x).last_dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let s = g.matmul_t(qh, false, kh, true)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    nn::linear(g, store, &format!("{p}.wo"), o)
}

fn block(g: &mut Graph, store: &ParamStore, l: usize, heads: usize, x: Var) -> Result<Var> {
    let p = format!("enc.l{l}");
    let a = nn::layer_norm(g, store, &format!("{p}.ln1"), x)?;
    let a = attention(g, store, &format!("{p}.att"), heads, a)?;
    let x = g.add(x, a)?;
    let f = nn::layer_norm(g, store, &format!("{p}.ln2"), x)?;
    let f = nn::linear(g, store, &format!("{p}.ff1"), f)?;
    let f = nn::swish(g, f)?;
    let f = nn::linear(g, store, &format!("{p}.ff2"), f)?;
    g.add(x, f)
}

/// Runs the encoder over `frames` (`[T, input_dim]`, `T >= 1`).
pub fn encode(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, frames: &Tensor) -> Result<EncoderState> {
    if frames.rank() != 2 || frames.shape()[1] != cfg.input_dim || frames.shape()[0] == 0 {
        return Err(Error::Shape {
            op: "encode",
            lhs: frames.shape().to_vec(),
            rhs: vec![cfg.input_dim],
        });
    }
    let t = frames.shape()[0];
    let mut input = frames.clone();
    input.add_assign(&nn::sinusoidal_positions(t, cfg.input_dim));
    let x0 = g.constant(input)?;
    let mut cur = nn::linear(g, store, "enc.in", x0)?;

    let mut layers = Vec::with_capacity(cfg.layers);
    let mut head_logits = Vec::new();
    let mut conditioning = Vec::new();
    let mut h = cur;
    for l in 1..=cfg.layers {
        let x = block(g, store, l, cfg.heads, cur)?;
        layers.push(x);
        cur = x;
        if let Some(k) = cfg.sctc_positions.iter().position(|&p| p == l) {
            let logits = nn::linear(g, store, &format!("enc.head{k}.out"), x)?;
            let probs = g.softmax(logits)?;
            let w = g.param(store, &format!("enc.head{k}.cond.w"))?;
            let z = g.linear(probs, w, None)?;
            head_logits.push(logits);
            conditioning.push(z);
            cur = g.add(x, z)?;
            h = cur;
        }
    }
    Ok(EncoderState {
        layers,
        head_logits,
        conditioning,
        h,
    })
}

/// Mean CTC loss over the heads; `targets[k]` is the label sequence for
/// head `k`. An infeasible target surfaces as [`Error::Infeasible`].
pub fn sctc_loss(g: &mut Graph, state: &EncoderState, targets: &[&[usize]], blank: usize) -> Result<Var> {
    if targets.len() != state.head_logits.len() {
        return Err(Error::Invalid(format!(
            "{} targets for {} heads",
            targets.len(),
            state.head_logits.len()
        )));
    }
    let mut total = None;
    for (&logits, y) in state.head_logits.iter().zip(targets) {
        let l = ctc_loss_node(g, logits, y, blank)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    g.scale(total.expect("at least one head"), 1.0 / targets.len() as f64)
}
