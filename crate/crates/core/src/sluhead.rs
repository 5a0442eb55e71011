//! Prediction network, joint network and the bag-of-entities gate.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SluHeadConfig {
    /// Prediction network width `p`.
    pub pred_dim: usize,
    /// Joint hidden width `j`.
    pub joint_dim: usize,
}

impl Default for SluHeadConfig {
    fn default() -> Self {
        Self {
            pred_dim: 48,
            joint_dim: 32,
        }
    }
}

/// Registers prediction, joint, gate and BOE parameters.
pub fn init_sluhead(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &SluHeadConfig,
    vocab: usize,
    boe_size: usize,
    d_model: usize,
    teacher_width: usize,
) {
    let (p, j) = (cfg.pred_dim, cfg.joint_dim);
    store.insert("pred.emb", nn::glorot(rng, vocab, p));
    nn::init_linear(store, rng, "pred.ih", 4 * p, p);
    store.insert("pred.hh", nn::glorot(rng, 4 * p, p));
    store.insert("joint.w_enc", nn::glorot(rng, j, d_model));
    store.insert("joint.w_pred", nn::glorot(rng, j, p));
    store.insert("joint.b", Tensor::zeros(&[j]));
    store.insert("joint.w_out", nn::glorot(rng, vocab, j));
    store.insert("gate.w_h", nn::glorot(rng, j, d_model));
    store.insert("gate.w_g", nn::glorot(rng, j, p));
    store.insert("gate.b", Tensor::zeros(&[j]));
    store.insert("gate.w_b", nn::glorot(rng, j, boe_size));
    store.insert("gate.w_c", nn::glorot(rng, j, teacher_width));
    nn::init_linear(store, rng, "boe", boe_size, teacher_width);
}

/// LSTM cell state `(h, c)`, each `[1, p]`.
#[derive(Debug, Clone, Copy)]
pub struct PredState {
    pub h: Var,
    pub c: Var,
}

/// Zero state before any input.
pub fn pred_zero(g: &mut Graph, store: &ParamStore) -> Result<PredState> {
    let p = store
        .get("pred.hh")
        .ok_or_else(|| Error::MissingParam("pred.hh".into()))?
        .shape()[1];
    let h = g.constant(Tensor::zeros(&[1, p]))?;
    let c = g.constant(Tensor::zeros(&[1, p]))?;
    Ok(PredState { h, c })
}

/// One LSTM step consuming `symbol`.
pub fn pred_step(g: &mut Graph, store: &ParamStore, state: PredState, symbol: usize) -> Result<PredState> {
    let emb = g.param(store, "pred.emb")?;
    let x = g.gather(emb, &[symbol])?;
    let pre = nn::linear(g, store, "pred.ih", x)?;
    let hh = g.param(store, "pred.hh")?;
    let rec = g.linear(state.h, hh, None)?;
    let pre = g.add(pre, rec)?;
    let p = g.value(state.h).last_dim();
    let gate = |g: &mut Graph, k: usize| g.slice(pre, 1, k * p, p);
    let (i, f, o, u) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let o = g.sigmoid(o)?;
    let u = g.tanh(u)?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, u)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok(PredState { h, c })
}

/// Prediction network outputs `g_0..g_U` (`[U + 1, p]`) for `labels`; the
/// blank id starts the sequence.
pub fn prediction(g: &mut Graph, store: &ParamStore, labels: &[usize], blank: usize) -> Result<Var> {
    let mut state = pred_zero(g, store)?;
    let mut outs = Vec::with_capacity(labels.len() + 1);
    for &s in std::iter::once(&blank).chain(labels) {
        state = pred_step(g, store, state, s)?;
        outs.push(state.h);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 0)
    }
}

/// Inputs of the gated joint: predicted entity distribution and pooled
/// `[CLS]` vector. Either may be absent; the absent term contributes zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct GateInput {
    /// `[1, |V_BOE|]`.
    pub p_boe: Option<Var>,
    /// `[1, e]`.
    pub x_cls: Option<Var>,
}

/// Encoder-side and prediction-side projections for the joint network.
#[derive(Debug, Clone, Copy)]
pub struct JointProj {
    /// `[n, j]` joint projection.
    pub joint: Var,
    /// `[n, j]` gate projection.
    pub gate: Option<Var>,
}

pub fn project_encoder(g: &mut Graph, store: &ParamStore, h: Var, gated: bool) -> Result<JointProj> {
    let w = g.param(store, "joint.w_enc")?;
    let joint = g.linear(h, w, None)?;
    let gate = if gated {
        let w = g.param(store, "gate.w_h")?;
        Some(g.linear(h, w, None)?)
    } else {
        None
    };
    Ok(JointProj { joint, gate })
}

pub fn project_prediction(g: &mut Graph, store: &ParamStore, pred: Var, gated: bool) -> Result<JointProj> {
    let w = g.param(store, "joint.w_pred")?;
    let joint = g.linear(pred, w, None)?;
    let gate = if gated {
        let w = g.param(store, "gate.w_g")?;
        Some(g.linear(pred, w, None)?)
    } else {
        None
    };
    Ok(JointProj { joint, gate })
}

/// Gate context `P_BOE W_b^T + x_cls W_c^T` as a `[j]` vector.
pub fn gate_context(g: &mut Graph, store: &ParamStore, input: &GateInput) -> Result<Option<Var>> {
    let mut ctx = None;
    if let Some(p) = input.p_boe {
        let w = g.param(store, "gate.w_b")?;
        ctx = Some(g.linear(p, w, None)?);
    }
    if let Some(x) = input.x_cls {
        let w = g.param(store, "gate.w_c")?;
        let c = g.linear(x, w, None)?;
        ctx = Some(match ctx {
            None => c,
            Some(a) => g.add(a, c)?,
        });
    }
    match ctx {
        None => Ok(None),
        Some(c) => {
            let j = g.value(c).len();
            Ok(Some(g.reshape(c, &[j])?))
        }
    }
}

/// Log-probabilities over the output vocabulary for every `(t, u)` pair,
/// `[T * (U + 1), V]` in row-major `(t, u)` order.
pub fn joint_cells(
    g: &mut Graph,
    store: &ParamStore,
    enc: &JointProj,
    pred: &JointProj,
    ctx: Option<Var>,
) -> Result<Var> {
    let t_len = g.value(enc.joint).shape()[0];
    let u_len = g.value(pred.joint).shape()[0];
    let idx_t: Vec<usize> = (0..t_len).flat_map(|t| std::iter::repeat_n(t, u_len)).collect();
    let idx_u: Vec<usize> = (0..t_len).flat_map(|_| 0..u_len).collect();
    let a = g.gather(enc.joint, &idx_t)?;
    let b = g.gather(pred.joint, &idx_u)?;
    let pre = g.add(a, b)?;
    let bias = g.param(store, "joint.b")?;
    let mut pre = g.add(pre, bias)?;
    if let Some(ctx) = ctx {
        let (ge, gp) = match (enc.gate, pred.gate) {
            (Some(ge), Some(gp)) => (ge, gp),
            _ => return Err(Error::Invalid("gated joint needs gate projections".into())),
        };
        let a = g.gather(ge, &idx_t)?;
        let b = g.gather(gp, &idx_u)?;
        let s = g.add(a, b)?;
        let gb = g.param(store, "gate.b")?;
        let s = g.add(s, gb)?;
        let s = g.sigmoid(s)?;
        let gamma = g.mul(s, ctx)?;
        pre = g.add(pre, gamma)?;
    }
    let act = g.tanh(pre)?;
    let w_out = g.param(store, "joint.w_out")?;
    let logits = g.linear(act, w_out, None)?;
    g.log_softmax(logits)
}

/// Ungated joint over encoder output `h` (`[T, d]`) and prediction outputs
/// `pred` (`[U + 1, p]`).
pub fn joint_plain(g: &mut Graph, store: &ParamStore, h: Var, pred: Var) -> Result<Var> {
    let e = project_encoder(g, store, h, false)?;
    let p = project_prediction(g, store, pred, false)?;
    joint_cells(g, store, &e, &p, None)
}

/// Joint with the additive gate `sigmoid(h W_h + g W_g + b) * context`.
pub fn joint_gated(g: &mut Graph, store: &ParamStore, h: Var, pred: Var, input: &GateInput) -> Result<Var> {
    let ctx = gate_context(g, store, input)?;
    let gated = ctx.is_some();
    let e = project_encoder(g, store, h, gated)?;
    let p = project_prediction(g, store, pred, gated)?;
    joint_cells(g, store, &e, &p, ctx)
}

/// Entity distribution predicted from the pooled `[CLS]` vector.
#[derive(Debug, Clone, Copy)]
pub struct BoeOutput {
    pub probs: Var,
    pub log_probs: Var,
}

pub fn boe_head(g: &mut Graph, store: &ParamStore, x_cls: Var) -> Result<BoeOutput> {
    let logits = nn::linear(g, store, "boe", x_cls)?;
    Ok(BoeOutput {
        probs: g.softmax(logits)?,
        log_probs: g.log_softmax(logits)?,
    })
}

/// Normalized multi-hot over the entity inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct BoeTarget {
    weights: Vec<f64>,
}

impl BoeTarget {
    /// Uniform weight over the distinct `labels` (indices into the entity
    /// inventory of size `size`).
    pub fn from_labels(labels: &[usize], size: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Invalid("bag of entities needs at least one label".into()));
        }
        let mut hot = vec![0.0; size];
        for &l in labels {
            if l >= size {
                return Err(Error::Invalid(format!("entity label {l} outside inventory of {size}")));
            }
            hot[l] = 1.0;
        }
        let n: f64 = hot.iter().sum();
        Ok(Self {
            weights: hot.into_iter().map(|v| v / n).collect(),
        })
    }

    /// Arbitrary distribution; weights must be non-negative and sum to 1.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("entity target is not a distribution".into()));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `-sum_k target_k log P_BOE(k)`.
pub fn boe_loss(g: &mut Graph, log_probs: Var, target: &BoeTarget) -> Result<Var> {
    let n = target.weights.len();
    let t = g.constant(Tensor::new(vec![1, n], target.weights.clone())?)?;
    let prod = g.mul(log_probs, t)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use crate::rnnt::rnnt_loss_node;
    use rand::SeedableRng;

    const V: usize = 6;
    const D: usize = 4;
    const E: usize = 5;
    const NB: usize = 3;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let cfg = SluHeadConfig {
            pred_dim: 3,
            joint_dim: 4,
        };
        init_sluhead(&mut s, &mut ChaCha8Rng::seed_from_u64(6), &cfg, V, NB, D, E);
        for name in ["joint.b", "gate.b", "boe.b"] {
            let t = s.get_mut(name).unwrap();
            *t = t.map(|_| 0.1);
        }
        s
    }

    fn h() -> Tensor {
        Tensor::new(vec![3, D], (0..3 * D).map(|i| (i as f64 * 0.41).sin()).collect()).unwrap()
    }

    fn cls() -> Tensor {
        Tensor::new(vec![1, E], (0..E).map(|i| 0.2 * i as f64 - 0.3).collect()).unwrap()
    }

    #[test]
    fn lattice_rows_are_distributions() {
        let s = store();
        let mut g = Graph::new();
        let hv = g.constant(h()).unwrap();
        let p = prediction(&mut g, &s, &[2, 3], 0).unwrap();
        let j = joint_plain(&mut g, &s, hv, p).unwrap();
        assert_eq!(g.value(j).shape(), &[9, V]);
        for r in 0..9 {
            let z: f64 = g.value(j).row(r).iter().map(|v| v.exp()).sum();
            assert!((z - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_matches_stepwise() {
        let s = store();
        let mut g = Graph::new();
        let full = prediction(&mut g, &s, &[4, 1], 0).unwrap();
        let mut st = pred_zero(&mut g, &s).unwrap();
        for (u, sym) in [0, 4, 1].into_iter().enumerate() {
            st = pred_step(&mut g, &s, st, sym).unwrap();
            assert_eq!(g.value(st.h).data(), g.value(full).row(u));
        }
    }

    #[test]
    fn zero_gate_context_reduces_exactly_to_plain() {
        let mut s = store();
        *s.get_mut("gate.w_b").unwrap() = Tensor::zeros(&[4, NB]);
        *s.get_mut("gate.w_c").unwrap() = Tensor::zeros(&[4, E]);
        let mut g = Graph::new();
        let hv = g.constant(h()).unwrap();
        let p = prediction(&mut g, &s, &[2], 0).unwrap();
        let plain = joint_plain(&mut g, &s, hv, p).unwrap();
        let x = g.constant(cls()).unwrap();
        let boe = boe_head(&mut g, &s, x).unwrap();
        let input = GateInput {
            p_boe: Some(boe.probs),
            x_cls: Some(x),
        };
        let gated = joint_gated(&mut g, &s, hv, p, &input).unwrap();
        assert_eq!(g.value(plain), g.value(gated));
    }

    #[test]
    fn gate_changes_output_when_active() {
        let s = store();
        let mut g = Graph::new();
        let hv = g.constant(h()).unwrap();
        let p = prediction(&mut g, &s, &[2], 0).unwrap();
        let plain = joint_plain(&mut g, &s, hv, p).unwrap();
        let x = g.constant(cls()).unwrap();
        let gated = joint_gated(&mut g, &s, hv, p, &GateInput { p_boe: None, x_cls: Some(x) }).unwrap();
        assert!(g.value(plain).max_abs_diff(g.value(gated)) > 1e-6);
    }

    #[test]
    fn boe_targets_and_loss() {
        let t = BoeTarget::from_labels(&[0, 2, 2], 3).unwrap();
        assert_eq!(t.weights(), &[0.5, 0.0, 0.5]);
        assert!(BoeTarget::from_labels(&[], 3).is_err());
        assert!(BoeTarget::from_labels(&[3], 3).is_err());
        let mut g = Graph::new();
        let lp = g.constant(Tensor::new(vec![1, 3], vec![(0.5f64).ln(), (0.25f64).ln(), (0.25f64).ln()]).unwrap()).unwrap();
        let l = boe_loss(&mut g, lp, &t).unwrap();
        let want = -(0.5 * 0.5f64.ln() + 0.5 * 0.25f64.ln());
        assert!((g.scalar(l) - want).abs() < 1e-12);
        assert!(BoeTarget::from_weights(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn boe_loss_against_own_prediction_is_entropy() {
        let s = store();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, E], (0..E).map(|i| (i as f64).sin()).collect()).unwrap()).unwrap();
        let out = boe_head(&mut g, &s, x).unwrap();
        let p = g.value(out.probs).data().to_vec();
        let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        let t = BoeTarget::from_weights(p).unwrap();
        let l = boe_loss(&mut g, out.log_probs, &t).unwrap();
        assert!((g.scalar(l) - entropy).abs() < 1e-12);
    }

    #[test]
    fn gated_rnnt_gradients_check() {
        let s = store();
        let hm = h();
        let c = cls();
        let target = [3usize, 1];
        let (err, name) = grad_check_params(
            &s,
            |g, s| {
                let hv = g.constant(hm.clone())?;
                let x = g.constant(c.clone())?;
                let p = prediction(g, s, &target, 0)?;
                let boe = boe_head(g, s, x)?;
                let input = GateInput {
                    p_boe: Some(boe.probs),
                    x_cls: Some(x),
                };
                let j = joint_gated(g, s, hv, p, &input)?;
                let r = rnnt_loss_node(g, j, 3, &target, 0)?;
                let tb = BoeTarget::from_labels(&[1], NB)?;
                let b = boe_loss(g, boe.log_probs, &tb)?;
                g.add(r, b)
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{name}: {err}");
    }
}
