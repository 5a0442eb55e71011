//! CTC negative log-likelihood with its analytic gradient, and best-path
//! decoding.

use crate::autodiff::{log_add, log_softmax, softmax, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::lattice::{collapse_ctc, ctc_min_frames};

/// Loss value and gradient with respect to the unnormalized frame scores.
#[derive(Debug, Clone)]
pub struct CtcLoss {
    pub loss: f64,
    pub grad: Tensor,
}

/// `-log sum_A prod_t p_t(a_t)` over alignments collapsing to `y`.
///
/// `logits` is `[T, V]` of unnormalized scores; a log-softmax is applied per
/// frame. Targets too long for `T` frames give [`Error::Infeasible`].
pub fn ctc_loss(logits: &Tensor, y: &[usize], blank: usize) -> Result<CtcLoss> {
    if logits.rank() != 2 {
        return Err(Error::Shape {
            op: "ctc_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    let (frames, width) = (logits.shape()[0], logits.shape()[1]);
    if blank >= width {
        return Err(Error::Invalid(format!("blank {blank} outside width {width}")));
    }
    if let Some(&s) = y.iter().find(|&&s| s == blank || s >= width) {
        return Err(Error::Invalid(format!("ctc target symbol {s} is blank or out of range")));
    }
    let required = ctc_min_frames(y);
    if frames < required {
        return Err(Error::Infeasible {
            frames,
            target_len: y.len(),
            required,
        });
    }
    if frames == 0 {
        return Ok(CtcLoss {
            loss: 0.0,
            grad: logits.clone(),
        });
    }

    let lp = log_softmax(logits);
    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(blank);
    for &s in y {
        ext.push(s);
        ext.push(blank);
    }
    let states = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * states];
    alpha[0] = lp.at2(0, ext[0]);
    if states > 1 {
        alpha[1] = lp.at2(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..states {
            let prev = (t - 1) * states;
            let mut a = alpha[prev + s];
            if s >= 1 {
                a = log_add(a, alpha[prev + s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, alpha[prev + s - 2]);
            }
            if a != ninf {
                alpha[t * states + s] = a + lp.at2(t, ext[s]);
            }
        }
    }

    // beta[t][s]: log-prob of frames t+1.. given state s at frame t.
    let mut beta = vec![ninf; frames * states];
    let last_row = (frames - 1) * states;
    beta[last_row + states - 1] = 0.0;
    if states > 1 {
        beta[last_row + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let nxt = (t + 1) * states;
            let mut b = beta[nxt + s] + lp.at2(t + 1, ext[s]);
            if s + 1 < states {
                b = log_add(b, beta[nxt + s + 1] + lp.at2(t + 1, ext[s + 1]));
            }
            if s + 2 < states && skip_ok(s + 2) {
                b = log_add(b, beta[nxt + s + 2] + lp.at2(t + 1, ext[s + 2]));
            }
            beta[t * states + s] = b;
        }
    }

    let mut log_p = alpha[last_row + states - 1];
    if states > 1 {
        log_p = log_add(log_p, alpha[last_row + states - 2]);
    }
    if log_p == ninf {
        return Err(Error::Infeasible {
            frames,
            target_len: y.len(),
            required,
        });
    }

    let mut grad = softmax(logits);
    for t in 0..frames {
        for s in 0..states {
            let occ = alpha[t * states + s] + beta[t * states + s] - log_p;
            if occ != ninf {
                grad.data_mut()[t * width + ext[s]] -= occ.exp();
            }
        }
    }
    Ok(CtcLoss { loss: -log_p, grad })
}

/// CTC loss as a tape node over `logits` (`[T, V]`).
pub fn ctc_loss_node(g: &mut Graph, logits: Var, y: &[usize], blank: usize) -> Result<Var> {
    let CtcLoss { loss, grad } = ctc_loss(g.value(logits), y, blank)?;
    g.custom(
        &[logits],
        Tensor::scalar(loss),
        Box::new(move |up| vec![grad.map(|v| v * up.item())]),
    )
}

/// Per-frame argmax (lowest id on ties), then collapse.
pub fn ctc_greedy_decode(logits: &Tensor, blank: usize) -> Vec<usize> {
    collapse_ctc(&logits.argmax_rows(), blank)
}
