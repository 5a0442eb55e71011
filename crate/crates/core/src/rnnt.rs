//! Transducer loss over the `(T, U+1)` trellis, plus greedy and beam decoding.

use crate::autodiff::{argmax, log_add, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Forward and backward variables of one trellis, in log space.
///
/// `alpha[t][u]` is the log-probability of reaching node `(t, u)`;
/// `beta[t][u]` the log-probability of finishing from `(t, u)`, including the
/// emission made there.
#[derive(Debug, Clone)]
pub struct Trellis {
    pub frames: usize,
    pub labels: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_p: f64,
}

impl Trellis {
    fn at(&self, t: usize, u: usize) -> usize {
        t * (self.labels + 1) + u
    }

    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[self.at(t, u)]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[self.at(t, u)]
    }

    /// Posterior probability that the path visits `(t, u)`.
    pub fn occupancy(&self, t: usize, u: usize) -> f64 {
        (self.alpha(t, u) + self.beta(t, u) - self.log_p).exp()
    }

    /// Log of the total path mass crossing anti-diagonal `t + u = n`. Every
    /// path visits each diagonal once, so this equals `log_p` for every `n`.
    pub fn diagonal_total(&self, n: usize) -> f64 {
        let mut acc = f64::NEG_INFINITY;
        for t in 0..self.frames {
            if n >= t && n - t <= self.labels {
                acc = log_add(acc, self.alpha(t, n - t) + self.beta(t, n - t));
            }
        }
        acc
    }
}

#[derive(Debug, Clone)]
pub struct RnntLoss {
    pub loss: f64,
    /// Gradient with respect to the log-probability input, `[T, U+1, V]`.
    pub grad: Tensor,
    pub trellis: Trellis,
}

fn check_extents(jlp: &Tensor, s: &[usize], blank: usize) -> Result<(usize, usize, usize)> {
    if jlp.rank() != 3 || jlp.shape()[1] != s.len() + 1 || jlp.shape()[0] == 0 {
        return Err(Error::Shape {
            op: "rnnt_loss",
            lhs: jlp.shape().to_vec(),
            rhs: vec![s.len() + 1],
        });
    }
    let v = jlp.shape()[2];
    if blank >= v {
        return Err(Error::Invalid(format!("blank {blank} outside width {v}")));
    }
    if let Some(&k) = s.iter().find(|&&k| k == blank || k >= v) {
        return Err(Error::Invalid(format!("rnnt target symbol {k} is blank or out of range")));
    }
    Ok((jlp.shape()[0], s.len(), v))
}

/// Runs the forward and backward recursions.
pub fn rnnt_trellis(jlp: &Tensor, s: &[usize], blank: usize) -> Result<Trellis> {
    let (frames, labels, v) = check_extents(jlp, s, blank)?;
    let cols = labels + 1;
    let lp = |t: usize, u: usize, k: usize| jlp.data()[(t * cols + u) * v + k];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * cols];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..cols {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = ninf;
            if t > 0 {
                a = alpha[(t - 1) * cols + u] + lp(t - 1, u, blank);
            }
            if u > 0 {
                a = log_add(a, alpha[t * cols + u - 1] + lp(t, u - 1, s[u - 1]));
            }
            alpha[t * cols + u] = a;
        }
    }

    let mut beta = vec![ninf; frames * cols];
    for t in (0..frames).rev() {
        for u in (0..cols).rev() {
            let b = if t == frames - 1 && u == labels {
                lp(t, u, blank)
            } else {
                let mut b = ninf;
                if t + 1 < frames {
                    b = beta[(t + 1) * cols + u] + lp(t, u, blank);
                }
                if u < labels {
                    b = log_add(b, beta[t * cols + u + 1] + lp(t, u, s[u]));
                }
                b
            };
            beta[t * cols + u] = b;
        }
    }
    let log_p = alpha[(frames - 1) * cols + labels] + lp(frames - 1, labels, blank);
    Ok(Trellis {
        frames,
        labels,
        alpha,
        beta,
        log_p,
    })
}

/// `-log P(s | x)` summed over all blank/emit paths, with gradient with
/// respect to the per-node log-probabilities `jlp: [T, U+1, V]`.
pub fn rnnt_loss(jlp: &Tensor, s: &[usize], blank: usize) -> Result<RnntLoss> {
    let trellis = rnnt_trellis(jlp, s, blank)?;
    if !trellis.log_p.is_finite() {
        return Err(Error::NonFinite { op: "rnnt_loss" });
    }
    let (frames, labels, v) = (trellis.frames, trellis.labels, jlp.shape()[2]);
    let cols = labels + 1;
    let mut grad = Tensor::zeros(jlp.shape());
    let g = grad.data_mut();
    for t in 0..frames {
        for u in 0..cols {
            let base = (t * cols + u) * v;
            let a = trellis.alpha[t * cols + u] - trellis.log_p;
            let after_blank = if t + 1 < frames {
                trellis.beta[(t + 1) * cols + u]
            } else if u == labels {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            g[base + blank] = -(a + jlp.data()[base + blank] + after_blank).exp();
            if u < labels {
                let k = s[u];
                g[base + k] = -(a + jlp.data()[base + k] + trellis.beta[t * cols + u + 1]).exp();
            }
        }
    }
    Ok(RnntLoss {
        loss: -trellis.log_p,
        grad,
        trellis,
    })
}

/// Transducer loss as a tape node. `jlp` may be `[T*(U+1), V]` or
/// `[T, U+1, V]`; `frames` fixes the split.
pub fn rnnt_loss_node(g: &mut Graph, jlp: Var, frames: usize, s: &[usize], blank: usize) -> Result<Var> {
    let v = g.value(jlp).last_dim();
    let value = g.value(jlp).reshape(&[frames, s.len() + 1, v])?;
    let RnntLoss { loss, grad, .. } = rnnt_loss(&value, s, blank)?;
    let shape = g.value(jlp).shape().to_vec();
    let grad = grad.reshape(&shape)?;
    g.custom(
        &[jlp],
        Tensor::scalar(loss),
        Box::new(move |up| vec![grad.map(|x| x * up.item())]),
    )
}

/// Anything that can score the next symbol given a frame and a
/// prediction-network state.
pub trait Transducer {
    type State: Clone;

    fn frames(&self) -> usize;
    fn blank(&self) -> usize;
    fn start(&mut self) -> Result<Self::State>;
    /// State after emitting `symbol` from `state`.
    fn advance(&mut self, state: &Self::State, symbol: usize) -> Result<Self::State>;
    /// Normalized log-probabilities over the output vocabulary at frame `t`.
    fn log_probs(&mut self, t: usize, state: &Self::State) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub symbols: Vec<usize>,
    /// Log-probability of the single path that produced `symbols`,
    /// including every blank.
    pub score: f64,
}

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 5;

/// At each frame emit the argmax symbol until blank or the per-frame cap,
/// then move on. After `max_symbols` emissions a blank is forced.
pub fn rnnt_greedy_decode<M: Transducer>(model: &mut M, max_symbols: usize) -> Result<Hypothesis> {
    if max_symbols == 0 {
        return Err(Error::Invalid("max_symbols_per_frame must be >= 1".into()));
    }
    let blank = model.blank();
    let mut state = model.start()?;
    let mut hyp = Hypothesis {
        symbols: vec![],
        score: 0.0,
    };
    for t in 0..model.frames() {
        let mut emitted = 0;
        loop {
            let lp = model.log_probs(t, &state)?;
            if emitted == max_symbols {
                hyp.score += lp[blank];
                break;
            }
            let k = argmax(&lp);
            hyp.score += lp[k];
            if k == blank {
                break;
            }
            hyp.symbols.push(k);
            state = model.advance(&state, k)?;
            emitted += 1;
        }
    }
    Ok(hyp)
}

struct Beam<S> {
    symbols: Vec<usize>,
    state: S,
    score: f64,
    emitted: usize,
}

/// Beam search over single-path scores.
///
/// Runs [`beam_search_fixed`] at every width from 1 to `beam` and merges the
/// n-best lists, so the best score never decreases as the beam widens and is
/// never below the greedy score (width 1 is exactly greedy). Results are
/// deduplicated by symbol sequence and sorted by descending score.
pub fn rnnt_beam_decode<M: Transducer>(model: &mut M, beam: usize, max_symbols: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Invalid("beam must be >= 1".into()));
    }
    let mut out = Vec::new();
    for w in 1..=beam {
        out.extend(beam_search_fixed(model, w, max_symbols)?);
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut seen = std::collections::HashSet::new();
    out.retain(|h| seen.insert(h.symbols.clone()));
    Ok(out)
}

/// Frame-synchronous search at a single width. Within a frame, hypotheses
/// that already took their blank compete with the extensions of those still
/// emitting; the best `beam` survive each round. Width 1 reproduces
/// [`rnnt_greedy_decode`] exactly.
pub fn beam_search_fixed<M: Transducer>(model: &mut M, beam: usize, max_symbols: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Invalid("beam must be >= 1".into()));
    }
    if max_symbols == 0 {
        return Err(Error::Invalid("max_symbols_per_frame must be >= 1".into()));
    }
    let blank = model.blank();
    let mut hyps = vec![Beam {
        symbols: vec![],
        state: model.start()?,
        score: 0.0,
        emitted: 0,
    }];
    for t in 0..model.frames() {
        let mut done: Vec<Beam<M::State>> = Vec::new();
        let mut active: Vec<Beam<M::State>> = std::mem::take(&mut hyps);
        for h in &mut active {
            h.emitted = 0;
        }
        while !active.is_empty() {
            // (parent index into `active` or usize::MAX for done, symbol, score)
            enum Cand {
                Done(usize),
                Blank(usize, f64),
                Emit(usize, usize, f64),
            }
            let mut cands: Vec<(f64, Cand)> = done.iter().enumerate().map(|(i, d)| (d.score, Cand::Done(i))).collect();
            for (i, h) in active.iter().enumerate() {
                let lp = model.log_probs(t, &h.state)?;
                cands.push((h.score + lp[blank], Cand::Blank(i, lp[blank])));
                if h.emitted < max_symbols {
                    for (k, &l) in lp.iter().enumerate() {
                        if k != blank {
                            cands.push((h.score + l, Cand::Emit(i, k, l)));
                        }
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            cands.truncate(beam);
            let mut next_done = Vec::new();
            let mut next_active = Vec::new();
            for (_, c) in cands {
                match c {
                    Cand::Done(i) => next_done.push(Beam {
                        symbols: done[i].symbols.clone(),
                        state: done[i].state.clone(),
                        score: done[i].score,
                        emitted: 0,
                    }),
                    Cand::Blank(i, l) => next_done.push(Beam {
                        symbols: active[i].symbols.clone(),
                        state: active[i].state.clone(),
                        score: active[i].score + l,
                        emitted: 0,
                    }),
                    Cand::Emit(i, k, l) => {
                        let mut symbols = active[i].symbols.clone();
                        symbols.push(k);
                        next_active.push(Beam {
                            symbols,
                            state: model.advance(&active[i].state, k)?,
                            score: active[i].score + l,
                            emitted: active[i].emitted + 1,
                        });
                    }
                }
            }
            done = next_done;
            active = next_active;
        }
        hyps = done;
    }

    let mut out: Vec<Hypothesis> = hyps
        .into_iter()
        .map(|h| Hypothesis {
            symbols: h.symbols,
            score: h.score,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, log_softmax};
    use crate::lattice::{binomial, enumerate_rnnt_paths};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_jlp(rng: &mut ChaCha8Rng, t: usize, u: usize, v: usize) -> Tensor {
        let raw = Tensor::new(vec![t * (u + 1), v], (0..t * (u + 1) * v).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        log_softmax(&raw).reshape(&[t, u + 1, v]).unwrap()
    }

    /// Sum over explicit paths: walk each alignment through the trellis.
    fn oracle(jlp: &Tensor, s: &[usize]) -> (f64, usize) {
        let (t_max, cols, v) = (jlp.shape()[0], jlp.shape()[1], jlp.shape()[2]);
        let paths = enumerate_rnnt_paths(s, t_max, 0).unwrap();
        let mut total = 0.0;
        for p in &paths {
            let (mut t, mut u, mut lp) = (0, 0, 0.0);
            for &a in &p.symbols {
                lp += jlp.data()[(t * cols + u) * v + a];
                if a == 0 {
                    t += 1;
                } else {
                    u += 1;
                }
            }
            total += f64::exp(lp);
        }
        (-total.ln(), paths.len())
    }

    #[test]
    fn uniform_hand_cases() {
        let u = Tensor::full(&[1, 2, 3], -(3f64.ln()));
        assert!((rnnt_loss(&u, &[1], 0).unwrap().loss - 9f64.ln()).abs() < 1e-12);
        let u = Tensor::full(&[2, 2, 3], -(3f64.ln()));
        assert!((rnnt_loss(&u, &[1], 0).unwrap().loss - (27.0f64 / 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn extent_mismatch() {
        assert!(rnnt_loss(&Tensor::zeros(&[2, 3, 3]), &[1], 0).is_err());
    }

    #[test]
    fn matches_path_oracle_and_diagonals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let v = rng.random_range(2..=4);
            let t = rng.random_range(1..=5);
            let u = rng.random_range(0..=3);
            let s: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
            let jlp = random_jlp(&mut rng, t, u, v);
            let l = rnnt_loss(&jlp, &s, 0).unwrap();
            let (want, count) = oracle(&jlp, &s);
            assert!((l.loss - want).abs() <= 1e-10);
            assert_eq!(count as u64, binomial((t + u - 1) as u64, u as u64));
            for n in 0..t + u {
                assert!((l.trellis.diagonal_total(n) - l.trellis.log_p).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (t, u, v) in [(3, 2, 4), (4, 1, 3), (2, 3, 4)] {
            let s: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
            let jlp = random_jlp(&mut rng, t, u, v).reshape(&[t * (u + 1), v]).unwrap();
            let err = grad_check(|g, x| rnnt_loss_node(g, x, t, &s, 0), &jlp, 1e-5).unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }

    /// Deterministic pseudo-model whose distributions depend on frame and
    /// emitted prefix.
    struct TableModel {
        frames: usize,
        v: usize,
        seed: u64,
    }

    impl Transducer for TableModel {
        type State = Vec<usize>;
        fn frames(&self) -> usize {
            self.frames
        }
        fn blank(&self) -> usize {
            0
        }
        fn start(&mut self) -> Result<Vec<usize>> {
            Ok(vec![])
        }
        fn advance(&mut self, s: &Vec<usize>, k: usize) -> Result<Vec<usize>> {
            let mut n = s.clone();
            n.push(k);
            Ok(n)
        }
        fn log_probs(&mut self, t: usize, s: &Vec<usize>) -> Result<Vec<f64>> {
            let mut h = self.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            for &k in s {
                h = h.wrapping_mul(31).wrapping_add(k as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let raw: Vec<f64> = (0..self.v).map(|_| rng.random_range(-2.0..2.0)).collect();
            Ok(crate::autodiff::log_softmax_slice(&raw))
        }
    }

    fn exhaustive_best(m: &mut TableModel, cap: usize) -> f64 {
        fn go(m: &mut TableModel, t: usize, state: Vec<usize>, emitted: usize, score: f64, cap: usize) -> f64 {
            if t == m.frames {
                return score;
            }
            let lp = m.log_probs(t, &state).unwrap();
            let mut best = go(m, t + 1, state.clone(), 0, score + lp[0], cap);
            if emitted < cap {
                for k in 1..m.v {
                    let s = m.advance(&state, k).unwrap();
                    best = best.max(go(m, t, s, emitted + 1, score + lp[k], cap));
                }
            }
            best
        }
        go(m, 0, vec![], 0, 0.0, cap)
    }

    #[test]
    fn blank_dominant_model_decodes_empty() {
        struct AllBlank;
        impl Transducer for AllBlank {
            type State = ();
            fn frames(&self) -> usize {
                4
            }
            fn blank(&self) -> usize {
                0
            }
            fn start(&mut self) -> Result<()> {
                Ok(())
            }
            fn advance(&mut self, _: &(), _: usize) -> Result<()> {
                Ok(())
            }
            fn log_probs(&mut self, _: usize, _: &()) -> Result<Vec<f64>> {
                Ok(vec![-0.1, -3.0, -3.0])
            }
        }
        assert!(rnnt_greedy_decode(&mut AllBlank, 5).unwrap().symbols.is_empty());
    }

    #[test]
    fn forced_single_emission() {
        struct EmitOnce;
        impl Transducer for EmitOnce {
            type State = usize;
            fn frames(&self) -> usize {
                1
            }
            fn blank(&self) -> usize {
                0
            }
            fn start(&mut self) -> Result<usize> {
                Ok(0)
            }
            fn advance(&mut self, s: &usize, _: usize) -> Result<usize> {
                Ok(s + 1)
            }
            fn log_probs(&mut self, _: usize, s: &usize) -> Result<Vec<f64>> {
                Ok(if *s == 0 { vec![-5.0, -5.0, -0.01] } else { vec![-0.01, -5.0, -5.0] })
            }
        }
        assert_eq!(rnnt_greedy_decode(&mut EmitOnce, 5).unwrap().symbols, vec![2]);
    }

    #[test]
    fn beam_properties_on_table_models() {
        for seed in 0..30 {
            let mut m = TableModel { frames: 4, v: 3, seed };
            let greedy = rnnt_greedy_decode(&mut m, 2).unwrap();
            let b1 = rnnt_beam_decode(&mut m, 1, 2).unwrap();
            assert_eq!(b1[0], greedy);
            let b4 = rnnt_beam_decode(&mut m, 4, 2).unwrap();
            assert!(b4[0].score >= greedy.score);
            for w in b4.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
        }
    }

    #[test]
    fn wide_beam_finds_exhaustive_optimum() {
        for seed in 0..10 {
            let mut m = TableModel { frames: 3, v: 3, seed };
            let best = exhaustive_best(&mut m, 2);
            let beam = beam_search_fixed(&mut m, 10_000, 2).unwrap();
            assert!(rnnt_beam_decode(&mut m, 40, 2).unwrap()[0].score >= beam_search_fixed(&mut m, 40, 2).unwrap()[0].score);
            assert!((beam[0].score - best).abs() < 1e-12);
        }
    }
}

#[cfg(test)]
mod width_tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Rand {
        seed: u64,
    }
    impl Transducer for Rand {
        type State = Vec<usize>;
        fn frames(&self) -> usize {
            5
        }
        fn blank(&self) -> usize {
            0
        }
        fn start(&mut self) -> Result<Vec<usize>> {
            Ok(vec![])
        }
        fn advance(&mut self, s: &Vec<usize>, k: usize) -> Result<Vec<usize>> {
            let mut n = s.clone();
            n.push(k);
            Ok(n)
        }
        fn log_probs(&mut self, t: usize, s: &Vec<usize>) -> Result<Vec<f64>> {
            let mut h = self.seed.wrapping_add(t as u64 * 1000003);
            for &k in s {
                h = h.wrapping_mul(131).wrapping_add(k as u64);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            Ok(crate::autodiff::log_softmax_slice(&raw))
        }
    }

    #[test]
    fn best_score_monotone_in_width() {
        let mut bad = 0;
        for seed in 0..60 {
            let mut m = Rand { seed };
            let mut prev = f64::NEG_INFINITY;
            for w in 1..=6 {
                let s = rnnt_beam_decode(&mut m, w, 3).unwrap()[0].score;
                if s < prev {
                    bad += 1;
                }
                prev = s;
            }
        }
        assert_eq!(bad, 0);
    }
}
