//! Self-verification suites: exact lattice oracles, finite-difference
//! gradient checks and reduction identities. Used by the `verify` command
//! and the acceptance tests.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, grad_check_params, log_softmax, Graph, Tensor};
use crate::config::{StageKind, StagePlan};
use crate::ctc::ctc_loss;
use crate::encoder::{encode, sctc_loss, EncoderConfig, HeadTarget};
use crate::error::{Error, Result};
use crate::kt::{align_loss, KtConfig};
use crate::lattice::{binomial, enumerate_ctc_alignments, enumerate_rnnt_paths, Vocab};
use crate::model::{GateMode, ModelConfig, SluModel};
use crate::pipeline::{batch_loss, loss_jnt, loss_jnt_kt, Example};
use crate::rnnt::{rnnt_loss, rnnt_loss_node};
use crate::sluhead::{boe_loss, joint_gated, joint_plain, prediction, BoeTarget, GateInput, SluHeadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Oracles,
    Grads,
    Identities,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracles" => Ok(Suite::Oracles),
            "grads" => Ok(Suite::Grads),
            "identities" => Ok(Suite::Identities),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!("unknown suite {other:?}"))),
        }
    }
}

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or other measured quantity).
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<10} {:<40} measured {:.3e} (tol {:.0e}, {:.2}s){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.tolerance,
            self.seconds,
            if self.detail.is_empty() { String::new() } else { format!("  {}", self.detail) }
        )
    }
}

fn check(suite: &'static str, name: &str, tolerance: f64, f: impl FnOnce() -> Result<(f64, String)>) -> Check {
    let start = Instant::now();
    let (measured, detail, passed) = match f() {
        Ok((m, d)) => (m, d, m <= tolerance),
        Err(e) => (f64::NAN, format!("error: {e}"), false),
    };
    Check {
        suite,
        name: name.to_string(),
        passed,
        measured,
        tolerance,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::Oracles => oracles(),
        Suite::Grads => grads(),
        Suite::Identities => identities(),
        Suite::All => [oracles(), grads(), identities()].concat(),
    }
}

/// Text table, one line per check.
pub fn table(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        out.push_str(&c.to_string());
        out.push('\n');
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    out.push_str(&format!("{passed}/{} checks passed\n", checks.len()));
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// Largest `|ctc_loss + log(sum over enumerated alignments)|` over random
/// instances with `T <= 6`, `|y| <= 3`, `|V| <= 4` (blank included).
pub fn ctc_oracle_error(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let v = rng.random_range(2..=4);
        let t = rng.random_range(1..=6);
        let u = rng.random_range(0..=3);
        let y: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
        let x = random_tensor(&mut rng, &[t, v], 3.0);
        let lp = log_softmax(&x);
        let paths = enumerate_ctc_alignments(&y, t, 0)?;
        match ctc_loss(&x, &y, 0) {
            Ok(l) => {
                let p: f64 = paths
                    .iter()
                    .map(|a| a.symbols.iter().enumerate().map(|(t, &s)| lp.at2(t, s)).sum::<f64>().exp())
                    .sum();
                worst = worst.max((l.loss + p.ln()).abs());
            }
            Err(Error::Infeasible { .. }) if paths.is_empty() => {}
            Err(e) => return Err(e),
        }
    }
    Ok(worst)
}

/// Largest RNN-T loss deviation from the path-enumeration sum over random
/// instances with `T <= 5`, `U <= 3`, `|V| <= 4`; a path-count mismatch with
/// `C(T+U-1, U)` is an error.
pub fn rnnt_oracle_error(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let v = rng.random_range(2..=4);
        let t = rng.random_range(1..=5);
        let u = rng.random_range(0..=3);
        let s: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
        let raw = random_tensor(&mut rng, &[t * (u + 1), v], 3.0);
        let jlp = log_softmax(&raw).reshape(&[t, u + 1, v])?;
        let paths = enumerate_rnnt_paths(&s, t, 0)?;
        let want = binomial((t + u - 1) as u64, u as u64);
        if paths.len() as u64 != want {
            return Err(Error::Invalid(format!(
                "T={t} U={u}: {} paths, expected {want}",
                paths.len()
            )));
        }
        let mut total = 0.0;
        for p in &paths {
            let (mut ti, mut ui, mut lp) = (0, 0, 0.0);
            for &a in &p.symbols {
                lp += jlp.data()[(ti * (u + 1) + ui) * v + a];
                if a == 0 {
                    ti += 1;
                } else {
                    ui += 1;
                }
            }
            total += lp.exp();
        }
        let l = rnnt_loss(&jlp, &s, 0)?;
        worst = worst.max((l.loss + total.ln()).abs());
    }
    Ok(worst)
}

pub fn oracles() -> Vec<Check> {
    vec![
        check("oracles", "ctc loss vs alignment enumeration", 1e-10, || {
            Ok((ctc_oracle_error(200, 11)?, "200 instances".into()))
        }),
        check("oracles", "rnnt loss vs path enumeration", 1e-10, || {
            Ok((rnnt_oracle_error(200, 12)?, "200 instances, path counts binomial".into()))
        }),
    ]
}

/// Tiny vocabulary and model used by the composite checks.
pub fn toy_model(seed: u64) -> Result<SluModel> {
    let vocab = Vocab::new(&['a', 'b', ' '], &["x".into(), "y".into()], &["s".into(), "r".into()])?;
    let config = ModelConfig {
        encoder: EncoderConfig {
            input_dim: 3,
            layers: 2,
            d_model: 4,
            heads: 2,
            ff_dim: 6,
            sctc_positions: vec![1, 2],
            sctc_targets: vec![HeadTarget::Asr, HeadTarget::Slu],
        },
        sluhead: SluHeadConfig {
            pred_dim: 3,
            joint_dim: 4,
        },
        kt: KtConfig {
            teacher_width: 3,
            teacher_seed: 1,
        },
    };
    let mut m = SluModel::new(config, vocab, seed)?;
    // Nonzero biases.
    for (name, t) in m.params.iter_mut() {
        if name.ends_with(".b") && !name.contains("ln") {
            *t = t.map(|_| 0.05);
        }
    }
    Ok(m)
}

/// Hand-built examples for [`toy_model`].
pub fn toy_examples(model: &SluModel, seed: u64) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = &model.vocab;
    let cases = [("ab", "x", "s"), ("b a", "y", "r"), ("a", "x", "r")];
    cases
        .iter()
        .enumerate()
        .map(|(i, (text, intent, slot))| {
            let transcript = v.encode_text(text)?;
            let mut tags = vec![v.intent_id(intent).expect("intent")];
            tags.extend(&transcript);
            tags.push(v.slot_id(slot).expect("slot"));
            let frames = random_tensor(&mut rng, &[tags.len() * 2 + 1, 3], 1.0);
            let tokens = model.teacher_vocab.tokenize(text);
            let teacher_ids = model.teacher_vocab.ids(&tokens)?;
            let rows = random_tensor(&mut rng, &[teacher_ids.len(), model.config.kt.teacher_width], 1.0);
            Ok(Example {
                id: format!("toy{i}"),
                text: text.to_string(),
                frames,
                transcript,
                boe: model.boe_target(&tags)?,
                tags,
                teacher_ids,
                teacher_rows: Some(rows),
            })
        })
        .collect()
}

fn params_check(model: &SluModel, plan: &StagePlan, examples: &[Example]) -> Result<(f64, String)> {
    let batch: Vec<&Example> = examples.iter().collect();
    grad_check_params(
        &model.params,
        |g, store| {
            let mut m = model.clone();
            m.params = store.clone();
            let parts = batch_loss(g, &m, &batch, plan)?.ok_or_else(|| Error::Invalid("empty batch".into()))?;
            Ok(parts.total)
        },
        1e-5,
    )
    .map(|(e, name)| (e, format!("worst at {name}")))
}

pub fn grads() -> Vec<Check> {
    const TOL: f64 = 1e-4;
    const STEP: f64 = 1e-5;
    let mut out = vec![
        check("grads", "ctc_loss", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut worst = 0.0f64;
            for (t, y) in [(5, vec![1, 2]), (4, vec![1, 1]), (3, vec![])] {
                let x = random_tensor(&mut rng, &[t, 3], 2.0);
                worst = worst.max(grad_check(|g, x| crate::ctc::ctc_loss_node(g, x, &y, 0), &x, STEP)?);
            }
            Ok((worst, String::new()))
        }),
        check("grads", "rnnt_loss", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let mut worst = 0.0f64;
            for (t, s) in [(3usize, vec![1usize, 2]), (4, vec![2]), (2, vec![1, 2, 1])] {
                let x = random_tensor(&mut rng, &[t * (s.len() + 1), 3], 2.0);
                worst = worst.max(grad_check(
                    |g, x| {
                        let lp = g.log_softmax(x)?;
                        rnnt_loss_node(g, lp, t, &s, 0)
                    },
                    &x,
                    STEP,
                )?);
            }
            Ok((worst, String::new()))
        }),
        check("grads", "align_loss", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let by = random_tensor(&mut rng, &[4, 5], 1.0);
            let bx = random_tensor(&mut rng, &[4, 5], 1.0);
            let err = grad_check(
                |g, x| {
                    let y = g.constant(by.clone())?;
                    align_loss(g, x, y, 0.07)
                },
                &bx,
                STEP,
            )?;
            Ok((err, String::new()))
        }),
        check("grads", "boe_loss", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(24);
            let x = random_tensor(&mut rng, &[1, 5], 2.0);
            let target = BoeTarget::from_labels(&[1, 3], 5)?;
            let err = grad_check(
                |g, x| {
                    let lp = g.log_softmax(x)?;
                    boe_loss(g, lp, &target)
                },
                &x,
                STEP,
            )?;
            Ok((err, String::new()))
        }),
    ];
    out.push(check("grads", "joint_gated (rnnt through gated joint)", TOL, || {
        let m = toy_model(25)?;
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let h = random_tensor(&mut rng, &[3, 4], 1.0);
        let cls = random_tensor(&mut rng, &[1, 3], 1.0);
        let nb = m.vocab.entity_label_ids().len();
        let mut p = random_tensor(&mut rng, &[1, nb], 1.0).map(f64::exp);
        let z: f64 = p.data().iter().sum();
        p = p.map(|x| x / z);
        let labels = [3usize, 1];
        grad_check_params(
            &m.params,
            |g, s| {
                let hv = g.constant(h.clone())?;
                let input = GateInput {
                    p_boe: Some(g.constant(p.clone())?),
                    x_cls: Some(g.constant(cls.clone())?),
                };
                let pred = prediction(g, s, &labels, 0)?;
                let j = joint_gated(g, s, hv, pred, &input)?;
                rnnt_loss_node(g, j, 3, &labels, 0)
            },
            STEP,
        )
        .map(|(e, n)| (e, format!("worst at {n}")))
    }));
    for (name, kind) in [
        ("encoder+heads, asr_finetune_kt loss", StageKind::AsrFinetuneKt),
        ("encoder+heads, slu_adapt loss", StageKind::SluAdapt),
        ("encoder+heads, slu_adapt_kt loss", StageKind::SluAdaptKt),
    ] {
        out.push(check("grads", name, TOL, || {
            let m = toy_model(26)?;
            let ex = toy_examples(&m, 27)?;
            params_check(&m, &StagePlan::new(kind, 1), &ex[..2])
        }));
    }
    out
}

/// Mean of CTC losses computed by truncated encoders, one per head, each
/// running only up to that head's layer.
fn independent_head_losses(model: &SluModel, frames: &Tensor, targets: &[&[usize]]) -> Result<f64> {
    let cfg = &model.config.encoder;
    let mut sum = 0.0;
    for (k, &pos) in cfg.sctc_positions.iter().enumerate() {
        let truncated = EncoderConfig {
            layers: pos,
            sctc_positions: vec![pos],
            sctc_targets: vec![cfg.sctc_targets[k]],
            ..cfg.clone()
        };
        let mut store = model.params.clone();
        for part in ["out.w", "out.b", "cond.w"] {
            let t = model.params.get(&format!("enc.head{k}.{part}")).expect("head param").clone();
            store.insert(format!("enc.head0.{part}"), t);
        }
        let mut g = Graph::new();
        let st = encode(&mut g, &store, &truncated, frames)?;
        sum += ctc_loss(g.value(st.head_logits[0]), targets[k], model.vocab.blank_id())?.loss;
    }
    Ok(sum / cfg.sctc_positions.len() as f64)
}

fn zero_gate(model: &mut SluModel) {
    for name in ["gate.w_b", "gate.w_c"] {
        model.params.get_mut(name).expect("gate param").data_mut().fill(0.0);
    }
}

pub fn identities() -> Vec<Check> {
    vec![
        check("identities", "joint_gated == joint_plain at W_b=W_c=0", 0.0, || {
            let mut m = toy_model(31)?;
            zero_gate(&mut m);
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let mut g = Graph::new();
            let h = g.constant(random_tensor(&mut rng, &[4, 4], 1.0))?;
            let pred = prediction(&mut g, &m.params, &[1, 2], 0)?;
            let nb = m.vocab.entity_label_ids().len();
            let input = GateInput {
                p_boe: Some(g.constant(Tensor::full(&[1, nb], 1.0 / nb as f64))?),
                x_cls: Some(g.constant(random_tensor(&mut rng, &[1, 3], 1.0))?),
            };
            let a = joint_gated(&mut g, &m.params, h, pred, &input)?;
            let b = joint_plain(&mut g, &m.params, h, pred)?;
            let differ = g
                .value(a)
                .data()
                .iter()
                .zip(g.value(b).data())
                .filter(|(x, y)| x.to_bits() != y.to_bits())
                .count();
            Ok((differ as f64, "count of non-identical entries".into()))
        }),
        check("identities", "loss_jnt_kt == loss_jnt at beta=0, W_b=W_c=0", 1e-12, || {
            let mut m = toy_model(32)?;
            zero_gate(&mut m);
            let ex = toy_examples(&m, 32)?;
            let batch: Vec<&Example> = ex.iter().collect();
            let mut g = Graph::new();
            let a = loss_jnt(&mut g, &m, &batch, 0.5)?.expect("feasible").total;
            let a = g.scalar(a);
            let mut worst = 0.0f64;
            for use_boe in [false, true] {
                let mut g = Graph::new();
                let b = loss_jnt_kt(&mut g, &m, &batch, 0.5, 0.0, use_boe)?.expect("feasible").total;
                worst = worst.max((g.scalar(b) - a).abs());
            }
            Ok((worst, String::new()))
        }),
        check("identities", "zeroed conditioning: SCTC == mean of head CTCs", 1e-12, || {
            let mut m = toy_model(33)?;
            m.config.encoder.layers = 3;
            m.config.encoder.sctc_positions = vec![1, 2, 3];
            m.config.encoder.sctc_targets = vec![HeadTarget::Asr, HeadTarget::Slu, HeadTarget::Asr];
            let m = SluModel::new(m.config.clone(), m.vocab.clone(), 33)?;
            let mut m = m;
            for k in 0..3 {
                m.params.get_mut(&format!("enc.head{k}.cond.w")).expect("cond").data_mut().fill(0.0);
            }
            let ex = toy_examples(&m, 33)?;
            let mut worst = 0.0f64;
            for e in &ex {
                let targets: [&[usize]; 3] = [&e.transcript, &e.tags, &e.transcript];
                let mut g = Graph::new();
                let st = m.encode(&mut g, &e.frames)?;
                let l = sctc_loss(&mut g, &st, &targets, 0)?;
                let want = independent_head_losses(&m, &e.frames, &targets)?;
                worst = worst.max((g.scalar(l) - want).abs());
            }
            Ok((worst, String::new()))
        }),
        check("identities", "align_loss(identical rows, b=2) == tau ln 2", 1e-12, || {
            let mut g = Graph::new();
            let row = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0])?;
            let x = g.constant(row.clone())?;
            let y = g.constant(row)?;
            let l = align_loss(&mut g, x, y, 0.07)?;
            Ok(((g.scalar(l) - 0.07 * 2f64.ln()).abs(), String::new()))
        }),
        check("identities", "loss_jnt affine in lambda", 1e-12, || {
            let m = toy_model(34)?;
            let ex = toy_examples(&m, 34)?;
            let batch: Vec<&Example> = ex.iter().collect();
            let mut worst = 0.0f64;
            for lambda in [0.0, 0.25, 0.5, 1.0] {
                let mut g = Graph::new();
                let p = loss_jnt(&mut g, &m, &batch, lambda)?.expect("feasible");
                worst = worst.max((g.scalar(p.total) - (lambda * p.rnnt + (1.0 - lambda) * p.sctc)).abs());
            }
            Ok((worst, String::new()))
        }),
        check("identities", "gate modes agree at W_b=W_c=0", 1e-12, || {
            let mut m = toy_model(35)?;
            zero_gate(&mut m);
            let ex = toy_examples(&m, 35)?;
            let mut worst = 0.0f64;
            for e in &ex {
                let mut scores = Vec::new();
                for mode in [GateMode::Plain, GateMode::Cls, GateMode::ClsBoe] {
                    m.gate = mode;
                    scores.push(m.greedy(&e.frames)?.score);
                }
                worst = worst.max((scores[0] - scores[1]).abs()).max((scores[0] - scores[2]).abs());
            }
            Ok((worst, "greedy scores".into()))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        let checks = run(Suite::All);
        let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
        assert!(failed.is_empty(), "{}", failed.join("\n"));
        assert!(table(&checks).ends_with(&format!("{0}/{0} checks passed\n", checks.len())));
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("grads".parse::<Suite>().unwrap(), Suite::Grads);
        assert!("nope".parse::<Suite>().is_err());
    }
}
