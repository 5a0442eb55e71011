//! Acceptance criteria. Each test prints one `CRITERION n ... PASS|FAIL`
//! line (or `FLAG` for reported-only comparisons) to stderr.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use jointslu::config::{RunConfig, StageKind, StagePlan};
use jointslu::encoder::HeadTarget;
use jointslu::pipeline::{
    ablation_csv, ablation_matrix, cell_mean, early_loss_decreases, evaluate, AblationCell, AblationGrid, RunRecord,
    ScoreReport, Session,
};
use jointslu::datasynth::generate_corpus;
use jointslu::model::SluModel;
use jointslu::verify;

fn report(line: &str) {
    let mut e = std::io::stderr();
    let _ = writeln!(e, "{line}");
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

#[test]
fn criterion_1_ctc_oracle() {
    let start = Instant::now();
    let err = verify::ctc_oracle_error(200, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = err <= 1e-10 && secs < 10.0;
    report(&format!(
        "CRITERION 1 ctc oracle equivalence (200 instances): max |dloss| {err:.2e}, {secs:.2}s ... {}",
        verdict(ok)
    ));
    assert!(ok);
}

#[test]
fn criterion_2_rnnt_oracle() {
    let start = Instant::now();
    let result = verify::rnnt_oracle_error(200, 2);
    let secs = start.elapsed().as_secs_f64();
    let ok = matches!(result, Ok(e) if e <= 1e-10);
    report(&format!(
        "CRITERION 2 rnnt oracle equivalence + binomial path counts (200 instances): {result:?}, {secs:.2}s ... {}",
        verdict(ok)
    ));
    assert!(ok);
}

fn suite_line(n: u32, title: &str, checks: &[verify::Check]) -> bool {
    let ok = checks.iter().all(|c| c.passed);
    let worst = checks
        .iter()
        .filter(|c| c.tolerance > 0.0)
        .map(|c| c.measured / c.tolerance)
        .fold(0.0f64, f64::max);
    report(&format!(
        "CRITERION {n} {title}: {}/{} checks, worst error/tolerance {worst:.2e} ... {}",
        checks.iter().filter(|c| c.passed).count(),
        checks.len(),
        verdict(ok)
    ));
    for c in checks.iter().filter(|c| !c.passed) {
        report(&format!("    {c}"));
    }
    ok
}

#[test]
fn criterion_3_gradient_suite() {
    assert!(suite_line(3, "finite-difference gradient suite", &verify::grads()));
}

#[test]
fn criterion_4_reduction_identities() {
    assert!(suite_line(4, "reduction identities", &verify::identities()));
}

struct Trained {
    session: Session,
    model: SluModel,
    records: Vec<RunRecord>,
    elapsed: Duration,
    test: ScoreReport,
}

/// The default desk run, trained once and shared by criteria 5 and 7.
fn desk_run() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let session = Session::generate(RunConfig::default()).unwrap();
        let (model, records) = session.run_all().unwrap();
        let elapsed = start.elapsed();
        let test = evaluate(&model, &session.test, 1).unwrap();
        Trained {
            session,
            model,
            records,
            elapsed,
            test,
        }
    })
}

#[test]
fn criterion_5_toy_end_to_end() {
    let run = desk_run();
    let cfg = &run.session.config;
    assert_eq!((cfg.data.train, cfg.data.dev, cfg.data.test), (500, 100, 100));
    assert_eq!((cfg.encoder.layers, cfg.encoder.d_model, cfg.encoder.sctc_positions.len()), (4, 64, 2));
    assert!(cfg.stages.iter().all(|s| s.kind == StageKind::SluAdapt && s.lambda == 0.5));
    let epochs: usize = cfg.stages.iter().map(|s| s.epochs).sum();
    let intent = run.test.intent_acc.unwrap();
    let f1 = run.test.slu_f1.unwrap();
    let secs = run.elapsed.as_secs_f64();
    let trend = early_loss_decreases(&run.records);
    let ok = intent >= 0.95 && f1 >= 0.90 && epochs <= 30 && secs < 900.0;
    report(&format!(
        "CRITERION 5 toy end-to-end (L_JNT, {epochs} epochs): test intent acc {intent:.3} (>= 0.95), entity F1 {f1:.3} (>= 0.90), WER {:.3}, {secs:.0}s (< 900s), early loss trend {} ... {}",
        run.test.wer.unwrap_or(f64::NAN),
        if trend { "decreasing" } else { "FLAGGED: not decreasing" },
        verdict(ok)
    ));
    assert!(ok);
}

#[test]
fn criterion_7_decode_properties() {
    let run = desk_run();
    let utts: Vec<_> = run.session.test.iter().take(50).collect();
    let (mut same, mut not_worse) = (0, 0);
    for ex in &utts {
        let greedy = run.model.greedy(&ex.frames).unwrap();
        let b1 = run.model.beam(&ex.frames, 1).unwrap();
        if b1.symbols == greedy.symbols && b1.score.to_bits() == greedy.score.to_bits() {
            same += 1;
        }
        let b8 = run.model.beam(&ex.frames, 8).unwrap();
        if b8.score >= greedy.score {
            not_worse += 1;
        }
    }
    let n = utts.len();
    let ok = n == 50 && same == n && not_worse == n;
    report(&format!(
        "CRITERION 7 decode properties: beam=1 == greedy on {same}/{n}, beam=8 score >= greedy on {not_worse}/{n} ... {}",
        verdict(ok)
    ));
    assert!(ok);
}

#[test]
fn criterion_8_determinism() {
    let mut cfg = RunConfig::default();
    cfg.data.train = 60;
    cfg.data.dev = 10;
    cfg.data.test = 10;
    cfg.stages = vec![
        StagePlan::new(StageKind::AsrPretrain, 2),
        StagePlan::new(StageKind::AsrFinetuneKt, 2),
        StagePlan {
            eval_every: 1,
            ..StagePlan::new(StageKind::SluAdaptKt, 2)
        },
    ];
    let train = || {
        let session = Session::generate(cfg.clone()).unwrap();
        let (model, records) = session.run_all().unwrap();
        let mut ckpt = Vec::new();
        model.save(&mut ckpt, &session.config_hash).unwrap();
        (ckpt, serde_json::to_string(&records).unwrap())
    };
    let (c1, r1) = train();
    let (c2, r2) = train();
    let ok = c1 == c2 && r1 == r2;
    report(&format!(
        "CRITERION 8 determinism (3-stage schedule, two runs): checkpoints {} bytes {}, run records {} ... {}",
        c1.len(),
        if c1 == c2 { "identical" } else { "DIFFER" },
        if r1 == r2 { "identical" } else { "DIFFER" },
        verdict(ok)
    ));
    assert!(ok);
}

/// Ablation base: the default corpus with a shortened schedule.
fn ablation_base() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.dev = 20;
    cfg
}

fn slu_stage(epochs: usize) -> StagePlan {
    StagePlan {
        lr: 4e-3,
        lr_decay: true,
        ..StagePlan::new(StageKind::SluAdapt, epochs)
    }
}

#[test]
fn criterion_6_directional_ablations() {
    const EPOCHS: usize = 10;
    let base = ablation_base();
    let d = &base.data;
    let corpus = generate_corpus(&base.grammar, [d.train, d.dev, d.test], d.seed, &d.render).unwrap();
    let seeds = vec![0, 1, 2];
    let kt_stages = |use_boe: bool| {
        vec![
            StagePlan {
                lr: 4e-3,
                lr_decay: true,
                ..StagePlan::new(StageKind::AsrFinetuneKt, 4)
            },
            StagePlan {
                lr: 4e-3,
                lr_decay: true,
                use_boe,
                ..StagePlan::new(StageKind::SluAdaptKt, EPOCHS)
            },
        ]
    };
    let cell = |name: &str| AblationCell {
        name: name.into(),
        stages: Some(vec![slu_stage(EPOCHS)]),
        ..AblationCell::default()
    };
    let grid = AblationGrid {
        cells: vec![
            cell("jnt"),
            AblationCell {
                lambda: Some(1.0),
                ..cell("rnnt_only")
            },
            AblationCell {
                sctc_targets: Some(vec![HeadTarget::Asr, HeadTarget::Asr]),
                ..cell("heads_asr")
            },
            AblationCell {
                sctc_targets: Some(vec![HeadTarget::Slu, HeadTarget::Slu]),
                ..cell("heads_slu")
            },
            AblationCell {
                name: "kt_boe".into(),
                stages: Some(kt_stages(true)),
                ..AblationCell::default()
            },
            AblationCell {
                name: "kt_no_boe".into(),
                stages: Some(kt_stages(false)),
                ..AblationCell::default()
            },
        ],
        seeds,
    };
    let rows = ablation_matrix(&base, &grid, &corpus).unwrap();
    assert_eq!(rows.len(), 18);
    let csv = ablation_csv(&rows);
    for line in csv.lines().filter(|l| l.contains(",mean,")) {
        report(&format!("    {line}"));
    }
    let f1 = |c: &str| cell_mean(&rows, c, |s| s.slu_f1).unwrap();
    let intent = |c: &str| cell_mean(&rows, c, |s| s.intent_acc).unwrap();
    let flag = |ok: bool| if ok { "PASS" } else { "FLAG" };
    let a = f1("jnt") >= f1("rnnt_only");
    let b = f1("heads_asr") >= f1("heads_slu");
    let c = intent("kt_boe") >= intent("kt_no_boe");
    let trend = rows.iter().filter(|r| !r.loss_decreasing).map(|r| format!("{}/{}", r.cell, r.seed)).collect::<Vec<_>>();
    report(&format!(
        "CRITERION 6 directional ablations (3 seeds, 10-epoch schedule): (a) F1 jnt {:.3} vs rnnt-only {:.3} {}; (b) F1 asr-heads {:.3} vs slu-heads {:.3} {}; (c) intent kt+boe {:.3} vs kt {:.3} {}; early-loss flags {:?} ... {}",
        f1("jnt"),
        f1("rnnt_only"),
        flag(a),
        f1("heads_asr"),
        f1("heads_slu"),
        flag(b),
        intent("kt_boe"),
        intent("kt_no_boe"),
        flag(c),
        trend,
        if a && b && c { "PASS" } else { "FLAG (reported, not failed)" }
    ));
    assert!(csv.lines().count() == 1 + 18 + 6);
}
