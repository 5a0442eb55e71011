//! Composite losses, optimizer and the staged training schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::config::{RunConfig, StageKind, StagePlan};
use crate::datasynth::{generate_corpus, Corpus, Utterance};
use crate::encoder::{sctc_loss, HeadTarget};
use crate::error::{Error, Result};
use crate::kt::{align_loss, attend_tokens, SyntheticTeacher, TeacherProvider};
use crate::lattice::ctc_min_frames;
use crate::metrics::{corpus_wer, slu_scores, EntitySet};
use crate::model::{GateMode, ModelConfig, OutputKind, SluModel};
use crate::rnnt::rnnt_loss_node;
use crate::sluhead::{boe_loss, joint_gated, prediction, BoeTarget};

/// A training or evaluation example with every target precomputed.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub frames: Tensor,
    pub transcript: Vec<usize>,
    pub tags: Vec<usize>,
    pub boe: BoeTarget,
    pub teacher_ids: Vec<usize>,
    /// `[teacher_ids.len(), e]` when a teacher is available.
    pub teacher_rows: Option<Tensor>,
}

pub fn prepare(model: &SluModel, utts: &[Utterance], teacher: Option<&dyn TeacherProvider>) -> Result<Vec<Example>> {
    if let Some(t) = teacher {
        if t.width() != model.config.kt.teacher_width {
            return Err(Error::Config(format!(
                "teacher width {} differs from configured {}",
                t.width(),
                model.config.kt.teacher_width
            )));
        }
    }
    utts.iter()
        .map(|u| {
            let tags = u.tag_ids(&model.vocab)?;
            let tokens = model.teacher_vocab.tokenize(&u.text);
            Ok(Example {
                id: u.id.clone(),
                text: u.text.clone(),
                frames: u.frames.clone(),
                transcript: u.transcript_ids(&model.vocab)?,
                boe: model.boe_target(&tags)?,
                tags,
                teacher_ids: model.teacher_vocab.ids(&tokens)?,
                teacher_rows: teacher.map(|t| t.embed(&u.id, &tokens)).transpose()?,
            })
        })
        .collect()
}

/// Gate conditioning used by a stage.
pub fn stage_gate(plan: &StagePlan) -> GateMode {
    match plan.kind {
        StageKind::SluAdaptKt if plan.use_boe => GateMode::ClsBoe,
        StageKind::SluAdaptKt => GateMode::Cls,
        _ => GateMode::Plain,
    }
}

/// Batch loss and its per-component means.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub rnnt: f64,
    pub sctc: f64,
    pub align: f64,
    pub boe: f64,
    pub used: usize,
    pub skipped: usize,
}

fn head_targets<'a>(model: &SluModel, ex: &'a Example, asr_only: bool) -> Vec<&'a [usize]> {
    model
        .config
        .encoder
        .sctc_targets
        .iter()
        .map(|k| match k {
            HeadTarget::Slu if !asr_only => ex.tags.as_slice(),
            _ => ex.transcript.as_slice(),
        })
        .collect()
}

/// Stage loss over `batch`, averaged per example:
///
/// * ASR stages: `lambda * rnnt(transcript) + (1 - lambda) * sctc(transcript)`,
///   plus `alpha * align` over the batch's concatenated token rows when
///   fine-tuning with knowledge transfer.
/// * SLU stages: `lambda * rnnt(tags) + (1 - lambda) * sctc`, where each head
///   is scored against its configured target, plus `beta * boe` when the
///   gated joint uses the entity distribution.
///
/// Examples whose CTC targets cannot fit their frames are skipped and
/// counted; `None` means every example was skipped.
pub fn batch_loss(g: &mut Graph, model: &SluModel, batch: &[&Example], plan: &StagePlan) -> Result<Option<LossParts>> {
    let blank = model.vocab.blank_id();
    let mode = stage_gate(plan);
    let asr = plan.kind.is_asr();
    let use_align = plan.kind == StageKind::AsrFinetuneKt && plan.alpha > 0.0;
    let use_boe = mode == GateMode::ClsBoe;
    let (mut rnnt_sum, mut sctc_sum, mut boe_sum) = (0.0, 0.0, 0.0);
    let mut skipped = 0;
    let mut terms = Vec::new();
    let mut pooled = Vec::new();
    let mut teacher = Vec::new();
    for ex in batch {
        let targets = head_targets(model, ex, asr);
        let frames = ex.frames.shape()[0];
        if targets.iter().any(|y| ctc_min_frames(y) > frames) {
            skipped += 1;
            continue;
        }
        let st = model.encode(g, &ex.frames)?;
        let sctc = sctc_loss(g, &st, &targets, blank)?;
        let forced = plan.boe_teacher_forcing.then_some(&ex.boe);
        let (input, boe) = model.gate_inputs(g, st.h, mode, forced)?;
        let target = if asr { &ex.transcript } else { &ex.tags };
        let pred = prediction(g, &model.params, target, blank)?;
        let jlp = joint_gated(g, &model.params, st.h, pred, &input)?;
        let rnnt = rnnt_loss_node(g, jlp, frames, target, blank)?;
        rnnt_sum += g.scalar(rnnt);
        sctc_sum += g.scalar(sctc);
        let a = g.scale(rnnt, plan.lambda)?;
        let b = g.scale(sctc, 1.0 - plan.lambda)?;
        let mut term = g.add(a, b)?;
        if use_boe {
            let boe = boe.expect("entity head evaluated in this mode");
            let l = boe_loss(g, boe.log_probs, &ex.boe)?;
            boe_sum += g.scalar(l);
            let l = g.scale(l, plan.beta)?;
            term = g.add(term, l)?;
        }
        terms.push(term);
        if use_align {
            let rows = ex
                .teacher_rows
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("no teacher rows for {}", ex.id)))?;
            pooled.push(attend_tokens(g, &model.params, &ex.teacher_ids, st.h)?.values);
            teacher.push(rows.clone());
        }
    }
    let used = terms.len();
    if used == 0 {
        return Ok(None);
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = g.add(sum, t)?;
    }
    let mut total = g.scale(sum, 1.0 / used as f64)?;
    let mut align = 0.0;
    if use_align {
        let bx = if pooled.len() == 1 { pooled[0] } else { g.concat(&pooled, 0)? };
        let e = teacher[0].shape()[1];
        let data: Vec<f64> = teacher.iter().flat_map(|t| t.data().iter().copied()).collect();
        let rows = data.len() / e;
        let by = g.constant(Tensor::new(vec![rows, e], data)?)?;
        let l = align_loss(g, bx, by, plan.tau)?;
        align = g.scalar(l);
        let l = g.scale(l, plan.alpha)?;
        total = g.add(total, l)?;
    }
    let n = used as f64;
    Ok(Some(LossParts {
        total,
        rnnt: rnnt_sum / n,
        sctc: sctc_sum / n,
        align,
        boe: boe_sum / n,
        used,
        skipped,
    }))
}

/// `lambda * L_RNNT(tags) + (1 - lambda) * L_SCTC`.
pub fn loss_jnt(g: &mut Graph, model: &SluModel, batch: &[&Example], lambda: f64) -> Result<Option<LossParts>> {
    let plan = StagePlan {
        lambda,
        ..StagePlan::new(StageKind::SluAdapt, 0)
    };
    batch_loss(g, model, batch, &plan)
}

/// `lambda * L_RNNT(transcript) + (1 - lambda) * L_SCTC + alpha * L_ALIGN`.
pub fn loss_asr_kt(
    g: &mut Graph,
    model: &SluModel,
    batch: &[&Example],
    lambda: f64,
    alpha: f64,
    tau: f64,
) -> Result<Option<LossParts>> {
    let plan = StagePlan {
        lambda,
        alpha,
        tau,
        ..StagePlan::new(StageKind::AsrFinetuneKt, 0)
    };
    batch_loss(g, model, batch, &plan)
}

/// `lambda * L_RNNT(tags | CLS, BOE) + (1 - lambda) * L_SCTC + beta * L_BOE`.
pub fn loss_jnt_kt(
    g: &mut Graph,
    model: &SluModel,
    batch: &[&Example],
    lambda: f64,
    beta: f64,
    use_boe: bool,
) -> Result<Option<LossParts>> {
    let plan = StagePlan {
        lambda,
        beta,
        use_boe,
        ..StagePlan::new(StageKind::SluAdaptKt, 0)
    };
    batch_loss(g, model, batch, &plan)
}

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    step: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, clip: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> f64 {
        let norm = grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (w, &g)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g * scale;
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
        norm
    }
}

/// Dev/test scores; the SLU fields are absent for transcript models and the
/// WER is absent when no transcript source exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub slu_f1: Option<f64>,
    pub intent_acc: Option<f64>,
    pub wer: Option<f64>,
    pub n: usize,
}

/// Decodes `examples` (greedy for `beam <= 1`) and scores them.
pub fn evaluate(model: &SluModel, examples: &[Example], beam: usize) -> Result<ScoreReport> {
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut pairs = Vec::new();
    for ex in examples {
        let hyp = if beam <= 1 {
            model.greedy(&ex.frames)?
        } else {
            model.beam(&ex.frames, beam)?
        };
        match model.output {
            OutputKind::Tags => {
                hyps.push(EntitySet::from_tags(&hyp.symbols, &model.vocab));
                refs.push(EntitySet::from_tags(&ex.tags, &model.vocab));
                if let Some(text) = model.ctc_transcript(&ex.frames)? {
                    pairs.push((text, ex.text.clone()));
                }
            }
            OutputKind::Transcript => pairs.push((model.vocab.decode_text(&hyp.symbols), ex.text.clone())),
        }
    }
    let wer = (!pairs.is_empty()).then(|| corpus_wer(&pairs));
    if model.output == OutputKind::Transcript {
        return Ok(ScoreReport {
            precision: None,
            recall: None,
            slu_f1: None,
            intent_acc: None,
            wer,
            n: examples.len(),
        });
    }
    let s = slu_scores(&hyps, &refs);
    Ok(ScoreReport {
        precision: Some(s.precision),
        recall: Some(s.recall),
        slu_f1: Some(s.f1),
        intent_acc: Some(s.intent_accuracy),
        wer,
        n: examples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub rnnt: f64,
    pub sctc: f64,
    pub align: f64,
    pub boe: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub stage: usize,
    pub kind: StageKind,
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossSummary,
    pub skipped: usize,
    pub dev: Option<ScoreReport>,
}

/// Training data bound to a configuration.
pub struct Session {
    pub config: RunConfig,
    pub config_hash: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Session {
    /// Builds a session from a corpus. The teacher defaults to the built-in
    /// synthetic provider.
    pub fn new(config: RunConfig, corpus: &Corpus, teacher: Option<&dyn TeacherProvider>) -> Result<Self> {
        config.validate()?;
        if corpus.vocab.hash() != config.grammar.vocab()?.hash() {
            return Err(Error::Config("corpus vocabulary differs from the configured grammar".into()));
        }
        let probe = Self::blank_model(&config, corpus)?;
        let synthetic;
        let teacher: &dyn TeacherProvider = match teacher {
            Some(t) => t,
            None => {
                synthetic = SyntheticTeacher::new(
                    probe.teacher_vocab.clone(),
                    config.kt.teacher_width,
                    config.kt.teacher_seed,
                );
                &synthetic
            }
        };
        Ok(Self {
            config_hash: config.hash(),
            train: prepare(&probe, &corpus.train, Some(teacher))?,
            dev: prepare(&probe, &corpus.dev, Some(teacher))?,
            test: prepare(&probe, &corpus.test, Some(teacher))?,
            config,
        })
    }

    /// Generates the configured corpus in memory.
    pub fn generate(config: RunConfig) -> Result<Self> {
        let d = &config.data;
        let corpus = generate_corpus(&config.grammar, [d.train, d.dev, d.test], d.seed, &d.render)?;
        Self::new(config, &corpus, None)
    }

    fn blank_model(config: &RunConfig, corpus: &Corpus) -> Result<SluModel> {
        SluModel::new(model_config(config), corpus.vocab.clone(), config.seed)
    }

    /// Model initialized from the run seed.
    pub fn init_model(&self) -> Result<SluModel> {
        let vocab = self.config.grammar.vocab()?;
        SluModel::new(model_config(&self.config), vocab, self.config.seed)
    }

    /// Trains `stages` (indices into the configured schedule) in order.
    /// `on_record` sees every epoch record, `on_stage` the model after each
    /// stage.
    pub fn run(
        &self,
        model: &mut SluModel,
        stages: &[usize],
        on_record: &mut dyn FnMut(&RunRecord) -> Result<()>,
        on_stage: &mut dyn FnMut(usize, &SluModel) -> Result<()>,
    ) -> Result<Vec<RunRecord>> {
        let mut all = Vec::new();
        for &i in stages {
            let plan = self
                .config
                .stages
                .get(i)
                .ok_or_else(|| Error::Config(format!("no stage {i}")))?;
            let seed = self.config.stage_seed(i);
            let records = train_stage(model, plan, i, seed, &self.train, &self.dev, &self.config_hash, on_record)?;
            on_stage(i, model)?;
            all.extend(records);
        }
        Ok(all)
    }

    /// Initializes a model and runs the whole schedule.
    pub fn run_all(&self) -> Result<(SluModel, Vec<RunRecord>)> {
        let mut model = self.init_model()?;
        let stages: Vec<usize> = (0..self.config.stages.len()).collect();
        let records = self.run(&mut model, &stages, &mut |_| Ok(()), &mut |_, _| Ok(()))?;
        Ok((model, records))
    }
}

pub fn model_config(config: &RunConfig) -> ModelConfig {
    ModelConfig {
        encoder: config.encoder.clone(),
        sluhead: config.sluhead.clone(),
        kt: config.kt.clone(),
    }
}

fn divergence(stage: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            stage,
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains one stage. The model's decoding mode is switched to the stage's
/// before any evaluation.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    model: &mut SluModel,
    plan: &StagePlan,
    stage: usize,
    seed: u64,
    train: &[Example],
    dev: &[Example],
    config_hash: &str,
    on_record: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<Vec<RunRecord>> {
    plan.validate()?;
    model.gate = stage_gate(plan);
    model.output = if plan.kind.is_asr() {
        OutputKind::Transcript
    } else {
        OutputKind::Tags
    };
    let mut opt = Adam::new(plan.lr, plan.clip);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut step = 0;
    let total_steps = plan.epochs * train.len().div_ceil(plan.batch_size);
    for epoch in 1..=plan.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0f64; 5];
        let (mut used, mut skipped) = (0usize, 0usize);
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let parts = batch_loss(&mut g, model, &batch, plan).map_err(|e| divergence(stage, step, e))?;
            let Some(parts) = parts else {
                skipped += batch.len();
                continue;
            };
            let value = g.scalar(parts.total);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage,
                    step,
                    detail: format!("loss {value}"),
                });
            }
            let grads = g.backward(parts.total).map_err(|e| divergence(stage, step, e))?;
            let grads = g.param_grads(&grads);
            if plan.lr_decay {
                opt.lr = plan.lr * (1.0 - step as f64 / total_steps as f64);
            }
            opt.update(&mut model.params, &grads);
            step += 1;
            let w = parts.used as f64;
            for (a, v) in acc.iter_mut().zip([value, parts.rnnt, parts.sctc, parts.align, parts.boe]) {
                *a += w * v;
            }
            used += parts.used;
            skipped += parts.skipped;
        }
        let n = used.max(1) as f64;
        let eval_now = epoch == plan.epochs || (plan.eval_every > 0 && epoch % plan.eval_every == 0);
        let dev_report = if eval_now && !dev.is_empty() {
            Some(evaluate(model, dev, 1)?)
        } else {
            None
        };
        let rec = RunRecord {
            config_hash: config_hash.to_string(),
            seed,
            stage,
            kind: plan.kind,
            epoch,
            steps: step,
            loss: LossSummary {
                total: acc[0] / n,
                rnnt: acc[1] / n,
                sctc: acc[2] / n,
                align: acc[3] / n,
                boe: acc[4] / n,
            },
            skipped,
            dev: dev_report,
        };
        log::info!(
            "stage {stage} epoch {epoch}: loss {:.4} (rnnt {:.4}, sctc {:.4}, align {:.4}, boe {:.4})",
            rec.loss.total,
            rec.loss.rnnt,
            rec.loss.sctc,
            rec.loss.align,
            rec.loss.boe
        );
        on_record(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// False when the smoothed training loss fails to decrease over the first
/// five epochs (three-epoch moving average).
pub fn early_loss_decreases(records: &[RunRecord]) -> bool {
    let losses: Vec<f64> = records.iter().take(5).map(|r| r.loss.total).collect();
    if losses.len() < 3 {
        return losses.windows(2).all(|w| w[1] <= w[0]);
    }
    let smooth: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    smooth.windows(2).all(|w| w[1] <= w[0]) && losses.last() < losses.first()
}

/// One cell of an ablation grid: overrides applied to the base config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    #[serde(default)]
    pub sctc_targets: Option<Vec<HeadTarget>>,
    #[serde(default)]
    pub sctc_positions: Option<Vec<usize>>,
    #[serde(default)]
    pub stages: Option<Vec<StagePlan>>,
    /// Applied to every stage.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Applied to every stage.
    #[serde(default)]
    pub use_boe: Option<bool>,
}

impl AblationCell {
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut c = base.clone();
        if let Some(p) = &self.sctc_positions {
            c.encoder.sctc_positions = p.clone();
        }
        if let Some(t) = &self.sctc_targets {
            c.encoder.sctc_targets = t.clone();
        }
        if let Some(s) = &self.stages {
            c.stages = s.clone();
        }
        for s in &mut c.stages {
            if let Some(l) = self.lambda {
                s.lambda = l;
            }
            if let Some(b) = self.use_boe {
                s.use_boe = b;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
    /// Model seeds; the run seed when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub config_hash: String,
    pub test: ScoreReport,
    pub loss_decreasing: bool,
}

/// Runs every cell of `grid` for every seed on one shared corpus.
pub fn ablation_matrix(base: &RunConfig, grid: &AblationGrid, corpus: &Corpus) -> Result<Vec<AblationRow>> {
    let seeds = if grid.seeds.is_empty() { vec![base.seed] } else { grid.seeds.clone() };
    let mut rows = Vec::new();
    for &seed in &seeds {
        for cell in &grid.cells {
            let mut cfg = cell.apply(base)?;
            cfg.seed = seed;
            let session = Session::new(cfg, corpus, None)?;
            let (model, records) = session.run_all()?;
            let first = records.iter().filter(|r| r.stage == 0).cloned().collect::<Vec<_>>();
            rows.push(AblationRow {
                cell: cell.name.clone(),
                seed,
                config_hash: session.config_hash.clone(),
                test: evaluate(&model, &session.test, 1)?,
                loss_decreasing: early_loss_decreases(&first),
            });
        }
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with one line per run followed by one `mean` line per cell.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("cell,seed,precision,recall,slu_f1,intent_acc,wer,loss_decreasing,config_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.cell,
            r.seed,
            fmt_opt(r.test.precision),
            fmt_opt(r.test.recall),
            fmt_opt(r.test.slu_f1),
            fmt_opt(r.test.intent_acc),
            fmt_opt(r.test.wer),
            r.loss_decreasing,
            r.config_hash
        ));
    }
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.cell.as_str()) {
            names.push(&r.cell);
        }
    }
    for name in names {
        let cell: Vec<&AblationRow> = rows.iter().filter(|r| r.cell == name).collect();
        let mean = |f: fn(&ScoreReport) -> Option<f64>| {
            let v: Vec<f64> = cell.iter().filter_map(|r| f(&r.test)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        out.push_str(&format!(
            "{name},mean,{},{},{},{},{},{},\n",
            fmt_opt(mean(|s| s.precision)),
            fmt_opt(mean(|s| s.recall)),
            fmt_opt(mean(|s| s.slu_f1)),
            fmt_opt(mean(|s| s.intent_acc)),
            fmt_opt(mean(|s| s.wer)),
            cell.iter().all(|r| r.loss_decreasing)
        ));
    }
    out
}

/// Mean of `f` over the rows of `cell`.
pub fn cell_mean(rows: &[AblationRow], cell: &str, f: fn(&ScoreReport) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.cell == cell).filter_map(|r| f(&r.test)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::kt::KtConfig;
    use crate::sluhead::SluHeadConfig;

    fn tiny(stages: Vec<StagePlan>) -> RunConfig {
        let mut c = RunConfig {
            encoder: EncoderConfig {
                layers: 2,
                d_model: 8,
                heads: 2,
                ff_dim: 16,
                sctc_positions: vec![1, 2],
                ..EncoderConfig::default()
            },
            sluhead: SluHeadConfig {
                pred_dim: 6,
                joint_dim: 5,
            },
            kt: KtConfig {
                teacher_width: 4,
                teacher_seed: 2,
            },
            stages,
            ..RunConfig::default()
        };
        c.data.train = 6;
        c.data.dev = 2;
        c.data.test = 2;
        c
    }

    fn session() -> Session {
        Session::generate(tiny(vec![StagePlan::new(StageKind::SluAdapt, 1)])).unwrap()
    }

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn joint_loss_is_affine_in_lambda() {
        let s = session();
        let m = s.init_model().unwrap();
        let batch: Vec<&Example> = s.train.iter().take(3).collect();
        for lambda in [0.0, 0.3, 0.5, 1.0] {
            let mut g = Graph::new();
            let p = loss_jnt(&mut g, &m, &batch, lambda).unwrap().unwrap();
            close(g.scalar(p.total), lambda * p.rnnt + (1.0 - lambda) * p.sctc);
        }
    }

    #[test]
    fn asr_kt_loss_adds_alignment() {
        let s = session();
        let m = s.init_model().unwrap();
        let batch: Vec<&Example> = s.train.iter().take(3).collect();
        let mut g = Graph::new();
        let p = loss_asr_kt(&mut g, &m, &batch, 0.4, 2.0, 0.07).unwrap().unwrap();
        assert!(p.align > 0.0);
        close(g.scalar(p.total), 0.4 * p.rnnt + 0.6 * p.sctc + 2.0 * p.align);
        let mut g = Graph::new();
        let p = loss_asr_kt(&mut g, &m, &batch, 0.4, 0.0, 0.07).unwrap().unwrap();
        close(g.scalar(p.total), 0.4 * p.rnnt + 0.6 * p.sctc);
    }

    #[test]
    fn kt_loss_reduces_to_joint_loss() {
        let s = session();
        let mut m = s.init_model().unwrap();
        for name in ["gate.w_b", "gate.w_c"] {
            m.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let batch: Vec<&Example> = s.train.iter().take(4).collect();
        let mut g = Graph::new();
        let plain = loss_jnt(&mut g, &m, &batch, 0.5).unwrap().unwrap();
        let plain = g.scalar(plain.total);
        for use_boe in [false, true] {
            let mut g = Graph::new();
            let kt = loss_jnt_kt(&mut g, &m, &batch, 0.5, 0.0, use_boe).unwrap().unwrap();
            close(g.scalar(kt.total), plain);
        }
        let mut g = Graph::new();
        let kt = loss_jnt_kt(&mut g, &m, &batch, 0.5, 0.1, true).unwrap().unwrap();
        close(g.scalar(kt.total), plain + 0.1 * kt.boe);
    }

    #[test]
    fn infeasible_examples_are_skipped() {
        let s = session();
        let m = s.init_model().unwrap();
        let mut short = s.train[0].clone();
        short.frames = Tensor::zeros(&[1, short.frames.shape()[1]]);
        let mut g = Graph::new();
        assert!(loss_jnt(&mut g, &m, &[&short], 0.5).unwrap().is_none());
        let mut g = Graph::new();
        let p = loss_jnt(&mut g, &m, &[&short, &s.train[1]], 0.5).unwrap().unwrap();
        assert_eq!((p.used, p.skipped), (1, 1));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![3], vec![0.5, -2.0, 0.0]).unwrap());
        let mut opt = Adam::new(0.1, 100.0);
        opt.update(&mut store, &grads);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 2.1).abs() < 1e-6 && w[2] == 3.0);
    }

    #[test]
    fn zero_epochs_or_zero_lr_leave_parameters_unchanged() {
        let s = session();
        let init = s.init_model().unwrap();
        for plan in [
            StagePlan::new(StageKind::SluAdapt, 0),
            StagePlan {
                lr: 0.0,
                ..StagePlan::new(StageKind::SluAdaptKt, 1)
            },
        ] {
            let mut m = s.init_model().unwrap();
            train_stage(&mut m, &plan, 0, 1, &s.train[..2], &[], "h", &mut |_| Ok(())).unwrap();
            for (name, t) in init.params.iter() {
                assert_eq!(m.params.get(name).unwrap(), t, "{name}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny(vec![
            StagePlan::new(StageKind::AsrFinetuneKt, 1),
            StagePlan::new(StageKind::SluAdaptKt, 1),
        ]);
        let run = || {
            let s = Session::generate(cfg.clone()).unwrap();
            let (m, records) = s.run_all().unwrap();
            let mut buf = Vec::new();
            m.save(&mut buf, &s.config_hash).unwrap();
            (buf, records)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 2);
        assert!(ra.iter().all(|r| r.config_hash == cfg.hash()));
    }

    #[test]
    fn stage_modes() {
        let mut p = StagePlan::new(StageKind::SluAdaptKt, 1);
        assert_eq!(stage_gate(&p), GateMode::ClsBoe);
        p.use_boe = false;
        assert_eq!(stage_gate(&p), GateMode::Cls);
        assert_eq!(stage_gate(&StagePlan::new(StageKind::AsrPretrain, 1)), GateMode::Plain);
    }

    fn record(loss: f64) -> RunRecord {
        RunRecord {
            config_hash: String::new(),
            seed: 0,
            stage: 0,
            kind: StageKind::SluAdapt,
            epoch: 0,
            steps: 0,
            loss: LossSummary {
                total: loss,
                rnnt: 0.0,
                sctc: 0.0,
                align: 0.0,
                boe: 0.0,
            },
            skipped: 0,
            dev: None,
        }
    }

    #[test]
    fn early_loss_trend() {
        let rs: Vec<RunRecord> = [5.0, 4.0, 4.2, 3.0, 2.5].into_iter().map(record).collect();
        assert!(early_loss_decreases(&rs));
        let rs: Vec<RunRecord> = [5.0, 5.5, 6.0, 6.5, 7.0].into_iter().map(record).collect();
        assert!(!early_loss_decreases(&rs));
    }

    #[test]
    fn ablation_cells_and_csv() {
        let base = tiny(vec![StagePlan::new(StageKind::SluAdapt, 1)]);
        let cell = AblationCell {
            name: "slu".into(),
            sctc_targets: Some(vec![HeadTarget::Slu, HeadTarget::Slu]),
            lambda: Some(1.0),
            ..AblationCell::default()
        };
        let c = cell.apply(&base).unwrap();
        assert_eq!(c.stages[0].lambda, 1.0);
        assert_eq!(c.encoder.sctc_targets, vec![HeadTarget::Slu; 2]);
        let bad = AblationCell {
            name: "bad".into(),
            sctc_positions: Some(vec![2, 1]),
            ..AblationCell::default()
        };
        assert!(bad.apply(&base).is_err());
        let d = base.data.clone();
        let corpus = generate_corpus(&base.grammar, [d.train, d.dev, d.test], d.seed, &d.render).unwrap();
        let grid = AblationGrid {
            cells: vec![cell],
            seeds: vec![0, 1],
        };
        let rows = ablation_matrix(&base, &grid, &corpus).unwrap();
        assert_eq!(rows.len(), 2);
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("slu,mean,"));
        let f = cell_mean(&rows, "slu", |s| s.slu_f1).unwrap();
        assert!((0.0..=1.0).contains(&f));
    }
}
