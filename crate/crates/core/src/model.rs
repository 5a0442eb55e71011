//! The assembled model: parameters, vocabularies, checkpoints and decoding.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, softmax, write_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::ctc::ctc_greedy_decode;
use crate::encoder::{encode, init_encoder, EncoderConfig, EncoderState, HeadTarget};
use crate::error::{Error, Result};
use crate::kt::{attend_tokens, init_kt, KtConfig, TeacherVocab};
use crate::lattice::{SymbolKind, Vocab};
use crate::rnnt::{rnnt_beam_decode, rnnt_greedy_decode, rnnt_trellis, Hypothesis, Transducer, DEFAULT_MAX_SYMBOLS_PER_FRAME};
use crate::sluhead::{
    boe_head, gate_context, init_sluhead, joint_cells, pred_step, pred_zero, project_encoder, project_prediction,
    BoeOutput, BoeTarget, GateInput, JointProj, PredState, SluHeadConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub sluhead: SluHeadConfig,
    pub kt: KtConfig,
}

/// What the joint network is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Plain,
    /// Pooled `[CLS]` vector only.
    Cls,
    /// Pooled `[CLS]` vector and predicted entity distribution.
    ClsBoe,
}

/// Sequence emitted by the transducer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Transcript,
    Tags,
}

/// JSON header stored in every model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub vocab: Vec<String>,
    pub vocab_hash: String,
    pub teacher_vocab: Vec<String>,
    pub model: ModelConfig,
    pub gate: GateMode,
    pub output: OutputKind,
}

#[derive(Debug, Clone)]
pub struct SluModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub teacher_vocab: TeacherVocab,
    pub params: ParamStore,
    pub gate: GateMode,
    pub output: OutputKind,
}

impl SluModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let chars: Vec<char> = (0..vocab.len())
            .filter(|&i| vocab.kind(i) == SymbolKind::Char)
            .map(|i| vocab.symbol(i).chars().next().expect("non-empty symbol"))
            .collect();
        let teacher_vocab = TeacherVocab::new(&chars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, &mut rng, &config.encoder, &vocab)?;
        let d = config.encoder.d_model;
        init_kt(&mut params, &mut rng, &config.kt, teacher_vocab.len(), d);
        let boe = vocab.entity_label_ids().len();
        init_sluhead(&mut params, &mut rng, &config.sluhead, vocab.len(), boe, d, config.kt.teacher_width);
        Ok(Self {
            config,
            vocab,
            teacher_vocab,
            params,
            gate: GateMode::Plain,
            output: OutputKind::Tags,
        })
    }

    /// Bag-of-entities target for an utterance's tag sequence.
    pub fn boe_target(&self, tags: &[usize]) -> Result<BoeTarget> {
        let inventory = self.vocab.entity_label_ids();
        let labels: Vec<usize> = tags
            .iter()
            .filter_map(|id| inventory.iter().position(|x| x == id))
            .collect();
        BoeTarget::from_labels(&labels, inventory.len())
    }

    pub fn meta(&self, config_hash: &str) -> CheckpointMeta {
        CheckpointMeta {
            config_hash: config_hash.to_string(),
            vocab: self.vocab.symbols().to_vec(),
            vocab_hash: self.vocab.hash(),
            teacher_vocab: self.teacher_vocab.tokens().to_vec(),
            model: self.config.clone(),
            gate: self.gate,
            output: self.output,
        }
    }

    pub fn save<W: Write>(&self, w: W, config_hash: &str) -> Result<()> {
        let meta = serde_json::to_string(&self.meta(config_hash))?;
        write_checkpoint(w, &meta, &self.params)
    }

    pub fn load<R: Read>(r: R) -> Result<(Self, CheckpointMeta)> {
        let (meta, params) = read_checkpoint(r)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let vocab = Vocab::from_symbols(meta.vocab.clone())?;
        if vocab.hash() != meta.vocab_hash {
            return Err(Error::Format("checkpoint vocabulary hash mismatch".into()));
        }
        let fresh = Self::new(meta.model.clone(), vocab, 0)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::MissingParam(name.clone())),
            }
        }
        let model = Self {
            config: meta.model.clone(),
            vocab: fresh.vocab,
            teacher_vocab: TeacherVocab::from_tokens(meta.teacher_vocab.clone())?,
            params,
            gate: meta.gate,
            output: meta.output,
        };
        Ok((model, meta))
    }

    pub fn encode(&self, g: &mut Graph, frames: &Tensor) -> Result<EncoderState> {
        encode(g, &self.params, &self.config.encoder, frames)
    }

    /// Gate inputs for `mode`. With `forced`, the ground-truth entity
    /// distribution replaces the predicted one in the gate.
    pub fn gate_inputs(
        &self,
        g: &mut Graph,
        h: Var,
        mode: GateMode,
        forced: Option<&BoeTarget>,
    ) -> Result<(GateInput, Option<BoeOutput>)> {
        if mode == GateMode::Plain {
            return Ok((GateInput::default(), None));
        }
        let pooled = attend_tokens(g, &self.params, &[self.teacher_vocab.cls_id()], h)?;
        let x_cls = pooled.values;
        if mode == GateMode::Cls {
            return Ok((
                GateInput {
                    p_boe: None,
                    x_cls: Some(x_cls),
                },
                None,
            ));
        }
        let boe = boe_head(g, &self.params, x_cls)?;
        let p_boe = match forced {
            Some(t) => {
                let n = t.weights().len();
                g.constant(Tensor::new(vec![1, n], t.weights().to_vec())?)?
            }
            None => boe.probs,
        };
        Ok((
            GateInput {
                p_boe: Some(p_boe),
                x_cls: Some(x_cls),
            },
            Some(boe),
        ))
    }

    /// Decoding context over one utterance, conditioned as the model was
    /// last trained.
    pub fn decoder(&self, frames: &Tensor) -> Result<DecodeContext<'_>> {
        DecodeContext::new(self, frames, self.gate)
    }

    pub fn greedy(&self, frames: &Tensor) -> Result<Hypothesis> {
        rnnt_greedy_decode(&mut self.decoder(frames)?, DEFAULT_MAX_SYMBOLS_PER_FRAME)
    }

    /// Best hypothesis of a width-`beam` search.
    pub fn beam(&self, frames: &Tensor, beam: usize) -> Result<Hypothesis> {
        let hyps = rnnt_beam_decode(&mut self.decoder(frames)?, beam, DEFAULT_MAX_SYMBOLS_PER_FRAME)?;
        hyps.into_iter()
            .next()
            .ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
    }

    /// Best-path transcript of the last ASR-target CTC head, if any.
    pub fn ctc_transcript(&self, frames: &Tensor) -> Result<Option<String>> {
        let cfg = &self.config.encoder;
        let Some(k) = (0..cfg.num_heads()).rev().find(|&k| cfg.sctc_targets[k] == HeadTarget::Asr) else {
            return Ok(None);
        };
        let mut g = Graph::new();
        let st = self.encode(&mut g, frames)?;
        let ids = ctc_greedy_decode(g.value(st.head_logits[k]), self.vocab.blank_id());
        Ok(Some(self.vocab.decode_text(&ids)))
    }

    /// The three alignment views of one utterance: RNN-T state occupancy
    /// over `(t, u)` for `target`, frame posteriors of the last CTC head, and
    /// the teacher-token attention weights for `text`.
    pub fn alignments(&self, frames: &Tensor, target: &[usize], text: &str) -> Result<Alignments> {
        let mut g = Graph::new();
        let st = self.encode(&mut g, frames)?;
        let (input, _) = self.gate_inputs(&mut g, st.h, self.gate, None)?;
        let pred = crate::sluhead::prediction(&mut g, &self.params, target, self.vocab.blank_id())?;
        let jlp = crate::sluhead::joint_gated(&mut g, &self.params, st.h, pred, &input)?;
        let t = frames.shape()[0];
        let u1 = target.len() + 1;
        let lattice = g.value(jlp).reshape(&[t, u1, self.vocab.len()])?;
        let trellis = rnnt_trellis(&lattice, target, self.vocab.blank_id())?;
        let mut occ = Tensor::zeros(&[t, u1]);
        for ti in 0..t {
            for u in 0..u1 {
                occ.data_mut()[ti * u1 + u] = trellis.occupancy(ti, u);
            }
        }
        let last = *st.head_logits.last().expect("at least one head");
        let ctc = softmax(g.value(last));
        let tokens = self.teacher_vocab.tokenize(text);
        let ids = self.teacher_vocab.ids(&tokens)?;
        let pooled = attend_tokens(&mut g, &self.params, &ids, st.h)?;
        Ok(Alignments {
            rnnt_occupancy: occ,
            ctc_posteriors: ctc,
            attention: g.value(pooled.weights).clone(),
            tokens,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Alignments {
    /// `[T, U + 1]`.
    pub rnnt_occupancy: Tensor,
    /// `[T, V_last_head]`.
    pub ctc_posteriors: Tensor,
    /// `[tokens, T]`.
    pub attention: Tensor,
    pub tokens: Vec<String>,
}

/// Prediction-network state plus its joint projections.
#[derive(Debug, Clone, Copy)]
pub struct DecState {
    pred: PredState,
    proj: JointProj,
}

/// [`Transducer`] over one utterance. Encoder-side work is done once;
/// prediction steps and joint evaluations are memoized so that the many
/// overlapping prefixes of a beam search are computed only once.
pub struct DecodeContext<'a> {
    model: &'a SluModel,
    g: Graph,
    frames: usize,
    gated: bool,
    enc: JointProj,
    ctx: Option<Var>,
    steps: HashMap<(usize, usize), DecState>,
    scores: HashMap<(usize, usize), Vec<f64>>,
}

impl<'a> DecodeContext<'a> {
    pub fn new(model: &'a SluModel, frames: &Tensor, mode: GateMode) -> Result<Self> {
        let mut g = Graph::new();
        let st = model.encode(&mut g, frames)?;
        let (input, _) = model.gate_inputs(&mut g, st.h, mode, None)?;
        let ctx = gate_context(&mut g, &model.params, &input)?;
        let gated = ctx.is_some();
        let enc = project_encoder(&mut g, &model.params, st.h, gated)?;
        Ok(Self {
            model,
            g,
            frames: frames.shape()[0],
            gated,
            enc,
            ctx,
            steps: HashMap::new(),
            scores: HashMap::new(),
        })
    }

    fn step(&mut self, pred: PredState, symbol: usize) -> Result<DecState> {
        let pred = pred_step(&mut self.g, &self.model.params, pred, symbol)?;
        let proj = project_prediction(&mut self.g, &self.model.params, pred.h, self.gated)?;
        Ok(DecState { pred, proj })
    }
}

impl Transducer for DecodeContext<'_> {
    type State = DecState;

    fn frames(&self) -> usize {
        self.frames
    }

    fn blank(&self) -> usize {
        self.model.vocab.blank_id()
    }

    fn start(&mut self) -> Result<DecState> {
        let zero = pred_zero(&mut self.g, &self.model.params)?;
        let blank = self.blank();
        self.step(zero, blank)
    }

    fn advance(&mut self, state: &DecState, symbol: usize) -> Result<DecState> {
        let key = (state.pred.h.id(), symbol);
        if let Some(s) = self.steps.get(&key) {
            return Ok(*s);
        }
        let next = self.step(state.pred, symbol)?;
        self.steps.insert(key, next);
        Ok(next)
    }

    fn log_probs(&mut self, t: usize, state: &DecState) -> Result<Vec<f64>> {
        let key = (t, state.pred.h.id());
        if let Some(v) = self.scores.get(&key) {
            return Ok(v.clone());
        }
        let g = &mut self.g;
        let joint = g.slice(self.enc.joint, 0, t, 1)?;
        let gate = match self.enc.gate {
            Some(v) => Some(g.slice(v, 0, t, 1)?),
            None => None,
        };
        let row = JointProj { joint, gate };
        let out = joint_cells(g, &self.model.params, &row, &state.proj, self.ctx)?;
        let v = g.value(out).data().to_vec();
        self.scores.insert(key, v.clone());
        Ok(v)
    }
}
