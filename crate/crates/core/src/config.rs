//! Run configuration: a single JSON document describing data, model and the
//! training schedule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasynth::{Grammar, RenderConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::kt::KtConfig;
use crate::sluhead::SluHeadConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Transcription targets, no knowledge transfer.
    AsrPretrain,
    /// Transcription targets plus alignment to the teacher.
    AsrFinetuneKt,
    /// SLU tag targets through the plain joint network.
    SluAdapt,
    /// SLU tag targets through the gated joint network.
    SluAdaptKt,
}

impl StageKind {
    pub fn is_asr(self) -> bool {
        matches!(self, StageKind::AsrPretrain | StageKind::AsrFinetuneKt)
    }
}

/// One training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub kind: StageKind,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Decay the learning rate linearly to zero over the stage.
    #[serde(default)]
    pub lr_decay: bool,
    /// RNN-T weight; the SCTC term gets `1 - lambda`.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// Alignment weight.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Bag-of-entities weight.
    #[serde(default = "d_beta")]
    pub beta: f64,
    /// Contrastive temperature.
    #[serde(default = "d_tau")]
    pub tau: f64,
    /// Gate on the predicted entity distribution; without it the gate uses
    /// only the pooled `[CLS]` vector and no entity loss is applied.
    #[serde(default = "d_true")]
    pub use_boe: bool,
    /// Feed the ground-truth entity distribution to the gate during training.
    #[serde(default)]
    pub boe_teacher_forcing: bool,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_clip")]
    pub clip: f64,
    /// Evaluate on the dev split every this many epochs; 0 means only after
    /// the last epoch.
    #[serde(default)]
    pub eval_every: usize,
    /// Shuffling seed; defaults to the run seed plus the stage index.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn d_epochs() -> usize {
    10
}
fn d_lr() -> f64 {
    1e-3
}
fn d_lambda() -> f64 {
    0.5
}
fn d_alpha() -> f64 {
    1.0
}
fn d_beta() -> f64 {
    0.1
}
fn d_tau() -> f64 {
    0.07
}
fn d_true() -> bool {
    true
}
fn d_batch() -> usize {
    8
}
fn d_clip() -> f64 {
    5.0
}

impl StagePlan {
    pub fn new(kind: StageKind, epochs: usize) -> Self {
        Self {
            kind,
            epochs,
            lr: d_lr(),
            lr_decay: false,
            lambda: d_lambda(),
            alpha: d_alpha(),
            beta: d_beta(),
            tau: d_tau(),
            use_boe: true,
            boe_teacher_forcing: false,
            batch_size: d_batch(),
            clip: d_clip(),
            eval_every: 0,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.tau <= 0.0 {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return bad(format!("learning rate {} invalid", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.clip <= 0.0 {
            return bad("clip norm must be positive".into());
        }
        Ok(())
    }
}

/// Corpus sizes and rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus seed, independent of the model seed.
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub render: RenderConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train: 500,
            dev: 100,
            test: 100,
            render: RenderConfig::default(),
        }
    }
}

/// Optional external inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Corpus directory written by `synth`; generated in memory when unset.
    pub data: Option<PathBuf>,
    /// Teacher embedding file; the synthetic teacher is used when unset.
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grammar: Grammar,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub sluhead: SluHeadConfig,
    #[serde(default)]
    pub kt: KtConfig,
    #[serde(default)]
    pub stages: Vec<StagePlan>,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grammar: Grammar::default(),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            sluhead: SluHeadConfig::default(),
            kt: KtConfig::default(),
            stages: vec![StagePlan {
                lr: 4e-3,
                lr_decay: true,
                ..StagePlan::new(StageKind::SluAdapt, 30)
            }],
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        self.encoder.validate()?;
        if self.sluhead.pred_dim == 0 || self.sluhead.joint_dim == 0 || self.kt.teacher_width == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if self.data.render.width != self.encoder.input_dim {
            return Err(Error::Config(format!(
                "frame width {} differs from encoder input width {}",
                self.data.render.width, self.encoder.input_dim
            )));
        }
        for s in &self.stages {
            s.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Shuffle seed of stage `i`.
    pub fn stage_seed(&self, i: usize) -> u64 {
        self.stages[i].seed.unwrap_or(self.seed.wrapping_add(i as u64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let s = serde_json::to_string(&c).unwrap();
        let back = RunConfig::from_json(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"encoder": {"layers": 2, "oops": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"stages": [{"kind": "slu_adapt", "lamda": 0.5}]}"#).is_err());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 3, "stages": [{"kind": "asr_finetune_kt", "epochs": 2}]}"#).unwrap();
        assert_eq!(c.stages[0].lambda, 0.5);
        assert_eq!(c.stages[0].alpha, 1.0);
        assert_eq!(c.stages[0].tau, 0.07);
        assert_eq!(c.stage_seed(0), 3);
        assert!(RunConfig::from_json(r#"{"stages": [{"kind": "slu_adapt", "lambda": 1.5}]}"#).is_err());
    }
}
