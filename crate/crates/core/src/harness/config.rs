use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SynthConfig;
use crate::decoding::DEFAULT_BEAM;
use crate::error::{Error, Result};
use crate::kd::KdConfig;
use crate::nnet::ModelConfig;

/// How a student is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Transducer loss on ground-truth transcriptions only.
    Baseline,
    /// Transducer loss on ground truth plus teacher pseudo-transcriptions.
    PseudoOnly,
    /// Interpolated loss, random initialisation.
    St1,
    /// Interpolated loss, initialised from a transcription-trained model.
    St2,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::PseudoOnly => "pseudo",
            Strategy::St1 => "st1",
            Strategy::St2 => "st2",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "pseudo" | "pseudo_only" => Ok(Strategy::PseudoOnly),
            "st1" => Ok(Strategy::St1),
            "st2" => Ok(Strategy::St2),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// SGD schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.2,
            batch_size: 8,
            clip: 5.0,
            lr_decay: 0.94,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and > 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.clip >= 0.0) {
            return Err(Error::Config(format!("clip must be >= 0, got {}", self.clip)));
        }
        Ok(())
    }
}

/// Everything a command or experiment run needs, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Dataset directory; generated from `synth` when absent.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Overrides the default teacher/student shapes.
    pub teacher_model: Option<ModelConfig>,
    pub student_model: Option<ModelConfig>,
    pub teacher_schedule: TrainSchedule,
    pub student_schedule: TrainSchedule,
    /// Schedule for the fine-tuning stage of ST2.
    pub finetune_schedule: TrainSchedule,
    pub kd: KdConfig,
    pub strategy: Strategy,
    pub streaming: bool,
    /// Add unlabelled utterances with teacher targets.
    pub use_unlabelled: bool,
    /// Apply the transducer loss against pseudo-transcriptions of unlabelled data.
    pub pseudo_nll: bool,
    pub init_checkpoint: Option<PathBuf>,
    /// Beam width for pseudo-transcription.
    pub beam: usize,
    /// Beam width for reported dev/test WER.
    pub eval_beam: usize,
    pub lm_order: usize,
    pub lm_alpha: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            synth: SynthConfig::default(),
            teacher_model: None,
            student_model: None,
            teacher_schedule: TrainSchedule::default(),
            student_schedule: TrainSchedule::default(),
            finetune_schedule: TrainSchedule {
                epochs: 15,
                lr: 0.02,
                ..TrainSchedule::default()
            },
            kd: KdConfig::default(),
            strategy: Strategy::St2,
            streaming: false,
            use_unlabelled: false,
            pseudo_nll: true,
            init_checkpoint: None,
            beam: DEFAULT_BEAM,
            eval_beam: DEFAULT_BEAM,
            lm_order: 2,
            lm_alpha: 1.0,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn teacher_config(&self) -> ModelConfig {
        self.teacher_model
            .clone()
            .unwrap_or_else(|| ModelConfig::teacher(self.synth.feature_dim, self.synth.vocab))
    }

    pub fn student_config(&self) -> ModelConfig {
        self.student_model
            .clone()
            .unwrap_or_else(|| ModelConfig::student(self.synth.feature_dim, self.synth.vocab, self.streaming))
    }

    /// Resolves strategy-implied settings and checks them against the
    /// student training inputs.
    pub fn normalized(mut self) -> Result<Self> {
        if self.strategy == Strategy::PseudoOnly {
            self.kd.lambda = 0.0;
        }
        self.validate()?;
        if self.strategy == Strategy::St2 && self.init_checkpoint.is_none() {
            return Err(Error::Config("st2 requires an init checkpoint".into()));
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.kd.validate()?;
        self.teacher_schedule.validate()?;
        self.student_schedule.validate()?;
        self.finetune_schedule.validate()?;
        self.teacher_config().validate()?;
        let student = self.student_config();
        student.validate()?;
        if student.streaming != self.streaming {
            return Err(Error::Config("student model streaming flag disagrees with config".into()));
        }
        if self.beam == 0 || self.eval_beam == 0 {
            return Err(Error::Config("beam widths must be >= 1".into()));
        }
        if self.lm_order == 0 || !(self.lm_alpha > 0.0) {
            return Err(Error::Config("LM order must be >= 1 and alpha > 0".into()));
        }
        Ok(())
    }
}
