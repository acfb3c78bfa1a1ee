use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer_map::{default_skip_offset, LayerStrategy};
use crate::peft::PeftKind;
use crate::toy::model::{ModelSpec, Peft};
use crate::toy::task::{TaskKind, TaskSpec};
use crate::toy::train::TrainOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Same width; the student's blocks are copies of every `stride`-th teacher block.
    Matching,
    /// Teacher is wider and the student is initialized independently.
    Incompatible,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Matching => "matching",
            Mode::Incompatible => "incompatible",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matching" => Ok(Mode::Matching),
            "incompatible" => Ok(Mode::Incompatible),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?} (expected matching or incompatible)"))),
        }
    }
}

/// Where alignment samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureMode {
    /// Base models with every PEFT module switched off.
    Base,
    /// Models as they are, modules included.
    Active,
}

impl CaptureMode {
    pub fn peft(self) -> Peft {
        match self {
            CaptureMode::Base => Peft::Inactive,
            CaptureMode::Active => Peft::Active,
        }
    }
}

/// Every knob of a toy experiment. Missing JSON fields take the defaults;
/// unknown fields are rejected. Widths left unset follow the mode
/// (32/32 matching, 48/32 incompatible).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub peft: PeftKind,
    pub task: TaskKind,
    pub teacher_layers: usize,
    pub student_layers: usize,
    pub d_teacher: Option<usize>,
    pub d_student: Option<usize>,
    pub input_dim: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub bottleneck: usize,
    pub rank: usize,
    pub lora_scaling: f64,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub strategies: Vec<LayerStrategy>,
    /// SKIP offset; unset means the last layer of each group.
    pub skip_offset: Option<usize>,
    /// Token rows captured per layer for alignment.
    pub num_samples: usize,
    pub capture: CaptureMode,
    /// When false only the teacher and the baseline student are trained.
    pub transfer: bool,
    pub seed: u64,
    pub num_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Matching,
            peft: PeftKind::Adapter,
            task: TaskKind::Nonlinear,
            teacher_layers: 4,
            student_layers: 2,
            d_teacher: None,
            d_student: None,
            input_dim: 16,
            seq_len: 4,
            n_classes: 4,
            n_train: 4096,
            n_val: 1024,
            bottleneck: 8,
            rank: 4,
            lora_scaling: 1.0,
            teacher_epochs: 8,
            student_epochs: 2,
            lr: 0.05,
            batch_size: 64,
            strategies: vec![LayerStrategy::Skip, LayerStrategy::Avg],
            skip_offset: None,
            num_samples: 1024,
            capture: CaptureMode::Base,
            transfer: true,
            seed: 0,
            num_seeds: 10,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `mode`, widths filled in.
    pub fn for_mode(mode: Mode) -> Self {
        Self { mode, ..Self::default() }.resolved().expect("defaults are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("experiment config: {e}")))
    }

    pub fn d_teacher(&self) -> usize {
        self.d_teacher.unwrap_or(match self.mode {
            Mode::Matching => 32,
            Mode::Incompatible => 48,
        })
    }

    pub fn d_student(&self) -> usize {
        self.d_student.unwrap_or(32)
    }

    pub fn skip_offset(&self) -> usize {
        self.skip_offset.unwrap_or_else(|| default_skip_offset(self.teacher_layers, self.student_layers))
    }

    pub fn inner_dim(&self) -> usize {
        match self.peft {
            PeftKind::Adapter => self.bottleneck,
            PeftKind::Lora => self.rank,
        }
    }

    /// Validated copy with every optional field made explicit.
    pub fn resolved(&self) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let (t, s) = (self.teacher_layers, self.student_layers);
        if s == 0 || t == 0 || t % s != 0 {
            return Err(Error::NonDivisibleLayers { teacher: t, student: s });
        }
        if self.skip_offset() >= t / s {
            return Err(Error::InvalidSkipOffset { offset: self.skip_offset(), stride: t / s });
        }
        let (dt, ds) = (self.d_teacher(), self.d_student());
        if ds == 0 || ds > dt {
            return bad(format!("student width {ds} must be between 1 and the teacher width {dt}"));
        }
        if self.mode == Mode::Matching && ds != dt {
            return bad(format!("matching mode needs equal widths, got teacher {dt} and student {ds}"));
        }
        if self.input_dim == 0 || self.seq_len == 0 || self.inner_dim() == 0 {
            return bad("input_dim, seq_len and the adapter bottleneck / LoRA rank must be positive".into());
        }
        if self.n_classes < 2 || self.n_train < self.n_classes || self.n_val == 0 {
            return bad("need n_classes >= 2, n_train >= n_classes and n_val >= 1".into());
        }
        if self.batch_size == 0 || !self.lr.is_finite() || self.lr < 0.0 || !self.lora_scaling.is_finite() {
            return bad("batch_size must be positive, lr finite and non-negative, lora_scaling finite".into());
        }
        if self.num_seeds == 0 {
            return bad("num_seeds must be at least 1".into());
        }
        if self.transfer && self.strategies.is_empty() {
            return bad("transfer needs at least one layer strategy".into());
        }
        if self.num_samples < 2 || self.num_samples > self.n_train * self.seq_len {
            return bad(format!("num_samples must be between 2 and n_train * seq_len = {}", self.n_train * self.seq_len));
        }
        Ok(Self {
            d_teacher: Some(dt),
            d_student: Some(ds),
            skip_offset: Some(self.skip_offset()),
            ..self.clone()
        })
    }

    pub fn task_spec(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            input_dim: self.input_dim,
            seq_len: self.seq_len,
            n_classes: self.n_classes,
            n_train: self.n_train,
            n_val: self.n_val,
            seed,
        }
    }

    pub fn teacher_spec(&self) -> ModelSpec {
        self.model_spec(self.teacher_layers, self.d_teacher())
    }

    pub fn student_spec(&self) -> ModelSpec {
        self.model_spec(self.student_layers, self.d_student())
    }

    fn model_spec(&self, depth: usize, d_model: usize) -> ModelSpec {
        ModelSpec {
            input_dim: self.input_dim,
            d_model,
            depth,
            n_classes: self.n_classes,
            seq_len: self.seq_len,
            kind: self.peft,
            inner_dim: self.inner_dim(),
            lora_scaling: self.lora_scaling,
        }
    }

    pub fn train_options(&self, epochs: usize, order_seed: u64) -> TrainOptions {
        TrainOptions { epochs, lr: self.lr, batch_size: self.batch_size, order_seed }
    }
}
