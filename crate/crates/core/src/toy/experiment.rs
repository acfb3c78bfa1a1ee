//! Teacher training, module transfer and student comparison over several seeds.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{align_layer, transfer_detailed, SampleBatch, SamplePair};
use crate::error::{Error, Result};
use crate::layer_map::{plan_layers, LayerMapPlan, LayerStrategy};
use crate::parallel;
use crate::report::canonical_json;
use crate::tensor::Matrix;
use crate::toy::config::{CaptureMode, ExperimentConfig, Mode};
use crate::toy::model::{Block, Head, Peft, ToyModel};
use crate::toy::task::ToyTask;
use crate::toy::train::{train_peft, TrainOptions, TrainingLog};

const STREAM_TASK: u64 = 1;
const STREAM_TEACHER: u64 = 2;
const STREAM_STUDENT: u64 = 3;
const STREAM_TEACHER_ORDER: u64 = 4;
const STREAM_STUDENT_ORDER: u64 = 5;

/// Independent sub-seed `stream` of `seed`.
pub fn seed_for(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// The task every model of seed `seed` is trained on.
pub fn task_for(config: &ExperimentConfig, seed: u64) -> Result<ToyTask> {
    ToyTask::generate(config.task_spec(seed_for(seed, STREAM_TASK)))
}

/// Epoch count and batch order for `role`. All students of one seed share the order.
pub fn train_options_for(config: &ExperimentConfig, seed: u64, role: Role) -> TrainOptions {
    match role {
        Role::Teacher => config.train_options(config.teacher_epochs, seed_for(seed, STREAM_TEACHER_ORDER)),
        Role::Student => config.train_options(config.student_epochs, seed_for(seed, STREAM_STUDENT_ORDER)),
    }
}

/// Builds the teacher and the student base for `seed`.
///
/// In matching mode the student shares the teacher's embedding and its blocks
/// are copies of the teacher blocks selected by SKIP with the configured
/// offset. This stands in for task-agnostic distillation. In incompatible mode
/// the student is drawn independently.
pub fn build_pair(config: &ExperimentConfig, seed: u64) -> Result<(ToyModel, ToyModel)> {
    let config = config.resolved()?;
    let teacher = ToyModel::random(&config.teacher_spec(), seed_for(seed, STREAM_TEACHER))?;
    let fresh = ToyModel::random(&config.student_spec(), seed_for(seed, STREAM_STUDENT))?;
    let student = match config.mode {
        Mode::Incompatible => fresh,
        Mode::Matching => {
            let plan = plan_layers(config.teacher_layers, config.student_layers, LayerStrategy::Skip, config.skip_offset())?;
            let blocks: Vec<Block> = (0..plan.student_layers()).map(|l| teacher.blocks()[plan.representative(l)].clone()).collect();
            ToyModel::new(
                teacher.embed().clone(),
                blocks,
                fresh.head().clone(),
                fresh.peft().clone(),
                fresh.seq_len(),
                fresh.rng_seed(),
            )?
        }
    };
    Ok((teacher, student))
}

fn leading_rows(m: &Matrix, n: usize) -> Matrix {
    m.gather_rows(&(0..n).collect::<Vec<_>>()).expect("n within rows")
}

fn check_capture_inputs(teacher: &ToyModel, student: &ToyModel, inputs: &Matrix, n: usize) -> Result<Matrix> {
    if n < 2 {
        return Err(Error::TooFewRows { op: "capture_samples", needed: 2, got: n });
    }
    if teacher.input_dim() != student.input_dim() || teacher.seq_len() != student.seq_len() {
        return Err(Error::DimensionMismatch {
            op: "capture_samples",
            left: (teacher.seq_len(), teacher.input_dim()),
            right: (student.seq_len(), student.input_dim()),
        });
    }
    let t = teacher.seq_len();
    if inputs.cols() != teacher.input_dim() || !inputs.rows().is_multiple_of(t) {
        return Err(Error::DimensionMismatch { op: "capture_samples inputs", left: inputs.shape(), right: (t, teacher.input_dim()) });
    }
    if inputs.rows() < n {
        return Err(Error::TooFewRows { op: "capture_samples inputs", needed: n, got: inputs.rows() });
    }
    Ok(leading_rows(inputs, n.div_ceil(t) * t))
}

/// Records, for the first `n` token rows of `inputs`, the hidden states entering
/// each student layer's insertion point and those entering the insertion point
/// of the teacher layer the plan pairs it with.
pub fn capture_samples(
    teacher: &ToyModel,
    student: &ToyModel,
    plan: &LayerMapPlan,
    inputs: &Matrix,
    n: usize,
    peft: Peft,
) -> Result<SampleBatch> {
    if plan.teacher_layers() != teacher.depth() {
        return Err(Error::LayerCountMismatch { expected: teacher.depth(), got: plan.teacher_layers() });
    }
    if plan.student_layers() != student.depth() {
        return Err(Error::LayerCountMismatch { expected: student.depth(), got: plan.student_layers() });
    }
    let tokens = check_capture_inputs(teacher, student, inputs, n)?;
    let th = teacher.insertion_inputs(&tokens, peft)?;
    let sh = student.insertion_inputs(&tokens, peft)?;
    let pairs = sh
        .iter()
        .enumerate()
        .map(|(l, s)| SamplePair { student: leading_rows(s, n), teacher: leading_rows(&th[plan.representative(l)], n) })
        .collect();
    SampleBatch::new(plan.clone(), pairs)
}

/// The teacher head, with its input rows pruned to the student width when the
/// widths differ. The row map aligns the two models' final token states.
/// Also returns the mean selected correlation of that alignment.
pub fn transfer_head(teacher: &ToyModel, student: &ToyModel, inputs: &Matrix, n: usize, peft: Peft) -> Result<(Head, Option<f64>)> {
    if teacher.d_model() == student.d_model() {
        return Ok((teacher.head().clone(), None));
    }
    let tokens = check_capture_inputs(teacher, student, inputs, n)?;
    let xs = leading_rows(&student.final_hidden(&tokens, peft)?, n);
    let xt = leading_rows(&teacher.final_hidden(&tokens, peft)?, n);
    let map = align_layer(&xs, &xt)?;
    let head = Head { weight: teacher.head().weight.gather_rows(map.mapping())?, bias: teacher.head().bias.clone() };
    Ok((head, Some(map.total_score() / map.len() as f64)))
}

/// The student with transferred modules and head, ready for its first update.
/// Also returns the mean selected correlation per aligned layer.
pub fn transferred_student(
    config: &ExperimentConfig,
    teacher: &ToyModel,
    student: &ToyModel,
    strategy: LayerStrategy,
    inputs: &Matrix,
) -> Result<(ToyModel, Option<Vec<f64>>)> {
    let plan = plan_layers(config.teacher_layers, config.student_layers, strategy, config.skip_offset())?;
    let peft = config.capture.peft();
    let samples = if teacher.d_model() != student.d_model() {
        Some(capture_samples(teacher, student, &plan, inputs, config.num_samples, peft)?)
    } else {
        None
    };
    let outcome = transfer_detailed(teacher.peft(), &plan, samples.as_ref(), student.d_model(), 1)?;
    let (head, _) = transfer_head(teacher, student, inputs, config.num_samples, peft)?;
    let mut tm = student.clone();
    tm.set_peft(outcome.modules)?;
    tm.set_head(head)?;
    let correlations = outcome
        .alignments
        .map(|a| a.iter().map(|l| l.solution.total_score() / l.solution.len() as f64).collect());
    Ok((tm, correlations))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Training-set loss before the first update.
    pub initial_loss: f64,
    pub initial_val_accuracy: f64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub final_val_accuracy: f64,
}

impl From<&TrainingLog> for RunMetrics {
    fn from(log: &TrainingLog) -> Self {
        Self {
            initial_loss: log.initial_loss,
            initial_val_accuracy: log.initial_val_accuracy,
            final_train_loss: log.epochs.last().map_or(log.initial_loss, |e| e.train_loss),
            final_val_loss: log.final_val_loss(),
            final_val_accuracy: log.final_val_accuracy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub strategy: LayerStrategy,
    pub metrics: RunMetrics,
    /// Transferred minus baseline final validation accuracy.
    pub delta_val_accuracy: f64,
    /// Transferred minus baseline initial loss; negative favours transfer.
    pub delta_initial_loss: f64,
    /// Transferred minus teacher final validation accuracy.
    pub rel_to_teacher: f64,
    /// Mean selected correlation per student layer, when widths differ.
    pub alignment_correlation: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub teacher: RunMetrics,
    pub baseline: RunMetrics,
    /// Baseline minus teacher final validation accuracy.
    pub baseline_rel_to_teacher: f64,
    pub transferred: Vec<TransferResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: LayerStrategy,
    pub mean_val_accuracy: f64,
    pub mean_initial_loss: f64,
    pub mean_delta_val_accuracy: f64,
    pub mean_rel_to_teacher: f64,
    /// Seeds where the transferred student starts with a lower loss than the baseline.
    pub initial_loss_wins: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub teacher_mean_val_accuracy: f64,
    pub baseline_mean_val_accuracy: f64,
    pub baseline_mean_initial_loss: f64,
    pub baseline_mean_rel_to_teacher: f64,
    pub strategies: Vec<StrategySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub notes: Vec<String>,
    pub seeds: Vec<SeedResult>,
    pub summary: ExperimentSummary,
}

/// One full teacher → transfer → student comparison.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let config = config.resolved()?;
    let task = task_for(&config, seed)?;
    let (mut teacher, student) = build_pair(&config, seed)?;
    let teacher_log = train_peft(&mut teacher, &task, &train_options_for(&config, seed, Role::Teacher))?;
    let student_opts = train_options_for(&config, seed, Role::Student);

    let mut baseline = student.clone();
    let baseline_log = train_peft(&mut baseline, &task, &student_opts)?;
    let teacher_metrics = RunMetrics::from(&teacher_log);
    let baseline_metrics = RunMetrics::from(&baseline_log);

    let mut transferred = Vec::new();
    if config.transfer {
        for &strategy in &config.strategies {
            let (mut tm, alignment_correlation) =
                transferred_student(&config, &teacher, &student, strategy, task.train().tokens())?;
            let metrics = RunMetrics::from(&train_peft(&mut tm, &task, &student_opts)?);
            transferred.push(TransferResult {
                strategy,
                delta_val_accuracy: metrics.final_val_accuracy - baseline_metrics.final_val_accuracy,
                delta_initial_loss: metrics.initial_loss - baseline_metrics.initial_loss,
                rel_to_teacher: metrics.final_val_accuracy - teacher_metrics.final_val_accuracy,
                alignment_correlation,
                metrics,
            });
        }
    }
    Ok(SeedResult {
        seed,
        baseline_rel_to_teacher: baseline_metrics.final_val_accuracy - teacher_metrics.final_val_accuracy,
        teacher: teacher_metrics,
        baseline: baseline_metrics,
        transferred,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn summarize(config: &ExperimentConfig, seeds: &[SeedResult]) -> ExperimentSummary {
    let strategies = if config.transfer { config.strategies.clone() } else { Vec::new() };
    let strategies = strategies
        .iter()
        .enumerate()
        .map(|(k, &strategy)| {
            let runs = || seeds.iter().map(move |s| &s.transferred[k]);
            StrategySummary {
                strategy,
                mean_val_accuracy: mean(runs().map(|r| r.metrics.final_val_accuracy)),
                mean_initial_loss: mean(runs().map(|r| r.metrics.initial_loss)),
                mean_delta_val_accuracy: mean(runs().map(|r| r.delta_val_accuracy)),
                mean_rel_to_teacher: mean(runs().map(|r| r.rel_to_teacher)),
                initial_loss_wins: runs().filter(|r| r.delta_initial_loss < 0.0).count(),
                seeds: seeds.len(),
            }
        })
        .collect();
    ExperimentSummary {
        teacher_mean_val_accuracy: mean(seeds.iter().map(|s| s.teacher.final_val_accuracy)),
        baseline_mean_val_accuracy: mean(seeds.iter().map(|s| s.baseline.final_val_accuracy)),
        baseline_mean_initial_loss: mean(seeds.iter().map(|s| s.baseline.initial_loss)),
        baseline_mean_rel_to_teacher: mean(seeds.iter().map(|s| s.baseline_rel_to_teacher)),
        strategies,
    }
}

fn notes(config: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    match config.mode {
        Mode::Matching => out.push(format!(
            "matching student is NOT distilled: it reuses the teacher embedding and copies teacher blocks {:?} (SKIP offset {})",
            (0..config.student_layers)
                .map(|l| l * (config.teacher_layers / config.student_layers) + config.skip_offset())
                .collect::<Vec<_>>(),
            config.skip_offset()
        )),
        Mode::Incompatible => out.push(format!(
            "incompatible student is initialized independently; modules and head are pruned from width {} to {} using {} captured token rows",
            config.d_teacher(),
            config.d_student(),
            config.num_samples
        )),
    }
    out.push(format!(
        "alignment samples are captured with PEFT modules {}",
        match config.capture {
            CaptureMode::Base => "inactive (base models)",
            CaptureMode::Active => "active",
        }
    ));
    out.push("the teacher head is transferred together with the modules".into());
    out.push("rel_to_teacher = student accuracy - teacher accuracy".into());
    out
}

/// Runs `config.num_seeds` seeds starting at `config.seed`, up to `threads` at a time.
/// The report does not depend on `threads`.
pub fn run_experiment(config: &ExperimentConfig, threads: usize) -> Result<ExperimentReport> {
    let config = config.resolved()?;
    let seeds: Vec<u64> = (0..config.num_seeds as u64).map(|i| config.seed.wrapping_add(i)).collect();
    let results = parallel::map_ordered(&seeds, threads, |&s| run_seed(&config, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport { summary: summarize(&config, &results), notes: notes(&config), seeds: results, config })
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        canonical_json(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} mode, {} modules, teacher {}x{} -> student {}x{}, {} seeds",
            c.mode,
            c.peft,
            c.teacher_layers,
            c.d_teacher(),
            c.student_layers,
            c.d_student(),
            self.seeds.len()
        );
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        let _ = writeln!(out, "{:>6} {:>8} {:>9} {:>9} {:>9} {:>10}", "seed", "run", "init loss", "val acc", "delta", "rel");
        for s in &self.seeds {
            let _ = writeln!(out, "{:>6} {:>8} {:>9.4} {:>9.4} {:>9} {:>10}", s.seed, "teacher", s.teacher.initial_loss, s.teacher.final_val_accuracy, "", "");
            let _ = writeln!(
                out,
                "{:>6} {:>8} {:>9.4} {:>9.4} {:>9} {:>+10.4}",
                "", "baseline", s.baseline.initial_loss, s.baseline.final_val_accuracy, "", s.baseline_rel_to_teacher
            );
            for r in &s.transferred {
                let _ = writeln!(
                    out,
                    "{:>6} {:>8} {:>9.4} {:>9.4} {:>+9.4} {:>+10.4}",
                    "",
                    format!("tm-{}", r.strategy),
                    r.metrics.initial_loss,
                    r.metrics.final_val_accuracy,
                    r.delta_val_accuracy,
                    r.rel_to_teacher
                );
            }
        }
        let m = &self.summary;
        let _ = writeln!(out, "mean teacher val acc {:.4}, baseline {:.4} (rel {:+.4})", m.teacher_mean_val_accuracy, m.baseline_mean_val_accuracy, m.baseline_mean_rel_to_teacher);
        for s in &m.strategies {
            let _ = writeln!(
                out,
                "tm-{}: val acc {:.4}, delta {:+.4}, rel {:+.4}, lower initial loss in {}/{} seeds",
                s.strategy, s.mean_val_accuracy, s.mean_delta_val_accuracy, s.mean_rel_to_teacher, s.initial_loss_wins, s.seeds
            );
        }
        out
    }
}
