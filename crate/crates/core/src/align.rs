//! Sample-based pruning and alignment of teacher modules into a narrower student.
//!
//! For every student layer the pipeline takes matched hidden states captured at
//! the module insertion point in both models, correlates every student dimension
//! with every teacher dimension, solves the assignment problem on the negated
//! correlations, and keeps only the mapped rows/columns of the teacher modules.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::container::{DType, TensorContainer};
use crate::error::{ContainerError, Error, Result};
use crate::layer_map::{realize_plan, LayerMapPlan};
use crate::lsa::{solve_lsa, AssignmentSolution};
use crate::parallel;
use crate::peft::{apply_alignment, PeftModuleSet};
use crate::report::canonical_json;
use crate::tensor::{column_stats, pearson_correlation_threaded, Matrix};

pub const DEFAULT_NUM_SAMPLES: usize = 1024;

/// Matched hidden states for one student layer. Row `i` of both matrices comes
/// from the same input position.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub student: Matrix,
    pub teacher: Matrix,
}

/// Per-layer matched samples plus the layer plan that paired the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    plan: LayerMapPlan,
    pairs: Vec<SamplePair>,
}

impl SampleBatch {
    pub fn new(plan: LayerMapPlan, pairs: Vec<SamplePair>) -> Result<Self> {
        if pairs.len() != plan.student_layers() {
            return Err(Error::LayerCountMismatch { expected: plan.student_layers(), got: pairs.len() });
        }
        let first = pairs.first().ok_or_else(|| Error::InvalidConfig("sample batch has no layers".into()))?;
        let (n, d_s, d_t) = (first.student.rows(), first.student.cols(), first.teacher.cols());
        if d_s > d_t {
            return Err(Error::StudentWiderThanTeacher { student: d_s, teacher: d_t });
        }
        for p in &pairs {
            if p.student.rows() != p.teacher.rows() {
                return Err(Error::RowCountMismatch { left: p.student.rows(), right: p.teacher.rows() });
            }
            if p.student.rows() != n {
                return Err(Error::RowCountMismatch { left: n, right: p.student.rows() });
            }
            if n < 2 {
                return Err(Error::TooFewRows { op: "sample batch", needed: 2, got: n });
            }
            if p.student.cols() != d_s {
                return Err(Error::DimensionMismatch { op: "sample batch (student)", left: (n, d_s), right: p.student.shape() });
            }
            if p.teacher.cols() != d_t {
                return Err(Error::DimensionMismatch { op: "sample batch (teacher)", left: (n, d_t), right: p.teacher.shape() });
            }
        }
        Ok(Self { plan, pairs })
    }

    pub fn plan(&self) -> &LayerMapPlan {
        &self.plan
    }

    pub fn pairs(&self) -> &[SamplePair] {
        &self.pairs
    }

    pub fn num_layers(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_samples(&self) -> usize {
        self.pairs[0].student.rows()
    }

    pub fn d_student(&self) -> usize {
        self.pairs[0].student.cols()
    }

    pub fn d_teacher(&self) -> usize {
        self.pairs[0].teacher.cols()
    }

    /// Tensors `layer_{l}/student` and `layer_{l}/teacher`, stored as f64.
    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.set_meta("num_layers", self.num_layers());
        c.set_meta("num_samples", self.num_samples());
        c.set_meta("plan", serde_json::to_string(&self.plan).expect("plan serializes"));
        for (l, p) in self.pairs.iter().enumerate() {
            c.insert_matrix(format!("layer_{l}/student"), &p.student, DType::F64)?;
            c.insert_matrix(format!("layer_{l}/teacher"), &p.teacher, DType::F64)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let num_layers: usize = c.parse_meta("num_layers")?;
        let raw_plan = c.require_meta("plan")?;
        let plan: LayerMapPlan = serde_json::from_str(raw_plan)
            .map_err(|_| ContainerError::InvalidMeta { key: "plan".into(), value: raw_plan.to_owned() })?;
        let pairs = (0..num_layers)
            .map(|l| {
                Ok(SamplePair {
                    student: c.matrix(&format!("layer_{l}/student"))?,
                    teacher: c.matrix(&format!("layer_{l}/teacher"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(plan, pairs)
    }
}

/// Aligns one layer: assignment on the negated Pearson matrix.
///
/// The returned `total_score` is the sum of the selected correlations.
pub fn align_layer(xs: &Matrix, xt: &Matrix) -> Result<AssignmentSolution> {
    Ok(align_layer_detailed(xs, xt, 1)?.solution)
}

/// Outcome of aligning one layer, with the diagnostics the report needs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAlignment {
    pub solution: AssignmentSolution,
    /// `C[i][mapping[i]]` for each student dimension.
    pub selected: Vec<f64>,
    pub zero_variance_student: usize,
    pub zero_variance_teacher: usize,
}

fn align_layer_detailed(xs: &Matrix, xt: &Matrix, threads: usize) -> Result<LayerAlignment> {
    if xs.cols() > xt.cols() {
        return Err(Error::StudentWiderThanTeacher { student: xs.cols(), teacher: xt.cols() });
    }
    let corr = pearson_correlation_threaded(xs, xt, threads)?;
    let raw = solve_lsa(&corr.scale(-1.0))?;
    let selected = raw.selected(&corr);
    let total = raw.selected_sum(&corr);
    let solution = AssignmentSolution::new(raw.mapping().to_vec(), xt.cols(), total)?;
    Ok(LayerAlignment {
        solution,
        selected,
        zero_variance_student: column_stats(xs)?.zero_variance_count(),
        zero_variance_teacher: column_stats(xt)?.zero_variance_count(),
    })
}

/// Aligns every layer of `batch`, spreading layers over up to `threads` threads.
pub fn align_batch(batch: &SampleBatch, threads: usize) -> Result<Vec<LayerAlignment>> {
    // Spare threads go to the correlation inside each layer when layers are few.
    let inner = (threads / batch.num_layers().max(1)).max(1);
    parallel::map_ordered(batch.pairs(), threads, |p| align_layer_detailed(&p.student, &p.teacher, inner))
        .into_iter()
        .collect()
}

/// What a transfer produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub modules: PeftModuleSet,
    /// Present only when the hidden sizes differed.
    pub alignments: Option<Vec<LayerAlignment>>,
}

/// Moves teacher modules into a student of depth `plan.student_layers()` and width `d_student`.
///
/// Equal widths only reconcile depth. Different widths additionally prune and
/// reorder every layer using `samples`, which are then required.
pub fn transfer(
    teacher: &PeftModuleSet,
    plan: &LayerMapPlan,
    samples: Option<&SampleBatch>,
    d_student: usize,
) -> Result<PeftModuleSet> {
    Ok(transfer_detailed(teacher, plan, samples, d_student, 1)?.modules)
}

pub fn transfer_detailed(
    teacher: &PeftModuleSet,
    plan: &LayerMapPlan,
    samples: Option<&SampleBatch>,
    d_student: usize,
    threads: usize,
) -> Result<TransferOutcome> {
    if plan.teacher_layers() != teacher.num_layers() {
        return Err(Error::LayerCountMismatch { expected: teacher.num_layers(), got: plan.teacher_layers() });
    }
    let d_teacher = teacher.d_model();
    if d_student > d_teacher {
        return Err(Error::StudentWiderThanTeacher { student: d_student, teacher: d_teacher });
    }
    let selected = realize_plan(teacher, plan)?;
    if d_student == d_teacher {
        return Ok(TransferOutcome { modules: selected, alignments: None });
    }

    let samples = samples.ok_or(Error::MissingSamples { teacher: d_teacher, student: d_student })?;
    if samples.num_layers() != plan.student_layers() {
        return Err(Error::LayerCountMismatch { expected: plan.student_layers(), got: samples.num_layers() });
    }
    if samples.d_student() != d_student || samples.d_teacher() != d_teacher {
        return Err(Error::DimensionMismatch {
            op: "transfer samples",
            left: (d_student, d_teacher),
            right: (samples.d_student(), samples.d_teacher()),
        });
    }
    let same_pairing = (0..plan.student_layers()).all(|l| plan.representative(l) == samples.plan().representative(l));
    if !same_pairing {
        return Err(Error::InvalidConfig("samples were captured for a different teacher layer pairing".into()));
    }
    let alignments = align_batch(samples, threads)?;
    let maps: Vec<AssignmentSolution> = alignments.iter().map(|a| a.solution.clone()).collect();
    let modules = apply_alignment(&selected, &maps, d_student)?;
    Ok(TransferOutcome { modules, alignments: Some(alignments) })
}

/// Per-layer alignment quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub teacher_layer: usize,
    /// Mean of the selected correlations (`total_score / d_student`).
    pub mean_correlation: f64,
    pub min_correlation: f64,
    /// Fraction of student dimensions whose selected correlation exceeds 0.5.
    pub frac_above_half: f64,
    pub zero_variance_student: usize,
    pub zero_variance_teacher: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub num_samples: usize,
    pub d_student: usize,
    pub d_teacher: usize,
    pub layers: Vec<LayerSummary>,
}

impl AlignmentReport {
    pub fn from_alignments(batch: &SampleBatch, alignments: &[LayerAlignment]) -> Self {
        let layers = alignments
            .iter()
            .enumerate()
            .map(|(l, a)| {
                let d = a.selected.len() as f64;
                LayerSummary {
                    layer: l,
                    teacher_layer: batch.plan().representative(l),
                    mean_correlation: a.solution.total_score() / d,
                    min_correlation: a.selected.iter().copied().fold(f64::INFINITY, f64::min),
                    frac_above_half: a.selected.iter().filter(|&&c| c > 0.5).count() as f64 / d,
                    zero_variance_student: a.zero_variance_student,
                    zero_variance_teacher: a.zero_variance_teacher,
                }
            })
            .collect();
        Self { num_samples: batch.num_samples(), d_student: batch.d_student(), d_teacher: batch.d_teacher(), layers }
    }

    pub fn to_json(&self) -> String {
        canonical_json(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "alignment: {} samples, student width {}, teacher width {}",
            self.num_samples, self.d_student, self.d_teacher
        );
        let _ = writeln!(out, "{:>5} {:>7} {:>9} {:>9} {:>7} {:>9}", "layer", "teacher", "mean", "min", ">0.5", "dead s/t");
        for s in &self.layers {
            let _ = writeln!(
                out,
                "{:>5} {:>7} {:>9.4} {:>9.4} {:>7.3} {:>9}",
                s.layer,
                s.teacher_layer,
                s.mean_correlation,
                s.min_correlation,
                s.frac_above_half,
                format!("{}/{}", s.zero_variance_student, s.zero_variance_teacher)
            );
        }
        out
    }
}

/// Aligns every layer and summarizes the selected correlations.
pub fn alignment_report(batch: &SampleBatch) -> Result<AlignmentReport> {
    let alignments = align_batch(batch, 1)?;
    Ok(AlignmentReport::from_alignments(batch, &alignments))
}
