//! Reconciling teacher and student depth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::{AdapterParams, LayerModules, LoraParams, PeftModuleSet};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerStrategy {
    /// One teacher layer per student layer.
    Skip,
    /// Elementwise mean over a group of consecutive teacher layers.
    Avg,
}

impl LayerStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerStrategy::Skip => "skip",
            LayerStrategy::Avg => "avg",
        }
    }
}

impl fmt::Display for LayerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "skip" => Ok(LayerStrategy::Skip),
            "avg" => Ok(LayerStrategy::Avg),
            other => Err(format!("unknown layer strategy {other:?} (expected skip or avg)")),
        }
    }
}

/// Which teacher layers feed each student layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMapPlan {
    strategy: LayerStrategy,
    stride: usize,
    groups: Vec<Vec<usize>>,
}

impl LayerMapPlan {
    pub fn strategy(&self) -> LayerStrategy {
        self.strategy
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// One group of teacher layer indices per student layer.
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn student_layers(&self) -> usize {
        self.groups.len()
    }

    pub fn teacher_layers(&self) -> usize {
        self.groups.len() * self.stride
    }

    /// The teacher layer whose hidden states stand in for student layer `l`
    /// when capturing alignment samples: the SKIP selection, or the last
    /// member of an AVG group.
    pub fn representative(&self, l: usize) -> usize {
        *self.groups[l].last().expect("groups are never empty")
    }
}

/// Default SKIP offset: the last teacher layer of every group.
pub fn default_skip_offset(teacher_layers: usize, student_layers: usize) -> usize {
    if student_layers == 0 {
        return 0;
    }
    (teacher_layers / student_layers).saturating_sub(1)
}

/// Groups teacher layers into `student_layers` consecutive blocks of `stride = teacher / student`.
///
/// SKIP keeps layer `l * stride + skip_offset` of each block; AVG keeps the whole block.
/// `skip_offset` is ignored for AVG.
pub fn plan_layers(
    teacher_layers: usize,
    student_layers: usize,
    strategy: LayerStrategy,
    skip_offset: usize,
) -> Result<LayerMapPlan> {
    if student_layers == 0 || teacher_layers == 0 || !teacher_layers.is_multiple_of(student_layers) {
        return Err(Error::NonDivisibleLayers { teacher: teacher_layers, student: student_layers });
    }
    let stride = teacher_layers / student_layers;
    let groups = match strategy {
        LayerStrategy::Skip => {
            if skip_offset >= stride {
                return Err(Error::InvalidSkipOffset { offset: skip_offset, stride });
            }
            (0..student_layers).map(|l| vec![l * stride + skip_offset]).collect()
        }
        LayerStrategy::Avg => (0..student_layers).map(|l| (l * stride..(l + 1) * stride).collect()).collect(),
    };
    Ok(LayerMapPlan { strategy, stride, groups })
}

fn mean_matrix(ms: &[&Matrix]) -> Matrix {
    let n = ms.len() as f64;
    let mut out = ms[0].clone();
    for m in &ms[1..] {
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += v;
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v /= n);
    out
}

fn mean_vec(vs: &[&Vec<f64>]) -> Vec<f64> {
    let n = vs.len() as f64;
    let mut out = vs[0].clone();
    for v in &vs[1..] {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    out
}

fn average_layers(group: &[&LayerModules]) -> LayerModules {
    if let [single] = group {
        return (*single).clone();
    }
    match group[0] {
        LayerModules::Adapter(_) => {
            let adapters: Vec<&AdapterParams> = group
                .iter()
                .map(|m| match m {
                    LayerModules::Adapter(a) => a,
                    LayerModules::Lora { .. } => unreachable!("module sets are homogeneous"),
                })
                .collect();
            LayerModules::Adapter(AdapterParams {
                down_weight: mean_matrix(&adapters.iter().map(|a| &a.down_weight).collect::<Vec<_>>()),
                down_bias: mean_vec(&adapters.iter().map(|a| &a.down_bias).collect::<Vec<_>>()),
                up_weight: mean_matrix(&adapters.iter().map(|a| &a.up_weight).collect::<Vec<_>>()),
                up_bias: mean_vec(&adapters.iter().map(|a| &a.up_bias).collect::<Vec<_>>()),
            })
        }
        LayerModules::Lora { .. } => {
            let pairs: Vec<(&LoraParams, &LoraParams)> = group
                .iter()
                .map(|m| match m {
                    LayerModules::Lora { query, value } => (query, value),
                    LayerModules::Adapter(_) => unreachable!("module sets are homogeneous"),
                })
                .collect();
            // Factors are averaged independently; the mean of the products is not reproduced.
            let avg = |ps: Vec<&LoraParams>| LoraParams {
                a_weight: mean_matrix(&ps.iter().map(|p| &p.a_weight).collect::<Vec<_>>()),
                b_weight: mean_matrix(&ps.iter().map(|p| &p.b_weight).collect::<Vec<_>>()),
                scaling: ps[0].scaling,
            };
            LayerModules::Lora {
                query: avg(pairs.iter().map(|p| p.0).collect()),
                value: avg(pairs.iter().map(|p| p.1).collect()),
            }
        }
    }
}

/// Builds the student-depth module set from a teacher set according to `plan`.
///
/// Singleton groups copy the teacher layer bit-exactly; larger groups take the
/// elementwise arithmetic mean of every parameter.
pub fn realize_plan(teacher: &PeftModuleSet, plan: &LayerMapPlan) -> Result<PeftModuleSet> {
    let n = teacher.num_layers();
    let mut layers = Vec::with_capacity(plan.groups.len());
    for group in &plan.groups {
        if let Some(&bad) = group.iter().find(|&&t| t >= n) {
            return Err(Error::IndexOutOfRange { index: bad, bound: n });
        }
        let members: Vec<&LayerModules> = group.iter().map(|&t| teacher.layer(t)).collect();
        layers.push(average_layers(&members));
    }
    PeftModuleSet::new(layers)
}
