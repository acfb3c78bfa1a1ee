//! Synthetic sequence classification data.
//!
//! Each example is `seq_len` tokens of dimension `input_dim`, drawn i.i.d.
//! standard normal. A fixed random ground-truth function scores every example
//! and the score is cut into `n_classes` quantile bins. Each split holds the
//! same number of examples per class (up to one).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const GROUND_TRUTH_HIDDEN: usize = 16;
const PILOT_SIZE: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Score is a linear function of the token mean.
    Linear,
    /// Score is the token mean of a random one-hidden-layer tanh network.
    Nonlinear,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Linear => "linear",
            TaskKind::Nonlinear => "nonlinear",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(TaskKind::Linear),
            "nonlinear" => Ok(TaskKind::Nonlinear),
            other => Err(Error::InvalidConfig(format!("unknown task kind {other:?} (expected linear or nonlinear)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

/// Examples stored token-major: example `i` owns rows `i * seq_len .. (i + 1) * seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    tokens: Matrix,
    labels: Vec<usize>,
    seq_len: usize,
}

impl Dataset {
    pub fn new(tokens: Matrix, labels: Vec<usize>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || tokens.rows() != labels.len() * seq_len {
            return Err(Error::DimensionMismatch {
                op: "dataset",
                left: tokens.shape(),
                right: (labels.len() * seq_len, tokens.cols()),
            });
        }
        Ok(Self { tokens, labels, seq_len })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Token rows and labels of the listed examples, in the given order.
    pub fn batch(&self, examples: &[usize]) -> (Matrix, Vec<usize>) {
        let t = self.seq_len;
        let rows: Vec<usize> = examples.iter().flat_map(|&e| e * t..(e + 1) * t).collect();
        let tokens = self.tokens.gather_rows(&rows).expect("example index in range");
        (tokens, examples.iter().map(|&e| self.labels[e]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    spec: TaskSpec,
    train: Dataset,
    val: Dataset,
}

enum GroundTruth {
    Linear(Vec<f64>),
    Nonlinear { hidden: Matrix, out: Vec<f64> },
}

impl GroundTruth {
    fn score(&self, tokens: &[f64], input_dim: usize) -> f64 {
        let n = (tokens.len() / input_dim) as f64;
        let per_token = tokens.chunks_exact(input_dim).map(|x| match self {
            GroundTruth::Linear(w) => w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(),
            GroundTruth::Nonlinear { hidden, out } => (0..hidden.rows())
                .map(|k| out[k] * hidden.row(k).iter().zip(x).map(|(a, b)| a * b).sum::<f64>().tanh())
                .sum(),
        });
        per_token.sum::<f64>() / n
    }
}

fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

impl ToyTask {
    pub fn generate(spec: TaskSpec) -> Result<Self> {
        if spec.input_dim == 0 || spec.seq_len == 0 {
            return Err(Error::InvalidConfig("task input_dim and seq_len must be positive".into()));
        }
        if spec.n_classes < 2 {
            return Err(Error::InvalidConfig("a task needs at least 2 classes".into()));
        }
        if spec.n_train < spec.n_classes || spec.n_val == 0 {
            return Err(Error::InvalidConfig("task needs n_train >= n_classes and n_val >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let truth = match spec.kind {
            TaskKind::Linear => GroundTruth::Linear(normal_vec(spec.input_dim, &mut rng)),
            TaskKind::Nonlinear => GroundTruth::Nonlinear {
                hidden: Matrix::random_normal(GROUND_TRUTH_HIDDEN, spec.input_dim, 2.0 / (spec.input_dim as f64).sqrt(), &mut rng),
                out: normal_vec(GROUND_TRUTH_HIDDEN, &mut rng),
            },
        };
        let width = spec.seq_len * spec.input_dim;
        let draw = |rng: &mut ChaCha8Rng| {
            let x = normal_vec(width, rng);
            let s = truth.score(&x, spec.input_dim);
            (x, s)
        };

        // Class boundaries are score quantiles of a pilot sample; every split
        // then keeps drawing until each class has its quota.
        let pilot_n = spec.n_train.max(PILOT_SIZE);
        let mut pilot: Vec<f64> = (0..pilot_n).map(|_| draw(&mut rng).1).collect();
        pilot.sort_by(f64::total_cmp);
        let cuts: Vec<f64> = (1..spec.n_classes).map(|k| pilot[k * pilot_n / spec.n_classes]).collect();
        let label = |s: f64| cuts.iter().filter(|&&c| s >= c).count();

        let mut split = |n: usize| -> Result<Dataset> {
            let c = spec.n_classes;
            let mut quota: Vec<usize> = (0..c).map(|k| n / c + usize::from(k < n % c)).collect();
            let mut tokens = Vec::with_capacity(n * width);
            let mut labels = Vec::with_capacity(n);
            while labels.len() < n {
                let (x, s) = draw(&mut rng);
                let y = label(s);
                if quota[y] > 0 {
                    quota[y] -= 1;
                    tokens.extend_from_slice(&x);
                    labels.push(y);
                }
            }
            Dataset::new(Matrix::new(n * spec.seq_len, spec.input_dim, tokens)?, labels, spec.seq_len)
        };
        let train = split(spec.n_train)?;
        let val = split(spec.n_val)?;
        Ok(Self { spec, train, val })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn val(&self) -> &Dataset {
        &self.val
    }
}
