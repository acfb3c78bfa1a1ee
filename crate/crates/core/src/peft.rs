//! Adapter and LoRA parameter groups.
//!
//! Weight layouts are fixed:
//!
//! | tensor              | shape                  |
//! |---------------------|------------------------|
//! | adapter down weight | bottleneck x d_model   |
//! | adapter up weight   | d_model x bottleneck   |
//! | LoRA A (down)       | rank x d_model         |
//! | LoRA B (up)         | d_model x rank         |
//!
//! Transposed inputs are rejected rather than fixed up.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{DType, TensorContainer};
use crate::error::{ContainerError, Error, Result};
use crate::lsa::AssignmentSolution;
use crate::tensor::Matrix;

pub const DEFAULT_BOTTLENECK: usize = 96;
pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_LORA_SCALING: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKind {
    Adapter,
    Lora,
}

impl PeftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PeftKind::Adapter => "adapter",
            PeftKind::Lora => "lora",
        }
    }
}

impl fmt::Display for PeftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeftKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adapter" => Ok(PeftKind::Adapter),
            "lora" => Ok(PeftKind::Lora),
            other => Err(format!("unknown PEFT kind {other:?} (expected adapter or lora)")),
        }
    }
}

fn shape_error(what: &str, got: (usize, usize), want: (usize, usize)) -> Error {
    Error::InvalidModuleSet(format!("{what} has shape {got:?}, expected {want:?}"))
}

/// Bottleneck adapter: `h + up(relu(down(h)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub down_weight: Matrix,
    pub down_bias: Vec<f64>,
    pub up_weight: Matrix,
    pub up_bias: Vec<f64>,
}

impl AdapterParams {
    /// Fresh adapter with the default bottleneck of 96.
    pub fn fresh(d_model: usize, rng: &mut impl Rng) -> Self {
        Self::with_bottleneck(d_model, DEFAULT_BOTTLENECK, rng)
    }

    /// Random down projection and an all-zero up projection, so the module starts as the identity.
    pub fn with_bottleneck(d_model: usize, bottleneck: usize, rng: &mut impl Rng) -> Self {
        Self {
            down_weight: Matrix::random_normal(bottleneck, d_model, 1.0 / (d_model as f64).sqrt(), rng),
            down_bias: vec![0.0; bottleneck],
            up_weight: Matrix::zeros(d_model, bottleneck),
            up_bias: vec![0.0; d_model],
        }
    }

    pub fn from_parts(down_weight: Matrix, down_bias: Vec<f64>, up_weight: Matrix, up_bias: Vec<f64>) -> Result<Self> {
        let p = Self { down_weight, down_bias, up_weight, up_bias };
        p.validate()?;
        Ok(p)
    }

    pub fn d_model(&self) -> usize {
        self.down_weight.cols()
    }

    pub fn bottleneck(&self) -> usize {
        self.down_weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (b, d) = self.down_weight.shape();
        if self.up_weight.shape() != (d, b) {
            return Err(shape_error("adapter up weight", self.up_weight.shape(), (d, b)));
        }
        if self.down_bias.len() != b {
            return Err(shape_error("adapter down bias", (1, self.down_bias.len()), (1, b)));
        }
        if self.up_bias.len() != d {
            return Err(shape_error("adapter up bias", (1, self.up_bias.len()), (1, d)));
        }
        Ok(())
    }

    /// Pre-activation of the bottleneck: `h · downᵀ + down_bias`.
    pub fn bottleneck_preactivation(&self, h: &Matrix) -> Result<Matrix> {
        h.matmul_t(&self.down_weight)?.add_row_vector(&self.down_bias)
    }

    fn gather(&self, index: &[usize]) -> Result<Self> {
        Ok(Self {
            down_weight: self.down_weight.gather_cols(index)?,
            down_bias: self.down_bias.clone(),
            up_weight: self.up_weight.gather_rows(index)?,
            up_bias: index.iter().map(|&j| self.up_bias[j]).collect(),
        })
    }
}

/// Low-rank update `scaling · h · Aᵀ · Bᵀ` added next to a frozen projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams {
    pub a_weight: Matrix,
    pub b_weight: Matrix,
    pub scaling: f64,
}

impl LoraParams {
    /// Fresh factors with the default rank of 8.
    pub fn fresh(d_model: usize, rng: &mut impl Rng) -> Self {
        Self::with_rank(d_model, DEFAULT_RANK, DEFAULT_LORA_SCALING, rng)
    }

    /// Random `A`, zero `B`: the delta starts at exactly zero.
    pub fn with_rank(d_model: usize, rank: usize, scaling: f64, rng: &mut impl Rng) -> Self {
        Self {
            a_weight: Matrix::random_normal(rank, d_model, 1.0 / (d_model as f64).sqrt(), rng),
            b_weight: Matrix::zeros(d_model, rank),
            scaling,
        }
    }

    pub fn from_parts(a_weight: Matrix, b_weight: Matrix, scaling: f64) -> Result<Self> {
        let p = Self { a_weight, b_weight, scaling };
        p.validate()?;
        Ok(p)
    }

    pub fn d_model(&self) -> usize {
        self.a_weight.cols()
    }

    pub fn rank(&self) -> usize {
        self.a_weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (r, d) = self.a_weight.shape();
        if self.b_weight.shape() != (d, r) {
            return Err(shape_error("LoRA B", self.b_weight.shape(), (d, r)));
        }
        if !self.scaling.is_finite() {
            return Err(Error::NonFinite("LoRA scaling"));
        }
        Ok(())
    }

    fn gather(&self, index: &[usize]) -> Result<Self> {
        Ok(Self {
            a_weight: self.a_weight.gather_cols(index)?,
            b_weight: self.b_weight.gather_rows(index)?,
            scaling: self.scaling,
        })
    }
}

/// Residual bottleneck adapter forward pass with ReLU.
pub fn adapter_forward(p: &AdapterParams, h: &Matrix) -> Result<Matrix> {
    if h.cols() != p.d_model() {
        return Err(Error::DimensionMismatch {
            op: "adapter_forward",
            left: h.shape(),
            right: p.down_weight.shape(),
        });
    }
    let hidden = p.bottleneck_preactivation(h)?.map(|v| v.max(0.0));
    let mut out = hidden.matmul_t(&p.up_weight)?.add_row_vector(&p.up_bias)?;
    out.add_assign(h)?;
    Ok(out)
}

/// The LoRA contribution for inputs `h` (rows are tokens).
pub fn lora_delta(p: &LoraParams, h: &Matrix) -> Result<Matrix> {
    if h.cols() != p.d_model() {
        return Err(Error::DimensionMismatch { op: "lora_delta", left: h.shape(), right: p.a_weight.shape() });
    }
    Ok(h.matmul_t(&p.a_weight)?.matmul_t(&p.b_weight)?.scale(p.scaling))
}

/// Modules attached to one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerModules {
    Adapter(AdapterParams),
    /// LoRA on the attention query and value projections.
    Lora { query: LoraParams, value: LoraParams },
}

impl LayerModules {
    pub fn kind(&self) -> PeftKind {
        match self {
            LayerModules::Adapter(_) => PeftKind::Adapter,
            LayerModules::Lora { .. } => PeftKind::Lora,
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            LayerModules::Adapter(a) => a.d_model(),
            LayerModules::Lora { query, .. } => query.d_model(),
        }
    }

    /// Bottleneck size for adapters, rank for LoRA.
    pub fn inner_dim(&self) -> usize {
        match self {
            LayerModules::Adapter(a) => a.bottleneck(),
            LayerModules::Lora { query, .. } => query.rank(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LayerModules::Adapter(a) => a.validate(),
            LayerModules::Lora { query, value } => {
                query.validate()?;
                value.validate()?;
                if query.a_weight.shape() != value.a_weight.shape() {
                    return Err(Error::InvalidModuleSet("query and value LoRA shapes differ".into()));
                }
                if query.scaling != value.scaling {
                    return Err(Error::InvalidModuleSet("query and value LoRA scaling differ".into()));
                }
                Ok(())
            }
        }
    }

    fn gather(&self, index: &[usize]) -> Result<Self> {
        Ok(match self {
            LayerModules::Adapter(a) => LayerModules::Adapter(a.gather(index)?),
            LayerModules::Lora { query, value } => LayerModules::Lora {
                query: query.gather(index)?,
                value: value.gather(index)?,
            },
        })
    }

    /// Every parameter tensor with its container name for layer `l`, in a fixed order.
    pub fn named_params(&self, l: usize) -> Vec<(String, &[f64])> {
        match self {
            LayerModules::Adapter(a) => vec![
                (format!("layer_{l}/adapter/down.weight"), a.down_weight.data()),
                (format!("layer_{l}/adapter/down.bias"), &a.down_bias[..]),
                (format!("layer_{l}/adapter/up.weight"), a.up_weight.data()),
                (format!("layer_{l}/adapter/up.bias"), &a.up_bias[..]),
            ],
            LayerModules::Lora { query, value } => vec![
                (format!("layer_{l}/attn/query/lora_A"), query.a_weight.data()),
                (format!("layer_{l}/attn/query/lora_B"), query.b_weight.data()),
                (format!("layer_{l}/attn/value/lora_A"), value.a_weight.data()),
                (format!("layer_{l}/attn/value/lora_B"), value.b_weight.data()),
            ],
        }
    }

    /// Mutable counterpart of [`LayerModules::named_params`].
    pub fn named_params_mut(&mut self, l: usize) -> Vec<(String, &mut [f64])> {
        match self {
            LayerModules::Adapter(a) => vec![
                (format!("layer_{l}/adapter/down.weight"), a.down_weight.data_mut()),
                (format!("layer_{l}/adapter/down.bias"), &mut a.down_bias[..]),
                (format!("layer_{l}/adapter/up.weight"), a.up_weight.data_mut()),
                (format!("layer_{l}/adapter/up.bias"), &mut a.up_bias[..]),
            ],
            LayerModules::Lora { query, value } => vec![
                (format!("layer_{l}/attn/query/lora_A"), query.a_weight.data_mut()),
                (format!("layer_{l}/attn/query/lora_B"), query.b_weight.data_mut()),
                (format!("layer_{l}/attn/value/lora_A"), value.a_weight.data_mut()),
                (format!("layer_{l}/attn/value/lora_B"), value.b_weight.data_mut()),
            ],
        }
    }

    /// Same structure with every value zeroed (used as a gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, p) in z.named_params_mut(0) {
            p.fill(0.0);
        }
        z
    }
}

/// Per-layer PEFT modules of one model. All layers share kind, width and inner size.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftModuleSet {
    kind: PeftKind,
    d_model: usize,
    layers: Vec<LayerModules>,
}

impl PeftModuleSet {
    pub fn new(layers: Vec<LayerModules>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::InvalidModuleSet("no layers".into()))?;
        let (kind, d_model, inner) = (first.kind(), first.d_model(), first.inner_dim());
        for (l, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if layer.kind() != kind || layer.d_model() != d_model || layer.inner_dim() != inner {
                return Err(Error::InvalidModuleSet(format!(
                    "layer {l} is {} with width {} and inner size {}, layer 0 is {kind} with width {d_model} and inner size {inner}",
                    layer.kind(),
                    layer.d_model(),
                    layer.inner_dim()
                )));
            }
        }
        Ok(Self { kind, d_model, layers })
    }

    /// Fresh adapters on every layer.
    pub fn fresh_adapters(num_layers: usize, d_model: usize, bottleneck: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new((0..num_layers).map(|_| LayerModules::Adapter(AdapterParams::with_bottleneck(d_model, bottleneck, rng))).collect())
    }

    /// Fresh query/value LoRA pairs on every layer.
    pub fn fresh_lora(num_layers: usize, d_model: usize, rank: usize, scaling: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::new(
            (0..num_layers)
                .map(|_| LayerModules::Lora {
                    query: LoraParams::with_rank(d_model, rank, scaling, rng),
                    value: LoraParams::with_rank(d_model, rank, scaling, rng),
                })
                .collect(),
        )
    }

    pub fn kind(&self) -> PeftKind {
        self.kind
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn inner_dim(&self) -> usize {
        self.layers[0].inner_dim()
    }

    pub fn layers(&self) -> &[LayerModules] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerModules {
        &self.layers[l]
    }

    /// Mutable access for in-place updates. Shapes must not change.
    pub fn layers_mut(&mut self) -> &mut [LayerModules] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<LayerModules> {
        self.layers
    }

    pub fn lora_scaling(&self) -> Option<f64> {
        match &self.layers[0] {
            LayerModules::Lora { query, .. } => Some(query.scaling),
            LayerModules::Adapter(_) => None,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &[f64])> {
        self.layers.iter().enumerate().flat_map(|(l, m)| m.named_params(l)).collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.layers.iter_mut().enumerate().flat_map(|(l, m)| m.named_params_mut(l)).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self { kind: self.kind, d_model: self.d_model, layers: self.layers.iter().map(LayerModules::zeros_like).collect() }
    }

    /// Serializes with the standard tensor names and metadata.
    pub fn to_container(&self, dtype: DType) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        self.write_into(&mut c, dtype)?;
        Ok(c)
    }

    /// Adds this set's tensors and metadata to an existing container.
    pub fn write_into(&self, c: &mut TensorContainer, dtype: DType) -> Result<()> {
        c.set_meta("kind", self.kind);
        c.set_meta("d_model", self.d_model);
        c.set_meta("num_layers", self.num_layers());
        match self.kind {
            PeftKind::Adapter => c.set_meta("bottleneck", self.inner_dim()),
            PeftKind::Lora => {
                c.set_meta("rank", self.inner_dim());
                c.set_meta("scaling", self.lora_scaling().unwrap_or(DEFAULT_LORA_SCALING));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerModules::Adapter(a) => {
                    c.insert_matrix(format!("layer_{l}/adapter/down.weight"), &a.down_weight, dtype)?;
                    c.insert_vector(format!("layer_{l}/adapter/down.bias"), &a.down_bias, dtype)?;
                    c.insert_matrix(format!("layer_{l}/adapter/up.weight"), &a.up_weight, dtype)?;
                    c.insert_vector(format!("layer_{l}/adapter/up.bias"), &a.up_bias, dtype)?;
                }
                LayerModules::Lora { query, value } => {
                    for (site, p) in [("query", query), ("value", value)] {
                        c.insert_matrix(format!("layer_{l}/attn/{site}/lora_A"), &p.a_weight, dtype)?;
                        c.insert_matrix(format!("layer_{l}/attn/{site}/lora_B"), &p.b_weight, dtype)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads a module set. Tensors other than the module tensors are ignored.
    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let kind: PeftKind = {
            let raw = c.require_meta("kind")?;
            raw.parse()
                .map_err(|_| ContainerError::InvalidMeta { key: "kind".into(), value: raw.to_owned() })?
        };
        let d_model: usize = c.parse_meta("d_model")?;
        let num_layers: usize = c.parse_meta("num_layers")?;
        if num_layers == 0 {
            return Err(ContainerError::InvalidMeta { key: "num_layers".into(), value: "0".into() }.into());
        }
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let layer = match kind {
                PeftKind::Adapter => LayerModules::Adapter(AdapterParams::from_parts(
                    c.matrix(&format!("layer_{l}/adapter/down.weight"))?,
                    c.vector(&format!("layer_{l}/adapter/down.bias"))?,
                    c.matrix(&format!("layer_{l}/adapter/up.weight"))?,
                    c.vector(&format!("layer_{l}/adapter/up.bias"))?,
                )?),
                PeftKind::Lora => {
                    let scaling: f64 = c.parse_meta("scaling")?;
                    let read = |site: &str| -> Result<LoraParams> {
                        LoraParams::from_parts(
                            c.matrix(&format!("layer_{l}/attn/{site}/lora_A"))?,
                            c.matrix(&format!("layer_{l}/attn/{site}/lora_B"))?,
                            scaling,
                        )
                    };
                    LayerModules::Lora { query: read("query")?, value: read("value")? }
                }
            };
            layers.push(layer);
        }
        let set = Self::new(layers)?;
        if set.d_model != d_model {
            return Err(Error::InvalidModuleSet(format!(
                "metadata says d_model {d_model}, tensors have width {}",
                set.d_model
            )));
        }
        let inner_key = match kind {
            PeftKind::Adapter => "bottleneck",
            PeftKind::Lora => "rank",
        };
        if let Some(raw) = c.get_meta(inner_key) {
            if raw.parse::<usize>().ok() != Some(set.inner_dim()) {
                return Err(Error::InvalidModuleSet(format!(
                    "metadata says {inner_key} {raw}, tensors have {}",
                    set.inner_dim()
                )));
            }
        }
        Ok(set)
    }
}

/// Prunes and reorders every layer's modules into the student's hidden space.
///
/// For layer `l` with map `π = maps[l]`, student dimension `i` takes teacher
/// dimension `π(i)`: adapter down-weight columns, up-weight rows and up-bias
/// entries are gathered, as are LoRA `A` columns and `B` rows. Bottleneck and
/// rank dimensions are untouched.
pub fn apply_alignment(set: &PeftModuleSet, maps: &[AssignmentSolution], d_student: usize) -> Result<PeftModuleSet> {
    if maps.len() != set.num_layers() {
        return Err(Error::LayerCountMismatch { expected: set.num_layers(), got: maps.len() });
    }
    let mut layers = Vec::with_capacity(maps.len());
    for (layer, map) in set.layers.iter().zip(maps) {
        if map.len() != d_student {
            return Err(Error::MapLengthMismatch { expected: d_student, got: map.len() });
        }
        if let Some(&bad) = map.mapping().iter().find(|&&j| j >= set.d_model) {
            return Err(Error::IndexOutOfRange { index: bad, bound: set.d_model });
        }
        layers.push(layer.gather(map.mapping())?);
    }
    PeftModuleSet::new(layers)
}
