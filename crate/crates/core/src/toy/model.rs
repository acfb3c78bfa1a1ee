//! A tiny residual sequence classifier with PEFT modules attached.
//!
//! Per layer, on token rows `H`:
//!
//! ```text
//! H1 = H + softmax(Q Kᵀ / √d) V          (LoRA models only; LoRA on Q and V)
//! H2 = H1 + tanh(H1 W + b)
//! H3 = H2 + relu(H2 Dᵀ + db) Uᵀ + ub     (adapter models only)
//! ```
//!
//! The final tokens are mean-pooled per example and fed to a linear head.
//! Everything except the PEFT modules and the head is frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{DType, TensorContainer};
use crate::error::{ContainerError, Error, Result};
use crate::peft::{LayerModules, PeftKind, PeftModuleSet};
use crate::tensor::{dot, Matrix};

const HEAD_INIT_STD: f64 = 0.02;

/// Frozen single-head self-attention projections, applied as `H · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub attention: Option<Attention>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `d_model x n_classes`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn fresh(d_model: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { weight: Matrix::random_normal(d_model, n_classes, HEAD_INIT_STD, rng), bias: vec![0.0; n_classes] }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub d_model: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub seq_len: usize,
    pub kind: PeftKind,
    /// Adapter bottleneck or LoRA rank.
    pub inner_dim: usize,
    pub lora_scaling: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    embed: Matrix,
    blocks: Vec<Block>,
    head: Head,
    peft: PeftModuleSet,
    seq_len: usize,
    rng_seed: u64,
}

/// Whether PEFT modules take part in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Peft {
    Active,
    Inactive,
}

/// Gradients of the mean cross-entropy with respect to every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub peft: PeftModuleSet,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

impl Gradients {
    /// Same order as [`ToyModel::trainable_params_mut`].
    pub fn named(&self) -> Vec<(String, &[f64])> {
        let mut out = self.peft.named_params();
        out.push(("head/weight".into(), self.head_weight.data()));
        out.push(("head/bias".into(), &self.head_bias[..]));
        out
    }
}

struct AttnCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<f64>,
    /// `H Aᵀ` for the query and value LoRA factors.
    lora_inner: Option<(Matrix, Matrix)>,
}

struct LayerCache {
    input: Matrix,
    attn: Option<AttnCache>,
    mlp_out: Matrix,
    h2: Matrix,
    adapter: Option<(Matrix, Matrix)>,
}

fn check_square(m: &Matrix, d: usize, what: &str) -> Result<()> {
    if m.shape() != (d, d) {
        return Err(Error::InvalidConfig(format!("{what} must be {d}x{d}, got {}x{}", m.rows(), m.cols())));
    }
    Ok(())
}

impl ToyModel {
    pub fn new(embed: Matrix, blocks: Vec<Block>, head: Head, peft: PeftModuleSet, seq_len: usize, rng_seed: u64) -> Result<Self> {
        let d = embed.cols();
        if seq_len == 0 || blocks.is_empty() {
            return Err(Error::InvalidConfig("a toy model needs seq_len >= 1 and at least one block".into()));
        }
        if peft.d_model() != d {
            return Err(Error::DimensionMismatch { op: "toy model modules", left: (d, d), right: (peft.d_model(), peft.d_model()) });
        }
        if peft.num_layers() != blocks.len() {
            return Err(Error::LayerCountMismatch { expected: blocks.len(), got: peft.num_layers() });
        }
        for (l, b) in blocks.iter().enumerate() {
            check_square(&b.weight, d, &format!("block {l} weight"))?;
            if b.bias.len() != d {
                return Err(Error::InvalidConfig(format!("block {l} bias must have length {d}")));
            }
            match (&b.attention, peft.kind()) {
                (Some(a), PeftKind::Lora) => {
                    check_square(&a.query, d, "attention query")?;
                    check_square(&a.key, d, "attention key")?;
                    check_square(&a.value, d, "attention value")?;
                }
                (None, PeftKind::Adapter) => {}
                _ => return Err(Error::InvalidConfig("attention blocks are present exactly when LoRA modules are used".into())),
            }
        }
        if head.weight.rows() != d || head.bias.len() != head.weight.cols() || head.weight.cols() < 2 {
            return Err(Error::InvalidConfig(format!("head must be {d} x n_classes (n_classes >= 2) with matching bias")));
        }
        Ok(Self { embed, blocks, head, peft, seq_len, rng_seed })
    }

    /// Random frozen base with fresh PEFT modules and a fresh head, all drawn from `seed`.
    pub fn random(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.depth == 0 || spec.d_model == 0 || spec.input_dim == 0 || spec.inner_dim == 0 {
            return Err(Error::InvalidConfig("model depth, widths and inner size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let embed = Matrix::random_normal(spec.input_dim, d, 1.0 / (spec.input_dim as f64).sqrt(), &mut rng);
        let blocks = (0..spec.depth)
            .map(|_| {
                let attention = (spec.kind == PeftKind::Lora).then(|| Attention {
                    query: Matrix::random_normal(d, d, std, &mut rng),
                    key: Matrix::random_normal(d, d, std, &mut rng),
                    value: Matrix::random_normal(d, d, std, &mut rng),
                });
                Block {
                    weight: Matrix::random_normal(d, d, std, &mut rng),
                    bias: Matrix::random_normal(1, d, 0.1, &mut rng).into_data(),
                    attention,
                }
            })
            .collect();
        let head = Head::fresh(d, spec.n_classes, &mut rng);
        let peft = match spec.kind {
            PeftKind::Adapter => PeftModuleSet::fresh_adapters(spec.depth, d, spec.inner_dim, &mut rng)?,
            PeftKind::Lora => PeftModuleSet::fresh_lora(spec.depth, d, spec.inner_dim, spec.lora_scaling, &mut rng)?,
        };
        Self::new(embed, blocks, head, peft, spec.seq_len, seed)
    }

    pub fn embed(&self) -> &Matrix {
        &self.embed
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn peft(&self) -> &PeftModuleSet {
        &self.peft
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_model(&self) -> usize {
        self.embed.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.embed.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    /// Replaces the PEFT modules; shape, kind and depth must match the current ones.
    pub fn set_peft(&mut self, peft: PeftModuleSet) -> Result<()> {
        let same = peft.kind() == self.peft.kind()
            && peft.d_model() == self.peft.d_model()
            && peft.num_layers() == self.peft.num_layers();
        if !same {
            return Err(Error::InvalidModuleSet(format!(
                "model expects {} {} layers of width {}, got {} {} layers of width {}",
                self.peft.num_layers(),
                self.peft.kind(),
                self.peft.d_model(),
                peft.num_layers(),
                peft.kind(),
                peft.d_model()
            )));
        }
        self.peft = peft;
        Ok(())
    }

    pub fn set_head(&mut self, head: Head) -> Result<()> {
        if head.weight.shape() != self.head.weight.shape() || head.bias.len() != self.head.bias.len() {
            return Err(Error::DimensionMismatch { op: "set_head", left: self.head.weight.shape(), right: head.weight.shape() });
        }
        self.head = head;
        Ok(())
    }

    /// Every trainable tensor: PEFT modules first, then `head/weight` and `head/bias`.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.peft.named_params_mut();
        out.push(("head/weight".into(), self.head.weight.data_mut()));
        out.push(("head/bias".into(), &mut self.head.bias[..]));
        out
    }

    fn check_tokens(&self, tokens: &Matrix) -> Result<usize> {
        if tokens.cols() != self.input_dim() || tokens.rows() == 0 || !tokens.rows().is_multiple_of(self.seq_len) {
            return Err(Error::DimensionMismatch {
                op: "toy model input",
                left: tokens.shape(),
                right: (self.seq_len, self.input_dim()),
            });
        }
        Ok(tokens.rows() / self.seq_len)
    }

    fn layer_forward(&self, l: usize, h: Matrix, peft: Peft) -> Result<(Matrix, LayerCache)> {
        let block = &self.blocks[l];
        let modules = (peft == Peft::Active).then(|| self.peft.layer(l));
        let (h1, attn) = match &block.attention {
            Some(a) => {
                let mut q = h.matmul(&a.query)?;
                let k = h.matmul(&a.key)?;
                let mut v = h.matmul(&a.value)?;
                let lora_inner = match modules {
                    Some(LayerModules::Lora { query, value }) => {
                        let gq = h.matmul_t(&query.a_weight)?;
                        let gv = h.matmul_t(&value.a_weight)?;
                        q.add_assign(&gq.matmul_t(&query.b_weight)?.scale(query.scaling))?;
                        v.add_assign(&gv.matmul_t(&value.b_weight)?.scale(value.scaling))?;
                        Some((gq, gv))
                    }
                    _ => None,
                };
                let (o, probs) = attention_forward(&q, &k, &v, self.seq_len);
                (h.add(&o)?, Some(AttnCache { q, k, v, probs, lora_inner }))
            }
            None => (h.clone(), None),
        };
        let mlp_out = h1.matmul(&block.weight)?.add_row_vector(&block.bias)?.map(f64::tanh);
        let h2 = h1.add(&mlp_out)?;
        let (out, adapter) = match modules {
            Some(LayerModules::Adapter(p)) => {
                let pre = p.bottleneck_preactivation(&h2)?;
                let act = pre.map(|v| v.max(0.0));
                let mut out = act.matmul_t(&p.up_weight)?.add_row_vector(&p.up_bias)?;
                out.add_assign(&h2)?;
                (out, Some((pre, act)))
            }
            _ => (h2.clone(), None),
        };
        Ok((out, LayerCache { input: h, attn, mlp_out, h2, adapter }))
    }

    fn run(&self, tokens: &Matrix, peft: Peft, keep: bool) -> Result<(Matrix, Vec<LayerCache>)> {
        self.check_tokens(tokens)?;
        let mut h = tokens.matmul(&self.embed)?;
        let mut caches = Vec::new();
        for l in 0..self.depth() {
            let (next, cache) = self.layer_forward(l, h, peft)?;
            if keep {
                caches.push(cache);
            }
            h = next;
        }
        Ok((h, caches))
    }

    fn pool(&self, h: &Matrix) -> Matrix {
        let t = self.seq_len;
        let n = h.rows() / t;
        let mut pooled = Matrix::zeros(n, h.cols());
        for r in 0..h.rows() {
            for (p, v) in pooled.row_mut(r / t).iter_mut().zip(h.row(r)) {
                *p += v / t as f64;
            }
        }
        pooled
    }

    fn logits_from_hidden(&self, h: &Matrix) -> Result<Matrix> {
        self.pool(h).matmul(&self.head.weight)?.add_row_vector(&self.head.bias)
    }

    /// Class logits, one row per example.
    pub fn logits(&self, tokens: &Matrix) -> Result<Matrix> {
        let (h, _) = self.run(tokens, Peft::Active, false)?;
        self.logits_from_hidden(&h)
    }

    /// The hidden states entering each layer's PEFT insertion point: the
    /// attention input for LoRA models, the block output for adapter models.
    pub fn insertion_inputs(&self, tokens: &Matrix, peft: Peft) -> Result<Vec<Matrix>> {
        let (_, caches) = self.run(tokens, peft, true)?;
        Ok(caches
            .into_iter()
            .map(|c| match self.peft.kind() {
                PeftKind::Lora => c.input,
                PeftKind::Adapter => c.h2,
            })
            .collect())
    }

    /// Token states after the last layer, the input of the pooled head.
    pub fn final_hidden(&self, tokens: &Matrix, peft: Peft) -> Result<Matrix> {
        Ok(self.run(tokens, peft, false)?.0)
    }

    /// Mean cross-entropy and accuracy.
    pub fn evaluate(&self, tokens: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
        let logits = self.logits(tokens)?;
        self.check_labels(&logits, labels)?;
        let (loss, _) = cross_entropy(&logits, labels);
        let correct = (0..logits.rows()).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
        Ok((loss, correct as f64 / labels.len() as f64))
    }

    fn check_labels(&self, logits: &Matrix, labels: &[usize]) -> Result<()> {
        if labels.len() != logits.rows() {
            return Err(Error::RowCountMismatch { left: logits.rows(), right: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.n_classes()) {
            return Err(Error::IndexOutOfRange { index: bad, bound: self.n_classes() });
        }
        Ok(())
    }

    pub fn loss(&self, tokens: &Matrix, labels: &[usize]) -> Result<f64> {
        Ok(self.evaluate(tokens, labels)?.0)
    }

    /// Mean cross-entropy and its exact gradient with respect to every trainable tensor.
    pub fn loss_and_gradients(&self, tokens: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (h_final, caches) = self.run(tokens, Peft::Active, true)?;
        let pooled = self.pool(&h_final);
        let logits = pooled.matmul(&self.head.weight)?.add_row_vector(&self.head.bias)?;
        self.check_labels(&logits, labels)?;
        let (loss, dlogits) = cross_entropy(&logits, labels);

        let head_weight = pooled.t_matmul(&dlogits)?;
        let head_bias = dlogits.column_sums();
        let dpooled = dlogits.matmul_t(&self.head.weight)?;
        let t = self.seq_len;
        let mut dh = Matrix::from_fn(h_final.rows(), h_final.cols(), |r, j| dpooled.get(r / t, j) / t as f64);

        let mut grads = self.peft.zeros_like();
        for (l, cache) in caches.iter().enumerate().rev() {
            dh = self.layer_backward(l, cache, dh, &mut grads.layers_mut()[l])?;
        }
        Ok((loss, Gradients { peft: grads, head_weight, head_bias }))
    }

    /// Backpropagates `dout` through layer `l`, writing module gradients into `g`.
    fn layer_backward(&self, l: usize, c: &LayerCache, dout: Matrix, g: &mut LayerModules) -> Result<Matrix> {
        let block = &self.blocks[l];
        let mut dh2 = dout.clone();
        if let (LayerModules::Adapter(p), Some((pre, act)), LayerModules::Adapter(gp)) = (self.peft.layer(l), &c.adapter, &mut *g) {
            gp.up_weight = dout.t_matmul(act)?;
            gp.up_bias = dout.column_sums();
            let mut da = dout.matmul(&p.up_weight)?;
            for (d, &a) in da.data_mut().iter_mut().zip(pre.data()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            gp.down_weight = da.t_matmul(&c.h2)?;
            gp.down_bias = da.column_sums();
            dh2.add_assign(&da.matmul(&p.down_weight)?)?;
        }

        let mut dz = dh2.clone();
        for (d, &m) in dz.data_mut().iter_mut().zip(c.mlp_out.data()) {
            *d *= 1.0 - m * m;
        }
        let mut dh1 = dh2;
        dh1.add_assign(&dz.matmul_t(&block.weight)?)?;

        let (Some(a), Some(ac)) = (&block.attention, &c.attn) else {
            return Ok(dh1);
        };
        let (dq, dk, dv) = attention_backward(ac, &dh1, self.seq_len);
        let mut dh = dh1;
        dh.add_assign(&dq.matmul_t(&a.query)?)?;
        dh.add_assign(&dk.matmul_t(&a.key)?)?;
        dh.add_assign(&dv.matmul_t(&a.value)?)?;
        if let (LayerModules::Lora { query, value }, Some((gq, gv)), LayerModules::Lora { query: dq_p, value: dv_p }) =
            (self.peft.layer(l), &ac.lora_inner, &mut *g)
        {
            for (p, inner, dproj, out) in [(query, gq, &dq, dq_p), (value, gv, &dv, dv_p)] {
                out.b_weight = dproj.t_matmul(inner)?.scale(p.scaling);
                let dinner = dproj.matmul(&p.b_weight)?.scale(p.scaling);
                out.a_weight = dinner.t_matmul(&c.input)?;
                dh.add_assign(&dinner.matmul(&p.a_weight)?)?;
            }
        }
        Ok(dh)
    }

    /// Stores the whole model as f64 tensors alongside its PEFT modules.
    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        self.peft.write_into(&mut c, DType::F64)?;
        c.set_meta("model", "toy");
        c.set_meta("seq_len", self.seq_len);
        c.set_meta("input_dim", self.input_dim());
        c.set_meta("n_classes", self.n_classes());
        c.set_meta("rng_seed", self.rng_seed);
        c.insert_matrix("embed", &self.embed, DType::F64)?;
        for (l, b) in self.blocks.iter().enumerate() {
            c.insert_matrix(format!("layer_{l}/block/weight"), &b.weight, DType::F64)?;
            c.insert_vector(format!("layer_{l}/block/bias"), &b.bias, DType::F64)?;
            if let Some(a) = &b.attention {
                for (site, m) in [("query", &a.query), ("key", &a.key), ("value", &a.value)] {
                    c.insert_matrix(format!("layer_{l}/attn/{site}/weight"), m, DType::F64)?;
                }
            }
        }
        c.insert_matrix("head/weight", &self.head.weight, DType::F64)?;
        c.insert_vector("head/bias", &self.head.bias, DType::F64)?;
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        if c.get_meta("model") != Some("toy") {
            return Err(ContainerError::MissingMeta("model".into()).into());
        }
        let peft = PeftModuleSet::from_container(c)?;
        let blocks = (0..peft.num_layers())
            .map(|l| {
                let attention = if c.contains(&format!("layer_{l}/attn/query/weight")) {
                    Some(Attention {
                        query: c.matrix(&format!("layer_{l}/attn/query/weight"))?,
                        key: c.matrix(&format!("layer_{l}/attn/key/weight"))?,
                        value: c.matrix(&format!("layer_{l}/attn/value/weight"))?,
                    })
                } else {
                    None
                };
                Ok(Block {
                    weight: c.matrix(&format!("layer_{l}/block/weight"))?,
                    bias: c.vector(&format!("layer_{l}/block/bias"))?,
                    attention,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Head { weight: c.matrix("head/weight")?, bias: c.vector("head/bias")? };
        Self::new(c.matrix("embed")?, blocks, head, peft, c.parse_meta("seq_len")?, c.parse_meta("rng_seed")?)
    }
}

/// Attention within each run of `t` consecutive rows. Returns the output and
/// the row-wise attention weights (`rows x t`).
fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, t: usize) -> (Matrix, Vec<f64>) {
    let (n, d) = q.shape();
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; n * t];
    let mut out = Matrix::zeros(n, d);
    for r in 0..n {
        let base = r / t * t;
        let p = &mut probs[r * t..(r + 1) * t];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(q.row(r), k.row(base + j)) * scale;
        }
        softmax_in_place(p);
        let o = out.row_mut(r);
        for (j, &w) in p.iter().enumerate() {
            for (oi, vi) in o.iter_mut().zip(v.row(base + j)) {
                *oi += w * vi;
            }
        }
    }
    (out, probs)
}

fn attention_backward(c: &AttnCache, dout: &Matrix, t: usize) -> (Matrix, Matrix, Matrix) {
    let (n, d) = c.q.shape();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut ds = vec![0.0; t];
    for r in 0..n {
        let base = r / t * t;
        let p = &c.probs[r * t..(r + 1) * t];
        let g = dout.row(r);
        for j in 0..t {
            ds[j] = dot(g, c.v.row(base + j));
            for (dvi, gi) in dv.row_mut(base + j).iter_mut().zip(g) {
                *dvi += p[j] * gi;
            }
        }
        let mean: f64 = ds.iter().zip(p).map(|(a, b)| a * b).sum();
        for j in 0..t {
            let s = p[j] * (ds[j] - mean) * scale;
            for (dqi, ki) in dq.row_mut(r).iter_mut().zip(c.k.row(base + j)) {
                *dqi += s * ki;
            }
            for (dki, qi) in dk.row_mut(base + j).iter_mut().zip(c.q.row(r)) {
                *dki += s * qi;
            }
        }
    }
    (dq, dk, dv)
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    x.iter_mut().for_each(|v| *v /= sum);
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_z - row[y];
        for v in row.iter_mut() {
            *v = (*v - log_z).exp() / n;
        }
        row[y] -= 1.0 / n;
    }
    (loss / n, grad)
}

/// Overwrites every trainable value with N(0, std²) noise so no gradient path is zero.
#[cfg(test)]
pub(crate) fn randomize_peft(model: &mut ToyModel, seed: u64, std: f64) {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for (_, p) in model.trainable_params_mut() {
        p.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::task::{TaskKind, TaskSpec, ToyTask};

    fn spec(kind: PeftKind) -> ModelSpec {
        ModelSpec { input_dim: 5, d_model: 6, depth: 2, n_classes: 3, seq_len: 3, kind, inner_dim: 4, lora_scaling: 0.5 }
    }

    fn task() -> ToyTask {
        ToyTask::generate(TaskSpec { kind: TaskKind::Nonlinear, input_dim: 5, seq_len: 3, n_classes: 3, n_train: 30, n_val: 9, seed: 1 })
            .unwrap()
    }

    #[test]
    fn same_seed_same_model_and_output() {
        for kind in [PeftKind::Adapter, PeftKind::Lora] {
            let a = ToyModel::random(&spec(kind), 4).unwrap();
            assert_eq!(a, ToyModel::random(&spec(kind), 4).unwrap());
            assert_eq!(a.blocks()[0].attention.is_some(), kind == PeftKind::Lora);
            let t = task();
            assert_eq!(a.logits(t.val().tokens()).unwrap(), a.logits(t.val().tokens()).unwrap());
        }
    }

    #[test]
    fn fresh_modules_do_not_change_the_base_output() {
        for kind in [PeftKind::Adapter, PeftKind::Lora] {
            let m = ToyModel::random(&spec(kind), 2).unwrap();
            let t = task();
            assert_eq!(
                m.final_hidden(t.val().tokens(), Peft::Active).unwrap(),
                m.final_hidden(t.val().tokens(), Peft::Inactive).unwrap()
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = task();
        for kind in [PeftKind::Adapter, PeftKind::Lora] {
            let mut m = ToyModel::random(&spec(kind), 3).unwrap();
            randomize_peft(&mut m, 9, 0.3);
            let (tokens, labels) = t.train().batch(&[0, 1, 2, 3, 4, 5]);
            let (_, g) = m.loss_and_gradients(&tokens, &labels).unwrap();
            let grads: Vec<(String, Vec<f64>)> = g.named().into_iter().map(|(n, v)| (n, v.to_vec())).collect();
            let eps = 1e-5;
            for (k, (name, gv)) in grads.iter().enumerate() {
                for i in 0..gv.len() {
                    let mut plus = m.clone();
                    plus.trainable_params_mut()[k].1[i] += eps;
                    let mut minus = m.clone();
                    minus.trainable_params_mut()[k].1[i] -= eps;
                    let fd = (plus.loss(&tokens, &labels).unwrap() - minus.loss(&tokens, &labels).unwrap()) / (2.0 * eps);
                    let err = (fd - gv[i]).abs() / fd.abs().max(gv[i].abs()).max(1e-6);
                    assert!(err < 1e-5, "{kind} {name}[{i}]: analytic {} numeric {fd}", gv[i]);
                }
            }
        }
    }

    #[test]
    fn container_round_trip() {
        for kind in [PeftKind::Adapter, PeftKind::Lora] {
            let mut m = ToyModel::random(&spec(kind), 6).unwrap();
            randomize_peft(&mut m, 1, 0.2);
            let c = m.to_container().unwrap();
            let back = ToyModel::from_container(&TensorContainer::from_bytes(&c.to_bytes()).unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(PeftModuleSet::from_container(&c).unwrap(), *m.peft());
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let m = ToyModel::random(&spec(PeftKind::Adapter), 0).unwrap();
        assert!(m.logits(&Matrix::zeros(4, 5)).is_err());
        assert!(m.logits(&Matrix::zeros(3, 4)).is_err());
        assert!(m.loss(&Matrix::zeros(3, 5), &[7]).is_err());
        let other = ToyModel::random(&spec(PeftKind::Lora), 0).unwrap();
        assert!(m.clone().set_peft(other.peft().clone()).is_err());
    }
}
