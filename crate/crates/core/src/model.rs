//! Transformer encoder with MLM, token-classification and
//! sequence-classification heads.
//!
//! Post-LN blocks, tanh-approximated GELU, learned positions, an MLM head
//! whose output projection is the token embedding table. All arithmetic is
//! f64 and gradients are hand-derived; there is no autodiff.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{MaskedBatch, IGNORE};
use crate::tokenizer::TokenId;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_WEIGHTS_FILE: &str = "weights.safetensors";
pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape: {0}")]
    Shape(String),
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("{0} head is not attached")]
    MissingHead(&'static str),
    #[error("{head} head has {actual} outputs, task needs {expected}")]
    HeadMismatch {
        head: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("label {label} at index {index} outside 0..{num_labels}")]
    LabelOutOfRange {
        index: usize,
        label: i64,
        num_labels: usize,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_max_positions() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    pub dropout: f64,
    /// Accepted for config compatibility; all math stays f64.
    #[serde(default)]
    pub mixed_precision: bool,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 256,
            num_heads: 4,
            ffn_dim: 1024,
            vocab_size,
            max_positions: 512,
            dropout: 0.1,
            mixed_precision: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return err("layer count and all dimensions must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return err(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return err("vocab_size and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Borrowed row-major `batch × seq_len` input.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub ids: &'a [TokenId],
    pub attention_mask: &'a [u8],
    pub batch: usize,
    pub seq_len: usize,
}

impl<'a> EncoderInput<'a> {
    pub fn new(ids: &'a [TokenId], attention_mask: &'a [u8], batch: usize, seq_len: usize) -> Self {
        EncoderInput {
            ids,
            attention_mask,
            batch,
            seq_len,
        }
    }

    pub fn from_batch(b: &'a MaskedBatch) -> Self {
        Self::new(&b.input_ids, &b.attention_mask, b.batch, b.seq_len)
    }

    fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: normal_matrix(fan_in, fan_out, rng),
            b: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn outputs(&self) -> usize {
        self.b.len()
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.w);
        g.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor::new(format!("{prefix}.weight"), self.w.shape(), &self.w));
        out.push(NamedTensor::new(format!("{prefix}.bias"), self.b.shape(), &self.b));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.weight"), slice_mut(&mut self.w)));
        out.push((format!("{prefix}.bias"), slice_mut(&mut self.b)));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mu = row.sum() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            let k = *inv;
            row.mapv_inplace(|v| (v - mu) * k);
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, c: &LnCache, dy: &Array2<f64>, g: &mut LayerNorm) -> Array2<f64> {
        g.gamma += &(dy * &c.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
        let n = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xhat), &inv) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(c.inv_std.iter()) {
            let m1 = row.sum() / n;
            let m2 = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            Zip::from(&mut row).and(&xhat).for_each(|d, &xh| *d = inv * (*d - m1 - xh * m2));
        }
        dx
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor::new(format!("{prefix}.gamma"), self.gamma.shape(), &self.gamma));
        out.push(NamedTensor::new(format!("{prefix}.beta"), self.beta.shape(), &self.beta));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.gamma"), slice_mut(&mut self.gamma)));
        out.push((format!("{prefix}.beta"), slice_mut(&mut self.beta)));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub attn_ln: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_ln: LayerNorm,
}

impl EncoderLayer {
    fn init(c: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = c.hidden_dim;
        EncoderLayer {
            query: Linear::init(h, h, rng),
            key: Linear::init(h, h, rng),
            value: Linear::init(h, h, rng),
            attn_out: Linear::init(h, h, rng),
            attn_ln: LayerNorm::new(h),
            ffn_in: Linear::init(h, c.ffn_dim, rng),
            ffn_out: Linear::init(c.ffn_dim, h, rng),
            ffn_ln: LayerNorm::new(h),
        }
    }

    fn zeros_like(&self) -> Self {
        EncoderLayer {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            attn_out: self.attn_out.zeros_like(),
            attn_ln: self.attn_ln.zeros_like(),
            ffn_in: self.ffn_in.zeros_like(),
            ffn_out: self.ffn_out.zeros_like(),
            ffn_ln: self.ffn_ln.zeros_like(),
        }
    }

    fn tensors<'a>(&'a self, p: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.query.tensors(&format!("{p}.query"), out);
        self.key.tensors(&format!("{p}.key"), out);
        self.value.tensors(&format!("{p}.value"), out);
        self.attn_out.tensors(&format!("{p}.attn_out"), out);
        self.attn_ln.tensors(&format!("{p}.attn_ln"), out);
        self.ffn_in.tensors(&format!("{p}.ffn_in"), out);
        self.ffn_out.tensors(&format!("{p}.ffn_out"), out);
        self.ffn_ln.tensors(&format!("{p}.ffn_ln"), out);
    }

    fn tensors_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.query.tensors_mut(&format!("{p}.query"), out);
        self.key.tensors_mut(&format!("{p}.key"), out);
        self.value.tensors_mut(&format!("{p}.value"), out);
        self.attn_out.tensors_mut(&format!("{p}.attn_out"), out);
        self.attn_ln.tensors_mut(&format!("{p}.attn_ln"), out);
        self.ffn_in.tensors_mut(&format!("{p}.ffn_in"), out);
        self.ffn_out.tensors_mut(&format!("{p}.ffn_out"), out);
        self.ffn_ln.tensors_mut(&format!("{p}.ffn_ln"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub embedding_ln: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub mlm_dense: Linear,
    pub mlm_ln: LayerNorm,
    /// Output bias of the MLM decoder; its weight is the token embedding.
    pub mlm_bias: Array1<f64>,
    pub token_cls: Option<Linear>,
    pub seq_cls: Option<Linear>,
}

/// Borrowed view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl<'a> NamedTensor<'a> {
    fn new<D: ndarray::Dimension>(name: String, shape: &[usize], a: &'a ndarray::Array<f64, D>) -> Self {
        NamedTensor {
            name,
            shape: shape.to_vec(),
            data: a.as_slice().expect("parameters are contiguous"),
        }
    }
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || d.sample(rng))
}

/// Shapes of the optional heads, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadShapes {
    pub token_cls: Option<usize>,
    pub seq_cls: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub encoder: EncoderWeights,
    pub heads: HeadWeights,
}

/// Result of an MLM forward in inference mode.
#[derive(Debug, Clone)]
pub struct MlmOutput {
    pub loss: f64,
    /// `batch × seq_len × vocab`.
    pub logits: Array3<f64>,
    pub selected: usize,
    /// Set when the batch had no selected positions; the loss is then 0.
    pub no_targets: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Number of positions (or rows) that contributed.
    pub count: usize,
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    attn_ln: LnCache,
    y1: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ffn_ln: LnCache,
}

struct EncoderCache {
    ids: Vec<TokenId>,
    batch: usize,
    seq_len: usize,
    emb_ln: LnCache,
    emb_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

struct MlmHeadCache {
    hidden: Array2<f64>,
    pre: Array2<f64>,
    ln: LnCache,
    z: Array2<f64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout(x: &mut Array2<f64>, p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if rng.gen::<f64>() < p { 0.0 } else { keep });
    *x *= &mask;
    Some(mask)
}

fn apply_mask(d: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *d *= m;
    }
}

/// Row-wise softmax cross-entropy. Returns the summed loss and
/// `scale · (softmax − onehot)`.
fn cross_entropy(logits: &Array2<f64>, targets: &[usize], scale: f64) -> (f64, Array2<f64>) {
    let mut grad = logits.clone();
    let mut total = 0.0;
    for ((mut row, raw), &t) in grad.rows_mut().into_iter().zip(logits.rows()).zip(targets) {
        let max = raw.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        total += z.ln() + max - raw[t];
        row.mapv_inplace(|v| v / z * scale);
        row[t] -= scale;
    }
    (total, grad)
}

/// Numerically stable row softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let token_embedding = normal_matrix(config.vocab_size, h, &mut rng);
        let position_embedding = normal_matrix(config.max_positions, h, &mut rng);
        let layers = (0..config.num_layers).map(|_| EncoderLayer::init(&config, &mut rng)).collect();
        let heads = HeadWeights {
            mlm_dense: Linear::init(h, h, &mut rng),
            mlm_ln: LayerNorm::new(h),
            mlm_bias: Array1::zeros(config.vocab_size),
            token_cls: None,
            seq_cls: None,
        };
        Ok(Model {
            encoder: EncoderWeights {
                token_embedding,
                position_embedding,
                embedding_ln: LayerNorm::new(h),
                layers,
            },
            heads,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Attaches a fresh token-classification head, replacing any existing one.
    pub fn attach_token_cls(&mut self, num_tags: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.heads.token_cls = Some(Linear::init(self.config.hidden_dim, num_tags, &mut rng));
    }

    /// Attaches a fresh sequence-classification head, replacing any existing one.
    pub fn attach_seq_cls(&mut self, num_labels: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.heads.seq_cls = Some(Linear::init(self.config.hidden_dim, num_labels, &mut rng));
    }

    pub fn head_shapes(&self) -> HeadShapes {
        HeadShapes {
            token_cls: self.heads.token_cls.as_ref().map(Linear::outputs),
            seq_cls: self.heads.seq_cls.as_ref().map(Linear::outputs),
        }
    }

    /// Same structure with every value zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let e = &self.encoder;
        Model {
            config: self.config.clone(),
            encoder: EncoderWeights {
                token_embedding: Array2::zeros(e.token_embedding.raw_dim()),
                position_embedding: Array2::zeros(e.position_embedding.raw_dim()),
                embedding_ln: e.embedding_ln.zeros_like(),
                layers: e.layers.iter().map(EncoderLayer::zeros_like).collect(),
            },
            heads: HeadWeights {
                mlm_dense: self.heads.mlm_dense.zeros_like(),
                mlm_ln: self.heads.mlm_ln.zeros_like(),
                mlm_bias: Array1::zeros(self.heads.mlm_bias.len()),
                token_cls: self.heads.token_cls.as_ref().map(Linear::zeros_like),
                seq_cls: self.heads.seq_cls.as_ref().map(Linear::zeros_like),
            },
        }
    }

    /// All parameters in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        let e = &self.encoder;
        out.push(NamedTensor::new(
            "embeddings.token".into(),
            e.token_embedding.shape(),
            &e.token_embedding,
        ));
        out.push(NamedTensor::new(
            "embeddings.position".into(),
            e.position_embedding.shape(),
            &e.position_embedding,
        ));
        e.embedding_ln.tensors("embeddings.ln", &mut out);
        for (i, l) in e.layers.iter().enumerate() {
            l.tensors(&format!("layers.{i}"), &mut out);
        }
        self.heads.mlm_dense.tensors("mlm.dense", &mut out);
        self.heads.mlm_ln.tensors("mlm.ln", &mut out);
        out.push(NamedTensor::new("mlm.bias".into(), self.heads.mlm_bias.shape(), &self.heads.mlm_bias));
        if let Some(h) = &self.heads.token_cls {
            h.tensors("token_cls", &mut out);
        }
        if let Some(h) = &self.heads.seq_cls {
            h.tensors("seq_cls", &mut out);
        }
        out
    }

    /// Mutable counterpart of [`Model::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        let e = &mut self.encoder;
        out.push(("embeddings.token".into(), slice_mut(&mut e.token_embedding)));
        out.push(("embeddings.position".into(), slice_mut(&mut e.position_embedding)));
        e.embedding_ln.tensors_mut("embeddings.ln", &mut out);
        for (i, l) in e.layers.iter_mut().enumerate() {
            l.tensors_mut(&format!("layers.{i}"), &mut out);
        }
        let h = &mut self.heads;
        h.mlm_dense.tensors_mut("mlm.dense", &mut out);
        h.mlm_ln.tensors_mut("mlm.ln", &mut out);
        out.push(("mlm.bias".into(), slice_mut(&mut h.mlm_bias)));
        if let Some(t) = &mut h.token_cls {
            t.tensors_mut("token_cls", &mut out);
        }
        if let Some(t) = &mut h.seq_cls {
            t.tensors_mut("seq_cls", &mut out);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &EncoderInput) -> Result<()> {
        let n = input.rows();
        if input.ids.len() != n || input.attention_mask.len() != n {
            return Err(ModelError::Shape(format!(
                "expected {} ids and mask entries for {}×{}, got {} and {}",
                n,
                input.batch,
                input.seq_len,
                input.ids.len(),
                input.attention_mask.len()
            )));
        }
        if input.seq_len > self.config.max_positions {
            return Err(ModelError::Shape(format!(
                "sequence length {} exceeds max_positions {}",
                input.seq_len, self.config.max_positions
            )));
        }
        if let Some(&id) = input.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn encode(&self, input: &EncoderInput, mut rng: Option<&mut ChaCha8Rng>) -> (Array2<f64>, EncoderCache) {
        let (b, t) = (input.batch, input.seq_len);
        let h = self.config.hidden_dim;
        let p = self.config.dropout;
        let e = &self.encoder;
        let mut x0 = Array2::zeros((b * t, h));
        for (i, mut row) in x0.rows_mut().into_iter().enumerate() {
            row.assign(&e.token_embedding.row(input.ids[i] as usize));
            row += &e.position_embedding.row(i % t);
        }
        let (mut x, emb_ln) = e.embedding_ln.forward(&x0);
        let emb_drop = dropout(&mut x, p, rng.as_deref_mut());
        let mut layers = Vec::with_capacity(e.layers.len());
        for layer in &e.layers {
            let (y, c) = self.layer_forward(layer, x, input, rng.as_deref_mut());
            x = y;
            layers.push(c);
        }
        let cache = EncoderCache {
            ids: input.ids.to_vec(),
            batch: b,
            seq_len: t,
            emb_ln,
            emb_drop,
            layers,
        };
        (x, cache)
    }

    fn layer_forward(
        &self,
        l: &EncoderLayer,
        x: Array2<f64>,
        input: &EncoderInput,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, LayerCache) {
        let (b, t) = (input.batch, input.seq_len);
        let (nh, dh) = (self.config.num_heads, self.config.head_dim());
        let p = self.config.dropout;
        let scale = 1.0 / (dh as f64).sqrt();
        let xv = x.view();
        let q = l.query.forward(&xv);
        let k = l.key.forward(&xv);
        let v = l.value.forward(&xv);
        let mut ctx = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(b * nh);
        for bi in 0..b {
            let rows = bi * t..(bi + 1) * t;
            let valid = &input.attention_mask[rows.clone()];
            for hi in 0..nh {
                let cols = hi * dh..(hi + 1) * dh;
                let qb = q.slice(s![rows.clone(), cols.clone()]);
                let kb = k.slice(s![rows.clone(), cols.clone()]);
                let vb = v.slice(s![rows.clone(), cols.clone()]);
                let mut pr = qb.dot(&kb.t());
                for mut row in pr.rows_mut() {
                    let max = row
                        .iter()
                        .zip(valid)
                        .filter(|(_, &m)| m != 0)
                        .fold(f64::NEG_INFINITY, |a, (&s, _)| a.max(s));
                    let mut z = 0.0;
                    for (s, &m) in row.iter_mut().zip(valid) {
                        *s = if m != 0 { ((*s - max) * scale).exp() } else { 0.0 };
                        z += *s;
                    }
                    if z > 0.0 {
                        row /= z;
                    }
                }
                ctx.slice_mut(s![rows.clone(), cols]).assign(&pr.dot(&vb));
                probs.push(pr);
            }
        }
        let mut a = l.attn_out.forward(&ctx.view());
        let attn_drop = dropout(&mut a, p, rng.as_deref_mut());
        a += &x;
        let (y1, attn_ln) = l.attn_ln.forward(&a);
        let ffn_pre = l.ffn_in.forward(&y1.view());
        let ffn_act = ffn_pre.mapv(gelu);
        let mut f = l.ffn_out.forward(&ffn_act.view());
        let ffn_drop = dropout(&mut f, p, rng);
        f += &y1;
        let (y2, ffn_ln) = l.ffn_ln.forward(&f);
        let cache = LayerCache {
            x,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            attn_ln,
            y1,
            ffn_pre,
            ffn_act,
            ffn_drop,
            ffn_ln,
        };
        (y2, cache)
    }

    fn layer_backward(&self, l: &EncoderLayer, c: &LayerCache, dy: Array2<f64>, g: &mut EncoderLayer, t: usize) -> Array2<f64> {
        let (nh, dh) = (self.config.num_heads, self.config.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let dr2 = l.ffn_ln.backward(&c.ffn_ln, &dy, &mut g.ffn_ln);
        let mut df = dr2.clone();
        apply_mask(&mut df, &c.ffn_drop);
        let mut dact = l.ffn_out.backward(&c.ffn_act.view(), &df, &mut g.ffn_out);
        Zip::from(&mut dact).and(&c.ffn_pre).for_each(|d, &x| *d *= gelu_grad(x));
        let mut dy1 = l.ffn_in.backward(&c.y1.view(), &dact, &mut g.ffn_in);
        dy1 += &dr2;
        let dr1 = l.attn_ln.backward(&c.attn_ln, &dy1, &mut g.attn_ln);
        let mut da = dr1.clone();
        apply_mask(&mut da, &c.attn_drop);
        let dctx = l.attn_out.backward(&c.ctx.view(), &da, &mut g.attn_out);
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        let b = c.x.nrows() / t;
        for bi in 0..b {
            let rows = bi * t..(bi + 1) * t;
            for hi in 0..nh {
                let cols = hi * dh..(hi + 1) * dh;
                let pr = &c.probs[bi * nh + hi];
                let dcb = dctx.slice(s![rows.clone(), cols.clone()]);
                let qb = c.q.slice(s![rows.clone(), cols.clone()]);
                let kb = c.k.slice(s![rows.clone(), cols.clone()]);
                let vb = c.v.slice(s![rows.clone(), cols.clone()]);
                let mut ds = dcb.dot(&vb.t());
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&pr.t().dot(&dcb));
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(pr.rows()) {
                    let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d = p * (*d - dot) * scale);
                }
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kb));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qb));
            }
        }
        let xv = c.x.view();
        let mut dx = dr1;
        dx += &l.query.backward(&xv, &dq, &mut g.query);
        dx += &l.key.backward(&xv, &dk, &mut g.key);
        dx += &l.value.backward(&xv, &dv, &mut g.value);
        dx
    }

    fn encode_backward(&self, c: &EncoderCache, mut dy: Array2<f64>, g: &mut Model) {
        for (i, layer) in self.encoder.layers.iter().enumerate().rev() {
            dy = self.layer_backward(layer, &c.layers[i], dy, &mut g.encoder.layers[i], c.seq_len);
        }
        apply_mask(&mut dy, &c.emb_drop);
        let dx0 = self
            .encoder
            .embedding_ln
            .backward(&c.emb_ln, &dy, &mut g.encoder.embedding_ln);
        debug_assert_eq!(dx0.nrows(), c.batch * c.seq_len);
        for (i, row) in dx0.rows().into_iter().enumerate() {
            let mut te = g.encoder.token_embedding.row_mut(c.ids[i] as usize);
            te += &row;
            let mut pe = g.encoder.position_embedding.row_mut(i % c.seq_len);
            pe += &row;
        }
    }

    /// Final hidden states, `(batch · seq_len) × hidden`, inference mode.
    pub fn hidden_states(&self, input: &EncoderInput) -> Result<Array2<f64>> {
        self.check_input(input)?;
        Ok(self.encode(input, None).0)
    }

    fn mlm_head(&self, hidden: Array2<f64>) -> (Array2<f64>, MlmHeadCache) {
        let h = &self.heads;
        let pre = h.mlm_dense.forward(&hidden.view());
        let act = pre.mapv(gelu);
        let (z, ln) = h.mlm_ln.forward(&act);
        let mut logits = z.dot(&self.encoder.token_embedding.t());
        logits += &h.mlm_bias;
        (logits, MlmHeadCache { hidden, pre, ln, z })
    }

    fn mlm_head_backward(&self, c: &MlmHeadCache, dlogits: &Array2<f64>, g: &mut Model) -> Array2<f64> {
        let h = &self.heads;
        g.heads.mlm_bias += &dlogits.sum_axis(Axis(0));
        general_mat_mul(1.0, &dlogits.t(), &c.z, 1.0, &mut g.encoder.token_embedding);
        let dz = dlogits.dot(&self.encoder.token_embedding);
        let mut dact = h.mlm_ln.backward(&c.ln, &dz, &mut g.heads.mlm_ln);
        Zip::from(&mut dact).and(&c.pre).for_each(|d, &x| *d *= gelu_grad(x));
        h.mlm_dense.backward(&c.hidden.view(), &dact, &mut g.heads.mlm_dense)
    }

    fn check_mlm_labels(&self, batch: &MaskedBatch) -> Result<(Vec<usize>, Vec<usize>)> {
        if batch.labels.len() != batch.batch * batch.seq_len {
            return Err(ModelError::Shape("labels do not match batch shape".into()));
        }
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, &l) in batch.labels.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            if l < 0 || l as usize >= self.config.vocab_size {
                return Err(ModelError::LabelOutOfRange {
                    index: i,
                    label: l,
                    num_labels: self.config.vocab_size,
                });
            }
            rows.push(i);
            targets.push(l as usize);
        }
        Ok((rows, targets))
    }

    /// Inference-mode MLM forward with logits at every position. The loss is
    /// the mean cross-entropy over positions whose label is not [`IGNORE`].
    pub fn forward_mlm(&self, batch: &MaskedBatch) -> Result<MlmOutput> {
        let input = EncoderInput::from_batch(batch);
        self.check_input(&input)?;
        let (rows, targets) = self.check_mlm_labels(batch)?;
        let (hidden, _) = self.encode(&input, None);
        let (logits, _) = self.mlm_head(hidden);
        let loss = if rows.is_empty() {
            0.0
        } else {
            let sel = logits.select(Axis(0), &rows);
            cross_entropy(&sel, &targets, 1.0).0 / rows.len() as f64
        };
        let v = self.config.vocab_size;
        let logits = logits
            .into_shape((batch.batch, batch.seq_len, v))
            .expect("row-major logits");
        Ok(MlmOutput {
            loss,
            logits,
            selected: rows.len(),
            no_targets: rows.is_empty(),
        })
    }

    /// MLM loss evaluated only at selected positions. With `grads`, the
    /// gradient of the mean loss is added into it. Dropout is active iff
    /// `rng` is given.
    pub fn mlm_loss(
        &self,
        batch: &MaskedBatch,
        rng: Option<&mut ChaCha8Rng>,
        grads: Option<&mut Model>,
    ) -> Result<LossOutput> {
        let input = EncoderInput::from_batch(batch);
        self.check_input(&input)?;
        let (rows, targets) = self.check_mlm_labels(batch)?;
        if rows.is_empty() {
            return Ok(LossOutput { loss: 0.0, count: 0 });
        }
        let (hidden, cache) = self.encode(&input, rng);
        let sel = hidden.select(Axis(0), &rows);
        let (logits, head_cache) = self.mlm_head(sel);
        let m = rows.len() as f64;
        let (total, dlogits) = cross_entropy(&logits, &targets, 1.0 / m);
        if let Some(g) = grads {
            let dsel = self.mlm_head_backward(&head_cache, &dlogits, g);
            let mut dh = Array2::zeros(hidden.raw_dim());
            for (k, &r) in rows.iter().enumerate() {
                let mut row = dh.row_mut(r);
                row += &dsel.row(k);
            }
            self.encode_backward(&cache, dh, g);
        }
        Ok(LossOutput {
            loss: total / m,
            count: rows.len(),
        })
    }

    fn token_head(&self, expected: Option<usize>) -> Result<&Linear> {
        let h = self.heads.token_cls.as_ref().ok_or(ModelError::MissingHead("token classification"))?;
        match expected {
            Some(e) if e != h.outputs() => Err(ModelError::HeadMismatch {
                head: "token classification",
                expected: e,
                actual: h.outputs(),
            }),
            _ => Ok(h),
        }
    }

    fn seq_head(&self, expected: Option<usize>) -> Result<&Linear> {
        let h = self.heads.seq_cls.as_ref().ok_or(ModelError::MissingHead("sequence classification"))?;
        match expected {
            Some(e) if e != h.outputs() => Err(ModelError::HeadMismatch {
                head: "sequence classification",
                expected: e,
                actual: h.outputs(),
            }),
            _ => Ok(h),
        }
    }

    /// Per-position tag logits, `batch × seq_len × tags`, inference mode.
    pub fn forward_token_cls(&self, input: &EncoderInput, num_tags: Option<usize>) -> Result<Array3<f64>> {
        let head = self.token_head(num_tags)?;
        let hidden = self.hidden_states(input)?;
        let logits = head.forward(&hidden.view());
        let tags = head.outputs();
        Ok(logits
            .into_shape((input.batch, input.seq_len, tags))
            .expect("row-major logits"))
    }

    /// Mean tag cross-entropy over positions whose label is not [`IGNORE`]
    /// and whose attention mask is set.
    pub fn token_cls_loss(
        &self,
        input: &EncoderInput,
        labels: &[i64],
        rng: Option<&mut ChaCha8Rng>,
        grads: Option<&mut Model>,
    ) -> Result<LossOutput> {
        self.check_input(input)?;
        let head = self.token_head(None)?;
        if labels.len() != input.rows() {
            return Err(ModelError::Shape("labels do not match input shape".into()));
        }
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if l == IGNORE || input.attention_mask[i] == 0 {
                continue;
            }
            if l < 0 || l as usize >= head.outputs() {
                return Err(ModelError::LabelOutOfRange {
                    index: i,
                    label: l,
                    num_labels: head.outputs(),
                });
            }
            rows.push(i);
            targets.push(l as usize);
        }
        if rows.is_empty() {
            return Ok(LossOutput { loss: 0.0, count: 0 });
        }
        let (hidden, cache) = self.encode(input, rng);
        let sel = hidden.select(Axis(0), &rows);
        let logits = head.forward(&sel.view());
        let m = rows.len() as f64;
        let (total, dlogits) = cross_entropy(&logits, &targets, 1.0 / m);
        if let Some(g) = grads {
            let gh = g.heads.token_cls.as_mut().ok_or(ModelError::MissingHead("token classification"))?;
            let dsel = head.backward(&sel.view(), &dlogits, gh);
            let mut dh = Array2::zeros(hidden.raw_dim());
            for (k, &r) in rows.iter().enumerate() {
                let mut row = dh.row_mut(r);
                row += &dsel.row(k);
            }
            self.encode_backward(&cache, dh, g);
        }
        Ok(LossOutput {
            loss: total / m,
            count: rows.len(),
        })
    }

    fn first_positions(input: &EncoderInput) -> Vec<usize> {
        (0..input.batch).map(|b| b * input.seq_len).collect()
    }

    /// Label logits from the first-position hidden state, `batch × labels`.
    pub fn forward_seq_cls(&self, input: &EncoderInput, num_labels: Option<usize>) -> Result<Array2<f64>> {
        let head = self.seq_head(num_labels)?;
        let hidden = self.hidden_states(input)?;
        let pooled = hidden.select(Axis(0), &Self::first_positions(input));
        Ok(head.forward(&pooled.view()))
    }

    /// Mean cross-entropy of one label per row.
    pub fn seq_cls_loss(
        &self,
        input: &EncoderInput,
        labels: &[usize],
        rng: Option<&mut ChaCha8Rng>,
        grads: Option<&mut Model>,
    ) -> Result<LossOutput> {
        self.check_input(input)?;
        let head = self.seq_head(None)?;
        if labels.len() != input.batch {
            return Err(ModelError::Shape("one label per row expected".into()));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= head.outputs()) {
            return Err(ModelError::LabelOutOfRange {
                index: i,
                label: l as i64,
                num_labels: head.outputs(),
            });
        }
        if labels.is_empty() {
            return Ok(LossOutput { loss: 0.0, count: 0 });
        }
        let rows = Self::first_positions(input);
        let (hidden, cache) = self.encode(input, rng);
        let pooled = hidden.select(Axis(0), &rows);
        let logits = head.forward(&pooled.view());
        let m = rows.len() as f64;
        let (total, dlogits) = cross_entropy(&logits, labels, 1.0 / m);
        if let Some(g) = grads {
            let gh = g.heads.seq_cls.as_mut().ok_or(ModelError::MissingHead("sequence classification"))?;
            let dp = head.backward(&pooled.view(), &dlogits, gh);
            let mut dh = Array2::zeros(hidden.raw_dim());
            for (k, &r) in rows.iter().enumerate() {
                let mut row = dh.row_mut(r);
                row += &dp.row(k);
            }
            self.encode_backward(&cache, dh, g);
        }
        Ok(LossOutput {
            loss: total / m,
            count: rows.len(),
        })
    }
}

/// Contents of `config.json` in a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDescriptor {
    pub format_version: u32,
    pub model: ModelConfig,
    pub heads: HeadShapes,
    pub tokenizer_fingerprint: String,
    /// Optimizer and schedule settings of the run that produced the weights.
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `config.json` and the tensor container into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    tokenizer_fingerprint: &str,
    training: Option<serde_json::Value>,
) -> Result<CheckpointDescriptor> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let desc = CheckpointDescriptor {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: model.config.clone(),
        heads: model.head_shapes(),
        tokenizer_fingerprint: tokenizer_fingerprint.to_string(),
        training,
    };
    let cfg_path = dir.join(CHECKPOINT_CONFIG_FILE);
    let json = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
    fs::write(&cfg_path, json + "\n").map_err(io_err(&cfg_path))?;

    let tensors = model.tensors();
    let bytes: Vec<Vec<u8>> = tensors
        .iter()
        .map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let weights_path = dir.join(CHECKPOINT_WEIGHTS_FILE);
    let bad = |reason: String| ModelError::Checkpoint {
        path: weights_path.clone(),
        reason,
    };
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|(t, b)| {
            TensorView::new(Dtype::F64, t.shape.clone(), b)
                .map(|v| (t.name.clone(), v))
                .map_err(|e| bad(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([("format_version".to_string(), CHECKPOINT_FORMAT_VERSION.to_string())]);
    let blob = safetensors::serialize(views, &Some(meta)).map_err(|e| bad(e.to_string()))?;
    fs::write(&weights_path, blob).map_err(io_err(&weights_path))?;
    Ok(desc)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointDescriptor)> {
    let cfg_path = dir.join(CHECKPOINT_CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let desc: CheckpointDescriptor = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint {
        path: cfg_path.clone(),
        reason: e.to_string(),
    })?;
    if desc.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ModelError::Checkpoint {
            path: cfg_path,
            reason: format!("unsupported format version {}", desc.format_version),
        });
    }
    let mut model = Model::init(desc.model.clone(), 0)?;
    if let Some(n) = desc.heads.token_cls {
        model.attach_token_cls(n, 0);
    }
    if let Some(n) = desc.heads.seq_cls {
        model.attach_seq_cls(n, 0);
    }
    let weights_path = dir.join(CHECKPOINT_WEIGHTS_FILE);
    let blob = fs::read(&weights_path).map_err(io_err(&weights_path))?;
    let bad = |reason: String| ModelError::Checkpoint {
        path: weights_path.clone(),
        reason,
    };
    let st = SafeTensors::deserialize(&blob).map_err(|e| bad(e.to_string()))?;
    let shapes: Vec<Vec<usize>> = model.tensors().iter().map(|t| t.shape.clone()).collect();
    if st.names().len() != shapes.len() {
        return Err(bad(format!("expected {} tensors, found {}", shapes.len(), st.names().len())));
    }
    for ((name, dst), shape) in model.tensors_mut().into_iter().zip(shapes) {
        let view = st.tensor(&name).map_err(|e| bad(format!("{name}: {e}")))?;
        if view.dtype() != Dtype::F64 || view.shape() != shape.as_slice() {
            return Err(bad(format!(
                "{name}: expected f64 {:?}, found {:?} {:?}",
                shape,
                view.dtype(),
                view.shape()
            )));
        }
        for (d, chunk) in dst.iter_mut().zip(view.data().chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    if !model.is_finite() {
        return Err(bad("non-finite weights".into()));
    }
    Ok((model, desc))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
}

/// Fourth-order central differences on every parameter; returns the
/// largest relative error `|a − n| / max(|a|, |n|, 1e-8)`. With h = 1e-3
/// the stencil's truncation error is O(h⁴) and roundoff about 1e-13.
pub fn gradient_check(model: &Model, loss: impl Fn(&Model, Option<&mut Model>) -> f64) -> GradientCheck {
    let mut grads = model.zeros_like();
    loss(model, Some(&mut grads));
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut probe = model.clone();
    let h = 1e-3;
    let mut worst = GradientCheck::default();
    let counts: Vec<usize> = model.tensors().iter().map(|t| t.data.len()).collect();
    let names: Vec<String> = model.tensors().iter().map(|t| t.name.clone()).collect();
    for (ti, &n) in counts.iter().enumerate() {
        for j in 0..n {
            let orig = probe.tensors_mut()[ti].1[j];
            let mut at = |delta: f64| {
                probe.tensors_mut()[ti].1[j] = orig + delta;
                loss(&probe, None)
            };
            let num = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            probe.tensors_mut()[ti].1[j] = orig;
            let a = analytic[ti][j];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            worst.checked += 1;
            if rel > worst.max_relative_error {
                worst.max_relative_error = rel;
                worst.worst_parameter = format!("{}[{j}]", names[ti]);
            }
        }
    }
    worst
}
