//! The three convolutional boundary classifiers and their checkpoint format.
//!
//! Each architecture is a fixed recipe of layers applied to a `1 x m x n`
//! window matrix and ending in a two-way output (`NO_SEG`, `SEG`):
//!
//! * CNN-A: conv 2x4/64, max-pool 2x3 stride 2x3, conv 2x2/128,
//!   conv 1x49/128, dense 4096, dense 2048, dropout;
//! * CNN-B: conv 3x3/32, conv 2x2/64, max-pool 2x3 stride 1x3, dense 2048,
//!   dense 4096, dense 2048, dropout;
//! * CNN-C: the convolution and pooling of CNN-B, dense 2048, dropout.
//!
//! Convolutions use valid padding and stride one. Every convolution and
//! hidden dense layer is followed by a ReLU.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SbdError};
use crate::tensor::{Conv2d, Dense, Dropout, Layer, LayerKind, MaxPool2d, Network, Tensor};
use crate::window::Label;

pub const DEFAULT_KEEP_PROB: f64 = 0.5;

const CHECKPOINT_MAGIC: [u8; 4] = *b"SBDC";
const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 4;
const RECORD_LEN: usize = 1 + 5 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelId {
    CnnA,
    CnnB,
    CnnC,
}

impl ModelId {
    pub const ALL: [ModelId; 3] = [ModelId::CnnA, ModelId::CnnB, ModelId::CnnC];

    pub fn code(self) -> u8 {
        match self {
            ModelId::CnnA => 0,
            ModelId::CnnB => 1,
            ModelId::CnnC => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ModelId::CnnA),
            1 => Some(ModelId::CnnB),
            2 => Some(ModelId::CnnC),
            _ => None,
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelId::CnnA => "cnn-a",
            ModelId::CnnB => "cnn-b",
            ModelId::CnnC => "cnn-c",
        })
    }
}

impl FromStr for ModelId {
    type Err = SbdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "cnn-a" | "a" => Ok(ModelId::CnnA),
            "cnn-b" | "b" => Ok(ModelId::CnnB),
            "cnn-c" | "c" => Ok(ModelId::CnnC),
            _ => Err(SbdError::Config(format!(
                "unknown model {s:?} (expected cnn-a, cnn-b or cnn-c)"
            ))),
        }
    }
}

/// Configuration of one layer as stored in a checkpoint: a kind and five
/// integer fields.
///
/// | kind      | fields                                  |
/// |-----------|-----------------------------------------|
/// | conv2d    | in_channels, filters, kh, kw, 0         |
/// | maxpool2d | kh, kw, sh, sw, 0                       |
/// | dense     | in_units, out_units, 0, 0, 0            |
/// | dropout   | keep probability as f32 bits, 0, 0, 0, 0 |
/// | relu, flatten | all zero                            |
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fields: [u32; 5],
}

impl LayerSpec {
    fn conv(in_channels: usize, filters: usize, kh: usize, kw: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            fields: [in_channels as u32, filters as u32, kh as u32, kw as u32, 0],
        }
    }

    fn pool(kh: usize, kw: usize, sh: usize, sw: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool2d,
            fields: [kh as u32, kw as u32, sh as u32, sw as u32, 0],
        }
    }

    fn dense(in_units: usize, out_units: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            fields: [in_units as u32, out_units as u32, 0, 0, 0],
        }
    }

    fn dropout(keep_prob: f64) -> Self {
        LayerSpec {
            kind: LayerKind::Dropout,
            fields: [(keep_prob as f32).to_bits(), 0, 0, 0, 0],
        }
    }

    fn bare(kind: LayerKind) -> Self {
        LayerSpec { kind, fields: [0; 5] }
    }

    pub fn keep_prob(&self) -> Option<f64> {
        (self.kind == LayerKind::Dropout).then(|| f32::from_bits(self.fields[0]) as f64)
    }

    /// Number of parameters (weights then biases) the layer owns.
    pub fn param_count(&self) -> usize {
        let f = self.fields.map(|v| v as usize);
        match self.kind {
            LayerKind::Conv2d => f[1] * f[0] * f[2] * f[3] + f[1],
            LayerKind::Dense => f[0] * f[1] + f[1],
            _ => 0,
        }
    }

    fn instantiate(&self, rng: &mut ChaCha8Rng) -> Result<Layer<f32>> {
        let f = self.fields.map(|v| v as usize);
        Ok(match self.kind {
            LayerKind::Conv2d => Layer::Conv2d(Conv2d::new(f[0], f[1], f[2], f[3], rng)),
            LayerKind::MaxPool2d => Layer::MaxPool2d(MaxPool2d::new(f[0], f[1], f[2], f[3])?),
            LayerKind::Dense => Layer::Dense(Dense::new(f[0], f[1], rng)),
            LayerKind::Relu => Layer::relu(),
            LayerKind::Dropout => Layer::Dropout(Dropout::new(self.keep_prob().unwrap())?),
            LayerKind::Flatten => Layer::flatten(),
        })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.fields;
        match self.kind {
            LayerKind::Conv2d => write!(f, "conv2d {}x{} filters={}", v[2], v[3], v[1]),
            LayerKind::MaxPool2d => write!(f, "maxpool2d {}x{} stride={}x{}", v[0], v[1], v[2], v[3]),
            LayerKind::Dense => write!(f, "dense {}", v[1]),
            LayerKind::Relu => f.write_str("relu"),
            LayerKind::Dropout => write!(f, "dropout keep={}", f32::from_bits(v[0])),
            LayerKind::Flatten => f.write_str("flatten"),
        }
    }
}

// Architecture recipe step, resolved against the running shape.
enum Step {
    Conv(&'static str, usize, usize, usize),
    Pool(&'static str, usize, usize, usize, usize),
    Dense(usize),
    Relu,
    Flatten,
    Dropout,
}

fn recipe(id: ModelId) -> Vec<Step> {
    use Step::*;
    let conv_pool_b = |p: &'static str| -> Vec<Step> {
        let (c1, c2, pool) = match p {
            "B" => ("B_conv-1", "B_conv-2", "B_max_pool"),
            _ => ("C_conv-1", "C_conv-2", "C_max_pool"),
        };
        vec![Conv(c1, 32, 3, 3), Relu, Conv(c2, 64, 2, 2), Relu, Pool(pool, 2, 3, 1, 3), Flatten]
    };
    match id {
        ModelId::CnnA => vec![
            Conv("A_conv-1", 64, 2, 4),
            Relu,
            Pool("A_max_pool", 2, 3, 2, 3),
            Conv("A_conv-2", 128, 2, 2),
            Relu,
            Conv("A_conv-3", 128, 1, 49),
            Relu,
            Flatten,
            Dense(4096),
            Relu,
            Dense(2048),
            Relu,
            Dropout,
            Dense(2),
        ],
        ModelId::CnnB => {
            let mut steps = conv_pool_b("B");
            steps.extend([
                Dense(2048),
                Relu,
                Dense(4096),
                Relu,
                Dense(2048),
                Relu,
                Dropout,
                Dense(2),
            ]);
            steps
        }
        ModelId::CnnC => {
            let mut steps = conv_pool_b("C");
            steps.extend([
                Dense(2048),
                Relu,
                Dropout,
                Dense(2),
            ]);
            steps
        }
    }
}

/// A validated architecture for a given window size.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub id: ModelId,
    pub m: usize,
    pub n: usize,
    pub layers: Vec<LayerSpec>,
    /// Per-layer output shape for one sample.
    pub shapes: Vec<Vec<usize>>,
}

impl ModelSpec {
    pub fn build(id: ModelId, m: usize, n: usize) -> Result<Self> {
        Self::build_with_keep_prob(id, m, n, DEFAULT_KEEP_PROB)
    }

    pub fn build_with_keep_prob(id: ModelId, m: usize, n: usize, keep_prob: f64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(SbdError::Config(format!(
                "dropout keep probability must lie in (0, 1], got {keep_prob}"
            )));
        }
        if m == 0 || n == 0 {
            return Err(SbdError::Shape(format!("{id}: empty input {m}x{n}")));
        }
        let mut shape = vec![1, m, n];
        let mut layers = Vec::new();
        let mut shapes = Vec::new();
        let fail = |name: &str, detail: String| {
            SbdError::Shape(format!("{id} at ({m}, {n}): layer {name} cannot accept input: {detail}"))
        };
        for step in recipe(id) {
            let spec = match step {
                Step::Conv(name, filters, kh, kw) => {
                    let [c, h, w] = shape[..] else {
                        return Err(fail(name, format!("expected C x H x W, got {shape:?}")));
                    };
                    if h < kh || w < kw {
                        return Err(fail(name, format!("kernel {kh}x{kw} exceeds {h}x{w}")));
                    }
                    shape = vec![filters, h - kh + 1, w - kw + 1];
                    LayerSpec::conv(c, filters, kh, kw)
                }
                Step::Pool(name, kh, kw, sh, sw) => {
                    let [c, h, w] = shape[..] else {
                        return Err(fail(name, format!("expected C x H x W, got {shape:?}")));
                    };
                    if h < kh || w < kw {
                        return Err(fail(name, format!("kernel {kh}x{kw} exceeds {h}x{w}")));
                    }
                    shape = vec![c, (h - kh) / sh + 1, (w - kw) / sw + 1];
                    LayerSpec::pool(kh, kw, sh, sw)
                }
                Step::Flatten => {
                    shape = vec![shape.iter().product()];
                    LayerSpec::bare(LayerKind::Flatten)
                }
                Step::Dense(units) => {
                    let spec = LayerSpec::dense(shape[0], units);
                    shape = vec![units];
                    spec
                }
                Step::Relu => LayerSpec::bare(LayerKind::Relu),
                Step::Dropout => LayerSpec::dropout(keep_prob),
            };
            layers.push(spec);
            shapes.push(shape.clone());
        }
        Ok(ModelSpec {
            id,
            m,
            n,
            layers,
            shapes,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn keep_prob(&self) -> f64 {
        self.layers
            .iter()
            .find_map(LayerSpec::keep_prob)
            .unwrap_or(1.0)
    }

    /// One line per layer: `<layer> -> <output shape>`.
    pub fn describe(&self) -> String {
        let mut out = format!("{} input 1x{}x{}\n", self.id, self.m, self.n);
        for (layer, shape) in self.layers.iter().zip(&self.shapes) {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            out.push_str(&format!("{layer} -> {}\n", dims.join("x")));
        }
        out
    }
}

pub fn build_cnn_a(m: usize, n: usize) -> Result<ModelSpec> {
    ModelSpec::build(ModelId::CnnA, m, n)
}

pub fn build_cnn_b(m: usize, n: usize) -> Result<ModelSpec> {
    ModelSpec::build(ModelId::CnnB, m, n)
}

pub fn build_cnn_c(m: usize, n: usize) -> Result<ModelSpec> {
    ModelSpec::build(ModelId::CnnC, m, n)
}

/// Class decision and the unscaled softmax outputs `[NO_SEG, SEG]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub probs: [f32; 2],
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SbdError::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Scales the `NO_SEG` probability by `alpha` and takes the larger class;
/// exact ties go to `SEG`.
pub fn decide(probs: [f32; 2], alpha: f64) -> Label {
    let no_seg = probs[0] as f64 * alpha;
    if probs[1] as f64 >= no_seg {
        Label::Seg
    } else {
        Label::NoSeg
    }
}

/// An architecture together with its parameters.
#[derive(Debug, Clone)]
pub struct SbdModel {
    spec: ModelSpec,
    net: Network<f32>,
}

impl SbdModel {
    /// Instantiates `spec` with fan-in scaled uniform weights and zero biases
    /// drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| l.instantiate(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let net = Network::new(layers, vec![1, spec.m, spec.n])?;
        Ok(SbdModel { spec, net })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn id(&self) -> ModelId {
        self.spec.id
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    /// Replaces the dropout keep probability, keeping all parameters.
    pub fn set_keep_prob(&mut self, keep_prob: f64) -> Result<()> {
        let rebuilt = ModelSpec::build_with_keep_prob(self.spec.id, self.spec.m, self.spec.n, keep_prob)?;
        for layer in self.net.layers_mut() {
            if let Layer::Dropout(d) = layer {
                *d = Dropout::new(keep_prob)?;
            }
        }
        self.spec = rebuilt;
        Ok(())
    }

    /// Classifies a batch `B x 1 x m x n` in evaluation mode.
    pub fn predict_batch(&self, input: Tensor<f32>, alpha: f64) -> Result<Vec<Prediction>> {
        check_alpha(alpha)?;
        let logits = self.net.infer(input)?;
        let b = logits.shape()[0];
        let labels = vec![0; b];
        let (_, probs) = crate::tensor::softmax_xent(&logits, &labels)?;
        Ok(probs
            .data()
            .chunks_exact(2)
            .map(|p| {
                let probs = [p[0], p[1]];
                Prediction {
                    label: decide(probs, alpha),
                    probs,
                }
            })
            .collect())
    }

    /// Classifies one row-major `m x n` window matrix.
    pub fn predict(&self, window: &[f32], alpha: f64) -> Result<Prediction> {
        let (m, n) = (self.spec.m, self.spec.n);
        if window.len() != m * n {
            return Err(SbdError::Shape(format!(
                "window has {} values, model expects {m}x{n}",
                window.len()
            )));
        }
        let input = Tensor::from_vec(vec![1, 1, m, n], window.to_vec())?;
        Ok(self.predict_batch(input, alpha)?[0])
    }
}

pub fn save_checkpoint<W: Write>(model: &SbdModel, mut sink: W) -> Result<()> {
    let spec = &model.spec;
    let mut buf = Vec::with_capacity(HEADER_LEN + spec.layers.len() * RECORD_LEN + spec.param_count() * 4);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(spec.id.code());
    buf.extend_from_slice(&(spec.m as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.n as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.layers.len() as u32).to_le_bytes());
    for layer in &spec.layers {
        buf.push(layer.kind.code());
        for field in layer.fields {
            buf.extend_from_slice(&field.to_le_bytes());
        }
    }
    for param in model.net.params() {
        for v in param.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let err = |e| SbdError::io("writing checkpoint", e);
    sink.write_all(&buf).map_err(err)?;
    sink.flush().map_err(err)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn load_checkpoint<R: Read>(mut source: R) -> Result<SbdModel> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| SbdError::io("reading checkpoint", e))?;

    if bytes.len() >= 4 && bytes[..4] != CHECKPOINT_MAGIC {
        return Err(SbdError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: bytes[..4].try_into().unwrap(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(SbdError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u32_at(&bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(SbdError::UnsupportedVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let id = ModelId::from_code(bytes[8])
        .ok_or_else(|| SbdError::format(0, format!("unknown model id {}", bytes[8])))?;
    let m = u32_at(&bytes, 9) as usize;
    let n = u32_at(&bytes, 13) as usize;
    let count = u32_at(&bytes, 17) as usize;

    let records_end = HEADER_LEN + count * RECORD_LEN;
    if bytes.len() < records_end {
        return Err(SbdError::Truncated {
            expected: records_end,
            actual: bytes.len(),
        });
    }
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let at = HEADER_LEN + i * RECORD_LEN;
        let kind = LayerKind::from_code(bytes[at])
            .ok_or_else(|| SbdError::format(0, format!("unknown layer kind {} in record {i}", bytes[at])))?;
        let mut fields = [0u32; 5];
        for (j, f) in fields.iter_mut().enumerate() {
            *f = u32_at(&bytes, at + 1 + 4 * j);
        }
        layers.push(LayerSpec { kind, fields });
    }

    let keep_prob = layers
        .iter()
        .find_map(LayerSpec::keep_prob)
        .unwrap_or(DEFAULT_KEEP_PROB);
    let expected_spec = ModelSpec::build_with_keep_prob(id, m, n, keep_prob)?;
    if expected_spec.layers != layers {
        return Err(SbdError::Shape(format!(
            "checkpoint layer records do not describe {id} at ({m}, {n})"
        )));
    }

    let payload_len = expected_spec.param_count() * 4;
    let expected = records_end + payload_len;
    if bytes.len() < expected {
        return Err(SbdError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(SbdError::format(
            0,
            format!("{} trailing bytes after checkpoint payload", bytes.len() - expected),
        ));
    }

    let mut model = SbdModel::new(expected_spec, 0)?;
    let mut at = records_end;
    for param in model.net.params_mut() {
        for v in param.data_mut() {
            *v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            at += 4;
        }
        if !param.all_finite() {
            return Err(SbdError::Numeric("non-finite parameter in checkpoint".into()));
        }
    }
    Ok(model)
}
