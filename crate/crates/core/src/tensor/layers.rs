//! Layer kernels: forward, backward and shape algebra.
//!
//! Shapes carry the batch dimension first. Convolution and pooling work on
//! `B x C x H x W`, dense layers on `B x K`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{shape_err, Scalar, Tensor};
use crate::error::{Result, SbdError};

/// Forward pass mode. Dropout draws its mask from `seed` in training mode
/// and is the identity in evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    MaxPool2d,
    Dense,
    Relu,
    Dropout,
    Flatten,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv2d => 0,
            LayerKind::MaxPool2d => 1,
            LayerKind::Dense => 2,
            LayerKind::Relu => 3,
            LayerKind::Dropout => 4,
            LayerKind::Flatten => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Conv2d,
            1 => LayerKind::MaxPool2d,
            2 => LayerKind::Dense,
            3 => LayerKind::Relu,
            4 => LayerKind::Dropout,
            5 => LayerKind::Flatten,
            _ => return None,
        })
    }
}

fn dims4(op: &str, shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| shape_err(op, format!("expected a 4-d input, got {shape:?}")))
}

fn dims2(op: &str, shape: &[usize]) -> Result<[usize; 2]> {
    shape
        .try_into()
        .map_err(|_| shape_err(op, format!("expected a 2-d input, got {shape:?}")))
}

fn missing_forward(op: &str) -> SbdError {
    SbdError::State(format!("{op}: backward called without a preceding forward pass"))
}

/// Fan-in scaled uniform initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
fn init_uniform<T: Scalar>(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect()
}

/// Valid-padding, stride-1 2-d convolution.
#[derive(Debug, Clone)]
pub struct Conv2d<T = f32> {
    pub in_channels: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    /// `filters x in_channels x kh x kw`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, filters: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * kh * kw;
        let shape = vec![filters, in_channels, kh, kw];
        let weight = Tensor::from_vec(shape.clone(), init_uniform(filters * fan_in, fan_in, rng))
            .expect("conv weight shape");
        Conv2d {
            in_channels,
            filters,
            kh,
            kw,
            weight,
            bias: Tensor::zeros(vec![filters]),
            grad_weight: Tensor::zeros(shape),
            grad_bias: Tensor::zeros(vec![filters]),
            input: None,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [b, c, h, w] = dims4("conv2d", input)?;
        if c != self.in_channels {
            return Err(shape_err(
                "conv2d",
                format!("input {input:?} has {c} channels, layer expects {}", self.in_channels),
            ));
        }
        if h < self.kh || w < self.kw {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {}x{} is larger than input {input:?}",
                    self.kh, self.kw
                ),
            ));
        }
        Ok(vec![b, self.filters, h - self.kh + 1, w - self.kw + 1])
    }

    fn im2col(&self, image: &[T], h: usize, w: usize, col: &mut [T]) {
        let (ho, wo) = (h - self.kh + 1, w - self.kw + 1);
        let p = ho * wo;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &image[c * h * w..(c + 1) * h * w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    for y in 0..ho {
                        let src = &plane[(y + i) * w + j..(y + i) * w + j + wo];
                        dst[y * wo..(y + 1) * wo].copy_from_slice(src);
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im_add(&self, col: &[T], h: usize, w: usize, image: &mut [T]) {
        let (ho, wo) = (h - self.kh + 1, w - self.kw + 1);
        let p = ho * wo;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut image[c * h * w..(c + 1) * h * w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let src = &col[row * p..(row + 1) * p];
                    for y in 0..ho {
                        let dst = &mut plane[(y + i) * w + j..(y + i) * w + j + wo];
                        for (d, s) in dst.iter_mut().zip(&src[y * wo..(y + 1) * wo]) {
                            *d += *s;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn compute(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(input.shape())?;
        let [b, c, h, w] = dims4("conv2d", input.shape())?;
        let (f, p) = (self.filters, out_shape[2] * out_shape[3]);
        let k = c * self.kh * self.kw;
        let mut out = vec![T::zero(); b * f * p];
        let mut col = vec![T::zero(); k * p];
        for bi in 0..b {
            self.im2col(&input.data()[bi * c * h * w..(bi + 1) * c * h * w], h, w, &mut col);
            let out_b = &mut out[bi * f * p..(bi + 1) * f * p];
            for (fi, chunk) in out_b.chunks_exact_mut(p).enumerate() {
                chunk.fill(self.bias.data()[fi]);
            }
            T::gemm_raw(
                f,
                k,
                p,
                self.weight.data(),
                (k as isize, 1),
                &col,
                (p as isize, 1),
                T::one(),
                out_b,
            );
        }
        Tensor::from_vec(out_shape, out)
    }

    fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let input = self.input.take().ok_or_else(|| missing_forward("conv2d"))?;
        let [b, c, h, w] = dims4("conv2d", input.shape())?;
        let out_shape = self.output_shape(input.shape())?;
        if grad.shape() != out_shape.as_slice() {
            return Err(shape_err(
                "conv2d backward",
                format!("gradient {:?} vs output {out_shape:?}", grad.shape()),
            ));
        }
        let (f, p) = (self.filters, out_shape[2] * out_shape[3]);
        let k = c * self.kh * self.kw;
        self.grad_weight.data_mut().fill(T::zero());
        self.grad_bias.data_mut().fill(T::zero());
        let mut grad_input = vec![T::zero(); input.len()];
        let mut col = vec![T::zero(); k * p];
        let mut dcol = vec![T::zero(); k * p];
        for bi in 0..b {
            let image = &input.data()[bi * c * h * w..(bi + 1) * c * h * w];
            self.im2col(image, h, w, &mut col);
            let dout = &grad.data()[bi * f * p..(bi + 1) * f * p];
            // dW += dOut * col^T
            T::gemm_raw(
                f,
                p,
                k,
                dout,
                (p as isize, 1),
                &col,
                (1, p as isize),
                T::one(),
                self.grad_weight.data_mut(),
            );
            for (gb, chunk) in self.grad_bias.data_mut().iter_mut().zip(dout.chunks_exact(p)) {
                *gb += chunk.iter().copied().sum::<T>();
            }
            // dcol = W^T * dOut
            T::gemm_raw(
                k,
                f,
                p,
                self.weight.data(),
                (1, k as isize),
                dout,
                (p as isize, 1),
                T::zero(),
                &mut dcol,
            );
            self.col2im_add(&dcol, h, w, &mut grad_input[bi * c * h * w..(bi + 1) * c * h * w]);
        }
        Tensor::from_vec(input.shape().to_vec(), grad_input)
    }
}

/// 2-d max pooling without padding. Trailing rows/columns not covered by a
/// whole window are ignored.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kh: usize, kw: usize, sh: usize, sw: usize) -> Result<Self> {
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(SbdError::Config(format!(
                "pool kernel {kh}x{kw} and stride {sh}x{sw} must be positive"
            )));
        }
        Ok(MaxPool2d {
            kh,
            kw,
            sh,
            sw,
            cache: None,
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [b, c, h, w] = dims4("maxpool2d", input)?;
        if h < self.kh || w < self.kw {
            return Err(shape_err(
                "maxpool2d",
                format!("kernel {}x{} is larger than input {input:?}", self.kh, self.kw),
            ));
        }
        Ok(vec![b, c, (h - self.kh) / self.sh + 1, (w - self.kw) / self.sw + 1])
    }

    // Returns pooled values and the flat input index of each maximum.
    fn compute<T: Scalar>(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let out_shape = self.output_shape(input.shape())?;
        let [b, c, h, w] = dims4("maxpool2d", input.shape())?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let data = input.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, x0) = (oy * self.sh, ox * self.sw);
                    let mut best = base + y0 * w + x0;
                    for i in 0..self.kh {
                        for j in 0..self.kw {
                            let idx = base + (y0 + i) * w + x0 + j;
                            // strict comparison keeps the first maximum
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((Tensor::from_vec(out_shape, out)?, argmax))
    }

    fn backward<T: Scalar>(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let (in_shape, argmax) = self.cache.take().ok_or_else(|| missing_forward("maxpool2d"))?;
        if grad.len() != argmax.len() {
            return Err(shape_err(
                "maxpool2d backward",
                format!("gradient {:?} does not match pooled output", grad.shape()),
            ));
        }
        let mut grad_input = Tensor::zeros(in_shape);
        let gi = grad_input.data_mut();
        for (&idx, &g) in argmax.iter().zip(grad.data()) {
            gi[idx] += g;
        }
        Ok(grad_input)
    }
}

/// Fully connected layer, `out = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Dense<T = f32> {
    pub in_units: usize,
    pub out_units: usize,
    /// `out_units x in_units`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(in_units: usize, out_units: usize, rng: &mut ChaCha8Rng) -> Self {
        let shape = vec![out_units, in_units];
        Dense {
            in_units,
            out_units,
            weight: Tensor::from_vec(shape.clone(), init_uniform(in_units * out_units, in_units, rng))
                .expect("dense weight shape"),
            bias: Tensor::zeros(vec![out_units]),
            grad_weight: Tensor::zeros(shape),
            grad_bias: Tensor::zeros(vec![out_units]),
            input: None,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [b, k] = dims2("dense", input)?;
        if k != self.in_units {
            return Err(shape_err(
                "dense",
                format!("input {input:?} has {k} features, layer expects {}", self.in_units),
            ));
        }
        Ok(vec![b, self.out_units])
    }

    fn compute(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(input.shape())?;
        let (b, k, u) = (out_shape[0], self.in_units, self.out_units);
        let mut out = Vec::with_capacity(b * u);
        for _ in 0..b {
            out.extend_from_slice(self.bias.data());
        }
        T::gemm_raw(
            b,
            k,
            u,
            input.data(),
            (k as isize, 1),
            self.weight.data(),
            (1, k as isize),
            T::one(),
            &mut out,
        );
        Tensor::from_vec(out_shape, out)
    }

    fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let input = self.input.take().ok_or_else(|| missing_forward("dense"))?;
        let (b, k, u) = (input.shape()[0], self.in_units, self.out_units);
        if grad.shape() != [b, u] {
            return Err(shape_err(
                "dense backward",
                format!("gradient {:?} vs output {:?}", grad.shape(), [b, u]),
            ));
        }
        // dW = dOut^T * X
        T::gemm_raw(
            u,
            b,
            k,
            grad.data(),
            (1, u as isize),
            input.data(),
            (k as isize, 1),
            T::zero(),
            self.grad_weight.data_mut(),
        );
        let gb = self.grad_bias.data_mut();
        gb.fill(T::zero());
        for row in grad.data().chunks_exact(u) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += *v;
            }
        }
        let mut grad_input = vec![T::zero(); b * k];
        T::gemm_raw(
            b,
            u,
            k,
            grad.data(),
            (u as isize, 1),
            self.weight.data(),
            (k as isize, 1),
            T::zero(),
            &mut grad_input,
        );
        Tensor::from_vec(vec![b, k], grad_input)
    }
}

/// Inverted dropout.
#[derive(Debug, Clone)]
pub struct Dropout<T = f32> {
    pub keep_prob: f64,
    cache: Option<Option<Vec<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(keep_prob: f64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(SbdError::Config(format!(
                "dropout keep probability must lie in (0, 1], got {keep_prob}"
            )));
        }
        Ok(Dropout {
            keep_prob,
            cache: None,
        })
    }

    fn mask(&self, len: usize, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = T::from_f64_lossy(1.0 / self.keep_prob);
        (0..len)
            .map(|_| {
                if rng.gen_bool(self.keep_prob) {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect()
    }
}

/// Applies dropout outside a network. Evaluation mode and `keep_prob == 1`
/// return the input unchanged.
pub fn dropout<T: Scalar>(input: &Tensor<T>, keep_prob: f64, mode: Mode) -> Result<Tensor<T>> {
    let layer = Dropout::<T>::new(keep_prob)?;
    let mut out = input.clone();
    if let Mode::Train { seed } = mode {
        if keep_prob < 1.0 {
            for (v, m) in out.data_mut().iter_mut().zip(layer.mask(input.len(), seed)) {
                *v *= m;
            }
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// One layer of a sequential stack.
#[derive(Debug, Clone)]
pub enum Layer<T = f32> {
    Conv2d(Conv2d<T>),
    MaxPool2d(MaxPool2d),
    Dense(Dense<T>),
    Relu { mask: Option<Vec<bool>> },
    Dropout(Dropout<T>),
    Flatten { in_shape: Option<Vec<usize>> },
}

impl<T: Scalar> Layer<T> {
    pub fn relu() -> Self {
        Layer::Relu { mask: None }
    }

    pub fn flatten() -> Self {
        Layer::Flatten { in_shape: None }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::MaxPool2d(_) => LayerKind::MaxPool2d,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Relu { .. } => LayerKind::Relu,
            Layer::Dropout(_) => LayerKind::Dropout,
            Layer::Flatten { .. } => LayerKind::Flatten,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(l) => l.output_shape(input),
            Layer::MaxPool2d(l) => l.output_shape(input),
            Layer::Dense(l) => l.output_shape(input),
            Layer::Relu { .. } | Layer::Dropout(_) => Ok(input.to_vec()),
            Layer::Flatten { .. } => flatten_shape(input),
        }
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward(&mut self, input: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => {
                let out = l.compute(&input)?;
                l.input = Some(input);
                Ok(out)
            }
            Layer::MaxPool2d(l) => {
                let (out, argmax) = l.compute(&input)?;
                l.cache = Some((input.shape().to_vec(), argmax));
                Ok(out)
            }
            Layer::Dense(l) => {
                let out = l.compute(&input)?;
                l.input = Some(input);
                Ok(out)
            }
            Layer::Relu { mask } => {
                let mut out = input;
                let mut bits = Vec::with_capacity(out.len());
                for v in out.data_mut() {
                    let on = *v > T::zero();
                    if !on {
                        *v = T::zero();
                    }
                    bits.push(on);
                }
                *mask = Some(bits);
                Ok(out)
            }
            Layer::Dropout(l) => match mode {
                Mode::Train { seed } if l.keep_prob < 1.0 => {
                    let mask = l.mask(input.len(), seed);
                    let mut out = input;
                    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                        *v *= *m;
                    }
                    l.cache = Some(Some(mask));
                    Ok(out)
                }
                _ => {
                    l.cache = Some(None);
                    Ok(input)
                }
            },
            Layer::Flatten { in_shape } => {
                let shape = flatten_shape(input.shape())?;
                *in_shape = Some(input.shape().to_vec());
                input.reshape(shape)
            }
        }
    }

    /// Evaluation-mode forward pass that leaves the layer untouched.
    pub fn infer(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.compute(&input),
            Layer::MaxPool2d(l) => Ok(l.compute(&input)?.0),
            Layer::Dense(l) => l.compute(&input),
            Layer::Relu { .. } => Ok(relu(&input)),
            Layer::Dropout(_) => Ok(input),
            Layer::Flatten { .. } => {
                let shape = flatten_shape(input.shape())?;
                input.reshape(shape)
            }
        }
    }

    /// Propagates `grad` (gradient of the loss w.r.t. this layer's output)
    /// back to the input, storing parameter gradients on the way.
    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.backward(grad),
            Layer::MaxPool2d(l) => l.backward(grad),
            Layer::Dense(l) => l.backward(grad),
            Layer::Relu { mask } => {
                let mask = mask.take().ok_or_else(|| missing_forward("relu"))?;
                if mask.len() != grad.len() {
                    return Err(shape_err("relu backward", "gradient size mismatch"));
                }
                let mut g = grad;
                for (v, on) in g.data_mut().iter_mut().zip(mask) {
                    if !on {
                        *v = T::zero();
                    }
                }
                Ok(g)
            }
            Layer::Dropout(l) => {
                let cache = l.cache.take().ok_or_else(|| missing_forward("dropout"))?;
                let mut g = grad;
                if let Some(mask) = cache {
                    if mask.len() != g.len() {
                        return Err(shape_err("dropout backward", "gradient size mismatch"));
                    }
                    for (v, m) in g.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                Ok(g)
            }
            Layer::Flatten { in_shape } => {
                let shape = in_shape.take().ok_or_else(|| missing_forward("flatten"))?;
                grad.reshape(shape)
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn grads(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv2d(l) => vec![&l.grad_weight, &l.grad_bias],
            Layer::Dense(l) => vec![&l.grad_weight, &l.grad_bias],
            _ => Vec::new(),
        }
    }

    /// Pairs of (parameter, gradient) in storage order: weight, then bias.
    pub fn params_and_grads(&mut self) -> Vec<(&mut Tensor<T>, &Tensor<T>)> {
        match self {
            Layer::Conv2d(l) => vec![(&mut l.weight, &l.grad_weight), (&mut l.bias, &l.grad_bias)],
            Layer::Dense(l) => vec![(&mut l.weight, &l.grad_weight), (&mut l.bias, &l.grad_bias)],
            _ => Vec::new(),
        }
    }

    /// Piecewise-linear branch decisions taken by the last cached forward
    /// pass (ReLU gates and pooling winners).
    pub fn decisions(&self, out: &mut Vec<usize>) {
        match self {
            Layer::Relu { mask: Some(mask) } => out.extend(mask.iter().map(|&b| b as usize)),
            Layer::MaxPool2d(MaxPool2d {
                cache: Some((_, argmax)),
                ..
            }) => out.extend_from_slice(argmax),
            _ => {}
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d(l) => Layer::Conv2d(Conv2d {
                in_channels: l.in_channels,
                filters: l.filters,
                kh: l.kh,
                kw: l.kw,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                grad_weight: l.grad_weight.cast(),
                grad_bias: l.grad_bias.cast(),
                input: None,
            }),
            Layer::MaxPool2d(l) => Layer::MaxPool2d(MaxPool2d {
                cache: None,
                ..l.clone()
            }),
            Layer::Dense(l) => Layer::Dense(Dense {
                in_units: l.in_units,
                out_units: l.out_units,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                grad_weight: l.grad_weight.cast(),
                grad_bias: l.grad_bias.cast(),
                input: None,
            }),
            Layer::Relu { .. } => Layer::Relu { mask: None },
            Layer::Dropout(l) => Layer::Dropout(Dropout {
                keep_prob: l.keep_prob,
                cache: None,
            }),
            Layer::Flatten { .. } => Layer::Flatten { in_shape: None },
        }
    }
}

fn flatten_shape(shape: &[usize]) -> Result<Vec<usize>> {
    match shape.split_first() {
        Some((&b, rest)) if !rest.is_empty() => Ok(vec![b, rest.iter().product()]),
        _ => Err(shape_err("flatten", format!("cannot flatten {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn conv_constant_field() {
        let mut conv = Conv2d::<f64>::new(1, 1, 2, 2, &mut rng());
        conv.weight.data_mut().fill(1.0);
        let input = Tensor::filled(vec![1, 1, 3, 3], 1.0);
        let out = conv.compute(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut conv = Conv2d::<f32>::new(1, 3, 2, 2, &mut rng());
        conv.bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let out = conv.compute(&Tensor::zeros(vec![2, 1, 4, 4])).unwrap();
        for (i, chunk) in out.data().chunks_exact(9).enumerate() {
            assert!(chunk.iter().all(|&v| v == [0.5, -1.0, 2.0][i % 3]));
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng();
        let conv = Conv2d::<f64>::new(2, 3, 2, 3, &mut r);
        let data: Vec<f64> = (0..2 * 2 * 4 * 5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let input = Tensor::from_vec(vec![2, 2, 4, 5], data).unwrap();
        let out = conv.compute(&input).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3, 3]);
        let at = |b: usize, c: usize, y: usize, x: usize| input.data()[((b * 2 + c) * 4 + y) * 5 + x];
        let wt = |f: usize, c: usize, i: usize, j: usize| conv.weight.data()[((f * 2 + c) * 2 + i) * 3 + j];
        for b in 0..2 {
            for f in 0..3 {
                for y in 0..3 {
                    for x in 0..3 {
                        let mut s = conv.bias.data()[f];
                        for c in 0..2 {
                            for i in 0..2 {
                                for j in 0..3 {
                                    s += at(b, c, y + i, x + j) * wt(f, c, i, j);
                                }
                            }
                        }
                        let got = out.data()[((b * 3 + f) * 3 + y) * 3 + x];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shapes() {
        let conv = Conv2d::<f32>::new(1, 64, 2, 4, &mut rng());
        assert_eq!(conv.output_shape(&[1, 1, 5, 300]).unwrap(), [1, 64, 4, 297]);
        let err = conv.output_shape(&[1, 1, 1, 300]).unwrap_err().to_string();
        assert!(err.contains("2x4") && err.contains("[1, 1, 1, 300]"), "{err}");
        assert!(conv.output_shape(&[1, 2, 5, 300]).is_err());
    }

    #[test]
    fn pool_shapes_and_values() {
        let p = MaxPool2d::new(2, 3, 2, 3).unwrap();
        assert_eq!(p.output_shape(&[1, 1, 4, 297]).unwrap(), [1, 1, 2, 99]);
        let q = MaxPool2d::new(2, 3, 1, 3).unwrap();
        assert_eq!(q.output_shape(&[1, 1, 2, 297]).unwrap(), [1, 1, 1, 99]);
        assert!(q.output_shape(&[1, 1, 1, 297]).is_err());

        let (out, _) = p.compute(&Tensor::<f32>::filled(vec![1, 2, 4, 6], 3.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn pool_ties_pick_first() {
        let p = MaxPool2d::new(2, 2, 2, 2).unwrap();
        let input = Tensor::<f32>::from_vec(vec![1, 1, 2, 2], vec![1.0, 5.0, 5.0, 2.0]).unwrap();
        let (out, argmax) = p.compute(&input).unwrap();
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(argmax, [1]);
    }

    #[test]
    fn pool_drops_uncovered_columns() {
        let p = MaxPool2d::new(1, 2, 1, 2).unwrap();
        let input = Tensor::<f32>::from_vec(vec![1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 9.0]).unwrap();
        let (out, _) = p.compute(&input).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut d = Dense::<f64>::new(3, 3, &mut rng());
        d.weight = Tensor::from_vec(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -8.0]).unwrap();
        assert_eq!(d.compute(&x).unwrap().data(), x.data());

        d.weight.data_mut().fill(0.0);
        d.bias.data_mut().copy_from_slice(&[7.0, 8.0, 9.0]);
        assert_eq!(d.compute(&x).unwrap().data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
        assert!(d.output_shape(&[2, 4]).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::<f32>::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&relu(&x)), relu(&x));
        let neg = Tensor::<f32>::filled(vec![4], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::<f32>::filled(vec![100], 2.0);
        assert_eq!(dropout(&x, 0.5, Mode::Eval).unwrap(), x);
        assert_eq!(dropout(&x, 1.0, Mode::Train { seed: 3 }).unwrap(), x);
        assert!(dropout(&x, 0.0, Mode::Eval).is_err());
        assert!(dropout(&x, 1.5, Mode::Eval).is_err());
        let y = dropout(&x, 0.5, Mode::Train { seed: 3 }).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 4.0));
        assert_eq!(y, dropout(&x, 0.5, Mode::Train { seed: 3 }).unwrap());
    }

    #[test]
    fn backward_needs_forward() {
        let mut layers: Vec<Layer<f32>> = vec![
            Layer::Conv2d(Conv2d::new(1, 1, 1, 1, &mut rng())),
            Layer::MaxPool2d(MaxPool2d::new(1, 1, 1, 1).unwrap()),
            Layer::Dense(Dense::new(1, 1, &mut rng())),
            Layer::relu(),
            Layer::Dropout(Dropout::new(0.5).unwrap()),
            Layer::flatten(),
        ];
        for l in &mut layers {
            let err = l.backward(Tensor::zeros(vec![1, 1])).unwrap_err();
            assert!(matches!(err, SbdError::State(_)), "{:?}", l.kind());
        }
    }

    #[test]
    fn pool_backward_conserves_gradient() {
        let mut r = rng();
        let mut layer = Layer::MaxPool2d(MaxPool2d::new(2, 3, 2, 3).unwrap());
        let x: Vec<f64> = (0..2 * 3 * 5 * 10).map(|_| r.gen_range(-1.0..1.0)).collect();
        let out = layer
            .forward(Tensor::from_vec(vec![2, 3, 5, 10], x).unwrap(), Mode::Eval)
            .unwrap();
        let g: Vec<f64> = (0..out.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let total: f64 = g.iter().sum();
        let gi = layer.backward(Tensor::from_vec(out.shape().to_vec(), g).unwrap()).unwrap();
        assert!((gi.sum() - total).abs() < 1e-12);
        assert_eq!(gi.data().iter().filter(|v| **v != 0.0).count(), out.len());
    }

    #[test]
    fn kind_codes_round_trip() {
        for code in 0..6 {
            assert_eq!(LayerKind::from_code(code).unwrap().code(), code);
        }
        assert!(LayerKind::from_code(6).is_none());
    }
}
