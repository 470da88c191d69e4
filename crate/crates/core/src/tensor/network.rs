use super::layers::{Layer, Mode};
use super::loss::{softmax_xent, softmax_xent_backward};
use super::optim::{adam_step, AdamState};
use super::{shape_err, Scalar, Tensor};
use crate::error::{Result, SbdError};

/// A sequential stack of layers with a fixed per-sample input shape.
#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    layers: Vec<Layer<T>>,
    sample_shape: Vec<usize>,
    trace: Vec<Vec<usize>>,
    forwarded: bool,
}

fn mix_seed(seed: u64, layer: usize) -> u64 {
    // splitmix64 finaliser over the seed and layer position
    let mut z = seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Scalar> Network<T> {
    /// Validates the whole stack against `sample_shape` (the input shape
    /// without the batch dimension). The error names the first layer that
    /// cannot accept its input.
    pub fn new(layers: Vec<Layer<T>>, sample_shape: Vec<usize>) -> Result<Self> {
        let mut shape: Vec<usize> = std::iter::once(1).chain(sample_shape.iter().copied()).collect();
        let mut trace = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| match e {
                SbdError::Shape(msg) => SbdError::Shape(format!("layer {i} ({:?}): {msg}", layer.kind())),
                other => other,
            })?;
            trace.push(shape[1..].to_vec());
        }
        if shape.len() != 2 {
            return Err(shape_err(
                "network",
                format!("final output {shape:?} is not B x classes"),
            ));
        }
        Ok(Network {
            layers,
            sample_shape,
            trace,
            forwarded: false,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    /// Per-layer output shapes for one sample (batch dimension dropped).
    pub fn shape_trace(&self) -> &[Vec<usize>] {
        &self.trace
    }

    pub fn classes(&self) -> usize {
        self.trace.last().map_or(0, |s| s[0])
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(Tensor::len)
            .sum()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn grads(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.grads()).collect()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().len() != self.sample_shape.len() + 1 || input.shape()[1..] != self.sample_shape[..] {
            return Err(shape_err(
                "network input",
                format!(
                    "got {:?}, expected B x {:?}",
                    input.shape(),
                    self.sample_shape
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass that caches activations for [`Network::backward`].
    pub fn forward(&mut self, input: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(&input)?;
        let mut x = input;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let layer_mode = match mode {
                Mode::Train { seed } => Mode::Train {
                    seed: mix_seed(seed, i),
                },
                Mode::Eval => Mode::Eval,
            };
            x = layer.forward(x, layer_mode)?;
        }
        self.forwarded = true;
        Ok(x)
    }

    /// Evaluation-mode forward pass without caching; usable through `&self`.
    pub fn infer(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(&input)?;
        self.layers.iter().try_fold(input, |x, layer| layer.infer(x))
    }

    /// Back-propagates `grad` (w.r.t. the logits) through the cached pass and
    /// returns the gradient w.r.t. the network input.
    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        if !self.forwarded {
            return Err(SbdError::State(
                "backward called without a preceding forward pass".into(),
            ));
        }
        self.forwarded = false;
        self.layers
            .iter_mut()
            .rev()
            .try_fold(grad, |g, layer| layer.backward(g))
    }

    /// Forward, mean cross-entropy, and backward in one call.
    pub fn loss_and_backward(
        &mut self,
        input: Tensor<T>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<LossOutput<T>> {
        let logits = self.forward(input, mode)?;
        let (loss, probs) = softmax_xent(&logits, labels)?;
        let grad_input = self.backward(softmax_xent_backward(&probs, labels)?)?;
        Ok(LossOutput {
            loss,
            probs,
            grad_input,
        })
    }

    /// Mean cross-entropy of a forward pass, leaving the activation cache
    /// populated so [`Network::decisions`] reflects it.
    pub fn loss(&mut self, input: Tensor<T>, labels: &[usize], mode: Mode) -> Result<T> {
        let logits = self.forward(input, mode)?;
        Ok(softmax_xent(&logits, labels)?.0)
    }

    pub fn adam_step(&mut self, state: &mut AdamState<T>) -> Result<()> {
        adam_step(
            self.layers.iter_mut().flat_map(|l| l.params_and_grads()),
            state,
        )
    }

    /// ReLU gates and pooling winners of the last cached forward pass.
    pub fn decisions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.decisions(&mut out);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.iter().map(Layer::cast).collect(),
            sample_shape: self.sample_shape.clone(),
            trace: self.trace.clone(),
            forwarded: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub probs: Tensor<T>,
    pub grad_input: Tensor<T>,
}
