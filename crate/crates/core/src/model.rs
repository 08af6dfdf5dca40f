//! The three-parameter-layer residual network.
//!
//! Each parameter layer computes `ReLU(MaxPool(BN(Conv3×3(x))) + Proj(x))`
//! where `Proj` is a 1×1 stride-2 convolution, so every layer halves the
//! spatial size. Global average pooling and a linear head produce two logits;
//! index 1 is melanoma.
//!
//! In [`SkipMode::Dense`] layer `i` additionally adds 1×1 projections of the
//! network input and of every layer output before `i - 1` (its own input is
//! already covered by `Proj`), strided down to the layer's output resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{
    self, BatchNormParams, BatchStats, Conv2dParams, LinearParams, Mode,
};
use crate::tensor::{ReduceOp, Scalar, Tape, Tensor, TensorError, Var};

/// Index of the melanoma column in logits and probabilities.
pub const MELANOMA: usize = 1;
pub const NUM_PARAMETER_LAYERS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input must be N×{channels}×{expected}×{expected}, got {actual:?}")]
    InputShape {
        channels: usize,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkipMode {
    /// Each layer's shortcut carries only its own input.
    #[default]
    Consecutive,
    /// Each layer also receives projections of the input and all earlier outputs.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub layer_channels: Vec<usize>,
    pub num_classes: usize,
    pub skip_mode: SkipMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            in_channels: 3,
            layer_channels: vec![16, 32, 64],
            num_classes: 2,
            skip_mode: SkipMode::Consecutive,
        }
    }
}

impl ModelConfig {
    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_layer_channels(mut self, channels: [usize; 3]) -> Self {
        self.layer_channels = channels.to_vec();
        self
    }

    pub fn with_skip_mode(mut self, mode: SkipMode) -> Self {
        self.skip_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.layer_channels.len() != NUM_PARAMETER_LAYERS {
            return bad(format!(
                "expected {NUM_PARAMETER_LAYERS} parameter layers, got {}",
                self.layer_channels.len()
            ));
        }
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return bad(format!("input size {} is not a positive multiple of 8", self.input_size));
        }
        if self.in_channels != 3 {
            return bad(format!("expected 3 input channels, got {}", self.in_channels));
        }
        if self.num_classes != 2 {
            return bad(format!("expected 2 classes, got {}", self.num_classes));
        }
        if self.layer_channels.contains(&0) {
            return bad("layer channel counts must be positive".into());
        }
        Ok(())
    }

    /// Channel count at resolution level `level` (0 = network input).
    fn level_channels(&self, level: usize) -> usize {
        if level == 0 {
            self.in_channels
        } else {
            self.layer_channels[level - 1]
        }
    }

    /// Spatial side of the feature map that feeds the classifier head.
    pub fn feature_size(&self) -> usize {
        self.input_size >> NUM_PARAMETER_LAYERS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayer<T: Scalar = f32> {
    pub conv: Conv2dParams<T>,
    pub bn: BatchNormParams<T>,
    pub skip: Conv2dParams<T>,
    /// Dense mode only: projections from levels `0..index`, in level order.
    pub dense: Vec<Conv2dParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub layers: Vec<ParameterLayer<T>>,
    pub head: LinearParams<T>,
    /// Per-channel means (in `[0,1]` pixel units) subtracted during preprocessing.
    pub channel_means: [f32; 3],
}

/// Everything a taped forward pass produces.
pub struct ForwardTrace<T: Scalar> {
    pub logits: Var,
    /// Post-ReLU output of the last parameter layer (the Grad-CAM target).
    pub features: Var,
    /// Trainable parameters as tape leaves, in [`Model::trainable`] order.
    pub params: Vec<Var>,
    /// Train mode only: one entry per parameter layer.
    pub bn_stats: Vec<BatchStats<T>>,
}

macro_rules! conv_refs {
    ($c:expr, $out:ident) => {
        $out.push(&$c.weight);
        $out.push(&$c.bias);
    };
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(NUM_PARAMETER_LAYERS);
        for i in 0..NUM_PARAMETER_LAYERS {
            let (cin, cout) = (config.level_channels(i), config.layer_channels[i]);
            let conv = Conv2dParams::kaiming(cout, cin, 3, 1, 1, &mut rng)?;
            let bn = BatchNormParams::new(cout)?;
            let skip = Conv2dParams::kaiming(cout, cin, 1, 2, 0, &mut rng)?;
            let dense = match config.skip_mode {
                SkipMode::Consecutive => Vec::new(),
                SkipMode::Dense => (0..i)
                    .map(|level| {
                        let stride = 1 << (i + 1 - level);
                        Conv2dParams::kaiming(cout, config.level_channels(level), 1, stride, 0, &mut rng)
                    })
                    .collect::<Result<_, _>>()?,
            };
            layers.push(ParameterLayer { conv, bn, skip, dense });
        }
        let features = config.layer_channels[NUM_PARAMETER_LAYERS - 1];
        let head = LinearParams::kaiming(config.num_classes, features, &mut rng)?;
        Ok(Self {
            config,
            layers,
            head,
            channel_means: [0.0; 3],
        })
    }

    /// Trainable tensors in canonical order: per layer conv w/b, BN gamma/beta,
    /// skip w/b, dense projections w/b; then head w/b.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            conv_refs!(l.conv, out);
            out.push(&l.bn.gamma);
            out.push(&l.bn.beta);
            conv_refs!(l.skip, out);
            for d in &l.dense {
                conv_refs!(d, out);
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.conv.weight);
            out.push(&mut l.conv.bias);
            out.push(&mut l.bn.gamma);
            out.push(&mut l.bn.beta);
            out.push(&mut l.skip.weight);
            out.push(&mut l.skip.bias);
            for d in &mut l.dense {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Every stored tensor in serialization order: like [`Model::trainable`]
    /// but with BN running mean/var right after gamma/beta.
    pub fn state(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            conv_refs!(l.conv, out);
            out.push(&l.bn.gamma);
            out.push(&l.bn.beta);
            out.push(&l.bn.running_mean);
            out.push(&l.bn.running_var);
            conv_refs!(l.skip, out);
            for d in &l.dense {
                conv_refs!(d, out);
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.conv.weight);
            out.push(&mut l.conv.bias);
            out.push(&mut l.bn.gamma);
            out.push(&mut l.bn.beta);
            out.push(&mut l.bn.running_mean);
            out.push(&mut l.bn.running_var);
            out.push(&mut l.skip.weight);
            out.push(&mut l.skip.bias);
            for d in &mut l.dense {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn state_count(&self) -> usize {
        self.state().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.state().iter().all(|t| t.is_finite())
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |c: &Conv2dParams<T>| Conv2dParams {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            stride: c.stride,
            padding: c.padding,
        };
        Model {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ParameterLayer {
                    conv: conv(&l.conv),
                    bn: BatchNormParams {
                        gamma: l.bn.gamma.cast(),
                        beta: l.bn.beta.cast(),
                        running_mean: l.bn.running_mean.cast(),
                        running_var: l.bn.running_var.cast(),
                        eps: U::lit(l.bn.eps.to_f64_lossy()),
                        momentum: U::lit(l.bn.momentum.to_f64_lossy()),
                    },
                    skip: conv(&l.skip),
                    dense: l.dense.iter().map(conv).collect(),
                })
                .collect(),
            head: LinearParams {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
            channel_means: self.channel_means,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        match shape {
            &[_, c, h, w] if c == self.config.in_channels && h == s && w == s => Ok(()),
            _ => Err(ModelError::InputShape {
                channels: self.config.in_channels,
                expected: s,
                actual: shape.to_vec(),
            }),
        }
    }

    fn conv_leaves(tape: &mut Tape<T>, c: &Conv2dParams<T>, params: &mut Vec<Var>) -> (Var, Var) {
        let w = tape.leaf(c.weight.clone());
        let b = tape.leaf(c.bias.clone());
        params.push(w);
        params.push(b);
        (w, b)
    }

    /// Record parameter layer `index` on the tape.
    ///
    /// `earlier` holds the dense-mode sources (network input, then outputs of
    /// layers `0..index-1`) and must be empty in consecutive mode.
    fn layer_on_tape(
        &self,
        tape: &mut Tape<T>,
        index: usize,
        x: Var,
        earlier: &[Var],
        mode: Mode,
        params: &mut Vec<Var>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let layer = self.layers.get(index).ok_or_else(|| {
            ModelError::InvalidConfig(format!("no parameter layer {index}"))
        })?;
        let expected_sources = match self.config.skip_mode {
            SkipMode::Consecutive => 0,
            SkipMode::Dense => index,
        };
        if earlier.len() != expected_sources {
            return Err(ModelError::InvalidConfig(format!(
                "layer {index} expects {expected_sources} earlier sources, got {}",
                earlier.len()
            )));
        }

        let (cw, cb) = Self::conv_leaves(tape, &layer.conv, params);
        let gamma = tape.leaf(layer.bn.gamma.clone());
        let beta = tape.leaf(layer.bn.beta.clone());
        params.push(gamma);
        params.push(beta);
        let (sw, sb) = Self::conv_leaves(tape, &layer.skip, params);

        let conv = nn::conv2d(tape, x, cw, cb, layer.conv.stride, layer.conv.padding)?;
        let (normed, stats) = match mode {
            Mode::Train => {
                let (y, s) = nn::batch_norm_train(tape, conv, gamma, beta, layer.bn.eps)?;
                (y, Some(s))
            }
            Mode::Infer => (
                nn::batch_norm_infer(
                    tape,
                    conv,
                    gamma,
                    beta,
                    layer.bn.running_mean.data(),
                    layer.bn.running_var.data(),
                    layer.bn.eps,
                )?,
                None,
            ),
        };
        let main = nn::max_pool2d(tape, normed)?;
        let shortcut = nn::conv2d(tape, x, sw, sb, layer.skip.stride, layer.skip.padding)?;
        let mut sum = tape.add(main, shortcut)?;
        for (proj, &src) in layer.dense.iter().zip(earlier) {
            let (pw, pb) = Self::conv_leaves(tape, proj, params);
            let p = nn::conv2d(tape, src, pw, pb, proj.stride, proj.padding)?;
            sum = tape.add(sum, p)?;
        }
        Ok((nn::relu(tape, sum)?, stats))
    }

    /// Full forward pass recorded on `tape`.
    ///
    /// Train mode returns batch statistics instead of updating running stats;
    /// apply them with [`Model::apply_batch_stats`].
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<ForwardTrace<T>> {
        self.check_input(tape.value(input)?.shape())?;
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let mut sources = vec![input];
        let mut x = input;
        for i in 0..NUM_PARAMETER_LAYERS {
            let earlier: &[Var] = match self.config.skip_mode {
                SkipMode::Consecutive => &[],
                SkipMode::Dense => &sources[..i],
            };
            let (y, stats) = self.layer_on_tape(tape, i, x, earlier, mode, &mut params)?;
            bn_stats.extend(stats);
            sources.push(y);
            x = y;
        }
        let pooled = tape.reduce(ReduceOp::Mean, x, &[2, 3], false)?;
        let hw = tape.leaf(self.head.weight.clone());
        let hb = tape.leaf(self.head.bias.clone());
        params.push(hw);
        params.push(hb);
        let logits = nn::linear(tape, pooled, hw, hb)?;
        Ok(ForwardTrace {
            logits,
            features: x,
            params,
            bn_stats,
        })
    }

    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            layer.bn.update_running(s);
        }
    }

    /// Infer-mode logits, N×2.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone());
        let trace = self.forward_on_tape(&mut tape, input, Mode::Infer)?;
        Ok(tape.value(trace.logits)?.clone())
    }

    /// Logits for either mode; train mode updates the BN running statistics.
    pub fn forward_mode(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone());
        let trace = self.forward_on_tape(&mut tape, input, mode)?;
        let logits = tape.value(trace.logits)?.clone();
        self.apply_batch_stats(&trace.bn_stats);
        Ok(logits)
    }

    /// Softmax probabilities, N×2; column [`MELANOMA`] is the melanoma probability.
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(nn::softmax(&self.forward(batch)?)?)
    }

    /// One parameter layer in isolation (running statistics are not updated).
    ///
    /// `earlier` is as for the dense skip mode: the network input followed by
    /// the outputs of layers before `index - 1`; empty in consecutive mode.
    pub fn parameter_layer_forward(
        &self,
        x: &Tensor<T>,
        earlier: &[Tensor<T>],
        index: usize,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let ev: Vec<Var> = earlier.iter().map(|t| tape.leaf(t.clone())).collect();
        let mut params = Vec::new();
        let (y, _) = self.layer_on_tape(&mut tape, index, xv, &ev, mode, &mut params)?;
        Ok(tape.value(y)?.clone())
    }
}

/// Index of the largest entry in each row of an N×K matrix (first on ties).
pub fn argmax_rows<T: Scalar>(m: &Tensor<T>) -> Vec<usize> {
    let k = m.shape().last().copied().unwrap_or(1);
    m.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
