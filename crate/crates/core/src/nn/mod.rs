//! Layer operations: convolution, batch norm, max pooling, ReLU, the linear
//! classifier head and the softmax cross-entropy loss.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod loss;
mod pool;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Result, Scalar, Tensor};

pub use activation::relu;
pub use batchnorm::{batch_norm_infer, batch_norm_train, BatchStats};
pub use conv::{conv2d, conv_output_size};
pub use linear::linear;
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::max_pool2d;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Train or infer behaviour for batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<T: Scalar = f32> {
    /// O×C×K×K.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dParams<T> {
    /// Kaiming-normal weights (std = √(2/fan_in)), zero bias.
    pub fn kaiming<R: Rng>(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        Ok(Self {
            weight: kaiming_normal(&[out_ch, in_ch, kernel, kernel], fan_in, rng)?,
            bias: Tensor::zeros(&[out_ch])?,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            eps: T::lit(BN_EPS),
            momentum: T::lit(BN_MOMENTUM),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving average towards the batch statistics; the variance
    /// uses the unbiased estimate.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        let correction = if stats.count > 1 {
            T::lit(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * correction;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T: Scalar = f32> {
    /// out×in.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn kaiming<R: Rng>(out: usize, input: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: kaiming_normal(&[out, input], input, rng)?,
            bias: Tensor::zeros(&[out])?,
        })
    }
}

fn kaiming_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}
