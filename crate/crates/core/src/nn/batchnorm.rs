use crate::tensor::{Backward, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Per-channel statistics of one train-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (divide by count) variance.
    pub var: Vec<T>,
    /// Values per channel: batch × height × width.
    pub count: usize,
}

struct Layout {
    n: usize,
    c: usize,
    inner: usize,
}

fn layout<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Layout> {
    if x.rank() < 2 {
        return Err(TensorError::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "batch norm expects N×C[×H×W]".into(),
        });
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if n == 0 {
        return Err(TensorError::Empty);
    }
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm2d",
                left: x.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    Ok(Layout {
        n,
        c,
        inner: x.shape()[2..].iter().product(),
    })
}

/// Visit the flat indices of channel `ch`.
fn channel_indices(l: &Layout, ch: usize) -> impl Iterator<Item = usize> + '_ {
    (0..l.n).flat_map(move |b| {
        let start = (b * l.c + ch) * l.inner;
        start..start + l.inner
    })
}

struct BatchNormBackward<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    layout: Layout,
    /// Train mode: the batch statistics depend on `x`.
    batch_stats: bool,
}

impl<T: Scalar> Backward<T> for BatchNormBackward<T> {
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let l = &self.layout;
        let gamma = inputs[1].data();
        let dy = grad.data();
        let m = T::lit((l.n * l.inner) as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dgamma = vec![T::zero(); l.c];
        let mut dbeta = vec![T::zero(); l.c];
        for ch in 0..l.c {
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for i in channel_indices(l, ch) {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * self.xhat[i];
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let k = gamma[ch] * self.inv_std[ch];
            if self.batch_stats {
                for i in channel_indices(l, ch) {
                    dx[i] = k / m * (m * dy[i] - sum_dy - self.xhat[i] * sum_dy_xhat);
                }
            } else {
                for i in channel_indices(l, ch) {
                    dx[i] = k * dy[i];
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(inputs[0].shape(), dx)?),
            Some(Tensor::new(&[l.c], dgamma)?),
            Some(Tensor::new(&[l.c], dbeta)?),
        ])
    }
}

fn normalize<T: Scalar>(
    tape: &mut Tape<T>,
    inputs: [Var; 3],
    layout: Layout,
    mean: &[T],
    var: &[T],
    eps: T,
    batch_stats: bool,
) -> Result<Var> {
    let [x, gamma, beta] = inputs;
    let (xv, gv, bv) = (tape.value(x)?, tape.value(gamma)?, tape.value(beta)?);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xv.len()];
    let mut out = vec![T::zero(); xv.len()];
    for ch in 0..layout.c {
        for i in channel_indices(&layout, ch) {
            xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
            out[i] = xhat[i] * gv.data()[ch] + bv.data()[ch];
        }
    }
    let out = Tensor::new(xv.shape(), out)?;
    tape.push_op(
        out,
        &[x, gamma, beta],
        BatchNormBackward {
            xhat,
            inv_std,
            layout,
            batch_stats,
        },
    )
}

/// Train-mode batch norm: normalize with the batch's own per-channel
/// statistics over (batch, spatial) axes.
///
/// The running-statistics update is left to the caller so parameters can stay
/// borrowed immutably during the forward pass.
pub fn batch_norm_train<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: T,
) -> Result<(Var, BatchStats<T>)> {
    let l = layout(tape.value(x)?, tape.value(gamma)?, tape.value(beta)?)?;
    let xv = tape.value(x)?.data();
    let count = l.n * l.inner;
    let mut mean = Vec::with_capacity(l.c);
    let mut var = Vec::with_capacity(l.c);
    for ch in 0..l.c {
        let mu = channel_indices(&l, ch).map(|i| xv[i].to_f64_lossy()).sum::<f64>() / count as f64;
        let v = channel_indices(&l, ch)
            .map(|i| {
                let d = xv[i].to_f64_lossy() - mu;
                d * d
            })
            .sum::<f64>()
            / count as f64;
        mean.push(T::lit(mu));
        var.push(T::lit(v));
    }
    let out = normalize(tape, [x, gamma, beta], l, &mean, &var, eps, true)?;
    Ok((out, BatchStats { mean, var, count }))
}

/// Infer-mode batch norm using stored running statistics.
pub fn batch_norm_infer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Var> {
    let l = layout(tape.value(x)?, tape.value(gamma)?, tape.value(beta)?)?;
    if running_mean.len() != l.c || running_var.len() != l.c {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm2d running stats",
            left: vec![l.c],
            right: vec![running_mean.len(), running_var.len()],
        });
    }
    normalize(tape, [x, gamma, beta], l, running_mean, running_var, eps, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(tape: &mut Tape<f64>, x: Tensor<f64>, c: usize) -> [Var; 3] {
        [
            tape.leaf(x),
            tape.leaf(Tensor::ones(&[c]).unwrap()),
            tape.leaf(Tensor::zeros(&[c]).unwrap()),
        ]
    }

    #[test]
    fn constant_input_gives_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 1, 2, 2], 3.0).unwrap());
        let g = tape.leaf(Tensor::full(&[1], 1.7).unwrap());
        let b = tape.leaf(Tensor::full(&[1], -0.4).unwrap());
        let (y, stats) = batch_norm_train(&mut tape, x, g, b, 1e-5).unwrap();
        assert_eq!(stats.var, vec![0.0]);
        assert!(tape.value(y).unwrap().data().iter().all(|&v| (v + 0.4).abs() < 1e-12));
    }

    #[test]
    fn symmetric_pair() {
        let mut tape = Tape::new();
        let [x, g, b] = leaves(&mut tape, Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap(), 1);
        let (y, _) = batch_norm_train(&mut tape, x, g, b, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let out = tape.value(y).unwrap().data();
        assert!((out[0] + expect).abs() < 1e-12 && (out[1] - expect).abs() < 1e-12);
        assert!((expect - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn infer_with_unit_stats_is_identity() {
        let data: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut tape = Tape::new();
        let [x, g, b] = leaves(&mut tape, Tensor::new(&[1, 2, 2, 2], data.clone()).unwrap(), 2);
        let y = batch_norm_infer(&mut tape, x, g, b, &[0.0, 0.0], &[1.0, 1.0], 1e-5).unwrap();
        for (o, i) in tape.value(y).unwrap().data().iter().zip(&data) {
            assert!((o - i).abs() < 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut tape = Tape::new();
        let [x, g, b] = leaves(&mut tape, Tensor::ones(&[1, 3, 2, 2]).unwrap(), 2);
        assert!(batch_norm_train(&mut tape, x, g, b, 1e-5).is_err());
        assert!(batch_norm_infer(&mut tape, x, g, b, &[0.0; 3], &[1.0; 3], 1e-5).is_err());
    }
}
