use crate::tensor::{Backward, Result, Scalar, Tape, Tensor, TensorError, Var};

struct MaxPoolBackward {
    /// Flat input index of each output's maximum.
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolBackward {
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = inputs[0].zeros_like();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            dx.data_mut()[src] += g;
        }
        Ok(vec![Some(dx)])
    }
}

/// 2×2 max pooling with stride 2.
///
/// Spatial dims must be even. Ties resolve to the first element in
/// row-major window order, which is also where the gradient goes.
pub fn max_pool2d<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xv = tape.value(x)?;
    let [n, c, h, w] = xv.dims4()?;
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidShape {
            shape: xv.shape().to_vec(),
            reason: "max pool needs even spatial dims ≥ 2".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = xv.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    tape.push_op(out, &[x], MaxPoolBackward { argmax })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_max() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = max_pool2d(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_halves_resolution() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 4, 6], 0.7).unwrap());
        let y = max_pool2d(&mut tape, x).unwrap();
        let out = tape.value(y).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn tie_gradient_goes_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0).unwrap());
        let y = max_pool2d(&mut tape, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dims_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 4]).unwrap());
        assert!(max_pool2d(&mut tape, x).is_err());
    }
}
