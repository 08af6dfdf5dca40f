use crate::tensor::gemm::{gemm_acc, transpose};
use crate::tensor::{Backward, Result, Scalar, Tape, Tensor, TensorError, Var};

struct LinearBackward {
    n: usize,
    input: usize,
    output: usize,
}

impl<T: Scalar> Backward<T> for LinearBackward {
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, i, o) = (self.n, self.input, self.output);
        let (x, w) = (inputs[0], inputs[1]);
        let mut dx = vec![T::zero(); n * i];
        gemm_acc(n, o, i, grad.data(), w.data(), &mut dx);
        let mut dw = vec![T::zero(); o * i];
        gemm_acc(o, n, i, &transpose(n, o, grad.data()), x.data(), &mut dw);
        let mut db = vec![T::zero(); o];
        for row in grad.data().chunks(o) {
            db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
        Ok(vec![
            Some(Tensor::new(&[n, i], dx)?),
            Some(Tensor::new(&[o, i], dw)?),
            Some(Tensor::new(&[o], db)?),
        ])
    }
}

/// `x·Wᵀ + b` for `x` N×in, `W` out×in, `b` out.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (xv, wv, bv) = (tape.value(x)?, tape.value(weight)?, tape.value(bias)?);
    let [n, input] = xv.dims2()?;
    let [output, w_in] = wv.dims2()?;
    if w_in != input {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            left: xv.shape().to_vec(),
            right: wv.shape().to_vec(),
        });
    }
    if bv.shape() != [output] {
        return Err(TensorError::ShapeMismatch {
            op: "linear bias",
            left: vec![output],
            right: bv.shape().to_vec(),
        });
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| bv.data().iter().copied()).collect();
    gemm_acc(n, input, output, xv.data(), &transpose(output, input, wv.data()), &mut out);
    let out = Tensor::new(&[n, output], out)?;
    tape.push_op(out, &[x, weight, bias], LinearBackward { n, input, output })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::<f32>::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let mut tape = Tape::new();
        let (xv, w, b) = (tape.leaf(x.clone()), tape.leaf(eye), tape.leaf(Tensor::zeros(&[3]).unwrap()));
        let y = linear(&mut tape, xv, w, b).unwrap();
        assert_eq!(tape.value(y).unwrap(), &x);
    }

    #[test]
    fn zero_weights_replicate_bias() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[3, 4]).unwrap());
        let w = tape.leaf(Tensor::zeros(&[2, 4]).unwrap());
        let b = tape.leaf(Tensor::new(&[2], vec![0.25, -1.0]).unwrap());
        let y = linear(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.25, -1.0, 0.25, -1.0, 0.25, -1.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[3, 4]).unwrap());
        let w = tape.leaf(Tensor::zeros(&[2, 5]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]).unwrap());
        assert!(linear(&mut tape, x, w, b).is_err());
    }
}
