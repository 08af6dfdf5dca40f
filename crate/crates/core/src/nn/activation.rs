use crate::tensor::{Backward, Result, Scalar, Tape, Tensor, Var};

struct ReluBackward;

impl<T: Scalar> Backward<T> for ReluBackward {
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let data = grad
            .data()
            .iter()
            .zip(inputs[0].data())
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect();
        Ok(vec![Some(Tensor::new(grad.shape(), data)?)])
    }
}

/// `max(0, x)`; the subgradient at 0 is 0.
pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let out = tape.value(x)?.map(|v| if v > T::zero() { v } else { T::zero() });
    tape.push_op(out, &[x], ReluBackward)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definition_and_idempotence() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[4], vec![-1.0, 2.0, 0.0, -0.5]).unwrap());
        let y = relu(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 2.0, 0.0, 0.0]);
        let z = relu(&mut tape, y).unwrap();
        assert_eq!(tape.value(z).unwrap(), tape.value(y).unwrap());
    }

    #[test]
    fn gradient_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[4], vec![-1.0, 2.0, 0.0, 0.5]).unwrap());
        let y = relu(&mut tape, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
