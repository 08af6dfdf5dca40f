use crate::tensor::{Backward, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Row-wise softmax of an N×K matrix, max-subtracted.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = logits.dims2()?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    Tensor::new(logits.shape(), out)
}

struct CrossEntropyBackward<T> {
    probs: Tensor<T>,
    labels: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Scalar> Backward<T> for CrossEntropyBackward<T> {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let [n, k] = self.probs.dims2()?;
        let g = grad.data()[0] / T::lit(n as f64);
        let mut d = self.probs.data().to_vec();
        for (i, row) in d.chunks_mut(k).enumerate() {
            let y = self.labels[i];
            row[y] -= T::one();
            let w = self.weights[y] * g;
            row.iter_mut().for_each(|v| *v *= w);
        }
        Ok(vec![Some(Tensor::new(self.probs.shape(), d)?)])
    }
}

/// Mean over the batch of `w[label] · −log softmax(logits)[label]`.
///
/// `class_weights` defaults to all ones.
pub fn softmax_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    class_weights: Option<&[T]>,
) -> Result<Var> {
    let lv = tape.value(logits)?;
    let [n, k] = lv.dims2()?;
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy labels",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(TensorError::LabelOutOfRange { label, classes: k });
    }
    let weights = match class_weights {
        Some(w) if w.len() != k => {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy weights",
                left: vec![k],
                right: vec![w.len()],
            })
        }
        Some(w) => w.to_vec(),
        None => vec![T::one(); k],
    };
    let mut total = T::zero();
    for (row, &y) in lv.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - m).exp()).sum();
        // log-sum-exp minus the target logit, both shifted by the row max
        total += weights[y] * (sum.ln() + (m - row[y]));
    }
    let loss = Tensor::scalar(total / T::lit(n as f64));
    let probs = softmax(lv)?;
    tape.push_op(
        loss,
        &[logits],
        CrossEntropyBackward {
            probs,
            labels: labels.to_vec(),
            weights,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: &[f32], labels: &[usize]) -> f32 {
        let mut tape = Tape::<f32>::new();
        let k = logits.len() / labels.len();
        let l = tape.leaf(Tensor::new(&[labels.len(), k], logits.to_vec()).unwrap());
        let loss = softmax_cross_entropy(&mut tape, l, labels, None).unwrap();
        tape.value(loss).unwrap().item().unwrap()
    }

    #[test]
    fn anchors() {
        assert!((ce(&[0.3, 0.3], &[1]) as f64 - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((ce(&[30.0, -30.0], &[0]) as f64) < 1e-9);
        let want = (1.0f64 + (-2.0f64).exp()).ln();
        assert!((want - 0.126928).abs() < 1e-6);
        assert!((ce(&[1.0, -1.0], &[0]) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label() {
        let mut tape = Tape::<f32>::new();
        let l = tape.leaf(Tensor::zeros(&[1, 2]).unwrap());
        assert!(matches!(
            softmax_cross_entropy(&mut tape, l, &[2], None),
            Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn class_weights_scale_loss() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(&[2, 2]).unwrap());
        let loss = softmax_cross_entropy(&mut tape, l, &[0, 1], Some(&[1.0, 3.0])).unwrap();
        let v = tape.value(loss).unwrap().item().unwrap();
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::<f32>::new(&[2, 2], vec![0.0, 0.0, 5.0, -3.0]).unwrap();
        let p = softmax(&t).unwrap();
        assert_eq!(&p.data()[..2], &[0.5, 0.5]);
        assert!((p.data()[2] + p.data()[3] - 1.0).abs() < 1e-6);
    }
}
