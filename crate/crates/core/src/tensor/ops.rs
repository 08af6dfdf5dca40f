//! Elementwise arithmetic, matrix product and reductions on the tape.

use super::gemm::{gemm_acc, transpose};
use super::{Backward, Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    /// `b` has one entry per axis-1 channel; `inner` is the product of axes 2..
    Channel { channels: usize, inner: usize },
}

fn broadcast_form<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if a.rank() >= 2 && b.rank() == 1 && b.len() == a.shape()[1] {
        return Ok(Broadcast::Channel {
            channels: a.shape()[1],
            inner: a.shape()[2..].iter().product(),
        });
    }
    Err(TensorError::ShapeMismatch {
        op: "elementwise",
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    })
}

#[inline]
fn channel_of(i: usize, channels: usize, inner: usize) -> usize {
    (i / inner) % channels
}

struct ElementwiseBackward {
    op: BinaryOp,
    form: Broadcast,
}

impl<T: Scalar> Backward<T> for ElementwiseBackward {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let b_at = |i: usize| match self.form {
            Broadcast::Same => b.data()[i],
            Broadcast::Channel { channels, inner } => b.data()[channel_of(i, channels, inner)],
        };
        let grad_a = match self.op {
            BinaryOp::Add | BinaryOp::Sub => g.clone(),
            BinaryOp::Mul => Tensor::from_parts(
                g.shape().to_vec(),
                g.data().iter().enumerate().map(|(i, &gv)| gv * b_at(i)).collect(),
            ),
        };
        // d(out)/d(b) per element of a, before folding broadcast axes.
        let local = |i: usize, gv: T| match self.op {
            BinaryOp::Add => gv,
            BinaryOp::Sub => -gv,
            BinaryOp::Mul => gv * a.data()[i],
        };
        let grad_b = match self.form {
            Broadcast::Same => Tensor::from_parts(
                g.shape().to_vec(),
                g.data().iter().enumerate().map(|(i, &gv)| local(i, gv)).collect(),
            ),
            Broadcast::Channel { channels, inner } => {
                let mut acc = vec![T::zero(); channels];
                for (i, &gv) in g.data().iter().enumerate() {
                    acc[channel_of(i, channels, inner)] += local(i, gv);
                }
                Tensor::from_parts(vec![channels], acc)
            }
        };
        Ok(vec![Some(grad_a), Some(grad_b)])
    }
}

struct ConstBackward<T> {
    op: BinaryOp,
    c: T,
}

impl<T: Scalar> Backward<T> for ConstBackward<T> {
    fn backward(
        &self,
        g: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(match self.op {
            BinaryOp::Add | BinaryOp::Sub => g.clone(),
            BinaryOp::Mul => g.map(|v| v * self.c),
        })])
    }
}

struct MatmulBackward {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for MatmulBackward {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0], inputs[1]);
        let mut grad_a = vec![T::zero(); m * k];
        gemm_acc(m, n, k, g.data(), &transpose(k, n, b.data()), &mut grad_a);
        let mut grad_b = vec![T::zero(); k * n];
        gemm_acc(k, m, n, &transpose(m, k, a.data()), g.data(), &mut grad_b);
        Ok(vec![
            Some(Tensor::from_parts(vec![m, k], grad_a)),
            Some(Tensor::from_parts(vec![k, n], grad_b)),
        ])
    }
}

/// For every input element, the flat index of the output element it reduces into.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let rank = shape.len();
    let kept: Vec<usize> = (0..rank)
        .map(|d| if axes.contains(&d) { 1 } else { shape[d] })
        .collect();
    let mut out_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        out_strides[d] = if axes.contains(&d) { 0 } else { s };
        s *= kept[d];
    }
    let len: usize = shape.iter().product();
    let mut map = Vec::with_capacity(len);
    let mut coord = vec![0usize; rank];
    for _ in 0..len {
        map.push(coord.iter().zip(&out_strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    let count = axes.iter().map(|&d| shape[d]).product();
    (kept, map, count)
}

struct ReduceBackward {
    map: Vec<usize>,
    scale: f64,
}

impl<T: Scalar> Backward<T> for ReduceBackward {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let scale = T::lit(self.scale);
        let data = self.map.iter().map(|&o| g.data()[o] * scale).collect();
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))])
    }
}

/// Right-hand operand of [`Tape::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Rhs<T> {
    Var(Var),
    Const(T),
}

impl<T: Scalar> Tape<T> {
    /// `a op b` where `b` has `a`'s shape, is a per-channel vector, or is a constant.
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Rhs<T>) -> Result<Var> {
        let av = self.value(a)?;
        match b {
            Rhs::Const(c) => {
                let out = av.map(|v| match op {
                    BinaryOp::Add => v + c,
                    BinaryOp::Sub => v - c,
                    BinaryOp::Mul => v * c,
                });
                self.push_op(out, &[a], ConstBackward { op, c })
            }
            Rhs::Var(b) => {
                let bv = self.value(b)?;
                let form = broadcast_form(av, bv)?;
                let data = av
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let y = match form {
                            Broadcast::Same => bv.data()[i],
                            Broadcast::Channel { channels, inner } => {
                                bv.data()[channel_of(i, channels, inner)]
                            }
                        };
                        match op {
                            BinaryOp::Add => x + y,
                            BinaryOp::Sub => x - y,
                            BinaryOp::Mul => x * y,
                        }
                    })
                    .collect();
                let out = Tensor::from_parts(av.shape().to_vec(), data);
                self.push_op(out, &[a, b], ElementwiseBackward { op, form })
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, Rhs::Var(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, Rhs::Var(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, Rhs::Var(b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, Rhs::Const(c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let [m, k] = av.dims2()?;
        let [k2, n] = bv.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(m, k, n, av.data(), bv.data(), &mut out);
        self.push_op(
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            MatmulBackward { m, k, n },
        )
    }

    /// Sum or mean over `axes`; reduced axes are dropped unless `keep_dims`.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let xv = self.value(x)?;
        if xv.is_empty() {
            return Err(TensorError::Empty);
        }
        let rank = xv.rank();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&axis) = axes.iter().find(|&&d| d >= rank) {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let (kept, map, count) = reduce_map(xv.shape(), &axes);
        let out_len: usize = kept.iter().product();
        let mut out = vec![T::zero(); out_len];
        for (&o, &v) in map.iter().zip(xv.data()) {
            out[o] += v;
        }
        let scale = match op {
            ReduceOp::Sum => 1.0,
            ReduceOp::Mean => 1.0 / count as f64,
        };
        if op == ReduceOp::Mean {
            let s = T::lit(scale);
            out.iter_mut().for_each(|v| *v *= s);
        }
        let shape = if keep_dims {
            kept
        } else {
            xv.shape()
                .iter()
                .enumerate()
                .filter(|(d, _)| !axes.contains(d))
                .map(|(_, &s)| s)
                .collect()
        };
        self.push_op(Tensor::from_parts(shape, out), &[x], ReduceBackward { map, scale })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x)?.rank();
        let axes: Vec<_> = (0..rank).collect();
        self.reduce(ReduceOp::Sum, x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x)?.rank();
        let axes: Vec<_> = (0..rank).collect();
        self.reduce(ReduceOp::Mean, x, &axes, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x)?.reshape(shape)?;
        self.push_op(out, &[x], ReshapeBackward)
    }
}

struct ReshapeBackward;

impl<T: Scalar> Backward<T> for ReshapeBackward {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.reshape(inputs[0].shape())?)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn add_forced_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn scale_by_zero_and_mul_by_ones() {
        let x = random(&[2, 3], 1);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let z = tape.scale(xv, 0.0).unwrap();
        assert!(tape.value(z).unwrap().data().iter().all(|&v| v == 0.0));
        let ones = tape.leaf(x.ones_like());
        let same = tape.mul(xv, ones).unwrap();
        assert_eq!(tape.value(same).unwrap(), &x);
    }

    #[test]
    fn mismatched_shapes_report_both() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[2, 3]).unwrap());
        let b = tape.leaf(Tensor::<f64>::zeros(&[3, 2]).unwrap());
        match tape.add(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn channel_broadcast_add() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[2, 2, 1, 2]).unwrap());
        let b = tape.leaf(t(&[2], &[1.0, 5.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(
            tape.value(c).unwrap().data(),
            &[1.0, 1.0, 5.0, 5.0, 1.0, 1.0, 5.0, 5.0]
        );
    }

    #[test]
    fn matmul_identity_and_forced() {
        let a = random(&[3, 3], 2);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let ev = tape.leaf(eye);
        let p = tape.matmul(av, ev).unwrap();
        assert_eq!(tape.value(p).unwrap(), &a);

        let l = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
        let p = tape.matmul(l, r).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[3.0, 7.0]);
        assert!(tape.matmul(l, av).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 3).cast::<f32>();
        let b = random(&[7, 3], 4).cast::<f32>();
        let mut expected = [0.0f64; 15];
        for i in 0..5 {
            for j in 0..3 {
                for p in 0..7 {
                    expected[i * 3 + j] += a.data()[i * 7 + p] as f64 * b.data()[p * 3 + j] as f64;
                }
            }
        }
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a), tape.leaf(b));
        let p = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.value(p).unwrap().data().iter().zip(expected) {
            assert!(((*got as f64) - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let ones = tape.leaf(Tensor::<f64>::ones(&[2, 3]).unwrap());
        let s = tape.sum_all(ones).unwrap();
        assert_eq!(tape.value(s).unwrap().item().unwrap(), 6.0);

        let c = tape.leaf(Tensor::full(&[3, 4], 2.5).unwrap());
        let m = tape.mean_all(c).unwrap();
        assert!((tape.value(m).unwrap().item().unwrap() - 2.5).abs() < 1e-12);

        let ramp = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64).unwrap();
        let mut oracle = [0.0f64; 2];
        for (c, o) in oracle.iter_mut().enumerate() {
            for p in 0..16 {
                *o += ramp.data()[c * 16 + p];
            }
            *o /= 16.0;
        }
        let r = tape.leaf(ramp);
        let m = tape.reduce(ReduceOp::Mean, r, &[2, 3], false).unwrap();
        assert_eq!(tape.value(m).unwrap().shape(), &[1, 2]);
        assert_eq!(tape.value(m).unwrap().data(), &oracle);
        let k = tape.reduce(ReduceOp::Sum, r, &[2, 3], true).unwrap();
        assert_eq!(tape.value(k).unwrap().shape(), &[1, 2, 1, 1]);
        assert!(matches!(
            tape.reduce(ReduceOp::Sum, r, &[4], false),
            Err(TensorError::AxisOutOfRange { axis: 4, rank: 4 })
        ));
    }

    #[test]
    fn backward_analytic_derivatives() {
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let y = t(&[3], &[4.0, 0.25, -3.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(xv).unwrap().data(), &[2.0, -4.0, 1.0]);

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let yv = tape.leaf(y.clone());
        let p = tape.mul(xv, yv).unwrap();
        let loss = tape.sum_all(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(xv).unwrap(), y);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[2]).unwrap());
        let mut other = Tape::<f64>::new();
        let foreign = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.add(x, foreign), Err(TensorError::ForeignVar)));
        let mut t2 = Tape::<f64>::new();
        let y = t2.leaf(Tensor::ones(&[2]).unwrap());
        assert!(matches!(t2.backward(y), Err(TensorError::NotScalar(_))));
        assert!(matches!(tape.backward(foreign), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn unused_leaves_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[2]).unwrap());
        let unused = tape.leaf(Tensor::<f64>::ones(&[3]).unwrap());
        let loss = tape.sum_all(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(unused).unwrap().data(), &[0.0; 3]);
    }
}
