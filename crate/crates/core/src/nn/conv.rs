use rayon::prelude::*;

use crate::tensor::gemm::{gemm_acc, transpose};
use crate::tensor::{Backward, Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }
    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }
    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Output extent of a convolution along one axis, if positive.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if stride == 0 || span < kernel {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let (k, p) = (g.k, g.pixels());
    for ci in 0..g.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.out_w + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let (k, p) = (g.k, g.pixels());
    for ci in 0..g.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    geom: Geometry,
}

impl<T: Scalar> Backward<T> for Conv2dBackward {
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = self.geom;
        let (x, weight) = (inputs[0], inputs[1]);
        let (patch, pixels) = (g.patch(), g.pixels());
        let weight_t = transpose(g.out_c, patch, weight.data());

        // Per-sample partials, folded in sample order afterwards.
        let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = x
            .data()
            .par_chunks(g.in_len())
            .zip(grad.data().par_chunks(g.out_c * pixels))
            .map(|(xs, gs)| {
                let mut cols = vec![T::zero(); patch * pixels];
                im2col(&g, xs, &mut cols);
                let mut dw = vec![T::zero(); g.out_c * patch];
                gemm_acc(g.out_c, pixels, patch, gs, &transpose(patch, pixels, &cols), &mut dw);
                let db = gs.chunks(pixels).map(|row| row.iter().copied().sum()).collect();
                let mut dcols = vec![T::zero(); patch * pixels];
                gemm_acc(patch, g.out_c, pixels, &weight_t, gs, &mut dcols);
                let mut dx = vec![T::zero(); g.in_len()];
                col2im(&g, &dcols, &mut dx);
                (dx, dw, db)
            })
            .collect();

        let mut dx = Vec::with_capacity(x.len());
        let mut dw = vec![T::zero(); g.out_c * patch];
        let mut db = vec![T::zero(); g.out_c];
        for (pdx, pdw, pdb) in partials {
            dx.extend_from_slice(&pdx);
            dw.iter_mut().zip(&pdw).for_each(|(a, &b)| *a += b);
            db.iter_mut().zip(&pdb).for_each(|(a, &b)| *a += b);
        }
        Ok(vec![
            Some(Tensor::new(x.shape(), dx)?),
            Some(Tensor::new(weight.shape(), dw)?),
            Some(Tensor::new(&[g.out_c], db)?),
        ])
    }
}

/// 2-D cross-correlation (no kernel flip) on an N×C×H×W batch.
///
/// `weight` is O×C×K×K with a square kernel, `bias` has O entries.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (xv, wv, bv) = (tape.value(x)?, tape.value(weight)?, tape.value(bias)?);
    let [n, c, h, w] = xv.dims4()?;
    let [out_c, in_c, kh, kw] = wv.dims4()?;
    if in_c != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: xv.shape().to_vec(),
            right: wv.shape().to_vec(),
        });
    }
    if kh != kw {
        return Err(TensorError::Invalid(format!("conv2d: non-square kernel {kh}×{kw}")));
    }
    if bv.shape() != [out_c] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d bias",
            left: vec![out_c],
            right: bv.shape().to_vec(),
        });
    }
    let (Some(out_h), Some(out_w)) = (
        conv_output_size(h, kh, stride, padding),
        conv_output_size(w, kw, stride, padding),
    ) else {
        return Err(TensorError::Invalid(format!(
            "conv2d: {h}×{w} input too small for kernel {kh} with padding {padding}, stride {stride}"
        )));
    };
    let g = Geometry {
        n,
        c,
        h,
        w,
        out_c,
        k: kh,
        stride,
        pad: padding,
        out_h,
        out_w,
    };
    let (patch, pixels) = (g.patch(), g.pixels());
    let mut out = vec![T::zero(); n * out_c * pixels];
    out.par_chunks_mut(out_c * pixels)
        .zip(xv.data().par_chunks(g.in_len()))
        .for_each(|(os, xs)| {
            let mut cols = vec![T::zero(); patch * pixels];
            im2col(&g, xs, &mut cols);
            for (o, row) in os.chunks_mut(pixels).enumerate() {
                row.fill(bv.data()[o]);
            }
            gemm_acc(out_c, patch, pixels, wv.data(), &cols, os);
        });
    debug_assert_eq!(g.n, n);
    let out = Tensor::new(&[n, out_c, out_h, out_w], out)?;
    tape.push_op(out, &[x, weight, bias], Conv2dBackward { geom: g })
}
