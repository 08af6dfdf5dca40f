//! Grad-CAM over the last parameter layer, plus heatmap overlays.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::data::{resize_plane, BBox};
use crate::model::{Model, ModelError};
use crate::nn::Mode;
use crate::tensor::{ReduceOp, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GradcamError {
    #[error("target class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("expected a 3×{size}×{size} image, got {actual:?}")]
    InputShape { size: usize, actual: Vec<usize> },
    #[error("overlay size mismatch: image {image:?}, heatmap {heatmap}×{heatmap}")]
    SizeMismatch { image: (u32, u32), heatmap: usize },
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f32),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for GradcamError {
    fn from(e: TensorError) -> Self {
        GradcamError::Model(e.into())
    }
}

pub type Result<T, E = GradcamError> = std::result::Result<T, E>;

/// Class-activation map at input resolution, scaled to [0, 1] by the peak of
/// the coarse map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub size: usize,
    /// Row-major, `size × size`.
    pub values: Vec<f32>,
    pub target_class: usize,
    /// Peak of the coarse map before upsampling and scaling; zero means the
    /// map is degenerate and every value is zero.
    pub raw_max: f32,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.size + x]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum()
    }

    /// Share of the total heat inside `bbox`; zero for an all-zero map.
    pub fn mass_fraction(&self, bbox: &BBox) -> f64 {
        let total = self.total();
        if total == 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in bbox.y0 as usize..(bbox.y1 as usize).min(self.size) {
            for x in bbox.x0 as usize..(bbox.x1 as usize).min(self.size) {
                inside += f64::from(self.get(x, y));
            }
        }
        inside / total
    }

    /// `P-HEAT S S`, then one line of space-separated values per row.
    pub fn to_text(&self) -> String {
        let mut out = format!("P-HEAT {0} {0}\n", self.size);
        for row in self.values.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|source| GradcamError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Grad-CAM of `target_class` for one preprocessed image (3×S×S or 1×3×S×S).
pub fn gradcam(model: &Model, image: &Tensor, target_class: usize) -> Result<Heatmap> {
    let classes = model.config.num_classes;
    if target_class >= classes {
        return Err(GradcamError::ClassOutOfRange {
            class: target_class,
            classes,
        });
    }
    let s = model.config.input_size;
    if image.len() != 3 * s * s || !(image.shape() == [3, s, s] || image.shape() == [1, 3, s, s]) {
        return Err(GradcamError::InputShape {
            size: s,
            actual: image.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let input = tape.leaf(image.reshape(&[1, 3, s, s])?);
    let trace = model.forward_on_tape(&mut tape, input, Mode::Infer)?;
    let mut one_hot = Tensor::zeros(&[1, classes])?;
    one_hot.data_mut()[target_class] = 1.0;
    let selector = tape.leaf(one_hot);
    let picked = tape.mul(trace.logits, selector)?;
    let score = tape.reduce(ReduceOp::Sum, picked, &[0, 1], false)?;
    let activations = tape.value(trace.features)?.clone();
    let grads = tape.backward(score)?.wrt(trace.features)?;

    let [_, k, h, w] = activations.dims4()?;
    let plane = h * w;
    let mut raw = vec![0.0f32; plane];
    for ch in 0..k {
        let g = &grads.data()[ch * plane..][..plane];
        let a = &activations.data()[ch * plane..][..plane];
        let alpha = g.iter().sum::<f32>() / plane as f32;
        for (r, &v) in raw.iter_mut().zip(a) {
            *r += alpha * v;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let raw_max = raw.iter().copied().fold(0.0f32, f32::max);
    let values = if raw_max > 0.0 {
        resize_plane(&raw, w, h, s, s)
            .into_iter()
            .map(|v| (v / raw_max).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; s * s]
    };
    Ok(Heatmap {
        size: s,
        values,
        target_class,
        raw_max,
    })
}

/// Blue at 0 through to red at 1.
pub fn colormap(h: f32) -> [f32; 3] {
    let h = h.clamp(0.0, 1.0);
    [255.0 * h, 0.0, 255.0 * (1.0 - h)]
}

/// `out = (1 − alpha·h)·orig + alpha·h·colormap(h)` per pixel.
pub fn overlay(original: &RgbImage, heatmap: &Heatmap, alpha: f32) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GradcamError::Alpha(alpha));
    }
    let s = heatmap.size;
    if original.width() as usize != s || original.height() as usize != s {
        return Err(GradcamError::SizeMismatch {
            image: original.dimensions(),
            heatmap: s,
        });
    }
    Ok(RgbImage::from_fn(s as u32, s as u32, |x, y| {
        let h = heatmap.get(x as usize, y as usize);
        let t = alpha * h;
        if t == 0.0 {
            return *original.get_pixel(x, y);
        }
        let c = colormap(h);
        let o = original.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|i| {
            ((1.0 - t) * f32::from(o[i]) + t * c[i]).round().clamp(0.0, 255.0) as u8
        }))
    }))
}
