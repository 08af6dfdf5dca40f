use image::RgbImage;

use super::{DataError, Result};
use crate::tensor::Tensor;

/// Target side and per-channel means subtracted after scaling to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub channel_means: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            channel_means: [0.0; 3],
        }
    }
}

impl PreprocessConfig {
    pub fn new(target_size: usize, channel_means: [f32; 3]) -> Result<Self> {
        if target_size == 0 || target_size % 8 != 0 {
            return Err(DataError::Invalid(format!(
                "target size {target_size} must be a positive multiple of 8"
            )));
        }
        Ok(Self {
            target_size,
            channel_means,
        })
    }

    /// Resize then normalize.
    pub fn apply(&self, image: &RgbImage) -> Result<Tensor> {
        let resized = resize_bilinear(image, self.target_size)?;
        normalize(&resized, self)
    }
}

/// Bilinear resampling of one row-major plane with half-pixel centres:
/// destination pixel `x` samples source coordinate `(x + 0.5)·sw/dw − 0.5`,
/// clamped to the edge.
pub fn resize_plane(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    assert_eq!(src.len(), sw * sh, "plane length");
    let taps = |d: usize, s: usize| -> Vec<(usize, usize, f32)> {
        (0..d)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(s - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let xs = taps(dw, sw);
    let ys = taps(dh, sh);
    let mut out = Vec::with_capacity(dw * dh);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (&src[y0 * sw..][..sw], &src[y1 * sw..][..sw]);
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

/// Resize to `target`×`target`, rounding back to 8 bits.
pub fn resize_bilinear(image: &RgbImage, target: usize) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < 2 || h < 2 {
        return Err(DataError::InvalidImage(format!("cannot resize a {w}×{h} image")));
    }
    if target == 0 {
        return Err(DataError::Invalid("resize target must be positive".into()));
    }
    if w == target && h == target {
        return Ok(image.clone());
    }
    let raw = image.as_raw();
    let planes: Vec<Vec<f32>> = (0..3)
        .map(|c| {
            let plane: Vec<f32> = raw.iter().skip(c).step_by(3).map(|&v| f32::from(v)).collect();
            resize_plane(&plane, w, h, target, target)
        })
        .collect();
    let mut out = Vec::with_capacity(target * target * 3);
    for i in 0..target * target {
        for plane in &planes {
            out.push(plane[i].round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbImage::from_raw(target as u32, target as u32, out).expect("buffer sized for target"))
}

/// `value/255 − mean[c]`, converted from HWC to a 3×S×S tensor.
pub fn normalize(image: &RgbImage, cfg: &PreprocessConfig) -> Result<Tensor> {
    let s = cfg.target_size;
    if image.width() as usize != s || image.height() as usize != s {
        return Err(DataError::InvalidImage(format!(
            "expected {s}×{s}, got {}×{}",
            image.width(),
            image.height()
        )));
    }
    let raw = image.as_raw();
    let mut data = vec![0.0f32; 3 * s * s];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * s * s + i] = f32::from(px[c]) / 255.0 - cfg.channel_means[c];
        }
    }
    Tensor::new(&[3, s, s], data).map_err(|e| DataError::Invalid(e.to_string()))
}

/// Per-channel mean of `value/255` over every pixel of every image.
pub fn compute_channel_means<'a, I>(images: I) -> Result<[f32; 3]>
where
    I: IntoIterator<Item = &'a RgbImage>,
{
    let mut sums = [0.0f64; 3];
    let mut pixels = 0u64;
    for image in images {
        for px in image.pixels() {
            for c in 0..3 {
                sums[c] += f64::from(px[c]);
            }
        }
        pixels += u64::from(image.width()) * u64::from(image.height());
    }
    if pixels == 0 {
        return Err(DataError::Invalid("channel means of an empty image set".into()));
    }
    Ok(sums.map(|s| (s / 255.0 / pixels as f64) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn identity_and_constant_resize() {
        let img = RgbImage::from_fn(7, 5, |x, y| Rgb([x as u8 * 30, y as u8 * 40, 9]));
        assert_eq!(resize_bilinear(&img, 7).unwrap().dimensions(), (7, 7));
        let square = RgbImage::from_fn(6, 6, |x, y| Rgb([x as u8, y as u8, (x * y) as u8]));
        assert_eq!(resize_bilinear(&square, 6).unwrap(), square);
        let flat = RgbImage::from_pixel(13, 9, Rgb([12, 200, 99]));
        let out = resize_bilinear(&flat, 24).unwrap();
        assert!(out.pixels().all(|p| *p == Rgb([12, 200, 99])));
    }

    #[test]
    fn checkerboard_upsample_matches_hand_weights() {
        let img = RgbImage::from_fn(2, 2, |x, y| if (x + y) % 2 == 0 { Rgb([0; 3]) } else { Rgb([255; 3]) });
        let out = resize_bilinear(&img, 4).unwrap();
        // Source coordinates per output index: 0, 0.25, 0.75, 1 after clamping.
        let f = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let (fx, fy) = (f[x], f[y]);
                let v = 255.0 * (fx * (1.0 - fy) + (1.0 - fx) * fy);
                assert_eq!(out.get_pixel(x as u32, y as u32)[0], (v as f64).round() as u8, "({x},{y})");
            }
        }
        assert_eq!(out.get_pixel(1, 0)[0], 64);
        assert_eq!(out.get_pixel(1, 1)[0], 96);
    }

    #[test]
    fn degenerate_source_rejected() {
        assert!(resize_bilinear(&RgbImage::new(1, 5), 8).is_err());
    }

    #[test]
    fn normalize_forced_values() {
        let cfg = PreprocessConfig::new(8, [0.1, 0.5, 0.9]).unwrap();
        let t = normalize(&RgbImage::from_pixel(8, 8, Rgb([255; 3])), &cfg).unwrap();
        assert_eq!(t.shape(), [3, 8, 8]);
        for c in 0..3 {
            let expect = 1.0 - cfg.channel_means[c];
            assert!(t.data()[c * 64..(c + 1) * 64].iter().all(|&v| (v - expect).abs() < 1e-7));
        }
        let t = normalize(&RgbImage::new(8, 8), &cfg).unwrap();
        assert!((t.data()[64] + 0.5).abs() < 1e-7);
        assert!(normalize(&RgbImage::new(16, 16), &cfg).is_err());
    }

    #[test]
    fn channel_means_cases() {
        assert_eq!(compute_channel_means([&RgbImage::new(4, 4)]).unwrap(), [0.0; 3]);
        let white = RgbImage::from_pixel(4, 4, Rgb([255; 3]));
        assert_eq!(compute_channel_means([&white]).unwrap(), [1.0; 3]);
        assert_eq!(compute_channel_means([&white, &RgbImage::new(4, 4)]).unwrap(), [0.5; 3]);
        assert!(compute_channel_means(std::iter::empty()).is_err());
    }

    #[test]
    fn config_requires_multiple_of_eight() {
        assert!(PreprocessConfig::new(30, [0.0; 3]).is_err());
        assert!(PreprocessConfig::new(32, [0.0; 3]).is_ok());
    }
}
