use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{load_manifest, DataError, Label3, Manifest, Result, Sample};

/// Axis-aligned pixel box; `x1` and `y1` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    /// Grow by `margin` pixels on every side, clipped to a `side`×`side` image.
    pub fn dilate(&self, margin: u32, side: u32) -> BBox {
        BBox {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(side),
            y1: (self.y1 + margin).min(side),
        }
    }

    /// Map onto an image resized from `from` to `to` pixels per side,
    /// rounding outward.
    pub fn rescale(&self, from: u32, to: u32) -> BBox {
        let f = f64::from(to) / f64::from(from);
        let lo = |v: u32| (f64::from(v) * f).floor() as u32;
        let hi = |v: u32| ((f64::from(v) * f).ceil() as u32).min(to);
        BBox {
            x0: lo(self.x0),
            y0: lo(self.y0),
            x1: hi(self.x1),
            y1: hi(self.y1),
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl FromStr for BBox {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let v: Vec<u32> = s
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|e| format!("bad bbox field {t:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match v[..] {
            [x0, y0, x1, y1] if x0 < x1 && y0 < y1 => Ok(BBox { x0, y0, x1, y1 }),
            [_, _, _, _] => Err(format!("empty bbox {s:?}")),
            _ => Err(format!("expected four integers, got {s:?}")),
        }
    }
}

fn background(size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let r = rng.random_range(200.0..235.0);
    let g = r - rng.random_range(35.0..55.0);
    let b = g - rng.random_range(15.0..35.0);
    let (fx, fy) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
    let phase = rng.random_range(0.0..TAU);
    let amp = rng.random_range(3.0..8.0);
    let noise = Normal::new(0.0, 4.0).expect("valid sigma");
    let mut img = RgbImage::new(size, size);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let wave = amp * (fx * f64::from(x) + fy * f64::from(y) + phase).sin();
        let n = noise.sample(rng);
        *px = Rgb([r, g, b].map(|c: f64| (c + wave + n).round().clamp(0.0, 255.0) as u8));
    }
    img
}

/// Paint a dark irregular ellipse and return the box of the painted pixels.
fn paint_lesion(img: &mut RgbImage, rng: &mut ChaCha8Rng) -> BBox {
    let s = f64::from(img.width());
    let cx = rng.random_range(0.35..0.65) * s;
    let cy = rng.random_range(0.35..0.65) * s;
    let a = rng.random_range(0.14..0.24) * s;
    let b = rng.random_range(0.14..0.24) * s;
    let theta = rng.random_range(0.0..TAU);
    let (p3, p5) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    let base = [
        rng.random_range(60.0..100.0),
        rng.random_range(35.0..60.0),
        rng.random_range(20.0..45.0),
    ];
    let noise = Normal::new(0.0, 5.0).expect("valid sigma");
    let (sin, cos) = theta.sin_cos();
    let mut bbox: Option<BBox> = None;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (dx, dy) = (f64::from(x) + 0.5 - cx, f64::from(y) + 0.5 - cy);
            let (u, v) = ((dx * cos + dy * sin) / a, (-dx * sin + dy * cos) / b);
            let rho = u.hypot(v);
            let phi = v.atan2(u);
            let edge = 1.0 + 0.12 * (3.0 * phi + p3).sin() + 0.08 * (5.0 * phi + p5).sin();
            if rho > edge {
                continue;
            }
            let shade = 0.75 + 0.25 * rho / edge;
            let n = noise.sample(rng);
            img.put_pixel(x, y, Rgb(base.map(|c: f64| (c * shade + n).round().clamp(0.0, 255.0) as u8)));
            let b = bbox.get_or_insert(BBox {
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            });
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x + 1);
            b.y1 = b.y1.max(y + 1);
        }
    }
    bbox.expect("lesion centre lies inside the image")
}

/// Generate `n` labelled images: even indices are melanoma with a painted
/// lesion and its box, odd indices are plain skin texture labelled nevus or
/// seborrheic keratosis in turn.
pub fn synth_dataset(n: usize, image_size: u32, seed: u64) -> Result<Vec<Sample>> {
    if n < 8 || n % 2 != 0 {
        return Err(DataError::Invalid(format!("synthetic set size {n} must be even and at least 8")));
    }
    if image_size < 16 {
        return Err(DataError::Invalid(format!("synthetic image size {image_size} is below 16")));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut image = background(image_size, &mut rng);
            let (label, bbox) = match i % 4 {
                0 | 2 => (Label3::Melanoma, Some(paint_lesion(&mut image, &mut rng))),
                1 => (Label3::Nevus, None),
                _ => (Label3::SeborrheicKeratosis, None),
            };
            Sample {
                id: format!("s{seed}_{i:04}"),
                image,
                label,
                bbox,
            }
        })
        .collect())
}

/// Write PNGs, `.bbox` sidecars and `manifest.csv` into `dir`, then load the
/// result back as a manifest.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<Manifest> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    samples.par_iter().try_for_each(|s| {
        let png = dir.join(format!("{}.png", s.id));
        s.image.save(&png).map_err(|source| DataError::Decode {
            path: png.clone(),
            source,
        })?;
        if let Some(b) = s.bbox {
            let path = dir.join(format!("{}.bbox", s.id));
            fs::write(&path, format!("{b}\n")).map_err(io(&path))?;
        }
        Ok::<_, DataError>(())
    })?;
    let csv_path = dir.join("manifest.csv");
    let mut out = String::from("id,label\n");
    for s in samples {
        out.push_str(&format!("{},{}\n", s.id, s.label));
    }
    fs::File::create(&csv_path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(io(&csv_path))?;
    load_manifest(&csv_path, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_samples;

    fn mean_pixel(img: &RgbImage) -> f64 {
        img.as_raw().iter().map(|&v| f64::from(v)).sum::<f64>() / img.as_raw().len() as f64
    }

    #[test]
    fn construction_contract() {
        let set = synth_dataset(64, 32, 7).unwrap();
        assert_eq!(set.len(), 64);
        let positives: Vec<_> = set.iter().filter(|s| s.binary_label() == 1).collect();
        assert_eq!(positives.len(), 32);
        for s in &set {
            assert_eq!(s.image.dimensions(), (32, 32));
            assert_eq!(s.bbox.is_some(), s.binary_label() == 1);
        }
        for s in positives {
            let b = s.bbox.unwrap();
            assert!(b.x1 <= 32 && b.y1 <= 32 && b.width() >= 4 && b.height() >= 4, "{b:?}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(synth_dataset(8, 16, 3).unwrap(), synth_dataset(8, 16, 3).unwrap());
        assert_ne!(synth_dataset(8, 16, 3).unwrap(), synth_dataset(8, 16, 4).unwrap());
    }

    #[test]
    fn lesions_darken_images() {
        let set = synth_dataset(64, 32, 7).unwrap();
        let mean = |label| {
            let v: Vec<f64> = set.iter().filter(|s| s.binary_label() == label).map(|s| mean_pixel(&s.image)).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(1) < mean(0));
    }

    #[test]
    fn preconditions() {
        assert!(synth_dataset(6, 32, 0).is_err());
        assert!(synth_dataset(9, 32, 0).is_err());
        assert!(synth_dataset(8, 15, 0).is_err());
    }

    #[test]
    fn bbox_text_round_trip() {
        let b = BBox { x0: 1, y0: 2, x1: 10, y1: 12 };
        assert_eq!(format!("{b}\n").parse::<BBox>(), Ok(b));
        assert!("1 2 3".parse::<BBox>().is_err());
        assert!("5 5 5 9".parse::<BBox>().is_err());
        assert_eq!(b.dilate(3, 11), BBox { x0: 0, y0: 0, x1: 11, y1: 11 });
        assert_eq!(b.rescale(16, 32), BBox { x0: 2, y0: 4, x1: 20, y1: 24 });
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_dataset(8, 16, 1).unwrap();
        let manifest = write_dataset(&set, dir.path()).unwrap();
        assert_eq!(manifest.counts().positives(), 4);
        let loaded = load_samples(&manifest).unwrap();
        assert_eq!(loaded, set);
        let sidecar = std::fs::read_to_string(dir.path().join("s1_0000.bbox")).unwrap();
        assert!(sidecar.ends_with('\n') && sidecar.split_whitespace().count() == 4);
    }
}
