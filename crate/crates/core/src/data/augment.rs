use image::{imageops, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result};

/// One element of the flip/rotate group, applied as hflip, then vflip, then
/// `quarter_turns` counter-clockwise rotations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        hflip: false,
        vflip: false,
        quarter_turns: 0,
    };

    /// Independent fair flips and a uniform rotation in {0°, 90°, 180°, 270°}.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        }
    }

    pub fn apply(&self, image: &RgbImage) -> Result<RgbImage> {
        if image.width() != image.height() {
            return Err(DataError::InvalidImage(format!(
                "augmentation needs a square image, got {}×{}",
                image.width(),
                image.height()
            )));
        }
        let mut out = image.clone();
        if self.hflip {
            imageops::flip_horizontal_in_place(&mut out);
        }
        if self.vflip {
            imageops::flip_vertical_in_place(&mut out);
        }
        Ok(match self.quarter_turns % 4 {
            0 => out,
            1 => imageops::rotate270(&out),
            2 => imageops::rotate180(&out),
            _ => imageops::rotate90(&out),
        })
    }
}

/// Draw an augmentation from `rng` and apply it.
pub fn augment<R: Rng + ?Sized>(image: &RgbImage, rng: &mut R) -> Result<RgbImage> {
    Augmentation::sample(rng).apply(image)
}

/// Per-sample generator keyed by (seed, sample id, epoch), so results do not
/// depend on the order samples are processed in.
pub fn sample_rng(seed: u64, id: &str, epoch: u64) -> ChaCha8Rng {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0100_0000_01b3;
    let mut h = FNV_OFFSET;
    let bytes = seed
        .to_le_bytes()
        .into_iter()
        .chain(id.bytes())
        .chain([0xff])
        .chain(epoch.to_le_bytes());
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::{any, prop, prop_assert, proptest, Strategy};

    fn distinct(n: u32) -> RgbImage {
        RgbImage::from_fn(n, n, |x, y| Rgb([x as u8, y as u8, (x * n + y) as u8]))
    }

    fn rot(k: u8) -> Augmentation {
        Augmentation {
            quarter_turns: k,
            ..Augmentation::IDENTITY
        }
    }

    fn hflip() -> Augmentation {
        Augmentation {
            hflip: true,
            ..Augmentation::IDENTITY
        }
    }

    #[test]
    fn involutions_and_identities() {
        let img = distinct(5);
        let twice = hflip().apply(&hflip().apply(&img).unwrap()).unwrap();
        assert_eq!(twice, img);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rot(1).apply(&r).unwrap();
        }
        assert_eq!(r, img);
        assert_ne!(rot(1).apply(&img).unwrap(), img);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let img = distinct(3);
        let r = rot(1).apply(&img).unwrap();
        // The top-right corner moves to the top-left.
        assert_eq!(r.get_pixel(0, 0), img.get_pixel(2, 0));
    }

    #[test]
    fn non_square_rejected() {
        assert!(Augmentation::IDENTITY.apply(&RgbImage::new(4, 6)).is_err());
    }

    #[test]
    fn seeded_sequence_replays() {
        let record = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| Augmentation::sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(record(4), record(4));
        assert_ne!(record(4), record(5));
        let img = distinct(6);
        let a = augment(&img, &mut sample_rng(1, "x", 2)).unwrap();
        let b = augment(&img, &mut sample_rng(1, "x", 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_rng_separates_keys() {
        let draw = |seed, id, epoch| sample_rng(seed, id, epoch).random::<u64>();
        assert_ne!(draw(0, "a", 0), draw(0, "a", 1));
        assert_ne!(draw(0, "a", 0), draw(0, "b", 0));
        assert_ne!(draw(0, "a", 0), draw(1, "a", 0));
    }

    fn any_augmentation() -> impl Strategy<Value = Augmentation> {
        (any::<bool>(), any::<bool>(), 0u8..4).prop_map(|(hflip, vflip, quarter_turns)| Augmentation {
            hflip,
            vflip,
            quarter_turns,
        })
    }

    proptest! {
        #[test]
        fn compositions_stay_in_d4(seq in prop::collection::vec(any_augmentation(), 0..12)) {
            let img = distinct(4);
            let group: Vec<RgbImage> = (0..4u8)
                .flat_map(|k| {
                    let turned = rot(k).apply(&img).unwrap();
                    [turned.clone(), hflip().apply(&turned).unwrap()]
                })
                .collect();
            let mut out = img.clone();
            for a in &seq {
                out = a.apply(&out).unwrap();
            }
            prop_assert!(group.contains(&out));
        }
    }
}
