//! Dataset handling: ISIC-style manifests, preprocessing, augmentation,
//! stratified splitting and a synthetic lesion generator.

mod augment;
mod manifest;
mod preprocess;
mod split;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use image::RgbImage;
use thiserror::Error;

pub use augment::{augment, sample_rng, Augmentation};
pub use manifest::{load_manifest, load_samples, ClassCounts, Manifest, ManifestRow};
pub use preprocess::{
    compute_channel_means, normalize, resize_bilinear, resize_plane, PreprocessConfig,
};
pub use split::split;
pub use synth::{synth_dataset, write_dataset, BBox};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: u64, id: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: u64, label: String },
    #[error("line {line}: no image found for id {id:?} in {dir}")]
    MissingImage { line: u64, id: String, dir: PathBuf },
    #[error("{path}: cannot decode image: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// The three ISIC-2017 diagnosis classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label3 {
    Melanoma,
    SeborrheicKeratosis,
    Nevus,
}

impl Label3 {
    pub const ALL: [Label3; 3] = [Label3::Melanoma, Label3::SeborrheicKeratosis, Label3::Nevus];

    pub fn as_str(self) -> &'static str {
        match self {
            Label3::Melanoma => "melanoma",
            Label3::SeborrheicKeratosis => "seborrheic_keratosis",
            Label3::Nevus => "nevus",
        }
    }

    /// Melanoma is the positive class; both benign classes map to 0.
    pub fn to_binary(self) -> usize {
        match self {
            Label3::Melanoma => 1,
            Label3::SeborrheicKeratosis | Label3::Nevus => 0,
        }
    }
}

pub fn to_binary_label(label: Label3) -> usize {
    label.to_binary()
}

impl fmt::Display for Label3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label3 {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c.to_ascii_lowercase() })
            .collect();
        match norm.as_str() {
            "melanoma" => Ok(Label3::Melanoma),
            "seborrheic_keratosis" => Ok(Label3::SeborrheicKeratosis),
            "nevus" => Ok(Label3::Nevus),
            _ => Err(s.to_string()),
        }
    }
}

/// One labelled image, optionally with a known lesion box (synthetic data).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub label: Label3,
    pub bbox: Option<BBox>,
}

impl Sample {
    pub fn binary_label(&self) -> usize {
        self.label.to_binary()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_conversion() {
        assert_eq!(to_binary_label(Label3::Melanoma), 1);
        assert_eq!(to_binary_label(Label3::Nevus), 0);
        assert_eq!(to_binary_label(Label3::SeborrheicKeratosis), 0);
    }

    #[test]
    fn labels_parse_case_insensitively() {
        assert_eq!("MELANOMA".parse::<Label3>(), Ok(Label3::Melanoma));
        assert_eq!("Seborrheic_Keratosis".parse::<Label3>(), Ok(Label3::SeborrheicKeratosis));
        assert_eq!("seborrheic keratosis".parse::<Label3>(), Ok(Label3::SeborrheicKeratosis));
        assert_eq!(" nevus ".parse::<Label3>(), Ok(Label3::Nevus));
        assert!("basal_cell".parse::<Label3>().is_err());
        for l in Label3::ALL {
            assert_eq!(l.as_str().parse::<Label3>(), Ok(l));
        }
    }
}
