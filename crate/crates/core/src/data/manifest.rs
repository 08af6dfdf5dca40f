use std::collections::HashSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;

use super::synth::BBox;
use super::{DataError, Label3, Result, Sample};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Minimum decoded image side.
pub const MIN_IMAGE_SIDE: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub path: PathBuf,
    pub label: Label3,
}

/// Per-class row counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub melanoma: usize,
    pub seborrheic_keratosis: usize,
    pub nevus: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.melanoma + self.seborrheic_keratosis + self.nevus
    }

    /// Rows with binary label 1.
    pub fn positives(&self) -> usize {
        self.melanoma
    }

    fn add(&mut self, label: Label3) {
        match label {
            Label3::Melanoma => self.melanoma += 1,
            Label3::SeborrheicKeratosis => self.seborrheic_keratosis += 1,
            Label3::Nevus => self.nevus += 1,
        }
    }
}

/// An ordered set of labelled image references with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
    counts: ClassCounts,
}

impl Manifest {
    pub fn from_rows(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut counts = ClassCounts::default();
        for (i, row) in rows.iter().enumerate() {
            if !seen.insert(row.id.as_str()) {
                return Err(DataError::DuplicateId {
                    line: i as u64 + 1,
                    id: row.id.clone(),
                });
            }
            counts.add(row.label);
        }
        Ok(Self { rows, counts })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn counts(&self) -> ClassCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

enum Header {
    /// `id,label`
    Named { id: usize, label: usize },
    /// ISIC-2017 ground truth: `image_id,melanoma,seborrheic_keratosis` with 0/1 flags.
    OneHot {
        id: usize,
        melanoma: usize,
        keratosis: usize,
    },
}

fn parse_header(headers: &csv::StringRecord) -> Option<Header> {
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().trim_start_matches('\u{feff}').eq_ignore_ascii_case(name))
    };
    let id = find("id").or_else(|| find("image_id"));
    match (id, find("label"), find("melanoma"), find("seborrheic_keratosis")) {
        (Some(id), Some(label), _, _) => Some(Header::Named { id, label }),
        (Some(id), None, Some(melanoma), Some(keratosis)) => Some(Header::OneHot {
            id,
            melanoma,
            keratosis,
        }),
        _ => None,
    }
}

fn parse_flag(value: &str, line: u64) -> Result<bool> {
    match value.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(false),
        Ok(v) if v == 1.0 => Ok(true),
        _ => Err(DataError::Row {
            line,
            message: format!("expected 0 or 1, found {value:?}"),
        }),
    }
}

fn field<'r>(record: &'r csv::StringRecord, index: usize, line: u64) -> Result<&'r str> {
    record.get(index).map(str::trim).ok_or_else(|| DataError::Row {
        line,
        message: format!("missing column {}", index + 1),
    })
}

/// Find `<dir>/<id>.png` or `<dir>/<id>.jpg`.
pub fn resolve_image(dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Read a manifest CSV and resolve every image under `image_dir`.
///
/// Line numbers in errors count the header as line 1.
pub fn load_manifest(csv_path: &Path, image_dir: &Path) -> Result<Manifest> {
    let file = File::open(csv_path).map_err(|source| DataError::Io {
        path: csv_path.to_path_buf(),
        source,
    })?;
    let csv_err = |source| DataError::Csv {
        path: csv_path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.is_empty() {
        return Ok(Manifest::default());
    }
    let header = parse_header(&headers).ok_or_else(|| DataError::Row {
        line: 1,
        message: format!("unrecognised header {:?}; expected id,label", headers.iter().collect::<Vec<_>>()),
    })?;

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let (id, label) = match header {
            Header::Named { id, label } => {
                let text = field(&record, label, line)?;
                let label = text.parse::<Label3>().map_err(|label| DataError::UnknownLabel { line, label })?;
                (field(&record, id, line)?, label)
            }
            Header::OneHot {
                id,
                melanoma,
                keratosis,
            } => {
                let mel = parse_flag(field(&record, melanoma, line)?, line)?;
                let sk = parse_flag(field(&record, keratosis, line)?, line)?;
                let label = match (mel, sk) {
                    (true, false) => Label3::Melanoma,
                    (false, true) => Label3::SeborrheicKeratosis,
                    (false, false) => Label3::Nevus,
                    (true, true) => {
                        return Err(DataError::Row {
                            line,
                            message: "both melanoma and seborrheic_keratosis set".into(),
                        })
                    }
                };
                (field(&record, id, line)?, label)
            }
        };
        if id.is_empty() {
            return Err(DataError::Row {
                line,
                message: "empty id".into(),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(DataError::DuplicateId { line, id: id.into() });
        }
        let path = resolve_image(image_dir, id).ok_or_else(|| DataError::MissingImage {
            line,
            id: id.into(),
            dir: image_dir.to_path_buf(),
        })?;
        rows.push(ManifestRow {
            id: id.into(),
            path,
            label,
        });
    }
    Manifest::from_rows(rows)
}

/// Decode one image as 8-bit RGB, dropping any alpha channel.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| DataError::Decode {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    if img.width() < MIN_IMAGE_SIDE || img.height() < MIN_IMAGE_SIDE {
        return Err(DataError::InvalidImage(format!(
            "{}: {}×{} is smaller than {MIN_IMAGE_SIDE}×{MIN_IMAGE_SIDE}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

fn load_bbox(image_path: &Path) -> Result<Option<BBox>> {
    let path = image_path.with_extension("bbox");
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    text.parse::<BBox>()
        .map(Some)
        .map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
}

/// Decode every image of the manifest, in manifest order, picking up any
/// `<id>.bbox` sidecar next to the image.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest
        .rows()
        .par_iter()
        .map(|row| {
            Ok(Sample {
                id: row.id.clone(),
                image: load_image(&row.path)?,
                label: row.label,
                bbox: load_bbox(&row.path)?,
            })
        })
        .collect()
}
