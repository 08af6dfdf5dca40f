//! Flat little-endian checkpoint format with a trailing CRC32.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DRMRSNT1"
//! 8       4     version (u32) = 1
//! 12      40    config: input_size, in_channels, layer count, 3 × layer
//!               channels, num_classes, skip mode (u32 each; 0 = consecutive,
//!               1 = dense), BN eps and momentum (f32 each)
//! 52      12    channel means (3 × f32)
//! 64      4·P   state tensors (f32) in Model::state order
//! end−4   4     CRC32 (IEEE) of every preceding byte
//! ```

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, SkipMode, NUM_PARAMETER_LAYERS};

pub const MAGIC: &[u8; 8] = b"DRMRSNT1";
pub const VERSION: u32 = 1;
/// Serialized config length in bytes.
pub const CONFIG_BYTES: usize = 40;
const HEADER_BYTES: usize = MAGIC.len() + 4 + CONFIG_BYTES + 12;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint")]
    NotCheckpoint,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("refusing to save a model with non-finite parameters")]
    NonFinite,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serialize `model`; identical models give identical bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    if !model.is_finite() || model.channel_means.iter().any(|m| !m.is_finite()) {
        return Err(CheckpointError::NonFinite);
    }
    let cfg = &model.config;
    let mut out = Vec::with_capacity(expected_size(model));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, cfg.input_size);
    put_u32(&mut out, cfg.in_channels);
    put_u32(&mut out, cfg.layer_channels.len());
    for &c in &cfg.layer_channels {
        put_u32(&mut out, c);
    }
    put_u32(&mut out, cfg.num_classes);
    put_u32(&mut out, skip_code(cfg.skip_mode));
    let bn = &model.layers[0].bn;
    out.extend_from_slice(&bn.eps.to_le_bytes());
    out.extend_from_slice(&bn.momentum.to_le_bytes());
    for m in model.channel_means {
        out.extend_from_slice(&m.to_le_bytes());
    }
    for t in model.state() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn skip_code(mode: SkipMode) -> usize {
    match mode {
        SkipMode::Consecutive => 0,
        SkipMode::Dense => 1,
    }
}

/// File size for `model`: header, one f32 per state value, CRC.
pub fn expected_size(model: &Model) -> usize {
    HEADER_BYTES + 4 * model.state().iter().map(|t| t.len()).sum::<usize>() + 4
}

/// Write `model` to `path`, returning the byte count.
pub fn save(model: &Model, path: &Path) -> Result<u64> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(bytes.len() as u64)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| CheckpointError::Malformed(format!("payload ends before byte {end}")))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Validate and decode a checkpoint, returning the model and the stored CRC.
///
/// Checks run in order: magic, version, CRC, then config and lengths; no
/// tensor is built before all of them pass.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, u32)> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) && !bytes.is_empty() {
            CheckpointError::Corrupt(format!("file is only {} bytes", bytes.len()))
        } else {
            CheckpointError::NotCheckpoint
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::NotCheckpoint);
    }
    let Some(version) = bytes.get(8..12) else {
        return Err(CheckpointError::Corrupt(format!("file is only {} bytes", bytes.len())));
    };
    let version = u32::from_le_bytes(version.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Corrupt(format!("file is only {} bytes", bytes.len())));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(CheckpointError::Corrupt(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }

    let mut r = Reader { bytes: payload, pos: 12 };
    let input_size = r.u32()? as usize;
    let in_channels = r.u32()? as usize;
    let layer_count = r.u32()? as usize;
    if layer_count != NUM_PARAMETER_LAYERS {
        return Err(CheckpointError::Malformed(format!(
            "{layer_count} parameter layers, expected {NUM_PARAMETER_LAYERS}"
        )));
    }
    let layer_channels = (0..layer_count)
        .map(|_| r.u32().map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let num_classes = r.u32()? as usize;
    let skip_mode = match r.u32()? {
        0 => SkipMode::Consecutive,
        1 => SkipMode::Dense,
        other => return Err(CheckpointError::Malformed(format!("unknown skip mode {other}"))),
    };
    let (eps, momentum) = (r.f32()?, r.f32()?);
    if !(eps.is_finite() && eps > 0.0 && (0.0..=1.0).contains(&momentum)) {
        return Err(CheckpointError::Malformed(format!("batch norm eps {eps}, momentum {momentum}")));
    }
    let channel_means = [r.f32()?, r.f32()?, r.f32()?];
    let config = ModelConfig {
        input_size,
        in_channels,
        layer_channels,
        num_classes,
        skip_mode,
    };
    let malformed = |e: ModelError| CheckpointError::Malformed(e.to_string());
    config.validate().map_err(malformed)?;
    let mut model = Model::build(config, 0).map_err(malformed)?;

    let expected = expected_size(&model);
    if bytes.len() != expected {
        return Err(CheckpointError::Malformed(format!(
            "{} bytes, but the declared shapes need {expected}",
            bytes.len()
        )));
    }
    for t in model.state_mut() {
        for v in t.data_mut() {
            *v = r.f32()?;
        }
    }
    for layer in &mut model.layers {
        layer.bn.eps = eps;
        layer.bn.momentum = momentum;
    }
    model.channel_means = channel_means;
    if !model.is_finite() || channel_means.iter().any(|m| !m.is_finite()) {
        return Err(CheckpointError::Malformed("non-finite parameter values".into()));
    }
    Ok((model, stored))
}

/// Read and validate a checkpoint file.
pub fn load(path: &Path) -> Result<Model> {
    load_with_crc(path).map(|(m, _)| m)
}

/// Like [`load`], also returning the stored CRC.
pub fn load_with_crc(path: &Path) -> Result<(Model, u32)> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

/// The stored CRC rendered as eight lowercase hex digits.
pub fn model_version(crc: u32) -> String {
    format!("{crc:08x}")
}

/// CRC32 over the little-endian bytes of every state tensor and the channel
/// means; changes whenever any stored value changes.
pub fn parameter_checksum(model: &Model) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for m in model.channel_means {
        h.update(&m.to_le_bytes());
    }
    for t in model.state() {
        for v in t.data() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finalize()
}
