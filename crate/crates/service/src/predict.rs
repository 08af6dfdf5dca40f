use std::io::Cursor;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use dermresnet::data::{normalize, resize_bilinear, DataError, PreprocessConfig};
use dermresnet::gradcam::{gradcam, overlay, GradcamError};
use dermresnet::model::{argmax_rows, Model, ModelError, MELANOMA};
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability at or above which the label is `"melanoma"`.
pub const THRESHOLD: f32 = 0.5;
/// Heat weight used for the returned overlay.
pub const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub probability_melanoma: f32,
    pub label: String,
    pub model_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap_png: Option<String>,
}

#[derive(Debug, Error)]
pub enum PredictError {
    /// The request body is not a usable image.
    #[error("could not decode image: {0}")]
    Decode(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gradcam(#[from] GradcamError),
    #[error("could not encode overlay: {0}")]
    Encode(image::ImageError),
}

impl From<DataError> for PredictError {
    fn from(e: DataError) -> Self {
        PredictError::Decode(e.to_string())
    }
}

/// Decode image bytes and resize them to the model's input side.
pub fn decode_and_resize(model: &Model, bytes: &[u8]) -> Result<RgbImage, PredictError> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| PredictError::Decode(e.to_string()))?
        .to_rgb8();
    Ok(resize_bilinear(&img, model.config.input_size)?)
}

/// Run the full request pipeline on raw image bytes.
pub fn predict_bytes(
    model: &Model,
    model_version: &str,
    bytes: &[u8],
    cam: bool,
) -> Result<PredictionResponse, PredictError> {
    let resized = decode_and_resize(model, bytes)?;
    let cfg = PreprocessConfig {
        target_size: model.config.input_size,
        channel_means: model.channel_means,
    };
    let input = normalize(&resized, &cfg)?;
    let size = cfg.target_size;
    let batch = input.reshape(&[1, 3, size, size]).map_err(ModelError::from)?;
    let proba = model.predict_proba(&batch)?;
    let p = proba.data()[MELANOMA];
    let heatmap_png = if cam {
        let target = argmax_rows(&proba)[0];
        let heat = gradcam(model, &input, target)?;
        let blended = overlay(&resized, &heat, OVERLAY_ALPHA)?;
        let mut png = Vec::new();
        blended
            .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
            .map_err(PredictError::Encode)?;
        Some(BASE64.encode(png))
    } else {
        None
    };
    Ok(PredictionResponse {
        probability_melanoma: p,
        label: if p >= THRESHOLD { "melanoma" } else { "non_melanoma" }.to_string(),
        model_version: model_version.to_string(),
        heatmap_png,
    })
}
