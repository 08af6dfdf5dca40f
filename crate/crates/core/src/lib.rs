//! Residual CNN for binary skin-lesion classification.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! ([`tensor`]), the layer set ([`nn`]), the three-parameter-layer network
//! ([`model`]), dataset handling and augmentation ([`data`]), SGD training
//! ([`train`]), Grad-CAM explanations ([`gradcam`]) and a checksummed binary
//! checkpoint format ([`checkpoint`]).

pub mod checkpoint;
pub mod data;
pub mod gradcam;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
