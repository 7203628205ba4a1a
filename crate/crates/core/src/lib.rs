//! Event-camera object detection runtime.
//!
//! The pipeline runs event streams through a stacked-histogram encoder, a
//! recurrent convolutional MetaFormer backbone and an anchor-free detection
//! head, and scores the result with a COCO-style mAP evaluator. Backbone
//! blocks carry a multi-branch training form that [`reparam`] collapses into
//! single convolutions for inference.

pub mod backbone;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod event_io;
pub mod fsutil;
pub mod reparam;
pub mod tensor;
pub mod tensor_file;
pub mod weights;

pub use error::{EmfError, Location, Result};
