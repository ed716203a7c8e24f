//! Coronary artery calcium (CAC) estimation from frontal chest radiographs.
//!
//! The crate covers the whole workflow: DICOM ingest, the image preprocessing
//! chain, log-domain label transforms, a dense-block convolutional regressor
//! with hand-written backpropagation, diagnostic-accuracy metrics, survival
//! analysis (Kaplan-Meier, log-rank, Cox) and Grad-CAM saliency maps. A seeded
//! synthetic cohort generator stands in for clinical data.

pub mod cli;
pub mod dicom;
pub mod explain;
pub mod fsio;
pub mod image;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod survival;
pub mod synth;

pub use dicom::{
    parse_dicom, to_real_image, write_test_dicom, DicomError, DicomImage, Photometric,
};
pub use image::RealImage;
pub use labels::{LabelError, LabelTransform, TransformedThreshold};
pub use model::{DenseNetConfig, FreezePolicy, ModelParams, TrainConfig};
pub use preprocess::{DatasetStats, InputTensor, PreprocessConfig};
