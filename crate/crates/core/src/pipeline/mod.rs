//! End-to-end orchestration: data, inference helpers and the four-method
//! experiment.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod synth;

use crate::error::Result;
use crate::geometry::{Image, LandmarkSet, SegMask};
use crate::heatmap::{decode_scores, encode_landmarks, image_tensor, stack_input};
use crate::network::NetworkInstance;
use crate::tensor::{Scalar, Tensor};

pub use dataset::{load_dataset, write_dataset, Dataset, DatasetManifest, Split};
pub use experiment::{run_four_method_experiment, ExperimentConfig, ExperimentOutcome};
pub use synth::{synth_faces, template_landmarks, SynthSpec};

/// Argmax landmark positions from a landmark network.
pub fn detect_landmarks<T: Scalar>(net: &NetworkInstance<T>, image: &Image) -> Result<LandmarkSet> {
    let scores = net.predict(&image_tensor(image))?;
    let (landmarks, report) = decode_scores(&scores)?;
    if !report.empty_channels.is_empty() {
        log::debug!("flat score channels: {:?}", report.empty_channels);
    }
    Ok(landmarks)
}

/// Per-pixel argmax class; ties go to the lower class index.
pub fn scores_to_mask<T: Scalar>(scores: &Tensor<T>) -> Result<SegMask> {
    let (c, h, w) = scores.dims3()?;
    let plane = h * w;
    let d = scores.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    SegMask::new(w, h, labels)
}

/// Network input for guided segmentation: the image plus heatmaps of
/// `landmarks` with width `sigma`.
pub fn guided_input<T: Scalar>(image: &Image, landmarks: &LandmarkSet, sigma: f64) -> Result<Tensor<T>> {
    let heatmaps = encode_landmarks(landmarks, image.width(), image.height(), sigma)?;
    stack_input(image, &heatmaps)
}

pub fn segment<T: Scalar>(net: &NetworkInstance<T>, input: &Tensor<T>) -> Result<SegMask> {
    scores_to_mask(&net.predict(input)?)
}
