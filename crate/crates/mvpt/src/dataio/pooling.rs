//! Temporal pooling of frame-level base features into fixed-duration
//! segments: consecutive frames are grouped into bins of
//! `round(segment_duration * fps)` frames and arithmetically averaged;
//! a trailing partial bin is dropped so all segments cover equal time.

use super::{DataError, FeatureSequence, Modality};
use crate::tensor::Tensor;

pub fn pool_segments(
    track_id: impl Into<String>,
    modality: Modality,
    frames: &Tensor<f32>,
    fps: f32,
    segment_duration: f32,
) -> Result<FeatureSequence, DataError> {
    if frames.rank() != 2 {
        return Err(DataError::Invalid(format!(
            "frames must be rank 2, got {:?}",
            frames.shape()
        )));
    }
    if fps <= 0.0 || segment_duration <= 0.0 {
        return Err(DataError::Invalid(
            "fps and segment duration must be positive".into(),
        ));
    }
    let frames_per_bin = (segment_duration * fps).round() as usize;
    if frames_per_bin == 0 {
        return Err(DataError::Invalid(format!(
            "segment duration {segment_duration}s covers no frames at {fps} fps"
        )));
    }
    let n_frames = frames.shape()[0];
    let d = frames.shape()[1];
    let bins = n_frames / frames_per_bin;
    if bins == 0 {
        return Err(DataError::Invalid(format!(
            "{n_frames} frames is fewer than one bin of {frames_per_bin}"
        )));
    }
    let mut data = vec![0.0f32; bins * d];
    let inv = 1.0 / frames_per_bin as f32;
    for b in 0..bins {
        for f in 0..frames_per_bin {
            let row = frames.row(b * frames_per_bin + f);
            for j in 0..d {
                data[b * d + j] += row[j];
            }
        }
        for j in 0..d {
            data[b * d + j] *= inv;
        }
    }
    FeatureSequence::new(
        track_id,
        modality,
        Tensor::new(vec![bins, d], data).expect("consistent bin geometry"),
        segment_duration,
    )
}
