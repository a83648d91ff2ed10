//! Data plumbing: feature sequences and their on-disk format, dataset
//! manifests, base-feature pooling, synthetic paired data, and music-region
//! detection over class-probability streams.

mod feature_file;
mod pooling;
mod regions;
mod synthetic;

pub use feature_file::{read_features, write_features, FORMAT_VERSION};
pub use pooling::pool_segments;
pub use regions::{detect_music_regions, load_prob_csv, MusicRegion, RegionParams};
pub use synthetic::{generate_synthetic, generate_synthetic_full, SyntheticLatents, SyntheticSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {details}")]
    Format { path: PathBuf, details: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Music,
}

impl Modality {
    pub fn short(self) -> &'static str {
        match self {
            Modality::Visual => "v",
            Modality::Music => "m",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One track in one modality: per-segment base-feature vectors plus timing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub track_id: String,
    pub modality: Modality,
    /// `[segments, feature_dim]`, row per segment.
    pub features: Tensor<f32>,
    /// Segment duration in seconds.
    pub segment_duration: f32,
    pub labels: BTreeMap<String, String>,
}

impl FeatureSequence {
    pub fn new(
        track_id: impl Into<String>,
        modality: Modality,
        features: Tensor<f32>,
        segment_duration: f32,
    ) -> Result<Self, DataError> {
        let seq = FeatureSequence {
            track_id: track_id.into(),
            modality,
            features,
            segment_duration,
            labels: BTreeMap::new(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.features.rank() != 2 {
            return Err(DataError::Invalid(format!(
                "features must be rank 2, got {:?}",
                self.features.shape()
            )));
        }
        if !self.features.is_finite() {
            return Err(DataError::Invalid(format!(
                "track {}: non-finite feature values",
                self.track_id
            )));
        }
        if self.segment_duration <= 0.0 {
            return Err(DataError::Invalid("segment duration must be positive".into()));
        }
        Ok(())
    }

    /// Number of segments.
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature dimensionality.
    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Contiguous sub-sequence of `count` segments starting at `start`.
    pub fn window(&self, start: usize, count: usize) -> FeatureSequence {
        let d = self.dim();
        let data = self.features.data()[start * d..(start + count) * d].to_vec();
        FeatureSequence {
            track_id: self.track_id.clone(),
            modality: self.modality,
            features: Tensor::new(vec![count, d], data).expect("window within bounds"),
            segment_duration: self.segment_duration,
            labels: self.labels.clone(),
        }
    }

    /// Temporal average over all segments.
    pub fn mean_feature(&self) -> Vec<f32> {
        let d = self.dim();
        let n = self.len() as f32;
        let mut out = vec![0.0f32; d];
        for r in 0..self.len() {
            for (o, v) in out.iter_mut().zip(self.features.row(r)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n;
        }
        out
    }
}

/// A (visual, music) pair with matching track id and equal segment counts.
#[derive(Debug, Clone)]
pub struct PairedTrack {
    pub visual: FeatureSequence,
    pub music: FeatureSequence,
}

impl PairedTrack {
    pub fn new(visual: FeatureSequence, music: FeatureSequence) -> Result<Self, DataError> {
        if visual.track_id != music.track_id {
            return Err(DataError::Invalid(format!(
                "pair ids differ: {} vs {}",
                visual.track_id, music.track_id
            )));
        }
        if visual.len() != music.len() {
            return Err(DataError::Invalid(format!(
                "track {}: modality lengths differ ({} vs {})",
                visual.track_id,
                visual.len(),
                music.len()
            )));
        }
        Ok(PairedTrack { visual, music })
    }

    pub fn track_id(&self) -> &str {
        &self.visual.track_id
    }

    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Aligned pairs forming one split of a dataset.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub pairs: Vec<PairedTrack>,
    pub split: Split,
}

impl PairedDataset {
    pub fn new(pairs: Vec<PairedTrack>, split: Split) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if !seen.insert(p.track_id().to_string()) {
                return Err(DataError::Invalid(format!(
                    "duplicate track id in split: {}",
                    p.track_id()
                )));
            }
        }
        Ok(PairedDataset { pairs, split })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Move the last `n_test` pairs into a new test split.
    pub fn split_off_test(&mut self, n_test: usize) -> Result<PairedDataset, DataError> {
        if n_test >= self.pairs.len() {
            return Err(DataError::Invalid(format!(
                "cannot take {n_test} test tracks from {}",
                self.pairs.len()
            )));
        }
        let test = self.pairs.split_off(self.pairs.len() - n_test);
        PairedDataset::new(test, Split::Test)
    }

    /// Truncate a deterministic random fraction of tracks to `new_len`
    /// segments (both modalities), producing two length classes. Used by the
    /// sequence-length shortcut control.
    pub fn truncate_fraction(&mut self, fraction: f64, new_len: usize, seed: u64) {
        use rand::seq::SliceRandom;
        let n = self.pairs.len();
        let k = ((n as f64) * fraction).floor() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = crate::rng::seeded(seed);
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(k) {
            let p = &mut self.pairs[i];
            if p.len() > new_len {
                p.visual = p.visual.window(0, new_len);
                p.music = p.music.window(0, new_len);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub track_id: String,
    pub visual_path: String,
    pub music_path: String,
    pub duration_s: f32,
    pub split: Split,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

/// Write splits to `dir` as MVPT feature files plus a `manifest.json`.
pub fn save_dataset(dir: &Path, datasets: &[&PairedDataset]) -> Result<(), DataError> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let mut entries = Vec::new();
    for ds in datasets {
        for pair in &ds.pairs {
            let v_rel = format!("features/{}_v.mvpt", pair.track_id());
            let m_rel = format!("features/{}_m.mvpt", pair.track_id());
            write_features(&dir.join(&v_rel), &pair.visual)?;
            write_features(&dir.join(&m_rel), &pair.music)?;
            entries.push(ManifestEntry {
                track_id: pair.track_id().to_string(),
                visual_path: v_rel,
                music_path: m_rel,
                duration_s: pair.len() as f32 * pair.visual.segment_duration,
                split: ds.split,
                labels: pair.visual.labels.clone(),
            });
        }
    }
    let json = serde_json::to_string_pretty(&entries)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

/// Load one split of a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path, split: Split) -> Result<PairedDataset, DataError> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&raw)?;
    let mut pairs = Vec::new();
    for e in entries.into_iter().filter(|e| e.split == split) {
        let mut visual = read_features(&dir.join(&e.visual_path))?;
        let mut music = read_features(&dir.join(&e.music_path))?;
        visual.track_id = e.track_id.clone();
        music.track_id = e.track_id.clone();
        visual.labels = e.labels.clone();
        music.labels = e.labels;
        pairs.push(PairedTrack::new(visual, music)?);
    }
    PairedDataset::new(pairs, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, modality: Modality, len: usize, d: usize) -> FeatureSequence {
        let data: Vec<f32> = (0..len * d).map(|i| i as f32 * 0.1).collect();
        FeatureSequence::new(id, modality, Tensor::new(vec![len, d], data).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn paired_track_rejects_mismatched_lengths() {
        let v = seq("a", Modality::Visual, 3, 2);
        let m = seq("a", Modality::Music, 4, 2);
        assert!(PairedTrack::new(v, m).is_err());
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let p1 = PairedTrack::new(seq("a", Modality::Visual, 3, 2), seq("a", Modality::Music, 3, 2))
            .unwrap();
        let p2 = PairedTrack::new(seq("a", Modality::Visual, 2, 2), seq("a", Modality::Music, 2, 2))
            .unwrap();
        assert!(PairedDataset::new(vec![p1, p2], Split::Train).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut pairs = Vec::new();
        for i in 0..3 {
            let mut v = seq(&format!("t{i}"), Modality::Visual, 4, 3);
            v.labels.insert("genre".into(), format!("g{i}"));
            let mut m = seq(&format!("t{i}"), Modality::Music, 4, 2);
            m.labels.insert("genre".into(), format!("g{i}"));
            pairs.push(PairedTrack::new(v, m).unwrap());
        }
        let ds = PairedDataset::new(pairs, Split::Train).unwrap();
        save_dataset(dir.path(), &[&ds]).unwrap();
        let loaded = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.pairs[1].visual, ds.pairs[1].visual);
        assert_eq!(loaded.pairs[2].music, ds.pairs[2].music);
        assert!(load_dataset(dir.path(), Split::Test).unwrap().is_empty());
    }

    #[test]
    fn mean_feature_averages_segments() {
        let f = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = FeatureSequence::new("x", Modality::Visual, f, 1.0).unwrap();
        assert_eq!(s.mean_feature(), vec![2.0, 3.0]);
    }

    #[test]
    fn truncate_fraction_creates_two_length_classes() {
        let pairs: Vec<PairedTrack> = (0..10)
            .map(|i| {
                PairedTrack::new(
                    seq(&format!("t{i}"), Modality::Visual, 8, 2),
                    seq(&format!("t{i}"), Modality::Music, 8, 2),
                )
                .unwrap()
            })
            .collect();
        let mut ds = PairedDataset::new(pairs, Split::Train).unwrap();
        ds.truncate_fraction(0.5, 3, 42);
        let short = ds.pairs.iter().filter(|p| p.len() == 3).count();
        let long = ds.pairs.iter().filter(|p| p.len() == 8).count();
        assert_eq!((short, long), (5, 5));
    }
}
