//! Slice records, the on-disk dataset layout, preprocessing, augmentation and
//! the synthetic two-domain phantom.

mod augment;
mod layout;
mod phantom;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentSpec};
pub use layout::{load_slice_dataset, write_slice_dataset, DatasetMeta, Manifest, SliceDataset, VolumeEntry};
pub use phantom::{generate_phantom, PhantomData, PhantomSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    pub const ALL: [DomainLabel; 2] = [DomainLabel::Source, DomainLabel::Target];

    pub fn index(self) -> usize {
        match self {
            DomainLabel::Source => 0,
            DomainLabel::Target => 1,
        }
    }

    pub fn one_hot(self) -> [f32; 2] {
        let mut v = [0.0; 2];
        v[self.index()] = 1.0;
        v
    }

    pub fn other(self) -> Self {
        match self {
            DomainLabel::Source => DomainLabel::Target,
            DomainLabel::Target => DomainLabel::Source,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainLabel::Source => "source",
            DomainLabel::Target => "target",
        }
    }
}

impl std::fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Deterministic volume-to-split assignment: the last fifth of the volumes
    /// is test, the fifth before it validation, the rest training.
    pub fn for_volume(index: usize, num_volumes: usize) -> Split {
        let n_test = if num_volumes >= 2 { (num_volumes / 5).max(1) } else { 0 };
        let n_val = if num_volumes >= 3 { (num_volumes / 5).max(1) } else { 0 };
        if index >= num_volumes - n_test {
            Split::Test
        } else if index >= num_volumes - n_test - n_val {
            Split::Val
        } else {
            Split::Train
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation("split", format!("unknown split `{other}`"))),
        }
    }
}

/// One 2D slice with its (optional) label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub image: Array2<f32>,
    /// Label values in `0..=num_classes`; `None` for unlabeled data.
    pub label: Option<Array2<u8>>,
    pub domain: DomainLabel,
    pub volume_id: String,
    pub slice_index: usize,
}

impl SliceRecord {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(label) = &self.label {
            if label.dim() != self.image.dim() {
                return Err(Error::Contract(format!(
                    "{}#{}: image shape {:?} vs label shape {:?}",
                    self.volume_id,
                    self.slice_index,
                    self.image.dim(),
                    label.dim()
                )));
            }
            if let Some(&bad) = label.iter().find(|&&v| v as usize > num_classes) {
                return Err(Error::Contract(format!(
                    "{}#{}: label value {bad} exceeds {num_classes} classes",
                    self.volume_id, self.slice_index
                )));
            }
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "{}#{}: image contains non-finite values",
                self.volume_id, self.slice_index
            )));
        }
        Ok(())
    }
}

/// A single-domain stack of images, shape (batch, channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub images: Array4<f32>,
    pub domain: DomainLabel,
}

impl ImageBatch {
    pub fn from_records(records: &[&SliceRecord]) -> Result<(Self, Option<Array3<u8>>)> {
        let first = records
            .first()
            .ok_or_else(|| Error::Contract("cannot batch zero records".into()))?;
        let (h, w) = first.image.dim();
        let domain = first.domain;
        let mut images = Array4::<f32>::zeros((records.len(), 1, h, w));
        let all_labeled = records.iter().all(|r| r.label.is_some());
        let mut labels = all_labeled.then(|| Array3::<u8>::zeros((records.len(), h, w)));
        for (i, r) in records.iter().enumerate() {
            if r.image.dim() != (h, w) {
                return Err(Error::Contract("records in a batch must share a shape".into()));
            }
            images.slice_mut(ndarray::s![i, 0, .., ..]).assign(&r.image);
            if let (Some(dst), Some(src)) = (labels.as_mut(), r.label.as_ref()) {
                dst.slice_mut(ndarray::s![i, .., ..]).assign(src);
            }
        }
        Ok((ImageBatch { images, domain }, labels))
    }
}

/// Per-slice min-max rescale to [-1, 1] (constant slices map to 0), then a
/// centred crop or -1 padding to `size` x `size`.
pub fn preprocess(record: &SliceRecord, size: usize) -> SliceRecord {
    let (min, max) = record
        .image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    let image = if range > 0.0 {
        record.image.mapv(|v| ((v - min) / range) * 2.0 - 1.0)
    } else {
        Array2::zeros(record.image.dim())
    };
    let image = fit(&image, size, -1.0f32);
    let label = record.label.as_ref().map(|l| fit(l, size, 0u8));
    SliceRecord {
        image,
        label,
        domain: record.domain,
        volume_id: record.volume_id.clone(),
        slice_index: record.slice_index,
    }
}

fn fit<T: Copy>(a: &Array2<T>, size: usize, fill: T) -> Array2<T> {
    let (h, w) = a.dim();
    if h == size && w == size {
        return a.clone();
    }
    let mut out = Array2::from_elem((size, size), fill);
    // source offset when cropping, destination offset when padding
    let (sy, dy) = if h >= size { ((h - size) / 2, 0) } else { (0, (size - h) / 2) };
    let (sx, dx) = if w >= size { ((w - size) / 2, 0) } else { (0, (size - w) / 2) };
    for y in 0..h.min(size) {
        for x in 0..w.min(size) {
            out[[y + dy, x + dx]] = a[[y + sy, x + sx]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn record(image: Array2<f32>) -> SliceRecord {
        SliceRecord {
            label: Some(Array2::zeros(image.dim())),
            image,
            domain: DomainLabel::Source,
            volume_id: "v".into(),
            slice_index: 0,
        }
    }

    #[test]
    fn preprocess_maps_endpoints() {
        let r = preprocess(&record(array![[0.0, 100.0], [200.0, 50.0]]), 2);
        assert_eq!(r.image[[0, 0]], -1.0);
        assert_eq!(r.image[[1, 0]], 1.0);
    }

    #[test]
    fn preprocess_constant_slice_is_zero() {
        let r = preprocess(&record(Array2::from_elem((3, 3), 7.0)), 3);
        assert!(r.image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preprocess_affine_value() {
        // (x - min) / (max - min) * 2 - 1 with x = -1, min = -3, max = 1
        let r = preprocess(&record(array![[-3.0, -1.0], [1.0, 0.0]]), 2);
        assert!((r.image[[0, 1]] - 0.0).abs() < 1e-7);
    }

    #[test]
    fn preprocess_crops_and_pads_to_size() {
        let img = Array2::from_shape_fn((6, 6), |(y, x)| (y * 6 + x) as f32);
        let cropped = preprocess(&record(img.clone()), 4);
        assert_eq!(cropped.image.dim(), (4, 4));
        assert_eq!(cropped.label.unwrap().dim(), (4, 4));
        let padded = preprocess(&record(img), 8);
        assert_eq!(padded.image[[0, 0]], -1.0);
        assert_eq!(padded.image[[1, 1]], -1.0);
    }

    #[test]
    fn validate_rejects_out_of_range_label() {
        let mut r = record(Array2::zeros((2, 2)));
        r.label.as_mut().unwrap()[[1, 1]] = 7;
        assert!(matches!(r.validate(2), Err(Error::Contract(_))));
        assert!(r.validate(7).is_ok());
    }

    #[test]
    fn split_assignment_covers_all_splits() {
        let splits: Vec<_> = (0..10).map(|i| Split::for_volume(i, 10)).collect();
        assert_eq!(splits.iter().filter(|s| **s == Split::Train).count(), 6);
        assert_eq!(splits.iter().filter(|s| **s == Split::Val).count(), 2);
        assert_eq!(splits.iter().filter(|s| **s == Split::Test).count(), 2);
        assert_eq!(Split::for_volume(0, 1), Split::Train);
    }
}
