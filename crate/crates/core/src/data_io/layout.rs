//! On-disk dataset layout:
//!
//! ```text
//! <root>/<domain>/<split>/manifest.json
//! <root>/<domain>/<split>/img_<volume>_<idx>.bin   f32 little-endian, row-major
//! <root>/<domain>/<split>/lab_<volume>_<idx>.bin   u8, row-major (labeled sets only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DomainLabel, SliceRecord, Split};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub id: String,
    pub slices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// (height, width) of every slice.
    pub shape: [usize; 2],
    pub num_classes: usize,
    /// (z, y, x) voxel spacing in mm.
    pub spacing_mm: [f64; 3],
    pub domain: DomainLabel,
    pub has_labels: bool,
    /// Volumes in their canonical order.
    pub volumes: Vec<VolumeEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub spacing_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceDataset {
    pub records: Vec<SliceRecord>,
    pub meta: DatasetMeta,
}

impl SliceDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }
}

fn split_dir(root: &Path, domain: DomainLabel, split: Split) -> PathBuf {
    root.join(domain.name()).join(split.name())
}

fn image_file(volume: &str, idx: usize) -> String {
    format!("img_{volume}_{idx}.bin")
}

fn label_file(volume: &str, idx: usize) -> String {
    format!("lab_{volume}_{idx}.bin")
}

/// Load one split. An existing but empty split directory yields an empty
/// dataset; a non-empty directory without a manifest is an error.
pub fn load_slice_dataset(root: &Path, domain: DomainLabel, split: Split) -> Result<SliceDataset> {
    let dir = split_dir(root, domain, split);
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        let empty = fs::read_dir(&dir)
            .map_err(|e| Error::load(&dir, format!("cannot read split directory: {e}")))?
            .next()
            .is_none();
        if empty {
            return Ok(SliceDataset {
                records: Vec::new(),
                meta: DatasetMeta {
                    num_classes: 0,
                    spacing_mm: [1.0; 3],
                },
            });
        }
        return Err(Error::load(&manifest_path, "missing manifest"));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::load(&manifest_path, format!("invalid manifest: {e}")))?;
    if manifest.domain != domain {
        return Err(Error::load(
            &manifest_path,
            format!("manifest is for domain {}, expected {domain}", manifest.domain),
        ));
    }
    let [h, w] = manifest.shape;
    let mut records = Vec::new();
    for vol in &manifest.volumes {
        for idx in 0..vol.slices {
            let img_path = dir.join(image_file(&vol.id, idx));
            let bytes = fs::read(&img_path).map_err(|e| Error::load(&img_path, e.to_string()))?;
            if bytes.len() != h * w * 4 {
                return Err(Error::load(
                    &img_path,
                    format!("expected {} bytes for a {h}x{w} float32 slice, found {}", h * w * 4, bytes.len()),
                ));
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::load(&img_path, format!("non-finite pixel value {v}")));
            }
            let image = Array2::from_shape_vec((h, w), values).expect("length checked");
            let label = if manifest.has_labels {
                let lab_path = dir.join(label_file(&vol.id, idx));
                let bytes = fs::read(&lab_path).map_err(|e| Error::load(&lab_path, e.to_string()))?;
                if bytes.len() != h * w {
                    return Err(Error::load(
                        &lab_path,
                        format!("expected {} bytes for a {h}x{w} label slice, found {}", h * w, bytes.len()),
                    ));
                }
                if let Some(&bad) = bytes.iter().find(|&&v| v as usize > manifest.num_classes) {
                    return Err(Error::load(
                        &lab_path,
                        format!("label value {bad} exceeds num_classes = {}", manifest.num_classes),
                    ));
                }
                Some(Array2::from_shape_vec((h, w), bytes).expect("length checked"))
            } else {
                None
            };
            records.push(SliceRecord {
                image,
                label,
                domain,
                volume_id: vol.id.clone(),
                slice_index: idx,
            });
        }
    }
    Ok(SliceDataset {
        records,
        meta: DatasetMeta {
            num_classes: manifest.num_classes,
            spacing_mm: manifest.spacing_mm,
        },
    })
}

/// Write one split. Volumes keep the order of their first appearance and each
/// volume's slices must be indexed `0..n` without gaps.
pub fn write_slice_dataset(
    root: &Path,
    split: Split,
    records: &[SliceRecord],
    meta: DatasetMeta,
    domain: DomainLabel,
) -> Result<PathBuf> {
    let dir = split_dir(root, domain, split);
    fs::create_dir_all(&dir)?;
    let Some(first) = records.first() else {
        return Ok(dir);
    };
    let (h, w) = first.image.dim();
    let has_labels = records.iter().all(|r| r.label.is_some());

    let mut volumes: Vec<(String, Vec<&SliceRecord>)> = Vec::new();
    for r in records {
        if r.image.dim() != (h, w) {
            return Err(Error::Contract("all slices of a split must share one shape".into()));
        }
        r.validate(meta.num_classes)?;
        match volumes.iter_mut().find(|(id, _)| *id == r.volume_id) {
            Some((_, v)) => v.push(r),
            None => volumes.push((r.volume_id.clone(), vec![r])),
        }
    }
    let mut entries = Vec::with_capacity(volumes.len());
    for (id, mut slices) in volumes {
        slices.sort_by_key(|r| r.slice_index);
        for (expected, r) in slices.iter().enumerate() {
            if r.slice_index != expected {
                return Err(Error::Contract(format!("volume {id} is missing slice {expected}")));
            }
            let mut bytes = Vec::with_capacity(h * w * 4);
            for v in r.image.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(image_file(&id, expected)), bytes)?;
            if has_labels {
                let label = r.label.as_ref().expect("checked");
                fs::write(dir.join(label_file(&id, expected)), label.iter().copied().collect::<Vec<u8>>())?;
            }
        }
        entries.push(VolumeEntry {
            id,
            slices: slices.len(),
        });
    }
    let manifest = Manifest {
        shape: [h, w],
        num_classes: meta.num_classes,
        spacing_mm: meta.spacing_mm,
        domain,
        has_labels,
        volumes: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<SliceRecord> {
        (0..n)
            .map(|i| SliceRecord {
                image: Array2::from_shape_fn((4, 5), |(y, x)| (y * 5 + x + i) as f32 * 0.1),
                label: Some(Array2::from_shape_fn((4, 5), |(y, x)| ((y + x + i) % 3) as u8)),
                domain: DomainLabel::Source,
                volume_id: format!("v{}", i / 5),
                slice_index: i % 5,
            })
            .collect()
    }

    const META: DatasetMeta = DatasetMeta {
        num_classes: 2,
        spacing_mm: [2.0, 1.0, 1.0],
    };

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let recs = records(10);
        write_slice_dataset(dir.path(), Split::Train, &recs, META, DomainLabel::Source).unwrap();
        let loaded = load_slice_dataset(dir.path(), DomainLabel::Source, Split::Train).unwrap();
        assert_eq!(loaded.len(), 10);
        assert_eq!(loaded.records, recs);
        assert_eq!(loaded.meta, META);
    }

    #[test]
    fn empty_split_directory_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("target/val")).unwrap();
        let loaded = load_slice_dataset(dir.path(), DomainLabel::Target, Split::Val).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("source/test");
        fs::create_dir_all(&split).unwrap();
        fs::write(split.join("img_a_0.bin"), [0u8; 4]).unwrap();
        let err = load_slice_dataset(dir.path(), DomainLabel::Source, Split::Test).unwrap_err();
        assert!(err.to_string().contains("missing manifest"), "{err}");
    }

    #[test]
    fn out_of_range_label_names_file_and_value() {
        let dir = tempfile::tempdir().unwrap();
        let recs = records(5);
        let path = write_slice_dataset(dir.path(), Split::Train, &recs, META, DomainLabel::Source).unwrap();
        let mut bytes = fs::read(path.join("lab_v0_3.bin")).unwrap();
        bytes[2] = 7; // num_classes + 5
        fs::write(path.join("lab_v0_3.bin"), bytes).unwrap();
        let err = load_slice_dataset(dir.path(), DomainLabel::Source, Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lab_v0_3.bin") && msg.contains('7'), "{msg}");
    }

    #[test]
    fn truncated_image_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_slice_dataset(dir.path(), Split::Train, &records(5), META, DomainLabel::Source).unwrap();
        fs::write(path.join("img_v0_1.bin"), [0u8; 12]).unwrap();
        assert!(matches!(
            load_slice_dataset(dir.path(), DomainLabel::Source, Split::Train),
            Err(Error::Load { .. })
        ));
    }

    #[test]
    fn unlabeled_split_loads_without_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = records(5);
        recs.iter_mut().for_each(|r| r.label = None);
        let path = write_slice_dataset(dir.path(), Split::Train, &recs, META, DomainLabel::Source).unwrap();
        assert!(!path.join("lab_v0_0.bin").exists());
        let loaded = load_slice_dataset(dir.path(), DomainLabel::Source, Split::Train).unwrap();
        assert!(!loaded.is_labeled());
    }
}
