//! Two-stage orchestration: style-transfer training, offline translation,
//! segmentation training, checkpointing and the ablation harness.

pub mod ablation;
pub mod checkpoint;
pub mod config;
mod stage1;
mod stage2;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use ablation::{run_ablation, AblationRow, AblationTable};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, RngState, Stage};
pub use config::{parse_config, resolve_config, Component, TrainConfig};
pub use stage1::{restore_synthesis, train_stage1, translate_dataset, translate_dataset_on_disk, Stage1Output};
pub use stage2::{predict_slices, restore_segmentation, train_stage2, Stage2Data, Stage2Output};

use crate::data_io::{augment, AugmentSpec, ImageBatch, SliceRecord};
use crate::error::{Error, Result};

pub const LOSS_CSV_HEADER: &str = "iter,term,value";

/// Polynomial learning-rate decay: `base_lr * (1 - iter / total)^power`.
pub fn lr_schedule(iter: usize, total: usize, base_lr: f64, power: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let frac = (iter.min(total) as f64) / total as f64;
    base_lr * (1.0 - frac).powf(power)
}

/// Per-call controls that are not part of the experiment definition.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the latest checkpoint in the output directory.
    pub resume: bool,
    /// Stop (and checkpoint) after this many completed iterations.
    pub stop_after: Option<usize>,
    /// Print progress to stderr.
    pub verbose: bool,
}

/// Independent RNG streams derived from the run seed.
pub(crate) mod streams {
    pub const STAGE1_INIT: u64 = 10;
    pub const STAGE1_TRAIN: u64 = 11;
    pub const STAGE2_INIT: u64 = 20;
    pub const STAGE2_TRAIN: u64 = 21;
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Loss history in long format (`iter,term,value`).
pub(crate) struct LossLog {
    path: PathBuf,
    file: fs::File,
}

impl LossLog {
    /// Start a fresh log, or when resuming keep only rows up to `resume_at`.
    pub(crate) fn open(path: &Path, resume_at: Option<usize>) -> Result<Self> {
        let mut kept = String::from(LOSS_CSV_HEADER);
        kept.push('\n');
        if let (Some(at), Ok(text)) = (resume_at, fs::read_to_string(path)) {
            for line in text.lines().skip(1) {
                let it = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
                if matches!(it, Some(i) if i <= at) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        fs::write(path, kept)?;
        let file = fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub(crate) fn record(&mut self, iter: usize, terms: &[(&str, f64)]) -> Result<()> {
        let mut s = String::new();
        for (term, value) in terms {
            s.push_str(&format!("{iter},{term},{value}\n"));
        }
        self.file.write_all(s.as_bytes())?;
        Ok(())
    }

    pub(crate) fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }

    pub(crate) fn path(&self) -> &Path {
        &self.path
    }
}

/// Draw `batch` records uniformly with replacement and augment them.
pub(crate) fn sample_batch(
    records: &[SliceRecord],
    batch: usize,
    spec: &AugmentSpec,
    with_labels: bool,
    dtype: DType,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Option<Array3<u8>>)> {
    let picks: Vec<&SliceRecord> = (0..batch).map(|_| &records[rng.random_range(0..records.len())]).collect();
    let (b, labels) = ImageBatch::from_records(&picks)?;
    let labels = if with_labels {
        Some(labels.ok_or_else(|| Error::Contract("training batch needs labels".into()))?)
    } else {
        None
    };
    let (images, labels) = augment(&b.images, labels.as_ref(), spec, rng)?;
    Ok((to_tensor(&images, dtype)?, labels))
}

pub(crate) fn to_tensor(images: &Array4<f32>, dtype: DType) -> Result<Tensor> {
    let shape = images.dim();
    let data: Vec<f32> = images.iter().copied().collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn require_nonempty(records: &[SliceRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract(format!("{what} is empty")));
    }
    Ok(())
}
