use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use ndarray::{s, Array2};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, RngState, Stage};
use super::config::TrainConfig;
use super::{require_nonempty, sample_batch, seeded, streams, to_tensor, LossLog, RunOptions};
use crate::data_io::{load_slice_dataset, write_slice_dataset, DomainLabel, ImageBatch, SliceRecord, Split};
use crate::error::{Error, Result};
use crate::nn::optim::{Adam, AdamConfig};
use crate::synthesis::{stage1_losses, StyleGenerator, SynthesisNet};

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE1_LOSSES: &str = "stage1_losses.csv";

#[derive(Debug)]
pub struct Stage1Output {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub loss_csv: PathBuf,
}

fn adam(cfg: &TrainConfig) -> Adam {
    Adam::new(AdamConfig {
        beta1: cfg.stage1.beta1,
        beta2: cfg.stage1.beta2,
        eps: 1e-8,
        weight_decay: cfg.stage1.weight_decay,
    })
}

/// Rebuild the stage-1 network described by a checkpoint.
pub fn restore_synthesis(ckpt: &Checkpoint, path: &Path) -> Result<SynthesisNet> {
    ckpt.require_stage(Stage::Synthesis, path)?;
    let cfg = &ckpt.meta.config;
    let net = SynthesisNet::new(
        &cfg.model.synthesis,
        DType::F32,
        &mut seeded(cfg.seed, super::streams::STAGE1_INIT),
    )?;
    ckpt.restore_params(&net.all_params(), path)?;
    Ok(net)
}

fn snapshot(
    net: &SynthesisNet,
    cfg: &TrainConfig,
    iteration: usize,
    rng: &rand_chacha::ChaCha8Rng,
    opt_g: &Adam,
    opt_d: &Adam,
) -> Result<Checkpoint> {
    let mut optimizer = BTreeMap::new();
    let mut steps = BTreeMap::new();
    steps.insert("generator".to_string(), opt_g.export("generator", &mut optimizer)?);
    steps.insert("discriminator".to_string(), opt_d.export("discriminator", &mut optimizer)?);
    Checkpoint::new(
        CheckpointMeta {
            stage: Stage::Synthesis,
            iteration,
            num_classes: 0,
            config: cfg.clone(),
            rng: RngState::capture(rng),
            optimizer_steps: steps,
            best_val_dice: None,
            best_iteration: None,
        },
        &net.all_params(),
        optimizer,
    )
}

/// Train the style-transfer network on unpaired source and target slices.
/// Writes `stage1.ckpt` and `stage1_losses.csv` into `out_dir`.
pub fn train_stage1(
    cfg: &TrainConfig,
    data_s: &[SliceRecord],
    data_t: &[SliceRecord],
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<Stage1Output> {
    cfg.validate()?;
    require_nonempty(data_s, "source training set")?;
    require_nonempty(data_t, "target training set")?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join(STAGE1_CHECKPOINT);
    let dtype = DType::F32;
    let net = SynthesisNet::new(&cfg.model.synthesis, dtype, &mut seeded(cfg.seed, streams::STAGE1_INIT))?;
    let mut opt_g = adam(cfg);
    let mut opt_d = adam(cfg);
    let mut rng = seeded(cfg.seed, streams::STAGE1_TRAIN);
    let mut start = 0;
    if opts.resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        ckpt.require_stage(Stage::Synthesis, &ckpt_path)?;
        if ckpt.meta.config != *cfg {
            return Err(Error::checkpoint(&ckpt_path, "cannot resume: configuration differs from the checkpoint"));
        }
        ckpt.restore_params(&net.all_params(), &ckpt_path)?;
        let step = |k: &str| ckpt.meta.optimizer_steps.get(k).copied().unwrap_or(0);
        opt_g.import("generator", step("generator"), &ckpt.optimizer, net.generator_params())?;
        opt_d.import("discriminator", step("discriminator"), &ckpt.optimizer, net.discriminator_params())?;
        rng = ckpt.meta.rng.restore()?;
        start = ckpt.meta.iteration;
    }
    let mut log = LossLog::open(&out_dir.join(STAGE1_LOSSES), (start > 0).then_some(start))?;
    let end = opts.stop_after.map_or(cfg.stage1.iters, |s| s.min(cfg.stage1.iters));
    let lr = cfg.stage1.lr;
    for it in start + 1..=end {
        let (x_s, _) = sample_batch(data_s, cfg.stage1.batch, &cfg.augment, false, dtype, &mut rng)?;
        let (x_t, _) = sample_batch(data_t, cfg.stage1.batch, &cfg.augment, false, dtype, &mut rng)?;
        let losses = stage1_losses(&net, &net, &x_s, &x_t, &cfg.weights)?;
        let bundle = losses.bundle(it)?;
        // Both gradients come from the same forward pass, before either update.
        let grads_g = losses.total_g.backward()?;
        let grads_d = losses.adv_d.backward()?;
        opt_g.step(net.generator_params(), &grads_g, lr)?;
        opt_d.step(net.discriminator_params(), &grads_d, lr)?;
        log.record(it, &bundle.terms())?;
        if opts.verbose && (it % 100 == 0 || it == end) {
            eprintln!(
                "stage1 iter {it}/{}: rec_im {:.4} cyc {:.4} adv_g {:.4} adv_d {:.4}",
                cfg.stage1.iters, bundle.rec_im, bundle.cyc, bundle.adv_g, bundle.adv_d
            );
        }
        if it % cfg.stage1.checkpoint_interval == 0 && it != end {
            log.flush()?;
            save_checkpoint(&snapshot(&net, cfg, it, &rng, &opt_g, &opt_d)?, &ckpt_path)?;
        }
    }
    log.flush()?;
    let checkpoint = snapshot(&net, cfg, end.max(start), &rng, &opt_g, &opt_d)?;
    save_checkpoint(&checkpoint, &ckpt_path)?;
    Ok(Stage1Output {
        checkpoint,
        checkpoint_path: ckpt_path,
        loss_csv: log.path().to_path_buf(),
    })
}

/// Translate every source slice to the target style; labels and identifiers
/// are copied unchanged.
pub fn translate_dataset(net: &SynthesisNet, records: &[SliceRecord]) -> Result<Vec<SliceRecord>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let refs: Vec<&SliceRecord> = chunk.iter().collect();
        let (batch, _) = ImageBatch::from_records(&refs)?;
        let x = to_tensor(&batch.images, net.dtype())?;
        let y = net
            .translate(&x, DomainLabel::Source, DomainLabel::Target)?
            .to_dtype(DType::F32)?;
        let (b, _, h, w) = y.dims4()?;
        let flat = y.flatten_all()?.to_vec1::<f32>()?;
        let arr = ndarray::Array4::from_shape_vec((b, 1, h, w), flat).expect("shape from tensor");
        for (i, r) in chunk.iter().enumerate() {
            let image: Array2<f32> = arr.slice(s![i, 0, .., ..]).to_owned();
            out.push(SliceRecord {
                image,
                label: r.label.clone(),
                domain: r.domain,
                volume_id: r.volume_id.clone(),
                slice_index: r.slice_index,
            });
        }
    }
    Ok(out)
}

/// Translate each source split found under `data_root` into `out_root`
/// (same layout). Returns the written split directories.
pub fn translate_dataset_on_disk(ckpt_path: &Path, data_root: &Path, out_root: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let net = restore_synthesis(&ckpt, ckpt_path)?;
    let mut written = Vec::new();
    for split in Split::ALL {
        let dir = data_root.join(DomainLabel::Source.name()).join(split.name());
        if !dir.is_dir() {
            continue;
        }
        let ds = load_slice_dataset(data_root, DomainLabel::Source, split)?;
        if ds.is_empty() {
            continue;
        }
        let translated = translate_dataset(&net, &ds.records)?;
        written.push(write_slice_dataset(out_root, split, &translated, ds.meta, DomainLabel::Source)?);
    }
    if written.is_empty() {
        return Err(Error::load(data_root.join(DomainLabel::Source.name()), "no source splits to translate"));
    }
    Ok(written)
}
