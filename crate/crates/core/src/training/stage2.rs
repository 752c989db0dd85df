use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, RngState, Stage};
use super::config::TrainConfig;
use super::{lr_schedule, require_nonempty, sample_batch, seeded, streams, LossLog, RunOptions};
use crate::data_io::SliceRecord;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, DistanceUnit};
use crate::nn::optim::{Adam, AdamConfig, Sgd, SgdConfig};
use crate::segmentation::{stage2_losses, AdversarialFlags, SegmentationNet};

pub const STAGE2_LAST: &str = "stage2_last.ckpt";
pub const STAGE2_BEST: &str = "stage2_best.ckpt";
pub const STAGE2_LOSSES: &str = "stage2_losses.csv";

/// Inputs of the segmentation stage. `source` must be labeled; labels on
/// `target` are ignored; `val` is labeled target data (may be empty).
#[derive(Debug, Clone, Copy)]
pub struct Stage2Data<'a> {
    pub source: &'a [SliceRecord],
    pub target: &'a [SliceRecord],
    pub val: &'a [SliceRecord],
    pub num_classes: usize,
    pub spacing_mm: [f64; 3],
}

#[derive(Debug)]
pub struct Stage2Output {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub last_path: PathBuf,
    pub best_path: PathBuf,
    pub loss_csv: PathBuf,
    /// (iteration, mean foreground validation Dice) logged during this call.
    pub val_history: Vec<(usize, f64)>,
}

fn flags(cfg: &TrainConfig) -> AdversarialFlags {
    AdversarialFlags {
        d1: cfg.stage2.d1,
        d2: cfg.stage2.d2,
    }
}

fn uses_mask(cfg: &TrainConfig) -> bool {
    cfg.stage2.d1 && cfg.stage2.mask_at_inference
}

fn build(cfg: &TrainConfig, num_classes: usize) -> Result<SegmentationNet> {
    SegmentationNet::new(
        &cfg.model.segmentation,
        num_classes,
        DType::F32,
        &mut seeded(cfg.seed, streams::STAGE2_INIT),
    )
}

/// Rebuild the stage-2 network from a checkpoint. The returned flag tells
/// whether target inference should apply the feature mask.
pub fn restore_segmentation(ckpt: &Checkpoint, path: &Path) -> Result<(SegmentationNet, bool)> {
    ckpt.require_stage(Stage::Segmentation, path)?;
    let cfg = &ckpt.meta.config;
    let net = build(cfg, ckpt.meta.num_classes)?;
    ckpt.restore_params(&net.all_params(), path)?;
    Ok((net, uses_mask(cfg)))
}

/// Labels predicted for each record, in input order.
pub fn predict_slices(net: &SegmentationNet, records: &[SliceRecord], use_mask: bool) -> Result<Vec<Array2<u8>>> {
    net.predict_records(records, use_mask)
}

struct Optimizers {
    seg: Sgd,
    disc: Adam,
}

impl Optimizers {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            seg: Sgd::new(SgdConfig {
                momentum: cfg.stage2.momentum,
                weight_decay: cfg.stage2.weight_decay,
            }),
            disc: Adam::new(AdamConfig {
                beta1: cfg.stage2.disc_beta1,
                beta2: cfg.stage2.disc_beta2,
                eps: 1e-8,
                weight_decay: 0.0,
            }),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn snapshot(
    net: &SegmentationNet,
    cfg: &TrainConfig,
    iteration: usize,
    rng: &ChaCha8Rng,
    opt: &Optimizers,
    best: Option<(f64, usize)>,
) -> Result<Checkpoint> {
    let mut optimizer = BTreeMap::new();
    let mut steps = BTreeMap::new();
    steps.insert("segmentor".to_string(), opt.seg.export("segmentor", &mut optimizer)?);
    steps.insert("discriminator".to_string(), opt.disc.export("discriminator", &mut optimizer)?);
    Checkpoint::new(
        CheckpointMeta {
            stage: Stage::Segmentation,
            iteration,
            num_classes: net.num_classes,
            config: cfg.clone(),
            rng: RngState::capture(rng),
            optimizer_steps: steps,
            best_val_dice: best.map(|b| b.0),
            best_iteration: best.map(|b| b.1),
        },
        &net.all_params(),
        optimizer,
    )
}

fn validate(net: &SegmentationNet, cfg: &TrainConfig, data: &Stage2Data) -> Result<f64> {
    let report = evaluate(net, data.val, data.spacing_mm, uses_mask(cfg), DistanceUnit::Voxel, "val")?;
    Ok(report.average_dice)
}

/// Train the segmentor against both discriminators. Writes
/// `stage2_last.ckpt`, `stage2_best.ckpt` (best validation Dice) and
/// `stage2_losses.csv` into `out_dir`.
pub fn train_stage2(cfg: &TrainConfig, data: Stage2Data, out_dir: &Path, opts: &RunOptions) -> Result<Stage2Output> {
    cfg.validate()?;
    require_nonempty(data.source, "source training set")?;
    require_nonempty(data.target, "target training set")?;
    if data.source.iter().any(|r| r.label.is_none()) {
        return Err(Error::Contract("source training set must be labeled".into()));
    }
    let can_validate = !data.val.is_empty() && data.val.iter().all(|r| r.label.is_some());
    std::fs::create_dir_all(out_dir)?;
    let last_path = out_dir.join(STAGE2_LAST);
    let best_path = out_dir.join(STAGE2_BEST);
    let dtype = DType::F32;
    let net = build(cfg, data.num_classes)?;
    let seg_params = net.segmentor_params().clone();
    let disc_params = net.discriminator_params();
    let mut opt = Optimizers::new(cfg);
    let mut rng = seeded(cfg.seed, streams::STAGE2_TRAIN);
    let mut start = 0;
    let mut best: Option<(f64, usize)> = None;
    if opts.resume && last_path.exists() {
        let ckpt = load_checkpoint(&last_path)?;
        ckpt.require_stage(Stage::Segmentation, &last_path)?;
        if ckpt.meta.config != *cfg || ckpt.meta.num_classes != data.num_classes {
            return Err(Error::checkpoint(&last_path, "cannot resume: configuration differs from the checkpoint"));
        }
        ckpt.restore_params(&net.all_params(), &last_path)?;
        let step = |k: &str| ckpt.meta.optimizer_steps.get(k).copied().unwrap_or(0);
        opt.seg.import("segmentor", step("segmentor"), &ckpt.optimizer, &seg_params)?;
        opt.disc.import("discriminator", step("discriminator"), &ckpt.optimizer, &disc_params)?;
        rng = ckpt.meta.rng.restore()?;
        start = ckpt.meta.iteration;
        best = ckpt.meta.best_val_dice.zip(ckpt.meta.best_iteration);
    }
    let mut log = LossLog::open(&out_dir.join(STAGE2_LOSSES), (start > 0).then_some(start))?;
    let total = cfg.stage2.iters;
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let mut val_history = Vec::new();
    let mut best_ckpt: Option<Checkpoint> = None;
    for it in start + 1..=end {
        let (x_s, y_s) = sample_batch(data.source, cfg.stage2.batch, &cfg.augment, true, dtype, &mut rng)?;
        let (x_t, _) = sample_batch(data.target, cfg.stage2.batch, &cfg.augment, false, dtype, &mut rng)?;
        let y_s = y_s.expect("requested labels");
        let losses = stage2_losses(&net, &x_s, &y_s, &x_t, &cfg.weights, flags(cfg))?;
        let bundle = losses.bundle(it)?;
        let grads_seg = losses.total_seg.backward()?;
        let grads_disc = losses.total_disc.backward()?;
        let seg_lr = lr_schedule(it - 1, total, cfg.stage2.seg_lr, cfg.stage2.power);
        opt.seg.step(&seg_params, &grads_seg, seg_lr)?;
        opt.disc.step(&disc_params, &grads_disc, cfg.stage2.disc_lr)?;
        log.record(it, &bundle.terms())?;
        if can_validate && (it % cfg.stage2.eval_interval == 0 || it == total) {
            let dice = validate(&net, cfg, &data)?;
            log.record(it, &[("val_dice", dice)])?;
            val_history.push((it, dice));
            if opts.verbose {
                eprintln!("stage2 iter {it}/{total}: seg {:.4} val dice {dice:.2}", bundle.seg);
            }
            if best.is_none_or(|(b, _)| dice > b) {
                best = Some((dice, it));
                let c = snapshot(&net, cfg, it, &rng, &opt, best)?;
                save_checkpoint(&c, &best_path)?;
                best_ckpt = Some(c);
            }
        } else if opts.verbose && it % 100 == 0 {
            eprintln!("stage2 iter {it}/{total}: seg {:.4}", bundle.seg);
        }
        if it % cfg.stage2.checkpoint_interval == 0 && it != end {
            log.flush()?;
            save_checkpoint(&snapshot(&net, cfg, it, &rng, &opt, best)?, &last_path)?;
        }
    }
    log.flush()?;
    let last = snapshot(&net, cfg, end.max(start), &rng, &opt, best)?;
    save_checkpoint(&last, &last_path)?;
    let best_ckpt = match best_ckpt {
        Some(c) => c,
        None if best.is_some() && best_path.exists() => load_checkpoint(&best_path)?,
        None => {
            save_checkpoint(&last, &best_path)?;
            last.clone()
        }
    };
    Ok(Stage2Output {
        last,
        best: best_ckpt,
        last_path,
        best_path,
        loss_csv: log.path().to_path_buf(),
        val_history,
    })
}
