//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data_io::{generate_phantom, load_slice_dataset, write_slice_dataset, DatasetMeta, DomainLabel, SliceRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, mask_region_means, DistanceUnit};
use crate::segmentation::SegmentationNet;
use crate::training::{
    load_checkpoint, parse_config, restore_segmentation, run_ablation, train_stage1, train_stage2,
    translate_dataset_on_disk, RunOptions, Stage2Data, TrainConfig,
};

/// Relative `--out` paths are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "UNIALIGN_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "unialign", version, about = "Two-stage unsupervised cross-modality segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, repeatable: `--set stage1.lr=0.001`.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-domain phantom dataset.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Overrides `phantom.seed`.
        #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
        seed: Option<u64>,
    },
    /// Stage 1: train the style-transfer network.
    TrainStyle {
        #[command(flatten)]
        common: Common,
        /// Dataset root containing `source/train` and `target/train`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Translate every source split to the target style.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage 2: train the segmentor with both discriminators.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        /// Root holding labeled `source/train` (usually the translated set).
        #[arg(long)]
        source: PathBuf,
        /// Root holding `target/train` and optionally labeled `target/val`.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Score a stage-2 checkpoint on a labeled target split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `eval.split`.
        #[arg(long)]
        split: Option<String>,
        /// Overrides `eval.unit` (voxel or mm).
        #[arg(long)]
        unit: Option<String>,
    },
    /// Train and score every configuration of `ablation.grid`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Dataset root; a phantom is generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Export the local feature mask of every slice of a target split.
    ExportMask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `eval.split`.
        #[arg(long)]
        split: Option<String>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Phantom { common, .. }
            | Command::TrainStyle { common, .. }
            | Command::Translate { common, .. }
            | Command::TrainSeg { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Ablate { common, .. }
            | Command::ExportMask { common, .. } => common,
        }
    }
}

fn resolve_out(out: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

fn load(root: &Path, domain: DomainLabel, split: Split) -> Result<crate::data_io::SliceDataset> {
    let dir = root.join(domain.name()).join(split.name());
    if !dir.is_dir() {
        return Err(Error::load(dir, "split directory not found"));
    }
    load_slice_dataset(root, domain, split)
}

fn load_optional(root: &Path, domain: DomainLabel, split: Split) -> Result<Vec<SliceRecord>> {
    if root.join(domain.name()).join(split.name()).is_dir() {
        Ok(load_slice_dataset(root, domain, split)?.records)
    } else {
        Ok(Vec::new())
    }
}

/// Write both domains of a phantom into the dataset layout, volumes split
/// into train/val/test.
pub fn write_phantom(cfg: &TrainConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let data = generate_phantom(&cfg.phantom)?;
    let meta = DatasetMeta {
        num_classes: cfg.phantom.num_classes,
        spacing_mm: data.spacing_mm,
    };
    let n = cfg.phantom.volumes_per_domain;
    let per = cfg.phantom.slices_per_volume;
    let mut written = Vec::new();
    for domain in DomainLabel::ALL {
        let records = data.domain(domain);
        for split in Split::ALL {
            let subset: Vec<SliceRecord> = records
                .iter()
                .enumerate()
                .filter(|(i, _)| Split::for_volume(i / per, n) == split)
                .map(|(_, r)| r.clone())
                .collect();
            written.push(write_slice_dataset(out, split, &subset, meta, domain)?);
        }
    }
    Ok(written)
}

fn write_gray_png(path: &Path, values: &ndarray::Array2<f32>) -> Result<()> {
    let (h, w) = values.dim();
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized to image");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Write `mask_<volume>_<idx>.bin` (float32 LE, input resolution) and a
/// per-slice min-max normalised `mask_<volume>_<idx>.png` for each record.
pub fn export_mask(net: &SegmentationNet, records: &[SliceRecord], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let masks = net.mask_records(records)?;
    let mut files = Vec::with_capacity(records.len() * 2);
    for (r, m) in records.iter().zip(&masks) {
        let stem = format!("mask_{}_{}", r.volume_id, r.slice_index);
        let bin = out.join(format!("{stem}.bin"));
        let mut bytes = Vec::with_capacity(m.len() * 4);
        m.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        fs::write(&bin, bytes)?;
        let png = out.join(format!("{stem}.png"));
        write_gray_png(&png, m)?;
        files.push(bin);
        files.push(png);
    }
    Ok(files)
}

/// Execute a parsed command; returns the artifact paths it wrote.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let common = cli.command.common().clone();
    let mut cfg = parse_config(common.config.as_deref(), &common.overrides)?;
    let out = resolve_out(&common.out);
    let opts = |resume: bool| RunOptions {
        resume,
        stop_after: None,
        verbose: common.verbose,
    };
    let mut written = Vec::new();
    match cli.command {
        Command::Phantom { seed, .. } => {
            if let Some(s) = seed {
                cfg.phantom.seed = s;
            }
            cfg.validate()?;
            written.extend(write_phantom(&cfg, &out)?);
        }
        Command::TrainStyle { data, resume, .. } => {
            let s = load(&data, DomainLabel::Source, Split::Train)?;
            let t = load(&data, DomainLabel::Target, Split::Train)?;
            let r = train_stage1(&cfg, &s.records, &t.records, &out, &opts(resume))?;
            written.push(r.checkpoint_path);
            written.push(r.loss_csv);
        }
        Command::Translate { ckpt, data, .. } => {
            written.extend(translate_dataset_on_disk(&ckpt, &data, &out)?);
        }
        Command::TrainSeg {
            source, target, resume, ..
        } => {
            let s = load(&source, DomainLabel::Source, Split::Train)?;
            let t = load(&target, DomainLabel::Target, Split::Train)?;
            let val = load_optional(&target, DomainLabel::Target, Split::Val)?;
            let val: Vec<SliceRecord> = if val.iter().all(|r| r.label.is_some()) { val } else { Vec::new() };
            let data = Stage2Data {
                source: &s.records,
                target: &t.records,
                val: &val,
                num_classes: s.meta.num_classes,
                spacing_mm: t.meta.spacing_mm,
            };
            let r = train_stage2(&cfg, data, &out, &opts(resume))?;
            written.extend([r.best_path, r.last_path, r.loss_csv]);
        }
        Command::Evaluate {
            ckpt, data, split, unit, ..
        } => {
            if let Some(s) = split {
                cfg.eval.split = s.parse()?;
            }
            if let Some(u) = unit {
                cfg.eval.unit = u.parse::<DistanceUnit>()?;
            }
            let ds = load(&data, DomainLabel::Target, cfg.eval.split)?;
            if ds.is_empty() || !ds.is_labeled() {
                return Err(Error::load(
                    data.join(DomainLabel::Target.name()).join(cfg.eval.split.name()),
                    "no ground-truth labels; evaluation needs a labeled split",
                ));
            }
            let checkpoint = load_checkpoint(&ckpt)?;
            let (net, use_mask) = restore_segmentation(&checkpoint, &ckpt)?;
            let mut report = evaluate(&net, &ds.records, ds.meta.spacing_mm, use_mask, cfg.eval.unit, "model")?;
            report.metadata.insert("checkpoint".into(), ckpt.display().to_string());
            report.metadata.insert("iteration".into(), checkpoint.meta.iteration.to_string());
            report.metadata.insert("split".into(), cfg.eval.split.name().into());
            fs::create_dir_all(&out)?;
            let table = report.to_text_table();
            print!("{table}");
            for (name, body) in [
                ("report.csv", report.to_csv()),
                ("report.txt", table),
                ("per_volume.csv", report.per_volume_csv()),
                (
                    "report.json",
                    serde_json::to_string_pretty(&report).map_err(|e| Error::Contract(e.to_string()))?,
                ),
            ] {
                let p = out.join(name);
                fs::write(&p, body)?;
                written.push(p);
            }
        }
        Command::Ablate { data, .. } => {
            let data_root = match data {
                Some(d) => d,
                None => {
                    let d = out.join("phantom");
                    write_phantom(&cfg, &d)?;
                    d
                }
            };
            let table = run_ablation(&cfg, &data_root, &out, &opts(false))?;
            fs::create_dir_all(&out)?;
            let text = table.to_text_table();
            print!("{text}");
            for (name, body) in [
                ("ablation.txt", text),
                ("ablation.csv", table.to_csv()),
                (
                    "ablation.json",
                    serde_json::to_string_pretty(&table).map_err(|e| Error::Contract(e.to_string()))?,
                ),
            ] {
                let p = out.join(name);
                fs::write(&p, body)?;
                written.push(p);
            }
        }
        Command::ExportMask { ckpt, data, split, .. } => {
            if let Some(s) = split {
                cfg.eval.split = s.parse()?;
            }
            let ds = load(&data, DomainLabel::Target, cfg.eval.split)?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let (net, _) = restore_segmentation(&checkpoint, &ckpt)?;
            written.extend(export_mask(&net, &ds.records, &out.join("masks"))?);
            if ds.is_labeled() && !ds.is_empty() {
                let masks = net.mask_records(&ds.records)?;
                let means = mask_region_means(&masks, &ds.records, net.num_classes)?;
                let mut csv = String::from("class,mean_mask\n");
                for (c, m) in means.iter().enumerate() {
                    csv.push_str(&format!("class{},{m}\n", c + 1));
                }
                let p = out.join("mask_stats.csv");
                fs::write(&p, csv)?;
                written.push(p);
            }
        }
    }
    written.push(cfg.echo(&out)?);
    Ok(written)
}
