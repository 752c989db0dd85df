//! Component ablation: each grid entry is a subset of {style transfer, D1,
//! D2}; the empty set is the no-adaptation baseline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Component, TrainConfig};
use super::stage1::{restore_synthesis, train_stage1, translate_dataset};
use super::stage2::{restore_segmentation, train_stage2, Stage2Data};
use super::RunOptions;
use crate::data_io::{load_slice_dataset, write_slice_dataset, DomainLabel, SliceDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, mask_region_means};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub components: Vec<Component>,
    /// Test Dice per seed, in seed order.
    pub dice: Vec<f64>,
    pub median_dice: f64,
    /// Per seed, mean mask value per foreground class (D1 runs only).
    pub mask_class_means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn config_name(components: &[Component]) -> String {
    if components.is_empty() {
        return "no_adaptation".into();
    }
    let mut c = components.to_vec();
    c.sort();
    c.dedup();
    c.iter()
        .map(|x| match x {
            Component::StyleTransfer => "style_transfer",
            Component::D1 => "d1",
            Component::D2 => "d2",
        })
        .collect::<Vec<_>>()
        .join("+")
}

impl AblationTable {
    /// Component rows with a mark per configuration column, Dice last.
    pub fn to_text_table(&self) -> String {
        let label_w = Component::ALL.iter().map(|c| c.label().len()).max().unwrap_or(0).max(8);
        let col_w = 8;
        let mut s = String::new();
        let _ = write!(s, "{:<label_w$}", "");
        for i in 0..self.rows.len() {
            let _ = write!(s, " | {:>col_w$}", format!("({})", (b'a' + i as u8) as char));
        }
        s.push('\n');
        let rule = label_w + self.rows.len() * (col_w + 3);
        let _ = writeln!(s, "{}", "-".repeat(rule));
        for comp in Component::ALL {
            let _ = write!(s, "{:<label_w$}", comp.label());
            for row in &self.rows {
                let mark = if row.components.contains(&comp) { "x" } else { "" };
                let _ = write!(s, " | {mark:>col_w$}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "{}", "-".repeat(rule));
        let _ = write!(s, "{:<label_w$}", "Dice (%)");
        for row in &self.rows {
            let _ = write!(s, " | {:>col_w$}", format!("{:.2}", row.median_dice));
        }
        s.push('\n');
        let _ = writeln!(
            s,
            "Dice is the median over seeds {:?} of the mean foreground Dice on the target test split.",
            self.seeds
        );
        s
    }

    /// Long format: one line per (configuration, seed), then the medians.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,style_transfer,d1,d2,seed,dice\n");
        for row in &self.rows {
            let name = config_name(&row.components);
            let flags = Component::ALL.map(|c| row.components.contains(&c) as u8);
            for (seed, d) in self.seeds.iter().zip(&row.dice) {
                let _ = writeln!(s, "{name},{},{},{},{seed},{d:.4}", flags[0], flags[1], flags[2]);
            }
            let _ = writeln!(
                s,
                "{name},{},{},{},median,{:.4}",
                flags[0], flags[1], flags[2], row.median_dice
            );
        }
        s
    }
}

fn load_split(root: &Path, domain: DomainLabel, split: Split) -> Result<SliceDataset> {
    load_slice_dataset(root, domain, split)
}

/// Train and score every grid configuration for every seed in
/// `cfg.ablation.seeds`. Stage 1 runs once per seed and is shared by all
/// configurations that use style transfer. Artifacts go under
/// `out_dir/seed<k>/<config>/`.
pub fn run_ablation(cfg: &TrainConfig, data_root: &Path, out_dir: &Path, opts: &RunOptions) -> Result<AblationTable> {
    cfg.validate()?;
    let grid = &cfg.ablation.grid;
    if grid.is_empty() {
        return Err(Error::config("ablation.grid", "must contain at least one configuration"));
    }
    let src_train = load_split(data_root, DomainLabel::Source, Split::Train)?;
    let tgt_train = load_split(data_root, DomainLabel::Target, Split::Train)?;
    let tgt_val = load_split(data_root, DomainLabel::Target, Split::Val)?;
    let tgt_test = load_split(data_root, DomainLabel::Target, Split::Test)?;
    if tgt_test.is_empty() || !tgt_test.is_labeled() {
        return Err(Error::load(
            data_root.join("target").join("test"),
            "ablation needs a labeled target test split",
        ));
    }
    let num_classes = src_train.meta.num_classes;
    let spacing = tgt_test.meta.spacing_mm;
    let needs_style = grid.iter().any(|g| g.contains(&Component::StyleTransfer));

    let mut rows: Vec<AblationRow> = grid
        .iter()
        .map(|g| AblationRow {
            components: g.clone(),
            dice: Vec::new(),
            median_dice: f64::NAN,
            mask_class_means: Vec::new(),
        })
        .collect();

    for &seed in &cfg.ablation.seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let seed_dir = out_dir.join(format!("seed{seed}"));
        let translated = if needs_style {
            let s1_dir = seed_dir.join("stage1");
            let s1 = train_stage1(&run_cfg, &src_train.records, &tgt_train.records, &s1_dir, opts)?;
            let net = restore_synthesis(&s1.checkpoint, &s1.checkpoint_path)?;
            let records = translate_dataset(&net, &src_train.records)?;
            let root: PathBuf = seed_dir.join("translated");
            write_slice_dataset(&root, Split::Train, &records, src_train.meta, DomainLabel::Source)?;
            Some(load_split(&root, DomainLabel::Source, Split::Train)?)
        } else {
            None
        };
        for row in rows.iter_mut() {
            let mut c = run_cfg.clone();
            c.stage2.d1 = row.components.contains(&Component::D1);
            c.stage2.d2 = row.components.contains(&Component::D2);
            let source = if row.components.contains(&Component::StyleTransfer) {
                translated.as_ref().expect("trained when any row needs it")
            } else {
                &src_train
            };
            let data = Stage2Data {
                source: &source.records,
                target: &tgt_train.records,
                val: &tgt_val.records,
                num_classes,
                spacing_mm: spacing,
            };
            let run_dir = seed_dir.join(config_name(&row.components));
            let out = train_stage2(&c, data, &run_dir, opts)?;
            let (net, use_mask) = restore_segmentation(&out.best, &out.best_path)?;
            let report = evaluate(&net, &tgt_test.records, spacing, use_mask, c.eval.unit, &config_name(&row.components))?;
            if opts.verbose {
                eprintln!(
                    "ablation seed {seed} {}: test dice {:.2}",
                    config_name(&row.components),
                    report.average_dice
                );
            }
            row.dice.push(report.average_dice);
            if c.stage2.d1 {
                let masks = net.mask_records(&tgt_test.records)?;
                row.mask_class_means.push(mask_region_means(&masks, &tgt_test.records, num_classes)?);
            }
        }
    }
    for row in rows.iter_mut() {
        row.median_dice = median(&row.dice);
    }
    Ok(AblationTable {
        seeds: cfg.ablation.seeds.clone(),
        rows,
    })
}
