//! Volume reassembly, per-class Dice and average surface distance, and the
//! report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data_io::SliceRecord;
use crate::error::{Error, Result};
use crate::segmentation::SegmentationNet;

/// Predicted (or ground-truth) labels of one 2D slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceLabels {
    pub volume_id: String,
    pub slice_index: usize,
    pub labels: Array2<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub id: String,
    /// (z, y, x)
    pub labels: Array3<u8>,
    /// (z, y, x) spacing in mm.
    pub spacing_mm: [f64; 3],
}

/// Stack the slices of one volume by `slice_index`; input order is irrelevant.
pub fn assemble_volume(slices: &[SliceLabels], spacing_mm: [f64; 3]) -> Result<LabeledVolume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Contract("cannot assemble a volume from zero slices".into()))?;
    let id = first.volume_id.clone();
    let (h, w) = first.labels.dim();
    let n = slices.len();
    let mut placed: Vec<Option<&SliceLabels>> = vec![None; n];
    for s in slices {
        if s.volume_id != id {
            return Err(Error::Contract(format!(
                "slice of volume {} mixed into volume {id}",
                s.volume_id
            )));
        }
        if s.labels.dim() != (h, w) {
            return Err(Error::Contract(format!("volume {id}: slices differ in shape")));
        }
        if s.slice_index >= n {
            return Err(Error::Contract(format!(
                "volume {id}: gap in slice indices (index {} with {n} slices)",
                s.slice_index
            )));
        }
        if placed[s.slice_index].replace(s).is_some() {
            return Err(Error::Contract(format!("volume {id}: duplicate slice index {}", s.slice_index)));
        }
    }
    let mut labels = Array3::<u8>::zeros((n, h, w));
    for (z, s) in placed.into_iter().enumerate() {
        let s = s.ok_or_else(|| Error::Contract(format!("volume {id}: missing slice {z}")))?;
        labels.index_axis_mut(Axis(0), z).assign(&s.labels);
    }
    Ok(LabeledVolume { id, labels, spacing_mm })
}

/// Group slices by volume (first-appearance order) and assemble each.
pub fn assemble_volumes(slices: &[SliceLabels], spacing_mm: [f64; 3]) -> Result<Vec<LabeledVolume>> {
    let mut groups: Vec<(String, Vec<SliceLabels>)> = Vec::new();
    for s in slices {
        match groups.iter_mut().find(|(id, _)| *id == s.volume_id) {
            Some((_, g)) => g.push(s.clone()),
            None => groups.push((s.volume_id.clone(), vec![s.clone()])),
        }
    }
    groups.iter().map(|(_, g)| assemble_volume(g, spacing_mm)).collect()
}

fn check_shapes(pred: &Array3<u8>, gt: &Array3<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Contract(format!(
            "prediction shape {:?} differs from ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Dice overlap in percent. Both masks empty scores 100.
pub fn dice(pred: &Array3<u8>, gt: &Array3<u8>, class_id: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + g) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnit {
    #[default]
    Voxel,
    Mm,
}

impl DistanceUnit {
    pub fn name(self) -> &'static str {
        match self {
            DistanceUnit::Voxel => "voxel",
            DistanceUnit::Mm => "mm",
        }
    }

    fn spacing(self, spacing_mm: [f64; 3]) -> [f64; 3] {
        match self {
            DistanceUnit::Voxel => [1.0; 3],
            DistanceUnit::Mm => spacing_mm,
        }
    }
}

impl std::str::FromStr for DistanceUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(DistanceUnit::Voxel),
            "mm" => Ok(DistanceUnit::Mm),
            other => Err(Error::validation("unit", format!("unknown unit `{other}` (voxel or mm)"))),
        }
    }
}

/// Border voxels of a class: members with at least one 6-neighbour outside
/// the class. Voxels beyond the array bounds count as outside.
pub fn surface(labels: &Array3<u8>, class_id: u8) -> Array3<bool> {
    let (d, h, w) = labels.dim();
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && labels[[z as usize, y as usize, x as usize]] == class_id
    };
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if labels[[z, y, x]] != class_id {
            return false;
        }
        let (z, y, x) = (z as isize, y as isize, x as isize);
        [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
            .iter()
            .any(|&(dz, dy, dx)| !inside(z + dz, y + dy, x + dx))
    })
}

/// 1D squared distance transform along a line (lower envelope of parabolas),
/// with sample positions `i * step`.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let xq = q as f64 * step;
        loop {
            let Some(&p) = v.last() else { break };
            let xp = p as f64 * step;
            let s = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if s <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = i as f64 * step;
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let xp = v[k] as f64 * step;
        *o = (x - xp) * (x - xp) + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// voxel, with per-axis spacing. Infinite everywhere when `mask` is empty.
pub fn squared_distance_transform(mask: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut dist = mask.mapv(|b| if b { 0.0 } else { f64::INFINITY });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for (axis, &step) in spacing.iter().enumerate() {
        let len = dist.len_of(Axis(axis));
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for mut lane in dist.lanes_mut(Axis(axis)) {
            line.iter_mut().zip(lane.iter()).for_each(|(l, &d)| *l = d);
            edt_line(&line, step, &mut out, &mut v, &mut z);
            lane.iter_mut().zip(&out).for_each(|(d, &o)| *d = o);
        }
    }
    dist
}

/// Symmetric average surface distance. `None` when either surface is empty.
pub fn asd(pred: &Array3<u8>, gt: &Array3<u8>, class_id: u8, spacing_mm: [f64; 3], unit: DistanceUnit) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let sp = surface(pred, class_id);
    let sg = surface(gt, class_id);
    let np = sp.iter().filter(|&&b| b).count();
    let ng = sg.iter().filter(|&&b| b).count();
    if np == 0 || ng == 0 {
        return Ok(None);
    }
    let spacing = unit.spacing(spacing_mm);
    let to_g = squared_distance_transform(&sg, spacing);
    let to_p = squared_distance_transform(&sp, spacing);
    let mean_dist = |from: &Array3<bool>, dt: &Array3<f64>, n: usize| {
        from.iter()
            .zip(dt.iter())
            .filter(|(&b, _)| b)
            .map(|(_, d)| d.sqrt())
            .sum::<f64>()
            / n as f64
    };
    Ok(Some((mean_dist(&sp, &to_g, np) + mean_dist(&sg, &to_p, ng)) / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub dice: f64,
    /// `None` when undefined (an empty surface).
    pub asd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub volume_id: String,
    pub classes: Vec<ClassScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub class_names: Vec<String>,
    pub unit: DistanceUnit,
    /// Per-class mean over volumes.
    pub dice: Vec<f64>,
    /// Per-class mean over volumes with a defined ASD.
    pub asd: Vec<Option<f64>>,
    pub average_dice: f64,
    pub average_asd: Option<f64>,
    /// Number of (volume, class) ASD values excluded as undefined.
    pub undefined_asd: usize,
    pub per_volume: Vec<VolumeReport>,
    pub metadata: BTreeMap<String, String>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Score foreground classes `1..=class_names.len()` for paired volumes.
pub fn score_volumes(
    method: &str,
    pred: &[LabeledVolume],
    gt: &[LabeledVolume],
    class_names: &[String],
    unit: DistanceUnit,
) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{} predicted volumes for {} ground-truth volumes",
            pred.len(),
            gt.len()
        )));
    }
    let mut per_volume = Vec::with_capacity(gt.len());
    for (p, g) in pred.iter().zip(gt) {
        if p.id != g.id {
            return Err(Error::Contract(format!("volume order mismatch: {} vs {}", p.id, g.id)));
        }
        let classes = (1..=class_names.len() as u8)
            .map(|c| {
                Ok(ClassScores {
                    dice: dice(&p.labels, &g.labels, c)?,
                    asd: asd(&p.labels, &g.labels, c, g.spacing_mm, unit)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        per_volume.push(VolumeReport {
            volume_id: g.id.clone(),
            classes,
        });
    }
    let k = class_names.len();
    let dice: Vec<f64> = (0..k)
        .map(|c| mean(per_volume.iter().map(|v| v.classes[c].dice)).unwrap_or(f64::NAN))
        .collect();
    let asd: Vec<Option<f64>> = (0..k)
        .map(|c| mean(per_volume.iter().filter_map(|v| v.classes[c].asd)))
        .collect();
    let undefined_asd = per_volume
        .iter()
        .flat_map(|v| v.classes.iter())
        .filter(|c| c.asd.is_none())
        .count();
    Ok(EvalReport {
        method: method.to_string(),
        class_names: class_names.to_vec(),
        unit,
        average_dice: mean(dice.iter().copied()).unwrap_or(f64::NAN),
        average_asd: mean(asd.iter().flatten().copied()),
        dice,
        asd,
        undefined_asd,
        per_volume,
        metadata: BTreeMap::new(),
    })
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (1..=num_classes).map(|c| format!("class{c}")).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// One header line and one row: Dice per class and average, then ASD.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for n in &self.class_names {
            let _ = write!(s, ",dice_{n}");
        }
        s.push_str(",dice_average");
        for n in &self.class_names {
            let _ = write!(s, ",asd_{n}");
        }
        s.push_str(",asd_average\n");
        s.push_str(&self.method);
        for d in &self.dice {
            let _ = write!(s, ",{d:.4}");
        }
        let _ = write!(s, ",{:.4}", self.average_dice);
        for a in &self.asd {
            let _ = write!(s, ",{}", fmt_opt(*a));
        }
        let _ = writeln!(s, ",{}", fmt_opt(self.average_asd));
        s
    }

    pub fn per_volume_csv(&self) -> String {
        let mut s = String::from("volume,class,dice,asd\n");
        for v in &self.per_volume {
            for (n, c) in self.class_names.iter().zip(&v.classes) {
                let _ = writeln!(s, "{},{n},{:.4},{}", v.volume_id, c.dice, fmt_opt(c.asd));
            }
        }
        s
    }

    /// Aligned text table with Dice and ASD column groups.
    pub fn to_text_table(&self) -> String {
        let mut cols: Vec<String> = self.class_names.clone();
        cols.push("Average".into());
        let width = cols.iter().map(|c| c.len()).max().unwrap_or(0).max(9);
        let method_w = self.method.len().max(6);
        let group_w = (width + 1) * cols.len();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<method_w$} | {:<group_w$}| {}",
            "",
            "Dice(%)",
            format!("ASD({})", self.unit.name())
        );
        let mut header = format!("{:<method_w$} |", "Method");
        for _ in 0..2 {
            for c in &cols {
                let _ = write!(header, " {c:>width$}");
            }
            header.push_str(" |");
        }
        header.pop();
        header.pop();
        let _ = writeln!(s, "{}", header.trim_end());
        let _ = writeln!(s, "{}", "-".repeat(header.trim_end().len()));
        let mut row = format!("{:<method_w$} |", self.method);
        for d in self.dice.iter().chain(std::iter::once(&self.average_dice)) {
            let _ = write!(row, " {:>width$}", format!("{d:.2}"));
        }
        row.push_str(" |");
        for a in self.asd.iter().chain(std::iter::once(&self.average_asd)) {
            let cell = a.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
            let _ = write!(row, " {cell:>width$}");
        }
        let _ = writeln!(s, "{row}");
        if self.undefined_asd > 0 {
            let _ = writeln!(
                s,
                "* {} volume/class ASD value(s) undefined (empty surface) and excluded from the averages",
                self.undefined_asd
            );
        }
        s
    }
}

/// Run the segmentor over labeled slices, reassemble volumes and score
/// every foreground class.
pub fn evaluate(
    net: &SegmentationNet,
    records: &[SliceRecord],
    spacing_mm: [f64; 3],
    use_mask: bool,
    unit: DistanceUnit,
    method: &str,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    if records.iter().any(|r| r.label.is_none()) {
        return Err(Error::Contract("evaluation set has no ground-truth labels".into()));
    }
    let predicted = net.predict_records(records, use_mask)?;
    let mut pred = Vec::with_capacity(records.len());
    let mut gt = Vec::with_capacity(records.len());
    for (r, p) in records.iter().zip(predicted) {
        pred.push(SliceLabels {
            volume_id: r.volume_id.clone(),
            slice_index: r.slice_index,
            labels: p,
        });
        gt.push(SliceLabels {
            volume_id: r.volume_id.clone(),
            slice_index: r.slice_index,
            labels: r.label.clone().expect("checked above"),
        });
    }
    let pred = assemble_volumes(&pred, spacing_mm)?;
    let gt = assemble_volumes(&gt, spacing_mm)?;
    let mut report = score_volumes(method, &pred, &gt, &default_class_names(net.num_classes), unit)?;
    report.metadata.insert("slices".into(), records.len().to_string());
    report.metadata.insert("volumes".into(), gt.len().to_string());
    report.metadata.insert("mask_at_inference".into(), use_mask.to_string());
    Ok(report)
}

/// Mean local-feature-mask value (at input resolution) over the pixels of
/// each foreground class `1..=num_classes`, pooled across `records`.
/// Classes with no pixels give NaN.
pub fn mask_region_means(masks: &[Array2<f32>], records: &[SliceRecord], num_classes: usize) -> Result<Vec<f64>> {
    if masks.len() != records.len() {
        return Err(Error::Contract("one mask per record expected".into()));
    }
    let mut sum = vec![0.0f64; num_classes];
    let mut count = vec![0usize; num_classes];
    for (m, r) in masks.iter().zip(records) {
        let label = r
            .label
            .as_ref()
            .ok_or_else(|| Error::Contract("mask statistics need labeled slices".into()))?;
        if label.dim() != m.dim() {
            return Err(Error::Contract("mask and label shapes differ".into()));
        }
        for (&v, &c) in m.iter().zip(label.iter()) {
            if c >= 1 && (c as usize) <= num_classes {
                sum[c as usize - 1] += v as f64;
                count[c as usize - 1] += 1;
            }
        }
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect())
}
