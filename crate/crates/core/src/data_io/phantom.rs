//! Deterministic two-domain phantom.
//!
//! Each volume is a body ellipse with a bright one-pixel skin line holding
//! `num_classes` filled elliptical structures whose size and position drift
//! smoothly through the slices. Both domains share geometry statistics.
//! Rendering differs globally (body tissue level and texture) and per
//! structure: in the target domain class k's intensity drops toward a common
//! floor and gains diagonal stripes, both in proportion to
//! `per_class_gap[k]`. Structures stay brighter than tissue in both domains.
//!
//! Every slice contains air at 0 and skin at 1, so per-slice min-max
//! normalisation is the same affine map in both domains.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{preprocess, DomainLabel, SliceRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub num_classes: usize,
    pub per_class_gap: Vec<f64>,
    pub image_size: usize,
    pub volumes_per_domain: usize,
    pub slices_per_volume: usize,
    pub seed: u64,
    /// Debug only: target volumes reuse the source geometry.
    #[serde(default)]
    pub paired: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            per_class_gap: vec![0.2, 0.8],
            image_size: 32,
            volumes_per_domain: 30,
            slices_per_volume: 8,
            seed: 0,
            paired: false,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 8 {
            return Err(Error::validation("num_classes", "must be in 1..=8"));
        }
        if self.per_class_gap.len() != self.num_classes {
            return Err(Error::validation(
                "per_class_gap",
                format!("expected {} entries, got {}", self.num_classes, self.per_class_gap.len()),
            ));
        }
        if let Some(g) = self.per_class_gap.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::validation("per_class_gap", format!("{g} is outside [0, 1]")));
        }
        if self.image_size < 16 {
            return Err(Error::validation("image_size", "must be at least 16"));
        }
        if self.volumes_per_domain == 0 {
            return Err(Error::validation("volumes_per_domain", "must be positive"));
        }
        if self.slices_per_volume == 0 {
            return Err(Error::validation("slices_per_volume", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomData {
    pub source: Vec<SliceRecord>,
    pub target: Vec<SliceRecord>,
    /// (z, y, x) voxel spacing in mm.
    pub spacing_mm: [f64; 3],
}

impl PhantomData {
    pub fn domain(&self, d: DomainLabel) -> &[SliceRecord] {
        match d {
            DomainLabel::Source => &self.source,
            DomainLabel::Target => &self.target,
        }
    }
}

pub const PHANTOM_SPACING_MM: [f64; 3] = [2.0, 1.0, 1.0];

const SKIN: f32 = 1.0;
/// Diagonal stripe amplitude of a target structure at gap 1.
const STRIPE_AMPLITUDE: f32 = 0.25;
const CLASS_BASE: [f32; 4] = [0.80, 0.70, 0.90, 0.62];
/// Intensity every class converges to at gap 1 in the target domain. It stays
/// above the target tissue level so no structure flips contrast polarity.
const CLASS_TARGET_FLOOR: f32 = 0.25;

struct DomainStyle {
    tissue: f32,
    smooth_amp: f32,
    white_std: f32,
}

fn domain_style(d: DomainLabel) -> DomainStyle {
    match d {
        DomainLabel::Source => DomainStyle {
            tissue: 0.30,
            smooth_amp: 0.05,
            white_std: 0.01,
        },
        DomainLabel::Target => DomainStyle {
            tissue: 0.12,
            smooth_amp: 0.01,
            white_std: 0.04,
        },
    }
}

fn class_rendering(d: DomainLabel, k: usize, gap: f64) -> (f32, f32) {
    let base = CLASS_BASE[k % CLASS_BASE.len()];
    match d {
        DomainLabel::Source => (base, 0.02),
        DomainLabel::Target => {
            let g = gap as f32;
            (base - g * (base - CLASS_TARGET_FLOOR), 0.02 + 0.06 * g)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }

    fn scaled(&self, s: f64) -> Ellipse {
        Ellipse {
            ry: self.ry * s,
            rx: self.rx * s,
            ..*self
        }
    }
}

struct Structure {
    shape: Ellipse,
    drift: (f64, f64),
}

struct VolumeGeometry {
    body: Ellipse,
    structures: Vec<Structure>,
}

fn sample_geometry(rng: &mut ChaCha8Rng, size: usize, num_classes: usize) -> VolumeGeometry {
    let s = size as f64;
    let body = Ellipse {
        cy: s / 2.0 + rng.random_range(-1.0..1.0),
        cx: s / 2.0 + rng.random_range(-1.0..1.0),
        ry: s * rng.random_range(0.40..0.45),
        rx: s * rng.random_range(0.40..0.46),
    };
    let mut structures: Vec<Structure> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let r = s * rng.random_range(0.13..0.18);
        let aspect: f64 = rng.random_range(0.8..1.2);
        let (ry, rx) = (r * aspect, r / aspect);
        let mut centre = (s / 2.0, s / 2.0);
        for _ in 0..200 {
            centre = (rng.random_range(0.28 * s..0.72 * s), rng.random_range(0.28 * s..0.72 * s));
            let clear = structures.iter().all(|o| {
                let d = ((o.shape.cy - centre.0).powi(2) + (o.shape.cx - centre.1).powi(2)).sqrt();
                d >= o.shape.ry.max(o.shape.rx) + ry.max(rx) + 1.5
            });
            if clear {
                break;
            }
        }
        let drift = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        structures.push(Structure {
            shape: Ellipse {
                cy: centre.0,
                cx: centre.1,
                ry,
                rx,
            },
            drift,
        });
    }
    VolumeGeometry { body, structures }
}

/// Smooth noise: bilinear interpolation of a coarse uniform grid.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, amp: f32) -> Array2<f32> {
    let cells = 4usize;
    let grid: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let step = (size - 1) as f32 / cells as f32;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let fy = y as f32 / step;
        let fx = x as f32 / step;
        let (iy, ix) = ((fy as usize).min(cells - 1), (fx as usize).min(cells - 1));
        let (ty, tx) = (fy - iy as f32, fx - ix as f32);
        let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
        let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
        let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
        amp * (top * (1.0 - ty) + bottom * ty)
    })
}

fn render_slice(
    geometry: &VolumeGeometry,
    z: usize,
    spec: &PhantomSpec,
    domain: DomainLabel,
    rng: &mut ChaCha8Rng,
) -> (Array2<f32>, Array2<u8>) {
    let size = spec.image_size;
    let depth = spec.slices_per_volume as f64;
    let t = if spec.slices_per_volume > 1 {
        (z as f64 + 0.5) / depth - 0.5
    } else {
        0.0
    };
    let profile = (1.0 - (t / 0.62).powi(2)).max(0.0).sqrt();
    let style = domain_style(domain);
    let texture = smooth_noise(rng, size, style.smooth_amp);
    let white = Normal::new(0.0f32, 1.0).expect("unit normal");

    let mut label = Array2::<u8>::zeros((size, size));
    let inside_body = |y: usize, x: usize| geometry.body.contains(y as f64 + 0.5, x as f64 + 0.5);
    for (k, st) in geometry.structures.iter().enumerate() {
        let outer = Ellipse {
            cy: st.shape.cy + st.drift.0 * t,
            cx: st.shape.cx + st.drift.1 * t,
            ..st.shape
        }
        .scaled(profile);
        if outer.ry < 0.75 || outer.rx < 0.75 {
            continue;
        }
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if !inside_body(y, x) || !outer.contains(py, px) {
                    continue;
                }
                label[[y, x]] = (k + 1) as u8;
            }
        }
    }

    let mut image = Array2::<f32>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            if !inside_body(y, x) {
                continue;
            }
            let edge = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                ny < 0 || nx < 0 || ny >= size as isize || nx >= size as isize || !inside_body(ny as usize, nx as usize)
            });
            let noise: f32 = white.sample(rng);
            image[[y, x]] = if edge {
                label[[y, x]] = 0;
                SKIN
            } else {
                match label[[y, x]] as usize {
                    0 => style.tissue + texture[[y, x]] + style.white_std * noise,
                    c => {
                        let gap = spec.per_class_gap[c - 1];
                        let (level, std) = class_rendering(domain, c - 1, gap);
                        let stripes = if ((y + x) / 2) % 2 == 0 { 1.0 } else { -1.0 };
                        let texture = match domain {
                            DomainLabel::Source => 0.0,
                            DomainLabel::Target => STRIPE_AMPLITUDE * gap as f32 * stripes,
                        };
                        level + texture + std * noise
                    }
                }
                .clamp(0.0, 1.0)
            };
        }
    }
    (image, label)
}

/// Stream identifiers keep every (domain, volume, purpose) draw independent
/// of the order in which volumes are generated.
fn stream(domain: DomainLabel, volume: usize, purpose: u64) -> u64 {
    ((domain.index() as u64 + 1) << 40) | ((volume as u64) << 8) | purpose
}

fn domain_records(spec: &PhantomSpec, domain: DomainLabel) -> Vec<SliceRecord> {
    let prefix = match domain {
        DomainLabel::Source => "s",
        DomainLabel::Target => "t",
    };
    let mut out = Vec::with_capacity(spec.volumes_per_domain * spec.slices_per_volume);
    for v in 0..spec.volumes_per_domain {
        let geometry_domain = if spec.paired { DomainLabel::Source } else { domain };
        let mut geo_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        geo_rng.set_stream(stream(geometry_domain, v, 0));
        let geometry = sample_geometry(&mut geo_rng, spec.image_size, spec.num_classes);
        let mut tex_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        tex_rng.set_stream(stream(domain, v, 1));
        for z in 0..spec.slices_per_volume {
            let (image, label) = render_slice(&geometry, z, spec, domain, &mut tex_rng);
            let raw = SliceRecord {
                image,
                label: Some(label),
                domain,
                volume_id: format!("{prefix}{v:03}"),
                slice_index: z,
            };
            out.push(preprocess(&raw, spec.image_size));
        }
    }
    out
}

/// Generate both domains; images are already normalised to [-1, 1].
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomData> {
    spec.validate()?;
    Ok(PhantomData {
        source: domain_records(spec, DomainLabel::Source),
        target: domain_records(spec, DomainLabel::Target),
        spacing_mm: PHANTOM_SPACING_MM,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(gaps: Vec<f64>) -> PhantomSpec {
        PhantomSpec {
            num_classes: gaps.len(),
            per_class_gap: gaps,
            image_size: 32,
            volumes_per_domain: 4,
            slices_per_volume: 6,
            seed: 11,
            paired: false,
        }
    }

    fn class_pixels(records: &[SliceRecord], class: u8) -> Vec<f32> {
        records
            .iter()
            .flat_map(|r| {
                let label = r.label.as_ref().unwrap();
                r.image
                    .iter()
                    .zip(label.iter())
                    .filter(move |(_, &l)| l == class)
                    .map(|(&v, _)| v)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn mean(v: &[f32]) -> f64 {
        v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
    }

    /// Total-variation distance between normalised 32-bin histograms on [-1, 1].
    fn histogram_distance(a: &[f32], b: &[f32]) -> f64 {
        let hist = |v: &[f32]| {
            let mut h = [0.0f64; 32];
            for &x in v {
                let bin = (((x + 1.0) / 2.0 * 32.0) as usize).min(31);
                h[bin] += 1.0 / v.len() as f64;
            }
            h
        };
        let (ha, hb) = (hist(a), hist(b));
        0.5 * ha.iter().zip(&hb).map(|(p, q)| (p - q).abs()).sum::<f64>()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom(&spec(vec![0.3, 0.7])).unwrap();
        let b = generate_phantom(&spec(vec![0.3, 0.7])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_differs() {
        let a = generate_phantom(&spec(vec![0.3, 0.7])).unwrap();
        let mut s = spec(vec![0.3, 0.7]);
        s.seed = 12;
        let b = generate_phantom(&s).unwrap();
        assert_ne!(a.source[0].image, b.source[0].image);
    }

    #[test]
    fn zero_gap_matches_class_means() {
        let data = generate_phantom(&spec(vec![0.0, 0.0])).unwrap();
        for class in 1..=2u8 {
            let ms = mean(&class_pixels(&data.source, class));
            let mt = mean(&class_pixels(&data.target, class));
            assert!((ms - mt).abs() < 0.02, "class {class}: {ms} vs {mt}");
        }
    }

    #[test]
    fn larger_gap_gives_larger_histogram_distance() {
        let data = generate_phantom(&spec(vec![0.1, 0.9])).unwrap();
        let d1 = histogram_distance(&class_pixels(&data.source, 1), &class_pixels(&data.target, 1));
        let d2 = histogram_distance(&class_pixels(&data.source, 2), &class_pixels(&data.target, 2));
        assert!(d2 > d1, "class-2 distance {d2} should exceed class-1 distance {d1}");
    }

    #[test]
    fn slices_are_normalised_and_labelled() {
        let data = generate_phantom(&spec(vec![0.5, 0.5])).unwrap();
        for r in data.source.iter().chain(&data.target) {
            let min = r.image.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = r.image.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!((min + 1.0).abs() < 1e-6 && (max - 1.0).abs() < 1e-6);
            r.validate(2).unwrap();
        }
        assert!(class_pixels(&data.source, 1).len() > 100);
        assert!(class_pixels(&data.source, 2).len() > 100);
    }

    #[test]
    fn unpaired_by_default_paired_on_request() {
        let unpaired = generate_phantom(&spec(vec![0.5, 0.5])).unwrap();
        assert_ne!(unpaired.source[2].label, unpaired.target[2].label);
        let mut s = spec(vec![0.5, 0.5]);
        s.paired = true;
        let paired = generate_phantom(&s).unwrap();
        assert_eq!(paired.source[2].label, paired.target[2].label);
    }

    #[test]
    fn invalid_spec_names_field() {
        let mut s = spec(vec![0.5, 0.5]);
        s.per_class_gap = vec![0.5];
        match generate_phantom(&s) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "per_class_gap"),
            other => panic!("unexpected {other:?}"),
        }
        let mut s = spec(vec![0.5, 1.5]);
        s.num_classes = 2;
        assert!(matches!(generate_phantom(&s), Err(Error::Validation { .. })));
    }
}
