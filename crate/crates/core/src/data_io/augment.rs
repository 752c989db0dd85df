use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometric and intensity augmentation. Rotations are restricted to quarter
/// turns so that label areas are preserved exactly; `rotation_degrees_max`
/// selects how many quarter turns (up to two in either direction) are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub crop_size: usize,
    pub rotation_degrees_max: f64,
    pub flip_probability: f64,
    pub intensity_jitter: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            crop_size: 32,
            rotation_degrees_max: 90.0,
            flip_probability: 0.5,
            intensity_jitter: 0.05,
        }
    }
}

impl AugmentSpec {
    pub fn disabled(size: usize) -> Self {
        Self {
            crop_size: size,
            rotation_degrees_max: 0.0,
            flip_probability: 0.0,
            intensity_jitter: 0.0,
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > image_size {
            return Err(Error::validation(
                "crop_size",
                format!("{} must be in 1..={image_size}", self.crop_size),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::validation("flip_probability", "must be in [0, 1]"));
        }
        if !(self.intensity_jitter >= 0.0) {
            return Err(Error::validation("intensity_jitter", "must be non-negative"));
        }
        if !(self.rotation_degrees_max >= 0.0) {
            return Err(Error::validation("rotation_degrees_max", "must be non-negative"));
        }
        Ok(())
    }

    fn max_quarter_turns(&self) -> i32 {
        ((self.rotation_degrees_max / 90.0).floor() as i32).min(2)
    }
}

fn rotate_quarter<T: Copy>(a: &Array2<T>, turns: i32) -> Array2<T> {
    let turns = turns.rem_euclid(4);
    let (h, w) = a.dim();
    match turns {
        0 => a.clone(),
        1 => Array2::from_shape_fn((w, h), |(y, x)| a[[x, w - 1 - y]]),
        2 => Array2::from_shape_fn((h, w), |(y, x)| a[[h - 1 - y, w - 1 - x]]),
        _ => Array2::from_shape_fn((w, h), |(y, x)| a[[h - 1 - x, y]]),
    }
}

fn flip_horizontal<T: Copy>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| a[[y, w - 1 - x]])
}

/// Augment a single-channel batch and its labels with the same geometric
/// transform per sample. Intensity jitter (random gain and offset, clamped to
/// [-1, 1]) touches the image only.
pub fn augment(
    images: &Array4<f32>,
    labels: Option<&Array3<u8>>,
    spec: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<(Array4<f32>, Option<Array3<u8>>)> {
    let (b, c, h, w) = images.dim();
    if c != 1 {
        return Err(Error::Contract(format!("augment expects 1 channel, got {c}")));
    }
    if h != w {
        return Err(Error::Contract("augment expects square slices".into()));
    }
    spec.validate(h)?;
    if let Some(l) = labels {
        if l.dim() != (b, h, w) {
            return Err(Error::Contract("label batch shape does not match images".into()));
        }
    }
    let size = spec.crop_size;
    let q = spec.max_quarter_turns();
    let mut out_images = Array4::<f32>::zeros((b, 1, size, size));
    let mut out_labels = labels.map(|_| Array3::<u8>::zeros((b, size, size)));
    for i in 0..b {
        let (oy, ox) = if size < h {
            (rng.random_range(0..=h - size), rng.random_range(0..=w - size))
        } else {
            (0, 0)
        };
        let turns = if q > 0 { rng.random_range(-q..=q) } else { 0 };
        let flip = spec.flip_probability > 0.0 && rng.random_bool(spec.flip_probability);
        let (gain, offset) = if spec.intensity_jitter > 0.0 {
            let j = spec.intensity_jitter as f32;
            (1.0 + rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (1.0, 0.0)
        };

        fn geom<T: Copy>(a: Array2<T>, turns: i32, flip: bool) -> Array2<T> {
            let a = rotate_quarter(&a, turns);
            if flip {
                flip_horizontal(&a)
            } else {
                a
            }
        }
        let img = geom(images.slice(s![i, 0, oy..oy + size, ox..ox + size]).to_owned(), turns, flip);
        let img = if spec.intensity_jitter > 0.0 {
            img.mapv(|v| (v * gain + offset).clamp(-1.0, 1.0))
        } else {
            img
        };
        out_images.slice_mut(s![i, 0, .., ..]).assign(&img);
        if let (Some(src), Some(dst)) = (labels, out_labels.as_mut()) {
            let lab = geom(src.slice(s![i, oy..oy + size, ox..ox + size]).to_owned(), turns, flip);
            dst.slice_mut(s![i, .., ..]).assign(&lab);
        }
    }
    Ok((out_images, out_labels))
}
