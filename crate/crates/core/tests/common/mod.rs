//! Independent reference implementations and small fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use std::collections::HashSet;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dice in percent by explicit voxel-set intersection.
pub fn brute_dice(pred: &Array3<u8>, gt: &Array3<u8>, class_id: u8) -> f64 {
    let set = |a: &Array3<u8>| -> HashSet<(usize, usize, usize)> {
        a.indexed_iter().filter(|(_, &v)| v == class_id).map(|(i, _)| i).collect()
    };
    let (p, g) = (set(pred), set(gt));
    if p.is_empty() && g.is_empty() {
        return 100.0;
    }
    100.0 * 2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

fn brute_surface(a: &Array3<u8>, class_id: u8) -> Vec<[f64; 3]> {
    let (d, h, w) = a.dim();
    let member = |z: i64, y: i64, x: i64| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d as i64 || y >= h as i64 || x >= w as i64 {
            return false;
        }
        a[[z as usize, y as usize, x as usize]] == class_id
    };
    let mut out = Vec::new();
    for z in 0..d as i64 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !member(z, y, x) {
                    continue;
                }
                let border = !member(z - 1, y, x)
                    || !member(z + 1, y, x)
                    || !member(z, y - 1, x)
                    || !member(z, y + 1, x)
                    || !member(z, y, x - 1)
                    || !member(z, y, x + 1);
                if border {
                    out.push([z as f64, y as f64, x as f64]);
                }
            }
        }
    }
    out
}

/// All-pairs symmetric average surface distance; `None` if a surface is empty.
pub fn brute_asd(pred: &Array3<u8>, gt: &Array3<u8>, class_id: u8, spacing: [f64; 3]) -> Option<f64> {
    let sp = brute_surface(pred, class_id);
    let sg = brute_surface(gt, class_id);
    if sp.is_empty() || sg.is_empty() {
        return None;
    }
    let dist = |a: &[f64; 3], b: &[f64; 3]| {
        (0..3).map(|i| ((a[i] - b[i]) * spacing[i]).powi(2)).sum::<f64>().sqrt()
    };
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter()
            .map(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Some((directed(&sp, &sg) + directed(&sg, &sp)) / 2.0)
}

/// Random label volume of at most 10 voxels per side made of a few boxes,
/// so that surfaces are non-trivial.
pub fn random_volume(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), classes: u8) -> Array3<u8> {
    let mut v = Array3::<u8>::zeros(dims);
    let boxes = rng.random_range(1..5);
    for _ in 0..boxes {
        let c = rng.random_range(1..=classes);
        let lo = [
            rng.random_range(0..dims.0),
            rng.random_range(0..dims.1),
            rng.random_range(0..dims.2),
        ];
        let hi = [
            rng.random_range(lo[0]..dims.0) + 1,
            rng.random_range(lo[1]..dims.1) + 1,
            rng.random_range(lo[2]..dims.2) + 1,
        ];
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    v[[z, y, x]] = c;
                }
            }
        }
    }
    // salt noise
    for x in v.iter_mut() {
        if rng.random_bool(0.05) {
            *x = rng.random_range(0..=classes);
        }
    }
    v
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
