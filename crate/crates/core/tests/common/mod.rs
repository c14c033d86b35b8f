#![allow(dead_code)]

use std::io::Write;

use cryoscore::mrc_io::{Patch, Volume};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Written straight to stderr so the line shows even for passing tests.
pub fn report(n: usize, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Element-wise minimum and maximum over `patches`.
pub fn envelope(patches: &[Patch]) -> (Patch, Patch) {
    let mut lo = patches[0].clone();
    let mut hi = patches[0].clone();
    for p in &patches[1..] {
        lo.zip_mut_with(p, |a, &b| *a = a.min(b));
        hi.zip_mut_with(p, |a, &b| *a = a.max(b));
    }
    (lo, hi)
}

/// Two unequal Gaussian blobs, off-center.
pub fn asymmetric_volume(n: usize) -> Volume {
    let c = (n as f64 - 1.0) / 2.0;
    let blobs = [([c - 3.0, c, c + 1.0], 2.2, 1.0), ([c + 3.5, c + 2.0, c - 1.0], 1.7, 0.6)];
    let data = Array3::from_shape_fn((n, n, n), |(k, j, i)| {
        blobs
            .iter()
            .map(|(p, s, a)| {
                let d2 = (i as f64 - p[0]).powi(2) + (j as f64 - p[1]).powi(2) + (k as f64 - p[2]).powi(2);
                a * (-d2 / (2.0 * s * s)).exp()
            })
            .sum()
    });
    Volume::new(data, 2.0).unwrap()
}

pub fn zeros(h: usize, w: usize) -> Patch {
    Array2::zeros((h, w))
}
