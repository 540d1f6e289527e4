//! Constructed datasets with known structure, used by tests and demos.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::nn::seeded_rng;

/// Four isotropic unit-variance Gaussian blobs in `dim` dimensions whose
/// means sit `separation` standard deviations apart along distinct axes
/// pairs. Returns (points, class index per row), rows grouped by class.
pub fn four_gaussians(rows_per_class: usize, separation: f64, dim: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    assert!(dim >= 2, "need at least two dimensions");
    let means = [
        [0.0, 0.0],
        [separation, 0.0],
        [0.0, separation],
        [separation, separation],
    ];
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let n = 4 * rows_per_class;
    let mut x = Array2::zeros((n, dim));
    let mut y = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for r in 0..rows_per_class {
            let i = c * rows_per_class + r;
            for j in 0..dim {
                let centre = if j < 2 { mean[j] } else { 0.0 };
                x[[i, j]] = centre + noise.sample(&mut rng);
            }
            y.push(c);
        }
    }
    (x, y)
}

/// CSV text of [`four_gaussians`] with columns `f0..f{dim-1},class` and
/// class names `A`, `B`, `C`, `D`.
pub fn four_gaussians_csv(rows_per_class: usize, separation: f64, dim: usize, seed: u64) -> String {
    let (x, y) = four_gaussians(rows_per_class, separation, dim, seed);
    let names = ["A", "B", "C", "D"];
    let mut out = String::new();
    for j in 0..dim {
        write!(out, "f{j},").unwrap();
    }
    out.push_str("class\n");
    for (row, &c) in x.rows().into_iter().zip(&y) {
        for v in row {
            write!(out, "{v},").unwrap();
        }
        out.push_str(names[c]);
        out.push('\n');
    }
    out
}

/// Two noisy concentric circles with evenly spaced angles (random phase per
/// ring). Returns (points, ring index per row).
pub fn concentric_rings(points_per_ring: usize, radii: [f64; 2], noise_std: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, noise_std).expect("valid normal");
    let n = 2 * points_per_ring;
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for (ring, radius) in radii.iter().enumerate() {
        let phase: f64 = rng.random();
        for p in 0..points_per_ring {
            let i = ring * points_per_ring + p;
            let angle = (p as f64 + phase) * std::f64::consts::TAU / points_per_ring as f64;
            x[[i, 0]] = radius * angle.cos() + noise.sample(&mut rng);
            x[[i, 1]] = radius * angle.sin() + noise.sample(&mut rng);
            y.push(ring);
        }
    }
    (x, y)
}
