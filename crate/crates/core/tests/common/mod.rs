//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use cafegan::training::TrainConfig;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| r.random_range(lo..hi))
}

pub fn bits(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| f64::from(r.random_bool(0.5) as u8))
}

/// Row-wise cross-entropy summed over attributes, averaged over rows.
pub fn bce_oracle(p: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (pr, tr) in p.rows().into_iter().zip(t.rows()) {
        for (&pi, &ti) in pr.iter().zip(tr.iter()) {
            total -= ti * pi.ln() + (1.0 - ti) * (1.0 - pi).ln();
        }
    }
    total / p.nrows() as f64
}

/// Element-by-element complementary matching sum.
pub fn cm_oracle(a_x: &ArrayD<f64>, ac_x: &ArrayD<f64>, a_y: &ArrayD<f64>, ac_y: &ArrayD<f64>, v_d: &Array2<f64>) -> f64 {
    let s = a_x.shape();
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    let mut total = 0.0;
    for b in 0..n {
        for c in 0..k {
            let swapped = v_d[[b, c]] != 0.0;
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let (ax, acx) = (a_x[[b, c, i, j]], ac_x[[b, c, i, j]]);
                    let (ay, acy) = (a_y[[b, c, i, j]], ac_y[[b, c, i, j]]);
                    acc += if swapped { (ax - acy).abs() + (acx - ay).abs() } else { (ax - ay).abs() + (acx - acy).abs() };
                }
            }
            total += acc / (h * w) as f64;
        }
    }
    total / n as f64
}

/// Square root of a matrix with positive real spectrum by the Denman-Beavers
/// iteration.
pub fn sqrtm_db(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let delta = (&ny - &y).norm();
        y = ny;
        z = nz;
        if delta < 1e-15 * y.norm() {
            break;
        }
    }
    y
}

pub fn frechet_oracle(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let covmean = sqrtm_db(&(cov_a * cov_b));
    (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * covmean.trace()
}

/// Mean and unbiased covariance with explicit loops.
pub fn moments_oracle(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mut mu = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            mu[j] += x[[i, j]] / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (x[[i, a]] - mu[a]) * (x[[i, b]] - mu[b]) / (n as f64 - 1.0);
            }
        }
    }
    (mu, cov)
}

/// Random symmetric positive definite matrix.
pub fn spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let m = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(d, d) * 0.5
}

/// Desk setup shrunk so a few epochs finish in seconds.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        synthetic_n: 12,
        holdout: 8,
        g_levels: 2,
        g_base_width: 4,
        g_max_width: 8,
        d_base_width: 4,
        d_max_width: 8,
        d_classifier_width: 4,
        d_steps_per_g: 2,
        ..TrainConfig::desk()
    }
}

/// Bitwise equality of two float slices.
pub fn bit_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
