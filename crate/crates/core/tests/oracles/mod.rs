//! Independent reference implementations used as test oracles. They share
//! no code with the library: plain loops, no fast paths.
#![allow(dead_code)]

use std::f64::consts::PI;

use aliascope::Category;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct double sum `X[k,l] = sum x[i,j] exp(-2 pi i (ki/m + lj/n))`, with
/// exponents reduced modulo the length before taking cos/sin.
pub fn direct_dft2(x: &[f64], m: usize, n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); m * n];
    for k in 0..m {
        for l in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..m {
                for j in 0..n {
                    let turns = ((k * i) % m) as f64 / m as f64 + ((l * j) % n) as f64 / n as f64;
                    let angle = -2.0 * PI * turns;
                    acc += x[i * n + j] * Complex64::new(angle.cos(), angle.sin());
                }
            }
            out[k * n + l] = acc;
        }
    }
    out
}

/// Brute-force classifier: block `(bi, bj)` (1-based) holds bins
/// `((bi-1) m/r + p, (bj-1) n/r + q)`; every block magnitude is compared
/// against `max |X'| / divisor` directly.
pub fn brute_classify(x: &[Complex64], m: usize, n: usize, r: usize, divisor: f64) -> Vec<Category> {
    let (bh, bw) = (m / r, n / r);
    let bin = |bi: usize, bj: usize, p: usize, q: usize| x[((bi - 1) * bh + p) * n + (bj - 1) * bw + q];
    let mut max_prime = 0.0f64;
    for p in 0..bh {
        for q in 0..bw {
            let mut sum = Complex64::new(0.0, 0.0);
            for bi in 1..=r {
                for bj in 1..=r {
                    sum += bin(bi, bj, p, q);
                }
            }
            max_prime = max_prime.max((sum / (r * r) as f64).norm());
        }
    }
    let t = max_prime / divisor;
    let mut out = Vec::with_capacity(bh * bw);
    for p in 0..bh {
        for q in 0..bw {
            let hits: Vec<(usize, usize)> = (1..=r)
                .flat_map(|bi| (1..=r).map(move |bj| (bi, bj)))
                .filter(|&(bi, bj)| bin(bi, bj, p, q).norm() > t)
                .collect();
            out.push(match hits.as_slice() {
                [] => Category::NoPass,
                [(1, 1)] => Category::NonAliased,
                [_] => Category::Aliased,
                _ => Category::AliasedTangled,
            });
        }
    }
    out
}

pub fn random_grid(rng: &mut impl Rng, m: usize, n: usize) -> Vec<f64> {
    (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Sparse random spectra: a few strong entries over a weak floor, so that
/// all four categories occur.
pub fn random_spectrum(rng: &mut impl Rng, m: usize, n: usize) -> Vec<Complex64> {
    (0..m * n)
        .map(|_| {
            let scale = match rng.random_range(0..4) {
                0 => 10.0,
                1 => 1.0,
                _ => 0.05,
            };
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale
        })
        .collect()
}

/// `cos((2 pi / 3) i)` on a 12x12 grid.
pub fn single_tone_12() -> Vec<f64> {
    (0..144).map(|v| (2.0 * PI / 3.0 * (v / 12) as f64).cos()).collect()
}

/// `cos((pi / 3) i) + cos((2 pi / 3) i)` on a 12x12 grid.
pub fn two_tone_12() -> Vec<f64> {
    (0..144)
        .map(|v| {
            let i = (v / 12) as f64;
            (PI / 3.0 * i).cos() + (2.0 * PI / 3.0 * i).cos()
        })
        .collect()
}
