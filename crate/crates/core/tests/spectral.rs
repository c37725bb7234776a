mod oracles;

use aliascope::spectral::{block_partition, downsampled_spectrum};
use aliascope::{dft2, downsample, idft2, RealGrid, Spectrum};
use num_complex::Complex64;
use proptest::prelude::*;

fn max_error(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[test]
fn dft2_matches_direct_summation() {
    let mut rng = oracles::rng(11);
    for &(m, n) in &[(4, 4), (8, 8), (12, 12), (16, 16), (4, 12), (6, 10), (1, 7), (16, 3)] {
        for _ in 0..5 {
            let x = oracles::random_grid(&mut rng, m, n);
            let got = dft2(&RealGrid::new(m, n, x.clone()).unwrap());
            let want = oracles::direct_dft2(&x, m, n);
            assert!(max_error(got.values(), &want) <= 1e-9, "{m}x{n}");
        }
    }
}

#[test]
fn twelve_by_twelve_tone_bins() {
    let x = RealGrid::new(12, 12, oracles::single_tone_12()).unwrap();
    let s = dft2(&x);
    for k in 0..12 {
        for l in 0..12 {
            let want = if l == 0 && (k == 4 || k == 8) { 72.0 } else { 0.0 };
            assert!((s.get(k, l).norm() - want).abs() < 1e-9, "({k},{l})");
        }
    }
    let xprime = downsampled_spectrum(&block_partition(&s, 2).unwrap());
    assert!((xprime.max_amplitude() - 18.0).abs() < 1e-9);
}

fn grid_strategy(sizes: &'static [usize]) -> impl Strategy<Value = RealGrid> {
    (prop::sample::select(sizes), prop::sample::select(sizes)).prop_flat_map(|(m, n)| {
        prop::collection::vec(-10.0f64..10.0, m * n).prop_map(move |v| RealGrid::new(m, n, v).unwrap())
    })
}

fn scale_of(s: &Spectrum) -> f64 {
    s.max_amplitude().max(1.0)
}

proptest! {
    #[test]
    fn downsample_spectrum_is_block_sum(x in grid_strategy(&[4, 8, 12, 16]), r in prop::sample::select(vec![2usize, 4])) {
        prop_assume!(x.height() % r == 0 && x.width() % r == 0);
        let direct = dft2(&downsample(&x, r).unwrap());
        let via_blocks = downsampled_spectrum(&block_partition(&dft2(&x), r).unwrap());
        prop_assert!(max_error(direct.values(), via_blocks.values()) <= 1e-9 * scale_of(&direct));
    }

    #[test]
    fn inverse_recovers_signal(x in grid_strategy(&[1, 2, 3, 4, 6, 8, 16])) {
        let back = idft2(&dft2(&x)).unwrap();
        for (a, b) in back.values().iter().zip(x.values()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn parseval(x in grid_strategy(&[2, 4, 5, 8, 12])) {
        let energy: f64 = x.values().iter().map(|v| v * v).sum();
        let spectral: f64 = dft2(&x).values().iter().map(|v| v.norm_sqr()).sum::<f64>()
            / (x.height() * x.width()) as f64;
        prop_assert!((energy - spectral).abs() <= 1e-9 * energy.max(1.0));
    }

    #[test]
    fn real_signals_have_conjugate_symmetric_spectra(x in grid_strategy(&[3, 4, 8, 12])) {
        let s = dft2(&x);
        let (m, n) = (s.height(), s.width());
        for k in 0..m {
            for l in 0..n {
                let mirror = s.get((m - k) % m, (n - l) % n).conj();
                prop_assert!((s.get(k, l) - mirror).norm() <= 1e-9 * scale_of(&s));
            }
        }
    }

    #[test]
    fn transform_is_linear(pair in grid_strategy(&[4, 8]).prop_flat_map(|a| {
        let (m, n) = (a.height(), a.width());
        (Just(a), prop::collection::vec(-10.0f64..10.0, m * n), -3.0f64..3.0)
            .prop_map(move |(a, b, c)| (a, RealGrid::new(m, n, b).unwrap(), c))
    })) {
        let (a, b, c) = pair;
        let combo = RealGrid::new(
            a.height(),
            a.width(),
            a.values().iter().zip(b.values()).map(|(x, y)| x + c * y).collect(),
        ).unwrap();
        let (fa, fb, fc) = (dft2(&a), dft2(&b), dft2(&combo));
        let want: Vec<Complex64> = fa.values().iter().zip(fb.values()).map(|(x, y)| x + c * y).collect();
        prop_assert!(max_error(fc.values(), &want) <= 1e-9 * scale_of(&fc));
    }

    #[test]
    fn blocks_reassemble_to_the_spectrum(x in grid_strategy(&[4, 8, 12]), r in prop::sample::select(vec![1usize, 2, 4])) {
        prop_assume!(x.height() % r == 0 && x.width() % r == 0);
        let s = dft2(&x);
        prop_assert_eq!(block_partition(&s, r).unwrap().assemble(), s);
    }
}

#[test]
fn factor_must_divide_both_axes() {
    let x = RealGrid::zeros(6, 8);
    assert!(downsample(&x, 4).is_err());
    assert!(downsample(&x, 0).is_err());
    assert!(block_partition(&dft2(&x), 3).is_err());
}
