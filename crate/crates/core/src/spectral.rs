//! Real 2-D signals, their discrete Fourier transforms, downsampling, and the
//! polyphase block decomposition that links a spectrum to the spectrum of its
//! downsampled signal.
//!
//! The forward transform is unnormalized,
//! `X[k,l] = sum_{i,j} x[i,j] exp(-2*pi*i*(k*i/m + l*j/n))`, and the inverse
//! carries the `1/(m*n)` factor. Power-of-two axes use an iterative radix-2
//! FFT; other lengths fall back to direct summation.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A real-valued `height x width` signal stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl RealGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width {
            return Err(Error::BadLength {
                height,
                width,
                expected: height * width,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / width,
                col: pos % width,
                value: values[pos],
            });
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Builds a grid by evaluating `f(row, col)` at every position.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// A complex `height x width` spectrum. Entry `(k, l)` is the standard DFT
/// bin: `k` indexes the row frequency, `l` the column frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    values: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, values: Vec<Complex64>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width {
            return Err(Error::BadLength {
                height,
                width,
                expected: height * width,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / width,
                col: pos % width,
                value: if values[pos].re.is_finite() {
                    values[pos].im
                } else {
                    values[pos].re
                },
            });
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "spectrum dimensions must be positive");
        Self {
            height,
            width,
            values: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn get(&self, k: usize, l: usize) -> Complex64 {
        self.values[k * self.width + l]
    }

    pub fn set(&mut self, k: usize, l: usize, value: Complex64) {
        assert!(value.is_finite(), "spectrum entries must be finite");
        self.values[k * self.width + l] = value;
    }

    /// Largest entry magnitude; zero for an all-zero spectrum.
    pub fn max_amplitude(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// The `r x r` partition of a spectrum into equally sized blocks.
///
/// Block indices are 1-based: block `(1, 1)` holds the lowest rows and
/// columns, block `(i, j)` holds rows `(i-1)*m/r .. i*m/r` and columns
/// `(j-1)*n/r .. j*n/r`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSet {
    factor: usize,
    blocks: Vec<Spectrum>,
}

impl BlockSet {
    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn block_height(&self) -> usize {
        self.blocks[0].height
    }

    pub fn block_width(&self) -> usize {
        self.blocks[0].width
    }

    /// Block `(i, j)`, 1-based.
    pub fn block(&self, i: usize, j: usize) -> &Spectrum {
        assert!(
            (1..=self.factor).contains(&i) && (1..=self.factor).contains(&j),
            "block index ({i}, {j}) outside 1..={}",
            self.factor
        );
        &self.blocks[(i - 1) * self.factor + (j - 1)]
    }

    /// Iterates `((i, j), block)` in row-major block order, 1-based indices.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &Spectrum)> {
        let r = self.factor;
        self.blocks
            .iter()
            .enumerate()
            .map(move |(idx, b)| ((idx / r + 1, idx % r + 1), b))
    }

    /// Places the blocks back into the full spectrum.
    pub fn assemble(&self) -> Spectrum {
        let (bh, bw, r) = (self.block_height(), self.block_width(), self.factor);
        let width = bw * r;
        let mut values = vec![Complex64::new(0.0, 0.0); bh * r * width];
        for ((i, j), block) in self.iter() {
            for p in 0..bh {
                let row = (i - 1) * bh + p;
                let dst = row * width + (j - 1) * bw;
                values[dst..dst + bw].copy_from_slice(&block.values[p * bw..(p + 1) * bw]);
            }
        }
        Spectrum {
            height: bh * r,
            width,
            values,
        }
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "grid dimensions must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Unnormalized 2-D DFT of a real grid.
pub fn dft2(signal: &RealGrid) -> Spectrum {
    let values = signal.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let values = transform2(values, signal.height, signal.width, Direction::Forward);
    Spectrum {
        height: signal.height,
        width: signal.width,
        values,
    }
}

/// Inverse of [`dft2`]. Fails when the result has an imaginary residue above
/// `1e-6` times the largest input amplitude, i.e. when the spectrum is not
/// the transform of a real signal.
pub fn idft2(spectrum: &Spectrum) -> Result<RealGrid> {
    let (m, n) = (spectrum.height, spectrum.width);
    let values = transform2(spectrum.values.clone(), m, n, Direction::Inverse);
    let scale = 1.0 / (m * n) as f64;
    let tolerance = 1e-6 * spectrum.max_amplitude();
    let residue = values.iter().map(|v| (v.im * scale).abs()).fold(0.0, f64::max);
    if residue > tolerance {
        return Err(Error::NotConjugateSymmetric { residue, tolerance });
    }
    RealGrid::new(m, n, values.iter().map(|v| v.re * scale).collect())
}

/// Polar decomposition `X = A * exp(i * phi)`: returns `(A, phi)` with
/// `phi` in `(-pi, pi]` and a zero phase for zero-magnitude entries.
pub fn amplitude_phase(spectrum: &Spectrum) -> (RealGrid, RealGrid) {
    let mut amp = Vec::with_capacity(spectrum.values.len());
    let mut phase = Vec::with_capacity(spectrum.values.len());
    for v in &spectrum.values {
        let a = v.norm();
        amp.push(a);
        let p = if a == 0.0 {
            0.0
        } else {
            let p = v.im.atan2(v.re);
            if p <= -PI {
                PI
            } else {
                p
            }
        };
        phase.push(p);
    }
    (
        RealGrid {
            height: spectrum.height,
            width: spectrum.width,
            values: amp,
        },
        RealGrid {
            height: spectrum.height,
            width: spectrum.width,
            values: phase,
        },
    )
}

/// Rotates rows by `m/2` and columns by `n/2` (floor) so bin `(0, 0)` lands
/// at the center.
pub fn center_shift(spectrum: &Spectrum) -> Spectrum {
    let (m, n) = (spectrum.height, spectrum.width);
    let (dm, dn) = (m / 2, n / 2);
    let mut values = vec![Complex64::new(0.0, 0.0); m * n];
    for k in 0..m {
        let row = (k + dm) % m;
        for l in 0..n {
            values[row * n + (l + dn) % n] = spectrum.values[k * n + l];
        }
    }
    Spectrum {
        height: m,
        width: n,
        values,
    }
}

/// Keeps every `factor`-th sample along both axes: `out[k,l] = x[r*k, r*l]`.
pub fn downsample(signal: &RealGrid, factor: usize) -> Result<RealGrid> {
    check_factor(signal.height, signal.width, factor)?;
    let (h, w) = (signal.height / factor, signal.width / factor);
    let mut values = Vec::with_capacity(h * w);
    for k in 0..h {
        let row = &signal.values[k * factor * signal.width..];
        values.extend((0..w).map(|l| row[l * factor]));
    }
    Ok(RealGrid {
        height: h,
        width: w,
        values,
    })
}

/// Splits a spectrum into its `r x r` blocks.
pub fn block_partition(spectrum: &Spectrum, factor: usize) -> Result<BlockSet> {
    check_factor(spectrum.height, spectrum.width, factor)?;
    let (bh, bw) = (spectrum.height / factor, spectrum.width / factor);
    let mut blocks = Vec::with_capacity(factor * factor);
    for bi in 0..factor {
        for bj in 0..factor {
            let mut values = Vec::with_capacity(bh * bw);
            for p in 0..bh {
                let start = (bi * bh + p) * spectrum.width + bj * bw;
                values.extend_from_slice(&spectrum.values[start..start + bw]);
            }
            blocks.push(Spectrum {
                height: bh,
                width: bw,
                values,
            });
        }
    }
    Ok(BlockSet { factor, blocks })
}

/// Spectrum of the downsampled signal: the block sum scaled by `1/r^2`.
pub fn downsampled_spectrum(blocks: &BlockSet) -> Spectrum {
    let first = &blocks.blocks[0];
    let mut values = vec![Complex64::new(0.0, 0.0); first.values.len()];
    for block in &blocks.blocks {
        for (acc, v) in values.iter_mut().zip(&block.values) {
            *acc += v;
        }
    }
    let scale = 1.0 / (blocks.factor * blocks.factor) as f64;
    for v in &mut values {
        *v *= scale;
    }
    Spectrum {
        height: first.height,
        width: first.width,
        values,
    }
}

fn check_factor(height: usize, width: usize, factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::invalid("downsampling factor must be positive"));
    }
    if height % factor != 0 || width % factor != 0 {
        return Err(Error::NotDivisible { height, width, factor });
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

fn transform2(mut data: Vec<Complex64>, m: usize, n: usize, dir: Direction) -> Vec<Complex64> {
    let row_plan = Plan::new(n, dir);
    let mut scratch = vec![Complex64::new(0.0, 0.0); m.max(n)];
    for row in data.chunks_exact_mut(n) {
        row_plan.run(row, &mut scratch[..n]);
    }
    let col_plan = if m == n { row_plan } else { Plan::new(m, dir) };
    let mut column = vec![Complex64::new(0.0, 0.0); m];
    for l in 0..n {
        for k in 0..m {
            column[k] = data[k * n + l];
        }
        col_plan.run(&mut column, &mut scratch[..m]);
        for k in 0..m {
            data[k * n + l] = column[k];
        }
    }
    data
}

/// A 1-D transform of fixed length: radix-2 when the length is a power of
/// two, direct summation otherwise.
struct Plan {
    len: usize,
    // twiddles[t] = exp(sign * 2*pi*i*t/len)
    twiddles: Vec<Complex64>,
    radix2: bool,
}

impl Plan {
    fn new(len: usize, dir: Direction) -> Self {
        let sign = match dir {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        };
        let twiddles = (0..len)
            .map(|t| {
                let angle = sign * 2.0 * PI * t as f64 / len as f64;
                Complex64::new(angle.cos(), angle.sin())
            })
            .collect();
        Self {
            len,
            twiddles,
            radix2: len.is_power_of_two(),
        }
    }

    fn run(&self, data: &mut [Complex64], scratch: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.len);
        if self.len == 1 {
            return;
        }
        if self.radix2 {
            self.radix2_in_place(data);
        } else {
            self.direct(data, scratch);
        }
    }

    fn direct(&self, data: &mut [Complex64], scratch: &mut [Complex64]) {
        let n = self.len;
        for (k, out) in scratch.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (t, x) in data.iter().enumerate() {
                acc += x * self.twiddles[(k * t) % n];
            }
            *out = acc;
        }
        data.copy_from_slice(scratch);
    }

    fn radix2_in_place(&self, data: &mut [Complex64]) {
        let n = self.len;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                data.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for t in 0..half {
                    let w = self.twiddles[t * stride];
                    let a = data[start + t];
                    let b = data[start + t + half] * w;
                    data[start + t] = a + b;
                    data[start + t + half] = a - b;
                }
            }
            size *= 2;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn constant_grid_has_only_dc() {
        let x = RealGrid::new(2, 2, vec![1.0; 4]).unwrap();
        let s = dft2(&x);
        assert!((s.get(0, 0) - c(4.0, 0.0)).norm() < 1e-12);
        for (idx, v) in s.values().iter().enumerate().skip(1) {
            assert!(v.norm() < 1e-12, "bin {idx} = {v}");
        }
    }

    #[test]
    fn nyquist_row_tone_lands_in_one_bin() {
        let x = RealGrid::from_fn(4, 4, |i, _| (PI * i as f64).cos()).unwrap();
        let s = dft2(&x);
        for k in 0..4 {
            for l in 0..4 {
                let want = if (k, l) == (2, 0) { 16.0 } else { 0.0 };
                assert!((s.get(k, l) - c(want, 0.0)).norm() < 1e-12, "({k},{l})");
            }
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let err = RealGrid::new(1, 2, vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 1, .. }));
        assert!(RealGrid::new(2, 2, vec![0.0; 3]).is_err());
        assert!(RealGrid::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn idft2_of_dc_is_all_ones() {
        let mut s = Spectrum::zeros(3, 5);
        s.set(0, 0, c(15.0, 0.0));
        let x = idft2(&s).unwrap();
        assert!(x.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn idft2_rejects_asymmetric_spectrum() {
        let mut s = Spectrum::zeros(8, 8);
        s.set(1, 2, c(1.0, 0.0));
        assert!(matches!(idft2(&s), Err(Error::NotConjugateSymmetric { .. })));
    }

    #[test]
    fn polar_form_of_simple_entries() {
        let s = Spectrum::new(1, 3, vec![c(3.0, 4.0), c(0.0, 0.0), c(-1.0, -0.0)]).unwrap();
        let (a, p) = amplitude_phase(&s);
        assert_eq!(a.values()[0], 5.0);
        assert_eq!(p.values()[0], 4f64.atan2(3.0));
        assert_eq!((a.values()[1], p.values()[1]), (0.0, 0.0));
        // -1 - 0i sits on the branch cut and must map to +pi.
        assert_eq!(p.values()[2], PI);
    }

    #[test]
    fn center_shift_moves_dc() {
        let mut s = Spectrum::zeros(4, 4);
        s.set(0, 0, c(1.0, 0.0));
        let shifted = center_shift(&s);
        assert_eq!(shifted.get(2, 2), c(1.0, 0.0));
        assert_eq!(shifted.values().iter().filter(|v| v.norm() > 0.0).count(), 1);
        assert_eq!(center_shift(&shifted), s);

        let mut odd = Spectrum::zeros(3, 3);
        odd.set(0, 0, c(1.0, 0.0));
        assert_eq!(center_shift(&odd).get(1, 1), c(1.0, 0.0));
    }

    #[test]
    fn downsample_keeps_every_rth_sample() {
        let ramp = RealGrid::from_fn(4, 4, |i, _| i as f64).unwrap();
        assert_eq!(downsample(&ramp, 1).unwrap(), ramp);
        let d = downsample(&ramp, 2).unwrap();
        assert_eq!(d.values(), &[0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            downsample(&ramp, 3),
            Err(Error::NotDivisible { factor: 3, .. })
        ));
    }

    #[test]
    fn block_layout_for_factor_two() {
        let values = (0..16).map(|v| c(v as f64, 0.0)).collect();
        let s = Spectrum::new(4, 4, values).unwrap();
        let blocks = block_partition(&s, 2).unwrap();
        let b11 = blocks.block(1, 1);
        assert_eq!(b11.values(), &[c(0.0, 0.0), c(1.0, 0.0), c(4.0, 0.0), c(5.0, 0.0)]);
        assert_eq!(blocks.block(2, 1).get(0, 0), c(8.0, 0.0));
        assert_eq!(blocks.block(1, 2).get(0, 0), c(2.0, 0.0));
        assert_eq!(blocks.assemble(), s);
        assert!(block_partition(&Spectrum::zeros(6, 4), 4).is_err());
    }

    #[test]
    fn block_sum_scales_by_inverse_square() {
        let zero = block_partition(&Spectrum::zeros(4, 4), 2).unwrap();
        assert_eq!(downsampled_spectrum(&zero), Spectrum::zeros(2, 2));

        let mut s = Spectrum::zeros(4, 4);
        s.set(1, 0, c(2.0, -8.0));
        let out = downsampled_spectrum(&block_partition(&s, 2).unwrap());
        assert_eq!(out.get(1, 0), c(0.5, -2.0));
    }
}
