//! Synthetic oscillation-classification data.
//!
//! Each sample is `x[i,j] = cos(w1*i + t1) * cos(w2*j + t2) + A * a[i,j]` on a
//! square grid, where `(w1, w2) = (k*pi/N, l*pi/N)` is the class, the phases
//! are uniform on `[0, 2*pi)` and `a` is uniform noise on `(-1/2, 1/2)`.
//! Rows carry `w1`, columns carry `w2`.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ImageSet;
use crate::spectral::RealGrid;

pub const DATASET_MAGIC: &[u8; 4] = b"OSCD";
pub const DATASET_VERSION: u32 = 1;

/// Frequency class `(k, l)` on an `N x N` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrequencyLabel {
    pub k: u32,
    pub l: u32,
    pub n_freqs: u32,
}

impl FrequencyLabel {
    pub fn new(k: u32, l: u32, n_freqs: u32) -> Result<Self> {
        if k >= n_freqs || l >= n_freqs {
            return Err(Error::invalid(format!(
                "frequency index ({k}, {l}) outside a {n_freqs}x{n_freqs} grid"
            )));
        }
        Ok(Self { k, l, n_freqs })
    }

    pub fn from_class_index(index: u32, n_freqs: u32) -> Result<Self> {
        if n_freqs == 0 {
            return Err(Error::invalid("n_freqs must be positive"));
        }
        Self::new(index / n_freqs, index % n_freqs, n_freqs)
    }

    /// `(k*pi/N, l*pi/N)`.
    pub fn omega(&self) -> (f64, f64) {
        let n = self.n_freqs as f64;
        (self.k as f64 * PI / n, self.l as f64 * PI / n)
    }

    pub fn class_index(&self) -> u32 {
        self.k * self.n_freqs + self.l
    }
}

/// All `N^2` labels in row-major `(k, l)` order, so position equals class index.
pub fn frequency_grid(n_freqs: u32) -> Vec<FrequencyLabel> {
    (0..n_freqs)
        .flat_map(|k| (0..n_freqs).map(move |l| FrequencyLabel { k, l, n_freqs }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RealGrid,
    pub label: FrequencyLabel,
    pub theta: (f64, f64),
    pub noise_amplitude: f64,
}

pub fn generate_sample<R: Rng + ?Sized>(
    label: FrequencyLabel,
    size: usize,
    theta: (f64, f64),
    noise_amplitude: f64,
    rng: &mut R,
) -> Result<Sample> {
    if !(noise_amplitude >= 0.0 && noise_amplitude.is_finite()) {
        return Err(Error::invalid(format!(
            "noise amplitude must be finite and non-negative, got {noise_amplitude}"
        )));
    }
    let (w1, w2) = label.omega();
    let cols: Vec<f64> = (0..size).map(|j| (w2 * j as f64 + theta.1).cos()).collect();
    let image = RealGrid::from_fn(size, size, |i, j| {
        let clean = (w1 * i as f64 + theta.0).cos() * cols[j];
        let alpha: f64 = rng.random_range(-0.5..0.5);
        clean + noise_amplitude * alpha
    })?;
    Ok(Sample {
        image,
        label,
        theta,
        noise_amplitude,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_freqs: u32,
    pub size: u32,
    pub count: u32,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn n_classes(&self) -> u32 {
        self.n_freqs * self.n_freqs
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_freqs == 0 || self.size == 0 {
            return Err(Error::invalid("n_freqs and size must be positive"));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(Error::invalid(format!(
                "noise amplitude must be finite and non-negative, got {}",
                self.noise_amplitude
            )));
        }
        let classes = self.n_classes();
        if self.count == 0 || self.count % classes != 0 {
            return Err(Error::invalid(format!(
                "count {} is not a positive multiple of N^2 = {classes}",
                self.count
            )));
        }
        Ok(())
    }
}

/// One stored sample: class index and single-precision pixels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample {
    pub class_index: u32,
    pub pixels: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<StoredSample>,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let labels = frequency_grid(spec.n_freqs);
    let per_class = (spec.count / spec.n_classes()) as usize;
    let mut order: Vec<u32> = labels
        .iter()
        .flat_map(|l| std::iter::repeat_n(l.class_index(), per_class))
        .collect();
    order.shuffle(&mut sample_rng(spec.seed, 0));

    let size = spec.size as usize;
    let samples = order
        .par_iter()
        .enumerate()
        .map(|(index, &class)| {
            let mut rng = sample_rng(spec.seed, index as u64 + 1);
            let theta = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
            let label = labels[class as usize];
            let sample = generate_sample(label, size, theta, spec.noise_amplitude, &mut rng)?;
            Ok(StoredSample {
                class_index: class,
                pixels: sample.image.values().iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: *spec, samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes() as usize
    }

    /// Per-class sample counts indexed by class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in &self.samples {
            counts[s.class_index as usize] += 1;
        }
        counts
    }

    /// Flattens into the single-channel image set the network consumes.
    pub fn to_image_set(&self) -> ImageSet {
        let size = self.spec.size as usize;
        let mut images = Vec::with_capacity(self.samples.len() * size * size);
        let mut labels = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            images.extend_from_slice(&s.pixels);
            labels.push(s.class_index as usize);
        }
        ImageSet::new(1, size, size, self.n_classes(), images, labels)
            .expect("dataset invariants guarantee a consistent image set")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let size = self.spec.size as usize;
        let mut out = Vec::with_capacity(40 + self.samples.len() * (4 + 4 * size * size) + 4);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.spec.size.to_le_bytes());
        out.extend_from_slice(&self.spec.size.to_le_bytes());
        out.extend_from_slice(&self.spec.n_freqs.to_le_bytes());
        out.extend_from_slice(&self.spec.noise_amplitude.to_le_bytes());
        out.extend_from_slice(&self.spec.seed.to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.class_index.to_le_bytes());
            for p in &s.pixels {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode_enveloped(bytes, DATASET_MAGIC, DATASET_VERSION, Self::parse_body)
    }

    fn parse_body(r: &mut ByteReader<'_>) -> Result<Self> {
        let count = r.u32()?;
        let height = r.u32()?;
        let width = r.u32()?;
        let n_freqs = r.u32()?;
        let noise_amplitude = r.f64()?;
        let seed = r.u64()?;
        if height != width {
            return Err(Error::Malformed(format!(
                "non-square images ({height}x{width}) are not supported"
            )));
        }
        let spec = DatasetSpec {
            n_freqs,
            size: height,
            count,
            noise_amplitude,
            seed,
        };
        spec.validate().map_err(|e| Error::Malformed(e.to_string()))?;
        let pixels_per = (height as usize) * (width as usize);
        let needed = count as usize * (4 + 4 * pixels_per);
        if r.remaining() < needed {
            return Err(Error::Truncated(format!(
                "{count} samples need {needed} bytes, {} present",
                r.remaining()
            )));
        }
        let mut samples = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let class_index = r.u32()?;
            if class_index >= spec.n_classes() {
                return Err(Error::Malformed(format!(
                    "class index {class_index} outside {} classes",
                    spec.n_classes()
                )));
            }
            let pixels = (0..pixels_per).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            samples.push(StoredSample { class_index, pixels });
        }
        if !r.is_empty() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after the last sample",
                r.remaining()
            )));
        }
        Ok(Self { spec, samples })
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

/// Decodes a `magic | version u32 | body | crc32` envelope.
///
/// A checksum mismatch is reported as truncation when the body is too short
/// for `parse`, and as a checksum failure otherwise.
pub(crate) fn decode_enveloped<T>(
    bytes: &[u8],
    magic: &[u8; 4],
    version: u32,
    parse: impl Fn(&mut ByteReader<'_>) -> Result<T>,
) -> Result<T> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, no room for a header", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("missing version field".into()));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::VersionMismatch {
            expected: version,
            found,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("missing checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    let parsed = parse(&mut ByteReader::new(&body[8..]));
    if stored != computed {
        return match parsed {
            Err(Error::Truncated(msg)) => Err(Error::Truncated(msg)),
            _ => Err(Error::Checksum { stored, computed }),
        };
    }
    parsed
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
