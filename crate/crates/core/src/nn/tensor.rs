use crate::error::{Error, Result};
use crate::nn::Real;

/// Dense `(batch, channels, height, width)` tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Number of values per batch item.
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, index: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[index * len..(index + 1) * len]
    }

    /// Single channel `c` of batch item `n` as a row-major plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, producer: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteTensor(producer.to_string()))
        }
    }

    /// Keeps every `factor`-th row and column of every plane.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::NotDivisible {
                height: h,
                width: w,
                factor,
            });
        }
        let (ho, wo) = (h / factor, w / factor);
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for plane in self.data.chunks_exact(h * w) {
            for y in 0..ho {
                let row = &plane[y * factor * w..];
                data.extend((0..wo).map(|x| row[x * factor]));
            }
        }
        Ok(Self {
            dims: [n, c, ho, wo],
            data,
        })
    }
}
