use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Labelled single-precision images stored contiguously in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    channels: usize,
    height: usize,
    width: usize,
    n_classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        n_classes: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let sample_len = channels * height * width;
        if sample_len == 0 || n_classes == 0 {
            return Err(Error::invalid("image set dimensions and class count must be positive"));
        }
        if images.len() != labels.len() * sample_len {
            return Err(Error::Shape(format!(
                "{} labels of {channels}x{height}x{width} images need {} values, got {}",
                labels.len(),
                labels.len() * sample_len,
                images.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {bad} outside {n_classes} classes")));
        }
        if let Some(pos) = images.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite pixel in sample {}",
                pos / sample_len
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            n_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `[channels, height, width]`.
    pub fn image_dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[index * n..(index + 1) * n]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Stacks the given samples into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let dims = [indices.len(), self.channels, self.height, self.width];
        let tensor = Tensor::new(dims, data).expect("batch dimensions are consistent");
        (tensor, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "sample index {bad} outside a set of {}",
                self.len()
            )));
        }
        let (tensor, labels) = self.batch(indices);
        Ok(Self {
            images: tensor.into_data(),
            labels,
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }
}
