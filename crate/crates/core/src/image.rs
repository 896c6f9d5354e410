use dmm_tensor::Tensor;

use crate::error::{DmmError, Result};

/// Single-channel intensity grid, row-major, nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(DmmError::Shape(format!(
                "{height}x{width} image with {} samples",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(DmmError::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// `(1, 1, h, w)` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.data.clone())
            .expect("image dimensions are consistent")
    }

    /// Stacks equally sized images into `(n, 1, h, w)`.
    pub fn stack(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| DmmError::Shape("cannot stack zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            first.same_dims(img)?;
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new(
            &[images.len(), 1, first.height, first.width],
            data,
        )?)
    }

    /// Channel `channel` of sample `index` of an `(n, c, h, w)` tensor.
    pub fn from_tensor(t: &Tensor, index: usize, channel: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4("image")?;
        if index >= n || channel >= c {
            return Err(DmmError::Shape(format!(
                "plane ({index}, {channel}) outside tensor {:?}",
                t.shape()
            )));
        }
        let start = (index * c + channel) * h * w;
        Self::new(h, w, t.data()[start..start + h * w].to_vec())
    }
}
