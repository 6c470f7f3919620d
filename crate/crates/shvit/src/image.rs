//! RGB images as planar f64 arrays. Pixel values live in `[0, 1]` until
//! normalization; transforms that can leave the range clamp explicitly.

use crate::tensor::{Tensor, TensorError, TensorResult};

/// Planar RGB image: `data[c * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> TensorResult<Self> {
        if data.len() != 3 * width * height || width == 0 || height == 0 {
            return Err(TensorError::DataLength {
                shape: vec![3, height, width],
                expected: 3 * width * height,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Image::new" });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(width * height));
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[channel * self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, value: f64) {
        self.data[channel * self.height * self.width + y * self.width + x] = value;
    }

    pub fn mean_per_channel(&self) -> [f64; 3] {
        let plane = self.height * self.width;
        let mut means = [0.0; 3];
        for (c, m) in means.iter_mut().enumerate() {
            *m = self.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        means
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// `[3 x H x W]` tensor sharing this image's layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone())
            .expect("image data is finite and sized")
    }

    pub fn from_tensor(t: &Tensor) -> TensorResult<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "Image::from_tensor",
                left: s.to_vec(),
                right: vec![3, 0, 0],
            });
        }
        Image::new(s[2], s[1], t.data().to_vec())
    }
}
