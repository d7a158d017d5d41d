use crate::error::{Error, Result};

/// Linear RGB image, row-major with interleaved channels, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Per-pixel channel mean.
    pub fn gray(&self) -> Vec<f64> {
        self.data.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.same_shape(other)?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.data.len() as f64)
    }
}
