use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense `C×H×W` feature image stored in (channel, row, column) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "FeatureMap::new",
                channels * height * width,
                data.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0);
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(c, row, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, value: f64) {
        let i = self.index(c, row, col);
        self.data[i] = value;
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.channels, self.height, self.width],
            data: self.data.clone(),
        }
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor {
            shape: vec![self.channels, self.height, self.width],
            data: self.data,
        }
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        match *tensor.shape() {
            [c, h, w] => Self::new(c, h, w, tensor.data),
            _ => Err(Error::shape("FeatureMap::from_tensor", "[C, H, W]", tensor.shape)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl From<FeatureMap> for Tensor {
    fn from(map: FeatureMap) -> Self {
        map.into_tensor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_indexing_is_channel_row_column() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let map = FeatureMap::new(2, 3, 4, data).unwrap();
        assert_eq!(map.get(0, 0, 0), 0.0);
        assert_eq!(map.get(0, 1, 0), 4.0);
        assert_eq!(map.get(1, 0, 0), 12.0);
        assert_eq!(map.get(1, 2, 3), 23.0);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(FeatureMap::new(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(Tensor::new(vec![3, 2], vec![0.0; 5]).is_err());
        assert!(FeatureMap::new(0, 2, 2, vec![]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let map = FeatureMap::filled(3, 2, 2, 1.5);
        let back = FeatureMap::from_tensor(map.to_tensor()).unwrap();
        assert_eq!(map, back);
        assert!(FeatureMap::from_tensor(Tensor::zeros(vec![4])).is_err());
    }
}
