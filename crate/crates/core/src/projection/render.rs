use serde::{Deserialize, Serialize};

use super::camera::CameraModel;
use crate::error::{Error, Result};
use crate::numerics::FeatureMap;

/// Points at or below this camera depth are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// `N` feature vectors of `C` channels paired with `N` world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFeatureSet {
    channels: usize,
    features: Vec<f64>,
    coordinates: Vec<[f64; 3]>,
}

impl PointFeatureSet {
    pub fn new(channels: usize, features: Vec<f64>, coordinates: Vec<[f64; 3]>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("point features need at least one channel"));
        }
        if features.len() != channels * coordinates.len() {
            return Err(Error::shape(
                "PointFeatureSet::new",
                channels * coordinates.len(),
                features.len(),
            ));
        }
        if let Some(i) = coordinates.iter().position(|q| !q.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid(format!("point {i} has non-finite coordinates")));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "point {} has a non-finite feature",
                i / channels
            )));
        }
        Ok(Self {
            channels,
            features,
            coordinates,
        })
    }

    pub fn empty(channels: usize) -> Self {
        assert!(channels > 0);
        Self {
            channels,
            features: Vec::new(),
            coordinates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn coordinate(&self, i: usize) -> [f64; 3] {
        self.coordinates[i]
    }

    pub fn coordinates(&self) -> &[[f64; 3]] {
        &self.coordinates
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn push(&mut self, feature: &[f64], coordinate: [f64; 3]) -> Result<()> {
        if feature.len() != self.channels {
            return Err(Error::shape("PointFeatureSet::push", self.channels, feature.len()));
        }
        if !coordinate.iter().chain(feature).all(|v| v.is_finite()) {
            return Err(Error::invalid("pushed point is not finite"));
        }
        self.features.extend_from_slice(feature);
        self.coordinates.push(coordinate);
        Ok(())
    }

    /// Concatenates sets with equal channel width.
    pub fn concat<'a>(channels: usize, sets: impl IntoIterator<Item = &'a Self>) -> Result<Self> {
        let mut out = Self::empty(channels);
        for s in sets {
            if s.channels != channels {
                return Err(Error::shape("PointFeatureSet::concat", channels, s.channels));
            }
            out.features.extend_from_slice(&s.features);
            out.coordinates.extend_from_slice(&s.coordinates);
        }
        Ok(out)
    }
}

/// Binary `H×W` map of pixels where rendered features exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("ValidityMask::new", height * width, data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_values(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask values must be 0 or 1, got {v}")));
        }
        Self::new(height, width, values.iter().map(|&v| v == 1).collect())
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        u8::from(self.data[row * self.width + col])
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }
}

/// Projects point features into a `C×H×W` image with a nearest-depth
/// z-buffer.
///
/// A point lands at `(row, col) = (round(fy·y/z + cy), round(fx·x/z + cx))`
/// in camera coordinates. Depth ties keep the lower input index. Pixels no
/// point reaches are exactly zero.
pub fn render_points(
    points: &PointFeatureSet,
    camera: &CameraModel,
    out_height: usize,
    out_width: usize,
) -> Result<FeatureMap> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::invalid("render output size must be positive"));
    }
    let channels = points.channels();
    let mut depth = vec![f64::INFINITY; out_height * out_width];
    let mut winner = vec![usize::MAX; out_height * out_width];

    for (i, q) in points.coordinates().iter().enumerate() {
        let p = camera.world_to_camera(*q);
        if p[2] <= MIN_DEPTH {
            continue;
        }
        let (u, v) = camera.pixel_of_camera_point(p);
        let (col, row) = (u.round(), v.round());
        if !(col >= 0.0 && row >= 0.0 && col < out_width as f64 && row < out_height as f64) {
            continue;
        }
        let pix = row as usize * out_width + col as usize;
        if p[2] < depth[pix] {
            depth[pix] = p[2];
            winner[pix] = i;
        }
    }

    let mut map = FeatureMap::zeros(channels, out_height, out_width);
    let plane = out_height * out_width;
    for (pix, &w) in winner.iter().enumerate() {
        if w == usize::MAX {
            continue;
        }
        for (c, &f) in points.feature(w).iter().enumerate() {
            map.data_mut()[c * plane + pix] = f;
        }
    }
    Ok(map)
}

/// Pixel is valid iff its channel sum is nonzero.
pub fn compute_validity_mask(rendered: &FeatureMap) -> ValidityMask {
    let (c, h, w) = rendered.dims();
    let plane = h * w;
    let data = (0..plane)
        .map(|p| (0..c).map(|ch| rendered.data()[ch * plane + p]).sum::<f64>() != 0.0)
        .collect();
    ValidityMask {
        height: h,
        width: w,
        data,
    }
}

pub fn count_valid(mask: &ValidityMask) -> usize {
    mask.data.iter().filter(|&&m| m).count()
}
