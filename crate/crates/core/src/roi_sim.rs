//! RoI-level targets: voxelize RoI point features, collapse to a
//! bird's-eye-view grid, resample with adaptive average pooling, and compare
//! with a masked L1 loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::FeatureMap;
use crate::projection::{compute_validity_mask, render_points, CameraModel, PointFeatureSet, ValidityMask};
use crate::scene_sim::masked_l1_loss;

/// Padding added around a point set's bounding box when no bounds are given.
pub const DEFAULT_BOUNDS_PADDING: f64 = 1e-6;

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for axis in 0..3 {
            if !(min[axis].is_finite() && max[axis].is_finite()) {
                return Err(Error::invalid("voxel bounds must be finite"));
            }
            if !(min[axis] < max[axis]) {
                return Err(Error::invalid(format!(
                    "degenerate voxel bounds on axis {axis}: min {} >= max {}",
                    min[axis], max[axis]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Bounding box of the points expanded by `padding` on every side, or
    /// `None` for an empty set.
    pub fn enclosing(points: &PointFeatureSet, padding: f64) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for q in points.coordinates() {
            for a in 0..3 {
                min[a] = min[a].min(q[a]);
                max[a] = max[a].max(q[a]);
            }
        }
        for a in 0..3 {
            min[a] -= padding;
            max[a] += padding;
        }
        Some(Self { min, max })
    }

    pub fn contains(&self, q: [f64; 3]) -> bool {
        (0..3).all(|a| q[a] >= self.min[a] && q[a] <= self.max[a])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl GridDims {
    pub fn new(x: usize, y: usize, z: usize) -> Result<Self> {
        if x == 0 || y == 0 || z == 0 {
            return Err(Error::invalid(format!("grid dims must be >= 1, got {x}x{y}x{z}")));
        }
        Ok(Self { x, y, z })
    }

    fn as_array(self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }
}

/// Mean point feature per voxel cell. Features are stored `X×Y×Z×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: GridDims,
    bounds: Bounds,
    channels: usize,
    features: Vec<f64>,
    counts: Vec<usize>,
}

impl VoxelGrid {
    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn cell(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims.y + y) * self.dims.z + z
    }

    pub fn count(&self, x: usize, y: usize, z: usize) -> usize {
        self.counts[self.cell(x, y, z)]
    }

    pub fn feature(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let i = self.cell(x, y, z) * self.channels;
        &self.features[i..i + self.channels]
    }

    pub fn occupied_cells(&self) -> usize {
        self.counts.iter().filter(|&&n| n > 0).count()
    }

    /// Cell index of `q` per axis, with points on the upper boundary
    /// clamped into the last cell; `None` outside the bounds.
    pub fn cell_of(&self, q: [f64; 3]) -> Option<[usize; 3]> {
        cell_index(&self.bounds, self.dims, q)
    }
}

/// Per-axis cell of `q` under `floor((q - min) / size)`, upper boundary
/// clamped into the last cell; `None` outside `bounds`.
pub fn cell_index(bounds: &Bounds, dims: GridDims, q: [f64; 3]) -> Option<[usize; 3]> {
    if !bounds.contains(q) {
        return None;
    }
    let n = dims.as_array();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let size = (bounds.max[a] - bounds.min[a]) / n[a] as f64;
        let i = ((q[a] - bounds.min[a]) / size).floor() as usize;
        idx[a] = i.min(n[a] - 1);
    }
    Some(idx)
}

/// Averages point features into voxel cells; points outside `bounds` are
/// dropped.
pub fn voxelize(points: &PointFeatureSet, dims: GridDims, bounds: Bounds) -> Result<VoxelGrid> {
    let bounds = Bounds::new(bounds.min, bounds.max)?;
    let channels = points.channels();
    let cells = dims.x * dims.y * dims.z;
    let mut grid = VoxelGrid {
        dims,
        bounds,
        channels,
        features: vec![0.0; cells * channels],
        counts: vec![0; cells],
    };
    for i in 0..points.len() {
        if let Some([x, y, z]) = cell_index(&bounds, dims, points.coordinate(i)) {
            let cell = grid.cell(x, y, z);
            grid.counts[cell] += 1;
            let dst = &mut grid.features[cell * channels..(cell + 1) * channels];
            dst.iter_mut().zip(points.feature(i)).for_each(|(d, f)| *d += f);
        }
    }
    for (cell, &n) in grid.counts.iter().enumerate() {
        if n > 0 {
            grid.features[cell * channels..(cell + 1) * channels]
                .iter_mut()
                .for_each(|v| *v /= n as f64);
        }
    }
    Ok(grid)
}

/// Collapses the vertical axis: each `(x, y)` column becomes the mean of
/// its occupied cells, or zero when the column is empty. Output is `C×X×Y`.
pub fn bev_collapse(grid: &VoxelGrid) -> FeatureMap {
    let GridDims { x: nx, y: ny, z: nz } = grid.dims;
    let c = grid.channels;
    let mut bev = FeatureMap::zeros(c, nx, ny);
    for x in 0..nx {
        for y in 0..ny {
            let mut occupied = 0usize;
            let mut acc = vec![0.0; c];
            for z in 0..nz {
                if grid.count(x, y, z) > 0 {
                    occupied += 1;
                    acc.iter_mut().zip(grid.feature(x, y, z)).for_each(|(a, f)| *a += f);
                }
            }
            if occupied > 0 {
                for (ch, a) in acc.iter().enumerate() {
                    bev.set(ch, x, y, a / occupied as f64);
                }
            }
        }
    }
    bev
}

/// Mean pooling onto an `H×W` grid whose regions partition the input:
/// output `(i, j)` covers rows `[⌊iA/H⌋, ⌈(i+1)A/H⌉)` and columns
/// `[⌊jB/W⌋, ⌈(j+1)B/W⌉)`.
pub fn adaptive_avg_pool(input: &FeatureMap, out_height: usize, out_width: usize) -> Result<FeatureMap> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::invalid("pooling output size must be positive"));
    }
    let out = kernels::adaptive_avg_pool_forward(input.data(), input.dims(), out_height, out_width);
    FeatureMap::new(input.channels(), out_height, out_width, out)
}

/// Where RoI voxel bounds come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundsPolicy {
    /// Bounding box of the RoI points, padded by [`DEFAULT_BOUNDS_PADDING`].
    FitPoints,
    Fixed(Bounds),
}

/// Pooled RoI teacher features and their validity mask: voxelize, collapse
/// to BEV, pool to the student's RoI resolution, then mask.
pub fn roi_teacher_map(
    points: &PointFeatureSet,
    dims: GridDims,
    bounds: BoundsPolicy,
    out_height: usize,
    out_width: usize,
) -> Result<(FeatureMap, ValidityMask)> {
    let bounds = match bounds {
        BoundsPolicy::Fixed(b) => Some(b),
        BoundsPolicy::FitPoints => Bounds::enclosing(points, DEFAULT_BOUNDS_PADDING),
    };
    let Some(bounds) = bounds else {
        if out_height == 0 || out_width == 0 {
            return Err(Error::invalid("pooling output size must be positive"));
        }
        return Ok((
            FeatureMap::zeros(points.channels(), out_height, out_width),
            ValidityMask::zeros(out_height, out_width),
        ));
    };
    let grid = voxelize(points, dims, bounds)?;
    let bev = bev_collapse(&grid);
    let pooled = adaptive_avg_pool(&bev, out_height, out_width)?;
    let mask = compute_validity_mask(&pooled);
    Ok((pooled, mask))
}

/// Image-space alternative: render the RoI points like scene features.
pub fn roi_teacher_map_image(
    points: &PointFeatureSet,
    camera: &CameraModel,
    out_height: usize,
    out_width: usize,
) -> Result<(FeatureMap, ValidityMask)> {
    let map = render_points(points, camera, out_height, out_width)?;
    let mask = compute_validity_mask(&map);
    Ok((map, mask))
}

/// RoI-level imitation loss; same contract as the scene loss with the RoI
/// mask's valid count as denominator.
pub fn roi_loss(student: &FeatureMap, teacher: &FeatureMap, mask: &ValidityMask) -> Result<f64> {
    masked_l1_loss(student, teacher, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::count_valid;

    fn unit_bounds() -> Bounds {
        Bounds::new([0.0; 3], [1.0; 3]).unwrap()
    }

    #[test]
    fn single_point_fills_one_cell() {
        let pts = PointFeatureSet::new(1, vec![4.0], vec![[0.3, 0.6, 0.9]]).unwrap();
        let grid = voxelize(&pts, GridDims::new(2, 2, 2).unwrap(), unit_bounds()).unwrap();
        assert_eq!(grid.count(0, 1, 1), 1);
        assert_eq!(grid.feature(0, 1, 1), &[4.0]);
        assert_eq!(grid.occupied_cells(), 1);
    }

    #[test]
    fn same_cell_points_average() {
        let pts = PointFeatureSet::new(1, vec![2.0, 4.0], vec![[0.1; 3], [0.2; 3]]).unwrap();
        let grid = voxelize(&pts, GridDims::new(2, 2, 2).unwrap(), unit_bounds()).unwrap();
        assert_eq!(grid.feature(0, 0, 0), &[3.0]);
    }

    #[test]
    fn upper_boundary_clamps_and_outside_drops() {
        let pts = PointFeatureSet::new(1, vec![1.0, 5.0], vec![[1.0; 3], [1.5, 0.5, 0.5]]).unwrap();
        let grid = voxelize(&pts, GridDims::new(4, 4, 4).unwrap(), unit_bounds()).unwrap();
        assert_eq!(grid.count(3, 3, 3), 1);
        assert_eq!(grid.occupied_cells(), 1);
    }

    #[test]
    fn degenerate_bounds_rejected() {
        assert!(Bounds::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
        let pts = PointFeatureSet::empty(1);
        let bad = Bounds { min: [0.0; 3], max: [0.0, 1.0, 1.0] };
        assert!(voxelize(&pts, GridDims::new(1, 1, 1).unwrap(), bad).is_err());
    }

    #[test]
    fn bev_column_mean_over_occupied_cells() {
        let pts = PointFeatureSet::new(1, vec![1.0, 3.0], vec![[0.1, 0.1, 0.1], [0.1, 0.1, 0.9]]).unwrap();
        let grid = voxelize(&pts, GridDims::new(2, 2, 4).unwrap(), unit_bounds()).unwrap();
        let bev = bev_collapse(&grid);
        assert_eq!(bev.get(0, 0, 0), 2.0);
        assert_eq!(bev.get(0, 1, 1), 0.0);
    }

    #[test]
    fn empty_grid_collapses_to_zero() {
        let grid = voxelize(&PointFeatureSet::empty(2), GridDims::new(3, 3, 3).unwrap(), unit_bounds()).unwrap();
        assert!(bev_collapse(&grid).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_hand_case() {
        let rows = [1.0, 3.0, 5.0, 7.0];
        let data: Vec<f64> = rows.iter().flat_map(|&r| [r; 4]).collect();
        let input = FeatureMap::new(1, 4, 4, data).unwrap();
        let out = adaptive_avg_pool(&input, 2, 2).unwrap();
        assert_eq!(out.data(), &[2.0, 2.0, 6.0, 6.0]);
    }

    #[test]
    fn pooling_identity_and_constant() {
        let data: Vec<f64> = (0..30).map(|i| i as f64 * 0.5).collect();
        let input = FeatureMap::new(2, 3, 5, data).unwrap();
        assert_eq!(adaptive_avg_pool(&input, 3, 5).unwrap(), input);
        let constant = FeatureMap::filled(1, 7, 5, 9.0);
        for (h, w) in [(1, 1), (3, 2), (7, 5), (10, 11)] {
            let out = adaptive_avg_pool(&constant, h, w).unwrap();
            assert!(out.data().iter().all(|&v| v == 9.0));
        }
    }

    #[test]
    fn empty_points_give_zero_map_and_mask() {
        let (map, mask) = roi_teacher_map(
            &PointFeatureSet::empty(4),
            GridDims::new(16, 16, 8).unwrap(),
            BoundsPolicy::FitPoints,
            8,
            8,
        )
        .unwrap();
        assert_eq!(map.dims(), (4, 8, 8));
        assert!(map.data().iter().all(|&v| v == 0.0));
        assert_eq!(count_valid(&mask), 0);
    }

    #[test]
    fn single_point_covers_one_pooled_cell() {
        let pts = PointFeatureSet::new(2, vec![1.0, 2.0], vec![[2.5, 1.5, 0.5]]).unwrap();
        let bounds = Bounds::new([0.0; 3], [4.0; 3]).unwrap();
        let dims = GridDims::new(4, 4, 2).unwrap();
        let bev = bev_collapse(&voxelize(&pts, dims, bounds).unwrap());
        let nonzero: Vec<usize> = (0..16).filter(|&p| bev.data()[16 + p] != 0.0).collect();
        assert_eq!(nonzero, vec![2 * 4 + 1]);

        let (map, mask) = roi_teacher_map(&pts, dims, BoundsPolicy::Fixed(bounds), 2, 2).unwrap();
        assert_eq!(count_valid(&mask), 1);
        assert_eq!(mask.get(1, 0), 1);
        assert_eq!(map.get(1, 1, 0), 0.5);
    }

    #[test]
    fn fitted_bounds_enclose_every_point() {
        let pts = PointFeatureSet::new(1, vec![1.0, 1.0], vec![[0.0, 0.0, 0.0], [2.0, 3.0, 0.0]]).unwrap();
        let b = Bounds::enclosing(&pts, DEFAULT_BOUNDS_PADDING).unwrap();
        assert!(b.min[2] < b.max[2]);
        let (_, mask) =
            roi_teacher_map(&pts, GridDims::new(4, 4, 1).unwrap(), BoundsPolicy::FitPoints, 4, 4).unwrap();
        assert_eq!(count_valid(&mask), 2);
    }

    #[test]
    fn roi_loss_hand_case() {
        let student = FeatureMap::new(1, 2, 2, vec![1.0, 9.0, 2.0, 0.5]).unwrap();
        let teacher = FeatureMap::new(1, 2, 2, vec![0.0, 0.0, 4.0, 1.0]).unwrap();
        let mask = ValidityMask::from_values(2, 2, &[1, 0, 1, 1]).unwrap();
        assert!((roi_loss(&student, &teacher, &mask).unwrap() - 3.5 / 3.0).abs() < 1e-15);
        assert_eq!(roi_loss(&student, &student, &mask).unwrap(), 0.0);
        assert_eq!(roi_loss(&student, &teacher, &ValidityMask::zeros(2, 2)).unwrap(), 0.0);
    }
}
