use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rotation + translation, `p' = R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation about the z axis by `yaw`, then translation.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[j][i];
            }
        }
        let t = self.translation;
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Self {
            rotation: rt,
            translation: ti,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        let t = self.apply(other.translation);
        Self {
            rotation: r,
            translation: t,
        }
    }

    fn is_orthonormal(&self) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ORTHONORMAL_TOL {
                    return false;
                }
            }
        }
        true
    }
}

/// Pinhole camera: intrinsics `K` and world→camera extrinsics `RT`.
///
/// Camera axes follow the usual image convention: x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    k: [[f64; 3]; 3],
    extrinsic: RigidTransform,
}

impl CameraModel {
    pub fn new(k: [[f64; 3]; 3], extrinsic: RigidTransform) -> Result<Self> {
        let all_finite = k.iter().flatten().all(|v| v.is_finite())
            && extrinsic.rotation.iter().flatten().all(|v| v.is_finite())
            && extrinsic.translation.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::invalid("camera parameters must be finite"));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                k[0][0], k[1][1]
            )));
        }
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::invalid("intrinsics must be zero-skew with last row [0 0 1]"));
        }
        if !extrinsic.is_orthonormal() {
            return Err(Error::invalid("extrinsic rotation is not orthonormal"));
        }
        Ok(Self { k, extrinsic })
    }

    pub fn from_intrinsics(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsic: RigidTransform,
    ) -> Result<Self> {
        Self::new([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]], extrinsic)
    }

    pub fn fx(&self) -> f64 {
        self.k[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.k[1][1]
    }

    pub fn cx(&self) -> f64 {
        self.k[0][2]
    }

    pub fn cy(&self) -> f64 {
        self.k[1][2]
    }

    pub fn intrinsics(&self) -> &[[f64; 3]; 3] {
        &self.k
    }

    pub fn extrinsic(&self) -> &RigidTransform {
        &self.extrinsic
    }

    pub fn world_to_camera(&self, q: [f64; 3]) -> [f64; 3] {
        self.extrinsic.apply(q)
    }

    pub fn camera_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        self.extrinsic.inverse().apply(p)
    }

    /// Continuous pixel coordinates `(column, row)` of a camera-frame point.
    pub fn pixel_of_camera_point(&self, p: [f64; 3]) -> (f64, f64) {
        (
            self.fx() * p[0] / p[2] + self.cx(),
            self.fy() * p[1] / p[2] + self.cy(),
        )
    }

    /// Camera-frame point at depth `z` behind pixel centre `(column, row)`.
    pub fn back_project(&self, column: f64, row: f64, z: f64) -> [f64; 3] {
        [
            (column - self.cx()) * z / self.fx(),
            (row - self.cy()) * z / self.fy(),
            z,
        ]
    }

    /// Camera whose world frame is moved by `transform`: rendering points
    /// `transform·q` with the result matches rendering `q` with `self`.
    pub fn with_world_transform(&self, transform: &RigidTransform) -> Result<Self> {
        Self::new(self.k, self.extrinsic.compose(&transform.inverse()))
    }

    /// Row-major `K` (9 numbers) followed by row-major `RT` (12 numbers).
    pub fn to_text(&self) -> String {
        let mut nums: Vec<f64> = self.k.iter().flatten().copied().collect();
        for i in 0..3 {
            nums.extend_from_slice(&self.extrinsic.rotation[i]);
            nums.push(self.extrinsic.translation[i]);
        }
        let k_line = nums[..9].iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        let rt_line = nums[9..].iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        format!("{k_line}\n{rt_line}\n")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let nums = text
            .split_whitespace()
            .enumerate()
            .map(|(i, tok)| {
                tok.parse::<f64>().map_err(|_| {
                    Error::invalid(format!("camera value #{} `{tok}` is not a number", i + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if nums.len() != 21 {
            return Err(Error::invalid(format!(
                "camera file needs 21 numbers (K then RT), found {}",
                nums.len()
            )));
        }
        let mut k = [[0.0; 3]; 3];
        for i in 0..3 {
            k[i].copy_from_slice(&nums[i * 3..i * 3 + 3]);
        }
        let mut rotation = [[0.0; 3]; 3];
        let mut translation = [0.0; 3];
        for i in 0..3 {
            let row = &nums[9 + i * 4..9 + i * 4 + 4];
            rotation[i].copy_from_slice(&row[..3]);
            translation[i] = row[3];
        }
        Self::new(
            k,
            RigidTransform {
                rotation,
                translation,
            },
        )
    }
}
