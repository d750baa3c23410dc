//! Rigid transforms, rotated bird's-eye-view boxes and the location grid used
//! by the dual-space query embedding.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const ORTHO_TOL: f64 = 1e-9;
const YAW_DOMINANT_TOL: f64 = 1e-6;
const CLIP_EPS: f64 = 1e-12;

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for (r, row) in m.iter().enumerate() {
        out[r] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
    }
    out
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = m[c][r];
        }
    }
    out
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Wraps an angle into the principal range (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Rotation about the z axis.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// SE(3) rigid transform mapping points of a local frame into a parent frame:
/// `x_parent = rotation · x_local + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: IDENTITY3, translation: [0.0; 3] }
    }

    /// Validating constructor; rejects rotations that are not proper and
    /// orthonormal.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rtr = mat_mul(&transpose(&rotation), &rotation);
        let mut deviation: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let target = if r == c { 1.0 } else { 0.0 };
                deviation = deviation.max((rtr[r][c] - target).abs());
            }
        }
        deviation = deviation.max((det(&rotation) - 1.0).abs());
        if !(deviation <= ORTHO_TOL) || translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::NotOrthonormal { deviation });
        }
        Ok(Pose { rotation, translation })
    }

    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Pose { rotation: rot_z(yaw), translation }
    }

    pub fn translation(t: Vec3) -> Self {
        Pose { rotation: IDENTITY3, translation: t }
    }

    /// Heading of the rotated x axis in the parent ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    /// Deviation of the rotated z axis from the parent z axis.
    pub fn tilt(&self) -> f64 {
        let z = [self.rotation[0][2], self.rotation[1][2], self.rotation[2][2]];
        norm(sub(z, [0.0, 0.0, 1.0]))
    }

    pub fn is_yaw_dominant(&self) -> bool {
        self.tilt() <= YAW_DOMINANT_TOL
    }

    /// Row-major flattening of the rotation block.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]]
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose_pose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: mat_mul(&a.rotation, &b.rotation),
        translation: add(mat_vec(&a.rotation, b.translation), a.translation),
    }
}

pub fn inverse_pose(p: &Pose) -> Pose {
    let rt = transpose(&p.rotation);
    let t = mat_vec(&rt, p.translation);
    Pose { rotation: rt, translation: [-t[0], -t[1], -t[2]] }
}

pub fn transform_point(p: &Pose, x: Vec3) -> Vec3 {
    add(mat_vec(&p.rotation, x), p.translation)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox3D {
    pub center: Vec3,
    /// length (along heading), width, height
    pub dims: Vec3,
    pub yaw: f64,
    pub class_id: u16,
}

impl BBox3D {
    pub fn new(center: Vec3, dims: Vec3, yaw: f64, class_id: u16) -> Result<Self> {
        if dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Invalid(format!("box dims must be positive, got {dims:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::Invalid("non-finite box".into()));
        }
        Ok(BBox3D { center, dims, yaw: wrap_angle(yaw), class_id })
    }

    /// Counter-clockwise ground-plane footprint corners.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.dims[0] / 2.0;
        let hw = self.dims[1] / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        let mut out = [[0.0; 2]; 4];
        for (o, l) in out.iter_mut().zip(local) {
            *o = [self.center[0] + c * l[0] - s * l[1], self.center[1] + s * l[0] + c * l[1]];
        }
        out
    }

    pub fn footprint_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    /// Half of the footprint diagonal.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * (self.dims[0] * self.dims[0] + self.dims[1] * self.dims[1]).sqrt()
    }

    pub fn contains_xy(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let (s, c) = self.yaw.sin_cos();
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.dims[0] / 2.0 && ly.abs() <= self.dims[1] / 2.0
    }
}

/// Applies a yaw-dominant pose to a box: the center moves as a point and the
/// heading rotates by the pose's yaw.
pub fn transform_box(p: &Pose, b: &BBox3D) -> Result<BBox3D> {
    let tilt = p.tilt();
    if tilt > YAW_DOMINANT_TOL {
        return Err(Error::NonPlanarRotation { tilt });
    }
    Ok(BBox3D {
        center: transform_point(p, b.center),
        dims: b.dims,
        yaw: wrap_angle(b.yaw + p.yaw()),
        class_id: b.class_id,
    })
}

/// Shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clipping of `subject` against the convex CCW polygon
/// `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(a, b, cur) >= -CLIP_EPS;
            let prev_in = cross(a, b, prev) >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    if let Some(p) = line_intersection(prev, cur, a, b) {
                        output.push(p);
                    }
                }
                output.push(cur);
            } else if prev_in {
                if let Some(p) = line_intersection(prev, cur, a, b) {
                    output.push(p);
                }
            }
        }
    }
    output
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let r = [q[0] - p[0], q[1] - p[1]];
    let s = [b[0] - a[0], b[1] - a[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() < CLIP_EPS {
        return None;
    }
    let t = ((a[0] - p[0]) * s[1] - (a[1] - p[1]) * s[0]) / denom;
    Some([p[0] + t * r[0], p[1] + t * r[1]])
}

/// Intersection polygon of the two box footprints.
pub fn footprint_intersection(a: &BBox3D, b: &BBox3D) -> Vec<[f64; 2]> {
    clip_convex(&a.footprint(), &b.footprint())
}

/// Ground-plane IoU of two yaw-rotated footprints.
pub fn bev_iou(a: &BBox3D, b: &BBox3D) -> f64 {
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    let reach = a.half_diagonal() + b.half_diagonal();
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    let inter = polygon_area(&footprint_intersection(a, b)).abs();
    let union = a.footprint_area() + b.footprint_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionRange {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for PerceptionRange {
    fn default() -> Self {
        PerceptionRange { x_min: 0.0, y_min: -39.0, x_max: 100.0, y_max: 39.0, z_min: -3.0, z_max: 5.0 }
    }
}

impl PerceptionRange {
    pub fn validate(&self) -> Result<()> {
        if self.x_min < self.x_max && self.y_min < self.y_max && self.z_min < self.z_max {
            Ok(())
        } else {
            Err(Error::Invalid(format!("degenerate perception range {self:?}")))
        }
    }

    pub fn contains_xy(&self, p: Vec3) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    fn mins(&self) -> Vec3 {
        [self.x_min, self.y_min, self.z_min]
    }

    pub fn spans(&self) -> Vec3 {
        [self.x_max - self.x_min, self.y_max - self.y_min, self.z_max - self.z_min]
    }

    /// Per-axis affine map onto [0, 1], clamped.
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        let mins = self.mins();
        let spans = self.spans();
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = ((p[k] - mins[k]) / spans[k]).clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationGrid {
    pub points: Vec<Vec3>,
    pub grid_size: usize,
    pub spacing: f64,
}

/// Expands a center into a `G×G×G` lattice of points `spacing` apart, in
/// lexicographic `(i, j, k)` offset order.
pub fn location_grid(center: Vec3, grid_size: usize, spacing: f64) -> Result<LocationGrid> {
    if grid_size == 0 || grid_size % 2 == 0 || !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::InvalidGrid { size: grid_size, spacing });
    }
    let half = (grid_size as i64 - 1) / 2;
    let mut points = Vec::with_capacity(grid_size.pow(3));
    for i in -half..=half {
        for j in -half..=half {
            for k in -half..=half {
                points.push([
                    center[0] + spacing * i as f64,
                    center[1] + spacing * j as f64,
                    center[2] + spacing * k as f64,
                ]);
            }
        }
    }
    Ok(LocationGrid { points, grid_size, spacing })
}

pub fn normalize_grid(grid: &LocationGrid, range: &PerceptionRange) -> Vec<f64> {
    grid.points.iter().flat_map(|p| range.normalize(*p)).collect()
}
