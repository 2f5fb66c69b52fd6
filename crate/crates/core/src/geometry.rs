//! Pinhole projection, normals from perspective depth, the `(p, q)` normal
//! parametrisation, cross-view resampling and ground planes.
//!
//! Normals follow the depth-gradient convention: for a visible surface the
//! stored normal points away from the camera (`n_z > 0`). It is the negated
//! outward surface normal.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{Camera, DepthMap, Grid, Mask, NormalMap};

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    /// Depth `λ` along the optical axis.
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

pub fn project(cam: &Camera, world: &Vector3<f64>) -> Projection {
    let p = cam.rotation() * world + cam.translation();
    Projection {
        x: cam.f * p.x / p.z + cam.cx,
        y: cam.f * p.y / p.z + cam.cy,
        depth: p.z,
    }
}

/// Camera-frame point seen at pixel `(x, y)` with perspective depth `depth`.
#[inline]
pub fn backproject_camera(cam: &Camera, x: f64, y: f64, depth: f64) -> Vector3<f64> {
    Vector3::new(
        depth * (x - cam.cx) / cam.f,
        depth * (y - cam.cy) / cam.f,
        depth,
    )
}

pub fn backproject(cam: &Camera, x: f64, y: f64, depth: f64) -> Vector3<f64> {
    cam.rotation().transpose() * (backproject_camera(cam, x, y, depth) - cam.translation())
}

/// One-sided or central derivative along one axis. `None` if the pixel has
/// no finite neighbour on that axis.
fn derivative(prev: Option<f64>, here: f64, next: Option<f64>) -> Option<f64> {
    match (prev, next) {
        (Some(a), Some(b)) => Some((b - a) / 2.0),
        (None, Some(b)) => Some(b - here),
        (Some(a), None) => Some(here - a),
        (None, None) => None,
    }
}

/// Normals of a perspective depth map,
/// `n ∝ [-f w_x, -f w_y, (x - cx) w_x + (y - cy) w_y + w]`.
pub fn normals_from_depth(depth: &DepthMap, cam: &Camera) -> NormalMap {
    let (w, h) = depth.dims();
    let mut valid = Grid::filled(w, h, false);
    let normals = Grid::from_fn(w, h, |x, y| {
        let Some(d) = depth.at(x, y) else {
            return Vector3::z();
        };
        let left = (x > 0).then(|| depth.at(x - 1, y)).flatten();
        let right = (x + 1 < w).then(|| depth.at(x + 1, y)).flatten();
        let up = (y > 0).then(|| depth.at(x, y - 1)).flatten();
        let down = (y + 1 < h).then(|| depth.at(x, y + 1)).flatten();
        let (Some(wx), Some(wy)) = (derivative(left, d, right), derivative(up, d, down)) else {
            return Vector3::z();
        };
        let n = Vector3::new(
            -cam.f * wx,
            -cam.f * wy,
            (x as f64 - cam.cx) * wx + (y as f64 - cam.cy) * wy + d,
        );
        let norm = n.norm();
        if !(norm > 0.0) || !(n.z / norm > 0.0) {
            return Vector3::z();
        }
        *valid.get_mut(x, y) = true;
        n / norm
    });
    NormalMap::new(normals, Mask::new(valid)).expect("normalised, front-facing")
}

#[inline]
pub fn normal_from_params(p: f64, q: f64) -> Vector3<f64> {
    Vector3::new(p, q, 1.0).normalize()
}

/// Unit normal and its derivatives with respect to `p` and `q`.
#[inline]
pub fn normal_from_params_jacobian(p: f64, q: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let v = Vector3::new(p, q, 1.0);
    let inv = 1.0 / v.norm();
    let n = v * inv;
    let dp = (Vector3::x() - n * n.x) * inv;
    let dq = (Vector3::y() - n * n.y) * inv;
    (n, dp, dq)
}

/// Inverse of [`normal_from_params`] for `n_z > 0`.
pub fn params_from_normal(n: &Vector3<f64>) -> Result<[f64; 2]> {
    if !(n.z > 0.0) {
        return Err(Error::InvalidValue(format!("normal with n_z = {} <= 0", n.z)));
    }
    Ok([n.x / n.z, n.y / n.z])
}

/// Source-pixel location of a target pixel, following the target depth.
pub fn reproject_pixel(
    x: f64,
    y: f64,
    depth_tgt: f64,
    cam_tgt: &Camera,
    cam_src: &Camera,
) -> Option<(f64, f64)> {
    let world = backproject(cam_tgt, x, y, depth_tgt);
    let p = project(cam_src, &world);
    (p.in_front() && p.x.is_finite() && p.y.is_finite()).then_some((p.x, p.y))
}

/// Up to four bilinear taps, as `(source index, weight)`; zero-weight taps
/// are dropped so exact integer locations only need that pixel.
#[derive(Clone, Debug, PartialEq)]
struct Taps {
    n: u8,
    idx: [u32; 4],
    w: [f64; 4],
}

impl Taps {
    fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n as usize).map(|k| (self.idx[k] as usize, self.w[k]))
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> Option<Taps> {
    let (x, y) = (snap(x), snap(y));
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let mut taps = Taps {
        n: 0,
        idx: [0; 4],
        w: [0.0; 4],
    };
    for (dx, dy, w) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        if w > 0.0 {
            let k = taps.n as usize;
            taps.idx[k] = ((y0 + dy) * width + x0 + dx) as u32;
            taps.w[k] = w;
            taps.n += 1;
        }
    }
    Some(taps)
}

/// Precomputed cross-projection from a source view onto the pixels of a
/// target view: the per-target-pixel source coordinates and bilinear taps.
///
/// No visibility test is made in the source view.
#[derive(Clone, Debug)]
pub struct Warp {
    target_dims: (usize, usize),
    source_dims: (usize, usize),
    coords: Vec<Option<(f64, f64)>>,
    taps: Vec<Option<Taps>>,
}

impl Warp {
    pub fn new(
        depth_tgt: &DepthMap,
        cam_tgt: &Camera,
        cam_src: &Camera,
        source_dims: (usize, usize),
    ) -> Self {
        let (w, h) = depth_tgt.dims();
        let mut coords = Vec::with_capacity(w * h);
        let mut taps = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let c = depth_tgt
                    .at(x, y)
                    .and_then(|d| reproject_pixel(x as f64, y as f64, d, cam_tgt, cam_src));
                taps.push(c.and_then(|(sx, sy)| bilinear_taps(sx, sy, source_dims.0, source_dims.1)));
                coords.push(c);
            }
        }
        Self {
            target_dims: (w, h),
            source_dims,
            coords,
            taps,
        }
    }

    /// The identity resampling on a `width × height` grid.
    pub fn identity(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            target_dims: (width, height),
            source_dims: (width, height),
            coords: (0..n).map(|i| Some(((i % width) as f64, (i / width) as f64))).collect(),
            taps: (0..n)
                .map(|i| {
                    Some(Taps {
                        n: 1,
                        idx: [i as u32, 0, 0, 0],
                        w: [1.0, 0.0, 0.0, 0.0],
                    })
                })
                .collect(),
        }
    }

    pub fn target_dims(&self) -> (usize, usize) {
        self.target_dims
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    /// Real-valued source location of target pixel `i`, when it projects in front of the source camera.
    pub fn source_coords(&self, i: usize) -> Option<(f64, f64)> {
        self.coords[i]
    }

    /// Target pixels whose taps all land on valid source pixels.
    pub fn validity(&self, src_valid: &[bool]) -> Vec<bool> {
        self.taps
            .iter()
            .map(|t| t.as_ref().is_some_and(|t| t.iter().all(|(j, _)| src_valid[j])))
            .collect()
    }

    /// Bilinearly resamples `src`; invalid target pixels are zero.
    pub fn apply<const N: usize>(
        &self,
        src: &[[f64; N]],
        src_valid: &[bool],
    ) -> (Vec<[f64; N]>, Vec<bool>) {
        let valid = self.validity(src_valid);
        let out = self
            .taps
            .iter()
            .zip(&valid)
            .map(|(t, &ok)| {
                let mut v = [0.0; N];
                if let (Some(t), true) = (t, ok) {
                    for (j, w) in t.iter() {
                        for c in 0..N {
                            v[c] += w * src[j][c];
                        }
                    }
                }
                v
            })
            .collect();
        (out, valid)
    }

    pub fn apply_scalar(&self, src: &[f64], src_valid: &[bool]) -> (Vec<f64>, Vec<bool>) {
        let wrapped: Vec<[f64; 1]> = src.iter().map(|&v| [v]).collect();
        let (out, valid) = self.apply(&wrapped, src_valid);
        (out.into_iter().map(|v| v[0]).collect(), valid)
    }

    /// Adjoint of [`apply`](Self::apply) restricted to `valid` target pixels:
    /// scatters target gradients back onto source pixels.
    pub fn adjoint<const N: usize>(&self, grad: &[[f64; N]], valid: &[bool]) -> Vec<[f64; N]> {
        let mut out = vec![[0.0; N]; self.source_dims.0 * self.source_dims.1];
        for (i, t) in self.taps.iter().enumerate() {
            if let (Some(t), true) = (t, valid[i]) {
                for (j, w) in t.iter() {
                    for c in 0..N {
                        out[j][c] += w * grad[i][c];
                    }
                }
            }
        }
        out
    }
}

/// Resamples a source map onto the target view.
pub fn cross_project<const N: usize>(
    src: &Grid<[f64; N]>,
    src_valid: &Mask,
    depth_tgt: &DepthMap,
    cam_src: &Camera,
    cam_tgt: &Camera,
) -> Result<(Grid<[f64; N]>, Mask)> {
    src_valid.grid().ensure_dims(src.dims())?;
    let warp = Warp::new(depth_tgt, cam_tgt, cam_src, src.dims());
    let (out, valid) = warp.apply(src.data(), src_valid.grid().data());
    let (w, h) = depth_tgt.dims();
    Ok((Grid::new(w, h, out)?, Mask::new(Grid::new(w, h, valid)?)))
}

/// Plane `normal · X + offset = 0` in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

/// Mean "up" direction of the cameras in world coordinates (image `-y`).
pub fn mean_camera_up(cameras: &[Camera]) -> Vector3<f64> {
    cameras
        .iter()
        .map(|c| -c.rotation().row(1).transpose())
        .sum::<Vector3<f64>>()
        / cameras.len().max(1) as f64
}

/// PCA plane through camera centres, oriented along the mean camera up.
pub fn fit_ground_plane(cameras: &[Camera]) -> Result<GroundPlane> {
    let pts: Vec<Vector3<f64>> = cameras.iter().map(Camera::center).collect();
    fit_plane(&pts, &mean_camera_up(cameras))
}

/// PCA plane through `points`; the normal is flipped to agree with `up`.
pub fn fit_plane(points: &[Vector3<f64>], up: &Vector3<f64>) -> Result<GroundPlane> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!(
            "plane fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle, largest) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(largest > 0.0) || middle <= 1e-12 * largest {
        return Err(Error::Degenerate("points are collinear or coincident".into()));
    }
    let _ = smallest;
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned().normalize();
    if normal.dot(up) < 0.0 {
        normal = -normal;
    }
    Ok(GroundPlane {
        normal,
        offset: -normal.dot(&centroid),
    })
}

/// Replaces normals under `ground_mask` by the plane normal seen from `cam`.
///
/// The plane normal points up (towards the cameras), so the stored,
/// depth-convention normal is its negated camera-frame image. Pixels where
/// that is grazing or back-facing are left invalid.
pub fn inpaint_ground_normals(
    normals: &NormalMap,
    ground_mask: &Mask,
    plane: &GroundPlane,
    cam: &Camera,
) -> Result<NormalMap> {
    ground_mask.grid().ensure_dims(normals.dims())?;
    let n_cam = -(cam.rotation() * plane.normal).normalize();
    let usable = n_cam.z > 1e-9;
    let mut grid = normals.normals().clone();
    let mut valid = normals.valid().clone();
    for i in 0..grid.len() {
        if ground_mask.at(i) {
            grid.data_mut()[i] = if usable { n_cam } else { Vector3::z() };
            valid.grid_mut().data_mut()[i] = usable;
        }
    }
    NormalMap::new(grid, valid)
}

/// Angle between two unit vectors in radians.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}
