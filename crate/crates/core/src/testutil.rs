//! Fixtures shared by unit tests.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::energy::EnergyState;
use crate::maps::{Camera, DepthMap, Grid, ShLighting};
use crate::prior::{build_prior, PriorModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// 18-dimensional prior over random lightings around a bright ambient term.
pub fn small_prior(seed: u64) -> PriorModel {
    prior_with_dim(seed, 18)
}

pub fn prior_with_dim(seed: u64, d: usize) -> PriorModel {
    let mut r = rng(seed);
    let samples: Vec<ShLighting> = (0..200)
        .map(|_| {
            let mut c = [0.0; 27];
            for (k, v) in c.iter_mut().enumerate() {
                *v = if k % 9 == 0 { 0.8 } else { 0.0 } + 0.1 * normal(&mut r);
            }
            ShLighting::new(c).unwrap()
        })
        .collect();
    build_prior(&samples, d).unwrap()
}

pub fn random_state(rng: &mut impl Rng, dims: (usize, usize), d: usize) -> EnergyState {
    let n = dims.0 * dims.1;
    EnergyState::new(
        dims,
        (0..n).map(|_| [normal(rng), normal(rng), normal(rng)]).collect(),
        (0..n).map(|_| normal(rng)).collect(),
        (0..n).map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]).collect(),
        (0..d).map(|_| 0.5 * normal(rng)).collect(),
    )
    .unwrap()
}

/// Two cameras looking at the world plane `z = plane_z`; the second is
/// rotated by `angle` about y and shifted so both see the plane centre.
pub fn plane_pair(w: usize, h: usize, f: f64, plane_z: f64, angle: f64) -> [(Camera, DepthMap); 2] {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let a = Camera::identity(f, cx, cy);
    let r: Matrix3<f64> = *Rotation3::from_axis_angle(&Vector3::y_axis(), angle).matrix();
    // centre at c, looking at (0, 0, plane_z)
    let target = Vector3::new(0.0, 0.0, plane_z);
    let dir = r.transpose() * Vector3::z();
    let c = target - dir * plane_z;
    let b = Camera::new(f, cx, cy, r, -(r * c)).unwrap();
    [a, b].map(|cam| {
        let depth = Grid::from_fn(w, h, |x, y| {
            let ray = Vector3::new((x as f64 - cam.cx) / cam.f, (y as f64 - cam.cy) / cam.f, 1.0);
            let rw = cam.rotation().transpose() * ray;
            (plane_z - cam.center().z) / rw.z
        });
        (cam.clone(), DepthMap::new(depth).unwrap())
    })
}
