//! Procedural test scenes with full ground truth.
//!
//! World frame is y-up. The scene is a rolling heightfield with a few boxes
//! on it, painted from a small albedo palette, seen by a camera pitched
//! down by about 25°. Cast shadows come from a soft sun whose direction is
//! the dominant direction of the scene lighting.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::color::encode_gamma;
use crate::error::{Error, Result};
use crate::geometry::angle_between;
use crate::io::quantize;
use crate::maps::{
    AlbedoMap, Camera, DepthMap, Encoding, Grid, ImageRgb, Mask, NormalMap, ShLighting, ShadowMap,
};
use crate::prior::PriorModel;
use crate::sh::{basis, dot9, render, sh_rotation};

/// Mean angular deviation in degrees of guide normals from the truth.
pub const DEFAULT_GUIDE_NOISE_DEG: f64 = 10.0;
/// Shadow factor of a fully occluded pixel.
pub const UMBRA: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticConfig {
    pub size: usize,
    pub seed: u64,
    pub guide_noise_deg: f64,
    /// Azimuth offset of the second camera of a pair, radians.
    pub pair_azimuth: f64,
    /// Per-channel gain of the second view's lighting.
    pub pair_tint: [f64; 3],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 64,
            seed: 1,
            guide_noise_deg: DEFAULT_GUIDE_NOISE_DEG,
            pair_azimuth: 12f64.to_radians(),
            pair_tint: [1.15, 1.0, 0.8],
        }
    }
}

/// One rendered view and its ground truth. Every map is representable in
/// 32-bit floats, so writing and re-reading them is exact.
#[derive(Clone, Debug)]
pub struct SyntheticView {
    /// Gamma-encoded, quantised to 8 bits.
    pub image: ImageRgb,
    pub albedo: AlbedoMap,
    pub shadow: ShadowMap,
    pub normals: NormalMap,
    pub guide: NormalMap,
    pub depth: DepthMap,
    pub mask: Mask,
    pub ground: Mask,
    pub camera: Camera,
    pub lighting: ShLighting,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneInfo {
    pub config: SyntheticConfig,
    pub kappa: f64,
    pub guide_mean_error_deg: Vec<f64>,
    pub foreground: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Box3 {
    min: Vector3<f64>,
    max: Vector3<f64>,
    albedo: [f64; 3],
}

#[derive(Clone, Debug)]
struct World {
    hills: [(f64, f64, f64, f64); 3],
    boxes: Vec<Box3>,
    /// Voronoi sites on the ground plane with their albedo.
    sites: Vec<(f64, f64, [f64; 3])>,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.62, 0.55, 0.42],
    [0.35, 0.48, 0.28],
    [0.72, 0.70, 0.66],
    [0.50, 0.32, 0.25],
    [0.28, 0.34, 0.45],
    [0.80, 0.72, 0.50],
];

const FAR: f64 = 80.0;

impl World {
    fn random(rng: &mut impl Rng) -> Self {
        let hills = std::array::from_fn(|_| {
            (
                rng.random_range(0.1..0.35),
                rng.random_range(0.15..0.5),
                rng.random_range(0.15..0.5),
                rng.random_range(0.0..2.0 * PI),
            )
        });
        let mut boxes = Vec::new();
        for k in 0..3 {
            let cx = rng.random_range(-4.0..4.0);
            let cz = 4.0 + 4.0 * k as f64 + rng.random_range(0.0..3.0);
            let (hx, hz) = (rng.random_range(0.6..1.4), rng.random_range(0.6..1.4));
            let height = rng.random_range(1.0..2.5);
            boxes.push(Box3 {
                min: Vector3::new(cx - hx, -1.0, cz - hz),
                max: Vector3::new(cx + hx, height, cz + hz),
                albedo: PALETTE[rng.random_range(0..PALETTE.len())],
            });
        }
        let sites = (0..8)
            .map(|_| {
                (
                    rng.random_range(-12.0..12.0),
                    rng.random_range(-2.0..30.0),
                    PALETTE[rng.random_range(0..PALETTE.len())],
                )
            })
            .collect();
        Self { hills, boxes, sites }
    }

    fn height(&self, x: f64, z: f64) -> f64 {
        self.hills
            .iter()
            .map(|&(a, fx, fz, ph)| a * (fx * x + ph).sin() * (fz * z + 0.5 * ph).cos())
            .sum()
    }

    fn height_grad(&self, x: f64, z: f64) -> (f64, f64) {
        self.hills.iter().fold((0.0, 0.0), |(gx, gz), &(a, fx, fz, ph)| {
            (
                gx + a * fx * (fx * x + ph).cos() * (fz * z + 0.5 * ph).cos(),
                gz - a * fz * (fx * x + ph).sin() * (fz * z + 0.5 * ph).sin(),
            )
        })
    }

    fn ground_albedo(&self, x: f64, z: f64) -> [f64; 3] {
        self.sites
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - x).powi(2) + (a.1 - z).powi(2);
                let db = (b.0 - x).powi(2) + (b.1 - z).powi(2);
                da.total_cmp(&db)
            })
            .map_or(PALETTE[0], |s| s.2)
    }

    fn hit_box(b: &Box3, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let (mut t0, mut t1) = (1e-9, f64::INFINITY);
        let mut axis = 0;
        let mut sign = 1.0;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < b.min[k] || o[k] > b.max[k] {
                    return None;
                }
                continue;
            }
            let (mut a, mut c) = ((b.min[k] - o[k]) / d[k], (b.max[k] - o[k]) / d[k]);
            let mut s = -1.0;
            if a > c {
                std::mem::swap(&mut a, &mut c);
                s = 1.0;
            }
            if a > t0 {
                t0 = a;
                axis = k;
                sign = s;
            }
            t1 = t1.min(c);
            if t0 > t1 {
                return None;
            }
        }
        if t0 <= 1e-9 {
            return None;
        }
        let mut n = Vector3::zeros();
        n[axis] = sign;
        Some((t0, n))
    }

    fn hit_ground(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let above = |t: f64| {
            let p = o + d * t;
            p.y - self.height(p.x, p.z)
        };
        let step = 0.05;
        let mut t = 1e-6;
        if above(t) <= 0.0 {
            return None;
        }
        while t < t_max {
            let next = (t + step).min(t_max);
            let v = above(next);
            if v <= 0.0 {
                let (mut lo, mut hi) = (t, next);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if above(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            t = next;
        }
        None
    }

    /// Nearest hit: distance, outward normal, albedo, is-ground.
    fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>, [f64; 3], bool)> {
        let mut best: Option<(f64, Vector3<f64>, [f64; 3], bool)> = None;
        for b in &self.boxes {
            if let Some((t, n)) = Self::hit_box(b, o, d) {
                if best.is_none_or(|h| t < h.0) {
                    best = Some((t, n, b.albedo, false));
                }
            }
        }
        let t_max = best.map_or(FAR, |h| h.0);
        if let Some(t) = self.hit_ground(o, d, t_max) {
            let p = o + d * t;
            let (gx, gz) = self.height_grad(p.x, p.z);
            let n = Vector3::new(-gx, 1.0, -gz).normalize();
            best = Some((t, n, self.ground_albedo(p.x, p.z), true));
        }
        best
    }

    fn occluded(&self, p: &Vector3<f64>, dir: &Vector3<f64>) -> bool {
        self.boxes.iter().any(|b| Self::hit_box(b, p, dir).is_some())
            || self.hit_ground(p, dir, 30.0).is_some()
    }
}

/// Camera at `eye` looking along `forward` (world, y-up), image y down.
fn look_camera(f: f64, size: usize, eye: Vector3<f64>, forward: Vector3<f64>) -> Camera {
    let z = forward.normalize();
    let x = z.cross(&Vector3::y()).normalize();
    let y = z.cross(&x);
    // rows are the camera axes in world coordinates
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let c = (size as f64 - 1.0) / 2.0;
    Camera::new(f, c, c, r, -(r * eye)).expect("orthonormal by construction")
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Concentration of a 3D von Mises–Fisher distribution with the given mean
/// angle (radians).
pub fn kappa_for_mean_angle(mean: f64) -> f64 {
    let mean_angle = |k: f64| {
        // density ∝ exp(k (cos θ - 1)) sin θ on [0, π]
        let n = 4000;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let th = PI * i as f64 / n as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let p = w * (k * (th.cos() - 1.0)).exp() * th.sin();
            num += p * th;
            den += p;
        }
        num / den
    };
    let (mut lo, mut hi) = (1e-3f64, 1e5f64);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if mean_angle(mid) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Wood's sampler specialised to the 2-sphere.
pub fn sample_vmf(rng: &mut impl Rng, mu: &Vector3<f64>, kappa: f64) -> Vector3<f64> {
    let u: f64 = rng.random();
    let w = 1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa;
    let phi = rng.random_range(0.0..2.0 * PI);
    let helper = if mu.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = mu.cross(&helper).normalize();
    let e2 = mu.cross(&e1);
    let s = (1.0 - w * w).max(0.0).sqrt();
    (mu * w + (e1 * phi.cos() + e2 * phi.sin()) * s).normalize()
}

/// Camera-frame direction towards the brightest part of `l`.
fn dominant_direction(l: &ShLighting) -> Vector3<f64> {
    let c = l.coeffs();
    let lin = Vector3::new(
        c[1] + c[10] + c[19],
        c[2] + c[11] + c[20],
        c[3] + c[12] + c[21],
    );
    // shading uses the negated outward normal
    -lin.normalize()
}

struct Truth {
    albedo: Vec<[f64; 3]>,
    shadow: Vec<f64>,
    normals: Vec<Vector3<f64>>,
    depth: Vec<f64>,
    mask: Vec<bool>,
    ground: Vec<bool>,
}

fn trace_view(world: &World, cam: &Camera, size: usize, sun_world: &Vector3<f64>) -> Truth {
    let n = size * size;
    let mut t = Truth {
        albedo: vec![[0.0; 3]; n],
        shadow: vec![1.0; n],
        normals: vec![Vector3::z(); n],
        depth: vec![f64::NAN; n],
        mask: vec![false; n],
        ground: vec![false; n],
    };
    let rt = cam.rotation().transpose();
    let eye = cam.center();
    // soft sun: fixed jitter pattern inside a 3° cone
    let helper = if sun_world.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
    let e1 = sun_world.cross(&helper).normalize();
    let e2 = sun_world.cross(&e1);
    let cone = 3f64.to_radians();
    let sun_dirs: Vec<Vector3<f64>> = (0..8)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 8.0;
            (sun_world + (e1 * a.cos() + e2 * a.sin()) * cone.tan()).normalize()
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let ray_c = Vector3::new((x as f64 - cam.cx) / cam.f, (y as f64 - cam.cy) / cam.f, 1.0);
            let dir = (rt * ray_c).normalize();
            let Some((dist, n_out, albedo, ground)) = world.trace(&eye, &dir) else {
                continue;
            };
            let p = eye + dir * dist;
            let stored = -(cam.rotation() * n_out);
            if stored.z <= 1e-3 {
                continue;
            }
            let p_off = p + n_out * 1e-6;
            let lit = sun_dirs
                .iter()
                .filter(|d| d.dot(&n_out) > 0.0 && !world.occluded(&p_off, d))
                .count() as f64
                / sun_dirs.len() as f64;
            t.mask[i] = true;
            t.ground[i] = ground;
            t.albedo[i] = albedo.map(f32_round);
            t.shadow[i] = f32_round(UMBRA + (1.0 - UMBRA) * lit);
            t.normals[i] = stored.map(f32_round);
            t.depth[i] = f32_round((cam.rotation() * p + cam.translation()).z);
        }
    }
    t
}

/// Draws prior lightings until one shades every visible normal positively
/// without saturating the image.
fn draw_lighting(
    rng: &mut impl Rng,
    prior: &PriorModel,
    normals: &[Vector3<f64>],
    mask: &[bool],
) -> Result<(Vec<f64>, ShLighting)> {
    for _ in 0..10_000 {
        let alpha: Vec<f64> = (0..prior.dim())
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.7)
            .collect();
        let l = prior.reconstruct(&crate::prior::PriorCoeffs(alpha.clone()));
        let l = ShLighting::new(l.coeffs().map(f32_round))?;
        let mut ok = true;
        'px: for (n, _) in normals.iter().zip(mask).filter(|(_, m)| **m) {
            let b = basis(n);
            for c in 0..3 {
                let v = dot9(&b, l.channel(c));
                if !(0.15..=1.1).contains(&v) {
                    ok = false;
                    break 'px;
                }
            }
        }
        if ok {
            return Ok((alpha, l));
        }
    }
    Err(Error::Degenerate("no admissible lighting found in the prior".into()))
}

fn noisy_guide(rng: &mut impl Rng, truth: &NormalMap, kappa: f64) -> Result<NormalMap> {
    let (w, h) = truth.dims();
    let mut out = Vec::with_capacity(w * h);
    for i in 0..w * h {
        out.push(match truth.at(i) {
            Some(n) => loop {
                let g = sample_vmf(rng, &n, kappa).map(f32_round);
                if g.z > 1e-3 {
                    break g.normalize().map(f32_round);
                }
            },
            None => Vector3::z(),
        });
    }
    NormalMap::new(Grid::new(w, h, out)?, truth.valid().clone())
}

fn mean_error_deg(a: &NormalMap, b: &NormalMap) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..a.normals().len() {
        if let (Some(x), Some(y)) = (a.at(i), b.at(i)) {
            sum += angle_between(&x, &y);
            n += 1;
        }
    }
    (sum / n.max(1) as f64).to_degrees()
}

fn assemble(
    truth: Truth,
    size: usize,
    camera: Camera,
    lighting: ShLighting,
    rng: &mut impl Rng,
    kappa: f64,
) -> Result<SyntheticView> {
    fn g<T>(size: usize, v: Vec<T>) -> Result<Grid<T>> {
        Grid::new(size, size, v)
    }
    let mask = Mask::new(g(size, truth.mask)?);
    let albedo = AlbedoMap::new(g(size, truth.albedo)?)?;
    let shadow = ShadowMap::new(g(size, truth.shadow)?)?;
    let normals = NormalMap::new(g(size, truth.normals)?, mask.clone())?;
    let depth = DepthMap::new(g(size, truth.depth)?)?;
    let ground = Mask::new(g(size, truth.ground)?);
    let linear = render(&albedo, &shadow, &normals, &lighting, &mask)?;
    let image = quantized(&encode_gamma(&linear)?)?;
    let guide = noisy_guide(rng, &normals, kappa)?;
    Ok(SyntheticView {
        image,
        albedo,
        shadow,
        normals,
        guide,
        depth,
        mask,
        ground,
        camera,
        lighting,
    })
}

/// What an 8-bit PNG of `img` decodes to.
pub fn quantized(img: &ImageRgb) -> Result<ImageRgb> {
    let px = img.pixels().map(|p| p.map(|v| quantize(v) as f64 / 255.0));
    ImageRgb::new(px, Encoding::SrgbGamma)
}

fn base_camera(size: usize) -> (Camera, f64) {
    let f = 60.0 * size as f64 / 64.0;
    let pitch = 25f64.to_radians();
    let forward = Vector3::new(0.0, -pitch.sin(), pitch.cos());
    (look_camera(f, size, Vector3::new(0.0, 4.0, -4.0), forward), f)
}

/// Single view.
pub fn make_scene(prior: &PriorModel, config: &SyntheticConfig) -> Result<(SyntheticView, SceneInfo)> {
    if config.size < 16 {
        return Err(Error::InvalidValue("synthetic scenes need at least 16 pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let world = World::random(&mut rng);
    let (cam, _) = base_camera(config.size);
    // normals do not depend on the sun; trace once to pick the lighting
    let probe = trace_view(&world, &cam, config.size, &Vector3::y());
    let (_, lighting) = draw_lighting(&mut rng, prior, &probe.normals, &probe.mask)?;
    let sun = sun_world(&cam, &lighting);
    let truth = trace_view(&world, &cam, config.size, &sun);
    let kappa = kappa_for_mean_angle(config.guide_noise_deg.to_radians());
    let view = assemble(truth, config.size, cam, lighting, &mut rng, kappa)?;
    let info = SceneInfo {
        config: config.clone(),
        kappa,
        guide_mean_error_deg: vec![mean_error_deg(&view.guide, &view.normals)],
        foreground: vec![view.mask.count()],
    };
    Ok((view, info))
}

fn sun_world(cam: &Camera, l: &ShLighting) -> Vector3<f64> {
    let mut s = cam.rotation().transpose() * dominant_direction(l);
    // keep the sun above 20° so shadows stay bounded
    let min_el = 20f64.to_radians().sin();
    if s.y < min_el {
        let horiz = Vector3::new(s.x, 0.0, s.z);
        let horiz = if horiz.norm() < 1e-9 { Vector3::z() } else { horiz.normalize() };
        s = horiz * (1.0 - min_el * min_el).sqrt() + Vector3::y() * min_el;
    }
    s.normalize()
}

/// Two views of one scene. The second camera orbits the first one's look-at
/// point by `pair_azimuth`; its lighting is the first view's lighting
/// rotated into its frame and tinted by `pair_tint`.
pub fn make_pair(prior: &PriorModel, config: &SyntheticConfig) -> Result<([SyntheticView; 2], SceneInfo)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let world = World::random(&mut rng);
    let (cam0, f) = base_camera(config.size);
    let eye0 = cam0.center();
    let forward0 = cam0.rotation().row(2).transpose();
    let target = eye0 + forward0 * (eye0.y / -forward0.y);
    let orbit = Rotation3::from_axis_angle(&Vector3::y_axis(), config.pair_azimuth);
    let eye1 = target + orbit * (eye0 - target);
    let cam1 = look_camera(f, config.size, eye1, target - eye1);

    let probe0 = trace_view(&world, &cam0, config.size, &Vector3::y());
    let probe1 = trace_view(&world, &cam1, config.size, &Vector3::y());
    let rel = sh_rotation(&(cam1.rotation() * cam0.rotation().transpose()))?;
    let mut pick = None;
    for _ in 0..1000 {
        let (_, l0) = draw_lighting(&mut rng, prior, &probe0.normals, &probe0.mask)?;
        let rotated = rel.apply(&l0);
        let mut c = *rotated.coeffs();
        for (k, v) in c.iter_mut().enumerate() {
            *v = f32_round(*v * config.pair_tint[k / 9]);
        }
        let l1 = ShLighting::new(c)?;
        let positive = probe1.normals.iter().zip(&probe1.mask).filter(|(_, m)| **m).all(|(n, _)| {
            let b = basis(n);
            (0..3).all(|ch| (0.1..=1.2).contains(&dot9(&b, l1.channel(ch))))
        });
        if positive {
            pick = Some((l0, l1));
            break;
        }
    }
    let (l0, l1) = pick.ok_or_else(|| Error::Degenerate("no admissible pair lighting".into()))?;
    let sun = sun_world(&cam0, &l0);
    let kappa = kappa_for_mean_angle(config.guide_noise_deg.to_radians());
    let t0 = trace_view(&world, &cam0, config.size, &sun);
    let t1 = trace_view(&world, &cam1, config.size, &sun);
    let v0 = assemble(t0, config.size, cam0, l0, &mut rng, kappa)?;
    let v1 = assemble(t1, config.size, cam1, l1, &mut rng, kappa)?;
    let info = SceneInfo {
        config: config.clone(),
        kappa,
        guide_mean_error_deg: vec![
            mean_error_deg(&v0.guide, &v0.normals),
            mean_error_deg(&v1.guide, &v1.normals),
        ],
        foreground: vec![v0.mask.count(), v1.mask.count()],
    };
    Ok(([v0, v1], info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::linearize;
    use crate::testutil::small_prior;

    #[test]
    fn kappa_matches_ten_degrees() {
        let k = kappa_for_mean_angle(10f64.to_radians());
        assert!((k - 51.5).abs() < 1.0, "{k}");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu = Vector3::new(0.3, -0.2, 0.9).normalize();
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| angle_between(&sample_vmf(&mut rng, &mu, k), &mu)).sum::<f64>() / n as f64;
        assert!((mean.to_degrees() - 10.0).abs() < 0.2, "{}", mean.to_degrees());
    }

    #[test]
    fn scene_is_consistent() {
        let prior = small_prior(3);
        let (v, info) = make_scene(&prior, &SyntheticConfig { size: 32, ..Default::default() }).unwrap();
        let fg = v.mask.count();
        assert!(fg > 32 * 32 / 2 && fg < 32 * 32, "{fg}");
        assert!(v.ground.count() > 0);
        assert!((info.guide_mean_error_deg[0] - 10.0).abs() < 1.5);
        // the 8-bit image matches the truth up to quantisation
        let lin = linearize(&v.image).unwrap();
        let truth = render(&v.albedo, &v.shadow, &v.normals, &v.lighting, &v.mask).unwrap();
        for (a, b) in lin.pixels().data().iter().zip(truth.pixels().data()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 0.02);
            }
        }
        // some pixels are shadowed, most are not
        let shadowed = v.shadow.grid().data().iter().zip(v.mask.grid().data()).filter(|(s, m)| **m && **s < 0.99).count();
        assert!(shadowed > 0 && shadowed < fg / 2, "{shadowed}");
    }

    #[test]
    fn scene_is_seeded() {
        let prior = small_prior(3);
        let cfg = SyntheticConfig { size: 24, ..Default::default() };
        let (a, _) = make_scene(&prior, &cfg).unwrap();
        let (b, _) = make_scene(&prior, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.guide, b.guide);
    }

    #[test]
    fn pair_views_share_the_scene() {
        let prior = small_prior(3);
        let ([a, b], _) = make_pair(&prior, &SyntheticConfig { size: 32, ..Default::default() }).unwrap();
        let warp = crate::geometry::Warp::new(&a.depth, &a.camera, &b.camera, (32, 32));
        let (warped, valid) = warp.apply(b.albedo.grid().data(), b.mask.grid().data());
        let mut agree = 0;
        let mut total = 0;
        for i in 0..32 * 32 {
            if valid[i] && a.mask.at(i) {
                total += 1;
                if (0..3).all(|c| (warped[i][c] - a.albedo.grid().data()[i][c]).abs() < 1e-6) {
                    agree += 1;
                }
            }
        }
        assert!(total > 200);
        // palette edges blur under bilinear resampling
        assert!(agree as f64 > 0.8 * total as f64, "{agree}/{total}");
    }
}
