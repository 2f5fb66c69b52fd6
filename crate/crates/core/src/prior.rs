//! Natural-illumination prior.
//!
//! Outdoor environment maps are fitted with the nine-term basis, normalised
//! to unit norm, augmented by rotations, and summarised by a PCA model
//! `l = Q diag(σ) α + l̄` with `α ~ N(0, I)`.
//!
//! Environment maps are equirectangular with `θ` the angle from the zenith
//! (top row) and `φ` the azimuth. The zenith is camera `-y` and the azimuth
//! runs from `+x` towards `+z`. A texel seen in direction `d` lights the
//! surfaces whose stored (depth-convention) normal is `-d`, so the fit is
//! `b(-d)ᵀ l ≈ L(d)`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, Matrix3, Rotation3, SMatrix, SVector, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{Grid, ShLighting};
use crate::sh::{basis, sh_rotation_unchecked, ShRotation};

/// Default subspace dimension.
pub const PRIOR_DIM: usize = 18;

/// Equirectangular HDR environment (`width = 2 height`).
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMap(Grid<[f64; 3]>);

impl EnvMap {
    pub fn new(grid: Grid<[f64; 3]>) -> Result<Self> {
        let (w, h) = grid.dims();
        if h == 0 || w != 2 * h {
            return Err(Error::InvalidValue(format!(
                "environment map must be 2:1, got {w}x{h}"
            )));
        }
        if grid.data().iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidValue(
                "environment radiance must be finite and non-negative".into(),
            ));
        }
        Ok(Self(grid))
    }

    /// Rasterises `radiance(direction)` at texel centres.
    pub fn from_fn(height: usize, radiance: impl Fn(&Vector3<f64>) -> [f64; 3]) -> Result<Self> {
        let w = 2 * height;
        Self::new(Grid::from_fn(w, height, |x, y| {
            radiance(&texel_direction(x, y, w, height))
        }))
    }

    pub fn grid(&self) -> &Grid<[f64; 3]> {
        &self.0
    }

    /// Environment seen through rotation `r`: `L'(d) = L(Rᵀ d)`, sampled
    /// with nearest-texel lookup.
    pub fn rotated(&self, r: &Matrix3<f64>) -> EnvMap {
        let (w, h) = self.0.dims();
        let rt = r.transpose();
        EnvMap(Grid::from_fn(w, h, |x, y| {
            let d = rt * texel_direction(x, y, w, h);
            let (tx, ty) = direction_texel(&d, w, h);
            *self.0.get(tx, ty)
        }))
    }
}

/// Camera-frame unit direction of texel `(x, y)`.
pub fn texel_direction(x: usize, y: usize, width: usize, height: usize) -> Vector3<f64> {
    let theta = (y as f64 + 0.5) * PI / height as f64;
    let phi = (x as f64 + 0.5) * 2.0 * PI / width as f64;
    Vector3::new(theta.sin() * phi.cos(), -theta.cos(), theta.sin() * phi.sin())
}

fn direction_texel(d: &Vector3<f64>, width: usize, height: usize) -> (usize, usize) {
    let theta = (-d.y).clamp(-1.0, 1.0).acos();
    let phi = d.z.atan2(d.x).rem_euclid(2.0 * PI);
    let y = ((theta / PI * height as f64) as usize).min(height - 1);
    let x = ((phi / (2.0 * PI) * width as f64) as usize).min(width - 1);
    (x, y)
}

/// Unnormalised `sin θ`-weighted least-squares fit of the basis to the map.
pub fn sh_fit_envmap(env: &EnvMap) -> Result<ShLighting> {
    let (w, h) = env.0.dims();
    let mut gram = SMatrix::<f64, 9, 9>::zeros();
    let mut rhs = [SVector::<f64, 9>::zeros(); 3];
    let mut energy = 0.0;
    for y in 0..h {
        let weight = ((y as f64 + 0.5) * PI / h as f64).sin();
        for x in 0..w {
            let d = texel_direction(x, y, w, h);
            let b = SVector::<f64, 9>::from(basis(&-d));
            gram += b * b.transpose() * weight;
            let l = env.0.get(x, y);
            for c in 0..3 {
                rhs[c] += b * (weight * l[c]);
                energy += l[c];
            }
        }
    }
    if !(energy > 0.0) {
        return Err(Error::Degenerate("environment map has zero energy".into()));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("environment too small to fit".into()))?;
    let mut coeffs = [0.0; 27];
    for c in 0..3 {
        coeffs[9 * c..9 * c + 9].copy_from_slice(chol.solve(&rhs[c]).as_slice());
    }
    ShLighting::new(coeffs)
}

/// Fit followed by unit-norm normalisation.
pub fn sh_project_envmap(env: &EnvMap) -> Result<ShLighting> {
    normalize_lighting(&sh_fit_envmap(env)?)
}

pub fn normalize_lighting(l: &ShLighting) -> Result<ShLighting> {
    let n = l.norm();
    if !(n > 0.0) {
        return Err(Error::Degenerate("cannot normalise zero lighting".into()));
    }
    Ok(l.scaled(1.0 / n))
}

/// Angular step of the augmentation grid.
pub const AUGMENT_STEP: f64 = PI / 18.0;

/// Rotations `R_y(azimuth) R_x(pitch) R_z(roll)` with 36 azimuths over the
/// full turn and 7 pitch and roll values in `{-3..3}·π/18`. Azimuth turns
/// about the vertical axis (camera `y`). The first entry is the identity.
pub fn augmentation_rotations() -> Vec<Matrix3<f64>> {
    let mut out = Vec::with_capacity(36 * 49);
    for a in 0..36 {
        for p in [0i32, -3, -2, -1, 1, 2, 3] {
            for r in [0i32, -3, -2, -1, 1, 2, 3] {
                let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), a as f64 * AUGMENT_STEP);
                let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), p as f64 * AUGMENT_STEP);
                let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), r as f64 * AUGMENT_STEP);
                out.push((ry * rx * rz).into_inner());
            }
        }
    }
    out
}

fn augmentation_operators() -> &'static [ShRotation] {
    static OPS: OnceLock<Vec<ShRotation>> = OnceLock::new();
    OPS.get_or_init(|| {
        augmentation_rotations()
            .iter()
            .map(sh_rotation_unchecked)
            .collect()
    })
}

/// All 1764 rotated copies of `l`, each rescaled to the norm of `l`.
///
/// Coefficient-space rotations are not orthogonal for this (non-orthonormal)
/// basis, so the rescale keeps every sample on the unit sphere.
pub fn augment_rotations(l: &ShLighting) -> Vec<ShLighting> {
    let target = l.norm();
    augmentation_operators()
        .iter()
        .map(|m| {
            let r = m.apply(l);
            let n = r.norm();
            if n > 0.0 {
                r.scaled(target / n)
            } else {
                r
            }
        })
        .collect()
}

/// Prior-space coordinates (the lighting `α`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorCoeffs(pub Vec<f64>);

impl PriorCoeffs {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }
}

/// `‖α‖²`.
pub fn prior_loss(alpha: &PriorCoeffs) -> f64 {
    alpha.0.iter().map(|a| a * a).sum()
}

pub fn prior_loss_grad(alpha: &PriorCoeffs) -> Vec<f64> {
    alpha.0.iter().map(|a| 2.0 * a).collect()
}

/// PCA illumination model.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorModel {
    mean: ShLighting,
    sigma: Vec<f64>,
    /// 27 × D, orthonormal columns.
    q: DMatrix<f64>,
}

impl PriorModel {
    pub fn new(mean: ShLighting, sigma: Vec<f64>, q: DMatrix<f64>) -> Result<Self> {
        let d = sigma.len();
        if d == 0 || q.nrows() != 27 || q.ncols() != d {
            return Err(Error::InvalidValue(format!(
                "prior basis must be 27x{d}, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) || sigma.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidValue("prior sigma must be positive and non-increasing".into()));
        }
        let dev = (q.transpose() * &q - DMatrix::identity(d, d)).abs().max();
        if dev > 1e-9 {
            return Err(Error::InvalidValue(format!("prior basis not orthonormal ({dev:e})")));
        }
        Ok(Self { mean, sigma, q })
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn mean(&self) -> &ShLighting {
        &self.mean
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `Q diag(σ)`.
    pub fn scaled_basis(&self) -> DMatrix<f64> {
        let mut m = self.q.clone();
        for (k, s) in self.sigma.iter().enumerate() {
            m.column_mut(k).scale_mut(*s);
        }
        m
    }

    /// `Σ⁻¹ Qᵀ (l - l̄)`.
    pub fn project(&self, l: &ShLighting) -> PriorCoeffs {
        let diff: Vec<f64> = l
            .coeffs()
            .iter()
            .zip(self.mean.coeffs())
            .map(|(a, b)| a - b)
            .collect();
        PriorCoeffs(
            (0..self.dim())
                .map(|k| {
                    let col = self.q.column(k);
                    col.iter().zip(&diff).map(|(q, d)| q * d).sum::<f64>() / self.sigma[k]
                })
                .collect(),
        )
    }

    pub fn reconstruct(&self, alpha: &PriorCoeffs) -> ShLighting {
        ShLighting::new(self.reconstruct_raw(&alpha.0)).expect("finite prior reconstruction")
    }

    pub fn reconstruct_raw(&self, alpha: &[f64]) -> [f64; 27] {
        let mut out = *self.mean.coeffs();
        for (k, a) in alpha.iter().enumerate() {
            let s = a * self.sigma[k];
            for (o, q) in out.iter_mut().zip(self.q.column(k).iter()) {
                *o += q * s;
            }
        }
        out
    }

    /// Pulls `dL/dl` back to `dL/dα`: `diag(σ) Qᵀ g`.
    pub fn pullback(&self, grad_l: &[f64; 27]) -> Vec<f64> {
        (0..self.dim())
            .map(|k| {
                self.sigma[k]
                    * self
                        .q
                        .column(k)
                        .iter()
                        .zip(grad_l)
                        .map(|(q, g)| q * g)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PriorDoc = serde_json::from_str(s)?;
        doc.try_into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PriorDoc::from(self)).expect("serialisable prior")
    }
}

#[derive(Serialize, Deserialize)]
struct PriorDoc {
    #[serde(rename = "D")]
    d: usize,
    mean: Vec<f64>,
    sigma: Vec<f64>,
    /// 27 × D, row-major.
    #[serde(rename = "Q")]
    q: Vec<f64>,
}

impl From<&PriorModel> for PriorDoc {
    fn from(m: &PriorModel) -> Self {
        let d = m.dim();
        let mut q = Vec::with_capacity(27 * d);
        for r in 0..27 {
            for c in 0..d {
                q.push(m.q[(r, c)]);
            }
        }
        Self {
            d,
            mean: m.mean.coeffs().to_vec(),
            sigma: m.sigma.clone(),
            q,
        }
    }
}

impl TryFrom<PriorDoc> for PriorModel {
    type Error = Error;

    fn try_from(doc: PriorDoc) -> Result<Self> {
        if doc.sigma.len() != doc.d || doc.q.len() != 27 * doc.d {
            return Err(Error::Format(format!(
                "prior with D = {} needs {} sigma and {} Q entries",
                doc.d,
                doc.d,
                27 * doc.d
            )));
        }
        PriorModel::new(
            ShLighting::from_slice(&doc.mean)?,
            doc.sigma,
            DMatrix::from_row_slice(27, doc.d, &doc.q),
        )
    }
}

impl Serialize for PriorModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PriorDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for PriorModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        PriorDoc::deserialize(d)?.try_into().map_err(D::Error::custom)
    }
}

/// PCA with population covariance; `σ_k` are the component standard
/// deviations so the training coefficients are whitened.
pub fn build_prior(samples: &[ShLighting], d: usize) -> Result<PriorModel> {
    if d == 0 || d > 27 {
        return Err(Error::InvalidValue(format!("prior dimension must be in 1..=27, got {d}")));
    }
    if samples.len() < d + 1 {
        return Err(Error::RankDeficient {
            requested: d,
            achieved: samples.len().saturating_sub(1),
        });
    }
    let n = samples.len() as f64;
    let mut mean = SVector::<f64, 27>::zeros();
    for s in samples {
        mean += SVector::<f64, 27>::from_column_slice(s.coeffs());
    }
    mean /= n;
    let mut cov = SMatrix::<f64, 27, 27>::zeros();
    for s in samples {
        let v = SVector::<f64, 27>::from_column_slice(s.coeffs()) - mean;
        cov.syger(1.0, &v, &v, 1.0);
    }
    cov /= n;
    cov.fill_upper_triangle_with_lower_triangle();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..27).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let achieved = order
        .iter()
        .filter(|&&k| eig.eigenvalues[k] > 1e-12 * top && eig.eigenvalues[k] > 0.0)
        .count();
    if achieved < d {
        return Err(Error::RankDeficient {
            requested: d,
            achieved,
        });
    }
    let mut q = DMatrix::zeros(27, d);
    let mut sigma = Vec::with_capacity(d);
    for (col, &k) in order.iter().take(d).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        // sign convention: largest-magnitude entry positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        q.set_column(col, &v);
        sigma.push(eig.eigenvalues[k].sqrt());
    }
    PriorModel::new(ShLighting::new(mean.into())?, sigma, q)
}

/// Projects, normalises and augments each environment.
pub fn prior_samples(envs: &[EnvMap]) -> Result<Vec<ShLighting>> {
    let fits: Vec<ShLighting> = envs
        .par_iter()
        .map(sh_project_envmap)
        .collect::<Result<_>>()?;
    Ok(fits.par_iter().flat_map_iter(augment_rotations).collect())
}

/// Procedural outdoor environment: sky gradient, optional sun lobe and a
/// diffusely lit ground.
#[derive(Clone, Debug)]
pub struct SkyParams {
    pub sun_direction: Vector3<f64>,
    pub sun_color: [f64; 3],
    pub sun_strength: f64,
    /// Lobe sharpness of `exp(κ (cos γ - 1))`.
    pub sun_kappa: f64,
    pub zenith: [f64; 3],
    pub horizon: [f64; 3],
    pub ground: [f64; 3],
}

impl SkyParams {
    pub fn random(rng: &mut impl Rng) -> Self {
        let elevation = rng.random_range(5f64..75.0).to_radians();
        let azimuth = rng.random_range(0.0..2.0 * PI);
        let overcast = rng.random_bool(0.2);
        let warm = rng.random_range(0.0..1.0);
        let up = Vector3::new(0.0, -1.0, 0.0);
        let sun_direction = up * elevation.sin()
            + Vector3::new(azimuth.cos(), 0.0, azimuth.sin()) * elevation.cos();
        let haze = rng.random_range(0.6..1.0);
        Self {
            sun_direction,
            sun_color: [1.0, 0.95 - 0.1 * warm, 0.85 - 0.25 * warm],
            sun_strength: if overcast { 0.0 } else { rng.random_range(4.0..16.0) },
            sun_kappa: rng.random_range(30.0..120.0),
            zenith: [0.25 * haze, 0.45 * haze, 0.9 * haze],
            horizon: [0.75, 0.8, 0.85],
            ground: [
                rng.random_range(0.15..0.35),
                rng.random_range(0.15..0.3),
                rng.random_range(0.1..0.2),
            ],
        }
    }

    pub fn radiance(&self, d: &Vector3<f64>) -> [f64; 3] {
        let up = -d.y;
        let sun_up = -self.sun_direction.y;
        if up >= 0.0 {
            let t = up.sqrt();
            let lobe = self.sun_strength * (self.sun_kappa * (d.dot(&self.sun_direction) - 1.0)).exp();
            std::array::from_fn(|c| {
                self.zenith[c] * t + self.horizon[c] * (1.0 - t) + lobe * self.sun_color[c]
            })
        } else {
            let light = 0.5 + sun_up.max(0.0) * (0.2 + 0.05 * self.sun_strength);
            std::array::from_fn(|c| self.ground[c] * light)
        }
    }

    pub fn rasterize(&self, height: usize) -> EnvMap {
        EnvMap::from_fn(height, |d| self.radiance(d)).expect("procedural sky is valid")
    }
}

/// Number of environments behind the shipped prior.
pub const PROCEDURAL_ENV_COUNT: usize = 79;
pub const PROCEDURAL_SEED: u64 = 0x5eed_0079;
/// Panorama height of the procedural skies.
pub const PROCEDURAL_HEIGHT: usize = 32;

/// The deterministic procedural environment set.
pub fn procedural_environments(count: usize, height: usize, seed: u64) -> Vec<EnvMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| SkyParams::random(&mut rng).rasterize(height))
        .collect()
}

/// Outdoor prior built from 79 procedural skies at 64×32, augmented.
pub fn default_prior() -> &'static PriorModel {
    static PRIOR: OnceLock<PriorModel> = OnceLock::new();
    PRIOR.get_or_init(|| {
        let envs = procedural_environments(PROCEDURAL_ENV_COUNT, PROCEDURAL_HEIGHT, PROCEDURAL_SEED);
        let samples = prior_samples(&envs).expect("procedural environments are valid");
        build_prior(&samples, PRIOR_DIM).expect("procedural prior has full rank")
    })
}
