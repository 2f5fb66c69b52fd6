//! Per-pixel maps and the small value types shared by every module.
//!
//! All maps are stored row-major with the origin at the top-left pixel,
//! `x` growing to the right and `y` growing downwards.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Display gamma assumed for stored (LDR) images.
pub const GAMMA: f64 = 2.2;

/// Smallest admissible shadow value.
pub const SHADOW_FLOOR: f64 = 1e-3;

/// Dense row-major 2D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T> Grid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidValue(format!(
                "grid of {width}x{height} needs {} elements, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::ShapeMismatch {
                expected: dims,
                got: self.dims(),
            });
        }
        Ok(())
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

/// How the values of an [`ImageRgb`] relate to scene radiance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    SrgbGamma,
    Linear,
}

/// RGB image with an explicit encoding tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pixels: Grid<[f64; 3]>,
    encoding: Encoding,
}

impl ImageRgb {
    /// Wraps pixels after checking they are all finite.
    pub fn new(pixels: Grid<[f64; 3]>, encoding: Encoding) -> Result<Self> {
        if pixels.data().iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite image value".into()));
        }
        Ok(Self { pixels, encoding })
    }

    /// Wraps pixels, clamping every channel into `[0, 1]`. Used by loaders.
    pub fn clamped(pixels: Grid<[f64; 3]>, encoding: Encoding) -> Result<Self> {
        let pixels = pixels.map(|p| p.map(|v| v.clamp(0.0, 1.0)));
        Self::new(pixels, encoding)
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn pixels(&self) -> &Grid<[f64; 3]> {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn into_pixels(self) -> Grid<[f64; 3]> {
        self.pixels
    }
}

/// Boolean per-pixel mask; `true` marks a pixel that takes part.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Grid<bool>);

impl Mask {
    pub fn new(grid: Grid<bool>) -> Self {
        Self(grid)
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, true))
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, false))
    }

    pub fn grid(&self) -> &Grid<bool> {
        &self.0
    }

    pub fn grid_mut(&mut self) -> &mut Grid<bool> {
        &mut self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn at(&self, i: usize) -> bool {
        self.0.data()[i]
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        other.0.ensure_dims(self.dims())?;
        let data = self
            .0
            .data()
            .iter()
            .zip(other.0.data())
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(Mask(Grid::new(self.0.width(), self.0.height(), data)?))
    }
}

/// Perspective depth; holes are non-finite.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Grid<f64>);

impl DepthMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if grid.data().iter().any(|&d| d.is_finite() && d <= 0.0) {
            return Err(Error::InvalidValue("depth must be strictly positive".into()));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        let d = *self.0.get(x, y);
        d.is_finite().then_some(d)
    }

    pub fn validity(&self) -> Mask {
        Mask(self.0.map(|d| d.is_finite()))
    }
}

/// Unit normals in camera coordinates with an explicit validity mask.
///
/// Valid normals point away from the camera (`n_z > 0`), the orientation
/// produced by differentiating a perspective depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    normals: Grid<Vector3<f64>>,
    valid: Mask,
}

impl NormalMap {
    pub fn new(normals: Grid<Vector3<f64>>, valid: Mask) -> Result<Self> {
        valid.0.ensure_dims(normals.dims())?;
        for (n, &ok) in normals.data().iter().zip(valid.0.data()) {
            if !ok {
                continue;
            }
            let norm = n.norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::NotUnit(norm));
            }
            if n.z <= 0.0 {
                return Err(Error::InvalidValue(format!(
                    "valid normal with n_z = {} <= 0",
                    n.z
                )));
            }
        }
        Ok(Self { normals, valid })
    }

    /// Every pixel valid and facing `(0, 0, 1)`.
    pub fn frontal(width: usize, height: usize) -> Self {
        Self {
            normals: Grid::filled(width, height, Vector3::z()),
            valid: Mask::full(width, height),
        }
    }

    pub fn normals(&self) -> &Grid<Vector3<f64>> {
        &self.normals
    }

    pub fn valid(&self) -> &Mask {
        &self.valid
    }

    pub fn dims(&self) -> (usize, usize) {
        self.normals.dims()
    }

    #[inline]
    pub fn at(&self, i: usize) -> Option<Vector3<f64>> {
        self.valid.at(i).then(|| self.normals.data()[i])
    }

    pub fn to_params(&self) -> NormalParams {
        NormalParams(self.normals.map(|n| {
            if n.z > 0.0 {
                [n.x / n.z, n.y / n.z]
            } else {
                [0.0, 0.0]
            }
        }))
    }
}

/// Per-pixel `(n_x / n_z, n_y / n_z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalParams(pub Grid<[f64; 2]>);

impl NormalParams {
    pub fn to_normals(&self) -> NormalMap {
        let normals = self
            .0
            .map(|&[p, q]| crate::geometry::normal_from_params(p, q));
        let (w, h) = self.0.dims();
        NormalMap {
            normals,
            valid: Mask::full(w, h),
        }
    }
}

/// Diffuse albedo in `[0, 1]^3`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlbedoMap(Grid<[f64; 3]>);

impl AlbedoMap {
    pub fn new(grid: Grid<[f64; 3]>) -> Result<Self> {
        if grid
            .data()
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidValue("albedo outside [0, 1]".into()));
        }
        Ok(Self(grid))
    }

    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(Grid::filled(width, height, rgb))
    }

    pub fn grid(&self) -> &Grid<[f64; 3]> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// Scalar shadowing weight in `[SHADOW_FLOOR, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowMap(Grid<f64>);

impl ShadowMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if grid
            .data()
            .iter()
            .any(|v| !(SHADOW_FLOOR..=1.0).contains(v))
        {
            return Err(Error::InvalidValue(format!(
                "shadow outside [{SHADOW_FLOOR}, 1]"
            )));
        }
        Ok(Self(grid))
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, 1.0))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// Pinhole camera: `λ [x y 1]^T = K [R | t] [X 1]^T` with square pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        f: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(f.is_finite() && f > 0.0 && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidValue("bad intrinsics".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("non-finite translation".into()));
        }
        check_rotation(&rotation)?;
        Ok(Self {
            f,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Camera at the world origin looking down `+z`.
    pub fn identity(f: f64, cx: f64, cy: f64) -> Self {
        Self {
            f,
            cx,
            cy,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// World-to-camera rotation.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera centre in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.f, 0.0, self.cx, 0.0, self.f, self.cy, 0.0, 0.0, 1.0)
    }

    /// Same pose, intrinsics scaled by `s` and shifted by `(-ox, -oy)`.
    pub fn rescaled(&self, s: f64, ox: f64, oy: f64) -> Camera {
        Camera {
            f: self.f * s,
            cx: self.cx * s - ox,
            cy: self.cy * s - oy,
            rotation: self.rotation,
            translation: self.translation,
        }
    }
}

/// Checks `R^T R = I` and `det R = +1` to 1e-9.
pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidRotation("non-finite entry".into()));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    if ortho > 1e-9 {
        return Err(Error::InvalidRotation(format!(
            "R^T R deviates from I by {ortho:e}"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRotation(format!("det = {det}")));
    }
    Ok(())
}

/// Order-2 colour SH lighting, channel-major: `[l_r(0..9), l_g(0..9), l_b(0..9)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShLighting {
    coeffs: [f64; 27],
}

impl ShLighting {
    pub fn new(coeffs: [f64; 27]) -> Result<Self> {
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite SH coefficient".into()));
        }
        Ok(Self { coeffs })
    }

    pub fn from_slice(coeffs: &[f64]) -> Result<Self> {
        let arr: [f64; 27] = coeffs.try_into().map_err(|_| {
            Error::InvalidValue(format!("expected 27 coefficients, got {}", coeffs.len()))
        })?;
        Self::new(arr)
    }

    pub fn zeros() -> Self {
        Self { coeffs: [0.0; 27] }
    }

    /// Only the constant term, per channel.
    pub fn ambient(rgb: [f64; 3]) -> Self {
        let mut coeffs = [0.0; 27];
        for c in 0..3 {
            coeffs[9 * c] = rgb[c];
        }
        Self { coeffs }
    }

    /// Same 9 coefficients replicated on all channels.
    pub fn grey(l9: [f64; 9]) -> Self {
        let mut coeffs = [0.0; 27];
        for c in 0..3 {
            coeffs[9 * c..9 * c + 9].copy_from_slice(&l9);
        }
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[f64; 27] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64; 27] {
        &mut self.coeffs
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.coeffs[9 * c..9 * c + 9]
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            coeffs: self.coeffs.map(|v| v * k),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut coeffs = self.coeffs;
        for (a, b) in coeffs.iter_mut().zip(other.coeffs.iter()) {
            *a += b;
        }
        Self { coeffs }
    }
}

const LIGHTING_LAYOUT: &str = "channel-major-order2";

#[derive(Serialize, Deserialize)]
struct ShLightingDoc {
    layout: String,
    coeffs: Vec<f64>,
}

impl Serialize for ShLighting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ShLightingDoc {
            layout: LIGHTING_LAYOUT.to_string(),
            coeffs: self.coeffs.to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ShLighting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = ShLightingDoc::deserialize(d)?;
        if doc.layout != LIGHTING_LAYOUT {
            return Err(D::Error::custom(format!(
                "unsupported lighting layout `{}`",
                doc.layout
            )));
        }
        ShLighting::from_slice(&doc.coeffs).map_err(D::Error::custom)
    }
}

/// Weights of the five energy terms and of the two feature spaces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub appearance: f64,
    pub nm: f64,
    pub albedo: f64,
    pub cross_rend: f64,
    pub lighting: f64,
    pub vgg: f64,
    pub lab: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            appearance: 0.1,
            nm: 1.0,
            albedo: 0.1,
            cross_rend: 0.1,
            lighting: 0.005,
            vgg: 2.5,
            lab: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.appearance,
            self.nm,
            self.albedo,
            self.cross_rend,
            self.lighting,
            self.vgg,
            self.lab,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidValue("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}
