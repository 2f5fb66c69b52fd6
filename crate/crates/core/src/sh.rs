//! Order-2 spherical-harmonic shading.
//!
//! The nine basis functions are the (unnormalised) polynomials
//!
//! ```text
//! b(n) = [1, nx, ny, nz, 3nz²-1, nx·ny, nx·nz, ny·nz, nx²-ny²]
//! ```
//!
//! and a colour lighting vector holds nine coefficients per channel in
//! channel-major order, so the shading of a normal in channel `c` is
//! `b(n) · l[9c..9c+9]`.
//!
//! Lighting is recovered in closed form: with albedo, shadow and normals
//! fixed, the linearised image is linear in the coefficients and the best
//! lighting is a minimum-norm least-squares solve. Because every row of the
//! system touches a single channel, the 27-column system splits into three
//! independent 9-column blocks.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use crate::color::linearize_value;
use crate::error::{Error, Result};
use crate::linalg::{Svd, RELATIVE_CUTOFF};
use crate::maps::{
    check_rotation, AlbedoMap, Encoding, Grid, ImageRgb, Mask, NormalMap, ShLighting, ShadowMap,
};
use crate::prior::{PriorCoeffs, PriorModel};

pub type Basis = [f64; 9];

/// Evaluates the basis for a unit normal.
pub fn sh_basis(n: &Vector3<f64>) -> Result<Basis> {
    let norm = n.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
        return Err(Error::NotUnit(norm));
    }
    Ok(basis(n))
}

/// Basis polynomials without the unit-norm check.
#[inline]
pub fn basis(n: &Vector3<f64>) -> Basis {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        1.0,
        x,
        y,
        z,
        3.0 * z * z - 1.0,
        x * y,
        x * z,
        y * z,
        x * x - y * y,
    ]
}

/// `sum_j w_j ∇b_j(n)`, the gradient of `b(n)·w` with respect to `n`.
#[inline]
pub fn basis_grad_dot(n: &Vector3<f64>, w: &[f64]) -> Vector3<f64> {
    let (x, y, z) = (n.x, n.y, n.z);
    Vector3::new(
        w[1] + w[5] * y + w[6] * z + 2.0 * w[8] * x,
        w[2] + w[5] * x + w[7] * z - 2.0 * w[8] * y,
        w[3] + 6.0 * w[4] * z + w[6] * x + w[7] * y,
    )
}

#[inline]
pub fn dot9(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-channel `B(n) l`.
#[inline]
pub fn shade(n: &Vector3<f64>, l: &ShLighting) -> [f64; 3] {
    let b = basis(n);
    [dot9(&b, l.channel(0)), dot9(&b, l.channel(1)), dot9(&b, l.channel(2))]
}

fn check_shapes(
    dims: (usize, usize),
    shadow: &ShadowMap,
    normals: &NormalMap,
    mask: &Mask,
) -> Result<()> {
    shadow.grid().ensure_dims(dims)?;
    normals.normals().ensure_dims(dims)?;
    mask.grid().ensure_dims(dims)
}

/// Signed image model `α ⊙ s B(n) l` on the mask, zero elsewhere.
pub fn render_unclamped(
    albedo: &AlbedoMap,
    shadow: &ShadowMap,
    normals: &NormalMap,
    lighting: &ShLighting,
    mask: &Mask,
) -> Result<Grid<[f64; 3]>> {
    let dims = albedo.dims();
    check_shapes(dims, shadow, normals, mask)?;
    let mut out = Grid::filled(dims.0, dims.1, [0.0; 3]);
    for i in 0..out.len() {
        if !mask.at(i) {
            continue;
        }
        let n = normals
            .at(i)
            .ok_or_else(|| Error::InvalidValue(format!("invalid normal under mask at pixel {i}")))?;
        let sh = shade(&n, lighting);
        let a = albedo.grid().data()[i];
        let s = shadow.grid().data()[i];
        out.data_mut()[i] = [a[0] * s * sh[0], a[1] * s * sh[1], a[2] * s * sh[2]];
    }
    Ok(out)
}

/// Linear render, negative values clamped to zero.
pub fn render(
    albedo: &AlbedoMap,
    shadow: &ShadowMap,
    normals: &NormalMap,
    lighting: &ShLighting,
    mask: &Mask,
) -> Result<ImageRgb> {
    let px = render_unclamped(albedo, shadow, normals, lighting, mask)?;
    ImageRgb::new(px.map(|p| p.map(|v| v.max(0.0))), Encoding::Linear)
}

/// Closed-form lighting estimate.
#[derive(Clone, Debug)]
pub struct LightingSolve {
    pub lighting: ShLighting,
    /// Post-cutoff rank of the system (27 when well posed).
    pub rank: usize,
    pub degenerate: bool,
}

/// Closed-form lighting inside a [`PriorModel`] subspace.
#[derive(Clone, Debug)]
pub struct PriorLightingSolve {
    pub coeffs: PriorCoeffs,
    pub lighting: ShLighting,
    pub rank: usize,
    pub degenerate: bool,
}

/// Borrowed per-pixel inputs of the lighting system. `target` is linear.
#[derive(Clone, Copy)]
pub struct LightingInputs<'a> {
    pub target: &'a [[f64; 3]],
    pub albedo: &'a [[f64; 3]],
    pub shadow: &'a [f64],
    pub normals: &'a [Vector3<f64>],
    pub mask: &'a [bool],
}

impl LightingInputs<'_> {
    fn active(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    /// Design block of channel `c` and its right-hand side.
    fn block(&self, c: usize, active: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let k = active.len();
        let mut a = DMatrix::zeros(k, 9);
        let mut y = DVector::zeros(k);
        for (row, &i) in active.iter().enumerate() {
            let w = self.albedo[i][c] * self.shadow[i];
            let b = basis(&self.normals[i]);
            for j in 0..9 {
                a[(row, j)] = w * b[j];
            }
            y[row] = self.target[i][c];
        }
        (a, y)
    }
}

fn linear_target(img: &ImageRgb) -> Vec<[f64; 3]> {
    match img.encoding() {
        Encoding::Linear => img.pixels().data().to_vec(),
        Encoding::SrgbGamma => img
            .pixels()
            .data()
            .iter()
            .map(|p| p.map(linearize_value))
            .collect(),
    }
}

struct Prepared {
    target: Vec<[f64; 3]>,
    mask: Vec<bool>,
    normals: Vec<Vector3<f64>>,
}

fn prepare(
    img: &ImageRgb,
    albedo: &AlbedoMap,
    shadow: &ShadowMap,
    normals: &NormalMap,
    mask: &Mask,
) -> Result<Prepared> {
    let dims = img.dims();
    albedo.grid().ensure_dims(dims)?;
    check_shapes(dims, shadow, normals, mask)?;
    let mask: Vec<bool> = (0..mask.grid().len())
        .map(|i| mask.at(i) && normals.valid().at(i))
        .collect();
    let count = mask.iter().filter(|&&b| b).count();
    if count < 27 {
        return Err(Error::Degenerate(format!(
            "lighting needs at least 27 foreground pixels, got {count}"
        )));
    }
    Ok(Prepared {
        target: linear_target(img),
        mask,
        normals: normals.normals().data().to_vec(),
    })
}

/// Least-squares lighting for a (gamma-encoded or linear) image.
pub fn solve_lighting(
    img: &ImageRgb,
    albedo: &AlbedoMap,
    shadow: &ShadowMap,
    normals: &NormalMap,
    mask: &Mask,
) -> Result<LightingSolve> {
    let p = prepare(img, albedo, shadow, normals, mask)?;
    Ok(solve_lighting_raw(&LightingInputs {
        target: &p.target,
        albedo: albedo.grid().data(),
        shadow: shadow.grid().data(),
        normals: &p.normals,
        mask: &p.mask,
    }))
}

pub fn solve_lighting_raw(inp: &LightingInputs) -> LightingSolve {
    let active = inp.active();
    let blocks: Vec<_> = (0..3).map(|c| inp.block(c, &active)).collect();
    let svds: Vec<Svd> = blocks.iter().map(|(a, _)| Svd::new(a)).collect();
    let sigma_max = svds.iter().map(Svd::sigma_max).fold(0.0, f64::max);
    let threshold = RELATIVE_CUTOFF * sigma_max;
    let mut coeffs = [0.0; 27];
    let mut rank = 0;
    for c in 0..3 {
        let x = svds[c].solve(&blocks[c].1, threshold);
        coeffs[9 * c..9 * c + 9].copy_from_slice(x.as_slice());
        rank += svds[c].rank(threshold);
    }
    LightingSolve {
        lighting: ShLighting::new(coeffs).unwrap_or_else(|_| ShLighting::zeros()),
        rank,
        degenerate: rank < 27,
    }
}

/// Solves for the prior coefficients of the best lighting in
/// `{Q diag(σ) α + l̄}`.
pub fn solve_lighting_in_prior(
    img: &ImageRgb,
    albedo: &AlbedoMap,
    shadow: &ShadowMap,
    normals: &NormalMap,
    mask: &Mask,
    prior: &PriorModel,
) -> Result<PriorLightingSolve> {
    let p = prepare(img, albedo, shadow, normals, mask)?;
    Ok(solve_lighting_in_prior_raw(
        &LightingInputs {
            target: &p.target,
            albedo: albedo.grid().data(),
            shadow: shadow.grid().data(),
            normals: &p.normals,
            mask: &p.mask,
        },
        prior,
    ))
}

pub fn solve_lighting_in_prior_raw(inp: &LightingInputs, prior: &PriorModel) -> PriorLightingSolve {
    let active = inp.active();
    let d = prior.dim();
    let basis_27xd = prior.scaled_basis();
    let mean = prior.mean();
    let k = active.len();
    let mut m = DMatrix::zeros(3 * k, d);
    let mut rhs = DVector::zeros(3 * k);
    for c in 0..3 {
        // rows of this channel only see coefficients 9c..9c+9
        let qc = basis_27xd.rows(9 * c, 9);
        let mean_c = &mean.coeffs()[9 * c..9 * c + 9];
        for (row, &i) in active.iter().enumerate() {
            let w = inp.albedo[i][c] * inp.shadow[i];
            let b = basis(&inp.normals[i]);
            let r = c * k + row;
            for col in 0..d {
                let mut acc = 0.0;
                for j in 0..9 {
                    acc += b[j] * qc[(j, col)];
                }
                m[(r, col)] = w * acc;
            }
            rhs[r] = inp.target[i][c] - w * dot9(&b, mean_c);
        }
    }
    let svd = Svd::new(&m);
    let threshold = RELATIVE_CUTOFF * svd.sigma_max();
    let rank = svd.rank(threshold);
    let alpha = svd.solve(&rhs, threshold);
    let coeffs = PriorCoeffs(alpha.iter().copied().collect());
    PriorLightingSolve {
        lighting: prior.reconstruct(&coeffs),
        coeffs,
        rank,
        degenerate: rank < d,
    }
}

/// Gradients of a scalar loss through the closed-form lighting solve.
#[derive(Clone, Debug)]
pub struct LightingSolveGrads {
    pub albedo: Vec<[f64; 3]>,
    pub shadow: Vec<f64>,
    /// With respect to the (unit) normal vector.
    pub normals: Vec<Vector3<f64>>,
}

/// Vector-Jacobian product of [`solve_lighting_raw`]: given `dL/dl`, returns
/// `dL/d albedo`, `dL/d shadow` and `dL/d n` using the derivative of the
/// pseudoinverse of a full-column-rank matrix,
/// `d(A^+ y) = (A^T A)^{-1} (dA^T r - A^T dA l)` with `r = y - A l`.
pub fn solve_lighting_vjp(inp: &LightingInputs, grad_l: &[f64; 27]) -> Result<LightingSolveGrads> {
    let active = inp.active();
    let n_px = inp.mask.len();
    let mut out = LightingSolveGrads {
        albedo: vec![[0.0; 3]; n_px],
        shadow: vec![0.0; n_px],
        normals: vec![Vector3::zeros(); n_px],
    };
    let blocks: Vec<_> = (0..3).map(|c| inp.block(c, &active)).collect();
    let svds: Vec<Svd> = blocks.iter().map(|(a, _)| Svd::new(a)).collect();
    let sigma_max = svds.iter().map(Svd::sigma_max).fold(0.0, f64::max);
    let threshold = RELATIVE_CUTOFF * sigma_max;
    for c in 0..3 {
        if svds[c].rank(threshold) < 9 {
            return Err(Error::Degenerate(
                "lighting gradient needs a full-rank system".into(),
            ));
        }
        let (a, y) = &blocks[c];
        let l = svds[c].solve(y, threshold);
        let g = DVector::from_column_slice(&grad_l[9 * c..9 * c + 9]);
        let v = svds[c].gram_pinv_apply(&g, threshold);
        let r = y - a * &l;
        let av = a * &v;
        for (row, &i) in active.iter().enumerate() {
            let n = inp.normals[i];
            let b = basis(&n);
            let (bv, bl) = (dot9(&b, v.as_slice()), dot9(&b, l.as_slice()));
            // dL/dA[row, j] = r[row] v[j] - (Av)[row] l[j]
            let inner = r[row] * bv - av[row] * bl;
            let alb = inp.albedo[i][c];
            let s = inp.shadow[i];
            out.albedo[i][c] += s * inner;
            out.shadow[i] += alb * inner;
            let gn = basis_grad_dot(&n, v.as_slice()) * r[row]
                - basis_grad_dot(&n, l.as_slice()) * av[row];
            out.normals[i] += gn * (alb * s);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rotation

/// Coefficient-space rotation for one colour channel; the 27×27 operator is
/// block diagonal with three copies.
#[derive(Clone, Debug, PartialEq)]
pub struct ShRotation {
    block: SMatrix<f64, 9, 9>,
}

/// Well-spread sample directions used to fit rotation blocks.
fn fibonacci_directions(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Builds `M` with `b(ω)ᵀ (M l) = b(Rᵀ ω)ᵀ l` for every direction `ω`.
///
/// The span of the basis (polynomials of degree ≤ 2 on the sphere) is
/// closed under rotation, so fitting `M` on more than nine generic
/// directions is exact.
pub fn sh_rotation(r: &Matrix3<f64>) -> Result<ShRotation> {
    check_rotation(r)?;
    Ok(sh_rotation_unchecked(r))
}

pub(crate) fn sh_rotation_unchecked(r: &Matrix3<f64>) -> ShRotation {
    let dirs = fibonacci_directions(18);
    let mut b = DMatrix::zeros(dirs.len(), 9);
    let mut b_rot = DMatrix::zeros(dirs.len(), 9);
    let rt = r.transpose();
    for (k, w) in dirs.iter().enumerate() {
        let b0 = basis(w);
        let b1 = basis(&(rt * w));
        for j in 0..9 {
            b[(k, j)] = b0[j];
            b_rot[(k, j)] = b1[j];
        }
    }
    let svd = Svd::new(&b);
    let threshold = RELATIVE_CUTOFF * svd.sigma_max();
    let mut block = SMatrix::<f64, 9, 9>::zeros();
    for col in 0..9 {
        let x = svd.solve(&b_rot.column(col).into_owned(), threshold);
        for row in 0..9 {
            block[(row, col)] = x[row];
        }
    }
    ShRotation { block }
}

impl ShRotation {
    pub fn identity() -> Self {
        Self {
            block: SMatrix::identity(),
        }
    }

    pub fn block(&self) -> &SMatrix<f64, 9, 9> {
        &self.block
    }

    pub fn matrix27(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(27, 27);
        for c in 0..3 {
            m.view_mut((9 * c, 9 * c), (9, 9)).copy_from(&self.block);
        }
        m
    }

    pub fn compose(&self, other: &ShRotation) -> ShRotation {
        ShRotation {
            block: self.block * other.block,
        }
    }

    pub fn apply(&self, l: &ShLighting) -> ShLighting {
        let mut out = [0.0; 27];
        for c in 0..3 {
            let v = self.block * nalgebra::SVector::<f64, 9>::from_column_slice(l.channel(c));
            out[9 * c..9 * c + 9].copy_from_slice(v.as_slice());
        }
        ShLighting::new(out).expect("rotation of finite coefficients")
    }

    /// `Mᵀ g`, the adjoint used to pull gradients back through [`apply`](Self::apply).
    pub fn apply_transpose(&self, g: &[f64; 27]) -> [f64; 27] {
        let mut out = [0.0; 27];
        let bt = self.block.transpose();
        for c in 0..3 {
            let v = bt * nalgebra::SVector::<f64, 9>::from_column_slice(&g[9 * c..9 * c + 9]);
            out[9 * c..9 * c + 9].copy_from_slice(v.as_slice());
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Hemisphere

/// Orthographic render of the front hemisphere of a unit sphere (albedo 1,
/// no shadow). Returns the linear image and the disc mask.
pub fn render_hemisphere(l: &ShLighting, resolution: usize) -> Result<(ImageRgb, Mask)> {
    if resolution < 16 {
        return Err(Error::InvalidValue(format!(
            "hemisphere resolution must be >= 16, got {resolution}"
        )));
    }
    let mut mask = Grid::filled(resolution, resolution, false);
    let px = Grid::from_fn(resolution, resolution, |x, y| {
        match hemisphere_normal(x, y, resolution) {
            Some(n) => {
                *mask.get_mut(x, y) = true;
                shade(&n, l)
            }
            None => [0.0; 3],
        }
    });
    Ok((ImageRgb::new(px, Encoding::Linear)?, Mask::new(mask)))
}

/// Normal seen at a hemisphere pixel, if it lies on the disc.
pub fn hemisphere_normal(x: usize, y: usize, resolution: usize) -> Option<Vector3<f64>> {
    let u = (x as f64 + 0.5) / resolution as f64 * 2.0 - 1.0;
    let v = (y as f64 + 0.5) / resolution as f64 * 2.0 - 1.0;
    let r2 = u * u + v * v;
    (r2 < 1.0).then(|| Vector3::new(u, v, (1.0 - r2).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n < 1.0 {
                return v / n;
            }
        }
    }

    fn rand_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = nalgebra::Unit::new_normalize(rand_unit(rng));
        Rotation3::from_axis_angle(&axis, rng.random_range(-3.1..3.1)).into_inner()
    }

    fn rand_lighting(rng: &mut impl Rng) -> ShLighting {
        let mut c = [0.0; 27];
        for v in &mut c {
            *v = rng.random_range(-1.0..1.0);
        }
        ShLighting::new(c).unwrap()
    }

    #[test]
    fn basis_examples() {
        assert_eq!(
            sh_basis(&Vector3::z()).unwrap(),
            [1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            sh_basis(&Vector3::x()).unwrap(),
            [1.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0]
        );
        let s = 1.0 / 3f64.sqrt();
        let b = sh_basis(&Vector3::new(s, s, s)).unwrap();
        let want = [1.0, s, s, s, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];
        for (a, w) in b.iter().zip(want) {
            assert!((a - w).abs() < 1e-12);
        }
        assert!(sh_basis(&Vector3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = rand_unit(&mut rng);
        let g = basis_grad_dot(&n, &w);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = n;
            let mut b = n;
            a[k] += h;
            b[k] -= h;
            let fd = (dot9(&basis(&a), &w) - dot9(&basis(&b), &w)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn rotation_identity_and_reject_reflection() {
        let m = sh_rotation(&Matrix3::identity()).unwrap();
        assert!((m.matrix27() - DMatrix::identity(27, 27)).abs().max() < 1e-12);
        let refl = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(sh_rotation(&refl).is_err());
    }

    #[test]
    fn rotation_blocks_do_not_mix_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = sh_rotation(&rand_rotation(&mut rng)).unwrap();
            let deg = |j: usize| match j {
                0 => 0,
                1..=3 => 1,
                _ => 2,
            };
            for i in 0..9 {
                for j in 0..9 {
                    if deg(i) != deg(j) {
                        assert!(m.block()[(i, j)].abs() < 1e-12, "({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_preserves_function_norm_not_coefficient_norm() {
        // Gram matrix of the basis under the uniform measure, by dense quadrature.
        let dirs = fibonacci_directions(20_000);
        let mut gram = SMatrix::<f64, 9, 9>::zeros();
        for w in &dirs {
            let b = nalgebra::SVector::<f64, 9>::from(basis(w));
            gram += b * b.transpose();
        }
        gram /= dirs.len() as f64;
        let r = Rotation3::from_euler_angles(0.4, -0.9, 1.3).into_inner();
        let m = sh_rotation(&r).unwrap().block;
        let lhs = m.transpose() * gram * m;
        assert!((lhs - gram).abs().max() < 2e-3);
        // the quadratic block is not orthogonal because the basis is not orthonormal
        assert!((m.transpose() * m - SMatrix::<f64, 9, 9>::identity()).abs().max() > 1e-2);
    }

    #[test]
    fn hemisphere_centre_pixel_and_uniform_disc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = rand_lighting(&mut rng);
        let (img, mask) = render_hemisphere(&l, 65).unwrap();
        let centre = img.pixels().get(32, 32);
        assert_eq!(*centre, shade(&Vector3::z(), &l));
        assert!(!mask.grid().get(0, 0));

        let (flat, mask) = render_hemisphere(&ShLighting::ambient([0.7; 3]), 32).unwrap();
        for (p, &m) in flat.pixels().data().iter().zip(mask.grid().data()) {
            assert_eq!(*p, if m { [0.7; 3] } else { [0.0; 3] });
        }
        assert!(render_hemisphere(&l, 15).is_err());
    }

    #[test]
    fn half_turn_about_y_mirrors_z_even_lighting() {
        // A half turn about y maps (x, y, z) to (-x, y, -z); for lighting with
        // no odd-in-z terms this is a left-right mirror of the front disc.
        let mut l = rand_lighting(&mut ChaCha8Rng::seed_from_u64(8));
        for c in 0..3 {
            for j in [3, 6, 7] {
                l.coeffs_mut()[9 * c + j] = 0.0;
            }
        }
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI).into_inner();
        let lr = sh_rotation(&r).unwrap().apply(&l);
        let res = 32;
        let (a, _) = render_hemisphere(&l, res).unwrap();
        let (b, _) = render_hemisphere(&lr, res).unwrap();
        for y in 0..res {
            for x in 0..res {
                let p = a.pixels().get(x, y);
                let q = b.pixels().get(res - 1 - x, y);
                for c in 0..3 {
                    assert!((p[c] - q[c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn render_dc_and_shadow_examples() {
        let (w, h) = (4, 3);
        let albedo = AlbedoMap::constant(w, h, [0.5; 3]).unwrap();
        let normals = NormalMap::frontal(w, h);
        let mask = Mask::full(w, h);
        let l = ShLighting::ambient([1.0; 3]);
        let img = render(&albedo, &ShadowMap::ones(w, h), &normals, &l, &mask).unwrap();
        assert!(img.pixels().data().iter().all(|p| *p == [0.5; 3]));
        let half = ShadowMap::new(Grid::filled(w, h, 0.5)).unwrap();
        let img = render(&albedo, &half, &normals, &l, &mask).unwrap();
        assert!(img.pixels().data().iter().all(|p| *p == [0.25; 3]));
    }

    #[test]
    fn lighting_vjp_matches_finite_differences() {
        use crate::geometry::{normal_from_params, normal_from_params_jacobian};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let n = 64;
            let target: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let mut albedo: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)])
                .collect();
            let mut shadow: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
            let mut params: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let mask = vec![true; n];
            let g: [f64; 27] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let eval = |albedo: &[[f64; 3]], shadow: &[f64], params: &[[f64; 2]]| {
                let normals: Vec<_> = params.iter().map(|&[p, q]| normal_from_params(p, q)).collect();
                let l = solve_lighting_raw(&LightingInputs { target: &target, albedo, shadow, normals: &normals, mask: &mask });
                dot27(&g, l.lighting.coeffs())
            };
            let normals: Vec<_> = params.iter().map(|&[p, q]| normal_from_params(p, q)).collect();
            let grads = solve_lighting_vjp(
                &LightingInputs { target: &target, albedo: &albedo, shadow: &shadow, normals: &normals, mask: &mask },
                &g,
            )
            .unwrap();
            let mut rel = |a: f64, fd: f64| worst = worst.max((a - fd).abs() / (a.abs().max(fd.abs()) + 1e-8));
            for i in (0..n).step_by(5) {
                for c in 0..3 {
                    let v = albedo[i][c];
                    albedo[i][c] = v + h;
                    let fp = eval(&albedo, &shadow, &params);
                    albedo[i][c] = v - h;
                    let fm = eval(&albedo, &shadow, &params);
                    albedo[i][c] = v;
                    rel(grads.albedo[i][c], (fp - fm) / (2.0 * h));
                }
                let v = shadow[i];
                shadow[i] = v + h;
                let fp = eval(&albedo, &shadow, &params);
                shadow[i] = v - h;
                let fm = eval(&albedo, &shadow, &params);
                shadow[i] = v;
                rel(grads.shadow[i], (fp - fm) / (2.0 * h));
                let (_, dp, dq) = normal_from_params_jacobian(params[i][0], params[i][1]);
                for (k, dn) in [dp, dq].iter().enumerate() {
                    let v = params[i][k];
                    params[i][k] = v + h;
                    let fp = eval(&albedo, &shadow, &params);
                    params[i][k] = v - h;
                    let fm = eval(&albedo, &shadow, &params);
                    params[i][k] = v;
                    rel(grads.normals[i].dot(dn), (fp - fm) / (2.0 * h));
                }
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    fn dot27(a: &[f64; 27], b: &[f64; 27]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}
