//! The inverse-rendering energy and its analytic gradient.
//!
//! Per view:
//!
//! * appearance: `ε(α ⊙ B(n) l, min(1, i^γ / s))`, comparing the shadow-free
//!   observation with the local (unshadowed) model;
//! * normal supervision: mean angle between estimated and guide normals;
//! * lighting prior: `‖α_light‖²`.
//!
//! Per directed link `j → i` between overlapping views:
//!
//! * albedo consistency: `ε(α_i, proj_{j→i}(α_j))`;
//! * cross rendering: `ε(proj_{j→i}(i_j^γ) / proj_{j→i}(s_j), α_i ⊙ B(n_i) M(R_{j→i}) l_j)`.
//!
//! Per-view terms are averaged over views and link terms over links, so the
//! total is `Σ w_k · term_k` over the reported breakdown.

pub mod features;

use nalgebra::Vector3;
use serde::Serialize;

pub use features::{
    perceptual_eval, ConvBank, FeatureSet, FeatureTransform, Features, Lab, PerceptualEval,
    PyramidGrad,
};

use crate::color::linearize_value;
use crate::error::{Error, Result};
use crate::geometry::{normal_from_params, normal_from_params_jacobian, params_from_normal, Warp};
use crate::maps::{
    AlbedoMap, Camera, DepthMap, Encoding, Grid, ImageRgb, LossWeights, Mask, NormalMap,
    ShLighting, ShadowMap, SHADOW_FLOOR,
};
use crate::prior::PriorModel;
use crate::sh::{basis, basis_grad_dot, dot9, sh_rotation, ShRotation};

/// Clamp margin used by `arccos` in the normal loss.
pub const NM_DELTA: f64 = 1e-7;

// ---------------------------------------------------------------------------
// Parameter squashing

#[inline]
pub fn albedo_from_raw(a: f64) -> f64 {
    (a.tanh() + 1.0) / 2.0
}

#[inline]
fn albedo_from_raw_deriv(a: f64) -> f64 {
    let t = a.tanh();
    (1.0 - t * t) / 2.0
}

/// Inverse squash; the target is clamped into the open interval first.
#[inline]
pub fn albedo_to_raw(v: f64) -> f64 {
    (2.0 * v.clamp(1e-9, 1.0 - 1e-9) - 1.0).atanh()
}

#[inline]
pub fn shadow_from_raw(r: f64) -> f64 {
    SHADOW_FLOOR + (1.0 - SHADOW_FLOOR) * (r.tanh() + 1.0) / 2.0
}

#[inline]
fn shadow_from_raw_deriv(r: f64) -> f64 {
    let t = r.tanh();
    (1.0 - SHADOW_FLOOR) * (1.0 - t * t) / 2.0
}

#[inline]
pub fn shadow_to_raw(s: f64) -> f64 {
    let u = (s - SHADOW_FLOOR) / (1.0 - SHADOW_FLOOR);
    (2.0 * u.clamp(1e-9, 1.0 - 1e-9) - 1.0).atanh()
}

/// Free parameters of one view.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyState {
    dims: (usize, usize),
    pub albedo_raw: Vec<[f64; 3]>,
    pub shadow_raw: Vec<f64>,
    pub normal_params: Vec<[f64; 2]>,
    pub lighting_alpha: Vec<f64>,
}

impl EnergyState {
    pub fn new(
        dims: (usize, usize),
        albedo_raw: Vec<[f64; 3]>,
        shadow_raw: Vec<f64>,
        normal_params: Vec<[f64; 2]>,
        lighting_alpha: Vec<f64>,
    ) -> Result<Self> {
        let n = dims.0 * dims.1;
        if albedo_raw.len() != n || shadow_raw.len() != n || normal_params.len() != n {
            return Err(Error::InvalidValue(format!(
                "state maps must have {n} entries"
            )));
        }
        let finite = albedo_raw.iter().flatten().all(|v| v.is_finite())
            && shadow_raw.iter().all(|v| v.is_finite())
            && normal_params.iter().flatten().all(|v| v.is_finite())
            && lighting_alpha.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidValue("non-finite state parameter".into()));
        }
        Ok(Self {
            dims,
            albedo_raw,
            shadow_raw,
            normal_params,
            lighting_alpha,
        })
    }

    /// State whose decoded maps match the given ones (up to the open-interval
    /// clamp of the squashing functions). Invalid normals become `(0, 0, 1)`.
    pub fn from_maps(
        albedo: &AlbedoMap,
        shadow: &ShadowMap,
        normals: &NormalMap,
        lighting_alpha: Vec<f64>,
    ) -> Result<Self> {
        let dims = albedo.dims();
        shadow.grid().ensure_dims(dims)?;
        normals.normals().ensure_dims(dims)?;
        let params = (0..dims.0 * dims.1)
            .map(|i| match normals.at(i) {
                Some(n) => params_from_normal(&n),
                None => Ok([0.0, 0.0]),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            dims,
            albedo.grid().data().iter().map(|p| p.map(albedo_to_raw)).collect(),
            shadow.grid().data().iter().map(|&s| shadow_to_raw(s)).collect(),
            params,
            lighting_alpha,
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn albedo(&self) -> AlbedoMap {
        let (w, h) = self.dims;
        AlbedoMap::new(Grid::new(w, h, self.albedo_raw.iter().map(|p| p.map(albedo_from_raw)).collect()).unwrap())
            .expect("squashed albedo is in range")
    }

    pub fn shadow(&self) -> ShadowMap {
        let (w, h) = self.dims;
        ShadowMap::new(Grid::new(w, h, self.shadow_raw.iter().map(|&r| shadow_from_raw(r)).collect()).unwrap())
            .expect("squashed shadow is in range")
    }

    pub fn normals(&self) -> NormalMap {
        let (w, h) = self.dims;
        NormalMap::new(
            Grid::new(w, h, self.normal_params.iter().map(|&[p, q]| normal_from_params(p, q)).collect()).unwrap(),
            Mask::full(w, h),
        )
        .expect("parametrised normals are unit and front-facing")
    }

    pub fn lighting(&self, prior: &PriorModel) -> ShLighting {
        ShLighting::new(prior.reconstruct_raw(&self.lighting_alpha)).expect("finite lighting")
    }
}

/// Gradient with respect to the raw parameters of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrad {
    pub albedo_raw: Vec<[f64; 3]>,
    pub shadow_raw: Vec<f64>,
    pub normal_params: Vec<[f64; 2]>,
    pub lighting_alpha: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Fixed inputs

/// Observed data of one view.
#[derive(Clone, Debug)]
pub struct ViewData {
    dims: (usize, usize),
    image: Vec<[f64; 3]>,
    mask: Vec<bool>,
    guide: Option<NormalMap>,
    camera: Option<Camera>,
    depth: Option<DepthMap>,
}

impl ViewData {
    /// `image` may be gamma-encoded (linearised here) or already linear.
    pub fn new(image: &ImageRgb, mask: &Mask) -> Result<Self> {
        mask.grid().ensure_dims(image.dims())?;
        if mask.count() == 0 {
            return Err(Error::EmptyMask("foreground"));
        }
        let image = match image.encoding() {
            Encoding::Linear => image.pixels().data().to_vec(),
            Encoding::SrgbGamma => image
                .pixels()
                .data()
                .iter()
                .map(|p| p.map(linearize_value))
                .collect(),
        };
        Ok(Self {
            dims: mask.dims(),
            image,
            mask: mask.grid().data().to_vec(),
            guide: None,
            camera: None,
            depth: None,
        })
    }

    pub fn with_guide(mut self, guide: NormalMap) -> Result<Self> {
        guide.normals().ensure_dims(self.dims)?;
        self.guide = Some(guide);
        Ok(self)
    }

    pub fn with_geometry(mut self, camera: Camera, depth: DepthMap) -> Result<Self> {
        depth.grid().ensure_dims(self.dims)?;
        self.camera = Some(camera);
        self.depth = Some(depth);
        Ok(self)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    /// Linear observation `i^γ`.
    pub fn image(&self) -> &[[f64; 3]] {
        &self.image
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn guide(&self) -> Option<&NormalMap> {
        self.guide.as_ref()
    }

    pub fn camera(&self) -> Option<&Camera> {
        self.camera.as_ref()
    }

    pub fn depth(&self) -> Option<&DepthMap> {
        self.depth.as_ref()
    }
}

/// Cross-projection from view `source` onto view `target`.
#[derive(Clone, Debug)]
pub struct Link {
    pub target: usize,
    pub source: usize,
    warp: Warp,
    src_valid: Vec<bool>,
    /// Target foreground that receives a valid source sample.
    valid: Vec<bool>,
    /// `proj(i_source^γ)` on the target grid.
    warped_image: Vec<[f64; 3]>,
    rotation: ShRotation,
}

impl Link {
    pub fn new(views: &[ViewData], target: usize, source: usize) -> Result<Self> {
        let (t, s) = (&views[target], &views[source]);
        let missing = || Error::InvalidValue("pair views need a camera and depth".into());
        let (cam_t, depth_t) = (t.camera.as_ref().ok_or_else(missing)?, t.depth.as_ref().ok_or_else(missing)?);
        let (cam_s, depth_s) = (s.camera.as_ref().ok_or_else(missing)?, s.depth.as_ref().ok_or_else(missing)?);
        let warp = Warp::new(depth_t, cam_t, cam_s, s.dims);
        let src_valid: Vec<bool> = s
            .mask
            .iter()
            .zip(depth_s.grid().data())
            .map(|(&m, d)| m && d.is_finite())
            .collect();
        let (warped_image, wv) = warp.apply(&s.image, &src_valid);
        let valid: Vec<bool> = wv.iter().zip(&t.mask).map(|(&a, &b)| a && b).collect();
        let rotation = sh_rotation(&(cam_t.rotation() * cam_s.rotation().transpose()))?;
        Ok(Self {
            target,
            source,
            warp,
            src_valid,
            valid,
            warped_image,
            rotation,
        })
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn warp(&self) -> &Warp {
        &self.warp
    }

    pub fn rotation(&self) -> &ShRotation {
        &self.rotation
    }
}

/// Everything the energy needs besides the free parameters.
#[derive(Debug)]
pub struct Problem {
    pub views: Vec<ViewData>,
    pub links: Vec<Link>,
    pub prior: PriorModel,
    pub features: FeatureSet,
    pub weights: LossWeights,
}

impl Problem {
    pub fn new(views: Vec<ViewData>, prior: PriorModel, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        if views.is_empty() {
            return Err(Error::InvalidValue("at least one view is required".into()));
        }
        Ok(Self {
            views,
            links: Vec::new(),
            prior,
            features: FeatureSet::standard(&weights),
            weights,
        })
    }

    pub fn with_features(mut self, features: FeatureSet) -> Self {
        self.features = features;
        self
    }

    /// Adds both directed links between views `i` and `j`.
    pub fn add_pair(&mut self, i: usize, j: usize) -> Result<()> {
        if i >= self.views.len() || j >= self.views.len() {
            return Err(Error::InvalidValue(format!("pair ({i}, {j}) out of range")));
        }
        for (t, s) in [(i, j), (j, i)] {
            let link = Link::new(&self.views, t, s)?;
            if !link.valid.iter().any(|&v| v) {
                return Err(Error::EmptyMask("pair overlap"));
            }
            self.links.push(link);
        }
        Ok(())
    }

    fn check_states(&self, states: &[EnergyState]) -> Result<()> {
        if states.len() != self.views.len() {
            return Err(Error::InvalidValue(format!(
                "{} states for {} views",
                states.len(),
                self.views.len()
            )));
        }
        for (s, v) in states.iter().zip(&self.views) {
            if s.dims != v.dims {
                return Err(Error::ShapeMismatch {
                    expected: v.dims,
                    got: s.dims,
                });
            }
            if s.lighting_alpha.len() != self.prior.dim() {
                return Err(Error::InvalidValue(format!(
                    "lighting has {} coefficients, prior has {}",
                    s.lighting_alpha.len(),
                    self.prior.dim()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Unweighted term values; `None` marks a term without supervision.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub appearance: f64,
    pub nm: Option<f64>,
    pub albedo: Option<f64>,
    pub cross_rend: Option<f64>,
    pub lighting: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("appearance", Some(self.appearance)),
            ("nm", self.nm),
            ("albedo", self.albedo),
            ("cross_rend", self.cross_rend),
            ("lighting", Some(self.lighting)),
            ("total", Some(self.total)),
        ]
        .into_iter()
        .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
        .map(|(n, _)| n)
    }
}

struct Decoded {
    albedo: Vec<[f64; 3]>,
    dalbedo: Vec<[f64; 3]>,
    shadow: Vec<f64>,
    dshadow: Vec<f64>,
    normals: Vec<Vector3<f64>>,
    dn_dp: Vec<Vector3<f64>>,
    dn_dq: Vec<Vector3<f64>>,
    lighting: [f64; 27],
}

impl Decoded {
    fn new(state: &EnergyState, prior: &PriorModel) -> Self {
        let mut normals = Vec::with_capacity(state.normal_params.len());
        let mut dn_dp = Vec::with_capacity(state.normal_params.len());
        let mut dn_dq = Vec::with_capacity(state.normal_params.len());
        for &[p, q] in &state.normal_params {
            let (n, dp, dq) = normal_from_params_jacobian(p, q);
            normals.push(n);
            dn_dp.push(dp);
            dn_dq.push(dq);
        }
        Self {
            albedo: state.albedo_raw.iter().map(|a| a.map(albedo_from_raw)).collect(),
            dalbedo: state.albedo_raw.iter().map(|a| a.map(albedo_from_raw_deriv)).collect(),
            shadow: state.shadow_raw.iter().map(|&r| shadow_from_raw(r)).collect(),
            dshadow: state.shadow_raw.iter().map(|&r| shadow_from_raw_deriv(r)).collect(),
            normals,
            dn_dp,
            dn_dq,
            lighting: prior.reconstruct_raw(&state.lighting_alpha),
        }
    }
}

/// Gradient accumulator in decoded space.
struct Acc {
    albedo: Vec<[f64; 3]>,
    shadow: Vec<f64>,
    normals: Vec<Vector3<f64>>,
    lighting: [f64; 27],
    alpha: Vec<f64>,
}

impl Acc {
    fn new(n: usize, d: usize) -> Self {
        Self {
            albedo: vec![[0.0; 3]; n],
            shadow: vec![0.0; n],
            normals: vec![Vector3::zeros(); n],
            lighting: [0.0; 27],
            alpha: vec![0.0; d],
        }
    }
}

/// `α ⊙ B(n) l` on `mask`, zero elsewhere.
fn local_render(albedo: &[[f64; 3]], normals: &[Vector3<f64>], l: &[f64; 27], mask: &[bool]) -> Vec<[f64; 3]> {
    (0..mask.len())
        .map(|p| {
            if !mask[p] {
                return [0.0; 3];
            }
            let b = basis(&normals[p]);
            std::array::from_fn(|c| albedo[p][c] * dot9(&b, &l[9 * c..9 * c + 9]))
        })
        .collect()
}

/// Pulls `∂/∂x` of [`local_render`] back to albedo, normals and lighting.
#[allow(clippy::too_many_arguments)]
fn local_render_backward(
    gx: &[[f64; 3]],
    albedo: &[[f64; 3]],
    normals: &[Vector3<f64>],
    l: &[f64; 27],
    mask: &[bool],
    acc_albedo: &mut [[f64; 3]],
    acc_normals: &mut [Vector3<f64>],
    acc_l: &mut [f64; 27],
) {
    for p in 0..mask.len() {
        if !mask[p] {
            continue;
        }
        let b = basis(&normals[p]);
        for c in 0..3 {
            let g = gx[p][c];
            if g == 0.0 {
                continue;
            }
            let lc = &l[9 * c..9 * c + 9];
            acc_albedo[p][c] += g * dot9(&b, lc);
            let ga = g * albedo[p][c];
            acc_normals[p] += basis_grad_dot(&normals[p], lc) * ga;
            for j in 0..9 {
                acc_l[9 * c + j] += ga * b[j];
            }
        }
    }
}

/// `min(1, i / s)` on `mask`.
fn shadow_free_values(image: &[[f64; 3]], shadow: &[f64], mask: &[bool]) -> Vec<[f64; 3]> {
    (0..mask.len())
        .map(|p| {
            if mask[p] {
                image[p].map(|v| (v / shadow[p]).min(1.0))
            } else {
                [0.0; 3]
            }
        })
        .collect()
}

/// `∂ min(1, i/s) / ∂s`, zero on the clamped branch.
fn shadow_free_backward(gy: &[[f64; 3]], image: &[[f64; 3]], shadow: &[f64], mask: &[bool], out: &mut [f64]) {
    for p in 0..mask.len() {
        if !mask[p] {
            continue;
        }
        let s = shadow[p];
        for c in 0..3 {
            if image[p][c] / s < 1.0 {
                out[p] -= gy[p][c] * image[p][c] / (s * s);
            }
        }
    }
}

fn scale_grads(e: &mut PerceptualEval, k: f64) {
    for v in e.grad_x.iter_mut().chain(e.grad_y.iter_mut()) {
        for c in v.iter_mut() {
            *c *= k;
        }
    }
}

fn appearance_term(
    problem: &Problem,
    v: usize,
    dec: &Decoded,
    acc: Option<(&mut Acc, f64)>,
) -> Result<f64> {
    let view = &problem.views[v];
    let x = local_render(&dec.albedo, &dec.normals, &dec.lighting, &view.mask);
    let y = shadow_free_values(&view.image, &dec.shadow, &view.mask);
    let want = acc.is_some();
    let mut e = perceptual_eval(&x, &y, view.dims, &view.mask, &problem.features, want)?;
    if let Some((acc, k)) = acc {
        scale_grads(&mut e, k);
        local_render_backward(
            &e.grad_x,
            &dec.albedo,
            &dec.normals,
            &dec.lighting,
            &view.mask,
            &mut acc.albedo,
            &mut acc.normals,
            &mut acc.lighting,
        );
        shadow_free_backward(&e.grad_y, &view.image, &dec.shadow, &view.mask, &mut acc.shadow);
    }
    Ok(e.value)
}

fn nm_term(
    guide: &NormalMap,
    mask: &[bool],
    normals: &[Vector3<f64>],
    acc: Option<(&mut Acc, f64)>,
) -> Result<f64> {
    let joint: Vec<usize> = (0..mask.len())
        .filter(|&p| mask[p] && guide.valid().at(p))
        .collect();
    if joint.is_empty() {
        return Err(Error::EmptyMask("normal supervision"));
    }
    let count = joint.len() as f64;
    let mut sum = 0.0;
    let mut acc = acc;
    for &p in &joint {
        let g = guide.normals().data()[p];
        let d = g.dot(&normals[p]);
        let dc = d.clamp(-1.0 + NM_DELTA, 1.0 - NM_DELTA);
        sum += dc.acos();
        if let Some((acc, k)) = acc.as_mut() {
            if dc == d {
                acc.normals[p] -= g * (*k / (count * (1.0 - d * d).sqrt()));
            }
        }
    }
    Ok(sum / count)
}

fn albedo_term(
    problem: &Problem,
    link: &Link,
    decs: &[Decoded],
    accs: Option<(&mut [Acc], f64)>,
) -> Result<f64> {
    let t = &problem.views[link.target];
    let (warped, _) = link.warp.apply(&decs[link.source].albedo, &link.src_valid);
    let x: Vec<[f64; 3]> = (0..link.valid.len())
        .map(|p| if link.valid[p] { decs[link.target].albedo[p] } else { [0.0; 3] })
        .collect();
    let y: Vec<[f64; 3]> = (0..link.valid.len())
        .map(|p| if link.valid[p] { warped[p] } else { [0.0; 3] })
        .collect();
    let want = accs.is_some();
    let mut e = perceptual_eval(&x, &y, t.dims, &link.valid, &problem.features, want)?;
    if let Some((accs, k)) = accs {
        scale_grads(&mut e, k);
        for p in 0..link.valid.len() {
            if link.valid[p] {
                for c in 0..3 {
                    accs[link.target].albedo[p][c] += e.grad_x[p][c];
                }
            }
        }
        let back = link.warp.adjoint(&e.grad_y, &link.valid);
        for (a, b) in accs[link.source].albedo.iter_mut().zip(back) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
    }
    Ok(e.value)
}

fn cross_term(
    problem: &Problem,
    link: &Link,
    decs: &[Decoded],
    accs: Option<(&mut [Acc], f64)>,
) -> Result<f64> {
    let t = &problem.views[link.target];
    let (dt, ds) = (&decs[link.target], &decs[link.source]);
    let src_l = ShLighting::new(ds.lighting).expect("finite lighting");
    let rotated = *link.rotation.apply(&src_l).coeffs();
    let x = local_render(&dt.albedo, &dt.normals, &rotated, &link.valid);
    let (warped_s, _) = link.warp.apply_scalar(&ds.shadow, &link.src_valid);
    let y = shadow_free_values(&link.warped_image, &warped_s, &link.valid);
    let want = accs.is_some();
    let mut e = perceptual_eval(&x, &y, t.dims, &link.valid, &problem.features, want)?;
    if let Some((accs, k)) = accs {
        scale_grads(&mut e, k);
        let mut acc_rot = [0.0; 27];
        {
            let at = &mut accs[link.target];
            local_render_backward(
                &e.grad_x,
                &dt.albedo,
                &dt.normals,
                &rotated,
                &link.valid,
                &mut at.albedo,
                &mut at.normals,
                &mut acc_rot,
            );
        }
        let back_l = link.rotation.apply_transpose(&acc_rot);
        let mut g_ws = vec![0.0; link.valid.len()];
        shadow_free_backward(&e.grad_y, &link.warped_image, &warped_s, &link.valid, &mut g_ws);
        let g_ws: Vec<[f64; 1]> = g_ws.into_iter().map(|v| [v]).collect();
        let back_s = link.warp.adjoint(&g_ws, &link.valid);
        let asrc = &mut accs[link.source];
        for (a, b) in asrc.lighting.iter_mut().zip(back_l) {
            *a += b;
        }
        for (a, b) in asrc.shadow.iter_mut().zip(back_s) {
            *a += b[0];
        }
    }
    Ok(e.value)
}

fn evaluate(
    problem: &Problem,
    states: &[EnergyState],
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<StateGrad>>)> {
    problem.check_states(states)?;
    let w = problem.weights;
    let decs: Vec<Decoded> = states.iter().map(|s| Decoded::new(s, &problem.prior)).collect();
    let d = problem.prior.dim();
    let mut accs: Vec<Acc> = if want_grad {
        states.iter().map(|s| Acc::new(s.albedo_raw.len(), d)).collect()
    } else {
        Vec::new()
    };
    let nv = problem.views.len() as f64;

    let mut appearance = 0.0;
    let mut lighting = 0.0;
    for v in 0..problem.views.len() {
        let acc = accs.get_mut(v).map(|a| (a, w.appearance / nv));
        appearance += appearance_term(problem, v, &decs[v], acc)? / nv;
        let alpha = &states[v].lighting_alpha;
        lighting += alpha.iter().map(|a| a * a).sum::<f64>() / nv;
        if let Some(acc) = accs.get_mut(v) {
            for (g, a) in acc.alpha.iter_mut().zip(alpha) {
                *g += 2.0 * a * w.lighting / nv;
            }
        }
    }

    let guided: Vec<usize> = (0..problem.views.len())
        .filter(|&v| problem.views[v].guide.is_some())
        .collect();
    let nm = if guided.is_empty() {
        None
    } else {
        let ng = guided.len() as f64;
        let mut sum = 0.0;
        for &v in &guided {
            let view = &problem.views[v];
            let acc = accs.get_mut(v).map(|a| (a, w.nm / ng));
            sum += nm_term(view.guide.as_ref().unwrap(), &view.mask, &decs[v].normals, acc)? / ng;
        }
        Some(sum)
    };

    let (albedo, cross_rend) = if problem.links.is_empty() {
        (None, None)
    } else {
        let nl = problem.links.len() as f64;
        let (mut a, mut c) = (0.0, 0.0);
        for link in &problem.links {
            let acc = want_grad.then(|| (accs.as_mut_slice(), w.albedo / nl));
            a += albedo_term(problem, link, &decs, acc)? / nl;
            let acc = want_grad.then(|| (accs.as_mut_slice(), w.cross_rend / nl));
            c += cross_term(problem, link, &decs, acc)? / nl;
        }
        (Some(a), Some(c))
    };

    let total = w.appearance * appearance
        + w.nm * nm.unwrap_or(0.0)
        + w.albedo * albedo.unwrap_or(0.0)
        + w.cross_rend * cross_rend.unwrap_or(0.0)
        + w.lighting * lighting;
    let breakdown = LossBreakdown {
        appearance,
        nm,
        albedo,
        cross_rend,
        lighting,
        total,
        weights: w,
    };
    if !want_grad {
        return Ok((breakdown, None));
    }
    let grads = accs
        .into_iter()
        .zip(&decs)
        .map(|(acc, dec)| {
            let mut alpha = problem.prior.pullback(&acc.lighting);
            for (g, a) in alpha.iter_mut().zip(&acc.alpha) {
                *g += a;
            }
            StateGrad {
                albedo_raw: acc
                    .albedo
                    .iter()
                    .zip(&dec.dalbedo)
                    .map(|(g, d)| std::array::from_fn(|c| g[c] * d[c]))
                    .collect(),
                shadow_raw: acc.shadow.iter().zip(&dec.dshadow).map(|(g, d)| g * d).collect(),
                normal_params: acc
                    .normals
                    .iter()
                    .enumerate()
                    .map(|(p, g)| [g.dot(&dec.dn_dp[p]), g.dot(&dec.dn_dq[p])])
                    .collect(),
                lighting_alpha: alpha,
            }
        })
        .collect();
    Ok((breakdown, Some(grads)))
}

/// Weighted total and per-term breakdown.
pub fn total_loss(problem: &Problem, states: &[EnergyState]) -> Result<LossBreakdown> {
    Ok(evaluate(problem, states, false)?.0)
}

/// As [`total_loss`], plus the gradient with respect to every raw parameter.
pub fn total_loss_and_grad(
    problem: &Problem,
    states: &[EnergyState],
) -> Result<(LossBreakdown, Vec<StateGrad>)> {
    let (b, g) = evaluate(problem, states, true)?;
    Ok((b, g.expect("gradient requested")))
}

/// Unweighted appearance term of view `v`.
pub fn appearance_loss(problem: &Problem, states: &[EnergyState], v: usize) -> Result<f64> {
    problem.check_states(states)?;
    appearance_term(problem, v, &Decoded::new(&states[v], &problem.prior), None)
}

/// Unweighted albedo-consistency term of one link.
pub fn albedo_consistency_loss(problem: &Problem, states: &[EnergyState], link: usize) -> Result<f64> {
    problem.check_states(states)?;
    let decs: Vec<Decoded> = states.iter().map(|s| Decoded::new(s, &problem.prior)).collect();
    albedo_term(problem, &problem.links[link], &decs, None)
}

/// Unweighted cross-rendering term of one link.
pub fn cross_render_loss(problem: &Problem, states: &[EnergyState], link: usize) -> Result<f64> {
    problem.check_states(states)?;
    let decs: Vec<Decoded> = states.iter().map(|s| Decoded::new(s, &problem.prior)).collect();
    cross_term(problem, &problem.links[link], &decs, None)
}

/// Mean clamped angle (radians) between `est` and `guide` over pixels valid in both.
pub fn normal_supervision_loss(est: &NormalMap, guide: &NormalMap) -> Result<f64> {
    guide.normals().ensure_dims(est.dims())?;
    let mask: Vec<bool> = est.valid().grid().data().to_vec();
    nm_term(guide, &mask, est.normals().data(), None)
}

/// `min(1, i^γ / s)` as a linear image.
pub fn shadow_free(img: &ImageRgb, shadow: &ShadowMap) -> Result<ImageRgb> {
    shadow.grid().ensure_dims(img.dims())?;
    let lin: Vec<[f64; 3]> = match img.encoding() {
        Encoding::Linear => img.pixels().data().to_vec(),
        Encoding::SrgbGamma => img.pixels().data().iter().map(|p| p.map(linearize_value)).collect(),
    };
    let (w, h) = img.dims();
    let sf = shadow_free_values(&lin, shadow.grid().data(), &vec![true; w * h]);
    ImageRgb::new(Grid::new(w, h, sf)?, Encoding::Linear)
}

/// `ε(x, y)` for two linear images.
pub fn perceptual_error(x: &ImageRgb, y: &ImageRgb, mask: &Mask, set: &FeatureSet) -> Result<f64> {
    if x.encoding() != Encoding::Linear || y.encoding() != Encoding::Linear {
        return Err(Error::WrongEncoding { expected: "linear" });
    }
    y.pixels().ensure_dims(x.dims())?;
    mask.grid().ensure_dims(x.dims())?;
    Ok(perceptual_eval(
        x.pixels().data(),
        y.pixels().data(),
        x.dims(),
        mask.grid().data(),
        set,
        false,
    )?
    .value)
}

/// `Σ ‖i^γ - α ⊙ s B(n) l‖²` over the foreground: the quantity the
/// closed-form lighting solve minimises.
pub fn rgb_residual(view: &ViewData, state: &EnergyState, lighting: &ShLighting) -> f64 {
    let l = lighting.coeffs();
    let mut sum = 0.0;
    for p in 0..view.mask.len() {
        if !view.mask[p] {
            continue;
        }
        let [pp, qq] = state.normal_params[p];
        let b = basis(&normal_from_params(pp, qq));
        let s = shadow_from_raw(state.shadow_raw[p]);
        for c in 0..3 {
            let model = albedo_from_raw(state.albedo_raw[p][c]) * s * dot9(&b, &l[9 * c..9 * c + 9]);
            let r = view.image[p][c] - model;
            sum += r * r;
        }
    }
    sum
}

#[cfg(test)]
mod tests;
