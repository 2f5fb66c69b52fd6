//! Feature spaces for the perceptual error.
//!
//! A transform maps a linear RGB image and a pixel mask to a flat feature
//! vector with per-element validity. Validity depends only on the mask, so
//! two images compared under one mask always share the same element set.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::color::{lab_pixel, lab_pixel_jacobian};
use crate::error::{Error, Result};
use crate::maps::LossWeights;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Features {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

pub trait FeatureTransform: Debug + Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, img: &[[f64; 3]], dims: (usize, usize), mask: &[bool]) -> Features;

    /// `Jᵀ g` evaluated at `img`; `grad` is indexed like the feature vector
    /// and is ignored on invalid elements.
    fn vjp(
        &self,
        img: &[[f64; 3]],
        dims: (usize, usize),
        mask: &[bool],
        grad: &[f64],
    ) -> Vec<[f64; 3]>;
}

/// Scaled CIE LAB per pixel.
#[derive(Clone, Copy, Debug, Default)]
pub struct Lab;

impl FeatureTransform for Lab {
    fn name(&self) -> &str {
        "lab"
    }

    fn forward(&self, img: &[[f64; 3]], _dims: (usize, usize), mask: &[bool]) -> Features {
        let mut values = Vec::with_capacity(3 * img.len());
        let mut valid = Vec::with_capacity(3 * img.len());
        for (p, &m) in img.iter().zip(mask) {
            let lab = if m { lab_pixel(p) } else { [0.0; 3] };
            values.extend_from_slice(&lab);
            valid.extend_from_slice(&[m; 3]);
        }
        Features { values, valid }
    }

    fn vjp(
        &self,
        img: &[[f64; 3]],
        _dims: (usize, usize),
        mask: &[bool],
        grad: &[f64],
    ) -> Vec<[f64; 3]> {
        img.iter()
            .zip(mask)
            .enumerate()
            .map(|(i, (p, &m))| {
                if !m {
                    return [0.0; 3];
                }
                let j = lab_pixel_jacobian(p);
                let g = &grad[3 * i..3 * i + 3];
                std::array::from_fn(|k| j[0][k] * g[0] + j[1][k] * g[1] + j[2][k] * g[2])
            })
            .collect()
    }
}

const BLUR: [f64; 4] = [1.0 / 8.0, 3.0 / 8.0, 3.0 / 8.0, 1.0 / 8.0];

struct Level {
    w: usize,
    h: usize,
    valid: Vec<bool>,
}

/// Separable `[1 3 3 1]/8` blur with stride 2. An output pixel is valid only
/// if all sixteen taps are inside the image and valid.
fn downsample_mask(level: &Level) -> Level {
    let (w, h) = (level.w / 2, level.h / 2);
    let valid = (0..w * h)
        .map(|k| {
            let (u, v) = (k % w, k / w);
            taps(u, level.w).is_some_and(|xs| {
                taps(v, level.h).is_some_and(|ys| {
                    ys.iter()
                        .all(|&y| xs.iter().all(|&x| level.valid[y * level.w + x]))
                })
            })
        })
        .collect();
    Level { w, h, valid }
}

fn taps(u: usize, n: usize) -> Option<[usize; 4]> {
    let start = (2 * u).checked_sub(1)?;
    (start + 3 < n).then(|| [start, start + 1, start + 2, start + 3])
}

fn downsample(values: &[[f64; 3]], from: &Level, to: &Level) -> Vec<[f64; 3]> {
    (0..to.w * to.h)
        .map(|k| {
            let mut acc = [0.0; 3];
            if !to.valid[k] {
                return acc;
            }
            let (xs, ys) = (taps(k % to.w, from.w).unwrap(), taps(k / to.w, from.h).unwrap());
            for (a, &y) in ys.iter().enumerate() {
                for (b, &x) in xs.iter().enumerate() {
                    let wgt = BLUR[a] * BLUR[b];
                    let p = values[y * from.w + x];
                    for c in 0..3 {
                        acc[c] += wgt * p[c];
                    }
                }
            }
            acc
        })
        .collect()
}

fn downsample_adjoint(grad: &[[f64; 3]], from: &Level, to: &Level, out: &mut [[f64; 3]]) {
    for k in 0..to.w * to.h {
        if !to.valid[k] {
            continue;
        }
        let (xs, ys) = (taps(k % to.w, from.w).unwrap(), taps(k / to.w, from.h).unwrap());
        for (a, &y) in ys.iter().enumerate() {
            for (b, &x) in xs.iter().enumerate() {
                let wgt = BLUR[a] * BLUR[b];
                for c in 0..3 {
                    out[y * from.w + x][c] += wgt * grad[k][c];
                }
            }
        }
    }
}

/// Forward differences along x and y at every level of a blur pyramid.
///
/// A linear stand-in for early convolutional features: it compares local
/// contrast at three scales.
#[derive(Clone, Copy, Debug)]
pub struct PyramidGrad {
    pub levels: usize,
}

impl Default for PyramidGrad {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

impl PyramidGrad {
    fn masks(&self, dims: (usize, usize), mask: &[bool]) -> Vec<Level> {
        let mut out = vec![Level {
            w: dims.0,
            h: dims.1,
            valid: mask.to_vec(),
        }];
        for _ in 1..self.levels {
            let next = downsample_mask(out.last().unwrap());
            out.push(next);
        }
        out
    }
}

/// Appends the x then y differences of one level.
fn push_gradients(values: &[[f64; 3]], level: &Level, out: &mut Features) {
    let (w, h) = (level.w, level.h);
    for (dx, dy) in [(1, 0), (0, 1)] {
        for y in 0..h.saturating_sub(dy) {
            for x in 0..w.saturating_sub(dx) {
                let (i, j) = (y * w + x, (y + dy) * w + x + dx);
                let ok = level.valid[i] && level.valid[j];
                for c in 0..3 {
                    out.values.push(if ok { values[j][c] - values[i][c] } else { 0.0 });
                    out.valid.push(ok);
                }
            }
        }
    }
}

impl FeatureTransform for PyramidGrad {
    fn name(&self) -> &str {
        "pyramid-grad"
    }

    fn forward(&self, img: &[[f64; 3]], dims: (usize, usize), mask: &[bool]) -> Features {
        let levels = self.masks(dims, mask);
        let mut values: Vec<[f64; 3]> = img
            .iter()
            .zip(mask)
            .map(|(p, &m)| if m { *p } else { [0.0; 3] })
            .collect();
        let mut out = Features::default();
        for l in 0..levels.len() {
            push_gradients(&values, &levels[l], &mut out);
            if l + 1 < levels.len() {
                values = downsample(&values, &levels[l], &levels[l + 1]);
            }
        }
        out
    }

    fn vjp(
        &self,
        _img: &[[f64; 3]],
        dims: (usize, usize),
        mask: &[bool],
        grad: &[f64],
    ) -> Vec<[f64; 3]> {
        let levels = self.masks(dims, mask);
        // gradient with respect to each level's values
        let mut per_level: Vec<Vec<[f64; 3]>> = Vec::with_capacity(levels.len());
        let mut cursor = 0;
        for level in &levels {
            let (w, h) = (level.w, level.h);
            let mut g = vec![[0.0; 3]; w * h];
            for (dx, dy) in [(1, 0), (0, 1)] {
                for y in 0..h.saturating_sub(dy) {
                    for x in 0..w.saturating_sub(dx) {
                        let (i, j) = (y * w + x, (y + dy) * w + x + dx);
                        if level.valid[i] && level.valid[j] {
                            for c in 0..3 {
                                let v = grad[cursor + c];
                                g[j][c] += v;
                                g[i][c] -= v;
                            }
                        }
                        cursor += 3;
                    }
                }
            }
            per_level.push(g);
        }
        for l in (1..levels.len()).rev() {
            let coarse = std::mem::take(&mut per_level[l]);
            downsample_adjoint(&coarse, &levels[l - 1], &levels[l], &mut per_level[l - 1]);
        }
        let mut g0 = per_level.swap_remove(0);
        for (g, &m) in g0.iter_mut().zip(mask) {
            if !m {
                *g = [0.0; 3];
            }
        }
        g0
    }
}

/// A bank of `k×k` convolutions over RGB followed by ReLU, loaded from JSON.
/// Lets externally trained filters (for instance the first layer of a
/// pretrained network) drive the perceptual term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBank {
    pub name: String,
    pub size: usize,
    /// `[out][in = 3][size][size]`, flattened.
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvBank {
    pub fn from_json(s: &str) -> Result<Self> {
        let bank: ConvBank = serde_json::from_str(s)?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let out = self.bias.len();
        if self.size.is_multiple_of(2) || out == 0 || self.kernels.len() != out * 3 * self.size * self.size {
            return Err(Error::Format(format!(
                "conv bank needs an odd size and {} kernel weights for {out} outputs",
                out * 3 * self.size * self.size
            )));
        }
        if self.kernels.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite conv weight".into()));
        }
        Ok(())
    }

    fn outputs(&self) -> usize {
        self.bias.len()
    }

    fn window_valid(&self, x: usize, y: usize, dims: (usize, usize), mask: &[bool]) -> bool {
        let r = self.size / 2;
        if x < r || y < r || x + r >= dims.0 || y + r >= dims.1 {
            return false;
        }
        (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| mask[yy * dims.0 + xx]))
    }

    fn pre_activation(&self, img: &[[f64; 3]], dims: (usize, usize), x: usize, y: usize, o: usize) -> f64 {
        let (k, r) = (self.size, self.size / 2);
        let mut acc = self.bias[o];
        for c in 0..3 {
            for ky in 0..k {
                for kx in 0..k {
                    let w = self.kernels[((o * 3 + c) * k + ky) * k + kx];
                    acc += w * img[(y + ky - r) * dims.0 + x + kx - r][c];
                }
            }
        }
        acc
    }
}

impl FeatureTransform for ConvBank {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, img: &[[f64; 3]], dims: (usize, usize), mask: &[bool]) -> Features {
        let mut out = Features::default();
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let ok = self.window_valid(x, y, dims, mask);
                for o in 0..self.outputs() {
                    let v = if ok { self.pre_activation(img, dims, x, y, o).max(0.0) } else { 0.0 };
                    out.values.push(v);
                    out.valid.push(ok);
                }
            }
        }
        out
    }

    fn vjp(
        &self,
        img: &[[f64; 3]],
        dims: (usize, usize),
        mask: &[bool],
        grad: &[f64],
    ) -> Vec<[f64; 3]> {
        let (k, r) = (self.size, self.size / 2);
        let mut g = vec![[0.0; 3]; img.len()];
        let mut cursor = 0;
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let ok = self.window_valid(x, y, dims, mask);
                for o in 0..self.outputs() {
                    let go = grad[cursor];
                    cursor += 1;
                    if !ok || go == 0.0 || self.pre_activation(img, dims, x, y, o) <= 0.0 {
                        continue;
                    }
                    for c in 0..3 {
                        for ky in 0..k {
                            for kx in 0..k {
                                let w = self.kernels[((o * 3 + c) * k + ky) * k + kx];
                                g[(y + ky - r) * dims.0 + x + kx - r][c] += w * go;
                            }
                        }
                    }
                }
            }
        }
        g
    }
}

/// Weighted collection of transforms.
#[derive(Debug)]
pub struct FeatureSet {
    pub transforms: Vec<(Box<dyn FeatureTransform>, f64)>,
}

impl FeatureSet {
    /// LAB with the `lab` weight plus the gradient pyramid with the `vgg` weight.
    pub fn standard(weights: &LossWeights) -> Self {
        Self {
            transforms: vec![
                (Box::new(Lab), weights.lab),
                (Box::new(PyramidGrad::default()), weights.vgg),
            ],
        }
    }

    /// LAB plus an external filter bank in the `vgg` slot.
    pub fn with_bank(weights: &LossWeights, bank: ConvBank) -> Self {
        Self {
            transforms: vec![(Box::new(Lab), weights.lab), (Box::new(bank), weights.vgg)],
        }
    }

    pub fn lab_only(weight: f64) -> Self {
        Self {
            transforms: vec![(Box::new(Lab), weight)],
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.transforms.iter().map(|(t, _)| t.name().to_string()).collect()
    }
}

/// `ε(x, y)` and its gradients with respect to both images.
#[derive(Clone, Debug)]
pub struct PerceptualEval {
    pub value: f64,
    pub grad_x: Vec<[f64; 3]>,
    pub grad_y: Vec<[f64; 3]>,
}

/// `Σ_t w_t · sqrt(mean over valid elements of (t(x) - t(y))²)`.
pub fn perceptual_eval(
    x: &[[f64; 3]],
    y: &[[f64; 3]],
    dims: (usize, usize),
    mask: &[bool],
    set: &FeatureSet,
    want_grad: bool,
) -> Result<PerceptualEval> {
    if x.len() != dims.0 * dims.1 || y.len() != x.len() || mask.len() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: dims,
            got: (x.len(), 1),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask("perceptual error"));
    }
    let mut out = PerceptualEval {
        value: 0.0,
        grad_x: Vec::new(),
        grad_y: Vec::new(),
    };
    if want_grad {
        out.grad_x = vec![[0.0; 3]; x.len()];
        out.grad_y = vec![[0.0; 3]; x.len()];
    }
    for (t, w) in &set.transforms {
        if *w == 0.0 {
            continue;
        }
        let fx = t.forward(x, dims, mask);
        let fy = t.forward(y, dims, mask);
        let mut sum = 0.0;
        let mut count = 0usize;
        for k in 0..fx.values.len() {
            if fx.valid[k] {
                let d = fx.values[k] - fy.values[k];
                sum += d * d;
                count += 1;
            }
        }
        if count == 0 {
            continue;
        }
        let rms = (sum / count as f64).sqrt();
        out.value += w * rms;
        if want_grad && rms > 0.0 {
            let scale = w / (count as f64 * rms);
            let g: Vec<f64> = (0..fx.values.len())
                .map(|k| {
                    if fx.valid[k] {
                        scale * (fx.values[k] - fy.values[k])
                    } else {
                        0.0
                    }
                })
                .collect();
            for (acc, v) in out.grad_x.iter_mut().zip(t.vjp(x, dims, mask, &g)) {
                for c in 0..3 {
                    acc[c] += v[c];
                }
            }
            for (acc, v) in out.grad_y.iter_mut().zip(t.vjp(y, dims, mask, &g)) {
                for c in 0..3 {
                    acc[c] -= v[c];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.random_range(0.05..0.9), rng.random_range(0.05..0.9), rng.random_range(0.05..0.9)])
            .collect()
    }

    fn check_vjp(t: &dyn FeatureTransform, dims: (usize, usize), mask: &[bool], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1;
        let img = random_image(&mut rng, n);
        let f = t.forward(&img, dims, mask);
        let g: Vec<f64> = f.valid.iter().map(|&v| if v { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
        let back = t.vjp(&img, dims, mask, &g);
        let h = 1e-6;
        for _ in 0..20 {
            let p = rng.random_range(0..n);
            let c = rng.random_range(0..3);
            let mut a = img.clone();
            let mut b = img.clone();
            a[p][c] += h;
            b[p][c] -= h;
            let (fa, fb) = (t.forward(&a, dims, mask), t.forward(&b, dims, mask));
            let fd: f64 = (0..g.len()).map(|k| g[k] * (fa.values[k] - fb.values[k])).sum::<f64>() / (2.0 * h);
            assert!((fd - back[p][c]).abs() < 1e-6 * (1.0 + fd.abs()), "{} {fd} {}", t.name(), back[p][c]);
        }
    }

    fn holey_mask(dims: (usize, usize)) -> Vec<bool> {
        (0..dims.0 * dims.1).map(|i| i % 7 != 3 && i / dims.0 != 2).collect()
    }

    #[test]
    fn transforms_adjoints_match_finite_differences() {
        let dims = (16, 12);
        let mask = holey_mask(dims);
        check_vjp(&Lab, dims, &mask, 1);
        check_vjp(&PyramidGrad::default(), dims, &mask, 2);
        check_vjp(&PyramidGrad::default(), dims, &[true; 192], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = ConvBank {
            name: "bank".into(),
            size: 3,
            kernels: (0..2 * 27).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: vec![0.1, -0.05],
        };
        bank.validate().unwrap();
        check_vjp(&bank, dims, &[true; 192], 5);
    }

    #[test]
    fn pyramid_level_sizes_and_strict_masking() {
        let dims = (16, 16);
        let t = PyramidGrad::default();
        let levels = t.masks(dims, &vec![true; 256]);
        assert_eq!(levels.iter().map(|l| (l.w, l.h)).collect::<Vec<_>>(), vec![(16, 16), (8, 8), (4, 4)]);
        // border outputs need a tap outside the image
        assert!(!levels[1].valid[0]);
        assert!(levels[1].valid[8 + 1]);
        let mut mask = vec![true; 256];
        mask[5 * 16 + 5] = false;
        let holey = t.masks(dims, &mask);
        assert!(!holey[1].valid[2 * 8 + 2]);
    }

    #[test]
    fn perceptual_error_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = (8, 8);
        let x = random_image(&mut rng, 64);
        let y = random_image(&mut rng, 64);
        let mask = vec![true; 64];
        let set = FeatureSet::standard(&LossWeights::default());
        let same = perceptual_eval(&x, &x, dims, &mask, &set, false).unwrap();
        assert_eq!(same.value, 0.0);
        let a = perceptual_eval(&x, &y, dims, &mask, &set, false).unwrap().value;
        let b = perceptual_eval(&y, &x, dims, &mask, &set, false).unwrap().value;
        assert!(a > 0.0 && a == b);
        assert!(matches!(
            perceptual_eval(&x, &y, dims, &[false; 64], &set, false),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn lab_only_rms_by_hand() {
        // 2x2 constant images: black vs linear mid grey 0.2
        let x = vec![[0.0; 3]; 4];
        let y = vec![[0.2; 3]; 4];
        let lab = lab_pixel(&[0.2; 3]);
        let want = ((lab[0] * lab[0] + lab[1] * lab[1] + lab[2] * lab[2]) / 3.0).sqrt();
        let got = perceptual_eval(&x, &y, (2, 2), &[true; 4], &FeatureSet::lab_only(1.0), false)
            .unwrap()
            .value;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = (10, 9);
        let n = 90;
        let x = random_image(&mut rng, n);
        let y = random_image(&mut rng, n);
        let mask = holey_mask(dims);
        let set = FeatureSet::standard(&LossWeights::default());
        let e = perceptual_eval(&x, &y, dims, &mask, &set, true).unwrap();
        let h = 1e-6;
        for _ in 0..10 {
            let p = rng.random_range(0..n);
            let c = rng.random_range(0..3);
            let f = |xx: &[[f64; 3]], yy: &[[f64; 3]]| perceptual_eval(xx, yy, dims, &mask, &set, false).unwrap().value;
            let (mut a, mut b) = (x.clone(), x.clone());
            a[p][c] += h;
            b[p][c] -= h;
            let fdx = (f(&a, &y) - f(&b, &y)) / (2.0 * h);
            let (mut a, mut b) = (y.clone(), y.clone());
            a[p][c] += h;
            b[p][c] -= h;
            let fdy = (f(&x, &a) - f(&x, &b)) / (2.0 * h);
            assert!((fdx - e.grad_x[p][c]).abs() < 1e-6 * (1.0 + fdx.abs()));
            assert!((fdy - e.grad_y[p][c]).abs() < 1e-6 * (1.0 + fdy.abs()));
        }
    }
}
