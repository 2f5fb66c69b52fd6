//! Choosing overlapping view pairs for joint solves.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::color::linearize_value;
use crate::geometry::{backproject, Warp};
use crate::maps::{Camera, DepthMap, Encoding, ImageRgb, Mask};

pub const HIST_BINS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairThresholds {
    /// Camera distance limit as a multiple of the median nearest-neighbour spacing.
    pub camera_factor: f64,
    /// Centroid distance limit as a fraction of the scene bounding-box diagonal.
    pub centroid_fraction: f64,
    /// Pairs whose intensity histograms correlate above this are dropped.
    pub r_max: f64,
}

impl Default for PairThresholds {
    fn default() -> Self {
        Self {
            camera_factor: 2.0,
            centroid_fraction: 0.25,
            r_max: 0.9,
        }
    }
}

/// What pair selection needs from one view.
#[derive(Clone, Copy, Debug)]
pub struct PairView<'a> {
    pub image: &'a ImageRgb,
    pub mask: &'a Mask,
    pub depth: &'a DepthMap,
    pub camera: &'a Camera,
}

fn gray(img: &ImageRgb, i: usize) -> f64 {
    let p = img.pixels().data()[i];
    let lin = |v: f64| match img.encoding() {
        Encoding::SrgbGamma => linearize_value(v),
        Encoding::Linear => v,
    };
    (lin(p[0]) + lin(p[1]) + lin(p[2])) / 3.0
}

fn histogram(values: impl Iterator<Item = f64>) -> [f64; HIST_BINS] {
    let mut h = [0.0; HIST_BINS];
    for v in values {
        let b = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        h[b] += 1.0;
    }
    h
}

/// Pearson correlation; `None` if either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Correlation of 64-bin grey histograms of view `i` and view `j`
/// resampled into `i`, over pixels valid in both. `None` without overlap.
pub fn histogram_correlation(vi: &PairView, vj: &PairView) -> Option<f64> {
    let warp = Warp::new(vi.depth, vi.camera, vj.camera, vj.image.dims());
    let src_gray: Vec<[f64; 1]> = (0..vj.mask.grid().len()).map(|k| [gray(vj.image, k)]).collect();
    let src_valid: Vec<bool> = (0..src_gray.len())
        .map(|k| vj.mask.at(k) && vj.depth.grid().data()[k].is_finite())
        .collect();
    let (warped, valid) = warp.apply(&src_gray, &src_valid);
    let joint: Vec<usize> = (0..valid.len()).filter(|&k| valid[k] && vi.mask.at(k)).collect();
    if joint.is_empty() {
        return None;
    }
    let hi = histogram(joint.iter().map(|&k| gray(vi.image, k)));
    let hj = histogram(joint.iter().map(|&k| warped[k][0]));
    // identical single-bin histograms are a duplicate
    Some(pearson(&hi, &hj).unwrap_or(if hi == hj { 1.0 } else { 0.0 }))
}

fn depth_centroid(v: &PairView) -> Option<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
    let (w, _) = v.depth.dims();
    let mut sum = Vector3::zeros();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut n = 0;
    for (k, &d) in v.depth.grid().data().iter().enumerate() {
        if d.is_finite() && v.mask.at(k) {
            let p = backproject(v.camera, (k % w) as f64, (k / w) as f64, d);
            sum += p;
            lo = lo.inf(&p);
            hi = hi.sup(&p);
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64, lo, hi))
}

/// Symmetric list of ordered pairs `(i, j)` passing the camera-distance,
/// centroid and histogram tests.
pub fn select_pairs(views: &[PairView], t: &PairThresholds) -> Vec<(usize, usize)> {
    let n = views.len();
    if n < 2 {
        return Vec::new();
    }
    let centres: Vec<Vector3<f64>> = views.iter().map(|v| v.camera.center()).collect();
    let mut nn: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (centres[i] - centres[j]).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let spacing = if n % 2 == 1 { nn[n / 2] } else { 0.5 * (nn[n / 2 - 1] + nn[n / 2]) };

    let stats: Vec<_> = views.iter().map(depth_centroid).collect();
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for (_, l, h) in stats.iter().flatten() {
        lo = lo.inf(l);
        hi = hi.sup(h);
    }
    let diameter = (hi - lo).norm();

    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if (centres[i] - centres[j]).norm() > t.camera_factor * spacing {
                continue;
            }
            let (Some(ci), Some(cj)) = (&stats[i], &stats[j]) else {
                continue;
            };
            if (ci.0 - cj.0).norm() > t.centroid_fraction * diameter {
                continue;
            }
            let keep = [(i, j), (j, i)].iter().all(|&(a, b)| {
                histogram_correlation(&views[a], &views[b]).is_some_and(|r| r <= t.r_max)
            });
            if keep {
                out.push((i, j));
                out.push((j, i));
            }
        }
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Grid;
    use crate::testutil::plane_pair;
    use nalgebra::Vector3;

    fn textured(cam: &Camera, depth: &DepthMap, gain: f64) -> ImageRgb {
        let (w, h) = depth.dims();
        ImageRgb::new(
            Grid::from_fn(w, h, |x, y| {
                let p = backproject(cam, x as f64, y as f64, depth.at(x, y).unwrap());
                let v = 0.5 + 0.4 * (1.3 * p.x).sin() * (0.9 * p.y).cos();
                [(gain * v).powf(1.0 / 2.2); 3]
            }),
            Encoding::SrgbGamma,
        )
        .unwrap()
    }

    #[test]
    fn duplicates_are_dropped_relit_pairs_kept() {
        let [(ca, da), (cb, db)] = plane_pair(48, 48, 48.0, 10.0, 0.1);
        let m = Mask::full(48, 48);
        let ia = textured(&ca, &da, 1.0);
        let ib = textured(&cb, &db, 1.0);
        let dark = textured(&cb, &db, 0.4);
        let a = PairView { image: &ia, mask: &m, depth: &da, camera: &ca };
        let dup = PairView { image: &ib, mask: &m, depth: &db, camera: &cb };
        let relit = PairView { image: &dark, mask: &m, depth: &db, camera: &cb };
        let t = PairThresholds::default();

        let same = PairView { image: &ia, mask: &m, depth: &da, camera: &ca };
        assert_eq!(histogram_correlation(&a, &same), Some(1.0));
        assert!(select_pairs(&[a, same], &t).is_empty());

        let r = histogram_correlation(&a, &relit).unwrap();
        assert!(r < t.r_max, "{r}");
        let r_dup = histogram_correlation(&a, &dup).unwrap();
        assert!(r_dup > t.r_max, "{r_dup}");
        assert_eq!(select_pairs(&[a, relit], &t), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn far_cameras_are_gated() {
        let [(ca, da), (cb, db)] = plane_pair(32, 32, 32.0, 10.0, 0.1);
        let m = Mask::full(32, 32);
        let ia = textured(&ca, &da, 1.0);
        let ib = textured(&cb, &db, 0.4);
        // a third camera far away, still looking at a plane
        let far = Camera::new(32.0, 15.5, 15.5, *ca.rotation(), Vector3::new(-500.0, 0.0, 0.0)).unwrap();
        let v = [
            PairView { image: &ia, mask: &m, depth: &da, camera: &ca },
            PairView { image: &ib, mask: &m, depth: &db, camera: &cb },
            PairView { image: &ia, mask: &m, depth: &da, camera: &far },
        ];
        let pairs = select_pairs(&v, &PairThresholds::default());
        assert!(pairs.iter().all(|&(i, j)| i != 2 && j != 2));
        for &(i, j) in &pairs {
            assert!(pairs.contains(&(j, i)));
        }
    }
}
