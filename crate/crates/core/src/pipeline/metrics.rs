//! Scale-invariant error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::angle_between;
use crate::maps::{AlbedoMap, Mask, NormalMap, ShLighting};
use crate::sh::render_hemisphere;

pub const HEMISPHERE_RES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    Global,
    PerColour,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub albedo_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub albedo_lmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normal_mean_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normal_median_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lighting_mse_global: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lighting_mse_per_colour: Option<f64>,
}

/// Masked MSE after the per-channel least-squares scale of `pred` onto `reference`.
/// `None` when the selection is empty.
fn scaled_mse(pred: &[[f64; 3]], reference: &[[f64; 3]], idx: &[usize]) -> Option<f64> {
    if idx.is_empty() {
        return None;
    }
    let mut err = 0.0;
    for c in 0..3 {
        let (mut pr, mut pp) = (0.0, 0.0);
        for &i in idx {
            pr += pred[i][c] * reference[i][c];
            pp += pred[i][c] * pred[i][c];
        }
        let k = if pp > 0.0 { pr / pp } else { 0.0 };
        for &i in idx {
            let d = k * pred[i][c] - reference[i][c];
            err += d * d;
        }
    }
    Some(err / (3 * idx.len()) as f64)
}

/// `(mse, lmse)` with per-channel optimal scaling. LMSE uses square windows
/// of side `⌈0.1·max(H, W)⌉` at half-window stride, each scaled on its own,
/// averaged over windows that are at least a quarter valid.
pub fn albedo_error(pred: &AlbedoMap, reference: &AlbedoMap, mask: &Mask) -> Result<(f64, f64)> {
    let (w, h) = pred.dims();
    reference.grid().ensure_dims((w, h))?;
    mask.grid().ensure_dims((w, h))?;
    let p = pred.grid().data();
    let r = reference.grid().data();
    let all: Vec<usize> = (0..w * h).filter(|&i| mask.at(i)).collect();
    let mse = scaled_mse(p, r, &all).ok_or(Error::EmptyMask("albedo error"))?;

    let k = (0.1 * w.max(h) as f64).ceil().max(1.0) as usize;
    let stride = (k / 2).max(1);
    let starts = |n: usize| -> Vec<usize> {
        if n <= k {
            return vec![0];
        }
        let mut s: Vec<usize> = (0..=n - k).step_by(stride).collect();
        if *s.last().unwrap() != n - k {
            s.push(n - k);
        }
        s
    };
    let (mut sum, mut count) = (0.0, 0);
    for &y0 in &starts(h) {
        for &x0 in &starts(w) {
            let idx: Vec<usize> = (y0..(y0 + k).min(h))
                .flat_map(|y| (x0..(x0 + k).min(w)).map(move |x| y * w + x))
                .filter(|&i| mask.at(i))
                .collect();
            if 4 * idx.len() >= k.min(w) * k.min(h) {
                if let Some(e) = scaled_mse(p, r, &idx) {
                    sum += e;
                    count += 1;
                }
            }
        }
    }
    let lmse = if count == 0 { mse } else { sum / count as f64 };
    Ok((mse, lmse))
}

/// Mean and median angular error in degrees over jointly valid pixels.
pub fn normal_error(pred: &NormalMap, reference: &NormalMap) -> Result<(f64, f64)> {
    reference.normals().ensure_dims(pred.dims())?;
    let mut e: Vec<f64> = (0..pred.normals().len())
        .filter_map(|i| Some(angle_between(&pred.at(i)?, &reference.at(i)?).to_degrees()))
        .collect();
    if e.is_empty() {
        return Err(Error::EmptyMask("normal error"));
    }
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    e.sort_by(f64::total_cmp);
    let m = e.len() / 2;
    let median = if e.len() % 2 == 1 { e[m] } else { 0.5 * (e[m - 1] + e[m]) };
    Ok((mean, median))
}

/// MSE between hemisphere renders of `pred` and `reference` after optimal
/// scaling of `pred`.
pub fn lighting_error(pred: &ShLighting, reference: &ShLighting, mode: ScaleMode) -> Result<f64> {
    let (pi, mask) = render_hemisphere(pred, HEMISPHERE_RES)?;
    let (ri, _) = render_hemisphere(reference, HEMISPHERE_RES)?;
    let idx: Vec<usize> = (0..mask.grid().len()).filter(|&i| mask.at(i)).collect();
    let p = pi.pixels().data();
    let r = ri.pixels().data();
    let energy: f64 = idx.iter().map(|&i| p[i].iter().map(|v| v * v).sum::<f64>()).sum();
    if energy <= 0.0 {
        return Err(Error::InvalidValue("predicted lighting has zero energy".into()));
    }
    Ok(match mode {
        ScaleMode::PerColour => scaled_mse(p, r, &idx).expect("disc is non-empty"),
        ScaleMode::Global => {
            let (mut pr, mut pp) = (0.0, 0.0);
            for &i in &idx {
                for c in 0..3 {
                    pr += p[i][c] * r[i][c];
                    pp += p[i][c] * p[i][c];
                }
            }
            let k = pr / pp;
            let err: f64 = idx
                .iter()
                .map(|&i| (0..3).map(|c| (k * p[i][c] - r[i][c]).powi(2)).sum::<f64>())
                .sum();
            err / (3 * idx.len()) as f64
        }
    })
}

/// Plain masked MSE between two linear images.
pub fn image_mse(a: &[[f64; 3]], b: &[[f64; 3]], mask: &Mask) -> Result<f64> {
    let idx: Vec<usize> = (0..a.len()).filter(|&i| mask.at(i)).collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask("reconstruction error"));
    }
    let s: f64 = idx
        .iter()
        .map(|&i| (0..3).map(|c| (a[i][c] - b[i][c]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / (3 * idx.len()) as f64)
}
