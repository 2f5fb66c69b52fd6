//! Resize-and-crop to fixed-size square views.

use crate::error::{Error, Result};
use crate::maps::{Camera, DepthMap, Grid, ImageRgb, Mask};

pub const CROP: usize = 200;

#[derive(Clone, Debug)]
pub struct Crop {
    pub image: ImageRgb,
    pub depth: Option<DepthMap>,
    pub mask: Option<Mask>,
    pub camera: Camera,
    /// Top-left corner in the resized image.
    pub offset: (usize, usize),
    pub scale: f64,
    /// Pixels with finite depth.
    pub valid_depth: usize,
}

/// Bilinear sample at `(u, v)` in pixel coordinates, clamped to the border.
fn bilinear(img: &Grid<[f64; 3]>, u: f64, v: f64) -> [f64; 3] {
    let (w, h) = img.dims();
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let (a, b, c, d) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
    std::array::from_fn(|k| {
        (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
    })
}

fn nearest<T: Clone>(g: &Grid<T>, u: f64, v: f64) -> T {
    let (w, h) = g.dims();
    let x = (u.round().max(0.0) as usize).min(w - 1);
    let y = (v.round().max(0.0) as usize).min(h - 1);
    g.get(x, y).clone()
}

/// Scales so the shorter side is [`CROP`] pixels (`x' = s·x`), then places
/// up to `max_crops` non-overlapping `CROP × CROP` windows greedily by
/// valid-depth count. Depth and masks are resampled by nearest neighbour.
pub fn preprocess(
    image: &ImageRgb,
    depth: Option<&DepthMap>,
    mask: Option<&Mask>,
    camera: &Camera,
    max_crops: usize,
) -> Result<Vec<Crop>> {
    let (w, h) = image.dims();
    if w.min(h) < CROP {
        return Err(Error::InvalidValue(format!(
            "image is {w}x{h}; both sides must be at least {CROP}"
        )));
    }
    if let Some(d) = depth {
        d.grid().ensure_dims((w, h))?;
    }
    if let Some(m) = mask {
        m.grid().ensure_dims((w, h))?;
    }
    let s = CROP as f64 / w.min(h) as f64;
    let nw = ((w as f64 * s).round() as usize).max(CROP);
    let nh = ((h as f64 * s).round() as usize).max(CROP);
    let resized = Grid::from_fn(nw, nh, |x, y| bilinear(image.pixels(), x as f64 / s, y as f64 / s));
    let rdepth = depth.map(|d| Grid::from_fn(nw, nh, |x, y| nearest(d.grid(), x as f64 / s, y as f64 / s)));
    let rmask = mask.map(|m| Grid::from_fn(nw, nh, |x, y| nearest(m.grid(), x as f64 / s, y as f64 / s)));

    // summed-area table of valid depth
    let mut sat = vec![0usize; (nw + 1) * (nh + 1)];
    for y in 0..nh {
        for x in 0..nw {
            let v = rdepth.as_ref().is_none_or(|d| d.get(x, y).is_finite()) as usize;
            sat[(y + 1) * (nw + 1) + x + 1] =
                v + sat[y * (nw + 1) + x + 1] + sat[(y + 1) * (nw + 1) + x] - sat[y * (nw + 1) + x];
        }
    }
    let count = |x: usize, y: usize| {
        let at = |xx: usize, yy: usize| sat[yy * (nw + 1) + xx];
        at(x + CROP, y + CROP) + at(x, y) - at(x + CROP, y) - at(x, y + CROP)
    };
    let mut chosen: Vec<(usize, usize, usize)> = Vec::new();
    while chosen.len() < max_crops {
        let mut best: Option<(usize, usize, usize)> = None;
        for y in 0..=nh - CROP {
            for x in 0..=nw - CROP {
                let overlaps = chosen
                    .iter()
                    .any(|&(cx, cy, _)| x < cx + CROP && cx < x + CROP && y < cy + CROP && cy < y + CROP);
                if overlaps {
                    continue;
                }
                let c = count(x, y);
                if best.is_none_or(|b| c > b.2) {
                    best = Some((x, y, c));
                }
            }
        }
        match best {
            Some(b) if b.2 > 0 => chosen.push(b),
            _ => break,
        }
    }
    chosen
        .into_iter()
        .map(|(ox, oy, valid_depth)| {
            let img = Grid::from_fn(CROP, CROP, |x, y| *resized.get(ox + x, oy + y));
            Ok(Crop {
                image: ImageRgb::new(img, image.encoding())?,
                depth: rdepth
                    .as_ref()
                    .map(|d| DepthMap::new(Grid::from_fn(CROP, CROP, |x, y| *d.get(ox + x, oy + y))))
                    .transpose()?,
                mask: rmask
                    .as_ref()
                    .map(|m| Mask::new(Grid::from_fn(CROP, CROP, |x, y| *m.get(ox + x, oy + y)))),
                camera: camera.rescaled(s, ox as f64, oy as f64),
                offset: (ox, oy),
                scale: s,
                valid_depth,
            })
        })
        .collect()
}
