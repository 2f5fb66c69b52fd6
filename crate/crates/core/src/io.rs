//! File formats: PFM float maps, 8-bit PNG images and masks, JSON documents.
//!
//! Every writer goes through [`atomic_write`], which writes a sibling temp
//! file and renames it over the destination.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{
    AlbedoMap, Camera, DepthMap, Encoding, Grid, ImageRgb, Mask, NormalMap, ShadowMap,
};

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PFM

/// Decoded PFM payload: 1 or 3 channels, rows top-to-bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn encode(&self) -> Vec<u8> {
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 4);
        // PFM stores scanlines bottom-to-top.
        for y in (0..self.height).rev() {
            let row = &self.data[y * self.width * self.channels..(y + 1) * self.width * self.channels];
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PFM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(Error::Format(format!("bad PFM magic `{other}`"))),
        };
        let parse_dim = |s: String| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PFM dimension `{s}`")))
        };
        let width = parse_dim(token()?)?;
        let height = parse_dim(token()?)?;
        let scale_tok = token()?;
        let scale: f64 = scale_tok
            .parse()
            .map_err(|_| Error::Format(format!("bad PFM scale `{scale_tok}`")))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::Format("PFM scale must be non-zero".into()));
        }
        let little = scale < 0.0;
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height * channels;
        let raster = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| Error::Format("truncated PFM raster".into()))?;
        let mut data = vec![0f32; n];
        let row_len = width * channels;
        for (i, chunk) in raster.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            let file_row = i / row_len;
            let col = i % row_len;
            data[(height - 1 - file_row) * row_len + col] = v;
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn from_scalar(grid: &Grid<f64>) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            channels: 1,
            data: grid.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_rgb(grid: &Grid<[f64; 3]>) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            channels: 3,
            data: grid
                .data()
                .iter()
                .flat_map(|p| p.map(|v| v as f32))
                .collect(),
        }
    }

    pub fn to_scalar(&self) -> Result<Grid<f64>> {
        if self.channels != 1 {
            return Err(Error::Format("expected a 1-channel PFM".into()));
        }
        Grid::new(
            self.width,
            self.height,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_rgb(&self) -> Result<Grid<[f64; 3]>> {
        if self.channels != 3 {
            return Err(Error::Format("expected a 3-channel PFM".into()));
        }
        Grid::new(
            self.width,
            self.height,
            self.data
                .chunks_exact(3)
                .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                .collect(),
        )
    }
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    DepthMap::new(Pfm::read(path)?.to_scalar()?)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    Pfm::from_scalar(depth.grid()).write(path)
}

/// Invalid normals are stored as `(0, 0, 0)`.
pub fn write_normals(path: &Path, normals: &NormalMap) -> Result<()> {
    let grid = Grid::from_fn(normals.dims().0, normals.dims().1, |x, y| {
        let i = y * normals.dims().0 + x;
        normals.at(i).map_or([0.0; 3], |n| [n.x, n.y, n.z])
    });
    Pfm::from_rgb(&grid).write(path)
}

/// A stored normal is valid if it is finite, unit within 1e-3 and faces
/// away from the camera; valid normals are renormalised.
pub fn read_normals(path: &Path) -> Result<NormalMap> {
    let rgb = Pfm::read(path)?.to_rgb()?;
    normals_from_rgb(&rgb)
}

pub fn normals_from_rgb(rgb: &Grid<[f64; 3]>) -> Result<NormalMap> {
    let mut valid = Vec::with_capacity(rgb.len());
    let mut normals = Vec::with_capacity(rgb.len());
    for p in rgb.data() {
        let n = Vector3::new(p[0], p[1], p[2]);
        let norm = n.norm();
        let ok = n.iter().all(|v| v.is_finite()) && (norm - 1.0).abs() < 1e-3 && n.z > 0.0;
        valid.push(ok);
        normals.push(if ok { n / norm } else { Vector3::z() });
    }
    NormalMap::new(
        Grid::new(rgb.width(), rgb.height(), normals)?,
        Mask::new(Grid::new(rgb.width(), rgb.height(), valid)?),
    )
}

pub fn read_albedo(path: &Path) -> Result<AlbedoMap> {
    let rgb = Pfm::read(path)?.to_rgb()?;
    AlbedoMap::new(rgb.map(|p| p.map(|v| v.clamp(0.0, 1.0))))
}

pub fn write_albedo(path: &Path, albedo: &AlbedoMap) -> Result<()> {
    Pfm::from_rgb(albedo.grid()).write(path)
}

pub fn read_shadow(path: &Path) -> Result<ShadowMap> {
    ShadowMap::new(
        Pfm::read(path)?
            .to_scalar()?
            .map(|v| v.clamp(crate::maps::SHADOW_FLOOR, 1.0)),
    )
}

pub fn write_shadow(path: &Path, shadow: &ShadowMap) -> Result<()> {
    Pfm::from_scalar(shadow.grid()).write(path)
}

// ---------------------------------------------------------------------------
// PNG

fn extension_is(path: &Path, ext: &str) -> bool {
    path.extension()
        .is_some_and(|e| e.to_string_lossy().eq_ignore_ascii_case(ext))
}

/// Loads an 8-bit image. PNGs are gamma-encoded; 3-channel PFMs are
/// treated as linear.
pub fn read_image(path: &Path) -> Result<ImageRgb> {
    if extension_is(path, "pfm") {
        let rgb = Pfm::read(path)?.to_rgb()?;
        return ImageRgb::clamped(rgb, Encoding::Linear);
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| p.0.map(|v| v as f64 / 255.0))
        .collect();
    ImageRgb::clamped(Grid::new(w as usize, h as usize, data)?, Encoding::SrgbGamma)
}

/// Quantises an image to 8 bits, clamping to `[0, 1]`. Linear images are
/// gamma-encoded first.
pub fn png_bytes(img: &ImageRgb) -> Result<Vec<u8>> {
    let img = match img.encoding() {
        Encoding::Linear => crate::color::encode_gamma(img)?,
        Encoding::SrgbGamma => img.clone(),
    };
    let (w, h) = img.dims();
    let raw: Vec<u8> = img
        .pixels()
        .data()
        .iter()
        .flat_map(|p| p.map(quantize))
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Format("image buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, img: &ImageRgb) -> Result<()> {
    atomic_write(path, &png_bytes(img)?)
}

/// Reads a mask from PNG (non-zero luma is `true`) or 1-channel PFM (`> 0.5`).
pub fn read_mask(path: &Path) -> Result<Mask> {
    if extension_is(path, "pfm") {
        return Ok(Mask::new(Pfm::read(path)?.to_scalar()?.map(|&v| v > 0.5)));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] > 0).collect();
    Ok(Mask::new(Grid::new(w as usize, h as usize, data)?))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (w, h) = mask.dims();
    let raw: Vec<u8> = mask
        .grid()
        .data()
        .iter()
        .map(|&b| if b { 255 } else { 0 })
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Format("mask buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    atomic_write(path, &out.into_inner())
}

// ---------------------------------------------------------------------------
// JSON

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// `{"f", "cx", "cy", "R": [9, row-major], "t": [3]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraDoc {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub t: Vec<f64>,
}

impl From<&Camera> for CameraDoc {
    fn from(c: &Camera) -> Self {
        let r = c.rotation();
        Self {
            f: c.f,
            cx: c.cx,
            cy: c.cy,
            r: (0..3)
                .flat_map(|i| (0..3).map(move |j| r[(i, j)]))
                .collect(),
            t: c.translation().iter().copied().collect(),
        }
    }
}

impl TryFrom<CameraDoc> for Camera {
    type Error = Error;

    fn try_from(d: CameraDoc) -> Result<Camera> {
        if d.r.len() != 9 || d.t.len() != 3 {
            return Err(Error::Format("camera needs R[9] and t[3]".into()));
        }
        Camera::new(
            d.f,
            d.cx,
            d.cy,
            Matrix3::from_row_slice(&d.r),
            Vector3::from_column_slice(&d.t),
        )
    }
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CameraDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        Camera::try_from(CameraDoc::deserialize(d)?).map_err(D::Error::custom)
    }
}
