//! Ingestion, preprocessing, pair selection, metrics and synthetic scenes.

pub mod metrics;
pub mod pairs;
pub mod preprocess;
pub mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::ViewData;
use crate::error::Result;
use crate::geometry::{inpaint_ground_normals, normals_from_depth, GroundPlane};
use crate::io::{
    read_depth, read_image, read_mask, read_normals, write_albedo, write_depth, write_json,
    write_mask, write_normals, write_png, write_shadow, CameraDoc,
};
use crate::maps::{Camera, DepthMap, ImageRgb, Mask, NormalMap};

pub use metrics::{albedo_error, lighting_error, normal_error, MetricsReport, ScaleMode};
pub use pairs::{select_pairs, PairThresholds, PairView};
pub use preprocess::{preprocess, Crop};
pub use synthetic::{make_pair, make_scene, SyntheticConfig, SyntheticView};

/// File locations of one view. Relative paths resolve against the record's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub image: PathBuf,
    pub camera: PathBuf,
    pub depth: PathBuf,
    pub sky_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guide: Option<PathBuf>,
}

/// A loaded view; `mask` is the non-sky foreground.
#[derive(Clone, Debug)]
pub struct LoadedView {
    pub image: ImageRgb,
    pub camera: Camera,
    pub depth: DepthMap,
    pub mask: Mask,
    pub ground: Option<Mask>,
    pub guide: Option<NormalMap>,
}

impl ViewRecord {
    /// The standard file names written by `make-synthetic`.
    pub fn standard() -> Self {
        Self {
            image: "image.png".into(),
            camera: "camera.json".into(),
            depth: "depth.pfm".into(),
            sky_mask: "mask.png".into(),
            ground_mask: Some("ground.png".into()),
            guide: Some("guide.pfm".into()),
        }
    }

    pub fn load(&self, base: &Path) -> Result<LoadedView> {
        let at = |p: &Path| base.join(p);
        let image = read_image(&at(&self.image))?;
        let dims = image.dims();
        let camera: Camera = crate::io::read_json::<CameraDoc>(&at(&self.camera))?.try_into()?;
        let depth = read_depth(&at(&self.depth))?;
        depth.grid().ensure_dims(dims)?;
        let mask = read_mask(&at(&self.sky_mask))?;
        mask.grid().ensure_dims(dims)?;
        let ground = self.ground_mask.as_ref().map(|p| read_mask(&at(p))).transpose()?;
        if let Some(g) = &ground {
            g.grid().ensure_dims(dims)?;
        }
        let guide = self.guide.as_ref().map(|p| read_normals(&at(p))).transpose()?;
        if let Some(g) = &guide {
            g.normals().ensure_dims(dims)?;
        }
        Ok(LoadedView {
            image,
            camera,
            depth,
            mask,
            ground,
            guide,
        })
    }
}

impl LoadedView {
    /// Guide normals: the supplied map, else derived from depth with the
    /// ground region replaced by `plane` when both are present.
    pub fn guide_or_derived(&self, plane: Option<&GroundPlane>) -> Result<NormalMap> {
        match &self.guide {
            Some(g) => Ok(g.clone()),
            None => guide_normals(&self.depth, &self.camera, self.ground.as_ref(), plane),
        }
    }

    pub fn view_data(&self, guide: Option<NormalMap>) -> Result<ViewData> {
        let v = ViewData::new(&self.image, &self.mask)?.with_geometry(self.camera.clone(), self.depth.clone())?;
        match guide {
            Some(g) => v.with_guide(g),
            None => Ok(v),
        }
    }
}

/// Depth normals with the ground region inpainted from the plane.
pub fn guide_normals(
    depth: &DepthMap,
    camera: &Camera,
    ground: Option<&Mask>,
    plane: Option<&GroundPlane>,
) -> Result<NormalMap> {
    let n = normals_from_depth(depth, camera);
    match (ground, plane) {
        (Some(g), Some(p)) => inpaint_ground_normals(&n, g, p, camera),
        _ => Ok(n),
    }
}

/// Writes a synthetic view and its ground truth into `dir`.
pub fn write_synthetic_view(dir: &Path, v: &SyntheticView) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_png(&dir.join("image.png"), &v.image)?;
    write_albedo(&dir.join("albedo.pfm"), &v.albedo)?;
    write_shadow(&dir.join("shadow.pfm"), &v.shadow)?;
    write_normals(&dir.join("normals.pfm"), &v.normals)?;
    write_normals(&dir.join("guide.pfm"), &v.guide)?;
    write_depth(&dir.join("depth.pfm"), &v.depth)?;
    write_mask(&dir.join("mask.png"), &v.mask)?;
    write_mask(&dir.join("ground.png"), &v.ground)?;
    write_json(&dir.join("camera.json"), &CameraDoc::from(&v.camera))?;
    write_json(&dir.join("lighting.json"), &v.lighting)?;
    write_json(&dir.join("view.json"), &ViewRecord::standard())?;
    Ok(())
}
