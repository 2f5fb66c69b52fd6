//! `invrender` command-line tool.
//!
//! Every subcommand prints a one-line JSON summary on stdout. Failures print
//! `{"error": {"kind", "message"}}` on stderr and exit non-zero. The thread
//! pool size follows `RAYON_NUM_THREADS`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use invrender::energy::Problem;
use invrender::geometry::{GroundPlane, Warp};
use invrender::io::{
    read_albedo, read_image, read_json, read_mask, read_normals, read_shadow,
    write_albedo, write_json, write_mask, write_normals, write_png, write_shadow, Pfm,
};
use invrender::maps::{Grid, ImageRgb, LossWeights, Mask, ShLighting, ShadowMap};
use invrender::pipeline::metrics::image_mse;
use invrender::pipeline::{
    albedo_error, lighting_error, make_pair, make_scene, normal_error, select_pairs,
    write_synthetic_view, LoadedView, MetricsReport, PairThresholds, PairView, ScaleMode,
    SyntheticConfig, ViewRecord,
};
use invrender::prior::{
    build_prior, default_prior, prior_samples, procedural_environments, EnvMap, PriorModel,
    PROCEDURAL_ENV_COUNT, PROCEDURAL_HEIGHT, PROCEDURAL_SEED, PRIOR_DIM,
};
use invrender::solver::{init_state, solve, LightingMode, SolveConfig, SolveReport};
use invrender::{color, sh, Encoding, Error};

#[derive(Parser)]
#[command(name = "invrender", version, about = "Outdoor inverse rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render maps and lighting to an image (PNG is gamma-encoded, PFM linear).
    Render {
        #[arg(long)]
        albedo: PathBuf,
        #[arg(long)]
        normals: PathBuf,
        #[arg(long)]
        lighting: PathBuf,
        /// Defaults to no shadowing.
        #[arg(long)]
        shadow: Option<PathBuf>,
        /// Defaults to the valid normals.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Least-squares lighting from an image and known maps.
    SolveLight {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        albedo: PathBuf,
        #[arg(long)]
        normals: PathBuf,
        #[arg(long)]
        shadow: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Solve inside a prior subspace (`default` for the built-in prior).
        #[arg(long)]
        prior: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover albedo, shadow, normals and lighting from one view or a pair.
    Invrender {
        /// View descriptions (JSON); two with `--pair`.
        #[arg(required = true, num_args = 1..=2)]
        views: Vec<PathBuf>,
        #[arg(long)]
        pair: bool,
        #[arg(long)]
        out: PathBuf,
        /// Solver configuration JSON, or `default`.
        #[arg(long, default_value = "default")]
        config: String,
        /// Loss weights JSON; missing fields take their defaults.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Prior JSON, or `default`.
        #[arg(long, default_value = "default")]
        prior: String,
        /// Ground plane JSON used when guide normals are derived from depth.
        #[arg(long)]
        plane: Option<PathBuf>,
        #[arg(long)]
        stage1_iters: Option<usize>,
        #[arg(long)]
        stage2_iters: Option<usize>,
        #[arg(long, value_enum)]
        lighting_mode: Option<LightingArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Build an illumination prior from equirectangular PFM panoramas.
    BuildPrior {
        /// Panoramas; without any, the built-in procedural skies are used.
        envs: Vec<PathBuf>,
        #[arg(long, default_value_t = PRIOR_DIM)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample a source-view map onto a target view.
    CrossProject {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// Source-view map: PFM (1 or 3 channels) or an 8-bit image.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Writes the validity mask as PNG.
        #[arg(long)]
        valid_out: Option<PathBuf>,
    },
    /// List overlapping view pairs suitable for joint solves.
    PairSelect {
        #[arg(required = true, num_args = 2..)]
        views: Vec<PathBuf>,
        #[arg(long)]
        camera_factor: Option<f64>,
        #[arg(long)]
        centroid_fraction: Option<f64>,
        #[arg(long)]
        r_max: Option<f64>,
    },
    /// Compare estimates in `pred` against ground truth in `truth`.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a procedural test scene with ground truth.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = invrender::pipeline::synthetic::DEFAULT_GUIDE_NOISE_DEG)]
        guide_noise_deg: f64,
        /// Two views under differently coloured lighting.
        #[arg(long)]
        pair: bool,
        #[arg(long, default_value = "default")]
        prior: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LightingArg {
    Resolve,
    Gradient,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            fail("usage", &e.render().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            fail(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn fail(kind: &str, message: &str) {
    let doc = json!({ "error": { "kind": kind, "message": message.trim_end() } });
    eprintln!("{doc}");
}

fn run(command: Command) -> invrender::Result<Value> {
    match command {
        Command::Render { albedo, normals, lighting, shadow, mask, out } => {
            render(&albedo, &normals, &lighting, shadow.as_deref(), mask.as_deref(), &out)
        }
        Command::SolveLight { image, albedo, normals, shadow, mask, prior, out } => {
            solve_light(&image, &albedo, &normals, shadow.as_deref(), mask.as_deref(), prior.as_deref(), &out)
        }
        Command::Invrender {
            views,
            pair,
            out,
            config,
            weights,
            prior,
            plane,
            stage1_iters,
            stage2_iters,
            lighting_mode,
            seed,
            deterministic,
        } => {
            let mut cfg = if config == "default" {
                SolveConfig::default()
            } else {
                SolveConfig::from_json(&std::fs::read_to_string(&config)?)?
            };
            if let Some(n) = stage1_iters {
                cfg.stage1_iters = n;
            }
            if let Some(n) = stage2_iters {
                cfg.stage2_iters = n;
            }
            if let Some(m) = lighting_mode {
                cfg.stage2_lighting = match m {
                    LightingArg::Resolve => LightingMode::Resolve,
                    LightingArg::Gradient => LightingMode::Gradient,
                };
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.deterministic |= deterministic;
            cfg.validate()?;
            let weights = match weights {
                Some(p) => read_json::<LossWeights>(&p)?,
                None => LossWeights::default(),
            };
            weights.validate()?;
            let plane = plane.map(|p| read_json::<GroundPlane>(&p)).transpose()?;
            invrender_cmd(&views, pair, &out, &cfg, weights, &load_prior(&prior)?, plane.as_ref())
        }
        Command::BuildPrior { envs, dim, out } => build_prior_cmd(&envs, dim, &out),
        Command::CrossProject { target, source, input, out, valid_out } => {
            cross_project(&target, &source, &input, &out, valid_out.as_deref())
        }
        Command::PairSelect { views, camera_factor, centroid_fraction, r_max } => {
            let mut t = PairThresholds::default();
            if let Some(v) = camera_factor {
                t.camera_factor = v;
            }
            if let Some(v) = centroid_fraction {
                t.centroid_fraction = v;
            }
            if let Some(v) = r_max {
                t.r_max = v;
            }
            let loaded = views.iter().map(|p| load_view(p)).collect::<invrender::Result<Vec<_>>>()?;
            let pv: Vec<PairView> = loaded
                .iter()
                .map(|v| PairView { image: &v.image, mask: &v.mask, depth: &v.depth, camera: &v.camera })
                .collect();
            Ok(json!({ "pairs": select_pairs(&pv, &t) }))
        }
        Command::Evaluate { pred, truth, out } => {
            let report = evaluate(&pred, &truth)?;
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            Ok(serde_json::to_value(&report)?)
        }
        Command::MakeSynthetic { out, size, seed, guide_noise_deg, pair, prior } => {
            let cfg = SyntheticConfig { size, seed, guide_noise_deg, ..Default::default() };
            let prior = load_prior(&prior)?;
            let info = if pair {
                let (views, info) = make_pair(&prior, &cfg)?;
                for (k, v) in views.iter().enumerate() {
                    write_synthetic_view(&out.join(format!("view{k}")), v)?;
                }
                info
            } else {
                let (v, info) = make_scene(&prior, &cfg)?;
                write_synthetic_view(&out, &v)?;
                info
            };
            write_json(&out.join("scene.json"), &info)?;
            Ok(serde_json::to_value(&info)?)
        }
    }
}

fn load_prior(source: &str) -> invrender::Result<PriorModel> {
    if source == "default" {
        Ok(default_prior().clone())
    } else {
        PriorModel::from_json(&std::fs::read_to_string(source)?)
    }
}

/// Loads a view description; its paths resolve against its directory.
fn load_view(path: &Path) -> invrender::Result<LoadedView> {
    let record: ViewRecord = read_json(path)?;
    record.load(path.parent().unwrap_or(Path::new(".")))
}

fn render(
    albedo: &Path,
    normals: &Path,
    lighting: &Path,
    shadow: Option<&Path>,
    mask: Option<&Path>,
    out: &Path,
) -> invrender::Result<Value> {
    let albedo = read_albedo(albedo)?;
    let normals = read_normals(normals)?;
    let lighting: ShLighting = read_json(lighting)?;
    let (w, h) = albedo.dims();
    let shadow = shadow.map(read_shadow).transpose()?.unwrap_or_else(|| ShadowMap::ones(w, h));
    let mask = match mask {
        Some(p) => read_mask(p)?,
        None => normals.valid().clone(),
    };
    let img = sh::render(&albedo, &shadow, &normals, &lighting, &mask)?;
    write_image(out, &img)?;
    Ok(json!({ "out": out, "width": w, "height": h }))
}

fn linear(img: ImageRgb) -> invrender::Result<ImageRgb> {
    match img.encoding() {
        Encoding::Linear => Ok(img),
        Encoding::SrgbGamma => color::linearize(&img),
    }
}

fn write_image(out: &Path, img: &ImageRgb) -> invrender::Result<()> {
    if is_pfm(out) {
        Pfm::from_rgb(linear(img.clone())?.pixels()).write(out)
    } else {
        write_png(out, img)
    }
}

fn is_pfm(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
}

fn solve_light(
    image: &Path,
    albedo: &Path,
    normals: &Path,
    shadow: Option<&Path>,
    mask: Option<&Path>,
    prior: Option<&str>,
    out: &Path,
) -> invrender::Result<Value> {
    let img = read_image(image)?;
    let albedo = read_albedo(albedo)?;
    let normals = read_normals(normals)?;
    let (w, h) = img.dims();
    let shadow = shadow.map(read_shadow).transpose()?.unwrap_or_else(|| ShadowMap::ones(w, h));
    let mask = match mask {
        Some(p) => read_mask(p)?,
        None => Mask::full(w, h),
    };
    let summary = match prior {
        None => {
            let s = sh::solve_lighting(&img, &albedo, &shadow, &normals, &mask)?;
            write_json(out, &s.lighting)?;
            json!({ "out": out, "rank": s.rank, "degenerate": s.degenerate })
        }
        Some(source) => {
            let prior = load_prior(source)?;
            let s = sh::solve_lighting_in_prior(&img, &albedo, &shadow, &normals, &mask, &prior)?;
            write_json(out, &s.lighting)?;
            json!({ "out": out, "rank": s.rank, "degenerate": s.degenerate, "alpha": s.coeffs.0 })
        }
    };
    Ok(summary)
}

fn invrender_cmd(
    paths: &[PathBuf],
    pair: bool,
    out: &Path,
    cfg: &SolveConfig,
    weights: LossWeights,
    prior: &PriorModel,
    plane: Option<&GroundPlane>,
) -> invrender::Result<Value> {
    let expected = if pair { 2 } else { 1 };
    if paths.len() != expected {
        return Err(Error::InvalidValue(format!(
            "expected {expected} view(s), got {}",
            paths.len()
        )));
    }
    let mut views = Vec::new();
    for p in paths {
        let v = load_view(p)?;
        let guide = v.guide_or_derived(plane)?;
        views.push(v.view_data(Some(guide))?);
    }
    let states = views.iter().map(|v| init_state(v, prior)).collect::<invrender::Result<Vec<_>>>()?;
    let mut problem = Problem::new(views, prior.clone(), weights)?;
    if pair {
        problem.add_pair(0, 1)?;
    }
    let report = solve(&problem, states, cfg)?;
    std::fs::create_dir_all(out)?;
    if pair {
        for v in 0..2 {
            write_view_outputs(&out.join(format!("view{v}")), &report, v, problem.views[v].mask())?;
        }
    } else {
        write_view_outputs(out, &report, 0, problem.views[0].mask())?;
    }
    invrender::io::atomic_write(&out.join("report.json"), report.to_json().as_bytes())?;
    let last = report.final_loss();
    Ok(json!({
        "out": out,
        "iterations": report.trace.len() - 1,
        "stage1_ran": report.stage1_ran,
        "final_loss": last.total,
        "warnings": report.warnings,
    }))
}

fn write_view_outputs(dir: &Path, report: &SolveReport, v: usize, mask: &[bool]) -> invrender::Result<()> {
    std::fs::create_dir_all(dir)?;
    let albedo = report.albedo(v);
    let (w, h) = albedo.dims();
    write_albedo(&dir.join("albedo.pfm"), &albedo)?;
    write_shadow(&dir.join("shadow.pfm"), &report.shadow(v))?;
    write_normals(&dir.join("normals.pfm"), &report.normals(v))?;
    write_json(&dir.join("lighting.json"), &report.views[v].lighting)?;
    write_png(&dir.join("albedo.png"), &ImageRgb::new(albedo.grid().clone(), Encoding::Linear)?)?;
    write_mask(&dir.join("mask.png"), &Mask::new(Grid::new(w, h, mask.to_vec())?))
}

fn build_prior_cmd(envs: &[PathBuf], dim: usize, out: &Path) -> invrender::Result<Value> {
    let maps = if envs.is_empty() {
        procedural_environments(PROCEDURAL_ENV_COUNT, PROCEDURAL_HEIGHT, PROCEDURAL_SEED)
    } else {
        envs.iter()
            .map(|p| EnvMap::new(Pfm::read(p)?.to_rgb()?))
            .collect::<invrender::Result<Vec<_>>>()?
    };
    let samples = prior_samples(&maps)?;
    let prior = build_prior(&samples, dim)?;
    invrender::io::atomic_write(out, prior.to_json().as_bytes())?;
    Ok(json!({
        "out": out,
        "environments": maps.len(),
        "samples": samples.len(),
        "dim": prior.dim(),
    }))
}

fn cross_project(
    target: &Path,
    source: &Path,
    input: &Path,
    out: &Path,
    valid_out: Option<&Path>,
) -> invrender::Result<Value> {
    let t = load_view(target)?;
    let s = load_view(source)?;
    let src_dims = s.image.dims();
    let warp = Warp::new(&t.depth, &t.camera, &s.camera, src_dims);
    let src_valid: Vec<bool> = (0..src_dims.0 * src_dims.1)
        .map(|k| s.mask.at(k) && s.depth.grid().data()[k].is_finite())
        .collect();
    let (w, h) = t.image.dims();
    let valid = if is_pfm(input) {
        let pfm = Pfm::read(input)?;
        if (pfm.width, pfm.height) != src_dims {
            return Err(Error::ShapeMismatch { expected: src_dims, got: (pfm.width, pfm.height) });
        }
        let (data, valid) = if pfm.channels == 3 {
            let (v, ok) = warp.apply(pfm.to_rgb()?.data(), &src_valid);
            let flat: Vec<f32> = v
                .iter()
                .zip(&ok)
                .flat_map(|(p, &k)| p.map(|c| if k { c as f32 } else { f32::NAN }))
                .collect();
            (flat, ok)
        } else {
            let (v, ok) = warp.apply_scalar(pfm.to_scalar()?.data(), &src_valid);
            let flat = v.iter().zip(&ok).map(|(&c, &k)| if k { c as f32 } else { f32::NAN }).collect();
            (flat, ok)
        };
        Pfm { width: w, height: h, channels: pfm.channels, data }.write(out)?;
        valid
    } else {
        let img = linear(read_image(input)?)?;
        img.pixels().ensure_dims(src_dims)?;
        let (v, ok) = warp.apply(img.pixels().data(), &src_valid);
        write_image(out, &ImageRgb::clamped(Grid::new(w, h, v)?, Encoding::Linear)?)?;
        ok
    };
    if let Some(p) = valid_out {
        write_mask(p, &Mask::new(Grid::new(w, h, valid.clone())?))?;
    }
    Ok(json!({ "out": out, "valid": valid.iter().filter(|&&b| b).count() }))
}

fn evaluate(pred: &Path, truth: &Path) -> invrender::Result<MetricsReport> {
    let at = |dir: &Path, name: &str| Some(dir.join(name)).filter(|p| p.exists());
    let mask = match at(truth, "mask.png") {
        Some(p) => Some(read_mask(&p)?),
        None => None,
    };
    let mut r = MetricsReport::default();
    if let (Some(p), Some(t)) = (at(pred, "albedo.pfm"), at(truth, "albedo.pfm")) {
        let (pa, ta) = (read_albedo(&p)?, read_albedo(&t)?);
        let m = mask.clone().unwrap_or_else(|| Mask::full(ta.dims().0, ta.dims().1));
        let (mse, lmse) = albedo_error(&pa, &ta, &m)?;
        r.albedo_mse = Some(mse);
        r.albedo_lmse = Some(lmse);
    }
    if let (Some(p), Some(t)) = (at(pred, "normals.pfm"), at(truth, "normals.pfm")) {
        let (mean, median) = normal_error(&read_normals(&p)?, &read_normals(&t)?)?;
        r.normal_mean_deg = Some(mean);
        r.normal_median_deg = Some(median);
    }
    if let (Some(p), Some(t)) = (at(pred, "lighting.json"), at(truth, "lighting.json")) {
        let (pl, tl): (ShLighting, ShLighting) = (read_json(&p)?, read_json(&t)?);
        r.lighting_mse_global = Some(lighting_error(&pl, &tl, ScaleMode::Global)?);
        r.lighting_mse_per_colour = Some(lighting_error(&pl, &tl, ScaleMode::PerColour)?);
    }
    let recon = (
        at(pred, "albedo.pfm"),
        at(pred, "normals.pfm"),
        at(pred, "lighting.json"),
        at(truth, "image.png"),
    );
    if let (Some(a), Some(n), Some(l), Some(i)) = recon {
        let albedo = read_albedo(&a)?;
        let (w, h) = albedo.dims();
        let shadow = match at(pred, "shadow.pfm") {
            Some(s) => read_shadow(&s)?,
            None => ShadowMap::ones(w, h),
        };
        let normals = read_normals(&n)?;
        let m = mask.clone().unwrap_or_else(|| normals.valid().clone());
        let lighting: ShLighting = read_json(&l)?;
        let img = sh::render(&albedo, &shadow, &normals, &lighting, &m)?;
        let obs = linear(read_image(&i)?)?;
        obs.pixels().ensure_dims((w, h))?;
        r.reconstruction_mse = Some(image_mse(img.pixels().data(), obs.pixels().data(), &m)?);
    }
    Ok(r)
}
