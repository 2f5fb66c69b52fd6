use super::*;
use crate::geometry::normal_from_params;
use crate::maps::{Camera, DepthMap, Encoding, Grid, ImageRgb, LossWeights, Mask};
use crate::sh::render;
use crate::testutil::{normal, rng, small_prior};
use rand::Rng;

fn scene(seed: u64, dims: (usize, usize), prior: &PriorModel) -> (ImageRgb, NormalMap) {
    let mut r = rng(seed);
    let (w, h) = dims;
    let albedo = AlbedoMap::new(Grid::from_fn(w, h, |_, _| {
        [r.random_range(0.2..0.8), r.random_range(0.2..0.8), r.random_range(0.2..0.8)]
    }))
    .unwrap();
    let normals = NormalMap::new(
        Grid::from_fn(w, h, |_, _| normal_from_params(r.random_range(-0.4..0.4), r.random_range(-0.4..0.4))),
        Mask::full(w, h),
    )
    .unwrap();
    let alpha: Vec<f64> = (0..prior.dim()).map(|_| 0.1 * normal(&mut r)).collect();
    let l = ShLighting::new(prior.reconstruct_raw(&alpha)).unwrap();
    let img = render(&albedo, &ShadowMap::ones(w, h), &normals, &l, &Mask::full(w, h)).unwrap();
    (img, normals)
}

fn single(seed: u64, guided: bool) -> (Problem, Vec<EnergyState>) {
    let prior = small_prior(seed);
    let (img, normals) = scene(seed, (8, 8), &prior);
    let mut view = ViewData::new(&img, &Mask::full(8, 8)).unwrap();
    if guided {
        view = view.with_guide(normals).unwrap();
    }
    let state = init_state(&view, &prior).unwrap();
    (Problem::new(vec![view], prior, LossWeights::default()).unwrap(), vec![state])
}

fn quick(stage1: usize, stage2: usize) -> SolveConfig {
    SolveConfig {
        stage1_iters: stage1,
        stage2_iters: stage2,
        deterministic: true,
        ..Default::default()
    }
}

#[test]
fn zero_iterations_trace_has_one_entry() {
    let (p, states) = single(1, true);
    let rep = solve(&p, states.clone(), &quick(0, 0)).unwrap();
    assert_eq!(rep.trace.len(), 1);
    assert_eq!(rep.states, states);
    assert!(rep.resolves.is_empty());
    assert!(!rep.stage1_ran);
    assert_eq!(rep.final_loss(), &total_loss(&p, &states).unwrap());
}

#[test]
fn stage_one_keeps_normals_frozen() {
    let (p, states) = single(2, true);
    let rep = solve(&p, states.clone(), &quick(25, 0)).unwrap();
    assert!(rep.stage1_ran);
    assert_eq!(rep.states[0].normal_params, states[0].normal_params);
    assert_ne!(rep.states[0].albedo_raw, states[0].albedo_raw);
    // trace: 25 steps plus the final entry, each stamped stage 1
    assert_eq!(rep.trace.len(), 26);
    assert!(rep.trace.iter().all(|t| t.stage == 1));
    assert_eq!(rep.resolves.len(), 3);
}

#[test]
fn resolves_never_increase_rgb_residual() {
    let (p, states) = single(3, true);
    let rep = solve(&p, states, &quick(30, 30)).unwrap();
    assert!(!rep.resolves.is_empty());
    for r in rep.resolves.iter().filter(|r| !r.degenerate) {
        assert!(r.rgb_after <= r.rgb_before * (1.0 + 1e-9) + 1e-15, "{r:?}");
    }
}

#[test]
fn energy_decreases() {
    let (p, states) = single(4, true);
    let rep = solve(&p, states, &quick(40, 0)).unwrap();
    assert!(rep.final_loss().total < rep.trace[0].loss.total);

    // from frontal normals, stage 2 alone
    let (p, states) = single(4, false);
    let rep = solve(&p, states, &quick(0, 150)).unwrap();
    let (first, last) = (rep.trace[0].loss.total, rep.final_loss().total);
    assert!(last < 0.5 * first, "{last} vs {first}");
}

#[test]
fn missing_guide_skips_stage_one() {
    let (p, states) = single(5, false);
    let rep = solve(&p, states, &quick(10, 5)).unwrap();
    assert!(!rep.stage1_ran);
    assert_eq!(rep.warnings.len(), 1);
    assert!(rep.trace.iter().all(|t| t.stage == 2));
    assert!(rep.final_loss().nm.is_none());
}

#[test]
fn deterministic_runs_are_identical() {
    let (p, states) = single(6, true);
    let cfg = SolveConfig { stage2_lighting: LightingMode::Gradient, ..quick(15, 15) };
    let a = solve(&p, states.clone(), &cfg).unwrap();
    let b = solve(&p, states, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json(), b.to_json());
    assert!(!a.to_json().contains("wall_time_s"));
}

#[test]
fn gradient_mode_moves_lighting() {
    let (p, states) = single(7, true);
    let cfg = SolveConfig { stage2_lighting: LightingMode::Gradient, ..quick(0, 20) };
    let rep = solve(&p, states.clone(), &cfg).unwrap();
    assert!(rep.resolves.is_empty());
    assert_ne!(rep.states[0].lighting_alpha, states[0].lighting_alpha);
}

#[test]
fn init_state_examples() {
    let prior = small_prior(8);
    let dc: Vec<f64> = (0..3).map(|c| prior.mean().coeffs()[9 * c]).collect();
    let px = vec![[0.0, 0.0, 0.0], [0.3 * dc[0], 0.3 * dc[1], 0.3 * dc[2]], [1.0, 1.0, 1.0]];
    let img = ImageRgb::new(Grid::new(3, 1, px).unwrap(), Encoding::Linear).unwrap();
    let view = ViewData::new(&img, &Mask::full(3, 1)).unwrap();
    let s = init_state(&view, &prior).unwrap();
    let a = s.albedo();
    let a = a.grid().data();
    let (lo, hi) = INIT_ALBEDO_RANGE;
    for c in 0..3 {
        assert!((a[0][c] - lo).abs() < 1e-9);
        assert!((a[1][c] - 0.3).abs() < 1e-9);
        assert!(a[2][c] <= hi + 1e-9);
    }
    assert!(s.shadow().grid().data().iter().all(|&v| (v - INIT_SHADOW).abs() < 1e-12));
    assert!(s.lighting_alpha.iter().all(|&v| v == 0.0));
    assert!(s.normal_params.iter().all(|&p| p == [0.0, 0.0]));
}

#[test]
fn init_state_takes_guide_normals() {
    let (p, states) = single(9, true);
    let n = states[0].normals();
    let g = p.views[0].guide().unwrap();
    for i in 0..64 {
        assert!((n.at(i).unwrap() - g.at(i).unwrap()).norm() < 1e-9);
    }
}

#[test]
fn identical_pair_stays_symmetric() {
    let prior = small_prior(10);
    let (img, normals) = scene(10, (8, 8), &prior);
    let cam = Camera::identity(8.0, 3.5, 3.5);
    let depth = DepthMap::new(Grid::filled(8, 8, 5.0)).unwrap();
    let view = ViewData::new(&img, &Mask::full(8, 8))
        .unwrap()
        .with_guide(normals)
        .unwrap()
        .with_geometry(cam, depth)
        .unwrap();
    let state = init_state(&view, &prior).unwrap();
    let mut p = Problem::new(vec![view.clone(), view], prior, LossWeights::default()).unwrap();
    p.add_pair(0, 1).unwrap();
    let rep = solve_pair(&p, vec![state.clone(), state], &quick(10, 10)).unwrap();
    let (a, b) = (&rep.states[0], &rep.states[1]);
    for (x, y) in a.albedo_raw.iter().zip(&b.albedo_raw) {
        for c in 0..3 {
            assert!((x[c] - y[c]).abs() < 1e-10);
        }
    }
    for (x, y) in a.lighting_alpha.iter().zip(&b.lighting_alpha) {
        assert!((x - y).abs() < 1e-10);
    }
    assert!(rep.final_loss().albedo.unwrap() < 1e-12);
}

#[test]
fn solve_pair_rejects_single_view() {
    let (p, states) = single(11, true);
    assert!(solve_pair(&p, states, &quick(1, 1)).is_err());
}

#[test]
fn config_json() {
    let c = SolveConfig::from_json(r#"{"stage1_iters": 5, "stage2_lighting": "gradient"}"#).unwrap();
    assert_eq!(c.stage1_iters, 5);
    assert_eq!(c.stage2_lighting, LightingMode::Gradient);
    assert_eq!(c.step, 1e-2);
    assert!(SolveConfig::from_json(r#"{"stage_one": 5}"#).is_err());
    assert!(SolveConfig::from_json(r#"{"step": 0}"#).is_err());
}
