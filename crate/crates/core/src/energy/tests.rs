use super::*;
use crate::maps::Grid;
use crate::sh::render;
use crate::testutil::{normal, plane_pair, prior_with_dim, random_state, rng, small_prior};
use nalgebra::{Rotation3, Vector3};
use rand::Rng;

fn lin(w: usize, h: usize, data: Vec<[f64; 3]>) -> ImageRgb {
    ImageRgb::new(Grid::new(w, h, data).unwrap(), Encoding::Linear).unwrap()
}

#[test]
fn shadow_free_examples() {
    let img = lin(3, 1, vec![[0.4; 3], [0.8; 3], [1.0; 3]]);
    let s = ShadowMap::new(Grid::new(3, 1, vec![0.5, 0.5, 1.0]).unwrap()).unwrap();
    let sf = shadow_free(&img, &s).unwrap();
    let d = sf.pixels().data();
    assert!((d[0][0] - 0.8).abs() < 1e-15);
    assert_eq!(d[1][0], 1.0);
    assert_eq!(d[2][0], 1.0);
    assert_eq!(sf.encoding(), Encoding::Linear);

    let gamma = ImageRgb::new(Grid::new(1, 1, vec![[0.5; 3]]).unwrap(), Encoding::SrgbGamma).unwrap();
    let sf = shadow_free(&gamma, &ShadowMap::ones(1, 1)).unwrap();
    assert!((sf.pixels().data()[0][0] - 0.5f64.powf(2.2)).abs() < 1e-12);
}

#[test]
fn squash_ranges_and_inverses() {
    for r in [-50.0, -3.0, 0.0, 0.7, 50.0] {
        let a = albedo_from_raw(r);
        let s = shadow_from_raw(r);
        assert!((0.0..=1.0).contains(&a));
        assert!((SHADOW_FLOOR..=1.0).contains(&s));
    }
    for v in [0.05, 0.3, 0.9] {
        assert!((albedo_from_raw(albedo_to_raw(v)) - v).abs() < 1e-12);
        assert!((shadow_from_raw(shadow_to_raw(v)) - v).abs() < 1e-12);
    }
}

#[test]
fn normal_loss_examples() {
    let mut r = rng(3);
    let (w, h) = (6, 5);
    let rand_n = |r: &mut rand_chacha::ChaCha8Rng| {
        normal_from_params(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))
    };
    let a: Vec<_> = (0..w * h).map(|_| rand_n(&mut r)).collect();
    let b: Vec<_> = (0..w * h).map(|_| rand_n(&mut r)).collect();
    let mk = |v: Vec<Vector3<f64>>| NormalMap::new(Grid::new(w, h, v).unwrap(), Mask::full(w, h)).unwrap();
    let (na, nb) = (mk(a.clone()), mk(b.clone()));

    let same = normal_supervision_loss(&na, &na).unwrap();
    assert!(same <= (1.0f64 - NM_DELTA).acos() + 1e-12);

    let oracle: f64 = a.iter().zip(&b).map(|(x, y)| x.dot(y).clamp(-1.0, 1.0).acos()).sum::<f64>() / (w * h) as f64;
    assert!((normal_supervision_loss(&na, &nb).unwrap() - oracle).abs() < 1e-9);

    // 90 degrees everywhere
    let x = mk(vec![Vector3::new(0.6, 0.0, 0.8); w * h]);
    let y = mk(vec![Vector3::new(-0.8, 0.0, 0.6); w * h]);
    assert!((normal_supervision_loss(&x, &y).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);

    let none = NormalMap::new(Grid::filled(w, h, Vector3::z()), Mask::empty(w, h)).unwrap();
    assert!(matches!(normal_supervision_loss(&na, &none), Err(Error::EmptyMask(_))));
}

/// Renders a random scene with `s = 1` under a positive lighting from the prior.
fn exact_view(seed: u64, dims: (usize, usize), prior: &PriorModel) -> (ViewData, EnergyState) {
    let mut r = rng(seed);
    let (w, h) = dims;
    let albedo = AlbedoMap::new(Grid::from_fn(w, h, |_, _| {
        [r.random_range(0.1..0.9), r.random_range(0.1..0.9), r.random_range(0.1..0.9)]
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
    let view = ViewData::new(&img, &Mask::full(w, h)).unwrap();
    let state = EnergyState::from_maps(&albedo, &ShadowMap::ones(w, h), &normals, alpha).unwrap();
    (view, state)
}

#[test]
fn appearance_vanishes_at_ground_truth() {
    let prior = small_prior(1);
    let (view, state) = exact_view(2, (12, 10), &prior);
    let p = Problem::new(vec![view], prior, LossWeights::default()).unwrap();
    let app = appearance_loss(&p, std::slice::from_ref(&state), 0).unwrap();
    assert!(app < 1e-6, "{app}");
}

#[test]
fn appearance_lab_term_grows_with_dc_perturbation() {
    let prior = small_prior(1);
    let (view, state) = exact_view(5, (12, 10), &prior);
    let p = Problem::new(vec![view], prior, LossWeights::default())
        .unwrap()
        .with_features(FeatureSet::lab_only(1.0));
    let base = appearance_loss(&p, std::slice::from_ref(&state), 0).unwrap();
    let albedo = state.albedo();
    let target = lin(12, 10, p.views[0].image().to_vec());
    for k in [0.9, 1.1] {
        let mut l = state.lighting(&p.prior);
        for c in 0..3 {
            l.coeffs_mut()[9 * c] *= k;
        }
        let x = render(&albedo, &ShadowMap::ones(12, 10), &state.normals(), &l, &Mask::full(12, 10)).unwrap();
        let e = perceptual_error(&x, &target, &Mask::full(12, 10), &p.features).unwrap();
        assert!(e > base + 1e-4, "{k}: {e} vs {base}");
    }
}

#[test]
fn black_albedo_against_black_image_is_zero() {
    let prior = small_prior(1);
    let (w, h) = (6, 6);
    let img = lin(w, h, vec![[0.0; 3]; w * h]);
    let view = ViewData::new(&img, &Mask::full(w, h)).unwrap();
    let mut state = EnergyState::from_maps(
        &AlbedoMap::constant(w, h, [0.0; 3]).unwrap(),
        &ShadowMap::ones(w, h),
        &NormalMap::frontal(w, h),
        vec![0.0; 18],
    )
    .unwrap();
    state.albedo_raw.iter_mut().for_each(|a| *a = [-40.0; 3]);
    let p = Problem::new(vec![view], prior, LossWeights::default()).unwrap();
    assert_eq!(appearance_loss(&p, &[state], 0).unwrap(), 0.0);
}

#[test]
fn single_view_breakdown_gates_terms() {
    let prior = small_prior(1);
    let (view, mut state) = exact_view(2, (8, 8), &prior);
    state.lighting_alpha.iter_mut().for_each(|a| *a = 0.0);
    let p = Problem::new(vec![view], prior, LossWeights::default()).unwrap();
    let b = total_loss(&p, &[state]).unwrap();
    assert!(b.nm.is_none() && b.albedo.is_none() && b.cross_rend.is_none());
    assert_eq!(b.lighting, 0.0);
    assert!((b.total - 0.1 * b.appearance).abs() < 1e-15);
    let json = serde_json::to_value(&b).unwrap();
    assert!(json["nm"].is_null());
    assert_eq!(json["weights"]["lighting"], 0.005);
    assert_eq!(json["weights"]["nm"], 1.0);
}

#[test]
fn zero_state_has_zero_total() {
    let prior = small_prior(1);
    let (w, h) = (8, 8);
    let albedo = AlbedoMap::constant(w, h, [0.5; 3]).unwrap();
    let img = render(&albedo, &ShadowMap::ones(w, h), &NormalMap::frontal(w, h), prior.mean(), &Mask::full(w, h)).unwrap();
    let view = ViewData::new(&img, &Mask::full(w, h)).unwrap();
    let state = EnergyState::from_maps(&albedo, &ShadowMap::ones(w, h), &NormalMap::frontal(w, h), vec![0.0; 18]).unwrap();
    let p = Problem::new(vec![view], prior, LossWeights::default()).unwrap();
    assert!(total_loss(&p, &[state]).unwrap().total < 1e-6);
}

#[test]
fn state_checks() {
    let prior = small_prior(1);
    let (view, state) = exact_view(2, (8, 8), &prior);
    let p = Problem::new(vec![view], prior, LossWeights::default()).unwrap();
    let mut short = state.clone();
    short.lighting_alpha.pop();
    assert!(total_loss(&p, &[short]).is_err());
    assert!(total_loss(&p, &[]).is_err());
    assert!(EnergyState::new((2, 2), vec![[0.0; 3]; 3], vec![0.0; 4], vec![[0.0; 2]; 4], vec![]).is_err());
    assert!(EnergyState::new((1, 1), vec![[f64::NAN; 3]], vec![0.0], vec![[0.0; 2]], vec![]).is_err());
}

/// Two views of a textured plane under one world lighting.
fn plane_views(w: usize, h: usize, angle: f64, prior: &PriorModel, seed: u64) -> (Vec<ViewData>, Vec<EnergyState>) {
    let mut r = rng(seed);
    let alpha: Vec<f64> = (0..prior.dim()).map(|_| 0.2 * normal(&mut r)).collect();
    let l_a = ShLighting::new(prior.reconstruct_raw(&alpha)).unwrap();
    let texture = |x: f64, y: f64| {
        [
            0.5 + 0.3 * (0.7 * x).sin(),
            0.5 + 0.3 * (0.5 * y).cos(),
            0.4 + 0.2 * (0.3 * (x + y)).sin(),
        ]
    };
    let mut views = Vec::new();
    let mut states = Vec::new();
    for (cam, depth) in plane_pair(w, h, w as f64, 10.0, angle) {
        let rot = sh_rotation(cam.rotation()).unwrap();
        let l = rot.apply(&l_a);
        let n = cam.rotation() * Vector3::z();
        let albedo = AlbedoMap::new(Grid::from_fn(w, h, |x, y| {
            let p = crate::geometry::backproject(&cam, x as f64, y as f64, depth.at(x, y).unwrap());
            texture(p.x, p.y)
        }))
        .unwrap();
        let normals = NormalMap::new(Grid::filled(w, h, n), Mask::full(w, h)).unwrap();
        let img = render(&albedo, &ShadowMap::ones(w, h), &normals, &l, &Mask::full(w, h)).unwrap();
        let view = ViewData::new(&img, &Mask::full(w, h)).unwrap().with_geometry(cam, depth).unwrap();
        views.push(view);
        let coeffs = prior.project(&l);
        states.push(EnergyState::from_maps(&albedo, &ShadowMap::ones(w, h), &normals, coeffs.0).unwrap());
    }
    (views, states)
}

#[test]
fn identical_views_give_zero_albedo_loss_and_cross_equals_appearance() {
    let prior = small_prior(1);
    let (views, states) = plane_views(16, 16, 0.0, &prior, 4);
    let views = vec![views[0].clone(), views[0].clone()];
    let mut st = vec![states[0].clone(), states[0].clone()];
    // perturb so neither term is trivially zero
    let mut r = rng(9);
    for a in st.iter_mut().flat_map(|s| s.albedo_raw.iter_mut()) {
        a[0] += 0.1 * normal(&mut r);
    }
    st[1] = st[0].clone();
    let mut p = Problem::new(views, prior, LossWeights::default()).unwrap();
    p.add_pair(0, 1).unwrap();
    assert!(p.links[0].valid().iter().all(|&v| v));
    assert!(albedo_consistency_loss(&p, &st, 0).unwrap() < 1e-6);
    let app = appearance_loss(&p, &st, 0).unwrap();
    let cross = cross_render_loss(&p, &st, 0).unwrap();
    assert!(app > 1e-3);
    assert!((app - cross).abs() < 1e-6, "{app} vs {cross}");

    let mut scaled = st.clone();
    for a in scaled[1].albedo_raw.iter_mut() {
        *a = a.map(|v| albedo_to_raw(albedo_from_raw(v) * 0.5));
    }
    assert!(albedo_consistency_loss(&p, &scaled, 0).unwrap() > 1e-3);
}

#[test]
fn two_view_plane_terms_are_small_at_truth() {
    // full-rank prior so rotated lightings stay representable
    let prior = prior_with_dim(1, 27);
    let (views, states) = plane_views(32, 32, 0.3, &prior, 4);
    let mut p = Problem::new(views, prior, LossWeights::default()).unwrap();
    p.add_pair(0, 1).unwrap();
    for k in 0..2 {
        let a = albedo_consistency_loss(&p, &states, k).unwrap();
        let c = cross_render_loss(&p, &states, k).unwrap();
        assert!(a < 1e-3, "albedo {k}: {a}");
        assert!(c < 1e-3, "cross {k}: {c}");
    }

    // an extra half turn about the optical axis breaks the lighting transfer;
    // link 1 targets the oblique view, where the normal is not on that axis
    let correct = cross_render_loss(&p, &states, 1).unwrap();
    let flip = sh_rotation(Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI).matrix()).unwrap();
    p.links[1].rotation = flip.compose(&p.links[1].rotation);
    let wrong = cross_render_loss(&p, &states, 1).unwrap();
    assert!(wrong > correct + 1e-3, "{wrong} vs {correct}");
}

#[test]
fn loss_is_invariant_to_pixel_order_for_pointwise_features() {
    let prior = small_prior(1);
    let (view, state) = exact_view(6, (7, 5), &prior);
    let mut r = rng(11);
    let mut st = state.clone();
    st.albedo_raw.iter_mut().for_each(|a| a[1] += 0.3 * normal(&mut r));
    let p = Problem::new(vec![view.clone()], prior.clone(), LossWeights::default())
        .unwrap()
        .with_features(FeatureSet::lab_only(1.0));
    let base = total_loss(&p, &[st.clone()]).unwrap().total;

    let n = 35;
    let perm: Vec<usize> = (0..n).rev().collect();
    let img = lin(7, 5, perm.iter().map(|&i| view.image()[i]).collect());
    let pview = ViewData::new(&img, &Mask::full(7, 5)).unwrap();
    let pst = EnergyState::new(
        (7, 5),
        perm.iter().map(|&i| st.albedo_raw[i]).collect(),
        perm.iter().map(|&i| st.shadow_raw[i]).collect(),
        perm.iter().map(|&i| st.normal_params[i]).collect(),
        st.lighting_alpha.clone(),
    )
    .unwrap();
    let pp = Problem::new(vec![pview], prior, LossWeights::default())
        .unwrap()
        .with_features(FeatureSet::lab_only(1.0));
    let perm_total = total_loss(&pp, &[pst]).unwrap().total;
    assert!((base - perm_total).abs() < 1e-12);
}

/// Max relative error between analytic and central-difference gradients
/// over every parameter of every state.
pub(crate) fn gradient_error(p: &Problem, states: &[EnergyState]) -> f64 {
    let h = 1e-5;
    let (_, grads) = total_loss_and_grad(p, states).unwrap();
    let f = |s: &[EnergyState]| total_loss(p, s).unwrap().total;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, plus: Vec<EnergyState>, minus: Vec<EnergyState>| {
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let err = (analytic - fd).abs() / (analytic.abs().max(fd.abs()) + 1e-7);
        worst = worst.max(err);
    };
    for v in 0..states.len() {
        let n = states[v].albedo_raw.len();
        for i in 0..n {
            for c in 0..3 {
                let (mut a, mut b) = (states.to_vec(), states.to_vec());
                a[v].albedo_raw[i][c] += h;
                b[v].albedo_raw[i][c] -= h;
                check(grads[v].albedo_raw[i][c], a, b);
            }
            let (mut a, mut b) = (states.to_vec(), states.to_vec());
            a[v].shadow_raw[i] += h;
            b[v].shadow_raw[i] -= h;
            check(grads[v].shadow_raw[i], a, b);
            for c in 0..2 {
                let (mut a, mut b) = (states.to_vec(), states.to_vec());
                a[v].normal_params[i][c] += h;
                b[v].normal_params[i][c] -= h;
                check(grads[v].normal_params[i][c], a, b);
            }
        }
        for k in 0..states[v].lighting_alpha.len() {
            let (mut a, mut b) = (states.to_vec(), states.to_vec());
            a[v].lighting_alpha[k] += h;
            b[v].lighting_alpha[k] -= h;
            check(grads[v].lighting_alpha[k], a, b);
        }
    }
    worst
}

fn random_pair_problem(seed: u64) -> (Problem, Vec<EnergyState>) {
    let prior = small_prior(seed);
    let mut r = rng(seed);
    let (w, h) = (8, 8);
    let mut views = Vec::new();
    for (cam, depth) in plane_pair(w, h, 8.0, 10.0, 0.1) {
        let img = lin(w, h, (0..w * h).map(|_| [r.random(), r.random(), r.random()]).collect());
        let mut mask = Mask::full(w, h);
        mask.grid_mut().data_mut()[r.random_range(0..w * h)] = false;
        let guide = NormalMap::new(
            Grid::from_fn(w, h, |_, _| normal_from_params(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5))),
            Mask::full(w, h),
        )
        .unwrap();
        views.push(
            ViewData::new(&img, &mask)
                .unwrap()
                .with_guide(guide)
                .unwrap()
                .with_geometry(cam, depth)
                .unwrap(),
        );
    }
    let mut p = Problem::new(views, prior, LossWeights::default()).unwrap();
    p.add_pair(0, 1).unwrap();
    let states = (0..2).map(|_| random_state(&mut r, (w, h), 18)).collect();
    (p, states)
}

#[test]
fn total_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let (p, states) = random_pair_problem(seed);
        let err = gradient_error(&p, &states);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn single_view_gradient_matches_finite_differences() {
    let (p, states) = random_pair_problem(7);
    let mut views = p.views;
    views.truncate(1);
    let q = Problem::new(views, p.prior, LossWeights::default()).unwrap();
    assert!(gradient_error(&q, &states[..1]) < 1e-4);
}

#[test]
fn rgb_residual_is_zero_at_truth() {
    let prior = small_prior(1);
    let (view, state) = exact_view(2, (8, 8), &prior);
    let l = state.lighting(&prior);
    assert!(rgb_residual(&view, &state, &l) < 1e-12);
}
