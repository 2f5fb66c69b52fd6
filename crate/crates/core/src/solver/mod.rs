//! Two-stage Adam minimisation of the energy.
//!
//! Stage 1 freezes the normals at their (guide) initial values and fits
//! albedo and shadow, re-solving lighting in closed form every
//! `resolve_period` iterations. Stage 2 frees every parameter.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::energy::{
    rgb_residual, shadow_to_raw, total_loss, total_loss_and_grad, EnergyState, LossBreakdown,
    Problem, StateGrad, ViewData,
};
use crate::error::{Error, Result};
use crate::geometry::params_from_normal;
use crate::maps::{AlbedoMap, NormalMap, ShLighting, ShadowMap};
use crate::prior::PriorModel;
use crate::sh::{solve_lighting_in_prior_raw, LightingInputs};

/// Initial decoded albedo range; the squash saturates near 0 and 1.
pub const INIT_ALBEDO_RANGE: (f64, f64) = (0.05, 0.995);
pub const INIT_SHADOW: f64 = 0.99;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LightingMode {
    /// Closed-form re-solve every `resolve_period` iterations.
    #[default]
    Resolve,
    /// Adam steps on the prior coefficients.
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub resolve_period: usize,
    pub stage2_lighting: LightingMode,
    pub deterministic: bool,
    pub seed: u64,
    /// Stop a stage once the energy drops by less than this fraction over
    /// `window` iterations.
    pub tolerance: f64,
    pub window: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 300,
            stage2_iters: 1200,
            step: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            resolve_period: 10,
            stage2_lighting: LightingMode::Resolve,
            deterministic: false,
            seed: 0,
            tolerance: 1e-6,
            window: 50,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.tolerance > 0.0
            && self.resolve_period > 0
            && self.window > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidValue("invalid solver configuration".into()))
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub stage: u8,
    pub loss: LossBreakdown,
}

/// One closed-form lighting update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolve {
    pub iteration: usize,
    pub view: usize,
    /// RGB least-squares residual before and after.
    pub rgb_before: f64,
    pub rgb_after: f64,
    pub rank: usize,
    pub degenerate: bool,
    /// False when the update would have raised the total energy and was
    /// discarded; ill-conditioned systems can produce huge coefficients.
    /// Degenerate fallbacks to the prior mean are always kept.
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewResult {
    pub lighting: ShLighting,
    pub lighting_alpha: Vec<f64>,
    /// Any lighting re-solve for this view was rank deficient.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveReport {
    pub trace: Vec<TraceEntry>,
    pub resolves: Vec<Resolve>,
    pub views: Vec<ViewResult>,
    pub stage1_ran: bool,
    /// Iteration at which the tolerance stopped stage 2, if it did.
    pub converged_at: Option<usize>,
    pub warnings: Vec<String>,
    pub config: SolveConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
    #[serde(skip)]
    pub states: Vec<EnergyState>,
}

impl SolveReport {
    pub fn final_loss(&self) -> &LossBreakdown {
        &self.trace.last().expect("trace is never empty").loss
    }

    pub fn albedo(&self, view: usize) -> AlbedoMap {
        self.states[view].albedo()
    }

    pub fn shadow(&self, view: usize) -> ShadowMap {
        self.states[view].shadow()
    }

    pub fn normals(&self, view: usize) -> NormalMap {
        self.states[view].normals()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Starting point: albedo from the linear image over the mean ambient
/// level, shadow just below one, guide normals where valid and
/// the prior mean lighting.
pub fn init_state(view: &ViewData, prior: &PriorModel) -> Result<EnergyState> {
    let dc: [f64; 3] = std::array::from_fn(|c| prior.mean().coeffs()[9 * c]);
    if dc.iter().any(|&v| v <= 0.0) {
        return Err(Error::Degenerate("prior mean has non-positive ambient term".into()));
    }
    let (lo, hi) = INIT_ALBEDO_RANGE;
    let albedo_raw = view
        .image()
        .iter()
        .map(|p| {
            std::array::from_fn(|c| crate::energy::albedo_to_raw((p[c].min(1.0) / dc[c]).clamp(lo, hi)))
        })
        .collect();
    let n = view.image().len();
    let normal_params = match view.guide() {
        Some(g) => (0..n)
            .map(|i| match g.at(i) {
                Some(v) => params_from_normal(&v),
                None => Ok([0.0, 0.0]),
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![[0.0, 0.0]; n],
    };
    EnergyState::new(
        view.dims(),
        albedo_raw,
        vec![shadow_to_raw(INIT_SHADOW); n],
        normal_params,
        vec![0.0; prior.dim()],
    )
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], active: &[bool], cfg: &SolveConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..x.len() {
            if !active[i] {
                continue;
            }
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            x[i] -= cfg.step * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Flat parameter layout: per view albedo, shadow, normals, lighting.
struct Layout {
    offsets: Vec<[usize; 5]>,
}

impl Layout {
    fn new(states: &[EnergyState]) -> Self {
        let mut at = 0;
        let offsets = states
            .iter()
            .map(|s| {
                let n = s.albedo_raw.len();
                let o = [at, at + 3 * n, at + 4 * n, at + 6 * n, at + 6 * n + s.lighting_alpha.len()];
                at = o[4];
                o
            })
            .collect();
        Self { offsets }
    }

    fn len(&self) -> usize {
        self.offsets.last().map_or(0, |o| o[4])
    }

    fn pack(&self, states: &[EnergyState]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        for s in states {
            x.extend(s.albedo_raw.iter().flatten());
            x.extend(&s.shadow_raw);
            x.extend(s.normal_params.iter().flatten());
            x.extend(&s.lighting_alpha);
        }
        x
    }

    fn pack_grad(&self, grads: &[StateGrad]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        for g in grads {
            x.extend(g.albedo_raw.iter().flatten());
            x.extend(&g.shadow_raw);
            x.extend(g.normal_params.iter().flatten());
            x.extend(&g.lighting_alpha);
        }
        x
    }

    fn unpack(&self, x: &[f64], states: &mut [EnergyState]) {
        for (s, o) in states.iter_mut().zip(&self.offsets) {
            for (i, a) in s.albedo_raw.iter_mut().enumerate() {
                a.copy_from_slice(&x[o[0] + 3 * i..o[0] + 3 * i + 3]);
            }
            s.shadow_raw.copy_from_slice(&x[o[1]..o[2]]);
            for (i, n) in s.normal_params.iter_mut().enumerate() {
                n.copy_from_slice(&x[o[2] + 2 * i..o[2] + 2 * i + 2]);
            }
            s.lighting_alpha.copy_from_slice(&x[o[3]..o[4]]);
        }
    }

    fn active(&self, normals: bool, lighting: bool) -> Vec<bool> {
        let mut a = vec![true; self.len()];
        for o in &self.offsets {
            if !normals {
                a[o[2]..o[3]].fill(false);
            }
            if !lighting {
                a[o[3]..o[4]].fill(false);
            }
        }
        a
    }
}

fn resolve_lighting(
    problem: &Problem,
    states: &mut [EnergyState],
    iteration: usize,
    out: &mut Vec<Resolve>,
) -> Result<()> {
    for v in 0..states.len() {
        let view = &problem.views[v];
        let before = rgb_residual(view, &states[v], &states[v].lighting(&problem.prior));
        let sol = {
            let state = &states[v];
            let albedo = state.albedo();
            let shadow = state.shadow();
            let normals = state.normals();
            solve_lighting_in_prior_raw(
                &LightingInputs {
                    target: view.image(),
                    albedo: albedo.grid().data(),
                    shadow: shadow.grid().data(),
                    normals: normals.normals().data(),
                    mask: view.mask(),
                },
                &problem.prior,
            )
        };
        let energy_before = total_loss(problem, states)?.total;
        let previous = std::mem::take(&mut states[v].lighting_alpha);
        states[v].lighting_alpha = if sol.degenerate {
            // fall back to the prior mean
            vec![0.0; previous.len()]
        } else {
            sol.coeffs.0.clone()
        };
        let after = rgb_residual(view, &states[v], &states[v].lighting(&problem.prior));
        let energy_after = total_loss(problem, states)?.total;
        let accepted = sol.degenerate || (energy_after.is_finite() && energy_after <= energy_before);
        if !accepted {
            states[v].lighting_alpha = previous;
        }
        out.push(Resolve {
            iteration,
            view: v,
            rgb_before: before,
            rgb_after: after,
            rank: sol.rank,
            degenerate: sol.degenerate,
            accepted,
        });
    }
    Ok(())
}

fn checked(loss: LossBreakdown, iteration: usize) -> Result<LossBreakdown> {
    match loss.non_finite_term() {
        Some(term) => Err(Error::NonFiniteEnergy { term, iteration }),
        None => Ok(loss),
    }
}

struct Stage {
    id: u8,
    iters: usize,
    free_normals: bool,
    lighting: LightingMode,
}

/// Minimises the energy of `problem` starting from `states`.
pub fn solve(problem: &Problem, states: Vec<EnergyState>, config: &SolveConfig) -> Result<SolveReport> {
    config.validate()?;
    let started = Instant::now();
    let mut states = states;
    total_loss(problem, &states)?; // shape checks
    let layout = Layout::new(&states);
    let mut warnings = Vec::new();
    let guided = problem.views.iter().all(|v| v.guide().is_some());
    let stage1_ran = guided && config.stage1_iters > 0;
    if !guided && config.stage1_iters > 0 {
        warnings.push("stage 1 skipped: guide normals missing".to_string());
    }
    let stages = [
        Stage {
            id: 1,
            iters: if stage1_ran { config.stage1_iters } else { 0 },
            free_normals: false,
            lighting: LightingMode::Resolve,
        },
        Stage {
            id: 2,
            iters: config.stage2_iters,
            free_normals: true,
            lighting: config.stage2_lighting,
        },
    ];

    let mut trace = Vec::new();
    let mut resolves = Vec::new();
    let mut converged_at = None;
    let mut iteration = 0;
    let mut last_stage = 1;
    for stage in &stages {
        if stage.iters == 0 {
            continue;
        }
        last_stage = stage.id;
        let mut adam = Adam::new(layout.len());
        let active = layout.active(stage.free_normals, stage.lighting == LightingMode::Gradient);
        let first = trace.len();
        for k in 0..stage.iters {
            if stage.lighting == LightingMode::Resolve && k % config.resolve_period == 0 {
                resolve_lighting(problem, &mut states, iteration, &mut resolves)?;
            }
            let (loss, grads) = total_loss_and_grad(problem, &states)?;
            let loss = checked(loss, iteration)?;
            trace.push(TraceEntry {
                iteration,
                stage: stage.id,
                loss,
            });
            let n = trace.len() - first;
            if n > config.window {
                let old = trace[trace.len() - 1 - config.window].loss.total;
                let now = trace[trace.len() - 1].loss.total;
                if old - now < config.tolerance * old.abs() {
                    if stage.id == 2 {
                        converged_at = Some(iteration);
                    }
                    break;
                }
            }
            let mut x = layout.pack(&states);
            let g = layout.pack_grad(&grads);
            adam.step(&mut x, &g, &active, config);
            layout.unpack(&x, &mut states);
            iteration += 1;
        }
    }
    let loss = checked(total_loss(problem, &states)?, iteration)?;
    trace.push(TraceEntry {
        iteration,
        stage: last_stage,
        loss,
    });

    let views = states
        .iter()
        .enumerate()
        .map(|(v, s)| ViewResult {
            lighting: s.lighting(&problem.prior),
            lighting_alpha: s.lighting_alpha.clone(),
            degenerate: resolves.iter().any(|r| r.view == v && r.degenerate),
        })
        .collect();
    Ok(SolveReport {
        trace,
        resolves,
        views,
        stage1_ran,
        converged_at,
        warnings,
        config: config.clone(),
        wall_time_s: (!config.deterministic).then(|| started.elapsed().as_secs_f64()),
        states,
    })
}

/// Joint solve of a two-view problem with both directed links.
pub fn solve_pair(problem: &Problem, states: Vec<EnergyState>, config: &SolveConfig) -> Result<SolveReport> {
    if problem.views.len() != 2 || problem.links.len() != 2 {
        return Err(Error::InvalidValue("pair solve needs two views linked both ways".into()));
    }
    solve(problem, states, config)
}

#[cfg(test)]
mod tests;
