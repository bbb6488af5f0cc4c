//! Score distillation on a toy azimuth-binned scene.
//!
//! The scene is a ring of `B` feature points; a camera at azimuth `v`
//! renders the circular linear interpolation of the two bins around `v`.
//! Gradients flow to exactly those two bins with the interpolation weights.

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{cfg_compose, perpendicular_component, ComposerKind};
use crate::error::{check_dim, Error, Result};
use crate::oracle::{OracleWorld, PromptEmbedding};
use crate::sampler::{classify_mode, standard_normal, stream_rng, PromptRef, SampleRun};
use crate::schedule::{forward_sample, VarianceSchedule};
use crate::vector::{norm, sub};

const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    bins: Vec<Vec<f64>>,
}

impl Scene {
    pub fn new(bins: Vec<Vec<f64>>) -> Result<Self> {
        if bins.len() < 3 {
            return Err(Error::param("bins", format!("{} bins, need at least 3", bins.len())));
        }
        let dim = bins[0].len();
        if dim == 0 {
            return Err(Error::param("bins", "zero-dimensional features"));
        }
        for b in &bins {
            check_dim(dim, b.len())?;
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("bins", "non-finite feature"));
            }
        }
        Ok(Self { bins })
    }

    pub fn filled(count: usize, feature: &[f64]) -> Result<Self> {
        Self::new(vec![feature.to_vec(); count])
    }

    /// Every bin at `center` plus independent `N(0, scale^2)` jitter.
    pub fn jittered(count: usize, center: &[f64], scale: f64, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, u64::MAX);
        let bins = (0..count)
            .map(|_| {
                standard_normal(&mut rng, center.len())
                    .into_iter()
                    .zip(center)
                    .map(|(z, c)| c + scale * z)
                    .collect()
            })
            .collect();
        Self::new(bins)
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bins[0].len()
    }

    pub fn bins(&self) -> &[Vec<f64>] {
        &self.bins
    }

    pub fn bin_azimuth(&self, b: usize) -> f64 {
        TAU * b as f64 / self.bins.len() as f64
    }

    fn apply(&mut self, grad: &SceneGradient, step: f64) {
        for (b, g) in &grad.entries {
            for (p, gi) in self.bins[*b].iter_mut().zip(g) {
                *p -= step * gi;
            }
        }
    }

    fn max_norm(&self) -> f64 {
        self.bins.iter().map(|b| norm(b)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sector {
    Front,
    Side,
    Back,
}

impl Sector {
    pub fn mode_id(self) -> &'static str {
        match self {
            Sector::Front => "front",
            Sector::Side => "side",
            Sector::Back => "back",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    azimuth: f64,
}

impl CameraView {
    /// Azimuth in radians, wrapped into `[0, 2*pi)`.
    pub fn new(azimuth: f64) -> Self {
        let mut a = azimuth.rem_euclid(TAU);
        if a >= TAU {
            a = 0.0;
        }
        Self { azimuth: a }
    }

    pub fn from_degrees(deg: f64) -> Self {
        Self::new(deg.to_radians())
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn degrees(&self) -> f64 {
        self.azimuth.to_degrees()
    }

    /// front `[-45, 45)`, side `[45, 135) ∪ [225, 315)`, back `[135, 225)`.
    pub fn sector(&self) -> Sector {
        let d = self.degrees();
        if !(45.0..315.0).contains(&d) {
            Sector::Front
        } else if (135.0..225.0).contains(&d) {
            Sector::Back
        } else {
            Sector::Side
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub x: Vec<f64>,
    /// The two bracketing bins and `dx/dphi_b` for each.
    pub weights: [(usize, f64); 2],
}

pub fn render(scene: &Scene, view: CameraView) -> Rendered {
    let count = scene.len();
    let pos = view.azimuth() / TAU * count as f64;
    let lo = pos.floor();
    let frac = pos - lo;
    let i = (lo as usize) % count;
    let j = (i + 1) % count;
    let x = scene.bins[i]
        .iter()
        .zip(&scene.bins[j])
        .map(|(a, b)| (1.0 - frac) * a + frac * b)
        .collect();
    Rendered {
        x,
        weights: [(i, 1.0 - frac), (j, frac)],
    }
}

/// `f(r) = a * exp(-b * r) + c` with `a, b, c >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightFn {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl WeightFn {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        let f = Self { a, b, c };
        f.validate()?;
        Ok(f)
    }

    pub fn constant(c: f64) -> Self {
        Self { a: 0.0, b: 0.0, c }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param("weight_fn", format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.a * (-self.b * r).exp() + self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectorPair {
    /// `r = 1` is the front anchor, `r = 0` the side anchor.
    FrontSide,
    /// `r = 1` is the side anchor, `r = 0` the back anchor.
    SideBack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPromptPlan {
    pub front: PromptEmbedding,
    pub side: PromptEmbedding,
    pub back: PromptEmbedding,
    pub back_side: f64,
    pub back_front: f64,
    pub side_front: f64,
    pub front_side: f64,
    pub f_sb: WeightFn,
    pub f_fsb: WeightFn,
    pub f_fs: WeightFn,
    pub f_sf: WeightFn,
    pub r_perturb_delta: f64,
    /// Evaluate the side negative of the front/side pair at `r` rather
    /// than at `1 - r`.
    pub flip_sf_argument: bool,
}

/// Weight-function parameters and static weights of a [`ViewPromptPlan`],
/// without the embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanWeights {
    pub back_side: f64,
    pub back_front: f64,
    pub side_front: f64,
    pub front_side: f64,
    pub f_sb: WeightFn,
    pub f_fsb: WeightFn,
    pub f_fs: WeightFn,
    pub f_sf: WeightFn,
    pub r_perturb_delta: f64,
    pub flip_sf_argument: bool,
}

impl Default for PlanWeights {
    fn default() -> Self {
        Self {
            back_side: 1.0,
            back_front: 1.0,
            side_front: 1.5,
            front_side: 1.5,
            f_sb: WeightFn { a: 1.0, b: 4.0, c: 0.0 },
            f_fsb: WeightFn::constant(1.0),
            f_fs: WeightFn { a: 1.5, b: 4.0, c: 0.0 },
            f_sf: WeightFn { a: 1.5, b: 4.0, c: 0.0 },
            r_perturb_delta: 0.05,
            flip_sf_argument: false,
        }
    }
}

impl ViewPromptPlan {
    /// Uses the world prompts labelled `front`, `side` and `back`.
    pub fn from_world(world: &OracleWorld, weights: PlanWeights) -> Result<Self> {
        let plan = Self {
            front: world.embedding("front")?.clone(),
            side: world.embedding("side")?.clone(),
            back: world.embedding("back")?.clone(),
            back_side: weights.back_side,
            back_front: weights.back_front,
            side_front: weights.side_front,
            front_side: weights.front_side,
            f_sb: weights.f_sb,
            f_fsb: weights.f_fsb,
            f_fs: weights.f_fs,
            f_sf: weights.f_sf,
            r_perturb_delta: weights.r_perturb_delta,
            flip_sf_argument: weights.flip_sf_argument,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("back_side", self.back_side),
            ("back_front", self.back_front),
            ("side_front", self.side_front),
            ("front_side", self.front_side),
            ("r_perturb_delta", self.r_perturb_delta),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Parameter {
                    field: name,
                    reason: format!("{w} must be >= 0"),
                });
            }
        }
        for f in [&self.f_sb, &self.f_fsb, &self.f_fs, &self.f_sf] {
            f.validate()?;
        }
        Ok(())
    }

    pub fn anchor(&self, sector: Sector) -> &PromptEmbedding {
        match sector {
            Sector::Front => &self.front,
            Sector::Side => &self.side,
            Sector::Back => &self.back,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrompts {
    pub positive: PromptEmbedding,
    pub negatives: Vec<(PromptEmbedding, f64)>,
    pub pair: SectorPair,
    pub r: f64,
}

/// Static prompt set of an anchor view.
pub fn anchor_prompts(sector: Sector, plan: &ViewPromptPlan) -> ViewPrompts {
    let (positive, negatives, pair, r) = match sector {
        Sector::Back => (
            plan.back.clone(),
            vec![
                (plan.side.clone(), plan.back_side),
                (plan.front.clone(), plan.back_front),
            ],
            SectorPair::SideBack,
            0.0,
        ),
        Sector::Side => (
            plan.side.clone(),
            vec![(plan.front.clone(), plan.side_front)],
            SectorPair::SideBack,
            1.0,
        ),
        Sector::Front => (
            plan.front.clone(),
            vec![(plan.side.clone(), plan.front_side)],
            SectorPair::FrontSide,
            1.0,
        ),
    };
    ViewPrompts {
        positive,
        negatives,
        pair,
        r,
    }
}

/// Interpolated prompts for a sector pair at interpolation degree `r`.
pub fn pair_prompts(pair: SectorPair, r: f64, plan: &ViewPromptPlan) -> Result<ViewPrompts> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::param("r", format!("{r} not in [0, 1]")));
    }
    let (positive, negatives) = match pair {
        SectorPair::SideBack => (
            plan.side.interpolate(&plan.back, r)?,
            vec![
                (plan.side.clone(), plan.f_sb.eval(r)),
                (plan.front.clone(), plan.f_fsb.eval(r)),
            ],
        ),
        SectorPair::FrontSide => {
            let sf_arg = if plan.flip_sf_argument { r } else { 1.0 - r };
            (
                plan.front.interpolate(&plan.side, r)?,
                vec![
                    (plan.front.clone(), plan.f_fs.eval(r)),
                    (plan.side.clone(), plan.f_sf.eval(sf_arg)),
                ],
            )
        }
    };
    Ok(ViewPrompts {
        positive,
        negatives,
        pair,
        r,
    })
}

/// Sector pair and unperturbed interpolation degree for an azimuth; the
/// anchors sit at 0 (front), 90 / 270 (side) and 180 (back) degrees.
pub fn view_interpolation(view: CameraView) -> (SectorPair, f64) {
    let d = view.degrees();
    let folded = if d > 180.0 { 360.0 - d } else { d };
    if folded <= 90.0 {
        (SectorPair::FrontSide, 1.0 - folded / 90.0)
    } else {
        (SectorPair::SideBack, 1.0 - (folded - 90.0) / 90.0)
    }
}

/// Positive embedding and weighted negatives for camera view `v`.
///
/// An exact anchor azimuth with `r_noise == 0` yields the static prompt set
/// of that anchor; everything else goes through [`pair_prompts`] with the
/// perturbed, clipped interpolation degree.
pub fn assemble_view_prompts(view: CameraView, plan: &ViewPromptPlan, r_noise: f64) -> Result<ViewPrompts> {
    if r_noise.abs() > plan.r_perturb_delta + 1e-15 {
        return Err(Error::param(
            "r_noise",
            format!("{r_noise} outside [-{d}, {d}]", d = plan.r_perturb_delta),
        ));
    }
    if r_noise == 0.0 {
        let d = view.degrees();
        for (anchor, sector) in [
            (0.0, Sector::Front),
            (90.0, Sector::Side),
            (180.0, Sector::Back),
            (270.0, Sector::Side),
        ] {
            if d == anchor {
                return Ok(anchor_prompts(sector, plan));
            }
        }
    }
    let (pair, r) = view_interpolation(view);
    pair_prompts(pair, (r + r_noise).clamp(0.0, 1.0), plan)
}

impl SectorPair {
    /// Anchors at `r = 1` and `r = 0`.
    pub fn anchors(self) -> (Sector, Sector) {
        match self {
            SectorPair::FrontSide => (Sector::Front, Sector::Side),
            SectorPair::SideBack => (Sector::Side, Sector::Back),
        }
    }

    /// Views the pair should produce at `r`: the nearer anchor, or both at the midpoint.
    pub fn targets(self, r: f64) -> Vec<Sector> {
        let (one, zero) = self.anchors();
        if r > 0.5 {
            vec![one]
        } else if r < 0.5 {
            vec![zero]
        } else {
            vec![one, zero]
        }
    }
}

/// Perp-neg 2D sampling run for one interpolation point of a sector pair.
pub fn pair_run(plan: &ViewPromptPlan, pair: SectorPair, r: f64, seed: u64, n: usize) -> Result<SampleRun> {
    let prompts = pair_prompts(pair, r, plan)?;
    let mut run = SampleRun::new(seed, n, ComposerKind::PerpNeg, PromptRef::Embedding(prompts.positive));
    for (emb, w) in prompts.negatives {
        run = run.with_negative(PromptRef::Embedding(emb), w);
    }
    Ok(run)
}

/// Fraction of samples that classify to one of `targets`.
pub fn view_accuracy(world: &OracleWorld, samples: &[Vec<f64>], targets: &[Sector]) -> f64 {
    let hits = samples
        .iter()
        .filter(|x| {
            let id = classify_mode(world, x);
            targets.iter().any(|s| s.mode_id() == id)
        })
        .count();
    hits as f64 / samples.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossWeight {
    #[default]
    Constant,
    /// `w(t) = 1 - alpha_bar_t`.
    NoiseVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillVariant {
    Vanilla,
    PerpNeg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdsConfig {
    /// Weight on the guided delta. Vanilla SDS composes with cfg at
    /// `tau = guidance_scale - 1`; perp-neg SDS multiplies its bracket by it.
    pub guidance_scale: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub loss_weight: LossWeight,
    pub step_size: f64,
    pub iterations: usize,
    /// `(t, eps)` draws averaged per iteration.
    pub draws: usize,
    /// Pair every draw with its mirror `(t, -eps)`; `draws` must be even.
    pub antithetic: bool,
    pub seed: u64,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            t_min: 0.02,
            t_max: 0.98,
            loss_weight: LossWeight::Constant,
            step_size: 0.05,
            iterations: 2000,
            draws: 1,
            antithetic: false,
            seed: 0,
        }
    }
}

impl SdsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::param(
                "t_min",
                format!("need 0 <= t_min < t_max <= 1, got [{}, {}]", self.t_min, self.t_max),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::param("step_size", format!("{} must be > 0", self.step_size)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::param(
                "guidance_scale",
                format!("{} must be >= 0", self.guidance_scale),
            ));
        }
        if self.draws == 0 {
            return Err(Error::param("draws", "need at least one draw per iteration"));
        }
        if self.antithetic && self.draws % 2 == 1 {
            return Err(Error::param("draws", "antithetic sampling needs an even draw count"));
        }
        Ok(())
    }

    /// Inclusive integer timestep range.
    pub fn t_range(&self, sched: &VarianceSchedule) -> (usize, usize) {
        let total = sched.num_steps() as f64;
        let lo = ((self.t_min * total).round() as usize).max(1);
        let hi = ((self.t_max * total).round() as usize).clamp(lo, sched.num_steps());
        (lo, hi)
    }

    fn loss_weight(&self, t: usize, sched: &VarianceSchedule) -> f64 {
        match self.loss_weight {
            LossWeight::Constant => 1.0,
            LossWeight::NoiseVariance => 1.0 - sched.alpha_bars()[t],
        }
    }
}

/// One Monte Carlo draw of the distillation estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub noise: Vec<f64>,
}

impl Draw {
    pub fn sample(rng: &mut ChaCha8Rng, cfg: &SdsConfig, sched: &VarianceSchedule, dim: usize) -> Self {
        let (lo, hi) = cfg.t_range(sched);
        let t = rng.random_range(lo..=hi);
        Self {
            t,
            noise: standard_normal(rng, dim),
        }
    }
}

fn iteration_draws(rng: &mut ChaCha8Rng, cfg: &SdsConfig, sched: &VarianceSchedule, dim: usize) -> Vec<Draw> {
    if !cfg.antithetic {
        return (0..cfg.draws).map(|_| Draw::sample(rng, cfg, sched, dim)).collect();
    }
    let mut out = Vec::with_capacity(cfg.draws);
    for _ in 0..cfg.draws / 2 {
        let d = Draw::sample(rng, cfg, sched, dim);
        let mirror = Draw {
            t: d.t,
            noise: d.noise.iter().map(|z| -z).collect(),
        };
        out.push(d);
        out.push(mirror);
    }
    out
}

/// Sparse gradient over scene bins.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneGradient {
    pub entries: Vec<(usize, Vec<f64>)>,
}

impl SceneGradient {
    pub fn dense(&self, scene_len: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; dim]; scene_len];
        for (b, g) in &self.entries {
            for (o, v) in out[*b].iter_mut().zip(g) {
                *o += v;
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    fn accumulate(&mut self, other: SceneGradient, scale: f64) {
        for (b, g) in other.entries {
            match self.entries.iter_mut().find(|(i, _)| *i == b) {
                Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += scale * v),
                None => self.entries.push((b, g.iter().map(|v| scale * v).collect())),
            }
        }
    }
}

fn chain_rule(rendered: &Rendered, residual: &[f64], weight: f64) -> SceneGradient {
    let mut entries: Vec<(usize, Vec<f64>)> = Vec::with_capacity(2);
    for &(b, dx) in &rendered.weights {
        if dx == 0.0 {
            continue;
        }
        let g: Vec<f64> = residual.iter().map(|r| weight * dx * r).collect();
        match entries.iter_mut().find(|(i, _)| *i == b) {
            Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
            None => entries.push((b, g)),
        }
    }
    SceneGradient { entries }
}

fn check_draw(cfg: &SdsConfig, draw: &Draw, sched: &VarianceSchedule, dim: usize) -> Result<()> {
    let (lo, hi) = cfg.t_range(sched);
    if draw.t < lo || draw.t > hi {
        return Err(Error::Index {
            index: draw.t,
            min: lo,
            max: hi,
        });
    }
    check_dim(dim, draw.noise.len())
}

/// Single-draw SDS estimator `w(t) (eps_hat(x_t; c) - eps) dx/dphi`.
pub fn sds_grad(
    scene: &Scene,
    view: CameraView,
    positive: &PromptEmbedding,
    world: &OracleWorld,
    sched: &VarianceSchedule,
    cfg: &SdsConfig,
    draw: &Draw,
) -> Result<SceneGradient> {
    check_dim(world.dim(), scene.dim())?;
    check_dim(world.modes().len(), positive.len())?;
    check_draw(cfg, draw, sched, scene.dim())?;
    let rendered = render(scene, view);
    let x_t = forward_sample(&rendered.x, draw.t, &draw.noise, sched)?;
    let ab = sched.alpha_bars()[draw.t];
    let eps_u = world.eps_at(world.unconditional(), &x_t, ab);
    let eps_c = world.eps_at(positive, &x_t, ab);
    let eps_hat = cfg_compose(&eps_u, &eps_c, cfg.guidance_scale - 1.0)?;
    let residual = sub(&eps_hat, &draw.noise);
    Ok(chain_rule(&rendered, &residual, cfg.loss_weight(draw.t, sched)))
}

/// Perp-neg composed prediction
/// `eps_u + scale * (d_pos - sum_i w_i perp(d_neg_i, d_pos))`.
pub fn perp_neg_eps(
    world: &OracleWorld,
    prompts: &ViewPrompts,
    x_t: &[f64],
    ab: f64,
    scale: f64,
) -> Result<Vec<f64>> {
    let eps_u = world.eps_at(world.unconditional(), x_t, ab);
    let d_pos = sub(&world.eps_at(&prompts.positive, x_t, ab), &eps_u);
    let mut bracket = d_pos.clone();
    for (emb, w) in &prompts.negatives {
        if *w < 0.0 {
            return Err(Error::param("neg_weights", format!("{w} is negative")));
        }
        check_dim(world.modes().len(), emb.len())?;
        let d_neg = sub(&world.eps_at(emb, x_t, ab), &eps_u);
        let perp = perpendicular_component(&d_neg, &d_pos)?;
        bracket.iter_mut().zip(&perp).for_each(|(b, p)| *b -= w * p);
    }
    Ok(eps_u.iter().zip(&bracket).map(|(u, b)| u + scale * b).collect())
}

/// Perp-neg SDS estimator for prompts already assembled for view `v`.
pub fn perp_neg_sds_grad_with(
    scene: &Scene,
    view: CameraView,
    prompts: &ViewPrompts,
    world: &OracleWorld,
    sched: &VarianceSchedule,
    cfg: &SdsConfig,
    draw: &Draw,
) -> Result<SceneGradient> {
    check_dim(world.dim(), scene.dim())?;
    check_dim(world.modes().len(), prompts.positive.len())?;
    check_draw(cfg, draw, sched, scene.dim())?;
    let rendered = render(scene, view);
    let x_t = forward_sample(&rendered.x, draw.t, &draw.noise, sched)?;
    let ab = sched.alpha_bars()[draw.t];
    let eps_hat = perp_neg_eps(world, prompts, &x_t, ab, cfg.guidance_scale)?;
    let residual = sub(&eps_hat, &draw.noise);
    Ok(chain_rule(&rendered, &residual, cfg.loss_weight(draw.t, sched)))
}

/// Perp-neg SDS estimator with view prompts assembled from `plan` at
/// perturbation `r_noise`.
#[allow(clippy::too_many_arguments)]
pub fn perp_neg_sds_grad(
    scene: &Scene,
    view: CameraView,
    plan: &ViewPromptPlan,
    r_noise: f64,
    world: &OracleWorld,
    sched: &VarianceSchedule,
    cfg: &SdsConfig,
    draw: &Draw,
) -> Result<SceneGradient> {
    let prompts = assemble_view_prompts(view, plan, r_noise)?;
    perp_neg_sds_grad_with(scene, view, &prompts, world, sched, cfg, draw)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationLog {
    pub iter: usize,
    pub azimuth: f64,
    pub t: usize,
    pub grad_norm: f64,
    pub janus_score: f64,
    pub assignments: Vec<usize>,
}

/// Fixed-step gradient descent on the scene.
///
/// Iteration `i` draws its camera, perturbation and `(t, eps)` samples from
/// the stream `(cfg.seed, i)`. Vanilla uses the sector's view prompt as the
/// positive; perp-neg assembles interpolated prompts from `plan`.
pub fn optimize(
    scene: &Scene,
    world: &OracleWorld,
    plan: &ViewPromptPlan,
    cfg: &SdsConfig,
    variant: DistillVariant,
    sched: &VarianceSchedule,
) -> Result<(Scene, Vec<IterationLog>)> {
    cfg.validate()?;
    plan.validate()?;
    check_dim(world.dim(), scene.dim())?;
    let mut scene = scene.clone();
    let mut log = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let mut rng = stream_rng(cfg.seed, iter as u64);
        let view = CameraView::new(rng.random_range(0.0..TAU));
        let r_noise = if plan.r_perturb_delta > 0.0 {
            rng.random_range(-plan.r_perturb_delta..=plan.r_perturb_delta)
        } else {
            0.0
        };
        let draws = iteration_draws(&mut rng, cfg, sched, scene.dim());

        let mut grad = SceneGradient::default();
        let scale = 1.0 / cfg.draws as f64;
        match variant {
            DistillVariant::Vanilla => {
                let positive = plan.anchor(view.sector());
                for d in &draws {
                    grad.accumulate(sds_grad(&scene, view, positive, world, sched, cfg, d)?, scale);
                }
            }
            DistillVariant::PerpNeg => {
                let prompts = assemble_view_prompts(view, plan, r_noise)?;
                for d in &draws {
                    let g = perp_neg_sds_grad_with(&scene, view, &prompts, world, sched, cfg, d)?;
                    grad.accumulate(g, scale);
                }
            }
        }

        scene.apply(&grad, cfg.step_size);
        let max_norm = scene.max_norm();
        if !(max_norm <= DIVERGENCE_LIMIT) {
            return Err(Error::Divergence {
                iteration: iter,
                norm: max_norm,
            });
        }
        let assignments = bin_assignments(&scene, world);
        log.push(IterationLog {
            iter,
            azimuth: view.azimuth(),
            t: draws[0].t,
            grad_norm: grad.norm(),
            janus_score: score_assignments(&scene, world, &assignments),
            assignments,
        });
    }
    Ok((scene, log))
}

fn bin_assignments(scene: &Scene, world: &OracleWorld) -> Vec<usize> {
    scene.bins().iter().map(|b| world.classify_index(b)).collect()
}

fn score_assignments(scene: &Scene, world: &OracleWorld, assignments: &[usize]) -> f64 {
    let correct = assignments
        .iter()
        .enumerate()
        .filter(|(b, k)| {
            let sector = CameraView::new(scene.bin_azimuth(*b)).sector();
            world.modes()[**k].id == sector.mode_id()
        })
        .count();
    correct as f64 / scene.len() as f64
}

/// Fraction of bins whose feature classifies to the mode of its own view sector.
pub fn janus_score(scene: &Scene, world: &OracleWorld) -> Result<f64> {
    check_dim(world.dim(), scene.dim())?;
    for s in [Sector::Front, Sector::Side, Sector::Back] {
        if world.mode_index(s.mode_id()).is_none() {
            return Err(Error::Lookup {
                kind: "mode",
                name: s.mode_id().to_string(),
            });
        }
    }
    let correct = scene
        .bins()
        .iter()
        .enumerate()
        .filter(|(b, x)| {
            let sector = CameraView::new(scene.bin_azimuth(*b)).sector();
            classify_mode(world, x) == sector.mode_id()
        })
        .count();
    Ok(correct as f64 / scene.len() as f64)
}
