//! Reverse-process generation with pluggable composers and the synthetic
//! success-rate evaluation.
//!
//! Every sample draws its randomness from its own ChaCha stream keyed by
//! `(seed, sample index)`, so parallel and serial generation agree bit for bit.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::{
    cfg_compose, naive_negation_compose, perp_neg_compose, ComposerConfig, ComposerKind,
};
use crate::error::{Error, Result};
use crate::oracle::{EpsPrediction, OracleWorld, PromptEmbedding};
use crate::schedule::{ddim_step, VarianceSchedule};

/// Deterministic per-(seed, index) random stream.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptRef {
    Label(String),
    Embedding(PromptEmbedding),
}

impl PromptRef {
    pub fn label(s: impl Into<String>) -> Self {
        PromptRef::Label(s.into())
    }

    fn resolve<'a>(&'a self, world: &'a OracleWorld) -> Result<&'a PromptEmbedding> {
        match self {
            PromptRef::Label(l) => world.embedding(l),
            PromptRef::Embedding(e) => {
                crate::error::check_dim(world.modes().len(), e.len())?;
                Ok(e)
            }
        }
    }
}

impl fmt::Display for PromptRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptRef::Label(l) => f.write_str(l),
            PromptRef::Embedding(e) => {
                let parts: Vec<String> = e.iter().map(|w| format!("{w:.3}")).collect();
                write!(f, "[{}]", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativePrompt {
    pub prompt: PromptRef,
    /// Magnitude; subtraction is applied by the composer.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub seed: u64,
    pub n: usize,
    pub steps: usize,
    pub composer: ComposerKind,
    /// Weight on the positive delta: cfg uses `tau = scale - 1`, perp-neg
    /// multiplies its whole guided term by `scale`, and naive negation
    /// subtracts each negative delta with weight `scale * weight` so both
    /// negation composers remove the same magnitude.
    pub guidance_scale: f64,
    pub w_pos: f64,
    pub positive: PromptRef,
    pub negatives: Vec<NegativePrompt>,
    pub eta: f64,
    pub capture_trajectory: bool,
}

impl SampleRun {
    /// 50 DDIM steps, scale 7.5, `w_pos = 1`, deterministic DDIM.
    pub fn new(seed: u64, n: usize, composer: ComposerKind, positive: PromptRef) -> Self {
        Self {
            seed,
            n,
            steps: 50,
            composer,
            guidance_scale: 7.5,
            w_pos: 1.0,
            positive,
            negatives: Vec::new(),
            eta: 0.0,
            capture_trajectory: false,
        }
    }

    pub fn with_negative(mut self, prompt: PromptRef, weight: f64) -> Self {
        self.negatives.push(NegativePrompt { prompt, weight });
        self
    }

    pub fn with_guidance(mut self, scale: f64) -> Self {
        self.guidance_scale = scale;
        self
    }

    pub fn validate(&self, sched: &VarianceSchedule) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("n", "sample count must be at least 1"));
        }
        if self.steps == 0 || self.steps > sched.num_steps() {
            return Err(Error::param(
                "steps",
                format!("{} must be in [1, {}]", self.steps, sched.num_steps()),
            ));
        }
        if !(self.guidance_scale >= 1.0 && self.guidance_scale.is_finite()) {
            return Err(Error::param(
                "guidance_scale",
                format!("{} must be >= 1", self.guidance_scale),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::param("eta", format!("{} not in [0, 1]", self.eta)));
        }
        self.composer_config().validate()
    }

    pub fn composer_config(&self) -> ComposerConfig {
        ComposerConfig {
            guidance: match self.composer {
                ComposerKind::PerpNeg => self.guidance_scale,
                ComposerKind::Cfg | ComposerKind::NaiveNegation => self.guidance_scale - 1.0,
            },
            w_pos: self.w_pos,
            neg_weights: self
                .negatives
                .iter()
                .map(|n| match self.composer {
                    ComposerKind::NaiveNegation => self.guidance_scale * n.weight,
                    ComposerKind::Cfg | ComposerKind::PerpNeg => n.weight,
                })
                .collect(),
        }
    }

    /// Human-readable `positive | -neg1 -neg2` key.
    pub fn combination(&self) -> String {
        let mut key = format!("+{}", self.positive);
        if self.negatives.is_empty() {
            key.push_str(" | none");
        } else {
            key.push_str(" |");
            for n in &self.negatives {
                key.push_str(&format!(" -{}", n.prompt));
            }
        }
        key
    }
}

/// Positive/negative prompts resolved against one world, with the
/// composer settings applied at every step.
pub struct ResolvedPrompts<'a> {
    pub composer: ComposerKind,
    pub config: ComposerConfig,
    pub positive: &'a PromptEmbedding,
    pub negatives: Vec<&'a PromptEmbedding>,
}

impl<'a> ResolvedPrompts<'a> {
    pub fn new(world: &'a OracleWorld, run: &'a SampleRun) -> Result<Self> {
        Ok(Self {
            composer: run.composer,
            config: run.composer_config(),
            positive: run.positive.resolve(world)?,
            negatives: run
                .negatives
                .iter()
                .map(|n| n.prompt.resolve(world))
                .collect::<Result<_>>()?,
        })
    }

    /// Composed noise prediction at cumulative product `ab`.
    pub fn eps(&self, world: &OracleWorld, x: &[f64], ab: f64) -> Result<EpsPrediction> {
        let eps_u = world.eps_at(world.unconditional(), x, ab);
        let eps_pos = world.eps_at(self.positive, x, ab);
        let negs: Vec<EpsPrediction> = self
            .negatives
            .iter()
            .map(|e| EpsPrediction(world.eps_at(e, x, ab)))
            .collect();
        match self.composer {
            ComposerKind::Cfg => cfg_compose(&eps_u, &eps_pos, self.config.guidance),
            ComposerKind::NaiveNegation => naive_negation_compose(&eps_u, &eps_pos, &negs, &self.config),
            ComposerKind::PerpNeg => perp_neg_compose(&eps_u, &eps_pos, &negs, &self.config),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub t: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub samples: Vec<Vec<f64>>,
    /// One trajectory per sample when capture is on; entry 0 is the
    /// initialization at `t = T`.
    pub trajectories: Option<Vec<Vec<TrajectoryPoint>>>,
}

/// One reverse chain for sample `index` of `run`.
pub fn generate_one(
    world: &OracleWorld,
    prompts: &ResolvedPrompts<'_>,
    run: &SampleRun,
    timesteps: &[usize],
    index: u64,
    sched: &VarianceSchedule,
) -> Result<(Vec<f64>, Option<Vec<TrajectoryPoint>>)> {
    let mut rng = stream_rng(run.seed, index);
    let mut x = standard_normal(&mut rng, world.dim());
    let mut traj = run.capture_trajectory.then(|| {
        vec![TrajectoryPoint {
            step: 0,
            t: timesteps[0],
            x: x.clone(),
        }]
    });
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let ab = sched.alpha_bars()[t];
        let eps = prompts.eps(world, &x, ab)?;
        let noise = if run.eta > 0.0 {
            standard_normal(&mut rng, world.dim())
        } else {
            Vec::new()
        };
        x = ddim_step(&x, &eps, t, t_prev, run.eta, &noise, sched)?;
        if let Some(tr) = traj.as_mut() {
            tr.push(TrajectoryPoint {
                step: i + 1,
                t: t_prev,
                x: x.clone(),
            });
        }
    }
    Ok((x, traj))
}

fn generate_impl(
    world: &OracleWorld,
    run: &SampleRun,
    sched: &VarianceSchedule,
    parallel: bool,
) -> Result<Generated> {
    run.validate(sched)?;
    let prompts = ResolvedPrompts::new(world, run)?;
    let timesteps = sched.ddim_timesteps(run.steps)?;
    let one = |i: usize| generate_one(world, &prompts, run, &timesteps, i as u64, sched);
    let results: Vec<_> = if parallel {
        (0..run.n).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..run.n).map(one).collect::<Result<_>>()?
    };
    let (samples, trajs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(Generated {
        samples,
        trajectories: run
            .capture_trajectory
            .then(|| trajs.into_iter().map(|t| t.unwrap_or_default()).collect()),
    })
}

/// Full reverse chains from standard-normal initialization, in parallel.
pub fn generate(world: &OracleWorld, run: &SampleRun, sched: &VarianceSchedule) -> Result<Generated> {
    generate_impl(world, run, sched, true)
}

pub fn generate_serial(world: &OracleWorld, run: &SampleRun, sched: &VarianceSchedule) -> Result<Generated> {
    generate_impl(world, run, sched, false)
}

/// Mode id with the largest clean likelihood at `x`; ties go to the mode
/// listed first in the world.
pub fn classify_mode<'a>(world: &'a OracleWorld, x: &[f64]) -> &'a str {
    &world.modes()[world.classify_index(x)].id
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub composer: ComposerKind,
    pub combination: String,
    pub assignments: Vec<String>,
    pub successes: usize,
    pub n: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboStat {
    pub successes: usize,
    pub n: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub target: String,
    pub runs: Vec<RunOutcome>,
    pub by_combination: BTreeMap<String, ComboStat>,
    pub successes: usize,
    pub n: usize,
    pub success_rate: f64,
}

/// Generates every run and scores the fraction of samples landing in `target`.
pub fn success_table(
    world: &OracleWorld,
    runs: &[SampleRun],
    target: &str,
    sched: &VarianceSchedule,
) -> Result<SuccessReport> {
    check_target(world, runs, target)?;
    let samples = runs
        .iter()
        .map(|run| generate(world, run, sched).map(|g| g.samples))
        .collect::<Result<Vec<_>>>()?;
    success_report(world, runs, &samples, target)
}

fn check_target(world: &OracleWorld, runs: &[SampleRun], target: &str) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::param("runs", "empty run list"));
    }
    if world.mode_index(target).is_none() {
        return Err(Error::Lookup {
            kind: "mode",
            name: target.to_string(),
        });
    }
    Ok(())
}

/// Scores already generated terminal samples; `samples[i]` belongs to `runs[i]`.
pub fn success_report(
    world: &OracleWorld,
    runs: &[SampleRun],
    samples: &[Vec<Vec<f64>>],
    target: &str,
) -> Result<SuccessReport> {
    check_target(world, runs, target)?;
    crate::error::check_dim(runs.len(), samples.len())?;
    let outcomes: Vec<RunOutcome> = runs
        .iter()
        .zip(samples)
        .map(|(run, xs)| {
            let assignments: Vec<String> = xs.iter().map(|x| classify_mode(world, x).to_string()).collect();
            let successes = assignments.iter().filter(|a| *a == target).count();
            RunOutcome {
                seed: run.seed,
                composer: run.composer,
                combination: run.combination(),
                n: assignments.len(),
                success_rate: successes as f64 / assignments.len().max(1) as f64,
                assignments,
                successes,
            }
        })
        .collect();

    let mut by_combination: BTreeMap<String, ComboStat> = BTreeMap::new();
    for o in &outcomes {
        let stat = by_combination.entry(o.combination.clone()).or_insert(ComboStat {
            successes: 0,
            n: 0,
            success_rate: 0.0,
        });
        stat.successes += o.successes;
        stat.n += o.n;
    }
    for stat in by_combination.values_mut() {
        stat.success_rate = stat.successes as f64 / stat.n.max(1) as f64;
    }
    let successes = outcomes.iter().map(|o| o.successes).sum();
    let n = outcomes.iter().map(|o| o.n).sum::<usize>();
    Ok(SuccessReport {
        target: target.to_string(),
        runs: outcomes,
        by_combination,
        successes,
        n,
        success_rate: successes as f64 / n.max(1) as f64,
    })
}

/// Per-mode fraction of samples, in world mode order.
pub fn mode_proportions(world: &OracleWorld, samples: &[Vec<f64>]) -> Vec<f64> {
    let mut counts = vec![0usize; world.modes().len()];
    for x in samples {
        counts[world.classify_index(x)] += 1;
    }
    counts
        .into_iter()
        .map(|c| c as f64 / samples.len() as f64)
        .collect()
}
