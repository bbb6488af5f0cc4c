use std::collections::BTreeMap;
use std::path::Path;

use perpneg::distill::{
    janus_score, optimize, pair_run, view_accuracy, DistillVariant, PlanWeights, Scene, SdsConfig,
    SectorPair, ViewPromptPlan, WeightFn,
};
use perpneg::sampler::{mode_proportions, success_report, SuccessReport};
use perpneg::{generate, ComposerKind, OracleWorld, PromptRef, SampleRun, VarianceSchedule};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{negative_magnitudes, ExperimentKind, Loaded, NegativeSpec, SamplingParams};
use crate::error::CliError;
use crate::output::{num, table, OutputDir};

/// What an experiment printed and wrote.
#[derive(Debug, Clone)]
pub struct Summary {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub table: String,
    pub files: Vec<std::path::PathBuf>,
}

pub fn run_experiment(loaded: &Loaded, out: &Path) -> Result<Summary, CliError> {
    let hash = loaded.hash();
    let mut dir = OutputDir::create(out, &hash)?;
    let sched = VarianceSchedule::standard();
    let kind = loaded.config.kind;
    let table = match kind {
        ExperimentKind::Sample => sample(loaded, &sched, &mut dir)?,
        ExperimentKind::Compare => compare(loaded, &sched, &mut dir)?,
        ExperimentKind::Ablate => ablate(loaded, &sched, &mut dir)?,
        ExperimentKind::Interp => interp(loaded, &sched, &mut dir)?,
        ExperimentKind::Distill => distill_runs(loaded, &sched, &mut dir)?,
    };
    dir.text("summary.txt", &table)?;
    Ok(Summary {
        kind,
        config_hash: hash,
        table,
        files: dir.written().to_vec(),
    })
}

fn runs_for(
    s: &SamplingParams,
    composer: ComposerKind,
    positive: PromptRef,
    negatives: &[(String, f64)],
    trajectories: bool,
) -> Vec<SampleRun> {
    s.seeds
        .iter()
        .map(|seed| {
            let mut run = SampleRun::new(seed, s.samples_per_seed, composer, positive.clone());
            run.steps = s.steps;
            run.guidance_scale = s.guidance_scale;
            run.w_pos = s.w_pos;
            run.eta = s.eta;
            run.capture_trajectory = trajectories;
            for (label, w) in negatives {
                run = run.with_negative(PromptRef::label(label.clone()), *w);
            }
            run
        })
        .collect()
}

fn lib(run: &str) -> impl Fn(perpneg::Error) -> CliError + '_ {
    move |e| CliError::from_lib(run, e)
}

fn generate_all(world: &OracleWorld, runs: &[SampleRun], sched: &VarianceSchedule) -> Result<Vec<perpneg::sampler::Generated>, CliError> {
    runs.iter()
        .map(|r| generate(world, r, sched).map_err(lib(&r.combination())))
        .collect()
}

fn proportions(world: &OracleWorld, samples: &[Vec<f64>]) -> BTreeMap<String, f64> {
    world
        .modes()
        .iter()
        .zip(mode_proportions(world, samples))
        .map(|(m, p)| (m.id.clone(), p))
        .collect()
}

fn x_columns(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("x{i}")).collect()
}

#[derive(Serialize)]
struct SampleResult<'a> {
    composer: ComposerKind,
    combination: String,
    mode_proportions: BTreeMap<String, f64>,
    report: &'a SuccessReport,
}

fn sample(loaded: &Loaded, sched: &VarianceSchedule, dir: &mut OutputDir) -> Result<String, CliError> {
    let p = loaded.config.sample.as_ref().expect("validated");
    let world = &loaded.world;
    let negs = negative_magnitudes(&p.negatives);
    let runs = runs_for(&loaded.config.sampling, p.composer, PromptRef::label(p.positive.clone()), &negs, p.trajectories);
    let generated = generate_all(world, &runs, sched)?;
    let samples: Vec<Vec<Vec<f64>>> = generated.iter().map(|g| g.samples.clone()).collect();
    let report = success_report(world, &runs, &samples, &p.target).map_err(lib("sample"))?;

    let mut header = vec!["run_id".to_string(), "sample_idx".to_string()];
    header.extend(x_columns(world.dim()));
    header.push("mode".into());
    let mut rows = Vec::new();
    for ((run, out), run_samples) in runs.iter().zip(&report.runs).zip(&samples) {
        for (i, x) in run_samples.iter().enumerate() {
            let mut r = vec![format!("seed{}", run.seed), i.to_string()];
            r.extend(x.iter().map(|v| num(*v)));
            r.push(out.assignments[i].clone());
            rows.push(r);
        }
    }
    dir.csv("samples.csv", &header, &rows)?;

    if p.trajectories {
        let mut header = vec!["run_id".to_string(), "sample_idx".into(), "step".into(), "t".into()];
        header.extend(x_columns(world.dim()));
        let mut rows = Vec::new();
        for (run, g) in runs.iter().zip(&generated) {
            for (i, tr) in g.trajectories.as_ref().expect("captured").iter().enumerate() {
                for pt in tr {
                    let mut r = vec![format!("seed{}", run.seed), i.to_string(), pt.step.to_string(), pt.t.to_string()];
                    r.extend(pt.x.iter().map(|v| num(*v)));
                    rows.push(r);
                }
            }
        }
        dir.csv("trajectories.csv", &header, &rows)?;
    }

    let all: Vec<Vec<f64>> = samples.concat();
    let combination = runs[0].combination();
    dir.json(
        "report.json",
        "sample",
        &SampleResult {
            composer: p.composer,
            combination: combination.clone(),
            mode_proportions: proportions(world, &all),
            report: &report,
        },
    )?;
    let mut rows: Vec<Vec<String>> = report
        .runs
        .iter()
        .map(|o| vec![format!("seed {}", o.seed), o.successes.to_string(), o.n.to_string(), format!("{:.3}", o.success_rate)])
        .collect();
    rows.push(vec!["total".into(), report.successes.to_string(), report.n.to_string(), format!("{:.3}", report.success_rate)]);
    Ok(format!(
        "{} {} -> target {}\n{}",
        p.composer.name(),
        combination,
        p.target,
        table(&["run", "successes", "n", "rate"], &rows)
    ))
}

#[derive(Serialize)]
struct ComboResult {
    composer: ComposerKind,
    combination: String,
    successes: usize,
    n: usize,
    success_rate: f64,
    per_seed: Vec<(u64, usize)>,
    mode_proportions: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct ComposerTotal {
    successes: usize,
    n: usize,
    success_rate: f64,
}

#[derive(Serialize)]
struct CompareResult {
    target: String,
    combinations: Vec<ComboResult>,
    by_composer: BTreeMap<String, ComposerTotal>,
}

/// Runs every (composer, negative set) cell over the configured seeds.
pub fn compare_cells(
    world: &OracleWorld,
    sampling: &SamplingParams,
    positive: &str,
    target: &str,
    composers: &[ComposerKind],
    negative_sets: &[Vec<NegativeSpec>],
    sched: &VarianceSchedule,
) -> Result<Vec<(ComposerKind, String, SuccessReport, BTreeMap<String, f64>)>, CliError> {
    let mut cells = Vec::new();
    for &composer in composers {
        let sets: Vec<Vec<(String, f64)>> = match composer {
            ComposerKind::Cfg => vec![vec![]],
            _ => negative_sets.iter().map(|s| negative_magnitudes(s)).collect(),
        };
        for negs in sets {
            let runs = runs_for(sampling, composer, PromptRef::label(positive), &negs, false);
            let generated = generate_all(world, &runs, sched)?;
            let samples: Vec<Vec<Vec<f64>>> = generated.into_iter().map(|g| g.samples).collect();
            let report = success_report(world, &runs, &samples, target).map_err(lib("compare"))?;
            let props = proportions(world, &samples.concat());
            cells.push((composer, runs[0].combination(), report, props));
        }
    }
    Ok(cells)
}

fn compare(loaded: &Loaded, sched: &VarianceSchedule, dir: &mut OutputDir) -> Result<String, CliError> {
    let p = loaded.config.compare.as_ref().expect("validated");
    let cells = compare_cells(
        &loaded.world,
        &loaded.config.sampling,
        &p.positive,
        &p.target,
        &p.composers,
        &p.negative_sets,
        sched,
    )?;

    let mut combos = Vec::new();
    let mut by_composer: BTreeMap<String, ComposerTotal> = BTreeMap::new();
    let mut csv_rows = Vec::new();
    for (composer, combination, report, props) in cells {
        for o in &report.runs {
            csv_rows.push(vec![
                composer.name().to_string(),
                combination.clone(),
                o.seed.to_string(),
                o.successes.to_string(),
                o.n.to_string(),
            ]);
        }
        let total = by_composer.entry(composer.name().to_string()).or_insert(ComposerTotal {
            successes: 0,
            n: 0,
            success_rate: 0.0,
        });
        total.successes += report.successes;
        total.n += report.n;
        combos.push(ComboResult {
            composer,
            combination,
            successes: report.successes,
            n: report.n,
            success_rate: report.success_rate,
            per_seed: report.runs.iter().map(|o| (o.seed, o.successes)).collect(),
            mode_proportions: props,
        });
    }
    for t in by_composer.values_mut() {
        t.success_rate = t.successes as f64 / t.n as f64;
    }
    dir.csv(
        "per_seed.csv",
        &["composer", "combination", "seed", "successes", "n"].map(String::from),
        &csv_rows,
    )?;
    let rows: Vec<Vec<String>> = combos
        .iter()
        .map(|c| {
            vec![
                c.composer.name().to_string(),
                c.combination.clone(),
                c.successes.to_string(),
                c.n.to_string(),
                format!("{:.3}", c.success_rate),
            ]
        })
        .chain(by_composer.iter().map(|(name, t)| {
            vec![name.clone(), "all".into(), t.successes.to_string(), t.n.to_string(), format!("{:.3}", t.success_rate)]
        }))
        .collect();
    dir.json(
        "report.json",
        "compare",
        &CompareResult {
            target: p.target.clone(),
            combinations: combos,
            by_composer,
        },
    )?;
    Ok(format!(
        "target {}\n{}",
        p.target,
        table(&["composer", "combination", "successes", "n", "rate"], &rows)
    ))
}

#[derive(Serialize)]
struct AblateRow {
    composer: ComposerKind,
    weight: f64,
    success_rate: f64,
    mode_proportions: BTreeMap<String, f64>,
}

fn ablate(loaded: &Loaded, sched: &VarianceSchedule, dir: &mut OutputDir) -> Result<String, CliError> {
    let p = loaded.config.ablate.as_ref().expect("validated");
    let world = &loaded.world;
    let mut results = Vec::new();
    for &composer in &p.composers {
        for &w in &p.weights {
            let negs = vec![(p.negative.clone(), w.abs())];
            let runs = runs_for(&loaded.config.sampling, composer, PromptRef::label(p.positive.clone()), &negs, false);
            let generated = generate_all(world, &runs, sched)?;
            let samples: Vec<Vec<Vec<f64>>> = generated.into_iter().map(|g| g.samples).collect();
            let report = success_report(world, &runs, &samples, &p.target).map_err(lib("ablate"))?;
            results.push(AblateRow {
                composer,
                weight: w.abs(),
                success_rate: report.success_rate,
                mode_proportions: proportions(world, &samples.concat()),
            });
        }
    }
    let ids: Vec<String> = world.modes().iter().map(|m| m.id.clone()).collect();
    let mut header = vec!["composer".to_string(), "weight".into(), "success_rate".into()];
    header.extend(ids.iter().cloned());
    let csv_rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let mut row = vec![r.composer.name().to_string(), num(r.weight), num(r.success_rate)];
            row.extend(ids.iter().map(|id| num(r.mode_proportions[id])));
            row
        })
        .collect();
    dir.csv("ablation.csv", &header, &csv_rows)?;
    dir.json("report.json", "ablate", &results)?;
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let mut row = vec![r.composer.name().to_string(), num(r.weight), format!("{:.3}", r.success_rate)];
            row.extend(ids.iter().map(|id| format!("{:.3}", r.mode_proportions[id])));
            row
        })
        .collect();
    let mut head = vec!["composer", "w_neg", "rate"];
    head.extend(ids.iter().map(String::as_str));
    Ok(format!(
        "+{} -{} -> target {}\n{}",
        p.positive,
        p.negative,
        p.target,
        table(&head, &rows)
    ))
}

/// `0, stride, 2 stride, ...` up to and including 1.
pub fn interp_points(stride: f64) -> Vec<f64> {
    let n = (1.0 / stride).round() as usize;
    let mut pts: Vec<f64> = (0..=n).map(|i| (i as f64 * stride).min(1.0)).collect();
    if *pts.last().unwrap() < 1.0 {
        pts.push(1.0);
    }
    pts
}

/// One interpolation point of the sweep curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub pair: SectorPair,
    pub r: f64,
    /// Fraction of samples at the pair's `r = 1` anchor view.
    pub anchor_fraction: f64,
    pub accuracy: f64,
    pub mode_proportions: BTreeMap<String, f64>,
}

pub fn pair_curve(
    world: &OracleWorld,
    plan: &ViewPromptPlan,
    pair: SectorPair,
    points: &[f64],
    sampling: &SamplingParams,
    samples: usize,
    sched: &VarianceSchedule,
) -> Result<Vec<CurvePoint>, CliError> {
    let (one, _) = pair.anchors();
    points
        .iter()
        .map(|&r| {
            let mut run = pair_run(plan, pair, r, sampling.seeds.start, samples).map_err(lib("interp"))?;
            run.steps = sampling.steps;
            run.guidance_scale = sampling.guidance_scale;
            run.w_pos = sampling.w_pos;
            run.eta = sampling.eta;
            let g = generate(world, &run, sched).map_err(lib("interp"))?;
            Ok(CurvePoint {
                pair,
                r,
                anchor_fraction: view_accuracy(world, &g.samples, &[one]),
                accuracy: view_accuracy(world, &g.samples, &pair.targets(r)),
                mode_proportions: proportions(world, &g.samples),
            })
        })
        .collect()
}

fn pair_fns(plan: &mut PlanWeights, pair: SectorPair) -> (&mut WeightFn, &mut WeightFn) {
    match pair {
        SectorPair::FrontSide => (&mut plan.f_fs, &mut plan.f_sf),
        SectorPair::SideBack => (&mut plan.f_sb, &mut plan.f_fsb),
    }
}

#[derive(Serialize)]
struct InterpResult {
    plan: PlanWeights,
    monotone: BTreeMap<String, bool>,
    curve: Vec<CurvePoint>,
}

fn interp(loaded: &Loaded, sched: &VarianceSchedule, dir: &mut OutputDir) -> Result<String, CliError> {
    let p = loaded.config.interp.as_ref().expect("validated");
    let world = &loaded.world;
    let sampling = &loaded.config.sampling;
    let points = interp_points(p.stride);
    let mut plan_weights = p.plan;

    if let Some(grid) = &p.grid {
        let mut fns = Vec::new();
        for &a in &grid.a {
            for &b in &grid.b {
                for &c in &grid.c {
                    fns.push(WeightFn { a, b, c });
                }
            }
        }
        let mut sweep_rows = Vec::new();
        for &pair in &p.pairs {
            let candidates: Vec<(WeightFn, WeightFn)> =
                fns.iter().flat_map(|f| fns.iter().map(move |g| (*f, *g))).collect();
            let scores: Vec<f64> = candidates
                .par_iter()
                .map(|(f, g)| {
                    let mut w = plan_weights;
                    let (x, y) = pair_fns(&mut w, pair);
                    *x = *f;
                    *y = *g;
                    let plan = ViewPromptPlan::from_world(world, w).map_err(lib("interp"))?;
                    let curve = pair_curve(world, &plan, pair, &points, sampling, p.grid_samples, sched)?;
                    Ok(curve.iter().map(|c| c.accuracy).sum::<f64>() / curve.len() as f64)
                })
                .collect::<Result<_, CliError>>()?;
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = i;
                }
                let (f, g) = candidates[i];
                sweep_rows.push(vec![
                    pair_name(pair).to_string(),
                    num(f.a), num(f.b), num(f.c),
                    num(g.a), num(g.b), num(g.c),
                    num(*s),
                ]);
            }
            let (x, y) = pair_fns(&mut plan_weights, pair);
            *x = candidates[best].0;
            *y = candidates[best].1;
        }
        dir.csv(
            "sweep.csv",
            &["pair", "f1_a", "f1_b", "f1_c", "f2_a", "f2_b", "f2_c", "mean_accuracy"].map(String::from),
            &sweep_rows,
        )?;
    }

    let plan = ViewPromptPlan::from_world(world, plan_weights).map_err(lib("interp"))?;
    let mut curve = Vec::new();
    let mut monotone = BTreeMap::new();
    for &pair in &p.pairs {
        let c = pair_curve(world, &plan, pair, &points, sampling, p.samples, sched)?;
        monotone.insert(pair_name(pair).to_string(), is_monotone(&c, 0.05));
        curve.extend(c);
    }
    let ids: Vec<String> = world.modes().iter().map(|m| m.id.clone()).collect();
    let mut header = vec!["pair".to_string(), "r".into(), "anchor_fraction".into(), "accuracy".into()];
    header.extend(ids.iter().cloned());
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|c| {
            let mut row = vec![pair_name(c.pair).to_string(), num(c.r), num(c.anchor_fraction), num(c.accuracy)];
            row.extend(ids.iter().map(|id| num(c.mode_proportions[id])));
            row
        })
        .collect();
    dir.csv("curve.csv", &header, &rows)?;
    let table_rows: Vec<Vec<String>> = curve
        .iter()
        .map(|c| {
            vec![
                pair_name(c.pair).to_string(),
                format!("{:.2}", c.r),
                format!("{:.3}", c.anchor_fraction),
                format!("{:.3}", c.accuracy),
            ]
        })
        .collect();
    let result = InterpResult {
        plan: plan_weights,
        monotone,
        curve,
    };
    dir.json("report.json", "interp", &result)?;
    let flags: Vec<String> = result.monotone.iter().map(|(k, v)| format!("{k}: {}", if *v { "monotone" } else { "NOT monotone" })).collect();
    Ok(format!(
        "{}{}\n",
        table(&["pair", "r", "anchor", "accuracy"], &table_rows),
        flags.join(", ")
    ))
}

/// Anchor fraction non-decreasing in `r` up to `tol`.
pub fn is_monotone(curve: &[CurvePoint], tol: f64) -> bool {
    curve.windows(2).all(|w| w[1].anchor_fraction >= w[0].anchor_fraction - tol)
}

fn pair_name(pair: SectorPair) -> &'static str {
    match pair {
        SectorPair::FrontSide => "front_side",
        SectorPair::SideBack => "side_back",
    }
}

fn variant_name(v: DistillVariant) -> &'static str {
    match v {
        DistillVariant::Vanilla => "vanilla",
        DistillVariant::PerpNeg => "perp_neg",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DistillRun {
    pub variant: DistillVariant,
    pub seed: u64,
    pub janus_score: f64,
}

#[derive(Serialize)]
struct SceneDump<'a> {
    variant: DistillVariant,
    seed: u64,
    janus_score: f64,
    bins: &'a [Vec<f64>],
    assignments: Vec<String>,
}

#[derive(Serialize)]
struct DistillResult {
    runs: Vec<DistillRun>,
    median: BTreeMap<String, f64>,
    perp_neg_wins: Option<usize>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn distill_runs(loaded: &Loaded, sched: &VarianceSchedule, dir: &mut OutputDir) -> Result<String, CliError> {
    let p = loaded.config.distill.as_ref().expect("validated");
    let world = &loaded.world;
    let plan = ViewPromptPlan::from_world(world, p.plan).map_err(lib("distill"))?;
    let jobs: Vec<(DistillVariant, u64)> = p
        .variants
        .iter()
        .flat_map(|v| p.seeds.iter().map(move |s| (*v, s)))
        .collect();
    let finished = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let name = format!("{}_seed{seed}", variant_name(variant));
            let scene = Scene::jittered(p.bins, &p.init_center, p.init_scale, seed).map_err(lib(&name))?;
            let cfg = SdsConfig { seed, ..p.sds.clone() };
            let (scene, log) = optimize(&scene, world, &plan, &cfg, variant, sched).map_err(|e| CliError::from_lib(&name, e))?;
            Ok((variant, seed, scene, log))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut runs = Vec::new();
    for (variant, seed, scene, log) in &finished {
        let name = format!("{}_seed{seed}", variant_name(*variant));
        let rows: Vec<Vec<String>> = log
            .iter()
            .map(|l| vec![l.iter.to_string(), num(l.azimuth), l.t.to_string(), num(l.grad_norm), num(l.janus_score)])
            .collect();
        dir.csv(
            &format!("log_{name}.csv"),
            &["iter", "azimuth", "t", "grad_norm", "janus_score"].map(String::from),
            &rows,
        )?;
        let score = janus_score(scene, world).map_err(lib(&name))?;
        dir.json(
            &format!("scene_{name}.json"),
            "distill",
            &SceneDump {
                variant: *variant,
                seed: *seed,
                janus_score: score,
                bins: scene.bins(),
                assignments: scene
                    .bins()
                    .iter()
                    .map(|b| perpneg::classify_mode(world, b).to_string())
                    .collect(),
            },
        )?;
        runs.push(DistillRun {
            variant: *variant,
            seed: *seed,
            janus_score: score,
        });
    }

    let mut median_by = BTreeMap::new();
    for &v in &p.variants {
        let scores: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| r.janus_score).collect();
        median_by.insert(variant_name(v).to_string(), median(&scores));
    }
    let score_of = |v: DistillVariant, s: u64| runs.iter().find(|r| r.variant == v && r.seed == s).map(|r| r.janus_score);
    let both = p.variants.contains(&DistillVariant::Vanilla) && p.variants.contains(&DistillVariant::PerpNeg);
    let wins = both.then(|| {
        p.seeds
            .iter()
            .filter(|&s| score_of(DistillVariant::PerpNeg, s) > score_of(DistillVariant::Vanilla, s))
            .count()
    });

    let mut head = vec!["seed".to_string()];
    head.extend(p.variants.iter().map(|v| variant_name(*v).to_string()));
    let mut rows: Vec<Vec<String>> = p
        .seeds
        .iter()
        .map(|s| {
            let mut row = vec![s.to_string()];
            row.extend(p.variants.iter().map(|v| format!("{:.3}", score_of(*v, s).unwrap())));
            row
        })
        .collect();
    let mut med = vec!["median".to_string()];
    med.extend(p.variants.iter().map(|v| format!("{:.3}", median_by[variant_name(*v)])));
    rows.push(med);
    dir.json(
        "report.json",
        "distill",
        &DistillResult {
            runs,
            median: median_by,
            perp_neg_wins: wins,
        },
    )?;
    let head_ref: Vec<&str> = head.iter().map(String::as_str).collect();
    let mut text = format!("janus score, {} bins\n{}", p.bins, table(&head_ref, &rows));
    if let Some(w) = wins {
        text.push_str(&format!("perp_neg wins on {w} of {} seeds\n", p.seeds.count));
    }
    Ok(text)
}
