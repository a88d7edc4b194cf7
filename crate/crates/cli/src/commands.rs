//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gormpo_core::data::{collect_offline, dequantize, make_ood, normalize, sparsify, split_trajectories, NormStats, OfflineDataset, OodBenchmark, Region};
use gormpo_core::density::{calibrate_threshold, percentile, AnyEstimator, DensityEstimator, EstimatorKind, LOG_DENSITY_FLOOR};
use gormpo_core::dynamics::DynamicsEnsemble;
use gormpo_core::guardian::{write_trace, Guardian, PenalizedModel, PenaltyConfig};
use gormpo_core::mdp::{ActionSpace, Env, PointMass, ToyWean};
use gormpo_core::ood_eval::{ddpm_noise_diagnostics, evaluate_detector, OodReport};
use gormpo_core::policy::{gormpo_train, select_lambda, EpochLog, Sac, SacActor, Stochastic, SweepRow, TrainOutcome};
use gormpo_core::rl_eval::{collect_episodes, episode_metrics, ood_visitation, EpisodeMetrics, ReturnStats};
use gormpo_core::theory::{run_suite, CheckKind};
use gormpo_core::{Container, SeedStream};
use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{EnvName, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::RunContext;

/// Expands `$body` once per environment with `$env` and `$behavior` bound.
macro_rules! with_env {
    ($cfg:expr, |$env:ident, $behavior:ident| $body:expr) => {
        match $cfg.env.name {
            EnvName::Toywean => {
                let $env = ToyWean::new($cfg.env.toywean.clone());
                let $behavior = $cfg.env.clinician.clone();
                $body
            }
            EnvName::Pointmass => {
                let $env = PointMass::new($cfg.env.pointmass.clone());
                let $behavior = $cfg.env.controller.clone();
                $body
            }
        }
    };
}

pub const DATASET: &str = "dataset.bin";
pub const SPARSE: &str = "sparse.bin";
pub const DYNAMICS: &str = "dynamics.bin";
pub const POLICY: &str = "policy.bin";
pub const OOD_INDEX: &str = "ood/index.json";
pub const OOD_METRICS: &str = "ood_metrics.csv";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const SWEEP: &str = "sweep.csv";

pub fn density_file(kind: EstimatorKind) -> String {
    format!("density_{kind}.bin")
}

fn input(ctx: &RunContext, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| ctx.path(default))
}

fn action_space(cfg: &RunConfig) -> ActionSpace {
    with_env!(cfg, |env, _b| env.meta().action_space)
}

/// Loads a dataset and z-scores it unless it already is.
fn load_normalized(cfg: &RunConfig, path: &Path) -> Result<OfflineDataset> {
    let ds = OfflineDataset::load(path)?;
    if ds.normalized {
        return Ok(ds);
    }
    Ok(normalize(&ds, cfg.data.reward_clip)?)
}

fn split(cfg: &RunConfig, ds: &OfflineDataset) -> Result<Vec<OfflineDataset>> {
    let (a, b, c) = cfg.data.split;
    Ok(split_trajectories(ds, &[a, b, c], cfg.data.split_seed)?)
}

fn stats_of(ds: &OfflineDataset) -> Result<&NormStats> {
    ds.norm_stats
        .as_ref()
        .ok_or_else(|| CliError::Invariant("dataset carries no normalization statistics".into()))
}

pub fn make_data(ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.config.clone();
    let ds = with_env!(cfg, |env, behavior| collect_offline(&env, &behavior, cfg.data.episodes, ctx.seed(), cfg.exec()))?;
    ctx.write_container(DATASET, ds.to_container())?;
    let returns: Vec<f64> = ds.trajectory_ranges().into_iter().map(|r| ds.rewards.slice(ndarray::s![r]).sum()).collect();
    let stats = ReturnStats::from_returns(returns);
    ctx.write_json(
        "dataset.json",
        &json!({
            "env": cfg.env.name,
            "trajectories": ds.n_trajectories(),
            "transitions": ds.len(),
            "obs_dim": ds.obs_dim(),
            "act_dim": ds.act_dim(),
            "behavior_return_mean": stats.mean,
            "behavior_return_std": stats.std,
        }),
    )?;
    println!("collected {} transitions in {} trajectories", ds.len(), ds.n_trajectories());
    Ok(())
}

/// Low-support box in raw action norm with rewards at or below the configured percentile.
pub fn unsafe_region(cfg: &RunConfig, ds: &OfflineDataset) -> Region {
    let rewards = ds.rewards.to_vec();
    Region {
        reward_min: rewards.iter().copied().fold(f64::INFINITY, f64::min),
        reward_max: percentile(&rewards, cfg.data.sparse.reward_percentile),
        anorm_min: cfg.data.sparse.action_range.0,
        anorm_max: cfg.data.sparse.action_range.1,
    }
}

pub fn make_sparse(ctx: &mut RunContext, data: &Option<PathBuf>) -> Result<()> {
    let path = input(ctx, data, DATASET);
    ctx.require(&path, "offline dataset")?;
    let ds = OfflineDataset::load(&path)?;
    if ds.normalized {
        return Err(CliError::Invariant("sparsification expects a raw dataset".into()));
    }
    let region = unsafe_region(&ctx.config, &ds);
    let (sparse, report) = sparsify(&ds, &region, ctx.config.data.sparse.drop_frac, ctx.seed())?;
    ctx.write_container(SPARSE, sparse.to_container())?;
    ctx.write_json("sparse.json", &json!({ "region": region, "report": report }))?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    println!(
        "dropped {} of {} trajectories ({} intersect the region)",
        report.n_dropped, report.n_trajectories, report.n_in_region
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub file: String,
    pub mu: f64,
    pub seed: u64,
    pub noise_std: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

fn benchmark_csv(b: &OodBenchmark) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend((0..b.inputs.ncols()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (row, &label) in b.inputs.rows().into_iter().zip(&b.labels) {
        let mut rec = vec![u8::from(label).to_string()];
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| CliError::Invariant(e.to_string()))
}

fn read_benchmark(path: &Path, entry: &BenchmarkEntry) -> Result<OodBenchmark> {
    let mut r = csv::Reader::from_path(path)?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = 0;
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| CliError::Invariant(format!("{}: {e}", path.display())));
        labels.push(parse(&rec[0])? != 0.0);
        width = rec.len() - 1;
        for field in rec.iter().skip(1) {
            values.push(parse(field)?);
        }
    }
    let inputs = Array2::from_shape_vec((labels.len(), width), values).map_err(|e| CliError::Invariant(e.to_string()))?;
    Ok(OodBenchmark {
        inputs,
        labels,
        shift_mu: entry.mu,
        noise_std: entry.noise_std,
    })
}

/// Shifts raw test trajectories, then z-scores with the dataset statistics.
pub fn make_ood_sets(ctx: &mut RunContext, data: &Option<PathBuf>, mus: &[f64]) -> Result<()> {
    let path = input(ctx, data, DATASET);
    ctx.require(&path, "offline dataset")?;
    let cfg = ctx.config.clone();
    let raw = OfflineDataset::load(&path)?;
    let raw = if raw.normalized { raw.denormalize()? } else { raw };
    let z = normalize(&raw, cfg.data.reward_clip)?;
    let test = split(&cfg, &raw)?.swap_remove(2);
    let n_traj = match cfg.ood.trajectories {
        0 => test.n_trajectories(),
        n => n,
    };
    let mus = if mus.is_empty() { cfg.ood.mus.clone() } else { mus.to_vec() };
    let root = SeedStream::new(ctx.seed());
    let mut index = Vec::new();
    for (i, &mu) in mus.iter().enumerate() {
        for s in 0..cfg.ood.seeds {
            let b = make_ood(&test, mu, n_traj, cfg.ood.noise_std, root.path(&[i as u64, s]).raw())?.normalized(stats_of(&z)?)?;
            let file = format!("ood/mu_{mu}_seed_{s}.csv");
            ctx.write_bytes(&file, &benchmark_csv(&b)?)?;
            index.push(BenchmarkEntry {
                file,
                mu,
                seed: s,
                noise_std: cfg.ood.noise_std,
                n_id: b.labels.len() - b.n_ood(),
                n_ood: b.n_ood(),
            });
        }
    }
    ctx.write_json(OOD_INDEX, &json!({ "benchmarks": index }))?;
    println!("wrote {} benchmarks from {n_traj} test trajectories", index.len());
    Ok(())
}

pub fn train_density(ctx: &mut RunContext, data: &Option<PathBuf>, kind: EstimatorKind) -> Result<()> {
    let path = input(ctx, data, DATASET);
    ctx.require(&path, "offline dataset")?;
    let cfg = ctx.config.clone();
    let z = load_normalized(&cfg, &path)?;
    let parts = split(&cfg, &z)?;
    let mut train = parts[0].pairs();
    let val = parts[1].pairs();
    let discrete = matches!(action_space(&cfg), ActionSpace::Discrete { .. });
    if discrete && cfg.estimator.dequantize {
        let half: Vec<f64> = stats_of(&z)?.act_std.iter().map(|s| 0.5 / s).collect();
        let start = z.obs_dim();
        let mut rng = SeedStream::new(ctx.seed()).child(1).rng();
        train = dequantize(&train, start..start + half.len(), &half, &mut rng);
    }
    let mut est = AnyEstimator::new(kind, train.ncols(), &cfg.estimator.configs());
    let fit = est.fit(&train, &val, ctx.seed())?;
    let calibration = calibrate_threshold(&mut est, &val)?;
    if let Some(w) = &calibration.warning {
        eprintln!("warning: {w}");
    }
    ctx.write_container(&density_file(kind), est.as_dyn().to_container())?;
    ctx.write_json(
        &format!("density_{kind}.json"),
        &json!({ "estimator": kind, "n_train": train.nrows(), "n_val": val.nrows(), "fit": fit, "calibration": calibration }),
    )?;
    println!("{kind}: τ = {:.4} on {} validation pairs", calibration.tau, val.nrows());
    Ok(())
}

fn load_index(ctx: &mut RunContext) -> Result<Vec<BenchmarkEntry>> {
    let path = ctx.path(OOD_INDEX);
    ctx.require(&path, "OOD benchmark index")?;
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(serde_json::from_value(v["benchmarks"].clone())?)
}

#[derive(Debug, Clone, Serialize)]
struct EstimatorSummary {
    estimator: EstimatorKind,
    auc_by_mu: BTreeMap<String, f64>,
    kendall_tau: f64,
    kendall_p: f64,
    min_tnr: f64,
}

pub fn eval_ood(ctx: &mut RunContext, only: Option<EstimatorKind>, mus: &[f64]) -> Result<()> {
    let index: Vec<BenchmarkEntry> = load_index(ctx)?.into_iter().filter(|e| mus.is_empty() || mus.contains(&e.mu)).collect();
    if index.is_empty() {
        return Err(CliError::Invariant("no benchmarks match the requested shifts".into()));
    }
    let kinds: Vec<EstimatorKind> = match only {
        Some(k) => vec![k],
        None => EstimatorKind::ALL.into_iter().filter(|&k| ctx.path(&density_file(k)).is_file()).collect(),
    };
    if kinds.is_empty() {
        return Err(CliError::MissingArtifact {
            path: ctx.path("density_<estimator>.bin"),
            what: "fitted density estimator",
        });
    }
    let mut benches = Vec::new();
    for e in &index {
        let path = ctx.path(&e.file);
        ctx.require(&path, "OOD benchmark")?;
        benches.push(read_benchmark(&path, e)?);
    }
    let exec = ctx.config.exec();
    let mut report = OodReport::default();
    let mut summaries = Vec::new();
    for kind in kinds {
        let path = ctx.path(&density_file(kind));
        ctx.require(&path, "fitted density estimator")?;
        let est = AnyEstimator::load(&path)?;
        for (e, b) in index.iter().zip(&benches) {
            report.rows.push(evaluate_detector(est.as_dyn(), b, e.seed, exec)?);
        }
        let rows: Vec<_> = report.rows_for(kind).collect();
        let mut auc_by_mu: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &rows {
            let slot = auc_by_mu.entry(format!("{}", r.mu)).or_default();
            slot.0 += r.auc;
            slot.1 += 1;
        }
        let trend = report.auc_trend(kind).ok();
        summaries.push(EstimatorSummary {
            estimator: kind,
            auc_by_mu: auc_by_mu.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            kendall_tau: trend.map_or(f64::NAN, |t| t.tau),
            kendall_p: trend.map_or(f64::NAN, |t| t.p_value),
            min_tnr: rows.iter().map(|r| r.tnr).fold(1.0, f64::min),
        });
        if kind == EstimatorKind::Ddpm {
            let (e, b) = index.iter().zip(&benches).max_by(|a, b| a.0.mu.total_cmp(&b.0.mu)).expect("non-empty");
            let id = b.inputs.select(Axis(0), &(0..b.labels.len()).filter(|&i| !b.labels[i]).collect::<Vec<_>>());
            let ood = b.inputs.select(Axis(0), &(0..b.labels.len()).filter(|&i| b.labels[i]).collect::<Vec<_>>());
            let diag = ddpm_noise_diagnostics(&est, &id, &ood, ctx.seed())?;
            ctx.write_json("ddpm_noise.json", &json!({ "mu": e.mu, "diagnostics": diag }))?;
        }
    }
    let mut bytes = Vec::new();
    report.write_csv(&mut bytes)?;
    ctx.write_bytes(OOD_METRICS, &bytes)?;
    ctx.write_json("ood_summary.json", &json!({ "estimators": summaries }))?;
    for s in &summaries {
        println!("{}: AUC by μ {:?}, Kendall τ {:.3} (p {:.2e}), min TNR {:.3}", s.estimator, s.auc_by_mu, s.kendall_tau, s.kendall_p, s.min_tnr);
    }
    Ok(())
}

pub fn train_dynamics(ctx: &mut RunContext, data: &Option<PathBuf>) -> Result<()> {
    let path = input(ctx, data, DATASET);
    ctx.require(&path, "offline dataset")?;
    let cfg = ctx.config.clone();
    let z = load_normalized(&cfg, &path)?;
    let (ens, report) = DynamicsEnsemble::fit(&z, cfg.dynamics.clone(), ctx.seed(), cfg.exec())?;
    ctx.write_container(DYNAMICS, ens.to_container())?;
    ctx.write_json("dynamics.json", &report)?;
    println!("elites {:?}, holdout MSE {:?}", report.elites, report.holdout_mse);
    Ok(())
}

/// Everything a policy run needs, loaded after all preconditions pass.
struct PolicyInputs {
    data: OfflineDataset,
    ensemble: DynamicsEnsemble,
    density: Option<AnyEstimator>,
}

fn policy_inputs(ctx: &mut RunContext, inputs: &crate::cli::Inputs, need_density: bool) -> Result<PolicyInputs> {
    let kind = inputs.estimator.unwrap_or(ctx.config.estimator.kind);
    let data = input(ctx, &inputs.data, DATASET);
    let dynamics = input(ctx, &inputs.dynamics, DYNAMICS);
    let density = input(ctx, &inputs.density, &density_file(kind));
    ctx.require(&data, "offline dataset")?;
    ctx.require(&dynamics, "dynamics checkpoint")?;
    if need_density {
        ctx.require(&density, "density checkpoint")?;
    }
    let data = load_normalized(&ctx.config, &data)?;
    let ensemble = DynamicsEnsemble::load(&dynamics)?;
    if ensemble.stats() != stats_of(&data)? {
        return Err(CliError::Invariant("dynamics checkpoint was trained with different normalization statistics".into()));
    }
    let density = if need_density { Some(AnyEstimator::load(&density)?) } else { None };
    Ok(PolicyInputs { data, ensemble, density })
}

fn guardian<'a>(cfg: &RunConfig, density: &'a AnyEstimator, lambda: f64) -> Result<Guardian<'a>> {
    let tau = match cfg.guardian.tau_override {
        Some(t) => t,
        None => density
            .threshold()
            .ok_or_else(|| CliError::Invariant(format!("{} checkpoint has no calibrated threshold", density.kind())))?,
    };
    let config = PenaltyConfig {
        tau,
        lambda,
        underflow_floor: LOG_DENSITY_FLOOR,
        linear_ablation: cfg.guardian.linear_ablation,
    };
    Ok(Guardian::with_config(density.as_dyn(), config)?.with_exec(cfg.exec()))
}

fn train(cfg: &RunConfig, inputs: &PolicyInputs, lambda: Option<f64>, seed: u64) -> Result<TrainOutcome> {
    let g = match (lambda, &inputs.density) {
        (Some(l), Some(d)) => Some(guardian(cfg, d, l)?),
        _ => None,
    };
    let model = PenalizedModel::new(&inputs.ensemble, g)?;
    Ok(with_env!(cfg, |env, _b| gormpo_train(&env, &inputs.data, &model, &cfg.policy, seed, cfg.exec()))?)
}

fn policy_container(sac: &Sac, stats: &NormStats) -> Container {
    let mut c = sac.to_container();
    c.nest("norm_stats", &stats.to_container());
    c
}

fn load_policy(path: &Path) -> Result<(Sac, NormStats)> {
    let c = Container::read(path)?;
    let stats = NormStats::from_container(&c.sub("norm_stats"))?;
    Ok((Sac::from_container(&c)?, stats))
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
struct EvalSummary {
    episodes: usize,
    return_mean: f64,
    return_std: f64,
    ws_mean: Option<f64>,
    acp_mean: Option<f64>,
    ood_visitation: Option<f64>,
}

fn evaluate_policy(cfg: &RunConfig, sac: &Sac, stats: &NormStats, episodes: usize, seed: u64) -> Result<(Vec<EpisodeMetrics>, EvalSummary)> {
    let actor = SacActor { sac, stats, deterministic: true };
    let eps = with_env!(cfg, |env, _b| collect_episodes(&env, &actor, episodes, seed, cfg.exec()))?;
    let metrics = eps.iter().map(episode_metrics).collect::<Result<Vec<_>, _>>()?;
    let returns = ReturnStats::from_returns(metrics.iter().map(|m| m.total_reward).collect());
    let summary = EvalSummary {
        episodes,
        return_mean: returns.mean,
        return_std: returns.std,
        ws_mean: mean_of(metrics.iter().filter_map(|m| m.ws)),
        acp_mean: mean_of(metrics.iter().filter_map(|m| m.acp)),
        ood_visitation: None,
    };
    Ok((metrics, summary))
}

fn visitation(cfg: &RunConfig, inputs: &PolicyInputs, sac: &Sac, seed: u64) -> Result<Option<f64>> {
    let Some(density) = &inputs.density else {
        return Ok(None);
    };
    let mut rng = SeedStream::new(seed).child(7).rng();
    let idx: Vec<usize> = (0..cfg.eval.ood_starts).map(|_| rng.random_range(0..inputs.data.len())).collect();
    let starts = inputs.data.observations.select(Axis(0), &idx);
    Ok(Some(ood_visitation(&inputs.ensemble, density.as_dyn(), &Stochastic(sac), &starts, cfg.eval.ood_horizon, seed)?))
}

#[derive(Serialize)]
struct LogLine<'a> {
    lambda: Option<f64>,
    #[serde(flatten)]
    log: &'a EpochLog,
}

pub fn train_policy(ctx: &mut RunContext, inputs: &crate::cli::Inputs, lambda: Option<f64>, guardian_off: bool) -> Result<()> {
    let cfg = ctx.config.clone();
    let enabled = cfg.guardian.enabled && !guardian_off;
    let lambda = lambda.unwrap_or(cfg.guardian.lambda);
    let pi = policy_inputs(ctx, inputs, enabled)?;
    let out = train(&cfg, &pi, enabled.then_some(lambda), ctx.seed())?;
    ctx.write_container(POLICY, policy_container(&out.sac, stats_of(&pi.data)?))?;
    let lambda_tag = enabled.then_some(lambda);
    let lines: Vec<LogLine> = out.log.iter().map(|log| LogLine { lambda: lambda_tag, log }).collect();
    ctx.write_jsonl(TRAIN_LOG, &lines)?;
    if !out.trace.is_empty() {
        let mut bytes = Vec::new();
        write_trace(&mut bytes, &out.trace)?;
        ctx.write_bytes("penalty_trace.csv", &bytes)?;
    }
    ctx.write_json(
        "train.json",
        &json!({
            "guardian": enabled,
            "lambda": lambda_tag,
            "estimator": pi.density.as_ref().map(|d| d.kind()),
            "final_eval": out.final_eval,
            "final_mean_u": out.log.last().and_then(|l| l.mean_u),
        }),
    )?;
    match &out.final_eval {
        Some(e) => println!("final return {:.4} ± {:.4}", e.mean, e.std),
        None => println!("trained {} epochs", out.log.len()),
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub lambda: f64,
    pub return_mean: f64,
    pub return_std: f64,
    pub ws: Option<f64>,
    pub acp: Option<f64>,
    pub ood_visitation: Option<f64>,
    pub final_mean_u: Option<f64>,
}

pub fn sweep_lambda(ctx: &mut RunContext, inputs: &crate::cli::Inputs, grid: &[f64]) -> Result<()> {
    let cfg = ctx.config.clone();
    let grid = if grid.is_empty() { cfg.sweep.lambdas.clone() } else { grid.to_vec() };
    if grid.is_empty() {
        return Err(CliError::Usage("λ grid is empty".into()));
    }
    let pi = policy_inputs(ctx, inputs, true)?;
    let stats = stats_of(&pi.data)?.clone();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for &lambda in &grid {
        let out = train(&cfg, &pi, Some(lambda), ctx.seed())?;
        let (_, summary) = evaluate_policy(&cfg, &out.sac, &stats, cfg.eval.episodes, SeedStream::new(ctx.seed()).child(8).raw())?;
        ctx.write_container(&format!("sweep/policy_lambda_{lambda}.bin"), policy_container(&out.sac, &stats))?;
        rows.push(SweepCsvRow {
            lambda,
            return_mean: summary.return_mean,
            return_std: summary.return_std,
            ws: summary.ws_mean,
            acp: summary.acp_mean,
            ood_visitation: visitation(&cfg, &pi, &out.sac, ctx.seed())?,
            final_mean_u: out.log.last().and_then(|l| l.mean_u),
        });
        lines.extend(out.log.into_iter().map(|log| (lambda, log)));
        println!("λ = {lambda}: return {:.4} ± {:.4}", summary.return_mean, summary.return_std);
    }
    let best = select_lambda(
        &rows
            .iter()
            .map(|r| SweepRow {
                lambda: r.lambda,
                mean_return: r.return_mean,
                std_return: r.return_std,
            })
            .collect::<Vec<_>>(),
    )?;
    ctx.write_csv(SWEEP, &rows)?;
    let log_lines: Vec<LogLine> = lines.iter().map(|(l, log)| LogLine { lambda: Some(*l), log }).collect();
    ctx.write_jsonl("sweep_log.jsonl", &log_lines)?;
    ctx.write_json("sweep.json", &json!({ "grid": grid, "best_lambda": best, "rows": rows }))?;
    println!("best λ = {best}");
    Ok(())
}

pub fn evaluate(ctx: &mut RunContext, inputs: &crate::cli::Inputs, policy: &Option<PathBuf>, episodes: Option<usize>) -> Result<()> {
    let cfg = ctx.config.clone();
    let path = input(ctx, policy, POLICY);
    ctx.require(&path, "policy checkpoint")?;
    let (sac, stats) = load_policy(&path)?;
    let episodes = episodes.unwrap_or(cfg.eval.episodes);
    let (metrics, mut summary) = evaluate_policy(&cfg, &sac, &stats, episodes, ctx.seed())?;
    // Visitation needs a model and a density; measure it when both are present.
    let kind = inputs.estimator.unwrap_or(cfg.estimator.kind);
    let have_model = [input(ctx, &inputs.data, DATASET), input(ctx, &inputs.dynamics, DYNAMICS), input(ctx, &inputs.density, &density_file(kind))]
        .iter()
        .all(|p| p.is_file());
    if have_model {
        let pi = policy_inputs(ctx, inputs, true)?;
        summary.ood_visitation = visitation(&cfg, &pi, &sac, ctx.seed())?;
    }
    ctx.write_csv("episodes.csv", &metrics)?;
    ctx.write_json("eval.json", &summary)?;
    println!(
        "return {:.4} ± {:.4} over {episodes} episodes; WS {:?}; ACP {:?}; OOD visitation {:?}",
        summary.return_mean, summary.return_std, summary.ws_mean, summary.acp_mean, summary.ood_visitation
    );
    Ok(())
}

pub fn theory_check(ctx: &mut RunContext) -> Result<usize> {
    let cfg = ctx.config.clone();
    let report = run_suite(&cfg.theory, ctx.seed(), cfg.exec())?;
    ctx.write_csv("verdicts.csv", &report.rows)?;
    println!("{:<12} {:>8} {:>8} {:>10} {:>9} {:>12}", "check", "rows", "holds", "violations", "vacuous", "min value");
    let mut table = Vec::new();
    for kind in [CheckKind::Telescoping, CheckKind::Theorem1, CheckKind::Theorem2] {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.check == kind).collect();
        let holds = rows.iter().filter(|r| r.holds).count();
        let vacuous = rows.iter().filter(|r| r.vacuous).count();
        let min_value = rows.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
        let name = serde_json::to_value(kind)?.as_str().unwrap_or_default().to_string();
        println!("{name:<12} {:>8} {holds:>8} {:>10} {vacuous:>9} {min_value:>12.3e}", rows.len(), rows.len() - holds);
        table.push(json!({ "check": kind, "rows": rows.len(), "holds": holds, "violations": rows.len() - holds, "vacuous": vacuous, "min_value": min_value }));
    }
    let violations = report.violations().count();
    ctx.write_json(
        "theory.json",
        &json!({ "checks": table, "violations": violations, "max_telescoping_residual": report.max_residual(), "all_hold": report.all_hold() }),
    )?;
    Ok(violations)
}
