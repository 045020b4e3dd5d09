//! Seeded experiment runner and verification driver.
//!
//! Everything downstream (figures, analysis) is derived from the files this
//! module writes:
//!
//! - `runs/<policy>_rep<k>.csv` — one row per round, schema
//!   `t,policy,replication,arm_index,reward,inst_regret,cum_regret,D_t,B_t,newton_iters,bisection_iters,wall_ms`;
//! - `aggregate.csv` — per-round mean/median cumulative regret per policy;
//! - `instance.json` — environment summary (x*, κ*, κ_X, per-arm f* values);
//! - `manifest.json` — echoed config, tool version, per-replication status
//!   and wall-clock timing;
//! - `report.json` + `verify_<suite>.csv` for the verification driver.
//!
//! Determinism contract: identical config + master seed produce byte-identical
//! data files. RNG streams are derived from the master seed by stable hashing
//! of (tag, index) — see [`crate::seeding`]. Wall-clock timing would break
//! byte-identity, so with `deterministic_timing = true` (the default) the
//! `wall_ms` column is written as 0 and real timings appear only in
//! `manifest.json`, which is excluded from the byte-identity surface.
//! Files are written atomically (temp file + rename).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concentration::{
    coverage_experiment, CoverageKind, CoverageReport, CoverageSpec, StitchingParams,
};
use crate::ef_models::EfModel;
use crate::environment::{Environment, RunRecord};
use crate::error::{Error, Result};
use crate::estimation::{loss, loss_gradient, mle, History};
use crate::kernels::{
    verify_determinant_identity, FeatureMap, GramMatrix, Kernel, MaternSmoothness,
    WeightedGramMatrix,
};
use crate::policy::{run_round, PolicyContext, PolicyKind, PolicyState};
use crate::seeding;

fn default_true() -> bool {
    true
}

/// Top-level configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Write wall_ms as 0 so reruns are byte-identical (real timings go to
    /// the manifest only).
    #[serde(default = "default_true")]
    pub deterministic_timing: bool,
    #[serde(default)]
    pub workers: Option<usize>,
    pub instance: InstanceConfig,
    #[serde(default)]
    pub run: Option<RunConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub num_arms: usize,
    pub num_anchors: usize,
    pub dimension: usize,
    pub box_low: f64,
    pub box_high: f64,
    pub norm_bound: f64,
    pub kernel: KernelConfig,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Linear,
    Rbf { lengthscale: f64 },
    Matern { smoothness: f64, lengthscale: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Bernoulli,
    Gaussian { variance: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub horizon: usize,
    pub replications: usize,
    pub delta: f64,
    pub lambda: f64,
    pub policies: Vec<PolicyKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub suites: Vec<SuiteKind>,
    pub replications: usize,
    pub horizon: usize,
    pub delta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Identity,
    WeightedIg,
    MleOracle,
    Freedman,
    Bernstein,
    GoodEvent,
}

impl SuiteKind {
    pub fn name(&self) -> &'static str {
        match self {
            SuiteKind::Identity => "identity",
            SuiteKind::WeightedIg => "weighted_ig",
            SuiteKind::MleOracle => "mle_oracle",
            SuiteKind::Freedman => "freedman",
            SuiteKind::Bernstein => "bernstein",
            SuiteKind::GoodEvent => "good_event",
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::input(format!("invalid config {}: {e}", path.display())))?;
    validate_config(&cfg)?;
    Ok(cfg)
}

fn validate_config(cfg: &ExperimentConfig) -> Result<()> {
    let inst = &cfg.instance;
    if inst.num_arms < 2 {
        return Err(Error::input("instance.num_arms must be at least 2"));
    }
    if inst.num_anchors == 0 || inst.dimension == 0 {
        return Err(Error::input(
            "instance.num_anchors and dimension must be positive",
        ));
    }
    if !(inst.box_high > inst.box_low) {
        return Err(Error::input("instance box must have positive volume"));
    }
    if !(inst.norm_bound > 0.0) {
        return Err(Error::input("instance.norm_bound must be positive"));
    }
    if let Some(run) = &cfg.run {
        if run.horizon == 0 || run.replications == 0 {
            return Err(Error::input(
                "run.horizon and run.replications must be at least 1",
            ));
        }
        if !(run.delta > 0.0 && run.delta < 1.0) {
            return Err(Error::input("run.delta must be in (0,1)"));
        }
        if !(run.lambda > 0.0) {
            return Err(Error::input("run.lambda must be positive"));
        }
        if run.policies.is_empty() {
            return Err(Error::input("run.policies must not be empty"));
        }
    }
    if let Some(v) = &cfg.verify {
        if v.horizon == 0 || v.replications == 0 {
            return Err(Error::input(
                "verify.horizon and verify.replications must be at least 1",
            ));
        }
        if !(v.delta > 0.0 && v.delta < 1.0) {
            return Err(Error::input("verify.delta must be in (0,1)"));
        }
        if !(v.lambda > 0.0) {
            return Err(Error::input("verify.lambda must be positive"));
        }
        if v.suites.is_empty() {
            return Err(Error::input("verify.suites must not be empty"));
        }
    }
    Ok(())
}

pub fn build_kernel(cfg: &KernelConfig, provisional_linear_bound: f64) -> Result<Kernel> {
    match cfg {
        KernelConfig::Linear => Kernel::linear(provisional_linear_bound),
        KernelConfig::Rbf { lengthscale } => Kernel::rbf(*lengthscale),
        KernelConfig::Matern {
            smoothness,
            lengthscale,
        } => {
            let s = if (*smoothness - 0.5).abs() < 1e-12 {
                MaternSmoothness::Half
            } else if (*smoothness - 1.5).abs() < 1e-12 {
                MaternSmoothness::ThreeHalves
            } else if (*smoothness - 2.5).abs() < 1e-12 {
                MaternSmoothness::FiveHalves
            } else {
                return Err(Error::input(format!(
                    "matern smoothness must be 0.5, 1.5 or 2.5, got {smoothness}"
                )));
            };
            Kernel::matern(s, *lengthscale)
        }
    }
}

pub fn build_model(cfg: &ModelConfig, horizon: usize, delta: f64) -> Result<EfModel> {
    match cfg {
        ModelConfig::Bernoulli => Ok(EfModel::bernoulli()),
        ModelConfig::Gaussian { variance } => {
            EfModel::gaussian_for_horizon(*variance, horizon, delta)
        }
    }
}

/// Build the environment for a config. For linear kernels the bound K is
/// recomputed as the maximum arm norm once the decision set is known.
pub fn build_environment(
    cfg: &ExperimentConfig,
    horizon: usize,
    delta: f64,
) -> Result<Environment> {
    let inst = &cfg.instance;
    let model = build_model(&inst.model, horizon, delta)?;
    let corner = inst.box_low.abs().max(inst.box_high.abs());
    let provisional = (inst.dimension as f64).sqrt() * corner.max(f64::MIN_POSITIVE);
    let kernel = build_kernel(&inst.kernel, provisional)?;
    let mut rng = seeding::derive_rng(cfg.master_seed, "instance", 0);
    let env = Environment::generate(
        &mut rng,
        &kernel,
        model,
        inst.num_arms,
        inst.num_anchors,
        inst.norm_bound,
        inst.dimension,
        inst.box_low,
        inst.box_high,
    )?;
    if matches!(inst.kernel, KernelConfig::Linear) {
        // Tighten K to the realized decision set.
        let kernel = Kernel::linear_for_points(env.decision_set())?;
        let f_star = crate::estimation::DualFunction::new(
            env.f_star().support().to_vec(),
            env.f_star().coeffs().iter().cloned().collect(),
            kernel,
        )?;
        return Environment::from_parts(
            env.decision_set().to_vec(),
            f_star,
            *env.model(),
            env.norm_bound(),
        );
    }
    Ok(env)
}

/// Environment summary written to `instance.json`.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceSummary {
    pub num_arms: usize,
    pub dimension: usize,
    pub x_star_index: usize,
    pub kappa_star: f64,
    pub kappa_x: f64,
    pub norm_bound: f64,
    pub kernel_bound: f64,
    pub f_star_values: Vec<f64>,
    pub mean_rewards: Vec<f64>,
    pub decision_set: Vec<Vec<f64>>,
}

impl InstanceSummary {
    pub fn from_environment(env: &Environment) -> Self {
        InstanceSummary {
            num_arms: env.num_arms(),
            dimension: env.decision_set()[0].len(),
            x_star_index: env.x_star_index(),
            kappa_star: env.kappa_star(),
            kappa_x: env.kappa_x(),
            norm_bound: env.norm_bound(),
            kernel_bound: env.f_star().kernel().bound(),
            f_star_values: env.f_star_values().to_vec(),
            mean_rewards: env
                .f_star_values()
                .iter()
                .map(|&z| env.model().mu(z))
                .collect(),
            decision_set: env.decision_set().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationStatus {
    pub policy: String,
    pub replication: usize,
    pub status: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub replications: Vec<ReplicationStatus>,
    pub total_wall_ms: f64,
}

/// Outcome of `run_experiment`: where the files went and how many
/// replications failed.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub failed: usize,
    pub aggregate_csv: PathBuf,
    pub run_csvs: Vec<PathBuf>,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)
            .map_err(|e| Error::input(format!("cannot create {}: {e}", tmp.display())))?;
        f.write_all(bytes)
            .map_err(|e| Error::input(format!("cannot write {}: {e}", tmp.display())))?;
    }
    fs::rename(&tmp, path)
        .map_err(|e| Error::input(format!("cannot rename into {}: {e}", path.display())))?;
    Ok(())
}

fn format_float(v: f64) -> String {
    format!("{v}")
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        Some(w) if w > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .expect("thread pool")
            .install(f),
        _ => f(),
    }
}

/// Run the configured bandit experiment and write all artifacts under
/// `out_dir`. Solver failures mark the replication failed in the manifest;
/// the remaining replications proceed.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let run = cfg
        .run
        .clone()
        .ok_or_else(|| Error::input("config has no [run] section"))?;
    let started = Instant::now();
    let env = build_environment(cfg, run.horizon, run.delta)?;
    let ctx = PolicyContext::new(&env, run.delta, run.lambda)?;

    fs::create_dir_all(out_dir.join("runs"))
        .map_err(|e| Error::input(format!("cannot create {}: {e}", out_dir.display())))?;

    let summary = InstanceSummary::from_environment(&env);
    atomic_write(
        &out_dir.join("instance.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::numerical(format!("json: {e}")))?
            .as_bytes(),
    )?;

    let mut tasks: Vec<(PolicyKind, usize)> = Vec::new();
    for &policy in &run.policies {
        for rep in 0..run.replications {
            tasks.push((policy, rep));
        }
    }

    let results: Vec<(
        PolicyKind,
        usize,
        std::result::Result<Vec<RunRecord>, String>,
    )> = with_pool(cfg.workers, || {
        tasks
            .par_iter()
            .map(|&(policy, rep)| {
                let outcome =
                    run_replication(&env, &ctx, policy, rep, cfg.master_seed, run.horizon)
                        .map_err(|e| e.to_string());
                (policy, rep, outcome)
            })
            .collect()
    });

    let mut statuses = Vec::new();
    let mut run_csvs = Vec::new();
    let mut failed = 0;
    let mut per_policy: Vec<(PolicyKind, Vec<&Vec<RunRecord>>)> =
        run.policies.iter().map(|&p| (p, Vec::new())).collect();

    for (policy, rep, outcome) in &results {
        match outcome {
            Ok(records) => {
                let path = out_dir
                    .join("runs")
                    .join(format!("{}_rep{rep:04}.csv", policy.name()));
                write_run_csv(&path, *policy, *rep, records, cfg.deterministic_timing)?;
                run_csvs.push(path);
                statuses.push(ReplicationStatus {
                    policy: policy.name().to_string(),
                    replication: *rep,
                    status: "ok".to_string(),
                });
                per_policy
                    .iter_mut()
                    .find(|(p, _)| p == policy)
                    .expect("policy known")
                    .1
                    .push(records);
            }
            Err(msg) => {
                failed += 1;
                statuses.push(ReplicationStatus {
                    policy: policy.name().to_string(),
                    replication: *rep,
                    status: format!("failed: {msg}"),
                });
            }
        }
    }

    let aggregate_csv = out_dir.join("aggregate.csv");
    write_aggregate_csv(&aggregate_csv, run.horizon, &per_policy)?;

    let manifest = Manifest {
        tool: "kernel-bandits".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        replications: statuses,
        total_wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    atomic_write(
        &out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::numerical(format!("json: {e}")))?
            .as_bytes(),
    )?;

    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        failed,
        aggregate_csv,
        run_csvs,
    })
}

fn run_replication(
    env: &Environment,
    ctx: &PolicyContext,
    policy: PolicyKind,
    rep: usize,
    master_seed: u64,
    horizon: usize,
) -> Result<Vec<RunRecord>> {
    let mut rng = seeding::derive_rng(master_seed, policy.name(), rep as u64);
    let mut state = PolicyState::new(policy, ctx);
    let mut records = Vec::with_capacity(horizon);
    let mut cum = 0.0;
    for round in 1..=horizon {
        let rec = run_round(&mut state, ctx, env, &mut rng, round, cum)?;
        cum = rec.cumulative_regret;
        records.push(rec);
    }
    Ok(records)
}

fn write_run_csv(
    path: &Path,
    policy: PolicyKind,
    rep: usize,
    records: &[RunRecord],
    deterministic_timing: bool,
) -> Result<()> {
    let mut buf = String::new();
    buf.push_str(
        "t,policy,replication,arm_index,reward,inst_regret,cum_regret,D_t,B_t,newton_iters,bisection_iters,wall_ms\n",
    );
    for r in records {
        let wall = if deterministic_timing { 0.0 } else { r.wall_ms };
        buf.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            policy.name(),
            rep,
            r.arm_index,
            format_float(r.reward),
            format_float(r.instant_regret),
            format_float(r.cumulative_regret),
            format_float(r.radius_d),
            format_float(r.radius_b),
            r.newton_iters,
            r.bisection_iters,
            format_float(wall),
        ));
    }
    atomic_write(path, buf.as_bytes())
}

fn write_aggregate_csv(
    path: &Path,
    horizon: usize,
    per_policy: &[(PolicyKind, Vec<&Vec<RunRecord>>)],
) -> Result<()> {
    let mut buf = String::new();
    buf.push_str("t,policy,mean_cum_regret,median_cum_regret\n");
    for (policy, reps) in per_policy {
        if reps.is_empty() {
            continue;
        }
        for t in 1..=horizon {
            let mut vals: Vec<f64> = reps.iter().map(|r| r[t - 1].cumulative_regret).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let median = if vals.len() % 2 == 1 {
                vals[vals.len() / 2]
            } else {
                0.5 * (vals[vals.len() / 2 - 1] + vals[vals.len() / 2])
            };
            buf.push_str(&format!(
                "{},{},{},{}\n",
                t,
                policy.name(),
                format_float(mean),
                format_float(median)
            ));
        }
    }
    atomic_write(path, buf.as_bytes())
}

/// One verification suite's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    /// How much slack was left (positive = comfortable pass).
    pub margin: f64,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub all_passed: bool,
    pub suites: Vec<SuiteReport>,
}

/// Run the configured verification suites. `bound_multiplier` is a test-only
/// negative control (1.0 = faithful bounds); values below 1 must break the
/// coverage suites.
pub fn verify(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    bound_multiplier: f64,
) -> Result<VerifyReport> {
    let vc = cfg
        .verify
        .clone()
        .ok_or_else(|| Error::input("config has no [verify] section"))?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::input(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut suites = Vec::new();
    for suite in &vc.suites {
        let report = with_pool(cfg.workers, || -> Result<SuiteReport> {
            match suite {
                SuiteKind::Identity => identity_suite(cfg.master_seed),
                SuiteKind::WeightedIg => weighted_ig_suite(cfg, bound_multiplier),
                SuiteKind::MleOracle => mle_oracle_suite(cfg.master_seed),
                SuiteKind::Freedman => {
                    let spec = CoverageSpec {
                        kind: CoverageKind::StitchedFreedman,
                        replications: vc.replications,
                        horizon: vc.horizon,
                        delta: vc.delta,
                        lambda: vc.lambda,
                        environment: None,
                        noise_bound: 1.0,
                        stitching: StitchingParams::default(),
                        master_seed: cfg.master_seed,
                        bound_multiplier,
                    };
                    coverage_suite(cfg, &vc, spec, out_dir)
                }
                SuiteKind::Bernstein | SuiteKind::GoodEvent => {
                    let env = build_environment(cfg, vc.horizon, vc.delta)?;
                    let kind = if *suite == SuiteKind::Bernstein {
                        CoverageKind::BernsteinSelfNorm
                    } else {
                        CoverageKind::GoodEvent
                    };
                    let spec = CoverageSpec {
                        kind,
                        replications: vc.replications,
                        horizon: vc.horizon,
                        delta: vc.delta,
                        lambda: vc.lambda,
                        environment: Some(&env),
                        noise_bound: env.model().noise_bound(),
                        stitching: StitchingParams::default(),
                        master_seed: cfg.master_seed,
                        bound_multiplier,
                    };
                    coverage_suite(cfg, &vc, spec, out_dir)
                }
            }
        })?;
        suites.push(report);
    }

    let all_passed = suites.iter().all(|s| s.passed);
    let report = VerifyReport { all_passed, suites };
    atomic_write(
        &out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::numerical(format!("json: {e}")))?
            .as_bytes(),
    )?;
    Ok(report)
}

fn coverage_suite(
    _cfg: &ExperimentConfig,
    vc: &VerifyConfig,
    spec: CoverageSpec,
    out_dir: &Path,
) -> Result<SuiteReport> {
    let report = coverage_experiment(&spec)?;
    write_coverage_csv(out_dir, &report)?;
    // Required coverage: 1 − δ − 3·√(δ(1−δ)/M).
    let m = vc.replications as f64;
    let slack = 3.0 * (vc.delta * (1.0 - vc.delta) / m).sqrt();
    let threshold = 1.0 - vc.delta - slack;
    let passed = report.coverage >= threshold;
    Ok(SuiteReport {
        suite: suite_name_of(report.kind).to_string(),
        passed,
        margin: report.coverage - threshold,
        details: serde_json::json!({
            "coverage": report.coverage,
            "threshold": threshold,
            "held": report.held_count,
            "replications": report.replications,
            "mean_tightness": report.mean_tightness,
            "tightness_p50": report.tightness_p50,
            "tightness_p90": report.tightness_p90,
            "tightness_max": report.tightness_max,
        }),
    })
}

fn suite_name_of(kind: CoverageKind) -> &'static str {
    match kind {
        CoverageKind::StitchedFreedman => "freedman",
        CoverageKind::BernsteinSelfNorm => "bernstein",
        CoverageKind::GoodEvent => "good_event",
    }
}

fn write_coverage_csv(out_dir: &Path, report: &CoverageReport) -> Result<()> {
    let mut buf = String::from("replication,held,max_ratio\n");
    for r in &report.per_rep {
        buf.push_str(&format!(
            "{},{},{}\n",
            r.replication,
            u8::from(r.held),
            format_float(r.max_ratio)
        ));
    }
    atomic_write(
        &out_dir.join(format!("verify_{}.csv", suite_name_of(report.kind))),
        buf.as_bytes(),
    )
}

/// Determinant-identity suite: 100 random explicit-feature instances with
/// d ≤ 5, t ≤ 50, λ ∈ {0.1, 1, 10}; passes when the worst discrepancy is
/// at most 1e-8.
fn identity_suite(master_seed: u64) -> Result<SuiteReport> {
    use rand::Rng;
    use std::sync::Arc;
    let mut rng = seeding::derive_rng(master_seed, "identity", 0);
    let lambdas = [0.1, 1.0, 10.0];
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let d = rng.gen_range(1..=5usize);
        let t = rng.gen_range(1..=50usize);
        let w: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dd = d;
        let map: FeatureMap = Arc::new(move |x: &[f64]| {
            (0..dd)
                .map(|i| (w[2 * i] * x[0] + w[2 * i + 1] * x[1]).tanh())
                .collect()
        });
        let kernel = Kernel::explicit_features(d, map, (d as f64).sqrt())?;
        let pts: Vec<Vec<f64>> = (0..t)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let lambda = lambdas[case % lambdas.len()];
        worst = worst.max(verify_determinant_identity(&kernel, &pts, lambda)?);
    }
    Ok(SuiteReport {
        suite: "identity".to_string(),
        passed: worst <= 1e-8,
        margin: 1e-8 - worst,
        details: serde_json::json!({ "max_discrepancy": worst, "tolerance": 1e-8 }),
    })
}

/// Weighted information-gain suite: Γ̃ ≤ max{1, R_μ̇/𝔤}·Γ + 1e-9 on 100
/// random weighted instances with weights capped at the model's slope bound.
fn weighted_ig_suite(cfg: &ExperimentConfig, bound_multiplier: f64) -> Result<SuiteReport> {
    use rand::Rng;
    let model = build_model(&cfg.instance.model, 100, 0.1)?;
    let corner = cfg.instance.box_low.abs().max(cfg.instance.box_high.abs());
    let kernel = build_kernel(
        &cfg.instance.kernel,
        (cfg.instance.dimension as f64).sqrt() * corner.max(1.0),
    )?;
    let cap = model.mu_dot_sup() / model.g_tau();
    let factor = cap.max(1.0);
    let mut rng = seeding::derive_rng(cfg.master_seed, "weighted-ig", 0);
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..100 {
        let n = rng.gen_range(1..=25usize);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..cfg.instance.dimension)
                    .map(|_| rng.gen_range(cfg.instance.box_low..cfg.instance.box_high))
                    .collect()
            })
            .collect();
        let lambda = rng.gen_range(0.1..2.0);
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..cap).sqrt()).collect();
        let gram = GramMatrix::new(&kernel, &pts, lambda)?;
        let weighted = WeightedGramMatrix::new(&gram, &weights)?;
        let excess = weighted.information_gain()
            - (factor * gram.information_gain() * bound_multiplier + 1e-9);
        worst_excess = worst_excess.max(excess);
    }
    Ok(SuiteReport {
        suite: "weighted_ig".to_string(),
        passed: worst_excess <= 0.0,
        margin: -worst_excess,
        details: serde_json::json!({ "worst_excess": worst_excess, "factor": factor }),
    })
}

/// MLE oracle suite: kernel-ridge closed form (Gaussian), scalar
/// root-finding oracle (Bernoulli), finite-difference gradients.
fn mle_oracle_suite(master_seed: u64) -> Result<SuiteReport> {
    use rand::Rng;
    let mut rng = seeding::derive_rng(master_seed, "mle-oracle", 0);
    let mut worst_ridge: f64 = 0.0;
    let mut worst_root: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;

    for _ in 0..20 {
        // Gaussian + kernel ridge closed form.
        let variance = rng.gen_range(0.5..2.0);
        let model = EfModel::gaussian(variance, 10.0)?;
        let kernel = Kernel::rbf(rng.gen_range(0.4..1.5))?;
        let n = rng.gen_range(1..12usize);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = History::with_data(kernel, pts, ys.clone())?;
        let lambda = rng.gen_range(0.2..2.0);
        let fit = mle(&h, &model, lambda)?;
        let gram = h.gram(lambda)?;
        let mut reg = gram.entries().clone();
        for i in 0..n {
            reg[(i, i)] += lambda * variance;
        }
        let closed = reg
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&ys))
            .ok_or_else(|| Error::numerical("singular ridge system"))?;
        worst_ridge = worst_ridge.max((fit.f.coeffs() - &closed).norm());

        // Bernoulli scalar root: μ(α) − y + λ𝔤α = 0 on a one-point history.
        let b = EfModel::bernoulli();
        let lin = Kernel::linear(1.0)?;
        let y = if rng.gen::<bool>() { 1.0 } else { 0.0 };
        let lam = rng.gen_range(0.3..2.0);
        let h1 = History::with_data(lin, vec![vec![1.0]], vec![y])?;
        let fit1 = mle(&h1, &b, lam)?;
        let root = {
            let f = |a: f64| b.mu(a) - y + lam * a;
            let (mut lo, mut hi) = (-50.0, 50.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        };
        worst_root = worst_root.max((fit1.f.coeffs()[0] - root).abs());

        // Gradient vs central finite differences (relative).
        let bmodel = EfModel::bernoulli();
        let kernel = Kernel::rbf(0.8)?;
        let n = rng.gen_range(2..8usize);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let ys: Vec<f64> = (0..n).map(|_| f64::from(rng.gen::<bool>())).collect();
        let h2 = History::with_data(kernel, pts, ys)?;
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = loss_gradient(&h2, &bmodel, 0.7, &alpha)?;
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let eps = 1e-6;
        let at = |sign: f64| -> Result<f64> {
            let a: Vec<f64> = alpha
                .iter()
                .zip(&dir)
                .map(|(a, d)| a + sign * eps * d)
                .collect();
            loss(&h2, &bmodel, 0.7, &a)
        };
        let numeric = (at(1.0)? - at(-1.0)?) / (2.0 * eps);
        worst_grad = worst_grad.max((analytic - numeric).abs() / analytic.abs().max(1e-6));
    }

    let passed = worst_ridge <= 1e-8 && worst_root <= 1e-8 && worst_grad <= 1e-6;
    Ok(SuiteReport {
        suite: "mle_oracle".to_string(),
        passed,
        margin: (1e-8 - worst_ridge)
            .min(1e-8 - worst_root)
            .min(1e-6 - worst_grad),
        details: serde_json::json!({
            "worst_ridge_diff": worst_ridge,
            "worst_root_diff": worst_root,
            "worst_gradient_rel": worst_grad,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        toml::from_str(
            r#"
            master_seed = 7

            [instance]
            num_arms = 2
            num_anchors = 3
            dimension = 1
            box_low = 0.0
            box_high = 1.0
            norm_bound = 1.0

            [instance.kernel]
            kind = "rbf"
            lengthscale = 0.5

            [instance.model]
            kind = "bernoulli"

            [run]
            horizon = 10
            replications = 2
            delta = 0.1
            lambda = 1.0
            policies = ["uniform_random"]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn config_parses_and_validates() {
        let cfg = small_config();
        validate_config(&cfg).unwrap();
        assert_eq!(cfg.master_seed, 7);
        assert!(cfg.deterministic_timing);
        assert!(matches!(cfg.instance.kernel, KernelConfig::Rbf { .. }));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = small_config();
        cfg.run.as_mut().unwrap().delta = 1.5;
        assert!(validate_config(&cfg).is_err());

        let bad: std::result::Result<ExperimentConfig, _> = toml::from_str("master_seed = 1");
        assert!(bad.is_err()); // missing [instance]
    }

    #[test]
    fn matern_smoothness_is_restricted_to_half_integers() {
        for s in [0.5, 1.5, 2.5] {
            build_kernel(
                &KernelConfig::Matern {
                    smoothness: s,
                    lengthscale: 1.0,
                },
                1.0,
            )
            .unwrap();
        }
        assert!(build_kernel(
            &KernelConfig::Matern {
                smoothness: 2.0,
                lengthscale: 1.0,
            },
            1.0,
        )
        .is_err());
    }

    #[test]
    fn worker_count_does_not_change_outputs() {
        let mut cfg = small_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        cfg.workers = Some(1);
        let s1 = run_experiment(&cfg, d1.path()).unwrap();
        cfg.workers = Some(4);
        let s2 = run_experiment(&cfg, d2.path()).unwrap();
        for (a, b) in s1.run_csvs.iter().zip(&s2.run_csvs) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
        assert_eq!(
            fs::read(&s1.aggregate_csv).unwrap(),
            fs::read(&s2.aggregate_csv).unwrap()
        );
    }

    #[test]
    fn run_experiment_writes_expected_files() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(summary.failed, 0);
        assert_eq!(summary.run_csvs.len(), 2);
        for path in &summary.run_csvs {
            let text = fs::read_to_string(path).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines.len(), 11); // header + 10 rounds
            assert!(lines[0].starts_with("t,policy,replication,arm_index"));
        }
        assert!(dir.path().join("instance.json").exists());
        assert!(dir.path().join("manifest.json").exists());

        // Aggregate mean at t = T equals the hand-average of the finals.
        let agg = fs::read_to_string(&summary.aggregate_csv).unwrap();
        let last = agg
            .lines()
            .rfind(|l| l.starts_with("10,uniform_random"))
            .unwrap();
        let mean: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
        let mut finals = Vec::new();
        for path in &summary.run_csvs {
            let text = fs::read_to_string(path).unwrap();
            let row = text.lines().last().unwrap();
            finals.push(row.split(',').nth(6).unwrap().parse::<f64>().unwrap());
        }
        let hand = finals.iter().sum::<f64>() / finals.len() as f64;
        assert!((mean - hand).abs() <= 1e-12);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let cfg = small_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s1 = run_experiment(&cfg, d1.path()).unwrap();
        let s2 = run_experiment(&cfg, d2.path()).unwrap();
        for (a, b) in s1.run_csvs.iter().zip(&s2.run_csvs) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
        assert_eq!(
            fs::read(&s1.aggregate_csv).unwrap(),
            fs::read(&s2.aggregate_csv).unwrap()
        );
        assert_eq!(
            fs::read(d1.path().join("instance.json")).unwrap(),
            fs::read(d2.path().join("instance.json")).unwrap()
        );
    }

    #[test]
    fn verify_small_suites_pass_and_corruption_fails() {
        let mut cfg = small_config();
        cfg.verify = Some(VerifyConfig {
            suites: vec![
                SuiteKind::Identity,
                SuiteKind::MleOracle,
                SuiteKind::Freedman,
            ],
            replications: 60,
            horizon: 60,
            delta: 0.1,
            lambda: 1.0,
        });
        let dir = tempfile::tempdir().unwrap();
        let report = verify(&cfg, dir.path(), 1.0).unwrap();
        assert!(report.all_passed, "{report:?}");
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("verify_freedman.csv").exists());

        let bad = verify(&cfg, dir.path(), 0.25).unwrap();
        assert!(!bad.all_passed);
    }
}
