//! Experiment configuration and the desk-scale studies.
//!
//! Every study is a pure function of its [`ExperimentConfig`]: replicate `r`
//! runs under `replicate_seed(seed, r)`, oracle draws use streams keyed by the
//! cell, and results are assembled in `(d, N, replicate)` order. Studies
//! return [`Table`]s; [`write_outputs`] turns them into CSV files plus a
//! `manifest.toml` sidecar holding everything that is not a function of the
//! inputs (timestamps, thread count, wall time).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    analytic_profile_perfect_gaussian, build_variance_profile, limiting_resample_times, mc_error_shape,
    sample_limiting_ess, theoretical_resample_times_d, ResampleTime, VarianceProfile,
};
use crate::error::{Result, SmcError};
use crate::kernel::{KernelSpec, Precision};
use crate::rng::{replicate_seed, stream_key, Purpose};
use crate::schedule::{AnnealingSchedule, Tabulated, TestGrid};
use crate::smc::{run_smc, ResamplingPolicy, RunRecord, Thresholds};
use crate::stats;
use crate::target::TemperedTarget;

/// Version of every CSV schema written by this module.
pub const SCHEMA_VERSION: u32 = 1;

fn default_target() -> String {
    "gaussian".into()
}
fn default_replicates() -> usize {
    1
}
fn default_n_particles() -> Vec<usize> {
    vec![100]
}
fn default_dims() -> Vec<usize> {
    vec![64]
}
fn default_oracle_samples() -> usize {
    20_000
}
fn default_mc_reps() -> usize {
    4_000
}
fn default_cutoff() -> f64 {
    0.5
}
fn default_phi0() -> f64 {
    0.5
}
fn default_thresholds() -> Vec<f64> {
    vec![0.5]
}
fn default_jitter_count() -> usize {
    16
}
fn default_nodes() -> usize {
    64
}
fn default_chain_length() -> usize {
    100_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form label copied into the manifest.
    #[serde(default)]
    pub experiment: String,
    #[serde(default = "default_target")]
    pub target: String,
    /// Master seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_n_particles")]
    pub n_particles: Vec<usize>,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    /// Step-count exponents for the critical-scaling study.
    #[serde(default)]
    pub deltas: Vec<f64>,
    /// Where CSVs go; `None` keeps results in memory only.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Size of each `ε_N` oracle sample.
    #[serde(default = "default_oracle_samples")]
    pub oracle_samples: usize,
    /// Trajectories behind the finite-`d` theoretical resampling times.
    #[serde(default = "default_mc_reps")]
    pub mc_reps: usize,
    /// The Monte Carlo error study estimates `π(1{x ≤ cutoff})`.
    #[serde(default = "default_cutoff")]
    pub indicator_cutoff: f64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub profile: ProfileConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleChoice {
    #[default]
    Linear,
    Power,
    General,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub kind: ScheduleChoice,
    #[serde(default = "default_phi0")]
    pub phi0: f64,
    #[serde(default)]
    pub delta: Option<f64>,
    /// `[u, φ(u)]` knots for a general schedule.
    #[serde(default)]
    pub table: Option<Vec<[f64; 2]>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleChoice::Linear, phi0: default_phi0(), delta: None, table: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    #[default]
    Rwm,
    Perfect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionChoice {
    #[default]
    Identity,
    Table,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default)]
    pub kind: KernelChoice,
    #[serde(default)]
    pub f: PrecisionChoice,
    /// `[s, f(s)]` knots when `f = "table"`.
    #[serde(default)]
    pub f_table: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    #[default]
    Never,
    Threshold,
    FixedTimes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub kind: PolicyChoice,
    /// `a_k` as fractions of `N`; the last one is reused.
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Resolution of the test grid `G_δ`; absent means test every step.
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default)]
    pub times: Vec<f64>,
    /// Replace the thresholds by draws from `a_1 ± 0.02`.
    #[serde(default)]
    pub jitter: bool,
    #[serde(default = "default_jitter_count")]
    pub jitter_count: usize,
    /// Also run the per-segment ESS check in the resampling study.
    #[serde(default)]
    pub segment_check: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyChoice::Never,
            thresholds: default_thresholds(),
            grid: None,
            times: Vec::new(),
            jitter: false,
            jitter_count: default_jitter_count(),
            segment_check: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSource {
    /// Closed form when the target is Gaussian and the kernel perfect, else estimated.
    #[default]
    Auto,
    Analytic,
    Estimated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    #[serde(default)]
    pub source: ProfileSource,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_chain_length")]
    pub chain_length: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig { source: ProfileSource::Auto, nodes: default_nodes(), chain_length: default_chain_length() }
    }
}

fn table_from_pairs(pairs: &[[f64; 2]]) -> Result<Tabulated> {
    Tabulated::new(pairs.iter().map(|p| (p[0], p[1])).collect())
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| SmcError::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SmcError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the list and range invariants shared by every study.
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(SmcError::Config("replicates must be at least 1".into()));
        }
        if self.n_particles.is_empty() || self.n_particles.contains(&0) {
            return Err(SmcError::Config("n_particles must be a non-empty list of positive counts".into()));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(SmcError::Config("dims must be a non-empty list of positive dimensions".into()));
        }
        if self.oracle_samples == 0 {
            return Err(SmcError::Config("oracle_samples must be positive".into()));
        }
        let phi0 = self.phi0()?;
        if !(phi0 > 0.0 && phi0 < 1.0) {
            return Err(SmcError::Config(format!("schedule.phi0 must lie in (0, 1), got {phi0}")));
        }
        if self.policy.thresholds.is_empty() {
            return Err(SmcError::Config("policy.thresholds must be non-empty".into()));
        }
        Ok(())
    }

    /// Initial temperature: `schedule.phi0`, or `φ(0)` of a general table.
    pub fn phi0(&self) -> Result<f64> {
        match (self.schedule.kind, &self.schedule.table) {
            (ScheduleChoice::General, Some(pairs)) => Ok(table_from_pairs(pairs)?.eval(0.0)),
            (ScheduleChoice::General, None) => Err(SmcError::Config("a general schedule needs schedule.table".into())),
            _ => Ok(self.schedule.phi0),
        }
    }

    pub fn build_target(&self) -> Result<TemperedTarget> {
        TemperedTarget::by_name(&self.target, self.phi0()?)
    }

    pub fn build_kernel(&self) -> Result<KernelSpec> {
        Ok(match self.kernel.kind {
            KernelChoice::Perfect => KernelSpec::Perfect,
            KernelChoice::Rwm => {
                let precision = match self.kernel.f {
                    PrecisionChoice::Identity => Precision::Identity,
                    PrecisionChoice::Table => {
                        let pairs = self
                            .kernel
                            .f_table
                            .as_ref()
                            .ok_or_else(|| SmcError::Config("kernel.f = \"table\" needs kernel.f_table".into()))?;
                        Precision::Table(table_from_pairs(pairs)?)
                    }
                };
                KernelSpec::Rwm { precision }
            }
        })
    }

    /// The schedule in dimension `d`; `delta` overrides `schedule.delta`.
    pub fn build_schedule(&self, d: usize, delta: Option<f64>) -> Result<AnnealingSchedule> {
        let s = &self.schedule;
        match s.kind {
            ScheduleChoice::Linear => AnnealingSchedule::linear(s.phi0, d),
            ScheduleChoice::Power => {
                let delta = delta
                    .or(s.delta)
                    .ok_or_else(|| SmcError::Config("a power schedule needs schedule.delta or deltas".into()))?;
                AnnealingSchedule::power(s.phi0, d, delta)
            }
            ScheduleChoice::General => {
                let pairs =
                    s.table.as_ref().ok_or_else(|| SmcError::Config("a general schedule needs schedule.table".into()))?;
                AnnealingSchedule::general(table_from_pairs(pairs)?, d)
            }
        }
    }

    pub fn build_thresholds(&self) -> Result<Thresholds> {
        let p = &self.policy;
        if p.jitter {
            Thresholds::jittered(p.thresholds[0], p.jitter_count, self.seed)
        } else {
            Thresholds::new(p.thresholds.clone())
        }
    }

    pub fn build_grid(&self) -> Result<Option<TestGrid>> {
        self.policy.grid.map(TestGrid::new).transpose()
    }

    pub fn build_policy(&self) -> Result<ResamplingPolicy> {
        Ok(match self.policy.kind {
            PolicyChoice::Never => ResamplingPolicy::Never,
            PolicyChoice::Threshold => {
                ResamplingPolicy::Threshold { thresholds: self.build_thresholds()?, grid: self.build_grid()? }
            }
            PolicyChoice::FixedTimes => ResamplingPolicy::FixedTimes(self.policy.times.clone()),
        })
    }

    /// The variance profile on `[φ_0, 1]` for the configured target and kernel.
    pub fn build_profile(&self) -> Result<VarianceProfile> {
        let phi0 = self.phi0()?;
        let analytic_ok = self.target == "gaussian" && self.kernel.kind == KernelChoice::Perfect;
        match self.profile.source {
            ProfileSource::Analytic if !analytic_ok => Err(SmcError::Config(
                "the analytic profile exists only for the gaussian target with the perfect kernel".into(),
            )),
            ProfileSource::Analytic | ProfileSource::Auto if analytic_ok => analytic_profile_perfect_gaussian(phi0),
            _ => build_variance_profile(
                &self.build_target()?,
                &self.build_kernel()?,
                phi0,
                self.profile.nodes,
                self.profile.chain_length,
                stream_key(self.seed, Purpose::Chain, 0, 0, 0),
            ),
        }
    }

    /// `σ²` of the full schedule in the limit `d → ∞`.
    fn limit_sigma2(&self, profile: &VarianceProfile) -> Result<f64> {
        match self.schedule.kind {
            ScheduleChoice::Linear => Ok(profile.total()),
            ScheduleChoice::General => {
                let pairs = self.schedule.table.as_ref().expect("validated by phi0()");
                Ok(profile.general_schedule_sigma2(&table_from_pairs(pairs)?, 0.0, 1.0))
            }
            ScheduleChoice::Power => match self.schedule.delta {
                Some(0.0) => Ok(profile.total()),
                _ => Err(SmcError::Config(
                    "the ε_N oracle needs a schedule with d steps (linear, general, or power with delta = 0)".into(),
                )),
            },
        }
    }

    fn require_policy(&self, kind: PolicyChoice, study: &str) -> Result<()> {
        if self.policy.kind != kind {
            return Err(SmcError::Config(format!(
                "the {study} study needs policy.kind = {:?}, got {:?}",
                kind, self.policy.kind
            )));
        }
        Ok(())
    }
}

/// One CSV file: a fixed header and rows of already formatted fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: impl Into<String>, header: &[&'static str]) -> Self {
        Table { name: name.into(), header: header.to_vec(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    /// RFC 4180 bytes, header first.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner().map_err(|e| SmcError::Io(e.into_error()))
    }

    /// Column by header name, parsed as `f64`.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.header.iter().position(|h| *h == name)?;
        Some(self.rows.iter().map(|r| r[idx].parse().unwrap_or(f64::NAN)).collect())
    }
}

macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($x.to_string()),*] };
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    study: &'a str,
    seed: u64,
    started_unix: f64,
    finished_unix: f64,
    elapsed_seconds: f64,
    threads: usize,
    files: Vec<String>,
    config: &'a ExperimentConfig,
}

fn unix_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Writes every table under `dir` and a `manifest.toml` sidecar. Returns the
/// paths written, manifest last.
pub fn write_outputs(
    dir: &Path,
    study: &str,
    config: &ExperimentConfig,
    tables: &[Table],
    started: SystemTime,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for table in tables {
        let path = dir.join(table.file_name());
        fs::write(&path, table.to_csv()?)?;
        written.push(path);
    }
    let finished = SystemTime::now();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        study,
        seed: config.seed,
        started_unix: unix_seconds(started),
        finished_unix: unix_seconds(finished),
        elapsed_seconds: finished.duration_since(started).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        threads: rayon::current_num_threads(),
        files: tables.iter().map(Table::file_name).collect(),
        config,
    };
    let text = toml::to_string(&manifest).map_err(|e| SmcError::Config(format!("manifest: {e}")))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text)?;
    written.push(path);
    Ok(written)
}

/// Runs `f` for every replicate in parallel and returns `(replicate, seed, result)` in replicate order.
fn replicates<T: Send>(config: &ExperimentConfig, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<(usize, u64, T)>> {
    (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = replicate_seed(config.seed, r as u64);
            f(seed).map(|out| (r, seed, out))
        })
        .collect()
}

fn oracle_seed(config: &ExperimentConfig, a: u64, b: u64, c: u64) -> u64 {
    stream_key(config.seed, Purpose::LimitingEss, a, b, c)
}

// ---------------------------------------------------------------------------
// Terminal ESS against ε_N

#[derive(Debug, Clone, PartialEq)]
pub struct EssCell {
    pub d: usize,
    pub n: usize,
    pub sigma2: f64,
    pub terminal_ess: Vec<f64>,
    pub oracle: Vec<f64>,
    pub ks: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct EssConvergenceReport {
    pub cells: Vec<EssCell>,
}

impl EssConvergenceReport {
    pub fn tables(&self, config: &ExperimentConfig) -> Vec<Table> {
        let mut runs = Table::new("ess_convergence_runs", &["d", "N", "replicate", "seed", "terminal_ess"]);
        let mut oracle = Table::new("ess_convergence_oracle", &["d", "N", "draw", "epsilon"]);
        let mut ks = Table::new(
            "ess_convergence_ks",
            &["d", "N", "sigma2", "replicates", "ks", "p_value", "mean_terminal_ess", "mean_oracle"],
        );
        for c in &self.cells {
            for (r, e) in c.terminal_ess.iter().enumerate() {
                runs.push(row![c.d, c.n, r, replicate_seed(config.seed, r as u64), e]);
            }
            for (k, e) in c.oracle.iter().enumerate() {
                oracle.push(row![c.d, c.n, k, e]);
            }
            ks.push(row![
                c.d,
                c.n,
                c.sigma2,
                c.terminal_ess.len(),
                c.ks,
                c.p_value,
                stats::mean(&c.terminal_ess),
                stats::mean(&c.oracle)
            ]);
        }
        vec![runs, oracle, ks]
    }
}

/// Terminal ESS of `R` runs without resampling per `(d, N)`, against an
/// `ε_N` sample with `σ²` from the variance profile.
pub fn run_ess_convergence(config: &ExperimentConfig) -> Result<EssConvergenceReport> {
    config.validate()?;
    config.require_policy(PolicyChoice::Never, "ess-convergence")?;
    let target = config.build_target()?;
    let kernel = config.build_kernel()?;
    let profile = config.build_profile()?;
    let sigma2 = config.limit_sigma2(&profile)?;
    let mut cells = Vec::new();
    for &d in &config.dims {
        let schedule = config.build_schedule(d, None)?;
        for &n in &config.n_particles {
            let runs = replicates(config, |seed| {
                run_smc(seed, &target, &schedule, &kernel, &ResamplingPolicy::Never, n).map(|r| r.terminal_ess())
            })?;
            let terminal_ess: Vec<f64> = runs.into_iter().map(|(_, _, e)| e).collect();
            let oracle =
                sample_limiting_ess(oracle_seed(config, d as u64, n as u64, 0), n, sigma2, config.oracle_samples)?;
            let ks = stats::ks_two_sample(&terminal_ess, &oracle);
            let p_value = stats::ks_two_sample_pvalue(ks, terminal_ess.len(), oracle.len());
            cells.push(EssCell { d, n, sigma2, terminal_ess, oracle, ks, p_value });
        }
    }
    Ok(EssConvergenceReport { cells })
}

// ---------------------------------------------------------------------------
// Critical scaling of the step count

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingCell {
    pub delta: f64,
    pub d: usize,
    pub n: usize,
    pub steps: usize,
    pub ess_fraction: Vec<f64>,
}

impl ScalingCell {
    pub fn mean(&self) -> f64 {
        stats::mean(&self.ess_fraction)
    }

    pub fn std_error(&self) -> f64 {
        if self.ess_fraction.len() < 2 {
            return f64::NAN;
        }
        stats::std_error(&self.ess_fraction)
    }
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub cells: Vec<ScalingCell>,
}

impl ScalingReport {
    pub fn cell(&self, delta: f64, d: usize, n: usize) -> Option<&ScalingCell> {
        self.cells.iter().find(|c| c.delta == delta && c.d == d && c.n == n)
    }

    pub fn tables(&self, config: &ExperimentConfig) -> Vec<Table> {
        let mut runs =
            Table::new("critical_scaling_runs", &["delta", "d", "N", "replicate", "seed", "ess_fraction"]);
        let mut summary = Table::new(
            "critical_scaling",
            &["delta", "d", "N", "steps", "replicates", "mean_ess_fraction", "std_error"],
        );
        for c in &self.cells {
            for (r, e) in c.ess_fraction.iter().enumerate() {
                runs.push(row![c.delta, c.d, c.n, r, replicate_seed(config.seed, r as u64), e]);
            }
            summary.push(row![c.delta, c.d, c.n, c.steps, c.ess_fraction.len(), c.mean(), c.std_error()]);
        }
        vec![runs, summary]
    }
}

/// Terminal `ESS/N` under `p = ⌊d^{1+δ}⌋` steps, per `(δ, d, N)`.
pub fn run_critical_scaling(config: &ExperimentConfig) -> Result<ScalingReport> {
    config.validate()?;
    config.require_policy(PolicyChoice::Never, "scaling")?;
    let deltas: Vec<f64> = if config.deltas.is_empty() {
        config.schedule.delta.into_iter().collect()
    } else {
        config.deltas.clone()
    };
    if deltas.is_empty() {
        return Err(SmcError::Config("the scaling study needs deltas (or schedule.delta)".into()));
    }
    let target = config.build_target()?;
    let kernel = config.build_kernel()?;
    let phi0 = config.phi0()?;
    let mut cells = Vec::new();
    for &delta in &deltas {
        for &d in &config.dims {
            let schedule = AnnealingSchedule::power(phi0, d, delta)?;
            for &n in &config.n_particles {
                let runs = replicates(config, |seed| {
                    run_smc(seed, &target, &schedule, &kernel, &ResamplingPolicy::Never, n)
                        .map(|r| r.terminal_ess() / n as f64)
                })?;
                let ess_fraction = runs.into_iter().map(|(_, _, e)| e).collect();
                cells.push(ScalingCell { delta, d, n, steps: schedule.num_steps(), ess_fraction });
            }
        }
    }
    Ok(ScalingReport { cells })
}

// ---------------------------------------------------------------------------
// Monte Carlo error of the marginal estimate

#[derive(Debug, Clone, PartialEq)]
pub struct McErrorCell {
    pub policy: &'static str,
    pub d: usize,
    pub n: usize,
    pub estimates: Vec<f64>,
    pub rmse: f64,
    pub rmse_se: f64,
    pub shape: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McErrorSlope {
    pub policy: &'static str,
    pub d: usize,
    pub slope: f64,
    pub slope_se: f64,
}

#[derive(Debug, Clone)]
pub struct McErrorReport {
    pub pi_h: f64,
    pub cells: Vec<McErrorCell>,
    pub slopes: Vec<McErrorSlope>,
}

pub const POLICY_NEVER: &str = "never";
pub const POLICY_THRESHOLD: &str = "threshold";

impl McErrorReport {
    pub fn cell(&self, policy: &str, d: usize, n: usize) -> Option<&McErrorCell> {
        self.cells.iter().find(|c| c.policy == policy && c.d == d && c.n == n)
    }

    pub fn tables(&self) -> Vec<Table> {
        let mut cells = Table::new(
            "mc_error",
            &["policy", "d", "N", "replicates", "pi_h", "mean_estimate", "rmse", "rmse_se", "shape"],
        );
        for c in &self.cells {
            cells.push(row![
                c.policy,
                c.d,
                c.n,
                c.estimates.len(),
                self.pi_h,
                stats::mean(&c.estimates),
                c.rmse,
                c.rmse_se,
                c.shape
            ]);
        }
        let mut slopes = Table::new("mc_error_slopes", &["policy", "d", "slope", "slope_se"]);
        for s in &self.slopes {
            slopes.push(row![s.policy, s.d, s.slope, s.slope_se]);
        }
        vec![cells, slopes]
    }
}

/// RMSE and its delta-method standard error.
fn rmse(estimates: &[f64], truth: f64) -> (f64, f64) {
    let sq: Vec<f64> = estimates.iter().map(|e| (e - truth).powi(2)).collect();
    let mse = stats::mean(&sq);
    let rmse = mse.sqrt();
    let se = if sq.len() > 1 { stats::std_error(&sq) / (2.0 * rmse) } else { f64::NAN };
    (rmse, se)
}

/// Largest `σ²` over the segments a threshold policy cuts `[φ_0, 1]` into in the limit.
fn max_segment_sigma2(profile: &VarianceProfile, thresholds: &Thresholds) -> f64 {
    let times = limiting_resample_times(profile, thresholds, None);
    let mut edges = vec![profile.phi0()];
    edges.extend(times.iter().map(|t| t.t));
    edges.push(1.0);
    edges.windows(2).map(|w| profile.sigma2(w[0], w[1])).fold(0.0, f64::max)
}

/// RMSE of the coordinate-0 estimate of `π(1{x ≤ cutoff})` per `(d, N)`,
/// without resampling and with `ESS < a_1·N` resampling.
pub fn run_mc_error(config: &ExperimentConfig) -> Result<McErrorReport> {
    config.validate()?;
    let target = config.build_target()?;
    let kernel = config.build_kernel()?;
    let profile = config.build_profile()?;
    let cutoff = config.indicator_cutoff;
    let h = move |x: f64| if x <= cutoff { 1.0 } else { 0.0 };
    let pi_h = target.stationary_expectation(1.0, h)?;
    let thresholds = Thresholds::constant(config.policy.thresholds[0])?;
    let policies = [
        (POLICY_NEVER, ResamplingPolicy::Never, config.limit_sigma2(&profile)?),
        (
            POLICY_THRESHOLD,
            ResamplingPolicy::Threshold { thresholds: thresholds.clone(), grid: config.build_grid()? },
            max_segment_sigma2(&profile, &thresholds),
        ),
    ];
    let mut cells = Vec::new();
    let mut slopes = Vec::new();
    for (name, policy, sigma2) in &policies {
        for &d in &config.dims {
            let schedule = config.build_schedule(d, None)?;
            let mut log_n = Vec::new();
            let mut log_rmse = Vec::new();
            for &n in &config.n_particles {
                let runs = replicates(config, |seed| {
                    run_smc(seed, &target, &schedule, &kernel, policy, n)?.marginal(h, 0)
                })?;
                let estimates: Vec<f64> = runs.into_iter().map(|(_, _, e)| e).collect();
                let (rmse, rmse_se) = rmse(&estimates, pi_h);
                log_n.push((n as f64).ln());
                log_rmse.push(rmse.ln());
                let shape = mc_error_shape(*sigma2, 2.0, n);
                cells.push(McErrorCell { policy: name, d, n, estimates, rmse, rmse_se, shape });
            }
            if log_n.len() >= 2 {
                let (slope, slope_se) = stats::ols_slope(&log_n, &log_rmse);
                slopes.push(McErrorSlope { policy: name, d, slope, slope_se });
            }
        }
    }
    Ok(McErrorReport { pi_h, cells, slopes })
}

// ---------------------------------------------------------------------------
// Resampling counts and times

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplingRun {
    pub seed: u64,
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub pre_resample_ess: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplingCell {
    pub d: usize,
    pub n: usize,
    pub runs: Vec<ResamplingRun>,
    pub theory: Vec<ResampleTime>,
}

impl ResamplingCell {
    pub fn counts(&self) -> Vec<usize> {
        self.runs.iter().map(|r| r.steps.len()).collect()
    }

    pub fn modal_count(&self) -> usize {
        stats::mode(&self.counts()).unwrap_or(0)
    }

    /// Fraction of runs whose count lies in `{m-1, m, m+1}` around `center`.
    pub fn fraction_near(&self, center: usize) -> f64 {
        let hits = self.counts().iter().filter(|&&c| c.abs_diff(center) <= 1).count();
        hits as f64 / self.runs.len() as f64
    }

    /// Mean `|T_k - t_k(d)|` over every event that has a theoretical counterpart.
    pub fn mean_abs_time_error(&self) -> f64 {
        let errors: Vec<f64> = self
            .runs
            .iter()
            .flat_map(|r| r.times.iter().zip(&self.theory).map(|(t, th)| (t - th.t).abs()))
            .collect();
        if errors.is_empty() {
            f64::NAN
        } else {
            stats::mean(&errors)
        }
    }

    /// Fraction of runs that resample exactly at the theoretical steps.
    pub fn coincidence_frequency(&self) -> f64 {
        let theory: Vec<Option<usize>> = self.theory.iter().map(|t| t.step).collect();
        let hits = self
            .runs
            .iter()
            .filter(|r| r.steps.iter().map(|&s| Some(s)).eq(theory.iter().copied()))
            .count();
        hits as f64 / self.runs.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct ResamplingReport {
    pub limit: Vec<ResampleTime>,
    pub cells: Vec<ResamplingCell>,
    pub segments: Option<SegmentReport>,
}

impl ResamplingReport {
    pub fn cell(&self, d: usize, n: usize) -> Option<&ResamplingCell> {
        self.cells.iter().find(|c| c.d == d && c.n == n)
    }

    pub fn tables(&self) -> Vec<Table> {
        let mut events = Table::new("resampling_events", &["d", "N", "replicate", "seed", "k", "step", "t"]);
        let mut counts = Table::new("resampling_counts", &["d", "N", "count", "runs", "frequency"]);
        let mut theory = Table::new("resampling_theory", &["d", "k", "step", "t_k", "criterion_value_at_t_k"]);
        let mut summary = Table::new(
            "resampling_summary",
            &[
                "d",
                "N",
                "replicates",
                "theoretical_count",
                "modal_count",
                "fraction_within_one",
                "mean_abs_time_error",
                "coincidence_frequency",
            ],
        );
        let mut limit = Table::new("resampling_limit", &["k", "t_k", "criterion_value_at_t_k"]);
        for t in &self.limit {
            limit.push(row![t.k, t.t, t.criterion]);
        }
        let mut theory_done = Vec::new();
        for c in &self.cells {
            for (r, run) in c.runs.iter().enumerate() {
                for (k, (step, t)) in run.steps.iter().zip(&run.times).enumerate() {
                    events.push(row![c.d, c.n, r, run.seed, k + 1, step, t]);
                }
            }
            let all = c.counts();
            let max = all.iter().copied().max().unwrap_or(0);
            for count in 0..=max {
                let hits = all.iter().filter(|&&x| x == count).count();
                if hits > 0 {
                    counts.push(row![c.d, c.n, count, hits, hits as f64 / all.len() as f64]);
                }
            }
            if !theory_done.contains(&c.d) {
                theory_done.push(c.d);
                for t in &c.theory {
                    theory.push(row![c.d, t.k, t.step.unwrap_or(0), t.t, t.criterion]);
                }
            }
            let modal = c.modal_count();
            summary.push(row![
                c.d,
                c.n,
                c.runs.len(),
                c.theory.len(),
                modal,
                c.fraction_near(modal),
                c.mean_abs_time_error(),
                c.coincidence_frequency()
            ]);
        }
        let mut out = vec![events, counts, theory, limit, summary];
        if let Some(seg) = &self.segments {
            out.extend(seg.tables());
        }
        out
    }
}

/// Threshold-policy runs per `(d, N)`: event counts and times, compared with
/// the finite-`d` theoretical times on the same grid.
pub fn run_resampling_study(config: &ExperimentConfig) -> Result<ResamplingReport> {
    config.validate()?;
    config.require_policy(PolicyChoice::Threshold, "resampling")?;
    let target = config.build_target()?;
    let kernel = config.build_kernel()?;
    let policy = config.build_policy()?;
    let thresholds = config.build_thresholds()?;
    let grid = config.build_grid()?;
    let profile = config.build_profile()?;
    let limit = limiting_resample_times(&profile, &thresholds, grid);
    let mut cells = Vec::new();
    for &d in &config.dims {
        let schedule = config.build_schedule(d, None)?;
        let theory = theoretical_resample_times_d(
            &target,
            &kernel,
            &schedule,
            &thresholds,
            config.mc_reps,
            config.seed,
            grid,
        )?;
        for &n in &config.n_particles {
            let runs = replicates(config, |seed| {
                let rec = run_smc(seed, &target, &schedule, &kernel, &policy, n)?;
                Ok(resampling_run(seed, &rec))
            })?;
            let runs = runs.into_iter().map(|(_, _, r)| r).collect();
            cells.push(ResamplingCell { d, n, runs, theory: theory.clone() });
        }
    }
    let segments = if config.policy.segment_check { Some(run_segment_ess(config)?) } else { None };
    Ok(ResamplingReport { limit, cells, segments })
}

fn resampling_run(seed: u64, rec: &RunRecord) -> ResamplingRun {
    ResamplingRun {
        seed,
        steps: rec.resample_steps.clone(),
        times: rec.resample_times(),
        pre_resample_ess: rec.pre_resample_ess.clone(),
    }
}

// ---------------------------------------------------------------------------
// ESS within segments between fixed resampling times

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCell {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub sigma2: f64,
    pub observed: Vec<f64>,
    pub oracle: Vec<f64>,
    pub ks: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct SegmentReport {
    pub cells: Vec<SegmentCell>,
}

impl SegmentReport {
    pub fn tables(&self) -> Vec<Table> {
        let mut runs = Table::new("segment_ess_runs", &["d", "N", "k", "replicate", "pre_resample_ess"]);
        let mut ks = Table::new(
            "segment_ess",
            &["d", "N", "k", "t_start", "t_end", "sigma2", "replicates", "ks", "p_value"],
        );
        for c in &self.cells {
            for (r, e) in c.observed.iter().enumerate() {
                runs.push(row![c.d, c.n, c.k, r, e]);
            }
            ks.push(row![c.d, c.n, c.k, c.t_start, c.t_end, c.sigma2, c.observed.len(), c.ks, c.p_value]);
        }
        vec![runs, ks]
    }
}

/// Resamples at the finite-`d` theoretical times and compares the ESS just
/// before the `k`-th event with `ε_N` at the segment variance
/// `σ²_{t_{k-1}:t_k}`, taken between the realized step temperatures.
pub fn run_segment_ess(config: &ExperimentConfig) -> Result<SegmentReport> {
    config.validate()?;
    let target = config.build_target()?;
    let kernel = config.build_kernel()?;
    let thresholds = config.build_thresholds()?;
    let grid = config.build_grid()?;
    let profile = config.build_profile()?;
    let phi0 = config.phi0()?;
    let mut cells = Vec::new();
    for &d in &config.dims {
        let schedule = config.build_schedule(d, None)?;
        let theory = theoretical_resample_times_d(
            &target,
            &kernel,
            &schedule,
            &thresholds,
            config.mc_reps,
            config.seed,
            grid,
        )?;
        // an event on the last step leaves no time to resample before the end
        let times: Vec<f64> = theory.iter().map(|t| t.t).filter(|&t| t < 1.0).collect();
        let policy = ResamplingPolicy::FixedTimes(times.clone());
        for &n in &config.n_particles {
            let runs = replicates(config, |seed| {
                run_smc(seed, &target, &schedule, &kernel, &policy, n).map(|r| r.pre_resample_ess)
            })?;
            let mut start = phi0;
            for (k, &end) in times.iter().enumerate() {
                let observed: Vec<f64> = runs.iter().map(|(_, _, e)| e[k]).collect();
                let sigma2 = profile.sigma2(start, end);
                let oracle = sample_limiting_ess(
                    oracle_seed(config, d as u64, n as u64, k as u64 + 1),
                    n,
                    sigma2,
                    config.oracle_samples,
                )?;
                let ks = stats::ks_two_sample(&observed, &oracle);
                let p_value = stats::ks_two_sample_pvalue(ks, observed.len(), oracle.len());
                cells.push(SegmentCell { d, n, k: k + 1, t_start: start, t_end: end, sigma2, observed, oracle, ks, p_value });
                start = end;
            }
        }
    }
    Ok(SegmentReport { cells })
}

// ---------------------------------------------------------------------------
// Single runs, profiles, times

/// Per-run traces and summaries for every `(d, N, replicate)`.
pub fn run_single(config: &ExperimentConfig) -> Result<Vec<Table>> {
    config.validate()?;
    let target = config.build_target()?;
    let kernel = config.build_kernel()?;
    let policy = config.build_policy()?;
    let cutoff = config.indicator_cutoff;
    let h = move |x: f64| if x <= cutoff { 1.0 } else { 0.0 };
    let mut summary = Table::new("run_summary", &["seed", "d", "N", "terminal_ess", "n_resamples", "marginal_estimate"]);
    let mut traces = Vec::new();
    for &d in &config.dims {
        let schedule = config.build_schedule(d, None)?;
        for &n in &config.n_particles {
            let runs = replicates(config, |seed| run_smc(seed, &target, &schedule, &kernel, &policy, n))?;
            for (r, seed, rec) in runs {
                let s = rec.summary(seed, rec.marginal(h, 0)?);
                summary.push(row![s.seed, s.d, s.n, s.terminal_ess, s.n_resamples, s.marginal_estimate]);
                let mut trace = Table::new(format!("run_trace_d{d}_N{n}_r{r}"), &["step", "phi", "ess", "resampled"]);
                for t in rec.trace_rows() {
                    trace.push(row![t.step, t.phi, t.ess, t.resampled]);
                }
                traces.push(trace);
            }
        }
    }
    let mut out = vec![summary];
    out.extend(traces);
    Ok(out)
}

pub fn profile_table(profile: &VarianceProfile) -> Table {
    let mut t = Table::new("variance_profile", &["u", "v", "sigma2_cum"]);
    for r in profile.rows() {
        t.push(row![r.u, r.v, r.sigma2_cum]);
    }
    t
}

#[derive(Debug, Clone)]
pub struct TimesReport {
    pub limit: Vec<ResampleTime>,
    /// `(d, t_k(d))` for every configured dimension, when requested.
    pub finite: Option<Vec<(usize, Vec<ResampleTime>)>>,
}

impl TimesReport {
    pub fn tables(&self) -> Vec<Table> {
        let mut limit = Table::new("limiting_times", &["k", "t_k", "criterion_value_at_t_k"]);
        for t in &self.limit {
            limit.push(row![t.k, t.t, t.criterion]);
        }
        let mut out = vec![limit];
        if let Some(all) = &self.finite {
            let mut finite = Table::new("theoretical_times", &["d", "k", "step", "t_k", "criterion_value_at_t_k"]);
            for (d, times) in all {
                for t in times {
                    finite.push(row![d, t.k, t.step.unwrap_or(0), t.t, t.criterion]);
                }
            }
            out.push(finite);
        }
        out
    }
}

/// Limiting resampling times from the profile, and finite-`d` times when `with_finite_d`.
pub fn run_times(config: &ExperimentConfig, with_finite_d: bool) -> Result<TimesReport> {
    config.validate()?;
    let thresholds = config.build_thresholds()?;
    let grid = config.build_grid()?;
    let profile = config.build_profile()?;
    let limit = limiting_resample_times(&profile, &thresholds, grid);
    let mut finite = None;
    if with_finite_d {
        let mut all = Vec::new();
        let target = config.build_target()?;
        let kernel = config.build_kernel()?;
        for &d in &config.dims {
            let schedule = config.build_schedule(d, None)?;
            let times =
                theoretical_resample_times_d(&target, &kernel, &schedule, &thresholds, config.mc_reps, config.seed, grid)?;
            all.push((d, times));
        }
        finite = Some(all);
    }
    Ok(TimesReport { limit, finite })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c.target, "gaussian");
        assert_eq!(c.schedule.phi0, 0.5);
        assert_eq!(c.n_particles, vec![100]);
        assert_eq!(c.oracle_samples, 20_000);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = ExperimentConfig::from_toml("bogus = 1").unwrap_err();
        assert!(matches!(err, SmcError::Config(_)));
        let err = ExperimentConfig::from_toml("[kernel]\nkind = \"gibbs\"").unwrap_err();
        assert!(matches!(err, SmcError::Config(_)));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let text = r#"
            seed = 9
            dims = [8, 16]
            [schedule]
            kind = "general"
            table = [[0.0, 0.3], [0.5, 0.6], [1.0, 1.0]]
            [kernel]
            kind = "rwm"
            f = "table"
            f_table = [[0.0, 0.5], [1.0, 1.0]]
            [policy]
            kind = "threshold"
            thresholds = [0.5, 0.4]
            grid = 20
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.phi0().unwrap(), 0.3);
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again.to_toml(), c.to_toml());
        assert!(c.build_schedule(8, None).is_ok());
        assert!(matches!(c.build_policy().unwrap(), ResamplingPolicy::Threshold { grid: Some(_), .. }));
    }

    #[test]
    fn invalid_lists_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.dims.clear();
        assert!(matches!(c.validate(), Err(SmcError::Config(_))));
        let mut c = ExperimentConfig::default();
        c.replicates = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn analytic_profile_needs_gaussian_perfect() {
        let mut c = ExperimentConfig::default();
        c.profile.source = ProfileSource::Analytic;
        assert!(matches!(c.build_profile(), Err(SmcError::Config(_))));
        c.kernel.kind = KernelChoice::Perfect;
        assert!((c.build_profile().unwrap().total() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn table_csv_has_header_even_when_empty() {
        let t = Table::new("x", &["a", "b"]);
        assert_eq!(t.to_csv().unwrap(), b"a,b\r\n");
    }

    #[test]
    fn study_preconditions() {
        let mut c = ExperimentConfig::default();
        c.policy.kind = PolicyChoice::Threshold;
        assert!(matches!(run_ess_convergence(&c), Err(SmcError::Config(_))));
        let c = ExperimentConfig::default();
        assert!(matches!(run_resampling_study(&c), Err(SmcError::Config(_))));
        assert!(matches!(run_critical_scaling(&c), Err(SmcError::Config(_))));
    }
}
