//! Batch experiment runner: TOML scenario configs, deterministic seeding,
//! CSV/JSON artifacts and exit codes.
//!
//! Exit status: 0 when every asserted property passes, 1 on a failure, 2
//! when the result is inconclusive (degenerate weights, coverage), 3 on a
//! configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::coupling::{
    entropy_study, identity_k, offset_segment, write_entropy_csv, CouplingConfig, Offset,
};
use crate::delay_measure::{check_shift_domination, grid_count, DelayMeasure, MeasureKind, Segment};
use crate::error::{Error, Result};
use crate::functional::SegFunctional;
use crate::girsanov::weak_estimate;
use crate::harnack::{check_gradient_estimate, estimate_p, harnack_grid, HarnackProblem, Verdict};
use crate::model::{dini_check, dyadic_grid, validate_assumptions, Dynamics, ModelSpec, PointDrift, ValidationOptions};
use crate::solver::{apriori_check_batch, bihari_bound, run_batch, Batch, SolverConfig};
use crate::stats::mean_stderr;
use crate::zvonkin::{check_equivalence, choose_lambda, transformed_model, verify_decay, TransformedModel, ZvonkinGrid};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Simulate,
    Validate,
    GirsanovCheck,
    Couple,
    Harnack,
    Gradient,
    Zvonkin,
    Bihari,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Catalog entry plus optional parameter overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub amp: Option<f64>,
    #[serde(default)]
    pub truncation: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { name: "reference".into(), rate: None, beta: None, sigma: None, amp: None, truncation: None }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let rate = self.rate.unwrap_or(1.0);
        let beta = self.beta.unwrap_or(0.5);
        let sigma = self.sigma.unwrap_or(1.0);
        let mut m = match self.name.as_str() {
            "zero" => ModelSpec::zero(rate),
            "ou" => ModelSpec::ou(rate, sigma),
            "reference" => {
                let mut m = ModelSpec::reference();
                m.rates = vec![rate];
                if let Some(b) = self.beta {
                    m.delay_drift = crate::model::DelayDrift::LinearMean { beta: b };
                }
                if let Some(s) = self.sigma {
                    m.diffusion = crate::model::Diffusion::Constant { matrix: vec![s] };
                }
                m
            }
            "linear-delay" => ModelSpec::linear_delay(rate, beta, sigma),
            "explosive" => ModelSpec::explosive(rate),
            "multiplicative" => ModelSpec::multiplicative(rate, beta, sigma, self.amp.unwrap_or(0.5)),
            other => {
                return Err(Error::Config(format!(
                    "model.name: unknown model `{other}`, expected one of {}",
                    ModelSpec::catalog_names().join(", ")
                )))
            }
        };
        if let Some(level) = self.truncation {
            m = m.truncated(level);
        }
        m.check().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(m)
    }
}

/// Initial segment `ξ(θ) = origin + slope·θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub origin: Vec<f64>,
    #[serde(default)]
    pub slope: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig { origin: vec![0.5], slope: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingSection {
    pub horizons: Vec<f64>,
    /// `‖ξ - η‖_{C_ν}` values; 0 gives `η = ξ`.
    pub distances: Vec<f64>,
    pub offset: Offset,
    /// Defaults to the declared constant of the coupled system.
    pub k: Option<f64>,
    pub terminal_steps: usize,
    pub delta_couple: Option<f64>,
    /// Couple the transformed system; default: when `b` is not Lipschitz.
    pub transform: Option<bool>,
}

impl Default for CouplingSection {
    fn default() -> Self {
        CouplingSection {
            horizons: vec![1.0],
            distances: vec![0.1],
            offset: Offset::Constant,
            k: None,
            terminal_steps: 4,
            delta_couple: None,
            transform: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZvonkinSection {
    pub lambdas: Vec<f64>,
    /// Time window of `u`; default `T_end` of the solver.
    pub window: Option<f64>,
    pub grid: ZvonkinGrid,
    /// Halving steps for the pathwise equivalence check; empty skips it.
    pub equivalence_steps: Vec<f64>,
    pub equivalence_max_ratio: f64,
    /// Rows of the exported `u` table (every k-th time).
    pub export_every: usize,
}

impl Default for ZvonkinSection {
    fn default() -> Self {
        ZvonkinSection {
            lambdas: vec![2.0, 4.0, 8.0, 16.0, 32.0],
            window: None,
            grid: ZvonkinGrid::default(),
            equivalence_steps: vec![],
            equivalence_max_ratio: 0.75,
            export_every: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientSection {
    pub horizons: Vec<f64>,
    pub eps: f64,
    /// Fixed `Ĉ`; fitted from couplings when absent.
    pub c_hat: Option<f64>,
    pub direction: Offset,
}

impl Default for GradientSection {
    fn default() -> Self {
        GradientSection { horizons: vec![0.25, 0.5, 1.0], eps: 0.01, c_hat: None, direction: Offset::Origin }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BihariSection {
    pub min_pass_fraction: f64,
    /// `Φ(s) = c(1+s)` closed-form check; `None` skips it.
    pub closed_form_c: Option<f64>,
}

impl Default for BihariSection {
    fn default() -> Self {
        BihariSection { min_pass_fraction: 0.999, closed_form_c: Some(0.5) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scenario: Option<Scenario>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_r0")]
    pub r0: f64,
    #[serde(default = "default_measure")]
    pub measure: MeasureKind,
    pub solver: SolverConfig,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Not part of the output; results do not depend on it.
    #[serde(default, skip_serializing)]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default = "default_functional")]
    pub functional: SegFunctional,
    /// Paths whose full trajectory is written by `simulate`.
    #[serde(default = "default_keep")]
    pub keep_paths: usize,
    #[serde(default)]
    pub coupling: CouplingSection,
    #[serde(default)]
    pub zvonkin: ZvonkinSection,
    #[serde(default)]
    pub gradient: GradientSection,
    #[serde(default)]
    pub bihari: BihariSection,
    #[serde(default)]
    pub validation: Option<ValidationOptions>,
}

fn default_r0() -> f64 {
    1.0
}
fn default_measure() -> MeasureKind {
    MeasureKind::Exponential { lambda: 1.0 }
}
fn default_paths() -> usize {
    1000
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_functional() -> SegFunctional {
    SegFunctional::PositiveTanh2 { eps: 1e-6 }
}
fn default_keep() -> usize {
    5
}

/// Parses and validates a TOML config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        let h = self.solver.h;
        if !(h > 0.0) {
            return bad("solver.h", format!("step must be positive, got {h}"));
        }
        if self.paths < 1 {
            return bad("paths", "need at least one path".into());
        }
        let on_grid = |t: f64| grid_count(t, h).is_some();
        if !on_grid(self.r0) {
            return bad("r0", format!("h = {h} does not divide r0 = {}", self.r0));
        }
        if !on_grid(self.solver.t_end) {
            return bad("solver.t_end", format!("h = {h} does not divide T_end = {}", self.solver.t_end));
        }
        for (name, list) in [("coupling.horizons", &self.coupling.horizons), ("gradient.horizons", &self.gradient.horizons)] {
            if let Some(t) = list.iter().find(|t| !(**t > 0.0) || !on_grid(**t)) {
                return bad(name, format!("h = {h} does not divide T = {t}"));
            }
        }
        if self.coupling.distances.iter().any(|d| !(*d >= 0.0)) {
            return bad("coupling.distances", "distances must be non-negative".into());
        }
        if self.initial.origin.is_empty() {
            return bad("initial.origin", "needs at least one component".into());
        }
        self.model.build()?;
        self.measure_at(h)?;
        Ok(())
    }

    fn measure_at(&self, h: f64) -> Result<DelayMeasure> {
        DelayMeasure::new(self.measure.clone(), self.r0, h).map_err(|e| Error::Config(format!("measure: {e}")))
    }

    fn initial_segment(&self, nu: &DelayMeasure) -> Segment {
        let o = self.initial.origin.clone();
        let s = self.initial.slope;
        Segment::from_fn(nu, o.len(), move |th, out| {
            for (x, c) in out.iter_mut().zip(&o) {
                *x = c + s * th;
            }
        })
    }

    fn batch(&self) -> Batch {
        Batch::new(self.paths, self.seed).with_workers(self.workers)
    }
}

#[derive(Parser, Debug)]
#[command(name = "delaylab", version, about = "Monte Carlo experiments for semi-linear SDEs with delay")]
pub struct Cli {
    pub scenario: Scenario,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Worker threads (0 = all cores); outputs do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Result of one scenario: verdict, JSON report and CSV tables.
pub struct Outcome {
    pub verdict: Verdict,
    pub summary: String,
    pub report: serde_json::Value,
    pub tables: Vec<(String, String)>,
}

pub fn exit_code(v: Verdict) -> i32 {
    match v {
        Verdict::Pass => 0,
        Verdict::Fail => 1,
        Verdict::Inconclusive => 2,
    }
}

fn verdict_of(pass: bool) -> Verdict {
    if pass {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Loads the config named on the command line and applies the flag
/// overrides.
pub fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&cli.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.scenario = Some(cli.scenario);
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.paths {
        cfg.paths = n;
    }
    if let Some(h) = cli.step {
        cfg.solver.h = h;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(f) = cli.format {
        cfg.format = f;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the configured scenario and writes its artifacts under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let scenario = cfg.scenario.ok_or_else(|| Error::Config("scenario: missing".into()))?;
    let mut outcome = match scenario {
        Scenario::Simulate => simulate(cfg)?,
        Scenario::Validate => validate(cfg)?,
        Scenario::GirsanovCheck => girsanov_check(cfg)?,
        Scenario::Couple => couple(cfg)?,
        Scenario::Harnack => harnack(cfg)?,
        Scenario::Gradient => gradient(cfg)?,
        Scenario::Zvonkin => zvonkin(cfg)?,
        Scenario::Bihari => bihari(cfg)?,
    };
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario,
        "verdict": outcome.verdict,
        "config": cfg,
        "result": outcome.report,
    });
    outcome.report = report;
    write_artifacts(cfg, &outcome)?;
    Ok(outcome)
}

fn write_artifacts(cfg: &ExperimentConfig, o: &Outcome) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let mut report = o.report.clone();
    match cfg.format {
        Format::Csv => {
            for (name, body) in &o.tables {
                fs::write(cfg.out.join(format!("{name}.csv")), body)?;
            }
        }
        Format::Json => {
            let tables: serde_json::Map<String, serde_json::Value> =
                o.tables.iter().map(|(n, b)| (n.clone(), csv_to_json(b))).collect();
            report["tables"] = serde_json::Value::Object(tables);
        }
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(cfg.out.join("report.json"), text + "\n")?;
    Ok(())
}

fn csv_to_json(body: &str) -> serde_json::Value {
    let mut lines = body.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let rows: Vec<serde_json::Value> = lines
        .map(|l| {
            let obj: serde_json::Map<String, serde_json::Value> = header
                .iter()
                .zip(l.split(','))
                .map(|(k, v)| {
                    let val = v.parse::<f64>().ok().and_then(|x| serde_json::Number::from_f64(x).map(serde_json::Value::Number));
                    (k.to_string(), val.unwrap_or_else(|| serde_json::Value::String(v.into())))
                })
                .collect();
            serde_json::Value::Object(obj)
        })
        .collect();
    serde_json::Value::Array(rows)
}

/// The system the coupling runs on.
#[allow(clippy::large_enum_variant)]
enum Coupled {
    Raw(ModelSpec),
    Transformed(Box<TransformedModel>),
}

impl Coupled {
    fn dynamics(&self) -> &dyn Dynamics {
        match self {
            Coupled::Raw(m) => m,
            Coupled::Transformed(t) => t.as_ref(),
        }
    }

    fn k(&self, nu: &DelayMeasure) -> f64 {
        match self {
            Coupled::Raw(m) => identity_k(m, nu),
            Coupled::Transformed(t) => t.declared_k(nu),
        }
    }
}

fn lipschitz_point_drift(m: &ModelSpec) -> bool {
    matches!(m.point_drift, PointDrift::Zero | PointDrift::Linear { .. })
}

fn coupled_system(cfg: &ExperimentConfig, m: &ModelSpec, window: f64) -> Result<Coupled> {
    let transform = cfg.coupling.transform.unwrap_or(!lipschitz_point_drift(m));
    if !transform {
        return Ok(Coupled::Raw(m.clone()));
    }
    let rd = choose_lambda(m, &cfg.zvonkin.lambdas, window, &cfg.zvonkin.grid)?;
    Ok(Coupled::Transformed(Box::new(transformed_model(m, &rd)?)))
}

fn coupling_config(cfg: &ExperimentConfig, sys: &Coupled, nu: &DelayMeasure) -> CouplingConfig {
    let mut c = CouplingConfig::new(1.0, cfg.coupling.k.unwrap_or_else(|| sys.k(nu)));
    c.terminal_steps = cfg.coupling.terminal_steps;
    c.delta_couple = cfg.coupling.delta_couple;
    c
}

fn pairs(cfg: &ExperimentConfig, nu: &DelayMeasure, xi: &Segment, horizons: &[f64]) -> Vec<(f64, Segment)> {
    let mut out = Vec::new();
    for &t in horizons {
        for &d in &cfg.coupling.distances {
            out.push((t, offset_segment(nu, xi, d, cfg.coupling.offset)));
        }
    }
    out
}

fn simulate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.model.build()?;
    let nu = cfg.measure_at(cfg.solver.h)?;
    let xi = cfg.initial_segment(&nu);
    let d = m.dim();
    let keep = cfg.keep_paths;
    let runs = run_batch(&m, &nu, &xi, &cfg.solver, &cfg.batch(), |run| {
        (run.buf.state().to_vec(), run.stopped_at, run.buf.states().to_vec())
    });
    let mut terminal = String::from("path");
    let mut traj = String::from("path,t");
    for i in 0..d {
        let _ = write!(terminal, ",x{i}");
        let _ = write!(traj, ",x{i}");
    }
    terminal.push_str(",stopped_at\n");
    traj.push('\n');
    let mut finals = vec![Vec::new(); d];
    let mut stopped = 0usize;
    for (p, r) in runs.into_iter().enumerate() {
        let (x, stop, states) = r?;
        let _ = write!(terminal, "{p}");
        for v in &x {
            let _ = write!(terminal, ",{v}");
        }
        match stop {
            Some(t) => {
                stopped += 1;
                let _ = writeln!(terminal, ",{t}");
            }
            None => {
                terminal.push_str(",\n");
                for (i, v) in x.iter().enumerate() {
                    finals[i].push(*v);
                }
            }
        }
        if p < keep {
            for (k, pt) in states.chunks(d).enumerate() {
                let t = -nu.r0() + k as f64 * cfg.solver.h;
                let _ = write!(traj, "{p},{t}");
                for v in pt {
                    let _ = write!(traj, ",{v}");
                }
                traj.push('\n');
            }
        }
    }
    let moments: Vec<_> = finals
        .iter()
        .map(|v| {
            let m = mean_stderr(v);
            json!({"mean": m.mean, "stderr": m.stderr, "variance": crate::stats::variance(v)})
        })
        .collect();
    let verdict = verdict_of(stopped == 0);
    Ok(Outcome {
        verdict,
        summary: format!("simulate: {} paths, {stopped} stopped early", cfg.paths),
        report: json!({"paths": cfg.paths, "stopped": stopped, "terminal": moments}),
        tables: vec![("terminal".into(), terminal), ("trajectories".into(), traj)],
    })
}

fn validate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.model.build()?;
    let nu = cfg.measure_at(cfg.solver.h)?;
    let mut opts = cfg.validation.clone().unwrap_or_default();
    opts.seed = cfg.seed;
    let rep = validate_assumptions(&m, &nu, cfg.solver.t_end, &opts)?;
    let dini = dini_check(&m.modulus, &dyadic_grid(40));
    let shift = check_shift_domination(&nu, cfg.solver.t_end);
    let pass = rep.pass() && dini.pass() && shift.pass;
    let mut table = String::from("check,pass,worst_ratio,samples\n");
    for c in &rep.checks {
        let _ = writeln!(table, "{},{},{},{}", c.name, c.pass, c.worst_ratio, c.samples);
    }
    Ok(Outcome {
        verdict: verdict_of(pass),
        summary: format!("validate: {} checks, dini {}, shift domination {}", rep.checks.len(), dini.pass(), shift.pass),
        report: json!({"assumptions": rep, "dini": dini, "shift": shift}),
        tables: vec![("checks".into(), table)],
    })
}

fn girsanov_check(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.model.build()?;
    let nu = cfg.measure_at(cfg.solver.h)?;
    let xi = cfg.initial_segment(&nu);
    let f = &cfg.functional;
    let b = cfg.batch();
    let direct = estimate_p(&m, &nu, f, &xi, cfg.solver.t_end, &cfg.solver, &b)?;
    let reweighted = weak_estimate(&m, &nu, f, &xi, &cfg.solver, &Batch { base_seed: cfg.seed.wrapping_add(1), ..b })?;
    let u = reweighted.unnormalized;
    let se = (direct.stderr.powi(2) + u.stderr.powi(2)).sqrt();
    let agree = (direct.value - u.mean).abs() <= 3.0 * se;
    let r_ok = (reweighted.mean_r.mean - 1.0).abs() <= 3.0 * reweighted.mean_r.stderr;
    let verdict = if reweighted.degenerate_weights { Verdict::Inconclusive } else { verdict_of(agree && r_ok) };
    let table = format!(
        "estimator,value,stderr\ndirect,{},{}\nreweighted,{},{}\nself_normalized,{},{}\nmean_r,{},{}\n",
        direct.value,
        direct.stderr,
        u.mean,
        u.stderr,
        reweighted.self_normalized.mean,
        reweighted.self_normalized.stderr,
        reweighted.mean_r.mean,
        reweighted.mean_r.stderr
    );
    Ok(Outcome {
        verdict,
        summary: format!("girsanov-check: direct {:.5} vs reweighted {:.5} (3se {:.5}), E[R] {:.4}", direct.value, u.mean, 3.0 * se, reweighted.mean_r.mean),
        report: json!({"direct": direct, "reweighted": reweighted, "agree": agree, "weights_normalized": r_ok}),
        tables: vec![("estimates".into(), table)],
    })
}

fn couple(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.model.build()?;
    let nu = cfg.measure_at(cfg.solver.h)?;
    let xi = cfg.initial_segment(&nu);
    let t_max = cfg.coupling.horizons.iter().cloned().fold(0.0, f64::max);
    let sys = coupled_system(cfg, &m, t_max + nu.r0())?;
    let base = coupling_config(cfg, &sys, &nu);
    let ps = pairs(cfg, &nu, &xi, &cfg.coupling.horizons);
    let (rows, fit) = entropy_study(sys.dynamics(), &nu, &xi, &ps, &base, &cfg.solver, &cfg.batch())?;
    let mut pass = true;
    let mut inconclusive = false;
    for r in &rows {
        let s = &r.summary;
        pass &= s.coupled_fraction >= 0.99 && (s.mean_r.mean - 1.0).abs() <= 3.0 * s.mean_r.stderr;
        inconclusive |= s.degenerate_weights;
    }
    let nonzero: Vec<_> = rows.iter().filter(|r| r.dist_sq > 0.0).collect();
    let fit_ok = match &fit {
        Some(f) if nonzero.len() >= 2 => f.positive && f.relative_residual <= 0.2,
        _ => true,
    };
    let mut csv = Vec::new();
    write_entropy_csv(&rows, &mut csv)?;
    let verdict = if inconclusive { Verdict::Inconclusive } else { verdict_of(pass && fit_ok) };
    Ok(Outcome {
        verdict,
        summary: format!("couple: {} settings, K = {:.4}, fit ok {fit_ok}", rows.len(), base.k),
        report: json!({"k": base.k, "rows": rows, "fit": fit}),
        tables: vec![("entropy".into(), String::from_utf8_lossy(&csv).into_owned())],
    })
}

fn harnack(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.model.build()?;
    let nu = cfg.measure_at(cfg.solver.h)?;
    let xi = cfg.initial_segment(&nu);
    let t_max = cfg.coupling.horizons.iter().cloned().fold(0.0, f64::max);
    let sys = coupled_system(cfg, &m, t_max + nu.r0())?;
    let base = coupling_config(cfg, &sys, &nu);
    let ps = pairs(cfg, &nu, &xi, &cfg.coupling.horizons);
    let prob = HarnackProblem { coupled: sys.dynamics(), direct: &m, nu: &nu, f: &cfg.functional, solver: &cfg.solver };
    let grid = harnack_grid(&prob, &xi, &ps, &base, &cfg.batch())?;
    let mut table = String::from("horizon,dist0,dist,lhs,rhs,sigma,margin_sigma,verdict,fitted_rhs\n");
    for r in &grid.reports {
        let s = &r.setting;
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{}",
            s.horizon,
            s.dist0,
            s.dist,
            r.lhs,
            r.rhs,
            r.sigma,
            r.margin_sigma,
            serde_json::to_value(r.verdict).unwrap().as_str().unwrap_or(""),
            r.fitted_rhs.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    let verdict = grid.verdict();
    Ok(Outcome {
        verdict,
        summary: format!("harnack: {} settings, verdict {verdict:?}", grid.reports.len()),
        report: json!({"k": base.k, "settings": grid.reports, "entropy": grid.rows, "fit": grid.fit}),
        tables: vec![("harnack".into(), table)],
    })
}

fn direction(nu: &DelayMeasure, d: usize, kind: Offset) -> Segment {
    let zero = Segment::constant(nu, &vec![0.0; d]);
    offset_segment(nu, &zero, 1.0, kind)
}

fn gradient(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.model.build()?;
    let nu = cfg.measure_at(cfg.solver.h)?;
    let xi = cfg.initial_segment(&nu);
    let g = &cfg.gradient;
    let (c_hat, fit) = match g.c_hat {
        Some(c) => (c, None),
        None => {
            let t_max = g.horizons.iter().cloned().fold(0.0, f64::max);
            let sys = coupled_system(cfg, &m, t_max + nu.r0())?;
            let base = coupling_config(cfg, &sys, &nu);
            let ps = pairs(cfg, &nu, &xi, &g.horizons);
            let (_, fit) = entropy_study(sys.dynamics(), &nu, &xi, &ps, &base, &cfg.solver, &cfg.batch())?;
            let fit = fit.ok_or_else(|| Error::Config("gradient: need at least two coupling settings to fit C".into()))?;
            (fit.gradient_constant(), Some(fit))
        }
    };
    let dir = direction(&nu, m.dim(), g.direction);
    let mut reports = Vec::new();
    let mut table = String::from("horizon,derivative,derivative_stderr,variance,ratio,ratio_rel_se,c_hat,pass\n");
    for &t in &g.horizons {
        let r = check_gradient_estimate(&m, &nu, &cfg.functional, &xi, &dir, t, g.eps, &cfg.solver, &cfg.batch(), Some(c_hat))?;
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            t,
            r.derivative.mean,
            r.derivative.stderr,
            r.variance,
            r.ratio,
            r.ratio_rel_se,
            c_hat,
            r.pass.unwrap_or(false)
        );
        reports.push(r);
    }
    let pass = reports.iter().all(|r| r.pass == Some(true));
    Ok(Outcome {
        verdict: verdict_of(pass),
        summary: format!("gradient: C_hat = {c_hat:.4}, {} horizons", reports.len()),
        report: json!({"c_hat": c_hat, "fit": fit, "reports": reports}),
        tables: vec![("gradient".into(), table)],
    })
}

fn zvonkin(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.model.build()?;
    let z = &cfg.zvonkin;
    let window = z.window.unwrap_or(cfg.solver.t_end);
    let decay = verify_decay(&m, &z.lambdas, window, &z.grid)?;
    let mut pass = decay.pass();
    let mut table = String::from("lambda,u,du,d2u,iterations,max_ratio,residual,accepted\n");
    for r in &decay.rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            r.lambda, r.norms.u, r.norms.du, r.norms.d2u, r.iterations, r.max_ratio, r.residual, r.accepted
        );
    }
    let mut tables = vec![("decay".into(), table)];
    let mut equivalence = None;
    if let Some(l) = decay.lambda_star {
        let rd = crate::zvonkin::solve_u(&m, l, window, &z.grid)?;
        let mut buf = Vec::new();
        rd.write_csv(&mut buf)?;
        let body = String::from_utf8_lossy(&buf);
        let mut lines = body.lines();
        let mut thinned = String::new();
        if let Some(h) = lines.next() {
            thinned.push_str(h);
            thinned.push('\n');
        }
        let nx = rd.nx;
        let every = z.export_every.max(1);
        for (i, l) in lines.enumerate() {
            if (i % nx) % every == 0 {
                thinned.push_str(l);
                thinned.push('\n');
            }
        }
        tables.push(("u".into(), thinned));
        if !z.equivalence_steps.is_empty() {
            let tm = transformed_model(&m, &rd)?;
            let o = &cfg.initial.origin;
            let s = cfg.initial.slope;
            let rep = check_equivalence(
                &m,
                &tm,
                |h| DelayMeasure::new(cfg.measure.clone(), cfg.r0, h),
                move |th, out| {
                    for (x, c) in out.iter_mut().zip(o.iter()) {
                        *x = c + s * th;
                    }
                },
                &z.equivalence_steps,
                window.min(cfg.solver.t_end),
                &cfg.solver,
                &cfg.batch(),
            )?;
            pass &= rep.pass(z.equivalence_max_ratio);
            equivalence = Some(rep);
        }
    } else {
        pass = false;
    }
    Ok(Outcome {
        verdict: verdict_of(pass),
        summary: format!("zvonkin: lambda* = {:?}, decay pass {}", decay.lambda_star, decay.pass()),
        report: json!({"decay": decay, "equivalence": equivalence}),
        tables,
    })
}

fn bihari(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.model.build()?;
    let nu = cfg.measure_at(cfg.solver.h)?;
    let xi = cfg.initial_segment(&nu);
    let rep = apriori_check_batch(&m, &nu, &xi, &cfg.solver, &cfg.batch())?;
    let mut pass = rep.pass_fraction >= cfg.bihari.min_pass_fraction;
    let mut closed = None;
    if let Some(c) = cfg.bihari.closed_form_c {
        let (k1, k2, alpha, t) = (1.0, 1.5, 0.5, cfg.solver.t_end);
        let phi = move |s: f64| c * (1.0 + s);
        let num = bihari_bound(&phi, k1, k2, alpha, t)?;
        let exact = closed_form_bihari(c, k1, k2, alpha, t);
        let rel = (num - exact).abs() / exact;
        pass &= rel <= 1e-8;
        closed = Some(json!({"c": c, "numeric": num, "analytic": exact, "relative_error": rel}));
    }
    let table = format!(
        "paths,pass_fraction,min_margin,k1,k2\n{},{},{},{},{}\n",
        rep.paths, rep.pass_fraction, rep.min_margin, rep.k1, rep.k2
    );
    Ok(Outcome {
        verdict: verdict_of(pass),
        summary: format!("bihari: pass fraction {:.5}", rep.pass_fraction),
        report: json!({"apriori": rep, "closed_form": closed}),
        tables: vec![("bihari".into(), table)],
    })
}

/// `Ψ⁻¹(α + T)` for `Φ(s) = c(1 + s)`.
pub fn closed_form_bihari(c: f64, k1: f64, k2: f64, alpha: f64, t: f64) -> f64 {
    let base = 1.0 + k1 + k2;
    (base * (2.0 * c * k2 * (alpha + t)).exp() - 1.0 - k1) / k2
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 3;
        }
    };
    match run(&cfg) {
        Ok(o) => {
            println!("{} [{}]", o.summary, serde_json::to_value(o.verdict).unwrap().as_str().unwrap_or(""));
            exit_code(o.verdict)
        }
        Err(e @ (Error::Coverage { .. } | Error::ExplosionBeforeHorizon { .. } | Error::Divergence { .. })) => {
            println!("inconclusive: {e}");
            2
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            3
        }
        Err(e) => {
            println!("fail: {e}");
            1
        }
    }
}

/// Reads every file in `dir` in name order, for byte-level comparison.
pub fn read_artifacts(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        out.push((e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?));
    }
    out.sort();
    Ok(out)
}
