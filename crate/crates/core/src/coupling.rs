//! Coupling by change of measures.
//!
//! `X` follows the reference dynamics from ξ. `Y` starts from η and is driven
//! by the same noise, with the delay drift taken along `X` and a bridging
//! drift `γ(t)⁻¹ Q(Y) Q⁻¹(X)(X - Y)` on `[0, T)` that forces `Y` onto `X` by
//! time `T`. The Girsanov shift
//! `φ = Q⁻¹(Y)(D(Y_t) - D(X_t)) - γ(t)⁻¹ Q⁻¹(X)(X - Y)`, with `D` the full
//! drift and `Q⁻¹ = Q*(QQ*)⁻¹`, makes `Y` a solution from η under `R·P`.
//!
//! Both processes are advanced by Euler–Maruyama. Over a step the bridging
//! drift removes the fraction `1 - (e^{K²(S-t-h)} - 1)/(e^{K²(S-t)} - 1)` of
//! `X - Y`, the exact flow of `ż = -z/γ(t)` towards `S = T - (m-1)h`. The
//! last `m` steps before `T` remove the whole gap; with a state-dependent
//! `Q` one such step leaves a residual of order `|∇Q| |X - Y| |ΔW|`, so
//! `m > 1` is needed to reach the coupling threshold at small `K²T`.

use serde::{Deserialize, Serialize};

use crate::delay_measure::{grid_count, seg_distance, CellSums, DelayMeasure, Segment};
use crate::error::{Error, Result};
use crate::functional::SegFunctional;
use crate::girsanov::WeightAccumulator;
use crate::linalg;
use crate::model::{Dynamics, ModelSpec, MAX_DIM};
use crate::parallel::map_indexed;
use crate::rng::{NoiseStream, StreamId};
use crate::solver::{Batch, PathBuffer, SamplePath, Scheme, SolverConfig};
use crate::stats::{effective_sample_size, least_squares, mean_stderr, ratio_estimate, MeanStderr};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    /// Coupling horizon `T`.
    pub horizon: f64,
    /// Constant `K` in `γ(t) = (1 - e^{(t-T)K²})/K²`.
    pub k: f64,
    /// Declare-coupled distance; default `1e-8 (1 + |ξ(0) - η(0)|)`.
    #[serde(default)]
    pub delta_couple: Option<f64>,
    /// Lower bound for `γ̂`; default `γ(T - h/2)`.
    #[serde(default)]
    pub gamma_floor: Option<f64>,
    /// Number `m` of full-contraction steps before `T`.
    #[serde(default = "default_terminal_steps")]
    pub terminal_steps: usize,
}

fn default_terminal_steps() -> usize {
    4
}

impl CouplingConfig {
    pub fn new(horizon: f64, k: f64) -> Self {
        CouplingConfig {
            horizon,
            k,
            delta_couple: None,
            gamma_floor: None,
            terminal_steps: default_terminal_steps(),
        }
    }

    fn check(&self) -> Result<()> {
        let pos = |v: Option<f64>| v.is_none_or(|x| x > 0.0);
        if !(self.horizon > 0.0) || !(self.k > 0.0) || !pos(self.delta_couple) || !pos(self.gamma_floor)
            || self.terminal_steps == 0
        {
            return Err(Error::Domain(format!("invalid coupling config {self:?}")));
        }
        Ok(())
    }
}

/// `γ(t) = (1 - e^{(t-T)K²})/K²` on `[0, T)`.
pub fn gamma(cfg: &CouplingConfig, t: f64) -> Result<f64> {
    if !(t >= 0.0 && t < cfg.horizon) {
        return Err(Error::Domain(format!("gamma needs 0 <= t < T = {}, got {t}", cfg.horizon)));
    }
    let k2 = cfg.k * cfg.k;
    Ok(-((t - cfg.horizon) * k2).exp_m1() / k2)
}

/// `γ'(t) = -e^{(t-T)K²}`.
pub fn gamma_prime(cfg: &CouplingConfig, t: f64) -> f64 {
    -((t - cfg.horizon) * cfg.k * cfg.k).exp()
}

/// Fraction of `X - Y` removed by the bridging drift over `[t, t+h]`;
/// zero from `T` on.
pub fn bridge_factor(cfg: &CouplingConfig, t: f64, h: f64) -> f64 {
    let tt = cfg.horizon;
    if t >= tt - 1e-12 * h {
        return 0.0;
    }
    let target = tt - (cfg.terminal_steps as f64 - 1.0) * h;
    if t + h >= target - 1e-12 * h {
        return 1.0;
    }
    let k2 = cfg.k * cfg.k;
    let a = (k2 * (target - t)).exp_m1();
    let b = (k2 * (target - (t + h))).exp_m1();
    1.0 - b / a
}

/// Effective `γ̂` over `[t, t+h]`, i.e. `h / bridge_factor`, floored.
pub fn gamma_hat(cfg: &CouplingConfig, t: f64, h: f64) -> Result<f64> {
    let c = bridge_factor(cfg, t, h);
    if c == 0.0 {
        return Err(Error::Domain(format!("no bridging drift at t = {t} >= T")));
    }
    let floor = match cfg.gamma_floor {
        Some(f) => f,
        None => gamma(cfg, (cfg.horizon - 0.5 * h).max(0.0))?,
    };
    Ok((h / c).max(floor))
}

/// `K` for a model used without transform: `‖A‖ + √C_B + ‖∇Q‖`, at least 1.
pub fn identity_k(m: &ModelSpec, nu: &DelayMeasure) -> f64 {
    let b = m.declared_bounds(nu);
    let a = m.rates.iter().fold(0.0, |x: f64, y| x.max(*y));
    (a + b.c_b.sqrt() + b.dq_sup).max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupledStep {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Full drift `AX + b + B` from a buffer.
fn full_drift<D: Dynamics + ?Sized>(model: &D, t: f64, buf: &PathBuffer, out: &mut [f64]) {
    let x = buf.state();
    model.drift(t, x, buf.coord(), buf.sums(), out);
    for (o, (l, xi)) in out.iter_mut().zip(model.rates().iter().zip(x)) {
        *o -= l * xi;
    }
}

/// One Euler–Maruyama step of the pair; `inv_gamma = 0` switches the bridge
/// off and `phi = None` skips the shift.
#[allow(clippy::too_many_arguments)]
fn pair_step<D: Dynamics + ?Sized>(
    model: &D,
    t: f64,
    xb: &PathBuffer,
    yb: &PathBuffer,
    dw: &[f64],
    h: f64,
    inv_gamma: f64,
    x_out: &mut [f64],
    y_out: &mut [f64],
    phi: Option<&mut [f64]>,
) -> Result<()> {
    let d = model.dim();
    let dn = model.noise_dim();
    let (x, y) = (xb.state(), yb.state());
    let mut dx = [0.0; MAX_DIM];
    let mut dy = [0.0; MAX_DIM];
    let mut qx = [0.0; MAX_DIM * MAX_DIM];
    let mut qy = [0.0; MAX_DIM * MAX_DIM];
    let mut work = [0.0; MAX_DIM * MAX_DIM + MAX_DIM];
    let mut gap = [0.0; MAX_DIM];
    let mut w = [0.0; MAX_DIM];
    let mut tmp = [0.0; MAX_DIM];
    full_drift(model, t, xb, &mut dx[..d]);
    model.diffusion(t, x, &mut qx[..d * dn]);
    model.diffusion(t, y, &mut qy[..d * dn]);
    for i in 0..d {
        gap[i] = x[i] - y[i];
    }
    if !linalg::right_pseudo_solve(&qx[..d * dn], d, dn, &gap[..d], &mut w[..dn], &mut work) {
        return Err(Error::SingularDiffusion { t });
    }
    let mut qdw_x = [0.0; MAX_DIM];
    let mut qdw_y = [0.0; MAX_DIM];
    let mut bridge = [0.0; MAX_DIM];
    linalg::mat_vec(&qx[..d * dn], d, dn, dw, &mut qdw_x[..d]);
    linalg::mat_vec(&qy[..d * dn], d, dn, dw, &mut qdw_y[..d]);
    linalg::mat_vec(&qy[..d * dn], d, dn, &w[..dn], &mut bridge[..d]);
    for i in 0..d {
        x_out[i] = x[i] + h * dx[i] + qdw_x[i];
        y_out[i] = y[i] + h * dx[i] + qdw_y[i] + h * inv_gamma * bridge[i];
        if !x_out[i].is_finite() || !y_out[i].is_finite() {
            return Err(Error::NumericalOverflow { t: t + h });
        }
    }
    let Some(phi) = phi else {
        return Ok(());
    };
    full_drift(model, t, yb, &mut dy[..d]);
    for i in 0..d {
        tmp[i] = dy[i] - dx[i];
    }
    if !linalg::right_pseudo_solve(&qy[..d * dn], d, dn, &tmp[..d], &mut phi[..dn], &mut work) {
        return Err(Error::SingularDiffusion { t });
    }
    for k in 0..dn {
        phi[k] -= inv_gamma * w[k];
    }
    Ok(())
}

/// One coupled step from segments `X_t` and `Y_t` (model coordinates).
#[allow(clippy::too_many_arguments)]
pub fn coupled_step<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    x_seg: &Segment,
    y_seg: &Segment,
    t: f64,
    dw: &[f64],
    cfg: &CouplingConfig,
    h: f64,
) -> Result<CoupledStep> {
    cfg.check()?;
    let xb = PathBuffer::new(model, nu, x_seg, 1)?;
    let yb = PathBuffer::new(model, nu, y_seg, 1)?;
    let d = model.dim();
    let dn = model.noise_dim();
    let inv_gamma = if t < cfg.horizon { 1.0 / gamma_hat(cfg, t, h)? } else { 0.0 };
    let mut out = CoupledStep {
        x: vec![0.0; d],
        y: vec![0.0; d],
        phi: vec![0.0; dn],
    };
    let phi = (t < cfg.horizon).then_some(&mut out.phi[..]);
    pair_step(model, t, &xb, &yb, dw, h, inv_gamma, &mut out.x, &mut out.y, phi)?;
    Ok(out)
}

/// `ξ(0)` and cell sums at the end of a path, in original coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndState {
    pub origin: Vec<f64>,
    pub mean: Vec<f64>,
    pub sq: f64,
}

impl EndState {
    fn of(buf: &PathBuffer) -> Self {
        EndState {
            origin: buf.coord().to_vec(),
            mean: buf.sums().mean.clone(),
            sq: buf.sums().sq,
        }
    }

    pub fn eval(&self, f: &SegFunctional) -> f64 {
        let sums = CellSums::from_parts(self.mean.clone(), self.sq);
        f.eval(&self.origin, &sums)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingResult {
    /// First grid time in `[0, T]` with `|X - Y| ≤ δ_couple`.
    pub tau: Option<f64>,
    /// `log R` accumulated over `[0, T)`.
    pub log_r: f64,
    pub int_phi_sq: f64,
    /// `X_{T+r0} = Y_{T+r0}` bitwise.
    pub coupled_at_end: bool,
    pub x_end: EndState,
    pub y_end: EndState,
    /// Set when the pair could not be advanced (overflow, explosion).
    pub failure: Option<String>,
    /// Both paths in model coordinates, when requested.
    pub paths: Option<(SamplePath, SamplePath)>,
}

impl CouplingResult {
    pub fn weight(&self) -> f64 {
        self.log_r.exp()
    }
}

/// Runs the coupled pair on `[0, T + r0]` from original-coordinate
/// segments ξ and η.
#[allow(clippy::too_many_arguments)]
pub fn run_coupling<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    xi: &Segment,
    eta: &Segment,
    cfg: &CouplingConfig,
    solver: &SolverConfig,
    id: StreamId,
    keep_paths: bool,
) -> Result<CouplingResult> {
    cfg.check()?;
    let h = solver.h;
    if (h - nu.h()).abs() > 1e-12 * h {
        return Err(Error::GridMismatch(format!("solver step {h} differs from the measure grid {}", nu.h())));
    }
    let t_steps = grid_count(cfg.horizon, h)
        .ok_or_else(|| Error::GridMismatch(format!("T = {} is not a multiple of h = {h}", cfg.horizon)))?;
    let total = t_steps + nu.cells();
    let d = model.dim();
    let dn = model.noise_dim();
    let xl = model.lift_segment(xi);
    let yl = model.lift_segment(eta);
    let mut xb = PathBuffer::new(model, nu, &xl, total)?;
    let mut yb = PathBuffer::new(model, nu, &yl, total)?;
    let delta = cfg
        .delta_couple
        .unwrap_or(1e-8 * (1.0 + linalg::norm(&diff(xl.origin(), yl.origin()))));
    let mut tau = None;
    if linalg::norm(&diff(xb.state(), yb.state())) <= delta {
        tau = Some(0.0);
        let x0 = xb.state().to_vec();
        yb.replace_last(model, nu, &x0)?;
    }
    let mut noise = NoiseStream::new(id.base_seed, id.path, solver.refinement);
    let mut acc = WeightAccumulator::default();
    let mut dw = [0.0; MAX_DIM];
    let mut xn = [0.0; MAX_DIM];
    let mut yn = [0.0; MAX_DIM];
    let mut phi = [0.0; MAX_DIM];
    let mut failure = None;
    let mut x_dw = Vec::new();
    for k in 0..total {
        let t = k as f64 * h;
        noise.increment(h, &mut dw[..dn]);
        if keep_paths {
            x_dw.extend_from_slice(&dw[..dn]);
        }
        let active = k < t_steps;
        let inv_gamma = if active && tau.is_none() { 1.0 / gamma_hat(cfg, t, h)? } else { 0.0 };
        let shift = active.then_some(&mut phi[..dn]);
        let step = pair_step(model, t, &xb, &yb, &dw[..dn], h, inv_gamma, &mut xn[..d], &mut yn[..d], shift);
        if let Err(e) = step {
            failure = Some(e.to_string());
            break;
        }
        if active {
            acc.add(&phi[..dn], &dw[..dn], h);
        }
        if tau.is_some() {
            yn[..d].copy_from_slice(&xn[..d]);
        }
        if linalg::norm(&xn[..d]) >= solver.r_explode || linalg::norm(&yn[..d]) >= solver.r_explode {
            failure = Some(format!("explosion at t = {}", t + h));
            break;
        }
        if tau.is_none() && active && linalg::norm(&diff(&xn[..d], &yn[..d])) <= delta {
            tau = Some(t + h);
            yn[..d].copy_from_slice(&xn[..d]);
        }
        let pushed = xb.push(model, nu, &xn[..d]).and_then(|_| yb.push(model, nu, &yn[..d]));
        if let Err(e) = pushed {
            failure = Some(e.to_string());
            break;
        }
    }
    let n = nu.cells();
    let coupled_at_end = failure.is_none() && {
        let lo = xb.states().len() - (n + 1) * d;
        xb.states()[lo..] == yb.states()[lo..]
    };
    let paths = keep_paths.then(|| {
        let make = |b: &PathBuffer| SamplePath {
            d,
            noise_dim: dn,
            h,
            r0: nu.r0(),
            t_end: b.t(),
            scheme: Scheme::EulerMaruyama,
            states: b.states().to_vec(),
            dw: x_dw.clone(),
            seed: Some(id),
            lifetime: None,
        };
        (make(&xb), make(&yb))
    });
    Ok(CouplingResult {
        tau,
        log_r: acc.log_r,
        int_phi_sq: acc.int_psi_sq,
        coupled_at_end,
        x_end: EndState::of(&xb),
        y_end: EndState::of(&yb),
        failure,
        paths,
    })
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Independent couplings for path indices `0..n`.
#[allow(clippy::too_many_arguments)]
pub fn run_coupling_batch<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    xi: &Segment,
    eta: &Segment,
    cfg: &CouplingConfig,
    solver: &SolverConfig,
    batch: &Batch,
) -> Result<Vec<CouplingResult>> {
    map_indexed(batch.n, batch.workers, |i| {
        run_coupling(
            model,
            nu,
            xi,
            eta,
            cfg,
            solver,
            StreamId { base_seed: batch.base_seed, path: i as u64 },
            false,
        )
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub n: usize,
    pub coupled_fraction: f64,
    pub failures: usize,
    /// `E_P[R]`.
    pub mean_r: MeanStderr,
    /// `E_Q log R = E_P[R log R] / E_P[R]`.
    pub entropy: MeanStderr,
    /// `E_Q log R` as `E_P[R ½∫|φ|²] / E_P[R]`, the same quantity without
    /// the martingale part.
    pub entropy_quadratic: MeanStderr,
    pub ess: f64,
    pub degenerate_weights: bool,
}

pub fn summarize(results: &[CouplingResult]) -> CouplingSummary {
    let n = results.len();
    let r: Vec<f64> = results.iter().map(|c| c.weight()).collect();
    let lr: Vec<f64> = results.iter().map(|c| c.log_r).collect();
    let half_q: Vec<f64> = results.iter().map(|c| 0.5 * c.int_phi_sq).collect();
    let ess = effective_sample_size(&r);
    CouplingSummary {
        n,
        coupled_fraction: results.iter().filter(|c| c.coupled_at_end).count() as f64 / n as f64,
        failures: results.iter().filter(|c| c.failure.is_some()).count(),
        mean_r: mean_stderr(&r),
        entropy: ratio_estimate(&r, &lr),
        entropy_quadratic: ratio_estimate(&r, &half_q),
        ess,
        degenerate_weights: ess < 0.01 * n as f64,
    }
}

/// One `(T, ξ, η)` setting of the entropy-cost study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub horizon: f64,
    /// `|ξ(0) - η(0)|²`.
    pub dist0_sq: f64,
    /// `‖ξ - η‖²_{C_ν}`.
    pub dist_sq: f64,
    pub summary: CouplingSummary,
}

impl EntropyRow {
    pub fn new(horizon: f64, nu: &DelayMeasure, xi: &Segment, eta: &Segment, results: &[CouplingResult]) -> Result<Self> {
        let d0 = diff(xi.origin(), eta.origin());
        Ok(EntropyRow {
            horizon,
            dist0_sq: linalg::dot(&d0, &d0),
            dist_sq: seg_distance(nu, xi, eta)?.powi(2),
            summary: summarize(results),
        })
    }
}

/// Least-squares fit of `E_Q log R ≈ c₁ |ξ(0)-η(0)|²/T + c₂ ‖ξ-η‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyFit {
    pub c1: f64,
    pub c2: f64,
    /// `‖y - ŷ‖ / ‖ŷ‖`.
    pub relative_residual: f64,
    pub predictions: Vec<f64>,
    pub positive: bool,
}

impl EntropyFit {
    pub fn predict(&self, horizon: f64, dist0_sq: f64, dist_sq: f64) -> f64 {
        self.c1 * dist0_sq / horizon + self.c2 * dist_sq
    }

    /// Constant of the gradient estimate implied by the fitted cost,
    /// `2(c₁ + c₂)`.
    pub fn gradient_constant(&self) -> f64 {
        2.0 * (self.c1 + self.c2)
    }
}

/// Uses the quadratic-variation estimate of `E_Q log R` per row.
pub fn fit_entropy_cost(rows: &[EntropyRow]) -> Result<EntropyFit> {
    let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.dist0_sq / r.horizon, r.dist_sq]).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.summary.entropy_quadratic.mean).collect();
    let fit = least_squares(&x, &y).ok_or_else(|| Error::Domain("entropy-cost fit is singular".into()))?;
    let (c1, c2) = (fit.coefficients[0], fit.coefficients[1]);
    Ok(EntropyFit {
        c1,
        c2,
        relative_residual: fit.relative_residual,
        predictions: x.iter().map(|r| c1 * r[0] + c2 * r[1]).collect(),
        positive: c1 > 0.0 && c2 > 0.0,
    })
}

/// How `η` differs from `ξ` in [`offset_segment`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Offset {
    /// `η = ξ + c` on the whole window.
    #[default]
    Constant,
    /// `η = ξ` except at `θ = 0`.
    Origin,
}

/// `η` with `‖ξ - η‖_{C_ν} = dist`, displaced along the first axis.
pub fn offset_segment(nu: &DelayMeasure, xi: &Segment, dist: f64, offset: Offset) -> Segment {
    let mut eta = xi.clone();
    match offset {
        Offset::Constant => {
            let c = dist / (nu.total_mass() + 1.0).sqrt();
            for j in 0..eta.len() {
                eta.at_mut(j)[0] += c;
            }
        }
        Offset::Origin => {
            let last = eta.len() - 1;
            eta.at_mut(last)[0] += dist;
        }
    }
    eta
}

/// Coupling batches for each `(T, η)` and the entropy-cost fit over them.
#[allow(clippy::too_many_arguments)]
pub fn entropy_study<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    xi: &Segment,
    pairs: &[(f64, Segment)],
    base: &CouplingConfig,
    solver: &SolverConfig,
    batch: &Batch,
) -> Result<(Vec<EntropyRow>, Option<EntropyFit>)> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (t, eta) in pairs {
        let cfg = CouplingConfig { horizon: *t, ..base.clone() };
        let res = run_coupling_batch(model, nu, xi, eta, &cfg, solver, batch)?;
        rows.push(EntropyRow::new(*t, nu, xi, eta, &res)?);
    }
    let fit = if rows.len() >= 2 { Some(fit_entropy_cost(&rows)?) } else { None };
    Ok((rows, fit))
}

pub const ENTROPY_CSV_HEADER: &str =
    "horizon,dist0,dist,coupled_fraction,entropy,entropy_stderr,entropy_quadratic,entropy_quadratic_stderr,mean_r,mean_r_stderr,ess";

pub fn write_entropy_csv(rows: &[EntropyRow], w: &mut dyn std::io::Write) -> Result<()> {
    writeln!(w, "{ENTROPY_CSV_HEADER}")?;
    for r in rows {
        let s = &r.summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.horizon,
            r.dist0_sq.sqrt(),
            r.dist_sq.sqrt(),
            s.coupled_fraction,
            s.entropy.mean,
            s.entropy.stderr,
            s.entropy_quadratic.mean,
            s.entropy_quadratic.stderr,
            s.mean_r.mean,
            s.mean_r.stderr,
            s.ess
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay_measure::MeasureKind;
    use crate::model::DelayDrift;
    use proptest::prelude::*;

    fn nu(h: f64) -> DelayMeasure {
        DelayMeasure::new(MeasureKind::Exponential { lambda: 1.0 }, 1.0, h).unwrap()
    }

    #[test]
    fn gamma_examples() {
        let c = CouplingConfig::new(1.0, 1.0);
        assert!((gamma(&c, 0.0).unwrap() - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!(gamma(&c, 1.0 - 1e-12).unwrap() < 1e-11);
        assert!(gamma(&c, 1.0).is_err());
        let c2 = CouplingConfig::new(1.0, 2.0);
        assert!((gamma(&c2, 0.5).unwrap() - (1.0 - (-2.0f64).exp()) / 4.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn gamma_identity(t in 0.0f64..0.999, k in 0.1f64..4.0) {
            let c = CouplingConfig::new(1.0, k);
            let g = gamma(&c, t).unwrap();
            let v = 2.0 + gamma_prime(&c, t) - k * k * g;
            prop_assert!((v - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gamma_is_strictly_decreasing(t in 0.0f64..0.99, dt in 1e-6f64..0.01, k in 0.1f64..4.0) {
            let c = CouplingConfig::new(1.0, k);
            prop_assert!(gamma(&c, t + dt).unwrap() < gamma(&c, t).unwrap());
        }
    }

    #[test]
    fn bridge_factors_telescope_to_full_contraction() {
        let mut c = CouplingConfig::new(1.0, 1.5);
        c.terminal_steps = 1;
        let h = 1.0 / 64.0;
        let mut keep = 1.0;
        for k in 0..64 {
            keep *= 1.0 - bridge_factor(&c, k as f64 * h, h);
        }
        assert_eq!(keep, 0.0);
        assert!(bridge_factor(&c, 62.0 * h, h) < 1.0);
        c.terminal_steps = 3;
        for k in 61..64 {
            assert_eq!(bridge_factor(&c, k as f64 * h, h), 1.0);
        }
        assert!(bridge_factor(&c, 60.0 * h, h) < 1.0);
        assert_eq!(bridge_factor(&c, 1.0, h), 0.0);
        // Small steps recover the continuous rate 1/γ.
        let t = 0.3;
        let hh = 1e-6;
        assert!((bridge_factor(&c, t, hh) / hh - 1.0 / gamma(&c, t).unwrap()).abs() < 1e-4);
    }

    fn scalar_identity_model() -> ModelSpec {
        ModelSpec::ou(0.0, 1.0)
    }

    #[test]
    fn coupled_state_is_absorbing() {
        let m = ModelSpec::linear_delay(1.0, 0.5, 1.0);
        let h = 1.0 / 16.0;
        let n = nu(h);
        let xi = Segment::constant(&n, &[0.3]);
        let c = CouplingConfig::new(1.0, 2.0);
        let s = coupled_step(&m, &n, &xi, &xi, 0.25, &[0.1], &c, h).unwrap();
        assert_eq!(s.x, s.y);
        assert_eq!(s.phi, vec![0.0]);
    }

    #[test]
    fn last_bridging_step_lands_on_x() {
        let m = scalar_identity_model();
        let h = 0.125;
        let n = nu(h);
        let c = CouplingConfig::new(1.0, 1.0);
        let xi = Segment::constant(&n, &[1.0]);
        let eta = Segment::constant(&n, &[0.2]);
        // Last step before T: the factor is one, so Y lands on X.
        let s = coupled_step(&m, &n, &xi, &eta, 1.0 - h, &[0.05], &c, h).unwrap();
        assert!((s.x[0] - s.y[0]).abs() < 1e-15);
        // Earlier: Y - X contracts by 1 - h/γ̂.
        let t = 0.25;
        let g = gamma_hat(&c, t, h).unwrap();
        let s = coupled_step(&m, &n, &xi, &eta, t, &[0.05], &c, h).unwrap();
        let expect = (0.2 - 1.0) * (1.0 - h / g);
        assert!((s.y[0] - s.x[0] - expect).abs() < 1e-12);
        assert!((s.phi[0] + (1.0 - 0.2) / g).abs() < 1e-12);
    }

    #[test]
    fn shift_is_bounded_by_segment_and_gap_terms() {
        let m = ModelSpec::linear_delay(1.0, 0.5, 1.0);
        let h = 1.0 / 32.0;
        let n = nu(h);
        let c = CouplingConfig::new(1.0, 2.0);
        let b = m.declared_bounds(&n);
        let k0 = (b.c_b.sqrt() + 1.0) * b.qq_inv_sup.sqrt();
        for (a, bb) in [(0.1, 0.3), (1.0, -1.0), (0.0, 0.5)] {
            let xi = Segment::from_fn(&n, 1, |th, o| o[0] = a + 0.2 * th);
            let eta = Segment::from_fn(&n, 1, |th, o| o[0] = bb - 0.1 * th);
            let g = gamma_hat(&c, 0.5, h).unwrap();
            let s = coupled_step(&m, &n, &xi, &eta, 0.5, &[0.0], &c, h).unwrap();
            let dist = seg_distance(&n, &xi, &eta).unwrap();
            let gap = (a - bb).abs();
            assert!(s.phi[0].abs() <= k0 * dist + k0 * gap / g + 1e-12);
        }
    }

    #[test]
    fn identical_initials_give_trivial_coupling() {
        let m = ModelSpec::linear_delay(1.0, 0.5, 1.0);
        let h = 1.0 / 32.0;
        let n = nu(h);
        let xi = Segment::from_fn(&n, 1, |th, o| o[0] = (3.0 * th).sin());
        let c = CouplingConfig::new(0.5, 2.0);
        let cfg = SolverConfig::new(h, 1.5);
        for p in 0..5 {
            let r = run_coupling(&m, &n, &xi, &xi, &c, &cfg, StreamId { base_seed: 3, path: p }, false).unwrap();
            assert_eq!(r.tau, Some(0.0));
            assert_eq!(r.log_r, 0.0);
            assert!(r.coupled_at_end);
        }
    }

    #[test]
    fn clamped_paths_agree_bitwise_after_tau() {
        let m = ModelSpec::linear_delay(1.0, 0.5, 1.0);
        let h = 1.0 / 64.0;
        let n = nu(h);
        let xi = Segment::constant(&n, &[0.5]);
        let eta = Segment::constant(&n, &[0.4]);
        let c = CouplingConfig::new(1.0, identity_k(&m, &n));
        let cfg = SolverConfig::new(h, 2.0);
        for p in 0..20 {
            let r = run_coupling(&m, &n, &xi, &eta, &c, &cfg, StreamId { base_seed: 1, path: p }, true).unwrap();
            let tau = r.tau.expect("additive noise couples by T");
            assert!(tau <= 1.0 + 1e-12);
            let (x, y) = r.paths.unwrap();
            let k0 = n.cells() + (tau / h).round() as usize;
            assert_eq!(x.states[k0..], y.states[k0..]);
            assert!(r.coupled_at_end);
            assert!(r.log_r.is_finite());
        }
    }

    #[test]
    fn delay_difference_keeps_the_shift_alive_after_tau() {
        // Same origin, different history: coupled at once, but B(Y_t) ≠ B(X_t).
        let m = ModelSpec::linear_delay(1.0, 0.5, 1.0);
        let h = 1.0 / 32.0;
        let n = nu(h);
        let xi = Segment::from_fn(&n, 1, |th, o| o[0] = if th < 0.0 { 1.0 } else { 0.0 });
        let eta = Segment::constant(&n, &[0.0]);
        let c = CouplingConfig::new(1.0, 2.0);
        let r = run_coupling(&m, &n, &xi, &eta, &c, &SolverConfig::new(h, 2.0), StreamId { base_seed: 0, path: 0 }, false)
            .unwrap();
        assert_eq!(r.tau, Some(0.0));
        assert!(r.int_phi_sq > 0.0);
    }

    #[test]
    fn weights_average_to_one() {
        let m = ModelSpec::linear_delay(1.0, 0.5, 1.0);
        let h = 1.0 / 64.0;
        let n = nu(h);
        let xi = Segment::constant(&n, &[0.5]);
        let eta = Segment::constant(&n, &[0.4]);
        let c = CouplingConfig::new(1.0, identity_k(&m, &n));
        let res = run_coupling_batch(&m, &n, &xi, &eta, &c, &SolverConfig::new(h, 2.0), &Batch::new(4000, 11)).unwrap();
        let s = summarize(&res);
        assert_eq!(s.coupled_fraction, 1.0);
        assert!((s.mean_r.mean - 1.0).abs() <= 3.0 * s.mean_r.stderr, "{s:?}");
        assert!(s.entropy.mean > 0.0);
    }

    #[test]
    fn entropy_fit_recovers_planted_constants() {
        let mk = |t: f64, a: f64, b: f64| EntropyRow {
            horizon: t,
            dist0_sq: a,
            dist_sq: b,
            summary: CouplingSummary {
                n: 10,
                coupled_fraction: 1.0,
                failures: 0,
                mean_r: MeanStderr { mean: 1.0, stderr: 0.0, n: 10 },
                entropy: MeanStderr { mean: 0.3 * a / t + 0.7 * b, stderr: 0.0, n: 10 },
                entropy_quadratic: MeanStderr { mean: 0.3 * a / t + 0.7 * b, stderr: 0.0, n: 10 },
                ess: 10.0,
                degenerate_weights: false,
            },
        };
        let rows = vec![mk(1.0, 0.01, 0.02), mk(0.5, 0.01, 0.02), mk(0.25, 0.04, 0.05), mk(1.0, 0.04, 0.09)];
        let f = fit_entropy_cost(&rows).unwrap();
        assert!((f.c1 - 0.3).abs() < 1e-10 && (f.c2 - 0.7).abs() < 1e-10);
        assert!(f.positive);
        // Doubling ξ - η scales the prediction by four.
        assert!((f.predict(0.5, 0.04, 0.08) - 4.0 * f.predict(0.5, 0.01, 0.02)).abs() < 1e-12);
    }

    #[test]
    fn offsets_have_the_requested_distance() {
        let n = nu(1.0 / 32.0);
        let xi = Segment::from_fn(&n, 1, |th, o| o[0] = th.sin());
        for off in [Offset::Constant, Offset::Origin] {
            let eta = offset_segment(&n, &xi, 0.1, off);
            assert!((seg_distance(&n, &xi, &eta).unwrap() - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn delay_free_gap_equation() {
        // With B along X in both equations, X - Y is not affected by the delay.
        let mut m = ModelSpec::linear_delay(1.0, 0.8, 1.0);
        m.delay_drift = DelayDrift::LinearMean { beta: 0.8 };
        let h = 1.0 / 16.0;
        let n = nu(h);
        let c = CouplingConfig::new(1.0, 1.0);
        let xi = Segment::from_fn(&n, 1, |th, o| o[0] = 1.0 + th);
        let eta_a = Segment::from_fn(&n, 1, |th, o| o[0] = if th < 0.0 { -3.0 } else { 0.5 });
        let eta_b = Segment::from_fn(&n, 1, |th, o| o[0] = if th < 0.0 { 5.0 } else { 0.5 });
        let a = coupled_step(&m, &n, &xi, &eta_a, 0.0, &[0.2], &c, h).unwrap();
        let b = coupled_step(&m, &n, &xi, &eta_b, 0.0, &[0.2], &c, h).unwrap();
        assert_eq!(a.y, b.y);
        assert_ne!(a.phi, b.phi);
    }
}
