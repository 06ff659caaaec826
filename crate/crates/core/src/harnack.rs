//! Monte Carlo estimates of the segment semigroup and statistical checks of
//! the log-Harnack inequality and the L²-gradient estimate.

use serde::{Deserialize, Serialize};

use crate::coupling::{fit_entropy_cost, run_coupling_batch, summarize, CouplingConfig, CouplingResult, EntropyFit, EntropyRow};
use crate::delay_measure::{seg_distance, seg_eq, DelayMeasure, Segment};
use crate::error::{Error, Result};
use crate::functional::SegFunctional;
use crate::model::Dynamics;
use crate::parallel::map_indexed;
use crate::rng::NoiseStream;
use crate::solver::{integrate, Batch, SolverConfig};
use crate::stats::{mean, mean_stderr, variance, MeanStderr};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub estimator: String,
    pub setting: String,
}

impl EstimateReport {
    pub fn as_mean(&self) -> MeanStderr {
        MeanStderr { mean: self.value, stderr: self.stderr, n: self.n }
    }
}

/// `f(X_horizon)` for each path of the batch; any explosion before the
/// horizon is an error.
pub fn sample_functional<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    f: &SegFunctional,
    xi: &Segment,
    horizon: f64,
    cfg: &SolverConfig,
    batch: &Batch,
) -> Result<Vec<f64>> {
    let cfg = SolverConfig { t_end: horizon, ..cfg.clone() };
    let xl = model.lift_segment(xi);
    let out = map_indexed(batch.n, batch.workers, |i| -> Result<Option<f64>> {
        let mut noise = NoiseStream::new(batch.base_seed, i as u64, cfg.refinement);
        let run = integrate(model, nu, &xl, &cfg, &mut noise, |_, _| {})?;
        Ok(run.stopped_at.is_none().then(|| f.eval(run.buf.coord(), run.buf.sums())))
    });
    let mut vals = Vec::with_capacity(batch.n);
    for v in out {
        if let Some(x) = v? {
            vals.push(x);
        }
    }
    if vals.len() < batch.n {
        return Err(Error::ExplosionBeforeHorizon {
            fraction: (batch.n - vals.len()) as f64 / batch.n as f64,
            horizon,
        });
    }
    Ok(vals)
}

/// Direct estimate of `P_horizon f(ξ) = E f(X_horizon^ξ)`.
pub fn estimate_p<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    f: &SegFunctional,
    xi: &Segment,
    horizon: f64,
    cfg: &SolverConfig,
    batch: &Batch,
) -> Result<EstimateReport> {
    if batch.n < 2 {
        return Err(Error::Domain("estimate_p needs at least two paths".into()));
    }
    let vals = sample_functional(model, nu, f, xi, horizon, cfg, batch)?;
    let m = mean_stderr(&vals);
    Ok(EstimateReport {
        value: m.mean,
        stderr: m.stderr,
        n: m.n,
        estimator: "direct".into(),
        setting: format!("f={f:?} horizon={horizon} h={}", cfg.h),
    })
}

/// Estimate over `t1 + t2` with each path restarted at `t1` from its
/// segment on an independent stream.
#[allow(clippy::too_many_arguments)]
pub fn composed_estimate<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    f: &SegFunctional,
    xi: &Segment,
    t1: f64,
    t2: f64,
    cfg: &SolverConfig,
    batch: &Batch,
) -> Result<EstimateReport> {
    let first = SolverConfig { t_end: t1, ..cfg.clone() };
    let second = SolverConfig { t_end: t2, ..cfg.clone() };
    let xl = model.lift_segment(xi);
    let restart_seed = batch.base_seed ^ 0x9e37_79b9_7f4a_7c15;
    let out = map_indexed(batch.n, batch.workers, |i| -> Result<f64> {
        let mut noise = NoiseStream::new(batch.base_seed, i as u64, cfg.refinement);
        let run = integrate(model, nu, &xl, &first, &mut noise, |_, _| {})?;
        let d = model.dim();
        let states = run.buf.states();
        let mid = Segment::new(d, states[states.len() - (nu.cells() + 1) * d..].to_vec())?;
        let mut noise = NoiseStream::new(restart_seed, i as u64, cfg.refinement);
        let run = integrate(model, nu, &mid, &second, &mut noise, |_, _| {})?;
        if run.stopped_at.is_some() {
            return Err(Error::ExplosionBeforeHorizon { fraction: 1.0 / batch.n as f64, horizon: t1 + t2 });
        }
        Ok(f.eval(run.buf.coord(), run.buf.sums()))
    });
    let vals = out.into_iter().collect::<Result<Vec<_>>>()?;
    let m = mean_stderr(&vals);
    Ok(EstimateReport {
        value: m.mean,
        stderr: m.stderr,
        n: m.n,
        estimator: "restarted".into(),
        setting: format!("f={f:?} t1={t1} t2={t2} h={}", cfg.h),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenCheck {
    pub mean_log: f64,
    pub log_mean: f64,
    pub holds: bool,
}

/// `mean log f ≤ log mean f` on one sample set of positive values.
pub fn jensen_check(values: &[f64]) -> Result<JensenCheck> {
    if values.is_empty() || values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("Jensen check needs positive values".into()));
    }
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let mean_log = mean(&logs);
    let log_mean = mean(values).ln();
    Ok(JensenCheck { mean_log, log_mean, holds: mean_log <= log_mean + 1e-12 * log_mean.abs().max(1.0) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnackSetting {
    pub horizon: f64,
    /// `|ξ(0) - η(0)|`.
    pub dist0: f64,
    /// `‖ξ - η‖_{C_ν}`.
    pub dist: f64,
    pub f: SegFunctional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnackReport {
    pub setting: HarnackSetting,
    /// `E_P[R log f(X_{T+r0})]`.
    pub lhs: f64,
    /// `log P f(ξ) + E_Q log R`.
    pub rhs: f64,
    pub log_pf: f64,
    pub entropy: f64,
    /// Combined standard error of `rhs - lhs`.
    pub sigma: f64,
    /// `(rhs - lhs) / sigma`.
    pub margin_sigma: f64,
    pub verdict: Verdict,
    /// `log P f(ξ) + c₁|ξ(0)-η(0)|²/T + c₂‖ξ-η‖²` when a fit is given.
    pub fitted_rhs: Option<f64>,
    pub coupled_fraction: f64,
    pub ess: f64,
    pub diagnostics: Vec<String>,
}

/// Inputs shared by the log-Harnack and gradient checks.
pub struct HarnackProblem<'a, C: Dynamics + ?Sized, P: Dynamics + ?Sized> {
    /// Dynamics the coupling runs on (transformed when `b` is not Lipschitz).
    pub coupled: &'a C,
    /// Dynamics used for direct estimates of `P f`.
    pub direct: &'a P,
    pub nu: &'a DelayMeasure,
    pub f: &'a SegFunctional,
    /// Integrator for the direct estimates.
    pub solver: &'a SolverConfig,
}

/// `P log f(η) ≤ log P f(ξ) + E_Q log R` at horizon `T + r0`, checked at
/// three combined standard errors. With `ξ = η` this reduces to Jensen's
/// inequality on one sample set.
pub fn check_log_harnack<C: Dynamics + ?Sized, P: Dynamics + ?Sized>(
    prob: &HarnackProblem<'_, C, P>,
    xi: &Segment,
    eta: &Segment,
    cfg: &CouplingConfig,
    batch: &Batch,
    fit: Option<&EntropyFit>,
) -> Result<HarnackReport> {
    let nu = prob.nu;
    let f = prob.f;
    if !f.is_strictly_positive() || !f.is_bounded() {
        return Err(Error::Precondition(format!("log-Harnack needs a bounded positive f, got {f:?}")));
    }
    let horizon = cfg.horizon + nu.r0();
    let d0: f64 = xi.origin().iter().zip(eta.origin()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let setting = HarnackSetting { horizon: cfg.horizon, dist0: d0, dist: seg_distance(nu, xi, eta)?, f: f.clone() };
    if seg_eq(nu, xi, eta)? {
        let vals = sample_functional(prob.direct, nu, f, xi, horizon, prob.solver, batch)?;
        let j = jensen_check(&vals)?;
        return Ok(HarnackReport {
            setting,
            lhs: j.mean_log,
            rhs: j.log_mean,
            log_pf: j.log_mean,
            entropy: 0.0,
            sigma: 0.0,
            margin_sigma: f64::INFINITY,
            verdict: if j.holds { Verdict::Pass } else { Verdict::Fail },
            fitted_rhs: fit.map(|_| j.log_mean),
            coupled_fraction: 1.0,
            ess: batch.n as f64,
            diagnostics: vec!["identical initial segments: Jensen check".into()],
        });
    }
    let pf = estimate_p(prob.direct, nu, f, xi, horizon, prob.solver, batch)?;
    let coupled_batch = Batch { base_seed: batch.base_seed.wrapping_add(1), ..*batch };
    let res = run_coupling_batch(prob.coupled, nu, xi, eta, cfg, prob.solver, &coupled_batch)?;
    Ok(harnack_from_samples(setting, &pf, &res, fit))
}

/// Assembles the verdict from a direct estimate of `P f(ξ)` and a coupling
/// batch from `(ξ, η)`.
pub fn harnack_from_samples(
    setting: HarnackSetting,
    pf: &EstimateReport,
    res: &[CouplingResult],
    fit: Option<&EntropyFit>,
) -> HarnackReport {
    let summary = summarize(res);
    let r_log_f: Vec<f64> = res.iter().map(|c| c.weight() * c.x_end.eval(&setting.f).ln()).collect();
    let lhs = mean_stderr(&r_log_f);
    let log_pf = pf.value.ln();
    let se_log_pf = pf.stderr / pf.value;
    let entropy = summary.entropy;
    let rhs = log_pf + entropy.mean;
    let sigma = (lhs.stderr.powi(2) + se_log_pf.powi(2) + entropy.stderr.powi(2)).sqrt();
    let gap = rhs - lhs.mean;
    let mut diagnostics = Vec::new();
    if summary.degenerate_weights {
        diagnostics.push(format!("degenerate weights: ess = {:.1} of {}", summary.ess, summary.n));
    }
    if summary.failures > 0 {
        diagnostics.push(format!("{} coupling failures", summary.failures));
    }
    if summary.coupled_fraction < 1.0 {
        diagnostics.push(format!("coupled fraction {:.4}", summary.coupled_fraction));
    }
    let verdict = if summary.degenerate_weights || summary.failures > 0 || !gap.is_finite() {
        Verdict::Inconclusive
    } else if gap + 3.0 * sigma >= 0.0 {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    let fitted_rhs = fit.map(|ft| log_pf + ft.predict(setting.horizon, setting.dist0 * setting.dist0, setting.dist * setting.dist));
    HarnackReport {
        setting,
        lhs: lhs.mean,
        rhs,
        log_pf,
        entropy: entropy.mean,
        sigma,
        margin_sigma: if sigma > 0.0 { gap / sigma } else { f64::INFINITY },
        verdict,
        fitted_rhs,
        coupled_fraction: summary.coupled_fraction,
        ess: summary.ess,
        diagnostics,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnackGrid {
    pub reports: Vec<HarnackReport>,
    /// Entropy rows of the settings with `ξ ≠ η`.
    pub rows: Vec<EntropyRow>,
    pub fit: Option<EntropyFit>,
}

impl HarnackGrid {
    pub fn verdict(&self) -> Verdict {
        if self.reports.iter().any(|r| r.verdict == Verdict::Fail) {
            Verdict::Fail
        } else if self.reports.iter().any(|r| r.verdict == Verdict::Inconclusive) {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        }
    }
}

/// Log-Harnack checks over `(T, η)` settings, plus the entropy-cost fit and
/// its fitted-constant right-hand sides.
pub fn harnack_grid<C: Dynamics + ?Sized, P: Dynamics + ?Sized>(
    prob: &HarnackProblem<'_, C, P>,
    xi: &Segment,
    pairs: &[(f64, Segment)],
    base: &CouplingConfig,
    batch: &Batch,
) -> Result<HarnackGrid> {
    let nu = prob.nu;
    let mut reports = Vec::with_capacity(pairs.len());
    let mut rows = Vec::new();
    for (t, eta) in pairs {
        let cfg = CouplingConfig { horizon: *t, ..base.clone() };
        if seg_eq(nu, xi, eta)? {
            reports.push(check_log_harnack(prob, xi, eta, &cfg, batch, None)?);
            continue;
        }
        let f = prob.f;
        if !f.is_strictly_positive() || !f.is_bounded() {
            return Err(Error::Precondition(format!("log-Harnack needs a bounded positive f, got {f:?}")));
        }
        let d0 = xi.origin().iter().zip(eta.origin()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let setting = HarnackSetting { horizon: *t, dist0: d0, dist: seg_distance(nu, xi, eta)?, f: f.clone() };
        let pf = estimate_p(prob.direct, nu, f, xi, t + nu.r0(), prob.solver, batch)?;
        let coupled_batch = Batch { base_seed: batch.base_seed.wrapping_add(1), ..*batch };
        let res = run_coupling_batch(prob.coupled, nu, xi, eta, &cfg, prob.solver, &coupled_batch)?;
        rows.push(EntropyRow::new(*t, nu, xi, eta, &res)?);
        reports.push(harnack_from_samples(setting, &pf, &res, None));
    }
    let fit = if rows.len() >= 2 { Some(fit_entropy_cost(&rows)?) } else { None };
    if let Some(ft) = &fit {
        for r in reports.iter_mut() {
            let s = &r.setting;
            r.fitted_rhs = Some(r.log_pf + ft.predict(s.horizon, s.dist0 * s.dist0, s.dist * s.dist));
        }
    }
    Ok(HarnackGrid { reports, rows, fit })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub horizon: f64,
    pub eps: f64,
    /// Finite-difference directional derivative of `P_{T+r0} f` at ξ.
    pub derivative: MeanStderr,
    /// `P f²(ξ) - (P f(ξ))²`.
    pub variance: f64,
    /// `D² (T∧1) / V`.
    pub ratio: f64,
    /// Relative standard error of the ratio.
    pub ratio_rel_se: f64,
    pub c_hat: Option<f64>,
    pub pass: Option<bool>,
}

/// Central finite difference of `P_{T+r0} f` along `dir` with common random
/// numbers, compared against `Ĉ V / (T∧1)`.
#[allow(clippy::too_many_arguments)]
pub fn check_gradient_estimate<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    f: &SegFunctional,
    xi: &Segment,
    dir: &Segment,
    horizon: f64,
    eps: f64,
    cfg: &SolverConfig,
    batch: &Batch,
    c_hat: Option<f64>,
) -> Result<GradientReport> {
    if !(1e-3..=1e-1).contains(&eps) {
        return Err(Error::Domain(format!("finite-difference step {eps} outside [1e-3, 1e-1]")));
    }
    let norm = crate::delay_measure::seg_norm(nu, dir)?;
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("direction has C_nu norm {norm}, expected 1")));
    }
    let t = horizon + nu.r0();
    let plus = sample_functional(model, nu, f, &xi.add_scaled(eps, dir), t, cfg, batch)?;
    let minus = sample_functional(model, nu, f, &xi.add_scaled(-eps, dir), t, cfg, batch)?;
    let center = sample_functional(model, nu, f, xi, t, cfg, batch)?;
    let diffs: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let derivative = mean_stderr(&diffs);
    let v = variance(&center);
    let n = center.len() as f64;
    let floor = 1e-14 * (1.0 + mean(&center).powi(2));
    if v <= floor {
        if derivative.mean.abs() > 1e-10 + 3.0 * derivative.stderr {
            return Err(Error::InconsistentVariance { variance: v, derivative: derivative.mean });
        }
        return Ok(GradientReport {
            horizon,
            eps,
            derivative,
            variance: v,
            ratio: 0.0,
            ratio_rel_se: 0.0,
            c_hat,
            pass: c_hat.map(|_| true),
        });
    }
    let tt = horizon.min(1.0);
    let ratio = derivative.mean.powi(2) * tt / v;
    // Delta method: rel se of D² is 2 se_D/|D|; the sample variance adds √(2/(n-1)).
    let rel_d = if derivative.mean != 0.0 { 2.0 * derivative.stderr / derivative.mean.abs() } else { 0.0 };
    let ratio_rel_se = (rel_d.powi(2) + 2.0 / (n - 1.0)).sqrt();
    Ok(GradientReport {
        horizon,
        eps,
        derivative,
        variance: v,
        ratio,
        ratio_rel_se,
        c_hat,
        pass: c_hat.map(|c| ratio <= c * (1.0 + 3.0 * ratio_rel_se)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay_measure::MeasureKind;
    use crate::model::ModelSpec;
    use crate::solver::Scheme;

    fn nu(h: f64) -> DelayMeasure {
        DelayMeasure::new(MeasureKind::Exponential { lambda: 1.0 }, 1.0, h).unwrap()
    }

    #[test]
    fn constant_functional_has_zero_stderr() {
        let n = nu(0.125);
        let m = ModelSpec::reference();
        let xi = Segment::constant(&n, &[0.2]);
        let r = estimate_p(&m, &n, &SegFunctional::Constant { c: 2.5 }, &xi, 1.0, &SolverConfig::new(0.125, 1.0), &Batch::new(100, 1))
            .unwrap();
        assert_eq!(r.value, 2.5);
        assert_eq!(r.stderr, 0.0);
    }

    #[test]
    fn ou_second_moment() {
        let h = 1.0 / 32.0;
        let n = nu(h);
        let (lam, sigma, x0, t) = (1.0, 0.8, 0.7, 1.0);
        let m = ModelSpec::ou(lam, sigma);
        let xi = Segment::constant(&n, &[x0]);
        let r = estimate_p(&m, &n, &SegFunctional::OriginSquared, &xi, t, &SolverConfig::new(h, t), &Batch::new(20000, 2))
            .unwrap();
        let exact = sigma * sigma * (1.0 - (-2.0 * lam * t).exp()) / (2.0 * lam) + (-2.0 * lam * t).exp() * x0 * x0;
        assert!((r.value - exact).abs() <= 3.0 * r.stderr, "{} vs {exact}", r.value);
    }

    #[test]
    fn explosion_is_reported() {
        let n = nu(0.01);
        let m = ModelSpec::explosive(0.0);
        let xi = Segment::constant(&n, &[2.0]);
        let e = estimate_p(&m, &n, &SegFunctional::TanhOrigin, &xi, 1.0, &SolverConfig::new(0.01, 1.0), &Batch::new(4, 0));
        assert!(matches!(e, Err(Error::ExplosionBeforeHorizon { fraction, .. }) if fraction == 1.0));
    }

    #[test]
    fn jensen_examples() {
        let j = jensen_check(&[0.5, 1.0, 2.0, 4.0]).unwrap();
        assert!(j.holds && j.mean_log < j.log_mean);
        let j = jensen_check(&[3.0; 5]).unwrap();
        assert!(j.holds && (j.mean_log - j.log_mean).abs() < 1e-15);
        assert!(jensen_check(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn restart_matches_single_run() {
        let h = 1.0 / 32.0;
        let n = nu(h);
        let m = ModelSpec::linear_delay(1.0, 0.5, 1.0);
        let xi = Segment::from_fn(&n, 1, |th, o| o[0] = 0.5 + 0.3 * th);
        let f = SegFunctional::PositiveTanh2 { eps: 1e-6 };
        let cfg = SolverConfig::new(h, 1.0);
        let b = Batch::new(20000, 4);
        let one = estimate_p(&m, &n, &f, &xi, 1.5, &cfg, &b).unwrap();
        let two = composed_estimate(&m, &n, &f, &xi, 0.5, 1.0, &cfg, &b).unwrap();
        let se = (one.stderr.powi(2) + two.stderr.powi(2)).sqrt();
        assert!((one.value - two.value).abs() <= 3.0 * se, "{one:?} {two:?}");
    }

    fn origin_direction(n: &DelayMeasure) -> Segment {
        let mut dir = Segment::constant(n, &[0.0]);
        let last = dir.len() - 1;
        dir.at_mut(last)[0] = 1.0;
        dir
    }

    #[test]
    fn ou_gradient_oracle() {
        let h = 1.0 / 64.0;
        let n = nu(h);
        let (lam, sigma) = (1.0, 1.0);
        let m = ModelSpec::ou(lam, sigma);
        let xi = Segment::constant(&n, &[0.3]);
        let dir = origin_direction(&n);
        let eps = 0.01;
        for t in [0.25, 1.0] {
            let cfg = SolverConfig::new(h, 1.0).with_scheme(Scheme::ExponentialEuler);
            let g = check_gradient_estimate(&m, &n, &SegFunctional::Origin { component: 0 }, &xi, &dir, t, eps, &cfg, &Batch::new(4000, 9), None)
                .unwrap();
            let exact = (-lam * (t + 1.0)).exp();
            assert!((g.derivative.mean - exact).abs() <= 2.0 * eps * eps + 3.0 * g.derivative.stderr + 1e-12);
            let v = sigma * sigma * (1.0 - (-2.0 * lam * (t + 1.0)).exp()) / (2.0 * lam);
            assert!((g.variance / v - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn constant_functional_has_zero_derivative() {
        let h = 0.125;
        let n = nu(h);
        let m = ModelSpec::reference();
        let xi = Segment::constant(&n, &[0.3]);
        let g = check_gradient_estimate(
            &m,
            &n,
            &SegFunctional::Constant { c: 1.0 },
            &xi,
            &origin_direction(&n),
            0.5,
            0.01,
            &SolverConfig::new(h, 1.0),
            &Batch::new(50, 0),
            Some(1.0),
        )
        .unwrap();
        assert_eq!(g.derivative.mean, 0.0);
        assert_eq!(g.pass, Some(true));
    }

    #[test]
    fn identical_initials_reduce_to_jensen() {
        let h = 1.0 / 16.0;
        let n = nu(h);
        let m = ModelSpec::linear_delay(1.0, 0.5, 1.0);
        let xi = Segment::constant(&n, &[0.4]);
        let f = SegFunctional::PositiveTanh2 { eps: 1e-6 };
        let solver = SolverConfig::new(h, 1.0);
        let prob = HarnackProblem { coupled: &m, direct: &m, nu: &n, f: &f, solver: &solver };
        let r = check_log_harnack(&prob, &xi, &xi, &CouplingConfig::new(0.5, 2.0), &Batch::new(500, 3), None).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r.lhs <= r.rhs);
    }

    #[test]
    fn constant_f_passes_with_margin_from_entropy() {
        let h = 1.0 / 32.0;
        let n = nu(h);
        let m = ModelSpec::linear_delay(1.0, 0.5, 1.0);
        let xi = Segment::constant(&n, &[0.4]);
        let eta = Segment::constant(&n, &[0.5]);
        let f = SegFunctional::Constant { c: 2.0 };
        let solver = SolverConfig::new(h, 1.0).with_scheme(Scheme::EulerMaruyama);
        let prob = HarnackProblem { coupled: &m, direct: &m, nu: &n, f: &f, solver: &solver };
        let k = crate::coupling::identity_k(&m, &n);
        let r = check_log_harnack(&prob, &xi, &eta, &CouplingConfig::new(0.5, k), &Batch::new(2000, 3), None).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r.entropy > 0.0);
    }

    #[test]
    fn linear_delay_log_harnack() {
        let h = 1.0 / 64.0;
        let n = nu(h);
        let m = ModelSpec::linear_delay(1.0, 0.5, 1.0);
        let xi = Segment::constant(&n, &[0.2]);
        let eta = Segment::constant(&n, &[0.35]);
        let f = SegFunctional::PositiveTanh2 { eps: 1e-6 };
        let solver = SolverConfig::new(h, 1.0).with_scheme(Scheme::EulerMaruyama);
        let prob = HarnackProblem { coupled: &m, direct: &m, nu: &n, f: &f, solver: &solver };
        let k = crate::coupling::identity_k(&m, &n);
        let r = check_log_harnack(&prob, &xi, &eta, &CouplingConfig::new(0.5, k), &Batch::new(4000, 8), None).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    }
}
