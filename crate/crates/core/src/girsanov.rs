//! Weak solutions by change of measure.
//!
//! The driftless process `dZ = AZ dt + Q(t,Z) dW` is simulated and each path
//! is weighted by `R = exp(∫⟨ψ, dW⟩ - ½∫|ψ|² ds)` with
//! `ψ = Q*(QQ*)^{-1}(b(t,Z) + B(t,Z_t))`, both integrals on left endpoints.
//! Under `R·P` the process Z solves the full equation.

use serde::{Deserialize, Serialize};

use crate::delay_measure::{CellSums, DelayMeasure, Segment};
use crate::error::{Error, Result};
use crate::functional::SegFunctional;
use crate::linalg;
use crate::model::{Dynamics, ModelSpec, MAX_DIM};
use crate::parallel::map_indexed;
use crate::rng::NoiseStream;
use crate::solver::{effective_model, integrate, Batch, SolverConfig};
use crate::stats::{effective_sample_size, mean_stderr, ratio_estimate, MeanStderr};

/// Running `log R` and `∫|ψ|² ds`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightAccumulator {
    pub log_r: f64,
    pub int_psi_sq: f64,
}

impl WeightAccumulator {
    #[inline]
    pub fn add(&mut self, psi: &[f64], dw: &[f64], h: f64) {
        let p2 = linalg::dot(psi, psi);
        self.log_r += linalg::dot(psi, dw) - 0.5 * p2 * h;
        self.int_psi_sq += p2 * h;
    }
}

/// Same dynamics with the drift switched off.
pub struct Driftless<'a, D: Dynamics + ?Sized>(pub &'a D);

impl<D: Dynamics + ?Sized> Dynamics for Driftless<'_, D> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn noise_dim(&self) -> usize {
        self.0.noise_dim()
    }
    fn rates(&self) -> &[f64] {
        self.0.rates()
    }
    fn has_delay_coords(&self) -> bool {
        self.0.has_delay_coords()
    }
    fn delay_coord(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.0.delay_coord(t, x, out)
    }
    fn drift(&self, _t: f64, _x: &[f64], _c: &[f64], _s: &CellSums, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.0.diffusion(t, x, out)
    }
    fn truncation(&self) -> Option<f64> {
        self.0.truncation()
    }
    fn lift_segment(&self, xi: &Segment) -> Segment {
        self.0.lift_segment(xi)
    }
}

/// `ψ = Q*(QQ*)^{-1} v` at `(t, x)`; `false` if `QQ*` is singular.
pub fn shift_into<D: Dynamics + ?Sized>(model: &D, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
    let d = model.dim();
    let dn = model.noise_dim();
    let mut q = [0.0; MAX_DIM * MAX_DIM];
    let mut work = [0.0; MAX_DIM * MAX_DIM + MAX_DIM];
    model.diffusion(t, x, &mut q[..d * dn]);
    linalg::right_pseudo_solve(&q[..d * dn], d, dn, v, out, &mut work)
}

/// `Q*(QQ*)^{-1}(t,z) (b(t,z) + B(t,seg))`, with `z = seg(0)`.
pub fn girsanov_shift(m: &ModelSpec, nu: &DelayMeasure, seg: &Segment, t: f64) -> Result<Vec<f64>> {
    let d = m.dim();
    let sums = nu.cell_sums(seg)?;
    let z = seg.origin();
    let mut v = vec![0.0; d];
    m.drift(t, z, z, &sums, &mut v);
    let mut psi = vec![0.0; m.noise_dim];
    if !shift_into(m, t, z, &v, &mut psi) {
        return Err(Error::SingularDiffusion { t });
    }
    Ok(psi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakEstimate {
    /// `mean(R f(Z_T))`.
    pub unnormalized: MeanStderr,
    /// `Σ R f / Σ R`.
    pub self_normalized: MeanStderr,
    /// `mean(R)`.
    pub mean_r: MeanStderr,
    pub ess: f64,
    /// Set when `ess < 0.01 n`.
    pub degenerate_weights: bool,
}

/// Per-path `(R, f(Z_T))` for the driftless process with Girsanov weights.
pub fn weighted_samples(
    m: &ModelSpec,
    nu: &DelayMeasure,
    f: &SegFunctional,
    xi: &Segment,
    cfg: &SolverConfig,
    batch: &Batch,
) -> Result<Vec<(f64, f64)>> {
    let model = effective_model(m, cfg);
    model.check()?;
    let z = Driftless(&model);
    let d = model.dim();
    let dn = model.noise_dim;
    let out = map_indexed(batch.n, batch.workers, |i| -> Result<(f64, f64)> {
        let mut noise = NoiseStream::new(batch.base_seed, i as u64, cfg.refinement);
        let mut acc = WeightAccumulator::default();
        let mut singular = None;
        let run = integrate(&z, nu, xi, cfg, &mut noise, |buf, dw| {
            let mut v = [0.0; MAX_DIM];
            let mut psi = [0.0; MAX_DIM];
            model.drift(buf.t(), buf.state(), buf.coord(), buf.sums(), &mut v[..d]);
            if shift_into(&model, buf.t(), buf.state(), &v[..d], &mut psi[..dn]) {
                acc.add(&psi[..dn], dw, cfg.h);
            } else if singular.is_none() {
                singular = Some(buf.t());
            }
        })?;
        if let Some(t) = singular {
            return Err(Error::SingularDiffusion { t });
        }
        if let Some(t) = run.stopped_at {
            return Err(Error::ExplosionBeforeHorizon { fraction: 1.0 / batch.n as f64, horizon: t });
        }
        Ok((acc.log_r.exp(), f.eval(run.buf.coord(), run.buf.sums())))
    });
    out.into_iter().collect()
}

/// Importance-sampling estimate of `E f(X_T)`.
pub fn weak_estimate(
    m: &ModelSpec,
    nu: &DelayMeasure,
    f: &SegFunctional,
    xi: &Segment,
    cfg: &SolverConfig,
    batch: &Batch,
) -> Result<WeakEstimate> {
    let samples = weighted_samples(m, nu, f, xi, cfg, batch)?;
    let r: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let ry: Vec<f64> = samples.iter().map(|s| s.0 * s.1).collect();
    let ess = effective_sample_size(&r);
    Ok(WeakEstimate {
        unnormalized: mean_stderr(&ry),
        self_normalized: ratio_estimate(&r, &y),
        mean_r: mean_stderr(&r),
        ess,
        degenerate_weights: ess < 0.01 * batch.n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay_measure::MeasureKind;
    use crate::model::Diffusion;

    fn nu(h: f64) -> DelayMeasure {
        DelayMeasure::new(MeasureKind::Exponential { lambda: 1.0 }, 1.0, h).unwrap()
    }

    fn const_drift_model(q: Vec<f64>, noise_dim: usize, v: f64) -> ModelSpec {
        let mut m = ModelSpec::reference();
        m.noise_dim = noise_dim;
        m.point_drift = crate::model::PointDrift::Tabulated { knots: vec![0.0, 1.0], values: vec![v, v] };
        m.delay_drift = crate::model::DelayDrift::Zero;
        m.diffusion = Diffusion::Constant { matrix: q };
        m
    }

    #[test]
    fn shift_examples() {
        let n = nu(0.25);
        let seg = Segment::constant(&n, &[0.3]);
        let psi = girsanov_shift(&const_drift_model(vec![1.0], 1, 2.5), &n, &seg, 0.0).unwrap();
        assert_eq!(psi, vec![2.5]);
        let psi = girsanov_shift(&const_drift_model(vec![2.0], 1, 3.0), &n, &seg, 0.0).unwrap();
        assert_eq!(psi, vec![1.5]);
        let psi = girsanov_shift(&const_drift_model(vec![1.0, 1.0], 2, 2.0), &n, &seg, 0.0).unwrap();
        assert!((psi[0] - 1.0).abs() < 1e-15 && (psi[1] - 1.0).abs() < 1e-15);
        let singular = const_drift_model(vec![0.0], 1, 1.0);
        assert!(matches!(girsanov_shift(&singular, &n, &seg, 0.0), Err(Error::SingularDiffusion { .. })));
    }

    #[test]
    fn zero_drift_gives_unit_weights_and_direct_values() {
        let h = 1.0 / 32.0;
        let n = nu(h);
        let m = ModelSpec::ou(1.0, 1.0);
        let xi = Segment::constant(&n, &[0.5]);
        let cfg = SolverConfig::new(h, 1.0);
        let batch = Batch::new(200, 3);
        let s = weighted_samples(&m, &n, &SegFunctional::TanhOrigin, &xi, &cfg, &batch).unwrap();
        let direct = crate::solver::terminal_states(&m, &n, &xi, &cfg, &batch).unwrap();
        for ((r, f), x) in s.iter().zip(direct) {
            assert_eq!(*r, 1.0);
            assert_eq!(*f, x[0].tanh());
        }
    }

    #[test]
    fn weights_have_unit_mean() {
        let h = 1.0 / 32.0;
        let n = nu(h);
        let xi = Segment::constant(&n, &[0.5]);
        let cfg = SolverConfig::new(h, 1.0);
        let est = weak_estimate(&ModelSpec::reference(), &n, &SegFunctional::TanhOrigin, &xi, &cfg, &Batch::new(20_000, 8)).unwrap();
        assert!((est.mean_r.mean - 1.0).abs() < 3.0 * est.mean_r.stderr, "{est:?}");
        assert!(!est.degenerate_weights);
    }

    #[test]
    fn accumulator_tracks_quadratic_variation() {
        let mut a = WeightAccumulator::default();
        a.add(&[2.0], &[0.1], 0.5);
        a.add(&[1.0], &[-0.1], 0.5);
        assert!((a.log_r - (0.2 - 1.0 - 0.1 - 0.25)).abs() < 1e-15);
        assert!((a.int_psi_sq - 2.5).abs() < 1e-15);
    }
}
