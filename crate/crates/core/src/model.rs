//! Equation data `dX = {AX + b(t,X) + B(t,X_t)}dt + Q(t,X)dW`, the Dini
//! modulus class, and sampling-based validators for the standing
//! assumptions.
//!
//! `A = -diag(λ_i)` in its eigenbasis. Coefficients come from a closed
//! catalog so that validators and oracles know their analytic structure.

use serde::{Deserialize, Serialize};

use crate::delay_measure::{seg_distance, CellSums, DelayMeasure, Segment};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::NoiseStream;

/// Largest supported state or noise dimension.
pub const MAX_DIM: usize = 4;

/// Anything the path integrators can drive.
///
/// The integrators keep, for every grid point, the state `x` and its *delay
/// coordinate* `delay_coord(t, x)`. Delay functionals and path functionals see
/// the weighted cell sums of delay coordinates. For a plain model the delay
/// coordinate is the state itself; for a Zvonkin-transformed model it is the
/// pulled-back original state.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    /// Eigenvalues of `-A` (zero allowed).
    fn rates(&self) -> &[f64];
    fn has_delay_coords(&self) -> bool {
        false
    }
    fn delay_coord(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(x);
        Ok(())
    }
    /// `b(t, x) + B(t, ξ)` with `ξ(0)` having delay coordinate `coord` and
    /// cell sums `sums` (both in delay coordinates).
    fn drift(&self, t: f64, x: &[f64], coord: &[f64], sums: &CellSums, out: &mut [f64]);
    /// Row-major `d × d̄` diffusion matrix.
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Truncation radius applied to the coefficients, if any.
    fn truncation(&self) -> Option<f64> {
        None
    }
    /// Initial segment in this model's coordinates for an original-coordinate
    /// segment `xi`.
    fn lift_segment(&self, xi: &Segment) -> Segment {
        xi.clone()
    }
}

/// `E = e^{Ah}` and `J = A^{-1}(e^{Ah} - I)`, both diagonal.
pub fn semigroup_factors(rates: &[f64], h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    let mut e = Vec::with_capacity(rates.len());
    let mut j = Vec::with_capacity(rates.len());
    for &l in rates {
        if !(l >= 0.0) {
            return Err(Error::Domain(format!("rate {l} must be non-negative")));
        }
        e.push((-l * h).exp());
        j.push(if l == 0.0 { h } else { -(-l * h).exp_m1() / l });
    }
    Ok((e, j))
}

/// Smooth cutoff: 1 on `[0,1]`, 0 on `[2,∞)`, quintic in between with
/// matching first and second derivatives.
pub fn cutoff(r: f64) -> f64 {
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        0.0
    } else {
        let s = r - 1.0;
        1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PointDrift {
    Zero,
    /// `scale · √min(|x_i|, 1)` per component.
    SqrtMin {
        #[serde(default = "one")]
        scale: f64,
    },
    /// `x_i³`.
    Cubic,
    /// `x_i²`.
    Square,
    /// `slope · x_i`.
    Linear { slope: f64 },
    /// Piecewise-linear interpolation of `(knots, values)`, flat outside.
    Tabulated { knots: Vec<f64>, values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DelayDrift {
    Zero,
    /// `β ν(ξ)`.
    LinearMean { beta: f64 },
    /// `β tanh(ν(ξ))` per component.
    TanhMean { beta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Diffusion {
    Zero,
    /// Row-major `d × d̄` matrix.
    Constant { matrix: Vec<f64> },
    /// `diag(σ (1 + amp sin x_i))`, requires `d̄ = d` and `amp < 1`.
    Sinusoidal { sigma: f64, amp: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiniModulus {
    /// `coef · s^α`.
    Power {
        alpha: f64,
        #[serde(default = "one")]
        coef: f64,
    },
    /// `c / ln(e + 1/s)`.
    Log { c: f64 },
    /// Linear interpolation of `(s, φ(s))`, constant beyond the last knot.
    Tabulated { s: Vec<f64>, phi: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

fn interp(knots: &[f64], values: &[f64], x: f64) -> f64 {
    let n = knots.len();
    if n == 0 {
        return 0.0;
    }
    if x <= knots[0] {
        return values[0];
    }
    if x >= knots[n - 1] {
        return values[n - 1];
    }
    let i = knots.partition_point(|k| *k <= x) - 1;
    let f = (x - knots[i]) / (knots[i + 1] - knots[i]);
    values[i] + f * (values[i + 1] - values[i])
}

impl DiniModulus {
    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match self {
            DiniModulus::Power { alpha, coef } => coef * s.powf(*alpha),
            DiniModulus::Log { c } => c / (std::f64::consts::E + 1.0 / s).ln(),
            DiniModulus::Tabulated { s: ks, phi } => {
                let mut k = Vec::with_capacity(ks.len() + 1);
                let mut v = Vec::with_capacity(ks.len() + 1);
                k.push(0.0);
                v.push(0.0);
                k.extend_from_slice(ks);
                v.extend_from_slice(phi);
                interp(&k, &v, s)
            }
        }
    }
}

impl PointDrift {
    #[inline]
    pub(crate) fn eval1(&self, x: f64) -> f64 {
        match self {
            PointDrift::Zero => 0.0,
            PointDrift::SqrtMin { scale } => scale * x.abs().min(1.0).sqrt(),
            PointDrift::Cubic => x * x * x,
            PointDrift::Square => x * x,
            PointDrift::Linear { slope } => slope * x,
            PointDrift::Tabulated { knots, values } => interp(knots, values, x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, PointDrift::Zero)
    }

    /// `sup |b|` per component, infinite when unbounded.
    pub fn sup(&self) -> f64 {
        match self {
            PointDrift::Zero => 0.0,
            PointDrift::SqrtMin { scale } => scale.abs(),
            PointDrift::Tabulated { values, .. } => values.iter().fold(0.0, |a, v| a.max(v.abs())),
            PointDrift::Linear { slope } if *slope == 0.0 => 0.0,
            _ => f64::INFINITY,
        }
    }
}

/// Growth condition `⟨B(ξ+η) + b((ξ+η)(0)), ξ(0)⟩ ≤ Φ(‖ξ‖²) + h(‖η‖)` with
/// `Φ(s) = c(1 + s)` and `h(r) = c r²/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthCondition {
    pub c: f64,
}

impl GrowthCondition {
    pub fn phi(&self, s: f64) -> f64 {
        self.c * (1.0 + s)
    }
    pub fn h(&self, r: f64) -> f64 {
        0.5 * self.c * r * r
    }
}

/// Declared bound constants checked by [`validate_assumptions`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeclaredBounds {
    /// `sup |b|`.
    pub b_sup: f64,
    /// Lipschitz constant `C_B` in `|B(ξ)-B(η)|² ≤ C_B ‖ξ-η‖²`.
    pub c_b: f64,
    pub q_sup: f64,
    pub dq_sup: f64,
    pub d2q_sup: f64,
    /// `sup ‖(QQ*)^{-1}‖`.
    pub qq_inv_sup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Eigenvalues of `-A`, each positive.
    pub rates: Vec<f64>,
    pub noise_dim: usize,
    pub point_drift: PointDrift,
    pub delay_drift: DelayDrift,
    pub diffusion: Diffusion,
    /// Declared modulus of continuity of `b`.
    pub modulus: DiniModulus,
    #[serde(default)]
    pub truncation: Option<f64>,
    /// Overrides for the analytic bound constants.
    #[serde(default)]
    pub bounds: Option<DeclaredBounds>,
}

impl ModelSpec {
    fn base(name: &str, rates: Vec<f64>, noise_dim: usize) -> Self {
        ModelSpec {
            name: name.into(),
            rates,
            noise_dim,
            point_drift: PointDrift::Zero,
            delay_drift: DelayDrift::Zero,
            diffusion: Diffusion::Zero,
            modulus: DiniModulus::Power {
                alpha: 0.5,
                coef: 1.0,
            },
            truncation: None,
            bounds: None,
        }
    }

    /// `b = B = Q = 0`.
    pub fn zero(rate: f64) -> Self {
        ModelSpec::base("zero", vec![rate], 1)
    }

    /// Ornstein–Uhlenbeck: `b = B = 0`, `Q = σ I`.
    pub fn ou(rate: f64, sigma: f64) -> Self {
        let mut m = ModelSpec::base("ou", vec![rate], 1);
        m.diffusion = Diffusion::Constant {
            matrix: vec![sigma],
        };
        m
    }

    /// d = 1, `A = -1`, `b = √min(|x|,1)`, `B = 0.5 ν(ξ)`, `Q = 1`.
    pub fn reference() -> Self {
        let mut m = ModelSpec::base("reference", vec![1.0], 1);
        m.point_drift = PointDrift::SqrtMin { scale: 1.0 };
        m.delay_drift = DelayDrift::LinearMean { beta: 0.5 };
        m.diffusion = Diffusion::Constant { matrix: vec![1.0] };
        m
    }

    /// d = 1, `b = 0`, `B = β ν(ξ)`, `Q = σ`.
    pub fn linear_delay(rate: f64, beta: f64, sigma: f64) -> Self {
        let mut m = ModelSpec::base("linear-delay", vec![rate], 1);
        m.delay_drift = DelayDrift::LinearMean { beta };
        m.diffusion = Diffusion::Constant {
            matrix: vec![sigma],
        };
        m
    }

    /// `b = x³`, `Q = 0`: blows up in finite time.
    pub fn explosive(rate: f64) -> Self {
        let mut m = ModelSpec::base("explosive", vec![rate], 1);
        m.point_drift = PointDrift::Cubic;
        m
    }

    /// Linear delay model with `Q = σ(1 + amp sin x)`.
    pub fn multiplicative(rate: f64, beta: f64, sigma: f64, amp: f64) -> Self {
        let mut m = ModelSpec::linear_delay(rate, beta, sigma);
        m.name = "multiplicative".into();
        m.diffusion = Diffusion::Sinusoidal { sigma, amp };
        m
    }

    pub fn catalog_names() -> &'static [&'static str] {
        &["zero", "ou", "reference", "linear-delay", "explosive", "multiplicative"]
    }

    /// Coefficients multiplied by the cutoff at radius `level`.
    pub fn truncated(&self, level: f64) -> Self {
        let mut m = self.clone();
        m.truncation = Some(level);
        m
    }

    pub fn check(&self) -> Result<()> {
        let d = self.rates.len();
        if d == 0 || d > MAX_DIM || self.noise_dim < d || self.noise_dim > MAX_DIM {
            return Err(Error::Domain(format!(
                "need 1 <= d <= d_noise <= {MAX_DIM}, got d = {d}, d_noise = {}",
                self.noise_dim
            )));
        }
        if self.rates.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Domain("eigenvalues of -A must be positive".into()));
        }
        match &self.diffusion {
            Diffusion::Constant { matrix } if matrix.len() != d * self.noise_dim => {
                return Err(Error::Domain(format!(
                    "diffusion matrix needs {} entries, got {}",
                    d * self.noise_dim,
                    matrix.len()
                )))
            }
            Diffusion::Sinusoidal { amp, .. } if self.noise_dim != d || amp.abs() >= 1.0 => {
                return Err(Error::Domain(
                    "sinusoidal diffusion needs d_noise = d and |amp| < 1".into(),
                ))
            }
            _ => {}
        }
        if let PointDrift::Tabulated { knots, values } = &self.point_drift {
            if knots.len() != values.len() || knots.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Domain("tabulated drift needs increasing knots".into()));
            }
        }
        if let Some(l) = self.truncation {
            if !(l > 0.0) {
                return Err(Error::Domain("truncation level must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.rates.len()
    }

    /// `b(t, x)` without truncation.
    pub fn point_drift_raw(&self, x: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.point_drift.eval1(*xi);
        }
    }

    /// `B(t, ξ)` from the cell sums of ξ, without truncation.
    pub fn delay_drift_raw(&self, sums: &CellSums, out: &mut [f64]) {
        match &self.delay_drift {
            DelayDrift::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            DelayDrift::LinearMean { beta } => {
                for (o, m) in out.iter_mut().zip(&sums.mean) {
                    *o = beta * m;
                }
            }
            DelayDrift::TanhMean { beta } => {
                for (o, m) in out.iter_mut().zip(&sums.mean) {
                    *o = beta * m.tanh();
                }
            }
        }
    }

    /// `Q(t, x)` without truncation.
    pub fn diffusion_raw(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let m = self.noise_dim;
        match &self.diffusion {
            Diffusion::Zero => out[..d * m].iter_mut().for_each(|o| *o = 0.0),
            Diffusion::Constant { matrix } => out[..d * m].copy_from_slice(matrix),
            Diffusion::Sinusoidal { sigma, amp } => {
                out[..d * m].iter_mut().for_each(|o| *o = 0.0);
                for i in 0..d {
                    out[i * m + i] = sigma * (1.0 + amp * x[i].sin());
                }
            }
        }
    }

    /// `B` evaluated on a full segment (applies truncation if set).
    pub fn delay_drift_on(&self, nu: &DelayMeasure, seg: &Segment, out: &mut [f64]) -> Result<()> {
        let sums = nu.cell_sums(seg)?;
        self.delay_drift_raw(&sums, out);
        if let Some(level) = self.truncation {
            let r = (sums.sq + linalg::dot(seg.origin(), seg.origin())).sqrt();
            let c = cutoff(r / level);
            out.iter_mut().for_each(|o| *o *= c);
        }
        Ok(())
    }

    /// `b` with truncation applied.
    pub fn point_drift_at(&self, x: &[f64], out: &mut [f64]) {
        self.point_drift_raw(x, out);
        if let Some(level) = self.truncation {
            let c = cutoff(linalg::norm(x) / level);
            out.iter_mut().for_each(|o| *o *= c);
        }
    }

    /// Analytic bound constants for the catalog entry (or the overrides).
    pub fn declared_bounds(&self, nu: &DelayMeasure) -> DeclaredBounds {
        if let Some(b) = &self.bounds {
            return b.clone();
        }
        let d = self.dim();
        let beta = match self.delay_drift {
            DelayDrift::Zero => 0.0,
            DelayDrift::LinearMean { beta } | DelayDrift::TanhMean { beta } => beta,
        };
        let (q_sup, dq, d2q, qq_inv) = match &self.diffusion {
            Diffusion::Zero => (0.0, 0.0, 0.0, f64::INFINITY),
            Diffusion::Constant { matrix } => {
                let lmin = linalg::gram_min_eigenvalue(matrix, d, self.noise_dim);
                (
                    linalg::op_norm(matrix, d, self.noise_dim),
                    0.0,
                    0.0,
                    if lmin > 0.0 { 1.0 / lmin } else { f64::INFINITY },
                )
            }
            Diffusion::Sinusoidal { sigma, amp } => {
                let lo = sigma.abs() * (1.0 - amp.abs());
                (
                    sigma.abs() * (1.0 + amp.abs()),
                    (sigma * amp).abs(),
                    (sigma * amp).abs(),
                    1.0 / (lo * lo),
                )
            }
        };
        DeclaredBounds {
            b_sup: self.point_drift.sup() * (d as f64).sqrt(),
            c_b: beta * beta * nu.total_mass(),
            q_sup,
            dq_sup: dq,
            d2q_sup: d2q,
            qq_inv_sup: qq_inv,
        }
    }

    /// Growth condition for entries with `b = 0` and a mean-type `B`:
    /// `c = |β| √ν(1)`.
    pub fn growth_condition(&self, nu: &DelayMeasure) -> Result<GrowthCondition> {
        if !self.point_drift.is_zero() {
            return Err(Error::UnsupportedModel);
        }
        let beta = match self.delay_drift {
            DelayDrift::Zero => 0.0,
            DelayDrift::LinearMean { beta } | DelayDrift::TanhMean { beta } => beta,
        };
        Ok(GrowthCondition {
            c: beta.abs() * nu.total_mass().sqrt(),
        })
    }
}

impl Dynamics for ModelSpec {
    fn dim(&self) -> usize {
        self.rates.len()
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn rates(&self) -> &[f64] {
        &self.rates
    }
    fn drift(&self, _t: f64, x: &[f64], _coord: &[f64], sums: &CellSums, out: &mut [f64]) {
        let d = self.dim();
        let mut bd = [0.0; MAX_DIM];
        self.point_drift_raw(x, out);
        self.delay_drift_raw(sums, &mut bd[..d]);
        match self.truncation {
            None => {
                for i in 0..d {
                    out[i] += bd[i];
                }
            }
            Some(level) => {
                let x2 = linalg::dot(x, x);
                let cp = cutoff(x2.sqrt() / level);
                let cd = cutoff((sums.sq + x2).sqrt() / level);
                for i in 0..d {
                    out[i] = out[i] * cp + bd[i] * cd;
                }
            }
        }
    }
    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self.truncation {
            None => self.diffusion_raw(x, out),
            Some(level) => {
                let c = cutoff(linalg::norm(x) / level);
                let mut z = [0.0; MAX_DIM];
                for (zi, xi) in z.iter_mut().zip(x) {
                    *zi = c * xi;
                }
                self.diffusion_raw(&z[..x.len()], out)
            }
        }
    }
    fn truncation(&self) -> Option<f64> {
        self.truncation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiniReport {
    pub monotone: bool,
    pub phi2_concave: bool,
    pub dini_convergent: bool,
    /// `Σ φ(s_k) ln 2` over the grid (upper Riemann sum of `∫ φ(s)/s ds`).
    pub partial_sum: f64,
    /// Geometric tail estimate beyond the last grid point.
    pub tail_estimate: f64,
    pub points: usize,
}

impl DiniReport {
    pub fn pass(&self) -> bool {
        self.monotone && self.phi2_concave && self.dini_convergent
    }
}

/// Dyadic grid `s_k = 2^{-k}`, `k = 0..points`.
pub fn dyadic_grid(points: usize) -> Vec<f64> {
    (0..points).map(|k| (-(k as f64)).exp2()).collect()
}

/// Numerical membership test for the class D on a dyadic grid in `(0, 1]`.
pub fn dini_check(phi: &DiniModulus, s_grid: &[f64]) -> DiniReport {
    let mut s: Vec<f64> = s_grid.iter().cloned().filter(|x| *x > 0.0 && *x <= 1.0).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let v: Vec<f64> = s.iter().map(|x| phi.eval(*x)).collect();
    let monotone = v.iter().all(|x| *x > 0.0) && v.windows(2).all(|w| w[1] <= w[0]);
    let sq = |x: f64| phi.eval(x).powi(2);
    let mut concave = true;
    for i in 0..s.len() {
        for gap in 1..=2 {
            if i + gap >= s.len() {
                continue;
            }
            let (a, b) = (s[i + gap], s[i]);
            let mid = sq(0.5 * (a + b));
            let chord = 0.5 * (sq(a) + sq(b));
            if mid < chord - 1e-12 * chord.abs().max(1e-300) {
                concave = false;
            }
        }
    }
    let ln2 = std::f64::consts::LN_2;
    let terms: Vec<f64> = v.iter().map(|x| x * ln2).collect();
    let partial: f64 = terms.iter().sum();
    let k = terms.len();
    let tail = if k < 6 {
        f64::INFINITY
    } else {
        let r = terms[k - 6..]
            .windows(2)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max);
        if r >= 1.0 {
            f64::INFINITY
        } else {
            terms[k - 1] * r / (1.0 - r)
        }
    };
    DiniReport {
        monotone,
        phi2_concave: concave,
        dini_convergent: tail <= 0.05 * partial,
        partial_sum: partial,
        tail_estimate: tail,
        points: k,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    pub n_samples: usize,
    /// Half-width of the sampling box for states.
    pub box_radius: f64,
    /// Amplitude of sampled segments.
    pub segment_amplitude: f64,
    /// Relative tolerance on declared bounds.
    pub tol: f64,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            n_samples: 2000,
            box_radius: 5.0,
            segment_amplitude: 3.0,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub pass: bool,
    /// Worst observed `lhs / bound` (≤ 1 + tol means pass).
    pub worst_ratio: f64,
    pub witness: Vec<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub dini: DiniReport,
}

impl AssumptionReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Tracker {
    check: AssumptionCheck,
    tol: f64,
}

impl Tracker {
    fn new(name: &str, tol: f64) -> Self {
        Tracker {
            check: AssumptionCheck {
                name: name.into(),
                pass: true,
                worst_ratio: 0.0,
                witness: vec![],
                samples: 0,
            },
            tol,
        }
    }
    /// Records `lhs ≤ bound (1 + tol) + abs_slack`.
    fn record(&mut self, lhs: f64, bound: f64, abs_slack: f64, witness: &[f64]) {
        self.check.samples += 1;
        let ratio = if bound > 0.0 {
            lhs / bound
        } else if lhs > abs_slack {
            f64::INFINITY
        } else {
            0.0
        };
        let ok = lhs <= bound * (1.0 + self.tol) + abs_slack;
        if ratio > self.check.worst_ratio || (!ok && self.check.pass) {
            self.check.worst_ratio = self.check.worst_ratio.max(ratio);
            self.check.witness = witness.to_vec();
        }
        if !ok {
            self.check.pass = false;
        }
    }
}

/// Monte Carlo spot checks of the declared constants: bounds on `Q`, its
/// finite-difference derivatives and `(QQ*)^{-1}`, the Dini modulus of `b`,
/// and the Lipschitz constant of `B`.
pub fn validate_assumptions(
    m: &ModelSpec,
    nu: &DelayMeasure,
    _horizon: f64,
    opts: &ValidationOptions,
) -> Result<AssumptionReport> {
    m.check()?;
    let d = m.dim();
    let dn = m.noise_dim;
    let decl = m.declared_bounds(nu);
    let mut rng = NoiseStream::new(opts.seed, 0xA55E, 0);
    let mut unif = |a: f64, b: f64| a + (b - a) * rng.uniform();

    let mut q_norm = Tracker::new("Q bounded", opts.tol);
    let mut q_inv = Tracker::new("QQ* invertible", opts.tol);
    let mut dq = Tracker::new("grad Q bounded", opts.tol);
    let mut d2q = Tracker::new("hessian Q bounded", opts.tol);
    let mut b_mod = Tracker::new("b Dini continuous", opts.tol);
    let mut b_sup = Tracker::new("b bounded", opts.tol);
    let mut big_b = Tracker::new("B Lipschitz", opts.tol);

    let mut q0 = [0.0; MAX_DIM * MAX_DIM];
    let mut qp = [0.0; MAX_DIM * MAX_DIM];
    let mut qm = [0.0; MAX_DIM * MAX_DIM];
    let mut diff = [0.0; MAX_DIM * MAX_DIM];
    let nq = d * dn;
    for _ in 0..opts.n_samples {
        let mut x = [0.0; MAX_DIM];
        let mut v = [0.0; MAX_DIM];
        for i in 0..d {
            x[i] = unif(-opts.box_radius, opts.box_radius);
            v[i] = unif(-1.0, 1.0);
        }
        let vn = linalg::norm(&v[..d]).max(1e-12);
        v.iter_mut().for_each(|c| *c /= vn);
        let x = &x[..d];
        let v = &v[..d];

        // Diffusion.
        m.diffusion(0.0, x, &mut q0);
        q_norm.record(linalg::op_norm(&q0[..nq], d, dn), decl.q_sup, 0.0, x);
        let lmin = linalg::gram_min_eigenvalue(&q0[..nq], d, dn);
        let inv = if lmin > 0.0 { 1.0 / lmin } else { f64::INFINITY };
        q_inv.record(inv, decl.qq_inv_sup, 0.0, x);
        let eps = 1e-5 * (1.0 + linalg::norm(x));
        let mut xp = [0.0; MAX_DIM];
        let mut xm = [0.0; MAX_DIM];
        for i in 0..d {
            xp[i] = x[i] + eps * v[i];
            xm[i] = x[i] - eps * v[i];
        }
        m.diffusion(0.0, &xp[..d], &mut qp);
        m.diffusion(0.0, &xm[..d], &mut qm);
        for k in 0..nq {
            diff[k] = (qp[k] - qm[k]) / (2.0 * eps);
        }
        dq.record(linalg::op_norm(&diff[..nq], d, dn), decl.dq_sup, 1e-8, x);
        for k in 0..nq {
            diff[k] = (qp[k] - 2.0 * q0[k] + qm[k]) / (eps * eps);
        }
        d2q.record(linalg::op_norm(&diff[..nq], d, dn), decl.d2q_sup, 1e-3, x);

        // Point drift: pairs at a random scale.
        let scale = 10f64.powf(unif(-8.0, (2.0 * opts.box_radius).log10()));
        let mut y = [0.0; MAX_DIM];
        for i in 0..d {
            y[i] = x[i] + scale * unif(-1.0, 1.0);
        }
        let y = &y[..d];
        let mut bx = [0.0; MAX_DIM];
        let mut by = [0.0; MAX_DIM];
        m.point_drift_at(x, &mut bx[..d]);
        m.point_drift_at(y, &mut by[..d]);
        let mut dxy = [0.0; MAX_DIM];
        let mut dbb = [0.0; MAX_DIM];
        for i in 0..d {
            dxy[i] = x[i] - y[i];
            dbb[i] = bx[i] - by[i];
        }
        let mut w = x.to_vec();
        w.extend_from_slice(y);
        b_mod.record(linalg::norm(&dbb[..d]), m.modulus.eval(linalg::norm(&dxy[..d])), 0.0, &w);
        b_sup.record(linalg::norm(&bx[..d]), decl.b_sup, 0.0, x);

        // Delay drift on random segment pairs.
        let amp = opts.segment_amplitude;
        let freq = unif(0.0, 6.0);
        let phase = unif(0.0, 6.3);
        let base_off: Vec<f64> = (0..d).map(|_| unif(-amp, amp)).collect();
        let xi = Segment::from_fn(nu, d, |th, o| {
            for i in 0..d {
                o[i] = base_off[i] + amp * (freq * th + phase + i as f64).sin();
            }
        });
        let pscale = 10f64.powf(unif(-6.0, amp.log10().max(-6.0)));
        let mut pr = NoiseStream::new(opts.seed, 0xB000 + b_mod.check.samples as u64, 0);
        let eta = xi.map_points(|_, src, dst| {
            for i in 0..d {
                dst[i] = src[i] + pscale * pr.standard_normal();
            }
        });
        let mut bxi = [0.0; MAX_DIM];
        let mut beta = [0.0; MAX_DIM];
        m.delay_drift_on(nu, &xi, &mut bxi[..d])?;
        m.delay_drift_on(nu, &eta, &mut beta[..d])?;
        for i in 0..d {
            dbb[i] = bxi[i] - beta[i];
        }
        let dist = seg_distance(nu, &xi, &eta)?;
        big_b.record(linalg::norm(&dbb[..d]), decl.c_b.sqrt() * dist, 1e-14, xi.origin());
    }

    let dini = dini_check(&m.modulus, &dyadic_grid(41));
    let mut dini_check_entry = Tracker::new("modulus in class D", opts.tol);
    dini_check_entry.check.samples = dini.points;
    dini_check_entry.check.pass = dini.pass();
    dini_check_entry.check.worst_ratio = dini.tail_estimate / dini.partial_sum;
    Ok(AssumptionReport {
        checks: vec![
            q_norm.check,
            q_inv.check,
            dq.check,
            d2q.check,
            b_sup.check,
            b_mod.check,
            dini_check_entry.check,
            big_b.check,
        ],
        dini,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay_measure::MeasureKind;
    use proptest::prelude::*;

    fn nu(h: f64) -> DelayMeasure {
        DelayMeasure::new(MeasureKind::Exponential { lambda: 1.0 }, 1.0, h).unwrap()
    }

    #[test]
    fn dini_examples() {
        let g = dyadic_grid(41);
        let sqrt = dini_check(&DiniModulus::Power { alpha: 0.5, coef: 1.0 }, &g);
        assert!(sqrt.pass(), "{sqrt:?}");
        let lin = dini_check(&DiniModulus::Power { alpha: 1.0, coef: 1.0 }, &g);
        assert!(lin.monotone && !lin.phi2_concave && lin.dini_convergent);
        let log = dini_check(&DiniModulus::Log { c: 1.0 }, &g);
        assert!(log.monotone && !log.dini_convergent, "{log:?}");
    }

    #[test]
    fn factors() {
        let (e, j) = semigroup_factors(&[1.0], 1.0).unwrap();
        assert!((e[0] - (-1.0f64).exp()).abs() < 1e-16);
        assert!((j[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-16);
        let (e, _) = semigroup_factors(&[1.0, 4.0], 0.5).unwrap();
        assert_eq!(e, vec![(-0.5f64).exp(), (-2.0f64).exp()]);
        let (e, j) = semigroup_factors(&[0.0], 0.1).unwrap();
        assert_eq!((e[0], j[0]), (1.0, 0.1));
        assert!(semigroup_factors(&[-1.0], 0.1).is_err());
        let h = 1e-4;
        let (e, j) = semigroup_factors(&[2.0], h).unwrap();
        assert!((e[0] - 1.0).abs() < 3.0 * h && (j[0] - h).abs() < 3.0 * h * h);
    }

    proptest! {
        #[test]
        fn flow_property(l in 0.0f64..5.0, h1 in 0.0f64..2.0, h2 in 0.0f64..2.0) {
            prop_assume!(h1 > 0.0 && h2 > 0.0);
            let (a, _) = semigroup_factors(&[l], h1).unwrap();
            let (b, _) = semigroup_factors(&[l], h2).unwrap();
            let (c, _) = semigroup_factors(&[l], h1 + h2).unwrap();
            prop_assert!((a[0] * b[0] - c[0]).abs() < 1e-14);
        }

        #[test]
        fn cutoff_is_monotone_and_bounded(r in 0.0f64..3.0, dr in 0.0f64..0.5) {
            let (a, b) = (cutoff(r), cutoff(r + dr));
            prop_assert!(b <= a && (0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn reference_model_passes_with_declared_constants() {
        let m = ModelSpec::reference();
        let n = nu(1.0 / 32.0);
        let rep = validate_assumptions(&m, &n, 1.0, &ValidationOptions::default()).unwrap();
        assert!(rep.pass(), "{rep:?}");
        let c_b = m.declared_bounds(&n).c_b;
        assert!((c_b - 0.25 * n.total_mass()).abs() < 1e-15);
        assert!(rep.checks.iter().all(|c| c.samples >= 41));
    }

    #[test]
    fn square_drift_violates_modulus() {
        let mut m = ModelSpec::reference();
        m.point_drift = PointDrift::Square;
        let opts = ValidationOptions {
            box_radius: 10.0,
            ..Default::default()
        };
        let rep = validate_assumptions(&m, &nu(0.125), 1.0, &opts).unwrap();
        let c = rep.get("b Dini continuous").unwrap();
        assert!(!c.pass);
        assert_eq!(c.witness.len(), 2);
        let (x, y) = (c.witness[0], c.witness[1]);
        assert!((x * x - y * y).abs() > (x - y).abs().sqrt());
    }

    #[test]
    fn rectangular_noise_is_invertible() {
        let mut m = ModelSpec::reference();
        m.noise_dim = 2;
        m.diffusion = Diffusion::Constant {
            matrix: vec![1.0, 0.0],
        };
        let rep = validate_assumptions(&m, &nu(0.125), 1.0, &ValidationOptions::default()).unwrap();
        assert!(rep.get("QQ* invertible").unwrap().pass);
    }

    #[test]
    fn multiplicative_derivative_bounds_hold() {
        let m = ModelSpec::multiplicative(1.0, 0.5, 1.0, 0.3);
        let rep = validate_assumptions(&m, &nu(0.125), 1.0, &ValidationOptions::default()).unwrap();
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn larger_tolerance_never_flips_to_fail() {
        let mut m = ModelSpec::reference();
        m.point_drift = PointDrift::SqrtMin { scale: 1.0000001 };
        let n = nu(0.125);
        for tol in [1e-9, 1e-6, 1e-3] {
            let lo = validate_assumptions(&m, &n, 1.0, &ValidationOptions { tol, ..Default::default() }).unwrap();
            let hi = validate_assumptions(&m, &n, 1.0, &ValidationOptions { tol: tol * 10.0, ..Default::default() }).unwrap();
            for (a, b) in lo.checks.iter().zip(&hi.checks) {
                assert!(!a.pass || b.pass);
            }
        }
    }

    #[test]
    fn truncation_examples() {
        let m = ModelSpec::reference().truncated(2.0);
        let mut out = [0.0];
        m.point_drift_at(&[1.5], &mut out);
        assert_eq!(out[0], 1.0);
        m.point_drift_at(&[4.0], &mut out);
        assert_eq!(out[0], 0.0);
        let e = ModelSpec::explosive(1.0).truncated(1.0);
        e.point_drift_at(&[0.9], &mut out);
        assert_eq!(out[0], 0.9f64.powi(3));
    }

    #[test]
    fn truncated_delay_drift_is_lipschitz_on_samples() {
        let m = ModelSpec::linear_delay(1.0, 2.0, 1.0).truncated(1.5);
        let n = nu(0.125);
        let mut worst = 0.0f64;
        let mut s = NoiseStream::new(3, 0, 0);
        for _ in 0..500 {
            let a: Vec<f64> = (0..9).map(|_| 2.0 * s.standard_normal()).collect();
            let b: Vec<f64> = a.iter().map(|x| x + 0.1 * s.standard_normal()).collect();
            let xi = Segment::new(1, a).unwrap();
            let eta = Segment::new(1, b).unwrap();
            let (mut p, mut q) = ([0.0], [0.0]);
            m.delay_drift_on(&n, &xi, &mut p).unwrap();
            m.delay_drift_on(&n, &eta, &mut q).unwrap();
            worst = worst.max((p[0] - q[0]).abs() / seg_distance(&n, &xi, &eta).unwrap());
        }
        assert!(worst.is_finite() && worst < 20.0, "{worst}");
    }

    #[test]
    fn growth_constant_for_linear_delay() {
        let n = nu(1.0 / 64.0);
        let g = ModelSpec::linear_delay(1.0, 0.5, 1.0).growth_condition(&n).unwrap();
        assert!((g.c - 0.5 * n.total_mass().sqrt()).abs() < 1e-15);
        assert_eq!(ModelSpec::reference().growth_condition(&n), Err(Error::UnsupportedModel));
    }
}
