//! Mild-solution integrators on a uniform grid over `[-r0, T_end]`.
//!
//! Exponential Euler: `X⁺ = E X + J (b + B) + E Q dW` with `(E, J)` from
//! [`semigroup_factors`]. Euler–Maruyama: `X⁺ = X + h (A X + b + B) + Q dW`.
//! The delay drift is explicit, evaluated on the left-endpoint segment.

use serde::{Deserialize, Serialize};

use crate::delay_measure::{grid_count, CellSums, DelayMeasure, Segment};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{semigroup_factors, Dynamics, GrowthCondition, ModelSpec, MAX_DIM};
use crate::parallel::map_indexed;
use crate::rng::{NoiseStream, StreamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    ExponentialEuler,
    EulerMaruyama,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub scheme: Scheme,
    pub h: f64,
    pub t_end: f64,
    /// Coefficient cutoff radius; `None` disables truncation.
    #[serde(default)]
    pub truncation: Option<f64>,
    #[serde(default = "default_explode")]
    pub r_explode: f64,
    /// Each increment sums `2^refinement` finer increments.
    #[serde(default)]
    pub refinement: u32,
}

fn default_explode() -> f64 {
    1e6
}

impl SolverConfig {
    pub fn new(h: f64, t_end: f64) -> Self {
        SolverConfig {
            scheme: Scheme::ExponentialEuler,
            h,
            t_end,
            truncation: None,
            r_explode: default_explode(),
            refinement: 0,
        }
    }

    pub fn with_scheme(mut self, s: Scheme) -> Self {
        self.scheme = s;
        self
    }

    pub fn steps(&self) -> Result<usize> {
        grid_count(self.t_end, self.h).ok_or_else(|| {
            Error::GridMismatch(format!("T_end = {} is not a multiple of h = {}", self.t_end, self.h))
        })
    }

    fn check(&self, nu: &DelayMeasure) -> Result<usize> {
        if (self.h - nu.h()).abs() > 1e-12 * self.h {
            return Err(Error::GridMismatch(format!(
                "solver step {} differs from the measure grid {}",
                self.h,
                nu.h()
            )));
        }
        if let Some(m) = self.truncation {
            if !(m > 0.0) {
                return Err(Error::Domain("truncation level must be positive".into()));
            }
        }
        self.steps()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LifetimeKind {
    /// `‖X_t‖_{C_ν}` reached the truncation radius; integration continues.
    Truncation,
    /// `|X(t)| ≥ R_explode`; integration stops.
    Explosion,
    /// Non-finite state; integration stops.
    Overflow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lifetime {
    pub time: f64,
    pub kind: LifetimeKind,
}

/// State history, delay coordinates and running cell sums of one path.
#[derive(Clone, Debug)]
pub struct PathBuffer {
    d: usize,
    n_hist: usize,
    h: f64,
    k: usize,
    states: Vec<f64>,
    coords: Vec<f64>,
    sums: CellSums,
}

impl PathBuffer {
    pub fn new<D: Dynamics + ?Sized>(
        model: &D,
        nu: &DelayMeasure,
        xi: &Segment,
        steps: usize,
    ) -> Result<Self> {
        let d = model.dim();
        let n = nu.cells();
        if xi.dim() != d || xi.len() != n + 1 {
            return Err(Error::GridMismatch(format!(
                "initial segment has {} points of dim {}, need {} of dim {d}",
                xi.len(),
                xi.dim(),
                n + 1
            )));
        }
        let cap = (n + steps + 1) * d;
        let mut states = Vec::with_capacity(cap);
        states.extend_from_slice(xi.values());
        let mut coords = Vec::with_capacity(cap);
        if model.has_delay_coords() {
            let mut c = [0.0; MAX_DIM];
            for (j, x) in xi.values().chunks(d).enumerate() {
                model.delay_coord(-nu.r0() + j as f64 * nu.h(), x, &mut c[..d])?;
                coords.extend_from_slice(&c[..d]);
            }
        } else {
            coords.extend_from_slice(xi.values());
        }
        let sums = CellSums::from_cells(nu, d, &coords[..n * d]);
        Ok(PathBuffer {
            d,
            n_hist: n,
            h: nu.h(),
            k: n,
            states,
            coords,
            sums,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }
    /// Current grid time.
    pub fn t(&self) -> f64 {
        (self.k - self.n_hist) as f64 * self.h
    }
    pub fn step_index(&self) -> usize {
        self.k - self.n_hist
    }
    pub fn state(&self) -> &[f64] {
        &self.states[self.k * self.d..(self.k + 1) * self.d]
    }
    pub fn coord(&self) -> &[f64] {
        &self.coords[self.k * self.d..(self.k + 1) * self.d]
    }
    pub fn sums(&self) -> &CellSums {
        &self.sums
    }
    /// `‖X_t‖²_{C_ν}` in delay coordinates.
    pub fn seg_norm_sq(&self) -> f64 {
        self.sums.sq + linalg::dot(self.coord(), self.coord())
    }
    pub fn states(&self) -> &[f64] {
        &self.states
    }
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Appends the next state.
    pub fn push<D: Dynamics + ?Sized>(&mut self, model: &D, nu: &DelayMeasure, x: &[f64]) -> Result<()> {
        let d = self.d;
        let t_next = self.t() + self.h;
        self.states.extend_from_slice(x);
        if model.has_delay_coords() {
            let mut c = [0.0; MAX_DIM];
            model.delay_coord(t_next, x, &mut c[..d])?;
            self.coords.extend_from_slice(&c[..d]);
        } else {
            self.coords.extend_from_slice(x);
        }
        let k = self.k;
        let n = self.n_hist;
        let (dropped, window) = (
            &self.coords[(k - n) * d..(k - n + 1) * d],
            &self.coords[(k + 1 - n) * d..(k + 1) * d],
        );
        self.sums.advance(nu, d, dropped, window);
        self.k += 1;
        Ok(())
    }

    /// Overwrites the current state (used when clamping coupled paths).
    pub fn replace_last<D: Dynamics + ?Sized>(&mut self, model: &D, nu: &DelayMeasure, x: &[f64]) -> Result<()> {
        let d = self.d;
        let k = self.k;
        self.states[k * d..(k + 1) * d].copy_from_slice(x);
        let mut c = [0.0; MAX_DIM];
        model.delay_coord(self.t(), x, &mut c[..d])?;
        self.coords[k * d..(k + 1) * d].copy_from_slice(&c[..d]);
        let _ = nu;
        Ok(())
    }

    /// Current segment in delay coordinates.
    pub fn coord_segment(&self) -> Segment {
        let d = self.d;
        let lo = (self.k - self.n_hist) * d;
        Segment::new(d, self.coords[lo..(self.k + 1) * d].to_vec()).expect("finite buffer")
    }
}

/// One integration step at the buffer's current time.
pub struct Stepper<'a, D: Dynamics + ?Sized> {
    model: &'a D,
    nu: &'a DelayMeasure,
    scheme: Scheme,
    h: f64,
    e: Vec<f64>,
    j: Vec<f64>,
}

impl<'a, D: Dynamics + ?Sized> Stepper<'a, D> {
    pub fn new(model: &'a D, nu: &'a DelayMeasure, scheme: Scheme, h: f64) -> Result<Self> {
        let (e, j) = semigroup_factors(model.rates(), h)?;
        Ok(Stepper {
            model,
            nu,
            scheme,
            h,
            e,
            j,
        })
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }

    /// Computes the next state from `buf` and `dw` into `out`.
    pub fn next_state(&self, buf: &PathBuffer, dw: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.model.dim();
        let dn = self.model.noise_dim();
        let t = buf.t();
        let x = buf.state();
        let mut drift = [0.0; MAX_DIM];
        let mut q = [0.0; MAX_DIM * MAX_DIM];
        let mut qdw = [0.0; MAX_DIM];
        self.model.drift(t, x, buf.coord(), buf.sums(), &mut drift[..d]);
        self.model.diffusion(t, x, &mut q[..d * dn]);
        linalg::mat_vec(&q[..d * dn], d, dn, dw, &mut qdw[..d]);
        let rates = self.model.rates();
        for i in 0..d {
            out[i] = match self.scheme {
                Scheme::ExponentialEuler => self.e[i] * x[i] + self.j[i] * drift[i] + self.e[i] * qdw[i],
                Scheme::EulerMaruyama => x[i] + self.h * (drift[i] - rates[i] * x[i]) + qdw[i],
            };
            if !out[i].is_finite() {
                return Err(Error::NumericalOverflow { t: t + self.h });
            }
        }
        Ok(())
    }

    pub fn advance(&self, buf: &mut PathBuffer, dw: &[f64]) -> Result<()> {
        let mut next = [0.0; MAX_DIM];
        let d = self.model.dim();
        self.next_state(buf, dw, &mut next[..d])?;
        buf.push(self.model, self.nu, &next[..d])
    }
}

/// Result of [`integrate`].
pub struct PathRun {
    pub buf: PathBuffer,
    pub lifetime: Option<Lifetime>,
    /// Time integration stopped early (explosion or overflow).
    pub stopped_at: Option<f64>,
}

/// Integrates from `t = 0` to `cfg.t_end`. `observe(buf, dw)` is called
/// before each step with the current buffer and the increment about to be
/// applied.
pub fn integrate<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    xi: &Segment,
    cfg: &SolverConfig,
    noise: &mut NoiseStream,
    mut observe: impl FnMut(&PathBuffer, &[f64]),
) -> Result<PathRun> {
    let steps = cfg.check(nu)?;
    let dn = model.noise_dim();
    let stepper = Stepper::new(model, nu, cfg.scheme, cfg.h)?;
    let mut buf = PathBuffer::new(model, nu, xi, steps)?;
    let mut lifetime = None;
    let mut stopped_at = None;
    let mut dw = [0.0; MAX_DIM];
    let level = model.truncation();
    if let Some(m) = level {
        if buf.seg_norm_sq().sqrt() >= m {
            lifetime = Some(Lifetime { time: 0.0, kind: LifetimeKind::Truncation });
        }
    }
    for _ in 0..steps {
        noise.increment(cfg.h, &mut dw[..dn]);
        observe(&buf, &dw[..dn]);
        let t_next = buf.t() + cfg.h;
        match stepper.advance(&mut buf, &dw[..dn]) {
            Ok(()) => {}
            Err(Error::NumericalOverflow { .. }) => {
                lifetime.get_or_insert(Lifetime { time: t_next, kind: LifetimeKind::Overflow });
                stopped_at = Some(t_next);
                break;
            }
            Err(e) => return Err(e),
        }
        if linalg::norm(buf.state()) >= cfg.r_explode {
            lifetime.get_or_insert(Lifetime { time: t_next, kind: LifetimeKind::Explosion });
            stopped_at = Some(t_next);
            break;
        }
        if let Some(m) = level {
            if lifetime.is_none() && buf.seg_norm_sq().sqrt() >= m {
                lifetime = Some(Lifetime { time: t_next, kind: LifetimeKind::Truncation });
            }
        }
    }
    Ok(PathRun { buf, lifetime, stopped_at })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplePath {
    pub d: usize,
    pub noise_dim: usize,
    pub h: f64,
    pub r0: f64,
    /// Last covered grid time.
    pub t_end: f64,
    pub scheme: Scheme,
    /// States at `-r0 + k h`, row-major.
    pub states: Vec<f64>,
    /// Increments for each step, row-major.
    pub dw: Vec<f64>,
    pub seed: Option<StreamId>,
    pub lifetime: Option<Lifetime>,
}

impl SamplePath {
    /// Builds a path from raw states on `[-r0, t_end]` (no noise record).
    pub fn from_states(d: usize, noise_dim: usize, h: f64, r0: f64, t_end: f64, states: Vec<f64>) -> Self {
        SamplePath {
            d,
            noise_dim,
            h,
            r0,
            t_end,
            scheme: Scheme::ExponentialEuler,
            states,
            dw: vec![],
            seed: None,
            lifetime: None,
        }
    }

    fn n_hist(&self) -> usize {
        grid_count(self.r0, self.h).unwrap_or(0)
    }

    fn index(&self, t: f64) -> Result<usize> {
        let n = self.n_hist();
        let last = self.states.len() / self.d - 1;
        let max = (last - n) as f64 * self.h;
        let k = grid_count(t + self.r0, self.h).ok_or(Error::OutOfRange { t, min: -self.r0, max })?;
        if k > last {
            return Err(Error::OutOfRange { t, min: -self.r0, max });
        }
        Ok(k)
    }

    pub fn state_at(&self, t: f64) -> Result<&[f64]> {
        let k = self.index(t)?;
        Ok(&self.states[k * self.d..(k + 1) * self.d])
    }

    /// `X_t`, defined for grid times `0 ≤ t ≤ t_end`.
    pub fn segment(&self, t: f64) -> Result<Segment> {
        let n = self.n_hist();
        let last = (self.states.len() / self.d - 1 - n) as f64 * self.h;
        if t < -1e-12 {
            return Err(Error::OutOfRange { t, min: 0.0, max: last });
        }
        let k = self.index(t).map_err(|_| Error::OutOfRange { t, min: 0.0, max: last })?;
        Segment::new(self.d, self.states[(k - n) * self.d..(k + 1) * self.d].to_vec())
    }

    pub fn final_state(&self) -> &[f64] {
        &self.states[self.states.len() - self.d..]
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        -self.r0 + k as f64 * self.h
    }

    /// `sup_t |X(t)|` over the covered times `t ≥ 0`.
    pub fn sup_norm(&self) -> f64 {
        self.states[self.n_hist() * self.d..]
            .chunks(self.d)
            .map(linalg::norm)
            .fold(0.0, f64::max)
    }
}

/// Applies the solver's truncation setting to a model.
pub fn effective_model(m: &ModelSpec, cfg: &SolverConfig) -> ModelSpec {
    match cfg.truncation {
        Some(level) => m.truncated(level),
        None => m.clone(),
    }
}

/// One step of the scheme from segment `seg` at time `t`.
pub fn step(
    m: &ModelSpec,
    nu: &DelayMeasure,
    seg: &Segment,
    t: f64,
    dw: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let model = effective_model(m, cfg);
    model.check()?;
    let buf = PathBuffer::new(&model, nu, seg, 1)?;
    let stepper = Stepper::new(&model, nu, cfg.scheme, cfg.h)?;
    let d = model.dim();
    let mut out = vec![0.0; d];
    stepper
        .next_state(&buf, dw, &mut out)
        .map_err(|_| Error::NumericalOverflow { t: t + cfg.h })?;
    Ok(out)
}

/// Full sample path for the path index in `seed`.
pub fn solve_path(
    m: &ModelSpec,
    nu: &DelayMeasure,
    xi: &Segment,
    cfg: &SolverConfig,
    seed: StreamId,
) -> Result<SamplePath> {
    let model = effective_model(m, cfg);
    model.check()?;
    let mut noise = NoiseStream::new(seed.base_seed, seed.path, cfg.refinement);
    solve_path_with(&model, nu, xi, cfg, &mut noise)
}

/// As [`solve_path`] for any [`Dynamics`] and an explicit noise stream.
pub fn solve_path_with<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    xi: &Segment,
    cfg: &SolverConfig,
    noise: &mut NoiseStream,
) -> Result<SamplePath> {
    let steps = cfg.steps()?;
    let mut dw = Vec::with_capacity(steps * model.noise_dim());
    let run = integrate(model, nu, xi, cfg, noise, |_, inc| dw.extend_from_slice(inc))?;
    let n = nu.cells();
    let d = model.dim();
    let covered = run.buf.states().len() / d - 1 - n;
    dw.truncate(covered * model.noise_dim());
    Ok(SamplePath {
        d,
        noise_dim: model.noise_dim(),
        h: cfg.h,
        r0: nu.r0(),
        t_end: covered as f64 * cfg.h,
        scheme: cfg.scheme,
        states: run.buf.states().to_vec(),
        dw,
        seed: Some(noise.id()),
        lifetime: run.lifetime,
    })
}

/// Path batch: `n` paths with streams `(base_seed, 0..n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub n: usize,
    pub base_seed: u64,
    /// Worker threads; 0 picks the default pool, 1 runs inline.
    pub workers: usize,
}

impl Batch {
    pub fn new(n: usize, base_seed: u64) -> Self {
        Batch { n, base_seed, workers: 0 }
    }
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }
}

/// Runs `batch.n` paths to `cfg.t_end` and maps each final buffer through
/// `f`. Results are in path order.
pub fn run_batch<D, T, F>(
    model: &D,
    nu: &DelayMeasure,
    xi: &Segment,
    cfg: &SolverConfig,
    batch: &Batch,
    f: F,
) -> Vec<Result<T>>
where
    D: Dynamics + ?Sized,
    T: Send,
    F: Fn(&PathRun) -> T + Sync + Send,
{
    map_indexed(batch.n, batch.workers, |i| {
        let mut noise = NoiseStream::new(batch.base_seed, i as u64, cfg.refinement);
        integrate(model, nu, xi, cfg, &mut noise, |_, _| {}).map(|run| f(&run))
    })
}

/// Terminal states `X(T_end)` of a batch; an exploded path yields an error.
pub fn terminal_states<D: Dynamics + ?Sized>(
    model: &D,
    nu: &DelayMeasure,
    xi: &Segment,
    cfg: &SolverConfig,
    batch: &Batch,
) -> Result<Vec<Vec<f64>>> {
    let out = run_batch(model, nu, xi, cfg, batch, |run| {
        if run.stopped_at.is_some() {
            None
        } else {
            Some(run.buf.state().to_vec())
        }
    });
    let mut res = Vec::with_capacity(out.len());
    let mut bad = 0usize;
    for r in out {
        match r? {
            Some(x) => res.push(x),
            None => bad += 1,
        }
    }
    if bad > 0 {
        return Err(Error::ExplosionBeforeHorizon {
            fraction: bad as f64 / batch.n as f64,
            horizon: cfg.t_end,
        });
    }
    Ok(res)
}

/// `E|X^h(T) - X^{h/2}(T)|` over a batch, the two resolutions driven by the
/// same Brownian path (coarse increments are sums of fine pairs).
///
/// `measure(h)` builds ν on the grid `h`, `initial(θ, out)` the initial
/// segment.
pub fn strong_error<D: Dynamics + ?Sized>(
    model: &D,
    measure: impl Fn(f64) -> Result<DelayMeasure>,
    initial: impl Fn(f64, &mut [f64]) + Copy,
    cfg: &SolverConfig,
    batch: &Batch,
) -> Result<crate::stats::MeanStderr> {
    let h = cfg.h;
    let nu_c = measure(h)?;
    let nu_f = measure(h / 2.0)?;
    let d = model.dim();
    let xi_c = Segment::from_fn(&nu_c, d, initial);
    let xi_f = Segment::from_fn(&nu_f, d, initial);
    let mut cfg_c = cfg.clone();
    cfg_c.refinement = 1;
    let mut cfg_f = cfg.clone();
    cfg_f.h = h / 2.0;
    cfg_f.refinement = 0;
    let errs = map_indexed(batch.n, batch.workers, |i| -> Result<f64> {
        let mut nc = NoiseStream::new(batch.base_seed, i as u64, 1);
        let mut nf = NoiseStream::new(batch.base_seed, i as u64, 0);
        let a = integrate(model, &nu_c, &xi_c, &cfg_c, &mut nc, |_, _| {})?;
        let b = integrate(model, &nu_f, &xi_f, &cfg_f, &mut nf, |_, _| {})?;
        let mut diff = [0.0; MAX_DIM];
        for k in 0..d {
            diff[k] = a.buf.state()[k] - b.buf.state()[k];
        }
        Ok(linalg::norm(&diff[..d]))
    });
    let errs: Result<Vec<f64>> = errs.into_iter().collect();
    Ok(crate::stats::mean_stderr(&errs?))
}

#[allow(clippy::excessive_precision)]
const GK_NODES: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const GK_WK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
#[allow(clippy::excessive_precision)]
const GK_WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// One Gauss–Kronrod 7/15 panel: (estimate, error estimate).
fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let mut k = 0.0;
    let mut g = 0.0;
    for (i, &x) in GK_NODES.iter().enumerate() {
        let v = if x == 0.0 { f(c) } else { f(c - hw * x) + f(c + hw * x) };
        k += GK_WK[i] * v;
        if i % 2 == 1 {
            g += GK_WG[i / 2] * v;
        }
    }
    (k * hw, ((k - g) * hw).abs())
}

/// Adaptive Gauss–Kronrod quadrature with a relative tolerance.
pub fn integrate_adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let first = gk15(f, a, b);
    let mut parts = vec![(a, b, first.0, first.1)];
    let (mut total, mut err) = first;
    let mut abs_sum = first.0.abs();
    for _ in 0..500 {
        let floor = 64.0 * f64::EPSILON * abs_sum;
        if err <= (rel_tol * total.abs()).max(floor) {
            break;
        }
        let i = (0..parts.len())
            .max_by(|&x, &y| parts[x].3.total_cmp(&parts[y].3))
            .unwrap();
        let (lo, hi, v, e) = parts.swap_remove(i);
        let mid = 0.5 * (lo + hi);
        let l = gk15(f, lo, mid);
        let r = gk15(f, mid, hi);
        total += l.0 + r.0 - v;
        err += l.1 + r.1 - e;
        abs_sum += l.0.abs() + r.0.abs() - v.abs();
        parts.push((lo, mid, l.0, l.1));
        parts.push((mid, hi, r.0, r.1));
    }
    parts.iter().map(|p| p.2).sum()
}

/// `Ψ(s) = ∫₁^s dr / (2Φ(K1 + K2 r))`, integrated in `v = ln r` for `s ≥ 1`.
pub fn bihari_psi(phi: &dyn Fn(f64) -> f64, k1: f64, k2: f64, s: f64) -> f64 {
    if s >= 1.0 {
        let g = |v: f64| {
            let r = v.exp();
            r / (2.0 * phi(k1 + k2 * r))
        };
        integrate_adaptive(&g, 0.0, s.ln(), 1e-13)
    } else {
        let g = |r: f64| 1.0 / (2.0 * phi(k1 + k2 * r));
        -integrate_adaptive(&g, s.max(0.0), 1.0, 1e-13)
    }
}

/// Default search cap for the Bihari inverse.
pub const BIHARI_CAP: f64 = 1e8;

/// `Ψ^{-1}(α + T)`; errors if `Ψ(cap) < α + T`.
pub fn bihari_bound(phi: &dyn Fn(f64) -> f64, k1: f64, k2: f64, alpha: f64, t: f64) -> Result<f64> {
    bihari_bound_capped(phi, k1, k2, alpha, t, BIHARI_CAP)
}

pub fn bihari_bound_capped(
    phi: &dyn Fn(f64) -> f64,
    k1: f64,
    k2: f64,
    alpha: f64,
    t: f64,
    cap: f64,
) -> Result<f64> {
    if !(k1 >= 0.0) || !(k2 >= 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("need K1, K2 >= 0 and finite alpha (K1 = {k1}, K2 = {k2}, alpha = {alpha})")));
    }
    // ∫ ds/Φ must diverge: compare the integral over two late decades.
    let late = |a: f64, b: f64| bihari_psi(phi, k1, k2, b) - bihari_psi(phi, k1, k2, a);
    let (i1, i2) = (late(1e4, 1e6), late(1e6, 1e8));
    if !(i2 >= 0.1 * i1) {
        return Err(Error::Domain("1/Phi appears integrable at infinity".into()));
    }
    let target = alpha + t;
    let psi = |s: f64| bihari_psi(phi, k1, k2, s);
    let dpsi = |s: f64| 1.0 / (2.0 * phi(k1 + k2 * s));
    let psi_cap = psi(cap);
    if psi_cap < target {
        return Err(Error::BoundExceedsCap { cap, psi_at_cap: psi_cap, target });
    }
    let (mut lo, mut hi) = if target >= 0.0 { (1.0, 2.0) } else { (0.0, 1.0) };
    if target >= 0.0 {
        while psi(hi) < target {
            lo = hi;
            hi = (hi * 4.0).min(cap);
            if hi == cap {
                break;
            }
        }
    } else if psi(0.0) > target {
        return Ok(0.0);
    }
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = psi(s) - target;
        if f > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        if f == 0.0 || (hi - lo) <= 1e-15 * hi {
            break;
        }
        let newton = s - f / dpsi(s);
        let next = if newton >= lo && newton <= hi { newton } else { 0.5 * (lo + hi) };
        if (next - s).abs() <= 1e-15 * s {
            s = next;
            break;
        }
        s = next;
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AprioriPath {
    /// `sup_{t ≤ T} |Y(t)|²` with `Y = X - X̄`.
    pub h_sup: f64,
    pub alpha: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AprioriReport {
    pub paths: usize,
    pub pass_fraction: f64,
    pub k1: f64,
    pub k2: f64,
    pub growth: GrowthCondition,
    /// Smallest `bound - H` over the batch.
    pub min_margin: f64,
}

/// Checks the Bihari bound along one path of `m` (as simulated, including
/// any truncation in `m`).
pub fn apriori_path(
    m: &ModelSpec,
    nu: &DelayMeasure,
    g: GrowthCondition,
    path: &SamplePath,
    horizon: f64,
) -> Result<AprioriPath> {
    let d = path.d;
    let dn = path.noise_dim;
    let n = nu.cells();
    let steps = grid_count(horizon, path.h)
        .ok_or_else(|| Error::GridMismatch(format!("T = {horizon} is off the grid")))?;
    if path.len() < n + steps + 1 || path.dw.len() < steps * dn {
        return Err(Error::OutOfRange { t: horizon, min: 0.0, max: path.t_end });
    }
    let (e, _) = semigroup_factors(&m.rates, path.h)?;
    let x0 = Segment::new(d, path.states[..(n + 1) * d].to_vec())?;
    let x0_norm2 = crate::delay_measure::seg_norm(nu, &x0)?.powi(2);
    let k1 = nu.kappa(horizon) * x0_norm2;
    let k2 = 1.0 + nu.mass_within(horizon);
    // X̄ = 0 on [-r0, 0].
    let mut xbar = vec![0.0; (n + steps + 1) * d];
    let mut sums = CellSums::from_cells(nu, d, &xbar[..n * d]);
    let mut q = [0.0; MAX_DIM * MAX_DIM];
    let mut qdw = [0.0; MAX_DIM];
    let xcur = |k: usize| &path.states[k * d..(k + 1) * d];
    let y0: Vec<f64> = xcur(n).to_vec();
    let mut h_sup = linalg::dot(&y0, &y0);
    let mut integral = 0.0;
    for s in 0..steps {
        let k = n + s;
        let xb = &xbar[k * d..(k + 1) * d];
        let norm = (sums.sq + linalg::dot(xb, xb)).sqrt();
        integral += g.h(norm) * path.h;
        m.diffusion(path.time(k), xcur(k), &mut q[..d * dn]);
        linalg::mat_vec(&q[..d * dn], d, dn, &path.dw[s * dn..(s + 1) * dn], &mut qdw[..d]);
        for i in 0..d {
            let next = match path.scheme {
                Scheme::ExponentialEuler => e[i] * xbar[k * d + i] + e[i] * qdw[i],
                Scheme::EulerMaruyama => xbar[k * d + i] * (1.0 - path.h * m.rates[i]) + qdw[i],
            };
            xbar[(k + 1) * d + i] = next;
        }
        let (dropped, window) = (&xbar[(k - n) * d..(k - n + 1) * d], &xbar[(k + 1 - n) * d..(k + 1) * d]);
        sums.advance(nu, d, dropped, window);
        let mut y2 = 0.0;
        for i in 0..d {
            let y = xcur(k + 1)[i] - xbar[(k + 1) * d + i];
            y2 += y * y;
        }
        h_sup = h_sup.max(y2);
    }
    let alpha = linalg::dot(&y0, &y0) + 2.0 * integral;
    let phi = |s: f64| g.phi(s);
    let bound = bihari_bound(&phi, k1, k2, alpha, horizon)?;
    Ok(AprioriPath { h_sup, alpha, bound, pass: h_sup <= bound })
}

/// [`apriori_path`] over stored paths.
pub fn apriori_check(m: &ModelSpec, nu: &DelayMeasure, paths: &[SamplePath], horizon: f64) -> Result<AprioriReport> {
    let g = m.growth_condition(nu)?;
    let res: Result<Vec<AprioriPath>> = paths.iter().map(|p| apriori_path(m, nu, g, p, horizon)).collect();
    summarize_apriori(m, nu, g, paths.first().map(|p| p.states[..(nu.cells() + 1) * p.d].to_vec()), &res?, horizon)
}

/// Simulates a batch and checks each path without storing it.
pub fn apriori_check_batch(
    m: &ModelSpec,
    nu: &DelayMeasure,
    xi: &Segment,
    cfg: &SolverConfig,
    batch: &Batch,
) -> Result<AprioriReport> {
    let g = m.growth_condition(nu)?;
    let model = effective_model(m, cfg);
    let res = map_indexed(batch.n, batch.workers, |i| {
        let p = solve_path(&model, nu, xi, cfg, StreamId { base_seed: batch.base_seed, path: i as u64 })?;
        apriori_path(&model, nu, g, &p, cfg.t_end)
    });
    let res: Result<Vec<AprioriPath>> = res.into_iter().collect();
    summarize_apriori(m, nu, g, Some(xi.values().to_vec()), &res?, cfg.t_end)
}

fn summarize_apriori(
    m: &ModelSpec,
    nu: &DelayMeasure,
    g: GrowthCondition,
    x0: Option<Vec<f64>>,
    res: &[AprioriPath],
    horizon: f64,
) -> Result<AprioriReport> {
    let d = m.dim();
    let k1 = match x0 {
        Some(v) => nu.kappa(horizon) * crate::delay_measure::seg_norm(nu, &Segment::new(d, v)?)?.powi(2),
        None => 0.0,
    };
    let passed = res.iter().filter(|r| r.pass).count();
    Ok(AprioriReport {
        paths: res.len(),
        pass_fraction: if res.is_empty() { 1.0 } else { passed as f64 / res.len() as f64 },
        k1,
        k2: 1.0 + nu.mass_within(horizon),
        growth: g,
        min_margin: res.iter().map(|r| r.bound - r.h_sup).fold(f64::INFINITY, f64::min),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay_measure::MeasureKind;
    use crate::stats::mean_stderr;

    fn nu(h: f64) -> DelayMeasure {
        DelayMeasure::new(MeasureKind::Exponential { lambda: 1.0 }, 1.0, h).unwrap()
    }

    #[test]
    fn deterministic_linear_flow() {
        let h = 1.0 / 16.0;
        let n = nu(h);
        let xi = Segment::constant(&n, &[1.0]);
        let p = solve_path(&ModelSpec::zero(1.0), &n, &xi, &SolverConfig::new(h, 1.0), StreamId { base_seed: 0, path: 0 }).unwrap();
        for k in 0..=16 {
            let t = k as f64 * h;
            assert!((p.state_at(t).unwrap()[0] - (-t).exp()).abs() < 1e-14);
        }
        assert!(p.lifetime.is_none());
    }

    #[test]
    fn single_step_examples() {
        let h = 0.25;
        let n = nu(h);
        let cfg = SolverConfig::new(h, 1.0);
        let seg = Segment::constant(&n, &[2.0]);
        let x = step(&ModelSpec::zero(1.0), &n, &seg, 0.0, &[0.0], &cfg).unwrap();
        assert!((x[0] - 2.0 * (-h).exp()).abs() < 1e-15);
        let m = {
            let mut m = ModelSpec::linear_delay(1.0, 0.5, 0.0);
            m.diffusion = crate::model::Diffusion::Zero;
            m
        };
        let x = step(&m, &n, &seg, 0.0, &[0.3], &cfg).unwrap();
        let j = 1.0 - (-h).exp();
        let expect = (-h).exp() * 2.0 + j * 0.5 * n.total_mass() * 2.0;
        assert!((x[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn one_step_gaussian_moments() {
        // Mean e^{-h} x0, variance σ² e^{-2h} h.
        let h = 0.25;
        let n = nu(h);
        let m = ModelSpec::ou(1.0, 1.0);
        let cfg = SolverConfig::new(h, h);
        let xi = Segment::constant(&n, &[1.0]);
        let xs: Vec<f64> = terminal_states(&m, &n, &xi, &cfg, &Batch::new(40_000, 5))
            .unwrap()
            .into_iter()
            .map(|v| v[0])
            .collect();
        let s = mean_stderr(&xs);
        assert!((s.mean - (-h).exp()).abs() < 4.0 * s.stderr);
        let var = crate::stats::variance(&xs);
        let expect = (-2.0 * h).exp() * h;
        assert!((var - expect).abs() < 4.0 * expect * (2.0 / xs.len() as f64).sqrt());
    }

    #[test]
    fn explosive_drift_records_lifetime() {
        let h = 1.0 / 64.0;
        let n = nu(h);
        let xi = Segment::constant(&n, &[2.0]);
        let cfg = SolverConfig::new(h, 1.0).with_scheme(Scheme::EulerMaruyama);
        let p = solve_path(&ModelSpec::explosive(1.0), &n, &xi, &cfg, StreamId { base_seed: 0, path: 0 }).unwrap();
        let l = p.lifetime.unwrap();
        assert!(matches!(l.kind, LifetimeKind::Explosion | LifetimeKind::Overflow));
        // dx/dt = x³ - x from 2 blows up at t = ln(4/3)/2 ≈ 0.144.
        assert!(l.time < 0.3, "{l:?}");
        assert!(p.t_end < 1.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let h = 1.0 / 32.0;
        let n = nu(h);
        let xi = Segment::constant(&n, &[0.5]);
        let cfg = SolverConfig::new(h, 1.0);
        let id = StreamId { base_seed: 9, path: 4 };
        let a = solve_path(&ModelSpec::reference(), &n, &xi, &cfg, id).unwrap();
        let b = solve_path(&ModelSpec::reference(), &n, &xi, &cfg, id).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.dw, b.dw);
    }

    #[test]
    fn truncation_is_invisible_inside_the_radius() {
        let h = 1.0 / 32.0;
        let n = nu(h);
        let xi = Segment::constant(&n, &[0.5]);
        let mut cfg = SolverConfig::new(h, 1.0);
        let id = StreamId { base_seed: 2, path: 0 };
        let free = solve_path(&ModelSpec::reference(), &n, &xi, &cfg, id).unwrap();
        cfg.truncation = Some(50.0);
        let cut = solve_path(&ModelSpec::reference(), &n, &xi, &cfg, id).unwrap();
        assert!(cut.lifetime.is_none());
        assert_eq!(free.states, cut.states);
    }

    #[test]
    fn segment_extraction_from_solved_path() {
        let h = 0.25;
        let n = nu(h);
        let xi = Segment::constant(&n, &[3.0]);
        let p = solve_path(&ModelSpec::zero(1.0), &n, &xi, &SolverConfig::new(h, 1.0), StreamId { base_seed: 0, path: 0 }).unwrap();
        assert_eq!(p.segment(0.0).unwrap().values(), xi.values());
        assert!(p.segment(1.25).is_err());
        let mut m = ModelSpec::zero(1.0);
        m.rates = vec![1e-300];
        let c = solve_path(&m, &n, &xi, &SolverConfig::new(h, 1.0), StreamId { base_seed: 0, path: 0 }).unwrap();
        assert!(c.segment(1.0).unwrap().values().iter().all(|v| (*v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn bihari_closed_forms() {
        let c = 0.5;
        let phi = |s: f64| c * (1.0 + s);
        let b = bihari_bound(&phi, 0.0, 1.0, 0.0, 1.0).unwrap();
        let exact = 2.0 * std::f64::consts::E - 1.0;
        assert!((b - exact).abs() < 1e-8, "{b} vs {exact}");
        assert!((exact - 4.4366).abs() < 1e-4);
        let cst = |_: f64| 2.0;
        let b = bihari_bound(&cst, 0.0, 1.0, 0.5, 1.0).unwrap();
        assert!((b - (1.0 + 2.0 * 2.0 * 1.5)).abs() < 1e-9);
        let mut prev = 0.0;
        for a in [0.0, 1.0, 2.0, 4.0, 8.0] {
            let v = bihari_bound(&phi, 0.0, 1.0, a, 1.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(matches!(
            bihari_bound(&phi, 0.0, 1.0, 40.0, 1.0),
            Err(Error::BoundExceedsCap { .. })
        ));
        let quad = |s: f64| 1.0 + s * s;
        assert!(matches!(bihari_bound(&quad, 0.0, 1.0, 0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn apriori_deterministic_case() {
        let h = 1.0 / 64.0;
        let n = nu(h);
        let mut m = ModelSpec::linear_delay(1.0, 0.5, 0.0);
        m.diffusion = crate::model::Diffusion::Zero;
        let xi = Segment::constant(&n, &[1.0]);
        let cfg = SolverConfig::new(h, 1.0);
        let p = solve_path(&m, &n, &xi, &cfg, StreamId { base_seed: 0, path: 0 }).unwrap();
        let g = m.growth_condition(&n).unwrap();
        let r = apriori_path(&m, &n, g, &p, 1.0).unwrap();
        assert!((r.alpha - (1.0 + 2.0 * g.h(0.0))).abs() < 1e-15);
        assert!(r.pass);
        let zero = Segment::constant(&n, &[0.0]);
        let p = solve_path(&m, &n, &zero, &cfg, StreamId { base_seed: 0, path: 0 }).unwrap();
        let r = apriori_path(&m, &n, g, &p, 1.0).unwrap();
        assert_eq!(r.h_sup, 0.0);
        assert!(r.pass);
    }
}
