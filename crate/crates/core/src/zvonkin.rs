//! Regularizing transform `Θ = id + u` for a Dini point drift.
//!
//! `u` solves `u(s,·) = ∫_s^T e^{-λ(t-s)} P⁰_{s,t}(∇_b u(t,·) + b)(·) dt`,
//! where `P⁰` is the Ornstein–Uhlenbeck semigroup of `dZ = AZ dt + Q dW`.
//! With constant diagonal `Q` and a componentwise `b` the problem splits
//! into one scalar problem per axis, solved on a uniform `(s, x)` grid by
//! Picard iteration. `P⁰` is applied with Gauss–Hermite quadrature and
//! linear interpolation. The time integral uses the composite trapezoid rule
//! except on the first panel, where the midpoint rule with a half-step kernel
//! keeps the unsmoothed `b` out of the table.
//!
//! After the transform the point drift disappears:
//! `B̃(t,ξ) = Aξ(0) + (λ-A)u(t,Θ⁻¹ξ(0)) + ∇Θ(t,Θ⁻¹ξ(0)) B(t,Θ_t⁻¹ξ)` and
//! `Q̃ = (∇Θ Q)∘Θ⁻¹`.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::delay_measure::{CellSums, DelayMeasure, Segment};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Diffusion, Dynamics, ModelSpec, MAX_DIM};
use crate::parallel::map_indexed;
use crate::rng::NoiseStream;
use crate::solver::{integrate, Batch, SolverConfig};
use crate::stats::{mean_stderr, MeanStderr};

/// Probabilists' Gauss–Hermite rule: `E g(N(0,1)) ≈ Σ w_k g(z_k)`.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order.max(1);
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

/// Values on the uniform grid `lo + j dx`, linear in between, flat outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub lo: f64,
    pub dx: f64,
    pub values: Vec<f64>,
}

impl Table1 {
    pub fn from_fn(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        let dx = (hi - lo) / (n - 1) as f64;
        Table1 {
            lo,
            dx,
            values: (0..n).map(|j| f(lo + j as f64 * dx)).collect(),
        }
    }

    pub fn hi(&self) -> f64 {
        self.lo + (self.values.len() - 1) as f64 * self.dx
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (i, w) = locate(self.lo, self.dx, self.values.len(), x);
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }
}

/// Cell index `i` and weight `w` with `x ≈ (1-w) x_i + w x_{i+1}`, clamped.
#[inline]
fn locate(lo: f64, dx: f64, n: usize, x: f64) -> (usize, f64) {
    let p = (x - lo) / dx;
    if !(p > 0.0) {
        return (0, 0.0);
    }
    if p >= (n - 1) as f64 {
        return (n - 2, 1.0);
    }
    let i = p as usize;
    (i, p - i as f64)
}

/// Variance of the OU transition over `tau` for rate `a` and noise `σ`.
pub fn ou_variance(rate: f64, sigma: f64, tau: f64) -> f64 {
    if rate == 0.0 {
        sigma * sigma * tau
    } else {
        -sigma * sigma * (-2.0 * rate * tau).exp_m1() / (2.0 * rate)
    }
}

fn outside_mass(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if sd == 0.0 {
        return if mean < lo || mean > hi { 1.0 } else { 0.0 };
    }
    let s = std::f64::consts::SQRT_2 * sd;
    0.5 * statrs::function::erf::erfc((mean - lo) / s) + 0.5 * statrs::function::erf::erfc((hi - mean) / s)
}

/// `P⁰_{s,s+τ} g(x) = E g(Z)` with `Z ~ N(e^{-aτ} x, Σ(τ))`, scalar axis.
pub fn ou_apply(rate: f64, sigma: f64, g: &Table1, tau: f64, x: f64, order: usize) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("need t >= s, got tau = {tau}")));
    }
    let mean = (-rate * tau).exp() * x;
    let sd = ou_variance(rate, sigma, tau).sqrt();
    let outside = outside_mass(mean, sd, g.lo, g.hi());
    if outside > 1e-9 {
        return Err(Error::Coverage { outside_mass: outside });
    }
    if sd == 0.0 {
        return Ok(g.eval(mean));
    }
    let (z, w) = gauss_hermite(order);
    Ok(z.iter().zip(&w).map(|(z, w)| w * g.eval(mean + sd * z)).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZvonkinGrid {
    /// Step of the `s`-grid.
    pub s_step: f64,
    /// Points of the `x`-grid per axis.
    pub nx: usize,
    /// Box half-width; default `6·(stationary sd) + initial_range`.
    pub half_width: Option<f64>,
    pub initial_range: f64,
    pub gh_order: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub workers: usize,
}

impl Default for ZvonkinGrid {
    fn default() -> Self {
        ZvonkinGrid {
            s_step: 1.0 / 64.0,
            nx: 513,
            half_width: None,
            initial_range: 4.0,
            gh_order: 20,
            tol: 1e-10,
            max_iter: 100,
            workers: 0,
        }
    }
}

/// Tabulated solution on `[0, window] × [-L, L]^d`, one table per axis.
#[derive(Clone, Debug)]
pub struct RegularizedDrift {
    pub lambda: f64,
    pub window: f64,
    pub s_step: f64,
    pub ns: usize,
    pub lo: f64,
    pub dx: f64,
    pub nx: usize,
    /// `u[axis][i * nx + j]` at `(i s_step, lo + j dx)`.
    pub u: Vec<Vec<f64>>,
    /// Central-difference derivative, same layout.
    pub du: Vec<Vec<f64>>,
    /// Sup-norm change per Picard iteration.
    pub diffs: Vec<f64>,
    /// Sup-norm fixed-point residual of the returned table.
    pub residual: f64,
    /// `sup |u|` per axis.
    pub u_sup: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNorms {
    pub u: f64,
    pub du: f64,
    pub d2u: f64,
}

impl RegularizedDrift {
    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn half_width(&self) -> f64 {
        -self.lo
    }

    #[inline]
    fn time_index(&self, t: f64) -> (usize, f64) {
        locate(0.0, self.s_step, self.ns + 1, t)
    }

    #[inline]
    fn bilinear(&self, table: &[f64], t: f64, x: f64) -> f64 {
        let (i, wt) = self.time_index(t);
        let (j, wx) = locate(self.lo, self.dx, self.nx, x);
        let r0 = &table[i * self.nx..];
        let r1 = &table[(i + 1) * self.nx..];
        let a = r0[j] * (1.0 - wx) + r0[j + 1] * wx;
        let b = r1[j] * (1.0 - wx) + r1[j + 1] * wx;
        a * (1.0 - wt) + b * wt
    }

    /// `u(t, x)`, with `u(t) = u(0)` for `t < 0`.
    pub fn u_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.bilinear(&self.u[k], t, x[k]);
        }
    }

    /// Diagonal of `∇u(t, x)`.
    pub fn du_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.bilinear(&self.du[k], t, x[k]);
        }
    }

    pub fn theta(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.u_at(t, x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += xi;
        }
    }

    /// Solves `y = x + u(t, x)` per axis; the piecewise-linear interpolant is
    /// strictly increasing, so a safeguarded Newton iteration is exact.
    fn invert_axis(&self, k: usize, t: f64, y: f64) -> f64 {
        let table = &self.u[k];
        let (i, wt) = self.time_index(t);
        let ut = |j: usize| table[i * self.nx + j] * (1.0 - wt) + table[(i + 1) * self.nx + j] * wt;
        let eval = |x: f64| -> (f64, f64) {
            let (j, wx) = locate(self.lo, self.dx, self.nx, x);
            let (a, b) = (ut(j), ut(j + 1));
            let inside = x > self.lo && x < self.lo + (self.nx - 1) as f64 * self.dx;
            let slope = if inside { (b - a) / self.dx } else { 0.0 };
            (x + a * (1.0 - wx) + b * wx - y, 1.0 + slope)
        };
        let bound = self.u_sup[k] + 1e-9;
        let (mut lo, mut hi) = (y - bound, y + bound);
        let mut x = y - self.bilinear(table, t, y);
        for _ in 0..200 {
            let (f, s) = eval(x);
            if f.abs() <= 1e-13 {
                break;
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let nx = x - f / s;
            x = if nx > lo && nx < hi { nx } else { 0.5 * (lo + hi) };
            if hi - lo <= 1e-15 * (1.0 + y.abs()) {
                break;
            }
        }
        x
    }

    fn sup_u_axis(&self, k: usize) -> f64 {
        sup_abs(&self.u[k])
    }

    /// `Θ⁻¹(t, y)` without the box check.
    pub fn theta_inverse_unchecked(&self, t: f64, y: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.invert_axis(k, t, y[k]);
        }
    }

    /// `Θ⁻¹(t, y)`; fails if the preimage leaves the tabulation box.
    pub fn theta_inverse(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        self.theta_inverse_unchecked(t, y, out);
        let l = self.half_width();
        for &x in out.iter() {
            if !x.is_finite() || x.abs() > l {
                return Err(Error::BoxEscape { x });
            }
        }
        Ok(())
    }

    /// Sup norms of `u`, `∇u` and the central second difference.
    pub fn norms(&self) -> UNorms {
        let mut n = UNorms { u: 0.0, du: 0.0, d2u: 0.0 };
        let nx = self.nx;
        for k in 0..self.dim() {
            n.u = n.u.max(self.sup_u_axis(k));
            n.du = n.du.max(self.du[k].iter().fold(0.0, |a, v| a.max(v.abs())));
            for row in self.u[k].chunks(nx) {
                for j in 1..nx - 1 {
                    let v = (row[j + 1] - 2.0 * row[j] + row[j - 1]) / (self.dx * self.dx);
                    n.d2u = n.d2u.max(v.abs());
                }
            }
        }
        n
    }

    /// `‖∇u‖_∞ ≤ 1/2`.
    pub fn accepted(&self) -> bool {
        self.norms().du <= 0.5
    }

    /// Successive sup-change ratios, restricted to changes above roundoff.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.diffs
            .windows(2)
            .filter(|w| w[0] > 1e-13 && w[1] > 1e-13)
            .map(|w| w[1] / w[0])
            .collect()
    }

    /// CSV rows `axis,s,x,u,du`.
    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "axis,s,x,u,du")?;
        for k in 0..self.dim() {
            for i in 0..=self.ns {
                for j in 0..self.nx {
                    let p = i * self.nx + j;
                    writeln!(
                        w,
                        "{k},{},{},{:e},{:e}",
                        i as f64 * self.s_step,
                        self.lo + j as f64 * self.dx,
                        self.u[k][p],
                        self.du[k][p]
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Sparse OU transition on the `x`-grid for one lag: every row has the same
/// number of quadrature nodes, each spread over two neighbouring grid points.
struct Kernel {
    nodes: usize,
    idx: Vec<u32>,
    wlo: Vec<f64>,
    whi: Vec<f64>,
}

impl Kernel {
    #[allow(clippy::too_many_arguments)]
    fn build(lo: f64, dx: f64, nx: usize, rate: f64, sigma: f64, tau: f64, z: &[f64], w: &[f64]) -> Self {
        let decay = (-rate * tau).exp();
        let sd = ou_variance(rate, sigma, tau).sqrt();
        let nodes = z.len();
        let mut k = Kernel {
            nodes,
            idx: Vec::with_capacity(nx * nodes),
            wlo: Vec::with_capacity(nx * nodes),
            whi: Vec::with_capacity(nx * nodes),
        };
        for j in 0..nx {
            let m = decay * (lo + j as f64 * dx);
            for (zk, wk) in z.iter().zip(w) {
                let (i, f) = locate(lo, dx, nx, m + sd * zk);
                k.idx.push(i as u32);
                k.wlo.push(wk * (1.0 - f));
                k.whi.push(wk * f);
            }
        }
        k
    }

    #[inline]
    fn apply_row(&self, g: &[f64], j: usize) -> f64 {
        let base = j * self.nodes;
        let mut acc = 0.0;
        for p in base..base + self.nodes {
            let i = self.idx[p] as usize;
            acc += self.wlo[p] * g[i] + self.whi[p] * g[i + 1];
        }
        acc
    }
}

fn central_diff(row: &[f64], dx: f64, out: &mut [f64]) {
    let n = row.len();
    out[0] = (row[1] - row[0]) / dx;
    out[n - 1] = (row[n - 1] - row[n - 2]) / dx;
    for j in 1..n - 1 {
        out[j] = (row[j + 1] - row[j - 1]) / (2.0 * dx);
    }
}

/// Per-axis data of the separable problem.
struct Axis {
    kernels: Vec<Kernel>,
    half: Kernel,
    b: Vec<f64>,
}

/// Diagonal of a constant diffusion, or an error if the model is outside the
/// solver's scope.
fn diagonal_sigma(m: &ModelSpec) -> Result<Vec<f64>> {
    let d = m.dim();
    if d > 2 {
        return Err(Error::Precondition(format!("the u-solver supports d <= 2, got {d}")));
    }
    let Diffusion::Constant { matrix } = &m.diffusion else {
        return Err(Error::Precondition("the u-solver needs a constant diffusion".into()));
    };
    if m.noise_dim != d {
        return Err(Error::Precondition("the u-solver needs a square diagonal Q".into()));
    }
    let mut s = Vec::with_capacity(d);
    for i in 0..d {
        for j in 0..d {
            if i != j && matrix[i * d + j] != 0.0 {
                return Err(Error::Precondition("the u-solver needs a diagonal Q".into()));
            }
        }
        if matrix[i * d + i] == 0.0 {
            return Err(Error::SingularDiffusion { t: 0.0 });
        }
        s.push(matrix[i * d + i].abs());
    }
    Ok(s)
}

/// Solves for `u` on `[0, window]` by Picard iteration from `u⁰ = 0`.
pub fn solve_u(m: &ModelSpec, lambda: f64, window: f64, grid: &ZvonkinGrid) -> Result<RegularizedDrift> {
    m.check()?;
    if !(lambda > 0.0) || !(window > 0.0) {
        return Err(Error::Domain(format!("need lambda > 0 and T > 0, got {lambda}, {window}")));
    }
    if !m.point_drift.sup().is_finite() {
        return Err(Error::Precondition("the point drift must be bounded".into()));
    }
    if grid.nx < 3 || !(grid.s_step > 0.0) {
        return Err(Error::Domain("grid too small".into()));
    }
    let sigma = diagonal_sigma(m)?;
    let d = m.dim();
    let ns = crate::delay_measure::grid_count(window, grid.s_step)
        .ok_or_else(|| Error::GridMismatch(format!("T = {window} is not a multiple of the s-step {}", grid.s_step)))?;
    let stat_sd = (0..d)
        .map(|k| sigma[k] / (2.0 * m.rates[k]).sqrt())
        .fold(0.0, f64::max);
    let half = grid.half_width.unwrap_or(6.0 * stat_sd + grid.initial_range);
    if half < 6.0 * stat_sd {
        return Err(Error::Coverage {
            outside_mass: outside_mass(0.0, stat_sd, -half, half),
        });
    }
    let nx = grid.nx;
    let lo = -half;
    let dx = 2.0 * half / (nx - 1) as f64;
    let h = grid.s_step;
    let (z, w) = gauss_hermite(grid.gh_order);
    let keep: Vec<usize> = (0..z.len()).filter(|&k| w[k] > 1e-16).collect();
    let z: Vec<f64> = keep.iter().map(|&k| z[k]).collect();
    let w: Vec<f64> = keep.iter().map(|&k| w[k]).collect();
    let axes: Vec<Axis> = (0..d)
        .map(|k| Axis {
            kernels: (1..=ns)
                .map(|l| Kernel::build(lo, dx, nx, m.rates[k], sigma[k], l as f64 * h, &z, &w))
                .collect(),
            half: Kernel::build(lo, dx, nx, m.rates[k], sigma[k], 0.5 * h, &z, &w),
            b: (0..nx).map(|j| m.point_drift.eval1(lo + j as f64 * dx)).collect(),
        })
        .collect();
    let decay: Vec<f64> = (0..=ns).map(|l| (-lambda * l as f64 * h).exp()).collect();

    // One Picard sweep: u ↦ ∫ e^{-λ(t-s)} P⁰(u' b + b) dt, midpoint rule on
    // the first panel (a half-step kernel smooths the raw b), composite
    // trapezoid on the rest.
    let half_decay = (-0.5 * lambda * h).exp();
    let sweep = |ax: &Axis, u: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; (ns + 1) * nx];
        let mut du = vec![0.0; nx];
        for i in 0..=ns {
            central_diff(&u[i * nx..(i + 1) * nx], dx, &mut du);
            for j in 0..nx {
                g[i * nx + j] = du[j] * ax.b[j] + ax.b[j];
            }
        }
        let rows = map_indexed(ns + 1, grid.workers, |i| {
            let mut out = vec![0.0; nx];
            if i == ns {
                return out;
            }
            let mid: Vec<f64> = (0..nx)
                .map(|j| 0.5 * (g[i * nx + j] + g[(i + 1) * nx + j]))
                .collect();
            let c = h * half_decay;
            for (j, o) in out.iter_mut().enumerate() {
                *o += c * ax.half.apply_row(&mid, j);
            }
            for l in i + 1..=ns {
                if i + 1 == ns {
                    break;
                }
                let c = if l == i + 1 || l == ns { 0.5 * h } else { h } * decay[l - i];
                let gl = &g[l * nx..(l + 1) * nx];
                let kern = &ax.kernels[l - i - 1];
                for (j, o) in out.iter_mut().enumerate() {
                    *o += c * kern.apply_row(gl, j);
                }
            }
            out
        });
        rows.concat()
    };

    let mut u: Vec<Vec<f64>> = vec![vec![0.0; (ns + 1) * nx]; d];
    let mut diffs = Vec::new();
    let mut converged = false;
    for _ in 0..grid.max_iter {
        let next: Vec<Vec<f64>> = axes.iter().zip(&u).map(|(ax, uk)| sweep(ax, uk)).collect();
        let diff = sup_diff(&next, &u);
        u = next;
        diffs.push(diff);
        if !diff.is_finite() {
            return Err(Error::Divergence { ratios: ratios_of(&diffs) });
        }
        if diff < grid.tol {
            converged = true;
            break;
        }
        let r = ratios_of(&diffs);
        if r.len() >= 3 && r[r.len() - 3..].iter().all(|x| *x >= 1.0) {
            return Err(Error::Divergence { ratios: r });
        }
    }
    if !converged {
        return Err(Error::Divergence { ratios: ratios_of(&diffs) });
    }
    let check: Vec<Vec<f64>> = axes.iter().zip(&u).map(|(ax, uk)| sweep(ax, uk)).collect();
    let residual = sup_diff(&check, &u);
    let du = u
        .iter()
        .map(|uk| {
            let mut out = vec![0.0; uk.len()];
            for (row, o) in uk.chunks(nx).zip(out.chunks_mut(nx)) {
                central_diff(row, dx, o);
            }
            out
        })
        .collect();
    Ok(RegularizedDrift {
        u_sup: u.iter().map(|a| sup_abs(a)).collect(),
        lambda,
        window,
        s_step: h,
        ns,
        lo,
        dx,
        nx,
        u,
        du,
        diffs,
        residual,
    })
}

fn sup_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn ratios_of(diffs: &[f64]) -> Vec<f64> {
    diffs
        .windows(2)
        .filter(|w| w[0] > 1e-13)
        .map(|w| w[1] / w[0])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub lambda: f64,
    pub norms: UNorms,
    pub iterations: usize,
    /// Largest successive-change ratio of the Picard iteration.
    pub max_ratio: f64,
    pub residual: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    pub monotone_u: bool,
    pub monotone_du: bool,
    pub monotone_d2u: bool,
    /// Smallest listed λ with `‖∇u‖ ≤ 1/2`.
    pub lambda_star: Option<f64>,
}

impl DecayReport {
    pub fn pass(&self) -> bool {
        let star_ok = self
            .lambda_star
            .and_then(|l| self.rows.iter().find(|r| r.lambda == l))
            .is_some_and(|r| r.max_ratio < 1.0);
        self.monotone_u && self.monotone_du && self.monotone_d2u && star_ok
    }
}

fn non_increasing(v: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = v.collect();
    v.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-14)
}

/// Tabulates the norms of `u_λ` along an increasing list of λ.
pub fn verify_decay(m: &ModelSpec, lambdas: &[f64], window: f64, grid: &ZvonkinGrid) -> Result<DecayReport> {
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("lambda list must be increasing".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let rd = solve_u(m, l, window, grid)?;
        let norms = rd.norms();
        rows.push(DecayRow {
            lambda: l,
            norms,
            iterations: rd.diffs.len(),
            max_ratio: rd.contraction_ratios().into_iter().fold(0.0, f64::max),
            residual: rd.residual,
            accepted: norms.du <= 0.5,
        });
    }
    Ok(DecayReport {
        monotone_u: non_increasing(rows.iter().map(|r| r.norms.u)),
        monotone_du: non_increasing(rows.iter().map(|r| r.norms.du)),
        monotone_d2u: non_increasing(rows.iter().map(|r| r.norms.d2u)),
        lambda_star: rows.iter().find(|r| r.accepted).map(|r| r.lambda),
        rows,
    })
}

/// Solves for the smallest listed λ whose solution is accepted.
pub fn choose_lambda(m: &ModelSpec, lambdas: &[f64], window: f64, grid: &ZvonkinGrid) -> Result<RegularizedDrift> {
    for &l in lambdas {
        match solve_u(m, l, window, grid) {
            Ok(rd) if rd.accepted() => return Ok(rd),
            Ok(_) | Err(Error::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Precondition("no listed lambda gives |grad u| <= 1/2".into()))
}

/// The transformed equation `dX̃ = B̃(t, X̃_t) dt + Q̃(t, X̃) dW`.
///
/// Delay coordinates are `Θ⁻¹(t, ·)`, so delay functionals and path
/// functionals evaluated along a transformed path see the original process.
#[derive(Clone, Debug)]
pub struct TransformedModel {
    pub base: ModelSpec,
    pub drift: RegularizedDrift,
    sigma: Vec<f64>,
    zeros: Vec<f64>,
}

/// Builds `(B̃, Q̃)` from an accepted `u`.
pub fn transformed_model(m: &ModelSpec, rd: &RegularizedDrift) -> Result<TransformedModel> {
    let sigma = diagonal_sigma(m)?;
    if rd.dim() != m.dim() {
        return Err(Error::Precondition("u was solved for a different dimension".into()));
    }
    if !rd.accepted() {
        return Err(Error::Precondition(format!(
            "u not accepted: |grad u| = {} > 1/2",
            rd.norms().du
        )));
    }
    let mut base = m.clone();
    base.truncation = None;
    Ok(TransformedModel {
        zeros: vec![0.0; m.dim()],
        base,
        drift: rd.clone(),
        sigma,
    })
}

impl TransformedModel {
    pub fn lambda(&self) -> f64 {
        self.drift.lambda
    }

    /// `Θ₀ ξ`, pointwise `Θ(θ, ξ(θ))` with `u(θ) = u(0)` for `θ ≤ 0`.
    pub fn transform_segment(&self, xi: &Segment) -> Segment {
        xi.map_points(|_, x, out| self.drift.theta(0.0, x, out))
    }

    /// Bound/Lipschitz constant `K` of `(B̃, Q̃)` from the tabulated sups:
    /// the largest of `‖A‖ + 2(λ+‖A‖)‖∇u‖ + 2(1+‖∇u‖)√C_B`, `2‖Q‖‖∇²u‖`
    /// and `‖Q̃‖ + ‖(Q̃Q̃*)⁻¹‖`.
    pub fn declared_k(&self, nu: &DelayMeasure) -> f64 {
        let n = self.drift.norms();
        let a = self.base.rates.iter().fold(0.0, |x: f64, y| x.max(*y));
        let cb = self.base.declared_bounds(nu).c_b;
        let s = self.sigma.iter().fold(0.0, |x: f64, y| x.max(*y));
        let s_min = self.sigma.iter().fold(f64::INFINITY, |x: f64, y| x.min(*y));
        let kb = a + 2.0 * (self.drift.lambda + a) * n.du + 2.0 * (1.0 + n.du) * cb.sqrt();
        let kq = 2.0 * s * n.d2u;
        let ks = (1.0 + n.du) * s + 1.0 / ((1.0 - n.du) * s_min).powi(2);
        kb.max(kq).max(ks)
    }

    /// Largest sampled `‖Q̃(x) - Q̃(y)‖ / |x - y|` over the box.
    pub fn measured_q_lipschitz(&self, samples: usize, seed: u64) -> f64 {
        let d = self.dim();
        let l = self.drift.half_width();
        let mut rng = NoiseStream::new(seed, 0, 0);
        let mut qa = [0.0; MAX_DIM * MAX_DIM];
        let mut qb = [0.0; MAX_DIM * MAX_DIM];
        let mut best: f64 = 0.0;
        for _ in 0..samples {
            let t = rng.uniform() * self.drift.window;
            let mut x = [0.0; MAX_DIM];
            let mut y = [0.0; MAX_DIM];
            for k in 0..d {
                x[k] = (2.0 * rng.uniform() - 1.0) * 0.9 * l;
                y[k] = x[k] + (2.0 * rng.uniform() - 1.0) * 0.5;
            }
            self.diffusion(t, &x[..d], &mut qa[..d * d]);
            self.diffusion(t, &y[..d], &mut qb[..d * d]);
            let dq: Vec<f64> = qa[..d * d].iter().zip(&qb[..d * d]).map(|(a, b)| a - b).collect();
            let dist = linalg::norm(&x[..d].iter().zip(&y[..d]).map(|(a, b)| a - b).collect::<Vec<_>>());
            if dist > 1e-12 {
                best = best.max(linalg::op_norm(&dq, d, d) / dist);
            }
        }
        best
    }
}

impl Dynamics for TransformedModel {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn noise_dim(&self) -> usize {
        self.base.noise_dim
    }
    fn rates(&self) -> &[f64] {
        &self.zeros
    }
    fn has_delay_coords(&self) -> bool {
        true
    }
    fn delay_coord(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.drift.theta_inverse(t, x, out)
    }
    fn drift(&self, t: f64, x: &[f64], coord: &[f64], sums: &CellSums, out: &mut [f64]) {
        let d = self.dim();
        let mut u = [0.0; MAX_DIM];
        let mut g = [0.0; MAX_DIM];
        let mut bd = [0.0; MAX_DIM];
        self.drift.u_at(t, coord, &mut u[..d]);
        self.drift.du_at(t, coord, &mut g[..d]);
        self.base.delay_drift_raw(sums, &mut bd[..d]);
        let lambda = self.drift.lambda;
        for i in 0..d {
            let a = self.base.rates[i];
            out[i] = -a * x[i] + (lambda + a) * u[i] + (1.0 + g[i]) * bd[i];
        }
    }
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut c = [0.0; MAX_DIM];
        let mut g = [0.0; MAX_DIM];
        self.drift.theta_inverse_unchecked(t, x, &mut c[..d]);
        self.drift.du_at(t, &c[..d], &mut g[..d]);
        out[..d * d].iter_mut().for_each(|o| *o = 0.0);
        for i in 0..d {
            out[i * d + i] = (1.0 + g[i]) * self.sigma[i];
        }
    }
    fn lift_segment(&self, xi: &Segment) -> Segment {
        self.transform_segment(xi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub h: f64,
    /// Mean over paths of `max_t |X(t) - Θ⁻¹(t, X̃(t))|`.
    pub error: MeanStderr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub rows: Vec<EquivalenceRow>,
    /// `error(h/2) / error(h)` for consecutive rows.
    pub ratios: Vec<f64>,
    pub monotone: bool,
}

impl EquivalenceReport {
    pub fn pass(&self, max_ratio: f64) -> bool {
        self.monotone && self.ratios.iter().all(|r| *r <= max_ratio)
    }
}

/// Simulates `X` on the original model and `X̃` on the transformed one with
/// the same increments, for a list of halving steps. All steps share the
/// finest Brownian path through pairwise refinement.
#[allow(clippy::too_many_arguments)]
pub fn check_equivalence(
    m: &ModelSpec,
    tm: &TransformedModel,
    measure: impl Fn(f64) -> Result<DelayMeasure>,
    initial: impl Fn(f64, &mut [f64]) + Copy,
    steps: &[f64],
    t_end: f64,
    original: &SolverConfig,
    batch: &Batch,
) -> Result<EquivalenceReport> {
    if steps.windows(2).any(|w| (w[1] - 0.5 * w[0]).abs() > 1e-15 * w[0]) {
        return Err(Error::Domain("steps must halve successively".into()));
    }
    let d = m.dim();
    let levels = steps.len();
    let mut rows = Vec::with_capacity(levels);
    for (k, &h) in steps.iter().enumerate() {
        let nu = measure(h)?;
        let xi = Segment::from_fn(&nu, d, initial);
        let xt = tm.transform_segment(&xi);
        let refinement = (levels - 1 - k) as u32;
        let mut cfg_x = original.clone();
        cfg_x.h = h;
        cfg_x.t_end = t_end;
        cfg_x.refinement = refinement;
        let mut cfg_t = SolverConfig::new(h, t_end);
        cfg_t.refinement = refinement;
        let errs = map_indexed(batch.n, batch.workers, |i| -> Result<f64> {
            let mut n1 = NoiseStream::new(batch.base_seed, i as u64, refinement);
            let mut n2 = NoiseStream::new(batch.base_seed, i as u64, refinement);
            let a = integrate(m, &nu, &xi, &cfg_x, &mut n1, |_, _| {})?;
            let b = integrate(tm, &nu, &xt, &cfg_t, &mut n2, |_, _| {})?;
            if a.stopped_at.is_some() || b.stopped_at.is_some() {
                return Err(Error::ExplosionBeforeHorizon { fraction: 1.0 / batch.n as f64, horizon: t_end });
            }
            let start = nu.cells() * d;
            Ok(a.buf.states()[start..]
                .iter()
                .zip(&b.buf.coords()[start..])
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max))
        });
        let errs: Result<Vec<f64>> = errs.into_iter().collect();
        rows.push(EquivalenceRow { h, error: mean_stderr(&errs?) });
    }
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].error.mean / w[0].error.mean).collect();
    Ok(EquivalenceReport {
        monotone: ratios.iter().all(|r| *r < 1.0),
        ratios,
        rows,
    })
}
