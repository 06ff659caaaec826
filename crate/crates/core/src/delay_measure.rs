//! The delay measure ν on `[-r0, 0)`, the segment space `C_ν` and segment
//! extraction.
//!
//! Cells are half-open, `[θ_j, θ_{j+1})` with `θ_j = -r0 + j h`, and every
//! integral against ν is evaluated at the left endpoint. The node `θ = 0`
//! carries no ν-mass; it enters the norm only through `|ξ(0)|²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::SamplePath;

/// Tolerance used when checking that `r0 / h` (or `T / h`) is an integer.
const GRID_TOL: f64 = 1e-9;

/// Returns `t / h` as an integer when it is one (within rounding).
pub fn grid_count(t: f64, h: f64) -> Option<usize> {
    if !(h > 0.0) || !(t >= 0.0) || !t.is_finite() {
        return None;
    }
    let q = t / h;
    let r = q.round();
    if (q - r).abs() <= GRID_TOL * q.max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeasureKind {
    /// Density `e^{λθ}` on `[-r0, 0)`.
    Exponential { lambda: f64 },
    /// Constant density.
    Uniform {
        #[serde(default = "one")]
        density: f64,
    },
    /// Atoms `(θ, mass)` with `θ ∈ [-r0, 0)`.
    PointMasses { atoms: Vec<(f64, f64)> },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayMeasure {
    r0: f64,
    h: f64,
    n: usize,
    weights: Vec<f64>,
    kind: MeasureKind,
    /// Ratio `w_{j+1} / w_j` when the weights are geometric.
    geometric: Option<f64>,
    /// `κ(k h)` for `k = 0..=n` when κ is not analytic.
    kappa_table: Option<Vec<f64>>,
}

impl DelayMeasure {
    pub fn new(kind: MeasureKind, r0: f64, h: f64) -> Result<Self> {
        if !(r0 > 0.0) || !(h > 0.0) || !r0.is_finite() || !h.is_finite() {
            return Err(Error::Domain(format!("need r0 > 0 and h > 0, got r0 = {r0}, h = {h}")));
        }
        let n = grid_count(r0, h).ok_or_else(|| {
            Error::GridMismatch(format!("r0 = {r0} is not a multiple of h = {h}"))
        })?;
        let theta = |j: usize| -r0 + j as f64 * h;
        let (weights, geometric) = match &kind {
            MeasureKind::Exponential { lambda } => {
                let l = *lambda;
                let w: Vec<f64> = if l == 0.0 {
                    vec![h; n]
                } else {
                    let f = (l * h).exp_m1() / l;
                    (0..n).map(|j| (l * theta(j)).exp() * f).collect()
                };
                (w, Some((l * h).exp()))
            }
            MeasureKind::Uniform { density } => {
                if !(*density >= 0.0) {
                    return Err(Error::Domain(format!("negative density {density}")));
                }
                (vec![density * h; n], Some(1.0))
            }
            MeasureKind::PointMasses { atoms } => {
                let mut w = vec![0.0; n];
                for &(th, m) in atoms {
                    if !(th >= -r0 && th < 0.0) || !(m >= 0.0) {
                        return Err(Error::Domain(format!(
                            "atom ({th}, {m}) must have theta in [-r0, 0) and mass >= 0"
                        )));
                    }
                    let j = (((th + r0) / h) + GRID_TOL).floor() as usize;
                    w[j.min(n - 1)] += m;
                }
                (w, None)
            }
        };
        let mut m = DelayMeasure {
            r0,
            h,
            n,
            weights,
            kind,
            geometric,
            kappa_table: None,
        };
        if m.geometric.is_none() {
            m.kappa_table = Some(m.empirical_kappa());
        }
        Ok(m)
    }

    /// Builds a measure directly from cell masses (used for diagnostics).
    pub fn from_weights(weights: Vec<f64>, h: f64) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Domain("weights must be non-empty and non-negative".into()));
        }
        let n = weights.len();
        let r0 = n as f64 * h;
        let atoms = weights
            .iter()
            .enumerate()
            .map(|(j, &w)| (-r0 + j as f64 * h, w))
            .collect();
        DelayMeasure::new(MeasureKind::PointMasses { atoms }, r0, h)
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    /// Number of cells `r0 / h`.
    pub fn cells(&self) -> usize {
        self.n
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Closed-form `ν([-r0, 0))`.
    pub fn analytic_mass(&self) -> f64 {
        match &self.kind {
            MeasureKind::Exponential { lambda } if *lambda == 0.0 => self.r0,
            MeasureKind::Exponential { lambda } => -(-lambda * self.r0).exp_m1() / lambda,
            MeasureKind::Uniform { density } => density * self.r0,
            MeasureKind::PointMasses { atoms } => atoms.iter().map(|a| a.1).sum(),
        }
    }

    /// `ν([-s, 0))` on the grid (cells lying entirely inside the window).
    pub fn mass_within(&self, s: f64) -> f64 {
        let k = ((s / self.h) + GRID_TOL).floor().max(0.0) as usize;
        let k = k.min(self.n);
        self.weights[self.n - k..].iter().sum()
    }

    /// Mass the exponential density would put before `-r0` if it were not
    /// cut off there; zero for the other kinds.
    pub fn truncated_mass(&self) -> f64 {
        match &self.kind {
            MeasureKind::Exponential { lambda } if *lambda > 0.0 => {
                (-lambda * self.r0).exp() / lambda
            }
            MeasureKind::Exponential { .. } => f64::INFINITY,
            _ => 0.0,
        }
    }

    /// Shift-domination function κ, non-decreasing.
    pub fn kappa(&self, t: f64) -> f64 {
        match (&self.kind, &self.kappa_table) {
            (MeasureKind::Exponential { lambda }, _) => (-lambda * t.max(0.0)).exp().max(1.0),
            (MeasureKind::Uniform { .. }, _) => 1.0,
            (_, Some(tab)) => {
                let k = ((t / self.h) - GRID_TOL).ceil().max(0.0) as usize;
                tab[k.min(tab.len() - 1)]
            }
            _ => 1.0,
        }
    }

    /// Ratio of consecutive weights when they form a geometric sequence.
    pub fn geometric_ratio(&self) -> Option<f64> {
        self.geometric
    }

    fn shifted_ratio(&self, k: usize) -> (f64, Option<usize>) {
        let mut worst = 0.0f64;
        let mut cell = None;
        for j in 0..self.n {
            let shifted = if j >= k { self.weights[j - k] } else { 0.0 };
            let r = if self.weights[j] > 0.0 {
                shifted / self.weights[j]
            } else if shifted > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            if r > worst {
                worst = r;
                cell = Some(j);
            }
        }
        (worst, cell)
    }

    fn empirical_kappa(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n + 1);
        let mut run = 1.0f64;
        for k in 0..=self.n {
            run = run.max(self.shifted_ratio(k).0);
            out.push(run);
        }
        out
    }

    /// Weighted cell sums `(Σ w_j ξ_j, Σ w_j |ξ_j|²)` of a segment.
    pub fn cell_sums(&self, seg: &Segment) -> Result<CellSums> {
        self.check(seg)?;
        Ok(CellSums::from_cells(self, seg.d, &seg.values[..self.n * seg.d]))
    }

    fn check(&self, seg: &Segment) -> Result<()> {
        if seg.len() != self.n + 1 {
            return Err(Error::GridMismatch(format!(
                "segment has {} nodes, measure grid needs {}",
                seg.len(),
                self.n + 1
            )));
        }
        Ok(())
    }
}

/// Path window `ξ(θ_j)`, `j = 0..=n`, stored row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Segment {
    d: usize,
    values: Vec<f64>,
}

impl Segment {
    pub fn new(d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 || values.is_empty() || !values.len().is_multiple_of(d) {
            return Err(Error::GridMismatch(format!(
                "{} values do not form points of dimension {d}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("segment values must be finite".into()));
        }
        Ok(Segment { d, values })
    }

    pub fn constant(m: &DelayMeasure, c: &[f64]) -> Self {
        Segment {
            d: c.len(),
            values: c.iter().cloned().cycle().take(c.len() * (m.n + 1)).collect(),
        }
    }

    /// Samples `f(θ_j)` on the grid of `m`.
    pub fn from_fn(m: &DelayMeasure, d: usize, f: impl Fn(f64, &mut [f64])) -> Self {
        let mut values = vec![0.0; d * (m.n + 1)];
        for (j, chunk) in values.chunks_mut(d).enumerate() {
            f(-m.r0 + j as f64 * m.h, chunk);
        }
        Segment { d, values }
    }

    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn len(&self) -> usize {
        self.values.len() / self.d
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn at(&self, j: usize) -> &[f64] {
        &self.values[j * self.d..(j + 1) * self.d]
    }
    pub fn at_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.d..(j + 1) * self.d]
    }
    /// `ξ(0)`.
    pub fn origin(&self) -> &[f64] {
        self.at(self.len() - 1)
    }

    pub fn add_scaled(&self, a: f64, other: &Segment) -> Segment {
        Segment {
            d: self.d,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x + a * y)
                .collect(),
        }
    }

    pub fn map_points(&self, mut f: impl FnMut(usize, &[f64], &mut [f64])) -> Segment {
        let mut values = vec![0.0; self.values.len()];
        for (j, (src, dst)) in self
            .values
            .chunks(self.d)
            .zip(values.chunks_mut(self.d))
            .enumerate()
        {
            f(j, src, dst);
        }
        Segment { d: self.d, values }
    }
}

fn compatible(m: &DelayMeasure, a: &Segment, b: &Segment) -> Result<()> {
    m.check(a)?;
    m.check(b)?;
    if a.d != b.d {
        return Err(Error::GridMismatch(format!("dimensions {} and {} differ", a.d, b.d)));
    }
    Ok(())
}

/// `⟨ξ, η⟩_{C_ν} = Σ w_j ⟨ξ_j, η_j⟩ + ⟨ξ(0), η(0)⟩`.
pub fn seg_inner(m: &DelayMeasure, xi: &Segment, eta: &Segment) -> Result<f64> {
    compatible(m, xi, eta)?;
    let mut s = 0.0;
    for (j, w) in m.weights.iter().enumerate() {
        if *w > 0.0 {
            s += w * crate::linalg::dot(xi.at(j), eta.at(j));
        }
    }
    Ok(s + crate::linalg::dot(xi.origin(), eta.origin()))
}

pub fn seg_norm(m: &DelayMeasure, xi: &Segment) -> Result<f64> {
    m.check(xi)?;
    let s = m.cell_sums(xi)?;
    Ok((s.sq + crate::linalg::dot(xi.origin(), xi.origin())).sqrt())
}

/// `‖ξ - η‖_{C_ν}`.
pub fn seg_distance(m: &DelayMeasure, xi: &Segment, eta: &Segment) -> Result<f64> {
    compatible(m, xi, eta)?;
    seg_norm(m, &xi.add_scaled(-1.0, eta))
}

/// Equality in `C_ν`: same `ξ(0)` and same values on every charged cell.
pub fn seg_eq(m: &DelayMeasure, xi: &Segment, eta: &Segment) -> Result<bool> {
    compatible(m, xi, eta)?;
    if xi.origin() != eta.origin() {
        return Ok(false);
    }
    Ok(m
        .weights
        .iter()
        .enumerate()
        .all(|(j, w)| *w == 0.0 || xi.at(j) == eta.at(j)))
}

/// `X_t` read off a sample path at grid time `t`.
pub fn extract_segment(path: &SamplePath, t: f64) -> Result<Segment> {
    path.segment(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub pass: bool,
    pub shifts_checked: usize,
    /// Largest `w^{(k)}_j / (κ(kh) w_j)` found.
    pub worst_ratio: f64,
    pub worst_shift: Option<f64>,
    pub worst_cell: Option<usize>,
}

/// Checks `w^{(k)}_j ≤ κ(kh) w_j` for every grid shift `kh ≤ t_max`, where
/// `w^{(k)}_j = w_{j-k}` is the cell vector of `ν(· - kh)`.
pub fn check_shift_domination(m: &DelayMeasure, t_max: f64) -> ShiftReport {
    let kmax = ((t_max / m.h) + GRID_TOL).floor().max(0.0) as usize;
    let mut rep = ShiftReport {
        pass: true,
        shifts_checked: kmax,
        worst_ratio: 0.0,
        worst_shift: None,
        worst_cell: None,
    };
    let mut prev_kappa = m.kappa(0.0);
    for k in 1..=kmax {
        let kap = m.kappa(k as f64 * m.h);
        if kap < prev_kappa {
            rep.pass = false;
        }
        prev_kappa = kap;
        let (r, cell) = m.shifted_ratio(k);
        let rel = if r.is_infinite() { f64::INFINITY } else { r / kap };
        if rel > rep.worst_ratio {
            rep.worst_ratio = rel;
            rep.worst_shift = Some(k as f64 * m.h);
            rep.worst_cell = cell;
        }
    }
    if rep.worst_ratio > 1.0 + 1e-12 {
        rep.pass = false;
    }
    rep
}

/// Weighted sums over the cells of a window, `mean = Σ w_j x_j` and
/// `sq = Σ w_j |x_j|²`.
///
/// When the weights are geometric the sums are advanced in O(d) per step
/// and recomputed exactly once per window length.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSums {
    pub mean: Vec<f64>,
    pub sq: f64,
    since_sync: usize,
}

impl CellSums {
    pub fn from_cells(m: &DelayMeasure, d: usize, cells: &[f64]) -> Self {
        let mut s = CellSums {
            mean: vec![0.0; d],
            sq: 0.0,
            since_sync: 0,
        };
        s.sync(m, d, cells);
        s
    }

    /// Sums taken as given, e.g. from a stored end state.
    pub fn from_parts(mean: Vec<f64>, sq: f64) -> Self {
        CellSums { mean, sq, since_sync: 0 }
    }

    fn sync(&mut self, m: &DelayMeasure, d: usize, cells: &[f64]) {
        self.mean.iter_mut().for_each(|x| *x = 0.0);
        self.sq = 0.0;
        for (w, x) in m.weights.iter().zip(cells.chunks_exact(d)) {
            if *w == 0.0 {
                continue;
            }
            for i in 0..d {
                self.mean[i] += w * x[i];
                self.sq += w * x[i] * x[i];
            }
        }
        self.since_sync = 0;
    }

    /// Moves the window one step forward. `dropped` is the old oldest cell,
    /// `cells` the new window (`n·d` values, newest cell last).
    pub fn advance(&mut self, m: &DelayMeasure, d: usize, dropped: &[f64], cells: &[f64]) {
        self.since_sync += 1;
        match m.geometric {
            Some(q) if self.since_sync < m.n => {
                let w0 = m.weights[0];
                let wl = m.weights[m.n - 1];
                let entered = &cells[(m.n - 1) * d..];
                for i in 0..d {
                    self.mean[i] = (self.mean[i] - w0 * dropped[i]) / q + wl * entered[i];
                }
                let drop2: f64 = dropped.iter().map(|x| x * x).sum();
                let ent2: f64 = entered.iter().map(|x| x * x).sum();
                self.sq = (self.sq - w0 * drop2) / q + wl * ent2;
            }
            _ => self.sync(m, d, cells),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exp_measure(lambda: f64, h: f64) -> DelayMeasure {
        DelayMeasure::new(MeasureKind::Exponential { lambda }, 1.0, h).unwrap()
    }

    #[test]
    fn exponential_weights_are_cell_integrals() {
        let m = exp_measure(1.0, 0.5);
        let e = std::f64::consts::E;
        let expect = [(-0.5f64).exp() - 1.0 / e, 1.0 - (-0.5f64).exp()];
        for (w, x) in m.weights().iter().zip(expect) {
            assert!((w - x).abs() < 1e-15);
        }
        assert!((m.weights()[0] - 0.2387).abs() < 1e-4);
        assert!((m.weights()[1] - 0.3935).abs() < 1e-4);
    }

    #[test]
    fn uniform_weights() {
        let m = DelayMeasure::new(MeasureKind::Uniform { density: 1.0 }, 1.0, 0.25).unwrap();
        assert_eq!(m.weights(), &[0.25; 4]);
    }

    #[test]
    fn kappa_for_negative_rate_is_exponential() {
        let m = exp_measure(-1.0, 0.125);
        for t in [0.0, 0.25, 0.5, 1.0] {
            assert!((m.kappa(t) - f64::exp(t)).abs() < 1e-14);
        }
        assert!(check_shift_domination(&m, 1.0).pass);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(
            DelayMeasure::new(MeasureKind::Uniform { density: 1.0 }, 1.0, 0.3),
            Err(Error::GridMismatch(_))
        ));
        assert!(matches!(
            DelayMeasure::new(MeasureKind::Uniform { density: 1.0 }, -1.0, 0.25),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn norm_examples() {
        let m = exp_measure(1.0, 1.0 / 64.0);
        let zero = Segment::constant(&m, &[0.0]);
        assert_eq!(seg_norm(&m, &zero).unwrap(), 0.0);
        let two = Segment::constant(&m, &[2.0]);
        let mass = 1.0 - (-1.0f64).exp();
        let expect = (mass * 4.0 + 4.0).sqrt();
        assert!((seg_norm(&m, &two).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 2.5551).abs() < 1e-4);
        let mut spike = Segment::constant(&m, &[0.0]);
        spike.at_mut(m.cells())[0] = 1.0;
        assert_eq!(seg_norm(&m, &spike).unwrap(), 1.0);
    }

    #[test]
    fn orthogonal_pair() {
        let m = exp_measure(1.0, 0.25);
        let xi = Segment::from_fn(&m, 1, |th, o| o[0] = if th < 0.0 { 1.0 + th } else { 0.0 });
        let mut eta = Segment::constant(&m, &[0.0]);
        eta.at_mut(m.cells())[0] = 1.0;
        assert_eq!(seg_inner(&m, &xi, &eta).unwrap(), 0.0);
    }

    #[test]
    fn shift_domination_examples() {
        assert!(check_shift_domination(&exp_measure(1.0, 0.125), 1.0).pass);
        let u = DelayMeasure::new(MeasureKind::Uniform { density: 1.0 }, 1.0, 0.25).unwrap();
        assert!(check_shift_domination(&u, 1.0).pass);
        // Mass in the oldest cell moves onto an uncharged cell.
        let bad = DelayMeasure::from_weights(vec![1.0, 0.0], 0.5).unwrap();
        let rep = check_shift_domination(&bad, 0.5);
        assert!(!rep.pass);
        assert_eq!(rep.worst_shift, Some(0.5));
        assert_eq!(rep.worst_cell, Some(1));
        // Mass in the newest cell leaves the window instead.
        let fine = DelayMeasure::from_weights(vec![0.0, 1.0], 0.5).unwrap();
        assert!(check_shift_domination(&fine, 0.5).pass);
    }

    #[test]
    fn left_endpoint_rule_converges_at_first_order() {
        // ξ(θ) = θ: ∫ θ² e^θ dθ over [-1, 0) = 2 - 5/e.
        let exact = 2.0 - 5.0 / std::f64::consts::E;
        let mut errs = vec![];
        for k in 4..9 {
            let m = exp_measure(1.0, 1.0 / (1u32 << k) as f64);
            let xi = Segment::from_fn(&m, 1, |th, o| o[0] = th);
            let n2 = seg_norm(&m, &xi).unwrap().powi(2);
            errs.push((n2 - exact).abs());
        }
        for w in errs.windows(2) {
            let r = w[1] / w[0];
            assert!(r > 0.4 && r < 0.6, "ratio {r}");
        }
    }

    #[test]
    fn running_sums_track_direct_sums() {
        let m = exp_measure(1.0, 1.0 / 32.0);
        let n = m.cells();
        let path: Vec<f64> = (0..200).map(|k| (k as f64 * 0.37).sin()).collect();
        let mut s = CellSums::from_cells(&m, 1, &path[0..n]);
        for k in 1..(200 - n) {
            s.advance(&m, 1, &path[k - 1..k], &path[k..k + n]);
            let direct = CellSums::from_cells(&m, 1, &path[k..k + n]);
            assert!((s.mean[0] - direct.mean[0]).abs() < 1e-13);
            assert!((s.sq - direct.sq).abs() < 1e-13);
        }
    }

    #[test]
    fn extract_constant_and_ramp() {
        use crate::solver::SamplePath;
        let m = exp_measure(1.0, 0.25);
        let h = 0.25;
        // X(s) = s on [-1, 1].
        let states: Vec<f64> = (0..=8).map(|k| -1.0 + k as f64 * h).collect();
        let p = SamplePath::from_states(1, 1, h, 1.0, 1.0, states);
        let seg = extract_segment(&p, 1.0).unwrap();
        for j in 0..=4 {
            assert!((seg.at(j)[0] - j as f64 * h).abs() < 1e-15);
        }
        assert!(matches!(extract_segment(&p, 1.5), Err(Error::OutOfRange { .. })));
        let _ = m;
    }

    fn seg_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, n + 1)
    }

    proptest! {
        #[test]
        fn cauchy_schwarz(a in seg_strategy(8), b in seg_strategy(8)) {
            let m = exp_measure(1.0, 0.125);
            let xi = Segment::new(1, a).unwrap();
            let eta = Segment::new(1, b).unwrap();
            let ip = seg_inner(&m, &xi, &eta).unwrap();
            let bound = seg_norm(&m, &xi).unwrap() * seg_norm(&m, &eta).unwrap();
            prop_assert!(ip.abs() <= bound * (1.0 + 1e-12) + 1e-12);
            let nn = seg_norm(&m, &xi).unwrap();
            prop_assert!((seg_inner(&m, &xi, &xi).unwrap() - nn * nn).abs() < 1e-10 * (1.0 + nn * nn));
            prop_assert!(nn >= xi.origin()[0].abs());
        }

        #[test]
        fn null_cells_are_invisible(a in seg_strategy(4), bump in -3.0f64..3.0) {
            let m = DelayMeasure::from_weights(vec![0.3, 0.0, 0.2, 0.0], 0.25).unwrap();
            let xi = Segment::new(1, a).unwrap();
            let mut eta = xi.clone();
            eta.at_mut(1)[0] += bump;
            eta.at_mut(3)[0] -= bump;
            prop_assert_eq!(seg_norm(&m, &xi).unwrap(), seg_norm(&m, &eta).unwrap());
            prop_assert!(seg_eq(&m, &xi, &eta).unwrap());
        }

        #[test]
        fn builtin_kinds_dominate(lambda in -2.0f64..2.0, k in 2u32..6) {
            let m = exp_measure(lambda, 1.0 / (1u32 << k) as f64);
            prop_assert!(check_shift_domination(&m, 1.0).pass);
            let mut prev = 0.0;
            for i in 0..20 {
                let kap = m.kappa(i as f64 * 0.1);
                prop_assert!(kap >= prev);
                prev = kap;
            }
            prop_assert!((m.total_mass() - m.analytic_mass()).abs() < 1e-12);
        }
    }
}
