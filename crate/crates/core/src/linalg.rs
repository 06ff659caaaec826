//! Small dense helpers for the per-step hot path (d is 1 or 2 in practice).
//! Matrices are row-major `d × m` slices.

/// `out = M v` for a `rows × cols` matrix.
#[inline]
pub fn mat_vec(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let row = &m[i * cols..(i + 1) * cols];
        out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// `out = Mᵀ v` for a `rows × cols` matrix.
#[inline]
pub fn mat_t_vec(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for j in 0..cols {
        out[j] = (0..rows).map(|i| m[i * cols + j] * v[i]).sum();
    }
}

/// Gram matrix `Q Qᵀ` (d × d) of a `d × m` matrix.
pub fn gram(q: &[f64], d: usize, m: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..m).map(|k| q[i * m + k] * q[j * m + k]).sum();
            out[i * d + j] = s;
            out[j * d + i] = s;
        }
    }
}

/// Solves `S y = v` in place for symmetric positive definite `S` (d × d) by
/// Cholesky. Returns `false` when `S` is not numerically positive definite
/// (pivot below `1e-14` times the largest diagonal entry).
pub fn spd_solve(s: &mut [f64], d: usize, v: &mut [f64]) -> bool {
    if d == 1 {
        if !(s[0] > 1e-300) || !s[0].is_finite() {
            return false;
        }
        v[0] /= s[0];
        return true;
    }
    let scale = (0..d).map(|i| s[i * d + i].abs()).fold(0.0, f64::max);
    for j in 0..d {
        let mut diag = s[j * d + j];
        for k in 0..j {
            diag -= s[j * d + k] * s[j * d + k];
        }
        if !(diag > 1e-14 * scale) {
            return false;
        }
        let l = diag.sqrt();
        s[j * d + j] = l;
        for i in (j + 1)..d {
            let mut acc = s[i * d + j];
            for k in 0..j {
                acc -= s[i * d + k] * s[j * d + k];
            }
            s[i * d + j] = acc / l;
        }
    }
    for i in 0..d {
        let mut acc = v[i];
        for k in 0..i {
            acc -= s[i * d + k] * v[k];
        }
        v[i] = acc / s[i * d + i];
    }
    for i in (0..d).rev() {
        let mut acc = v[i];
        for k in (i + 1)..d {
            acc -= s[k * d + i] * v[k];
        }
        v[i] = acc / s[i * d + i];
    }
    true
}

/// Least-norm solution `Qᵀ (Q Qᵀ)⁻¹ v` of `Q w = v` for a `d × m` matrix Q.
/// `work` must hold at least `d*d + d` entries.
pub fn right_pseudo_solve(
    q: &[f64],
    d: usize,
    m: usize,
    v: &[f64],
    out: &mut [f64],
    work: &mut [f64],
) -> bool {
    if d == 1 && m == 1 {
        if q[0] == 0.0 || !q[0].is_finite() {
            return false;
        }
        out[0] = v[0] / q[0];
        return true;
    }
    let (g, y) = work.split_at_mut(d * d);
    let y = &mut y[..d];
    gram(q, d, m, g);
    y.copy_from_slice(v);
    if !spd_solve(g, d, y) {
        return false;
    }
    mat_t_vec(q, d, m, y, out);
    true
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Operator (spectral) norm of a `d × m` matrix.
pub fn op_norm(q: &[f64], d: usize, m: usize) -> f64 {
    let mut g = vec![0.0; d * d];
    gram(q, d, m, &mut g);
    let g = nalgebra::DMatrix::from_row_slice(d, d, &g);
    g.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
        .max(0.0)
        .sqrt()
}

/// Smallest eigenvalue of `Q Qᵀ`.
pub fn gram_min_eigenvalue(q: &[f64], d: usize, m: usize) -> f64 {
    let mut g = vec![0.0; d * d];
    gram(q, d, m, &mut g);
    let g = nalgebra::DMatrix::from_row_slice(d, d, &g);
    g.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
