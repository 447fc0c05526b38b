use serde::Serialize;

use super::grid::{knot_derivative, GridFunction};
use super::spec::{LocalCoefficients, PdeKind, PdeSpec};
use crate::error::{LabError, Result};

/// Smallest value the semilinear solver accepts before aborting.
pub const SEMILINEAR_FLOOR: f64 = 1e-10;

/// Tridiagonal rows `lower v_{i-1} + diag v_i + upper v_{i+1}` of the
/// spatial operator `a/2 d_xx + b d_x + k`.
fn operator_rows(spec: &PdeSpec, t: f64, space: &[f64], coefs: &mut [LocalCoefficients], rows: &mut [(f64, f64, f64)]) {
    let h = spec.dx();
    for (i, x) in space.iter().enumerate() {
        let c = (spec.local)(t, *x);
        coefs[i] = c;
        let diff = 0.5 * c.diffusion / (h * h);
        let adv = 0.5 * c.drift / h;
        rows[i] = (diff - adv, -2.0 * diff + c.potential, diff + adv);
    }
}

fn apply(rows: &[(f64, f64, f64)], v: &[f64], i: usize) -> f64 {
    let (l, d, u) = rows[i];
    l * v[i - 1] + d * v[i] + u * v[i + 1]
}

/// Solves the interior system with the edges eliminated by `v_xx = 0`:
/// `v_0 = 2 v_1 - v_2` and `v_{m-1} = 2 v_{m-2} - v_{m-3}`.
fn solve_interior(lower: &mut [f64], diag: &mut [f64], upper: &mut [f64], rhs: &mut [f64], v: &mut [f64]) -> Result<()> {
    let m = v.len();
    let k = m - 2;
    // row for node 1 absorbs v_0, row for node m-2 absorbs v_{m-1}
    diag[0] += 2.0 * lower[0];
    upper[0] -= lower[0];
    diag[k - 1] += 2.0 * upper[k - 1];
    lower[k - 1] -= upper[k - 1];
    // the node m-2 row now also couples to v_{m-3} through lower; Thomas
    // algorithm on the k interior unknowns
    for j in 1..k {
        let w = lower[j] / diag[j - 1];
        diag[j] -= w * upper[j - 1];
        rhs[j] -= w * rhs[j - 1];
    }
    if diag.iter().any(|d| !d.is_finite() || d.abs() < 1e-300) {
        return Err(LabError::GridResolution("singular Crank-Nicolson system".into()));
    }
    v[k] = rhs[k - 1] / diag[k - 1];
    for j in (0..k - 1).rev() {
        v[j + 1] = (rhs[j] - upper[j] * v[j + 2]) / diag[j];
    }
    v[0] = 2.0 * v[1] - v[2];
    v[m - 1] = 2.0 * v[m - 2] - v[m - 3];
    Ok(())
}

fn march(spec: &PdeSpec, semilinear_q: Option<f64>) -> Result<GridFunction> {
    let space = spec.space();
    let times = spec.times();
    let m = space.len();
    let nt = spec.n_time;
    let dt = spec.dt();
    let mut values = vec![0.0; (nt + 1) * m];
    let mut v: Vec<f64> = space.iter().map(|x| (spec.terminal)(*x)).collect();
    values[nt * m..].copy_from_slice(&v);

    let mut rows_next = vec![(0.0, 0.0, 0.0); m];
    let mut rows_now = vec![(0.0, 0.0, 0.0); m];
    let mut coefs_next = vec![LocalCoefficients::default(); m];
    let mut coefs_now = vec![LocalCoefficients::default(); m];
    operator_rows(spec, times[nt], &space, &mut coefs_next, &mut rows_next);
    let (mut lower, mut diag, mut upper, mut rhs) = (vec![0.0; m - 2], vec![0.0; m - 2], vec![0.0; m - 2], vec![0.0; m - 2]);
    let mut next = vec![0.0; m];

    for n in (0..nt).rev() {
        operator_rows(spec, times[n], &space, &mut coefs_now, &mut rows_now);
        if coefs_now.iter().any(|c| !(c.diffusion.is_finite() && c.drift.is_finite() && c.potential.is_finite() && c.source.is_finite())) {
            return Err(LabError::NonFinite { path: 0, step: n });
        }
        for i in 1..m - 1 {
            let j = i - 1;
            let mut r = v[i] + 0.5 * dt * apply(&rows_next, &v, i) + 0.5 * dt * (coefs_now[i].source + coefs_next[i].source);
            if let Some(q) = semilinear_q {
                let vx = knot_derivative(&space, &v, i);
                r -= dt * 0.5 * q * coefs_next[i].c2 * vx * vx / v[i];
            }
            rhs[j] = r;
            let (l, d, u) = rows_now[i];
            lower[j] = -0.5 * dt * l;
            diag[j] = 1.0 - 0.5 * dt * d;
            upper[j] = -0.5 * dt * u;
        }
        solve_interior(&mut lower, &mut diag, &mut upper, &mut rhs, &mut next)?;
        if let Some(i) = next.iter().position(|x| !x.is_finite()) {
            return Err(LabError::NonFinite { path: i, step: n });
        }
        let low = next.iter().cloned().fold(f64::INFINITY, f64::min);
        if semilinear_q.is_some() && low < SEMILINEAR_FLOOR {
            return Err(resolution_error(spec, n, low));
        }
        if spec.kind.is_multiplicative() && low < 0.0 {
            return Err(resolution_error(spec, n, low));
        }
        std::mem::swap(&mut v, &mut next);
        std::mem::swap(&mut rows_now, &mut rows_next);
        std::mem::swap(&mut coefs_now, &mut coefs_next);
        values[n * m..(n + 1) * m].copy_from_slice(&v);
    }
    GridFunction::new(times, space, values)
}

fn resolution_error(spec: &PdeSpec, step: usize, low: f64) -> LabError {
    LabError::GridResolution(format!(
        "value {low:.3e} at time step {step} on a {}x{} grid; try n_space={} n_time={}",
        spec.n_space,
        spec.n_time,
        2 * spec.n_space,
        2 * spec.n_time
    ))
}

/// Crank-Nicolson backward from the terminal data.
pub fn solve_linear(spec: &PdeSpec) -> Result<GridFunction> {
    if !spec.kind.is_linear() {
        return Err(LabError::NotApplicable(format!("{} is not a linear kind", spec.kind.label())));
    }
    march(spec, None)
}

/// Crank-Nicolson for the linear part, with `(q/2) c^2 v_x^2 / v` taken
/// explicitly from the later time level.
pub fn solve_semilinear_power(spec: &PdeSpec) -> Result<GridFunction> {
    let PdeKind::SemilinearPower { q } = spec.kind else {
        return Err(LabError::NotApplicable(format!("{} is not the semilinear kind", spec.kind.label())));
    };
    march(spec, Some(q))
}

pub fn solve(spec: &PdeSpec) -> Result<GridFunction> {
    match spec.kind {
        PdeKind::SemilinearPower { .. } => solve_semilinear_power(spec),
        _ => solve_linear(spec),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n_space: usize,
    pub n_time: usize,
    pub max_error: f64,
    /// Error of the previous (coarser) row over this one.
    pub ratio: Option<f64>,
}

/// Max-abs error at `t = 0` against `exact`, over the knots in the central
/// `fraction` of the domain, while doubling both resolutions `levels` times.
pub fn convergence_table<E>(spec: &PdeSpec, exact: E, fraction: f64, levels: usize) -> Result<Vec<ConvergenceRow>>
where
    E: Fn(f64, f64) -> f64,
{
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(levels);
    for level in 0..levels {
        let refined = spec
            .clone()
            .with_resolution((spec.n_space - 1) * (1 << level) + 1, spec.n_time * (1 << level))?;
        let grid = solve(&refined)?;
        let max_error = max_abs_difference_interior(&grid, 0.0, fraction, |x| Ok(exact(0.0, x)))?;
        let ratio = rows.last().map(|prev| prev.max_error / max_error);
        rows.push(ConvergenceRow {
            n_space: refined.n_space,
            n_time: refined.n_time,
            max_error,
            ratio,
        });
    }
    Ok(rows)
}

/// Largest `|a - b|` over the knots of `a` whose spatial coordinate lies in
/// the central `fraction` of the domain, at time `t`.
pub fn max_abs_difference_interior<F>(a: &GridFunction, t: f64, fraction: f64, b: F) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let lo = a.space[0];
    let hi = *a.space.last().expect("non-empty grid");
    let pad = 0.5 * (1.0 - fraction) * (hi - lo);
    let n = a.time_index(t)?;
    let mut worst: f64 = 0.0;
    for (i, x) in a.space.iter().enumerate() {
        if *x >= lo + pad && *x <= hi - pad {
            worst = worst.max((a.at(n, i) - b(*x)?).abs());
        }
    }
    Ok(worst)
}
