use serde::Serialize;

use crate::error::{LabError, Result};

/// Values on a `(t, x)` grid, stored time-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFunction {
    pub times: Vec<f64>,
    pub space: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(times: Vec<f64>, space: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.len() != times.len() * space.len() {
            return Err(LabError::Shape(format!(
                "{} values for a {}x{} grid",
                values.len(),
                times.len(),
                space.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite {
                path: i % space.len(),
                step: i / space.len(),
            });
        }
        Ok(Self { times, space, values })
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_space(&self) -> usize {
        self.space.len()
    }

    pub fn at(&self, n: usize, i: usize) -> f64 {
        self.values[n * self.space.len() + i]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let m = self.space.len();
        &self.values[n * m..(n + 1) * m]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Index of the last time knot at or before `t`.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let last = *self.times.last().expect("non-empty grid");
        let tol = 1e-9 * last.max(1.0);
        if t < self.times[0] - tol || t > last + tol {
            return Err(LabError::Extrapolation(format!("t={t} outside [{}, {last}]", self.times[0])));
        }
        let n = self.times.partition_point(|&k| k <= t + tol);
        Ok(n.saturating_sub(1))
    }

    fn locate(&self, x: f64) -> Result<(usize, f64)> {
        let lo = self.space[0];
        let hi = *self.space.last().expect("non-empty grid");
        let tol = 1e-12 * (hi - lo);
        if !(x >= lo - tol && x <= hi + tol) {
            return Err(LabError::Extrapolation(format!("x={x} outside [{lo}, {hi}]")));
        }
        let i = self.space.partition_point(|&k| k <= x).clamp(1, self.space.len() - 1) - 1;
        let w = ((x - self.space[i]) / (self.space[i + 1] - self.space[i])).clamp(0.0, 1.0);
        Ok((i, w))
    }

    /// Linear in space, previous knot in time.
    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        let n = self.time_index(t)?;
        let (i, w) = self.locate(x)?;
        Ok((1.0 - w) * self.at(n, i) + w * self.at(n, i + 1))
    }

    /// Spatial derivative: central differences at the knots, interpolated
    /// linearly.
    pub fn eval_dx(&self, t: f64, x: f64) -> Result<f64> {
        let n = self.time_index(t)?;
        let (i, w) = self.locate(x)?;
        let row = self.row(n);
        Ok((1.0 - w) * knot_derivative(&self.space, row, i) + w * knot_derivative(&self.space, row, i + 1))
    }

    pub fn eval_dxx(&self, t: f64, x: f64) -> Result<f64> {
        let n = self.time_index(t)?;
        let (i, _) = self.locate(x)?;
        let row = self.row(n);
        let j = i.clamp(1, self.space.len() - 2);
        let h = self.space[j + 1] - self.space[j];
        Ok((row[j + 1] - 2.0 * row[j] + row[j - 1]) / (h * h))
    }

    /// `(t, x, value)` rows.
    pub fn triples(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.times
            .iter()
            .enumerate()
            .flat_map(move |(n, t)| self.space.iter().enumerate().map(move |(i, x)| (*t, *x, self.at(n, i))))
    }
}

pub(crate) fn knot_derivative(space: &[f64], row: &[f64], i: usize) -> f64 {
    let m = space.len();
    if i == 0 {
        (row[1] - row[0]) / (space[1] - space[0])
    } else if i == m - 1 {
        (row[m - 1] - row[m - 2]) / (space[m - 1] - space[m - 2])
    } else {
        (row[i + 1] - row[i - 1]) / (space[i + 1] - space[i - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> GridFunction {
        let times = vec![0.0, 0.5, 1.0];
        let space = vec![0.0, 1.0, 2.0];
        let values = times.iter().flat_map(|t| space.iter().map(move |x| t + 2.0 * x)).collect();
        GridFunction::new(times, space, values).unwrap()
    }

    #[test]
    fn interpolates_in_space_and_holds_in_time() {
        let g = linear();
        assert_eq!(g.eval(0.0, 1.5).unwrap(), 3.0);
        assert_eq!(g.eval(0.7, 1.5).unwrap(), 3.5);
        assert_eq!(g.eval(1.0, 2.0).unwrap(), 5.0);
        assert_eq!(g.eval_dx(0.2, 0.3).unwrap(), 2.0);
        assert_eq!(g.eval_dxx(0.2, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn rejects_points_outside_the_grid() {
        let g = linear();
        assert!(matches!(g.eval(0.0, 2.5), Err(LabError::Extrapolation(_))));
        assert!(matches!(g.eval(1.5, 1.0), Err(LabError::Extrapolation(_))));
    }

    #[test]
    fn rejects_non_finite_values() {
        let err = GridFunction::new(vec![0.0], vec![0.0, 1.0], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, LabError::NonFinite { path: 1, step: 0 }));
    }
}
