//! Least-squares conditional expectations on polynomial bases of the
//! Markov state.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::rng::REDUCE_CHUNK;

/// Gram matrices with reciprocal condition below this are treated as rank
/// deficient (cond(X) above ~1e7).
const MIN_RCOND: f64 = 1e-14;

/// Monomials of total degree `<= degree` in the standardized active state
/// coordinates. Coordinates with (numerically) zero spread are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialBasis {
    dims: usize,
    degree: usize,
    active: Vec<usize>,
    centre: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<u32>>,
}

impl PolynomialBasis {
    /// Chooses centring and scaling from `features` (`n x dims`, row-major).
    pub fn from_samples(features: &[f64], dims: usize, degree: usize) -> Self {
        let n = features.len().checked_div(dims).unwrap_or(0);
        let mut active = Vec::new();
        let mut centre = Vec::new();
        let mut scale = Vec::new();
        for j in 0..dims {
            let col = features.iter().skip(j).step_by(dims);
            let mean = col.clone().sum::<f64>() / n.max(1) as f64;
            let var = col.map(|x| (x - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * mean.abs().max(1.0) {
                active.push(j);
                centre.push(mean);
                scale.push(sd);
            }
        }
        let mut basis = Self {
            dims,
            degree,
            active,
            centre,
            scale,
            exponents: Vec::new(),
        };
        basis.exponents = monomials(basis.active.len(), degree);
        basis
    }

    pub fn with_degree(&self, degree: usize) -> Self {
        let mut b = self.clone();
        b.degree = degree;
        b.exponents = monomials(b.active.len(), degree);
        b
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let z: Vec<f64> = self
            .active
            .iter()
            .zip(self.centre.iter().zip(&self.scale))
            .map(|(&j, (c, s))| (x[j] - c) / s)
            .collect();
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(&z).map(|(&p, zi)| zi.powi(p as i32)).product();
        }
    }
}

fn monomials(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; vars]];
    for total in 1..=degree {
        let mut cur = vec![0u32; vars];
        push_compositions(&mut out, &mut cur, 0, total as u32);
    }
    out
}

fn push_compositions(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, at: usize, left: u32) {
    if cur.is_empty() {
        return;
    }
    if at == cur.len() - 1 {
        cur[at] = left;
        out.push(cur.clone());
        cur[at] = 0;
        return;
    }
    for k in (0..=left).rev() {
        cur[at] = k;
        push_compositions(out, cur, at + 1, left - k);
    }
    cur[at] = 0;
}

/// Basis matrix evaluated on a sample, with its factorized Gram matrix.
#[derive(Debug, Clone)]
pub struct Regressor {
    basis: PolynomialBasis,
    design: Vec<f64>,
    n: usize,
    gram_inv: DMatrix<f64>,
    condition: f64,
    warnings: Vec<String>,
}

impl Regressor {
    /// Builds the design on `features` (`n x dims`), reducing the degree
    /// while the Gram matrix is rank deficient.
    pub fn new(features: &[f64], dims: usize, degree: usize) -> Result<Self> {
        if dims > 0 && !features.len().is_multiple_of(dims) {
            return Err(LabError::Shape("feature array is not n x dims".into()));
        }
        let n = features.len().checked_div(dims).unwrap_or(features.len());
        if n == 0 {
            return Err(LabError::Shape("regression needs at least one sample".into()));
        }
        let full = PolynomialBasis::from_samples(features, dims, degree);
        let mut warnings = Vec::new();
        let mut deg = degree;
        loop {
            let basis = full.with_degree(deg);
            let p = basis.len();
            let design = build_design(&basis, features, dims, n);
            let gram = gram(&design, p);
            let eig = gram.clone().symmetric_eigen();
            let hi = eig.eigenvalues.max();
            let lo = eig.eigenvalues.min();
            if p <= n && lo > MIN_RCOND * hi {
                let mut inv = DMatrix::zeros(p, p);
                for (i, lam) in eig.eigenvalues.iter().enumerate() {
                    let v = eig.eigenvectors.column(i);
                    inv += (v * v.transpose()) / *lam;
                }
                return Ok(Self {
                    basis,
                    design,
                    n,
                    gram_inv: inv,
                    condition: hi / lo,
                    warnings,
                });
            }
            if deg == 0 {
                return Err(LabError::SolverQuality("constant regression is singular".into()));
            }
            warnings.push(format!(
                "rank-deficient regression (eigenvalue ratio {:.1e}, {p} terms, {n} samples); degree {deg} -> {}",
                if lo > 0.0 { hi / lo } else { f64::INFINITY },
                deg - 1
            ));
            deg -= 1;
        }
    }

    pub fn basis(&self) -> &PolynomialBasis {
        &self.basis
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Least-squares coefficients for one target.
    pub fn coefficients(&self, target: &[f64]) -> Result<Vec<f64>> {
        if target.len() != self.n {
            return Err(LabError::Shape(format!("target has {} entries, design has {}", target.len(), self.n)));
        }
        let p = self.basis.len();
        let parts: Vec<Vec<f64>> = self
            .design
            .par_chunks(REDUCE_CHUNK * p)
            .zip(target.par_chunks(REDUCE_CHUNK))
            .map(|(rows, ys)| {
                let mut acc = vec![0.0; p];
                for (row, y) in rows.chunks(p).zip(ys) {
                    for (a, r) in acc.iter_mut().zip(row) {
                        *a += r * y;
                    }
                }
                acc
            })
            .collect();
        let mut rhs = DVector::zeros(p);
        for part in parts {
            for (i, v) in part.into_iter().enumerate() {
                rhs[i] += v;
            }
        }
        Ok((&self.gram_inv * rhs).iter().cloned().collect())
    }

    /// Fitted values on the design sample.
    pub fn fitted(&self, coefs: &[f64]) -> Vec<f64> {
        let p = self.basis.len();
        self.design
            .par_chunks(p)
            .map(|row| row.iter().zip(coefs).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn fit(&self, target: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.coefficients(target)?;
        let f = self.fitted(&c);
        Ok((c, f))
    }
}

fn build_design(basis: &PolynomialBasis, features: &[f64], dims: usize, n: usize) -> Vec<f64> {
    let p = basis.len();
    let mut design = vec![0.0; n * p];
    if dims == 0 {
        design.iter_mut().for_each(|v| *v = 1.0);
        return design;
    }
    design
        .par_chunks_mut(p)
        .zip(features.par_chunks(dims))
        .for_each(|(row, x)| basis.eval(x, row));
    design
}

fn gram(design: &[f64], p: usize) -> DMatrix<f64> {
    let parts: Vec<Vec<f64>> = design
        .par_chunks(REDUCE_CHUNK * p)
        .map(|rows| {
            let mut acc = vec![0.0; p * p];
            for row in rows.chunks(p) {
                for i in 0..p {
                    for j in i..p {
                        acc[i * p + j] += row[i] * row[j];
                    }
                }
            }
            acc
        })
        .collect();
    let mut g = DMatrix::zeros(p, p);
    for part in parts {
        for i in 0..p {
            for j in i..p {
                g[(i, j)] += part[i * p + j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            g[(i, j)] = g[(j, i)];
        }
    }
    g
}

/// Evaluates `coefs . basis(x)`.
pub fn predict(basis: &PolynomialBasis, coefs: &[f64], x: &[f64]) -> f64 {
    let mut row = vec![0.0; basis.len()];
    basis.eval(x, &mut row);
    row.iter().zip(coefs).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(2, 3).len(), 10);
        assert_eq!(monomials(1, 3).len(), 4);
        assert_eq!(monomials(0, 3).len(), 1);
        assert_eq!(monomials(3, 2).len(), 10);
    }

    #[test]
    fn recovers_a_cubic_exactly() {
        let xs: Vec<f64> = (0..200).map(|i| -2.0 + 4.0 * i as f64 / 199.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let reg = Regressor::new(&xs, 1, 3).unwrap();
        let (c, fit) = reg.fit(&ys).unwrap();
        for (f, y) in fit.iter().zip(&ys) {
            assert!((f - y).abs() < 1e-10);
        }
        assert!((predict(reg.basis(), &c, &[0.3]) - (1.0 - 0.6 + 0.5 * 0.027)).abs() < 1e-10);
    }

    #[test]
    fn degenerate_coordinates_collapse_to_the_mean() {
        let xs = vec![0.7; 50];
        let ys: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let reg = Regressor::new(&xs, 1, 3).unwrap();
        assert_eq!(reg.basis().len(), 1);
        let (_, fit) = reg.fit(&ys).unwrap();
        assert!((fit[0] - 24.5).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_reduce_degree() {
        let xs = vec![0.0, 1.0, 2.0];
        let reg = Regressor::new(&xs, 1, 3).unwrap();
        assert!(reg.basis().degree() < 3);
        assert!(!reg.warnings().is_empty());
    }
}
