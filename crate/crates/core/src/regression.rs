//! Least-squares projection onto polynomial bases, used for every
//! conditional expectation in the crate.
//!
//! Features are standardized per fit and features with no spread across the
//! sample are dropped, so a node where every path sits at the same state
//! reduces to the sample mean.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition number of the design matrix above which a fit is rejected.
pub const MAX_CONDITION: f64 = 1e12;

const CHUNK: usize = 2048;

/// Total-degree polynomial basis in a handful of features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: u32,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 2 }
    }
}

impl RegressionBasis {
    pub fn new(degree: u32) -> Self {
        Self { degree }
    }

    /// Number of basis functions for `features` active features.
    pub fn dimension(&self, features: usize) -> usize {
        monomials(features, self.degree).len()
    }
}

fn monomials(features: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut current = vec![0u32; features];
    fn rec(i: usize, left: u32, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i == current.len() {
            out.push(current.clone());
            return;
        }
        for e in 0..=left {
            current[i] = e;
            rec(i + 1, left - e, current, out);
        }
        current[i] = 0;
    }
    rec(0, degree, &mut current, &mut out);
    out.sort_by_key(|m| (m.iter().sum::<u32>(), std::cmp::Reverse(m.clone())));
    out
}

/// A fitted projection: standardization, active monomials and one
/// coefficient vector per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    center: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<usize>,
    exponents: Vec<Vec<u32>>,
    pub coefficients: Vec<Vec<f64>>,
    pub condition: f64,
}

impl Projection {
    /// Projection onto constants with the given values per target.
    pub fn constant(features: usize, values: &[f64]) -> Self {
        Self {
            center: vec![0.0; features],
            scale: vec![1.0; features],
            active: Vec::new(),
            exponents: vec![Vec::new()],
            coefficients: values.iter().map(|&v| vec![v]).collect(),
            condition: 1.0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.exponents.len()
    }

    fn basis_row(&self, features: &[f64], row: &mut [f64]) {
        let mut std = [0.0f64; 8];
        for (j, &f) in self.active.iter().enumerate() {
            std[j] = (features[f] - self.center[f]) / self.scale[f];
        }
        for (slot, exps) in row.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (j, &e) in exps.iter().enumerate() {
                for _ in 0..e {
                    v *= std[j];
                }
            }
            *slot = v;
        }
    }

    /// Evaluates target `target` at a feature vector.
    pub fn eval(&self, target: usize, features: &[f64]) -> f64 {
        let mut row = [0.0f64; 64];
        let d = self.dimension();
        self.basis_row(features, &mut row[..d]);
        row[..d]
            .iter()
            .zip(&self.coefficients[target])
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Evaluates every target at once into `out`.
    pub fn eval_all(&self, features: &[f64], out: &mut [f64]) {
        let mut row = [0.0f64; 64];
        let d = self.dimension();
        self.basis_row(features, &mut row[..d]);
        for (o, coef) in out.iter_mut().zip(&self.coefficients) {
            *o = row[..d].iter().zip(coef).map(|(a, b)| a * b).sum();
        }
    }
}

/// Standardized basis rows of one sample together with the factorized Gram
/// matrix, reusable for any number of target columns.
#[derive(Debug, Clone)]
pub struct Design {
    template: Projection,
    rows: Vec<f64>,
    n: usize,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Design {
    /// Standardizes `features`, builds the basis rows and factorizes the
    /// Gram matrix. Fails with [`Error::SingularRegression`] above
    /// [`MAX_CONDITION`].
    pub fn new(basis: RegressionBasis, features: &[Vec<f64>], node: usize) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::usage("regression needs at least one sample"));
        }
        let n_features = features[0].len();
        assert!(n_features <= 8, "at most 8 regression features are supported");

        let mut center = vec![0.0; n_features];
        let mut scale = vec![1.0; n_features];
        let mut active = Vec::new();
        for f in 0..n_features {
            let mean = features.iter().map(|v| v[f]).sum::<f64>() / n as f64;
            let var = features.iter().map(|v| (v[f] - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            center[f] = mean;
            if sd > 1e-12 * mean.abs().max(1.0) {
                scale[f] = sd;
                active.push(f);
            }
        }
        let exponents = monomials(active.len(), basis.degree);
        let d = exponents.len();
        assert!(d <= 64, "basis dimension {d} too large");
        let template = Projection {
            center,
            scale,
            active,
            exponents,
            coefficients: Vec::new(),
            condition: 1.0,
        };

        let mut rows = vec![0.0; n * d];
        rows.par_chunks_mut(d)
            .zip(features.par_iter())
            .for_each(|(row, f)| template.basis_row(f, row));

        let partials: Vec<Vec<f64>> = rows
            .par_chunks(CHUNK * d)
            .map(|chunk| {
                let mut gram = vec![0.0; d * d];
                for row in chunk.chunks(d) {
                    for a in 0..d {
                        for b in a..d {
                            gram[a * d + b] += row[a] * row[b];
                        }
                    }
                }
                gram
            })
            .collect();
        let mut gram = vec![0.0; d * d];
        for g in &partials {
            gram.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        for a in 0..d {
            for b in 0..a {
                gram[a * d + b] = gram[b * d + a];
            }
        }
        let gram = DMatrix::from_row_slice(d, d, &gram) / n as f64;
        let eig = gram.clone().symmetric_eigen();
        let max_ev = eig.eigenvalues.max();
        let min_ev = eig.eigenvalues.min();
        let condition = if min_ev > 0.0 {
            (max_ev / min_ev).sqrt()
        } else {
            f64::INFINITY
        };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularRegression { node, condition });
        }
        let chol = gram
            .cholesky()
            .ok_or(Error::SingularRegression { node, condition })?;
        Ok(Self {
            template: Projection { condition, ..template },
            rows,
            n,
            chol,
        })
    }

    pub fn dimension(&self) -> usize {
        self.template.dimension()
    }

    pub fn condition(&self) -> f64 {
        self.template.condition
    }

    /// Basis row of sample `p`.
    pub fn row(&self, p: usize) -> &[f64] {
        let d = self.dimension();
        &self.rows[p * d..(p + 1) * d]
    }

    /// Least-squares projection of each target column.
    pub fn project(&self, targets: &[&[f64]]) -> Projection {
        let d = self.dimension();
        let coefficients = targets
            .iter()
            .map(|target| {
                debug_assert_eq!(target.len(), self.n);
                let partials: Vec<Vec<f64>> = self
                    .rows
                    .par_chunks(CHUNK * d)
                    .zip(target.par_chunks(CHUNK))
                    .map(|(rows, ys)| {
                        let mut rhs = vec![0.0; d];
                        for (row, y) in rows.chunks(d).zip(ys) {
                            for a in 0..d {
                                rhs[a] += row[a] * y;
                            }
                        }
                        rhs
                    })
                    .collect();
                let mut rhs = vec![0.0; d];
                for r in &partials {
                    rhs.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                let b = DVector::from_column_slice(&rhs) / self.n as f64;
                self.chol.solve(&b).iter().copied().collect()
            })
            .collect();
        Projection {
            coefficients,
            ..self.template.clone()
        }
    }
}

/// Regresses each target column on the polynomial basis of `features`.
///
/// `features[p]` holds the feature vector of sample `p`; `targets[t][p]` the
/// value of target `t`. Reductions run over fixed-size chunks in order, so
/// the fit does not depend on the number of worker threads.
pub fn fit(
    basis: RegressionBasis,
    features: &[Vec<f64>],
    targets: &[&[f64]],
    node: usize,
) -> Result<Projection> {
    Ok(Design::new(basis, features, node)?.project(targets))
}

/// Dot product of a basis row with a coefficient vector.
pub fn dot(row: &[f64], coefficients: &[f64]) -> f64 {
    row.iter().zip(coefficients).map(|(a, b)| a * b).sum()
}
