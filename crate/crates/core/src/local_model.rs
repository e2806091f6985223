//! Local Gaussianization and correlation inference around each sample, and
//! the Cholesky decorrelation into independent factors.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::CorrMatrix;
use crate::neighborhood::SpatialIndex;
use crate::samples::SampleSet;
use crate::seeding;
use crate::transform::{normal_scores, TailOptions};

/// Smallest eigenvalue tolerated in an inferred correlation matrix.
pub const EIGEN_FLOOR: f64 = 1e-6;
const CHOLESKY_RETRY_SHRINK: f64 = 1e-8;

fn cholesky_raw(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = m.nrows();
    let mut l = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut pivot = m[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > 0.0) {
            return Err(Error::CholeskyFailed { row: j, pivot });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..p {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Lower-triangular `L` with positive diagonal and `L Lᵀ = C`.
///
/// A non-positive pivot triggers one retry on `(1 - 1e-8) C + 1e-8 I`.
pub fn cholesky(c: &CorrMatrix) -> Result<DMatrix<f64>> {
    match cholesky_raw(c.as_matrix()) {
        Ok(l) => Ok(l),
        Err(_) => {
            let p = c.dim();
            let shrunk = c.as_matrix() * (1.0 - CHOLESKY_RETRY_SHRINK)
                + DMatrix::identity(p, p) * CHOLESKY_RETRY_SHRINK;
            cholesky_raw(&shrunk)
        }
    }
}

/// Solves `L ỹ = y` by forward substitution.
pub fn decorrelate(y: &[f64], l: &DMatrix<f64>) -> Result<Vec<f64>> {
    let p = l.nrows();
    if y.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: y.len(),
        });
    }
    let mut out = vec![0.0; p];
    for i in 0..p {
        let pivot = l[(i, i)];
        if pivot == 0.0 {
            return Err(Error::CholeskyFailed { row: i, pivot });
        }
        let s: f64 = (0..i).map(|k| l[(i, k)] * out[k]).sum();
        out[i] = (y[i] - s) / pivot;
    }
    Ok(out)
}

/// `y = L ỹ` for lower-triangular `L`.
pub fn recorrelate(factors: &[f64], l: &DMatrix<f64>) -> Vec<f64> {
    let p = l.nrows();
    (0..p)
        .map(|i| (0..=i).map(|k| l[(i, k)] * factors[k]).sum())
        .collect()
}

/// Neighbourhood search and transform settings for local inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Number of nearest samples forming each neighbourhood.
    pub neighbors: usize,
    pub tails: TailOptions,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            neighbors: 300,
            tails: TailOptions::default(),
        }
    }
}

/// Correlation model fitted to one set of samples.
#[derive(Debug, Clone)]
pub struct NeighborhoodFit {
    pub correlation: CorrMatrix,
    pub cholesky: DMatrix<f64>,
    /// Gaussian scores of each member, in member order.
    pub scores: Vec<Vec<f64>>,
    /// Weight of the identity mixed in to reach the eigenvalue floor.
    pub shrinkage: f64,
    /// Sample variance of each decorrelated factor over the members.
    pub factor_variance: Vec<f64>,
}

/// Pearson correlation of the columns, normalized to an exact unit diagonal.
fn pearson(columns: &[Vec<f64>]) -> DMatrix<f64> {
    let p = columns.len();
    let n = columns[0].len() as f64;
    let centered: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / n;
            c.iter().map(|v| v - mean).collect()
        })
        .collect();
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let s: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    let scale: Vec<f64> = (0..p).map(|i| 1.0 / cov[(i, i)].sqrt()).collect();
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            (cov[(i, j)] * scale[i] * scale[j]).clamp(-1.0, 1.0)
        }
    })
}

/// Mixes in the identity just enough to lift the smallest eigenvalue to
/// [`EIGEN_FLOOR`]. Returns the shrunk matrix and the mixing weight.
fn floor_eigenvalues(r: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let min = SymmetricEigen::new(r.clone()).eigenvalues.min();
    if min >= EIGEN_FLOOR {
        return (r, 0.0);
    }
    let lambda = (EIGEN_FLOOR - min) / (1.0 - min);
    let p = r.nrows();
    (r * (1.0 - lambda) + DMatrix::identity(p, p) * lambda, lambda)
}

/// Gaussianizes each variable over `ids` with its own table and fits the
/// correlation model of the resulting scores. `label` names the sample in
/// degenerate-variable errors.
pub fn fit_neighborhood(
    samples: &SampleSet,
    ids: &[usize],
    seed: u64,
    tails: &TailOptions,
    label: usize,
) -> Result<NeighborhoodFit> {
    let p = samples.dim();
    if p < 2 {
        return Err(Error::InvalidInput(
            "local correlation needs at least 2 variables".into(),
        ));
    }
    let mut columns = Vec::with_capacity(p);
    for var in 0..p {
        let values: Vec<f64> = ids.iter().map(|&i| samples.value(i, var)).collect();
        let var_seed = seeding::derive(seed, &[label as u64, var as u64]);
        let (_, scores) = normal_scores(&values, var_seed, tails).map_err(|e| match e {
            Error::DegenerateDistribution => Error::DegenerateVariable {
                sample: label,
                variable: var,
            },
            other => other,
        })?;
        columns.push(scores);
    }
    let (r, shrinkage) = floor_eigenvalues(pearson(&columns));
    let correlation = CorrMatrix::new(r)?;
    let l = cholesky(&correlation)?;
    let scores: Vec<Vec<f64>> = (0..ids.len())
        .map(|m| columns.iter().map(|c| c[m]).collect())
        .collect();
    let mut sums = vec![0.0; p];
    let mut squares = vec![0.0; p];
    for y in &scores {
        for (f, v) in decorrelate(y, &l)?.into_iter().enumerate() {
            sums[f] += v;
            squares[f] += v * v;
        }
    }
    let n = ids.len() as f64;
    let factor_variance = sums
        .iter()
        .zip(&squares)
        .map(|(s, q)| q / n - (s / n) * (s / n))
        .collect();
    Ok(NeighborhoodFit {
        correlation,
        cholesky: l,
        scores,
        shrinkage,
        factor_variance,
    })
}

/// Local correlation model at one sample.
#[derive(Debug, Clone)]
pub struct LocalModel {
    pub sample: usize,
    /// Neighbourhood sample ids, nearest first.
    pub neighbors: Vec<usize>,
    pub correlation: CorrMatrix,
    pub cholesky: DMatrix<f64>,
    /// Local Gaussian scores of the sample itself.
    pub gaussian: Vec<f64>,
    /// `L⁻¹ y` at the sample.
    pub factors: Vec<f64>,
    pub shrinkage: f64,
    pub factor_variance: Vec<f64>,
}

impl LocalModel {
    fn from_fit(sample: usize, neighbors: Vec<usize>, member: usize, fit: NeighborhoodFit) -> Result<Self> {
        let gaussian = fit.scores[member].clone();
        let factors = decorrelate(&gaussian, &fit.cholesky)?;
        Ok(LocalModel {
            sample,
            neighbors,
            correlation: fit.correlation,
            cholesky: fit.cholesky,
            gaussian,
            factors,
            shrinkage: fit.shrinkage,
            factor_variance: fit.factor_variance,
        })
    }
}

/// Infers the local model of sample `alpha` from its `k` nearest samples.
pub fn infer_local_correlation(
    samples: &SampleSet,
    index: &SpatialIndex,
    alpha: usize,
    k: usize,
    seed: u64,
    tails: &TailOptions,
) -> Result<LocalModel> {
    if alpha >= samples.len() {
        return Err(Error::InvalidInput(format!("sample id {alpha} out of range")));
    }
    if k > samples.len() {
        return Err(Error::InvalidInput(format!(
            "neighbourhood size {k} exceeds sample count {}",
            samples.len()
        )));
    }
    let found = index.knn(&samples.location(alpha), k);
    let ids: Vec<usize> = found.items.iter().map(|n| n.id).collect();
    // With coincident samples the centre may not come first.
    let member = ids.iter().position(|&i| i == alpha).ok_or_else(|| {
        Error::InvalidInput(format!("sample {alpha} missing from its own neighbourhood"))
    })?;
    let fit = fit_neighborhood(samples, &ids, seed, tails, alpha)?;
    LocalModel::from_fit(alpha, ids, member, fit)
}

/// Local models of every sample, computed in parallel and ordered by id.
pub fn infer_all(
    samples: &SampleSet,
    index: &SpatialIndex,
    cfg: &InferenceConfig,
    seed: u64,
) -> Result<Vec<LocalModel>> {
    let k = cfg.neighbors.min(samples.len());
    (0..samples.len())
        .into_par_iter()
        .map(|alpha| infer_local_correlation(samples, index, alpha, k, seed, &cfg.tails))
        .collect()
}

/// Single global model over all samples: the classical LMC baseline.
pub fn infer_global(samples: &SampleSet, cfg: &InferenceConfig, seed: u64) -> Result<Vec<LocalModel>> {
    let ids: Vec<usize> = (0..samples.len()).collect();
    let fit = fit_neighborhood(samples, &ids, seed, &cfg.tails, usize::MAX)?;
    ids.iter()
        .map(|&alpha| LocalModel::from_fit(alpha, ids.clone(), alpha, fit.clone()))
        .collect()
}

/// Whitespace-separated table: sample id, upper triangle of `C_α`, factors.
pub fn models_to_text(models: &[LocalModel]) -> String {
    let mut out = String::new();
    let Some(first) = models.first() else {
        return out;
    };
    let p = first.correlation.dim();
    out.push_str("sample");
    for i in 0..p {
        for j in (i + 1)..p {
            let _ = write!(out, " rho_{}_{}", i + 1, j + 1);
        }
    }
    for f in 0..p {
        let _ = write!(out, " factor_{}", f + 1);
    }
    out.push('\n');
    for m in models {
        let _ = write!(out, "{}", m.sample);
        for v in m.correlation.upper().iter().chain(&m.factors) {
            let _ = write!(out, " {v:.17e}");
        }
        out.push('\n');
    }
    out
}
