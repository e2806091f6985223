//! Ordinary kriging weights in covariance form.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::neighborhood::Point;
use crate::variogram::VariogramModel;

/// Locations closer than this are treated as the same point.
pub const DUPLICATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingWeights {
    pub weights: Vec<f64>,
    pub lagrange: f64,
    pub variance: f64,
}

impl KrigingWeights {
    pub fn estimate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

fn distance(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Groups neighbours lying within [`DUPLICATE_TOL`] of an earlier one.
/// Returns the representative index of every neighbour.
fn duplicate_groups(neighbors: &[Point]) -> Vec<usize> {
    let mut rep: Vec<usize> = (0..neighbors.len()).collect();
    for i in 0..neighbors.len() {
        for j in 0..i {
            if rep[j] == j && distance(&neighbors[i], &neighbors[j]) <= DUPLICATE_TOL {
                rep[i] = j;
                break;
            }
        }
    }
    rep
}

fn solve(model: &VariogramModel, points: &[Point], target: &Point) -> Result<KrigingWeights> {
    let k = points.len();
    let c0 = model.cov(0.0);
    if let Some(hit) = points.iter().position(|p| distance(p, target) <= DUPLICATE_TOL) {
        let mut weights = vec![0.0; k];
        weights[hit] = 1.0;
        return Ok(KrigingWeights {
            weights,
            lagrange: 0.0,
            variance: 0.0,
        });
    }
    let mut a = DMatrix::zeros(k + 1, k + 1);
    let mut b = DVector::zeros(k + 1);
    for i in 0..k {
        for j in i..k {
            let c = model.cov_between(&points[i], &points[j]);
            a[(i, j)] = c;
            a[(j, i)] = c;
        }
        a[(i, k)] = 1.0;
        a[(k, i)] = 1.0;
        b[i] = model.cov_between(&points[i], target);
    }
    b[k] = 1.0;
    let x = a.clone().lu().solve(&b).ok_or(Error::SingularSystem)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let weights: Vec<f64> = x.iter().take(k).copied().collect();
    let lagrange = x[k];
    let explained: f64 = weights.iter().zip(b.iter()).map(|(w, c)| w * c).sum();
    let variance = c0 - explained - lagrange;
    if variance < -1e-10 * c0 {
        return Err(Error::SingularSystem);
    }
    Ok(KrigingWeights {
        weights,
        lagrange,
        variance: variance.max(0.0),
    })
}

/// Solves the ordinary kriging system for `target`.
///
/// Duplicate neighbour locations are merged before solving and the merged
/// weight is split equally among the copies.
pub fn ordinary_kriging_weights(
    model: &VariogramModel,
    neighbors: &[Point],
    target: &Point,
) -> Result<KrigingWeights> {
    if neighbors.is_empty() {
        return Err(Error::Empty("kriging neighbours"));
    }
    let rep = duplicate_groups(neighbors);
    let unique: Vec<usize> = (0..neighbors.len()).filter(|&i| rep[i] == i).collect();
    if unique.len() == neighbors.len() {
        return solve(model, neighbors, target);
    }
    let points: Vec<Point> = unique.iter().map(|&i| neighbors[i]).collect();
    let reduced = solve(model, &points, target)?;
    let mut weights = vec![0.0; neighbors.len()];
    for (slot, &u) in unique.iter().enumerate() {
        let copies = rep.iter().filter(|&&r| r == u).count() as f64;
        for (i, &r) in rep.iter().enumerate() {
            if r == u {
                weights[i] = reduced.weights[slot] / copies;
            }
        }
    }
    Ok(KrigingWeights {
        weights,
        lagrange: reduced.lagrange,
        variance: reduced.variance,
    })
}
