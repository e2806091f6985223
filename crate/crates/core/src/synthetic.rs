//! Synthetic bivariate deposit with an east-west trend in the correlation,
//! pseudo-drillhole sampling and validation metrics.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_model::cholesky;
use crate::manifold::CorrMatrix;
use crate::neighborhood::Point;
use crate::samples::SampleSet;
use crate::seeding;
use crate::simulate::{turning_bands, Grid};
use crate::variogram::VariogramModel;

/// `μ₁(x) = edge + (center - edge)·(1 - (2t - 1)²)` with `t` the relative
/// east coordinate: a profile peaking mid-domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakedMean {
    pub edge: f64,
    pub center: f64,
}

/// `μ₂(x) = west + (east - west)·t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearMean {
    pub west: f64,
    pub east: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub extent: [f64; 3],
    pub spacing: [f64; 3],
    pub range: f64,
    pub rho_west: f64,
    pub rho_east: f64,
    pub mean1: PeakedMean,
    pub mean2: LinearMean,
    pub sigma: f64,
    pub hole_spacing: f64,
    /// Largest deviation of a hole from vertical, in degrees.
    pub max_dip_deviation: f64,
    pub lines: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// Desk-scale deposit: 400×400×40 m, about 2000 samples.
    fn default() -> Self {
        SyntheticConfig {
            extent: [400.0, 400.0, 40.0],
            spacing: [5.0, 5.0, 2.5],
            range: 50.0,
            rho_west: 0.9,
            rho_east: -0.9,
            mean1: PeakedMean {
                edge: 0.0,
                center: 1.0,
            },
            mean2: LinearMean {
                west: 0.0,
                east: 1.0,
            },
            sigma: 1.0,
            hole_spacing: 35.0,
            max_dip_deviation: 30.0,
            lines: 1200,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_west.abs() < 1.0 && self.rho_east.abs() < 1.0) {
            return Err(Error::Config("|rho| must be below 1 at both edges".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !(self.range > 0.0) || !(self.hole_spacing > 0.0) {
            return Err(Error::Config("range and hole spacing must be positive".into()));
        }
        if !(0.0..90.0).contains(&self.max_dip_deviation) {
            return Err(Error::Config("max_dip_deviation must be in [0, 90)".into()));
        }
        for a in 0..3 {
            if !(self.extent[a] > 0.0 && self.spacing[a] > 0.0) {
                return Err(Error::Config("extent and spacing must be positive".into()));
            }
        }
        self.grid().map(|_| ())
    }

    /// Node-centred grid covering the extent.
    pub fn grid(&self) -> Result<Grid> {
        let counts = [0, 1, 2].map(|a| ((self.extent[a] / self.spacing[a]).round() as usize).max(1));
        let origin = [0, 1, 2].map(|a| 0.5 * self.spacing[a]);
        Grid::new(origin, self.spacing, counts)
    }

    /// Relative east position in `[0, 1]`.
    fn east(&self, x: f64) -> f64 {
        (x / self.extent[0]).clamp(0.0, 1.0)
    }

    pub fn rho_at(&self, x: f64) -> f64 {
        let t = self.east(x);
        self.rho_west + (self.rho_east - self.rho_west) * t
    }

    pub fn mean_at(&self, x: f64) -> [f64; 2] {
        let t = self.east(x);
        let s = 2.0 * t - 1.0;
        [
            self.mean1.edge + (self.mean1.center - self.mean1.edge) * (1.0 - s * s),
            self.mean2.west + (self.mean2.east - self.mean2.west) * t,
        ]
    }
}

/// Exhaustive truth on the grid, node-major with two values per node.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub grid: Grid,
    pub factors: [Vec<f64>; 2],
    pub gaussian: [Vec<f64>; 2],
    pub values: [Vec<f64>; 2],
    pub rho: Vec<f64>,
}

/// Two independent unit exponential fields `Ỹ`, mixed into `Y = L(u) Ỹ`
/// with `ρ₁₂` linear in the east coordinate, then `Z = exp(μ(u) + σY)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticTruth> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let model = VariogramModel::exponential(0.0, cfg.range, 1.0)?;
    let f1 = turning_bands(&model, &grid, cfg.lines, seeding::derive(cfg.seed, &[1]))?;
    let f2 = turning_bands(&model, &grid, cfg.lines, seeding::derive(cfg.seed, &[2]))?;
    let n = grid.n_nodes();
    let mut y1 = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);
    let mut z1 = Vec::with_capacity(n);
    let mut z2 = Vec::with_capacity(n);
    let mut rho = Vec::with_capacity(n);
    for i in 0..n {
        let x = grid.node(i)[0];
        let r = cfg.rho_at(x);
        let l = cholesky(&CorrMatrix::bivariate(r)?)?;
        let a = f1[i];
        let b = l[(1, 0)] * f1[i] + l[(1, 1)] * f2[i];
        let mu = cfg.mean_at(x);
        y1.push(a);
        y2.push(b);
        z1.push((mu[0] + cfg.sigma * a).exp());
        z2.push((mu[1] + cfg.sigma * b).exp());
        rho.push(r);
    }
    Ok(SyntheticTruth {
        grid,
        factors: [f1, f2],
        gaussian: [y1, y2],
        values: [z1, z2],
        rho,
    })
}

/// Drillhole samples with the grid node each one was taken from.
#[derive(Debug, Clone)]
pub struct Drillholes {
    pub samples: SampleSet,
    pub nodes: Vec<usize>,
    pub holes: usize,
}

/// Pseudo-drillholes collared on a square pattern at `hole_spacing`, each
/// with a uniform azimuth and a dip within `max_dip_deviation` of vertical.
/// Every hole is traced down through the domain in steps of the vertical
/// grid spacing and sampled at the nearest node; a node is sampled once.
pub fn drillhole_sample(truth: &SyntheticTruth, cfg: &SyntheticConfig) -> Result<Drillholes> {
    let grid = &truth.grid;
    let s = cfg.hole_spacing;
    let collars = |extent: f64| -> Vec<f64> {
        let mut out = Vec::new();
        let mut c = 0.5 * s;
        while c < extent {
            out.push(c);
            c += s;
        }
        out
    };
    let xs = collars(cfg.extent[0]);
    let ys = collars(cfg.extent[1]);
    if xs.is_empty() || ys.is_empty() || s > cfg.extent[0].max(cfg.extent[1]) {
        return Err(Error::Empty("drillholes: spacing exceeds the domain"));
    }
    let mut rng = seeding::stream(cfg.seed, &[3]);
    let top = cfg.extent[2];
    let step = cfg.spacing[2];
    let max_dev = cfg.max_dip_deviation.to_radians();
    let mut seen = BTreeSet::new();
    let mut nodes = Vec::new();
    let mut holes = 0;
    for &y0 in &ys {
        for &x0 in &xs {
            let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
            let deviation = if max_dev > 0.0 { rng.random_range(0.0..max_dev) } else { 0.0 };
            let dir = [
                deviation.sin() * azimuth.sin(),
                deviation.sin() * azimuth.cos(),
                -deviation.cos(),
            ];
            let mut sampled = false;
            let mut t = 0.5 * step;
            loop {
                let u = [x0 + t * dir[0], y0 + t * dir[1], top + t * dir[2]];
                if u[2] < 0.0 {
                    break;
                }
                if u[0] < 0.0 || u[0] > cfg.extent[0] || u[1] < 0.0 || u[1] > cfg.extent[1] {
                    break;
                }
                let node = grid.nearest(&u);
                if seen.insert(node) {
                    nodes.push(node);
                    sampled = true;
                }
                t += step;
            }
            if sampled {
                holes += 1;
            }
        }
    }
    if nodes.is_empty() {
        return Err(Error::Empty("drillhole samples"));
    }
    let locations: Vec<Point> = nodes.iter().map(|&n| grid.node(n)).collect();
    let columns = vec![
        nodes.iter().map(|&n| truth.values[0][n]).collect(),
        nodes.iter().map(|&n| truth.values[1][n]).collect(),
    ];
    Ok(Drillholes {
        samples: SampleSet::unnamed(locations, columns)?,
        nodes,
        holes,
    })
}

/// Seeded random split of `n` ids into (training, held-out) with the given
/// held-out fraction. Both lists are sorted.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput("held-out fraction must be in [0, 1)".into()));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut seeding::stream(seed, &[4]));
    let n_test = (n as f64 * fraction).round() as usize;
    let mut test = ids[..n_test].to_vec();
    let mut train = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMetrics {
    pub me: f64,
    pub mae: f64,
    pub rmse: f64,
}

pub fn error_metrics(predicted: &[f64], truth: &[f64]) -> Result<ErrorMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let n = predicted.len() as f64;
    let (mut s, mut a, mut q) = (0.0, 0.0, 0.0);
    for (p, t) in predicted.iter().zip(truth) {
        let e = p - t;
        s += e;
        a += e.abs();
        q += e * e;
    }
    Ok(ErrorMetrics {
        me: s / n,
        mae: a / n,
        rmse: (q / n).sqrt(),
    })
}

/// Linear-interpolation sample quantile of sorted data (the usual
/// `h = (n - 1) q` definition).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const MIN_ACCURACY_REALIZATIONS: usize = 20;

/// Nominal probabilities `0.1, 0.2, …, 0.9`.
pub fn nominal_levels() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// For each nominal `p`, the fraction of nodes whose truth lies inside the
/// symmetric interval between the `(1 - p)/2` and `(1 + p)/2` quantiles of
/// that node's realizations.
pub fn accuracy_plot_data(realizations: &[Vec<f64>], truth: &[f64]) -> Result<Vec<(f64, f64)>> {
    if realizations.is_empty() {
        return Err(Error::Empty("test nodes"));
    }
    if realizations.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: realizations.len(),
        });
    }
    let sorted: Vec<Vec<f64>> = realizations
        .iter()
        .map(|r| {
            if r.len() < MIN_ACCURACY_REALIZATIONS {
                return Err(Error::InvalidInput(format!(
                    "accuracy plot needs at least {MIN_ACCURACY_REALIZATIONS} realizations per node, got {}",
                    r.len()
                )));
            }
            if r.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite("realization value"));
            }
            let mut s = r.clone();
            s.sort_by(f64::total_cmp);
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(nominal_levels()
        .into_iter()
        .map(|p| {
            let inside = sorted
                .iter()
                .zip(truth)
                .filter(|(s, t)| {
                    let lo = quantile_sorted(s, (1.0 - p) / 2.0);
                    let hi = quantile_sorted(s, (1.0 + p) / 2.0);
                    **t >= lo && **t <= hi
                })
                .count();
            (p, inside as f64 / truth.len() as f64)
        })
        .collect())
}
