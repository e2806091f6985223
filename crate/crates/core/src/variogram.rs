//! Experimental semi-variograms, exponential model fitting and covariance
//! evaluation. Ranges are practical ranges: a structure reaches 95% of its
//! sill at `h = range`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighborhood::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Exponential,
    Spherical,
    Gaussian,
}

impl StructureKind {
    pub fn name(self) -> &'static str {
        match self {
            StructureKind::Exponential => "exponential",
            StructureKind::Spherical => "spherical",
            StructureKind::Gaussian => "gaussian",
        }
    }

    /// Normalized correlogram `ρ(h)` with `ρ(0) = 1`.
    fn correlation(self, h: f64, range: f64) -> f64 {
        let r = h / range;
        match self {
            StructureKind::Exponential => (-3.0 * r).exp(),
            StructureKind::Gaussian => (-3.0 * r * r).exp(),
            StructureKind::Spherical => {
                if r >= 1.0 {
                    0.0
                } else {
                    1.0 - 1.5 * r + 0.5 * r * r * r
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Structure {
    pub kind: StructureKind,
    pub range: f64,
    pub sill: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariogramModel {
    #[serde(default)]
    pub nugget: f64,
    pub structures: Vec<Structure>,
}

impl VariogramModel {
    pub fn new(nugget: f64, structures: Vec<Structure>) -> Result<Self> {
        let m = VariogramModel { nugget, structures };
        m.validate()?;
        Ok(m)
    }

    pub fn exponential(nugget: f64, range: f64, sill: f64) -> Result<Self> {
        Self::new(
            nugget,
            vec![Structure {
                kind: StructureKind::Exponential,
                range,
                sill,
            }],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nugget >= 0.0) || !self.nugget.is_finite() {
            return Err(Error::InvalidInput("nugget must be finite and >= 0".into()));
        }
        for s in &self.structures {
            if !(s.range > 0.0) || !s.range.is_finite() {
                return Err(Error::InvalidInput("structure range must be positive".into()));
            }
            if !(s.sill >= 0.0) || !s.sill.is_finite() {
                return Err(Error::InvalidInput("structure sill must be >= 0".into()));
            }
        }
        if !(self.total_sill() > 0.0) {
            return Err(Error::InvalidInput("total sill must be positive".into()));
        }
        Ok(())
    }

    pub fn total_sill(&self) -> f64 {
        self.nugget + self.structures.iter().map(|s| s.sill).sum::<f64>()
    }

    /// Same shape with the total sill rescaled to one.
    pub fn standardized(&self) -> Self {
        let total = self.total_sill();
        VariogramModel {
            nugget: self.nugget / total,
            structures: self
                .structures
                .iter()
                .map(|s| Structure {
                    sill: s.sill / total,
                    ..*s
                })
                .collect(),
        }
    }

    pub fn gamma(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 0.0;
        }
        self.nugget
            + self
                .structures
                .iter()
                .map(|s| s.sill * (1.0 - s.kind.correlation(h, s.range)))
                .sum::<f64>()
    }

    /// Covariance at a non-negative lag, without argument checking.
    pub fn cov(&self, h: f64) -> f64 {
        let structured: f64 = self
            .structures
            .iter()
            .map(|s| s.sill * s.kind.correlation(h, s.range))
            .sum();
        if h <= 0.0 {
            self.nugget + structured
        } else {
            structured
        }
    }

    pub fn covariance(&self, h: f64) -> Result<f64> {
        if h.is_nan() || h < 0.0 {
            return Err(Error::InvalidInput(format!("negative lag {h}")));
        }
        Ok(self.cov(h))
    }

    pub fn cov_between(&self, a: &Point, b: &Point) -> f64 {
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        self.cov(d)
    }

    /// Largest practical range among the structures.
    pub fn max_range(&self) -> f64 {
        self.structures.iter().map(|s| s.range).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "nugget {:.17e}", self.nugget);
        for s in &self.structures {
            let _ = writeln!(out, "{} range {:.17e} sill {:.17e}", s.kind.name(), s.range, s.sill);
        }
        out
    }
}

pub fn covariance_eval(model: &VariogramModel, h: f64) -> Result<f64> {
    model.covariance(h)
}

/// Point pairs grouped by omnidirectional lag bin `[i·w, (i+1)·w)`.
#[derive(Debug, Clone)]
pub struct LagPairs {
    lag_width: f64,
    bins: Vec<Vec<(u32, u32)>>,
    centers: Vec<f64>,
}

impl LagPairs {
    pub fn new(locations: &[Point], lag_width: f64, n_lags: usize) -> Result<Self> {
        if !(lag_width > 0.0) || !lag_width.is_finite() {
            return Err(Error::InvalidInput("lag width must be positive".into()));
        }
        if n_lags == 0 {
            return Err(Error::InvalidInput("need at least one lag".into()));
        }
        if locations.len() > u32::MAX as usize {
            return Err(Error::InvalidInput("too many locations".into()));
        }
        let n = locations.len();
        let per_row: Vec<Vec<(usize, u32, u32, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let a = locations[i];
                let mut row = Vec::new();
                for (j, b) in locations.iter().enumerate().skip(i + 1) {
                    let h = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                    let bin = (h / lag_width).floor();
                    if bin < n_lags as f64 {
                        row.push((bin as usize, i as u32, j as u32, h));
                    }
                }
                row
            })
            .collect();
        let mut bins = vec![Vec::new(); n_lags];
        let mut dist_sum = vec![0.0; n_lags];
        for row in per_row {
            for (bin, i, j, h) in row {
                bins[bin].push((i, j));
                dist_sum[bin] += h;
            }
        }
        let centers = bins
            .iter()
            .zip(&dist_sum)
            .enumerate()
            .map(|(k, (b, s))| {
                if b.is_empty() {
                    (k as f64 + 0.5) * lag_width
                } else {
                    s / b.len() as f64
                }
            })
            .collect();
        Ok(LagPairs {
            lag_width,
            bins,
            centers,
        })
    }

    pub fn n_lags(&self) -> usize {
        self.bins.len()
    }

    /// Classical estimator for the variable pair `(i, j)`.
    pub fn estimate(&self, values_i: &[f64], values_j: &[f64], pair: (usize, usize)) -> Result<ExperimentalVariogram> {
        if values_i.len() != values_j.len() {
            return Err(Error::DimensionMismatch {
                expected: values_i.len(),
                found: values_j.len(),
            });
        }
        let mut lags = Vec::new();
        let mut empty_lags = Vec::new();
        for (k, bin) in self.bins.iter().enumerate() {
            if bin.is_empty() {
                empty_lags.push(k);
                continue;
            }
            let sum: f64 = bin
                .iter()
                .map(|&(a, b)| {
                    let (a, b) = (a as usize, b as usize);
                    (values_i[a] - values_i[b]) * (values_j[a] - values_j[b])
                })
                .sum();
            lags.push(Lag {
                center: self.centers[k],
                gamma: sum / (2.0 * bin.len() as f64),
                pairs: bin.len(),
            });
        }
        Ok(ExperimentalVariogram {
            lag_width: self.lag_width,
            lags,
            empty_lags,
            pair,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lag {
    /// Mean separation of the pairs in the bin.
    pub center: f64,
    pub gamma: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentalVariogram {
    pub lag_width: f64,
    /// Non-empty lags in increasing order.
    pub lags: Vec<Lag>,
    /// Indices of bins that received no pairs.
    pub empty_lags: Vec<usize>,
    pub pair: (usize, usize),
}

impl ExperimentalVariogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lag,gamma,pairs\n");
        for l in &self.lags {
            let _ = writeln!(out, "{:.17e},{:.17e},{}", l.center, l.gamma, l.pairs);
        }
        out
    }
}

pub fn experimental_variogram(
    locations: &[Point],
    values_i: &[f64],
    values_j: &[f64],
    lag_width: f64,
    n_lags: usize,
) -> Result<ExperimentalVariogram> {
    if values_i.len() != locations.len() {
        return Err(Error::DimensionMismatch {
            expected: locations.len(),
            found: values_i.len(),
        });
    }
    LagPairs::new(locations, lag_width, n_lags)?.estimate(values_i, values_j, (0, 0))
}

struct FitData {
    h: Vec<f64>,
    gamma: Vec<f64>,
    w: Vec<f64>,
}

/// Best non-negative `(nugget, sill)` at fixed range and its weighted
/// squared residual.
fn solve_linear(data: &FitData, range: f64) -> (f64, f64, f64) {
    let f: Vec<f64> = data.h.iter().map(|h| 1.0 - (-3.0 * h / range).exp()).collect();
    let (mut s00, mut s01, mut s11, mut b0, mut b1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..f.len() {
        let w = data.w[k];
        s00 += w;
        s01 += w * f[k];
        s11 += w * f[k] * f[k];
        b0 += w * data.gamma[k];
        b1 += w * data.gamma[k] * f[k];
    }
    let residual = |c0: f64, c1: f64| -> f64 {
        (0..f.len())
            .map(|k| data.w[k] * (data.gamma[k] - c0 - c1 * f[k]).powi(2))
            .sum()
    };
    let mut candidates = vec![((b0 / s00).max(0.0), 0.0)];
    if s11 > 0.0 {
        candidates.push((0.0, (b1 / s11).max(0.0)));
    }
    let det = s00 * s11 - s01 * s01;
    if det > 1e-12 * s00 * s11 {
        let c0 = (b0 * s11 - b1 * s01) / det;
        let c1 = (s00 * b1 - s01 * b0) / det;
        if c0 >= 0.0 && c1 >= 0.0 {
            candidates.push((c0, c1));
        }
    }
    candidates
        .into_iter()
        .map(|(c0, c1)| (c0, c1, residual(c0, c1)))
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .expect("at least one candidate")
}

/// Weighted least-squares fit of `nugget + sill·(1 - exp(-3h/range))` with
/// weights `pairs / h²`.
///
/// The linear parameters are solved exactly for each range, and the range is
/// found by a log-spaced scan refined with golden-section search.
pub fn fit_exponential(ev: &ExperimentalVariogram) -> Result<VariogramModel> {
    let lags: Vec<&Lag> = ev.lags.iter().filter(|l| l.pairs > 0 && l.center > 0.0).collect();
    if lags.len() < 3 {
        return Err(Error::FitFailed {
            message: format!("need at least 3 non-empty lags, got {}", lags.len()),
            residual: f64::NAN,
        });
    }
    let total_pairs: f64 = lags.iter().map(|l| l.pairs as f64).sum();
    let data = FitData {
        h: lags.iter().map(|l| l.center).collect(),
        gamma: lags.iter().map(|l| l.gamma).collect(),
        w: lags
            .iter()
            .map(|l| l.pairs as f64 / total_pairs / (l.center * l.center))
            .collect(),
    };
    let h_min = data.h.iter().copied().fold(f64::INFINITY, f64::min);
    let h_max = data.h.iter().copied().fold(0.0, f64::max);
    let lo = (h_min * 0.1).ln();
    let hi = (h_max * 10.0).ln();
    let objective = |t: f64| solve_linear(&data, t.exp()).2;

    const SCAN: usize = 80;
    let step = (hi - lo) / SCAN as f64;
    let mut best = (0, f64::INFINITY);
    for s in 0..=SCAN {
        let r = objective(lo + s as f64 * step);
        // strict comparison keeps the smallest range on ties
        if r < best.1 {
            best = (s, r);
        }
    }
    let mut a = lo + (best.0.saturating_sub(1)) as f64 * step;
    let mut b = lo + ((best.0 + 1).min(SCAN)) as f64 * step;
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    for _ in 0..100 {
        if b - a < 1e-10 {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = objective(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = objective(x2);
        }
    }
    let refined = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    let t = if refined.1 <= best.1 { refined.0 } else { lo + best.0 as f64 * step };
    let range = t.exp();
    let (nugget, sill, residual) = solve_linear(&data, range);
    if !residual.is_finite() || !(nugget + sill > 0.0) {
        return Err(Error::FitFailed {
            message: "degenerate fit".into(),
            residual,
        });
    }
    VariogramModel::exponential(nugget, range, sill).map_err(|e| Error::FitFailed {
        message: e.to_string(),
        residual,
    })
}

/// Weighted residual of `model` against `ev` with the fitting weights.
pub fn fit_residual(ev: &ExperimentalVariogram, model: &VariogramModel) -> f64 {
    let lags: Vec<&Lag> = ev.lags.iter().filter(|l| l.pairs > 0 && l.center > 0.0).collect();
    let total: f64 = lags.iter().map(|l| l.pairs as f64).sum();
    lags.iter()
        .map(|l| l.pairs as f64 / total / (l.center * l.center) * (l.gamma - model.gamma(l.center)).powi(2))
        .sum()
}
