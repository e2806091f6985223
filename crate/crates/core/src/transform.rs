//! Normal-score anamorphosis, the Nataf coupled CDF and additive log-ratio
//! transforms.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::local_model::cholesky;
use crate::manifold::CorrMatrix;

/// Relative magnitude of the despiking noise added to tied values.
pub const DESPIKE_SCALE: f64 = 1e-9;
const NATAF_QMC_POINTS: usize = 100_000;

fn std_normal() -> Normal {
    Normal::standard()
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpperTail {
    /// `z = lb + (z_max - lb) · ((1 - p_max) / (1 - p))^{1/ω}`, capped at the
    /// upper bound.
    Hyperbolic,
    /// `z = z_max + (ub - z_max) · ((p - p_max) / (1 - p_max))^ω`.
    Power,
}

/// Tail extrapolation settings. Unset bounds are derived from the data range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailOptions {
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
    pub exponent: f64,
    pub upper_tail: UpperTail,
}

impl Default for TailOptions {
    fn default() -> Self {
        TailOptions {
            lower_bound: None,
            upper_bound: None,
            exponent: 1.5,
            upper_tail: UpperTail::Hyperbolic,
        }
    }
}

/// Resolved tail parameters stored with a table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailModel {
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub exponent: f64,
    pub upper_tail: UpperTail,
}

/// Paired quantiles `(raw, gaussian)` realizing `φ⁻¹` by interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnamorphosisTable {
    raw: Vec<f64>,
    gaussian: Vec<f64>,
    tails: TailModel,
    seed: u64,
}

/// Breaks ties in `values` by adding seeded uniform noise of magnitude
/// `DESPIKE_SCALE × range` to every member of a tie group.
fn despike(values: &[f64], seed: u64) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(
            "anamorphosis needs at least 2 values".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("anamorphosis input"));
    }
    let (lo, hi) = min_max(values);
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::DegenerateDistribution);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = values.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amplitude = DESPIKE_SCALE * range;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        if end - start > 1 {
            for &idx in &order[start..end] {
                out[idx] += amplitude * (rng.random::<f64>() - 0.5);
            }
        }
        start = end;
    }
    Ok(out)
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Normal scores of `values` in input order together with the table built
/// from them. Scores are `G⁻¹((rank - 0.5) / n)` of the despiked ranks.
pub fn normal_scores(
    values: &[f64],
    seed: u64,
    tails: &TailOptions,
) -> Result<(AnamorphosisTable, Vec<f64>)> {
    let despiked = despike(values, seed)?;
    let n = despiked.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| despiked[a].total_cmp(&despiked[b]).then(a.cmp(&b)));
    let mut raw = Vec::with_capacity(n);
    let mut gaussian = Vec::with_capacity(n);
    let mut scores = vec![0.0; n];
    for (rank, &idx) in order.iter().enumerate() {
        let g = normal_quantile((rank as f64 + 0.5) / n as f64);
        raw.push(despiked[idx]);
        gaussian.push(g);
        scores[idx] = g;
    }
    // Despiking noise can in principle collide with a neighbouring value.
    for k in 1..n {
        if !(raw[k] > raw[k - 1]) {
            raw[k] = next_up(raw[k - 1]);
        }
    }
    let (lo, hi) = (raw[0], raw[n - 1]);
    let range = hi - lo;
    let lower_bound = tails.lower_bound.unwrap_or(lo - 0.1 * range).min(lo);
    let upper_bound = tails.upper_bound.unwrap_or(hi + 0.5 * range).max(hi);
    if !(tails.exponent > 0.0) {
        return Err(Error::InvalidInput("tail exponent must be positive".into()));
    }
    let table = AnamorphosisTable {
        raw,
        gaussian,
        tails: TailModel {
            lower_bound,
            upper_bound,
            exponent: tails.exponent,
            upper_tail: tails.upper_tail,
        },
        seed,
    };
    Ok((table, scores))
}

fn next_up(x: f64) -> f64 {
    let bits = x.to_bits();
    if x >= 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

/// Builds a table with the default tail model.
pub fn build_anamorphosis(values: &[f64], seed: u64) -> Result<AnamorphosisTable> {
    normal_scores(values, seed, &TailOptions::default()).map(|(t, _)| t)
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    // xs strictly increasing, xs[0] < x < xs[last]
    let k = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let (y0, y1) = (ys[k - 1], ys[k]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

impl AnamorphosisTable {
    /// Rebuilds a table from stored quantiles (e.g. read back from disk).
    pub fn from_parts(raw: Vec<f64>, gaussian: Vec<f64>, tails: TailModel, seed: u64) -> Result<Self> {
        if raw.len() != gaussian.len() {
            return Err(Error::DimensionMismatch {
                expected: raw.len(),
                found: gaussian.len(),
            });
        }
        if raw.len() < 2 {
            return Err(Error::InvalidInput("table needs at least 2 rows".into()));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !increasing(&raw) || !increasing(&gaussian) {
            return Err(Error::InvalidInput(
                "table columns must be strictly increasing".into(),
            ));
        }
        Ok(AnamorphosisTable {
            raw,
            gaussian,
            tails,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn gaussian(&self) -> &[f64] {
        &self.gaussian
    }

    pub fn tails(&self) -> &TailModel {
        &self.tails
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `φ⁻¹(z)`: piecewise-linear, clamped to the extreme scores outside the
    /// table.
    pub fn gaussianize(&self, z: f64) -> Result<f64> {
        if z.is_nan() {
            return Err(Error::NonFinite("gaussianize input"));
        }
        let n = self.raw.len();
        if z <= self.raw[0] {
            return Ok(self.gaussian[0]);
        }
        if z >= self.raw[n - 1] {
            return Ok(self.gaussian[n - 1]);
        }
        Ok(interpolate(&self.raw, &self.gaussian, z))
    }

    /// `φ(y)`: inverse interpolation with a linear-in-probability lower tail
    /// down to the lower bound and the configured upper tail.
    pub fn back_transform(&self, y: f64) -> Result<f64> {
        if y.is_nan() {
            return Err(Error::NonFinite("back_transform input"));
        }
        let n = self.raw.len();
        let t = &self.tails;
        if y < self.gaussian[0] {
            let ratio = normal_cdf(y) / normal_cdf(self.gaussian[0]);
            return Ok(t.lower_bound + (self.raw[0] - t.lower_bound) * ratio);
        }
        if y > self.gaussian[n - 1] {
            let z_max = self.raw[n - 1];
            // 1 - G(y) evaluated as G(-y) to keep precision in the far tail
            let q = normal_cdf(-y);
            let q_max = normal_cdf(-self.gaussian[n - 1]);
            let z = match t.upper_tail {
                UpperTail::Hyperbolic => {
                    if q <= 0.0 {
                        t.upper_bound
                    } else {
                        t.lower_bound + (z_max - t.lower_bound) * (q_max / q).powf(1.0 / t.exponent)
                    }
                }
                UpperTail::Power => {
                    let frac = ((q_max - q) / q_max).clamp(0.0, 1.0);
                    z_max + (t.upper_bound - z_max) * frac.powf(t.exponent)
                }
            };
            return Ok(z.min(t.upper_bound));
        }
        if y == self.gaussian[n - 1] {
            return Ok(self.raw[n - 1]);
        }
        if y == self.gaussian[0] {
            return Ok(self.raw[0]);
        }
        Ok(interpolate(&self.gaussian, &self.raw, y))
    }

    /// Marginal CDF `F(z)` consistent with the table and its lower tail.
    pub fn marginal_cdf(&self, z: f64) -> Result<f64> {
        if z.is_nan() {
            return Err(Error::NonFinite("cdf input"));
        }
        let n = self.raw.len();
        if z < self.raw[0] {
            let p0 = normal_cdf(self.gaussian[0]);
            let lb = self.tails.lower_bound;
            if z <= lb || self.raw[0] <= lb {
                return Ok(0.0);
            }
            return Ok(p0 * (z - lb) / (self.raw[0] - lb));
        }
        if z >= self.raw[n - 1] {
            return Ok(normal_cdf(self.gaussian[n - 1]).max(if z >= self.tails.upper_bound { 1.0 } else { 0.0 }));
        }
        Ok(normal_cdf(self.gaussianize(z)?))
    }

    /// Two-column text form with a header line carrying the tail model.
    pub fn to_text(&self) -> String {
        let t = &self.tails;
        let mut out = String::new();
        let tail = match t.upper_tail {
            UpperTail::Hyperbolic => "hyperbolic",
            UpperTail::Power => "power",
        };
        let _ = writeln!(
            out,
            "# anamorphosis n={} lower_bound={:.17e} upper_bound={:.17e} exponent={:.17e} upper_tail={} seed={}",
            self.raw.len(),
            t.lower_bound,
            t.upper_bound,
            t.exponent,
            tail,
            self.seed
        );
        out.push_str("raw gaussian\n");
        for (r, g) in self.raw.iter().zip(&self.gaussian) {
            let _ = writeln!(out, "{r:.17e} {g:.17e}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            source_name: "anamorphosis table".into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty input".into()))?;
        let header = header
            .strip_prefix("# anamorphosis")
            .ok_or_else(|| parse_err(1, "missing `# anamorphosis` header".into()))?;
        let mut lower_bound = None;
        let mut upper_bound = None;
        let mut exponent = None;
        let mut upper_tail = None;
        let mut seed = 0;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| parse_err(1, format!("bad header field `{field}`")))?;
            let num = || {
                value
                    .parse::<f64>()
                    .map_err(|e| parse_err(1, format!("{key}: {e}")))
            };
            match key {
                "lower_bound" => lower_bound = Some(num()?),
                "upper_bound" => upper_bound = Some(num()?),
                "exponent" => exponent = Some(num()?),
                "upper_tail" => {
                    upper_tail = Some(match value {
                        "hyperbolic" => UpperTail::Hyperbolic,
                        "power" => UpperTail::Power,
                        other => return Err(parse_err(1, format!("unknown tail `{other}`"))),
                    })
                }
                "seed" => {
                    seed = value
                        .parse()
                        .map_err(|e| parse_err(1, format!("seed: {e}")))?
                }
                _ => {}
            }
        }
        let tails = TailModel {
            lower_bound: lower_bound.ok_or_else(|| parse_err(1, "missing lower_bound".into()))?,
            upper_bound: upper_bound.ok_or_else(|| parse_err(1, "missing upper_bound".into()))?,
            exponent: exponent.ok_or_else(|| parse_err(1, "missing exponent".into()))?,
            upper_tail: upper_tail.ok_or_else(|| parse_err(1, "missing upper_tail".into()))?,
        };
        let mut raw = Vec::new();
        let mut gaussian = Vec::new();
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with("raw") {
                continue;
            }
            let mut cols = line.split_whitespace();
            let mut next = || -> Result<f64> {
                cols.next()
                    .ok_or_else(|| parse_err(idx + 1, "expected two columns".into()))?
                    .parse::<f64>()
                    .map_err(|e| parse_err(idx + 1, e.to_string()))
            };
            raw.push(next()?);
            gaussian.push(next()?);
        }
        Self::from_parts(raw, gaussian, tails, seed)
    }
}

/// Bivariate standard normal CDF `P(X ≤ h, Y ≤ k)` with correlation `rho`.
///
/// Uses `Φ(h)Φ(k) + (1/2π) ∫₀^{asin ρ} exp(-(h² + k² - 2hk sin θ) / (2cos²θ)) dθ`
/// integrated with composite Gauss-Legendre.
pub fn bivariate_normal_cdf(h: f64, k: f64, rho: f64) -> f64 {
    if h == f64::NEG_INFINITY || k == f64::NEG_INFINITY {
        return 0.0;
    }
    if h == f64::INFINITY {
        return normal_cdf(k);
    }
    if k == f64::INFINITY {
        return normal_cdf(h);
    }
    let upper = rho.clamp(-1.0, 1.0).asin();
    let integrand = |theta: f64| {
        let (s, c) = theta.sin_cos();
        let c2 = c * c;
        if c2 <= 0.0 {
            return 0.0;
        }
        (-(h * h + k * k - 2.0 * h * k * s) / (2.0 * c2)).exp()
    };
    let integral = gauss_legendre(integrand, 0.0, upper, 16);
    (normal_cdf(h) * normal_cdf(k) + integral / (2.0 * std::f64::consts::PI)).clamp(0.0, 1.0)
}

/// 10-point Gauss-Legendre on `panels` equal sub-intervals.
fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    const NODES: [f64; 5] = [
        0.148_874_338_981_631_2,
        0.433_395_394_129_247_2,
        0.679_409_568_299_024_4,
        0.865_063_366_688_984_5,
        0.973_906_528_517_171_7,
    ];
    const WEIGHTS: [f64; 5] = [
        0.295_524_224_714_752_9,
        0.269_266_719_309_996_4,
        0.219_086_362_515_982_0,
        0.149_451_349_150_580_6,
        0.066_671_344_308_688_1,
    ];
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let lo = a + i as f64 * width;
        let mid = lo + 0.5 * width;
        let half = 0.5 * width;
        let mut acc = 0.0;
        for (x, w) in NODES.iter().zip(WEIGHTS) {
            acc += w * (f(mid - half * x) + f(mid + half * x));
        }
        total += acc * half;
    }
    total
}

/// Multivariate normal orthant probability `P(Y ≤ b)` for `Y ~ N(0, C)`
/// by sequential conditioning (Genz) over a Richtmyer lattice.
fn mvn_cdf(c: &CorrMatrix, upper: &[f64], points: usize) -> Result<f64> {
    let p = c.dim();
    if upper.contains(&f64::NEG_INFINITY) {
        return Ok(0.0);
    }
    let l = cholesky(c)?;
    const ROOT_PRIMES: [f64; 12] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0];
    let alphas: Vec<f64> = (0..p.saturating_sub(1))
        .map(|i| ROOT_PRIMES[i % ROOT_PRIMES.len()].sqrt().fract())
        .collect();
    let mut total = 0.0;
    let mut y = vec![0.0; p];
    for n in 1..=points {
        let mut f = 1.0;
        for i in 0..p {
            let shift: f64 = (0..i).map(|j| l[(i, j)] * y[j]).sum();
            let e = normal_cdf((upper[i] - shift) / l[(i, i)]);
            f *= e;
            if f == 0.0 {
                break;
            }
            if i + 1 < p {
                let w = (n as f64 * alphas[i]).fract();
                y[i] = normal_quantile((w * e).clamp(1e-300, 1.0 - 1e-16));
            }
        }
        total += f;
    }
    Ok(total / points as f64)
}

/// Coupled CDF `G₀^C(φ₁⁻¹(z₁), …, φ_p⁻¹(z_p))`.
///
/// `p = 1` uses the univariate normal CDF, `p = 2` the bivariate quadrature
/// above, and larger `p` a 10⁵-point quasi-Monte-Carlo estimate intended for
/// diagnostics.
pub fn nataf_cdf(c: Option<&CorrMatrix>, tables: &[AnamorphosisTable], z: &[f64]) -> Result<f64> {
    let p = tables.len();
    if z.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: z.len(),
        });
    }
    if p == 0 {
        return Err(Error::Empty("tables"));
    }
    let scores: Vec<f64> = tables
        .iter()
        .zip(z)
        .map(|(t, &zi)| t.marginal_cdf(zi).map(normal_quantile))
        .collect::<Result<_>>()?;
    match (p, c) {
        (1, _) => Ok(normal_cdf(scores[0])),
        (_, None) => Err(Error::InvalidInput(
            "correlation matrix required for p >= 2".into(),
        )),
        (_, Some(c)) if c.dim() != p => Err(Error::DimensionMismatch {
            expected: p,
            found: c.dim(),
        }),
        (2, Some(c)) => Ok(bivariate_normal_cdf(scores[0], scores[1], c.get(0, 1))),
        (_, Some(c)) => mvn_cdf(c, &scores, NATAF_QMC_POINTS),
    }
}

/// Strictly positive parts with a fixed closure total, the last part being
/// the reference ("Rest") part.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    parts: Vec<f64>,
    closure: f64,
}

impl Composition {
    pub fn new(parts: Vec<f64>, closure: f64) -> Result<Self> {
        if parts.len() < 2 {
            return Err(Error::InvalidInput(
                "composition needs at least 2 parts".into(),
            ));
        }
        if parts.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "composition parts must be positive".into(),
            ));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - closure).abs() > 1e-9 * closure.abs().max(1.0) {
            return Err(Error::InvalidInput(format!(
                "parts sum to {sum}, expected closure {closure}"
            )));
        }
        Ok(Composition { parts, closure })
    }

    /// Closes `parts` by appending the remainder `closure - Σ parts`.
    pub fn with_rest(parts: &[f64], closure: f64) -> Result<Self> {
        let rest = closure - parts.iter().sum::<f64>();
        let mut all = parts.to_vec();
        all.push(rest);
        Self::new(all, closure)
    }

    pub fn parts(&self) -> &[f64] {
        &self.parts
    }

    pub fn closure(&self) -> f64 {
        self.closure
    }
}

/// `(log(c₁ / c_rest), …, log(c_p / c_rest))`
pub fn alr_forward(c: &Composition) -> Vec<f64> {
    let (rest, head) = c.parts.split_last().expect("composition has >= 2 parts");
    head.iter().map(|v| (v / rest).ln()).collect()
}

/// Parts proportional to `(e^{x₁}, …, e^{x_p}, 1)` rescaled to `closure`.
pub fn alr_inverse(x: &[f64], closure: f64) -> Result<Composition> {
    if x.is_empty() {
        return Err(Error::Empty("log-ratio vector"));
    }
    if x.iter().any(|v| !v.is_finite()) || !(closure > 0.0) {
        return Err(Error::Overflow("non-finite log-ratio".into()));
    }
    let shift = x.iter().copied().fold(0.0_f64, f64::max);
    let mut parts: Vec<f64> = x.iter().map(|v| (v - shift).exp()).collect();
    parts.push((-shift).exp());
    let sum: f64 = parts.iter().sum();
    for v in parts.iter_mut() {
        *v *= closure / sum;
    }
    if parts.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Overflow(
            "log-ratio too extreme: a part underflows to zero".into(),
        ));
    }
    // exact closure despite rounding
    let total: f64 = parts.iter().sum();
    let last = parts.len() - 1;
    parts[last] += closure - total;
    if !(parts[last] > 0.0) {
        return Err(Error::Overflow("rest part underflows".into()));
    }
    Composition::new(parts, closure)
}
