//! Turning-bands simulation of the factors, conditioning by kriging of
//! residuals, interpolation of the correlation field and the end-to-end
//! simulation pipeline.

use std::time::{Duration, Instant};

use log::{info, warn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kriging::ordinary_kriging_weights;
use crate::local_model::{cholesky, infer_all, infer_global, recorrelate, InferenceConfig, LocalModel};
use crate::manifold::{corr_frechet_mean_from, CorrMatrix, SolverConfig};
use crate::neighborhood::{Point, SpatialIndex};
use crate::samples::SampleSet;
use crate::seeding;
use crate::transform::{alr_forward, alr_inverse, normal_scores, AnamorphosisTable, Composition};
use crate::variogram::{fit_exponential, Lag, LagPairs, StructureKind, VariogramModel, ExperimentalVariogram};

/// Regular 3D lattice; node `(ix, iy, iz)` sits at `origin + i·spacing` and
/// nodes are numbered with `x` fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub counts: [usize; 3],
}

impl Grid {
    pub fn new(origin: [f64; 3], spacing: [f64; 3], counts: [usize; 3]) -> Result<Self> {
        let g = Grid {
            origin,
            spacing,
            counts,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput("grid spacing must be positive".into()));
        }
        if self.counts.contains(&0) {
            return Err(Error::InvalidInput("grid counts must be positive".into()));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid origin"));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.counts[0] * (iy + self.counts[1] * iz)
    }

    pub fn node(&self, idx: usize) -> Point {
        let ix = idx % self.counts[0];
        let iy = (idx / self.counts[0]) % self.counts[1];
        let iz = idx / (self.counts[0] * self.counts[1]);
        [
            self.origin[0] + ix as f64 * self.spacing[0],
            self.origin[1] + iy as f64 * self.spacing[1],
            self.origin[2] + iz as f64 * self.spacing[2],
        ]
    }

    pub fn nodes(&self) -> Vec<Point> {
        (0..self.n_nodes()).map(|i| self.node(i)).collect()
    }

    /// Index of the node nearest to `u`, clamped into the grid.
    pub fn nearest(&self, u: &Point) -> usize {
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let t = ((u[a] - self.origin[a]) / self.spacing[a]).round();
            ijk[a] = t.clamp(0.0, (self.counts[a] - 1) as f64) as usize;
        }
        self.index(ijk[0], ijk[1], ijk[2])
    }
}

/// Conditioning and interpolation search: nearest samples within a radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchParams {
    pub radius: f64,
    pub max_samples: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            radius: 100.0,
            max_samples: 25,
        }
    }
}

const MIN_LINES: usize = 100;
const UNIT_SILL_TOL: f64 = 1e-6;
const NUGGET_KEY: u64 = u64::MAX;

struct Lines {
    amplitude: f64,
    /// `(ωx, ωy, ωz, phase)` per line.
    waves: Vec<[f64; 4]>,
}

fn unit_vector_scaled(rng: &mut impl Rng, scale: f64) -> [f64; 3] {
    let z: [f64; 3] = [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ];
    [z[0] * scale, z[1] * scale, z[2] * scale]
}

fn draw_lines(model: &VariogramModel, n_lines: usize, seed: u64, keys: &[u64]) -> Result<Vec<Lines>> {
    let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
    let mut out = Vec::with_capacity(model.structures.len());
    for (s_idx, s) in model.structures.iter().enumerate() {
        if s.sill == 0.0 {
            continue;
        }
        let mut waves = Vec::with_capacity(n_lines);
        for line in 0..n_lines {
            let mut k = keys.to_vec();
            k.extend([s_idx as u64, line as u64]);
            let mut rng = seeding::stream(seed, &k);
            let w = match s.kind {
                // spectral measure of exp(-3h/a) is multivariate Cauchy
                StructureKind::Exponential => {
                    let b = s.range / 3.0;
                    let mut chi: f64 = rng.sample(StandardNormal);
                    while chi == 0.0 {
                        chi = rng.sample(StandardNormal);
                    }
                    unit_vector_scaled(&mut rng, 1.0 / (b * chi.abs()))
                }
                StructureKind::Gaussian => unit_vector_scaled(&mut rng, 6f64.sqrt() / s.range),
                StructureKind::Spherical => return Err(Error::UnsupportedStructure("spherical")),
            };
            waves.push([w[0], w[1], w[2], phase.sample(&mut rng)]);
        }
        out.push(Lines {
            amplitude: (s.sill * 2.0 / n_lines as f64).sqrt(),
            waves,
        });
    }
    Ok(out)
}

fn check_unit_sill(model: &VariogramModel) -> Result<()> {
    model.validate()?;
    if (model.total_sill() - 1.0).abs() > UNIT_SILL_TOL {
        return Err(Error::InvalidInput(format!(
            "simulation needs a unit total sill, got {}",
            model.total_sill()
        )));
    }
    Ok(())
}

/// Unconditional zero-mean, unit-variance Gaussian field at `points`.
///
/// Each structure is the sum of `n_lines` random cosine waves whose
/// frequencies are drawn from the structure's spectral measure, which is the
/// turning-bands construction with one spectral line process per direction.
/// The nugget adds white noise. The stream for line `l` of structure `s` is
/// keyed by `(seed, keys…, s, l)`.
pub fn turning_bands_at(
    model: &VariogramModel,
    points: &[Point],
    n_lines: usize,
    seed: u64,
    keys: &[u64],
) -> Result<Vec<f64>> {
    check_unit_sill(model)?;
    if n_lines < MIN_LINES {
        return Err(Error::InvalidInput(format!(
            "turning bands needs at least {MIN_LINES} lines, got {n_lines}"
        )));
    }
    let structures = draw_lines(model, n_lines, seed, keys)?;
    let mut field: Vec<f64> = points
        .par_iter()
        .map(|x| {
            structures
                .iter()
                .map(|lines| {
                    let sum: f64 = lines
                        .waves
                        .iter()
                        .map(|w| (w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + w[3]).cos())
                        .sum();
                    lines.amplitude * sum
                })
                .sum()
        })
        .collect();
    if model.nugget > 0.0 {
        let mut k = keys.to_vec();
        k.push(NUGGET_KEY);
        let mut rng = seeding::stream(seed, &k);
        let scale = model.nugget.sqrt();
        for v in field.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += scale * e;
        }
    }
    Ok(field)
}

/// Unconditional field on every grid node.
pub fn turning_bands(model: &VariogramModel, grid: &Grid, n_lines: usize, seed: u64) -> Result<Vec<f64>> {
    grid.validate()?;
    turning_bands_at(model, &grid.nodes(), n_lines, seed, &[])
}

/// Kriging neighbourhood of one target: data ids (nearest first) and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeKriging {
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Ordinary kriging weights for every target; `None` where no datum lies
/// within the search radius.
pub fn plan_kriging(
    model: &VariogramModel,
    data: &SpatialIndex,
    targets: &[Point],
    search: &SearchParams,
) -> Result<Vec<Option<NodeKriging>>> {
    targets
        .par_iter()
        .map(|t| {
            let found = data.within(t, search.radius, search.max_samples);
            if found.is_empty() {
                return Ok(None);
            }
            let ids: Vec<usize> = found.iter().map(|n| n.id).collect();
            let points: Vec<Point> = ids.iter().map(|&i| data.location(i)).collect();
            let w = ordinary_kriging_weights(model, &points, t)?;
            Ok(Some(NodeKriging {
                ids,
                weights: w.weights,
            }))
        })
        .collect()
}

/// Conditions an unconditional field by kriging its residuals at the data:
/// `y_c(u) = y_uc(u) + Σ λᵢ (dᵢ - y_uc(uᵢ))`. Targets without data in reach
/// keep their unconditional value.
pub fn condition(
    unconditional: &[f64],
    unconditional_at_data: &[f64],
    data: &[f64],
    plan: &[Option<NodeKriging>],
) -> Result<Vec<f64>> {
    if unconditional.len() != plan.len() {
        return Err(Error::DimensionMismatch {
            expected: plan.len(),
            found: unconditional.len(),
        });
    }
    if unconditional_at_data.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            found: unconditional_at_data.len(),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conditioning data"));
    }
    Ok(unconditional
        .iter()
        .zip(plan)
        .map(|(&uc, node)| match node {
            None => uc,
            Some(k) => {
                uc + k
                    .ids
                    .iter()
                    .zip(&k.weights)
                    .map(|(&i, w)| w * (data[i] - unconditional_at_data[i]))
                    .sum::<f64>()
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Estimated,
    /// The Fréchet mean failed; the matrix of the nearest estimated node is used.
    Fallback,
    /// No sample within the search radius.
    Masked,
}

/// Interpolated correlation matrix per target node.
#[derive(Debug, Clone)]
pub struct CorrelationField {
    pub matrices: Vec<Option<CorrMatrix>>,
    pub residuals: Vec<f64>,
    pub status: Vec<NodeStatus>,
}

impl CorrelationField {
    pub fn count(&self, status: NodeStatus) -> usize {
        self.status.iter().filter(|s| **s == status).count()
    }
}

/// Weighted Fréchet mean of the neighbouring local correlation matrices at
/// every target, warm-started from the nearest neighbour's matrix.
pub fn interpolate_correlation_field(
    models: &[LocalModel],
    targets: &[Point],
    plan: &[Option<NodeKriging>],
    cfg: &SolverConfig,
) -> Result<CorrelationField> {
    if models.is_empty() {
        return Err(Error::Empty("local models"));
    }
    if plan.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            found: plan.len(),
        });
    }
    cfg.validate()?;
    let solved: Vec<(Option<CorrMatrix>, f64, NodeStatus)> = plan
        .par_iter()
        .map(|node| {
            let Some(k) = node else {
                return (None, 0.0, NodeStatus::Masked);
            };
            let first = &models[k.ids[0]].correlation;
            if k.ids.iter().all(|&i| models[i].correlation == *first) {
                return (Some(first.clone()), 0.0, NodeStatus::Estimated);
            }
            let mats: Vec<CorrMatrix> = k.ids.iter().map(|&i| models[i].correlation.clone()).collect();
            match corr_frechet_mean_from(&mats, &k.weights, first, cfg) {
                Ok(mean) => (Some(mean.matrix), mean.residual, NodeStatus::Estimated),
                Err(e) => {
                    let residual = match e {
                        Error::NoConvergence { residual, .. } => residual,
                        _ => f64::NAN,
                    };
                    (None, residual, NodeStatus::Fallback)
                }
            }
        })
        .collect();
    let mut matrices = Vec::with_capacity(solved.len());
    let mut residuals = Vec::with_capacity(solved.len());
    let mut status = Vec::with_capacity(solved.len());
    for (m, r, s) in solved {
        matrices.push(m);
        residuals.push(r);
        status.push(s);
    }
    let failed: Vec<usize> = (0..status.len()).filter(|&i| status[i] == NodeStatus::Fallback).collect();
    if !failed.is_empty() {
        warn!("{} nodes failed to converge; using nearest converged node", failed.len());
        let good: Vec<usize> = (0..status.len()).filter(|&i| status[i] == NodeStatus::Estimated).collect();
        if good.is_empty() {
            return Err(Error::InvalidInput(
                "correlation interpolation failed at every node".into(),
            ));
        }
        let good_points: Vec<Point> = good.iter().map(|&i| targets[i]).collect();
        let index = SpatialIndex::build(&good_points)?;
        for i in failed {
            let nearest = good[index.knn(&targets[i], 1).items[0].id];
            matrices[i] = matrices[nearest].clone();
        }
    }
    Ok(CorrelationField {
        matrices,
        residuals,
        status,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    /// Locally varying correlation (one neighbourhood per sample).
    #[default]
    Local,
    /// One global correlation matrix and global tables: the classical LMC.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariogramConfig {
    pub lag_width: f64,
    pub n_lags: usize,
    /// Fixed factor model; fitted from the factors when absent.
    pub model: Option<VariogramModel>,
}

impl Default for VariogramConfig {
    fn default() -> Self {
        VariogramConfig {
            lag_width: 5.0,
            n_lags: 20,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub realizations: usize,
    pub lines: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            realizations: 10,
            lines: 1200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlrConfig {
    pub closure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub correlation: CorrelationMode,
    pub inference: InferenceConfig,
    pub variogram: VariogramConfig,
    pub search: SearchParams,
    pub simulation: SimulationConfig,
    pub solver: SolverConfig,
    pub alr: Option<AlrConfig>,
}

const STAGE_INFERENCE: u64 = 1;
const STAGE_SIMULATION: u64 = 2;
const STAGE_BACK_TRANSFORM: u64 = 3;

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.inference.neighbors < 2 {
            return Err(Error::Config("inference.neighbors must be at least 2".into()));
        }
        if !(self.search.radius > 0.0) || self.search.max_samples == 0 {
            return Err(Error::Config("search radius and max_samples must be positive".into()));
        }
        if self.simulation.lines < MIN_LINES {
            return Err(Error::Config(format!("simulation.lines must be at least {MIN_LINES}")));
        }
        if let Some(m) = &self.variogram.model {
            check_unit_sill(m).map_err(|e| Error::Config(format!("variogram.model: {e}")))?;
        }
        if let Some(a) = &self.alr {
            if !(a.closure > 0.0) {
                return Err(Error::Config("alr.closure must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn inference_seed(&self) -> u64 {
        seeding::derive(self.seed, &[STAGE_INFERENCE])
    }

    pub fn simulation_seed(&self) -> u64 {
        seeding::derive(self.seed, &[STAGE_SIMULATION])
    }
}

/// Applies the additive log-ratio transform to compositional samples whose
/// columns are all parts except the closing remainder.
pub fn alr_samples(samples: &SampleSet, closure: f64) -> Result<SampleSet> {
    let p = samples.dim();
    let mut columns = vec![Vec::with_capacity(samples.len()); p];
    for i in 0..samples.len() {
        let c = Composition::with_rest(&samples.row(i), closure)
            .map_err(|e| Error::InvalidInput(format!("sample {i}: {e}")))?;
        for (col, v) in columns.iter_mut().zip(alr_forward(&c)) {
            col.push(v);
        }
    }
    let names = samples.names().iter().map(|n| format!("alr_{n}")).collect();
    SampleSet::new(samples.locations().to_vec(), columns, names)
}

/// Factor variogram shared by all factors and its diagnostics.
#[derive(Debug, Clone)]
pub struct FactorVariography {
    /// Unit-sill model used for simulation.
    pub model: VariogramModel,
    /// Fit before standardization, if the model was fitted.
    pub fitted: Option<VariogramModel>,
    /// Experimental direct variogram of each factor.
    pub experimental: Vec<ExperimentalVariogram>,
    /// Pooled experimental variogram the fit was made to.
    pub pooled: Option<ExperimentalVariogram>,
    /// Sample variance of each factor at the data.
    pub factor_variance: Vec<f64>,
}

/// Direct variograms of the sample factors and the single pooled
/// exponential model, standardized to unit sill.
pub fn factor_variography(
    locations: &[Point],
    factors: &[Vec<f64>],
    cfg: &VariogramConfig,
) -> Result<FactorVariography> {
    let pairs = LagPairs::new(locations, cfg.lag_width, cfg.n_lags)?;
    let experimental: Vec<ExperimentalVariogram> = factors
        .iter()
        .enumerate()
        .map(|(f, v)| pairs.estimate(v, v, (f, f)))
        .collect::<Result<_>>()?;
    let factor_variance = factors
        .iter()
        .map(|v| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
        })
        .collect();
    if let Some(m) = &cfg.model {
        check_unit_sill(m)?;
        return Ok(FactorVariography {
            model: m.clone(),
            fitted: None,
            experimental,
            pooled: None,
            factor_variance,
        });
    }
    let first = &experimental[0];
    let lags: Vec<Lag> = first
        .lags
        .iter()
        .enumerate()
        .map(|(k, lag)| Lag {
            gamma: experimental.iter().map(|e| e.lags[k].gamma).sum::<f64>() / experimental.len() as f64,
            ..*lag
        })
        .collect();
    let pooled = ExperimentalVariogram {
        lags,
        ..first.clone()
    };
    let fitted = fit_exponential(&pooled)?;
    Ok(FactorVariography {
        model: fitted.standardized(),
        fitted: Some(fitted),
        experimental,
        pooled: Some(pooled),
        factor_variance,
    })
}

/// Values at every target for one realization, stored node-major with a
/// stride equal to the number of variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub index: usize,
    /// Conditioned factors `ỹ(u)`, stride `p`.
    pub factors: Vec<f64>,
    /// Recorrelated Gaussians `y(u) = L̂(u) ỹ(u)`, stride `p`.
    pub gaussian: Vec<f64>,
    /// Back-transformed values, stride `n_outputs` (`p + 1` with alr).
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct StageTimings {
    pub entries: Vec<(&'static str, Duration)>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub targets: Vec<Point>,
    pub local_models: Vec<LocalModel>,
    pub variography: FactorVariography,
    pub field: CorrelationField,
    pub realizations: Vec<Realization>,
    /// Number of values per node in `Realization::values`.
    pub n_outputs: usize,
    pub output_names: Vec<String>,
    pub timings: StageTimings,
}

impl PipelineOutput {
    pub fn masked(&self, node: usize) -> bool {
        self.field.status[node] == NodeStatus::Masked
    }

    /// Mean over realizations of each output value; `NaN` at masked nodes.
    pub fn mean_values(&self) -> Vec<f64> {
        let len = self.targets.len() * self.n_outputs;
        let mut mean = vec![0.0; len];
        for r in &self.realizations {
            for (m, v) in mean.iter_mut().zip(&r.values) {
                *m += v;
            }
        }
        let n = self.realizations.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

fn timed<T>(timings: &mut StageTimings, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    let elapsed = start.elapsed();
    info!("stage {stage} finished in {:.3}s", elapsed.as_secs_f64());
    timings.entries.push((stage, elapsed));
    Ok(out)
}

/// Back-transform tables for one node, built from its nearest samples.
fn node_tables(samples: &SampleSet, ids: &[usize], seed: u64, cfg: &InferenceConfig) -> Result<Vec<AnamorphosisTable>> {
    (0..samples.dim())
        .map(|var| {
            let values: Vec<f64> = ids.iter().map(|&i| samples.value(i, var)).collect();
            let var_seed = seeding::derive(seed, &[var as u64]);
            normal_scores(&values, var_seed, &cfg.tails).map(|(t, _)| t)
        })
        .collect()
}

/// Factors simulated at the targets and conditioned to the sample factors.
pub fn simulate_factors(
    model: &VariogramModel,
    sample_locations: &[Point],
    sample_factors: &[Vec<f64>],
    targets: &[Point],
    plan: &[Option<NodeKriging>],
    n_lines: usize,
    seed: u64,
    realization: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut points = Vec::with_capacity(sample_locations.len() + targets.len());
    points.extend_from_slice(sample_locations);
    points.extend_from_slice(targets);
    sample_factors
        .iter()
        .enumerate()
        .map(|(f, data)| {
            let uc = turning_bands_at(model, &points, n_lines, seed, &[realization as u64, f as u64])?;
            let (at_data, at_targets) = uc.split_at(sample_locations.len());
            condition(at_targets, at_data, data, plan)
        })
        .collect()
}

/// Runs the full workflow: optional alr, local inference, factor
/// variography, conditional turning-bands simulation of the factors,
/// correlation-field interpolation, recorrelation and local
/// back-transformation at every target.
pub fn run_pipeline(samples: &SampleSet, targets: &[Point], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::Empty("simulation targets"));
    }
    let mut timings = StageTimings::default();
    let raw_p = samples.dim();
    let transformed = match &cfg.alr {
        Some(a) => Some(timed(&mut timings, "alr", || alr_samples(samples, a.closure))?),
        None => None,
    };
    let working = transformed.as_ref().unwrap_or(samples);
    let p = working.dim();
    let index = SpatialIndex::build(working.locations()).map_err(|e| e.in_stage("index"))?;

    let local_models = timed(&mut timings, "inference", || match cfg.correlation {
        CorrelationMode::Local => infer_all(working, &index, &cfg.inference, cfg.inference_seed()),
        CorrelationMode::Global => infer_global(working, &cfg.inference, cfg.inference_seed()),
    })?;
    let sample_factors: Vec<Vec<f64>> = (0..p)
        .map(|f| local_models.iter().map(|m| m.factors[f]).collect())
        .collect();

    let variography = timed(&mut timings, "variogram", || {
        factor_variography(working.locations(), &sample_factors, &cfg.variogram)
    })?;
    for (f, v) in variography.factor_variance.iter().enumerate() {
        if (v - 1.0).abs() > 0.1 {
            warn!("factor {} has sample variance {v:.3}; simulating with a unit-sill model", f + 1);
        }
    }
    let model = &variography.model;

    let plan = timed(&mut timings, "kriging", || plan_kriging(model, &index, targets, &cfg.search))?;
    let field = timed(&mut timings, "correlation", || {
        interpolate_correlation_field(&local_models, targets, &plan, &cfg.solver)
    })?;
    let factors_at_nodes = field
        .matrices
        .iter()
        .map(|m| m.as_ref().map(cholesky).transpose())
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("correlation"))?;

    let sim_seed = cfg.simulation_seed();
    let simulated = timed(&mut timings, "simulation", || {
        (0..cfg.simulation.realizations)
            .into_par_iter()
            .map(|r| {
                let factors = simulate_factors(
                    model,
                    working.locations(),
                    &sample_factors,
                    targets,
                    &plan,
                    cfg.simulation.lines,
                    sim_seed,
                    r,
                )?;
                let mut flat_f = vec![f64::NAN; targets.len() * p];
                let mut flat_y = vec![f64::NAN; targets.len() * p];
                for (node, l) in factors_at_nodes.iter().enumerate() {
                    let Some(l) = l else { continue };
                    let f: Vec<f64> = (0..p).map(|k| factors[k][node]).collect();
                    let y = recorrelate(&f, l);
                    flat_f[node * p..(node + 1) * p].copy_from_slice(&f);
                    flat_y[node * p..(node + 1) * p].copy_from_slice(&y);
                }
                Ok((flat_f, flat_y))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let n_outputs = if cfg.alr.is_some() { raw_p + 1 } else { raw_p };
    let back_seed = seeding::derive(cfg.seed, &[STAGE_BACK_TRANSFORM]);
    let global_tables = match cfg.correlation {
        CorrelationMode::Global => {
            let all: Vec<usize> = (0..working.len()).collect();
            Some(node_tables(working, &all, back_seed, &cfg.inference).map_err(|e| e.in_stage("back-transform"))?)
        }
        CorrelationMode::Local => None,
    };
    let k = cfg.inference.neighbors.min(working.len());
    let n_real = simulated.len();
    let per_node: Vec<Vec<f64>> = timed(&mut timings, "back-transform", || {
        (0..targets.len())
            .into_par_iter()
            .map(|node| {
                let mut out = vec![f64::NAN; n_real * n_outputs];
                if factors_at_nodes[node].is_none() {
                    return Ok(out);
                }
                let local;
                let tables = match &global_tables {
                    Some(t) => t,
                    None => {
                        let ids: Vec<usize> = index.knn(&targets[node], k).items.iter().map(|n| n.id).collect();
                        local = node_tables(working, &ids, seeding::derive(back_seed, &[node as u64]), &cfg.inference)?;
                        &local
                    }
                };
                for (r, (_, y)) in simulated.iter().enumerate() {
                    let z: Vec<f64> = (0..p)
                        .map(|v| tables[v].back_transform(y[node * p + v]))
                        .collect::<Result<_>>()?;
                    let slot = &mut out[r * n_outputs..(r + 1) * n_outputs];
                    match &cfg.alr {
                        Some(a) => slot.copy_from_slice(alr_inverse(&z, a.closure)?.parts()),
                        None => slot.copy_from_slice(&z),
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let realizations = simulated
        .into_iter()
        .enumerate()
        .map(|(r, (factors, gaussian))| {
            let mut values = vec![f64::NAN; targets.len() * n_outputs];
            for (node, vals) in per_node.iter().enumerate() {
                values[node * n_outputs..(node + 1) * n_outputs]
                    .copy_from_slice(&vals[r * n_outputs..(r + 1) * n_outputs]);
            }
            Realization {
                index: r,
                factors,
                gaussian,
                values,
            }
        })
        .collect();

    let mut output_names = samples.names().to_vec();
    if cfg.alr.is_some() {
        output_names.push("rest".into());
    }
    info!(
        "correlation field: {} estimated, {} fallback, {} masked",
        field.count(NodeStatus::Estimated),
        field.count(NodeStatus::Fallback),
        field.count(NodeStatus::Masked)
    );
    Ok(PipelineOutput {
        targets: targets.to_vec(),
        local_models,
        variography,
        field,
        realizations,
        n_outputs,
        output_names,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_model() -> VariogramModel {
        VariogramModel::exponential(0.0, 20.0, 1.0).unwrap()
    }

    #[test]
    fn grid_numbering() {
        let g = Grid::new([1.0, 2.0, 3.0], [1.0, 2.0, 0.5], [3, 2, 2]).unwrap();
        assert_eq!(g.n_nodes(), 12);
        assert_eq!(g.node(0), [1.0, 2.0, 3.0]);
        assert_eq!(g.node(1), [2.0, 2.0, 3.0]);
        assert_eq!(g.node(3), [1.0, 4.0, 3.0]);
        assert_eq!(g.node(6), [1.0, 2.0, 3.5]);
        assert_eq!(g.nearest(&[2.2, 3.9, 100.0]), g.index(1, 1, 1));
        assert!(Grid::new([0.0; 3], [0.0, 1.0, 1.0], [1, 1, 1]).is_err());
    }

    #[test]
    fn turning_bands_is_deterministic() {
        let g = Grid::new([0.0; 3], [1.0; 3], [8, 4, 2]).unwrap();
        let a = turning_bands(&unit_model(), &g, 200, 5).unwrap();
        let b = turning_bands(&unit_model(), &g, 200, 5).unwrap();
        let c = turning_bands(&unit_model(), &g, 200, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn turning_bands_rejects_bad_models() {
        let g = Grid::new([0.0; 3], [1.0; 3], [2, 2, 2]).unwrap();
        let sph = VariogramModel::new(
            0.0,
            vec![crate::variogram::Structure {
                kind: StructureKind::Spherical,
                range: 10.0,
                sill: 1.0,
            }],
        )
        .unwrap();
        assert!(matches!(turning_bands(&sph, &g, 200, 1), Err(Error::UnsupportedStructure(_))));
        let two = VariogramModel::exponential(0.0, 10.0, 2.0).unwrap();
        assert!(turning_bands(&two, &g, 200, 1).is_err());
        assert!(turning_bands(&unit_model(), &g, 10, 1).is_err());
    }

    #[test]
    fn conditioning_is_exact_and_local() {
        let data_locs = vec![[0.0; 3], [10.0, 0.0, 0.0]];
        let index = SpatialIndex::build(&data_locs).unwrap();
        let targets = vec![[0.0; 3], [5.0, 0.0, 0.0], [500.0, 0.0, 0.0]];
        let plan = plan_kriging(&unit_model(), &index, &targets, &SearchParams::default()).unwrap();
        assert!(plan[2].is_none());
        let out = condition(&[0.3, -0.2, 0.7], &[1.0, 2.0], &[1.5, -1.0], &plan).unwrap();
        assert!((out[0] - (0.3 + 0.5)).abs() < 1e-12);
        assert_eq!(out[2], 0.7);
    }
}
