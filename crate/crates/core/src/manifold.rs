//! Riemannian geometry of symmetric positive definite matrices under the
//! affine-invariant metric, and of correlation matrices as the quotient
//! `Sym⁺(p) / Diag⁺(p)`.
//!
//! Matrix functions (`Exp`, `Log`, square roots) are evaluated through the
//! symmetric eigendecomposition, so every non-symmetric product such as
//! `V⁻¹W` is replaced by its congruent symmetric form `V^{-1/2} W V^{-1/2}`.
//!
//! Distances between correlation matrices have no closed form. They are
//! obtained by optimizing over the fiber `{D C D : D ∈ Diag⁺(p)}` of one
//! argument with a descent on the Lie group `Diag⁺(p)`, and the weighted
//! Fréchet mean on `Corr(p)` alternates fiber alignment, a tangent-space mean
//! on `Sym⁺(p)` and the projection back onto unit diagonal.

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const EIGEN_FLOOR: f64 = 1e-14;
/// Correlations at least this close to ±1 trigger shrinkage toward identity.
pub const BOUNDARY_MARGIN: f64 = 1e-6;
const WEIGHT_SUM_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 30;

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "matrix is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix entry"));
    }
    Ok(())
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL * max_abs(m).max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// `Q f(Λ) Qᵀ` for a symmetric matrix with eigenpairs `(Λ, Q)`.
fn spectral_apply(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let fl = f(*lambda);
        scaled.column_mut(j).scale_mut(fl);
    }
    symmetrize(&(scaled * q.transpose()))
}

fn eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(m.clone())
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Real symmetric matrix; tangent vectors of `Sym⁺(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        check_symmetric(&m)?;
        Ok(SymMatrix(symmetrize(&m)))
    }

    pub fn zeros(p: usize) -> Self {
        SymMatrix(DMatrix::zeros(p, p))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scale(&self, factor: f64) -> Self {
        SymMatrix(&self.0 * factor)
    }
}

/// Symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    /// Validates symmetry (relative 1e-12) and strict positivity of the
    /// spectrum (smallest eigenvalue above `p · 1e-14 ·` largest).
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        if m.nrows() == 0 {
            return Err(Error::Empty("matrix"));
        }
        check_symmetric(&m)?;
        let m = symmetrize(&m);
        let eig = eigen(&m);
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(lo > m.nrows() as f64 * EIGEN_FLOOR * hi) || hi <= 0.0 {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: lo });
        }
        Ok(SpdMatrix(m))
    }

    pub fn identity(p: usize) -> Self {
        SpdMatrix(DMatrix::identity(p, p))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Congruence `A P Aᵀ`, which preserves positive definiteness for
    /// invertible `A`.
    pub fn congruence(&self, a: &DMatrix<f64>) -> Result<Self> {
        check_dims(self.dim(), a.ncols())?;
        SpdMatrix::new(symmetrize(&(a * &self.0 * a.transpose())))
    }
}

/// Square root and inverse square root of an SPD matrix.
struct RootPair {
    sqrt: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
}

impl RootPair {
    fn of(p: &DMatrix<f64>) -> Result<Self> {
        let eig = eigen(p);
        let lo = eig.eigenvalues.min();
        if !(lo > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: lo });
        }
        Ok(RootPair {
            sqrt: spectral_apply(&eig, f64::sqrt),
            inv_sqrt: spectral_apply(&eig, |l| 1.0 / l.sqrt()),
        })
    }

    /// `P^{1/2} Exp(P^{-1/2} X P^{-1/2}) P^{1/2}`
    fn exp_map(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let inner = symmetrize(&(&self.inv_sqrt * x * &self.inv_sqrt));
        let e = spectral_apply(&eigen(&inner), f64::exp);
        symmetrize(&(&self.sqrt * e * &self.sqrt))
    }

    /// `P^{1/2} Log(P^{-1/2} V P^{-1/2}) P^{1/2}`
    fn log_map(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let inner = symmetrize(&(&self.inv_sqrt * v * &self.inv_sqrt));
        let eig = eigen(&inner);
        let lo = eig.eigenvalues.min();
        if !(lo > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: lo });
        }
        let l = spectral_apply(&eig, f64::ln);
        Ok(symmetrize(&(&self.sqrt * l * &self.sqrt)))
    }
}

/// Correlation matrix: SPD with exact unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix(DMatrix<f64>);

impl CorrMatrix {
    /// Builds a correlation matrix, forcing the diagonal to exactly one.
    ///
    /// Off-diagonal entries must lie in `[-1, 1]`. When any of them is within
    /// [`BOUNDARY_MARGIN`] of ±1 the whole matrix is shrunk toward the identity
    /// by the factor `1 - BOUNDARY_MARGIN` so that `Log` stays well defined.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        let p = m.nrows();
        if p < 2 {
            return Err(Error::InvalidCorrelation(format!(
                "dimension {p} < 2"
            )));
        }
        check_symmetric(&m)?;
        let mut m = symmetrize(&m);
        let mut near_boundary = false;
        for i in 0..p {
            m[(i, i)] = 1.0;
            for j in 0..p {
                if i != j {
                    let r = m[(i, j)];
                    if r.abs() > 1.0 + SYMMETRY_TOL {
                        return Err(Error::InvalidCorrelation(format!(
                            "entry ({i}, {j}) = {r} outside [-1, 1]"
                        )));
                    }
                    if r.abs() >= 1.0 - BOUNDARY_MARGIN {
                        near_boundary = true;
                    }
                }
            }
        }
        if near_boundary {
            for i in 0..p {
                for j in 0..p {
                    if i != j {
                        m[(i, j)] = (m[(i, j)] * (1.0 - BOUNDARY_MARGIN)).clamp(-1.0, 1.0);
                    }
                }
            }
        }
        let spd = SpdMatrix::new(m)?;
        Ok(CorrMatrix(spd.0))
    }

    pub fn identity(p: usize) -> Self {
        CorrMatrix(DMatrix::identity(p, p))
    }

    /// 2×2 correlation matrix with off-diagonal `rho`.
    pub fn bivariate(rho: f64) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]))
    }

    /// Builds from the strict upper triangle in row-major order.
    pub fn from_upper(p: usize, upper: &[f64]) -> Result<Self> {
        if upper.len() != p * (p - 1) / 2 {
            return Err(Error::DimensionMismatch {
                expected: p * (p - 1) / 2,
                found: upper.len(),
            });
        }
        let mut m = DMatrix::identity(p, p);
        let mut it = upper.iter();
        for i in 0..p {
            for j in (i + 1)..p {
                let v = *it.next().expect("length checked");
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self::new(m)
    }

    /// Strict upper triangle in row-major order.
    pub fn upper(&self) -> Vec<f64> {
        let p = self.dim();
        let mut out = Vec::with_capacity(p * (p - 1) / 2);
        for i in 0..p {
            for j in (i + 1)..p {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn to_spd(&self) -> SpdMatrix {
        SpdMatrix(self.0.clone())
    }

    /// Simultaneous row/column permutation `σ C σᵀ`, where `perm[i]` is the
    /// source index of output index `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let p = self.dim();
        check_dims(p, perm.len())?;
        let m = DMatrix::from_fn(p, p, |i, j| self.0[(perm[i], perm[j])]);
        Ok(CorrMatrix(m))
    }
}

/// Diagonal matrix with strictly positive entries, stored as its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveDiagonal(DVector<f64>);

impl PositiveDiagonal {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "diagonal entries must be finite and positive".into(),
            ));
        }
        Ok(PositiveDiagonal(DVector::from_vec(entries)))
    }

    pub fn identity(p: usize) -> Self {
        PositiveDiagonal(DVector::from_element(p, 1.0))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn entries(&self) -> &[f64] {
        self.0.as_slice()
    }

    /// `D M D`
    pub fn act(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = &self.0;
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| d[i] * m[(i, j)] * d[j])
    }
}

/// Tolerances and iteration caps shared by the Fréchet mean solvers and the
/// fiber descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub step_size: f64,
    pub max_iterations: usize,
    pub max_fiber_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-8,
            step_size: 0.1,
            max_iterations: 200,
            max_fiber_iterations: 500,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || !(self.step_size > 0.0) {
            return Err(Error::Config(
                "solver tolerance and step size must be positive".into(),
            ));
        }
        if self.max_iterations == 0 || self.max_fiber_iterations == 0 {
            return Err(Error::Config("solver iteration caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Matrix exponential of a symmetric matrix.
pub fn sym_exp(x: &SymMatrix) -> SpdMatrix {
    SpdMatrix(spectral_apply(&eigen(&x.0), f64::exp))
}

/// Principal matrix logarithm of an SPD matrix.
pub fn sym_log(v: &SpdMatrix) -> Result<SymMatrix> {
    let eig = eigen(&v.0);
    let lo = eig.eigenvalues.min();
    if !(lo > 0.0) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: lo });
    }
    Ok(SymMatrix(spectral_apply(&eig, f64::ln)))
}

/// Riemannian exponential map at `p`.
pub fn spd_exp_map(p: &SpdMatrix, x: &SymMatrix) -> Result<SpdMatrix> {
    check_dims(p.dim(), x.dim())?;
    let roots = RootPair::of(&p.0)?;
    Ok(SpdMatrix(roots.exp_map(&x.0)))
}

/// Riemannian logarithm of `v` at base point `p`.
pub fn spd_log_map(p: &SpdMatrix, v: &SpdMatrix) -> Result<SymMatrix> {
    check_dims(p.dim(), v.dim())?;
    let roots = RootPair::of(&p.0)?;
    Ok(SymMatrix(roots.log_map(&v.0)?))
}

fn squared_log_norm(inner: &DMatrix<f64>) -> Result<f64> {
    let eig = eigen(inner);
    let mut acc = 0.0;
    for &l in eig.eigenvalues.iter() {
        if !(l > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: l });
        }
        acc += l.ln().powi(2);
    }
    Ok(acc)
}

/// Affine-invariant geodesic distance `‖Log(V^{-1/2} W V^{-1/2})‖_F`.
pub fn spd_distance(v: &SpdMatrix, w: &SpdMatrix) -> Result<f64> {
    check_dims(v.dim(), w.dim())?;
    let roots = RootPair::of(&v.0)?;
    let inner = symmetrize(&(&roots.inv_sqrt * &w.0 * &roots.inv_sqrt));
    Ok(squared_log_norm(&inner)?.sqrt())
}

/// Point at time `t` on the geodesic leaving `v` with velocity `x`.
pub fn spd_geodesic(v: &SpdMatrix, x: &SymMatrix, t: f64) -> Result<SpdMatrix> {
    check_dims(v.dim(), x.dim())?;
    let roots = RootPair::of(&v.0)?;
    Ok(SpdMatrix(roots.exp_map(&(&x.0 * t))))
}

/// Norm of a tangent vector `x` at `v` under the affine-invariant metric.
pub fn tangent_norm(v: &SpdMatrix, x: &SymMatrix) -> Result<f64> {
    check_dims(v.dim(), x.dim())?;
    let roots = RootPair::of(&v.0)?;
    Ok((&roots.inv_sqrt * &x.0 * &roots.inv_sqrt).norm())
}

fn check_weights(n: usize, weights: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty("matrices"));
    }
    check_dims(n, weights.len())?;
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("weight"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidInput(format!(
            "weights sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Weighted Fréchet (Karcher) mean on `Sym⁺(p)` by the tangent-space
/// fixed-point iteration, starting from the identity.
pub fn spd_frechet_mean(
    matrices: &[SpdMatrix],
    weights: &[f64],
    cfg: &SolverConfig,
) -> Result<SpdMatrix> {
    cfg.validate()?;
    check_weights(matrices.len(), weights)?;
    let p = matrices[0].dim();
    for m in matrices {
        check_dims(p, m.dim())?;
    }
    let mut current = DMatrix::identity(p, p);
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        let roots = RootPair::of(&current)?;
        let mut mean = DMatrix::zeros(p, p);
        for (m, &w) in matrices.iter().zip(weights) {
            if w != 0.0 {
                mean += roots.log_map(&m.0)? * w;
            }
        }
        residual = mean.norm();
        current = roots.exp_map(&mean);
        if residual < cfg.tolerance {
            return Ok(SpdMatrix(current));
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iterations,
        residual,
        last: Box::new(current),
    })
}

/// Projection `π(Σ) = D_Σ Σ D_Σ` with `D_Σ = (I ∘ Σ)^{-1/2}`.
pub fn corr_project(sigma: &SpdMatrix) -> CorrMatrix {
    CorrMatrix(project_matrix(&sigma.0))
}

fn project_matrix(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let p = sigma.nrows();
    let scale: Vec<f64> = (0..p)
        .map(|i| {
            let d = sigma[(i, i)];
            assert!(d > 0.0, "SPD matrix with non-positive diagonal entry");
            1.0 / d.sqrt()
        })
        .collect();
    let mut out = DMatrix::from_fn(p, p, |i, j| scale[i] * sigma[(i, j)] * scale[j]);
    out = symmetrize(&out);
    for i in 0..p {
        out[(i, i)] = 1.0;
    }
    out
}

/// Result of a descent along the fiber of one correlation matrix.
#[derive(Debug, Clone)]
pub struct FiberSolution {
    pub diagonal: PositiveDiagonal,
    /// `d²(C_ref, D* C D*)` at the returned point.
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Objective and Lie-algebra gradient of `g(D) = d²(C_ref, D C D)`.
///
/// The gradient is `2 · diag(Log(C D C_ref⁻¹ D))`, i.e. `D⁻¹ Δ` with
/// `Δ = I ∘ 2 Sym[D Log(C D C_ref⁻¹ D)]`; it is evaluated from the symmetric
/// congruent form `S = C_ref^{-1/2} D C D C_ref^{-1/2}`, whose logarithm has
/// the same diagonal after conjugation back by `C_ref^{1/2}`.
struct FiberObjective<'a> {
    roots: &'a RootPair,
    target: &'a DMatrix<f64>,
}

impl FiberObjective<'_> {
    fn value_and_gradient(&self, d: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let p = d.len();
        let moved = DMatrix::from_fn(p, p, |i, j| d[i] * self.target[(i, j)] * d[j]);
        let inner = symmetrize(&(&self.roots.inv_sqrt * moved * &self.roots.inv_sqrt));
        let eig = eigen(&inner);
        let mut value = 0.0;
        for &l in eig.eigenvalues.iter() {
            if !(l > 0.0) {
                return Err(Error::NotPositiveDefinite { min_eigenvalue: l });
            }
            value += l.ln().powi(2);
        }
        let log_inner = spectral_apply(&eig, f64::ln);
        // Log(C_ref⁻¹ M) = C_ref^{-1/2} Log(S) C_ref^{1/2}
        let right = log_inner * &self.roots.sqrt;
        let grad = DVector::from_fn(p, |k, _| {
            let mut acc = 0.0;
            for j in 0..p {
                acc += self.roots.inv_sqrt[(k, j)] * right[(j, k)];
            }
            2.0 * acc
        });
        Ok((value, grad))
    }
}

fn fiber_descent_with_roots(
    roots: &RootPair,
    target: &DMatrix<f64>,
    init: Option<&DVector<f64>>,
    tolerance: f64,
    cfg: &SolverConfig,
) -> Result<FiberSolution> {
    let p = target.nrows();
    let objective = FiberObjective { roots, target };
    let mut d = init.cloned().unwrap_or_else(|| DVector::from_element(p, 1.0));
    let (mut value, mut grad) = objective.value_and_gradient(&d)?;
    let mut trace = vec![value];
    let mut step = cfg.step_size;
    let mut iterations = 0;
    while grad.norm() >= tolerance && iterations < cfg.max_fiber_iterations {
        iterations += 1;
        let gnorm = grad.norm();
        // Changes below this are round-off in the eigenvalue logarithms.
        let noise = 32.0 * f64::EPSILON * value.max(f64::MIN_POSITIVE);
        let mut halvings = 0;
        let accepted = loop {
            // D_{t+1} = D_t Exp(-δ D_t⁻¹ Δ_t)
            let trial = DVector::from_fn(p, |k, _| d[k] * (-step * grad[k]).exp());
            let (tv, tg) = objective.value_and_gradient(&trial)?;
            let sufficient = tv <= value - 1e-4 * step * gnorm * gnorm;
            // Once the objective cannot resolve the decrease, the gradient
            // norm serves as the merit function.
            let flat = (tv - value).abs() <= noise && tg.norm() < gnorm;
            if sufficient || flat {
                break Some((trial, tv, tg));
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                break None;
            }
            step *= 0.5;
        };
        // The trial point now equals `d` to working precision: the gradient
        // is at its own round-off floor (ill-conditioned reference), so `d`
        // is as stationary as the arithmetic allows.
        let Some((trial, trial_value, trial_grad)) = accepted else {
            debug!("fiber descent stalled at objective {value:e}, gradient norm {gnorm:e}");
            break;
        };
        // Barzilai-Borwein step length in log-coordinates; the line search
        // above still guards every step.
        let taken = &grad * (-step);
        let change = &trial_grad - &grad;
        let curvature = taken.dot(&change);
        step = if curvature > 0.0 {
            (taken.norm_squared() / curvature)
                .clamp(cfg.step_size * 1e-4, cfg.step_size * 1e4)
        } else {
            cfg.step_size
        };
        d = trial;
        value = trial_value;
        grad = trial_grad;
        trace.push(value);
    }
    Ok(FiberSolution {
        diagonal: PositiveDiagonal(d),
        objective: value,
        gradient_norm: grad.norm(),
        iterations,
        trace,
    })
}

/// Fiber descent with an explicit starting point and gradient tolerance.
pub fn fiber_descent(
    c_ref: &CorrMatrix,
    c_i: &CorrMatrix,
    init: Option<&PositiveDiagonal>,
    cfg: &SolverConfig,
) -> Result<FiberSolution> {
    cfg.validate()?;
    check_dims(c_ref.dim(), c_i.dim())?;
    if let Some(d) = init {
        check_dims(c_ref.dim(), d.dim())?;
    }
    let roots = RootPair::of(&c_ref.0)?;
    fiber_descent_with_roots(&roots, &c_i.0, init.map(|d| &d.0), cfg.tolerance, cfg)
}

/// Finds `D* ∈ Diag⁺(p)` minimizing `d²(C_ref, D C_i D)`, starting at `I`.
pub fn fiber_optimize(
    c_ref: &CorrMatrix,
    c_i: &CorrMatrix,
    cfg: &SolverConfig,
) -> Result<PositiveDiagonal> {
    fiber_descent(c_ref, c_i, None, cfg).map(|s| s.diagonal)
}

/// Quotient distance on `Corr(p)`: the `Sym⁺` distance from `c1` to the
/// closest point on the fiber of `c2`.
pub fn corr_distance(c1: &CorrMatrix, c2: &CorrMatrix, cfg: &SolverConfig) -> Result<f64> {
    let sol = fiber_descent(c1, c2, None, cfg)?;
    Ok(sol.objective.max(0.0).sqrt())
}

/// Converged Fréchet mean on `Corr(p)` with solver diagnostics.
#[derive(Debug, Clone)]
pub struct CorrMean {
    pub matrix: CorrMatrix,
    /// Frobenius norm of the last tangent-space mean.
    pub residual: f64,
    pub iterations: usize,
}

/// Weighted Fréchet mean on `Corr(p)` from an explicit starting point.
///
/// Each outer iteration aligns every observation along its fiber against the
/// current iterate, averages the aligned matrices in the tangent space of
/// `Sym⁺(p)`, maps back with the exponential map and projects onto unit
/// diagonal. Weights may be negative as long as they sum to one.
pub fn corr_frechet_mean_from(
    matrices: &[CorrMatrix],
    weights: &[f64],
    init: &CorrMatrix,
    cfg: &SolverConfig,
) -> Result<CorrMean> {
    cfg.validate()?;
    check_weights(matrices.len(), weights)?;
    let p = init.dim();
    for m in matrices {
        check_dims(p, m.dim())?;
    }
    // The outer residual cannot drop below the fiber alignment error.
    let fiber_tolerance = cfg.tolerance * 0.1;
    let mut diagonals: Vec<Option<DVector<f64>>> = vec![None; matrices.len()];
    let mut current = init.0.clone();
    let mut residual = f64::INFINITY;
    for iteration in 1..=cfg.max_iterations {
        let roots = RootPair::of(&current)?;
        let mut mean = DMatrix::zeros(p, p);
        for (i, (m, &w)) in matrices.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let sol =
                fiber_descent_with_roots(&roots, &m.0, diagonals[i].as_ref(), fiber_tolerance, cfg)?;
            let aligned = PositiveDiagonal::act(&sol.diagonal, &m.0);
            diagonals[i] = Some(sol.diagonal.0);
            mean += roots.log_map(&aligned)? * w;
        }
        residual = mean.norm();
        let sigma = roots.exp_map(&mean);
        current = project_matrix(&sigma);
        if residual < cfg.tolerance {
            return Ok(CorrMean {
                matrix: CorrMatrix(current),
                residual,
                iterations: iteration,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iterations,
        residual,
        last: Box::new(current),
    })
}

/// Weighted Fréchet mean on `Corr(p)` starting from the identity.
pub fn corr_frechet_mean(
    matrices: &[CorrMatrix],
    weights: &[f64],
    cfg: &SolverConfig,
) -> Result<CorrMatrix> {
    let p = matrices.first().ok_or(Error::Empty("matrices"))?.dim();
    corr_frechet_mean_from(matrices, weights, &CorrMatrix::identity(p), cfg).map(|m| m.matrix)
}
