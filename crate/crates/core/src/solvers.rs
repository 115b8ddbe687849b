//! Block Jacobi / Gauss-Seidel iterations with over-relaxation (JOR / SOR)
//! on a [`BlockLinearSystem`], one block per robot.
//!
//! `y_α ← (1−γ) y_α + γ H_αα⁻¹ (g_α − Σ_{β≠α} H_αβ y_β)`
//!
//! JOR reads every `y_β` from the previous round, SOR reads the freshest
//! value. With `γ = 1` these are distributed Jacobi (DJ) and distributed
//! Gauss-Seidel (DGS).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::VertexId;
use crate::system::BlockLinearSystem;

/// A change norm above this aborts the iteration as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Jacobi,
    GaussSeidel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub gamma: f64,
    pub eta_r: f64,
    pub eta_p: f64,
    pub max_iterations: usize,
    pub flagged_init: bool,
    /// Robot update order for SOR sweeps and flagged initialization;
    /// `None` means ascending robot id.
    pub sor_order: Option<Vec<usize>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            scheme: Scheme::GaussSeidel,
            gamma: 1.0,
            eta_r: 1e-1,
            eta_p: 1e-1,
            max_iterations: 10_000,
            flagged_init: true,
            sor_order: None,
        }
    }
}

impl SolverConfig {
    pub fn dgs(eta: f64) -> Self {
        SolverConfig {
            eta_r: eta,
            eta_p: eta,
            ..Default::default()
        }
    }

    pub fn dj(eta: f64) -> Self {
        SolverConfig {
            scheme: Scheme::Jacobi,
            ..Self::dgs(eta)
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gamma must be finite, got {}",
                self.gamma
            )));
        }
        for (name, eta) in [("eta_r", self.eta_r), ("eta_p", self.eta_p)] {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {eta}"
                )));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Threshold for a system: `eta_r` for 9-dimensional rotation blocks,
    /// `eta_p` otherwise.
    pub fn eta_for(&self, system: &BlockLinearSystem) -> f64 {
        if system.var_dim() == crate::assembly::ROTATION_DIM {
            self.eta_r
        } else {
            self.eta_p
        }
    }

    /// The robot order, checked to be a permutation of `0..robot_count`.
    pub fn order(&self, robot_count: usize) -> Result<Vec<usize>> {
        match &self.sor_order {
            None => Ok((0..robot_count).collect()),
            Some(order) => {
                let mut seen = vec![false; robot_count];
                for &r in order {
                    if r >= robot_count || std::mem::replace(&mut seen[r], true) {
                        return Err(Error::InvalidConfig(format!(
                            "sor_order {order:?} is not a permutation of 0..{robot_count}"
                        )));
                    }
                }
                if order.len() != robot_count {
                    return Err(Error::InvalidConfig(format!(
                        "sor_order {order:?} is not a permutation of 0..{robot_count}"
                    )));
                }
                Ok(order.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IterationTrace {
    /// `‖A y^k − b‖²` after each iteration.
    pub objective: Vec<f64>,
    /// `‖y^k − y^{k−1}‖` over the whole stacked vector.
    pub change_norms: Vec<f64>,
    /// Per iteration, per robot `‖y_α^k − y_α^{k−1}‖`.
    pub robot_change_norms: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    /// `‖H y − g‖` at the returned estimate.
    pub residual_norm: f64,
    /// Whether iteration 1 was the flagged initialization sweep.
    pub flagged_init: bool,
}

impl IterationTrace {
    /// `e(k) = ‖A y^k − b‖² − m*` per iteration.
    pub fn errors(&self, m_star: f64) -> Vec<f64> {
        self.objective.iter().map(|o| o - m_star).collect()
    }

    pub(crate) fn record(&mut self, objective: f64, robot_changes: Vec<f64>) -> f64 {
        let change = combine_norms(&robot_changes);
        self.objective.push(objective);
        self.change_norms.push(change);
        self.robot_change_norms.push(robot_changes);
        self.iterations += 1;
        change
    }
}

/// Euclidean norm of a stacked vector from the norms of its pieces.
pub fn combine_norms(norms: &[f64]) -> f64 {
    norms.iter().map(|n| n * n).sum::<f64>().sqrt()
}

/// True iff the last recorded change is at most `eta`.
pub fn stopping_check(trace: &IterationTrace, eta: f64) -> bool {
    trace.change_norms.last().is_some_and(|c| *c <= eta)
}

/// Diverged when the change blows past [`DIVERGENCE_THRESHOLD`] or stops being finite.
pub fn is_divergent(change: f64) -> bool {
    !change.is_finite() || change > DIVERGENCE_THRESHOLD
}

/// Per-robot block solver with cached diagonal factorizations.
pub struct BlockSolver<'a> {
    system: &'a BlockLinearSystem,
    factors: Vec<Option<Cholesky<f64, Dyn>>>,
}

impl<'a> BlockSolver<'a> {
    pub fn new(system: &'a BlockLinearSystem) -> Result<Self> {
        Ok(BlockSolver {
            system,
            factors: system.factor_diagonal()?,
        })
    }

    pub fn system(&self) -> &'a BlockLinearSystem {
        self.system
    }

    /// `g_α − Σ H_αβ y_β` over the neighbor values `value` returns.
    fn coupled_rhs<F>(&self, robot: usize, value: F) -> DVector<f64>
    where
        F: Fn(usize, usize, &VertexId) -> Option<DVector<f64>>,
    {
        let d = self.system.var_dim();
        let mut rhs = self.system.block_rhs(robot);
        for (neighbor, entries) in self.system.couplings(robot) {
            for e in entries {
                if let Some(y) = value(neighbor, e.col, &e.col_vertex) {
                    let mut rows = rhs.rows_mut(e.row * d, d);
                    rows -= &e.block * y;
                }
            }
        }
        rhs
    }

    /// `H_αα⁻¹ (g_α − Σ H_αβ y_β)`; `value` supplies neighbor vertex values
    /// and may return `None` to leave a coupling out.
    pub fn local_solve<F>(&self, robot: usize, value: F) -> DVector<f64>
    where
        F: Fn(usize, usize, &VertexId) -> Option<DVector<f64>>,
    {
        let rhs = self.coupled_rhs(robot, value);
        match &self.factors[robot] {
            Some(f) => f.solve(&rhs),
            None => rhs,
        }
    }

    /// Block solve of the flagged first sweep: measurements to neighbors
    /// that are not `initialized` are dropped entirely, i.e. their share of
    /// `H_αα` and `g_α` as well as the coupling. If the reduced block is not
    /// positive definite only the couplings are dropped.
    pub fn flagged_solve<I, F>(&self, robot: usize, initialized: I, value: F) -> DVector<f64>
    where
        I: Fn(usize) -> bool,
        F: Fn(usize, usize, &VertexId) -> Option<DVector<f64>>,
    {
        let d = self.system.var_dim();
        let rhs = self.coupled_rhs(robot, |nb, slot, v| {
            if initialized(nb) {
                value(nb, slot, v)
            } else {
                None
            }
        });
        let mut h = self.system.diagonal_block(robot).clone();
        let mut reduced_rhs = rhs.clone();
        let mut reduced = false;
        for nb in self
            .system
            .neighbors(robot)
            .into_iter()
            .filter(|nb| !initialized(*nb))
        {
            for share in self.system.separator_shares(robot, nb) {
                let mut block = h.view_mut((share.slot * d, share.slot * d), (d, d));
                block -= &share.hessian;
                let mut rows = reduced_rhs.rows_mut(share.slot * d, d);
                rows -= &share.rhs;
                reduced = true;
            }
        }
        if reduced && h.nrows() > 0 {
            if let Some(f) = Cholesky::new(h) {
                return f.solve(&reduced_rhs);
            }
        }
        match &self.factors[robot] {
            Some(f) => f.solve(&rhs),
            None => rhs,
        }
    }

    /// `(1−γ) old + γ target`.
    pub fn relax(gamma: f64, old: &DVector<f64>, target: DVector<f64>) -> DVector<f64> {
        if gamma == 1.0 {
            target
        } else {
            old * (1.0 - gamma) + target * gamma
        }
    }

    fn global_value(&self, y: &DVector<f64>, robot: usize, slot: usize) -> DVector<f64> {
        let d = self.system.var_dim();
        y.rows(self.system.robot_range(robot).start + slot * d, d)
            .into_owned()
    }
}

/// One sweep in `order`; each robot solves its block using only neighbors
/// that were already initialized.
pub fn flagged_initialize(system: &BlockLinearSystem, order: &[usize]) -> Result<DVector<f64>> {
    let solver = BlockSolver::new(system)?;
    Ok(flagged_sweep(&solver, order))
}

fn flagged_sweep(solver: &BlockSolver<'_>, order: &[usize]) -> DVector<f64> {
    let system = solver.system();
    let mut y = DVector::zeros(system.dim());
    let mut initialized = vec![false; system.robot_count()];
    for &r in order {
        let block = solver.flagged_solve(
            r,
            |nb| initialized[nb],
            |nb, slot, _| Some(solver.global_value(&y, nb, slot)),
        );
        y.rows_mut(system.robot_range(r).start, block.len())
            .copy_from(&block);
        initialized[r] = true;
    }
    y
}

fn prepare_initial(
    solver: &BlockSolver<'_>,
    config: &SolverConfig,
    order: &[usize],
    initial: Option<&DVector<f64>>,
    trace: &mut IterationTrace,
) -> Result<DVector<f64>> {
    let system = solver.system();
    match initial {
        Some(y0) => {
            if y0.len() != system.dim() {
                return Err(Error::DimensionMismatch {
                    expected: system.dim(),
                    actual: y0.len(),
                });
            }
            Ok(y0.clone())
        }
        None if config.flagged_init => {
            let y = flagged_sweep(solver, order);
            let changes = (0..system.robot_count())
                .map(|r| y.rows_range(system.robot_range(r)).norm())
                .collect();
            trace.record(system.objective(&y), changes);
            trace.flagged_init = true;
            Ok(y)
        }
        None => Ok(DVector::zeros(system.dim())),
    }
}

fn finish(
    system: &BlockLinearSystem,
    y: DVector<f64>,
    mut trace: IterationTrace,
) -> (DVector<f64>, IterationTrace) {
    trace.residual_norm = (system.multiply(&y) - system.rhs()).norm();
    (y, trace)
}

/// Runs JOR or SOR according to `config.scheme`. Without an explicit
/// `initial` the start is the flagged initialization (counted as iteration 1)
/// or zero.
pub fn block_solve(
    system: &BlockLinearSystem,
    config: &SolverConfig,
    initial: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, IterationTrace)> {
    match config.scheme {
        Scheme::Jacobi => jor_solve(system, config, initial),
        Scheme::GaussSeidel => sor_solve(system, config, initial),
    }
}

/// Jacobi over-relaxation: all robots update from the previous round.
pub fn jor_solve(
    system: &BlockLinearSystem,
    config: &SolverConfig,
    initial: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, IterationTrace)> {
    config.validate()?;
    let solver = BlockSolver::new(system)?;
    let order = config.order(system.robot_count())?;
    let eta = config.eta_for(system);
    let mut trace = IterationTrace::default();
    let mut y = prepare_initial(&solver, config, &order, initial, &mut trace)?;
    if stopping_check(&trace, eta) {
        trace.converged = true;
        return Ok(finish(system, y, trace));
    }
    while trace.iterations < config.max_iterations {
        let updates: Vec<DVector<f64>> = (0..system.robot_count())
            .into_par_iter()
            .map(|r| {
                let target =
                    solver.local_solve(r, |nb, slot, _| Some(solver.global_value(&y, nb, slot)));
                BlockSolver::relax(
                    config.gamma,
                    &y.rows_range(system.robot_range(r)).into_owned(),
                    target,
                )
            })
            .collect();
        let mut changes = Vec::with_capacity(updates.len());
        for (r, block) in updates.into_iter().enumerate() {
            let range = system.robot_range(r);
            changes.push((&block - y.rows_range(range.clone())).norm());
            y.rows_mut(range.start, range.len()).copy_from(&block);
        }
        let change = trace.record(system.objective(&y), changes);
        if is_divergent(change) {
            trace.diverged = true;
            break;
        }
        if change <= eta {
            trace.converged = true;
            break;
        }
    }
    Ok(finish(system, y, trace))
}

/// Successive over-relaxation: robots update in `order`, each using the
/// freshest neighbor values.
pub fn sor_solve(
    system: &BlockLinearSystem,
    config: &SolverConfig,
    initial: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, IterationTrace)> {
    config.validate()?;
    let solver = BlockSolver::new(system)?;
    let order = config.order(system.robot_count())?;
    let eta = config.eta_for(system);
    let mut trace = IterationTrace::default();
    let mut y = prepare_initial(&solver, config, &order, initial, &mut trace)?;
    if stopping_check(&trace, eta) {
        trace.converged = true;
        return Ok(finish(system, y, trace));
    }
    while trace.iterations < config.max_iterations {
        let mut changes = vec![0.0; system.robot_count()];
        for &r in &order {
            let range = system.robot_range(r);
            let target =
                solver.local_solve(r, |nb, slot, _| Some(solver.global_value(&y, nb, slot)));
            let old = y.rows_range(range.clone()).into_owned();
            let block = BlockSolver::relax(config.gamma, &old, target);
            changes[r] = (&block - &old).norm();
            y.rows_mut(range.start, range.len()).copy_from(&block);
        }
        let change = trace.record(system.objective(&y), changes);
        if is_divergent(change) {
            trace.diverged = true;
            break;
        }
        if change <= eta {
            trace.converged = true;
            break;
        }
    }
    Ok(finish(system, y, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectralMethod {
    Lanczos,
    Dense,
}

/// Extreme eigenvalues of `D⁻¹(H − D)` and the resulting `ρ(M)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub gamma: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub spectral_radius: f64,
    pub method: SpectralMethod,
}

impl SpectralEstimate {
    fn new(gamma: f64, lambda_min: f64, lambda_max: f64, method: SpectralMethod) -> Self {
        SpectralEstimate {
            gamma,
            lambda_min,
            lambda_max,
            spectral_radius: radius_for(gamma, lambda_min, lambda_max),
            method,
        }
    }

    /// Same eigenvalue range, different relaxation factor.
    pub fn at_gamma(&self, gamma: f64) -> Self {
        SpectralEstimate::new(gamma, self.lambda_min, self.lambda_max, self.method)
    }

    pub fn predicts_convergence(&self) -> bool {
        self.spectral_radius < 1.0
    }
}

fn radius_for(gamma: f64, lambda_min: f64, lambda_max: f64) -> f64 {
    // eigenvalues of M are 1 − γ − γλ, real and affine in λ
    (1.0 - gamma - gamma * lambda_min)
        .abs()
        .max((1.0 - gamma - gamma * lambda_max).abs())
}

/// `M = (1−γ) I − γ D⁻¹ (H − D)` as a dense matrix.
pub fn jor_iteration_matrix(system: &BlockLinearSystem, gamma: f64) -> Result<DMatrix<f64>> {
    let n = system.dim();
    let h = system.to_dense();
    let mut d_inv_n = DMatrix::zeros(n, n);
    let factors = system.factor_diagonal()?;
    for r in 0..system.robot_count() {
        let range = system.robot_range(r);
        let Some(f) = &factors[r] else { continue };
        let mut rows = h.rows_range(range.clone()).into_owned();
        rows.view_mut((0, range.start), (range.len(), range.len()))
            .fill(0.0);
        d_inv_n.rows_range_mut(range).copy_from(&f.solve(&rows));
    }
    Ok(DMatrix::identity(n, n) * (1.0 - gamma) - d_inv_n * gamma)
}

/// Iteration matrix together with its spectral radius.
pub fn jor_convergence_matrix(
    system: &BlockLinearSystem,
    gamma: f64,
) -> Result<(DMatrix<f64>, SpectralEstimate)> {
    let m = jor_iteration_matrix(system, gamma)?;
    let spectral = jor_spectral_radius(system, gamma)?;
    Ok((m, spectral))
}

/// Symmetric similarity transform of `D⁻¹(H − D)`: `S = L⁻¹ (H − D) L⁻ᵀ`.
struct SymmetricIteration<'a> {
    system: &'a BlockLinearSystem,
    lower: Vec<Option<DMatrix<f64>>>,
}

impl SymmetricIteration<'_> {
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = x.clone();
        for (r, l) in self.lower.iter().enumerate() {
            if let Some(l) = l {
                let range = self.system.robot_range(r);
                let part = l
                    .tr_solve_lower_triangular(&x.rows_range(range.clone()))
                    .expect("nonsingular factor");
                z.rows_mut(range.start, range.len()).copy_from(&part);
            }
        }
        let mut w = self.system.multiply_coupling(&z);
        for (r, l) in self.lower.iter().enumerate() {
            if let Some(l) = l {
                let range = self.system.robot_range(r);
                let part = l
                    .solve_lower_triangular(&w.rows_range(range.clone()))
                    .expect("nonsingular factor");
                w.rows_mut(range.start, range.len()).copy_from(&part);
            }
        }
        w
    }

    fn dense(&self) -> DMatrix<f64> {
        let n = self.system.dim();
        let mut s = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            s.set_column(k, &self.apply(&e));
        }
        (&s + s.transpose()) * 0.5
    }
}

/// Lanczos with full reorthogonalization on `S`. Returns the extreme Ritz
/// values once both residual bounds `β_m |s_{m,i}|` are below `tol`, or
/// `None` if that does not happen within `max_steps`.
fn lanczos_extremes(op: &SymmetricIteration<'_>, tol: f64, max_steps: usize) -> Option<(f64, f64)> {
    let n = op.system.dim();
    let max_steps = max_steps.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    q /= q.norm();
    let mut basis: Vec<DVector<f64>> = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    for m in 1..=max_steps {
        let mut w = op.apply(&basis[m - 1]);
        alpha.push(basis[m - 1].dot(&w));
        for _ in 0..2 {
            for qi in &basis {
                let c = qi.dot(&w);
                w.axpy(-c, qi, 1.0);
            }
        }
        let b = w.norm();
        let exhausted = b <= 1e-12 * alpha.iter().fold(1.0_f64, |acc, a| acc.max(a.abs()));
        if m % 10 == 0 || exhausted || m == max_steps {
            let mut t = DMatrix::zeros(m, m);
            for i in 0..m {
                t[(i, i)] = alpha[i];
                if i + 1 < m {
                    t[(i, i + 1)] = beta[i];
                    t[(i + 1, i)] = beta[i];
                }
            }
            let eig = t.symmetric_eigen();
            let (lo, hi) = (eig.eigenvalues.imin(), eig.eigenvalues.imax());
            let bound = |i: usize| b * eig.eigenvectors[(m - 1, i)].abs();
            let settled = |i: usize| bound(i) <= tol * eig.eigenvalues[i].abs().max(1.0);
            if exhausted || (settled(lo) && settled(hi)) {
                return Some((eig.eigenvalues[lo], eig.eigenvalues[hi]));
            }
        }
        if exhausted {
            break;
        }
        beta.push(b);
        basis.push(w / b);
    }
    None
}

/// Above this dimension the dense fallback is skipped and Lanczos must
/// converge.
const DENSE_FALLBACK_LIMIT: usize = 4000;

/// `ρ(M)` via the extreme eigenvalues of `D⁻¹(H − D)`: Lanczos iteration
/// (tolerance 1e-8, fixed seed) with a dense eigensolve fallback.
pub fn jor_spectral_radius(system: &BlockLinearSystem, gamma: f64) -> Result<SpectralEstimate> {
    let factors = system.factor_diagonal()?;
    let op = SymmetricIteration {
        system,
        lower: factors.into_iter().map(|f| f.map(|f| f.l())).collect(),
    };
    if system.dim() == 0 {
        return Ok(SpectralEstimate::new(
            gamma,
            0.0,
            0.0,
            SpectralMethod::Dense,
        ));
    }
    if let Some((lo, hi)) = lanczos_extremes(&op, 1e-8, 1500) {
        return Ok(SpectralEstimate::new(
            gamma,
            lo,
            hi,
            SpectralMethod::Lanczos,
        ));
    }
    if system.dim() > DENSE_FALLBACK_LIMIT {
        return Err(Error::Singular(format!(
            "Lanczos iteration stalled on a {}-dimensional system",
            system.dim()
        )));
    }
    Ok(dense_spectral_radius_from(&op, gamma))
}

fn dense_spectral_radius_from(op: &SymmetricIteration<'_>, gamma: f64) -> SpectralEstimate {
    let eig = op.dense().symmetric_eigen().eigenvalues;
    SpectralEstimate::new(gamma, eig.min(), eig.max(), SpectralMethod::Dense)
}

/// Dense symmetric eigensolve of `L⁻¹(H − D)L⁻ᵀ`.
pub fn jor_spectral_radius_dense(
    system: &BlockLinearSystem,
    gamma: f64,
) -> Result<SpectralEstimate> {
    let factors = system.factor_diagonal()?;
    let op = SymmetricIteration {
        system,
        lower: factors.into_iter().map(|f| f.map(|f| f.l())).collect(),
    };
    Ok(dense_spectral_radius_from(&op, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    pub(crate) fn random_block_system(
        blocks: &[usize],
        density: f64,
        seed: u64,
    ) -> BlockLinearSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let n: usize = blocks.iter().sum::<usize>() * d;
        // A with random sparse rows plus a diagonal part keeps H = AᵀA SPD
        let rows = 2 * n;
        let mut a = DMatrix::zeros(rows, n);
        for i in 0..n {
            a[(i, i)] = rng.random_range(1.0..2.0);
        }
        for i in n..rows {
            for j in 0..n {
                if rng.random_bool(density) {
                    a[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
        }
        let b = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
        let h = a.tr_mul(&a);
        let g = a.tr_mul(&b);
        BlockLinearSystem::from_dense(d, blocks, &h, &g, b.norm_squared()).unwrap()
    }

    fn tight(scheme: Scheme, gamma: f64) -> SolverConfig {
        SolverConfig {
            scheme,
            gamma,
            eta_r: 1e-10,
            eta_p: 1e-10,
            max_iterations: 100_000,
            flagged_init: false,
            sor_order: None,
        }
    }

    #[test]
    fn single_block_converges_in_one_update() {
        let sys = random_block_system(&[4], 0.3, 1);
        let (y, trace) = jor_solve(&sys, &tight(Scheme::Jacobi, 1.0), None).unwrap();
        let direct = sys.solve_dense().unwrap();
        assert!(trace.converged);
        assert_eq!(trace.iterations, 2);
        assert_relative_eq!(trace.objective[0], sys.objective(&direct), epsilon = 1e-10);
        assert_relative_eq!(y, direct, epsilon = 1e-10);
    }

    #[test]
    fn three_blocks_match_dense_solve() {
        let sys = random_block_system(&[2, 3, 2], 0.1, 2);
        let direct = sys.solve_dense().unwrap();
        let est = jor_spectral_radius(&sys, 1.0).unwrap();
        let (ys, ts) = sor_solve(&sys, &tight(Scheme::GaussSeidel, 1.0), None).unwrap();
        assert!(ts.converged);
        assert_relative_eq!(ys, direct, epsilon = 1e-6);
        if est.predicts_convergence() {
            let (yj, tj) = jor_solve(&sys, &tight(Scheme::Jacobi, 1.0), None).unwrap();
            assert!(tj.converged);
            assert_relative_eq!(yj, direct, epsilon = 1e-6);
        }
    }

    #[test]
    fn flagged_init_first_robot_ignores_neighbors() {
        let sys = random_block_system(&[2, 2], 0.3, 3);
        let y = flagged_initialize(&sys, &[0, 1]).unwrap();
        let d0 = Cholesky::new(sys.diagonal_block(0).clone())
            .unwrap()
            .solve(&sys.block_rhs(0));
        assert_relative_eq!(
            y.rows_range(sys.robot_range(0)).into_owned(),
            d0,
            epsilon = 1e-12
        );

        // second robot sees the first robot's fresh value
        let h = sys.to_dense();
        let r1 = sys.robot_range(1);
        let r0 = sys.robot_range(0);
        let coupling = h.view((r1.start, r0.start), (r1.len(), r0.len())) * y.rows_range(r0);
        let d1 = Cholesky::new(sys.diagonal_block(1).clone())
            .unwrap()
            .solve(&(sys.block_rhs(1) - coupling));
        assert_relative_eq!(y.rows_range(r1).into_owned(), d1, epsilon = 1e-12);

        let single = random_block_system(&[3], 0.3, 4);
        assert_relative_eq!(
            flagged_initialize(&single, &[0]).unwrap(),
            single.solve_dense().unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn stopping_rule() {
        let mut t = IterationTrace::default();
        assert!(!stopping_check(&t, 0.1));
        t.record(0.0, vec![0.0]);
        assert!(stopping_check(&t, 1e-30));
        t.record(0.0, vec![0.3, 0.4]);
        assert_relative_eq!(t.change_norms[1], 0.5);
        assert!(!stopping_check(&t, 0.1));
    }

    #[test]
    fn diagonal_system_has_closed_form_radius() {
        let sys = random_block_system(&[2, 2, 1], 0.0, 5);
        let h = sys.to_dense();
        let g = sys.rhs().clone();
        let mut hd = DMatrix::zeros(h.nrows(), h.ncols());
        for i in 0..h.nrows() {
            hd[(i, i)] = h[(i, i)];
        }
        let sys = BlockLinearSystem::from_dense(3, &[2, 2, 1], &hd, &g, 0.0).unwrap();
        for gamma in [0.5, 1.0, 1.5] {
            let (m, est) = jor_convergence_matrix(&sys, gamma).unwrap();
            assert_relative_eq!(
                m,
                DMatrix::identity(15, 15) * (1.0 - gamma),
                epsilon = 1e-14
            );
            assert_relative_eq!(est.spectral_radius, (1.0 - gamma).abs(), epsilon = 1e-12);
        }
    }

    #[test]
    fn spectral_radius_matches_nonsymmetric_eigensolve() {
        for seed in 0..5 {
            let sys = random_block_system(&[2, 1, 3, 2], 0.2, 10 + seed);
            for gamma in [0.5, 1.0, 1.3] {
                let m = jor_iteration_matrix(&sys, gamma).unwrap();
                let oracle = m
                    .complex_eigenvalues()
                    .iter()
                    .map(|c| c.norm())
                    .fold(0.0, f64::max);
                let est = jor_spectral_radius(&sys, gamma).unwrap();
                assert_relative_eq!(est.spectral_radius, oracle, epsilon = 1e-6);
                let dense = jor_spectral_radius_dense(&sys, gamma).unwrap();
                assert_relative_eq!(dense.spectral_radius, oracle, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn divergent_prediction_matches_run() {
        let mut checked = 0;
        for seed in 0..20 {
            let sys = random_block_system(&[2, 2, 2, 2], 0.4, 100 + seed);
            let est = jor_spectral_radius(&sys, 1.5).unwrap();
            if (est.spectral_radius - 1.0).abs() < 1e-3 {
                continue;
            }
            let cfg = SolverConfig {
                max_iterations: 20_000,
                ..tight(Scheme::Jacobi, 1.5)
            };
            let (_, trace) = jor_solve(&sys, &cfg, None).unwrap();
            assert_eq!(
                est.predicts_convergence(),
                trace.converged,
                "seed {seed} rho {}",
                est.spectral_radius
            );
            assert_eq!(
                !est.predicts_convergence(),
                trace.diverged || !trace.converged
            );
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn sor_and_jor_share_fixed_point() {
        let sys = random_block_system(&[1, 2, 2], 0.05, 7);
        let (ys, _) = sor_solve(&sys, &tight(Scheme::GaussSeidel, 1.4), None).unwrap();
        if jor_spectral_radius(&sys, 0.8)
            .unwrap()
            .predicts_convergence()
        {
            let (yj, _) = jor_solve(&sys, &tight(Scheme::Jacobi, 0.8), None).unwrap();
            assert!((ys - yj).amax() <= 1e-6);
        }
    }

    #[test]
    fn traces_are_deterministic() {
        let sys = random_block_system(&[2, 3, 1, 2], 0.1, 8);
        for scheme in [Scheme::Jacobi, Scheme::GaussSeidel] {
            let cfg = SolverConfig {
                scheme,
                flagged_init: true,
                ..SolverConfig::dgs(1e-6)
            };
            assert_eq!(
                block_solve(&sys, &cfg, None).unwrap(),
                block_solve(&sys, &cfg, None).unwrap()
            );
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::dgs(0.0).validate().is_err());
        assert!(SolverConfig::dgs(0.1)
            .with_gamma(f64::NAN)
            .validate()
            .is_err());
        let mut c = SolverConfig::dgs(0.1);
        c.sor_order = Some(vec![1, 1]);
        assert!(c.order(2).is_err());
        c.sor_order = Some(vec![1, 0]);
        assert_eq!(c.order(2).unwrap(), vec![1, 0]);
        let sys = random_block_system(&[1, 1], 0.1, 9);
        assert!(matches!(
            sor_solve(&sys, &c, Some(&DVector::zeros(2))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn sor_converges_inside_unit_interval(seed in 0u64..1000, gamma_idx in 0usize..5) {
            let gamma = [0.1, 0.5, 1.0, 1.5, 1.9][gamma_idx];
            let sys = random_block_system(&[2, 1, 2], 0.15, seed);
            let (y, trace) = sor_solve(&sys, &tight(Scheme::GaussSeidel, gamma), None).unwrap();
            prop_assert!(trace.converged);
            prop_assert!((y - sys.solve_dense().unwrap()).amax() < 1e-6);
        }
    }
}
