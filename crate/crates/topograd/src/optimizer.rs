//! Level-set optimization drivers.
//!
//! Four update rules evolve a level-set function on the unit sphere of
//! `L²(D)`, steered by the generalized topological derivative `𝒟J`:
//!
//! - **sphere combination** — Euler steps along the great circle between ψ
//!   and `𝒟J/‖𝒟J‖`,
//! - **convex combination** — a plain convex blend of ψ and `𝒟J/‖𝒟J‖`,
//! - **gradient descent** — explicit Euler on `ψ' = −g` with the projected
//!   gradient `g = −P_{ψ⊥}(𝒟J)`,
//! - **limited-memory BFGS** — the two-loop recursion applied to `g`, with a
//!   restart that clears the memory and falls back to `−g` once per
//!   iteration.
//!
//! All variants share a backtracking line search that accepts the first step
//! with `J(ψ_new) ≤ J(ψ)` and renormalize the iterate to unit `L²` norm
//! after every accepted step (the cost functions are invariant under
//! positive scaling of ψ, so normalization never changes the cost). A run
//! stops when the angle between ψ and `𝒟J` falls below a tolerance: at a
//! stationary point `𝒟J = cψ` with `c > 0`, so the angle measures distance
//! from optimality.

use std::collections::VecDeque;
use std::time::Instant;

use crate::fem::NodalField;
use crate::levelset::{L2Space, LevelSetError};
use crate::mesh::space::SpaceKind;
use crate::problems::{ProblemError, ProblemOracle};
use thiserror::Error;

/// `sin θ` below this threshold makes the sphere update numerically
/// meaningless (the formula divides by `sin θ`); the driver treats the
/// iterate as converged instead.
const DEGENERATE_SIN: f64 = 1e-14;

/// Curvature pairs with `(y, s) ≤ floor·‖y‖‖s‖` are skipped, never clamped.
const CURVATURE_FLOOR: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    LevelSet(#[from] LevelSetError),
    #[error("iteration {iteration}: {source}")]
    Oracle { iteration: usize, source: ProblemError },
    #[error("update angle is numerically degenerate (sin θ = {sin_theta:e})")]
    DegenerateAngle { sin_theta: f64 },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    SphereCombination,
    ConvexCombination,
    GradientDescent,
    Lbfgs,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::SphereCombination,
        Algorithm::ConvexCombination,
        Algorithm::GradientDescent,
        Algorithm::Lbfgs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SphereCombination => "sphere",
            Algorithm::ConvexCombination => "convex",
            Algorithm::GradientDescent => "gradient",
            Algorithm::Lbfgs => "bfgs",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptConfig {
    pub algorithm: Algorithm,
    /// Stopping angle τ in degrees.
    pub tol_angle_deg: f64,
    /// Maximum number of accepted steps; the run logs `max_iter + 1` records
    /// at most (one per visited iterate, including ψ₀).
    pub max_iter: usize,
    /// First trial step λ₀ (ignored by BFGS, whose line search always starts
    /// at 1).
    pub initial_step: f64,
    /// L-BFGS memory length m.
    pub memory: usize,
    /// Halvings allowed per line search after the initial trial.
    pub max_halvings: usize,
    /// Upper bound for the grown step of gradient descent, whose doubling
    /// rule is otherwise unbounded.
    pub step_cap: f64,
}

impl OptConfig {
    pub fn new(algorithm: Algorithm) -> OptConfig {
        OptConfig {
            algorithm,
            tol_angle_deg: 1.5,
            max_iter: 500,
            initial_step: 1.0,
            memory: 5,
            max_halvings: 30,
            step_cap: 1e3,
        }
    }

    fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.tol_angle_deg > 0.0) {
            return Err(OptimizerError::InvalidConfig("tolerance angle must be positive".into()));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(OptimizerError::InvalidConfig("initial step must be positive".into()));
        }
        if self.max_halvings == 0 {
            return Err(OptimizerError::InvalidConfig("at least one halving is required".into()));
        }
        if !(self.step_cap >= 1.0) {
            return Err(OptimizerError::InvalidConfig("step cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the convergence history; `step` is the accepted λ that
/// produced this iterate (0 for the initial one).
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub theta_deg: f64,
    pub proj_norm: f64,
    pub step: f64,
    pub state_solves: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    AngleConverged,
    MaxIterations,
    LineSearchFailure,
}

impl Termination {
    pub fn reason(self) -> &'static str {
        match self {
            Termination::AngleConverged => "angle",
            Termination::MaxIterations => "max-iterations",
            Termination::LineSearchFailure => "line-search failure",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub psi: NodalField,
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    /// Proportionality constant `c = (𝒟J, ψ)/‖ψ‖²` at the final iterate; a
    /// positive value indicates the optimality condition `𝒟J = cψ`.
    pub optimality_constant: f64,
    /// Set when the final derivative field was identically zero.
    pub degenerate_derivative: bool,
}

/// Angle criterion and optimality diagnostics for one iterate.
#[derive(Debug, Clone, Copy)]
pub struct Convergence {
    pub theta_deg: f64,
    /// `‖P_{ψ⊥}(𝒟J)‖_{L²}`, the residual of the optimality condition.
    pub proj_norm: f64,
    /// `c = (𝒟J, ψ)/‖ψ‖²`.
    pub constant: f64,
    pub converged: bool,
    /// True when `𝒟J = 0`, which satisfies the optimality condition with
    /// `c = 0` but carries no direction information.
    pub degenerate: bool,
}

/// Evaluates the stopping criterion: the angle θ between ψ and `𝒟J` in
/// degrees, the projected-derivative norm, and the proportionality constant.
/// A zero derivative reports as converged with θ = 0 and the degeneracy
/// flag set.
pub fn convergence_check(
    l2: &L2Space,
    psi: &NodalField,
    dj: &NodalField,
    tol_deg: f64,
) -> Result<Convergence, OptimizerError> {
    let psi_norm = l2.norm(psi)?;
    if psi_norm == 0.0 {
        return Err(LevelSetError::ZeroNorm.into());
    }
    let dj_norm = l2.norm(dj)?;
    if dj_norm == 0.0 {
        return Ok(Convergence {
            theta_deg: 0.0,
            proj_norm: 0.0,
            constant: 0.0,
            converged: true,
            degenerate: true,
        });
    }
    let theta_deg = l2.angle(psi, dj)?.to_degrees();
    let proj_norm = l2.norm(&l2.project(dj, psi)?)?;
    let constant = l2.inner(dj, psi)? / (psi_norm * psi_norm);
    Ok(Convergence { theta_deg, proj_norm, constant, converged: theta_deg < tol_deg, degenerate: false })
}

fn linear_combination(ca: f64, a: &NodalField, cb: f64, b: &NodalField) -> NodalField {
    let values = a.values.iter().zip(&b.values).map(|(x, y)| ca * x + cb * y).collect();
    NodalField::new(SpaceKind::P1Scalar, values)
}

fn negated(a: &NodalField) -> NodalField {
    NodalField::new(SpaceKind::P1Scalar, a.values.iter().map(|v| -v).collect())
}

/// Great-circle step from ψ toward `𝒟J/‖𝒟J‖`:
/// `ψ_new = [sin((1−λ)θ)·ψ + sin(λθ)·𝒟J/‖𝒟J‖] / sin θ`.
///
/// For unit ψ the result again has unit norm (the step interpolates along
/// the sphere); λ = 1 lands exactly on the normalized derivative.
pub fn sphere_step(
    l2: &L2Space,
    psi: &NodalField,
    dj: &NodalField,
    lambda: f64,
) -> Result<NodalField, OptimizerError> {
    let theta = l2.angle(psi, dj)?;
    let sin_theta = theta.sin();
    if sin_theta < DEGENERATE_SIN {
        return Err(OptimizerError::DegenerateAngle { sin_theta });
    }
    let dj_norm = l2.norm(dj)?;
    let ca = ((1.0 - lambda) * theta).sin() / sin_theta;
    let cb = (lambda * theta).sin() / (sin_theta * dj_norm);
    Ok(linear_combination(ca, psi, cb, dj))
}

/// Convex blend `ψ_new = λ·𝒟J/‖𝒟J‖ + (1−λ)·ψ`, computed as
/// `ψ + λ(𝒟J/‖𝒟J‖ − ψ)` so that a fixed point `ψ = 𝒟J/‖𝒟J‖` is returned
/// bit-for-bit unchanged.
pub fn convex_step(
    l2: &L2Space,
    psi: &NodalField,
    dj: &NodalField,
    lambda: f64,
) -> Result<NodalField, OptimizerError> {
    let target = l2.normalize(dj)?;
    if lambda == 1.0 {
        return Ok(target);
    }
    let values = psi
        .values
        .iter()
        .zip(&target.values)
        .map(|(&p, &t)| p + lambda * (t - p))
        .collect();
    Ok(NodalField::new(SpaceKind::P1Scalar, values))
}

/// Explicit Euler step `ψ_new = ψ − λ·g`. With `g = −P_{ψ⊥}(𝒟J)` the update
/// is orthogonal to ψ, so `‖ψ_new‖² = ‖ψ‖² + λ²‖g‖²`.
pub fn gradient_step(psi: &NodalField, g: &NodalField, lambda: f64) -> NodalField {
    linear_combination(1.0, psi, -lambda, g)
}

struct CurvaturePair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Ring buffer of curvature pairs `(s_k, y_k, ρ_k = 1/(y_k, s_k))` with the
/// inverse-Hessian action implemented by the two-loop recursion; all inner
/// products are taken in `L²(D)`.
pub struct LbfgsMemory {
    capacity: usize,
    pairs: VecDeque<CurvaturePair>,
}

impl LbfgsMemory {
    pub fn new(capacity: usize) -> LbfgsMemory {
        LbfgsMemory { capacity, pairs: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Stores a pair unless its curvature `(y, s)` falls below the safeguard
    /// floor; returns whether the pair was kept. The oldest pair is evicted
    /// once the buffer is full.
    pub fn push(&mut self, l2: &L2Space, s: NodalField, y: NodalField) -> Result<bool, OptimizerError> {
        if self.capacity == 0 {
            return Ok(false);
        }
        let ys = l2.inner(&y, &s)?;
        if ys <= CURVATURE_FLOOR * l2.norm(&y)? * l2.norm(&s)? {
            return Ok(false);
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(CurvaturePair { s: s.values, y: y.values, rho: 1.0 / ys });
        Ok(true)
    }

    /// Applies the inverse-Hessian approximation to `b`: the two-loop
    /// recursion seeded with `H₀ = γ·Id`, `γ = (s, y)/(y, y)` of the newest
    /// pair (identity while the memory is empty).
    pub fn two_loop(&self, l2: &L2Space, b: &NodalField) -> Result<NodalField, OptimizerError> {
        l2.norm(b)?; // validates kind and length
        let mut q = b.values.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for pair in self.pairs.iter().rev() {
            let alpha = pair.rho * l2.inner_raw(&pair.s, &q);
            for (qi, yi) in q.iter_mut().zip(&pair.y) {
                *qi -= alpha * yi;
            }
            alphas.push(alpha);
        }
        let gamma = match self.pairs.back() {
            Some(pair) => l2.inner_raw(&pair.s, &pair.y) / l2.inner_raw(&pair.y, &pair.y),
            None => 1.0,
        };
        let mut r: Vec<f64> = q.iter().map(|v| gamma * v).collect();
        for (pair, &alpha) in self.pairs.iter().zip(alphas.iter().rev()) {
            let beta = pair.rho * l2.inner_raw(&pair.y, &r);
            for (ri, si) in r.iter_mut().zip(&pair.s) {
                *ri += (alpha - beta) * si;
            }
        }
        Ok(NodalField::new(SpaceKind::P1Scalar, r))
    }
}

/// BFGS search direction `p = −H_k g`; with empty memory this is exactly the
/// steepest-descent direction `−g`.
pub fn bfgs_direction(
    l2: &L2Space,
    memory: &LbfgsMemory,
    g: &NodalField,
) -> Result<NodalField, OptimizerError> {
    Ok(negated(&memory.two_loop(l2, g)?))
}

#[derive(Debug, Clone)]
pub struct LineSearchResult {
    pub lambda: f64,
    pub psi: NodalField,
    pub cost: f64,
}

/// Backtracking line search: tries `λ_init, λ_init/2, …` (the initial trial
/// plus up to `max_halvings` halvings) and returns the first candidate with
/// `J(candidate(λ)) ≤ cost_current`; equality is accepted, so exact fixed
/// points terminate cleanly. `None` means every trial was rejected.
pub fn line_search<C, J>(
    candidate: C,
    mut cost: J,
    cost_current: f64,
    lambda_init: f64,
    max_halvings: usize,
) -> Result<Option<LineSearchResult>, OptimizerError>
where
    C: Fn(f64) -> Result<NodalField, OptimizerError>,
    J: FnMut(&NodalField) -> Result<f64, OptimizerError>,
{
    let mut lambda = lambda_init;
    for _ in 0..=max_halvings {
        let psi = candidate(lambda)?;
        let j = cost(&psi)?;
        if j <= cost_current {
            return Ok(Some(LineSearchResult { lambda, psi, cost: j }));
        }
        lambda *= 0.5;
    }
    Ok(None)
}

/// Runs the configured algorithm from `psi0` (normalized on entry) until the
/// angle criterion, the iteration budget, or a line-search failure stops it.
pub fn run(
    oracle: &mut dyn ProblemOracle,
    psi0: &NodalField,
    config: &OptConfig,
) -> Result<RunResult, OptimizerError> {
    run_with_observer(oracle, psi0, config, |_, _| ())
}

/// Like [`run`], invoking `observer` with each new record and the iterate it
/// describes (used by the CLI for snapshot output).
pub fn run_with_observer(
    oracle: &mut dyn ProblemOracle,
    psi0: &NodalField,
    config: &OptConfig,
    mut observer: impl FnMut(&IterationRecord, &NodalField),
) -> Result<RunResult, OptimizerError> {
    config.validate()?;
    let l2 = L2Space::new(oracle.mesh());
    let start = Instant::now();
    let mut psi = l2.normalize(psi0)?;
    let mut cost = oracle
        .cost(&psi)
        .map_err(|source| OptimizerError::Oracle { iteration: 0, source })?;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut memory = LbfgsMemory::new(config.memory);
    // BFGS curvature pair in flight: (ψ_k, g_k), completed once g_{k+1} is
    // available at the next loop head.
    let mut pending: Option<(NodalField, NodalField)> = None;
    let mut grown_step = config.initial_step;
    let mut last_step = 0.0;

    let (termination, final_conv) = loop {
        let k = records.len();
        let dj = oracle
            .derivative(&psi)
            .map_err(|source| OptimizerError::Oracle { iteration: k, source })?;
        let conv = convergence_check(&l2, &psi, &dj, config.tol_angle_deg)?;

        let needs_gradient =
            matches!(config.algorithm, Algorithm::GradientDescent | Algorithm::Lbfgs);
        let g = if needs_gradient && !conv.degenerate {
            Some(negated(&l2.project(&dj, &psi)?))
        } else {
            None
        };
        if config.algorithm == Algorithm::Lbfgs {
            if let Some(g_now) = &g {
                if let Some((psi_prev, g_prev)) = pending.take() {
                    let s = linear_combination(1.0, &psi, -1.0, &psi_prev);
                    let y = linear_combination(1.0, g_now, -1.0, &g_prev);
                    memory.push(&l2, s, y)?;
                }
            }
        }

        let record = IterationRecord {
            iter: k,
            cost,
            theta_deg: conv.theta_deg,
            proj_norm: conv.proj_norm,
            step: last_step,
            state_solves: oracle.state_solves(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        observer(&record, &psi);
        records.push(record);

        if conv.converged {
            break (Termination::AngleConverged, conv);
        }
        if k >= config.max_iter {
            break (Termination::MaxIterations, conv);
        }

        let mut evaluate = |field: &NodalField| {
            oracle
                .cost(field)
                .map_err(|source| OptimizerError::Oracle { iteration: k, source })
        };

        match config.algorithm {
            Algorithm::SphereCombination => {
                if conv.theta_deg.to_radians().sin() < DEGENERATE_SIN {
                    break (Termination::AngleConverged, conv);
                }
                let lambda_try = grown_step.min(1.0);
                let candidate =
                    |lambda: f64| Ok(l2.normalize(&sphere_step(&l2, &psi, &dj, lambda)?)?);
                match line_search(candidate, &mut evaluate, cost, lambda_try, config.max_halvings)? {
                    Some(acc) => {
                        grown_step = (1.5 * acc.lambda).min(1.0);
                        last_step = acc.lambda;
                        psi = acc.psi;
                        cost = acc.cost;
                    }
                    None => break (Termination::LineSearchFailure, conv),
                }
            }
            Algorithm::ConvexCombination => {
                let lambda_try = grown_step.min(1.0);
                let candidate =
                    |lambda: f64| Ok(l2.normalize(&convex_step(&l2, &psi, &dj, lambda)?)?);
                match line_search(candidate, &mut evaluate, cost, lambda_try, config.max_halvings)? {
                    Some(acc) => {
                        grown_step = (2.0 * acc.lambda).min(1.0);
                        last_step = acc.lambda;
                        psi = acc.psi;
                        cost = acc.cost;
                    }
                    None => break (Termination::LineSearchFailure, conv),
                }
            }
            Algorithm::GradientDescent => {
                let g = g.as_ref().expect("gradient available for algorithm 3");
                let lambda_try = grown_step.min(config.step_cap);
                let candidate = |lambda: f64| Ok(l2.normalize(&gradient_step(&psi, g, lambda))?);
                match line_search(candidate, &mut evaluate, cost, lambda_try, config.max_halvings)? {
                    Some(acc) => {
                        grown_step = (2.0 * acc.lambda).min(config.step_cap);
                        last_step = acc.lambda;
                        psi = acc.psi;
                        cost = acc.cost;
                    }
                    None => break (Termination::LineSearchFailure, conv),
                }
            }
            Algorithm::Lbfgs => {
                let g = g.expect("gradient available for algorithm 4");
                let p = bfgs_direction(&l2, &memory, &g)?;
                let candidate =
                    |lambda: f64| Ok(l2.normalize(&linear_combination(1.0, &psi, lambda, &p))?);
                let accepted =
                    match line_search(candidate, &mut evaluate, cost, 1.0, config.max_halvings)? {
                        Some(acc) => Some(acc),
                        None => {
                            // Restart: drop the curvature history and retry
                            // with plain steepest descent.
                            memory.clear();
                            let fallback =
                                |lambda: f64| Ok(l2.normalize(&gradient_step(&psi, &g, lambda))?);
                            line_search(fallback, &mut evaluate, cost, 1.0, config.max_halvings)?
                        }
                    };
                match accepted {
                    Some(acc) => {
                        pending = Some((psi.clone(), g));
                        last_step = acc.lambda;
                        psi = acc.psi;
                        cost = acc.cost;
                    }
                    None => break (Termination::LineSearchFailure, conv),
                }
            }
        }
    };

    Ok(RunResult {
        psi,
        records,
        termination,
        optimality_constant: final_conv.constant,
        degenerate_derivative: final_conv.degenerate,
    })
}
