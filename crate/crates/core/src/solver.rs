//! Augmented-Lagrangian solver for box-bounded, equality-constrained NLPs.
//!
//! The outer loop updates multipliers `λ ← λ + ρ c(v)` and grows the penalty
//! `ρ` when feasibility stops improving. Each subproblem
//!
//! ```text
//! min_v  f(v) + λᵀ c(v) + ρ/2 ‖c(v)‖²   s.t.  l <= v <= u
//! ```
//!
//! is solved by projected limited-memory BFGS with an Armijo backtracking
//! search along the projection arc. Variables sitting on a bound with the
//! gradient pushing outward are frozen for the quasi-Newton step.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::BoxBounds;
use crate::error::{Error, Result};
use crate::transcription::{jacobian_gram, jacobian_transpose_product, Nlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_outer_iterations: usize,
    /// Cap on inner iterations per outer iteration.
    pub max_inner_iterations: usize,
    pub defect_tolerance: f64,
    pub gradient_tolerance: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Armijo coefficient.
    pub sufficient_decrease: f64,
    /// Step shrink factor during backtracking.
    pub backtracking: f64,
    pub max_backtracks: usize,
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Keep a trace of every accepted line-search step.
    pub record_line_search: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 40,
            max_inner_iterations: 2000,
            defect_tolerance: 1e-6,
            gradient_tolerance: 1e-6,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e10,
            sufficient_decrease: 1e-4,
            backtracking: 0.5,
            max_backtracks: 60,
            memory: 20,
            record_line_search: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.defect_tolerance > 0.0) {
            problems.push("defect_tolerance must be > 0");
        }
        if !(self.gradient_tolerance > 0.0) {
            problems.push("gradient_tolerance must be > 0");
        }
        if !(self.initial_penalty > 0.0) {
            problems.push("initial_penalty must be > 0");
        }
        if !(self.penalty_growth > 1.0) {
            problems.push("penalty_growth must be > 1");
        }
        if !(self.max_penalty >= self.initial_penalty) {
            problems.push("max_penalty must be >= initial_penalty");
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            problems.push("sufficient_decrease must lie in (0, 1)");
        }
        if !(self.backtracking > 0.0 && self.backtracking < 1.0) {
            problems.push("backtracking must lie in (0, 1)");
        }
        if self.max_outer_iterations == 0 || self.max_inner_iterations == 0 {
            problems.push("iteration caps must be positive");
        }
        if self.memory == 0 {
            problems.push("memory must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    FeasibleButNotStationary,
    IterationCap,
    NumericFailure,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::FeasibleButNotStationary => "feasible-but-not-stationary",
            SolveStatus::IterationCap => "iteration-cap",
            SolveStatus::NumericFailure => "numeric-failure",
        }
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    /// `max |c(v)|` after the subproblem.
    pub feasibility: f64,
    /// Penalty weight after this iteration's update.
    pub penalty_weight: f64,
    /// Projected-gradient norm of the Lagrangian at the updated multipliers.
    pub grad_norm: f64,
    pub inner_iterations: usize,
}

/// One accepted inner step: merit before/after and the Armijo bound it satisfied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchStep {
    pub merit_before: f64,
    pub merit_after: f64,
    /// `c₁ ∇mᵀ (v⁺ − v)`, nonpositive.
    pub armijo_bound: f64,
    /// Tolerance for rounding in the merit value; zero for a strict Armijo step.
    pub rounding_slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Total inner iterations.
    pub iterations: usize,
    pub objective: f64,
    pub max_defect: f64,
    pub grad_norm: f64,
    pub solution: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub history: Vec<IterationRecord>,
    pub line_search: Vec<LineSearchStep>,
    /// The initial point was outside the bounds and had to be clamped.
    pub initial_clamped: bool,
    pub failure: Option<String>,
}

/// Elementwise clamp into `bounds`.
pub fn project_to_box(v: &DVector<f64>, bounds: &BoxBounds) -> DVector<f64> {
    bounds.clamp(v)
}

fn projected_gradient_norm(v: &DVector<f64>, g: &DVector<f64>, bounds: &BoxBounds) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..v.len() {
        let target = (v[i] - g[i]).max(bounds.lower[i]).min(bounds.upper[i]);
        worst = worst.max((target - v[i]).abs());
    }
    worst
}

struct Merit<'a, N: Nlp> {
    nlp: &'a N,
    lambda: &'a DVector<f64>,
    rho: f64,
}

struct MeritPoint {
    value: f64,
    objective: f64,
    constraints: DVector<f64>,
}

impl<N: Nlp> Merit<'_, N> {
    fn value(&self, v: &DVector<f64>) -> Result<MeritPoint> {
        let objective = self.nlp.objective(v)?;
        let constraints = self.nlp.constraints(v)?;
        let value = objective + self.lambda.dot(&constraints) + 0.5 * self.rho * constraints.norm_squared();
        if !value.is_finite() {
            return Err(Error::Numeric("merit function is not finite".into()));
        }
        Ok(MeritPoint {
            value,
            objective,
            constraints,
        })
    }

    fn gradient(&self, v: &DVector<f64>, constraints: &DVector<f64>) -> Result<DVector<f64>> {
        let mut g = self.nlp.objective_gradient(v)?;
        if !constraints.is_empty() {
            let y = self.lambda + constraints * self.rho;
            let blocks = self.nlp.constraint_jacobian(v)?;
            g += jacobian_transpose_product(&blocks, &y, v.len());
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("merit gradient is not finite".into()));
        }
        Ok(g)
    }

    /// Gauss-Newton model `H_f + ρ JᵀJ`, when the NLP supplies `H_f`.
    fn curvature(&self, v: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        let Some(mut h) = self.nlp.curvature_estimate(v)? else {
            return Ok(None);
        };
        if self.nlp.num_constraints() > 0 {
            let blocks = self.nlp.constraint_jacobian(v)?;
            h += jacobian_gram(&blocks, v.len()) * self.rho;
        }
        Ok(Some(h))
    }
}

/// Iterations between refactorizations of the curvature model.
const SEED_REFRESH: usize = 20;

/// Factorized curvature model restricted to the free variables.
struct Preconditioner {
    free: Vec<usize>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Preconditioner {
    fn new(h: &DMatrix<f64>, active: &[bool]) -> Option<Self> {
        let free: Vec<usize> = (0..active.len()).filter(|&i| !active[i]).collect();
        if free.is_empty() {
            return None;
        }
        let reduced = DMatrix::from_fn(free.len(), free.len(), |i, j| h[(free[i], free[j])]);
        let scale = reduced.diagonal().amax().max(1.0);
        let mut shift = 1e-10 * scale;
        for _ in 0..12 {
            let mut m = reduced.clone();
            for i in 0..free.len() {
                m[(i, i)] += shift;
            }
            if let Some(chol) = m.cholesky() {
                return Some(Self { free, chol });
            }
            shift *= 100.0;
        }
        None
    }

    fn apply(&self, q: &DVector<f64>) -> DVector<f64> {
        let rhs = DVector::from_iterator(self.free.len(), self.free.iter().map(|&i| q[i]));
        let sol = self.chol.solve(&rhs);
        let mut out = DVector::zeros(q.len());
        for (k, &i) in self.free.iter().enumerate() {
            out[i] = sol[k];
        }
        out
    }
}

struct InnerOutcome {
    v: DVector<f64>,
    point: MeritPoint,
    grad_norm: f64,
    iterations: usize,
}

/// Marks variables held at a bound by the gradient, or pinned by equal bounds.
fn active_set(v: &DVector<f64>, g: &DVector<f64>, bounds: &BoxBounds) -> Vec<bool> {
    (0..v.len())
        .map(|i| {
            let (lo, hi) = (bounds.lower[i], bounds.upper[i]);
            let eps = 1e-12 * (1.0 + v[i].abs());
            lo == hi || (v[i] <= lo + eps && g[i] > 0.0) || (v[i] >= hi - eps && g[i] < 0.0)
        })
        .collect()
}

fn lbfgs_direction(
    g: &DVector<f64>,
    active: &[bool],
    pairs: &VecDeque<(DVector<f64>, DVector<f64>)>,
    seed: Option<&Preconditioner>,
) -> DVector<f64> {
    let mask = |x: &DVector<f64>| DVector::from_fn(x.len(), |i, _| if active[i] { 0.0 } else { x[i] });
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(pairs.len());
    let masked: Vec<(DVector<f64>, DVector<f64>)> = pairs.iter().map(|(s, y)| (mask(s), mask(y))).collect();
    for (s, y) in masked.iter().rev() {
        let sy = s.dot(y);
        if sy <= 1e-12 * s.norm() * y.norm() {
            alphas.push(0.0);
            continue;
        }
        let a = s.dot(&q) / sy;
        q -= y * a;
        alphas.push(a);
    }
    let gamma = masked
        .last()
        .map(|(s, y)| {
            let yy = y.dot(y);
            if yy > 0.0 && s.dot(y) > 0.0 {
                s.dot(y) / yy
            } else {
                1.0
            }
        })
        .unwrap_or(1.0);
    let mut r = match seed {
        Some(p) => p.apply(&q),
        None => q * gamma,
    };
    for ((s, y), a) in masked.iter().zip(alphas.iter().rev()) {
        let sy = s.dot(y);
        if sy <= 1e-12 * s.norm() * y.norm() {
            continue;
        }
        let b = y.dot(&r) / sy;
        r += s * (a - b);
    }
    -r
}

fn solve_subproblem<N: Nlp>(
    merit: &Merit<'_, N>,
    bounds: &BoxBounds,
    start: DVector<f64>,
    tolerance: f64,
    config: &SolverConfig,
    trace: &mut Vec<LineSearchStep>,
) -> Result<InnerOutcome> {
    let mut v = start;
    let mut point = merit.value(&v)?;
    let mut g = merit.gradient(&v, &point.constraints)?;
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::with_capacity(config.memory);
    let mut iterations = 0;
    let mut grad_norm = projected_gradient_norm(&v, &g, bounds);
    let mut seed: Option<Preconditioner> = None;
    let mut seed_active: Option<Vec<bool>> = None;
    let mut seed_age = 0;

    while grad_norm > tolerance && iterations < config.max_inner_iterations {
        let active = active_set(&v, &g, bounds);
        let stale = seed_age >= SEED_REFRESH || seed_active.as_deref() != Some(active.as_slice());
        if stale {
            seed = merit.curvature(&v)?.and_then(|h| Preconditioner::new(&h, &active));
            seed_active = Some(active.clone());
            seed_age = 0;
        }
        seed_age += 1;
        let mut direction = lbfgs_direction(&g, &active, &pairs, seed.as_ref());
        let steepest = DVector::from_fn(g.len(), |i, _| if active[i] { 0.0 } else { -g[i] });
        if g.dot(&direction) >= -1e-12 * g.norm() * direction.norm() || (pairs.is_empty() && seed.is_none()) {
            direction = steepest.clone();
        }
        let mut step = if pairs.is_empty() && seed.is_none() {
            (1.0 / direction.amax()).min(1.0)
        } else {
            1.0
        };

        // Near a minimizer the Armijo decrease drops below rounding error in the
        // merit value. A step inside that noise band is kept as a fallback and
        // only taken if it also shrinks the projected gradient.
        let noise = 1e-12 * (1.0 + point.value.abs());
        let mut accepted = None;
        let mut fallback = None;
        for attempt in 0..2 {
            for _ in 0..config.max_backtracks {
                let trial = project_to_box(&(&v + &direction * step), bounds);
                let predicted = g.dot(&(&trial - &v));
                if predicted < 0.0 {
                    if let Ok(candidate) = merit.value(&trial) {
                        let bound = config.sufficient_decrease * predicted;
                        if candidate.value <= point.value + bound {
                            accepted = Some((trial, candidate, bound, 0.0));
                            break;
                        }
                        if fallback.is_none() && candidate.value <= point.value + bound + noise {
                            fallback = Some((trial, candidate, bound, noise));
                        }
                    }
                }
                step *= config.backtracking;
            }
            if accepted.is_some() || attempt == 1 {
                break;
            }
            // quasi-Newton direction failed: restart from steepest descent
            pairs.clear();
            direction = steepest.clone();
            step = (1.0 / direction.amax().max(f64::MIN_POSITIVE)).min(1.0);
        }
        let (trial, candidate, bound, slack, g_new) = match (accepted, fallback) {
            (Some((trial, candidate, bound, slack)), _) => {
                let g_new = merit.gradient(&trial, &candidate.constraints)?;
                (trial, candidate, bound, slack, g_new)
            }
            (None, Some((trial, candidate, bound, slack))) => {
                let g_new = merit.gradient(&trial, &candidate.constraints)?;
                if projected_gradient_norm(&trial, &g_new, bounds) >= grad_norm {
                    break;
                }
                (trial, candidate, bound, slack, g_new)
            }
            (None, None) => break,
        };
        iterations += 1;
        if config.record_line_search {
            trace.push(LineSearchStep {
                merit_before: point.value,
                merit_after: candidate.value,
                armijo_bound: bound,
                rounding_slack: slack,
            });
        }
        let s = &trial - &v;
        let y = &g_new - &g;
        if s.dot(&y) > 1e-10 * s.norm() * y.norm() {
            if pairs.len() == config.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y));
        }
        v = trial;
        point = candidate;
        g = g_new;
        grad_norm = projected_gradient_norm(&v, &g, bounds);
    }

    Ok(InnerOutcome {
        v,
        point,
        grad_norm,
        iterations,
    })
}

/// Solves `min f(v)` subject to `c(v) = 0` and the NLP's box bounds.
///
/// Never panics or aborts on numeric trouble; failures are reported through
/// [`SolveStatus::NumericFailure`] with the offending iteration in `failure`.
pub fn solve<N: Nlp>(nlp: &N, config: &SolverConfig, initial: &DVector<f64>) -> Result<SolveResult> {
    config.validate()?;
    if initial.len() != nlp.num_variables() {
        return Err(Error::Dimension {
            context: "initial point",
            expected: nlp.num_variables(),
            actual: initial.len(),
        });
    }
    let bounds = nlp.bounds();
    let start = project_to_box(initial, bounds);
    let initial_clamped = start != *initial;

    let mut lambda = DVector::zeros(nlp.num_constraints());
    let mut rho = config.initial_penalty;
    let mut v = start;
    let mut history = Vec::new();
    let mut trace = Vec::new();
    let mut total_inner = 0;
    let mut inner_tol = (100.0 * config.gradient_tolerance).max(1e-2);
    let mut previous_feasibility = f64::INFINITY;
    let mut last: Option<(f64, f64, f64)> = None;

    let failure = |v: DVector<f64>,
                   lambda: DVector<f64>,
                   history: Vec<IterationRecord>,
                   trace: Vec<LineSearchStep>,
                   iterations: usize,
                   outer: usize,
                   err: Error| SolveResult {
        status: SolveStatus::NumericFailure,
        iterations,
        objective: f64::NAN,
        max_defect: f64::NAN,
        grad_norm: f64::NAN,
        solution: v,
        multipliers: lambda,
        history,
        line_search: trace,
        initial_clamped,
        failure: Some(format!("outer iteration {outer}: {err}")),
    };

    for outer in 0..config.max_outer_iterations {
        let merit = Merit {
            nlp,
            lambda: &lambda,
            rho,
        };
        let outcome = match solve_subproblem(&merit, bounds, v.clone(), inner_tol, config, &mut trace) {
            Ok(o) => o,
            Err(err) => return Ok(failure(v, lambda, history, trace, total_inner, outer, err)),
        };
        total_inner += outcome.iterations;
        v = outcome.v;
        let c = outcome.point.constraints;
        let feasibility = if !c.is_empty() { c.amax() } else { 0.0 };
        lambda += &c * rho;
        // the subproblem gradient at v equals ∇f + Jᵀ(λ + ρc), i.e. the Lagrangian gradient at the new λ
        let grad_norm = outcome.grad_norm;

        let converged = feasibility <= config.defect_tolerance && grad_norm <= config.gradient_tolerance;
        if !converged && feasibility > config.defect_tolerance && feasibility > 0.25 * previous_feasibility {
            rho = (rho * config.penalty_growth).min(config.max_penalty);
        }
        history.push(IterationRecord {
            iter: outer,
            objective: outcome.point.objective,
            feasibility,
            penalty_weight: rho,
            grad_norm,
            inner_iterations: outcome.iterations,
        });
        last = Some((outcome.point.objective, feasibility, grad_norm));
        if converged {
            break;
        }
        previous_feasibility = feasibility;
        inner_tol = (inner_tol * 0.1).max(config.gradient_tolerance);
    }

    let (objective, max_defect, grad_norm) = last.expect("at least one outer iteration");
    let status = if max_defect <= config.defect_tolerance && grad_norm <= config.gradient_tolerance {
        SolveStatus::Converged
    } else if max_defect <= config.defect_tolerance {
        SolveStatus::FeasibleButNotStationary
    } else {
        SolveStatus::IterationCap
    };
    Ok(SolveResult {
        status,
        iterations: total_inner,
        objective,
        max_defect,
        grad_norm,
        solution: v,
        multipliers: lambda,
        history,
        line_search: trace,
        initial_clamped,
        failure: None,
    })
}
