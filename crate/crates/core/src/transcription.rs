//! Direct transcription of the robust trajectory problem into an NLP.
//!
//! Decision variables are laid out as
//!
//! ```text
//! [ x_0 | x_1 | ... | x_T | u_0 | ... | u_{T-1} | W (row-major, n_u × n_x) ]
//! ```
//!
//! The objective is the quadratic trajectory cost plus `α Σ_k d_max,k` over
//! the knots that carry a control. Dynamics enter as Euler defects
//! `x_{k+1} − step(x_k, u_k)`; `x_0` is pinned through equal bounds.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{discrete_jacobians, step_euler, BoxBounds, DynamicsModel, JacobianPair};
use crate::error::{check_len, Error, Result};
use crate::linalg::{asymmetry, jacobi_eigen, relative_error};
use crate::robust_metric::{d_max_term, DeviationWeight, EllipsoidShape, RobustTerm};

/// Step used to difference the analytic Jacobians with respect to `(x_k, u_k)`.
const JACOBIAN_FD_STEP: f64 = 1e-6;
/// Step used when a degenerate knot falls back to differencing `d_max` itself.
const DEGENERATE_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub model: DynamicsModel,
    pub horizon: usize,
    pub dt: f64,
    pub x0: DVector<f64>,
    pub x_goal: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    pub alpha: f64,
    /// One shape per control-carrying knot (`horizon` entries).
    pub s_schedule: Vec<EllipsoidShape>,
    pub p: DeviationWeight,
    pub state_bounds: BoxBounds,
    pub control_bounds: BoxBounds,
    /// Optional box on the entries of `W` (row-major).
    pub gain_bounds: Option<BoxBounds>,
    /// Per-knot tolerances, reported but never enforced.
    pub epsilon_schedule: Option<Vec<f64>>,
}

impl ProblemSpec {
    /// Spec with model bounds, identity `P` and one shared ellipsoid.
    pub fn new(
        model: DynamicsModel,
        horizon: usize,
        dt: f64,
        x0: DVector<f64>,
        x_goal: DVector<f64>,
        weights: (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>),
        alpha: f64,
        shape: EllipsoidShape,
    ) -> Self {
        let n_x = model.n_x();
        let (q, r, q_terminal) = weights;
        Self {
            state_bounds: model.state_bounds.clone(),
            control_bounds: model.control_bounds.clone(),
            model,
            horizon,
            dt,
            x0,
            x_goal,
            q,
            r,
            q_terminal,
            alpha,
            s_schedule: vec![shape; horizon],
            p: DeviationWeight::identity(n_x),
            gain_bounds: None,
            epsilon_schedule: None,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            n_x: self.model.n_x(),
            n_u: self.model.n_u(),
            horizon: self.horizon,
        }
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let n_x = self.model.n_x();
        let n_u = self.model.n_u();
        if self.horizon < 2 {
            problems.push(format!("horizon T must be >= 2, got {}", self.horizon));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            problems.push(format!("dt must be positive, got {}", self.dt));
        }
        if self.x0.len() != n_x {
            problems.push(format!("x0 has length {}, expected {n_x}", self.x0.len()));
        }
        if self.x_goal.len() != n_x {
            problems.push(format!("x_goal has length {}, expected {n_x}", self.x_goal.len()));
        }
        for (name, m, n, pd) in [
            ("Q", &self.q, n_x, false),
            ("R", &self.r, n_u, true),
            ("Q_terminal", &self.q_terminal, n_x, false),
        ] {
            if m.nrows() != n || m.ncols() != n {
                problems.push(format!("{name} must be {n}x{n}, got {}x{}", m.nrows(), m.ncols()));
                continue;
            }
            if asymmetry(m) > 1e-12 {
                problems.push(format!("{name} must be symmetric"));
                continue;
            }
            let (values, _) = jacobi_eigen(m);
            let min = values.min();
            if pd && min <= 0.0 {
                problems.push(format!("{name} must be positive definite (min eigenvalue {min})"));
            } else if !pd && min < -1e-12 {
                problems.push(format!("{name} must be positive semidefinite (min eigenvalue {min})"));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            problems.push(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.s_schedule.len() != self.horizon {
            problems.push(format!(
                "S schedule has {} shapes, expected {}",
                self.s_schedule.len(),
                self.horizon
            ));
        }
        if self.s_schedule.iter().any(|s| s.dim() != n_x) {
            problems.push(format!("every S must have dimension {n_x}"));
        }
        if self.p.matrix().nrows() != n_x {
            problems.push(format!("P must be {n_x}x{n_x}"));
        }
        if self.state_bounds.dim() != n_x {
            problems.push(format!("state bounds must have dimension {n_x}"));
        } else if self.x0.len() == n_x && !self.state_bounds.contains(&self.x0) {
            problems.push("x0 lies outside the state bounds".to_string());
        }
        if self.control_bounds.dim() != n_u {
            problems.push(format!("control bounds must have dimension {n_u}"));
        }
        if let Some(gb) = &self.gain_bounds {
            if gb.dim() != n_u * n_x {
                problems.push(format!("gain bounds must have dimension {}", n_u * n_x));
            }
        }
        if let Some(eps) = &self.epsilon_schedule {
            if eps.len() != self.horizon {
                problems.push(format!("epsilon schedule must have {} entries", self.horizon));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Index arithmetic for the flat decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
}

impl Layout {
    pub fn state_offset(&self, k: usize) -> usize {
        k * self.n_x
    }

    pub fn control_offset(&self, k: usize) -> usize {
        (self.horizon + 1) * self.n_x + k * self.n_u
    }

    pub fn gain_offset(&self) -> usize {
        (self.horizon + 1) * self.n_x + self.horizon * self.n_u
    }

    pub fn num_variables(&self) -> usize {
        self.gain_offset() + self.n_u * self.n_x
    }

    pub fn num_constraints(&self) -> usize {
        self.horizon * self.n_x
    }
}

/// Structured view of the decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub gain: DMatrix<f64>,
}

impl DecisionVector {
    pub fn zeros(layout: &Layout) -> Self {
        Self {
            states: vec![DVector::zeros(layout.n_x); layout.horizon + 1],
            controls: vec![DVector::zeros(layout.n_u); layout.horizon],
            gain: DMatrix::zeros(layout.n_u, layout.n_x),
        }
    }

    pub fn pack(&self, layout: &Layout) -> DVector<f64> {
        let mut flat = DVector::zeros(layout.num_variables());
        for (k, x) in self.states.iter().enumerate() {
            flat.rows_mut(layout.state_offset(k), layout.n_x).copy_from(x);
        }
        for (k, u) in self.controls.iter().enumerate() {
            flat.rows_mut(layout.control_offset(k), layout.n_u).copy_from(u);
        }
        let g = layout.gain_offset();
        for i in 0..layout.n_u {
            for j in 0..layout.n_x {
                flat[g + i * layout.n_x + j] = self.gain[(i, j)];
            }
        }
        flat
    }

    pub fn unpack(layout: &Layout, flat: &DVector<f64>) -> Result<Self> {
        check_len("decision vector", layout.num_variables(), flat.len())?;
        let states = (0..=layout.horizon)
            .map(|k| flat.rows(layout.state_offset(k), layout.n_x).into_owned())
            .collect();
        let controls = (0..layout.horizon)
            .map(|k| flat.rows(layout.control_offset(k), layout.n_u).into_owned())
            .collect();
        Ok(Self {
            states,
            controls,
            gain: gain_from_flat(layout, flat),
        })
    }
}

fn gain_from_flat(layout: &Layout, flat: &DVector<f64>) -> DMatrix<f64> {
    let g = layout.gain_offset();
    DMatrix::from_fn(layout.n_u, layout.n_x, |i, j| flat[g + i * layout.n_x + j])
}

/// `(x − x_goal)ᵀ Q (x − x_goal) + uᵀ R u`; with `u = None` the terminal weight is used.
pub fn quadratic_cost(spec: &ProblemSpec, x: &DVector<f64>, u: Option<&DVector<f64>>) -> f64 {
    let e = x - &spec.x_goal;
    match u {
        Some(u) => (e.transpose() * &spec.q * &e)[0] + (u.transpose() * &spec.r * u)[0],
        None => (e.transpose() * &spec.q_terminal * &e)[0],
    }
}

/// Plain trajectory cost `Σ c(x_k, u_k) + c_T(x_T)`.
pub fn trajectory_cost(spec: &ProblemSpec, v: &DecisionVector) -> f64 {
    let running: f64 = (0..spec.horizon)
        .map(|k| quadratic_cost(spec, &v.states[k], Some(&v.controls[k])))
        .sum();
    running + quadratic_cost(spec, &v.states[spec.horizon], None)
}

/// Robust terms `d_max,k` along the trajectory for a given gain.
pub fn penalty_profile(
    spec: &ProblemSpec,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    gain: &DMatrix<f64>,
) -> Result<Vec<RobustTerm>> {
    (0..spec.horizon)
        .into_par_iter()
        .map(|k| knot_term(spec, &states[k], &controls[k], gain, k))
        .collect()
}

fn knot_term(
    spec: &ProblemSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    gain: &DMatrix<f64>,
    k: usize,
) -> Result<RobustTerm> {
    let jac = discrete_jacobians(&spec.model, x, u, spec.dt).map_err(|e| at_knot(k, e))?;
    d_max_term(&jac.a, &jac.b, gain, &spec.s_schedule[k], &spec.p).map_err(|e| at_knot(k, e))
}

fn at_knot(k: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("knot {k}: {msg}")),
        Error::NoConvergence { iterations, residual } => Error::Numeric(format!(
            "knot {k}: eigen solver did not converge after {iterations} iterations (residual {residual:e})"
        )),
        other => other,
    }
}

/// Trajectory cost plus `α Σ_k d_max,k`.
pub fn total_objective(spec: &ProblemSpec, v: &DecisionVector) -> Result<f64> {
    let cost = trajectory_cost(spec, v);
    if spec.alpha == 0.0 {
        return Ok(cost);
    }
    let terms = penalty_profile(spec, &v.states, &v.controls, &v.gain)?;
    let penalty: f64 = terms.iter().map(|t| t.d_max).sum();
    Ok(cost + spec.alpha * penalty)
}

/// Euler defects `x_{k+1} − step(x_k, u_k)`, stacked by knot.
pub fn defects(spec: &ProblemSpec, v: &DecisionVector) -> Result<DVector<f64>> {
    let n_x = spec.model.n_x();
    let mut out = DVector::zeros(spec.horizon * n_x);
    for k in 0..spec.horizon {
        let next = step_euler(&spec.model, &v.states[k], &v.controls[k], spec.dt)
            .map_err(|e| at_knot(k, e))?;
        out.rows_mut(k * n_x, n_x).copy_from(&(&v.states[k + 1] - next));
    }
    Ok(out)
}

/// Gradient of the knot penalty wrt `(x_k, u_k)` and `W`, plus whether the knot was degenerate.
struct KnotGradient {
    d_state: DVector<f64>,
    d_control: DVector<f64>,
    d_gain: DMatrix<f64>,
    degenerate: bool,
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn knot_gradient(
    spec: &ProblemSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    gain: &DMatrix<f64>,
    k: usize,
) -> Result<KnotGradient> {
    let term = knot_term(spec, x, u, gain, k)?;
    if term.is_degenerate() {
        return knot_gradient_fd(spec, x, u, gain, k);
    }
    let model = &spec.model;
    let h = JACOBIAN_FD_STEP;
    // ∂A/∂z and ∂B/∂z by central differences of the analytic Jacobians
    let chain = |plus: JacobianPair, minus: JacobianPair| {
        let da = (plus.a - minus.a) / (2.0 * h);
        let db = (plus.b - minus.b) / (2.0 * h);
        frob(&term.grad_a, &da) + frob(&term.grad_b, &db)
    };
    let mut d_state = DVector::zeros(x.len());
    for j in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[j] += h;
        xm[j] -= h;
        d_state[j] = chain(
            discrete_jacobians(model, &xp, u, spec.dt)?,
            discrete_jacobians(model, &xm, u, spec.dt)?,
        );
    }
    let mut d_control = DVector::zeros(u.len());
    for j in 0..u.len() {
        let (mut up, mut um) = (u.clone(), u.clone());
        up[j] += h;
        um[j] -= h;
        d_control[j] = chain(
            discrete_jacobians(model, x, &up, spec.dt)?,
            discrete_jacobians(model, x, &um, spec.dt)?,
        );
    }
    Ok(KnotGradient {
        d_state,
        d_control,
        d_gain: term.grad_w,
        degenerate: false,
    })
}

/// Fallback for a repeated top eigenvalue: central differences of `d_max,k`.
fn knot_gradient_fd(
    spec: &ProblemSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    gain: &DMatrix<f64>,
    k: usize,
) -> Result<KnotGradient> {
    let h = DEGENERATE_FD_STEP;
    let eval = |x: &DVector<f64>, u: &DVector<f64>, w: &DMatrix<f64>| -> Result<f64> {
        Ok(knot_term(spec, x, u, w, k)?.d_max)
    };
    let mut d_state = DVector::zeros(x.len());
    for j in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[j] += h;
        xm[j] -= h;
        d_state[j] = (eval(&xp, u, gain)? - eval(&xm, u, gain)?) / (2.0 * h);
    }
    let mut d_control = DVector::zeros(u.len());
    for j in 0..u.len() {
        let (mut up, mut um) = (u.clone(), u.clone());
        up[j] += h;
        um[j] -= h;
        d_control[j] = (eval(x, &up, gain)? - eval(x, &um, gain)?) / (2.0 * h);
    }
    let mut d_gain = DMatrix::zeros(gain.nrows(), gain.ncols());
    for i in 0..gain.len() {
        let (mut wp, mut wm) = (gain.clone(), gain.clone());
        wp[i] += h;
        wm[i] -= h;
        d_gain[i] = (eval(x, u, &wp)? - eval(x, u, &wm)?) / (2.0 * h);
    }
    Ok(KnotGradient {
        d_state,
        d_control,
        d_gain,
        degenerate: true,
    })
}

/// Gradient of [`total_objective`] in the flat layout, and the knots whose
/// penalty gradient fell back to finite differences.
pub fn objective_gradient(spec: &ProblemSpec, v: &DecisionVector) -> Result<(DVector<f64>, Vec<usize>)> {
    let layout = spec.layout();
    let mut grad = DVector::zeros(layout.num_variables());
    for k in 0..spec.horizon {
        let e = &v.states[k] - &spec.x_goal;
        let gx = (&spec.q + spec.q.transpose()) * e;
        let gu = (&spec.r + spec.r.transpose()) * &v.controls[k];
        grad.rows_mut(layout.state_offset(k), layout.n_x).copy_from(&gx);
        grad.rows_mut(layout.control_offset(k), layout.n_u).copy_from(&gu);
    }
    let e = &v.states[spec.horizon] - &spec.x_goal;
    let gt = (&spec.q_terminal + spec.q_terminal.transpose()) * e;
    grad.rows_mut(layout.state_offset(spec.horizon), layout.n_x)
        .copy_from(&gt);

    let mut degenerate = Vec::new();
    if spec.alpha == 0.0 {
        return Ok((grad, degenerate));
    }
    let knots: Vec<KnotGradient> = (0..spec.horizon)
        .into_par_iter()
        .map(|k| knot_gradient(spec, &v.states[k], &v.controls[k], &v.gain, k))
        .collect::<Result<_>>()?;
    let mut d_gain = DMatrix::zeros(layout.n_u, layout.n_x);
    for (k, kg) in knots.iter().enumerate() {
        let xs = layout.state_offset(k);
        let us = layout.control_offset(k);
        for j in 0..layout.n_x {
            grad[xs + j] += spec.alpha * kg.d_state[j];
        }
        for j in 0..layout.n_u {
            grad[us + j] += spec.alpha * kg.d_control[j];
        }
        d_gain += &kg.d_gain;
        if kg.degenerate {
            degenerate.push(k);
        }
    }
    let g = layout.gain_offset();
    for i in 0..layout.n_u {
        for j in 0..layout.n_x {
            grad[g + i * layout.n_x + j] = spec.alpha * d_gain[(i, j)];
        }
    }
    Ok((grad, degenerate))
}

/// One dense block of the sparse constraint Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock {
    pub row: usize,
    pub col: usize,
    pub block: DMatrix<f64>,
}

/// Interface the solver needs from a transcribed problem.
pub trait Nlp {
    fn num_variables(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn bounds(&self) -> &BoxBounds;
    fn objective(&self, v: &DVector<f64>) -> Result<f64>;
    fn objective_gradient(&self, v: &DVector<f64>) -> Result<DVector<f64>>;
    fn constraints(&self, v: &DVector<f64>) -> Result<DVector<f64>>;
    fn constraint_jacobian(&self, v: &DVector<f64>) -> Result<Vec<JacobianBlock>>;

    /// Optional positive semidefinite model of the objective Hessian, used to
    /// precondition the quasi-Newton inner solver.
    fn curvature_estimate(&self, _v: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        Ok(None)
    }
}

/// Dense `JᵀJ` from row blocks.
pub fn jacobian_gram(blocks: &[JacobianBlock], n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for (i, bi) in blocks.iter().enumerate() {
        for bj in &blocks[i..] {
            let (r0, r1) = (bi.row.max(bj.row), (bi.row + bi.block.nrows()).min(bj.row + bj.block.nrows()));
            if r0 >= r1 {
                continue;
            }
            let rows_i = bi.block.rows(r0 - bi.row, r1 - r0);
            let rows_j = bj.block.rows(r0 - bj.row, r1 - r0);
            let prod = rows_i.transpose() * rows_j;
            let mut target = out.view_mut((bi.col, bj.col), (prod.nrows(), prod.ncols()));
            target += &prod;
            if !std::ptr::eq(bi, bj) {
                let mut mirror = out.view_mut((bj.col, bi.col), (prod.ncols(), prod.nrows()));
                mirror += prod.transpose();
            }
        }
    }
    out
}

/// Computes `Jᵀ y` from row blocks.
pub fn jacobian_transpose_product(blocks: &[JacobianBlock], y: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    for b in blocks {
        let yb = y.rows(b.row, b.block.nrows());
        let contrib = b.block.transpose() * yb;
        let mut target = out.rows_mut(b.col, b.block.ncols());
        target += contrib;
    }
    out
}

/// The robust trajectory problem packaged for the solver.
#[derive(Debug, Clone)]
pub struct TrajectoryNlp {
    spec: ProblemSpec,
    layout: Layout,
    bounds: BoxBounds,
}

/// Validates `spec` and assembles variable bounds (`x_0` pinned, `W` free unless boxed).
pub fn build_nlp(spec: ProblemSpec) -> Result<TrajectoryNlp> {
    spec.validate()?;
    let layout = spec.layout();
    let n = layout.num_variables();
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for k in 0..=layout.horizon {
        let o = layout.state_offset(k);
        for j in 0..layout.n_x {
            let (lo, hi) = if k == 0 {
                (spec.x0[j], spec.x0[j])
            } else {
                (spec.state_bounds.lower[j], spec.state_bounds.upper[j])
            };
            lower[o + j] = lo;
            upper[o + j] = hi;
        }
    }
    for k in 0..layout.horizon {
        let o = layout.control_offset(k);
        for j in 0..layout.n_u {
            lower[o + j] = spec.control_bounds.lower[j];
            upper[o + j] = spec.control_bounds.upper[j];
        }
    }
    if let Some(gb) = &spec.gain_bounds {
        let o = layout.gain_offset();
        for j in 0..gb.dim() {
            lower[o + j] = gb.lower[j];
            upper[o + j] = gb.upper[j];
        }
    }
    let bounds = BoxBounds::new(lower, upper)?;
    Ok(TrajectoryNlp { spec, layout, bounds })
}

impl TrajectoryNlp {
    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn unpack(&self, v: &DVector<f64>) -> Result<DecisionVector> {
        DecisionVector::unpack(&self.layout, v)
    }

    /// Gradient together with the knots that needed the finite-difference fallback.
    pub fn objective_gradient_with_report(&self, v: &DVector<f64>) -> Result<(DVector<f64>, Vec<usize>)> {
        objective_gradient(&self.spec, &self.unpack(v)?)
    }
}

impl Nlp for TrajectoryNlp {
    fn num_variables(&self) -> usize {
        self.layout.num_variables()
    }

    fn num_constraints(&self) -> usize {
        self.layout.num_constraints()
    }

    fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    fn objective(&self, v: &DVector<f64>) -> Result<f64> {
        total_objective(&self.spec, &self.unpack(v)?)
    }

    fn objective_gradient(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.objective_gradient_with_report(v)?.0)
    }

    fn constraints(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        defects(&self.spec, &self.unpack(v)?)
    }

    /// Exact Hessian of the quadratic cost plus, for the gain block, the
    /// Hessian of `α Σ_k ‖P^{1/2}(A_k + B_k W) y_k‖²` with each maximizer `y_k` frozen.
    fn curvature_estimate(&self, v: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        let spec = &self.spec;
        let l = self.layout;
        let mut h = DMatrix::zeros(l.num_variables(), l.num_variables());
        let q = &spec.q + spec.q.transpose();
        let r = &spec.r + spec.r.transpose();
        for k in 0..l.horizon {
            h.view_mut((l.state_offset(k), l.state_offset(k)), (l.n_x, l.n_x))
                .copy_from(&q);
            h.view_mut((l.control_offset(k), l.control_offset(k)), (l.n_u, l.n_u))
                .copy_from(&r);
        }
        let t = l.state_offset(l.horizon);
        h.view_mut((t, t), (l.n_x, l.n_x))
            .copy_from(&(&spec.q_terminal + spec.q_terminal.transpose()));
        if spec.alpha == 0.0 {
            return Ok(Some(h));
        }

        let d = self.unpack(v)?;
        let blocks: Vec<DMatrix<f64>> = (0..l.horizon)
            .into_par_iter()
            .map(|k| {
                let jac = discrete_jacobians(&spec.model, &d.states[k], &d.controls[k], spec.dt)?;
                let term = d_max_term(&jac.a, &jac.b, &d.gain, &spec.s_schedule[k], &spec.p)?;
                let bpb = jac.b.transpose() * spec.p.matrix() * &jac.b;
                let yy = &term.delta_max * term.delta_max.transpose();
                Ok(bpb.kronecker(&yy) * (2.0 * spec.alpha))
            })
            .collect::<Result<_>>()?;
        let g = l.gain_offset();
        let m = l.n_u * l.n_x;
        let mut gain_block = h.view_mut((g, g), (m, m));
        for b in &blocks {
            gain_block += b;
        }
        Ok(Some(h))
    }

    fn constraint_jacobian(&self, v: &DVector<f64>) -> Result<Vec<JacobianBlock>> {
        let d = self.unpack(v)?;
        let l = self.layout;
        let mut blocks = Vec::with_capacity(3 * l.horizon);
        for k in 0..l.horizon {
            let jac = discrete_jacobians(&self.spec.model, &d.states[k], &d.controls[k], self.spec.dt)?;
            let row = k * l.n_x;
            blocks.push(JacobianBlock {
                row,
                col: l.state_offset(k + 1),
                block: DMatrix::identity(l.n_x, l.n_x),
            });
            blocks.push(JacobianBlock {
                row,
                col: l.state_offset(k),
                block: -jac.a,
            });
            blocks.push(JacobianBlock {
                row,
                col: l.control_offset(k),
                block: -jac.b,
            });
        }
        Ok(blocks)
    }
}

/// Central-difference gradient of `f` with per-coordinate step `h·max(1, |v_i|)`.
pub fn finite_difference_gradient<F>(f: F, v: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64> + Sync,
{
    let entries: Vec<f64> = (0..v.len())
        .into_par_iter()
        .map(|i| {
            let step = h * v[i].abs().max(1.0);
            let (mut vp, mut vm) = (v.clone(), v.clone());
            vp[i] += step;
            vm[i] -= step;
            Ok((f(&vp)? - f(&vm)?) / (2.0 * step))
        })
        .collect::<Result<_>>()?;
    Ok(DVector::from_vec(entries))
}

/// Outcome of comparing the analytic objective gradient with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub relative_error: f64,
    /// Knots whose penalty gradient used the fallback; their `x_k, u_k` entries are excluded.
    pub degenerate_knots: Vec<usize>,
}

/// Compares `analytic` against central differences of the objective at `v`.
pub fn check_gradient(nlp: &TrajectoryNlp, v: &DVector<f64>, analytic: &DVector<f64>, degenerate: &[usize]) -> Result<GradientCheck> {
    let fd = finite_difference_gradient(|z| nlp.objective(z), v, 1e-6)?;
    let l = nlp.layout();
    let mut keep = vec![true; v.len()];
    for &k in degenerate {
        for j in 0..l.n_x {
            keep[l.state_offset(k) + j] = false;
        }
        for j in 0..l.n_u {
            keep[l.control_offset(k) + j] = false;
        }
    }
    let a: Vec<f64> = (0..v.len()).filter(|&i| keep[i]).map(|i| analytic[i]).collect();
    let b: Vec<f64> = (0..v.len()).filter(|&i| keep[i]).map(|i| fd[i]).collect();
    Ok(GradientCheck {
        relative_error: relative_error(&a, &b),
        degenerate_knots: degenerate.to_vec(),
    })
}
