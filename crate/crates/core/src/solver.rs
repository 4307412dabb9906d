//! Local solvers for the trajectory problem and the stationary-point
//! negotiation problem.
//!
//! Both use single shooting: the inputs are the trajectory decision variables
//! and states come from rollout, so the initial condition and the dynamics
//! hold exactly. Equalities (terminal state, stationarity) are handled by an
//! augmented Lagrangian, input and stationary-pair boxes by projection, and
//! finite state bounds along the horizon by a quadratic penalty. Inner
//! iterations are projected Newton steps (eigenvalues of the free-variable
//! Hessian replaced by their magnitudes, every step capped at `max_step`)
//! with a projected-gradient fallback and Armijo backtracking, so accepted
//! iterates never increase the augmented objective. After each round a
//! Gauss-Newton restoration pushes the iterate onto the equality constraints.
//!
//! When a solve ends on a point with negative curvature (typically two
//! plates sitting exactly on top of each other, where the smoothed overlap
//! has a symmetric peak), the solver steps along the most negative curvature
//! direction. The sign of that direction is an explicit input (`tie_break`),
//! which keeps the solver a pure function of its arguments.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgentModel, Dynamics, StationaryPoint, Trajectory};
use crate::objective::{
    add_cooperative_gradient, cooperative_stage_cost, AgentView, AssumedNeighborData, CostMode, CostNeighborhood,
    StageCost,
};

/// Accepted line-search step: new point, its merit value, its merit gradient.
type AcceptedStep = (DVector<f64>, f64, DVector<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepRule {
    pub initial: f64,
    pub shrink: f64,
    pub armijo: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Augmented-Lagrangian rounds.
    pub max_outer: usize,
    /// Projected-gradient steps per round.
    pub max_inner: usize,
    pub step_rule: StepRule,
    /// Tolerance on the infinity norm of the projected gradient.
    pub tol_grad: f64,
    /// Tolerance on the infinity norm of the equality residual.
    pub tol_eq: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    /// Smoothing width of the overlap surrogate (m).
    pub mu_smooth: f64,
    /// Largest change of any decision variable in one inner step; keeps each
    /// solve near its warm start on this non-convex problem.
    pub max_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer: 8,
            max_inner: 200,
            step_rule: StepRule::default(),
            tol_grad: 1e-8,
            tol_eq: 1e-8,
            penalty_init: 1.0,
            penalty_growth: 10.0,
            mu_smooth: 1e-3,
            max_step: 0.05,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol_grad", self.tol_grad),
            ("tol_eq", self.tol_eq),
            ("penalty_init", self.penalty_init),
            ("mu_smooth", self.mu_smooth),
            ("max_step", self.max_step),
            ("step_rule.initial", self.step_rule.initial),
            ("step_rule.armijo", self.step_rule.armijo),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("solver.{name} must be positive, got {v}")));
            }
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config(
                "solver.max_outer and solver.max_inner must be >= 1".into(),
            ));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::Config(format!(
                "solver.penalty_growth must exceed 1, got {}",
                self.penalty_growth
            )));
        }
        if !(self.step_rule.shrink > 0.0 && self.step_rule.shrink < 1.0) {
            return Err(Error::Config(format!(
                "solver.step_rule.shrink must lie in (0, 1), got {}",
                self.step_rule.shrink
            )));
        }
        if self.step_rule.armijo >= 1.0 {
            return Err(Error::Config("solver.step_rule.armijo must be < 1".into()));
        }
        Ok(())
    }

    fn smoothed(&self) -> CostMode {
        CostMode::Smoothed { mu: self.mu_smooth }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub trajectory: Trajectory,
    /// The stationary pair: the optimized one for the stationary problem, the
    /// terminal target for the trajectory problem.
    pub stationary: StationaryPoint,
    /// Smoothed objective.
    pub objective: f64,
    /// Objective with the exact overlap cost.
    pub objective_exact: f64,
    pub eq_residual: f64,
    pub converged: bool,
    pub inner_iterations: usize,
    /// True when the warm start was returned because the solve did not improve on it.
    pub kept_warm_start: bool,
}

/// Everything a local problem depends on besides its decision variables.
#[derive(Debug, Clone, Copy)]
pub struct LocalProblem<'a> {
    pub model: &'a AgentModel,
    pub cost: &'a dyn StageCost,
    pub nbhd: &'a CostNeighborhood,
    pub assumed: &'a AssumedNeighborData,
    /// Measured state, the start of the prediction horizon.
    pub x0: &'a DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Kind<'a> {
    Trajectory { target: &'a StationaryPoint },
    Stationary,
}

/// Decision layout `[u^0 .. u^{H-1}]` (trajectory) or
/// `[u^0 .. u^{H-1}, x_s, u_s]` (stationary).
#[derive(Debug, Clone, Copy)]
struct Formulation<'a> {
    p: LocalProblem<'a>,
    kind: Kind<'a>,
    horizon: usize,
}

impl<'a> Formulation<'a> {
    fn n(&self) -> usize {
        self.p.model.n()
    }

    fn m(&self) -> usize {
        self.p.model.m()
    }

    fn dim(&self) -> usize {
        match self.kind {
            Kind::Trajectory { .. } => self.horizon * self.m(),
            Kind::Stationary => self.horizon * self.m() + self.n() + self.m(),
        }
    }

    fn n_eq(&self) -> usize {
        match self.kind {
            Kind::Trajectory { .. } => self.n(),
            Kind::Stationary => 2 * self.n(),
        }
    }

    fn xs_offset(&self) -> usize {
        self.horizon * self.m()
    }

    fn us_offset(&self) -> usize {
        self.xs_offset() + self.n()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let model = self.p.model;
        let d = self.dim();
        let mut lo = DVector::zeros(d);
        let mut hi = DVector::zeros(d);
        let m = self.m();
        for k in 0..self.horizon {
            lo.rows_mut(k * m, m).copy_from(&model.u_lo);
            hi.rows_mut(k * m, m).copy_from(&model.u_hi);
        }
        if let Kind::Stationary = self.kind {
            lo.rows_mut(self.xs_offset(), self.n()).copy_from(&model.x_lo);
            hi.rows_mut(self.xs_offset(), self.n()).copy_from(&model.x_hi);
            lo.rows_mut(self.us_offset(), m).copy_from(&model.u_lo);
            hi.rows_mut(self.us_offset(), m).copy_from(&model.u_hi);
        }
        (lo, hi)
    }

    fn inputs(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        let m = self.m();
        (0..self.horizon).map(|k| z.rows(k * m, m).into_owned()).collect()
    }

    fn stationary_of(&self, z: &DVector<f64>) -> StationaryPoint {
        match self.kind {
            Kind::Trajectory { target } => target.clone(),
            Kind::Stationary => StationaryPoint::new(
                z.rows(self.xs_offset(), self.n()).into_owned(),
                z.rows(self.us_offset(), self.m()).into_owned(),
            ),
        }
    }

    fn pack(&self, inputs: &[DVector<f64>], stationary: Option<&StationaryPoint>) -> Result<DVector<f64>> {
        if inputs.len() != self.horizon {
            return Err(Error::HorizonMismatch {
                expected: self.horizon,
                got: inputs.len(),
            });
        }
        let m = self.m();
        let mut z = DVector::zeros(self.dim());
        for (k, u) in inputs.iter().enumerate() {
            if u.len() != m {
                return Err(Error::contract("warm-start input has wrong dimension"));
            }
            z.rows_mut(k * m, m).copy_from(u);
        }
        if let (Kind::Stationary, Some(p)) = (self.kind, stationary) {
            z.rows_mut(self.xs_offset(), self.n()).copy_from(&p.x_s);
            z.rows_mut(self.us_offset(), m).copy_from(&p.u_s);
        }
        Ok(z)
    }

    fn rollout(&self, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(self.p.x0.clone());
        for u in inputs {
            let next = self.p.model.step(states.last().expect("non-empty"), u);
            states.push(next);
        }
        states
    }

    fn equality_residual(&self, z: &DVector<f64>, states: &[DVector<f64>]) -> DVector<f64> {
        let terminal = &states[self.horizon];
        match self.kind {
            Kind::Trajectory { target } => terminal - &target.x_s,
            Kind::Stationary => {
                let sp = self.stationary_of(z);
                let c1 = &sp.x_s - self.p.model.step(&sp.x_s, &sp.u_s);
                let c2 = terminal - &sp.x_s;
                let mut c = DVector::zeros(2 * self.n());
                c.rows_mut(0, self.n()).copy_from(&c1);
                c.rows_mut(self.n(), self.n()).copy_from(&c2);
                c
            }
        }
    }

    /// Signed box violation of a state (zero inside the box).
    fn state_violation(&self, x: &DVector<f64>) -> DVector<f64> {
        let model = self.p.model;
        DVector::from_iterator(
            x.len(),
            x.iter().enumerate().map(|(i, &v)| {
                if v > model.x_hi[i] {
                    v - model.x_hi[i]
                } else if v < model.x_lo[i] {
                    v - model.x_lo[i]
                } else {
                    0.0
                }
            }),
        )
    }

    /// Largest violation of any equality or state bound.
    fn feasibility_residual(&self, z: &DVector<f64>) -> f64 {
        let states = self.rollout(&self.inputs(z));
        let mut res = self.equality_residual(z, &states).amax();
        if self.p.model.has_finite_state_bounds() {
            for x in &states[1..] {
                res = res.max(self.state_violation(x).amax());
            }
        }
        res
    }

    fn objective(&self, z: &DVector<f64>, mode: CostMode) -> Result<f64> {
        match self.kind {
            Kind::Trajectory { .. } => {
                let inputs = self.inputs(z);
                let states = self.rollout(&inputs);
                let mut total = 0.0;
                for k in 0..self.horizon {
                    let lookup = self.p.assumed.at_step(k);
                    let own = AgentView::new(states[k].as_slice(), inputs[k].as_slice());
                    total += cooperative_stage_cost(self.p.cost, self.p.nbhd, own, &lookup, mode)?;
                }
                Ok(total)
            }
            Kind::Stationary => {
                let sp = self.stationary_of(z);
                let lookup = self.p.assumed.at_stationary();
                let own = AgentView::new(sp.x_s.as_slice(), sp.u_s.as_slice());
                cooperative_stage_cost(self.p.cost, self.p.nbhd, own, &lookup, mode)
            }
        }
    }

    /// Augmented Lagrangian value and gradient:
    /// `f(z) + lam^T c(z) + rho/2 |c(z)|^2 + rho/2 |state violation|^2`.
    ///
    /// With `lam = 0`, `rho = 0` this is the plain objective.
    fn augmented(&self, z: &DVector<f64>, lam: &DVector<f64>, rho: f64, mode: CostMode) -> Result<(f64, DVector<f64>)> {
        let n = self.n();
        let m = self.m();
        let h = self.horizon;
        let inputs = self.inputs(z);
        let states = self.rollout(&inputs);
        let mut grad = DVector::zeros(self.dim());
        let mut value = 0.0;

        // Per-step direct sensitivities with respect to x^k and u^k.
        let mut qx = vec![DVector::<f64>::zeros(n); h + 1];
        let mut qu = vec![DVector::<f64>::zeros(m); h];

        match self.kind {
            Kind::Trajectory { .. } => {
                for k in 0..h {
                    let lookup = self.p.assumed.at_step(k);
                    let own = AgentView::new(states[k].as_slice(), inputs[k].as_slice());
                    value += cooperative_stage_cost(self.p.cost, self.p.nbhd, own, &lookup, mode)?;
                    add_cooperative_gradient(
                        self.p.cost,
                        self.p.nbhd,
                        own,
                        &lookup,
                        mode,
                        qx[k].as_mut_slice(),
                        qu[k].as_mut_slice(),
                    )?;
                }
            }
            Kind::Stationary => {
                let sp = self.stationary_of(z);
                let lookup = self.p.assumed.at_stationary();
                let own = AgentView::new(sp.x_s.as_slice(), sp.u_s.as_slice());
                value += cooperative_stage_cost(self.p.cost, self.p.nbhd, own, &lookup, mode)?;
                let mut gx = DVector::zeros(n);
                let mut gu = DVector::zeros(m);
                add_cooperative_gradient(
                    self.p.cost,
                    self.p.nbhd,
                    own,
                    &lookup,
                    mode,
                    gx.as_mut_slice(),
                    gu.as_mut_slice(),
                )?;
                let mut gxs = grad.rows_mut(self.xs_offset(), n);
                gxs += gx;
                let mut gus = grad.rows_mut(self.us_offset(), m);
                gus += gu;
            }
        }

        if rho > 0.0 && self.p.model.has_finite_state_bounds() {
            for k in 1..=h {
                let v = self.state_violation(&states[k]);
                value += 0.5 * rho * v.norm_squared();
                qx[k] += rho * v;
            }
        }

        let c = self.equality_residual(z, &states);
        if rho > 0.0 || lam.iter().any(|l| *l != 0.0) {
            value += lam.dot(&c) + 0.5 * rho * c.norm_squared();
            let r = lam + rho * &c;
            match self.kind {
                Kind::Trajectory { .. } => qx[h] += &r,
                Kind::Stationary => {
                    let sp = self.stationary_of(z);
                    let r1 = r.rows(0, n).into_owned();
                    let r2 = r.rows(n, n).into_owned();
                    qx[h] += &r2;
                    let (a_s, b_s) = self.p.model.jacobians(&sp.x_s, &sp.u_s);
                    let gxs_c = &r1 - a_s.transpose() * &r1 - &r2;
                    let gus_c = -(b_s.transpose() * &r1);
                    let mut gxs = grad.rows_mut(self.xs_offset(), n);
                    gxs += gxs_c;
                    let mut gus = grad.rows_mut(self.us_offset(), m);
                    gus += gus_c;
                }
            }
        }

        // Adjoint sweep through the shooting dynamics; x^0 is fixed.
        let mut costate = qx[h].clone();
        for k in (0..h).rev() {
            let (a_k, b_k) = self.p.model.jacobians(&states[k], &inputs[k]);
            let gu = &qu[k] + b_k.transpose() * &costate;
            let mut slot = grad.rows_mut(k * m, m);
            slot += gu;
            if k > 0 {
                costate = &qx[k] + a_k.transpose() * &costate;
            }
        }
        Ok((value, grad))
    }
}

fn project(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        z.len(),
        z.iter()
            .zip(lo.iter().zip(hi.iter()))
            .map(|(v, (l, h))| v.clamp(*l, *h)),
    )
}

/// Scale `d` down so that no component exceeds `cap`.
fn cap_step(d: DVector<f64>, cap: f64) -> DVector<f64> {
    let big = d.amax();
    if big > cap {
        d * (cap / big)
    } else {
        d
    }
}

fn projected_gradient_norm(z: &DVector<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    (z - project(&(z - g), lo, hi)).amax()
}

struct InnerOutcome {
    z: DVector<f64>,
    iterations: usize,
    /// The line search could not make progress (roundoff level reached).
    stalled: bool,
}

const MAX_ESCAPES: usize = 2;
const NEGATIVE_CURVATURE_TOL: f64 = 1e-3;

/// Single-agent local solver. Stateless apart from its configuration, so
/// identical inputs always produce identical results.
#[derive(Debug, Clone)]
pub struct LocalSolver {
    cfg: SolverConfig,
}

impl LocalSolver {
    pub fn new(cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    /// Minimize the horizon cost subject to reaching `target.x_s` at the end of
    /// the horizon.
    pub fn solve_trajectory(
        &self,
        problem: LocalProblem<'_>,
        target: &StationaryPoint,
        warm_start: &[DVector<f64>],
        tie_break: f64,
    ) -> Result<SolveResult> {
        let f = Formulation {
            p: problem,
            kind: Kind::Trajectory { target },
            horizon: warm_start.len(),
        };
        let z0 = f.pack(warm_start, None)?;
        self.solve(&f, z0, tie_break)
    }

    /// Minimize the cooperative stage cost over stationary pairs reachable from
    /// the measured state within the horizon.
    pub fn solve_stationary(
        &self,
        problem: LocalProblem<'_>,
        warm_inputs: &[DVector<f64>],
        warm_stationary: &StationaryPoint,
        tie_break: f64,
    ) -> Result<SolveResult> {
        let f = Formulation {
            p: problem,
            kind: Kind::Stationary,
            horizon: warm_inputs.len(),
        };
        let z0 = f.pack(warm_inputs, Some(warm_stationary))?;
        self.solve(&f, z0, tie_break)
    }

    fn solve(&self, f: &Formulation<'_>, z_warm: DVector<f64>, tie_break: f64) -> Result<SolveResult> {
        if f.horizon == 0 {
            return Err(Error::contract("horizon must be at least 1"));
        }
        let smooth = self.cfg.smoothed();
        let (lo, hi) = f.bounds();
        let z_start = project(&z_warm, &lo, &hi);
        let warm_residual = f.feasibility_residual(&z_start);

        let mut rho = self.cfg.penalty_init;
        let mut lam = self.multiplier_estimate(f, &z_start, &lo, &hi)?;
        let mut z = z_start.clone();
        let mut inner_total = 0;
        let mut escapes = 0;
        let mut prev_residual = f64::INFINITY;
        let mut residual = warm_residual;
        let mut best: Option<(f64, DVector<f64>)> = None;

        let mut outer = 0;
        while outer < self.cfg.max_outer {
            outer += 1;
            let inner = self.inner_loop(f, z, &lam, rho, &lo, &hi)?;
            inner_total += inner.iterations;
            z = inner.z;
            let states = f.rollout(&f.inputs(&z));
            let c = f.equality_residual(&z, &states);
            let raw_residual = f.feasibility_residual(&z);

            // The iterate itself drives the multiplier update; its restored
            // projection is only a candidate answer.
            let polished = self.restore_feasibility(f, z.clone(), &lo, &hi)?;
            residual = f.feasibility_residual(&polished);
            if residual <= self.cfg.tol_eq {
                let value = f.objective(&polished, smooth)?;
                if best.as_ref().is_none_or(|(v, _)| value < *v) {
                    best = Some((value, polished));
                }
            }

            let (value, grad) = f.augmented(&z, &lam, rho, smooth)?;
            let pg = projected_gradient_norm(&z, &grad, &lo, &hi);
            if raw_residual <= self.cfg.tol_eq && (pg <= self.cfg.tol_grad || inner.stalled) {
                if escapes < MAX_ESCAPES {
                    if let Some(z_esc) = self.escape(f, &z, &lam, rho, value, &lo, &hi, tie_break)? {
                        escapes += 1;
                        z = z_esc;
                        outer = 0;
                        prev_residual = f64::INFINITY;
                        continue;
                    }
                }
                break;
            }
            lam += rho * &c;
            if raw_residual > 0.25 * prev_residual {
                rho *= self.cfg.penalty_growth;
            }
            prev_residual = raw_residual;
        }

        let warm_value = f.objective(&z_start, smooth)?;
        let warm_exact = f.objective(&z_start, CostMode::Exact)?;
        let warm_feasible = warm_residual <= self.cfg.tol_eq;

        let candidate = best.map(|(_, z)| z);
        let chosen = match candidate {
            Some(zc) => {
                let value = f.objective(&zc, smooth)?;
                let exact = f.objective(&zc, CostMode::Exact)?;
                if warm_feasible && (value > warm_value + 1e-12 || exact > warm_exact + 1e-12) {
                    None
                } else {
                    Some(zc)
                }
            }
            None if warm_feasible => None,
            None => {
                return Err(Error::Infeasible {
                    best_residual: residual,
                })
            }
        };
        let kept_warm_start = chosen.is_none();
        let z_final = chosen.unwrap_or(z_start);
        self.result(f, &z_final, inner_total, kept_warm_start)
    }

    fn result(
        &self,
        f: &Formulation<'_>,
        z: &DVector<f64>,
        inner_iterations: usize,
        kept_warm_start: bool,
    ) -> Result<SolveResult> {
        let inputs = f.inputs(z);
        let states = f.rollout(&inputs);
        let eq_residual = f.feasibility_residual(z);
        Ok(SolveResult {
            trajectory: Trajectory { states, inputs },
            stationary: f.stationary_of(z),
            objective: f.objective(z, self.cfg.smoothed())?,
            objective_exact: f.objective(z, CostMode::Exact)?,
            eq_residual,
            converged: eq_residual <= self.cfg.tol_eq,
            inner_iterations,
            kept_warm_start,
        })
    }

    /// Least-squares multipliers `argmin |grad f + J^T lam|` over the free
    /// coordinates at `z`.
    fn multiplier_estimate(
        &self,
        f: &Formulation<'_>,
        z: &DVector<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let p = f.n_eq();
        let zero = DVector::zeros(p);
        let (_, g0) = f.augmented(z, &zero, 0.0, self.cfg.smoothed())?;
        let jt = constraint_jacobian_transpose(f, z)?;
        let free: Vec<usize> = (0..z.len())
            .filter(|&i| z[i] > lo[i] + 1e-12 && z[i] < hi[i] - 1e-12)
            .collect();
        if free.is_empty() {
            return Ok(zero);
        }
        let jt_free = DMatrix::from_fn(free.len(), p, |r, c| jt[(free[r], c)]);
        let g_free = DVector::from_fn(free.len(), |r, _| g0[free[r]]);
        let normal = jt_free.transpose() * &jt_free;
        let rhs = -(jt_free.transpose() * g_free);
        Ok(normal.clone().cholesky().map(|ch| ch.solve(&rhs)).unwrap_or(zero))
    }

    /// Gauss-Newton correction onto the equality constraints using the free
    /// coordinates only: `dz = -J^+ c`, repeated while the residual drops.
    fn restore_feasibility(
        &self,
        f: &Formulation<'_>,
        mut z: DVector<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let mut c = f.equality_residual(&z, &f.rollout(&f.inputs(&z)));
        for _ in 0..8 {
            if c.amax() <= 1e-3 * self.cfg.tol_eq {
                break;
            }
            let jt = constraint_jacobian_transpose(f, &z)?;
            let free: Vec<usize> = (0..z.len()).filter(|&i| z[i] > lo[i] && z[i] < hi[i]).collect();
            if free.is_empty() {
                break;
            }
            let j_free = DMatrix::from_fn(c.len(), free.len(), |r, k| jt[(free[k], r)]);
            let Ok(step) = j_free.svd(true, true).solve(&c, 1e-12) else {
                break;
            };
            let mut z_new = z.clone();
            for (k, &i) in free.iter().enumerate() {
                z_new[i] -= step[k];
            }
            let z_new = project(&z_new, lo, hi);
            let c_new = f.equality_residual(&z_new, &f.rollout(&f.inputs(&z_new)));
            if c_new.amax() >= c.amax() {
                break;
            }
            z = z_new;
            c = c_new;
        }
        Ok(z)
    }

    /// Projected Newton iterations on the augmented objective. Variables at a
    /// bound whose gradient pushes outward are held; the rest take a Newton
    /// step with the Hessian's eigenvalues replaced by their magnitudes. Falls
    /// back to a projected gradient step when the Newton step fails the Armijo
    /// test.
    fn inner_loop(
        &self,
        f: &Formulation<'_>,
        z_start: DVector<f64>,
        lam: &DVector<f64>,
        rho: f64,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
    ) -> Result<InnerOutcome> {
        let mode = self.cfg.smoothed();
        let rule = self.cfg.step_rule;
        let mut z = project(&z_start, lo, hi);
        let (mut value, mut grad) = f.augmented(&z, lam, rho, mode)?;
        let mut iterations = 0;
        let mut stalled = false;
        while iterations < self.cfg.max_inner {
            let pg = projected_gradient_norm(&z, &grad, lo, hi);
            if pg <= self.cfg.tol_grad {
                break;
            }
            iterations += 1;
            let eps = pg.min(1e-6);
            let free: Vec<usize> = (0..z.len())
                .filter(|&i| !((z[i] <= lo[i] + eps && grad[i] > 0.0) || (z[i] >= hi[i] - eps && grad[i] < 0.0)))
                .collect();
            let mut newton = -grad.clone();
            if !free.is_empty() {
                let hess = fd_hessian(f, &z, lam, rho, mode, &free)?;
                let eig = SymmetricEigen::new(hess);
                let scale = eig.eigenvalues.amax().max(1.0);
                let g_free = DVector::from_fn(free.len(), |r, _| grad[free[r]]);
                let coeffs = eig.eigenvectors.transpose() * g_free;
                let scaled = DVector::from_fn(coeffs.len(), |r, _| {
                    coeffs[r] / eig.eigenvalues[r].abs().max(1e-8 * scale)
                });
                let d_free = -(&eig.eigenvectors * scaled);
                for (r, &i) in free.iter().enumerate() {
                    newton[i] = d_free[r];
                }
            }
            let newton = cap_step(newton, self.cfg.max_step);
            let steepest = cap_step(-&grad, self.cfg.max_step);
            let mut accepted = self.armijo_search(f, &z, value, &grad, &newton, 1.0, lam, rho, lo, hi)?;
            if accepted.is_none() {
                accepted = self.armijo_search(f, &z, value, &grad, &steepest, rule.initial, lam, rho, lo, hi)?;
            }
            let Some((z_new, v_new, g_new)) = accepted else {
                stalled = true;
                break;
            };
            z = z_new;
            value = v_new;
            grad = g_new;
        }
        Ok(InnerOutcome { z, iterations, stalled })
    }

    /// Backtracking along the projection arc `P(z + t d)`.
    #[allow(clippy::too_many_arguments)]
    fn armijo_search(
        &self,
        f: &Formulation<'_>,
        z: &DVector<f64>,
        value: f64,
        grad: &DVector<f64>,
        dir: &DVector<f64>,
        initial: f64,
        lam: &DVector<f64>,
        rho: f64,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
    ) -> Result<Option<AcceptedStep>> {
        let rule = self.cfg.step_rule;
        let mut t = initial;
        for _ in 0..60 {
            let z_new = project(&(z + t * dir), lo, hi);
            let step = &z_new - z;
            let decrease = grad.dot(&step);
            if step.amax() == 0.0 || decrease >= 0.0 {
                return Ok(None);
            }
            let (v_new, g_new) = f.augmented(&z_new, lam, rho, self.cfg.smoothed())?;
            if v_new <= value + rule.armijo * decrease {
                return Ok(Some((z_new, v_new, g_new)));
            }
            t *= rule.shrink;
        }
        Ok(None)
    }

    /// Step off a point where the augmented objective has negative curvature
    /// along free coordinates. Returns `None` at a genuine local minimum.
    #[allow(clippy::too_many_arguments)]
    fn escape(
        &self,
        f: &Formulation<'_>,
        z: &DVector<f64>,
        lam: &DVector<f64>,
        rho: f64,
        value: f64,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
        tie_break: f64,
    ) -> Result<Option<DVector<f64>>> {
        let mode = self.cfg.smoothed();
        let free: Vec<usize> = (0..z.len())
            .filter(|&i| z[i] > lo[i] + 1e-9 && z[i] < hi[i] - 1e-9)
            .collect();
        if free.is_empty() {
            return Ok(None);
        }
        let hess = fd_hessian(f, z, lam, rho, mode, &free)?;
        let eig = SymmetricEigen::new(hess);
        let (idx, &lambda_min) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        if lambda_min > -NEGATIVE_CURVATURE_TOL {
            return Ok(None);
        }
        let mut dir = DVector::zeros(z.len());
        for (row, &i) in free.iter().enumerate() {
            dir[i] = eig.eigenvectors[(row, idx)];
        }
        // Canonical orientation: first significant component positive.
        let scale = dir.amax();
        if let Some(lead) = dir.iter().find(|v| v.abs() > 1e-6 * scale) {
            if *lead < 0.0 {
                dir = -dir;
            }
        }
        let sign = if tie_break < 0.0 { -1.0 } else { 1.0 };
        for s in [sign, -sign] {
            let mut t = 0.1 / scale;
            for _ in 0..30 {
                let z_new = project(&(z + (s * t) * &dir), lo, hi);
                let (v_new, _) = f.augmented(&z_new, lam, rho, mode)?;
                if v_new < value - 1e-12 {
                    return Ok(Some(z_new));
                }
                t *= 0.5;
            }
        }
        Ok(None)
    }
}

/// Symmetrized central-difference Hessian of the augmented objective over the
/// coordinates in `idx`, from the analytic gradient.
fn fd_hessian(
    f: &Formulation<'_>,
    z: &DVector<f64>,
    lam: &DVector<f64>,
    rho: f64,
    mode: CostMode,
    idx: &[usize],
) -> Result<DMatrix<f64>> {
    let h = 1e-6;
    let k = idx.len();
    let mut hess = DMatrix::zeros(k, k);
    for (col, &i) in idx.iter().enumerate() {
        let mut zp = z.clone();
        zp[i] += h;
        let mut zm = z.clone();
        zm[i] -= h;
        let (_, gp) = f.augmented(&zp, lam, rho, mode)?;
        let (_, gm) = f.augmented(&zm, lam, rho, mode)?;
        for (row, &j) in idx.iter().enumerate() {
            hess[(row, col)] = (gp[j] - gm[j]) / (2.0 * h);
        }
    }
    Ok(0.5 * (&hess + hess.transpose()))
}

/// Columns are `J^T e_r` for each equality row `r`.
fn constraint_jacobian_transpose(f: &Formulation<'_>, z: &DVector<f64>) -> Result<DMatrix<f64>> {
    let p = f.n_eq();
    let mut jt = DMatrix::zeros(z.len(), p);
    let (_, base) = f.augmented(z, &DVector::zeros(p), 0.0, CostMode::Exact)?;
    for r in 0..p {
        // grad of e_r^T c is the augmented gradient with lam = e_r, minus grad f.
        let mut e = DVector::zeros(p);
        e[r] = 1.0;
        let (_, with) = f.augmented(z, &e, 0.0, CostMode::Exact)?;
        jt.set_column(r, &(with - &base));
    }
    Ok(jt)
}

/// Decision vector layout for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Trajectory,
    Stationary,
}

/// Largest relative discrepancy between the analytic gradient of the smoothed
/// objective and a central finite difference with step `h`, over all decision
/// coordinates. `target` is required for the trajectory problem; for the
/// stationary problem `stationary` supplies the `(x_s, u_s)` block.
pub fn check_gradient(
    problem: LocalProblem<'_>,
    kind: ProblemKind,
    inputs: &[DVector<f64>],
    stationary: &StationaryPoint,
    mu: f64,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let f = Formulation {
        p: problem,
        kind: match kind {
            ProblemKind::Trajectory => Kind::Trajectory { target: stationary },
            ProblemKind::Stationary => Kind::Stationary,
        },
        horizon: inputs.len(),
    };
    let mode = CostMode::Smoothed { mu };
    let z = f.pack(inputs, Some(stationary))?;
    let zero = DVector::zeros(f.n_eq());
    let (_, g) = f.augmented(&z, &zero, 0.0, mode)?;
    let mut worst: f64 = 0.0;
    for i in 0..z.len() {
        let mut zp = z.clone();
        zp[i] += h;
        let mut zm = z.clone();
        zm[i] -= h;
        let fd = (f.objective(&zp, mode)? - f.objective(&zm, mode)?) / (2.0 * h);
        let scale = g[i].abs().max(fd.abs()).max(1e-3);
        worst = worst.max((g[i] - fd).abs() / scale);
    }
    Ok(worst)
}
