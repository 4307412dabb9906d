//! Agent dynamics: the state-transition map, trajectory rollout, stationary
//! points and the discretized spring-mass-damper plate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default absolute (infinity-norm) tolerance for dynamic consistency and
/// stationarity checks.
pub const TOL_DYN: f64 = 1e-8;

/// A discrete-time state-transition map `x+ = f(x, u)` with its Jacobians.
///
/// The solver only needs `step` and the two Jacobians, so nonlinear maps can
/// be plugged in; [`AgentModel`] is the linear instance.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `(df/dx, df/du)` evaluated at `(x, u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
}

/// Linear discrete dynamics `x+ = A x + B u` with box bounds on states and inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
}

impl AgentModel {
    /// Linear model with unbounded states and inputs.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        let model = Self {
            a,
            b,
            x_lo: DVector::from_element(n, f64::NEG_INFINITY),
            x_hi: DVector::from_element(n, f64::INFINITY),
            u_lo: DVector::from_element(m, f64::NEG_INFINITY),
            u_hi: DVector::from_element(m, f64::INFINITY),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_input_bounds(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        self.u_lo = lo;
        self.u_hi = hi;
        self.validate()?;
        Ok(self)
    }

    pub fn with_state_bounds(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        self.x_lo = lo;
        self.x_hi = hi;
        self.validate()?;
        Ok(self)
    }

    /// Symmetric input box `[-bound, bound]` on every input channel.
    pub fn with_symmetric_input_bound(self, bound: f64) -> Result<Self> {
        let m = self.b.ncols();
        self.with_input_bounds(DVector::from_element(m, -bound), DVector::from_element(m, bound))
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n {
            return Err(Error::contract(format!(
                "A must be square, got {}x{}",
                n,
                self.a.ncols()
            )));
        }
        if self.b.nrows() != n {
            return Err(Error::contract(format!(
                "B has {} rows, expected {}",
                self.b.nrows(),
                n
            )));
        }
        if self.a.iter().chain(self.b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::contract("A and B must be finite"));
        }
        let m = self.b.ncols();
        if self.x_lo.len() != n || self.x_hi.len() != n {
            return Err(Error::contract("state bounds must have length n"));
        }
        if self.u_lo.len() != m || self.u_hi.len() != m {
            return Err(Error::contract("input bounds must have length m"));
        }
        let ordered = |lo: &DVector<f64>, hi: &DVector<f64>| {
            lo.iter()
                .zip(hi.iter())
                .all(|(l, h)| !l.is_nan() && !h.is_nan() && l <= h)
        };
        if !ordered(&self.x_lo, &self.x_hi) || !ordered(&self.u_lo, &self.u_hi) {
            return Err(Error::contract("bounds must satisfy lo <= hi"));
        }
        Ok(())
    }

    pub fn state_in_box(&self, x: &DVector<f64>) -> bool {
        in_box(x, &self.x_lo, &self.x_hi)
    }

    pub fn input_in_box(&self, u: &DVector<f64>) -> bool {
        in_box(u, &self.u_lo, &self.u_hi)
    }

    pub fn has_finite_state_bounds(&self) -> bool {
        self.x_lo.iter().chain(self.x_hi.iter()).any(|v| v.is_finite())
    }

    /// `A x + B u`, checking dimensions.
    pub fn try_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n() || u.len() != self.m() {
            return Err(Error::contract(format!(
                "step expects x in R^{} and u in R^{}, got R^{} and R^{}",
                self.n(),
                self.m(),
                x.len(),
                u.len()
            )));
        }
        Ok(&self.a * x + &self.b * u)
    }

    /// Simulate `inputs` forward from `x0`.
    pub fn rollout(&self, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<Trajectory> {
        if inputs.is_empty() {
            return Err(Error::contract("rollout needs at least one input"));
        }
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.clone());
        for u in inputs {
            let next = self.try_step(states.last().expect("non-empty"), u)?;
            states.push(next);
        }
        Ok(Trajectory {
            states,
            inputs: inputs.to_vec(),
        })
    }

    /// Largest stationarity violation `||x_s - f(x_s, u_s)||_inf`.
    pub fn stationarity_residual(&self, p: &StationaryPoint) -> f64 {
        let next = self.step(&p.x_s, &p.u_s);
        (&p.x_s - next).amax()
    }

    pub fn is_stationary(&self, p: &StationaryPoint, tol: f64) -> bool {
        self.stationarity_residual(p) <= tol
    }
}

impl Dynamics for AgentModel {
    fn state_dim(&self) -> usize {
        self.n()
    }

    fn input_dim(&self) -> usize {
        self.m()
    }

    /// Panics on a dimension mismatch; use [`AgentModel::try_step`] for a checked call.
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.try_step(x, u).expect("dimension mismatch in step")
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }
}

fn in_box(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> bool {
    v.iter()
        .zip(lo.iter().zip(hi.iter()))
        .all(|(x, (l, h))| *x >= *l && *x <= *h)
}

/// States `x^0..x^H` and inputs `u^0..u^{H-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// All-zero trajectory of horizon `h`.
    pub fn zeros(n: usize, m: usize, h: usize) -> Self {
        Self {
            states: vec![DVector::zeros(n); h + 1],
            inputs: vec![DVector::zeros(m); h],
        }
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Largest `||x^{k+1} - f(x^k, u^k)||_inf` along the trajectory.
    pub fn dynamics_residual<D: Dynamics>(&self, model: &D) -> f64 {
        self.states
            .windows(2)
            .zip(&self.inputs)
            .map(|(w, u)| (&w[1] - model.step(&w[0], u)).amax())
            .fold(0.0, f64::max)
    }

    pub fn is_consistent<D: Dynamics>(&self, model: &D, tol: f64) -> bool {
        self.states.len() == self.inputs.len() + 1 && self.dynamics_residual(model) <= tol
    }
}

/// A fixed point `x_s = f(x_s, u_s)` of the dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryPoint {
    pub x_s: DVector<f64>,
    pub u_s: DVector<f64>,
}

impl StationaryPoint {
    pub fn new(x_s: DVector<f64>, u_s: DVector<f64>) -> Self {
        Self { x_s, u_s }
    }

    pub fn origin(n: usize, m: usize) -> Self {
        Self {
            x_s: DVector::zeros(n),
            u_s: DVector::zeros(m),
        }
    }
}

/// Physical parameters of one suspended plate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateParams {
    /// kg
    pub mass: f64,
    /// N/m
    pub spring: f64,
    /// kg/s
    pub damping: f64,
}

impl Default for PlateParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            spring: 1.0,
            damping: 1.0,
        }
    }
}

impl PlateParams {
    /// Continuous-time pair `(A_c, B_c)` for state `(position, velocity)` and force input.
    pub fn continuous(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let ac = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -self.spring / self.mass, -self.damping / self.mass]);
        let bc = DMatrix::from_row_slice(2, 1, &[0.0, 1.0 / self.mass]);
        (ac, bc)
    }

    /// Position at which a constant force `u` holds the plate at rest.
    pub fn equilibrium_position(&self, u: f64) -> f64 {
        u / self.spring
    }
}

/// Exact zero-order-hold discretization of the plate over a sampling period `dt`.
///
/// `A = exp(A_c dt)`, `B = A_c^{-1} (A - I) B_c`. State and input bounds are left
/// unbounded.
pub fn discretize_plate(params: PlateParams, dt: f64) -> Result<AgentModel> {
    if !(params.mass > 0.0) {
        return Err(Error::contract("plate mass must be positive"));
    }
    if !(dt > 0.0) {
        return Err(Error::contract("sampling period must be positive"));
    }
    if !(params.spring > 0.0) {
        return Err(Error::SingularDiscretization(format!(
            "spring stiffness {} leaves A_c singular",
            params.spring
        )));
    }
    let (ac, bc) = params.continuous();
    let a = (&ac * dt).exp();
    let ac_inv = ac
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularDiscretization("continuous state matrix is not invertible".into()))?;
    let b = ac_inv * (&a - DMatrix::identity(2, 2)) * bc;
    AgentModel::new(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn plate() -> AgentModel {
        discretize_plate(PlateParams::default(), 1.0)
            .unwrap()
            .with_symmetric_input_bound(0.25)
            .unwrap()
    }

    #[test]
    fn origin_is_equilibrium() {
        let m = plate();
        let x = m.step(&DVector::zeros(2), &DVector::zeros(1));
        assert_eq!(x, DVector::zeros(2));
    }

    #[test]
    fn identity_dynamics_hold_state() {
        let m = AgentModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1)).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2]);
        assert_eq!(m.step(&x, &DVector::from_vec(vec![5.0])), x);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = plate();
        assert!(m.try_step(&DVector::zeros(3), &DVector::zeros(1)).is_err());
        assert!(m.try_step(&DVector::zeros(2), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn single_step_rollout_matches_step() {
        let m = plate();
        let x0 = DVector::from_vec(vec![0.1, -0.05]);
        let u = DVector::from_vec(vec![0.2]);
        let traj = m.rollout(&x0, std::slice::from_ref(&u)).unwrap();
        assert_eq!(traj.states[1], m.step(&x0, &u));
        assert!(traj.is_consistent(&m, 0.0));
    }

    #[test]
    fn rollout_rejects_empty_inputs() {
        assert!(plate().rollout(&DVector::zeros(2), &[]).is_err());
    }

    #[test]
    fn rest_stays_at_rest() {
        let m = plate();
        let traj = m.rollout(&DVector::zeros(2), &vec![DVector::zeros(1); 5]).unwrap();
        assert!(traj.states.iter().all(|x| x.amax() == 0.0));
    }

    #[test]
    fn constant_force_settles_at_spring_equilibrium() {
        let m = plate();
        let traj = m
            .rollout(&DVector::zeros(2), &vec![DVector::from_element(1, 0.25); 60])
            .unwrap();
        assert_abs_diff_eq!(traj.terminal()[0], 0.25, epsilon = 1e-9);
        assert_abs_diff_eq!(traj.terminal()[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn stationary_points() {
        let m = plate();
        assert!(m.is_stationary(&StationaryPoint::origin(2, 1), 1e-12));
        let p = StationaryPoint::new(DVector::from_vec(vec![0.25, 0.0]), DVector::from_vec(vec![0.25]));
        assert!(m.is_stationary(&p, 1e-9));
        let moving = StationaryPoint::new(DVector::from_vec(vec![0.25, 0.1]), DVector::from_vec(vec![0.25]));
        assert!(!m.is_stationary(&moving, 1e-9));
    }

    #[test]
    fn nonpositive_spring_is_singular() {
        let params = PlateParams {
            spring: 0.0,
            ..PlateParams::default()
        };
        assert!(matches!(
            discretize_plate(params, 1.0),
            Err(Error::SingularDiscretization(_))
        ));
    }

    #[test]
    fn bad_bounds_rejected() {
        let m = plate();
        assert!(m
            .with_input_bounds(DVector::from_element(1, 1.0), DVector::from_element(1, -1.0))
            .is_err());
    }

    #[test]
    fn tiny_period_approaches_identity() {
        let m = discretize_plate(PlateParams::default(), 1e-9).unwrap();
        assert_abs_diff_eq!(m.a, DMatrix::identity(2, 2), epsilon = 1e-8);
        assert_abs_diff_eq!(m.b, DMatrix::zeros(2, 1), epsilon = 1e-8);
    }
}
