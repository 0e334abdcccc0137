//! Fixed-step explicit integrators over vector states.
//!
//! Used both for transformed (regular) systems and for the naive-integration
//! failure demonstration, so non-finite values are treated as data: every
//! stage evaluation is checked and integration halts instead of erroring.

/// A first-order vector field `s' = F(tau, s)`.
///
/// Autonomous fields ignore `tau`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, tau: f64, state: &[f64], out: &mut [f64]);
}

/// Wraps a closure as a [`VectorField`].
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64]) + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, tau: f64, state: &[f64], out: &mut [f64]) {
        (self.f)(tau, state, out)
    }
}

impl VectorField for Box<dyn VectorField + Send + Sync> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, tau: f64, state: &[f64], out: &mut [f64]) {
        (**self).eval(tau, state, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    /// Ran the full requested number of steps.
    ReachedEnd,
    /// A stage evaluation or committed state stopped being finite.
    NonFinite,
    /// The guard predicate fired; the final stored state is the first one satisfying it.
    GuardTriggered,
}

/// States on the uniform grid `tau0 + i*h`, flattened row-major.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tau0: f64,
    pub h: f64,
    dim: usize,
    states: Vec<f64>,
    pub halt: HaltReason,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored nodes (including the initial state).
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn tau(&self, i: usize) -> f64 {
        self.tau0 + i as f64 * self.h
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn last_tau(&self) -> f64 {
        self.tau(self.len() - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &[f64])> {
        (0..self.len()).map(move |i| (self.tau(i), self.state(i)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
}

impl Method {
    pub fn order(self) -> u32 {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
            Method::Rk4 => 4,
        }
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Fixed-step explicit integration with stage-level overflow detection.
///
/// The guard is evaluated after each accepted step (and once on the initial
/// state); the first state satisfying it is stored and integration stops.
pub fn integrate_fixed(
    method: Method,
    field: &dyn VectorField,
    s0: &[f64],
    tau0: f64,
    h: f64,
    max_steps: usize,
    guard: &dyn Fn(f64, &[f64]) -> bool,
) -> Trajectory {
    assert!(h > 0.0, "stepsize must be positive");
    assert!(all_finite(s0), "initial state must be finite");
    let dim = field.dim();
    assert_eq!(s0.len(), dim, "initial state dimension mismatch");

    let mut states = Vec::with_capacity((max_steps + 1).min(1 << 20) * dim);
    states.extend_from_slice(s0);
    let traj = |states: Vec<f64>, halt| Trajectory {
        tau0,
        h,
        dim,
        states,
        halt,
    };

    if guard(tau0, s0) {
        return traj(states, HaltReason::GuardTriggered);
    }

    let mut s = s0.to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let mut next = vec![0.0; dim];

    for step in 0..max_steps {
        let tau = tau0 + step as f64 * h;
        let ok = match method {
            Method::Euler => {
                field.eval(tau, &s, &mut k1);
                if !all_finite(&k1) {
                    false
                } else {
                    for i in 0..dim {
                        next[i] = s[i] + h * k1[i];
                    }
                    true
                }
            }
            Method::Midpoint => {
                field.eval(tau, &s, &mut k1);
                let mut fine = all_finite(&k1);
                if fine {
                    for i in 0..dim {
                        tmp[i] = s[i] + 0.5 * h * k1[i];
                    }
                    field.eval(tau + 0.5 * h, &tmp, &mut k2);
                    fine = all_finite(&k2);
                }
                if fine {
                    for i in 0..dim {
                        next[i] = s[i] + h * k2[i];
                    }
                }
                fine
            }
            Method::Rk4 => {
                field.eval(tau, &s, &mut k1);
                let mut fine = all_finite(&k1);
                if fine {
                    for i in 0..dim {
                        tmp[i] = s[i] + 0.5 * h * k1[i];
                    }
                    field.eval(tau + 0.5 * h, &tmp, &mut k2);
                    fine = all_finite(&k2);
                }
                if fine {
                    for i in 0..dim {
                        tmp[i] = s[i] + 0.5 * h * k2[i];
                    }
                    field.eval(tau + 0.5 * h, &tmp, &mut k3);
                    fine = all_finite(&k3);
                }
                if fine {
                    for i in 0..dim {
                        tmp[i] = s[i] + h * k3[i];
                    }
                    field.eval(tau + h, &tmp, &mut k4);
                    fine = all_finite(&k4);
                }
                if fine {
                    for i in 0..dim {
                        next[i] = s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                }
                fine
            }
        };

        if !ok || !all_finite(&next) {
            return traj(states, HaltReason::NonFinite);
        }
        states.extend_from_slice(&next);
        s.copy_from_slice(&next);
        if guard(tau + h, &s) {
            return traj(states, HaltReason::GuardTriggered);
        }
    }
    traj(states, HaltReason::ReachedEnd)
}

pub fn rk4_fixed(
    field: &dyn VectorField,
    s0: &[f64],
    tau0: f64,
    h: f64,
    max_steps: usize,
    guard: &dyn Fn(f64, &[f64]) -> bool,
) -> Trajectory {
    integrate_fixed(Method::Rk4, field, s0, tau0, h, max_steps, guard)
}

pub fn euler_fixed(
    field: &dyn VectorField,
    s0: &[f64],
    tau0: f64,
    h: f64,
    max_steps: usize,
    guard: &dyn Fn(f64, &[f64]) -> bool,
) -> Trajectory {
    integrate_fixed(Method::Euler, field, s0, tau0, h, max_steps, guard)
}

pub fn midpoint_fixed(
    field: &dyn VectorField,
    s0: &[f64],
    tau0: f64,
    h: f64,
    max_steps: usize,
    guard: &dyn Fn(f64, &[f64]) -> bool,
) -> Trajectory {
    integrate_fixed(Method::Midpoint, field, s0, tau0, h, max_steps, guard)
}

/// Empirical convergence order from runs at `h` and `h/2`:
/// `p = log2(e_h / e_{h/2})` against the supplied exact endpoint state.
///
/// Returns `None` when either error vanishes or a run fails to reach `tau_end`.
pub fn convergence_order(
    method: Method,
    field: &dyn VectorField,
    s0: &[f64],
    tau0: f64,
    tau_end: f64,
    h: f64,
    exact: &[f64],
) -> Option<f64> {
    let err_at = |h: f64| -> Option<f64> {
        let n = ((tau_end - tau0) / h).round() as usize;
        let traj = integrate_fixed(method, field, s0, tau0, h, n, &|_, _| false);
        if traj.halt != HaltReason::ReachedEnd || traj.len() != n + 1 {
            return None;
        }
        let last = traj.last_state();
        Some(
            last.iter()
                .zip(exact)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        )
    };
    let e1 = err_at(h)?;
    let e2 = err_at(h / 2.0)?;
    if e1 == 0.0 || e2 == 0.0 {
        return None;
    }
    Some((e1 / e2).log2())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_field() -> FnField<impl Fn(f64, &[f64], &mut [f64])> {
        // x' = 1, y' = y
        FnField {
            dim: 2,
            f: |_t: f64, s: &[f64], out: &mut [f64]| {
                out[0] = 1.0;
                out[1] = s[1];
            },
        }
    }

    #[test]
    fn rk4_on_exponential() {
        let f = exp_field();
        let traj = rk4_fixed(&f, &[0.0, 1.0], 0.0, 0.1, 10, &|_, _| false);
        assert_eq!(traj.halt, HaltReason::ReachedEnd);
        assert_eq!(traj.len(), 11);
        let y = traj.last_state()[1];
        let rel = (y - 1f64.exp()).abs() / 1f64.exp();
        assert!(rel < 3e-6, "rel error {rel}");
    }

    #[test]
    fn euler_on_exponential_matches_compound_growth() {
        let f = exp_field();
        let traj = euler_fixed(&f, &[0.0, 1.0], 0.0, 0.1, 10, &|_, _| false);
        let y = traj.last_state()[1];
        assert!((y - 1.1f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn midpoint_on_exponential_order2_bound() {
        let f = exp_field();
        let traj = midpoint_fixed(&f, &[0.0, 1.0], 0.0, 0.1, 10, &|_, _| false);
        let y = traj.last_state()[1];
        let rel = (y - 1f64.exp()).abs() / 1f64.exp();
        assert!(rel < 5e-3, "rel error {rel}");
    }

    #[test]
    fn naive_square_field_overflows_past_pole() {
        // y' = y^2 from y(0)=1 blows up at x=1; fixed-step runs straight through
        // and must halt NonFinite at some grid x beyond the pole.
        let f = FnField {
            dim: 1,
            f: |_t: f64, s: &[f64], out: &mut [f64]| out[0] = s[0] * s[0],
        };
        let traj = rk4_fixed(&f, &[1.0], 0.0, 0.01, 100_000, &|_, _| false);
        assert_eq!(traj.halt, HaltReason::NonFinite);
        assert!(traj.last_tau() > 1.0);
        for (_, s) in traj.iter() {
            assert!(s[0].is_finite());
        }
        // Euler grows slower, so it survives to a larger x before the overflow.
        let euler = euler_fixed(&f, &[1.0], 0.0, 0.01, 100_000, &|_, _| false);
        assert_eq!(euler.halt, HaltReason::NonFinite);
        assert!(euler.last_tau() > traj.last_tau());
        // Monotone growth until the halt.
        let mut prev = 0.0;
        for (_, s) in euler.iter() {
            assert!(s[0] >= prev);
            prev = s[0];
        }
    }

    #[test]
    fn guard_stops_at_first_satisfying_state() {
        let f = exp_field();
        let traj = rk4_fixed(&f, &[0.0, 1.0], 0.0, 0.1, 1000, &|_, s| s[1] >= 2.0);
        assert_eq!(traj.halt, HaltReason::GuardTriggered);
        let last = traj.last_state();
        assert!(last[1] >= 2.0);
        // Preceding node must not satisfy the guard.
        let before = traj.state(traj.len() - 2);
        assert!(before[1] < 2.0);
    }

    #[test]
    fn determinism() {
        let f = exp_field();
        let a = rk4_fixed(&f, &[0.0, 1.0], 0.0, 0.1, 50, &|_, _| false);
        let b = rk4_fixed(&f, &[0.0, 1.0], 0.0, 0.1, 50, &|_, _| false);
        for i in 0..a.len() {
            assert_eq!(a.state(i), b.state(i));
        }
    }

    #[test]
    fn autonomous_translation_invariance() {
        let f = exp_field();
        let a = rk4_fixed(&f, &[0.0, 1.0], 0.0, 0.1, 20, &|_, _| false);
        let b = rk4_fixed(&f, &[0.0, 1.0], 5.0, 0.1, 20, &|_, _| false);
        for i in 0..a.len() {
            assert_eq!(a.state(i), b.state(i));
            assert!((b.tau(i) - a.tau(i) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_orders() {
        let f = exp_field();
        let exact = [1.0, 1f64.exp()];
        let p4 = convergence_order(Method::Rk4, &f, &[0.0, 1.0], 0.0, 1.0, 0.1, &exact).unwrap();
        assert!((3.7..=4.3).contains(&p4), "rk4 order {p4}");
        let p1 = convergence_order(Method::Euler, &f, &[0.0, 1.0], 0.0, 1.0, 0.1, &exact).unwrap();
        assert!((0.8..=1.2).contains(&p1), "euler order {p1}");
        let p2 =
            convergence_order(Method::Midpoint, &f, &[0.0, 1.0], 0.0, 1.0, 0.1, &exact).unwrap();
        assert!((1.8..=2.2).contains(&p2), "midpoint order {p2}");
    }
}
