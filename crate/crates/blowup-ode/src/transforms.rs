//! Builds the regularized autonomous system (vector field + initial state +
//! parametric-solution decoder) from a [`Problem`] and a [`TransformSpec`].
//!
//! Every transform maps the unknown singular point `x_*` to the infinitely
//! remote point of a new independent variable, so the transformed problem can
//! be integrated with plain fixed-step methods. Exp-type gauge choices make
//! `x` approach `x_*` exponentially fast; hodograph and arc-length approach it
//! by a power law and need much larger integration intervals.

use serde_json::{json, Value};
use thiserror::Error;

use crate::expr::{BoundExpr, EvalError, Expr};
use crate::interp::MonotoneCubic;
use crate::problems::{Kind, Problem};
use crate::stepper::{FnField, HaltReason, Trajectory, VectorField};

/// Minimum |denominator| before a run is halted as a precondition failure.
pub const GAUGE_FLOOR: f64 = 1e-14;

/// The analytical transformation to apply.
#[derive(Debug, Clone)]
pub enum TransformSpec {
    /// New independent variable `t = y'_x` (first order) or plain `t` (second order).
    Differential,
    /// Exp-type substitution `t = t0*exp(lambda*tau)` on top of the differential one.
    ModifiedDifferential { lambda: f64 },
    /// Non-local variable `xi = ∫ g dx` with a user-supplied gauge `g`.
    NonLocal { g: Expr },
    /// Differential constraint `xi'_x = g(x, y[, t, w], xi)`.
    DifferentialConstraint { g: Expr, xi0: f64 },
    /// `g = f` (first order) or `g = t` (higher order): `xi = y - y0`.
    Hodograph,
    /// `g = c1 + (c2 + |f|^s)^(1/s)` (first order) and its higher-order analogues.
    ArcLength { c: Vec<f64>, s: f64 },
    /// `g = 1 + |f|`, `1 + |t| + |f|`, ..., `1 + sum |f_m|`.
    OnePlusAbs,
    /// `g = f/y` (first order): `y = y0*exp(xi)`.
    ExpFOverY,
    /// `g = t/y` (order 2 or 3): `y = y0*exp(xi)`.
    ExpTOverY,
    /// `g = f/t` (second order): `t = y1*exp(xi)`.
    ExpFOverT,
    /// `g = w/t` (third order): `t = y1*exp(xi)`.
    ExpWOverT,
    /// `g = f/w` (third order): `w = y2*exp(xi)`.
    ExpFOverW,
    /// `g = f_k/y_k` for systems: `y_k = y_k0*exp(xi)` substituted into the field.
    GrowthComponent { k: Option<usize> },
}

impl TransformSpec {
    pub fn arc_length_default() -> TransformSpec {
        TransformSpec::ArcLength { c: Vec::new(), s: 2.0 }
    }

    /// Kebab-case method id, also used as the CLI method name.
    pub fn method_name(&self) -> &'static str {
        match self {
            TransformSpec::Differential => "differential",
            TransformSpec::ModifiedDifferential { .. } => "modified-differential",
            TransformSpec::NonLocal { .. } => "nonlocal",
            TransformSpec::DifferentialConstraint { .. } => "constraint",
            TransformSpec::Hodograph => "hodograph",
            TransformSpec::ArcLength { .. } => "arc-length",
            TransformSpec::OnePlusAbs => "one-plus-abs",
            TransformSpec::ExpFOverY => "exp-f-over-y",
            TransformSpec::ExpTOverY => "exp-t-over-y",
            TransformSpec::ExpFOverT => "exp-f-over-t",
            TransformSpec::ExpWOverT => "exp-w-over-t",
            TransformSpec::ExpFOverW => "exp-f-over-w",
            TransformSpec::GrowthComponent { .. } => "growth",
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({ "method": self.method_name() });
        let obj = v.as_object_mut().unwrap();
        match self {
            TransformSpec::ModifiedDifferential { lambda } => {
                obj.insert("lambda".into(), json!(lambda));
            }
            TransformSpec::NonLocal { g } => {
                obj.insert("g".into(), json!(g.to_string()));
            }
            TransformSpec::DifferentialConstraint { g, xi0 } => {
                obj.insert("g".into(), json!(g.to_string()));
                obj.insert("xi0".into(), json!(xi0));
            }
            TransformSpec::ArcLength { c, s } => {
                if !c.is_empty() {
                    obj.insert("c".into(), json!(c));
                }
                obj.insert("s".into(), json!(s));
            }
            TransformSpec::GrowthComponent { k } => match k {
                Some(k) => {
                    obj.insert("k".into(), json!(k));
                }
                None => {
                    obj.insert("k".into(), json!("auto"));
                }
            },
            _ => {}
        }
        v
    }

    pub fn from_json(v: &Value) -> Result<TransformSpec, TransformError> {
        let method = v
            .get("method")
            .and_then(Value::as_str)
            .ok_or_else(|| TransformError::BadSpec("missing `method`".into()))?;
        let g_expr = || -> Result<Expr, TransformError> {
            let src = v
                .get("g")
                .and_then(Value::as_str)
                .ok_or_else(|| TransformError::BadSpec("method requires `g`".into()))?;
            Expr::parse(src).map_err(|e| TransformError::BadSpec(e.to_string()))
        };
        Ok(match method {
            "differential" => TransformSpec::Differential,
            "modified-differential" => TransformSpec::ModifiedDifferential {
                lambda: v.get("lambda").and_then(Value::as_f64).unwrap_or(1.0),
            },
            "nonlocal" => TransformSpec::NonLocal { g: g_expr()? },
            "constraint" => TransformSpec::DifferentialConstraint {
                g: g_expr()?,
                xi0: v.get("xi0").and_then(Value::as_f64).unwrap_or(0.0),
            },
            "hodograph" => TransformSpec::Hodograph,
            "arc-length" => TransformSpec::ArcLength {
                c: v.get("c")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_f64).collect())
                    .unwrap_or_default(),
                s: v.get("s").and_then(Value::as_f64).unwrap_or(2.0),
            },
            "one-plus-abs" => TransformSpec::OnePlusAbs,
            "exp-f-over-y" => TransformSpec::ExpFOverY,
            "exp-t-over-y" => TransformSpec::ExpTOverY,
            "exp-f-over-t" => TransformSpec::ExpFOverT,
            "exp-w-over-t" => TransformSpec::ExpWOverT,
            "exp-f-over-w" => TransformSpec::ExpFOverW,
            "growth" | "growth-auto" => TransformSpec::GrowthComponent {
                k: match v.get("k") {
                    None => None,
                    Some(Value::String(s)) if s == "auto" => None,
                    Some(Value::Number(n)) => n.as_u64().map(|k| k as usize),
                    Some(other) => {
                        return Err(TransformError::BadSpec(format!(
                            "bad `k`: {other}"
                        )))
                    }
                },
            },
            other => return Err(TransformError::BadSpec(format!("unknown method `{other}`"))),
        })
    }
}

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("method `{method}` is not applicable to {kind:?}")]
    Incompatible { method: &'static str, kind: Kind },
    #[error("gauge is not positive and finite at the initial point (g = {value})")]
    GaugeNotPositive { value: f64 },
    #[error("transformed field is not finite at the initial state")]
    NonFiniteAtStart,
    #[error("lambda must be positive (got {0})")]
    BadLambda(f64),
    #[error("arc-length family requires s > 0 and nonnegative c with at least one positive")]
    BadArcParams,
    #[error("growth component k = {k} out of range 1..={n}")]
    BadGrowthIndex { k: usize, n: usize },
    #[error("growth-component transform requires a nonzero initial value for y_k")]
    ZeroGrowthInitial,
    #[error("system dimension {0} exceeds the supported maximum of 8")]
    SystemTooLarge(usize),
    #[error("trajectory layout does not match the transformed problem (dim {got} vs {expected})")]
    LayoutMismatch { got: usize, expected: usize },
    #[error("x grid is not strictly increasing; cannot interpolate")]
    NonMonotoneX,
    #[error("requested x = {0} outside the parametric solution range [{1}, {2}]")]
    OutOfRange(f64, f64, f64),
    #[error("bad transform spec: {0}")]
    BadSpec(String),
    #[error("expression error: {0}")]
    Expr(#[from] EvalError),
}

/// How `x(xi)` approaches its asymptote `x_*`; decides the tail-extrapolation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Approach {
    Exponential,
    PowerLaw,
}

/// Closed-form slot that is not integrated: `value(xi) = y0 * exp(rate*(xi - xi0))`.
#[derive(Debug, Clone)]
struct AnalyticSlot {
    name: String,
    /// Position of the column in the decoded layout (0 = x).
    position: usize,
    y0: f64,
    rate: f64,
    xi0: f64,
}

impl AnalyticSlot {
    fn value(&self, xi: f64) -> f64 {
        self.y0 * (self.rate * (xi - self.xi0)).exp()
    }
}

enum Primary {
    /// Index into the integrated state vector.
    Integrated(usize),
    Analytic,
}

type BoxedField = Box<dyn VectorField + Send + Sync>;
type Gauge = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// A problem rewritten as a singularity-free parametric system.
pub struct TransformedProblem {
    field: BoxedField,
    pub state0: Vec<f64>,
    pub tau0: f64,
    /// Names of the integrated state slots, starting with "x".
    pub layout: Vec<String>,
    pub approach: Approach,
    gauge: Gauge,
    analytic: Option<AnalyticSlot>,
    primary: Primary,
    /// Differential transform on a second-order problem: `t` is the grid itself.
    implicit_t: bool,
}

impl TransformedProblem {
    pub fn field(&self) -> &(dyn VectorField + Send + Sync) {
        self.field.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// Denominator of the transformed system at a point; the run must stop
    /// when it comes within [`GAUGE_FLOOR`] of zero.
    pub fn gauge_at(&self, tau: f64, state: &[f64]) -> f64 {
        (self.gauge)(tau, state)
    }

    /// Stopping diagnostic `Lambda = min(|y|, |y'_x / y|)` with `y'_x`
    /// reconstructed by the chain rule `y'_xi / x'_xi`.
    pub fn lambda_at(&self, tau: f64, state: &[f64]) -> f64 {
        let mut derivs = [0.0f64; 12];
        self.field.eval(tau, state, &mut derivs[..self.dim()]);
        let xp = derivs[0];
        let (y, yp) = match self.primary {
            Primary::Integrated(i) => (state[i], derivs[i]),
            Primary::Analytic => {
                let a = self.analytic.as_ref().unwrap();
                let v = a.value(tau);
                (v, a.rate * v)
            }
        };
        let y_x = yp / xp;
        (y.abs()).min((y_x / y).abs())
    }

    /// Extract named slots from a trajectory of this problem's field.
    pub fn decode(&self, traj: &Trajectory) -> Result<ParametricSolution, TransformError> {
        if traj.dim() != self.dim() {
            return Err(TransformError::LayoutMismatch {
                got: traj.dim(),
                expected: self.dim(),
            });
        }
        let n = traj.len();
        let mut xi = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut lambda = Vec::with_capacity(n);
        for (tau, s) in traj.iter() {
            xi.push(tau);
            x.push(s[0]);
            lambda.push(self.lambda_at(tau, s));
        }

        // Decoded columns: integrated slots, plus the analytic slot at its
        // position, plus the implicit `t` column for the differential
        // transform of a second-order problem.
        let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
        for (j, name) in self.layout.iter().enumerate().skip(1) {
            let col = (0..n).map(|i| traj.state(i)[j]).collect();
            columns.push((name.clone(), col));
        }
        if let Some(a) = &self.analytic {
            let col: Vec<f64> = xi.iter().map(|&v| a.value(v)).collect();
            // position counts decoded columns after x
            let at = (a.position - 1).min(columns.len());
            columns.insert(at, (a.name.clone(), col));
        }
        if self.implicit_t {
            columns.push(("t".to_string(), xi.clone()));
        }

        let primary_name = match self.primary {
            Primary::Integrated(i) => self.layout[i].clone(),
            Primary::Analytic => self.analytic.as_ref().unwrap().name.clone(),
        };
        let y_idx = columns
            .iter()
            .position(|(name, _)| *name == primary_name)
            .expect("primary column present");
        let y = columns.remove(y_idx).1;

        let x_star_estimate = *x.last().unwrap();
        Ok(ParametricSolution {
            xi,
            x,
            y,
            primary_name,
            extra: columns,
            lambda_m: lambda,
            x_star_estimate,
            halt: traj.halt,
            approach: self.approach,
        })
    }
}

/// Grids `xi_i -> (x_i, y_i, ...)` with the stopping diagnostics that ended
/// integration. `y` is the blow-up component; the rest sit in `extra`.
#[derive(Debug, Clone)]
pub struct ParametricSolution {
    pub xi: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub primary_name: String,
    pub extra: Vec<(String, Vec<f64>)>,
    pub lambda_m: Vec<f64>,
    pub x_star_estimate: f64,
    pub halt: HaltReason,
    pub approach: Approach,
}

impl ParametricSolution {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    /// CSV with columns `xi,x,y[,...extras],lambda_m`.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("xi,x,y");
        for (name, _) in &self.extra {
            header.push(',');
            header.push_str(name);
        }
        header.push_str(",lambda_m\n");
        let mut out = header;
        for i in 0..self.len() {
            out.push_str(&format!("{:.17e},{:.17e},{:.17e}", self.xi[i], self.x[i], self.y[i]));
            for (_, col) in &self.extra {
                out.push_str(&format!(",{:.17e}", col[i]));
            }
            out.push_str(&format!(",{:.17e}\n", self.lambda_m[i]));
        }
        out
    }
}

/// `y` at the requested `x` values via monotone cubic interpolation in `x`.
pub fn reconstruct_on_x(ps: &ParametricSolution, xs: &[f64]) -> Result<Vec<f64>, TransformError> {
    let spline = MonotoneCubic::new(&ps.x, &ps.y).ok_or(TransformError::NonMonotoneX)?;
    xs.iter()
        .map(|&x| {
            spline
                .eval(x)
                .ok_or(TransformError::OutOfRange(x, spline.x_min(), spline.x_max()))
        })
        .collect()
}

fn state_slots(kind: &Kind) -> Vec<String> {
    let mut v = vec!["x".to_string()];
    match kind {
        Kind::FirstOrder => v.push("y".into()),
        Kind::SecondOrder => {
            v.push("y".into());
            v.push("t".into());
        }
        Kind::NthOrder(3) => {
            v.push("y".into());
            v.push("t".into());
            v.push("w".into());
        }
        Kind::NthOrder(n) | Kind::System(n) => {
            for i in 1..=*n {
                v.push(format!("y{i}"));
            }
        }
    }
    v
}

fn bind_rhs(p: &Problem, extra: Option<&str>) -> Result<Vec<BoundExpr>, TransformError> {
    let names = state_slots(&p.kind);
    let mut slots: Vec<&str> = names.iter().map(String::as_str).collect();
    if let Some(e) = extra {
        slots.push(e);
    }
    Ok(p.rhs
        .iter()
        .map(|e| e.bind(&slots, &p.params))
        .collect::<Result<Vec<_>, _>>()?)
}

fn check_initial(tp: &TransformedProblem) -> Result<(), TransformError> {
    let g0 = tp.gauge_at(tp.tau0, &tp.state0);
    if !g0.is_finite() || g0 <= 0.0 {
        return Err(TransformError::GaugeNotPositive { value: g0 });
    }
    let mut out = [0.0f64; 12];
    tp.field.eval(tp.tau0, &tp.state0, &mut out[..tp.dim()]);
    if !out[..tp.dim()].iter().all(|v| v.is_finite()) {
        return Err(TransformError::NonFiniteAtStart);
    }
    Ok(())
}

/// Pick the fastest-growing component of a system by a short naive RK4 run
/// (50 steps) of the untransformed equations, comparing `|f_k / y_k|`.
pub fn detect_growth_component(p: &Problem) -> Result<usize, TransformError> {
    let n = match p.kind {
        Kind::System(n) => n,
        _ => {
            return Err(TransformError::Incompatible {
                method: "growth",
                kind: p.kind,
            })
        }
    };
    let rhs = bind_rhs(p, None)?;
    let field = FnField {
        dim: n,
        f: move |x: f64, s: &[f64], out: &mut [f64]| {
            let mut args = [0.0f64; 12];
            args[0] = x;
            args[1..1 + s.len()].copy_from_slice(s);
            for (m, f) in rhs.iter().enumerate() {
                out[m] = f.eval(&args[..1 + s.len()]);
            }
        },
    };
    let traj = crate::stepper::rk4_fixed(&field, &p.initial, p.x0, 0.02, 50, &|_, _| false);
    let s = traj.last_state();
    let x = traj.last_tau();
    let rhs2 = bind_rhs(p, None)?;
    let mut args = [0.0f64; 12];
    args[0] = x;
    args[1..1 + n].copy_from_slice(s);
    let mut best = (1usize, f64::NEG_INFINITY);
    for (m, f) in rhs2.iter().enumerate() {
        let ratio = (f.eval(&args[..1 + n]) / s[m]).abs();
        if ratio.is_finite() && ratio > best.1 {
            best = (m + 1, ratio);
        }
    }
    Ok(best.0)
}

/// Resolve the growth component: dominant-balance exponents when the system is
/// polynomial, trial integration otherwise.
pub fn auto_growth_component(p: &Problem) -> Result<usize, TransformError> {
    match crate::estimates::exponent_solve(p) {
        Ok(report) => Ok(report.growing_index),
        Err(_) => detect_growth_component(p),
    }
}

/// Build the transformed problem. The decoded trajectory parametrizes the
/// original solution: `(y'_xi)/(x'_xi)` equals `f` along it.
pub fn build(p: &Problem, spec: &TransformSpec) -> Result<TransformedProblem, TransformError> {
    if let Kind::System(n) | Kind::NthOrder(n) = p.kind {
        if n > 8 {
            return Err(TransformError::SystemTooLarge(n));
        }
    }
    let incompatible = || TransformError::Incompatible {
        method: spec_static_name(spec),
        kind: p.kind,
    };
    let layout = state_slots(&p.kind);
    let dim = layout.len();
    let mut state0 = Vec::with_capacity(dim);
    state0.push(p.x0);
    state0.extend_from_slice(&p.initial);

    let tp = match (spec, p.kind) {
        (TransformSpec::Differential, Kind::FirstOrder) => {
            let f = bind_rhs(p, None)?.remove(0);
            let f2 = f.clone();
            let t0 = f.eval(&state0);
            if !t0.is_finite() {
                return Err(TransformError::NonFiniteAtStart);
            }
            let field = FnField {
                dim: 2,
                f: move |t: f64, s: &[f64], out: &mut [f64]| {
                    let mut grad = [0.0f64; 2];
                    f.eval_grad(s, &mut grad);
                    let den = grad[0] + t * grad[1];
                    out[0] = 1.0 / den;
                    out[1] = t / den;
                },
            };
            TransformedProblem {
                field: Box::new(field),
                state0,
                tau0: t0,
                layout,
                approach: Approach::PowerLaw,
                gauge: Box::new(move |t, s| {
                    let mut grad = [0.0f64; 2];
                    f2.eval_grad(s, &mut grad);
                    grad[0] + t * grad[1]
                }),
                analytic: None,
                primary: Primary::Integrated(1),
                implicit_t: false,
            }
        }
        (TransformSpec::Differential, Kind::SecondOrder) => {
            let f = bind_rhs(p, None)?.remove(0);
            let f2 = f.clone();
            let t0 = p.initial[1];
            let state0 = vec![p.x0, p.initial[0]];
            let field = FnField {
                dim: 2,
                f: move |t: f64, s: &[f64], out: &mut [f64]| {
                    // rhs is bound over (x, y, t); t is the independent variable here.
                    let args = [s[0], s[1], t];
                    let fv = f.eval(&args);
                    out[0] = 1.0 / fv;
                    out[1] = t / fv;
                },
            };
            TransformedProblem {
                field: Box::new(field),
                state0,
                tau0: t0,
                layout: vec!["x".into(), "y".into()],
                approach: Approach::PowerLaw,
                gauge: Box::new(move |t, s| f2.eval(&[s[0], s[1], t])),
                analytic: None,
                primary: Primary::Integrated(1),
                implicit_t: true,
            }
        }
        (TransformSpec::ModifiedDifferential { lambda }, Kind::FirstOrder) => {
            let lambda = *lambda;
            if lambda <= 0.0 {
                return Err(TransformError::BadLambda(lambda));
            }
            let f = bind_rhs(p, None)?.remove(0);
            let f2 = f.clone();
            let t0 = f.eval(&state0);
            if !(t0.is_finite() && t0 > 0.0) {
                return Err(TransformError::GaugeNotPositive { value: t0 });
            }
            let field = FnField {
                dim: 2,
                f: move |tau: f64, s: &[f64], out: &mut [f64]| {
                    let t = t0 * (lambda * tau).exp();
                    let mut grad = [0.0f64; 2];
                    f.eval_grad(s, &mut grad);
                    let den = grad[0] + t * grad[1];
                    out[0] = lambda * t / den;
                    out[1] = lambda * t * t / den;
                },
            };
            TransformedProblem {
                field: Box::new(field),
                state0,
                tau0: 0.0,
                layout,
                approach: Approach::Exponential,
                gauge: Box::new(move |tau, s| {
                    let t = t0 * (lambda * tau).exp();
                    let mut grad = [0.0f64; 2];
                    f2.eval_grad(s, &mut grad);
                    grad[0] + t * grad[1]
                }),
                analytic: Some(AnalyticSlot {
                    name: "t".into(),
                    position: 2,
                    y0: t0,
                    rate: lambda,
                    xi0: 0.0,
                }),
                primary: Primary::Integrated(1),
                implicit_t: false,
            }
        }
        (TransformSpec::NonLocal { g }, _) => {
            let g = g
                .bind(
                    &layout.iter().map(String::as_str).collect::<Vec<_>>(),
                    &p.params,
                )
                .map_err(TransformError::Expr)?;
            build_gauge_field(p, state0, layout, g_user(g), Approach::PowerLaw, false)?
        }
        (TransformSpec::DifferentialConstraint { g, xi0 }, _) => {
            let mut slots: Vec<&str> = layout.iter().map(String::as_str).collect();
            slots.push("xi");
            let g = g.bind(&slots, &p.params).map_err(TransformError::Expr)?;
            let dimn = layout.len();
            let gauge = move |tau: f64, s: &[f64]| {
                let mut args = [0.0f64; 12];
                args[..dimn].copy_from_slice(s);
                args[dimn] = tau;
                g.eval(&args[..dimn + 1])
            };
            let mut tp = build_gauge_field(
                p,
                state0,
                layout,
                Box::new(gauge),
                Approach::Exponential,
                false,
            )?;
            tp.tau0 = *xi0;
            tp
        }
        (TransformSpec::Hodograph, kind) => {
            let approach = Approach::PowerLaw;
            match kind {
                Kind::FirstOrder => {
                    let f = bind_rhs(p, None)?.remove(0);
                    build_gauge_field(
                        p,
                        state0,
                        layout,
                        Box::new(move |_tau, s| f.eval(s)),
                        approach,
                        true,
                    )?
                }
                // g = t for every higher-order scalar problem.
                Kind::SecondOrder | Kind::NthOrder(_) => build_gauge_field(
                    p,
                    state0,
                    layout,
                    Box::new(|_tau, s: &[f64]| s[2]),
                    approach,
                    true,
                )?,
                Kind::System(_) => return Err(incompatible()),
            }
        }
        (TransformSpec::ArcLength { c, s }, kind) => {
            let s_exp = *s;
            if s_exp <= 0.0 {
                return Err(TransformError::BadArcParams);
            }
            let n_terms = match kind {
                Kind::FirstOrder => 2,
                Kind::SecondOrder => 2,
                Kind::NthOrder(n) => n + 1,
                Kind::System(n) => n + 1,
            };
            let c = if c.is_empty() {
                // Defaults produce the classical arc-length gauges.
                match kind {
                    Kind::FirstOrder => vec![0.0, 1.0],
                    _ => vec![1.0; n_terms],
                }
            } else {
                c.clone()
            };
            if c.len() != n_terms || c.iter().any(|&v| v < 0.0) || c.iter().sum::<f64>() <= 0.0 {
                return Err(TransformError::BadArcParams);
            }
            let rhs = bind_rhs(p, None)?;
            let gauge: Gauge = match kind {
                Kind::FirstOrder => {
                    let f = rhs.into_iter().next().unwrap();
                    let (c1, c2) = (c[0], c[1]);
                    Box::new(move |_tau, s: &[f64]| {
                        c1 + (c2 + f.eval(s).abs().powf(s_exp)).powf(1.0 / s_exp)
                    })
                }
                Kind::SecondOrder => {
                    let f = rhs.into_iter().next().unwrap();
                    let c0 = c[0];
                    Box::new(move |_tau, s: &[f64]| {
                        (c0 + s[2].abs().powf(s_exp) + f.eval(s).abs().powf(s_exp))
                            .powf(1.0 / s_exp)
                    })
                }
                Kind::NthOrder(_) => {
                    let f = rhs.into_iter().next().unwrap();
                    let cs = c.clone();
                    Box::new(move |_tau, s: &[f64]| {
                        let mut acc = cs[0];
                        for (j, cj) in cs[1..cs.len() - 1].iter().enumerate() {
                            acc += cj * s[2 + j].abs().powf(s_exp);
                        }
                        acc += cs[cs.len() - 1] * f.eval(s).abs().powf(s_exp);
                        acc.powf(1.0 / s_exp)
                    })
                }
                Kind::System(n) => {
                    let cs = c.clone();
                    Box::new(move |_tau, s: &[f64]| {
                        let mut acc = cs[0];
                        for (m, f) in rhs.iter().enumerate() {
                            acc += cs[m + 1] * f.eval(s).abs().powf(s_exp);
                        }
                        let _ = n;
                        acc.powf(1.0 / s_exp)
                    })
                }
            };
            build_gauge_field(p, state0, layout, gauge, Approach::PowerLaw, false)?
        }
        (TransformSpec::OnePlusAbs, kind) => {
            let rhs = bind_rhs(p, None)?;
            let gauge: Gauge = match kind {
                Kind::FirstOrder => {
                    let f = rhs.into_iter().next().unwrap();
                    Box::new(move |_tau, s: &[f64]| 1.0 + f.eval(s).abs())
                }
                Kind::SecondOrder => {
                    let f = rhs.into_iter().next().unwrap();
                    Box::new(move |_tau, s: &[f64]| 1.0 + s[2].abs() + f.eval(s).abs())
                }
                Kind::NthOrder(n) => {
                    let f = rhs.into_iter().next().unwrap();
                    Box::new(move |_tau, s: &[f64]| {
                        let mut acc = 1.0;
                        for j in 2..=n {
                            acc += s[j].abs();
                        }
                        acc + f.eval(s).abs()
                    })
                }
                Kind::System(_) => Box::new(move |_tau, s: &[f64]| {
                    1.0 + rhs.iter().map(|f| f.eval(s).abs()).sum::<f64>()
                }),
            };
            build_gauge_field(p, state0, layout, gauge, Approach::PowerLaw, false)?
        }
        (TransformSpec::ExpFOverY, Kind::FirstOrder) => {
            let f = bind_rhs(p, None)?.remove(0);
            let f2 = f.clone();
            let field = FnField {
                dim: 2,
                f: move |_xi: f64, s: &[f64], out: &mut [f64]| {
                    out[0] = s[1] / f.eval(s);
                    out[1] = s[1];
                },
            };
            TransformedProblem {
                field: Box::new(field),
                state0,
                tau0: 0.0,
                layout,
                approach: Approach::Exponential,
                gauge: Box::new(move |_xi, s| f2.eval(s) / s[1]),
                analytic: None,
                primary: Primary::Integrated(1),
                implicit_t: false,
            }
        }
        (TransformSpec::ExpTOverY, Kind::SecondOrder) => {
            let f = bind_rhs(p, None)?.remove(0);
            let field = FnField {
                dim: 3,
                f: move |_xi: f64, s: &[f64], out: &mut [f64]| {
                    let ratio = s[1] / s[2];
                    out[0] = ratio;
                    out[1] = s[1];
                    out[2] = f.eval(s) * ratio;
                },
            };
            TransformedProblem {
                field: Box::new(field),
                state0,
                tau0: 0.0,
                layout,
                approach: Approach::Exponential,
                gauge: Box::new(|_xi, s: &[f64]| s[2] / s[1]),
                analytic: None,
                primary: Primary::Integrated(1),
                implicit_t: false,
            }
        }
        (TransformSpec::ExpTOverY, Kind::NthOrder(3)) => {
            let f = bind_rhs(p, None)?.remove(0);
            let field = FnField {
                dim: 4,
                f: move |_xi: f64, s: &[f64], out: &mut [f64]| {
                    let ratio = s[1] / s[2];
                    out[0] = ratio;
                    out[1] = s[1];
                    out[2] = s[3] * ratio;
                    out[3] = f.eval(s) * ratio;
                },
            };
            TransformedProblem {
                field: Box::new(field),
                state0,
                tau0: 0.0,
                layout,
                approach: Approach::Exponential,
                gauge: Box::new(|_xi, s: &[f64]| s[2] / s[1]),
                analytic: None,
                primary: Primary::Integrated(1),
                implicit_t: false,
            }
        }
        (TransformSpec::ExpFOverT, Kind::SecondOrder) => {
            let f = bind_rhs(p, None)?.remove(0);
            let f2 = f.clone();
            let field = FnField {
                dim: 3,
                f: move |_xi: f64, s: &[f64], out: &mut [f64]| {
                    let fv = f.eval(s);
                    out[0] = s[2] / fv;
                    out[1] = s[2] * s[2] / fv;
                    out[2] = s[2];
                },
            };
            TransformedProblem {
                field: Box::new(field),
                state0,
                tau0: 0.0,
                layout,
                approach: Approach::Exponential,
                gauge: Box::new(move |_xi, s| f2.eval(s) / s[2]),
                analytic: None,
                primary: Primary::Integrated(1),
                implicit_t: false,
            }
        }
        (TransformSpec::ExpWOverT, Kind::NthOrder(3)) => {
            let f = bind_rhs(p, None)?.remove(0);
            let field = FnField {
                dim: 4,
                f: move |_xi: f64, s: &[f64], out: &mut [f64]| {
                    let ratio = s[2] / s[3];
                    out[0] = ratio;
                    out[1] = s[2] * ratio;
                    out[2] = s[2];
                    out[3] = f.eval(s) * ratio;
                },
            };
            TransformedProblem {
                field: Box::new(field),
                state0,
                tau0: 0.0,
                layout,
                approach: Approach::Exponential,
                gauge: Box::new(|_xi, s: &[f64]| s[3] / s[2]),
                analytic: None,
                primary: Primary::Integrated(1),
                implicit_t: false,
            }
        }
        (TransformSpec::ExpFOverW, Kind::NthOrder(3)) => {
            let f = bind_rhs(p, None)?.remove(0);
            let f2 = f.clone();
            let field = FnField {
                dim: 4,
                f: move |_xi: f64, s: &[f64], out: &mut [f64]| {
                    let fv = f.eval(s);
                    out[0] = s[3] / fv;
                    out[1] = s[2] * s[3] / fv;
                    out[2] = s[3] * s[3] / fv;
                    out[3] = s[3];
                },
            };
            TransformedProblem {
                field: Box::new(field),
                state0,
                tau0: 0.0,
                layout,
                approach: Approach::Exponential,
                gauge: Box::new(move |_xi, s| f2.eval(s) / s[3]),
                analytic: None,
                primary: Primary::Integrated(1),
                implicit_t: false,
            }
        }
        (TransformSpec::GrowthComponent { k }, Kind::System(n)) => {
            let k = match k {
                Some(k) => *k,
                None => auto_growth_component(p)?,
            };
            if k == 0 || k > n {
                return Err(TransformError::BadGrowthIndex { k, n });
            }
            let yk0 = p.initial[k - 1];
            if yk0 == 0.0 {
                return Err(TransformError::ZeroGrowthInitial);
            }
            let rhs = bind_rhs(p, None)?;
            let rhs_gauge = rhs.clone();
            // Reduced state: x plus every component except y_k.
            let mut red_layout = vec!["x".to_string()];
            for m in 1..=n {
                if m != k {
                    red_layout.push(format!("y{m}"));
                }
            }
            let mut red_state0 = vec![p.x0];
            for m in 1..=n {
                if m != k {
                    red_state0.push(p.initial[m - 1]);
                }
            }
            let expand = move |xi: f64, s: &[f64], args: &mut [f64]| {
                // args = (x, y1..yn) with y_k = yk0*exp(xi) substituted.
                args[0] = s[0];
                let mut src = 1;
                for m in 1..=n {
                    if m == k {
                        args[m] = yk0 * xi.exp();
                    } else {
                        args[m] = s[src];
                        src += 1;
                    }
                }
            };
            let field = FnField {
                dim: n,
                f: move |xi: f64, s: &[f64], out: &mut [f64]| {
                    let mut args = [0.0f64; 12];
                    expand(xi, s, &mut args);
                    let yk = args[k];
                    let fk = rhs[k - 1].eval(&args[..n + 1]);
                    out[0] = yk / fk;
                    let mut dst = 1;
                    for m in 1..=n {
                        if m != k {
                            out[dst] = yk * rhs[m - 1].eval(&args[..n + 1]) / fk;
                            dst += 1;
                        }
                    }
                },
            };
            TransformedProblem {
                field: Box::new(field),
                state0: red_state0,
                tau0: 0.0,
                layout: red_layout,
                approach: Approach::Exponential,
                gauge: Box::new(move |xi, s| {
                    let mut args = [0.0f64; 12];
                    expand(xi, s, &mut args);
                    rhs_gauge[k - 1].eval(&args[..n + 1]) / args[k]
                }),
                analytic: Some(AnalyticSlot {
                    name: format!("y{k}"),
                    position: k,
                    y0: yk0,
                    rate: 1.0,
                    xi0: 0.0,
                }),
                primary: Primary::Analytic,
                implicit_t: false,
            }
        }
        _ => return Err(incompatible()),
    };

    check_initial(&tp)?;
    Ok(tp)
}

fn spec_static_name(spec: &TransformSpec) -> &'static str {
    spec.method_name()
}

fn g_user(g: BoundExpr) -> Gauge {
    Box::new(move |_tau, s: &[f64]| g.eval(s))
}

/// Shared construction for every `x' = 1/g, (y_m)' = f_m/g` style transform.
fn build_gauge_field(
    p: &Problem,
    state0: Vec<f64>,
    layout: Vec<String>,
    gauge: Gauge,
    approach: Approach,
    _hodograph: bool,
) -> Result<TransformedProblem, TransformError> {
    let dim = layout.len();
    let rhs = bind_rhs(p, None)?;
    let kind = p.kind;
    // Both the field and the diagnostics need the gauge closure.
    let shared = std::sync::Arc::new(gauge);
    let field_side = shared.clone();
    let field = FnField {
        dim,
        f: move |tau: f64, s: &[f64], out: &mut [f64]| {
            let g = (field_side)(tau, s);
            out[0] = 1.0 / g;
            match kind {
                Kind::FirstOrder => {
                    out[1] = rhs[0].eval(s) / g;
                }
                Kind::SecondOrder => {
                    out[1] = s[2] / g;
                    out[2] = rhs[0].eval(s) / g;
                }
                Kind::NthOrder(n) => {
                    for j in 1..n {
                        out[j] = s[j + 1] / g;
                    }
                    out[n] = rhs[0].eval(s) / g;
                }
                Kind::System(n) => {
                    for m in 0..n {
                        out[m + 1] = rhs[m].eval(s) / g;
                    }
                }
            }
        },
    };
    let primary = match kind {
        Kind::System(_) => Primary::Integrated(auto_growth_component(p).unwrap_or(1)),
        _ => Primary::Integrated(1),
    };
    Ok(TransformedProblem {
        field: Box::new(field),
        state0,
        tau0: 0.0,
        layout,
        approach,
        gauge: Box::new(move |tau, s: &[f64]| (shared)(tau, s)),
        analytic: None,
        primary,
        implicit_t: false,
    })
}
