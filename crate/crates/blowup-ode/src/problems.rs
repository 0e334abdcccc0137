//! Uniform model of Cauchy problems (scalar order 1/2/n and coupled systems)
//! plus a built-in registry of test problems with exact solutions and exact
//! blow-up points, serving as the oracle layer for the rest of the crate.

use std::collections::BTreeMap;

use serde::Deserialize;
use thiserror::Error;

use crate::expr::{Expr, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    FirstOrder,
    SecondOrder,
    NthOrder(usize),
    System(usize),
}

impl Kind {
    /// Number of initial values (and of state components besides x).
    pub fn state_len(&self) -> usize {
        match self {
            Kind::FirstOrder => 1,
            Kind::SecondOrder => 2,
            Kind::NthOrder(n) => *n,
            Kind::System(n) => *n,
        }
    }

    pub fn rhs_len(&self) -> usize {
        match self {
            Kind::System(n) => *n,
            _ => 1,
        }
    }

    /// Variable names the right-hand side(s) may mention.
    pub fn allowed_vars(&self) -> Vec<String> {
        match self {
            Kind::FirstOrder => vec!["x".into(), "y".into()],
            Kind::SecondOrder => vec!["x".into(), "y".into(), "t".into()],
            Kind::NthOrder(3) => vec!["x".into(), "y".into(), "t".into(), "w".into()],
            Kind::NthOrder(n) => {
                let mut v = vec!["x".to_string()];
                v.extend((1..=*n).map(|i| format!("y{i}")));
                v
            }
            Kind::System(n) => {
                let mut v = vec!["x".to_string()];
                v.extend((1..=*n).map(|i| format!("y{i}")));
                v
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem `{0}`")]
    UnknownName(String),
    #[error("invalid parameters for `{name}`: {msg}")]
    InvalidParams { name: String, msg: String },
    #[error("initial data length {got} does not match kind (expected {expected})")]
    InitialLength { got: usize, expected: usize },
    #[error("right-hand side count {got} does not match kind (expected {expected})")]
    RhsLength { got: usize, expected: usize },
    #[error("right-hand side uses variable `{0}` not allowed for this kind")]
    DisallowedVar(String),
    #[error("x = {x} is outside the domain of existence (x_* = {x_star})")]
    OutsideDomain { x: f64, x_star: f64 },
    #[error("no exact solution available")]
    NoExactSolution,
    #[error("expression error: {0}")]
    Expr(#[from] crate::expr::ParseError),
    #[error("evaluation error: {0}")]
    Eval(#[from] crate::expr::EvalError),
    #[error("bad problem JSON: {0}")]
    Json(String),
}

/// A Cauchy problem: right-hand side(s), initial point and data, parameters.
#[derive(Debug, Clone)]
pub struct Problem {
    pub kind: Kind,
    pub rhs: Vec<Expr>,
    pub x0: f64,
    pub initial: Vec<f64>,
    pub params: Params,
}

impl Problem {
    pub fn new(
        kind: Kind,
        rhs: Vec<Expr>,
        x0: f64,
        initial: Vec<f64>,
        params: Params,
    ) -> Result<Problem, ProblemError> {
        let p = Problem {
            kind,
            rhs,
            x0,
            initial,
            params,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), ProblemError> {
        if self.initial.len() != self.kind.state_len() {
            return Err(ProblemError::InitialLength {
                got: self.initial.len(),
                expected: self.kind.state_len(),
            });
        }
        if self.rhs.len() != self.kind.rhs_len() {
            return Err(ProblemError::RhsLength {
                got: self.rhs.len(),
                expected: self.kind.rhs_len(),
            });
        }
        let allowed = self.kind.allowed_vars();
        for rhs in &self.rhs {
            for v in rhs.free_vars(&self.params) {
                if !allowed.contains(&v) {
                    return Err(ProblemError::DisallowedVar(v));
                }
            }
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.get(name).copied()
    }

    /// Load from a JSON document `{kind, rhs:[text], x0, initial:[..], params:{..}}`.
    pub fn from_json(doc: &str) -> Result<Problem, ProblemError> {
        #[derive(Deserialize)]
        struct Doc {
            kind: String,
            rhs: Vec<String>,
            x0: f64,
            initial: Vec<f64>,
            #[serde(default)]
            params: BTreeMap<String, f64>,
        }
        let doc: Doc = serde_json::from_str(doc).map_err(|e| ProblemError::Json(e.to_string()))?;
        let kind = match doc.kind.as_str() {
            "first-order" => Kind::FirstOrder,
            "second-order" => Kind::SecondOrder,
            "nth-order" => Kind::NthOrder(doc.initial.len()),
            "system" => Kind::System(doc.rhs.len()),
            other => {
                return Err(ProblemError::Json(format!(
                    "unknown kind `{other}` (expected first-order, second-order, nth-order, system)"
                )))
            }
        };
        let rhs = doc
            .rhs
            .iter()
            .map(|s| Expr::parse(s))
            .collect::<Result<Vec<_>, _>>()?;
        Problem::new(kind, rhs, doc.x0, doc.initial, doc.params)
    }
}

/// Reduce a scalar higher-order problem to the equivalent first-order system
/// `y1' = y2, ..., yn' = f`. First-order and system inputs are returned unchanged.
pub fn reduce_to_system(p: &Problem) -> Problem {
    match p.kind {
        Kind::FirstOrder | Kind::System(_) => p.clone(),
        Kind::SecondOrder => {
            let f = p.rhs[0].rename_vars(&[("y", "y1"), ("t", "y2")]);
            Problem {
                kind: Kind::System(2),
                rhs: vec![Expr::parse("y2").unwrap(), f],
                x0: p.x0,
                initial: p.initial.clone(),
                params: p.params.clone(),
            }
        }
        Kind::NthOrder(n) => {
            let f = p.rhs[0].rename_vars(&[("y", "y1"), ("t", "y2"), ("w", "y3")]);
            let mut rhs: Vec<Expr> = (2..=n)
                .map(|i| Expr::parse(&format!("y{i}")).unwrap())
                .collect();
            rhs.push(f);
            Problem {
                kind: Kind::System(n),
                rhs,
                x0: p.x0,
                initial: p.initial.clone(),
                params: p.params.clone(),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Singularity {
    /// Power singularity `y ~ A (x_* - x)^(-beta)`.
    Pole(f64),
    /// Logarithmic singularity `y ~ A ln[B (x_* - x)]`.
    Logarithmic,
    /// Bounded solution, no blow-up.
    None,
}

/// Closed-form solution states as expressions in `x` (parameters pre-bound).
#[derive(Debug, Clone)]
pub struct ExactSolution {
    /// One expression per state component (`y` or `y, t[, w]` or `y1..yn`).
    pub y_of_x: Vec<Expr>,
    /// Parameter map the expressions are evaluated with (includes `x_star` when finite).
    pub params: Params,
    pub x_star: Option<f64>,
    pub singularity: Singularity,
    /// Index of the blow-up component (0 for scalar problems).
    pub primary: usize,
}

impl ExactSolution {
    /// Exact state at `x`; errors past the domain of existence.
    pub fn eval_at(&self, x: f64) -> Result<Vec<f64>, ProblemError> {
        if let Some(xs) = self.x_star {
            if x >= xs {
                return Err(ProblemError::OutsideDomain { x, x_star: xs });
            }
        }
        let mut env = self.params.clone();
        env.insert("x".to_string(), x);
        self.y_of_x
            .iter()
            .map(|e| e.eval(&env).map_err(ProblemError::from))
            .collect()
    }

    /// The blow-up component at `x`.
    pub fn primary_at(&self, x: f64) -> Result<f64, ProblemError> {
        Ok(self.eval_at(x)?[self.primary])
    }
}

struct EntryDef {
    name: &'static str,
    describe: &'static str,
    kind: Kind,
    rhs: &'static [&'static str],
    defaults: &'static [(&'static str, f64)],
    initial: fn(&Params) -> Vec<f64>,
    validate: fn(&Params) -> Result<(), String>,
    x_star: fn(&Params) -> Option<f64>,
    exact: Option<&'static [&'static str]>,
    singularity: fn(&Params) -> Singularity,
    primary: usize,
}

fn no_validation(_: &Params) -> Result<(), String> {
    Ok(())
}

fn power_family_validate(p: &Params) -> Result<(), String> {
    let (a, b, g) = (p["a"], p["b"], p["gamma"]);
    if a <= 0.0 || b <= 0.0 || g <= 1.0 {
        return Err(format!("requires a>0, b>0, gamma>1 (got a={a}, b={b}, gamma={g})"));
    }
    Ok(())
}

fn power_family_x_star(p: &Params) -> Option<f64> {
    let (a, b, g) = (p["a"], p["b"], p["gamma"]);
    Some(1.0 / (a.powf(g - 1.0) * b * (g - 1.0)))
}

fn power_family_sing(p: &Params) -> Singularity {
    Singularity::Pole(1.0 / (p["gamma"] - 1.0))
}

const POWER_EXACT: &[&str] = &["(b*(gamma-1))^(1/(1-gamma)) * (x_star - x)^(-1/(gamma-1))"];
const POWER2_EXACT: &[&str] = &[
    "(b*(gamma-1))^(1/(1-gamma)) * (x_star - x)^(-1/(gamma-1))",
    "b*((b*(gamma-1))^(1/(1-gamma)) * (x_star - x)^(-1/(gamma-1)))^gamma",
];

static ENTRIES: &[EntryDef] = &[
    EntryDef {
        name: "power1",
        describe: "y' = b*y^gamma, y(0) = a; pole at 1/(a^(gamma-1)*b*(gamma-1))",
        kind: Kind::FirstOrder,
        rhs: &["b*y^gamma"],
        defaults: &[("a", 1.0), ("b", 1.0), ("gamma", 2.0)],
        initial: |p| vec![p["a"]],
        validate: power_family_validate,
        x_star: power_family_x_star,
        exact: Some(POWER_EXACT),
        singularity: power_family_sing,
        primary: 0,
    },
    EntryDef {
        name: "exp1",
        describe: "y' = b*exp(y), y(0) = a; logarithmic singularity at exp(-a)/b",
        kind: Kind::FirstOrder,
        rhs: &["b*exp(y)"],
        defaults: &[("a", 0.0), ("b", 1.0)],
        initial: |p| vec![p["a"]],
        validate: |p| {
            if p["a"] < 0.0 || p["b"] <= 0.0 {
                return Err("requires a>=0, b>0".to_string());
            }
            Ok(())
        },
        x_star: |p| Some((-p["a"]).exp() / p["b"]),
        exact: Some(&["-ln(exp(-a) - b*x)"]),
        singularity: |_| Singularity::Logarithmic,
        primary: 0,
    },
    EntryDef {
        name: "riccati-x2",
        describe: "y' = y^2 + x^m, y(0) = a; x_* bracketed, no elementary closed form",
        kind: Kind::FirstOrder,
        rhs: &["y^2 + x^m"],
        defaults: &[("a", 1.0), ("m", 2.0)],
        initial: |p| vec![p["a"]],
        validate: |p| {
            if p["a"] <= 0.0 || p["m"] <= 0.0 {
                return Err("requires a>0, m>0".to_string());
            }
            Ok(())
        },
        x_star: |_| None,
        exact: None,
        singularity: |_| Singularity::Pole(1.0),
        primary: 0,
    },
    EntryDef {
        name: "abel",
        describe: "y' = y^3 + x^2, y(0) = 1; one-sided bound x_* <= 1/2",
        kind: Kind::FirstOrder,
        rhs: &["y^3 + x^2"],
        defaults: &[],
        initial: |_| vec![1.0],
        validate: no_validation,
        x_star: |_| None,
        exact: None,
        singularity: |_| Singularity::Pole(0.5),
        primary: 0,
    },
    EntryDef {
        name: "sing-pole1",
        describe: "y' = y^2/(b-x), y(0) = a; blow-up before the coordinate pole at x=b",
        kind: Kind::FirstOrder,
        rhs: &["y^2/(b-x)"],
        defaults: &[("a", 1.0), ("b", 1.0)],
        initial: |p| vec![p["a"]],
        validate: |p| {
            if p["a"] <= 0.0 || p["b"] <= 0.0 {
                return Err("requires a>0, b>0".to_string());
            }
            Ok(())
        },
        x_star: |p| Some(p["b"] * (1.0 - (-1.0 / p["a"]).exp())),
        exact: Some(&["1/(ln(1 - x/b) + 1/a)"]),
        singularity: |_| Singularity::Pole(1.0),
        primary: 0,
    },
    EntryDef {
        name: "sing-pole2",
        describe: "y' = y^2/(b-x)^2, y(0) = a; blow-up before the second-order pole at x=b",
        kind: Kind::FirstOrder,
        rhs: &["y^2/(b-x)^2"],
        defaults: &[("a", 1.0), ("b", 1.0)],
        initial: |p| vec![p["a"]],
        validate: |p| {
            if p["a"] <= 0.0 || p["b"] <= 0.0 {
                return Err("requires a>0, b>0".to_string());
            }
            Ok(())
        },
        x_star: |p| Some(p["b"] * p["b"] / (p["a"] + p["b"])),
        exact: Some(&["(a*b/(a+b)) * (1 + a*b/(b^2 - (a+b)*x))"]),
        singularity: |_| Singularity::Pole(1.0),
        primary: 0,
    },
    EntryDef {
        name: "zero-rhs",
        describe: "y' = y^2*(b-x), y(0) = a; blow-up iff b >= sqrt(2/a)",
        kind: Kind::FirstOrder,
        rhs: &["y^2*(b-x)"],
        defaults: &[("a", 1.0), ("b", 2.0)],
        initial: |p| vec![p["a"]],
        validate: |p| {
            if p["a"] <= 0.0 || p["b"] <= 0.0 {
                return Err("requires a>0, b>0".to_string());
            }
            Ok(())
        },
        x_star: |p| {
            let (a, b) = (p["a"], p["b"]);
            // The bifurcation boundary b = sqrt(2/a) is classified as blow-up.
            if b >= (2.0 / a).sqrt() {
                Some(b - (b * b - 2.0 / a).sqrt())
            } else {
                None
            }
        },
        exact: Some(&["a/(0.5*a*x^2 - a*b*x + 1)"]),
        singularity: |p| {
            if p["b"] >= (2.0 / p["a"]).sqrt() {
                Singularity::Pole(1.0)
            } else {
                Singularity::None
            }
        },
        primary: 0,
    },
    EntryDef {
        name: "riccati-decreasing",
        describe: "y' = (2-x)*y^2, y(0) = 1; pole at 2 - sqrt(2)",
        kind: Kind::FirstOrder,
        rhs: &["(2-x)*y^2"],
        defaults: &[],
        initial: |_| vec![1.0],
        validate: no_validation,
        x_star: |_| Some(2.0 - 2f64.sqrt()),
        exact: Some(&["2/(x^2 - 4*x + 2)"]),
        singularity: |_| Singularity::Pole(1.0),
        primary: 0,
    },
    EntryDef {
        name: "ode2-power",
        describe: "y'' = b^2*gamma*y^(2*gamma-1), y(0)=a, y'(0)=a^gamma*b",
        kind: Kind::SecondOrder,
        rhs: &["b^2*gamma*y^(2*gamma-1)"],
        defaults: &[("a", 1.0), ("b", 1.0), ("gamma", 2.0)],
        initial: |p| vec![p["a"], p["a"].powf(p["gamma"]) * p["b"]],
        validate: power_family_validate,
        x_star: power_family_x_star,
        exact: Some(POWER2_EXACT),
        singularity: power_family_sing,
        primary: 0,
    },
    EntryDef {
        name: "ode2-chain",
        describe: "y'' = b*gamma*y^(gamma-1)*y', y(0)=a, y'(0)=a^gamma*b",
        kind: Kind::SecondOrder,
        rhs: &["b*gamma*y^(gamma-1)*t"],
        defaults: &[("a", 1.0), ("b", 1.0), ("gamma", 2.0)],
        initial: |p| vec![p["a"], p["a"].powf(p["gamma"]) * p["b"]],
        validate: power_family_validate,
        x_star: power_family_x_star,
        exact: Some(POWER2_EXACT),
        singularity: power_family_sing,
        primary: 0,
    },
    EntryDef {
        name: "ode2-exp",
        describe: "y'' = exp(2*y), y(0)=0, y'(0)=1; logarithmic singularity at 1",
        kind: Kind::SecondOrder,
        rhs: &["exp(2*y)"],
        defaults: &[],
        initial: |_| vec![0.0, 1.0],
        validate: no_validation,
        x_star: |_| Some(1.0),
        exact: Some(&["-ln(1-x)", "1/(1-x)"]),
        singularity: |_| Singularity::Logarithmic,
        primary: 0,
    },
    EntryDef {
        name: "ode3-power",
        describe: "y''' = 6*y^4, y(0)=1, y'(0)=1, y''(0)=2; pole at 1",
        kind: Kind::NthOrder(3),
        rhs: &["6*y^4"],
        defaults: &[],
        initial: |_| vec![1.0, 1.0, 2.0],
        validate: no_validation,
        x_star: |_| Some(1.0),
        exact: Some(&["1/(1-x)", "(1-x)^(-2)", "2*(1-x)^(-3)"]),
        singularity: |_| Singularity::Pole(1.0),
        primary: 0,
    },
    EntryDef {
        name: "system3",
        describe: "y1'=-y1*y2, y2'=y2^4*y3, y3'=-2*y1, all ICs 1; y2 blows up at 1",
        kind: Kind::System(3),
        rhs: &["-y1*y2", "y2^4*y3", "-2*y1"],
        defaults: &[],
        initial: |_| vec![1.0, 1.0, 1.0],
        validate: no_validation,
        x_star: |_| Some(1.0),
        exact: Some(&["1-x", "1/(1-x)", "(1-x)^2"]),
        singularity: |_| Singularity::Pole(1.0),
        primary: 1,
    },
];

/// Immutable registry of the built-in test problems.
pub struct Registry;

impl Registry {
    pub fn names() -> Vec<&'static str> {
        ENTRIES.iter().map(|e| e.name).collect()
    }

    pub fn describe(name: &str) -> Option<&'static str> {
        ENTRIES.iter().find(|e| e.name == name).map(|e| e.describe)
    }

    /// Instantiate a named problem, recomputing `x_star` from the closed form
    /// after applying the parameter overrides.
    pub fn get(
        name: &str,
        overrides: &Params,
    ) -> Result<(Problem, Option<ExactSolution>), ProblemError> {
        let entry = ENTRIES
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ProblemError::UnknownName(name.to_string()))?;
        let mut params: Params = entry
            .defaults
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        for (k, v) in overrides {
            if !params.contains_key(k) {
                return Err(ProblemError::InvalidParams {
                    name: name.to_string(),
                    msg: format!("unknown parameter `{k}`"),
                });
            }
            params.insert(k.clone(), *v);
        }
        (entry.validate)(&params).map_err(|msg| ProblemError::InvalidParams {
            name: name.to_string(),
            msg,
        })?;

        let rhs = entry
            .rhs
            .iter()
            .map(|s| Expr::parse(s))
            .collect::<Result<Vec<_>, _>>()?;
        let problem = Problem::new(
            entry.kind,
            rhs,
            0.0,
            (entry.initial)(&params),
            params.clone(),
        )?;

        let x_star = (entry.x_star)(&params);
        let exact = entry.exact.map(|texts| {
            let mut ep = params.clone();
            if let Some(xs) = x_star {
                ep.insert("x_star".to_string(), xs);
            }
            ExactSolution {
                y_of_x: texts.iter().map(|s| Expr::parse(s).unwrap()).collect(),
                params: ep,
                x_star,
                singularity: (entry.singularity)(&params),
                primary: entry.primary,
            }
        });
        Ok((problem, exact))
    }
}

/// Maximum relative residual of the exact solution substituted into the ODE,
/// sampled at `n` points of `[x0, hi)` where `hi = 0.9*x_star` (or `x0 + 2`
/// for bounded solutions). The state derivatives come from forward-mode AD in
/// `x`, so the check is exact up to roundoff.
pub fn exact_residual(p: &Problem, sol: &ExactSolution, n: usize) -> Result<f64, ProblemError> {
    let mut sys = reduce_to_system(p);
    if sys.kind == Kind::FirstOrder {
        sys.kind = Kind::System(1);
        sys.rhs = vec![sys.rhs[0].rename_vars(&[("y", "y1")])];
    }
    let m = sys.kind.state_len();
    let hi = match sol.x_star {
        Some(xs) => 0.9 * xs,
        None => p.x0 + 2.0,
    };
    let mut worst = 0.0f64;
    for i in 0..n {
        let x = p.x0 + (hi - p.x0) * (i as f64 + 0.5) / n as f64;
        let mut env = sol.params.clone();
        env.insert("x".to_string(), x);
        let mut dstate = Vec::with_capacity(m);
        let mut rhs_env = sys.params.clone();
        rhs_env.insert("x".to_string(), x);
        for (j, e) in sol.y_of_x.iter().enumerate() {
            let d = e.eval_with_partials(&env, &["x"])?;
            dstate.push(d.partials["x"]);
            rhs_env.insert(format!("y{}", j + 1), d.value);
        }
        for (j, f) in sys.rhs.iter().enumerate() {
            let fv = f.eval(&rhs_env)?;
            let rel = (dstate[j] - fv).abs() / fv.abs().max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(pairs: &[(&str, f64)]) -> Params {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn power1_defaults() {
        let (p, exact) = Registry::get("power1", &Params::new()).unwrap();
        assert_eq!(p.kind, Kind::FirstOrder);
        let exact = exact.unwrap();
        assert_eq!(exact.x_star, Some(1.0));
        // y = 1/(1-x)
        assert!((exact.primary_at(0.5).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn power1_rejects_bad_gamma() {
        let err = Registry::get("power1", &overrides(&[("gamma", 1.0)]));
        assert!(matches!(err, Err(ProblemError::InvalidParams { .. })));
    }

    #[test]
    fn exp1_x_star() {
        let (_, exact) = Registry::get("exp1", &Params::new()).unwrap();
        let exact = exact.unwrap();
        assert_eq!(exact.x_star, Some(1.0));
        assert_eq!(exact.singularity, Singularity::Logarithmic);
    }

    #[test]
    fn riccati_x2_has_no_closed_form() {
        let (_, exact) = Registry::get("riccati-x2", &Params::new()).unwrap();
        assert!(exact.is_none());
    }

    #[test]
    fn sing_pole1_x_star() {
        let (_, exact) = Registry::get("sing-pole1", &Params::new()).unwrap();
        let xs = exact.unwrap().x_star.unwrap();
        assert!((xs - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((xs - 0.6321).abs() < 1e-4);
    }

    #[test]
    fn zero_rhs_branches() {
        let (_, exact) = Registry::get("zero-rhs", &Params::new()).unwrap();
        let exact = exact.unwrap();
        let xs = exact.x_star.unwrap();
        assert!((xs - (2.0 - 2f64.sqrt())).abs() < 1e-12);

        // Below the bifurcation: bounded, maximum a/(1 - a*b^2/2) at x = b.
        let (_, exact) = Registry::get("zero-rhs", &overrides(&[("b", 1.0)])).unwrap();
        let exact = exact.unwrap();
        assert_eq!(exact.x_star, None);
        assert_eq!(exact.singularity, Singularity::None);
        let y_at_b = exact.primary_at(1.0).unwrap();
        assert!((y_at_b - 1.0 / (1.0 - 0.5)).abs() < 1e-8);

        // Boundary case classified as blow-up with x_star = b.
        let b = (2.0f64).sqrt();
        let (_, exact) = Registry::get("zero-rhs", &overrides(&[("b", b)])).unwrap();
        let xs = exact.unwrap().x_star.unwrap();
        // sqrt(b^2 - 2/a) amplifies roundoff when the radicand cancels.
        assert!((xs - b).abs() < 1e-7);
    }

    #[test]
    fn system3_exact() {
        let (p, exact) = Registry::get("system3", &Params::new()).unwrap();
        assert_eq!(p.kind, Kind::System(3));
        let exact = exact.unwrap();
        assert_eq!(exact.primary, 1);
        let st = exact.eval_at(0.5).unwrap();
        assert!((st[0] - 0.5).abs() < 1e-12);
        assert!((st[1] - 2.0).abs() < 1e-12);
        assert!((st[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn exact_eval_domain() {
        let (_, exact) = Registry::get("power1", &Params::new()).unwrap();
        let exact = exact.unwrap();
        assert!(matches!(
            exact.eval_at(1.5),
            Err(ProblemError::OutsideDomain { .. })
        ));
        let (_, exact) = Registry::get("ode2-exp", &Params::new()).unwrap();
        let y = exact.unwrap().primary_at(0.5).unwrap();
        assert!((y - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reduce_second_order() {
        let (p, _) = Registry::get("ode2-power", &Params::new()).unwrap();
        let sys = reduce_to_system(&p);
        assert_eq!(sys.kind, Kind::System(2));
        // y1' = y2; y2' = b^2*gamma*y1^(2*gamma-1)
        let mut env = sys.params.clone();
        env.insert("x".into(), 0.0);
        env.insert("y1".into(), 2.0);
        env.insert("y2".into(), 7.0);
        assert_eq!(sys.rhs[0].eval(&env).unwrap(), 7.0);
        assert_eq!(sys.rhs[1].eval(&env).unwrap(), 2.0 * 2.0f64.powi(3));
    }

    #[test]
    fn reduce_third_order_chain() {
        let (p, _) = Registry::get("ode3-power", &Params::new()).unwrap();
        let sys = reduce_to_system(&p);
        assert_eq!(sys.kind, Kind::System(3));
        let mut env = Params::new();
        env.insert("x".into(), 0.0);
        env.insert("y1".into(), 2.0);
        env.insert("y2".into(), 3.0);
        env.insert("y3".into(), 4.0);
        assert_eq!(sys.rhs[0].eval(&env).unwrap(), 3.0);
        assert_eq!(sys.rhs[1].eval(&env).unwrap(), 4.0);
        assert_eq!(sys.rhs[2].eval(&env).unwrap(), 6.0 * 16.0);
    }

    #[test]
    fn first_order_reduction_is_identity() {
        let (p, _) = Registry::get("power1", &Params::new()).unwrap();
        let sys = reduce_to_system(&p);
        assert_eq!(sys.kind, Kind::FirstOrder);
    }

    #[test]
    fn registry_residuals() {
        for name in Registry::names() {
            let (p, exact) = Registry::get(name, &Params::new()).unwrap();
            if let Some(exact) = exact {
                let worst = exact_residual(&p, &exact, 50).unwrap();
                assert!(worst < 1e-8, "{name}: residual {worst}");
            }
        }
    }

    #[test]
    fn power1_sweep_x_star_and_monotone_growth() {
        for a in [0.5, 1.0, 2.0] {
            for b in [0.5, 1.0, 2.0] {
                for g in [1.5, 2.0, 3.0] {
                    let ov = overrides(&[("a", a), ("b", b), ("gamma", g)]);
                    let (_, exact) = Registry::get("power1", &ov).unwrap();
                    let exact = exact.unwrap();
                    let xs = exact.x_star.unwrap();
                    let expected = 1.0 / (a.powf(g - 1.0) * b * (g - 1.0));
                    assert!((xs - expected).abs() <= 1e-12 * expected);
                    // |y| increases monotonically approaching x_star.
                    let mut prev = 0.0;
                    for k in 2..=6 {
                        let x = xs - 10f64.powi(-k);
                        if x <= 0.0 {
                            continue;
                        }
                        let y = exact.primary_at(x).unwrap().abs();
                        assert!(y > prev, "a={a} b={b} g={g} k={k}");
                        prev = y;
                    }
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let doc = r#"{
            "kind": "first-order",
            "rhs": ["b*y^2"],
            "x0": 0.0,
            "initial": [1.0],
            "params": {"b": 1.0}
        }"#;
        let p = Problem::from_json(doc).unwrap();
        assert_eq!(p.kind, Kind::FirstOrder);
        assert_eq!(p.initial, vec![1.0]);

        let bad = r#"{"kind": "first-order", "rhs": ["y*z"], "x0": 0, "initial": [1.0]}"#;
        assert!(matches!(
            Problem::from_json(bad),
            Err(ProblemError::DisallowedVar(_))
        ));
    }
}
