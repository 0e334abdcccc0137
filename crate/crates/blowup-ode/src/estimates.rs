//! Blow-up existence criteria, critical-value quadrature and brackets,
//! dominant-balance exponent detection for systems, and the 1/beta control
//! diagnostic computed on parametric solutions.

use serde::Serialize;
use thiserror::Error;

use crate::expr::{Expr, Params};
use crate::problems::{Kind, Problem};
use crate::transforms::ParametricSolution;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("f(y) must stay positive on [a, inf); found f({y}) = {value}")]
    NonPositive { y: f64, value: f64 },
    #[error("non-finite value f({y}) = {value} during sampling")]
    NonFiniteSample { y: f64, value: f64 },
    #[error("requires a > 0 for the geometric sample ladder (got {0})")]
    BadBasePoint(f64),
    #[error("minorant violated at x={x}, y={y}: f={f} < g={g}")]
    MinorantViolated { x: f64, y: f64, f: f64, g: f64 },
    #[error("integral I1 diverges: no blow-up certificate")]
    DivergentI1,
    #[error("right-hand side is not a signed sum of monomials in y1..yn")]
    NotPolynomial,
    #[error("exponent balance has no solution (no power-law blow-up)")]
    SingularBalance,
    #[error("exponent balance is ambiguous (multiple consistent solutions)")]
    AmbiguousBalance,
    #[error("parametric solution too short ({0} nodes, need at least {1})")]
    TooFewNodes(usize, usize),
    #[error("y'_xi vanishes at interior node {0}")]
    ZeroSlope(usize),
    #[error("tail too short: y spans {0:.2} decades, need at least 2")]
    TailTooShort(f64),
    #[error("expression error: {0}")]
    Expr(#[from] crate::expr::EvalError),
}

/// Absolute quadrature tolerance; `BLOWUP_ODE_TOL` overrides it.
pub fn quad_tolerance() -> f64 {
    std::env::var("BLOWUP_ODE_TOL")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-10)
}

// ---------------------------------------------------------------------------
// Quadrature: adaptive Simpson plus dyadic tail handling for [a, inf).
// ---------------------------------------------------------------------------

fn simpson_slice(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson_slice(a, m, fa, flm, fm);
    let right = simpson_slice(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adaptive_simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson on a finite interval, absolute tolerance `tol`, depth cap 40.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fm = f(0.5 * (a + b));
    let fb = f(b);
    let whole = simpson_slice(a, b, fa, fm, fb);
    adaptive_simpson_rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Result of an improper integral over `[a, inf)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Improper {
    Finite(f64),
    Divergent,
}

/// `∫_a^∞ dy / f(y)` over dyadic tail segments `[a + 2^j - 1, a + 2^(j+1) - 1]`.
///
/// Convergent integrands produce geometrically decaying segment sums; the
/// ratio test on those sums declares divergence (constant or growing tails).
pub fn improper_integral_inv(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    tol: f64,
) -> Result<Improper, EstimateError> {
    let bad = std::cell::Cell::new(None::<(f64, f64)>);
    let integrand = |y: f64| {
        let v = f(y);
        if v <= 0.0 || !v.is_finite() {
            // Record the first offender; (1/inf -> 0 keeps exp-type tails quiet).
            if v <= 0.0 || v.is_nan() {
                if bad.get().is_none() {
                    bad.set(Some((y, v)));
                }
            }
            if v.is_infinite() && v > 0.0 {
                return 0.0;
            }
            return f64::NAN;
        }
        1.0 / v
    };

    let mut total = 0.0;
    let mut prev_segment: Option<f64> = None;
    let mut flat_streak = 0u32;
    let mut quiet_streak = 0u32;
    const MAX_SEGMENTS: u32 = 400;
    for j in 0..MAX_SEGMENTS {
        let lo = a + (2f64.powi(j as i32) - 1.0);
        let hi = a + (2f64.powi(j as i32 + 1) - 1.0);
        let seg = adaptive_simpson(&integrand, lo, hi, tol / 4.0);
        if let Some((y, value)) = bad.get() {
            if value <= 0.0 && value.is_finite() {
                return Err(EstimateError::NonPositive { y, value });
            }
            return Err(EstimateError::NonFiniteSample { y, value });
        }
        if !seg.is_finite() {
            return Ok(Improper::Divergent);
        }
        total += seg;
        if let Some(prev) = prev_segment {
            if prev > 0.0 && seg >= 0.95 * prev && j >= 4 {
                flat_streak += 1;
                if flat_streak >= 3 {
                    return Ok(Improper::Divergent);
                }
            } else {
                flat_streak = 0;
            }
            // Converged: two consecutive negligible segments, then add the
            // geometric remainder estimate.
            if seg < tol.max(1e-300) {
                quiet_streak += 1;
                if quiet_streak >= 2 {
                    let r = if prev > 0.0 { (seg / prev).min(0.9) } else { 0.0 };
                    total += seg * r / (1.0 - r);
                    return Ok(Improper::Finite(total));
                }
            } else {
                quiet_streak = 0;
            }
        }
        prev_segment = Some(seg);
    }
    // Never settled: treat as divergent rather than report a bogus value.
    Ok(Improper::Divergent)
}

fn bind_autonomous(f: &Expr, params: &Params) -> Result<crate::expr::BoundExpr, EstimateError> {
    Ok(f.bind(&["y"], params)?)
}

// ---------------------------------------------------------------------------
// Criteria and critical values for autonomous first-order problems.
// ---------------------------------------------------------------------------

/// Necessary criterion: `f(y)/y -> inf` on the geometric ladder `y = a*10^j`.
///
/// The ratio must increase strictly; unbounded growth is accepted either when
/// the final ratio dwarfs the initial one or when the increments refuse to die
/// out (logarithmic growth raises the ratio by a constant per decade).
pub fn criterion_necessary(f: &Expr, params: &Params, a: f64) -> Result<bool, EstimateError> {
    if a <= 0.0 {
        return Err(EstimateError::BadBasePoint(a));
    }
    let bf = bind_autonomous(f, params)?;
    let mut ratios = Vec::with_capacity(9);
    for j in 0..=8 {
        let y = a * 10f64.powi(j);
        let v = bf.eval(&[y]);
        if v.is_nan() {
            return Err(EstimateError::NonFiniteSample { y, value: v });
        }
        if v.is_infinite() {
            // f overflowed while growing: the ratio is certainly unbounded.
            return Ok(ratios.windows(2).all(|w| w[1] > w[0]));
        }
        ratios.push(v / y);
    }
    let increasing = ratios.windows(2).all(|w| w[1] > w[0]);
    if !increasing {
        return Ok(false);
    }
    let big_growth = ratios[8] >= 1e3 * ratios[0];
    let early_inc = ratios[2] - ratios[1];
    let late_inc = ratios[8] - ratios[7];
    let sustained = early_inc > 0.0 && late_inc >= 0.25 * early_inc;
    Ok(big_growth || sustained)
}

/// Sufficient criterion: `f(y)/y^(1+kappa)` approaches a positive (possibly
/// infinite) limit on the sample ladder.
pub fn criterion_sufficient(
    f: &Expr,
    params: &Params,
    a: f64,
    kappa: f64,
) -> Result<bool, EstimateError> {
    if a <= 0.0 {
        return Err(EstimateError::BadBasePoint(a));
    }
    assert!(kappa > 0.0, "kappa must be positive");
    let bf = bind_autonomous(f, params)?;
    let mut rhos = Vec::with_capacity(9);
    for j in 0..=8 {
        let y = a * 10f64.powi(j);
        let v = bf.eval(&[y]);
        if v.is_nan() {
            return Err(EstimateError::NonFiniteSample { y, value: v });
        }
        let rho = v / y.powf(1.0 + kappa);
        if rho.is_infinite() && rho > 0.0 {
            // Limit s = inf is allowed.
            return Ok(true);
        }
        rhos.push(rho);
    }
    let tail = &rhos[6..];
    if tail.iter().any(|&r| r <= 0.0) {
        return Ok(false);
    }
    // Not decaying to zero: the last sample holds at least half of an earlier one.
    Ok(rhos[8] >= 0.5 * rhos[6])
}

/// Critical value of an autonomous blow-up problem:
/// `x_* = ∫_a^∞ dy / f(y)`; `None` when the integral diverges (no blow-up).
pub fn x_star_autonomous(
    f: &Expr,
    params: &Params,
    a: f64,
) -> Result<Option<f64>, EstimateError> {
    let bf = bind_autonomous(f, params)?;
    match improper_integral_inv(&|y| bf.eval(&[y]), a, quad_tolerance())? {
        Improper::Finite(v) => Ok(Some(v)),
        Improper::Divergent => Ok(None),
    }
}

/// One-sided bound `x_* <= I_g` from a minorant `f(x,y) >= g(y) > 0`.
///
/// The minorant property is spot-checked on a 20x20 grid over
/// `[0, I_g] x [a, a*10^6]` (certificate by sampling, not proof).
pub fn one_sided_bound(
    f: &Expr,
    g_minorant: &Expr,
    params: &Params,
    a: f64,
) -> Result<f64, EstimateError> {
    let bg = bind_autonomous(g_minorant, params)?;
    let ig = match improper_integral_inv(&|y| bg.eval(&[y]), a, quad_tolerance())? {
        Improper::Finite(v) => v,
        Improper::Divergent => return Err(EstimateError::DivergentI1),
    };
    let bf = f.bind(&["x", "y"], params)?;
    for i in 0..20 {
        let x = ig * i as f64 / 19.0;
        for j in 0..20 {
            let y = a * 10f64.powf(6.0 * j as f64 / 19.0);
            let fv = bf.eval(&[x, y]);
            let gv = bg.eval(&[y]);
            if !(fv >= gv) {
                return Err(EstimateError::MinorantViolated { x, y, f: fv, g: gv });
            }
        }
    }
    Ok(ig)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundsCase {
    FxNonNegative,
    FxNonPositive,
    OneSidedOnly,
}

/// Critical-value brackets from freezing the x-dependence of `f` at `0` and `I1`.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub i_g: Option<f64>,
    pub i1: Option<f64>,
    pub i2: Option<f64>,
    pub bracket: Option<(f64, f64)>,
    pub case: BoundsCase,
}

/// Two-sided estimate `I2 <= x_* <= I1` (f_x >= 0) or `I1 <= x_* <= I2`
/// (f_x <= 0), where `I1 = ∫ dξ/f(0,ξ)` and `I2 = ∫ dξ/f(I1,ξ)`.
///
/// The sign of `f_x` is sampled (400 points) on `[0, I1] x [a, a*10^6]`;
/// a mixed sign yields `OneSidedOnly` with no bracket.
pub fn two_sided_bound(f: &Expr, params: &Params, a: f64) -> Result<BoundsReport, EstimateError> {
    let bf = f.bind(&["x", "y"], params)?;
    let tol = quad_tolerance();
    let bf1 = bf.clone();
    let i1 = match improper_integral_inv(&|y| bf1.eval(&[0.0, y]), a, tol)? {
        Improper::Finite(v) => v,
        Improper::Divergent => return Err(EstimateError::DivergentI1),
    };

    // Sign of f_x by AD sampling.
    let mut nonneg = true;
    let mut nonpos = true;
    let sign_tol = 1e-12;
    for i in 0..20 {
        let x = i1 * i as f64 / 19.0;
        for j in 0..20 {
            let y = a * 10f64.powf(6.0 * j as f64 / 19.0);
            let mut grad = [0.0f64; 2];
            let _ = bf.eval_grad(&[x, y], &mut grad);
            let fx = grad[0];
            if fx < -sign_tol {
                nonneg = false;
            }
            if fx > sign_tol {
                nonpos = false;
            }
        }
    }

    if !nonneg && !nonpos {
        return Ok(BoundsReport {
            i_g: None,
            i1: Some(i1),
            i2: None,
            bracket: None,
            case: BoundsCase::OneSidedOnly,
        });
    }

    let bf2 = bf.clone();
    let i2 = match improper_integral_inv(&|y| bf2.eval(&[i1, y]), a, tol)? {
        Improper::Finite(v) => v,
        Improper::Divergent => return Err(EstimateError::DivergentI1),
    };
    let (bracket, case) = if nonneg {
        ((i2, i1), BoundsCase::FxNonNegative)
    } else {
        ((i1, i2), BoundsCase::FxNonPositive)
    };
    Ok(BoundsReport {
        i_g: None,
        i1: Some(i1),
        i2: Some(i2),
        bracket: Some(bracket),
        case,
    })
}

/// First integral of `y'' = f(y)`, `y(0)=a`, `y'(0)=b`:
/// `F(y) = sqrt(2*∫_a^y f(z) dz + b^2)`, so `x_* = ∫_a^∞ dy/F(y)`.
pub struct SecondOrderGrowth {
    f: crate::expr::BoundExpr,
    a: f64,
    b2: f64,
}

impl SecondOrderGrowth {
    pub fn value(&self, y: f64) -> f64 {
        let inner = adaptive_simpson(&|z| self.f.eval(&[z]), self.a, y, 1e-12);
        (2.0 * inner + self.b2).sqrt()
    }

    /// Critical value of the reduced problem, `None` when it diverges.
    pub fn x_star(&self) -> Result<Option<f64>, EstimateError> {
        match improper_integral_inv(&|y| self.value(y), self.a, quad_tolerance().max(1e-9))? {
            Improper::Finite(v) => Ok(Some(v)),
            Improper::Divergent => Ok(None),
        }
    }
}

/// Reduce the autonomous second-order problem to first order via its first
/// integral. Requires `f(y) > 0` for `y >= a`, `a > 0`, `b >= 0`.
pub fn reduce_autonomous_second_order(
    f: &Expr,
    params: &Params,
    a: f64,
    b: f64,
) -> Result<SecondOrderGrowth, EstimateError> {
    assert!(b >= 0.0, "b must be nonnegative");
    let bf = bind_autonomous(f, params)?;
    Ok(SecondOrderGrowth {
        f: bf,
        a,
        b2: b * b,
    })
}

// ---------------------------------------------------------------------------
// Dominant-balance exponents for polynomial systems.
// ---------------------------------------------------------------------------

/// Exponents of the blow-up ansatz `y_m = alpha_m (x_* - x)^(-beta_m)`.
#[derive(Debug, Clone, Serialize)]
pub struct ExponentReport {
    pub betas: Vec<f64>,
    /// 1-based index k of the fastest-growing component (`beta_k` maximal).
    pub growing_index: usize,
    /// The amplitudes are never solved for.
    pub alphas: Option<Vec<f64>>,
}

fn solve_linear(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap()
        })?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let factor = m[row][col] / m[col][col];
                for k in col..n {
                    m[row][k] -= factor * m[col][k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    Some((0..n).map(|i| b[i] / m[i][i]).collect())
}

/// Solve the exponent-balance system for a polynomial ODE system: for each
/// equation, `beta_m + 1 = sum_j d_mj beta_j` on the dominant monomial.
///
/// Every combination of candidate monomials is tried; a solution is accepted
/// only when each chosen monomial actually dominates its equation at the
/// solved exponents.
pub fn exponent_solve(p: &Problem) -> Result<ExponentReport, EstimateError> {
    let sys = match p.kind {
        Kind::System(_) => p.clone(),
        Kind::FirstOrder => {
            let rhs = p.rhs[0].rename_vars(&[("y", "y1")]);
            Problem {
                kind: Kind::System(1),
                rhs: vec![rhs],
                x0: p.x0,
                initial: p.initial.clone(),
                params: p.params.clone(),
            }
        }
        _ => crate::problems::reduce_to_system(p),
    };
    let n = match sys.kind {
        Kind::System(n) => n,
        _ => unreachable!(),
    };
    let var_names: Vec<String> = (1..=n).map(|i| format!("y{i}")).collect();
    let vars: Vec<&str> = var_names.iter().map(String::as_str).collect();
    let monos: Vec<Vec<Vec<f64>>> = sys
        .rhs
        .iter()
        .map(|e| e.monomials(&vars, &sys.params).ok_or(EstimateError::NotPolynomial))
        .collect::<Result<_, _>>()?;

    let combos: usize = monos.iter().map(Vec::len).product();
    if combos == 0 || combos > 4096 {
        return Err(EstimateError::NotPolynomial);
    }

    let mut solutions: Vec<Vec<f64>> = Vec::new();
    let mut any_solution = false;
    for idx in 0..combos {
        let mut rem = idx;
        let mut choice = Vec::with_capacity(n);
        for m in monos.iter() {
            choice.push(rem % m.len());
            rem /= m.len();
        }
        // Row m: (d_m - e_m) . beta = 1
        let mut mat = vec![vec![0.0f64; n]; n];
        let rhs = vec![1.0f64; n];
        for m in 0..n {
            for j in 0..n {
                mat[m][j] = monos[m][choice[m]][j];
            }
            mat[m][m] -= 1.0;
        }
        let Some(beta) = solve_linear(mat, rhs) else {
            continue;
        };
        any_solution = true;
        // Chosen monomial must dominate its equation at the solved exponents.
        let dominant = (0..n).all(|m| {
            let chosen: f64 = monos[m][choice[m]]
                .iter()
                .zip(&beta)
                .map(|(d, b)| d * b)
                .sum();
            monos[m].iter().all(|alt| {
                let v: f64 = alt.iter().zip(&beta).map(|(d, b)| d * b).sum();
                chosen >= v - 1e-9
            })
        });
        if dominant && !solutions.iter().any(|s| approx_eq_vec(s, &beta)) {
            solutions.push(beta);
        }
    }

    match solutions.len() {
        0 => {
            if any_solution {
                Err(EstimateError::AmbiguousBalance)
            } else {
                Err(EstimateError::SingularBalance)
            }
        }
        1 => {
            let betas = solutions.pop().unwrap();
            let growing_index = betas
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i + 1)
                .unwrap();
            Ok(ExponentReport {
                betas,
                growing_index,
                alphas: None,
            })
        }
        _ => Err(EstimateError::AmbiguousBalance),
    }
}

fn approx_eq_vec(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
}

// ---------------------------------------------------------------------------
// Diagnostics on parametric solutions.
// ---------------------------------------------------------------------------

/// Per-node series of `1/beta` estimates from grid differences:
/// `1/beta = (y/y'_xi) * (y''_xi/y'_xi - x''_xi/x'_xi) - 1`.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticSeries {
    pub xi: Vec<f64>,
    pub inv_beta: Vec<f64>,
}

impl DiagnosticSeries {
    /// Median of the last quarter of interior estimates; the run's headline
    /// `1/beta` value.
    pub fn tail_estimate(&self) -> Option<f64> {
        let n = self.inv_beta.len();
        if n < 5 {
            return None;
        }
        let interior = &self.inv_beta[1..n - 1];
        let start = interior.len() - (interior.len() / 4).max(3).min(interior.len());
        let mut tail: Vec<f64> = interior[start..].to_vec();
        tail.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(tail[tail.len() / 2])
    }
}

/// Central second/first differences on the uniform xi grid (one-sided at the
/// endpoints).
pub fn beta_diagnostic(ps: &ParametricSolution) -> Result<DiagnosticSeries, EstimateError> {
    let n = ps.len();
    if n < 5 {
        return Err(EstimateError::TooFewNodes(n, 5));
    }
    let h = ps.xi[1] - ps.xi[0];
    let d1 = |v: &[f64], i: usize| -> f64 {
        if i == 0 {
            (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
        } else if i == n - 1 {
            (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h)
        } else {
            (v[i + 1] - v[i - 1]) / (2.0 * h)
        }
    };
    let d2 = |v: &[f64], i: usize| -> f64 {
        if i == 0 {
            (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / (h * h)
        } else if i == n - 1 {
            (2.0 * v[n - 1] - 5.0 * v[n - 2] + 4.0 * v[n - 3] - v[n - 4]) / (h * h)
        } else {
            (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (h * h)
        }
    };
    let mut inv_beta = Vec::with_capacity(n);
    for i in 0..n {
        let yp = d1(&ps.y, i);
        if yp == 0.0 && i > 0 && i < n - 1 {
            return Err(EstimateError::ZeroSlope(i));
        }
        let xp = d1(&ps.x, i);
        let val = (ps.y[i] / yp) * (d2(&ps.y, i) / yp - d2(&ps.x, i) / xp) - 1.0;
        inv_beta.push(val);
    }
    Ok(DiagnosticSeries {
        xi: ps.xi.clone(),
        inv_beta,
    })
}

/// Least-squares fit of the power-singularity model `y ~ A (x_* - x)^(-beta)`
/// on the solution tail, with `x_*` refined by 1-D minimization.
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticFit {
    pub a: f64,
    pub beta: f64,
    pub x_star: f64,
    pub residual: f64,
}

pub fn asymptotic_fit(ps: &ParametricSolution) -> Result<AsymptoticFit, EstimateError> {
    let n = ps.len();
    if n < 8 {
        return Err(EstimateError::TooFewNodes(n, 8));
    }
    let y_end = *ps.y.last().unwrap();
    let y_first = ps.y[0];
    let decades = (y_end / y_first).abs().log10();
    if !(decades >= 1.995) {
        return Err(EstimateError::TailTooShort(decades));
    }
    // Tail: the last two decades of growth.
    let cut = y_end.abs() / 100.0;
    let start = ps.y.iter().position(|&v| v.abs() >= cut).unwrap_or(0);
    let xs_tail = &ps.x[start..];
    let ys_tail = &ps.y[start..];
    if xs_tail.len() < 6 {
        return Err(EstimateError::TooFewNodes(xs_tail.len(), 6));
    }

    let x_last = *xs_tail.last().unwrap();
    let span = (x_last - xs_tail[0]).max(1e-12);
    let lny: Vec<f64> = ys_tail.iter().map(|v| v.abs().ln()).collect();

    // Linear LS of ln y on -ln(xs - x) for a candidate x_* = xs.
    let fit_at = |xs: f64| -> (f64, f64, f64) {
        let p: Vec<f64> = xs_tail.iter().map(|&x| -((xs - x).ln())).collect();
        let m = p.len() as f64;
        let sp: f64 = p.iter().sum();
        let sy: f64 = lny.iter().sum();
        let spp: f64 = p.iter().map(|v| v * v).sum();
        let spy: f64 = p.iter().zip(&lny).map(|(a, b)| a * b).sum();
        let denom = m * spp - sp * sp;
        let beta = (m * spy - sp * sy) / denom;
        let ln_a = (sy - beta * sp) / m;
        let res = p
            .iter()
            .zip(&lny)
            .map(|(pi, yi)| {
                let e = yi - (ln_a + beta * pi);
                e * e
            })
            .sum::<f64>()
            / m;
        (ln_a, beta, res)
    };

    // Golden-section on delta = x_* - x_last over a log-spaced bracket.
    let lo = (1e-14 * span.max(1.0)).ln();
    let hi = (10.0 * span).ln();
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a_, mut b_) = (lo, hi);
    let mut c_ = b_ - phi * (b_ - a_);
    let mut d_ = a_ + phi * (b_ - a_);
    let mut fc = fit_at(x_last + c_.exp()).2;
    let mut fd = fit_at(x_last + d_.exp()).2;
    for _ in 0..200 {
        if fc < fd {
            b_ = d_;
            d_ = c_;
            fd = fc;
            c_ = b_ - phi * (b_ - a_);
            fc = fit_at(x_last + c_.exp()).2;
        } else {
            a_ = c_;
            c_ = d_;
            fc = fd;
            d_ = a_ + phi * (b_ - a_);
            fd = fit_at(x_last + d_.exp()).2;
        }
    }
    let delta = (0.5 * (a_ + b_)).exp();
    let x_star = x_last + delta;
    let (ln_a, beta, residual) = fit_at(x_star);
    Ok(AsymptoticFit {
        a: ln_a.exp(),
        beta,
        x_star,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Registry;

    fn e(src: &str) -> Expr {
        Expr::parse(src).unwrap()
    }

    fn no_params() -> Params {
        Params::new()
    }

    #[test]
    fn necessary_criterion() {
        assert!(criterion_necessary(&e("y^2"), &no_params(), 1.0).unwrap());
        assert!(!criterion_necessary(&e("y"), &no_params(), 1.0).unwrap());
        // Logarithmic growth of the ratio still diverges.
        assert!(criterion_necessary(&e("y*ln(y+1)"), &no_params(), 1.0).unwrap());
        // Ratio converging to a constant is rejected.
        assert!(!criterion_necessary(&e("y*(2 - 1/(y+1))"), &no_params(), 1.0).unwrap());
    }

    #[test]
    fn sufficient_criterion() {
        assert!(criterion_sufficient(&e("y^2"), &no_params(), 1.0, 1.0).unwrap());
        assert!(!criterion_sufficient(&e("y^2"), &no_params(), 1.0, 2.0).unwrap());
        assert!(criterion_sufficient(&e("exp(y)"), &no_params(), 1.0, 1.0).unwrap());
    }

    #[test]
    fn x_star_quadrature() {
        let v = x_star_autonomous(&e("y^2"), &no_params(), 1.0).unwrap().unwrap();
        assert!((v - 1.0).abs() < 1e-9, "got {v}");
        let v = x_star_autonomous(&e("y^3"), &no_params(), 1.0).unwrap().unwrap();
        assert!((v - 0.5).abs() < 1e-9, "got {v}");
        let v = x_star_autonomous(&e("exp(y)"), &no_params(), 0.0).unwrap().unwrap();
        assert!((v - 1.0).abs() < 1e-9, "got {v}");
        // Linear growth: no blow-up.
        assert_eq!(x_star_autonomous(&e("y"), &no_params(), 1.0).unwrap(), None);
    }

    #[test]
    fn x_star_quadrature_power_sweep() {
        for a in [0.5, 1.0, 2.0] {
            for b in [0.5, 1.0, 2.0] {
                for g in [1.5, 2.0, 3.0] {
                    let mut params = Params::new();
                    params.insert("b".into(), b);
                    params.insert("gamma".into(), g);
                    let v = x_star_autonomous(&e("b*y^gamma"), &params, a)
                        .unwrap()
                        .unwrap();
                    let expected = 1.0 / (a.powf(g - 1.0) * b * (g - 1.0));
                    assert!(
                        (v - expected).abs() <= 1e-8 * expected,
                        "a={a} b={b} g={g}: {v} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn one_sided_abel() {
        let bound = one_sided_bound(&e("y^3 + x^2"), &e("y^3"), &no_params(), 1.0).unwrap();
        assert!((bound - 0.5).abs() < 1e-9);
        // Tight when the minorant equals f.
        let bound = one_sided_bound(&e("y^2"), &e("y^2"), &no_params(), 1.0).unwrap();
        assert!((bound - 1.0).abs() < 1e-9);
        // y^4 is not a minorant of y^2 for y > 1.
        let err = one_sided_bound(&e("y^2"), &e("y^4"), &no_params(), 1.0);
        assert!(matches!(err, Err(EstimateError::MinorantViolated { .. })));
    }

    #[test]
    fn two_sided_riccati() {
        let mut params = Params::new();
        params.insert("m".into(), 2.0);
        let r = two_sided_bound(&e("y^2 + x^m"), &params, 1.0).unwrap();
        assert_eq!(r.case, BoundsCase::FxNonNegative);
        let (lo, hi) = r.bracket.unwrap();
        assert!((hi - 1.0).abs() < 1e-8);
        assert!((lo - std::f64::consts::FRAC_PI_4).abs() < 1e-8);
        // Same bracket for any positive power m.
        params.insert("m".into(), 5.0);
        let r5 = two_sided_bound(&e("y^2 + x^m"), &params, 1.0).unwrap();
        let (lo5, hi5) = r5.bracket.unwrap();
        assert!((lo5 - lo).abs() < 1e-8 && (hi5 - hi).abs() < 1e-8);
    }

    #[test]
    fn two_sided_decreasing() {
        let r = two_sided_bound(&e("(2-x)*y^2"), &no_params(), 1.0).unwrap();
        assert_eq!(r.case, BoundsCase::FxNonPositive);
        let (lo, hi) = r.bracket.unwrap();
        assert!((lo - 0.5).abs() < 1e-8, "lo {lo}");
        assert!((hi - 2.0 / 3.0).abs() < 1e-8, "hi {hi}");
        let xs = 2.0 - 2f64.sqrt();
        assert!(lo <= xs && xs <= hi);
    }

    #[test]
    fn two_sided_degenerate_for_autonomous() {
        let r = two_sided_bound(&e("y^2"), &no_params(), 1.0).unwrap();
        let (lo, hi) = r.bracket.unwrap();
        assert!((lo - 1.0).abs() < 1e-8 && (hi - 1.0).abs() < 1e-8);
    }

    #[test]
    fn second_order_reduction() {
        // f = 2y^3, a = b = 1: F(y) = y^2, x_* = 1.
        let g = reduce_autonomous_second_order(&e("2*y^3"), &no_params(), 1.0, 1.0).unwrap();
        assert!((g.value(2.0) - 4.0).abs() < 1e-8);
        let xs = g.x_star().unwrap().unwrap();
        assert!((xs - 1.0).abs() < 1e-6, "x_* {xs}");

        // f = exp(2y), a = 0, b = 1: F(y) = exp(y), x_* = 1.
        let g = reduce_autonomous_second_order(&e("exp(2*y)"), &no_params(), 0.0, 1.0).unwrap();
        assert!((g.value(1.0) - 1f64.exp()).abs() < 1e-7);
        let xs = g.x_star().unwrap().unwrap();
        assert!((xs - 1.0).abs() < 1e-6, "x_* {xs}");
    }

    #[test]
    fn exponents_system3() {
        let (p, _) = Registry::get("system3", &Params::new()).unwrap();
        let r = exponent_solve(&p).unwrap();
        assert!((r.betas[0] + 1.0).abs() < 1e-12);
        assert!((r.betas[1] - 1.0).abs() < 1e-12);
        assert!((r.betas[2] + 2.0).abs() < 1e-12);
        assert_eq!(r.growing_index, 2);
        assert!(r.alphas.is_none());
    }

    #[test]
    fn exponents_scalar() {
        let (p, _) = Registry::get("power1", &Params::new()).unwrap();
        let r = exponent_solve(&p).unwrap();
        assert!((r.betas[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exponents_linear_is_singular() {
        let p = Problem::new(
            Kind::FirstOrder,
            vec![e("y")],
            0.0,
            vec![1.0],
            Params::new(),
        )
        .unwrap();
        assert!(matches!(
            exponent_solve(&p),
            Err(EstimateError::SingularBalance)
        ));
    }

    #[test]
    fn exponents_diagonal_system() {
        let p = Problem::new(
            Kind::System(3),
            vec![e("y1^2"), e("y2^3"), e("y3^1.5")],
            0.0,
            vec![1.0, 1.0, 1.0],
            Params::new(),
        )
        .unwrap();
        let r = exponent_solve(&p).unwrap();
        assert!((r.betas[0] - 1.0).abs() < 1e-9);
        assert!((r.betas[1] - 0.5).abs() < 1e-9);
        assert!((r.betas[2] - 2.0).abs() < 1e-9);
        assert_eq!(r.growing_index, 3);
    }
}
