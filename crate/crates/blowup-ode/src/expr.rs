//! Textual right-hand sides like `y^2/(b-x)` parsed into evaluable expression
//! trees with exact first partial derivatives via forward-mode dual numbers.
//!
//! Grammar (EBNF):
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := ['-'] power
//! power  := atom ['^' factor]
//! atom   := number | ident | func '(' expr ')' | '(' expr ')'
//! ```
//! Identifiers are `[a-zA-Z_][a-zA-Z0-9_]*`; `^` is right-associative with a
//! real exponent. Non-finite results (poles, fractional powers of negative
//! numbers) are returned as IEEE values, never masked.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Named scalar parameters bound at evaluation time (never baked into the ast).
pub type Params = BTreeMap<String, f64>;

/// Maximum number of simultaneously seeded variables in a dual evaluation.
pub const MAX_PARTIALS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Sin,
    Cos,
    Tan,
    Arctan,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "arctan" => Func::Arctan,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Arctan => "arctan",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(u32),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Call(Func, Box<Node>),
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("unknown function `{name}` at byte {offset}")]
    UnknownFunction { name: String, offset: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("missing binding for variable `{0}`")]
    MissingVar(String),
    #[error("unknown seed variable `{0}`")]
    UnknownSeed(String),
    #[error("too many seed variables: {0} (max {MAX_PARTIALS})")]
    TooManySeeds(usize),
}

/// A parsed scalar expression over named variables.
///
/// Immutable after parse; safe to evaluate concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    ast: Node,
    idents: Vec<String>,
}

/// Value plus exact forward-mode partial derivatives for the seeded variables.
#[derive(Debug, Clone, PartialEq)]
pub struct DualValue {
    pub value: f64,
    pub partials: BTreeMap<String, f64>,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ParseError> {
        Parser::new(src).run()
    }

    /// Constant expression (no variables).
    pub fn constant(v: f64) -> Expr {
        Expr {
            ast: Node::Num(v),
            idents: Vec::new(),
        }
    }

    /// All identifiers in first-appearance order (variables and parameters alike).
    pub fn idents(&self) -> &[String] {
        &self.idents
    }

    /// Identifiers that are not bound by `params` — the true variables.
    pub fn free_vars(&self, params: &Params) -> Vec<String> {
        self.idents
            .iter()
            .filter(|n| !params.contains_key(*n))
            .cloned()
            .collect()
    }

    /// Evaluate with every identifier bound by `env`.
    pub fn eval(&self, env: &Params) -> Result<f64, EvalError> {
        let binds = self.resolve_all(env)?;
        Ok(eval_node(&self.ast, &binds))
    }

    /// Evaluate and differentiate with respect to the `seeds` variables.
    pub fn eval_with_partials(&self, env: &Params, seeds: &[&str]) -> Result<DualValue, EvalError> {
        if seeds.len() > MAX_PARTIALS {
            return Err(EvalError::TooManySeeds(seeds.len()));
        }
        for s in seeds {
            if !self.idents.iter().any(|n| n == s) && !env.contains_key(*s) {
                return Err(EvalError::UnknownSeed((*s).to_string()));
            }
        }
        let values = self.resolve_all(env)?;
        let mut duals: Vec<Du> = values.iter().map(|&v| Du::constant(v)).collect();
        for (k, s) in seeds.iter().enumerate() {
            if let Some(i) = self.idents.iter().position(|n| n == s) {
                duals[i].d[k] = 1.0;
            }
        }
        let n = seeds.len();
        let out = eval_dual_node(&self.ast, &duals, n);
        let mut partials = BTreeMap::new();
        for (k, s) in seeds.iter().enumerate() {
            partials.insert((*s).to_string(), out.d[k]);
        }
        Ok(DualValue {
            value: out.v,
            partials,
        })
    }

    /// Compile against a fixed slot order; remaining identifiers must be in `params`.
    pub fn bind(&self, slots: &[&str], params: &Params) -> Result<BoundExpr, EvalError> {
        let mut binds = Vec::with_capacity(self.idents.len());
        for name in &self.idents {
            if let Some(i) = slots.iter().position(|s| s == name) {
                binds.push(Binding::Slot(i));
            } else if let Some(v) = params.get(name) {
                binds.push(Binding::Const(*v));
            } else {
                return Err(EvalError::MissingVar(name.clone()));
            }
        }
        Ok(BoundExpr {
            ast: self.ast.clone(),
            binds,
            arity: slots.len(),
        })
    }

    /// New expression with `name` replaced by `name + delta` everywhere.
    pub fn shift_var(&self, name: &str, delta: f64) -> Expr {
        fn walk(node: &Node, idx: u32, delta: f64) -> Node {
            match node {
                Node::Var(i) if *i == idx => Node::Add(
                    Box::new(Node::Var(idx)),
                    Box::new(Node::Num(delta)),
                ),
                Node::Num(_) | Node::Var(_) => node.clone(),
                Node::Add(a, b) => Node::Add(walk(a, idx, delta).into(), walk(b, idx, delta).into()),
                Node::Sub(a, b) => Node::Sub(walk(a, idx, delta).into(), walk(b, idx, delta).into()),
                Node::Mul(a, b) => Node::Mul(walk(a, idx, delta).into(), walk(b, idx, delta).into()),
                Node::Div(a, b) => Node::Div(walk(a, idx, delta).into(), walk(b, idx, delta).into()),
                Node::Pow(a, b) => Node::Pow(walk(a, idx, delta).into(), walk(b, idx, delta).into()),
                Node::Neg(a) => Node::Neg(walk(a, idx, delta).into()),
                Node::Call(f, a) => Node::Call(*f, walk(a, idx, delta).into()),
            }
        }
        match self.idents.iter().position(|n| n == name) {
            Some(idx) => Expr {
                ast: walk(&self.ast, idx as u32, delta),
                idents: self.idents.clone(),
            },
            None => self.clone(),
        }
    }

    /// New expression with identifiers renamed per `map` (old, new).
    pub fn rename_vars(&self, map: &[(&str, &str)]) -> Expr {
        let idents = self
            .idents
            .iter()
            .map(|n| {
                map.iter()
                    .find(|(old, _)| old == n)
                    .map(|(_, new)| (*new).to_string())
                    .unwrap_or_else(|| n.clone())
            })
            .collect();
        Expr {
            ast: self.ast.clone(),
            idents,
        }
    }

    fn resolve_all(&self, env: &Params) -> Result<Vec<f64>, EvalError> {
        self.idents
            .iter()
            .map(|n| env.get(n).copied().ok_or_else(|| EvalError::MissingVar(n.clone())))
            .collect()
    }

    /// Decompose a signed sum of monomials `c * prod vars[j]^(d_j)` into the
    /// exponent vectors `d` (one per term, coefficients dropped).
    ///
    /// Identifiers must be either listed in `vars` or bound in `params`;
    /// exponents may be arbitrary constant subexpressions over `params`.
    /// Returns `None` when the expression is not of that shape.
    pub fn monomials(&self, vars: &[&str], params: &Params) -> Option<Vec<Vec<f64>>> {
        let var_idx: Vec<Option<usize>> = self
            .idents
            .iter()
            .map(|n| vars.iter().position(|v| v == n))
            .collect();
        let mut values = Vec::with_capacity(self.idents.len());
        for (i, n) in self.idents.iter().enumerate() {
            match (var_idx[i], params.get(n)) {
                (Some(_), _) => values.push(f64::NAN),
                (None, Some(v)) => values.push(*v),
                (None, None) => return None,
            }
        }
        let mut terms = Vec::new();
        collect_terms(&self.ast, &mut terms);
        let mut out = Vec::with_capacity(terms.len());
        for t in terms {
            let mut d = vec![0.0; vars.len()];
            if !accumulate_monomial(t, &var_idx, &values, &mut d, 1.0) {
                return None;
            }
            out.push(d);
        }
        Some(out)
    }
}

fn collect_terms<'a>(node: &'a Node, out: &mut Vec<&'a Node>) {
    match node {
        Node::Add(a, b) | Node::Sub(a, b) => {
            collect_terms(a, out);
            collect_terms(b, out);
        }
        Node::Neg(a) => collect_terms(a, out),
        _ => out.push(node),
    }
}

fn contains_listed_var(node: &Node, var_idx: &[Option<usize>]) -> bool {
    match node {
        Node::Num(_) => false,
        Node::Var(i) => var_idx[*i as usize].is_some(),
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
            contains_listed_var(a, var_idx) || contains_listed_var(b, var_idx)
        }
        Node::Neg(a) | Node::Call(_, a) => contains_listed_var(a, var_idx),
    }
}

fn accumulate_monomial(
    node: &Node,
    var_idx: &[Option<usize>],
    values: &[f64],
    d: &mut [f64],
    power: f64,
) -> bool {
    match node {
        Node::Num(_) => true,
        Node::Var(i) => {
            if let Some(j) = var_idx[*i as usize] {
                d[j] += power;
            }
            true
        }
        Node::Mul(a, b) => {
            accumulate_monomial(a, var_idx, values, d, power)
                && accumulate_monomial(b, var_idx, values, d, power)
        }
        Node::Div(a, b) => {
            accumulate_monomial(a, var_idx, values, d, power)
                && accumulate_monomial(b, var_idx, values, d, -power)
        }
        Node::Neg(a) => accumulate_monomial(a, var_idx, values, d, power),
        Node::Pow(a, b) => {
            if contains_listed_var(b, var_idx) {
                return false;
            }
            let exp = eval_node(b, values);
            if !exp.is_finite() {
                return false;
            }
            accumulate_monomial(a, var_idx, values, d, power * exp)
        }
        // A coefficient factor may be any var-free subexpression.
        Node::Add(..) | Node::Sub(..) | Node::Call(..) => !contains_listed_var(node, var_idx),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.ast, &self.idents, 0)
    }
}

// Precedence levels for the unparser: 0 additive, 1 multiplicative, 2 unary, 3 power.
fn write_node(
    f: &mut fmt::Formatter<'_>,
    node: &Node,
    idents: &[String],
    parent: u8,
) -> fmt::Result {
    let prec = match node {
        Node::Add(..) | Node::Sub(..) => 0,
        Node::Mul(..) | Node::Div(..) => 1,
        Node::Neg(..) => 2,
        Node::Pow(..) => 3,
        Node::Num(v) if *v < 0.0 => 2,
        _ => 4,
    };
    let need_parens = prec < parent;
    if need_parens {
        write!(f, "(")?;
    }
    match node {
        Node::Num(v) => write!(f, "{v}")?,
        Node::Var(i) => write!(f, "{}", idents[*i as usize])?,
        Node::Add(a, b) => {
            write_node(f, a, idents, 0)?;
            write!(f, " + ")?;
            write_node(f, b, idents, 1)?;
        }
        Node::Sub(a, b) => {
            write_node(f, a, idents, 0)?;
            write!(f, " - ")?;
            write_node(f, b, idents, 1)?;
        }
        Node::Mul(a, b) => {
            write_node(f, a, idents, 1)?;
            write!(f, "*")?;
            write_node(f, b, idents, 2)?;
        }
        Node::Div(a, b) => {
            write_node(f, a, idents, 1)?;
            write!(f, "/")?;
            write_node(f, b, idents, 2)?;
        }
        Node::Neg(a) => {
            write!(f, "-")?;
            write_node(f, a, idents, 2)?;
        }
        // Right-associative: print the base at level 4 so (a^b)^c keeps parens.
        Node::Pow(a, b) => {
            write_node(f, a, idents, 4)?;
            write!(f, "^")?;
            write_node(f, b, idents, 2)?;
        }
        Node::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(f, a, idents, 0)?;
            write!(f, ")")?;
        }
    }
    if need_parens {
        write!(f, ")")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Binding {
    Slot(usize),
    Const(f64),
}

/// An expression compiled against a fixed argument layout, for hot loops.
#[derive(Debug, Clone)]
pub struct BoundExpr {
    ast: Node,
    binds: Vec<Binding>,
    arity: usize,
}

impl BoundExpr {
    pub fn arity(&self) -> usize {
        self.arity
    }

    /// Evaluate at `args` (one value per slot, in bind order).
    pub fn eval(&self, args: &[f64]) -> f64 {
        debug_assert!(args.len() >= self.arity);
        eval_bound(&self.ast, &self.binds, args)
    }

    /// Evaluate seeding every slot; `grad[i]` receives the partial for slot `i`.
    pub fn eval_grad(&self, args: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.arity.min(MAX_PARTIALS);
        let out = eval_dual_bound(&self.ast, &self.binds, args, n);
        grad[..n].copy_from_slice(&out.d[..n]);
        out.v
    }
}

fn eval_node(node: &Node, values: &[f64]) -> f64 {
    match node {
        Node::Num(v) => *v,
        Node::Var(i) => values[*i as usize],
        Node::Add(a, b) => eval_node(a, values) + eval_node(b, values),
        Node::Sub(a, b) => eval_node(a, values) - eval_node(b, values),
        Node::Mul(a, b) => eval_node(a, values) * eval_node(b, values),
        Node::Div(a, b) => eval_node(a, values) / eval_node(b, values),
        Node::Pow(a, b) => eval_node(a, values).powf(eval_node(b, values)),
        Node::Neg(a) => -eval_node(a, values),
        Node::Call(f, a) => apply_func(*f, eval_node(a, values)),
    }
}

fn eval_bound(node: &Node, binds: &[Binding], args: &[f64]) -> f64 {
    match node {
        Node::Num(v) => *v,
        Node::Var(i) => match binds[*i as usize] {
            Binding::Slot(s) => args[s],
            Binding::Const(c) => c,
        },
        Node::Add(a, b) => eval_bound(a, binds, args) + eval_bound(b, binds, args),
        Node::Sub(a, b) => eval_bound(a, binds, args) - eval_bound(b, binds, args),
        Node::Mul(a, b) => eval_bound(a, binds, args) * eval_bound(b, binds, args),
        Node::Div(a, b) => eval_bound(a, binds, args) / eval_bound(b, binds, args),
        Node::Pow(a, b) => eval_bound(a, binds, args).powf(eval_bound(b, binds, args)),
        Node::Neg(a) => -eval_bound(a, binds, args),
        Node::Call(f, a) => apply_func(*f, eval_bound(a, binds, args)),
    }
}

fn apply_func(f: Func, x: f64) -> f64 {
    match f {
        Func::Exp => x.exp(),
        Func::Ln => x.ln(),
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Tan => x.tan(),
        Func::Arctan => x.atan(),
        Func::Sqrt => x.sqrt(),
        Func::Abs => x.abs(),
    }
}

/// Plain dual number: value plus up to MAX_PARTIALS tangent slots.
#[derive(Debug, Clone, Copy)]
struct Du {
    v: f64,
    d: [f64; MAX_PARTIALS],
}

impl Du {
    fn constant(v: f64) -> Du {
        Du {
            v,
            d: [0.0; MAX_PARTIALS],
        }
    }

    fn add(self, o: Du, n: usize) -> Du {
        let mut r = Du::constant(self.v + o.v);
        for k in 0..n {
            r.d[k] = self.d[k] + o.d[k];
        }
        r
    }

    fn sub(self, o: Du, n: usize) -> Du {
        let mut r = Du::constant(self.v - o.v);
        for k in 0..n {
            r.d[k] = self.d[k] - o.d[k];
        }
        r
    }

    fn mul(self, o: Du, n: usize) -> Du {
        let mut r = Du::constant(self.v * o.v);
        for k in 0..n {
            r.d[k] = self.d[k] * o.v + self.v * o.d[k];
        }
        r
    }

    fn div(self, o: Du, n: usize) -> Du {
        let mut r = Du::constant(self.v / o.v);
        let inv2 = 1.0 / (o.v * o.v);
        for k in 0..n {
            r.d[k] = (self.d[k] * o.v - self.v * o.d[k]) * inv2;
        }
        r
    }

    fn neg(self, n: usize) -> Du {
        let mut r = Du::constant(-self.v);
        for k in 0..n {
            r.d[k] = -self.d[k];
        }
        r
    }

    fn pow(self, o: Du, n: usize) -> Du {
        let v = self.v.powf(o.v);
        let mut r = Du::constant(v);
        let exp_const = o.d[..n].iter().all(|&d| d == 0.0);
        if exp_const {
            // Power rule only: keeps y^2 differentiable for negative y.
            let coeff = o.v * self.v.powf(o.v - 1.0);
            for k in 0..n {
                r.d[k] = coeff * self.d[k];
            }
        } else {
            let ln_a = self.v.ln();
            let coeff_a = o.v * self.v.powf(o.v - 1.0);
            for k in 0..n {
                r.d[k] = coeff_a * self.d[k] + v * ln_a * o.d[k];
            }
        }
        r
    }

    fn call(self, f: Func, n: usize) -> Du {
        let (v, slope) = match f {
            Func::Exp => {
                let e = self.v.exp();
                (e, e)
            }
            Func::Ln => (self.v.ln(), 1.0 / self.v),
            Func::Sin => (self.v.sin(), self.v.cos()),
            Func::Cos => (self.v.cos(), -self.v.sin()),
            Func::Tan => {
                let t = self.v.tan();
                (t, 1.0 + t * t)
            }
            Func::Arctan => (self.v.atan(), 1.0 / (1.0 + self.v * self.v)),
            Func::Sqrt => {
                let s = self.v.sqrt();
                (s, 0.5 / s)
            }
            // sign(x) with the convention sign(0) = 0.
            Func::Abs => (self.v.abs(), if self.v == 0.0 { 0.0 } else { self.v.signum() }),
        };
        let mut r = Du::constant(v);
        for k in 0..n {
            r.d[k] = slope * self.d[k];
        }
        r
    }
}

fn eval_dual_node(node: &Node, duals: &[Du], n: usize) -> Du {
    match node {
        Node::Num(v) => Du::constant(*v),
        Node::Var(i) => duals[*i as usize],
        Node::Add(a, b) => eval_dual_node(a, duals, n).add(eval_dual_node(b, duals, n), n),
        Node::Sub(a, b) => eval_dual_node(a, duals, n).sub(eval_dual_node(b, duals, n), n),
        Node::Mul(a, b) => eval_dual_node(a, duals, n).mul(eval_dual_node(b, duals, n), n),
        Node::Div(a, b) => eval_dual_node(a, duals, n).div(eval_dual_node(b, duals, n), n),
        Node::Pow(a, b) => eval_dual_node(a, duals, n).pow(eval_dual_node(b, duals, n), n),
        Node::Neg(a) => eval_dual_node(a, duals, n).neg(n),
        Node::Call(f, a) => eval_dual_node(a, duals, n).call(*f, n),
    }
}

fn eval_dual_bound(node: &Node, binds: &[Binding], args: &[f64], n: usize) -> Du {
    match node {
        Node::Num(v) => Du::constant(*v),
        Node::Var(i) => match binds[*i as usize] {
            Binding::Slot(s) => {
                let mut d = Du::constant(args[s]);
                if s < n {
                    d.d[s] = 1.0;
                }
                d
            }
            Binding::Const(c) => Du::constant(c),
        },
        Node::Add(a, b) => {
            eval_dual_bound(a, binds, args, n).add(eval_dual_bound(b, binds, args, n), n)
        }
        Node::Sub(a, b) => {
            eval_dual_bound(a, binds, args, n).sub(eval_dual_bound(b, binds, args, n), n)
        }
        Node::Mul(a, b) => {
            eval_dual_bound(a, binds, args, n).mul(eval_dual_bound(b, binds, args, n), n)
        }
        Node::Div(a, b) => {
            eval_dual_bound(a, binds, args, n).div(eval_dual_bound(b, binds, args, n), n)
        }
        Node::Pow(a, b) => {
            eval_dual_bound(a, binds, args, n).pow(eval_dual_bound(b, binds, args, n), n)
        }
        Node::Neg(a) => eval_dual_bound(a, binds, args, n).neg(n),
        Node::Call(f, a) => eval_dual_bound(a, binds, args, n).call(*f, n),
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    idents: Vec<String>,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Parser<'a> {
        Parser {
            src: src.as_bytes(),
            pos: 0,
            idents: Vec::new(),
        }
    }

    fn run(mut self) -> Result<Expr, ParseError> {
        let ast = self.parse_expr()?;
        self.skip_ws();
        if self.pos != self.src.len() {
            return Err(self.err("unexpected trailing input"));
        }
        Ok(Expr {
            ast,
            idents: self.idents,
        })
    }

    fn err(&self, msg: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && (self.src[self.pos] as char).is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn parse_expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.parse_term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Node::Add(lhs.into(), self.parse_term()?.into());
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Node::Sub(lhs.into(), self.parse_term()?.into());
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.parse_factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Node::Mul(lhs.into(), self.parse_factor()?.into());
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Node::Div(lhs.into(), self.parse_factor()?.into());
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_factor(&mut self) -> Result<Node, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Node::Neg(self.parse_power()?.into()));
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Node, ParseError> {
        let base = self.parse_atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            // Right-associative: the exponent is a full factor.
            let exp = self.parse_factor()?;
            return Ok(Node::Pow(base.into(), exp.into()));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.parse_expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.parse_number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.parse_ident_or_call(),
            Some(c) => Err(self.err(&format!("unexpected character `{}`", c as char))),
        }
    }

    fn parse_number(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if matches!(self.src.get(self.pos), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if self.src.get(self.pos).is_some_and(|c| c.is_ascii_digit()) {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                // `2e` starts an identifier boundary, not an exponent.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>().map(Node::Num).map_err(|_| ParseError::Syntax {
            offset: start,
            msg: format!("invalid number `{text}`"),
        })
    }

    fn parse_ident_or_call(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && ((self.src[self.pos] as char).is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
        if self.peek() == Some(b'(') {
            let func = Func::from_name(&name).ok_or(ParseError::UnknownFunction {
                name: name.clone(),
                offset: start,
            })?;
            self.pos += 1;
            let arg = self.parse_expr()?;
            if self.peek() != Some(b')') {
                return Err(self.err("expected ')'"));
            }
            self.pos += 1;
            return Ok(Node::Call(func, arg.into()));
        }
        let idx = match self.idents.iter().position(|n| *n == name) {
            Some(i) => i,
            None => {
                self.idents.push(name);
                self.idents.len() - 1
            }
        };
        Ok(Node::Var(idx as u32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, f64)]) -> Params {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parse_free_vars() {
        let e = Expr::parse("y^2").unwrap();
        assert_eq!(e.idents(), ["y".to_string()]);

        let e = Expr::parse("y^2/(b-x)").unwrap();
        let params = env(&[("b", 1.0)]);
        let mut fv = e.free_vars(&params);
        fv.sort();
        assert_eq!(fv, ["x", "y"]);
    }

    #[test]
    fn syntax_error_offset() {
        match Expr::parse("y^^2") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_function() {
        match Expr::parse("sinh(y)") {
            Err(ParseError::UnknownFunction { name, offset }) => {
                assert_eq!(name, "sinh");
                assert_eq!(offset, 0);
            }
            other => panic!("expected unknown function, got {other:?}"),
        }
    }

    #[test]
    fn eval_basics() {
        let e = Expr::parse("y^2").unwrap();
        assert_eq!(e.eval(&env(&[("y", 3.0)])).unwrap(), 9.0);

        let e = Expr::parse("exp(y)").unwrap();
        assert_eq!(e.eval(&env(&[("y", 0.0)])).unwrap(), 1.0);
    }

    #[test]
    fn eval_pole_is_reported_not_masked() {
        let e = Expr::parse("1/(b-x)").unwrap();
        let v = e.eval(&env(&[("x", 1.0), ("b", 1.0)])).unwrap();
        assert!(!v.is_finite());
    }

    #[test]
    fn eval_missing_binding() {
        let e = Expr::parse("y^2").unwrap();
        assert_eq!(
            e.eval(&env(&[("x", 1.0)])),
            Err(EvalError::MissingVar("y".to_string()))
        );
    }

    #[test]
    fn fractional_power_of_negative_base_is_non_finite() {
        let e = Expr::parse("y^1.5").unwrap();
        let v = e.eval(&env(&[("y", -2.0)])).unwrap();
        assert!(v.is_nan());
    }

    #[test]
    fn precedence() {
        let e = Expr::parse("2*y^3").unwrap();
        assert_eq!(e.eval(&env(&[("y", 2.0)])).unwrap(), 16.0);

        let e = Expr::parse("-y^2").unwrap();
        assert_eq!(e.eval(&env(&[("y", 3.0)])).unwrap(), -9.0);

        // Right associativity: 2^3^2 = 2^9.
        let e = Expr::parse("2^3^2").unwrap();
        assert_eq!(e.eval(&Params::new()).unwrap(), 512.0);
    }

    #[test]
    fn partials_power_rule() {
        let e = Expr::parse("b*y^gamma").unwrap();
        let d = e
            .eval_with_partials(&env(&[("b", 1.0), ("gamma", 2.0), ("y", 3.0)]), &["y"])
            .unwrap();
        assert_eq!(d.value, 9.0);
        assert_eq!(d.partials["y"], 6.0);
    }

    #[test]
    fn partials_quotient() {
        let e = Expr::parse("y^2/(b-x)").unwrap();
        let d = e
            .eval_with_partials(&env(&[("b", 2.0), ("x", 1.0), ("y", 1.0)]), &["x", "y"])
            .unwrap();
        assert!((d.value - 1.0).abs() < 1e-15);
        assert!((d.partials["x"] - 1.0).abs() < 1e-12);
        assert!((d.partials["y"] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn partials_exp_chain() {
        let e = Expr::parse("exp(2*y)").unwrap();
        let d = e.eval_with_partials(&env(&[("y", 0.0)]), &["y"]).unwrap();
        assert_eq!(d.value, 1.0);
        assert_eq!(d.partials["y"], 2.0);
    }

    #[test]
    fn power_rule_survives_negative_base() {
        // Constant integer exponent: no ln(base) term, derivative stays finite.
        let e = Expr::parse("y^2").unwrap();
        let d = e.eval_with_partials(&env(&[("y", -3.0)]), &["y"]).unwrap();
        assert_eq!(d.value, 9.0);
        assert_eq!(d.partials["y"], -6.0);
    }

    #[test]
    fn abs_subgradient_zero_at_kink() {
        let e = Expr::parse("abs(y)").unwrap();
        let d = e.eval_with_partials(&env(&[("y", 0.0)]), &["y"]).unwrap();
        assert_eq!(d.partials["y"], 0.0);
        let d = e.eval_with_partials(&env(&[("y", -2.0)]), &["y"]).unwrap();
        assert_eq!(d.partials["y"], -1.0);
    }

    #[test]
    fn bound_expr_matches_eval() {
        let e = Expr::parse("b*y^gamma + sin(x)").unwrap();
        let params = env(&[("b", 2.0), ("gamma", 3.0)]);
        let bound = e.bind(&["x", "y"], &params).unwrap();
        let full = env(&[("b", 2.0), ("gamma", 3.0), ("x", 0.7), ("y", 1.3)]);
        assert!((bound.eval(&[0.7, 1.3]) - e.eval(&full).unwrap()).abs() < 1e-15);

        let mut grad = [0.0; 2];
        let v = bound.eval_grad(&[0.7, 1.3], &mut grad);
        assert!((v - e.eval(&full).unwrap()).abs() < 1e-15);
        assert!((grad[0] - 0.7f64.cos()).abs() < 1e-12);
        assert!((grad[1] - 6.0 * 1.3f64.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn shift_var_rewrites() {
        let e = Expr::parse("b*exp(y)").unwrap();
        let shifted = e.shift_var("y", -1.0);
        let v = shifted.eval(&env(&[("b", 1.0), ("y", 1.0)])).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rename_vars_round_trip() {
        let e = Expr::parse("y*t + x").unwrap();
        let r = e.rename_vars(&[("y", "y1"), ("t", "y2")]);
        let v = r
            .eval(&env(&[("y1", 2.0), ("y2", 3.0), ("x", 1.0)]))
            .unwrap();
        assert_eq!(v, 7.0);
    }

    #[test]
    fn unparse_reparse_evaluates_identically() {
        let sources = [
            "y^2/(b-x)",
            "-y^2",
            "2*y^3",
            "1 + abs(y^2)",
            "exp(2*y) - ln(x)/sqrt(y)",
            "(x+y)*(x-y)^2",
            "2^3^2",
            "-(x+1)/(y-2)",
        ];
        let full = env(&[("x", 0.37), ("y", 1.91), ("b", 2.5)]);
        for src in sources {
            let e1 = Expr::parse(src).unwrap();
            let printed = e1.to_string();
            let e2 = Expr::parse(&printed).unwrap_or_else(|err| {
                panic!("reparse of `{printed}` failed: {err}");
            });
            let v1 = e1.eval(&full).unwrap();
            let v2 = e2.eval(&full).unwrap();
            assert!(
                (v1 - v2).abs() <= 1e-12 * v1.abs().max(1.0),
                "mismatch for `{src}` -> `{printed}`: {v1} vs {v2}"
            );
        }
    }
}
