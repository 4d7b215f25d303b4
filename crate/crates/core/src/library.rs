//! Candidate-function libraries for Lagrangians.
//!
//! A candidate term is a product of factors drawn from a small algebra
//! (powers of coordinates and velocities, trigonometric functions of angles
//! and angle differences, shifted powers, and the inverse-distance factor of
//! a magnet). Each term is differentiated exactly with third-order Taylor
//! arithmetic, which yields everything the expanded Euler–Lagrange residual
//! needs:
//!
//! ```text
//! EL(φ) = ∇_q̇ᵀ∇_q̇ φ · q̈ + ∇_qᵀ∇_q̇ φ · q̇ − ∇_q φ
//! ```
//!
//! together with its partial derivatives with respect to `q`, `q̇`, `q̈`.
//!
//! Terms have a canonical text form (`qd1^2*cos(q1-q2)`, `invr(q1,q2;0,1,0.3)`)
//! used as their name and in library configuration files.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taylor::{Taylor3, MAX_VARS};

/// Largest supported number of generalized coordinates.
pub const MAX_DOF: usize = 4;

/// A scalar input of a term: a coordinate `q_i` or a velocity `q̇_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    Q(usize),
    V(usize),
}

/// One multiplicative factor of a candidate term. DOF indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factor {
    /// `q_i^power`
    Coord { dof: usize, power: u32 },
    /// `q̇_i^power`
    Vel { dof: usize, power: u32 },
    /// `sin(q_i)^power`
    Sin { dof: usize, power: u32 },
    /// `cos(q_i)^power`
    Cos { dof: usize, power: u32 },
    /// `sin(q_i - q_j)^power`
    SinDiff { i: usize, j: usize, power: u32 },
    /// `cos(q_i - q_j)^power`
    CosDiff { i: usize, j: usize, power: u32 },
    /// `(q_i - shift)^power`
    Shifted { dof: usize, shift: f64, power: u32 },
    /// `1 / sqrt((q_x - x0)^2 + (q_y - y0)^2 + d^2)`
    InvDist {
        x: usize,
        y: usize,
        x0: f64,
        y0: f64,
        d: f64,
    },
}

impl Factor {
    fn vars(&self) -> Vec<Var> {
        match *self {
            Factor::Coord { dof, .. }
            | Factor::Sin { dof, .. }
            | Factor::Cos { dof, .. }
            | Factor::Shifted { dof, .. } => vec![Var::Q(dof)],
            Factor::Vel { dof, .. } => vec![Var::V(dof)],
            Factor::SinDiff { i, j, .. } | Factor::CosDiff { i, j, .. } => {
                vec![Var::Q(i), Var::Q(j)]
            }
            Factor::InvDist { x, y, .. } => vec![Var::Q(x), Var::Q(y)],
        }
    }

    fn max_dof(&self) -> usize {
        self.vars()
            .iter()
            .map(|v| match v {
                Var::Q(i) | Var::V(i) => *i,
            })
            .max()
            .unwrap_or(0)
    }

    fn power(&self) -> u32 {
        match *self {
            Factor::Coord { power, .. }
            | Factor::Vel { power, .. }
            | Factor::Sin { power, .. }
            | Factor::Cos { power, .. }
            | Factor::SinDiff { power, .. }
            | Factor::CosDiff { power, .. }
            | Factor::Shifted { power, .. } => power,
            Factor::InvDist { .. } => 1,
        }
    }
}

fn write_pow(f: &mut fmt::Formatter<'_>, power: u32) -> fmt::Result {
    if power != 1 {
        write!(f, "^{power}")?;
    }
    Ok(())
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Factor::Coord { dof, power } => {
                write!(f, "q{}", dof + 1)?;
                write_pow(f, power)
            }
            Factor::Vel { dof, power } => {
                write!(f, "qd{}", dof + 1)?;
                write_pow(f, power)
            }
            Factor::Sin { dof, power } => {
                write!(f, "sin(q{})", dof + 1)?;
                write_pow(f, power)
            }
            Factor::Cos { dof, power } => {
                write!(f, "cos(q{})", dof + 1)?;
                write_pow(f, power)
            }
            Factor::SinDiff { i, j, power } => {
                write!(f, "sin(q{}-q{})", i + 1, j + 1)?;
                write_pow(f, power)
            }
            Factor::CosDiff { i, j, power } => {
                write!(f, "cos(q{}-q{})", i + 1, j + 1)?;
                write_pow(f, power)
            }
            Factor::Shifted { dof, shift, power } => {
                if shift < 0.0 {
                    write!(f, "(q{}+{})", dof + 1, -shift)?;
                } else {
                    write!(f, "(q{}-{})", dof + 1, shift)?;
                }
                write_pow(f, power)
            }
            Factor::InvDist { x, y, x0, y0, d } => {
                write!(f, "invr(q{},q{};{},{},{})", x + 1, y + 1, x0, y0, d)
            }
        }
    }
}

fn parse_index(s: &str, prefix: &str) -> Result<usize> {
    let rest = s
        .strip_prefix(prefix)
        .ok_or_else(|| Error::Parse(format!("expected `{prefix}<index>`, got `{s}`")))?;
    let idx: usize = rest
        .parse()
        .map_err(|_| Error::Parse(format!("bad index in `{s}`")))?;
    if idx == 0 {
        return Err(Error::Parse(format!("indices are 1-based: `{s}`")));
    }
    Ok(idx - 1)
}

fn parse_f64(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad number `{s}`")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("non-finite number `{s}`")));
    }
    Ok(v)
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(body) = s.strip_prefix("invr(") {
            let body = body
                .strip_suffix(')')
                .ok_or_else(|| Error::Parse(format!("unterminated `{s}`")))?;
            let (vars, consts) = body
                .split_once(';')
                .ok_or_else(|| Error::Parse(format!("`{s}` needs `;` before constants")))?;
            let vars: Vec<&str> = vars.split(',').map(str::trim).collect();
            let consts: Vec<&str> = consts.split(',').collect();
            if vars.len() != 2 || consts.len() != 3 {
                return Err(Error::Parse(format!(
                    "`{s}` must look like invr(qX,qY;x0,y0,d)"
                )));
            }
            return Ok(Factor::InvDist {
                x: parse_index(vars[0], "q")?,
                y: parse_index(vars[1], "q")?,
                x0: parse_f64(consts[0])?,
                y0: parse_f64(consts[1])?,
                d: parse_f64(consts[2])?,
            });
        }

        let (base, power) = match s.rfind('^') {
            Some(at) if !s[at..].contains(')') => {
                let p: u32 = s[at + 1..]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad exponent in `{s}`")))?;
                if p == 0 {
                    return Err(Error::Parse(format!("zero exponent in `{s}`")));
                }
                (&s[..at], p)
            }
            _ => (s, 1),
        };

        let inner = |prefix: &str| -> Option<&str> {
            base.strip_prefix(prefix).and_then(|r| r.strip_suffix(')'))
        };
        let parse_diff = |arg: &str| -> Result<Option<(usize, usize)>> {
            match arg.split_once('-') {
                Some((a, b)) if b.trim().starts_with('q') => Ok(Some((
                    parse_index(a.trim(), "q")?,
                    parse_index(b.trim(), "q")?,
                ))),
                _ => Ok(None),
            }
        };

        if let Some(arg) = inner("sin(") {
            return Ok(match parse_diff(arg)? {
                Some((i, j)) => Factor::SinDiff { i, j, power },
                None => Factor::Sin {
                    dof: parse_index(arg.trim(), "q")?,
                    power,
                },
            });
        }
        if let Some(arg) = inner("cos(") {
            return Ok(match parse_diff(arg)? {
                Some((i, j)) => Factor::CosDiff { i, j, power },
                None => Factor::Cos {
                    dof: parse_index(arg.trim(), "q")?,
                    power,
                },
            });
        }
        if let Some(arg) = inner("(") {
            let split = arg[1..]
                .find(['+', '-'])
                .map(|k| k + 1)
                .ok_or_else(|| Error::Parse(format!("`{s}` needs `(qI-c)` form")))?;
            let dof = parse_index(arg[..split].trim(), "q")?;
            let mag = parse_f64(&arg[split + 1..])?;
            let shift = if &arg[split..=split] == "-" {
                mag
            } else {
                -mag
            };
            return Ok(Factor::Shifted { dof, shift, power });
        }
        if base.starts_with("qd") {
            return Ok(Factor::Vel {
                dof: parse_index(base, "qd")?,
                power,
            });
        }
        if base.starts_with('q') {
            return Ok(Factor::Coord {
                dof: parse_index(base, "q")?,
                power,
            });
        }
        Err(Error::Parse(format!("unknown factor `{s}`")))
    }
}

/// A candidate Lagrangian term `φ_k(q, q̇)`: a product of factors.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTerm {
    factors: Vec<Factor>,
    vars: Vec<Var>,
    name: String,
}

impl CandidateTerm {
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Config("a term needs at least one factor".into()));
        }
        let mut vars: Vec<Var> = factors.iter().flat_map(Factor::vars).collect();
        vars.sort();
        vars.dedup();
        let name = factors
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("*");
        if vars.len() > MAX_VARS {
            return Err(Error::Config(format!(
                "term `{name}` depends on {} variables (max {MAX_VARS})",
                vars.len()
            )));
        }
        for f in &factors {
            match *f {
                Factor::SinDiff { i, j, .. } | Factor::CosDiff { i, j, .. } if i == j => {
                    return Err(Error::Config(format!(
                        "`{name}`: difference of a coordinate with itself"
                    )));
                }
                Factor::InvDist { x, y, .. } if x == y => {
                    return Err(Error::Config(format!(
                        "`{name}`: magnet factor needs two coordinates"
                    )));
                }
                Factor::InvDist { d, .. } if d < 0.0 => {
                    return Err(Error::Config(format!("`{name}`: negative plane distance")));
                }
                _ => {}
            }
        }
        Ok(Self {
            factors,
            vars,
            name,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Number of generalized coordinates the term refers to.
    fn dof_needed(&self) -> usize {
        self.factors.iter().map(Factor::max_dof).max().unwrap_or(0) + 1
    }

    fn slot(&self, v: Var) -> usize {
        self.vars
            .iter()
            .position(|&w| w == v)
            .expect("variable registered")
    }

    fn leaf(&self, v: Var, q: &[f64], qd: &[f64], third: bool) -> Taylor3 {
        let value = match v {
            Var::Q(i) => q[i],
            Var::V(i) => qd[i],
        };
        let t = Taylor3::variable(value, self.slot(v), self.vars.len());
        if third {
            t
        } else {
            t.second_order()
        }
    }

    fn factor_taylor(&self, f: &Factor, q: &[f64], qd: &[f64], third: bool) -> Result<Taylor3> {
        let leaf = |v| self.leaf(v, q, qd, third);
        let base = match *f {
            Factor::Coord { dof, .. } => leaf(Var::Q(dof)),
            Factor::Vel { dof, .. } => leaf(Var::V(dof)),
            Factor::Sin { dof, .. } => leaf(Var::Q(dof)).sin(),
            Factor::Cos { dof, .. } => leaf(Var::Q(dof)).cos(),
            Factor::SinDiff { i, j, .. } => leaf(Var::Q(i)).sub(&leaf(Var::Q(j))).sin(),
            Factor::CosDiff { i, j, .. } => leaf(Var::Q(i)).sub(&leaf(Var::Q(j))).cos(),
            Factor::Shifted { dof, shift, .. } => leaf(Var::Q(dof)).add_const(-shift),
            Factor::InvDist { x, y, x0, y0, d } => {
                let dx = leaf(Var::Q(x)).add_const(-x0);
                let dy = leaf(Var::Q(y)).add_const(-y0);
                let r2 = dx.mul(&dx).add(&dy.mul(&dy)).add_const(d * d);
                if !(r2.v > 0.0) {
                    return Err(Error::TermDomain {
                        term: self.name.clone(),
                        reason: format!("radicand {} is not positive", r2.v),
                    });
                }
                r2.rsqrt()
            }
        };
        Ok(base.powi(f.power()))
    }

    /// Value and derivatives in the term's local variables.
    pub fn taylor(&self, q: &[f64], qd: &[f64], third: bool) -> Result<Taylor3> {
        let mut acc: Option<Taylor3> = None;
        for f in &self.factors {
            let t = self.factor_taylor(f, q, qd, third)?;
            acc = Some(match acc {
                None => t,
                Some(a) => a.mul(&t),
            });
        }
        let out = acc.expect("terms have at least one factor");
        if !out.v.is_finite() {
            return Err(Error::TermDomain {
                term: self.name.clone(),
                reason: "non-finite value".into(),
            });
        }
        Ok(out)
    }

    /// Value only.
    pub fn value(&self, q: &[f64], qd: &[f64]) -> Result<f64> {
        Ok(self.taylor(q, qd, false)?.v)
    }

    /// The five derivative blocks the Euler–Lagrange residual needs.
    pub fn eval_jet(&self, q: &[f64], qd: &[f64]) -> Result<TermJet> {
        let n = q.len();
        if qd.len() != n || self.dof_needed() > n {
            return Err(Error::Dimension(format!(
                "term `{}` needs {} coordinates, got q:{} q̇:{}",
                self.name,
                self.dof_needed(),
                q.len(),
                qd.len()
            )));
        }
        let t = self.taylor(q, qd, false)?;
        let mut jet = TermJet::zeros(n);
        jet.value = t.v;
        for (a, va) in self.vars.iter().enumerate() {
            match *va {
                Var::Q(i) => jet.grad_q[i] = t.g[a],
                Var::V(i) => jet.grad_qd[i] = t.g[a],
            }
            for (b, vb) in self.vars.iter().enumerate() {
                match (*va, *vb) {
                    (Var::V(i), Var::V(j)) => jet.hess_qd_qd[(i, j)] = t.h[a][b],
                    (Var::V(i), Var::Q(j)) => jet.mixed_q_qd[(i, j)] = t.h[a][b],
                    _ => {}
                }
            }
        }
        Ok(jet)
    }

    /// Euler–Lagrange contribution of this term and its sensitivities.
    ///
    /// With `derivs == false` only `el` and `d_qdd` (the term's mass-matrix
    /// contribution) are filled.
    pub fn euler_lagrange(
        &self,
        q: &[f64],
        qd: &[f64],
        qdd: &[f64],
        derivs: bool,
    ) -> Result<ElJet> {
        let t = self.taylor(q, qd, derivs)?;
        let mut out = ElJet::default();
        let d = self.vars.len();
        // the rate each local variable changes: q -> q̇, q̇ -> q̈
        let mut rate = [0.0; MAX_VARS];
        for (c, vc) in self.vars.iter().enumerate() {
            rate[c] = match *vc {
                Var::Q(j) => qd[j],
                Var::V(j) => qdd[j],
            };
        }
        for (b, vb) in self.vars.iter().enumerate() {
            match *vb {
                Var::V(i) => {
                    for (c, vc) in self.vars.iter().enumerate() {
                        let hbc = t.h[b][c];
                        out.el[i] += hbc * rate[c];
                        match *vc {
                            Var::V(j) => out.d_qdd[i][j] += hbc,
                            Var::Q(j) if derivs => out.d_qd[i][j] += hbc,
                            _ => {}
                        }
                        if derivs {
                            for (x, vx) in self.vars.iter().enumerate().take(d) {
                                let w = t.t[b][c][x] * rate[c];
                                match *vx {
                                    Var::Q(m) => out.d_q[i][m] += w,
                                    Var::V(m) => out.d_qd[i][m] += w,
                                }
                            }
                        }
                    }
                }
                Var::Q(i) => {
                    out.el[i] -= t.g[b];
                    if derivs {
                        for (x, vx) in self.vars.iter().enumerate() {
                            match *vx {
                                Var::Q(m) => out.d_q[i][m] -= t.h[b][x],
                                Var::V(m) => out.d_qd[i][m] -= t.h[b][x],
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// True for terms of the form `f(q_i)·q̇_i`, which are total time
    /// derivatives and contribute nothing to the equations of motion.
    pub fn is_total_derivative(&self) -> bool {
        let vels: Vec<(usize, u32)> = self
            .factors
            .iter()
            .filter_map(|f| match *f {
                Factor::Vel { dof, power } => Some((dof, power)),
                _ => None,
            })
            .collect();
        match vels.as_slice() {
            [] => self.vars.is_empty(),
            [(dof, 1)] => self
                .vars
                .iter()
                .all(|v| matches!(*v, Var::Q(i) | Var::V(i) if i == *dof)),
            _ => false,
        }
    }
}

impl fmt::Display for CandidateTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl FromStr for CandidateTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let factors = s
            .split('*')
            .map(str::parse)
            .collect::<Result<Vec<Factor>>>()?;
        CandidateTerm::new(factors)
    }
}

/// Value and partial derivatives of one candidate term at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct TermJet {
    pub value: f64,
    /// `∂φ/∂q_i`
    pub grad_q: DVector<f64>,
    /// `∂φ/∂q̇_i`
    pub grad_qd: DVector<f64>,
    /// `∂²φ/∂q̇_i∂q̇_j`
    pub hess_qd_qd: DMatrix<f64>,
    /// `∂²φ/∂q̇_i∂q_j`; multiplying by `q̇` gives the convective part of
    /// `d/dt ∇_q̇ φ`.
    pub mixed_q_qd: DMatrix<f64>,
}

impl TermJet {
    pub fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            grad_q: DVector::zeros(n),
            grad_qd: DVector::zeros(n),
            hess_qd_qd: DMatrix::zeros(n, n),
            mixed_q_qd: DMatrix::zeros(n, n),
        }
    }

    /// `self += w · other`.
    pub fn axpy(&mut self, w: f64, other: &TermJet) {
        self.value += w * other.value;
        self.grad_q += &other.grad_q * w;
        self.grad_qd += &other.grad_qd * w;
        self.hess_qd_qd += &other.hess_qd_qd * w;
        self.mixed_q_qd += &other.mixed_q_qd * w;
    }

    /// `∇_q̇ᵀ∇_q̇φ·q̈ + ∇_qᵀ∇_q̇φ·q̇ − ∇_qφ`.
    pub fn euler_lagrange(&self, qd: &[f64], qdd: &[f64]) -> DVector<f64> {
        let qd = DVector::from_column_slice(qd);
        let qdd = DVector::from_column_slice(qdd);
        &self.hess_qd_qd * qdd + &self.mixed_q_qd * qd - &self.grad_q
    }
}

/// Euler–Lagrange expression of one term at one point, plus its partial
/// derivatives. Entries beyond the system's DOF count are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElJet {
    /// `EL_i`
    pub el: [f64; MAX_DOF],
    /// `∂EL_i/∂q_m`
    pub d_q: [[f64; MAX_DOF]; MAX_DOF],
    /// `∂EL_i/∂q̇_m`
    pub d_qd: [[f64; MAX_DOF]; MAX_DOF],
    /// `∂EL_i/∂q̈_m`, the term's mass-matrix contribution.
    pub d_qdd: [[f64; MAX_DOF]; MAX_DOF],
}

impl ElJet {
    /// `self += w · other`.
    pub fn axpy(&mut self, w: f64, other: &ElJet) {
        for i in 0..MAX_DOF {
            self.el[i] += w * other.el[i];
            for m in 0..MAX_DOF {
                self.d_q[i][m] += w * other.d_q[i][m];
                self.d_qd[i][m] += w * other.d_qd[i][m];
                self.d_qdd[i][m] += w * other.d_qdd[i][m];
            }
        }
    }
}

/// Ordered list of candidate terms over `dof` generalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LibraryDescriptor", into = "LibraryDescriptor")]
pub struct CandidateLibrary {
    dof: usize,
    terms: Vec<CandidateTerm>,
}

/// Serialized form: the DOF count and canonical term strings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LibraryDescriptor {
    pub dof: usize,
    pub terms: Vec<String>,
}

impl TryFrom<LibraryDescriptor> for CandidateLibrary {
    type Error = Error;

    fn try_from(d: LibraryDescriptor) -> Result<Self> {
        let terms = d
            .terms
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<CandidateTerm>>>()?;
        CandidateLibrary::new(d.dof, terms)
    }
}

impl From<CandidateLibrary> for LibraryDescriptor {
    fn from(lib: CandidateLibrary) -> Self {
        LibraryDescriptor {
            dof: lib.dof,
            terms: lib.terms.iter().map(|t| t.name.clone()).collect(),
        }
    }
}

impl CandidateLibrary {
    /// Builds a library, enforcing unique names and the minimal-completeness
    /// rule: no total-derivative terms and no pair of terms that differ only
    /// by a `sin(·)^2` ↔ `cos(·)^2` swap.
    pub fn new(dof: usize, terms: Vec<CandidateTerm>) -> Result<Self> {
        if dof == 0 || dof > MAX_DOF {
            return Err(Error::Config(format!(
                "library DOF count must be in 1..={MAX_DOF}, got {dof}"
            )));
        }
        if terms.is_empty() {
            return Err(Error::Config("library has no terms".into()));
        }
        for (k, t) in terms.iter().enumerate() {
            if t.dof_needed() > dof {
                return Err(Error::Config(format!(
                    "term `{}` refers to coordinate {} but the library has {dof}",
                    t.name,
                    t.dof_needed()
                )));
            }
            if t.is_total_derivative() {
                return Err(Error::Config(format!(
                    "term `{}` is a total time derivative and cannot be identified",
                    t.name
                )));
            }
            for other in &terms[..k] {
                if other.name == t.name {
                    return Err(Error::Config(format!("duplicate term `{}`", t.name)));
                }
                if trig_square_swap(&t.factors, &other.factors) {
                    return Err(Error::Config(format!(
                        "terms `{}` and `{}` are dependent through sin²+cos²=1",
                        other.name, t.name
                    )));
                }
            }
        }
        Ok(Self { dof, terms })
    }

    /// Parses a library from text: one term per line, `#` starts a comment.
    /// A line `dof = N` sets the coordinate count; otherwise it is inferred.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut dof = None;
        let mut terms = Vec::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("dof") {
                let n = rest
                    .trim_start()
                    .strip_prefix('=')
                    .ok_or_else(|| Error::Parse(format!("bad line `{line}`")))?
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad DOF count in `{line}`")))?;
                dof = Some(n);
                continue;
            }
            terms.push(line.parse::<CandidateTerm>()?);
        }
        let dof = dof.unwrap_or_else(|| terms.iter().map(|t| t.dof_needed()).max().unwrap_or(0));
        Self::new(dof, terms)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("dof = {}\n", self.dof);
        for t in &self.terms {
            s.push_str(&t.name);
            s.push('\n');
        }
        s
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[CandidateTerm] {
        &self.terms
    }

    pub fn term(&self, k: usize) -> &CandidateTerm {
        &self.terms[k]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name.clone()).collect()
    }

    /// `L(q, q̇) = Σ λ_k φ_k`.
    pub fn lagrangian(&self, coeffs: &[f64], q: &[f64], qd: &[f64]) -> Result<f64> {
        let mut l = 0.0;
        for (t, &c) in self.terms.iter().zip(coeffs) {
            if c != 0.0 {
                l += c * t.value(q, qd)?;
            }
        }
        Ok(l)
    }

    /// Jet of the Lagrangian `Σ λ_k φ_k` (linear in the coefficients).
    pub fn combined_jet(&self, coeffs: &[f64], q: &[f64], qd: &[f64]) -> Result<TermJet> {
        let mut acc = TermJet::zeros(self.dof);
        for (t, &c) in self.terms.iter().zip(coeffs) {
            if c != 0.0 {
                acc.axpy(c, &t.eval_jet(q, qd)?);
            }
        }
        Ok(acc)
    }

    /// Energy `E = q̇·∇_q̇L − L`.
    pub fn energy(&self, coeffs: &[f64], q: &[f64], qd: &[f64]) -> Result<f64> {
        let jet = self.combined_jet(coeffs, q, qd)?;
        Ok(jet.grad_qd.iter().zip(qd).map(|(g, v)| g * v).sum::<f64>() - jet.value)
    }

    /// Row `t`, term `k` holds the jet of term `k` at sample `t`.
    pub fn eval_library(&self, q: &DMatrix<f64>, qd: &DMatrix<f64>) -> Result<Vec<Vec<TermJet>>> {
        if q.shape() != qd.shape() || q.ncols() != self.dof {
            return Err(Error::Dimension(format!(
                "library over {} coordinates given q {:?} and q̇ {:?}",
                self.dof,
                q.shape(),
                qd.shape()
            )));
        }
        (0..q.nrows())
            .map(|r| {
                let qr: Vec<f64> = q.row(r).iter().copied().collect();
                let vr: Vec<f64> = qd.row(r).iter().copied().collect();
                self.terms
                    .iter()
                    .map(|t| {
                        t.eval_jet(&qr, &vr).map_err(|e| Error::LibraryEval {
                            sample: r,
                            term: t.name.clone(),
                            reason: e.to_string(),
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

fn trig_square_swap(a: &[Factor], b: &[Factor]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut diffs = a.iter().zip(b).filter(|(x, y)| x != y);
    let first = diffs.next();
    if diffs.next().is_some() {
        return false;
    }
    match first {
        Some((x, y)) => {
            matches!(
                (*x, *y),
                (Factor::Sin { dof: i, power: 2 }, Factor::Cos { dof: j, power: 2 })
                | (Factor::Cos { dof: i, power: 2 }, Factor::Sin { dof: j, power: 2 }) if i == j
            ) || matches!(
                (*x, *y),
                (Factor::SinDiff { i, j, power: 2 }, Factor::CosDiff { i: k, j: l, power: 2 })
                | (Factor::CosDiff { i, j, power: 2 }, Factor::SinDiff { i: k, j: l, power: 2 })
                    if (i, j) == (k, l)
            )
        }
        None => false,
    }
}
