//! Benchmark mechanical systems, RK4 trajectories, noisy datasets and the
//! magnetic-pendulum basin experiment.
//!
//! Every system is described by a candidate library together with the true
//! coefficient vector over that library, so ground-truth dynamics come from
//! the same Euler–Lagrange machinery the identifier uses:
//!
//! ```text
//! M(q) q̈ = f_ext(t) − Σ λ_k (∇_qᵀ∇_q̇ φ_k · q̇ − ∇_q φ_k),   M = Σ λ_k ∇_q̇ᵀ∇_q̇ φ_k
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{CandidateLibrary, CandidateTerm, MAX_DOF};

/// Independent random streams derived from one seed.
mod stream {
    pub const INITIAL: u64 = 0;
    pub const FORCING: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const MISSING: u64 = 3;
    pub const COLLOCATION: u64 = 4;
}

/// Seeded generator for one of the dataset streams.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    SinglePendulum,
    DoublePendulum,
    SphericalPendulum,
    ChaosPendulum,
    CartSpringPendulum,
    SphericalSpringPendulum,
    MagneticPendulum,
}

impl SystemId {
    pub const ALL: [SystemId; 7] = [
        SystemId::SinglePendulum,
        SystemId::DoublePendulum,
        SystemId::SphericalPendulum,
        SystemId::ChaosPendulum,
        SystemId::CartSpringPendulum,
        SystemId::SphericalSpringPendulum,
        SystemId::MagneticPendulum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::SinglePendulum => "single_pendulum",
            SystemId::DoublePendulum => "double_pendulum",
            SystemId::SphericalPendulum => "spherical_pendulum",
            SystemId::ChaosPendulum => "chaos_pendulum",
            SystemId::CartSpringPendulum => "cart_spring_pendulum",
            SystemId::SphericalSpringPendulum => "spherical_spring_pendulum",
            SystemId::MagneticPendulum => "magnetic_pendulum",
        }
    }

    pub fn dof(self) -> usize {
        match self {
            SystemId::SinglePendulum => 1,
            SystemId::SphericalSpringPendulum => 3,
            _ => 2,
        }
    }

    /// Driven by a known external force (as opposed to carrying a known
    /// Lagrangian term).
    pub fn is_active(self) -> bool {
        matches!(
            self,
            SystemId::SinglePendulum | SystemId::DoublePendulum | SystemId::SphericalPendulum
        )
    }

    pub fn coordinate_names(self) -> &'static [&'static str] {
        match self {
            SystemId::SinglePendulum => &["theta"],
            SystemId::DoublePendulum | SystemId::ChaosPendulum => &["theta1", "theta2"],
            SystemId::SphericalPendulum => &["theta", "phi"],
            SystemId::CartSpringPendulum => &["x", "theta"],
            SystemId::SphericalSpringPendulum => &["r", "theta", "phi"],
            SystemId::MagneticPendulum => &["x", "y"],
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemId::ALL
            .into_iter()
            .find(|id| id.as_str() == s.trim())
            .ok_or_else(|| {
                let known: Vec<_> = SystemId::ALL.iter().map(|id| id.as_str()).collect();
                Error::Config(format!(
                    "unknown system `{s}` (known: {})",
                    known.join(", ")
                ))
            })
    }
}

/// Physical constants of the benchmark systems (SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalParams {
    /// Bob mass of single/spherical/spring pendulums, and of the magnetic ball.
    pub m: f64,
    pub m1: f64,
    pub m2: f64,
    /// Cart mass.
    pub cart_mass: f64,
    pub l: f64,
    pub l1: f64,
    pub l2: f64,
    pub g: f64,
    /// Spring stiffness.
    pub k: f64,
    /// Spring rest length.
    pub d: f64,
    /// Restoring constant `C` of the magnetic pendulum.
    pub magnet_gravity: f64,
    /// Magnet strength `C_i`, shared by all magnets.
    pub magnet_strength: f64,
    /// Distance between the rest plane and the magnet plane.
    pub magnet_height: f64,
    /// Magnets sit on a circle of this radius.
    pub magnet_radius: f64,
    pub magnets: usize,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            m1: 1.0,
            m2: 1.0,
            cart_mass: 1.0,
            l: 1.0,
            l1: 1.0,
            l2: 1.0,
            g: 9.81,
            k: 10.0,
            d: 1.0,
            magnet_gravity: 0.5,
            magnet_strength: 1.0,
            magnet_height: 0.3,
            magnet_radius: 1.0,
            magnets: 3,
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("m1", self.m1),
            ("m2", self.m2),
            ("cart_mass", self.cart_mass),
            ("l", self.l),
            ("l1", self.l1),
            ("l2", self.l2),
            ("magnet_height", self.magnet_height),
            ("magnet_radius", self.magnet_radius),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "parameter `{name}` must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("g", self.g),
            ("k", self.k),
            ("d", self.d),
            ("magnet_gravity", self.magnet_gravity),
            ("magnet_strength", self.magnet_strength),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("parameter `{name}` must be finite")));
            }
        }
        if self.magnets == 0 {
            return Err(Error::Config("at least one magnet is required".into()));
        }
        Ok(())
    }

    /// Magnet positions, evenly spaced on a circle starting at the +y axis.
    pub fn magnet_positions(&self) -> Vec<(f64, f64)> {
        let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
        (0..self.magnets)
            .map(|i| {
                let a = PI / 2.0 + 2.0 * PI * i as f64 / self.magnets as f64;
                (
                    snap(self.magnet_radius * a.cos()),
                    snap(self.magnet_radius * a.sin()),
                )
            })
            .collect()
    }
}

/// How a system is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    /// Known external generalized forces.
    Active,
    /// Conservative; library term `known` has coefficient fixed to 1.
    Passive { known: usize },
}

impl Mode {
    pub fn known(self) -> Option<usize> {
        match self {
            Mode::Active => None,
            Mode::Passive { known } => Some(known),
        }
    }
}

/// A benchmark system: its library, true coefficients and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub id: SystemId,
    pub params: PhysicalParams,
    pub mode: Mode,
    pub library: CandidateLibrary,
    /// Aligned with `library`; for passive systems the known term is 1.
    pub true_coeffs: Vec<f64>,
}

impl SystemSpec {
    pub fn new(id: SystemId, params: PhysicalParams) -> Result<Self> {
        params.validate()?;
        let (library, true_coeffs, mode) = build_system_library(id, &params)?;
        Ok(Self {
            id,
            params,
            mode,
            library,
            true_coeffs,
        })
    }

    pub fn with_defaults(id: SystemId) -> Result<Self> {
        Self::new(id, PhysicalParams::default())
    }

    pub fn dof(&self) -> usize {
        self.library.dof()
    }

    /// Names of the terms with nonzero true coefficient.
    pub fn true_terms(&self) -> Vec<&str> {
        self.library
            .terms()
            .iter()
            .zip(&self.true_coeffs)
            .filter(|(_, &c)| c != 0.0)
            .map(|(t, _)| t.name())
            .collect()
    }

    /// `q̈` under the true Lagrangian with generalized force `force`.
    pub fn acceleration(&self, q: &[f64], qd: &[f64], force: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dof()];
        lagrangian_acceleration(&self.library, &self.true_coeffs, q, qd, force, &mut out)?;
        Ok(out)
    }

    /// Total energy `q̇·∇_q̇L − L` of the true Lagrangian.
    pub fn energy(&self, q: &[f64], qd: &[f64]) -> Result<f64> {
        self.library.energy(&self.true_coeffs, q, qd)
    }
}

/// Candidate library, true coefficients and mode for a benchmark system.
///
/// Passive systems use the first library term as the known term and the
/// coefficients are divided by its physical value.
pub fn build_system_library(
    id: SystemId,
    p: &PhysicalParams,
) -> Result<(CandidateLibrary, Vec<f64>, Mode)> {
    let true_terms: Vec<(String, f64)>;
    let distractors: Vec<String>;
    let s = |x: &str| x.to_string();
    match id {
        SystemId::SinglePendulum => {
            true_terms = vec![
                (s("qd1^2"), 0.5 * p.m * p.l * p.l),
                (s("cos(q1)"), p.m * p.g * p.l),
            ];
            distractors = vec![
                s("q1^2"),
                s("sin(q1)"),
                s("qd1^2*cos(q1)"),
                s("qd1^2*sin(q1)"),
            ];
        }
        SystemId::DoublePendulum => {
            true_terms = vec![
                (s("qd1^2"), 0.5 * (p.m1 + p.m2) * p.l1 * p.l1),
                (s("qd2^2"), 0.5 * p.m2 * p.l2 * p.l2),
                (s("qd1*qd2*cos(q1-q2)"), p.m2 * p.l1 * p.l2),
                (s("cos(q1)"), (p.m1 + p.m2) * p.g * p.l1),
                (s("cos(q2)"), p.m2 * p.g * p.l2),
            ];
            distractors = vec![
                s("qd1*qd2"),
                s("sin(q1)"),
                s("sin(q2)"),
                s("cos(q1-q2)"),
                s("qd1*qd2*sin(q1-q2)"),
            ];
        }
        SystemId::SphericalPendulum => {
            true_terms = vec![
                (s("qd1^2"), 0.5 * p.m * p.l * p.l),
                (s("sin(q1)^2*qd2^2"), 0.5 * p.m * p.l * p.l),
                (s("cos(q1)"), p.m * p.g * p.l),
            ];
            distractors = vec![
                s("qd2^2"),
                s("qd1*qd2"),
                s("cos(q1)*qd2^2"),
                s("sin(q1)"),
                s("cos(q1)*qd1^2"),
            ];
        }
        SystemId::ChaosPendulum => {
            true_terms = vec![
                (
                    s("qd1^2"),
                    p.m1 * p.l1 * p.l1 / 24.0 + p.m2 * p.l1 * p.l1 / 8.0,
                ),
                (s("qd2^2"), p.m2 * p.l2 * p.l2 / 18.0),
                (s("qd1*qd2*cos(q1-q2)"), p.m2 * p.l1 * p.l2 / 12.0),
                (s("cos(q1)"), 0.5 * p.m2 * p.g * p.l1),
                (s("cos(q2)"), p.m2 * p.g * p.l2 / 6.0),
            ];
            distractors = vec![
                s("qd1*qd2"),
                s("sin(q1)"),
                s("sin(q2)"),
                s("cos(q1-q2)"),
                s("qd1*qd2*sin(q1-q2)"),
            ];
        }
        SystemId::CartSpringPendulum => {
            let spring = shifted_square(p.d);
            true_terms = vec![
                (s("qd1^2"), 0.5 * (p.cart_mass + p.m)),
                (s("qd2^2"), 0.5 * p.m * p.l * p.l),
                (s("qd1*qd2*cos(q2)"), p.m * p.l),
                (s("cos(q2)"), p.m * p.g * p.l),
                (spring, -0.5 * p.k),
            ];
            distractors = vec![s("qd1*qd2"), s("sin(q2)"), s("q1"), s("qd1*qd2*sin(q2)")];
        }
        SystemId::SphericalSpringPendulum => {
            let spring = shifted_square(p.d);
            true_terms = vec![
                (s("qd1^2"), 0.5 * p.m),
                (s("q1^2*qd2^2"), 0.5 * p.m),
                (s("q1^2*sin(q2)^2*qd3^2"), 0.5 * p.m),
                (s("q1*cos(q2)"), p.m * p.g),
                (spring, -0.5 * p.k),
            ];
            distractors = vec![
                s("qd2^2"),
                s("qd3^2"),
                s("q1^2*qd3^2"),
                s("cos(q2)"),
                s("q1"),
            ];
        }
        SystemId::MagneticPendulum => {
            let mut t = vec![(s("qd1^2"), 0.5 * p.m), (s("qd2^2"), 0.5 * p.m)];
            for (x0, y0) in p.magnet_positions() {
                t.push((
                    format!("invr(q1,q2;{x0},{y0},{})", p.magnet_height),
                    p.magnet_strength,
                ));
            }
            t.push((s("q1^2"), -0.5 * p.magnet_gravity));
            t.push((s("q2^2"), -0.5 * p.magnet_gravity));
            true_terms = t;
            distractors = vec![s("qd1*qd2"), s("q1*q2"), s("q1"), s("q2")];
        }
    }

    let mut terms = Vec::new();
    let mut coeffs = Vec::new();
    for (name, c) in &true_terms {
        terms.push(name.parse::<CandidateTerm>()?);
        coeffs.push(*c);
    }
    for name in &distractors {
        terms.push(name.parse::<CandidateTerm>()?);
        coeffs.push(0.0);
    }
    let library = CandidateLibrary::new(id.dof(), terms)?;
    let mode = if id.is_active() {
        Mode::Active
    } else {
        let scale = coeffs[0];
        if scale == 0.0 {
            return Err(Error::Config(format!(
                "{id}: known term has zero coefficient"
            )));
        }
        for c in &mut coeffs {
            *c /= scale;
        }
        Mode::Passive { known: 0 }
    };
    Ok((library, coeffs, mode))
}

fn shifted_square(d: f64) -> String {
    if d < 0.0 {
        format!("(q1+{})^2", -d)
    } else {
        format!("(q1-{d})^2")
    }
}

/// `q̈` for the Lagrangian `Σ coeffs_k φ_k` with generalized force `force`.
///
/// Writes `n` accelerations into `out`. The mass matrix must be definite
/// (of either sign); otherwise, or if its condition number exceeds 1e12, a
/// degenerate-configuration error is returned.
pub fn lagrangian_acceleration(
    lib: &CandidateLibrary,
    coeffs: &[f64],
    q: &[f64],
    qd: &[f64],
    force: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let n = lib.dof();
    let zeros = [0.0; MAX_DOF];
    let mut mass = [[0.0; MAX_DOF]; MAX_DOF];
    let mut rhs = [0.0; MAX_DOF];
    rhs[..n].copy_from_slice(&force[..n]);
    for (term, &c) in lib.terms().iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        let el = term.euler_lagrange(q, qd, &zeros[..n], false)?;
        for i in 0..n {
            rhs[i] -= c * el.el[i];
            for j in 0..n {
                mass[i][j] += c * el.d_qdd[i][j];
            }
        }
    }
    solve_definite(&mut mass, &mut rhs, n)?;
    out[..n].copy_from_slice(&rhs[..n]);
    Ok(())
}

/// Solves `A x = b` for small definite `A` by Cholesky of `±A`.
fn solve_definite(
    a: &mut [[f64; MAX_DOF]; MAX_DOF],
    b: &mut [f64; MAX_DOF],
    n: usize,
) -> Result<()> {
    let sign = if a[0][0] < 0.0 { -1.0 } else { 1.0 };
    let mut l = [[0.0; MAX_DOF]; MAX_DOF];
    for j in 0..n {
        let mut d = sign * a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::DegenerateConfiguration(format!(
                "mass matrix is not definite (pivot {j} = {d:e})"
            )));
        }
        let djj = d.sqrt();
        l[j][j] = djj;
        for i in j + 1..n {
            let mut s = sign * a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / djj;
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for (i, row) in l.iter().enumerate().take(n) {
        lo = lo.min(row[i]);
        hi = hi.max(row[i]);
    }
    if (hi / lo).powi(2) > 1e12 {
        return Err(Error::DegenerateConfiguration(format!(
            "mass matrix is ill-conditioned (estimate {:.3e})",
            (hi / lo).powi(2)
        )));
    }
    for i in 0..n {
        let mut s = sign * b[i];
        for k in 0..i {
            s -= l[i][k] * b[k];
        }
        b[i] = s / l[i][i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k][i] * b[k];
        }
        b[i] = s / l[i][i];
    }
    Ok(())
}

/// Sinusoidal generalized forces `f_i(t) = A_i sin(ω_i t + ϕ_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forcing {
    pub amplitude: Vec<f64>,
    pub omega: Vec<f64>,
    pub phase: Vec<f64>,
}

impl Forcing {
    pub fn zero(n: usize) -> Self {
        Self {
            amplitude: vec![0.0; n],
            omega: vec![0.0; n],
            phase: vec![0.0; n],
        }
    }

    /// Random amplitudes in [0.5, 2], frequencies in [0.5, 2] rad/s and
    /// phases in [0, 2π).
    ///
    /// The azimuthal torque of the spherical pendulum is instead sized from
    /// the initial state: with amplitude `0.4·ω·|p₀|`, where
    /// `p₀ = sin²θ₀·φ̇₀` is the initial azimuthal momentum, the momentum
    /// stays within `[0.2, 1.8]·p₀` and the bob never reaches the pole.
    pub fn sample(id: SystemId, seed: u64, q0: &[f64], qd0: &[f64]) -> Self {
        let n = id.dof();
        let mut rng = stream_rng(seed, stream::FORCING);
        let mut f = Self::zero(n);
        for i in 0..n {
            f.amplitude[i] = rng.random_range(0.5..=2.0);
            f.omega[i] = rng.random_range(0.5..=2.0);
            f.phase[i] = rng.random_range(0.0..2.0 * PI);
        }
        if id == SystemId::SphericalPendulum {
            f.amplitude[1] = 0.4 * f.omega[1] * (q0[0].sin().powi(2) * qd0[1]).abs();
        }
        f
    }

    pub fn dof(&self) -> usize {
        self.amplitude.len()
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.dof()) {
            *o = self.amplitude[i] * (self.omega[i] * t + self.phase[i]).sin();
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dof()];
        self.eval_into(t, &mut out);
        out
    }
}

/// Classic fixed-step RK4 on `ẏ = f(t, y)`.
///
/// Takes `steps` steps of size `dt` (which may be negative) and records the
/// state every `record_every` steps, including the initial one. Returns the
/// recorded times and states.
pub fn rk4_integrate<F>(
    mut f: F,
    y0: &[f64],
    t0: f64,
    dt: f64,
    steps: usize,
    record_every: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let record_every = record_every.max(1);
    let dim = y0.len();
    let mut y = y0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
    );
    let mut tmp = vec![0.0; dim];
    let mut times = vec![t0];
    let mut states = vec![y.clone()];
    for step in 0..steps {
        let t = t0 + step as f64 * dt;
        f(t, &y, &mut k1)?;
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * dt * k1[i];
        }
        f(t + 0.5 * dt, &tmp, &mut k2)?;
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * dt * k2[i];
        }
        f(t + 0.5 * dt, &tmp, &mut k3)?;
        for i in 0..dim {
            tmp[i] = y[i] + dt * k3[i];
        }
        f(t + dt, &tmp, &mut k4)?;
        for i in 0..dim {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t_next = t0 + (step + 1) as f64 * dt;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { time: t_next });
        }
        if (step + 1) % record_every == 0 {
            times.push(t_next);
            states.push(y.clone());
        }
    }
    Ok((times, states))
}

/// Sampled solution of a system.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub q: DMatrix<f64>,
    pub qd: DMatrix<f64>,
    pub qdd: DMatrix<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn row(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
        m.row(r).iter().copied().collect()
    }
}

/// Integrates the true dynamics of `spec` over `t_span` with step `dt`,
/// recording every `record_every` steps. `dt` must divide the span.
pub fn rk4_simulate(
    spec: &SystemSpec,
    forcing: Option<&Forcing>,
    q0: &[f64],
    qd0: &[f64],
    t_span: (f64, f64),
    dt: f64,
    record_every: usize,
) -> Result<Trajectory> {
    simulate_lagrangian(
        &spec.library,
        &spec.true_coeffs,
        forcing,
        0.0,
        q0,
        qd0,
        t_span,
        dt,
        record_every,
    )
}

/// As [`rk4_simulate`] for an arbitrary library Lagrangian with optional
/// linear damping `−damping · q̇` added to the acceleration.
#[allow(clippy::too_many_arguments)]
pub fn simulate_lagrangian(
    lib: &CandidateLibrary,
    coeffs: &[f64],
    forcing: Option<&Forcing>,
    damping: f64,
    q0: &[f64],
    qd0: &[f64],
    t_span: (f64, f64),
    dt: f64,
    record_every: usize,
) -> Result<Trajectory> {
    let n = lib.dof();
    if q0.len() != n || qd0.len() != n {
        return Err(Error::Dimension(format!(
            "initial state has {}+{} entries for a {n}-DOF system",
            q0.len(),
            qd0.len()
        )));
    }
    let (t0, t1) = t_span;
    if !(dt > 0.0) || !(t1 > t0) {
        return Err(Error::Config(format!(
            "need dt > 0 and t_end > t_start (dt {dt}, span {t0}..{t1})"
        )));
    }
    let steps_f = (t1 - t0) / dt;
    let steps = steps_f.round() as usize;
    if (steps_f - steps as f64).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "step {dt} does not divide the span {}",
            t1 - t0
        )));
    }
    let mut force = vec![0.0; n];
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        if let Some(f) = forcing {
            f.eval_into(t, &mut force);
        }
        let (q, qd) = y.split_at(n);
        dy[..n].copy_from_slice(qd);
        lagrangian_acceleration(lib, coeffs, q, qd, &force, &mut dy[n..])?;
        for i in 0..n {
            dy[n + i] -= damping * qd[i];
        }
        Ok(())
    };
    let y0: Vec<f64> = q0.iter().chain(qd0).copied().collect();
    let (t, states) = rk4_integrate(&mut rhs, &y0, t0, dt, steps, record_every)?;
    let rows = t.len();
    let mut q = DMatrix::zeros(rows, n);
    let mut qd = DMatrix::zeros(rows, n);
    let mut qdd = DMatrix::zeros(rows, n);
    let mut dy = vec![0.0; 2 * n];
    for (r, y) in states.iter().enumerate() {
        rhs(t[r], y, &mut dy)?;
        for i in 0..n {
            q[(r, i)] = y[i];
            qd[(r, i)] = y[n + i];
            qdd[(r, i)] = dy[n + i];
        }
    }
    Ok(Trajectory { t, q, qd, qdd })
}

/// Uniform random initial state from the system's documented ranges.
///
/// Planar angles: [−π/2, π/2] (double and chaos pendulums: [−π, π]).
/// Velocities: [−1, 1]. Cart position: [−0.5, 0.5]. Spring length:
/// [d − 0.3, d + 0.3]. Magnetic ball position: [−1, 1]². Polar angles of
/// spherical systems: [0.5, 1.2] with azimuthal rate 1 ≤ |φ̇| ≤ 2, which keeps
/// the orbit away from the pole.
pub fn sample_initial_conditions(spec: &SystemSpec, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream_rng(seed, stream::INITIAL);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    let half = PI / 2.0;
    match spec.id {
        SystemId::SinglePendulum => (vec![u(-half, half)], vec![u(-1.0, 1.0)]),
        SystemId::DoublePendulum | SystemId::ChaosPendulum => (
            vec![u(-PI, PI), u(-PI, PI)],
            vec![u(-1.0, 1.0), u(-1.0, 1.0)],
        ),
        SystemId::SphericalPendulum => {
            let theta = u(0.5, 1.2);
            let phi = u(-PI, PI);
            let theta_dot = u(-1.0, 1.0);
            let rate = u(1.0, 2.0);
            let sign = if u(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
            (vec![theta, phi], vec![theta_dot, sign * rate])
        }
        SystemId::CartSpringPendulum => (
            vec![u(-0.5, 0.5), u(-half, half)],
            vec![u(-1.0, 1.0), u(-1.0, 1.0)],
        ),
        SystemId::SphericalSpringPendulum => {
            let d = spec.params.d;
            let r = u(d - 0.3, d + 0.3);
            let theta = u(0.5, 1.2);
            let phi = u(-PI, PI);
            let r_dot = u(-1.0, 1.0);
            let theta_dot = u(-1.0, 1.0);
            let rate = u(1.0, 2.0);
            let sign = if u(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
            (vec![r, theta, phi], vec![r_dot, theta_dot, sign * rate])
        }
        SystemId::MagneticPendulum => (
            vec![u(-1.0, 1.0), u(-1.0, 1.0)],
            vec![u(-1.0, 1.0), u(-1.0, 1.0)],
        ),
    }
}

/// Adds Gaussian noise and drops entries at random.
///
/// Noise on column `i` has standard deviation `noise_level · std(clean_i)`.
/// Each entry is independently marked missing with probability
/// `missing_frac`. Returns the noisy matrix (missing entries hold NaN) and
/// the row-major presence mask.
pub fn corrupt(
    clean: &DMatrix<f64>,
    noise_level: f64,
    missing_frac: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<bool>)> {
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(Error::Config(format!(
            "noise level must be non-negative, got {noise_level}"
        )));
    }
    if !(0.0..1.0).contains(&missing_frac) {
        return Err(Error::Config(format!(
            "missing fraction must lie in [0, 1), got {missing_frac}"
        )));
    }
    let (rows, n) = clean.shape();
    let mut noisy = clean.clone();
    if noise_level > 0.0 && rows > 1 {
        let mut rng = stream_rng(seed, stream::NOISE);
        for i in 0..n {
            let col = clean.column(i);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rows - 1) as f64;
            let sigma = noise_level * var.sqrt();
            if sigma == 0.0 {
                continue;
            }
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            for r in 0..rows {
                noisy[(r, i)] += normal.sample(&mut rng);
            }
        }
    }
    let mut present = vec![true; rows * n];
    if missing_frac > 0.0 {
        let mut rng = stream_rng(seed, stream::MISSING);
        for r in 0..rows {
            for i in 0..n {
                if rng.random::<f64>() < missing_frac {
                    present[r * n + i] = false;
                    noisy[(r, i)] = f64::NAN;
                }
            }
        }
    }
    Ok((noisy, present))
}

/// Sampling protocol for generated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub t_end: f64,
    pub dt_sim: f64,
    pub dt_meas: f64,
    /// Collocation points per measurement row.
    pub colloc_factor: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            t_end: 20.0,
            dt_sim: 1e-3,
            dt_meas: 0.01,
            colloc_factor: 5.0,
        }
    }
}

impl SamplingConfig {
    fn stride(&self) -> Result<usize> {
        if !(self.dt_sim > 0.0 && self.dt_meas > 0.0 && self.t_end > 0.0) {
            return Err(Error::Config(
                "sampling steps and duration must be positive".into(),
            ));
        }
        let ratio = self.dt_meas / self.dt_sim;
        let stride = ratio.round() as usize;
        if stride == 0 || (ratio - stride as f64).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "measurement step {} must be a multiple of the simulation step {}",
                self.dt_meas, self.dt_sim
            )));
        }
        Ok(stride)
    }
}

/// Everything needed to regenerate a dataset, stored as a JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: SystemId,
    pub params: PhysicalParams,
    pub mode: Mode,
    pub noise_level: f64,
    pub missing_frac: f64,
    pub seed: u64,
    pub sampling: SamplingConfig,
    pub n_colloc: usize,
    pub q0: Vec<f64>,
    pub qd0: Vec<f64>,
    pub forcing: Option<Forcing>,
    pub terms: Vec<String>,
    pub true_coeffs: Vec<f64>,
}

/// Measurements, collocation times and external forces of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub t_meas: Vec<f64>,
    /// `N_m × n`; NaN where not present.
    pub q_meas: DMatrix<f64>,
    /// Row-major `N_m × n`.
    pub present: Vec<bool>,
    pub t_colloc: Vec<f64>,
    /// `N_c × n`; zero for passive systems.
    pub f_colloc: DMatrix<f64>,
}

impl Dataset {
    pub fn dof(&self) -> usize {
        self.q_meas.ncols()
    }

    pub fn is_present(&self, row: usize, dof: usize) -> bool {
        self.present[row * self.dof() + dof]
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn forcing_at(&self, t: f64) -> Vec<f64> {
        match &self.meta.forcing {
            Some(f) => f.eval(t),
            None => vec![0.0; self.dof()],
        }
    }

    /// Builds a dataset from measurements; collocation times are drawn
    /// uniformly on the measurement span from the seed's collocation stream.
    pub fn assemble(
        meta: DatasetMeta,
        t_meas: Vec<f64>,
        q_meas: DMatrix<f64>,
        present: Vec<bool>,
    ) -> Result<Self> {
        let n = q_meas.ncols();
        if t_meas.len() != q_meas.nrows() || present.len() != t_meas.len() * n {
            return Err(Error::Dimension(format!(
                "{} times, {:?} measurements, {} mask entries",
                t_meas.len(),
                q_meas.shape(),
                present.len()
            )));
        }
        if t_meas.is_empty() {
            return Err(Error::Config("dataset has no measurements".into()));
        }
        for (r, row) in present.chunks(n.max(1)).enumerate() {
            for (i, &p) in row.iter().enumerate() {
                if p && !q_meas[(r, i)].is_finite() {
                    return Err(Error::Config(format!(
                        "measurement ({r}, {i}) is marked present but is not finite"
                    )));
                }
            }
        }
        let lo = t_meas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t_meas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut rng = stream_rng(meta.seed, stream::COLLOCATION);
        let mut t_colloc: Vec<f64> = (0..meta.n_colloc)
            .map(|_| {
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            })
            .collect();
        t_colloc.sort_by(f64::total_cmp);
        let mut f_colloc = DMatrix::zeros(t_colloc.len(), n);
        if let Some(f) = &meta.forcing {
            let mut buf = vec![0.0; n];
            for (r, &t) in t_colloc.iter().enumerate() {
                f.eval_into(t, &mut buf);
                for i in 0..n {
                    f_colloc[(r, i)] = buf[i];
                }
            }
        }
        Ok(Self {
            meta,
            t_meas,
            q_meas,
            present,
            t_colloc,
            f_colloc,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json`. Dots inside `stem` are kept.
    ///
    /// CSV columns: `t, q_1..q_n, mask_1..mask_n, f_1..f_n` with forces at
    /// the measurement times.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let n = self.dof();
        let csv_path = with_suffix(stem, "csv");
        let json_path = with_suffix(stem, "json");
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e))?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("q_{i}")));
        header.extend((1..=n).map(|i| format!("mask_{i}")));
        header.extend((1..=n).map(|i| format!("f_{i}")));
        w.write_record(&header)
            .map_err(|e| Error::format(&csv_path, e))?;
        for (r, &t) in self.t_meas.iter().enumerate() {
            let f = self.forcing_at(t);
            let mut rec = vec![t.to_string()];
            rec.extend((0..n).map(|i| self.q_meas[(r, i)].to_string()));
            rec.extend((0..n).map(|i| u8::from(self.is_present(r, i)).to_string()));
            rec.extend(f.iter().map(f64::to_string));
            w.write_record(&rec)
                .map_err(|e| Error::format(&csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json =
            serde_json::to_string_pretty(&self.meta).map_err(|e| Error::format(&json_path, e))?;
        fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::write`] from its CSV path; the
    /// sidecar is the same path with a `.json` extension.
    pub fn read(csv_path: &Path) -> Result<Self> {
        let json_path = csv_path.with_extension("json");
        let meta_text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&meta_text).map_err(|e| Error::format(&json_path, e))?;
        let n = meta.system.dof();
        let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| Error::format(csv_path, e))?;
        let header = rdr
            .headers()
            .map_err(|e| Error::format(csv_path, e))?
            .clone();
        if header.len() != 1 + 3 * n {
            return Err(Error::format(
                csv_path,
                format!(
                    "expected {} columns for a {n}-DOF system, found {}",
                    1 + 3 * n,
                    header.len()
                ),
            ));
        }
        let mut t_meas = Vec::new();
        let mut values = Vec::new();
        let mut present = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(csv_path, e))?;
            let num = |k: usize| -> Result<f64> {
                rec[k].trim().parse::<f64>().map_err(|_| {
                    Error::format(csv_path, format!("row {}: bad number `{}`", r + 1, &rec[k]))
                })
            };
            t_meas.push(num(0)?);
            for i in 0..n {
                values.push(num(1 + i)?);
            }
            for i in 0..n {
                present.push(match rec[1 + n + i].trim() {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(Error::format(
                            csv_path,
                            format!("row {}: bad mask `{other}`", r + 1),
                        ))
                    }
                });
            }
        }
        if t_meas.is_empty() {
            return Err(Error::format(csv_path, "no measurement rows"));
        }
        let q_meas = DMatrix::from_row_slice(t_meas.len(), n, &values);
        Dataset::assemble(meta, t_meas, q_meas, present)
    }
}

/// `path` with `.ext` appended, even when its file name already has a dot.
pub fn with_suffix(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// A generated dataset together with its clean trajectory.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub clean: Trajectory,
}

/// Simulates `spec` from seeded initial conditions and corrupts the samples.
pub fn generate_dataset(
    spec: &SystemSpec,
    sampling: &SamplingConfig,
    noise_level: f64,
    missing_frac: f64,
    seed: u64,
) -> Result<Generated> {
    let stride = sampling.stride()?;
    let (q0, qd0) = sample_initial_conditions(spec, seed);
    let forcing = spec
        .id
        .is_active()
        .then(|| Forcing::sample(spec.id, seed, &q0, &qd0));
    let clean = rk4_simulate(
        spec,
        forcing.as_ref(),
        &q0,
        &qd0,
        (0.0, sampling.t_end),
        sampling.dt_sim,
        stride,
    )?;
    let (q_meas, present) = corrupt(&clean.q, noise_level, missing_frac, seed)?;
    let n_colloc = (sampling.colloc_factor * clean.len() as f64).round() as usize;
    let meta = DatasetMeta {
        system: spec.id,
        params: spec.params.clone(),
        mode: spec.mode,
        noise_level,
        missing_frac,
        seed,
        sampling: sampling.clone(),
        n_colloc,
        q0,
        qd0,
        forcing,
        terms: spec.library.names(),
        true_coeffs: spec.true_coeffs.clone(),
    };
    let dataset = Dataset::assemble(meta, clean.t.clone(), q_meas, present)?;
    Ok(Generated { dataset, clean })
}

/// Re-simulates the clean trajectory a dataset was generated from.
pub fn regenerate_clean(meta: &DatasetMeta) -> Result<Trajectory> {
    let spec = SystemSpec::new(meta.system, meta.params.clone())?;
    rk4_simulate(
        &spec,
        meta.forcing.as_ref(),
        &meta.q0,
        &meta.qd0,
        (0.0, meta.sampling.t_end),
        meta.sampling.dt_sim,
        meta.sampling.stride()?,
    )
}

/// Settings of the magnetic-pendulum basin experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasinConfig {
    /// Linear damping rate (1/s).
    pub damping: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: usize,
    pub dt: f64,
    pub t_max: f64,
    /// Settled when speed stays below this ...
    pub speed_tol: f64,
    /// ... within this distance of a magnet ...
    pub capture_radius: f64,
    /// ... for this long.
    pub dwell: f64,
}

impl Default for BasinConfig {
    fn default() -> Self {
        Self {
            damping: 0.2,
            x_range: (-1.5, 1.5),
            y_range: (-1.5, 1.5),
            resolution: 64,
            dt: 0.01,
            t_max: 60.0,
            speed_tol: 0.05,
            capture_radius: 0.25,
            dwell: 1.0,
        }
    }
}

impl BasinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0) {
            return Err(Error::Config("basin damping must be positive".into()));
        }
        if self.resolution == 0 || !(self.dt > 0.0) || !(self.t_max > 0.0) {
            return Err(Error::Config(
                "basin resolution, step and horizon must be positive".into(),
            ));
        }
        if !(self.x_range.1 > self.x_range.0 && self.y_range.1 > self.y_range.0) {
            return Err(Error::Config("basin ranges must be increasing".into()));
        }
        Ok(())
    }

    /// Cell-center coordinate of index `k` along a range.
    fn center(range: (f64, f64), k: usize, res: usize) -> f64 {
        range.0 + (k as f64 + 0.5) * (range.1 - range.0) / res as f64
    }
}

/// Labels of a square grid of initial positions; `labels[row * res + col]`
/// with rows along `y`. Label `i ≥ 1` is magnet `i`; 0 is unresolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub resolution: usize,
    pub labels: Vec<u8>,
}

impl LabelGrid {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.resolution + col]
    }

    /// Fraction of cells with equal labels.
    pub fn agreement(&self, other: &LabelGrid) -> Result<f64> {
        if self.resolution != other.resolution {
            return Err(Error::Dimension(format!(
                "grids of resolution {} and {}",
                self.resolution, other.resolution
            )));
        }
        let same = self
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / self.labels.len() as f64)
    }

    /// One CSV row per grid row, no header.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.labels.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(PathBuf::from(path), e))
    }
}

/// Magnet label reached from rest at `(x, y)`, or 0.
pub fn settle_label(
    lib: &CandidateLibrary,
    coeffs: &[f64],
    magnets: &[(f64, f64)],
    cfg: &BasinConfig,
    start: (f64, f64),
) -> u8 {
    let steps = (cfg.t_max / cfg.dt).ceil() as usize;
    let dwell_steps = (cfg.dwell / cfg.dt).ceil() as usize;
    let mut y = [start.0, start.1, 0.0, 0.0];
    let mut settled = 0usize;
    let mut last = 0u8;
    let rhs = |y: &[f64; 4], dy: &mut [f64; 4]| -> Result<()> {
        let mut acc = [0.0; 2];
        lagrangian_acceleration(lib, coeffs, &y[..2], &y[2..], &[0.0, 0.0], &mut acc)?;
        dy[0] = y[2];
        dy[1] = y[3];
        dy[2] = acc[0] - cfg.damping * y[2];
        dy[3] = acc[1] - cfg.damping * y[3];
        Ok(())
    };
    let h = cfg.dt;
    let (mut k1, mut k2, mut k3, mut k4) = ([0.0; 4], [0.0; 4], [0.0; 4], [0.0; 4]);
    for _ in 0..steps {
        let nearest = magnets
            .iter()
            .enumerate()
            .map(|(i, &(mx, my))| (i, (y[0] - mx).hypot(y[1] - my)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let speed = y[2].hypot(y[3]);
        match nearest {
            Some((i, dist)) if dist < cfg.capture_radius && speed < cfg.speed_tol => {
                let label = (i + 1) as u8;
                settled = if label == last { settled + 1 } else { 1 };
                last = label;
                if settled >= dwell_steps {
                    return label;
                }
            }
            _ => {
                settled = 0;
                last = 0;
            }
        }
        let step = |y: &[f64; 4], k: &[f64; 4], c: f64| {
            let mut out = *y;
            for j in 0..4 {
                out[j] += c * k[j];
            }
            out
        };
        if rhs(&y, &mut k1).is_err()
            || rhs(&step(&y, &k1, 0.5 * h), &mut k2).is_err()
            || rhs(&step(&y, &k2, 0.5 * h), &mut k3).is_err()
            || rhs(&step(&y, &k3, h), &mut k4).is_err()
        {
            return 0;
        }
        for j in 0..4 {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return 0;
        }
    }
    0
}

/// Labels every cell of the configured grid, integrating the damped
/// dynamics of `Σ coeffs_k φ_k` from rest at each cell center.
pub fn basin_of_attraction(
    lib: &CandidateLibrary,
    coeffs: &[f64],
    magnets: &[(f64, f64)],
    cfg: &BasinConfig,
) -> Result<LabelGrid> {
    cfg.validate()?;
    if lib.dof() != 2 {
        return Err(Error::Dimension(format!(
            "basin needs a planar system, got {} DOF",
            lib.dof()
        )));
    }
    if magnets.len() > u8::MAX as usize {
        return Err(Error::Config("too many magnets".into()));
    }
    let res = cfg.resolution;
    let labels: Vec<u8> = (0..res * res)
        .into_par_iter()
        .map(|cell| {
            let (row, col) = (cell / res, cell % res);
            let x = BasinConfig::center(cfg.x_range, col, res);
            let y = BasinConfig::center(cfg.y_range, row, res);
            settle_label(lib, coeffs, magnets, cfg, (x, y))
        })
        .collect();
    Ok(LabelGrid {
        resolution: res,
        labels,
    })
}
