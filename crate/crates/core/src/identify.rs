//! Joint spline/coefficient fitting with sequential thresholding.
//!
//! The unknowns are the control points `P` of one cubic spline per
//! coordinate and the library coefficients `Λ`. The objective is
//!
//! ```text
//! J = α/|present| Σ (N_m P − q_meas)²          data
//!   + 1/(N_c n)  ‖Σ λ_k EL(φ_k) − f_ext‖²       physics, at collocation points
//!   + β/N_c      Σ_i ‖N̈_c p_i‖²                 curvature
//!   + γ          ‖Λ_free‖₁                       sparsity
//! ```
//!
//! where `EL(φ) = ∇_q̇ᵀ∇_q̇φ·q̈ + ∇_qᵀ∇_q̇φ·q̇ − ∇_qφ` is evaluated on the spline.
//! For passive systems `f_ext = 0` and the known term keeps coefficient 1.
//!
//! Two optimizers are provided. Levenberg–Marquardt (the default) solves the
//! Gauss–Newton normal equations exactly: with control points interleaved by
//! coordinate the `P` block is banded, and the small dense `Λ` border is
//! eliminated through its Schur complement. The L1 term enters through the
//! quadratic majorizer `|λ| ≤ λ²/(2|λ₀|) + |λ₀|/2`. Adam runs plain
//! first-order descent on the exact gradient.
//!
//! Periodically, and whenever the optimizer stalls, coefficients below the
//! threshold are pruned and frozen at zero.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::banded::BandedSpd;
use crate::bspline::{
    assemble_local, default_control_count, KnotVector, LocalBasis, SplineModel, ORDER,
};
use crate::dynamics::{Dataset, Mode};
use crate::error::{Error, Result};
use crate::library::{CandidateLibrary, ElJet, MAX_DOF};

/// Collocation points per parallel work unit. Fixed so that floating-point
/// reductions do not depend on the thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phys: f64,
    /// Divide data and curvature residuals of each coordinate by the
    /// standard deviation of its measurements, so that coordinates with
    /// very different ranges weigh alike and α, β are dimensionless.
    pub normalize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 1e-4,
            gamma: 1e-6,
            phys: 1.0,
            normalize: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("phys", self.phys),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight `{name}` must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Pruning rule applied at each thresholding round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Threshold {
    /// `|λ_k| < ε`.
    Absolute(f64),
    /// `|λ_k| < ε · max_j |λ_j|`.
    RelativeMagnitude(f64),
    /// `|λ_k| · rms(EL(φ_k)) < ε · max_j |λ_j| · rms(EL(φ_j))`, with the rms
    /// taken over collocation points. Insensitive to how each term is scaled.
    RelativeContribution(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StlsConfig {
    pub threshold: Threshold,
    /// Maximum iterations between thresholding rounds.
    pub every: usize,
}

impl Default for StlsConfig {
    fn default() -> Self {
        Self {
            threshold: Threshold::RelativeContribution(0.1),
            every: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    LevenbergMarquardt,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub max_iter: usize,
    /// Stop once `J` falls below this.
    pub loss_tol: f64,
    /// A round has converged when the relative decrease of `J` over
    /// `patience` iterations is below this.
    pub rel_tol: f64,
    pub patience: usize,
    /// Initial Levenberg–Marquardt damping.
    pub lm_damping: f64,
    pub adam_lr: f64,
    /// Adam step multiplier applied on plateau.
    pub adam_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::LevenbergMarquardt,
            max_iter: 300,
            loss_tol: 1e-12,
            rel_tol: 1e-6,
            patience: 3,
            lm_damping: 1e-3,
            adam_lr: 1e-2,
            adam_decay: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffInit {
    /// All free coefficients start at zero.
    Zeros,
    /// Linear least squares of the physics residual on the initial curve.
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub stls: StlsConfig,
    /// Control points per coordinate; `None` uses one per two samples
    /// (at least 16).
    pub control_points: Option<usize>,
    pub init: CoeffInit,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            stls: StlsConfig::default(),
            control_points: None,
            init: CoeffInit::Zeros,
        }
    }
}

/// Library coefficients with their active set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub values: Vec<f64>,
    pub active: Vec<bool>,
    /// Passive systems: index of the term fixed at 1.
    pub known: Option<usize>,
}

impl CoefficientVector {
    /// All terms active at zero, except a known term at 1.
    pub fn new(len: usize, mode: Mode) -> Result<Self> {
        let known = mode.known();
        if let Some(k) = known {
            if k >= len {
                return Err(Error::Config(format!(
                    "known term {k} outside a library of {len}"
                )));
            }
        }
        let mut values = vec![0.0; len];
        if let Some(k) = known {
            values[k] = 1.0;
        }
        Ok(Self {
            values,
            active: vec![true; len],
            known,
        })
    }

    pub fn from_values(values: Vec<f64>, mode: Mode) -> Result<Self> {
        let mut c = Self::new(values.len(), mode)?;
        for (k, v) in values.into_iter().enumerate() {
            if Some(k) != c.known {
                c.values[k] = v;
            }
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Trainable: active and not the known term.
    pub fn is_free(&self, k: usize) -> bool {
        self.active[k] && Some(k) != self.known
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.is_free(k)).collect()
    }

    /// Terms that contribute to the residual.
    fn contributing(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| (self.active[k] && self.values[k] != 0.0) || Some(k) == self.known)
            .collect()
    }

    fn l1(&self) -> f64 {
        (0..self.len())
            .filter(|&k| self.is_free(k))
            .map(|k| self.values[k].abs())
            .sum()
    }

    /// Deactivates term `k` and zeroes it. The known term cannot be pruned.
    pub fn prune(&mut self, k: usize) {
        if Some(k) != self.known {
            self.active[k] = false;
            self.values[k] = 0.0;
        }
    }
}

/// Value of each loss component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub data: f64,
    pub physics: f64,
    pub reg: f64,
    pub sparse: f64,
    pub total: f64,
}

impl LossComponents {
    fn finish(mut self) -> Result<Self> {
        self.total = self.data + self.physics + self.reg + self.sparse;
        if !self.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                data: self.data,
                physics: self.physics,
                reg: self.reg,
                sparse: self.sparse,
            });
        }
        Ok(self)
    }
}

/// `Σ_k coeffs_k EL(φ_k) − f_ext` at every row (`f_ext` may be omitted for
/// passive systems).
pub fn physics_residual(
    lib: &CandidateLibrary,
    coeffs: &[f64],
    q: &DMatrix<f64>,
    qd: &DMatrix<f64>,
    qdd: &DMatrix<f64>,
    f_ext: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let (rows, n) = q.shape();
    if n != lib.dof()
        || qd.shape() != (rows, n)
        || qdd.shape() != (rows, n)
        || coeffs.len() != lib.len()
    {
        return Err(Error::Dimension(format!(
            "residual of a {}-DOF, {}-term library from q {:?}, q̇ {:?}, q̈ {:?} and {} coefficients",
            lib.dof(),
            lib.len(),
            q.shape(),
            qd.shape(),
            qdd.shape(),
            coeffs.len()
        )));
    }
    if let Some(f) = f_ext {
        if f.shape() != (rows, n) {
            return Err(Error::Dimension(format!(
                "external force {:?} for {rows}×{n} samples",
                f.shape()
            )));
        }
    }
    let mut out = DMatrix::zeros(rows, n);
    let (mut a, mut b, mut c) = ([0.0; MAX_DOF], [0.0; MAX_DOF], [0.0; MAX_DOF]);
    for r in 0..rows {
        for i in 0..n {
            a[i] = q[(r, i)];
            b[i] = qd[(r, i)];
            c[i] = qdd[(r, i)];
        }
        for (k, term) in lib.terms().iter().enumerate() {
            if coeffs[k] == 0.0 {
                continue;
            }
            let el = term
                .euler_lagrange(&a[..n], &b[..n], &c[..n], false)
                .map_err(|e| Error::LibraryEval {
                    sample: r,
                    term: term.name().to_string(),
                    reason: e.to_string(),
                })?;
            for i in 0..n {
                out[(r, i)] += coeffs[k] * el.el[i];
            }
        }
        if let Some(f) = f_ext {
            for i in 0..n {
                out[(r, i)] -= f[(r, i)];
            }
        }
    }
    Ok(out)
}

/// Weight of the second-difference penalty in [`init_control_points`].
pub const INIT_RIDGE: f64 = 1e-8;

/// Per-coordinate least squares of the present measurements.
///
/// A small penalty on second differences of the control points keeps the
/// system definite; control points whose support holds no measurement are
/// extrapolated linearly from their neighbours.
pub fn init_control_points(dataset: &Dataset, kv: &KnotVector) -> Result<DMatrix<f64>> {
    let rows = assemble_local(kv, &dataset.t_meas)?;
    let ncp = kv.basis_count();
    let n = dataset.dof();
    let mut out = DMatrix::zeros(ncp, n);
    for i in 0..n {
        let count = (0..rows.len())
            .filter(|&r| dataset.is_present(r, i))
            .count();
        if count < ncp {
            return Err(Error::Initialization(format!(
                "coordinate {} has {count} measurements for {ncp} control points; use fewer control points",
                i + 1
            )));
        }
        let mut a = BandedSpd::zeros(ncp, ORDER - 1);
        let mut b = vec![0.0; ncp];
        for (r, lb) in rows.iter().enumerate() {
            if !dataset.is_present(r, i) {
                continue;
            }
            let y = dataset.q_meas[(r, i)];
            for ja in 0..ORDER {
                b[lb.first + ja] += lb.values[ja] * y;
                for jb in 0..=ja {
                    a.add(lb.first + ja, lb.first + jb, lb.values[ja] * lb.values[jb]);
                }
            }
        }
        for j in 1..ncp.saturating_sub(1) {
            let stencil = [(j - 1, 1.0), (j, -2.0), (j + 1, 1.0)];
            for &(ja, va) in &stencil {
                for &(jb, vb) in &stencil {
                    if jb <= ja {
                        a.add(ja, jb, INIT_RIDGE * va * vb);
                    }
                }
            }
        }
        let chol = a
            .cholesky()
            .map_err(|e| Error::Initialization(format!("{e}; use fewer control points")))?;
        let x = chol.solve(&b);
        for j in 0..ncp {
            out[(j, i)] = x[j];
        }
    }
    Ok(out)
}

/// Gauss–Newton normal equations `A δ = −g` split into the banded control
/// point block, the dense coefficient block and their coupling.
struct Normal {
    a_pp: BandedSpd,
    a_pl: DMatrix<f64>,
    a_ll: DMatrix<f64>,
    g_p: Vec<f64>,
    g_l: Vec<f64>,
}

impl Normal {
    fn zeros(np: usize, kd: usize, nf: usize, matrices: bool) -> Self {
        let (bp, bf) = if matrices { (np, nf) } else { (0, 0) };
        Self {
            a_pp: BandedSpd::zeros(bp, kd),
            a_pl: DMatrix::zeros(bp, bf),
            a_ll: DMatrix::zeros(bf, bf),
            g_p: vec![0.0; np],
            g_l: vec![0.0; nf],
        }
    }

    fn merge(&mut self, o: &Normal) {
        if self.a_pp.dim() > 0 {
            self.a_pp.accumulate(&o.a_pp);
            self.a_pl += &o.a_pl;
            self.a_ll += &o.a_ll;
        }
        for (a, b) in self.g_p.iter_mut().zip(&o.g_p) {
            *a += b;
        }
        for (a, b) in self.g_l.iter_mut().zip(&o.g_l) {
            *a += b;
        }
    }

    /// Adds one weighted residual row: `row_p` over the `4n` control points
    /// starting at `base`, `row_l` over free coefficients, residual `r`.
    #[inline]
    fn add_row(&mut self, base: usize, row_p: &[f64], row_l: &[f64], r: f64, matrices: bool) {
        for (a, &va) in row_p.iter().enumerate() {
            if va == 0.0 {
                continue;
            }
            self.g_p[base + a] += va * r;
            if matrices {
                for (b, &vb) in row_p.iter().enumerate().take(a + 1) {
                    self.a_pp.add(base + a, base + b, va * vb);
                }
                for (f, &vf) in row_l.iter().enumerate() {
                    self.a_pl[(base + a, f)] += va * vf;
                }
            }
        }
        for (f, &vf) in row_l.iter().enumerate() {
            self.g_l[f] += vf * r;
            if matrices {
                for (h, &vh) in row_l.iter().enumerate().take(f + 1) {
                    self.a_ll[(f, h)] += vf * vh;
                }
            }
        }
    }
}

/// A dataset bound to a library, knot vector and loss weights.
pub struct Problem<'a> {
    lib: &'a CandidateLibrary,
    n: usize,
    ncp: usize,
    meas: Vec<LocalBasis>,
    q_meas: &'a DMatrix<f64>,
    present: &'a [bool],
    n_present: usize,
    /// Per-coordinate divisor of data and curvature residuals.
    spread: [f64; MAX_DOF],
    colloc: Vec<LocalBasis>,
    f_colloc: &'a DMatrix<f64>,
    weights: LossWeights,
}

impl<'a> Problem<'a> {
    pub fn new(
        dataset: &'a Dataset,
        lib: &'a CandidateLibrary,
        kv: &KnotVector,
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        if lib.dof() != dataset.dof() {
            return Err(Error::Dimension(format!(
                "library over {} coordinates, dataset with {}",
                lib.dof(),
                dataset.dof()
            )));
        }
        if dataset.t_colloc.is_empty() {
            return Err(Error::Config("no collocation points".into()));
        }
        let n_present = dataset.present_count();
        if n_present == 0 {
            return Err(Error::Config("dataset has no present measurements".into()));
        }
        let mut spread = [1.0; MAX_DOF];
        if weights.normalize {
            for (i, s) in spread.iter_mut().enumerate().take(dataset.dof()) {
                let vals: Vec<f64> = (0..dataset.t_meas.len())
                    .filter(|&r| dataset.is_present(r, i))
                    .map(|r| dataset.q_meas[(r, i)])
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
                let var =
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len().max(1) as f64;
                if var.sqrt() > 1e-12 {
                    *s = var.sqrt();
                }
            }
        }
        Ok(Self {
            lib,
            n: dataset.dof(),
            ncp: kv.basis_count(),
            meas: assemble_local(kv, &dataset.t_meas)?,
            q_meas: &dataset.q_meas,
            present: &dataset.present,
            n_present,
            spread,
            colloc: assemble_local(kv, &dataset.t_colloc)?,
            f_colloc: &dataset.f_colloc,
            weights,
        })
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    pub fn set_weights(&mut self, w: LossWeights) {
        self.weights = w;
    }

    /// Divisors applied to each coordinate's data and curvature residuals.
    pub fn spread(&self) -> &[f64] {
        &self.spread[..self.n]
    }

    pub fn collocation_count(&self) -> usize {
        self.colloc.len()
    }

    fn check(&self, p: &DMatrix<f64>, c: &CoefficientVector) -> Result<()> {
        if p.shape() != (self.ncp, self.n) || c.len() != self.lib.len() {
            return Err(Error::Dimension(format!(
                "control points {:?} and {} coefficients for a problem with {}×{} control points and {} terms",
                p.shape(),
                c.len(),
                self.ncp,
                self.n,
                self.lib.len()
            )));
        }
        Ok(())
    }

    #[inline]
    fn state(
        &self,
        lb: &LocalBasis,
        p: &DMatrix<f64>,
    ) -> ([f64; MAX_DOF], [f64; MAX_DOF], [f64; MAX_DOF]) {
        let (mut q, mut qd, mut qdd) = ([0.0; MAX_DOF], [0.0; MAX_DOF], [0.0; MAX_DOF]);
        for i in 0..self.n {
            for j in 0..ORDER {
                let v = p[(lb.first + j, i)];
                q[i] += lb.values[j] * v;
                qd[i] += lb.d1[j] * v;
                qdd[i] += lb.d2[j] * v;
            }
        }
        (q, qd, qdd)
    }

    fn term_error(&self, c: usize, k: usize, e: Error) -> Error {
        Error::LibraryEval {
            sample: c,
            term: self.lib.term(k).name().to_string(),
            reason: e.to_string(),
        }
    }

    /// Physics residual at every collocation point.
    pub fn residual(&self, p: &DMatrix<f64>, c: &CoefficientVector) -> Result<DMatrix<f64>> {
        self.check(p, c)?;
        let n = self.n;
        let terms = c.contributing();
        let rows: Vec<Vec<f64>> = (0..self.colloc.len())
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|chunk| -> Result<Vec<f64>> {
                let mut out = Vec::with_capacity(chunk.len() * n);
                for &ci in chunk {
                    let (q, qd, qdd) = self.state(&self.colloc[ci], p);
                    let mut r = [0.0; MAX_DOF];
                    for &k in &terms {
                        let el = self
                            .lib
                            .term(k)
                            .euler_lagrange(&q[..n], &qd[..n], &qdd[..n], false)
                            .map_err(|e| self.term_error(ci, k, e))?;
                        for i in 0..n {
                            r[i] += c.values[k] * el.el[i];
                        }
                    }
                    for i in 0..n {
                        out.push(r[i] - self.f_colloc[(ci, i)]);
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(self.colloc.len(), n, &flat))
    }

    /// `J` and its components.
    pub fn loss(&self, p: &DMatrix<f64>, c: &CoefficientVector) -> Result<LossComponents> {
        let res = self.residual(p, c)?;
        let nc = self.colloc.len() as f64;
        let w = self.weights;
        let mut out = LossComponents {
            physics: w.phys * res.norm_squared() / (nc * self.n as f64),
            sparse: w.gamma * c.l1(),
            ..Default::default()
        };
        let mut data = 0.0;
        for (r, lb) in self.meas.iter().enumerate() {
            let (q, _, _) = self.state(lb, p);
            for i in 0..self.n {
                if self.present[r * self.n + i] {
                    data += ((q[i] - self.q_meas[(r, i)]) / self.spread[i]).powi(2);
                }
            }
        }
        out.data = w.alpha * data / self.n_present as f64;
        if w.beta > 0.0 {
            let mut reg = 0.0;
            for lb in &self.colloc {
                let (_, _, qdd) = self.state(lb, p);
                reg += (0..self.n)
                    .map(|i| (qdd[i] / self.spread[i]).powi(2))
                    .sum::<f64>();
            }
            out.reg = w.beta * reg / nc;
        }
        out.finish()
    }

    /// Root-mean-square of `EL(φ_k)` over collocation points, per term.
    pub fn term_scales(&self, p: &DMatrix<f64>) -> Result<Vec<f64>> {
        let n = self.n;
        let nt = self.lib.len();
        let parts: Vec<Vec<f64>> = (0..self.colloc.len())
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|chunk| -> Result<Vec<f64>> {
                let mut acc = vec![0.0; nt];
                for &ci in chunk {
                    let (q, qd, qdd) = self.state(&self.colloc[ci], p);
                    for (k, term) in self.lib.terms().iter().enumerate() {
                        let el = term
                            .euler_lagrange(&q[..n], &qd[..n], &qdd[..n], false)
                            .map_err(|e| self.term_error(ci, k, e))?;
                        acc[k] += el.el[..n].iter().map(|v| v * v).sum::<f64>();
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mut total = vec![0.0; nt];
        for part in parts {
            for (t, v) in total.iter_mut().zip(part) {
                *t += v;
            }
        }
        let count = (self.colloc.len() * n) as f64;
        Ok(total.into_iter().map(|s| (s / count).sqrt()).collect())
    }

    /// Accumulates `Jᵀr` (and `JᵀJ` when `matrices`) over all smooth
    /// residuals: data, physics and curvature.
    fn assemble(&self, p: &DMatrix<f64>, c: &CoefficientVector, matrices: bool) -> Result<Normal> {
        let n = self.n;
        let np = self.ncp * n;
        let kd = ORDER * n - 1;
        let free = c.free_indices();
        let nf = free.len();
        let terms = c.contributing();
        let mut slot = vec![None; self.lib.len()];
        for (f, &k) in free.iter().enumerate() {
            slot[k] = Some(f);
        }
        // free terms must be evaluated even at zero coefficient
        let mut eval: Vec<usize> = terms.clone();
        for &k in &free {
            if !eval.contains(&k) {
                eval.push(k);
            }
        }
        eval.sort_unstable();
        let nc = self.colloc.len() as f64;
        let w_p = (self.weights.phys / (nc * n as f64)).sqrt();
        let w_r = (self.weights.beta / nc).sqrt();
        let w_d = (self.weights.alpha / self.n_present as f64).sqrt();

        let indices: Vec<usize> = (0..self.colloc.len()).collect();
        let parts: Vec<Normal> = indices
            .par_chunks(CHUNK)
            .map(|chunk| -> Result<Normal> {
                let mut acc = Normal::zeros(np, kd, nf, matrices);
                let mut els: Vec<ElJet> = vec![ElJet::default(); eval.len()];
                let mut row_p = [0.0; ORDER * MAX_DOF];
                let mut row_l = vec![0.0; nf];
                for &ci in chunk {
                    let lb = &self.colloc[ci];
                    let base = lb.first * n;
                    let (q, qd, qdd) = self.state(lb, p);
                    let mut total = ElJet::default();
                    for (e, &k) in eval.iter().enumerate() {
                        els[e] = self
                            .lib
                            .term(k)
                            .euler_lagrange(&q[..n], &qd[..n], &qdd[..n], true)
                            .map_err(|err| self.term_error(ci, k, err))?;
                        if c.values[k] != 0.0 {
                            total.axpy(c.values[k], &els[e]);
                        }
                    }
                    for i in 0..n {
                        for jl in 0..ORDER {
                            for m in 0..n {
                                row_p[jl * n + m] = w_p
                                    * (total.d_q[i][m] * lb.values[jl]
                                        + total.d_qd[i][m] * lb.d1[jl]
                                        + total.d_qdd[i][m] * lb.d2[jl]);
                            }
                        }
                        for (e, &k) in eval.iter().enumerate() {
                            if let Some(f) = slot[k] {
                                row_l[f] = w_p * els[e].el[i];
                            }
                        }
                        let r = w_p * (total.el[i] - self.f_colloc[(ci, i)]);
                        acc.add_row(base, &row_p[..ORDER * n], &row_l, r, matrices);
                    }
                    if w_r > 0.0 {
                        for i in 0..n {
                            row_p[..ORDER * n].iter_mut().for_each(|v| *v = 0.0);
                            let w = w_r / self.spread[i];
                            for jl in 0..ORDER {
                                row_p[jl * n + i] = w * lb.d2[jl];
                            }
                            acc.add_row(base, &row_p[..ORDER * n], &[], w * qdd[i], matrices);
                        }
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mut out = Normal::zeros(np, kd, nf, matrices);
        for part in &parts {
            out.merge(part);
        }
        let mut row_p = [0.0; ORDER * MAX_DOF];
        for (r, lb) in self.meas.iter().enumerate() {
            let base = lb.first * n;
            let (q, _, _) = self.state(lb, p);
            for i in 0..n {
                if !self.present[r * n + i] {
                    continue;
                }
                row_p[..ORDER * n].iter_mut().for_each(|v| *v = 0.0);
                let w = w_d / self.spread[i];
                for jl in 0..ORDER {
                    row_p[jl * n + i] = w * lb.values[jl];
                }
                let res = w * (q[i] - self.q_meas[(r, i)]);
                out.add_row(base, &row_p[..ORDER * n], &[], res, matrices);
            }
        }
        Ok(out)
    }

    /// Exact gradient of `J`: `(∂J/∂P, ∂J/∂Λ)`. The coefficient gradient is
    /// zero for inactive and known terms; the L1 term contributes
    /// `γ·sign(λ)` (zero at zero).
    pub fn gradient(
        &self,
        p: &DMatrix<f64>,
        c: &CoefficientVector,
    ) -> Result<(DMatrix<f64>, Vec<f64>)> {
        self.check(p, c)?;
        let normal = self.assemble(p, c, false)?;
        let mut gp = DMatrix::zeros(self.ncp, self.n);
        for j in 0..self.ncp {
            for i in 0..self.n {
                gp[(j, i)] = 2.0 * normal.g_p[j * self.n + i];
            }
        }
        let mut gl = vec![0.0; c.len()];
        for (f, &k) in c.free_indices().iter().enumerate() {
            let v = c.values[k];
            let sign = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            gl[k] = 2.0 * normal.g_l[f] + self.weights.gamma * sign;
        }
        Ok((gp, gl))
    }

    /// Physics-only least-squares coefficients on the current curve, with
    /// the control points held fixed.
    pub fn least_squares_coefficients(
        &self,
        p: &DMatrix<f64>,
        c: &CoefficientVector,
    ) -> Result<CoefficientVector> {
        self.check(p, c)?;
        let mut base = c.clone();
        for k in base.free_indices() {
            base.values[k] = 0.0;
        }
        let normal = self.assemble(p, &base, true)?;
        let free = base.free_indices();
        let nf = free.len();
        if nf == 0 {
            return Ok(base);
        }
        let mut a = normal.a_ll.clone();
        symmetrize(&mut a);
        let scale = (0..nf)
            .map(|f| a[(f, f)])
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        for f in 0..nf {
            a[(f, f)] += 1e-12 * scale;
        }
        let g = DVector::from_vec(normal.g_l.clone());
        let x = solve_dense(a, -g)?;
        for (f, &k) in free.iter().enumerate() {
            base.values[k] = x[f];
        }
        Ok(base)
    }

    /// One damped Gauss–Newton step from `(p, c)`. `irls` gives the diagonal
    /// L1 majorizer weight per free coefficient.
    fn lm_step(
        &self,
        normal: &Normal,
        irls: &[f64],
        c: &CoefficientVector,
        mu: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let np = normal.g_p.len();
        let nf = normal.g_l.len();
        let free = c.free_indices();
        let mut a_pp = normal.a_pp.clone();
        let max_p = (0..np)
            .map(|i| a_pp.diag(i))
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        for i in 0..np {
            let d = a_pp.diag(i).max(1e-9 * max_p);
            a_pp.add_diag(i, mu * d);
        }
        let chol = a_pp.cholesky()?;
        let mut a_ll = normal.a_ll.clone();
        symmetrize(&mut a_ll);
        let mut g_l = normal.g_l.clone();
        for (f, &k) in free.iter().enumerate() {
            a_ll[(f, f)] += irls[f];
            g_l[f] += irls[f] * c.values[k];
        }
        let max_l = (0..nf)
            .map(|f| a_ll[(f, f)])
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        for f in 0..nf {
            let d = a_ll[(f, f)].max(1e-9 * max_l);
            a_ll[(f, f)] += mu * d;
        }
        // Schur complement of the banded block
        let ap_inv_gp = chol.solve(&normal.g_p);
        let mut x = DMatrix::zeros(np, nf);
        for f in 0..nf {
            let col: Vec<f64> = normal.a_pl.column(f).iter().copied().collect();
            let sol = chol.solve(&col);
            x.column_mut(f).copy_from_slice(&sol);
        }
        let dl = if nf > 0 {
            let s = &a_ll - normal.a_pl.transpose() * &x;
            let rhs = -DVector::from_vec(g_l)
                + normal.a_pl.transpose() * DVector::from_vec(ap_inv_gp.clone());
            let mut s = s;
            symmetrize(&mut s);
            solve_dense(s, rhs)?.iter().copied().collect::<Vec<_>>()
        } else {
            Vec::new()
        };
        let mut dp: Vec<f64> = ap_inv_gp.iter().map(|v| -v).collect();
        for f in 0..nf {
            for i in 0..np {
                dp[i] -= x[(i, f)] * dl[f];
            }
        }
        Ok((dp, dl))
    }
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }
}

fn solve_dense(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&b));
    }
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::DegenerateConfiguration("singular coefficient normal matrix".into()))
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub data: f64,
    pub physics: f64,
    pub reg: f64,
    pub sparse: f64,
    pub total: f64,
    pub active_terms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub iteration: usize,
    pub terms: Vec<String>,
}

/// Result of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub terms: Vec<String>,
    pub coefficients: CoefficientVector,
    pub knots: Vec<f64>,
    /// One inner vector per coordinate.
    pub control_points: Vec<Vec<f64>>,
    pub trace: Vec<TraceEntry>,
    pub pruning: Vec<PruneEvent>,
    pub converged: bool,
    pub stop_reason: String,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub expression: String,
}

impl FitReport {
    pub fn model(&self) -> Result<SplineModel> {
        let kv = KnotVector::new(self.knots.clone())?;
        let ncp = kv.basis_count();
        let n = self.control_points.len();
        let mut p = DMatrix::zeros(ncp, n);
        for (i, col) in self.control_points.iter().enumerate() {
            if col.len() != ncp {
                return Err(Error::Dimension(format!(
                    "coordinate {} has {} control points, expected {ncp}",
                    i + 1,
                    col.len()
                )));
            }
            for (j, &v) in col.iter().enumerate() {
                p[(j, i)] = v;
            }
        }
        SplineModel::new(kv, p)
    }

    pub fn surviving_terms(&self) -> Vec<&str> {
        self.terms
            .iter()
            .zip(&self.coefficients.values)
            .filter(|(_, &v)| v != 0.0)
            .map(|(t, _)| t.as_str())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// `L = c₁ φ₁ + c₂ φ₂ + …` over nonzero coefficients.
pub fn expression(lib: &CandidateLibrary, coeffs: &[f64]) -> String {
    let mut s = String::from("L =");
    let mut first = true;
    for (t, &c) in lib.terms().iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        let sign = if c < 0.0 { "-" } else { "+" };
        if first {
            s.push_str(&format!(
                " {}{:.6}*{}",
                if c < 0.0 { "-" } else { "" },
                c.abs(),
                t.name()
            ));
        } else {
            s.push_str(&format!(" {sign} {:.6}*{}", c.abs(), t.name()));
        }
        first = false;
    }
    if first {
        s.push_str(" 0");
    }
    s
}

struct Stls {
    config: StlsConfig,
    last_round: usize,
}

impl Stls {
    /// Prunes according to the threshold; returns the pruned term indices.
    fn round(
        &mut self,
        problem: &Problem<'_>,
        p: &DMatrix<f64>,
        c: &mut CoefficientVector,
        iteration: usize,
    ) -> Result<Vec<usize>> {
        self.last_round = iteration;
        let candidates: Vec<usize> = (0..c.len()).filter(|&k| c.active[k]).collect();
        let score: Vec<f64> = match self.config.threshold {
            Threshold::Absolute(_) | Threshold::RelativeMagnitude(_) => {
                c.values.iter().map(|v| v.abs()).collect()
            }
            Threshold::RelativeContribution(_) => {
                let scales = problem.term_scales(p)?;
                c.values
                    .iter()
                    .zip(scales)
                    .map(|(v, s)| v.abs() * s)
                    .collect()
            }
        };
        let cut = match self.config.threshold {
            Threshold::Absolute(eps) => eps,
            Threshold::RelativeMagnitude(eps) | Threshold::RelativeContribution(eps) => {
                eps * candidates.iter().map(|&k| score[k]).fold(0.0, f64::max)
            }
        };
        let pruned: Vec<usize> = candidates
            .into_iter()
            .filter(|&k| c.is_free(k) && score[k] < cut)
            .collect();
        for &k in &pruned {
            c.prune(k);
        }
        Ok(pruned)
    }
}

/// Optimizer state shared by both methods.
struct Run<'p, 'a> {
    problem: &'p Problem<'a>,
    p: DMatrix<f64>,
    c: CoefficientVector,
    loss: LossComponents,
    best: f64,
    trace: Vec<TraceEntry>,
    pruning: Vec<PruneEvent>,
    stls: Stls,
}

impl Run<'_, '_> {
    fn record(&mut self, iteration: usize) {
        self.trace.push(TraceEntry {
            iteration,
            data: self.loss.data,
            physics: self.loss.physics,
            reg: self.loss.reg,
            sparse: self.loss.sparse,
            total: self.loss.total,
            active_terms: (0..self.c.len()).filter(|&k| self.c.active[k]).count(),
        });
    }

    fn check_divergence(&mut self, iteration: usize) -> Result<()> {
        if self.loss.total >= 10.0 * self.best && self.best > 0.0 {
            return Err(Error::Divergence {
                iteration,
                loss: self.loss.total,
                best: self.best,
            });
        }
        self.best = self.best.min(self.loss.total);
        Ok(())
    }

    /// Thresholding round. Returns whether anything was pruned.
    fn prune(&mut self, iteration: usize) -> Result<bool> {
        let pruned = self
            .stls
            .round(self.problem, &self.p, &mut self.c, iteration)?;
        if pruned.is_empty() {
            return Ok(false);
        }
        self.pruning.push(PruneEvent {
            iteration,
            terms: pruned
                .iter()
                .map(|&k| self.problem.lib.term(k).name().to_string())
                .collect(),
        });
        if self.c.free_indices().is_empty() {
            return Err(Error::EmptyModel);
        }
        self.loss = self.problem.loss(&self.p, &self.c)?;
        self.best = self.loss.total;
        Ok(true)
    }

    fn stalled(&self, opt: &OptimizerConfig) -> bool {
        let len = self.trace.len();
        if len <= opt.patience {
            return false;
        }
        let since = self.stls.last_round;
        let window = &self.trace[len - 1 - opt.patience..];
        if window[0].iteration < since {
            return false;
        }
        let old = window[0].total;
        let new = window[opt.patience].total;
        (old - new) <= opt.rel_tol * old.abs()
    }

    fn irls_weights(&self) -> Vec<f64> {
        let gamma = self.problem.weights.gamma;
        let free = self.c.free_indices();
        let max = free
            .iter()
            .map(|&k| self.c.values[k].abs())
            .fold(0.0, f64::max);
        if gamma == 0.0 || max == 0.0 {
            return vec![0.0; free.len()];
        }
        let floor = 1e-8 * max;
        free.iter()
            .map(|&k| gamma / (2.0 * self.c.values[k].abs().max(floor)))
            .collect()
    }

    fn apply(&self, dp: &[f64], dl: &[f64]) -> (DMatrix<f64>, CoefficientVector) {
        let n = self.problem.n;
        let mut p = self.p.clone();
        for j in 0..self.problem.ncp {
            for i in 0..n {
                p[(j, i)] += dp[j * n + i];
            }
        }
        let mut c = self.c.clone();
        for (f, k) in self.c.free_indices().into_iter().enumerate() {
            c.values[k] += dl[f];
        }
        (p, c)
    }
}

/// Fits a sparse Lagrangian to `dataset` over `lib`.
pub fn fit(
    dataset: &Dataset,
    lib: &CandidateLibrary,
    mode: Mode,
    config: &FitConfig,
) -> Result<FitReport> {
    let start = Instant::now();
    let t0 = dataset.t_meas.iter().copied().fold(f64::INFINITY, f64::min);
    let t1 = dataset
        .t_meas
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let ncp = config
        .control_points
        .unwrap_or_else(|| default_control_count(dataset.t_meas.len()));
    let kv = KnotVector::with_basis_count(t0, t1, ncp)?;
    let p0 = init_control_points(dataset, &kv)?;
    let problem = Problem::new(dataset, lib, &kv, config.weights)?;
    let c0 = CoefficientVector::new(lib.len(), mode)?;
    let c0 = match config.init {
        CoeffInit::Zeros => c0,
        CoeffInit::LeastSquares => problem.least_squares_coefficients(&p0, &c0)?,
    };
    fit_from(&problem, &kv, p0, c0, config, start)
}

/// Runs the optimizer from a given starting point.
pub fn fit_from(
    problem: &Problem<'_>,
    kv: &KnotVector,
    p0: DMatrix<f64>,
    c0: CoefficientVector,
    config: &FitConfig,
    start: Instant,
) -> Result<FitReport> {
    if config.stls.every == 0 {
        return Err(Error::Config(
            "thresholding interval must be positive".into(),
        ));
    }
    problem.check(&p0, &c0)?;
    let loss = problem.loss(&p0, &c0)?;
    let mut run = Run {
        problem,
        p: p0,
        c: c0,
        loss,
        best: loss.total,
        trace: Vec::new(),
        pruning: Vec::new(),
        stls: Stls {
            config: config.stls,
            last_round: 0,
        },
    };
    run.record(0);
    let (converged, reason, iterations) = match config.optimizer.kind {
        OptimizerKind::LevenbergMarquardt => levenberg_marquardt(&mut run, &config.optimizer)?,
        OptimizerKind::Adam => adam(&mut run, &config.optimizer)?,
    };
    let lib = problem.lib;
    Ok(FitReport {
        terms: lib.names(),
        expression: expression(lib, &run.c.values),
        coefficients: run.c,
        knots: kv.knots().to_vec(),
        control_points: (0..run.p.ncols())
            .map(|i| run.p.column(i).iter().copied().collect())
            .collect(),
        trace: run.trace,
        pruning: run.pruning,
        converged,
        stop_reason: reason,
        iterations,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Decides what to do after an iteration: `Some(reason)` to stop.
fn after_iteration(
    run: &mut Run<'_, '_>,
    opt: &OptimizerConfig,
    iteration: usize,
    stuck: bool,
) -> Result<Option<(bool, String)>> {
    if run.loss.total < opt.loss_tol {
        if !run.prune(iteration)? {
            return Ok(Some((true, "loss below tolerance".into())));
        }
        return Ok(None);
    }
    let settled = stuck || run.stalled(opt);
    if settled || iteration - run.stls.last_round >= run.stls.config.every {
        let pruned = run.prune(iteration)?;
        if settled && !pruned {
            return Ok(Some((true, "stationary with stable support".into())));
        }
    }
    Ok(None)
}

fn levenberg_marquardt(
    run: &mut Run<'_, '_>,
    opt: &OptimizerConfig,
) -> Result<(bool, String, usize)> {
    let mut mu = opt.lm_damping;
    for iteration in 1..=opt.max_iter {
        let normal = run.problem.assemble(&run.p, &run.c, true)?;
        let irls = run.irls_weights();
        let mut stuck = true;
        for _ in 0..30 {
            let (dp, dl) = match run.problem.lm_step(&normal, &irls, &run.c, mu) {
                Ok(step) => step,
                Err(Error::DegenerateConfiguration(_)) => {
                    mu *= 4.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (p, c) = run.apply(&dp, &dl);
            match run.problem.loss(&p, &c) {
                Ok(l) if l.total < run.loss.total => {
                    run.p = p;
                    run.c = c;
                    run.loss = l;
                    mu = (mu / 3.0).max(1e-15);
                    stuck = false;
                    break;
                }
                Ok(l) if l.total == run.loss.total => break,
                Ok(_) | Err(Error::LibraryEval { .. }) | Err(Error::NonFiniteLoss { .. }) => {
                    mu *= 4.0
                }
                Err(e) => return Err(e),
            }
            if mu > 1e16 {
                break;
            }
        }
        if stuck {
            mu = opt.lm_damping;
        }
        run.check_divergence(iteration)?;
        run.record(iteration);
        if let Some((converged, reason)) = after_iteration(run, opt, iteration, stuck)? {
            return Ok((converged, reason, iteration));
        }
    }
    Ok((false, "iteration limit".into(), opt.max_iter))
}

fn adam(run: &mut Run<'_, '_>, opt: &OptimizerConfig) -> Result<(bool, String, usize)> {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let np = run.p.len();
    let nl = run.c.len();
    let mut m = vec![0.0; np + nl];
    let mut v = vec![0.0; np + nl];
    let mut lr = opt.adam_lr;
    let mut plateau_best = run.loss.total;
    let mut plateau_count = 0usize;
    for iteration in 1..=opt.max_iter {
        let (gp, gl) = run.problem.gradient(&run.p, &run.c)?;
        let t = iteration as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (idx, g) in gp.iter().chain(gl.iter()).enumerate() {
            m[idx] = b1 * m[idx] + (1.0 - b1) * g;
            v[idx] = b2 * v[idx] + (1.0 - b2) * g * g;
            let step = lr * (m[idx] / c1) / ((v[idx] / c2).sqrt() + eps);
            if idx < np {
                run.p[idx] -= step;
            } else {
                let k = idx - np;
                if run.c.is_free(k) {
                    run.c.values[k] -= step;
                }
            }
        }
        run.loss = run.problem.loss(&run.p, &run.c)?;
        run.check_divergence(iteration)?;
        run.record(iteration);
        if run.loss.total < plateau_best * (1.0 - 1e-4) {
            plateau_best = run.loss.total;
            plateau_count = 0;
        } else {
            plateau_count += 1;
            if plateau_count >= 50 {
                lr *= opt.adam_decay;
                plateau_count = 0;
            }
        }
        let stuck = lr < 1e-8;
        if let Some((converged, reason)) = after_iteration(run, opt, iteration, stuck)? {
            return Ok((converged, reason, iteration));
        }
    }
    Ok((false, "iteration limit".into(), opt.max_iter))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expression_format() {
        let lib = CandidateLibrary::from_text("qd1^2\ncos(q1)\nsin(q1)\n").unwrap();
        assert_eq!(
            expression(&lib, &[0.5, -9.81, 0.0]),
            "L = 0.500000*qd1^2 - 9.810000*cos(q1)"
        );
        assert_eq!(expression(&lib, &[-1.0, 0.0, 0.0]), "L = -1.000000*qd1^2");
        assert_eq!(expression(&lib, &[0.0; 3]), "L = 0");
    }

    #[test]
    fn coefficient_vector_known_term() {
        let mut c = CoefficientVector::new(3, Mode::Passive { known: 1 }).unwrap();
        assert_eq!(c.values, vec![0.0, 1.0, 0.0]);
        assert_eq!(c.free_indices(), vec![0, 2]);
        c.prune(1);
        assert!(c.active[1]);
        c.prune(0);
        assert_eq!(c.free_indices(), vec![2]);
        assert!(CoefficientVector::new(2, Mode::Passive { known: 2 }).is_err());
    }
}
