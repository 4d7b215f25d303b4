//! Clamped cubic B-splines.
//!
//! Basis values come from the Cox–de Boor recursion evaluated on the single
//! knot span containing the parameter, so every evaluation touches at most
//! four basis functions. First and second derivatives are built from the
//! degree-2 and degree-1 values of the same recursion:
//!
//! ```text
//! N'_{i,3}  = 3/(u_{i+3}-u_i) N_{i,2} - 3/(u_{i+4}-u_{i+1}) N_{i+1,2}
//! N''_{i,3} = 6/((u_{i+3}-u_i)(u_{i+2}-u_i))         N_{i,1}
//!           - 6/((u_{i+3}-u_i)(u_{i+3}-u_{i+1}))     N_{i+1,1}
//!           - 6/((u_{i+4}-u_{i+1})(u_{i+3}-u_{i+1})) N_{i+1,1}
//!           + 6/((u_{i+4}-u_{i+1})(u_{i+4}-u_{i+2})) N_{i+2,1}
//! ```
//!
//! Any fraction whose denominator contains a zero-width span contributes 0.
//! At the right end of the domain the last non-degenerate span is treated as
//! closed, so the final basis function equals 1 there.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spline degree. Only cubics are supported.
pub const DEGREE: usize = 3;

/// Number of basis functions that can be nonzero at one parameter value.
pub const ORDER: usize = DEGREE + 1;

/// Smallest control-point count chosen by [`default_control_count`].
pub const MIN_CONTROL_POINTS: usize = 16;

/// One control point per two samples, floored at [`MIN_CONTROL_POINTS`].
pub fn default_control_count(n_samples: usize) -> usize {
    (n_samples / 2).max(MIN_CONTROL_POINTS)
}

/// A clamped knot vector for cubic splines.
///
/// Holds `s + 5` knots for `s + 1` basis functions: each boundary knot is
/// repeated four times and interior knots are strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct KnotVector {
    knots: Vec<f64>,
}

impl TryFrom<Vec<f64>> for KnotVector {
    type Error = Error;

    fn try_from(knots: Vec<f64>) -> Result<Self> {
        KnotVector::new(knots)
    }
}

impl From<KnotVector> for Vec<f64> {
    fn from(kv: KnotVector) -> Self {
        kv.knots
    }
}

impl KnotVector {
    /// Validates an explicit clamped cubic knot vector.
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 * ORDER {
            return Err(Error::InvalidDomain(format!(
                "a clamped cubic knot vector needs at least {} knots, got {}",
                2 * ORDER,
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidDomain("knots must be finite".into()));
        }
        let m = knots.len();
        let (lo, hi) = (knots[0], knots[m - 1]);
        if hi <= lo {
            return Err(Error::InvalidDomain(format!(
                "knot range [{lo}, {hi}] is empty"
            )));
        }
        let clamped_left = knots[..ORDER].iter().all(|&k| k == lo) && knots[ORDER] > lo;
        let clamped_right =
            knots[m - ORDER..].iter().all(|&k| k == hi) && knots[m - ORDER - 1] < hi;
        if !clamped_left || !clamped_right {
            return Err(Error::InvalidDomain(
                "boundary knots must have multiplicity exactly 4".into(),
            ));
        }
        let interior = &knots[ORDER - 1..=m - ORDER];
        if interior.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidDomain(
                "interior knots must be strictly increasing".into(),
            ));
        }
        Ok(Self { knots })
    }

    /// Uniform interior knots on `[t_start, t_end]` with clamped ends.
    ///
    /// The resulting basis has `n_interior + 4` functions.
    pub fn clamped_uniform(t_start: f64, t_end: f64, n_interior: usize) -> Result<Self> {
        if !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidDomain(format!(
                "non-finite bounds [{t_start}, {t_end}]"
            )));
        }
        if t_end <= t_start {
            return Err(Error::InvalidDomain(format!(
                "t_end ({t_end}) must exceed t_start ({t_start})"
            )));
        }
        let segments = n_interior + 1;
        let h = (t_end - t_start) / segments as f64;
        let mut knots = Vec::with_capacity(n_interior + 2 * ORDER);
        knots.extend(std::iter::repeat_n(t_start, ORDER));
        knots.extend((1..segments).map(|k| t_start + h * k as f64));
        knots.extend(std::iter::repeat_n(t_end, ORDER));
        Ok(Self { knots })
    }

    /// Clamped uniform knots giving exactly `count` basis functions.
    pub fn with_basis_count(t_start: f64, t_end: f64, count: usize) -> Result<Self> {
        if count < ORDER {
            return Err(Error::InvalidDomain(format!(
                "a cubic spline needs at least {ORDER} control points, got {count}"
            )));
        }
        Self::clamped_uniform(t_start, t_end, count - ORDER)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        DEGREE
    }

    /// Number of basis functions (`s + 1`).
    pub fn basis_count(&self) -> usize {
        self.knots.len() - ORDER
    }

    /// `(first knot, last knot)`.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Greville abscissae: the parameter each control point "sits" at.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.basis_count())
            .map(|i| (self.knots[i + 1] + self.knots[i + 2] + self.knots[i + 3]) / 3.0)
            .collect()
    }

    fn check(&self, u: f64, index: usize) -> Result<()> {
        let (lo, hi) = self.domain();
        if u.is_nan() || u < lo || u > hi {
            return Err(Error::OutOfDomain {
                index,
                value: u,
                lo,
                hi,
            });
        }
        Ok(())
    }

    /// Index `mu` with `u_mu <= u < u_{mu+1}`; the last span is closed.
    pub fn find_span(&self, u: f64) -> Result<usize> {
        self.check(u, 0)?;
        Ok(self.span_unchecked(u))
    }

    fn span_unchecked(&self, u: f64) -> usize {
        let last = self.basis_count() - 1;
        if u >= self.knots[last + 1] {
            return last;
        }
        // first index in [DEGREE, last] whose successor knot exceeds u
        let (mut lo, mut hi) = (DEGREE, last);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.knots[mid] <= u {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Values and derivatives of the four basis functions that can be
    /// nonzero at `u`.
    pub fn local(&self, u: f64) -> Result<LocalBasis> {
        self.check(u, 0)?;
        Ok(self.local_unchecked(u))
    }

    fn local_unchecked(&self, u: f64) -> LocalBasis {
        let mu = self.span_unchecked(u);
        let tab = self.cox_de_boor(mu, u);
        let k = &self.knots;
        let first = mu - DEGREE;

        // lower-degree values addressed by global basis index
        let n2 = |i: usize| -> f64 {
            if i + 2 >= mu && i <= mu {
                tab[2][i + 2 - mu]
            } else {
                0.0
            }
        };
        let n1 = |i: usize| -> f64 {
            if i + 1 >= mu && i <= mu {
                tab[1][i + 1 - mu]
            } else {
                0.0
            }
        };

        let mut out = LocalBasis {
            first,
            values: tab[3],
            d1: [0.0; ORDER],
            d2: [0.0; ORDER],
        };
        for (slot, i) in (first..=mu).enumerate() {
            out.d1[slot] =
                ratio(3.0, k[i + 3] - k[i]) * n2(i) - ratio(3.0, k[i + 4] - k[i + 1]) * n2(i + 1);
            out.d2[slot] = ratio2(6.0, k[i + 3] - k[i], k[i + 2] - k[i]) * n1(i)
                - ratio2(6.0, k[i + 3] - k[i], k[i + 3] - k[i + 1]) * n1(i + 1)
                - ratio2(6.0, k[i + 4] - k[i + 1], k[i + 3] - k[i + 1]) * n1(i + 1)
                + ratio2(6.0, k[i + 4] - k[i + 1], k[i + 4] - k[i + 2]) * n1(i + 2);
        }
        out
    }

    /// Triangular Cox–de Boor table on span `mu`:
    /// `tab[d][j] = N_{mu-d+j, d}(u)` for `j = 0..=d`.
    fn cox_de_boor(&self, mu: usize, u: f64) -> [[f64; ORDER]; ORDER] {
        let k = &self.knots;
        let mut tab = [[0.0; ORDER]; ORDER];
        tab[0][0] = 1.0;
        for d in 1..=DEGREE {
            for j in 0..=d {
                let i = mu + j - d;
                let left = if j >= 1 {
                    ratio(u - k[i], k[i + d] - k[i]) * tab[d - 1][j - 1]
                } else {
                    0.0
                };
                let right = if j < d {
                    ratio(k[i + d + 1] - u, k[i + d + 1] - k[i + 1]) * tab[d - 1][j]
                } else {
                    0.0
                };
                tab[d][j] = left + right;
            }
        }
        tab
    }

    fn scatter(&self, local: &LocalBasis, pick: impl Fn(&LocalBasis) -> [f64; ORDER]) -> Vec<f64> {
        let mut full = vec![0.0; self.basis_count()];
        full[local.first..local.first + ORDER].copy_from_slice(&pick(local));
        full
    }

    /// All `s + 1` basis values at `u`.
    pub fn eval_basis(&self, u: f64) -> Result<Vec<f64>> {
        let local = self.local(u)?;
        Ok(self.scatter(&local, |l| l.values))
    }

    /// All `s + 1` first derivatives at `u`.
    pub fn eval_basis_d1(&self, u: f64) -> Result<Vec<f64>> {
        let local = self.local(u)?;
        Ok(self.scatter(&local, |l| l.d1))
    }

    /// All `s + 1` second derivatives at `u`.
    pub fn eval_basis_d2(&self, u: f64) -> Result<Vec<f64>> {
        let local = self.local(u)?;
        Ok(self.scatter(&local, |l| l.d2))
    }
}

#[inline]
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[inline]
fn ratio2(num: f64, a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        num / (a * b)
    }
}

/// The four possibly-nonzero basis functions at one parameter value.
///
/// Slot `j` corresponds to global basis index `first + j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalBasis {
    pub first: usize,
    pub values: [f64; ORDER],
    pub d1: [f64; ORDER],
    pub d2: [f64; ORDER],
}

/// Basis values and derivatives sampled at a list of times.
///
/// Matrices are dense `times.len() × (s+1)`; each row has at most four
/// nonzeros starting at column `first[row]`.
#[derive(Debug, Clone)]
pub struct BasisMatrices {
    pub times: Vec<f64>,
    pub n: DMatrix<f64>,
    pub dn: DMatrix<f64>,
    pub ddn: DMatrix<f64>,
    first: Vec<usize>,
    local: Vec<LocalBasis>,
}

impl BasisMatrices {
    pub fn rows(&self) -> usize {
        self.times.len()
    }

    pub fn basis_count(&self) -> usize {
        self.n.ncols()
    }

    /// Column of the first nonzero in `row`.
    pub fn first(&self, row: usize) -> usize {
        self.first[row]
    }

    /// Compact form of `row`.
    pub fn local(&self, row: usize) -> &LocalBasis {
        &self.local[row]
    }
}

/// Evaluates the basis and its derivatives at every time in `times`.
pub fn assemble_matrices(kv: &KnotVector, times: &[f64]) -> Result<BasisMatrices> {
    let cols = kv.basis_count();
    let rows = times.len();
    let mut n = DMatrix::zeros(rows, cols);
    let mut dn = DMatrix::zeros(rows, cols);
    let mut ddn = DMatrix::zeros(rows, cols);
    let mut first = Vec::with_capacity(rows);
    let mut local = Vec::with_capacity(rows);
    for (r, &t) in times.iter().enumerate() {
        kv.check(t, r)?;
        let lb = kv.local_unchecked(t);
        for j in 0..ORDER {
            n[(r, lb.first + j)] = lb.values[j];
            dn[(r, lb.first + j)] = lb.d1[j];
            ddn[(r, lb.first + j)] = lb.d2[j];
        }
        first.push(lb.first);
        local.push(lb);
    }
    Ok(BasisMatrices {
        times: times.to_vec(),
        n,
        dn,
        ddn,
        first,
        local,
    })
}

/// Compact rows only: the four nonzeros of each basis row and their column
/// offset. Same errors as [`assemble_matrices`].
pub fn assemble_local(kv: &KnotVector, times: &[f64]) -> Result<Vec<LocalBasis>> {
    times
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            kv.check(t, r)?;
            Ok(kv.local_unchecked(t))
        })
        .collect()
}

/// Curve values and derivatives, each `N_t × n`.
#[derive(Debug, Clone)]
pub struct CurveSamples {
    pub q: DMatrix<f64>,
    pub qdot: DMatrix<f64>,
    pub qddot: DMatrix<f64>,
}

/// A cubic spline per degree of freedom sharing one knot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineModel {
    knots: KnotVector,
    /// `(s+1) × n`; column `i` holds the control points of DOF `i`.
    control: DMatrix<f64>,
}

impl SplineModel {
    pub fn new(knots: KnotVector, control: DMatrix<f64>) -> Result<Self> {
        if control.nrows() != knots.basis_count() {
            return Err(Error::Dimension(format!(
                "control matrix has {} rows but the knot vector defines {} basis functions",
                control.nrows(),
                knots.basis_count()
            )));
        }
        if control.ncols() == 0 {
            return Err(Error::Dimension("control matrix has no columns".into()));
        }
        Ok(Self { knots, control })
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn control(&self) -> &DMatrix<f64> {
        &self.control
    }

    pub fn control_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.control
    }

    pub fn dof(&self) -> usize {
        self.control.ncols()
    }

    /// `q = N P`, `q̇ = Ṅ P`, `q̈ = N̈ P`.
    pub fn eval_curve(&self, basis: &BasisMatrices) -> Result<CurveSamples> {
        if basis.basis_count() != self.control.nrows() {
            return Err(Error::Dimension(format!(
                "basis has {} columns, model has {} control points",
                basis.basis_count(),
                self.control.nrows()
            )));
        }
        let rows = basis.rows();
        let n = self.dof();
        let mut q = DMatrix::zeros(rows, n);
        let mut qdot = DMatrix::zeros(rows, n);
        let mut qddot = DMatrix::zeros(rows, n);
        for r in 0..rows {
            let lb = basis.local(r);
            for i in 0..n {
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for j in 0..ORDER {
                    let p = self.control[(lb.first + j, i)];
                    a += lb.values[j] * p;
                    b += lb.d1[j] * p;
                    c += lb.d2[j] * p;
                }
                q[(r, i)] = a;
                qdot[(r, i)] = b;
                qddot[(r, i)] = c;
            }
        }
        Ok(CurveSamples { q, qdot, qddot })
    }

    /// Same as [`SplineModel::eval_curve`] on compact rows.
    pub fn eval_local(&self, rows: &[LocalBasis]) -> Result<CurveSamples> {
        let n = self.dof();
        let mut q = DMatrix::zeros(rows.len(), n);
        let mut qdot = DMatrix::zeros(rows.len(), n);
        let mut qddot = DMatrix::zeros(rows.len(), n);
        for (r, lb) in rows.iter().enumerate() {
            if lb.first + ORDER > self.control.nrows() {
                return Err(Error::Dimension(format!(
                    "basis row {r} reaches column {} but the model has {} control points",
                    lb.first + ORDER,
                    self.control.nrows()
                )));
            }
            for i in 0..n {
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for j in 0..ORDER {
                    let p = self.control[(lb.first + j, i)];
                    a += lb.values[j] * p;
                    b += lb.d1[j] * p;
                    c += lb.d2[j] * p;
                }
                q[(r, i)] = a;
                qdot[(r, i)] = b;
                qddot[(r, i)] = c;
            }
        }
        Ok(CurveSamples { q, qdot, qddot })
    }

    /// Value and derivatives at a single parameter.
    pub fn eval_at(&self, u: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let lb = self.knots.local(u)?;
        let n = self.dof();
        let mut out = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            for j in 0..ORDER {
                let p = self.control[(lb.first + j, i)];
                out.0[i] += lb.values[j] * p;
                out.1[i] += lb.d1[j] * p;
                out.2[i] += lb.d2[j] * p;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bezier() -> KnotVector {
        KnotVector::clamped_uniform(0.0, 1.0, 0).unwrap()
    }

    #[test]
    fn single_segment_knots() {
        let kv = bezier();
        assert_eq!(kv.knots(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(kv.basis_count(), 4);
    }

    #[test]
    fn one_interior_knot() {
        let kv = KnotVector::clamped_uniform(0.0, 2.0, 1).unwrap();
        assert_eq!(kv.knots(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        assert_eq!(kv.basis_count(), 5);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(matches!(
            KnotVector::clamped_uniform(1.0, 1.0, 3),
            Err(Error::InvalidDomain(_))
        ));
        assert!(matches!(
            KnotVector::clamped_uniform(0.0, f64::INFINITY, 3),
            Err(Error::InvalidDomain(_))
        ));
        assert!(KnotVector::new(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(KnotVector::new(vec![0., 0., 0., 0., 0.5, 0.5, 1., 1., 1., 1.]).is_err());
    }

    #[test]
    fn bezier_endpoint_and_midpoint() {
        let kv = bezier();
        assert_eq!(kv.eval_basis(0.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(kv.eval_basis(1.0).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        let mid = kv.eval_basis(0.5).unwrap();
        for (got, want) in mid.iter().zip([0.125, 0.375, 0.375, 0.125]) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn bezier_derivatives_at_zero() {
        let kv = bezier();
        assert_eq!(kv.eval_basis_d1(0.0).unwrap(), vec![-3.0, 3.0, 0.0, 0.0]);
        assert_eq!(kv.eval_basis_d2(0.0).unwrap(), vec![6.0, -12.0, 6.0, 0.0]);
    }

    #[test]
    fn out_of_range_parameter() {
        let kv = bezier();
        assert!(matches!(kv.eval_basis(1.5), Err(Error::OutOfDomain { .. })));
        assert!(matches!(
            kv.eval_basis_d2(-1e-9),
            Err(Error::OutOfDomain { .. })
        ));
        let err = assemble_matrices(&kv, &[0.1, 0.2, 2.0]).unwrap_err();
        assert!(matches!(err, Error::OutOfDomain { index: 2, .. }));
    }

    #[test]
    fn matrices_at_endpoints() {
        let kv = KnotVector::clamped_uniform(0.0, 20.0, 12).unwrap();
        let b = assemble_matrices(&kv, &[0.0, 20.0, 3.3, 3.3]).unwrap();
        assert_eq!(b.n[(0, 0)], 1.0);
        assert_eq!(b.n[(1, kv.basis_count() - 1)], 1.0);
        assert_eq!(b.n.row(2), b.n.row(3));
        assert_eq!(b.ddn.row(2), b.ddn.row(3));
    }

    #[test]
    fn constant_curve() {
        let kv = KnotVector::clamped_uniform(0.0, 5.0, 6).unwrap();
        let model =
            SplineModel::new(kv.clone(), DMatrix::from_element(kv.basis_count(), 2, 1.7)).unwrap();
        let times: Vec<f64> = (0..=50).map(|k| k as f64 * 0.1).collect();
        let b = assemble_matrices(&kv, &times).unwrap();
        let c = model.eval_curve(&b).unwrap();
        for v in c.q.iter() {
            assert_relative_eq!(*v, 1.7, epsilon = 1e-12);
        }
        assert!(c.qdot.iter().all(|v| v.abs() < 1e-10));
        assert!(c.qddot.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn linear_precision_on_greville_points() {
        let kv = KnotVector::clamped_uniform(-1.0, 3.0, 9).unwrap();
        let g = kv.greville();
        let control = DMatrix::from_fn(g.len(), 1, |r, _| 2.0 - 0.75 * g[r]);
        let model = SplineModel::new(kv.clone(), control).unwrap();
        let times: Vec<f64> = (0..=400).map(|k| -1.0 + k as f64 * 0.01).collect();
        let b = assemble_matrices(&kv, &times).unwrap();
        let c = model.eval_curve(&b).unwrap();
        for (r, t) in times.iter().enumerate() {
            assert!((c.q[(r, 0)] - (2.0 - 0.75 * t)).abs() < 1e-10);
            assert!((c.qdot[(r, 0)] + 0.75).abs() < 1e-10);
            assert!(c.qddot[(r, 0)].abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch() {
        let kv = KnotVector::clamped_uniform(0.0, 1.0, 2).unwrap();
        assert!(SplineModel::new(kv.clone(), DMatrix::zeros(5, 1)).is_err());
        let other = KnotVector::clamped_uniform(0.0, 1.0, 3).unwrap();
        let b = assemble_matrices(&other, &[0.5]).unwrap();
        let model = SplineModel::new(kv, DMatrix::zeros(6, 1)).unwrap();
        assert!(matches!(model.eval_curve(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn basis_count_formula() {
        let kv = KnotVector::clamped_uniform(0.0, 20.0, 97).unwrap();
        assert_eq!(kv.basis_count(), 101);
        assert_eq!(kv.knots().len(), 101 + DEGREE + 1);
    }
}
