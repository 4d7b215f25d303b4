//! Symmetric positive-definite banded matrices and their Cholesky factors.
//!
//! Spline normal equations couple only control points whose supports
//! overlap, so they are banded with half-bandwidth `4n - 1` when control
//! points of the `n` coordinates are interleaved.

use crate::error::{Error, Result};

/// Lower-band storage: entry `(i, i - k)` lives at `data[i * (kd + 1) + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedSpd {
    n: usize,
    kd: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, kd: usize) -> Self {
        Self {
            n,
            kd,
            data: vec![0.0; n * (kd + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.kd
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= j && i - j <= self.kd);
        i * (self.kd + 1) + (i - j)
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.kd {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to the symmetric pair `(i, j)` / `(j, i)`.
    ///
    /// Panics if `(i, j)` is outside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.kd, "({i}, {j}) outside band {}", self.kd);
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.data[i * (self.kd + 1)]
    }

    pub fn add_diag(&mut self, i: usize, v: f64) {
        self.data[i * (self.kd + 1)] += v;
    }

    /// Elementwise sum with another matrix of the same shape.
    pub fn accumulate(&mut self, other: &BandedSpd) {
        assert_eq!((self.n, self.kd), (other.n, other.kd));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kd);
            for j in lo..i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += self.diag(i) * x[i];
        }
        y
    }

    /// In-place band Cholesky `A = L Lᵀ`.
    pub fn cholesky(mut self) -> Result<BandedCholesky> {
        let (n, kd) = (self.n, self.kd);
        let w = kd + 1;
        for j in 0..n {
            let lo = j.saturating_sub(kd);
            let mut d = self.data[j * w];
            for k in lo..j {
                let l = self.data[j * w + (j - k)];
                d -= l * l;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::DegenerateConfiguration(format!(
                    "banded matrix is not positive definite at pivot {j} ({d:e})"
                )));
            }
            let d = d.sqrt();
            self.data[j * w] = d;
            for i in j + 1..(j + kd + 1).min(n) {
                let lo = i.saturating_sub(kd);
                let mut s = self.data[i * w + (i - j)];
                for k in lo..j {
                    s -= self.data[i * w + (i - k)] * self.data[j * w + (j - k)];
                }
                self.data[i * w + (i - j)] = s / d;
            }
        }
        Ok(BandedCholesky { factor: self })
    }
}

/// Lower-triangular band factor produced by [`BandedSpd::cholesky`].
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    factor: BandedSpd,
}

impl BandedCholesky {
    pub fn dim(&self) -> usize {
        self.factor.n
    }

    /// Overwrites `b` with `A⁻¹ b`.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let f = &self.factor;
        let (n, kd, w) = (f.n, f.kd, f.kd + 1);
        assert_eq!(b.len(), n);
        for i in 0..n {
            let lo = i.saturating_sub(kd);
            let mut s = b[i];
            for k in lo..i {
                s -= f.data[i * w + (i - k)] * b[k];
            }
            b[i] = s / f.data[i * w];
        }
        for i in (0..n).rev() {
            let hi = (i + kd + 1).min(n);
            let mut s = b[i];
            for k in i + 1..hi {
                s -= f.data[k * w + (k - i)] * b[k];
            }
            b[i] = s / f.data[i * w];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn random_banded(n: usize, kd: usize, seed: u64) -> (BandedSpd, DMatrix<f64>) {
        let mut state = seed;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut a = BandedSpd::zeros(n, kd);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(kd)..i {
                let v = next();
                a.add(i, j, v);
                dense[(i, j)] += v;
                dense[(j, i)] += v;
            }
            let d = 2.0 * kd as f64 + 1.0 + next();
            a.add_diag(i, d);
            dense[(i, i)] += d;
        }
        (a, dense)
    }

    #[test]
    fn solve_matches_dense() {
        let (a, dense) = random_banded(40, 5, 7);
        let b: Vec<f64> = (0..40).map(|k| (k as f64 * 0.37).sin()).collect();
        let x = a.clone().cholesky().unwrap().solve(&b);
        let want = dense.lu().solve(&DVector::from_vec(b.clone())).unwrap();
        for (g, w) in x.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        let back = a.mul_vec(&x);
        for (g, w) in back.iter().zip(&b) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_is_rejected() {
        let mut a = BandedSpd::zeros(3, 1);
        a.add_diag(0, 1.0);
        a.add(1, 0, 2.0);
        a.add_diag(1, 1.0);
        a.add_diag(2, 1.0);
        assert!(a.cholesky().is_err());
    }

    #[test]
    #[should_panic]
    fn add_outside_band_panics() {
        let mut a = BandedSpd::zeros(5, 1);
        a.add(3, 0, 1.0);
    }
}
