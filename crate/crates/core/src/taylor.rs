//! Truncated third-order multivariate Taylor arithmetic.
//!
//! A [`Taylor3`] carries a value together with its gradient, Hessian and
//! third-derivative tensor with respect to a handful of local variables.
//! Candidate terms are products of one- and two-variable factors, so every
//! term is differentiated in its own small variable set and scattered into
//! the global coordinate layout afterwards.

/// Largest number of distinct variables a single term may depend on.
pub const MAX_VARS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taylor3 {
    pub dim: usize,
    /// When false the third-derivative tensor is not propagated.
    pub third: bool,
    pub v: f64,
    pub g: [f64; MAX_VARS],
    pub h: [[f64; MAX_VARS]; MAX_VARS],
    pub t: [[[f64; MAX_VARS]; MAX_VARS]; MAX_VARS],
}

impl Taylor3 {
    pub fn constant(value: f64, dim: usize) -> Self {
        debug_assert!(dim <= MAX_VARS);
        Self {
            dim,
            third: true,
            v: value,
            g: [0.0; MAX_VARS],
            h: [[0.0; MAX_VARS]; MAX_VARS],
            t: [[[0.0; MAX_VARS]; MAX_VARS]; MAX_VARS],
        }
    }

    /// The coordinate function `x_index` evaluated at `value`.
    pub fn variable(value: f64, index: usize, dim: usize) -> Self {
        let mut out = Self::constant(value, dim);
        out.g[index] = 1.0;
        out
    }

    /// Same value, propagating only up to second order.
    pub fn second_order(mut self) -> Self {
        self.third = false;
        self
    }

    pub fn add_const(mut self, c: f64) -> Self {
        self.v += c;
        self
    }

    pub fn sub(&self, o: &Self) -> Self {
        let d = self.dim;
        let mut out = *self;
        out.v -= o.v;
        for i in 0..d {
            out.g[i] -= o.g[i];
            for j in 0..d {
                out.h[i][j] -= o.h[i][j];
                for k in 0..d {
                    out.t[i][j][k] -= o.t[i][j][k];
                }
            }
        }
        out
    }

    pub fn add(&self, o: &Self) -> Self {
        let d = self.dim;
        let mut out = *self;
        out.v += o.v;
        for i in 0..d {
            out.g[i] += o.g[i];
            for j in 0..d {
                out.h[i][j] += o.h[i][j];
                for k in 0..d {
                    out.t[i][j][k] += o.t[i][j][k];
                }
            }
        }
        out
    }

    /// Leibniz rule up to third order.
    pub fn mul(&self, b: &Self) -> Self {
        let a = self;
        let d = a.dim;
        let mut out = Self::constant(a.v * b.v, d);
        out.third = a.third && b.third;
        for i in 0..d {
            out.g[i] = a.g[i] * b.v + a.v * b.g[i];
        }
        for i in 0..d {
            for j in i..d {
                let hij = a.h[i][j] * b.v + a.g[i] * b.g[j] + a.g[j] * b.g[i] + a.v * b.h[i][j];
                out.h[i][j] = hij;
                out.h[j][i] = hij;
            }
        }
        if !out.third {
            return out;
        }
        for i in 0..d {
            for j in i..d {
                for k in j..d {
                    let tv = a.t[i][j][k] * b.v
                        + a.h[i][j] * b.g[k]
                        + a.h[i][k] * b.g[j]
                        + a.h[j][k] * b.g[i]
                        + a.g[i] * b.h[j][k]
                        + a.g[j] * b.h[i][k]
                        + a.g[k] * b.h[i][j]
                        + a.v * b.t[i][j][k];
                    out.set_t(i, j, k, tv);
                }
            }
        }
        out
    }

    /// `f(self)` given `[f, f', f'', f''']` at `self.v`.
    pub fn compose(&self, f: [f64; 4]) -> Self {
        let u = self;
        let d = u.dim;
        let mut out = Self::constant(f[0], d);
        out.third = u.third;
        for i in 0..d {
            out.g[i] = f[1] * u.g[i];
        }
        for i in 0..d {
            for j in i..d {
                let hij = f[2] * u.g[i] * u.g[j] + f[1] * u.h[i][j];
                out.h[i][j] = hij;
                out.h[j][i] = hij;
            }
        }
        if !out.third {
            return out;
        }
        for i in 0..d {
            for j in i..d {
                for k in j..d {
                    let tv = f[3] * u.g[i] * u.g[j] * u.g[k]
                        + f[2] * (u.h[i][j] * u.g[k] + u.h[i][k] * u.g[j] + u.h[j][k] * u.g[i])
                        + f[1] * u.t[i][j][k];
                    out.set_t(i, j, k, tv);
                }
            }
        }
        out
    }

    fn set_t(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.t[i][j][k] = v;
        self.t[i][k][j] = v;
        self.t[j][i][k] = v;
        self.t[j][k][i] = v;
        self.t[k][i][j] = v;
        self.t[k][j][i] = v;
    }

    pub fn sin(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.compose([s, c, -s, -c])
    }

    pub fn cos(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.compose([c, -s, -c, s])
    }

    pub fn powi(&self, n: u32) -> Self {
        match n {
            0 => Self {
                third: self.third,
                ..Self::constant(1.0, self.dim)
            },
            1 => *self,
            _ => self.compose(powi_derivs(self.v, n)),
        }
    }

    /// `self^(-1/2)`; caller guarantees `self.v > 0`.
    pub fn rsqrt(&self) -> Self {
        let x = self.v;
        let r = 1.0 / x.sqrt();
        let r3 = r / x;
        let r5 = r3 / x;
        let r7 = r5 / x;
        self.compose([r, -0.5 * r3, 0.75 * r5, -1.875 * r7])
    }
}

/// `[x^n, n x^(n-1), n(n-1) x^(n-2), n(n-1)(n-2) x^(n-3)]` without
/// evaluating negative powers.
pub fn powi_derivs(x: f64, n: u32) -> [f64; 4] {
    let mut out = [0.0; 4];
    let mut coef = 1.0;
    for (order, slot) in out.iter_mut().enumerate() {
        let order = order as u32;
        if order > n {
            break;
        }
        *slot = coef * x.powi((n - order) as i32);
        coef *= (n - order) as f64;
    }
    out
}
