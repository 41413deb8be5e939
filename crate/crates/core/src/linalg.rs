//! Scalar abstraction and the Krylov solvers used by every PDE solve.
//!
//! Operators are passed as closures `op(x, y)` writing `y = A x`. Vectors are
//! plain slices over the full lattice of a carrier; rows that belong to the
//! Dirichlet boundary are kept at zero by the operators themselves.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub trait Scalar:
    Copy
    + Send
    + Sync
    + Debug
    + PartialEq
    + Default
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn conj(self) -> Self;
    fn re(self) -> f64;
    fn abs_sqr(self) -> f64;
    fn is_finite(self) -> bool;
    fn scale(self, s: f64) -> Self;

    fn abs(self) -> f64 {
        self.abs_sqr().sqrt()
    }
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn conj(self) -> Self {
        self
    }
    fn re(self) -> f64 {
        self
    }
    fn abs_sqr(self) -> f64 {
        self * self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn conj(self) -> Self {
        Complex64::conj(&self)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn abs_sqr(self) -> f64 {
        self.norm_sqr()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
}

/// `sum conj(a_i) b_i`
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += x.conj() * *y;
    }
    s
}

pub fn norm<T: Scalar>(a: &[T]) -> f64 {
    a.iter().map(|x| x.abs_sqr()).sum::<f64>().sqrt()
}

/// `y += alpha x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final relative residual `||b - A x|| / ||b||`.
    pub residual: f64,
}

fn true_residual<T: Scalar, F>(op: &F, b: &[T], x: &[T], r: &mut [T]) -> f64
where
    F: Fn(&[T], &mut [T]),
{
    op(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = *bi - *ri;
    }
    norm(r)
}

/// Conjugate gradients for Hermitian positive definite operators.
///
/// `x` holds the initial guess on entry and the solution on exit.
pub fn cg<T: Scalar, F>(op: F, b: &[T], x: &mut [T], tol: f64, max_iter: usize) -> Result<SolveStats>
where
    F: Fn(&[T], &mut [T]),
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = T::zero());
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let mut r = vec![T::zero(); n];
    let mut rnorm = true_residual(&op, b, x, &mut r);
    if rnorm <= tol * bnorm {
        return Ok(SolveStats { iterations: 0, residual: rnorm / bnorm });
    }
    let mut p = r.clone();
    let mut ap = vec![T::zero(); n];
    let mut rr = dot(&r, &r).re();
    for it in 1..=max_iter {
        op(&p, &mut ap);
        let pap = dot(&p, &ap).re();
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::NonConvergence {
                solver: "cg (operator not positive definite)",
                iterations: it,
                residual: rnorm / bnorm,
            });
        }
        let alpha = T::from_f64(rr / pap);
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r).re();
        rnorm = rr_new.sqrt();
        if rnorm <= tol * bnorm {
            // guard against drift of the recursive residual
            let check = true_residual(&op, b, x, &mut r);
            if check <= 10.0 * tol * bnorm {
                return Ok(SolveStats { iterations: it, residual: check / bnorm });
            }
            rr = dot(&r, &r).re();
            p.copy_from_slice(&r);
            continue;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = *ri + pi.scale(beta);
        }
    }
    Err(Error::NonConvergence { solver: "cg", iterations: max_iter, residual: rnorm / bnorm })
}

/// BiCGSTAB for general (non-Hermitian) operators.
pub fn bicgstab<T: Scalar, F>(
    op: F,
    b: &[T],
    x: &mut [T],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats>
where
    F: Fn(&[T], &mut [T]),
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = T::zero());
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let mut r = vec![T::zero(); n];
    let mut rnorm = true_residual(&op, b, x, &mut r);
    if rnorm <= tol * bnorm {
        return Ok(SolveStats { iterations: 0, residual: rnorm / bnorm });
    }
    let mut r_hat = r.clone();
    let mut rho = T::one();
    let mut alpha = T::one();
    let mut omega = T::one();
    let mut v = vec![T::zero(); n];
    let mut p = vec![T::zero(); n];
    let mut s = vec![T::zero(); n];
    let mut t = vec![T::zero(); n];
    let tiny = 1e-300;

    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < tiny * bnorm * bnorm || omega.abs() < tiny {
            // breakdown: restart the shadow residual
            true_residual(&op, b, x, &mut r);
            r_hat.copy_from_slice(&r);
            rho = T::one();
            alpha = T::one();
            omega = T::one();
            v.iter_mut().for_each(|z| *z = T::zero());
            p.iter_mut().for_each(|z| *z = T::zero());
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        op(&p, &mut v);
        let rv = dot(&r_hat, &v);
        if rv.abs() < tiny {
            true_residual(&op, b, x, &mut r);
            r_hat.copy_from_slice(&r);
            rho = T::one();
            alpha = T::one();
            omega = T::one();
            continue;
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        let snorm = norm(&s);
        if snorm <= tol * bnorm {
            axpy(alpha, &p, x);
            let check = true_residual(&op, b, x, &mut r);
            if check <= 10.0 * tol * bnorm {
                return Ok(SolveStats { iterations: it, residual: check / bnorm });
            }
            continue;
        }
        op(&s, &mut t);
        let tt = dot(&t, &t).re();
        omega = if tt > 0.0 { dot(&t, &s) / T::from_f64(tt) } else { T::zero() };
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        rnorm = norm(&r);
        if !rnorm.is_finite() {
            break;
        }
        if rnorm <= tol * bnorm {
            let check = true_residual(&op, b, x, &mut r);
            if check <= 10.0 * tol * bnorm {
                return Ok(SolveStats { iterations: it, residual: check / bnorm });
            }
            rnorm = check;
        }
    }
    Err(Error::NonConvergence { solver: "bicgstab", iterations: max_iter, residual: rnorm / bnorm })
}

/// Restarted GMRES(m) with modified Gram-Schmidt and Givens rotations.
pub fn gmres<T: Scalar, F>(
    op: F,
    b: &[T],
    x: &mut [T],
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<SolveStats>
where
    F: Fn(&[T], &mut [T]),
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = T::zero());
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let m = restart.max(1);
    let mut r = vec![T::zero(); n];
    let mut w = vec![T::zero(); n];
    let mut total = 0usize;
    let mut rnorm = true_residual(&op, b, x, &mut r);
    while total < max_iter {
        if rnorm <= tol * bnorm {
            return Ok(SolveStats { iterations: total, residual: rnorm / bnorm });
        }
        let mut basis: Vec<Vec<T>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v.scale(1.0 / rnorm)).collect());
        let mut hess = vec![vec![T::zero(); m]; m + 1];
        let mut cs = vec![T::zero(); m];
        let mut sn = vec![T::zero(); m];
        let mut g = vec![T::zero(); m + 1];
        g[0] = T::from_f64(rnorm);
        let mut k_used = 0;
        for k in 0..m {
            op(&basis[k], &mut w);
            for (j, vj) in basis.iter().enumerate() {
                let hjk = dot(vj, &w);
                hess[j][k] = hjk;
                axpy(-hjk, vj, &mut w);
            }
            let wn = norm(&w);
            hess[k + 1][k] = T::from_f64(wn);
            for j in 0..k {
                let a = hess[j][k];
                let c = hess[j + 1][k];
                hess[j][k] = cs[j].conj() * a + sn[j].conj() * c;
                hess[j + 1][k] = -sn[j] * a + cs[j] * c;
            }
            let a = hess[k][k];
            let c = hess[k + 1][k];
            let denom = (a.abs_sqr() + c.abs_sqr()).sqrt();
            if denom == 0.0 {
                cs[k] = T::one();
                sn[k] = T::zero();
            } else {
                cs[k] = a.scale(1.0 / denom);
                sn[k] = c.scale(1.0 / denom);
            }
            hess[k][k] = cs[k].conj() * a + sn[k].conj() * c;
            hess[k + 1][k] = T::zero();
            let gk = g[k];
            g[k] = cs[k].conj() * gk;
            g[k + 1] = -sn[k] * gk;
            k_used = k + 1;
            total += 1;
            if g[k + 1].abs() <= tol * bnorm || wn == 0.0 || total >= max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v.scale(1.0 / wn)).collect());
        }
        // back substitution
        let mut y = vec![T::zero(); k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in (i + 1)..k_used {
                acc -= hess[i][j] * y[j];
            }
            y[i] = acc / hess[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            axpy(*yj, &basis[j], x);
        }
        rnorm = true_residual(&op, b, x, &mut r);
        if !rnorm.is_finite() {
            break;
        }
    }
    if rnorm <= tol * bnorm {
        return Ok(SolveStats { iterations: total, residual: rnorm / bnorm });
    }
    Err(Error::NonConvergence { solver: "gmres", iterations: total, residual: rnorm / bnorm })
}

/// Dense LU factorization with partial pivoting; `a` is row-major `n x n`.
pub fn dense_solve<T: Scalar>(mut a: Vec<T>, n: usize, mut b: Vec<T>) -> Result<Vec<T>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs_sqr();
        for row in (col + 1)..n {
            let v = a[row * n + col].abs_sqr();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 {
            return Err(Error::InvalidArgument("singular matrix in dense solve".into()));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for row in (col + 1)..n {
            let f = a[row * n + col] / d;
            if f == T::zero() {
                continue;
            }
            a[row * n + col] = f;
            for j in (col + 1)..n {
                let u = a[col * n + j];
                a[row * n + j] -= f * u;
            }
            let bc = b[col];
            b[row] -= f * bc;
        }
    }
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in (row + 1)..n {
            acc -= a[row * n + j] * b[j];
        }
        b[row] = acc / a[row * n + row];
    }
    Ok(b)
}

/// Spectral norm of a column-major `rows x cols` real matrix by power
/// iteration on `A^T A`.
pub fn spectral_norm(data: &[f64], rows: usize, cols: usize, tol: f64, max_iter: usize) -> f64 {
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut x: Vec<f64> = (0..cols).map(|j| 1.0 + 1e-3 * (j as f64 + 1.0).sqrt()).collect();
    let mut y = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if xn == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= xn);
        y.iter_mut().for_each(|v| *v = 0.0);
        for (j, xj) in x.iter().enumerate() {
            if *xj != 0.0 {
                let col = &data[j * rows..(j + 1) * rows];
                for (yi, aij) in y.iter_mut().zip(col) {
                    *yi += aij * xj;
                }
            }
        }
        let s_new = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, xj) in x.iter_mut().enumerate() {
            let col = &data[j * rows..(j + 1) * rows];
            *xj = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        }
        if (s_new - sigma).abs() <= tol * s_new.max(f64::MIN_POSITIVE) {
            return s_new;
        }
        sigma = s_new;
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize, shift: f64) -> impl Fn(&[f64], &mut [f64]) {
        move |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let mut v = (2.0 + shift) * x[i];
                if i > 0 {
                    v -= x[i - 1];
                }
                if i + 1 < n {
                    v -= x[i + 1];
                }
                y[i] = v;
            }
        }
    }

    #[test]
    fn cg_solves_spd_tridiagonal() {
        let n = 50;
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut x = vec![0.0; n];
        let st = cg(tridiag(n, 0.1), &b, &mut x, 1e-12, 500).unwrap();
        assert!(st.residual <= 1e-11);
    }

    #[test]
    fn krylov_solvers_agree_with_dense_lu_on_complex_system() {
        let n = 30;
        let op = move |x: &[Complex64], y: &mut [Complex64]| {
            for i in 0..n {
                let mut v = Complex64::new(3.0, 0.5) * x[i];
                if i > 0 {
                    v -= Complex64::new(1.0, 0.2) * x[i - 1];
                }
                if i + 1 < n {
                    v -= Complex64::new(0.7, -0.1) * x[i + 1];
                }
                y[i] = v;
            }
        };
        let b: Vec<Complex64> = (0..n).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let mut dense = vec![Complex64::zero(); n * n];
        let mut e = vec![Complex64::zero(); n];
        let mut col = vec![Complex64::zero(); n];
        for j in 0..n {
            e[j] = Complex64::one();
            op(&e, &mut col);
            e[j] = Complex64::zero();
            for i in 0..n {
                dense[i * n + j] = col[i];
            }
        }
        let xd = dense_solve(dense, n, b.clone()).unwrap();
        let mut xb = vec![Complex64::zero(); n];
        bicgstab(op, &b, &mut xb, 1e-13, 1000).unwrap();
        let mut xg = vec![Complex64::zero(); n];
        gmres(op, &b, &mut xg, 1e-13, 20, 1000).unwrap();
        for i in 0..n {
            assert!((xd[i] - xb[i]).norm() < 1e-9);
            assert!((xd[i] - xg[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let mut x = vec![1.0; 5];
        let st = cg(tridiag(5, 0.0), &[0.0; 5], &mut x, 1e-12, 10).unwrap();
        assert_eq!(st.iterations, 0);
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        // 3x2 column-major with singular values 4 and 1
        let data = vec![4.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let s = spectral_norm(&data, 3, 2, 1e-14, 1000);
        assert!((s - 4.0).abs() < 1e-10);
    }
}
