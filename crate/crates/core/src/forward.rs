//! Dirichlet problems on the unit box: harmonic extension, linear
//! Schrodinger solves and the semilinear problem `-Delta u + a(u) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{apply_schrodinger, BoundaryField, Carrier, Field, Grid};
use crate::linalg::{self, Scalar};
use crate::nonlinearity::{validate_class, Nonlinearity, SamplingPlan};

/// Stopping rules and limits for forward solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    /// Relative residual target `||-Delta u + a(u)|| <= tol (1 + ||u||)`.
    pub tol: f64,
    pub max_picard: usize,
    /// Picard damping `theta` in `(0, 1]`.
    pub damping: f64,
    pub newton_fallback: bool,
    pub max_newton: usize,
    /// Relative residual for every inner linear solve.
    pub linear_tol: f64,
    pub max_linear_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_picard: 200,
            damping: 0.7,
            newton_fallback: true,
            max_newton: 50,
            linear_tol: 1e-12,
            max_linear_iter: 20_000,
        }
    }
}

impl SolveOptions {
    fn check(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.linear_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping {} outside (0, 1]", self.damping)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Picard,
    Newton,
}

/// Convergence record of a semilinear solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemilinearReport {
    pub method: Method,
    pub picard_iterations: usize,
    pub newton_iterations: usize,
    /// Residual norm at every outer iterate, Picard first then Newton.
    pub residual_history: Vec<f64>,
    pub final_residual: f64,
}

/// Grid L2 norm over interior nodes (`sum h^n r_i^2`).
pub fn interior_norm<T: Scalar>(grid: &Grid, r: &[T]) -> f64 {
    let w = grid.spacing().powi(grid.dim() as i32);
    grid.interior_nodes().iter().map(|&i| r[i].abs_sqr()).sum::<f64>().sqrt() * w.sqrt()
}

/// Solves `(-Delta_h + q) u = rhs` at interior nodes with `u = lift` on the
/// boundary. `rhs` is read at interior nodes only.
pub(crate) fn dirichlet_solve<T: Scalar>(
    grid: &Grid,
    q: Option<&[f64]>,
    rhs: Option<&[T]>,
    lift: &[T],
    opts: &SolveOptions,
) -> Result<Vec<T>> {
    let lat = grid.lattice(Carrier::Omega);
    let h = grid.spacing();
    let mut b = vec![T::zero(); lat.len()];
    apply_schrodinger(&lat, h, q, lift, &mut b);
    for &i in grid.interior_nodes() {
        let r = rhs.map_or(T::zero(), |r| r[i]);
        b[i] = r - b[i];
    }
    for &i in grid.boundary_nodes() {
        b[i] = T::zero();
    }
    let mut x = vec![T::zero(); lat.len()];
    linalg::cg(|x: &[T], y: &mut [T]| apply_schrodinger(&lat, h, q, x, y), &b, &mut x, opts.linear_tol, opts.max_linear_iter)?;
    for (xi, li) in x.iter_mut().zip(lift) {
        *xi += *li;
    }
    Ok(x)
}

/// Discrete harmonic extension of boundary data.
pub fn harmonic_extension<T: Scalar>(grid: &Grid, f: &BoundaryField<T>, opts: &SolveOptions) -> Result<Field<T>> {
    if !f.is_finite() {
        return Err(Error::NonFinite("boundary data"));
    }
    let lift = grid.lift_boundary(f)?;
    let values = dirichlet_solve(grid, None, None, &lift.values, opts)?;
    Ok(Field { carrier: Carrier::Omega, values })
}

/// Solves `(-Delta_h + q) u = 0`, `u = f` on the boundary.
///
/// `c` is the admissibility margin: `q >= -c` is required and `c` must stay
/// below the first Dirichlet eigenvalue.
pub fn solve_schrodinger<T: Scalar>(
    grid: &Grid,
    q: &Field<f64>,
    c: f64,
    f: &BoundaryField<T>,
    opts: &SolveOptions,
) -> Result<Field<T>> {
    opts.check()?;
    grid.check_field(q, Carrier::Omega)?;
    if !q.is_finite() {
        return Err(Error::NonFinite("potential"));
    }
    if !f.is_finite() {
        return Err(Error::NonFinite("boundary data"));
    }
    let min_q = grid.interior_nodes().iter().map(|&i| q.values[i]).fold(f64::INFINITY, f64::min);
    if min_q < -c {
        return Err(Error::QNotAdmissible { min_q, neg_c: -c });
    }
    if c > 0.0 {
        let l1 = grid.lambda1()?;
        if c >= l1 {
            return Err(Error::InvalidArgument(format!("margin c = {c} is not below lambda_1 = {l1}")));
        }
    }
    let lift = grid.lift_boundary(f)?;
    let values = dirichlet_solve(grid, Some(&q.values), None, &lift.values, opts)?;
    Ok(Field { carrier: Carrier::Omega, values })
}

/// `-Delta_h u + a(u)` at interior nodes, zero on the boundary.
pub fn semilinear_residual(grid: &Grid, a: &Nonlinearity, u: &Field<f64>) -> Vec<f64> {
    let lat = grid.lattice(Carrier::Omega);
    let mut r = vec![0.0; lat.len()];
    apply_schrodinger(&lat, grid.spacing(), None, &u.values, &mut r);
    for &i in grid.interior_nodes() {
        r[i] += a.eval(u.values[i]);
    }
    r
}

/// Checks the class conditions and the spectral margin before a solve.
pub fn check_admissible(grid: &Grid, a: &Nonlinearity, data_max: f64) -> Result<()> {
    let p = a.params();
    p.check()?;
    let plan = SamplingPlan { range: (2.0 * data_max).max(10.0), count: 2001 };
    let report = validate_class(a, plan)?;
    if !report.passed() {
        return Err(Error::ClassViolation(format!("{:?}: {report:?}", a.family)));
    }
    if p.c > 0.0 {
        p.check_spectral_margin(grid.lambda1()?)?;
    }
    Ok(())
}

/// Solves `-Delta u + a(u) = 0`, `u = f` on the boundary.
pub fn solve_semilinear(
    grid: &Grid,
    a: &Nonlinearity,
    f: &BoundaryField<f64>,
    opts: &SolveOptions,
) -> Result<(Field<f64>, SemilinearReport)> {
    solve_semilinear_from(grid, a, f, None, opts)
}

/// As [`solve_semilinear`], starting from `u = E f + w0` where `w0`
/// vanishes on the boundary (its boundary values are ignored).
///
/// Damped Picard iterates `w <- (1 - theta) w + theta T(w)`, where `T(w)`
/// solves `-Delta psi = -a(w + E f)` with zero boundary values. The update is
/// computed in the equivalent residual form `u <- u - theta (-Delta)^-1 R(u)`,
/// which also removes the algebraic error of the extension `E f`. When the
/// residual stagnates, a damped Newton iteration takes over.
pub fn solve_semilinear_from(
    grid: &Grid,
    a: &Nonlinearity,
    f: &BoundaryField<f64>,
    w0: Option<&Field<f64>>,
    opts: &SolveOptions,
) -> Result<(Field<f64>, SemilinearReport)> {
    opts.check()?;
    grid.check_boundary(f)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("boundary data"));
    }
    check_admissible(grid, a, f.max_abs())?;

    let mut u = harmonic_extension(grid, f, opts)?;
    if let Some(w0) = w0 {
        grid.check_field(w0, Carrier::Omega)?;
        for &i in grid.interior_nodes() {
            u.values[i] += w0.values[i];
        }
    }
    let zero = vec![0.0; u.values.len()];
    let mut history = Vec::new();
    let theta = opts.damping;

    let mut picard_iterations = 0;
    let mut best = (f64::INFINITY, u.clone());
    loop {
        let r = semilinear_residual(grid, a, &u);
        let res = interior_norm(grid, &r);
        if !res.is_finite() {
            break;
        }
        history.push(res);
        if res < best.0 {
            best = (res, u.clone());
        }
        if res <= opts.tol * (1.0 + u.l2_norm(grid)) {
            return Ok((u, SemilinearReport {
                method: Method::Picard,
                picard_iterations,
                newton_iterations: 0,
                final_residual: res,
                residual_history: history,
            }));
        }
        let k = history.len();
        let stalled = k > 5 && (history[k - 1] > 0.99 * history[k - 2]);
        if stalled || picard_iterations >= opts.max_picard {
            break;
        }
        let delta = dirichlet_solve(grid, None, Some(&r), &zero, opts)?;
        for (ui, di) in u.values.iter_mut().zip(&delta) {
            *ui -= theta * di;
        }
        picard_iterations += 1;
    }

    if !opts.newton_fallback {
        return Err(Error::NonConvergence {
            solver: "picard",
            iterations: picard_iterations,
            residual: history.last().copied().unwrap_or(f64::NAN),
        });
    }
    // Newton starts from the best Picard iterate
    u = best.1;
    let newton_iterations = newton(grid, a, &mut u, opts, &mut history)?;
    Ok((u, SemilinearReport {
        method: Method::Newton,
        picard_iterations,
        newton_iterations,
        final_residual: *history.last().unwrap(),
        residual_history: history,
    }))
}

fn newton(grid: &Grid, a: &Nonlinearity, u: &mut Field<f64>, opts: &SolveOptions, history: &mut Vec<f64>) -> Result<usize> {
    let zero = vec![0.0; u.values.len()];
    let mut r = semilinear_residual(grid, a, u);
    let mut res = interior_norm(grid, &r);
    for it in 0..=opts.max_newton {
        history.push(res);
        if res <= opts.tol * (1.0 + u.l2_norm(grid)) {
            return Ok(it);
        }
        if it == opts.max_newton {
            break;
        }
        let q: Vec<f64> = u.values.iter().map(|&v| a.deriv(v)).collect();
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = dirichlet_solve(grid, Some(&q), Some(&neg_r), &zero, opts)?;
        let mut t = 1.0;
        loop {
            let trial = Field {
                carrier: Carrier::Omega,
                values: u.values.iter().zip(&delta).map(|(ui, di)| ui + t * di).collect(),
            };
            let r_trial = semilinear_residual(grid, a, &trial);
            let res_trial = interior_norm(grid, &r_trial);
            if res_trial <= (1.0 - 1e-4 * t) * res || t < 1e-4 {
                *u = trial;
                r = r_trial;
                res = res_trial;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::NonConvergence { solver: "newton", iterations: opts.max_newton, residual: res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// `sin(pi x1) sin(g x2) / sin(g)` with `g^2 = k - pi^2` solves
    /// `-Delta u - k u = 0` in the continuum.
    fn helmholtz_trace(grid: &Grid, k: f64) -> BoundaryField<f64> {
        let g = (k - PI * PI).sqrt();
        grid.boundary_from_fn(|x| (PI * x[0]).sin() * (g * x[1]).sin() / g.sin())
    }

    #[test]
    fn harmonic_extension_reproduces_affine() {
        let g = Grid::new(2, 17, 4).unwrap();
        let f = g.boundary_from_fn(|x| 1.0 + 2.0 * x[0] - x[1]);
        let u = harmonic_extension(&g, &f, &SolveOptions::default()).unwrap();
        for i in 0..u.values.len() {
            let x = g.coords(Carrier::Omega, i);
            assert!((u.values[i] - (1.0 + 2.0 * x[0] - x[1])).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_nonlinearity_gives_harmonic_extension() {
        let g = Grid::new(2, 17, 4).unwrap();
        let f = g.boundary_from_fn(|x| (x[0] * 3.0).sin() + x[1] * x[1]);
        let opts = SolveOptions::default();
        let (u, rep) = solve_semilinear(&g, &Nonlinearity::zero(), &f, &opts).unwrap();
        let v = harmonic_extension(&g, &f, &opts).unwrap();
        assert!(u.sub(&v).max_abs() < 1e-10);
        assert_eq!(rep.method, Method::Picard);
    }

    #[test]
    fn linear_nonlinearity_matches_schrodinger_solve() {
        let g = Grid::new(2, 33, 8).unwrap();
        let k = 10.0;
        let f = helmholtz_trace(&g, k);
        let opts = SolveOptions::default();
        let (u, _) = solve_semilinear(&g, &Nonlinearity::linear(-k), &f, &opts).unwrap();
        let q = Field::constant(&g, Carrier::Omega, -k);
        let w = solve_schrodinger(&g, &q, k, &f, &opts).unwrap();
        assert!(u.sub(&w).l2_norm(&g) / w.l2_norm(&g) < 1e-8);
    }

    #[test]
    fn helmholtz_mode_close_to_continuum() {
        let g = Grid::new(2, 65, 16).unwrap();
        let k = 12.0;
        let gm = (k - PI * PI).sqrt();
        let f = helmholtz_trace(&g, k);
        let q = Field::constant(&g, Carrier::Omega, -k);
        let u = solve_schrodinger(&g, &q, k, &f, &SolveOptions::default()).unwrap();
        let exact = g.field_from_fn(Carrier::Omega, |x| (PI * x[0]).sin() * (gm * x[1]).sin() / gm.sin());
        assert!(u.sub(&exact).max_abs() < 1e-3);
    }

    #[test]
    fn constant_data_cubic_gives_nonconstant_solution() {
        let g = Grid::new(2, 17, 4).unwrap();
        let f = BoundaryField::constant(&g, 1.0);
        let (u, _) = solve_semilinear(&g, &Nonlinearity::cubic(1.0), &f, &SolveOptions::default()).unwrap();
        let centre = g.lattice(Carrier::Omega).index([8, 8, 0]);
        assert!(u.values[centre] < 1.0 && u.values[centre] > 0.0);
    }

    #[test]
    fn inadmissible_potential_rejected() {
        let g = Grid::new(2, 17, 4).unwrap();
        let q = Field::constant(&g, Carrier::Omega, -2.0);
        let f = BoundaryField::constant(&g, 1.0);
        let err = solve_schrodinger(&g, &q, 1.0, &f, &SolveOptions::default()).unwrap_err();
        assert!(matches!(err, Error::QNotAdmissible { .. }));
    }

    #[test]
    fn class_violation_rejected() {
        let g = Grid::new(2, 17, 4).unwrap();
        let f = BoundaryField::constant(&g, 1.0);
        let a = Nonlinearity::with_params(
            crate::nonlinearity::Family::Linear { slope: -4.0 },
            crate::nonlinearity::ClassParams { c0: 1.0, c1: 10.0, c: 2.0, alpha: 1.0 },
        );
        assert!(matches!(solve_semilinear(&g, &a, &f, &SolveOptions::default()), Err(Error::ClassViolation(_))));
        // c above lambda_1 ~ 19.7
        let b = Nonlinearity::linear(-25.0);
        assert!(solve_semilinear(&g, &b, &f, &SolveOptions::default()).is_err());
    }

    #[test]
    fn newton_fallback_handles_strong_cubic() {
        let g = Grid::new(2, 17, 4).unwrap();
        let f = g.boundary_from_fn(|x| 4.0 * (1.0 + x[0]));
        let opts = SolveOptions { max_picard: 5, ..SolveOptions::default() };
        let (u, rep) = solve_semilinear(&g, &Nonlinearity::cubic(5.0), &f, &opts).unwrap();
        assert_eq!(rep.method, Method::Newton);
        let r = semilinear_residual(&g, &Nonlinearity::cubic(5.0), &u);
        assert!(interior_norm(&g, &r) <= 1e-10 * (1.0 + u.l2_norm(&g)));
    }

    #[test]
    fn complex_data_splits_into_real_parts() {
        let g = Grid::new(2, 17, 4).unwrap();
        let q = g.field_from_fn(Carrier::Omega, |x| 1.0 + x[0]);
        let fr = g.boundary_from_fn(|x| x[0] * x[1]);
        let fi = g.boundary_from_fn(|x| (2.0 * x[1]).cos());
        let fc = BoundaryField {
            values: fr.values.iter().zip(&fi.values).map(|(a, b)| num_complex::Complex64::new(*a, *b)).collect(),
        };
        let opts = SolveOptions::default();
        let uc = solve_schrodinger(&g, &q, 0.0, &fc, &opts).unwrap();
        let ur = solve_schrodinger(&g, &q, 0.0, &fr, &opts).unwrap();
        let ui = solve_schrodinger(&g, &q, 0.0, &fi, &opts).unwrap();
        for i in 0..uc.values.len() {
            assert!((uc.values[i].re - ur.values[i]).abs() < 1e-10);
            assert!((uc.values[i].im - ui.values[i]).abs() < 1e-10);
        }
    }
}
