//! Complex geometric optics solutions `u = exp(-x.(xi + i zeta)/h) (1 + v)`
//! of `(-Delta + q chi) u = 0` on the enclosing box, and Carleman diagnostics
//! for the conjugated operator `P_h = -h^2 Delta + 2h xi.grad - 1 + h^2 q`.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{normal_derivative, BoundaryField, Carrier, Field, Grid, Lattice};
use crate::linalg::{self, SolveStats};

pub type Vec3 = [f64; 3];

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Regime gate `h <= h0 = c_omega / (2 M)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanGate {
    pub c_omega: f64,
    /// Bound on the potentials.
    pub m_bound: f64,
}

impl CarlemanGate {
    pub fn h0(&self) -> f64 {
        self.c_omega / (2.0 * self.m_bound)
    }

    pub fn rho0(&self) -> f64 {
        1.0 / self.h0()
    }
}

/// Directions of a CGO pair probing the frequency `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgoDirections {
    pub k: Vec3,
    pub rho: f64,
    pub xi: Vec3,
    pub k_tilde: Vec3,
    pub h: f64,
    pub zeta: Vec3,
    pub zeta_tilde: Vec3,
}

/// Deterministic orthogonal frame for the frequency `k`.
///
/// `xi = normalize(k x e_j)` for the first axis not parallel to `k`, and
/// `k_tilde = rho normalize(xi x k)`. For `k = 0` the frame is `xi = e3`,
/// `k_tilde = rho e1`.
pub fn cgo_directions(n: usize, k: Vec3, rho: f64, gate: &CarlemanGate) -> Result<CgoDirections> {
    if n != 3 {
        return Err(Error::InvalidArgument(format!("CGO pairs need three dimensions, got n = {n}")));
    }
    if !(rho > 0.0) || !k.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("rho must be positive and k finite".into()));
    }
    let rho0 = gate.rho0();
    if rho < rho0 * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!("rho = {rho} is below rho0 = {rho0}")));
    }
    let kn = norm3(k);
    let (xi, kt) = if kn == 0.0 {
        ([0.0, 0.0, 1.0], [rho, 0.0, 0.0])
    } else {
        let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let c = axes
            .iter()
            .map(|&e| cross(k, e))
            .find(|c| norm3(*c) > 1e-8 * kn)
            .expect("some axis is not parallel to k");
        let xi = scale3(c, 1.0 / norm3(c));
        let t = cross(xi, k);
        (xi, scale3(t, rho / norm3(t)))
    };
    let h = 1.0 / (dot3(k, k) / 4.0 + rho * rho).sqrt();
    let half = scale3(k, 0.5);
    let zeta = scale3(add3(half, kt), h);
    let zeta_tilde = scale3(add3(half, scale3(kt, -1.0)), h);
    Ok(CgoDirections { k, rho, xi, k_tilde: kt, h, zeta, zeta_tilde })
}

/// Which member of the pair: `Plus` has phase `xi` and direction `zeta`,
/// `Minus` has phase `-xi` and direction `zeta_tilde`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sign {
    Plus,
    Minus,
}

impl CgoDirections {
    /// `(phase direction, oscillation direction)` of one member of the pair.
    pub fn member(&self, sign: Sign) -> (Vec3, Vec3) {
        match sign {
            Sign::Plus => (self.xi, self.zeta),
            Sign::Minus => (scale3(self.xi, -1.0), self.zeta_tilde),
        }
    }
}

/// Refuses grids that do not resolve the phase: spacing must be at most `h/4`.
pub fn check_resolution(grid: &Grid, h: f64) -> Result<()> {
    let limit = h / 4.0;
    if grid.spacing() > limit * (1.0 + 1e-12) {
        return Err(Error::Resolution { spacing: grid.spacing(), limit });
    }
    Ok(())
}

fn potential_on_enclosing(grid: &Grid, q: &Field<f64>) -> Result<Vec<f64>> {
    match q.carrier {
        Carrier::Omega => {
            grid.check_field(q, Carrier::Omega)?;
            Ok(grid.extend_by_zero(q).values)
        }
        Carrier::Enclosing => {
            grid.check_field(q, Carrier::Enclosing)?;
            Ok(q.values.clone())
        }
    }
}

/// Applies `-h^2 Delta + 2h xi.grad - 1 + h^2 q chi` with centered
/// differences on the enclosing lattice. Nodes on the lattice boundary use the
/// node value in place of missing neighbours.
pub fn conjugated_apply(grid: &Grid, q: &Field<f64>, h: f64, xi: Vec3, w: &Field<Complex64>) -> Result<Field<Complex64>> {
    grid.check_field(w, Carrier::Enclosing)?;
    let qe = potential_on_enclosing(grid, q)?;
    let lat = grid.lattice(Carrier::Enclosing);
    let s = grid.spacing();
    let n = grid.dim();
    let h2 = h * h;
    let mut out = vec![Complex64::new(0.0, 0.0); lat.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let ijk = lat.multi_index(idx);
        let c = w.values[idx];
        let mut lap = Complex64::new(0.0, 0.0);
        let mut grad = Complex64::new(0.0, 0.0);
        for a in 0..n {
            let st = lat.stride(a);
            let up = if ijk[a] + 1 < lat.m { w.values[idx + st] } else { c };
            let dn = if ijk[a] > 0 { w.values[idx - st] } else { c };
            lap += up + dn - c * 2.0;
            grad += (up - dn) * (xi[a] / (2.0 * s));
        }
        *o = -lap * (h2 / (s * s)) + grad * (2.0 * h) - c + c * (h2 * qe[idx]);
    }
    Ok(Field { carrier: Carrier::Enclosing, values: out })
}

/// Oscillation direction `zeta'` closest to `zeta` for which
/// `exp(-x.(xi + i zeta')/h)` is exactly discrete-harmonic:
/// `sum_j cosh(s (xi_j + i zeta'_j) / h) = n`. Found by Newton in
/// `zeta' = alpha zeta + beta xi`.
pub fn discrete_direction(n: usize, spacing: f64, h: f64, xi: Vec3, zeta: Vec3) -> Result<Vec3> {
    let r = spacing / h;
    let f = |al: f64, be: f64| -> (Complex64, Complex64, Complex64) {
        let mut val = Complex64::new(-(n as f64), 0.0);
        let mut da = Complex64::new(0.0, 0.0);
        let mut db = Complex64::new(0.0, 0.0);
        for j in 0..n {
            let c = Complex64::new(r * xi[j], r * (al * zeta[j] + be * xi[j]));
            val += c.cosh();
            let sh = c.sinh();
            da += sh * Complex64::new(0.0, r * zeta[j]);
            db += sh * Complex64::new(0.0, r * xi[j]);
        }
        (val, da, db)
    };
    let (mut al, mut be) = (1.0, 0.0);
    for _ in 0..50 {
        let (v, da, db) = f(al, be);
        if v.norm() < 1e-15 {
            break;
        }
        // real 2x2 system [re; im] of da*dal + db*dbe = -v
        let det = da.re * db.im - db.re * da.im;
        if det.abs() < 1e-300 {
            return Err(Error::NonConvergence { solver: "discrete phase", iterations: 0, residual: v.norm() });
        }
        let dal = (-v.re * db.im + v.im * db.re) / det;
        let dbe = (-da.re * v.im + da.im * v.re) / det;
        al += dal;
        be += dbe;
        if dal.abs() + dbe.abs() < 1e-16 {
            break;
        }
    }
    let (v, _, _) = f(al, be);
    if v.norm() > 1e-12 {
        return Err(Error::NonConvergence { solver: "discrete phase", iterations: 50, residual: v.norm() });
    }
    Ok(add3(scale3(zeta, al), scale3(xi, be)))
}

/// Options for the remainder solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgoOptions {
    pub linear_tol: f64,
    pub max_iter: usize,
    pub gmres_restart: usize,
    /// Largest unknown count for the dense fallback.
    pub dense_limit: usize,
    pub method: RemainderMethod,
}

/// How the underdetermined conjugated system is closed on the enclosing box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemainderMethod {
    /// Quasi-periodic solution on the enclosing lattice viewed as a torus,
    /// with frequencies shifted off the characteristic set.
    Periodic,
    /// Minimum-norm solution, no condition on the enclosing boundary.
    MinNorm,
    /// Zero values on the enclosing boundary.
    Dirichlet,
}

impl Default for CgoOptions {
    fn default() -> Self {
        CgoOptions { linear_tol: 1e-10, max_iter: 20_000, gmres_restart: 60, dense_limit: 2500, method: RemainderMethod::Periodic }
    }
}

/// Discretely conjugated operator
/// `h^2 exp(x.xi/h) (-Delta_h + q) exp(-x.xi/h)` on the enclosing lattice,
/// zero on lattice-boundary rows.
struct FittedOperator {
    lat: Lattice,
    up: [f64; 3],
    dn: [f64; 3],
    hq: Vec<f64>,
    diag: f64,
}

impl FittedOperator {
    fn new(lat: Lattice, spacing: f64, h: f64, xi: Vec3, q: &[f64]) -> Self {
        let coef = h * h / (spacing * spacing);
        let mut up = [0.0; 3];
        let mut dn = [0.0; 3];
        for j in 0..lat.n {
            let a = spacing * xi[j] / h;
            up[j] = coef * (-a).exp();
            dn[j] = coef * a.exp();
        }
        let hq = q.iter().map(|v| h * h * v).collect();
        FittedOperator { lat, up, dn, hq, diag: 2.0 * lat.n as f64 * coef }
    }

    fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        let s1 = self.lat.stride(1);
        let s2 = if self.lat.n == 3 { self.lat.stride(2) } else { 0 };
        let three = self.lat.n == 3;
        y.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        self.lat.for_each_interior(|i| {
            let mut v = x[i] * (self.diag + self.hq[i]);
            v -= x[i + 1] * self.up[0] + x[i - 1] * self.dn[0];
            v -= x[i + s1] * self.up[1] + x[i - s1] * self.dn[1];
            if three {
                v -= x[i + s2] * self.up[2] + x[i - s2] * self.dn[2];
            }
            y[i] = v;
        });
    }

    /// Transpose: scatters interior rows of `z` onto all nodes.
    fn apply_adjoint(&self, z: &[Complex64], y: &mut [Complex64]) {
        let s1 = self.lat.stride(1);
        let s2 = if self.lat.n == 3 { self.lat.stride(2) } else { 0 };
        let three = self.lat.n == 3;
        y.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        self.lat.for_each_interior(|i| {
            let zi = z[i];
            y[i] += zi * (self.diag + self.hq[i]);
            y[i + 1] -= zi * self.up[0];
            y[i - 1] -= zi * self.dn[0];
            y[i + s1] -= zi * self.up[1];
            y[i - s1] -= zi * self.dn[1];
            if three {
                y[i + s2] -= zi * self.up[2];
                y[i - s2] -= zi * self.dn[2];
            }
        });
    }
}

/// Minimum-norm solution `w = P^T z`, `P P^T z = b`, of the underdetermined
/// system with equations at interior nodes and unknowns at all nodes.
fn solve_min_norm(op: &FittedOperator, b: &[Complex64], opts: &CgoOptions) -> Result<(Vec<Complex64>, SolveStats)> {
    let n = b.len();
    let mut tmp = vec![Complex64::new(0.0, 0.0); n];
    let normal = |z: &[Complex64], y: &mut [Complex64]| {
        let mut t = vec![Complex64::new(0.0, 0.0); z.len()];
        op.apply_adjoint(z, &mut t);
        op.apply(&t, y);
    };
    let mut z = vec![Complex64::new(0.0, 0.0); n];
    let st = linalg::cg(normal, b, &mut z, opts.linear_tol, opts.max_iter)?;
    op.apply_adjoint(&z, &mut tmp);
    let mut r = vec![Complex64::new(0.0, 0.0); n];
    op.apply(&tmp, &mut r);
    let res = r.iter().zip(b).map(|(a, b)| (b - a).norm_sqr()).sum::<f64>().sqrt() / linalg::norm(b).max(1e-300);
    Ok((tmp, SolveStats { iterations: st.iterations, residual: res }))
}

fn solve_nonsymmetric(
    op: &FittedOperator,
    b: &[Complex64],
    opts: &CgoOptions,
) -> Result<(Vec<Complex64>, SolveStats)> {
    let n = b.len();
    let apply = |x: &[Complex64], y: &mut [Complex64]| op.apply(x, y);
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    match linalg::bicgstab(apply, b, &mut x, opts.linear_tol, opts.max_iter) {
        Ok(st) => return Ok((x, st)),
        Err(Error::NonConvergence { .. }) => {}
        Err(e) => return Err(e),
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    match linalg::gmres(apply, b, &mut x, opts.linear_tol, opts.gmres_restart, opts.max_iter) {
        Ok(st) => return Ok((x, st)),
        Err(e @ Error::NonConvergence { .. }) => {
            let interior: Vec<usize> = (0..n).filter(|&i| !op.lat.on_boundary(i)).collect();
            if interior.len() > opts.dense_limit {
                return Err(e);
            }
        }
        Err(e) => return Err(e),
    }
    // dense LU on the interior unknowns
    let interior: Vec<usize> = (0..n).filter(|&i| !op.lat.on_boundary(i)).collect();
    let m = interior.len();
    let mut a = vec![Complex64::new(0.0, 0.0); m * m];
    let mut e = vec![Complex64::new(0.0, 0.0); n];
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for (j, &gj) in interior.iter().enumerate() {
        e[gj] = Complex64::new(1.0, 0.0);
        op.apply(&e, &mut col);
        e[gj] = Complex64::new(0.0, 0.0);
        for (i, &gi) in interior.iter().enumerate() {
            a[i * m + j] = col[gi];
        }
    }
    let rhs: Vec<Complex64> = interior.iter().map(|&i| b[i]).collect();
    let sol = linalg::dense_solve(a, m, rhs)?;
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for (k, &i) in interior.iter().enumerate() {
        x[i] = sol[k];
    }
    let mut r = vec![Complex64::new(0.0, 0.0); n];
    op.apply(&x, &mut r);
    let res = r.iter().zip(b).map(|(a, b)| (b - a).norm_sqr()).sum::<f64>().sqrt() / linalg::norm(b).max(1e-300);
    Ok((x, SolveStats { iterations: 1, residual: res }))
}

/// Inverse of the `q = 0` conjugated operator on the enclosing lattice taken
/// as a torus, acting on quasi-periodic functions `exp(i 2 pi sigma.j / m) W(j)`
/// with `W` periodic. The shift `sigma` keeps the symbol away from zero.
struct PeriodicSolver {
    lat: Lattice,
    shift: [f64; 3],
    inv_symbol: Vec<Complex64>,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl PeriodicSolver {
    fn new(lat: Lattice, spacing: f64, h: f64, xi: Vec3) -> Result<Self> {
        let m = lat.m;
        let n = lat.n;
        let coef = h * h / (spacing * spacing);
        let tau = std::f64::consts::TAU;
        let symbol_min = |shift: [f64; 3]| -> (f64, Vec<Complex64>) {
            let mut min = f64::INFINITY;
            // per-axis factors e^{-a} e^{i t} + e^{a} e^{-i t}
            let per_axis: Vec<Vec<Complex64>> = (0..n)
                .map(|j| {
                    let a = spacing * xi[j] / h;
                    (0..m)
                        .map(|k| {
                            let t = tau * (k as f64 + shift[j]) / m as f64;
                            Complex64::from_polar((-a).exp(), t) + Complex64::from_polar(a.exp(), -t)
                        })
                        .collect()
                })
                .collect();
            let sym: Vec<Complex64> = (0..lat.len())
                .map(|idx| {
                    let ijk = lat.multi_index(idx);
                    let mut s = Complex64::new(2.0 * n as f64, 0.0);
                    for j in 0..n {
                        s -= per_axis[j][ijk[j]];
                    }
                    let p = s * coef;
                    min = min.min(p.norm());
                    p
                })
                .collect();
            (min, sym)
        };
        // half shifts along single axes and along the axis of largest |xi_j|
        let mut candidates: Vec<[f64; 3]> = Vec::new();
        for j in 0..n {
            for t in [0.5, 0.25, 0.375] {
                let mut sh = [0.0; 3];
                sh[j] = t;
                candidates.push(sh);
            }
        }
        let mut mixed = [0.0; 3];
        for j in 0..n {
            mixed[j] = 0.5 * xi[j].signum() * (xi[j].abs() > 1e-12) as i32 as f64;
        }
        candidates.push(mixed);
        let mut best: Option<(f64, [f64; 3], Vec<Complex64>)> = None;
        for c in candidates {
            let (min, sym) = symbol_min(c);
            if best.as_ref().is_none_or(|b| min > b.0) {
                best = Some((min, c, sym));
            }
        }
        let (min, shift, sym) = best.expect("non-empty candidate set");
        if !(min > 0.0) {
            return Err(Error::InvalidArgument("conjugated symbol vanishes on every shifted lattice".into()));
        }
        let inv_symbol = sym.iter().map(|p| 1.0 / p).collect();
        let mut planner = rustfft::FftPlanner::new();
        Ok(PeriodicSolver { lat, shift, inv_symbol, fwd: planner.plan_fft_forward(m), inv: planner.plan_fft_inverse(m) })
    }

    fn fft_all_axes(&self, data: &mut [Complex64], inverse: bool) {
        let m = self.lat.m;
        let plan = if inverse { &self.inv } else { &self.fwd };
        let mut line = vec![Complex64::new(0.0, 0.0); m];
        for axis in 0..self.lat.n {
            let stride = self.lat.stride(axis);
            for start in 0..data.len() {
                // first node of each line along this axis
                if (start / stride) % m != 0 {
                    continue;
                }
                for (k, l) in line.iter_mut().enumerate() {
                    *l = data[start + k * stride];
                }
                plan.process(&mut line);
                for (k, l) in line.iter().enumerate() {
                    data[start + k * stride] = *l;
                }
            }
        }
    }

    fn modulation(&self, idx: usize) -> Complex64 {
        let ijk = self.lat.multi_index(idx);
        let mut t = 0.0;
        for j in 0..self.lat.n {
            t += self.shift[j] * ijk[j] as f64;
        }
        Complex64::from_polar(1.0, std::f64::consts::TAU * t / self.lat.m as f64)
    }

    /// `G f` for the `q = 0` operator.
    fn apply_inverse(&self, f: &[Complex64], out: &mut [Complex64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = f[i] * self.modulation(i).conj();
        }
        self.fft_all_axes(out, false);
        for (o, g) in out.iter_mut().zip(&self.inv_symbol) {
            *o *= g;
        }
        self.fft_all_axes(out, true);
        let scale = 1.0 / self.lat.len() as f64;
        for (i, o) in out.iter_mut().enumerate() {
            *o *= self.modulation(i) * scale;
        }
    }

    /// Solves `(I + G h^2 q) w = G b` by GMRES.
    fn solve(&self, hq: &[f64], b: &[Complex64], opts: &CgoOptions) -> Result<(Vec<Complex64>, SolveStats)> {
        let n = b.len();
        let mut gb = vec![Complex64::new(0.0, 0.0); n];
        self.apply_inverse(b, &mut gb);
        let op = |x: &[Complex64], y: &mut [Complex64]| {
            let t: Vec<Complex64> = x.iter().zip(hq).map(|(v, q)| v * q).collect();
            self.apply_inverse(&t, y);
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi += xi;
            }
        };
        let mut w = vec![Complex64::new(0.0, 0.0); n];
        let st = linalg::gmres(op, &gb, &mut w, opts.linear_tol, opts.gmres_restart, opts.max_iter)?;
        Ok((w, st))
    }
}

/// A CGO solution on the enclosing box with its boundary data on the unit box.
#[derive(Debug, Clone)]
pub struct CgoSolution {
    pub directions: CgoDirections,
    pub sign: Sign,
    /// Oscillation direction actually used (discretely corrected).
    pub phase_direction: Vec3,
    /// Remainder `v` on the enclosing box.
    pub v: Field<Complex64>,
    /// Assembled `u` on the enclosing box.
    pub u: Field<Complex64>,
    pub trace: BoundaryField<Complex64>,
    pub neumann: BoundaryField<Complex64>,
    pub stats: SolveStats,
}

impl CgoSolution {
    /// `||v||_{L2(Omega)}`.
    pub fn remainder_norm(&self, grid: &Grid) -> f64 {
        grid.restrict_to_omega(&self.v).l2_norm(grid)
    }

    pub fn u_on_omega(&self, grid: &Grid) -> Field<Complex64> {
        grid.restrict_to_omega(&self.u)
    }
}

/// Builds the CGO solution for one member of the pair: solves
/// `P(w) = -h^2 q chi e_zeta` at interior nodes of the enclosing box, closed
/// as selected by `opts.method`, where `P` is the discretely conjugated
/// operator, then `v = conj(e_zeta) w` and
/// `u = exp(-x.xi/h) (e_zeta + w)`, `e_zeta = exp(-i x.zeta'/h)`.
pub fn cgo_remainder(grid: &Grid, q: &Field<f64>, dirs: &CgoDirections, sign: Sign, opts: &CgoOptions) -> Result<CgoSolution> {
    if grid.dim() != 3 {
        return Err(Error::InvalidArgument("CGO solutions need three dimensions".into()));
    }
    check_resolution(grid, dirs.h)?;
    if !q.is_finite() {
        return Err(Error::NonFinite("potential"));
    }
    let qe = potential_on_enclosing(grid, q)?;
    let (xi, zeta) = dirs.member(sign);
    let h = dirs.h;
    let zeta_d = discrete_direction(grid.dim(), grid.spacing(), h, xi, zeta)?;
    let lat = grid.lattice(Carrier::Enclosing);
    let len = lat.len();
    let phase: Vec<Complex64> = (0..len)
        .map(|i| {
            let x = grid.coords(Carrier::Enclosing, i);
            Complex64::from_polar(1.0, -dot3(x, zeta_d) / h)
        })
        .collect();
    let mut b = vec![Complex64::new(0.0, 0.0); len];
    lat.for_each_interior(|i| b[i] = phase[i] * (-h * h * qe[i]));
    let op = FittedOperator::new(lat, grid.spacing(), h, xi, &qe);
    let (w, stats) = match opts.method {
        RemainderMethod::Periodic => {
            let per = PeriodicSolver::new(lat, grid.spacing(), h, xi)?;
            let hq: Vec<f64> = qe.iter().map(|q| h * h * q).collect();
            per.solve(&hq, &b, opts)?
        }
        RemainderMethod::MinNorm => solve_min_norm(&op, &b, opts)?,
        RemainderMethod::Dirichlet => solve_nonsymmetric(&op, &b, opts)?,
    };
    let mut v = vec![Complex64::new(0.0, 0.0); len];
    let mut u = vec![Complex64::new(0.0, 0.0); len];
    for i in 0..len {
        let x = grid.coords(Carrier::Enclosing, i);
        v[i] = w[i] * phase[i].conj();
        u[i] = (phase[i] + w[i]) * (-dot3(x, xi) / h).exp();
    }
    let u = Field { carrier: Carrier::Enclosing, values: u };
    if !u.is_finite() {
        return Err(Error::NonFinite("CGO solution"));
    }
    let trace = grid.trace(&u);
    let neumann = normal_derivative(grid, &u)?;
    Ok(CgoSolution {
        directions: *dirs,
        sign,
        phase_direction: zeta_d,
        v: Field { carrier: Carrier::Enclosing, values: v },
        u,
        trace,
        neumann,
        stats,
    })
}

/// `||(-Delta_h + q chi) u|| / ||u||` over interior nodes of the enclosing box.
pub fn schrodinger_residual(grid: &Grid, q: &Field<f64>, u: &Field<Complex64>) -> Result<f64> {
    grid.check_field(u, Carrier::Enclosing)?;
    let qe = potential_on_enclosing(grid, q)?;
    let lat = grid.lattice(Carrier::Enclosing);
    let mut r = vec![Complex64::new(0.0, 0.0); lat.len()];
    crate::grid::apply_schrodinger(&lat, grid.spacing(), Some(&qe), &u.values, &mut r);
    let mut num = 0.0;
    let mut den = 0.0;
    lat.for_each_interior(|i| {
        num += r[i].norm_sqr();
        den += u.values[i].norm_sqr();
    });
    Ok((num / den.max(1e-300)).sqrt())
}

/// `h ||u|| / ||P_h u||` on the enclosing box, `u` vanishing on its two
/// outermost layers.
pub fn carleman_ratio(grid: &Grid, q: &Field<f64>, h: f64, xi: Vec3, u: &Field<Complex64>) -> Result<f64> {
    grid.check_field(u, Carrier::Enclosing)?;
    let lat = grid.lattice(Carrier::Enclosing);
    for (i, v) in u.values.iter().enumerate() {
        let ijk = lat.multi_index(i);
        let outer = (0..grid.dim()).any(|a| ijk[a] < 2 || ijk[a] + 2 >= lat.m);
        if outer && v.norm() > 0.0 {
            return Err(Error::InvalidArgument("field must vanish on the two outermost layers".into()));
        }
    }
    let pu = conjugated_apply(grid, q, h, xi, u)?;
    let num = h * u.l2_norm(grid);
    let den = pu.l2_norm(grid);
    if den == 0.0 {
        return Err(Error::InvalidArgument("P_h u vanishes".into()));
    }
    Ok(num / den)
}

/// Support box of the random test fields.
pub const FIELD_SUPPORT: (f64, f64) = (-0.125, 1.125);

/// Random smooth field on the enclosing box, supported in
/// `FIELD_SUPPORT^n`: a sum of `terms` separable products of sine series with
/// complex coefficients and modes `1..=max_mode` per axis. The field is a
/// fixed continuum function sampled on the grid, so the same draw gives the
/// same function on every grid.
pub fn random_compact_field<R: Rng>(grid: &Grid, rng: &mut R, terms: usize, max_mode: usize) -> Field<Complex64> {
    let (lo, hi) = FIELD_SUPPORT;
    let len = hi - lo;
    let n = grid.dim();
    let lat = grid.lattice(Carrier::Enclosing);
    let origin = grid.enclosing_origin();
    let s = grid.spacing();
    let mut values = vec![Complex64::new(0.0, 0.0); lat.len()];
    for _ in 0..terms {
        // per-axis 1D profiles
        let profiles: Vec<Vec<Complex64>> = (0..n)
            .map(|_| {
                let coef: Vec<Complex64> = (0..max_mode)
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect();
                (0..lat.m)
                    .map(|i| {
                        let x = origin + i as f64 * s;
                        if x <= lo || x >= hi {
                            return Complex64::new(0.0, 0.0);
                        }
                        let t = std::f64::consts::PI * (x - lo) / len;
                        coef.iter().enumerate().map(|(m, c)| c * ((m + 1) as f64 * t).sin()).sum()
                    })
                    .collect()
            })
            .collect();
        for (idx, v) in values.iter_mut().enumerate() {
            let ijk = lat.multi_index(idx);
            let mut p = Complex64::new(1.0, 0.0);
            for a in 0..n {
                p *= profiles[a][ijk[a]];
            }
            *v += p;
        }
    }
    Field { carrier: Carrier::Enclosing, values }
}

/// Random smooth real potential on the unit box with `|q| <= bound`.
pub fn random_potential<R: Rng>(grid: &Grid, rng: &mut R, bound: f64, max_mode: usize) -> Field<f64> {
    let n = grid.dim();
    let mut coef = Vec::new();
    for _ in 0..6 {
        let mut freq = [0.0; 3];
        for f in freq.iter_mut().take(n) {
            *f = std::f64::consts::PI * rng.gen_range(0..=max_mode) as f64;
        }
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        coef.push((rng.gen_range(-1.0..1.0), freq, phase));
    }
    let raw = grid.field_from_fn(Carrier::Omega, |x| coef.iter().map(|(c, f, p)| c * (dot3(*f, x) + p).cos()).sum::<f64>());
    let m = raw.max_abs().max(1e-300);
    let frac: f64 = rng.gen_range(0.5..1.0);
    Field { carrier: Carrier::Omega, values: raw.values.iter().map(|v| v * bound * frac / m).collect() }
}

/// Unit direction drawn uniformly on the sphere.
pub fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let r = norm3(v);
        if r > 1e-3 && r <= 1.0 {
            return scale3(v, 1.0 / r);
        }
    }
}

/// Result of the empirical Carleman calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarlemanCalibration {
    /// `2 / max ratio` with `q = 0`.
    pub c_omega_est: f64,
    pub max_ratio: f64,
    pub hs: Vec<f64>,
    pub samples: usize,
}

impl CarlemanCalibration {
    /// `2 / c_omega_est`.
    pub fn bound(&self) -> f64 {
        2.0 / self.c_omega_est
    }
}

/// Default `h` values for calibration on the coarsest grid. The ratio does
/// not involve a CGO phase, so these may go below the resolution limit.
pub const CALIBRATION_HS: [f64; 9] = [0.125, 0.177, 0.25, 0.354, 0.5, 0.707, 1.0, 1.414, 2.0];

/// Multiplies a field by the oscillation `exp(i x.eta / h)`.
pub fn modulate(grid: &Grid, u: &Field<Complex64>, eta: Vec3, h: f64) -> Field<Complex64> {
    let values = u
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = grid.coords(u.carrier, i);
            v * Complex64::from_polar(1.0, dot3(eta, x) / h)
        })
        .collect();
    Field { carrier: u.carrier, values }
}

/// One random Carleman test field for direction `xi` at scale `h`: either a
/// plain smooth field or a low-mode envelope modulated along a random unit
/// `eta` orthogonal to `xi`, which sits on the characteristic set of `P_h`.
pub fn random_carleman_field<R: Rng>(grid: &Grid, rng: &mut R, xi: Vec3, h: f64) -> Field<Complex64> {
    if rng.gen_bool(0.5) {
        return random_compact_field(grid, rng, 2, 6);
    }
    let envelope = random_compact_field(grid, rng, 1, 1);
    let eta = loop {
        let r = random_unit(rng);
        let p = sub3(r, scale3(xi, dot3(r, xi)));
        if norm3(p) > 1e-3 {
            break scale3(p, 1.0 / norm3(p));
        }
    };
    modulate(grid, &envelope, eta, h)
}

/// Calibrates `c_omega_est = 2 / max ratio` over `samples` random fields
/// with random unit `xi` and `q = 0`, for every `h` in `hs`.
pub fn calibrate_carleman<R: Rng>(grid: &Grid, rng: &mut R, samples: usize, hs: &[f64]) -> Result<CarlemanCalibration> {
    if samples == 0 || hs.is_empty() {
        return Err(Error::InvalidArgument("calibration needs samples and h values".into()));
    }
    if hs.iter().any(|&h| !(h > 0.0) || grid.spacing() > h / 2.0) {
        return Err(Error::InvalidArgument("calibration needs h >= 2 spacing".into()));
    }
    let q = Field::zeros(grid, Carrier::Omega);
    let mut max_ratio: f64 = 0.0;
    for _ in 0..samples {
        let xi = random_unit(rng);
        for &h in hs {
            let u = random_carleman_field(grid, rng, xi, h);
            max_ratio = max_ratio.max(carleman_ratio(grid, &q, h, xi, &u)?);
        }
    }
    Ok(CarlemanCalibration { c_omega_est: 2.0 / max_ratio, max_ratio, hs: hs.to_vec(), samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn gate() -> CarlemanGate {
        CarlemanGate { c_omega: 1.0, m_bound: 5.0 }
    }

    #[test]
    fn worked_direction_example() {
        let d = cgo_directions(3, [2.0 * PI, 0.0, 0.0], 10.0, &gate()).unwrap();
        assert_eq!(d.xi, [0.0, 0.0, 1.0]);
        assert!((d.k_tilde[1] - 10.0).abs() < 1e-12 && d.k_tilde[0].abs() < 1e-12);
        let h = 1.0 / (PI * PI + 100.0).sqrt();
        assert!((d.h - h).abs() < 1e-15);
        assert!((d.zeta[0] - h * PI).abs() < 1e-12 && (d.zeta[1] - 10.0 * h).abs() < 1e-12);
        assert!((norm3(d.zeta) - 1.0).abs() < 1e-12);
        for a in 0..3 {
            assert!((d.zeta[a] + d.zeta_tilde[a] - d.h * d.k[a]).abs() < 1e-12);
        }
        assert!(d.h <= gate().h0());
    }

    #[test]
    fn directions_rejected_in_2d_and_below_rho0() {
        assert!(cgo_directions(2, [1.0, 0.0, 0.0], 20.0, &gate()).is_err());
        assert!(cgo_directions(3, [1.0, 0.0, 0.0], 5.0, &gate()).is_err());
    }

    #[test]
    fn zero_mode_frame() {
        let d = cgo_directions(3, [0.0; 3], 10.0, &gate()).unwrap();
        assert!((d.h - 0.1).abs() < 1e-15);
        assert!((norm3(d.zeta) - 1.0).abs() < 1e-12);
        assert!(dot3(d.zeta, d.xi).abs() < 1e-12);
    }

    #[test]
    fn conjugated_apply_on_constants() {
        let g = Grid::new(3, 17, 4).unwrap();
        let one = Field::constant(&g, Carrier::Enclosing, Complex64::new(1.0, 0.0));
        let q0 = Field::zeros(&g, Carrier::Omega);
        let p = conjugated_apply(&g, &q0, 0.3, [0.0, 0.0, 1.0], &one).unwrap();
        assert!(p.values.iter().all(|v| (v + 1.0).norm() < 1e-12));
        let m = 2.0;
        let h = 0.3;
        let qm = Field::constant(&g, Carrier::Omega, m);
        let p = conjugated_apply(&g, &qm, h, [0.0, 0.0, 1.0], &one).unwrap();
        for (i, v) in p.values.iter().enumerate() {
            let expect = if g.enclosing_to_omega(i).is_some() { -1.0 + h * h * m } else { -1.0 };
            assert!((v.re - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn phase_is_near_kernel_of_centered_operator() {
        let g = Grid::new(3, 33, 8).unwrap();
        let h = 0.4;
        let xi = [0.0, 0.0, 1.0];
        let zeta = [0.6, 0.8, 0.0];
        let w = g.field_from_fn(Carrier::Enclosing, |x| Complex64::from_polar(1.0, -dot3(x, zeta) / h));
        let q0 = Field::zeros(&g, Carrier::Omega);
        let p = conjugated_apply(&g, &q0, h, xi, &w).unwrap();
        let lat = g.lattice(Carrier::Enclosing);
        let mut worst: f64 = 0.0;
        lat.for_each_interior(|i| worst = worst.max(p.values[i].norm()));
        let r = g.spacing() / h;
        assert!(worst < r * r, "{worst}");
    }

    #[test]
    fn discrete_direction_is_close_and_exact() {
        let xi = [0.0, 0.6, 0.8];
        let zeta = [1.0, 0.0, 0.0];
        let s = 1.0 / 32.0;
        let h = 0.2;
        let z = discrete_direction(3, s, h, xi, zeta).unwrap();
        assert!((norm3(z) - 1.0).abs() < (s / h).powi(2));
        let sum: Complex64 = (0..3).map(|j| Complex64::new(s * xi[j] / h, s * z[j] / h).cosh()).sum();
        assert!((sum - 3.0).norm() < 1e-12);
    }

    #[test]
    fn zero_potential_gives_zero_remainder() {
        let g = Grid::new(3, 17, 4).unwrap();
        let d = cgo_directions(3, [2.0 * PI, 0.0, 0.0], 2.0, &CarlemanGate { c_omega: 1.0, m_bound: 0.5 }).unwrap();
        let q = Field::zeros(&g, Carrier::Omega);
        let sol = cgo_remainder(&g, &q, &d, Sign::Plus, &CgoOptions::default()).unwrap();
        assert_eq!(sol.remainder_norm(&g), 0.0);
        assert!(schrodinger_residual(&g, &q, &sol.u).unwrap() < 1e-12);
    }

    #[test]
    fn remainder_solves_schrodinger() {
        let g = Grid::new(3, 17, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_potential(&g, &mut rng, 3.0, 2);
        let d = cgo_directions(3, [2.0 * PI, 0.0, 0.0], 1.5, &CarlemanGate { c_omega: 2.0, m_bound: 1.0 }).unwrap();
        for sign in [Sign::Plus, Sign::Minus] {
            let sol = cgo_remainder(&g, &q, &d, sign, &CgoOptions::default()).unwrap();
            assert!(sol.stats.residual <= 1e-9);
            let r = schrodinger_residual(&g, &q, &sol.u).unwrap();
            assert!(r < 1e-8, "{r}");
            assert!(sol.remainder_norm(&g) > 0.0);
        }
    }

    #[test]
    fn resolution_gate() {
        let g = Grid::new(3, 17, 4).unwrap();
        let d = cgo_directions(3, [0.0; 3], 10.0, &gate()).unwrap();
        let q = Field::zeros(&g, Carrier::Omega);
        assert!(matches!(cgo_remainder(&g, &q, &d, Sign::Plus, &CgoOptions::default()), Err(Error::Resolution { .. })));
    }

    #[test]
    fn carleman_ratio_is_homogeneous_and_needs_compact_support() {
        let g = Grid::new(3, 17, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_compact_field(&g, &mut rng, 2, 4);
        let q = Field::zeros(&g, Carrier::Omega);
        let r1 = carleman_ratio(&g, &q, 0.3, [0.0, 0.0, 1.0], &u).unwrap();
        let u2 = Field { carrier: u.carrier, values: u.values.iter().map(|v| v * 2.0).collect() };
        let r2 = carleman_ratio(&g, &q, 0.3, [0.0, 0.0, 1.0], &u2).unwrap();
        assert!((r1 - r2).abs() < 1e-12 * r1);
        let one = Field::constant(&g, Carrier::Enclosing, Complex64::new(1.0, 0.0));
        assert!(carleman_ratio(&g, &q, 0.3, [0.0, 0.0, 1.0], &one).is_err());
    }

    #[test]
    fn hat_function_ratio_below_bound() {
        let g = Grid::new(3, 17, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cal = calibrate_carleman(&g, &mut rng, 50, &CALIBRATION_HS).unwrap();
        let mut u = Field::zeros(&g, Carrier::Enclosing);
        let lat = g.lattice(Carrier::Enclosing);
        u.values[lat.index([12, 12, 12])] = Complex64::new(1.0, 0.0);
        let q = Field::zeros(&g, Carrier::Omega);
        let r = carleman_ratio(&g, &q, 0.25, [0.0, 0.0, 1.0], &u).unwrap();
        assert!(r <= cal.bound());
    }

    #[test]
    fn closures_agree_on_the_pde() {
        let g = Grid::new(3, 17, 4).unwrap();
        let q = Field::constant(&g, Carrier::Omega, 2.0);
        let d = cgo_directions(3, [0.0; 3], 2.0, &CarlemanGate { c_omega: 2.0, m_bound: 1.0 }).unwrap();
        let mut norms = Vec::new();
        for method in [RemainderMethod::Periodic, RemainderMethod::MinNorm] {
            let opts = CgoOptions { method, ..CgoOptions::default() };
            let sol = cgo_remainder(&g, &q, &d, Sign::Minus, &opts).unwrap();
            assert!(schrodinger_residual(&g, &q, &sol.u).unwrap() < 1e-8);
            norms.push(sol.remainder_norm(&g));
        }
        assert!(norms[0] < 0.5 && norms[1] < 0.5, "{norms:?}");
    }

    #[test]
    fn modulated_fields_approach_the_carleman_constant() {
        let g = Grid::new(3, 17, 4).unwrap();
        let q = Field::zeros(&g, Carrier::Omega);
        let xi = [0.0, 0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let env = random_compact_field(&g, &mut rng, 1, 1);
        let rough = random_compact_field(&g, &mut rng, 2, 6);
        let plain = carleman_ratio(&g, &q, 0.25, xi, &rough).unwrap();
        let modulated = carleman_ratio(&g, &q, 0.25, xi, &modulate(&g, &env, [1.0, 0.0, 0.0], 0.25)).unwrap();
        assert!(modulated > 2.0 * plain, "{modulated} {plain}");
        assert!(modulated > 0.06 && modulated < 0.15, "{modulated}");
    }
}
