//! Tensor-product lattices on the unit box and on an enclosing padded box.
//!
//! The unit box `(0,1)^n` is sampled by `N` points per axis with spacing
//! `1/(N-1)`. The enclosing box adds `pad` layers on every side. Both
//! lattices store values with the first axis varying fastest.

use std::sync::OnceLock;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, Scalar};

/// Which lattice a field lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Carrier {
    /// The closed unit box.
    Omega,
    /// The padded box strictly containing the unit box.
    Enclosing,
}

/// Classification of a node of the enclosing lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Interior,
    Boundary,
    Padding,
}

/// Face of the unit box: `axis` in `0..n`, `upper` for the face `x_axis = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub axis: usize,
    pub upper: bool,
}

/// Shape of a cubic lattice with `m` points per axis in `n` dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lattice {
    pub n: usize,
    pub m: usize,
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.m.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.m.pow(axis as u32)
    }

    pub fn index(&self, ijk: [usize; 3]) -> usize {
        let mut idx = 0;
        for a in (0..self.n).rev() {
            idx = idx * self.m + ijk[a];
        }
        idx
    }

    pub fn multi_index(&self, mut idx: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for slot in out.iter_mut().take(self.n) {
            *slot = idx % self.m;
            idx /= self.m;
        }
        out
    }

    pub fn on_boundary(&self, idx: usize) -> bool {
        let ijk = self.multi_index(idx);
        (0..self.n).any(|a| ijk[a] == 0 || ijk[a] == self.m - 1)
    }

    /// Calls `f(idx)` for every node not on the lattice boundary.
    #[inline]
    pub fn for_each_interior(&self, mut f: impl FnMut(usize)) {
        let m = self.m;
        if m < 3 {
            return;
        }
        match self.n {
            2 => {
                for j in 1..m - 1 {
                    let base = j * m;
                    for i in 1..m - 1 {
                        f(base + i);
                    }
                }
            }
            3 => {
                for k in 1..m - 1 {
                    for j in 1..m - 1 {
                        let base = (k * m + j) * m;
                        for i in 1..m - 1 {
                            f(base + i);
                        }
                    }
                }
            }
            _ => unreachable!("lattice dimension must be 2 or 3"),
        }
    }

    /// Trapezoidal 1D weight of index `i` for spacing `h`.
    pub fn trapezoid_weight(&self, i: usize, h: f64) -> f64 {
        if i == 0 || i == self.m - 1 {
            0.5 * h
        } else {
            h
        }
    }
}

/// Discretization of the unit box and its enclosing box.
#[derive(Debug, Clone)]
pub struct Grid {
    n: usize,
    size: usize,
    pad: usize,
    spacing: f64,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    boundary_of: Vec<usize>,
    faces: Vec<Face>,
    face_weights: Vec<f64>,
    lambda1: OnceLock<f64>,
}

const NOT_BOUNDARY: usize = usize::MAX;

impl Grid {
    /// Builds the lattice for dimension `n`, `size` points per axis and `pad`
    /// enclosing layers.
    pub fn new(n: usize, size: usize, pad: usize) -> Result<Self> {
        if n != 2 && n != 3 {
            return Err(Error::InvalidGrid(format!("dimension must be 2 or 3, got {n}")));
        }
        if size % 2 == 0 {
            return Err(Error::InvalidGrid(format!("even N = {size}: an odd axis size is required")));
        }
        if size < 17 {
            return Err(Error::InvalidGrid(format!("N = {size} is below the minimum of 17")));
        }
        if pad == 0 {
            return Err(Error::InvalidGrid("pad = 0: the enclosing box must strictly contain the unit box".into()));
        }
        if pad < size / 4 {
            return Err(Error::InvalidGrid(format!(
                "pad = {pad} is below N/4 = {}; the enclosing margin must be at least 0.25",
                size / 4
            )));
        }
        let spacing = 1.0 / (size - 1) as f64;
        let lat = Lattice { n, m: size };
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut boundary_of = vec![NOT_BOUNDARY; lat.len()];
        let mut faces = Vec::new();
        let mut face_weights = Vec::new();
        for idx in 0..lat.len() {
            let ijk = lat.multi_index(idx);
            let on: Vec<usize> = (0..n).filter(|&a| ijk[a] == 0 || ijk[a] == size - 1).collect();
            if on.is_empty() {
                interior.push(idx);
                continue;
            }
            boundary_of[idx] = boundary.len();
            boundary.push(idx);
            // x1-faces take priority, then x2, then x3
            let axis = on[0];
            faces.push(Face { axis, upper: ijk[axis] == size - 1 });
            let mut w = 0.0;
            for &a in &on {
                let mut prod = 1.0;
                for t in (0..n).filter(|&t| t != a) {
                    prod *= lat.trapezoid_weight(ijk[t], spacing);
                }
                w += prod;
            }
            face_weights.push(w);
        }
        Ok(Grid { n, size, pad, spacing, interior, boundary, boundary_of, faces, face_weights, lambda1: OnceLock::new() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Points per axis on the unit box.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// First Dirichlet eigenvalue of the discrete Laplacian, computed once.
    pub fn lambda1(&self) -> Result<f64> {
        if let Some(v) = self.lambda1.get() {
            return Ok(*v);
        }
        let v = first_eigenvalue(self)?;
        Ok(*self.lambda1.get_or_init(|| v))
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn lattice(&self, carrier: Carrier) -> Lattice {
        match carrier {
            Carrier::Omega => Lattice { n: self.n, m: self.size },
            Carrier::Enclosing => Lattice { n: self.n, m: self.size + 2 * self.pad },
        }
    }

    pub fn len(&self, carrier: Carrier) -> usize {
        self.lattice(carrier).len()
    }

    /// Lower corner of the enclosing box, `-pad * spacing`.
    pub fn enclosing_origin(&self) -> f64 {
        -(self.pad as f64) * self.spacing
    }

    /// Interior nodes of the unit box (lattice indices).
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    /// Boundary nodes of the unit box (lattice indices), in boundary order.
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }

    pub fn boundary_len(&self) -> usize {
        self.boundary.len()
    }

    /// Boundary order position of an Omega lattice node, if it lies on the boundary.
    pub fn boundary_index(&self, idx: usize) -> Option<usize> {
        match self.boundary_of[idx] {
            NOT_BOUNDARY => None,
            b => Some(b),
        }
    }

    /// Face used for the outward normal of each boundary node.
    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Surface quadrature weights, one per boundary node.
    pub fn face_weights(&self) -> &[f64] {
        &self.face_weights
    }

    /// Coordinates of a node; unused trailing components are zero.
    pub fn coords(&self, carrier: Carrier, idx: usize) -> [f64; 3] {
        let ijk = self.lattice(carrier).multi_index(idx);
        let origin = match carrier {
            Carrier::Omega => 0.0,
            Carrier::Enclosing => self.enclosing_origin(),
        };
        let mut x = [0.0; 3];
        for a in 0..self.n {
            x[a] = origin + ijk[a] as f64 * self.spacing;
        }
        x
    }

    /// Enclosing-lattice index of an Omega-lattice node.
    pub fn omega_to_enclosing(&self, idx: usize) -> usize {
        let ijk = self.lattice(Carrier::Omega).multi_index(idx);
        let mut shifted = [0; 3];
        for a in 0..self.n {
            shifted[a] = ijk[a] + self.pad;
        }
        self.lattice(Carrier::Enclosing).index(shifted)
    }

    /// Omega-lattice index of an enclosing-lattice node, if it lies in the closed unit box.
    pub fn enclosing_to_omega(&self, idx: usize) -> Option<usize> {
        let ijk = self.lattice(Carrier::Enclosing).multi_index(idx);
        let mut shifted = [0; 3];
        for a in 0..self.n {
            if ijk[a] < self.pad || ijk[a] >= self.pad + self.size {
                return None;
            }
            shifted[a] = ijk[a] - self.pad;
        }
        Some(self.lattice(Carrier::Omega).index(shifted))
    }

    pub fn node_kind(&self, enclosing_idx: usize) -> NodeKind {
        match self.enclosing_to_omega(enclosing_idx) {
            None => NodeKind::Padding,
            Some(o) if self.boundary_of[o] != NOT_BOUNDARY => NodeKind::Boundary,
            Some(_) => NodeKind::Interior,
        }
    }

    /// Trapezoidal volume weights over a carrier.
    pub fn volume_weights(&self, carrier: Carrier) -> Vec<f64> {
        let lat = self.lattice(carrier);
        (0..lat.len())
            .map(|idx| {
                let ijk = lat.multi_index(idx);
                (0..self.n).map(|a| lat.trapezoid_weight(ijk[a], self.spacing)).product()
            })
            .collect()
    }

    pub fn field_from_fn<T: Scalar>(&self, carrier: Carrier, f: impl Fn([f64; 3]) -> T) -> Field<T> {
        let values = (0..self.len(carrier)).map(|i| f(self.coords(carrier, i))).collect();
        Field { carrier, values }
    }

    pub fn boundary_from_fn<T: Scalar>(&self, f: impl Fn([f64; 3]) -> T) -> BoundaryField<T> {
        let values = self.boundary.iter().map(|&i| f(self.coords(Carrier::Omega, i))).collect();
        BoundaryField { values }
    }

    /// Restriction of a field to the boundary of the unit box.
    pub fn trace<T: Scalar>(&self, u: &Field<T>) -> BoundaryField<T> {
        let values = match u.carrier {
            Carrier::Omega => self.boundary.iter().map(|&i| u.values[i]).collect(),
            Carrier::Enclosing => self.boundary.iter().map(|&i| u.values[self.omega_to_enclosing(i)]).collect(),
        };
        BoundaryField { values }
    }

    /// Restriction of an enclosing-box field to the closed unit box.
    pub fn restrict_to_omega<T: Scalar>(&self, u: &Field<T>) -> Field<T> {
        match u.carrier {
            Carrier::Omega => u.clone(),
            Carrier::Enclosing => {
                let values = (0..self.len(Carrier::Omega)).map(|i| u.values[self.omega_to_enclosing(i)]).collect();
                Field { carrier: Carrier::Omega, values }
            }
        }
    }

    /// Extension by zero of a unit-box field to the enclosing box (`q chi_Omega`).
    pub fn extend_by_zero<T: Scalar>(&self, u: &Field<T>) -> Field<T> {
        match u.carrier {
            Carrier::Enclosing => u.clone(),
            Carrier::Omega => {
                let mut values = vec![T::zero(); self.len(Carrier::Enclosing)];
                for (i, v) in u.values.iter().enumerate() {
                    values[self.omega_to_enclosing(i)] = *v;
                }
                Field { carrier: Carrier::Enclosing, values }
            }
        }
    }

    /// Field with Dirichlet data `f` on the boundary and zeros inside.
    pub fn lift_boundary<T: Scalar>(&self, f: &BoundaryField<T>) -> Result<Field<T>> {
        self.check_boundary(f)?;
        let mut values = vec![T::zero(); self.len(Carrier::Omega)];
        for (b, &i) in self.boundary.iter().enumerate() {
            values[i] = f.values[b];
        }
        Ok(Field { carrier: Carrier::Omega, values })
    }

    pub fn check_field<T: Scalar>(&self, u: &Field<T>, carrier: Carrier) -> Result<()> {
        let expected = self.len(carrier);
        if u.carrier != carrier || u.values.len() != expected {
            return Err(Error::CarrierMismatch { expected, got: u.values.len() });
        }
        Ok(())
    }

    pub fn check_boundary<T: Scalar>(&self, f: &BoundaryField<T>) -> Result<()> {
        if f.values.len() != self.boundary.len() {
            return Err(Error::CarrierMismatch { expected: self.boundary.len(), got: f.values.len() });
        }
        Ok(())
    }
}

/// Grid function on a carrier lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T = f64> {
    pub carrier: Carrier,
    pub values: Vec<T>,
}

impl<T: Scalar> Field<T> {
    pub fn zeros(grid: &Grid, carrier: Carrier) -> Self {
        Field { carrier, values: vec![T::zero(); grid.len(carrier)] }
    }

    pub fn constant(grid: &Grid, carrier: Carrier, c: T) -> Self {
        Field { carrier, values: vec![c; grid.len(carrier)] }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Discrete L2 norm with trapezoidal weights.
    pub fn l2_norm(&self, grid: &Grid) -> f64 {
        let w = grid.volume_weights(self.carrier);
        self.values.iter().zip(&w).map(|(v, w)| w * v.abs_sqr()).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Field<T>) -> Field<T> {
        assert_eq!(self.carrier, other.carrier);
        Field { carrier: self.carrier, values: self.values.iter().zip(&other.values).map(|(a, b)| *a - *b).collect() }
    }
}

impl Field<f64> {
    pub fn to_complex(&self) -> Field<Complex64> {
        Field { carrier: self.carrier, values: self.values.iter().map(|&v| Complex64::new(v, 0.0)).collect() }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Grid function on the boundary nodes of the unit box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryField<T = f64> {
    pub values: Vec<T>,
}

impl<T: Scalar> BoundaryField<T> {
    pub fn zeros(grid: &Grid) -> Self {
        BoundaryField { values: vec![T::zero(); grid.boundary_len()] }
    }

    pub fn constant(grid: &Grid, c: T) -> Self {
        BoundaryField { values: vec![c; grid.boundary_len()] }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Surface L2 norm.
    pub fn l2_norm(&self, grid: &Grid) -> f64 {
        self.values.iter().zip(grid.face_weights()).map(|(v, w)| w * v.abs_sqr()).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &BoundaryField<T>) -> BoundaryField<T> {
        BoundaryField { values: self.values.iter().zip(&other.values).map(|(a, b)| *a - *b).collect() }
    }

    pub fn scaled(&self, s: T) -> BoundaryField<T> {
        BoundaryField { values: self.values.iter().map(|v| *v * s).collect() }
    }
}

impl BoundaryField<f64> {
    pub fn to_complex(&self) -> BoundaryField<Complex64> {
        BoundaryField { values: self.values.iter().map(|&v| Complex64::new(v, 0.0)).collect() }
    }
}

/// Writes `-Delta_h x` (plus `q x` when given) at interior nodes of the
/// lattice; lattice-boundary rows are set to zero.
pub(crate) fn apply_schrodinger<T: Scalar>(lat: &Lattice, spacing: f64, q: Option<&[f64]>, x: &[T], y: &mut [T]) {
    let inv = 1.0 / (spacing * spacing);
    let diag = 2.0 * lat.n as f64 * inv;
    let s1 = lat.stride(1);
    let s2 = if lat.n == 3 { lat.stride(2) } else { 0 };
    y.iter_mut().for_each(|v| *v = T::zero());
    let three = lat.n == 3;
    lat.for_each_interior(|i| {
        let mut nb = x[i - 1] + x[i + 1] + x[i - s1] + x[i + s1];
        if three {
            nb += x[i - s2] + x[i + s2];
        }
        let mut v = x[i].scale(diag) - nb.scale(inv);
        if let Some(q) = q {
            v += x[i].scale(q[i]);
        }
        y[i] = v;
    });
}

/// Discrete `-Delta` at interior nodes of the carrier; boundary rows pass the
/// input value through.
pub fn laplacian_apply<T: Scalar>(grid: &Grid, u: &Field<T>) -> Result<Field<T>> {
    grid.check_field(u, u.carrier)?;
    let lat = grid.lattice(u.carrier);
    let mut out = vec![T::zero(); lat.len()];
    apply_schrodinger(&lat, grid.spacing(), None, &u.values, &mut out);
    for (idx, v) in out.iter_mut().enumerate() {
        if lat.on_boundary(idx) {
            *v = u.values[idx];
        }
    }
    Ok(Field { carrier: u.carrier, values: out })
}

/// Outward normal derivative on the unit-box boundary by a one-sided
/// three-point difference along the node's assigned face normal.
pub fn normal_derivative<T: Scalar>(grid: &Grid, u: &Field<T>) -> Result<BoundaryField<T>> {
    let lat = grid.lattice(u.carrier);
    grid.check_field(u, u.carrier)?;
    let inv2h = 1.0 / (2.0 * grid.spacing());
    let values = grid
        .boundary_nodes()
        .iter()
        .zip(grid.faces())
        .map(|(&b, face)| {
            let b = match u.carrier {
                Carrier::Omega => b,
                Carrier::Enclosing => grid.omega_to_enclosing(b),
            };
            let stride = lat.stride(face.axis);
            let (i1, i2) = if face.upper { (b - stride, b - 2 * stride) } else { (b + stride, b + 2 * stride) };
            (u.values[b].scale(3.0) - u.values[i1].scale(4.0) + u.values[i2]).scale(inv2h)
        })
        .collect();
    Ok(BoundaryField { values })
}

/// `sum_w u conj(w)` with trapezoidal weights.
pub fn inner_product<T: Scalar>(grid: &Grid, u: &Field<T>, w: &Field<T>) -> Result<T> {
    if u.carrier != w.carrier {
        return Err(Error::DimensionMismatch("inner product of fields on different carriers".into()));
    }
    grid.check_field(u, u.carrier)?;
    grid.check_field(w, w.carrier)?;
    let weights = grid.volume_weights(u.carrier);
    let mut s = T::zero();
    for ((a, b), wt) in u.values.iter().zip(&w.values).zip(&weights) {
        s += (*a * b.conj()).scale(*wt);
    }
    Ok(s)
}

/// `sum_b p_b conj(q_b) w_b` over the boundary nodes.
pub fn surface_integral<T: Scalar>(grid: &Grid, p: &BoundaryField<T>, q: &BoundaryField<T>) -> Result<T> {
    grid.check_boundary(p)?;
    grid.check_boundary(q)?;
    let mut s = T::zero();
    for ((a, b), w) in p.values.iter().zip(&q.values).zip(grid.face_weights()) {
        s += (*a * b.conj()).scale(*w);
    }
    Ok(s)
}

/// Smallest eigenvalue of the discrete Dirichlet Laplacian on the unit box,
/// by inverse power iteration with Rayleigh quotients.
pub fn first_eigenvalue(grid: &Grid) -> Result<f64> {
    first_eigenvalue_with(grid, 1e-10, 200)
}

pub fn first_eigenvalue_with(grid: &Grid, rel_residual: f64, max_iter: usize) -> Result<f64> {
    let lat = grid.lattice(Carrier::Omega);
    let h = grid.spacing();
    let op = |x: &[f64], y: &mut [f64]| apply_schrodinger(&lat, h, None, x, y);
    let mut x = vec![0.0; lat.len()];
    for &i in grid.interior_nodes() {
        x[i] = 1.0;
    }
    let mut ax = vec![0.0; lat.len()];
    let mut last = f64::NAN;
    for _ in 0..max_iter {
        let xn = linalg::norm(&x);
        x.iter_mut().for_each(|v| *v /= xn);
        op(&x, &mut ax);
        let lambda = linalg::dot(&x, &ax);
        let res: f64 = ax.iter().zip(&x).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
        last = res / lambda;
        if last <= rel_residual {
            return Ok(lambda);
        }
        let mut y = x.clone();
        linalg::cg(op, &x, &mut y, 1e-12, 20 * lat.len())?;
        x = y;
    }
    Err(Error::NonConvergence { solver: "inverse power iteration", iterations: max_iter, residual: last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn counts_for_small_lattices() {
        let g = Grid::new(2, 17, 4).unwrap();
        assert_eq!(g.interior_nodes().len(), 15 * 15);
        assert_eq!(g.boundary_len(), 64);
        let g3 = Grid::new(3, 17, 4).unwrap();
        assert_eq!(g3.boundary_len(), 1538);
        // enumerate: at least one coordinate in {0, N-1}
        let lat = g3.lattice(Carrier::Omega);
        let brute = (0..lat.len()).filter(|&i| lat.on_boundary(i)).count();
        assert_eq!(brute, 6 * 15 * 15 + 12 * 15 + 8);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(Grid::new(2, 16, 4), Err(Error::InvalidGrid(m)) if m.contains("even N")));
        assert!(Grid::new(2, 17, 0).is_err());
        assert!(Grid::new(2, 17, 3).is_err());
        assert!(Grid::new(4, 17, 4).is_err());
        assert!(Grid::new(2, 15, 4).is_err());
    }

    #[test]
    fn every_enclosing_node_classified_once() {
        let g = Grid::new(3, 17, 4).unwrap();
        let mut counts = [0usize; 3];
        for idx in 0..g.len(Carrier::Enclosing) {
            match g.node_kind(idx) {
                NodeKind::Interior => counts[0] += 1,
                NodeKind::Boundary => counts[1] += 1,
                NodeKind::Padding => counts[2] += 1,
            }
        }
        assert_eq!(counts[0], 15usize.pow(3));
        assert_eq!(counts[1], 1538);
        assert_eq!(counts.iter().sum::<usize>(), 25usize.pow(3));
    }

    #[test]
    fn face_weights_sum_to_surface_measure() {
        for n in [2, 3] {
            let g = Grid::new(n, 17, 4).unwrap();
            let total: f64 = g.face_weights().iter().sum();
            assert!((total - 2.0 * n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn enclosing_box_extent() {
        let g = Grid::new(2, 17, 4).unwrap();
        let lat = g.lattice(Carrier::Enclosing);
        let last = g.coords(Carrier::Enclosing, lat.len() - 1);
        assert!((g.enclosing_origin() + 0.25).abs() < 1e-15);
        assert!((last[0] - 1.25).abs() < 1e-12);
        assert!((last[1] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn laplacian_of_constants_and_affine_vanishes() {
        let g = Grid::new(2, 17, 4).unwrap();
        for u in [g.field_from_fn(Carrier::Omega, |_| 1.0), g.field_from_fn(Carrier::Omega, |x| x[0])] {
            let l = laplacian_apply(&g, &u).unwrap();
            for &i in g.interior_nodes() {
                assert!(l.values[i].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn laplacian_of_sine_product() {
        let g = Grid::new(2, 33, 8).unwrap();
        let u = g.field_from_fn(Carrier::Omega, |x| (PI * x[0]).sin() * (PI * x[1]).sin());
        let l = laplacian_apply(&g, &u).unwrap();
        let mut worst: f64 = 0.0;
        for &i in g.interior_nodes() {
            worst = worst.max((l.values[i] - 2.0 * PI * PI * u.values[i]).abs() / (2.0 * PI * PI * u.values[i]).abs());
        }
        assert!(worst <= 0.01, "max relative error {worst}");
    }

    #[test]
    fn normal_derivative_examples() {
        let g = Grid::new(2, 17, 4).unwrap();
        let one = g.field_from_fn(Carrier::Omega, |_| 1.0);
        assert!(normal_derivative(&g, &one).unwrap().max_abs() < 1e-12);
        let x1 = g.field_from_fn(Carrier::Omega, |x| x[0]);
        let d = normal_derivative(&g, &x1).unwrap();
        for (v, f) in d.values.iter().zip(g.faces()) {
            let expect = if f.axis == 0 { if f.upper { 1.0 } else { -1.0 } } else { 0.0 };
            assert!((v - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn normal_derivative_of_harmonic_function() {
        let g = Grid::new(2, 65, 16).unwrap();
        let u = g.field_from_fn(Carrier::Omega, |x| (PI * x[0]).sin() * (PI * x[1]).sinh() / PI.sinh());
        let d = normal_derivative(&g, &u).unwrap();
        let coth = PI.cosh() / PI.sinh();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for ((v, f), &b) in d.values.iter().zip(g.faces()).zip(g.boundary_nodes()) {
            if f.axis == 1 && f.upper {
                let x = g.coords(Carrier::Omega, b);
                let exact = PI * (PI * x[0]).sin() * coth;
                worst = worst.max((v - exact).abs());
                scale = scale.max(exact.abs());
            }
        }
        assert!(worst <= 0.01 * scale, "{worst} vs {scale}");
    }

    #[test]
    fn quadrature_examples() {
        let g = Grid::new(2, 65, 16).unwrap();
        let one = g.field_from_fn(Carrier::Omega, |_| 1.0);
        assert!((inner_product(&g, &one, &one).unwrap() - 1.0).abs() < 1e-12);
        let b1 = BoundaryField::constant(&g, 1.0);
        assert!((surface_integral(&g, &b1, &b1).unwrap() - 4.0).abs() < 1e-12);
        let u = g.field_from_fn(Carrier::Omega, |x| (PI * x[0]).sin() * (PI * x[1]).sin());
        assert!((inner_product(&g, &u, &u).unwrap() - 0.25).abs() < 1e-4);
    }

    #[test]
    fn complex_inner_product_is_conjugate_linear_in_second_argument() {
        let g = Grid::new(2, 17, 4).unwrap();
        let u = g.field_from_fn(Carrier::Omega, |x| Complex64::new(x[0], x[1]));
        let i = Complex64::new(0.0, 1.0);
        let w = Field { carrier: Carrier::Omega, values: u.values.iter().map(|v| *v * i).collect() };
        let a = inner_product(&g, &u, &u).unwrap();
        let b = inner_product(&g, &u, &w).unwrap();
        assert!((b - a * i.conj()).norm() < 1e-12);
    }

    #[test]
    fn eigenvalue_matches_discrete_closed_form() {
        let g = Grid::new(2, 17, 4).unwrap();
        let h = g.spacing();
        let exact = 2.0 * 4.0 / (h * h) * (PI * h / 2.0).sin().powi(2);
        let lam = first_eigenvalue(&g).unwrap();
        assert!((lam - exact).abs() / exact < 1e-10);
    }

    #[test]
    fn eigenvalue_near_continuum() {
        let g = Grid::new(2, 65, 16).unwrap();
        let lam = first_eigenvalue(&g).unwrap();
        assert!((lam - 2.0 * PI * PI).abs() / (2.0 * PI * PI) < 1e-3);
        let g3 = Grid::new(3, 33, 8).unwrap();
        let lam3 = first_eigenvalue(&g3).unwrap();
        assert!((lam3 - 3.0 * PI * PI).abs() / (3.0 * PI * PI) < 5e-3);
    }

    #[test]
    fn eigenvalue_monotone_under_refinement() {
        let vals: Vec<f64> =
            [17, 33, 65].iter().map(|&n| first_eigenvalue(&Grid::new(2, n, n / 4).unwrap()).unwrap()).collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2] && vals[2] < 2.0 * PI * PI);
    }
}
