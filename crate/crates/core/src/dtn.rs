//! Dirichlet-to-Neumann maps and their matrix representations over a
//! boundary dictionary.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{solve_schrodinger, solve_semilinear, SolveOptions};
use crate::grid::{normal_derivative, BoundaryField, Carrier, Field, Grid};
use crate::linalg::{self, Scalar};
use crate::nonlinearity::Nonlinearity;

/// `Lambda_a(f)`: normal derivative of the semilinear solution.
pub fn dtn_semilinear(grid: &Grid, a: &Nonlinearity, f: &BoundaryField<f64>, opts: &SolveOptions) -> Result<BoundaryField<f64>> {
    let (u, _) = solve_semilinear(grid, a, f, opts)?;
    normal_derivative(grid, &u)
}

/// Potential `a'(u_a(f))` of the linearized problem at `f`.
pub fn linearized_potential(grid: &Grid, a: &Nonlinearity, f: &BoundaryField<f64>, opts: &SolveOptions) -> Result<Field<f64>> {
    let (u, _) = solve_semilinear(grid, a, f, opts)?;
    Ok(Field { carrier: Carrier::Omega, values: u.values.iter().map(|&v| a.deriv(v)).collect() })
}

/// `Lambda'_a(f) h`: normal derivative of the solution of
/// `-Delta v + a'(u_a(f)) v = 0`, `v = h` on the boundary.
pub fn dtn_linearized<T: Scalar>(
    grid: &Grid,
    a: &Nonlinearity,
    f: &BoundaryField<f64>,
    h: &BoundaryField<T>,
    opts: &SolveOptions,
) -> Result<BoundaryField<T>> {
    let q = linearized_potential(grid, a, f, opts)?;
    dtn_schrodinger(grid, &q, a.params().c, h, opts)
}

/// `Lambda_q f` for real or complex data.
pub fn dtn_schrodinger<T: Scalar>(
    grid: &Grid,
    q: &Field<f64>,
    c: f64,
    f: &BoundaryField<T>,
    opts: &SolveOptions,
) -> Result<BoundaryField<T>> {
    let u = solve_schrodinger(grid, q, c, f, opts)?;
    normal_derivative(grid, &u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictionaryKind {
    /// Constant levels plus per-face sine traces.
    Standard,
    /// One indicator per boundary node.
    Nodal,
}

/// Ordered boundary probe set.
#[derive(Debug, Clone)]
pub struct BoundaryDictionary {
    pub kind: DictionaryKind,
    pub elements: Vec<BoundaryField<f64>>,
}

impl BoundaryDictionary {
    /// Constants `lambda` for every level, then for every face and
    /// `k = 1..=trig_cutoff` the trace `prod_t sin(k pi x_t)` over the
    /// tangential coordinates, zero off the face.
    pub fn standard(grid: &Grid, levels: &[f64], trig_cutoff: usize) -> Result<Self> {
        if levels.is_empty() && trig_cutoff == 0 {
            return Err(Error::InvalidArgument("empty dictionary".into()));
        }
        let n = grid.dim();
        let mut elements: Vec<BoundaryField<f64>> = levels.iter().map(|&l| BoundaryField::constant(grid, l)).collect();
        for axis in 0..n {
            for upper in [false, true] {
                let side = if upper { 1.0 } else { 0.0 };
                for k in 1..=trig_cutoff {
                    let kp = k as f64 * std::f64::consts::PI;
                    elements.push(grid.boundary_from_fn(|x| {
                        if (x[axis] - side).abs() > 1e-12 {
                            return 0.0;
                        }
                        (0..n).filter(|&t| t != axis).map(|t| (kp * x[t]).sin()).product()
                    }));
                }
            }
        }
        Ok(BoundaryDictionary { kind: DictionaryKind::Standard, elements })
    }

    pub fn nodal(grid: &Grid) -> Self {
        let m = grid.boundary_len();
        let elements = (0..m)
            .map(|j| {
                let mut values = vec![0.0; m];
                values[j] = 1.0;
                BoundaryField { values }
            })
            .collect();
        BoundaryDictionary { kind: DictionaryKind::Nodal, elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Condition number of the surface Gram matrix (infinite when singular).
    pub fn gram_condition(&self, grid: &Grid) -> Result<f64> {
        let m = self.len();
        let mut gram = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = crate::grid::surface_integral(grid, &self.elements[i], &self.elements[j])?;
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        let eig = gram.symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(if min <= 0.0 { f64::INFINITY } else { max / min })
    }
}

/// Which map a [`DtnOperator`] represents.
#[derive(Debug, Clone)]
pub enum DtnMap {
    Semilinear(Nonlinearity),
    /// Linearization of `Lambda_a` at the data `f`.
    Linearized { a: Nonlinearity, f: BoundaryField<f64> },
    Schrodinger { q: Field<f64>, c: f64 },
}

impl DtnMap {
    pub fn label(&self) -> String {
        match self {
            DtnMap::Semilinear(a) => format!("semilinear:{:?}", a.family),
            DtnMap::Linearized { a, .. } => format!("linearized:{:?}", a.family),
            DtnMap::Schrodinger { .. } => "schrodinger".to_string(),
        }
    }
}

/// Matrix with one column per dictionary element and one row per boundary node.
#[derive(Debug, Clone, PartialEq)]
pub struct DtnOperator {
    pub kind: String,
    pub dictionary: DictionaryKind,
    pub rows: usize,
    pub cols: usize,
    /// Column-major entries.
    pub data: Vec<f64>,
    /// Surface L2 norm of each dictionary element.
    pub scales: Vec<f64>,
}

impl DtnOperator {
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Applies a nodal-dictionary operator to arbitrary boundary data.
    pub fn apply_nodal<T: Scalar>(&self, g: &BoundaryField<T>) -> Result<BoundaryField<T>> {
        if self.dictionary != DictionaryKind::Nodal {
            return Err(Error::InvalidArgument("apply requires a nodal dictionary".into()));
        }
        if g.values.len() != self.cols {
            return Err(Error::DimensionMismatch(format!("{} columns, data of length {}", self.cols, g.values.len())));
        }
        let mut out = vec![T::zero(); self.rows];
        for (j, gj) in g.values.iter().enumerate() {
            if *gj == T::zero() {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.column(j)) {
                *o += gj.scale(m);
            }
        }
        Ok(BoundaryField { values: out })
    }

    /// Multiplicative entrywise noise `m (1 + delta eta)`, `eta` uniform on `[-1, 1]`.
    pub fn with_noise(&self, delta: f64, seed: u64) -> DtnOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = self.data.iter().map(|&m| m * (1.0 + delta * rng.gen_range(-1.0..=1.0))).collect();
        DtnOperator { data, ..self.clone() }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let scales: Vec<String> = self.scales.iter().map(|s| format!("{s:e}")).collect();
        writeln!(
            w,
            "# kind={} dictionary={:?} rows={} cols={} scales={}",
            self.kind.replace(' ', "_"),
            self.dictionary,
            self.rows,
            self.cols,
            scales.join(";")
        )?;
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wr.write_record((0..self.cols).map(|j| format!("c{j}")))?;
        for i in 0..self.rows {
            wr.write_record((0..self.cols).map(|j| format!("{:e}", self.get(i, j))))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<DtnOperator> {
        let mut text = String::new();
        let mut r = r;
        r.read_to_string(&mut text)?;
        let (meta, body) = text.split_once('\n').ok_or_else(|| Error::Config("empty operator file".into()))?;
        let meta = meta.strip_prefix("# ").ok_or_else(|| Error::Config("missing metadata line".into()))?;
        let mut kind = String::new();
        let mut dictionary = DictionaryKind::Standard;
        let mut rows = 0;
        let mut cols = 0;
        let mut scales = Vec::new();
        for item in meta.split_whitespace() {
            let (k, v) = item.split_once('=').ok_or_else(|| Error::Config(format!("bad metadata item {item}")))?;
            let bad = |_| Error::Config(format!("bad metadata value {item}"));
            match k {
                "kind" => kind = v.to_string(),
                "dictionary" => dictionary = if v == "Nodal" { DictionaryKind::Nodal } else { DictionaryKind::Standard },
                "rows" => rows = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "cols" => cols = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "scales" => {
                    scales = v
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<_>>()?
                }
                _ => {}
            }
        }
        let mut data = vec![0.0; rows * cols];
        let mut rd = csv::Reader::from_reader(body.as_bytes());
        let mut count = 0;
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            if i >= rows || rec.len() != cols {
                return Err(Error::DimensionMismatch(format!("row {i} does not fit a {rows}x{cols} operator")));
            }
            for (j, v) in rec.iter().enumerate() {
                data[j * rows + i] = v.parse().map_err(|_| Error::Config(format!("bad entry at ({i},{j})")))?;
            }
            count += 1;
        }
        if count != rows || scales.len() != cols {
            return Err(Error::DimensionMismatch(format!("expected {rows} rows and {cols} scales")));
        }
        Ok(DtnOperator { kind, dictionary, rows, cols, data, scales })
    }
}

/// Assembles `Lambda(dict_j)` column by column, in parallel over columns.
pub fn dtn_matrix(grid: &Grid, map: &DtnMap, dict: &BoundaryDictionary, opts: &SolveOptions) -> Result<DtnOperator> {
    // the linearized map is the Schrodinger map of a'(u_a(f))
    let schrodinger = match map {
        DtnMap::Linearized { a, f } => Some((linearized_potential(grid, a, f, opts)?, a.params().c)),
        DtnMap::Schrodinger { q, c } => Some((q.clone(), *c)),
        DtnMap::Semilinear(_) => None,
    };
    let columns: Vec<Vec<f64>> = dict
        .elements
        .par_iter()
        .map(|e| {
            let col = match (&schrodinger, map) {
                (Some((q, c)), _) => dtn_schrodinger(grid, q, *c, e, opts)?,
                (None, DtnMap::Semilinear(a)) => dtn_semilinear(grid, a, e, opts)?,
                _ => unreachable!(),
            };
            Ok(col.values)
        })
        .collect::<Result<_>>()?;
    let rows = grid.boundary_len();
    let cols = columns.len();
    let data = columns.concat();
    let scales = dict.elements.iter().map(|e| e.l2_norm(grid)).collect();
    let op = DtnOperator { kind: map.label(), dictionary: dict.kind, rows, cols, data, scales };
    if !op.is_finite() {
        return Err(Error::NonFinite("dtn matrix"));
    }
    Ok(op)
}

/// Spectral norm of `(B - A) diag(1 / scale_j)`.
pub fn discrepancy(a: &DtnOperator, b: &DtnOperator) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::DimensionMismatch(format!(
            "operators of shape {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut diff = vec![0.0; a.data.len()];
    for j in 0..a.cols {
        let s = a.scales[j];
        let inv = if s > 0.0 { 1.0 / s } else { 0.0 };
        for i in 0..a.rows {
            let k = j * a.rows + i;
            diff[k] = (b.data[k] - a.data[k]) * inv;
        }
    }
    Ok(linalg::spectral_norm(&diff, a.rows, a.cols, 1e-12, 10_000))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2() -> Grid {
        Grid::new(2, 17, 4).unwrap()
    }

    #[test]
    fn zero_nonlinearity_on_constants_and_affine() {
        let g = grid2();
        let opts = SolveOptions::default();
        let d = dtn_semilinear(&g, &Nonlinearity::zero(), &BoundaryField::constant(&g, 1.0), &opts).unwrap();
        assert!(d.max_abs() < 1e-9);
        let f = g.boundary_from_fn(|x| x[0]);
        let d = dtn_semilinear(&g, &Nonlinearity::zero(), &f, &opts).unwrap();
        for (b, face) in g.faces().iter().enumerate() {
            let expect = if face.axis == 0 { if face.upper { 1.0 } else { -1.0 } } else { 0.0 };
            assert!((d.values[b] - expect).abs() < 1e-8, "{b}: {}", d.values[b]);
        }
    }

    #[test]
    fn linearized_of_linear_is_independent_of_f() {
        let g = grid2();
        let opts = SolveOptions::default();
        let a = Nonlinearity::linear(-3.0);
        let h = g.boundary_from_fn(|x| (x[0] + 2.0 * x[1]).sin());
        let f1 = BoundaryField::constant(&g, 0.5);
        let f2 = g.boundary_from_fn(|x| x[1] * 4.0);
        let d1 = dtn_linearized(&g, &a, &f1, &h, &opts).unwrap();
        let d2 = dtn_linearized(&g, &a, &f2, &h, &opts).unwrap();
        assert!(d1.sub(&d2).max_abs() < 1e-8);
    }

    #[test]
    fn reciprocity_for_real_potential() {
        let g = Grid::new(2, 33, 8).unwrap();
        let opts = SolveOptions::default();
        let q = g.field_from_fn(Carrier::Omega, |x| 1.0 + (3.0 * x[0]).sin() * x[1]);
        // smooth data vanishing at the corners keeps the corner error small
        let f = g.boundary_from_fn(|x| (std::f64::consts::PI * x[0]).sin() * (1.0 + x[1]));
        let h = g.boundary_from_fn(|x| (std::f64::consts::PI * x[1]).sin() * (2.0 - x[0]));
        let lf = dtn_schrodinger(&g, &q, 0.0, &f, &opts).unwrap();
        let lh = dtn_schrodinger(&g, &q, 0.0, &h, &opts).unwrap();
        let s1 = crate::grid::surface_integral(&g, &lf, &h).unwrap();
        let s2 = crate::grid::surface_integral(&g, &f, &lh).unwrap();
        assert!((s1 - s2).abs() < 1e-2 * (s1.abs() + s2.abs()), "{s1} {s2}");
    }

    #[test]
    fn dictionary_counts_and_conditioning() {
        let g = Grid::new(3, 17, 4).unwrap();
        let d = BoundaryDictionary::standard(&g, &[-1.0, 0.5], 3).unwrap();
        assert_eq!(d.len(), 2 + 6 * 3);
        // the two constants are parallel
        assert!(d.gram_condition(&g).unwrap() > 1e12);
        let d = BoundaryDictionary::standard(&g, &[1.0], 3).unwrap();
        assert!(d.gram_condition(&g).unwrap() < 100.0);
    }

    #[test]
    fn single_constant_dictionary_gives_zero_column() {
        let g = grid2();
        let d = BoundaryDictionary::standard(&g, &[1.0], 0).unwrap();
        let q = Field::zeros(&g, Carrier::Omega);
        let m = dtn_matrix(&g, &DtnMap::Schrodinger { q, c: 0.0 }, &d, &SolveOptions::default()).unwrap();
        assert_eq!(m.cols, 1);
        assert!(m.data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn matrix_is_deterministic_and_matches_columns() {
        let g = grid2();
        let opts = SolveOptions::default();
        let q = g.field_from_fn(Carrier::Omega, |x| 2.0 + x[0] * x[1]);
        let d = BoundaryDictionary::standard(&g, &[1.0], 2).unwrap();
        let map = DtnMap::Schrodinger { q: q.clone(), c: 0.0 };
        let m1 = dtn_matrix(&g, &map, &d, &opts).unwrap();
        let m2 = dtn_matrix(&g, &map, &d, &opts).unwrap();
        assert_eq!(m1, m2);
        for (j, e) in d.elements.iter().enumerate() {
            let col = dtn_schrodinger(&g, &q, 0.0, e, &opts).unwrap();
            assert_eq!(col.values.as_slice(), m1.column(j));
        }
    }

    #[test]
    fn discrepancy_of_rank_one_perturbation() {
        let g = grid2();
        let d = BoundaryDictionary::standard(&g, &[1.0], 2).unwrap();
        let q = Field::constant(&g, Carrier::Omega, 1.0);
        let a = dtn_matrix(&g, &DtnMap::Schrodinger { q, c: 0.0 }, &d, &SolveOptions::default()).unwrap();
        assert_eq!(discrepancy(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        let eps = 1e-3;
        b.data[2 * b.rows + 5] += eps;
        let dd = discrepancy(&a, &b).unwrap();
        assert!((dd - eps / a.scales[2]).abs() < 1e-12 * (1.0 + dd));
    }

    #[test]
    fn nodal_apply_matches_direct_solve() {
        let g = grid2();
        let opts = SolveOptions::default();
        let q = g.field_from_fn(Carrier::Omega, |x| 1.0 + x[0]);
        let m = dtn_matrix(&g, &DtnMap::Schrodinger { q: q.clone(), c: 0.0 }, &BoundaryDictionary::nodal(&g), &opts).unwrap();
        let f = g.boundary_from_fn(|x| (2.0 * x[0] - x[1]).cos());
        let direct = dtn_schrodinger(&g, &q, 0.0, &f, &opts).unwrap();
        let applied = m.apply_nodal(&f).unwrap();
        assert!(direct.sub(&applied).max_abs() < 1e-8);
    }

    #[test]
    fn csv_round_trip() {
        let g = grid2();
        let d = BoundaryDictionary::standard(&g, &[1.0, -1.0], 1).unwrap();
        let q = Field::constant(&g, Carrier::Omega, 0.5);
        let a = dtn_matrix(&g, &DtnMap::Schrodinger { q, c: 0.0 }, &d, &SolveOptions::default()).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.lines().nth(1).unwrap().starts_with("c0,c1"));
        let b = DtnOperator::read_csv(buf.as_slice()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_is_seeded_and_scaled() {
        let g = grid2();
        let d = BoundaryDictionary::standard(&g, &[1.0], 2).unwrap();
        let q = Field::constant(&g, Carrier::Omega, 0.5);
        let a = dtn_matrix(&g, &DtnMap::Schrodinger { q, c: 0.0 }, &d, &SolveOptions::default()).unwrap();
        let n1 = a.with_noise(1e-2, 7);
        assert_eq!(n1, a.with_noise(1e-2, 7));
        assert_ne!(n1, a.with_noise(1e-2, 8));
        for (x, y) in a.data.iter().zip(&n1.data) {
            assert!((x - y).abs() <= 1e-2 * x.abs() + 1e-300);
        }
        assert_eq!(a.with_noise(0.0, 3), a);
    }
}
