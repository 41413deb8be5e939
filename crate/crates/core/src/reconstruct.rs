//! Fourier probing of potential differences with CGO pairs, truncated
//! Fourier synthesis, recovery of `a'` and `a` from linearized DtN data, the
//! balancing rule for `rho` and the logarithmic stability modulus.

use std::f64::consts::TAU;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgo::{cgo_directions, cgo_remainder, check_resolution, CarlemanGate, CgoDirections, CgoOptions, CgoSolution, Sign, Vec3};
use crate::dtn::{dtn_schrodinger, linearized_potential, DtnOperator};
use crate::error::{Error, Result};
use crate::forward::SolveOptions;
use crate::grid::{surface_integral, BoundaryField, Carrier, Field, Grid};
use crate::nonlinearity::Nonlinearity;

/// Either a fixed `rho` or `"auto"` for the balancing rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRho", into = "RawRho")]
pub enum RhoSpec {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawRho {
    Number(f64),
    Text(String),
}

impl TryFrom<RawRho> for RhoSpec {
    type Error = String;

    fn try_from(raw: RawRho) -> std::result::Result<Self, String> {
        match raw {
            RawRho::Number(r) => Ok(RhoSpec::Fixed(r)),
            RawRho::Text(t) if t == "auto" => Ok(RhoSpec::Auto),
            RawRho::Text(t) => Err(format!("rho must be a number or \"auto\", got {t:?}")),
        }
    }
}

impl From<RhoSpec> for RawRho {
    fn from(r: RhoSpec) -> RawRho {
        match r {
            RhoSpec::Auto => RawRho::Text("auto".into()),
            RhoSpec::Fixed(v) => RawRho::Number(v),
        }
    }
}

/// Which modes of the lattice `2 pi Z^n`, `|z|_inf <= k_max`, are probed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cutoff {
    /// `|k| <= rho^(1/n)`.
    Balanced,
    All,
    /// `|k| <= r`.
    Radius(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    pub k_max: usize,
    pub rho: RhoSpec,
    /// Upper limit for `rho` under the balancing rule.
    pub rho_cap: f64,
    /// Regularity index `s`.
    pub s: f64,
    /// Holder index `beta`.
    pub beta: f64,
    pub kappa_est: f64,
    pub c_omega_est: f64,
    /// Bound `M` on the potentials.
    pub m_bound: f64,
    pub cutoff: Cutoff,
    /// Also compute the volume side of every probe.
    pub test_mode: bool,
    pub cgo: CgoOptions,
    pub solve: SolveOptions,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            k_max: 2,
            rho: RhoSpec::Auto,
            rho_cap: 8.0,
            s: 0.4,
            beta: 0.5,
            kappa_est: 1.0,
            c_omega_est: 15.0,
            m_bound: 5.0,
            cutoff: Cutoff::Balanced,
            test_mode: false,
            cgo: CgoOptions::default(),
            solve: SolveOptions::default(),
        }
    }
}

impl ReconstructionConfig {
    /// `gamma = min(1/2, s/n)`.
    pub fn gamma(&self, n: usize) -> f64 {
        (self.s / n as f64).min(0.5)
    }

    pub fn gate(&self) -> CarlemanGate {
        CarlemanGate { c_omega: self.c_omega_est, m_bound: self.m_bound }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s < self.beta.min(0.5)) {
            return Err(Error::Config(format!("need 0 < s < min(1/2, beta), got s = {}, beta = {}", self.s, self.beta)));
        }
        if self.k_max < 1 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if !(self.kappa_est > 0.0 && self.c_omega_est > 0.0 && self.m_bound > 0.0) {
            return Err(Error::Config("kappa_est, c_omega_est and m_bound must be positive".into()));
        }
        let rho0 = self.gate().rho0();
        if let RhoSpec::Fixed(r) = self.rho {
            if !(r >= rho0) {
                return Err(Error::Config(format!("rho = {r} is below rho0 = {rho0}")));
            }
        }
        if !(self.rho_cap >= rho0) {
            return Err(Error::Config(format!("rho_cap = {} is below rho0 = {rho0}", self.rho_cap)));
        }
        Ok(())
    }
}

/// Integer vectors `z` with `|z|_inf <= k_max` in lexicographic order.
pub fn mode_set(k_max: usize) -> Vec<[i64; 3]> {
    let k = k_max as i64;
    let mut out = Vec::new();
    for a in -k..=k {
        for b in -k..=k {
            for c in -k..=k {
                out.push([a, b, c]);
            }
        }
    }
    out
}

pub fn frequency(z: [i64; 3]) -> Vec3 {
    [TAU * z[0] as f64, TAU * z[1] as f64, TAU * z[2] as f64]
}

/// Where the DtN data of an oracle comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DtnData {
    /// Forward Schrodinger solves.
    Solver,
    /// A measured nodal-dictionary matrix, possibly noisy.
    Matrix(DtnOperator),
}

/// A Schrodinger DtN map together with the potential used to build CGO
/// solutions in the lab setting.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOracle {
    pub potential: Field<f64>,
    /// Lower bound `-c` of the potential.
    pub c: f64,
    pub data: DtnData,
}

impl PotentialOracle {
    pub fn new(potential: Field<f64>, c: f64) -> Self {
        PotentialOracle { potential, c, data: DtnData::Solver }
    }

    pub fn with_matrix(potential: Field<f64>, c: f64, matrix: DtnOperator) -> Self {
        PotentialOracle { potential, c, data: DtnData::Matrix(matrix) }
    }

    /// Oracle for `Lambda'_a(lambda)` at constant data `lambda`.
    pub fn linearized(grid: &Grid, a: &Nonlinearity, lambda: f64, opts: &SolveOptions) -> Result<Self> {
        let q = linearized_potential(grid, a, &BoundaryField::constant(grid, lambda), opts)?;
        Ok(PotentialOracle::new(q, a.params().c))
    }

    pub fn apply(&self, grid: &Grid, g: &BoundaryField<Complex64>, opts: &SolveOptions) -> Result<BoundaryField<Complex64>> {
        match &self.data {
            DtnData::Solver => dtn_schrodinger(grid, &self.potential, self.c, g, opts),
            DtnData::Matrix(m) => m.apply_nodal(g),
        }
    }
}

/// CGO pair probing one frequency: `u` for the first potential with phase
/// `xi`, `u~` for the second with phase `-xi`.
#[derive(Debug, Clone)]
pub struct CgoPair {
    pub directions: CgoDirections,
    pub u: CgoSolution,
    pub u_tilde: CgoSolution,
}

impl CgoPair {
    pub fn new(grid: &Grid, qa: &Field<f64>, qb: &Field<f64>, k: Vec3, rho: f64, cfg: &ReconstructionConfig) -> Result<Self> {
        let directions = cgo_directions(3, k, rho, &cfg.gate())?;
        check_resolution(grid, directions.h)?;
        let u = cgo_remainder(grid, qa, &directions, Sign::Plus, &cfg.cgo)?;
        let u_tilde = cgo_remainder(grid, qb, &directions, Sign::Minus, &cfg.cgo)?;
        Ok(CgoPair { directions, u, u_tilde })
    }

    /// `||u|_Gamma|| ||u~|_Gamma||`.
    pub fn trace_norm_product(&self, grid: &Grid) -> f64 {
        self.u.trace.l2_norm(grid) * self.u_tilde.trace.l2_norm(grid)
    }

    /// `int_Gamma (Lambda_B - Lambda_A)(u) u~`.
    pub fn boundary_side(&self, grid: &Grid, a: &PotentialOracle, b: &PotentialOracle, opts: &SolveOptions) -> Result<Complex64> {
        let g = &self.u.trace;
        let diff = b.apply(grid, g, opts)?.sub(&a.apply(grid, g, opts)?);
        surface_integral(grid, &diff, &conj_boundary(&self.u_tilde.trace))
    }

    /// `int_Omega (q_B - q_A) u u~`.
    pub fn volume_side(&self, grid: &Grid, qa: &Field<f64>, qb: &Field<f64>) -> Result<Complex64> {
        grid.check_field(qa, Carrier::Omega)?;
        grid.check_field(qb, Carrier::Omega)?;
        let u = self.u.u_on_omega(grid);
        let ut = self.u_tilde.u_on_omega(grid);
        let w = grid.volume_weights(Carrier::Omega);
        let mut s = Complex64::new(0.0, 0.0);
        for i in 0..w.len() {
            s += u.values[i] * ut.values[i] * ((qb.values[i] - qa.values[i]) * w[i]);
        }
        Ok(s)
    }
}

fn conj_boundary(g: &BoundaryField<Complex64>) -> BoundaryField<Complex64> {
    BoundaryField { values: g.values.iter().map(|v| v.conj()).collect() }
}

/// One probed frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeProbe {
    pub k: Vec3,
    pub h: f64,
    /// Estimate of `int_Omega (q_B - q_A) exp(-i x.k)`.
    pub boundary: Complex64,
    /// Same integral with the CGO products, in test mode.
    pub volume: Option<Complex64>,
    pub trace_norm_product: f64,
    pub remainder_norms: [f64; 2],
}

pub fn probe_fourier_mode(
    grid: &Grid,
    a: &PotentialOracle,
    b: &PotentialOracle,
    k: Vec3,
    rho: f64,
    cfg: &ReconstructionConfig,
) -> Result<ModeProbe> {
    let pair = CgoPair::new(grid, &a.potential, &b.potential, k, rho, cfg)?;
    let boundary = pair.boundary_side(grid, a, b, &cfg.solve)?;
    let volume = if cfg.test_mode { Some(pair.volume_side(grid, &a.potential, &b.potential)?) } else { None };
    Ok(ModeProbe {
        k,
        h: pair.directions.h,
        boundary,
        volume,
        trace_norm_product: pair.trace_norm_product(grid),
        remainder_norms: [pair.u.remainder_norm(grid), pair.u_tilde.remainder_norm(grid)],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoFlag {
    Fixed,
    Unsaturated,
    Saturated,
    NoiseFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoChoice {
    pub rho: f64,
    pub flag: RhoFlag,
}

/// Balancing rule: the root of `rho^gamma exp(kappa rho) = 1 / d` above
/// `rho0`, `rho0` when the data error is too large for a root there, and
/// `rho_cap` for noise-free data.
pub fn choose_rho(d: f64, gamma: f64, kappa: f64, rho0: f64, rho_cap: f64) -> RhoChoice {
    if !(d > 0.0) {
        return RhoChoice { rho: rho_cap, flag: RhoFlag::NoiseFree };
    }
    let mu = (1.0 / (rho0 * kappa.exp())).min(1.0);
    // log form of rho^gamma exp(kappa rho) d - 1
    let f = |r: f64| gamma * r.ln() + kappa * r + d.ln();
    if d >= mu || f(rho0) >= 0.0 {
        return RhoChoice { rho: rho0, flag: RhoFlag::Saturated };
    }
    let mut lo = rho0;
    let mut hi = rho0 + (d.ln().abs() + 1.0) / kappa;
    while f(hi) < 0.0 {
        hi = rho0 + 2.0 * (hi - rho0);
    }
    while hi - lo > 1e-10 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    RhoChoice { rho: 0.5 * (lo + hi), flag: RhoFlag::Unsaturated }
}

/// `Psi(t) = |ln t|^(-theta) + t`, `theta = 2 min(1/2, s/n) beta / (n + 2 beta)`,
/// with the logarithm evaluated at `min(t, e^-2)`.
pub fn stability_modulus(t: f64, n: usize, s: f64, beta: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let theta = modulus_exponent(n, s, beta);
    let tc = t.min((-2.0f64).exp());
    tc.ln().abs().powf(-theta) + t
}

pub fn modulus_exponent(n: usize, s: f64, beta: f64) -> f64 {
    let n = n as f64;
    2.0 * (s / n).min(0.5) * beta / (n + 2.0 * beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeStatus {
    Probed,
    OutsideCutoff,
    /// Grid spacing exceeds `h/4`.
    ResolutionGate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub z: [i64; 3],
    pub status: ModeStatus,
    pub h: f64,
    /// `[re, im]`.
    pub coefficient: Option<[f64; 2]>,
    pub volume: Option<[f64; 2]>,
    pub trace_norm_product: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub l2_error: f64,
    pub truth_norm: f64,
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub rho: RhoChoice,
    pub discrepancy: Option<f64>,
    pub modes: Vec<ModeReport>,
    pub probed: usize,
    pub gated: usize,
    /// `sum |c_k|^2` over probed modes.
    pub parseval_energy: f64,
    pub error: Option<ErrorMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Recovered `q_B - q_A` on the unit box.
    pub field: Field<f64>,
    pub report: ReconstructionReport,
}

fn c2(z: Complex64) -> [f64; 2] {
    [z.re, z.im]
}

/// Resolves the `rho` of a run.
pub fn resolve_rho(grid: &Grid, cfg: &ReconstructionConfig, discrepancy: Option<f64>) -> Result<RhoChoice> {
    let rho0 = cfg.gate().rho0();
    match cfg.rho {
        RhoSpec::Fixed(r) => Ok(RhoChoice { rho: r, flag: RhoFlag::Fixed }),
        RhoSpec::Auto => {
            let d = discrepancy.ok_or_else(|| Error::InvalidArgument("automatic rho needs a discrepancy".into()))?;
            // the zero mode has h = 1/rho and must stay resolved
            let cap = cfg.rho_cap.min(1.0 / (4.0 * grid.spacing())).max(rho0);
            let mut c = choose_rho(d, cfg.gamma(grid.dim()), cfg.kappa_est, rho0, cap);
            c.rho = c.rho.min(cap);
            Ok(c)
        }
    }
}

fn in_cutoff(cutoff: Cutoff, k: Vec3, rho: f64, n: usize) -> bool {
    let r = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    match cutoff {
        Cutoff::All => true,
        Cutoff::Balanced => r <= rho.powf(1.0 / n as f64) + 1e-12,
        Cutoff::Radius(c) => r <= c + 1e-12,
    }
}

/// Truncated Fourier synthesis `Re sum_k c_k exp(i x.k)` on the unit box.
pub fn synthesize(grid: &Grid, coefficients: &[(Vec3, Complex64)]) -> Field<f64> {
    grid.field_from_fn(Carrier::Omega, |x| {
        coefficients
            .iter()
            .map(|(k, c)| (c * Complex64::from_polar(1.0, k[0] * x[0] + k[1] * x[1] + k[2] * x[2])).re)
            .sum::<f64>()
    })
}

/// Probes every mode inside the cutoff and synthesizes `q_B - q_A`.
pub fn reconstruct_potential(
    grid: &Grid,
    a: &PotentialOracle,
    b: &PotentialOracle,
    cfg: &ReconstructionConfig,
    discrepancy: Option<f64>,
) -> Result<Reconstruction> {
    cfg.validate()?;
    if grid.dim() != 3 {
        return Err(Error::InvalidArgument("reconstruction needs three dimensions".into()));
    }
    let rho = resolve_rho(grid, cfg, discrepancy)?;
    let modes: Vec<ModeReport> = mode_set(cfg.k_max)
        .into_par_iter()
        .map(|z| {
            let k = frequency(z);
            let h = 1.0 / ((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) / 4.0 + rho.rho * rho.rho).sqrt();
            let mut rep = ModeReport { z, status: ModeStatus::OutsideCutoff, h, coefficient: None, volume: None, trace_norm_product: None };
            if !in_cutoff(cfg.cutoff, k, rho.rho, 3) {
                return Ok(rep);
            }
            match probe_fourier_mode(grid, a, b, k, rho.rho, cfg) {
                Ok(p) => {
                    rep.status = ModeStatus::Probed;
                    rep.coefficient = Some(c2(p.boundary));
                    rep.volume = p.volume.map(c2);
                    rep.trace_norm_product = Some(p.trace_norm_product);
                    Ok(rep)
                }
                Err(Error::Resolution { .. }) => {
                    rep.status = ModeStatus::ResolutionGate;
                    Ok(rep)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let coefficients: Vec<(Vec3, Complex64)> = modes
        .iter()
        .filter_map(|m| m.coefficient.map(|c| (frequency(m.z), Complex64::new(c[0], c[1]))))
        .collect();
    let field = synthesize(grid, &coefficients);
    let error = if cfg.test_mode {
        let truth = b.potential.sub(&a.potential);
        let truth_norm = truth.l2_norm(grid);
        let l2_error = field.sub(&truth).l2_norm(grid);
        Some(ErrorMetrics { l2_error, truth_norm, relative: (truth_norm > 0.0).then(|| l2_error / truth_norm) })
    } else {
        None
    };
    let report = ReconstructionReport {
        rho,
        discrepancy,
        probed: coefficients.len(),
        gated: modes.iter().filter(|m| m.status == ModeStatus::ResolutionGate).count(),
        parseval_energy: coefficients.iter().map(|(_, c)| c.norm_sqr()).sum(),
        modes,
        error,
    };
    Ok(Reconstruction { field, report })
}

/// Surface-weighted mean of the trace of a field on the unit box.
pub fn boundary_mean(grid: &Grid, f: &Field<f64>) -> Result<f64> {
    grid.check_field(f, Carrier::Omega)?;
    let t = grid.trace(f);
    let w = grid.face_weights();
    let area: f64 = w.iter().sum();
    Ok(t.values.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / area)
}

/// Linearized data at one constant boundary value.
#[derive(Debug, Clone)]
pub struct LinearizedPair {
    pub lambda: f64,
    pub a: PotentialOracle,
    pub b: PotentialOracle,
    pub discrepancy: Option<f64>,
}

impl LinearizedPair {
    pub fn from_nonlinearities(grid: &Grid, a: &Nonlinearity, b: &Nonlinearity, lambda: f64, opts: &SolveOptions) -> Result<Self> {
        Ok(LinearizedPair {
            lambda,
            a: PotentialOracle::linearized(grid, a, lambda, opts)?,
            b: PotentialOracle::linearized(grid, b, lambda, opts)?,
            discrepancy: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AprimeSample {
    pub lambda: f64,
    /// Recovered `a'(lambda) - a~'(lambda)`.
    pub estimate: f64,
    /// Boundary value of the true potential difference.
    pub truth: f64,
    pub report: ReconstructionReport,
}

/// Recovers `a' - a~'` at each `lambda` as minus the boundary mean of the
/// reconstructed potential difference, since `u_a(lambda) = lambda` on the
/// boundary.
pub fn recover_aprime(grid: &Grid, pairs: &[LinearizedPair], cfg: &ReconstructionConfig) -> Result<Vec<AprimeSample>> {
    pairs
        .par_iter()
        .map(|p| {
            let rec = reconstruct_potential(grid, &p.a, &p.b, cfg, p.discrepancy)?;
            let estimate = -boundary_mean(grid, &rec.field)?;
            let truth = boundary_mean(grid, &p.a.potential.sub(&p.b.potential))?;
            Ok(AprimeSample { lambda: p.lambda, estimate, truth, report: rec.report })
        })
        .collect()
}

/// Trapezoidal antiderivative on a uniform grid containing 0, anchored at 0.
pub fn integrate_aprime(lambdas: &[f64], samples: &[f64]) -> Result<Vec<f64>> {
    if lambdas.len() != samples.len() || lambdas.len() < 2 {
        return Err(Error::DimensionMismatch("need matching lambda and sample lists of length >= 2".into()));
    }
    let d = lambdas[1] - lambdas[0];
    if !(d > 0.0) || lambdas.windows(2).any(|w| ((w[1] - w[0]) - d).abs() > 1e-9 * d.max(1.0)) {
        return Err(Error::InvalidArgument("lambda grid must be increasing and uniform".into()));
    }
    let zero = lambdas
        .iter()
        .position(|l| l.abs() <= 1e-9 * d)
        .ok_or_else(|| Error::InvalidArgument("lambda grid must contain 0".into()))?;
    let mut out = vec![0.0; lambdas.len()];
    for i in zero + 1..lambdas.len() {
        out[i] = out[i - 1] + 0.5 * d * (samples[i] + samples[i - 1]);
    }
    for i in (0..zero).rev() {
        out[i] = out[i + 1] - 0.5 * d * (samples[i] + samples[i + 1]);
    }
    Ok(out)
}

/// Writes `x1,..,xn,value` rows for a field on the unit box.
pub fn write_field_csv<W: Write>(grid: &Grid, f: &Field<f64>, w: W) -> Result<()> {
    grid.check_field(f, Carrier::Omega)?;
    let n = grid.dim();
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.push("value".into());
    wr.write_record(&header)?;
    for (i, v) in f.values.iter().enumerate() {
        let x = grid.coords(Carrier::Omega, i);
        let mut rec: Vec<String> = x[..n].iter().map(|c| format!("{c}")).collect();
        rec.push(format!("{v:e}"));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgo::random_potential;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ReconstructionConfig {
        ReconstructionConfig { c_omega_est: 2.0, m_bound: 1.0, test_mode: true, ..Default::default() }
    }

    #[test]
    fn worked_rho_example() {
        let c = choose_rho(1e-6, 0.5, 1.0, 1.0, 100.0);
        assert_eq!(c.flag, RhoFlag::Unsaturated);
        assert!((c.rho - 12.55).abs() < 0.01, "{}", c.rho);
        let r: f64 = c.rho;
        assert!((r.powf(-0.5) - 1e-6 * r.exp()).abs() < 1e-8);
    }

    #[test]
    fn rho_branches() {
        assert_eq!(choose_rho(1.0, 0.5, 1.0, 1.0, 9.0), RhoChoice { rho: 1.0, flag: RhoFlag::Saturated });
        assert_eq!(choose_rho(0.0, 0.5, 1.0, 1.0, 9.0), RhoChoice { rho: 9.0, flag: RhoFlag::NoiseFree });
    }

    #[test]
    fn modulus_values() {
        assert_eq!(stability_modulus(0.0, 3, 0.4, 0.5), 0.0);
        assert!((modulus_exponent(3, 0.4, 0.5) - 1.0 / 30.0).abs() < 1e-15);
        let v = stability_modulus((-30.0f64).exp(), 3, 0.4, 0.5);
        assert!((v - 0.8927).abs() < 1e-3, "{v}");
        let ts: Vec<f64> = (1..200).map(|i| (-2.0 - i as f64 * 0.2).exp()).rev().collect();
        for w in ts.windows(2) {
            assert!(stability_modulus(w[0], 3, 0.4, 0.5) <= stability_modulus(w[1], 3, 0.4, 0.5));
        }
    }

    #[test]
    fn trapezoid_antiderivative() {
        let l: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
        let two: Vec<f64> = l.iter().map(|x| 2.0 * x).collect();
        let sq = integrate_aprime(&l, &two).unwrap();
        for (x, v) in l.iter().zip(&sq) {
            assert!((v - x * x).abs() < 1e-2);
        }
        let c = integrate_aprime(&l, &vec![0.3; l.len()]).unwrap();
        for (x, v) in l.iter().zip(&c) {
            assert!((v - 0.3 * x).abs() < 1e-12);
        }
        assert!(integrate_aprime(&[0.1, 0.2, 0.3], &[1.0; 3]).is_err());
    }

    #[test]
    fn modes_and_config() {
        assert_eq!(mode_set(2).len(), 125);
        let c: ReconstructionConfig = serde_json::from_str(r#"{"rho": "auto", "cutoff": {"radius": 7.0}}"#).unwrap();
        assert_eq!(c.rho, RhoSpec::Auto);
        assert_eq!(c.cutoff, Cutoff::Radius(7.0));
        let c: ReconstructionConfig = serde_json::from_str(r#"{"rho": 3.5, "cutoff": "all"}"#).unwrap();
        assert_eq!(c.rho, RhoSpec::Fixed(3.5));
        assert!(serde_json::from_str::<ReconstructionConfig>(r#"{"rho": "big"}"#).is_err());
        assert!(ReconstructionConfig { s: 0.6, ..cfg() }.validate().is_err());
    }

    #[test]
    fn equal_potentials_probe_to_zero() {
        let g = Grid::new(3, 17, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_potential(&g, &mut rng, 1.0, 1);
        let a = PotentialOracle::new(q.clone(), 1.0);
        let p = probe_fourier_mode(&g, &a, &a, [TAU, 0.0, 0.0], 2.0, &cfg()).unwrap();
        assert!(p.boundary.norm() <= 1e-9 * p.trace_norm_product, "{}", p.boundary);
    }

    #[test]
    fn boundary_side_matches_volume_side() {
        let g = Grid::new(3, 17, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qa = random_potential(&g, &mut rng, 1.0, 1);
        let qb = random_potential(&g, &mut rng, 1.0, 1);
        let a = PotentialOracle::new(qa, 1.0);
        let b = PotentialOracle::new(qb, 1.0);
        let p = probe_fourier_mode(&g, &a, &b, [0.0, TAU, 0.0], 2.0, &cfg()).unwrap();
        let v = p.volume.unwrap();
        // one-sided normal differences limit the agreement to a few percent here
        assert!((p.boundary - v).norm() <= 0.1 * v.norm(), "{} {}", p.boundary, v);
    }

    #[test]
    fn boundary_mean_of_constant() {
        let g = Grid::new(3, 17, 4).unwrap();
        let f = Field::constant(&g, Carrier::Omega, 0.7);
        assert!((boundary_mean(&g, &f).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn synthesis_of_a_cosine() {
        let g = Grid::new(3, 17, 4).unwrap();
        let c = [(frequency([1, 0, 0]), Complex64::new(0.5, 0.0)), (frequency([-1, 0, 0]), Complex64::new(0.5, 0.0))];
        let f = synthesize(&g, &c);
        let t = g.field_from_fn(Carrier::Omega, |x| (TAU * x[0]).cos());
        assert!(f.sub(&t).max_abs() < 1e-12);
    }
}
