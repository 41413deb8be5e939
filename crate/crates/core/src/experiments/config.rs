use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dtn::DictionaryKind;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nonlinearity::Nonlinearity;
use crate::reconstruct::ReconstructionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ForwardConvergence,
    CgoCheck,
    CarlemanCheck,
    LinearizationCheck,
    Reconstruct,
    StabilityCurve,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::ForwardConvergence => "forward-convergence",
            ExperimentKind::CgoCheck => "cgo-check",
            ExperimentKind::CarlemanCheck => "carleman-check",
            ExperimentKind::LinearizationCheck => "linearization-check",
            ExperimentKind::Reconstruct => "reconstruct",
            ExperimentKind::StabilityCurve => "stability-curve",
        }
    }

    fn needs_three_dimensions(&self) -> bool {
        matches!(self, ExperimentKind::CgoCheck | ExperimentKind::Reconstruct | ExperimentKind::StabilityCurve)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub size: usize,
    /// Defaults to `(size + 3) / 4`.
    #[serde(default)]
    pub pad: Option<usize>,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        Grid::new(self.n, self.size, self.pad.unwrap_or((self.size + 3) / 4))
    }

    pub fn with_size(&self, size: usize) -> GridSpec {
        GridSpec { size, pad: None, ..*self }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { n: 3, size: 17, pad: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictionarySpec {
    pub kind: DictionaryKind,
    pub levels: Vec<f64>,
    pub trig_cutoff: usize,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        DictionarySpec { kind: DictionaryKind::Nodal, levels: vec![-1.0, 1.0], trig_cutoff: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Multiplicative noise levels.
    pub deltas: Vec<f64>,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { deltas: (0..13).map(|j| 10f64.powf(-4.0 + j as f64 / 4.0)).collect(), seed: 7 }
    }
}

/// Uniform grid `-max, .., max` with `count` points (odd, so 0 is included).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub max: f64,
    pub count: usize,
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        let h = 2.0 * self.max / (self.count - 1) as f64;
        (0..self.count).map(|i| -self.max + i as f64 * h).collect()
    }
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid { max: 1.0, count: 9 }
    }
}

/// Empirical Carleman calibration on a coarse grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSpec {
    pub size: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec { size: 17, samples: 1000, seed: 11 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructTarget {
    /// Single-mode potential difference.
    Potential,
    /// `a - a~` from linearized DtN data at constant boundary values.
    Nonlinearity,
}

/// `q_A = background`, `q_B = background + amplitude cos(2 pi z.x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PotentialPairSpec {
    pub background: f64,
    pub amplitude: f64,
    pub mode: [i64; 3],
}

impl Default for PotentialPairSpec {
    fn default() -> Self {
        PotentialPairSpec { background: 0.1, amplitude: 0.1, mode: [1, 0, 0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub grid: GridSpec,
    pub a: Nonlinearity,
    /// Second nonlinearity; when absent, `a + epsilon t`.
    pub a_tilde: Option<Nonlinearity>,
    pub epsilon: f64,
    pub dictionary: DictionarySpec,
    pub reconstruction: ReconstructionConfig,
    /// Calibrated when absent.
    pub c_omega_est: Option<f64>,
    pub calibration: CalibrationSpec,
    pub noise: NoiseSpec,
    pub lambdas: LambdaGrid,
    pub target: ReconstructTarget,
    pub potentials: PotentialPairSpec,
    /// Grid sizes for convergence studies.
    pub sizes: Vec<usize>,
    /// Random fields or potentials per check.
    pub samples: usize,
    /// Bound `M` on potentials in CGO checks.
    pub m_bound: f64,
    pub epsilons: Vec<f64>,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::ForwardConvergence,
            grid: GridSpec::default(),
            a: Nonlinearity::zero(),
            a_tilde: None,
            epsilon: 0.05,
            dictionary: DictionarySpec::default(),
            reconstruction: ReconstructionConfig::default(),
            c_omega_est: None,
            calibration: CalibrationSpec::default(),
            noise: NoiseSpec::default(),
            lambdas: LambdaGrid::default(),
            target: ReconstructTarget::Potential,
            potentials: PotentialPairSpec::default(),
            sizes: vec![17, 33, 65],
            samples: 1000,
            m_bound: 5.0,
            epsilons: vec![1e-1, 1e-2, 1e-3, 1e-4],
            seed: 1,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn a_tilde(&self) -> Nonlinearity {
        self.a_tilde.clone().unwrap_or_else(|| self.a.shifted(self.epsilon))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_three_dimensions() && self.grid.n != 3 {
            return Err(Error::Config(format!("{} needs n = 3", self.kind.name())));
        }
        if self.lambdas.count < 3 || self.lambdas.count % 2 == 0 || !(self.lambdas.max > 0.0) {
            return Err(Error::Config("lambda grid needs an odd count >= 3 and a positive range".into()));
        }
        if self.sizes.is_empty() || self.samples == 0 || self.epsilons.is_empty() {
            return Err(Error::Config("sizes, samples and epsilons must be non-empty".into()));
        }
        if self.noise.deltas.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if matches!(self.kind, ExperimentKind::Reconstruct | ExperimentKind::StabilityCurve) {
            self.reconstruction.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let c = ExperimentConfig::from_json(r#"{"kind": "reconstruct", "grid": {"n": 3, "size": 17}, "a": {"family": "cubic", "scale": 0.5}}"#).unwrap();
        assert_eq!(c.kind, ExperimentKind::Reconstruct);
        assert_eq!(c.grid.build().unwrap().pad(), 5);
        assert_eq!(c.noise.deltas.len(), 13);
        assert!((c.noise.deltas[12] - 0.1).abs() < 1e-12);
        assert_eq!(c.lambdas.values(), vec![-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!((c.a_tilde().deriv(0.0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn rejects_two_dimensional_reconstruction() {
        assert!(ExperimentConfig::from_json(r#"{"kind": "reconstruct", "grid": {"n": 2, "size": 17}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind": "bogus"}"#).is_err());
    }
}
