//! Admissible nonlinearities `a(u)`: a registry of closed-form families,
//! sampled validation of the growth, derivative-floor and local Lipschitz
//! conditions, and the semi-norm / distance diagnostics on `C(R)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parametric families with closed-form `a` and `a'`.
///
/// Every family except `Linear` takes an optional `linear` coefficient that
/// adds `linear * t`; this is how perturbed pairs `a`, `a + eps t` are built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    /// `a = 0`.
    Zero,
    /// `a(t) = slope * t`.
    Linear { slope: f64 },
    /// `a(t) = scale * t^3 + linear * t`.
    Cubic {
        scale: f64,
        #[serde(default)]
        linear: f64,
    },
    /// `a(t) = scale * tanh(t) + linear * t`.
    Tanh {
        scale: f64,
        #[serde(default)]
        linear: f64,
    },
    /// `a(t) = scale * t|t|` for `|t| <= threshold`, continued linearly (C^1)
    /// beyond, plus `linear * t`.
    Clamped {
        scale: f64,
        threshold: f64,
        #[serde(default)]
        linear: f64,
    },
}

/// Growth constants `(c0, c1, c)` and exponent `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub c0: f64,
    pub c1: f64,
    /// Derivative floor: `a' >= -c`. Must stay below the first Dirichlet eigenvalue.
    pub c: f64,
    pub alpha: f64,
}

impl ClassParams {
    pub fn check(&self) -> Result<()> {
        if !(self.c0 > 0.0 && self.c1 > 0.0 && self.c >= 0.0 && self.alpha >= 0.0) || !self.c.is_finite() {
            return Err(Error::ClassViolation(format!("invalid class parameters {self:?}")));
        }
        Ok(())
    }

    /// Refuses `c >= lambda1`.
    pub fn check_spectral_margin(&self, lambda1: f64) -> Result<()> {
        if self.c >= lambda1 {
            return Err(Error::ClassViolation(format!("c = {} is not below lambda_1 = {lambda1}", self.c)));
        }
        Ok(())
    }
}

// strictly positive floor for growth constants of families that vanish
const TINY: f64 = 1e-3;

impl Family {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Family::Zero => 0.0,
            Family::Linear { slope } => slope * t,
            Family::Cubic { scale, linear } => scale * t * t * t + linear * t,
            Family::Tanh { scale, linear } => scale * t.tanh() + linear * t,
            Family::Clamped { scale, threshold, linear } => {
                let base = if t.abs() <= threshold {
                    scale * t * t.abs()
                } else {
                    scale * (2.0 * threshold * t - threshold * threshold * t.signum())
                };
                base + linear * t
            }
        }
    }

    pub fn deriv(&self, t: f64) -> f64 {
        match *self {
            Family::Zero => 0.0,
            Family::Linear { slope } => slope,
            Family::Cubic { scale, linear } => 3.0 * scale * t * t + linear,
            Family::Tanh { scale, linear } => {
                let s = 1.0 / t.cosh();
                scale * s * s + linear
            }
            Family::Clamped { scale, threshold, linear } => 2.0 * scale * t.abs().min(threshold) + linear,
        }
    }

    /// Lipschitz modulus of `a'` on `[-r, r]`.
    pub fn kappa(&self, r: f64) -> f64 {
        match *self {
            Family::Zero | Family::Linear { .. } => 0.0,
            Family::Cubic { scale, .. } => 6.0 * scale.abs() * r,
            // max |d/dt sech^2 t| = 4 / (3 sqrt 3)
            Family::Tanh { scale, .. } => scale.abs() * 4.0 / (3.0 * 3f64.sqrt()),
            Family::Clamped { scale, .. } => 2.0 * scale.abs(),
        }
    }

    /// Documented class parameters for the family.
    pub fn default_params(&self) -> ClassParams {
        match *self {
            Family::Zero => ClassParams { c0: TINY, c1: TINY, c: 0.0, alpha: 1.0 },
            Family::Linear { slope } => {
                ClassParams { c0: TINY, c1: slope.abs().max(TINY), c: (-slope).max(0.0), alpha: 1.0 }
            }
            Family::Cubic { scale, linear } => {
                let k = scale.abs() + linear.abs();
                // a' = 3 scale t^2 + linear is unbounded below when scale < 0
                let c = if scale < 0.0 { f64::INFINITY } else { (-linear).max(0.0) };
                ClassParams { c0: k.max(TINY), c1: k.max(TINY), c, alpha: 3.0 }
            }
            Family::Tanh { scale, linear } => ClassParams {
                c0: scale.abs().max(TINY),
                c1: linear.abs().max(TINY),
                c: (-(scale.min(0.0) + linear)).max(0.0),
                alpha: 1.0,
            },
            Family::Clamped { scale, threshold, linear } => {
                let c = if scale < 0.0 { (-(2.0 * scale * threshold + linear)).max(0.0) } else { (-linear).max(0.0) };
                ClassParams {
                    c0: (scale.abs() * threshold * threshold).max(TINY),
                    c1: (2.0 * scale.abs() * threshold + linear.abs()).max(TINY),
                    c,
                    alpha: 1.0,
                }
            }
        }
    }

    /// Adds `eps * t` to the family.
    pub fn with_linear_shift(&self, eps: f64) -> Family {
        match *self {
            Family::Zero => Family::Linear { slope: eps },
            Family::Linear { slope } => Family::Linear { slope: slope + eps },
            Family::Cubic { scale, linear } => Family::Cubic { scale, linear: linear + eps },
            Family::Tanh { scale, linear } => Family::Tanh { scale, linear: linear + eps },
            Family::Clamped { scale, threshold, linear } => Family::Clamped { scale, threshold, linear: linear + eps },
        }
    }
}

/// An evaluator pair `(a, a')` together with its class parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nonlinearity {
    #[serde(flatten)]
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ClassParams>,
}

impl From<Family> for Nonlinearity {
    fn from(family: Family) -> Self {
        Nonlinearity { family, params: None }
    }
}

impl Nonlinearity {
    pub fn new(family: Family) -> Self {
        family.into()
    }

    pub fn with_params(family: Family, params: ClassParams) -> Self {
        Nonlinearity { family, params: Some(params) }
    }

    pub fn zero() -> Self {
        Family::Zero.into()
    }

    pub fn linear(slope: f64) -> Self {
        Family::Linear { slope }.into()
    }

    pub fn cubic(scale: f64) -> Self {
        Family::Cubic { scale, linear: 0.0 }.into()
    }

    pub fn params(&self) -> ClassParams {
        self.params.unwrap_or_else(|| self.family.default_params())
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        self.family.eval(t)
    }

    #[inline]
    pub fn deriv(&self, t: f64) -> f64 {
        self.family.deriv(t)
    }

    pub fn kappa(&self, r: f64) -> f64 {
        self.family.kappa(r)
    }

    pub fn at_zero(&self) -> f64 {
        self.eval(0.0)
    }

    /// Same family shifted by `eps * t`, keeping derived class parameters.
    pub fn shifted(&self, eps: f64) -> Self {
        Nonlinearity { family: self.family.with_linear_shift(eps), params: None }
    }
}

/// Sampling plan for class validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingPlan {
    pub range: f64,
    pub count: usize,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan { range: 10.0, count: 2001 }
    }
}

/// Outcome of a sampled class check. Margins are the minimum slack over all
/// samples; a negative margin marks a violation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassReport {
    pub growth_ok: bool,
    pub floor_ok: bool,
    pub lipschitz_ok: bool,
    pub growth_margin: f64,
    pub floor_margin: f64,
    pub lipschitz_margin: f64,
}

impl ClassReport {
    pub fn passed(&self) -> bool {
        self.growth_ok && self.floor_ok && self.lipschitz_ok
    }

    pub fn worst_margin(&self) -> f64 {
        self.growth_margin.min(self.floor_margin).min(self.lipschitz_margin)
    }
}

/// Checks growth, derivative floor and local Lipschitz continuity of `a'`
/// on `count` uniform samples of `[-range, range]`.
pub fn validate_class(a: &Nonlinearity, plan: SamplingPlan) -> Result<ClassReport> {
    if plan.count < 1000 {
        return Err(Error::InvalidArgument(format!("sampling plan needs at least 1000 samples, got {}", plan.count)));
    }
    if !(plan.range > 0.0) {
        return Err(Error::InvalidArgument("sampling range must be positive".into()));
    }
    let p = a.params();
    let kappa = a.kappa(plan.range);
    let m = plan.count;
    let ts: Vec<f64> = (0..m).map(|i| -plan.range + 2.0 * plan.range * i as f64 / (m - 1) as f64).collect();
    let mut growth = f64::INFINITY;
    let mut floor = f64::INFINITY;
    let mut lip = f64::INFINITY;
    for &t in &ts {
        let at = a.eval(t);
        let bound = p.c0 + p.c1 * t.abs().powf(p.alpha);
        growth = growth.min(bound - at.abs());
        floor = floor.min(a.deriv(t) + p.c);
    }
    for w in ts.windows(2) {
        let (u, v) = (w[0], w[1]);
        lip = lip.min(kappa * (u - v).abs() - (a.deriv(u) - a.deriv(v)).abs());
    }
    let slack = 1e-12;
    Ok(ClassReport {
        growth_ok: growth >= -slack,
        floor_ok: floor >= -slack && p.c.is_finite(),
        lipschitz_ok: lip >= -slack * (1.0 + kappa),
        growth_margin: growth,
        floor_margin: floor,
        lipschitz_margin: lip,
    })
}

const SUP_SAMPLES: usize = 4097;

/// Maximizes `g` on `[lo, hi]`: dense uniform sampling, then golden-section
/// refinement around the best sample.
fn sup_on(g: &dyn Fn(f64) -> f64, lo: f64, hi: f64, samples: usize) -> f64 {
    let step = (hi - lo) / (samples - 1) as f64;
    let mut best_i = 0;
    let mut best = f64::NEG_INFINITY;
    for i in 0..samples {
        let v = g(lo + step * i as f64);
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let mut a = lo + step * best_i.saturating_sub(1) as f64;
    let mut b = (lo + step * (best_i + 1) as f64).min(hi);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if g(c) > g(d) {
            b = d;
        } else {
            a = c;
        }
    }
    best.max(g(0.5 * (a + b)))
}

/// `max_{|t| <= j} |h(t)|` for an arbitrary scalar function.
pub fn seminorm_p_fn(h: &dyn Fn(f64) -> f64, j: u32) -> Result<f64> {
    if j < 1 {
        return Err(Error::InvalidArgument("semi-norm index must be >= 1".into()));
    }
    let r = j as f64;
    Ok(sup_on(&|t| h(t).abs(), -r, r, SUP_SAMPLES))
}

/// `max_{|t| <= j} |a(t)|`.
pub fn seminorm_p(a: &Nonlinearity, j: u32) -> Result<f64> {
    seminorm_p_fn(&|t| a.eval(t), j)
}

/// Upper end of the sampled tail in [`distance_d`].
pub const DISTANCE_T_MAX: f64 = 1e3;

/// `sup_{|t|<=1} |a - b| + sup_{|t|>=1} |t^-alpha (a - b)|`.
///
/// The second supremum is sampled on `1 <= |t| <= 1e3` (log-spaced). Beyond
/// `1e3` the growth bounds only give `|t^-alpha (a-b)| <= c0_a + c0_b + c1_a + c1_b`;
/// see [`distance_d_tail_bound`].
pub fn distance_d(a: &Nonlinearity, b: &Nonlinearity, alpha: f64) -> f64 {
    let diff = |t: f64| a.eval(t) - b.eval(t);
    let near = sup_on(&|t| diff(t).abs(), -1.0, 1.0, SUP_SAMPLES);
    let far_pos = sup_on(&|s: f64| { let t = s.exp(); (diff(t) * t.powf(-alpha)).abs() }, 0.0, DISTANCE_T_MAX.ln(), SUP_SAMPLES);
    let far_neg = sup_on(&|s: f64| { let t = s.exp(); (diff(-t) * t.powf(-alpha)).abs() }, 0.0, DISTANCE_T_MAX.ln(), SUP_SAMPLES);
    near + far_pos.max(far_neg)
}

/// Bound on the unsampled tail `|t| > 1e3` implied by the growth conditions.
pub fn distance_d_tail_bound(a: &Nonlinearity, b: &Nonlinearity, alpha: f64) -> f64 {
    let (pa, pb) = (a.params(), b.params());
    let t = DISTANCE_T_MAX;
    let term = |p: ClassParams| p.c0 * t.powf(-alpha) + p.c1 * t.powf(p.alpha - alpha);
    term(pa) + term(pb)
}

/// The registry members with their documented parameters.
pub fn registry_examples() -> Vec<(&'static str, Nonlinearity)> {
    vec![
        ("zero", Nonlinearity::zero()),
        ("linear", Nonlinearity::linear(-5.0)),
        ("cubic", Nonlinearity::cubic(0.5)),
        ("tanh", Family::Tanh { scale: 2.0, linear: 0.0 }.into()),
        ("clamped", Family::Clamped { scale: 1.0, threshold: 2.0, linear: 0.0 }.into()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan() -> SamplingPlan {
        SamplingPlan { range: 5.0, count: 4001 }
    }

    #[test]
    fn linear_with_k_below_c_passes() {
        let k = 3.0;
        let a = Nonlinearity::with_params(Family::Linear { slope: -k }, ClassParams { c0: 0.1, c1: 4.0, c: 5.0, alpha: 1.0 });
        assert!(validate_class(&a, plan()).unwrap().passed());
    }

    #[test]
    fn cubic_passes_floor_for_any_c() {
        let a = Nonlinearity::with_params(
            Family::Cubic { scale: 1.0, linear: 0.0 },
            ClassParams { c0: 1.0, c1: 1.0, c: 0.0, alpha: 3.0 },
        );
        let r = validate_class(&a, plan()).unwrap();
        assert!(r.floor_ok && r.growth_ok && r.lipschitz_ok);
    }

    #[test]
    fn floor_violation_is_reported() {
        let c = 2.0;
        let a = Nonlinearity::with_params(Family::Linear { slope: -2.0 * c }, ClassParams { c0: 1.0, c1: 10.0, c, alpha: 1.0 });
        let r = validate_class(&a, plan()).unwrap();
        assert!(!r.floor_ok);
        assert!(!r.passed());
        assert!((r.floor_margin + c).abs() < 1e-12);
    }

    #[test]
    fn growth_violation_is_reported() {
        let a = Nonlinearity::with_params(Family::Cubic { scale: 1.0, linear: 0.0 }, ClassParams { c0: 1.0, c1: 1.0, c: 0.0, alpha: 2.0 });
        assert!(!validate_class(&a, plan()).unwrap().growth_ok);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(validate_class(&Nonlinearity::zero(), SamplingPlan { range: 1.0, count: 10 }).is_err());
    }

    #[test]
    fn registry_families_pass_with_documented_params() {
        for (name, a) in registry_examples() {
            let r = validate_class(&a, SamplingPlan { range: 20.0, count: 8001 }).unwrap();
            assert!(r.passed(), "{name}: {r:?}");
        }
    }

    #[test]
    fn seminorm_examples() {
        assert!((seminorm_p(&Nonlinearity::linear(1.0), 2).unwrap() - 2.0).abs() < 1e-12);
        let v = seminorm_p_fn(&|t| t * t * t - t, 1).unwrap();
        assert!((v - 2.0 / (3.0 * 3f64.sqrt())).abs() < 1e-9, "{v}");
        assert_eq!(seminorm_p(&Nonlinearity::zero(), 7).unwrap(), 0.0);
        assert!(seminorm_p(&Nonlinearity::zero(), 0).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = Nonlinearity::linear(1.0);
        assert_eq!(distance_d(&a, &a, 1.0), 0.0);
        // t and t + eps: the constant shift is not in the registry, so evaluate by closure
        let eps: f64 = 0.3;
        let near = sup_on(&|t: f64| eps.abs() + 0.0 * t, -1.0, 1.0, SUP_SAMPLES);
        let far = sup_on(&|s: f64| eps / s.exp(), 0.0, DISTANCE_T_MAX.ln(), SUP_SAMPLES);
        assert!((near + far - 2.0 * eps).abs() < 1e-12);
    }

    #[test]
    fn distance_cubic_plus_sine() {
        let diff = |t: f64| t.sin();
        let near = sup_on(&|t| diff(t).abs(), -1.0, 1.0, SUP_SAMPLES);
        let far = sup_on(&|s: f64| { let t = s.exp(); (diff(t) / t.powi(3)).abs() }, 0.0, DISTANCE_T_MAX.ln(), SUP_SAMPLES);
        assert!((near + far - 2.0 * 1f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn distance_of_linear_shift() {
        let a = Nonlinearity::cubic(1.0);
        let b = a.shifted(0.2);
        // |0.2 t| on [-1,1] peaks at 0.2; |0.2 t^-2| on |t| >= 1 peaks at 0.2
        assert!((distance_d(&a, &b, 3.0) - 0.4).abs() < 1e-9);
    }

    #[test]
    fn kappa_matches_documented_values() {
        assert_eq!(Nonlinearity::cubic(1.0).kappa(2.0), 12.0);
        assert_eq!(Nonlinearity::linear(-3.0).kappa(5.0), 0.0);
    }
}
