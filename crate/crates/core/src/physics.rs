//! Closed-form sensitivity bounds, uncertainty laws of the twin-beam
//! estimators, two-mode squeezed vacuum photon statistics and the
//! collection-efficiency model of a binned detector.
//!
//! Everything here is pure and stateless.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-axis standard deviation of the twin-photon displacement, in units of
/// the transverse correlation radius `r`.
///
/// The relative position of the two photons of a pair is modelled as an
/// isotropic 2D Gaussian with `sigma = JITTER_SIGMA_PER_RADIUS * r`. With this
/// value a bin of side `d = 2 r X` collects at least 99% of the twins for
/// `X >= 50`.
pub const JITTER_SIGMA_PER_RADIUS: f64 = 0.4;

/// Absorption, detected photon number and efficiencies of one estimation cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// Absorption coefficient of the sample, `0 <= alpha <= 1`.
    pub alpha: f64,
    /// Mean detected photons per cell per frame without the sample.
    pub n_detected: f64,
    /// Detection efficiency of each arm.
    pub eta_d: f64,
    /// Heralding efficiency, `eta = eta_d * eta_c`.
    pub eta: f64,
}

impl LossParams {
    pub fn new(alpha: f64, n_detected: f64, eta_d: f64, eta: f64) -> Result<Self> {
        let p = Self {
            alpha,
            n_detected,
            eta_d,
            eta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha_n(self.alpha, self.n_detected)?;
        if !self.eta_d.is_finite() || self.eta_d <= 0.0 || self.eta_d > 1.0 {
            return Err(Error::domain(format!(
                "eta_d must lie in (0, 1], got {}",
                self.eta_d
            )));
        }
        // Tolerate rounding when eta is derived as eta_d * eta_c with eta_c = 1.
        if !self.eta.is_finite() || self.eta < 0.0 || self.eta > self.eta_d * (1.0 + 1e-12) {
            return Err(Error::domain(format!(
                "eta must lie in [0, eta_d = {}], got {}",
                self.eta_d, self.eta
            )));
        }
        Ok(())
    }
}

/// Photon statistics of the pair source within one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseModel {
    /// Many modes with vanishing occupation: Poissonian pair numbers.
    Poisson,
    /// `modes_per_cell` thermal modes: negative-binomial pair numbers with
    /// Fano factor `1 + mu`, `mu = mean / modes_per_cell`.
    Multithermal { modes_per_cell: u64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::Poisson => Ok(()),
            NoiseModel::Multithermal { modes_per_cell } if *modes_per_cell >= 1 => Ok(()),
            NoiseModel::Multithermal { .. } => {
                Err(Error::config("multithermal noise needs modes_per_cell >= 1"))
            }
        }
    }

    /// Mean photons per mode, `mu = mean / M`. `None` for Poisson light.
    pub fn photons_per_mode(&self, mean: f64) -> Option<f64> {
        match self {
            NoiseModel::Poisson => None,
            NoiseModel::Multithermal { modes_per_cell } => Some(mean / *modes_per_cell as f64),
        }
    }

    /// Variance-to-mean ratio of the pair number for the given mean.
    pub fn fano_factor(&self, mean: f64) -> f64 {
        1.0 + self.photons_per_mode(mean).unwrap_or(0.0)
    }
}

/// The four absorption estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// `1 - gamma N'_P / N_R`.
    Ratio,
    /// `(N_R - gamma N'_P) / <N_R>`.
    Subtraction,
    /// `1 - (N'_P - k_opt (N_R - <N_R>)) / <N_P>`.
    Optimized,
    /// Single-beam classical reference, `1 - N'_P / <N_P>`.
    Direct,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Ratio,
        EstimatorKind::Subtraction,
        EstimatorKind::Optimized,
        EstimatorKind::Direct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ratio => "ratio",
            EstimatorKind::Subtraction => "subtraction",
            EstimatorKind::Optimized => "optimized",
            EstimatorKind::Direct => "direct",
        }
    }

    /// Short label used for image panels.
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Ratio => "RAT",
            EstimatorKind::Subtraction => "SUB",
            EstimatorKind::Optimized => "OPT",
            EstimatorKind::Direct => "DIR",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ratio" | "rat" => Ok(EstimatorKind::Ratio),
            "subtraction" | "sub" => Ok(EstimatorKind::Subtraction),
            "optimized" | "opt" => Ok(EstimatorKind::Optimized),
            "direct" | "dir" => Ok(EstimatorKind::Direct),
            other => Err(Error::config(format!("unknown estimator '{other}'"))),
        }
    }
}

fn check_alpha_n(alpha: f64, n_detected: f64) -> Result<()> {
    if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !n_detected.is_finite() || n_detected <= 0.0 {
        return Err(Error::domain(format!(
            "mean detected photons must be positive, got {n_detected}"
        )));
    }
    Ok(())
}

/// Lower bound on the loss-estimation uncertainty with classical probes,
/// `sqrt((1 - alpha) / n)`. Reduces to the shot-noise limit at `alpha = 0`.
pub fn u_coh(alpha: f64, n_detected: f64) -> Result<f64> {
    check_alpha_n(alpha, n_detected)?;
    Ok(((1.0 - alpha) / n_detected).sqrt())
}

/// Ultimate quantum limit for a single-mode probe, `sqrt(alpha) * u_coh`.
pub fn u_uql(alpha: f64, n_detected: f64) -> Result<f64> {
    Ok(alpha.sqrt() * u_coh(alpha, n_detected)?)
}

/// Predicted variance of an estimate of `alpha` for Poissonian twin beams with
/// balanced arms.
///
/// The UQL term `alpha (1 - alpha) / (eta_d n)` is common to the twin-beam
/// estimators; they differ in how the imperfect heralding `eta` enters:
///
/// - ratio: `2 (1 - alpha)^2 (1 - eta) / n`
/// - subtraction: `(2 (1 - alpha)(1 - eta) + alpha^2) / n`
/// - optimized: `(1 - alpha)^2 (1 - eta^2) / n`
///
/// The direct estimator returns the classical bound `(1 - alpha) / n`.
pub fn predicted_variance(kind: EstimatorKind, p: &LossParams) -> Result<f64> {
    p.validate()?;
    let LossParams {
        alpha,
        n_detected: n,
        eta_d,
        eta,
    } = *p;
    let uql2 = u_uql(alpha, n)?.powi(2);
    let t = 1.0 - alpha;
    let v = match kind {
        EstimatorKind::Ratio => uql2 / eta_d + 2.0 * t * t * (1.0 - eta) / n,
        EstimatorKind::Subtraction => uql2 / eta_d + (2.0 * t * (1.0 - eta) + alpha * alpha) / n,
        EstimatorKind::Optimized => uql2 / eta_d + t * t * (1.0 - eta * eta) / n,
        EstimatorKind::Direct => t / n,
    };
    Ok(v)
}

/// Ratio of the classical bound to the predicted uncertainty of `kind`.
/// Values above one indicate a quantum advantage.
pub fn quantum_enhancement(kind: EstimatorKind, p: &LossParams) -> Result<f64> {
    p.validate()?;
    if p.alpha >= 1.0 {
        return Err(Error::domain("quantum enhancement is undefined at alpha = 1"));
    }
    if kind == EstimatorKind::Direct {
        return Ok(1.0);
    }
    let var = predicted_variance(kind, p)?;
    if var <= 0.0 {
        return Err(Error::domain(format!(
            "predicted {kind} variance vanishes; enhancement is unbounded"
        )));
    }
    Ok(u_coh(p.alpha, p.n_detected)? / var.sqrt())
}

/// Photon-number distribution of one mode of a two-mode squeezed vacuum,
/// `mu^n / (mu + 1)^(n + 1)`.
pub fn tmsv_pmf(n: i64, mu: f64) -> Result<f64> {
    if n < 0 {
        return Err(Error::domain(format!("photon number must be >= 0, got {n}")));
    }
    if !mu.is_finite() || mu <= 0.0 {
        return Err(Error::domain(format!("mean photons per mode must be positive, got {mu}")));
    }
    let n = n as f64;
    Ok((n * mu.ln() - (n + 1.0) * mu.ln_1p()).exp())
}

#[inline]
fn std_normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

/// Probability that a point placed uniformly in `[0, d]` stays inside the
/// interval after a Gaussian displacement of standard deviation `sigma`,
/// as a function of `a = d / sigma`:
///
/// `erf(a / sqrt 2) - (2 / a) (phi(0) - phi(a))`.
pub fn axis_capture(a: f64) -> f64 {
    // phi(0) - phi(a) = phi(0) * (1 - exp(-a^2 / 2)), kept accurate for small a.
    let tail = -(-0.5 * a * a).exp_m1() * std_normal_pdf(0.0);
    libm::erf(a * FRAC_1_SQRT_2) - 2.0 * tail / a
}

/// Collection efficiency `eta_c` of a square bin of side `d = 2 r X`: the
/// probability that the twin of a photon detected in the bin lands in the
/// registered bin of the other arm.
pub fn collection_efficiency(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::domain(format!("X must be positive, got {x}")));
    }
    let f = axis_capture(2.0 * x / JITTER_SIGMA_PER_RADIUS);
    Ok(f * f)
}
