//! Scalar input laws and per-layer stochastic activations.
//!
//! A network is an ordered stack of layers, each pairing an aspect ratio
//! (rows over columns of the mixing matrix) with an activation: the
//! conditional law of the layer output given the mixed input. Activations
//! are restricted to a closed set of parametric kinds so the solver can pick
//! analytic inner integrals instead of nested quadrature over black-box
//! kernels:
//!
//! * `awgn` - additive Gaussian noise, `x = z + w`;
//! * `identity` - the noiseless limit of `awgn`;
//! * `sign` - binary output `{-1, +1}`, optionally preceded by Gaussian
//!   pre-noise (a probit channel);
//! * `discrete_map` - a noisy threshold quantizer: `z + w` is binned by a
//!   strictly increasing threshold list and mapped to one of
//!   `thresholds.len() + 1` output levels. `sign` is the two-level special
//!   case.
//!
//! All types are immutable after construction and safe to share across
//! threads; sampling takes the RNG by argument.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{gaussian_pdf, normal_cdf, normal_pdf, DIRAC_VARIANCE};

/// Scalar prior on each input coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    /// Finite set of `(value, weight)` atoms; weights must sum to one.
    Discrete {
        atoms: Vec<(f64, f64)>,
    },
    Gaussian {
        mean: f64,
        variance: f64,
    },
    /// Spike-and-slab: zero with probability `1 - sparsity`, otherwise a
    /// centered Gaussian of the given component variance.
    BernoulliGaussian {
        sparsity: f64,
        component_variance: f64,
    },
}

impl Prior {
    pub fn discrete(atoms: Vec<(f64, f64)>) -> Result<Self> {
        let p = Prior::Discrete { atoms };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian(mean: f64, variance: f64) -> Result<Self> {
        let p = Prior::Gaussian { mean, variance };
        p.validate()?;
        Ok(p)
    }

    pub fn bernoulli_gaussian(sparsity: f64, component_variance: f64) -> Result<Self> {
        let p = Prior::BernoulliGaussian {
            sparsity,
            component_variance,
        };
        p.validate()?;
        Ok(p)
    }

    /// Equal-weight atoms at -1 and +1 (one QPSK dimension).
    pub fn symmetric_binary() -> Self {
        Prior::Discrete {
            atoms: vec![(-1.0, 0.5), (1.0, 0.5)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Prior::Discrete { atoms } => {
                if atoms.is_empty() {
                    return Err(Error::Config(
                        "discrete prior needs at least one atom".into(),
                    ));
                }
                let mut total = 0.0;
                for &(v, w) in atoms {
                    if !v.is_finite() || !w.is_finite() {
                        return Err(Error::Config("discrete prior atom is not finite".into()));
                    }
                    if w < 0.0 {
                        return Err(Error::Config(format!("negative atom weight {w}")));
                    }
                    total += w;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "discrete prior weights sum to {total}, expected 1"
                    )));
                }
                Ok(())
            }
            Prior::Gaussian { mean, variance } => {
                if !mean.is_finite() || !variance.is_finite() || *variance < 0.0 {
                    return Err(Error::Config(format!(
                        "gaussian prior requires finite mean and variance >= 0, got ({mean}, {variance})"
                    )));
                }
                Ok(())
            }
            Prior::BernoulliGaussian {
                sparsity,
                component_variance,
            } => {
                if !(0.0..=1.0).contains(sparsity) {
                    return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1]")));
                }
                if !component_variance.is_finite() || *component_variance < 0.0 {
                    return Err(Error::Config(format!(
                        "component variance must be >= 0, got {component_variance}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// `E[X]` under the prior.
    pub fn mean(&self) -> f64 {
        match self {
            Prior::Discrete { atoms } => atoms.iter().map(|(v, w)| v * w).sum(),
            Prior::Gaussian { mean, .. } => *mean,
            Prior::BernoulliGaussian { .. } => 0.0,
        }
    }

    /// E[X^2] under the prior (the input power entering the first layer).
    pub fn second_moment(&self) -> f64 {
        match self {
            Prior::Discrete { atoms } => atoms.iter().map(|(v, w)| v * v * w).sum(),
            Prior::Gaussian { mean, variance } => mean * mean + variance,
            Prior::BernoulliGaussian {
                sparsity,
                component_variance,
            } => sparsity * component_variance,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Prior::Discrete { atoms } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for &(v, w) in atoms {
                    acc += w;
                    if u <= acc {
                        return v;
                    }
                }
                atoms.last().expect("validated non-empty").0
            }
            Prior::Gaussian { mean, variance } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + variance.sqrt() * z
            }
            Prior::BernoulliGaussian {
                sparsity,
                component_variance,
            } => {
                let u: f64 = rng.random();
                if u < *sparsity {
                    let z: f64 = rng.sample(StandardNormal);
                    component_variance.sqrt() * z
                } else {
                    0.0
                }
            }
        }
    }

    pub fn atoms(&self) -> Option<&[(f64, f64)]> {
        match self {
            Prior::Discrete { atoms } => Some(atoms),
            _ => None,
        }
    }
}

/// Per-layer conditional law of the activated output given the mixed input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Awgn {
        variance: f64,
    },
    #[serde(rename = "identity")]
    DeterministicIdentity,
    Sign {
        #[serde(default)]
        pre_noise_variance: f64,
    },
    DiscreteMap {
        levels: Vec<f64>,
        thresholds: Vec<f64>,
        #[serde(default)]
        noise_variance: f64,
    },
}

impl Activation {
    pub fn awgn(variance: f64) -> Result<Self> {
        let a = Activation::Awgn { variance };
        a.validate()?;
        Ok(a)
    }

    pub fn identity() -> Self {
        Activation::DeterministicIdentity
    }

    pub fn sign_noiseless() -> Self {
        Activation::Sign {
            pre_noise_variance: 0.0,
        }
    }

    /// Sign applied after Gaussian pre-noise; the conditional mass of `+1`
    /// is `Phi(z / sqrt(pre_noise_variance))`.
    pub fn sign_probit(pre_noise_variance: f64) -> Result<Self> {
        let a = Activation::Sign { pre_noise_variance };
        a.validate()?;
        Ok(a)
    }

    pub fn discrete_map(
        levels: Vec<f64>,
        thresholds: Vec<f64>,
        noise_variance: f64,
    ) -> Result<Self> {
        let a = Activation::DiscreteMap {
            levels,
            thresholds,
            noise_variance,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Activation::Awgn { variance } => {
                if !variance.is_finite() || *variance < 0.0 {
                    return Err(Error::Config(format!(
                        "awgn variance must be >= 0, got {variance}"
                    )));
                }
            }
            Activation::DeterministicIdentity => {}
            Activation::Sign { pre_noise_variance } => {
                if !pre_noise_variance.is_finite() || *pre_noise_variance < 0.0 {
                    return Err(Error::Config(format!(
                        "sign pre-noise variance must be >= 0, got {pre_noise_variance}"
                    )));
                }
            }
            Activation::DiscreteMap {
                levels,
                thresholds,
                noise_variance,
            } => {
                if levels.len() != thresholds.len() + 1 {
                    return Err(Error::Config(format!(
                        "discrete_map needs thresholds.len() + 1 levels, got {} levels and {} thresholds",
                        levels.len(),
                        thresholds.len()
                    )));
                }
                if thresholds.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(
                        "discrete_map thresholds must be strictly increasing".into(),
                    ));
                }
                for pair in 0..levels.len() {
                    for other in pair + 1..levels.len() {
                        if levels[pair] == levels[other] {
                            return Err(Error::Config(
                                "discrete_map levels must be pairwise distinct".into(),
                            ));
                        }
                    }
                }
                if !noise_variance.is_finite() || *noise_variance < 0.0 {
                    return Err(Error::Config(format!(
                        "discrete_map noise variance must be >= 0, got {noise_variance}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Finite output alphabet for discrete kinds, `None` for continuous.
    pub fn output_alphabet(&self) -> Option<Vec<f64>> {
        match self {
            Activation::Sign { .. } => Some(vec![-1.0, 1.0]),
            Activation::DiscreteMap { levels, .. } => Some(levels.clone()),
            _ => None,
        }
    }

    pub fn is_discrete_output(&self) -> bool {
        matches!(
            self,
            Activation::Sign { .. } | Activation::DiscreteMap { .. }
        )
    }

    /// For continuous kinds, the additive output noise variance.
    pub fn additive_noise_variance(&self) -> Option<f64> {
        match self {
            Activation::Awgn { variance } => Some(*variance),
            Activation::DeterministicIdentity => Some(0.0),
            _ => None,
        }
    }

    pub(crate) fn quantizer(&self) -> Option<(&[f64], &[f64], f64)> {
        const SIGN_LEVELS: [f64; 2] = [-1.0, 1.0];
        const SIGN_THRESHOLDS: [f64; 1] = [0.0];
        match self {
            Activation::Sign { pre_noise_variance } => {
                Some((&SIGN_LEVELS, &SIGN_THRESHOLDS, *pre_noise_variance))
            }
            Activation::DiscreteMap {
                levels,
                thresholds,
                noise_variance,
            } => Some((levels, thresholds, *noise_variance)),
            _ => None,
        }
    }

    /// Density (continuous kinds) or probability mass (discrete kinds) of
    /// `x_out` given the mixed input `z`. For discrete kinds, `x_out` must be
    /// a member of the output alphabet.
    pub fn conditional_density(&self, x_out: f64, z: f64) -> Result<f64> {
        match self {
            Activation::Awgn { variance } => {
                if *variance < DIRAC_VARIANCE {
                    // Dirac limit: densities are reported as the point-mass
                    // convention (infinite on the diagonal).
                    Ok(if x_out == z { f64::INFINITY } else { 0.0 })
                } else {
                    Ok(gaussian_pdf(x_out, z, *variance))
                }
            }
            Activation::DeterministicIdentity => Ok(if x_out == z { f64::INFINITY } else { 0.0 }),
            Activation::Sign { .. } | Activation::DiscreteMap { .. } => {
                let (levels, ..) = self.quantizer().expect("discrete kind");
                let idx = levels.iter().position(|&l| l == x_out).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "output {x_out} is not in the declared alphabet {levels:?}"
                    ))
                })?;
                Ok(self.cell_mass_conditional(idx, z))
            }
        }
    }

    /// P(level `idx` | z) for discrete kinds.
    fn cell_mass_conditional(&self, idx: usize, z: f64) -> f64 {
        let (levels, thresholds, noise) = self.quantizer().expect("discrete kind");
        debug_assert!(idx < levels.len());
        let lo = if idx == 0 {
            f64::NEG_INFINITY
        } else {
            thresholds[idx - 1]
        };
        let hi = if idx == thresholds.len() {
            f64::INFINITY
        } else {
            thresholds[idx]
        };
        if noise < DIRAC_VARIANCE {
            // Noiseless quantizer: cells are half-open [lo, hi) with the
            // bottom cell closed below; z exactly on a threshold belongs to
            // the upper cell (sign(0) = +1).
            return if z >= lo && z < hi { 1.0 } else { 0.0 };
        }
        let s = noise.sqrt();
        let upper = if hi.is_infinite() {
            1.0
        } else {
            normal_cdf((hi - z) / s)
        };
        let lower = if lo.is_infinite() {
            0.0
        } else {
            normal_cdf((lo - z) / s)
        };
        (upper - lower).max(0.0)
    }

    /// P(level `idx` | Z), Z ~ N(mu, v): the closed-form Gaussian cell mass.
    pub fn cell_mass(&self, idx: usize, mu: f64, v: f64) -> f64 {
        let (levels, thresholds, noise) = self.quantizer().expect("discrete kind");
        debug_assert!(idx < levels.len());
        let total = noise + v;
        if total < DIRAC_VARIANCE {
            return self.cell_mass_conditional(idx, mu);
        }
        let s = total.sqrt();
        let lo = if idx == 0 {
            f64::NEG_INFINITY
        } else {
            thresholds[idx - 1]
        };
        let hi = if idx == thresholds.len() {
            f64::INFINITY
        } else {
            thresholds[idx]
        };
        let upper = if hi.is_infinite() {
            1.0
        } else {
            normal_cdf((hi - mu) / s)
        };
        let lower = if lo.is_infinite() {
            0.0
        } else {
            normal_cdf((lo - mu) / s)
        };
        (upper - lower).max(0.0)
    }

    /// E[Z 1{output = level idx}] for Z ~ N(mu, v): the Gaussian cell first
    /// moment, used by the fixed-point updates for discrete layers.
    pub fn cell_first_moment(&self, idx: usize, mu: f64, v: f64) -> f64 {
        let (levels, thresholds, noise) = self.quantizer().expect("discrete kind");
        debug_assert!(idx < levels.len());
        let total = noise + v;
        if total < DIRAC_VARIANCE {
            return mu * self.cell_mass_conditional(idx, mu);
        }
        let s = total.sqrt();
        let lo = if idx == 0 {
            f64::NEG_INFINITY
        } else {
            thresholds[idx - 1]
        };
        let hi = if idx == thresholds.len() {
            f64::INFINITY
        } else {
            thresholds[idx]
        };
        let (cdf_hi, pdf_hi) = if hi.is_infinite() {
            (1.0, 0.0)
        } else {
            let u = (hi - mu) / s;
            (normal_cdf(u), normal_pdf(u))
        };
        let (cdf_lo, pdf_lo) = if lo.is_infinite() {
            (0.0, 0.0)
        } else {
            let u = (lo - mu) / s;
            (normal_cdf(u), normal_pdf(u))
        };
        mu * (cdf_hi - cdf_lo) - v / s * (pdf_hi - pdf_lo)
    }

    /// E[X^2] of the activated output when the mixed input is N(0, v).
    pub fn output_second_moment(&self, v: f64) -> f64 {
        match self {
            Activation::Awgn { variance } => v + variance,
            Activation::DeterministicIdentity => v,
            Activation::Sign { .. } => 1.0,
            Activation::DiscreteMap { levels, .. } => levels
                .iter()
                .enumerate()
                .map(|(idx, &l)| l * l * self.cell_mass(idx, 0.0, v))
                .sum(),
        }
    }

    /// Draws an output sample given the mixed input `z`.
    pub fn sample<R: Rng + ?Sized>(&self, z: f64, rng: &mut R) -> f64 {
        match self {
            Activation::Awgn { variance } => {
                if *variance < DIRAC_VARIANCE {
                    z
                } else {
                    let w: f64 = rng.sample(StandardNormal);
                    z + variance.sqrt() * w
                }
            }
            Activation::DeterministicIdentity => z,
            Activation::Sign { .. } | Activation::DiscreteMap { .. } => {
                let (levels, thresholds, noise) = self.quantizer().expect("discrete kind");
                let pre = if noise < DIRAC_VARIANCE {
                    z
                } else {
                    let w: f64 = rng.sample(StandardNormal);
                    z + noise.sqrt() * w
                };
                let idx = thresholds.partition_point(|&t| t <= pre);
                levels[idx]
            }
        }
    }
}

/// One mixing-plus-activation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// Rows over columns of the mixing matrix, i.e. output dim over input dim.
    pub alpha: f64,
    pub activation: Activation,
}

/// The full multi-layer generalized linear model: a scalar prior plus an
/// ordered stack of layers. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetworkSpec", into = "RawNetworkSpec")]
pub struct NetworkSpec {
    prior: Prior,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetworkSpec {
    prior: Prior,
    layers: Vec<Layer>,
}

impl TryFrom<RawNetworkSpec> for NetworkSpec {
    type Error = Error;
    fn try_from(raw: RawNetworkSpec) -> Result<Self> {
        NetworkSpec::new(raw.prior, raw.layers)
    }
}

impl From<NetworkSpec> for RawNetworkSpec {
    fn from(spec: NetworkSpec) -> Self {
        RawNetworkSpec {
            prior: spec.prior,
            layers: spec.layers,
        }
    }
}

impl NetworkSpec {
    pub fn new(prior: Prior, layers: Vec<Layer>) -> Result<Self> {
        prior.validate()?;
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.activation.validate()?;
            if !layer.alpha.is_finite() || layer.alpha <= 0.0 {
                return Err(Error::Config(format!(
                    "layer {} aspect ratio must be finite and positive, got {}",
                    i + 1,
                    layer.alpha
                )));
            }
        }
        Ok(NetworkSpec { prior, layers })
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of layers L.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}
