//! The equivalent scalar channel Y = X + W, W ~ N(0, eta).
//!
//! The decoupled single-input single-output view of the network: posterior
//! means, the scalar MMSE curve `eta -> E[(X - <X>)^2]`, and joint moments
//! of `(X, <X>)` that the Monte Carlo validator compares against.

use std::sync::OnceLock;

use crate::channels::Prior;
use crate::error::{Error, Result};
use crate::math::{gaussian_log_pdf, q_function, DIRAC_VARIANCE};
use crate::quadrature::HermiteGrid;

/// Smallest admissible effective noise variance; callers clamp to this
/// instead of passing eta = 0, which would degenerate the posterior.
pub const MIN_ETA: f64 = 1e-12;

/// Floor on the order used for the one-dimensional output averages here.
///
/// Posterior-mean integrands for discrete priors are tanh-like with a
/// saturation front whose Hermite convergence is only root-exponential;
/// order 64 leaves ~1e-5 residuals while 384 reaches ~1e-10, and the cost
/// of a finer one-dimensional axis is negligible next to the solver's
/// multi-dimensional sweeps. Callers passing a coarser grid are upgraded
/// to this shared one, so refining the solver grid leaves these integrals
/// already converged.
const SCALAR_AXIS_ORDER: usize = 384;

fn scalar_axis(grid: &HermiteGrid) -> &HermiteGrid {
    static FINE: OnceLock<HermiteGrid> = OnceLock::new();
    if grid.order() >= SCALAR_AXIS_ORDER {
        grid
    } else {
        FINE.get_or_init(|| HermiteGrid::new(SCALAR_AXIS_ORDER).expect("static order is valid"))
    }
}

/// Scalar AWGN channel with a known prior: the right-hand side of the
/// decoupling statement.
#[derive(Debug, Clone)]
pub struct SisoChannel {
    prior: Prior,
    eta: f64,
}

impl SisoChannel {
    pub fn new(prior: Prior, eta: f64) -> Result<Self> {
        prior.validate()?;
        if !eta.is_finite() || eta <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "effective noise variance must be positive and finite, got {eta}"
            )));
        }
        Ok(SisoChannel { prior, eta })
    }

    /// Channel at eta = 1 / (2 d_tilde), clamped to [`MIN_ETA`].
    pub fn from_d_tilde(prior: Prior, d_tilde: f64) -> Result<Self> {
        if !d_tilde.is_finite() || d_tilde <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "d_tilde must be positive and finite, got {d_tilde}"
            )));
        }
        SisoChannel::new(prior, (0.5 / d_tilde).max(MIN_ETA))
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    /// E[X | Y = y]. Exact atom sums for discrete priors, the Wiener form
    /// for Gaussian, the two-hypothesis form for spike-and-slab.
    pub fn posterior_mean(&self, y: f64) -> f64 {
        match &self.prior {
            Prior::Discrete { atoms } => {
                // Stabilize the atom sum by factoring out the largest exponent.
                let max_log = atoms
                    .iter()
                    .map(|&(v, _)| -(y - v) * (y - v) / (2.0 * self.eta))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut num = 0.0;
                let mut den = 0.0;
                for &(v, w) in atoms {
                    let l = -(y - v) * (y - v) / (2.0 * self.eta) - max_log;
                    let t = w * l.exp();
                    num += v * t;
                    den += t;
                }
                num / den
            }
            Prior::Gaussian { mean, variance } => {
                (variance * y + self.eta * mean) / (variance + self.eta)
            }
            Prior::BernoulliGaussian {
                sparsity,
                component_variance,
            } => {
                if *component_variance < DIRAC_VARIANCE || *sparsity == 0.0 {
                    return 0.0;
                }
                let slab_var = component_variance + self.eta;
                let slab_mean = component_variance * y / slab_var;
                if *sparsity == 1.0 {
                    return slab_mean;
                }
                let log_spike = (1.0 - sparsity).ln() + gaussian_log_pdf(y, 0.0, self.eta);
                let log_slab = sparsity.ln() + gaussian_log_pdf(y, 0.0, slab_var);
                let p_slab = 1.0 / (1.0 + (log_spike - log_slab).exp());
                p_slab * slab_mean
            }
        }
    }

    /// `E[<X>^2]`: the power of the posterior mean, with the Y-average taken
    /// per prior mixture component on a Hermite axis.
    pub fn estimate_power(&self, grid: &HermiteGrid) -> Result<f64> {
        let grid = scalar_axis(grid);
        let s = self.eta.sqrt();
        match &self.prior {
            Prior::Discrete { atoms } => {
                let mut acc = 0.0;
                for &(v, w) in atoms {
                    if w == 0.0 {
                        continue;
                    }
                    acc += w * grid.expect(|t| {
                        let pm = self.posterior_mean(v + s * t);
                        pm * pm
                    })?;
                }
                Ok(acc)
            }
            Prior::Gaussian { mean, variance } => {
                let sy = (variance + self.eta).sqrt();
                grid.expect(|t| {
                    let pm = self.posterior_mean(mean + sy * t);
                    pm * pm
                })
            }
            Prior::BernoulliGaussian {
                sparsity,
                component_variance,
            } => {
                let spike = grid.expect(|t| {
                    let pm = self.posterior_mean(s * t);
                    pm * pm
                })?;
                let s_slab = (component_variance + self.eta).sqrt();
                let slab = grid.expect(|t| {
                    let pm = self.posterior_mean(s_slab * t);
                    pm * pm
                })?;
                Ok((1.0 - sparsity) * spike + sparsity * slab)
            }
        }
    }

    /// The scalar MMSE: `E[(X - <X>)^2] = E[X^2] - E[<X>^2]` by orthogonality.
    pub fn mmse(&self, grid: &HermiteGrid) -> Result<f64> {
        Ok(self.prior.second_moment() - self.estimate_power(grid)?)
    }

    /// Joint moment `E[X^i <X>^j]`, `i + j <= 8`.
    pub fn joint_moment(&self, grid: &HermiteGrid, i: u32, j: u32) -> Result<f64> {
        if i + j > 8 {
            return Err(Error::InvalidInput(format!(
                "joint moment order {i}+{j} exceeds the supported cap of 8"
            )));
        }
        let grid = scalar_axis(grid);
        let s = self.eta.sqrt();
        match &self.prior {
            Prior::Discrete { atoms } => {
                let mut acc = 0.0;
                for &(v, w) in atoms {
                    if w == 0.0 {
                        continue;
                    }
                    acc += w * grid.expect(|t| {
                        v.powi(i as i32) * self.posterior_mean(v + s * t).powi(j as i32)
                    })?;
                }
                Ok(acc)
            }
            Prior::Gaussian { mean, variance } => {
                let sx = variance.sqrt();
                grid.expect_2d(|u, t| {
                    let x = mean + sx * u;
                    x.powi(i as i32) * self.posterior_mean(x + s * t).powi(j as i32)
                })
            }
            Prior::BernoulliGaussian {
                sparsity,
                component_variance,
            } => {
                let spike = if i == 0 {
                    grid.expect(|t| self.posterior_mean(s * t).powi(j as i32))?
                } else {
                    0.0
                };
                let sx = component_variance.sqrt();
                let slab = grid.expect_2d(|u, t| {
                    let x = sx * u;
                    x.powi(i as i32) * self.posterior_mean(x + s * t).powi(j as i32)
                })?;
                Ok((1.0 - sparsity) * spike + sparsity * slab)
            }
        }
    }
}

/// Average MSE of the equal-weight binary prior as an explicit function of
/// d_tilde: `1 - E_z[tanh(2 d_tilde + sqrt(2 d_tilde) z)]`, with
/// eta = 1 / (2 d_tilde).
pub fn qpsk_mse_closed_form(grid: &HermiteGrid, d_tilde: f64) -> Result<f64> {
    if !d_tilde.is_finite() || d_tilde <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "d_tilde must be positive, got {d_tilde}"
        )));
    }
    let grid = scalar_axis(grid);
    let shift = 2.0 * d_tilde;
    let scale = (2.0 * d_tilde).sqrt();
    Ok(1.0 - grid.expect(|z| (shift + scale * z).tanh())?)
}

/// QPSK symbol error rate from a Q-function argument:
/// `2 Q(sqrt(arg)) - Q(sqrt(arg))^2`.
///
/// The argument convention is left to the caller on purpose. One reading
/// feeds the effective noise variance eta directly; the conventional
/// communications reading feeds the per-dimension SNR 1/eta, under which the
/// SER vanishes as the channel cleans up. The sweep reporting in this crate
/// uses the SNR reading.
pub fn mse_to_ser_qpsk(q_argument: f64) -> Result<f64> {
    if !q_argument.is_finite() && q_argument != f64::INFINITY {
        return Err(Error::InvalidInput(format!(
            "SER argument must be a number, got {q_argument}"
        )));
    }
    if q_argument < 0.0 {
        return Err(Error::InvalidInput(format!(
            "SER argument must be nonnegative, got {q_argument}"
        )));
    }
    let q = q_function(q_argument.sqrt());
    Ok(2.0 * q - q * q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::HermiteGrid;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid() -> HermiteGrid {
        HermiteGrid::new(96).unwrap()
    }

    #[test]
    fn posterior_mean_reference_points() {
        let wiener = SisoChannel::new(Prior::gaussian(0.0, 1.0).unwrap(), 1.0).unwrap();
        assert_abs_diff_eq!(wiener.posterior_mean(2.0), 1.0, epsilon = 1e-14);

        let binary = SisoChannel::new(Prior::symmetric_binary(), 0.5).unwrap();
        assert_abs_diff_eq!(binary.posterior_mean(0.0), 0.0, epsilon = 1e-14);
        // For the +-1 prior the atom sum collapses to tanh(y / eta).
        assert_abs_diff_eq!(binary.posterior_mean(1.0), (2.0f64).tanh(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            binary.posterior_mean(1.0),
            0.9640275800758169,
            epsilon = 1e-12
        );
    }

    #[test]
    fn posterior_mean_bernoulli_gaussian_two_hypothesis() {
        let ch = SisoChannel::new(Prior::bernoulli_gaussian(0.3, 2.0).unwrap(), 0.5).unwrap();
        // Direct mixture-density evaluation as the reference.
        let y = 1.3;
        let spike = 0.7 * crate::math::gaussian_pdf(y, 0.0, 0.5);
        let slab = 0.3 * crate::math::gaussian_pdf(y, 0.0, 2.5);
        let want = slab / (spike + slab) * (2.0 * y / 2.5);
        assert_abs_diff_eq!(ch.posterior_mean(y), want, epsilon = 1e-13);
        // Symmetry through the origin.
        assert_abs_diff_eq!(ch.posterior_mean(-y), -want, epsilon = 1e-13);
    }

    #[test]
    fn scalar_mmse_reference_points() {
        let g = grid();
        let wiener = SisoChannel::new(Prior::gaussian(0.0, 1.0).unwrap(), 1.0).unwrap();
        assert_abs_diff_eq!(wiener.mmse(&g).unwrap(), 0.5, epsilon = 1e-10);

        let blind = SisoChannel::new(Prior::symmetric_binary(), 1e6).unwrap();
        assert!((blind.mmse(&g).unwrap() - 1.0).abs() < 1e-3);

        // eta = 0.5 corresponds to d_tilde = 1; frozen from a dense
        // trapezoid evaluation of the tanh formula.
        let binary = SisoChannel::new(Prior::symmetric_binary(), 0.5).unwrap();
        assert_abs_diff_eq!(
            binary.mmse(&g).unwrap(),
            0.23101822192929555,
            epsilon = 1e-9
        );
    }

    #[test]
    fn tanh_formula_agrees_with_generic_quadrature() {
        let g = grid();
        for &dt in &[0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 50.0] {
            let ch = SisoChannel::from_d_tilde(Prior::symmetric_binary(), dt).unwrap();
            let generic = ch.mmse(&g).unwrap();
            let closed = qpsk_mse_closed_form(&g, dt).unwrap();
            assert!(
                (generic - closed).abs() < 1e-9,
                "d_tilde {dt}: generic {generic} vs closed {closed}"
            );
        }
    }

    #[test]
    fn qpsk_closed_form_limits() {
        let g = grid();
        assert!((qpsk_mse_closed_form(&g, 1e-9).unwrap() - 1.0).abs() < 1e-3);
        assert!(qpsk_mse_closed_form(&g, 50.0).unwrap() < 1e-3);
        assert!(qpsk_mse_closed_form(&g, 0.0).is_err());
        assert!(qpsk_mse_closed_form(&g, -1.0).is_err());
    }

    #[test]
    fn mmse_monotone_in_eta_and_bounded() {
        let g = grid();
        let priors = [
            Prior::gaussian(0.0, 1.0).unwrap(),
            Prior::symmetric_binary(),
            Prior::bernoulli_gaussian(0.2, 1.5).unwrap(),
        ];
        for prior in priors {
            let mut last = 0.0;
            for k in 0..=20 {
                let eta = 0.01 * (100.0f64 / 0.01).powf(k as f64 / 20.0);
                let ch = SisoChannel::new(prior.clone(), eta).unwrap();
                let mse = ch.mmse(&g).unwrap();
                assert!(mse >= -1e-10, "{prior:?} eta {eta}: mse {mse}");
                assert!(mse <= prior.second_moment() + 1e-10);
                assert!(
                    mse + 1e-10 >= last,
                    "{prior:?}: mse not nondecreasing at eta {eta}"
                );
                last = mse;
            }
        }
    }

    #[test]
    fn orthogonality_of_the_estimate() {
        let g = grid();
        let priors = [
            Prior::gaussian(0.3, 1.0).unwrap(),
            Prior::symmetric_binary(),
            Prior::bernoulli_gaussian(0.25, 2.0).unwrap(),
        ];
        for prior in priors {
            for &eta in &[0.05, 0.5, 2.0, 20.0] {
                let ch = SisoChannel::new(prior.clone(), eta).unwrap();
                let m11 = ch.joint_moment(&g, 1, 1).unwrap();
                let m02 = ch.joint_moment(&g, 0, 2).unwrap();
                assert!(
                    (m11 - m02).abs() < 1e-8,
                    "{prior:?} eta {eta}: E[X<X>] {m11} vs E[<X>^2] {m02}"
                );
            }
        }
    }

    #[test]
    fn joint_moment_reference_points() {
        let g = grid();
        let ch = SisoChannel::new(Prior::symmetric_binary(), 0.5).unwrap();
        assert_abs_diff_eq!(ch.joint_moment(&g, 0, 0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ch.joint_moment(&g, 2, 0).unwrap(), 1.0, epsilon = 1e-12);
        assert!(ch.joint_moment(&g, 5, 4).is_err());
        // E[<X>^2] is consistent with mmse.
        let d = ch.joint_moment(&g, 0, 2).unwrap();
        assert_abs_diff_eq!(1.0 - d, ch.mmse(&g).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn ser_conversion() {
        // 2 Q(2) - Q(2)^2 with Q from the erfc oracle.
        let q2 = 0.5 * libm::erfc(2.0 / std::f64::consts::SQRT_2);
        assert_abs_diff_eq!(
            mse_to_ser_qpsk(4.0).unwrap(),
            2.0 * q2 - q2 * q2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            mse_to_ser_qpsk(4.0).unwrap(),
            0.044982695392698877,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(mse_to_ser_qpsk(0.0).unwrap(), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(mse_to_ser_qpsk(1e9).unwrap(), 0.0, epsilon = 1e-15);
        assert!(mse_to_ser_qpsk(-1.0).is_err());
        assert!(mse_to_ser_qpsk(f64::NAN).is_err());
    }

    #[test]
    fn channel_construction_guards() {
        assert!(SisoChannel::new(Prior::symmetric_binary(), 0.0).is_err());
        assert!(SisoChannel::new(Prior::symmetric_binary(), f64::NAN).is_err());
        assert!(SisoChannel::from_d_tilde(Prior::symmetric_binary(), 0.0).is_err());
        // Huge d_tilde clamps eta at the floor instead of reaching zero.
        let ch = SisoChannel::from_d_tilde(Prior::symmetric_binary(), 1e15).unwrap();
        assert!(ch.eta() >= MIN_ETA);
    }

    proptest! {
        #[test]
        fn posterior_mean_nondecreasing_for_log_concave_priors(
            y1 in -6.0f64..6.0,
            dy in 0.0f64..6.0,
            eta in 0.01f64..10.0,
        ) {
            let y2 = y1 + dy;
            for prior in [Prior::gaussian(0.0, 1.0).unwrap(), Prior::symmetric_binary()] {
                let ch = SisoChannel::new(prior, eta).unwrap();
                prop_assert!(ch.posterior_mean(y1) <= ch.posterior_mean(y2) + 1e-12);
            }
        }
    }
}
