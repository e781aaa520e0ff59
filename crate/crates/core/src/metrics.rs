//! Reported quantities assembled from solver output: average MSE, the
//! effective channel noise, multiuser efficiency, SER, and parameter sweeps.

use serde::{Deserialize, Serialize};

use crate::channels::{NetworkSpec, Prior};
use crate::error::{Error, Result};
use crate::replica_solver::{solve, FixedPointResult, InitStyle, SolverOptions};
use crate::scalar_estimators::mse_to_ser_qpsk;

/// Which knob a sweep varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Noise variance of the final awgn layer.
    NoiseVariance,
    /// Aspect ratio of the given layer (1-based).
    AlphaOfLayer(usize),
    /// Sparsity of a spike-and-slab prior.
    Sparsity,
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub base: NetworkSpec,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        let increasing = self.values.windows(2).all(|w| w[0] < w[1]);
        let decreasing = self.values.windows(2).all(|w| w[0] > w[1]);
        if self.values.len() > 1 && !increasing && !decreasing {
            return Err(Error::Config(
                "sweep values must be strictly monotonic".into(),
            ));
        }
        // Surface axis/network mismatches before any solving happens.
        self.network_at(self.values[0]).map(|_| ())
    }

    /// The base network with the axis value substituted.
    pub fn network_at(&self, value: f64) -> Result<NetworkSpec> {
        let mut layers = self.base.layers().to_vec();
        let mut prior = self.base.prior().clone();
        match &self.axis {
            SweepAxis::NoiseVariance => {
                let last = layers.last_mut().expect("validated non-empty");
                match &mut last.activation {
                    crate::channels::Activation::Awgn { variance } => *variance = value,
                    other => {
                        return Err(Error::Config(format!(
                            "noise_variance sweep needs an awgn final layer, got {other:?}"
                        )))
                    }
                }
            }
            SweepAxis::AlphaOfLayer(layer) => {
                if *layer == 0 || *layer > layers.len() {
                    return Err(Error::Config(format!(
                        "alpha_of_layer {layer} outside 1..={}",
                        layers.len()
                    )));
                }
                layers[layer - 1].alpha = value;
            }
            SweepAxis::Sparsity => match &mut prior {
                Prior::BernoulliGaussian { sparsity, .. } => *sparsity = value,
                other => {
                    return Err(Error::Config(format!(
                        "sparsity sweep needs a bernoulli_gaussian prior, got {other:?}"
                    )))
                }
            },
        }
        NetworkSpec::new(prior, layers)
    }
}

/// One solved sweep point.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis_value: f64,
    pub eta: f64,
    pub avg_mse: f64,
    /// Emitted only for symmetric two-atom priors.
    pub ser: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// avg MSE = t_x - d on the first layer. The flag warns when the input
/// never converged; the value is still reported, never interpolated.
pub fn avg_mse_from_state(result: &FixedPointResult) -> (f64, bool) {
    (result.state.t_x[0] - result.state.d[0], !result.converged)
}

/// Ratio of the physical noise floor to the effective noise, in (0, 1].
/// Meaningful for a final awgn layer with positive noise.
pub fn multiuser_efficiency(result: &FixedPointResult, noise_variance: f64) -> Result<f64> {
    if !(noise_variance.is_finite() && noise_variance > 0.0) {
        return Err(Error::InvalidInput(format!(
            "multiuser efficiency needs a positive noise variance, got {noise_variance}"
        )));
    }
    if !(result.eta.is_finite() && result.eta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "effective noise must be positive, got {}",
            result.eta
        )));
    }
    Ok((noise_variance / result.eta).min(1.0))
}

/// SER of a symmetric two-atom prior at the solved effective noise, using
/// the per-dimension SNR reading of the Q-function argument.
pub fn ser_for_prior(prior: &Prior, eta: f64) -> Option<f64> {
    let atoms = prior.atoms()?;
    if atoms.len() != 2 {
        return None;
    }
    let (a, b) = (atoms[0], atoms[1]);
    if (a.0 + b.0).abs() > 1e-12 || (a.1 - b.1).abs() > 1e-12 {
        return None;
    }
    let amplitude2 = a.0 * a.0;
    mse_to_ser_qpsk(amplitude2 / eta).ok()
}

/// Solves every sweep point. With `threads <= 1` each point warm-starts
/// from the previous solution; the parallel mode solves points
/// independently from cold starts (fixed points, not paths, are the
/// contract). Unconverged points are recorded as such and the sweep
/// continues.
pub fn run_sweep(sweep: &SweepSpec, opts: &SolverOptions, threads: usize) -> Result<Vec<SweepRow>> {
    sweep.validate()?;
    opts.validate()?;

    let solve_point = |net: &NetworkSpec, point_opts: &SolverOptions, value: f64| -> SweepRow {
        match solve(net, point_opts) {
            Ok(r) => SweepRow {
                axis_value: value,
                eta: r.eta,
                avg_mse: r.avg_mse,
                ser: if r.converged {
                    ser_for_prior(net.prior(), r.eta)
                } else {
                    None
                },
                iterations: r.iterations,
                converged: r.converged,
            },
            Err(_) => SweepRow {
                axis_value: value,
                eta: f64::NAN,
                avg_mse: f64::NAN,
                ser: None,
                iterations: 0,
                converged: false,
            },
        }
    };

    if threads > 1 {
        return run_points_parallel(sweep, opts, threads, &solve_point);
    }

    let mut rows = Vec::with_capacity(sweep.values.len());
    let mut warm: Option<Vec<f64>> = None;
    for &value in &sweep.values {
        let net = sweep.network_at(value)?;
        let point_opts = SolverOptions {
            init_style: match warm.take() {
                Some(d) => InitStyle::Warm(d),
                None => opts.init_style.clone(),
            },
            ..opts.clone()
        };
        let row = match solve(&net, &point_opts) {
            Ok(r) => {
                if r.converged {
                    // Chain the next point off this solution.
                    warm = Some(r.state.d.clone());
                }
                SweepRow {
                    axis_value: value,
                    eta: r.eta,
                    avg_mse: r.avg_mse,
                    ser: if r.converged {
                        ser_for_prior(net.prior(), r.eta)
                    } else {
                        None
                    },
                    iterations: r.iterations,
                    converged: r.converged,
                }
            }
            Err(_) => SweepRow {
                axis_value: value,
                eta: f64::NAN,
                avg_mse: f64::NAN,
                ser: None,
                iterations: 0,
                converged: false,
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(feature = "parallel")]
fn run_points_parallel(
    sweep: &SweepSpec,
    opts: &SolverOptions,
    threads: usize,
    solve_point: &(dyn Fn(&NetworkSpec, &SolverOptions, f64) -> SweepRow + Sync),
) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    let nets: Vec<(f64, NetworkSpec)> = sweep
        .values
        .iter()
        .map(|&v| sweep.network_at(v).map(|n| (v, n)))
        .collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("could not build thread pool: {e}")))?;
    Ok(pool.install(|| {
        nets.par_iter()
            .map(|(v, net)| solve_point(net, opts, *v))
            .collect()
    }))
}

#[cfg(not(feature = "parallel"))]
fn run_points_parallel(
    sweep: &SweepSpec,
    opts: &SolverOptions,
    _threads: usize,
    solve_point: &(dyn Fn(&NetworkSpec, &SolverOptions, f64) -> SweepRow + Sync),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(sweep.values.len());
    for &value in &sweep.values {
        let net = sweep.network_at(value)?;
        rows.push(solve_point(&net, opts, value));
    }
    Ok(rows)
}
