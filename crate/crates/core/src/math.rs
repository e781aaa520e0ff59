//! Small numeric helpers shared across the crate.

/// Variances below this are treated as a point mass (Dirac limit).
pub const DIRAC_VARIANCE: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Density of N(mean, var) at `x`. Requires `var > 0`.
#[inline]
pub fn gaussian_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let t = x - mean;
    INV_SQRT_2PI / var.sqrt() * (-0.5 * t * t / var).exp()
}

/// Log-density of N(mean, var) at `x`.
#[inline]
pub fn gaussian_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let t = x - mean;
    -0.5 * (t * t / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// Standard normal CDF, Phi(x).
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Gaussian tail probability, Q(x) = 1 - Phi(x).
#[inline]
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Streaming log-sum-exp accumulator.
///
/// Merges terms given in log space without ever exponentiating large
/// magnitudes; used by the brute-force oracle to sum posterior weights.
#[derive(Debug, Clone, Copy)]
pub struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    pub fn new() -> Self {
        LogSum {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn add(&mut self, log_term: f64) {
        if log_term == f64::NEG_INFINITY {
            return;
        }
        if log_term <= self.max {
            self.sum += (log_term - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - log_term).exp() + 1.0;
            self.max = log_term;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

impl Default for LogSum {
    fn default() -> Self {
        Self::new()
    }
}

/// Kahan compensated summation; keeps reductions deterministic to well
/// below 1e-12 regardless of accumulation length.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}
