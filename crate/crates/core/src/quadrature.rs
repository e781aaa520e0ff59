//! Gauss-Hermite quadrature against the standard-normal measure.
//!
//! Every fixed-point integral in this crate reduces to one to three nested
//! expectations over N(0,1) axes. A [`HermiteGrid`] of order n integrates
//! polynomials up to degree 2n-1 exactly; the replica integrands are smooth
//! products of Gaussians, tanh and Phi, for which the default order 64 leaves
//! residuals far below Monte Carlo noise.
//!
//! Nodes and weights are computed at construction by Newton iteration on the
//! orthonormal Hermite recurrence (physicists' convention), then rescaled to
//! the unit-variance probabilists' measure so that weights sum to one.

use crate::channels::Activation;
use crate::error::{Error, Result};
use crate::math::DIRAC_VARIANCE;

pub const MIN_ORDER: usize = 2;
pub const MAX_ORDER: usize = 512;

/// Default nodes per Gaussian axis; see module docs.
pub const DEFAULT_ORDER: usize = 64;

/// Quadrature nodes and weights for E[f(X)], X ~ N(0,1).
#[derive(Debug, Clone)]
pub struct HermiteGrid {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl HermiteGrid {
    /// Builds a grid of the given order. Errors outside 2..=512.
    pub fn new(order: usize) -> Result<Self> {
        if !(MIN_ORDER..=MAX_ORDER).contains(&order) {
            return Err(Error::OrderOutOfRange(order));
        }
        let (nodes, weights) = golub_welsch(order)?;
        Ok(HermiteGrid {
            order,
            nodes,
            weights,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// E[f(X)] for X ~ N(0,1). Errors if `f` is non-finite at a node.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand { node: x });
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// E[f(X, Z)] for independent X, Z ~ N(0,1).
    pub fn expect_2d<F: Fn(f64, f64) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (&x, &wx) in self.nodes.iter().zip(&self.weights) {
            let mut inner = 0.0;
            for (&z, &wz) in self.nodes.iter().zip(&self.weights) {
                let v = f(x, z);
                if !v.is_finite() {
                    return Err(Error::NonFiniteIntegrand { node: z });
                }
                inner += wz * v;
            }
            acc += wx * inner;
        }
        Ok(acc)
    }
}

/// Expectation of `f(xi, y)` where `y` is the output of `channel` driven by
/// an input `v ~ N(mean_fn(xi), var)` and `xi ~ N(0,1)`.
///
/// Discrete-output channels turn the y-integral into an exact sum over the
/// output alphabet; continuous channels (awgn, identity) fold the output
/// noise into the Gaussian input law, adding one Hermite axis. Total
/// variances below the Dirac guard collapse to exact mean substitution.
pub fn gauss_expect_output<M, F>(
    grid: &HermiteGrid,
    channel: &Activation,
    mean_fn: M,
    var: f64,
    f: F,
) -> Result<f64>
where
    M: Fn(f64) -> f64,
    F: Fn(f64, f64) -> f64,
{
    if var < 0.0 {
        return Err(Error::InvalidInput(format!(
            "negative inner variance {var} in output expectation"
        )));
    }
    match channel {
        Activation::Awgn { .. } | Activation::DeterministicIdentity => {
            let sigma2 = match channel {
                Activation::Awgn { variance } => *variance,
                _ => 0.0,
            };
            let total = var + sigma2;
            if total < DIRAC_VARIANCE {
                grid.expect(|xi| f(xi, mean_fn(xi)))
            } else {
                let s = total.sqrt();
                let mut acc = 0.0;
                for (&xi, &wx) in grid.nodes.iter().zip(&grid.weights) {
                    let mean = mean_fn(xi);
                    for (&t, &wt) in grid.nodes.iter().zip(&grid.weights) {
                        let v = f(xi, mean + s * t);
                        if !v.is_finite() {
                            return Err(Error::NonFiniteIntegrand { node: t });
                        }
                        acc += wx * wt * v;
                    }
                }
                Ok(acc)
            }
        }
        Activation::Sign { .. } | Activation::DiscreteMap { .. } => {
            let alphabet = channel.output_alphabet().expect("discrete kind");
            let mut acc = 0.0;
            for (&xi, &wx) in grid.nodes.iter().zip(&grid.weights) {
                let mean = mean_fn(xi);
                for (idx, &y) in alphabet.iter().enumerate() {
                    let mass = channel.cell_mass(idx, mean, var);
                    if mass <= 0.0 {
                        continue;
                    }
                    let v = f(xi, y);
                    if !v.is_finite() {
                        return Err(Error::NonFiniteIntegrand { node: xi });
                    }
                    acc += wx * mass * v;
                }
            }
            Ok(acc)
        }
    }
}

/// Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix of the
/// (probabilists') Hermite recurrence, weights the squared first components
/// of the normalized eigenvectors. The Jacobi matrix has zero diagonal and
/// off-diagonal sqrt(k); the zeroth moment of N(0,1) is one, so the weights
/// need no further scaling.
fn golub_welsch(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut diag = vec![0.0; n];
    // e[i] couples rows i and i+1; e[n-1] is workspace.
    let mut off = vec![0.0; n];
    for (k, v) in off.iter_mut().enumerate().take(n - 1) {
        *v = ((k + 1) as f64).sqrt();
    }
    // Row zero of the accumulated orthogonal transform.
    let mut z0 = vec![0.0; n];
    z0[0] = 1.0;
    tridiag_ql_implicit(&mut diag, &mut off, &mut z0)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diag[a].partial_cmp(&diag[b]).expect("finite eigenvalues"));
    let nodes: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let weights: Vec<f64> = order.iter().map(|&i| z0[i] * z0[i]).collect();
    Ok((nodes, weights))
}

/// Implicit-shift QL for a symmetric tridiagonal matrix, accumulating only
/// the first row of the eigenvector matrix (all that quadrature weights
/// need). EISPACK tql2 with the eigenvector update restricted to one row.
fn tridiag_ql_implicit(d: &mut [f64], e: &mut [f64], z0: &mut [f64]) -> Result<()> {
    let n = d.len();
    if n == 1 {
        return Ok(());
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(Error::InvalidInput(
                    "quadrature eigensolver failed to converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let f0 = z0[i + 1];
                z0[i + 1] = s * z0[i] + c * f0;
                z0[i] = c * z0[i] - s * f0;
            }
            if r == 0.0 && i > l {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}
