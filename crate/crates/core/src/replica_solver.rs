//! Damped fixed-point solver for the layered order-parameter equations.
//!
//! Per layer l = 1..L the solver tracks four scalars: the signal power
//! `t_x` entering the layer, the estimate power `d` of that signal, the
//! estimate power `q` of the mixed signal z = H x, and the precision-like
//! parameter `d_tilde` whose first-layer value fixes the equivalent scalar
//! channel noise eta = 1 / (2 d_tilde). At the fixed point
//! `avg_mse = t_x - d` on the first layer.
//!
//! One outer iteration runs a backward sweep (q, then d_tilde, from the
//! last layer down) followed by a forward sweep (d, from the first layer
//! up), Gauss-Seidel style. The d sweep is relaxed as
//! `new = (1-damping)*update + damping*old`; q and d_tilde are evaluated
//! consistently from the current d, which keeps the near-cancellation in
//! the precision update intact. Plain undamped iteration oscillates for
//! high-SNR sign layers, hence the 0.5 default.
//!
//! Layer updates dispatch on the activation kind: Gaussian layers (awgn /
//! identity) use exact joint-Gaussian conditional-moment algebra; discrete
//! layers (sign / discrete_map) use closed-form Gaussian cell integrals
//! under Hermite expectations over the auxiliary axes. The unconstrained
//! auxiliary integral over the tilt variable is folded onto Hermite axes by
//! recognizing the tilt kernel as a Gaussian mixture centered on the output
//! alphabet (discrete) or a single convolved Gaussian (continuous); kernel
//! variances below 1e-12 collapse to their Dirac limit.

use crate::channels::{Activation, NetworkSpec, Prior};
use crate::error::{Error, Result};
use crate::math::DIRAC_VARIANCE;
use crate::quadrature::HermiteGrid;
use crate::scalar_estimators::SisoChannel;

/// Lower clamp for `d_tilde`; keeps eta finite.
pub const D_TILDE_MIN: f64 = 1e-12;
/// Upper clamp for `d_tilde`; reached when a layer saturates (t_x - d -> 0).
pub const D_TILDE_MAX: f64 = 1e12;
/// `d` is kept strictly below `t_x` by this relative margin.
pub const D_MARGIN: f64 = 1e-9;

/// Atom masses below this are dropped from posterior mixtures.
const MASS_FLOOR: f64 = 1e-100;

/// Floor on the order of the tilt axis in discrete bonds. The posterior
/// ratios along that axis are logistic fronts with root-exponential Hermite
/// convergence; order 64 leaves ~1e-7 residuals that the precision update
/// amplifies by an order of magnitude, while 256 is converged to ~1e-10.
/// The smooth outer axis stays at the caller's order.
const TILT_AXIS_ORDER: usize = 256;

/// 16-point Gauss-Legendre rule on [-1, 1], used per panel by the graded
/// composite rule below.
const GL16_NODES: [f64; 8] = [
    0.095_012_509_837_637_44,
    0.281_603_550_779_258_9,
    0.458_016_777_657_227_4,
    0.617_876_244_402_643_7,
    0.755_404_408_355_003,
    0.865_631_202_387_831_7,
    0.944_575_023_073_232_6,
    0.989_400_934_991_649_9,
];
const GL16_WEIGHTS: [f64; 8] = [
    0.189_450_610_455_068_5,
    0.182_603_415_044_923_6,
    0.169_156_519_395_002_5,
    0.149_595_988_816_576_7,
    0.124_628_971_255_533_9,
    0.095_158_511_682_492_78,
    0.062_253_523_938_647_89,
    0.027_152_459_411_754_09,
];

/// Expectation of `f` under N(mean, sd^2), resolving boundary layers.
///
/// Discrete-channel information terms are smooth except for layers of
/// width `feature` around each threshold image in `centers`; near layer
/// saturation that width shrinks below any fixed Hermite grid's node
/// spacing and the plain rule dissolves into noise (which the precision
/// update then amplifies into limit cycles). Panels double in width moving
/// away from each center and the global Gaussian scale is subdivided at
/// `sd`, so the mesh tracks the features at every scale with a cost
/// logarithmic in `sd / feature`.
fn expect_gaussian_graded<F: Fn(f64) -> f64>(
    f: F,
    mean: f64,
    sd: f64,
    centers: &[f64],
    feature: f64,
) -> f64 {
    expect_gaussian_graded_pair(|mu| (f(mu), 0.0), mean, sd, centers, feature).0
}

fn expect_gaussian_graded_pair<F: Fn(f64) -> (f64, f64)>(
    f: F,
    mean: f64,
    sd: f64,
    centers: &[f64],
    feature: f64,
) -> (f64, f64) {
    let lo = mean - 8.5 * sd;
    let hi = mean + 8.5 * sd;
    let mut edges: Vec<f64> = Vec::with_capacity(64);
    for k in -8i32..=8 {
        edges.push(mean + sd * k as f64);
    }
    let w0 = feature.max(1e-14 * sd).min(sd);
    for &c in centers {
        if c <= lo - sd || c >= hi + sd {
            continue;
        }
        edges.push(c);
        let mut w = w0;
        while w <= 16.0 * sd {
            edges.push(c - w);
            edges.push(c + w);
            w *= 2.0;
        }
    }
    edges.retain(|&e| (lo..=hi).contains(&e));
    edges.push(lo);
    edges.push(hi);
    edges.sort_by(|a, b| a.partial_cmp(b).expect("finite edges"));
    let min_width = 1e-16 * sd.max(feature);
    let mut first = 0.0;
    let mut second = 0.0;
    let mut prev = edges[0];
    for &e in &edges[1..] {
        if e - prev <= min_width {
            continue;
        }
        let half = 0.5 * (e - prev);
        let mid = 0.5 * (e + prev);
        for (&x, &w) in GL16_NODES.iter().zip(&GL16_WEIGHTS) {
            for s in [-1.0, 1.0] {
                let mu = mid + s * half * x;
                let (a, b) = f(mu);
                let scale = w * half * crate::math::gaussian_pdf(mu, mean, sd * sd);
                first += scale * a;
                second += scale * b;
            }
        }
        prev = e;
    }
    (first, second)
}

fn tilt_axis(grid: &HermiteGrid) -> &HermiteGrid {
    use std::sync::OnceLock;
    static FINE: OnceLock<HermiteGrid> = OnceLock::new();
    if grid.order() >= TILT_AXIS_ORDER {
        grid
    } else {
        FINE.get_or_init(|| HermiteGrid::new(TILT_AXIS_ORDER).expect("static order is valid"))
    }
}

/// Per-layer order parameters, index 0 = first (input-side) layer.
///
/// A common two-layer shorthand names these `(c, d, q, d_tilde)` on the
/// first layer and `(e, f, h, f_tilde)` on the second; they map onto
/// `t_x[0], d[0], q[0], d_tilde[0]` and `t_x[1], d[1], q[1], d_tilde[1]`
/// respectively. One code path serves every depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaState {
    /// Power entering layer l.
    pub t_x: Vec<f64>,
    /// Estimate power of the layer input; 0 <= d <= t_x.
    pub d: Vec<f64>,
    /// Estimate power of the mixed signal z = H x of layer l.
    pub q: Vec<f64>,
    /// Precision parameter; eta of layer l is 1 / (2 d_tilde).
    pub d_tilde: Vec<f64>,
}

impl ReplicaState {
    pub fn depth(&self) -> usize {
        self.t_x.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.t_x.len();
        if self.d.len() != l || self.q.len() != l || self.d_tilde.len() != l {
            return Err(Error::InvalidInput("ragged replica state".into()));
        }
        for i in 0..l {
            if !(self.t_x[i].is_finite()
                && self.d[i].is_finite()
                && self.q[i].is_finite()
                && self.d_tilde[i].is_finite())
            {
                return Err(Error::InvalidInput(format!(
                    "non-finite order parameter at layer {}",
                    i + 1
                )));
            }
            if self.d[i] < 0.0 || self.d[i] > self.t_x[i] {
                return Err(Error::InvalidInput(format!(
                    "estimate power out of range at layer {}: d={} t_x={}",
                    i + 1,
                    self.d[i],
                    self.t_x[i]
                )));
            }
        }
        Ok(())
    }

    /// Largest relative distance between order parameters of two states.
    pub fn max_rel_distance(&self, other: &ReplicaState) -> f64 {
        let mut m = 0.0f64;
        for (a, b) in [
            (&self.t_x, &other.t_x),
            (&self.d, &other.d),
            (&self.q, &other.q),
            (&self.d_tilde, &other.d_tilde),
        ] {
            for (x, y) in a.iter().zip(b.iter()) {
                m = m.max(rel_change(*x, *y));
            }
        }
        m
    }
}

/// Initialization of the estimate powers `d`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitStyle {
    /// Uninformative start, d = 1e-3 * t_x.
    Cold,
    /// Caller-provided d per layer.
    Warm(Vec<f64>),
    /// A list of per-layer inits; empty means the built-in spread
    /// (uninformative, halfway, and near-perfect knowledge).
    MultiStart(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Relaxation weight on the old iterate, in [0, 1).
    pub damping: f64,
    /// Convergence threshold on the largest relative raw update.
    pub tol: f64,
    pub max_iter: usize,
    pub grid_order: usize,
    pub init_style: InitStyle,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            damping: 0.5,
            tol: 1e-9,
            max_iter: 2000,
            grid_order: crate::quadrature::DEFAULT_ORDER,
            init_style: InitStyle::Cold,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Config(format!(
                "damping must be in [0, 1), got {}",
                self.damping
            )));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Converged (or final) solver output.
#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub state: ReplicaState,
    /// Effective noise of the equivalent scalar channel, `1 / (2 d_tilde[0])`.
    pub eta: f64,
    /// `t_x[0] - d[0]`, the per-coordinate MSE of the exact estimator.
    pub avg_mse: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Set when a d_tilde update hit its clamp.
    pub d_tilde_saturated: bool,
    /// Distinct converged fixed points when multi-start is used, paired
    /// with their avg_mse. Coexisting solutions are reported, not ranked.
    pub all_solutions: Vec<(ReplicaState, f64)>,
}

fn rel_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / (old.abs() + 1e-12)
}

/// Powers t_x entering each layer; independent of the other order
/// parameters, so computed once per solve.
pub fn forward_power_sweep(net: &NetworkSpec, _grid: &HermiteGrid) -> Result<Vec<f64>> {
    let layers = net.layers();
    let mut t = Vec::with_capacity(layers.len());
    t.push(net.prior().second_moment());
    for i in 1..layers.len() {
        let v = t[i - 1] / layers[i - 1].alpha;
        let m2 = layers[i - 1].activation.output_second_moment(v);
        if !m2.is_finite() {
            return Err(Error::InvalidInput(format!(
                "activation at layer {} has undefined output power",
                i
            )));
        }
        t.push(m2);
    }
    Ok(t)
}

/// q update of the last layer: the averaged posterior-mean power of the
/// mixed signal given the observed output.
pub fn q_last_layer(net: &NetworkSpec, _grid: &HermiteGrid, state: &ReplicaState) -> Result<f64> {
    let i = net.depth() - 1;
    q_last_split(net, state)
        .map(|(field2, info)| field2 + info)
        .and_then(|q| {
            if q.is_finite() {
                Ok(q)
            } else {
                Err(Error::InvalidInput(format!(
                    "non-finite last-layer q at layer {}",
                    i + 1
                )))
            }
        })
}

/// Last-layer q split as `(field power d/alpha, information gain)`. The
/// gain is evaluated as a sum of nonnegative terms so the precision update
/// can consume it without the catastrophic `alpha q - d` cancellation near
/// saturation.
fn q_last_split(net: &NetworkSpec, state: &ReplicaState) -> Result<(f64, f64)> {
    let i = net.depth() - 1;
    let layer = &net.layers()[i];
    let (t, d) = (state.t_x[i], state.d[i]);
    if d >= t {
        return Err(Error::InvalidInput(format!(
            "degenerate last layer: d={d} >= t_x={t}"
        )));
    }
    let mu2 = d / layer.alpha;
    let mu_scale = mu2.max(0.0).sqrt();
    let v = (t - d) / layer.alpha;
    match layer.activation.additive_noise_variance() {
        Some(sigma2) => {
            // Observed output y = z + w: exact Gaussian conditional moments.
            if sigma2 < DIRAC_VARIANCE {
                Ok((mu2, v))
            } else {
                Ok((mu2, v * v / (v + sigma2)))
            }
        }
        None => Ok((mu2, discrete_info_term(&layer.activation, mu_scale, v))),
    }
}

/// E over mu ~ N(0, mu_scale^2) of the discrete-channel information term
/// `sum_a pi_a (m_a - mu)^2`: the gain in mixed-signal estimate power from
/// observing the channel output, on top of the prior-field power mu^2.
/// The decomposition is exact (`sum_a pi_a m_a = mu`) and avoids the
/// cancellation of squared posterior means against mu^2.
fn discrete_info_term(activation: &Activation, mu_scale: f64, v: f64) -> f64 {
    let (levels, thresholds, noise) = activation.quantizer().expect("discrete kind");
    let info = |mu: f64| {
        let mut acc = 0.0;
        for idx in 0..levels.len() {
            let mass = activation.cell_mass(idx, mu, v);
            if mass < MASS_FLOOR {
                continue;
            }
            let dev = activation.cell_first_moment(idx, mu, v) / mass - mu;
            acc += mass * dev * dev;
        }
        acc
    };
    if mu_scale < 1e-12 {
        return info(0.0);
    }
    let feature = (v + noise).sqrt();
    expect_gaussian_graded(info, 0.0, mu_scale, thresholds, feature)
}

/// Joint posterior-mean powers across one interior bond: the activation of
/// layer `i` (0-based) seen between the mixed signal z (Gaussian with power
/// split (t, d) at ratio alpha) and the downstream tilt of precision
/// `d_tilde_next` on its output x.
struct BondMoments {
    /// q of the bond's input layer, `field power + info gain`.
    q: f64,
    /// d of the next layer.
    d_next: f64,
    /// Information gain `q - d/alpha`, kept as a sum of nonnegative terms
    /// so precision updates avoid the cancellation near saturation.
    q_info: f64,
}

fn bond_moments(
    activation: &Activation,
    alpha: f64,
    t: f64,
    d: f64,
    d_tilde_next: f64,
    grid: &HermiteGrid,
) -> Result<BondMoments> {
    if d >= t {
        return Err(Error::InvalidInput(format!(
            "degenerate bond: d={d} >= t_x={t}"
        )));
    }
    if !(d_tilde_next.is_finite() && d_tilde_next > 0.0) {
        return Err(Error::InvalidInput(format!(
            "nonpositive d_tilde {d_tilde_next} on bond"
        )));
    }
    let mu2 = d / alpha;
    let mu_scale = mu2.max(0.0).sqrt();
    let v_z = (t - d) / alpha;
    let v_x = 0.5 / d_tilde_next;

    if let Some(sigma2) = activation.additive_noise_variance() {
        // All-Gaussian bond: conditional means are linear, so the averaged
        // squares reduce to variance ratios.
        let v_out = v_z + sigma2;
        let (info, d_next) = if v_x < DIRAC_VARIANCE {
            // Downstream knows x exactly.
            let info = if v_out < DIRAC_VARIANCE {
                v_z
            } else {
                v_z * v_z / v_out
            };
            (info, mu2 + v_out)
        } else {
            let v_tot = v_out + v_x;
            (v_z * v_z / v_tot, mu2 + v_out * v_out / v_tot)
        };
        return Ok(BondMoments {
            q: mu2 + info,
            d_next,
            q_info: info,
        });
    }

    let alphabet = activation.output_alphabet().expect("discrete");
    let n_atoms = alphabet.len();
    let (_, thresholds, noise) = activation.quantizer().expect("discrete kind");
    let feature = (v_z + noise).sqrt();

    if v_x < DIRAC_VARIANCE {
        // Perfect downstream knowledge of the (distinct) output level: the
        // posterior collapses onto one cell; q reduces to the last-layer
        // information form and d_next to the output power.
        let info = discrete_info_term(activation, mu_scale, v_z);
        let d_of_mu = |mu: f64| -> f64 {
            (0..n_atoms)
                .map(|idx| alphabet[idx].powi(2) * activation.cell_mass(idx, mu, v_z))
                .sum()
        };
        let d_next = if mu_scale < 1e-12 {
            d_of_mu(0.0)
        } else {
            expect_gaussian_graded(d_of_mu, 0.0, mu_scale, thresholds, feature)
        };
        return Ok(BondMoments {
            q: mu2 + info,
            d_next,
            q_info: info,
        });
    }

    // General discrete bond. Per outer point mu: cell masses pi_b and cell
    // means m_b of z; the tilt observation is zeta = x_a + sqrt(v_x) * t,
    // mixed over cells a. Posterior weights over cells given zeta carry the
    // Gaussian tilt factor; log-shifted for stability. The outer average
    // runs on the graded mesh because the cell statistics develop boundary
    // layers of width `feature` as the layer saturates. The q moment is
    // accumulated as the centered gain (g_z - mu)^2; its mean over the
    // tilt mixture is mu exactly, so q = d/alpha + gain.
    let t_grid = tilt_axis(grid);
    let sqrt_vx = v_x.sqrt();
    let both = |mu: f64| -> (f64, f64) {
        let mut pi = vec![0.0; n_atoms];
        let mut cell_mean = vec![0.0; n_atoms];
        let mut log_pi = vec![0.0; n_atoms];
        for idx in 0..n_atoms {
            pi[idx] = activation.cell_mass(idx, mu, v_z);
            cell_mean[idx] = if pi[idx] < MASS_FLOOR {
                0.0
            } else {
                activation.cell_first_moment(idx, mu, v_z) / pi[idx]
            };
            log_pi[idx] = pi[idx].ln();
        }
        let mut gain_mu = 0.0;
        let mut d_mu = 0.0;
        for a in 0..n_atoms {
            if pi[a] < MASS_FLOOR {
                continue;
            }
            let mut gain_branch = 0.0;
            let mut d_branch = 0.0;
            for (&tnode, &w_t) in t_grid.nodes().iter().zip(t_grid.weights()) {
                let zeta = alphabet[a] + sqrt_vx * tnode;
                let mut shift = f64::NEG_INFINITY;
                for b in 0..n_atoms {
                    if pi[b] < MASS_FLOOR {
                        continue;
                    }
                    let dz = zeta - alphabet[b];
                    let l = log_pi[b] - dz * dz / (2.0 * v_x);
                    if l > shift {
                        shift = l;
                    }
                }
                let mut den = 0.0;
                let mut num_x = 0.0;
                let mut num_zc = 0.0;
                for b in 0..n_atoms {
                    if pi[b] < MASS_FLOOR {
                        continue;
                    }
                    let dz = zeta - alphabet[b];
                    let e = (log_pi[b] - dz * dz / (2.0 * v_x) - shift).exp();
                    den += e;
                    num_x += e * alphabet[b];
                    num_zc += e * (cell_mean[b] - mu);
                }
                let gx = num_x / den;
                let hz = num_zc / den;
                gain_branch += w_t * hz * hz;
                d_branch += w_t * gx * gx;
            }
            gain_mu += pi[a] * gain_branch;
            d_mu += pi[a] * d_branch;
        }
        (gain_mu, d_mu)
    };

    let (gain, d_acc) = if mu_scale < 1e-12 {
        both(0.0)
    } else {
        expect_gaussian_graded_pair(both, 0.0, mu_scale, thresholds, feature)
    };
    if !(gain.is_finite() && d_acc.is_finite()) {
        return Err(Error::InvalidInput(
            "non-finite bond moment; activation parameters too extreme".into(),
        ));
    }
    Ok(BondMoments {
        q: mu2 + gain,
        d_next: d_acc,
        q_info: gain,
    })
}

/// q update for an interior layer `layer` (1-based, < L).
pub fn q_middle_layer(
    net: &NetworkSpec,
    grid: &HermiteGrid,
    state: &ReplicaState,
    layer: usize,
) -> Result<f64> {
    if layer == 0 || layer >= net.depth() {
        return Err(Error::InvalidInput(format!(
            "q_middle_layer needs 1 <= layer < L, got {layer} of {}",
            net.depth()
        )));
    }
    let i = layer - 1;
    bond_moments(
        &net.layers()[i].activation,
        net.layers()[i].alpha,
        state.t_x[i],
        state.d[i],
        state.d_tilde[i + 1],
        grid,
    )
    .map(|b| b.q)
}

/// d update for an interior layer `layer` (1-based, > 1).
pub fn d_middle_layer(
    net: &NetworkSpec,
    grid: &HermiteGrid,
    state: &ReplicaState,
    layer: usize,
) -> Result<f64> {
    if layer <= 1 || layer > net.depth() {
        return Err(Error::InvalidInput(format!(
            "d_middle_layer needs 2 <= layer <= L, got {layer} of {}",
            net.depth()
        )));
    }
    let i = layer - 2;
    bond_moments(
        &net.layers()[i].activation,
        net.layers()[i].alpha,
        state.t_x[i],
        state.d[i],
        state.d_tilde[i + 1],
        grid,
    )
    .map(|b| b.d_next)
}

/// Precision update `alpha (alpha q - d) / (2 (t_x - d)^2)`, clamped to
/// [1e-12, 1e12]. The boolean reports clamp saturation.
pub fn d_tilde_update(t_x: f64, d: f64, q: f64, alpha: f64) -> (f64, bool) {
    d_tilde_from_info(t_x, d, q - d / alpha, alpha)
}

/// Same update fed with the information gain `q - d/alpha` directly. The
/// solver uses this form: the gain is produced by the layer updates as a
/// sum of nonnegative terms, so the precision stays accurate where the
/// plain subtraction would cancel catastrophically.
fn d_tilde_from_info(t_x: f64, d: f64, info: f64, alpha: f64) -> (f64, bool) {
    let gap = t_x - d;
    if gap < 1e-12 {
        return (D_TILDE_MAX, true);
    }
    let raw = alpha * alpha * info / (2.0 * gap * gap);
    if raw >= D_TILDE_MAX {
        (D_TILDE_MAX, true)
    } else if raw <= D_TILDE_MIN {
        (D_TILDE_MIN, false)
    } else {
        (raw, false)
    }
}

/// d update of the first layer: the estimate power of the scalar channel at
/// eta = 1 / (2 d_tilde).
pub fn d_first_layer(net: &NetworkSpec, grid: &HermiteGrid, state: &ReplicaState) -> Result<f64> {
    let ch = SisoChannel::from_d_tilde(net.prior().clone(), state.d_tilde[0])?;
    ch.estimate_power(grid)
}

fn clamp_d(d: f64, t: f64) -> f64 {
    d.clamp(0.0, t * (1.0 - D_MARGIN))
}

struct SweepOutcome {
    state: ReplicaState,
    iterations: usize,
    residual: f64,
    converged: bool,
    saturated: bool,
}

fn solve_from_init(
    net: &NetworkSpec,
    grid: &HermiteGrid,
    t_x: &[f64],
    d_init: &[f64],
    opts: &SolverOptions,
) -> Result<SweepOutcome> {
    let l = net.depth();
    let layers = net.layers();
    let mut state = ReplicaState {
        t_x: t_x.to_vec(),
        d: d_init
            .iter()
            .zip(t_x)
            .map(|(&d, &t)| clamp_d(d, t))
            .collect(),
        q: vec![0.0; l],
        d_tilde: vec![D_TILDE_MIN; l],
    };
    let mut saturated = false;

    // Seed q and d_tilde with one raw backward sweep so damping and
    // residuals have a consistent starting point.
    for i in (0..l).rev() {
        let (q, info) = if i == l - 1 {
            let (field2, info) = q_last_split(net, &state)?;
            (field2 + info, info)
        } else {
            let b = bond_moments(
                &layers[i].activation,
                layers[i].alpha,
                state.t_x[i],
                state.d[i],
                state.d_tilde[i + 1],
                grid,
            )?;
            (b.q, b.q_info)
        };
        state.q[i] = q;
        let (dt, sat) = d_tilde_from_info(state.t_x[i], state.d[i], info, layers[i].alpha);
        state.d_tilde[i] = dt;
        saturated |= sat;
    }

    // Damping applies to the d family only. q and d_tilde are recomputed
    // consistently from the current d each sweep: the precision update
    // amplifies any q-vs-d mismatch by alpha^2 / (2 (t_x - d)^2), so
    // relaxing q independently of d destabilizes exactly the high-SNR
    // regimes damping is meant to protect.
    let damp = opts.damping;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut max_rel = 0.0f64;

        for i in (0..l).rev() {
            let (q_raw, info) = if i == l - 1 {
                let (field2, info) = q_last_split(net, &state)?;
                (field2 + info, info)
            } else {
                let b = bond_moments(
                    &layers[i].activation,
                    layers[i].alpha,
                    state.t_x[i],
                    state.d[i],
                    state.d_tilde[i + 1],
                    grid,
                )?;
                (b.q, b.q_info)
            };
            max_rel = max_rel.max(rel_change(q_raw, state.q[i]));
            state.q[i] = q_raw;

            let (dt_raw, sat) = d_tilde_from_info(state.t_x[i], state.d[i], info, layers[i].alpha);
            saturated |= sat;
            max_rel = max_rel.max(rel_change(dt_raw, state.d_tilde[i]));
            state.d_tilde[i] = dt_raw;
        }

        for i in 0..l {
            let d_raw = if i == 0 {
                d_first_layer(net, grid, &state)?
            } else {
                bond_moments(
                    &layers[i - 1].activation,
                    layers[i - 1].alpha,
                    state.t_x[i - 1],
                    state.d[i - 1],
                    state.d_tilde[i],
                    grid,
                )?
                .d_next
            };
            let d_raw = clamp_d(d_raw, state.t_x[i]);
            max_rel = max_rel.max(rel_change(d_raw, state.d[i]));
            state.d[i] = clamp_d(damp * state.d[i] + (1.0 - damp) * d_raw, state.t_x[i]);
        }

        residual = max_rel;
        if residual < opts.tol {
            converged = true;
            break;
        }
    }
    state.validate()?;
    Ok(SweepOutcome {
        state,
        iterations,
        residual,
        converged,
        saturated,
    })
}

fn result_from_outcome(outcome: &SweepOutcome) -> (f64, f64) {
    let eta = 0.5 / outcome.state.d_tilde[0];
    let avg_mse = outcome.state.t_x[0] - outcome.state.d[0];
    (eta, avg_mse)
}

/// Runs the damped sweep iteration to self-consistency.
pub fn solve(net: &NetworkSpec, opts: &SolverOptions) -> Result<FixedPointResult> {
    opts.validate()?;
    let grid = HermiteGrid::new(opts.grid_order)?;
    let t_x = forward_power_sweep(net, &grid)?;
    let l = net.depth();

    let inits: Vec<Vec<f64>> = match &opts.init_style {
        InitStyle::Cold => vec![t_x.iter().map(|t| 1e-3 * t).collect()],
        InitStyle::Warm(d) => {
            if d.len() != l {
                return Err(Error::InvalidInput(format!(
                    "warm start has {} layers, network has {l}",
                    d.len()
                )));
            }
            vec![d.clone()]
        }
        InitStyle::MultiStart(list) => {
            if list.is_empty() {
                [1e-3, 0.5, 1.0 - 1e-3]
                    .iter()
                    .map(|f| t_x.iter().map(|t| f * t).collect())
                    .collect()
            } else {
                for d in list {
                    if d.len() != l {
                        return Err(Error::InvalidInput(format!(
                            "multi-start init has {} layers, network has {l}",
                            d.len()
                        )));
                    }
                }
                list.clone()
            }
        }
    };

    let mut outcomes = Vec::with_capacity(inits.len());
    for init in &inits {
        outcomes.push(solve_from_init(net, &grid, &t_x, init, opts)?);
    }

    let mut all_solutions: Vec<(ReplicaState, f64)> = Vec::new();
    if inits.len() > 1 {
        for o in &outcomes {
            if !o.converged {
                continue;
            }
            let duplicate = all_solutions
                .iter()
                .any(|(s, _)| s.max_rel_distance(&o.state) <= 10.0 * opts.tol);
            if !duplicate {
                let (_, mse) = result_from_outcome(o);
                all_solutions.push((o.state.clone(), mse));
            }
        }
    }

    let primary = &outcomes[0];
    let (eta, avg_mse) = result_from_outcome(primary);
    Ok(FixedPointResult {
        state: primary.state.clone(),
        eta,
        avg_mse,
        iterations: primary.iterations,
        residual: primary.residual,
        converged: primary.converged,
        d_tilde_saturated: primary.saturated,
        all_solutions,
    })
}

/// Largest relative change produced by re-evaluating every update equation
/// at `state`; near zero at a genuine fixed point.
pub fn fixed_point_residual(
    net: &NetworkSpec,
    grid: &HermiteGrid,
    state: &ReplicaState,
) -> Result<f64> {
    let l = net.depth();
    let layers = net.layers();
    let mut work = state.clone();
    let mut max_rel = 0.0f64;
    for i in (0..l).rev() {
        let (q_raw, info) = if i == l - 1 {
            let (field2, info) = q_last_split(net, &work)?;
            (field2 + info, info)
        } else {
            let b = bond_moments(
                &layers[i].activation,
                layers[i].alpha,
                work.t_x[i],
                work.d[i],
                work.d_tilde[i + 1],
                grid,
            )?;
            (b.q, b.q_info)
        };
        max_rel = max_rel.max(rel_change(q_raw, state.q[i]));
        work.q[i] = q_raw;
        let (dt_raw, _) = d_tilde_from_info(work.t_x[i], work.d[i], info, layers[i].alpha);
        max_rel = max_rel.max(rel_change(dt_raw, state.d_tilde[i]));
        work.d_tilde[i] = dt_raw.clamp(D_TILDE_MIN, D_TILDE_MAX);
    }
    for i in 0..l {
        let d_raw = if i == 0 {
            d_first_layer(net, grid, &work)?
        } else {
            bond_moments(
                &layers[i - 1].activation,
                layers[i - 1].alpha,
                work.t_x[i - 1],
                work.d[i - 1],
                work.d_tilde[i],
                grid,
            )?
            .d_next
        };
        max_rel = max_rel.max(rel_change(clamp_d(d_raw, work.t_x[i]), state.d[i]));
    }
    Ok(max_rel)
}

/// Scalar fixed point for the single-layer linear model: iterates
/// `eta = noise_variance + mmse(eta) / alpha` directly. Cross-validates the
/// general solver at L = 1.
pub fn solve_slm(
    prior: &Prior,
    noise_variance: f64,
    alpha: f64,
    opts: &SolverOptions,
) -> Result<FixedPointResult> {
    opts.validate()?;
    if !(noise_variance.is_finite() && noise_variance >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise variance must be >= 0, got {noise_variance}"
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidInput(format!(
            "aspect ratio must be positive, got {alpha}"
        )));
    }
    let grid = HermiteGrid::new(opts.grid_order)?;
    let m2 = prior.second_moment();
    let floor = crate::scalar_estimators::MIN_ETA;
    let mut eta = (noise_variance + m2 / alpha).max(floor);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut mmse = m2;
    while iterations < opts.max_iter {
        iterations += 1;
        mmse = SisoChannel::new(prior.clone(), eta)?.mmse(&grid)?.max(0.0);
        let eta_raw = (noise_variance + mmse / alpha).max(floor);
        residual = rel_change(eta_raw, eta);
        eta = (opts.damping * eta + (1.0 - opts.damping) * eta_raw).max(floor);
        if residual < opts.tol {
            converged = true;
            break;
        }
    }
    let d = (m2 - mmse).max(0.0);
    let d_tilde = (0.5 / eta).clamp(D_TILDE_MIN, D_TILDE_MAX);
    let gap = m2 - d;
    let q = if gap < 1e-12 {
        m2 / alpha
    } else {
        (d + 2.0 * d_tilde * gap * gap / alpha) / alpha
    };
    let state = ReplicaState {
        t_x: vec![m2],
        d: vec![clamp_d(d, m2)],
        q: vec![q],
        d_tilde: vec![d_tilde],
    };
    Ok(FixedPointResult {
        eta,
        avg_mse: m2 - state.d[0],
        iterations,
        residual,
        converged,
        d_tilde_saturated: d_tilde >= D_TILDE_MAX,
        all_solutions: Vec::new(),
        state,
    })
}
