//! Finite-size sampling and exact-MMSE oracles.
//!
//! The simulator draws desk-scale instances of the network (Gaussian mixing
//! matrices with entry variance 1/rows), generates observation trials, and
//! computes the exact posterior-mean estimate by brute force so the
//! asymptotic predictions can be checked statistically.
//!
//! Oracle feasibility: the brute-force path enumerates the discrete prior
//! configurations exactly and handles every intermediate layer either by
//! exact summation over its finite output alphabet (with early pruning of
//! zero-mass branches) or, once an awgn stage is reached, by folding all
//! remaining linear stages into one Gaussian tail density. Each enumerated
//! stage is capped at 2^20 configurations; anything else is reported as
//! infeasible rather than approximated. A discrete activation downstream of
//! an awgn stage has no exact finite-sum form and is rejected.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channels::{Activation, NetworkSpec, Prior};
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Mat};
use crate::math::{gaussian_log_pdf, KahanSum, LogSum, DIRAC_VARIANCE};
use crate::quadrature::HermiteGrid;
use crate::replica_solver::{solve, FixedPointResult, SolverOptions};
use crate::scalar_estimators::SisoChannel;

/// Enumeration budget per discrete stage.
pub const CONFIG_BUDGET: u128 = 1 << 20;

/// Tolerance for matching a fully deterministic pipeline against y.
const DELTA_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    BruteForce,
    Lmmse,
}

/// A sampled instance: the network spec, per-stage dimensions
/// N_1..N_{L+1}, and the mixing matrices (layer l maps N_l -> N_{l+1}).
#[derive(Debug, Clone)]
pub struct FiniteNetwork {
    spec: NetworkSpec,
    dims: Vec<usize>,
    matrices: Vec<Mat>,
}

/// Draws the mixing matrices i.i.d. N(0, 1/rows).
pub fn sample_network<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    dims: &[usize],
    rng: &mut R,
) -> Result<FiniteNetwork> {
    check_dims(spec, dims)?;
    let mut matrices = Vec::with_capacity(spec.depth());
    for l in 0..spec.depth() {
        let (rows, cols) = (dims[l + 1], dims[l]);
        let scale = 1.0 / (rows as f64).sqrt();
        let mut m = Mat::zeros(rows, cols);
        for v in m.data.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v = scale * g;
        }
        matrices.push(m);
    }
    Ok(FiniteNetwork {
        spec: spec.clone(),
        dims: dims.to_vec(),
        matrices,
    })
}

fn check_dims(spec: &NetworkSpec, dims: &[usize]) -> Result<()> {
    if dims.len() != spec.depth() + 1 {
        return Err(Error::Config(format!(
            "expected {} dimensions for {} layers, got {}",
            spec.depth() + 1,
            spec.depth(),
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config("zero dimension in network sizes".into()));
    }
    for (l, layer) in spec.layers().iter().enumerate() {
        let want = layer.alpha * dims[l] as f64;
        if (want - dims[l + 1] as f64).abs() > 0.5 + 1e-9 {
            return Err(Error::Config(format!(
                "dimension {} -> {} does not match aspect ratio {} at layer {}",
                dims[l],
                dims[l + 1],
                layer.alpha,
                l + 1
            )));
        }
    }
    Ok(())
}

impl FiniteNetwork {
    /// Explicit-matrix constructor (deterministic tests, reproduction of a
    /// specific draw). Matrices are row-major, layer l shaped
    /// `dims[l+1] x dims[l]`.
    pub fn with_matrices(
        spec: &NetworkSpec,
        dims: &[usize],
        matrices: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dims(spec, dims)?;
        if matrices.len() != spec.depth() {
            return Err(Error::Config(format!(
                "expected {} matrices, got {}",
                spec.depth(),
                matrices.len()
            )));
        }
        let mut mats = Vec::with_capacity(matrices.len());
        for (l, data) in matrices.into_iter().enumerate() {
            let (rows, cols) = (dims[l + 1], dims[l]);
            if data.len() != rows * cols {
                return Err(Error::Config(format!(
                    "matrix {} has {} entries, expected {}x{}",
                    l + 1,
                    data.len(),
                    rows,
                    cols
                )));
            }
            mats.push(Mat { rows, cols, data });
        }
        Ok(FiniteNetwork {
            spec: spec.clone(),
            dims: dims.to_vec(),
            matrices: mats,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn matrix_entries(&self, layer: usize) -> &[f64] {
        &self.matrices[layer].data
    }

    /// Draws one (input, observation) pair.
    pub fn sample_trial<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let x0: Vec<f64> = (0..self.dims[0])
            .map(|_| self.spec.prior().sample(rng))
            .collect();
        let mut x = x0.clone();
        for (l, layer) in self.spec.layers().iter().enumerate() {
            let z = self.matrices[l].matvec(&x);
            x = z
                .iter()
                .map(|&za| layer.activation.sample(za, rng))
                .collect();
        }
        (x0, x)
    }
}

/// One Monte Carlo record.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub x0: Vec<f64>,
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
}

/// Reproducible batch of trials; identical seed and settings give an
/// identical batch regardless of thread count.
#[derive(Debug, Clone)]
pub struct TrialBatch {
    pub records: Vec<TrialRecord>,
    pub seed: u64,
    pub oracle_kind: OracleKind,
}

#[derive(Debug, Clone)]
pub struct TrialSettings {
    pub n_trials: usize,
    pub seed: u64,
    /// Redraw the mixing matrices for every trial (averages over the matrix
    /// ensemble); otherwise one draw is shared by the whole batch.
    pub redraw_matrices: bool,
    pub oracle: OracleKind,
    pub threads: usize,
}

impl Default for TrialSettings {
    fn default() -> Self {
        TrialSettings {
            n_trials: 100,
            seed: 0,
            redraw_matrices: true,
            oracle: OracleKind::BruteForce,
            threads: 1,
        }
    }
}

/// RNG stream for trial `t`; stream 0 is reserved for the shared matrix
/// draw so that toggling `redraw_matrices` does not perturb trial streams.
fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

fn run_one_trial(
    spec: &NetworkSpec,
    dims: &[usize],
    shared: Option<&FiniteNetwork>,
    settings: &TrialSettings,
    trial: usize,
) -> Result<TrialRecord> {
    let mut rng = trial_rng(settings.seed, trial);
    let owned;
    let fnet = match shared {
        Some(f) => f,
        None => {
            owned = sample_network(spec, dims, &mut rng)?;
            &owned
        }
    };
    let (x0, y) = fnet.sample_trial(&mut rng);
    let xhat = match settings.oracle {
        OracleKind::BruteForce => exact_mmse_brute_force(fnet, &y)?,
        OracleKind::Lmmse => lmmse_gaussian_oracle(fnet, &y)?,
    };
    Ok(TrialRecord { x0, y, xhat })
}

/// Runs the batch. Trials are independent; with the `parallel` feature and
/// `threads > 1` they fan out over a rayon pool, collected by index so the
/// batch bytes never depend on scheduling.
pub fn run_trials(
    spec: &NetworkSpec,
    dims: &[usize],
    settings: &TrialSettings,
) -> Result<TrialBatch> {
    check_dims(spec, dims)?;
    // Feasibility surfaces before any work is done.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(0);
        let probe = sample_network(spec, dims, &mut rng)?;
        match settings.oracle {
            OracleKind::BruteForce => {
                OraclePlan::analyze(&probe)?;
            }
            OracleKind::Lmmse => {
                lmmse_plan_check(&probe)?;
            }
        }
    }
    let shared = if settings.redraw_matrices {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(0);
        Some(sample_network(spec, dims, &mut rng)?)
    };

    let records = run_indexed(settings.threads, settings.n_trials, |t| {
        run_one_trial(spec, dims, shared.as_ref(), settings, t)
    })?;
    Ok(TrialBatch {
        records,
        seed: settings.seed,
        oracle_kind: settings.oracle,
    })
}

#[cfg(feature = "parallel")]
fn run_indexed<T, F>(threads: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    if threads <= 1 {
        return (0..n).map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("could not build thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_indexed<T, F>(_threads: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    (0..n).map(&f).collect()
}

// ---------------------------------------------------------------------------
// Brute-force exact MMSE
// ---------------------------------------------------------------------------

enum StageKind {
    /// Finite output alphabet, exactly enumerable.
    Discrete,
    /// Identity or zero-variance awgn: deterministic linear pass-through.
    Deterministic,
    /// awgn with positive variance.
    Noisy(f64),
}

enum Tail {
    /// y equals the deterministic image; likelihood is a delta test.
    Deterministic,
    /// Only the last stage is noisy: iid per-coordinate Gaussian.
    Diagonal(f64),
    /// Noise enters before the last linear stage: full Gaussian with the
    /// composed covariance. `map` sends the mixed vector at the tail start
    /// to the observation mean (identity when the tail is only the last
    /// stage).
    Full { map: Option<Mat>, chol: Cholesky },
}

struct OraclePlan {
    stages: Vec<StageKind>,
    /// First stage handled by the Gaussian tail, if any.
    tail_start: Option<usize>,
    tail: Tail,
}

impl OraclePlan {
    fn analyze(fnet: &FiniteNetwork) -> Result<Self> {
        let spec = &fnet.spec;
        let layers = spec.layers();
        let last = layers.len() - 1;

        let atoms = spec.prior().atoms().ok_or_else(|| {
            Error::OracleUnsupported("brute-force oracle requires a discrete prior".into())
        })?;
        budget_check("prior", atoms.len(), fnet.dims[0])?;

        let mut stages = Vec::with_capacity(layers.len());
        for (l, layer) in layers.iter().enumerate() {
            let kind = match &layer.activation {
                Activation::Awgn { variance } if *variance >= DIRAC_VARIANCE => {
                    StageKind::Noisy(*variance)
                }
                Activation::Awgn { .. } | Activation::DeterministicIdentity => {
                    StageKind::Deterministic
                }
                a => {
                    let alphabet = a.output_alphabet().expect("discrete kind");
                    let deterministic = matches!(
                        a.quantizer(),
                        Some((_, _, noise)) if noise < DIRAC_VARIANCE
                    );
                    // A noiseless quantizer reaches exactly one output
                    // configuration per input; the pruned enumeration visits
                    // only that one, so no budget applies.
                    if l < last && !deterministic {
                        budget_check(
                            &format!("layer {} output", l + 1),
                            alphabet.len(),
                            fnet.dims[l + 1],
                        )?;
                    }
                    StageKind::Discrete
                }
            };
            stages.push(kind);
        }

        // The Gaussian tail starts at the first noisy stage; everything after
        // it must stay linear-Gaussian for the composed density to be exact.
        let tail_start = stages.iter().position(|s| matches!(s, StageKind::Noisy(_)));
        if let Some(j) = tail_start {
            if stages[j + 1..]
                .iter()
                .any(|s| matches!(s, StageKind::Discrete))
            {
                return Err(Error::OracleUnsupported(
                    "a discrete activation downstream of Gaussian noise has no exact finite-sum likelihood"
                        .into(),
                ));
            }
        }

        let tail = match tail_start {
            None => Tail::Deterministic,
            Some(j) if j == last => match &stages[last] {
                StageKind::Noisy(v) => Tail::Diagonal(*v),
                _ => unreachable!(),
            },
            Some(j) => {
                let n_out = fnet.dims[layers.len()];
                // B_k = H_{L-1} ... H_{k+1}; built backwards so each stage
                // costs one multiply.
                let mut cov = Mat::zeros(n_out, n_out);
                let mut b = Mat::identity(n_out);
                for k in (j..layers.len()).rev() {
                    if let StageKind::Noisy(v) = stages[k] {
                        b.add_scaled_gram_to(v, &mut cov);
                    }
                    if k > j {
                        b = b.matmul(&fnet.matrices[k]);
                    }
                }
                let chol = Cholesky::new(&cov).map_err(|_| {
                    Error::OracleUnsupported(
                        "composed Gaussian tail covariance is singular; add output noise or change dimensions"
                            .into(),
                    )
                })?;
                // After the loop, b = H_{L-1} ... H_{j+1}: the tail mean map.
                Tail::Full { map: Some(b), chol }
            }
        };
        Ok(OraclePlan {
            stages,
            tail_start,
            tail,
        })
    }

    /// log P(y | mixed vector z entering stage `stage`).
    fn log_likelihood(&self, fnet: &FiniteNetwork, stage: usize, z: &[f64], y: &[f64]) -> f64 {
        let layers = fnet.spec.layers();
        let last = layers.len() - 1;
        if Some(stage) == self.tail_start {
            return match &self.tail {
                Tail::Diagonal(v) => y
                    .iter()
                    .zip(z)
                    .map(|(ya, za)| gaussian_log_pdf(*ya, *za, *v))
                    .sum(),
                Tail::Full { map, chol } => {
                    let mean = match map {
                        Some(m) => m.matvec(z),
                        None => z.to_vec(),
                    };
                    chol.gaussian_log_density(y, &mean)
                }
                Tail::Deterministic => unreachable!(),
            };
        }
        match &self.stages[stage] {
            StageKind::Noisy(_) => unreachable!("noisy stages are absorbed by the tail"),
            StageKind::Deterministic => {
                if stage == last {
                    let ok = y.iter().zip(z).all(|(ya, za)| (ya - za).abs() < DELTA_TOL);
                    if ok {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    let z_next = fnet.matrices[stage + 1].matvec(z);
                    self.log_likelihood(fnet, stage + 1, &z_next, y)
                }
            }
            StageKind::Discrete => {
                let act = &layers[stage].activation;
                if stage == last {
                    let mut acc = 0.0;
                    for (ya, za) in y.iter().zip(z) {
                        let mass = match act.conditional_density(*ya, *za) {
                            Ok(m) => m,
                            Err(_) => return f64::NEG_INFINITY,
                        };
                        if mass <= 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        acc += mass.ln();
                    }
                    acc
                } else {
                    // Exact sum over the stage's output configurations,
                    // pruning zero-mass levels per coordinate and carrying
                    // the next mixed vector incrementally.
                    let alphabet = act.output_alphabet().expect("discrete kind");
                    let next = &fnet.matrices[stage + 1];
                    let per_coord: Vec<Vec<(usize, f64)>> = z
                        .iter()
                        .map(|&za| {
                            alphabet
                                .iter()
                                .enumerate()
                                .filter_map(|(idx, &level)| {
                                    let mass = act.conditional_density(level, za).ok()?;
                                    (mass > 0.0).then(|| (idx, mass.ln()))
                                })
                                .collect()
                        })
                        .collect();
                    let mut acc = LogSum::new();
                    let mut z_next = vec![0.0; next.rows];
                    self.sum_stage_configs(
                        fnet,
                        stage,
                        &alphabet,
                        &per_coord,
                        0,
                        0.0,
                        &mut z_next,
                        y,
                        &mut acc,
                    );
                    acc.value()
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn sum_stage_configs(
        &self,
        fnet: &FiniteNetwork,
        stage: usize,
        alphabet: &[f64],
        per_coord: &[Vec<(usize, f64)>],
        coord: usize,
        log_mass: f64,
        z_next: &mut [f64],
        y: &[f64],
        acc: &mut LogSum,
    ) {
        if coord == per_coord.len() {
            let ll = self.log_likelihood(fnet, stage + 1, z_next, y);
            acc.add(log_mass + ll);
            return;
        }
        let next = &fnet.matrices[stage + 1];
        for &(idx, lm) in &per_coord[coord] {
            let level = alphabet[idx];
            for (r, z) in z_next.iter_mut().enumerate() {
                *z += level * next.at(r, coord);
            }
            self.sum_stage_configs(
                fnet,
                stage,
                alphabet,
                per_coord,
                coord + 1,
                log_mass + lm,
                z_next,
                y,
                acc,
            );
            for (r, z) in z_next.iter_mut().enumerate() {
                *z -= level * next.at(r, coord);
            }
        }
    }
}

fn budget_check(what: &str, alphabet: usize, dim: usize) -> Result<()> {
    let bits = dim as f64 * (alphabet as f64).log2();
    if bits > 20.0 + 1e-9 {
        let configs = if bits > 126.0 {
            u128::MAX
        } else {
            (alphabet as u128).saturating_pow(dim as u32)
        };
        return Err(Error::OracleInfeasible {
            detail: format!("{what}: {alphabet}^{dim} configurations"),
            configs,
            budget: CONFIG_BUDGET,
        });
    }
    Ok(())
}

/// Exact posterior mean of every input coordinate by exhaustive summation
/// over the discrete prior configurations.
pub fn exact_mmse_brute_force(fnet: &FiniteNetwork, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != *fnet.dims.last().unwrap() {
        return Err(Error::InvalidInput(format!(
            "observation length {} does not match output dimension {}",
            y.len(),
            fnet.dims.last().unwrap()
        )));
    }
    let plan = OraclePlan::analyze(fnet)?;
    let atoms = fnet.spec.prior().atoms().expect("checked in analyze");
    let k = fnet.dims[0];

    // Enumerate prior configurations with an odometer; store log posterior
    // weights, then normalize under a max shift.
    let n_configs = (atoms.len() as u128).pow(k as u32) as usize;
    let mut log_w = Vec::with_capacity(n_configs);
    let mut x0 = vec![atoms[0].0; k];
    let mut idx = vec![0usize; k];
    let mut log_prior: f64 = (0..k).map(|_| atoms[0].1.ln()).sum();
    loop {
        let z1 = fnet.matrices[0].matvec(&x0);
        let ll = if log_prior == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            plan.log_likelihood(fnet, 0, &z1, y)
        };
        log_w.push(log_prior + ll);
        // Advance the odometer.
        let mut pos = 0;
        loop {
            if pos == k {
                break;
            }
            log_prior -= atoms[idx[pos]].1.ln();
            idx[pos] += 1;
            if idx[pos] == atoms.len() {
                idx[pos] = 0;
                x0[pos] = atoms[0].0;
                log_prior += atoms[0].1.ln();
                pos += 1;
            } else {
                x0[pos] = atoms[idx[pos]].0;
                log_prior += atoms[idx[pos]].1.ln();
                break;
            }
        }
        if pos == k {
            break;
        }
    }
    debug_assert_eq!(log_w.len(), n_configs);

    let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return Err(Error::InvalidInput(
            "observation has zero posterior mass under every configuration".into(),
        ));
    }
    let mut z_total = 0.0;
    let mut num = vec![0.0; k];
    let mut x0 = vec![atoms[0].0; k];
    let mut idx = vec![0usize; k];
    for lw in &log_w {
        let w = (lw - shift).exp();
        z_total += w;
        for (nk, xk) in num.iter_mut().zip(&x0) {
            *nk += w * xk;
        }
        let mut pos = 0;
        while pos < k {
            idx[pos] += 1;
            if idx[pos] == atoms.len() {
                idx[pos] = 0;
                x0[pos] = atoms[0].0;
                pos += 1;
            } else {
                x0[pos] = atoms[idx[pos]].0;
                break;
            }
        }
    }
    Ok(num.into_iter().map(|n| n / z_total).collect())
}

// ---------------------------------------------------------------------------
// LMMSE oracle (all-Gaussian networks)
// ---------------------------------------------------------------------------

fn lmmse_plan_check(fnet: &FiniteNetwork) -> Result<(f64, f64)> {
    let (mean, var) = match fnet.spec.prior() {
        Prior::Gaussian { mean, variance } => (*mean, *variance),
        other => {
            return Err(Error::OracleUnsupported(format!(
                "LMMSE oracle requires a Gaussian prior, got {other:?}"
            )))
        }
    };
    for (l, layer) in fnet.spec.layers().iter().enumerate() {
        if layer.activation.additive_noise_variance().is_none() {
            return Err(Error::OracleUnsupported(format!(
                "LMMSE oracle requires awgn/identity activations, layer {} is {:?}",
                l + 1,
                layer.activation
            )));
        }
    }
    Ok((mean, var))
}

struct LmmseModel {
    mean_x: f64,
    var_x: f64,
    /// Composed linear map input -> output.
    map: Mat,
    chol: Cholesky,
}

fn lmmse_model(fnet: &FiniteNetwork) -> Result<LmmseModel> {
    let (mean_x, var_x) = lmmse_plan_check(fnet)?;
    let layers = fnet.spec.layers();
    let n_out = *fnet.dims.last().unwrap();
    let mut cov = Mat::zeros(n_out, n_out);
    let mut b = Mat::identity(n_out);
    for l in (0..layers.len()).rev() {
        let v = layers[l]
            .activation
            .additive_noise_variance()
            .expect("checked");
        if v > 0.0 {
            b.add_scaled_gram_to(v, &mut cov);
        }
        b = b.matmul(&fnet.matrices[l]);
    }
    // b is now the full composed map; cov the accumulated noise covariance.
    let mut sigma_y = cov;
    b.add_scaled_gram_to(var_x, &mut sigma_y);
    let chol = Cholesky::new(&sigma_y)?;
    Ok(LmmseModel {
        mean_x,
        var_x,
        map: b,
        chol,
    })
}

/// Conditional-mean estimate under the joint Gaussian model.
pub fn lmmse_gaussian_oracle(fnet: &FiniteNetwork, y: &[f64]) -> Result<Vec<f64>> {
    let model = lmmse_model(fnet)?;
    let k = fnet.dims[0];
    let mean_y = model.map.matvec(&vec![model.mean_x; k]);
    let resid: Vec<f64> = y.iter().zip(&mean_y).map(|(a, b)| a - b).collect();
    let w = model.chol.solve(&resid);
    // xhat = mean + var_x * M^T w.
    let mut xhat = vec![model.mean_x; k];
    for (i, x) in xhat.iter_mut().enumerate() {
        let acc: f64 = w
            .iter()
            .enumerate()
            .map(|(r, wv)| model.map.at(r, i) * wv)
            .sum();
        *x += model.var_x * acc;
    }
    Ok(xhat)
}

/// Per-coordinate posterior MSE, (1/K) trace of the posterior covariance:
/// `var_x - var_x^2/K * tr(M^T Sigma_y^-1 M)`.
pub fn lmmse_avg_mse(fnet: &FiniteNetwork) -> Result<f64> {
    let model = lmmse_model(fnet)?;
    let k = fnet.dims[0];
    let rows = model.map.rows;
    let mut trace = 0.0;
    let mut col = vec![0.0; rows];
    for i in 0..k {
        for (r, c) in col.iter_mut().enumerate() {
            *c = model.map.at(r, i);
        }
        let s = model.chol.solve(&col);
        trace += col.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(model.var_x - model.var_x * model.var_x / k as f64 * trace)
}

// ---------------------------------------------------------------------------
// Decoupling moment comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MomentRow {
    pub i: u32,
    pub j: u32,
    /// Mean over trials of the per-trial coordinate average of x0^i xhat^j.
    pub empirical: f64,
    pub std_error: f64,
    /// `E[X^i <X>^j]` of the equivalent scalar channel at the solved eta.
    pub predicted: f64,
    pub z_score: f64,
}

#[derive(Debug, Clone)]
pub struct DecouplingReport {
    pub rows: Vec<MomentRow>,
    pub n_trials: usize,
    pub oracle_kind: OracleKind,
    pub fixed_point: FixedPointResult,
    pub empirical_mse: f64,
    pub empirical_mse_std_error: f64,
}

/// Runs the trials and compares the empirical joint moments of
/// (input, estimate) pairs against the scalar-channel predictions.
pub fn decoupling_moment_test(
    spec: &NetworkSpec,
    dims: &[usize],
    settings: &TrialSettings,
    moment_set: &[(u32, u32)],
    solver_opts: &SolverOptions,
) -> Result<DecouplingReport> {
    let fp = solve(spec, solver_opts)?;
    if !fp.converged {
        return Err(Error::NonConvergence {
            residual: fp.residual,
            iterations: fp.iterations,
        });
    }
    let grid = HermiteGrid::new(solver_opts.grid_order)?;
    let siso = SisoChannel::new(spec.prior().clone(), fp.eta)?;

    let batch = run_trials(spec, dims, settings)?;
    let n = batch.records.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "need at least two trials for standard errors".into(),
        ));
    }

    let mut rows = Vec::with_capacity(moment_set.len());
    for &(i, j) in moment_set {
        let predicted = siso.joint_moment(&grid, i, j)?;
        let per_trial: Vec<f64> = batch
            .records
            .iter()
            .map(|r| {
                let mut s = KahanSum::new();
                for (x, xh) in r.x0.iter().zip(&r.xhat) {
                    s.add(x.powi(i as i32) * xh.powi(j as i32));
                }
                s.value() / r.x0.len() as f64
            })
            .collect();
        let (mean, se) = mean_and_se(&per_trial);
        let z_score = if se < 1e-15 {
            if (mean - predicted).abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (mean - predicted) / se
        };
        rows.push(MomentRow {
            i,
            j,
            empirical: mean,
            std_error: se,
            predicted,
            z_score,
        });
    }

    let per_trial_mse: Vec<f64> = batch
        .records
        .iter()
        .map(|r| {
            let mut s = KahanSum::new();
            for (x, xh) in r.x0.iter().zip(&r.xhat) {
                s.add((x - xh) * (x - xh));
            }
            s.value() / r.x0.len() as f64
        })
        .collect();
    let (mse, mse_se) = mean_and_se(&per_trial_mse);

    Ok(DecouplingReport {
        rows,
        n_trials: n,
        oracle_kind: settings.oracle,
        fixed_point: fp,
        empirical_mse: mse,
        empirical_mse_std_error: mse_se,
    })
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mut sum = KahanSum::new();
    for &v in values {
        sum.add(v);
    }
    let mean = sum.value() / n;
    let mut var = KahanSum::new();
    for &v in values {
        var.add((v - mean) * (v - mean));
    }
    let se = (var.value() / (n * (n - 1.0))).sqrt();
    (mean, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::Layer;
    use approx::assert_abs_diff_eq;

    fn binary_awgn_net(noise: f64, alpha: f64) -> NetworkSpec {
        NetworkSpec::new(
            Prior::symmetric_binary(),
            vec![Layer {
                alpha,
                activation: Activation::awgn(noise).unwrap(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn dims_must_match_ratios() {
        let net = binary_awgn_net(0.1, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_network(&net, &[4, 8], &mut rng).is_ok());
        assert!(sample_network(&net, &[4, 9], &mut rng).is_err());
        assert!(sample_network(&net, &[4], &mut rng).is_err());
    }

    #[test]
    fn matrix_entry_variance_in_range() {
        let net = binary_awgn_net(0.1, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fnet = sample_network(&net, &[64, 128], &mut rng).unwrap();
        let entries = fnet.matrix_entries(0);
        let n = entries.len() as f64;
        let m2: f64 = entries.iter().map(|e| e * e).sum::<f64>() / n;
        let want = 1.0 / 128.0;
        // Var of a squared Gaussian is 2 var^2.
        let se = (2.0 * want * want / n).sqrt();
        assert!(
            (m2 - want).abs() < 3.0 * se,
            "entry variance {m2} vs {want} (se {se})"
        );
    }

    #[test]
    fn trials_reproducible_for_equal_seeds() {
        let net = binary_awgn_net(0.2, 2.0);
        let settings = TrialSettings {
            n_trials: 5,
            seed: 42,
            ..TrialSettings::default()
        };
        let a = run_trials(&net, &[3, 6], &settings).unwrap();
        let b = run_trials(&net, &[3, 6], &settings).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.x0, rb.x0);
            assert_eq!(ra.y, rb.y);
            assert_eq!(ra.xhat, rb.xhat);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn thread_count_does_not_change_results() {
        let net = binary_awgn_net(0.2, 2.0);
        let base = TrialSettings {
            n_trials: 8,
            seed: 7,
            ..TrialSettings::default()
        };
        let seq = run_trials(&net, &[3, 6], &base).unwrap();
        let par = run_trials(&net, &[3, 6], &TrialSettings { threads: 4, ..base }).unwrap();
        for (ra, rb) in seq.records.iter().zip(&par.records) {
            assert_eq!(ra.xhat, rb.xhat);
        }
    }

    #[test]
    fn brute_force_matches_hand_posterior_two_coordinates() {
        // K = 2, +-1 prior, single awgn layer: four configurations summed
        // by hand.
        let net = binary_awgn_net(0.5, 1.0);
        let h = vec![0.6, -0.2, 0.3, 0.9];
        let fnet = FiniteNetwork::with_matrices(&net, &[2, 2], vec![h.clone()]).unwrap();
        let y = vec![0.4, -0.7];

        let configs: [[f64; 2]; 4] = [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];
        let mut weights = [0.0; 4];
        for (c, cfg) in configs.iter().enumerate() {
            let z = [h[0] * cfg[0] + h[1] * cfg[1], h[2] * cfg[0] + h[3] * cfg[1]];
            let ll = gaussian_log_pdf(y[0], z[0], 0.5) + gaussian_log_pdf(y[1], z[1], 0.5);
            weights[c] = (0.25f64.ln() + ll).exp();
        }
        let total: f64 = weights.iter().sum();
        let want = [
            configs
                .iter()
                .zip(&weights)
                .map(|(c, w)| c[0] * w)
                .sum::<f64>()
                / total,
            configs
                .iter()
                .zip(&weights)
                .map(|(c, w)| c[1] * w)
                .sum::<f64>()
                / total,
        ];
        let got = exact_mmse_brute_force(&fnet, &y).unwrap();
        assert_abs_diff_eq!(got[0], want[0], epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], want[1], epsilon = 1e-12);
    }

    #[test]
    fn zero_matrix_gives_prior_mean() {
        let prior = Prior::discrete(vec![(-1.0, 0.25), (0.0, 0.25), (2.0, 0.5)]).unwrap();
        let net = NetworkSpec::new(
            prior.clone(),
            vec![Layer {
                alpha: 1.0,
                activation: Activation::awgn(0.3).unwrap(),
            }],
        )
        .unwrap();
        let fnet = FiniteNetwork::with_matrices(&net, &[3, 3], vec![vec![0.0; 9]]).unwrap();
        let y = vec![0.2, -0.1, 0.5];
        let xh = exact_mmse_brute_force(&fnet, &y).unwrap();
        for v in xh {
            assert_abs_diff_eq!(v, prior.mean(), epsilon = 1e-12);
        }
    }

    #[test]
    fn noiseless_invertible_identity_recovers_input() {
        let net = NetworkSpec::new(
            Prior::symmetric_binary(),
            vec![Layer {
                alpha: 1.0,
                activation: Activation::identity(),
            }],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fnet = sample_network(&net, &[4, 4], &mut rng).unwrap();
        let (x0, y) = fnet.sample_trial(&mut rng);
        let xh = exact_mmse_brute_force(&fnet, &y).unwrap();
        for (got, want) in xh.iter().zip(&x0) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn infeasible_dimensions_are_rejected() {
        let net = binary_awgn_net(0.1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fnet = sample_network(&net, &[24, 24], &mut rng).unwrap();
        let y = vec![0.0; 24];
        match exact_mmse_brute_force(&fnet, &y) {
            Err(Error::OracleInfeasible {
                configs, budget, ..
            }) => {
                assert!(configs > budget);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn discrete_after_gaussian_rejected() {
        let net = NetworkSpec::new(
            Prior::symmetric_binary(),
            vec![
                Layer {
                    alpha: 1.0,
                    activation: Activation::awgn(0.1).unwrap(),
                },
                Layer {
                    alpha: 1.0,
                    activation: Activation::sign_noiseless(),
                },
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fnet = sample_network(&net, &[3, 3, 3], &mut rng).unwrap();
        let y = vec![1.0, -1.0, 1.0];
        assert!(matches!(
            exact_mmse_brute_force(&fnet, &y),
            Err(Error::OracleUnsupported(_))
        ));
    }

    #[test]
    fn two_layer_sign_oracle_matches_direct_enumeration() {
        // Small 2-layer sign network: compare the pruned recursion against a
        // direct dense sum over every (x0, s) pair.
        let net = NetworkSpec::new(
            Prior::symmetric_binary(),
            vec![
                Layer {
                    alpha: 1.0,
                    activation: Activation::sign_probit(0.4).unwrap(),
                },
                Layer {
                    alpha: 1.0,
                    activation: Activation::awgn(0.3).unwrap(),
                },
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fnet = sample_network(&net, &[3, 3, 3], &mut rng).unwrap();
        let (_, y) = fnet.sample_trial(&mut rng);
        let got = exact_mmse_brute_force(&fnet, &y).unwrap();

        // Dense reference.
        let k = 3;
        let m = 3;
        let mut num = vec![0.0; k];
        let mut den = 0.0;
        for cx in 0..(1usize << k) {
            let x0: Vec<f64> = (0..k)
                .map(|b| if cx >> b & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            let u = fnet.matrices[0].matvec(&x0);
            for cs in 0..(1usize << m) {
                let s: Vec<f64> = (0..m)
                    .map(|b| if cs >> b & 1 == 1 { 1.0 } else { -1.0 })
                    .collect();
                let v = fnet.matrices[1].matvec(&s);
                // Uniform prior mass cancels in the posterior ratio.
                let mut w = 1.0f64;
                for a in 0..m {
                    w *= net.layers()[0]
                        .activation
                        .conditional_density(s[a], u[a])
                        .unwrap();
                }
                for n in 0..y.len() {
                    w *= crate::math::gaussian_pdf(y[n], v[n], 0.3);
                }
                den += w;
                for i in 0..k {
                    num[i] += w * x0[i];
                }
            }
        }
        for i in 0..k {
            assert_abs_diff_eq!(got[i], num[i] / den, epsilon = 1e-10);
        }
    }

    #[test]
    fn lmmse_identity_matrix_is_scalar_wiener() {
        let net = NetworkSpec::new(
            Prior::gaussian(0.0, 1.0).unwrap(),
            vec![Layer {
                alpha: 1.0,
                activation: Activation::awgn(0.1).unwrap(),
            }],
        )
        .unwrap();
        let eye: Vec<f64> = (0..16)
            .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        let fnet = FiniteNetwork::with_matrices(&net, &[4, 4], vec![eye]).unwrap();
        let mse = lmmse_avg_mse(&fnet).unwrap();
        assert_abs_diff_eq!(mse, 0.1 / 1.1, epsilon = 1e-12);
        // Estimates are y / 1.1 coordinatewise.
        let y = vec![0.5, -1.0, 0.3, 2.0];
        let xh = lmmse_gaussian_oracle(&fnet, &y).unwrap();
        for (got, want) in xh.iter().zip(y.iter().map(|v| v / 1.1)) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn lmmse_huge_noise_returns_prior_power() {
        let net = NetworkSpec::new(
            Prior::gaussian(0.0, 1.0).unwrap(),
            vec![Layer {
                alpha: 1.5,
                activation: Activation::awgn(1e9).unwrap(),
            }],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fnet = sample_network(&net, &[8, 12], &mut rng).unwrap();
        let mse = lmmse_avg_mse(&fnet).unwrap();
        assert!((mse - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lmmse_rejects_nongaussian_configs() {
        let net = binary_awgn_net(0.1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fnet = sample_network(&net, &[3, 3], &mut rng).unwrap();
        assert!(matches!(
            lmmse_avg_mse(&fnet),
            Err(Error::OracleUnsupported(_))
        ));
    }

    #[test]
    fn brute_force_beats_mismatched_estimators() {
        // MMSE optimality at finite size: the exact posterior mean has
        // empirical MSE no worse than the prior-mean and zero estimators,
        // up to sampling slack.
        let net = binary_awgn_net(0.4, 2.0);
        let settings = TrialSettings {
            n_trials: 60,
            seed: 13,
            ..TrialSettings::default()
        };
        let batch = run_trials(&net, &[4, 8], &settings).unwrap();
        let mut mmse = 0.0;
        let mut prior_mean = 0.0;
        let mut n = 0.0;
        for r in &batch.records {
            for (x, xh) in r.x0.iter().zip(&r.xhat) {
                mmse += (x - xh) * (x - xh);
                prior_mean += x * x; // prior mean is zero here
                n += 1.0;
            }
        }
        mmse /= n;
        prior_mean /= n;
        assert!(
            mmse <= prior_mean + 0.05,
            "posterior mean mse {mmse} vs prior-mean mse {prior_mean}"
        );
    }

    #[test]
    fn empirical_orthogonality() {
        let net = binary_awgn_net(0.3, 2.0);
        let settings = TrialSettings {
            n_trials: 400,
            seed: 21,
            ..TrialSettings::default()
        };
        let report = decoupling_moment_test(
            &net,
            &[4, 8],
            &settings,
            &[(1, 1), (0, 2)],
            &SolverOptions::default(),
        )
        .unwrap();
        let m11 = &report.rows[0];
        let m02 = &report.rows[1];
        let combined = (m11.std_error.powi(2) + m02.std_error.powi(2)).sqrt();
        assert!(
            (m11.empirical - m02.empirical).abs() <= 4.0 * combined,
            "orthogonality violated: {} vs {}",
            m11.empirical,
            m02.empirical
        );
    }
}
