//! Ornstein-Uhlenbeck latent diffusion `dZ = (mu - Z) dt + sigma dW`,
//! integrated with Euler-Maruyama, plus the Girsanov log-weight of the
//! drift-removing measure change along the simulated path.
//!
//! Diffusion is diagonal: every tensor element runs its own scalar process.
//! The weight is the Ito sum `sum_t [-0.5 lambda_t^2 dt + lambda_t eps_t]`
//! with `lambda_t = (mu - Z_t) / sigma` taken at the left endpoint.

use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::rng::Rng;

pub const DEFAULT_HORIZON: f64 = 1.0;
pub const DEFAULT_STEPS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("sigma must be strictly positive (found {0})")]
    NonPositiveSigma(f64),
    #[error("shape mismatch: {what} has {found} elements, expected {expected}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("path does not match the grid: {0}")]
    GridMismatch(String),
    #[error("invalid time or grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Time grid of the integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            n_steps: DEFAULT_STEPS,
        }
    }
}

impl SdeConfig {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self, SdeError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SdeError::Grid(format!("horizon must be > 0, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(SdeError::Grid("n_steps must be >= 1".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }
}

/// Drift target, diffusion scale and grid of one OU run.
#[derive(Debug, Clone, PartialEq)]
pub struct OuParams {
    mu: Tensor,
    sigma: Tensor,
    grid: SdeConfig,
}

impl OuParams {
    pub fn new(mu: Tensor, sigma: Tensor, horizon: f64, n_steps: usize) -> Result<Self, SdeError> {
        let grid = SdeConfig::new(horizon, n_steps)?;
        if mu.numel() != sigma.numel() {
            return Err(SdeError::Shape {
                what: "sigma",
                expected: mu.numel(),
                found: sigma.numel(),
            });
        }
        check_sigma(sigma.values())?;
        Ok(Self { mu, sigma, grid })
    }

    /// Scalar process.
    pub fn scalar(mu: f64, sigma: f64, horizon: f64, n_steps: usize) -> Result<Self, SdeError> {
        Self::new(Tensor::scalar(mu), Tensor::scalar(sigma), horizon, n_steps)
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    pub fn grid(&self) -> SdeConfig {
        self.grid
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn numel(&self) -> usize {
        self.mu.numel()
    }
}

fn check_sigma(sigma: &[f64]) -> Result<(), SdeError> {
    match sigma.iter().find(|s| !(**s > 0.0)) {
        Some(bad) => Err(SdeError::NonPositiveSigma(*bad)),
        None => Ok(()),
    }
}

/// Discretised trajectory: `n_steps + 1` states, the `n_steps` Wiener
/// increments (each `~ N(0, dt)` per element) that produced them, and the
/// accumulated Girsanov log-weight.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPath {
    pub states: Vec<Vec<f64>>,
    pub increments: Vec<Vec<f64>>,
    pub log_rn_weight: f64,
}

impl DiffusionPath {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("paths have at least one state")
    }
}

/// Standard-normal draws driving one sampler call: the initial state and the
/// unit-variance innovations per step (scaled by `sqrt(dt)` when used).
#[derive(Debug, Clone, PartialEq)]
pub struct SdeNoise {
    pub z0: Vec<f64>,
    pub innovations: Vec<Vec<f64>>,
}

impl SdeNoise {
    pub fn draw(numel: usize, n_steps: usize, rng: &mut Rng) -> Self {
        let z0 = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        let innovations = (0..n_steps)
            .map(|_| (0..numel).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Self { z0, innovations }
    }

    /// Multiplies every draw by `factor` (0 gives the noiseless drift flow).
    pub fn scaled(mut self, factor: f64) -> Self {
        self.z0.iter_mut().for_each(|v| *v *= factor);
        for step in &mut self.innovations {
            step.iter_mut().for_each(|v| *v *= factor);
        }
        self
    }
}

fn draw_increments(numel: usize, dt: f64, rng: &mut Rng) -> Vec<f64> {
    let sd = dt.sqrt();
    (0..numel)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn check_z0(params: &OuParams, z0: &[f64]) -> Result<(), SdeError> {
    if z0.len() != params.numel() {
        return Err(SdeError::Shape {
            what: "z0",
            expected: params.numel(),
            found: z0.len(),
        });
    }
    Ok(())
}

/// `Z_{t+dt} = Z_t + (mu - Z_t) dt + sigma * eps_t` from `z0`.
pub fn euler_maruyama(params: &OuParams, z0: &Tensor, rng: &mut Rng) -> Result<DiffusionPath, SdeError> {
    check_z0(params, z0.values())?;
    let increments: Vec<Vec<f64>> = (0..params.n_steps())
        .map(|_| draw_increments(params.numel(), params.dt(), rng))
        .collect();
    let states = replay(params, z0.values(), &increments)?;
    let mut path = DiffusionPath {
        states,
        increments,
        log_rn_weight: 0.0,
    };
    path.log_rn_weight = girsanov_log_weight(&path, params)?;
    Ok(path)
}

/// Re-runs the Euler-Maruyama recursion over stored increments.
pub fn replay(params: &OuParams, z0: &[f64], increments: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, SdeError> {
    check_z0(params, z0)?;
    if increments.len() != params.n_steps() {
        return Err(SdeError::GridMismatch(format!(
            "{} increments for {} steps",
            increments.len(),
            params.n_steps()
        )));
    }
    let (mu, sigma, dt) = (params.mu.values(), params.sigma.values(), params.dt());
    let mut states = Vec::with_capacity(increments.len() + 1);
    let mut z = z0.to_vec();
    states.push(z.clone());
    for eps in increments {
        if eps.len() != z.len() {
            return Err(SdeError::GridMismatch("increment length".into()));
        }
        for i in 0..z.len() {
            z[i] = z[i] + (mu[i] - z[i]) * dt + sigma[i] * eps[i];
        }
        states.push(z.clone());
    }
    Ok(states)
}

/// Path of the drift-free dynamics `dZ = sigma dW` on the same grid.
pub fn driftless_path(params: &OuParams, z0: &[f64], rng: &mut Rng) -> Result<DiffusionPath, SdeError> {
    check_z0(params, z0)?;
    let sigma = params.sigma.values();
    let mut z = z0.to_vec();
    let mut states = vec![z.clone()];
    let mut increments = Vec::with_capacity(params.n_steps());
    for _ in 0..params.n_steps() {
        let eps = draw_increments(z.len(), params.dt(), rng);
        for i in 0..z.len() {
            z[i] += sigma[i] * eps[i];
        }
        states.push(z.clone());
        increments.push(eps);
    }
    let mut path = DiffusionPath {
        states,
        increments,
        log_rn_weight: 0.0,
    };
    path.log_rn_weight = girsanov_log_weight(&path, params)?;
    Ok(path)
}

/// `sum_t sum_i [-0.5 lambda^2 dt + lambda eps]`, `lambda = (mu - Z_t) / sigma` at the left endpoint.
pub fn girsanov_log_weight(path: &DiffusionPath, params: &OuParams) -> Result<f64, SdeError> {
    if path.states.len() != params.n_steps() + 1 || path.increments.len() != params.n_steps() {
        return Err(SdeError::GridMismatch(format!(
            "{} states / {} increments for a {}-step grid",
            path.states.len(),
            path.increments.len(),
            params.n_steps()
        )));
    }
    let (mu, sigma, dt) = (params.mu.values(), params.sigma.values(), params.dt());
    let mut total = 0.0;
    for (state, eps) in path.states.iter().zip(&path.increments) {
        if state.len() != mu.len() || eps.len() != mu.len() {
            return Err(SdeError::GridMismatch("element count".into()));
        }
        total += log_weight_step(mu, sigma, state, eps, dt);
    }
    Ok(total)
}

fn log_weight_step(mu: &[f64], sigma: &[f64], state: &[f64], eps: &[f64], dt: f64) -> f64 {
    (0..mu.len()).map(|i| log_weight_term(mu[i], sigma[i], state[i], eps[i], dt)).sum()
}

fn log_weight_term(mu: f64, sigma: f64, state: f64, eps: f64, dt: f64) -> f64 {
    let lambda = (mu - state) / sigma;
    -0.5 * lambda * lambda * dt + lambda * eps
}

/// Terminal state of the OU run started from `z0 ~ N(0, I)` on the default
/// grid (`T = 1`, 8 steps), with the path's Girsanov log-weight.
pub fn sde_girsanov_sample(mu: &Tensor, sigma: &Tensor, rng: &mut Rng) -> Result<(Tensor, f64), SdeError> {
    sde_girsanov_sample_on(mu, sigma, SdeConfig::default(), rng)
}

/// [`sde_girsanov_sample`] on an explicit grid.
pub fn sde_girsanov_sample_on(
    mu: &Tensor,
    sigma: &Tensor,
    grid: SdeConfig,
    rng: &mut Rng,
) -> Result<(Tensor, f64), SdeError> {
    let params = OuParams::new(mu.clone(), sigma.clone(), grid.horizon, grid.n_steps)?;
    let z0: Vec<f64> = (0..mu.numel()).map(|_| rng.sample(StandardNormal)).collect();
    let path = euler_maruyama(&params, &Tensor::new(mu.shape().to_vec(), z0)?, rng)?;
    let z = Tensor::new(mu.shape().to_vec(), path.terminal().to_vec())?;
    Ok((z, path.log_rn_weight))
}

/// Result of a differentiable sampler call.
#[derive(Debug, Clone)]
pub struct TapeSample {
    pub z: Var,
    /// Sum of `coord_log_weights`.
    pub log_rn_weight: f64,
    /// Log-weight of each coordinate's path; each one is an exponential martingale on its own.
    pub coord_log_weights: Vec<f64>,
}

/// Differentiable sampler: the Euler-Maruyama recursion is recorded on the
/// tape, so gradients reach `mu` and `sigma` through every step.
pub fn sample_tape(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    grid: SdeConfig,
    noise: &SdeNoise,
) -> Result<TapeSample, SdeError> {
    let shape = tape.shape(mu).to_vec();
    let numel = tape.value(mu).len();
    if tape.value(sigma).len() != numel {
        return Err(SdeError::Shape {
            what: "sigma",
            expected: numel,
            found: tape.value(sigma).len(),
        });
    }
    check_sigma(tape.value(sigma))?;
    if noise.z0.len() != numel || noise.innovations.len() != grid.n_steps {
        return Err(SdeError::GridMismatch("noise does not match the grid".into()));
    }
    let dt = grid.dt();
    let sd = dt.sqrt();
    let mut z = tape.constant(&shape, noise.z0.clone())?;
    let mut coord = vec![0.0; numel];
    for innov in &noise.innovations {
        if innov.len() != numel {
            return Err(SdeError::GridMismatch("innovation length".into()));
        }
        let eps: Vec<f64> = innov.iter().map(|v| v * sd).collect();
        let (mv, sv, zv) = (tape.value(mu), tape.value(sigma), tape.value(z));
        for (i, c) in coord.iter_mut().enumerate() {
            *c += log_weight_term(mv[i], sv[i], zv[i], eps[i], dt);
        }
        let eps = tape.constant(&shape, eps)?;
        let drift = tape.sub(mu, z)?;
        let drift = tape.scale(drift, dt)?;
        let kick = tape.mul(sigma, eps)?;
        let step = tape.add(drift, kick)?;
        z = tape.add(z, step)?;
    }
    Ok(TapeSample {
        z,
        log_rn_weight: coord.iter().sum(),
        coord_log_weights: coord,
    })
}

/// Exact OU transition moments from `z0` after time `t`.
pub fn ou_analytic_moments(z0: f64, mu: f64, sigma: f64, t: f64) -> Result<(f64, f64), SdeError> {
    if t < 0.0 || !t.is_finite() {
        return Err(SdeError::Grid(format!("t must be >= 0, got {t}")));
    }
    if sigma < 0.0 {
        return Err(SdeError::NonPositiveSigma(sigma));
    }
    let decay = (-t).exp();
    Ok((
        mu + (z0 - mu) * decay,
        sigma * sigma * (1.0 - (-2.0 * t).exp()) / 2.0,
    ))
}

/// Exact moments of the Euler-Maruyama chain itself after `n_steps` of size `t / n_steps`.
pub fn em_chain_moments(z0: f64, mu: f64, sigma: f64, t: f64, n_steps: usize) -> (f64, f64) {
    let dt = t / n_steps as f64;
    let a = 1.0 - dt;
    let an = a.powi(n_steps as i32);
    let var = if (1.0 - a * a).abs() < f64::EPSILON {
        sigma * sigma * dt * n_steps as f64
    } else {
        sigma * sigma * dt * (1.0 - an * an) / (1.0 - a * a)
    };
    (mu + (z0 - mu) * an, var)
}
