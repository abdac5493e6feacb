//! Variational side of the model: hyperpriors, the closed-form precision and
//! pseudo-prior updates, the four smoothness KL terms, and the Monte-Carlo KL
//! of a flow posterior against the standard-normal prior.
//!
//! Field layout: class-indexed quantities are `[K, P]` (class rows, `P`
//! pixels); image-side quantities (`r`, `x`, `m`) carry `P` elements in any
//! shape. Updates operate on plain values; gradients never pass through them.

use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::flows::{standard_normal_log_density, BoundFlow, FlowError, FlowStack};
use crate::rng::Rng;

/// Number of flow draws per KL estimate during training.
pub const DEFAULT_MC_SAMPLES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NcviError {
    #[error("{0} must be strictly positive (found {1})")]
    NonPositive(&'static str, f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {what} has shape {found:?}, expected {expected}")]
    Shape {
        what: &'static str,
        expected: String,
        found: Vec<usize>,
    },
    #[error("n_samples must be >= 1")]
    NoSamples,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Gamma / Beta / Gaussian hyperparameters of the structural priors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperpriors {
    pub gamma_rho: f64,
    pub phi_rho: f64,
    pub gamma_upsilon: f64,
    pub phi_upsilon: f64,
    pub gamma_omega: f64,
    pub phi_omega: f64,
    pub alpha_pi0: f64,
    pub beta_pi0: f64,
    pub mu0: f64,
    pub sigma0: f64,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Self {
            gamma_rho: 2.0,
            phi_rho: 1e-6,
            gamma_upsilon: 2.0,
            phi_upsilon: 1e-8,
            gamma_omega: 2.0,
            phi_omega: 1e-4,
            alpha_pi0: 2.0,
            beta_pi0: 2.0,
            mu0: 0.0,
            sigma0: 1.0,
        }
    }
}

impl Hyperpriors {
    pub fn validate(&self) -> Result<(), NcviError> {
        let named = [
            ("gamma_rho", self.gamma_rho),
            ("phi_rho", self.phi_rho),
            ("gamma_upsilon", self.gamma_upsilon),
            ("phi_upsilon", self.phi_upsilon),
            ("gamma_omega", self.gamma_omega),
            ("phi_omega", self.phi_omega),
            ("alpha_pi0", self.alpha_pi0),
            ("beta_pi0", self.beta_pi0),
            ("sigma0", self.sigma0),
        ];
        for (name, v) in named {
            if !(v > 0.0) || !v.is_finite() {
                return Err(NcviError::NonPositive(name, v));
            }
        }
        if !self.mu0.is_finite() {
            return Err(NcviError::NonFinite("mu0"));
        }
        Ok(())
    }
}

/// Per-forward-pass variational quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub mu_rho: Tensor,
    pub mu_upsilon: Tensor,
    pub mu_omega: Tensor,
    pub pi: Tensor,
    pub alpha_pi: Tensor,
    pub beta_pi: Tensor,
    pub psi: Tensor,
}

impl VariationalState {
    /// Runs the coordinate-ascent block: `mu_upsilon`, then `pi`, `mu_omega`, the Beta update and `psi`.
    pub fn update(
        mu_rho: Tensor,
        fields: &SmoothnessFields<'_>,
        hp: &Hyperpriors,
    ) -> Result<Self, NcviError> {
        let k = fields.mu_z.shape()[0];
        let mu_upsilon = update_mu_upsilon(fields.mu_z, fields.grad_sq_mu_x, fields.sigma_x, k, hp)?;
        let pi = update_pi(fields.mu_z)?;
        let mu_omega = update_mu_omega(&pi, fields.grad_sq_mu_z, fields.sigma_z, hp)?;
        let (alpha_pi, beta_pi) = update_beta_prior(&mu_omega, fields.grad_sq_mu_z, fields.sigma_z, hp)?;
        let psi = psi_term(&alpha_pi, &beta_pi)?;
        Ok(Self {
            mu_rho,
            mu_upsilon,
            mu_omega,
            pi,
            alpha_pi,
            beta_pi,
            psi,
        })
    }

    pub fn check(&self) -> Result<(), NcviError> {
        for (name, t) in [
            ("mu_rho", &self.mu_rho),
            ("mu_upsilon", &self.mu_upsilon),
            ("mu_omega", &self.mu_omega),
            ("alpha_pi", &self.alpha_pi),
            ("beta_pi", &self.beta_pi),
        ] {
            if let Some(v) = t.values().iter().find(|v| !(**v > 0.0)) {
                return Err(NcviError::NonPositive(name, *v));
            }
        }
        Ok(())
    }
}

/// Inputs shared by the smoothness updates and KL terms.
#[derive(Debug, Clone, Copy)]
pub struct SmoothnessFields<'a> {
    /// Class probabilities `[K, P]`.
    pub mu_z: &'a Tensor,
    /// `|grad mu_z|^2`, `[K, P]`.
    pub grad_sq_mu_z: &'a Tensor,
    /// `[K, P]`
    pub sigma_z: &'a Tensor,
    /// `|grad mu_x|^2`, `P` elements.
    pub grad_sq_mu_x: &'a Tensor,
    /// `P` elements.
    pub sigma_x: &'a Tensor,
}

fn class_rows(t: &Tensor, what: &'static str) -> Result<(usize, usize), NcviError> {
    match t.shape() {
        [k, rest @ ..] if !rest.is_empty() => Ok((*k, rest.iter().product())),
        _ => Err(NcviError::Shape {
            what,
            expected: "[K, spatial...]".into(),
            found: t.shape().to_vec(),
        }),
    }
}

fn same_numel(t: &Tensor, n: usize, what: &'static str) -> Result<(), NcviError> {
    if t.numel() != n {
        return Err(NcviError::Shape {
            what,
            expected: format!("{n} elements"),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn finite(v: f64, what: &'static str) -> Result<f64, NcviError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NcviError::NonFinite(what))
    }
}

fn tensor_like(shape: &[usize], values: Vec<f64>, what: &'static str) -> Result<Tensor, NcviError> {
    Tensor::new(shape.to_vec(), values).map_err(|_| NcviError::NonFinite(what))
}

/// `E_q[log p] - KL`.
pub fn elbo(expected_loglik: f64, kl: f64) -> Result<f64, NcviError> {
    finite(expected_loglik, "expected log-likelihood")?;
    finite(kl, "kl")?;
    Ok(expected_loglik - kl)
}

/// Monte-Carlo KL estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// `KL[q || N(0, I)]` estimated by pushing `n_samples` base draws through the stack.
pub fn mc_kl(stack: &FlowStack, n_samples: usize, rng: &mut Rng) -> Result<McEstimate, NcviError> {
    if n_samples == 0 {
        return Err(NcviError::NoSamples);
    }
    let (z, logq) = stack.sample(n_samples, rng)?;
    let d = stack.dim();
    let terms: Vec<f64> = logq
        .iter()
        .enumerate()
        .map(|(j, lq)| lq - standard_normal_log_density(&z[j * d..(j + 1) * d]))
        .collect();
    Ok(McEstimate::from_samples(&terms))
}

/// Differentiable [`mc_kl`]: the sample mean of `log q(z) - log p(z)` as a one-element var.
pub fn mc_kl_tape(
    tape: &mut Tape,
    stack: &FlowStack,
    params: &BoundFlow,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Var, NcviError> {
    if n_samples == 0 {
        return Err(NcviError::NoSamples);
    }
    let d = stack.dim();
    let mut cols = vec![0.0; d * n_samples];
    for j in 0..n_samples {
        for i in 0..d {
            cols[i * n_samples + j] = rng.sample(StandardNormal);
        }
    }
    let u = tape.constant(&[d, n_samples], cols)?;
    let (z, logdet) = stack.push_tape(tape, params, u)?;
    let base_u = stack.base_log_density_tape(tape, u)?;
    let base_z = stack.base_log_density_tape(tape, z)?;
    let logq = tape.sub(base_u, logdet)?;
    let diff = tape.sub(logq, base_z)?;
    Ok(tape.mean(diff)?)
}

/// `(2 gamma_rho + 1) / (r^2 + 2 phi_rho)`, elementwise.
pub fn update_mu_rho(r: &Tensor, hp: &Hyperpriors) -> Result<Tensor, NcviError> {
    hp.validate()?;
    let num = 2.0 * hp.gamma_rho + 1.0;
    let vals = r
        .values()
        .iter()
        .map(|ri| num / (ri * ri + 2.0 * hp.phi_rho))
        .collect();
    tensor_like(r.shape(), vals, "mu_rho")
}

/// `(2 gamma_upsilon + K) / (sum_k mu_z[k] (|grad mu_x|^2 + 2 sigma_x^2) + 2 phi_upsilon)` per pixel.
pub fn update_mu_upsilon(
    mu_z: &Tensor,
    grad_sq_mu_x: &Tensor,
    sigma_x: &Tensor,
    k: usize,
    hp: &Hyperpriors,
) -> Result<Tensor, NcviError> {
    hp.validate()?;
    let (classes, p) = class_rows(mu_z, "mu_z")?;
    same_numel(grad_sq_mu_x, p, "grad_sq_mu_x")?;
    same_numel(sigma_x, p, "sigma_x")?;
    let (mz, g, s) = (mu_z.values(), grad_sq_mu_x.values(), sigma_x.values());
    let num = 2.0 * hp.gamma_upsilon + k as f64;
    let vals = (0..p)
        .map(|i| {
            let evidence = g[i] + 2.0 * s[i] * s[i];
            let weight: f64 = (0..classes).map(|c| mz[c * p + i]).sum();
            num / (weight * evidence + 2.0 * hp.phi_upsilon)
        })
        .collect();
    tensor_like(grad_sq_mu_x.shape(), vals, "mu_upsilon")
}

/// `(2 gamma_omega + 1) / (pi_k (|grad mu_z|^2 + 2 sigma_z^2) + 2 phi_omega)`, `[K, P]`.
pub fn update_mu_omega(
    pi: &Tensor,
    grad_sq_mu_z: &Tensor,
    sigma_z: &Tensor,
    hp: &Hyperpriors,
) -> Result<Tensor, NcviError> {
    hp.validate()?;
    let (k, p) = class_rows(grad_sq_mu_z, "grad_sq_mu_z")?;
    same_numel(pi, k, "pi")?;
    same_numel(sigma_z, k * p, "sigma_z")?;
    let (g, s) = (grad_sq_mu_z.values(), sigma_z.values());
    let num = 2.0 * hp.gamma_omega + 1.0;
    let vals = (0..k * p)
        .map(|i| num / (pi.values()[i / p] * (g[i] + 2.0 * s[i] * s[i]) + 2.0 * hp.phi_omega))
        .collect();
    tensor_like(grad_sq_mu_z.shape(), vals, "mu_omega")
}

/// Per-class spatial mean of `mu_z`, shape `[K]`.
pub fn update_pi(mu_z: &Tensor) -> Result<Tensor, NcviError> {
    let (k, p) = class_rows(mu_z, "mu_z")?;
    let vals = mu_z
        .values()
        .chunks(p)
        .map(|row| row.iter().sum::<f64>() / p as f64)
        .collect();
    tensor_like(&[k], vals, "pi")
}

/// `alpha_pi = alpha_pi0`, `beta_pi = beta_pi0 + 0.5 sum_p mu_omega (|grad mu_z|^2 + 2 sigma_z^2)`, per class.
pub fn update_beta_prior(
    mu_omega: &Tensor,
    grad_sq_mu_z: &Tensor,
    sigma_z: &Tensor,
    hp: &Hyperpriors,
) -> Result<(Tensor, Tensor), NcviError> {
    hp.validate()?;
    let (k, p) = class_rows(mu_omega, "mu_omega")?;
    same_numel(grad_sq_mu_z, k * p, "grad_sq_mu_z")?;
    same_numel(sigma_z, k * p, "sigma_z")?;
    let (w, g, s) = (mu_omega.values(), grad_sq_mu_z.values(), sigma_z.values());
    let beta = (0..k)
        .map(|c| {
            let evidence: f64 = (c * p..(c + 1) * p)
                .map(|i| w[i] * (g[i] + 2.0 * s[i] * s[i]))
                .sum();
            hp.beta_pi0 + 0.5 * evidence
        })
        .collect();
    Ok((
        Tensor::full(&[k], hp.alpha_pi0),
        tensor_like(&[k], beta, "beta_pi")?,
    ))
}

/// `digamma(alpha + beta) - digamma(beta)`, elementwise.
pub fn psi_term(alpha_pi: &Tensor, beta_pi: &Tensor) -> Result<Tensor, NcviError> {
    same_numel(beta_pi, alpha_pi.numel(), "beta_pi")?;
    let vals = alpha_pi
        .values()
        .iter()
        .zip(beta_pi.values())
        .map(|(&a, &b)| {
            if !(a > 0.0) {
                return Err(NcviError::NonPositive("alpha_pi", a));
            }
            Ok(digamma(a + b)? - digamma(b)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    tensor_like(alpha_pi.shape(), vals, "psi")
}

/// Digamma function for `x > 0`: shift up to `x >= 6`, then the asymptotic series.
pub fn digamma(x: f64) -> Result<f64, NcviError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(NcviError::NonPositive("digamma argument", x));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_{2k} / (2k) up to x^-14
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(acc + x.ln() - 0.5 * inv - series)
}

/// The four prior KL contributions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KlTerms {
    pub kl_y: f64,
    pub kl_z: f64,
    pub kl_x: f64,
    pub kl_m: f64,
}

impl KlTerms {
    pub fn sum(&self) -> f64 {
        self.kl_y + self.kl_z + self.kl_x + self.kl_m
    }
}

/// `KL_y = sum mu_rho r^2`, `KL_z = sum psi mu_omega (|grad mu_z|^2 + 2 sigma_z^2)`,
/// `KL_x = sum mu_z mu_upsilon (|grad mu_x|^2 + 2 sigma_x^2)`, `KL_m = sum sigma0 (mu_m^2 + sigma_m^2)`.
pub fn kl_terms(
    state: &VariationalState,
    r: &Tensor,
    fields: &SmoothnessFields<'_>,
    mu_m: &Tensor,
    sigma_m: &Tensor,
    hp: &Hyperpriors,
) -> Result<KlTerms, NcviError> {
    let (k, p) = class_rows(fields.mu_z, "mu_z")?;
    same_numel(&state.mu_rho, r.numel(), "mu_rho")?;
    same_numel(fields.grad_sq_mu_z, k * p, "grad_sq_mu_z")?;
    same_numel(fields.sigma_z, k * p, "sigma_z")?;
    same_numel(&state.mu_omega, k * p, "mu_omega")?;
    same_numel(&state.psi, k, "psi")?;
    same_numel(fields.grad_sq_mu_x, p, "grad_sq_mu_x")?;
    same_numel(fields.sigma_x, p, "sigma_x")?;
    same_numel(&state.mu_upsilon, p, "mu_upsilon")?;
    same_numel(sigma_m, mu_m.numel(), "sigma_m")?;

    let kl_y = state
        .mu_rho
        .values()
        .iter()
        .zip(r.values())
        .map(|(w, ri)| w * ri * ri)
        .sum();
    let (gz, sz, w, psi) = (
        fields.grad_sq_mu_z.values(),
        fields.sigma_z.values(),
        state.mu_omega.values(),
        state.psi.values(),
    );
    let kl_z = (0..k * p)
        .map(|i| psi[i / p] * w[i] * (gz[i] + 2.0 * sz[i] * sz[i]))
        .sum();
    let (mz, gx, sx, ups) = (
        fields.mu_z.values(),
        fields.grad_sq_mu_x.values(),
        fields.sigma_x.values(),
        state.mu_upsilon.values(),
    );
    let kl_x = (0..k * p)
        .map(|i| {
            let j = i % p;
            mz[i] * ups[j] * (gx[j] + 2.0 * sx[j] * sx[j])
        })
        .sum();
    let kl_m = mu_m
        .values()
        .iter()
        .zip(sigma_m.values())
        .map(|(m, s)| hp.sigma0 * (m * m + s * s))
        .sum();
    let out = KlTerms {
        kl_y: finite(kl_y, "KL_y")?,
        kl_z: finite(kl_z, "KL_z")?,
        kl_x: finite(kl_x, "KL_x")?,
        kl_m: finite(kl_m, "KL_m")?,
    };
    Ok(out)
}

/// Tape handles of the differentiable KL inputs.
/// `r`, `grad_sq_mu_x`, `sigma_x` are `[1, P]`; `mu_z`, `grad_sq_mu_z`, `sigma_z` are `[K, P]`.
#[derive(Debug, Clone, Copy)]
pub struct KlVars {
    pub r: Var,
    pub mu_z: Var,
    pub grad_sq_mu_z: Var,
    pub sigma_z: Var,
    pub grad_sq_mu_x: Var,
    pub sigma_x: Var,
    pub mu_m: Var,
    pub sigma_m: Var,
}

/// One-element vars for each KL term.
#[derive(Debug, Clone, Copy)]
pub struct KlTermVars {
    pub kl_y: Var,
    pub kl_z: Var,
    pub kl_x: Var,
    pub kl_m: Var,
}

fn evidence_tape(tape: &mut Tape, grad_sq: Var, sigma: Var) -> Result<Var, DiffError> {
    let s2 = tape.square(sigma)?;
    let s2 = tape.scale(s2, 2.0)?;
    tape.add(grad_sq, s2)
}

/// [`kl_terms`] on the tape; the variational state enters as constants.
pub fn kl_terms_tape(
    tape: &mut Tape,
    state: &VariationalState,
    v: &KlVars,
    hp: &Hyperpriors,
) -> Result<KlTermVars, NcviError> {
    let zshape = tape.shape(v.mu_z).to_vec();
    if zshape.len() != 2 {
        return Err(NcviError::Shape {
            what: "mu_z",
            expected: "[K, P]".into(),
            found: zshape,
        });
    }
    let (k, p) = (zshape[0], zshape[1]);
    let rho = tape.constant(tape.shape(v.r).to_vec().as_slice(), state.mu_rho.values().to_vec())?;
    let r2 = tape.square(v.r)?;
    let y = tape.mul(rho, r2)?;
    let kl_y = tape.sum(y)?;

    let omega = tape.constant(&[k, p], state.mu_omega.values().to_vec())?;
    let psi = tape.constant(&[k, 1], state.psi.values().to_vec())?;
    let psi = tape.broadcast(psi, &[k, p])?;
    let ev_z = evidence_tape(tape, v.grad_sq_mu_z, v.sigma_z)?;
    let wz = tape.mul(omega, psi)?;
    let z = tape.mul(wz, ev_z)?;
    let kl_z = tape.sum(z)?;

    let ups = tape.constant(&[1, p], state.mu_upsilon.values().to_vec())?;
    let ev_x = evidence_tape(tape, v.grad_sq_mu_x, v.sigma_x)?;
    let wx = tape.mul(ups, ev_x)?;
    let wx = tape.broadcast(wx, &[k, p])?;
    let x = tape.mul(v.mu_z, wx)?;
    let kl_x = tape.sum(x)?;

    let m2 = tape.square(v.mu_m)?;
    let s2 = tape.square(v.sigma_m)?;
    let m = tape.add(m2, s2)?;
    let m = tape.sum(m)?;
    let kl_m = tape.scale(m, hp.sigma0)?;
    Ok(KlTermVars {
        kl_y,
        kl_z,
        kl_x,
        kl_m,
    })
}

/// `sum 0.5 (mu^2 + sigma^2 - 1 - log sigma^2)` given `log sigma^2`.
pub fn gaussian_kl_tape(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var, DiffError> {
    let m2 = tape.square(mu)?;
    let var = tape.exp(log_var)?;
    let a = tape.add(m2, var)?;
    let a = tape.sub(a, log_var)?;
    let a = tape.offset(a, -1.0)?;
    let s = tape.sum(a)?;
    tape.scale(s, 0.5)
}
