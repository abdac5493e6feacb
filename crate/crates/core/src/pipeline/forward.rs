//! One pass of the model over a single image, recorded on a tape.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::flows::FlowError;
use crate::ncvi::{
    gaussian_kl_tape, kl_terms_tape, mc_kl_tape, update_mu_rho, KlTermVars, KlVars, NcviError, SmoothnessFields,
    VariationalState,
};
use crate::rng::Rng;
use crate::sde::{sample_tape, SdeConfig, SdeError, SdeNoise};
use crate::spatial::{dice_ce_tape, grad_sqnorm_tape, gumbel_noise, gumbel_softmax_with_noise, SpatialError};

use super::net::{BoundModel, Heads, Model, SEG_INPUT_CHANNELS};
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call settings of [`forward_tape`].
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub tau: f64,
    /// Multiplies every random draw (latent noise and Gumbel noise); 0 gives the noiseless pass.
    pub noise_scale: f64,
    /// Use this variational state instead of recomputing it from the current values.
    pub frozen_state: Option<VariationalState>,
}

impl ForwardOptions {
    pub fn train(tau: f64) -> Self {
        Self {
            mode: Mode::Train,
            tau,
            noise_scale: 1.0,
            frozen_state: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            tau: 1.0,
            noise_scale: 0.0,
            frozen_state: None,
        }
    }
}

/// Which code paths a pass went through.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTrace {
    pub appearance: bool,
    pub shape: bool,
    pub observation: bool,
    pub segmentation: bool,
    pub flow_refinement: bool,
    pub gumbel: bool,
    pub eval_softmax: bool,
    pub variational_updates: bool,
    pub kl_terms: bool,
    pub sde_sampler: bool,
    pub mc_kl: bool,
    pub gaussian_kl: bool,
}

/// Girsanov log-weights of the four sampler calls.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LatentLogWeights {
    pub m: f64,
    pub x: f64,
    pub n: f64,
    pub z: f64,
}

impl LatentLogWeights {
    /// Total log-weight of the latents that feed the loss; the noise latent is diagnostic only.
    pub fn importance(&self) -> f64 {
        self.m + self.x + self.z
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.m, self.x, self.n, self.z]
    }
}

impl ForwardTape {
    /// Mean per-coordinate log-weight of the m, x and z paths; 0 without the OU sampler.
    pub fn tempered_log_weight(&self) -> f64 {
        if self.coord_log_weights.is_empty() {
            0.0
        } else {
            self.coord_log_weights.iter().sum::<f64>() / self.coord_log_weights.len() as f64
        }
    }
}

/// Tape handles and values produced by one pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Per-pixel class distribution `[K, P]`.
    pub y_hat: Var,
    /// Segmentation mean logits `[K, P]`.
    pub mu_z: Var,
    pub log_var_z: Var,
    pub kl: KlTermVars,
    /// Posterior-vs-prior KL of the segmentation latent, one K-dimensional KL per image.
    pub latent_kl: Option<Var>,
    pub log_weights: LatentLogWeights,
    /// Per-coordinate log-weights of the m, x and z paths (empty without the OU sampler).
    pub coord_log_weights: Vec<f64>,
    pub state: VariationalState,
    /// Diagnostic noise latent.
    pub noise_latent: Vec<f64>,
    pub trace: PhaseTrace,
}

#[derive(Debug)]
struct PhaseFailure {
    detail: String,
    numerical: bool,
}

macro_rules! phase_from {
    ($t:ty, $pat:pat) => {
        impl From<$t> for PhaseFailure {
            fn from(e: $t) -> Self {
                let numerical = matches!(e, $pat);
                Self {
                    detail: e.to_string(),
                    numerical,
                }
            }
        }
    };
}

phase_from!(DiffError, DiffError::NonFinite { .. });
phase_from!(
    SdeError,
    SdeError::Diff(DiffError::NonFinite { .. }) | SdeError::NonPositiveSigma(_)
);
phase_from!(
    NcviError,
    NcviError::NonFinite(_) | NcviError::NonPositive(..) | NcviError::Diff(DiffError::NonFinite { .. })
);
phase_from!(
    SpatialError,
    SpatialError::NonFinite | SpatialError::Diff(DiffError::NonFinite { .. })
);
phase_from!(FlowError, FlowError::Diff(DiffError::NonFinite { .. }));

fn in_phase<T>(phase: &'static str, f: impl FnOnce() -> Result<T, PhaseFailure>) -> Result<T, PipelineError> {
    f().map_err(|e| PipelineError::Phase {
        phase,
        detail: e.detail,
        numerical: e.numerical,
    })
}

fn sigma_of(tape: &mut Tape, log_var: Var) -> Result<Var, DiffError> {
    let half = tape.scale(log_var, 0.5)?;
    tape.exp(half)
}

fn standard_normals(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Latent sample from `(mu, sigma)`: the OU sampler when enabled, else `mu + sigma * eps`.
fn sample_latent(
    tape: &mut Tape,
    model: &Model,
    mu: Var,
    sigma: Var,
    noise_scale: f64,
    rng: &mut Rng,
) -> Result<(Var, Vec<f64>), PhaseFailure> {
    let cfg = &model.config;
    let shape = tape.shape(mu).to_vec();
    let n = tape.value(mu).len();
    if cfg.toggles.sde_girsanov {
        let grid = SdeConfig::new(cfg.sde_horizon, cfg.sde_steps)?;
        let noise = SdeNoise {
            z0: standard_normals(n, noise_scale, rng),
            innovations: (0..grid.n_steps)
                .map(|_| standard_normals(n, noise_scale, rng))
                .collect(),
        };
        let s = sample_tape(tape, mu, sigma, grid, &noise)?;
        Ok((s.z, s.coord_log_weights))
    } else {
        let eps = tape.constant(&shape, standard_normals(n, noise_scale, rng))?;
        let kick = tape.mul(sigma, eps)?;
        Ok((tape.add(mu, kick)?, Vec::new()))
    }
}

fn encode(
    tape: &mut Tape,
    model: &Model,
    heads: Heads,
    noise_scale: f64,
    rng: &mut Rng,
) -> Result<(Var, Var, Vec<f64>), PhaseFailure> {
    let sigma = sigma_of(tape, heads.log_var)?;
    let (sample, lw) = sample_latent(tape, model, heads.mu, sigma, noise_scale, rng)?;
    Ok((sigma, sample, lw))
}

/// Runs every phase for `image: [1, H, W]`.
pub fn forward_tape(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundModel,
    image: Var,
    opts: &ForwardOptions,
    rng: &mut Rng,
) -> Result<ForwardTape, PipelineError> {
    let cfg = &model.config;
    let (h, w, k) = (cfg.height, cfg.width, cfg.num_classes);
    let p = h * w;
    if tape.shape(image) != [1, h, w] {
        return Err(PipelineError::Shape(format!(
            "image has shape {:?}, model expects [1, {h}, {w}]",
            tape.shape(image)
        )));
    }
    let noise_scale = match opts.mode {
        Mode::Train => opts.noise_scale,
        Mode::Eval => 0.0,
    };
    let mut trace = PhaseTrace {
        sde_sampler: cfg.toggles.sde_girsanov,
        ..PhaseTrace::default()
    };
    let mut lw = LatentLogWeights::default();
    let mut coord_log_weights = Vec::new();

    let (m_heads, sigma_m, m) = in_phase("appearance", || {
        let heads = model.appearance().forward(tape, &bound.net, image)?;
        let (sigma, m, weight) = encode(tape, model, heads, noise_scale, rng)?;
        lw.m = weight.iter().sum();
        coord_log_weights.extend(weight);
        Ok((heads, sigma, m))
    })?;
    trace.appearance = true;

    let (x_heads, sigma_x, x) = in_phase("shape", || {
        let heads = model.shape_encoder().forward(tape, &bound.net, image)?;
        let (sigma, x, weight) = encode(tape, model, heads, noise_scale, rng)?;
        lw.x = weight.iter().sum();
        coord_log_weights.extend(weight);
        Ok((heads, sigma, x))
    })?;
    trace.shape = true;

    let (r, mu_rho, noise_latent) = in_phase("observation", || {
        let xm = tape.add(x, m)?;
        let r = tape.sub(image, xm)?;
        let mu_rho = match &opts.frozen_state {
            Some(s) => s.mu_rho.clone(),
            None => update_mu_rho(&tape.to_tensor(r), &cfg.hyperpriors)?,
        };
        // noise latent n: sampled around m with sd sqrt(1 / mu_rho), kept off the main tape
        let mut side = Tape::new();
        let mean = side.constant(&[1, h, w], tape.value(m).to_vec())?;
        let sd = side.constant(&[1, h, w], mu_rho.values().iter().map(|v| (1.0 / v).sqrt()).collect())?;
        let (n, weight) = sample_latent(&mut side, model, mean, sd, noise_scale, rng)?;
        lw.n = weight.iter().sum();
        Ok((r, mu_rho, side.value(n).to_vec()))
    })?;
    trace.observation = true;

    let (z_heads, sigma_z, z) = in_phase("segmentation", || {
        let tiled = tape.concat(&[x; SEG_INPUT_CHANNELS], 0)?;
        let heads = model.segmentation().forward(tape, &bound.net, tiled)?;
        let mu = tape.reshape(heads.mu, &[k, p])?;
        let log_var = tape.reshape(heads.log_var, &[k, p])?;
        let flat = Heads { mu, log_var };
        let (sigma, z, weight) = encode(tape, model, flat, noise_scale, rng)?;
        lw.z = weight.iter().sum();
        coord_log_weights.extend(weight);
        Ok((flat, sigma, z))
    })?;
    trace.segmentation = true;

    let y_hat = in_phase("posterior", || match opts.mode {
        Mode::Train => {
            let logits = if cfg.toggles.nf_posterior {
                trace.flow_refinement = true;
                model.flow().push_tape(tape, &bound.flow, z)?.0
            } else {
                z
            };
            trace.gumbel = true;
            let g: Vec<f64> = gumbel_noise(k * p, rng).into_iter().map(|v| v * noise_scale).collect();
            Ok(gumbel_softmax_with_noise(tape, logits, opts.tau, g, cfg.hard_gumbel)?)
        }
        Mode::Eval => {
            trace.eval_softmax = true;
            Ok(tape.softmax(z_heads.mu, 0)?)
        }
    })?;

    let (state, probs, grad_sq_z, grad_sq_x, sigma_x_row) = in_phase("variational", || {
        let probs = tape.softmax(z_heads.mu, 0)?;
        let probs_map = tape.reshape(probs, &[k, h, w])?;
        let gz = grad_sqnorm_tape(tape, probs_map)?;
        let gz = tape.reshape(gz, &[k, p])?;
        let gx = grad_sqnorm_tape(tape, x_heads.mu)?;
        let gx = tape.reshape(gx, &[1, p])?;
        let sx = tape.reshape(sigma_x, &[1, p])?;
        let state = match &opts.frozen_state {
            Some(s) => s.clone(),
            None => {
                let (mz, gzt, szt, gxt, sxt) = (
                    tape.to_tensor(probs),
                    tape.to_tensor(gz),
                    tape.to_tensor(sigma_z),
                    tape.to_tensor(gx),
                    tape.to_tensor(sx),
                );
                let fields = SmoothnessFields {
                    mu_z: &mz,
                    grad_sq_mu_z: &gzt,
                    sigma_z: &szt,
                    grad_sq_mu_x: &gxt,
                    sigma_x: &sxt,
                };
                VariationalState::update(mu_rho.clone(), &fields, &cfg.hyperpriors)?
            }
        };
        Ok((state, probs, gz, gx, sx))
    })?;
    trace.variational_updates = true;

    let (kl, latent_kl) = in_phase("kl", || {
        let r_row = tape.reshape(r, &[1, p])?;
        let vars = KlVars {
            r: r_row,
            mu_z: probs,
            grad_sq_mu_z: grad_sq_z,
            sigma_z,
            grad_sq_mu_x: grad_sq_x,
            sigma_x: sigma_x_row,
            mu_m: m_heads.mu,
            sigma_m,
        };
        let kl = kl_terms_tape(tape, &state, &vars, &cfg.hyperpriors)?;
        // The latent KL is one K-dimensional KL per image in both variants.
        let latent = match (cfg.toggles.ncvi, cfg.toggles.nf_posterior) {
            (true, true) => {
                trace.mc_kl = true;
                Some(mc_kl_tape(tape, model.flow(), &bound.flow, cfg.mc_samples, rng)?)
            }
            (true, false) => None,
            (false, _) => {
                trace.gaussian_kl = true;
                // Mean over pixels of the per-pixel closed form.
                let total = gaussian_kl_tape(tape, z_heads.mu, z_heads.log_var)?;
                Some(tape.scale(total, 1.0 / p as f64)?)
            }
        };
        Ok((kl, latent))
    })?;
    trace.kl_terms = true;

    Ok(ForwardTape {
        y_hat,
        mu_z: z_heads.mu,
        log_var_z: z_heads.log_var,
        kl,
        latent_kl,
        log_weights: lw,
        coord_log_weights,
        state,
        noise_latent,
        trace,
    })
}

/// Loss pieces of one sample as tape vars.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    pub dice: Var,
    /// `KL_y + KL_z + KL_x + KL_m` plus the latent KL when present.
    pub kl_total: Var,
    pub total: Var,
}

/// `weight * (CE + Dice) + lambda / N * (sum of KL terms)` for a one-hot `target: [K, P]`.
pub fn sample_loss(
    tape: &mut Tape,
    model: &Model,
    fwd: &ForwardTape,
    target: &Tensor,
    weight: f64,
) -> Result<LossVars, PipelineError> {
    let cfg = &model.config;
    in_phase("loss", || {
        let t = tape.constant(target.shape(), target.values().to_vec())?;
        let (ce, dice) = dice_ce_tape(tape, fwd.y_hat, t)?;
        let seg = tape.add(ce, dice)?;
        let seg = tape.scale(seg, weight)?;
        let mut kl = tape.add(fwd.kl.kl_y, fwd.kl.kl_z)?;
        kl = tape.add(kl, fwd.kl.kl_x)?;
        kl = tape.add(kl, fwd.kl.kl_m)?;
        if let Some(l) = fwd.latent_kl {
            kl = tape.add(kl, l)?;
        }
        let reg = tape.scale(kl, cfg.lambda_bayes / cfg.pixels() as f64)?;
        let total = tape.add(seg, reg)?;
        Ok(LossVars {
            ce,
            dice,
            kl_total: kl,
            total,
        })
    })
}
