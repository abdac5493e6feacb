//! Flat `key = value` run configuration.
//!
//! Every model, hyperprior, domain and run setting is addressable by one key.
//! Values are applied in order: defaults, then the config file, then `--set`
//! overrides, then dedicated flags. [`RunConfig::echo`] prints the effective
//! settings in a fixed key order and parses back to the same configuration.

use std::fmt::Write as _;
use std::path::Path;

use flowseg_core::data::DomainConfig;
use flowseg_core::pipeline::{ModelConfig, Version};

use crate::CliError;

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "run_name",
    "version",
    "num_classes",
    "height",
    "width",
    "nf_posterior",
    "ncvi",
    "sde_girsanov",
    "base_channels",
    "flow_layers",
    "flow_hidden",
    "sde_steps",
    "sde_horizon",
    "tau",
    "tau_final",
    "hard_gumbel",
    "lambda_bayes",
    "learning_rate",
    "weight_decay",
    "lr_decay_at",
    "lr_decay_factor",
    "epochs",
    "batch_size",
    "seed",
    "mc_samples",
    "augment",
    "checkpoint_every",
    "mu0",
    "sigma0",
    "phi_rho",
    "gamma_rho",
    "phi_upsilon",
    "gamma_upsilon",
    "phi_omega",
    "gamma_omega",
    "alpha_pi",
    "beta_pi",
    "domain",
    "noise_sigma",
    "bias_amplitude",
    "contrast_gamma",
    "texture_amplitude",
    "center_jitter",
    "radius_min",
    "radius_max",
    "softness",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_name: String,
    pub model: ModelConfig,
    pub domain: DomainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            model: ModelConfig::default(),
            domain: DomainConfig::named("A").expect("domain A exists"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid boolean {value:?} for {key}")),
    }
}

impl RunConfig {
    /// Applies one setting. The error message does not include a location.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let m = &mut self.model;
        let h = &mut m.hyperpriors;
        let d = &mut self.domain;
        match key {
            "run_name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(format!("invalid run_name {value:?}"));
                }
                self.run_name = value.to_string();
            }
            "version" => {
                let v = Version::from_name(value).ok_or_else(|| format!("unknown version {value:?} (ver1..ver5)"))?;
                m.toggles = v.toggles();
            }
            "num_classes" => {
                m.num_classes = parse(key, value)?;
                d.classes = u8::try_from(m.num_classes).map_err(|_| format!("num_classes {value} too large"))?;
            }
            "height" => m.height = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "nf_posterior" => m.toggles.nf_posterior = parse_bool(key, value)?,
            "ncvi" => m.toggles.ncvi = parse_bool(key, value)?,
            "sde_girsanov" => m.toggles.sde_girsanov = parse_bool(key, value)?,
            "base_channels" => m.base_channels = parse(key, value)?,
            "flow_layers" => m.flow_layers = parse(key, value)?,
            "flow_hidden" => m.flow_hidden = parse(key, value)?,
            "sde_steps" => m.sde_steps = parse(key, value)?,
            "sde_horizon" => m.sde_horizon = parse(key, value)?,
            "tau" => m.tau = parse(key, value)?,
            "tau_final" => m.tau_final = parse(key, value)?,
            "hard_gumbel" => m.hard_gumbel = parse_bool(key, value)?,
            "lambda_bayes" => m.lambda_bayes = parse(key, value)?,
            "learning_rate" => m.learning_rate = parse(key, value)?,
            "weight_decay" => m.weight_decay = parse(key, value)?,
            "lr_decay_at" => m.lr_decay_at = parse(key, value)?,
            "lr_decay_factor" => m.lr_decay_factor = parse(key, value)?,
            "epochs" => m.epochs = parse(key, value)?,
            "batch_size" => m.batch_size = parse(key, value)?,
            "seed" => {
                m.seed = parse(key, value)?;
                d.seed = m.seed;
            }
            "mc_samples" => m.mc_samples = parse(key, value)?,
            "augment" => m.augment = parse_bool(key, value)?,
            "checkpoint_every" => m.checkpoint_every = parse(key, value)?,
            "mu0" => h.mu0 = parse(key, value)?,
            "sigma0" => h.sigma0 = parse(key, value)?,
            "phi_rho" => h.phi_rho = parse(key, value)?,
            "gamma_rho" => h.gamma_rho = parse(key, value)?,
            "phi_upsilon" => h.phi_upsilon = parse(key, value)?,
            "gamma_upsilon" => h.gamma_upsilon = parse(key, value)?,
            "phi_omega" => h.phi_omega = parse(key, value)?,
            "gamma_omega" => h.gamma_omega = parse(key, value)?,
            "alpha_pi" => h.alpha_pi0 = parse(key, value)?,
            "beta_pi" => h.beta_pi0 = parse(key, value)?,
            "domain" => {
                let mut named = DomainConfig::named(value).ok_or_else(|| format!("unknown domain {value:?} (A, B, C, D)"))?;
                named.seed = d.seed;
                named.classes = d.classes;
                *d = named;
            }
            "noise_sigma" => d.noise_sigma = parse(key, value)?,
            "bias_amplitude" => d.bias_amplitude = parse(key, value)?,
            "contrast_gamma" => d.contrast_gamma = parse(key, value)?,
            "texture_amplitude" => d.texture_amplitude = parse(key, value)?,
            "center_jitter" => d.blob.center_jitter = parse(key, value)?,
            "radius_min" => d.blob.radius_min = parse(key, value)?,
            "radius_max" => d.blob.radius_max = parse(key, value)?,
            "softness" => d.blob.softness = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Current value of `key`, formatted so that [`set`](Self::set) reproduces it.
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let h = &m.hyperpriors;
        let d = &self.domain;
        let v = match key {
            "run_name" => self.run_name.clone(),
            "version" => m.version().map_or_else(|| "custom".into(), |v| v.name().into()),
            "num_classes" => m.num_classes.to_string(),
            "height" => m.height.to_string(),
            "width" => m.width.to_string(),
            "nf_posterior" => m.toggles.nf_posterior.to_string(),
            "ncvi" => m.toggles.ncvi.to_string(),
            "sde_girsanov" => m.toggles.sde_girsanov.to_string(),
            "base_channels" => m.base_channels.to_string(),
            "flow_layers" => m.flow_layers.to_string(),
            "flow_hidden" => m.flow_hidden.to_string(),
            "sde_steps" => m.sde_steps.to_string(),
            "sde_horizon" => format!("{:?}", m.sde_horizon),
            "tau" => format!("{:?}", m.tau),
            "tau_final" => format!("{:?}", m.tau_final),
            "hard_gumbel" => m.hard_gumbel.to_string(),
            "lambda_bayes" => format!("{:?}", m.lambda_bayes),
            "learning_rate" => format!("{:?}", m.learning_rate),
            "weight_decay" => format!("{:?}", m.weight_decay),
            "lr_decay_at" => format!("{:?}", m.lr_decay_at),
            "lr_decay_factor" => format!("{:?}", m.lr_decay_factor),
            "epochs" => m.epochs.to_string(),
            "batch_size" => m.batch_size.to_string(),
            "seed" => m.seed.to_string(),
            "mc_samples" => m.mc_samples.to_string(),
            "augment" => m.augment.to_string(),
            "checkpoint_every" => m.checkpoint_every.to_string(),
            "mu0" => format!("{:?}", h.mu0),
            "sigma0" => format!("{:?}", h.sigma0),
            "phi_rho" => format!("{:?}", h.phi_rho),
            "gamma_rho" => format!("{:?}", h.gamma_rho),
            "phi_upsilon" => format!("{:?}", h.phi_upsilon),
            "gamma_upsilon" => format!("{:?}", h.gamma_upsilon),
            "phi_omega" => format!("{:?}", h.phi_omega),
            "gamma_omega" => format!("{:?}", h.gamma_omega),
            "alpha_pi" => format!("{:?}", h.alpha_pi0),
            "beta_pi" => format!("{:?}", h.beta_pi0),
            "domain" => d.name.clone(),
            "noise_sigma" => format!("{:?}", d.noise_sigma),
            "bias_amplitude" => format!("{:?}", d.bias_amplitude),
            "contrast_gamma" => format!("{:?}", d.contrast_gamma),
            "texture_amplitude" => format!("{:?}", d.texture_amplitude),
            "center_jitter" => format!("{:?}", d.blob.center_jitter),
            "radius_min" => format!("{:?}", d.blob.radius_min),
            "radius_max" => format!("{:?}", d.blob.radius_max),
            "softness" => format!("{:?}", d.blob.softness),
            _ => return None,
        };
        Some(v)
    }

    /// Applies a config file's contents. `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{lineno}: expected `key = value`, found {line:?}")))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("{origin}:{lineno}: {e}")))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, found {o:?}")))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("--set {o}: {e}")))?;
        }
        Ok(())
    }

    /// The effective configuration as config-file text.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            // Toggles are echoed individually; `version` would override them on re-read.
            if *key == "version" {
                let _ = writeln!(out, "# version = {}", self.get(key).unwrap_or_default());
                continue;
            }
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.domain.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if usize::from(self.domain.classes) != self.model.num_classes {
            return Err(CliError::Usage("domain classes differ from num_classes".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_training_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.get("learning_rate").unwrap(), "0.0003");
        assert_eq!(c.get("seed").unwrap(), "42");
        assert_eq!(c.get("batch_size").unwrap(), "8");
        assert_eq!(c.get("lambda_bayes").unwrap(), "100.0");
        assert_eq!(c.get("version").unwrap(), "ver5");
        for key in KEYS {
            assert!(c.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn unknown_key_names_the_line() {
        let mut c = RunConfig::default();
        let err = c.apply_text("# comment\nepochs = 3\n\nbogus = 1\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("cfg:4"), "{err}");
        assert!(err.to_string().contains("bogus"), "{err}");
        assert_eq!(c.model.epochs, 3);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("version = ver3\ndomain = C\nseed = 7 # trailing\ntau = 0.5", "x").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.echo(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("version").unwrap(), "ver3");
    }
}
