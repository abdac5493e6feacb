use std::fmt;

use crate::ncvi::{Hyperpriors, DEFAULT_MC_SAMPLES};
use crate::sde::{DEFAULT_HORIZON, DEFAULT_STEPS};

use super::PipelineError;

/// Which of the three posterior components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub nf_posterior: bool,
    pub ncvi: bool,
    pub sde_girsanov: bool,
}

impl Toggles {
    pub const ALL: Self = Self {
        nf_posterior: true,
        ncvi: true,
        sde_girsanov: true,
    };

    pub fn bits(self) -> u8 {
        u8::from(self.nf_posterior) | u8::from(self.ncvi) << 1 | u8::from(self.sde_girsanov) << 2
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits < 8).then_some(Self {
            nf_posterior: bits & 1 != 0,
            ncvi: bits & 2 != 0,
            sde_girsanov: bits & 4 != 0,
        })
    }
}

/// The five ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Version {
    Ver1,
    Ver2,
    Ver3,
    Ver4,
    Ver5,
}

impl Version {
    pub const ALL: [Version; 5] = [
        Version::Ver1,
        Version::Ver2,
        Version::Ver3,
        Version::Ver4,
        Version::Ver5,
    ];

    pub fn toggles(self) -> Toggles {
        let (nf_posterior, ncvi, sde_girsanov) = match self {
            Version::Ver1 => (false, false, false),
            Version::Ver2 => (false, true, true),
            Version::Ver3 => (true, false, true),
            Version::Ver4 => (true, true, false),
            Version::Ver5 => (true, true, true),
        };
        Toggles {
            nf_posterior,
            ncvi,
            sde_girsanov,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Version::Ver1 => "ver1",
            Version::Ver2 => "ver2",
            Version::Ver3 => "ver3",
            Version::Ver4 => "ver4",
            Version::Ver5 => "ver5",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name.trim().to_ascii_lowercase())
    }

    pub fn from_toggles(t: Toggles) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.toggles() == t)
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture, sampler and training settings of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub toggles: Toggles,
    /// Channel width of the first network level.
    pub base_channels: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub sde_steps: usize,
    pub sde_horizon: f64,
    pub tau: f64,
    /// Temperature reached by linear annealing at the last epoch; equal to `tau` disables annealing.
    pub tau_final: f64,
    pub hard_gumbel: bool,
    pub lambda_bayes: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of the epochs after which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mc_samples: usize,
    pub augment: bool,
    pub checkpoint_every: usize,
    pub hyperpriors: Hyperpriors,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            height: 64,
            width: 64,
            toggles: Toggles::ALL,
            base_channels: 4,
            flow_layers: crate::flows::DEFAULT_LAYERS,
            flow_hidden: crate::flows::DEFAULT_HIDDEN,
            sde_steps: DEFAULT_STEPS,
            sde_horizon: DEFAULT_HORIZON,
            tau: 1.0,
            tau_final: 1.0,
            hard_gumbel: false,
            lambda_bayes: 100.0,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            epochs: 30,
            batch_size: 8,
            seed: 42,
            mc_samples: DEFAULT_MC_SAMPLES,
            augment: false,
            checkpoint_every: 5,
            hyperpriors: Hyperpriors::default(),
        }
    }
}

impl ModelConfig {
    pub fn for_version(version: Version) -> Self {
        Self {
            toggles: version.toggles(),
            ..Self::default()
        }
    }

    pub fn version(&self) -> Option<Version> {
        Version::from_toggles(self.toggles)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.height < 4 || self.width < 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return bad(format!(
                "image size {}x{} must be a positive multiple of 4",
                self.height, self.width
            ));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return bad("image size exceeds 65535".into());
        }
        if self.base_channels == 0 || self.flow_hidden == 0 || self.sde_steps == 0 {
            return bad("base_channels, flow_hidden and sde_steps must be >= 1".into());
        }
        if !(self.sde_horizon > 0.0) {
            return bad(format!("sde_horizon must be > 0, got {}", self.sde_horizon));
        }
        if !(self.tau > 0.0) || !(self.tau_final > 0.0) {
            return bad("tau and tau_final must be > 0".into());
        }
        if !(self.lambda_bayes >= 0.0) || !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lambda_bayes >= 0, learning_rate > 0, weight_decay >= 0 required".into());
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) || !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_at must be in [0, 1] and lr_decay_factor > 0".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return bad("epochs, batch_size and mc_samples must be >= 1".into());
        }
        self.hyperpriors
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Temperature used during `epoch` (0-based).
    pub fn tau_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tau;
        }
        let t = (epoch.min(self.epochs - 1)) as f64 / (self.epochs - 1) as f64;
        self.tau + (self.tau_final - self.tau) * t
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decay_epoch = (self.lr_decay_at * self.epochs as f64).round() as usize;
        if epoch >= decay_epoch && self.lr_decay_at < 1.0 {
            self.learning_rate * self.lr_decay_factor
        } else {
            self.learning_rate
        }
    }

    /// Fields that determine the parameter layout; a checkpoint must agree on all of them.
    pub fn architecture(&self) -> [(&'static str, usize); 7] {
        [
            ("nf_posterior", usize::from(self.toggles.nf_posterior)),
            ("num_classes", self.num_classes),
            ("height", self.height),
            ("width", self.width),
            ("base_channels", self.base_channels),
            ("flow_layers", self.flow_layers),
            ("flow_hidden", self.flow_hidden),
        ]
    }

    /// Errors on the first architecture field that differs from `other`.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<(), PipelineError> {
        for ((name, mine), (_, theirs)) in self.architecture().into_iter().zip(other.architecture()) {
            if mine != theirs {
                return Err(PipelineError::ConfigMismatch {
                    field: name,
                    expected: mine.to_string(),
                    found: theirs.to_string(),
                });
            }
        }
        Ok(())
    }
}
