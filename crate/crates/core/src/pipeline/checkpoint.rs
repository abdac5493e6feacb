//! Binary checkpoint format: magic, version, config block, training state,
//! named f64 tensors (parameters and optimiser moments) and a trailing CRC32.

use std::path::Path;

use crate::ncvi::Hyperpriors;

use super::config::{ModelConfig, Toggles};
use super::net::Model;
use super::train::Adam;
use super::PipelineError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DBFC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Training progress stored next to the parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub best_dice: f64,
    /// 1-based; 0 when no epoch has been evaluated.
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<Adam>,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        self.u16(name.len() as u16);
        self.0.extend_from_slice(name.as_bytes());
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d as u32);
        }
        for &v in values {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(PipelineError::Truncated {
                expected: end,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, PipelineError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, PipelineError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, PipelineError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, PipelineError> {
        Ok(self.u32()? as usize)
    }
    fn bool(&mut self) -> Result<bool, PipelineError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(PipelineError::Corrupt(format!("invalid boolean byte {b}"))),
        }
    }
    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), PipelineError> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| PipelineError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.usize()?);
        }
        let numel: usize = shape.iter().product();
        let bytes = self.take(numel.checked_mul(8).ok_or_else(|| {
            PipelineError::Corrupt(format!("tensor {name} is too large"))
        })?)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, values))
    }
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    w.u8(c.num_classes as u8);
    w.u16(c.height as u16);
    w.u16(c.width as u16);
    w.u8(c.toggles.bits());
    w.u32(c.base_channels as u32);
    w.u32(c.flow_layers as u32);
    w.u32(c.flow_hidden as u32);
    w.u32(c.sde_steps as u32);
    w.f64(c.sde_horizon);
    w.f64(c.tau);
    w.f64(c.tau_final);
    w.u8(u8::from(c.hard_gumbel));
    w.f64(c.lambda_bayes);
    w.f64(c.learning_rate);
    w.f64(c.weight_decay);
    w.f64(c.lr_decay_at);
    w.f64(c.lr_decay_factor);
    w.u32(c.epochs as u32);
    w.u32(c.batch_size as u32);
    w.u64(c.seed);
    w.u32(c.mc_samples as u32);
    w.u8(u8::from(c.augment));
    let h = &c.hyperpriors;
    for v in [
        h.mu0, h.sigma0, h.phi_rho, h.gamma_rho, h.phi_upsilon, h.gamma_upsilon, h.phi_omega, h.gamma_omega,
        h.alpha_pi0, h.beta_pi0,
    ] {
        w.f64(v);
    }
    w.u32(c.checkpoint_every as u32);
}

fn read_config(r: &mut Reader<'_>) -> Result<ModelConfig, PipelineError> {
    let num_classes = r.u8()? as usize;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let bits = r.u8()?;
    let toggles =
        Toggles::from_bits(bits).ok_or_else(|| PipelineError::Corrupt(format!("invalid toggle bits {bits}")))?;
    let base_channels = r.usize()?;
    let flow_layers = r.usize()?;
    let flow_hidden = r.usize()?;
    let sde_steps = r.usize()?;
    let sde_horizon = r.f64()?;
    let tau = r.f64()?;
    let tau_final = r.f64()?;
    let hard_gumbel = r.bool()?;
    let lambda_bayes = r.f64()?;
    let learning_rate = r.f64()?;
    let weight_decay = r.f64()?;
    let lr_decay_at = r.f64()?;
    let lr_decay_factor = r.f64()?;
    let epochs = r.usize()?;
    let batch_size = r.usize()?;
    let seed = r.u64()?;
    let mc_samples = r.usize()?;
    let augment = r.bool()?;
    let mut h = [0.0; 10];
    for v in &mut h {
        *v = r.f64()?;
    }
    let hyperpriors = Hyperpriors {
        mu0: h[0],
        sigma0: h[1],
        phi_rho: h[2],
        gamma_rho: h[3],
        phi_upsilon: h[4],
        gamma_upsilon: h[5],
        phi_omega: h[6],
        gamma_omega: h[7],
        alpha_pi0: h[8],
        beta_pi0: h[9],
    };
    let checkpoint_every = r.usize()?;
    let cfg = ModelConfig {
        num_classes,
        height,
        width,
        toggles,
        base_channels,
        flow_layers,
        flow_hidden,
        sde_steps,
        sde_horizon,
        tau,
        tau_final,
        hard_gumbel,
        lambda_bayes,
        learning_rate,
        weight_decay,
        lr_decay_at,
        lr_decay_factor,
        epochs,
        batch_size,
        seed,
        mc_samples,
        augment,
        checkpoint_every,
        hyperpriors,
    };
    cfg.validate()
        .map_err(|e| PipelineError::Corrupt(format!("stored configuration is invalid: {e}")))?;
    Ok(cfg)
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    write_config(&mut w, &ckpt.model.config);
    let s = &ckpt.state;
    w.u32(s.epochs_done as u32);
    w.u64(ckpt.adam.as_ref().map_or(0, |a| a.step));
    w.f64(s.best_dice);
    w.u32(s.best_epoch as u32);

    let params = ckpt.model.named_params();
    let sections = params.len() * if ckpt.adam.is_some() { 3 } else { 1 };
    w.u32(sections as u32);
    for (name, t) in &params {
        w.tensor(name, t.shape(), t.values());
    }
    if let Some(adam) = &ckpt.adam {
        for (prefix, moments) in [("adam.m/", &adam.m), ("adam.v/", &adam.v)] {
            for ((name, t), m) in params.iter().zip(moments) {
                w.tensor(&format!("{prefix}{name}"), t.shape(), m);
            }
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, PipelineError> {
    if bytes.len() < 4 + 2 + 4 {
        return Err(PipelineError::Truncated {
            expected: 10,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(PipelineError::Magic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(PipelineError::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    let mut r = Reader { buf: body, pos: 6 };
    if stored != computed {
        // A short file usually fails the checksum; report it as truncation when the
        // body cannot even be parsed.
        let parsed = read_config(&mut r).and_then(|_| r.take(24).map(|_| ()));
        return Err(match parsed {
            Err(e @ PipelineError::Truncated { .. }) => e,
            _ => PipelineError::Checksum { stored, computed },
        });
    }

    let config = read_config(&mut r)?;
    let epochs_done = r.usize()?;
    let adam_step = r.u64()?;
    let best_dice = r.f64()?;
    let best_epoch = r.usize()?;
    let mut model = Model::new(&config)?;

    let names: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let sections = r.u32()? as usize;
    let has_adam = if sections == names.len() {
        false
    } else if sections == 3 * names.len() {
        true
    } else {
        return Err(PipelineError::Corrupt(format!(
            "{sections} tensor sections for a model with {} parameters",
            names.len()
        )));
    };

    let mut read_block = |prefix: &str| -> Result<Vec<Vec<f64>>, PipelineError> {
        let mut out = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            let (n, s, v) = r.tensor()?;
            let want = format!("{prefix}{name}");
            if n != want {
                return Err(PipelineError::Corrupt(format!("expected tensor {want}, found {n}")));
            }
            if &s != shape {
                return Err(PipelineError::Corrupt(format!(
                    "tensor {n} has shape {s:?}, model expects {shape:?}"
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(PipelineError::Corrupt(format!("tensor {n} contains non-finite values")));
            }
            out.push(v);
        }
        Ok(out)
    };
    let values = read_block("")?;
    let adam = if has_adam {
        let m = read_block("adam.m/")?;
        let v = read_block("adam.v/")?;
        let mut adam = Adam::new(&model);
        adam.step = adam_step;
        adam.m = m;
        adam.v = v;
        Some(adam)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(PipelineError::Corrupt(format!(
            "{} trailing bytes after the last tensor",
            body.len() - r.pos
        )));
    }
    for (t, v) in model.params_mut().into_iter().zip(values) {
        t.assign(&v).map_err(|e| PipelineError::Corrupt(e.to_string()))?;
    }
    Ok(Checkpoint {
        model,
        adam,
        state: TrainState {
            epochs_done,
            best_dice,
            best_epoch,
        },
    })
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    };
    // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, checkpoint_to_bytes(ckpt)).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint, PipelineError> {
    let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            base_channels: 2,
            flow_hidden: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_with_and_without_adam() {
        let model = Model::new(&small()).unwrap();
        let mut adam = Adam::new(&model);
        adam.step = 7;
        adam.m[0][0] = 0.5;
        let state = TrainState {
            epochs_done: 3,
            best_dice: 0.8,
            best_epoch: 2,
        };
        let ckpt = Checkpoint {
            model: model.clone(),
            adam: Some(adam.clone()),
            state,
        };
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&ckpt)).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.adam, Some(adam));
        assert_eq!(back.state, state);

        let bare = Checkpoint { adam: None, ..ckpt };
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&bare)).unwrap();
        assert!(back.adam.is_none());
    }

    #[test]
    fn corruption_is_detected() {
        let ckpt = Checkpoint {
            model: Model::new(&small()).unwrap(),
            adam: None,
            state: TrainState::default(),
        };
        let bytes = checkpoint_to_bytes(&ckpt);
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(checkpoint_from_bytes(&flipped), Err(PipelineError::Checksum { .. })));
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..20]),
            Err(PipelineError::Truncated { .. })
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&magic), Err(PipelineError::Magic { .. })));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(checkpoint_from_bytes(&ver), Err(PipelineError::Version { found: 9, .. })));
    }
}
