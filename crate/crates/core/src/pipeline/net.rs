//! Small convolutional stand-ins for the appearance/shape encoders and the
//! segmentation U-net. All activations are `tanh`.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffcore::{BoundParams, DiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::flows::{BoundFlow, FlowStack};
use crate::rng::{stream, Rng};

use super::{ModelConfig, PipelineError};

/// Bound on the log-variance heads, applied smoothly as `B * tanh(raw / B)`.
pub const LOG_VAR_BOUND: f64 = 10.0;
/// Initial bias of the log-variance heads.
const LOG_VAR_INIT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    c_out: usize,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, gain: f64, bias: f64, rng: &mut Rng) -> Self {
        let std = gain / ((9 * c_in) as f64).sqrt();
        let vals = (0..c_out * c_in * 9)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let kernel = store.add(
            format!("{name}.kernel"),
            Tensor::new(vec![c_out, c_in, 3, 3], vals).expect("finite init"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::full(&[c_out, 1, 1], bias));
        Self { kernel, bias, c_out }
    }

    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var, DiffError> {
        let y = tape.conv2d(x, p.var(self.kernel))?;
        let shape = [self.c_out, tape.shape(y)[1], tape.shape(y)[2]];
        let b = tape.broadcast(p.var(self.bias), &shape)?;
        tape.add(y, b)
    }

    fn apply_tanh(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var, DiffError> {
        let y = self.apply(tape, p, x)?;
        tape.tanh(y)
    }
}

fn clamp_log_var(tape: &mut Tape, raw: Var) -> Result<Var, DiffError> {
    let s = tape.scale(raw, 1.0 / LOG_VAR_BOUND)?;
    let t = tape.tanh(s)?;
    tape.scale(t, LOG_VAR_BOUND)
}

/// Gaussian head outputs: mean and clamped log-variance.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub mu: Var,
    pub log_var: Var,
}

/// Stem convolution, two residual blocks, and mean / log-variance heads with one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ResEncoder {
    stem: ConvLayer,
    blocks: [(ConvLayer, ConvLayer); 2],
    mu_head: ConvLayer,
    log_var_head: ConvLayer,
}

impl ResEncoder {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut Rng) -> Self {
        let stem = ConvLayer::new(store, &format!("{name}.stem"), 1, c, 1.0, 0.0, rng);
        let block = |store: &mut ParamStore, i: usize, rng: &mut Rng| {
            (
                ConvLayer::new(store, &format!("{name}.block{i}.a"), c, c, 1.0, 0.0, rng),
                ConvLayer::new(store, &format!("{name}.block{i}.b"), c, c, 0.5, 0.0, rng),
            )
        };
        let blocks = [block(store, 0, rng), block(store, 1, rng)];
        let mu_head = ConvLayer::new(store, &format!("{name}.mu"), c, 1, 1.0, 0.0, rng);
        let log_var_head = ConvLayer::new(store, &format!("{name}.log_var"), c, 1, 0.1, LOG_VAR_INIT, rng);
        Self {
            stem,
            blocks,
            mu_head,
            log_var_head,
        }
    }

    /// `image: [1, H, W]` -> heads `[1, H, W]`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, image: Var) -> Result<Heads, DiffError> {
        let mut h = self.stem.apply_tanh(tape, p, image)?;
        for (a, b) in &self.blocks {
            let inner = a.apply_tanh(tape, p, h)?;
            let inner = b.apply(tape, p, inner)?;
            let sum = tape.add(h, inner)?;
            h = tape.tanh(sum)?;
        }
        let mu = self.mu_head.apply(tape, p, h)?;
        let raw = self.log_var_head.apply(tape, p, h)?;
        let log_var = clamp_log_var(tape, raw)?;
        Ok(Heads { mu, log_var })
    }
}

/// 2x2 average pooling of `[C, H, W]`.
pub fn avg_pool2(tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
    let (c, h, w) = match *tape.shape(x) {
        [c, h, w] => (c, h, w),
        ref s => return Err(DiffError::InvalidShape(s.to_vec())),
    };
    let r = tape.reshape(x, &[c, h / 2, 2, w / 2, 2])?;
    let r = tape.sum_axis(r, 4)?;
    let r = tape.sum_axis(r, 2)?;
    let r = tape.reshape(r, &[c, h / 2, w / 2])?;
    tape.scale(r, 0.25)
}

/// Nearest-neighbour 2x upsampling of `[C, H, W]`.
pub fn upsample2(tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
    let (c, h, w) = match *tape.shape(x) {
        [c, h, w] => (c, h, w),
        ref s => return Err(DiffError::InvalidShape(s.to_vec())),
    };
    let r = tape.reshape(x, &[c, h, 1, w, 1])?;
    let r = tape.broadcast(r, &[c, h, 2, w, 2])?;
    tape.reshape(r, &[c, 2 * h, 2 * w])
}

/// Three-level U-net with skip connections: widths `c, 2c, 4c`.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    enc: [(ConvLayer, ConvLayer); 3],
    dec: [(ConvLayer, ConvLayer); 2],
    mu_head: ConvLayer,
    log_var_head: ConvLayer,
}

impl UNet {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c: usize, k: usize, rng: &mut Rng) -> Self {
        let mut pair = |tag: &str, a_in: usize, width: usize, rng: &mut Rng| {
            (
                ConvLayer::new(store, &format!("{name}.{tag}.a"), a_in, width, 1.0, 0.0, rng),
                ConvLayer::new(store, &format!("{name}.{tag}.b"), width, width, 1.0, 0.0, rng),
            )
        };
        let enc = [
            pair("enc0", c_in, c, rng),
            pair("enc1", c, 2 * c, rng),
            pair("enc2", 2 * c, 4 * c, rng),
        ];
        let dec = [pair("dec1", 6 * c, 2 * c, rng), pair("dec0", 3 * c, c, rng)];
        let mu_head = ConvLayer::new(store, &format!("{name}.mu"), c, k, 1.0, 0.0, rng);
        let log_var_head = ConvLayer::new(store, &format!("{name}.log_var"), c, k, 0.1, LOG_VAR_INIT, rng);
        Self {
            enc,
            dec,
            mu_head,
            log_var_head,
        }
    }

    fn pair(tape: &mut Tape, p: &BoundParams, layers: &(ConvLayer, ConvLayer), x: Var) -> Result<Var, DiffError> {
        let h = layers.0.apply_tanh(tape, p, x)?;
        layers.1.apply_tanh(tape, p, h)
    }

    /// `x: [c_in, H, W]` -> heads `[K, H, W]`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Heads, DiffError> {
        let e0 = Self::pair(tape, p, &self.enc[0], x)?;
        let p0 = avg_pool2(tape, e0)?;
        let e1 = Self::pair(tape, p, &self.enc[1], p0)?;
        let p1 = avg_pool2(tape, e1)?;
        let bottom = Self::pair(tape, p, &self.enc[2], p1)?;
        let u1 = upsample2(tape, bottom)?;
        let cat1 = tape.concat(&[u1, e1], 0)?;
        let d1 = Self::pair(tape, p, &self.dec[0], cat1)?;
        let u0 = upsample2(tape, d1)?;
        let cat0 = tape.concat(&[u0, e0], 0)?;
        let d0 = Self::pair(tape, p, &self.dec[1], cat0)?;
        let mu = self.mu_head.apply(tape, p, d0)?;
        let raw = self.log_var_head.apply(tape, p, d0)?;
        let log_var = clamp_log_var(tape, raw)?;
        Ok(Heads { mu, log_var })
    }
}

/// Trainable parameter groups, for gradient-flow checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Appearance,
    Shape,
    Segmentation,
    Flow,
}

/// All trainable state of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    store: ParamStore,
    appearance: ResEncoder,
    shape: ResEncoder,
    segmentation: UNet,
    flow: FlowStack,
}

/// Tape handles of a [`Model`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub net: BoundParams,
    pub flow: BoundFlow,
}

/// Input channels of the segmentation net (the shape latent is tiled to this many).
pub const SEG_INPUT_CHANNELS: usize = 3;

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut rng = stream(config.seed, &[0x1417]);
        let c = config.base_channels;
        let mut store = ParamStore::new();
        let appearance = ResEncoder::new(&mut store, "appearance", c, &mut rng);
        let shape = ResEncoder::new(&mut store, "shape", c, &mut rng);
        let segmentation = UNet::new(
            &mut store,
            "segmentation",
            SEG_INPUT_CHANNELS,
            c,
            config.num_classes,
            &mut rng,
        );
        let flow = if config.toggles.nf_posterior {
            FlowStack::new(config.num_classes, config.flow_layers, config.flow_hidden, &mut rng)?
        } else {
            FlowStack::new(config.num_classes, 0, config.flow_hidden, &mut rng)?
        };
        Ok(Self {
            config: config.clone(),
            store,
            appearance,
            shape,
            segmentation,
            flow,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn flow(&self) -> &FlowStack {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut FlowStack {
        &mut self.flow
    }

    pub fn appearance(&self) -> &ResEncoder {
        &self.appearance
    }

    pub fn shape_encoder(&self) -> &ResEncoder {
        &self.shape
    }

    pub fn segmentation(&self) -> &UNet {
        &self.segmentation
    }

    pub fn num_params(&self) -> usize {
        self.store.numel() + self.flow.store().numel()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            net: self.store.bind(tape),
            flow: self.flow.bind(tape),
        }
    }

    /// Group of a network parameter by its name prefix.
    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("appearance") {
            ParamGroup::Appearance
        } else if name.starts_with("shape") {
            ParamGroup::Shape
        } else if name.starts_with("segmentation") {
            ParamGroup::Segmentation
        } else {
            ParamGroup::Flow
        }
    }

    /// `(name, tensor)` of every parameter: network first, then flow.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.store
            .iter()
            .chain(self.flow.store().iter())
            .map(|(n, t)| (n.to_string(), t))
            .collect()
    }

    /// Mutable access to every parameter in [`named_params`](Self::named_params) order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.store
            .tensors_mut()
            .chain(self.flow.store_mut().tensors_mut())
            .collect()
    }
}
