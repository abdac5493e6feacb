//! Flow posterior: a stack of masked autoregressive affine layers with
//! order-reversing permutations in between.
//!
//! Vectors travel through the tape as columns of a `[dim, n]` matrix, so a
//! whole segmentation map (one class vector per pixel) is transformed in a
//! single pass with parameters shared across pixels.
//!
//! Each layer maps `u -> z` with `z_i = u_i * exp(a_i) + s_i`, where
//! `(s_i, a_i)` come from a one-hidden-layer conditioner that only sees the
//! coordinates ranked before `i` in the layer's ordering. The forward map is
//! one conditioner pass; the inverse needs `dim` passes.

use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffcore::{BoundParams, DiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Bound on |a_i|; applied smoothly as `LOG_SCALE_BOUND * tanh(raw / LOG_SCALE_BOUND)`.
pub const LOG_SCALE_BOUND: f64 = 7.0;

pub const DEFAULT_LAYERS: usize = 4;
pub const DEFAULT_HIDDEN: usize = 32;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("dimension mismatch: flow has dim {expected}, input has {found}")]
    Dim { expected: usize, found: usize },
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// One masked autoregressive layer. Parameter ids point into the owning stack's store.
#[derive(Debug, Clone, PartialEq)]
pub struct MafLayer {
    dim: usize,
    hidden: usize,
    ordering: Vec<usize>,
    mask_in: Vec<f64>,
    mask_out: Vec<f64>,
    /// `[hidden, dim]`
    pub w_in: ParamId,
    /// `[hidden, 1]`
    pub b_in: ParamId,
    /// `[2*dim, hidden]`; rows `0..dim` are shifts, rows `dim..2*dim` raw log-scales.
    pub w_out: ParamId,
    /// `[2*dim, 1]`
    pub b_out: ParamId,
}

impl MafLayer {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        ordering: Vec<usize>,
        rng: &mut Rng,
    ) -> Self {
        let mut rank = vec![0usize; dim];
        for (r, &i) in ordering.iter().enumerate() {
            rank[i] = r;
        }
        // Hidden unit h has degree 1..=max(dim-1,1); it may read input j iff
        // rank(j) < degree, and output i may read it iff degree <= rank(i).
        let degrees: Vec<usize> = (0..hidden).map(|h| h % (dim - 1).max(1) + 1).collect();
        let mut mask_in = vec![0.0; hidden * dim];
        for h in 0..hidden {
            for j in 0..dim {
                if rank[j] < degrees[h] {
                    mask_in[h * dim + j] = 1.0;
                }
            }
        }
        let mut mask_out = vec![0.0; 2 * dim * hidden];
        for i in 0..dim {
            for h in 0..hidden {
                if degrees[h] <= rank[i] {
                    mask_out[i * hidden + h] = 1.0;
                    mask_out[(dim + i) * hidden + h] = 1.0;
                }
            }
        }
        let std = (1.0 / dim as f64).sqrt();
        let w_in_vals = (0..hidden * dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w_in = store.add(
            format!("{prefix}.w_in"),
            Tensor::new(vec![hidden, dim], w_in_vals).expect("finite init"),
        );
        let b_in = store.add(format!("{prefix}.b_in"), Tensor::zeros(&[hidden, 1]));
        let w_out = store.add(format!("{prefix}.w_out"), Tensor::zeros(&[2 * dim, hidden]));
        let b_out = store.add(format!("{prefix}.b_out"), Tensor::zeros(&[2 * dim, 1]));
        Self {
            dim,
            hidden,
            ordering,
            mask_in,
            mask_out,
            w_in,
            b_in,
            w_out,
            b_out,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    /// Shift and bounded log-scale, each `[dim, n]`, for the columns of `u: [dim, n]`.
    fn conditioner(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        u: Var,
    ) -> Result<(Var, Var), DiffError> {
        let n = tape.shape(u)[1];
        let (d, hd) = (self.dim, self.hidden);
        let m_in = tape.constant(&[hd, d], self.mask_in.clone())?;
        let w_in = tape.mul(params.var(self.w_in), m_in)?;
        let pre = tape.matmul(w_in, u)?;
        let b_in = tape.broadcast(params.var(self.b_in), &[hd, n])?;
        let pre = tape.add(pre, b_in)?;
        let act = tape.tanh(pre)?;
        let m_out = tape.constant(&[2 * d, hd], self.mask_out.clone())?;
        let w_out = tape.mul(params.var(self.w_out), m_out)?;
        let out = tape.matmul(w_out, act)?;
        let b_out = tape.broadcast(params.var(self.b_out), &[2 * d, n])?;
        let out = tape.add(out, b_out)?;
        let shift = tape.slice(out, 0, 0, d)?;
        let raw = tape.slice(out, 0, d, d)?;
        let raw = tape.scale(raw, 1.0 / LOG_SCALE_BOUND)?;
        let bounded = tape.tanh(raw)?;
        let log_scale = tape.scale(bounded, LOG_SCALE_BOUND)?;
        Ok((shift, log_scale))
    }

    /// `u -> z`; the log-det is `[1, n]`, one entry per column.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        u: Var,
    ) -> Result<(Var, Var), DiffError> {
        let (shift, log_scale) = self.conditioner(tape, params, u)?;
        let scale = tape.exp(log_scale)?;
        let z = tape.mul(u, scale)?;
        let z = tape.add(z, shift)?;
        let logdet = tape.sum_axis(log_scale, 0)?;
        Ok((z, logdet))
    }

    /// `z -> u` by `dim` fixed-point sweeps; pass `k` fixes the coordinate of rank `k`.
    /// The log-det returned is that of the inverse map.
    pub fn inverse_tape(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        z: Var,
    ) -> Result<(Var, Var), DiffError> {
        let mut u = z;
        let mut last_log_scale = None;
        for _ in 0..self.dim {
            let (shift, log_scale) = self.conditioner(tape, params, u)?;
            let centered = tape.sub(z, shift)?;
            let neg = tape.neg(log_scale)?;
            let inv_scale = tape.exp(neg)?;
            u = tape.mul(centered, inv_scale)?;
            last_log_scale = Some(log_scale);
        }
        let log_scale = last_log_scale.expect("dim >= 1");
        let total = tape.sum_axis(log_scale, 0)?;
        let logdet = tape.neg(total)?;
        Ok((u, logdet))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowLayer {
    Maf(MafLayer),
    /// Reverses coordinate order; volume preserving.
    Reverse,
}

/// Composition of MAF layers, each followed by a reverse permutation, over a
/// standard-normal base of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    dim: usize,
    hidden: usize,
    layers: Vec<FlowLayer>,
    store: ParamStore,
}

/// Tape handles for a stack's parameters.
pub type BoundFlow = BoundParams;

impl FlowStack {
    /// `n_maf` layers with zero-initialised output weights, so the stack starts as the identity.
    pub fn new(dim: usize, n_maf: usize, hidden: usize, rng: &mut Rng) -> Result<Self, FlowError> {
        if dim == 0 || hidden == 0 {
            return Err(FlowError::Config(format!(
                "dim and hidden must be positive (dim={dim}, hidden={hidden})"
            )));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(2 * n_maf);
        for k in 0..n_maf {
            let maf = MafLayer::new(
                &mut store,
                &format!("flow.{k}"),
                dim,
                hidden,
                (0..dim).collect(),
                rng,
            );
            layers.push(FlowLayer::Maf(maf));
            layers.push(FlowLayer::Reverse);
        }
        Ok(Self {
            dim,
            hidden,
            layers,
            store,
        })
    }

    /// The empty composition (identity map).
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            hidden: DEFAULT_HIDDEN,
            layers: Vec::new(),
            store: ParamStore::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn num_maf(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, FlowLayer::Maf(_)))
            .count()
    }

    pub fn maf(&self, k: usize) -> Option<&MafLayer> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                FlowLayer::Maf(m) => Some(m),
                FlowLayer::Reverse => None,
            })
            .nth(k)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Fills every output weight and bias with N(0, scale^2) draws, leaving the identity start.
    pub fn perturb_outputs(&mut self, scale: f64, rng: &mut Rng) {
        let ids: Vec<ParamId> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                FlowLayer::Maf(m) => Some([m.w_out, m.b_out]),
                FlowLayer::Reverse => None,
            })
            .flatten()
            .collect();
        for id in ids {
            let t = self.store.get_mut(id);
            let vals: Vec<f64> = (0..t.numel())
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            t.assign(&vals).expect("same length");
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundFlow {
        self.store.bind(tape)
    }

    fn check_rows(&self, tape: &Tape, v: Var) -> Result<(), FlowError> {
        let shape = tape.shape(v);
        if shape.len() != 2 || shape[0] != self.dim {
            return Err(FlowError::Dim {
                expected: self.dim,
                found: shape.first().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    fn reverse_rows(&self, tape: &mut Tape, v: Var) -> Result<Var, DiffError> {
        if self.dim == 1 {
            return Ok(v);
        }
        let rows = (0..self.dim)
            .rev()
            .map(|i| tape.slice(v, 0, i, 1))
            .collect::<Result<Vec<_>, _>>()?;
        tape.concat(&rows, 0)
    }

    /// Pushes the columns of `u: [dim, n]` through every layer. Returns `z` and
    /// the total log-det `[1, n]`.
    pub fn push_tape(
        &self,
        tape: &mut Tape,
        params: &BoundFlow,
        u: Var,
    ) -> Result<(Var, Var), FlowError> {
        self.check_rows(tape, u)?;
        let n = tape.shape(u)[1];
        let mut z = u;
        let mut total = tape.constant(&[1, n], vec![0.0; n])?;
        for layer in &self.layers {
            match layer {
                FlowLayer::Maf(m) => {
                    let (next, ld) = m.forward_tape(tape, params, z)?;
                    z = next;
                    total = tape.add(total, ld)?;
                }
                FlowLayer::Reverse => z = self.reverse_rows(tape, z)?,
            }
        }
        Ok((z, total))
    }

    /// Inverse of [`push_tape`](Self::push_tape); the log-det `[1, n]` is that of the inverse map.
    pub fn pull_tape(
        &self,
        tape: &mut Tape,
        params: &BoundFlow,
        z: Var,
    ) -> Result<(Var, Var), FlowError> {
        self.check_rows(tape, z)?;
        let n = tape.shape(z)[1];
        let mut u = z;
        let mut total = tape.constant(&[1, n], vec![0.0; n])?;
        for layer in self.layers.iter().rev() {
            match layer {
                FlowLayer::Maf(m) => {
                    let (prev, ld) = m.inverse_tape(tape, params, u)?;
                    u = prev;
                    total = tape.add(total, ld)?;
                }
                FlowLayer::Reverse => u = self.reverse_rows(tape, u)?,
            }
        }
        Ok((u, total))
    }

    /// Standard-normal log-density of each column of `v: [dim, n]`, as `[1, n]`.
    pub fn base_log_density_tape(&self, tape: &mut Tape, v: Var) -> Result<Var, DiffError> {
        let sq = tape.square(v)?;
        let ss = tape.sum_axis(sq, 0)?;
        let half = tape.scale(ss, -0.5)?;
        tape.offset(half, -0.5 * self.dim as f64 * LN_2PI)
    }

    /// `log q(z)` per column: pull back to `u`, then base density plus the inverse log-det.
    pub fn log_density_tape(
        &self,
        tape: &mut Tape,
        params: &BoundFlow,
        z: Var,
    ) -> Result<Var, FlowError> {
        let (u, inv_logdet) = self.pull_tape(tape, params, z)?;
        let base = self.base_log_density_tape(tape, u)?;
        Ok(tape.add(base, inv_logdet)?)
    }

    fn column(&self, x: &[f64]) -> Result<(Tape, BoundFlow, Var), FlowError> {
        if x.len() != self.dim {
            return Err(FlowError::Dim {
                expected: self.dim,
                found: x.len(),
            });
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let v = tape.constant(&[self.dim, 1], x.to_vec())?;
        Ok((tape, params, v))
    }

    /// Single MAF layer `k` applied to one vector.
    pub fn maf_forward(&self, k: usize, u: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let layer = self
            .maf(k)
            .ok_or_else(|| FlowError::Config(format!("no MAF layer {k}")))?;
        let (mut tape, params, v) = self.column(u)?;
        let (z, ld) = layer.forward_tape(&mut tape, &params, v)?;
        Ok((tape.value(z).to_vec(), tape.scalar(ld)))
    }

    /// Inverse of MAF layer `k` on one vector; the log-det is that of the inverse.
    pub fn maf_inverse(&self, k: usize, z: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let layer = self
            .maf(k)
            .ok_or_else(|| FlowError::Config(format!("no MAF layer {k}")))?;
        let (mut tape, params, v) = self.column(z)?;
        let (u, ld) = layer.inverse_tape(&mut tape, &params, v)?;
        Ok((tape.value(u).to_vec(), tape.scalar(ld)))
    }

    /// Full forward composition on one vector.
    pub fn push(&self, u: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let (mut tape, params, v) = self.column(u)?;
        let (z, ld) = self.push_tape(&mut tape, &params, v)?;
        Ok((tape.value(z).to_vec(), tape.scalar(ld)))
    }

    /// Full inverse composition on one vector.
    pub fn pull(&self, z: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let (mut tape, params, v) = self.column(z)?;
        let (u, ld) = self.pull_tape(&mut tape, &params, v)?;
        Ok((tape.value(u).to_vec(), tape.scalar(ld)))
    }

    /// `log q(z)` under the flow.
    pub fn log_density(&self, z: &[f64]) -> Result<f64, FlowError> {
        let (mut tape, params, v) = self.column(z)?;
        let ld = self.log_density_tape(&mut tape, &params, v)?;
        Ok(tape.scalar(ld))
    }

    /// `n` draws pushed from the base; returns row-major `[n, dim]` samples and their log-densities.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
        if n == 0 {
            return Err(FlowError::Config("sample count must be >= 1".into()));
        }
        let d = self.dim;
        let mut cols = vec![0.0; d * n];
        // draw sample-major so a prefix of draws does not depend on n
        for j in 0..n {
            for i in 0..d {
                cols[i * n + j] = rng.sample(StandardNormal);
            }
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let u = tape.constant(&[d, n], cols)?;
        let (z, logdet) = self.push_tape(&mut tape, &params, u)?;
        let base = self.base_log_density_tape(&mut tape, u)?;
        let logq = tape.sub(base, logdet)?;
        let zv = tape.value(z);
        let mut samples = vec![0.0; n * d];
        for j in 0..n {
            for i in 0..d {
                samples[j * d + i] = zv[i * n + j];
            }
        }
        Ok((samples, tape.value(logq).to_vec()))
    }
}

/// Standard-normal log-density of a vector.
pub fn standard_normal_log_density(v: &[f64]) -> f64 {
    -0.5 * v.len() as f64 * LN_2PI - 0.5 * v.iter().map(|x| x * x).sum::<f64>()
}
