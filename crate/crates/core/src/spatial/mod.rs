//! Spatial priors on class-stacked 2-D fields: the 5-point Laplacian,
//! forward-difference squared gradient norm, Gumbel-Softmax relaxation, and
//! the Dice + cross-entropy segmentation loss.

use rand::Rng as _;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::rng::Rng;

/// Smoothing constant of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;
/// Floor applied to probabilities before taking logs in the CE term.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("field {height}x{width} is too small (need at least {min}x{min})")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("field dimensions must be positive ({classes}x{height}x{width})")]
    EmptyField {
        classes: usize,
        height: usize,
        width: usize,
    },
    #[error("expected {expected} values, got {found}")]
    Length { expected: usize, found: usize },
    #[error("non-finite field value")]
    NonFinite,
    #[error("temperature must be > 0 (got {0})")]
    Temperature(f64),
    #[error("fields differ in shape: {0:?} vs {1:?}")]
    Mismatch([usize; 3], [usize; 3]),
    #[error("N must be >= 1")]
    NoElements,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// `K` stacked `H x W` channels, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    classes: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Field2D {
    pub fn new(classes: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self, SpatialError> {
        if classes == 0 || height == 0 || width == 0 {
            return Err(SpatialError::EmptyField {
                classes,
                height,
                width,
            });
        }
        let expected = classes * height * width;
        if values.len() != expected {
            return Err(SpatialError::Length {
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpatialError::NonFinite);
        }
        Ok(Self {
            classes,
            height,
            width,
            values,
        })
    }

    pub fn zeros(classes: usize, height: usize, width: usize) -> Result<Self, SpatialError> {
        Self::new(classes, height, width, vec![0.0; classes * height * width])
    }

    pub fn from_fn(
        classes: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, SpatialError> {
        let mut values = Vec::with_capacity(classes * height * width);
        for k in 0..classes {
            for i in 0..height {
                for j in 0..width {
                    values.push(f(k, i, j));
                }
            }
        }
        Self::new(classes, height, width, values)
    }

    /// One-hot encoding of a label map.
    pub fn one_hot(labels: &[u8], classes: usize, height: usize, width: usize) -> Result<Self, SpatialError> {
        if labels.len() != height * width {
            return Err(SpatialError::Length {
                expected: height * width,
                found: labels.len(),
            });
        }
        Self::from_fn(classes, height, width, |k, i, j| {
            f64::from(usize::from(labels[i * width + j]) == k)
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, SpatialError> {
        match *t.shape() {
            [k, h, w] => Self::new(k, h, w, t.values().to_vec()),
            _ => Err(SpatialError::Length {
                expected: 3,
                found: t.shape().len(),
            }),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims().to_vec(), self.values.clone()).expect("validated field")
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.classes, self.height, self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.values[(k * self.height + i) * self.width + j]
    }

    /// Per-pixel argmax over classes (first maximum wins).
    pub fn argmax(&self) -> Vec<u8> {
        let p = self.height * self.width;
        (0..p)
            .map(|px| {
                let mut best = 0;
                for k in 1..self.classes {
                    if self.values[k * p + px] > self.values[best * p + px] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// 5-point Laplacian per channel with zero padding.
pub fn laplacian(field: &Field2D) -> Result<Field2D, SpatialError> {
    let (h, w) = (field.height, field.width);
    if h < 3 || w < 3 {
        return Err(SpatialError::TooSmall {
            height: h,
            width: w,
            min: 3,
        });
    }
    let at = |k: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            field.get(k, i as usize, j as usize)
        }
    };
    Field2D::from_fn(field.classes, h, w, |k, i, j| {
        let (i, j) = (i as isize, j as isize);
        at(k, i - 1, j) + at(k, i + 1, j) + at(k, i, j - 1) + at(k, i, j + 1) - 4.0 * at(k, i, j)
    })
}

/// Kernel `[K, K, 3, 3]` applying the 5-point stencil to each channel independently.
pub fn laplacian_kernel(classes: usize) -> Tensor {
    let mut vals = vec![0.0; classes * classes * 9];
    for k in 0..classes {
        let base = (k * classes + k) * 9;
        vals[base + 1] = 1.0;
        vals[base + 3] = 1.0;
        vals[base + 4] = -4.0;
        vals[base + 5] = 1.0;
        vals[base + 7] = 1.0;
    }
    Tensor::new(vec![classes, classes, 3, 3], vals).expect("finite kernel")
}

/// Squared forward-difference gradient norm; the last row/column repeats the edge, so its difference is 0.
pub fn grad_sqnorm(field: &Field2D) -> Result<Field2D, SpatialError> {
    let (h, w) = (field.height, field.width);
    if h < 2 || w < 2 {
        return Err(SpatialError::TooSmall {
            height: h,
            width: w,
            min: 2,
        });
    }
    Field2D::from_fn(field.classes, h, w, |k, i, j| {
        let f = field.get(k, i, j);
        let dx = if j + 1 < w { field.get(k, i, j + 1) - f } else { 0.0 };
        let dy = if i + 1 < h { field.get(k, i + 1, j) - f } else { 0.0 };
        dx * dx + dy * dy
    })
}

/// [`grad_sqnorm`] on a `[C, H, W]` var.
pub fn grad_sqnorm_tape(tape: &mut Tape, field: Var) -> Result<Var, SpatialError> {
    let (c, h, w) = match *tape.shape(field) {
        [c, h, w] => (c, h, w),
        ref other => {
            return Err(SpatialError::Length {
                expected: 3,
                found: other.len(),
            })
        }
    };
    if h < 2 || w < 2 {
        return Err(SpatialError::TooSmall {
            height: h,
            width: w,
            min: 2,
        });
    }
    let dir = |tape: &mut Tape, axis: usize, n: usize, pad_shape: [usize; 3]| -> Result<Var, DiffError> {
        let hi = tape.slice(field, axis, 1, n - 1)?;
        let lo = tape.slice(field, axis, 0, n - 1)?;
        let d = tape.sub(hi, lo)?;
        let d2 = tape.square(d)?;
        let pad = tape.constant(&pad_shape, vec![0.0; pad_shape.iter().product()])?;
        tape.concat(&[d2, pad], axis)
    };
    let gx = dir(tape, 2, w, [c, h, 1])?;
    let gy = dir(tape, 1, h, [c, 1, w])?;
    Ok(tape.add(gx, gy)?)
}

fn standard_gumbel(rng: &mut Rng) -> f64 {
    // u in (0, 1]: 1 - [0, 1)
    let u: f64 = 1.0 - rng.random::<f64>();
    -(-(u.max(f64::MIN_POSITIVE)).ln()).ln()
}

/// Gumbel noise for a `[K, P]` logit block.
pub fn gumbel_noise(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| standard_gumbel(rng)).collect()
}

/// Per-pixel relaxed categorical sample. `hard` replaces the values with the
/// argmax one-hot.
pub fn gumbel_softmax(logits: &Field2D, tau: f64, rng: &mut Rng, hard: bool) -> Result<Field2D, SpatialError> {
    let [k, h, w] = logits.dims();
    let mut tape = Tape::new();
    let x = tape.constant(&[k, h * w], logits.values.clone())?;
    let y = gumbel_softmax_tape(&mut tape, x, tau, rng, hard)?;
    Field2D::new(k, h, w, tape.value(y).to_vec())
}

/// Differentiable Gumbel-Softmax over axis 0 of `[K, P]` logits. In hard mode
/// the forward value is exactly one-hot and gradients follow the soft sample.
pub fn gumbel_softmax_tape(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    rng: &mut Rng,
    hard: bool,
) -> Result<Var, SpatialError> {
    let n = tape.value(logits).len();
    gumbel_softmax_with_noise(tape, logits, tau, gumbel_noise(n, rng), hard)
}

/// [`gumbel_softmax_tape`] with caller-supplied Gumbel draws (one per logit).
pub fn gumbel_softmax_with_noise(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    noise: Vec<f64>,
    hard: bool,
) -> Result<Var, SpatialError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SpatialError::Temperature(tau));
    }
    let shape = tape.shape(logits).to_vec();
    let n = tape.value(logits).len();
    if noise.len() != n {
        return Err(SpatialError::Length {
            expected: n,
            found: noise.len(),
        });
    }
    let g = tape.constant(&shape, noise)?;
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    let soft = tape.softmax(scaled, 0)?;
    if !hard {
        return Ok(soft);
    }
    let k = shape[0];
    let p = n / k;
    let vals = tape.value(soft);
    let mut onehot = vec![0.0; n];
    for px in 0..p {
        let mut best = 0;
        for c in 1..k {
            if vals[c * p + px] > vals[best * p + px] {
                best = c;
            }
        }
        onehot[best * p + px] = 1.0;
    }
    let hard_v = tape.constant(&shape, onehot)?;
    let frozen = tape.detach(soft);
    // soft - detach(soft) is exactly zero in value but carries the soft gradient
    let st = tape.sub(soft, frozen)?;
    Ok(tape.add(hard_v, st)?)
}

/// Per-term breakdown of the segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceCe {
    pub ce: f64,
    pub dice: f64,
}

impl DiceCe {
    pub fn total(&self) -> f64 {
        self.ce + self.dice
    }
}

/// Cross-entropy plus soft Dice loss of probabilities against a one-hot target.
pub fn dice_ce_loss(pred: &Field2D, target: &Field2D) -> Result<DiceCe, SpatialError> {
    if pred.dims() != target.dims() {
        return Err(SpatialError::Mismatch(pred.dims(), target.dims()));
    }
    let [k, h, w] = pred.dims();
    let mut tape = Tape::new();
    let p = tape.constant(&[k, h * w], pred.values.clone())?;
    let t = tape.constant(&[k, h * w], target.values.clone())?;
    let (ce, dice) = dice_ce_tape(&mut tape, p, t)?;
    Ok(DiceCe {
        ce: tape.scalar(ce),
        dice: tape.scalar(dice),
    })
}

/// `(CE, Dice)` as one-element vars for `[K, P]` probabilities and targets.
pub fn dice_ce_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<(Var, Var), SpatialError> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || tape.shape(target) != shape.as_slice() {
        return Err(SpatialError::Diff(DiffError::ShapeMismatch {
            op: "dice_ce",
            left: shape,
            right: tape.shape(target).to_vec(),
        }));
    }
    let (k, p) = (shape[0], shape[1]);
    let n = k * p;

    // log(max(pred, floor)) without leaving the op set: stack with the floor, take the max
    let flat = tape.reshape(pred, &[1, n])?;
    let floor = tape.constant(&[1, n], vec![LOG_FLOOR; n])?;
    let stacked = tape.concat(&[flat, floor], 0)?;
    let clamped = tape.max(stacked, 0)?;
    let clamped = tape.reshape(clamped, &[k, p])?;
    let logp = tape.log(clamped)?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked)?;
    let ce = tape.scale(total, -1.0 / p as f64)?;

    let inter = tape.mul(pred, target)?;
    let inter = tape.sum_axis(inter, 1)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.offset(num, DICE_EPS)?;
    let sp = tape.sum_axis(pred, 1)?;
    let st = tape.sum_axis(target, 1)?;
    let den = tape.add(sp, st)?;
    let den = tape.offset(den, DICE_EPS)?;
    let ratio = tape.div(num, den)?;
    let mean_ratio = tape.mean(ratio)?;
    let neg = tape.neg(mean_ratio)?;
    let dice = tape.offset(neg, 1.0)?;
    Ok((ce, dice))
}

/// `dice_ce + lambda (KL_y + KL_z + KL_x + KL_m) / N`.
pub fn total_loss(
    dice_ce: f64,
    kl_y: f64,
    kl_z: f64,
    kl_x: f64,
    kl_m: f64,
    lambda_bayes: f64,
    n: usize,
) -> Result<f64, SpatialError> {
    if n == 0 {
        return Err(SpatialError::NoElements);
    }
    Ok(dice_ce + lambda_bayes * (kl_y + kl_z + kl_x + kl_m) / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn laplacian_of_impulse() {
        let f = Field2D::from_fn(1, 3, 3, |_, i, j| f64::from(i == 1 && j == 1)).unwrap();
        let l = laplacian(&f).unwrap();
        assert_eq!(l.get(0, 1, 1), -4.0);
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            assert_eq!(l.get(0, i, j), 1.0);
        }
        assert_eq!(l.get(0, 0, 0), 0.0);
        assert!(laplacian(&Field2D::zeros(1, 2, 5).unwrap()).is_err());
    }

    #[test]
    fn laplacian_of_ramp_is_zero_inside() {
        let f = Field2D::from_fn(2, 6, 5, |_, i, _| i as f64).unwrap();
        let l = laplacian(&f).unwrap();
        for i in 1..5 {
            for j in 1..4 {
                assert_eq!(l.get(1, i, j), 0.0);
            }
        }
    }

    #[test]
    fn laplacian_kernel_matches_direct() {
        let mut rng = seeded(3);
        let f = Field2D::from_fn(2, 5, 4, |_, _, _| rng.random::<f64>()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&f.to_tensor());
        let k = tape.leaf(&laplacian_kernel(2));
        let y = tape.conv2d(x, k).unwrap();
        for (a, b) in tape.value(y).iter().zip(laplacian(&f).unwrap().values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_sqnorm_ramp() {
        let f = Field2D::from_fn(1, 4, 4, |_, _, j| 2.0 * j as f64).unwrap();
        let g = grad_sqnorm(&f).unwrap();
        assert_eq!(g.get(0, 1, 1), 4.0);
        assert_eq!(g.get(0, 1, 3), 0.0);
    }

    #[test]
    fn grad_sqnorm_tape_matches_plain() {
        let mut rng = seeded(4);
        let f = Field2D::from_fn(2, 4, 5, |_, _, _| rng.random::<f64>()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&f.to_tensor());
        let g = grad_sqnorm_tape(&mut tape, x).unwrap();
        assert_eq!(tape.value(g), grad_sqnorm(&f).unwrap().values());
    }

    #[test]
    fn gumbel_rejects_bad_tau() {
        let f = Field2D::zeros(2, 2, 2).unwrap();
        assert!(gumbel_softmax(&f, 0.0, &mut seeded(0), false).is_err());
        assert!(gumbel_softmax(&f, -1.0, &mut seeded(0), false).is_err());
    }

    #[test]
    fn hard_gumbel_is_exact_one_hot() {
        let mut rng = seeded(9);
        let f = Field2D::from_fn(3, 4, 4, |_, _, _| rng.random::<f64>()).unwrap();
        let y = gumbel_softmax(&f, 0.7, &mut seeded(1), true).unwrap();
        for px in 0..16 {
            let col: Vec<f64> = (0..3).map(|k| y.values()[k * 16 + px]).collect();
            assert_eq!(col.iter().sum::<f64>(), 1.0);
            assert!(col.iter().all(|v| *v == 0.0 || *v == 1.0));
        }
    }

    #[test]
    fn dice_ce_spot_values() {
        let labels = [0u8, 1, 1, 0];
        let t = Field2D::one_hot(&labels, 2, 2, 2).unwrap();
        let perfect = dice_ce_loss(&t, &t).unwrap();
        assert!(perfect.total().abs() < 1e-9);
        let uniform = Field2D::new(2, 2, 2, vec![0.5; 8]).unwrap();
        assert!((dice_ce_loss(&uniform, &t).unwrap().ce - 2f64.ln()).abs() < 1e-12);
        let wrong = Field2D::one_hot(&[1, 0, 0, 1], 2, 2, 2).unwrap();
        let l = dice_ce_loss(&wrong, &t).unwrap();
        assert!((l.dice - 1.0).abs() < 1e-6);
        assert!((l.ce + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.7, 0.0, 0.0, 0.0, 0.0, 100.0, 4).unwrap(), 0.7);
        assert!((total_loss(1.0, 0.5, 0.5, 0.5, 0.5, 100.0, 100).unwrap() - 3.0).abs() < 1e-12);
        assert!(total_loss(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0).is_err());
    }
}
