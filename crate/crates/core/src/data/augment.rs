use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{z_score, Sample};
use crate::rng::Rng;

/// Ranges of the random augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    /// Fraction of the image side.
    pub max_translate: f64,
    /// Peak elastic displacement in pixels.
    pub elastic_alpha: f64,
    /// Control points per side of the coarse displacement grid.
    pub elastic_grid: usize,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            max_translate: 0.05,
            elastic_alpha: 1.5,
            elastic_grid: 4,
            noise_sigma: 0.05,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn zero() -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_translate: 0.0,
            elastic_alpha: 0.0,
            elastic_grid: 4,
            noise_sigma: 0.0,
        }
    }

    /// Rotation and translation only.
    pub fn affine_only() -> Self {
        Self {
            elastic_alpha: 0.0,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }
}

/// Rotation about the image centre followed by a translation, mapping output
/// coordinates to source coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub angle: f64,
    pub ty: f64,
    pub tx: f64,
    pub cy: f64,
    pub cx: f64,
}

impl Affine {
    pub fn apply(&self, y: f64, x: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        (
            c * dy - s * dx + self.cy + self.ty,
            s * dy + c * dx + self.cx + self.tx,
        )
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.angle.sin_cos();
        // R^-1 (q - c - t) + c  =  R(-a)(q - c) + c - R(-a) t
        let (ty, tx) = (-(c * self.ty + s * self.tx), -(-s * self.ty + c * self.tx));
        Self {
            angle: -self.angle,
            ty,
            tx,
            cy: self.cy,
            cx: self.cx,
        }
    }
}

/// Source-coordinate map of one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub affine: Affine,
    pub grid: usize,
    /// `(dy, dx)` at each control point, row-major `grid x grid`.
    pub displacement: Vec<(f64, f64)>,
}

impl Transform {
    pub fn affine_only(affine: Affine) -> Self {
        Self {
            affine,
            grid: 0,
            displacement: Vec::new(),
        }
    }

    fn elastic(&self, y: f64, x: f64, height: usize, width: usize) -> (f64, f64) {
        if self.grid < 2 || self.displacement.is_empty() {
            return (0.0, 0.0);
        }
        let g = self.grid;
        let gy = (y / (height.max(2) - 1) as f64 * (g - 1) as f64).clamp(0.0, (g - 1) as f64);
        let gx = (x / (width.max(2) - 1) as f64 * (g - 1) as f64).clamp(0.0, (g - 1) as f64);
        let (y0, x0) = ((gy.floor() as usize).min(g - 2), (gx.floor() as usize).min(g - 2));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let at = |r: usize, c: usize| self.displacement[r * g + c];
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(at(y0, x0), at(y0, x0 + 1), fx);
        let bot = lerp(at(y0 + 1, x0), at(y0 + 1, x0 + 1), fx);
        lerp(top, bot, fy)
    }

    /// Source coordinates for output pixel `(i, j)`.
    pub fn source(&self, i: usize, j: usize, height: usize, width: usize) -> (f64, f64) {
        let (y, x) = (i as f64, j as f64);
        let (sy, sx) = self.affine.apply(y, x);
        let (ey, ex) = self.elastic(y, x, height, width);
        (sy + ey, sx + ex)
    }

    /// Bilinear resampling with edge replication.
    pub fn warp_image(&self, image: &[f64], height: usize, width: usize) -> Vec<f64> {
        let at = |r: isize, c: isize| {
            let r = r.clamp(0, height as isize - 1) as usize;
            let c = c.clamp(0, width as isize - 1) as usize;
            image[r * width + c]
        };
        let mut out = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                let (sy, sx) = self.source(i, j, height, width);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (r, c) = (y0 as isize, x0 as isize);
                let v = at(r, c) * (1.0 - fy) * (1.0 - fx)
                    + at(r, c + 1) * (1.0 - fy) * fx
                    + at(r + 1, c) * fy * (1.0 - fx)
                    + at(r + 1, c + 1) * fy * fx;
                out.push(v);
            }
        }
        out
    }

    /// Nearest-neighbour resampling with edge replication.
    pub fn warp_mask(&self, mask: &[u8], height: usize, width: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                let (sy, sx) = self.source(i, j, height, width);
                let r = (sy.round() as isize).clamp(0, height as isize - 1) as usize;
                let c = (sx.round() as isize).clamp(0, width as isize - 1) as usize;
                out.push(mask[r * width + c]);
            }
        }
        out
    }
}

/// Default augmentation.
pub fn augment(sample: &Sample, rng: &mut Rng) -> Sample {
    augment_with(sample, &AugmentConfig::default(), rng).0
}

/// Draws a transform from `cfg`, warps image and mask identically, adds noise
/// and re-normalises. Returns the transform for inspection.
pub fn augment_with(sample: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> (Sample, Transform) {
    let (h, w) = (sample.height, sample.width);
    let angle = rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
    let ty = rng.random_range(-1.0..=1.0) * cfg.max_translate * h as f64;
    let tx = rng.random_range(-1.0..=1.0) * cfg.max_translate * w as f64;
    let affine = Affine {
        angle,
        ty,
        tx,
        cy: (h as f64 - 1.0) / 2.0,
        cx: (w as f64 - 1.0) / 2.0,
    };
    let grid = cfg.elastic_grid.max(2);
    let displacement = if cfg.elastic_alpha > 0.0 {
        (0..grid * grid)
            .map(|_| {
                (
                    cfg.elastic_alpha * rng.random_range(-1.0..=1.0),
                    cfg.elastic_alpha * rng.random_range(-1.0..=1.0),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let transform = Transform {
        affine,
        grid,
        displacement,
    };
    let mut image = transform.warp_image(&sample.image, h, w);
    if cfg.noise_sigma > 0.0 {
        for v in &mut image {
            *v += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    z_score(&mut image);
    let mask = transform.warp_mask(&sample.mask, h, w);
    (
        Sample {
            height: h,
            width: w,
            image,
            mask,
        },
        transform,
    )
}
