//! Procedural lesion-style mask synthesis and mask transforms.
//!
//! The generator pipeline: place a disk of seeded-uniform center and radius
//! on a blank canvas, soften with Gaussian blur, optionally warp with an
//! elastic deformation, re-binarize, apply morphological opening then
//! closing, and accept only masks that form exactly one 4-connected
//! component. Rejected draws retry with a derived seed up to a configured
//! attempt budget.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datacore::{BinaryMask, Grid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, rng_from_seed};

/// Elastic deformation parameters: `alpha` scales the displacement field,
/// `sigma` is the Gaussian smoothing radius of the field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub alpha: f64,
    pub sigma: f64,
}

impl ElasticParams {
    fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "elastic alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "elastic sigma must be finite and positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskGenConfig {
    pub height: usize,
    pub width: usize,
    /// Lower bound for both the disk radius and its distance to the border.
    pub r_min: f64,
    /// Standard deviation of the softening blur; 0 disables it.
    pub blur_sigma: f64,
    /// Optional elastic warp applied before re-binarization.
    pub elastic: Option<ElasticParams>,
    /// Elliptical structuring-element radii (rows, cols) for opening/closing.
    /// `(0, 0)` makes both operations the identity.
    pub se_radii: (usize, usize),
    pub binarize_threshold: f64,
    /// Rejection-sampling budget per mask.
    pub max_attempts: usize,
}

impl Default for MaskGenConfig {
    fn default() -> Self {
        MaskGenConfig {
            height: 64,
            width: 64,
            r_min: 12.0,
            blur_sigma: 1.5,
            elastic: Some(ElasticParams {
                alpha: 30.0,
                sigma: 3.0,
            }),
            se_radii: (2, 2),
            binarize_threshold: 0.5,
            max_attempts: 10,
        }
    }
}

impl MaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "canvas must be non-empty, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.r_min.is_finite() && self.r_min > 0.0) {
            return Err(Error::Config(format!(
                "r_min must be finite and positive, got {}",
                self.r_min
            )));
        }
        if best_center_margin(self.height, self.width) <= self.r_min {
            return Err(Error::Config(format!(
                "canvas {}x{} has no center with border margin above r_min = {}",
                self.height, self.width, self.r_min
            )));
        }
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "blur_sigma must be finite and >= 0, got {}",
                self.blur_sigma
            )));
        }
        if let Some(el) = &self.elastic {
            el.validate()?;
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config(format!(
                "binarize_threshold must lie in (0, 1), got {}",
                self.binarize_threshold
            )));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Largest achievable border margin of any pixel center.
fn best_center_margin(height: usize, width: usize) -> f64 {
    let d = |size: usize| ((size - 1) / 2).min(size - 1 - (size - 1) / 2);
    d(height).min(d(width)) as f64
}

/// A generated mask plus the provenance needed to reproduce or audit it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedMask {
    pub mask: BinaryMask,
    /// Disk center as (row, col).
    pub center: (usize, usize),
    pub radius: f64,
    /// 1-based attempt that produced the accepted mask.
    pub attempts_used: usize,
    /// The per-mask seed this mask was generated from.
    pub seed: u64,
}

/// Pixel centers within Euclidean distance `radius` of `center` are
/// foreground.
pub fn rasterize_disk(
    height: usize,
    width: usize,
    center: (usize, usize),
    radius: f64,
) -> BinaryMask {
    let (cr, cc) = (center.0 as f64, center.1 as f64);
    let r2 = radius * radius;
    BinaryMask::from_fn(width, height, |r, c| {
        let dr = r as f64 - cr;
        let dc = c as f64 - cc;
        dr * dr + dc * dc <= r2
    })
}

/// Separable Gaussian blur with the kernel truncated at `3 * sigma` and
/// renormalized to sum 1. Outside the grid, values are treated as zero.
/// `sigma == 0` returns the input unchanged.
pub fn gaussian_blur<S: Scalar>(grid: &Grid<S>, sigma: S) -> Grid<S> {
    assert!(
        sigma >= S::zero() && sigma.is_finite(),
        "sigma must be finite and >= 0"
    );
    if sigma == S::zero() {
        return grid.clone();
    }
    let sig = sigma.as_f64();
    let radius = (3.0 * sig).ceil() as isize;
    let mut weights = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0f64;
    for i in -radius..=radius {
        let w = (-(i as f64 * i as f64) / (2.0 * sig * sig)).exp();
        weights.push(w);
        total += w;
    }
    let weights: Vec<S> = weights.into_iter().map(|w| S::cast(w / total)).collect();

    let (h, w, ch) = grid.shape();
    let at = |g: &Grid<S>, r: isize, c: isize, k: usize| -> S {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            S::zero()
        } else {
            g.get(r as usize, c as usize, k)
        }
    };

    // Horizontal pass, then vertical.
    let mut tmp = grid.clone();
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = S::zero();
                for (wi, &wt) in weights.iter().enumerate() {
                    let offset = wi as isize - radius;
                    acc += wt * at(grid, r as isize, c as isize + offset, k);
                }
                tmp.set(r, c, k, acc);
            }
        }
    }
    let mut out = grid.clone();
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = S::zero();
                for (wi, &wt) in weights.iter().enumerate() {
                    let offset = wi as isize - radius;
                    acc += wt * at(&tmp, r as isize + offset, c as isize, k);
                }
                out.set(r, c, k, acc);
            }
        }
    }
    out
}

/// Bilinear sample of channel `k` at a position already inside
/// `[0, h-1] x [0, w-1]`.
fn bilinear<S: Scalar>(grid: &Grid<S>, rf: S, cf: S, k: usize) -> S {
    let (h, w, _) = grid.shape();
    let r0 = rf.floor();
    let c0 = cf.floor();
    let fr = rf - r0;
    let fc = cf - c0;
    let r0 = r0.as_f64() as usize;
    let c0 = c0.as_f64() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let one = S::one();
    grid.get(r0, c0, k) * (one - fr) * (one - fc)
        + grid.get(r0, c1, k) * (one - fr) * fc
        + grid.get(r1, c0, k) * fr * (one - fc)
        + grid.get(r1, c1, k) * fr * fc
}

/// Elastic deformation: per-axis displacement fields of uniform `[-1, 1]`
/// draws are Gaussian-smoothed with `sigma`, scaled by `alpha`, and the grid
/// is resampled bilinearly at the displaced positions with border clamp.
pub fn elastic_deform_grid<S: Scalar>(
    grid: &Grid<S>,
    alpha: S,
    sigma: S,
    seed: u64,
) -> Result<Grid<S>> {
    if !(alpha >= S::zero() && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "elastic alpha must be finite and >= 0, got {alpha}"
        )));
    }
    if !(sigma > S::zero() && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "elastic sigma must be finite and positive, got {sigma}"
        )));
    }
    let (h, w, ch) = grid.shape();
    let mut rng = rng_from_seed(seed);
    let field = |rng: &mut rand_chacha::ChaCha8Rng| -> Grid<S> {
        let raw = Grid::from_fn(w, h, 1, |_, _, _| S::uniform(rng, S::cast(-1.0), S::one()))
            .expect("displacement field dims are valid");
        gaussian_blur(&raw, sigma).map(|v| v * alpha)
    };
    let dr = field(&mut rng);
    let dc = field(&mut rng);

    let max_r = S::cast((h - 1) as f64);
    let max_c = S::cast((w - 1) as f64);
    let mut out = grid.clone();
    for r in 0..h {
        for c in 0..w {
            let rf = (S::cast(r as f64) + dr.get(r, c, 0))
                .max(S::zero())
                .min(max_r);
            let cf = (S::cast(c as f64) + dc.get(r, c, 0))
                .max(S::zero())
                .min(max_c);
            for k in 0..ch {
                out.set(r, c, k, bilinear(grid, rf, cf, k));
            }
        }
    }
    Ok(out)
}

/// Elastic deformation of a binary mask; the warped field is re-binarized at
/// 0.5.
pub fn elastic_deform_mask(
    mask: &BinaryMask,
    alpha: f64,
    sigma: f64,
    seed: u64,
) -> Result<BinaryMask> {
    let g: Grid<f64> = mask.to_grid();
    let warped = elastic_deform_grid(&g, alpha, sigma, seed)?;
    BinaryMask::from_grid_threshold(&warped, 0.5)
}

/// Offsets of an elliptical structuring element with radii `(a, b)`:
/// `{(dr, dc) : (dr/a)^2 + (dc/b)^2 <= 1}`. Radii 0 collapse that axis.
fn se_offsets(a: usize, b: usize) -> Vec<(isize, isize)> {
    let (ai, bi) = (a as isize, b as isize);
    let (a2, b2) = ((a * a) as i64, (b * b) as i64);
    let mut offsets = Vec::new();
    for dr in -ai..=ai {
        for dc in -bi..=bi {
            // Integer form of (dr/a)^2 + (dc/b)^2 <= 1; degenerate radii
            // reduce to the corresponding line or point.
            if dr * dr * b2 as isize + dc * dc * a2 as isize <= (a2 * b2) as isize {
                offsets.push((dr, dc));
            }
        }
    }
    offsets
}

fn erode_with(mask: &BinaryMask, offsets: &[(isize, isize)]) -> BinaryMask {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    BinaryMask::from_fn(mask.width(), mask.height(), |r, c| {
        offsets.iter().all(|&(dr, dc)| {
            let rr = r as isize + dr;
            let cc = c as isize + dc;
            // Outside the canvas counts as background.
            rr >= 0 && cc >= 0 && rr < h && cc < w && mask.get(rr as usize, cc as usize) == 1
        })
    })
}

fn dilate_with(mask: &BinaryMask, offsets: &[(isize, isize)]) -> BinaryMask {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    BinaryMask::from_fn(mask.width(), mask.height(), |r, c| {
        offsets.iter().any(|&(dr, dc)| {
            let rr = r as isize + dr;
            let cc = c as isize + dc;
            rr >= 0 && cc >= 0 && rr < h && cc < w && mask.get(rr as usize, cc as usize) == 1
        })
    })
}

pub fn erode(mask: &BinaryMask, se_radii: (usize, usize)) -> BinaryMask {
    erode_with(mask, &se_offsets(se_radii.0, se_radii.1))
}

pub fn dilate(mask: &BinaryMask, se_radii: (usize, usize)) -> BinaryMask {
    dilate_with(mask, &se_offsets(se_radii.0, se_radii.1))
}

/// Erosion followed by dilation.
pub fn morph_open(mask: &BinaryMask, se_radii: (usize, usize)) -> BinaryMask {
    let offsets = se_offsets(se_radii.0, se_radii.1);
    dilate_with(&erode_with(mask, &offsets), &offsets)
}

/// Dilation followed by erosion.
pub fn morph_close(mask: &BinaryMask, se_radii: (usize, usize)) -> BinaryMask {
    let offsets = se_offsets(se_radii.0, se_radii.1);
    erode_with(&dilate_with(mask, &offsets), &offsets)
}

/// 4-connected component labelling. Returns the component count and a label
/// raster: background 0, components numbered 1.. in raster-scan discovery
/// order.
pub fn label_components(mask: &BinaryMask) -> (usize, Vec<u32>) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.data()[q] == 1 && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
    }
    (next as usize, labels)
}

const CENTER_DRAW_CAP: usize = 10_000;

/// One full pipeline attempt; `None` means the attempt was rejected.
fn try_generate(
    cfg: &MaskGenConfig,
    attempt_seed: u64,
) -> Option<(BinaryMask, (usize, usize), f64)> {
    let mut rng = rng_from_seed(attempt_seed);

    // Center with border margin strictly above r_min, by rejection.
    let mut center = None;
    for _ in 0..CENTER_DRAW_CAP {
        let r = rng.random_range(0..cfg.height);
        let c = rng.random_range(0..cfg.width);
        let margin = r.min(c).min(cfg.height - 1 - r).min(cfg.width - 1 - c) as f64;
        if margin > cfg.r_min {
            center = Some(((r, c), margin));
            break;
        }
    }
    let ((cr, cc), margin) = center?;
    let radius = rng.random_range(cfg.r_min..=margin);

    let disk = rasterize_disk(cfg.height, cfg.width, (cr, cc), radius);
    let mut field: Grid<f64> = disk.to_grid();
    if cfg.blur_sigma > 0.0 {
        field = gaussian_blur(&field, cfg.blur_sigma);
    }
    if let Some(el) = &cfg.elastic {
        let elastic_seed = rng.random::<u64>();
        field = elastic_deform_grid(&field, el.alpha, el.sigma, elastic_seed)
            .expect("elastic params validated with config");
    }
    let mask = BinaryMask::from_grid_threshold(&field, cfg.binarize_threshold)
        .expect("pipeline field is single-channel");
    let mask = morph_close(&morph_open(&mask, cfg.se_radii), cfg.se_radii);

    let (components, _) = label_components(&mask);
    if components == 1 {
        Some((mask, (cr, cc), radius))
    } else {
        None
    }
}

/// Generate one mask; rejected attempts retry with seeds derived from
/// `seed` until `max_attempts` is exhausted.
pub fn generate_circle_mask(cfg: &MaskGenConfig, seed: u64) -> Result<GeneratedMask> {
    cfg.validate()?;
    for attempt in 0..cfg.max_attempts {
        let attempt_seed = derive_seed(seed, attempt as u64);
        if let Some((mask, center, radius)) = try_generate(cfg, attempt_seed) {
            return Ok(GeneratedMask {
                mask,
                center,
                radius,
                attempts_used: attempt + 1,
                seed,
            });
        }
    }
    Err(Error::MaskGenExhausted {
        attempts: cfg.max_attempts,
    })
}

/// Generate `n` masks from per-item seeds derived from `master_seed`.
/// Items are independent, so the batch parallelizes without changing
/// results.
pub fn gen_batch(n: usize, cfg: &MaskGenConfig, master_seed: u64) -> Result<Vec<GeneratedMask>> {
    if n == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            generate_circle_mask(cfg, derive_seed(master_seed, i as u64)).map_err(|e| e.at_index(i))
        })
        .collect()
}

/// Geometric edits applied to an existing mask, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MaskTransform {
    /// Scale about the canvas center; the canvas keeps its size, so growth
    /// crops and shrinkage pads with background.
    Resize { scale: f64 },
    /// Rotate about the canvas center by this angle in degrees.
    Rotate { degrees: f64 },
    /// Elastic warp with its own derived seed.
    Elastic { alpha: f64, sigma: f64 },
}

fn resample_about_center(
    mask: &BinaryMask,
    map_back: impl Fn(f64, f64) -> (f64, f64),
) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let grid: Grid<f64> = mask.to_grid();
    let (cr, cc) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    BinaryMask::from_fn(w, h, |r, c| {
        let (sr, sc) = map_back(r as f64 - cr, c as f64 - cc);
        let (sr, sc) = (sr + cr, sc + cc);
        if sr < 0.0 || sc < 0.0 || sr > (h - 1) as f64 || sc > (w - 1) as f64 {
            return false; // outside the source: background fill
        }
        bilinear(&grid, sr, sc, 0) >= 0.5
    })
}

/// Apply `ops` to `mask` in order. Errors if the final mask has no
/// foreground left.
pub fn transform_existing(
    mask: &BinaryMask,
    ops: &[MaskTransform],
    seed: u64,
) -> Result<BinaryMask> {
    let mut current = mask.clone();
    for (i, op) in ops.iter().enumerate() {
        current = match op {
            MaskTransform::Resize { scale } => {
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::Config(format!(
                        "resize scale must be finite and positive, got {scale}"
                    )));
                }
                resample_about_center(&current, |dr, dc| (dr / scale, dc / scale))
            }
            MaskTransform::Rotate { degrees } => {
                if !degrees.is_finite() {
                    return Err(Error::Config(format!(
                        "rotation angle must be finite, got {degrees}"
                    )));
                }
                let theta = degrees.to_radians();
                let (sin, cos) = (theta.sin(), theta.cos());
                resample_about_center(&current, |dr, dc| {
                    (cos * dr + sin * dc, -sin * dr + cos * dc)
                })
            }
            MaskTransform::Elastic { alpha, sigma } => {
                elastic_deform_mask(&current, *alpha, *sigma, derive_seed(seed, i as u64))?
            }
        };
    }
    if current.area() == 0 {
        return Err(Error::DegenerateMask);
    }
    Ok(current)
}
