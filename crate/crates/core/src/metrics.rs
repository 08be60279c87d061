//! Image-quality and overlap metrics.
//!
//! All image metrics operate on [`ImageGrid`] values, i.e. in the unit range;
//! PSNR therefore uses a data range of 1. RGB inputs to SSIM are first
//! reduced to luma with the BT.601 weights (0.299, 0.587, 0.114).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datacore::{BinaryMask, Grid, ImageGrid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean squared error over all values.
pub fn mse<S: Scalar>(a: &ImageGrid<S>, b: &ImageGrid<S>) -> Result<S> {
    a.grid().check_same_shape(b.grid())?;
    let sum: S = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / S::cast(a.len() as f64))
}

/// Peak signal-to-noise ratio in dB for unit-range images:
/// `10 * log10(1 / mse)`. Identical images give `+inf`.
pub fn psnr<S: Scalar>(a: &ImageGrid<S>, b: &ImageGrid<S>) -> Result<S> {
    let e = mse(a, b)?;
    if e == S::zero() {
        Ok(S::infinity())
    } else {
        Ok(S::cast(10.0) * (S::one() / e).log10())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SsimConfig<S> {
    /// Square window side; must be odd and >= 3.
    pub window: usize,
    /// Standard deviation of the Gaussian window weights.
    pub sigma: S,
    pub k1: S,
    pub k2: S,
}

impl<S: Scalar> Default for SsimConfig<S> {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: S::cast(1.5),
            k1: S::cast(0.01),
            k2: S::cast(0.03),
        }
    }
}

impl<S: Scalar> SsimConfig<S> {
    fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.sigma > S::zero()) {
            return Err(Error::Config(format!(
                "SSIM sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

fn to_luma<S: Scalar>(img: &ImageGrid<S>) -> Grid<S> {
    let g = img.grid();
    if g.channels() == 1 {
        return g.clone();
    }
    let (wr, wg, wb) = (S::cast(0.299), S::cast(0.587), S::cast(0.114));
    let mut data = Vec::with_capacity(g.height() * g.width());
    for px in g.data().chunks_exact(3) {
        data.push(wr * px[0] + wg * px[1] + wb * px[2]);
    }
    Grid::new(g.width(), g.height(), 1, data).expect("luma reduction keeps dimensions")
}

fn ssim_term<S: Scalar>(mu_a: S, mu_b: S, var_a: S, var_b: S, cov: S, c1: S, c2: S) -> S {
    let two = S::cast(2.0);
    ((two * mu_a * mu_b + c1) * (two * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean structural similarity with a Gaussian sliding window over all fully
/// contained window positions. Images smaller than the window in either
/// dimension are scored with one uniform window spanning the whole image.
pub fn ssim<S: Scalar>(a: &ImageGrid<S>, b: &ImageGrid<S>, cfg: &SsimConfig<S>) -> Result<S> {
    cfg.validate()?;
    a.grid().check_same_shape(b.grid())?;
    let la = to_luma(a);
    let lb = to_luma(b);
    let (h, w, _) = la.shape();
    // Data range is 1 for unit-interval images.
    let c1 = cfg.k1 * cfg.k1;
    let c2 = cfg.k2 * cfg.k2;

    let win = cfg.window;
    if h < win || w < win {
        // Single global uniform window.
        let n = S::cast((h * w) as f64);
        let mut sa = S::zero();
        let mut sb = S::zero();
        let mut saa = S::zero();
        let mut sbb = S::zero();
        let mut sab = S::zero();
        for (&x, &y) in la.data().iter().zip(lb.data()) {
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        let mu_a = sa / n;
        let mu_b = sb / n;
        let var_a = saa / n - mu_a * mu_a;
        let var_b = sbb / n - mu_b * mu_b;
        let cov = sab / n - mu_a * mu_b;
        return Ok(ssim_term(mu_a, mu_b, var_a, var_b, cov, c1, c2));
    }

    // Normalized 2D Gaussian weights, truncated to the window.
    let center = ((win - 1) as f64) / 2.0;
    let mut weights = Vec::with_capacity(win * win);
    let mut total = 0.0f64;
    for i in 0..win {
        for j in 0..win {
            let di = i as f64 - center;
            let dj = j as f64 - center;
            let v = (-(di * di + dj * dj) / (2.0 * cfg.sigma.as_f64() * cfg.sigma.as_f64())).exp();
            weights.push(v);
            total += v;
        }
    }
    let weights: Vec<S> = weights.into_iter().map(|v| S::cast(v / total)).collect();

    let mut score_sum = S::zero();
    let mut positions = 0usize;
    for r0 in 0..=(h - win) {
        for c0 in 0..=(w - win) {
            let mut sa = S::zero();
            let mut sb = S::zero();
            let mut saa = S::zero();
            let mut sbb = S::zero();
            let mut sab = S::zero();
            for i in 0..win {
                for j in 0..win {
                    let wt = weights[i * win + j];
                    let x = la.get(r0 + i, c0 + j, 0);
                    let y = lb.get(r0 + i, c0 + j, 0);
                    sa += wt * x;
                    sb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let var_a = saa - sa * sa;
            let var_b = sbb - sb * sb;
            let cov = sab - sa * sb;
            score_sum += ssim_term(sa, sb, var_a, var_b, cov, c1, c2);
            positions += 1;
        }
    }
    Ok(score_sum / S::cast(positions as f64))
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`. Two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.height(), a.width()),
            got: format!("{}x{}", b.height(), b.width()),
        });
    }
    let inter = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(&x, &y)| x == 1 && y == 1)
        .count();
    let denom = a.area() + b.area();
    if denom == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / denom as f64)
    }
}

/// Aggregate metrics over reference/generated pairs.
///
/// `psnr_db` averages only the finite per-pair values and is `None` when
/// every pair was identical; `n_psnr_infinite` counts the identical pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_pairs: usize,
    pub mse: f64,
    pub psnr_db: Option<f64>,
    pub n_psnr_infinite: usize,
    pub ssim: f64,
}

pub fn evaluate_generation<S: Scalar>(
    pairs: &[(ImageGrid<S>, ImageGrid<S>)],
    cfg: &SsimConfig<S>,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("metric pairs".into()));
    }
    // Per-pair work in parallel, reduction sequential in pair order so the
    // result does not depend on thread count.
    let per_pair: Vec<(S, S, S)> = pairs
        .par_iter()
        .map(|(a, b)| {
            let m = mse(a, b)?;
            let p = psnr(a, b)?;
            let s = ssim(a, b, cfg)?;
            Ok((m, p, s))
        })
        .collect::<Result<_>>()?;

    let n = per_pair.len();
    let mut mse_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut psnr_sum = 0.0;
    let mut n_finite = 0usize;
    for &(m, p, s) in &per_pair {
        mse_sum += m.as_f64();
        ssim_sum += s.as_f64();
        if p.is_finite() {
            psnr_sum += p.as_f64();
            n_finite += 1;
        }
    }
    Ok(MetricsReport {
        n_pairs: n,
        mse: mse_sum / n as f64,
        psnr_db: if n_finite > 0 {
            Some(psnr_sum / n_finite as f64)
        } else {
            None
        },
        n_psnr_infinite: n - n_finite,
        ssim: ssim_sum / n as f64,
    })
}
