//! Downstream segmentation harness: a small fixed convolutional model with
//! hand-derived gradients, soft Dice training, and mean-DSC evaluation.
//!
//! The model exists to measure how much synthetic (image, mask) pairs help
//! a segmenter, so it is deliberately tiny and fully deterministic: three
//! 3x3 same-padded convolutions (in -> 8 -> 8 -> 1) with rectifiers between
//! and a logistic output producing per-pixel foreground probability.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datacore::{BinaryMask, Grid, ImageGrid};
use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::optimizer::{Optimizer, TrainConfig};
use crate::scalar::Scalar;
use crate::seeding::rng_from_seed;

pub const HIDDEN_WIDTH: usize = 8;
pub const DEFAULT_DICE_EPSILON: f64 = 1.0;
pub const DEFAULT_DSC_THRESHOLD: f64 = 0.5;

/// Weights of the fixed three-layer model. Kernels are `3x3` with zero
/// ("same") padding, stored row-major as `[out][in][kr][kc]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModelParams<S> {
    in_channels: usize,
    w1: Vec<S>,
    b1: Vec<S>,
    w2: Vec<S>,
    b2: Vec<S>,
    w3: Vec<S>,
    b3: Vec<S>,
}

impl<S: Scalar> SegModelParams<S> {
    /// Seeded He-normal weights (sd `sqrt(2 / fan_in)`), zero biases.
    /// Draw order: w1, then w2, then w3.
    pub fn init(in_channels: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::Config(
                "segmenter needs at least one input channel".into(),
            ));
        }
        let mut rng = rng_from_seed(seed);
        let h = HIDDEN_WIDTH;
        let mut draw = |n: usize, fan_in: usize| -> Vec<S> {
            let sd = S::cast((2.0 / fan_in as f64).sqrt());
            (0..n).map(|_| sd * S::standard_normal(&mut rng)).collect()
        };
        Ok(SegModelParams {
            in_channels,
            w1: draw(h * in_channels * 9, in_channels * 9),
            b1: vec![S::zero(); h],
            w2: draw(h * h * 9, h * 9),
            b2: vec![S::zero(); h],
            w3: draw(h * 9, h * 9),
            b3: vec![S::zero(); 1],
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Trainable tensors in the fixed group order used by gradients and the
    /// optimizer: w1, b1, w2, b2, w3, b3.
    pub fn tensors(&self) -> [&[S]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut [S]; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

fn conv3x3<S: Scalar>(input: &Grid<S>, w: &[S], b: &[S], out_ch: usize) -> Grid<S> {
    let (h, wid, in_ch) = input.shape();
    Grid::from_fn(wid, h, out_ch, |r, c, o| {
        let mut acc = b[o];
        for i in 0..in_ch {
            for kr in 0..3 {
                let rr = r + kr;
                if rr < 1 || rr > h {
                    continue;
                }
                for kc in 0..3 {
                    let cc = c + kc;
                    if cc < 1 || cc > wid {
                        continue;
                    }
                    acc += w[((o * in_ch + i) * 3 + kr) * 3 + kc] * input.get(rr - 1, cc - 1, i);
                }
            }
        }
        acc
    })
    .expect("conv output dims are valid")
}

/// Gradients of a conv layer: with respect to weights, biases, and input.
fn conv3x3_backward<S: Scalar>(
    input: &Grid<S>,
    w: &[S],
    out_ch: usize,
    d_out: &Grid<S>,
) -> (Vec<S>, Vec<S>, Grid<S>) {
    let (h, wid, in_ch) = input.shape();
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); out_ch];
    let mut d_in = Grid::zeros(wid, h, in_ch).expect("input dims are valid");
    for r in 0..h {
        for c in 0..wid {
            for o in 0..out_ch {
                let g = d_out.get(r, c, o);
                db[o] += g;
                for i in 0..in_ch {
                    for kr in 0..3 {
                        let rr = r + kr;
                        if rr < 1 || rr > h {
                            continue;
                        }
                        for kc in 0..3 {
                            let cc = c + kc;
                            if cc < 1 || cc > wid {
                                continue;
                            }
                            let widx = ((o * in_ch + i) * 3 + kr) * 3 + kc;
                            dw[widx] += g * input.get(rr - 1, cc - 1, i);
                            let prev = d_in.get(rr - 1, cc - 1, i);
                            d_in.set(rr - 1, cc - 1, i, prev + g * w[widx]);
                        }
                    }
                }
            }
        }
    }
    (dw, db, d_in)
}

fn relu<S: Scalar>(g: &Grid<S>) -> Grid<S> {
    g.map(|v| v.max(S::zero()))
}

fn sigmoid<S: Scalar>(z: S) -> S {
    // Evaluated on the non-overflowing side for stability.
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

struct ForwardPass<S> {
    z1: Grid<S>,
    a1: Grid<S>,
    z2: Grid<S>,
    a2: Grid<S>,
    p: Grid<S>,
}

fn forward<S: Scalar>(params: &SegModelParams<S>, x: &Grid<S>) -> ForwardPass<S> {
    let h = HIDDEN_WIDTH;
    let z1 = conv3x3(x, &params.w1, &params.b1, h);
    let a1 = relu(&z1);
    let z2 = conv3x3(&a1, &params.w2, &params.b2, h);
    let a2 = relu(&z2);
    let z3 = conv3x3(&a2, &params.w3, &params.b3, 1);
    let p = z3.map(sigmoid);
    ForwardPass { z1, a1, z2, a2, p }
}

/// Per-pixel foreground probability map for one image.
pub fn predict<S: Scalar>(params: &SegModelParams<S>, image: &Grid<S>) -> Result<Grid<S>> {
    if image.channels() != params.in_channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", params.in_channels),
            got: format!("{} channels", image.channels()),
        });
    }
    Ok(forward(params, image).p)
}

/// Soft Dice loss `1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)` and
/// its gradient with respect to the prediction.
pub fn soft_dice_loss<S: Scalar>(
    pred: &Grid<S>,
    target: &BinaryMask,
    epsilon: S,
) -> Result<(S, Grid<S>)> {
    if pred.channels() != 1 {
        return Err(Error::ShapeMismatch {
            expected: "1 channel".into(),
            got: format!("{} channels", pred.channels()),
        });
    }
    if (pred.height(), pred.width()) != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: pred.shape_string(),
            got: format!("{}x{}", target.height(), target.width()),
        });
    }
    if !(epsilon > S::zero() && epsilon.is_finite()) {
        return Err(Error::Config(format!(
            "dice epsilon must be positive, got {epsilon}"
        )));
    }
    for &v in pred.data() {
        if !(v >= S::zero() && v <= S::one()) {
            return Err(Error::Config(format!(
                "predictions must be probabilities in [0, 1], got {v}"
            )));
        }
    }

    let mut inter = S::zero();
    let mut p_sum = S::zero();
    let mut g_sum = S::zero();
    for r in 0..pred.height() {
        for c in 0..pred.width() {
            let p = pred.get(r, c, 0);
            let g = S::cast(target.get(r, c) as f64);
            inter += p * g;
            p_sum += p;
            g_sum += g;
        }
    }
    let num = S::cast(2.0) * inter + epsilon;
    let den = p_sum + g_sum + epsilon;
    let loss = S::one() - num / den;
    let grad = Grid::from_fn(pred.width(), pred.height(), 1, |r, c, _| {
        let g = S::cast(target.get(r, c) as f64);
        -(S::cast(2.0) * g * den - num) / (den * den)
    })
    .expect("gradient dims are valid");
    Ok((loss, grad))
}

/// Gradients for every model tensor, in [`SegModelParams::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct SegGrads<S> {
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    pub w2: Vec<S>,
    pub b2: Vec<S>,
    pub w3: Vec<S>,
    pub b3: Vec<S>,
}

impl<S: Scalar> SegGrads<S> {
    pub fn group_slices(&self) -> [&[S]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }
}

/// Mean soft-Dice loss over a batch and its gradient via explicit
/// backpropagation through the three layers.
pub fn seg_loss_and_grads<S: Scalar>(
    params: &SegModelParams<S>,
    batch: &[(&Grid<S>, &BinaryMask)],
    epsilon: S,
) -> Result<(S, SegGrads<S>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("segmentation batch".into()));
    }
    let h = HIDDEN_WIDTH;
    let inv_n = S::cast(1.0 / batch.len() as f64);
    let mut loss = S::zero();
    let mut grads = SegGrads {
        w1: vec![S::zero(); params.w1.len()],
        b1: vec![S::zero(); params.b1.len()],
        w2: vec![S::zero(); params.w2.len()],
        b2: vec![S::zero(); params.b2.len()],
        w3: vec![S::zero(); params.w3.len()],
        b3: vec![S::zero(); params.b3.len()],
    };

    for (i, (image, mask)) in batch.iter().enumerate() {
        let mut run = || -> Result<()> {
            if image.channels() != params.in_channels {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} channels", params.in_channels),
                    got: format!("{} channels", image.channels()),
                });
            }
            let pass = forward(params, image);
            let (item_loss, dp) = soft_dice_loss(&pass.p, mask, epsilon)?;
            loss += inv_n * item_loss;

            // Logistic output: dz3 = dp * p * (1 - p).
            let dz3 = dp.zip_map(&pass.p, |d, p| d * p * (S::one() - p))?;
            let (dw3, db3, da2) = conv3x3_backward(&pass.a2, &params.w3, 1, &dz3);
            // Rectifier: gradient passes only where the pre-activation was
            // positive.
            let dz2 = da2.zip_map(&pass.z2, |d, z| if z > S::zero() { d } else { S::zero() })?;
            let (dw2, db2, da1) = conv3x3_backward(&pass.a1, &params.w2, h, &dz2);
            let dz1 = da1.zip_map(&pass.z1, |d, z| if z > S::zero() { d } else { S::zero() })?;
            let (dw1, db1, _) = conv3x3_backward(image, &params.w1, h, &dz1);

            let acc = |dst: &mut [S], src: &[S]| {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += inv_n * *s;
                }
            };
            acc(&mut grads.w1, &dw1);
            acc(&mut grads.b1, &db1);
            acc(&mut grads.w2, &dw2);
            acc(&mut grads.b2, &db2);
            acc(&mut grads.w3, &dw3);
            acc(&mut grads.b3, &db3);
            Ok(())
        };
        run().map_err(|err| err.at_index(i))?;
    }
    Ok((loss, grads))
}

/// Real pairs plus a prefix of the synthetic pairs, pooled uniformly for
/// training.
#[derive(Clone, Debug)]
pub struct AugmentedDataset<S> {
    pub real: Vec<(ImageGrid<S>, BinaryMask)>,
    pub synthetic: Vec<(ImageGrid<S>, BinaryMask)>,
    pub n_synth_used: usize,
}

impl<S: Scalar> AugmentedDataset<S> {
    pub fn validate(&self) -> Result<()> {
        if self.n_synth_used > self.synthetic.len() {
            return Err(Error::Config(format!(
                "n_synth_used ({}) exceeds synthetic pool ({})",
                self.n_synth_used,
                self.synthetic.len()
            )));
        }
        let pooled = self.pooled();
        if pooled.is_empty() {
            return Err(Error::EmptyInput("augmented dataset".into()));
        }
        let shape = pooled[0].0.shape();
        for (i, (image, mask)) in pooled.iter().enumerate() {
            if image.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: pooled[0].0.grid().shape_string(),
                    got: image.grid().shape_string(),
                }
                .at_index(i));
            }
            if mask.shape() != (image.height(), image.width()) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{} mask", image.height(), image.width()),
                    got: format!("{}x{} mask", mask.height(), mask.width()),
                }
                .at_index(i));
            }
        }
        Ok(())
    }

    /// All real pairs followed by the first `n_synth_used` synthetic pairs.
    pub fn pooled(&self) -> Vec<(&ImageGrid<S>, &BinaryMask)> {
        self.real
            .iter()
            .map(|(i, m)| (i, m))
            .chain(
                self.synthetic[..self.n_synth_used]
                    .iter()
                    .map(|(i, m)| (i, m)),
            )
            .collect()
    }

    pub fn len(&self) -> usize {
        self.real.len() + self.n_synth_used
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Merge all real pairs with the first `n` synthetic pairs (stable order).
pub fn build_augmented<S: Scalar>(
    real: Vec<(ImageGrid<S>, BinaryMask)>,
    synthetic: Vec<(ImageGrid<S>, BinaryMask)>,
    n: usize,
) -> Result<AugmentedDataset<S>> {
    let ds = AugmentedDataset {
        real,
        synthetic,
        n_synth_used: n,
    };
    ds.validate()?;
    Ok(ds)
}

/// A trained segmenter plus its per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct TrainedSegmenter<S> {
    pub params: SegModelParams<S>,
    pub epoch_loss: Vec<S>,
}

/// Train from seeded initialization on shuffled mini-batches of the pooled
/// dataset. One RNG stream (from `cfg.seed`) drives init and the batch
/// schedule, so runs are bit-reproducible.
pub fn train_segmenter<S: Scalar>(
    data: &AugmentedDataset<S>,
    cfg: &TrainConfig,
) -> Result<TrainedSegmenter<S>> {
    cfg.validate()?;
    data.validate()?;
    let pooled = data.pooled();
    let in_channels = pooled[0].0.channels();
    let mut params = SegModelParams::init(in_channels, cfg.seed)?;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(cfg, &sizes)?;
    // Batch schedule continues the init stream.
    let mut rng = rng_from_seed(crate::seeding::derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let eps = S::cast(DEFAULT_DICE_EPSILON);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = S::zero();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Grid<S>, &BinaryMask)> = chunk
                .iter()
                .map(|&i| (pooled[i].0.grid(), pooled[i].1))
                .collect();
            let (loss, grads) = seg_loss_and_grads(&params, &batch, eps)?;
            opt.step(&mut params.tensors_mut(), &grads.group_slices());
            sum += loss * S::cast(chunk.len() as f64);
            seen += chunk.len();
        }
        epoch_loss.push(sum / S::cast(seen as f64));
    }
    Ok(TrainedSegmenter { params, epoch_loss })
}

/// Mean Dice of thresholded predictions produced by an arbitrary prediction
/// function; evaluation parallelizes across images and the mean is summed
/// in a canonical order, so the result is independent of testset order and
/// thread count.
pub fn evaluate_dsc_with<S, F>(
    predict_fn: F,
    testset: &[(ImageGrid<S>, BinaryMask)],
    threshold: f64,
) -> Result<f64>
where
    S: Scalar,
    F: Fn(&Grid<S>) -> Result<Grid<S>> + Sync,
{
    if testset.is_empty() {
        return Err(Error::EmptyInput("evaluation set".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mut dices = testset
        .par_iter()
        .enumerate()
        .map(|(i, (image, mask))| {
            let run = || -> Result<f64> {
                let p = predict_fn(image.grid())?;
                let pred = BinaryMask::from_grid_threshold(&p, S::cast(threshold))?;
                Ok(dice(&pred, mask)?)
            };
            run().map_err(|err| err.at_index(i))
        })
        .collect::<Result<Vec<f64>>>()?;
    dices.sort_by(f64::total_cmp);
    Ok(dices.iter().sum::<f64>() / dices.len() as f64)
}

/// Mean Dice of the model's thresholded predictions over a testset.
pub fn evaluate_dsc<S: Scalar>(
    params: &SegModelParams<S>,
    testset: &[(ImageGrid<S>, BinaryMask)],
    threshold: f64,
) -> Result<f64> {
    evaluate_dsc_with(|image| predict(params, image), testset, threshold)
}

pub const SEGMENTER_ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterArtifact<S> {
    pub version: u32,
    pub params: SegModelParams<S>,
}

impl<S: Scalar> SegmenterArtifact<S> {
    pub fn new(params: SegModelParams<S>) -> Self {
        SegmenterArtifact {
            version: SEGMENTER_ARTIFACT_VERSION,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let artifact: SegmenterArtifact<S> = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if artifact.version != SEGMENTER_ARTIFACT_VERSION {
            return Err(Error::ArtifactMismatch(format!(
                "segmenter artifact version {} (supported: {SEGMENTER_ARTIFACT_VERSION})",
                artifact.version
            )));
        }
        Ok(artifact)
    }
}
