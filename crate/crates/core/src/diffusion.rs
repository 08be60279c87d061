//! Noise-prediction denoisers, the denoising objective with analytic
//! gradients, DDIM sampling, and denoiser artifacts.
//!
//! Denoisers predict the noise `eps_hat` contained in a noised grid `x_t`.
//! The reference trainable model is per-step linear (`eps_hat = w_t * x_t +
//! b_t` with a scalar weight and a bias grid per step); an analytic Gaussian
//! model provides an exact oracle for testing the sampler, via the posterior
//! mean of `x_0` under an i.i.d. `N(mu, s^2)` pixel prior.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datacore::{Grid, ImageGrid};
use crate::error::{Error, Result};
use crate::optimizer::{Optimizer, TrainConfig};
use crate::scalar::Scalar;
use crate::schedule::{forward_diffuse, NoiseSchedule, ScheduleSpec};
use crate::seeding::rng_from_seed;

/// Anything that can predict the noise present in `x_t` at step `t`.
pub trait Denoiser<S: Scalar> {
    fn predict(&self, x_t: &Grid<S>, t: usize, schedule: &NoiseSchedule<S>) -> Result<Grid<S>>;
}

/// Per-step linear noise predictor: `eps_hat = w_t * x_t + b_t`, with one
/// scalar weight and one bias grid per schedule step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDenoiser<S> {
    steps: usize,
    height: usize,
    width: usize,
    channels: usize,
    /// `weights[t - 1]` is the scalar for step `t`.
    weights: Vec<S>,
    /// Step-major bias grids: step `t` occupies `[(t-1)*d .. t*d)` where
    /// `d = height * width * channels`.
    biases: Vec<S>,
}

impl<S: Scalar> LinearDenoiser<S> {
    pub fn zeros(steps: usize, shape: (usize, usize, usize)) -> Result<Self> {
        let (height, width, channels) = shape;
        if steps == 0 {
            return Err(Error::Config("denoiser needs at least one step".into()));
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "denoiser shape must be positive, got {height}x{width}x{channels}"
            )));
        }
        let d = height * width * channels;
        Ok(LinearDenoiser {
            steps,
            height,
            width,
            channels,
            weights: vec![S::zero(); steps],
            biases: vec![S::zero(); steps * d],
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `(height, width, channels)` this denoiser operates on.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    fn grid_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn weight(&self, t: usize) -> S {
        assert!((1..=self.steps).contains(&t));
        self.weights[t - 1]
    }

    pub fn bias(&self, t: usize) -> &[S] {
        assert!((1..=self.steps).contains(&t));
        let d = self.grid_len();
        &self.biases[(t - 1) * d..t * d]
    }

    /// Parameter tensors in gradient order: per-step weights, then step-major
    /// biases.
    pub fn tensors(&self) -> [&[S]; 2] {
        [&self.weights, &self.biases]
    }

    pub fn tensors_mut(&mut self) -> [&mut [S]; 2] {
        [&mut self.weights, &mut self.biases]
    }

    fn check_input(&self, x_t: &Grid<S>, t: usize, schedule: &NoiseSchedule<S>) -> Result<()> {
        if self.steps != schedule.steps() {
            return Err(Error::ArtifactMismatch(format!(
                "denoiser trained for {} steps used with a {}-step schedule",
                self.steps,
                schedule.steps()
            )));
        }
        schedule.check_step(t)?;
        if x_t.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", self.height, self.width, self.channels),
                got: x_t.shape_string(),
            });
        }
        Ok(())
    }
}

/// Posterior mean `E[x_0 | x_t]` for a scalar `x_0 ~ N(mu, s^2)` under the
/// forward process at noise level `alpha_bar`.
///
/// Jointly, `(x_0, x_t)` is Gaussian with `Cov(x_0, x_t) = sqrt(abar) s^2`
/// and `Var(x_t) = abar s^2 + 1 - abar`, so conditioning gives
/// `mu + (sqrt(abar) s^2 / (abar s^2 + 1 - abar)) (x_t - sqrt(abar) mu)`.
pub fn gaussian_posterior_mean<S: Scalar>(mu: S, s: S, alpha_bar: S, x_t: S) -> S {
    let s2 = s * s;
    let root = alpha_bar.sqrt();
    mu + (root * s2 / (alpha_bar * s2 + (S::one() - alpha_bar))) * (x_t - root * mu)
}

/// Denoiser parameter sets; the enum is what artifacts store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserParams<S> {
    LinearPerStep(LinearDenoiser<S>),
    AnalyticGaussian { mu: S, s: S },
}

/// Exact noise predictor for i.i.d. Gaussian pixel data; used as a sampling
/// oracle.
pub fn analytic_gaussian_denoiser<S: Scalar>(mu: S, s: S) -> Result<DenoiserParams<S>> {
    if !mu.is_finite() {
        return Err(Error::Config(format!("mu must be finite, got {mu}")));
    }
    if !(s.is_finite() && s > S::zero()) {
        return Err(Error::Config(format!(
            "s must be finite and positive, got {s}"
        )));
    }
    Ok(DenoiserParams::AnalyticGaussian { mu, s })
}

impl<S: Scalar> Denoiser<S> for DenoiserParams<S> {
    fn predict(&self, x_t: &Grid<S>, t: usize, schedule: &NoiseSchedule<S>) -> Result<Grid<S>> {
        match self {
            DenoiserParams::LinearPerStep(lin) => {
                lin.check_input(x_t, t, schedule)?;
                let w = lin.weight(t);
                let b = lin.bias(t);
                let data = x_t
                    .data()
                    .iter()
                    .zip(b)
                    .map(|(&x, &bv)| w * x + bv)
                    .collect();
                Grid::new(x_t.width(), x_t.height(), x_t.channels(), data)
            }
            DenoiserParams::AnalyticGaussian { mu, s } => {
                schedule.check_step(t)?;
                let abar = schedule.alpha_bar(t);
                let root = abar.sqrt();
                let spread = (S::one() - abar).sqrt();
                Ok(x_t.map(|x| {
                    let post = gaussian_posterior_mean(*mu, *s, abar, x);
                    (x - root * post) / spread
                }))
            }
        }
    }
}

/// One training item under the forward process.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionItem<S> {
    pub x0: Grid<S>,
    pub t: usize,
    pub eps: Grid<S>,
    pub x_t: Grid<S>,
}

/// A batch of noised training items. Construction enforces that every item
/// satisfies `x_t = forward_diffuse(x0, t, eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionBatch<S> {
    items: Vec<DiffusionItem<S>>,
}

impl<S: Scalar> DiffusionBatch<S> {
    pub fn from_parts(items: Vec<DiffusionItem<S>>, schedule: &NoiseSchedule<S>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("diffusion batch".into()));
        }
        for (i, item) in items.iter().enumerate() {
            let recomputed = forward_diffuse(&item.x0, item.t, &item.eps, schedule)
                .map_err(|e| e.at_index(i))?;
            // Recomputing with identical code is bitwise-reproducible, so
            // exact equality is the right check.
            if recomputed != item.x_t {
                return Err(Error::Config(format!(
                    "item {i}: x_t does not equal forward_diffuse(x0, {}, eps)",
                    item.t
                )));
            }
        }
        Ok(DiffusionBatch { items })
    }

    /// Draw `(t, eps)` per clean grid, in order: step first, then the noise
    /// grid in data order.
    pub fn draw<R: Rng + ?Sized>(
        x0s: &[&Grid<S>],
        schedule: &NoiseSchedule<S>,
        rng: &mut R,
    ) -> Result<Self> {
        if x0s.is_empty() {
            return Err(Error::EmptyInput("diffusion batch".into()));
        }
        let mut items = Vec::with_capacity(x0s.len());
        for &x0 in x0s {
            let t = rng.random_range(1..=schedule.steps());
            let eps = Grid::standard_normal(x0.width(), x0.height(), x0.channels(), rng)?;
            let x_t = forward_diffuse(x0, t, &eps, schedule)?;
            items.push(DiffusionItem {
                x0: x0.clone(),
                t,
                eps,
                x_t,
            });
        }
        Ok(DiffusionBatch { items })
    }

    pub fn items(&self) -> &[DiffusionItem<S>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Gradients of the denoising loss for a [`LinearDenoiser`], in the same
/// layout as its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads<S> {
    pub weights: Vec<S>,
    pub biases: Vec<S>,
}

fn linear_loss_and_grads<S: Scalar>(
    lin: &LinearDenoiser<S>,
    batch: &DiffusionBatch<S>,
) -> Result<(S, LinearGrads<S>)> {
    let d = lin.grid_len();
    let n = batch.len();
    let per = S::cast(1.0 / (n as f64 * d as f64));
    let scale = S::cast(2.0 / (n as f64 * d as f64));
    let mut loss = S::zero();
    let mut dw = vec![S::zero(); lin.steps];
    let mut db = vec![S::zero(); lin.biases.len()];
    for (i, item) in batch.items().iter().enumerate() {
        if item.x_t.shape() != lin.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", lin.height, lin.width, lin.channels),
                got: item.x_t.shape_string(),
            }
            .at_index(i));
        }
        if !(1..=lin.steps).contains(&item.t) {
            return Err(
                Error::Config(format!("step {} outside 1..={}", item.t, lin.steps)).at_index(i),
            );
        }
        let idx = item.t - 1;
        let w = lin.weights[idx];
        let b = &lin.biases[idx * d..(idx + 1) * d];
        for j in 0..d {
            let x = item.x_t.data()[j];
            let r = w * x + b[j] - item.eps.data()[j];
            loss += per * r * r;
            dw[idx] += scale * r * x;
            db[idx * d + j] += scale * r;
        }
    }
    Ok((
        loss,
        LinearGrads {
            weights: dw,
            biases: db,
        },
    ))
}

/// Mean-over-items, mean-over-elements squared error between predicted and
/// true noise, with its gradient. Only the linear kind is trainable.
pub fn denoise_loss<S: Scalar>(
    params: &DenoiserParams<S>,
    batch: &DiffusionBatch<S>,
) -> Result<(S, LinearGrads<S>)> {
    match params {
        DenoiserParams::LinearPerStep(lin) => linear_loss_and_grads(lin, batch),
        DenoiserParams::AnalyticGaussian { .. } => Err(Error::NotTrainable("analytic_gaussian")),
    }
}

/// The same objective evaluated for any denoiser, without gradients; used
/// for monitoring and for oracle comparisons.
pub fn denoiser_mse<S: Scalar, D: Denoiser<S>>(
    den: &D,
    batch: &DiffusionBatch<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<S> {
    let mut loss = S::zero();
    for item in batch.items() {
        let pred = den.predict(&item.x_t, item.t, schedule)?;
        let d = S::cast(pred.len() as f64);
        let item_loss: S = pred
            .data()
            .iter()
            .zip(item.eps.data())
            .map(|(&p, &e)| (p - e) * (p - e))
            .sum();
        loss += item_loss / d;
    }
    Ok(loss / S::cast(batch.len() as f64))
}

/// A trained denoiser plus its per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct TrainedDenoiser<S> {
    pub params: DenoiserParams<S>,
    pub epoch_loss: Vec<S>,
}

/// Train a [`LinearDenoiser`] from zero initialization.
///
/// Per epoch, items are reshuffled and chunked into batches; each item gets
/// a fresh `(t, eps)` draw. All randomness comes from one stream seeded with
/// `cfg.seed`, so results are bit-reproducible.
pub fn train_denoiser<S: Scalar>(
    data: &[ImageGrid<S>],
    schedule: &NoiseSchedule<S>,
    cfg: &TrainConfig,
) -> Result<TrainedDenoiser<S>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training images".into()));
    }
    let shape = data[0].shape();
    for img in &data[1..] {
        data[0].grid().check_same_shape(img.grid())?;
    }

    let mut lin = LinearDenoiser::zeros(schedule.steps(), shape)?;
    let mut opt = Optimizer::new(cfg, &[lin.weights.len(), lin.biases.len()])?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = S::zero();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x0s: Vec<&Grid<S>> = chunk.iter().map(|&i| data[i].grid()).collect();
            let batch = DiffusionBatch::draw(&x0s, schedule, &mut rng)?;
            let (loss, grads) = linear_loss_and_grads(&lin, &batch)?;
            opt.step(
                &mut [&mut lin.weights, &mut lin.biases],
                &[&grads.weights, &grads.biases],
            );
            sum += loss * S::cast(chunk.len() as f64);
            seen += chunk.len();
        }
        epoch_loss.push(sum / S::cast(seen as f64));
    }
    Ok(TrainedDenoiser {
        params: DenoiserParams::LinearPerStep(lin),
        epoch_loss,
    })
}

/// The decreasing step sequence visited by DDIM sampling, ending at 0.
///
/// The nonzero steps are `substeps` evenly spaced (rounded) points from `T`
/// down to 1, followed by the final hop to 0. `substeps == T` visits every
/// step; `substeps == 1` is the single jump `T -> 0`.
pub fn substep_sequence(steps: usize, substeps: usize) -> Result<Vec<usize>> {
    if substeps == 0 || substeps > steps {
        return Err(Error::Config(format!(
            "substeps must lie in 1..={steps}, got {substeps}"
        )));
    }
    let mut seq = Vec::with_capacity(substeps + 1);
    if substeps == 1 {
        seq.push(steps);
    } else {
        let stride = (steps - 1) as f64 / (substeps - 1) as f64;
        for j in (0..substeps).rev() {
            let tau = (1.0 + j as f64 * stride).round() as usize;
            seq.push(tau);
        }
    }
    seq.push(0);
    debug_assert!(seq.windows(2).all(|w| w[0] > w[1]), "sequence {seq:?}");
    debug_assert_eq!(seq[0], steps);
    Ok(seq)
}

/// One DDIM update from noise level `abar_t` to `abar_prev`:
///
/// ```text
/// x0_hat = (x - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
/// sigma  = eta * sqrt((1 - abar_prev)/(1 - abar_t)) * sqrt(1 - abar_t/abar_prev)
/// out    = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev - sigma^2) * eps_hat + sigma * z
/// ```
///
/// With `eta = 0` the update is deterministic and `noise` is ignored; with
/// `eta > 0` a noise grid `z` is required.
pub fn ddim_update<S: Scalar>(
    x: &Grid<S>,
    abar_t: S,
    abar_prev: S,
    eps_hat: &Grid<S>,
    eta: S,
    noise: Option<&Grid<S>>,
) -> Result<Grid<S>> {
    if !(abar_t > S::zero() && abar_t <= S::one())
        || !(abar_prev > S::zero() && abar_prev <= S::one())
    {
        return Err(Error::Config(format!(
            "alpha_bar values must lie in (0, 1], got {abar_t} and {abar_prev}"
        )));
    }
    if abar_prev < abar_t {
        return Err(Error::Config(format!(
            "abar_prev ({abar_prev}) must be >= abar_t ({abar_t}): sampling moves toward less noise"
        )));
    }
    if !(eta >= S::zero() && eta <= S::one()) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    x.check_same_shape(eps_hat)?;

    let sigma = if eta == S::zero() {
        S::zero()
    } else {
        if abar_t == S::one() {
            return Err(Error::Config(
                "stochastic update undefined at abar_t = 1".into(),
            ));
        }
        eta * ((S::one() - abar_prev) / (S::one() - abar_t)).sqrt()
            * (S::one() - abar_t / abar_prev).sqrt()
    };

    let root_t = abar_t.sqrt();
    let spread_t = (S::one() - abar_t).sqrt();
    let root_prev = abar_prev.sqrt();
    let dir = (S::one() - abar_prev - sigma * sigma).max(S::zero()).sqrt();

    let mut out = x.zip_map(eps_hat, |xv, ev| {
        let x0_hat = (xv - spread_t * ev) / root_t;
        root_prev * x0_hat + dir * ev
    })?;
    if sigma > S::zero() {
        let z = noise.ok_or_else(|| {
            Error::Config("eta > 0 requires a noise grid for the stochastic term".into())
        })?;
        out = out.zip_map(z, |o, zv| o + sigma * zv)?;
    }
    Ok(out)
}

/// [`ddim_update`] driven by schedule steps: move from step `t` to `t_prev`.
pub fn ddim_step<S: Scalar>(
    x_t: &Grid<S>,
    t: usize,
    t_prev: usize,
    eps_hat: &Grid<S>,
    schedule: &NoiseSchedule<S>,
    eta: S,
    noise: Option<&Grid<S>>,
) -> Result<Grid<S>> {
    if t_prev >= t {
        return Err(Error::Config(format!(
            "t_prev ({t_prev}) must be below t ({t})"
        )));
    }
    schedule.check_step(t)?;
    // t_prev may be 0 by the abar_0 = 1 convention.
    ddim_update(
        x_t,
        schedule.alpha_bar(t),
        schedule.alpha_bar(t_prev),
        eps_hat,
        eta,
        noise,
    )
}

/// Run the full DDIM chain from seeded `N(0, 1)` initialization at `t = T`
/// down to 0, without clamping. Shape is `(height, width, channels)`.
pub fn ddim_sample_raw<S: Scalar, D: Denoiser<S>>(
    denoiser: &D,
    schedule: &NoiseSchedule<S>,
    shape: (usize, usize, usize),
    substeps: usize,
    eta: S,
    seed: u64,
) -> Result<Grid<S>> {
    if !(eta >= S::zero() && eta <= S::one()) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    let seq = substep_sequence(schedule.steps(), substeps)?;
    let (h, w, c) = shape;
    let mut rng = rng_from_seed(seed);
    let mut x = Grid::standard_normal(w, h, c, &mut rng)?;
    for win in seq.windows(2) {
        let (t, t_prev) = (win[0], win[1]);
        let eps_hat = denoiser.predict(&x, t, schedule)?;
        let noise = if eta > S::zero() {
            Some(Grid::standard_normal(w, h, c, &mut rng)?)
        } else {
            None
        };
        x = ddim_step(&x, t, t_prev, &eps_hat, schedule, eta, noise.as_ref())?;
    }
    Ok(x)
}

/// [`ddim_sample_raw`] clamped into `[0, 1]` for export.
pub fn ddim_sample<S: Scalar, D: Denoiser<S>>(
    denoiser: &D,
    schedule: &NoiseSchedule<S>,
    shape: (usize, usize, usize),
    substeps: usize,
    eta: S,
    seed: u64,
) -> Result<ImageGrid<S>> {
    Ok(ddim_sample_raw(denoiser, schedule, shape, substeps, eta, seed)?.clamp_unit())
}

/// SHA-256 of the canonical JSON encoding of bare denoiser parameters.
/// Other artifacts store this to pin the exact backbone they were built
/// against.
pub fn params_fingerprint<S: Scalar>(params: &DenoiserParams<S>) -> String {
    let bytes = serde_json::to_vec(params).expect("params serialize");
    hex::encode(Sha256::digest(&bytes))
}

pub const DENOISER_ARTIFACT_VERSION: u32 = 1;

/// On-disk denoiser: parameters plus the schedule they were trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArtifact<S> {
    pub version: u32,
    pub schedule: ScheduleSpec<S>,
    pub params: DenoiserParams<S>,
}

impl<S: Scalar> DenoiserArtifact<S> {
    pub fn new(schedule: ScheduleSpec<S>, params: DenoiserParams<S>) -> Self {
        DenoiserArtifact {
            version: DENOISER_ARTIFACT_VERSION,
            schedule,
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
        let artifact: DenoiserArtifact<S> = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if artifact.version != DENOISER_ARTIFACT_VERSION {
            return Err(Error::ArtifactMismatch(format!(
                "denoiser artifact version {} (supported: {DENOISER_ARTIFACT_VERSION})",
                artifact.version
            )));
        }
        Ok(artifact)
    }

    /// SHA-256 of the canonical JSON encoding; stable across save/load.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("artifact serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Error unless the artifact was built under exactly this schedule.
    pub fn require_schedule(&self, spec: &ScheduleSpec<S>) -> Result<()> {
        if &self.schedule == spec {
            Ok(())
        } else {
            Err(Error::ArtifactMismatch(format!(
                "artifact schedule (steps={}, betas=[{}, {}]) differs from the requested one \
                 (steps={}, betas=[{}, {}])",
                self.schedule.steps,
                self.schedule.beta_start,
                self.schedule.beta_end,
                spec.steps,
                spec.beta_start,
                spec.beta_end
            )))
        }
    }
}
