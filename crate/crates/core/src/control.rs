//! Mask- and tag-conditioned denoising built around a locked backbone.
//!
//! A [`ControlAdapter`] wraps any denoiser without touching its parameters:
//! a trainable per-step affine branch reads the concatenated per-pixel
//! channels `[x_t, mask, tag embedding]` and its output is added to the
//! backbone prediction through a per-step gain that starts at exactly zero.
//! At initialization the conditioned output therefore equals the backbone
//! output bit for bit, and training moves only the branch, the gains, and
//! the tag table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datacore::{BinaryMask, Grid, ImageGrid};
use crate::diffusion::{params_fingerprint, Denoiser, DenoiserParams};
use crate::error::{Error, Result};
use crate::optimizer::{Optimizer, TrainConfig};
use crate::scalar::Scalar;
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::seeding::rng_from_seed;

/// Tag names a prompt may use, split into one-of lesion types and
/// any-subset attributes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Vocabulary {
    pub lesion_types: Vec<String>,
    pub attributes: Vec<String>,
}

impl Default for Vocabulary {
    /// Dermatoscopy defaults: common diagnosis labels and dermoscopic
    /// structure attributes.
    fn default() -> Self {
        Vocabulary {
            lesion_types: vec![
                "melanoma".into(),
                "nevus".into(),
                "seborrheic-keratosis".into(),
                "basal-cell-carcinoma".into(),
            ],
            attributes: vec![
                "pigment-network".into(),
                "globules".into(),
                "streaks".into(),
                "milia-like-cysts".into(),
                "negative-network".into(),
            ],
        }
    }
}

impl Vocabulary {
    pub fn validate(&self) -> Result<()> {
        if self.lesion_types.is_empty() {
            return Err(Error::Config(
                "vocabulary needs at least one lesion type".into(),
            ));
        }
        let mut all = self.all_tags();
        if all.iter().any(|t| t.is_empty()) {
            return Err(Error::Config(
                "vocabulary tags must be non-empty strings".into(),
            ));
        }
        let before = all.len();
        all.dedup();
        if all.len() != before {
            return Err(Error::Config("vocabulary tags must be unique".into()));
        }
        Ok(())
    }

    /// All tags (lesion types and attributes), sorted; this fixes the row
    /// order of the embedding table.
    pub fn all_tags(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .lesion_types
            .iter()
            .chain(&self.attributes)
            .cloned()
            .collect();
        all.sort();
        all
    }
}

/// One prompt: an optional lesion type plus attribute tags. Both empty is
/// the empty prompt, which embeds to the zero vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTags {
    pub lesion_type: Option<String>,
    pub attributes: Vec<String>,
}

impl PromptTags {
    pub fn empty() -> Self {
        PromptTags::default()
    }

    pub fn is_empty(&self) -> bool {
        self.lesion_type.is_none() && self.attributes.is_empty()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if let Some(lt) = &self.lesion_type {
            if !vocab.lesion_types.contains(lt) {
                return Err(Error::UnknownTag(lt.clone()));
            }
        }
        for (i, attr) in self.attributes.iter().enumerate() {
            if !vocab.attributes.contains(attr) {
                return Err(Error::UnknownTag(attr.clone()));
            }
            if self.attributes[..i].contains(attr) {
                return Err(Error::Config(format!("duplicate attribute tag `{attr}`")));
            }
        }
        Ok(())
    }
}

/// Learned embedding vectors, one row per vocabulary tag, rows in sorted
/// tag order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagEmbeddingTable<S> {
    dim: usize,
    tags: Vec<String>,
    /// Row-major `tags.len() x dim`.
    vectors: Vec<S>,
}

impl<S: Scalar> TagEmbeddingTable<S> {
    fn init<R: Rng + ?Sized>(vocab: &Vocabulary, dim: usize, scale: S, rng: &mut R) -> Self {
        let tags = vocab.all_tags();
        let vectors = (0..tags.len() * dim)
            .map(|_| scale * S::standard_normal(rng))
            .collect();
        TagEmbeddingTable { dim, tags, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn vector(&self, tag: &str) -> Result<&[S]> {
        let row = self
            .tags
            .binary_search_by(|t| t.as_str().cmp(tag))
            .map_err(|_| Error::UnknownTag(tag.to_string()))?;
        Ok(&self.vectors[row * self.dim..(row + 1) * self.dim])
    }

    fn row_of(&self, tag: &str) -> Result<usize> {
        self.tags
            .binary_search_by(|t| t.as_str().cmp(tag))
            .map_err(|_| Error::UnknownTag(tag.to_string()))
    }
}

/// Sum of the table rows for every tag in the prompt; the empty prompt is
/// the zero vector. Rows are accumulated in table order, so two prompts
/// listing the same tags differently produce bit-identical vectors.
pub fn embed_tags<S: Scalar>(tags: &PromptTags, table: &TagEmbeddingTable<S>) -> Result<Vec<S>> {
    let mut rows = Vec::with_capacity(1 + tags.attributes.len());
    if let Some(lt) = &tags.lesion_type {
        rows.push(table.row_of(lt)?);
    }
    for attr in &tags.attributes {
        rows.push(table.row_of(attr)?);
    }
    rows.sort_unstable();
    let mut out = vec![S::zero(); table.dim];
    for row in rows {
        let vec = &table.vectors[row * table.dim..(row + 1) * table.dim];
        for (o, v) in out.iter_mut().zip(vec) {
            *o += *v;
        }
    }
    Ok(out)
}

/// Shape of the trainable branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    /// Schedule length the adapter serves; one parameter block per step.
    pub steps: usize,
    /// Image channels of the grids being denoised.
    pub channels: usize,
    /// Width of the tag embedding.
    pub embed_dim: usize,
    /// Standard deviation for the seeded-normal branch/table initialization.
    pub init_scale: f64,
}

impl AdapterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "adapter spec dims must be positive, got steps={}, channels={}, embed_dim={}",
                self.steps, self.channels, self.embed_dim
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::Config(format!(
                "init_scale must be finite and positive, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }
}

/// Per-step affine map over the concatenated per-pixel channels
/// `[x_t (C), mask (1), tag embedding (E)]`, producing a C-channel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBranch<S> {
    /// `steps x C x C`, row-major `[t][out][in]`: mixing of x_t channels.
    a: Vec<S>,
    /// `steps x C`: mask coefficient per output channel.
    m: Vec<S>,
    /// `steps x C x E`: tag-embedding read-out.
    u: Vec<S>,
    /// `steps x C`: bias.
    d: Vec<S>,
}

impl<S: Scalar> ControlBranch<S> {
    fn init<R: Rng + ?Sized>(spec: &AdapterSpec, rng: &mut R) -> Self {
        let scale = S::cast(spec.init_scale);
        let mut draw =
            |n: usize| -> Vec<S> { (0..n).map(|_| scale * S::standard_normal(rng)).collect() };
        let (t, c, e) = (spec.steps, spec.channels, spec.embed_dim);
        ControlBranch {
            a: draw(t * c * c),
            m: draw(t * c),
            u: draw(t * c * e),
            d: draw(t * c),
        }
    }
}

/// Locked backbone plus trainable conditioning pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlAdapter<S> {
    spec: AdapterSpec,
    backbone: DenoiserParams<S>,
    branch: ControlBranch<S>,
    /// Per-step output gain; exactly zero at initialization so the adapter
    /// starts as the identity on top of the backbone.
    gains: Vec<S>,
    vocab: Vocabulary,
    table: TagEmbeddingTable<S>,
}

/// Build an adapter around `backbone`. Branch and table weights are seeded
/// normals drawn in a fixed order (branch a, m, u, d, then table rows);
/// gains start at zero.
pub fn init_adapter<S: Scalar>(
    backbone: DenoiserParams<S>,
    spec: AdapterSpec,
    vocab: Vocabulary,
    seed: u64,
) -> Result<ControlAdapter<S>> {
    spec.validate()?;
    vocab.validate()?;
    if let DenoiserParams::LinearPerStep(lin) = &backbone {
        if lin.steps() != spec.steps || lin.shape().2 != spec.channels {
            return Err(Error::Config(format!(
                "adapter spec (steps={}, channels={}) does not match backbone (steps={}, channels={})",
                spec.steps,
                spec.channels,
                lin.steps(),
                lin.shape().2
            )));
        }
    }
    let mut rng = rng_from_seed(seed);
    let branch = ControlBranch::init(&spec, &mut rng);
    let table = TagEmbeddingTable::init(&vocab, spec.embed_dim, S::cast(spec.init_scale), &mut rng);
    Ok(ControlAdapter {
        gains: vec![S::zero(); spec.steps],
        spec,
        backbone,
        branch,
        vocab,
        table,
    })
}

impl<S: Scalar> ControlAdapter<S> {
    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn backbone(&self) -> &DenoiserParams<S> {
        &self.backbone
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn table(&self) -> &TagEmbeddingTable<S> {
        &self.table
    }

    pub fn gains(&self) -> &[S] {
        &self.gains
    }

    /// Trainable tensors in the fixed group order used by gradients and the
    /// optimizer: gains, branch a, branch m, branch u, branch d, tag table.
    pub fn trainable(&self) -> [&[S]; 6] {
        [
            &self.gains,
            &self.branch.a,
            &self.branch.m,
            &self.branch.u,
            &self.branch.d,
            &self.table.vectors,
        ]
    }

    /// Mutable view of the same groups, same order.
    pub fn trainable_mut(&mut self) -> [&mut [S]; 6] {
        [
            &mut self.gains,
            &mut self.branch.a,
            &mut self.branch.m,
            &mut self.branch.u,
            &mut self.branch.d,
            &mut self.table.vectors,
        ]
    }

    fn check_input(&self, x_t: &Grid<S>, t: usize, schedule: &NoiseSchedule<S>) -> Result<()> {
        if self.spec.steps != schedule.steps() {
            return Err(Error::ArtifactMismatch(format!(
                "adapter built for {} steps used with a {}-step schedule",
                self.spec.steps,
                schedule.steps()
            )));
        }
        schedule.check_step(t)?;
        if x_t.channels() != self.spec.channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.spec.channels),
                got: format!("{} channels", x_t.channels()),
            });
        }
        Ok(())
    }

    /// Raw branch output for step `t`; `mask` is the 0/1 grid and `embed`
    /// the already-summed tag vector.
    fn branch_output(&self, x_t: &Grid<S>, t: usize, mask: &Grid<S>, embed: &[S]) -> Grid<S> {
        let (c, e) = (self.spec.channels, self.spec.embed_dim);
        let idx = t - 1;
        let a = &self.branch.a[idx * c * c..(idx + 1) * c * c];
        let m = &self.branch.m[idx * c..(idx + 1) * c];
        let u = &self.branch.u[idx * c * e..(idx + 1) * c * e];
        let d = &self.branch.d[idx * c..(idx + 1) * c];
        // Tag term and bias are constant across pixels.
        let mut base = vec![S::zero(); c];
        for (co, b) in base.iter_mut().enumerate() {
            let mut acc = d[co];
            for (k, &ev) in embed.iter().enumerate() {
                acc += u[co * e + k] * ev;
            }
            *b = acc;
        }
        Grid::from_fn(x_t.width(), x_t.height(), c, |r, cc, co| {
            let mut acc = base[co] + m[co] * mask.get(r, cc, 0);
            for ci in 0..c {
                acc += a[co * c + ci] * x_t.get(r, cc, ci);
            }
            acc
        })
        .expect("branch output dims are valid")
    }

    /// `eps_hat = backbone(x_t, t) + gain_t * branch(x_t, t, mask, embed)`.
    ///
    /// When the step's gain is exactly zero the backbone grid is returned
    /// as-is, so the zero-initialized adapter is bit-exactly the backbone.
    fn conditioned_eps(
        &self,
        x_t: &Grid<S>,
        t: usize,
        mask: &Grid<S>,
        embed: &[S],
        schedule: &NoiseSchedule<S>,
    ) -> Result<Grid<S>> {
        self.check_input(x_t, t, schedule)?;
        if (mask.height(), mask.width()) != (x_t.height(), x_t.width()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} mask", x_t.height(), x_t.width()),
                got: format!("{}x{} mask", mask.height(), mask.width()),
            });
        }
        let backbone_out = self.backbone.predict(x_t, t, schedule)?;
        let g = self.gains[t - 1];
        if g == S::zero() {
            return Ok(backbone_out);
        }
        let b = self.branch_output(x_t, t, mask, embed);
        backbone_out.zip_map(&b, |bo, bv| bo + g * bv)
    }

    /// Conditioned prediction for one `(mask, tags)` prompt.
    pub fn conditioned_denoise(
        &self,
        x_t: &Grid<S>,
        t: usize,
        mask: &BinaryMask,
        tags: &PromptTags,
        schedule: &NoiseSchedule<S>,
    ) -> Result<Grid<S>> {
        ConditionedDenoiser::new(self, mask, tags)?.predict(x_t, t, schedule)
    }
}

/// An adapter with its prompt fixed, usable anywhere a denoiser is.
pub struct ConditionedDenoiser<'a, S> {
    adapter: &'a ControlAdapter<S>,
    mask: Grid<S>,
    embed: Vec<S>,
}

impl<'a, S: Scalar> ConditionedDenoiser<'a, S> {
    pub fn new(
        adapter: &'a ControlAdapter<S>,
        mask: &BinaryMask,
        tags: &PromptTags,
    ) -> Result<Self> {
        tags.validate(&adapter.vocab)?;
        let embed = embed_tags(tags, &adapter.table)?;
        Ok(ConditionedDenoiser {
            adapter,
            mask: mask.to_grid(),
            embed,
        })
    }
}

impl<S: Scalar> Denoiser<S> for ConditionedDenoiser<'_, S> {
    fn predict(&self, x_t: &Grid<S>, t: usize, schedule: &NoiseSchedule<S>) -> Result<Grid<S>> {
        self.adapter
            .conditioned_eps(x_t, t, &self.mask, &self.embed, schedule)
    }
}

/// One noised conditioning example; the forward-process invariant
/// `x_t = forward_diffuse(x0, t, eps)` holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBatchItem<S> {
    pub x0: Grid<S>,
    pub t: usize,
    pub eps: Grid<S>,
    pub x_t: Grid<S>,
    pub mask: Grid<S>,
    pub tags: PromptTags,
}

/// A drawn batch of conditioning examples.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBatch<S> {
    items: Vec<AdapterBatchItem<S>>,
}

impl<S: Scalar> AdapterBatch<S> {
    /// Draw `(t, eps)` for the selected items, in index order: step first,
    /// then the noise grid (same order as the plain denoiser batch).
    pub fn draw<R: Rng + ?Sized>(
        data: &[(ImageGrid<S>, BinaryMask, PromptTags)],
        indices: &[usize],
        schedule: &NoiseSchedule<S>,
        rng: &mut R,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("adapter batch".into()));
        }
        let mut items = Vec::with_capacity(indices.len());
        for &i in indices {
            let (image, mask, tags) = data.get(i).ok_or_else(|| {
                Error::Config(format!("index {i} outside data of {}", data.len()))
            })?;
            let x0 = image.grid();
            let t = rng.random_range(1..=schedule.steps());
            let eps = Grid::standard_normal(x0.width(), x0.height(), x0.channels(), rng)?;
            let x_t = forward_diffuse(x0, t, &eps, schedule)?;
            items.push(AdapterBatchItem {
                x0: x0.clone(),
                t,
                eps,
                x_t,
                mask: mask.to_grid(),
                tags: tags.clone(),
            });
        }
        Ok(AdapterBatch { items })
    }

    pub fn items(&self) -> &[AdapterBatchItem<S>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Gradients for the adapter's trainable tensors, in [`ControlAdapter::trainable`]
/// group order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads<S> {
    pub gains: Vec<S>,
    pub a: Vec<S>,
    pub m: Vec<S>,
    pub u: Vec<S>,
    pub d: Vec<S>,
    pub table: Vec<S>,
}

impl<S: Scalar> AdapterGrads<S> {
    pub fn group_slices(&self) -> [&[S]; 6] {
        [&self.gains, &self.a, &self.m, &self.u, &self.d, &self.table]
    }
}

/// Conditioned denoising loss (mean over items of mean squared noise error)
/// and its gradient with respect to every trainable tensor. The backbone is
/// a constant here: no gradient reaches it.
pub fn adapter_loss_and_grads<S: Scalar>(
    adapter: &ControlAdapter<S>,
    batch: &AdapterBatch<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<(S, AdapterGrads<S>)> {
    let (c, e) = (adapter.spec.channels, adapter.spec.embed_dim);
    let n = batch.len();
    let mut loss = S::zero();
    let mut grads = AdapterGrads {
        gains: vec![S::zero(); adapter.gains.len()],
        a: vec![S::zero(); adapter.branch.a.len()],
        m: vec![S::zero(); adapter.branch.m.len()],
        u: vec![S::zero(); adapter.branch.u.len()],
        d: vec![S::zero(); adapter.branch.d.len()],
        table: vec![S::zero(); adapter.table.vectors.len()],
    };

    for (i, item) in batch.items().iter().enumerate() {
        let mut run = || -> Result<()> {
            item.tags.validate(&adapter.vocab)?;
            let embed = embed_tags(&item.tags, &adapter.table)?;
            if (item.mask.height(), item.mask.width()) != (item.x_t.height(), item.x_t.width()) {
                return Err(Error::ShapeMismatch {
                    expected: item.x_t.shape_string(),
                    got: item.mask.shape_string(),
                });
            }
            let backbone_out = adapter.backbone.predict(&item.x_t, item.t, schedule)?;
            adapter.check_input(&item.x_t, item.t, schedule)?;
            let b = adapter.branch_output(&item.x_t, item.t, &item.mask, &embed);
            let idx = item.t - 1;
            let g = adapter.gains[idx];
            let d_len = item.x_t.len();
            let per = S::cast(1.0 / (n as f64 * d_len as f64));
            let kappa = S::cast(2.0 / (n as f64 * d_len as f64));

            let pixels = item.x_t.height() * item.x_t.width();
            // Per-output-channel residual sums feed the d/u/table gradients.
            let mut s_r = vec![S::zero(); c];
            let mut s_rx = vec![S::zero(); c * c];
            let mut s_rm = vec![S::zero(); c];
            let mut s_rb = S::zero();
            for p in 0..pixels {
                let (r, cc) = (p / item.x_t.width(), p % item.x_t.width());
                let mv = item.mask.get(r, cc, 0);
                for co in 0..c {
                    let pred = backbone_out.get(r, cc, co) + g * b.get(r, cc, co);
                    let res = pred - item.eps.get(r, cc, co);
                    loss += per * res * res;
                    s_r[co] += res;
                    s_rm[co] += res * mv;
                    s_rb += res * b.get(r, cc, co);
                    for ci in 0..c {
                        s_rx[co * c + ci] += res * item.x_t.get(r, cc, ci);
                    }
                }
            }
            grads.gains[idx] += kappa * s_rb;
            for co in 0..c {
                grads.d[idx * c + co] += kappa * g * s_r[co];
                grads.m[idx * c + co] += kappa * g * s_rm[co];
                for ci in 0..c {
                    grads.a[idx * c * c + co * c + ci] += kappa * g * s_rx[co * c + ci];
                }
                for (k, &ev) in embed.iter().enumerate() {
                    grads.u[idx * c * e + co * e + k] += kappa * g * s_r[co] * ev;
                }
            }
            // d(embed)/d(row) is the identity for every tag in the prompt.
            let mut d_embed = vec![S::zero(); e];
            for (k, dv) in d_embed.iter_mut().enumerate() {
                let mut acc = S::zero();
                for co in 0..c {
                    acc += s_r[co] * adapter.branch.u[idx * c * e + co * e + k];
                }
                *dv = kappa * g * acc;
            }
            let mut add_row = |tag: &str| -> Result<()> {
                let row = adapter.table.row_of(tag)?;
                for (k, &dv) in d_embed.iter().enumerate() {
                    grads.table[row * e + k] += dv;
                }
                Ok(())
            };
            if let Some(lt) = &item.tags.lesion_type {
                add_row(lt)?;
            }
            for attr in &item.tags.attributes {
                add_row(attr)?;
            }
            Ok(())
        };
        run().map_err(|err| err.at_index(i))?;
    }
    Ok((loss, grads))
}

/// A trained adapter plus its per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct TrainedAdapter<S> {
    pub adapter: ControlAdapter<S>,
    pub epoch_loss: Vec<S>,
}

/// Train the conditioning pieces; the backbone is asserted byte-identical
/// before and after.
pub fn train_adapter<S: Scalar>(
    adapter: ControlAdapter<S>,
    data: &[(ImageGrid<S>, BinaryMask, PromptTags)],
    schedule: &NoiseSchedule<S>,
    cfg: &TrainConfig,
) -> Result<TrainedAdapter<S>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("adapter training data".into()));
    }
    for (i, (image, mask, tags)) in data.iter().enumerate() {
        let run = || -> Result<()> {
            data[0].0.grid().check_same_shape(image.grid())?;
            if mask.shape() != (image.height(), image.width()) {
                return Err(Error::ShapeMismatch {
                    expected: image.grid().shape_string(),
                    got: format!("{}x{} mask", mask.height(), mask.width()),
                });
            }
            tags.validate(adapter.vocab())
        };
        run().map_err(|err| err.at_index(i))?;
    }

    let backbone_before = params_fingerprint(&adapter.backbone);
    let mut adapter = adapter;
    let sizes: Vec<usize> = adapter.trainable().iter().map(|g| g.len()).collect();
    let mut opt = Optimizer::new(cfg, &sizes)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = S::zero();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = AdapterBatch::draw(data, chunk, schedule, &mut rng)?;
            let (loss, grads) = adapter_loss_and_grads(&adapter, &batch, schedule)?;
            opt.step(&mut adapter.trainable_mut(), &grads.group_slices());
            sum += loss * S::cast(chunk.len() as f64);
            seen += chunk.len();
        }
        epoch_loss.push(sum / S::cast(seen as f64));
    }

    assert_eq!(
        params_fingerprint(&adapter.backbone),
        backbone_before,
        "locked backbone changed during adapter training"
    );
    Ok(TrainedAdapter {
        adapter,
        epoch_loss,
    })
}

pub const ADAPTER_ARTIFACT_VERSION: u32 = 1;

/// On-disk adapter: everything trainable plus the fingerprint of the locked
/// backbone it belongs to. The backbone itself lives in its own artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterArtifact<S> {
    pub version: u32,
    pub backbone_fingerprint: String,
    pub spec: AdapterSpec,
    pub vocab: Vocabulary,
    pub table: TagEmbeddingTable<S>,
    pub branch: ControlBranch<S>,
    pub gains: Vec<S>,
}

impl<S: Scalar> AdapterArtifact<S> {
    pub fn from_adapter(adapter: &ControlAdapter<S>) -> Self {
        AdapterArtifact {
            version: ADAPTER_ARTIFACT_VERSION,
            backbone_fingerprint: params_fingerprint(&adapter.backbone),
            spec: adapter.spec,
            vocab: adapter.vocab.clone(),
            table: adapter.table.clone(),
            branch: adapter.branch.clone(),
            gains: adapter.gains.clone(),
        }
    }

    /// Reattach to a backbone; errors unless it is byte-for-byte the one
    /// the adapter was built against.
    pub fn into_adapter(self, backbone: DenoiserParams<S>) -> Result<ControlAdapter<S>> {
        let fp = params_fingerprint(&backbone);
        if fp != self.backbone_fingerprint {
            return Err(Error::ArtifactMismatch(format!(
                "adapter was built against backbone {}..., got {}...",
                &self.backbone_fingerprint[..12.min(self.backbone_fingerprint.len())],
                &fp[..12]
            )));
        }
        Ok(ControlAdapter {
            spec: self.spec,
            backbone,
            branch: self.branch,
            gains: self.gains,
            vocab: self.vocab,
            table: self.table,
        })
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
        let artifact: AdapterArtifact<S> = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if artifact.version != ADAPTER_ARTIFACT_VERSION {
            return Err(Error::ArtifactMismatch(format!(
                "adapter artifact version {} (supported: {ADAPTER_ARTIFACT_VERSION})",
                artifact.version
            )));
        }
        Ok(artifact)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ddim_sample_raw, denoiser_mse, DiffusionBatch, LinearDenoiser};
    use approx::assert_relative_eq;

    fn sched4() -> NoiseSchedule<f64> {
        NoiseSchedule::linear(4, 0.05, 0.3).unwrap()
    }

    fn spec4() -> AdapterSpec {
        AdapterSpec {
            steps: 4,
            channels: 1,
            embed_dim: 3,
            init_scale: 0.1,
        }
    }

    fn disk_mask(h: usize, w: usize, cr: usize, cc: usize, radius: f64) -> BinaryMask {
        BinaryMask::from_fn(w, h, |r, c| {
            let dr = r as f64 - cr as f64;
            let dc = c as f64 - cc as f64;
            (dr * dr + dc * dc).sqrt() <= radius
        })
    }

    #[test]
    fn vocabulary_default_is_consistent() {
        let vocab = Vocabulary::default();
        vocab.validate().unwrap();
        let tags = vocab.all_tags();
        assert_eq!(tags.len(), 9);
        assert!(tags.windows(2).all(|w| w[0] < w[1]), "sorted and unique");

        let dup = Vocabulary {
            lesion_types: vec!["melanoma".into()],
            attributes: vec!["melanoma".into()],
        };
        assert!(dup.validate().is_err());
        let empty = Vocabulary {
            lesion_types: vec![],
            attributes: vec!["globules".into()],
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn embedding_is_additive_and_order_free() {
        let vocab = Vocabulary::default();
        let mut rng = rng_from_seed(1);
        let table = TagEmbeddingTable::<f64>::init(&vocab, 5, 0.1, &mut rng);

        let zero = embed_tags(&PromptTags::empty(), &table).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let single = PromptTags {
            lesion_type: Some("nevus".into()),
            attributes: vec![],
        };
        assert_eq!(
            embed_tags(&single, &table).unwrap(),
            table.vector("nevus").unwrap()
        );

        let ab = PromptTags {
            lesion_type: Some("melanoma".into()),
            attributes: vec!["globules".into(), "streaks".into()],
        };
        let ba = PromptTags {
            lesion_type: Some("melanoma".into()),
            attributes: vec!["streaks".into(), "globules".into()],
        };
        assert_eq!(
            embed_tags(&ab, &table).unwrap(),
            embed_tags(&ba, &table).unwrap()
        );

        let unknown = PromptTags {
            lesion_type: Some("wart".into()),
            attributes: vec![],
        };
        match embed_tags(&unknown, &table).unwrap_err() {
            Error::UnknownTag(t) => assert_eq!(t, "wart"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn prompt_validation_against_vocabulary() {
        let vocab = Vocabulary::default();
        let ok = PromptTags {
            lesion_type: Some("melanoma".into()),
            attributes: vec!["globules".into()],
        };
        ok.validate(&vocab).unwrap();

        let bad_attr = PromptTags {
            lesion_type: None,
            attributes: vec!["sparkles".into()],
        };
        assert!(matches!(
            bad_attr.validate(&vocab),
            Err(Error::UnknownTag(_))
        ));

        let dup = PromptTags {
            lesion_type: None,
            attributes: vec!["globules".into(), "globules".into()],
        };
        assert!(dup.validate(&vocab).is_err());

        // A lesion type used as an attribute is unknown in that position.
        let crossed = PromptTags {
            lesion_type: None,
            attributes: vec!["melanoma".into()],
        };
        assert!(crossed.validate(&vocab).is_err());
    }

    #[test]
    fn init_is_seeded_and_zero_gained() {
        let backbone =
            DenoiserParams::LinearPerStep(LinearDenoiser::<f64>::zeros(4, (5, 5, 1)).unwrap());
        let a = init_adapter(backbone.clone(), spec4(), Vocabulary::default(), 7).unwrap();
        let b = init_adapter(backbone.clone(), spec4(), Vocabulary::default(), 7).unwrap();
        let c = init_adapter(backbone, spec4(), Vocabulary::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.gains().iter().all(|&g| g == 0.0));

        // Spec/backbone disagreement is rejected.
        let wrong =
            DenoiserParams::LinearPerStep(LinearDenoiser::<f64>::zeros(5, (5, 5, 1)).unwrap());
        assert!(init_adapter(wrong, spec4(), Vocabulary::default(), 7).is_err());
    }

    #[test]
    fn zero_init_adapter_is_bitwise_backbone() {
        // A backbone with nonzero parameters, reached via training.
        let sched = sched4();
        let mut rng = rng_from_seed(40);
        let data: Vec<ImageGrid<f64>> = (0..4)
            .map(|_| {
                ImageGrid::new(
                    Grid::from_fn(5, 5, 1, |_, _, _| rng.random_range(0.0..1.0)).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 4,
            epochs: 3,
            seed: 1,
            ..TrainConfig::default()
        };
        let backbone = crate::diffusion::train_denoiser(&data, &sched, &cfg)
            .unwrap()
            .params;

        let adapter = init_adapter(backbone.clone(), spec4(), Vocabulary::default(), 7).unwrap();
        let mask = disk_mask(5, 5, 2, 2, 1.5);
        let tags = PromptTags {
            lesion_type: Some("melanoma".into()),
            attributes: vec!["streaks".into()],
        };
        for probe in 0..20u64 {
            let x = Grid::standard_normal(5, 5, 1, &mut rng_from_seed(100 + probe)).unwrap();
            let t = (probe as usize % 4) + 1;
            let conditioned = adapter
                .conditioned_denoise(&x, t, &mask, &tags, &sched)
                .unwrap();
            let plain = backbone.predict(&x, t, &sched).unwrap();
            assert_eq!(conditioned, plain, "probe {probe}");
        }
    }

    #[test]
    fn unit_gain_with_zeroed_branch_is_backbone() {
        let backbone =
            DenoiserParams::LinearPerStep(LinearDenoiser::<f64>::zeros(4, (5, 5, 1)).unwrap());
        let mut adapter = init_adapter(backbone, spec4(), Vocabulary::default(), 7).unwrap();
        {
            let [gains, a, m, u, d, _table] = adapter.trainable_mut();
            gains.iter_mut().for_each(|g| *g = 1.0);
            a.iter_mut().for_each(|v| *v = 0.0);
            m.iter_mut().for_each(|v| *v = 0.0);
            u.iter_mut().for_each(|v| *v = 0.0);
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        let sched = sched4();
        let x = Grid::standard_normal(5, 5, 1, &mut rng_from_seed(50)).unwrap();
        let mask = disk_mask(5, 5, 2, 2, 1.5);
        let out = adapter
            .conditioned_denoise(&x, 2, &mask, &PromptTags::empty(), &sched)
            .unwrap();
        let plain = adapter.backbone().predict(&x, 2, &sched).unwrap();
        for (o, p) in out.data().iter().zip(plain.data()) {
            assert_relative_eq!(o, p, epsilon = 0.0);
        }
    }

    #[test]
    fn conditioning_reaches_the_output() {
        let backbone =
            DenoiserParams::LinearPerStep(LinearDenoiser::<f64>::zeros(4, (5, 5, 1)).unwrap());
        let mut adapter = init_adapter(backbone, spec4(), Vocabulary::default(), 7).unwrap();
        adapter.trainable_mut()[0].iter_mut().for_each(|g| *g = 0.5);

        let sched = sched4();
        let x = Grid::standard_normal(5, 5, 1, &mut rng_from_seed(51)).unwrap();
        let mask_a = disk_mask(5, 5, 1, 1, 1.0);
        let mask_b = disk_mask(5, 5, 3, 3, 1.0);
        let out_a = adapter
            .conditioned_denoise(&x, 2, &mask_a, &PromptTags::empty(), &sched)
            .unwrap();
        let out_b = adapter
            .conditioned_denoise(&x, 2, &mask_b, &PromptTags::empty(), &sched)
            .unwrap();
        assert_ne!(out_a, out_b);

        // Different prompts also reach the output.
        let with_tags = adapter
            .conditioned_denoise(
                &x,
                2,
                &mask_a,
                &PromptTags {
                    lesion_type: Some("nevus".into()),
                    attributes: vec![],
                },
                &sched,
            )
            .unwrap();
        assert_ne!(out_a, with_tags);
    }

    fn toy_conditioned_data(n: usize, seed: u64) -> Vec<(ImageGrid<f64>, BinaryMask, PromptTags)> {
        // Images are brighter exactly where the mask is set, so the true
        // noise is a function of (x_t, mask) the branch can represent.
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let cr = 1 + (i + rng.random_range(0..2)) % 4;
                let cc = 1 + (i * 2 + rng.random_range(0..2)) % 4;
                let mask = disk_mask(6, 6, cr, cc, 1.3);
                let image = ImageGrid::new(
                    Grid::from_fn(
                        6,
                        6,
                        1,
                        |r, c, _| {
                            if mask.get(r, c) == 1 {
                                0.8
                            } else {
                                0.2
                            }
                        },
                    )
                    .unwrap(),
                )
                .unwrap();
                let tags = PromptTags {
                    lesion_type: Some("nevus".into()),
                    attributes: vec![],
                };
                (image, mask, tags)
            })
            .collect()
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let sched = sched4();
        let data = toy_conditioned_data(3, 60);
        let mut rng = rng_from_seed(61);
        let batch = AdapterBatch::draw(&data, &[0, 1, 2], &sched, &mut rng).unwrap();

        let backbone =
            DenoiserParams::LinearPerStep(LinearDenoiser::<f64>::zeros(4, (6, 6, 1)).unwrap());
        let mut adapter = init_adapter(
            backbone,
            AdapterSpec {
                steps: 4,
                channels: 1,
                embed_dim: 8,
                init_scale: 0.3,
            },
            Vocabulary::default(),
            62,
        )
        .unwrap();
        // Nonzero gains so every parameter group has gradient flow.
        for (i, g) in adapter.trainable_mut()[0].iter_mut().enumerate() {
            *g = 0.3 + 0.1 * i as f64;
        }

        let (_, grads) = adapter_loss_and_grads(&adapter, &batch, &sched).unwrap();
        let grad_groups: Vec<Vec<f64>> = grads.group_slices().iter().map(|s| s.to_vec()).collect();

        let h = 1e-5;
        let mut checked = 0usize;
        for group in 0..6 {
            let len = adapter.trainable()[group].len();
            for idx in 0..len {
                let orig = adapter.trainable()[group][idx];
                adapter.trainable_mut()[group][idx] = orig + h;
                let up = adapter_loss_and_grads(&adapter, &batch, &sched).unwrap().0;
                adapter.trainable_mut()[group][idx] = orig - h;
                let down = adapter_loss_and_grads(&adapter, &batch, &sched).unwrap().0;
                adapter.trainable_mut()[group][idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let analytic = grad_groups[group][idx];
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-4,
                    "group {group} idx {idx}: analytic {analytic} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 100, "only {checked} coordinates checked");
    }

    #[test]
    fn training_locks_backbone_and_zero_lr_is_identity() {
        let sched = sched4();
        let data = toy_conditioned_data(4, 70);
        let backbone =
            DenoiserParams::LinearPerStep(LinearDenoiser::<f64>::zeros(4, (6, 6, 1)).unwrap());
        let adapter = init_adapter(backbone, spec4(), Vocabulary::default(), 71).unwrap();
        let fp_before = params_fingerprint(adapter.backbone());

        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 4,
            epochs: 10,
            seed: 5,
            ..TrainConfig::default()
        };
        let trained = train_adapter(adapter.clone(), &data, &sched, &cfg).unwrap();
        assert_eq!(params_fingerprint(trained.adapter.backbone()), fp_before);
        assert_ne!(trained.adapter, adapter, "training should move something");

        let mut zero_cfg = cfg.clone();
        zero_cfg.learning_rate = 0.0;
        let frozen = train_adapter(adapter.clone(), &data, &sched, &zero_cfg).unwrap();
        assert_eq!(frozen.adapter, adapter);

        // Same seed, same result.
        let again = train_adapter(adapter.clone(), &data, &sched, &cfg).unwrap();
        assert_eq!(again.adapter, trained.adapter);
        assert_eq!(again.epoch_loss, trained.epoch_loss);
    }

    /// With a zero backbone, conditioning is the only way to predict the
    /// noise; after training, the conditioned loss on held-out draws must
    /// beat the backbone alone by a wide margin.
    #[test]
    fn conditioning_beats_locked_backbone_on_mask_dependent_data() {
        let sched = sched4();
        let train_data = toy_conditioned_data(8, 80);
        let backbone =
            DenoiserParams::LinearPerStep(LinearDenoiser::<f64>::zeros(4, (6, 6, 1)).unwrap());
        let adapter = init_adapter(backbone.clone(), spec4(), Vocabulary::default(), 81).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.02,
            batch_size: 8,
            epochs: 800,
            seed: 9,
            ..TrainConfig::default()
        };
        let trained = train_adapter(adapter, &train_data, &sched, &cfg).unwrap();

        let held_out = toy_conditioned_data(6, 90);
        let indices: Vec<usize> = (0..held_out.len()).collect();
        let mut rng = rng_from_seed(91);
        let eval = AdapterBatch::draw(&held_out, &indices, &sched, &mut rng).unwrap();
        let conditioned_loss = adapter_loss_and_grads(&trained.adapter, &eval, &sched)
            .unwrap()
            .0;

        // Identical draws for the backbone comparison: same seed, same order.
        let images: Vec<&Grid<f64>> = held_out.iter().map(|(im, _, _)| im.grid()).collect();
        let mut rng = rng_from_seed(91);
        let plain = DiffusionBatch::draw(&images, &sched, &mut rng).unwrap();
        let backbone_loss = denoiser_mse(&backbone, &plain, &sched).unwrap();

        assert!(
            conditioned_loss < 0.7 * backbone_loss,
            "conditioned {conditioned_loss} vs backbone {backbone_loss}"
        );
    }

    #[test]
    fn conditioned_sampling_runs_and_matches_backbone_at_zero_gain() {
        let sched = sched4();
        let backbone = crate::diffusion::analytic_gaussian_denoiser(0.5, 0.2).unwrap();
        let adapter = init_adapter(backbone.clone(), spec4(), Vocabulary::default(), 95).unwrap();
        let mask = disk_mask(5, 5, 2, 2, 1.5);
        let wrapped = ConditionedDenoiser::new(&adapter, &mask, &PromptTags::empty()).unwrap();

        let via_adapter = ddim_sample_raw(&wrapped, &sched, (5, 5, 1), 4, 0.0, 123).unwrap();
        let via_backbone = ddim_sample_raw(&backbone, &sched, (5, 5, 1), 4, 0.0, 123).unwrap();
        assert_eq!(via_adapter, via_backbone);
    }

    #[test]
    fn artifact_round_trip_and_backbone_pinning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.json");
        let backbone =
            DenoiserParams::LinearPerStep(LinearDenoiser::<f64>::zeros(4, (5, 5, 1)).unwrap());
        let adapter = init_adapter(backbone.clone(), spec4(), Vocabulary::default(), 96).unwrap();

        let artifact = AdapterArtifact::from_adapter(&adapter);
        artifact.save(&path).unwrap();
        let loaded = AdapterArtifact::<f64>::load(&path).unwrap();
        assert_eq!(loaded, artifact);
        let restored = loaded.into_adapter(backbone.clone()).unwrap();
        assert_eq!(restored, adapter);

        // A different backbone is refused.
        let other = crate::diffusion::analytic_gaussian_denoiser(0.5, 0.1).unwrap();
        assert!(matches!(
            AdapterArtifact::<f64>::load(&path)
                .unwrap()
                .into_adapter(other),
            Err(Error::ArtifactMismatch(_))
        ));

        let mut bad = artifact.clone();
        bad.version = 99;
        bad.save(&path).unwrap();
        assert!(matches!(
            AdapterArtifact::<f64>::load(&path),
            Err(Error::ArtifactMismatch(_))
        ));
    }

    #[test]
    fn batch_draw_validates_indices() {
        let sched = sched4();
        let data = toy_conditioned_data(2, 97);
        let mut rng = rng_from_seed(98);
        assert!(AdapterBatch::<f64>::draw(&data, &[], &sched, &mut rng).is_err());
        assert!(AdapterBatch::<f64>::draw(&data, &[5], &sched, &mut rng).is_err());
        let batch = AdapterBatch::draw(&data, &[0, 1], &sched, &mut rng).unwrap();
        assert_eq!(batch.len(), 2);
        assert!(!batch.is_empty());
    }
}
