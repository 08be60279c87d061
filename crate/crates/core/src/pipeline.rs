//! End-to-end orchestration: procedural masks and sampled prompts drive
//! conditioned sampling into a paired synthetic dataset, which is pooled
//! with real pairs, fed to the segmentation harness, and scored into a
//! JSON report.
//!
//! Every stage draws from seeds derived off one master seed, so a whole
//! experiment is reproducible from its config file alone and independent of
//! worker-thread count.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    init_adapter, train_adapter, AdapterArtifact, AdapterSpec, ConditionedDenoiser, ControlAdapter,
    PromptTags, Vocabulary,
};
use crate::datacore::{
    load_image, load_mask, read_manifest, save_image, save_mask, split_dataset, write_manifest,
    BinaryMask, ImageGrid, ManifestEntry,
};
use crate::diffusion::{ddim_sample, train_denoiser, DenoiserArtifact, DenoiserParams};
use crate::error::{Error, Result};
use crate::maskgen::{generate_circle_mask, MaskGenConfig};
use crate::optimizer::TrainConfig;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::seeding::{derive_seed, rng_from_seed};
use crate::segharness::{build_augmented, evaluate_dsc, train_segmenter, DEFAULT_DSC_THRESHOLD};

/// Distribution over prompts: an empty prompt with probability
/// `empty_prompt_prob`, otherwise a uniform lesion type plus each attribute
/// independently with probability `attribute_prob`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TagSamplerConfig {
    pub empty_prompt_prob: f64,
    pub attribute_prob: f64,
}

impl Default for TagSamplerConfig {
    fn default() -> Self {
        TagSamplerConfig {
            empty_prompt_prob: 0.1,
            attribute_prob: 0.3,
        }
    }
}

impl TagSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("empty_prompt_prob", self.empty_prompt_prob),
            ("attribute_prob", self.attribute_prob),
        ] {
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Draw one prompt. Consumes: the empty-prompt gate, then (if non-empty) the
/// lesion-type index and one inclusion draw per vocabulary attribute, in
/// vocabulary order.
pub fn sample_tags<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    cfg: &TagSamplerConfig,
    rng: &mut R,
) -> PromptTags {
    if rng.random_range(0.0..1.0) < cfg.empty_prompt_prob {
        return PromptTags::empty();
    }
    let idx = rng.random_range(0..vocab.lesion_types.len());
    let attributes = vocab
        .attributes
        .iter()
        .filter(|_| rng.random_range(0.0..1.0) < cfg.attribute_prob)
        .cloned()
        .collect();
    PromptTags {
        lesion_type: Some(vocab.lesion_types[idx].clone()),
        attributes,
    }
}

/// One record of a paired dataset.
pub type Record<S> = (ImageGrid<S>, BinaryMask, PromptTags);

/// Deterministic toy corpus: single-channel images with one bright disk
/// (intensity 0.8) on a dark background (0.2) under light uniform texture
/// noise, the disk itself as ground-truth mask, and sampled prompt tags.
pub fn make_toy_disks<S: Scalar>(
    n: usize,
    height: usize,
    width: usize,
    vocab: &Vocabulary,
    sampler: &TagSamplerConfig,
    seed: u64,
) -> Result<Vec<Record<S>>> {
    if n == 0 {
        return Err(Error::Config("toy dataset needs n >= 1".into()));
    }
    if height < 8 || width < 8 {
        return Err(Error::Config(format!(
            "toy disks need at least an 8x8 canvas, got {height}x{width}"
        )));
    }
    sampler.validate()?;
    vocab.validate()?;

    (0..n)
        .map(|i| {
            let item_seed = derive_seed(seed, i as u64);
            let mut geom = rng_from_seed(derive_seed(item_seed, 0));
            let side = height.min(width) as f64;
            let (lo, hi) = ((side / 8.0).max(2.0), side / 4.0);
            let radius = if hi > lo {
                geom.random_range(lo..hi)
            } else {
                lo
            };
            let margin = radius.ceil() as usize + 1;
            let cr = geom.random_range(margin..=height - 1 - margin);
            let cc = geom.random_range(margin..=width - 1 - margin);
            let mask = BinaryMask::from_fn(width, height, |r, c| {
                let dr = r as f64 - cr as f64;
                let dc = c as f64 - cc as f64;
                (dr * dr + dc * dc).sqrt() <= radius
            });
            let image = crate::datacore::Grid::from_fn(width, height, 1, |r, c, _| {
                let base = if mask.get(r, c) == 1 { 0.8 } else { 0.2 };
                S::cast(base + geom.random_range(-0.08..0.08))
            })?
            .clamp_unit();
            let tags = sample_tags(
                vocab,
                sampler,
                &mut rng_from_seed(derive_seed(item_seed, 1)),
            );
            Ok((image, mask, tags))
        })
        .collect()
}

/// Where the conditioning masks of a synthesis run come from: either the
/// procedural generator or a directory of mask PNGs (used in file-name sort
/// order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSource {
    Generate { config: MaskGenConfig },
    Directory { path: PathBuf },
}

fn default_substeps() -> usize {
    50
}

/// A self-contained synthesis request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisJob {
    pub denoiser_path: PathBuf,
    pub adapter_path: PathBuf,
    pub masks: MaskSource,
    #[serde(default)]
    pub sampler: TagSamplerConfig,
    pub n: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub eta: f64,
}

/// What a synthesis run produced: the manifest rows as written plus the
/// in-memory pairs in the same order.
#[derive(Clone, Debug)]
pub struct SynthesisOutput<S> {
    pub entries: Vec<ManifestEntry>,
    pub pairs: Vec<Record<S>>,
    pub manifest_path: PathBuf,
}

fn sorted_png_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

fn tags_to_entry_fields(tags: &PromptTags) -> (String, Vec<String>) {
    (
        tags.lesion_type.clone().unwrap_or_default(),
        tags.attributes.clone(),
    )
}

/// Synthesize `n` (image, mask, tags) triples with an in-memory adapter and
/// write them under `out_dir` (images/, masks/, manifest.jsonl).
///
/// Each pair's mask is exactly the mask that conditioned its sampler; that
/// is what makes the output usable as segmentation training data. Per-item
/// seeds derive from `seed`, so output bytes do not depend on thread count.
pub fn synthesize_with<S: Scalar>(
    adapter: &ControlAdapter<S>,
    schedule: &NoiseSchedule<S>,
    masks: &MaskSource,
    sampler: &TagSamplerConfig,
    n: usize,
    seed: u64,
    substeps: usize,
    eta: f64,
    out_dir: &Path,
) -> Result<SynthesisOutput<S>> {
    if n == 0 {
        return Err(Error::Config("synthesis needs n >= 1".into()));
    }
    sampler.validate()?;
    let channels = adapter.spec().channels;

    // Resolve the mask source up front so bad jobs fail before sampling.
    enum Source {
        Gen(MaskGenConfig),
        Files(Vec<PathBuf>),
    }
    let source = match masks {
        MaskSource::Generate { config } => {
            config.validate()?;
            Source::Gen(config.clone())
        }
        MaskSource::Directory { path } => {
            let files = sorted_png_paths(path)?;
            if files.len() < n {
                return Err(Error::Config(format!(
                    "mask directory {} holds {} PNG files but the job needs {n}",
                    path.display(),
                    files.len()
                )));
            }
            Source::Files(files)
        }
    };

    let pairs: Vec<Record<S>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<Record<S>> {
                let item_seed = derive_seed(seed, i as u64);
                let mask = match &source {
                    Source::Gen(cfg) => generate_circle_mask(cfg, derive_seed(item_seed, 0))?.mask,
                    Source::Files(files) => load_mask(&files[i])?,
                };
                let tags = sample_tags(
                    adapter.vocab(),
                    sampler,
                    &mut rng_from_seed(derive_seed(item_seed, 1)),
                );
                let denoiser = ConditionedDenoiser::new(adapter, &mask, &tags)?;
                let image = ddim_sample(
                    &denoiser,
                    schedule,
                    (mask.height(), mask.width(), channels),
                    substeps,
                    S::cast(eta),
                    derive_seed(item_seed, 2),
                )?;
                Ok((image, mask, tags))
            };
            run().map_err(|err| err.at_index(i))
        })
        .collect::<Result<_>>()?;

    let image_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;

    let mut entries = Vec::with_capacity(n);
    for (i, (image, mask, tags)) in pairs.iter().enumerate() {
        let image_rel = format!("images/{i:05}.png");
        let mask_rel = format!("masks/{i:05}.png");
        save_image(image, &out_dir.join(&image_rel))?;
        save_mask(mask, &out_dir.join(&mask_rel))?;
        let (lesion_type, attributes) = tags_to_entry_fields(tags);
        entries.push(ManifestEntry {
            image_path: image_rel,
            mask_path: mask_rel,
            lesion_type,
            attributes,
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&entries, &manifest_path)?;
    Ok(SynthesisOutput {
        entries,
        pairs,
        manifest_path,
    })
}

/// Load the artifacts named by a job and synthesize its pairs.
pub fn synthesize_pairs<S: Scalar>(job: &SynthesisJob) -> Result<SynthesisOutput<S>> {
    let backbone = DenoiserArtifact::<S>::load(&job.denoiser_path)?;
    let schedule = NoiseSchedule::from_spec(&backbone.schedule)?;
    let adapter = AdapterArtifact::<S>::load(&job.adapter_path)?.into_adapter(backbone.params)?;
    synthesize_with(
        &adapter,
        &schedule,
        &job.masks,
        &job.sampler,
        job.n,
        job.seed,
        job.substeps,
        job.eta,
        &job.out_dir,
    )
}

/// Training corpus for an experiment: generated in memory or loaded from a
/// JSON-Lines manifest (paths resolved relative to the manifest file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    ToyDisks {
        n: usize,
        height: usize,
        width: usize,
    },
    Manifest {
        path: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub ratio: (u32, u32, u32),
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratio: (7, 1, 2) }
    }
}

/// Backbone source: load a pinned artifact or train one on the train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserStage {
    Load { path: PathBuf },
    Train(TrainConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterStage {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    pub train: TrainConfig,
}

fn default_embed_dim() -> usize {
    16
}

fn default_init_scale() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationStage {
    pub train: TrainConfig,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Cap on how many real train-split pairs the segmenter sees (all by
    /// default). Models data-scarce regimes without shrinking the splits the
    /// generative models train on.
    #[serde(default)]
    pub real_n: Option<usize>,
}

fn default_threshold() -> f64 {
    DEFAULT_DSC_THRESHOLD
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub substeps: usize,
    pub eta: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            substeps: default_substeps(),
            eta: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub master: u64,
    /// One segmenter run per seed at every augmentation size.
    pub segmenter: Vec<u64>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            master: 0,
            segmenter: vec![0, 1, 2],
        }
    }
}

/// One experiment, one JSON document. Stage seeds derive from
/// `seeds.master`; the `seed` fields of nested train configs are ignored so
/// that a single value reproduces the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig<S> {
    pub schedule: ScheduleSpec<S>,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub denoiser: DenoiserStage,
    pub adapter: AdapterStage,
    #[serde(default)]
    pub maskgen: MaskGenConfig,
    #[serde(default)]
    pub sampler: TagSamplerConfig,
    pub segmentation: SegmentationStage,
    #[serde(default)]
    pub sampling: SamplingConfig,
    /// Synthetic-set sizes to evaluate; 0 (real data only) is always
    /// included as the baseline.
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub seeds: SeedConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DscRow {
    pub n_synth: usize,
    pub seed: u64,
    pub dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub backbone_fingerprint: String,
    pub sizes: Vec<usize>,
    pub rows: Vec<DscRow>,
}

// Fixed seed-derivation slots off the master seed, one per stage.
const SLOT_DATA: u64 = 0;
const SLOT_SPLIT: u64 = 1;
const SLOT_DENOISER: u64 = 2;
const SLOT_ADAPTER_INIT: u64 = 3;
const SLOT_ADAPTER_TRAIN: u64 = 4;
const SLOT_SYNTH: u64 = 5;

/// Materialize a [`DataConfig`] into records plus matching manifest rows
/// (placeholder paths for in-memory toy data). The seed only matters for
/// generated datasets.
pub fn load_dataset<S: Scalar>(
    data: &DataConfig,
    sampler: &TagSamplerConfig,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(Vec<Record<S>>, Vec<ManifestEntry>)> {
    match data {
        DataConfig::ToyDisks { n, height, width } => {
            let records = make_toy_disks(*n, *height, *width, vocab, sampler, seed)?;
            // In-memory records get placeholder paths purely so the split
            // can key on them; they are never opened.
            let entries = records
                .iter()
                .enumerate()
                .map(|(i, (_, _, tags))| {
                    let (lesion_type, attributes) = tags_to_entry_fields(tags);
                    ManifestEntry {
                        image_path: format!("toy/images/{i:05}.png"),
                        mask_path: format!("toy/masks/{i:05}.png"),
                        lesion_type,
                        attributes,
                    }
                })
                .collect();
            Ok((records, entries))
        }
        DataConfig::Manifest { path } => {
            let entries = read_manifest(path)?;
            if entries.is_empty() {
                return Err(Error::EmptyInput(format!("manifest {}", path.display())));
            }
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            let records = entries
                .iter()
                .enumerate()
                .map(|(i, entry)| {
                    let run = || -> Result<Record<S>> {
                        let image = load_image(&base.join(&entry.image_path))?;
                        let mask = load_mask(&base.join(&entry.mask_path))?;
                        let tags = PromptTags {
                            lesion_type: (!entry.lesion_type.is_empty())
                                .then(|| entry.lesion_type.clone()),
                            attributes: entry.attributes.clone(),
                        };
                        tags.validate(vocab)?;
                        Ok((image, mask, tags))
                    };
                    run().map_err(|err| err.at_index(i))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((records, entries))
        }
    }
}

/// Run the full protocol: split the data, obtain a backbone, train the
/// conditioning adapter, synthesize pair sets of each requested size, and
/// train/evaluate a segmenter per (size, seed). Writes denoiser.json,
/// adapter.json, synth/ and report.json under `out_dir`; any failure is
/// wrapped with its stage name.
pub fn run_experiment<S: Scalar>(
    cfg: &ExperimentConfig<S>,
    out_dir: &Path,
) -> Result<ExperimentReport> {
    let stage = |name: &'static str| move |err: Error| err.in_stage(name);

    // Upfront validation.
    let schedule = NoiseSchedule::from_spec(&cfg.schedule).map_err(stage("config"))?;
    cfg.sampler.validate().map_err(stage("config"))?;
    if cfg.seeds.segmenter.is_empty() {
        return Err(
            Error::Config("seeds.segmenter must name at least one seed".into()).in_stage("config"),
        );
    }
    let vocab = Vocabulary::default();
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir, e))
        .map_err(stage("config"))?;
    let master = cfg.seeds.master;

    // Data + split.
    let (records, entries) = load_dataset::<S>(
        &cfg.data,
        &cfg.sampler,
        &vocab,
        derive_seed(master, SLOT_DATA),
    )
    .map_err(stage("data"))?;
    let mut index_of = HashMap::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        if index_of.insert(entry.image_path.clone(), i).is_some() {
            return Err(Error::Config(format!(
                "duplicate image_path {} in dataset",
                entry.image_path
            ))
            .in_stage("data"));
        }
    }
    let split = split_dataset(&entries, cfg.split.ratio, derive_seed(master, SLOT_SPLIT))
        .map_err(stage("split"))?;
    let subset = |part: &[ManifestEntry]| -> Vec<&Record<S>> {
        part.iter()
            .map(|e| &records[index_of[&e.image_path]])
            .collect()
    };
    let train_records = subset(&split.train);
    let test_records = subset(&split.test);

    let shape = train_records
        .first()
        .map(|(img, _, _)| img.shape())
        .ok_or_else(|| Error::EmptyInput("train split".into()).in_stage("split"))?;
    if (cfg.maskgen.height, cfg.maskgen.width) != (shape.0, shape.1)
        && cfg.sizes.iter().any(|&n| n > 0)
    {
        return Err(Error::Config(format!(
            "maskgen canvas {}x{} does not match the data {}x{}",
            cfg.maskgen.height, cfg.maskgen.width, shape.0, shape.1
        ))
        .in_stage("config"));
    }

    // Backbone.
    let backbone: DenoiserParams<S> = match &cfg.denoiser {
        DenoiserStage::Load { path } => {
            let artifact = DenoiserArtifact::<S>::load(path).map_err(stage("train-denoiser"))?;
            artifact
                .require_schedule(&cfg.schedule)
                .map_err(stage("train-denoiser"))?;
            artifact.params
        }
        DenoiserStage::Train(train_cfg) => {
            let images: Vec<ImageGrid<S>> = train_records
                .iter()
                .map(|(img, _, _)| img.clone())
                .collect();
            let trained = train_denoiser(
                &images,
                &schedule,
                &train_cfg.with_seed(derive_seed(master, SLOT_DENOISER)),
            )
            .map_err(stage("train-denoiser"))?;
            trained.params
        }
    };
    let backbone_fingerprint = crate::diffusion::params_fingerprint(&backbone);
    DenoiserArtifact::new(cfg.schedule.clone(), backbone.clone())
        .save(&out_dir.join("denoiser.json"))
        .map_err(stage("train-denoiser"))?;

    // Adapter.
    let spec = AdapterSpec {
        steps: cfg.schedule.steps,
        channels: shape.2,
        embed_dim: cfg.adapter.embed_dim,
        init_scale: cfg.adapter.init_scale,
    };
    let adapter = init_adapter(
        backbone,
        spec,
        vocab.clone(),
        derive_seed(master, SLOT_ADAPTER_INIT),
    )
    .map_err(stage("train-adapter"))?;
    let adapter_data: Vec<Record<S>> = train_records.iter().map(|r| (*r).clone()).collect();
    let trained = train_adapter(
        adapter,
        &adapter_data,
        &schedule,
        &cfg.adapter
            .train
            .with_seed(derive_seed(master, SLOT_ADAPTER_TRAIN)),
    )
    .map_err(stage("train-adapter"))?;
    let adapter = trained.adapter;
    AdapterArtifact::from_adapter(&adapter)
        .save(&out_dir.join("adapter.json"))
        .map_err(stage("train-adapter"))?;

    // Synthesis: one run at the largest size; smaller sizes reuse prefixes,
    // matching the augmentation contract.
    let sizes: Vec<usize> = {
        let mut set: BTreeSet<usize> = cfg.sizes.iter().copied().collect();
        set.insert(0);
        set.into_iter().collect()
    };
    let n_max = *sizes.last().expect("sizes contains 0");
    let synth_pairs: Vec<(ImageGrid<S>, BinaryMask)> = if n_max > 0 {
        let output = synthesize_with(
            &adapter,
            &schedule,
            &MaskSource::Generate {
                config: cfg.maskgen.clone(),
            },
            &cfg.sampler,
            n_max,
            derive_seed(master, SLOT_SYNTH),
            cfg.sampling.substeps,
            cfg.sampling.eta,
            &out_dir.join("synth"),
        )
        .map_err(stage("synthesize"))?;
        output
            .pairs
            .into_iter()
            .map(|(img, mask, _)| (img, mask))
            .collect()
    } else {
        Vec::new()
    };

    // Segmentation sweep.
    let real_all: Vec<(ImageGrid<S>, BinaryMask)> = train_records
        .iter()
        .map(|(img, mask, _)| (img.clone(), mask.clone()))
        .collect();
    let real: Vec<(ImageGrid<S>, BinaryMask)> = match cfg.segmentation.real_n {
        None => real_all,
        Some(k) => {
            if k == 0 || k > real_all.len() {
                return Err(Error::Config(format!(
                    "segmentation.real_n must lie in [1, {}], got {k}",
                    real_all.len()
                ))
                .in_stage("segment"));
            }
            real_all.into_iter().take(k).collect()
        }
    };
    let testset: Vec<(ImageGrid<S>, BinaryMask)> = test_records
        .iter()
        .map(|(img, mask, _)| (img.clone(), mask.clone()))
        .collect();

    let combos: Vec<(usize, u64)> = sizes
        .iter()
        .flat_map(|&n| cfg.seeds.segmenter.iter().map(move |&s| (n, s)))
        .collect();
    let rows: Vec<DscRow> = combos
        .par_iter()
        .map(|&(n_synth, seed)| {
            let run = || -> Result<DscRow> {
                let data = build_augmented(real.clone(), synth_pairs.clone(), n_synth)?;
                let trained = train_segmenter(&data, &cfg.segmentation.train.with_seed(seed))?;
                let dsc = evaluate_dsc(&trained.params, &testset, cfg.segmentation.threshold)?;
                Ok(DscRow { n_synth, seed, dsc })
            };
            run().map_err(stage("segment"))
        })
        .collect::<Result<_>>()?;

    let report = ExperimentReport {
        n_train: split.train.len(),
        n_val: split.val.len(),
        n_test: split.test.len(),
        backbone_fingerprint,
        sizes,
        rows,
    };
    let report_path = out_dir.join("report.json");
    let file = fs::File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &report)
        .map_err(|e| Error::json(report_path.display().to_string(), e))
        .map_err(stage("report"))?;
    std::io::Write::write_all(&mut w, b"\n").map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}
