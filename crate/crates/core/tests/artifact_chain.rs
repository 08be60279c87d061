//! Cross-module flows through the public API: artifacts written to disk,
//! reloaded, fingerprint-checked, and used for conditioned sampling.

use dermadiff::control::{
    init_adapter, train_adapter, AdapterArtifact, AdapterSpec, ConditionedDenoiser, Vocabulary,
};
use dermadiff::diffusion::{
    ddim_sample, train_denoiser, DenoiserArtifact, DenoiserParams, LinearDenoiser,
};
use dermadiff::metrics::{mse, ssim, SsimConfig};
use dermadiff::optimizer::{OptimizerKind, TrainConfig};
use dermadiff::pipeline::{make_toy_disks, TagSamplerConfig};
use dermadiff::schedule::{NoiseSchedule, ScheduleSpec};
use dermadiff::{ImageGridF32, ImageGridF64, NoiseScheduleF32};

fn cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        epochs,
        seed,
        optimizer: OptimizerKind::adam(),
    }
}

#[test]
fn artifacts_round_trip_and_reattach() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::default();
    let sampler = TagSamplerConfig::default();
    let data = make_toy_disks::<f64>(10, 8, 8, &vocab, &sampler, 1).unwrap();
    let images: Vec<ImageGridF64> = data.iter().map(|(image, _, _)| image.clone()).collect();

    let spec = ScheduleSpec {
        steps: 6,
        beta_start: 0.02,
        beta_end: 0.2,
    };
    let sched = NoiseSchedule::from_spec(&spec).unwrap();
    let trained = train_denoiser(&images, &sched, &cfg(2, 3)).unwrap();

    let den_path = dir.path().join("denoiser.json");
    DenoiserArtifact::new(spec.clone(), trained.params.clone())
        .save(&den_path)
        .unwrap();
    let loaded = DenoiserArtifact::<f64>::load(&den_path).unwrap();
    loaded.require_schedule(&spec).unwrap();
    assert_eq!(loaded.params, trained.params);

    let aspec = AdapterSpec {
        steps: 6,
        channels: 1,
        embed_dim: 4,
        init_scale: 0.05,
    };
    let adapter = init_adapter(loaded.params.clone(), aspec, vocab, 5).unwrap();
    let trained_adapter = train_adapter(adapter, &data, &sched, &cfg(2, 7)).unwrap();

    let ad_path = dir.path().join("adapter.json");
    AdapterArtifact::from_adapter(&trained_adapter.adapter)
        .save(&ad_path)
        .unwrap();

    // Reattaching to a different backbone must fail the fingerprint check;
    // the original backbone must reattach cleanly.
    let stranger = DenoiserParams::LinearPerStep(LinearDenoiser::zeros(6, (8, 8, 1)).unwrap());
    let art = AdapterArtifact::<f64>::load(&ad_path).unwrap();
    assert!(art.into_adapter(stranger).is_err());
    let art = AdapterArtifact::<f64>::load(&ad_path).unwrap();
    let reattached = art.into_adapter(loaded.params.clone()).unwrap();

    let (_, mask, tags) = &data[0];
    let cond = ConditionedDenoiser::new(&reattached, mask, tags).unwrap();
    let img = ddim_sample(&cond, &sched, (8, 8, 1), 3, 0.0, 11).unwrap();
    assert_eq!(img.grid().shape(), (8, 8, 1));
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(mse(&img, &img).unwrap(), 0.0);
    assert_eq!(ssim(&img, &img, &SsimConfig::default()).unwrap(), 1.0);
}

#[test]
fn both_precisions_train_and_sample() {
    let vocab = Vocabulary::default();
    let sampler = TagSamplerConfig::default();

    let data32 = make_toy_disks::<f32>(6, 8, 8, &vocab, &sampler, 2).unwrap();
    let images32: Vec<ImageGridF32> = data32.into_iter().map(|(image, _, _)| image).collect();
    let sched32: NoiseScheduleF32 = NoiseSchedule::linear(4, 0.05f32, 0.2).unwrap();
    let out32 = train_denoiser(&images32, &sched32, &cfg(1, 0)).unwrap();
    assert!(out32.epoch_loss.iter().all(|l| l.is_finite()));
    let img32 = ddim_sample(&out32.params, &sched32, (8, 8, 1), 2, 0.0f32, 1).unwrap();
    assert!(img32.data().iter().all(|v| (0.0f32..=1.0).contains(v)));

    let data64 = make_toy_disks::<f64>(6, 8, 8, &vocab, &sampler, 2).unwrap();
    let images64: Vec<ImageGridF64> = data64.into_iter().map(|(image, _, _)| image).collect();
    let sched64 = NoiseSchedule::linear(4, 0.05f64, 0.2).unwrap();
    let out64 = train_denoiser(&images64, &sched64, &cfg(1, 0)).unwrap();
    assert!(out64.epoch_loss.iter().all(|l| l.is_finite()));
    let img64 = ddim_sample(&out64.params, &sched64, (8, 8, 1), 2, 0.0f64, 1).unwrap();
    assert!(img64.data().iter().all(|v| (0.0f64..=1.0).contains(v)));
}
