use demix_core::audio::{self, SampleFormat, StemClass};
use demix_core::eval;
use demix_core::inference::{separate, SeparationPlan};
use demix_core::model::{build, load_checkpoint, save_checkpoint, ModelConfig};
use demix_core::noise::{self, CorruptionSpec};
use demix_core::synth::{synth_dataset, SynthSpec};
use demix_core::training::{self, MaskDims, Optimizer, TrainConfig, TrainState};

fn toy(n: usize, seconds: f64, seed: u64) -> Vec<audio::Track> {
    synth_dataset(n, &SynthSpec { sample_rate: 8000, seconds }, seed)
}

#[test]
fn dataset_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let tracks = toy(2, 0.5, 3);
    audio::save_dataset(dir.path(), &tracks, SampleFormat::Float32).unwrap();
    let back = audio::load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in tracks.iter().zip(&back) {
        assert_eq!(a.name, b.name);
        for c in StemClass::ALL {
            assert_eq!(a.stems.get(c).max_abs_diff(b.stems.get(c)), 0.0);
        }
    }
}

#[test]
fn corrupted_dataset_replays_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("clean"), dir.path().join("noisy"));
    let clean = toy(3, 0.5, 4);
    audio::save_dataset(&src, &clean, SampleFormat::Float32).unwrap();
    for spec in [CorruptionSpec::label_noise(1.0, 7), CorruptionSpec::bleeding(-6.0, 7)] {
        let manifest = noise::corrupt_dataset(&src, &dst, &spec).unwrap();
        let written = audio::load_dataset(&dst).unwrap();
        let replayed = noise::apply_manifest(&clean, &noise::load_manifest(dst.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest, noise::load_manifest(dst.join("manifest.json")).unwrap());
        for (w, r) in written.iter().zip(&replayed) {
            for c in StemClass::ALL {
                assert_eq!(w.stems.get(c).data(), r.stems.get(c).data());
            }
        }
    }
}

#[test]
fn train_checkpoint_separate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let tracks = toy(2, 1.0, 5);
    let cfg = ModelConfig {
        initial_channels: 4,
        growth: 4,
        ..ModelConfig::tiny()
    };
    let mut model = build(&cfg, 0).unwrap();
    let mut state = TrainState::new(&model, 0);
    let tc = TrainConfig {
        optimizer: Optimizer::Adam,
        learning_rate: 1e-3,
        batch_size: 2,
        chunk_frames: 16,
        loss_mask_dims: MaskDims::Batch,
        q: 0.5,
        steps: 3,
        steps_per_epoch: 3,
        early_stop_window: 10,
        early_stop_delta: 0.1,
        checkpoint_every: 0,
    };
    training::train(&mut model, &mut state, &tracks, &tc, None, &mut ()).unwrap();
    let path = dir.path().join("m.dmx");
    save_checkpoint(&path, &training::to_checkpoint(&model, &state, Some(&tc))).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    let (restored, saved_tc) = training::state_from_checkpoint(&ckpt).unwrap();
    assert_eq!(restored, state);
    assert_eq!(saved_tc, Some(tc));
    assert_eq!(ckpt.model.weights(), model.weights());

    let plan = SeparationPlan { chunk_frames: 16, overlap: 2 };
    let mix = tracks[0].stems.mixture();
    let est = separate(&ckpt.model, &mix, &plan, 1).unwrap();
    assert_eq!(est.len(), mix.len());
    let score = eval::evaluate_track("track00", &tracks[0].stems, &est, true).unwrap();
    assert!(score.mean.is_finite());
    let report = eval::aggregate(vec![score]).unwrap();
    assert_eq!(report.per_class_mean.len(), 4);
}
