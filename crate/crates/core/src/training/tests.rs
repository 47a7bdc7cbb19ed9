use super::*;
use crate::audio::{StemSet, Waveform};
use crate::model::{build, read_checkpoint, write_checkpoint, ModelConfig};
use crate::tensor::{finite_diff_check, ProbeSelection};

fn small_config() -> ModelConfig {
    ModelConfig {
        initial_channels: 4,
        growth: 4,
        ..ModelConfig::tiny()
    }
}

fn toy_tracks(n: usize, len: usize) -> Vec<Track> {
    (0..n)
        .map(|t| Track {
            name: format!("t{t}"),
            stems: StemSet::new(std::array::from_fn(|c| {
                let f = 0.01 * (c + 1) as f64 + 0.003 * t as f64;
                let ch = |phase: f64| (0..len).map(|i| (0.3 * (f * i as f64 * 6.283 + phase).sin()) as f32).collect();
                Waveform::new(8000, vec![ch(0.0), ch(1.0)]).unwrap()
            }))
            .unwrap(),
        })
        .collect()
}

fn train_config(dims: MaskDims, q: f64) -> TrainConfig {
    TrainConfig {
        optimizer: Optimizer::Adam,
        learning_rate: 1e-3,
        batch_size: 3,
        chunk_frames: 8,
        loss_mask_dims: dims,
        q,
        steps: 4,
        steps_per_epoch: 2,
        early_stop_window: 2,
        early_stop_delta: 0.1,
        checkpoint_every: 0,
    }
}

#[test]
fn early_stop_rule() {
    assert!(!early_stop(&[1.0, 1.0], 2, 0.1));
    assert!(!early_stop(&[1.0, 2.0, 3.0], 2, 0.1));
    assert!(early_stop(&[5.0, 5.05, 5.02], 2, 0.1));
    assert!(early_stop(&[5.0, 4.0, 3.0], 2, 0.1));
    assert!(!early_stop(&[5.0, 4.0, 5.2], 2, 0.1));
}

#[test]
fn step_rng_depends_on_seed_and_step() {
    use rand::RngCore;
    let model = build(&small_config(), 0).unwrap();
    let mut a = TrainState::new(&model, 3);
    let first = a.step_rng().next_u64();
    assert_eq!(first, a.step_rng().next_u64());
    a.step = 1;
    assert_ne!(first, a.step_rng().next_u64());
    assert_ne!(first, TrainState::new(&model, 4).step_rng().next_u64());
}

#[test]
fn prepared_input_is_padded_to_frame_multiple() {
    let model = build(&small_config(), 0).unwrap();
    let tracks = toy_tracks(2, 1000);
    let batch = sample_batch(&tracks, &model.config().sources, 2, 256, &mut TrainState::new(&model, 0).step_rng()).unwrap();
    let (x, frames) = prepare_inputs(&model, &batch).unwrap();
    assert_eq!(frames, 9);
    assert_eq!(x.shape(), &[2, 4, 64, 12]);
    let tail = x.data().chunks(12).all(|row| row[9..].iter().all(|&v| v == 0.0));
    assert!(tail);
}

#[test]
fn steps_reduce_loss_on_fixed_batch() {
    let mut model = build(&small_config(), 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        ..train_config(MaskDims::None, 1.0)
    };
    let mut state = TrainState::new(&model, 0);
    let tracks = toy_tracks(3, 1000);
    let batch = sample_batch(&tracks, &model.config().sources, 3, 256, &mut state.step_rng()).unwrap();
    let first = train_step(&mut model, &batch, &cfg, &mut state).unwrap();
    let mut last = first;
    for _ in 0..15 {
        last = train_step(&mut model, &batch, &cfg, &mut state).unwrap();
    }
    assert_eq!(state.step, 16);
    assert!(last.raw_loss < first.raw_loss, "{first:?} -> {last:?}");
    assert_eq!(first.kept_fraction, 1.0);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let tracks = toy_tracks(3, 1000);
    let mut model = build(&small_config(), 3).unwrap();
    let before = model.weights().clone();
    let mut state = TrainState::new(&model, 1);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..train_config(MaskDims::Batch, 0.4)
    };
    train(&mut model, &mut state, &tracks, &cfg, None, &mut ()).unwrap();
    assert_eq!(model.weights(), &before);
    assert_eq!(state.step, 4);
}

#[test]
fn moving_average_loss_decreases_on_single_track() {
    let tracks = toy_tracks(1, 4000);
    let mut model = build(&small_config(), 4).unwrap();
    let mut state = TrainState::new(&model, 2);
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 2,
        chunk_frames: 16,
        ..train_config(MaskDims::None, 1.0)
    };
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut rng = state.step_rng();
        let batch = sample_batch(&tracks, &model.config().sources, cfg.batch_size, cfg.chunk_frames * 32, &mut rng).unwrap();
        losses.push(train_step(&mut model, &batch, &cfg, &mut state).unwrap().raw_loss);
    }
    let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let (first, last) = (avg(&losses[..10]), avg(&losses[40..]));
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn no_masking_equals_full_quantile() {
    let tracks = toy_tracks(3, 1000);
    let run = |cfg: TrainConfig| {
        let mut model = build(&small_config(), 2).unwrap();
        let mut state = TrainState::new(&model, 5);
        train(&mut model, &mut state, &tracks, &cfg, None, &mut ()).unwrap();
        model
    };
    let a = run(train_config(MaskDims::None, 0.4));
    let b = run(train_config(MaskDims::Batch, 1.0));
    assert_eq!(a.weights(), b.weights());
}

#[test]
fn masked_step_reports_kept_fraction() {
    let mut model = build(&small_config(), 2).unwrap();
    let mut state = TrainState::new(&model, 0);
    let tracks = toy_tracks(3, 1000);
    let mut cfg = train_config(MaskDims::Batch, 0.4);
    cfg.batch_size = 5;
    let batch = sample_batch(&tracks, &model.config().sources, 5, 256, &mut state.step_rng()).unwrap();
    let o = train_step(&mut model, &batch, &cfg, &mut state).unwrap();
    // 2 of 5 per class
    assert!((o.kept_fraction - 0.4).abs() < 1e-12);
    assert!(o.masked_loss <= o.raw_loss);

    cfg.loss_mask_dims = MaskDims::BatchTime;
    let o = train_step(&mut model, &batch, &cfg, &mut state).unwrap();
    // 5 items x 8 hop segments = 40 pooled, keep 16
    assert!((o.kept_fraction - 0.4).abs() < 1e-12);
}

#[test]
fn resume_is_bit_exact() {
    let tracks = toy_tracks(3, 1000);
    let cfg = train_config(MaskDims::BatchTime, 0.5);
    let mut straight = build(&small_config(), 4).unwrap();
    let mut s1 = TrainState::new(&straight, 9);
    train(&mut straight, &mut s1, &tracks, &cfg, None, &mut ()).unwrap();

    let mut half = build(&small_config(), 4).unwrap();
    let mut s2 = TrainState::new(&half, 9);
    let short = TrainConfig { steps: 2, ..cfg.clone() };
    train(&mut half, &mut s2, &tracks, &short, None, &mut ()).unwrap();
    let bytes = write_checkpoint(&to_checkpoint(&half, &s2, Some(&cfg))).unwrap();
    let ckpt = read_checkpoint(&bytes).unwrap();
    let (mut s3, saved) = state_from_checkpoint(&ckpt).unwrap();
    assert_eq!(saved.as_ref(), Some(&cfg));
    assert_eq!(s3, s2);
    let mut resumed = ckpt.model;
    train(&mut resumed, &mut s3, &tracks, &cfg, None, &mut ()).unwrap();
    assert_eq!(resumed.weights(), straight.weights());
    assert_eq!(s3, s1);
}

#[test]
fn checkpoint_without_state_is_rejected() {
    let model = build(&small_config(), 0).unwrap();
    let ckpt = Checkpoint::new(model);
    assert!(matches!(state_from_checkpoint(&ckpt), Err(TrainError::Checkpoint(_))));
}

struct Recorder {
    steps: Vec<u64>,
    epochs: Vec<Option<f64>>,
    checkpoints: Vec<u64>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, state: &TrainState, _: &StepOutcome) -> Result<(), TrainError> {
        self.steps.push(state.step);
        Ok(())
    }

    fn on_epoch(&mut self, _: &TrainState, sdr: Option<f64>) -> Result<(), TrainError> {
        self.epochs.push(sdr);
        Ok(())
    }

    fn on_checkpoint(&mut self, _: &Model, state: &TrainState) -> Result<(), TrainError> {
        self.checkpoints.push(state.step);
        Ok(())
    }
}

#[test]
fn loop_calls_observer_and_validates() {
    let tracks = toy_tracks(2, 1000);
    let mut cfg = train_config(MaskDims::Batch, 0.5);
    cfg.checkpoint_every = 3;
    let mut model = build(&small_config(), 0).unwrap();
    let mut state = TrainState::new(&model, 1);
    let valid = Validation {
        tracks: &tracks[..1],
        plan: SeparationPlan {
            chunk_frames: 8,
            overlap: 2,
        },
        threads: 1,
    };
    let mut rec = Recorder {
        steps: vec![],
        epochs: vec![],
        checkpoints: vec![],
    };
    let summary = train(&mut model, &mut state, &tracks, &cfg, Some(&valid), &mut rec).unwrap();
    assert_eq!(summary.steps, 4);
    assert_eq!(rec.steps, vec![1, 2, 3, 4]);
    assert_eq!(rec.epochs.len(), 2);
    assert!(rec.epochs.iter().all(|s| s.is_some_and(f64::is_finite)));
    assert_eq!(state.sdr_history.len(), 2);
    assert_eq!(rec.checkpoints, vec![3, 4]);
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let cfg = small_config();
    let model = build(&cfg, 5).unwrap();
    let tracks = toy_tracks(2, 1000);
    let state = TrainState::new(&model, 0);
    let batch = sample_batch(&tracks, &cfg.sources, 2, 256, &mut state.step_rng()).unwrap();
    let (x, frames) = prepare_inputs(&model, &batch).unwrap();
    let x: Tensor<f64> = x.cast();
    let target: Tensor<f64> = batch.targets.cast();
    let params: Vec<Tensor<f64>> = model.weights().tensors().iter().map(|t| t.cast()).collect();
    let spec = LossMaskSpec {
        dims: MaskDims::BatchTime,
        q: 0.5,
    };
    // selection frozen from the unperturbed losses
    let base = {
        let mut eager = crate::tensor::Eager;
        let est = estimate_waveforms(&model, &mut eager, &params, &x, frames, 256);
        per_element_losses(&mut eager, &est, &target, cfg.hop_length)
    };
    let (w, _) = mask_weights(&base, &spec).unwrap();
    let r = finite_diff_check(
        &params,
        |tape, vars| {
            let xv = tape.leaf(x.clone(), false);
            let tv = tape.leaf(target.clone(), false);
            let est = estimate_waveforms(&model, tape, vars, &xv, frames, 256);
            let l = per_element_losses(tape, &est, &tv, cfg.hop_length);
            masked_loss(tape, &l, &w)
        },
        &ProbeSelection::Random { count: 30, seed: 8 },
        1e-6,
    )
    .unwrap();
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}
