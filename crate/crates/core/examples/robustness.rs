//! Trains the tiny model on a corrupted synthetic dataset and prints the
//! clean-validation SDR after every epoch.
//!
//! cargo run --release -p demix-core --example robustness -- label batch 0.4

use std::time::Instant;

use demix_core::inference::SeparationPlan;
use demix_core::model::{build, ModelConfig};
use demix_core::noise::{simulate, CorruptionSpec};
use demix_core::synth::{synth_dataset, SynthSpec};
use demix_core::training::{train, MaskDims, Optimizer, TrainConfig, TrainState, Validation};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("label");
    let dims = match args.get(1).map(String::as_str).unwrap_or("batch") {
        "none" => MaskDims::None,
        "batch_time" => MaskDims::BatchTime,
        _ => MaskDims::Batch,
    };
    let q: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.4);
    let steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2000);

    let spec = SynthSpec {
        sample_rate: 8000,
        seconds: 60.0,
    };
    let clean = synth_dataset(8, &spec, 1);
    let data = match mode {
        "clean" => clean,
        "bleed" => simulate(&clean, &CorruptionSpec::bleeding(-10.0, 2)).unwrap().0,
        _ => simulate(&clean, &CorruptionSpec::label_noise(0.5, 2)).unwrap().0,
    };
    let valid = synth_dataset(3, &SynthSpec { seconds: 20.0, ..spec }, 99);

    let cfg = ModelConfig {
        n_fft: 256,
        hop_length: 64,
        ..ModelConfig::tiny()
    };
    let mut model = build(&cfg, 0).unwrap();
    let tc = TrainConfig {
        optimizer: Optimizer::Adam,
        learning_rate: 1e-2,
        batch_size: 6,
        chunk_frames: 64,
        loss_mask_dims: dims,
        q,
        steps,
        steps_per_epoch: 500,
        early_stop_window: 100,
        early_stop_delta: 0.1,
        checkpoint_every: 0,
    };
    let mut state = TrainState::new(&model, 0);
    let validation = Validation {
        tracks: &valid,
        plan: SeparationPlan {
            chunk_frames: 64,
            overlap: 4,
        },
        threads: 1,
    };
    let t0 = Instant::now();
    train(&mut model, &mut state, &data, &tc, Some(&validation), &mut ()).unwrap();
    let history: Vec<String> = state.sdr_history.iter().map(|s| format!("{s:.2}")).collect();
    println!(
        "{mode} {dims:?} q={q}: {:.0} s, SDR per epoch [{}]",
        t0.elapsed().as_secs_f64(),
        history.join(", ")
    );
}
