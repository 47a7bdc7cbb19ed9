use super::*;
use crate::audio::Waveform;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(channels: usize, len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * len).map(|_| rng.gen_range(-0.8f32..0.8)).collect();
    Waveform::from_planar(44100, channels, data).unwrap()
}

fn max_err(a: &Waveform, b: &Waveform) -> f64 {
    a.max_abs_diff(b) as f64
}

#[test]
fn config_invariants() {
    assert!(StftConfig::new(8192, 1024).is_ok());
    assert!(StftConfig::new(12288, 2048).is_ok());
    assert!(StftConfig::new(8191, 1024).is_err());
    assert!(StftConfig::new(8192, 0).is_err());
    assert!(StftConfig::new(8192, 8192).is_err());
    assert!(StftConfig::new(8192, 3000).is_err());
}

#[test]
fn frame_and_bin_counts() {
    let cfg = StftConfig::new(8192, 1024).unwrap();
    assert_eq!(cfg.full_bins(), 4097);
    let spec = stft::<f64>(&noise(2, 5000, 1), &cfg).unwrap();
    assert_eq!(spec.bins(), 4097);
    assert_eq!(spec.frames(), 1 + 5000usize.div_ceil(1024));
    assert_eq!(spec.channels(), 2);
}

#[test]
fn zero_in_zero_out() {
    let cfg = StftConfig::new(256, 64).unwrap();
    let spec = stft::<f32>(&Waveform::zeros(8000, 2, 1000), &cfg).unwrap();
    assert!(spec.values().iter().all(|c| c.re == 0.0 && c.im == 0.0));
    let back = istft(&spec, 1000, 8000).unwrap();
    assert!(back.data().iter().all(|&v| v == 0.0));
}

#[test]
fn empty_input_rejected() {
    let cfg = StftConfig::new(256, 64).unwrap();
    let empty = Waveform::from_planar(8000, 1, Vec::new()).unwrap();
    assert_eq!(stft::<f32>(&empty, &cfg).unwrap_err(), DspError::EmptyInput);
}

#[test]
fn bin_centred_sinusoid_matches_direct_dft() {
    let (n, hop, k0) = (256usize, 64usize, 20usize);
    let cfg = StftConfig::new(n, hop).unwrap();
    let len = 4096;
    let x: Vec<f32> = (0..len)
        .map(|i| (2.0 * std::f64::consts::PI * k0 as f64 * i as f64 / n as f64).sin() as f32)
        .collect();
    let spec = stft::<f64>(&Waveform::new(8000, vec![x.clone()]).unwrap(), &cfg).unwrap();
    let window: Vec<f64> = cfg.window();
    for t in [10usize, 30, 50] {
        // interior frame t starts at sample t*hop - n/2 of the unpadded signal
        let start = t * hop - n / 2;
        let mut energy = Vec::with_capacity(n / 2 + 1);
        for k in 0..=n / 2 {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for m in 0..n {
                let v = x[start + m] as f64 * window[m];
                let ang = -2.0 * std::f64::consts::PI * (k * m) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            let got = spec.at(0, k, t);
            assert!((got.re - re).abs() < 1e-9 && (got.im - im).abs() < 1e-9);
            energy.push(re * re + im * im);
        }
        let total: f64 = energy.iter().sum();
        let near: f64 = energy[k0 - 1..=k0 + 1].iter().sum();
        assert!(near / total >= 0.9, "frame {t}: {}", near / total);
    }
}

#[test]
fn round_trip_small_configs() {
    for &(n, hop) in &[(256, 32), (256, 64), (384, 64), (128, 64)] {
        let cfg = StftConfig::new(n, hop).unwrap();
        let x = noise(2, 3001, n as u64);
        let back = istft(&stft::<f64>(&x, &cfg).unwrap(), x.len(), 44100).unwrap();
        assert!(max_err(&x, &back) < 1e-6 * 0.8, "({n}, {hop})");
    }
}

#[test]
fn very_short_signals_round_trip() {
    let cfg = StftConfig::new(64, 16).unwrap();
    for len in [1usize, 2, 5, 31, 32, 33] {
        let x = noise(1, len, len as u64);
        let back = istft(&stft::<f64>(&x, &cfg).unwrap(), len, 44100).unwrap();
        assert!(max_err(&x, &back) < 1e-6, "len {len}");
    }
}

#[test]
fn istft_pads_target_length_with_zeros() {
    let cfg = StftConfig::new(64, 16).unwrap();
    let x = noise(1, 100, 3);
    let back = istft(&stft::<f64>(&x, &cfg).unwrap(), 180, 44100).unwrap();
    assert_eq!(back.len(), 180);
    assert!(max_err(&x, &back.slice(0, 100)) < 1e-6);
    // samples beyond the last frame centre are padding
    assert!(back.channel(0)[113..].iter().all(|&v| v == 0.0));
}

#[test]
fn istft_requires_full_bins() {
    let cfg = StftConfig::new(64, 16).unwrap();
    let spec = stft::<f64>(&noise(1, 100, 3), &cfg).unwrap();
    let cut = freq_truncate(&spec, 32).unwrap();
    assert!(matches!(istft(&cut, 100, 44100), Err(DspError::BinsOutOfRange { .. })));
}

#[test]
fn truncate_drops_nyquist_and_restore_zero_fills() {
    let cfg = StftConfig::new(8192, 1024).unwrap();
    let spec = stft::<f32>(&noise(2, 20_000, 5), &cfg).unwrap();
    let cut = freq_truncate(&spec, 4096).unwrap();
    assert_eq!(cut.bins(), 4096);
    assert_eq!(cut.truncated_from(), Some(4097));
    for ch in 0..2 {
        for t in 0..spec.frames() {
            assert_eq!(cut.at(ch, 4095, t), spec.at(ch, 4095, t));
        }
    }
    let restored = freq_restore(&cut).unwrap();
    assert_eq!(restored.bins(), 4097);
    for ch in 0..2 {
        for t in 0..spec.frames() {
            assert_eq!(restored.at(ch, 4096, t).norm(), 0.0);
            for k in [0, 1000, 4095] {
                assert_eq!(restored.at(ch, k, t), spec.at(ch, k, t));
            }
        }
    }
    let direct: f64 = cut.values().iter().map(|c| (c.re as f64).powi(2) + (c.im as f64).powi(2)).sum();
    assert!((restored.energy() - direct).abs() <= 1e-12 * direct);
}

#[test]
fn truncate_vocals_model_bins() {
    let cfg = StftConfig::new(12288, 2048).unwrap();
    let spec = stft::<f32>(&noise(1, 13_000, 6), &cfg).unwrap();
    assert_eq!(spec.bins(), 6145);
    let cut = freq_truncate(&spec, 4096).unwrap();
    assert_eq!(cut.bins(), 4096);
    assert_eq!(freq_restore(&cut).unwrap().bins(), 6145);
}

#[test]
fn truncate_to_all_bins_is_identity() {
    let cfg = StftConfig::new(128, 32).unwrap();
    let spec = stft::<f64>(&noise(2, 700, 8), &cfg).unwrap();
    let same = freq_truncate(&spec, spec.bins()).unwrap();
    assert_eq!(same.values(), spec.values());
    let back = freq_restore(&same).unwrap();
    assert_eq!(back, spec);
    assert_eq!(freq_truncate(&spec, 0).unwrap_err(), DspError::BinsOutOfRange { requested: 0, available: 65 });
    assert_eq!(freq_restore(&spec).unwrap_err(), DspError::NoTruncation);
}

#[test]
fn subband_index_mapping_exhaustive() {
    let (c, f, t, k) = (3usize, 8usize, 5usize, 4usize);
    let data: Vec<f64> = (0..c * f * t).map(|i| i as f64).collect();
    let x = Tensor::from_vec(&[c, f, t], data).unwrap();
    let y = subband_split(x.clone(), k).unwrap();
    assert_eq!(y.shape(), &[c * k, f / k, t]);
    let fb = f / k;
    for i in 0..c {
        for j in 0..k {
            for ff in 0..fb {
                for tt in 0..t {
                    let src = x.data()[(i * f + j * fb + ff) * t + tt];
                    let dst = y.data()[((i * k + j) * fb + ff) * t + tt];
                    assert_eq!(src, dst);
                }
            }
        }
    }
    assert_eq!(subband_merge(y, k).unwrap(), x);
}

#[test]
fn subband_model_shapes() {
    let x = Tensor::<f32>::zeros(&[4, 4096, 8]);
    assert_eq!(subband_split(x.clone(), 4).unwrap().shape(), &[16, 1024, 8]);
    assert_eq!(subband_split(x.clone(), 1).unwrap(), x);
    assert!(matches!(subband_split(Tensor::<f32>::zeros(&[1, 10, 2]), 4), Err(DspError::Indivisible(_))));
    assert!(matches!(subband_merge(Tensor::<f32>::zeros(&[6, 10, 2]), 4), Err(DspError::Indivisible(_))));
}

#[test]
fn pack_unpack_round_trip() {
    let cfg = StftConfig::new(64, 16).unwrap();
    let spec = stft::<f32>(&noise(2, 200, 2), &cfg).unwrap();
    let planes = pack_planes(&spec);
    assert_eq!(planes.shape(), &[4, 33, spec.frames()]);
    assert_eq!(planes.data()[0], spec.at(0, 0, 0).re);
    assert_eq!(planes.data()[33 * spec.frames()], spec.at(0, 0, 0).im);
    assert_eq!(unpack_planes(&planes, &spec).unwrap(), spec);
}

#[test]
fn synthesis_adjoint_identity() {
    // <istft(X), g> == <X, istft^T(g)> over packed planes
    let cfg = StftConfig::new(32, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let frames = 9;
    let len = 70;
    let x = Tensor::<f64>::randn(&[1, 2, 17, frames], 1.0, &mut rng);
    let g = Tensor::<f64>::randn(&[1, 1, len], 1.0, &mut rng);
    let y = istft_planes(&x, &cfg, len);
    let dx = istft_planes_backward(&g, &cfg, x.shape());
    let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_any_valid_config(
        half in 4usize..64,
        ratio in prop::sample::select(vec![2usize, 4, 6, 8]),
        len in 1usize..1500,
        seed in any::<u64>(),
    ) {
        // n_fft a multiple of the hop ratio keeps hop integral
        let n_fft = 2 * half * ratio;
        let cfg = StftConfig::new(n_fft, n_fft / ratio).unwrap();
        let x = noise(1, len, seed);
        let back = istft(&stft::<f64>(&x, &cfg).unwrap(), len, 44100).unwrap();
        let peak = x.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        prop_assert!(max_err(&x, &back) <= 1e-6 * peak.max(1e-6));
    }

    #[test]
    fn stft_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        let cfg = StftConfig::new(128, 32).unwrap();
        let x = noise(1, 500, seed);
        let y = noise(1, 500, seed.wrapping_add(1));
        let combo: Vec<f32> = x.data().iter().zip(y.data())
            .map(|(&u, &v)| (a * u as f64 + b * v as f64) as f32).collect();
        let z = Waveform::from_planar(44100, 1, combo).unwrap();
        let (sx, sy, sz) = (stft::<f64>(&x, &cfg).unwrap(), stft::<f64>(&y, &cfg).unwrap(), stft::<f64>(&z, &cfg).unwrap());
        let scale = sz.values().iter().fold(1e-12f64, |m, c| m.max(c.norm()));
        for ((u, v), w) in sx.values().iter().zip(sy.values()).zip(sz.values()) {
            let expect = u * a + v * b;
            prop_assert!((expect - w).norm() <= 1e-6 * scale);
        }
    }

    #[test]
    fn restore_truncate_keeps_low_bins(keep in 1usize..=33, seed in any::<u64>()) {
        let cfg = StftConfig::new(64, 16).unwrap();
        let spec = stft::<f32>(&noise(2, 150, seed), &cfg).unwrap();
        let back = freq_restore(&freq_truncate(&spec, keep).unwrap()).unwrap();
        for ch in 0..2 {
            for k in 0..33 {
                for t in 0..spec.frames() {
                    let want = if k < keep { spec.at(ch, k, t) } else { Default::default() };
                    prop_assert_eq!(back.at(ch, k, t), want);
                }
            }
        }
    }
}
