//! Synthetic four-class toy tracks: a vibrato harmonic tone for vocals,
//! decaying noise bursts for drums, a low two-partial tone for bass and
//! band-limited noise for other.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{StemClass, StemSet, Track, Waveform};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub seconds: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            seconds: 60.0,
        }
    }
}

/// `n` tracks named `track00`, `track01`, ...; track `i` uses stream `i` of `seed`.
pub fn synth_dataset(n: usize, spec: &SynthSpec, seed: u64) -> Vec<Track> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Track {
                name: format!("track{i:02}"),
                stems: synth_stems(spec, &mut rng),
            }
        })
        .collect()
}

pub fn synth_stems<R: Rng>(spec: &SynthSpec, rng: &mut R) -> StemSet {
    let len = (spec.seconds * spec.sample_rate as f64).round() as usize;
    let sr = spec.sample_rate as f64;
    let stems = StemClass::ALL.map(|c| {
        let mono = match c {
            StemClass::Vocals => vocals(len, sr, rng),
            StemClass::Drums => drums(len, sr, rng),
            StemClass::Bass => bass(len, sr, rng),
            StemClass::Other => other(len, sr, rng),
        };
        // constant-power pan
        let pan: f64 = rng.gen_range(0.15..0.85);
        let (l, r) = ((pan * TAU / 4.0).cos(), (pan * TAU / 4.0).sin());
        let ch = |g: f64| mono.iter().map(|&v| (v * g) as f32).collect::<Vec<f32>>();
        Waveform::new(spec.sample_rate, vec![ch(l), ch(r)]).expect("equal lengths")
    });
    StemSet::new(stems).expect("aligned stems")
}

/// Note boundaries of random duration within `[lo, hi)` seconds.
fn notes<R: Rng>(len: usize, sr: f64, lo: f64, hi: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let d = ((rng.gen_range(lo..hi) * sr) as usize).max(1);
        out.push((start, (start + d).min(len)));
        start += d;
    }
    out
}

/// Short attack and release so note edges do not click.
fn envelope(i: usize, n: usize, sr: f64) -> f64 {
    let ramp = (0.01 * sr).max(1.0);
    (i as f64 / ramp).min(1.0).min((n - i) as f64 / ramp)
}

fn vocals<R: Rng>(len: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let rate = rng.gen_range(4.5..6.5);
    let mut phase = 0.0;
    for (a, b) in notes(len, sr, 0.3, 0.9, rng) {
        let rest = rng.gen_bool(0.15);
        let f0 = 220.0 * 2f64.powf(rng.gen_range(-5..10) as f64 / 12.0);
        let amp = rng.gen_range(0.15..0.3);
        for i in a..b {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + 0.01 * (TAU * rate * t).sin());
            phase += TAU * f / sr;
            if rest {
                continue;
            }
            let tone: f64 = (1..=4).map(|h| (h as f64 * phase).sin() / h as f64).sum();
            out[i] = amp * envelope(i - a, b - a, sr) * tone;
        }
    }
    out
}

fn drums<R: Rng>(len: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let beat = 60.0 / rng.gen_range(90.0..140.0) / 2.0;
    let step = (beat * sr) as usize;
    let mut start = 0;
    while start < len {
        if rng.gen_bool(0.7) {
            let amp = rng.gen_range(0.2..0.5);
            let decay = rng.gen_range(0.03..0.12) * sr;
            let tone = rng.gen_range(60.0..120.0);
            for i in start..(start + (5.0 * decay) as usize).min(len) {
                let k = (i - start) as f64;
                let n: f64 = StandardNormal.sample(rng);
                let body = (TAU * tone * k / sr).sin();
                out[i] += amp * (-k / decay).exp() * (0.6 * n + 0.4 * body);
            }
        }
        start += step;
    }
    out
}

fn bass<R: Rng>(len: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut phase = 0.0;
    for (a, b) in notes(len, sr, 0.25, 0.8, rng) {
        let f0 = 55.0 * 2f64.powf(rng.gen_range(0..15) as f64 / 12.0);
        let amp = rng.gen_range(0.2..0.4);
        for i in a..b {
            phase += TAU * f0 / sr;
            out[i] = amp * envelope(i - a, b - a, sr) * (phase.sin() + 0.3 * (2.0 * phase).sin());
        }
    }
    out
}

fn other<R: Rng>(len: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    // white noise through a resonant two-pole band-pass
    let centre = rng.gen_range(1000.0..2500.0f64).min(0.3 * sr);
    let r = 0.97;
    let (a1, a2) = (-2.0 * r * (TAU * centre / sr).cos(), r * r);
    let gain = (1.0 - r) * 0.5;
    let lfo = rng.gen_range(0.1..0.5);
    let offset = rng.gen_range(0.0..TAU);
    let (mut y1, mut y2) = (0.0, 0.0);
    (0..len)
        .map(|i| {
            let x: f64 = StandardNormal.sample(rng);
            let y = gain * x - a1 * y1 - a2 * y2;
            y2 = y1;
            y1 = y;
            let m = 0.6 + 0.4 * (TAU * lfo * i as f64 / sr + offset).sin();
            y * m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::rms;

    #[test]
    fn shapes_and_determinism() {
        let spec = SynthSpec {
            sample_rate: 8000,
            seconds: 2.0,
        };
        let a = synth_dataset(3, &spec, 1);
        let b = synth_dataset(3, &spec, 1);
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            for c in StemClass::ALL {
                assert_eq!(x.stems.get(c), y.stems.get(c));
            }
            assert_eq!(x.stems.len(), 16000);
            assert_eq!(x.stems.channels(), 2);
        }
        assert_ne!(a[0].stems.get(StemClass::Bass), a[1].stems.get(StemClass::Bass));
    }

    #[test]
    fn stems_are_audible_and_bounded() {
        let spec = SynthSpec {
            sample_rate: 8000,
            seconds: 5.0,
        };
        for t in synth_dataset(2, &spec, 3) {
            for c in StemClass::ALL {
                let w = t.stems.get(c);
                let level = rms(w);
                assert!(level > 0.01 && level < 0.5, "{c:?} rms {level}");
                assert!(w.data().iter().all(|v| v.abs() < 2.0));
            }
        }
    }
}
