//! Synthetic stem corruption: label noise (one foreign instrument at equal
//! loudness) and bleeding (quiet leakage of every other class).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, SampleFormat, StemClass, Track, Waveform};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Donor draws attempted before a silent-donor stem is skipped.
pub const MAX_DONOR_ATTEMPTS: usize = 8;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("noise-sim: label noise needs at least 2 tracks, got {0}")]
    TooFewTracks(usize),
    #[error("noise-sim: invalid corruption spec: {0}")]
    InvalidSpec(String),
    #[error("noise-sim: manifest refers to unknown track `{0}`")]
    UnknownTrack(String),
    #[error("noise-sim: manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("noise-sim: i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    LabelNoise,
    Bleeding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    /// Leakage level for bleeding, in dB (negative).
    pub bleed_gain_db: f64,
    /// Probability that a (track, class) stem receives label noise.
    pub p: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn label_noise(p: f64, seed: u64) -> Self {
        Self {
            mode: CorruptionMode::LabelNoise,
            bleed_gain_db: -10.0,
            p,
            seed,
        }
    }

    pub fn bleeding(bleed_gain_db: f64, seed: u64) -> Self {
        Self {
            mode: CorruptionMode::Bleeding,
            bleed_gain_db,
            p: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(NoiseError::InvalidSpec(format!("p = {} outside [0, 1]", self.p)));
        }
        if self.mode == CorruptionMode::Bleeding && !(self.bleed_gain_db < 0.0) {
            return Err(NoiseError::InvalidSpec(format!(
                "bleed_gain_db = {} must be negative",
                self.bleed_gain_db
            )));
        }
        Ok(())
    }
}

/// Amplitude factor of a level in dB.
pub fn db_to_gain(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Root mean square over all channels and samples.
pub fn rms(w: &Waveform) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let e: f64 = w.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
    (e / w.data().len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Donor {
    pub track: String,
    pub class: StemClass,
}

/// One corrupted stem: `clean + gain * sum(donor stems)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub track: String,
    pub class: StemClass,
    pub donors: Vec<Donor>,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedStem {
    pub track: String,
    pub class: StemClass,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorruptionSpec,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedStem>,
}

/// The donor aligned to `len` samples: truncated or zero-padded at the end.
fn aligned(donor: &Waveform, len: usize) -> Waveform {
    if donor.len() >= len {
        donor.slice(0, len)
    } else {
        let mut out = Waveform::zeros(donor.sample_rate(), donor.channels(), len);
        for ch in 0..donor.channels() {
            out.channel_mut(ch)[..donor.len()].copy_from_slice(donor.channel(ch));
        }
        out
    }
}

/// Label noise: each affected stem gains one instrument of another class
/// from another track, scaled to the clean stem's RMS.
pub fn simulate_label_noise(tracks: &[Track], spec: &CorruptionSpec) -> Result<(Vec<Track>, Manifest), NoiseError> {
    spec.validate()?;
    if tracks.len() < 2 {
        return Err(NoiseError::TooFewTracks(tracks.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (ti, track) in tracks.iter().enumerate() {
        for class in StemClass::ALL {
            if !(rng.gen::<f64>() < spec.p) {
                continue;
            }
            let clean = track.stems.get(class);
            let mut chosen = None;
            for _ in 0..MAX_DONOR_ATTEMPTS {
                let mut dc = rng.gen_range(0..3);
                if dc >= class.index() {
                    dc += 1;
                }
                let mut dt = rng.gen_range(0..tracks.len() - 1);
                if dt >= ti {
                    dt += 1;
                }
                let donor_class = StemClass::ALL[dc];
                let donor = aligned(tracks[dt].stems.get(donor_class), clean.len());
                let r = rms(&donor);
                if r > 0.0 {
                    chosen = Some((dt, donor_class, r));
                    break;
                }
            }
            match chosen {
                Some((dt, donor_class, donor_rms)) => entries.push(ManifestEntry {
                    track: track.name.clone(),
                    class,
                    donors: vec![Donor {
                        track: tracks[dt].name.clone(),
                        class: donor_class,
                    }],
                    gain: rms(clean) / donor_rms,
                }),
                None => skipped.push(SkippedStem {
                    track: track.name.clone(),
                    class,
                    reason: format!("donor silent after {MAX_DONOR_ATTEMPTS} attempts"),
                }),
            }
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        entries,
        skipped,
    };
    Ok((apply_manifest(tracks, &manifest)?, manifest))
}

/// Bleeding: every stem gains all other classes of the same track at
/// `10^(bleed_gain_db / 20)`.
pub fn simulate_bleeding(tracks: &[Track], spec: &CorruptionSpec) -> Result<(Vec<Track>, Manifest), NoiseError> {
    spec.validate()?;
    let gain = db_to_gain(spec.bleed_gain_db);
    let entries = tracks
        .iter()
        .flat_map(|t| {
            StemClass::ALL.into_iter().map(move |class| ManifestEntry {
                track: t.name.clone(),
                class,
                donors: StemClass::ALL
                    .into_iter()
                    .filter(|&c| c != class)
                    .map(|c| Donor {
                        track: t.name.clone(),
                        class: c,
                    })
                    .collect(),
                gain,
            })
        })
        .collect();
    let manifest = Manifest {
        spec: spec.clone(),
        entries,
        skipped: Vec::new(),
    };
    Ok((apply_manifest(tracks, &manifest)?, manifest))
}

pub fn simulate(tracks: &[Track], spec: &CorruptionSpec) -> Result<(Vec<Track>, Manifest), NoiseError> {
    match spec.mode {
        CorruptionMode::LabelNoise => simulate_label_noise(tracks, spec),
        CorruptionMode::Bleeding => simulate_bleeding(tracks, spec),
    }
}

/// Replays a manifest on clean tracks. Simulation itself goes through this
/// function, so replay is bit-exact.
pub fn apply_manifest(clean: &[Track], manifest: &Manifest) -> Result<Vec<Track>, NoiseError> {
    let find = |name: &str| {
        clean
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NoiseError::UnknownTrack(name.to_string()))
    };
    let mut out = clean.to_vec();
    for e in &manifest.entries {
        let ti = clean
            .iter()
            .position(|t| t.name == e.track)
            .ok_or_else(|| NoiseError::UnknownTrack(e.track.clone()))?;
        let base = clean[ti].stems.get(e.class);
        let donors = e
            .donors
            .iter()
            .map(|d| Ok(aligned(find(&d.track)?.stems.get(d.class), base.len())))
            .collect::<Result<Vec<_>, NoiseError>>()?;
        if donors.iter().any(|d| d.channels() != base.channels()) {
            return Err(NoiseError::Manifest(format!("channel count mismatch for `{}`", e.track)));
        }
        let target = out[ti].stems.get_mut(e.class);
        for (i, v) in target.data_mut().iter_mut().enumerate() {
            let leak: f64 = donors.iter().map(|d| d.data()[i] as f64).sum();
            *v = (base.data()[i] as f64 + e.gain * leak) as f32;
        }
    }
    Ok(out)
}

/// Corrupts the dataset at `src` into `dst` (float32 WAV, mixtures
/// recomputed) and writes `manifest.json` beside the tracks.
pub fn corrupt_dataset(src: impl AsRef<Path>, dst: impl AsRef<Path>, spec: &CorruptionSpec) -> Result<Manifest, NoiseError> {
    let clean = audio::load_dataset(src)?;
    let (corrupted, manifest) = simulate(&clean, spec)?;
    let dst = dst.as_ref();
    fs::create_dir_all(dst)?;
    audio::save_dataset(dst, &corrupted, SampleFormat::Float32)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| NoiseError::Manifest(e.to_string()))?;
    fs::write(dst.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, NoiseError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| NoiseError::Manifest(e.to_string()))
}
