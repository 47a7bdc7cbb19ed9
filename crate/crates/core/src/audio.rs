//! PCM WAV input/output and the on-disk stem dataset layout.
//!
//! A dataset is a directory of track directories, each holding
//! `mixture.wav` plus one file per stem class:
//!
//! ```text
//! <root>/<track>/{mixture,vocals,drums,bass,other}.wav
//! ```

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("audio-io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("audio-io: malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("audio-io: unsupported codec: format tag {format_tag}, {bits} bits, {channels} channels")]
    UnsupportedCodec {
        format_tag: u16,
        bits: u16,
        channels: u16,
    },
    #[error("audio-io: truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("audio-io: non-finite sample at channel {channel}, index {index}")]
    NonFinite { channel: usize, index: usize },
    #[error("audio-io: invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("audio-io: track {track}: missing {class} stem ({path})")]
    MissingFile {
        track: String,
        class: String,
        path: PathBuf,
    },
    #[error("audio-io: track {track}: {file} has {found} samples, expected {expected}")]
    LengthMismatch {
        track: String,
        file: String,
        expected: usize,
        found: usize,
    },
    #[error("audio-io: track {track}: {file} has rate {found} Hz, expected {expected} Hz")]
    RateMismatch {
        track: String,
        file: String,
        expected: u32,
        found: u32,
    },
    #[error("audio-io: track {track}: {file} has {found} channels, expected {expected}")]
    ChannelMismatch {
        track: String,
        file: String,
        expected: usize,
        found: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> AudioError + '_ {
    move |source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Multichannel audio, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    sample_rate: u32,
    channels: usize,
    samples: Vec<f32>,
}

impl Waveform {
    /// Builds a waveform from per-channel sample vectors.
    pub fn new(sample_rate: u32, channels: Vec<Vec<f32>>) -> Result<Self, AudioError> {
        if channels.is_empty() {
            return Err(AudioError::InvalidWaveform("no channels".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(AudioError::InvalidWaveform("channel lengths differ".into()));
        }
        let n = channels.len();
        Self::from_planar(sample_rate, n, channels.concat())
    }

    /// Builds a waveform from a channel-major buffer of `channels * len` samples.
    pub fn from_planar(
        sample_rate: u32,
        channels: usize,
        samples: Vec<f32>,
    ) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidWaveform("sample rate must be positive".into()));
        }
        if channels == 0 || samples.len() % channels != 0 {
            return Err(AudioError::InvalidWaveform(format!(
                "{} samples do not split into {channels} channels",
                samples.len()
            )));
        }
        let len = samples.len() / channels;
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(AudioError::NonFinite {
                channel: pos / len.max(1),
                index: pos % len.max(1),
            });
        }
        Ok(Self {
            sample_rate,
            channels,
            samples,
        })
    }

    pub fn zeros(sample_rate: u32, channels: usize, len: usize) -> Self {
        Self {
            sample_rate,
            channels,
            samples: vec![0.0; channels * len],
        }
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let len = self.len();
        &self.samples[ch * len..(ch + 1) * len]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f32] {
        let len = self.len();
        &mut self.samples[ch * len..(ch + 1) * len]
    }

    /// Channel-major sample buffer.
    pub fn data(&self) -> &[f32] {
        &self.samples
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.samples
    }

    pub fn into_data(self) -> Vec<f32> {
        self.samples
    }

    /// Copies `[start, start + len)` of every channel, zero-filling past the end.
    pub fn slice(&self, start: usize, len: usize) -> Waveform {
        let mut out = Waveform::zeros(self.sample_rate, self.channels, len);
        let avail = self.len().saturating_sub(start).min(len);
        for ch in 0..self.channels {
            if avail > 0 {
                out.channel_mut(ch)[..avail].copy_from_slice(&self.channel(ch)[start..start + avail]);
            }
        }
        out
    }

    /// Duplicates a mono signal onto `channels` channels; other layouts must already match.
    pub fn with_channels(self, channels: usize) -> Result<Waveform, AudioError> {
        if self.channels == channels {
            return Ok(self);
        }
        if self.channels != 1 {
            return Err(AudioError::InvalidWaveform(format!(
                "cannot map {} channels onto {channels}",
                self.channels
            )));
        }
        let samples = self.samples.repeat(channels);
        Ok(Waveform {
            sample_rate: self.sample_rate,
            channels,
            samples,
        })
    }

    /// Sample-wise sum; shapes must agree.
    pub fn sum<'a>(items: impl IntoIterator<Item = &'a Waveform>) -> Result<Waveform, AudioError> {
        let mut iter = items.into_iter();
        let mut acc = iter
            .next()
            .ok_or_else(|| AudioError::InvalidWaveform("sum of nothing".into()))?
            .clone();
        for w in iter {
            acc.check_aligned(w)?;
            for (a, b) in acc.samples.iter_mut().zip(&w.samples) {
                *a += b;
            }
        }
        Ok(acc)
    }

    pub fn check_aligned(&self, other: &Waveform) -> Result<(), AudioError> {
        if self.channels != other.channels
            || self.len() != other.len()
            || self.sample_rate != other.sample_rate
        {
            return Err(AudioError::InvalidWaveform(format!(
                "misaligned waveforms: {}ch/{}/{}Hz vs {}ch/{}/{}Hz",
                self.channels,
                self.len(),
                self.sample_rate,
                other.channels,
                other.len(),
                other.sample_rate
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Waveform) -> f32 {
        self.samples
            .iter()
            .zip(&other.samples)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// The four source classes, in the fixed order used for every tensor index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemClass {
    Vocals,
    Drums,
    Bass,
    Other,
}

impl StemClass {
    pub const ALL: [StemClass; 4] = [
        StemClass::Vocals,
        StemClass::Drums,
        StemClass::Bass,
        StemClass::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            StemClass::Vocals => "vocals",
            StemClass::Drums => "drums",
            StemClass::Bass => "bass",
            StemClass::Other => "other",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.wav", self.name())
    }
}

impl fmt::Display for StemClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StemClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StemClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown stem class `{s}`"))
    }
}

/// One waveform per class; all four share rate, channel count and length.
#[derive(Clone, Debug, PartialEq)]
pub struct StemSet {
    stems: [Waveform; 4],
}

impl StemSet {
    pub fn new(stems: [Waveform; 4]) -> Result<Self, AudioError> {
        for s in &stems[1..] {
            stems[0].check_aligned(s)?;
        }
        Ok(Self { stems })
    }

    pub fn get(&self, class: StemClass) -> &Waveform {
        &self.stems[class.index()]
    }

    pub fn get_mut(&mut self, class: StemClass) -> &mut Waveform {
        &mut self.stems[class.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (StemClass, &Waveform)> {
        StemClass::ALL.into_iter().zip(self.stems.iter())
    }

    pub fn into_array(self) -> [Waveform; 4] {
        self.stems
    }

    pub fn len(&self) -> usize {
        self.stems[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems[0].is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.stems[0].sample_rate()
    }

    pub fn channels(&self) -> usize {
        self.stems[0].channels()
    }

    pub fn mixture(&self) -> Waveform {
        Waveform::sum(self.stems.iter()).expect("stems are aligned by construction")
    }
}

/// Largest absolute difference between a mixture and the sum of its stems.
pub fn mixture_residual(mixture: &Waveform, stems: &StemSet) -> f32 {
    mixture.max_abs_diff(&stems.mixture())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    Pcm16,
    Pcm24,
    Float32,
}

impl SampleFormat {
    pub fn bytes_per_sample(self) -> usize {
        match self {
            SampleFormat::Pcm16 => 2,
            SampleFormat::Pcm24 => 3,
            SampleFormat::Float32 => 4,
        }
    }
}

impl FromStr for SampleFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pcm16" => Ok(SampleFormat::Pcm16),
            "pcm24" => Ok(SampleFormat::Pcm24),
            "float32" => Ok(SampleFormat::Float32),
            _ => Err(format!("unknown sample format `{s}`")),
        }
    }
}

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 3;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads a RIFF/WAVE file with 16/24-bit integer PCM or 32-bit float samples.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedHeader("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 || body + size > bytes.len() {
                return Err(AudioError::MalformedHeader("fmt chunk too short".into()));
            }
            let mut tag = u16_at(bytes, body);
            let channels = u16_at(bytes, body + 2);
            let rate = u32_at(bytes, body + 4);
            let bits = u16_at(bytes, body + 14);
            if tag == WAVE_FORMAT_EXTENSIBLE {
                if size < 40 {
                    return Err(AudioError::MalformedHeader("extensible fmt chunk too short".into()));
                }
                // first two bytes of the sub-format GUID carry the real tag
                tag = u16_at(bytes, body + 24);
            }
            fmt = Some((tag, channels, rate, bits));
        } else if id == b"data" {
            let (tag, channels, rate, bits) =
                fmt.ok_or_else(|| AudioError::MalformedHeader("data chunk before fmt chunk".into()))?;
            let format = match (tag, bits) {
                (WAVE_FORMAT_PCM, 16) => SampleFormat::Pcm16,
                (WAVE_FORMAT_PCM, 24) => SampleFormat::Pcm24,
                (WAVE_FORMAT_IEEE_FLOAT, 32) => SampleFormat::Float32,
                _ => {
                    return Err(AudioError::UnsupportedCodec {
                        format_tag: tag,
                        bits,
                        channels,
                    })
                }
            };
            if !(1..=2).contains(&channels) {
                return Err(AudioError::UnsupportedCodec {
                    format_tag: tag,
                    bits,
                    channels,
                });
            }
            if rate == 0 {
                return Err(AudioError::MalformedHeader("zero sample rate".into()));
            }
            let avail = bytes.len() - body;
            if size > avail {
                return Err(AudioError::TruncatedPayload {
                    expected: size,
                    found: avail,
                });
            }
            let frame = format.bytes_per_sample() * channels as usize;
            if size % frame != 0 {
                return Err(AudioError::TruncatedPayload {
                    expected: size.div_ceil(frame) * frame,
                    found: size,
                });
            }
            return decode_samples(&bytes[body..body + size], format, channels as usize, rate);
        }
        pos = body + size + (size & 1);
    }
    Err(AudioError::MalformedHeader(if fmt.is_some() {
        "no data chunk".into()
    } else {
        "no fmt chunk".into()
    }))
}

fn decode_samples(
    payload: &[u8],
    format: SampleFormat,
    channels: usize,
    rate: u32,
) -> Result<Waveform, AudioError> {
    let bps = format.bytes_per_sample();
    let len = payload.len() / (bps * channels);
    let mut samples = vec![0.0f32; len * channels];
    for (i, frame) in payload.chunks_exact(bps * channels).enumerate() {
        for ch in 0..channels {
            let b = &frame[ch * bps..(ch + 1) * bps];
            samples[ch * len + i] = match format {
                SampleFormat::Pcm16 => i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0,
                SampleFormat::Pcm24 => {
                    let v = i32::from_le_bytes([0, b[0], b[1], b[2]]) >> 8;
                    v as f32 / 8_388_608.0
                }
                SampleFormat::Float32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            };
        }
    }
    Waveform::from_planar(rate, channels, samples)
}

/// Serializes with the canonical 44-byte header.
pub fn encode_wav(waveform: &Waveform, format: SampleFormat) -> Result<Vec<u8>, AudioError> {
    let channels = waveform.channels();
    let len = waveform.len();
    let bps = format.bytes_per_sample();
    let data_len = channels * len * bps;
    let mut out = Vec::with_capacity(44 + data_len);
    let (tag, bits) = match format {
        SampleFormat::Pcm16 => (WAVE_FORMAT_PCM, 16u16),
        SampleFormat::Pcm24 => (WAVE_FORMAT_PCM, 24),
        SampleFormat::Float32 => (WAVE_FORMAT_IEEE_FLOAT, 32),
    };
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(channels as u16).to_le_bytes());
    out.extend_from_slice(&waveform.sample_rate().to_le_bytes());
    out.extend_from_slice(&((waveform.sample_rate() as usize * channels * bps) as u32).to_le_bytes());
    out.extend_from_slice(&((channels * bps) as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..len {
        for ch in 0..channels {
            let v = waveform.channel(ch)[i];
            if !v.is_finite() {
                return Err(AudioError::NonFinite { channel: ch, index: i });
            }
            match format {
                SampleFormat::Pcm16 => {
                    let q = (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                SampleFormat::Pcm24 => {
                    let q = (v as f64 * 8_388_608.0).round().clamp(-8_388_608.0, 8_388_607.0) as i32;
                    out.extend_from_slice(&q.to_le_bytes()[..3]);
                }
                SampleFormat::Float32 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn save_wav(
    path: impl AsRef<Path>,
    waveform: &Waveform,
    format: SampleFormat,
) -> Result<(), AudioError> {
    let path = path.as_ref();
    let bytes = encode_wav(waveform, format)?;
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))
}

pub const MIXTURE_FILE: &str = "mixture.wav";

/// Loads `mixture.wav` and the four stems of one track directory.
pub fn load_track(dir: impl AsRef<Path>) -> Result<(Waveform, StemSet), AudioError> {
    let dir = dir.as_ref();
    let track = track_name(dir);
    let mixture_path = dir.join(MIXTURE_FILE);
    if !mixture_path.is_file() {
        return Err(AudioError::MissingFile {
            track,
            class: "mixture".into(),
            path: mixture_path,
        });
    }
    let mixture = load_wav(&mixture_path)?;
    let stems = load_stems_matching(dir, &mixture)?;
    Ok((mixture, stems))
}

/// Loads the four stem files of `dir`, requiring them to match `reference`.
pub fn load_stems_matching(dir: &Path, reference: &Waveform) -> Result<StemSet, AudioError> {
    let track = track_name(dir);
    let mut loaded = Vec::with_capacity(4);
    for class in StemClass::ALL {
        let path = dir.join(class.file_name());
        if !path.is_file() {
            return Err(AudioError::MissingFile {
                track,
                class: class.name().into(),
                path,
            });
        }
        let w = load_wav(&path)?;
        if w.sample_rate() != reference.sample_rate() {
            return Err(AudioError::RateMismatch {
                track,
                file: class.file_name(),
                expected: reference.sample_rate(),
                found: w.sample_rate(),
            });
        }
        if w.len() != reference.len() {
            return Err(AudioError::LengthMismatch {
                track,
                file: class.file_name(),
                expected: reference.len(),
                found: w.len(),
            });
        }
        let w = if w.channels() == reference.channels() {
            w
        } else if w.channels() == 1 {
            w.with_channels(reference.channels())?
        } else {
            return Err(AudioError::ChannelMismatch {
                track,
                file: class.file_name(),
                expected: reference.channels(),
                found: w.channels(),
            });
        };
        loaded.push(w);
    }
    let stems: [Waveform; 4] = loaded.try_into().expect("four classes");
    StemSet::new(stems)
}

/// Loads the stems of a directory that may lack a mixture file.
pub fn load_stems(dir: impl AsRef<Path>) -> Result<StemSet, AudioError> {
    let dir = dir.as_ref();
    let first = dir.join(StemClass::Vocals.file_name());
    if !first.is_file() {
        return Err(AudioError::MissingFile {
            track: track_name(dir),
            class: StemClass::Vocals.name().into(),
            path: first,
        });
    }
    let reference = load_wav(&first)?;
    load_stems_matching(dir, &reference)
}

/// Writes `mixture.wav` (when given) and the four stems into `dir`.
pub fn save_track(
    dir: impl AsRef<Path>,
    mixture: Option<&Waveform>,
    stems: &StemSet,
    format: SampleFormat,
) -> Result<(), AudioError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    if let Some(m) = mixture {
        save_wav(dir.join(MIXTURE_FILE), m, format)?;
    }
    for (class, w) in stems.iter() {
        save_wav(dir.join(class.file_name()), w, format)?;
    }
    Ok(())
}

/// A named track held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub name: String,
    pub stems: StemSet,
}

/// Loads the stems of every indexed track under `root`.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<Track>, AudioError> {
    scan_dataset(root)?
        .tracks
        .into_iter()
        .map(|rec| {
            let (_, stems) = load_track(&rec.path)?;
            Ok(Track { name: rec.name, stems })
        })
        .collect()
}

/// Writes each track as `root/<name>/` with a mixture recomputed from its
/// stems.
pub fn save_dataset(root: impl AsRef<Path>, tracks: &[Track], format: SampleFormat) -> Result<(), AudioError> {
    let root = root.as_ref();
    for t in tracks {
        save_track(root.join(&t.name), Some(&t.stems.mixture()), &t.stems, format)?;
    }
    Ok(())
}

fn track_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub name: String,
    pub path: PathBuf,
    /// Length in samples per channel.
    pub duration: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub tracks: Vec<TrackRecord>,
    /// Subdirectories that were skipped, with the reason.
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

/// Indexes every valid track directory under `root`, sorted by name.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex, AudioError> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut index = DatasetIndex::default();
    for dir in dirs {
        match load_track(&dir) {
            Ok((mixture, _)) => index.tracks.push(TrackRecord {
                name: track_name(&dir),
                duration: mixture.len(),
                path: dir,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                index.warnings.push(format!("{}: {e}", dir.display()));
            }
        }
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stereo(len: usize, f: impl Fn(usize, usize) -> f32) -> Waveform {
        Waveform::new(
            44100,
            (0..2).map(|c| (0..len).map(|i| f(c, i)).collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn float32_zero_file_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        save_wav(&p, &Waveform::zeros(44100, 2, 44100), SampleFormat::Float32).unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!((w.channels(), w.sample_rate(), w.len()), (2, 44100, 44100));
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn canonical_header_length() {
        for fmt in [SampleFormat::Pcm16, SampleFormat::Pcm24, SampleFormat::Float32] {
            let bytes = encode_wav(&Waveform::zeros(44100, 2, 1000), fmt).unwrap();
            assert_eq!(bytes.len(), 44 + 2 * 1000 * fmt.bytes_per_sample());
        }
    }

    #[test]
    fn pcm16_negative_full_scale_is_minus_one() {
        let mut bytes = encode_wav(&Waveform::zeros(44100, 1, 1), SampleFormat::Pcm16).unwrap();
        bytes[44..46].copy_from_slice(&i16::MIN.to_le_bytes());
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.data(), &[-1.0]);
    }

    #[test]
    fn pcm24_scaling_endpoints() {
        let mut bytes = encode_wav(&Waveform::zeros(44100, 1, 2), SampleFormat::Pcm24).unwrap();
        bytes[44..47].copy_from_slice(&[0x00, 0x00, 0x80]);
        bytes[47..50].copy_from_slice(&[0xff, 0xff, 0x7f]);
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.data()[0], -1.0);
        assert_eq!(w.data()[1], 8_388_607.0 / 8_388_608.0);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let w = stereo(500, |c, i| (i as f32 * 0.37 + c as f32).sin() * 0.9);
        let back = parse_wav(&encode_wav(&w, SampleFormat::Pcm16).unwrap()).unwrap();
        assert!(w.max_abs_diff(&back) <= 1.0 / 32768.0);
    }

    #[test]
    fn distinct_errors_for_bad_files() {
        assert!(matches!(parse_wav(b"RIFX0000WAVE"), Err(AudioError::MalformedHeader(_))));

        let mut bytes = encode_wav(&Waveform::zeros(8000, 1, 4), SampleFormat::Pcm16).unwrap();
        bytes[34..36].copy_from_slice(&8u16.to_le_bytes());
        assert!(matches!(parse_wav(&bytes), Err(AudioError::UnsupportedCodec { bits: 8, .. })));

        let bytes = encode_wav(&Waveform::zeros(8000, 1, 4), SampleFormat::Float32).unwrap();
        assert!(matches!(
            parse_wav(&bytes[..bytes.len() - 3]),
            Err(AudioError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn three_channels_rejected() {
        let w = Waveform::new(8000, vec![vec![0.0; 4]; 3]).unwrap();
        let bytes = encode_wav(&w, SampleFormat::Pcm16).unwrap();
        assert!(matches!(parse_wav(&bytes), Err(AudioError::UnsupportedCodec { channels: 3, .. })));
    }

    #[test]
    fn save_rejects_non_finite() {
        let mut w = Waveform::zeros(8000, 1, 4);
        w.data_mut()[2] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_wav(dir.path().join("x.wav"), &w, SampleFormat::Float32),
            Err(AudioError::NonFinite { index: 2, .. })
        ));
    }

    #[test]
    fn mono_duplicates_to_stereo() {
        let w = Waveform::new(8000, vec![vec![0.5, -0.5]]).unwrap().with_channels(2).unwrap();
        assert_eq!(w.channel(1), &[0.5, -0.5]);
    }

    fn write_track(dir: &Path, len: usize, skip: Option<StemClass>) {
        let stems: Vec<Waveform> = (0..4).map(|k| stereo(len, |c, i| ((i + k + c) % 7) as f32 * 0.01)).collect();
        let stems = StemSet::new(stems.try_into().unwrap()).unwrap();
        save_track(dir, Some(&stems.mixture()), &stems, SampleFormat::Float32).unwrap();
        if let Some(class) = skip {
            fs::remove_file(dir.join(class.file_name())).unwrap();
        }
    }

    #[test]
    fn load_track_checks_files() {
        let root = tempfile::tempdir().unwrap();
        let ok = root.path().join("a");
        write_track(&ok, 300, None);
        let (mix, stems) = load_track(&ok).unwrap();
        assert_eq!(mixture_residual(&mix, &stems), 0.0);

        let missing = root.path().join("b");
        write_track(&missing, 300, Some(StemClass::Bass));
        match load_track(&missing) {
            Err(AudioError::MissingFile { class, .. }) => assert_eq!(class, "bass"),
            other => panic!("unexpected {other:?}"),
        }

        let short = root.path().join("c");
        write_track(&short, 300, None);
        save_wav(short.join("vocals.wav"), &stereo(299, |_, _| 0.0), SampleFormat::Float32).unwrap();
        assert!(matches!(load_track(&short), Err(AudioError::LengthMismatch { .. })));
    }

    #[test]
    fn scan_reports_invalid_tracks_as_warnings() {
        let root = tempfile::tempdir().unwrap();
        assert!(scan_dataset(root.path()).unwrap().is_empty());
        for (name, len) in [("t2", 200), ("t0", 300), ("t1", 250)] {
            write_track(&root.path().join(name), len, None);
        }
        write_track(&root.path().join("broken"), 100, Some(StemClass::Drums));
        let index = scan_dataset(root.path()).unwrap();
        let names: Vec<_> = index.tracks.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["t0", "t1", "t2"]);
        assert_eq!(index.warnings.len(), 1);
        for t in &index.tracks {
            assert_eq!(t.duration, load_track(&t.path).unwrap().0.len());
        }
        assert!(scan_dataset(root.path().join("nope")).is_err());
    }
}
