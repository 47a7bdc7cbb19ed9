use rand::Rng;

use super::TrainError;
use crate::audio::{StemClass, Track, Waveform};
use crate::tensor::Tensor;

/// One training batch: mixtures and the matching per-source targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B` mixtures, each the sum of that item's four class chunks.
    pub mixtures: Vec<Waveform>,
    /// `[B, S, C, L]` for the requested classes.
    pub targets: Tensor,
    /// `(track index, start)` drawn for each item and class.
    pub draws: Vec<[(usize, usize); 4]>,
}

/// Draws `batch_size` items; for every item and class independently, a
/// uniform track among those at least `chunk_samples` long and a uniform
/// start. Classes are thereby remixed across songs.
pub fn sample_batch<R: Rng + ?Sized>(
    tracks: &[Track],
    classes: &[StemClass],
    batch_size: usize,
    chunk_samples: usize,
    rng: &mut R,
) -> Result<Batch, TrainError> {
    if tracks.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let pool: Vec<usize> = (0..tracks.len())
        .filter(|&i| tracks[i].stems.len() >= chunk_samples)
        .collect();
    if pool.is_empty() {
        return Err(TrainError::TracksTooShort { chunk_samples });
    }
    let channels = tracks[pool[0]].stems.channels();
    let mut mixtures = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size * classes.len() * channels * chunk_samples);
    let mut draws = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let picks: [(usize, usize); 4] = std::array::from_fn(|_| {
            let t = pool[rng.gen_range(0..pool.len())];
            let start = rng.gen_range(0..=tracks[t].stems.len() - chunk_samples);
            (t, start)
        });
        let chunks: Vec<Waveform> = StemClass::ALL
            .iter()
            .zip(&picks)
            .map(|(&c, &(t, start))| {
                let w = tracks[t].stems.get(c);
                if w.channels() != channels {
                    return Err(TrainError::Shape(format!(
                        "track `{}` has {} channels, expected {channels}",
                        tracks[t].name,
                        w.channels()
                    )));
                }
                Ok(w.slice(start, chunk_samples))
            })
            .collect::<Result<_, _>>()?;
        mixtures.push(Waveform::sum(chunks.iter()).map_err(|e| TrainError::Shape(e.to_string()))?);
        for c in classes {
            targets.extend_from_slice(chunks[c.index()].data());
        }
        draws.push(picks);
    }
    Ok(Batch {
        mixtures,
        targets: Tensor::from_vec(&[batch_size, classes.len(), channels, chunk_samples], targets)
            .expect("sized"),
        draws,
    })
}
