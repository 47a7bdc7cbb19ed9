//! Energy-ratio SDR metrics and leaderboard-style aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{StemClass, StemSet, Waveform};

/// Guard added to both energies so silence scores exactly 0 dB.
pub const SDR_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("eval: shape mismatch: reference {reference:?}, estimate {estimate:?}")]
    ShapeMismatch {
        reference: (usize, usize),
        estimate: (usize, usize),
    },
    #[error("eval: no usable {chunk}-sample chunks (length {length})")]
    NoUsableChunks { chunk: usize, length: usize },
    #[error("eval: no tracks to aggregate")]
    Empty,
    #[error("eval: track `{0}` has a different class set")]
    ClassMismatch(String),
    #[error("eval: non-finite samples")]
    NonFinite,
}

fn check_pair(reference: &Waveform, estimate: &Waveform) -> Result<(), EvalError> {
    if reference.channels() != estimate.channels() || reference.len() != estimate.len() {
        return Err(EvalError::ShapeMismatch {
            reference: (reference.channels(), reference.len()),
            estimate: (estimate.channels(), estimate.len()),
        });
    }
    Ok(())
}

/// `10 log10((sum s^2 + eps) / (sum (s - s_hat)^2 + eps))` over selected
/// sample ranges of every channel.
fn sdr_ranges(reference: &Waveform, estimate: &Waveform, start: usize, len: usize) -> Result<(f64, f64), EvalError> {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ch in 0..reference.channels() {
        let s = &reference.channel(ch)[start..start + len];
        let e = &estimate.channel(ch)[start..start + len];
        for (&a, &b) in s.iter().zip(e) {
            let (a, b) = (a as f64, b as f64);
            num += a * a;
            den += (a - b) * (a - b);
        }
    }
    if !num.is_finite() || !den.is_finite() {
        return Err(EvalError::NonFinite);
    }
    Ok((num, den))
}

fn ratio_db(num: f64, den: f64) -> f64 {
    10.0 * ((num + SDR_EPS) / (den + SDR_EPS)).log10()
}

pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64, EvalError> {
    check_pair(reference, estimate)?;
    let (num, den) = sdr_ranges(reference, estimate, 0, reference.len())?;
    Ok(ratio_db(num, den))
}

/// Median of non-empty values; even counts take the mean of the two middle
/// values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Per-chunk SDRs over whole chunks of `chunk_seconds`; chunks whose
/// reference energy is below [`SDR_EPS`] are skipped.
pub fn chunk_sdrs(reference: &Waveform, estimate: &Waveform, chunk_seconds: f64) -> Result<Vec<f64>, EvalError> {
    check_pair(reference, estimate)?;
    let chunk = (chunk_seconds * reference.sample_rate() as f64).round() as usize;
    let mut out = Vec::new();
    if chunk > 0 {
        for i in 0..reference.len() / chunk {
            let (num, den) = sdr_ranges(reference, estimate, i * chunk, chunk)?;
            if num >= SDR_EPS {
                out.push(ratio_db(num, den));
            }
        }
    }
    if out.is_empty() {
        return Err(EvalError::NoUsableChunks {
            chunk,
            length: reference.len(),
        });
    }
    Ok(out)
}

/// Chunked SDR: median of per-chunk energy-ratio SDRs.
pub fn csdr(reference: &Waveform, estimate: &Waveform, chunk_seconds: f64) -> Result<f64, EvalError> {
    Ok(median(&chunk_sdrs(reference, estimate, chunk_seconds)?).expect("non-empty"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackScore {
    pub name: String,
    pub per_class_sdr: BTreeMap<StemClass, f64>,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_csdr: Option<BTreeMap<StemClass, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsdrSummary {
    /// Median over tracks of each track's chunk median.
    pub per_class: BTreeMap<StemClass, f64>,
    pub global: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tracks: Vec<TrackScore>,
    pub per_class_mean: BTreeMap<StemClass, f64>,
    pub global_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csdr: Option<CsdrSummary>,
    pub metric_variant: String,
}

/// Scores every class present in `reference`; `with_csdr` adds 1 s chunked
/// SDR.
pub fn evaluate_track(
    name: &str,
    reference: &StemSet,
    estimate: &StemSet,
    with_csdr: bool,
) -> Result<TrackScore, EvalError> {
    let mut per_class = BTreeMap::new();
    let mut per_class_csdr = BTreeMap::new();
    for class in StemClass::ALL {
        let (r, e) = (reference.get(class), estimate.get(class));
        per_class.insert(class, sdr(r, e)?);
        if with_csdr {
            per_class_csdr.insert(class, csdr(r, e, 1.0)?);
        }
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(TrackScore {
        name: name.to_string(),
        per_class_sdr: per_class,
        mean,
        per_class_csdr: with_csdr.then_some(per_class_csdr),
    })
}

/// Per-class means over tracks; the global mean is the mean of those.
pub fn aggregate(tracks: Vec<TrackScore>) -> Result<EvalReport, EvalError> {
    let first = tracks.first().ok_or(EvalError::Empty)?;
    let classes: Vec<StemClass> = first.per_class_sdr.keys().copied().collect();
    for t in &tracks {
        if !t.per_class_sdr.keys().copied().eq(classes.iter().copied()) {
            return Err(EvalError::ClassMismatch(t.name.clone()));
        }
    }
    let n = tracks.len() as f64;
    let per_class_mean: BTreeMap<StemClass, f64> = classes
        .iter()
        .map(|c| (*c, tracks.iter().map(|t| t.per_class_sdr[c]).sum::<f64>() / n))
        .collect();
    let global_mean = per_class_mean.values().sum::<f64>() / per_class_mean.len() as f64;
    let csdr = if tracks.iter().all(|t| t.per_class_csdr.is_some()) {
        let mut per_class = BTreeMap::new();
        for c in &classes {
            let vals: Vec<f64> = tracks
                .iter()
                .map(|t| t.per_class_csdr.as_ref().and_then(|m| m.get(c).copied()))
                .collect::<Option<_>>()
                .ok_or_else(|| EvalError::ClassMismatch(c.name().to_string()))?;
            per_class.insert(*c, median(&vals).expect("non-empty"));
        }
        let global = per_class.values().sum::<f64>() / per_class.len() as f64;
        Some(CsdrSummary { per_class, global })
    } else {
        None
    };
    Ok(EvalReport {
        tracks,
        per_class_mean,
        global_mean,
        csdr,
        metric_variant: "energy-ratio".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wave(data: Vec<f32>, rate: u32) -> Waveform {
        Waveform::new(rate, vec![data]).unwrap()
    }

    fn signal(n: usize, seed: u32) -> Vec<f32> {
        (0..n)
            .map(|i| ((i as f32 * 0.37 + seed as f32).sin() + 0.3 * (i as f32 * 1.3).cos()) * 0.5)
            .collect()
    }

    fn scaled(w: &Waveform, g: f32) -> Waveform {
        let mut o = w.clone();
        o.data_mut().iter_mut().for_each(|v| *v *= g);
        o
    }

    #[test]
    fn closed_forms() {
        let s = wave(signal(4000, 1), 1000);
        assert!((sdr(&s, &scaled(&s, 0.5)).unwrap() - 6.0206).abs() < 1e-3);
        assert_eq!(sdr(&s, &scaled(&s, 0.0)).unwrap(), 0.0);
        let e: f64 = s.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let perfect = sdr(&s, &s).unwrap();
        assert!((perfect - 10.0 * ((e + SDR_EPS) / SDR_EPS).log10()).abs() < 1e-9);
    }

    #[test]
    fn two_sample_hand_computed() {
        // s = [1, 2], s_hat = [1, 1]: 10 log10((5 + eps) / (1 + eps))
        let r = sdr(&wave(vec![1.0, 2.0], 1), &wave(vec![1.0, 1.0], 1)).unwrap();
        assert!((r - 10.0 * ((5.0 + 1e-7f64) / (1.0 + 1e-7)).log10()).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        assert!(sdr(&wave(vec![0.0; 3], 1), &wave(vec![0.0; 4], 1)).is_err());
    }

    #[test]
    fn csdr_counts_and_median() {
        let s = wave(signal(10_500, 2), 1000);
        assert_eq!(chunk_sdrs(&s, &scaled(&s, 0.5), 1.0).unwrap().len(), 10);
        assert!((csdr(&s, &scaled(&s, 0.5), 1.0).unwrap() - 6.0206).abs() < 1e-3);

        let mut est = s.clone();
        for (i, v) in est.data_mut().iter_mut().enumerate() {
            *v *= if i < 5000 { 0.5 } else { 0.9 };
        }
        let expected = 0.5 * (20.0 * 2f64.log10() + 20.0 * 10f64.log10());
        assert!((csdr(&s, &est, 1.0).unwrap() - expected).abs() < 1e-3);
    }

    #[test]
    fn silent_chunks_excluded() {
        let mut data = signal(3000, 3);
        data[1000..2000].fill(0.0);
        let s = wave(data, 1000);
        assert_eq!(chunk_sdrs(&s, &s, 1.0).unwrap().len(), 2);
        assert!(csdr(&wave(vec![0.0; 3000], 1000), &s, 1.0).is_err());
        assert!(csdr(&wave(vec![1.0; 500], 1000), &wave(vec![1.0; 500], 1000), 1.0).is_err());
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    fn stems(seed: u32) -> StemSet {
        StemSet::new(std::array::from_fn(|c| wave(signal(2000, seed * 10 + c as u32), 1000))).unwrap()
    }

    #[test]
    fn track_scores() {
        let r = stems(1);
        let t = evaluate_track("a", &r, &r, true).unwrap();
        assert!(t.per_class_sdr.values().all(|&v| v > 60.0));
        let mut est = r.clone();
        est.get_mut(StemClass::Bass).data_mut().fill(0.0);
        let t = evaluate_track("a", &r, &est, false).unwrap();
        assert_eq!(t.per_class_sdr[&StemClass::Bass], 0.0);
        assert!(t.per_class_sdr[&StemClass::Vocals] > 60.0);
    }

    fn score(name: &str, vals: [f64; 4]) -> TrackScore {
        let per_class: BTreeMap<_, _> = StemClass::ALL.into_iter().zip(vals).collect();
        TrackScore {
            name: name.into(),
            mean: vals.iter().sum::<f64>() / 4.0,
            per_class_sdr: per_class,
            per_class_csdr: None,
        }
    }

    #[test]
    fn aggregation() {
        let one = aggregate(vec![score("a", [1.0, 2.0, 3.0, 4.0])]).unwrap();
        assert_eq!(one.per_class_mean[&StemClass::Drums], 2.0);
        assert_eq!(one.global_mean, 2.5);
        let two = aggregate(vec![score("a", [4.0; 4]), score("b", [6.0; 4])]).unwrap();
        assert_eq!(two.per_class_mean[&StemClass::Vocals], 5.0);
        let row = aggregate(vec![score("m", [9.44, 7.79, 7.73, 6.16])]).unwrap();
        assert!((row.global_mean - 7.78).abs() <= 0.01);
        assert!(aggregate(vec![]).is_err());
        let json = serde_json::to_value(&two).unwrap();
        assert_eq!(json["metric_variant"], "energy-ratio");
        assert!(json.get("csdr").is_none());
    }

    proptest! {
        #[test]
        fn scale_invariance(alpha in 0.01f32..100.0, seed in 0u32..50) {
            let s = wave(signal(512, seed), 100);
            let e = wave(signal(512, seed + 1), 100);
            let a = sdr(&s, &e).unwrap();
            let b = sdr(&scaled(&s, alpha), &scaled(&e, alpha)).unwrap();
            prop_assert!((a - b).abs() < 1e-4);
        }

        #[test]
        fn decreasing_in_noise(seed in 0u32..50, lo in 0.001f32..0.1, step in 1.1f32..4.0) {
            let s = wave(signal(512, seed), 100);
            let noise = signal(512, seed + 77);
            let noisy = |g: f32| {
                let mut o = s.clone();
                o.data_mut().iter_mut().zip(&noise).for_each(|(v, n)| *v += g * n);
                o
            };
            prop_assert!(sdr(&s, &noisy(lo)).unwrap() > sdr(&s, &noisy(lo * step)).unwrap());
        }

        #[test]
        fn aggregate_permutation_invariant(vals in proptest::collection::vec(-10.0f64..20.0, 12), rot in 0usize..3) {
            let mk = |i: usize| score(&i.to_string(), [vals[4 * i], vals[4 * i + 1], vals[4 * i + 2], vals[4 * i + 3]]);
            let a = aggregate((0..3).map(mk).collect()).unwrap();
            let b = aggregate((0..3).map(|i| mk((i + rot) % 3)).collect()).unwrap();
            for c in StemClass::ALL {
                prop_assert!((a.per_class_mean[&c] - b.per_class_mean[&c]).abs() < 1e-12);
            }
            prop_assert!((a.global_mean - b.global_mean).abs() < 1e-12);
        }
    }
}
