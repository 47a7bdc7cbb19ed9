use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::{Ops, Real, Tensor};

/// Axes along which high losses are discarded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDims {
    None,
    Batch,
    #[serde(alias = "batch, time", alias = "batch,time")]
    BatchTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossMaskSpec {
    pub dims: MaskDims,
    /// Fraction of elements kept per class; ignored when `dims` is `none`.
    pub q: f64,
}

impl LossMaskSpec {
    pub fn none() -> Self {
        Self {
            dims: MaskDims::None,
            q: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.dims != MaskDims::None && !(self.q > 0.0 && self.q <= 1.0) {
            return Err(TrainError::InvalidQuantile(self.q));
        }
        Ok(())
    }
}

/// `max(1, floor(q * n))`. The small tolerance keeps products such as
/// `0.29 * 100` from rounding down past an integer.
pub fn keep_count(n: usize, q: f64) -> usize {
    ((q * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Keeps the `keep_count(n, q)` smallest losses; ties go to the lower index.
pub fn select_keep(losses: &[f64], q: f64) -> Result<Vec<bool>, TrainError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(TrainError::InvalidQuantile(q));
    }
    if losses.is_empty() {
        return Err(TrainError::EmptyLosses);
    }
    let k = keep_count(losses.len(), q);
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut keep = vec![false; losses.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    Ok(keep)
}

/// Segment length in samples for a loss granularity.
pub fn segment_len(dims: MaskDims, chunk_samples: usize, hop_length: usize) -> usize {
    match dims {
        MaskDims::BatchTime => hop_length,
        MaskDims::None | MaskDims::Batch => chunk_samples,
    }
}

/// Mean squared error per `(item, class, segment)`: `[B, S, C, L] -> [B, S, L / seg]`.
pub fn per_element_losses<T: Real, O: Ops<T>>(ops: &mut O, est: &O::V, target: &O::V, seg: usize) -> O::V {
    let d = ops.sub(est, target);
    let sq = ops.mul(&d, &d);
    ops.segment_mean(&sq, seg)
}

/// Constant weights turning `[B, S, T]` losses into the masked objective:
/// per class, the mean of kept elements; then the mean over classes.
/// Returns the weights and the kept fraction.
pub fn mask_weights<T: Real>(losses: &Tensor<T>, spec: &LossMaskSpec) -> Result<(Tensor<T>, f64), TrainError> {
    spec.validate()?;
    let &[b, s, t] = losses.shape() else {
        return Err(TrainError::Shape(format!("losses must be [B, S, T], got {:?}", losses.shape())));
    };
    let mut weights = Tensor::zeros(losses.shape());
    let mut kept = 0usize;
    for class in 0..s {
        let idx: Vec<usize> = (0..b)
            .flat_map(|bi| (0..t).map(move |ti| (bi * s + class) * t + ti))
            .collect();
        let keep = match spec.dims {
            MaskDims::None => vec![true; idx.len()],
            MaskDims::Batch | MaskDims::BatchTime => {
                let vals: Vec<f64> = idx.iter().map(|&i| losses.data()[i].as_f64()).collect();
                select_keep(&vals, spec.q)?
            }
        };
        let n = keep.iter().filter(|&&k| k).count();
        kept += n;
        let w = T::from_f64_lossy(1.0 / (n * s) as f64);
        for (&i, &k) in idx.iter().zip(&keep) {
            if k {
                weights.data_mut()[i] = w;
            }
        }
    }
    Ok((weights, kept as f64 / losses.len() as f64))
}

/// Scalar objective `sum(weights * losses)`; discarded elements carry a zero
/// weight and so receive exactly zero gradient.
pub fn masked_loss<T: Real, O: Ops<T>>(ops: &mut O, losses: &O::V, weights: &Tensor<T>) -> O::V {
    ops.weighted_sum(losses, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad, Eager, Tape};
    use proptest::prelude::*;

    #[test]
    fn six_items_keep_two() {
        let losses = [5.0, 1.0, 4.0, 2.0, 6.0, 3.0];
        for q in [1.0 / 3.0, 0.4, 0.49] {
            let keep = select_keep(&losses, q).unwrap();
            assert_eq!(keep, vec![false, true, false, true, false, false], "q={q}");
        }
    }

    #[test]
    fn seven_percent_of_two_hundred() {
        assert_eq!(keep_count(200, 0.93), 186);
        let losses: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64).collect();
        let keep = select_keep(&losses, 0.93).unwrap();
        assert_eq!(keep.iter().filter(|k| !**k).count(), 14);
    }

    #[test]
    fn clamps_and_errors() {
        assert_eq!(select_keep(&[3.0], 0.01).unwrap(), vec![true]);
        assert!(select_keep(&[1.0], 0.0).is_err());
        assert!(select_keep(&[1.0], 1.5).is_err());
        assert!(select_keep(&[], 0.5).is_err());
        assert_eq!(keep_count(100, 0.29), 29);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(select_keep(&[1.0, 1.0, 1.0, 0.0], 0.5).unwrap(), vec![true, false, false, true]);
    }

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn loss_closed_forms() {
        let target = tensor(&[1, 2, 1, 4], vec![0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4]);
        let mut est = target.clone();
        let l = per_element_losses(&mut Eager, &est, &target, 4);
        assert!(l.data().iter().all(|&v| v == 0.0));
        est.data_mut()[4..].iter_mut().for_each(|v| *v += 0.5);
        let l = per_element_losses(&mut Eager, &est, &target, 4);
        assert_eq!(l.shape(), &[1, 2, 1]);
        assert_eq!(l.data()[0], 0.0);
        assert!((l.data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn segment_means_average_to_batch_loss() {
        let target = tensor(&[2, 2, 2, 6], (0..48).map(|i| (i as f64 * 0.37).sin()).collect());
        let est = tensor(&[2, 2, 2, 6], (0..48).map(|i| (i as f64 * 0.11).cos()).collect());
        let whole = per_element_losses(&mut Eager, &est, &target, 6);
        let parts = per_element_losses(&mut Eager, &est, &target, 2);
        for (i, w) in whole.data().iter().enumerate() {
            let m: f64 = parts.data()[3 * i..3 * i + 3].iter().sum::<f64>() / 3.0;
            assert!((m - w).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_mean_per_class() {
        // one class, six items: kept {1, 2} -> 1.5
        let l = tensor(&[6, 1, 1], vec![5.0, 1.0, 4.0, 2.0, 6.0, 3.0]);
        let spec = LossMaskSpec {
            dims: MaskDims::Batch,
            q: 0.4,
        };
        let (w, frac) = mask_weights(&l, &spec).unwrap();
        assert!((masked_loss(&mut Eager, &l, &w).data()[0] - 1.5).abs() < 1e-12);
        assert!((frac - 2.0 / 6.0).abs() < 1e-12);

        let all = LossMaskSpec {
            dims: MaskDims::Batch,
            q: 1.0,
        };
        let (w, _) = mask_weights(&l, &all).unwrap();
        assert!((masked_loss(&mut Eager, &l, &w).data()[0] - 3.5).abs() < 1e-12);
        let (wn, frac) = mask_weights(&l, &LossMaskSpec::none()).unwrap();
        assert_eq!(w, wn);
        assert_eq!(frac, 1.0);
    }

    #[test]
    fn pooled_batch_time_selection() {
        // per class 2 items x 5 segments pooled: q = 0.5 keeps 5 of 10
        let data: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64).collect();
        let l = tensor(&[2, 2, 5], data);
        let spec = LossMaskSpec {
            dims: MaskDims::BatchTime,
            q: 0.5,
        };
        let (w, frac) = mask_weights(&l, &spec).unwrap();
        assert_eq!(frac, 0.5);
        for class in 0..2 {
            let n = (0..2).flat_map(|b| (0..5).map(move |t| (b * 2 + class) * 5 + t)).filter(|&i| w.data()[i] > 0.0).count();
            assert_eq!(n, 5);
        }
    }

    #[test]
    fn discarded_elements_get_zero_gradient() {
        let l = tensor(&[6, 1, 1], vec![5.0, 1.0, 4.0, 2.0, 6.0, 3.0]);
        let spec = LossMaskSpec {
            dims: MaskDims::Batch,
            q: 0.4,
        };
        let (w, _) = mask_weights(&l, &spec).unwrap();
        let (_, g) = grad(&[l.clone()], |tape: &mut Tape<f64>, v| masked_loss(tape, &v[0], &w)).unwrap();
        let expected = [0.0, 0.5, 0.0, 0.5, 0.0, 0.0];
        assert_eq!(g[0].data(), &expected);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn keep_count_law(n in 1usize..500, q in 0.0001f64..=1.0) {
            let losses: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1009) as f64).collect();
            let keep = select_keep(&losses, q).unwrap();
            let expected = ((q * n as f64).floor() as usize).max(1);
            prop_assert_eq!(keep.iter().filter(|k| **k).count(), expected);
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(vals in proptest::collection::vec(0.0f64..10.0, 1..40), c in 0.1f64..100.0, q in 0.05f64..=1.0) {
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            // ranks may only change where shifting merges nearly equal values
            let distinct = vals.windows(2).all(|w| (w[0] - w[1]).abs() > 1e-9);
            prop_assume!(distinct);
            prop_assert_eq!(select_keep(&vals, q).unwrap(), select_keep(&shifted, q).unwrap());
        }

        #[test]
        fn permutation_equivariance(vals in proptest::collection::vec(0.0f64..10.0, 2..30), rot in 1usize..29, q in 0.05f64..=1.0) {
            let n = vals.len();
            let r = rot % n;
            let perm: Vec<f64> = (0..n).map(|i| vals[(i + r) % n]).collect();
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let a = select_keep(&vals, q).unwrap();
            let b = select_keep(&perm, q).unwrap();
            for i in 0..n {
                prop_assert_eq!(b[i], a[(i + r) % n]);
            }
        }
    }
}
