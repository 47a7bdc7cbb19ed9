use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Ops, Real, Tape, Tensor, TensorError, Var};

/// Evaluates `loss_fn` on a fresh tape and returns the loss with the gradient
/// of every parameter.
pub fn grad<T, F>(params: &[Tensor<T>], loss_fn: F) -> Result<(T, Vec<Tensor<T>>), TensorError>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = loss_fn(&mut tape, &vars);
    let mut grads = tape.backward(loss)?;
    let value = Ops::value(&tape, &loss).data()[0];
    Ok((value, vars.into_iter().map(|v| grads.take(v)).collect()))
}

/// Which scalar parameters a finite-difference check perturbs.
#[derive(Clone, Debug)]
pub enum ProbeSelection {
    /// `count` positions drawn uniformly over all scalars of all tensors.
    Random { count: usize, seed: u64 },
    /// Explicit `(tensor, flat index)` pairs.
    Explicit(Vec<(usize, usize)>),
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub probes: Vec<Probe>,
}

/// Compares reverse-mode gradients with central differences.
///
/// Each probe moves one scalar by `±rel_step * scale` and `±2 rel_step * scale`
/// (fourth-order central stencil), where `scale` is the
/// larger of the scalar's magnitude and its tensor's RMS (1 when both are 0).
/// The error of a probe is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<T, F>(
    params: &[Tensor<T>],
    loss_fn: F,
    probes: &ProbeSelection,
    rel_step: f64,
) -> Result<GradCheck, TensorError>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Var,
{
    let (_, analytic) = grad(params, &loss_fn)?;
    let positions = match probes {
        ProbeSelection::Explicit(list) => list.clone(),
        ProbeSelection::Random { count, seed } => {
            let total: usize = params.iter().map(Tensor::len).sum();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*count)
                .map(|_| {
                    let mut flat = rng.gen_range(0..total);
                    let mut t = 0;
                    while flat >= params[t].len() {
                        flat -= params[t].len();
                        t += 1;
                    }
                    (t, flat)
                })
                .collect()
        }
    };
    let eval = |ps: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = loss_fn(&mut tape, &vars);
        let v = tape.value(&loss);
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0].as_f64())
    };
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(positions.len());
    let mut worst = 0.0f64;
    for (t, i) in positions {
        let orig = work[t].data()[i];
        let rms = (work[t].data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / work[t].len() as f64).sqrt();
        let mut scale = orig.as_f64().abs().max(rms);
        if scale == 0.0 {
            scale = 1.0;
        }
        let h = rel_step * scale;
        let mut at = |delta: f64| -> Result<(f64, f64), TensorError> {
            let v = T::from_f64_lossy(orig.as_f64() + delta);
            work[t].data_mut()[i] = v;
            let l = eval(&work);
            work[t].data_mut()[i] = orig;
            Ok((v.as_f64(), l?))
        };
        let (p1, lp1) = at(h)?;
        let (m1, lm1) = at(-h)?;
        let (p2, lp2) = at(2.0 * h)?;
        let (m2, lm2) = at(-2.0 * h)?;
        // fourth-order stencil on the steps actually taken after rounding to T
        let d1 = (lp1 - lm1) / (p1 - m1);
        let d2 = (lp2 - lm2) / (p2 - m2);
        let numeric = (4.0 * d1 - d2) / 3.0;
        let a = analytic[t].data()[i].as_f64();
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
        out.push(Probe {
            tensor: t,
            index: i,
            analytic: a,
            numeric,
            relative_error: err,
        });
    }
    Ok(GradCheck {
        max_relative_error: worst,
        probes: out,
    })
}
