use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

/// Per-parameter Adam moments. No weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T = f32> {
    #[serde(skip)]
    pub m: Vec<Tensor<T>>,
    #[serde(skip)]
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TensorError::ShapeMismatch {
            expected: vec![params.len()],
            found: vec![grads.len(), state.m.len()],
        });
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        for other in [g.shape(), m.shape(), v.shape()] {
            if other != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    expected: p.shape().to_vec(),
                    found: other.to_vec(),
                });
            }
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gf = gv.as_f64();
            let mf = b1 * mv.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
            *mv = T::from_f64_lossy(mf);
            *vv = T::from_f64_lossy(vf);
            let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + eps);
            *pv = T::from_f64_lossy(pv.as_f64() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor<f32> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_hand_evaluated() {
        let mut p = vec![scalar(1.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[scalar(1.0)], &mut st, 0.1).unwrap();
        assert!((st.m[0].data()[0] - 0.1).abs() < 1e-7);
        assert!((st.v[0].data()[0] - 1e-3).abs() < 1e-9);
        assert!((p[0].data()[0] - 0.9).abs() <= 1e-7);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn two_constant_steps() {
        let mut p = vec![scalar(1.0)];
        let mut st = AdamState::new(&p);
        for _ in 0..2 {
            adam_step(&mut p, &[scalar(1.0)], &mut st, 0.1).unwrap();
        }
        assert!((p[0].data()[0] - 0.8).abs() <= 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = vec![scalar(0.25)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[scalar(0.0)], &mut st, 0.1).unwrap();
        assert_eq!(p[0].data()[0], 0.25);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![scalar(0.25)];
        let mut st = AdamState::new(&p);
        let g = Tensor::<f32>::zeros(&[2]);
        assert!(adam_step(&mut p, &[g], &mut st, 0.1).is_err());
        assert_eq!(st.t, 0);
    }
}
