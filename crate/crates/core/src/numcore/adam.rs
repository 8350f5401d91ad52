use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Moment accumulators for bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    /// Fresh state shaped like `store`, with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.values().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam update to every parameter in `params`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} parameters, {} gradients, {} accumulators",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), m) in params.values().iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || m.len() != p.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(1.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[1])], &mut st, 0.1).unwrap();
        assert_eq!(p.values()[0].data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> w = 1 - 0.1 / (1 + 1e-8)
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0).unwrap()], &mut st, 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.values()[0].data()[0] - expected).abs() < 1e-15);
        assert!((p.values()[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn counter_increments() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        let g = [Tensor::scalar(0.3).unwrap()];
        adam_step(&mut p, &g, &mut st, 0.01).unwrap();
        adam_step(&mut p, &g, &mut st, 0.01).unwrap();
        assert_eq!(st.step(), 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, 0.1).is_err());
        assert!(adam_step(&mut p, &[], &mut st, 0.1).is_err());
        assert_eq!(st.step(), 0);
    }
}
