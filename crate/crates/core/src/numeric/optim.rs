use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `params`, with the usual 0.9 / 0.999 / 1e-8 defaults.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
        }
    }
}

/// One Adam update over `params`, which must line up with the state's
/// moment buffers. Gradients are zeroed afterwards.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::State(format!(
            "adam_step: {} parameters but optimizer tracks {}",
            params.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad.is_none() {
            return Err(Error::State(format!("adam_step: parameter {i} has no gradient")));
        }
        if p.shape() != state.m[i].shape() {
            return Err(Error::State(format!(
                "adam_step: parameter {i} has shape {:?}, moments have {:?}",
                p.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad.take().expect("checked above");
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = p.data_mut();
        for j in 0..theta.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        p.grad = Some(vec![0.0; grad.len()]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::scalar(value).with_grad();
        t.grad = Some(vec![grad]);
        t
    }

    /// Plain scalar Adam written from the update equations.
    fn scalar_adam(theta: &mut f64, m: &mut f64, v: &mut f64, t: i32, g: f64, lr: f64) {
        *m = 0.9 * *m + 0.1 * g;
        *v = 0.999 * *v + 0.001 * g * g;
        let mh = *m / (1.0 - 0.9f64.powi(t));
        let vh = *v / (1.0 - 0.999f64.powi(t));
        *theta -= lr * mh / (vh.sqrt() + 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        p.grad = Some(vec![0.0; 3]);
        let before = p.clone();
        let mut state = AdamState::new([&p], 0.01);
        adam_step(&mut [&mut p], &mut state).unwrap();
        assert_eq!(p.data(), before.data());
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = param(0.0, 1.0);
        let mut state = AdamState::new([&p], 0.001);
        adam_step(&mut [&mut p], &mut state).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((p.item() + 0.001).abs() < 1e-9, "{}", p.item());
        assert_eq!(p.grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn two_steps_on_square_match_scalar_reference() {
        let lr = 0.001;
        let mut p = param(1.0, 2.0);
        let mut state = AdamState::new([&p], lr);
        let (mut theta, mut m, mut v) = (1.0, 0.0, 0.0);
        for t in 1..=2 {
            let g = 2.0 * p.item();
            p.grad = Some(vec![g]);
            adam_step(&mut [&mut p], &mut state).unwrap();
            let g = 2.0 * theta;
            scalar_adam(&mut theta, &mut m, &mut v, t, g, lr);
        }
        assert!((p.item() - theta).abs() < 1e-12);
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut p = Tensor::scalar(1.0).with_grad();
        let mut state = AdamState::new([&p], 0.1);
        assert!(matches!(adam_step(&mut [&mut p], &mut state), Err(Error::State(_))));
        assert_eq!(state.step_count, 0);
    }
}
