use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim(format!(
                "adam: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![Tensor::new([2], vec![0.5, -1.0]).unwrap()];
        let mut state = AdamState::new(&params);
        state.m[0] = Tensor::new([2], vec![0.2, 0.2]).unwrap();
        state.v[0] = Tensor::new([2], vec![0.0, 0.0]).unwrap();
        state.step = 10;
        // with v = 0 the update is lr·m̂/ε, so check with m = 0 for the fixed point
        state.m[0] = Tensor::zeros([2]);
        adam_step(
            &mut params,
            &[Tensor::zeros([2])],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(params[0].data(), &[0.5, -1.0]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &[Tensor::scalar(2.0)], &mut state, &cfg).unwrap();
        let (m1, v1) = (state.m[0].data()[0], state.v[0].data()[0]);
        adam_step(&mut params, &[Tensor::scalar(0.0)], &mut state, &cfg).unwrap();
        assert!((state.m[0].data()[0] - 0.9 * m1).abs() < 1e-15);
        assert!((state.v[0].data()[0] - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.25] {
            let mut params = vec![Tensor::scalar(0.0)];
            let mut state = AdamState::new(&params);
            adam_step(&mut params, &[Tensor::scalar(g)], &mut state, &cfg).unwrap();
            let moved = params[0].data()[0];
            assert!(
                (moved + cfg.lr * f64::signum(g)).abs() < 1e-9,
                "moved {moved}"
            );
        }
    }

    #[test]
    fn three_steps_on_a_parabola_match_reference_trace() {
        // Scalar reference for f(x) = x², gradient 2x, x0 = 1, lr 1e-3.
        fn reference(steps: usize) -> Vec<f64> {
            let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 1e-3f64, 1e-8f64);
            let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
            let mut trace = Vec::new();
            for t in 1..=steps {
                let g = 2.0 * x;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t as i32));
                let vh = v / (1.0 - b2.powi(t as i32));
                x -= lr * mh / (vh.sqrt() + eps);
                trace.push(x);
            }
            trace
        }
        let expected = reference(3);
        // The gradient shrinks slowly, so every step is ≈ lr.
        assert!((expected[0] - 0.999).abs() < 1e-8);
        assert!((expected[2] - 0.997).abs() < 1e-6);

        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        for want in expected {
            let g = Tensor::scalar(2.0 * params[0].data()[0]);
            adam_step(&mut params, &[g], &mut state, &cfg).unwrap();
            assert_eq!(params[0].data()[0].to_bits(), want.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::zeros([2])];
        let mut state = AdamState::new(&params);
        let err = adam_step(
            &mut params,
            &[Tensor::zeros([3])],
            &mut state,
            &AdamConfig::default(),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
