//! Adam with bias correction, operating on flat f64 parameter arrays.

use super::{Error, Graph, NodeId, Result};

/// Per-parameter optimizer state. `t` counts completed steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update of `values` in place from `grad`.
pub fn adam_update(values: &mut [f64], grad: &[f64], st: &mut AdamState) {
    assert_eq!(values.len(), grad.len());
    assert_eq!(values.len(), st.m.len());
    st.t += 1;
    let bc1 = 1.0 - st.beta1.powi(st.t as i32);
    let bc2 = 1.0 - st.beta2.powi(st.t as i32);
    for i in 0..values.len() {
        let g = grad[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        values[i] -= st.lr * m_hat / (v_hat.sqrt() + st.eps);
    }
}

/// Adam step over graph parameter nodes: reads each node's accumulated
/// gradient, updates its values in place, and zeroes the gradient. Fails if
/// any parameter is missing a gradient (i.e. backward did not reach it).
pub fn adam_step(g: &mut Graph, params: &[NodeId], states: &mut [AdamState]) -> Result<()> {
    assert_eq!(params.len(), states.len());
    for (p, st) in params.iter().zip(states.iter_mut()) {
        let grad = g.grad(*p).ok_or(Error::MissingGradient(p.0))?.to_vec();
        adam_update(g.values_mut(*p), &grad, st);
        g.zero_grad(*p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent evaluation of the Adam recurrence for a constant scalar
    /// gradient, unrolled by hand.
    fn unrolled(g: f64, steps: u64, lr: f64, b1: f64, b2: f64, eps: f64, x0: f64) -> f64 {
        let (mut m, mut v, mut x) = (0.0, 0.0, x0);
        for t in 1..=steps {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn first_step_matches_closed_form() {
        // beta1 = 0, t = 1: delta = -lr * g / (sqrt(g^2) + eps)
        let mut st = AdamState::new(1, 5e-5, 0.0, 0.9, 1e-8);
        let mut x = vec![1.0];
        adam_update(&mut x, &[3.0], &mut st);
        let expected = 1.0 - 5e-5 * 3.0 / ((3.0f64 * 3.0).sqrt() + 1e-8);
        assert!((x[0] - expected).abs() < 1e-18, "{} vs {expected}", x[0]);
        assert!((x[0] - (1.0 - 5e-5)).abs() < 1e-12);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut st = AdamState::new(3, 1e-3, 0.0, 0.9, 1e-8);
        let mut x = vec![0.5, -1.0, 2.0];
        let before = x.clone();
        adam_update(&mut x, &[0.0; 3], &mut st);
        assert_eq!(x, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let (g, lr, b1, b2, eps) = (0.7, 1e-2, 0.0, 0.9, 1e-8);
        let mut st = AdamState::new(1, lr, b1, b2, eps);
        let mut x = vec![0.2];
        adam_update(&mut x, &[g], &mut st);
        adam_update(&mut x, &[g], &mut st);
        let expected = unrolled(g, 2, lr, b1, b2, eps, 0.2);
        assert!((x[0] - expected).abs() < 1e-15, "{} vs {expected}", x[0]);
    }

    #[test]
    fn graph_step_requires_gradients() {
        let mut g = Graph::new();
        let p = g.leaf(vec![2], vec![1.0, 2.0]);
        let mut states = vec![AdamState::new(2, 1e-3, 0.0, 0.9, 1e-8)];
        let err = adam_step(&mut g, &[p], &mut states).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(_)));

        let s = g.sum(p);
        g.backward(s).unwrap();
        adam_step(&mut g, &[p], &mut states).unwrap();
        assert!(g.grad(p).is_none(), "grads must be zeroed after the step");
        assert!(g.values(p)[0] < 1.0);
    }
}
