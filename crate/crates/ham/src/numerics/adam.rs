use crate::error::{Error, Result};
use crate::numerics::NamedTensors;

/// Adam state with the optimizer's published defaults:
/// lr=1e-3, β1=0.9, β2=0.999, ε=1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &NamedTensors) -> Self {
        AdamState::with_lr(params, 1e-3)
    }

    pub fn with_lr(params: &NamedTensors, lr: f64) -> Self {
        AdamState {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: params.entries.iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
            second_moment: params.entries.iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
        }
    }

    /// One Adam update using the gradients stored on the tensors.
    /// Gradients are left untouched; the caller zeroes them per batch.
    pub fn step(&mut self, params: &mut NamedTensors) -> Result<()> {
        if params.entries.len() != self.first_moment.len() {
            return Err(Error::Shape("adam: parameter count changed".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, e) in params.entries.iter_mut().enumerate() {
            let grad = e
                .tensor
                .grad
                .as_ref()
                .ok_or_else(|| Error::Param(format!("adam: parameter {} has no grad", e.name)))?
                .clone();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, &g) in grad.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                e.tensor.data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            if !e.tensor.all_finite() {
                return Err(Error::NonFinite(format!("adam step on {}", e.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one_param(value: f64) -> NamedTensors {
        let mut p = NamedTensors::default();
        p.push("w", Tensor::vector(vec![value]), true);
        p
    }

    fn set_grad(p: &mut NamedTensors, g: f64) {
        p.entries[0].tensor.grad = Some(vec![g]);
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut p = one_param(0.0);
        let mut st = AdamState::new(&p);
        set_grad(&mut p, 1.0);
        st.step(&mut p).unwrap();
        // m_hat = v_hat = 1 after bias correction, so Δ = -lr/(1+ε).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.entries[0].tensor.data[0] - expected).abs() < 1e-12);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = one_param(0.37);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            set_grad(&mut p, 0.0);
            st.step(&mut p).unwrap();
        }
        assert_eq!(p.entries[0].tensor.data[0], 0.37);
    }

    #[test]
    fn three_step_trace_matches_scalar_oracle() {
        // Independent scalar implementation of the Adam recurrence.
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let grads = [0.3, -0.7, 1.1];
        let mut w = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1f(b1, t));
            let vh = v / (1.0 - b1f(b2, t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        fn b1f(b: f64, t: i32) -> f64 {
            b.powi(t)
        }

        let mut p = one_param(0.5);
        let mut st = AdamState::new(&p);
        for &g in &grads {
            set_grad(&mut p, g);
            st.step(&mut p).unwrap();
        }
        assert!((p.entries[0].tensor.data[0] - w).abs() < 1e-12);
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let mut p = one_param(0.1);
            let mut st = AdamState::new(&p);
            set_grad(&mut p, 0.25);
            st.step(&mut p).unwrap();
            p.entries[0].tensor.data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
