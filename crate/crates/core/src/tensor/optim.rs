use super::{Result, Tensor, TensorError};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Adam over a flat parameter vector.
///
/// Only the `active` positions carry moment buffers and are ever written;
/// every other parameter is left bit-for-bit untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f32,
    step: i32,
    active: Vec<usize>,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    /// Optimizer updating every one of `len` parameters.
    pub fn dense(len: usize, lr: f32) -> Self {
        Self::masked((0..len).collect(), lr)
    }

    /// Optimizer restricted to the given parameter positions.
    pub fn masked(active: Vec<usize>, lr: f32) -> Self {
        let n = active.len();
        Self {
            lr,
            step: 0,
            active,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn moment_len(&self) -> usize {
        self.m.len()
    }

    /// One update of `params` against `grads` (both in flat order).
    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (slot, &i) in self.active.iter().enumerate() {
            let g = grads[i];
            let m = ADAM_BETA1 * self.m[slot] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.v[slot] + (1.0 - ADAM_BETA2) * g * g;
            self.m[slot] = m;
            self.v[slot] = v;
            let update = self.lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            params[i] -= update;
        }
        Ok(())
    }

    /// Update a list of tensors from their own gradient buffers. The tensors
    /// are treated as one flat vector in list order.
    pub fn step_tensors(&mut self, params: &mut [Tensor]) -> Result<()> {
        let mut flat = Vec::new();
        let mut grads = Vec::new();
        for (i, p) in params.iter().enumerate() {
            let g = p.grad().ok_or(TensorError::MissingGrad(i))?;
            flat.extend_from_slice(p.data());
            grads.extend_from_slice(g);
        }
        self.step(&mut flat, &grads)?;
        let mut offset = 0;
        for p in params.iter_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(0.5).requires_grad(true);
        p.set_grad(vec![1.0]).unwrap();
        let mut adam = Adam::dense(1, 0.001);
        let mut params = [p];
        adam.step_tensors(&mut params).unwrap();
        let delta = 0.5 - params[0].data()[0];
        assert!((delta - 0.001).abs() < 1e-6, "delta {delta}");
        assert_eq!(params[0].grad().unwrap(), &[1.0]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![1.0f32, -2.0, 3.5];
        let mut adam = Adam::dense(3, 0.1);
        for _ in 0..5 {
            adam.step(&mut params, &[0.0; 3]).unwrap();
        }
        assert_eq!(params, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn converges_towards_quadratic_minimum() {
        // Independent scalar Adam in f64 for the same recurrence.
        let (mut w64, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut w = [0.0f32];
        let mut adam = Adam::dense(1, 0.1);
        for t in 1..=10 {
            let g = 2.0 * (w[0] - 3.0);
            adam.step(&mut w, &[g]).unwrap();
            let g64 = 2.0 * (w64 - 3.0);
            m = 0.9 * m + 0.1 * g64;
            v = 0.999 * v + 0.001 * g64 * g64;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w64 -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((w[0] as f64 - 3.0).abs() < 3.0);
        assert!((w[0] as f64 - w64).abs() < 1e-4);
    }

    #[test]
    fn masked_positions_are_untouched() {
        let mut params = vec![1.0f32, 2.0, 3.0, 4.0];
        let mut adam = Adam::masked(vec![1, 3], 0.01);
        adam.step(&mut params, &[5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(adam.moment_len(), 2);
        assert_eq!(params[0].to_bits(), 1.0f32.to_bits());
        assert_eq!(params[2].to_bits(), 3.0f32.to_bits());
        assert!(params[1] < 2.0 && params[3] < 4.0);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut adam = Adam::dense(1, 0.1);
        let mut params = [Tensor::scalar(1.0)];
        assert_eq!(adam.step_tensors(&mut params), Err(TensorError::MissingGrad(0)));
    }
}
