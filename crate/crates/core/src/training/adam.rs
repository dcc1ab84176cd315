use crate::models::ParamStore;
use crate::real::Real;

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with gradients `grads` (one vector per parameter).
    pub fn update<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(i).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let upd = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                p[k] = T::from_f64_lossy(p[k].to_f64_lossy() - upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.update(&mut store, &[vec![2.0, -0.5, 0.0]], 0.1);
        let w = store.get(0).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(0).data().iter().map(|w| 2.0 * (w - 0.5)).collect();
            adam.update(&mut store, &[g], 0.01);
        }
        for w in store.get(0).data() {
            assert!((w - 0.5).abs() < 1e-3);
        }
    }
}
