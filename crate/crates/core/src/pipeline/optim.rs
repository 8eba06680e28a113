use crate::numerics::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

/// Linear warmup then linear decay to zero, evaluated at the 0-based
/// optimizer step. Returns a factor in `[0, 1]`.
pub fn linear_schedule(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return step as f64 / warmup.max(1) as f64;
    }
    let rest = total.saturating_sub(warmup).max(1);
    (total.saturating_sub(step) as f64 / rest as f64).max(0.0)
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = T::lit(max_norm / (norm + 1e-6));
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= c);
    }
    norm
}

/// Adam with bias correction and per-group learning rates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update with `grads` in store order.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: impl Fn(ParamGroup) -> f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let eps = T::lit(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let rate = T::lit(lr(store.group(id)));
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            let w = store.get_mut(id).values_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= rate * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DiffTensor;

    #[test]
    fn schedule_shape() {
        assert_eq!(linear_schedule(0, 100, 6), 0.0);
        assert_eq!(linear_schedule(3, 100, 6), 0.5);
        assert_eq!(linear_schedule(6, 100, 6), 1.0);
        assert_eq!(linear_schedule(53, 100, 6), 0.5);
        assert_eq!(linear_schedule(100, 100, 6), 0.0);
        assert_eq!(linear_schedule(0, 10, 0), 1.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        let n = (g[0][0] * g[0][0] + g[1][0] * g[1][0]).sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let mut small = vec![vec![0.3f64]];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0][0], 0.3);
    }

    #[test]
    fn adam_first_step_moves_by_lr_and_respects_groups() {
        let mut store = ParamStore::<f64>::new();
        store.add("enc", ParamGroup::Encoder, DiffTensor::param(vec![1], vec![1.0]).unwrap());
        store.add("add", ParamGroup::Added, DiffTensor::param(vec![1], vec![1.0]).unwrap());
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[vec![2.0], vec![-0.5]], |g| match g {
            ParamGroup::Encoder => 0.1,
            ParamGroup::Added => 0.3,
        });
        let vals: Vec<f64> = store.iter().map(|(_, _, t)| t.values()[0]).collect();
        assert!((vals[0] - 0.9).abs() < 1e-6);
        assert!((vals[1] - 1.3).abs() < 1e-6);
    }
}
