//! Adam with bias correction, plus global-norm gradient clipping across all
//! trainable parameter stores.

use crate::nets::ParamStore;
use ndarray::ArrayD;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First/second-moment state for one parameter store; checkpointed in the
/// per-network binary blobs.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<ArrayD<f32>> = store
            .iter()
            .map(|(_, value)| ArrayD::zeros(value.raw_dim()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update. `grads` point in the descent direction (they are the
    /// gradients of the loss being minimized).
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[ArrayD<f32>], lr: f32) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.t += 1;
        let t = self.t as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for idx in 0..store.len() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            let value = store.value_mut(idx);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                });
        }
    }
}

/// Scales the whole gradient set so its global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<ArrayD<f32>>], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for net in grads.iter() {
        for g in net {
            sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for net in grads.iter_mut() {
            for g in net {
                g.mapv_inplace(|x| x * scale);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize f(p) = 0.5 * |p - target|^2.
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("p", ArrayD::zeros(IxDyn(&[4])));
        let target = ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut adam = AdamState::new(&store);
        for _ in 0..2000 {
            let grad = store.get(crate::nets::ParamId(0)) - &target;
            adam.step(&mut store, &[grad], 1e-2);
        }
        let p = store.get(crate::nets::ParamId(0));
        for (a, b) in p.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn clipping_preserves_direction_and_caps_norm() {
        let g = ArrayD::from_shape_vec(IxDyn(&[3]), vec![3.0, 4.0, 0.0]).unwrap();
        let mut grads = vec![vec![g.clone()], vec![g.clone()]];
        // norm = sqrt(2 * 25) ~ 7.07
        let pre = clip_global_norm(&mut grads, 5.0);
        assert!((pre - 50.0f32.sqrt()).abs() < 1e-5);
        let mut sq = 0.0;
        for net in &grads {
            for g in net {
                sq += g.iter().map(|x| x * x).sum::<f32>();
            }
        }
        assert!((sq.sqrt() - 5.0).abs() < 1e-5);
        // direction preserved
        let r = grads[0][0][[0]] / grads[0][0][[1]];
        assert!((r - 0.75).abs() < 1e-6);

        // below the cap: untouched
        let mut small = vec![vec![ArrayD::from_elem(IxDyn(&[2]), 0.1f32)]];
        let pre = clip_global_norm(&mut small, 5.0);
        assert!(pre < 5.0);
        assert_eq!(small[0][0][[0]], 0.1);
    }
}
