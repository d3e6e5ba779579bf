//! Adam with decoupled weight decay.

use ndarray::Array2;

/// AdamW over an indexed set of parameter arrays. Moment buffers are keyed by
/// slot index and allocated on first use.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, slots: usize) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: (0..slots).map(|_| None).collect(),
            v: (0..slots).map(|_| None).collect(),
        }
    }

    /// Advance the shared step counter; call once per optimization step,
    /// before updating the slots of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter array in place.
    pub fn update(&mut self, slot: usize, param: &mut Array2<f64>, grad: &Array2<f64>) {
        assert!(self.step > 0, "begin_step() must run before update()");
        assert_eq!(param.dim(), grad.dim());
        let m = self.m[slot].get_or_insert_with(|| Array2::zeros(param.raw_dim()));
        let v = self.v[slot].get_or_insert_with(|| Array2::zeros(param.raw_dim()));
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (mi, vi)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / bias1;
            let vhat = *vi / bias2;
            // decoupled weight decay
            *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn descends_a_quadratic() {
        // minimize f(x) = (x - 3)^2
        let mut x = array![[0.0]];
        let mut opt = AdamW::new(0.1, 0.0, 1);
        for _ in 0..500 {
            let g = array![[2.0 * (x[(0, 0)] - 3.0)]];
            opt.begin_step();
            opt.update(0, &mut x, &g);
        }
        assert!((x[(0, 0)] - 3.0).abs() < 1e-3, "got {}", x[(0, 0)]);
    }

    #[test]
    fn weight_decay_shrinks_params_without_gradient() {
        let mut x = array![[10.0]];
        let g = array![[0.0]];
        let mut opt = AdamW::new(0.01, 0.1, 1);
        for _ in 0..10 {
            opt.begin_step();
            opt.update(0, &mut x, &g);
        }
        assert!(x[(0, 0)] < 10.0);
    }

    #[test]
    fn deterministic_across_instances() {
        let run = || {
            let mut x = array![[1.0, -2.0], [0.5, 3.0]];
            let mut opt = AdamW::new(0.05, 0.01, 1);
            for i in 0..20 {
                let g = x.mapv(|v| (v + i as f64).sin());
                opt.begin_step();
                opt.update(0, &mut x, &g);
            }
            x
        };
        assert_eq!(run(), run());
    }
}
