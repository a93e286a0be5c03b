//! Adam with bias correction.

use super::params::Params;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0 }
    }

    /// One update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut Params) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for e in &mut params.entries {
            let m = &mut e.m;
            let v = &mut e.v;
            m.zip_mut_with(&e.grad, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(&e.grad, |vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi
            });
            let value = std::sync::Arc::make_mut(&mut e.value);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &mi, &vi| {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize f(x) = (x - 3)^2 elementwise.
        let mut params = Params::new();
        let p = params.add("x", ArrayD::zeros(ndarray::IxDyn(&[4])));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            params.zero_grads();
            let grad = params.value(p).mapv(|x| 2.0 * (x - 3.0));
            params.entries[p.0].grad.assign(&grad);
            opt.step(&mut params);
        }
        for &x in params.value(p).iter() {
            assert!((x - 3.0).abs() < 1e-3, "did not converge: {x}");
        }
    }
}
