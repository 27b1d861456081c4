//! Decoupled-weight-decay adaptive-moment optimizer with a cosine schedule,
//! implemented from the published update rule: first/second moment EMAs with
//! bias correction, then `p -= lr * m_hat / (sqrt(v_hat) + eps)` and a
//! separate `p -= lr * wd * p` decay step applied to weight matrices only.

use std::collections::HashMap;

use yolos_core::tensor::Tensor;

pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: usize,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Cosine decay from the base rate to zero over `total` steps.
    pub fn cosine_lr(&self, step: usize, total: usize) -> f64 {
        let t = step as f64 / total.max(1) as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Applies one update. `params` and `grads` must align by name; names in
    /// `frozen` are skipped entirely (their moments never advance).
    pub fn update(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[(String, Tensor)],
        lr: f64,
        frozen: &[&str],
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((name, param), (gname, grad)) in params.iter_mut().zip(grads) {
            debug_assert_eq!(name, gname, "optimizer state order mismatch");
            if frozen.contains(&name.as_str()) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; param.numel()], vec![0.0; param.numel()]));
            let decay = if name.ends_with(".weight") { self.weight_decay } else { 0.0 };
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.epsilon) + decay * data[i]);
            }
        }
    }
}
