//! Adam optimizer with bias correction.

use super::Layer;

pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update using the gradients currently accumulated in the
    /// model. Moment buffers are allocated on the first call; the model's
    /// parameter visit order must not change between calls.
    pub fn step(&mut self, model: &mut dyn Layer) {
        self.step_count += 1;
        let t = self.step_count as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let first = self.m.is_empty();
        let (m, v) = (&mut self.m, &mut self.v);
        let mut slot = 0usize;
        let (beta1, beta2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        model.visit_params(&mut |param, grad| {
            if first {
                m.push(vec![0.0; param.len()]);
                v.push(vec![0.0; param.len()]);
            }
            let ms = &mut m[slot];
            let vs = &mut v[slot];
            assert_eq!(ms.len(), param.len(), "parameter layout changed mid-training");
            for i in 0..param.len() {
                let g = grad[i];
                ms[i] = beta1 * ms[i] + (1.0 - beta1) * g;
                vs[i] = beta2 * vs[i] + (1.0 - beta2) * g * g;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                param[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            slot += 1;
        });
    }
}
