use crate::numerics::AttentionParams;

/// Adam with bias correction, applied as gradient *ascent*.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub first_moment: AttentionParams,
    pub second_moment: AttentionParams,
}

impl Adam {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            first_moment: AttentionParams::zeros(dim),
            second_moment: AttentionParams::zeros(dim),
        }
    }

    /// `θ += lr · m̂ / (√v̂ + ε)`.
    pub fn ascend(&mut self, params: &mut AttentionParams, grad: &AttentionParams) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let params = params.matrices_mut();
        let m = self.first_moment.matrices_mut();
        let v = self.second_moment.matrices_mut();
        for (((p, g), m), v) in params.into_iter().zip(grad.matrices()).zip(m).zip(v) {
            let iter = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((p, &g), (m, v)) in iter {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p += lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}
