use super::ParamStore;

/// Adam first/second moment estimates for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .entries_mut()
            .iter_mut()
            .zip(grads.entries())
            .zip(self.m.entries_mut())
            .zip(self.v.entries_mut())
        {
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = b1 * m.data[j] + (1.0 - b1) * gj;
                v.data[j] = b2 * v.data[j] + (1.0 - b2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamStore::new();
        p.add("w", vec![2], vec![1.0, -1.0]);
        let mut g = p.zeros_like();
        g.flat_set(0, 3.0);
        g.flat_set(1, -0.5);
        let mut adam = AdamState::new(&p, 0.5, 0.999, 1e-8);
        adam.step(&mut p, &g, 0.1);
        assert!((p.flat_get(0) - 0.9).abs() < 1e-7);
        assert!((p.flat_get(1) + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::new();
        p.add("w", vec![1], vec![5.0]);
        let mut adam = AdamState::new(&p, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let mut g = p.zeros_like();
            g.flat_set(0, 2.0 * (p.flat_get(0) - 1.5));
            adam.step(&mut p, &g, 0.01);
        }
        assert!((p.flat_get(0) - 1.5).abs() < 1e-2);
    }
}
