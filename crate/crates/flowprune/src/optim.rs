//! Adam optimizer over ragged parameter lists (first/second moments with
//! bias correction, fixed learning rate).

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment accumulators, one pair per parameter array.
pub struct AdaptiveState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdaptiveState {
    pub fn new_like(arrays: &[&Vec<f64>]) -> Self {
        AdaptiveState {
            m: arrays.iter().map(|a| vec![0.0; a.len()]).collect(),
            v: arrays.iter().map(|a| vec![0.0; a.len()]).collect(),
            t: 0,
        }
    }

    /// One Adam update: m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g²,
    /// p −= lr · m̂ / (√v̂ + ε) with bias-corrected moments.
    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[&Vec<f64>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (((p_arr, g_arr), m_arr), v_arr) in params
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((p, &g), m), v) in p_arr
                .iter_mut()
                .zip(g_arr.iter())
                .zip(m_arr.iter_mut())
                .zip(v_arr.iter_mut())
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_moves_against_gradient() {
        let mut p = vec![1.0, -1.0];
        let g = vec![0.5, -0.25];
        let mut state = AdaptiveState::new_like(&[&p]);
        state.step(vec![&mut p], &[&g], 0.1);
        assert!(p[0] < 1.0);
        assert!(p[1] > -1.0);
    }

    #[test]
    fn first_step_is_close_to_signed_lr() {
        // bias correction makes the first update ≈ lr·sign(g)
        let mut p = vec![0.0];
        let g = vec![3.7];
        let mut state = AdaptiveState::new_like(&[&p]);
        state.step(vec![&mut p], &[&g], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut p = vec![5.0];
        let mut state = AdaptiveState::new_like(&[&p]);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0]];
            state.step(vec![&mut p], &[&g], 0.05);
        }
        assert!(p[0].abs() < 1e-3, "{}", p[0]);
    }
}
