use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `grads[i] == None` means the
    /// parameter received no gradient this step and is treated as zero.
    pub fn step(
        &mut self,
        params: &mut [Tensor<f32>],
        grads: &[Option<Tensor<f32>>],
        cfg: &AdamConfig,
    ) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::Contract(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref().map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j] as f64);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = (*w as f64 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![param(&[0.5, -1.0])];
        let mut st = AdamState::new(&params);
        let g = vec![Some(param(&[0.0, 0.0]))];
        for _ in 0..5 {
            st.step(&mut params, &g, &AdamConfig::default()).unwrap();
        }
        assert_eq!(params[0].data(), &[0.5, -1.0]);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut params = vec![param(&[0.0, 0.0])];
        let mut st = AdamState::new(&params);
        let g = vec![Some(param(&[0.3, -2.0]))];
        let mut prev = params[0].data().to_vec();
        for _ in 0..50 {
            st.step(&mut params, &g, &AdamConfig::default()).unwrap();
            let cur = params[0].data().to_vec();
            assert!(cur[0] < prev[0]);
            assert!(cur[1] > prev[1]);
            prev = cur;
        }
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // m̂ = g, v̂ = g², so the first update is lr·g/(|g| + eps) ≈ lr·sign(g).
        for &g in &[1e-3f32, 0.7, -5.0, 123.0] {
            let mut params = vec![param(&[1.0])];
            let mut st = AdamState::new(&params);
            let cfg = AdamConfig::default();
            st.step(&mut params, &[Some(param(&[g]))], &cfg).unwrap();
            let moved = 1.0 - params[0].data()[0] as f64;
            let expected = cfg.lr * g as f64 / (g.abs() as f64 + cfg.eps);
            assert!(
                (moved - expected).abs() < 1e-7,
                "g={g} moved={moved} expected={expected}"
            );
            assert!((moved.abs() - cfg.lr).abs() < 1e-5 * cfg.lr.max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![param(&[0.0, 0.0])];
        let mut st = AdamState::new(&params);
        let g = vec![Some(param(&[1.0]))];
        assert!(st.step(&mut params, &g, &AdamConfig::default()).is_err());
    }
}
