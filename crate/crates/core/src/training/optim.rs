//! Adam with bias correction.

use crate::config::TrainConfig;
use crate::error::{shape_err, Result};
use crate::numerics::{Real, Tensor};

/// Optimizer state: step counter and first/second moments per parameter,
/// each shaped like its parameter (flattened).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn new<T: Real>(params: &[Tensor<T>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        TrainState { step: 0, lr, beta1, beta2, eps, m: zeros(), v: zeros() }
    }

    pub fn from_config<T: Real>(params: &[Tensor<T>], cfg: &TrainConfig) -> Self {
        TrainState::new(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// One update from the gradients currently held by `params`. Parameters
    /// without a gradient are left alone.
    pub fn apply<T: Real>(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(shape_err(format!("optimizer holds {} moments for {} parameters", self.m.len(), params.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad() else { continue };
            if g.len() != m.len() {
                return Err(shape_err("moment shape differs from its parameter"));
            }
            let mut data = p.data_mut();
            for i in 0..g.len() {
                let gi = g[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                data[i] = T::lit(data[i].as_f64() - step);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_on_square_matches_hand_update() {
        let theta = Tensor::<f64>::param(&[1], vec![1.5]).unwrap();
        let mut st = TrainState::new(&[theta.clone()], 0.1, 0.5, 0.999, 1e-8);
        theta.square().sum().backward().unwrap();
        st.apply(&[theta.clone()]).unwrap();
        // g = 2θ = 3; m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
        let g: f64 = 3.0;
        let m = 0.5 * g;
        let v = 0.001 * g * g;
        let want = 1.5 - 0.1 * (m / 0.5) / ((v / 0.001).sqrt() + 1e-8);
        assert!((theta.item() - want).abs() < 1e-15, "{} vs {want}", theta.item());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let w = Tensor::<f32>::param(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let mut st = TrainState::new(&[w.clone()], 0.0, 0.5, 0.999, 1e-8);
        w.square().sum().backward().unwrap();
        st.apply(&[w.clone()]).unwrap();
        assert_eq!(w.to_vec(), vec![0.1, -0.2, 0.3]);
    }
}
