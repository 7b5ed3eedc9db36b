use crate::{Float, ParamSet, Tensor};

/// Hyperparameters for SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffers for one [`ParamSet`].
///
/// Update rule: `buf <- mu * buf + (g + wd * p)`, `p <- p - lr * buf`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    buffers: Vec<Tensor<T>>,
}

impl<T: Float> SgdState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            buffers: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_buffers(buffers: Vec<Tensor<T>>) -> Self {
        Self { buffers }
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    /// Applies one step. Parameters whose gradient is `None` are left untouched,
    /// including their momentum buffer.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64, cfg: &SgdConfig) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        assert_eq!(self.buffers.len(), params.len(), "optimizer state does not match parameters");
        let (lr, mu, wd) = (T::of(lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
        for ((p, buf), g) in params.tensors_mut().iter_mut().zip(&mut self.buffers).zip(grads) {
            let Some(g) = g else { continue };
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let pd = p.data_mut();
            for ((w, b), &gv) in pd.iter_mut().zip(buf.data_mut()).zip(g.data()) {
                *b = mu * *b + gv + wd * *w;
                *w -= lr * *b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_computed_two_steps() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(&[1], vec![1.0f64]));
        let mut st = SgdState::new(&ps);
        let cfg = SgdConfig { momentum: 0.9, weight_decay: 0.1 };
        let g = vec![Some(Tensor::new(&[1], vec![0.5]))];
        st.step(&mut ps, &g, 0.1, &cfg);
        // buf = 0.5 + 0.1 = 0.6; w = 1 - 0.06
        assert!((ps.tensors()[0].item() - 0.94).abs() < 1e-12);
        st.step(&mut ps, &g, 0.1, &cfg);
        // buf = 0.54 + 0.5 + 0.094 = 1.134; w = 0.94 - 0.1134
        assert!((ps.tensors()[0].item() - 0.8266).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_leaves_parameter_alone() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(&[2], vec![1.0f32, 2.0]));
        let before = ps.clone();
        let mut st = SgdState::new(&ps);
        st.step(&mut ps, &[None], 0.5, &SgdConfig::default());
        assert_eq!(ps, before);
    }
}
