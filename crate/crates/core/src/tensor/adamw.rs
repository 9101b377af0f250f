use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers, one pair per parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// AdamW with decoupled weight decay:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
/// ```
///
/// Moment updates accumulate in f64 and are stored back in `T`.
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    params: Vec<Tensor<T>>,
    state: AdamWState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: Vec<Tensor<T>>, config: AdamWConfig) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self {
            config,
            params,
            state: AdamWState { step: 0, m, v },
        }
    }

    pub fn state(&self) -> &AdamWState<T> {
        &self.state
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// Replaces the moment buffers, e.g. when resuming from a checkpoint.
    pub fn load_state(&mut self, state: AdamWState<T>) -> Result<()> {
        let ok = state.m.len() == self.params.len()
            && state.v.len() == self.params.len()
            && self
                .params
                .iter()
                .zip(state.m.iter().zip(&state.v))
                .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel());
        if !ok {
            return Err(TensorError::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.state = state;
        Ok(())
    }

    /// One update over all parameters. Every parameter must carry a gradient.
    pub fn step(&mut self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|p| !p.has_grad()) {
            return Err(TensorError::MissingGrad(i));
        }
        self.state.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            let g = p.grad_snapshot().expect("checked above");
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let mut data = p.data_mut();
            for j in 0..data.len() {
                let gj = g[j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let pj = data[j].as_f64();
                data[j] = T::from_f64(pj - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * pj);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(p0: f64, cfg: AdamWConfig) -> (Tensor<f64>, AdamW<f64>) {
        let p = Tensor::parameter(&[1], vec![p0]).unwrap();
        let opt = AdamW::new(vec![p.clone()], cfg);
        (p, opt)
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        for g in [0.5, -2.0, 1e-3] {
            let (p, mut opt) = single(1.0, cfg);
            // loss = g * p
            p.scale(g).sum().backward().unwrap();
            opt.step().unwrap();
            let expected = 1.0 - 0.1 * g / (g.abs() + 1e-8);
            assert_relative_eq!(p.item(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn decay_only_step() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let (p, mut opt) = single(2.0, cfg);
        // zero gradient: loss = 0 * p
        p.scale(0.0).sum().backward().unwrap();
        opt.step().unwrap();
        assert_relative_eq!(p.item(), 2.0 * (1.0 - 0.1 * 0.5), epsilon = 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let (_p, mut opt) = single(1.0, AdamWConfig::default());
        assert!(matches!(opt.step(), Err(TensorError::MissingGrad(0))));
    }

    #[test]
    fn quadratic_descends_after_warmup() {
        // Scalar reference simulation of the same update rule.
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let (p, mut opt) = single(1.0, cfg);
        let (mut rp, mut rm, mut rv) = (1.0f64, 0.0f64, 0.0f64);
        let mut history = Vec::new();
        for t in 1..=100 {
            p.mul(&p).unwrap().sum().backward().unwrap();
            opt.step().unwrap();
            opt.zero_grad();
            let g = 2.0 * rp;
            rm = 0.9 * rm + 0.1 * g;
            rv = 0.999 * rv + 0.001 * g * g;
            let mh = rm / (1.0 - 0.9f64.powi(t));
            let vh = rv / (1.0 - 0.999f64.powi(t));
            rp -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert_relative_eq!(p.item(), rp, epsilon = 1e-12);
            history.push(p.item().abs());
        }
        // |p| falls monotonically until the first overshoot, then oscillates
        // with strictly shrinking peaks.
        assert!(history[..10].windows(2).all(|w| w[1] < w[0]));
        let peaks: Vec<f64> = history
            .windows(3)
            .filter(|w| w[1] > w[0] && w[1] > w[2])
            .map(|w| w[1])
            .collect();
        assert!(peaks.len() >= 4);
        assert!(peaks.windows(2).all(|w| w[1] < w[0]), "{peaks:?}");
    }
}
