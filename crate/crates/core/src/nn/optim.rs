use super::{MlpGrads, MlpParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub const ADAM_DEFAULT: UpdateRule = UpdateRule::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// First-order optimizer state for one network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    rule: UpdateRule,
    lr: f64,
    step: u64,
    first: MlpGrads,
    second: MlpGrads,
}

impl OptimizerState {
    pub fn new(params: &MlpParams, rule: UpdateRule, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
        }
        Ok(Self {
            rule,
            lr,
            step: 0,
            first: MlpGrads::zeros_like(params),
            second: MlpGrads::zeros_like(params),
        })
    }

    pub fn sgd(params: &MlpParams, lr: f64) -> Result<Self> {
        Self::new(params, UpdateRule::Sgd, lr)
    }

    /// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn adam(params: &MlpParams, lr: f64) -> Result<Self> {
        Self::new(params, UpdateRule::ADAM_DEFAULT, lr)
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Fails without touching `params` when a
    /// gradient is non-finite or shaped differently from the parameters.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::Dimension(format!(
                "gradient has {} layers, network has {}",
                grads.layers.len(),
                params.layers.len()
            )));
        }
        for (k, (g, l)) in grads.layers.iter().zip(&params.layers).enumerate() {
            if g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len() {
                return Err(Error::Shape {
                    layer: k,
                    expected: l.weights.len() + l.bias.len(),
                    got: g.weights.len() + g.bias.len(),
                });
            }
        }
        if let Some(layer) = grads.first_non_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient in layer {layer}"
            )));
        }
        self.step += 1;
        match self.rule {
            UpdateRule::Sgd => {
                for (l, g) in params.layers.iter_mut().zip(&grads.layers) {
                    for (p, d) in l.weights.iter_mut().zip(&g.weights) {
                        *p -= self.lr * d;
                    }
                    for (p, d) in l.bias.iter_mut().zip(&g.bias) {
                        *p -= self.lr * d;
                    }
                }
            }
            UpdateRule::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let lr = self.lr;
                let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                };
                for (((l, g), m), v) in params
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(&mut self.first.layers)
                    .zip(&mut self.second.layers)
                {
                    for (((p, &d), mi), vi) in l
                        .weights
                        .iter_mut()
                        .zip(&g.weights)
                        .zip(&mut m.weights)
                        .zip(&mut v.weights)
                    {
                        update(p, d, mi, vi);
                    }
                    for (((p, &d), mi), vi) in l
                        .bias
                        .iter_mut()
                        .zip(&g.bias)
                        .zip(&mut m.bias)
                        .zip(&mut v.bias)
                    {
                        update(p, d, mi, vi);
                    }
                }
            }
        }
        Ok(())
    }
}
