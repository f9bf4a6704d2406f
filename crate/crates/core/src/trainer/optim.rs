//! Gradient-descent optimizers over named parameter sets.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numerics::nn::{ParamKind, ParamSource};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

struct AdamState<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    step: usize,
}

/// Adaptive-moment (or plain) gradient descent keyed by parameter name.
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: HashMap<String, AdamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    /// Apply one update using gradients keyed by visit names. Parameters
    /// without a gradient entry and buffers are untouched.
    pub fn step(&mut self, model: &mut dyn ParamSource<T>, grads: &HashMap<String, Tensor<T>>) {
        let lr = T::from_f64(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                model.visit_mut("", &mut |name, kind, t| {
                    if kind != ParamKind::Trainable {
                        return;
                    }
                    if let Some(g) = grads.get(name) {
                        for (w, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                            *w = *w - lr * gv;
                        }
                    }
                });
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
                let eps = T::from_f64(self.eps);
                let state = &mut self.state;
                model.visit_mut("", &mut |name, kind, t| {
                    if kind != ParamKind::Trainable {
                        return;
                    }
                    let Some(g) = grads.get(name) else { return };
                    let entry = state.entry(name.to_string()).or_insert_with(|| AdamState {
                        m: Tensor::zeros(t.shape()),
                        v: Tensor::zeros(t.shape()),
                        step: 0,
                    });
                    entry.step += 1;
                    let bc1 = T::from_f64(1.0 - self.beta1.powi(entry.step as i32));
                    let bc2 = T::from_f64(1.0 - self.beta2.powi(entry.step as i32));
                    for i in 0..t.len() {
                        let gv = g.data()[i];
                        let m = b1 * entry.m.data()[i] + (T::one() - b1) * gv;
                        let v = b2 * entry.v.data()[i] + (T::one() - b2) * gv * gv;
                        entry.m.data_mut()[i] = m;
                        entry.v.data_mut()[i] = v;
                        let m_hat = m / bc1;
                        let v_hat = v / bc2;
                        let w = t.data()[i];
                        t.data_mut()[i] = w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{RngStream, Tape};

    struct Scalar1 {
        w: Tensor<f64>,
    }

    impl ParamSource<f64> for Scalar1 {
        fn visit(&self, _p: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<f64>)) {
            f("w", ParamKind::Trainable, &self.w);
        }
        fn visit_mut(&mut self, _p: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<f64>)) {
            f("w", ParamKind::Trainable, &mut self.w);
        }
    }

    fn quadratic_descent(kind: OptimizerKind, steps: usize) -> f64 {
        // minimize w^2 from w = 2
        let mut model = Scalar1 {
            w: Tensor::scalar(2.0),
        };
        let mut opt = Optimizer::new(kind, 0.1);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let w = tape.param("w", &model.w);
            let sq = tape.mul(w, w).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward(loss).unwrap();
            let grads: HashMap<String, Tensor<f64>> = tape.param_grads().into_iter().collect();
            opt.step(&mut model, &grads);
        }
        model.w.data()[0].abs()
    }

    #[test]
    fn both_optimizers_shrink_a_quadratic() {
        assert!(quadratic_descent(OptimizerKind::Sgd, 100) < 1e-3);
        assert!(quadratic_descent(OptimizerKind::Adam, 200) < 1e-2);
    }

    #[test]
    fn buffers_are_not_updated() {
        struct WithBuffer {
            w: Tensor<f64>,
            buf: Tensor<f64>,
        }
        impl ParamSource<f64> for WithBuffer {
            fn visit(&self, _p: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<f64>)) {
                f("w", ParamKind::Trainable, &self.w);
                f("buf", ParamKind::Buffer, &self.buf);
            }
            fn visit_mut(&mut self, _p: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<f64>)) {
                f("w", ParamKind::Trainable, &mut self.w);
                f("buf", ParamKind::Buffer, &mut self.buf);
            }
        }
        let mut model = WithBuffer {
            w: Tensor::scalar(1.0),
            buf: Tensor::scalar(5.0),
        };
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        grads.insert("buf".to_string(), Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5);
        opt.step(&mut model, &grads);
        assert_eq!(model.w.data()[0], 0.5);
        assert_eq!(model.buf.data()[0], 5.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut model = Scalar1 {
                w: Tensor::scalar(1.37),
            };
            let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05);
            let mut rng = RngStream::new(4, 4);
            for _ in 0..25 {
                let noise = rng.next_gaussian();
                let mut grads = HashMap::new();
                grads.insert("w".to_string(), Tensor::scalar(2.0 * model.w.data()[0] + 0.01 * noise));
                opt.step(&mut model, &grads);
            }
            model.w.data()[0]
        };
        assert_eq!(run(), run());
    }
}
