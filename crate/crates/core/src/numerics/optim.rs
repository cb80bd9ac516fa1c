use crate::error::{Error, Result};
use crate::numerics::nn::ParamStore;
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    /// Adam with weight decay applied directly to the parameters.
    AdamW,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer hyperparameters plus per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Option<Tensor<S>>>,
    second: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment tensors for checkpointing; `None` for never-updated parameters.
    #[allow(clippy::type_complexity)]
    pub fn moments(&self) -> (&[Option<Tensor<S>>], &[Option<Tensor<S>>]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Option<Tensor<S>>>, second: Vec<Option<Tensor<S>>>) {
        self.step = step;
        self.first = first;
        self.second = second;
    }

    /// Applies one update. `grads[i]` belongs to parameter `i` of `params`;
    /// parameters with no gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension {
                op: "optimizer_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.values_mut()[i].shape() {
                    return Err(Error::Dimension {
                        op: "optimizer_step",
                        lhs: params.values_mut()[i].shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(names[i].clone()));
                }
            }
        }
        self.first.resize(params.len(), None);
        self.second.resize(params.len(), None);
        self.step += 1;
        let t = self.step as i32;
        let lr = S::of(self.lr);
        let bc1 = S::of(1.0 - BETA1.powi(t));
        let bc2 = S::of(1.0 - BETA2.powi(t));
        let (b1, b2, eps) = (S::of(BETA1), S::of(BETA2), S::of(EPS));
        let wd = S::of(self.weight_decay);
        for (i, (param, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gv) in param.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * (gv + wd * *w);
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let decoupled = self.kind == OptimizerKind::AdamW;
                    for (((w, &gv), mv), vv) in param
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let gv = if decoupled { gv } else { gv + wd * *w };
                        *mv = b1 * *mv + (S::one() - b1) * gv;
                        *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        if decoupled {
                            *w -= lr * wd * *w;
                        }
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn sgd_unit_lr_subtracts_gradient() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 1.0, 0.0);
        let g = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        opt.step(&mut p, &[Some(g)]).unwrap();
        assert_eq!(p.by_name("w").unwrap().data(), &[0.5, 3.0]);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, 0.0);
        opt.step(&mut p, &[Some(Tensor::zeros(&[2]))]).unwrap();
        assert_eq!(p.by_name("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) ≈ lr·sign(g).
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 1e-3, 0.0);
        let g = Tensor::new(vec![3], vec![2.0, -0.01, 5e3]).unwrap();
        opt.step(&mut p, &[Some(g.clone())]).unwrap();
        for (w, gv) in p.by_name("w").unwrap().data().iter().zip(g.data()) {
            let expected = -1e-3 * gv / (gv.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
        }
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adamw_decouples_decay() {
        let mut p = store(&[1.0]);
        let mut opt = OptimizerState::new(OptimizerKind::AdamW, 0.1, 0.5);
        opt.step(&mut p, &[Some(Tensor::zeros(&[1]))]).unwrap();
        // zero gradient: only the decay term acts
        assert!((p.by_name("w").unwrap().data()[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = store(&[1.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1, 0.0);
        let err = opt
            .step(&mut p, &[Some(Tensor::new(vec![1], vec![f64::NAN]).unwrap())])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
    }
}
