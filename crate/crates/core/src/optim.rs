//! AdamW / Adam / SGD over a parameter registry, and the one-cycle schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamStore, Role, TrainableMask};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    /// Adam with decoupled weight decay on non-prompt parameters.
    AdamW,
    Adam,
    Sgd,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr_net: f64,
    pub lr_prompt: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: HashMap<usize, (Vec<f64>, Vec<f64>, u64)>,
}

/// Prompt-side parameters use the prompt learning rate.
pub fn uses_prompt_lr(role: Role) -> bool {
    matches!(role, Role::PromptToken | Role::PromptBiasEmbed | Role::PromptBiasWeight | Role::SegToken)
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr_net: f64, lr_prompt: f64, weight_decay: f64) -> Self {
        Optimizer { kind, lr_net, lr_prompt, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, moments: HashMap::new() }
    }

    /// Applies one update with learning rates scaled by `lr_scale`. Only
    /// parameters that are trainable and received a gradient move.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Tensor)], mask: &TrainableMask, lr_scale: f64) -> Result<usize> {
        let mut moved = 0;
        for (id, g) in grads {
            if !mask.get(*id) {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{}`", store.entry(*id).name)));
            }
            let role = store.entry(*id).role;
            let lr = lr_scale * if uses_prompt_lr(role) { self.lr_prompt } else { self.lr_net };
            let decay = if self.kind == OptimKind::AdamW && !role.is_prompt() { self.weight_decay } else { 0.0 };
            let value = store.value_mut(*id);
            if value.len() != g.len() {
                return Err(Error::shape(format!("gradient of {} values for a {}-value parameter", g.len(), value.len())));
            }
            match self.kind {
                OptimKind::Sgd => {
                    for (v, d) in value.data_mut().iter_mut().zip(g.data()) {
                        *v -= lr * d;
                    }
                }
                OptimKind::Adam | OptimKind::AdamW => {
                    let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                    let (m, s, t) = self.moments.entry(*id).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()], 0));
                    *t += 1;
                    let c1 = 1.0 - b1.powi(*t as i32);
                    let c2 = 1.0 - b2.powi(*t as i32);
                    for (((v, d), mi), si) in value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(s.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *si = b2 * *si + (1.0 - b2) * d * d;
                        if decay > 0.0 {
                            *v -= lr * decay * *v;
                        }
                        *v -= lr * (*mi / c1) / ((*si / c2).sqrt() + eps);
                    }
                }
            }
            moved += 1;
        }
        Ok(moved)
    }
}

/// One-cycle factor on the peak learning rate: cosine warm-up from 1/25 over
/// the first 30% of `total` steps, then cosine annealing to 1/(25·10⁴).
pub fn one_cycle(step: usize, total: usize) -> f64 {
    const PCT: f64 = 0.3;
    const DIV: f64 = 25.0;
    const FINAL_DIV: f64 = 1e4;
    if total <= 1 {
        return 1.0;
    }
    let up = ((PCT * total as f64) - 1.0).max(1.0);
    let down = (total as f64 - 1.0 - up).max(1.0);
    let s = step as f64;
    let cos = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos());
    let start = 1.0 / DIV;
    let end = start / FINAL_DIV;
    if s <= up {
        cos(start, 1.0, s / up)
    } else {
        cos(1.0, end, (s - up) / down)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Role::Weight, Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        s.insert("p", Role::PromptToken, Tensor::new(&[2], vec![0.5, 0.5]).unwrap()).unwrap();
        s.insert("b", Role::Bias, Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut s = store();
        let mask = TrainableMask::all(&s, true);
        let mut o = Optimizer::new(OptimKind::Adam, 0.1, 0.01, 0.0);
        let g = vec![(0, Tensor::new(&[2], vec![0.3, -4.0]).unwrap()), (1, Tensor::new(&[2], vec![1.0, -1.0]).unwrap())];
        assert_eq!(o.step(&mut s, &g, &mask, 1.0).unwrap(), 2);
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
        let p = s.get("p").unwrap().data();
        assert!((p[0] - 0.49).abs() < 1e-6 && (p[1] - 0.51).abs() < 1e-6);
        assert_eq!(s.get("b").unwrap().data(), &[3.0]);
    }

    #[test]
    fn decoupled_decay_skips_prompts() {
        let mut s = store();
        let mask = TrainableMask::all(&s, true);
        let mut o = Optimizer::new(OptimKind::AdamW, 0.1, 0.1, 0.5);
        let zero = |n| Tensor::zeros(&[n]);
        o.step(&mut s, &[(0, zero(2)), (1, zero(2))], &mask, 1.0).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.95, -1.9]);
        assert_eq!(s.get("p").unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn frozen_and_gradless_parameters_stay() {
        let mut s = store();
        let mut mask = TrainableMask::all(&s, true);
        mask.set("w", false).unwrap();
        let mut o = Optimizer::new(OptimKind::Sgd, 1.0, 1.0, 0.0);
        let g = vec![(0, Tensor::full(&[2], 1.0)), (1, Tensor::full(&[2], 1.0))];
        assert_eq!(o.step(&mut s, &g, &mask, 0.5).unwrap(), 1);
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(s.get("p").unwrap().data(), &[0.0, 0.0]);
        let bad = vec![(1, Tensor::full(&[2], f64::NAN))];
        assert!(matches!(o.step(&mut s, &bad, &mask, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn one_cycle_shape() {
        let n = 100;
        let f: Vec<f64> = (0..n).map(|s| one_cycle(s, n)).collect();
        assert!((f[0] - 0.04).abs() < 1e-12);
        let peak = f.iter().copied().fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-12);
        assert!(f[n - 1] < 1e-5);
        let top = f.iter().position(|&v| v == peak).unwrap();
        assert!((25..=35).contains(&top));
        assert!(f[..=top].windows(2).all(|w| w[1] >= w[0]));
        assert!(f[top..].windows(2).all(|w| w[1] <= w[0]));
    }
}
