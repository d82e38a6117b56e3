//! Class-weighted focal loss and the inverse-frequency class weights.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

pub const ALPHA_MIN: f64 = 0.1;
pub const ALPHA_MAX: f64 = 10.0;
pub const LOG_GUARD: f64 = 1e-12;

/// Per-class weights `α`, mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(m: usize) -> Self {
        ClassWeights(vec![1.0; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mean per-image frequency of each label in `classes`.
pub fn class_frequencies(masks: &[&[u8]], classes: &[u8]) -> Vec<f64> {
    let mut freq = vec![0.0; classes.len()];
    for mask in masks {
        let n = mask.len().max(1) as f64;
        for (f, &c) in freq.iter_mut().zip(classes) {
            *f += mask.iter().filter(|&&v| v == c).count() as f64 / n;
        }
    }
    let k = masks.len().max(1) as f64;
    freq.iter().map(|f| f / k).collect()
}

/// `α_m ∝ 1 / freq_m`, clipped to `[0.1, 10]`, then rescaled to mean 1.
pub fn class_weights(masks: &[&[u8]], classes: &[u8]) -> Result<ClassWeights> {
    if classes.is_empty() {
        return Err(Error::Invalid("class_weights: empty class list".into()));
    }
    let freq = class_frequencies(masks, classes);
    if let Some(m) = freq.iter().position(|&f| f == 0.0) {
        return Err(Error::Invalid(format!("class {} does not occur in any training mask", classes[m])));
    }
    let raw: Vec<f64> = freq.iter().map(|f| (1.0 / f).clamp(ALPHA_MIN, ALPHA_MAX)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(ClassWeights(raw.iter().map(|a| a / mean).collect()))
}

/// Focal loss of class scores `[N, M]` (softmaxed over `M` here) against
/// per-pixel class indices, averaged over pixels.
pub fn focal_loss(g: &mut Graph, scores: Var, target: &[u8], alpha: &ClassWeights, gamma: f64) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    let [n, m] = <[usize; 2]>::try_from(shape.as_slice()).map_err(|_| Error::shape(format!("focal scores of shape {shape:?}")))?;
    if target.len() != n {
        return Err(Error::shape(format!("{} targets for {n} pixels", target.len())));
    }
    if alpha.len() != m {
        return Err(Error::shape(format!("{} class weights for {m} classes", alpha.len())));
    }
    if let Some(&t) = target.iter().find(|&&t| t as usize >= m) {
        return Err(Error::shape(format!("target class {t} outside 0..{m}")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Invalid(format!("focal gamma {gamma} is negative")));
    }
    let logp = g.log_softmax(scores);
    let idx: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    let a: Vec<f64> = idx.iter().map(|&t| alpha.0[t]).collect();
    let picked = g.pick(logp, Rc::new(idx));
    let terms = g.focal_term(picked, Rc::new(a), gamma);
    Ok(g.mean(terms))
}

/// Focal loss on probabilities `ŷ: [N, M]` directly; logs are guarded.
pub fn focal_loss_probs(probs: &[f64], m: usize, target: &[u8], alpha: &[f64], gamma: f64) -> f64 {
    let n = target.len();
    let total: f64 = target
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let p = probs[i * m + t as usize];
            -alpha[t as usize] * (1.0 - p).max(0.0).powf(gamma) * p.max(LOG_GUARD).ln()
        })
        .sum();
    total / n.max(1) as f64
}
