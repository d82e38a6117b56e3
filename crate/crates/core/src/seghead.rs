//! Prompt banks and the cosine-similarity segmentation head.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::Aggregation;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::softmax_in_place;
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;

pub const COSINE_EPS: f64 = 1e-8;
pub const PROMPT_INIT_STD: f64 = 0.02;

/// A prompt task: bank 0 is background, bank `m ≥ 1` segments `labels[m - 1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTask {
    pub name: String,
    pub labels: Vec<u8>,
}

impl PromptTask {
    pub fn binary(label: u8) -> Self {
        PromptTask { name: format!("c{label}"), labels: vec![label] }
    }

    pub fn multiclass(name: impl Into<String>, labels: Vec<u8>) -> Self {
        PromptTask { name: name.into(), labels }
    }

    /// Number of classes including background.
    pub fn n_classes(&self) -> usize {
        self.labels.len() + 1
    }
}

/// Width of every prompt slot and of the decoder embedding.
#[derive(Clone, Debug)]
pub struct PromptLayout {
    pub slot_channels: Vec<usize>,
    pub bias_channels: usize,
    pub out_channels: usize,
    pub tokens_per_class: usize,
}

pub fn token_name(task: &str, m: usize, slot: usize) -> String {
    format!("prompt.{task}.{m}.slot{slot}.tokens")
}

pub fn embed_name(task: &str, m: usize, slot: usize) -> String {
    format!("prompt.{task}.{m}.slot{slot}.embed")
}

pub fn seg_name(task: &str, m: usize) -> String {
    format!("prompt.{task}.{m}.seg")
}

pub fn head_names(task: &str) -> (String, String) {
    (format!("head.{task}.weight"), format!("head.{task}.bias"))
}

/// Registers fresh banks for `task` (tokens, bias embeddings, segmentation
/// tokens, all `N(0, 0.02²)`) plus its linear head.
pub fn init_prompts(store: &mut ParamStore, layout: &PromptLayout, task: &PromptTask, rng: &mut impl Rng) -> Result<()> {
    let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
    let t = layout.tokens_per_class;
    let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| normal.sample(rng));
    for m in 0..task.n_classes() {
        for (s, &c) in layout.slot_channels.iter().enumerate() {
            store.insert(token_name(&task.name, m, s), Role::PromptToken, draw(&[t, c]))?;
            store.insert(embed_name(&task.name, m, s), Role::PromptBiasEmbed, draw(&[t, layout.bias_channels]))?;
        }
        store.insert(seg_name(&task.name, m), Role::SegToken, draw(&[t, layout.out_channels]))?;
    }
    let (w, b) = head_names(&task.name);
    let k = layout.out_channels;
    let bound = (1.0 / k as f64).sqrt();
    store.insert(w, Role::FixedHead, Tensor::from_fn(&[task.n_classes(), k], |_| rng.random_range(-bound..bound)))?;
    store.insert(b, Role::FixedHead, Tensor::zeros(&[task.n_classes()]))?;
    Ok(())
}

/// Bank indices (0 = background) of one task used for one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSelection {
    pub task: String,
    pub banks: Vec<usize>,
}

impl PromptSelection {
    pub fn n_classes(&self) -> usize {
        self.banks.len()
    }

    /// Total prompt tokens per slot, `N_p = M·T`.
    pub fn n_tokens(&self, tokens_per_class: usize) -> usize {
        self.banks.len() * tokens_per_class
    }
}

/// Picks the banks for `classes` (dataset labels) of a registered task; the
/// background bank is always first.
pub fn select_prompts(tasks: &[PromptTask], task: &str, classes: Option<&[u8]>) -> Result<PromptSelection> {
    let t = tasks.iter().find(|t| t.name == task).ok_or_else(|| Error::Unknown { kind: "task", name: task.to_string() })?;
    let mut banks = vec![0];
    match classes {
        None => banks.extend(1..t.n_classes()),
        Some(cs) => {
            for c in cs {
                let m = t.labels.iter().position(|l| l == c).ok_or_else(|| Error::Unknown {
                    kind: "class",
                    name: format!("{c} in task {task}"),
                })?;
                banks.push(m + 1);
            }
        }
    }
    Ok(PromptSelection { task: task.to_string(), banks })
}

/// Cosine similarity of every embedding row to every token: `[N, C] × [K, C] -> [N, K]`.
pub fn token_similarity(f: &[f64], tokens: &[f64], c: usize) -> Vec<f64> {
    let mut g = Graph::no_grad();
    let a = g.input(Tensor::new(&[f.len() / c, c], f.to_vec()).expect("rows"));
    let b = g.input(Tensor::new(&[tokens.len() / c, c], tokens.to_vec()).expect("rows"));
    let s = g.cosine_sim(a, b, COSINE_EPS);
    g.value(s).data().to_vec()
}

/// Per-class weights for one `T`-vector of similarities.
pub fn aggregation_weights(sims: &[f64], mode: Aggregation, tau: f64, k: usize) -> Vec<f64> {
    let t = sims.len();
    match mode {
        Aggregation::Weighted => {
            let mut w: Vec<f64> = sims.iter().map(|s| s / tau).collect();
            softmax_in_place(&mut w);
            w
        }
        Aggregation::Mean => vec![1.0 / t as f64; t],
        Aggregation::Topk => {
            let mut idx: Vec<usize> = (0..t).collect();
            // Stable sort: ties keep the lower token index.
            idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(std::cmp::Ordering::Equal));
            let mut w = vec![0.0; t];
            for &i in idx.iter().take(k) {
                w[i] = 1.0 / k as f64;
            }
            w
        }
    }
}

/// Aggregates `[N, M·T]` similarities into `[N, M]` class scores. The
/// aggregation weights are treated as constants in the backward pass.
pub fn aggregate(g: &mut Graph, sims: Var, t: usize, mode: Aggregation, tau: f64, k: usize) -> Result<Var> {
    let v = g.value(sims);
    let mt = v.last_dim();
    if t == 0 || mt % t != 0 {
        return Err(Error::shape(format!("{mt} similarities are not a multiple of T={t}")));
    }
    if mode == Aggregation::Topk && (k == 0 || k > t) {
        return Err(Error::config("topk", format!("k={k} outside 1..={t}")));
    }
    if !(tau > 0.0) {
        return Err(Error::config("tau_agg", "must be positive"));
    }
    let m = mt / t;
    let n = v.rows();
    let mut weights = vec![0.0; n * mt];
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for cl in 0..m {
            let s = &v.data()[r * mt + cl * t..r * mt + (cl + 1) * t];
            let w = aggregation_weights(s, mode, tau, k);
            out[r * m + cl] = w.iter().zip(s).map(|(a, b)| a * b).sum();
            weights[r * mt + cl * t..r * mt + (cl + 1) * t].copy_from_slice(&w);
        }
    }
    let out = Tensor::new(&[n, m], out)?;
    Ok(g.push(out, &[sims], move |args| {
        let gd = args.grad.data();
        let d = Tensor::from_fn(args.inputs[0].shape(), |i| weights[i] * gd[(i / mt) * m + (i % mt) / t]);
        vec![Some(d)]
    }))
}

/// Array form of [`aggregate`].
pub fn aggregate_values(sims: &[f64], t: usize, mode: Aggregation, tau: f64, k: usize) -> Result<Vec<f64>> {
    let mut g = Graph::no_grad();
    let s = g.input(Tensor::new(&[1, sims.len()], sims.to_vec())?);
    let a = aggregate(&mut g, s, t, mode, tau, k)?;
    Ok(g.value(a).data().to_vec())
}

/// Class scores for one sample: `F: [N, C]`, `P_seg: [M·T, C]` -> `[N, M]`.
pub fn similarity_scores(g: &mut Graph, f_rows: Var, seg_tokens: Var, t: usize, mode: Aggregation, tau: f64, k: usize) -> Result<Var> {
    let s = g.cosine_sim(f_rows, seg_tokens, COSINE_EPS);
    aggregate(g, s, t, mode, tau, k)
}

/// Index helper for gathering one sample's rows out of `[B, N, C]`.
pub fn sample_rows(b: usize, n: usize) -> Rc<Vec<usize>> {
    Rc::new((b * n..(b + 1) * n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, probe, random_tensor, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_cases() {
        let s = token_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, -2.0, 1.0, 0.0], 3);
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!(s[1].abs() < 1e-15);
        let a = token_similarity(&[0.3, -1.0, 2.0], &[1.0, 0.5, 0.2], 3);
        let b = token_similarity(&[1.5, -5.0, 10.0], &[1.0, 0.5, 0.2], 3);
        assert!((a[0] - b[0]).abs() < 1e-15);
        let z = token_similarity(&[0.0, 0.0, 0.0], &[1.0, 0.5, 0.2], 3);
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn aggregation_cases() {
        assert_eq!(aggregate_values(&[0.37, -0.2], 1, Aggregation::Weighted, 0.1, 1).unwrap(), vec![0.37, -0.2]);
        let eq = aggregate_values(&[0.4; 4], 4, Aggregation::Weighted, 0.1, 1).unwrap();
        assert!((eq[0] - 0.4).abs() < 1e-15);
        assert_eq!(eq, aggregate_values(&[0.4; 4], 4, Aggregation::Mean, 0.1, 1).unwrap());
        let s = aggregate_values(&[1.0, 0.0], 2, Aggregation::Weighted, 0.1, 1).unwrap()[0];
        let e10 = 10f64.exp();
        assert!((s - e10 / (e10 + 1.0)).abs() < 1e-12);
        assert!((s - 0.99995).abs() < 1e-5);
        let sims = [0.1, 0.7, -0.3, 0.5, 0.2, 0.9];
        let mean = aggregate_values(&sims, 3, Aggregation::Mean, 0.1, 3).unwrap();
        assert_eq!(aggregate_values(&sims, 3, Aggregation::Topk, 0.1, 3).unwrap(), mean);
        assert_eq!(aggregate_values(&sims, 3, Aggregation::Topk, 0.1, 1).unwrap(), vec![0.7, 0.9]);
        assert!(aggregate_values(&sims, 3, Aggregation::Topk, 0.1, 4).is_err());
        assert!(aggregate_values(&sims, 4, Aggregation::Mean, 0.1, 1).is_err());
    }

    #[test]
    fn aggregate_bounds_and_class_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sims = random_tensor(&[5, 12], 1.0, &mut rng);
        let out = aggregate_values(sims.data(), 4, Aggregation::Weighted, 0.1, 1).unwrap();
        for r in 0..5 {
            for m in 0..3 {
                let s = &sims.data()[r * 12 + m * 4..r * 12 + m * 4 + 4];
                let v = out[r * 3 + m];
                assert!(v >= s.iter().copied().fold(f64::MAX, f64::min) - 1e-15);
                assert!(v <= s.iter().copied().fold(f64::MIN, f64::max) + 1e-15);
            }
        }
        // Swapping class banks 0 and 2 swaps the class axis.
        let perm = Tensor::from_fn(&[5, 12], |i| {
            let (r, j) = (i / 12, i % 12);
            let m = [2, 1, 0][j / 4];
            sims.data()[r * 12 + m * 4 + j % 4]
        });
        let pout = aggregate_values(perm.data(), 4, Aggregation::Weighted, 0.1, 1).unwrap();
        for r in 0..5 {
            assert_eq!(pout[r * 3], out[r * 3 + 2]);
            assert_eq!(pout[r * 3 + 2], out[r * 3]);
        }
    }

    /// Central differences of `probe(aggregate(x))` with the weights either
    /// frozen at `sims` or recomputed at every perturbed point.
    fn numeric_grad(sims: &Tensor, frozen: bool) -> Vec<f64> {
        let base: Vec<f64> = sims.data().chunks(3).flat_map(|c| aggregation_weights(c, Aggregation::Weighted, 0.1, 1)).collect();
        let eval = |x: &Tensor| {
            let w: Vec<f64> = if frozen {
                base.clone()
            } else {
                x.data().chunks(3).flat_map(|c| aggregation_weights(c, Aggregation::Weighted, 0.1, 1)).collect()
            };
            let val: Vec<f64> = (0..8).map(|q| (0..3).map(|j| w[q * 3 + j] * x.data()[q * 3 + j]).sum()).collect();
            let mut g = Graph::no_grad();
            let y = g.input(Tensor::new(&[4, 2], val).unwrap());
            let p = probe(&mut g, y, 3);
            g.value(p).item()
        };
        (0..sims.len())
            .map(|i| {
                let h = 1e-5;
                let (mut xp, mut xm) = (sims.clone(), sims.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                (eval(&xp) - eval(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn aggregate_gradient_uses_fixed_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sims = random_tensor(&[4, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let s = g.param(sims.clone());
        let a = aggregate(&mut g, s, 3, Aggregation::Weighted, 0.1, 1).unwrap();
        let y = probe(&mut g, a, 3);
        g.backward(y);
        let analytic = g.grad(s).unwrap().data().to_vec();
        let rel = |num: &[f64]| {
            num.iter().zip(&analytic).map(|(n, a)| (n - a).abs() / n.abs().max(a.abs()).max(1e-5)).fold(0.0, f64::max)
        };
        assert!(rel(&numeric_grad(&sims, true)) < 1e-6);
        // Differentiating through the softmax gives a different gradient.
        assert!(rel(&numeric_grad(&sims, false)) > 1e-2);
    }

    #[test]
    fn similarity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_tensor(&[6, 4], 1.0, &mut rng);
        let p = random_tensor(&[6, 4], 1.0, &mut rng);
        let r = finite_diff_check(&[f, p], &[true, true], |g, v| {
            let s = g.cosine_sim(v[0], v[1], COSINE_EPS);
            probe(g, s, 1)
        }, GradCheckOptions::default());
        assert!(r.max_rel_err < 1e-6);
    }

    #[test]
    fn prompt_init_and_selection() {
        let layout = PromptLayout { slot_channels: vec![8, 16], bias_channels: 4, out_channels: 8, tokens_per_class: 3 };
        let build = |seed| {
            let mut st = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            init_prompts(&mut st, &layout, &PromptTask::binary(3), &mut rng).unwrap();
            st
        };
        let (a, b, c) = (build(1), build(1), build(2));
        assert_eq!(a.checksum(|_| true), b.checksum(|_| true));
        assert_ne!(a.checksum(|_| true), c.checksum(|_| true));
        assert_eq!(a.get(&token_name("c3", 1, 1)).unwrap().shape(), &[3, 16]);
        assert_eq!(a.count(|e| e.role == Role::FixedHead), 8 * 2 + 2);

        let tasks = vec![PromptTask::binary(3), PromptTask::multiclass("abd", vec![1, 2, 4, 5])];
        let s = select_prompts(&tasks, "c3", None).unwrap();
        assert_eq!(s.n_classes(), 2);
        assert_eq!(select_prompts(&tasks, "abd", None).unwrap().n_classes(), 5);
        let sub = select_prompts(&tasks, "abd", Some(&[5, 2])).unwrap();
        assert_eq!(sub.banks, vec![0, 4, 2]);
        assert_eq!(sub.n_tokens(4), 12);
        assert!(select_prompts(&tasks, "nope", None).is_err());
        assert!(select_prompts(&tasks, "abd", Some(&[9])).is_err());
    }

    #[test]
    fn prompt_init_std() {
        let layout = PromptLayout { slot_channels: vec![100], bias_channels: 1, out_channels: 1, tokens_per_class: 50 };
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init_prompts(&mut st, &layout, &PromptTask::binary(1), &mut rng).unwrap();
        let v = st.get(&token_name("c1", 0, 0)).unwrap().data().to_vec();
        assert_eq!(v.len(), 5000);
        let v: Vec<f64> = v.into_iter().chain(st.get(&token_name("c1", 1, 0)).unwrap().data().iter().copied()).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        assert!((0.015..=0.025).contains(&sd), "{sd}");
    }
}
