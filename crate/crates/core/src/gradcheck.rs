//! Central finite-difference oracle for graph-recorded functions.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Step is `rel_step · max(1, |x|)`.
    pub rel_step: f64,
    pub max_coords: usize,
    /// Denominator floor of the relative error; derivatives that vanish
    /// analytically are compared in absolute terms below it.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { rel_step: 1e-5, max_coords: 1000, floor: 1e-5, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Input index and flat offset of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
}

/// Compares the tape gradient of a scalar function against central
/// differences. `f` builds the function from leaf vars in the order of
/// `inputs`; only inputs with `wrt[i]` are perturbed and differentiated.
pub fn finite_diff_check<F>(inputs: &[Tensor], wrt: &[bool], f: F, opts: GradCheckOptions) -> GradReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    assert_eq!(inputs.len(), wrt.len());
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().zip(wrt).map(|(t, &w)| g.leaf(t.clone(), w)).collect();
    let out = f(&mut g, &vars);
    assert_eq!(g.value(out).len(), 1, "gradient check needs a scalar output");
    g.backward(out);
    let analytic: Vec<Tensor> =
        vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    check_against(inputs, wrt, &analytic, f, opts)
}

/// Compares given gradients `analytic` (one per input) against central
/// differences of `f`.
pub fn check_against<F>(inputs: &[Tensor], wrt: &[bool], analytic: &[Tensor], f: F, opts: GradCheckOptions) -> GradReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    assert_eq!(inputs.len(), analytic.len());
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let coords: Vec<(usize, usize)> =
        (0..inputs.len()).filter(|&i| wrt[i]).flat_map(|i| (0..inputs[i].len()).map(move |j| (i, j))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picked: Vec<(usize, usize)> = if coords.len() > opts.max_coords {
        sample(&mut rng, coords.len(), opts.max_coords).into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };

    let mut xs = inputs.to_vec();
    let mut report = GradReport { coords: picked.len(), max_rel_err: 0.0, max_abs_err: 0.0, worst: None, worst_values: (0.0, 0.0) };
    for (i, j) in picked {
        let x0 = xs[i].data()[j];
        let h = opts.rel_step * x0.abs().max(1.0);
        let (xp, xm) = (x0 + h, x0 - h);
        xs[i].data_mut()[j] = xp;
        let fp = eval(&xs);
        xs[i].data_mut()[j] = xm;
        let fm = eval(&xs);
        xs[i].data_mut()[j] = x0;
        // Divide by the representable step, not the nominal one.
        let numeric = (fp - fm) / (xp - xm);
        let a = analytic[i].data()[j];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel.max(report.max_rel_err);
            report.worst = Some((i, j));
            report.worst_values = (a, numeric);
        }
    }
    report
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl rand::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..=scale))
}

/// Sums `x` against fixed random weights so every output element matters.
pub fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let c = random_tensor(g.shape(x), 1.0, &mut rng);
    g.dot_const(x, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[3, 4], |i| 1.0 + 0.1 * i as f64);
        let w = random_tensor(&[2, 4], 1.0, &mut rng);
        let r = finite_diff_check(&[x, w], &[true, true], |g, v| {
            let y = g.linear(v[0], v[1], None);
            g.sum(y)
        }, GradCheckOptions::default());
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.coords, 20);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let r = finite_diff_check(&[x], &[true], |g, v| {
            // Value is x², backward claims 3x.
            let vx = g.value(v[0]).clone();
            let out = Tensor::scalar(vx.data().iter().map(|a| a * a).sum());
            g.push(out, &[v[0]], |args| {
                vec![Some(Tensor::from_fn(args.inputs[0].shape(), |i| 3.0 * args.inputs[0].data()[i]))]
            })
        }, GradCheckOptions::default());
        assert!(r.max_rel_err > 0.1);
    }

    #[test]
    fn coordinate_budget_is_respected() {
        let x = Tensor::full(&[40, 40], 0.5);
        let opts = GradCheckOptions { max_coords: 50, ..Default::default() };
        let r = finite_diff_check(&[x], &[true], |g, v| g.sum(v[0]), opts);
        assert_eq!(r.coords, 50);
        assert!(r.max_rel_err < 1e-6);
    }
}
