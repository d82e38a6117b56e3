//! Prompt-able shifted-window block: W-PMA, linear, SW-PMA, linear, each a
//! residual sublayer behind an instance norm.

use std::rc::Rc;

use rand::Rng;

use crate::attention::{pma_layer, register_pma, PmaShape, PromptInput};
use crate::bind::Ctx;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;
use crate::windowing::{effective_window, invert_permutation, window_order};

pub const NORM_EPS: f64 = 1e-5;

pub fn register_linear(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, role: Role, rng: &mut impl Rng) -> Result<()> {
    let bound = (1.0 / cin as f64).sqrt();
    store.insert(format!("{prefix}.weight"), role, Tensor::from_fn(&[cout, cin], |_| rng.random_range(-bound..bound)))?;
    let bias_role = if role == Role::Weight { Role::Bias } else { role };
    store.insert(format!("{prefix}.bias"), bias_role, Tensor::zeros(&[cout]))?;
    Ok(())
}

pub fn register_norm(store: &mut ParamStore, prefix: &str, c: usize, role: Role, gamma: f64) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), role, Tensor::full(&[c], gamma))?;
    store.insert(format!("{prefix}.beta"), role, Tensor::zeros(&[c]))?;
    Ok(())
}

/// Registers a block with `c` channels under `prefix`.
pub fn register_block(store: &mut ParamStore, prefix: &str, s: PmaShape, rng: &mut impl Rng) -> Result<()> {
    let c = s.channels;
    for i in 1..=4 {
        register_norm(store, &format!("{prefix}.norm{i}"), c, Role::Norm, 1.0)?;
    }
    register_pma(store, &format!("{prefix}.attn1"), s, rng)?;
    register_linear(store, &format!("{prefix}.lin1"), c, c, Role::Weight, rng)?;
    register_pma(store, &format!("{prefix}.attn2"), s, rng)?;
    register_linear(store, &format!("{prefix}.lin2"), c, c, Role::Weight, rng)?;
    // Adapter: x + leaky(IN(linear(x))) with a zero norm gain, so it starts as the identity.
    register_linear(store, &format!("{prefix}.adapter.linear"), c, c, Role::Adapter, rng)?;
    register_norm(store, &format!("{prefix}.adapter.norm"), c, Role::Adapter, 0.0)?;
    Ok(())
}

fn norm(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let g = ctx.p(&format!("{prefix}.gamma"))?;
    let b = ctx.p(&format!("{prefix}.beta"))?;
    Ok(ctx.g.instance_norm(x, g, b, NORM_EPS))
}

fn linear(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.weight"))?;
    let b = ctx.p(&format!("{prefix}.bias"))?;
    Ok(ctx.g.linear(x, w, Some(b)))
}

fn batched(order: &[usize], b: usize) -> Rc<Vec<usize>> {
    let l = order.len();
    Rc::new((0..b).flat_map(|s| order.iter().map(move |&o| s * l + o)).collect())
}

/// Window and shift actually used on an `h × w` map for a configured window.
pub fn block_geometry(h: usize, w: usize, window: usize) -> (usize, isize) {
    let we = effective_window(h, w, window);
    (we, (we / 2) as isize)
}

/// Block forward on `x: [B, H, W, C]`. `p1[b]` / `p2[b]` are the prompts of
/// sample `b` for the windowed and shifted-windowed attention.
pub fn pswin_forward(
    ctx: &mut Ctx,
    prefix: &str,
    s: PmaShape,
    x: Var,
    p1: &[Option<PromptInput>],
    p2: &[Option<PromptInput>],
    adapter: bool,
) -> Result<Var> {
    let shape = ctx.g.shape(x).to_vec();
    let [b, h, w, c] = <[usize; 4]>::try_from(shape.as_slice()).map_err(|_| Error::shape(format!("{prefix}: rank of {shape:?}")))?;
    if c != s.channels {
        return Err(Error::shape(format!("{prefix}: {c} channels for a {}-channel block", s.channels)));
    }
    if p1.len() != b || p2.len() != b {
        return Err(Error::shape(format!("{prefix}: prompt slots for {} / {} samples, batch {b}", p1.len(), p2.len())));
    }
    let (we, shift) = block_geometry(h, w, s.window);
    let l = h * w;
    let plain = window_order(h, w, we, (0, 0))?;
    let shifted = window_order(h, w, we, (-shift, -shift))?;
    let inv_plain = invert_permutation(&plain);
    // Window order -> shifted window order, then back to raster.
    let to_shifted: Vec<usize> = shifted.iter().map(|&src| inv_plain[src]).collect();
    let back = invert_permutation(&shifted);

    let x = ctx.g.reshape(x, &[b, l, c]);
    let mut y = ctx.g.gather_rows(x, batched(&plain, b), &[b, l, c]);

    let n = norm(ctx, &format!("{prefix}.norm1"), y)?;
    let a = pma_layer(ctx, &format!("{prefix}.attn1"), s, n, we, p1)?;
    y = ctx.g.add(y, a);
    let n = norm(ctx, &format!("{prefix}.norm2"), y)?;
    let a = linear(ctx, &format!("{prefix}.lin1"), n)?;
    y = ctx.g.add(y, a);

    y = ctx.g.gather_rows(y, batched(&to_shifted, b), &[b, l, c]);
    let n = norm(ctx, &format!("{prefix}.norm3"), y)?;
    let a = pma_layer(ctx, &format!("{prefix}.attn2"), s, n, we, p2)?;
    y = ctx.g.add(y, a);
    let n = norm(ctx, &format!("{prefix}.norm4"), y)?;
    let a = linear(ctx, &format!("{prefix}.lin2"), n)?;
    y = ctx.g.add(y, a);
    y = ctx.g.gather_rows(y, batched(&back, b), &[b, l, c]);

    if adapter {
        let a = linear(ctx, &format!("{prefix}.adapter.linear"), y)?;
        let a = norm(ctx, &format!("{prefix}.adapter.norm"), a)?;
        let a = ctx.g.leaky_relu(a, 0.01);
        y = ctx.g.add(y, a);
    }
    Ok(ctx.g.reshape(y, &[b, h, w, c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bind::NormMode;
    use crate::gradcheck::{finite_diff_check, probe, random_tensor, GradCheckOptions};
    use crate::graph::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const S: PmaShape = PmaShape { channels: 4, heads: 2, bias_channels: 2, window: 2 };

    fn block(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        register_block(&mut st, "b", S, &mut rng).unwrap();
        for e in ["b.attn1", "b.attn2"] {
            for t in ["w_row", "w_col", "w_prompt"] {
                for v in st.get_mut(&format!("{e}.{t}")).unwrap().data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
        st
    }

    fn run(st: &ParamStore, x: &Tensor, prompts: Option<(&Tensor, &Tensor)>, adapter: bool) -> Tensor {
        let mut g = Graph::no_grad();
        let mut ctx = Ctx::new(&mut g, st, None, NormMode::Eval);
        let xv = ctx.g.input(x.clone());
        let b = x.shape()[0];
        let p: Vec<Option<PromptInput>> = (0..b)
            .map(|_| prompts.map(|(t, e)| PromptInput { tokens: ctx.g.input(t.clone()), embed: ctx.g.input(e.clone()) }))
            .collect();
        let y = pswin_forward(&mut ctx, "b", S, xv, &p, &p, adapter).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_output_weights_give_identity() {
        let mut st = block(1);
        for n in ["b.attn1.o", "b.attn2.o", "b.lin1", "b.lin2"] {
            st.get_mut(&format!("{n}.weight")).unwrap().data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[2, 4, 6, 4], 1.0, &mut rng);
        let y = run(&st, &x, None, true);
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y, x);
    }

    #[test]
    fn prompt_free_paths_agree_and_adapter_starts_as_identity() {
        let st = block(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[1, 4, 4, 4], 1.0, &mut rng);
        let empty = (Tensor::zeros(&[0, 4]), Tensor::zeros(&[0, 2]));
        let a = run(&st, &x, None, false);
        let b = run(&st, &x, Some((&empty.0, &empty.1)), false);
        assert_eq!(a, b);
        assert_eq!(a, run(&st, &x, None, true));
        assert_eq!(a, run(&st, &x, None, false));
        let t = random_tensor(&[3, 4], 1.0, &mut rng);
        let e = random_tensor(&[3, 2], 1.0, &mut rng);
        assert!(run(&st, &x, Some((&t, &e)), false).max_abs_diff(&a) > 1e-6);
    }

    #[test]
    fn per_sample_prompts_stay_in_their_sample() {
        let st = block(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&[3, 4, 4, 4], 1.0, &mut rng);
        let t1 = random_tensor(&[2, 4], 1.0, &mut rng);
        let t2 = random_tensor(&[2, 4], 1.0, &mut rng);
        let e = random_tensor(&[2, 2], 1.0, &mut rng);
        let go = |sel: [&Tensor; 3]| {
            let mut g = Graph::no_grad();
            let mut ctx = Ctx::new(&mut g, &st, None, NormMode::Eval);
            let xv = ctx.g.input(x.clone());
            let ev = ctx.g.input(e.clone());
            let p: Vec<Option<PromptInput>> =
                sel.iter().map(|t| Some(PromptInput { tokens: ctx.g.input((*t).clone()), embed: ev })).collect();
            let y = pswin_forward(&mut ctx, "b", S, xv, &p, &p, false).unwrap();
            g.value(y).clone()
        };
        let a = go([&t1, &t1, &t1]);
        let b = go([&t1, &t2, &t1]);
        let per = 16 * 4;
        for s in 0..3 {
            let d = (s * per..(s + 1) * per).map(|i| (a.data()[i] - b.data()[i]).abs()).fold(0.0, f64::max);
            if s == 1 {
                assert!(d > 1e-6);
            } else {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn shift_uses_effective_window() {
        assert_eq!(block_geometry(8, 8, 4), (4, 2));
        assert_eq!(block_geometry(6, 6, 4), (3, 1));
        assert_eq!(block_geometry(2, 2, 8), (2, 1));
        let st = block(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&[1, 3, 3, 4], 1.0, &mut rng);
        assert!(run(&st, &x, None, false).all_finite());
    }

    #[test]
    fn block_gradients() {
        let st = block(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = st.len();
        let mut inputs: Vec<Tensor> = st.entries().iter().map(|e| e.value.clone()).collect();
        // Adapter gain non-zero so its branch carries gradient.
        let gi = st.id("b.adapter.norm.gamma").unwrap();
        inputs[gi] = Tensor::full(&[4], 0.5);
        inputs.push(random_tensor(&[2, 4, 4, 4], 1.0, &mut rng));
        inputs.push(random_tensor(&[3, 4], 1.0, &mut rng));
        inputs.push(random_tensor(&[3, 4], 1.0, &mut rng));
        inputs.push(random_tensor(&[3, 2], 1.0, &mut rng));
        let wrt = vec![true; inputs.len()];
        let r = finite_diff_check(&inputs, &wrt, |g, v| {
            let mut ctx = Ctx::new(g, &st, None, NormMode::Eval);
            for (i, e) in st.entries().iter().enumerate() {
                ctx.bind(&e.name, v[i]).unwrap();
            }
            let p1 = [Some(PromptInput { tokens: v[n + 1], embed: v[n + 3] }), None];
            let p2 = [Some(PromptInput { tokens: v[n + 2], embed: v[n + 3] }), None];
            let y = pswin_forward(&mut ctx, "b", S, v[n], &p1, &p2, true).unwrap();
            probe(g, y, 2)
        }, GradCheckOptions::default());
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
