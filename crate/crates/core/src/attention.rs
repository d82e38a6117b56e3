//! Prompt-able multi-head attention with relative-distance content bias and
//! per-token prompt bias.

use std::rc::Rc;

use rand::Rng;

use crate::bind::{Ctx, NormMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{AttentionGeometry, PromptKv};
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;
use crate::windowing::WindowedContent;

/// Prompt tokens for one sample and one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct PromptInput {
    /// `[Np, C]`.
    pub tokens: Var,
    /// `[Np, C_bias]`, rows aligned with `tokens`.
    pub embed: Var,
}

/// Shape of one PMA layer.
#[derive(Clone, Copy, Debug)]
pub struct PmaShape {
    pub channels: usize,
    pub heads: usize,
    pub bias_channels: usize,
    /// Configured window; sizes the relative-distance tables.
    pub window: usize,
}

impl PmaShape {
    pub fn n_distances(&self) -> usize {
        2 * self.window - 1
    }
}

/// Registers `q, k, v, o` projections and the bias tables under `prefix`.
pub fn register_pma(store: &mut ParamStore, prefix: &str, s: PmaShape, rng: &mut impl Rng) -> Result<()> {
    let c = s.channels;
    let bound = (1.0 / c as f64).sqrt();
    for proj in ["q", "k", "v", "o"] {
        store.insert(format!("{prefix}.{proj}.weight"), Role::Weight, Tensor::from_fn(&[c, c], |_| rng.random_range(-bound..bound)))?;
        store.insert(format!("{prefix}.{proj}.bias"), Role::Bias, Tensor::zeros(&[c]))?;
    }
    let nd = s.n_distances();
    let cb = s.bias_channels;
    for t in ["e_row", "e_col"] {
        store.insert(format!("{prefix}.{t}"), Role::Weight, Tensor::from_fn(&[nd, cb], |_| rng.random_range(-0.02..0.02)))?;
    }
    for t in ["w_row", "w_col"] {
        store.insert(format!("{prefix}.{t}"), Role::Weight, Tensor::zeros(&[s.heads, cb]))?;
    }
    store.insert(format!("{prefix}.w_prompt"), Role::PromptBiasWeight, Tensor::zeros(&[s.heads, cb]))?;
    Ok(())
}

/// Relative-distance table rows for every `(i, j)` pair of a `window × window`
/// window, as `(d_row, d_col)` offsets into tables built for `capacity`.
pub fn relative_indices(window: usize, capacity: usize) -> Result<Vec<(usize, usize)>> {
    if window > capacity {
        return Err(Error::Geometry(format!("window {window} needs distances beyond a table for window {capacity}")));
    }
    let nw = window * window;
    let mut out = Vec::with_capacity(nw * nw);
    for i in 0..nw {
        for j in 0..nw {
            let dr = (i / window) as isize - (j / window) as isize + capacity as isize - 1;
            let dc = (i % window) as isize - (j % window) as isize + capacity as isize - 1;
            out.push((dr as usize, dc as usize));
        }
    }
    Ok(out)
}

/// `B[h, i, j] = (w_row[h]·E_row[d_row] + w_col[h]·E_col[d_col]) / 2`, unscaled.
pub fn content_bias(e_row: &Tensor, e_col: &Tensor, w_row: &Tensor, w_col: &Tensor, window: usize) -> Result<Tensor> {
    let capacity = (e_row.shape()[0] + 1) / 2;
    let idx = relative_indices(window, capacity)?;
    let heads = w_row.shape()[0];
    let nw = window * window;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut out = Tensor::zeros(&[heads, nw, nw]);
    for h in 0..heads {
        for (p, &(dr, dc)) in idx.iter().enumerate() {
            out.data_mut()[h * nw * nw + p] = 0.5 * (dot(w_row.row(h), e_row.row(dr)) + dot(w_col.row(h), e_col.row(dc)));
        }
    }
    Ok(out)
}

/// `N_w × N_p` prompt bias of one head: column `t` is `w_prompt[h]·E_prompt[t]` on every row.
pub fn prompt_bias(e_prompt: &Tensor, w_prompt: &Tensor, head: usize, window_len: usize) -> Tensor {
    let np = e_prompt.rows();
    let col: Vec<f64> =
        (0..np).map(|t| e_prompt.row(t).iter().zip(w_prompt.row(head)).map(|(a, b)| a * b).sum()).collect();
    Tensor::from_fn(&[window_len, np], |i| col[i % np])
}

fn content_bias_var(ctx: &mut Ctx, prefix: &str, s: PmaShape, window: usize) -> Result<Var> {
    let idx = relative_indices(window, s.window)?;
    let nw = window * window;
    let heads = s.heads;
    let mut terms = Vec::with_capacity(2);
    for (axis, pick) in [("row", 0usize), ("col", 1)] {
        let e = ctx.p(&format!("{prefix}.e_{axis}"))?;
        let w = ctx.p(&format!("{prefix}.w_{axis}"))?;
        // [N_d, heads]
        let per_dist = ctx.g.linear(e, w, None);
        let gather: Vec<usize> = (0..heads)
            .flat_map(|h| idx.iter().map(move |&(dr, dc)| (if pick == 0 { dr } else { dc }) * heads + h))
            .collect();
        terms.push(ctx.g.gather_elems(per_dist, Rc::new(gather), &[heads, nw, nw]));
    }
    let sum = ctx.g.add(terms[0], terms[1]);
    Ok(ctx.g.scale(sum, 0.5 / (s.bias_channels as f64).sqrt()))
}

/// One PMA layer over window-ordered content `x: [B, L, C]`.
pub fn pma_layer(
    ctx: &mut Ctx,
    prefix: &str,
    s: PmaShape,
    x: Var,
    window: usize,
    prompts: &[Option<PromptInput>],
) -> Result<Var> {
    let p = |n: &str| format!("{prefix}.{n}");
    let (wq, bq) = (ctx.p(&p("q.weight"))?, ctx.p(&p("q.bias"))?);
    let (wk, bk) = (ctx.p(&p("k.weight"))?, ctx.p(&p("k.bias"))?);
    let (wv, bv) = (ctx.p(&p("v.weight"))?, ctx.p(&p("v.bias"))?);
    let (wo, bo) = (ctx.p(&p("o.weight"))?, ctx.p(&p("o.bias"))?);
    let q = ctx.g.linear(x, wq, Some(bq));
    let k = ctx.g.linear(x, wk, Some(bk));
    let v = ctx.g.linear(x, wv, Some(bv));
    let cb = content_bias_var(ctx, prefix, s, window)?;
    let scale_b = 1.0 / (s.bias_channels as f64).sqrt();
    let mut kv = Vec::with_capacity(prompts.len());
    for pr in prompts {
        kv.push(match pr {
            Some(pi) if ctx.g.value(pi.tokens).rows() > 0 => {
                if ctx.g.value(pi.tokens).last_dim() != s.channels {
                    return Err(Error::shape(format!(
                        "{prefix}: prompt width {} for {} channels",
                        ctx.g.value(pi.tokens).last_dim(),
                        s.channels
                    )));
                }
                let pk = ctx.g.linear(pi.tokens, wk, Some(bk));
                let pv = ctx.g.linear(pi.tokens, wv, Some(bv));
                let wp = ctx.p(&p("w_prompt"))?;
                let raw = ctx.g.linear(pi.embed, wp, None);
                let bias = ctx.g.scale(raw, scale_b);
                Some(PromptKv { k: pk, v: pv, bias: Some(bias) })
            }
            _ => None,
        });
    }
    let geo = AttentionGeometry {
        heads: s.heads,
        window_len: window * window,
        scale: 1.0 / ((s.channels / s.heads) as f64).sqrt(),
    };
    let att = ctx.g.window_attention(q, k, v, Some(cb), &kv, geo);
    Ok(ctx.g.linear(att, wo, Some(bo)))
}

/// Forward-only PMA on a single windowed map with plain token arrays.
pub fn pma_forward(
    wc: &WindowedContent,
    prompts: Option<(&Tensor, &Tensor)>,
    store: &ParamStore,
    prefix: &str,
    s: PmaShape,
) -> Result<WindowedContent> {
    if !wc.windows.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("windowed content".into()));
    }
    if wc.c != s.channels {
        return Err(Error::shape(format!("content width {} for a {}-channel layer", wc.c, s.channels)));
    }
    let mut g = Graph::no_grad();
    let mut ctx = Ctx::new(&mut g, store, None, NormMode::Eval);
    let l = wc.provenance.len();
    let x = ctx.g.input(Tensor::new(&[1, l, wc.c], wc.windows.clone())?);
    let pin = prompts.map(|(t, e)| PromptInput { tokens: ctx.g.input(t.clone()), embed: ctx.g.input(e.clone()) });
    let y = pma_layer(&mut ctx, prefix, s, x, wc.window, &[pin])?;
    let mut out = wc.clone();
    out.windows = g.value(y).data().to_vec();
    Ok(out)
}
