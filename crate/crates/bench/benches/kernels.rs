use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use punet_bench::{image_batch, lattice, rng, toy_model};
use punet_core::bind::{Ctx, NormMode};
use punet_core::gradcheck::random_tensor;
use punet_core::ops::{AttentionGeometry, PromptKv};
use punet_core::punet::ForwardOpts;
use punet_core::selfsup::{cluster, ClusterParams};
use punet_core::Graph;

fn window_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("window_attention");
    let (heads, len, ch, np) = (4, 16, 8, 12);
    for windows in [64, 256] {
        let mut r = rng(1);
        let q = random_tensor(&[windows, len, ch], 1.0, &mut r);
        let k = random_tensor(&[windows, len, ch], 1.0, &mut r);
        let v = random_tensor(&[windows, len, ch], 1.0, &mut r);
        let bias = random_tensor(&[heads, len, len], 0.1, &mut r);
        let pk = random_tensor(&[np, ch], 1.0, &mut r);
        let pv = random_tensor(&[np, ch], 1.0, &mut r);
        let pb = random_tensor(&[np, heads], 0.1, &mut r);
        let geo = AttentionGeometry { heads, window_len: len, scale: 1.0 / ((ch / heads) as f64).sqrt() };
        group.bench_with_input(BenchmarkId::new("fwd_bwd", windows), &windows, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let (q, k, v, bias) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()), g.param(bias.clone()));
                let kv = PromptKv { k: g.param(pk.clone()), v: g.param(pv.clone()), bias: Some(g.param(pb.clone())) };
                let out = g.window_attention(q, k, v, Some(bias), &[Some(kv)], geo);
                let s = g.sum(out);
                g.backward(s);
                g.grad(q).cloned()
            })
        });
    }
    group.finish();
}

fn clustering(c: &mut Criterion) {
    let mut group = c.benchmark_group("cluster");
    for side in [16, 32] {
        let ch = 16;
        let values = random_tensor(&[side * side, ch], 1.0, &mut rng(2)).into_data();
        let grid = lattice(side, side);
        let p = ClusterParams { reduction: 8, iters: 3, tau: 0.033, fwhm: 32.0 };
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| b.iter(|| cluster(&values, &grid, ch, p).expect("valid instance")));
    }
    group.finish();
}

fn punet_step(c: &mut Criterion) {
    let model = toy_model();
    let sel = model.select("t").expect("registered");
    let mut group = c.benchmark_group("punet");
    group.sample_size(10);
    for size in [32, 64] {
        let x = image_batch(2, size, 3);
        group.bench_with_input(BenchmarkId::new("fwd_bwd", size), &size, |b, &size| {
            b.iter(|| {
                let mut g = Graph::new();
                let mut ctx = Ctx::new(&mut g, &model.params, None, NormMode::Train);
                let xin = ctx.g.input(x.clone());
                let opts = ForwardOpts::prompted();
                let f = model.forward(&mut ctx, xin, &[Some(sel.clone()), Some(sel.clone())], opts).expect("valid input");
                let heads = model.head(&mut ctx, f, &[sel.clone(), sel.clone()], (size, size), opts).expect("valid head");
                let cat = ctx.g.concat_rows(&heads);
                let loss = ctx.g.mean(cat);
                ctx.g.backward(loss);
                ctx.grads().len()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, window_attention, clustering, punet_step);
criterion_main!(benches);
