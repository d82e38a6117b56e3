//! Registry of differentiable operations and their finite-difference cases.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{pma_layer, register_pma, PmaShape, PromptInput};
use crate::bind::{Ctx, NormMode};
use crate::config::{Aggregation, ExperimentConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{check_against, finite_diff_check, probe, random_tensor, GradCheckOptions, GradReport};
use crate::graph::{Graph, Var};
use crate::ops::{AttentionGeometry, PromptKv};
use crate::params::ParamStore;
use crate::pswin::{pswin_forward, register_block};
use crate::punet::{ForwardOpts, PUNet};
use crate::seghead::{aggregate, aggregation_weights, PromptTask};
use crate::selfsup::{cpa_student_term, PrototypeBank};
use crate::supervise::{focal_loss, ClassWeights};
use crate::tensor::Tensor;

/// Every differentiable operation the models are built from.
pub const OPERATIONS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "reshape",
    "add_bias",
    "matmul",
    "linear",
    "leaky_relu",
    "gather_rows",
    "gather_elems",
    "concat_last",
    "concat_rows",
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "instance_norm",
    "resize_bilinear",
    "cosine_sim",
    "log_softmax",
    "softmax",
    "pick",
    "focal_term",
    "sum",
    "mean",
    "dot_const",
    "window_attention",
    "pma",
    "pswin_block",
    "punet",
    "aggregate",
    "focal_loss",
    "cpa_loss",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
}

pub struct GradCheckCase {
    pub op: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub tolerance: f64,
    pub precision: Precision,
    run: Box<dyn Fn() -> GradReport>,
}

impl GradCheckCase {
    pub fn run(&self) -> GradReport {
        (self.run)()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub op: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub tolerance: f64,
    pub precision: Precision,
    pub report: GradReport,
    pub passed: bool,
    pub seconds: f64,
}

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn case(op: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> GradCheckCase {
    let shapes = inputs.iter().map(|t| t.shape().to_vec()).collect();
    GradCheckCase {
        op,
        shapes,
        tolerance: TOL,
        precision: Precision::F64,
        run: Box::new(move || {
            let wrt = vec![true; inputs.len()];
            finite_diff_check(&inputs, &wrt, |g, v| {
                let y = f(g, v);
                probe(g, y, 17)
            }, GradCheckOptions::default())
        }),
    }
}

/// Binds `v[..store.len()]` to the registry entries in order.
fn bind_all(ctx: &mut Ctx, store: &ParamStore, v: &[Var]) {
    for (i, e) in store.entries().iter().enumerate() {
        ctx.bind(&e.name, v[i]).expect("registered");
    }
}

fn store_inputs(store: &ParamStore) -> Vec<Tensor> {
    store.entries().iter().map(|e| e.value.clone()).collect()
}

/// Nudges zero-initialised bias tables so every path carries gradient.
fn randomize(store: &mut ParamStore, suffixes: &[&str], r: &mut ChaCha8Rng) {
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).filter(|n| suffixes.iter().any(|s| n.ends_with(s))).collect();
    for n in names {
        for v in store.get_mut(&n).expect("listed").data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
}

fn elementwise_cases(out: &mut Vec<GradCheckCase>) {
    let mut r = rng(1);
    let a = random_tensor(&[3, 4], 1.0, &mut r);
    let b = random_tensor(&[3, 4], 1.0, &mut r);
    let bias = random_tensor(&[4], 1.0, &mut r);
    out.push(case("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])));
    out.push(case("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])));
    out.push(case("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])));
    out.push(case("scale", vec![a.clone()], |g, v| g.scale(v[0], -2.5)));
    out.push(case("reshape", vec![a.clone()], |g, v| g.reshape(v[0], &[2, 6])));
    out.push(case("add_bias", vec![a.clone(), bias], |g, v| g.add_bias(v[0], v[1])));
    out.push(case("leaky_relu", vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.01)));
    let rows = Rc::new(vec![2, 0, 0, 1]);
    out.push(case("gather_rows", vec![a.clone()], move |g, v| g.gather_rows(v[0], rows.clone(), &[4, 4])));
    let elems = Rc::new(vec![11, 3, 3, 0, 7]);
    out.push(case("gather_elems", vec![a.clone()], move |g, v| g.gather_elems(v[0], elems.clone(), &[5])));
    out.push(case("concat_last", vec![a.clone(), b.clone()], |g, v| g.concat_last(v[0], v[1])));
    out.push(case("concat_rows", vec![a.clone(), b], |g, v| g.concat_rows(&[v[0], v[1], v[0]])));
    out.push(case("sum", vec![a.clone()], |g, v| g.sum(v[0])));
    out.push(case("mean", vec![a.clone()], |g, v| g.mean(v[0])));
    let c = random_tensor(&[3, 4], 1.0, &mut r);
    out.push(case("dot_const", vec![a.clone()], move |g, v| g.dot_const(v[0], c.clone())));
    out.push(case("log_softmax", vec![a.clone()], |g, v| g.log_softmax(v[0])));
    out.push(case("softmax", vec![a.clone()], |g, v| g.softmax(v[0])));
    let picks = Rc::new(vec![3, 0, 2]);
    out.push(case("pick", vec![a.clone()], move |g, v| g.pick(v[0], picks.clone())));
    let alpha = Rc::new(vec![0.5, 1.5, 1.0]);
    let picks = Rc::new(vec![1, 2, 0]);
    out.push(case("focal_term", vec![a.clone()], move |g, v| {
        let lp = g.log_softmax(v[0]);
        let p = g.pick(lp, picks.clone());
        g.focal_term(p, alpha.clone(), 2.0)
    }));
    let p = random_tensor(&[5, 4], 1.0, &mut r);
    out.push(case("cosine_sim", vec![a, p], |g, v| g.cosine_sim(v[0], v[1], 1e-8)));
}

fn dense_cases(out: &mut Vec<GradCheckCase>) {
    let mut r = rng(2);
    let a = random_tensor(&[2, 3, 4], 1.0, &mut r);
    let m = random_tensor(&[4, 5], 1.0, &mut r);
    let w = random_tensor(&[5, 4], 1.0, &mut r);
    let b = random_tensor(&[5], 1.0, &mut r);
    out.push(case("matmul", vec![a.clone(), m], |g, v| g.matmul(v[0], v[1])));
    out.push(case("linear", vec![a, w, b], |g, v| g.linear(v[0], v[1], Some(v[2]))));
    let x = random_tensor(&[2, 6, 5, 3], 1.0, &mut r);
    let k = random_tensor(&[4, 3, 3, 3], 1.0, &mut r);
    out.push(case("conv2d", vec![x.clone(), k], |g, v| g.conv2d(v[0], v[1], 2, 1)));
    out.push(case("resize_bilinear", vec![x], |g, v| g.resize_bilinear(v[0], 9, 4)));
    let x = random_tensor(&[2, 5, 3], 1.0, &mut r);
    let gm = random_tensor(&[3], 1.0, &mut r);
    let bt = random_tensor(&[3], 1.0, &mut r);
    out.push(case("batch_norm_train", vec![x.clone(), gm.clone(), bt.clone()], |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).0));
    out.push(case("instance_norm", vec![x.clone(), gm.clone(), bt.clone()], |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5)));
    let (mean, var) = (vec![0.1, -0.2, 0.3], vec![1.5, 0.5, 2.0]);
    out.push(case("batch_norm_eval", vec![x, gm, bt], move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)));

    // Two windows of four cells; prompts on sample 0 only.
    let (bsz, l, c, np, heads) = (2, 8, 4, 3, 2);
    let mut inputs = Vec::new();
    for _ in 0..3 {
        inputs.push(random_tensor(&[bsz, l, c], 1.0, &mut r));
    }
    inputs.push(random_tensor(&[heads, 4, 4], 1.0, &mut r));
    inputs.push(random_tensor(&[np, c], 1.0, &mut r));
    inputs.push(random_tensor(&[np, c], 1.0, &mut r));
    inputs.push(random_tensor(&[np, heads], 1.0, &mut r));
    out.push(case("window_attention", inputs, move |g, v| {
        let geo = AttentionGeometry { heads, window_len: 4, scale: 0.7 };
        let prompts = [Some(PromptKv { k: v[4], v: v[5], bias: Some(v[6]) }), None];
        g.window_attention(v[0], v[1], v[2], Some(v[3]), &prompts, geo)
    }));
}

fn model_cases(out: &mut Vec<GradCheckCase>) {
    let mut r = rng(3);
    let s = PmaShape { channels: 8, heads: 2, bias_channels: 4, window: 2 };
    let mut st = ParamStore::new();
    register_pma(&mut st, "a", s, &mut r).expect("fresh store");
    randomize(&mut st, &["w_row", "w_col", "w_prompt"], &mut r);
    let n = st.len();
    let mut inputs = store_inputs(&st);
    inputs.push(random_tensor(&[2, 16, 8], 1.0, &mut r));
    inputs.push(random_tensor(&[3, 8], 1.0, &mut r));
    inputs.push(random_tensor(&[3, 4], 1.0, &mut r));
    out.push(case("pma", inputs, move |g, v| {
        let mut ctx = Ctx::new(g, &st, None, NormMode::Eval);
        bind_all(&mut ctx, &st, v);
        let p = PromptInput { tokens: v[n + 1], embed: v[n + 2] };
        pma_layer(&mut ctx, "a", s, v[n], 2, &[Some(p), None]).expect("valid layer")
    }));

    let s = PmaShape { channels: 4, heads: 2, bias_channels: 2, window: 2 };
    let mut st = ParamStore::new();
    register_block(&mut st, "b", s, &mut r).expect("fresh store");
    randomize(&mut st, &["w_row", "w_col", "w_prompt"], &mut r);
    let gain = st.id("b.adapter.norm.gamma").expect("adapter");
    let n = st.len();
    let mut inputs = store_inputs(&st);
    inputs[gain] = Tensor::full(&[4], 0.5);
    inputs.push(random_tensor(&[2, 4, 4, 4], 1.0, &mut r));
    inputs.push(random_tensor(&[3, 4], 1.0, &mut r));
    inputs.push(random_tensor(&[3, 4], 1.0, &mut r));
    inputs.push(random_tensor(&[3, 2], 1.0, &mut r));
    out.push(case("pswin_block", inputs, move |g, v| {
        let mut ctx = Ctx::new(g, &st, None, NormMode::Eval);
        bind_all(&mut ctx, &st, v);
        let p1 = [Some(PromptInput { tokens: v[n + 1], embed: v[n + 3] }), None];
        let p2 = [Some(PromptInput { tokens: v[n + 2], embed: v[n + 3] }), None];
        pswin_forward(&mut ctx, "b", s, v[n], &p1, &p2, true).expect("valid block")
    }));

    out.push(punet_case(&mut r));
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        levels: 2,
        channels_per_level: vec![4, 8],
        window_size: 2,
        shift: 1,
        heads: 2,
        bias_channels: 2,
        tokens_per_class: 2,
        aggregation: Aggregation::Mean,
        teacher_fov: 8,
        student1_fov: 8,
        student2_fov: 8,
        ..ExperimentConfig::toy()
    }
}

/// Whole network, backbone and prompts, through the cosine head. Mean
/// aggregation keeps the head's gradient exact.
fn punet_case(r: &mut ChaCha8Rng) -> GradCheckCase {
    let mut model = PUNet::build(&tiny_config()).expect("tiny config is valid");
    model.add_task(PromptTask::multiclass("t", vec![1, 2]), 5).expect("fresh task");
    randomize(&mut model.params, &["w_row", "w_col", "w_prompt", "adapter.norm.gamma"], r);
    let n = model.params.len();
    let mut inputs = store_inputs(&model.params);
    inputs.push(random_tensor(&[2, 8, 8, 1], 1.0, r));
    let sel = model.select("t").expect("registered");
    case("punet", inputs, move |g, v| {
        let st = &model.params;
        let mut ctx = Ctx::new(g, st, None, NormMode::Batch);
        bind_all(&mut ctx, st, v);
        let opts = ForwardOpts { adapters: true, ..ForwardOpts::prompted() };
        let sels = [Some(sel.clone()), None];
        let f = model.forward(&mut ctx, v[n], &sels, opts).expect("valid input");
        let heads = model.head(&mut ctx, f, &[sel.clone(), sel.clone()], (8, 8), opts).expect("valid head");
        ctx.g.concat_rows(&heads)
    })
}

fn loss_cases(out: &mut Vec<GradCheckCase>) {
    let mut r = rng(4);
    let scores = random_tensor(&[12, 3], 2.0, &mut r);
    let target: Vec<u8> = (0..12).map(|_| r.random_range(0..3u8)).collect();
    let alpha = ClassWeights(vec![0.5, 2.0, 1.0]);
    out.push(case("focal_loss", vec![scores], move |g, v| focal_loss(g, v[0], &target, &alpha, 2.0).expect("valid target")));

    let (n, c, k) = (10, 4, 3);
    let f = random_tensor(&[n, c], 1.0, &mut r);
    let bank = PrototypeBank { c, centroids: random_tensor(&[k, c], 1.0, &mut r).into_data(), positions: vec![[0.0, 0.0]; k] };
    let mut targets = random_tensor(&[n, k], 1.0, &mut r).into_data();
    for row in targets.chunks_mut(k) {
        let s: f64 = row.iter_mut().map(|v| {
            *v = v.abs() + 0.1;
            *v
        }).sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out.push(case("cpa_loss", vec![f], move |g, v| cpa_student_term(g, v[0], &bank, 0.1, &targets).expect("valid bank")));

    out.push(aggregate_case(&mut r));
}

/// The aggregation weights are constants of the backward pass, so the
/// reference is the finite difference of the same map with the weights frozen
/// at the evaluation point.
fn aggregate_case(r: &mut ChaCha8Rng) -> GradCheckCase {
    let (t, tau) = (3, 0.1);
    let sims = random_tensor(&[4, 2 * t], 1.0, r);
    let frozen: Vec<f64> = sims.data().chunks(t).flat_map(|s| aggregation_weights(s, Aggregation::Weighted, tau, 1)).collect();
    GradCheckCase {
        op: "aggregate",
        shapes: vec![sims.shape().to_vec()],
        tolerance: TOL,
        precision: Precision::F64,
        run: Box::new(move || {
            let mut g = Graph::new();
            let s = g.param(sims.clone());
            let a = aggregate(&mut g, s, t, Aggregation::Weighted, tau, 1).expect("valid sims");
            let y = probe(&mut g, a, 17);
            g.backward(y);
            let analytic = g.grad(s).expect("recorded").clone();
            let w = Tensor::new(sims.shape(), frozen.clone()).expect("same shape");
            check_against(&[sims.clone()], &[true], &[analytic], |g, v| {
                let ws = g.input(w.clone());
                let prod = g.mul(v[0], ws);
                let rows = g.reshape(prod, &[8, t]);
                let ones = g.input(Tensor::full(&[1, t], 1.0));
                let cls = g.linear(rows, ones, None);
                let cls = g.reshape(cls, &[4, 2]);
                probe(g, cls, 17)
            }, GradCheckOptions::default())
        }),
    }
}

/// All registered cases in a fixed order.
pub fn cases() -> Vec<GradCheckCase> {
    let mut out = Vec::new();
    elementwise_cases(&mut out);
    dense_cases(&mut out);
    model_cases(&mut out);
    loss_cases(&mut out);
    out
}

/// Operations listed in [`OPERATIONS`] without a case.
pub fn missing_cases(cases: &[GradCheckCase]) -> Vec<&'static str> {
    OPERATIONS.iter().copied().filter(|op| !cases.iter().any(|c| c.op == *op)).collect()
}

/// Runs the cases whose op matches `filter` (all when `None`). An operation
/// registered without a case is an error.
pub fn run_suite(filter: Option<&str>) -> Result<Vec<CaseResult>> {
    let all = cases();
    let missing = missing_cases(&all);
    if !missing.is_empty() {
        return Err(Error::Invalid(format!("operations without a gradient check: {}", missing.join(", "))));
    }
    if let Some(f) = filter {
        if !OPERATIONS.contains(&f) {
            return Err(Error::Unknown { kind: "operation", name: f.to_string() });
        }
    }
    Ok(all
        .iter()
        .filter(|c| filter.map_or(true, |f| c.op == f))
        .map(|c| {
            let t = std::time::Instant::now();
            let report = c.run();
            let passed = report.max_rel_err < c.tolerance;
            CaseResult { op: c.op, shapes: c.shapes.clone(), tolerance: c.tolerance, precision: c.precision, report, passed, seconds: t.elapsed().as_secs_f64() }
        })
        .collect())
}
