//! Encoder-decoder assembly with deep prompt injection, the segmentation head
//! and the freeze policies of the adaptation schemes.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{PmaShape, PromptInput};
use crate::bind::{Ctx, NormMode};
use crate::config::{ExperimentConfig, PromptSharing, Scheme};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{ParamStore, Role, TrainableMask};
use crate::pswin::{pswin_forward, register_block};
use crate::seghead::{self, embed_name, head_names, seg_name, token_name, PromptLayout, PromptSelection, PromptTask};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub name: String,
    pub channels: usize,
    /// Prompt slots of the windowed and the shifted-windowed sublayer.
    pub slots: (usize, usize),
}

/// Blocks in forward order: encoder levels `0..L`, then decoder levels `L-2..=0`.
pub fn block_layout(cfg: &ExperimentConfig) -> Vec<BlockInfo> {
    let l = cfg.levels;
    let names = (0..l)
        .map(|i| (format!("enc{i}.block"), cfg.channels_per_level[i]))
        .chain((0..l.saturating_sub(1)).rev().map(|i| (format!("dec{i}.block"), cfg.channels_per_level[i])));
    names
        .enumerate()
        .map(|(b, (name, channels))| {
            let slots = match cfg.prompt_sharing {
                PromptSharing::Block => (b, b),
                PromptSharing::Sublayer => (2 * b, 2 * b + 1),
            };
            BlockInfo { name, channels, slots }
        })
        .collect()
}

/// What the forward pass routes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOpts {
    /// Insert prompt tokens into the attention layers.
    pub prompts: bool,
    pub adapters: bool,
    /// Predict with the linear head instead of prompt similarity.
    pub fixed_head: bool,
}

impl ForwardOpts {
    pub fn for_scheme(s: Scheme) -> Self {
        ForwardOpts { prompts: !s.uses_fixed_head(), adapters: s == Scheme::Adapter, fixed_head: s.uses_fixed_head() }
    }

    pub fn prompted() -> Self {
        ForwardOpts { prompts: true, adapters: false, fixed_head: false }
    }

    pub fn plain() -> Self {
        ForwardOpts { prompts: false, adapters: false, fixed_head: false }
    }
}

#[derive(Clone, Debug)]
pub struct PUNet {
    pub config: ExperimentConfig,
    pub params: ParamStore,
    pub tasks: Vec<PromptTask>,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct ParamReport {
    pub backbone: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub prompt_tokens: usize,
    pub prompt_bias: usize,
    pub adapters: usize,
    pub fixed_heads: usize,
}

fn register_conv(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    let bound = (6.0 / (9 * cin) as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Role::Weight, Tensor::from_fn(&[cout, 3, 3, cin], |_| rng.random_range(-bound..bound)))?;
    Ok(())
}

fn register_bn(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Role::Norm, Tensor::full(&[c], 1.0))?;
    store.insert(format!("{prefix}.beta"), Role::Norm, Tensor::zeros(&[c]))?;
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]))?;
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0))?;
    Ok(())
}

impl PUNet {
    /// Builds a prompt-free model; tasks are added with [`PUNet::add_task`].
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let ch = &config.channels_per_level;
        let shape = |c: usize| PmaShape { channels: c, heads: config.heads, bias_channels: config.bias_channels, window: config.window_size };
        register_conv(&mut p, "enc0.embed", 1, ch[0], &mut rng)?;
        register_bn(&mut p, "enc0.embed_bn", ch[0])?;
        register_block(&mut p, "enc0.block", shape(ch[0]), &mut rng)?;
        for l in 1..config.levels {
            register_conv(&mut p, &format!("enc{l}.down"), ch[l - 1], ch[l], &mut rng)?;
            register_bn(&mut p, &format!("enc{l}.down_bn"), ch[l])?;
            register_block(&mut p, &format!("enc{l}.block"), shape(ch[l]), &mut rng)?;
        }
        for l in (0..config.levels - 1).rev() {
            register_conv(&mut p, &format!("dec{l}.fuse"), ch[l] + ch[l + 1], ch[l], &mut rng)?;
            register_bn(&mut p, &format!("dec{l}.fuse_bn"), ch[l])?;
            register_block(&mut p, &format!("dec{l}.block"), shape(ch[l]), &mut rng)?;
        }
        Ok(PUNet { config: config.clone(), params: p, tasks: Vec::new() })
    }

    pub fn blocks(&self) -> Vec<BlockInfo> {
        block_layout(&self.config)
    }

    pub fn prompt_layout(&self) -> PromptLayout {
        let blocks = self.blocks();
        let mut slot_channels = Vec::new();
        for b in &blocks {
            slot_channels.push(b.channels);
            if b.slots.0 != b.slots.1 {
                slot_channels.push(b.channels);
            }
        }
        PromptLayout {
            slot_channels,
            bias_channels: self.config.bias_channels,
            out_channels: self.config.out_channels(),
            tokens_per_class: self.config.tokens_per_class,
        }
    }

    /// Registers fresh prompt banks and a linear head for `task`.
    pub fn add_task(&mut self, task: PromptTask, seed: u64) -> Result<()> {
        if self.tasks.iter().any(|t| t.name == task.name) {
            return Err(Error::Invalid(format!("task `{}` already registered", task.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = self.prompt_layout();
        seghead::init_prompts(&mut self.params, &layout, &task, &mut rng)?;
        self.tasks.push(task);
        Ok(())
    }

    pub fn task(&self, name: &str) -> Result<&PromptTask> {
        self.tasks.iter().find(|t| t.name == name).ok_or_else(|| Error::Unknown { kind: "task", name: name.to_string() })
    }

    /// Full selection of a registered task.
    pub fn select(&self, task: &str) -> Result<PromptSelection> {
        seghead::select_prompts(&self.tasks, task, None)
    }

    pub fn param_report(&self) -> ParamReport {
        let p = &self.params;
        ParamReport {
            backbone: p.backbone_count(),
            encoder: p.count(|e| e.role.is_backbone() && e.name.starts_with("enc")),
            decoder: p.count(|e| e.role.is_backbone() && e.name.starts_with("dec")),
            prompt_tokens: p.count(|e| matches!(e.role, Role::PromptToken | Role::SegToken)),
            prompt_bias: p.count(|e| matches!(e.role, Role::PromptBiasEmbed | Role::PromptBiasWeight)),
            adapters: p.count(|e| e.role == Role::Adapter),
            fixed_heads: p.count(|e| e.role == Role::FixedHead),
        }
    }

    /// Smallest input side the level structure accepts.
    pub fn input_multiple(&self) -> usize {
        self.config.patch_stride << (self.config.levels - 1)
    }

    fn bn(&self, ctx: &mut Ctx, prefix: &str, conv: &str, x: Var) -> Result<Var> {
        let gamma = ctx.p(&format!("{prefix}.gamma"))?;
        let beta = ctx.p(&format!("{prefix}.beta"))?;
        let batch_stats = match ctx.mode {
            NormMode::Eval => false,
            NormMode::Batch => true,
            // Layers with frozen kernels keep their running statistics.
            NormMode::Train => ctx.trainable_name(&format!("{conv}.weight"))?,
        };
        if batch_stats {
            let (y, mean, var) = ctx.g.batch_norm_train(x, gamma, beta, BN_EPS);
            if ctx.mode == NormMode::Train {
                ctx.bn_stats.push((prefix.to_string(), mean, var));
            }
            Ok(y)
        } else {
            let mean = self.params.buffer(&format!("{prefix}.running_mean"))?.data().to_vec();
            let var = self.params.buffer(&format!("{prefix}.running_var"))?.data().to_vec();
            Ok(ctx.g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS))
        }
    }

    fn conv_bn_act(&self, ctx: &mut Ctx, conv: &str, bn: &str, x: Var, stride: usize) -> Result<Var> {
        let w = ctx.p(&format!("{conv}.weight"))?;
        let y = ctx.g.conv2d(x, w, stride, 1);
        let y = self.bn(ctx, bn, conv, y)?;
        Ok(ctx.g.leaky_relu(y, self.config.leaky_slope))
    }

    /// Per-sample prompt inputs of one slot; identical selections share nodes.
    fn slot_prompts(
        &self,
        ctx: &mut Ctx,
        sel: &[Option<PromptSelection>],
        slot: usize,
        cache: &mut HashMap<(String, Vec<usize>, usize), PromptInput>,
    ) -> Result<Vec<Option<PromptInput>>> {
        let mut out = Vec::with_capacity(sel.len());
        for s in sel {
            let Some(s) = s.as_ref().filter(|s| !s.banks.is_empty()) else {
                out.push(None);
                continue;
            };
            let key = (s.task.clone(), s.banks.clone(), slot);
            if let Some(p) = cache.get(&key) {
                out.push(Some(*p));
                continue;
            }
            let mut toks = Vec::with_capacity(s.banks.len());
            let mut embs = Vec::with_capacity(s.banks.len());
            for &m in &s.banks {
                toks.push(ctx.p(&token_name(&s.task, m, slot))?);
                embs.push(ctx.p(&embed_name(&s.task, m, slot))?);
            }
            let p = PromptInput { tokens: ctx.g.concat_rows(&toks), embed: ctx.g.concat_rows(&embs) };
            cache.insert(key, p);
            out.push(Some(p));
        }
        Ok(out)
    }

    /// Decoder embedding `F: [B, H/2, W/2, C_0]` of `x: [B, H, W, 1]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, sel: &[Option<PromptSelection>], opts: ForwardOpts) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        let [b, h, w, c] = <[usize; 4]>::try_from(shape.as_slice()).map_err(|_| Error::shape(format!("input rank of {shape:?}")))?;
        if c != 1 {
            return Err(Error::shape(format!("expected one input channel, got {c}")));
        }
        if sel.len() != b {
            return Err(Error::shape(format!("{} prompt selections for batch {b}", sel.len())));
        }
        let mult = self.input_multiple();
        if h % mult != 0 || w % mult != 0 {
            return Err(Error::Geometry(format!("input {h}x{w} is not divisible by {mult}")));
        }
        let none: Vec<Option<PromptSelection>> = vec![None; b];
        let sel = if opts.prompts { sel } else { &none[..] };
        let cfg = &self.config;
        let blocks = self.blocks();
        let mut cache = HashMap::new();
        let mut run_block = |this: &Self, ctx: &mut Ctx, idx: usize, y: Var| -> Result<Var> {
            let info = &blocks[idx];
            let p1 = this.slot_prompts(ctx, sel, info.slots.0, &mut cache)?;
            let p2 = this.slot_prompts(ctx, sel, info.slots.1, &mut cache)?;
            let s = PmaShape { channels: info.channels, heads: cfg.heads, bias_channels: cfg.bias_channels, window: cfg.window_size };
            pswin_forward(ctx, &info.name, s, y, &p1, &p2, opts.adapters)
        };

        let mut y = self.conv_bn_act(ctx, "enc0.embed", "enc0.embed_bn", x, cfg.patch_stride)?;
        y = run_block(self, ctx, 0, y)?;
        let mut skips = vec![y];
        for l in 1..cfg.levels {
            y = self.conv_bn_act(ctx, &format!("enc{l}.down"), &format!("enc{l}.down_bn"), y, 2)?;
            y = run_block(self, ctx, l, y)?;
            skips.push(y);
        }
        for (k, l) in (0..cfg.levels - 1).rev().enumerate() {
            let skip = skips[l];
            let ss = ctx.g.shape(skip).to_vec();
            let up = ctx.g.resize_bilinear(y, ss[1], ss[2]);
            let cat = ctx.g.concat_last(up, skip);
            y = self.conv_bn_act(ctx, &format!("dec{l}.fuse"), &format!("dec{l}.fuse_bn"), cat, 1)?;
            y = run_block(self, ctx, cfg.levels + k, y)?;
        }
        Ok(y)
    }

    /// Per-sample class scores `[H·W, M]` at input resolution `(h, w)`, before
    /// the softmax over classes.
    pub fn head(&self, ctx: &mut Ctx, f: Var, sel: &[PromptSelection], out_hw: (usize, usize), opts: ForwardOpts) -> Result<Vec<Var>> {
        let shape = ctx.g.shape(f).to_vec();
        let [b, fh, fw, c] = <[usize; 4]>::try_from(shape.as_slice()).map_err(|_| Error::shape("embedding rank"))?;
        if sel.len() != b {
            return Err(Error::shape(format!("{} selections for batch {b}", sel.len())));
        }
        let n = fh * fw;
        let rows = ctx.g.reshape(f, &[b * n, c]);
        let cfg = &self.config;
        let mut out = Vec::with_capacity(b);
        for (i, s) in sel.iter().enumerate() {
            let fi = ctx.g.gather_rows(rows, seghead::sample_rows(i, n), &[n, c]);
            let scores = if opts.fixed_head {
                let (wn, bn) = head_names(&s.task);
                let (wv, bv) = (ctx.p(&wn)?, ctx.p(&bn)?);
                let full = ctx.g.linear(fi, wv, Some(bv));
                let idx: Rc<Vec<usize>> = Rc::new(s.banks.clone());
                // Keep only the selected classes.
                let m_all = self.task(&s.task)?.n_classes();
                let gather: Vec<usize> = (0..n).flat_map(|r| idx.iter().map(move |&m| r * m_all + m)).collect();
                ctx.g.gather_elems(full, Rc::new(gather), &[n, s.banks.len()])
            } else {
                let toks: Vec<Var> = s.banks.iter().map(|&m| ctx.p(&seg_name(&s.task, m))).collect::<Result<_>>()?;
                let p = ctx.g.concat_rows(&toks);
                seghead::similarity_scores(ctx.g, fi, p, cfg.tokens_per_class, cfg.aggregation, cfg.tau_agg, cfg.topk)?
            };
            let m = s.banks.len();
            let grid = ctx.g.reshape(scores, &[1, fh, fw, m]);
            let up = ctx.g.resize_bilinear(grid, out_hw.0, out_hw.1);
            out.push(ctx.g.reshape(up, &[out_hw.0 * out_hw.1, m]));
        }
        Ok(out)
    }

    /// Folds recorded batch statistics into the running buffers.
    pub fn update_bn_buffers(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        for (prefix, mean, var) in stats {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let name = format!("{prefix}.{suffix}");
                let cur = self.params.buffer(&name)?.data().to_vec();
                let next = cur.iter().zip(batch.iter()).map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b).collect();
                self.params.set_buffer(&name, next)?;
            }
        }
        Ok(())
    }
}

/// Which parameters a scheme may update. Prompt and head parameters are
/// limited to `tasks`.
pub fn freeze_policy(model: &PUNet, scheme: Scheme, tasks: &[&str]) -> TrainableMask {
    let owned = |name: &str| {
        tasks.iter().any(|t| name.starts_with(&format!("prompt.{t}.")) || name.starts_with(&format!("head.{t}.")))
    };
    TrainableMask::from_fn(&model.params, |e| {
        let tokens = matches!(e.role, Role::PromptToken | Role::SegToken) && owned(&e.name);
        let prompt_bias = (e.role == Role::PromptBiasEmbed && owned(&e.name)) || e.role == Role::PromptBiasWeight;
        let bias = matches!(e.role, Role::Bias | Role::Norm);
        let head = e.role == Role::FixedHead && owned(&e.name);
        match scheme {
            Scheme::Fixed => head,
            Scheme::Bias => bias,
            Scheme::PromptNoBias => tokens,
            Scheme::Prompt => tokens || prompt_bias,
            Scheme::BiasPlusPrompt => bias || tokens || prompt_bias,
            Scheme::Adapter => e.role == Role::Adapter,
            Scheme::Decoder => e.role.is_backbone() && e.name.starts_with("dec"),
            Scheme::Full => true,
            Scheme::FullFixed => e.role.is_backbone() || head,
        }
    })
}
