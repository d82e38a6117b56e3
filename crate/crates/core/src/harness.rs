//! Two-phase training (P1 pretraining, P2 adaptation), evaluation and the
//! scheme × annotation-budget ablation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bind::{Ctx, NormMode};
use crate::checkpoint::architecture_conflict;
use crate::config::{ExperimentConfig, Scheme};
use crate::data::{augment_weak, remap_mask, AugPolicy, Dataset, Slice, Split, View};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{aggregate, assd, dsc, Dims, EvalReport, MetricRow};
use crate::optim::{one_cycle, OptimKind, Optimizer};
use crate::params::{ema_update, TrainableMask};
use crate::punet::{freeze_policy, ForwardOpts, PUNet};
use crate::seghead::{select_prompts, PromptSelection, PromptTask};
use crate::selfsup::{
    assign, batch_rows, cluster, correspondence, cpa_student_term, embed_grid, gather_targets, make_views, subsample_grid, subsample_indices,
    ClusterParams,
};
use crate::supervise::{class_weights, focal_loss, ClassWeights};
use crate::tensor::Tensor;

/// Task holding the P1 segmentation classes.
pub const GROUP_A_TASK: &str = "a";
/// Task holding the P2 adaptation classes.
pub const GROUP_B_TASK: &str = "b";

const RNG_STREAM_P1: u64 = 1;
const RNG_STREAM_P2: u64 = 2;

/// P1 training variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pretraining {
    Joint,
    Seg,
    #[serde(rename = "self")]
    SelfSup,
    Random,
}

impl Pretraining {
    pub const ALL: [Pretraining; 4] = [Pretraining::Joint, Pretraining::Seg, Pretraining::SelfSup, Pretraining::Random];

    pub fn name(self) -> &'static str {
        match self {
            Pretraining::Joint => "joint",
            Pretraining::Seg => "seg",
            Pretraining::SelfSup => "self",
            Pretraining::Random => "random",
        }
    }
}

impl FromStr for Pretraining {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Pretraining::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::Unknown { kind: "pretraining", name: s.to_string() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    P1,
    P2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    OneCycle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase: Phase,
    pub cpa: bool,
    pub focal: bool,
    pub prompts: bool,
    /// Dataset labels trained in this phase.
    pub classes: Vec<u8>,
    pub scheme: Option<Scheme>,
    pub steps: usize,
    pub schedule: Schedule,
}

impl PhasePlan {
    pub fn p1(kind: Pretraining, cfg: &ExperimentConfig, classes: &[u8]) -> Self {
        let (cpa, focal) = match kind {
            Pretraining::Joint => (true, true),
            Pretraining::Seg => (false, true),
            Pretraining::SelfSup => (true, false),
            Pretraining::Random => (false, false),
        };
        let steps = if kind == Pretraining::Random { 0 } else { cfg.p1_steps() };
        PhasePlan { phase: Phase::P1, cpa, focal, prompts: focal, classes: classes.to_vec(), scheme: None, steps, schedule: Schedule::Constant }
    }

    pub fn p2(scheme: Scheme, cfg: &ExperimentConfig, classes: &[u8]) -> Self {
        PhasePlan {
            phase: Phase::P2,
            cpa: false,
            focal: true,
            prompts: !scheme.uses_fixed_head(),
            classes: classes.to_vec(),
            scheme: Some(scheme),
            steps: cfg.p2_steps(),
            schedule: Schedule::OneCycle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.contains(&0) {
            return Err(Error::Invalid(format!("plan classes {:?} must be non-empty foreground labels", self.classes)));
        }
        let mut sorted = self.classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(Error::Invalid(format!("plan classes {:?} repeat a label", self.classes)));
        }
        match self.phase {
            Phase::P1 => {
                if self.focal && !self.prompts {
                    return Err(Error::Invalid("segmentation loss in P1 requires prompt insertion".into()));
                }
                if self.scheme.is_some() {
                    return Err(Error::Invalid("P1 plans carry no adaptation scheme".into()));
                }
            }
            Phase::P2 => {
                if self.cpa || !self.focal {
                    return Err(Error::Invalid("P2 trains with the focal loss only".into()));
                }
                let Some(s) = self.scheme else {
                    return Err(Error::Invalid("P2 plan needs a scheme".into()));
                };
                if self.prompts == s.uses_fixed_head() {
                    return Err(Error::Invalid(format!("scheme {} and prompt insertion disagree", s.name())));
                }
            }
        }
        Ok(())
    }
}

/// Losses of one step; absent terms were not active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub focal: Option<f64>,
    pub cpa: Option<f64>,
    pub total: f64,
    pub lr_scale: f64,
}

pub struct Pretrained {
    pub student: PUNet,
    pub teacher: PUNet,
    pub log: Vec<StepLog>,
}

pub struct Adapted {
    pub model: PUNet,
    pub mask: TrainableMask,
    pub log: Vec<StepLog>,
    /// Checksum of the frozen parameters before and after training.
    pub frozen_checksum: (String, String),
}

/// Subjects of the training split that P2 may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Budget {
    Subjects(usize),
    All,
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Subjects(n) => write!(f, "{n}"),
            Budget::All => f.write_str("all"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Budget::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Budget::Subjects(n)),
            _ => Err(Error::Invalid(format!("budget `{s}` is neither a positive subject count nor `all`"))),
        }
    }
}

impl Budget {
    /// The first `n` training subjects in id order.
    pub fn subjects(self, ds: &Dataset) -> Result<Vec<usize>> {
        let train = ds.subjects_in(Split::Train);
        match self {
            Budget::All => Ok(train),
            Budget::Subjects(n) if n <= train.len() => Ok(train[..n].to_vec()),
            Budget::Subjects(n) => Err(Error::Invalid(format!("budget of {n} subjects exceeds the {} training subjects", train.len()))),
        }
    }
}

fn stack(views: &[&[f64]], h: usize, w: usize) -> Result<Tensor> {
    Tensor::new(&[views.len(), h, w, 1], views.iter().flat_map(|v| v.iter().copied()).collect())
}

fn to_f64(img: &[f32]) -> Vec<f64> {
    img.iter().map(|&v| v as f64).collect()
}

/// Labels of the source mask at every view pixel (nearest neighbour).
pub fn view_labels(mask: &[u8], size: (usize, usize), view: &View) -> Vec<u8> {
    let (h, w) = size;
    view.grid()
        .points
        .iter()
        .map(|p| {
            let x = p[0].round().clamp(0.0, (w - 1) as f64) as usize;
            let y = p[1].round().clamp(0.0, (h - 1) as f64) as usize;
            mask[y * w + x]
        })
        .collect()
}

/// Class weights of `[background, labels…]` over remapped training masks.
fn task_weights(slices: &[&Slice], labels: &[u8]) -> Result<ClassWeights> {
    let mut lut = vec![0];
    lut.extend_from_slice(labels);
    let masks: Vec<Vec<u8>> = slices.iter().map(|s| remap_mask(&s.mask, &lut)).collect();
    let refs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    let banks: Vec<u8> = (0..=labels.len() as u8).collect();
    class_weights(&refs, &banks)
}

/// One sample's segmentation target: its prompt selection, bank-indexed
/// labels and matching class weights.
struct SegTarget {
    sel: PromptSelection,
    lut: Vec<u8>,
    alpha: ClassWeights,
}

fn sample_target(task: &PromptTask, weights: &ClassWeights, rng: &mut ChaCha8Rng) -> Result<SegTarget> {
    let n = task.labels.len();
    let k = rng.random_range(1..=n);
    let mut picked: Vec<usize> = (0..n).collect();
    picked.shuffle(rng);
    picked.truncate(k);
    picked.sort_unstable();
    let classes: Vec<u8> = picked.iter().map(|&i| task.labels[i]).collect();
    full_target(task, weights, Some(&classes))
}

fn full_target(task: &PromptTask, weights: &ClassWeights, classes: Option<&[u8]>) -> Result<SegTarget> {
    let sel = select_prompts(std::slice::from_ref(task), &task.name, classes)?;
    let mut lut = vec![0u8; 256];
    let mut alpha = Vec::with_capacity(sel.banks.len());
    for (pos, &bank) in sel.banks.iter().enumerate() {
        alpha.push(weights.0[bank]);
        if bank > 0 {
            lut[task.labels[bank - 1] as usize] = pos as u8;
        }
    }
    Ok(SegTarget { sel, lut, alpha: ClassWeights(alpha) })
}

fn check_finite(step: usize, log: &StepLog) -> Result<()> {
    if log.total.is_finite() {
        return Ok(());
    }
    Err(Error::Numeric(format!("non-finite loss at step {step}: focal {:?}, cpa {:?}, total {}", log.focal, log.cpa, log.total)))
}

/// Teacher embedding of a batch of views, as plain values `[B, h, w, C]`.
fn teacher_embedding(teacher: &PUNet, views: &[&[f64]], size: usize, sel: &[Option<PromptSelection>], opts: ForwardOpts) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let mut ctx = Ctx::new(&mut g, &teacher.params, None, NormMode::Batch);
    let x = ctx.g.input(stack(views, size, size)?);
    let f = teacher.forward(&mut ctx, x, sel, opts)?;
    Ok(g.value(f).clone())
}

/// Phase 1: trains a fresh student and its EMA teacher on the classes of
/// `plan` with the active losses.
pub fn pretrain_p1(cfg: &ExperimentConfig, ds: &Dataset, plan: &PhasePlan) -> Result<Pretrained> {
    cfg.validate()?;
    plan.validate()?;
    if plan.phase != Phase::P1 {
        return Err(Error::Invalid("pretrain_p1 needs a P1 plan".into()));
    }
    let mut student = PUNet::build(cfg)?;
    let task = PromptTask::multiclass(GROUP_A_TASK, plan.classes.clone());
    student.add_task(task.clone(), cfg.seed ^ 0xa11)?;
    let mut teacher = student.clone();
    let mut log = Vec::with_capacity(plan.steps);
    if plan.steps == 0 {
        return Ok(Pretrained { student, teacher, log });
    }

    let train = ds.split_slices(Split::Train);
    if train.is_empty() {
        return Err(Error::Dataset("no training slices".into()));
    }
    let size = (ds.spec.image_size, ds.spec.image_size);
    let weights = if plan.focal { task_weights(&train, &plan.classes)? } else { ClassWeights::uniform(task.n_classes()) };
    let images: Vec<Vec<f64>> = train.iter().map(|s| to_f64(&s.image)).collect();
    let mask = TrainableMask::all(&student.params, true);
    let mut opt = Optimizer::new(OptimKind::AdamW, cfg.lr_net, cfg.lr_prompt, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(RNG_STREAM_P1);
    let opts = if plan.prompts { ForwardOpts::prompted() } else { ForwardOpts::plain() };
    let cp = ClusterParams::from_config(cfg);
    let c = cfg.out_channels();
    let stride = cfg.patch_stride;
    let b = cfg.batch_size;

    for step in 0..plan.steps {
        let mut triplets = Vec::with_capacity(b);
        let mut picks = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        for _ in 0..b {
            let i = rng.random_range(0..train.len());
            triplets.push(make_views(&images[i], size, cfg, &mut rng)?);
            picks.push(i);
            if plan.focal {
                targets.push(sample_target(&task, &weights, &mut rng)?);
            }
        }
        let sels: Vec<Option<PromptSelection>> =
            if plan.prompts { targets.iter().map(|t| Some(t.sel.clone())).collect() } else { vec![None; b] };

        // Teacher: prototypes and assignments on the ×2 subsampled embedding.
        let mut teach = Vec::new();
        if plan.cpa {
            let tviews: Vec<&[f64]> = triplets.iter().map(|t| t.teacher.image.as_slice()).collect();
            let ft = teacher_embedding(&teacher, &tviews, cfg.teacher_fov, &sels, opts)?;
            let (th, tw) = (ft.shape()[1], ft.shape()[2]);
            let n = th * tw;
            for (bi, tr) in triplets.iter().enumerate() {
                let values = &ft.data()[bi * n * c..(bi + 1) * n * c];
                let grid = embed_grid(&tr.teacher.grid(), stride)?;
                let bank = cluster(values, &grid, c, cp)?;
                let idx = subsample_indices(th, tw, (0, 0));
                let sub: Vec<f64> = idx.iter().flat_map(|&p| values[p * c..(p + 1) * c].iter().copied()).collect();
                let phi = assign(&sub, c, &bank, cfg.tau_teacher)?;
                teach.push((bank, phi, subsample_grid(&grid, (0, 0))));
            }
        }

        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &student.params, Some(&mask), NormMode::Train);
        let mut focal_terms: Vec<Var> = Vec::new();
        let mut cpa_terms: Vec<Var> = Vec::new();
        for sv in 0..2 {
            let fov = triplets[0].students[sv].h;
            let views: Vec<&[f64]> = triplets.iter().map(|t| t.students[sv].image.as_slice()).collect();
            let x = ctx.g.input(stack(&views, fov, fov)?);
            let f = student.forward(&mut ctx, x, &sels, opts)?;
            let fs = ctx.g.shape(f).to_vec();
            let (sh, sw) = (fs[1], fs[2]);
            if plan.cpa {
                let rows = ctx.g.reshape(f, &[b * sh * sw, c]);
                for (bi, tr) in triplets.iter().enumerate() {
                    let (bank, phi, tgrid) = &teach[bi];
                    let offset = (rng.random_range(0..2), rng.random_range(0..2));
                    let idx = subsample_indices(sh, sw, offset);
                    let fr = ctx.g.gather_rows(rows, batch_rows(bi, sh * sw, &idx), &[idx.len(), c]);
                    let sgrid = subsample_grid(&embed_grid(&tr.students[sv].grid(), stride)?, offset);
                    let corr = correspondence(&sgrid, tgrid);
                    let t = gather_targets(phi, bank.len(), &corr);
                    cpa_terms.push(cpa_student_term(ctx.g, fr, bank, cfg.tau_student, &t)?);
                }
            }
            if plan.focal {
                let heads: Vec<PromptSelection> = targets.iter().map(|t| t.sel.clone()).collect();
                let scores = student.head(&mut ctx, f, &heads, (fov, fov), opts)?;
                for (bi, tr) in triplets.iter().enumerate() {
                    let sl = train[picks[bi]];
                    let tg = &targets[bi];
                    let labels: Vec<u8> = view_labels(&sl.mask, size, &tr.students[sv]).iter().map(|&l| tg.lut[l as usize]).collect();
                    focal_terms.push(focal_loss(ctx.g, scores[bi], &labels, &tg.alpha, cfg.focal_gamma)?);
                }
            }
        }

        let mut total: Option<Var> = None;
        let mut entry = StepLog { step, focal: None, cpa: None, total: 0.0, lr_scale: 1.0 };
        let mut add = |g: &mut Graph, terms: &[Var], scale: f64| -> Option<f64> {
            if terms.is_empty() {
                return None;
            }
            let rows: Vec<Var> = terms.iter().map(|&t| g.reshape(t, &[1, 1])).collect();
            let parts = g.concat_rows(&rows);
            let mean = g.mean(parts);
            let value = g.value(mean).item();
            let weighted = g.scale(mean, scale);
            total = Some(match total {
                Some(t) => g.add(t, weighted),
                None => weighted,
            });
            Some(value)
        };
        // Mean over both students equals ½ Σ_n of the per-student means.
        entry.focal = add(ctx.g, &focal_terms, cfg.loss_weight_seg);
        entry.cpa = add(ctx.g, &cpa_terms, cfg.loss_weight_cpa);
        let total = total.ok_or_else(|| Error::Invalid("plan has no active loss".into()))?;
        entry.total = ctx.g.value(total).item();
        check_finite(step, &entry)?;
        ctx.g.backward(total);
        let grads = ctx.grads();
        let stats = std::mem::take(&mut ctx.bn_stats);
        drop(ctx);
        drop(g);
        opt.step(&mut student.params, &grads, &mask, 1.0)?;
        student.update_bn_buffers(&stats)?;
        ema_update(&mut teacher.params, &student.params, cfg.ema_momentum)?;
        log.push(entry);
    }
    student.params.all_finite().map_err(|name| Error::Numeric(format!("parameter `{name}` became non-finite")))?;
    Ok(Pretrained { student, teacher, log })
}

/// Phase 2: registers fresh prompts for the plan's classes on a copy of
/// `pretrained` and trains the scheme's trainable subset with the focal loss
/// on the first `budget` training subjects.
pub fn adapt_p2(pretrained: &PUNet, cfg: &ExperimentConfig, ds: &Dataset, plan: &PhasePlan, budget: Budget) -> Result<Adapted> {
    cfg.validate()?;
    plan.validate()?;
    let scheme = match (plan.phase, plan.scheme) {
        (Phase::P2, Some(s)) => s,
        _ => return Err(Error::Invalid("adapt_p2 needs a P2 plan".into())),
    };
    if let Some(key) = architecture_conflict(&pretrained.config, cfg) {
        return Err(Error::Checkpoint(format!("pretrained model conflicts with the configuration on `{key}`")));
    }
    if let Some(seen) = pretrained.tasks.iter().flat_map(|t| t.labels.iter()).find(|l| plan.classes.contains(l)) {
        return Err(Error::Invalid(format!("class {seen} was already trained in phase 1")));
    }
    let mut model = pretrained.clone();
    let task = PromptTask::multiclass(GROUP_B_TASK, plan.classes.clone());
    model.add_task(task.clone(), cfg.seed ^ 0xb22)?;
    let mask = freeze_policy(&model, scheme, &[GROUP_B_TASK]);
    let before = mask.frozen_checksum(&model.params);

    let subjects = budget.subjects(ds)?;
    let train = ds.slices_of(&subjects);
    if train.is_empty() {
        return Err(Error::Dataset("no training slices in the budget".into()));
    }
    let weights = task_weights(&train, &plan.classes)?;
    let target = full_target(&task, &weights, None)?;
    let images: Vec<Vec<f64>> = train.iter().map(|s| to_f64(&s.image)).collect();
    let size = ds.spec.image_size;
    let fov = cfg.teacher_fov.min(size);
    let opts = ForwardOpts::for_scheme(scheme);
    let weak = AugPolicy::weak();
    let mut opt = Optimizer::new(OptimKind::Adam, cfg.lr_net_p2, cfg.lr_prompt_p2, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(RNG_STREAM_P2);
    let b = cfg.batch_size;
    let mut log = Vec::with_capacity(plan.steps);

    for step in 0..plan.steps {
        let lr_scale = match plan.schedule {
            Schedule::OneCycle => one_cycle(step, plan.steps),
            Schedule::Constant => 1.0,
        };
        let mut views = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let i = rng.random_range(0..train.len());
            let half = (fov as f64 - 1.0) / 2.0;
            let center = [
                rng.random_range(0..=size - fov) as f64 + half,
                rng.random_range(0..=size - fov) as f64 + half,
            ];
            let v = augment_weak(&images[i], (size, size), (fov, fov), center, &weak, &mut rng);
            labels.push(view_labels(&train[i].mask, (size, size), &v).iter().map(|&l| target.lut[l as usize]).collect::<Vec<u8>>());
            views.push(v);
        }
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &model.params, Some(&mask), NormMode::Train);
        let imgs: Vec<&[f64]> = views.iter().map(|v| v.image.as_slice()).collect();
        let x = ctx.g.input(stack(&imgs, fov, fov)?);
        let sels = vec![Some(target.sel.clone()); b];
        let f = model.forward(&mut ctx, x, &sels, opts)?;
        let scores = model.head(&mut ctx, f, &vec![target.sel.clone(); b], (fov, fov), opts)?;
        let mut terms = Vec::with_capacity(b);
        for (s, l) in scores.iter().zip(&labels) {
            let t = focal_loss(ctx.g, *s, l, &target.alpha, cfg.focal_gamma)?;
            terms.push(ctx.g.reshape(t, &[1, 1]));
        }
        let cat = ctx.g.concat_rows(&terms);
        let loss = ctx.g.mean(cat);
        let value = ctx.g.value(loss).item();
        let entry = StepLog { step, focal: Some(value), cpa: None, total: value, lr_scale };
        check_finite(step, &entry)?;
        ctx.g.backward(loss);
        let grads = ctx.grads();
        let stats = std::mem::take(&mut ctx.bn_stats);
        drop(ctx);
        drop(g);
        opt.step(&mut model.params, &grads, &mask, lr_scale)?;
        model.update_bn_buffers(&stats)?;
        log.push(entry);
    }
    let after = mask.frozen_checksum(&model.params);
    if after != before {
        return Err(Error::Invalid(format!("scheme {} changed frozen parameters", scheme.name())));
    }
    Ok(Adapted { model, mask, log, frozen_checksum: (before, after) })
}

/// Per-pixel labels predicted for `slices` (all `size × size`).
pub fn predict(model: &PUNet, task: &str, slices: &[&Slice], size: usize, opts: ForwardOpts) -> Result<Vec<Vec<u8>>> {
    let t = model.task(task)?.clone();
    let sel = model.select(task)?;
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(8) {
        let imgs: Vec<Vec<f64>> = chunk.iter().map(|s| to_f64(&s.image)).collect();
        let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
        let mut g = Graph::no_grad();
        let mut ctx = Ctx::new(&mut g, &model.params, None, NormMode::Eval);
        let x = ctx.g.input(stack(&refs, size, size)?);
        let sels = vec![Some(sel.clone()); chunk.len()];
        let f = model.forward(&mut ctx, x, &sels, opts)?;
        let scores = model.head(&mut ctx, f, &vec![sel.clone(); chunk.len()], (size, size), opts)?;
        for s in scores {
            let v = ctx.g.value(s);
            let m = v.last_dim();
            out.push(
                v.data()
                    .chunks(m)
                    .map(|row| {
                        let best = row.iter().enumerate().fold(0, |bi, (i, &x)| if x > row[bi] { i } else { bi });
                        let bank = sel.banks[best];
                        if bank == 0 { 0 } else { t.labels[bank - 1] }
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// DSC and ASSD per (subject, class) of `task` on `split`, computed on each
/// subject's stacked slices.
pub fn evaluate(model: &PUNet, ds: &Dataset, task: &str, scheme: Scheme, budget: &str, split: Split) -> Result<EvalReport> {
    let labels = model.task(task)?.labels.clone();
    let size = ds.spec.image_size;
    let opts = ForwardOpts::for_scheme(scheme);
    let mut rows = Vec::new();
    for subject in ds.subjects_in(split) {
        let slices = ds.slices_of(&[subject]);
        let pred = predict(model, task, &slices, size, opts)?;
        let pred: Vec<u8> = pred.concat();
        let gt: Vec<u8> = slices.iter().flat_map(|s| s.mask.iter().copied()).collect();
        let dims = Dims { d: slices.len(), h: size, w: size };
        for &l in &labels {
            let p: Vec<bool> = pred.iter().map(|&v| v == l).collect();
            let q: Vec<bool> = gt.iter().map(|&v| v == l).collect();
            rows.push(MetricRow {
                scheme: scheme.name().to_string(),
                budget: budget.to_string(),
                subject,
                class: l,
                dsc: 100.0 * dsc(&p, &q)?,
                assd: assd(&p, &q, dims, [1.0, 1.0, 1.0])?,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!("no subjects in the {split:?} split")));
    }
    Ok(aggregate(rows))
}

/// One adapted and evaluated (scheme, budget) cell.
pub struct Cell {
    pub scheme: Scheme,
    pub budget: Budget,
    pub report: EvalReport,
    pub log: Vec<StepLog>,
}

/// Adapts `pretrained` under every scheme and budget with pinned seeds and
/// evaluates each on the test split.
/// `steps` overrides the configured P2 step count.
pub fn ablate(
    pretrained: &PUNet,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    classes: &[u8],
    schemes: &[Scheme],
    budgets: &[Budget],
    steps: Option<usize>,
) -> Result<Vec<Cell>> {
    if schemes.is_empty() || budgets.is_empty() {
        return Err(Error::Invalid("ablation needs at least one scheme and one budget".into()));
    }
    for &bu in budgets {
        bu.subjects(ds)?;
    }
    for &s in schemes {
        PhasePlan::p2(s, cfg, classes).validate()?;
    }
    let mut out = Vec::with_capacity(schemes.len() * budgets.len());
    for &scheme in schemes {
        for &budget in budgets {
            let mut plan = PhasePlan::p2(scheme, cfg, classes);
            if let Some(n) = steps {
                plan.steps = n;
            }
            let adapted = adapt_p2(pretrained, cfg, ds, &plan, budget)?;
            let report = evaluate(&adapted.model, ds, GROUP_B_TASK, scheme, &budget.to_string(), Split::Test)?;
            out.push(Cell { scheme, budget, report, log: adapted.log });
        }
    }
    Ok(out)
}

/// Teacher-view similarity heatmap for one student query pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SimMap {
    pub h: usize,
    pub w: usize,
    /// Cosine similarity per teacher embedding cell, row-major.
    pub values: Vec<f64>,
    /// Teacher cell closest to the query in the shared image frame.
    pub match_cell: (usize, usize),
}

fn embedding(model: &PUNet, view: &View) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let mut ctx = Ctx::new(&mut g, &model.params, None, NormMode::Eval);
    let x = ctx.g.input(stack(&[view.image.as_slice()], view.h, view.w)?);
    let f = model.forward(&mut ctx, x, &[None], ForwardOpts::plain())?;
    Ok(g.value(f).clone())
}

/// Cosine similarity of the first student's embedding at `query` (a pixel of
/// that student view) against every cell of the teacher embedding.
pub fn simmap(student: &PUNet, teacher: &PUNet, views: &crate::selfsup::ViewTriplet, query: (usize, usize)) -> Result<SimMap> {
    let sv = &views.students[0];
    if query.0 >= sv.h || query.1 >= sv.w {
        return Err(Error::Invalid(format!("query {query:?} lies outside the {}x{} student view", sv.h, sv.w)));
    }
    let stride = student.config.patch_stride;
    let c = student.config.out_channels();
    let fs = embedding(student, sv)?;
    let ft = embedding(teacher, &views.teacher)?;
    let sw = fs.shape()[2];
    let cell = (query.0 / stride) * sw + query.1 / stride;
    let q = &fs.data()[cell * c..(cell + 1) * c];
    let values = crate::selfsup::similarity_map(q, ft.data(), c);
    let (th, tw) = (ft.shape()[1], ft.shape()[2]);
    let sgrid = embed_grid(&sv.grid(), stride)?;
    let tgrid = embed_grid(&views.teacher.grid(), stride)?;
    let probe = crate::windowing::Grid { h: 1, w: 1, points: vec![sgrid.points[cell]] };
    let m = correspondence(&probe, &tgrid)[0];
    Ok(SimMap { h: th, w: tw, values, match_cell: (m / tw, m % tw) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, PhantomSpec};

    fn small() -> (ExperimentConfig, Dataset) {
        let mut spec = PhantomSpec::toy();
        spec.subjects = 5;
        spec.slices_per_subject = 2;
        let ds = generate(&spec, 3).unwrap();
        let cfg = ExperimentConfig { batch_size: 2, ..ExperimentConfig::toy() };
        (cfg, ds)
    }

    #[test]
    fn plans_follow_the_variants() {
        let cfg = ExperimentConfig::toy();
        let j = PhasePlan::p1(Pretraining::Joint, &cfg, &[1, 2]);
        assert!(j.cpa && j.focal && j.prompts && j.steps == cfg.p1_steps());
        let s = PhasePlan::p1(Pretraining::SelfSup, &cfg, &[1]);
        assert!(s.cpa && !s.focal && !s.prompts);
        assert_eq!(PhasePlan::p1(Pretraining::Random, &cfg, &[1]).steps, 0);
        let mut bad = j.clone();
        bad.prompts = false;
        assert!(bad.validate().is_err());
        let mut p2 = PhasePlan::p2(Scheme::Prompt, &cfg, &[4]);
        p2.validate().unwrap();
        p2.cpa = true;
        assert!(p2.validate().is_err());
        assert!(!PhasePlan::p2(Scheme::Fixed, &cfg, &[4]).prompts);
        assert_eq!("self".parse::<Pretraining>().unwrap(), Pretraining::SelfSup);
        assert!("selfish".parse::<Pretraining>().is_err());
    }

    #[test]
    fn budgets_parse_and_select() {
        let (_, ds) = small();
        assert_eq!("all".parse::<Budget>().unwrap(), Budget::All);
        assert_eq!("2".parse::<Budget>().unwrap(), Budget::Subjects(2));
        assert!("0".parse::<Budget>().is_err());
        let train = ds.subjects_in(Split::Train);
        assert_eq!(Budget::Subjects(2).subjects(&ds).unwrap(), train[..2].to_vec());
        assert!(Budget::Subjects(99).subjects(&ds).is_err());
    }

    #[test]
    fn random_pretraining_is_the_initialisation() {
        let (cfg, ds) = small();
        let p = pretrain_p1(&cfg, &ds, &PhasePlan::p1(Pretraining::Random, &cfg, &[1, 2, 3])).unwrap();
        let mut init = PUNet::build(&cfg).unwrap();
        init.add_task(PromptTask::multiclass(GROUP_A_TASK, vec![1, 2, 3]), cfg.seed ^ 0xa11).unwrap();
        assert_eq!(p.student.params.checksum(|_| true), init.params.checksum(|_| true));
        assert!(p.log.is_empty());
    }

    #[test]
    fn joint_steps_log_both_losses_and_move_the_teacher_by_ema_only() {
        let (cfg, ds) = small();
        let mut plan = PhasePlan::p1(Pretraining::Joint, &cfg, &[1, 2, 3]);
        plan.steps = 2;
        let p = pretrain_p1(&cfg, &ds, &plan).unwrap();
        assert_eq!(p.log.len(), 2);
        for e in &p.log {
            let (f, c) = (e.focal.unwrap(), e.cpa.unwrap());
            assert!((e.total - (cfg.loss_weight_seg * f + cfg.loss_weight_cpa * c)).abs() < 1e-9 * e.total.abs().max(1.0));
        }
        // Teacher = EMA of the student sequence, so it lies strictly between.
        let init = pretrain_p1(&cfg, &ds, &PhasePlan::p1(Pretraining::Random, &cfg, &[1, 2, 3])).unwrap().student;
        let name = "enc0.embed.weight";
        let (t0, s, t) = (init.params.get(name).unwrap(), p.student.params.get(name).unwrap(), p.teacher.params.get(name).unwrap());
        assert_ne!(t.data(), t0.data());
        assert_ne!(t.data(), s.data());
        let again = pretrain_p1(&cfg, &ds, &plan).unwrap();
        assert_eq!(again.log, p.log);
    }

    #[test]
    fn adaptation_respects_the_freeze_contract() {
        let (cfg, ds) = small();
        let base = pretrain_p1(&cfg, &ds, &PhasePlan::p1(Pretraining::Random, &cfg, &[1, 2, 3])).unwrap().student;
        for scheme in [Scheme::Prompt, Scheme::Fixed, Scheme::Full] {
            let mut plan = PhasePlan::p2(scheme, &cfg, &[4, 5]);
            plan.steps = 2;
            let a = adapt_p2(&base, &cfg, &ds, &plan, Budget::Subjects(1)).unwrap();
            assert_eq!(a.frozen_checksum.0, a.frozen_checksum.1);
            let backbone = |m: &PUNet| m.params.checksum(|e| e.role.is_backbone());
            assert_eq!(backbone(&a.model) == backbone(&base), scheme != Scheme::Full, "{scheme:?}");
        }
        let overlap = PhasePlan::p2(Scheme::Prompt, &cfg, &[3, 4]);
        assert!(adapt_p2(&base, &cfg, &ds, &overlap, Budget::All).is_err());
    }

    #[test]
    fn evaluation_rows_cover_subjects_and_classes() {
        let (cfg, ds) = small();
        let mut base = pretrain_p1(&cfg, &ds, &PhasePlan::p1(Pretraining::Random, &cfg, &[1, 2, 3])).unwrap().student;
        base.add_task(PromptTask::multiclass(GROUP_B_TASK, vec![4, 5, 6]), 1).unwrap();
        let r = evaluate(&base, &ds, GROUP_B_TASK, Scheme::Prompt, "all", Split::Test).unwrap();
        assert_eq!(r.rows.len(), ds.subjects_in(Split::Test).len() * 3);
        assert!(r.rows.iter().all(|row| (0.0..=100.0).contains(&row.dsc)));
    }
}
