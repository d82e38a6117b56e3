use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{GrayImage, Luma};
use punet_core::checkpoint::{load_model, load_prompts, read_metadata, save_model, save_prompts, Loaded};
use punet_core::data::{generate, read_dataset, write_dataset, Dataset, PhantomSpec, Split};
use punet_core::gradsuite::run_suite;
use punet_core::harness::{
    ablate, adapt_p2, evaluate, pretrain_p1, simmap, Budget, PhasePlan, Pretraining, StepLog, GROUP_B_TASK,
};
use punet_core::metrics::{paired_t_test, write_csv, MetricRow};
use punet_core::selfsup::make_views;
use punet_core::{ExperimentConfig, Scheme};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::provenance::Run;
use crate::{Cli, Command};

/// A check that ran but did not meet its numeric tolerance.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

pub fn dispatch(cli: &Cli, cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::GenerateData { spec } => generate_data(cfg, spec.as_deref(), out, run),
        Command::Pretrain { data, variant, steps } => pretrain(cfg, data, variant, *steps, out, run),
        Command::Adapt { data, checkpoint, scheme, budget, steps } => adapt(cfg, data, checkpoint, scheme.as_deref(), budget, *steps, out, run),
        Command::Eval { data, checkpoint, prompts, scheme, task, split } => {
            eval(cfg, data, checkpoint, prompts.as_deref(), scheme.as_deref(), task, split, out, run)
        }
        Command::Ablate { data, checkpoint, schemes, budgets, steps } => ablate_cmd(cfg, data, checkpoint, schemes, budgets, *steps, out, run),
        Command::Simmap { data, checkpoint, slice, row, col } => simmap_cmd(cfg, data, checkpoint, *slice, *row, *col, out, run),
        Command::Gradcheck { op } => gradcheck(op.as_deref(), out, run),
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn load_checkpoint(dir: &Path, cfg: &ExperimentConfig) -> Result<Loaded> {
    load_model(dir, Some(cfg)).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn write_losses(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "focal", "cpa", "total", "lr_scale"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
    for e in log {
        w.write_record([e.step.to_string(), opt(e.focal), opt(e.cpa), format!("{:.8}", e.total), format!("{:.8}", e.lr_scale)])?;
    }
    w.flush()?;
    Ok(())
}

fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_csv(File::create(path)?, rows)?;
    Ok(())
}

fn parse_schemes(list: &str) -> Result<Vec<Scheme>> {
    list.split(',').map(|s| s.trim().parse::<Scheme>().map_err(Into::into)).collect()
}

fn parse_budgets(list: &str) -> Result<Vec<Budget>> {
    list.split(',').map(|s| s.trim().parse::<Budget>().map_err(Into::into)).collect()
}

fn generate_data(cfg: &ExperimentConfig, spec: Option<&Path>, out: &Path, run: &mut Run) -> Result<()> {
    let spec = match spec {
        Some(p) => serde_json::from_str::<PhantomSpec>(&std::fs::read_to_string(p)?)
            .map_err(|e| punet_core::Error::ConfigParse(e.to_string()))?,
        None => PhantomSpec::toy(),
    };
    spec.validate()?;
    let ds = generate(&spec, cfg.seed)?;
    write_dataset(&ds, out)?;
    for f in ["meta.json", "images.bin", "masks.bin"] {
        run.output(out.join(f));
    }
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| ds.subjects_in(s).len());
    run.note("subjects", json!({ "train": counts[0], "val": counts[1], "test": counts[2] }));
    println!("wrote {} slices of {} subjects to {}", ds.slices.len(), ds.splits.len(), out.display());
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, data: &Path, variant: &str, steps: Option<usize>, out: &Path, run: &mut Run) -> Result<()> {
    let variant: Pretraining = variant.parse()?;
    let ds = load_data(data)?;
    let mut plan = PhasePlan::p1(variant, cfg, &ds.spec.group_a);
    if let (Some(n), true) = (steps, variant != Pretraining::Random) {
        plan.steps = n;
    }
    plan.validate()?;
    run.note("plan", serde_json::to_value(&plan)?);
    run.note("data_seed", json!(ds.seed));
    let pre = pretrain_p1(cfg, &ds, &plan)?;
    let ckpt = out.join("checkpoint");
    let meta = json!({ "phase": "p1", "variant": variant.name(), "steps": plan.steps, "data_seed": ds.seed });
    save_model(&ckpt, &pre.student, Some(&pre.teacher.params), meta)?;
    write_losses(&out.join("losses.csv"), &pre.log)?;
    run.output(ckpt);
    run.output(out.join("losses.csv"));
    if let Some(last) = pre.log.last() {
        println!("p1 {}: {} steps, final loss {:.5}", variant.name(), plan.steps, last.total);
    } else {
        println!("p1 {}: initialisation only", variant.name());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adapt(
    cfg: &ExperimentConfig,
    data: &Path,
    checkpoint: &Path,
    scheme: Option<&str>,
    budget: &str,
    steps: Option<usize>,
    out: &Path,
    run: &mut Run,
) -> Result<()> {
    let scheme: Scheme = scheme.map_or(Ok(cfg.scheme), str::parse)?;
    let budget: Budget = budget.parse()?;
    let ds = load_data(data)?;
    let loaded = load_checkpoint(checkpoint, cfg)?;
    let mut plan = PhasePlan::p2(scheme, cfg, &ds.spec.group_b);
    if let Some(n) = steps {
        plan.steps = n;
    }
    run.note("plan", serde_json::to_value(&plan)?);
    let a = adapt_p2(&loaded.model, cfg, &ds, &plan, budget)?;
    let ckpt = out.join("checkpoint");
    let meta = json!({ "phase": "p2", "scheme": scheme.name(), "budget": budget.to_string(), "pretrained": loaded.metadata });
    save_model(&ckpt, &a.model, None, meta.clone())?;
    save_prompts(&out.join("prompts"), &a.model, &[GROUP_B_TASK], meta)?;
    write_losses(&out.join("losses.csv"), &a.log)?;
    run.note("trainable_parameters", json!(a.mask.trainable_count(&a.model.params)));
    run.note("frozen_checksum", json!(a.frozen_checksum.1));
    for p in ["checkpoint", "prompts", "losses.csv"] {
        run.output(out.join(p));
    }
    println!("p2 {} (budget {budget}): {} steps, final loss {:.5}", scheme.name(), plan.steps, a.log.last().map_or(f64::NAN, |e| e.total));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    cfg: &ExperimentConfig,
    data: &Path,
    checkpoint: &Path,
    prompts: Option<&Path>,
    scheme: Option<&str>,
    task: &str,
    split: &str,
    out: &Path,
    run: &mut Run,
) -> Result<()> {
    let split: Split = split.parse()?;
    let ds = load_data(data)?;
    let mut loaded = load_checkpoint(checkpoint, cfg)?;
    let mut meta = loaded.metadata.clone();
    if let Some(p) = prompts {
        let tasks = load_prompts(p, &mut loaded.model).with_context(|| format!("loading prompts {}", p.display()))?;
        run.note("prompt_tasks", json!(tasks));
        meta = read_metadata(p)?;
    }
    let from_meta = meta.get("scheme").and_then(|v| v.as_str()).map(str::to_string);
    let scheme: Scheme = match scheme.map(str::to_string).or(from_meta) {
        Some(s) => s.parse()?,
        None => cfg.scheme,
    };
    let budget = meta.get("budget").and_then(|v| v.as_str()).unwrap_or("-").to_string();
    let report = evaluate(&loaded.model, &ds, task, scheme, &budget, split)?;
    write_rows(&out.join("report.csv"), &report.rows)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
    run.output(out.join("report.csv"));
    run.output(out.join("summary.json"));
    run.note("dsc_mean", json!(report.dsc.mean));
    println!("{} on {split:?}: DSC {:.2} ± {:.2}, ASSD {:.3} ({} excluded)", scheme.name(), report.dsc.mean, report.dsc.std, report.assd.mean, report.assd_excluded);
    for c in &report.classes {
        println!("  class {}: DSC {:.2}, ASSD {:.3}", c.class, c.dsc.mean, c.assd.mean);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate_cmd(
    cfg: &ExperimentConfig,
    data: &Path,
    checkpoint: &Path,
    schemes: &str,
    budgets: &str,
    steps: Option<usize>,
    out: &Path,
    run: &mut Run,
) -> Result<()> {
    // Parse everything before any training starts.
    let schemes = parse_schemes(schemes)?;
    let budgets = parse_budgets(budgets)?;
    let ds = load_data(data)?;
    let loaded = load_checkpoint(checkpoint, cfg)?;
    let cells = ablate(&loaded.model, cfg, &ds, &ds.spec.group_b, &schemes, &budgets, steps)?;
    let rows: Vec<MetricRow> = cells.iter().flat_map(|c| c.report.rows.iter().cloned()).collect();
    write_rows(&out.join("ablation.csv"), &rows)?;
    let reference = |b: Budget| cells.iter().find(|c| c.scheme == Scheme::Prompt && c.budget == b);
    let mut summary = Vec::new();
    for c in &cells {
        let p = match reference(c.budget) {
            Some(r) if r.scheme != c.scheme => {
                let a: Vec<f64> = c.report.subject_dsc.iter().map(|x| x.1).collect();
                let b: Vec<f64> = r.report.subject_dsc.iter().map(|x| x.1).collect();
                paired_t_test(&a, &b).ok()
            }
            _ => None,
        };
        println!("{:>16} budget {:>3}: DSC {:6.2} ± {:5.2}", c.scheme.name(), c.budget.to_string(), c.report.dsc.mean, c.report.dsc.std);
        summary.push(json!({
            "scheme": c.scheme.name(),
            "budget": c.budget.to_string(),
            "dsc": c.report.dsc,
            "assd": c.report.assd,
            "p_vs_prompt": p,
        }));
    }
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    run.output(out.join("ablation.csv"));
    run.output(out.join("summary.json"));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simmap_cmd(
    cfg: &ExperimentConfig,
    data: &Path,
    checkpoint: &Path,
    slice: usize,
    row: Option<usize>,
    col: Option<usize>,
    out: &Path,
    run: &mut Run,
) -> Result<()> {
    let ds = load_data(data)?;
    let loaded = load_checkpoint(checkpoint, cfg)?;
    let test = ds.split_slices(Split::Test);
    let Some(sl) = test.get(slice) else {
        bail!(punet_core::Error::Invalid(format!("slice {slice} is outside the {} test slices", test.len())));
    };
    let img: Vec<f64> = sl.image.iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let views = make_views(&img, (ds.size(), ds.size()), &loaded.model.config, &mut rng)?;
    let half = views.students[0].h / 2;
    let query = (row.unwrap_or(half), col.unwrap_or(half));
    let teacher = match &loaded.teacher {
        Some(t) => {
            let mut m = loaded.model.clone();
            m.params = t.clone();
            m
        }
        None => loaded.model.clone(),
    };
    let map = simmap(&loaded.model, &teacher, &views, query)?;
    let mut w = csv::Writer::from_path(out.join("simmap.csv"))?;
    w.write_record(["row", "col", "similarity"])?;
    for (i, v) in map.values.iter().enumerate() {
        w.write_record([(i / map.w).to_string(), (i % map.w).to_string(), format!("{v:.8}")])?;
    }
    w.flush()?;
    let img = GrayImage::from_fn(map.w as u32, map.h as u32, |x, y| {
        let v = map.values[y as usize * map.w + x as usize];
        Luma([(((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(out.join("simmap.png")).context("writing simmap.png")?;
    run.note("query", json!(query));
    run.note("match_cell", json!(map.match_cell));
    run.output(out.join("simmap.csv"));
    run.output(out.join("simmap.png"));
    println!("query {query:?} -> teacher cell {:?} ({}x{} map)", map.match_cell, map.h, map.w);
    Ok(())
}

fn gradcheck(op: Option<&str>, out: &Path, run: &mut Run) -> Result<()> {
    let results = run_suite(op)?;
    std::fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&results)?)?;
    run.output(out.join("gradcheck.json"));
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<18} {:>10.3e} < {:.0e}  {}", r.op, r.report.max_rel_err, r.tolerance, if r.passed { "ok" } else { "FAIL" });
        if !r.passed {
            failed.push(r.op);
        }
    }
    run.note("cases", json!(results.len()));
    if !failed.is_empty() {
        return Err(NumericFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}
