//! Command implementations.

use crate::{Command, CommonArgs, MethodArg, Precision};
use ptd_core::checkpoint::MaskedCheckpoint;
use ptd_core::config::PipelineConfig;
use ptd_core::data::{LabeledDataset, Split};
use ptd_core::error::{Error, Result};
use ptd_core::losses::smoothness_report;
use ptd_core::prune::{
    iterations_for_target, iterative_prune_lr_rewind, synflow_prune, PruneMethod, PruneReport,
};
use ptd_core::report;
use ptd_core::student::{census, solve_student_channels};
use ptd_core::tensor::Scalar;
use ptd_core::threads::Parallelism;
use ptd_core::train::{agreement, distill, evaluate, finetune, train, Init, RunReport};
use ptd_core::verify;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common } => with_seeds(common, |ctx| run_precision!(ctx, cmd_train)),
        Command::Prune {
            common,
            checkpoint,
            target_sparsity,
            method,
        } => with_seeds(common, move |ctx| {
            let args = PruneArgs {
                checkpoint: checkpoint.clone(),
                target_sparsity,
                method,
            };
            match ctx.precision {
                Precision::F32 => cmd_prune::<f32>(ctx, &args),
                Precision::F64 => cmd_prune::<f64>(ctx, &args),
            }
        }),
        Command::MakeStudent { common, checkpoint } => with_seeds(common, move |ctx| {
            cmd_make_student(ctx, &checkpoint)
        }),
        Command::Distill {
            common,
            teacher,
            student,
        } => with_seeds(common, move |ctx| match ctx.precision {
            Precision::F32 => cmd_distill::<f32>(ctx, &teacher, student.as_deref()),
            Precision::F64 => cmd_distill::<f64>(ctx, &teacher, student.as_deref()),
        }),
        Command::Eval {
            common,
            checkpoint,
            teacher,
        } => with_seeds(common, move |ctx| match ctx.precision {
            Precision::F32 => cmd_eval::<f32>(ctx, &checkpoint, teacher.as_deref()),
            Precision::F64 => cmd_eval::<f64>(ctx, &checkpoint, teacher.as_deref()),
        }),
        Command::Verify { common } => with_seeds(common, cmd_verify),
        Command::Report { out, dirs } => cmd_report(&out, &dirs),
    }
}

macro_rules! run_precision {
    ($ctx:expr, $f:ident) => {
        match $ctx.precision {
            Precision::F32 => $f::<f32>($ctx),
            Precision::F64 => $f::<f64>($ctx),
        }
    };
}
use run_precision;

/// Everything one seeded run needs.
pub struct RunContext {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub par: Parallelism,
    pub precision: Precision,
}

impl RunContext {
    fn load_data(&self) -> Result<LabeledDataset> {
        self.config.data.load(&self.base_dir, self.seed)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(path, e))
    }

    fn write_resolved_config(&self) -> Result<()> {
        let resolved = self.config.with_seed(self.seed);
        self.write("config.json", &format!("{}\n", resolved.to_json_pretty()))
    }

    fn eval_batch(&self) -> usize {
        self.config.data.eval_batch_size
    }
}

/// Run `f` once per seed (the plain path is a single seed). Multi-seed runs
/// land in `out/seed<N>/` and get a metrics summary with mean and std.
fn with_seeds(common: CommonArgs, f: impl Fn(&RunContext) -> Result<()>) -> Result<()> {
    let config = PipelineConfig::load(&common.config)?;
    let base_dir = common
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let par = Parallelism::resolve(common.deterministic);
    let seeds: Vec<u64> = match (&common.seeds, common.seed) {
        (Some(list), _) if !list.is_empty() => list.clone(),
        (_, Some(s)) => vec![s],
        _ => vec![config.seed],
    };
    let multi = seeds.len() > 1;
    let mut all_metrics: Vec<(u64, BTreeMap<String, f64>)> = Vec::new();
    for &seed in &seeds {
        let out = if multi {
            common.out.join(format!("seed{seed}"))
        } else {
            common.out.clone()
        };
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let ctx = RunContext {
            config: config.clone(),
            base_dir: base_dir.clone(),
            out,
            seed,
            par,
            precision: common.precision,
        };
        f(&ctx)?;
        if multi {
            if let Ok(m) = read_metrics(&ctx.out.join("metrics.csv")) {
                all_metrics.push((seed, m));
            }
        }
    }
    if multi {
        let summary = summarize(&all_metrics);
        let path = common.out.join("summary.csv");
        std::fs::write(&path, summary).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_metrics(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        if let Some((k, v)) = line.split_once(',') {
            if let Ok(val) = v.parse::<f64>() {
                out.insert(k.to_string(), val);
            }
        }
    }
    Ok(out)
}

fn summarize(rows: &[(u64, BTreeMap<String, f64>)]) -> String {
    use std::fmt::Write;
    let mut keys: Vec<&String> = rows
        .iter()
        .flat_map(|(_, m)| m.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    keys.sort();
    let mut out = String::from("metric");
    for (seed, _) in rows {
        write!(out, ",seed{seed}").expect("write");
    }
    out.push_str(",mean,std\n");
    for key in keys {
        write!(out, "{key}").expect("write");
        let mut vals = Vec::new();
        for (_, m) in rows {
            match m.get(key) {
                Some(v) => {
                    vals.push(*v);
                    write!(out, ",{v}").expect("write");
                }
                None => out.push(','),
            }
        }
        let (mean, std) = report::mean_std(&vals);
        writeln!(out, ",{mean},{std}").expect("write");
    }
    out
}

fn train_section(ctx: &RunContext) -> Result<ptd_core::train::TrainConfig> {
    let mut cfg = ctx
        .config
        .train
        .clone()
        .ok_or_else(|| Error::Config("config has no [train] section".into()))?;
    cfg.seed = ctx.seed;
    Ok(cfg)
}

fn write_run_outputs<T: Scalar>(
    ctx: &RunContext,
    ckpt: &MaskedCheckpoint<T>,
    run: &RunReport,
    extra: BTreeMap<String, f64>,
) -> Result<()> {
    let mut metrics = ckpt.metrics.clone();
    metrics.insert("sparsity".into(), ckpt.sparsity());
    metrics.insert("best_epoch".into(), ckpt.epoch as f64);
    metrics.extend(extra);
    ckpt.save(&ctx.out.join("checkpoint.ptdl"))?;
    ctx.write("report.csv", &report::run_report_csv(run))?;
    ctx.write("metrics.csv", &report::metrics_csv(&metrics))?;
    ctx.write_resolved_config()?;
    Ok(())
}

fn test_metrics<T: Scalar>(
    ctx: &RunContext,
    ckpt: &MaskedCheckpoint<T>,
    data: &LabeledDataset,
) -> Result<BTreeMap<String, f64>> {
    let mut extra = BTreeMap::new();
    if !data.test_idx.is_empty() {
        let acc = evaluate(ckpt, data, Split::Test, ctx.eval_batch(), &ctx.par)?;
        extra.insert("test_acc".into(), acc);
    }
    Ok(extra)
}

fn cmd_train<T: Scalar>(ctx: &RunContext) -> Result<()> {
    let data = ctx.load_data()?;
    let arch = ctx.config.arch.resolve(&ctx.base_dir)?;
    let tcfg = train_section(ctx)?;
    let (ckpt, run) = train::<T>(&arch, &data, &tcfg, Init::Fresh, &ctx.par)?;
    let extra = test_metrics(ctx, &ckpt, &data)?;
    write_run_outputs(ctx, &ckpt, &run, extra)?;
    println!(
        "trained {} for {} epochs: best val acc {:.4} (epoch {}), {:.1}s",
        arch.name,
        tcfg.epochs,
        run.best_val_acc().unwrap_or(f64::NAN),
        ckpt.epoch,
        run.wall_secs
    );
    Ok(())
}

pub struct PruneArgs {
    pub checkpoint: PathBuf,
    pub target_sparsity: Option<f64>,
    pub method: Option<MethodArg>,
}

fn cmd_prune<T: Scalar>(ctx: &RunContext, args: &PruneArgs) -> Result<()> {
    let data = ctx.load_data()?;
    let mut pcfg = ctx
        .config
        .prune
        .clone()
        .ok_or_else(|| Error::Config("config has no [prune] section".into()))?;
    if let Some(m) = args.method {
        pcfg.method = match m {
            MethodArg::LrRewind => PruneMethod::MagnitudeLrRewind,
            MethodArg::Synflow => PruneMethod::Synflow,
        };
    }
    let ckpt = MaskedCheckpoint::<T>::load(&args.checkpoint)?;
    let current = ckpt.sparsity();
    if let Some(t) = args.target_sparsity {
        if t < current {
            return Err(Error::Config(format!(
                "target sparsity {t:.4} is below the checkpoint's current {current:.4}"
            )));
        }
    }

    let (pruned, preport) = match pcfg.method {
        PruneMethod::MagnitudeLrRewind => {
            if let Some(t) = args.target_sparsity {
                pcfg.iterations = iterations_for_target(t, pcfg.rate_per_iteration)?;
            }
            iterative_prune_lr_rewind(ckpt, &pcfg, &data, &ctx.par)?
        }
        PruneMethod::Synflow => {
            let target = args
                .target_sparsity
                .unwrap_or_else(|| pcfg.sparsity_after(pcfg.iterations));
            let masks = synflow_prune(
                &ckpt.arch,
                &ckpt.params,
                target,
                pcfg.synflow_rounds,
                &ctx.par,
            )?;
            let mut pruned = ckpt;
            pruned.masks = masks;
            pruned.masks.apply(&mut pruned.params)?;
            let mut preport = PruneReport {
                masks_monotone: true,
                ..Default::default()
            };
            let achieved = pruned.masks.sparsity();
            let mut best_val_acc = f64::NAN;
            if pcfg.post_epochs > 0 {
                let ft = pcfg.finetune_config(ctx.seed);
                let (tuned, run) = finetune(pruned, &data, &ft, &ctx.par)?;
                pruned = tuned;
                best_val_acc = run.best_val_acc().unwrap_or(f64::NAN);
            }
            preport.iterations.push(ptd_core::prune::PruneIterationRow {
                iteration: 1,
                target_sparsity: target,
                achieved_sparsity: achieved,
                best_val_acc,
                finetune_epochs: pcfg.post_epochs,
            });
            (pruned, preport)
        }
    };

    let mut metrics = pruned.metrics.clone();
    metrics.insert("sparsity".into(), pruned.sparsity());
    metrics.extend(test_metrics(ctx, &pruned, &data)?);
    pruned.save(&ctx.out.join("checkpoint.ptdl"))?;
    ctx.write("prune_report.csv", &report::prune_report_csv(&preport))?;
    ctx.write("metrics.csv", &report::metrics_csv(&metrics))?;
    ctx.write_resolved_config()?;
    println!(
        "pruned to sparsity {:.4} over {} iteration(s)",
        pruned.sparsity(),
        preport.iterations.len()
    );
    Ok(())
}

fn cmd_make_student(ctx: &RunContext, checkpoint: &Path) -> Result<()> {
    let ckpt = MaskedCheckpoint::<f32>::load(checkpoint)?;
    let c = census(&ckpt)?;
    let plan = solve_student_channels(&ckpt.arch, &c)?;
    let section = ctx.config.student.clone().unwrap_or_default();
    let arch_json =
        serde_json::to_string_pretty(&plan.arch).map_err(|e| Error::Config(e.to_string()))?;
    ctx.write(&section.arch_out, &format!("{arch_json}\n"))?;
    ctx.write(&section.census_out, &report::census_csv(&plan))?;
    ctx.write_resolved_config()?;
    println!(
        "student {}: {} weights across {} solved layers (teacher kept {})",
        plan.arch.name,
        plan.total_weights,
        plan.channels.len(),
        c.total_nonzero()
    );
    Ok(())
}

fn cmd_distill<T: Scalar>(
    ctx: &RunContext,
    teacher_path: &Path,
    student_path: Option<&Path>,
) -> Result<()> {
    let data = ctx.load_data()?;
    let teacher = MaskedCheckpoint::<T>::load(teacher_path)?;
    let student_arch = match student_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let arch: ptd_core::arch::ArchitectureSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            arch.validate()?;
            arch
        }
        None => ctx.config.arch.resolve(&ctx.base_dir)?,
    };
    let section = ctx
        .config
        .distill
        .clone()
        .ok_or_else(|| Error::Config("config has no [distill] section".into()))?;
    let mut tcfg = section.schedule;
    tcfg.seed = ctx.seed;
    let (student, run) = distill::<T>(&student_arch, &teacher, &data, &section.kd, &tcfg, &ctx.par)?;
    let mut extra = test_metrics(ctx, &student, &data)?;
    if !data.test_idx.is_empty() {
        let agr = agreement(&student, &teacher, &data, Split::Test, ctx.eval_batch(), &ctx.par)?;
        extra.insert("agreement".into(), agr);
    }
    write_run_outputs(ctx, &student, &run, extra)?;
    println!(
        "distilled into {}: best val acc {:.4}, {:.1}s",
        student_arch.name,
        run.best_val_acc().unwrap_or(f64::NAN),
        run.wall_secs
    );
    Ok(())
}

fn cmd_eval<T: Scalar>(ctx: &RunContext, checkpoint: &Path, teacher: Option<&Path>) -> Result<()> {
    let data = ctx.load_data()?;
    let ckpt = MaskedCheckpoint::<T>::load(checkpoint)?;
    let split = if data.test_idx.is_empty() {
        Split::Val
    } else {
        Split::Test
    };
    let acc = evaluate(&ckpt, &data, split, ctx.eval_batch(), &ctx.par)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".to_string(), acc);
    metrics.insert("sparsity".to_string(), ckpt.sparsity());
    if let Some(tp) = teacher {
        let t = MaskedCheckpoint::<T>::load(tp)?;
        let agr = agreement(&ckpt, &t, &data, split, ctx.eval_batch(), &ctx.par)?;
        metrics.insert("agreement".to_string(), agr);
    }
    ctx.write("metrics.csv", &report::metrics_csv(&metrics))?;
    ctx.write_resolved_config()?;
    println!("accuracy {acc:.4} on {split:?} (sparsity {:.4})", ckpt.sparsity());
    Ok(())
}

fn cmd_verify(ctx: &RunContext) -> Result<()> {
    let mut checks = verify::run_structural_suite()?;
    if let Some(section) = &ctx.config.verify {
        if let (Some(a), Some(b)) = (&section.smoothness_a, &section.smoothness_b) {
            let abs = |p: &PathBuf| {
                if p.is_absolute() {
                    p.clone()
                } else {
                    ctx.base_dir.join(p)
                }
            };
            let data = ctx.load_data()?;
            let ca = MaskedCheckpoint::<f32>::load(&abs(a))?;
            let cb = MaskedCheckpoint::<f32>::load(&abs(b))?;
            let rep = smoothness_report(&ca, &cb, &data, Split::Train, ctx.eval_batch(), &ctx.par)?;
            ctx.write("smoothness.csv", &report::smoothness_csv(&rep))?;
            checks.push(verify::smoothness_check(&ca, &cb, &data, &ctx.par)?);
        }
    }
    ctx.write("verify_report.csv", &report::verify_csv(&checks))?;
    ctx.write_resolved_config()?;
    for c in &checks {
        println!(
            "{} {}: value {:.3e} (threshold {:.3e}) {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold,
            c.detail
        );
    }
    verify::all_passed(&checks)
}

fn cmd_report(out: &Path, dirs: &[PathBuf]) -> Result<()> {
    if dirs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let mut rows = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let metrics = read_metrics(&dir.join("metrics.csv"))?;
        rows.push((i as u64, metrics));
    }
    use std::fmt::Write;
    let mut text = String::from("run,dir");
    let keys: Vec<String> = rows
        .iter()
        .flat_map(|(_, m)| m.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    for k in &keys {
        write!(text, ",{k}").expect("write");
    }
    text.push('\n');
    for ((i, metrics), dir) in rows.iter().zip(dirs) {
        write!(text, "{i},{}", dir.display()).expect("write");
        for k in &keys {
            match metrics.get(k) {
                Some(v) => write!(text, ",{v}").expect("write"),
                None => text.push(','),
            }
        }
        text.push('\n');
    }
    write!(text, "mean,").expect("write");
    for k in &keys {
        let vals: Vec<f64> = rows.iter().filter_map(|(_, m)| m.get(k).copied()).collect();
        let (mean, _) = report::mean_std(&vals);
        write!(text, ",{mean}").expect("write");
    }
    text.push('\n');
    write!(text, "std,").expect("write");
    for k in &keys {
        let vals: Vec<f64> = rows.iter().filter_map(|(_, m)| m.get(k).copied()).collect();
        let (_, std) = report::mean_std(&vals);
        write!(text, ",{std}").expect("write");
    }
    text.push('\n');
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
    println!("aggregated {} run(s) into {}", dirs.len(), out.display());
    Ok(())
}
