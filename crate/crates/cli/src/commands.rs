use std::fs;
use std::path::PathBuf;

use log::{info, warn};
use serde::Serialize;

use kdc_core::data::generate_phantoms;
use kdc_core::distill::FdMethod;
use kdc_core::eval::{
    attention_residue_study, benchmark as time_forward, evaluate_input, evaluate_model, reconstruct, residue_map,
    wilcoxon_signed_rank, write_png_grid, write_slices_csv, write_summary_csv, BenchmarkReport, RealImage,
    SignificanceResult,
};
use kdc_core::experiments::{
    compare_fd as run_compare_fd, position_sweep as run_position_sweep, write_loss_curves, RunConfig, Task,
};
use kdc_core::kspace::generate_cartesian_mask;
use kdc_core::models::{build, Architecture, CascadeConfig};
use kdc_core::table::write_csv;
use kdc_core::training::{
    finetune_student, finetune_student_kd, load_checkpoint, pretrain_student_fd, train_ablation, train_student_at,
    train_student_plain, train_teacher, AblationCombo, CheckpointRecord, RunDir, TrainOutcome,
};

use crate::{
    BenchmarkArgs, CliError, CompareFdArgs, DataGenArgs, EvalArgs, MaskGenArgs, PositionSweepArgs, ResidueArgs,
    TrainArgs,
};

type CliResult = Result<(), CliError>;

pub fn mask_gen(a: &MaskGenArgs) -> CliResult {
    let center = a.center.unwrap_or_else(|| ((a.width as f64 * 0.08).round() as usize).max(1));
    let mask = generate_cartesian_mask(a.width, a.acc, center, a.sigma, a.seed)?;
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, mask.to_json()?)?;
    println!("{}: {} of {} lines, hash {}", a.out.display(), mask.sampled_lines(), a.width, mask.hash_hex());
    Ok(())
}

pub fn data_gen(a: &DataGenArgs) -> CliResult {
    let ds = generate_phantoms(a.count, a.size, a.seed)?;
    ds.write(&a.out)?;
    println!(
        "{}: {} train / {} val slices of {}x{}",
        a.out.display(),
        ds.manifest.counts.train,
        ds.manifest.counts.val,
        a.size,
        a.size
    );
    Ok(())
}

fn check_task(cfg: &RunConfig, sr: bool) -> CliResult {
    let is_sr = matches!(cfg.task, Task::SuperResolution { .. });
    if sr != is_sr {
        let want = if sr { "super-resolution" } else { "reconstruction" };
        return Err(CliError::usage(format!("config task does not match command: expected a {want} task")));
    }
    Ok(())
}

fn missing_key(key: &str) -> CliError {
    CliError::usage(format!("missing config key `{key}` (or the matching command-line flag)"))
}

fn load_teacher(cfg: &RunConfig) -> Result<CheckpointRecord, CliError> {
    let path = cfg.teacher_checkpoint.as_ref().ok_or_else(|| missing_key("teacher_checkpoint"))?;
    Ok(load_checkpoint(path)?)
}

/// Teacher from the config, or trained into `run` when none is given.
fn teacher_or_train(
    cfg: &RunConfig,
    run: &RunDir,
    data: &kdc_core::training::TrainingData,
) -> Result<CheckpointRecord, CliError> {
    match &cfg.teacher_checkpoint {
        Some(p) => Ok(load_checkpoint(p)?),
        None => {
            let t = train_teacher(&cfg.train, &cfg.teacher, data)?;
            run.save_outcome(&t)?;
            Ok(t.best)
        }
    }
}

fn open_run(cfg: &RunConfig, mask: Option<&kdc_core::kspace::SamplingMask>) -> Result<RunDir, CliError> {
    let run = RunDir::create(&cfg.out_dir)?;
    fs::write(run.root.join("config.json"), cfg.to_json()?)?;
    if let Some(m) = mask {
        fs::write(run.root.join("masks").join("mask.json"), m.to_json()?)?;
    }
    Ok(run)
}

pub fn train(a: &TrainArgs, sr: bool) -> CliResult {
    let cfg = a.config.resolve(sr)?;
    check_task(&cfg, sr)?;
    let prep = cfg.prepare()?;
    let data = &prep.data;
    let run = open_run(&cfg, prep.mask.as_ref())?;
    let t = &cfg.train;
    let outcomes: Vec<TrainOutcome> = match a.stage.as_str() {
        "teacher" => vec![train_teacher(t, &cfg.teacher, data)?],
        "student" => vec![train_student_plain(t, &cfg.student, data)?],
        "at" => vec![train_student_at(t, &cfg.student, &load_teacher(&cfg)?, data)?],
        "kd" => {
            let teacher = load_teacher(&cfg)?;
            let init = cfg.init_checkpoint.as_ref().map(|p| load_checkpoint(p)).transpose()?;
            vec![finetune_student_kd(t, &cfg.student, &teacher, init.as_ref(), data)?]
        }
        s if s.starts_with("fd:") => {
            let method = FdMethod::parse(&s[3..])?;
            let teacher = load_teacher(&cfg)?;
            let pre = pretrain_student_fd(t, &cfg.student, &teacher, method, data)?;
            let ft = finetune_student(t, &pre.best, data)?;
            vec![pre, ft]
        }
        s if s.starts_with("ablate:") => {
            let combo = AblationCombo::parse(&s[7..])?;
            train_ablation(t, combo, &cfg.student, &load_teacher(&cfg)?, data)?
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown stage {other:?} (expected teacher, student, at, kd, fd:<method> or ablate:<combo>)"
            )))
        }
    };
    for o in &outcomes {
        run.save_outcome(o)?;
        println!(
            "{}: {} epochs, final val loss {:e}, best epoch {} -> {}",
            o.last.stage,
            o.last.epoch,
            o.last.final_val_loss().unwrap_or(f64::NAN),
            o.best.epoch,
            run.best_checkpoint_path(o.last.stage).display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct Comparison<'a> {
    reference: &'a str,
    model: &'a str,
    metric: &'static str,
    result: Option<SignificanceResult>,
    error: Option<String>,
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    models: Vec<&'a kdc_core::eval::MetricsSummary>,
    significance: Vec<Comparison<'a>>,
}

fn unique_name(names: &[String], base: String) -> String {
    if !names.contains(&base) {
        return base;
    }
    (2..).map(|i| format!("{base}-{i}")).find(|n| !names.contains(n)).expect("unbounded")
}

pub fn eval(a: &EvalArgs, sr: bool) -> CliResult {
    let cfg = a.config.resolve(sr)?;
    check_task(&cfg, sr)?;
    let prep = cfg.prepare()?;
    let data = &prep.data;
    let ckpts: Vec<CheckpointRecord> = a.ckpts.iter().map(|p| load_checkpoint(p)).collect::<Result<_, _>>()?;
    for (c, p) in ckpts.iter().zip(&a.ckpts) {
        if matches!(c.params.arch, Architecture::Vdsr(_)) != sr {
            return Err(CliError::usage(format!("{} does not match the task of this command", p.display())));
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let baseline = if sr { "interpolated" } else { "zero-filled" };
    let mut reports = vec![evaluate_input(baseline, data)?];
    let mut names: Vec<String> = vec![baseline.to_string()];
    for c in &ckpts {
        let name = unique_name(&names, c.stage.tag());
        reports.push(evaluate_model(&name, &c.params, data)?);
        names.push(name);
    }
    write_summary_csv(&cfg.out_dir.join("metrics.csv"), &reports)?;
    write_slices_csv(&cfg.out_dir.join("metrics_slices.csv"), &reports)?;

    // every model against the first checkpoint (or the input baseline)
    let reference = if reports.len() > 2 { 1 } else { 0 };
    let mut significance = Vec::new();
    for (i, r) in reports.iter().enumerate().skip(1) {
        if i == reference {
            continue;
        }
        let refr = &reports[reference];
        for (metric, x, y) in [
            ("psnr", r.psnr_values(), refr.psnr_values()),
            ("ssim", r.slices.iter().map(|s| s.ssim).collect(), refr.slices.iter().map(|s| s.ssim).collect()),
        ] {
            let res = wilcoxon_signed_rank(&x, &y, 0.05);
            significance.push(Comparison {
                reference: &refr.summary.model,
                model: &r.summary.model,
                metric,
                error: res.as_ref().err().map(|e| e.to_string()),
                result: res.ok(),
            });
        }
    }
    let summary = EvalSummary { models: reports.iter().map(|r| &r.summary).collect(), significance };
    fs::write(
        cfg.out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&summary).map_err(kdc_core::Error::from)?,
    )?;

    // input, target, each model, then each model's residue
    let first = &data.val[..1];
    let (h, w) = (data.height, data.width);
    let target = RealImage::magnitude_of(h, w, &first[0].target)?;
    let mut panels = vec![RealImage::magnitude_of(h, w, &first[0].input)?, target.clone()];
    let mut residues = Vec::new();
    for c in &ckpts {
        let out = reconstruct(&c.params, data, first)?;
        let img = RealImage::magnitude_of(h, w, &out[0])?;
        residues.push(residue_map(&img, &target)?);
        panels.push(img);
    }
    let columns = panels.len();
    panels.extend(residues);
    write_png_grid(&cfg.out_dir.join("qualitative.png"), &panels, columns)?;

    for r in &reports {
        println!(
            "{:<16} PSNR {:.3} ± {:.3} dB  SSIM {:.4} ± {:.4}",
            r.summary.model, r.summary.psnr_mean, r.summary.psnr_std, r.summary.ssim_mean, r.summary.ssim_std
        );
    }
    Ok(())
}

pub fn compare_fd(a: &CompareFdArgs) -> CliResult {
    let cfg = a.config.resolve(false)?;
    let methods: Vec<FdMethod> = a.methods.split(',').map(|m| FdMethod::parse(m.trim())).collect::<Result<_, _>>()?;
    let prep = cfg.prepare()?;
    let data = &prep.data;
    let run = open_run(&cfg, prep.mask.as_ref())?;
    let teacher = teacher_or_train(&cfg, &run, data)?;
    let plain = train_student_plain(&cfg.train, &cfg.student, data)?;
    run.save_outcome(&plain)?;
    let runs = run_compare_fd(&cfg, data, &teacher, &methods, None)?;

    let mut curves: Vec<(String, &[kdc_core::training::EpochRecord])> =
        vec![("teacher".into(), &teacher.history), ("student".into(), plain.history())];
    for r in &runs {
        run.save_outcome(&r.pretrain)?;
        run.save_outcome(&r.finetune)?;
        curves.push((r.method.name().into(), r.finetune.history()));
    }
    write_loss_curves(&run.root.join("fd_val_loss.csv"), &curves)?;

    let mut reports = vec![
        evaluate_input("zero-filled", data)?,
        evaluate_model("teacher", &teacher.params, data)?,
        evaluate_model("student", &plain.best.params, data)?,
    ];
    let mut finals =
        vec![vec!["student".to_string(), format!("{:e}", plain.last.final_val_loss().unwrap_or(f64::NAN))]];
    for r in &runs {
        reports.push(evaluate_model(r.method.name(), &r.finetune.best.params, data)?);
        finals.push(vec![r.method.name().to_string(), format!("{:e}", r.final_val_loss())]);
        println!("{:<4} final val loss {:e}", r.method.name(), r.final_val_loss());
    }
    write_csv(&run.root.join("fd_final_loss.csv"), &["method", "final_val_loss"], finals)?;
    write_summary_csv(&run.root.join("fd_metrics.csv"), &reports)?;
    write_slices_csv(&run.root.join("fd_metrics_slices.csv"), &reports)?;
    Ok(())
}

pub fn position_sweep(a: &PositionSweepArgs) -> CliResult {
    let cfg = a.config.resolve(false)?;
    let prep = cfg.prepare()?;
    let data = &prep.data;
    let run = open_run(&cfg, prep.mask.as_ref())?;
    let teacher = teacher_or_train(&cfg, &run, data)?;
    let positions: Vec<(usize, usize)> =
        a.teacher_layer.iter().flat_map(|&t| a.student_layer.iter().map(move |&s| (t, s))).collect();
    let results = run_position_sweep(&cfg, data, &teacher, &positions)?;
    for r in &results {
        println!(
            "teacher conv {} / student conv {}: PSNR {:.3} SSIM {:.4}",
            r.teacher_conv, r.student_conv, r.psnr, r.ssim
        );
    }
    write_csv(
        &run.root.join("position_sweep.csv"),
        &["teacher_conv", "student_conv", "final_val_loss", "psnr", "ssim"],
        results.iter().map(|r| {
            vec![
                r.teacher_conv.to_string(),
                r.student_conv.to_string(),
                format!("{:e}", r.val_loss),
                format!("{:.4}", r.psnr),
                format!("{:.5}", r.ssim),
            ]
        }),
    )?;
    Ok(())
}

pub fn residue_study(a: &ResidueArgs) -> CliResult {
    let cfg = a.config.resolve(false)?;
    let teacher = load_teacher(&cfg)?;
    let student = load_checkpoint(&a.student_ckpt)?;
    let kd = load_checkpoint(&a.kd_ckpt)?;
    let prep = cfg.prepare()?;
    let study = attention_residue_study(&teacher.params, &student.params, &kd.params, &prep.data)?;
    fs::create_dir_all(&cfg.out_dir)?;
    study.write_csv(&cfg.out_dir.join("residues.csv"))?;
    study.write_summary_csv(&cfg.out_dir.join("residues_summary.csv"))?;
    study.write_images(&cfg.out_dir.join("residues"))?;
    for c in 1..=study.cascades {
        println!(
            "cascade {c}: median residue student {:.4e}, kd-student {:.4e}",
            study.median("student", c),
            study.median("kd-student", c)
        );
    }
    Ok(())
}

pub fn benchmark(a: &BenchmarkArgs) -> CliResult {
    let models: Vec<(String, kdc_core::models::NetworkParameters<f32>)> = if a.ckpts.is_empty() {
        vec![
            ("teacher".into(), build(&Architecture::DcCnn(CascadeConfig::teacher()), 0)?),
            ("student".into(), build(&Architecture::DcCnn(CascadeConfig::student()), 0)?),
        ]
    } else {
        a.ckpts
            .iter()
            .map(|p| Ok((p.display().to_string(), load_checkpoint(p)?.params)))
            .collect::<Result<_, CliError>>()?
    };
    let out_dir = a
        .out
        .clone()
        .or_else(|| std::env::var("KDC_OUT_DIR").ok().filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/benchmark"));
    fs::create_dir_all(&out_dir)?;
    let mut reports: Vec<(String, BenchmarkReport)> = Vec::new();
    for (name, params) in models {
        info!("timing {name}");
        reports.push((name, time_forward(&params, a.size, a.size, a.repeats)?));
    }
    for (name, r) in &reports {
        println!("{name}: {} parameters, median forward {:.2} ms", r.param_count, r.median_forward_seconds * 1e3);
    }
    write_csv(
        &out_dir.join("benchmark.csv"),
        &["model", "param_count", "height", "width", "repeats", "median_forward_seconds"],
        reports.iter().map(|(name, r)| {
            vec![
                name.clone(),
                r.param_count.to_string(),
                r.height.to_string(),
                r.width.to_string(),
                r.repeats.to_string(),
                format!("{:.6e}", r.median_forward_seconds),
            ]
        }),
    )?;
    fs::write(out_dir.join("benchmark.json"), serde_json::to_string_pretty(&reports).map_err(kdc_core::Error::from)?)?;
    if let [(_, t), (_, s)] = reports.as_slice() {
        let ratio = s.median_forward_seconds / t.median_forward_seconds;
        if ratio >= 1.0 {
            warn!("second model is not faster than the first");
        }
        println!("time ratio (second / first): {ratio:.3}");
    }
    Ok(())
}
