use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use csamoe::backbone::Preset;
use csamoe::data::{load_dataset, manifest_csv, stratified_split, synth_generate, Split, SplitSpec, SyntheticSpec};
use csamoe::gradcheck::{check_model, check_ops, GradcheckConfig, OpReport};
use csamoe::metrics::{
    aggregate_runs, evaluate, format_summary, metrics_csv, roc_csv, summary_csv, MetricsReport, DEFAULT_THRESHOLD,
};
use csamoe::moe::{count_flops, count_params, Breakdown, CsaMoeModel, ModelConfig, Variant};
use csamoe::train::{csa_trace_csv, epoch_log_csv, fit, predict, TrainConfig};

use crate::checkpoint::Checkpoint;
use crate::config::{capped_workers, CliConfig};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.csmn";

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}

pub fn synth(out: &Path, per_class: usize, size: usize, seed: u64) -> CliResult<()> {
    let spec = SyntheticSpec { per_class, size, seed };
    let samples = synth_generate(&spec, out).map_err(|e| match e {
        csamoe::Error::Codec { path, message } => {
            CliError::Usage(format!("cannot write {}: {message}", path.display()))
        }
        other => other.into(),
    })?;
    println!("wrote {} samples ({size}x{size}) to {}", samples.len(), out.display());
    Ok(())
}

/// Model parameter and MAC totals of the three reference rows, in millions
/// and billions.
pub fn reference_counts(variant: Variant) -> (f64, f64) {
    match variant {
        Variant::Resnet18 => (11.178, 1.824),
        Variant::ResnetMoe => (33.958, 5.471),
        Variant::CsaMoe => (34.820, 5.472),
    }
}

fn log_header(cfg: &ModelConfig) -> String {
    let params = count_params(cfg).total;
    let macs = count_flops(cfg).total;
    let dropped = cfg.dropped.map_or("none", |e| e.as_str());
    format!(
        "variant={} preset={} dropped={dropped} threshold={DEFAULT_THRESHOLD}\nparams={params} ({:.3}M) macs={macs} ({:.3}G)\n",
        cfg.variant,
        cfg.backbone.preset.as_str(),
        params as f64 / 1e6,
        macs as f64 / 1e9
    )
}

fn load_split(data: &Path, preset: Preset, split_seed: u64) -> CliResult<Split> {
    let size = ModelConfig::for_preset(preset, Variant::Resnet18).backbone.input_size;
    let samples = load_dataset(data, (size.1, size.0))?;
    let spec = SplitSpec {
        seed: split_seed,
        ..SplitSpec::default()
    };
    Ok(stratified_split(samples, &spec)?)
}

fn test_metrics(model: &mut CsaMoeModel, split: &Split, part: &str, cfg: &TrainConfig) -> CliResult<(MetricsReport, String)> {
    let samples = match part {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => return Err(CliError::Usage(format!("unknown part `{other}` (expected train, val or test)"))),
    };
    let preds = predict(model, samples, cfg.batch_size, cfg.workers)?;
    let (report, roc) = evaluate(&preds.scores, &preds.labels, DEFAULT_THRESHOLD)?;
    if report.precision_undefined {
        log::warn!("{part}: no positive predictions at threshold {DEFAULT_THRESHOLD}; precision reported as 0");
    }
    if report.recall_undefined {
        log::warn!("{part}: no positive labels; recall reported as 0");
    }
    Ok((report, roc_csv(&roc.points)))
}

pub struct TrainOverrides {
    pub variant: Option<Variant>,
    pub dropped: Option<Option<csamoe::moe::Expert>>,
    pub runs: Option<usize>,
    pub seed_base: Option<u64>,
}

pub fn train(config_path: &Path, overrides: TrainOverrides) -> CliResult<Vec<MetricsReport>> {
    let mut cfg = CliConfig::load(config_path)?;
    if let Some(v) = overrides.variant {
        cfg.train.variant = v;
    }
    if let Some(d) = overrides.dropped {
        cfg.train.dropped = d;
    }
    if let Some(r) = overrides.runs {
        cfg.runs = r;
    }
    if let Some(s) = overrides.seed_base {
        cfg.train.seed = s;
    }
    cfg.train.workers = capped_workers(cfg.train.workers)?;
    cfg.validate()?;
    train_with(&cfg)
}

pub fn train_with(cfg: &CliConfig) -> CliResult<Vec<MetricsReport>> {
    let model_cfg = cfg.train.model_config()?;
    create_dir(&cfg.out)?;
    let header = log_header(&model_cfg);
    eprint!("{header}");
    write(&cfg.out.join("train.log"), &header)?;

    let split = load_split(&cfg.data, cfg.train.preset, cfg.split_seed)?;
    write(&cfg.out.join("manifest.csv"), &manifest_csv(&split))?;
    log::info!(
        "split: {} train, {} val, {} test",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    let mut rows = Vec::new();
    for run in 0..cfg.runs {
        let train_cfg = TrainConfig {
            seed: cfg.train.seed + run as u64,
            ..cfg.train.clone()
        };
        let dir = cfg.out.join(format!("run{run}"));
        create_dir(&dir)?;
        log::info!("run {run}: seed {}", train_cfg.seed);
        let result = fit(&train_cfg, &split)?;
        write(&dir.join("epoch_log.csv"), &epoch_log_csv(&result.logs))?;
        write(&dir.join("csa_trace.csv"), &csa_trace_csv(&result.traces))?;
        Checkpoint::from_params(result.model.params()).save(&dir.join(CHECKPOINT_FILE))?;
        let mut model = result.model;
        let (report, roc) = test_metrics(&mut model, &split, "test", &train_cfg)?;
        write(&dir.join("roc_points.csv"), &roc)?;
        eprintln!(
            "run {run}: best epoch {} (val acc {:.4}), test acc {:.4}, auc {:.4}",
            result.best_epoch, result.best_val_accuracy, report.accuracy, report.auc
        );
        rows.push((format!("run{run}"), report));
    }
    write(&cfg.out.join("metrics.csv"), &metrics_csv(&rows))?;
    let reports: Vec<MetricsReport> = rows.into_iter().map(|(_, r)| r).collect();
    let agg = aggregate_runs(&reports)?;
    write(&cfg.out.join("metrics_summary.csv"), &summary_csv(&agg))?;
    println!("{}", format_summary(&agg));
    Ok(reports)
}

pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub part: String,
    pub out: Option<PathBuf>,
    pub split_seed: u64,
    pub variant: Option<Variant>,
    pub preset: Option<Preset>,
    pub batch_size: usize,
}

pub fn eval(opts: &EvalOptions) -> CliResult<MetricsReport> {
    let ckpt = Checkpoint::load(&opts.checkpoint)?;
    let mut model = ckpt.to_model()?;
    let mc = model.config().clone();
    if opts.variant.is_some_and(|v| v != mc.variant) || opts.preset.is_some_and(|p| p != mc.backbone.preset) {
        return Err(CliError::Artifact(format!(
            "checkpoint holds a {} {} model",
            mc.backbone.preset.as_str(),
            mc.variant
        )));
    }
    let split = load_split(&opts.data, mc.backbone.preset, opts.split_seed)?;
    let train_cfg = TrainConfig {
        batch_size: opts.batch_size,
        workers: capped_workers(4)?,
        ..TrainConfig::default()
    };
    let (report, roc) = test_metrics(&mut model, &split, &opts.part, &train_cfg)?;
    let out = match &opts.out {
        Some(dir) => dir.clone(),
        None => opts.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    create_dir(&out)?;
    write(
        &out.join(format!("eval_{}_metrics.csv", opts.part)),
        &metrics_csv(&[(opts.part.clone(), report)]),
    )?;
    write(&out.join(format!("eval_{}_roc.csv", opts.part)), &roc)?;
    println!(
        "{} on {} ({} samples, threshold {}): acc {:.4} precision {:.4} recall {:.4} f1 {:.4} auc {:.4}",
        mc.variant, opts.part, report.n, report.threshold, report.accuracy, report.precision, report.recall, report.f1, report.auc
    );
    Ok(report)
}

fn breakdown_table(out: &mut String, title: &str, b: &Breakdown) {
    let _ = writeln!(out, "{title}");
    for (name, n) in &b.components {
        let _ = writeln!(out, "  {name:<28} {n:>14}");
    }
    let _ = writeln!(out, "  {:<28} {:>14}", "total", b.total);
}

/// Parameter and MAC tables with the reference totals alongside.
pub fn count_report(variant: Variant, preset: Preset) -> String {
    let cfg = ModelConfig::for_preset(preset, variant);
    let params = count_params(&cfg);
    let macs = count_flops(&cfg);
    let mut out = format!("{variant} ({} preset)\n", preset.as_str());
    breakdown_table(&mut out, "parameters", &params);
    breakdown_table(&mut out, "multiply-accumulates per image", &macs);
    let _ = writeln!(out, "\n{:<12} {:>12} {:>12} {:>10}", "", "params(M)", "reference", "deviation");
    let (ref_p, ref_f) = reference_counts(variant);
    let row = |name: &str, ours: f64, reference: f64| {
        if preset == Preset::Full {
            format!("{name:<12} {ours:>12.3} {reference:>12.3} {:>+9.2}%\n", (ours / reference - 1.0) * 100.0)
        } else {
            format!("{name:<12} {ours:>12.3} {:>12} {:>10}\n", "-", "-")
        }
    };
    out.push_str(&row("params(M)", params.total as f64 / 1e6, ref_p));
    out.push_str(&row("MACs(G)", macs.total as f64 / 1e9, ref_f));
    if variant == Variant::CsaMoe {
        let base = ModelConfig::for_preset(preset, Variant::ResnetMoe);
        let _ = writeln!(
            out,
            "attention increment: {} params, {} MACs",
            params.total - count_params(&base).total,
            macs.total - count_flops(&base).total
        );
    }
    out
}

pub fn count(variant: Variant, preset: Preset) -> CliResult<()> {
    print!("{}", count_report(variant, preset));
    Ok(())
}

pub fn gradcheck_reports(cfg: &GradcheckConfig) -> CliResult<Vec<OpReport>> {
    let mut reports = check_ops(cfg)?;
    for variant in Variant::ALL {
        reports.push(check_model(cfg, variant)?);
    }
    Ok(reports)
}

pub fn gradcheck(cfg: &GradcheckConfig) -> CliResult<()> {
    let reports = gradcheck_reports(cfg)?;
    println!("{:<20} {:>6} {:>8} {:>14}  status", "op", "trials", "checked", "max_rel_error");
    for r in &reports {
        println!(
            "{:<20} {:>6} {:>8} {:>14.3e}  {}",
            r.name,
            r.trials,
            r.checked,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed (tolerance {:e}): {}",
            cfg.tolerance,
            failed.join(", ")
        )))
    }
}
