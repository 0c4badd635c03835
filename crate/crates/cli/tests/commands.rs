use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csamoe::moe::{CsaMoeModel, ModelConfig, Variant};
use csamoe_cli::checkpoint::Checkpoint;
use csamoe_cli::commands::count_report;

fn csamoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csamoe"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, name: &str, per_class: usize, size: usize) -> PathBuf {
    let n = per_class.to_string();
    let s = size.to_string();
    let out = csamoe(&["synth", "--out", name, "--per-class", &n, "--size", &s, "--seed", "3"], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join(name)
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_a_reproducible_tree() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 10, 64);
    let b = synth(dir.path(), "b", 10, 64);
    let files = tree(&a);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".png")).count(), 40);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with("_mask.png")).count(), 20);
    assert_eq!(files, tree(&b));
    for (name, _) in files.iter().filter(|(n, _)| n.ends_with(".png")) {
        let img = csamoe::image::read_gray(&a.join(name)).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64), "{name}");
    }
}

#[test]
fn synth_into_unwritable_path_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("file"), "x").unwrap();
    let out = csamoe(&["synth", "--out", "file/sub", "--per-class", "2", "--size", "32"], dir.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

fn tiny_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(format!("{name}.cfg"));
    fs::write(
        &path,
        format!("data = data\nout = {name}\npreset = tiny\nepochs = 2\nlr = 3e-4\n{extra}"),
    )
    .unwrap();
    path
}

#[test]
fn train_and_eval_write_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p, "data", 30, 64);
    let cfg = tiny_config(p, "out", "");
    let out = csamoe(&["train", "--config", cfg.to_str().unwrap(), "--runs", "3"], p);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let o = p.join("out");
    for f in ["manifest.csv", "metrics.csv", "metrics_summary.csv", "train.log"] {
        assert!(o.join(f).is_file(), "{f}");
    }
    for run in 0..3 {
        for f in ["checkpoint.csmn", "epoch_log.csv", "csa_trace.csv", "roc_points.csv"] {
            assert!(o.join(format!("run{run}")).join(f).is_file(), "run{run}/{f}");
        }
    }
    let summary = fs::read_to_string(o.join("metrics_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "stat,runs,accuracy,precision,recall,f1,auc");
    assert!(lines[1].starts_with("mean,3,") && lines[2].starts_with("sd,3,"));
    let metrics = fs::read_to_string(o.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let log = fs::read_to_string(o.join("run0/epoch_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,part,loss,accuracy,gate_img,gate_tumor,gate_boundary,lr"));
    assert_eq!(log.lines().count(), 5);

    let ckpt = o.join("run0/checkpoint.csmn");
    let eval = |out_dir: &str| {
        let out = csamoe(
            &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", "data", "--out", out_dir],
            p,
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let dir = p.join(out_dir);
        (
            fs::read_to_string(dir.join("eval_test_metrics.csv")).unwrap(),
            fs::read_to_string(dir.join("eval_test_roc.csv")).unwrap(),
        )
    };
    let first = eval("e1");
    assert_eq!(first, eval("e2"));
    assert!(first.0.starts_with("run_id,accuracy,precision,recall,f1,auc\ntest,"));
    assert!(first.1.starts_with("fpr,tpr,threshold\n0,0,inf\n"));

    let wrong = csamoe(
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", "data", "--variant", "resnet18"],
        p,
    );
    assert_eq!(code(&wrong), 4);

    let bytes = fs::read(&ckpt).unwrap();
    let cut = p.join("cut.csmn");
    fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
    let truncated = csamoe(&["eval", "--checkpoint", cut.to_str().unwrap(), "--data", "data"], p);
    assert_eq!(code(&truncated), 4, "{}", stderr(&truncated));
}

/// An untrained network is a fixed function of its input, so a single
/// initialization can land on either side of chance; the mean over
/// initializations cannot.
#[test]
fn fresh_models_are_at_chance_level() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p, "data", 100, 64);
    let mut accs = Vec::new();
    for seed in 0..6u64 {
        let model = CsaMoeModel::new(ModelConfig::tiny(Variant::CsaMoe), seed).unwrap();
        let name = format!("fresh{seed}.csmn");
        Checkpoint::from_params(model.params()).save(&p.join(&name)).unwrap();
        let out = csamoe(&["eval", "--checkpoint", &name, "--data", "data", "--out", "."], p);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let csv = fs::read_to_string(p.join("eval_test_metrics.csv")).unwrap();
        let acc: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
        accs.push(acc);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.15, "accuracies {accs:?}");
}

#[test]
fn train_rejects_bad_configs_and_reports_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p, "data", 10, 64);
    let bad = p.join("bad.cfg");
    fs::write(&bad, "data = data\nout = out\nbogus_key = 1\n").unwrap();
    let out = csamoe(&["train", "--config", "bad.cfg"], p);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus_key"));

    let cfg = tiny_config(p, "nan", "");
    let out = csamoe(&["train", "--config", cfg.to_str().unwrap(), "--drop-expert", "img"], p);
    assert_eq!(code(&out), 2);

    fs::write(&cfg, "data = data\nout = nan\npreset = tiny\nepochs = 2\nlr = 1e300\n").unwrap();
    let out = csamoe(&["train", "--config", cfg.to_str().unwrap()], p);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch 0"));

    let out = csamoe(&["train"], p);
    assert_eq!(code(&out), 2);
}

#[test]
fn resnet18_log_header_reports_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p, "data", 7, 224);
    fs::write(p.join("r.cfg"), "data = data\nout = out\nepochs = 1\nbatch_size = 4\naugment = false\n").unwrap();
    let out = csamoe(&["train", "--config", "r.cfg", "--variant", "resnet18"], p);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let header = fs::read_to_string(p.join("out/train.log")).unwrap();
    assert!(header.starts_with("variant=resnet18 preset=full"));
    let params: f64 = header
        .split_whitespace()
        .find_map(|w| w.strip_prefix("params="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((params / 11.178e6 - 1.0).abs() < 0.005, "{params}");
}

#[test]
fn count_prints_reference_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = csamoe(&["count", "--variant", "csa_moe", "--preset", "full"], dir.path());
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text, count_report(Variant::CsaMoe, csamoe::backbone::Preset::Full));
    assert!(text.contains("attention increment: 865344 params"));
    assert!(text.contains("34.820"));
    let bad = csamoe(&["count", "--variant", "vgg16"], dir.path());
    assert_eq!(code(&bad), 2);
}

#[test]
fn gradcheck_names_a_corrupted_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = csamoe(&["gradcheck", "--trials", "2", "--corrupt", "channel_scale"], dir.path());
    assert_eq!(code(&out), 3);
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert!(text.starts_with("op"));
    assert!(text.contains("max_rel_error"));
    assert!(text.lines().any(|l| l.starts_with("channel_scale") && l.ends_with("FAIL")));
    assert!(text.lines().any(|l| l.starts_with("conv2d") && l.ends_with("ok")));
    assert!(stderr(&out).contains("channel_scale"));
}
