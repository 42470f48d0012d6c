use std::path::Path;
use std::process::{Command, Output};

use dia_cli::commands::parse_params_csv;
use dia_cli::{schema, RunConfig};
use dia_core::analysis::{parse_importance_csv, parse_matrix_csv, parse_pairs_csv, AttentionTrace, StageTrace};
use dia_core::backbone::{build, NetworkConfig};
use dia_core::attention::{AttentionSpec, LstmCellConfig, SamKind, Sharing};
use dia_core::train::{parse_metrics_csv, METRICS_HEADER};
use tempfile::TempDir;

fn dia(dir: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dia"));
    cmd.current_dir(dir).args(args).env_remove("DIA_SEED");
    if let Some(s) = seed_env {
        cmd.env("DIA_SEED", s);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "data.size=8",
    "--set",
    "data.count=64",
    "--set",
    "data.eval_count=16",
    "--set",
    "train.epochs=2",
    "--set",
    "train.batch_size=16",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

fn save_trace(path: &Path, blocks: usize, maps: impl Fn(usize, usize) -> Vec<f64>) {
    let mut st = StageTrace::new(3, (0..blocks).collect(), false);
    for b in 0..blocks {
        st.h[b] = (0..20).map(|s| maps(b, s)).collect();
    }
    AttentionTrace { stages: vec![st] }.save(path).unwrap();
}

#[test]
fn help_lists_every_key_with_default() {
    let tmp = TempDir::new().unwrap();
    let out = dia(tmp.path(), &["--help"], None);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in schema() {
        let default = if key.default.is_empty() { "\"\"" } else { key.default };
        assert!(text.contains(&format!("{} = {default}", key.path())), "{}", key.path());
    }
}

#[test]
fn train_writes_outputs_and_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\n[train]\nepochs = 1 # one pass\n[output]\ndir = out\n").unwrap();
    let args = with(&["train", "--config", "run.cfg"], TINY);
    let out = dia(tmp.path(), &args, None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dir = tmp.path().join("out");
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));
    assert_eq!(metrics, dia_core::train::metrics_csv(&parse_metrics_csv(&metrics).unwrap()));
    let resolved = std::fs::read_to_string(dir.join("train.resolved.cfg")).unwrap();
    let mut back = RunConfig::defaults();
    back.apply_text(&resolved).unwrap();
    assert_eq!(back.get("train.epochs"), "2", "--set beats the file");
    assert_eq!(back.get("output.dir"), "out");
    let ckpt = dia_core::train::Checkpoint::load(&dir.join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt.get("model.input_shape"), Some("3x8x8"));
    assert_eq!(ckpt.get("model.num_classes"), Some("4"));
    ckpt.build_model().unwrap();
}

#[test]
fn config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let out = dia(p, &["train", "--set", "data.source=cifar10"], None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("data.path"), "{}", stderr(&out));
    assert_eq!(code(&dia(p, &["train", "--set", "train.epoch=3"], None)), 2);
    assert_eq!(code(&dia(p, &["params", "resnet9000"], None)), 2);
    std::fs::write(p.join("bad.cfg"), "[train]\nepochs = 1\nepochz = 2\n").unwrap();
    let out = dia(p, &["train", "--config", "bad.cfg"], None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
    assert_eq!(code(&dia(p, &["train"], Some("abc"))), 2);
}

#[test]
fn io_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    assert_eq!(code(&dia(p, &["train", "--config", "missing.cfg"], None)), 3);
    let out = dia(p, &["train", "--set", "data.source=cifar10", "--set", "data.path=nope.bin"], None);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("data.path"));
    assert_eq!(code(&dia(p, &["analyze", "trace", "--set", "output.dir=o"], None)), 3);
    assert_eq!(code(&dia(p, &["analyze", "correlation", "--set", "output.dir=o"], None)), 3);
    std::fs::write(p.join("junk.bin"), b"not a trace").unwrap();
    let out = dia(p, &["analyze", "importance", "--set", "analysis.trace=junk.bin"], None);
    assert_eq!(code(&out), 3);
}

#[test]
fn params_table_matches_model_count() {
    let tmp = TempDir::new().unwrap();
    let out = dia(tmp.path(), &["--threads", "1", "params", "tiny-dia", "--set", "output.dir=o"], None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = parse_params_csv(&std::fs::read_to_string(tmp.path().join("o/params.csv")).unwrap()).unwrap();
    let cfg = NetworkConfig::named("tiny-dia").unwrap().with_attention(AttentionSpec {
        kind: SamKind::DiaLstm(LstmCellConfig::modified(4)),
        sharing: Sharing::SharedPerStage,
    });
    let full = build(&cfg, 0).unwrap().budget();
    let bare = build(&NetworkConfig::named("tiny-dia").unwrap(), 0).unwrap().budget();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].backbone_weights, bare.weight_total());
    assert_eq!(rows[0].backbone_weights + rows[0].attention_weights, full.weight_total());
    assert_eq!(rows[0].backbone_total + rows[0].attention_total, full.total());
    let budget = std::fs::read_to_string(tmp.path().join("o/budget.csv")).unwrap();
    dia_core::analysis::parse_budget_csv(&budget).unwrap();
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let base = with(&["gradcheck", "--set", "data.size=8", "--set", "data.count=4"], &[]);
    let out = dia(p, &with(&base, &["--samples", "64"]), None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
    assert_eq!(code(&dia(p, &with(&base, &["--samples", "0"]), None)), 0);
    let faulty = with(&base, &["--samples", "8", "--set", "gradcheck.inject_fault=true"]);
    assert_eq!(code(&dia(p, &faulty, None)), 4);
}

#[test]
fn seed_precedence_reaches_training() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let run = |dir: &str, env: Option<&str>, extra: &[&str]| {
        let set = format!("output.dir={dir}");
        let args = with(&with(&["train", "--set", &set], TINY), extra);
        assert_eq!(code(&dia(p, &args, env)), 0);
        std::fs::read_to_string(p.join(dir).join("metrics.csv")).unwrap()
    };
    let a = run("a", None, &[]);
    let b = run("b", Some("5"), &[]);
    let c = run("c", Some("5"), &["--set", "train.seed=0"]);
    assert_ne!(a, b);
    assert_eq!(a, c);
    let resolved = std::fs::read_to_string(p.join("b/train.resolved.cfg")).unwrap();
    assert!(resolved.contains("seed = 5"));
}

#[test]
fn correlation_examples() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    save_trace(&p.join("same.bin"), 3, |_, s| vec![0.1, 0.5 + 0.01 * s as f64, 0.9]);
    let out = dia(p, &["analyze", "correlation", "--set", "analysis.trace=same.bin", "--set", "output.dir=o"], None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let pairs = parse_pairs_csv(&std::fs::read_to_string(p.join("o/correlation_pairs.csv")).unwrap()).unwrap();
    assert_eq!(pairs.len(), 3);
    assert!(pairs.iter().all(|r| r.mean == Some(1.0)));
    let matrix = parse_matrix_csv(&std::fs::read_to_string(p.join("o/correlation_matrix.csv")).unwrap()).unwrap();
    assert!(matrix.iter().all(|r| r.3 == Some(1.0)));

    save_trace(&p.join("one.bin"), 1, |_, s| vec![0.1, s as f64, 0.3]);
    let out = dia(p, &["analyze", "correlation", "--set", "analysis.trace=one.bin", "--set", "output.dir=o"], None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("at least 2"), "{}", stderr(&out));
}

#[test]
fn importance_on_two_blocks_is_a_unit_row() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    save_trace(&p.join("two.bin"), 2, |b, s| vec![(b * s) as f64, s as f64 * 0.5, 1.0]);
    let out = dia(p, &["analyze", "importance", "--set", "analysis.trace=two.bin", "--set", "output.dir=o"], None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(p.join("o/importance.csv")).unwrap();
    assert_eq!(text.lines().nth(1), Some("0,1,0,1.0"));
    assert_eq!(parse_importance_csv(&text).unwrap(), vec![(0, 1, 0, Some(1.0))]);
}

#[test]
fn trace_csv_form_feeds_the_analyses() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let mut args = with(&["train", "--set", "output.dir=o"], TINY);
    assert_eq!(code(&dia(p, &args, None)), 0);
    args[0] = "analyze";
    args.insert(1, "trace");
    let csv = ["--set", "analysis.trace=o/trace.csv"];
    let out = dia(p, &with(&args, &csv), None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let t = AttentionTrace::read_csv(&p.join("o/trace.csv")).unwrap();
    assert_eq!(t.num_samples(), 16);
    let out = dia(p, &["analyze", "correlation", "--set", "output.dir=o", csv[0], csv[1]], None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn gradient_histograms_with_no_skip() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let args = with(&["analyze", "gradients", "--no-skip", "--set", "output.dir=g"], TINY);
    let out = dia(p, &args, None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved = std::fs::read_to_string(p.join("g/gradients.resolved.cfg")).unwrap();
    assert!(resolved.contains("use_skip = false"));
    let summary =
        dia_core::analysis::parse_summary_csv(&std::fs::read_to_string(p.join("g/gradients_summary.csv")).unwrap())
            .unwrap();
    for stage in 0..3 {
        let h = dia_core::analysis::parse_histogram_csv(
            &std::fs::read_to_string(p.join(format!("g/gradients_stage{stage}.csv"))).unwrap(),
        )
        .unwrap();
        let observed: u64 = summary.iter().filter(|s| s.stage == stage).map(|s| s.observed).sum();
        assert_eq!(h.iter().map(|b| b.2).sum::<u64>(), observed);
        assert!(observed > 0);
    }
    let probe = with(&args, &["--set", "analysis.gradient_source=checkpoint", "--set", "analysis.grad_batches=2"]);
    assert_eq!(code(&dia(p, &probe, None)), 0);
}
