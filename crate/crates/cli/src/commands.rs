//! Subcommand bodies. Each returns `Ok(())` or a classified [`Failure`];
//! progress and tables go to standard output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dia_core::analysis::{
    budget_report, correlation_report, default_scatter_pairs, gradient_stats, importance_report, scatter_csv,
    AttentionTrace, FeatureSubsample, ForestConfig, GradientCollector, GradientStats, GradientStatsConfig,
};
use dia_core::backbone::{
    build, check_gradients, format_shape, network_from_keys, GradcheckConfig, Model, NetworkConfig, MODEL_KEYS,
};
use dia_core::train::{
    default_milestones, load_cifar10_binary, metrics_csv, synth_generate, train_observed, train_probed, Checkpoint,
    Dataset, EpochMetrics, SynthSpec, TrainConfig, TrainReport,
};

use crate::{Failure, RunConfig};

pub const PARAMS_HEADER: &str =
    "arch,attention,r,backbone_weights,backbone_total,attention_weights,attention_total,increment_millions";

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(cfg.get("output.dir"));
    if dir.as_os_str().is_empty() {
        return Err(Failure::Config("output.dir must not be empty".into()));
    }
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

/// Writes `<name>.resolved.cfg` into the output directory and returns the
/// directory.
fn prepare_output(cfg: &RunConfig, name: &str) -> Result<PathBuf, Failure> {
    let dir = output_dir(cfg)?;
    write_file(&dir.join(format!("{name}.resolved.cfg")), cfg.to_text())?;
    Ok(dir)
}

fn path_or(cfg: &RunConfig, key: &str, dir: &Path, fallback: &str) -> PathBuf {
    match cfg.get(key) {
        "" => dir.join(fallback),
        p => PathBuf::from(p),
    }
}

fn cifar_files(cfg: &RunConfig, key: &str) -> Result<Option<Dataset>, Failure> {
    let list = cfg.get(key);
    if list.is_empty() {
        return Ok(None);
    }
    let mut merged: Option<Dataset> = None;
    for p in list.split(',').map(str::trim) {
        let path = Path::new(p);
        let d = load_cifar10_binary(path).map_err(|e| Failure::Io(format!("{key}: {}: {e}", path.display())))?;
        merged = Some(match merged {
            None => d,
            Some(mut m) => {
                m.images.extend_from_slice(&d.images);
                m.labels.extend_from_slice(&d.labels);
                m
            }
        });
    }
    Ok(merged)
}

/// Training set and optional evaluation set described by `data.*`.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>), Failure> {
    match cfg.get("data.source") {
        "synth" => {
            let size: usize = cfg.parse("data.size")?;
            let seed: u64 = cfg.parse("data.seed")?;
            let classes = cfg.parse("data.classes")?;
            let spec = |count, seed| SynthSpec {
                classes,
                count,
                height: size,
                width: size,
                seed,
            };
            let train = synth_generate(&spec(cfg.parse("data.count")?, seed))?;
            let eval = match cfg.parse("data.eval_count")? {
                0 => None,
                n => Some(synth_generate(&spec(n, seed.wrapping_add(1)))?),
            };
            Ok((train, eval))
        }
        "cifar10" => {
            let train = cifar_files(cfg, "data.path")?
                .ok_or_else(|| Failure::Config("data.path is required when data.source = cifar10".into()))?;
            Ok((train, cifar_files(cfg, "data.eval_path")?))
        }
        other => Err(Failure::Config(format!("data.source: unknown source '{other}' (synth or cifar10)"))),
    }
}

/// Network from `model.*`. `auto` class count and input shape follow
/// `data` when given.
pub fn network(cfg: &RunConfig, data: Option<&Dataset>) -> Result<NetworkConfig, Failure> {
    let get = |k: &str| -> String {
        let v = cfg.get(&format!("model.{k}")).to_string();
        match (k, data) {
            ("num_classes", Some(d)) if v == "auto" => d.num_classes.to_string(),
            ("input_shape", Some(d)) if v == "auto" => format_shape(d.image_shape()),
            _ => v,
        }
    };
    Ok(network_from_keys(&get)?)
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig, Failure> {
    let epochs = cfg.parse("train.epochs")?;
    let milestones = match cfg.get("train.milestones") {
        "auto" => default_milestones(epochs),
        "none" | "" => Vec::new(),
        list => list
            .split(',')
            .map(|m| {
                m.trim()
                    .parse()
                    .map_err(|_| Failure::Config(format!("train.milestones: bad epoch '{m}'")))
            })
            .collect::<Result<_, _>>()?,
    };
    let stop_at_train_acc = match cfg.get("train.stop_at_train_acc") {
        "none" | "" => None,
        _ => Some(cfg.parse("train.stop_at_train_acc")?),
    };
    let tc = TrainConfig {
        epochs,
        batch_size: cfg.parse("train.batch_size")?,
        lr: cfg.parse("train.lr")?,
        milestones,
        lr_decay: cfg.parse("train.lr_decay")?,
        momentum: cfg.parse("train.momentum")?,
        weight_decay: cfg.parse("train.weight_decay")?,
        seed: cfg.parse("train.seed")?,
        augment: cfg.flag("train.augment")?,
        shuffle: cfg.flag("train.shuffle")?,
        stop_at_train_acc,
    };
    tc.validate()?;
    Ok(tc)
}

/// The `model.*` keys that rebuild `net`, with `auto` resolved.
fn model_metadata(cfg: &RunConfig, net: &NetworkConfig) -> Vec<(String, String)> {
    MODEL_KEYS
        .iter()
        .map(|k| {
            let v = match k.key {
                "num_classes" => net.num_classes.to_string(),
                "input_shape" => format_shape(net.input_shape),
                key => cfg.get(&format!("model.{key}")).to_string(),
            };
            (format!("model.{}", k.key), v)
        })
        .collect()
}

/// Shared body of `train` and `analyze gradients`: trains, then writes
/// metrics and checkpoint.
fn run_training(cfg: &RunConfig, dir: &Path, probe: Option<&mut GradientCollector>) -> Result<TrainReport, Failure> {
    let (data, eval) = load_data(cfg)?;
    let net = network(cfg, Some(&data))?;
    let tc = train_config(cfg)?;
    if data.image_shape() != net.input_shape {
        return Err(Failure::Config(format!(
            "model.input_shape {} does not match the data ({})",
            format_shape(net.input_shape),
            format_shape(data.image_shape())
        )));
    }
    let mut model = build(&net, tc.seed)?;
    println!(
        "training {} ({} parameters) on {} images for up to {} epochs",
        cfg.get("model.arch"),
        model.store.numel(),
        data.len(),
        tc.epochs
    );
    let show = |m: &EpochMetrics| {
        let eval = m.eval_acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3}  loss {:.4}  train_acc {:.4}  eval_acc {eval}  lr {}  {}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.lr,
            m.status.as_str()
        );
    };
    let report = match probe {
        Some(p) => train_probed(&mut model, &data, eval.as_ref(), &tc, show, p),
        None => train_observed(&mut model, &data, eval.as_ref(), &tc, show),
    }?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&report.metrics))?;
    let mut meta = model_metadata(cfg, &net);
    meta.push(("train.seed".into(), tc.seed.to_string()));
    meta.push(("run.status".into(), report.status.as_str().into()));
    meta.push(("run.epochs".into(), report.metrics.len().to_string()));
    let ckpt = dir.join("checkpoint.bin");
    Checkpoint::capture(&model, meta)
        .save(&ckpt)
        .map_err(|e| io_err(&ckpt, e))?;
    println!(
        "status {}; wrote {} and {}",
        report.status.as_str(),
        dir.join("metrics.csv").display(),
        ckpt.display()
    );
    Ok(report)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), Failure> {
    let dir = prepare_output(cfg, "train")?;
    run_training(cfg, &dir, None).map(|_| ())
}

pub struct ParamsRow {
    pub arch: String,
    pub attention: String,
    pub r: usize,
    pub backbone_weights: usize,
    pub backbone_total: usize,
    pub attention_weights: usize,
    pub attention_total: usize,
}

impl ParamsRow {
    pub fn increment_millions(&self) -> String {
        format!("{:.2}", self.attention_weights as f64 / 1e6)
    }
}

pub fn params_csv(rows: &[ParamsRow]) -> String {
    let mut out = format!("{PARAMS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.arch,
            r.attention,
            r.r,
            r.backbone_weights,
            r.backbone_total,
            r.attention_weights,
            r.attention_total,
            r.increment_millions()
        );
    }
    out
}

pub fn parse_params_csv(text: &str) -> Result<Vec<ParamsRow>, Failure> {
    let mut lines = text.lines();
    if lines.next() != Some(PARAMS_HEADER) {
        return Err(Failure::Io(format!("parameter table must start with '{PARAMS_HEADER}'")));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Failure::Io(format!("parameter table line {}: malformed", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
            let row = ParamsRow {
                arch: f[0].to_string(),
                attention: f[1].to_string(),
                r: num(2)?,
                backbone_weights: num(3)?,
                backbone_total: num(4)?,
                attention_weights: num(5)?,
                attention_total: num(6)?,
            };
            if row.increment_millions() != f[7] {
                return Err(bad());
            }
            Ok(row)
        })
        .collect()
}

fn attention_label(cfg: &RunConfig) -> String {
    match cfg.get("model.attention") {
        "dia" => format!("dia-{}", cfg.get("model.cell")),
        other => other.to_string(),
    }
}

/// Parameter table over reduction ratios `rs` (the configured ratio when
/// empty), plus the shared-vs-per-block comparison at the configured
/// ratio. Model keys left at `auto` use the architecture's own values.
pub fn cmd_params(cfg: &RunConfig, rs: &[usize]) -> Result<(), Failure> {
    let net = network(cfg, None)?;
    let dir = prepare_output(cfg, "params")?;
    let rs = if rs.is_empty() {
        vec![cfg.parse("model.reduction")?]
    } else {
        rs.to_vec()
    };
    let bare = build(&net.clone().with_attention(dia_core::attention::AttentionSpec::none()), 0)?.budget();
    let mut rows = Vec::new();
    for &r in &rs {
        let mut c = cfg.clone();
        c.set("model.reduction", &r.to_string())?;
        let b = build(&network(&c, None)?, 0)?.budget();
        rows.push(ParamsRow {
            arch: cfg.get("model.arch").to_string(),
            attention: attention_label(cfg),
            r,
            backbone_weights: bare.weight_total(),
            backbone_total: bare.total(),
            attention_weights: b.weight_total() - bare.weight_total(),
            attention_total: b.total() - bare.total(),
        });
    }
    println!(
        "{} backbone: {} weights, {} parameters ({:.2}M)",
        cfg.get("model.arch"),
        bare.weight_total(),
        bare.total(),
        bare.total() as f64 / 1e6
    );
    println!("{:>4}  {:>12}  {:>12}  {:>10}  {:>12}", "r", "attn_weights", "attn_params", "increment", "total");
    for row in &rows {
        println!(
            "{:>4}  {:>12}  {:>12}  {:>10}  {:>12}",
            row.r,
            row.attention_weights,
            row.attention_total,
            format!("+{}M", row.increment_millions()),
            row.backbone_total + row.attention_total
        );
    }
    let budget = budget_report(&net)?;
    print!("{}", budget.summary());
    if budget.per_block_total().is_none() {
        let equiv: usize = budget.stages.iter().map(|s| s.formula * s.blocks).sum();
        println!("one unit per block (closed form, not buildable): {equiv}");
    }
    write_file(&dir.join("params.csv"), params_csv(&rows))?;
    write_file(&dir.join("budget.csv"), budget.to_csv())?;
    println!("wrote {} and {}", dir.join("params.csv").display(), dir.join("budget.csv").display());
    Ok(())
}

/// Gradient check on the first `gradcheck.batch` training images.
pub fn cmd_gradcheck(cfg: &RunConfig, samples: Option<usize>) -> Result<(), Failure> {
    let dir = prepare_output(cfg, "gradcheck")?;
    let (data, _) = load_data(cfg)?;
    let net = network(cfg, Some(&data))?;
    let batch: usize = cfg.parse("gradcheck.batch")?;
    if batch == 0 || batch > data.len() {
        return Err(Failure::Config(format!(
            "gradcheck.batch must lie in 1..={}, got {batch}",
            data.len()
        )));
    }
    let gc = GradcheckConfig {
        samples: match samples {
            Some(s) => s,
            None => cfg.parse("gradcheck.samples")?,
        },
        step: cfg.parse("gradcheck.step")?,
        tolerance: cfg.parse("gradcheck.tolerance")?,
        seed: cfg.parse("gradcheck.seed")?,
        refinements: cfg.parse("gradcheck.refinements")?,
        fault: cfg.flag("gradcheck.inject_fault")?.then_some(1.5),
    };
    let mut model = build(&net, cfg.parse("train.seed")?)?;
    let idx: Vec<usize> = (0..batch).collect();
    let (images, labels) = data.batch(&idx, None);
    let report = check_gradients(&mut model, &images, &labels, &gc)?;
    let mut csv = String::from("param,index,analytic,numeric,rel_error,step,kink\n");
    for c in &report.coordinates {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            c.param, c.index, c.analytic, c.numeric, c.rel_error, c.step, c.kink
        );
    }
    write_file(&dir.join("gradcheck.csv"), csv)?;
    println!(
        "gradcheck: {} coordinates, {} on a kink, max relative error {:.3e} (tolerance {:.1e})",
        report.coordinates.len(),
        report.kinks(),
        report.max_rel_error(),
        report.tolerance
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Invariant(format!(
            "backward disagrees with finite differences: max relative error {:.3e} > {:.1e}",
            report.max_rel_error(),
            report.tolerance
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyzeKind {
    Trace,
    Correlation,
    Importance,
    Gradients,
}

impl AnalyzeKind {
    pub fn name(self) -> &'static str {
        match self {
            AnalyzeKind::Trace => "trace",
            AnalyzeKind::Correlation => "correlation",
            AnalyzeKind::Importance => "importance",
            AnalyzeKind::Gradients => "gradients",
        }
    }
}

fn trace_path(cfg: &RunConfig, dir: &Path) -> PathBuf {
    path_or(cfg, "analysis.trace", dir, "trace.bin")
}

fn is_csv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "csv")
}

pub fn read_trace(path: &Path) -> Result<AttentionTrace, Failure> {
    let t = if is_csv(path) {
        AttentionTrace::read_csv(path)
    } else {
        AttentionTrace::load(path)
    };
    t.map_err(|e| io_err(path, e))
}

fn load_checkpoint(cfg: &RunConfig, dir: &Path) -> Result<(Model, PathBuf), Failure> {
    let path = path_or(cfg, "analysis.checkpoint", dir, "checkpoint.bin");
    let ckpt = Checkpoint::load(&path).map_err(|e| io_err(&path, e))?;
    Ok((ckpt.build_model()?, path))
}

fn check_shape(model: &Model, data: &Dataset) -> Result<(), Failure> {
    if data.image_shape() != model.config.input_shape {
        return Err(Failure::Config(format!(
            "checkpoint expects {} images, data.* describes {}",
            format_shape(model.config.input_shape),
            format_shape(data.image_shape())
        )));
    }
    Ok(())
}

fn forest_config(cfg: &RunConfig) -> Result<ForestConfig, Failure> {
    let fs = cfg.get("analysis.feature_subsample");
    let fc = ForestConfig {
        n_trees: cfg.parse("analysis.trees")?,
        max_depth: cfg.parse("analysis.max_depth")?,
        min_samples_leaf: cfg.parse("analysis.min_leaf")?,
        feature_subsample: FeatureSubsample::parse(fs)
            .ok_or_else(|| Failure::Config(format!("analysis.feature_subsample: expected all, sqrt or a count, got '{fs}'")))?,
        seed: cfg.parse("analysis.forest_seed")?,
    };
    fc.validate()?;
    Ok(fc)
}

fn gradient_config(cfg: &RunConfig) -> Result<GradientStatsConfig, Failure> {
    let gc = GradientStatsConfig {
        bins: cfg.parse("analysis.hist_bins")?,
        lo: cfg.parse("analysis.hist_lo")?,
        hi: cfg.parse("analysis.hist_hi")?,
        loss_scale: cfg.parse("analysis.loss_scale")?,
        every: cfg.parse("analysis.grad_every")?,
        batches: cfg.parse("analysis.grad_batches")?,
        batch_size: cfg.parse("analysis.batch_size")?,
        seed: cfg.parse("train.seed")?,
    };
    gc.validate()?;
    Ok(gc)
}

fn report_gradients(stats: &GradientStats, dir: &Path) -> Result<(), Failure> {
    let paths = stats.write_csvs(dir).map_err(|e| io_err(dir, e))?;
    for s in 0..stats.histograms.len() {
        println!(
            "stage {s}: {} finite gradient entries, {} non-finite",
            stats.observed(s),
            stats.overflow(s)
        );
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn cmd_analyze(kind: AnalyzeKind, cfg: &RunConfig) -> Result<(), Failure> {
    let dir = prepare_output(cfg, kind.name())?;
    match kind {
        AnalyzeKind::Trace => {
            let (model, ckpt) = load_checkpoint(cfg, &dir)?;
            let (train, eval) = load_data(cfg)?;
            let data = eval.unwrap_or(train);
            check_shape(&model, &data)?;
            let trace = AttentionTrace::collect(
                &model,
                &data,
                cfg.parse("analysis.samples")?,
                cfg.parse("analysis.batch_size")?,
            )?;
            let out = trace_path(cfg, &dir);
            let written = if is_csv(&out) {
                trace.write_csv(&out)
            } else {
                trace.save(&out)
            };
            written.map_err(|e| io_err(&out, e))?;
            println!("traced {} samples through {}", trace.num_samples(), ckpt.display());
            for (i, st) in trace.stages.iter().enumerate() {
                println!("stage {i}: width {}, traced blocks {:?}", st.width, st.blocks);
            }
            println!("wrote {}", out.display());
        }
        AnalyzeKind::Correlation => {
            let trace = read_trace(&trace_path(cfg, &dir))?;
            let report = correlation_report(&trace)?;
            let scatter = scatter_csv(&trace, &default_scatter_pairs(&trace))?;
            let files = [
                ("correlation_pairs.csv", report.pairs_csv()),
                ("correlation_matrix.csv", report.matrix_csv()),
                ("correlation_distribution.csv", report.distribution_csv()),
                ("correlation_scatter.csv", scatter),
            ];
            print!("{}", report.summary());
            for (name, text) in files {
                write_file(&dir.join(name), text)?;
                println!("wrote {}", dir.join(name).display());
            }
        }
        AnalyzeKind::Importance => {
            let trace = read_trace(&trace_path(cfg, &dir))?;
            let report = importance_report(&trace, &forest_config(cfg)?)?;
            let csv = report.to_csv();
            print!("{csv}");
            write_file(&dir.join("importance.csv"), csv)?;
            println!("wrote {}", dir.join("importance.csv").display());
        }
        AnalyzeKind::Gradients => {
            let gc = gradient_config(cfg)?;
            match cfg.get("analysis.gradient_source") {
                "train" => {
                    let (data, _) = load_data(cfg)?;
                    let stages = network(cfg, Some(&data))?.stages.len();
                    let mut probe = GradientCollector::new(&gc, stages)?;
                    run_training(cfg, &dir, Some(&mut probe))?;
                    report_gradients(&probe.stats, &dir)?;
                }
                "checkpoint" => {
                    let (model, _) = load_checkpoint(cfg, &dir)?;
                    let (data, _) = load_data(cfg)?;
                    check_shape(&model, &data)?;
                    report_gradients(&gradient_stats(&model, &data, &gc)?, &dir)?;
                }
                other => {
                    return Err(Failure::Config(format!(
                        "analysis.gradient_source: expected train or checkpoint, got '{other}'"
                    )))
                }
            }
        }
    }
    Ok(())
}
