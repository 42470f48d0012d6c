//! Run configuration: a sectioned `key = value` file plus `--set`
//! overrides.
//!
//! ```text
//! # comment
//! [train]
//! epochs = 5
//! lr = 0.05   # trailing comments are allowed
//! ```
//!
//! Every key has a default. Precedence, lowest first: built-in default,
//! `DIA_SEED` (only `train.seed`), the config file, `--set` overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dia_core::backbone::MODEL_KEYS;

use crate::Failure;

pub const SEED_ENV: &str = "DIA_SEED";
pub const SECTIONS: &[&str] = &["model", "data", "train", "output", "analysis", "gradcheck"];

#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub section: &'static str,
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

impl Key {
    pub fn path(&self) -> String {
        format!("{}.{}", self.section, self.key)
    }
}

const fn k(section: &'static str, key: &'static str, default: &'static str, doc: &'static str) -> Key {
    Key {
        section,
        key,
        default,
        doc,
    }
}

const CLI_KEYS: &[Key] = &[
    k("data", "source", "synth", "synth (generated shapes) or cifar10 (binary batches)"),
    k("data", "path", "", "cifar10 training batch files, comma-separated; required for cifar10"),
    k("data", "eval_path", "", "cifar10 evaluation batch files, comma-separated; empty for none"),
    k("data", "classes", "4", "synth: number of classes"),
    k("data", "count", "2048", "synth: training images"),
    k("data", "eval_count", "512", "synth: evaluation images (seed + 1); 0 for none"),
    k("data", "size", "32", "synth: image side in pixels"),
    k("data", "seed", "0", "synth: generator seed"),
    k("train", "epochs", "30", "training epochs"),
    k("train", "batch_size", "64", "minibatch size"),
    k("train", "lr", "0.1", "initial learning rate"),
    k("train", "milestones", "auto", "epochs after which lr decays: comma list, none, or auto (50% and 75%)"),
    k("train", "lr_decay", "0.1", "factor applied at each milestone"),
    k("train", "momentum", "0.9", "SGD momentum"),
    k("train", "weight_decay", "0.0001", "L2 weight decay"),
    k("train", "seed", "0", "initialization, shuffle and augmentation seed (DIA_SEED overrides the default)"),
    k("train", "augment", "true", "random crop with 4-pixel padding and horizontal flip"),
    k("train", "shuffle", "true", "reshuffle the training set every epoch"),
    k("train", "stop_at_train_acc", "none", "stop once an epoch's training accuracy reaches this value"),
    k("output", "dir", "runs/dia", "directory for checkpoints, traces, metrics and reports"),
    k("analysis", "checkpoint", "", "checkpoint to trace or probe; empty for <output.dir>/checkpoint.bin"),
    k("analysis", "trace", "", "attention trace file (.csv selects the text form); empty for <output.dir>/trace.bin"),
    k("analysis", "samples", "256", "trace: evaluation images recorded"),
    k("analysis", "batch_size", "64", "trace and gradient probing batch size"),
    k("analysis", "trees", "100", "importance: trees per forest"),
    k("analysis", "max_depth", "8", "importance: maximum tree depth"),
    k("analysis", "min_leaf", "2", "importance: minimum samples per leaf"),
    k("analysis", "feature_subsample", "all", "importance: features tried per split: all, sqrt or a count"),
    k("analysis", "forest_seed", "0", "importance: forest seed"),
    k("analysis", "gradient_source", "train", "gradients: train (record during a run) or checkpoint (probe a saved model)"),
    k("analysis", "hist_bins", "64", "gradients: log-spaced histogram bins"),
    k("analysis", "hist_lo", "1e-12", "gradients: lower histogram edge of |g|"),
    k("analysis", "hist_hi", "100", "gradients: upper histogram edge of |g|"),
    k("analysis", "loss_scale", "1", "gradients: multiplier on the loss before backward (checkpoint mode)"),
    k("analysis", "grad_every", "1", "gradients: record every n-th training step"),
    k("analysis", "grad_batches", "8", "gradients: batches probed in checkpoint mode"),
    k("gradcheck", "samples", "64", "parameter coordinates compared"),
    k("gradcheck", "step", "0.0001", "central-difference step"),
    k("gradcheck", "tolerance", "0.0001", "maximum relative error"),
    k("gradcheck", "refinements", "2", "step reductions tried when a difference crosses a ReLU kink"),
    k("gradcheck", "batch", "2", "images in the checked batch"),
    k("gradcheck", "seed", "0", "coordinate sampling seed"),
    k("gradcheck", "inject_fault", "false", "test hook: corrupt the backward pass"),
];

/// Every key, in file order.
pub fn schema() -> Vec<Key> {
    let mut keys: Vec<Key> = MODEL_KEYS
        .iter()
        .map(|m| k("model", m.key, m.default, m.doc))
        .collect();
    keys.extend_from_slice(CLI_KEYS);
    keys
}

/// `--help` appendix listing each key with its default.
pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (section.key = default):\n");
    for key in schema() {
        let default = if key.default.is_empty() { "\"\"" } else { key.default };
        let _ = writeln!(out, "  {} = {}\n      {}", key.path(), default, key.doc);
    }
    let _ = write!(
        out,
        "\n{SEED_ENV} sets train.seed when neither the config file nor --set does.\n\
         Exit codes: 0 ok, 2 config error, 3 IO or input data error, 4 internal invariant violation."
    );
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: schema().iter().map(|k| (k.path(), k.default.to_string())).collect(),
        }
    }

    /// Defaults, then `DIA_SEED`, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self, Failure> {
        let mut cfg = Self::defaults();
        if let Some(seed) = env_seed {
            let seed = seed.trim();
            if seed.parse::<u64>().is_err() {
                return Err(config_err(format!("{SEED_ENV}: expected an unsigned integer, got '{seed}'")));
            }
            cfg.values.insert("train.seed".into(), seed.to_string());
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Io(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| config_err(format!("{}: {}", path.display(), e.message())))?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), Failure> {
        let mut section: Option<String> = None;
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(format!("line {line_no}: unterminated section header")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(config_err(format!(
                        "line {line_no}: unknown section [{name}] (known: {})",
                        SECTIONS.join(", ")
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {line_no}: expected 'key = value'")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| config_err(format!("line {line_no}: key outside any [section]")))?;
            let path = format!("{sec}.{}", key.trim());
            if let Some(prev) = seen.insert(path.clone(), line_no) {
                return Err(config_err(format!("line {line_no}: {path} already set on line {prev}")));
            }
            self.set(&path, value.trim())
                .map_err(|e| config_err(format!("line {line_no}: {}", e.message())))?;
        }
        Ok(())
    }

    /// `section.key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), Failure> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("--set expects section.key=value, got '{assignment}'")))?;
        self.set(path.trim(), value.trim())
    }

    pub fn set(&mut self, path: &str, value: &str) -> Result<(), Failure> {
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        match self.values.get_mut(path) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(config_err(format!("unknown key '{path}'"))),
        }
    }

    pub fn get(&self, path: &str) -> &str {
        self.values
            .get(path)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key '{path}' is not in the schema"))
    }

    pub fn parse<T: std::str::FromStr>(&self, path: &str) -> Result<T, Failure> {
        let v = self.get(path);
        v.parse()
            .map_err(|_| config_err(format!("{path}: cannot parse '{v}' as {}", std::any::type_name::<T>())))
    }

    pub fn flag(&self, path: &str) -> Result<bool, Failure> {
        Ok(dia_core::backbone::parse_bool(path, self.get(path))?)
    }

    /// The resolved configuration in the file grammar, documented.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        let mut section = "";
        for key in schema() {
            if key.section != section {
                section = key.section;
                let _ = write!(out, "\n[{section}]\n");
            }
            let _ = writeln!(out, "# {}\n{} = {}", key.doc, key.key, self.get(&key.path()));
        }
        out
    }
}
