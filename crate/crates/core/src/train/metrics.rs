use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,eval_acc,lr,status";

/// Outcome of a run. A numeric blow-up is a result, not a crash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    Nan,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Nan => "nan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Absent when no evaluation set was given or the run diverged.
    pub eval_acc: Option<f64>,
    pub lr: f64,
    pub status: RunStatus,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let eval = r.eval_acc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            r.train_acc,
            eval,
            r.lr,
            r.status.as_str()
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Data(format!("metrics file must start with '{METRICS_HEADER}'")));
    }
    let bad = |n: usize, what: &str| Error::Data(format!("metrics line {}: bad {what}", n + 2));
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(n, "field count"));
            }
            let num = |s: &str, what| s.parse::<f64>().map_err(|_| bad(n, what));
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad(n, "epoch"))?,
                train_loss: num(f[1], "train_loss")?,
                train_acc: num(f[2], "train_acc")?,
                eval_acc: if f[3].is_empty() { None } else { Some(num(f[3], "eval_acc")?) },
                lr: num(f[4], "lr")?,
                status: match f[5] {
                    "ok" => RunStatus::Ok,
                    "nan" => RunStatus::Nan,
                    _ => return Err(bad(n, "status")),
                },
            })
        })
        .collect()
}
