use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::backbone::{ForwardOutput, Model};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Graph;
use crate::train::{Dataset, StepProbe};

pub const HISTOGRAM_HEADER: &str = "bin,lower,upper,count";
pub const SUMMARY_HEADER: &str = "stage,step,observed,overflow,mean_abs,var_abs";

const SAMPLE_STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientStatsConfig {
    pub bins: usize,
    /// Inner histogram range for `|g|`. Bin 0 also takes everything below
    /// (zero included), the last bin everything above.
    pub lo: f64,
    pub hi: f64,
    /// Multiplier on the loss before backward.
    pub loss_scale: f64,
    /// Record every `every`-th step.
    pub every: usize,
    /// Batches drawn by [`gradient_stats`].
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GradientStatsConfig {
    fn default() -> Self {
        GradientStatsConfig {
            bins: 64,
            lo: 1e-12,
            hi: 1e2,
            loss_scale: 1.0,
            every: 1,
            batches: 8,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl GradientStatsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.lo > 0.0) || !(self.hi > self.lo) || !self.hi.is_finite() {
            return Err(Error::config("gradient histogram needs >= 2 bins and 0 < lo < hi < inf"));
        }
        if self.every == 0 || self.batch_size == 0 {
            return Err(Error::config("gradient sampling interval and batch size must be positive"));
        }
        if !self.loss_scale.is_finite() {
            return Err(Error::config("loss scale must be finite"));
        }
        Ok(())
    }

    /// `bins + 1` log-spaced edges from `lo` to `hi`.
    pub fn edges(&self) -> Vec<f64> {
        let ratio = (self.hi / self.lo).ln();
        (0..=self.bins)
            .map(|k| self.lo * (ratio * k as f64 / self.bins as f64).exp())
            .collect()
    }
}

/// `|g|` summary of one stage output at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSummary {
    pub stage: usize,
    pub step: usize,
    /// Finite entries seen.
    pub observed: u64,
    /// Non-finite entries seen.
    pub overflow: u64,
    pub mean_abs: f64,
    pub var_abs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientStats {
    pub edges: Vec<f64>,
    /// `[stage][bin]`, accumulated over every recorded step.
    pub histograms: Vec<Vec<u64>>,
    pub summaries: Vec<StepSummary>,
}

impl GradientStats {
    pub fn new(cfg: &GradientStatsConfig, stages: usize) -> Self {
        GradientStats {
            edges: cfg.edges(),
            histograms: vec![vec![0; cfg.bins]; stages],
            summaries: Vec::new(),
        }
    }

    fn bin(&self, v: f64) -> usize {
        let bins = self.histograms.first().map_or(self.edges.len() - 1, |h| h.len());
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        if v < self.edges[1] {
            return 0;
        }
        if v >= self.edges[bins - 1] {
            return bins - 1;
        }
        let k = ((v / lo).ln() / (hi / lo).ln() * bins as f64).floor() as usize;
        // The log estimate can land one bin off at an edge.
        let mut k = k.clamp(1, bins - 2);
        while v < self.edges[k] {
            k -= 1;
        }
        while v >= self.edges[k + 1] {
            k += 1;
        }
        k
    }

    /// Fold one gradient buffer into stage `stage`.
    pub fn observe(&mut self, stage: usize, step: usize, grad: &[f64]) {
        let finite: Vec<f64> = grad.iter().filter(|g| g.is_finite()).map(|g| g.abs()).collect();
        let overflow = (grad.len() - finite.len()) as u64;
        for &v in &finite {
            let b = self.bin(v);
            self.histograms[stage][b] += 1;
        }
        let n = finite.len();
        let (mean, var) = if n == 0 {
            (0.0, 0.0)
        } else {
            let m = finite.iter().sum::<f64>() / n as f64;
            (m, finite.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64)
        };
        self.summaries.push(StepSummary {
            stage,
            step,
            observed: n as u64,
            overflow,
            mean_abs: mean,
            var_abs: var,
        });
    }

    /// Record the stage-output gradients held by `graph`.
    pub fn record(&mut self, step: usize, graph: &Graph, out: &ForwardOutput) {
        for (i, &v) in out.stage_outputs.iter().enumerate() {
            let g = graph.grad_tensor(v);
            self.observe(i, step, g.data());
        }
    }

    pub fn observed(&self, stage: usize) -> u64 {
        self.summaries.iter().filter(|s| s.stage == stage).map(|s| s.observed).sum()
    }

    pub fn overflow(&self, stage: usize) -> u64 {
        self.summaries.iter().filter(|s| s.stage == stage).map(|s| s.overflow).sum()
    }

    pub fn histogram_csv(&self, stage: usize) -> String {
        let h = &self.histograms[stage];
        let mut out = String::from(HISTOGRAM_HEADER);
        out.push('\n');
        for (k, c) in h.iter().enumerate() {
            let lower = if k == 0 { 0.0 } else { self.edges[k] };
            let upper = if k + 1 == h.len() { f64::INFINITY } else { self.edges[k + 1] };
            let _ = writeln!(out, "{k},{lower},{upper},{c}");
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.stage, s.step, s.observed, s.overflow, s.mean_abs, s.var_abs
            );
        }
        out
    }

    /// Writes `gradients_summary.csv` and `gradients_stage{i}.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut paths = vec![dir.join("gradients_summary.csv")];
        std::fs::write(&paths[0], self.summary_csv())?;
        for i in 0..self.histograms.len() {
            let p = dir.join(format!("gradients_stage{i}.csv"));
            std::fs::write(&p, self.histogram_csv(i))?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// Histogram rows `(lower, upper, count)`.
pub fn parse_histogram_csv(text: &str) -> Result<Vec<(f64, f64, u64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTOGRAM_HEADER) {
        return Err(Error::Data(format!("histogram file must start with '{HISTOGRAM_HEADER}'")));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Data(format!("histogram line {}: malformed", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 || f[0].parse::<usize>().ok() != Some(n) {
                return Err(bad());
            }
            Ok((
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<StepSummary>> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::Data(format!("summary file must start with '{SUMMARY_HEADER}'")));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Data(format!("summary line {}: malformed", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(StepSummary {
                stage: f[0].parse().map_err(|_| bad())?,
                step: f[1].parse().map_err(|_| bad())?,
                observed: f[2].parse().map_err(|_| bad())?,
                overflow: f[3].parse().map_err(|_| bad())?,
                mean_abs: f[4].parse().map_err(|_| bad())?,
                var_abs: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// [`StepProbe`] that records stage-output gradients during training.
pub struct GradientCollector {
    pub stats: GradientStats,
    every: usize,
}

impl GradientCollector {
    pub fn new(cfg: &GradientStatsConfig, stages: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(GradientCollector {
            stats: GradientStats::new(cfg, stages),
            every: cfg.every,
        })
    }
}

impl StepProbe for GradientCollector {
    fn after_backward(&mut self, step: usize, graph: &Graph, out: &ForwardOutput) {
        if step % self.every == 0 {
            self.stats.record(step, graph, out);
        }
    }
}

/// Forward and backward passes over `cfg.batches` shuffled batches of
/// `data`, with no parameter update. A batch whose forward pass overflows
/// is recorded as all-overflow for every stage.
pub fn gradient_stats(model: &Model, data: &Dataset, cfg: &GradientStatsConfig) -> Result<GradientStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("gradient statistics need a non-empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::derived(cfg.seed, SAMPLE_STREAM));
    let mut stats = GradientStats::new(cfg, model.stages.len());
    for (step, chunk) in order.chunks(cfg.batch_size).take(cfg.batches).enumerate() {
        let (images, labels) = data.batch(chunk, None);
        let mut s = model.session(true, true);
        let x = s.graph.constant(images);
        let out = match model.forward(&mut s, x) {
            Ok(o) => o,
            Err(Error::NonFinite { .. }) => {
                record_lost_batch(&mut stats, model, chunk.len(), step);
                continue;
            }
            Err(e) => return Err(e),
        };
        let loss = match s.graph.softmax_cross_entropy(out.logits, &labels) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => {
                record_lost_batch(&mut stats, model, chunk.len(), step);
                continue;
            }
            Err(e) => return Err(e),
        };
        let loss = s.graph.scale(loss, cfg.loss_scale)?;
        s.graph.backward(loss)?;
        stats.record(step, &s.graph, &out);
    }
    Ok(stats)
}

fn record_lost_batch(stats: &mut GradientStats, model: &Model, batch: usize, step: usize) {
    let [_, mut h, mut w] = model.config.input_shape;
    for (i, sc) in model.config.stages.iter().enumerate() {
        h = h.div_ceil(sc.stride);
        w = w.div_ceil(sc.stride);
        let n = batch * model.stages[i].width * h * w;
        stats.observe(i, step, &vec![f64::NAN; n]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_covers_the_line() {
        let cfg = GradientStatsConfig::default();
        let mut st = GradientStats::new(&cfg, 1);
        let e = st.edges.clone();
        let vals = [0.0, 1e-30, e[1] * 0.999, e[1], e[10], e[10] * 1.0001, e[63], 1e9, f64::INFINITY, f64::NAN];
        st.observe(0, 0, &vals);
        let h = &st.histograms[0];
        assert_eq!(h[0], 3);
        assert_eq!(h[1], 1);
        assert_eq!(h[10], 2);
        assert_eq!(h[63], 2);
        assert_eq!(h.iter().sum::<u64>(), 8);
        assert_eq!(st.summaries[0].overflow, 2);
        for (k, w) in e.windows(2).enumerate() {
            let mid = (w[0] * w[1]).sqrt();
            assert_eq!(st.bin(mid), k);
        }
    }

    #[test]
    fn csvs_round_trip() {
        let cfg = GradientStatsConfig::default();
        let mut st = GradientStats::new(&cfg, 2);
        st.observe(0, 0, &[0.5, -0.25, 1e-3]);
        st.observe(1, 0, &[f64::NAN, 3.0]);
        let h = parse_histogram_csv(&st.histogram_csv(0)).unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h.iter().map(|r| r.2).sum::<u64>(), 3);
        assert_eq!(h[63].1, f64::INFINITY);
        let s = parse_summary_csv(&st.summary_csv()).unwrap();
        assert_eq!(s, st.summaries);
    }
}
