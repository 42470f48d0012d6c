use std::fmt::Write as _;

use rayon::prelude::*;

use super::pearson::pearson;
use super::table;
use super::trace::AttentionTrace;
use crate::error::{Error, Result};

pub const PAIRS_HEADER: &str = "stage,block_i,block_j,mean,median,defined,undefined";
pub const MATRIX_HEADER: &str = "stage,block_i,block_j,mean";
pub const DISTRIBUTION_HEADER: &str = "stage,block_i,block_j,sample,coefficient";
pub const SCATTER_HEADER: &str = "stage,block_i,block_j,sample,channel,h_i,h_j";

/// Coefficients of one block pair across samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PairStats {
    pub block_i: usize,
    pub block_j: usize,
    /// Per sample; `None` where either map is constant.
    pub coefficients: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub undefined: usize,
}

impl PairStats {
    fn new(block_i: usize, block_j: usize, coefficients: Vec<Option<f64>>) -> Self {
        let mut defined: Vec<f64> = coefficients.iter().flatten().copied().collect();
        let undefined = coefficients.len() - defined.len();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        defined.sort_by(f64::total_cmp);
        let median = match defined.len() {
            0 => None,
            n if n % 2 == 1 => Some(defined[n / 2]),
            n => Some(0.5 * (defined[n / 2 - 1] + defined[n / 2])),
        };
        PairStats {
            block_i,
            block_j,
            coefficients,
            mean,
            median,
            undefined,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageCorrelation {
    pub stage: usize,
    pub blocks: Vec<usize>,
    /// Pairs `i < j` in row-major order over traced positions.
    pub pairs: Vec<PairStats>,
    /// Mean of the defined pair means.
    pub grand_mean: Option<f64>,
}

impl StageCorrelation {
    /// Symmetric matrix of pair means over traced positions; the diagonal
    /// is 1.
    pub fn matrix(&self) -> Vec<Vec<Option<f64>>> {
        let n = self.blocks.len();
        let mut m = vec![vec![None; n]; n];
        for (k, row) in m.iter_mut().enumerate() {
            row[k] = Some(1.0);
        }
        let pos = |b: usize| self.blocks.iter().position(|&x| x == b).expect("traced block");
        for p in &self.pairs {
            let (a, b) = (pos(p.block_i), pos(p.block_j));
            m[a][b] = p.mean;
            m[b][a] = p.mean;
        }
        m
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrelationReport {
    pub stages: Vec<StageCorrelation>,
}

/// Pearson coefficients between the maps of every block pair of every
/// stage, per sample. Stages without traced blocks are skipped; a stage
/// with exactly one is an error.
pub fn correlation_report(trace: &AttentionTrace) -> Result<CorrelationReport> {
    let mut stages = Vec::new();
    for (si, st) in trace.stages.iter().enumerate() {
        match st.blocks.len() {
            0 => continue,
            1 => {
                return Err(Error::config(format!(
                    "stage {si} has a single traced block; correlation needs at least 2"
                )))
            }
            _ => {}
        }
        let idx: Vec<(usize, usize)> = (0..st.blocks.len())
            .flat_map(|a| (a + 1..st.blocks.len()).map(move |b| (a, b)))
            .collect();
        let pairs: Vec<PairStats> = idx
            .par_iter()
            .map(|&(a, b)| {
                let coeffs = st.h[a]
                    .iter()
                    .zip(&st.h[b])
                    .map(|(u, v)| pearson(u, v))
                    .collect::<Result<Vec<_>>>()?;
                Ok(PairStats::new(st.blocks[a], st.blocks[b], coeffs))
            })
            .collect::<Result<_>>()?;
        let means: Vec<f64> = pairs.iter().filter_map(|p| p.mean).collect();
        let grand_mean = (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64);
        stages.push(StageCorrelation {
            stage: si,
            blocks: st.blocks.clone(),
            pairs,
            grand_mean,
        });
    }
    Ok(CorrelationReport { stages })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CorrelationReport {
    pub fn pairs_csv(&self) -> String {
        let mut out = format!("{PAIRS_HEADER}\n");
        for st in &self.stages {
            for p in &st.pairs {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    st.stage,
                    p.block_i,
                    p.block_j,
                    opt(p.mean),
                    opt(p.median),
                    p.coefficients.len() - p.undefined,
                    p.undefined
                );
            }
        }
        out
    }

    pub fn matrix_csv(&self) -> String {
        let mut out = format!("{MATRIX_HEADER}\n");
        for st in &self.stages {
            let m = st.matrix();
            for (a, row) in m.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{}", st.stage, st.blocks[a], st.blocks[b], opt(*v));
                }
            }
        }
        out
    }

    pub fn distribution_csv(&self) -> String {
        let mut out = format!("{DISTRIBUTION_HEADER}\n");
        for st in &self.stages {
            for p in &st.pairs {
                for (k, c) in p.coefficients.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{k},{}", st.stage, p.block_i, p.block_j, opt(*c));
                }
            }
        }
        out
    }

    /// One line per analysed stage with its grand mean.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for st in &self.stages {
            let undefined: usize = st.pairs.iter().map(|p| p.undefined).sum();
            let _ = writeln!(
                out,
                "stage {}: {} blocks, {} pairs, mean correlation {}, undefined coefficients {}",
                st.stage,
                st.blocks.len(),
                st.pairs.len(),
                st.grand_mean.map_or("undefined".to_string(), |m| format!("{m:.4}")),
                undefined
            );
        }
        out
    }
}

/// A row of the pairs table.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    pub stage: usize,
    pub block_i: usize,
    pub block_j: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

pub fn parse_pairs_csv(text: &str) -> Result<Vec<PairRow>> {
    table::rows(text, PAIRS_HEADER)?
        .into_iter()
        .map(|r| {
            Ok(PairRow {
                stage: r.usize(0)?,
                block_i: r.usize(1)?,
                block_j: r.usize(2)?,
                mean: r.opt_f64(3)?,
                median: r.opt_f64(4)?,
                defined: r.usize(5)?,
                undefined: r.usize(6)?,
            })
        })
        .collect()
}

/// `(stage, block_i, block_j, mean)` rows of the matrix table.
pub fn parse_matrix_csv(text: &str) -> Result<Vec<(usize, usize, usize, Option<f64>)>> {
    table::rows(text, MATRIX_HEADER)?
        .into_iter()
        .map(|r| Ok((r.usize(0)?, r.usize(1)?, r.usize(2)?, r.opt_f64(3)?)))
        .collect()
}

/// `(stage, block_i, block_j, sample, coefficient)` rows.
pub fn parse_distribution_csv(text: &str) -> Result<Vec<(usize, usize, usize, usize, Option<f64>)>> {
    table::rows(text, DISTRIBUTION_HEADER)?
        .into_iter()
        .map(|r| Ok((r.usize(0)?, r.usize(1)?, r.usize(2)?, r.usize(3)?, r.opt_f64(4)?)))
        .collect()
}

/// Two pairs of the first analysable stage: the first two traced blocks
/// and the first against the last.
pub fn default_scatter_pairs(trace: &AttentionTrace) -> Vec<(usize, usize, usize)> {
    let Some((si, st)) = trace.stages.iter().enumerate().find(|(_, s)| s.blocks.len() >= 2) else {
        return vec![];
    };
    let b = &st.blocks;
    let mut out = vec![(si, b[0], b[1])];
    if b.len() > 2 {
        out.push((si, b[0], b[b.len() - 1]));
    }
    out
}

/// Channel-level `(h_i, h_j)` points of the chosen pairs, for scatter plots.
pub fn scatter_csv(trace: &AttentionTrace, pairs: &[(usize, usize, usize)]) -> Result<String> {
    let mut out = format!("{SCATTER_HEADER}\n");
    for &(si, bi, bj) in pairs {
        let st = trace
            .stages
            .get(si)
            .ok_or_else(|| Error::config(format!("trace has no stage {si}")))?;
        let pos = |b: usize| {
            st.blocks
                .iter()
                .position(|&x| x == b)
                .ok_or_else(|| Error::config(format!("stage {si} has no traced block {b}")))
        };
        let (a, b) = (pos(bi)?, pos(bj)?);
        for (k, (u, v)) in st.h[a].iter().zip(&st.h[b]).enumerate() {
            for (c, (x, y)) in u.iter().zip(v).enumerate() {
                let _ = writeln!(out, "{si},{bi},{bj},{k},{c},{x},{y}");
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::trace::StageTrace;

    fn trace_of(maps: Vec<Vec<Vec<f64>>>) -> AttentionTrace {
        let width = maps[0][0].len();
        let mut st = StageTrace::new(width, (0..maps.len()).collect(), false);
        st.h = maps;
        AttentionTrace { stages: vec![st] }
    }

    #[test]
    fn identical_maps_give_one() {
        let m = vec![vec![0.1, 0.7, 0.3], vec![0.9, 0.2, 0.5]];
        let r = correlation_report(&trace_of(vec![m.clone(), m.clone(), m])).unwrap();
        let st = &r.stages[0];
        assert_eq!(st.pairs.len(), 3);
        for p in &st.pairs {
            assert!((p.mean.unwrap() - 1.0).abs() < 1e-12);
        }
        assert!((st.grand_mean.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_maps_give_zero() {
        let a = vec![vec![1.0, -1.0, 1.0, -1.0]];
        let b = vec![vec![1.0, 1.0, -1.0, -1.0]];
        let r = correlation_report(&trace_of(vec![a, b])).unwrap();
        assert!(r.stages[0].pairs[0].mean.unwrap().abs() < 1e-15);
    }

    #[test]
    fn constant_maps_are_counted_not_averaged() {
        let a = vec![vec![0.5, 0.5], vec![0.1, 0.2]];
        let b = vec![vec![0.3, 0.4], vec![0.3, 0.4]];
        let r = correlation_report(&trace_of(vec![a, b])).unwrap();
        let p = &r.stages[0].pairs[0];
        assert_eq!(p.undefined, 1);
        assert_eq!(p.mean, Some(1.0));
    }

    #[test]
    fn single_block_stage_is_rejected() {
        let t = trace_of(vec![vec![vec![0.1, 0.2]]]);
        assert!(matches!(correlation_report(&t), Err(Error::Config(_))));
    }

    #[test]
    fn matrix_is_symmetric_and_csvs_parse() {
        let t = trace_of(vec![
            vec![vec![0.1, 0.4, 0.2], vec![0.3, 0.3, 0.9]],
            vec![vec![0.2, 0.1, 0.7], vec![0.5, 0.6, 0.1]],
            vec![vec![0.9, 0.4, 0.3], vec![0.2, 0.8, 0.4]],
        ]);
        let r = correlation_report(&t).unwrap();
        let m = r.stages[0].matrix();
        for a in 0..3 {
            assert_eq!(m[a][a], Some(1.0));
            for b in 0..3 {
                assert_eq!(m[a][b], m[b][a]);
            }
        }
        let pairs = parse_pairs_csv(&r.pairs_csv()).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[1].mean, r.stages[0].pairs[1].mean);
        assert_eq!(parse_matrix_csv(&r.matrix_csv()).unwrap().len(), 9);
        assert_eq!(parse_distribution_csv(&r.distribution_csv()).unwrap().len(), 6);
        let sc = scatter_csv(&t, &default_scatter_pairs(&t)).unwrap();
        assert_eq!(sc.lines().count(), 1 + 2 * 2 * 3);
    }
}
