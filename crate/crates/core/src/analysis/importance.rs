use std::fmt::Write as _;

use rand::RngCore;
use rayon::prelude::*;

use super::forest::{ForestConfig, Matrix, RandomForest};
use super::table;
use super::trace::AttentionTrace;
use crate::error::{Error, Result};
use crate::rng;

pub const IMPORTANCE_HEADER: &str = "stage,target_block,source_block,importance";

/// Fewest samples a forest fit accepts.
pub const MIN_SAMPLES: usize = 10;

/// Importance of each source group for predicting `targets` from
/// `inputs`. One forest is fitted per target column; constant columns are
/// skipped, per-forest importances are averaged, summed within each group
/// and normalised. `None` when no target column varies.
pub fn forest_fit_importance(
    inputs: Matrix<'_>,
    targets: Matrix<'_>,
    groups: &[usize],
    cfg: &ForestConfig,
) -> Result<Option<Vec<f64>>> {
    if inputs.rows != targets.rows {
        return Err(Error::shape("forest_fit_importance", &[inputs.rows], &[targets.rows]));
    }
    if groups.len() != inputs.cols {
        return Err(Error::shape("forest_fit_importance", &[groups.len()], &[inputs.cols]));
    }
    if inputs.rows < MIN_SAMPLES {
        return Err(Error::Data(format!(
            "importance needs at least {MIN_SAMPLES} samples, got {}",
            inputs.rows
        )));
    }
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    if (0..n_groups).any(|g| !groups.contains(&g)) {
        return Err(Error::Data("source groups must be numbered densely from 0".into()));
    }
    let columns: Vec<Vec<f64>> = (0..targets.cols)
        .map(|d| (0..targets.rows).map(|r| targets.row(r)[d]).collect())
        .collect();
    let varies = |c: &[f64]| c.iter().any(|&v| v != c[0]);
    if !columns.iter().any(|c| varies(c)) {
        return Ok(None);
    }
    if n_groups == 1 {
        return Ok(Some(vec![1.0]));
    }
    let seeds: Vec<u64> = {
        let mut r = rng::derived(cfg.seed, 0x1A);
        (0..targets.cols).map(|_| r.next_u64()).collect()
    };
    let per_dim: Vec<Option<Vec<f64>>> = columns
        .par_iter()
        .zip(&seeds)
        .map(|(col, &seed)| {
            if !varies(col) {
                return Ok(None);
            }
            let f = RandomForest::fit(inputs, col, &ForestConfig { seed, ..*cfg })?;
            Ok(f.importance())
        })
        .collect::<Result<_>>()?;
    let defined: Vec<&Vec<f64>> = per_dim.iter().flatten().collect();
    if defined.is_empty() {
        return Ok(None);
    }
    let mut grouped = vec![0.0; n_groups];
    for imp in &defined {
        for (v, &g) in imp.iter().zip(groups) {
            grouped[g] += v;
        }
    }
    let total: f64 = grouped.iter().sum();
    Ok(Some(grouped.iter().map(|v| v / total).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceRow {
    pub target_block: usize,
    /// Per earlier traced block; `None` when the target never varies.
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageImportance {
    pub stage: usize,
    pub blocks: Vec<usize>,
    /// One row per traced block after the first.
    pub rows: Vec<ImportanceRow>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportanceReport {
    pub stages: Vec<StageImportance>,
}

/// For every traced block `t` after the first, the importance of the
/// earlier maps `h_1..h_{t-1}` for predicting `h_t`.
pub fn importance_report(trace: &AttentionTrace, cfg: &ForestConfig) -> Result<ImportanceReport> {
    let mut stages = Vec::new();
    for (si, st) in trace.stages.iter().enumerate() {
        match st.blocks.len() {
            0 => continue,
            1 => {
                return Err(Error::config(format!(
                    "stage {si} has a single traced block; importance needs at least 2"
                )))
            }
            _ => {}
        }
        let samples = st.samples();
        let w = st.width;
        let mut rows = Vec::new();
        for t in 1..st.blocks.len() {
            let mut xs = Vec::with_capacity(samples * t * w);
            for s in 0..samples {
                for src in &st.h[..t] {
                    xs.extend_from_slice(&src[s]);
                }
            }
            let ys: Vec<f64> = st.h[t].iter().flatten().copied().collect();
            let groups: Vec<usize> = (0..t).flat_map(|g| std::iter::repeat(g).take(w)).collect();
            let weights = forest_fit_importance(
                Matrix::new(&xs, samples, t * w)?,
                Matrix::new(&ys, samples, w)?,
                &groups,
                cfg,
            )?;
            rows.push(ImportanceRow {
                target_block: st.blocks[t],
                weights,
            });
        }
        stages.push(StageImportance {
            stage: si,
            blocks: st.blocks.clone(),
            rows,
        });
    }
    Ok(ImportanceReport { stages })
}

impl ImportanceReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{IMPORTANCE_HEADER}\n");
        for st in &self.stages {
            for row in &st.rows {
                let t = st.blocks.iter().position(|&b| b == row.target_block).expect("traced");
                for (k, &src) in st.blocks[..t].iter().enumerate() {
                    let v = row.weights.as_ref().map(|w| format!("{:?}", w[k])).unwrap_or_default();
                    let _ = writeln!(out, "{},{},{src},{v}", st.stage, row.target_block);
                }
            }
        }
        out
    }
}

/// `(stage, target_block, source_block, importance)` rows.
pub fn parse_importance_csv(text: &str) -> Result<Vec<(usize, usize, usize, Option<f64>)>> {
    table::rows(text, IMPORTANCE_HEADER)?
        .into_iter()
        .map(|r| Ok((r.usize(0)?, r.usize(1)?, r.usize(2)?, r.opt_f64(3)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::trace::StageTrace;
    use rand::Rng;

    fn noise(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..rows * cols).map(|_| r.gen::<f64>()).collect()
    }

    fn small() -> ForestConfig {
        ForestConfig {
            n_trees: 30,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn planted_copy_dominates() {
        let (s, n) = (64, 4);
        let xs = noise(s, 3 * n, 5);
        let x = Matrix::new(&xs, s, 3 * n).unwrap();
        let ys: Vec<f64> = (0..s).flat_map(|r| vec![x.row(r)[n]; n]).collect();
        let groups: Vec<usize> = (0..3 * n).map(|c| c / n).collect();
        let imp = forest_fit_importance(x, Matrix::new(&ys, s, n).unwrap(), &groups, &small())
            .unwrap()
            .unwrap();
        assert!(imp[1] > 0.9, "{imp:?}");
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_targets_are_undefined() {
        let xs = noise(12, 4, 1);
        let ys = vec![0.5; 12 * 2];
        let groups = [0, 0, 1, 1];
        let r = forest_fit_importance(
            Matrix::new(&xs, 12, 4).unwrap(),
            Matrix::new(&ys, 12, 2).unwrap(),
            &groups,
            &small(),
        )
        .unwrap();
        assert_eq!(r, None);
    }

    #[test]
    fn too_few_samples() {
        let xs = noise(9, 2, 1);
        let ys = noise(9, 1, 2);
        let r = forest_fit_importance(
            Matrix::new(&xs, 9, 2).unwrap(),
            Matrix::new(&ys, 9, 1).unwrap(),
            &[0, 1],
            &small(),
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn two_block_stage_gives_unit_row() {
        let mut st = StageTrace::new(3, vec![0, 1], false);
        let a = noise(12, 3, 7);
        let b = noise(12, 3, 8);
        st.h[0] = a.chunks(3).map(|c| c.to_vec()).collect();
        st.h[1] = b.chunks(3).map(|c| c.to_vec()).collect();
        let rep = importance_report(&AttentionTrace { stages: vec![st] }, &small()).unwrap();
        assert_eq!(rep.stages[0].rows[0].weights, Some(vec![1.0]));
        let csv = rep.to_csv();
        assert_eq!(csv, "stage,target_block,source_block,importance\n0,1,0,1.0\n");
        assert_eq!(parse_importance_csv(&csv).unwrap(), vec![(0, 1, 0, Some(1.0))]);
    }
}
