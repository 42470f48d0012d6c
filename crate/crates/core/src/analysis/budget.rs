use std::fmt::Write as _;

use super::table;
use crate::attention::{AttentionSpec, SamKind, Sharing};
use crate::backbone::{build, Model, NetworkConfig};
use crate::error::Result;

pub const BUDGET_HEADER: &str = "stage,blocks,width,shared_weights,per_block_weights,formula_weights";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageBudget {
    pub stage: usize,
    /// Blocks that receive attention.
    pub blocks: usize,
    pub width: usize,
    /// Attention weights with one unit shared by the stage.
    pub shared: usize,
    /// Attention weights with one unit per block; `None` for recurrent
    /// units, which only exist in shared form.
    pub per_block: Option<usize>,
    /// Closed-form weight count of a single unit at this width.
    pub formula: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetReport {
    pub kind: SamKind,
    /// Weight-only count of the network without attention.
    pub backbone_weights: usize,
    /// All parameters of the network without attention.
    pub backbone_total: usize,
    pub stages: Vec<StageBudget>,
}

impl BudgetReport {
    pub fn shared_total(&self) -> usize {
        self.stages.iter().map(|s| s.shared).sum()
    }

    pub fn per_block_total(&self) -> Option<usize> {
        self.stages.iter().map(|s| s.per_block).sum()
    }

    /// `100 · (1 − shared / per_block)`; `None` without a per-block form
    /// or when per-block attention has no weights.
    pub fn reduction_percent(&self) -> Option<f64> {
        let pb = self.per_block_total()?;
        (pb > 0).then(|| 100.0 * (pb - self.shared_total()) as f64 / pb as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{BUDGET_HEADER}\n");
        for s in &self.stages {
            let pb = s.per_block.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{pb},{}", s.stage, s.blocks, s.width, s.shared, s.formula);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "backbone weights: {}", self.backbone_weights);
        let _ = writeln!(out, "backbone total:   {}", self.backbone_total);
        let _ = writeln!(out, "attention, shared:    {}", self.shared_total());
        match self.per_block_total() {
            Some(pb) => {
                let _ = writeln!(out, "attention, per-block: {pb}");
            }
            None => {
                let _ = writeln!(out, "attention, per-block: n/a (recurrent unit)");
            }
        }
        if let Some(r) = self.reduction_percent() {
            let _ = writeln!(out, "reduction from sharing: {r:.1}%");
        }
        out
    }
}

fn attention_weights(model: &Model, stage: usize) -> usize {
    model
        .budget()
        .component(&format!("stage{stage}.attention"))
        .map_or(0, |c| c.weights)
}

/// Attention cost of `config.attention.kind` when shared per stage and
/// when repeated per block, next to the bare backbone.
pub fn budget_report(config: &NetworkConfig) -> Result<BudgetReport> {
    let kind = config.attention.kind;
    let with = |sharing| {
        config.clone().with_attention(AttentionSpec { kind, sharing })
    };
    let bare = build(&config.clone().with_attention(AttentionSpec::none()), 0)?;
    let shared = build(&with(Sharing::SharedPerStage), 0)?;
    let per_block = match kind {
        SamKind::DiaLstm(_) => None,
        _ => Some(build(&with(Sharing::PerBlock), 0)?),
    };
    let b = bare.budget();
    let stages = shared
        .stages
        .iter()
        .enumerate()
        .map(|(i, st)| StageBudget {
            stage: i,
            blocks: if config.stage_enabled(i) {
                st.block_mask.iter().filter(|&&m| m).count()
            } else {
                0
            },
            width: st.width,
            shared: attention_weights(&shared, i),
            per_block: per_block.as_ref().map(|m| attention_weights(m, i)),
            formula: kind.weight_count(st.width),
        })
        .collect();
    Ok(BudgetReport {
        kind,
        backbone_weights: b.weight_total(),
        backbone_total: b.total(),
        stages,
    })
}

/// Rows of the budget table; the per-block column may be empty.
pub fn parse_budget_csv(text: &str) -> Result<Vec<StageBudget>> {
    table::rows(text, BUDGET_HEADER)?
        .into_iter()
        .map(|r| {
            Ok(StageBudget {
                stage: r.usize(0)?,
                blocks: r.usize(1)?,
                width: r.usize(2)?,
                shared: r.usize(3)?,
                per_block: r.opt_usize(4)?,
                formula: r.usize(5)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LstmCellConfig;

    fn tiny(kind: SamKind, blocks: usize) -> NetworkConfig {
        NetworkConfig::named("tiny-dia")
            .unwrap()
            .with_blocks_per_stage(blocks)
            .with_attention(AttentionSpec {
                kind,
                sharing: Sharing::SharedPerStage,
            })
    }

    #[test]
    fn se_ratio_is_one_over_blocks() {
        for blocks in 1..=4 {
            let r = budget_report(&tiny(SamKind::Se { reduction: 4 }, blocks)).unwrap();
            for s in &r.stages {
                assert_eq!(s.per_block, Some(s.shared * blocks));
                assert_eq!(s.shared, s.formula);
            }
            let expect = 100.0 * (blocks - 1) as f64 / blocks as f64;
            assert!((r.reduction_percent().unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dia_has_no_per_block_form() {
        let r = budget_report(&tiny(SamKind::DiaLstm(LstmCellConfig::modified(4)), 3)).unwrap();
        assert_eq!(r.per_block_total(), None);
        assert_eq!(r.reduction_percent(), None);
        for s in &r.stages {
            assert_eq!(s.shared, s.formula);
        }
        let back = parse_budget_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r.stages);
    }
}
