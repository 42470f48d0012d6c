//! Diagnostics over trained models: inter-layer correlation of attention
//! maps, forest-based importance of earlier maps, gradient statistics at
//! stage outputs and the parameter cost of sharing.

mod budget;
mod correlation;
mod forest;
mod gradients;
mod importance;
mod pearson;
mod trace;

pub use budget::{budget_report, parse_budget_csv, BudgetReport, StageBudget, BUDGET_HEADER};
pub use correlation::{
    correlation_report, default_scatter_pairs, parse_distribution_csv, parse_matrix_csv, parse_pairs_csv, scatter_csv,
    CorrelationReport, PairRow, PairStats, StageCorrelation, DISTRIBUTION_HEADER, MATRIX_HEADER, PAIRS_HEADER,
    SCATTER_HEADER,
};
pub use forest::{FeatureSubsample, ForestConfig, Matrix, RandomForest, Tree};
pub use gradients::{
    gradient_stats, parse_histogram_csv, parse_summary_csv, GradientCollector, GradientStats, GradientStatsConfig,
    StepSummary, HISTOGRAM_HEADER, SUMMARY_HEADER,
};
pub use importance::{
    forest_fit_importance, importance_report, parse_importance_csv, ImportanceReport, ImportanceRow, StageImportance,
    IMPORTANCE_HEADER, MIN_SAMPLES,
};
pub use pearson::pearson;
pub use trace::{AttentionTrace, StageTrace, TRACE_HEADER, TRACE_MAGIC};

/// Minimal reader for the headed, comma-separated report tables.
pub(crate) mod table {
    use crate::error::{Error, Result};

    pub struct Row<'a> {
        line: usize,
        fields: Vec<&'a str>,
    }

    impl Row<'_> {
        fn bad(&self, col: usize) -> Error {
            Error::Data(format!("line {}: bad value in column {}", self.line, col + 1))
        }

        pub fn usize(&self, col: usize) -> Result<usize> {
            self.fields[col].parse().map_err(|_| self.bad(col))
        }

        pub fn opt_usize(&self, col: usize) -> Result<Option<usize>> {
            match self.fields[col] {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| self.bad(col)),
            }
        }

        pub fn opt_f64(&self, col: usize) -> Result<Option<f64>> {
            match self.fields[col] {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| self.bad(col)),
            }
        }
    }

    pub fn rows<'a>(text: &'a str, header: &str) -> Result<Vec<Row<'a>>> {
        let mut lines = text.lines();
        if lines.next() != Some(header) {
            return Err(Error::Data(format!("table must start with '{header}'")));
        }
        let width = header.split(',').count();
        lines
            .enumerate()
            .map(|(n, l)| {
                let fields: Vec<&str> = l.split(',').collect();
                if fields.len() != width {
                    return Err(Error::Data(format!("line {}: expected {width} fields", n + 2)));
                }
                Ok(Row { line: n + 2, fields })
            })
            .collect()
    }
}
