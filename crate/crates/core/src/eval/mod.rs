//! Evaluation protocol: leave-one-task-out metrics, studies and search quality.

pub mod export;
mod loo;
mod metrics;
mod search;
mod studies;

pub use loo::{
    fold_seed, leave_one_out, summarize, EvaluationReport, FoldModel, LooConfig, LooOutcome,
    LooRow, LooSummary,
};
pub use metrics::{mean_std, median, midranks, pearson, percentile, r2, spearman};
pub use search::{
    search_quality_eval, Arm, SearchEvalConfig, SearchReport, SearchRow, SearchSummary,
};
pub use studies::{
    adding_tasks_study, embedding_stability_study, orient, pca, symmetric_eigen, AddingTasksConfig,
    AddingTasksReport, CurvePoint, CurveRow, EmbeddingPoint, EmbeddingStudy, Pca,
};

#[cfg(test)]
mod tests;
