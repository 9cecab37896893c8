//! BLEU, paired bootstrap significance, label-ablation matrices, robustness
//! summaries and report files.

pub mod ablation;
pub mod bleu;
pub mod bootstrap;
pub mod report;

pub use ablation::{
    robustness_std, run_ablation, translate_all, AblationMatrix, AblationRun, RobustnessSummary, TestSet, NONE_LABEL,
};
pub use bleu::{corpus_bleu, corpus_stats, sentence_stats, tokenize_13a, BleuScore, BleuStats, MAX_ORDER};
pub use bootstrap::{bootstrap_stats, is_significant, paired_bootstrap, SignificanceResult};
pub use report::{emit_reports, headline_csv, heatmap_svg, parse_robustness_csv, robustness_csv, Comparison};
