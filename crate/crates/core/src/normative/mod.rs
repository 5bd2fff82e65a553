//! Normative probability maps, block-maximum summaries, extreme-value
//! abnormality probabilities, AUC and region-wise association tests.

mod association;
mod auc;
mod gevd;
mod npm;

pub use association::{
    first_principal_component, region_association, simple_regression_r2, PrincipalComponent, RegionResult,
    PC_MAX_ITERS, PC_TOLERANCE,
};
pub use auc::auc;
pub use gevd::{
    abnormality_probabilities, fit_gevd, gevd_cdf, gevd_initial, gevd_loglik, gevd_quantile, GevdFit, GevdParams,
    NoveltyScores, GUMBEL_XI, MIN_GEVD_SAMPLES,
};
pub use npm::{
    compute_npm, group_difference_maps, npm_from_moments, summaries, summary_statistic, summary_statistic_with,
    top_count, Block, Npm, Sign, SummaryConfig,
};
