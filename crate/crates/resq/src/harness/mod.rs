//! Desk-scale experiment harness: synthetic video clips with ground-truth
//! motion masks, randomly initialized toy conv stacks, and the canned
//! experiments the CLI exposes (variance, cost/accuracy sweep, policy maps).

pub mod clips;
pub mod experiments;
pub mod models;

pub use clips::{
    generate_clip, load_clips, save_clips, white_noise_clip, Clip, ClipPattern, SyntheticClipSpec,
};
pub use experiments::{
    experiment_policy_map, experiment_tradeoff, experiment_variance, policy_summary_csv,
    tradeoff_csv, variance_csv, PolicyMapResult, PolicyMapSummaryRow, TradeoffRow, TradeoffSpec,
    VarianceRow,
};
pub use models::{build_toy_model, identity_model};
