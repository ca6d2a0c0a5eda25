//! Downstream evaluation and representation analyses.

mod forest;
mod latent;
mod metrics;
mod probe;
mod supervised;
mod sweep;

pub use forest::{rf_fit, ForestConfig, RandomForest, Tree};

pub use latent::{
    active_bit_count, aggregate_variance, bit_stats_from_bits, variance_stats_from_log_var, BitCount, BitStats,
    VarianceStats,
};
pub use probe::{
    accuracy, finetune, linear_probe, probe_model, FinetuneConfig, FinetuneOutcome, ProbeConfig, ProbeMode,
    ProbeResult,
};
pub use metrics::{compression_ratio, macro_f1};
pub use sweep::{f1_vs_units, planted_bit_features, FeatureSweepResult, PlantedBitSpec, SweepPoint};
pub use supervised::{train_supervised_bernoulli, SupervisedConfig, SupervisedOutcome};
