//! Step-level reward model: a small MLP over step features, its training
//! loop, and trace scoring.

mod loss;
mod model;
mod score;
mod train;

use serde::{Deserialize, Serialize};

pub use loss::{bce_loss, clamp_eps};
pub use model::{score_step, sigmoid, Activations, Model, TrainingMeta};
pub use score::{aggregate, score_trace, PrefixScorer, TraceScore};
pub use train::{
    auc, batch_gradient, train, train_with_report, EpochStats, TrainConfig, TrainReport,
};

/// How per-step scores become one trace score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Score of the final step.
    PrmLast,
    /// Lowest score over all steps.
    #[default]
    PrmMin,
}

impl AggregationRule {
    pub fn name(self) -> &'static str {
        match self {
            AggregationRule::PrmLast => "prm_last",
            AggregationRule::PrmMin => "prm_min",
        }
    }
}

impl std::str::FromStr for AggregationRule {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "prm_last" | "prmlast" | "last" => Ok(AggregationRule::PrmLast),
            "prm_min" | "prmmin" | "min" => Ok(AggregationRule::PrmMin),
            other => Err(crate::error::Error::Config(format!(
                "unknown aggregation rule {other:?}"
            ))),
        }
    }
}
