use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::HardLabelRule;
use crate::env::{FeatureConfig, HorizonRange, StochasticPolicy};
use crate::error::{Error, Result};
use crate::prm::{AggregationRule, TrainConfig};
use crate::search::MatrixConfig;
use crate::trace::Domain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub domain: Domain,
    pub horizon: HorizonRange,
    pub error_rate: f64,
    pub recovery_rate: f64,
    pub spread: f64,
    /// Feature noise.
    pub sigma: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            domain: Domain::MathChain,
            horizon: HorizonRange::default(),
            error_rate: 0.2,
            recovery_rate: 0.1,
            spread: 1.0,
            sigma: 0.25,
        }
    }
}

impl EnvConfig {
    pub fn policy(&self, seed: u64) -> Result<StochasticPolicy> {
        let policy = StochasticPolicy {
            error_rate: self.error_rate,
            recovery_rate: self.recovery_rate,
            spread: self.spread,
            seed,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn features(&self, noise_seed: u64) -> FeatureConfig {
        FeatureConfig {
            sigma: self.sigma,
            noise_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_problems: usize,
    pub traces_per_problem: usize,
    pub eval_problems: usize,
    /// Cap on the number of step labels used for training.
    pub label_budget: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_problems: 1000,
            traces_per_problem: 4,
            eval_problems: 500,
            label_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub k: usize,
    pub tau: f64,
    pub hard_label_rule: HardLabelRule,
    /// Ensemble size.
    pub ensemble: usize,
    /// Rollout error rates, cycled over ensemble members.
    pub annotator_error_rates: Vec<f64>,
    /// First-error indices within this distance count as agreement.
    pub window: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            k: 16,
            tau: 0.5,
            hard_label_rule: HardLabelRule::AnySuccess,
            ensemble: 3,
            annotator_error_rates: vec![0.05, 0.1, 0.2],
            window: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Candidate counts for prm@N, maj@N and pass@N.
    pub ns: Vec<usize>,
    pub aggregation: AggregationRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ns: vec![1, 2, 4, 8],
            aggregation: AggregationRule::default(),
        }
    }
}

/// Optional comparisons beyond the base evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksConfig {
    /// Assert the strategy ordering and budget monotonicity on the matrix.
    pub search_ordering: bool,
    /// Assert prm@8 against pass@1 and maj@8.
    pub prm_effectiveness: bool,
    /// Evaluate the model on the other domain.
    pub cross_domain: bool,
    /// Ensemble-filtered against single-annotator training labels.
    pub diversity: bool,
    /// Labels per arm of the diversity comparison; defaults to the smaller
    /// of the two label pools.
    pub diversity_labels: Option<usize>,
    /// Activation similarity of selected against unselected responses.
    pub similarity: bool,
    pub similarity_problems: usize,
    /// Hidden sizes to sweep; empty skips the sweep.
    pub hidden_sweep: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub annotation: AnnotationConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
    pub matrix: Option<MatrixConfig>,
    pub checks: ChecksConfig,
}


impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.horizon.validate()?;
        self.env.policy(0)?;
        if !(self.env.sigma >= 0.0 && self.env.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma {} must be >= 0",
                self.env.sigma
            )));
        }
        if self.data.train_problems == 0
            || self.data.traces_per_problem == 0
            || self.data.eval_problems == 0
        {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.annotation.ensemble == 0 || self.annotation.annotator_error_rates.is_empty() {
            return Err(Error::Config(
                "annotation needs an ensemble and error rates".into(),
            ));
        }
        if self.annotation.k == 0 || !(self.annotation.tau > 0.0 && self.annotation.tau < 1.0) {
            return Err(Error::Config(
                "annotation k must be >= 1 and tau in (0, 1)".into(),
            ));
        }
        if self
            .annotation
            .annotator_error_rates
            .iter()
            .any(|e| !(0.0..=1.0).contains(e))
        {
            return Err(Error::Config(
                "annotator error rates must be probabilities".into(),
            ));
        }
        self.training.validate()?;
        if self.eval.ns.is_empty() || self.eval.ns.contains(&0) {
            return Err(Error::Config(
                "eval.ns must list positive candidate counts".into(),
            ));
        }
        if let Some(matrix) = &self.matrix {
            matrix.validate()?;
        }
        if self.checks.hidden_sweep.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if self.checks.prm_effectiveness && !self.eval.ns.contains(&8) {
            return Err(Error::Config("prm_effectiveness needs 8 in eval.ns".into()));
        }
        if self.checks.search_ordering && self.matrix.is_none() {
            return Err(Error::Config(
                "search_ordering needs a [matrix] section".into(),
            ));
        }
        Ok(())
    }
}
