use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{Problem, ReasoningTrace, Step, StepContent};

use super::{verify_step, Cursor, PrefixState, Token, ALPHABET};

/// Length of every step feature vector, in both domains.
pub const FEATURE_DIM: usize = 12;

/// Bumped whenever the meaning of a feature slot changes; models record it.
pub const SCHEMA_VERSION: u32 = 1;

/// How observations of a step are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Standard deviation of the Gaussian noise on the consistency channels.
    pub sigma: f64,
    pub noise_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sigma: 0.25,
            noise_seed: 0,
        }
    }
}

/// Observation of one step in the context of its prefix.
///
/// | slot | meaning |
/// |------|---------|
/// | 0 | noisy local check: verifier bit + N(0, sigma²), clamped to [0, 1] |
/// | 1 | noisy prefix check: state still on the gold path after this step |
/// | 2 | normalized position (t + 1) / T |
/// | 3 | magnitude of the asserted value (math) / token id (code) |
/// | 4 | size of the change (math) / repeated-token flag (code) |
/// | 5 | correction marker |
/// | 6, 7 | domain one-hot (math, code) |
/// | 8 | previous step's local check (1 at the first step) |
/// | 9 | minimum local check over the prefix |
/// | 10 | mean local check over the prefix |
/// | 11 | a correction occurred somewhere in the prefix |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepFeatures(pub Vec<f64>);

impl StepFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn consistency(&self) -> f64 {
        self.0[0]
    }
}

/// Features of `step` appended to `prefix`. Equivalent to the last element of
/// [`trace_features`] on the extended trace.
pub fn extract_features(
    problem: &Problem,
    prefix: &ReasoningTrace,
    step: &Step,
    config: &FeatureConfig,
) -> Result<StepFeatures> {
    if step.index != prefix.len() {
        return Err(Error::Contract(format!(
            "step index {} does not follow a prefix of length {}",
            step.index,
            prefix.len()
        )));
    }
    let mut extended = prefix.clone();
    extended.steps.push(step.clone());
    let mut all = trace_features(problem, &extended, config)?;
    Ok(all.pop().expect("extended trace is nonempty"))
}

/// Features for every step of `trace`, computed in one pass.
pub fn trace_features(
    problem: &Problem,
    trace: &ReasoningTrace,
    config: &FeatureConfig,
) -> Result<Vec<StepFeatures>> {
    let mut extractor = FeatureExtractor::new(problem, config)?;
    if trace.problem_id != problem.id {
        return Err(Error::Contract(format!(
            "trace for {} featurized against problem {}",
            trace.problem_id, problem.id
        )));
    }
    Ok(trace.steps.iter().map(|s| extractor.push(s)).collect())
}

/// Running feature computation along one trace.
#[derive(Debug, Clone)]
pub(crate) struct FeatureExtractor<'p> {
    cursor: Cursor<'p>,
    config: FeatureConfig,
    horizon: f64,
    prev_local: f64,
    min_local: f64,
    sum_local: f64,
    seen_correction: bool,
    prev_token: Option<Token>,
}

impl<'p> FeatureExtractor<'p> {
    pub(crate) fn new(problem: &'p Problem, config: &FeatureConfig) -> Result<Self> {
        if !(config.sigma >= 0.0 && config.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "feature noise sigma {} must be >= 0",
                config.sigma
            )));
        }
        Ok(FeatureExtractor {
            cursor: Cursor::new(problem),
            config: *config,
            horizon: problem.horizon() as f64,
            prev_local: 1.0,
            min_local: 1.0,
            sum_local: 0.0,
            seen_correction: false,
            prev_token: None,
        })
    }

    pub(crate) fn cursor(&self) -> &Cursor<'p> {
        &self.cursor
    }

    pub(crate) fn push(&mut self, step: &Step) -> StepFeatures {
        let problem = self.cursor.problem();
        let before = self.cursor.state().clone();
        let local_ok = verify_step(problem, &before, step);
        self.cursor.push(step);
        let on_track = !self.cursor.state().is_corrupted();

        let mut rng = seed::rng(seed::split(
            self.config.noise_seed,
            self.cursor.prefix_hash(),
        ));
        let z_local: f64 = StandardNormal.sample(&mut rng);
        let z_prefix: f64 = StandardNormal.sample(&mut rng);
        let local = observe(local_ok, self.config.sigma * z_local);
        let prefix = observe(on_track, self.config.sigma * z_prefix);

        let t = self.cursor.position() as f64;
        let (magnitude, change, math, code) = match (&before, &step.content) {
            (PrefixState::Math { running, .. }, StepContent::Math { value, .. }) => (
                squash_log(*value, 6.0),
                squash_log(value.saturating_sub(*running), 3.0),
                1.0,
                0.0,
            ),
            (_, StepContent::Code { token, .. }) => {
                let repeated = self.prev_token == Some(*token);
                self.prev_token = Some(*token);
                (
                    token.0 as f64 / (ALPHABET.len() - 1) as f64,
                    if repeated { 1.0 } else { 0.0 },
                    0.0,
                    1.0,
                )
            }
            _ => (0.0, 0.0, 0.0, 0.0),
        };
        let correction = step.content.is_correction();
        self.seen_correction |= correction;
        let prev_local = self.prev_local;
        self.prev_local = local;
        self.min_local = self.min_local.min(local);
        self.sum_local += local;

        StepFeatures(vec![
            local,
            prefix,
            t / self.horizon,
            magnitude,
            change,
            flag(correction),
            math,
            code,
            prev_local,
            self.min_local,
            self.sum_local / t,
            flag(self.seen_correction),
        ])
    }
}

fn observe(bit: bool, noise: f64) -> f64 {
    (flag(bit) + noise).clamp(0.0, 1.0)
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn squash_log(v: i64, scale: f64) -> f64 {
    let m = (1.0 + (v as f64).abs()).log10() / scale;
    m.tanh().copysign(v as f64)
}
