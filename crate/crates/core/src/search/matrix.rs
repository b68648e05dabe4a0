use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::StochasticPolicy;
use crate::error::{Error, Result};
use crate::prm::{AggregationRule, Model};
use crate::scalar::Scalar;
use crate::trace::{BudgetCaps, Problem};

use super::{run_search, LatencyModel, MctsConfig, SearchConfig, Strategy};

/// Grid of strategies against per-problem caps, each cell averaged over
/// several search seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixConfig {
    pub strategies: Vec<Strategy>,
    /// Generation units per problem.
    pub budgets: Vec<u64>,
    /// Modeled wall-clock caps per problem, in milliseconds.
    pub wall_clock_caps_ms: Vec<u64>,
    pub seeds: Vec<u64>,
    pub max_children: usize,
    pub mcts: MctsConfig,
    pub aggregation: AggregationRule,
    pub latency: LatencyModel,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            strategies: Strategy::ALL.to_vec(),
            budgets: vec![16, 32, 64, 128, 256],
            wall_clock_caps_ms: vec![200, 400, 800, 1600, 3200],
            seeds: vec![0, 1, 2],
            max_children: 3,
            mcts: MctsConfig::default(),
            aggregation: AggregationRule::default(),
            latency: LatencyModel::default(),
        }
    }
}

impl MatrixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "matrix needs at least one strategy and one seed".into(),
            ));
        }
        if self
            .budgets
            .iter()
            .chain(&self.wall_clock_caps_ms)
            .any(|&b| b == 0)
        {
            return Err(Error::Config("matrix caps must be positive".into()));
        }
        self.base(Strategy::Beam, 0).validate()
    }

    fn base(&self, strategy: Strategy, seed: u64) -> SearchConfig {
        SearchConfig {
            strategy,
            max_children: self.max_children,
            mcts: self.mcts,
            aggregation: self.aggregation,
            seed,
            latency: self.latency,
            ..SearchConfig::default()
        }
    }

    /// Search settings for one problem under a generation cap. Candidate
    /// counts and beam width are sized so the work fits the cap.
    pub fn for_budget(
        &self,
        strategy: Strategy,
        seed: u64,
        budget: u64,
        horizon: usize,
    ) -> SearchConfig {
        let budget_us = budget as usize;
        let mut config = self.base(strategy, seed);
        config.caps = BudgetCaps::generation(budget);
        config.n = budget_us.max(1);
        config.max_children = self.max_children.min((budget_us / horizon).max(1));
        config.beam_width = (budget_us / (horizon * config.max_children)).max(1);
        config.mcts.iterations = 4 * budget_us.max(1);
        config
    }

    /// Search settings for one problem under a modeled wall-clock cap. Beam
    /// width fills one generation batch.
    pub fn for_wall_clock(&self, strategy: Strategy, seed: u64, cap_ms: u64) -> SearchConfig {
        let mut config = self.base(strategy, seed);
        config.caps = BudgetCaps::latency(cap_ms * 1_000_000);
        config.n = 4096;
        config.beam_width = (self.latency.batch_width / self.max_children).max(1);
        config.mcts.iterations = 4096;
        config
    }
}

/// One cell of the matrix. Exactly one of `budget_units` and
/// `wall_clock_cap_ms` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub strategy: Strategy,
    pub budget_units: Option<u64>,
    pub n_problems: usize,
    pub accuracy: f64,
    /// Standard error over all (problem, seed) runs of the cell.
    pub se: f64,
    /// Mean modeled wall clock per problem.
    pub wall_clock_ms: f64,
    #[serde(default)]
    pub wall_clock_cap_ms: Option<u64>,
}

/// Runs every (strategy, cap) cell over all problems and seeds. Problems
/// are searched in parallel; results do not depend on the worker count.
pub fn run_matrix<S: Scalar>(
    problems: &[Problem],
    policy: &StochasticPolicy,
    model: &Model<S>,
    config: &MatrixConfig,
) -> Result<Vec<MatrixRow>> {
    if problems.is_empty() {
        return Err(Error::Contract(
            "run_matrix needs at least one problem".into(),
        ));
    }
    config.validate()?;
    let mut rows = Vec::new();
    let cells = config
        .budgets
        .iter()
        .map(|&b| (Some(b), None))
        .chain(config.wall_clock_caps_ms.iter().map(|&c| (None, Some(c))));
    for (budget, cap) in cells {
        for &strategy in &config.strategies {
            let mut outcomes = Vec::with_capacity(problems.len() * config.seeds.len());
            for &seed in &config.seeds {
                let runs: Vec<(bool, u64)> = problems
                    .par_iter()
                    .map(|p| {
                        let search = match (budget, cap) {
                            (Some(b), _) => config.for_budget(strategy, seed, b, p.horizon()),
                            (_, Some(c)) => config.for_wall_clock(strategy, seed, c),
                            _ => unreachable!(),
                        };
                        run_search(p, policy, model, &search)
                            .map(|r| (r.correct, r.ledger.latency_ns))
                    })
                    .collect::<Result<_>>()?;
                outcomes.extend(runs);
            }
            let n = outcomes.len() as f64;
            let accuracy = outcomes.iter().filter(|o| o.0).count() as f64 / n;
            let latency = outcomes.iter().map(|o| o.1 as f64).sum::<f64>() / n;
            rows.push(MatrixRow {
                strategy,
                budget_units: budget,
                n_problems: problems.len(),
                accuracy,
                se: (accuracy * (1.0 - accuracy) / n).sqrt(),
                wall_clock_ms: latency / 1e6,
                wall_clock_cap_ms: cap,
            });
        }
    }
    Ok(rows)
}

pub fn write_matrix_csv(path: &Path, rows: &[MatrixRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        writer.write_record(HEADER)?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

const HEADER: [&str; 7] = [
    "strategy",
    "budget_units",
    "n_problems",
    "accuracy",
    "se",
    "wall_clock_ms",
    "wall_clock_cap_ms",
];

/// Reads a matrix CSV, naming the first missing required column.
pub fn read_matrix_csv(path: &Path) -> Result<Vec<MatrixRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if let Some(missing) = HEADER[..6]
        .iter()
        .find(|h| !headers.iter().any(|x| x == **h))
    {
        return Err(Error::Schema {
            path: path.into(),
            line: 1,
            message: format!("missing column {missing:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize().enumerate() {
        let row: MatrixRow = record.map_err(|e| Error::Schema {
            path: path.into(),
            line: i + 2,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_problems, HorizonRange, FEATURE_DIM};
    use crate::trace::Domain;

    #[test]
    fn budget_sizing_fits_the_cap() {
        let config = MatrixConfig::default();
        for t in 3..=20 {
            for b in [16u64, 32, 64, 128, 256] {
                let beam = config.for_budget(Strategy::Beam, 0, b, t);
                if (b as usize) >= t {
                    assert!(
                        beam.beam_width * beam.max_children * t <= b as usize,
                        "t={t} b={b}"
                    );
                }
            }
        }
    }

    #[test]
    fn csv_round_trip_and_schema_errors() {
        let problems = generate_problems(Domain::MathChain, 6, 3, HorizonRange::default()).unwrap();
        let policy = StochasticPolicy::new(0.2, 0.1, 1).unwrap();
        let model: Model<f64> = Model::init(FEATURE_DIM, 16, 4);
        let config = MatrixConfig {
            budgets: vec![16, 32],
            wall_clock_caps_ms: vec![300],
            seeds: vec![0],
            ..MatrixConfig::default()
        };
        let rows = run_matrix(&problems, &policy, &model, &config).unwrap();
        assert_eq!(rows.len(), 3 * 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_matrix_csv(&path, &rows).unwrap();
        assert_eq!(read_matrix_csv(&path).unwrap(), rows);

        std::fs::write(&path, "strategy,accuracy\nbeam,0.5\n").unwrap();
        assert!(matches!(read_matrix_csv(&path), Err(Error::Schema { .. })));
    }

    #[test]
    fn empty_problem_set_is_rejected() {
        let policy = StochasticPolicy::new(0.2, 0.1, 1).unwrap();
        let model: Model<f64> = Model::init(FEATURE_DIM, 16, 4);
        assert!(run_matrix(&[], &policy, &model, &MatrixConfig::default()).is_err());
    }
}
