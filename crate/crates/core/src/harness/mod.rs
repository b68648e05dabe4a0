//! Experiment orchestration: configuration, the seeded end-to-end pipeline
//! (generate, annotate, filter, train, search, report), metrics and curves.
//!
//! Master-seed streams: 1 training problems, 2 evaluation problems, 3 policy,
//! 4 annotators, 5 feature noise, 6 training, 7 other-domain problems,
//! 8 candidate sampling.

mod config;
mod metrics;
mod results;
mod stages;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use config::{
    AnnotationConfig, ChecksConfig, DataConfig, EnvConfig, EvalConfig, ExperimentConfig,
};
pub use metrics::{
    candidate_runs, compute_metrics, metric_contract_violations, rescore_runs, standard_error,
    Metric, MetricRow,
};
pub use results::{
    curves, emit_curves, read_results_csv, write_results_csv, Curve, ResultRow, Series,
    RESULT_COLUMNS,
};
pub use stages::{
    annotate_corpus, attach_problems, problem_index, sample_traces, step_dataset, Annotations,
};

use crate::env::generate_problems;
use crate::error::{Error, Result};
use crate::prm::{train_with_report, Model, TrainConfig};
use crate::search::{run_matrix, SearchRun, Strategy};
use crate::seed::split;
use crate::similarity::{cross_domain_eval, set_similarity};
use crate::trace::{write_jsonl, write_labels, Domain, LabeledTrace, Problem};

/// One pass/fail line of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub checks: Vec<Check>,
    pub artifacts: Vec<PathBuf>,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// `a` is at least `b + margin`, allowing one combined standard error.
pub fn at_least(a: (f64, f64), b: (f64, f64), margin: f64) -> bool {
    a.0 - b.0 + a.1.hypot(b.1) >= margin
}

/// `a` exceeds `b`, allowing one combined standard error.
pub fn exceeds(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 - b.0 + a.1.hypot(b.1) > 0.0
}

fn other_domain(d: Domain) -> Domain {
    match d {
        Domain::MathChain => Domain::CodeAssembly,
        Domain::CodeAssembly => Domain::MathChain,
    }
}

fn find<'r>(
    rows: &'r [ResultRow],
    experiment: &str,
    variant: &str,
    metric: &str,
    n: usize,
) -> Option<&'r ResultRow> {
    rows.iter().find(|r| {
        r.experiment == experiment && r.variant == variant && r.metric == metric && r.n == Some(n)
    })
}

fn vs(r: &ResultRow) -> (f64, f64) {
    (r.value, r.se)
}

fn fmt(r: &ResultRow) -> String {
    let what = match r.n {
        Some(n) => format!("{}@{n}", r.metric),
        None => r.metric.clone(),
    };
    format!("{what} = {:.4} ± {:.4}", r.value, r.se)
}

/// Runs the whole pipeline and writes its artifacts into `out_dir`:
/// `results.csv`, `runs.jsonl`, `model.json`, `labels.jsonl` and
/// `report.md`. With `workers`, work runs on a pool of that many threads;
/// outputs do not depend on it. A failing stage aborts with its name and
/// leaves the artifacts written so far in place.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<ExperimentOutput> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    pool.install(|| Runner::new(config, out_dir).run())
}

struct Runner<'c> {
    config: &'c ExperimentConfig,
    out: &'c Path,
    rows: Vec<ResultRow>,
    checks: Vec<Check>,
    artifacts: Vec<PathBuf>,
}

impl<'c> Runner<'c> {
    fn new(config: &'c ExperimentConfig, out: &'c Path) -> Self {
        Runner {
            config,
            out,
            rows: Vec::new(),
            checks: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.out.join(name);
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(path);
        Ok(())
    }

    fn train(
        &self,
        dataset: &[(crate::env::StepFeatures, bool)],
        hidden_dim: usize,
    ) -> Result<(Model<f64>, crate::prm::TrainReport)> {
        let c = self.config;
        let tc = TrainConfig {
            hidden_dim,
            seed: split(split(c.seed, 6), c.training.seed),
            ..c.training
        };
        let (mut model, report) =
            train_with_report::<f64>(dataset, c.env.features(split(c.seed, 5)), &tc)?;
        model.aggregation = c.eval.aggregation;
        Ok((model, report))
    }

    fn metric_rows(
        &mut self,
        experiment: &str,
        variant: &str,
        runs: &[SearchRun],
    ) -> Result<Vec<ResultRow>> {
        let rows: Vec<ResultRow> =
            compute_metrics(runs, &self.config.eval.ns, self.config.eval.aggregation)?
                .iter()
                .map(|m| ResultRow::from_metric(experiment, variant, m))
                .collect();
        self.rows.extend(rows.iter().cloned());
        Ok(rows)
    }

    fn run(mut self) -> Result<ExperimentOutput> {
        let result = self.pipeline();
        // Whatever happened, keep the rows gathered so far.
        let csv = self.out.join("results.csv");
        write_results_csv(&csv, &self.rows)?;
        self.artifacts.push(csv);
        result?;
        let report = self.out.join("report.md");
        std::fs::write(
            &report,
            render_report(self.config, &self.rows, &self.checks),
        )
        .map_err(|e| Error::io(&report, e))?;
        self.artifacts.push(report);
        Ok(ExperimentOutput {
            rows: self.rows,
            checks: self.checks,
            artifacts: self.artifacts,
        })
    }

    fn pipeline(&mut self) -> Result<()> {
        let c = self.config;
        let s = c.seed;
        let domain = c.env.domain;
        let dname = domain.name();
        let policy = c.env.policy(split(s, 3))?;

        let (train_problems, eval_problems) = (|| {
            Ok::<_, Error>((
                generate_problems(domain, c.data.train_problems, split(s, 1), c.env.horizon)?,
                generate_problems(domain, c.data.eval_problems, split(s, 2), c.env.horizon)?,
            ))
        })()
        .map_err(|e| e.in_stage("gen-data"))?;

        let index = problem_index(&train_problems);
        let (annotations, labeled) = (|| {
            let traces = sample_traces(&train_problems, &policy, c.data.traces_per_problem);
            let ann = annotate_corpus(&index, &traces, policy, &c.annotation, split(s, 4))?;
            let filtered = ann.filtered(&c.annotation)?;
            let labeled = attach_problems(&index, &filtered.retained)?;
            write_labels(&self.out.join("labels.jsonl"), &labeled)?;
            let stats = filtered.stats;
            let retention = if stats.groups == 0 {
                0.0
            } else {
                stats.retained as f64 / stats.groups as f64
            };
            self.rows.push(ResultRow::stat(
                "annotation",
                dname,
                "retention",
                stats.groups,
                retention,
                0.0,
            ));
            let labels: usize = labeled.iter().map(|l| l.annotation.labels.len()).sum();
            self.rows.push(ResultRow::stat(
                "annotation",
                dname,
                "labels",
                stats.retained,
                labels as f64,
                0.0,
            ));
            self.rows.push(ResultRow::stat(
                "annotation",
                dname,
                "inconsistent",
                traces.len(),
                ann.inconsistent as f64,
                0.0,
            ));
            Ok::<_, Error>((ann, labeled))
        })()
        .map_err(|e| e.in_stage("annotate"))?;
        self.artifacts.push(self.out.join("labels.jsonl"));

        let features = c.env.features(split(s, 5));
        let (model, dataset) = (|| {
            let dataset = step_dataset(&labeled, &features, c.data.label_budget)?;
            let (model, report) = self.train(&dataset, c.training.hidden_dim)?;
            self.write_json("model.json", &model)?;
            let n = report.curve.len();
            self.rows.push(ResultRow::stat(
                "training",
                dname,
                "validation_auc",
                n,
                report.validation_auc,
                0.0,
            ));
            for e in &report.curve {
                let mut row = ResultRow::stat(
                    "training",
                    dname,
                    "validation_accuracy",
                    dataset.len(),
                    e.validation_accuracy,
                    0.0,
                );
                row.n = Some(e.epoch);
                self.rows.push(row);
            }
            Ok::<_, Error>((model, dataset))
        })()
        .map_err(|e| e.in_stage("train-prm"))?;

        let max_n = c.eval.ns.iter().copied().max().unwrap_or(1);
        let pick_n = max_n.min(8);
        let runs = (|| {
            let runs = candidate_runs(
                &eval_problems,
                &policy,
                &model,
                max_n,
                c.eval.aggregation,
                split(s, 8),
            )?;
            write_jsonl(&self.out.join("runs.jsonl"), &runs)?;
            Ok::<_, Error>(runs)
        })()
        .map_err(|e| e.in_stage("search"))?;
        self.artifacts.push(self.out.join("runs.jsonl"));

        let eval_rows = self
            .metric_rows("metrics", dname, &runs)
            .map_err(|e| e.in_stage("metrics"))?;
        self.contract_check("metrics", &eval_rows);
        if c.checks.prm_effectiveness {
            let get = |m: &str, n: usize| find(&eval_rows, "metrics", dname, m, n).cloned();
            if let (Some(prm), Some(p1), Some(maj)) =
                (get("prm", 8), get("pass1", 1), get("maj", 8))
            {
                let ok = at_least(vs(&prm), vs(&p1), 0.05) && at_least(vs(&prm), vs(&maj), 0.01);
                self.check(
                    "prm_effectiveness",
                    ok,
                    format!(
                        "{}; {}; {} (margins 0.05 and 0.01)",
                        fmt(&prm),
                        fmt(&p1),
                        fmt(&maj)
                    ),
                );
            }
        }

        if let Some(matrix) = &c.matrix {
            let rows = run_matrix(&eval_problems, &policy, &model, matrix)
                .map_err(|e| e.in_stage("run-matrix"))?;
            let rows: Vec<ResultRow> = rows
                .iter()
                .map(|m| ResultRow::from_matrix("matrix", dname, m))
                .collect();
            if c.checks.search_ordering {
                self.ordering_checks(&rows);
            }
            self.rows.extend(rows);
        }

        let needs_other = c.checks.cross_domain || c.checks.similarity;
        let other = other_domain(domain);
        let other_data = if needs_other {
            (|| {
                let problems =
                    generate_problems(other, c.data.eval_problems, split(s, 7), c.env.horizon)?;
                let (_, runs) =
                    cross_domain_eval(&model, &problems, &policy, &c.eval.ns, split(s, 8))?;
                Ok::<_, Error>((problems, runs))
            })()
            .map_err(|e| e.in_stage("cross-domain"))?
        } else {
            (Vec::new(), Vec::new())
        };

        if c.checks.cross_domain {
            let oname = other.name();
            let rows = self
                .metric_rows("cross_domain", oname, &other_data.1)
                .map_err(|e| e.in_stage("cross-domain"))?;
            self.contract_check("cross_domain", &rows);
            let prm = find(&rows, "cross_domain", oname, "prm", pick_n).cloned();
            let maj = find(&rows, "cross_domain", oname, "maj", pick_n).cloned();
            if let (Some(prm), Some(maj)) = (prm, maj) {
                self.check(
                    "cross_domain",
                    exceeds(vs(&prm), vs(&maj)),
                    format!("{oname}: {} vs {}", fmt(&prm), fmt(&maj)),
                );
            }
        }

        let eval_index = problem_index(&eval_problems);
        if c.checks.diversity {
            self.diversity(&annotations, &index, &eval_index, &runs, pick_n)
                .map_err(|e| e.in_stage("diversity"))?;
        }

        if c.checks.similarity {
            let mut all = eval_index.clone();
            all.extend(other_data.0.iter().map(|p| (p.id.clone(), p.clone())));
            self.similarity(&model, &all, &runs, &other_data.1, pick_n, other)
                .map_err(|e| e.in_stage("similarity"))?;
        }

        if !c.checks.hidden_sweep.is_empty() {
            self.hidden_sweep(&dataset, &eval_index, &runs, pick_n)
                .map_err(|e| e.in_stage("hidden-sweep"))?;
        }
        Ok(())
    }

    fn contract_check(&mut self, experiment: &str, rows: &[ResultRow]) {
        let metric_rows: Vec<MetricRow> = rows
            .iter()
            .filter_map(|r| {
                let metric = match r.metric.as_str() {
                    "prm" => Metric::PrmAtN,
                    "maj" => Metric::MajAtN,
                    "pass" => Metric::PassAtN,
                    "pass1" => Metric::Pass1,
                    _ => return None,
                };
                Some(MetricRow {
                    metric,
                    n: r.n?,
                    accuracy: r.value,
                    se: r.se,
                    n_problems: r.n_problems,
                    strategy: Strategy::BestOfN,
                    aggregation: self.config.eval.aggregation,
                })
            })
            .collect();
        let violations = metric_contract_violations(&metric_rows);
        let detail = if violations.is_empty() {
            format!("{experiment}: prm@1 = maj@1 = pass@1, pass@N nondecreasing, prm@N and maj@N <= pass@N")
        } else {
            format!("{experiment}: {}", violations.join("; "))
        };
        self.check(
            &format!("metric_contracts_{experiment}"),
            violations.is_empty(),
            detail,
        );
    }

    fn ordering_checks(&mut self, rows: &[ResultRow]) {
        let cell = |strategy: Strategy, budget: Option<u64>, cap: Option<u64>| {
            rows.iter().find(|r| {
                r.strategy == strategy.name()
                    && r.budget_units == budget
                    && r.wall_clock_cap_ms == cap
                    && (budget.is_some() || cap.is_some())
            })
        };
        let describe = |r: &ResultRow| format!("{} {:.4} ± {:.4}", r.strategy, r.value, r.se);
        let order = [
            Strategy::Mcts,
            Strategy::Beam,
            Strategy::BestOfN,
            Strategy::MajorityVote,
        ];
        let mut budgets: Vec<u64> = rows.iter().filter_map(|r| r.budget_units).collect();
        budgets.sort_unstable();
        budgets.dedup();
        for &b in budgets.iter().filter(|&&b| b >= 64) {
            let present: Vec<&ResultRow> = order
                .iter()
                .filter_map(|&s| cell(s, Some(b), None))
                .collect();
            let ok = present
                .windows(2)
                .all(|w| at_least(vs(w[0]), vs(w[1]), 0.0));
            let detail = present
                .iter()
                .map(|r| describe(r))
                .collect::<Vec<_>>()
                .join(" >= ");
            self.check(
                &format!("search_ordering_budget_{b}"),
                ok,
                format!("budget {b}: {detail}"),
            );
        }
        if let Some(&cap) = rows
            .iter()
            .filter_map(|r| r.wall_clock_cap_ms)
            .collect::<Vec<_>>()
            .iter()
            .min()
        {
            if let Some(bon) = cell(Strategy::BestOfN, None, Some(cap)) {
                let others: Vec<&ResultRow> = order
                    .iter()
                    .filter(|&&s| s != Strategy::BestOfN)
                    .filter_map(|&s| cell(s, None, Some(cap)))
                    .collect();
                let ok = others.iter().all(|o| at_least(vs(bon), vs(o), 0.0));
                let detail = others
                    .iter()
                    .map(|r| describe(r))
                    .collect::<Vec<_>>()
                    .join(", ");
                self.check(
                    "wall_clock_ordering",
                    ok,
                    format!("cap {cap} ms: {} vs {detail}", describe(bon)),
                );
            }
        }
        for s in order {
            let series: Vec<&ResultRow> = budgets
                .iter()
                .filter_map(|&b| cell(s, Some(b), None))
                .collect();
            if series.len() < 2 {
                continue;
            }
            let ok = series.windows(2).all(|w| at_least(vs(w[1]), vs(w[0]), 0.0));
            let detail = series
                .iter()
                .map(|r| format!("{}: {:.4}", r.budget_units.unwrap_or(0), r.value))
                .collect::<Vec<_>>()
                .join(", ");
            self.check(
                &format!("budget_monotone_{}", s.name()),
                ok,
                format!("{} {detail}", s.name()),
            );
        }
    }

    /// Ensemble-filtered against single-annotator labels at a matched label
    /// count, both scored on the same candidate pool.
    fn diversity(
        &mut self,
        annotations: &Annotations,
        train_index: &HashMap<String, Problem>,
        eval_index: &HashMap<String, Problem>,
        runs: &[SearchRun],
        n: usize,
    ) -> Result<()> {
        let c = self.config;
        let features = c.env.features(split(c.seed, 5));
        let filtered =
            attach_problems(train_index, &annotations.filtered(&c.annotation)?.retained)?;
        let single = attach_problems(train_index, &annotations.single(0))?;
        let count = |l: &[LabeledTrace]| l.iter().map(|x| x.annotation.labels.len()).sum::<usize>();
        let budget = c
            .checks
            .diversity_labels
            .unwrap_or_else(|| count(&filtered).min(count(&single)));
        let mut results = Vec::new();
        for (variant, labeled) in [
            ("ensemble_filtered", &filtered),
            ("single_annotator", &single),
        ] {
            let dataset = step_dataset(labeled, &features, Some(budget))?;
            let (model, _) = self.train(&dataset, c.training.hidden_dim)?;
            let rescored = rescore_runs(runs, eval_index, &model, c.eval.aggregation)?;
            let rows = compute_metrics(&rescored, &[n], c.eval.aggregation)?;
            let row = rows
                .iter()
                .find(|r| r.metric == Metric::PrmAtN)
                .expect("prm row");
            let mut row = ResultRow::from_metric("diversity", variant, row);
            row.budget_units = Some(budget as u64);
            results.push(row.clone());
            self.rows.push(row);
        }
        self.check(
            "diversity",
            at_least(vs(&results[0]), vs(&results[1]), 0.0),
            format!(
                "{budget} labels: ensemble-filtered {} vs single annotator {}",
                fmt(&results[0]),
                fmt(&results[1])
            ),
        );
        Ok(())
    }

    /// Activation similarity of PRM-selected best-of-N responses across
    /// domains against that of first (unselected) responses.
    fn similarity(
        &mut self,
        model: &Model<f64>,
        problems: &HashMap<String, Problem>,
        home: &[SearchRun],
        away: &[SearchRun],
        n: usize,
        other: Domain,
    ) -> Result<()> {
        let k = self.config.checks.similarity_problems.max(1);
        let (dn, on) = (self.config.env.domain.name(), other.name());
        let selected = |runs: &[SearchRun]| {
            runs.iter()
                .take(k)
                .map(|r| {
                    let scores: Vec<f64> = r.candidates[..n]
                        .iter()
                        .map(|c| c.score.unwrap_or(0.0))
                        .collect();
                    let i = crate::search::argmax(&scores).unwrap_or(0);
                    r.candidates[i].trace.clone()
                })
                .collect::<Vec<_>>()
        };
        let first = |runs: &[SearchRun]| {
            runs.iter()
                .take(k)
                .map(|r| r.candidates[0].trace.clone())
                .collect::<Vec<_>>()
        };
        let (a_prm, b_prm) = (selected(home), selected(away));
        let (a, b) = (first(home), first(away));
        let with_prm = set_similarity(
            model,
            problems,
            (&format!("{dn}_prm"), &a_prm),
            (&format!("{on}_prm"), &b_prm),
        )?;
        let plain = set_similarity(model, problems, (dn, &a), (on, &b))?;
        let mut out = Vec::new();
        for report in [&with_prm, &plain] {
            let variant = format!("{}~{}", report.set_a, report.set_b);
            let row = ResultRow::stat(
                "similarity",
                &variant,
                "mean_s",
                a.len().min(b.len()),
                report.mean_s,
                0.0,
            );
            out.push(row.clone());
            self.rows.push(row);
            self.rows.push(ResultRow::stat(
                "similarity",
                &variant,
                "sum_s",
                a.len().min(b.len()),
                report.sum_s,
                0.0,
            ));
        }
        self.check(
            "similarity",
            with_prm.mean_s > plain.mean_s,
            format!(
                "{}: {:.4} vs {}: {:.4}",
                out[0].variant, out[0].value, out[1].variant, out[1].value
            ),
        );
        Ok(())
    }

    fn hidden_sweep(
        &mut self,
        dataset: &[(crate::env::StepFeatures, bool)],
        eval_index: &HashMap<String, Problem>,
        runs: &[SearchRun],
        n: usize,
    ) -> Result<()> {
        let c = self.config;
        let mut acc = Vec::new();
        for &h in &c.checks.hidden_sweep {
            let (model, _) = self.train(dataset, h)?;
            let rescored = rescore_runs(runs, eval_index, &model, c.eval.aggregation)?;
            let rows = compute_metrics(&rescored, &[n], c.eval.aggregation)?;
            let row = rows
                .iter()
                .find(|r| r.metric == Metric::PrmAtN)
                .expect("prm row");
            let row = ResultRow::from_metric("hidden_sweep", &format!("h{h}"), row);
            acc.push((h, row.value));
            self.rows.push(row);
        }
        let get = |h: usize| acc.iter().find(|x| x.0 == h).map(|x| x.1);
        if let (Some(a2), Some(a4), Some(a16), Some(a32)) = (get(2), get(4), get(16), get(32)) {
            let (small, large) = (a4 - a2, a32 - a16);
            self.check(
                "hidden_sweep_diminishing_returns",
                large < small,
                format!("prm@{n} gain 2->4: {small:.4}, 16->32: {large:.4}"),
            );
        }
        Ok(())
    }
}

fn render_report(config: &ExperimentConfig, rows: &[ResultRow], checks: &[Check]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Experiment report\n");
    let _ = writeln!(
        s,
        "Domain `{}`, master seed {}. Every number below is a row of `results.csv`.\n",
        config.env.domain.name(),
        config.seed
    );
    let mut experiments: Vec<&str> = Vec::new();
    for r in rows {
        if !experiments.contains(&r.experiment.as_str()) {
            experiments.push(&r.experiment);
        }
    }
    for e in experiments {
        let _ = writeln!(s, "## {e}\n");
        let _ = writeln!(s, "| variant | metric | strategy | n | budget | cap ms | problems | value | se | wall ms |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|");
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in rows.iter().filter(|r| r.experiment == e) {
            if e == "training" && r.metric == "validation_accuracy" {
                continue;
            }
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {:.4} | {:.4} | {} |",
                r.variant,
                r.metric,
                r.strategy,
                opt(r.n.map(|x| x.to_string())),
                opt(r.budget_units.map(|x| x.to_string())),
                opt(r.wall_clock_cap_ms.map(|x| x.to_string())),
                r.n_problems,
                r.value,
                r.se,
                opt(r.wall_clock_ms.map(|x| format!("{x:.1}"))),
            );
        }
        s.push('\n');
    }
    let _ = writeln!(s, "## Checks\n");
    for c in checks {
        let _ = writeln!(
            s,
            "- [{}] {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    let _ = writeln!(
        s,
        "\n<!-- checks: total={} failed={} -->",
        checks.len(),
        failed
    );
    let _ = writeln!(s, "RESULT: {}", if failed == 0 { "PASS" } else { "FAIL" });
    s
}
