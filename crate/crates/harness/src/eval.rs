//! Dataset evaluation and confidence sweeps.
//!
//! A report is a pure function of (dataset, pipeline config, rarity cutoff,
//! seed): examples run in parallel but are merged in example-id order and
//! each example's seed is derived from the run seed and its id.

use std::path::{Path, PathBuf};

use k2r_core::metrics::{
    build_rarity_table, ColumnCount, Metric, MetricReport, MetricRow, MetricValues, RarityTable,
};
use k2r_core::pipeline::{score_episode, Pipeline, PipelineError, PipelineTrace, MAX_CONFIDENCE};
use k2r_core::seed::derive_seed;
use k2r_core::{DialogueEpisode, K2RConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::io::{read_episodes, write_json_file, write_jsonl_file};
use crate::HarnessError;

/// Runs may lose at most this share of examples to backend failures.
pub const MAX_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub dataset: PathBuf,
    pub k2r: K2RConfig,
    pub rarity_cutoff: f64,
    pub seed: u64,
    /// Worker threads; does not affect results.
    #[serde(skip)]
    pub parallelism: usize,
    #[serde(skip)]
    pub report: PathBuf,
}

impl EvalRunConfig {
    pub fn new(dataset: impl Into<PathBuf>, k2r: K2RConfig, report: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            k2r,
            rarity_cutoff: k2r_core::metrics::DEFAULT_RARITY_CUTOFF,
            seed: 0,
            parallelism: 1,
            report: report.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleFailure {
    pub example_id: String,
    pub step: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarityInfo {
    pub cutoff_mass: f64,
    pub frequent_words: usize,
    pub corpus_tokens: usize,
}

/// The JSON report: config echo, aggregate, per-example rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalRunConfig,
    pub examples: usize,
    pub rarity: Option<RarityInfo>,
    pub failures: Vec<ExampleFailure>,
    pub aggregate: MetricValues,
    pub counts: BTreeMap<Metric, ColumnCount>,
    pub per_example: Vec<MetricRow>,
}

impl EvalReport {
    pub fn failure_rate(&self) -> f64 {
        if self.examples == 0 {
            0.0
        } else {
            self.failures.len() as f64 / self.examples as f64
        }
    }
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub traces: Vec<(String, PipelineTrace)>,
}

/// Rarity table over the dataset's gold responses; `None` when there are
/// none (RF1 then stays undefined).
pub fn dataset_rarity(
    episodes: &[DialogueEpisode],
    cutoff: f64,
) -> Result<Option<RarityTable>, HarnessError> {
    let references: Vec<&str> = episodes
        .iter()
        .filter_map(|e| e.gold_response.as_deref())
        .collect();
    match build_rarity_table(&references, cutoff) {
        Ok(t) => Ok(Some(t)),
        Err(k2r_core::metrics::MetricError::EmptyCorpus) => Ok(None),
        Err(e) => Err(HarnessError::Usage(e.to_string())),
    }
}

fn pipeline_error(e: PipelineError) -> HarnessError {
    match e {
        PipelineError::Backend {
            source: k2r_core::BackendError::Corpus { .. },
            ..
        } => HarnessError::Data(e.to_string()),
        other => HarnessError::Usage(other.to_string()),
    }
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| HarnessError::Usage(format!("thread pool: {e}")))
}

type ExampleResult = (String, Result<(PipelineTrace, MetricRow), PipelineError>);

/// Evaluates already-loaded episodes against a pipeline.
pub fn evaluate_episodes(
    run: &EvalRunConfig,
    pipeline: &Pipeline,
    episodes: &[DialogueEpisode],
) -> Result<EvalOutcome, HarnessError> {
    if episodes.is_empty() {
        return Err(HarnessError::Data("empty dataset".into()));
    }
    let rarity = dataset_rarity(episodes, run.rarity_cutoff)?;
    let pool = thread_pool(run.parallelism)?;
    let mut results: Vec<ExampleResult> = pool.install(|| {
        episodes
            .par_iter()
            .map(|ep| {
                let seed = derive_seed(run.seed, &ep.example_id);
                let out = pipeline.respond(ep, seed, None).map(|trace| {
                    let row = score_episode(ep, &trace, rarity.as_ref());
                    (trace, row)
                });
                (ep.example_id.clone(), out)
            })
            .collect()
    });
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (id, result) in results {
        match result {
            Ok((trace, row)) => {
                rows.push(row);
                traces.push((id, trace));
            }
            Err(e) => {
                log::warn!("example {id} failed: {e}");
                failures.push(ExampleFailure {
                    example_id: id,
                    step: e.step().map(|s| s.to_string()),
                    error: e.to_string(),
                });
            }
        }
    }
    let metrics = MetricReport::from_rows(rows);
    let report = EvalReport {
        config: run.clone(),
        examples: episodes.len(),
        rarity: rarity.map(|t| RarityInfo {
            cutoff_mass: t.cutoff_mass,
            frequent_words: t.frequent.len(),
            corpus_tokens: t.corpus_size,
        }),
        failures,
        aggregate: metrics.aggregate,
        counts: metrics.counts,
        per_example: metrics.per_example,
    };
    Ok(EvalOutcome { report, traces })
}

pub fn csv_path(report: &Path) -> PathBuf {
    report.with_extension("csv")
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), HarnessError> {
    write_json_file(path, report)?;
    let csv_file = csv_path(path);
    let mut w =
        csv::Writer::from_path(&csv_file).map_err(|e| HarnessError::data(csv_file.display(), e))?;
    let mut header = vec!["example_id".to_owned()];
    header.extend(Metric::ALL.iter().map(|m| m.name().to_owned()));
    w.write_record(&header)
        .map_err(|e| HarnessError::data(csv_file.display(), e))?;
    for row in &report.per_example {
        let mut rec = vec![row.example_id.clone()];
        rec.extend(Metric::ALL.iter().map(|m| {
            row.values
                .get(*m)
                .map(|v| v.to_string())
                .unwrap_or_default()
        }));
        w.write_record(&rec)
            .map_err(|e| HarnessError::data(csv_file.display(), e))?;
    }
    w.flush()
        .map_err(|e| HarnessError::data(csv_file.display(), e))
}

fn check_failures(report: &EvalReport) -> Result<(), HarnessError> {
    if report.failure_rate() > MAX_FAILURE_RATE {
        return Err(HarnessError::ExcessiveFailures {
            failed: report.failures.len(),
            total: report.examples,
            limit_pct: (MAX_FAILURE_RATE * 100.0).round() as usize,
        });
    }
    Ok(())
}

fn load(run: &EvalRunConfig) -> Result<(Pipeline, Vec<DialogueEpisode>), HarnessError> {
    let pipeline = Pipeline::from_config(run.k2r.clone()).map_err(pipeline_error)?;
    let episodes = read_episodes(&run.dataset)?;
    Ok((pipeline, episodes))
}

/// Loads the dataset, evaluates it and writes the JSON and CSV reports. The
/// reports are written even when too many examples failed; that case is
/// returned as [`HarnessError::ExcessiveFailures`] afterwards.
pub fn eval_task(run: &EvalRunConfig) -> Result<EvalOutcome, HarnessError> {
    let (pipeline, episodes) = load(run)?;
    let outcome = evaluate_episodes(run, &pipeline, &episodes)?;
    write_report(&outcome.report, &run.report)?;
    check_failures(&outcome.report)?;
    Ok(outcome)
}

pub fn write_traces(path: &Path, traces: &[(String, PipelineTrace)]) -> Result<(), HarnessError> {
    #[derive(Serialize)]
    struct Line<'a> {
        example_id: &'a str,
        trace: &'a PipelineTrace,
    }
    let lines: Vec<Line<'_>> = traces
        .iter()
        .map(|(id, t)| Line {
            example_id: id,
            trace: t,
        })
        .collect();
    write_jsonl_file(path, &lines)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLevel {
    pub confidence: u8,
    pub report: String,
    pub failures: usize,
    pub aggregate: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config: EvalRunConfig,
    pub levels: Vec<SweepLevel>,
}

/// Path of the per-level report: `<stem>.conf-<k>.json` beside `report`.
pub fn level_report_path(report: &Path, level: u8) -> PathBuf {
    let stem = report
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    report.with_file_name(format!("{stem}.conf-{level}.json"))
}

/// Re-runs the evaluation once per confidence level, varying nothing else.
/// Writes one report per level plus a combined summary at `run.report`.
pub fn confidence_sweep(
    run: &EvalRunConfig,
    levels: &[u8],
) -> Result<(SweepSummary, Vec<EvalReport>), HarnessError> {
    if levels.is_empty() {
        return Err(HarnessError::Usage("no confidence levels given".into()));
    }
    if let Some(bad) = levels.iter().find(|l| **l > MAX_CONFIDENCE) {
        return Err(HarnessError::Usage(format!(
            "confidence level {bad} outside 0..={MAX_CONFIDENCE}"
        )));
    }
    let (base, episodes) = load(run)?;
    let mut reports = Vec::new();
    let mut summary = SweepSummary {
        config: run.clone(),
        levels: Vec::new(),
    };
    for &level in levels {
        let pipeline = base.with_confidence(Some(level)).map_err(pipeline_error)?;
        let mut level_run = run.clone();
        level_run.k2r.confidence = Some(level);
        let path = level_report_path(&run.report, level);
        level_run.report = path.clone();
        let outcome = evaluate_episodes(&level_run, &pipeline, &episodes)?;
        write_report(&outcome.report, &path)?;
        summary.levels.push(SweepLevel {
            confidence: level,
            report: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            failures: outcome.report.failures.len(),
            aggregate: outcome.report.aggregate.clone(),
        });
        reports.push(outcome.report);
    }
    write_json_file(&run.report, &summary)?;
    for r in &reports {
        check_failures(r)?;
    }
    Ok((summary, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use k2r_core::backends::BackendDescriptor;
    use k2r_core::Turn;

    fn dallas() -> DialogueEpisode {
        DialogueEpisode::new(
            "nq-1",
            vec![Turn::new(
                "user",
                "When did the dallas cowboys win their last playoff game?",
            )],
        )
        .with_gold_answers(["2014"])
    }

    fn run(report: &Path) -> EvalRunConfig {
        let k2r = K2RConfig::new(
            BackendDescriptor::template("2014"),
            BackendDescriptor::template(
                "The last time the Dallas Cowboys won a playoff game was in {k}.",
            ),
        );
        EvalRunConfig::new("unused", k2r, report)
    }

    #[test]
    fn dallas_ap_column() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = run(&dir.path().join("r.json"));
        let p = Pipeline::from_config(cfg.k2r.clone()).unwrap();
        let out = evaluate_episodes(&cfg, &p, &[dallas()]).unwrap();
        assert_eq!(out.report.aggregate.ap, Some(1.0));
        assert_eq!(out.report.aggregate.gap, Some(1.0));
        assert!(out.report.rarity.is_none());
    }

    #[test]
    fn empty_dataset_is_data_error() {
        let cfg = run(Path::new("r.json"));
        let p = Pipeline::from_config(cfg.k2r.clone()).unwrap();
        let err = evaluate_episodes(&cfg, &p, &[]).err().unwrap();
        assert_eq!(err.to_string(), "empty dataset");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn csv_mirrors_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let cfg = run(&path);
        let p = Pipeline::from_config(cfg.k2r.clone()).unwrap();
        let out = evaluate_episodes(&cfg, &p, &[dallas()]).unwrap();
        write_report(&out.report, &path).unwrap();
        let csv = std::fs::read_to_string(csv_path(&path)).unwrap();
        assert_eq!(
            csv,
            "example_id,f1,kf1,pkf1,rf1,bleu4,rougeL,ap,gap\nnq-1,,,,,,,1,1\n"
        );
    }

    #[test]
    fn sweep_rejects_out_of_range() {
        let err = confidence_sweep(&run(Path::new("r.json")), &[0, 11])
            .err()
            .unwrap();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn level_paths() {
        assert_eq!(
            level_report_path(Path::new("/tmp/out/rep.json"), 6),
            PathBuf::from("/tmp/out/rep.conf-6.json")
        );
    }
}
