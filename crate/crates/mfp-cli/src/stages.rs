//! Pipeline stages. Each stage reads its upstream artifacts from the output
//! directory, writes its own artifacts plus a `<stage>_meta.json` echoing
//! the semantic configuration, and logs progress to stderr with
//! machine-parsable `[mfp:<stage>]` markers.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use mfp_core::baselines::{self, DqBeatPredictor, NaiveTable, RiskyCePredictor};
use mfp_core::ce_model::{
    self, parse_failures, CeEvent, DimmUid, FailureRecord, IngestWarning, ParseOutcome,
};
use mfp_core::dimm_tree::{self, extract_rules, RuleBase, RuleBasePredictor, TimePointPredictor};
use mfp_core::eval::{
    self, combine, evaluate, lead_time_sweep, MetricsRow, PredictionEntry, PredictionLog,
};
use mfp_core::hierarchy::{self, generate_samples, TimePatchSample};
use mfp_core::patch_classifier::{self, GbdtModel};
use mfp_core::synth::generate_corpus;
use mfp_core::{Error, Result};

use crate::config::PipelineConfig;

const META_FORMAT_VERSION: u32 = 1;

/// Fixed report order, mirroring the method comparison table: time-point
/// baselines and module first, then the time-patch module, then the merge.
pub const SOURCES: [&str; 6] = [
    "naive",
    "risky_ce",
    "dq_beat",
    eval::SOURCE_TIME_POINT,
    eval::SOURCE_TIME_PATCH,
    eval::SOURCE_COMBINED,
];

pub fn stage_log(stage: &str, msg: &str) {
    eprintln!("[mfp:{stage}] {msg}");
}

fn artifact(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn require_artifact(cfg: &PipelineConfig, name: &str, producer: &str) -> Result<PathBuf> {
    let path = artifact(cfg, name);
    if !path.exists() {
        return Err(Error::MissingDependency {
            artifact: path.display().to_string(),
            producer: producer.to_string(),
        });
    }
    Ok(path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_meta(cfg: &PipelineConfig, stage: &str, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({
        "format_version": META_FORMAT_VERSION,
        "stage": stage,
        "config": cfg.semantic_echo(),
        "summary": extra,
    });
    let pretty = serde_json::to_string_pretty(&meta).expect("meta serialization is infallible");
    write_file(
        &artifact(cfg, &format!("{stage}_meta.json")),
        pretty.as_bytes(),
    )
}

fn read_events(cfg: &PipelineConfig) -> Result<Vec<CeEvent>> {
    let path = require_artifact(cfg, "events.jsonl", "ingest")?;
    let file = fs::File::open(&path)?;
    let outcome = ce_model::parse_ce_log(file, ce_model::LogFormat::CanonicalJsonl, &cfg.geometry)?;
    if outcome.rows_dropped > 0 {
        return Err(Error::data(format!(
            "normalized event file {} has {} undecodable rows",
            path.display(),
            outcome.rows_dropped
        )));
    }
    Ok(outcome.events)
}

fn read_failures(cfg: &PipelineConfig) -> Result<Vec<FailureRecord>> {
    let file = fs::File::open(&cfg.paths.failures).map_err(|e| {
        Error::data(format!(
            "cannot open failure file {}: {e}",
            cfg.paths.failures.display()
        ))
    })?;
    parse_failures(file)
}

/// Generate the synthetic corpus and a ready-to-run pipeline config whose
/// split sits mid-horizon on the sampling grid.
pub fn gen_synth(cfg: &PipelineConfig) -> Result<()> {
    let corpus = generate_corpus(&cfg.synth, &cfg.geometry)?;
    stage_log(
        "gen-synth",
        &format!(
            "{} events, {} failures across {} DIMMs",
            corpus.events.len(),
            corpus.failures.len(),
            cfg.synth.n_dimms
        ),
    );

    let mut buf = Vec::new();
    ce_model::write_canonical_jsonl(&corpus.events, &mut buf)?;
    write_file(&artifact(cfg, "ce_log.jsonl"), &buf)?;

    let mut buf = Vec::new();
    ce_model::write_failures(&corpus.failures, &mut buf)?;
    write_file(&artifact(cfg, "failures.csv"), &buf)?;

    let truth = serde_json::to_string_pretty(&corpus.ground_truth)
        .expect("ground truth serialization is infallible");
    write_file(&artifact(cfg, "ground_truth.json"), truth.as_bytes())?;

    // Emitted config: paths relative to its own directory, split on the
    // sampling grid at mid-horizon.
    let mut emitted = cfg.clone();
    emitted.out_dir = PathBuf::from(".");
    emitted.paths.ce_logs = vec![PathBuf::from("ce_log.jsonl")];
    emitted.paths.failures = PathBuf::from("failures.csv");
    emitted.paths.ce_format = ce_model::LogFormat::CanonicalJsonl;
    let horizon = cfg.synth.horizon_s();
    let interval = cfg.windows.sample_interval_s;
    emitted.split_time = (cfg.synth.start_time + horizon / 2) / interval * interval;
    emitted.data_end = cfg.synth.start_time + horizon;
    write_file(
        &artifact(cfg, "pipeline.toml"),
        emitted.to_toml().as_bytes(),
    )?;

    write_meta(
        cfg,
        "gen_synth",
        serde_json::json!({
            "n_events": corpus.events.len(),
            "n_failures": corpus.failures.len(),
        }),
    )
}

/// Parse and validate the raw CE logs, normalize to sorted canonical JSONL.
pub fn ingest(cfg: &PipelineConfig) -> Result<()> {
    if cfg.paths.ce_logs.is_empty() {
        return Err(Error::config("no CE log files configured"));
    }
    let mut merged = ParseOutcome::default();
    for path in &cfg.paths.ce_logs {
        let file = fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open CE log {}: {e}", path.display())))?;
        let outcome = ce_model::parse_ce_log(file, cfg.paths.ce_format, &cfg.geometry)?;
        stage_log(
            "ingest",
            &format!(
                "{}: {} rows, {} events, {} warnings ({} rows dropped)",
                path.display(),
                outcome.rows_read,
                outcome.events.len(),
                outcome.warnings.len(),
                outcome.rows_dropped
            ),
        );
        merged.events.extend(outcome.events);
        merged.warnings.extend(outcome.warnings);
        merged.rows_read += outcome.rows_read;
        merged.rows_dropped += outcome.rows_dropped;
    }
    merged
        .events
        .sort_by(|a, b| (&a.dimm_uid, a.log_time).cmp(&(&b.dimm_uid, b.log_time)));

    // Fail fast on an unreadable failure file; later stages depend on it.
    let failures = read_failures(cfg)?;

    let mut buf = Vec::new();
    ce_model::write_canonical_jsonl(&merged.events, &mut buf)?;
    write_file(&artifact(cfg, "events.jsonl"), &buf)?;

    let warnings: Vec<&IngestWarning> = merged.warnings.iter().take(100).collect();
    write_meta(
        cfg,
        "ingest",
        serde_json::json!({
            "rows_read": merged.rows_read,
            "rows_dropped": merged.rows_dropped,
            "n_events": merged.events.len(),
            "n_warnings": merged.warnings.len(),
            "n_failure_records": failures.len(),
            "warnings_head": warnings,
        }),
    )
}

/// Build labeled time-patch samples over the full horizon.
pub fn featurize(cfg: &PipelineConfig) -> Result<()> {
    let events = read_events(cfg)?;
    let failures = read_failures(cfg)?;
    let fcfg = cfg.featurize_config();
    let schema = fcfg.schema();
    let samples = generate_samples(&events, &failures, &fcfg, &cfg.geometry)?;
    stage_log(
        "featurize",
        &format!(
            "{} samples x {} features (schema {})",
            samples.len(),
            schema.len(),
            schema.fingerprint()
        ),
    );
    let mut buf = Vec::new();
    hierarchy::write_samples(&schema, &samples, &mut buf)?;
    write_file(&artifact(cfg, "samples.csv"), &buf)?;
    write_meta(
        cfg,
        "featurize",
        serde_json::json!({
            "n_samples": samples.len(),
            "n_positive": samples.iter().filter(|s| s.label).count(),
            "schema_fingerprint": schema.fingerprint(),
        }),
    )
}

/// Train the time-patch booster on pre-split samples; the decision
/// threshold comes from 5-fold DIMM-grouped cross-validation.
pub fn train_patch(cfg: &PipelineConfig) -> Result<()> {
    let path = require_artifact(cfg, "samples.csv", "featurize")?;
    let (schema, samples) = hierarchy::read_samples(fs::File::open(path)?)?;
    let expected = cfg.featurize_config().schema();
    if schema.fingerprint() != expected.fingerprint() {
        return Err(Error::SchemaMismatch {
            expected: expected.fingerprint(),
            found: schema.fingerprint(),
        });
    }
    let train_samples: Vec<TimePatchSample> = samples
        .into_iter()
        .filter(|s| s.sample_time < cfg.split_time)
        .collect();
    stage_log(
        "train-patch",
        &format!(
            "{} training samples ({} positive)",
            train_samples.len(),
            train_samples.iter().filter(|s| s.label).count()
        ),
    );
    let threshold = patch_classifier::select_threshold(&train_samples, &schema, &cfg.train, 5)?;
    stage_log("train-patch", &format!("selected threshold {threshold}"));
    let mut model = patch_classifier::train(&train_samples, &schema, &cfg.train)?;
    model.threshold = Some(threshold);
    write_file(
        &artifact(cfg, "patch_model.json"),
        model.to_json().as_bytes(),
    )?;
    write_meta(
        cfg,
        "train_patch",
        serde_json::json!({
            "n_train_samples": train_samples.len(),
            "n_trees": model.trees.len(),
            "threshold": threshold,
            "schema_fingerprint": schema.fingerprint(),
        }),
    )
}

/// DIMMs counted as faulty for time-point training: those whose failure is
/// reachable from a training-period prediction window.
fn training_faulty_set(cfg: &PipelineConfig, failures: &[FailureRecord]) -> BTreeSet<DimmUid> {
    let horizon = cfg.split_time + cfg.eval.lead_s + cfg.eval.valid_s;
    failures
        .iter()
        .filter(|f| f.failure_time < horizon)
        .map(|f| f.dimm_uid.clone())
        .collect()
}

/// Train the DIMM-centric tree on pre-split events, extract the rule base,
/// and fit the naive pattern table on the same data.
pub fn train_point(cfg: &PipelineConfig) -> Result<()> {
    let events = read_events(cfg)?;
    let failures = read_failures(cfg)?;
    let train_events: Vec<CeEvent> = events
        .into_iter()
        .filter(|e| e.log_time < cfg.split_time)
        .collect();
    if train_events.is_empty() {
        return Err(Error::data("no events before the split time"));
    }
    let faulty = training_faulty_set(cfg, &failures);
    let pooling = &cfg.featurize.pooling;
    let schema = dimm_tree::time_point_schema(pooling);
    let samples = dimm_tree::build_time_point_samples(&train_events, &faulty, pooling)?;
    let n_faulty_dimms = samples
        .iter()
        .filter(|s| s.dimm_label)
        .map(|s| &s.dimm_uid)
        .collect::<BTreeSet<_>>()
        .len();
    stage_log(
        "train-point",
        &format!(
            "{} events across {} faulty-labeled DIMMs",
            samples.len(),
            n_faulty_dimms
        ),
    );

    let tree = dimm_tree::build_tree_with_schema(&samples, &schema, &cfg.tree)?;
    let rules = extract_rules(&tree);
    stage_log("train-point", &format!("{} fault rules", rules.rules.len()));
    write_file(&artifact(cfg, "dimm_tree.json"), tree.to_json().as_bytes())?;
    write_file(&artifact(cfg, "rule_base.json"), rules.to_json().as_bytes())?;

    let table = baselines::naive_fit(
        train_events
            .iter()
            .map(|e| (&e.bit_matrix, faulty.contains(&e.dimm_uid))),
    );
    write_file(
        &artifact(cfg, "naive_table.json"),
        table.to_json().as_bytes(),
    )?;

    write_meta(
        cfg,
        "train_point",
        serde_json::json!({
            "n_train_events": samples.len(),
            "n_faulty_dimms": n_faulty_dimms,
            "n_rules": rules.rules.len(),
            "n_naive_patterns": table.counts.len(),
        }),
    )
}

fn prediction_file(source: &str) -> String {
    format!("predictions_{source}.csv")
}

/// Replay the test period: the time-patch model scores fresh grid samples
/// derived from events only (no failure knowledge), and each time-point
/// predictor scores the event stream one record at a time.
pub fn predict(cfg: &PipelineConfig) -> Result<()> {
    let events = read_events(cfg)?;
    let model_path = require_artifact(cfg, "patch_model.json", "train-patch")?;
    let model = GbdtModel::from_json(&fs::read_to_string(model_path)?)?;
    let threshold = model
        .threshold
        .ok_or_else(|| Error::data("patch model carries no decision threshold"))?;
    let expected = cfg.featurize_config().schema();
    if model.schema.fingerprint() != expected.fingerprint() {
        return Err(Error::SchemaMismatch {
            expected: expected.fingerprint(),
            found: model.schema.fingerprint(),
        });
    }
    let rules_path = require_artifact(cfg, "rule_base.json", "train-point")?;
    let rules = RuleBase::from_json(&fs::read_to_string(rules_path)?)?;
    let naive_path = require_artifact(cfg, "naive_table.json", "train-point")?;
    let naive = NaiveTable::from_json(&fs::read_to_string(naive_path)?)?;

    // Time-patch: replay the grid without failure knowledge.
    let fcfg = cfg.featurize_config();
    let all_samples = generate_samples(&events, &[], &fcfg, &cfg.geometry)?;
    let test_samples: Vec<TimePatchSample> = all_samples
        .into_iter()
        .filter(|s| s.sample_time >= cfg.split_time && s.sample_time < cfg.data_end)
        .collect();
    let scores = model.predict_batch(&test_samples)?;
    let mut patch_log = PredictionLog::new();
    for (sample, score) in test_samples.iter().zip(scores) {
        if score >= threshold {
            patch_log.push(PredictionEntry {
                dimm_uid: sample.dimm_uid.clone(),
                time: sample.sample_time,
                positive: true,
                source: eval::SOURCE_TIME_PATCH.to_string(),
                latest_input_time: sample.latest_event_time,
            })?;
        }
    }
    stage_log(
        "predict",
        &format!(
            "time-patch: {} grid samples, {} alarms",
            test_samples.len(),
            patch_log.len()
        ),
    );

    // Time-point predictors: one decision per streamed event.
    let rule_predictor = RuleBasePredictor::new(rules, cfg.featurize.pooling.clone())?;
    let predictors: [&dyn TimePointPredictor; 4] =
        [&rule_predictor, &naive, &RiskyCePredictor, &DqBeatPredictor];
    let mut logs: Vec<PredictionLog> = vec![PredictionLog::new(); predictors.len()];
    for event in &events {
        if event.log_time < cfg.split_time || event.log_time >= cfg.data_end {
            continue;
        }
        for (predictor, log) in predictors.iter().zip(&mut logs) {
            if predictor.predict_event(event)? {
                log.push(PredictionEntry {
                    dimm_uid: event.dimm_uid.clone(),
                    time: event.log_time,
                    positive: true,
                    source: predictor.name().to_string(),
                    latest_input_time: event.log_time,
                })?;
            }
        }
    }
    let point_log = logs[0].clone();
    stage_log(
        "predict",
        &format!("time-point: {} alarms from the rule base", point_log.len()),
    );

    let combined = combine(&patch_log, &point_log);
    let outputs: Vec<(&str, &PredictionLog)> = vec![
        ("naive", &logs[1]),
        ("risky_ce", &logs[2]),
        ("dq_beat", &logs[3]),
        (eval::SOURCE_TIME_POINT, &point_log),
        (eval::SOURCE_TIME_PATCH, &patch_log),
        (eval::SOURCE_COMBINED, &combined),
    ];
    let mut counts = serde_json::Map::new();
    for (source, log) in &outputs {
        let mut buf = Vec::new();
        log.write_csv(&mut buf)?;
        write_file(&artifact(cfg, &prediction_file(source)), &buf)?;
        counts.insert(source.to_string(), log.len().into());
    }
    write_meta(cfg, "predict", serde_json::Value::Object(counts))
}

fn read_logs(cfg: &PipelineConfig) -> Result<Vec<(String, PredictionLog)>> {
    let mut out = Vec::new();
    for source in SOURCES {
        let path = require_artifact(cfg, &prediction_file(source), "predict")?;
        let log = PredictionLog::read_csv(fs::File::open(path)?)?;
        out.push((source.to_string(), log));
    }
    Ok(out)
}

/// Score every prediction log against the failure records.
pub fn evaluate_stage(cfg: &PipelineConfig) -> Result<()> {
    let logs = read_logs(cfg)?;
    let failures = read_failures(cfg)?;
    let ecfg = cfg.eval_config();
    let mut rows = Vec::new();
    for (source, log) in &logs {
        let row = evaluate(source, log, &failures, &ecfg)?;
        stage_log(
            "evaluate",
            &format!(
                "{source}: P={:.4} R={:.4} F1={:.4} (|pred|={}, |true|={}, |fail|={})",
                row.precision, row.recall, row.f1, row.n_predicted, row.n_correct, row.n_failures
            ),
        );
        rows.push(row);
    }
    let mut buf = Vec::new();
    eval::write_metrics_csv(&rows, &mut buf)?;
    write_file(&artifact(cfg, "metrics.csv"), &buf)?;
    write_meta(
        cfg,
        "evaluate",
        serde_json::json!({ "n_sources": rows.len() }),
    )
}

/// Re-evaluate every source across the lead-time grid.
pub fn sweep_lead(cfg: &PipelineConfig) -> Result<()> {
    let logs = read_logs(cfg)?;
    let failures = read_failures(cfg)?;
    let borrowed: Vec<(String, &PredictionLog)> =
        logs.iter().map(|(s, l)| (s.clone(), l)).collect();
    let rows = lead_time_sweep(&borrowed, &failures, &cfg.sweep_leads_s, &cfg.eval_config())?;
    stage_log(
        "sweep-lead",
        &format!(
            "{} rows ({} sources x {} leads)",
            rows.len(),
            logs.len(),
            cfg.sweep_leads_s.len()
        ),
    );
    let mut buf = Vec::new();
    eval::write_metrics_csv(&rows, &mut buf)?;
    write_file(&artifact(cfg, "sweep.csv"), &buf)?;
    write_meta(
        cfg,
        "sweep_lead",
        serde_json::json!({ "leads_s": cfg.sweep_leads_s }),
    )
}

fn format_metrics_table(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>8} {:>10} {:>10} {:>10} {:>7} {:>7} {:>7}\n",
        "method", "lead_s", "precision", "recall", "f1", "|pred|", "|true|", "|fail|"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:>8} {:>10.4} {:>10.4} {:>10.4} {:>7} {:>7} {:>7}\n",
            r.source,
            r.lead_s,
            r.precision,
            r.recall,
            r.f1,
            r.n_predicted,
            r.n_correct,
            r.n_failures
        ));
    }
    out
}

/// Assemble the human-readable report: metric table, feature importance,
/// the mined rules, and the lead sweep when present.
pub fn report(cfg: &PipelineConfig) -> Result<()> {
    let metrics_path = require_artifact(cfg, "metrics.csv", "evaluate")?;
    let rows = eval::read_metrics_csv(fs::File::open(metrics_path)?)?;
    let model_path = require_artifact(cfg, "patch_model.json", "train-patch")?;
    let model = GbdtModel::from_json(&fs::read_to_string(model_path)?)?;
    let rules_path = require_artifact(cfg, "rule_base.json", "train-point")?;
    let rules = RuleBase::from_json(&fs::read_to_string(rules_path)?)?;

    let importance = model.feature_importance();
    let mut buf = String::from("feature,gain\n");
    for (name, gain) in &importance {
        buf.push_str(&format!("{name},{gain}\n"));
    }
    write_file(&artifact(cfg, "feature_importance.csv"), buf.as_bytes())?;

    let mut text = String::new();
    text.push_str("memory failure prediction report\n");
    text.push_str("================================\n\n");
    text.push_str(&format!(
        "test period [{}, {}), lead {} s, validity {} s\n\n",
        cfg.split_time, cfg.data_end, cfg.eval.lead_s, cfg.eval.valid_s
    ));
    text.push_str("method comparison (DIMM-level)\n");
    text.push_str(&format_metrics_table(&rows));
    text.push('\n');

    text.push_str("time-patch feature importance (top 20 by split gain)\n");
    if importance.is_empty() {
        text.push_str("(no splits)\n");
    } else {
        for (name, gain) in importance.iter().take(20) {
            text.push_str(&format!("{gain:>12.6}  {name}\n"));
        }
    }
    text.push('\n');

    text.push_str(&format!(
        "time-point rule base ({} rules)\n",
        rules.rules.len()
    ));
    text.push_str(&rules.render_text());
    text.push('\n');

    let sweep_path = artifact(cfg, "sweep.csv");
    if sweep_path.exists() {
        let sweep_rows = eval::read_metrics_csv(fs::File::open(sweep_path)?)?;
        text.push_str("lead-time sweep\n");
        text.push_str(&format_metrics_table(&sweep_rows));
        text.push('\n');
    }

    write_file(&artifact(cfg, "report.txt"), text.as_bytes())?;
    stage_log("report", "report.txt and feature_importance.csv written");
    write_meta(
        cfg,
        "report",
        serde_json::json!({
            "n_rules": rules.rules.len(),
            "n_ranked_features": importance.len(),
        }),
    )
}

/// Write a stand-alone default config for hand editing.
pub fn write_default_config(path: &Path) -> Result<()> {
    let cfg = PipelineConfig::default();
    write_file(path, cfg.to_toml().as_bytes())?;
    Ok(())
}
