//! Streaming-safe DIMM-level evaluation, prediction-log merging, and
//! lead-time sweeps.
//!
//! Metrics are computed over DIMM sets, not prediction counts: a DIMM is
//! predicted if any positive entry exists for it in the test period, and
//! correctly predicted if some positive entry's window
//! `[t + lead, t + lead + valid]` contains the DIMM's failure time.
//!
//! Logs are append-only and every entry records the newest log timestamp it
//! consumed, so the no-future constraint is checkable after the fact:
//! a prediction timestamped earlier than its own inputs is a harness bug
//! and fails evaluation loudly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::ce_model::{DimmUid, FailureRecord};
use crate::error::{Error, Result};

pub const SOURCE_TIME_PATCH: &str = "time_patch";
pub const SOURCE_TIME_POINT: &str = "time_point";
pub const SOURCE_COMBINED: &str = "combined";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub dimm_uid: DimmUid,
    /// Prediction timestamp, epoch seconds.
    pub time: i64,
    pub positive: bool,
    pub source: String,
    /// Newest log timestamp consumed to make this prediction.
    pub latest_input_time: i64,
}

/// Append-only prediction log. Entries are validated on append and never
/// mutated afterwards.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionLog {
    entries: Vec<PredictionEntry>,
}

impl PredictionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: PredictionEntry) -> Result<()> {
        if entry.time < entry.latest_input_time {
            return Err(Error::data(format!(
                "prediction for {} at {} is earlier than its inputs ({})",
                entry.dimm_uid, entry.time, entry.latest_input_time
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[PredictionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "dimm_uid,prediction_time,positive,source,latest_input_time"
        )?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.dimm_uid, e.time, e.positive as u8, e.source, e.latest_input_time
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        let reader = BufReader::new(source);
        let mut lines = reader.lines();
        match lines.next() {
            Some(header) => {
                let header = header?;
                if header.trim() != "dimm_uid,prediction_time,positive,source,latest_input_time" {
                    return Err(Error::data("unrecognized prediction log header"));
                }
            }
            None => return Ok(Self::new()),
        }
        let mut log = Self::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::data(format!(
                    "prediction log row {}: expected 5 fields",
                    idx + 2
                )));
            }
            let err =
                |what: &str| Error::data(format!("prediction log row {}: bad {what}", idx + 2));
            log.push(PredictionEntry {
                dimm_uid: DimmUid::new(fields[0]),
                time: fields[1].parse().map_err(|_| err("time"))?,
                positive: fields[2] == "1",
                source: fields[3].to_string(),
                latest_input_time: fields[4].parse().map_err(|_| err("latest_input_time"))?,
            })?;
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Minimum lead time in seconds.
    pub lead_s: i64,
    /// Prediction horizon past the lead, in seconds.
    pub valid_s: i64,
    /// Test period `[test_start, test_end)`, epoch seconds.
    pub test_start: i64,
    pub test_end: i64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lead_s: 900,
            valid_s: 7 * 24 * 3600,
            test_start: 0,
            test_end: i64::MAX,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lead_s < 0 {
            return Err(Error::config("lead time must be non-negative"));
        }
        if self.valid_s <= 0 {
            return Err(Error::config("validity window must be positive"));
        }
        if self.test_start >= self.test_end {
            return Err(Error::config("empty test period"));
        }
        Ok(())
    }
}

/// One row of the metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub source: String,
    pub lead_s: i64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// |S_pred|: DIMMs with at least one positive prediction.
    pub n_predicted: usize,
    /// |S_true|: failed DIMMs credited to some prediction window.
    pub n_correct: usize,
    /// |F|: DIMMs failing within the test period.
    pub n_failures: usize,
    /// Set when a metric denominator was empty and reported as 0.
    pub degenerate: bool,
}

/// Evaluate one source's log against the failure set.
pub fn evaluate(
    source: &str,
    log: &PredictionLog,
    failures: &[FailureRecord],
    cfg: &EvalConfig,
) -> Result<MetricsRow> {
    cfg.validate()?;
    for e in log.entries() {
        if e.time < cfg.test_start || e.time >= cfg.test_end {
            return Err(Error::data(format!(
                "prediction for {} at {} lies outside the test period (harness bug)",
                e.dimm_uid, e.time
            )));
        }
        if e.time < e.latest_input_time {
            return Err(Error::data(format!(
                "prediction for {} at {} precedes its inputs (harness bug)",
                e.dimm_uid, e.time
            )));
        }
    }

    // Failures inside the test period; first failure wins on duplicates.
    let mut failed: BTreeMap<&DimmUid, i64> = BTreeMap::new();
    for f in failures {
        if f.failure_time >= cfg.test_start && f.failure_time < cfg.test_end {
            failed
                .entry(&f.dimm_uid)
                .and_modify(|t| *t = (*t).min(f.failure_time))
                .or_insert(f.failure_time);
        }
    }

    let mut predicted: BTreeSet<&DimmUid> = BTreeSet::new();
    let mut correct: BTreeSet<&DimmUid> = BTreeSet::new();
    for e in log.entries() {
        if !e.positive {
            continue;
        }
        predicted.insert(&e.dimm_uid);
        if let Some(&tf) = failed.get(&e.dimm_uid) {
            if tf >= e.time + cfg.lead_s && tf <= e.time + cfg.lead_s + cfg.valid_s {
                correct.insert(&e.dimm_uid);
            }
        }
    }

    let n_predicted = predicted.len();
    let n_correct = correct.len();
    let n_failures = failed.len();
    let degenerate = n_predicted == 0 || n_failures == 0;
    let precision = if n_predicted == 0 {
        0.0
    } else {
        n_correct as f64 / n_predicted as f64
    };
    let recall = if n_failures == 0 {
        0.0
    } else {
        n_correct as f64 / n_failures as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsRow {
        source: source.to_string(),
        lead_s: cfg.lead_s,
        precision,
        recall,
        f1,
        n_predicted,
        n_correct,
        n_failures,
        degenerate,
    })
}

/// Union-merge two logs: the positive entries of both, deduplicated by
/// `(dimm_uid, time)`, relabeled as the combined source.
pub fn combine(a: &PredictionLog, b: &PredictionLog) -> PredictionLog {
    let mut merged: BTreeMap<(&DimmUid, i64), i64> = BTreeMap::new();
    for e in a.entries().iter().chain(b.entries()) {
        if !e.positive {
            continue;
        }
        merged
            .entry((&e.dimm_uid, e.time))
            .and_modify(|latest| *latest = (*latest).max(e.latest_input_time))
            .or_insert(e.latest_input_time);
    }
    let mut out = PredictionLog::new();
    for ((uid, time), latest_input_time) in merged {
        out.push(PredictionEntry {
            dimm_uid: uid.clone(),
            time,
            positive: true,
            source: SOURCE_COMBINED.to_string(),
            latest_input_time,
        })
        .expect("merged entries preserve input ordering constraints");
    }
    out
}

/// Default sweep grid: 1 s to 60 min.
pub fn default_lead_grid() -> Vec<i64> {
    vec![1, 60, 300, 900, 1800, 3600]
}

/// Evaluate every source at every lead time.
pub fn lead_time_sweep(
    logs: &[(String, &PredictionLog)],
    failures: &[FailureRecord],
    leads: &[i64],
    cfg: &EvalConfig,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(logs.len() * leads.len());
    for (source, log) in logs {
        for &lead_s in leads {
            let sweep_cfg = EvalConfig { lead_s, ..*cfg };
            rows.push(evaluate(source, log, failures, &sweep_cfg)?);
        }
    }
    Ok(rows)
}

pub const METRICS_CSV_HEADER: &str =
    "source,lead_s,precision,recall,f1,n_predicted,n_correct,n_failures,degenerate";

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.source,
            r.lead_s,
            r.precision,
            r.recall,
            r.f1,
            r.n_predicted,
            r.n_correct,
            r.n_failures,
            r.degenerate as u8
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: Read>(source: R) -> Result<Vec<MetricsRow>> {
    let reader = BufReader::new(source);
    let mut lines = reader.lines();
    match lines.next() {
        Some(header) => {
            if header?.trim() != METRICS_CSV_HEADER {
                return Err(Error::data("unrecognized metrics header"));
            }
        }
        None => return Ok(Vec::new()),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::data(format!(
                "metrics row {}: expected 9 fields",
                idx + 2
            )));
        }
        let err = |what: &str| Error::data(format!("metrics row {}: bad {what}", idx + 2));
        rows.push(MetricsRow {
            source: f[0].to_string(),
            lead_s: f[1].parse().map_err(|_| err("lead_s"))?,
            precision: f[2].parse().map_err(|_| err("precision"))?,
            recall: f[3].parse().map_err(|_| err("recall"))?,
            f1: f[4].parse().map_err(|_| err("f1"))?,
            n_predicted: f[5].parse().map_err(|_| err("n_predicted"))?,
            n_correct: f[6].parse().map_err(|_| err("n_correct"))?,
            n_failures: f[7].parse().map_err(|_| err("n_failures"))?,
            degenerate: f[8] == "1",
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(uid: &str, time: i64) -> PredictionEntry {
        PredictionEntry {
            dimm_uid: DimmUid::new(uid),
            time,
            positive: true,
            source: SOURCE_TIME_PATCH.to_string(),
            latest_input_time: time,
        }
    }

    fn failure(uid: &str, time: i64) -> FailureRecord {
        FailureRecord {
            dimm_uid: DimmUid::new(uid),
            failure_time: time,
        }
    }

    fn cfg() -> EvalConfig {
        EvalConfig {
            lead_s: 900,
            valid_s: 7 * 24 * 3600,
            test_start: 0,
            test_end: 1_000_000_000,
        }
    }

    #[test]
    fn worked_example_half_precision_half_recall() {
        let mut log = PredictionLog::new();
        log.push(entry("dimm1", 10_000)).unwrap(); // 1 h before its failure
        log.push(entry("noisy", 20_000)).unwrap(); // never fails
        let failures = [failure("dimm1", 10_000 + 3600), failure("dimm2", 500_000)];
        let row = evaluate("t", &log, &failures, &cfg()).unwrap();
        assert_eq!(row.n_predicted, 2);
        assert_eq!(row.n_correct, 1);
        assert_eq!(row.n_failures, 2);
        assert_eq!(row.precision, 0.5);
        assert_eq!(row.recall, 0.5);
        assert_eq!(row.f1, 0.5);
        assert!(!row.degenerate);
    }

    #[test]
    fn no_positive_predictions_is_degenerate_zero() {
        let log = PredictionLog::new();
        let failures = [failure("d", 1000)];
        let row = evaluate("t", &log, &failures, &cfg()).unwrap();
        assert_eq!((row.precision, row.recall, row.f1), (0.0, 0.0, 0.0));
        assert!(row.degenerate);
    }

    #[test]
    fn prediction_five_minutes_before_failure_misses_the_lead() {
        let mut log = PredictionLog::new();
        log.push(entry("d", 10_000)).unwrap();
        let failures = [failure("d", 10_000 + 300)];
        let row = evaluate("t", &log, &failures, &cfg()).unwrap();
        assert_eq!(row.n_correct, 0);
        assert_eq!(row.recall, 0.0);
    }

    #[test]
    fn failures_outside_test_period_are_excluded_but_alarms_count() {
        let mut log = PredictionLog::new();
        log.push(entry("old", 10_000)).unwrap();
        let mut c = cfg();
        c.test_start = 5_000;
        // failed before the test period started
        let failures = [failure("old", 1_000), failure("in", 500_000)];
        let row = evaluate("t", &log, &failures, &c).unwrap();
        assert_eq!(row.n_failures, 1);
        assert_eq!(row.n_predicted, 1);
        assert_eq!(row.n_correct, 0);
    }

    #[test]
    fn entry_outside_test_period_is_fatal() {
        let mut log = PredictionLog::new();
        log.push(entry("d", 10)).unwrap();
        let mut c = cfg();
        c.test_start = 100;
        assert!(evaluate("t", &log, &[], &c).is_err());
    }

    #[test]
    fn entry_preceding_its_inputs_is_rejected() {
        let mut log = PredictionLog::new();
        let mut bad = entry("d", 10);
        bad.latest_input_time = 20;
        assert!(log.push(bad).is_err());
    }

    #[test]
    fn combine_examples() {
        let mut a = PredictionLog::new();
        a.push(entry("d1", 100)).unwrap();
        let mut b = PredictionLog::new();
        b.push(entry("d2", 200)).unwrap();

        // disjoint: sizes add
        assert_eq!(combine(&a, &b).len(), 2);
        // idempotent
        let aa = combine(&a, &a);
        assert_eq!(aa.len(), a.len());
        // identity on the empty log (modulo relabeling)
        let id = combine(&a, &PredictionLog::new());
        assert_eq!(id.len(), a.len());
        assert_eq!(id.entries()[0].dimm_uid, a.entries()[0].dimm_uid);
        assert_eq!(id.entries()[0].source, SOURCE_COMBINED);
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let entries = vec![entry("d1", 100), entry("d2", 5_000), entry("d1", 9_000)];
        let failures = [failure("d1", 10_000), failure("d3", 700_000)];
        let mut forward = PredictionLog::new();
        for e in &entries {
            forward.push(e.clone()).unwrap();
        }
        let mut backward = PredictionLog::new();
        for e in entries.iter().rev() {
            backward.push(e.clone()).unwrap();
        }
        let a = evaluate("t", &forward, &failures, &cfg()).unwrap();
        let b = evaluate("t", &backward, &failures, &cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_limit_cases() {
        let mut log = PredictionLog::new();
        log.push(entry("d", 10_000)).unwrap();
        let failures = [failure("d", 10_000 + 1800)];
        let grid = default_lead_grid();
        let rows = lead_time_sweep(
            &[(SOURCE_TIME_PATCH.to_string(), &log)],
            &failures,
            &grid,
            &cfg(),
        )
        .unwrap();
        // 1 s lead reproduces a near-zero-lead evaluation
        let near_zero = evaluate("t", &log, &failures, &EvalConfig { lead_s: 1, ..cfg() }).unwrap();
        assert_eq!(rows[0].recall, near_zero.recall);
        // alarm precedes failure by exactly 30 min: recall drops to zero
        // strictly after the 1800 s entry
        for row in &rows {
            if row.lead_s <= 1800 {
                assert_eq!(row.recall, 1.0, "lead {}", row.lead_s);
            } else {
                assert_eq!(row.recall, 0.0, "lead {}", row.lead_s);
            }
        }
    }

    #[test]
    fn predictions_after_all_failures_recall_zero_everywhere() {
        let mut log = PredictionLog::new();
        log.push(entry("d", 50_000)).unwrap();
        let failures = [failure("d", 10_000)];
        let rows = lead_time_sweep(
            &[(SOURCE_TIME_PATCH.to_string(), &log)],
            &failures,
            &default_lead_grid(),
            &cfg(),
        )
        .unwrap();
        assert!(rows.iter().all(|r| r.recall == 0.0));
    }

    #[test]
    fn combined_recall_dominates_components() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(23);
        for _ in 0..50 {
            let mut patch = PredictionLog::new();
            let mut point = PredictionLog::new();
            let mut failures = Vec::new();
            for d in 0..12 {
                let uid = format!("d{d}");
                let tf = rng.random_range(100_000..500_000i64);
                if rng.random_bool(0.7) {
                    failures.push(failure(&uid, tf));
                }
                // predictions within the validity window before tf
                for log in [&mut patch, &mut point] {
                    if rng.random_bool(0.5) {
                        let t = rng.random_range((tf - 7 * 24 * 3600).max(0)..tf);
                        log.push(entry(&uid, t)).unwrap();
                    }
                }
            }
            let merged = combine(&patch, &point);
            let rp = evaluate("patch", &patch, &failures, &cfg()).unwrap();
            let rq = evaluate("point", &point, &failures, &cfg()).unwrap();
            let rc = evaluate("combined", &merged, &failures, &cfg()).unwrap();
            assert!(rc.recall >= rp.recall.max(rq.recall));
        }
    }

    #[test]
    fn recall_is_monotone_in_lead_when_alarms_precede_failures_within_validity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        let grid = default_lead_grid();
        for _ in 0..50 {
            let mut log = PredictionLog::new();
            let mut failures = Vec::new();
            for d in 0..10 {
                let uid = format!("d{d}");
                let tf = rng.random_range(1_000_000..2_000_000i64);
                failures.push(failure(&uid, tf));
                for _ in 0..rng.random_range(0..4) {
                    let t = rng.random_range(tf - cfg().valid_s..tf);
                    log.push(entry(&uid, t)).unwrap();
                }
            }
            let rows = lead_time_sweep(
                &[(SOURCE_TIME_PATCH.to_string(), &log)],
                &failures,
                &grid,
                &cfg(),
            )
            .unwrap();
            for pair in rows.windows(2) {
                assert!(
                    pair[0].recall >= pair[1].recall,
                    "recall increased from lead {} to {}",
                    pair[0].lead_s,
                    pair[1].lead_s
                );
            }
        }
    }

    #[test]
    fn log_and_metrics_round_trip_csv() {
        let mut log = PredictionLog::new();
        log.push(entry("d1", 100)).unwrap();
        log.push(entry("d2", 5_000)).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(PredictionLog::read_csv(&buf[..]).unwrap(), log);

        let rows = vec![evaluate("t", &log, &[failure("d1", 10_000)], &cfg()).unwrap()];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), rows);
    }
}
