//! Rule and statistical time-point baselines, exposed behind the same
//! predictor interface as the rule base so the replay harness treats all of
//! them uniformly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ce_model::{BitMatrix, CeEvent};
use crate::dimm_tree::TimePointPredictor;
use crate::error::{Error, Result};

const TABLE_FORMAT_VERSION: u32 = 1;

/// Frequency table of DQ-Beat patterns in faulty vs. healthy training
/// events, keyed by the canonical 32-bit mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NaiveTable {
    pub version: u32,
    /// mask -> (occurrences under faulty DIMMs, occurrences under healthy).
    pub counts: BTreeMap<u32, (u64, u64)>,
}

/// Count pattern occurrences over labeled training events.
pub fn naive_fit<'a>(events: impl IntoIterator<Item = (&'a BitMatrix, bool)>) -> NaiveTable {
    let mut counts: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for (matrix, label) in events {
        let entry = counts.entry(matrix.mask()).or_insert((0, 0));
        if label {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    NaiveTable {
        version: TABLE_FORMAT_VERSION,
        counts,
    }
}

/// Faulty when the pattern was seen strictly more often under faulty DIMMs;
/// unseen patterns are healthy.
pub fn naive_predict(table: &NaiveTable, matrix: &BitMatrix) -> bool {
    match table.counts.get(&matrix.mask()) {
        Some((pos, neg)) => pos > neg,
        None => false,
    }
}

impl NaiveTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialization is infallible")
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let table: NaiveTable = serde_json::from_str(raw)
            .map_err(|e| Error::data(format!("naive table parse: {e}")))?;
        if table.version != TABLE_FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported naive table format version {}",
                table.version
            )));
        }
        Ok(table)
    }
}

impl TimePointPredictor for NaiveTable {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn predict_event(&self, event: &CeEvent) -> Result<bool> {
        Ok(naive_predict(self, &event.bit_matrix))
    }
}

/// Faulty when both the lower DQ pair (0, 1) and the upper DQ pair (2, 3)
/// carry at least one error bit.
pub fn risky_ce(matrix: &BitMatrix) -> bool {
    let mut low = false;
    let mut high = false;
    for (_, dq) in matrix.iter_set() {
        if dq <= 1 {
            low = true;
        } else {
            high = true;
        }
    }
    low && high
}

/// Faulty when more than one DQ line and more than one beat carry errors.
pub fn dq_beat_predict(matrix: &BitMatrix) -> bool {
    matrix.distinct_dqs() > 1 && matrix.distinct_beats() > 1
}

pub struct RiskyCePredictor;

impl TimePointPredictor for RiskyCePredictor {
    fn name(&self) -> &'static str {
        "risky_ce"
    }

    fn predict_event(&self, event: &CeEvent) -> Result<bool> {
        Ok(risky_ce(&event.bit_matrix))
    }
}

pub struct DqBeatPredictor;

impl TimePointPredictor for DqBeatPredictor {
    fn name(&self) -> &'static str {
        "dq_beat"
    }

    fn predict_event(&self, event: &CeEvent) -> Result<bool> {
        Ok(dq_beat_predict(&event.bit_matrix))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ce_model::Geometry;

    fn matrix(bits: &[(u32, u32)]) -> BitMatrix {
        let mut m = BitMatrix::empty(&Geometry::default());
        for &(beat, dq) in bits {
            m.set(beat, dq).unwrap();
        }
        m
    }

    #[test]
    fn naive_counts_decide_by_strict_majority() {
        let pattern = matrix(&[(0, 0)]);
        let other = matrix(&[(1, 1)]);
        let events = vec![
            (&pattern, true),
            (&pattern, true),
            (&pattern, true),
            (&pattern, false),
            (&other, true),
            (&other, false),
        ];
        let table = naive_fit(events);
        // 3 faulty vs 1 healthy
        assert!(naive_predict(&table, &pattern));
        // equal counts fail the strict inequality
        assert!(!naive_predict(&table, &other));
        // unseen pattern defaults to healthy
        assert!(!naive_predict(&table, &matrix(&[(5, 2)])));
    }

    #[test]
    fn naive_table_round_trips() {
        let pattern = matrix(&[(0, 0), (3, 2)]);
        let table = naive_fit(vec![(&pattern, true)]);
        assert_eq!(NaiveTable::from_json(&table.to_json()).unwrap(), table);
    }

    #[test]
    fn risky_ce_examples() {
        assert!(risky_ce(&matrix(&[(0, 0), (5, 3)])));
        assert!(!risky_ce(&matrix(&[(0, 0), (3, 1)])));
        assert!(!risky_ce(&matrix(&[])));
    }

    #[test]
    fn dq_beat_examples() {
        assert!(dq_beat_predict(&matrix(&[(0, 0), (1, 1)])));
        assert!(!dq_beat_predict(&matrix(&[(0, 0), (0, 1)])));
        assert!(!dq_beat_predict(&matrix(&[(4, 2)])));
    }

    #[test]
    fn truth_table_over_one_and_two_hot_masks() {
        let geom = Geometry::default();
        // independent oracle over explicit coordinates
        let oracle_risky = |cells: &[(u32, u32)]| {
            cells.iter().any(|&(_, d)| d <= 1) && cells.iter().any(|&(_, d)| d >= 2)
        };
        let oracle_dq_beat = |cells: &[(u32, u32)]| {
            let dqs: std::collections::BTreeSet<u32> = cells.iter().map(|&(_, d)| d).collect();
            let beats: std::collections::BTreeSet<u32> = cells.iter().map(|&(b, _)| b).collect();
            dqs.len() > 1 && beats.len() > 1
        };
        let cell = |bit: u32| (bit / geom.n_dq, bit % geom.n_dq);
        for a in 0..32u32 {
            let cells = [cell(a)];
            let m = matrix(&cells);
            assert_eq!(risky_ce(&m), oracle_risky(&cells));
            assert_eq!(dq_beat_predict(&m), oracle_dq_beat(&cells));
            for b in (a + 1)..32u32 {
                let cells = [cell(a), cell(b)];
                let m = matrix(&cells);
                assert_eq!(risky_ce(&m), oracle_risky(&cells));
                assert_eq!(dq_beat_predict(&m), oracle_dq_beat(&cells));
            }
        }
    }
}
