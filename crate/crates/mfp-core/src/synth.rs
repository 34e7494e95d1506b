//! Deterministic synthetic CE corpus with planted fault mechanisms and
//! ground-truth failures, for desk-scale end-to-end validation.
//!
//! Healthy DIMMs emit sparse single-bit, single-cell noise spread across
//! distinct banks. Faulty DIMMs are quiet until a fault onset, then emit
//! episodic bursts shaped by their mechanism until they fail between one
//! hour and seven days later:
//!
//! * `cell` - one stuck cell, repeated hits;
//! * `row` - one row, many distinct columns per burst;
//! * `column` - one column, many distinct rows per burst;
//! * `multi_bank` - a handful of banks hit at random cells;
//! * `risky_bit` - one cell whose accesses err on both a low and a high DQ
//!   line across two beats.
//!
//! All fault masks carry at least two error bits while noise masks carry
//! exactly one, so bit-level features separate the classes; `risky_bit` is
//! the only mechanism the hand-written DQ-pattern baselines can see.
//!
//! Every DIMM draws from its own seeded RNG stream, so generation is
//! order-independent, parallel-safe and reproducible byte for byte.

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::ce_model::{BitMatrix, CeEvent, DimmUid, ErrorType, FailureRecord, Geometry};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Cell,
    Row,
    Column,
    MultiBank,
    RiskyBit,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Cell => "cell",
            Mechanism::Row => "row",
            Mechanism::Column => "column",
            Mechanism::MultiBank => "multi_bank",
            Mechanism::RiskyBit => "risky_bit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_dimms: usize,
    /// Fraction of DIMMs planted with a fault mechanism and a failure.
    pub fault_fraction: f64,
    pub horizon_days: f64,
    /// Corpus start, epoch seconds.
    pub start_time: i64,
    pub mechanism_weights: Vec<(Mechanism, f64)>,
    /// Healthy DIMMs draw uniformly from `0..=healthy_noise_events_max`
    /// noise events over the horizon.
    pub healthy_noise_events_max: u32,
    /// Time from fault onset to failure, uniform over this inclusive range
    /// in seconds.
    pub ttf_range_s: (i64, i64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dimms: 500,
            fault_fraction: 0.2,
            horizon_days: 14.0,
            start_time: 1_704_067_200, // 2024-01-01T00:00:00Z
            mechanism_weights: vec![
                (Mechanism::Cell, 0.25),
                (Mechanism::Row, 0.2),
                (Mechanism::Column, 0.2),
                (Mechanism::MultiBank, 0.15),
                (Mechanism::RiskyBit, 0.2),
            ],
            healthy_noise_events_max: 2,
            ttf_range_s: (3600, 7 * 24 * 3600),
            seed: 42,
        }
    }
}

// Burst shape shared by all mechanisms.
const BURST_EVENTS: (usize, usize) = (12, 18);
const BURST_SPAN_S: (i64, i64) = (300, 1800);
const BURST_GAP_S: (i64, i64) = (16 * 3600, 32 * 3600);
const FAILURE_GUARD_S: i64 = 1800;
const MULTI_BANK_COUNT: (usize, usize) = (4, 8);

impl SynthConfig {
    pub fn horizon_s(&self) -> i64 {
        (self.horizon_days * 86_400.0).round() as i64
    }

    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        geometry.validate()?;
        if self.n_dimms == 0 {
            return Err(Error::config("n_dimms must be positive"));
        }
        if !(0.0..1.0).contains(&self.fault_fraction) {
            return Err(Error::config("fault_fraction must lie in [0, 1)"));
        }
        if self.mechanism_weights.is_empty()
            || self.mechanism_weights.iter().any(|(_, w)| *w < 0.0)
            || self.mechanism_weights.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            return Err(Error::config(
                "mechanism weights must be non-negative and sum > 0",
            ));
        }
        let (ttf_lo, ttf_hi) = self.ttf_range_s;
        if ttf_lo <= 0 || ttf_hi < ttf_lo {
            return Err(Error::config("invalid time-to-failure range"));
        }
        if self.horizon_s() < ttf_hi + 2 * FAILURE_GUARD_S {
            return Err(Error::config(
                "horizon too short for the time-to-failure range",
            ));
        }
        // Geometry must be large enough for each enabled mechanism.
        for (mechanism, weight) in &self.mechanism_weights {
            if *weight == 0.0 {
                continue;
            }
            let enough = match mechanism {
                Mechanism::Cell => geometry.n_dq >= 2,
                Mechanism::Row => geometry.n_col as usize >= BURST_EVENTS.1 && geometry.n_dq >= 2,
                Mechanism::Column => {
                    geometry.n_row as usize >= BURST_EVENTS.1 && geometry.n_dq >= 2
                }
                Mechanism::MultiBank => {
                    geometry.n_bank as usize >= MULTI_BANK_COUNT.0 && geometry.n_dq >= 2
                }
                Mechanism::RiskyBit => geometry.n_beat >= 2 && geometry.n_dq >= 4,
            };
            if !enough {
                return Err(Error::config(format!(
                    "geometry too small for the {} mechanism",
                    mechanism.name()
                )));
            }
        }
        if self.healthy_noise_events_max as u64 > geometry.n_bank as u64 {
            return Err(Error::config(
                "geometry too small: healthy noise events exceed bank count",
            ));
        }
        Ok(())
    }
}

/// Per-DIMM ground truth written alongside the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub dimm_uid: DimmUid,
    /// Mechanism name, or "healthy".
    pub mechanism: String,
    pub failure_time: Option<i64>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub events: Vec<CeEvent>,
    pub failures: Vec<FailureRecord>,
    pub ground_truth: Vec<GroundTruthRecord>,
}

struct DimmPlan {
    index: usize,
    faulty: bool,
}

/// Generate the corpus. Deterministic under a fixed seed: each DIMM derives
/// its own RNG stream from `seed` and its index.
pub fn generate_corpus(cfg: &SynthConfig, geometry: &Geometry) -> Result<SynthCorpus> {
    cfg.validate(geometry)?;
    let n_faulty = (cfg.n_dimms as f64 * cfg.fault_fraction).round() as usize;
    let plans: Vec<DimmPlan> = (0..cfg.n_dimms)
        .map(|index| DimmPlan {
            index,
            faulty: index < n_faulty,
        })
        .collect();

    let results = par::map_collect(&plans, |plan| {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        rng.set_stream(plan.index as u64 + 1);
        generate_dimm(plan, cfg, geometry, &mut rng)
    });

    let mut corpus = SynthCorpus {
        events: Vec::new(),
        failures: Vec::new(),
        ground_truth: Vec::new(),
    };
    for r in results {
        let (events, failure, truth) = r;
        corpus.events.extend(events);
        if let Some(f) = failure {
            corpus.failures.push(f);
        }
        corpus.ground_truth.push(truth);
    }
    // Zero-padded uids keep lexicographic order equal to index order, so the
    // concatenation is already sorted by (dimm_uid, log_time).
    debug_assert!(corpus
        .events
        .windows(2)
        .all(|w| (&w[0].dimm_uid, w[0].log_time) <= (&w[1].dimm_uid, w[1].log_time)));
    Ok(corpus)
}

fn dimm_uid_for(index: usize) -> DimmUid {
    DimmUid::new(format!("synth-{index:05}"))
}

fn generate_dimm(
    plan: &DimmPlan,
    cfg: &SynthConfig,
    geometry: &Geometry,
    rng: &mut ChaCha12Rng,
) -> (Vec<CeEvent>, Option<FailureRecord>, GroundTruthRecord) {
    let uid = dimm_uid_for(plan.index);
    if !plan.faulty {
        let events = generate_healthy(plan.index, cfg, geometry, rng);
        let truth = GroundTruthRecord {
            dimm_uid: uid,
            mechanism: "healthy".to_string(),
            failure_time: None,
        };
        return (events, None, truth);
    }

    let mechanism = pick_mechanism(&cfg.mechanism_weights, rng);
    let (ttf_lo, ttf_hi) = cfg.ttf_range_s;
    let ttf = rng.random_range(ttf_lo..=ttf_hi);
    let end = cfg.start_time + cfg.horizon_s();
    let onset = rng.random_range(cfg.start_time..end - ttf - FAILURE_GUARD_S);
    let failure_time = onset + ttf;

    let events = generate_fault_events(plan.index, mechanism, onset, failure_time, geometry, rng);
    let truth = GroundTruthRecord {
        dimm_uid: uid.clone(),
        mechanism: mechanism.name().to_string(),
        failure_time: Some(failure_time),
    };
    (
        events,
        Some(FailureRecord {
            dimm_uid: uid,
            failure_time,
        }),
        truth,
    )
}

fn pick_mechanism(weights: &[(Mechanism, f64)], rng: &mut ChaCha12Rng) -> Mechanism {
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut draw = rng.random_range(0.0..total);
    for (m, w) in weights {
        if draw < *w {
            return *m;
        }
        draw -= w;
    }
    weights.last().expect("validated non-empty").0
}

fn base_event(
    index: usize,
    uid: &DimmUid,
    t: i64,
    geometry: &Geometry,
    rng: &mut ChaCha12Rng,
) -> CeEvent {
    let mut static_attrs = std::collections::BTreeMap::new();
    // Attributes are a deterministic function of the DIMM index so repeated
    // events agree with each other.
    let manufacturer = ["A", "B", "C"][index % 3];
    let region = ["E", "F"][index % 2];
    let model = ["X86 Intel Purley", "X86 Intel Whitley"][index % 2];
    static_attrs.insert("manufacturter".into(), manufacturer.to_string());
    static_attrs.insert("region".into(), region.to_string());
    static_attrs.insert("model".into(), model.to_string());
    static_attrs.insert("PN".into(), format!("P{:03}", index % 7));
    static_attrs.insert("Capacity".into(), ["16", "32"][index % 2].to_string());
    static_attrs.insert("FrequencyMHz".into(), "2600".to_string());
    static_attrs.insert("MaxSpeedMHz".into(), "4000".to_string());
    static_attrs.insert("McaBank".into(), "MB7".to_string());
    static_attrs.insert("memory_type".into(), "DDR4".to_string());
    CeEvent {
        dimm_uid: uid.clone(),
        cpu_id: (index % 2) as u32,
        channel_id: (index % 6) as u32,
        dimm_id: (index % 2) as u32,
        rank_id: 0,
        device_id: 0,
        bankgroup_id: 0,
        bank_id: 0,
        row_id: 0,
        column_id: 0,
        error_type: if rng.random_bool(0.1) {
            ErrorType::Scrub
        } else {
            ErrorType::Read
        },
        log_time: t,
        bit_matrix: BitMatrix::empty(geometry),
        static_attrs,
    }
}

fn single_bit_mask(geometry: &Geometry, rng: &mut ChaCha12Rng) -> BitMatrix {
    let mut m = BitMatrix::empty(geometry);
    let beat = rng.random_range(0..geometry.n_beat);
    let dq = rng.random_range(0..geometry.n_dq);
    m.set(beat, dq).expect("in range");
    m
}

/// Two bits in one beat on one DQ side: multi-DQ but single-beat and
/// single-sided, invisible to the risky-CE and DQ-beat baselines.
fn paired_bit_mask(geometry: &Geometry, low_side: bool, rng: &mut ChaCha12Rng) -> BitMatrix {
    let mut m = BitMatrix::empty(geometry);
    let beat = rng.random_range(0..geometry.n_beat);
    let (a, b) = if low_side || geometry.n_dq < 4 {
        (0, 1)
    } else {
        (2, 3)
    };
    m.set(beat, a).expect("in range");
    m.set(beat, b).expect("in range");
    m
}

/// Low and high DQ errors across two distinct beats.
fn risky_bit_mask(geometry: &Geometry, rng: &mut ChaCha12Rng) -> BitMatrix {
    let mut m = BitMatrix::empty(geometry);
    let b1 = rng.random_range(0..geometry.n_beat);
    let mut b2 = rng.random_range(0..geometry.n_beat);
    while b2 == b1 {
        b2 = rng.random_range(0..geometry.n_beat);
    }
    m.set(b1, rng.random_range(0..2)).expect("in range");
    m.set(b2, 2 + rng.random_range(0..2)).expect("in range");
    m
}

fn generate_healthy(
    index: usize,
    cfg: &SynthConfig,
    geometry: &Geometry,
    rng: &mut ChaCha12Rng,
) -> Vec<CeEvent> {
    let uid = dimm_uid_for(index);
    let n = rng.random_range(0..=cfg.healthy_noise_events_max) as usize;
    let end = cfg.start_time + cfg.horizon_s();
    let mut times: Vec<i64> = (0..n)
        .map(|_| rng.random_range(cfg.start_time..end))
        .collect();
    times.sort_unstable();
    // Distinct banks per noise event keep any single bank's window
    // occupancy at one cell.
    let banks = index_sample(rng, geometry.n_bank as usize, n);
    let mut events = Vec::with_capacity(n);
    for (t, bank) in times.into_iter().zip(banks.iter()) {
        let mut e = base_event(index, &uid, t, geometry, rng);
        e.rank_id = rng.random_range(0..geometry.n_rank);
        e.device_id = rng.random_range(0..geometry.n_device);
        e.bankgroup_id = bank as u32 / geometry.banks_per_group;
        e.bank_id = bank as u32 % geometry.banks_per_group;
        e.row_id = rng.random_range(0..geometry.n_row);
        e.column_id = rng.random_range(0..geometry.n_col);
        e.bit_matrix = single_bit_mask(geometry, rng);
        events.push(e);
    }
    events
}

struct FaultAnchor {
    rank: u32,
    device: u32,
    bankgroup: u32,
    bank: u32,
    row: u32,
    col: u32,
    low_side: bool,
    banks: Vec<u32>,
}

fn generate_fault_events(
    index: usize,
    mechanism: Mechanism,
    onset: i64,
    failure_time: i64,
    geometry: &Geometry,
    rng: &mut ChaCha12Rng,
) -> Vec<CeEvent> {
    let uid = dimm_uid_for(index);
    let n_banks =
        rng.random_range(MULTI_BANK_COUNT.0..=MULTI_BANK_COUNT.1.min(geometry.n_bank as usize));
    // Drawing the flat bank index keeps the anchor valid for bank counts
    // that are not a multiple of the group size.
    let anchor_bank = rng.random_range(0..geometry.n_bank);
    let anchor = FaultAnchor {
        rank: rng.random_range(0..geometry.n_rank),
        device: rng.random_range(0..geometry.n_device),
        bankgroup: anchor_bank / geometry.banks_per_group,
        bank: anchor_bank % geometry.banks_per_group,
        row: rng.random_range(0..geometry.n_row),
        col: rng.random_range(0..geometry.n_col),
        low_side: rng.random_bool(0.5),
        banks: index_sample(rng, geometry.n_bank as usize, n_banks)
            .iter()
            .map(|b| b as u32)
            .collect(),
    };

    let ctx = FaultContext {
        index,
        uid: &uid,
        mechanism,
        anchor: &anchor,
        failure_time,
        geometry,
    };
    let mut events = Vec::new();
    let mut burst_start = onset;
    while burst_start < failure_time - FAILURE_GUARD_S {
        emit_burst(&ctx, burst_start, rng, &mut events);
        burst_start += rng.random_range(BURST_GAP_S.0..=BURST_GAP_S.1);
    }
    events.sort_by_key(|e| e.log_time);
    events
}

struct FaultContext<'a> {
    index: usize,
    uid: &'a DimmUid,
    mechanism: Mechanism,
    anchor: &'a FaultAnchor,
    failure_time: i64,
    geometry: &'a Geometry,
}

fn emit_burst(
    ctx: &FaultContext<'_>,
    burst_start: i64,
    rng: &mut ChaCha12Rng,
    events: &mut Vec<CeEvent>,
) {
    let FaultContext {
        index,
        uid,
        mechanism,
        anchor,
        failure_time,
        geometry,
    } = *ctx;
    let n = rng.random_range(BURST_EVENTS.0..=BURST_EVENTS.1);
    let span = rng.random_range(BURST_SPAN_S.0..=BURST_SPAN_S.1);
    let mut offsets: Vec<i64> = (0..n).map(|_| rng.random_range(0..span)).collect();
    offsets.sort_unstable();

    // Distinct coordinates along the fault axis within one burst.
    let distinct_cols = index_sample(rng, geometry.n_col as usize, n);
    let distinct_rows = index_sample(rng, geometry.n_row as usize, n);

    for (i, off) in offsets.into_iter().enumerate() {
        let t = (burst_start + off).min(failure_time - FAILURE_GUARD_S);
        let mut e = base_event(index, uid, t, geometry, rng);
        e.rank_id = anchor.rank;
        e.device_id = anchor.device;
        e.bankgroup_id = anchor.bankgroup;
        e.bank_id = anchor.bank;
        match mechanism {
            Mechanism::Cell => {
                e.row_id = anchor.row;
                e.column_id = anchor.col;
                e.bit_matrix = paired_bit_mask(geometry, anchor.low_side, rng);
            }
            Mechanism::Row => {
                e.row_id = anchor.row;
                e.column_id = distinct_cols.index(i) as u32;
                e.bit_matrix = paired_bit_mask(geometry, anchor.low_side, rng);
            }
            Mechanism::Column => {
                e.row_id = distinct_rows.index(i) as u32;
                e.column_id = anchor.col;
                e.bit_matrix = paired_bit_mask(geometry, anchor.low_side, rng);
            }
            Mechanism::MultiBank => {
                let combined = anchor.banks[rng.random_range(0..anchor.banks.len())];
                e.bankgroup_id = combined / geometry.banks_per_group;
                e.bank_id = combined % geometry.banks_per_group;
                e.row_id = rng.random_range(0..geometry.n_row);
                e.column_id = rng.random_range(0..geometry.n_col);
                e.bit_matrix = paired_bit_mask(geometry, anchor.low_side, rng);
            }
            Mechanism::RiskyBit => {
                e.row_id = anchor.row;
                e.column_id = anchor.col;
                e.bit_matrix = risky_bit_mask(geometry, rng);
            }
        }
        events.push(e);
    }
}
