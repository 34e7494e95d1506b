//! Time-patch featurization: per-window multi-level aggregation of CE
//! events, counting features, and labeled sample generation on a regular
//! time grid.
//!
//! For every sample time `t` and observation window `w`, the events of one
//! DIMM with `log_time` in `(t - w, t]` are aggregated bottom-up:
//!
//! * bit level: descriptor vector of each event's DQ-Beat matrix;
//! * bank level: descriptor vector of the union cell-occupancy matrix of the
//!   bank, concatenated with the pooled bit-level vectors of its events;
//! * DIMM level: descriptors of the rank / device / bank occupancy vectors,
//!   concatenated with the pooled bank-level vectors.
//!
//! Everything a sample sees lies at or before its sample time by
//! construction; there is no code path through which later events can leak
//! into a feature vector.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::bsfe::{bsfe_1d, bsfe_2d, pool, Pooling, SparseBinaryMatrix};
use crate::ce_model::{BankKey, BitMatrix, CeEvent, DimmUid, FailureRecord, Geometry};
use crate::error::{Error, Result};
use crate::par;

/// Observation windows and the sampling interval of the feature grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationWindowSet {
    /// Window lengths in seconds, strictly increasing.
    pub windows_s: Vec<i64>,
    /// Grid spacing in seconds.
    pub sample_interval_s: i64,
}

impl Default for ObservationWindowSet {
    fn default() -> Self {
        ObservationWindowSet {
            windows_s: vec![900, 3600, 21600],
            sample_interval_s: 900,
        }
    }
}

impl ObservationWindowSet {
    pub fn validate(&self) -> Result<()> {
        if self.windows_s.is_empty() {
            return Err(Error::config("at least one observation window required"));
        }
        if self.windows_s[0] <= 0 {
            return Err(Error::config("observation windows must be positive"));
        }
        if !self.windows_s.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config(
                "observation windows must be strictly increasing",
            ));
        }
        if self.sample_interval_s <= 0 {
            return Err(Error::config("sample interval must be positive"));
        }
        Ok(())
    }

    pub fn largest(&self) -> i64 {
        *self.windows_s.last().expect("validated non-empty")
    }
}

/// Named, ordered feature layout. Every sample in a run shares one schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
}

impl FeatureSchema {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Stable 64-bit FNV-1a digest of the feature names, hex-encoded.
    /// Guards artifacts against silent schema drift between pipeline stages.
    pub fn fingerprint(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for name in &self.names {
            for b in name.as_bytes() {
                hash ^= *b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
            hash ^= b'\n' as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}

/// Aggregates of one DIMM's events within a single window.
#[derive(Debug, Clone)]
pub struct WindowAggregates {
    pub rank_occupancy: Vec<bool>,
    pub device_occupancy: Vec<bool>,
    pub bank_occupancy: Vec<bool>,
    /// Per-bank union cell matrix and the bit matrices of the bank's events.
    pub banks: BTreeMap<BankKey, BankAggregate>,
}

#[derive(Debug, Clone)]
pub struct BankAggregate {
    pub cells: SparseBinaryMatrix,
    pub bit_matrices: Vec<BitMatrix>,
}

/// Union the events of one DIMM (all within one window) into occupancy
/// vectors and per-bank aggregates. An empty slice yields empty aggregates.
pub fn aggregate_window(events: &[CeEvent], geometry: &Geometry) -> Result<WindowAggregates> {
    let mut agg = WindowAggregates {
        rank_occupancy: vec![false; geometry.n_rank as usize],
        device_occupancy: vec![false; geometry.n_device as usize],
        bank_occupancy: vec![false; geometry.n_bank as usize],
        banks: BTreeMap::new(),
    };
    if let Some(first) = events.first() {
        if events.iter().any(|e| e.dimm_uid != first.dimm_uid) {
            return Err(Error::data(
                "aggregate_window over events of multiple DIMMs",
            ));
        }
    }
    for e in events {
        e.validate(geometry)?;
        agg.rank_occupancy[e.rank_id as usize] = true;
        agg.device_occupancy[e.device_id as usize] = true;
        agg.bank_occupancy[e.combined_bank(geometry) as usize] = true;
        let bank = match agg.banks.entry(e.bank_key()) {
            std::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::btree_map::Entry::Vacant(v) => v.insert(BankAggregate {
                cells: SparseBinaryMatrix::new(geometry.n_row, geometry.n_col)?,
                bit_matrices: Vec::new(),
            }),
        };
        bank.cells.insert(e.row_id, e.column_id)?;
        bank.bit_matrices.push(e.bit_matrix);
    }
    Ok(agg)
}

/// Length of one window's multi-level feature block (without counts).
pub fn multi_bsfe_len(pooling: &[Pooling]) -> usize {
    let bsfe2d = 2 * crate::bsfe::NUM_DESCRIPTORS * (pooling.len() + 1);
    let f_bank = bsfe2d + pooling.len() * bsfe2d;
    3 * crate::bsfe::NUM_DESCRIPTORS + pooling.len() * f_bank
}

/// Multi-level descriptor vector of one window's aggregates.
///
/// An empty window yields the all-zero vector of the schema length.
pub fn multi_bsfe(agg: &WindowAggregates, pooling: &[Pooling]) -> Result<Vec<f64>> {
    let mut cache = BTreeMap::new();
    multi_bsfe_cached(agg, pooling, &mut cache)
}

/// As [`multi_bsfe`], memoizing bit-level descriptor vectors by bit mask.
/// Masks repeat heavily within a DIMM, so sample generation shares one cache
/// per DIMM.
pub fn multi_bsfe_cached(
    agg: &WindowAggregates,
    pooling: &[Pooling],
    fbit_cache: &mut BTreeMap<u32, Vec<f64>>,
) -> Result<Vec<f64>> {
    let bsfe2d_len = crate::bsfe::bsfe_2d_len(pooling);
    let f_bank_len = bsfe2d_len * (1 + pooling.len());

    let mut out = Vec::with_capacity(multi_bsfe_len(pooling));
    out.extend(bsfe_1d(&agg.rank_occupancy)?.to_array());
    out.extend(bsfe_1d(&agg.device_occupancy)?.to_array());
    out.extend(bsfe_1d(&agg.bank_occupancy)?.to_array());

    let mut bank_vectors: Vec<Vec<f64>> = Vec::with_capacity(agg.banks.len());
    for bank in agg.banks.values() {
        let mut f_bank = bsfe_2d(&bank.cells, pooling, true)?.concat();
        for m in &bank.bit_matrices {
            if let std::collections::btree_map::Entry::Vacant(slot) = fbit_cache.entry(m.mask()) {
                slot.insert(bsfe_2d(&m.to_sparse(), pooling, false)?.concat());
            }
        }
        let fbits: Vec<&[f64]> = bank
            .bit_matrices
            .iter()
            .map(|m| fbit_cache[&m.mask()].as_slice())
            .collect();
        for p in pooling {
            f_bank.extend(pool(&fbits, *p)?);
        }
        debug_assert_eq!(f_bank.len(), f_bank_len);
        bank_vectors.push(f_bank);
    }
    if bank_vectors.is_empty() {
        out.extend(std::iter::repeat_n(0.0, pooling.len() * f_bank_len));
    } else {
        for p in pooling {
            out.extend(pool(&bank_vectors, *p)?);
        }
    }
    Ok(out)
}

pub const COUNTING_FEATURE_NAMES: [&str; 4] =
    ["ce_count", "theta_dq", "theta_beat", "ce_freq_per_hour"];

/// Counting features of one window: event count, events touching two or
/// more DQ lines, events touching two or more beats, events per hour.
pub fn counting_features(events: &[CeEvent], window_s: i64) -> [f64; 4] {
    let ce_count = events.len() as f64;
    let theta_dq = events
        .iter()
        .filter(|e| e.bit_matrix.distinct_dqs() >= 2)
        .count() as f64;
    let theta_beat = events
        .iter()
        .filter(|e| e.bit_matrix.distinct_beats() >= 2)
        .count() as f64;
    let hours = window_s as f64 / 3600.0;
    [ce_count, theta_dq, theta_beat, ce_count / hours]
}

/// Configuration of the time-patch featurizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizeConfig {
    pub windows: ObservationWindowSet,
    /// Reserved gap between a sample and the earliest failure it may claim.
    pub lead_s: i64,
    /// How far past the lead a failure remains credited.
    pub valid_s: i64,
    pub pooling: Vec<Pooling>,
    /// Append server-level numeric attributes (capacity, frequencies) to the
    /// feature vector. Off by default: the predictors work from CE features.
    pub include_static_attrs: bool,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        FeaturizeConfig {
            windows: ObservationWindowSet::default(),
            lead_s: 900,
            valid_s: 7 * 24 * 3600,
            pooling: crate::bsfe::default_pooling(),
            include_static_attrs: false,
        }
    }
}

const STATIC_FEATURE_ATTRS: [&str; 3] = ["Capacity", "FrequencyMHz", "MaxSpeedMHz"];

impl FeaturizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.windows.validate()?;
        if self.lead_s < 0 {
            return Err(Error::config("lead time must be non-negative"));
        }
        if self.valid_s <= 0 {
            return Err(Error::config("validity window must be positive"));
        }
        if self.pooling.is_empty() {
            return Err(Error::config("at least one pooling method required"));
        }
        Ok(())
    }

    /// The fixed feature layout induced by this configuration.
    pub fn schema(&self) -> FeatureSchema {
        let mut names = Vec::new();
        let bsfe_names = crate::bsfe::bsfe_2d_feature_names(&self.pooling);
        for w in &self.windows_sorted() {
            let prefix = format!("w{w}");
            for occ in ["rank_occ", "device_occ", "bank_occ"] {
                for d in crate::bsfe::DESCRIPTOR_NAMES {
                    names.push(format!("{prefix}.dimm.{occ}.{d}"));
                }
            }
            for outer in &self.pooling {
                for n in &bsfe_names {
                    names.push(format!("{prefix}.dimm.banks.p{outer}.cells.{n}"));
                }
                for inner in &self.pooling {
                    for n in &bsfe_names {
                        names.push(format!("{prefix}.dimm.banks.p{outer}.bits.p{inner}.{n}"));
                    }
                }
            }
            for c in COUNTING_FEATURE_NAMES {
                names.push(format!("{prefix}.count.{c}"));
            }
        }
        if self.include_static_attrs {
            for a in STATIC_FEATURE_ATTRS {
                names.push(format!("static.{a}"));
            }
        }
        FeatureSchema { names }
    }

    fn windows_sorted(&self) -> Vec<i64> {
        self.windows.windows_s.clone()
    }
}

/// One labeled time-patch sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePatchSample {
    pub dimm_uid: DimmUid,
    pub sample_time: i64,
    pub label: bool,
    pub features: Vec<f64>,
    /// Latest event timestamp the features consumed; never exceeds
    /// `sample_time`.
    pub latest_event_time: i64,
}

/// Label definition: does the DIMM fail inside
/// `[t + lead, t + lead + valid]`?
pub fn label_for(sample_time: i64, failure_time: Option<i64>, lead_s: i64, valid_s: i64) -> bool {
    match failure_time {
        Some(tf) => tf >= sample_time + lead_s && tf <= sample_time + lead_s + valid_s,
        None => false,
    }
}

fn ceil_div(a: i64, b: i64) -> i64 {
    let d = a.div_euclid(b);
    if a.rem_euclid(b) != 0 {
        d + 1
    } else {
        d
    }
}

/// Group events (already sorted by `(dimm_uid, log_time)`) into per-DIMM
/// slices.
pub fn group_by_dimm(events: &[CeEvent]) -> Vec<&[CeEvent]> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=events.len() {
        if i == events.len() || events[i].dimm_uid != events[start].dimm_uid {
            groups.push(&events[start..i]);
            start = i;
        }
    }
    groups
}

/// Generate labeled samples on the sampling grid.
///
/// Sample times are the multiples of the sampling interval for which at
/// least one CE of the DIMM falls within the largest window; a DIMM with a
/// failure record stops producing samples at its failure time. Pass an
/// empty failure set to replay a stream without failure knowledge (all
/// labels 0, no cutoff), as the prediction stage does.
pub fn generate_samples(
    events: &[CeEvent],
    failures: &[FailureRecord],
    cfg: &FeaturizeConfig,
    geometry: &Geometry,
) -> Result<Vec<TimePatchSample>> {
    cfg.validate()?;
    geometry.validate()?;
    if !events
        .windows(2)
        .all(|w| (&w[0].dimm_uid, w[0].log_time) <= (&w[1].dimm_uid, w[1].log_time))
    {
        return Err(Error::data("events must be sorted by (dimm_uid, log_time)"));
    }
    let failure_map: BTreeMap<&DimmUid, i64> = failures
        .iter()
        .map(|f| (&f.dimm_uid, f.failure_time))
        .collect();

    let groups = group_by_dimm(events);
    let per_dimm = par::map_collect(&groups, |dimm_events| {
        featurize_dimm(
            dimm_events,
            failure_map.get(&dimm_events[0].dimm_uid).copied(),
            cfg,
            geometry,
        )
    });
    let mut out = Vec::new();
    for samples in per_dimm {
        out.extend(samples?);
    }
    Ok(out)
}

fn featurize_dimm(
    events: &[CeEvent],
    failure_time: Option<i64>,
    cfg: &FeaturizeConfig,
    geometry: &Geometry,
) -> Result<Vec<TimePatchSample>> {
    let interval = cfg.windows.sample_interval_s;
    let w_max = cfg.windows.largest();
    let times: Vec<i64> = events.iter().map(|e| e.log_time).collect();

    let mut grid: BTreeSet<i64> = BTreeSet::new();
    for &s in &times {
        let mut t = ceil_div(s, interval) * interval;
        while t < s + w_max {
            grid.insert(t);
            t += interval;
        }
    }

    let static_features: Vec<f64> = if cfg.include_static_attrs {
        STATIC_FEATURE_ATTRS
            .iter()
            .map(|a| {
                events[0]
                    .static_attrs
                    .get(*a)
                    .and_then(|v| v.parse::<f64>().ok())
                    .unwrap_or(0.0)
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut fbit_cache: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut samples = Vec::with_capacity(grid.len());
    for &t in &grid {
        if let Some(tf) = failure_time {
            if t >= tf {
                continue;
            }
        }
        let hi = times.partition_point(|&x| x <= t);
        let mut features = Vec::new();
        for &w in &cfg.windows.windows_s {
            let lo = times.partition_point(|&x| x <= t - w);
            let slice = &events[lo..hi.max(lo)];
            let agg = aggregate_window(slice, geometry)?;
            features.extend(multi_bsfe_cached(&agg, &cfg.pooling, &mut fbit_cache)?);
            features.extend(counting_features(slice, w));
        }
        features.extend_from_slice(&static_features);

        let lo_max = times.partition_point(|&x| x <= t - w_max);
        debug_assert!(hi > lo_max, "grid times always cover at least one event");
        samples.push(TimePatchSample {
            dimm_uid: events[0].dimm_uid.clone(),
            sample_time: t,
            label: label_for(t, failure_time, cfg.lead_s, cfg.valid_s),
            features,
            latest_event_time: times[hi - 1],
        });
    }
    Ok(samples)
}

/// Write samples as columnar text: a header of feature names, then one row
/// per sample with `dimm_uid`, epoch-second sample time, label, features.
pub fn write_samples<W: Write>(
    schema: &FeatureSchema,
    samples: &[TimePatchSample],
    mut out: W,
) -> Result<()> {
    let mut header = String::from("dimm_uid,sample_time,label");
    for n in &schema.names {
        header.push(',');
        header.push_str(n);
    }
    writeln!(out, "{header}")?;
    for s in samples {
        if s.dimm_uid.as_str().contains([',', '\n']) {
            return Err(Error::data(format!(
                "dimm_uid {:?} cannot be written to columnar text",
                s.dimm_uid.as_str()
            )));
        }
        if s.features.len() != schema.len() {
            return Err(Error::data("sample feature length does not match schema"));
        }
        let mut row = format!("{},{},{}", s.dimm_uid, s.sample_time, s.label as u8);
        for f in &s.features {
            row.push(',');
            row.push_str(&f.to_string());
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Read back a sample file written by [`write_samples`].
pub fn read_samples<R: Read>(source: R) -> Result<(FeatureSchema, Vec<TimePatchSample>)> {
    let reader = BufReader::new(source);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data("empty sample file"))??;
    let mut cols = header.split(',');
    for expected in ["dimm_uid", "sample_time", "label"] {
        if cols.next() != Some(expected) {
            return Err(Error::data(
                "sample file header must start with dimm_uid,sample_time,label",
            ));
        }
    }
    let schema = FeatureSchema {
        names: cols.map(str::to_owned).collect(),
    };
    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let err = || Error::data(format!("sample file row {}: malformed", idx + 2));
        let uid = parts.next().ok_or_else(err)?;
        let sample_time: i64 = parts.next().ok_or_else(err)?.parse().map_err(|_| err())?;
        let label_raw: u8 = parts.next().ok_or_else(err)?.parse().map_err(|_| err())?;
        let features: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err())?;
        if features.len() != schema.len() {
            return Err(Error::data(format!(
                "sample file row {}: {} features, schema has {}",
                idx + 2,
                features.len(),
                schema.len()
            )));
        }
        samples.push(TimePatchSample {
            dimm_uid: DimmUid::new(uid),
            sample_time,
            label: label_raw != 0,
            features,
            latest_event_time: sample_time,
        });
    }
    Ok((schema, samples))
}
