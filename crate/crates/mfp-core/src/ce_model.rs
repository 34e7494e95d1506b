//! Canonical domain model for correctable-error (CE) logs and failure
//! records, plus ingestion of the two supported on-disk formats.
//!
//! A CE carries spatial information at three levels: server position
//! (cpu/channel/dimm), DIMM coordinates (rank/device/bank group/bank/row/
//! column) and the bit-level DQ-Beat matrix of the access that erred.
//! Ingestion validates every coordinate against a configurable [`Geometry`],
//! drops malformed rows with a warning, and sorts the surviving events by
//! `(dimm_uid, log_time)` - input files are not assumed to be ordered.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::bsfe::SparseBinaryMatrix;
use crate::error::{Error, Result};

/// Physical layout bounds for one platform profile.
///
/// Defaults describe the x4 DDR4 profile: 2 ranks, 18 devices, 16 banks in
/// 4 groups, and an 8x4 DQ-Beat matrix per access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    pub n_rank: u32,
    pub n_device: u32,
    pub n_bank: u32,
    pub banks_per_group: u32,
    pub n_row: u32,
    pub n_col: u32,
    pub n_beat: u32,
    pub n_dq: u32,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            n_rank: 2,
            n_device: 18,
            n_bank: 16,
            banks_per_group: 4,
            n_row: 131_072,
            n_col: 1024,
            n_beat: 8,
            n_dq: 4,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_rank", self.n_rank),
            ("n_device", self.n_device),
            ("n_bank", self.n_bank),
            ("banks_per_group", self.banks_per_group),
            ("n_row", self.n_row),
            ("n_col", self.n_col),
            ("n_beat", self.n_beat),
            ("n_dq", self.n_dq),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!(
                    "geometry field {name} must be positive"
                )));
            }
        }
        if self.banks_per_group > self.n_bank {
            return Err(Error::config("banks_per_group exceeds n_bank"));
        }
        if self.n_beat * self.n_dq > 32 {
            return Err(Error::config(
                "bit matrix larger than 32 cells is not representable",
            ));
        }
        Ok(())
    }
}

/// Opaque key identifying one physical DIMM.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DimmUid(String);

impl DimmUid {
    pub fn new(s: impl Into<String>) -> Self {
        DimmUid(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DimmUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DimmUid {
    fn from(s: &str) -> Self {
        DimmUid(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorType {
    Read,
    Scrub,
}

impl ErrorType {
    pub fn code(self) -> u8 {
        match self {
            ErrorType::Read => 0,
            ErrorType::Scrub => 1,
        }
    }

    fn parse(raw: &str) -> Result<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "0" | "read" => Ok(ErrorType::Read),
            "1" | "scrub" | "scrubbing" => Ok(ErrorType::Scrub),
            other => Err(Error::data(format!("unknown error_type {other:?}"))),
        }
    }
}

/// Binary DQ-Beat matrix of one access, stored as a beat-major bit mask:
/// bit `beat * n_dq + dq` marks cell `(beat, dq)`.
///
/// An all-zero matrix is legal and means the log carried no usable
/// bit-level payload (`bitinfo_missing`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitMatrix {
    n_beat: u8,
    n_dq: u8,
    mask: u32,
}

impl BitMatrix {
    pub fn empty(geometry: &Geometry) -> Self {
        BitMatrix {
            n_beat: geometry.n_beat as u8,
            n_dq: geometry.n_dq as u8,
            mask: 0,
        }
    }

    /// Decode a beat-major integer mask. Bits beyond the grid are dropped
    /// and returned as their bit indices.
    pub fn from_mask(raw: u64, geometry: &Geometry) -> (Self, Vec<u32>) {
        let cells = geometry.n_beat * geometry.n_dq;
        let mut dropped = Vec::new();
        let mut mask = 0u32;
        for bit in 0..64 {
            if raw & (1u64 << bit) != 0 {
                if bit < cells {
                    mask |= 1u32 << bit;
                } else {
                    dropped.push(bit);
                }
            }
        }
        (
            BitMatrix {
                n_beat: geometry.n_beat as u8,
                n_dq: geometry.n_dq as u8,
                mask,
            },
            dropped,
        )
    }

    pub fn n_beat(&self) -> u32 {
        self.n_beat as u32
    }

    pub fn n_dq(&self) -> u32 {
        self.n_dq as u32
    }

    /// Beat-major canonical encoding.
    pub fn mask(&self) -> u32 {
        self.mask
    }

    pub fn set(&mut self, beat: u32, dq: u32) -> Result<()> {
        if beat >= self.n_beat as u32 || dq >= self.n_dq as u32 {
            return Err(Error::data(format!(
                "bit ({beat}, {dq}) outside {}x{} matrix",
                self.n_beat, self.n_dq
            )));
        }
        self.mask |= 1u32 << (beat * self.n_dq as u32 + dq);
        Ok(())
    }

    pub fn get(&self, beat: u32, dq: u32) -> bool {
        beat < self.n_beat as u32
            && dq < self.n_dq as u32
            && self.mask & (1u32 << (beat * self.n_dq as u32 + dq)) != 0
    }

    /// True when no bit-level payload was decoded.
    pub fn bitinfo_missing(&self) -> bool {
        self.mask == 0
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let n_dq = self.n_dq as u32;
        (0..32u32)
            .filter(move |bit| self.mask & (1u32 << bit) != 0)
            .map(move |bit| (bit / n_dq, bit % n_dq))
    }

    pub fn count_set(&self) -> u32 {
        self.mask.count_ones()
    }

    /// Number of DQ lines (columns) holding at least one error bit.
    pub fn distinct_dqs(&self) -> u32 {
        let mut seen = 0u32;
        for (_, dq) in self.iter_set() {
            seen |= 1 << dq;
        }
        seen.count_ones()
    }

    /// Number of beats (rows) holding at least one error bit.
    pub fn distinct_beats(&self) -> u32 {
        let mut seen = 0u32;
        for (beat, _) in self.iter_set() {
            seen |= 1 << beat;
        }
        seen.count_ones()
    }

    pub fn to_sparse(&self) -> SparseBinaryMatrix {
        SparseBinaryMatrix::from_coords(self.n_beat as u32, self.n_dq as u32, self.iter_set())
            .expect("bit matrix dimensions are positive")
    }
}

/// Bit-level payload as found in a raw log record.
#[derive(Debug, Clone, PartialEq)]
pub enum RawBitInfo {
    /// Beat-major integer mask (the `beat_info` column).
    Mask(u64),
    /// Map of beat index to the DQ positions that erred in that beat.
    BeatMap(Vec<(u64, Vec<u64>)>),
    /// No bit-level payload present.
    Missing,
}

/// Decode whichever bit-level encoding the record carried.
///
/// Out-of-range entries are dropped and reported as human-readable issues;
/// an absent payload is not an error and yields the flagged all-zero matrix.
pub fn decode_bit_matrix(raw: &RawBitInfo, geometry: &Geometry) -> (BitMatrix, Vec<String>) {
    match raw {
        RawBitInfo::Missing => (BitMatrix::empty(geometry), Vec::new()),
        RawBitInfo::Mask(mask) => {
            let (m, dropped) = BitMatrix::from_mask(*mask, geometry);
            let issues = dropped
                .into_iter()
                .map(|bit| {
                    format!(
                        "bit_matrix: mask bit {bit} outside {}x{} grid",
                        geometry.n_beat, geometry.n_dq
                    )
                })
                .collect();
            (m, issues)
        }
        RawBitInfo::BeatMap(entries) => {
            let mut m = BitMatrix::empty(geometry);
            let mut issues = Vec::new();
            for (beat, dqs) in entries {
                if *beat >= geometry.n_beat as u64 {
                    if !dqs.is_empty() {
                        issues.push(format!("bit_matrix: out-of-range beat index {beat}"));
                    }
                    continue;
                }
                for dq in dqs {
                    if *dq >= geometry.n_dq as u64 {
                        issues.push(format!(
                            "bit_matrix: out-of-range beat payload {dq} in beat {beat}"
                        ));
                    } else {
                        m.set(*beat as u32, *dq as u32).expect("range checked");
                    }
                }
            }
            (m, issues)
        }
    }
}

/// One correctable error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeEvent {
    pub dimm_uid: DimmUid,
    pub cpu_id: u32,
    pub channel_id: u32,
    pub dimm_id: u32,
    pub rank_id: u32,
    pub device_id: u32,
    pub bankgroup_id: u32,
    pub bank_id: u32,
    pub row_id: u32,
    pub column_id: u32,
    pub error_type: ErrorType,
    /// Seconds since the Unix epoch.
    pub log_time: i64,
    pub bit_matrix: BitMatrix,
    /// Server-level attributes (manufacturer, model, capacity, ...) as
    /// opaque strings.
    pub static_attrs: BTreeMap<String, String>,
}

/// Combined bank key within a DIMM; every event maps to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BankKey {
    pub rank: u32,
    pub device: u32,
    pub bankgroup: u32,
    pub bank: u32,
}

impl CeEvent {
    pub fn bank_key(&self) -> BankKey {
        BankKey {
            rank: self.rank_id,
            device: self.device_id,
            bankgroup: self.bankgroup_id,
            bank: self.bank_id,
        }
    }

    /// Flat bank index `bankgroup * banks_per_group + bank`.
    pub fn combined_bank(&self, geometry: &Geometry) -> u32 {
        self.bankgroup_id * geometry.banks_per_group + self.bank_id
    }

    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        let checks = [
            ("rank_id", self.rank_id, geometry.n_rank),
            ("device_id", self.device_id, geometry.n_device),
            ("row_id", self.row_id, geometry.n_row),
            ("column_id", self.column_id, geometry.n_col),
        ];
        for (name, v, bound) in checks {
            if v >= bound {
                return Err(Error::data(format!("{name} {v} out of range 0..{bound}")));
            }
        }
        if self.combined_bank(geometry) >= geometry.n_bank {
            return Err(Error::data(format!(
                "bank ({}, {}) out of range for {} banks",
                self.bankgroup_id, self.bank_id, geometry.n_bank
            )));
        }
        Ok(())
    }
}

/// First failure of a DIMM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub dimm_uid: DimmUid,
    /// Seconds since the Unix epoch.
    pub failure_time: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestWarning {
    /// 1-based line / record number within the source.
    pub row: usize,
    pub message: String,
    /// Whether the offending row was dropped (vs. kept with a degraded
    /// bit matrix).
    pub row_dropped: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub events: Vec<CeEvent>,
    pub warnings: Vec<IngestWarning>,
    pub rows_read: usize,
    pub rows_dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    CanonicalJsonl,
    Csv23,
}

/// The 23 CE log columns, in canonical order.
pub const CSV23_COLUMNS: [&str; 23] = [
    "cpuid",
    "channelid",
    "dimmid",
    "rankid",
    "deviceid",
    "bankgroupid",
    "bankid",
    "rowid",
    "columnid",
    "retryrderrlogparity",
    "retryrderrlog",
    "beat_info",
    "error_type",
    "log_time",
    "manufacturter",
    "model",
    "PN",
    "Capacity",
    "FrequencyMHz",
    "MaxSpeedMHz",
    "McaBank",
    "memory_type",
    "region",
];

const STATIC_ATTR_COLUMNS: [&str; 9] = [
    "manufacturter",
    "model",
    "PN",
    "Capacity",
    "FrequencyMHz",
    "MaxSpeedMHz",
    "McaBank",
    "memory_type",
    "region",
];

/// Parse a CE log stream, validating against `geometry`.
///
/// Malformed rows are dropped with a warning carrying the 1-based row index;
/// rows with undecodable bit payload entries are kept with the offending
/// entries dropped and flagged. Events come back sorted by
/// `(dimm_uid, log_time)`.
pub fn parse_ce_log<R: Read>(
    source: R,
    format: LogFormat,
    geometry: &Geometry,
) -> Result<ParseOutcome> {
    geometry.validate()?;
    let mut outcome = match format {
        LogFormat::CanonicalJsonl => parse_jsonl(source, geometry)?,
        LogFormat::Csv23 => parse_csv23(source, geometry)?,
    };
    outcome
        .events
        .sort_by(|a, b| (&a.dimm_uid, a.log_time).cmp(&(&b.dimm_uid, b.log_time)));
    outcome.rows_dropped = outcome.warnings.iter().filter(|w| w.row_dropped).count();
    Ok(outcome)
}

/// Tolerant per-line record. Canonical column names are primary; the
/// field spellings seen in published sample logs are accepted as aliases,
/// including `beats` (per-beat DQ lists) in place of the `beat_info` mask.
/// Unknown fields are ignored so foreign datasets with extra columns still
/// ingest; missing required fields drop the row with a warning.
#[derive(Deserialize)]
#[allow(non_snake_case)]
struct JsonRecord {
    #[serde(default)]
    dimm_uid: Option<String>,
    #[serde(default, alias = "CpuId")]
    cpuid: Option<u32>,
    #[serde(default, alias = "ChannelId")]
    channelid: Option<u32>,
    #[serde(default, alias = "DimmId")]
    dimmid: Option<u32>,
    #[serde(default, alias = "RankId")]
    rankid: Option<u32>,
    #[serde(default, alias = "ChipId", alias = "DeviceId")]
    deviceid: Option<u32>,
    #[serde(default, alias = "BankgroupId", alias = "BankGroupId")]
    bankgroupid: Option<u32>,
    #[serde(default, alias = "BankId")]
    bankid: Option<u32>,
    #[serde(default, alias = "RowId")]
    rowid: Option<u32>,
    #[serde(default, alias = "ColumnId")]
    columnid: Option<u32>,
    #[serde(default)]
    retryrderrlogparity: Option<serde_json::Value>,
    #[serde(default)]
    retryrderrlog: Option<serde_json::Value>,
    #[serde(default)]
    beat_info: Option<u64>,
    #[serde(default)]
    beats: Option<BTreeMap<String, Vec<u64>>>,
    #[serde(default, alias = "ErrorType")]
    error_type: Option<serde_json::Value>,
    #[serde(alias = "LogTime")]
    log_time: i64,
    #[serde(default, alias = "Manufacturer", alias = "manufacturer")]
    manufacturter: Option<serde_json::Value>,
    #[serde(default, alias = "Model", alias = "ProcessorArchitecture")]
    model: Option<serde_json::Value>,
    #[serde(default, alias = "pn")]
    PN: Option<serde_json::Value>,
    #[serde(default, alias = "capacity")]
    Capacity: Option<serde_json::Value>,
    #[serde(default)]
    FrequencyMHz: Option<serde_json::Value>,
    #[serde(default)]
    MaxSpeedMHz: Option<serde_json::Value>,
    #[serde(default)]
    McaBank: Option<serde_json::Value>,
    #[serde(default, alias = "MemoryType")]
    memory_type: Option<serde_json::Value>,
    #[serde(default, alias = "Region")]
    region: Option<serde_json::Value>,
}

fn value_to_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn derive_dimm_uid(
    region: Option<&str>,
    manufacturer: Option<&str>,
    cpu: u32,
    channel: u32,
    dimm: u32,
) -> DimmUid {
    DimmUid::new(format!(
        "{}-{}-c{}-ch{}-d{}",
        region.unwrap_or("NA"),
        manufacturer.unwrap_or("NA"),
        cpu,
        channel,
        dimm
    ))
}

fn parse_jsonl<R: Read>(source: R, geometry: &Geometry) -> Result<ParseOutcome> {
    let reader = BufReader::new(source);
    let mut outcome = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let row = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        outcome.rows_read += 1;
        let record: JsonRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                outcome.warnings.push(IngestWarning {
                    row,
                    message: format!("unparseable record: {e}"),
                    row_dropped: true,
                });
                continue;
            }
        };
        if let Some(event) = record_to_event(record, row, geometry, &mut outcome.warnings) {
            outcome.events.push(event);
        }
    }
    Ok(outcome)
}

fn record_to_event(
    record: JsonRecord,
    row: usize,
    geometry: &Geometry,
    warnings: &mut Vec<IngestWarning>,
) -> Option<CeEvent> {
    let mut missing = Vec::new();
    let mut require = |name: &'static str, v: Option<u32>| -> u32 {
        match v {
            Some(x) => x,
            None => {
                missing.push(name);
                0
            }
        }
    };
    let rank_id = require("rankid", record.rankid);
    let device_id = require("deviceid", record.deviceid);
    let bank_id = require("bankid", record.bankid);
    let row_id = require("rowid", record.rowid);
    let column_id = require("columnid", record.columnid);
    if !missing.is_empty() {
        warnings.push(IngestWarning {
            row,
            message: format!("missing required fields: {}", missing.join(", ")),
            row_dropped: true,
        });
        return None;
    }

    let error_type = match &record.error_type {
        None => ErrorType::Read,
        Some(v) => {
            let raw = value_to_string(v);
            match ErrorType::parse(&raw) {
                Ok(t) => t,
                Err(e) => {
                    warnings.push(IngestWarning {
                        row,
                        message: e.to_string(),
                        row_dropped: true,
                    });
                    return None;
                }
            }
        }
    };

    let raw_bits = if let Some(mask) = record.beat_info {
        RawBitInfo::Mask(mask)
    } else if let Some(beats) = &record.beats {
        let mut entries = Vec::new();
        for (k, dqs) in beats {
            match k.parse::<u64>() {
                Ok(beat) => entries.push((beat, dqs.clone())),
                Err(_) => {
                    warnings.push(IngestWarning {
                        row,
                        message: format!("bit_matrix: non-numeric beat key {k:?}"),
                        row_dropped: false,
                    });
                }
            }
        }
        RawBitInfo::BeatMap(entries)
    } else {
        RawBitInfo::Missing
    };
    let (bit_matrix, issues) = decode_bit_matrix(&raw_bits, geometry);
    for message in issues {
        warnings.push(IngestWarning {
            row,
            message,
            row_dropped: false,
        });
    }

    let mut static_attrs = BTreeMap::new();
    let attr_values: [(&str, &Option<serde_json::Value>); 9] = [
        ("manufacturter", &record.manufacturter),
        ("model", &record.model),
        ("PN", &record.PN),
        ("Capacity", &record.Capacity),
        ("FrequencyMHz", &record.FrequencyMHz),
        ("MaxSpeedMHz", &record.MaxSpeedMHz),
        ("McaBank", &record.McaBank),
        ("memory_type", &record.memory_type),
        ("region", &record.region),
    ];
    for (name, v) in attr_values {
        if let Some(v) = v {
            static_attrs.insert(name.to_string(), value_to_string(v));
        }
    }

    let cpu_id = record.cpuid.unwrap_or(0);
    let channel_id = record.channelid.unwrap_or(0);
    let dimm_id = record.dimmid.unwrap_or(0);
    let dimm_uid = match record.dimm_uid {
        Some(uid) if !uid.is_empty() => DimmUid::new(uid),
        _ => derive_dimm_uid(
            static_attrs.get("region").map(String::as_str),
            static_attrs.get("manufacturter").map(String::as_str),
            cpu_id,
            channel_id,
            dimm_id,
        ),
    };

    // retryrderrlog / retryrderrlogparity are raw encoder payloads; the
    // decoded beat_info is authoritative, so they are accepted and ignored.
    let _ = (&record.retryrderrlogparity, &record.retryrderrlog);

    let event = CeEvent {
        dimm_uid,
        cpu_id,
        channel_id,
        dimm_id,
        rank_id,
        device_id,
        bankgroup_id: record.bankgroupid.unwrap_or(0),
        bank_id,
        row_id,
        column_id,
        error_type,
        log_time: record.log_time,
        bit_matrix,
        static_attrs,
    };
    if let Err(e) = event.validate(geometry) {
        warnings.push(IngestWarning {
            row,
            message: e.to_string(),
            row_dropped: true,
        });
        return None;
    }
    Some(event)
}

fn parse_csv23<R: Read>(source: R, geometry: &Geometry) -> Result<ParseOutcome> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("unreadable CSV header: {e}")))?
        .clone();
    let actual: Vec<&str> = headers.iter().collect();
    if actual != CSV23_COLUMNS {
        return Err(Error::data(format!(
            "CSV header does not match the 23 canonical columns (got {} columns)",
            actual.len()
        )));
    }

    let mut outcome = ParseOutcome::default();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2; // 1-based, after the header line
        outcome.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                outcome.warnings.push(IngestWarning {
                    row,
                    message: format!("unparseable record: {e}"),
                    row_dropped: true,
                });
                continue;
            }
        };
        if let Some(event) = csv_record_to_event(&record, row, geometry, &mut outcome.warnings) {
            outcome.events.push(event);
        }
    }
    Ok(outcome)
}

fn csv_record_to_event(
    record: &csv::StringRecord,
    row: usize,
    geometry: &Geometry,
    warnings: &mut Vec<IngestWarning>,
) -> Option<CeEvent> {
    let drop = |message: String, warnings: &mut Vec<IngestWarning>| {
        warnings.push(IngestWarning {
            row,
            message,
            row_dropped: true,
        });
    };
    if record.len() != CSV23_COLUMNS.len() {
        drop(
            format!("expected 23 fields, got {}", record.len()),
            warnings,
        );
        return None;
    }
    let field = |name: &str| -> &str {
        let idx = CSV23_COLUMNS.iter().position(|c| *c == name).unwrap();
        record.get(idx).unwrap_or("").trim()
    };
    let parse_u32 = |name: &str| -> std::result::Result<u32, String> {
        field(name).parse::<u32>().map_err(|_| {
            format!(
                "field {name}={:?} is not a non-negative integer",
                field(name)
            )
        })
    };

    let mut ints = [0u32; 9];
    for (slot, name) in [
        "cpuid",
        "channelid",
        "dimmid",
        "rankid",
        "deviceid",
        "bankgroupid",
        "bankid",
        "rowid",
        "columnid",
    ]
    .iter()
    .enumerate()
    {
        match parse_u32(name) {
            Ok(v) => ints[slot] = v,
            Err(msg) => {
                drop(msg, warnings);
                return None;
            }
        }
    }
    let log_time = match field("log_time").parse::<i64>() {
        Ok(t) => t,
        Err(_) => {
            drop(
                format!("field log_time={:?} is not an integer", field("log_time")),
                warnings,
            );
            return None;
        }
    };
    let error_type = match ErrorType::parse(field("error_type")) {
        Ok(t) => t,
        Err(e) => {
            drop(e.to_string(), warnings);
            return None;
        }
    };
    let raw_bits = match field("beat_info") {
        "" => RawBitInfo::Missing,
        raw => match raw.parse::<u64>() {
            Ok(mask) => RawBitInfo::Mask(mask),
            Err(_) => {
                drop(
                    format!("field beat_info={raw:?} is not an integer"),
                    warnings,
                );
                return None;
            }
        },
    };
    let (bit_matrix, issues) = decode_bit_matrix(&raw_bits, geometry);
    for message in issues {
        warnings.push(IngestWarning {
            row,
            message,
            row_dropped: false,
        });
    }

    let mut static_attrs = BTreeMap::new();
    for name in STATIC_ATTR_COLUMNS {
        let v = field(name);
        if !v.is_empty() {
            static_attrs.insert(name.to_string(), v.to_string());
        }
    }

    let event = CeEvent {
        dimm_uid: derive_dimm_uid(
            static_attrs.get("region").map(String::as_str),
            static_attrs.get("manufacturter").map(String::as_str),
            ints[0],
            ints[1],
            ints[2],
        ),
        cpu_id: ints[0],
        channel_id: ints[1],
        dimm_id: ints[2],
        rank_id: ints[3],
        device_id: ints[4],
        bankgroup_id: ints[5],
        bank_id: ints[6],
        row_id: ints[7],
        column_id: ints[8],
        error_type,
        log_time,
        bit_matrix,
        static_attrs,
    };
    if let Err(e) = event.validate(geometry) {
        warnings.push(IngestWarning {
            row,
            message: e.to_string(),
            row_dropped: true,
        });
        return None;
    }
    Some(event)
}

/// Serialize events to canonical JSONL: one record per line, canonical
/// column names plus `dimm_uid`, `beat_info` as the beat-major mask.
pub fn write_canonical_jsonl<W: Write>(events: &[CeEvent], mut out: W) -> Result<()> {
    for e in events {
        let mut obj = serde_json::Map::new();
        obj.insert("dimm_uid".into(), e.dimm_uid.as_str().into());
        obj.insert("cpuid".into(), e.cpu_id.into());
        obj.insert("channelid".into(), e.channel_id.into());
        obj.insert("dimmid".into(), e.dimm_id.into());
        obj.insert("rankid".into(), e.rank_id.into());
        obj.insert("deviceid".into(), e.device_id.into());
        obj.insert("bankgroupid".into(), e.bankgroup_id.into());
        obj.insert("bankid".into(), e.bank_id.into());
        obj.insert("rowid".into(), e.row_id.into());
        obj.insert("columnid".into(), e.column_id.into());
        obj.insert("retryrderrlogparity".into(), 0.into());
        obj.insert("retryrderrlog".into(), 0.into());
        obj.insert("beat_info".into(), e.bit_matrix.mask().into());
        obj.insert("error_type".into(), e.error_type.code().into());
        obj.insert("log_time".into(), e.log_time.into());
        for name in STATIC_ATTR_COLUMNS {
            if let Some(v) = e.static_attrs.get(name) {
                obj.insert(name.into(), v.as_str().into());
            }
        }
        serde_json::to_writer(&mut out, &serde_json::Value::Object(obj))
            .map_err(|e| Error::data(format!("jsonl write: {e}")))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub const FAILURE_FILE_HEADER: &str = "dimm_uid,failure_time_epoch_s";

/// Parse the two-column failure file. Duplicate DIMMs keep their earliest
/// failure time; output is sorted by uid.
pub fn parse_failures<R: Read>(source: R) -> Result<Vec<FailureRecord>> {
    let reader = BufReader::new(source);
    let mut lines = reader.lines();
    match lines.next() {
        Some(header) => {
            let header = header?;
            if header.trim() != FAILURE_FILE_HEADER {
                return Err(Error::data(format!(
                    "failure file header must be {FAILURE_FILE_HEADER:?}, got {header:?}"
                )));
            }
        }
        None => return Ok(Vec::new()),
    }
    let mut first_failure: BTreeMap<DimmUid, i64> = BTreeMap::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (uid, time) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::data(format!("failure file row {}: missing comma", idx + 2)))?;
        let time: i64 = time.trim().parse().map_err(|_| {
            Error::data(format!(
                "failure file row {}: bad timestamp {time:?}",
                idx + 2
            ))
        })?;
        let uid = DimmUid::new(uid.trim());
        first_failure
            .entry(uid)
            .and_modify(|t| *t = (*t).min(time))
            .or_insert(time);
    }
    Ok(first_failure
        .into_iter()
        .map(|(dimm_uid, failure_time)| FailureRecord {
            dimm_uid,
            failure_time,
        })
        .collect())
}

pub fn write_failures<W: Write>(failures: &[FailureRecord], mut out: W) -> Result<()> {
    writeln!(out, "{FAILURE_FILE_HEADER}")?;
    for f in failures {
        writeln!(out, "{},{}", f.dimm_uid, f.failure_time)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom() -> Geometry {
        Geometry::default()
    }

    #[test]
    fn decode_lowest_mask_bit() {
        let (m, issues) = decode_bit_matrix(&RawBitInfo::Mask(1), &geom());
        assert!(issues.is_empty());
        assert!(m.get(0, 0));
        assert_eq!(m.count_set(), 1);
    }

    #[test]
    fn decode_beat_map_entry() {
        let (m, issues) = decode_bit_matrix(&RawBitInfo::BeatMap(vec![(6, vec![2])]), &geom());
        assert!(issues.is_empty());
        assert!(m.get(6, 2));
        assert_eq!(m.count_set(), 1);
    }

    #[test]
    fn decode_zero_mask_flags_missing_bitinfo() {
        let (m, issues) = decode_bit_matrix(&RawBitInfo::Mask(0), &geom());
        assert!(issues.is_empty());
        assert!(m.bitinfo_missing());
        let (m, issues) = decode_bit_matrix(&RawBitInfo::Missing, &geom());
        assert!(issues.is_empty());
        assert!(m.bitinfo_missing());
    }

    #[test]
    fn parse_published_sample_record() {
        let line = r#"{"CpuId": 0, "ChannelId": 1, "DimmId": 0, "RankId": 1, "ChipId": 1, "BankId": 2, "RowId": 67745, "ColumnId": 0, "MemoryType": "DDR4", "Manufacturer": "A", "Region": "E", "Capacity": 16, "ProcessorArchitecture": "X86 Intel Purley", "MaxSpeedMHz": 4000, "FrequencyMHz": 2600, "LogTime": 1711522709, "beats": {"0": [], "1": [], "2": [], "3": [], "4": [], "5": [], "6": [57], "7": []}}"#;
        let outcome = parse_ce_log(line.as_bytes(), LogFormat::CanonicalJsonl, &geom()).unwrap();
        assert_eq!(outcome.events.len(), 1);
        let e = &outcome.events[0];
        assert_eq!(e.rank_id, 1);
        assert_eq!(e.device_id, 1);
        assert_eq!(e.bank_id, 2);
        assert_eq!(e.row_id, 67745);
        assert_eq!(e.column_id, 0);
        assert_eq!(e.log_time, 1711522709);
        // payload 57 exceeds any DQ index and is dropped with a warning
        assert!(e.bit_matrix.bitinfo_missing());
        assert_eq!(outcome.warnings.len(), 1);
        assert!(!outcome.warnings[0].row_dropped);
        assert!(outcome.warnings[0].message.contains("57"));
        assert_eq!(outcome.rows_dropped, 0);
        assert_eq!(e.static_attrs.get("Capacity").unwrap(), "16");
    }

    #[test]
    fn parse_empty_source() {
        let outcome = parse_ce_log(&b""[..], LogFormat::CanonicalJsonl, &geom()).unwrap();
        assert!(outcome.events.is_empty());
        assert!(outcome.warnings.is_empty());
        assert_eq!(outcome.rows_read, 0);
    }

    #[test]
    fn unknown_fields_are_ignored_missing_required_fields_drop_the_row() {
        let with_extra = r#"{"dimm_uid":"d","rankid":0,"deviceid":0,"bankgroupid":0,"bankid":0,"rowid":1,"columnid":1,"beat_info":1,"log_time":10,"vendor_extension":"x"}"#;
        let outcome =
            parse_ce_log(with_extra.as_bytes(), LogFormat::CanonicalJsonl, &geom()).unwrap();
        assert_eq!(outcome.events.len(), 1);
        assert!(outcome.warnings.is_empty());

        let missing_row_id =
            r#"{"dimm_uid":"d","rankid":0,"deviceid":0,"bankid":0,"columnid":1,"log_time":10}"#;
        let outcome = parse_ce_log(
            missing_row_id.as_bytes(),
            LogFormat::CanonicalJsonl,
            &geom(),
        )
        .unwrap();
        assert!(outcome.events.is_empty());
        assert_eq!(outcome.rows_dropped, 1);
        assert!(outcome.warnings[0].message.contains("rowid"));
    }

    fn csv_row(columnid: u32) -> String {
        let mut s = CSV23_COLUMNS.join(",");
        s.push('\n');
        s.push_str(&format!(
            "0,1,0,1,1,0,2,67745,{columnid},0,0,1,0,1711522709,A,M1,P1,16,2600,4000,MB0,DDR4,E\n"
        ));
        s
    }

    #[test]
    fn csv_row_out_of_bounds_column_is_dropped() {
        let data = csv_row(geom().n_col);
        let outcome = parse_ce_log(data.as_bytes(), LogFormat::Csv23, &geom()).unwrap();
        assert!(outcome.events.is_empty());
        assert_eq!(outcome.warnings.len(), 1);
        assert!(outcome.warnings[0].row_dropped);
        assert_eq!(outcome.rows_dropped, 1);
    }

    #[test]
    fn csv_row_in_bounds_parses() {
        let data = csv_row(0);
        let outcome = parse_ce_log(data.as_bytes(), LogFormat::Csv23, &geom()).unwrap();
        assert_eq!(outcome.events.len(), 1);
        assert!(outcome.warnings.is_empty());
        let e = &outcome.events[0];
        assert_eq!(e.bit_matrix.mask(), 1);
        assert_eq!(e.dimm_uid.as_str(), "E-A-c0-ch1-d0");
    }

    #[test]
    fn csv_header_mismatch_is_fatal() {
        let data = "a,b,c\n1,2,3\n";
        assert!(parse_ce_log(data.as_bytes(), LogFormat::Csv23, &geom()).is_err());
    }

    #[test]
    fn parse_is_deterministic() {
        let mut data = String::new();
        data.push_str(r#"{"dimm_uid":"d2","rankid":0,"deviceid":3,"bankgroupid":1,"bankid":2,"rowid":10,"columnid":4,"log_time":200,"beat_info":5}"#);
        data.push('\n');
        data.push_str(r#"{"dimm_uid":"d1","rankid":1,"deviceid":0,"bankgroupid":0,"bankid":0,"rowid":1,"columnid":1,"log_time":100,"beat_info":1}"#);
        data.push('\n');
        let a = parse_ce_log(data.as_bytes(), LogFormat::CanonicalJsonl, &geom()).unwrap();
        let b = parse_ce_log(data.as_bytes(), LogFormat::CanonicalJsonl, &geom()).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.warnings, b.warnings);
        // sorted by (dimm_uid, log_time)
        assert_eq!(a.events[0].dimm_uid.as_str(), "d1");
        assert_eq!(a.events[1].dimm_uid.as_str(), "d2");
    }

    #[test]
    fn canonical_jsonl_round_trip() {
        let data = csv_row(0);
        let parsed = parse_ce_log(data.as_bytes(), LogFormat::Csv23, &geom()).unwrap();
        let mut buf = Vec::new();
        write_canonical_jsonl(&parsed.events, &mut buf).unwrap();
        let reparsed = parse_ce_log(&buf[..], LogFormat::CanonicalJsonl, &geom()).unwrap();
        assert_eq!(parsed.events, reparsed.events);
    }

    #[test]
    fn failure_file_round_trip_and_first_failure_wins() {
        let data = "dimm_uid,failure_time_epoch_s\nd1,500\nd2,300\nd1,100\n";
        let failures = parse_failures(data.as_bytes()).unwrap();
        assert_eq!(failures.len(), 2);
        assert_eq!(failures[0].dimm_uid.as_str(), "d1");
        assert_eq!(failures[0].failure_time, 100);
        let mut buf = Vec::new();
        write_failures(&failures, &mut buf).unwrap();
        assert_eq!(parse_failures(&buf[..]).unwrap(), failures);
    }

    #[test]
    fn geometry_validation() {
        assert!(Geometry::default().validate().is_ok());
        let zero_col = Geometry {
            n_col: 0,
            ..Geometry::default()
        };
        assert!(zero_col.validate().is_err());
        let oversized_bits = Geometry {
            n_beat: 8,
            n_dq: 8,
            ..Geometry::default()
        };
        assert!(oversized_bits.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn bit_matrix_mask_round_trip(mask in any::<u32>()) {
            let (m, dropped) = BitMatrix::from_mask(mask as u64, &geom());
            prop_assert!(dropped.is_empty());
            prop_assert_eq!(m.mask(), mask);
            let (m2, _) = decode_bit_matrix(&RawBitInfo::Mask(m.mask() as u64), &geom());
            prop_assert_eq!(m, m2);
        }
    }
}
