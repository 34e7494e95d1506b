//! Binary spatial feature extraction over 0/1 matrices.
//!
//! Correctable-error logs carry spatial information as binary matrices at two
//! very different scales: the 8x4 DQ-Beat matrix of a single access and the
//! row/column occupancy of a whole bank. Both are summarized by the same
//! five per-line descriptors:
//!
//! * `element` - number of set bits
//! * `group` - number of maximal runs of set bits
//! * `max_consecutive` - length of the longest run
//! * `max_distance` - distance between the outermost set bits
//! * `min_distance` - smallest gap between two set bits
//!
//! Distances are undefined with fewer than two set bits; those descriptors
//! are reported as 0 (the classifier always sees `element` alongside them,
//! so the sentinel is unambiguous).
//!
//! Two-dimensional matrices are summarized along each axis by two
//! composition paths:
//!
//! * reduction-then-aggregation: descriptors per line, then one or more
//!   pooling operations across lines;
//! * aggregation-then-reduction: max-pool the matrix down to an occupancy
//!   vector, then descriptors of that vector.
//!
//! With `f = 5` descriptors and `k` pooling methods the output length is
//! `2 * f * (k + 1)` regardless of the matrix shape.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of per-line descriptors.
pub const NUM_DESCRIPTORS: usize = 5;

/// Descriptor names, in output order.
pub const DESCRIPTOR_NAMES: [&str; NUM_DESCRIPTORS] = [
    "element",
    "group",
    "max_consecutive",
    "max_distance",
    "min_distance",
];

/// Pooling operation applied across per-line descriptor vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::config(format!("unknown pooling method {other:?}"))),
        }
    }
}

/// Default pooling set: max plus mean.
pub fn default_pooling() -> Vec<Pooling> {
    vec![Pooling::Max, Pooling::Mean]
}

/// The five descriptors of a one-dimensional binary vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Bsfe1dFeatures {
    pub element: u32,
    pub group: u32,
    pub max_consecutive: u32,
    pub max_distance: u32,
    pub min_distance: u32,
}

impl Bsfe1dFeatures {
    pub fn to_array(self) -> [f64; NUM_DESCRIPTORS] {
        [
            self.element as f64,
            self.group as f64,
            self.max_consecutive as f64,
            self.max_distance as f64,
            self.min_distance as f64,
        ]
    }

    pub fn as_tuple(self) -> (u32, u32, u32, u32, u32) {
        (
            self.element,
            self.group,
            self.max_consecutive,
            self.max_distance,
            self.min_distance,
        )
    }
}

/// Descriptors of a dense binary vector.
pub fn bsfe_1d(bits: &[bool]) -> Result<Bsfe1dFeatures> {
    let indices: Vec<u32> = bits
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i as u32))
        .collect();
    bsfe_1d_from_indices(&indices, bits.len())
}

/// Descriptors from the sorted set-bit indices of a vector of length `n`.
///
/// Runs in O(set bits) independent of `n`, which is what makes bank-scale
/// matrices (rows in the hundred thousands) tractable.
pub fn bsfe_1d_from_indices(indices: &[u32], n: usize) -> Result<Bsfe1dFeatures> {
    if n == 0 {
        return Err(Error::config("bsfe_1d over a zero-length vector"));
    }
    let mut prev: Option<u32> = None;
    for &i in indices {
        if i as usize >= n {
            return Err(Error::data(format!(
                "set-bit index {i} out of range 0..{n}"
            )));
        }
        if let Some(p) = prev {
            if i <= p {
                return Err(Error::data("set-bit indices must be strictly increasing"));
            }
        }
        prev = Some(i);
    }

    let k = indices.len() as u32;
    if k == 0 {
        return Ok(Bsfe1dFeatures::default());
    }

    let mut group = 0u32;
    let mut max_consecutive = 1u32;
    let mut run = 1u32;
    let mut min_distance = u32::MAX;
    for (pos, &i) in indices.iter().enumerate() {
        if pos == 0 {
            group = 1;
            continue;
        }
        let gap = i - indices[pos - 1];
        min_distance = min_distance.min(gap);
        if gap == 1 {
            run += 1;
            max_consecutive = max_consecutive.max(run);
        } else {
            run = 1;
            group += 1;
        }
    }

    Ok(Bsfe1dFeatures {
        element: k,
        group,
        max_consecutive,
        max_distance: if k >= 2 {
            indices[indices.len() - 1] - indices[0]
        } else {
            0
        },
        min_distance: if k >= 2 { min_distance } else { 0 },
    })
}

/// Element-wise pooling over equal-length numeric vectors.
pub fn pool<V: AsRef<[f64]>>(vectors: &[V], method: Pooling) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::config("pool over an empty vector list"))?;
    let width = first.as_ref().len();
    let mut out = vec![0.0f64; width];
    match method {
        Pooling::Max => {
            out.copy_from_slice(first.as_ref());
            for v in &vectors[1..] {
                let v = v.as_ref();
                if v.len() != width {
                    return Err(Error::data("pool over vectors of unequal length"));
                }
                for (o, &x) in out.iter_mut().zip(v) {
                    if x > *o {
                        *o = x;
                    }
                }
            }
        }
        Pooling::Mean => {
            for v in vectors {
                let v = v.as_ref();
                if v.len() != width {
                    return Err(Error::data("pool over vectors of unequal length"));
                }
                for (o, &x) in out.iter_mut().zip(v) {
                    *o += x;
                }
            }
            let denom = vectors.len() as f64;
            for o in &mut out {
                *o /= denom;
            }
        }
    }
    Ok(out)
}

/// Coordinate-set representation of a binary matrix.
///
/// Bank occupancy matrices are on the order of 1e5 x 1e3 with a handful of
/// set cells, so the dense form is never materialized. Coordinates are kept
/// in a sorted set: deduplicated, deterministic iteration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseBinaryMatrix {
    n_rows: u32,
    n_cols: u32,
    coords: std::collections::BTreeSet<(u32, u32)>,
}

impl SparseBinaryMatrix {
    pub fn new(n_rows: u32, n_cols: u32) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::config("matrix dimensions must be positive"));
        }
        Ok(SparseBinaryMatrix {
            n_rows,
            n_cols,
            coords: Default::default(),
        })
    }

    pub fn from_coords(
        n_rows: u32,
        n_cols: u32,
        coords: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let mut m = SparseBinaryMatrix::new(n_rows, n_cols)?;
        for (r, c) in coords {
            m.insert(r, c)?;
        }
        Ok(m)
    }

    /// Build from a dense row-major grid; rows must be equal length.
    pub fn from_dense(rows: &[Vec<bool>]) -> Result<Self> {
        let n_rows = rows.len() as u32;
        let n_cols = rows.first().map(|r| r.len()).unwrap_or(0) as u32;
        let mut m = SparseBinaryMatrix::new(n_rows, n_cols)?;
        for (r, row) in rows.iter().enumerate() {
            if row.len() as u32 != n_cols {
                return Err(Error::data("ragged dense matrix"));
            }
            for (c, &bit) in row.iter().enumerate() {
                if bit {
                    m.insert(r as u32, c as u32)?;
                }
            }
        }
        Ok(m)
    }

    pub fn insert(&mut self, row: u32, col: u32) -> Result<()> {
        if row >= self.n_rows || col >= self.n_cols {
            return Err(Error::data(format!(
                "coordinate ({row}, {col}) outside {}x{} matrix",
                self.n_rows, self.n_cols
            )));
        }
        self.coords.insert((row, col));
        Ok(())
    }

    pub fn n_rows(&self) -> u32 {
        self.n_rows
    }

    pub fn n_cols(&self) -> u32 {
        self.n_cols
    }

    /// Number of distinct set cells.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.coords.iter().copied()
    }

    pub fn contains(&self, row: u32, col: u32) -> bool {
        self.coords.contains(&(row, col))
    }

    /// Union of set cells with another matrix of the same shape.
    pub fn union_in_place(&mut self, other: &SparseBinaryMatrix) -> Result<()> {
        if (self.n_rows, self.n_cols) != (other.n_rows, other.n_cols) {
            return Err(Error::data("union of differently shaped matrices"));
        }
        self.coords.extend(other.coords.iter().copied());
        Ok(())
    }

    pub fn transpose(&self) -> SparseBinaryMatrix {
        SparseBinaryMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            coords: self.coords.iter().map(|&(r, c)| (c, r)).collect(),
        }
    }

    /// Set-bit column indices per occupied row, ascending in both keys and
    /// values.
    fn rows_map(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut map: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &(r, c) in &self.coords {
            map.entry(r).or_default().push(c);
        }
        map
    }

    fn cols_map(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut map: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &(r, c) in &self.coords {
            map.entry(c).or_default().push(r);
        }
        map
    }
}

/// Output of [`bsfe_2d`]: one vector per axis, each of length
/// `f * (k + 1)` where `k` is the number of pooling methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bsfe2dFeatures {
    pub row_level: Vec<f64>,
    pub col_level: Vec<f64>,
}

impl Bsfe2dFeatures {
    /// Row-level followed by column-level, total length `2 * f * (k + 1)`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.row_level.clone();
        v.extend_from_slice(&self.col_level);
        v
    }
}

/// Total output length of [`bsfe_2d`] for a given pooling set.
pub fn bsfe_2d_len(pooling: &[Pooling]) -> usize {
    2 * NUM_DESCRIPTORS * (pooling.len() + 1)
}

/// Names of the [`bsfe_2d`] output entries, `bsfe.{axis}.{path}.{pool?}.{descriptor}`.
pub fn bsfe_2d_feature_names(pooling: &[Pooling]) -> Vec<String> {
    let mut names = Vec::with_capacity(bsfe_2d_len(pooling));
    for axis in ["row", "col"] {
        for p in pooling {
            for d in DESCRIPTOR_NAMES {
                names.push(format!("bsfe.{axis}.rta.{p}.{d}"));
            }
        }
        for d in DESCRIPTOR_NAMES {
            names.push(format!("bsfe.{axis}.atr.{d}"));
        }
    }
    names
}

/// Two-dimensional descriptors of a sparse binary matrix.
///
/// `occupied_only` controls the reduction-then-aggregation path: with
/// `false` every line of the matrix contributes its descriptor vector
/// (empty lines contribute zeros and dilute the mean); with `true` only
/// lines holding at least one set bit are pooled. Bit-level 8x4 matrices
/// use `false`; bank-level matrices use `true`, where pooling a hundred
/// thousand empty rows would drown the signal.
///
/// An empty matrix yields an all-zero vector under either setting.
pub fn bsfe_2d(
    x: &SparseBinaryMatrix,
    pooling: &[Pooling],
    occupied_only: bool,
) -> Result<Bsfe2dFeatures> {
    if pooling.is_empty() {
        return Err(Error::config(
            "bsfe_2d requires at least one pooling method",
        ));
    }
    let rows = x.rows_map();
    let cols = x.cols_map();
    let row_level = axis_features(&rows, &cols, x.n_rows(), x.n_cols(), pooling, occupied_only)?;
    let col_level = axis_features(&cols, &rows, x.n_cols(), x.n_rows(), pooling, occupied_only)?;
    Ok(Bsfe2dFeatures {
        row_level,
        col_level,
    })
}

/// One axis of the 2d extractor.
///
/// `lines` maps occupied line index to its sorted set-bit positions (length
/// `line_len` each); `cross` is the same map for the other axis, whose keys
/// are exactly the occupancy vector consumed by the aggregation-then-
/// reduction path.
fn axis_features(
    lines: &BTreeMap<u32, Vec<u32>>,
    cross: &BTreeMap<u32, Vec<u32>>,
    n_lines: u32,
    line_len: u32,
    pooling: &[Pooling],
    occupied_only: bool,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(NUM_DESCRIPTORS * (pooling.len() + 1));

    let mut max_acc = [0.0f64; NUM_DESCRIPTORS];
    let mut sum_acc = [0.0f64; NUM_DESCRIPTORS];
    for positions in lines.values() {
        let feats = bsfe_1d_from_indices(positions, line_len as usize)?.to_array();
        for (i, &v) in feats.iter().enumerate() {
            if v > max_acc[i] {
                max_acc[i] = v;
            }
            sum_acc[i] += v;
        }
    }
    // Lines without set bits contribute all-zero descriptors; with features
    // being non-negative they only ever matter through the mean denominator.
    let denom = if occupied_only {
        lines.len() as f64
    } else {
        n_lines as f64
    };
    for p in pooling {
        match p {
            Pooling::Max => out.extend_from_slice(&max_acc),
            Pooling::Mean => {
                if denom == 0.0 {
                    out.extend_from_slice(&[0.0; NUM_DESCRIPTORS]);
                } else {
                    out.extend(sum_acc.iter().map(|s| s / denom));
                }
            }
        }
    }

    // Aggregation-then-reduction: descriptors of the occupancy vector.
    let occupancy: Vec<u32> = cross.keys().copied().collect();
    out.extend(bsfe_1d_from_indices(&occupancy, line_len as usize)?.to_array());
    Ok(out)
}
