//! Masked daily matrices, multi-day streams, file formats, mask sampling and
//! outlier injection.
//!
//! Indices are 0-based everywhere, including in files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{indexed_stream, stream, Stream};

/// One observed cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Sparse map from `(row, col)` to a real value, e.g. injected outliers.
pub type SparseMap = BTreeMap<(usize, usize), f64>;

/// The sampled entries of one day's `n × t` matrix.
///
/// Entries are kept sorted by `(row, col)` and are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    n_locations: usize,
    n_timesteps: usize,
    entries: Vec<Entry>,
    day_index: usize,
}

impl ObservationSet {
    pub fn new(
        n_locations: usize,
        n_timesteps: usize,
        mut entries: Vec<Entry>,
        day_index: usize,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::NoObservations);
        }
        for e in &entries {
            if e.row >= n_locations || e.col >= n_timesteps {
                return Err(Error::Dimension(format!(
                    "entry ({}, {}) outside {}x{}",
                    e.row, e.col, n_locations, n_timesteps
                )));
            }
            if !e.value.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite value at ({}, {})",
                    e.row, e.col
                )));
            }
        }
        entries.sort_by_key(|e| (e.row, e.col));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].row, w[0].col) == (w[1].row, w[1].col))
        {
            return Err(Error::DuplicateEntry {
                day: day_index,
                row: w[0].row,
                col: w[0].col,
            });
        }
        Ok(Self {
            n_locations,
            n_timesteps,
            entries,
            day_index,
        })
    }

    /// All finite cells of a dense matrix; NaN cells are unobserved.
    pub fn from_dense(dense: &DMatrix<f64>, day_index: usize) -> Result<Self> {
        let mut entries = Vec::new();
        for i in 0..dense.nrows() {
            for j in 0..dense.ncols() {
                let v = dense[(i, j)];
                if v.is_finite() {
                    entries.push(Entry {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        Self::new(dense.nrows(), dense.ncols(), entries, day_index)
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    pub fn n_timesteps(&self) -> usize {
        self.n_timesteps
    }

    pub fn day_index(&self) -> usize {
        self.day_index
    }

    pub fn with_day_index(mut self, day_index: usize) -> Self {
        self.day_index = day_index;
        self
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sampling fraction `|Ω| / (n t)`.
    pub fn sampling_fraction(&self) -> f64 {
        self.entries.len() as f64 / (self.n_locations * self.n_timesteps) as f64
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.entries
            .binary_search_by_key(&(row, col), |e| (e.row, e.col))
            .is_ok()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.value)
    }

    /// Same index set with new values (in entry order).
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.entries.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} entries",
                values.len(),
                self.entries.len()
            )));
        }
        let entries = self
            .entries
            .iter()
            .zip(values)
            .map(|(e, &value)| Entry { value, ..*e })
            .collect();
        Ok(Self {
            entries,
            ..self.clone()
        })
    }

    /// Per-row lists of `(col, value)`.
    pub fn by_row(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows = vec![Vec::new(); self.n_locations];
        for e in &self.entries {
            rows[e.row].push((e.col, e.value));
        }
        rows
    }

    /// Per-column lists of `(row, value)`.
    pub fn by_col(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.n_timesteps];
        for e in &self.entries {
            cols[e.col].push((e.row, e.value));
        }
        cols
    }

    /// Dense `n × t` matrix with NaN in unobserved cells.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::from_element(self.n_locations, self.n_timesteps, f64::NAN);
        for e in &self.entries {
            m[(e.row, e.col)] = e.value;
        }
        m
    }

    /// Cells not in Ω.
    pub fn complement(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_locations * self.n_timesteps - self.len());
        let mut it = self.entries.iter().peekable();
        for i in 0..self.n_locations {
            for j in 0..self.n_timesteps {
                match it.peek() {
                    Some(e) if e.row == i && e.col == j => {
                        it.next();
                    }
                    _ => out.push((i, j)),
                }
            }
        }
        out
    }
}

/// A sequence of days sharing one matrix shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DayStream {
    days: Vec<ObservationSet>,
    ground_truth: Option<Vec<DMatrix<f64>>>,
}

impl DayStream {
    pub fn new(days: Vec<ObservationSet>) -> Result<Self> {
        if days.is_empty() {
            return Err(Error::NoObservations);
        }
        let (n, t) = (days[0].n_locations, days[0].n_timesteps);
        for w in days.windows(2) {
            if w[1].day_index <= w[0].day_index {
                return Err(Error::InvalidParameter(format!(
                    "day indices not strictly increasing ({} then {})",
                    w[0].day_index, w[1].day_index
                )));
            }
        }
        if let Some(d) = days
            .iter()
            .find(|d| d.n_locations != n || d.n_timesteps != t)
        {
            return Err(Error::Dimension(format!(
                "day {} is {}x{}, expected {}x{}",
                d.day_index, d.n_locations, d.n_timesteps, n, t
            )));
        }
        Ok(Self {
            days,
            ground_truth: None,
        })
    }

    pub fn with_ground_truth(mut self, truth: Vec<DMatrix<f64>>) -> Result<Self> {
        if truth.len() != self.days.len() {
            return Err(Error::Dimension(format!(
                "{} ground-truth matrices for {} days",
                truth.len(),
                self.days.len()
            )));
        }
        let (n, t) = self.shape();
        if truth.iter().any(|m| m.shape() != (n, t)) {
            return Err(Error::Dimension(format!("ground truth must be {n}x{t}")));
        }
        self.ground_truth = Some(truth);
        Ok(self)
    }

    pub fn days(&self) -> &[ObservationSet] {
        &self.days
    }

    pub fn ground_truth(&self) -> Option<&[DMatrix<f64>]> {
        self.ground_truth.as_deref()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.days[0].n_locations, self.days[0].n_timesteps)
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }
}

/// Optional explicit dimensions; inferred from the data when `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub n: Option<usize>,
    pub t: Option<usize>,
}

pub const LONG_CSV_HEADER: &str = "day,row,col,value";

/// Full-precision decimal (17 significant digits).
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn load_long_csv(path: &Path, dims: Dims) -> Result<DayStream> {
    parse_long_csv(open(path)?, dims)
}

/// Parse the `day,row,col,value` format.
pub fn parse_long_csv<R: BufRead>(reader: R, dims: Dims) -> Result<DayStream> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line.map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                if !line.trim().is_empty() {
                    break (i + 1, line);
                }
            }
            None => return Err(Error::NoObservations),
        }
    };
    if header.1.trim() != LONG_CSV_HEADER {
        return Err(Error::Parse {
            line: header.0,
            message: format!("expected header `{LONG_CSV_HEADER}`"),
        });
    }

    let mut per_day: BTreeMap<usize, Vec<Entry>> = BTreeMap::new();
    let mut seen = HashSet::new();
    let (mut max_row, mut max_col) = (0, 0);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let int = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("invalid {what} `{s}`"),
            })
        };
        let day = int(fields[0], "day")?;
        let row = int(fields[1], "row")?;
        let col = int(fields[2], "col")?;
        let value: f64 = fields[3].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid value `{}`", fields[3]),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("non-finite value `{}`", fields[3]),
            });
        }
        if !seen.insert((day, row, col)) {
            return Err(Error::DuplicateEntry { day, row, col });
        }
        max_row = max_row.max(row);
        max_col = max_col.max(col);
        per_day
            .entry(day)
            .or_default()
            .push(Entry { row, col, value });
    }
    if per_day.is_empty() {
        return Err(Error::NoObservations);
    }
    let n = dims.n.unwrap_or(max_row + 1);
    let t = dims.t.unwrap_or(max_col + 1);
    let days = per_day
        .into_iter()
        .map(|(day, entries)| ObservationSet::new(n, t, entries, day))
        .collect::<Result<Vec<_>>>()?;
    DayStream::new(days)
}

pub fn write_long_csv<W: Write>(stream: &DayStream, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LONG_CSV_HEADER}")?;
    for day in stream.days() {
        for e in day.entries() {
            writeln!(
                out,
                "{},{},{},{}",
                day.day_index(),
                e.row,
                e.col,
                format_value(e.value)
            )?;
        }
    }
    Ok(())
}

pub fn save_long_csv(stream: &DayStream, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_long_csv(stream, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Write per-day sparse maps as `day,row,col,<value_name>` lines.
pub fn write_sparse_csv<W: Write>(
    days: &[(usize, &SparseMap)],
    value_name: &str,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "day,row,col,{value_name}")?;
    for (day, map) in days {
        for (&(row, col), v) in map.iter() {
            writeln!(out, "{day},{row},{col},{}", format_value(*v))?;
        }
    }
    Ok(())
}

pub fn save_sparse_csv(days: &[(usize, &SparseMap)], value_name: &str, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_sparse_csv(days, value_name, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Read `day,row,col,<value>` lines (any value column name) into one map per
/// day. Unlike [`parse_long_csv`] an empty body is allowed.
pub fn parse_sparse_csv<R: BufRead>(reader: R) -> Result<BTreeMap<usize, SparseMap>> {
    let mut out: BTreeMap<usize, SparseMap> = BTreeMap::new();
    let mut header_seen = false;
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: k + 1,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: k + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        if !header_seen {
            if fields[..3] != ["day", "row", "col"] {
                return Err(bad("header must start with day,row,col".into()));
            }
            header_seen = true;
            continue;
        }
        let idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("bad index {s:?}")))
        };
        let (day, row, col) = (idx(fields[0])?, idx(fields[1])?, idx(fields[2])?);
        let value: f64 = fields[3]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| bad(format!("bad value {:?}", fields[3])))?;
        if out
            .entry(day)
            .or_default()
            .insert((row, col), value)
            .is_some()
        {
            return Err(Error::DuplicateEntry { day, row, col });
        }
    }
    if !header_seen {
        return Err(Error::Parse {
            line: 1,
            message: "missing header".into(),
        });
    }
    Ok(out)
}

pub fn load_sparse_csv(path: &Path) -> Result<BTreeMap<usize, SparseMap>> {
    parse_sparse_csv(open(path)?)
}

/// Read blank-line-separated blocks of comma-separated numbers. Cells equal
/// to `missing_token` become NaN.
pub fn parse_dense_blocks<R: BufRead>(reader: R, missing_token: &str) -> Result<Vec<DMatrix<f64>>> {
    let mut blocks = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let flush = |rows: &mut Vec<Vec<f64>>, blocks: &mut Vec<DMatrix<f64>>| {
        if !rows.is_empty() {
            let (n, t) = (rows.len(), rows[0].len());
            blocks.push(DMatrix::from_fn(n, t, |i, j| rows[i][j]));
            rows.clear();
        }
    };
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            flush(&mut rows, &mut blocks);
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                let cell = cell.trim();
                if cell == missing_token {
                    Ok(f64::NAN)
                } else {
                    cell.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            line: lineno,
                            message: format!("invalid cell `{cell}`"),
                        })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("ragged row: {} cells, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    flush(&mut rows, &mut blocks);
    if blocks.is_empty() {
        return Err(Error::NoObservations);
    }
    let shape = blocks[0].shape();
    if let Some((d, b)) = blocks.iter().enumerate().find(|(_, b)| b.shape() != shape) {
        return Err(Error::Dimension(format!(
            "block {} is {}x{}, expected {}x{}",
            d,
            b.nrows(),
            b.ncols(),
            shape.0,
            shape.1
        )));
    }
    Ok(blocks)
}

pub fn load_dense_matrices(path: &Path, missing_token: &str) -> Result<Vec<DMatrix<f64>>> {
    parse_dense_blocks(open(path)?, missing_token)
}

pub fn load_dense_csv(path: &Path, missing_token: &str) -> Result<DayStream> {
    parse_dense_csv(open(path)?, missing_token)
}

/// Dense format: one block per day, days numbered from 0.
pub fn parse_dense_csv<R: BufRead>(reader: R, missing_token: &str) -> Result<DayStream> {
    let days = parse_dense_blocks(reader, missing_token)?
        .iter()
        .enumerate()
        .map(|(d, m)| ObservationSet::from_dense(m, d))
        .collect::<Result<Vec<_>>>()?;
    DayStream::new(days)
}

/// Write matrices as blank-line-separated blocks; NaN cells are written as
/// `missing_token`.
pub fn write_dense_blocks<W: Write>(
    blocks: &[DMatrix<f64>],
    missing_token: &str,
    mut out: W,
) -> std::io::Result<()> {
    for (d, m) in blocks.iter().enumerate() {
        if d > 0 {
            writeln!(out)?;
        }
        for i in 0..m.nrows() {
            let line: Vec<String> = (0..m.ncols())
                .map(|j| {
                    let v = m[(i, j)];
                    if v.is_nan() {
                        missing_token.to_string()
                    } else {
                        format_value(v)
                    }
                })
                .collect();
            writeln!(out, "{}", line.join(","))?;
        }
    }
    Ok(())
}

pub fn save_dense_blocks(blocks: &[DMatrix<f64>], missing_token: &str, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dense_blocks(blocks, missing_token, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Keep `round(p n t)` uniformly chosen distinct cells of `full`.
pub fn sample_mask(full: &DMatrix<f64>, p: f64, seed: u64) -> Result<ObservationSet> {
    sample_mask_with(full, p, &mut stream(seed, Stream::Mask))
}

pub(crate) fn sample_mask_with<R: Rng + ?Sized>(
    full: &DMatrix<f64>,
    p: f64,
    rng: &mut R,
) -> Result<ObservationSet> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sampling fraction {p} outside (0, 1]"
        )));
    }
    let (n, t) = full.shape();
    let total = n * t;
    let count = (p * total as f64).round() as usize;
    if count == 0 {
        return Err(Error::NoObservations);
    }
    let mut picked = rand::seq::index::sample(rng, total, count).into_vec();
    picked.sort_unstable();
    let entries = picked
        .into_iter()
        .map(|k| {
            let (row, col) = (k / t, k % t);
            Entry {
                row,
                col,
                value: full[(row, col)],
            }
        })
        .collect();
    ObservationSet::new(n, t, entries, 0)
}

/// Parameters of the synthetic outlier corruption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierInjectionSpec {
    pub fraction: f64,
    pub magnitude: f64,
    pub seed: u64,
}

impl OutlierInjectionSpec {
    pub fn new(fraction: f64, magnitude: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidParameter(format!(
                "outlier fraction {fraction} outside [0, 1]"
            )));
        }
        if !(magnitude > 0.0 && magnitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "outlier magnitude {magnitude} must be positive"
            )));
        }
        Ok(Self {
            fraction,
            magnitude,
            seed,
        })
    }
}

/// Add `Uniform[-σ, σ]` corruption to `round(o |Ω|)` randomly chosen entries.
/// Returns the corrupted set and the added values.
pub fn inject_outliers(
    obs: &ObservationSet,
    spec: &OutlierInjectionSpec,
) -> Result<(ObservationSet, SparseMap)> {
    inject_outliers_with(obs, spec, &mut stream(spec.seed, Stream::Outliers))
}

/// [`inject_outliers`] on every day of a stream, each day drawing from its own
/// sub-stream of `spec.seed`. Ground truth is carried over unchanged.
pub fn inject_stream_outliers(
    stream: &DayStream,
    spec: &OutlierInjectionSpec,
) -> Result<(DayStream, Vec<SparseMap>)> {
    let mut days = Vec::with_capacity(stream.len());
    let mut truth = Vec::with_capacity(stream.len());
    for day in stream.days() {
        let mut rng = indexed_stream(spec.seed, Stream::Outliers, day.day_index() as u64);
        let (corrupted, added) = inject_outliers_with(day, spec, &mut rng)?;
        days.push(corrupted);
        truth.push(added);
    }
    let mut out = DayStream::new(days)?;
    if let Some(gt) = stream.ground_truth() {
        out = out.with_ground_truth(gt.to_vec())?;
    }
    Ok((out, truth))
}

pub(crate) fn inject_outliers_with<R: Rng + ?Sized>(
    obs: &ObservationSet,
    spec: &OutlierInjectionSpec,
    rng: &mut R,
) -> Result<(ObservationSet, SparseMap)> {
    let spec = OutlierInjectionSpec::new(spec.fraction, spec.magnitude, spec.seed)?;
    let count = (spec.fraction * obs.len() as f64).round() as usize;
    let mut picked = rand::seq::index::sample(rng, obs.len(), count).into_vec();
    picked.sort_unstable();
    let mut values: Vec<f64> = obs.values().collect();
    let mut truth = SparseMap::new();
    for k in picked {
        let e = rng.random_range(-spec.magnitude..=spec.magnitude);
        values[k] += e;
        let entry = obs.entries()[k];
        truth.insert((entry.row, entry.col), e);
    }
    Ok((obs.with_values(&values)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn long(text: &str) -> Result<DayStream> {
        parse_long_csv(text.as_bytes(), Dims::default())
    }

    #[test]
    fn long_csv_readback() {
        let s = long("day,row,col,value\n0,0,0,1.5\n0,1,2,2.0\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.shape(), (2, 3));
        assert_eq!(s.days()[0].len(), 2);
        assert_eq!(s.days()[0].entries()[1].value, 2.0);
    }

    #[test]
    fn long_csv_errors() {
        assert!(matches!(
            long("day,row,col,value\n"),
            Err(Error::NoObservations)
        ));
        assert!(matches!(
            long("day,row,col,value\n0,0,0,1.0\n0,0,0,2.0\n"),
            Err(Error::DuplicateEntry {
                day: 0,
                row: 0,
                col: 0
            })
        ));
        assert!(matches!(
            long("day,row,col,value\n0,0,0,1.0\n0,x,0,2.0\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            long("day,row,col,value\n0,0,0,inf\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            long("0,0,0,1.0\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn long_csv_dims_override() {
        let s = parse_long_csv(
            "day,row,col,value\n0,0,0,1.5\n".as_bytes(),
            Dims {
                n: Some(4),
                t: Some(5),
            },
        )
        .unwrap();
        assert_eq!(s.shape(), (4, 5));
        assert!(parse_long_csv(
            "day,row,col,value\n0,3,0,1.5\n".as_bytes(),
            Dims {
                n: Some(2),
                t: None
            },
        )
        .is_err());
    }

    #[test]
    fn dense_csv_readback() {
        let s = parse_dense_csv("1,NaN\nNaN,4\n".as_bytes(), "NaN").unwrap();
        let d = &s.days()[0];
        assert_eq!(d.sampling_fraction(), 0.5);
        assert_eq!(
            d.entries(),
            &[
                Entry {
                    row: 0,
                    col: 0,
                    value: 1.0
                },
                Entry {
                    row: 1,
                    col: 1,
                    value: 4.0
                }
            ]
        );
    }

    #[test]
    fn dense_csv_errors() {
        assert!(matches!(
            parse_dense_csv("1,2\n3,4\n\n1,2,3\n4,5,6\n".as_bytes(), "NaN"),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            parse_dense_csv("1,2\n3\n".as_bytes(), "NaN"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_dense_csv("NaN,NaN\nNaN,NaN\n".as_bytes(), "NaN"),
            Err(Error::NoObservations)
        ));
        let s = parse_dense_csv("1,-\n-,4\n".as_bytes(), "-").unwrap();
        assert_eq!(s.days()[0].len(), 2);
    }

    #[test]
    fn dense_round_trip() {
        let s = parse_dense_csv("1,NaN\nNaN,4\n\n0.1,2\n3,NaN\n".as_bytes(), "NaN").unwrap();
        let blocks: Vec<_> = s.days().iter().map(|d| d.to_dense()).collect();
        let mut buf = Vec::new();
        write_dense_blocks(&blocks, "NaN", &mut buf).unwrap();
        let back = parse_dense_csv(buf.as_slice(), "NaN").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn sample_mask_counts() {
        let full = DMatrix::from_fn(10, 10, |i, j| (i * 10 + j) as f64);
        assert_eq!(sample_mask(&full, 1.0, 3).unwrap().len(), 100);
        let a = sample_mask(&full, 0.25, 3).unwrap();
        assert_eq!(a.len(), 25);
        assert_eq!(a, sample_mask(&full, 0.25, 3).unwrap());
        let b = sample_mask(&full, 0.25, 4).unwrap();
        assert_ne!(a, b);
        for e in a.entries() {
            assert_eq!(e.value, full[(e.row, e.col)]);
        }
        assert!(sample_mask(&full, 0.0, 3).is_err());
        assert!(sample_mask(&full, 1.5, 3).is_err());
    }

    fn thousand() -> ObservationSet {
        let full = DMatrix::from_fn(40, 25, |i, j| (i as f64).sin() + j as f64);
        ObservationSet::from_dense(&full, 0).unwrap()
    }

    #[test]
    fn inject_identity() {
        let obs = thousand();
        let (c, truth) =
            inject_outliers(&obs, &OutlierInjectionSpec::new(0.0, 100.0, 1).unwrap()).unwrap();
        assert_eq!(c, obs);
        assert!(truth.is_empty());
    }

    #[test]
    fn inject_ten_percent() {
        let obs = thousand();
        assert_eq!(obs.len(), 1000);
        let spec = OutlierInjectionSpec::new(0.1, 100.0, 9).unwrap();
        let (c, truth) = inject_outliers(&obs, &spec).unwrap();
        assert_eq!(truth.len(), 100);
        assert!(truth.values().all(|e| e.abs() <= 100.0));
        // only values change
        assert!(c
            .entries()
            .iter()
            .zip(obs.entries())
            .all(|(a, b)| (a.row, a.col) == (b.row, b.col)));
        let restored: Vec<f64> = c
            .entries()
            .iter()
            .map(|e| e.value - truth.get(&(e.row, e.col)).copied().unwrap_or(0.0))
            .collect();
        let changed = c
            .entries()
            .iter()
            .zip(obs.entries())
            .filter(|(a, b)| a.value != b.value)
            .count();
        assert_eq!(changed, 100);
        for (r, b) in restored.iter().zip(obs.entries()) {
            assert!((r - b.value).abs() <= 1e-12 * (1.0 + b.value.abs()));
        }
        assert_eq!(inject_outliers(&obs, &spec).unwrap().1, truth);
    }

    #[test]
    fn sparse_csv_round_trip() {
        let a: SparseMap = [((0, 1), 0.1), ((3, 2), -7.25)].into_iter().collect();
        let b = SparseMap::new();
        let mut buf = Vec::new();
        write_sparse_csv(&[(0, &a), (4, &b)], "e_hat", &mut buf).unwrap();
        let back = parse_sparse_csv(buf.as_slice()).unwrap();
        assert_eq!(back.get(&0), Some(&a));
        assert!(!back.contains_key(&4));
        assert!(parse_sparse_csv("day,row,col,e\n".as_bytes())
            .unwrap()
            .is_empty());
        assert!(parse_sparse_csv("".as_bytes()).is_err());
        assert!(parse_sparse_csv("day,row,col,e\n0,0,0,1\n0,0,0,2\n".as_bytes()).is_err());
    }

    #[test]
    fn stream_injection_per_day() {
        let a = thousand();
        let b = thousand().with_day_index(1);
        let stream = DayStream::new(vec![a, b]).unwrap();
        let spec = OutlierInjectionSpec::new(0.05, 10.0, 3).unwrap();
        let (c, truth) = inject_stream_outliers(&stream, &spec).unwrap();
        assert_eq!(c.len(), 2);
        assert!(truth.iter().all(|t| t.len() == 50));
        assert_ne!(truth[0], truth[1]);
        assert_eq!(inject_stream_outliers(&stream, &spec).unwrap().1, truth);
    }

    #[test]
    fn stream_invariants() {
        let a = ObservationSet::new(
            2,
            2,
            vec![Entry {
                row: 0,
                col: 0,
                value: 1.0,
            }],
            1,
        )
        .unwrap();
        let b = a.clone().with_day_index(0);
        assert!(DayStream::new(vec![a.clone(), b]).is_err());
        let c = ObservationSet::new(
            3,
            2,
            vec![Entry {
                row: 0,
                col: 0,
                value: 1.0,
            }],
            2,
        )
        .unwrap();
        assert!(matches!(
            DayStream::new(vec![a, c]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn complement_partitions_grid() {
        let full = DMatrix::from_element(5, 7, 1.0);
        let obs = sample_mask(&full, 0.4, 2).unwrap();
        let comp = obs.complement();
        assert_eq!(comp.len() + obs.len(), 35);
        assert!(comp.iter().all(|&(i, j)| !obs.contains(i, j)));
    }
}
