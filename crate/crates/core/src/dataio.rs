//! Dataset ingestion, windowing, normalization and auxiliary predictions.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CgfmError, Result};
use crate::pathkit::AuxLookup;

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;
/// Added to the per-window std inside the linear auxiliary.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

const DATETIME_NAMES: [&str; 4] = ["date", "datetime", "time", "timestamp"];

/// Time-major series as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    /// `T x C`
    pub data: Array2<f64>,
    pub names: Vec<String>,
}

/// Reads a CSV with a header row. The datetime column is the one named by
/// `datetime_column`, or, when `None`, a first column whose header is a
/// common datetime name or whose first value is not numeric.
pub fn load_csv(path: impl AsRef<Path>, datetime_column: Option<&str>) -> Result<RawSeries> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_csv(&text, datetime_column)
}

pub fn parse_csv(text: &str, datetime_column: Option<&str>) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let records = reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
    if headers.is_empty() {
        return Err(CgfmError::Input("CSV has no columns".into()));
    }

    let dt_idx = match datetime_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            CgfmError::Input(format!("datetime column {name:?} not found in header"))
        })?),
        None => {
            let named = DATETIME_NAMES.contains(&headers[0].to_ascii_lowercase().as_str());
            let non_numeric = records
                .first()
                .and_then(|r| r.get(0))
                .is_some_and(|v| v.parse::<f64>().is_err());
            (named || non_numeric).then_some(0)
        }
    };
    let value_cols: Vec<usize> = (0..headers.len()).filter(|&i| Some(i) != dt_idx).collect();
    if value_cols.is_empty() {
        return Err(CgfmError::Input("CSV has no value columns".into()));
    }

    let mut data = Array2::zeros((records.len(), value_cols.len()));
    let mut prev_stamp: Option<String> = None;
    let mut warned = false;
    for (r, rec) in records.iter().enumerate() {
        let row = r + 1;
        for (c, &col) in value_cols.iter().enumerate() {
            let cell = rec.get(col).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| CgfmError::Parse {
                row,
                column: headers[col].clone(),
                message: format!("cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(CgfmError::Parse {
                    row,
                    column: headers[col].clone(),
                    message: format!("missing or non-finite value {cell:?}"),
                });
            }
            data[[r, c]] = v;
        }
        if let Some(i) = dt_idx {
            let stamp = rec.get(i).unwrap_or("").to_owned();
            if let Some(prev) = &prev_stamp {
                if !warned && stamp_less(&stamp, prev) {
                    log::warn!("timestamps are not monotone at row {row}; keeping file order");
                    warned = true;
                }
            }
            prev_stamp = Some(stamp);
        }
    }
    Ok(RawSeries {
        data,
        names: value_cols.iter().map(|&i| headers[i].clone()).collect(),
    })
}

fn stamp_less(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x < y,
        _ => a < b,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CgfmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CgfmError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x > 0.0 && x < 1.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CgfmError::Config(format!(
                "split ratios must be in (0, 1) and sum to 1, got {r:?}"
            )));
        }
        Ok(())
    }

    /// Row ranges `[start, end)` of the three chronological segments.
    pub fn segments(&self, total: usize) -> [(usize, usize); 3] {
        let n_train = (total as f64 * self.train + 1e-9).floor() as usize;
        let n_val = (total as f64 * self.val + 1e-9).floor() as usize;
        [
            (0, n_train),
            (n_train, n_train + n_val),
            (n_train + n_val, total),
        ]
    }
}

/// Per-channel z-score statistics fitted on the training segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn normalize(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.clone();
        for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        out
    }

    pub fn denormalize(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.clone();
        for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| v * self.std[c] + self.mean[c]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub split: Split,
}

/// Normalized series cut into stride-1 `(history, future)` windows that
/// never cross a split boundary.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    /// `T x C`, normalized with training statistics.
    data: Array2<f64>,
    windows: Vec<Window>,
    history: usize,
    horizon: usize,
    stats: NormStats,
    segments: [(usize, usize); 3],
}

impl WindowedDataset {
    pub fn new(raw: &RawSeries, history: usize, horizon: usize, ratios: SplitRatios) -> Result<Self> {
        ratios.validate()?;
        if history == 0 || horizon == 0 {
            return Err(CgfmError::Config("history and horizon must be positive".into()));
        }
        let (total, channels) = raw.data.dim();
        if raw.names.len() != channels {
            return Err(CgfmError::Input(format!(
                "{} channel names for {channels} columns",
                raw.names.len()
            )));
        }
        let span = history + horizon;
        let segments = ratios.segments(total);
        for (seg, split) in segments.iter().zip(Split::ALL) {
            let len = seg.1 - seg.0;
            if len < span {
                return Err(CgfmError::Sizing {
                    segment: split.name(),
                    found: len,
                    needed: span,
                    min_total: min_total_length(span, ratios),
                });
            }
        }

        let train = raw.data.slice(s![segments[0].0..segments[0].1, ..]);
        let n = train.nrows() as f64;
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for (c, col) in train.axis_iter(Axis(1)).enumerate() {
            let m = col.sum() / n;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let sd = v.sqrt();
            if !(sd > 1e-12 * m.abs().max(1.0)) {
                return Err(CgfmError::ConstantChannel(raw.names[c].clone()));
            }
            mean.push(m);
            std.push(sd);
        }
        let stats = NormStats {
            names: raw.names.clone(),
            mean,
            std,
        };
        let data = stats.normalize(&raw.data);

        let mut windows = Vec::new();
        for (&(lo, hi), split) in segments.iter().zip(Split::ALL) {
            windows.extend((lo..=hi - span).map(|start| Window { start, split }));
        }
        Ok(Self {
            data,
            windows,
            history,
            horizon,
            stats,
            segments,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn history_len(&self) -> usize {
        self.history
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn normalized(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn segment(&self, split: Split) -> (usize, usize) {
        self.segments[Split::ALL.iter().position(|&s| s == split).unwrap()]
    }

    /// Global window indices belonging to `split`, in chronological order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.windows
            .iter()
            .enumerate()
            .filter(|(_, w)| w.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    fn window(&self, idx: usize) -> Result<Window> {
        self.windows.get(idx).copied().ok_or_else(|| {
            CgfmError::Input(format!("window {idx} out of range ({} windows)", self.len()))
        })
    }

    /// `C x L` history of window `idx`.
    pub fn history(&self, idx: usize) -> Result<Array2<f64>> {
        let w = self.window(idx)?;
        Ok(self.data.slice(s![w.start..w.start + self.history, ..]).t().as_standard_layout().into_owned())
    }

    /// `C x Fh` future of window `idx`.
    pub fn future(&self, idx: usize) -> Result<Array2<f64>> {
        let w = self.window(idx)?;
        let lo = w.start + self.history;
        Ok(self.data.slice(s![lo..lo + self.horizon, ..]).t().as_standard_layout().into_owned())
    }
}

fn min_total_length(span: usize, ratios: SplitRatios) -> usize {
    let mut total = span;
    loop {
        let segs = ratios.segments(total);
        if segs.iter().all(|(lo, hi)| hi - lo >= span) {
            return total;
        }
        total += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxProvenance {
    File,
    BuiltinLinear,
    Synthetic,
}

/// One flattened `C x Fh` prediction per dataset window, normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxPredictions {
    rows: Array2<f64>,
    channels: usize,
    horizon: usize,
    pub provenance: AuxProvenance,
}

impl AuxPredictions {
    pub fn new(
        rows: Array2<f64>,
        channels: usize,
        horizon: usize,
        provenance: AuxProvenance,
    ) -> Result<Self> {
        if rows.ncols() != channels * horizon {
            return Err(CgfmError::Dimension {
                expected: channels * horizon,
                found: rows.ncols(),
            });
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(CgfmError::Input("auxiliary predictions contain non-finite values".into()));
        }
        Ok(Self {
            rows,
            channels,
            horizon,
            provenance,
        })
    }

    pub fn from_windows(
        preds: &[Array2<f64>],
        channels: usize,
        horizon: usize,
        provenance: AuxProvenance,
    ) -> Result<Self> {
        Self::new(stack_windows(preds, channels, horizon)?, channels, horizon, provenance)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn get(&self, window: usize) -> Option<Array2<f64>> {
        (window < self.len()).then(|| {
            Array2::from_shape_vec((self.channels, self.horizon), self.rows.row(window).to_vec())
                .unwrap()
        })
    }
}

impl AuxLookup for AuxPredictions {
    fn aux_for(&self, window: usize) -> Result<Array2<f64>> {
        self.get(window).ok_or(CgfmError::MissingAux { window })
    }
}

fn stack_windows(preds: &[Array2<f64>], channels: usize, horizon: usize) -> Result<Array2<f64>> {
    let mut rows = Array2::zeros((preds.len(), channels * horizon));
    for (mut row, p) in rows.outer_iter_mut().zip(preds) {
        if p.dim() != (channels, horizon) {
            return Err(CgfmError::Shape {
                context: "window matrix",
                expected: vec![channels, horizon],
                found: p.shape().to_vec(),
            });
        }
        row.iter_mut().zip(p.iter()).for_each(|(d, s)| *d = *s);
    }
    Ok(rows)
}

/// Instance-normalized ridge forecaster, one `L -> Fh` map per channel,
/// fitted on training windows by the normal equations.
pub fn fit_linear_aux(dataset: &WindowedDataset, lambda: f64) -> Result<AuxPredictions> {
    if !(lambda > 0.0) {
        return Err(CgfmError::Config(format!("ridge lambda must be > 0, got {lambda}")));
    }
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(CgfmError::EmptySplit("train"));
    }
    let (l, fh, channels) = (dataset.history_len(), dataset.horizon(), dataset.channels());
    let n_all = dataset.len();
    let mut out = Array2::zeros((n_all, channels * fh));

    let histories: Vec<Array2<f64>> = (0..n_all).map(|i| dataset.history(i)).collect::<Result<_>>()?;
    for c in 0..channels {
        let mut z = Array2::zeros((train.len(), l));
        let mut y = Array2::zeros((train.len(), fh));
        for (r, &wi) in train.iter().enumerate() {
            let h = histories[wi].row(c);
            let (m, sd) = instance_stats(h.as_slice().unwrap());
            let fut = dataset.future(wi)?;
            z.row_mut(r).assign(&h.mapv(|v| (v - m) / sd));
            y.row_mut(r).assign(&fut.row(c).mapv(|v| (v - m) / sd));
        }
        let mut gram = z.t().dot(&z);
        for i in 0..l {
            gram[[i, i]] += lambda;
        }
        let rhs = z.t().dot(&y);
        let weights = cholesky_solve(gram, rhs)?;

        for (wi, h) in histories.iter().enumerate() {
            let h = h.row(c);
            let (m, sd) = instance_stats(h.as_slice().unwrap());
            let zn = h.mapv(|v| (v - m) / sd);
            let pred = zn.dot(&weights);
            out.slice_mut(s![wi, c * fh..(c + 1) * fh])
                .assign(&pred.mapv(|v| v * sd + m));
        }
    }
    AuxPredictions::new(out, channels, fh, AuxProvenance::BuiltinLinear)
}

/// Mean and (population std + eps) of one history row.
fn instance_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt() + INSTANCE_NORM_EPS)
}

/// Solves `A X = B` for symmetric positive definite `A`.
fn cholesky_solve(mut a: Array2<f64>, mut b: Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if !(d > 0.0) {
            return Err(CgfmError::Degenerate("normal equations are not positive definite".into()));
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / d;
        }
    }
    for col in 0..b.ncols() {
        for i in 0..n {
            let mut v = b[[i, col]];
            for k in 0..i {
                v -= a[[i, k]] * b[[k, col]];
            }
            b[[i, col]] = v / a[[i, i]];
        }
        for i in (0..n).rev() {
            let mut v = b[[i, col]];
            for k in i + 1..n {
                v -= a[[k, i]] * b[[k, col]];
            }
            b[[i, col]] = v / a[[i, i]];
        }
    }
    Ok(b)
}

/// Header of a per-window CSV: `window_idx, c0_f0, c0_f1, ...` (row-major).
pub fn window_csv_header(channels: usize, horizon: usize) -> Vec<String> {
    let mut h = vec!["window_idx".to_owned()];
    for c in 0..channels {
        for f in 0..horizon {
            h.push(format!("c{c}_f{f}"));
        }
    }
    h
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes one row per window, values flattened row-major.
pub fn write_window_csv(
    path: impl AsRef<Path>,
    indices: &[usize],
    rows: ArrayView2<f64>,
    channels: usize,
    horizon: usize,
) -> Result<()> {
    if rows.ncols() != channels * horizon {
        return Err(CgfmError::Dimension {
            expected: channels * horizon,
            found: rows.ncols(),
        });
    }
    if rows.nrows() != indices.len() {
        return Err(CgfmError::Alignment {
            expected: indices.len(),
            found: rows.nrows(),
        });
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(window_csv_header(channels, horizon))?;
    for (idx, row) in indices.iter().zip(rows.outer_iter()) {
        let mut rec = Vec::with_capacity(row.len() + 1);
        rec.push(idx.to_string());
        rec.extend(row.iter().map(|&v| format_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a per-window CSV, returning window indices and the `n x width` values.
pub fn read_window_csv(path: impl AsRef<Path>) -> Result<(Vec<usize>, Array2<f64>)> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if headers.first().map(String::as_str) != Some("window_idx") {
        return Err(CgfmError::Format("first column must be window_idx".into()));
    }
    let width = headers.len() - 1;
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (r_i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = r_i + 1;
        if rec.len() != headers.len() {
            return Err(CgfmError::Dimension {
                expected: width,
                found: rec.len().saturating_sub(1),
            });
        }
        let idx = rec[0].parse::<usize>().map_err(|_| CgfmError::Parse {
            row,
            column: "window_idx".into(),
            message: format!("bad window index {:?}", &rec[0]),
        })?;
        indices.push(idx);
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell.parse().map_err(|_| CgfmError::Parse {
                row,
                column: headers[j].clone(),
                message: format!("cannot parse {cell:?}"),
            })?;
            values.push(v);
        }
    }
    let n = indices.len();
    Ok((indices, Array2::from_shape_vec((n, width), values).unwrap()))
}

pub fn save_aux_csv(aux: &AuxPredictions, path: impl AsRef<Path>) -> Result<()> {
    let idx: Vec<usize> = (0..aux.len()).collect();
    write_window_csv(path, &idx, aux.rows.view(), aux.channels, aux.horizon)
}

/// Loads auxiliary predictions that must cover every window of `dataset`.
pub fn load_aux_csv(path: impl AsRef<Path>, dataset: &WindowedDataset) -> Result<AuxPredictions> {
    let (indices, rows) = read_window_csv(path)?;
    let width = dataset.channels() * dataset.horizon();
    if rows.ncols() != width {
        return Err(CgfmError::Dimension {
            expected: width,
            found: rows.ncols(),
        });
    }
    if rows.nrows() != dataset.len() {
        return Err(CgfmError::Alignment {
            expected: dataset.len(),
            found: rows.nrows(),
        });
    }
    if let Some((pos, &idx)) = indices.iter().enumerate().find(|(i, &w)| *i != w) {
        return Err(CgfmError::Input(format!(
            "auxiliary row {pos} carries window index {idx}; rows must be ordered 0..{}",
            dataset.len()
        )));
    }
    AuxPredictions::new(rows, dataset.channels(), dataset.horizon(), AuxProvenance::File)
}

/// Flattens window matrices into rows for CSV output.
pub fn windows_to_rows(preds: &[Array2<f64>]) -> Result<Array2<f64>> {
    let Some(first) = preds.first() else {
        return Ok(Array2::zeros((0, 0)));
    };
    let (c, f) = first.dim();
    stack_windows(preds, c, f)
}

pub fn rows_to_windows(rows: &Array2<f64>, channels: usize, horizon: usize) -> Result<Vec<Array2<f64>>> {
    if rows.ncols() != channels * horizon {
        return Err(CgfmError::Dimension {
            expected: channels * horizon,
            found: rows.ncols(),
        });
    }
    Ok(rows
        .outer_iter()
        .map(|r| Array2::from_shape_vec((channels, horizon), r.to_vec()).unwrap())
        .collect())
}

/// Column means of a `T x C` block; used by tests and diagnostics.
pub fn column_means(block: ArrayView2<f64>) -> Array1<f64> {
    block.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(block.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    fn series(data: Array2<f64>) -> RawSeries {
        let names = (0..data.ncols()).map(|c| format!("ch{c}")).collect();
        RawSeries { data, names }
    }

    fn wavy(t: usize, c: usize) -> RawSeries {
        series(Array2::from_shape_fn((t, c), |(i, j)| {
            (i as f64 * 0.3 + j as f64).sin() * (1.0 + j as f64) + 0.01 * i as f64
        }))
    }

    #[test]
    fn reads_small_csv() {
        let raw = parse_csv("a,b\n1,2\n3,4\n5,6\n", None).unwrap();
        assert_eq!(raw.names, vec!["a", "b"]);
        assert_eq!(raw.data, ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
    }

    #[test]
    fn nan_cell_reports_row_and_column() {
        let mut text = String::from("date,HUFL,OT\n");
        for i in 1..=20 {
            let ot = if i == 17 { "NaN".to_owned() } else { format!("{i}.5") };
            writeln!(text, "2016-07-01 {i:02}:00:00,{i},{ot}").unwrap();
        }
        let err = parse_csv(&text, None).unwrap_err();
        match err {
            CgfmError::Parse { row, column, .. } => {
                assert_eq!(row, 17);
                assert_eq!(column, "OT");
            }
            other => panic!("unexpected {other}"),
        }
        let err = parse_csv("a,b\n1,\n", None).unwrap_err();
        assert!(matches!(err, CgfmError::Parse { row: 1, .. }), "{err}");
    }

    #[test]
    fn ett_style_file_drops_datetime() {
        let mut text = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for i in 0..5 {
            writeln!(text, "2016-07-01 0{i}:00:00,5.8,2.0,1.6,0.4,4.2,1.3,30.5").unwrap();
        }
        let raw = parse_csv(&text, None).unwrap();
        assert_eq!(raw.data.dim(), (5, 7));
        assert_eq!(raw.names[0], "HUFL");
        assert_eq!(raw.names[6], "OT");
        let named = parse_csv(&text, Some("date")).unwrap();
        assert_eq!(named, raw);
        assert!(parse_csv(&text, Some("stamp")).is_err());
    }

    #[test]
    fn non_monotone_timestamps_keep_order() {
        let raw = parse_csv("time,x\n3,1\n1,2\n2,3\n", Some("time")).unwrap();
        assert_eq!(raw.data.column(0).to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn window_count_per_segment() {
        let ds = WindowedDataset::new(&wavy(100, 2), 10, 5, SplitRatios::default()).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 46);
        assert_eq!(ds.indices(Split::Val).len(), 6);
        assert_eq!(ds.indices(Split::Test).len(), 6);
        assert_eq!(ds.segment(Split::Train), (0, 60));
    }

    #[test]
    fn no_window_crosses_a_boundary() {
        for (t, l, f) in [(100, 10, 5), (157, 7, 3), (400, 20, 24)] {
            let ds = WindowedDataset::new(&wavy(t, 1), l, f, SplitRatios::default()).unwrap();
            for w in ds.windows() {
                let (lo, hi) = ds.segment(w.split);
                assert!(w.start >= lo && w.start + l + f <= hi);
            }
        }
    }

    #[test]
    fn train_segment_is_standardized() {
        let ds = WindowedDataset::new(&wavy(300, 3), 12, 6, SplitRatios::default()).unwrap();
        let (lo, hi) = ds.segment(Split::Train);
        let block = ds.normalized().slice(s![lo..hi, ..]);
        for col in block.axis_iter(Axis(1)) {
            let n = col.len() as f64;
            let m = col.sum() / n;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn denormalize_recovers_raw() {
        let raw = wavy(200, 2);
        let ds = WindowedDataset::new(&raw, 8, 4, SplitRatios::default()).unwrap();
        let back = ds.stats().denormalize(ds.normalized());
        for (a, b) in back.iter().zip(raw.data.iter()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn constant_channel_is_rejected_by_name() {
        let mut raw = wavy(100, 2);
        raw.data.column_mut(1).fill(3.0);
        raw.names[1] = "flat".into();
        let err = WindowedDataset::new(&raw, 5, 5, SplitRatios::default()).unwrap_err();
        assert!(matches!(err, CgfmError::ConstantChannel(ref n) if n == "flat"));
    }

    #[test]
    fn short_series_reports_minimum_length() {
        let err = WindowedDataset::new(&wavy(60, 1), 10, 5, SplitRatios::default()).unwrap_err();
        match err {
            CgfmError::Sizing { min_total, .. } => {
                assert_eq!(min_total, 75);
                assert!(WindowedDataset::new(&wavy(75, 1), 10, 5, SplitRatios::default()).is_ok());
                assert!(WindowedDataset::new(&wavy(74, 1), 10, 5, SplitRatios::default()).is_err());
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn history_and_future_are_channel_major() {
        let raw = series(Array2::from_shape_fn((100, 2), |(i, j)| (i * 10 + j) as f64));
        let ds = WindowedDataset::new(&raw, 3, 2, SplitRatios::default()).unwrap();
        let st = ds.stats().clone();
        let h = st.denormalize(&ds.history(4).unwrap().t().to_owned());
        assert_eq!(h.column(0).to_vec(), vec![40.0, 50.0, 60.0]);
        let f = ds.future(4).unwrap();
        assert_eq!(f.dim(), (2, 2));
        let f = st.denormalize(&f.t().to_owned());
        assert!((f[[0, 1]] - 71.0).abs() < 1e-9);
    }

    #[test]
    fn linear_aux_recovers_linear_trend() {
        let raw = series(Array2::from_shape_fn((1000, 1), |(i, _)| 2.0 + 0.5 * i as f64));
        let ds = WindowedDataset::new(&raw, 10, 5, SplitRatios::default()).unwrap();
        let aux = fit_linear_aux(&ds, DEFAULT_RIDGE_LAMBDA).unwrap();
        assert_eq!(aux.len(), ds.len());
        for i in (0..ds.len()).step_by(37) {
            let truth = ds.future(i).unwrap();
            let pred = aux.aux_for(i).unwrap();
            let err = (&truth - &pred).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-6, "window {i}: {err}");
        }
    }

    #[test]
    fn huge_ridge_predicts_instance_mean() {
        let raw = wavy(300, 2);
        let ds = WindowedDataset::new(&raw, 12, 4, SplitRatios::default()).unwrap();
        let aux = fit_linear_aux(&ds, 1e9).unwrap();
        for i in [0, 50, ds.len() - 1] {
            let h = ds.history(i).unwrap();
            let p = aux.aux_for(i).unwrap();
            for c in 0..2 {
                let m = h.row(c).mean().unwrap();
                // Weights shrink like n / lambda, about 1e-6 here.
                for v in p.row(c) {
                    assert!((v - m).abs() < 1e-5, "{v} vs {m}");
                }
            }
        }
    }

    #[test]
    fn linear_aux_is_deterministic() {
        let ds = WindowedDataset::new(&wavy(300, 2), 12, 4, SplitRatios::default()).unwrap();
        let a = fit_linear_aux(&ds, 1e-3).unwrap();
        let b = fit_linear_aux(&ds, 1e-3).unwrap();
        assert!(a.rows().iter().zip(b.rows().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn aux_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = WindowedDataset::new(&wavy(200, 2), 8, 3, SplitRatios::default()).unwrap();
        let aux = fit_linear_aux(&ds, 1e-3).unwrap();
        let path = dir.path().join("aux.csv");
        save_aux_csv(&aux, &path).unwrap();
        let back = load_aux_csv(&path, &ds).unwrap();
        assert!(aux.rows().iter().zip(back.rows().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let narrow = ds.len();
        let bad = Array2::zeros((narrow, 5));
        let idx: Vec<usize> = (0..narrow).collect();
        write_window_csv(&path, &idx, bad.view(), 1, 5).unwrap();
        assert!(matches!(
            load_aux_csv(&path, &ds),
            Err(CgfmError::Dimension { expected: 6, found: 5 })
        ));

        let short = Array2::zeros((narrow - 2, 6));
        write_window_csv(&path, &idx[..narrow - 2], short.view(), 2, 3).unwrap();
        let err = load_aux_csv(&path, &ds).unwrap_err();
        assert!(matches!(err, CgfmError::Alignment { .. }));
        let msg = err.to_string();
        assert!(msg.contains(&narrow.to_string()) && msg.contains(&(narrow - 2).to_string()));
    }

    #[test]
    fn format_round_trips_exactly() {
        for v in [0.1, -1.0 / 3.0, 6.02214076e23, f64::MIN_POSITIVE, 1e-300, 123456.789] {
            assert_eq!(format_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
