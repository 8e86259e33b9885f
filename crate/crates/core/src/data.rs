//! Multivariate series container, CSV ingestion, chronological splits,
//! per-channel standardisation and the seeded regime-switch generator.

use std::path::Path;

use chrono::NaiveDateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Headers recognised as a leading time/index column.
const TIME_HEADERS: &[&str] = &["t", "time", "date", "datetime", "timestamp", "index"];

const DATETIME_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d %H:%M",
];

fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in DATETIME_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .or_else(|| chrono::NaiveDate::parse_from_str(s, "%Y/%m/%d").ok())
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// A `T × C` series stored row-major, with optional timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    values: Vec<f64>,
    len: usize,
    channels: Vec<String>,
    /// Raw labels of the leading time column, if the file had one.
    pub timestamps: Option<Vec<String>>,
    /// Sampling rate inferred from datetime stamps.
    pub points_per_day: Option<f64>,
}

impl SeriesFrame {
    pub fn new(values: Vec<f64>, channels: Vec<String>) -> Result<Self> {
        let c = channels.len();
        if c == 0 || !values.len().is_multiple_of(c) {
            return Err(Error::data(format!(
                "{} values cannot form rows of {c} channels",
                values.len()
            )));
        }
        let len = values.len() / c;
        if len < 2 {
            return Err(Error::data(format!("series needs at least 2 rows, got {len}")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite value at row {}, channel {}",
                i / c,
                i % c
            )));
        }
        Ok(SeriesFrame {
            values,
            len,
            channels,
            timestamps: None,
            points_per_day: None,
        })
    }

    /// Builds a frame from per-channel columns of equal length.
    pub fn from_columns(columns: &[Vec<f64>], names: Option<Vec<String>>) -> Result<Self> {
        let c = columns.len();
        let t = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|col| col.len() != t) {
            return Err(Error::data("columns differ in length"));
        }
        let names = names.unwrap_or_else(|| (0..c).map(|i| format!("ch{i}")).collect());
        let mut values = Vec::with_capacity(t * c);
        for row in 0..t {
            values.extend(columns.iter().map(|col| col[row]));
        }
        SeriesFrame::new(values, names)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channels
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.n_channels();
        &self.values[t * c..(t + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let n = self.n_channels();
        self.values.iter().skip(c).step_by(n).copied().collect()
    }

    /// Rows `start..end` as a new frame.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let c = self.n_channels();
        if start >= end || end > self.len {
            return Err(Error::data(format!("bad row range {start}..{end} of {}", self.len)));
        }
        let mut out = SeriesFrame::new(self.values[start * c..end * c].to_vec(), self.channels.clone())
            .map_err(|_| Error::data(format!("row range {start}..{end} is shorter than 2")))?;
        out.timestamps = self.timestamps.as_ref().map(|ts| ts[start..end].to_vec());
        out.points_per_day = self.points_per_day;
        Ok(out)
    }

    /// Writes the frame as CSV, with the time column when present.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = Vec::new();
        if self.timestamps.is_some() {
            header.push("date".to_string());
        }
        header.extend(self.channels.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for t in 0..self.len {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if let Some(ts) = &self.timestamps {
                rec.push(ts[t].clone());
            }
            rec.extend(self.row(t).iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "null")
}

/// Reads a header-first CSV. A leading column whose header names time or
/// whose first cell is a datetime is kept as timestamps; every other column
/// must be numeric. Missing cells are filled by linear interpolation.
pub fn load_csv(path: &Path) -> Result<SeriesFrame> {
    if !path.exists() {
        return Err(Error::data(format!("no such file: {}", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::data(format!("{}: empty file", path.display())));
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }
    let has_time = TIME_HEADERS.contains(&header[0].to_lowercase().as_str())
        || (rows[0][0].parse::<f64>().is_err() && parse_datetime(&rows[0][0]).is_some());
    let first = usize::from(has_time);
    if header.len() <= first {
        return Err(Error::data(format!("{}: no value columns", path.display())));
    }
    let c = header.len() - first;
    let mut columns = vec![Vec::with_capacity(rows.len()); c];
    for (r, row) in rows.iter().enumerate() {
        for (j, col) in columns.iter_mut().enumerate() {
            let cell = row[first + j].as_str();
            let v = if is_missing(cell) {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| {
                    Error::data(format!(
                        "row {}, column {} ({}): not a number: {cell:?}",
                        r + 1,
                        first + j + 1,
                        header[first + j]
                    ))
                })?
            };
            col.push(v);
        }
    }
    for (j, col) in columns.iter_mut().enumerate() {
        interpolate_missing(col).map_err(|_| {
            Error::data(format!("column {} has no values", header[first + j]))
        })?;
    }
    let mut frame = SeriesFrame::from_columns(&columns, Some(header[first..].to_vec()))?;
    if has_time {
        let stamps: Vec<String> = rows.iter().map(|r| r[0].clone()).collect();
        frame.points_per_day = infer_points_per_day(&stamps);
        frame.timestamps = Some(stamps);
    }
    Ok(frame)
}

/// Fills NaN gaps linearly; leading and trailing gaps copy the nearest value.
pub fn interpolate_missing(x: &mut [f64]) -> Result<()> {
    let known: Vec<usize> = (0..x.len()).filter(|&i| !x[i].is_nan()).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return Err(Error::data("no observed values"));
    };
    for i in 0..first {
        x[i] = x[first];
    }
    for i in last + 1..x.len() {
        x[i] = x[last];
    }
    for w in known.windows(2) {
        let (a, b) = (w[0], w[1]);
        for i in a + 1..b {
            let f = (i - a) as f64 / (b - a) as f64;
            x[i] = x[a] + f * (x[b] - x[a]);
        }
    }
    Ok(())
}

/// Median spacing of datetime stamps, as samples per day.
pub fn infer_points_per_day(stamps: &[String]) -> Option<f64> {
    let parsed: Option<Vec<NaiveDateTime>> = stamps.iter().map(|s| parse_datetime(s)).collect();
    let parsed = parsed?;
    let mut deltas: Vec<i64> = parsed
        .windows(2)
        .map(|w| (w[1] - w[0]).num_seconds())
        .filter(|&d| d > 0)
        .collect();
    if deltas.is_empty() {
        return None;
    }
    deltas.sort_unstable();
    let median = deltas[deltas.len() / 2] as f64;
    Some(86_400.0 / median)
}

/// Row counts of a chronological split; each boundary is
/// `floor(T · cumulative ratio)`.
pub fn split_bounds(len: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::config(format!("split ratios sum to {total} > 1")));
    }
    // The tiny offset keeps exact decimal products like 10 × 0.8 from
    // flooring one short.
    let cut = |cum: f64| ((len as f64 * cum + 1e-9).floor() as usize).min(len);
    let a = cut(ratios[0]);
    let b = cut(ratios[0] + ratios[1]);
    let c = cut(total);
    Ok([a, b - a, c - b])
}

/// Train, validation and test parts of a frame, as row ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl SplitRanges {
    pub fn new(len: usize, ratios: [f64; 3]) -> Result<Self> {
        let [a, b, c] = split_bounds(len, ratios)?;
        Ok(SplitRanges {
            train: (0, a),
            val: (a, a + b),
            test: (a + b, a + b + c),
        })
    }

    pub fn get(&self, part: Split) -> (usize, usize) {
        match part {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Splits a frame into contiguous train, validation and test frames.
pub fn split(frame: &SeriesFrame, ratios: [f64; 3]) -> Result<[SeriesFrame; 3]> {
    let r = SplitRanges::new(frame.len(), ratios)?;
    Ok([
        frame.slice(r.train.0, r.train.1)?,
        frame.slice(r.val.0, r.val.1)?,
        frame.slice(r.test.0, r.test.1)?,
    ])
}

/// Per-channel z-scoring with statistics from one fitting frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics over `rows` of `values` (row-major, `c` wide).
    pub fn fit(values: &[f64], c: usize) -> Self {
        let t = values.len() / c;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for j in 0..c {
            let col = values.iter().skip(j).step_by(c);
            let mu = col.clone().sum::<f64>() / t as f64;
            let var = col.map(|v| (v - mu) * (v - mu)).sum::<f64>() / t as f64;
            mean[j] = mu;
            let s = var.sqrt();
            std[j] = if s < 1e-12 { 1.0 } else { s };
        }
        Standardizer { mean, std }
    }

    pub fn transform(&self, values: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect()
    }

    pub fn inverse(&self, values: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % c] + self.mean[i % c])
            .collect()
    }
}

/// Which of the two regimes a block of the synthetic series is in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Calm,
    Burst,
}

/// One contiguous regime block, rows `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegimeBlock {
    pub start: usize,
    pub end: usize,
    pub regime: Regime,
}

/// Parameters of the regime-switch generator.
///
/// The schedule alternates a calm block and a burst block, starting calm.
/// Calm block lengths are drawn uniformly from `calm_len`, burst lengths
/// from `burst_len` (both inclusive), from the same seed as the noise.
///
/// Each row is `a · sin(φ_t + φ_c) + s · ε` with `ε ~ N(0, 1)` and a
/// per-channel phase `φ_c`. Inside a block, amplitude `a`, noise `s` and
/// period take that regime's values. Over the first `transition` rows of
/// every block after the first, all three move linearly from the previous
/// regime's values to the new ones. The phase `φ_t` accumulates
/// `2π / period` per row, so the waveform stays continuous.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeSpec {
    pub channels: usize,
    pub calm_len: (usize, usize),
    pub burst_len: (usize, usize),
    pub calm_amp: f64,
    pub calm_period: f64,
    pub calm_noise: f64,
    pub burst_amp: f64,
    pub burst_period: f64,
    pub burst_noise: f64,
    pub transition: usize,
    /// Off yields a single calm block.
    pub bursts: bool,
}

impl Default for RegimeSpec {
    fn default() -> Self {
        RegimeSpec {
            channels: 1,
            calm_len: (512, 768),
            burst_len: (192, 320),
            calm_amp: 1.0,
            calm_period: 24.0,
            calm_noise: 0.05,
            burst_amp: 4.0,
            burst_period: 12.0,
            burst_noise: 0.3,
            transition: 48,
            bursts: true,
        }
    }
}

impl RegimeSpec {
    pub fn calm_only() -> Self {
        RegimeSpec {
            bursts: false,
            ..RegimeSpec::default()
        }
    }

    /// Short blocks and ramps: a 2048-row series switches about a dozen
    /// times, so every chronological split sees both regimes.
    pub fn rapid() -> Self {
        RegimeSpec {
            calm_len: (160, 256),
            burst_len: (96, 160),
            transition: 24,
            ..RegimeSpec::default()
        }
    }

    fn settings(&self, regime: Regime) -> (f64, f64, f64) {
        match regime {
            Regime::Calm => (self.calm_amp, self.calm_period, self.calm_noise),
            Regime::Burst => (self.burst_amp, self.burst_period, self.burst_noise),
        }
    }
}

/// Seeded regime-switch series plus its block schedule.
pub fn make_regime_synthetic(seed: u64, len: usize, spec: &RegimeSpec) -> Result<(SeriesFrame, Vec<RegimeBlock>)> {
    use rand::Rng;
    if len < 512 {
        return Err(Error::config(format!("synthetic series needs T >= 512, got {len}")));
    }
    if spec.channels == 0 {
        return Err(Error::config("synthetic series needs at least one channel"));
    }
    if !(spec.calm_period > 0.0 && spec.burst_period > 0.0) {
        return Err(Error::config("synthetic periods must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    let mut start = 0;
    let mut regime = Regime::Calm;
    while start < len {
        let n = if !spec.bursts {
            len
        } else {
            let (lo, hi) = match regime {
                Regime::Calm => spec.calm_len,
                Regime::Burst => spec.burst_len,
            };
            rng.random_range(lo.max(1)..=hi.max(lo).max(1))
        };
        let end = (start + n).min(len);
        blocks.push(RegimeBlock { start, end, regime });
        start = end;
        regime = match regime {
            Regime::Calm => Regime::Burst,
            Regime::Burst => Regime::Calm,
        };
    }
    let phases: Vec<f64> = (0..spec.channels)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Vec::with_capacity(len * spec.channels);
    let mut block = 0;
    let mut phase = 0.0;
    for t in 0..len {
        while blocks[block].end <= t {
            block += 1;
        }
        let (amp1, period1, noise1) = spec.settings(blocks[block].regime);
        let into = t - blocks[block].start;
        let (amp, period, noise) = if block > 0 && into < spec.transition {
            let (amp0, period0, noise0) = spec.settings(blocks[block - 1].regime);
            let w = (into + 1) as f64 / (spec.transition + 1) as f64;
            let lerp = |a: f64, b: f64| a + w * (b - a);
            (lerp(amp0, amp1), 1.0 / lerp(1.0 / period0, 1.0 / period1), lerp(noise0, noise1))
        } else {
            (amp1, period1, noise1)
        };
        for offset in &phases {
            values.push(amp * (phase + offset).sin() + noise * std_normal.sample(&mut rng));
        }
        phase += std::f64::consts::TAU / period;
    }
    let names = (0..spec.channels).map(|i| format!("ch{i}")).collect();
    Ok((SeriesFrame::new(values, names)?, blocks))
}
