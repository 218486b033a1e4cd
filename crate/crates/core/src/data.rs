//! CSV ingestion, Z-score normalization, time-ordered splits, rolling
//! windows and deterministic synthetic series.

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::{SeqTensor, Shape};
use chrono::{Datelike, Months, NaiveDate, NaiveDateTime, TimeDelta, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

pub const STD_EPSILON: f64 = 1e-8;
/// Calendar features per row: hour of day, day of week, day of month, month.
pub const N_TIME_MARKS: usize = 4;

/// Timestamped `len × N` matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    pub timestamps: Vec<NaiveDateTime>,
    pub columns: Vec<String>,
    /// Row-major values, one `Vec` per timestamp.
    pub values: Vec<Vec<f64>>,
    pub target: String,
}

impl SeriesFrame {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        columns: Vec<String>,
        values: Vec<Vec<f64>>,
        target: String,
    ) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::Ingest(format!(
                "{} timestamps for {} rows",
                timestamps.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|r| r.len() != columns.len()) {
            return Err(Error::Ingest(format!(
                "row {} has {} values, expected {}",
                i + 1,
                values[i].len(),
                columns.len()
            )));
        }
        if !columns.contains(&target) {
            return Err(Error::Ingest(format!("target column `{target}` not found")));
        }
        check_spacing(&timestamps)?;
        Ok(SeriesFrame {
            timestamps,
            columns,
            values,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_series(&self) -> usize {
        self.columns.len()
    }

    pub fn target_index(&self) -> usize {
        self.columns
            .iter()
            .position(|c| *c == self.target)
            .expect("target validated at construction")
    }

    pub fn column(&self, index: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[index]).collect()
    }

    /// Rows `range` as a new frame.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SeriesFrame {
        SeriesFrame {
            timestamps: self.timestamps[range.clone()].to_vec(),
            columns: self.columns.clone(),
            values: self.values[range].to_vec(),
            target: self.target.clone(),
        }
    }

    /// Keeps only the target column in univariate mode.
    pub fn select(&self, mode: Mode) -> SeriesFrame {
        match mode {
            Mode::Multivariate => self.clone(),
            Mode::Univariate => {
                let t = self.target_index();
                SeriesFrame {
                    timestamps: self.timestamps.clone(),
                    columns: vec![self.target.clone()],
                    values: self.values.iter().map(|r| vec![r[t]]).collect(),
                    target: self.target.clone(),
                }
            }
        }
    }

    pub fn time_marks(&self) -> Vec<[f64; N_TIME_MARKS]> {
        self.timestamps.iter().map(|&t| time_marks(t)).collect()
    }
}

fn check_spacing(ts: &[NaiveDateTime]) -> Result<()> {
    let Some(step) = ts.windows(2).next().map(|w| w[1] - w[0]) else {
        return Ok(());
    };
    for (i, w) in ts.windows(2).enumerate() {
        let gap = w[1] - w[0];
        if gap <= TimeDelta::zero() {
            return Err(Error::Ingest(format!(
                "timestamps not increasing at row {} ({} after {})",
                i + 2,
                w[1],
                w[0]
            )));
        }
        if gap != step {
            return Err(Error::Ingest(format!(
                "timestamps not uniformly spaced at row {}: gap {gap} differs from {step}",
                i + 2
            )));
        }
    }
    Ok(())
}

/// Calendar features scaled to `[-0.5, 0.5]`.
pub fn time_marks(t: NaiveDateTime) -> [f64; N_TIME_MARKS] {
    [
        t.hour() as f64 / 23.0 - 0.5,
        t.weekday().num_days_from_monday() as f64 / 6.0 - 0.5,
        (t.day() - 1) as f64 / 30.0 - 0.5,
        (t.month() - 1) as f64 / 11.0 - 0.5,
    ]
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// Reads a headed CSV whose first column is a timestamp and the rest
/// numeric. `target` defaults to the last column. Row numbers in errors
/// count data rows from 1.
pub fn load_csv(path: &Path, target: Option<&str>) -> Result<SeriesFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?
        .clone();
    if header.len() < 2 || header.iter().all(str::is_empty) {
        return Err(Error::Ingest(format!(
            "{}: empty file or no value columns",
            path.display()
        )));
    }
    let columns: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingest(format!("row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Ingest(format!(
                "row {row}: {} fields, expected {}",
                rec.len(),
                header.len()
            )));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| Error::Ingest(format!("row {row}: cannot parse timestamp `{}`", &rec[0])))?;
        let vals = rec
            .iter()
            .skip(1)
            .zip(&columns)
            .map(|(cell, col)| {
                f64::from_str(cell.trim())
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::Ingest(format!("row {row}, column `{col}`: cannot parse `{cell}`"))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        timestamps.push(ts);
        values.push(vals);
    }
    if values.is_empty() {
        return Err(Error::Ingest(format!("{}: no data rows", path.display())));
    }
    let target = target
        .map(str::to_string)
        .unwrap_or_else(|| columns.last().cloned().expect("at least one column"));
    SeriesFrame::new(timestamps, columns, values, target)
}

/// Per-column statistics fitted on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationState {
    /// Population mean and standard deviation per column; deviations below
    /// [`STD_EPSILON`] are clamped to it.
    pub fn fit(frame: &SeriesFrame) -> Result<Self> {
        if frame.is_empty() {
            return Err(Error::Ingest("cannot fit normalization on zero rows".into()));
        }
        let n = frame.len() as f64;
        let mut mean = vec![0.0; frame.n_series()];
        for r in &frame.values {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; frame.n_series()];
        for r in &frame.values {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .zip(&frame.columns)
            .map(|(s, col)| {
                let sd = (s / n).sqrt();
                if sd < STD_EPSILON {
                    log::warn!("column `{col}` has near-zero variance; std clamped to {STD_EPSILON}");
                    STD_EPSILON
                } else {
                    sd
                }
            })
            .collect();
        Ok(NormalizationState { mean, std })
    }

    pub fn apply(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        self.map(frame, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        self.map(frame, |v, m, s| v * s + m)
    }

    fn map(&self, frame: &SeriesFrame, f: impl Fn(f64, f64, f64) -> f64) -> Result<SeriesFrame> {
        if frame.n_series() != self.mean.len() {
            return Err(Error::Ingest(format!(
                "frame has {} columns, normalization state {}",
                frame.n_series(),
                self.mean.len()
            )));
        }
        let mut out = frame.clone();
        for r in &mut out.values {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v, *m, *s);
            }
        }
        Ok(out)
    }
}

/// Normalizes `frame`, fitting the statistics on it when `state` is absent.
pub fn zscore(
    frame: &SeriesFrame,
    state: Option<&NormalizationState>,
) -> Result<(SeriesFrame, NormalizationState)> {
    let state = match state {
        Some(s) => s.clone(),
        None => NormalizationState::fit(frame)?,
    };
    Ok((state.apply(frame)?, state))
}

pub const ETT_FRACTIONS: [f64; 3] = [12.0 / 20.0, 4.0 / 20.0, 4.0 / 20.0];
pub const ECL_FRACTIONS: [f64; 3] = [21.0 / 35.0, 7.0 / 35.0, 7.0 / 35.0];

/// Three consecutive segments with boundaries at `⌊len · cumulative fraction⌋`.
pub fn split_by_time(
    frame: &SeriesFrame,
    fractions: [f64; 3],
) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let len = frame.len() as f64;
    // the small slack keeps exact products such as 20 · 0.8 from landing
    // just below an integer
    let cut = |f: f64| ((len * f + 1e-9).floor() as usize).min(frame.len());
    let b1 = cut(fractions[0]);
    let b2 = cut(fractions[0] + fractions[1]);
    segments(frame, b1, b2, frame.len())
}

/// Calendar-month split: the first `months[0]` months from the first
/// timestamp train, the next `months[1]` validate, the next `months[2]`
/// test; later rows are dropped.
pub fn split_by_months(
    frame: &SeriesFrame,
    months: [u32; 3],
) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame)> {
    let start = *frame
        .timestamps
        .first()
        .ok_or_else(|| Error::Ingest("empty frame".into()))?;
    let edge = |m: u32| {
        start
            .checked_add_months(Months::new(m))
            .ok_or_else(|| Error::Config("month boundary out of range".into()))
    };
    let b = [
        edge(months[0])?,
        edge(months[0] + months[1])?,
        edge(months[0] + months[1] + months[2])?,
    ];
    let idx = |t: NaiveDateTime| frame.timestamps.partition_point(|&x| x < t);
    segments(frame, idx(b[0]), idx(b[1]), idx(b[2]))
}

fn segments(
    frame: &SeriesFrame,
    b1: usize,
    b2: usize,
    end: usize,
) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame)> {
    for (name, lo, hi) in [("train", 0, b1), ("val", b1, b2), ("test", b2, end)] {
        if hi <= lo {
            return Err(Error::Config(format!("empty {name} segment")));
        }
    }
    Ok((frame.slice(0..b1), frame.slice(b1..b2), frame.slice(b2..end)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[serde(alias = "uni", alias = "S")]
    Univariate,
    #[serde(alias = "multi", alias = "M")]
    Multivariate,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Univariate => "uni",
            Mode::Multivariate => "multi",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uni" | "univariate" | "s" => Ok(Mode::Univariate),
            "multi" | "multivariate" | "m" => Ok(Mode::Multivariate),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub input_len: usize,
    pub pred_len: usize,
    /// Rows of the input repeated as the decoder start token.
    pub token_len: usize,
    pub stride: usize,
    pub mode: Mode,
}

impl WindowSpec {
    pub fn new(input_len: usize, pred_len: usize, mode: Mode) -> Self {
        WindowSpec {
            input_len,
            pred_len,
            token_len: input_len,
            stride: 1,
            mode,
        }
    }

    pub fn span(&self) -> usize {
        self.input_len + self.pred_len
    }
}

/// One window: `input_len` observed rows and the `pred_len` rows after them.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub input: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

/// Index-addressable rolling windows over one segment.
#[derive(Debug, Clone)]
pub struct Windows {
    frame: SeriesFrame,
    marks: Option<Vec<[f64; N_TIME_MARKS]>>,
    spec: WindowSpec,
    count: usize,
}

/// Windows of `spec` over `frame`; none crosses the frame's end.
pub fn make_windows(frame: &SeriesFrame, spec: WindowSpec, with_marks: bool) -> Result<Windows> {
    if spec.input_len == 0 || spec.pred_len == 0 || spec.stride == 0 {
        return Err(Error::Config("input_len, pred_len and stride must be >= 1".into()));
    }
    if spec.token_len > spec.input_len {
        return Err(Error::Config("token_len exceeds input_len".into()));
    }
    if frame.len() < spec.span() {
        return Err(Error::Config(format!(
            "segment has {} rows; windows need at least {} (input {} + prediction {})",
            frame.len(),
            spec.span(),
            spec.input_len,
            spec.pred_len
        )));
    }
    let frame = frame.select(spec.mode);
    let count = (frame.len() - spec.span()) / spec.stride + 1;
    Ok(Windows {
        marks: with_marks.then(|| frame.time_marks()),
        frame,
        spec,
        count,
    })
}

impl Windows {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn n_series(&self) -> usize {
        self.frame.n_series()
    }

    pub fn frame(&self) -> &SeriesFrame {
        &self.frame
    }

    pub fn get(&self, i: usize) -> Option<Window> {
        (i < self.count).then(|| {
            let s = i * self.spec.stride;
            let mid = s + self.spec.input_len;
            Window {
                start: s,
                input: self.frame.values[s..mid].to_vec(),
                target: self.frame.values[mid..mid + self.spec.pred_len].to_vec(),
            }
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.count).filter_map(|i| self.get(i))
    }

    /// Stacks the listed windows into a model batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (t0, t, tok, n) = (
            self.spec.input_len,
            self.spec.pred_len,
            self.spec.token_len,
            self.n_series(),
        );
        let mut input = Vec::with_capacity(indices.len() * t0 * n);
        let mut target = Vec::with_capacity(indices.len() * t * n);
        let mut marks_in = Vec::new();
        let mut marks_dec = Vec::new();
        for &i in indices {
            let w = self
                .get(i)
                .ok_or_else(|| Error::Config(format!("window {i} out of range ({})", self.count)))?;
            w.input.iter().for_each(|r| input.extend_from_slice(r));
            w.target.iter().for_each(|r| target.extend_from_slice(r));
            if let Some(m) = &self.marks {
                let mid = w.start + t0;
                m[w.start..mid].iter().for_each(|r| marks_in.extend_from_slice(r));
                m[mid - tok..mid + t].iter().for_each(|r| marks_dec.extend_from_slice(r));
            }
        }
        let b = indices.len();
        Ok(Batch {
            input: SeqTensor::new(Shape::new(b, t0, n), input)?,
            target: SeqTensor::new(Shape::new(b, t, n), target)?,
            marks_in: match self.marks {
                Some(_) => Some(SeqTensor::new(Shape::new(b, t0, N_TIME_MARKS), marks_in)?),
                None => None,
            },
            marks_dec: match self.marks {
                Some(_) => Some(SeqTensor::new(Shape::new(b, tok + t, N_TIME_MARKS), marks_dec)?),
                None => None,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    SineMix,
    ArNoise,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sine_mix" => Ok(SynthKind::SineMix),
            "ar_noise" => Ok(SynthKind::ArNoise),
            other => Err(Error::Config(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

/// Periods of the sine mixture in rows; the two irrational ones never line
/// up with the dominant daily cycle.
pub const SINE_PERIODS: [f64; 3] = [24.0, 120.0 * std::f64::consts::SQRT_2, 8.0 * std::f64::consts::SQRT_2];
const SINE_AMPLITUDES: [f64; 3] = [1.0, 0.4, 0.25];
const AR_COEFFICIENT: f64 = 0.9;

/// Deterministic hourly synthetic series. `sine_mix` columns are three
/// sinusoids with per-column jittered amplitudes and random phases plus
/// Gaussian noise of std `noise`; `ar_noise` columns are AR(1) processes
/// with coefficient 0.9 and innovations of std `noise`. The last column is
/// named `OT` and is the target.
pub fn synth_series(
    kind: SynthKind,
    length: usize,
    n_series: usize,
    seed: u64,
    noise: f64,
) -> Result<SeriesFrame> {
    if length == 0 || n_series == 0 {
        return Err(Error::Config("synthetic length and width must be >= 1".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise std must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = vec![vec![0.0; n_series]; length];
    for c in 0..n_series {
        match kind {
            SynthKind::SineMix => {
                let amps: Vec<f64> = SINE_AMPLITUDES
                    .iter()
                    .map(|a| a * rng.random_range(0.9..1.1))
                    .collect();
                let phases: Vec<f64> = (0..3)
                    .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                    .collect();
                for (t, row) in values.iter_mut().enumerate() {
                    let clean: f64 = (0..3)
                        .map(|k| amps[k] * (std::f64::consts::TAU * t as f64 / SINE_PERIODS[k] + phases[k]).sin())
                        .sum();
                    row[c] = clean + noise * gauss.sample(&mut rng);
                }
            }
            SynthKind::ArNoise => {
                let mut prev = 0.0;
                for row in values.iter_mut() {
                    prev = AR_COEFFICIENT * prev + noise * gauss.sample(&mut rng);
                    row[c] = prev;
                }
            }
        }
    }
    let start = NaiveDate::from_ymd_opt(2016, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid start date");
    let timestamps = (0..length)
        .map(|i| start + TimeDelta::hours(i as i64))
        .collect();
    let mut columns: Vec<String> = (1..n_series).map(|i| format!("x{i}")).collect();
    columns.push("OT".into());
    SeriesFrame::new(timestamps, columns, values, "OT".into())
}

/// Writes a frame as a headed CSV (`date` first).
pub fn write_csv(frame: &SeriesFrame, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Ingest(e.to_string());
    let mut header = vec!["date".to_string()];
    header.extend(frame.columns.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for (t, row) in frame.timestamps.iter().zip(&frame.values) {
        let mut rec = vec![t.format("%Y-%m-%d %H:%M:%S").to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
