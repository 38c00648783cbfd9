//! Gridded NDVI input: parsing, preprocessing and seasonal averaging.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Deserialize;

use crate::error::{Error, Result};

pub const PERIODS_PER_YEAR: usize = 24;

pub const EXPECTED_HEADER: [&str; 6] = ["pixel_id", "col", "row", "year", "period", "ndvi"];

/// Default number of consecutive identical years that marks a pixel as bad.
pub const DEFAULT_QA_CONSECUTIVE_YEARS: usize = 2;

pub type PixelId = u64;

/// One pixel's full record; `values[year * 24 + period - 1]`, NaN where absent.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSeries {
    pub id: PixelId,
    pub col: i64,
    pub row: i64,
    pub values: Vec<f64>,
}

impl PixelSeries {
    pub fn year(&self, year: usize) -> &[f64] {
        &self.values[year * PERIODS_PER_YEAR..(year + 1) * PERIODS_PER_YEAR]
    }

    pub fn observation_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }
}

/// Parsed input in NDVI units, pixels sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub years: usize,
    pub pixels: Vec<PixelSeries>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedPixel {
    pub pixel_id: PixelId,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DropReason {
    QaIdenticalYears,
    IncompleteSeason,
    DegenerateSeries,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::QaIdenticalYears => "qa_identical_years",
            DropReason::IncompleteSeason => "incomplete_season",
            DropReason::DegenerateSeries => "degenerate_series",
        }
    }
}

/// Preprocessed grid: values clamped at zero and rescaled into `[0, 1000]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanGrid {
    pub years: usize,
    pub pixels: Vec<PixelSeries>,
    pub dropped: Vec<DroppedPixel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Season {
    FirstDry,
    LongRain,
    SecondDry,
    ShortRain,
}

impl Season {
    pub const ALL: [Season; 4] = [
        Season::FirstDry,
        Season::LongRain,
        Season::SecondDry,
        Season::ShortRain,
    ];

    /// 1-based season number.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn label(self) -> &'static str {
        match self {
            Season::FirstDry => "first_dry",
            Season::LongRain => "long_rain",
            Season::SecondDry => "second_dry",
            Season::ShortRain => "short_rain",
        }
    }

    /// Inclusive 1-based period range: Jan–Mar, Apr–Jun, Jul–Oct, Nov–Dec
    /// at two periods per month.
    pub fn periods(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Season::FirstDry => 1..=6,
            Season::LongRain => 7..=12,
            Season::SecondDry => 13..=20,
            Season::ShortRain => 21..=24,
        }
    }

    pub fn period_count(self) -> usize {
        self.periods().count()
    }

    pub fn of_period(period: usize) -> Option<Season> {
        Season::ALL.into_iter().find(|s| s.periods().contains(&period))
    }
}

/// Seasonal yearly averages for one retained pixel; `values[season][year]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeasonalSeries {
    pub id: PixelId,
    pub col: i64,
    pub row: i64,
    pub values: [Vec<f64>; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeasonalPanel {
    pub years: usize,
    pub pixels: Vec<SeasonalSeries>,
    /// Pixels with at least one season-year lacking a period.
    pub excluded: Vec<DroppedPixel>,
}

#[derive(Debug, Deserialize)]
struct InputRow {
    pixel_id: PixelId,
    col: i64,
    row: i64,
    year: u32,
    period: u32,
    ndvi: f64,
}

struct Accumulating {
    col: i64,
    row: i64,
    values: Vec<f64>,
}

/// Parses the `pixel_id,col,row,year,period,ndvi` CSV format.
pub fn parse_grid<R: Read>(reader: R) -> Result<RawGrid> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header = rdr.headers().map_err(|e| parse_error(1, e))?.clone();
    if header.iter().ne(EXPECTED_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header `{}`, found `{}`",
                EXPECTED_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut pixels: BTreeMap<PixelId, Accumulating> = BTreeMap::new();
    let mut max_year = None::<usize>;
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(parse_error(line, e));
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: InputRow = record
            .deserialize(Some(&header))
            .map_err(|e| parse_error(line, e))?;

        if !(1..=PERIODS_PER_YEAR as u32).contains(&row.period) {
            return Err(Error::PeriodOutOfRange {
                line,
                period: row.period,
            });
        }
        if !(-1.0..=1.0).contains(&row.ndvi) {
            return Err(Error::Parse {
                line,
                message: format!("ndvi {} outside [-1, 1]", row.ndvi),
            });
        }

        let entry = pixels.entry(row.pixel_id).or_insert_with(|| Accumulating {
            col: row.col,
            row: row.row,
            values: Vec::new(),
        });
        if (entry.col, entry.row) != (row.col, row.row) {
            return Err(Error::Parse {
                line,
                message: format!(
                    "pixel {} moved from ({}, {}) to ({}, {})",
                    row.pixel_id, entry.col, entry.row, row.col, row.row
                ),
            });
        }
        let year = row.year as usize;
        let slot = year * PERIODS_PER_YEAR + row.period as usize - 1;
        if entry.values.len() <= slot {
            entry.values.resize(slot + 1, f64::NAN);
        }
        if !entry.values[slot].is_nan() {
            return Err(Error::DuplicateObservation {
                line,
                pixel_id: row.pixel_id,
                year: row.year,
                period: row.period,
            });
        }
        entry.values[slot] = row.ndvi;
        max_year = Some(max_year.map_or(year, |m| m.max(year)));
    }

    let years = max_year.map_or(0, |y| y + 1);
    let pixels = pixels
        .into_iter()
        .map(|(id, mut acc)| {
            acc.values.resize(years * PERIODS_PER_YEAR, f64::NAN);
            PixelSeries {
                id,
                col: acc.col,
                row: acc.row,
                values: acc.values,
            }
        })
        .collect();
    Ok(RawGrid { years, pixels })
}

fn parse_error(line: u64, err: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        message: err.to_string(),
    }
}

/// Clamps negative NDVI to zero, rescales by 1000, then drops pixels with
/// `qa_consecutive_years` or more consecutive years of bit-identical
/// 24-period vectors.
pub fn preprocess(grid: RawGrid, qa_consecutive_years: usize) -> Result<CleanGrid> {
    check_qa(qa_consecutive_years)?;
    let RawGrid { years, mut pixels } = grid;
    for px in &mut pixels {
        for v in &mut px.values {
            if !v.is_nan() {
                *v = v.max(0.0) * 1000.0;
            }
        }
    }
    Ok(apply_qa(years, pixels, Vec::new(), qa_consecutive_years))
}

impl CleanGrid {
    /// Re-runs the QA screen on an already rescaled grid. Values are never
    /// rescaled twice, so this is idempotent.
    pub fn preprocess(self, qa_consecutive_years: usize) -> Result<CleanGrid> {
        check_qa(qa_consecutive_years)?;
        Ok(apply_qa(self.years, self.pixels, self.dropped, qa_consecutive_years))
    }

    pub fn parsed_count(&self) -> usize {
        self.pixels.len() + self.dropped.len()
    }
}

fn check_qa(qa_consecutive_years: usize) -> Result<()> {
    if qa_consecutive_years < 2 {
        return Err(Error::InvalidArgument(format!(
            "qa_consecutive_years must be at least 2, got {qa_consecutive_years}"
        )));
    }
    Ok(())
}

fn apply_qa(
    years: usize,
    pixels: Vec<PixelSeries>,
    mut dropped: Vec<DroppedPixel>,
    run_length: usize,
) -> CleanGrid {
    let mut kept = Vec::with_capacity(pixels.len());
    for px in pixels {
        if longest_identical_run(&px, years) >= run_length {
            dropped.push(DroppedPixel {
                pixel_id: px.id,
                reason: DropReason::QaIdenticalYears,
            });
        } else {
            kept.push(px);
        }
    }
    dropped.sort_by_key(|d| d.pixel_id);
    CleanGrid {
        years,
        pixels: kept,
        dropped,
    }
}

/// Longest run of consecutive complete years with identical values.
fn longest_identical_run(px: &PixelSeries, years: usize) -> usize {
    let complete = |y: usize| px.year(y).iter().all(|v| !v.is_nan());
    let same = |a: usize, b: usize| {
        px.year(a)
            .iter()
            .zip(px.year(b))
            .all(|(x, y)| x.to_bits() == y.to_bits())
    };
    let mut best = if (0..years).any(complete) { 1 } else { 0 };
    let mut run = 1;
    for y in 1..years {
        if complete(y) && complete(y - 1) && same(y - 1, y) {
            run += 1;
            best = best.max(run);
        } else {
            run = 1;
        }
    }
    best
}

/// Per-season arithmetic means for each year. Pixels missing any period of
/// any season-year are excluded and listed in `excluded`.
pub fn seasonal_averages(grid: &CleanGrid) -> SeasonalPanel {
    let mut pixels = Vec::with_capacity(grid.pixels.len());
    let mut excluded = Vec::new();
    'pixel: for px in &grid.pixels {
        let mut values: [Vec<f64>; 4] = Default::default();
        for (k, season) in Season::ALL.into_iter().enumerate() {
            let mut series = Vec::with_capacity(grid.years);
            for y in 0..grid.years {
                let year = px.year(y);
                let periods = &year[season.periods().start() - 1..*season.periods().end()];
                if periods.iter().any(|v| v.is_nan()) {
                    excluded.push(DroppedPixel {
                        pixel_id: px.id,
                        reason: DropReason::IncompleteSeason,
                    });
                    continue 'pixel;
                }
                series.push(periods.iter().sum::<f64>() / periods.len() as f64);
            }
            values[k] = series;
        }
        pixels.push(SeasonalSeries {
            id: px.id,
            col: px.col,
            row: px.row,
            values,
        });
    }
    SeasonalPanel {
        years: grid.years,
        pixels,
        excluded,
    }
}

/// Writes the `pixel_id,reason` report.
pub fn write_dropped_report<W: Write>(writer: W, dropped: &[DroppedPixel]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["pixel_id", "reason"])?;
    for d in dropped {
        wtr.write_record([d.pixel_id.to_string(), d.reason.as_str().to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
