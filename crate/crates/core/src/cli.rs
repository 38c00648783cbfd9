//! Command-line front end: `analyze`, `variogram` and `simulate`.
//!
//! Exit codes: 0 on success, 1 for input or validation errors, 2 for
//! numerical failures such as a degenerate field.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{self, DropReason, DroppedPixel, Season, DEFAULT_QA_CONSECUTIVE_YEARS};
use crate::procedures::{self, BlockTests, DecisionTable, LocationTests, ProcedureKind, TestPanel};
use crate::sim;
use crate::spatial::{self, DEFAULT_BIN_WIDTH, DEFAULT_BLOCK_SIZE, DEFAULT_MAX_LAG, DEFAULT_SILL_FRACTION};
use crate::trend::{BrillingerTest, Calibration, DEFAULT_MAX_LAG as DEFAULT_TREND_MAX_LAG};

pub const DEFAULT_MINIMA_DISTANCE: f64 = 15.0;

#[derive(Debug, Parser)]
#[command(name = "trendfdr", version, about = "Directional FDR screening of seasonal trends on gridded data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test every pixel and season for a monotone trend and apply a directional procedure.
    Analyze(AnalysisConfig),
    /// Empirical semivariogram of per-pixel mean values and its range.
    Variogram(VariogramConfig),
    /// Monte Carlo estimates of mdFDR and power for a file of scenarios.
    Simulate(SimulateConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcedureArg {
    #[value(name = "three_stage", alias = "three-stage")]
    ThreeStage,
    Adaptive,
    By,
}

impl From<ProcedureArg> for ProcedureKind {
    fn from(p: ProcedureArg) -> Self {
        match p {
            ProcedureArg::ThreeStage => ProcedureKind::ThreeStage,
            ProcedureArg::Adaptive => ProcedureKind::Adaptive,
            ProcedureArg::By => ProcedureKind::ByDirectional,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationArg {
    #[value(name = "small_sample", alias = "small-sample")]
    SmallSample,
    Raw,
}

impl From<CalibrationArg> for Calibration {
    fn from(c: CalibrationArg) -> Self {
        match c {
            CalibrationArg::SmallSample => Calibration::SmallSample,
            CalibrationArg::Raw => Calibration::Raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize)]
pub struct AnalysisConfig {
    /// Input CSV with header `pixel_id,col,row,year,period,ndvi`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = procedures::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Subregion side length in pixels.
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    #[arg(long, value_enum, default_value_t = ProcedureArg::ThreeStage)]
    pub procedure: ProcedureArg,
    /// Storey threshold for the adaptive procedure.
    #[arg(long, default_value_t = procedures::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_TREND_MAX_LAG)]
    pub trend_max_lag: usize,
    #[arg(long, value_enum, default_value_t = CalibrationArg::SmallSample)]
    pub trend_calibration: CalibrationArg,
    #[arg(long, default_value_t = DEFAULT_QA_CONSECUTIVE_YEARS)]
    pub qa_consecutive_years: usize,
    /// Distance used by the close-minima diagnostic.
    #[arg(long, default_value_t = DEFAULT_MINIMA_DISTANCE)]
    pub minima_distance: f64,
    /// Decision table CSV.
    #[arg(long)]
    pub output: PathBuf,
    /// Summary JSON, including the resolved configuration.
    #[arg(long)]
    pub summary: PathBuf,
    /// Optional `pixel_id,reason` report of dropped and excluded pixels.
    #[arg(long)]
    pub dropped: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("--alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.block_size < 1 {
            return Err(Error::InvalidArgument("--block-size must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidArgument(format!("--lambda must lie in (0, 1), got {}", self.lambda)));
        }
        if self.minima_distance.is_nan() || self.minima_distance <= 0.0 {
            return Err(Error::InvalidArgument("--minima-distance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VariogramConfig {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_LAG)]
    pub max_lag: f64,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    pub bin_width: f64,
    #[arg(long, default_value_t = DEFAULT_SILL_FRACTION)]
    pub sill_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_QA_CONSECUTIVE_YEARS)]
    pub qa_consecutive_years: usize,
    /// Variogram CSV `lag,gamma_hat,pair_count` with a `range,<value>` footer.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateConfig {
    /// Scenario CSV `m,n_i,mu,pi0,rho1,rho2,theta,alpha,replicates,seed`.
    #[arg(long)]
    pub scenarios: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeasonCount {
    pub season: usize,
    pub label: &'static str,
    pub up: usize,
    pub down: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSummary {
    pub block_id: usize,
    pub bx: i64,
    pub by: i64,
    pub n: usize,
    pub rejected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi0_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropCounts {
    pub qa_identical_years: usize,
    pub incomplete_season: usize,
    pub degenerate_series: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisSummary {
    pub config: AnalysisConfig,
    pub years: usize,
    pub pixels_parsed: usize,
    pub dropped: DropCounts,
    pub pixels_tested: usize,
    pub tests: usize,
    pub m: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub rejections: usize,
    pub seasons: Vec<SeasonCount>,
    pub blocks: Vec<BlockSummary>,
    /// Fraction of per-block minimum-p pixels with another such pixel closer
    /// than `minima_distance`.
    pub close_minima_fraction: f64,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", path.display())))
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(0) => Err(Error::InvalidArgument("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(f),
    }
}

struct TestedPixel {
    id: u64,
    col: i64,
    row: i64,
    p: [f64; 4],
    sign: [i8; 4],
}

/// Runs the full pipeline and writes the decision CSV, the summary JSON and
/// optionally the dropped-pixel report.
pub fn cmd_analyze(config: &AnalysisConfig) -> Result<AnalysisSummary> {
    config.validate()?;
    with_threads(config.threads, || analyze(config))
}

fn analyze(config: &AnalysisConfig) -> Result<AnalysisSummary> {
    let raw = ingest::parse_grid(open(&config.input)?)?;
    let clean = ingest::preprocess(raw, config.qa_consecutive_years)?;
    let pixels_parsed = clean.parsed_count();
    let panel = ingest::seasonal_averages(&clean);
    let mut dropped: Vec<DroppedPixel> = clean.dropped.clone();
    dropped.extend(panel.excluded.iter().cloned());

    let mut tested = Vec::new();
    if !panel.pixels.is_empty() {
        let test = BrillingerTest::new(panel.years, config.trend_max_lag)?
            .with_calibration(config.trend_calibration.into());
        let outcomes: Vec<Result<TestedPixel>> = panel
            .pixels
            .par_iter()
            .map(|px| {
                let mut p = [1.0; 4];
                let mut sign = [0; 4];
                for k in 0..4 {
                    let r = test.run(&px.values[k])?;
                    p[k] = r.p_value;
                    sign[k] = r.direction_sign;
                }
                Ok(TestedPixel { id: px.id, col: px.col, row: px.row, p, sign })
            })
            .collect();
        for (px, outcome) in panel.pixels.iter().zip(outcomes) {
            match outcome {
                Ok(t) => tested.push(t),
                Err(Error::DegenerateSeries { .. }) => dropped.push(DroppedPixel {
                    pixel_id: px.id,
                    reason: DropReason::DegenerateSeries,
                }),
                Err(e) => return Err(e),
            }
        }
    }
    if tested.is_empty() {
        eprintln!("warning: no pixels left to test after preprocessing");
    }

    let coords: Vec<_> = tested.iter().map(|t| (t.id, t.col, t.row)).collect();
    let part = spatial::partition(&coords, config.block_size)?;
    let by_id: std::collections::HashMap<u64, &TestedPixel> = tested.iter().map(|t| (t.id, t)).collect();
    let test_panel = TestPanel::new(
        part.blocks
            .iter()
            .map(|b| BlockTests {
                block_id: b.block_id,
                locations: b
                    .members
                    .iter()
                    .map(|id| {
                        let t = by_id[id];
                        LocationTests { pixel_id: t.id, p: t.p, sign: t.sign }
                    })
                    .collect(),
            })
            .collect(),
    )?;
    let table = procedures::run_procedure(&test_panel, config.procedure.into(), config.alpha, config.lambda)?;

    let mut out = create(&config.output)?;
    procedures::write_decision_csv(&mut out, &table)?;
    out.flush()?;
    if let Some(path) = &config.dropped {
        let mut w = create(path)?;
        ingest::write_dropped_report(&mut w, &dropped)?;
        w.flush()?;
    }

    let summary = summarize(config, clean.years, pixels_parsed, &dropped, &part, &table, &by_id);
    let mut w = create(&config.summary)?;
    serde_json::to_writer_pretty(&mut w, &summary)
        .map_err(|e| Error::InvalidArgument(format!("summary: {e}")))?;
    writeln!(w)?;
    w.flush()?;
    Ok(summary)
}

fn summarize(
    config: &AnalysisConfig,
    years: usize,
    pixels_parsed: usize,
    dropped: &[DroppedPixel],
    part: &spatial::Partition,
    table: &DecisionTable,
    by_id: &std::collections::HashMap<u64, &TestedPixel>,
) -> AnalysisSummary {
    let count = |r: DropReason| dropped.iter().filter(|d| d.reason == r).count();
    let seasons = Season::ALL
        .iter()
        .zip(table.season_counts())
        .map(|(s, (up, down))| SeasonCount { season: s.number(), label: s.label(), up, down })
        .collect();
    let blocks = part
        .blocks
        .iter()
        .zip(&table.blocks)
        .map(|(b, d)| BlockSummary {
            block_id: b.block_id,
            bx: b.bx,
            by: b.by,
            n: b.n(),
            rejected: d.rejected,
            pi0_hat: d.pi0_hat,
        })
        .collect();
    // Per-block pixel with the smallest elementary p-value; first wins on ties.
    let minima: Vec<(f64, f64)> = part
        .blocks
        .iter()
        .filter_map(|b| {
            b.members
                .iter()
                .map(|id| by_id[id])
                .min_by(|a, b| {
                    let pa = a.p.iter().copied().fold(f64::INFINITY, f64::min);
                    let pb = b.p.iter().copied().fold(f64::INFINITY, f64::min);
                    pa.total_cmp(&pb)
                })
                .map(|t| (t.col as f64, t.row as f64))
        })
        .collect();
    AnalysisSummary {
        config: config.clone(),
        years,
        pixels_parsed,
        dropped: DropCounts {
            qa_identical_years: count(DropReason::QaIdenticalYears),
            incomplete_season: count(DropReason::IncompleteSeason),
            degenerate_series: count(DropReason::DegenerateSeries),
        },
        pixels_tested: by_id.len(),
        tests: 4 * by_id.len(),
        m: table.m,
        s: table.stage1_rejections,
        rejections: table.rejections(),
        seasons,
        blocks,
        close_minima_fraction: spatial::close_minima_fraction(&minima, config.minima_distance),
    }
}

/// Writes the variogram CSV and returns the range estimate.
pub fn cmd_variogram(config: &VariogramConfig) -> Result<spatial::RangeEstimate> {
    if !(config.sill_fraction > 0.0 && config.sill_fraction < 1.0) {
        return Err(Error::InvalidArgument("--sill-fraction must lie in (0, 1)".into()));
    }
    let raw = ingest::parse_grid(open(&config.input)?)?;
    let clean = ingest::preprocess(raw, config.qa_consecutive_years)?;
    let field = spatial::mean_field(&clean);
    let v = spatial::empirical_semivariogram(&field, config.max_lag, config.bin_width)?;
    let range = spatial::estimate_range(&v, config.sill_fraction)?;
    if !range.reached {
        eprintln!("warning: sill fraction never reached; range set to max lag");
    }
    let mut w = create(&config.output)?;
    spatial::write_variogram_csv(&mut w, &v, Some(range.range))?;
    w.flush()?;
    Ok(range)
}

/// Runs every scenario in the file and writes one row per scenario and procedure.
pub fn cmd_simulate(config: &SimulateConfig) -> Result<Vec<sim::SimResult>> {
    let scenarios = sim::read_scenarios(open(&config.scenarios)?)?;
    let results = with_threads(config.threads, || {
        scenarios
            .iter()
            .map(|sc| sim::run_scenario(sc, &ProcedureKind::ALL))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut w = create(&config.output)?;
    sim::write_results(&mut w, &results)?;
    w.flush()?;
    Ok(results)
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Analyze(c) => cmd_analyze(c).map(|s| {
            println!(
                "tested {} pixels in {} blocks; S = {}; {} rejections",
                s.pixels_tested, s.m, s.s, s.rejections
            );
        }),
        Command::Variogram(c) => cmd_variogram(c).map(|r| {
            println!(
                "max_lag={} bin_width={} sill_fraction={} qa_consecutive_years={}; range = {} (sill {})",
                c.max_lag, c.bin_width, c.sill_fraction, c.qa_consecutive_years, r.range, r.sill
            );
        }),
        Command::Simulate(c) => cmd_simulate(c).map(|r| {
            println!("ran {} scenarios", r.len());
        }),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
