//! Directional multiple-testing procedures over a block-structured panel of
//! seasonal p-values.
//!
//! The panel is indexed by block `i`, location `j` within the block and season
//! `k`. Bonferroni combinations give a location p-value
//! `P_ij = min(4 min_k P_ijk, 1)` and a block p-value
//! `P_i = min(n_i min_j P_ij, 1)`. The three-stage procedure runs BH over the
//! blocks, then screens locations and seasons inside the rejected blocks with
//! thresholds scaled by the stage-one rejection count `S`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::ingest::PixelId;

pub const SEASONS: usize = 4;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LocationTests {
    pub pixel_id: PixelId,
    pub p: [f64; SEASONS],
    /// Sign of each seasonal statistic, in `{-1, 0, 1}`.
    pub sign: [i8; SEASONS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTests {
    pub block_id: usize,
    pub locations: Vec<LocationTests>,
}

impl BlockTests {
    pub fn n(&self) -> usize {
        self.locations.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestPanel {
    pub blocks: Vec<BlockTests>,
}

impl TestPanel {
    pub fn new(blocks: Vec<BlockTests>) -> Result<Self> {
        for b in &blocks {
            if b.locations.is_empty() {
                return Err(Error::InvalidArgument(format!("block {} has no locations", b.block_id)));
            }
            for loc in &b.locations {
                if let Some(p) = loc.p.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                    return Err(Error::InvalidArgument(format!(
                        "p-value {p} for pixel {} outside (0, 1]",
                        loc.pixel_id
                    )));
                }
                if loc.sign.iter().any(|s| !(-1..=1).contains(s)) {
                    return Err(Error::InvalidArgument(format!("bad sign for pixel {}", loc.pixel_id)));
                }
            }
        }
        Ok(Self { blocks })
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    /// Total number of elementary hypotheses, `Σ 4 n_i`.
    pub fn hypothesis_count(&self) -> usize {
        self.blocks.iter().map(|b| SEASONS * b.n()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    None,
    Up,
    Down,
}

impl Decision {
    pub fn from_sign(sign: i8) -> Self {
        match sign {
            s if s > 0 => Decision::Up,
            s if s < 0 => Decision::Down,
            _ => Decision::None,
        }
    }

    pub fn is_rejection(self) -> bool {
        self != Decision::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::None => "none",
            Decision::Up => "up",
            Decision::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProcedureKind {
    ThreeStage,
    Adaptive,
    ByDirectional,
}

impl ProcedureKind {
    pub const ALL: [ProcedureKind; 3] = [
        ProcedureKind::ThreeStage,
        ProcedureKind::Adaptive,
        ProcedureKind::ByDirectional,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProcedureKind::ThreeStage => "three_stage",
            ProcedureKind::Adaptive => "adaptive",
            ProcedureKind::ByDirectional => "by_directional",
        }
    }
}

impl std::str::FromStr for ProcedureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "three_stage" | "three-stage" => Ok(ProcedureKind::ThreeStage),
            "adaptive" => Ok(ProcedureKind::Adaptive),
            "by" | "by_directional" | "by-directional" => Ok(ProcedureKind::ByDirectional),
            other => Err(Error::InvalidArgument(format!("unknown procedure `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationDecision {
    pub pixel_id: PixelId,
    /// The p-values compared against the season threshold (adjusted ones for
    /// the adaptive procedure).
    pub p_tested: [f64; SEASONS],
    /// `P_ij` from `p_tested`; NaN for the flat BY baseline.
    pub location_p: f64,
    pub decisions: [Decision; SEASONS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDecision {
    pub block_id: usize,
    /// `P_i`; NaN for the flat BY baseline.
    pub block_p: f64,
    pub rejected: bool,
    pub pi0_hat: Option<f64>,
    /// `Sα/(m n_i)` (zero when nothing passed stage one).
    pub location_threshold: f64,
    /// `Sα/(4 m n_i)`, or the flat BY cut.
    pub season_threshold: f64,
    pub locations: Vec<LocationDecision>,
}

impl BlockDecision {
    pub fn n(&self) -> usize {
        self.locations.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTable {
    pub procedure: ProcedureKind,
    pub alpha: f64,
    pub m: usize,
    /// Stage-one rejection count for the three-stage procedures, total BH
    /// rejections for BY.
    pub stage1_rejections: usize,
    pub blocks: Vec<BlockDecision>,
}

impl DecisionTable {
    pub fn rejections(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.locations)
            .flat_map(|l| l.decisions)
            .filter(|d| d.is_rejection())
            .count()
    }

    /// `(up, down)` counts per season.
    pub fn season_counts(&self) -> [(usize, usize); SEASONS] {
        let mut out = [(0, 0); SEASONS];
        for loc in self.blocks.iter().flat_map(|b| &b.locations) {
            for (k, d) in loc.decisions.iter().enumerate() {
                match d {
                    Decision::Up => out[k].0 += 1,
                    Decision::Down => out[k].1 += 1,
                    Decision::None => {}
                }
            }
        }
        out
    }
}

/// Result of a BH step-up pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepUp {
    /// `S = max{i : P_(i) <= iα/M}`, zero if none.
    pub count: usize,
    /// Indices of rejected p-values, ascending.
    pub rejected: Vec<usize>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Benjamini–Hochberg step-up. Ties at the cut are all rejected.
pub fn bh_stepup(pvalues: &[f64], alpha: f64) -> Result<StepUp> {
    check_alpha(alpha)?;
    if let Some(p) = pvalues.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::InvalidArgument(format!("p-value {p} outside (0, 1]")));
    }
    Ok(step_up(pvalues, alpha))
}

fn step_up(pvalues: &[f64], alpha: f64) -> StepUp {
    let m = pvalues.len();
    let mut sorted = pvalues.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let count = (1..=m)
        .rev()
        .find(|&i| sorted[i - 1] <= i as f64 * alpha / m as f64)
        .unwrap_or(0);
    let rejected = match count {
        0 => Vec::new(),
        _ => {
            let cut = sorted[count - 1];
            (0..m).filter(|&i| pvalues[i] <= cut).collect()
        }
    };
    StepUp { count, rejected }
}

/// `min(4 min_k p_k, 1)`.
pub fn combine_location(season_ps: &[f64]) -> Result<f64> {
    if season_ps.len() != SEASONS {
        return Err(Error::InvalidArgument(format!(
            "expected {SEASONS} seasonal p-values, got {}",
            season_ps.len()
        )));
    }
    Ok(bonferroni_min(season_ps))
}

/// `min(n min_j p_j, 1)`.
pub fn combine_subregion(location_ps: &[f64]) -> Result<f64> {
    if location_ps.is_empty() {
        return Err(Error::InvalidArgument("subregion has no locations".into()));
    }
    Ok(bonferroni_min(location_ps))
}

fn bonferroni_min(ps: &[f64]) -> f64 {
    let min = ps.iter().copied().fold(f64::INFINITY, f64::min);
    (ps.len() as f64 * min).min(1.0)
}

/// Location and block p-values for every block of a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedPValues {
    pub location_p: Vec<Vec<f64>>,
    pub block_p: Vec<f64>,
}

pub fn combine_panel(panel: &TestPanel) -> CombinedPValues {
    let location_p: Vec<Vec<f64>> = panel
        .blocks
        .iter()
        .map(|b| b.locations.iter().map(|l| bonferroni_min(&l.p)).collect())
        .collect();
    let block_p = location_p.iter().map(|ps| bonferroni_min(ps)).collect();
    CombinedPValues { location_p, block_p }
}

/// Three-stage directional BH.
pub fn three_stage_directional_bh(panel: &TestPanel, alpha: f64) -> Result<DecisionTable> {
    check_alpha(alpha)?;
    Ok(three_stage(panel, alpha, ProcedureKind::ThreeStage, None))
}

fn three_stage(
    panel: &TestPanel,
    alpha: f64,
    procedure: ProcedureKind,
    pi0_hat: Option<&[f64]>,
) -> DecisionTable {
    let m = panel.m();
    let combined = combine_panel(panel);
    let stage1 = step_up(&combined.block_p, alpha);
    let s = stage1.count;
    let mut block_rejected = vec![false; m];
    for &i in &stage1.rejected {
        block_rejected[i] = true;
    }

    let blocks = panel
        .blocks
        .iter()
        .enumerate()
        .map(|(i, block)| {
            let n = block.n() as f64;
            let mf = m as f64;
            let location_threshold = s as f64 * alpha / (mf * n);
            let season_threshold = s as f64 * alpha / (SEASONS as f64 * mf * n);
            let locations = block
                .locations
                .iter()
                .zip(&combined.location_p[i])
                .map(|(loc, &location_p)| {
                    let mut decisions = [Decision::None; SEASONS];
                    if block_rejected[i] && location_p <= location_threshold {
                        for ((d, &p), &sign) in decisions.iter_mut().zip(&loc.p).zip(&loc.sign) {
                            if p <= season_threshold {
                                *d = Decision::from_sign(sign);
                            }
                        }
                    }
                    LocationDecision {
                        pixel_id: loc.pixel_id,
                        p_tested: loc.p,
                        location_p,
                        decisions,
                    }
                })
                .collect();
            BlockDecision {
                block_id: block.block_id,
                block_p: combined.block_p[i],
                rejected: block_rejected[i],
                pi0_hat: pi0_hat.map(|v| v[i]),
                location_threshold,
                season_threshold,
                locations,
            }
        })
        .collect();

    DecisionTable {
        procedure,
        alpha,
        m,
        stage1_rejections: s,
        blocks,
    }
}

/// `min((#{p > λ} + 1) / (N (1 - λ)), 1)` over a block's `N = 4 n_i` p-values.
pub fn storey_pi0(block_ps: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    if block_ps.is_empty() {
        return Err(Error::InvalidArgument("no p-values to estimate pi0 from".into()));
    }
    Ok(pi0(block_ps.iter().copied(), block_ps.len(), lambda))
}

fn pi0(ps: impl Iterator<Item = f64>, len: usize, lambda: f64) -> f64 {
    let above = ps.filter(|&p| p > lambda).count();
    ((above as f64 + 1.0) / (len as f64 * (1.0 - lambda))).min(1.0)
}

/// Adaptive three-stage procedure: every `P_ijk` is replaced by
/// `min((1 + π̂_i0)/2 · P_ijk, 1)` before the combinations are formed.
pub fn adaptive_three_stage(panel: &TestPanel, alpha: f64, lambda: f64) -> Result<DecisionTable> {
    check_alpha(alpha)?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    let mut estimates = Vec::with_capacity(panel.m());
    let adjusted = TestPanel {
        blocks: panel
            .blocks
            .iter()
            .map(|b| {
                let pi0_hat = pi0(
                    b.locations.iter().flat_map(|l| l.p),
                    SEASONS * b.n(),
                    lambda,
                );
                estimates.push(pi0_hat);
                let mult = (1.0 + pi0_hat) / 2.0;
                BlockTests {
                    block_id: b.block_id,
                    locations: b
                        .locations
                        .iter()
                        .map(|l| LocationTests {
                            pixel_id: l.pixel_id,
                            p: l.p.map(|p| (mult * p).min(1.0)),
                            sign: l.sign,
                        })
                        .collect(),
                }
            })
            .collect(),
    };
    Ok(three_stage(&adjusted, alpha, ProcedureKind::Adaptive, Some(&estimates)))
}

/// Harmonic number `H_M`.
pub fn harmonic(m: usize) -> f64 {
    (1..=m).map(|i| 1.0 / i as f64).sum()
}

/// Benjamini–Yekutieli on all elementary p-values, direction from the sign.
pub fn by_directional(panel: &TestPanel, alpha: f64) -> Result<DecisionTable> {
    check_alpha(alpha)?;
    let flat: Vec<f64> = panel
        .blocks
        .iter()
        .flat_map(|b| b.locations.iter().flat_map(|l| l.p))
        .collect();
    let total = flat.len();
    let effective = alpha / harmonic(total);
    let stage = step_up(&flat, effective);
    let cut = if total == 0 {
        0.0
    } else {
        stage.count as f64 * effective / total as f64
    };
    let mut rejected = vec![false; total];
    for &i in &stage.rejected {
        rejected[i] = true;
    }

    let mut idx = 0;
    let blocks = panel
        .blocks
        .iter()
        .map(|b| {
            let locations: Vec<LocationDecision> = b
                .locations
                .iter()
                .map(|l| {
                    let mut decisions = [Decision::None; SEASONS];
                    for (d, &sign) in decisions.iter_mut().zip(&l.sign) {
                        if rejected[idx] {
                            *d = Decision::from_sign(sign);
                        }
                        idx += 1;
                    }
                    LocationDecision {
                        pixel_id: l.pixel_id,
                        p_tested: l.p,
                        location_p: f64::NAN,
                        decisions,
                    }
                })
                .collect();
            BlockDecision {
                block_id: b.block_id,
                block_p: f64::NAN,
                rejected: locations.iter().any(|l| l.decisions.iter().any(|d| d.is_rejection())),
                pi0_hat: None,
                location_threshold: cut,
                season_threshold: cut,
                locations,
            }
        })
        .collect();

    Ok(DecisionTable {
        procedure: ProcedureKind::ByDirectional,
        alpha,
        m: panel.m(),
        stage1_rejections: stage.count,
        blocks,
    })
}

/// Dispatches on `kind`; `lambda` is used by the adaptive procedure only.
pub fn run_procedure(panel: &TestPanel, kind: ProcedureKind, alpha: f64, lambda: f64) -> Result<DecisionTable> {
    match kind {
        ProcedureKind::ThreeStage => three_stage_directional_bh(panel, alpha),
        ProcedureKind::Adaptive => adaptive_three_stage(panel, alpha, lambda),
        ProcedureKind::ByDirectional => by_directional(panel, alpha),
    }
}

/// `block_id,pixel_id,season,p_elementary,decision,S,threshold`, one row per
/// pixel and season.
pub fn write_decision_csv<W: Write>(writer: W, table: &DecisionTable) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["block_id", "pixel_id", "season", "p_elementary", "decision", "S", "threshold"])?;
    for b in &table.blocks {
        for l in &b.locations {
            for k in 0..SEASONS {
                wtr.write_record([
                    b.block_id.to_string(),
                    l.pixel_id.to_string(),
                    (k + 1).to_string(),
                    l.p_tested[k].to_string(),
                    l.decisions[k].as_str().to_string(),
                    table.stage1_rejections.to_string(),
                    b.season_threshold.to_string(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}
