//! Monte Carlo harness: Kronecker-structured Gaussian statistics with planted
//! directional signals, scored by mdFDR and average power.
//!
//! Entries are linearized as `(j, k, i)` with the block index fastest, so
//! `index = j·4m + k·m + i` and the covariance is `Γ1 ⊗ Γ2 ⊗ Γ3`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DMatrixViewMut};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::normal::two_sided_pvalue_unchecked;
use crate::procedures::{
    run_procedure, BlockTests, Decision, DecisionTable, LocationTests, ProcedureKind, TestPanel,
    DEFAULT_LAMBDA, SEASONS,
};
use crate::trend::sign_of;

pub const DEFAULT_M: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimScenario {
    pub m: usize,
    pub n_i: usize,
    pub mu: f64,
    pub pi0: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub theta: f64,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl SimScenario {
    /// Scenario with `m = 100` and `θ = sqrt(n_i)`.
    pub fn new(n_i: usize, mu: f64, pi0: f64, rho1: f64, rho2: f64) -> Self {
        Self {
            m: DEFAULT_M,
            n_i,
            mu,
            pi0,
            rho1,
            rho2,
            theta: (n_i as f64).sqrt(),
            alpha: 0.05,
            replicates: 1000,
            seed: 0,
        }
    }

    pub fn side(&self) -> usize {
        (self.n_i as f64).sqrt().round() as usize
    }

    /// Number of elementary hypotheses, `4 m n_i`.
    pub fn len(&self) -> usize {
        SEASONS * self.m * self.n_i
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        let side = self.side();
        if self.n_i == 0 || side * side != self.n_i {
            return bad(format!("n_i = {} is not a positive perfect square", self.n_i));
        }
        if !self.mu.is_finite() {
            return bad(format!("mu = {} is not finite", self.mu));
        }
        if !(0.0..=1.0).contains(&self.pi0) {
            return bad(format!("pi0 = {} outside [0, 1]", self.pi0));
        }
        if !(self.rho1 > -1.0 / 3.0 && self.rho1 < 1.0) {
            return bad(format!("rho1 = {} outside (-1/3, 1)", self.rho1));
        }
        let rho2_lower = if self.m > 1 { -1.0 / (self.m as f64 - 1.0) } else { -1.0 };
        if !(self.rho2 > rho2_lower && self.rho2 < 1.0) {
            return bad(format!(
                "rho2 = {} outside (-1/(m-1), 1) = ({rho2_lower}, 1)",
                self.rho2
            ));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return bad(format!("theta = {} must be positive", self.theta));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha = {} outside (0, 1)", self.alpha));
        }
        Ok(())
    }
}

/// Lower Cholesky factors of the three correlation matrices.
#[derive(Debug, Clone)]
pub struct CovarianceFactors {
    /// Locations, `n_i × n_i`.
    pub a1: DMatrix<f64>,
    /// Seasons, `4 × 4`.
    pub a2: DMatrix<f64>,
    /// Blocks, `m × m`.
    pub a3: DMatrix<f64>,
}

/// Exponential correlation `exp(-d/θ)` between cells of a `side × side` grid,
/// cells numbered row-major.
pub fn spatial_correlation(side: usize, theta: f64) -> DMatrix<f64> {
    let n = side * side;
    DMatrix::from_fn(n, n, |a, b| {
        let (ra, ca) = ((a / side) as f64, (a % side) as f64);
        let (rb, cb) = ((b / side) as f64, (b % side) as f64);
        (-(ra - rb).hypot(ca - cb) / theta).exp()
    })
}

pub fn equicorrelation(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |a, b| if a == b { 1.0 } else { rho })
}

fn cholesky(gamma: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    gamma
        .cholesky()
        .map(|c| c.unpack())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{what} correlation matrix")))
}

pub fn build_covariance_factors(sc: &SimScenario) -> Result<CovarianceFactors> {
    sc.validate()?;
    Ok(CovarianceFactors {
        a1: cholesky(spatial_correlation(sc.side(), sc.theta), "spatial")?,
        a2: cholesky(equicorrelation(SEASONS, sc.rho1), "season")?,
        a3: cholesky(equicorrelation(sc.m, sc.rho2), "block")?,
    })
}

fn is_identity(a: &DMatrix<f64>) -> bool {
    a.is_identity(0.0)
}

/// Signal indicators and signs, stored in panel order `(i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthPanel {
    pub m: usize,
    pub n_i: usize,
    pub z: Vec<bool>,
    /// `±1` where `z`, 0 elsewhere.
    pub delta: Vec<i8>,
}

impl TruthPanel {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n_i + j) * SEASONS + k
    }

    pub fn false_nulls(&self) -> usize {
        self.z.iter().filter(|&&z| z).count()
    }

    /// Realized proportion of true nulls in block `i`.
    pub fn block_pi0(&self, i: usize) -> f64 {
        let per = SEASONS * self.n_i;
        let nulls = self.z[i * per..(i + 1) * per].iter().filter(|&&z| !z).count();
        nulls as f64 / per as f64
    }
}

fn replicate_rng(seed: u64, replicate_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate_index as u64);
    rng
}

/// Draws the statistics `X` in `(j, k, i)` order together with the truth.
pub fn sample_statistics(
    sc: &SimScenario,
    factors: &CovarianceFactors,
    replicate_index: usize,
) -> (Vec<f64>, TruthPanel) {
    let (m, n) = (sc.m, sc.n_i);
    let total = sc.len();
    let mut rng = replicate_rng(sc.seed, replicate_index);

    let mut z = vec![false; total];
    let mut delta = vec![0i8; total];
    for (zi, di) in z.iter_mut().zip(delta.iter_mut()) {
        if rng.random_bool(1.0 - sc.pi0) {
            *zi = true;
            *di = if rng.random_bool(0.5) { 1 } else { -1 };
        }
    }
    let truth = TruthPanel { m, n_i: n, z, delta };

    let mut x: Vec<f64> = (0..total).map(|_| rng.sample(StandardNormal)).collect();
    correlate(&mut x, m, n, factors);

    for i in 0..m {
        for j in 0..n {
            for k in 0..SEASONS {
                let t = truth.index(i, j, k);
                if truth.z[t] {
                    x[j * SEASONS * m + k * m + i] += f64::from(truth.delta[t]) * sc.mu;
                }
            }
        }
    }
    (x, truth)
}

/// Applies `A1 ⊗ A2 ⊗ A3` to iid noise laid out in `(j, k, i)` order.
fn correlate(x: &mut [f64], m: usize, n: usize, f: &CovarianceFactors) {
    if !is_identity(&f.a3) {
        let e = DMatrixViewMut::from_slice(x, m, SEASONS * n);
        let out = &f.a3 * &e;
        x.copy_from_slice(out.as_slice());
    }
    if !is_identity(&f.a2) {
        let a2t = f.a2.transpose();
        for chunk in x.chunks_exact_mut(SEASONS * m) {
            let e = DMatrixViewMut::from_slice(chunk, m, SEASONS);
            let out = &e * &a2t;
            chunk.copy_from_slice(out.as_slice());
        }
    }
    if !is_identity(&f.a1) {
        let e = DMatrixViewMut::from_slice(x, SEASONS * m, n);
        let out = &e * f.a1.transpose();
        x.copy_from_slice(out.as_slice());
    }
}

/// One replicate as a test panel (blocks → locations → seasons) and its truth.
pub fn sample_replicate(
    sc: &SimScenario,
    factors: &CovarianceFactors,
    replicate_index: usize,
) -> (TestPanel, TruthPanel) {
    let (x, truth) = sample_statistics(sc, factors, replicate_index);
    let m = sc.m;
    let blocks = (0..m)
        .map(|i| BlockTests {
            block_id: i,
            locations: (0..sc.n_i)
                .map(|j| {
                    let at = |k: usize| x[j * SEASONS * m + k * m + i];
                    LocationTests {
                        pixel_id: (i * sc.n_i + j) as u64,
                        p: std::array::from_fn(|k| two_sided_pvalue_unchecked(at(k))),
                        sign: std::array::from_fn(|k| sign_of(at(k))),
                    }
                })
                .collect(),
        })
        .collect();
    (TestPanel { blocks }, truth)
}

/// Error counts for one decision table against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ErrorCounts {
    /// Rejected true nulls.
    pub v: usize,
    /// Rejected false nulls with the wrong direction.
    pub u: usize,
    pub r: usize,
    /// Rejected false nulls with the right direction.
    pub c: usize,
    /// Total false nulls.
    pub f: usize,
}

impl ErrorCounts {
    pub fn mdfdr_term(&self) -> f64 {
        (self.v + self.u) as f64 / self.r.max(1) as f64
    }

    pub fn power_term(&self) -> f64 {
        self.c as f64 / self.f.max(1) as f64
    }
}

pub fn evaluate_decisions(d: &DecisionTable, truth: &TruthPanel) -> Result<ErrorCounts> {
    let mismatch = || Error::InvalidArgument("decision table does not match truth panel".into());
    if d.blocks.len() != truth.m || d.blocks.iter().any(|b| b.n() != truth.n_i) {
        return Err(mismatch());
    }
    let mut out = ErrorCounts {
        f: truth.false_nulls(),
        ..Default::default()
    };
    for (i, b) in d.blocks.iter().enumerate() {
        for (j, l) in b.locations.iter().enumerate() {
            for (k, decision) in l.decisions.iter().enumerate() {
                let dir = match decision {
                    Decision::None => continue,
                    Decision::Up => 1,
                    Decision::Down => -1,
                };
                out.r += 1;
                let t = truth.index(i, j, k);
                if !truth.z[t] {
                    out.v += 1;
                } else if truth.delta[t] == dir {
                    out.c += 1;
                } else {
                    out.u += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Mean and Monte Carlo standard error of a per-replicate quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    fn from_terms(terms: impl ExactSizeIterator<Item = f64> + Clone) -> Self {
        let n = terms.len() as f64;
        let mean = terms.clone().sum::<f64>() / n;
        let se = if terms.len() > 1 {
            let var = terms.map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcedureSummary {
    pub procedure: ProcedureKind,
    pub mdfdr: Estimate,
    pub power: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub scenario: SimScenario,
    pub replicates_run: usize,
    pub procedures: Vec<ProcedureSummary>,
    /// `(α/m) Σ_i (1 + π_i0)/2` with realized per-replicate `π_i0`.
    pub bound: Estimate,
}

impl SimResult {
    pub fn get(&self, kind: ProcedureKind) -> Option<&ProcedureSummary> {
        self.procedures.iter().find(|p| p.procedure == kind)
    }
}

struct ReplicateTerms {
    counts: Vec<ErrorCounts>,
    bound: f64,
}

fn run_replicate(
    sc: &SimScenario,
    factors: &CovarianceFactors,
    procedures: &[ProcedureKind],
    r: usize,
) -> Result<ReplicateTerms> {
    let (panel, truth) = sample_replicate(sc, factors, r);
    let counts = procedures
        .iter()
        .map(|&kind| {
            let table = run_procedure(&panel, kind, sc.alpha, DEFAULT_LAMBDA)?;
            evaluate_decisions(&table, &truth)
        })
        .collect::<Result<_>>()?;
    let bound = sc.alpha / sc.m as f64
        * (0..sc.m).map(|i| (1.0 + truth.block_pi0(i)) / 2.0).sum::<f64>();
    Ok(ReplicateTerms { counts, bound })
}

/// Runs all replicates on the current rayon pool. Replicates are seeded by
/// index and reduced in index order, so the result does not depend on the
/// number of threads.
pub fn run_scenario(sc: &SimScenario, procedures: &[ProcedureKind]) -> Result<SimResult> {
    if sc.replicates == 0 {
        return Err(Error::InvalidArgument("replicates must be at least 1".into()));
    }
    let factors = build_covariance_factors(sc)?;
    let terms = (0..sc.replicates)
        .into_par_iter()
        .map(|r| run_replicate(sc, &factors, procedures, r))
        .collect::<Result<Vec<_>>>()?;

    let summaries = procedures
        .iter()
        .enumerate()
        .map(|(p, &procedure)| ProcedureSummary {
            procedure,
            mdfdr: Estimate::from_terms(terms.iter().map(|t| t.counts[p].mdfdr_term())),
            power: Estimate::from_terms(terms.iter().map(|t| t.counts[p].power_term())),
        })
        .collect();
    Ok(SimResult {
        scenario: *sc,
        replicates_run: sc.replicates,
        procedures: summaries,
        bound: Estimate::from_terms(terms.iter().map(|t| t.bound)),
    })
}

#[derive(Debug, Deserialize)]
struct ScenarioRow {
    m: usize,
    n_i: usize,
    mu: f64,
    pi0: f64,
    rho1: f64,
    rho2: f64,
    theta: Option<f64>,
    alpha: f64,
    replicates: usize,
    seed: u64,
}

pub const SCENARIO_HEADER: [&str; 10] = [
    "m", "n_i", "mu", "pi0", "rho1", "rho2", "theta", "alpha", "replicates", "seed",
];

/// Reads `m,n_i,mu,pi0,rho1,rho2,theta,alpha,replicates,seed`. An empty
/// `theta` defaults to `sqrt(n_i)`. Every row is validated; errors name the
/// offending data row (1-based).
pub fn read_scenarios<R: Read>(reader: R) -> Result<Vec<SimScenario>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != SCENARIO_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", SCENARIO_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.deserialize::<ScenarioRow>().enumerate() {
        let row = row + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line: row as u64 + 1,
            message: e.to_string(),
        })?;
        let sc = SimScenario {
            m: rec.m,
            n_i: rec.n_i,
            mu: rec.mu,
            pi0: rec.pi0,
            rho1: rec.rho1,
            rho2: rec.rho2,
            theta: rec.theta.unwrap_or((rec.n_i as f64).sqrt()),
            alpha: rec.alpha,
            replicates: rec.replicates,
            seed: rec.seed,
        };
        sc.validate()
            .map_err(|e| Error::InvalidArgument(format!("scenario row {row}: {e}")))?;
        if sc.replicates == 0 {
            return Err(Error::InvalidArgument(format!(
                "scenario row {row}: replicates must be at least 1"
            )));
        }
        out.push(sc);
    }
    Ok(out)
}

pub const RESULT_HEADER: [&str; 17] = [
    "m", "n_i", "mu", "pi0", "rho1", "rho2", "theta", "alpha", "replicates", "seed",
    "procedure", "mdfdr", "power", "mc_se_mdfdr", "mc_se_power", "mdfdr_bound", "mc_se_bound",
];

/// One row per scenario and procedure, scenario parameters echoed first.
pub fn write_results<W: Write>(writer: W, results: &[SimResult]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(RESULT_HEADER)?;
    for res in results {
        let sc = &res.scenario;
        for p in &res.procedures {
            wtr.write_record([
                sc.m.to_string(),
                sc.n_i.to_string(),
                sc.mu.to_string(),
                sc.pi0.to_string(),
                sc.rho1.to_string(),
                sc.rho2.to_string(),
                sc.theta.to_string(),
                sc.alpha.to_string(),
                res.replicates_run.to_string(),
                sc.seed.to_string(),
                p.procedure.as_str().to_string(),
                p.mdfdr.mean.to_string(),
                p.power.mean.to_string(),
                p.mdfdr.se.to_string(),
                p.power.se.to_string(),
                res.bound.mean.to_string(),
                res.bound.se.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedures::{BlockDecision, LocationDecision};

    fn small(rho1: f64, rho2: f64) -> SimScenario {
        SimScenario {
            m: 3,
            n_i: 9,
            mu: 3.0,
            pi0: 0.9,
            rho1,
            rho2,
            theta: 3.0,
            alpha: 0.05,
            replicates: 20,
            seed: 7,
        }
    }

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn factors_reproduce_correlations() {
        for rho1 in [-0.3, 0.0, 0.4, 0.8] {
            for rho2 in [0.0, 0.2, 0.5] {
                for n_i in [9, 100] {
                    let sc = SimScenario { m: 20, ..SimScenario::new(n_i, 2.0, 0.9, rho1, rho2) };
                    let f = build_covariance_factors(&sc).unwrap();
                    let g1 = spatial_correlation(sc.side(), sc.theta);
                    assert!(max_abs_diff(&(&f.a1 * f.a1.transpose()), &g1) < 1e-8);
                    let g2 = equicorrelation(4, rho1);
                    assert!(max_abs_diff(&(&f.a2 * f.a2.transpose()), &g2) < 1e-8);
                    let g3 = equicorrelation(20, rho2);
                    assert!(max_abs_diff(&(&f.a3 * f.a3.transpose()), &g3) < 1e-8);
                }
            }
        }
    }

    #[test]
    fn factor_examples() {
        let f = build_covariance_factors(&small(0.0, 0.0)).unwrap();
        assert!(is_identity(&f.a2));
        assert!(is_identity(&f.a3));
        let g1 = spatial_correlation(3, 0.7);
        assert!(g1.diagonal().iter().all(|&d| d == 1.0));
        // Neighbours at distance 1 and the diagonal at sqrt(2).
        assert!((g1[(0, 1)] - (-1.0f64 / 0.7).exp()).abs() < 1e-15);
        assert!((g1[(0, 4)] - (-(2.0f64).sqrt() / 0.7).exp()).abs() < 1e-15);

        let eig = equicorrelation(4, -0.3).symmetric_eigenvalues();
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((min - 0.1).abs() < 1e-12);
        assert!((max - 1.3).abs() < 1e-12);
    }

    #[test]
    fn bounds_are_enforced() {
        let err = build_covariance_factors(&small(-0.5, 0.0)).unwrap_err().to_string();
        assert!(err.contains("-1/3"), "{err}");
        assert!(build_covariance_factors(&small(1.0, 0.0)).is_err());
        assert!(build_covariance_factors(&small(0.0, -0.5)).is_err());
        assert!(build_covariance_factors(&small(0.0, -0.49)).is_ok());
        assert!(build_covariance_factors(&SimScenario { n_i: 8, ..small(0.0, 0.0) }).is_err());
        assert!(build_covariance_factors(&SimScenario { theta: 0.0, ..small(0.0, 0.0) }).is_err());
        let zero = SimScenario { replicates: 0, ..small(0.0, 0.0) };
        assert!(run_scenario(&zero, &ProcedureKind::ALL).is_err());
    }

    #[test]
    fn axis_application_matches_dense_kronecker() {
        let sc = SimScenario { m: 3, n_i: 4, theta: 1.5, ..small(0.4, 0.3) };
        let f = build_covariance_factors(&sc).unwrap();
        let dense = f.a1.kronecker(&f.a2.kronecker(&f.a3));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e: Vec<f64> = (0..sc.len()).map(|_| rng.sample(StandardNormal)).collect();
        let expected = &dense * nalgebra::DVector::from_vec(e.clone());
        let mut got = e;
        correlate(&mut got, sc.m, sc.n_i, &f);
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_correlation_matches_model() {
        let sc = SimScenario { pi0: 1.0, ..small(0.4, 0.5) };
        let f = build_covariance_factors(&sc).unwrap();
        let m = sc.m;
        let at = |i: usize, j: usize, k: usize| j * 4 * m + k * m + i;
        // (entry a, entry b, model correlation)
        let pairs = [
            (at(0, 0, 0), at(0, 0, 1), 0.4),
            (at(0, 0, 0), at(1, 0, 0), 0.5),
            (at(0, 0, 0), at(0, 1, 0), (-1.0f64 / 3.0).exp()),
            (at(0, 0, 0), at(2, 4, 3), 0.4 * 0.5 * (-(2.0f64).sqrt() / 3.0).exp()),
        ];
        let reps = 4000;
        let mut sums = vec![(0.0, 0.0, 0.0, 0.0, 0.0); pairs.len()];
        for r in 0..reps {
            let (x, _) = sample_statistics(&sc, &f, r);
            for (s, &(a, b, _)) in sums.iter_mut().zip(&pairs) {
                s.0 += x[a];
                s.1 += x[b];
                s.2 += x[a] * x[a];
                s.3 += x[b] * x[b];
                s.4 += x[a] * x[b];
            }
        }
        let n = reps as f64;
        for (s, &(_, _, rho)) in sums.iter().zip(&pairs) {
            let cov = s.4 / n - s.0 / n * s.1 / n;
            let corr = cov / ((s.2 / n - (s.0 / n).powi(2)) * (s.3 / n - (s.1 / n).powi(2))).sqrt();
            let se = (1.0 - rho * rho) / n.sqrt();
            assert!((corr - rho).abs() < 4.0 * se, "corr {corr} vs {rho}");
        }
    }

    #[test]
    fn null_panels_are_calibrated() {
        let sc = SimScenario { pi0: 1.0, m: 10, ..small(0.0, 0.0) };
        let f = build_covariance_factors(&sc).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for r in 0..100 {
            let (panel, truth) = sample_replicate(&sc, &f, r);
            assert_eq!(truth.false_nulls(), 0);
            for l in panel.blocks.iter().flat_map(|b| &b.locations) {
                hits += l.p.iter().filter(|&&p| p <= 0.05).count();
                total += 4;
            }
        }
        let rate = hits as f64 / total as f64;
        assert!((rate - 0.05).abs() < 3.0 * (0.05f64 * 0.95 / total as f64).sqrt(), "{rate}");
    }

    #[test]
    fn truth_signs_live_on_signals() {
        let sc = small(0.0, 0.0);
        let f = build_covariance_factors(&sc).unwrap();
        let (_, t) = sample_statistics(&sc, &f, 0);
        assert!(t.z.iter().zip(&t.delta).all(|(&z, &d)| if z { d == 1 || d == -1 } else { d == 0 }));
    }

    fn table_with(decisions: &[(usize, Decision)]) -> (DecisionTable, TruthPanel) {
        let mut locs = vec![LocationDecision {
            pixel_id: 0,
            p_tested: [0.5; 4],
            location_p: 1.0,
            decisions: [Decision::None; 4],
        }];
        for &(k, d) in decisions {
            locs[0].decisions[k] = d;
        }
        let table = DecisionTable {
            procedure: ProcedureKind::ThreeStage,
            alpha: 0.05,
            m: 1,
            stage1_rejections: 1,
            blocks: vec![BlockDecision {
                block_id: 0,
                block_p: 1.0,
                rejected: true,
                pi0_hat: None,
                location_threshold: 0.0,
                season_threshold: 0.0,
                locations: locs,
            }],
        };
        let truth = TruthPanel {
            m: 1,
            n_i: 1,
            z: vec![false, true, true, false],
            delta: vec![0, 1, -1, 0],
        };
        (table, truth)
    }

    #[test]
    fn evaluate_examples() {
        let (t, truth) = table_with(&[]);
        assert_eq!(evaluate_decisions(&t, &truth).unwrap(), ErrorCounts { f: 2, ..Default::default() });
        let (t, truth) = table_with(&[(0, Decision::Up)]);
        let c = evaluate_decisions(&t, &truth).unwrap();
        assert_eq!((c.v, c.r), (1, 1));
        let (t, truth) = table_with(&[(1, Decision::Down), (2, Decision::Down)]);
        let c = evaluate_decisions(&t, &truth).unwrap();
        assert_eq!((c.v, c.u, c.c, c.r, c.f), (0, 1, 1, 2, 2));
        assert_eq!(c.mdfdr_term(), 0.5);
        assert_eq!(c.power_term(), 0.5);

        let bad = TruthPanel { m: 2, ..truth };
        assert!(evaluate_decisions(&t, &bad).is_err());
    }

    #[test]
    fn accounting_identity_holds() {
        let sc = SimScenario { m: 10, pi0: 0.8, ..small(0.4, 0.2) };
        let f = build_covariance_factors(&sc).unwrap();
        for r in 0..20 {
            let (panel, truth) = sample_replicate(&sc, &f, r);
            for kind in ProcedureKind::ALL {
                let t = run_procedure(&panel, kind, 0.05, 0.5).unwrap();
                let c = evaluate_decisions(&t, &truth).unwrap();
                assert_eq!(c.v + c.u + c.c, c.r);
                assert_eq!(c.r, t.rejections());
            }
        }
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let sc = SimScenario { m: 8, ..small(0.4, 0.2) };
        let a = run_scenario(&sc, &ProcedureKind::ALL).unwrap();
        let b = run_scenario(&sc, &ProcedureKind::ALL).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| run_scenario(&sc, &ProcedureKind::ALL)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        let other = run_scenario(&SimScenario { seed: 8, ..sc }, &ProcedureKind::ALL).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn all_null_scenario_controls_fdr() {
        let sc = SimScenario { pi0: 1.0, m: 20, replicates: 200, ..small(0.0, 0.0) };
        let res = run_scenario(&sc, &[ProcedureKind::ThreeStage]).unwrap();
        let p = &res.procedures[0];
        assert_eq!(p.power.mean, 0.0);
        assert!(p.mdfdr.mean <= 0.05 + 3.0 * p.mdfdr.se);
        assert!((res.bound.mean - 0.05).abs() < 1e-12);
    }

    #[test]
    fn scenario_csv_round_trip() {
        let text = "m,n_i,mu,pi0,rho1,rho2,theta,alpha,replicates,seed\n\
                    5,9,3,0.9,0.4,0.2,,0.05,4,1\n\
                    5,4,2,0.99,0,0,1.5,0.05,3,2\n";
        let sc = read_scenarios(text.as_bytes()).unwrap();
        assert_eq!(sc.len(), 2);
        assert_eq!(sc[0].theta, 3.0);
        assert_eq!(sc[1].theta, 1.5);

        let bad = "m,n_i,mu,pi0,rho1,rho2,theta,alpha,replicates,seed\n\
                   5,9,3,0.9,0.4,0.2,,0.05,4,1\n\
                   5,9,3,0.9,-0.5,0.2,,0.05,4,1\n";
        let err = read_scenarios(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("-1/3"), "{err}");
        assert!(read_scenarios("m,n\n1,2\n".as_bytes()).is_err());

        let results: Vec<SimResult> = sc
            .iter()
            .map(|s| run_scenario(s, &ProcedureKind::ALL).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_results(&mut buf, &results).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 3);
        assert!(text.lines().nth(1).unwrap().starts_with("5,9,3,0.9,0.4,0.2,3,0.05,4,1,three_stage,"));
    }
}
