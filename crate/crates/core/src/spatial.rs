//! Empirical semivariogram, range estimation and D×D block partitioning.
//!
//! The semivariogram uses the Matheron estimator with the conventional ½
//! factor, `γ̂(h) = 1/(2|N_h|) Σ (Z(s_i) - Z(s_j))²`. The factor rescales every
//! bin uniformly, so the estimated range is the same without it.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use crate::error::{Error, Result};
use crate::ingest::{CleanGrid, PixelId};

pub const DEFAULT_MAX_LAG: f64 = 25.0;
pub const DEFAULT_BIN_WIDTH: f64 = 1.0;
pub const DEFAULT_SILL_FRACTION: f64 = 0.95;
pub const DEFAULT_BLOCK_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteValue {
    pub col: i64,
    pub row: i64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramBin {
    pub lag: f64,
    pub gamma_hat: f64,
    pub pair_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variogram {
    pub bins: Vec<VariogramBin>,
    pub max_lag: f64,
    pub bin_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeEstimate {
    pub range: f64,
    pub sill: f64,
    /// False when no bin reached the target fraction; `range` is then `max_lag`.
    pub reached: bool,
}

/// Per-pixel mean over every observed value, the field used for the variogram.
pub fn mean_field(grid: &CleanGrid) -> Vec<SiteValue> {
    grid.pixels
        .iter()
        .filter_map(|px| {
            let (sum, n) = px
                .values
                .iter()
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            (n > 0).then(|| SiteValue {
                col: px.col,
                row: px.row,
                value: sum / n as f64,
            })
        })
        .collect()
}

/// Matheron semivariogram over all site pairs within `max_lag`, with
/// distances rounded to the nearest multiple of `bin_width`.
pub fn empirical_semivariogram(field: &[SiteValue], max_lag: f64, bin_width: f64) -> Result<Variogram> {
    if field.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "semivariogram needs at least 2 sites, got {}",
            field.len()
        )));
    }
    if !(max_lag > 0.0 && max_lag.is_finite()) || !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "max_lag ({max_lag}) and bin_width ({bin_width}) must be positive"
        )));
    }

    // Canonical order makes the accumulation independent of input order.
    let mut sites = field.to_vec();
    sites.sort_by_key(|s| (s.row, s.col));
    if let Some(w) = sites.windows(2).find(|w| (w[0].row, w[0].col) == (w[1].row, w[1].col)) {
        return Err(Error::InvalidArgument(format!(
            "two sites share coordinates ({}, {})",
            w[0].col, w[0].row
        )));
    }

    // Half-plane offsets so each unordered pair is visited once.
    let reach = max_lag.floor() as i64;
    let mut offsets = Vec::new();
    for dy in 0..=reach {
        for dx in -reach..=reach {
            if dy == 0 && dx <= 0 {
                continue;
            }
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            if d <= max_lag {
                offsets.push((dx, dy, (d / bin_width).round() as usize));
            }
        }
    }

    let index = SiteIndex::new(&sites);
    let nbins = offsets.iter().map(|o| o.2).max().unwrap_or(0) + 1;
    let mut sums = vec![0.0f64; nbins];
    let mut counts = vec![0u64; nbins];
    for s in &sites {
        for &(dx, dy, bin) in &offsets {
            if let Some(j) = index.get(s.col + dx, s.row + dy) {
                let diff = s.value - sites[j].value;
                sums[bin] += diff * diff;
                counts[bin] += 1;
            }
        }
    }

    let bins = sums
        .iter()
        .zip(&counts)
        .enumerate()
        .filter(|(_, (_, &c))| c > 0)
        .map(|(b, (&s, &c))| VariogramBin {
            lag: b as f64 * bin_width,
            gamma_hat: s / (2.0 * c as f64),
            pair_count: c,
        })
        .collect();
    Ok(Variogram {
        bins,
        max_lag,
        bin_width,
    })
}

enum SiteIndex {
    Dense {
        col0: i64,
        row0: i64,
        width: i64,
        height: i64,
        cells: Vec<u32>,
    },
    Sparse(HashMap<(i64, i64), usize>),
}

impl SiteIndex {
    const EMPTY: u32 = u32::MAX;

    fn new(sites: &[SiteValue]) -> Self {
        let col0 = sites.iter().map(|s| s.col).min().unwrap_or(0);
        let col1 = sites.iter().map(|s| s.col).max().unwrap_or(0);
        let row0 = sites.iter().map(|s| s.row).min().unwrap_or(0);
        let row1 = sites.iter().map(|s| s.row).max().unwrap_or(0);
        let width = col1 - col0 + 1;
        let height = row1 - row0 + 1;
        let area = width.saturating_mul(height);
        if area <= 64 * sites.len() as i64 + 65_536 && sites.len() < u32::MAX as usize {
            let mut cells = vec![Self::EMPTY; area as usize];
            for (i, s) in sites.iter().enumerate() {
                cells[((s.row - row0) * width + (s.col - col0)) as usize] = i as u32;
            }
            SiteIndex::Dense {
                col0,
                row0,
                width,
                height,
                cells,
            }
        } else {
            SiteIndex::Sparse(sites.iter().enumerate().map(|(i, s)| ((s.col, s.row), i)).collect())
        }
    }

    fn get(&self, col: i64, row: i64) -> Option<usize> {
        match self {
            SiteIndex::Dense {
                col0,
                row0,
                width,
                height,
                cells,
            } => {
                let (c, r) = (col - col0, row - row0);
                if c < 0 || r < 0 || c >= *width || r >= *height {
                    return None;
                }
                let v = cells[(r * width + c) as usize];
                (v != Self::EMPTY).then_some(v as usize)
            }
            SiteIndex::Sparse(map) => map.get(&(col, row)).copied(),
        }
    }
}

/// Smallest lag whose semivariance reaches `sill_fraction` of the sill, where
/// the sill is the mean over the last quartile of bins.
pub fn estimate_range(v: &Variogram, sill_fraction: f64) -> Result<RangeEstimate> {
    if !(sill_fraction > 0.0 && sill_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sill fraction must lie in (0, 1), got {sill_fraction}"
        )));
    }
    if v.bins.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "range estimation needs at least 3 bins, got {}",
            v.bins.len()
        )));
    }
    if v.bins.iter().all(|b| b.gamma_hat == 0.0) {
        return Err(Error::NoSpatialVariance);
    }
    let tail = v.bins.len().div_ceil(4);
    let sill = v.bins[v.bins.len() - tail..]
        .iter()
        .map(|b| b.gamma_hat)
        .sum::<f64>()
        / tail as f64;
    let target = sill_fraction * sill;
    Ok(match v.bins.iter().find(|b| b.gamma_hat >= target) {
        Some(b) => RangeEstimate {
            range: b.lag,
            sill,
            reached: true,
        },
        None => RangeEstimate {
            range: v.max_lag,
            sill,
            reached: false,
        },
    })
}

/// `lag,gamma_hat,pair_count` rows, then a `range,<value>` footer when given.
pub fn write_variogram_csv<W: Write>(mut writer: W, v: &Variogram, range: Option<f64>) -> Result<()> {
    writeln!(writer, "lag,gamma_hat,pair_count")?;
    for b in &v.bins {
        writeln!(writer, "{},{},{}", b.lag, b.gamma_hat, b.pair_count)?;
    }
    if let Some(r) = range {
        writeln!(writer, "range,{r}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub block_id: usize,
    /// Block column and row, `floor(col / D)` and `floor(row / D)`.
    pub bx: i64,
    pub by: i64,
    /// Sorted by pixel id.
    pub members: Vec<PixelId>,
}

impl Block {
    pub fn n(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub block_size: usize,
    /// Non-empty blocks in row-major block order; `block_id` is the index.
    pub blocks: Vec<Block>,
}

impl Partition {
    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_members(&self) -> usize {
        self.blocks.iter().map(Block::n).sum()
    }
}

/// Assigns pixels to `D×D` boxes; empty boxes are omitted.
pub fn partition(pixels: &[(PixelId, i64, i64)], block_size: usize) -> Result<Partition> {
    if block_size < 1 {
        return Err(Error::InvalidArgument("block size must be at least 1".into()));
    }
    let d = block_size as i64;
    let mut groups: BTreeMap<(i64, i64), Vec<PixelId>> = BTreeMap::new();
    for &(id, col, row) in pixels {
        groups
            .entry((row.div_euclid(d), col.div_euclid(d)))
            .or_default()
            .push(id);
    }
    let blocks = groups
        .into_iter()
        .enumerate()
        .map(|(block_id, ((by, bx), mut members))| {
            members.sort_unstable();
            Block {
                block_id,
                bx,
                by,
                members,
            }
        })
        .collect();
    Ok(Partition { block_size, blocks })
}

/// Fraction of points whose nearest other point lies strictly closer than
/// `distance`. Applied to the per-block minimum-p locations it measures how
/// far the block representatives are from being independent.
pub fn close_minima_fraction(points: &[(f64, f64)], distance: f64) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let close = points
        .iter()
        .enumerate()
        .filter(|(i, a)| {
            points
                .iter()
                .enumerate()
                .any(|(j, b)| *i != j && ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() < distance)
        })
        .count();
    close as f64 / points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grid_field(w: i64, h: i64, f: impl Fn(i64, i64) -> f64) -> Vec<SiteValue> {
        let mut out = Vec::new();
        for row in 0..h {
            for col in 0..w {
                out.push(SiteValue { col, row, value: f(col, row) });
            }
        }
        out
    }

    // All pairs, no offset table.
    fn brute_force(field: &[SiteValue], max_lag: f64, bin_width: f64) -> BTreeMap<usize, (f64, u64)> {
        let mut acc: BTreeMap<usize, (f64, u64)> = BTreeMap::new();
        for i in 0..field.len() {
            for j in i + 1..field.len() {
                let (a, b) = (field[i], field[j]);
                let d = (((a.col - b.col).pow(2) + (a.row - b.row).pow(2)) as f64).sqrt();
                if d <= max_lag {
                    let e = acc.entry((d / bin_width).round() as usize).or_default();
                    e.0 += (a.value - b.value).powi(2);
                    e.1 += 1;
                }
            }
        }
        acc
    }

    #[test]
    fn constant_field_zero() {
        let v = empirical_semivariogram(&grid_field(10, 10, |_, _| 3.0), 5.0, 1.0).unwrap();
        assert!(v.bins.iter().all(|b| b.gamma_hat == 0.0));
        assert!(matches!(estimate_range(&v, 0.95), Err(Error::NoSpatialVariance)));
    }

    #[test]
    fn two_pixels_half_factor() {
        let field = [
            SiteValue { col: 0, row: 0, value: 0.0 },
            SiteValue { col: 1, row: 0, value: 2.0 },
        ];
        let v = empirical_semivariogram(&field, 3.0, 1.0).unwrap();
        assert_eq!(v.bins.len(), 1);
        assert_eq!(v.bins[0].lag, 1.0);
        assert_eq!(v.bins[0].gamma_hat, 2.0);
        assert_eq!(v.bins[0].pair_count, 1);
    }

    #[test]
    fn input_validation() {
        let one = [SiteValue { col: 0, row: 0, value: 1.0 }];
        assert!(empirical_semivariogram(&one, 5.0, 1.0).is_err());
        let two = grid_field(2, 1, |c, _| c as f64);
        assert!(empirical_semivariogram(&two, 0.0, 1.0).is_err());
        assert!(empirical_semivariogram(&two, 5.0, -1.0).is_err());
        let dup = [two[0], two[0]];
        assert!(empirical_semivariogram(&dup, 5.0, 1.0).is_err());
    }

    #[test]
    fn matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut field = grid_field(17, 13, |_, _| 0.0);
        field.retain(|_| rng.random::<f64>() < 0.8);
        for s in &mut field {
            s.value = rng.sample::<f64, _>(StandardNormal) * 10.0;
        }
        for &(max_lag, width) in &[(6.0, 1.0), (9.5, 0.5), (12.0, 2.0)] {
            let v = empirical_semivariogram(&field, max_lag, width).unwrap();
            let oracle = brute_force(&field, max_lag, width);
            assert_eq!(v.bins.len(), oracle.len());
            for (b, (&idx, &(s, c))) in v.bins.iter().zip(&oracle) {
                assert_eq!(b.lag, idx as f64 * width);
                assert_eq!(b.pair_count, c);
                assert!((b.gamma_hat - s / (2.0 * c as f64)).abs() <= 1e-10 * b.gamma_hat);
            }
        }
    }

    #[test]
    fn sparse_index_agrees_with_dense() {
        // Coordinates far apart force the hash index.
        let field: Vec<SiteValue> = (0..40)
            .map(|i| SiteValue { col: (i % 5) * 1_000_000 + i / 5, row: i / 5, value: i as f64 })
            .collect();
        let v = empirical_semivariogram(&field, 8.0, 1.0).unwrap();
        let oracle = brute_force(&field, 8.0, 1.0);
        let total: u64 = oracle.values().map(|x| x.1).sum();
        assert_eq!(v.bins.iter().map(|b| b.pair_count).sum::<u64>(), total);
    }

    #[test]
    fn iid_field_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sigma2: f64 = 4.0;
        let field = grid_field(100, 100, |_, _| 0.0)
            .into_iter()
            .map(|mut s| {
                s.value = rng.sample::<f64, _>(StandardNormal) * sigma2.sqrt();
                s
            })
            .collect::<Vec<_>>();
        let v = empirical_semivariogram(&field, 10.0, 1.0).unwrap();
        for b in &v.bins {
            // Pairs overlap, so allow a generous multiple of the iid standard error.
            let se = sigma2 * (2.0 / b.pair_count as f64).sqrt();
            assert!((b.gamma_hat - sigma2).abs() < 6.0 * se + 0.05, "{b:?}");
        }
    }

    fn flat_variogram(n: usize, level: f64) -> Variogram {
        Variogram {
            bins: (1..=n)
                .map(|l| VariogramBin { lag: l as f64, gamma_hat: level, pair_count: 10 })
                .collect(),
            max_lag: n as f64,
            bin_width: 1.0,
        }
    }

    #[test]
    fn flat_variogram_range_is_first_lag() {
        let r = estimate_range(&flat_variogram(20, 2.5), 0.95).unwrap();
        assert_eq!(r.range, 1.0);
        assert!(r.reached);
        assert_eq!(r.sill, 2.5);
    }

    #[test]
    fn rising_variogram_range() {
        // 1 - exp(-3h/15): 95% of the asymptote near h = 15.
        let v = Variogram {
            bins: (1..=40)
                .map(|l| VariogramBin {
                    lag: l as f64,
                    gamma_hat: 1.0 - (-3.0 * l as f64 / 15.0).exp(),
                    pair_count: 5,
                })
                .collect(),
            max_lag: 40.0,
            bin_width: 1.0,
        };
        let r = estimate_range(&v, 0.95).unwrap();
        assert!((14.0..=16.0).contains(&r.range), "{r:?}");
    }

    #[test]
    fn spike_in_tail() {
        // The tail maximum always meets a fraction of the tail mean, so the
        // search ends at the spike at the latest.
        let mut v = flat_variogram(8, 1.0);
        v.bins[7].gamma_hat = 100.0;
        let r = estimate_range(&v, 0.95).unwrap();
        assert!(r.reached);
        assert_eq!(r.range, 8.0);
    }

    #[test]
    fn range_input_validation() {
        assert!(estimate_range(&flat_variogram(2, 1.0), 0.95).is_err());
        assert!(estimate_range(&flat_variogram(5, 1.0), 1.0).is_err());
        assert!(estimate_range(&flat_variogram(5, 1.0), 0.0).is_err());
    }

    #[test]
    fn partition_full_grid() {
        let pixels: Vec<_> = (0..40 * 40).map(|i| (i as u64, (i % 40) as i64, (i / 40) as i64)).collect();
        let p = partition(&pixels, 20).unwrap();
        assert_eq!(p.m(), 4);
        assert!(p.blocks.iter().all(|b| b.n() == 400));
        assert!(partition(&pixels, 0).is_err());
    }

    #[test]
    fn water_block_absent() {
        let pixels: Vec<_> = (0..40 * 40)
            .map(|i| (i as u64, (i % 40) as i64, (i / 40) as i64))
            .filter(|&(_, c, r)| !(c >= 20 && r >= 20))
            .collect();
        let p = partition(&pixels, 20).unwrap();
        assert_eq!(p.m(), 3);
        assert!(!p.blocks.iter().any(|b| b.bx == 1 && b.by == 1));
        assert_eq!(p.total_members(), pixels.len());
    }

    #[test]
    fn negative_coordinates_floor() {
        let p = partition(&[(1, -1, 0), (2, 0, 0), (3, -20, -1)], 20).unwrap();
        let coords: Vec<_> = p.blocks.iter().map(|b| (b.bx, b.by)).collect();
        assert_eq!(coords, vec![(-1, -1), (-1, 0), (0, 0)]);
    }

    #[test]
    fn csv_footer() {
        let v = flat_variogram(2, 0.5);
        let mut out = Vec::new();
        write_variogram_csv(&mut out, &v, Some(1.0)).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "lag,gamma_hat,pair_count\n1,0.5,10\n2,0.5,10\nrange,1\n"
        );
    }

    #[test]
    fn close_minima() {
        let pts = [(0.0, 0.0), (3.0, 4.0), (100.0, 100.0)];
        assert!((close_minima_fraction(&pts, 5.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(close_minima_fraction(&pts, 5.0), 0.0);
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut field = grid_field(9, 7, |c, r| ((c * 31 + r * 17) % 11) as f64);
            for s in &mut field {
                s.value += rng.random::<f64>();
            }
            let mut shuffled = field.clone();
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(
                empirical_semivariogram(&field, 6.0, 1.0).unwrap(),
                empirical_semivariogram(&shuffled, 6.0, 1.0).unwrap()
            );
        }

        #[test]
        fn pair_accounting(seed in 0u64..1000, max_lag in 1.0f64..12.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut field = grid_field(10, 10, |c, r| (c * r) as f64);
            field.retain(|_| rng.random::<f64>() < 0.7);
            prop_assume!(field.len() >= 2);
            let v = empirical_semivariogram(&field, max_lag, 1.0).unwrap();
            let mut expected = 0u64;
            for i in 0..field.len() {
                for j in i + 1..field.len() {
                    let d2 = (field[i].col - field[j].col).pow(2) + (field[i].row - field[j].row).pow(2);
                    if (d2 as f64).sqrt() <= max_lag {
                        expected += 1;
                    }
                }
            }
            prop_assert_eq!(v.bins.iter().map(|b| b.pair_count).sum::<u64>(), expected);
            prop_assert!(v.bins.windows(2).all(|w| w[0].lag < w[1].lag));
        }

        #[test]
        fn range_monotone_in_fraction(levels in proptest::collection::vec(0.0f64..10.0, 4..30), f1 in 0.05f64..0.95, f2 in 0.05f64..0.95) {
            prop_assume!(levels.iter().any(|&g| g > 0.0));
            let v = Variogram {
                bins: levels.iter().enumerate().map(|(i, &g)| VariogramBin { lag: (i + 1) as f64, gamma_hat: g, pair_count: 1 }).collect(),
                max_lag: levels.len() as f64,
                bin_width: 1.0,
            };
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            prop_assert!(estimate_range(&v, lo).unwrap().range <= estimate_range(&v, hi).unwrap().range);
        }

        #[test]
        fn partition_disjoint_cover(d in 1usize..12, n in 1usize..200, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cells: Vec<(i64, i64)> = (-15..15).flat_map(|c| (-15..15).map(move |r| (c, r))).collect();
            cells.shuffle(&mut rng);
            let pixels: Vec<_> = cells.iter().take(n).enumerate().map(|(i, &(c, r))| (i as u64, c, r)).collect();
            let p = partition(&pixels, d).unwrap();
            prop_assert_eq!(p.total_members(), n);
            let mut seen: Vec<u64> = p.blocks.iter().flat_map(|b| b.members.iter().copied()).collect();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
            prop_assert!(p.blocks.iter().all(|b| b.n() >= 1 && b.n() <= d * d));
        }
    }
}
