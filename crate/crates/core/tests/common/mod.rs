#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Synthetic grid: `side × side` pixels, `years` years, NDVI around 0.4 with
/// noise. Pixels with `col < side / 2 && row < side / 2` get a rising trend in
/// the first season and a falling one in the third. Values are rounded to four
/// decimals so the CSV text is exact.
pub fn synthetic_grid(side: i64, years: u32, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("pixel_id,col,row,year,period,ndvi\n");
    for row in 0..side {
        for col in 0..side {
            let id = row * side + col + 1;
            let trending = col < side / 2 && row < side / 2;
            let level = 0.3 + 0.1 * rng.random::<f64>();
            for year in 0..years {
                for period in 1..=24u32 {
                    let noise: f64 = rng.sample(StandardNormal);
                    let trend = match (trending, period) {
                        (true, 1..=6) => 0.012 * year as f64,
                        (true, 13..=20) => -0.012 * year as f64,
                        _ => 0.0,
                    };
                    let v = (level + trend + 0.02 * noise).clamp(-1.0, 1.0);
                    writeln!(out, "{id},{col},{row},{year},{period},{v:.4}").unwrap();
                }
            }
        }
    }
    out
}

pub fn write_synthetic_grid(path: &Path, side: i64, years: u32, seed: u64) {
    std::fs::write(path, synthetic_grid(side, years, seed)).unwrap();
}

/// Grid where every pixel holds the same value at every period of a year but
/// the value changes from year to year (so QA does not drop it).
pub fn year_constant_grid(side: i64, years: u32, value_of: impl Fn(i64, u32) -> f64) -> String {
    let mut out = String::from("pixel_id,col,row,year,period,ndvi\n");
    for row in 0..side {
        for col in 0..side {
            let id = row * side + col + 1;
            for year in 0..years {
                for period in 1..=24 {
                    let v = value_of(id, year);
                    writeln!(out, "{id},{col},{row},{year},{period},{v}").unwrap();
                }
            }
        }
    }
    out
}
