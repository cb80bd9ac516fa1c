//! Spatiotemporally uniform masks: every timestamp hides the same number of
//! patches and every patch location is hidden at the same number of
//! timestamps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// `T × G` mask matrix, `true` = masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    timestamps: usize,
    locations: usize,
    ratio: f64,
    cells: Vec<bool>,
}

fn exact_multiple(ratio: f64, n: usize) -> Option<usize> {
    let x = ratio * n as f64;
    let r = x.round();
    ((x - r).abs() < 1e-9).then_some(r as usize)
}

/// Builds a mask with exactly `r·G` masked patches per timestamp and `r·T`
/// masked timestamps per location.
///
/// Column `j` is filled cyclically at rows `(j·M + i) mod T` for `i < M`,
/// `M = r·T`; rows and columns are then relabelled by seeded permutations.
pub fn build_uniform_mask(timestamps: usize, locations: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if timestamps == 0 || locations == 0 {
        return Err(Error::Config(
            "mask needs at least one timestamp and one location".into(),
        ));
    }
    let per_location = exact_multiple(ratio, timestamps);
    let per_timestamp = exact_multiple(ratio, locations);
    let (Some(m), Some(_)) = (per_location, per_timestamp) else {
        return Err(Error::Config(format!(
            "mask ratio {ratio} gives r·G = {} and r·T = {}; both must be integers",
            ratio * locations as f64,
            ratio * timestamps as f64
        )));
    };
    let mut canonical = vec![false; timestamps * locations];
    for j in 0..locations {
        for i in 0..m {
            canonical[((j * m + i) % timestamps) * locations + j] = true;
        }
    }
    let mut rng = RngStream::new(seed, "uniform-mask");
    let rows = rng.permutation(timestamps);
    let cols = rng.permutation(locations);
    let mut cells = vec![false; timestamps * locations];
    for t in 0..timestamps {
        for g in 0..locations {
            cells[rows[t] * locations + cols[g]] = canonical[t * locations + g];
        }
    }
    Ok(MaskPlan {
        timestamps,
        locations,
        ratio,
        cells,
    })
}

impl MaskPlan {
    /// The all-visible plan.
    pub fn none(timestamps: usize, locations: usize) -> Self {
        MaskPlan {
            timestamps,
            locations,
            ratio: 0.0,
            cells: vec![false; timestamps * locations],
        }
    }

    pub fn timestamps(&self) -> usize {
        self.timestamps
    }

    pub fn locations(&self) -> usize {
        self.locations
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn is_masked(&self, t: usize, g: usize) -> bool {
        self.cells[t * self.locations + g]
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.cells
            .chunks(self.locations)
            .map(|r| r.iter().filter(|&&m| m).count())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        (0..self.locations)
            .map(|g| (0..self.timestamps).filter(|&t| self.is_masked(t, g)).count())
            .collect()
    }

    /// Visible patches of timestamp `t`, ascending.
    pub fn unmasked_patches(&self, t: usize) -> Vec<usize> {
        (0..self.locations).filter(|&g| !self.is_masked(t, g)).collect()
    }

    /// Timestamps at which location `g` is visible, ascending.
    pub fn location_series(&self, g: usize) -> Vec<usize> {
        (0..self.timestamps).filter(|&t| !self.is_masked(t, g)).collect()
    }

    /// Visible patches per timestamp, `(1 − r)·G`.
    pub fn visible_per_timestamp(&self) -> usize {
        self.locations - self.row_sums().first().copied().unwrap_or(0)
    }

    /// Text rendering: one row per timestamp (`#` masked, `.` visible)
    /// followed by both sum vectors.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for t in 0..self.timestamps {
            for g in 0..self.locations {
                s.push(if self.is_masked(t, g) { '#' } else { '.' });
            }
            s.push('\n');
        }
        let join = |v: Vec<usize>| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "row sums: {}", join(self.row_sums()));
        let _ = writeln!(s, "column sums: {}", join(self.column_sums()));
        s
    }
}

/// Per-day mask for the weather series.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherMask {
    pub days: Vec<bool>,
    pub ratio: f64,
}

impl WeatherMask {
    pub fn none(days: usize) -> Self {
        WeatherMask {
            days: vec![false; days],
            ratio: 0.0,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.days.iter().filter(|&&m| m).count()
    }
}

/// Uniformly random subset of `round(ratio·L)` masked days.
pub fn build_weather_mask(days: usize, ratio: f64, seed: u64) -> Result<WeatherMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("weather mask ratio {ratio} outside [0, 1)")));
    }
    let count = (ratio * days as f64).round() as usize;
    let order = RngStream::new(seed, "weather-mask").permutation(days);
    let mut flags = vec![false; days];
    for &d in &order[..count] {
        flags[d] = true;
    }
    Ok(WeatherMask { days: flags, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_by_sixteen_at_half() {
        let p = build_uniform_mask(4, 16, 0.5, 7).unwrap();
        assert!(p.row_sums().iter().all(|&s| s == 8));
        for g in 0..16 {
            assert_eq!(p.location_series(g).len(), 2);
        }
        for t in 0..4 {
            assert_eq!(p.unmasked_patches(t).len(), 8);
        }
    }

    #[test]
    fn zero_ratio_is_all_visible() {
        let p = build_uniform_mask(5, 9, 0.0, 1).unwrap();
        assert_eq!(p, MaskPlan::none(5, 9));
        assert_eq!(p.unmasked_patches(2), (0..9).collect::<Vec<_>>());
        assert_eq!(p.location_series(3), (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn six_by_sixteen_sums_by_brute_force() {
        let p = build_uniform_mask(6, 16, 0.5, 3).unwrap();
        for t in 0..6 {
            let mut n = 0;
            for g in 0..16 {
                n += p.is_masked(t, g) as usize;
            }
            assert_eq!(n, 8);
        }
        for g in 0..16 {
            let mut n = 0;
            for t in 0..6 {
                n += p.is_masked(t, g) as usize;
            }
            assert_eq!(n, 3);
        }
    }

    #[test]
    fn lengths_equal_over_seeds() {
        for seed in 0..100 {
            let p = build_uniform_mask(6, 16, 0.5, seed).unwrap();
            assert!((0..6).all(|t| p.unmasked_patches(t).len() == 8));
            assert!((0..16).all(|g| p.location_series(g).len() == 3));
        }
    }

    #[test]
    fn non_integer_products_rejected_with_both() {
        let err = build_uniform_mask(5, 16, 0.5, 0).unwrap_err().to_string();
        assert!(err.contains("r·G = 8") && err.contains("r·T = 2.5"), "{err}");
    }

    #[test]
    fn seeds_differ() {
        let a = build_uniform_mask(4, 16, 0.5, 1).unwrap();
        let distinct = (2..40)
            .filter(|&s| build_uniform_mask(4, 16, 0.5, s).unwrap() != a)
            .count();
        assert!(distinct >= 37);
    }

    #[test]
    fn weather_mask_counts() {
        assert_eq!(build_weather_mask(10, 0.0, 1).unwrap().masked_count(), 0);
        assert_eq!(build_weather_mask(10, 0.5, 1).unwrap().masked_count(), 5);
        assert_eq!(
            build_weather_mask(365, 0.5, 9).unwrap(),
            build_weather_mask(365, 0.5, 9).unwrap()
        );
    }

    #[test]
    fn render_lists_sums() {
        let text = build_uniform_mask(4, 16, 0.5, 2).unwrap().render();
        assert!(text.contains("row sums: 8 8 8 8"));
        assert!(text.contains("column sums: 2 2"));
    }
}
