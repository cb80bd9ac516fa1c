use std::ops::Range;

use super::Sample;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// A context window of consecutive images plus one later target image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingInstance {
    /// Index of the first context image.
    pub start: usize,
    /// Context length C.
    pub context: usize,
    pub target: usize,
    /// DOY(target) − DOY(last context image), in days.
    pub gap: u32,
}

impl TrainingInstance {
    pub fn context_indices(&self) -> Range<usize> {
        self.start..self.start + self.context
    }

    pub fn last_context(&self) -> usize {
        self.start + self.context - 1
    }
}

/// Sliding windows of `context` images, each paired with a target drawn
/// uniformly among the later images whose gap lies in `gap_range`
/// (inclusive; `None` as upper bound means unbounded).
pub fn build_instances(
    sample: &Sample,
    context: usize,
    gap_range: (u32, Option<u32>),
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    let (d_min, d_max) = gap_range;
    if d_min < 1 {
        return Err(Error::Config("minimum forecast gap must be at least 1 day".into()));
    }
    if context == 0 {
        return Err(Error::Config("context length must be positive".into()));
    }
    let t = sample.len();
    let mut rng = RngStream::new(seed, "instances");
    let mut out = Vec::new();
    if t < context + 1 {
        return Ok(out);
    }
    for start in 0..t - context {
        let last = start + context - 1;
        let eligible: Vec<(usize, u32)> = (last + 1..t)
            .map(|j| (j, (sample.doys[j] - sample.doys[last]) as u32))
            .filter(|&(_, gap)| gap >= d_min && d_max.is_none_or(|m| gap <= m))
            .collect();
        if eligible.is_empty() {
            continue;
        }
        let (target, gap) = eligible[rng.below(eligible.len())];
        out.push(TrainingInstance {
            start,
            context,
            target,
            gap,
        });
    }
    Ok(out)
}

/// Disjoint train / validation / test sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `n` samples by location according to `fractions`.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config(format!("split fractions {fractions:?} do not sum to 1")));
    }
    if n < 3 {
        return Err(Error::Config(format!("{n} samples cannot fill three splits")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, "split").shuffle(&mut order);
    let n_train = ((fractions[0] * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((fractions[1] * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}
