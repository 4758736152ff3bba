use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SampleWindow, SequenceDataset};
use crate::error::{Error, Result};

/// A contiguous run of windows from one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub dataset: &'a SequenceDataset,
    pub start: usize,
    pub len: usize,
}

impl<'a> Segment<'a> {
    pub fn whole(dataset: &'a SequenceDataset) -> Self {
        Segment {
            dataset,
            start: 0,
            len: dataset.len(),
        }
    }

    pub fn windows(&self) -> &'a [SampleWindow] {
        &self.dataset.windows[self.start..self.start + self.len]
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Splits `n` windows into consecutive runs whose lengths are drawn
/// uniformly from `[min_len, max_len]`. The last run is shifted back to end
/// at `n` (overlapping its predecessor) so every window is covered.
pub fn segment_ranges(n: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<Range<usize>>> {
    if min_len < 2 || min_len > max_len {
        return Err(Error::Config(format!(
            "segment bounds must satisfy 2 <= min <= max, got [{min_len}, {max_len}]"
        )));
    }
    if n < min_len {
        log::warn!("{n} windows is shorter than the minimum segment length {min_len}; no segments produced");
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < n {
        let len = rng.random_range(min_len..=max_len).min(n);
        let start = pos.min(n - len);
        out.push(start..start + len);
        pos = start + len;
    }
    Ok(out)
}

pub fn segment(dataset: &SequenceDataset, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<Segment<'_>>> {
    Ok(segment_ranges(dataset.len(), min_len, max_len, seed)?
        .into_iter()
        .map(|r| Segment {
            dataset,
            start: r.start,
            len: r.len(),
        })
        .collect())
}
