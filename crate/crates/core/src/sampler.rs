//! Choosing which stride-16 tokens the encoder sees.
//!
//! Three modes: uniform random subsets, a regular lattice, and the full set.
//! Whatever the mode, the result is a [`SampledSet`] whose `kept` and
//! `dropped` lists are ascending and partition `0..n_tokens`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Random,
    Grid,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSpec {
    pub mode: SampleMode,
    pub ratio: f64,
    pub seed: u64,
}

impl SampleSpec {
    pub fn full() -> Self {
        SampleSpec {
            mode: SampleMode::Full,
            ratio: 1.0,
            seed: 0,
        }
    }

    pub fn random(ratio: f64, seed: u64) -> Self {
        SampleSpec {
            mode: SampleMode::Random,
            ratio,
            seed,
        }
    }

    pub fn grid(ratio: f64) -> Self {
        SampleSpec {
            mode: SampleMode::Grid,
            ratio,
            seed: 0,
        }
    }

    /// Same spec on substream `i` (seed + i), used for ensemble members.
    pub fn substream(&self, i: u64) -> Self {
        SampleSpec {
            seed: self.seed.wrapping_add(i),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid(
                "SampleSpec",
                format!("ratio {} outside (0, 1]", self.ratio),
            ));
        }
        Ok(())
    }

    /// Effective ratio; `Full` is always 1.
    pub fn effective_ratio(&self) -> f64 {
        match self.mode {
            SampleMode::Full => 1.0,
            _ => self.ratio,
        }
    }

    /// `clamp(floor(ratio * n), 1, n)`.
    pub fn kept_count(&self, n_tokens: usize) -> usize {
        let k = (self.effective_ratio() * n_tokens as f64).floor() as usize;
        k.clamp(1, n_tokens)
    }

    /// Lattice step `round(1 / ratio)` used by grid mode.
    pub fn grid_step(&self) -> usize {
        ((1.0 / self.effective_ratio()).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledSet {
    kept: Vec<usize>,
    dropped: Vec<usize>,
    n_tokens: usize,
}

impl SampledSet {
    pub fn full(n_tokens: usize) -> Self {
        SampledSet {
            kept: (0..n_tokens).collect(),
            dropped: Vec::new(),
            n_tokens,
        }
    }

    /// Builds a set from an ascending kept list.
    pub fn from_kept(n_tokens: usize, mut kept: Vec<usize>) -> Result<Self> {
        kept.sort_unstable();
        kept.dedup();
        if kept.is_empty() || *kept.last().unwrap() >= n_tokens {
            return Err(Error::invalid(
                "SampledSet",
                format!("kept indices must be non-empty and below {n_tokens}"),
            ));
        }
        let mut dropped = Vec::with_capacity(n_tokens - kept.len());
        let mut it = kept.iter().peekable();
        for i in 0..n_tokens {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                dropped.push(i);
            }
        }
        Ok(SampledSet {
            kept,
            dropped,
            n_tokens,
        })
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn is_full(&self) -> bool {
        self.dropped.is_empty()
    }
}

fn random_subset(n_tokens: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..n_tokens).collect();
    // Partial Fisher-Yates: the first `count` slots end up a uniform subset.
    for i in 0..count {
        let j = rng.random_range(i..n_tokens);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// Samples over a flat sequence of `n_tokens`. Grid mode keeps every
/// `round(1/ratio)`-th index of the flattened sequence.
pub fn sample_indices(n_tokens: usize, spec: &SampleSpec) -> Result<SampledSet> {
    if n_tokens == 0 {
        return Err(Error::invalid("sample_indices", "n_tokens must be at least 1"));
    }
    spec.validate()?;
    let count = spec.kept_count(n_tokens);
    let kept = match spec.mode {
        SampleMode::Full => return Ok(SampledSet::full(n_tokens)),
        SampleMode::Random => random_subset(n_tokens, count, spec.seed),
        SampleMode::Grid => (0..n_tokens).step_by(spec.grid_step()).take(count).collect(),
    };
    SampledSet::from_kept(n_tokens, kept)
}

/// Samples over a row-major `grid_h x grid_w` token grid. Random and full
/// modes match [`sample_indices`]; grid mode keeps cells with
/// `(row + col) % step == 0`, which for a 50% ratio is a checkerboard
/// regardless of the grid width.
pub fn sample_grid(grid_h: usize, grid_w: usize, spec: &SampleSpec) -> Result<SampledSet> {
    let n_tokens = grid_h * grid_w;
    if spec.mode != SampleMode::Grid {
        return sample_indices(n_tokens, spec);
    }
    if n_tokens == 0 {
        return Err(Error::invalid("sample_grid", "empty token grid"));
    }
    spec.validate()?;
    let step = spec.grid_step();
    let count = spec.kept_count(n_tokens);
    let kept = (0..n_tokens)
        .filter(|&t| (t / grid_w + t % grid_w).is_multiple_of(step))
        .take(count)
        .collect();
    SampledSet::from_kept(n_tokens, kept)
}

/// Fraction of image pixels inside the receptive field of at least one kept
/// token. Token `(i, j)` covers the `rf x rf` square centred on
/// `(i * stride + stride / 2, j * stride + stride / 2)`, clipped to the image.
pub fn coverage_fraction(
    set: &SampledSet,
    grid_h: usize,
    grid_w: usize,
    rf: usize,
    stride: usize,
    img_h: usize,
    img_w: usize,
) -> Result<f64> {
    if grid_h * grid_w != set.n_tokens() {
        return Err(Error::shape(
            "coverage_fraction",
            format!(
                "{grid_h}x{grid_w} grid but the set spans {} tokens",
                set.n_tokens()
            ),
        ));
    }
    if rf == 0 || stride == 0 || img_h == 0 || img_w == 0 {
        return Err(Error::invalid("coverage_fraction", "extents must be positive"));
    }
    let mut covered = vec![false; img_h * img_w];
    let half = rf as isize / 2;
    let span = |center: usize, limit: usize| {
        let lo = (center as isize - half).max(0) as usize;
        let hi = (center as isize - half + rf as isize).clamp(0, limit as isize) as usize;
        lo..hi
    };
    for &t in set.kept() {
        let (i, j) = (t / grid_w, t % grid_w);
        let rows = span(i * stride + stride / 2, img_h);
        let cols = span(j * stride + stride / 2, img_w);
        for y in rows {
            covered[y * img_w + cols.start..y * img_w + cols.end.max(cols.start)]
                .iter_mut()
                .for_each(|c| *c = true);
        }
    }
    Ok(covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_ratio_keeps_everything() {
        let s = sample_indices(196, &SampleSpec::random(1.0, 3)).unwrap();
        assert_eq!(s.kept(), (0..196).collect::<Vec<_>>().as_slice());
        assert!(s.dropped().is_empty());
        assert!(sample_indices(196, &SampleSpec::full()).unwrap().is_full());
    }

    #[test]
    fn half_ratio_count() {
        let s = sample_indices(196, &SampleSpec::random(0.5, 0)).unwrap();
        assert_eq!(s.kept().len(), 98);
        assert_eq!(s.dropped().len(), 98);
    }

    #[test]
    fn flat_grid_is_stride_two() {
        let s = sample_indices(16, &SampleSpec::grid(0.5)).unwrap();
        assert_eq!(s.kept(), &[0, 2, 4, 6, 8, 10, 12, 14]);
    }

    #[test]
    fn two_d_grid_is_checkerboard() {
        let s = sample_grid(4, 4, &SampleSpec::grid(0.5)).unwrap();
        assert_eq!(s.kept(), &[0, 2, 5, 7, 8, 10, 13, 15]);
        // Odd widths coincide with the flat stride pattern.
        let flat = sample_indices(15, &SampleSpec::grid(0.5)).unwrap();
        let grid = sample_grid(3, 5, &SampleSpec::grid(0.5)).unwrap();
        assert_eq!(flat.kept(), grid.kept());
    }

    #[test]
    fn tiny_ratio_keeps_one() {
        let s = sample_indices(5, &SampleSpec::random(0.01, 1)).unwrap();
        assert_eq!(s.kept().len(), 1);
    }

    #[test]
    fn bad_ratio_rejected() {
        for r in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(sample_indices(10, &SampleSpec::random(r, 0)).is_err());
        }
        assert!(sample_indices(0, &SampleSpec::full()).is_err());
    }

    #[test]
    fn coverage_all_kept_is_one() {
        let s = SampledSet::full(16);
        let c = coverage_fraction(&s, 4, 4, 31, 16, 64, 64).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn coverage_point_rf_half_kept_bounded() {
        let s = sample_indices(16, &SampleSpec::grid(0.5)).unwrap();
        let c = coverage_fraction(&s, 4, 4, 1, 16, 64, 64).unwrap();
        assert!(c <= 0.5);
        assert_eq!(c, 8.0 / 4096.0);
    }

    #[test]
    fn coverage_dimension_mismatch() {
        let s = SampledSet::full(16);
        assert!(coverage_fraction(&s, 3, 4, 31, 16, 64, 64).is_err());
    }
}
