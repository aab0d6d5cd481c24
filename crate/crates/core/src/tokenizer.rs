//! Motion-focused tokenization.
//!
//! A video `T×C×H×W` is cut into non-overlapping tubelets of `t_p` frames and
//! `p×p` pixels, giving an `n_t×n_x×n_y` token grid (`x` runs over height,
//! `y` over width). Each tubelet is reduced to a temporally averaged
//! representative patch; absolute differences between temporally adjacent
//! representatives, averaged over channels and pixels, give one raw motion
//! energy per location and step. Energies are min–max normalised per video,
//! a slice of ones is prepended for the first temporal segment, and tokens
//! whose energy strictly exceeds the threshold `τ` are kept.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("video {t}x{h}x{w} is not divisible into tubelets of {t_p} frames and {p}x{p} pixels")]
    NonDivisible { t: usize, h: usize, w: usize, p: usize, t_p: usize },
    #[error("video has a zero extent or {len} values for {t}x{c}x{h}x{w}")]
    BadVideo { t: usize, c: usize, h: usize, w: usize, len: usize },
    #[error("threshold {0} outside the open interval (0, 1)")]
    Threshold(f64),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("unknown normalisation scope `{0}` (expected `video` or `location`)")]
    Scope(String),
}

/// Dense `T×C×H×W` video, values in `[0, 1]`, t-major then c, h, w.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor<S> {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    values: Vec<S>,
}

impl<S: Scalar> VideoTensor<S> {
    pub fn new(t: usize, c: usize, h: usize, w: usize, values: Vec<S>) -> Result<Self, TokenizerError> {
        if t == 0 || c == 0 || h == 0 || w == 0 || values.len() != t * c * h * w {
            return Err(TokenizerError::BadVideo {
                t,
                c,
                h,
                w,
                len: values.len(),
            });
        }
        Ok(Self { t, c, h, w, values })
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> S {
        self.values[self.index(t, c, y, x)]
    }

    pub fn frame(&self, t: usize) -> &[S] {
        let n = self.c * self.h * self.w;
        &self.values[t * n..(t + 1) * n]
    }

    /// Returns the video with channels reordered so output channel `i` is input channel `perm[i]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.c);
        let mut out = self.values.clone();
        for t in 0..self.t {
            for (dst, &src) in perm.iter().enumerate() {
                for y in 0..self.h {
                    for x in 0..self.w {
                        out[self.index(t, dst, y, x)] = self.get(t, src, y, x);
                    }
                }
            }
        }
        Self { values: out, ..*self }
    }

    pub fn cast<T: Scalar>(&self) -> VideoTensor<T> {
        VideoTensor {
            t: self.t,
            c: self.c,
            h: self.h,
            w: self.w,
            values: self.values.iter().map(|v| T::lit(v.f64())).collect(),
        }
    }
}

/// Grid coordinate of one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenCoord {
    pub t: usize,
    pub x: usize,
    pub y: usize,
}

/// Token grid extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub n_t: usize,
    pub n_x: usize,
    pub n_y: usize,
}

impl GridDims {
    pub fn new(n_t: usize, n_x: usize, n_y: usize) -> Self {
        Self { n_t, n_x, n_y }
    }

    pub fn len(&self) -> usize {
        self.n_t * self.n_x * self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.n_x * self.n_y
    }

    #[inline]
    pub fn flat(&self, c: TokenCoord) -> usize {
        (c.t * self.n_x + c.x) * self.n_y + c.y
    }

    #[inline]
    pub fn coord(&self, i: usize) -> TokenCoord {
        TokenCoord {
            t: i / self.slice_len(),
            x: (i / self.n_y) % self.n_x,
            y: i % self.n_y,
        }
    }
}

/// Tubelet partition of a video. Blocks are stored token-major in canonical
/// `(t, x, y)` order, each laid out `t_p×C×p×p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<S> {
    pub dims: GridDims,
    pub t_p: usize,
    pub channels: usize,
    pub p: usize,
    pub(crate) patches: Vec<S>,
}

impl<S: Scalar> PatchGrid<S> {
    pub fn block_len(&self) -> usize {
        self.t_p * self.channels * self.p * self.p
    }

    pub fn block(&self, token: usize) -> &[S] {
        let n = self.block_len();
        &self.patches[token * n..(token + 1) * n]
    }

    pub fn patches(&self) -> &[S] {
        &self.patches
    }

    /// Inverse of [`partition_video`].
    pub fn reassemble(&self) -> VideoTensor<S> {
        let (t, h, w) = (self.dims.n_t * self.t_p, self.dims.n_x * self.p, self.dims.n_y * self.p);
        let mut values = vec![S::zero(); t * self.channels * h * w];
        self.for_each_pixel(h, w, |dst, src| values[dst] = self.patches[src]);
        VideoTensor::new(t, self.channels, h, w, values).expect("extents come from a valid grid")
    }

    fn for_each_pixel(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
        let (c, p, t_p) = (self.channels, self.p, self.t_p);
        let n = self.block_len();
        for tok in 0..self.dims.len() {
            let TokenCoord { t, x, y } = self.dims.coord(tok);
            let mut src = tok * n;
            for dt in 0..t_p {
                for ch in 0..c {
                    for i in 0..p {
                        let row = (((t * t_p + dt) * c + ch) * h + x * p + i) * w + y * p;
                        for j in 0..p {
                            f(row + j, src);
                            src += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Splits `v` into a grid of `t_p×p×p` tubelets. Lossless.
pub fn partition_video<S: Scalar>(v: &VideoTensor<S>, p: usize, t_p: usize) -> Result<PatchGrid<S>, TokenizerError> {
    if p == 0 || t_p == 0 || v.t % t_p != 0 || v.h % p != 0 || v.w % p != 0 {
        return Err(TokenizerError::NonDivisible {
            t: v.t,
            h: v.h,
            w: v.w,
            p,
            t_p,
        });
    }
    let dims = GridDims::new(v.t / t_p, v.h / p, v.w / p);
    let mut grid = PatchGrid {
        dims,
        t_p,
        channels: v.c,
        p,
        patches: Vec::new(),
    };
    let mut patches = vec![S::zero(); v.values.len()];
    grid.for_each_pixel(v.h, v.w, |src, dst| patches[dst] = v.values[src]);
    grid.patches = patches;
    Ok(grid)
}

/// Per-token `C×p×p` blocks (representative patches or difference maps).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMaps<S> {
    /// `n_t` of the grid for representatives, `n_t − 1` for difference maps.
    pub slices: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub channels: usize,
    pub p: usize,
    data: Vec<S>,
}

impl<S: Scalar> PatchMaps<S> {
    pub fn map_len(&self) -> usize {
        self.channels * self.p * self.p
    }

    pub fn count(&self) -> usize {
        self.slices * self.n_x * self.n_y
    }

    pub fn map(&self, i: usize) -> &[S] {
        let n = self.map_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }
}

/// Mean of each tubelet along its `t_p` frames.
pub fn temporal_average<S: Scalar>(grid: &PatchGrid<S>) -> PatchMaps<S> {
    let m = grid.channels * grid.p * grid.p;
    let inv = S::one() / S::from_usize(grid.t_p).unwrap();
    let mut data = Vec::with_capacity(grid.dims.len() * m);
    for tok in 0..grid.dims.len() {
        let block = grid.block(tok);
        for i in 0..m {
            let mut acc = S::zero();
            for dt in 0..grid.t_p {
                acc += block[dt * m + i];
            }
            data.push(acc * inv);
        }
    }
    PatchMaps {
        slices: grid.dims.n_t,
        n_x: grid.dims.n_x,
        n_y: grid.dims.n_y,
        channels: grid.channels,
        p: grid.p,
        data,
    }
}

/// `D_t = |P̄_{t+1} − P̄_t|` for every location; `n_t − 1` slices (empty for `n_t = 1`).
pub fn motion_differences<S: Scalar>(reps: &PatchMaps<S>) -> PatchMaps<S> {
    let per_slice = reps.n_x * reps.n_y * reps.map_len();
    let slices = reps.slices.saturating_sub(1);
    let data = (0..slices * per_slice)
        .map(|i| (reps.data[i + per_slice] - reps.data[i]).abs())
        .collect();
    PatchMaps {
        slices,
        data,
        ..*reps
    }
}

/// Per-location scalar energies, `slices × n_x × n_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergySlices<S> {
    pub slices: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub values: Vec<S>,
}

/// Channel-and-pixel mean of each difference map.
///
/// Per-channel partial sums are combined in sorted order, so the result does
/// not depend on channel order.
pub fn patch_energy<S: Scalar>(diffs: &PatchMaps<S>) -> EnergySlices<S> {
    let pp = diffs.p * diffs.p;
    let inv = S::one() / S::from_usize(diffs.map_len()).unwrap();
    let mut partial = vec![S::zero(); diffs.channels];
    let values = (0..diffs.count())
        .map(|i| {
            let map = diffs.map(i);
            for (c, acc) in partial.iter_mut().enumerate() {
                *acc = map[c * pp..(c + 1) * pp].iter().copied().sum();
            }
            partial.sort_by(|a, b| a.partial_cmp(b).expect("finite energies"));
            partial.iter().copied().sum::<S>() * inv
        })
        .collect();
    EnergySlices {
        slices: diffs.slices,
        n_x: diffs.n_x,
        n_y: diffs.n_y,
        values,
    }
}

/// Which energies share one min–max range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormalizeScope {
    /// All `(t, x, y)` energies of one video jointly.
    #[default]
    Video,
    /// Each spatial location's temporal sequence separately.
    Location,
}

impl FromStr for NormalizeScope {
    type Err = TokenizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "video" => Ok(Self::Video),
            "location" => Ok(Self::Location),
            other => Err(TokenizerError::Scope(other.to_string())),
        }
    }
}

impl fmt::Display for NormalizeScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Video => "video",
            Self::Location => "location",
        })
    }
}

fn min_max_in_place<S: Scalar>(values: &mut [S], idx: impl Iterator<Item = usize> + Clone) {
    let (lo, hi) = idx
        .clone()
        .fold((S::infinity(), S::neg_infinity()), |(lo, hi), i| (lo.min(values[i]), hi.max(values[i])));
    let range = hi - lo;
    for i in idx {
        values[i] = if range > S::zero() { (values[i] - lo) / range } else { S::zero() };
    }
}

/// Min–max normalisation into `[0, 1]`; a constant group maps to all zeros.
pub fn normalize_energies<S: Scalar>(raw: &EnergySlices<S>, scope: NormalizeScope) -> EnergySlices<S> {
    let mut out = raw.clone();
    if raw.values.is_empty() {
        return out;
    }
    match scope {
        NormalizeScope::Video => min_max_in_place(&mut out.values, 0..raw.values.len()),
        NormalizeScope::Location => {
            let loc = raw.n_x * raw.n_y;
            for l in 0..loc {
                min_max_in_place(&mut out.values, (0..raw.slices).map(move |t| t * loc + l));
            }
        }
    }
    out
}

/// `n_t×n_x×n_y` energies in `[0, 1]` with the first temporal slice fixed to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionEnergyTensor<S> {
    pub dims: GridDims,
    values: Vec<S>,
}

impl<S: Scalar> MotionEnergyTensor<S> {
    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn get(&self, c: TokenCoord) -> S {
        self.values[self.dims.flat(c)]
    }

    /// Builds a tensor directly; values must lie in `[0, 1]` and the first slice must be 1.
    pub fn from_values(dims: GridDims, values: Vec<S>) -> Result<Self, TokenizerError> {
        if values.len() != dims.len() {
            return Err(TokenizerError::Shape {
                expected: vec![dims.n_t, dims.n_x, dims.n_y],
                got: vec![values.len()],
            });
        }
        let ok_range = values.iter().all(|&v| v >= S::zero() && v <= S::one());
        let ok_first = values[..dims.slice_len()].iter().all(|&v| v == S::one());
        if !ok_range || !ok_first {
            return Err(TokenizerError::Shape {
                expected: vec![dims.n_t, dims.n_x, dims.n_y],
                got: vec![dims.n_t, dims.n_x, dims.n_y],
            });
        }
        Ok(Self { dims, values })
    }
}

/// Prepends the all-ones first slice to normalised energies.
pub fn assemble_energy_tensor<S: Scalar>(normalized: &EnergySlices<S>, dims: GridDims) -> Result<MotionEnergyTensor<S>, TokenizerError> {
    let expected = dims.n_t.checked_sub(1).map(|s| (s, dims.n_x, dims.n_y));
    if expected != Some((normalized.slices, normalized.n_x, normalized.n_y)) || normalized.values.len() != normalized.slices * dims.slice_len() {
        return Err(TokenizerError::Shape {
            expected: vec![dims.n_t.saturating_sub(1), dims.n_x, dims.n_y],
            got: vec![normalized.slices, normalized.n_x, normalized.n_y],
        });
    }
    let mut values = vec![S::one(); dims.slice_len()];
    values.extend_from_slice(&normalized.values);
    Ok(MotionEnergyTensor { dims, values })
}

/// Binary retention mask over the token grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SelectionMask {
    pub dims: GridDims,
    bits: Vec<bool>,
}

impl SelectionMask {
    pub fn from_bits(dims: GridDims, bits: Vec<bool>) -> Result<Self, TokenizerError> {
        if bits.len() != dims.len() {
            return Err(TokenizerError::Shape {
                expected: vec![dims.n_t, dims.n_x, dims.n_y],
                got: vec![bits.len()],
            });
        }
        Ok(Self { dims, bits })
    }

    pub fn all(dims: GridDims) -> Self {
        Self {
            dims,
            bits: vec![true; dims.len()],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, c: TokenCoord) -> bool {
        self.bits[self.dims.flat(c)]
    }

    pub fn retained(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of grid tokens removed.
    pub fn drop_ratio(&self) -> f64 {
        let n = self.dims.len();
        (n - self.retained()) as f64 / n as f64
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn first_slice_kept(&self) -> bool {
        self.bits[..self.dims.slice_len()].iter().all(|&b| b)
    }

    pub fn bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// One debug line: `video_id n_t n_x n_y bits`.
    pub fn dump_line(&self, video_id: &str) -> String {
        format!("{video_id} {} {} {} {}", self.dims.n_t, self.dims.n_x, self.dims.n_y, self.bitstring())
    }

    pub fn parse_dump_line(line: &str) -> Result<(String, Self), TokenizerError> {
        let bad = || TokenizerError::Shape {
            expected: vec![5],
            got: vec![line.split_whitespace().count()],
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let n: Vec<usize> = f[1..4].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
        let bits = f[4]
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((f[0].to_string(), Self::from_bits(GridDims::new(n[0], n[1], n[2]), bits)?))
    }
}

/// `M = [E > τ]` with strict inequality.
pub fn select_tokens<S: Scalar>(energy: &MotionEnergyTensor<S>, tau: f64) -> Result<SelectionMask, TokenizerError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(TokenizerError::Threshold(tau));
    }
    Ok(SelectionMask {
        dims: energy.dims,
        bits: energy.values.iter().map(|e| e.f64() > tau).collect(),
    })
}

/// Retained tubelets in canonical `(t, x, y)` order with their grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<S> {
    pub video_id: String,
    pub coords: Vec<TokenCoord>,
    pub block_len: usize,
    pub(crate) patches: Vec<S>,
}

impl<S: Scalar> TokenSequence<S> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn patches(&self) -> &[S] {
        &self.patches
    }

    pub fn block(&self, i: usize) -> &[S] {
        &self.patches[i * self.block_len..(i + 1) * self.block_len]
    }
}

pub fn gather_tokens<S: Scalar>(grid: &PatchGrid<S>, mask: &SelectionMask, video_id: &str) -> Result<TokenSequence<S>, TokenizerError> {
    if grid.dims != mask.dims {
        let d = |g: GridDims| vec![g.n_t, g.n_x, g.n_y];
        return Err(TokenizerError::Shape {
            expected: d(grid.dims),
            got: d(mask.dims),
        });
    }
    let mut coords = Vec::with_capacity(mask.retained());
    let mut patches = Vec::with_capacity(mask.retained() * grid.block_len());
    for (i, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
        coords.push(grid.dims.coord(i));
        patches.extend_from_slice(grid.block(i));
    }
    Ok(TokenSequence {
        video_id: video_id.to_string(),
        coords,
        block_len: grid.block_len(),
        patches,
    })
}

/// Tokenization settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tokenizer {
    pub patch: usize,
    pub tubelet: usize,
    pub scope: NormalizeScope,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            patch: 16,
            tubelet: 2,
            scope: NormalizeScope::Video,
        }
    }
}

impl Tokenizer {
    /// Full energy pipeline for one video.
    pub fn motion_energy<S: Scalar>(&self, grid: &PatchGrid<S>) -> MotionEnergyTensor<S> {
        let reps = temporal_average(grid);
        let diffs = motion_differences(&reps);
        let raw = patch_energy(&diffs);
        let normalized = normalize_energies(&raw, self.scope);
        assemble_energy_tensor(&normalized, grid.dims).expect("slices derived from the same grid")
    }

    pub fn partition<S: Scalar>(&self, v: &VideoTensor<S>) -> Result<PatchGrid<S>, TokenizerError> {
        partition_video(v, self.patch, self.tubelet)
    }

    pub fn energy_of<S: Scalar>(&self, v: &VideoTensor<S>) -> Result<MotionEnergyTensor<S>, TokenizerError> {
        Ok(self.motion_energy(&self.partition(v)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(t: usize, c: usize, h: usize, w: usize, seed: u64) -> VideoTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::new(t, c, h, w, (0..t * c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn paper_scale_grid_counts() {
        let v = VideoTensor::new(16, 3, 224, 224, vec![0.0f32; 16 * 3 * 224 * 224]).unwrap();
        let g = partition_video(&v, 16, 2).unwrap();
        assert_eq!(g.dims, GridDims::new(8, 14, 14));
        assert_eq!(g.dims.len(), 1568);
    }

    #[test]
    fn degenerate_grid_and_errors() {
        let v = random_video(2, 3, 16, 16, 1);
        let g = partition_video(&v, 16, 2).unwrap();
        assert_eq!(g.dims.len(), 1);
        assert!(matches!(partition_video(&v, 5, 2), Err(TokenizerError::NonDivisible { .. })));
        assert!(partition_video(&random_video(3, 1, 16, 16, 2), 16, 2).is_err());
    }

    #[test]
    fn partition_round_trip_is_exact() {
        let v = random_video(8, 3, 32, 32, 7);
        let g = partition_video(&v, 16, 2).unwrap();
        assert_eq!(g.reassemble(), v);
    }

    #[test]
    fn temporal_average_cases() {
        // identical frames -> that frame
        let frame: Vec<f32> = (0..3 * 4 * 4).map(|i| i as f32 / 48.0).collect();
        let v = VideoTensor::new(2, 3, 4, 4, [frame.clone(), frame.clone()].concat()).unwrap();
        let reps = temporal_average(&partition_video(&v, 4, 2).unwrap());
        assert_eq!(reps.data(), frame.as_slice());
        // v and -v -> zero
        let neg: Vec<f32> = frame.iter().map(|x| -x).collect();
        let v = VideoTensor::new(2, 3, 4, 4, [frame, neg].concat()).unwrap();
        let reps = temporal_average(&partition_video(&v, 4, 2).unwrap());
        assert!(reps.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn temporal_average_matches_f64_mean() {
        let v = random_video(4, 3, 8, 8, 11);
        let grid = partition_video(&v, 4, 4).unwrap();
        let reps = temporal_average(&grid);
        let m = reps.map_len();
        for tok in 0..grid.dims.len() {
            let block = grid.block(tok);
            for i in 0..m {
                let mean: f64 = (0..4).map(|dt| block[dt * m + i] as f64).sum::<f64>() / 4.0;
                assert!((reps.map(tok)[i] as f64 - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn differences_and_energy() {
        // static video -> zero maps
        let frame: Vec<f32> = (0..2 * 4 * 4).map(|i| (i % 7) as f32 / 7.0).collect();
        let v = VideoTensor::new(4, 2, 4, 4, frame.repeat(4)).unwrap();
        let d = motion_differences(&temporal_average(&partition_video(&v, 4, 2).unwrap()));
        assert_eq!(d.slices, 1);
        assert!(d.data().iter().all(|&x| x == 0.0));
        assert!(patch_energy(&d).values.iter().all(|&x| x == 0.0));

        // a then a + delta -> constant |delta|, energy = |delta|
        let delta = 0.25f32;
        let shifted: Vec<f32> = frame.iter().map(|x| x + delta).collect();
        let v = VideoTensor::new(2, 2, 4, 4, [frame.clone(), shifted.clone()].concat()).unwrap();
        let d = motion_differences(&temporal_average(&partition_video(&v, 4, 1).unwrap()));
        assert!(d.data().iter().all(|&x| (x - delta).abs() < 1e-6));
        let e = patch_energy(&d);
        assert!((e.values[0] - delta).abs() < 1e-6);

        // swapping the two frames leaves D unchanged
        let v2 = VideoTensor::new(2, 2, 4, 4, [shifted, frame].concat()).unwrap();
        let d2 = motion_differences(&temporal_average(&partition_video(&v2, 4, 1).unwrap()));
        assert_eq!(d.data(), d2.data());
    }

    #[test]
    fn single_slice_video_has_no_differences() {
        let v = random_video(2, 1, 4, 4, 3);
        let grid = partition_video(&v, 2, 2).unwrap();
        let d = motion_differences(&temporal_average(&grid));
        assert_eq!(d.slices, 0);
        let e = Tokenizer::default().motion_energy(&grid);
        assert!(e.values().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn patch_energy_matches_f64_mean() {
        let v = random_video(4, 3, 8, 8, 5);
        let d = motion_differences(&temporal_average(&partition_video(&v, 4, 2).unwrap()));
        let e = patch_energy(&d);
        for i in 0..d.count() {
            let mean = d.map(i).iter().map(|&x| x as f64).sum::<f64>() / d.map_len() as f64;
            assert!((e.values[i] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn min_max_cases() {
        let raw = EnergySlices {
            slices: 3,
            n_x: 1,
            n_y: 1,
            values: vec![2.0f64, 4.0, 6.0],
        };
        assert_eq!(normalize_energies(&raw, NormalizeScope::Video).values, vec![0.0, 0.5, 1.0]);
        let flat = EnergySlices {
            values: vec![3.0f64; 3],
            ..raw.clone()
        };
        assert_eq!(normalize_energies(&flat, NormalizeScope::Video).values, vec![0.0; 3]);
        let two_loc = EnergySlices {
            slices: 2,
            n_x: 1,
            n_y: 2,
            values: vec![1.0f64, 10.0, 3.0, 20.0],
        };
        assert_eq!(normalize_energies(&two_loc, NormalizeScope::Location).values, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!("location".parse::<NormalizeScope>().unwrap(), NormalizeScope::Location);
        assert!("pixel".parse::<NormalizeScope>().is_err());
    }

    #[test]
    fn assemble_prepends_ones() {
        let n = EnergySlices {
            slices: 2,
            n_x: 1,
            n_y: 2,
            values: vec![0.1f64, 0.2, 0.3, 0.4],
        };
        let e = assemble_energy_tensor(&n, GridDims::new(3, 1, 2)).unwrap();
        assert_eq!(e.values(), &[1.0, 1.0, 0.1, 0.2, 0.3, 0.4]);
        assert!(assemble_energy_tensor(&n, GridDims::new(4, 1, 2)).is_err());
    }

    #[test]
    fn strict_threshold_semantics() {
        let dims = GridDims::new(3, 1, 1);
        let e = MotionEnergyTensor::from_values(dims, vec![1.0f64, 0.5, 0.2]).unwrap();
        assert_eq!(select_tokens(&e, 0.5).unwrap().bits(), &[true, false, false]);
        assert_eq!(select_tokens(&e, 1e-9).unwrap().retained(), 3);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(select_tokens(&e, bad).is_err());
        }
    }

    #[test]
    fn drop_ratio_counts() {
        let dims = GridDims::new(8, 2, 2);
        assert_eq!(SelectionMask::all(dims).drop_ratio(), 0.0);
        let bits = (0..dims.len()).map(|i| i < dims.slice_len()).collect();
        let m = SelectionMask::from_bits(dims, bits).unwrap();
        assert_eq!(m.drop_ratio(), 7.0 / 8.0);
    }

    #[test]
    fn gather_orders_canonically() {
        let v = random_video(4, 1, 4, 4, 9);
        let grid = partition_video(&v, 2, 2).unwrap();
        let all = gather_tokens(&grid, &SelectionMask::all(grid.dims), "v").unwrap();
        assert_eq!(all.len(), grid.dims.len());
        assert!(all.coords.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(all.patches(), grid.patches());

        let bits = (0..grid.dims.len()).map(|i| i < grid.dims.slice_len()).collect();
        let first = gather_tokens(&grid, &SelectionMask::from_bits(grid.dims, bits).unwrap(), "v").unwrap();
        assert_eq!(first.len(), 4);
        assert!(first.coords.iter().all(|c| c.t == 0));
    }

    #[test]
    fn mask_dump_round_trip() {
        let dims = GridDims::new(2, 1, 2);
        let m = SelectionMask::from_bits(dims, vec![true, true, false, true]).unwrap();
        let line = m.dump_line("clip_7");
        assert_eq!(line, "clip_7 2 1 2 1101");
        assert_eq!(SelectionMask::parse_dump_line(&line).unwrap(), ("clip_7".to_string(), m));
    }
}
