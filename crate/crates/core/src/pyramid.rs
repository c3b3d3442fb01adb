//! Hierarchical scale pyramid: the exponential length schedule
//! `n_l = floor(n_{l-1} / r)` and the learnable downsampling chain that
//! produces the per-scale representations.

use serde::{Deserialize, Serialize};

use crate::error::{MahaError, Result};
use crate::tensor::{adaptive_max_pool, adaptive_max_pool_backward, conv1d, conv1d_backward};
use crate::tensor::{ConvKernel, SeqMatrix};

/// Default downsampling kernel size.
pub const DEFAULT_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleKind {
    StridedConv,
    AdaptivePool,
}

/// The length schedule `[n_1, .., n_L]` for a base length `n` and integer
/// compression ratio `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub n: usize,
    pub r: usize,
    pub depth: usize,
    pub lengths: Vec<usize>,
    /// When true, the full-resolution level participates in attention as an
    /// extra scale. Default false: attention runs only at levels 1..=L.
    pub include_base_scale: bool,
}

impl ScaleSchedule {
    /// Sequence length at pyramid level `l` (`l = 0` is the base).
    pub fn len_at(&self, level: usize) -> usize {
        if level == 0 {
            self.n
        } else {
            self.lengths[level - 1]
        }
    }

    /// Number of scales attention runs over.
    pub fn num_attention_scales(&self) -> usize {
        self.depth + usize::from(self.include_base_scale)
    }

    /// Pyramid levels participating in attention, in ascending order.
    pub fn attention_levels(&self) -> Vec<usize> {
        let first = usize::from(!self.include_base_scale);
        (first..=self.depth).collect()
    }

    pub fn with_base_scale(mut self, include: bool) -> Self {
        self.include_base_scale = include;
        self
    }

    /// Explicit per-level lengths (used by the absolute scale policy, where
    /// lengths do not follow the ratio schedule). Pooling handles arbitrary
    /// targets; the strided-conv variant requires the ratio schedule.
    pub fn from_lengths(n: usize, r: usize, lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(MahaError::Config("schedule needs at least one level".into()));
        }
        let mut prev = n;
        for (i, &len) in lengths.iter().enumerate() {
            if len >= prev {
                return Err(MahaError::Config(format!(
                    "lengths must be strictly decreasing from n={n}: level {} has {len} after {prev}",
                    i + 1
                )));
            }
            prev = len;
        }
        if *lengths.last().unwrap() < 2 {
            return Err(MahaError::Config("coarsest scale must have at least 2 tokens".into()));
        }
        Ok(Self { n, r, depth: lengths.len(), lengths, include_base_scale: false })
    }
}

/// Builds the schedule by repeated floor division. Fails when the coarsest
/// level would drop below 2 tokens, suggesting the largest feasible depth.
pub fn make_schedule(n: usize, r: usize, depth: usize) -> Result<ScaleSchedule> {
    if r < 2 {
        return Err(MahaError::Config(format!("compression ratio must be >= 2, got {r}")));
    }
    if depth == 0 {
        return Err(MahaError::Config("schedule depth must be >= 1".into()));
    }
    let mut lengths = Vec::with_capacity(depth);
    let mut cur = n;
    for _ in 0..depth {
        cur /= r;
        lengths.push(cur);
    }
    if *lengths.last().unwrap() < 2 {
        let max_feasible = max_feasible_depth(n, r);
        return Err(MahaError::Config(format!(
            "n={n} is too short for depth {depth} at ratio {r} (coarsest scale must have >= 2 \
             tokens); max feasible depth is {max_feasible}"
        )));
    }
    Ok(ScaleSchedule { n, r, depth, lengths, include_base_scale: false })
}

fn max_feasible_depth(n: usize, r: usize) -> usize {
    let mut cur = n;
    let mut depth = 0;
    while cur / r >= 2 {
        cur /= r;
        depth += 1;
    }
    depth
}

/// Learnable downsampling parameters: one kernel per level for the
/// strided-conv variant, nothing for adaptive pooling.
#[derive(Debug, Clone)]
pub struct DownsampleParams {
    pub kind: DownsampleKind,
    /// `kernels[l-1]` is applied at level `l`. Empty for pooling.
    pub kernels: Vec<ConvKernel>,
}

impl DownsampleParams {
    pub fn pool() -> Self {
        Self { kind: DownsampleKind::AdaptivePool, kernels: Vec::new() }
    }

    pub fn strided(kernels: Vec<ConvKernel>) -> Self {
        Self { kind: DownsampleKind::StridedConv, kernels }
    }

    pub fn init(
        kind: DownsampleKind,
        depth: usize,
        d: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        match kind {
            DownsampleKind::AdaptivePool => Self::pool(),
            DownsampleKind::StridedConv => Self::strided(
                (0..depth).map(|_| ConvKernel::init_uniform(DEFAULT_KERNEL, d, d, rng)).collect(),
            ),
        }
    }

    fn kernel_at(&self, level: usize) -> Result<&ConvKernel> {
        self.kernels.get(level - 1).ok_or_else(|| {
            MahaError::Config(format!("no downsampling kernel for level {level}"))
        })
    }
}

/// Applies the level-`level` downsampling operator (levels are 1-based).
pub fn downsample(
    x: &SeqMatrix,
    level: usize,
    params: &DownsampleParams,
    schedule: &ScaleSchedule,
) -> Result<SeqMatrix> {
    if level == 0 || level > schedule.depth {
        return Err(MahaError::Config(format!(
            "downsample level {level} outside 1..={}",
            schedule.depth
        )));
    }
    if x.rows() != schedule.len_at(level - 1) {
        return Err(MahaError::Shape(format!(
            "downsample level {level}: input has {} rows, schedule expects {}",
            x.rows(),
            schedule.len_at(level - 1)
        )));
    }
    let target = schedule.len_at(level);
    let out = match params.kind {
        DownsampleKind::AdaptivePool => adaptive_max_pool(x, target)?,
        DownsampleKind::StridedConv => conv1d(x, params.kernel_at(level)?, schedule.r, 1)?,
    };
    if out.rows() != target {
        return Err(MahaError::Shape(format!(
            "downsample level {level}: produced {} rows, schedule expects {target} \
             (strided conv requires the ratio schedule)",
            out.rows()
        )));
    }
    Ok(out)
}

/// Backward rule for one `downsample` application. Returns the input gradient
/// and, for the conv variant, the kernel gradient.
pub fn downsample_backward(
    x: &SeqMatrix,
    level: usize,
    params: &DownsampleParams,
    schedule: &ScaleSchedule,
    grad_out: &SeqMatrix,
) -> Result<(SeqMatrix, Option<ConvKernel>)> {
    match params.kind {
        DownsampleKind::AdaptivePool => {
            let g = adaptive_max_pool_backward(x, schedule.len_at(level), grad_out)?;
            Ok((g, None))
        }
        DownsampleKind::StridedConv => {
            let (gx, gk) = conv1d_backward(x, params.kernel_at(level)?, schedule.r, 1, grad_out)?;
            Ok((gx, Some(gk)))
        }
    }
}

/// The scale pyramid `X_1..X_L`, with the full-resolution input retained.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    pub base: SeqMatrix,
    pub levels: Vec<SeqMatrix>,
    pub schedule: ScaleSchedule,
    pub kind: DownsampleKind,
}

impl ScalePyramid {
    /// Representation at pyramid level `l` (`0` = base).
    pub fn level(&self, l: usize) -> &SeqMatrix {
        if l == 0 {
            &self.base
        } else {
            &self.levels[l - 1]
        }
    }

    /// The scale representations attention runs over, ascending by level.
    pub fn attention_inputs(&self) -> Vec<&SeqMatrix> {
        self.schedule.attention_levels().iter().map(|&l| self.level(l)).collect()
    }
}

/// Successive downsampling of `x` through every level of the schedule.
pub fn build_pyramid(
    x: &SeqMatrix,
    params: &DownsampleParams,
    schedule: &ScaleSchedule,
) -> Result<ScalePyramid> {
    if x.rows() != schedule.n {
        return Err(MahaError::Shape(format!(
            "build_pyramid: input has {} rows, schedule expects {}",
            x.rows(),
            schedule.n
        )));
    }
    let mut levels = Vec::with_capacity(schedule.depth);
    let mut cur = x.clone();
    for level in 1..=schedule.depth {
        cur = downsample(&cur, level, params, schedule)?;
        levels.push(cur.clone());
    }
    Ok(ScalePyramid { base: x.clone(), levels, schedule: schedule.clone(), kind: params.kind })
}
