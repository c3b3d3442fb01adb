//! Per-scale scaled dot-product attention with scale-specific Q/K projections
//! and one value projection shared across scales: the base values are
//! projected once at full resolution and downsampled to each scale instead of
//! being re-projected.

use rand_chacha::ChaCha8Rng;

use crate::aggregate::{nn_upsample, nn_upsample_backward};
use crate::error::{MahaError, Result};
use crate::pyramid::{downsample, downsample_backward, DownsampleKind, DownsampleParams};
use crate::pyramid::{ScalePyramid, ScaleSchedule};
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward};
use crate::tensor::{ConvKernel, SeqMatrix};

/// Projection parameters: one `(W_q, W_k)` pair per attention scale, a single
/// shared `W_v`.
#[derive(Debug, Clone)]
pub struct ScaleAttnParams {
    pub w_q: Vec<SeqMatrix>,
    pub w_k: Vec<SeqMatrix>,
    pub w_v: SeqMatrix,
    pub d_k: usize,
    pub d_v: usize,
}

impl ScaleAttnParams {
    pub fn init(num_scales: usize, d: usize, d_k: usize, d_v: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_q = (0..num_scales).map(|_| SeqMatrix::init_uniform(d, d_k, d, rng)).collect();
        let w_k = (0..num_scales).map(|_| SeqMatrix::init_uniform(d, d_k, d, rng)).collect();
        let w_v = SeqMatrix::init_uniform(d, d_v, d, rng);
        Self { w_q, w_k, w_v, d_k, d_v }
    }

    pub fn num_scales(&self) -> usize {
        self.w_q.len()
    }

    /// Q/K parameters grow with the number of scales; value parameters do not.
    pub fn param_count(&self) -> usize {
        let d = self.w_v.rows();
        self.num_scales() * 2 * d * self.d_k + d * self.d_v
    }
}

/// Per-scale attention matrices, outputs, and their full-length images.
#[derive(Debug, Clone)]
pub struct ScaleOutputs {
    /// Row-stochastic `(n_l x n_l)` attention matrices.
    pub attn: Vec<SeqMatrix>,
    /// `(n_l x d_v)` per-scale outputs `O_l = A_l V_l`.
    pub outputs: Vec<SeqMatrix>,
    /// `(n x d_v)` nearest-neighbor upsampled outputs.
    pub upsampled: Vec<SeqMatrix>,
}

/// The shared value pathway: `V_base = X W_v` and its downsampled chain.
#[derive(Debug, Clone)]
pub struct SharedValues {
    pub base: SeqMatrix,
    /// `levels[l-1]` holds the values at pyramid level `l`.
    pub levels: Vec<SeqMatrix>,
}

/// `softmax(Q K^T / sqrt(d_k))`, row-stochastic.
pub fn scaled_dot_attention(q: &SeqMatrix, k: &SeqMatrix, d_k: usize) -> Result<SeqMatrix> {
    if q.cols() != d_k || k.cols() != d_k {
        return Err(MahaError::Shape(format!(
            "scaled_dot_attention: q {}x{}, k {}x{}, expected {d_k} columns",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols()
        )));
    }
    if q.rows() != k.rows() {
        return Err(MahaError::Shape(format!(
            "scaled_dot_attention: self-attention needs matching lengths, got {} vs {}",
            q.rows(),
            k.rows()
        )));
    }
    let scores = matmul_nt(q, k)?.scale(1.0 / (d_k as f64).sqrt());
    scores.ensure_finite("attention scores")?;
    Ok(softmax_rows(&scores))
}

/// Projects values once at full resolution and downsamples them through every
/// pyramid level with the same operators that built the pyramid.
pub fn shared_values(
    x0: &SeqMatrix,
    w_v: &SeqMatrix,
    params: &DownsampleParams,
    schedule: &ScaleSchedule,
) -> Result<SharedValues> {
    if params.kind == DownsampleKind::StridedConv && w_v.cols() != w_v.rows() {
        return Err(MahaError::Config(format!(
            "strided-conv downsampling of values requires d_v == d, got {} vs {}",
            w_v.cols(),
            w_v.rows()
        )));
    }
    let base = matmul(x0, w_v)?;
    let mut levels = Vec::with_capacity(schedule.depth);
    let mut cur = base.clone();
    for level in 1..=schedule.depth {
        cur = downsample(&cur, level, params, schedule)?;
        levels.push(cur.clone());
    }
    Ok(SharedValues { base, levels })
}

/// Backward through the value pathway.
///
/// `d_levels[l-1]` is the gradient arriving at the level-`l` values (zeros
/// where a level feeds no attention scale) and `d_base` the gradient arriving
/// directly at `V_base` (the fit-target path). Returns gradients for `x0`,
/// `w_v`, and the downsampling kernels (empty for pooling).
pub fn shared_values_backward(
    x0: &SeqMatrix,
    w_v: &SeqMatrix,
    params: &DownsampleParams,
    schedule: &ScaleSchedule,
    vals: &SharedValues,
    d_levels: Vec<SeqMatrix>,
    d_base: SeqMatrix,
) -> Result<(SeqMatrix, SeqMatrix, Vec<ConvKernel>)> {
    if d_levels.len() != schedule.depth {
        return Err(MahaError::Shape(format!(
            "shared_values_backward: {} level grads for depth {}",
            d_levels.len(),
            schedule.depth
        )));
    }
    let mut d_kernels: Vec<ConvKernel> = params
        .kernels
        .iter()
        .map(|k| ConvKernel::zeros(k.k, k.d_in, k.d_out))
        .collect();
    let mut d_base = d_base;
    let mut d_levels = d_levels;
    for level in (1..=schedule.depth).rev() {
        let input = if level == 1 { &vals.base } else { &vals.levels[level - 2] };
        let grad = d_levels[level - 1].clone();
        let (d_in, d_kern) = downsample_backward(input, level, params, schedule, &grad)?;
        if let Some(dk) = d_kern {
            for (a, &b) in d_kernels[level - 1].data_mut().iter_mut().zip(dk.data()) {
                *a += b;
            }
        }
        if level == 1 {
            d_base.axpy(1.0, &d_in)?;
        } else {
            d_levels[level - 2].axpy(1.0, &d_in)?;
        }
    }
    let (d_x0, d_wv) = crate::tensor::matmul_backward(x0, w_v, &d_base)?;
    Ok((d_x0, d_wv, d_kernels))
}

/// Per-scale forward record needed by the backward pass.
#[derive(Debug, Clone)]
pub struct AttnTape {
    pub q: Vec<SeqMatrix>,
    pub k: Vec<SeqMatrix>,
}

/// Gradients produced by [`attention_backward`].
#[derive(Debug, Clone)]
pub struct AttnGrads {
    pub d_inputs: Vec<SeqMatrix>,
    pub d_values: Vec<SeqMatrix>,
    pub d_wq: Vec<SeqMatrix>,
    pub d_wk: Vec<SeqMatrix>,
}

/// Attention over an explicit list of scale inputs and their values.
/// `inputs[s]` and `values[s]` must have matching lengths.
pub fn attention_forward(
    inputs: &[SeqMatrix],
    values: &[SeqMatrix],
    params: &ScaleAttnParams,
    n_full: usize,
) -> Result<(ScaleOutputs, AttnTape)> {
    if inputs.len() != params.num_scales() || values.len() != inputs.len() {
        return Err(MahaError::Shape(format!(
            "attention_forward: {} inputs, {} values, {} projection pairs",
            inputs.len(),
            values.len(),
            params.num_scales()
        )));
    }
    let mut attn = Vec::with_capacity(inputs.len());
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut upsampled = Vec::with_capacity(inputs.len());
    let mut qs = Vec::with_capacity(inputs.len());
    let mut ks = Vec::with_capacity(inputs.len());
    for (s, (x, v)) in inputs.iter().zip(values).enumerate() {
        if v.rows() != x.rows() {
            return Err(MahaError::Shape(format!(
                "attention_forward scale {s}: input has {} rows, values have {}",
                x.rows(),
                v.rows()
            )));
        }
        let q = matmul(x, &params.w_q[s])?;
        let k = matmul(x, &params.w_k[s])?;
        let a = scaled_dot_attention(&q, &k, params.d_k)?;
        let o = matmul(&a, v)?;
        upsampled.push(nn_upsample(&o, n_full)?);
        attn.push(a);
        outputs.push(o);
        qs.push(q);
        ks.push(k);
    }
    Ok((ScaleOutputs { attn, outputs, upsampled }, AttnTape { q: qs, k: ks }))
}

/// Backward of [`attention_forward`] given gradients on the upsampled outputs.
pub fn attention_backward(
    inputs: &[SeqMatrix],
    values: &[SeqMatrix],
    params: &ScaleAttnParams,
    outs: &ScaleOutputs,
    tape: &AttnTape,
    d_upsampled: &[SeqMatrix],
) -> Result<AttnGrads> {
    let inv_sqrt = 1.0 / (params.d_k as f64).sqrt();
    let mut grads = AttnGrads {
        d_inputs: Vec::with_capacity(inputs.len()),
        d_values: Vec::with_capacity(inputs.len()),
        d_wq: Vec::with_capacity(inputs.len()),
        d_wk: Vec::with_capacity(inputs.len()),
    };
    for s in 0..inputs.len() {
        let x = &inputs[s];
        let v = &values[s];
        let a = &outs.attn[s];
        let d_o = nn_upsample_backward(outs.outputs[s].rows(), &d_upsampled[s]);
        // O = A V
        let d_a = matmul_nt(&d_o, v)?;
        let d_v = matmul_tn(a, &d_o)?;
        // A = softmax(Q K^T / sqrt(d_k))
        let d_scores = softmax_rows_backward(a, &d_a)?;
        let d_q = matmul(&d_scores, &tape.k[s])?.scale(inv_sqrt);
        let d_k = matmul_tn(&d_scores, &tape.q[s])?.scale(inv_sqrt);
        // Q = X W_q, K = X W_k
        let mut d_x = matmul_nt(&d_q, &params.w_q[s])?;
        d_x.axpy(1.0, &matmul_nt(&d_k, &params.w_k[s])?)?;
        grads.d_wq.push(matmul_tn(x, &d_q)?);
        grads.d_wk.push(matmul_tn(x, &d_k)?);
        grads.d_inputs.push(d_x);
        grads.d_values.push(d_v);
    }
    Ok(grads)
}

/// Attention over the pyramid scales with the shared value pathway, the plain
/// composition without dilated blocks or gating.
pub fn maha_attention(
    pyramid: &ScalePyramid,
    params: &ScaleAttnParams,
    down: &DownsampleParams,
) -> Result<ScaleOutputs> {
    let schedule = &pyramid.schedule;
    if params.num_scales() != schedule.num_attention_scales() {
        return Err(MahaError::Shape(format!(
            "maha_attention: {} projection pairs for {} attention scales",
            params.num_scales(),
            schedule.num_attention_scales()
        )));
    }
    let vals = shared_values(&pyramid.base, &params.w_v, down, schedule)?;
    let inputs: Vec<SeqMatrix> =
        pyramid.attention_inputs().into_iter().cloned().collect();
    let values: Vec<SeqMatrix> = schedule
        .attention_levels()
        .iter()
        .map(|&l| if l == 0 { vals.base.clone() } else { vals.levels[l - 1].clone() })
        .collect();
    let (outs, _) = attention_forward(&inputs, &values, params, schedule.n)?;
    Ok(outs)
}
