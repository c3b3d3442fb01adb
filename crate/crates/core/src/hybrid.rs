//! The full layer: gated pyramid construction, per-scale dilated-convolution
//! blocks, shared-value attention, optimization-driven aggregation, and a
//! residual connection. Forward passes can record a tape; the backward pass
//! replays it to produce gradients for every parameter group and the input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{
    aggregate_outputs, build_target, co_solve_traced, mean_solve, ne_solve, nn_upsample,
    nn_upsample_backward, AggMethod, AggWeights, CoTrace, SolverConfig, TargetKind,
};
use crate::attention::{
    attention_backward, attention_forward, shared_values, shared_values_backward, AttnTape,
    ScaleAttnParams, ScaleOutputs, SharedValues,
};
use crate::error::{MahaError, Result};
use crate::pyramid::{downsample, downsample_backward, DownsampleParams, ScaleSchedule};
use crate::tensor::{
    conv1d, conv1d_backward, matmul, matmul_backward, relu_backward, sigmoid,
    sigmoid_backward, ConvKernel, SeqMatrix,
};

/// Everything the layer learns, plus its wiring switches.
#[derive(Debug, Clone)]
pub struct HybridParams {
    /// One dilated conv kernel per attention scale (`dilated` on).
    pub dilated_kernels: Vec<ConvKernel>,
    /// Per-scale bias, one entry per feature.
    pub dilated_bias: Vec<Vec<f64>>,
    /// Shared cross-scale gating matrix.
    pub w_g: SeqMatrix,
    pub attn: ScaleAttnParams,
    pub down: DownsampleParams,
    pub solver: SolverConfig,
    /// Cross-scale gating on/off.
    pub gating: bool,
    /// Dilated local-context blocks on/off (off restores the plain
    /// projections-from-raw-scales composition).
    pub dilated: bool,
    pub dilation: usize,
}

impl HybridParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        schedule: &ScaleSchedule,
        d: usize,
        d_k: usize,
        kind: crate::pyramid::DownsampleKind,
        solver: SolverConfig,
        gating: bool,
        dilated: bool,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scales = schedule.num_attention_scales();
        Self {
            dilated_kernels: (0..scales)
                .map(|_| ConvKernel::init_uniform(crate::pyramid::DEFAULT_KERNEL, d, d, rng))
                .collect(),
            dilated_bias: (0..scales)
                .map(|_| {
                    let scale = 1.0 / (d as f64).sqrt();
                    (0..d).map(|_| rng.gen_range(-scale..scale)).collect()
                })
                .collect(),
            w_g: SeqMatrix::init_uniform(d, d, d, rng),
            attn: ScaleAttnParams::init(scales, d, d_k, d, rng),
            down: DownsampleParams::init(kind, schedule.depth, d, rng),
            solver,
            gating,
            dilated,
            dilation,
        }
    }

    fn validate(&self, schedule: &ScaleSchedule) -> Result<()> {
        let scales = schedule.num_attention_scales();
        if self.attn.num_scales() != scales {
            return Err(MahaError::Config(format!(
                "{} projection pairs for {scales} attention scales",
                self.attn.num_scales()
            )));
        }
        if self.dilated && (self.dilated_kernels.len() != scales || self.dilated_bias.len() != scales)
        {
            return Err(MahaError::Config(format!(
                "{} dilated kernels for {scales} attention scales",
                self.dilated_kernels.len()
            )));
        }
        if self.dilation == 0 {
            return Err(MahaError::Config("dilation must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of one layer application.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// `x + O*`, same shape as the input.
    pub y: SeqMatrix,
    pub weights: AggWeights,
    /// Per-scale attention matrices and outputs, retained for inspection.
    pub scales: ScaleOutputs,
}

/// Residual dilated local-context block: `x + relu(conv(x) + bias)`.
pub fn dilated_block(
    x_l: &SeqMatrix,
    kernel: &ConvKernel,
    bias: &[f64],
    dilation: usize,
) -> Result<SeqMatrix> {
    Ok(dilated_block_traced(x_l, kernel, bias, dilation)?.0)
}

fn dilated_block_traced(
    x_l: &SeqMatrix,
    kernel: &ConvKernel,
    bias: &[f64],
    dilation: usize,
) -> Result<(SeqMatrix, SeqMatrix)> {
    let mut pre = conv1d(x_l, kernel, 1, dilation)?;
    if bias.len() != pre.cols() {
        return Err(MahaError::Shape(format!(
            "dilated_block: bias length {} vs {} channels",
            bias.len(),
            pre.cols()
        )));
    }
    for i in 0..pre.rows() {
        for (v, b) in pre.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
    let mut x_prime = x_l.clone();
    x_prime.axpy(1.0, &crate::tensor::relu(&pre))?;
    Ok((x_prime, pre))
}

/// Sigmoid gate computed at scale `l`, upsampled to the finer length, applied
/// multiplicatively to the finer representation.
pub fn cross_scale_gate(x_l: &SeqMatrix, x_prev: &SeqMatrix, w_g: &SeqMatrix) -> Result<SeqMatrix> {
    if x_l.cols() != w_g.rows() {
        return Err(MahaError::Shape(format!(
            "cross_scale_gate: features {} vs gate matrix {}x{}",
            x_l.cols(),
            w_g.rows(),
            w_g.cols()
        )));
    }
    if x_l.rows() > x_prev.rows() {
        return Err(MahaError::Shape(format!(
            "cross_scale_gate: coarse scale has {} rows, finer has {}",
            x_l.rows(),
            x_prev.rows()
        )));
    }
    let gate = sigmoid(&matmul(x_l, w_g)?);
    let gate_up = nn_upsample(&gate, x_prev.rows())?;
    gate_up.hadamard(x_prev)
}

/// Forward record for [`maha_layer_backward`].
#[derive(Debug, Clone)]
pub struct LayerTape {
    x: SeqMatrix,
    // Pyramid construction, per level 1..=L.
    py_inputs: Vec<SeqMatrix>,
    py_raw: Vec<Option<SeqMatrix>>,
    py_gate_sig: Vec<Option<SeqMatrix>>,
    py_gate_up: Vec<Option<SeqMatrix>>,
    py_gated: Vec<Option<SeqMatrix>>,
    // Attention scales.
    scale_inputs: Vec<SeqMatrix>,
    pre_act: Vec<Option<SeqMatrix>>,
    x_prime: Vec<SeqMatrix>,
    values: SharedValues,
    attn_values: Vec<SeqMatrix>,
    attn_tape: AttnTape,
    outs: ScaleOutputs,
    target: SeqMatrix,
    weights: AggWeights,
    co_trace: Option<CoTrace>,
}

impl LayerTape {
    /// Smallest |pre-activation| over all dilated blocks; near-zero values sit
    /// on a ReLU kink.
    pub fn min_relu_margin(&self) -> f64 {
        self.pre_act
            .iter()
            .flatten()
            .flat_map(|m| m.data())
            .fold(f64::INFINITY, |a, &v| a.min(v.abs()))
    }

    pub fn co_trace(&self) -> Option<&CoTrace> {
        self.co_trace.as_ref()
    }
}

/// Gradients for every learnable group of the layer, plus the input.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_x: SeqMatrix,
    pub d_dilated_kernels: Vec<ConvKernel>,
    pub d_dilated_bias: Vec<Vec<f64>>,
    pub d_wg: SeqMatrix,
    pub d_wq: Vec<SeqMatrix>,
    pub d_wk: Vec<SeqMatrix>,
    pub d_wv: SeqMatrix,
    pub d_down_kernels: Vec<ConvKernel>,
}

/// One full layer application: pyramid (optionally gated), dilated blocks,
/// shared-value attention, upsampling, weight solving, aggregation, residual.
pub fn maha_layer(
    x: &SeqMatrix,
    params: &HybridParams,
    schedule: &ScaleSchedule,
    method: AggMethod,
) -> Result<LayerOutput> {
    maha_layer_traced(x, params, schedule, method).map(|(out, _)| out)
}

pub fn maha_layer_traced(
    x: &SeqMatrix,
    params: &HybridParams,
    schedule: &ScaleSchedule,
    method: AggMethod,
) -> Result<(LayerOutput, LayerTape)> {
    params.validate(schedule)?;
    if x.rows() != schedule.n {
        return Err(MahaError::Shape(format!(
            "maha_layer: input has {} rows, schedule expects {}",
            x.rows(),
            schedule.n
        )));
    }
    x.ensure_finite("layer input")?;

    // Pyramid with optional cross-scale gating. The gate computed at scale l
    // modulates the finer carrier, which is then re-downsampled, so coarser
    // scales see the gated signal.
    let depth = schedule.depth;
    let mut py_inputs = Vec::with_capacity(depth);
    let mut py_raw = Vec::with_capacity(depth);
    let mut py_gate_sig = Vec::with_capacity(depth);
    let mut py_gate_up = Vec::with_capacity(depth);
    let mut py_gated = Vec::with_capacity(depth);
    let mut levels: Vec<SeqMatrix> = Vec::with_capacity(depth);
    let mut carrier = x.clone();
    for level in 1..=depth {
        py_inputs.push(carrier.clone());
        let raw = downsample(&carrier, level, &params.down, schedule)?;
        let x_l = if params.gating {
            let gate_sig = sigmoid(&matmul(&raw, &params.w_g)?);
            let gate_up = nn_upsample(&gate_sig, carrier.rows())?;
            let gated = gate_up.hadamard(&carrier)?;
            let x_l = downsample(&gated, level, &params.down, schedule)?;
            py_raw.push(Some(raw));
            py_gate_sig.push(Some(gate_sig));
            py_gate_up.push(Some(gate_up));
            py_gated.push(Some(gated));
            x_l
        } else {
            py_raw.push(None);
            py_gate_sig.push(None);
            py_gate_up.push(None);
            py_gated.push(None);
            raw
        };
        x_l.ensure_finite(&format!("pyramid level {level}"))?;
        levels.push(x_l.clone());
        carrier = x_l;
    }

    // Shared value pathway (ungated).
    let values = shared_values(x, &params.attn.w_v, &params.down, schedule)?;
    values.base.ensure_finite("value projection")?;

    // Dilated local-context blocks on each attention scale.
    let attn_levels = schedule.attention_levels();
    let mut scale_inputs = Vec::with_capacity(attn_levels.len());
    let mut pre_act = Vec::with_capacity(attn_levels.len());
    let mut x_prime = Vec::with_capacity(attn_levels.len());
    let mut attn_values = Vec::with_capacity(attn_levels.len());
    for (s, &level) in attn_levels.iter().enumerate() {
        let input = if level == 0 { x.clone() } else { levels[level - 1].clone() };
        let (xp, pre) = if params.dilated {
            let (xp, pre) = dilated_block_traced(
                &input,
                &params.dilated_kernels[s],
                &params.dilated_bias[s],
                params.dilation,
            )?;
            (xp, Some(pre))
        } else {
            (input.clone(), None)
        };
        xp.ensure_finite(&format!("dilated block scale {s}"))?;
        attn_values
            .push(if level == 0 { values.base.clone() } else { values.levels[level - 1].clone() });
        scale_inputs.push(input);
        pre_act.push(pre);
        x_prime.push(xp);
    }

    let (outs, attn_tape) = attention_forward(&x_prime, &attn_values, &params.attn, schedule.n)?;
    for (s, u) in outs.upsampled.iter().enumerate() {
        u.ensure_finite(&format!("attention scale {s}"))?;
    }

    let target = build_target(x, &values.base, &outs.upsampled, params.solver.target)?;
    let (weights, co_trace) = match method {
        AggMethod::Co => {
            let (w, trace) = co_solve_traced(&outs.upsampled, &target, &params.solver)?;
            (w, Some(trace))
        }
        AggMethod::Ne => (ne_solve(&outs.upsampled, &target, &params.solver)?, None),
        AggMethod::Mean => (mean_solve(&outs.upsampled, &target)?, None),
    };
    let o_star = aggregate_outputs(&outs.upsampled, &weights.w)?;
    let y = x.add(&o_star)?;
    y.ensure_finite("layer output")?;

    let tape = LayerTape {
        x: x.clone(),
        py_inputs,
        py_raw,
        py_gate_sig,
        py_gate_up,
        py_gated,
        scale_inputs,
        pre_act,
        x_prime,
        values,
        attn_values,
        attn_tape,
        outs: outs.clone(),
        target,
        weights: weights.clone(),
        co_trace,
    };
    Ok((LayerOutput { y, weights, scales: outs }, tape))
}

/// Backward through the whole layer.
///
/// The CO weight solve is differentiated by replaying its unrolled iteration;
/// NE weights use the implicit KKT gradient at the certified equilibrium.
/// The mean-of-scales target is treated as a constant of the backward pass.
pub fn maha_layer_backward(
    tape: &LayerTape,
    params: &HybridParams,
    schedule: &ScaleSchedule,
    d_y: &SeqMatrix,
) -> Result<LayerGrads> {
    let depth = schedule.depth;
    let attn_levels = schedule.attention_levels();
    let num_scales = attn_levels.len();
    let d = tape.x.cols();

    let mut d_x = d_y.clone();

    // y = x + O*, O* = sum w_l C_l.
    let mut d_upsampled: Vec<SeqMatrix> =
        tape.weights.w.iter().map(|&w| d_y.scale(w)).collect();
    let mut d_target = SeqMatrix::zeros(tape.target.rows(), tape.target.cols());
    let solver_path = match (&tape.co_trace, tape.weights.method) {
        (Some(trace), _) => {
            let d_w: Vec<f64> = tape
                .outs
                .upsampled
                .iter()
                .map(|c| c.frob_inner(d_y))
                .collect::<Result<_>>()?;
            Some(crate::aggregate::co_solve_backward(
                trace,
                &tape.outs.upsampled,
                &tape.target,
                &params.solver,
                &d_w,
            )?)
        }
        (None, AggMethod::Ne) => {
            let d_w: Vec<f64> = tape
                .outs
                .upsampled
                .iter()
                .map(|c| c.frob_inner(d_y))
                .collect::<Result<_>>()?;
            Some(crate::aggregate::ne_solve_backward(
                &tape.outs.upsampled,
                &tape.target,
                &tape.weights.w,
                &d_w,
            )?)
        }
        _ => None,
    };
    if let Some((d_cands, d_t)) = solver_path {
        for (acc, g) in d_upsampled.iter_mut().zip(&d_cands) {
            acc.axpy(1.0, g)?;
        }
        d_target = d_t;
    }

    // Target path: only the value pathway is differentiated.
    let mut d_v_base = match params.solver.target {
        TargetKind::ValuePathway => d_target,
        TargetKind::MeanOfScales => SeqMatrix::zeros(tape.target.rows(), tape.target.cols()),
    };

    let attn_grads = attention_backward(
        &tape.x_prime,
        &tape.attn_values,
        &params.attn,
        &tape.outs,
        &tape.attn_tape,
        &d_upsampled,
    )?;

    // Dilated blocks: x' = x + relu(conv(x) + bias).
    let mut d_dilated_kernels: Vec<ConvKernel> = params
        .dilated_kernels
        .iter()
        .map(|k| ConvKernel::zeros(k.k, k.d_in, k.d_out))
        .collect();
    let mut d_dilated_bias: Vec<Vec<f64>> =
        params.dilated_bias.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut d_levels: Vec<SeqMatrix> = (1..=depth)
        .map(|l| SeqMatrix::zeros(schedule.len_at(l), d))
        .collect();
    let mut d_value_levels: Vec<SeqMatrix> = (1..=depth)
        .map(|l| SeqMatrix::zeros(schedule.len_at(l), params.attn.d_v))
        .collect();

    for s in (0..num_scales).rev() {
        let level = attn_levels[s];
        let d_scale_input = if params.dilated {
            let pre = tape.pre_act[s].as_ref().expect("dilated tape entry");
            let d_pre = relu_backward(pre, &attn_grads.d_inputs[s])?;
            for i in 0..d_pre.rows() {
                for (acc, &g) in d_dilated_bias[s].iter_mut().zip(d_pre.row(i)) {
                    *acc += g;
                }
            }
            let (d_in_conv, d_kern) = conv1d_backward(
                &tape.scale_inputs[s],
                &params.dilated_kernels[s],
                1,
                params.dilation,
                &d_pre,
            )?;
            for (acc, &g) in d_dilated_kernels[s].data_mut().iter_mut().zip(d_kern.data()) {
                *acc += g;
            }
            let mut d_in = attn_grads.d_inputs[s].clone();
            d_in.axpy(1.0, &d_in_conv)?;
            d_in
        } else {
            attn_grads.d_inputs[s].clone()
        };
        if level == 0 {
            d_x.axpy(1.0, &d_scale_input)?;
            d_v_base.axpy(1.0, &attn_grads.d_values[s])?;
        } else {
            d_levels[level - 1].axpy(1.0, &d_scale_input)?;
            d_value_levels[level - 1].axpy(1.0, &attn_grads.d_values[s])?;
        }
    }

    // Value chain.
    let (d_x_values, d_wv, mut d_down_kernels) = shared_values_backward(
        &tape.x,
        &params.attn.w_v,
        &params.down,
        schedule,
        &tape.values,
        d_value_levels,
        d_v_base,
    )?;
    d_x.axpy(1.0, &d_x_values)?;
    if d_down_kernels.is_empty() {
        d_down_kernels = params
            .down
            .kernels
            .iter()
            .map(|k| ConvKernel::zeros(k.k, k.d_in, k.d_out))
            .collect();
    }

    // Pyramid walk, coarsest level first.
    let mut d_wg = SeqMatrix::zeros(params.w_g.rows(), params.w_g.cols());
    for level in (1..=depth).rev() {
        let d_xl = d_levels[level - 1].clone();
        let d_carrier = if params.gating {
            let gated = tape.py_gated[level - 1].as_ref().expect("gated tape entry");
            let raw = tape.py_raw[level - 1].as_ref().expect("raw tape entry");
            let gate_sig = tape.py_gate_sig[level - 1].as_ref().expect("gate tape entry");
            let gate_up = tape.py_gate_up[level - 1].as_ref().expect("gate tape entry");
            let z_prev = &tape.py_inputs[level - 1];

            let (d_gated, d_kern_a) =
                downsample_backward(gated, level, &params.down, schedule, &d_xl)?;
            let d_gate_up = d_gated.hadamard(z_prev)?;
            let mut d_carrier = d_gated.hadamard(gate_up)?;
            let d_gate_sig = nn_upsample_backward(gate_sig.rows(), &d_gate_up);
            let d_gate_pre = sigmoid_backward(gate_sig, &d_gate_sig)?;
            let (d_raw, d_wg_l) = matmul_backward(raw, &params.w_g, &d_gate_pre)?;
            d_wg.axpy(1.0, &d_wg_l)?;
            let (d_carrier_raw, d_kern_b) =
                downsample_backward(z_prev, level, &params.down, schedule, &d_raw)?;
            d_carrier.axpy(1.0, &d_carrier_raw)?;
            if let Some(dk) = d_kern_a {
                for (acc, &g) in d_down_kernels[level - 1].data_mut().iter_mut().zip(dk.data()) {
                    *acc += g;
                }
            }
            if let Some(dk) = d_kern_b {
                for (acc, &g) in d_down_kernels[level - 1].data_mut().iter_mut().zip(dk.data()) {
                    *acc += g;
                }
            }
            d_carrier
        } else {
            let (d_carrier, d_kern) = downsample_backward(
                &tape.py_inputs[level - 1],
                level,
                &params.down,
                schedule,
                &d_xl,
            )?;
            if let Some(dk) = d_kern {
                for (acc, &g) in d_down_kernels[level - 1].data_mut().iter_mut().zip(dk.data()) {
                    *acc += g;
                }
            }
            d_carrier
        };
        if level == 1 {
            d_x.axpy(1.0, &d_carrier)?;
        } else {
            d_levels[level - 2].axpy(1.0, &d_carrier)?;
        }
    }

    Ok(LayerGrads {
        d_x,
        d_dilated_kernels,
        d_dilated_bias,
        d_wg,
        d_wq: attn_grads.d_wq,
        d_wk: attn_grads.d_wk,
        d_wv,
        d_down_kernels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{make_schedule, DownsampleKind};
    use rand::SeedableRng;

    fn default_params(
        schedule: &ScaleSchedule,
        d: usize,
        d_k: usize,
        kind: DownsampleKind,
        seed: u64,
    ) -> HybridParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HybridParams::init(schedule, d, d_k, kind, SolverConfig::default(), true, true, 2, &mut rng)
    }

    #[test]
    fn dilated_block_zero_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = SeqMatrix::init_uniform(6, 3, 3, &mut rng);
        let k = ConvKernel::zeros(3, 3, 3);
        let y = dilated_block(&x, &k, &[0.0; 3], 2).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_block_doubles_nonnegative_input() {
        let x = SeqMatrix::from_rows(&[vec![1.0, 0.5], vec![2.0, 0.0], vec![0.25, 3.0]]).unwrap();
        let k = ConvKernel::center_identity(3, 2);
        let y = dilated_block(&x, &k, &[0.0; 2], 1).unwrap();
        assert_eq!(y, x.scale(2.0));
    }

    #[test]
    fn dilated_block_relu_kills_negative_preactivation() {
        let x = SeqMatrix::from_rows(&[vec![-1.0], vec![-2.0], vec![-0.5]]).unwrap();
        let k = ConvKernel::center_identity(3, 1);
        let y = dilated_block(&x, &k, &[0.0], 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn gate_zero_matrix_halves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_prev = SeqMatrix::init_uniform(8, 3, 3, &mut rng);
        let x_l = SeqMatrix::init_uniform(4, 3, 3, &mut rng);
        let y = cross_scale_gate(&x_l, &x_prev, &SeqMatrix::zeros(3, 3)).unwrap();
        for (a, b) in y.data().iter().zip(x_prev.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_same_length_no_upsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = SeqMatrix::init_uniform(4, 2, 2, &mut rng);
        let w_g = SeqMatrix::init_uniform(2, 2, 2, &mut rng);
        let y = cross_scale_gate(&x, &x, &w_g).unwrap();
        let manual = sigmoid(&matmul(&x, &w_g).unwrap()).hadamard(&x).unwrap();
        assert_eq!(y, manual);
    }

    #[test]
    fn gate_saturates_open() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x_prev = SeqMatrix::init_uniform(4, 2, 2, &mut rng);
        let x_l = SeqMatrix::filled(2, 2, 100.0);
        let w_g = SeqMatrix::identity(2);
        let y = cross_scale_gate(&x_l, &x_prev, &w_g).unwrap();
        for (a, b) in y.data().iter().zip(x_prev.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_value_projection_makes_layer_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let schedule = make_schedule(16, 2, 2).unwrap();
        let mut params = default_params(&schedule, 4, 2, DownsampleKind::AdaptivePool, 6);
        params.attn.w_v = SeqMatrix::zeros(4, 4);
        let x = SeqMatrix::init_uniform(16, 4, 4, &mut rng);
        let out = maha_layer(&x, &params, &schedule, AggMethod::Co).unwrap();
        for (a, b) in out.y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_level_uses_weight_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let schedule = make_schedule(8, 2, 1).unwrap();
        let params = default_params(&schedule, 4, 2, DownsampleKind::AdaptivePool, 8);
        let x = SeqMatrix::init_uniform(8, 4, 4, &mut rng);
        let out = maha_layer(&x, &params, &schedule, AggMethod::Co).unwrap();
        assert_eq!(out.weights.w, vec![1.0]);
        let expected = x.add(&out.scales.upsampled[0]).unwrap();
        assert_eq!(out.y, expected);
    }

    #[test]
    fn mean_equals_co_for_identical_candidates() {
        // A constant input under pooling with an identity value projection
        // yields bit-identical candidates at every scale (constant rows make
        // the row softmax exactly uniform and the short mantissa keeps the
        // attention-value sums exact), so the co weights stay exactly uniform
        // and both methods mix the same matrices identically.
        let schedule = make_schedule(16, 2, 2).unwrap();
        let mut params = default_params(&schedule, 4, 2, DownsampleKind::AdaptivePool, 9);
        params.dilated = false;
        params.attn.w_v = SeqMatrix::identity(4);
        let x = SeqMatrix::filled(16, 4, 0.75);
        let co = maha_layer(&x, &params, &schedule, AggMethod::Co).unwrap();
        let mean = maha_layer(&x, &params, &schedule, AggMethod::Mean).unwrap();
        assert_eq!(co.scales.upsampled[0], co.scales.upsampled[1]);
        assert_eq!(co.y, mean.y);
    }

    #[test]
    fn output_shape_and_finiteness_over_seeded_configs() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 16;
            let d = 4;
            let schedule = make_schedule(n, 2, 2).unwrap();
            let kind = if seed % 2 == 0 {
                DownsampleKind::AdaptivePool
            } else {
                DownsampleKind::StridedConv
            };
            let method = match seed % 3 {
                0 => AggMethod::Co,
                1 => AggMethod::Ne,
                _ => AggMethod::Mean,
            };
            let params = default_params(&schedule, d, 2, kind, seed.wrapping_add(1000));
            let x = SeqMatrix::init_uniform(n, d, d, &mut rng);
            let out = maha_layer(&x, &params, &schedule, method).unwrap();
            assert_eq!(out.y.rows(), n);
            assert_eq!(out.y.cols(), d);
            assert!(out.y.is_finite());
            let sum: f64 = out.weights.w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn include_base_scale_adds_full_resolution_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let schedule = make_schedule(8, 2, 1).unwrap().with_base_scale(true);
        let params = default_params(&schedule, 4, 2, DownsampleKind::AdaptivePool, 12);
        let x = SeqMatrix::init_uniform(8, 4, 4, &mut rng);
        let out = maha_layer(&x, &params, &schedule, AggMethod::Co).unwrap();
        assert_eq!(out.scales.attn.len(), 2);
        assert_eq!(out.scales.attn[0].rows(), 8);
        assert_eq!(out.scales.attn[1].rows(), 4);
    }
}
