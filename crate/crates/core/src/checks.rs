//! Named finite-difference suites: every backward rule in the crate checked
//! against central differences, from single primitives up to the full layer
//! and the unrolled weight solver.
//!
//! Nonsmooth operations (ReLU, max pooling, simplex projection) are checked
//! on instances drawn away from their kinks by seed rejection, so the
//! comparison is made where the analytic gradient is actually defined.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{
    aggregate_outputs, co_solve_backward, co_solve_traced, AggMethod, SolverConfig,
};
use crate::error::{MahaError, Result};
use crate::grad::{finite_diff_check, NamedCheck};
use crate::hybrid::{maha_layer, maha_layer_backward, maha_layer_traced, HybridParams};
use crate::pyramid::{make_schedule, DownsampleKind, ScaleSchedule};
use crate::tensor::{
    adaptive_max_pool, adaptive_max_pool_backward, conv1d, conv1d_backward, matmul,
    matmul_backward, matmul_tn, relu, relu_backward, sigmoid, sigmoid_backward, softmax_rows,
    softmax_rows_backward, ConvKernel, SeqMatrix,
};
use crate::toymodel::{layer_norm, layer_norm_backward, LN_EPS};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const LAYER_TOL: f64 = 1e-3;
const FD_EPS: f64 = 1e-6;
// Layer-level losses run through long pipelines whose coarse-scale gradients
// are small; a larger probe keeps the central difference above evaluation
// noise. Kink-rejection margins grow with it.
const LAYER_FD_EPS: f64 = 1e-4;
const KINK_MARGIN: f64 = 1e-4;
const LAYER_KINK_MARGIN: f64 = 2e-3;
const MAX_SEED_TRIES: u64 = 64;

/// Instance sizes for the layer-level suites.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub n: usize,
    pub d: usize,
    pub d_k: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { n: 16, d: 8, d_k: 4, depth: 2, seed: 42 }
    }
}

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SeqMatrix {
    SeqMatrix::init_uniform(rows, cols, 1, rng)
}

/// Loss `||out - r||^2` and its gradient on `out`.
fn sq_loss(out: &SeqMatrix, r: &SeqMatrix) -> Result<(f64, SeqMatrix)> {
    let diff = out.sub(r)?;
    Ok((diff.frob_norm_sq(), diff.scale(2.0)))
}

// ── Primitive suite ─────────────────────────────────────────────────

fn primitive_checks(seed: u64) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // matmul
    {
        let a = rand_mat(4, 3, &mut rng);
        let b = rand_mat(3, 5, &mut rng);
        let r = rand_mat(4, 5, &mut rng);
        let (_, d_out) = sq_loss(&matmul(&a, &b)?, &r)?;
        let (d_a, d_b) = matmul_backward(&a, &b, &d_out)?;
        let (b2, r2) = (b.clone(), r.clone());
        checks.push(NamedCheck::new(
            "matmul/lhs",
            finite_diff_check(
                move |p| {
                    let a = SeqMatrix::new(4, 3, p.to_vec())?;
                    Ok(sq_loss(&matmul(&a, &b2)?, &r2)?.0)
                },
                a.data(),
                d_a.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
        let (a2, r2) = (a.clone(), r.clone());
        checks.push(NamedCheck::new(
            "matmul/rhs",
            finite_diff_check(
                move |p| {
                    let b = SeqMatrix::new(3, 5, p.to_vec())?;
                    Ok(sq_loss(&matmul(&a2, &b)?, &r2)?.0)
                },
                b.data(),
                d_b.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
    }

    // softmax_rows
    {
        let x = rand_mat(4, 6, &mut rng).scale(2.0);
        let r = rand_mat(4, 6, &mut rng);
        let y = softmax_rows(&x);
        let (_, d_y) = sq_loss(&y, &r)?;
        let d_x = softmax_rows_backward(&y, &d_y)?;
        let r2 = r.clone();
        checks.push(NamedCheck::new(
            "softmax_rows/input",
            finite_diff_check(
                move |p| {
                    let x = SeqMatrix::new(4, 6, p.to_vec())?;
                    Ok(sq_loss(&softmax_rows(&x), &r2)?.0)
                },
                x.data(),
                d_x.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
    }

    // relu: entries kept away from the kink at zero.
    {
        let x = rand_mat(4, 6, &mut rng).map(|v| v.signum() * (0.1 + 0.9 * v.abs()));
        let r = rand_mat(4, 6, &mut rng);
        let (_, d_y) = sq_loss(&relu(&x), &r)?;
        let d_x = relu_backward(&x, &d_y)?;
        let r2 = r.clone();
        checks.push(NamedCheck::new(
            "relu/input",
            finite_diff_check(
                move |p| {
                    let x = SeqMatrix::new(4, 6, p.to_vec())?;
                    Ok(sq_loss(&relu(&x), &r2)?.0)
                },
                x.data(),
                d_x.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
    }

    // sigmoid
    {
        let x = rand_mat(4, 6, &mut rng).scale(2.0);
        let r = rand_mat(4, 6, &mut rng);
        let s = sigmoid(&x);
        let (_, d_y) = sq_loss(&s, &r)?;
        let d_x = sigmoid_backward(&s, &d_y)?;
        let r2 = r.clone();
        checks.push(NamedCheck::new(
            "sigmoid/input",
            finite_diff_check(
                move |p| {
                    let x = SeqMatrix::new(4, 6, p.to_vec())?;
                    Ok(sq_loss(&sigmoid(&x), &r2)?.0)
                },
                x.data(),
                d_x.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
    }

    // conv1d, strided and dilated
    for (name, rows, stride, dilation) in
        [("conv1d_strided", 9usize, 2usize, 1usize), ("conv1d_dilated", 8, 1, 2)]
    {
        let x = rand_mat(rows, 3, &mut rng);
        let kernel = ConvKernel::init_uniform(3, 3, 4, &mut rng);
        let out = conv1d(&x, &kernel, stride, dilation)?;
        let r = rand_mat(out.rows(), out.cols(), &mut rng);
        let (_, d_out) = sq_loss(&out, &r)?;
        let (d_x, d_k) = conv1d_backward(&x, &kernel, stride, dilation, &d_out)?;
        let (k2, r2) = (kernel.clone(), r.clone());
        checks.push(NamedCheck::new(
            format!("{name}/input"),
            finite_diff_check(
                move |p| {
                    let x = SeqMatrix::new(rows, 3, p.to_vec())?;
                    Ok(sq_loss(&conv1d(&x, &k2, stride, dilation)?, &r2)?.0)
                },
                x.data(),
                d_x.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
        let (x2, r2) = (x.clone(), r.clone());
        checks.push(NamedCheck::new(
            format!("{name}/kernel"),
            finite_diff_check(
                move |p| {
                    let k = ConvKernel::new(3, 3, 4, p.to_vec())?;
                    Ok(sq_loss(&conv1d(&x2, &k, stride, dilation)?, &r2)?.0)
                },
                kernel.data(),
                d_k.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
    }

    // adaptive max pool: windows must have a clear argmax.
    {
        let (x, r) = loop {
            let x = rand_mat(9, 4, &mut rng);
            if pool_margin(&x, 4) > 1e-2 {
                let r = rand_mat(4, 4, &mut rng);
                break (x, r);
            }
        };
        let out = adaptive_max_pool(&x, 4)?;
        let (_, d_out) = sq_loss(&out, &r)?;
        let d_x = adaptive_max_pool_backward(&x, 4, &d_out)?;
        let r2 = r.clone();
        checks.push(NamedCheck::new(
            "adaptive_max_pool/input",
            finite_diff_check(
                move |p| {
                    let x = SeqMatrix::new(9, 4, p.to_vec())?;
                    Ok(sq_loss(&adaptive_max_pool(&x, 4)?, &r2)?.0)
                },
                x.data(),
                d_x.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
    }

    // nn_upsample
    {
        let o = rand_mat(3, 4, &mut rng);
        let r = rand_mat(8, 4, &mut rng);
        let up = crate::aggregate::nn_upsample(&o, 8)?;
        let (_, d_out) = sq_loss(&up, &r)?;
        let d_o = crate::aggregate::nn_upsample_backward(3, &d_out);
        let r2 = r.clone();
        checks.push(NamedCheck::new(
            "nn_upsample/input",
            finite_diff_check(
                move |p| {
                    let o = SeqMatrix::new(3, 4, p.to_vec())?;
                    Ok(sq_loss(&crate::aggregate::nn_upsample(&o, 8)?, &r2)?.0)
                },
                o.data(),
                d_o.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
    }

    // scaled dot-product attention w.r.t. q and k
    {
        let q = rand_mat(5, 3, &mut rng);
        let k = rand_mat(5, 3, &mut rng);
        let r = rand_mat(5, 5, &mut rng);
        let a = crate::attention::scaled_dot_attention(&q, &k, 3)?;
        let (_, d_a) = sq_loss(&a, &r)?;
        let d_scores = softmax_rows_backward(&a, &d_a)?;
        let inv = 1.0 / 3.0f64.sqrt();
        let d_q = matmul(&d_scores, &k)?.scale(inv);
        let d_k = matmul_tn(&d_scores, &q)?.scale(inv);
        let (k2, r2) = (k.clone(), r.clone());
        checks.push(NamedCheck::new(
            "scaled_dot_attention/q",
            finite_diff_check(
                move |p| {
                    let q = SeqMatrix::new(5, 3, p.to_vec())?;
                    Ok(sq_loss(&crate::attention::scaled_dot_attention(&q, &k2, 3)?, &r2)?.0)
                },
                q.data(),
                d_q.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
        let (q2, r2) = (q.clone(), r.clone());
        checks.push(NamedCheck::new(
            "scaled_dot_attention/k",
            finite_diff_check(
                move |p| {
                    let k = SeqMatrix::new(5, 3, p.to_vec())?;
                    Ok(sq_loss(&crate::attention::scaled_dot_attention(&q2, &k, 3)?, &r2)?.0)
                },
                k.data(),
                d_k.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
    }

    // layer norm
    {
        let x = rand_mat(4, 6, &mut rng);
        let gain: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
        let bias: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let r = rand_mat(4, 6, &mut rng);
        let y = layer_norm(&x, &gain, &bias, LN_EPS)?;
        let (_, d_y) = sq_loss(&y, &r)?;
        let (d_x, d_gain, d_bias) = layer_norm_backward(&x, &gain, LN_EPS, &d_y)?;
        let (g2, b2, r2) = (gain.clone(), bias.clone(), r.clone());
        checks.push(NamedCheck::new(
            "layer_norm/input",
            finite_diff_check(
                move |p| {
                    let x = SeqMatrix::new(4, 6, p.to_vec())?;
                    Ok(sq_loss(&layer_norm(&x, &g2, &b2, LN_EPS)?, &r2)?.0)
                },
                x.data(),
                d_x.data(),
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
        let (x2, b3, r3) = (x.clone(), bias.clone(), r.clone());
        checks.push(NamedCheck::new(
            "layer_norm/gain",
            finite_diff_check(
                move |p| Ok(sq_loss(&layer_norm(&x2, p, &b3, LN_EPS)?, &r3)?.0),
                &gain,
                &d_gain,
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
        let (x3, g3, r4) = (x.clone(), gain.clone(), r.clone());
        checks.push(NamedCheck::new(
            "layer_norm/bias",
            finite_diff_check(
                move |p| Ok(sq_loss(&layer_norm(&x3, &g3, p, LN_EPS)?, &r4)?.0),
                &bias,
                &d_bias,
                FD_EPS,
                PRIMITIVE_TOL,
            )?,
        ));
    }

    Ok(checks)
}

/// Smallest gap between a pooling window's max and runner-up.
fn pool_margin(x: &SeqMatrix, n_out: usize) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 0..n_out {
        let start = i * x.rows() / n_out;
        let end = ((i + 1) * x.rows() + n_out - 1) / n_out;
        for c in 0..x.cols() {
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for r in start..end {
                let v = x.get(r, c);
                if v > best {
                    second = best;
                    best = v;
                } else if v > second {
                    second = v;
                }
            }
            if second.is_finite() {
                margin = margin.min(best - second);
            }
        }
    }
    margin
}

// ── Unrolled CO suite ───────────────────────────────────────────────

fn co_unrolled_check(seed: u64) -> Result<NamedCheck> {
    let cfg = SolverConfig { tol: 0.0, ..Default::default() };
    let mut attempt = 0;
    let (candidates, target, loss_target) = loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt * 7919));
        let candidates: Vec<SeqMatrix> = (0..3).map(|_| rand_mat(12, 4, &mut rng)).collect();
        let target = rand_mat(12, 4, &mut rng);
        let loss_target = rand_mat(12, 4, &mut rng);
        let (_, trace) = co_solve_traced(&candidates, &target, &cfg)?;
        if trace.min_kink_margin > KINK_MARGIN && trace.bound_margin > KINK_MARGIN {
            break (candidates, target, loss_target);
        }
        attempt += 1;
        if attempt >= MAX_SEED_TRIES {
            return Err(MahaError::Config(
                "co_unrolled gradcheck: no kink-free instance found".into(),
            ));
        }
    };

    let (weights, trace) = co_solve_traced(&candidates, &target, &cfg)?;
    let mixed = aggregate_outputs(&candidates, &weights.w)?;
    let (_, d_out) = sq_loss(&mixed, &loss_target)?;
    let d_w: Vec<f64> =
        candidates.iter().map(|c| c.frob_inner(&d_out)).collect::<Result<_>>()?;
    let (d_cands_solver, _d_target) =
        co_solve_backward(&trace, &candidates, &target, &cfg, &d_w)?;

    let mut flat_params = Vec::new();
    let mut flat_grads = Vec::new();
    for (l, c) in candidates.iter().enumerate() {
        flat_params.extend_from_slice(c.data());
        let mut d = d_out.scale(weights.w[l]);
        d.axpy(1.0, &d_cands_solver[l])?;
        flat_grads.extend_from_slice(d.data());
    }

    let (rows, cols) = (candidates[0].rows(), candidates[0].cols());
    let count = candidates.len();
    let target2 = target.clone();
    let loss_target2 = loss_target.clone();
    let report = finite_diff_check(
        move |p| {
            let span = rows * cols;
            let cands: Vec<SeqMatrix> = (0..count)
                .map(|l| SeqMatrix::new(rows, cols, p[l * span..(l + 1) * span].to_vec()))
                .collect::<Result<_>>()?;
            let w = crate::aggregate::co_solve(&cands, &target2, &cfg)?;
            let mixed = aggregate_outputs(&cands, &w.w)?;
            Ok(sq_loss(&mixed, &loss_target2)?.0)
        },
        &flat_params,
        &flat_grads,
        FD_EPS,
        LAYER_TOL,
    )?;
    Ok(NamedCheck::new("co_unrolled/candidates", report))
}

// ── Layer suites ────────────────────────────────────────────────────

fn layer_loss(
    x: &SeqMatrix,
    params: &HybridParams,
    schedule: &ScaleSchedule,
    method: AggMethod,
    r: &SeqMatrix,
) -> Result<f64> {
    let out = maha_layer(x, params, schedule, method)?;
    Ok(out.y.sub(r)?.frob_norm_sq())
}

#[allow(clippy::too_many_arguments)]
fn check_layer_param(
    name: String,
    x: &SeqMatrix,
    params: &HybridParams,
    schedule: &ScaleSchedule,
    method: AggMethod,
    r: &SeqMatrix,
    analytic: &[f64],
    accessor: impl Fn(&mut HybridParams) -> &mut [f64],
    tol: f64,
) -> Result<NamedCheck> {
    let mut base = params.clone();
    let flat = accessor(&mut base).to_vec();
    let (x2, params2, schedule2, r2) = (x.clone(), params.clone(), schedule.clone(), r.clone());
    let report = finite_diff_check(
        move |p| {
            let mut pp = params2.clone();
            accessor(&mut pp).copy_from_slice(p);
            layer_loss(&x2, &pp, &schedule2, method, &r2)
        },
        &flat,
        analytic,
        LAYER_FD_EPS,
        tol,
    )?;
    Ok(NamedCheck::new(name, report))
}

/// Layer-level checks for one wiring. Instances are re-seeded until all
/// nonsmooth stages sit away from their kinks.
fn layer_checks(
    prefix: &str,
    cfg: &GradCheckConfig,
    method: AggMethod,
    gating: bool,
    dilated: bool,
    tol: f64,
) -> Result<Vec<NamedCheck>> {
    let schedule = make_schedule(cfg.n, 2, cfg.depth)?;
    let solver = SolverConfig { tol: 0.0, ..Default::default() };

    let mut attempt = 0;
    let (x, params, r, tape) = loop {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(attempt * 6271));
        let params = HybridParams::init(
            &schedule,
            cfg.d,
            cfg.d_k,
            DownsampleKind::StridedConv,
            solver,
            gating,
            dilated,
            2,
            &mut rng,
        );
        let x = rand_mat(cfg.n, cfg.d, &mut rng);
        let r = rand_mat(cfg.n, cfg.d, &mut rng);
        let (_, tape) = maha_layer_traced(&x, &params, &schedule, method)?;
        let relu_ok = !dilated || tape.min_relu_margin() > LAYER_KINK_MARGIN;
        let co_ok = tape.co_trace().map_or(true, |t| {
            t.min_kink_margin > LAYER_KINK_MARGIN && t.bound_margin > LAYER_KINK_MARGIN
        });
        if relu_ok && co_ok {
            break (x, params, r, tape);
        }
        attempt += 1;
        if attempt >= MAX_SEED_TRIES {
            return Err(MahaError::Config(format!(
                "{prefix} gradcheck: no kink-free instance found"
            )));
        }
    };

    let out = maha_layer(&x, &params, &schedule, method)?;
    let (_, d_y) = sq_loss(&out.y, &r)?;
    let grads = maha_layer_backward(&tape, &params, &schedule, &d_y)?;

    let mut checks = Vec::new();

    // Input gradient.
    {
        let (params2, schedule2, r2) = (params.clone(), schedule.clone(), r.clone());
        let (rows, cols) = (x.rows(), x.cols());
        checks.push(NamedCheck::new(
            format!("{prefix}/input"),
            finite_diff_check(
                move |p| {
                    let x = SeqMatrix::new(rows, cols, p.to_vec())?;
                    layer_loss(&x, &params2, &schedule2, method, &r2)
                },
                x.data(),
                grads.d_x.data(),
                LAYER_FD_EPS,
                tol,
            )?,
        ));
    }

    let num_scales = schedule.num_attention_scales();
    for s in 0..num_scales {
        checks.push(check_layer_param(
            format!("{prefix}/w_q{s}"),
            &x,
            &params,
            &schedule,
            method,
            &r,
            grads.d_wq[s].data(),
            move |p| p.attn.w_q[s].data_mut(),
            tol,
        )?);
        checks.push(check_layer_param(
            format!("{prefix}/w_k{s}"),
            &x,
            &params,
            &schedule,
            method,
            &r,
            grads.d_wk[s].data(),
            move |p| p.attn.w_k[s].data_mut(),
            tol,
        )?);
    }
    checks.push(check_layer_param(
        format!("{prefix}/w_v"),
        &x,
        &params,
        &schedule,
        method,
        &r,
        grads.d_wv.data(),
        |p| p.attn.w_v.data_mut(),
        tol,
    )?);
    if gating {
        checks.push(check_layer_param(
            format!("{prefix}/w_g"),
            &x,
            &params,
            &schedule,
            method,
            &r,
            grads.d_wg.data(),
            |p| p.w_g.data_mut(),
            tol,
        )?);
    }
    if dilated {
        for s in 0..num_scales {
            checks.push(check_layer_param(
                format!("{prefix}/dilated_kernel{s}"),
                &x,
                &params,
                &schedule,
                method,
                &r,
                grads.d_dilated_kernels[s].data(),
                move |p| p.dilated_kernels[s].data_mut(),
                tol,
            )?);
            checks.push(check_layer_param(
                format!("{prefix}/dilated_bias{s}"),
                &x,
                &params,
                &schedule,
                method,
                &r,
                &grads.d_dilated_bias[s],
                move |p| &mut p.dilated_bias[s][..],
                tol,
            )?);
        }
    }
    for l in 0..schedule.depth {
        checks.push(check_layer_param(
            format!("{prefix}/down_kernel{l}"),
            &x,
            &params,
            &schedule,
            method,
            &r,
            grads.d_down_kernels[l].data(),
            move |p| p.down.kernels[l].data_mut(),
            tol,
        )?);
    }
    Ok(checks)
}

/// Every suite, in a deterministic order.
pub fn run_gradcheck_suites(cfg: &GradCheckConfig) -> Result<Vec<NamedCheck>> {
    let mut checks = primitive_checks(cfg.seed)?;
    // Attention pathway alone (no dilated blocks, no gating, constant weights).
    checks.extend(layer_checks("attention", cfg, AggMethod::Mean, false, false, PRIMITIVE_TOL)?);
    checks.push(co_unrolled_check(cfg.seed)?);
    // Full wiring with the differentiable solver.
    checks.extend(layer_checks("layer_co", cfg, AggMethod::Co, true, true, LAYER_TOL)?);
    Ok(checks)
}
