//! Fusion of per-scale outputs into one full-resolution representation.
//!
//! Mixing weights live on the probability simplex and are found either by
//! projected gradient descent on a least-squares objective (`co_solve`), by
//! best-response dynamics with an epsilon-equilibrium certificate
//! (`ne_solve`), or fixed uniform (`mean_solve`).

use serde::{Deserialize, Serialize};

use crate::error::{MahaError, Result};
use crate::tensor::SeqMatrix;

/// Deviation mass used by the equilibrium certificate.
pub const NE_CERT_DELTA: f64 = 0.01;
/// Maximum objective improvement any single deviation may yield.
pub const NE_CERT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggMethod {
    Co,
    Ne,
    Mean,
}

impl std::fmt::Display for AggMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AggMethod::Co => "co",
            AggMethod::Ne => "ne",
            AggMethod::Mean => "mean",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Fit against the full-resolution value pathway `V_base`.
    ValuePathway,
    /// Fit against the unweighted mean of the candidates, held constant
    /// during weight solving.
    MeanOfScales,
}

/// Solver settings shared by both optimization methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// L1 coefficient in the CO objective. Constant on the simplex, so it
    /// shifts the objective without moving the minimizer.
    pub lambda: f64,
    /// Iteration (CO) / sweep (NE, per phase) budget.
    pub max_iters: usize,
    /// Step-size cap for projected gradient descent. The effective step is
    /// clamped by a Lipschitz bound so the iteration always converges.
    pub step: f64,
    /// Early-stop threshold on the max weight movement. Zero disables early
    /// stopping (fixed unroll depth, used when differentiating through the
    /// solver).
    pub tol: f64,
    pub target: TargetKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { lambda: 0.1, max_iters: 50, step: 0.1, tol: 1e-8, target: TargetKind::ValuePathway }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(MahaError::Config("solver lambda must be >= 0".into()));
        }
        if self.max_iters == 0 {
            return Err(MahaError::Config("solver max_iters must be >= 1".into()));
        }
        if self.step <= 0.0 {
            return Err(MahaError::Config("solver step must be > 0".into()));
        }
        Ok(())
    }
}

/// Mixing weights on the probability simplex, plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct AggWeights {
    pub w: Vec<f64>,
    pub method: AggMethod,
    /// Iterations (CO) or best-response sweeps (NE) actually executed.
    pub iterations: usize,
    /// Final objective: reconstruction error, plus the L1 term for CO.
    pub objective: f64,
    /// Objective after each iteration/sweep, starting at the initial point.
    pub objective_trace: Vec<f64>,
    /// Players with zero-norm candidates, pinned to weight 0.
    pub degenerate: Vec<usize>,
}

// ── Nearest-neighbor upsampling ─────────────────────────────────────

/// Length restoration: output row `i` copies input row `floor(i * rows / n)`.
pub fn nn_upsample(o: &SeqMatrix, n: usize) -> Result<SeqMatrix> {
    if n < o.rows() {
        return Err(MahaError::Shape(format!(
            "nn_upsample: target {n} shorter than input {}",
            o.rows()
        )));
    }
    let mut out = SeqMatrix::zeros(n, o.cols());
    for i in 0..n {
        let src = i * o.rows() / n;
        out.row_mut(i).copy_from_slice(o.row(src));
    }
    Ok(out)
}

/// Scatter-add of output gradients back to their source rows.
pub fn nn_upsample_backward(rows_in: usize, grad_out: &SeqMatrix) -> SeqMatrix {
    let n = grad_out.rows();
    let mut grad = SeqMatrix::zeros(rows_in, grad_out.cols());
    for i in 0..n {
        let src = i * rows_in / n;
        let gr = grad_out.row(i);
        let tr = grad.row_mut(src);
        for (t, &g) in tr.iter_mut().zip(gr) {
            *t += g;
        }
    }
    grad
}

// ── Simplex projection ──────────────────────────────────────────────

/// Euclidean projection onto `{w : sum w = 1, w >= 0}` by sort-and-threshold.
pub fn simplex_project(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(MahaError::Shape("simplex_project: empty input".into()));
    }
    let mask = vec![true; v.len()];
    let (w, _, _) = project_masked(v, &mask);
    Ok(w)
}

/// Projection restricted to `active` coordinates; inactive ones stay 0.
/// Returns the projected point, the support mask, and the distance of the
/// closest coordinate to the threshold (the kink margin).
fn project_masked(v: &[f64], active: &[bool]) -> (Vec<f64>, Vec<bool>, f64) {
    let mut vals: Vec<f64> = v
        .iter()
        .zip(active)
        .filter_map(|(&x, &a)| if a { Some(x) } else { None })
        .collect();
    debug_assert!(!vals.is_empty());
    vals.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut rho = 0;
    let mut tau = 0.0;
    for (j, &u) in vals.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            rho = j + 1;
            tau = t;
        }
    }
    debug_assert!(rho >= 1);
    let mut w = vec![0.0; v.len()];
    let mut support = vec![false; v.len()];
    let mut margin = f64::INFINITY;
    for i in 0..v.len() {
        if !active[i] {
            continue;
        }
        let shifted = v[i] - tau;
        margin = margin.min(shifted.abs());
        if shifted > 0.0 {
            w[i] = shifted;
            support[i] = true;
        }
    }
    (w, support, margin)
}

// ── Shared helpers ──────────────────────────────────────────────────

fn check_candidates(candidates: &[SeqMatrix], target: &SeqMatrix) -> Result<()> {
    if candidates.is_empty() {
        return Err(MahaError::Shape("solver needs at least one candidate".into()));
    }
    for (l, c) in candidates.iter().enumerate() {
        if c.rows() != target.rows() || c.cols() != target.cols() {
            return Err(MahaError::Shape(format!(
                "candidate {l} is {}x{}, target is {}x{}",
                c.rows(),
                c.cols(),
                target.rows(),
                target.cols()
            )));
        }
        c.ensure_finite("solver candidate")?;
    }
    target.ensure_finite("solver target")?;
    Ok(())
}

fn gram_and_load(candidates: &[SeqMatrix], target: &SeqMatrix) -> (Vec<f64>, Vec<f64>, f64) {
    let len = candidates.len();
    let mut gram = vec![0.0; len * len];
    for l in 0..len {
        for m in l..len {
            let v = candidates[l].frob_inner(&candidates[m]).expect("checked shapes");
            gram[l * len + m] = v;
            gram[m * len + l] = v;
        }
    }
    let load: Vec<f64> =
        candidates.iter().map(|c| c.frob_inner(target).expect("checked shapes")).collect();
    (gram, load, target.frob_norm_sq())
}

/// Reconstruction error `||sum_l w_l C_l - T||_F^2` evaluated via the Gram
/// matrix.
fn quad_objective(gram: &[f64], load: &[f64], tt: f64, w: &[f64]) -> f64 {
    let len = w.len();
    let mut q = 0.0;
    for l in 0..len {
        for m in 0..len {
            q += w[l] * gram[l * len + m] * w[m];
        }
    }
    q - 2.0 * w.iter().zip(load).map(|(&a, &b)| a * b).sum::<f64>() + tt
}

// ── CO solver ───────────────────────────────────────────────────────

/// Forward record of the unrolled projected-gradient iteration, enough to
/// replay it in reverse.
#[derive(Debug, Clone)]
pub struct CoTrace {
    /// `w_0 .. w_T` (first entry is the uniform start).
    pub iterates: Vec<Vec<f64>>,
    /// Projection support after each executed iteration.
    pub supports: Vec<Vec<bool>>,
    pub eta: f64,
    /// Smallest distance of any coordinate to a projection threshold seen
    /// during the run; small margins mean the solve sits near a kink.
    pub min_kink_margin: f64,
    /// Max weight movement at the final executed iteration.
    pub final_movement: f64,
    /// Distance of `log2(lipschitz bound)` from the nearest snap boundary
    /// (infinite when the configured step cap is what binds). The step uses a
    /// power-of-two bound so it is locally constant in the candidates, which
    /// keeps the unrolled backward exact.
    pub bound_margin: f64,
}

/// Minimizes `||sum_l w_l C_l - T||_F^2 + lambda ||w||_1` over the simplex by
/// projected gradient descent from uniform initialization.
///
/// The step is `min(cfg.step, 1/(2 B))` with `B` a Gershgorin bound on the
/// Gram matrix's largest eigenvalue, so the iteration is a contraction
/// regardless of candidate scale. Early-stops when no weight moves by more
/// than `cfg.tol` (disabled at `tol = 0`).
pub fn co_solve(candidates: &[SeqMatrix], target: &SeqMatrix, cfg: &SolverConfig) -> Result<AggWeights> {
    co_solve_traced(candidates, target, cfg).map(|(w, _)| w)
}

pub fn co_solve_traced(
    candidates: &[SeqMatrix],
    target: &SeqMatrix,
    cfg: &SolverConfig,
) -> Result<(AggWeights, CoTrace)> {
    cfg.validate()?;
    check_candidates(candidates, target)?;
    let len = candidates.len();
    let (gram, load, tt) = gram_and_load(candidates, target);

    let gersh = (0..len)
        .map(|l| (0..len).map(|m| gram[l * len + m].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let (eta, bound_margin) = if gersh > 0.0 {
        let log2 = gersh.log2();
        let snapped = log2.ceil();
        let bound = 2.0f64.powi(snapped as i32);
        let safe = 1.0 / (2.0 * bound);
        if safe < cfg.step {
            (safe, (snapped - log2).min(log2 - (snapped - 1.0)))
        } else {
            (cfg.step, f64::INFINITY)
        }
    } else {
        (cfg.step, f64::INFINITY)
    };

    let mut w = vec![1.0 / len as f64; len];
    let mask = vec![true; len];
    let mut iterates = vec![w.clone()];
    let mut supports = Vec::new();
    let mut objective_trace = vec![quad_objective(&gram, &load, tt, &w) + cfg.lambda * l1(&w)];
    let mut min_margin = f64::INFINITY;
    let mut final_movement = 0.0;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        let mut v = vec![0.0; len];
        for l in 0..len {
            let mut g = -2.0 * load[l] + cfg.lambda;
            for m in 0..len {
                g += 2.0 * gram[l * len + m] * w[m];
            }
            v[l] = w[l] - eta * g;
        }
        let (next, support, margin) = project_masked(&v, &mask);
        min_margin = min_margin.min(margin);
        final_movement =
            next.iter().zip(&w).map(|(&a, &b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        iterations += 1;
        iterates.push(w.clone());
        supports.push(support);
        objective_trace.push(quad_objective(&gram, &load, tt, &w) + cfg.lambda * l1(&w));
        if cfg.tol > 0.0 && final_movement < cfg.tol {
            break;
        }
    }

    let objective = *objective_trace.last().unwrap();
    let weights = AggWeights {
        w,
        method: AggMethod::Co,
        iterations,
        objective,
        objective_trace,
        degenerate: Vec::new(),
    };
    let trace = CoTrace {
        iterates,
        supports,
        eta,
        min_kink_margin: min_margin,
        final_movement,
        bound_margin,
    };
    Ok((weights, trace))
}

fn l1(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

/// Gradients of the solved weights w.r.t. candidates and target, obtained by
/// replaying the recorded iteration in reverse.
///
/// The Lipschitz-derived step is treated as a constant of the backward pass;
/// at a converged fixed point the weights do not depend on it.
pub fn co_solve_backward(
    trace: &CoTrace,
    candidates: &[SeqMatrix],
    target: &SeqMatrix,
    cfg: &SolverConfig,
    grad_w: &[f64],
) -> Result<(Vec<SeqMatrix>, SeqMatrix)> {
    let len = candidates.len();
    if grad_w.len() != len {
        return Err(MahaError::Shape(format!(
            "co_solve_backward: {} weight grads for {len} candidates",
            grad_w.len()
        )));
    }
    let (gram, _, _) = gram_and_load(candidates, target);
    let eta = trace.eta;
    let mut dw = grad_w.to_vec();
    let mut dgram = vec![0.0; len * len];
    let mut dload = vec![0.0; len];

    for t in (0..trace.supports.len()).rev() {
        let w_t = &trace.iterates[t];
        let support = &trace.supports[t];
        // Projection backward: dv = dw - mean(dw over support), zero off-support.
        let count = support.iter().filter(|&&s| s).count().max(1) as f64;
        let mean: f64 =
            dw.iter().zip(support).filter_map(|(&g, &s)| s.then_some(g)).sum::<f64>() / count;
        let dv: Vec<f64> = dw
            .iter()
            .zip(support)
            .map(|(&g, &s)| if s { g - mean } else { 0.0 })
            .collect();
        // v = w_t - eta * (2 (G w_t - b) + lambda); d/dw_t = I - 2 eta G.
        let mut dw_prev = dv.clone();
        for l in 0..len {
            if dv[l] == 0.0 {
                continue;
            }
            for m in 0..len {
                dw_prev[m] -= 2.0 * eta * gram[l * len + m] * dv[l];
                dgram[l * len + m] -= 2.0 * eta * dv[l] * w_t[m];
            }
            dload[l] += 2.0 * eta * dv[l];
        }
        dw = dw_prev;
    }
    let _ = cfg;

    // G_{lm} = <C_l, C_m>, b_l = <C_l, T>.
    let mut d_candidates: Vec<SeqMatrix> = candidates
        .iter()
        .map(|c| SeqMatrix::zeros(c.rows(), c.cols()))
        .collect();
    let mut d_target = SeqMatrix::zeros(target.rows(), target.cols());
    for l in 0..len {
        for m in 0..len {
            let coeff = dgram[l * len + m] + dgram[m * len + l];
            if coeff != 0.0 {
                d_candidates[l].axpy(coeff, &candidates[m])?;
            }
        }
        if dload[l] != 0.0 {
            d_candidates[l].axpy(dload[l], target)?;
            d_target.axpy(dload[l], &candidates[l])?;
        }
    }
    Ok((d_candidates, d_target))
}

// ── NE solver ───────────────────────────────────────────────────────

/// Largest objective improvement any player can obtain by moving `delta` mass
/// between itself and one other coordinate, both staying in `[0, 1]`.
///
/// Zero-norm candidates are not players: their weights are pinned to zero, so
/// deviations moving mass to or from them are infeasible. The returned point
/// of `ne_solve` keeps this below [`NE_CERT_EPS`].
pub fn ne_improvement(
    candidates: &[SeqMatrix],
    target: &SeqMatrix,
    w: &[f64],
    delta: f64,
) -> Result<f64> {
    check_candidates(candidates, target)?;
    if w.len() != candidates.len() {
        return Err(MahaError::Shape(format!(
            "ne_improvement: {} weights for {} candidates",
            w.len(),
            candidates.len()
        )));
    }
    let len = candidates.len();
    let residual = residual(candidates, w, target)?;
    // <R, C_l> and the candidate Gram give every deviation in closed form:
    // ||R + d (C_l - C_m)||^2 - ||R||^2 = 2 d <R, C_l - C_m> + d^2 ||C_l - C_m||^2.
    let r_dot: Vec<f64> = candidates
        .iter()
        .map(|c| residual.frob_inner(c).expect("checked shapes"))
        .collect();
    let (gram, _, _) = gram_and_load(candidates, target);
    let playing: Vec<bool> = (0..len).map(|l| gram[l * len + l] > 0.0).collect();
    let mut worst: f64 = 0.0;
    for l in 0..len {
        for m in 0..len {
            if m == l || !playing[l] || !playing[m] {
                continue;
            }
            let diff_norm_sq = gram[l * len + l] - 2.0 * gram[l * len + m] + gram[m * len + m];
            for d in [delta, -delta] {
                let wl = w[l] + d;
                let wm = w[m] - d;
                if !(0.0..=1.0).contains(&wl) || !(0.0..=1.0).contains(&wm) {
                    continue;
                }
                let change = 2.0 * d * (r_dot[l] - r_dot[m]) + d * d * diff_norm_sq;
                worst = worst.max(-change);
            }
        }
    }
    Ok(worst)
}

fn residual(candidates: &[SeqMatrix], w: &[f64], target: &SeqMatrix) -> Result<SeqMatrix> {
    let mut r = target.scale(-1.0);
    for (c, &wl) in candidates.iter().zip(w) {
        r.axpy(wl, c)?;
    }
    Ok(r)
}

/// Best-response dynamics for the scale game.
///
/// Phase one runs Gauss-Seidel sweeps of the per-player best response
/// `w_l = max(0, <T - S_{-l}, C_l> / ||C_l||^2)` with a simplex projection
/// after each full sweep. Its fixed points are not always equilibria of the
/// simplex-constrained game, so a second phase refines the point with exact
/// pairwise best responses (mass transfers between two players, the same
/// deviation space the certificate checks) until no player can improve by
/// more than half of [`NE_CERT_EPS`].
pub fn ne_solve(candidates: &[SeqMatrix], target: &SeqMatrix, cfg: &SolverConfig) -> Result<AggWeights> {
    cfg.validate()?;
    check_candidates(candidates, target)?;
    let len = candidates.len();
    let norms: Vec<f64> = candidates.iter().map(|c| c.frob_norm_sq()).collect();
    let degenerate: Vec<usize> =
        (0..len).filter(|&l| norms[l] == 0.0).collect();
    let active: Vec<bool> = (0..len).map(|l| norms[l] > 0.0).collect();
    let (gram, load, tt) = gram_and_load(candidates, target);

    if degenerate.len() == len {
        // Nothing to fit; every mix reconstructs zero.
        let w = vec![1.0 / len as f64; len];
        let obj = quad_objective(&gram, &load, tt, &w);
        return Ok(AggWeights {
            w,
            method: AggMethod::Ne,
            iterations: 0,
            objective: obj,
            objective_trace: vec![obj],
            degenerate,
        });
    }

    let mut w = if degenerate.is_empty() {
        vec![1.0 / len as f64; len]
    } else {
        let uniform = vec![1.0 / len as f64; len];
        project_masked(&uniform, &active).0
    };
    let mut objective_trace = vec![quad_objective(&gram, &load, tt, &w)];
    let mut sweeps = 0;

    // Phase one: literal per-player best responses, evaluated against the
    // actual candidate matrices. `mix` tracks sum_m w_m C_m.
    let mut mix = aggregate_outputs(candidates, &w)?;
    for _ in 0..cfg.max_iters {
        sweeps += 1;
        let mut moved: f64 = 0.0;
        for l in 0..len {
            if !active[l] {
                continue;
            }
            // <T - S_{-l}, C_l> with S_{-l} = mix - w_l C_l.
            let num = candidates[l].frob_inner(target)? - candidates[l].frob_inner(&mix)?
                + w[l] * norms[l];
            let next = (num / norms[l]).max(0.0);
            moved = moved.max((next - w[l]).abs());
            mix.axpy(next - w[l], &candidates[l])?;
            w[l] = next;
        }
        let (proj, _, _) = project_masked(&w, &active);
        for l in 0..len {
            if proj[l] != w[l] {
                mix.axpy(proj[l] - w[l], &candidates[l])?;
            }
        }
        w = proj;
        objective_trace.push(quad_objective(&gram, &load, tt, &w));
        if moved < cfg.tol {
            break;
        }
    }

    // Phase two: pairwise refinement in the certificate's deviation space
    // (optimal mass transfers between two players along C_l - C_m). Runs to
    // stationarity, not just certificate slack, so the returned point is the
    // equilibrium its implicit gradients assume.
    let stationary_tol = if cfg.tol > 0.0 { cfg.tol } else { 1e-12 };
    for _ in 0..cfg.max_iters {
        sweeps += 1;
        let mut residual = residual(candidates, &w, target)?;
        let mut moved: f64 = 0.0;
        for l in 0..len {
            if !active[l] {
                continue;
            }
            for m in 0..len {
                if m == l || !active[m] {
                    continue;
                }
                let diff_norm_sq =
                    gram[l * len + l] - 2.0 * gram[l * len + m] + gram[m * len + m];
                if diff_norm_sq == 0.0 {
                    continue;
                }
                let r_dot_diff = residual.frob_inner(&candidates[l])?
                    - residual.frob_inner(&candidates[m])?;
                let step = (-r_dot_diff / diff_norm_sq).clamp(-w[l], w[m]);
                w[l] += step;
                w[m] -= step;
                residual.axpy(step, &candidates[l])?;
                residual.axpy(-step, &candidates[m])?;
                moved = moved.max(step.abs());
            }
        }
        objective_trace.push(quad_objective(&gram, &load, tt, &w));
        if moved <= stationary_tol
            && ne_improvement(candidates, target, &w, NE_CERT_DELTA)? <= 0.5 * NE_CERT_EPS
        {
            break;
        }
    }
    // The contract promises a certificate-passing point; phase two is exact
    // pairwise minimization of a convex quadratic, so within the sweep budget
    // this holds on any non-pathological instance.
    let final_improvement = ne_improvement(candidates, target, &w, NE_CERT_DELTA)?;
    debug_assert!(
        final_improvement <= NE_CERT_EPS,
        "equilibrium refinement left improvement {final_improvement}"
    );

    let objective = quad_objective(&gram, &load, tt, &w);
    Ok(AggWeights {
        w,
        method: AggMethod::Ne,
        iterations: sweeps,
        objective,
        objective_trace,
        degenerate,
    })
}

/// Gradients of the equilibrium weights w.r.t. candidates and target via
/// implicit differentiation of the KKT system on the active support.
///
/// The certificate guarantees the returned point minimizes the reconstruction
/// error over the simplex, so on the support `S` the stationarity conditions
/// `2 G_S w_S - 2 b_S + nu 1 = 0`, `1' w_S = 1` hold and differentiating them
/// gives exact sensitivities. Falls back to zero gradients (weights treated
/// as constants) when the system is singular, e.g. for duplicated candidates.
pub fn ne_solve_backward(
    candidates: &[SeqMatrix],
    target: &SeqMatrix,
    w: &[f64],
    grad_w: &[f64],
) -> Result<(Vec<SeqMatrix>, SeqMatrix)> {
    let len = candidates.len();
    if w.len() != len || grad_w.len() != len {
        return Err(MahaError::Shape(format!(
            "ne_solve_backward: {} weights / {} grads for {len} candidates",
            w.len(),
            grad_w.len()
        )));
    }
    let mut d_candidates: Vec<SeqMatrix> =
        candidates.iter().map(|c| SeqMatrix::zeros(c.rows(), c.cols())).collect();
    let mut d_target = SeqMatrix::zeros(target.rows(), target.cols());

    let support: Vec<usize> = (0..len).filter(|&l| w[l] > 0.0).collect();
    let s = support.len();
    if s < 2 {
        // A single live player is pinned at weight 1; no sensitivity.
        return Ok((d_candidates, d_target));
    }
    let (gram, _, _) = gram_and_load(candidates, target);

    // K = [[2 G_S, 1], [1', 0]], adjoint solve K lambda = [grad_w_S; 0].
    let dim = s + 1;
    let mut k = vec![0.0; dim * dim];
    for (i, &li) in support.iter().enumerate() {
        for (j, &lj) in support.iter().enumerate() {
            k[i * dim + j] = 2.0 * gram[li * len + lj];
        }
        k[i * dim + s] = 1.0;
        k[s * dim + i] = 1.0;
    }
    let mut rhs = vec![0.0; dim];
    for (i, &li) in support.iter().enumerate() {
        rhs[i] = grad_w[li];
    }
    let Some(lambda) = solve_dense(&mut k, &mut rhs) else {
        return Ok((d_candidates, d_target));
    };

    // dL/dG_{ij} = -2 lambda_i w_j, dL/db_i = 2 lambda_i (i, j on the support);
    // G_{lm} = <C_l, C_m>, b_l = <C_l, T>.
    for (i, &li) in support.iter().enumerate() {
        let db = 2.0 * lambda[i];
        if db != 0.0 {
            d_candidates[li].axpy(db, target)?;
            d_target.axpy(db, &candidates[li])?;
        }
        for &lj in &support {
            let dg = -2.0 * lambda[i] * w[lj];
            if dg != 0.0 {
                // Symmetric Gram entry: contributes to both factors.
                d_candidates[li].axpy(dg, &candidates[lj])?;
                d_candidates[lj].axpy(dg, &candidates[li])?;
            }
        }
    }
    Ok((d_candidates, d_target))
}

/// In-place Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(a: &mut [f64], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    for col in 0..n {
        let (pivot_row, pivot_val) = (col..n)
            .map(|r| (r, a[r * n + col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))?;
        if pivot_val < 1e-12 {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(pivot_row * n + j, col * n + j);
            }
            b.swap(pivot_row, col);
        }
        let inv = 1.0 / a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] * inv;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for j in col + 1..n {
            acc -= a[col * n + j] * x[j];
        }
        x[col] = acc / a[col * n + col];
    }
    Some(x)
}

// ── Mean baseline ───────────────────────────────────────────────────

/// Uniform weights; the target is only used to report the objective.
pub fn mean_solve(candidates: &[SeqMatrix], target: &SeqMatrix) -> Result<AggWeights> {
    check_candidates(candidates, target)?;
    let len = candidates.len();
    let w = vec![1.0 / len as f64; len];
    let (gram, load, tt) = gram_and_load(candidates, target);
    let objective = quad_objective(&gram, &load, tt, &w);
    Ok(AggWeights {
        w,
        method: AggMethod::Mean,
        iterations: 0,
        objective,
        objective_trace: vec![objective],
        degenerate: Vec::new(),
    })
}

/// Dispatch on the aggregation method.
pub fn solve(
    candidates: &[SeqMatrix],
    target: &SeqMatrix,
    method: AggMethod,
    cfg: &SolverConfig,
) -> Result<AggWeights> {
    match method {
        AggMethod::Co => co_solve(candidates, target, cfg),
        AggMethod::Ne => ne_solve(candidates, target, cfg),
        AggMethod::Mean => mean_solve(candidates, target),
    }
}

// ── Output assembly ─────────────────────────────────────────────────

/// `O* = sum_l w_l C_l`.
pub fn aggregate_outputs(candidates: &[SeqMatrix], w: &[f64]) -> Result<SeqMatrix> {
    if candidates.is_empty() {
        return Err(MahaError::Shape("aggregate_outputs: no candidates".into()));
    }
    if candidates.len() != w.len() {
        return Err(MahaError::Shape(format!(
            "aggregate_outputs: {} weights for {} candidates",
            w.len(),
            candidates.len()
        )));
    }
    let mut out = SeqMatrix::zeros(candidates[0].rows(), candidates[0].cols());
    for (c, &wl) in candidates.iter().zip(w) {
        out.axpy(wl, c)?;
    }
    Ok(out)
}

/// Resolves the fit target for the weight solvers.
pub fn build_target(
    x0: &SeqMatrix,
    v_base: &SeqMatrix,
    candidates: &[SeqMatrix],
    kind: TargetKind,
) -> Result<SeqMatrix> {
    match kind {
        TargetKind::ValuePathway => {
            if v_base.rows() != x0.rows() {
                return Err(MahaError::Shape(format!(
                    "build_target: value pathway has {} rows, input has {}",
                    v_base.rows(),
                    x0.rows()
                )));
            }
            Ok(v_base.clone())
        }
        TargetKind::MeanOfScales => {
            if candidates.is_empty() {
                return Err(MahaError::Shape("build_target: no candidates to average".into()));
            }
            let mut mean = SeqMatrix::zeros(candidates[0].rows(), candidates[0].cols());
            let inv = 1.0 / candidates.len() as f64;
            for c in candidates {
                mean.axpy(inv, c)?;
            }
            Ok(mean)
        }
    }
}
