//! A tiny trainable transformer stack around the hierarchical attention
//! layer: token embedding, pre-norm blocks (attention sublayer + two-layer
//! feed-forward), a task head, plain SGD, synthetic tasks, and the ablation
//! runners.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{AggMethod, SolverConfig};
use crate::error::{MahaError, Result};
use crate::hybrid::{maha_layer_backward, maha_layer_traced, HybridParams, LayerGrads, LayerOutput, LayerTape};
use crate::pyramid::{make_schedule, DownsampleKind, ScaleSchedule};
use crate::tensor::{matmul, matmul_backward, relu, relu_backward, softmax_rows, SeqMatrix};

pub const LN_EPS: f64 = 1e-5;
const DIVERGENCE_BOUND: f64 = 1e6;

// ── Layer norm (owned here; the attention layer itself is norm-free) ──

/// Per-row normalization with learnable gain and bias.
pub fn layer_norm(x: &SeqMatrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<SeqMatrix> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(MahaError::Shape(format!(
            "layer_norm: gain/bias length {}/{} vs {d} features",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = SeqMatrix::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let or = out.row_mut(i);
        for j in 0..d {
            or[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    Ok(out)
}

/// Backward for [`layer_norm`]; returns `(d_x, d_gain, d_bias)`.
pub fn layer_norm_backward(
    x: &SeqMatrix,
    gain: &[f64],
    eps: f64,
    grad_out: &SeqMatrix,
) -> Result<(SeqMatrix, Vec<f64>, Vec<f64>)> {
    let d = x.cols();
    let mut d_x = SeqMatrix::zeros(x.rows(), d);
    let mut d_gain = vec![0.0; d];
    let mut d_bias = vec![0.0; d];
    for i in 0..x.rows() {
        let row = x.row(i);
        let g_row = grad_out.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
        let d_xhat: Vec<f64> = g_row.iter().zip(gain).map(|(&g, &w)| g * w).collect();
        let mean_dxhat = d_xhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat =
            d_xhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
        let dr = d_x.row_mut(i);
        for j in 0..d {
            dr[j] = inv * (d_xhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            d_gain[j] += g_row[j] * xhat[j];
            d_bias[j] += g_row[j];
        }
    }
    Ok((d_x, d_gain, d_bias))
}

// ── Tasks ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Predict the input sequence circularly shifted by one position.
    Copy,
    /// Binary label for the joint presence of a planted local bigram and a
    /// planted long-range token pair.
    PatternClassify,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskKind::Copy => "copy",
            TaskKind::PatternClassify => "pattern_classify",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskTarget {
    Tokens(Vec<usize>),
    Label(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub target: TaskTarget,
}

/// Marker tokens for the classification task.
const LOCAL_A: usize = 1;
const LOCAL_B: usize = 2;
const GLOBAL_MARK: usize = 3;

/// Deterministic sample stream for one task.
pub struct TaskGen {
    kind: TaskKind,
    n: usize,
    vocab: usize,
    rng: ChaCha8Rng,
}

pub fn make_task(kind: TaskKind, n: usize, vocab: usize, seed: u64) -> Result<TaskGen> {
    if vocab < 2 {
        return Err(MahaError::Config("task vocabulary must have at least 2 tokens".into()));
    }
    if kind == TaskKind::PatternClassify && (vocab < 5 || n < 8) {
        return Err(MahaError::Config(
            "pattern_classify needs vocab >= 5 and n >= 8 for its markers".into(),
        ));
    }
    Ok(TaskGen { kind, n, vocab, rng: ChaCha8Rng::seed_from_u64(seed) })
}

impl TaskGen {
    pub fn next_sample(&mut self) -> TaskSample {
        match self.kind {
            TaskKind::Copy => {
                let tokens: Vec<usize> =
                    (0..self.n).map(|_| self.rng.gen_range(0..self.vocab)).collect();
                let target: Vec<usize> =
                    (0..self.n).map(|i| tokens[(i + self.n - 1) % self.n]).collect();
                TaskSample { tokens, target: TaskTarget::Tokens(target) }
            }
            TaskKind::PatternClassify => {
                // Background tokens avoid the markers entirely, so a pattern
                // is present iff it was planted.
                let background: Vec<usize> = (0..self.vocab)
                    .filter(|&t| t != LOCAL_A && t != LOCAL_B && t != GLOBAL_MARK)
                    .collect();
                let mut tokens: Vec<usize> = (0..self.n)
                    .map(|_| background[self.rng.gen_range(0..background.len())])
                    .collect();
                let label = usize::from(self.rng.gen_bool(0.5));
                let plant_local = label == 1 || self.rng.gen_bool(0.5);
                let plant_global = label == 1 || !plant_local;
                if plant_global {
                    let p1 = self.rng.gen_range(0..self.n / 4);
                    let p2 = self.rng.gen_range(3 * self.n / 4..self.n);
                    tokens[p1] = GLOBAL_MARK;
                    tokens[p2] = GLOBAL_MARK;
                }
                if plant_local {
                    // Middle region only, disjoint from the global quarters.
                    let pos = self.rng.gen_range(self.n / 4..3 * self.n / 4 - 1);
                    tokens[pos] = LOCAL_A;
                    tokens[pos + 1] = LOCAL_B;
                }
                TaskSample { tokens, target: TaskTarget::Label(label) }
            }
        }
    }
}

// ── Model configuration ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub d: usize,
    pub d_k: usize,
    pub vocab: usize,
    pub n: usize,
    pub r: usize,
    pub depth: usize,
    pub downsample: DownsampleKind,
    pub include_base_scale: bool,
    pub gating: bool,
    pub dilated: bool,
    pub dilation: usize,
    pub method: AggMethod,
    pub solver: SolverConfig,
    pub lr: f64,
    pub steps: usize,
    /// Sequences per SGD step (gradients averaged over the batch).
    pub batch: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d: 32,
            d_k: 8,
            vocab: 16,
            n: 32,
            r: 2,
            depth: 2,
            downsample: DownsampleKind::StridedConv,
            include_base_scale: false,
            gating: true,
            dilated: true,
            dilation: 2,
            method: AggMethod::Co,
            solver: SolverConfig::default(),
            lr: 0.25,
            steps: 500,
            batch: 8,
            seed: 42,
        }
    }
}

impl ToyModelConfig {
    pub fn schedule(&self) -> Result<ScaleSchedule> {
        Ok(make_schedule(self.n, self.r, self.depth)?.with_base_scale(self.include_base_scale))
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d == 0 || self.d_k == 0 || self.steps == 0 || self.batch == 0
        {
            return Err(MahaError::Config(
                "layers, d, d_k, steps and batch must be positive".into(),
            ));
        }
        if self.lr < 0.0 {
            return Err(MahaError::Config("learning rate must be >= 0".into()));
        }
        self.solver.validate()
    }
}

// ── Parameters and gradients ────────────────────────────────────────

#[derive(Debug, Clone)]
struct BlockParams {
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    layer: HybridParams,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
    ffn_w1: SeqMatrix,
    ffn_b1: Vec<f64>,
    ffn_w2: SeqMatrix,
    ffn_b2: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ModelParams {
    embed: SeqMatrix,
    pos_embed: SeqMatrix,
    blocks: Vec<BlockParams>,
    head_w: SeqMatrix,
    head_b: Vec<f64>,
}

struct BlockGrads {
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    layer: LayerGrads,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
    ffn_w1: SeqMatrix,
    ffn_b1: Vec<f64>,
    ffn_w2: SeqMatrix,
    ffn_b2: Vec<f64>,
}

struct ModelGrads {
    embed: SeqMatrix,
    pos_embed: SeqMatrix,
    blocks: Vec<BlockGrads>,
    head_w: SeqMatrix,
    head_b: Vec<f64>,
}

fn head_dim(kind: TaskKind, vocab: usize) -> usize {
    match kind {
        TaskKind::Copy => vocab,
        TaskKind::PatternClassify => 2,
    }
}

fn init_params(
    cfg: &ToyModelConfig,
    schedule: &ScaleSchedule,
    kind: TaskKind,
    rng: &mut ChaCha8Rng,
) -> ModelParams {
    let d = cfg.d;
    let hidden = 2 * d;
    let blocks = (0..cfg.layers)
        .map(|_| BlockParams {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            layer: HybridParams::init(
                schedule,
                d,
                cfg.d_k,
                cfg.downsample,
                cfg.solver,
                cfg.gating,
                cfg.dilated,
                cfg.dilation,
                rng,
            ),
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            ffn_w1: SeqMatrix::init_uniform(d, hidden, d, rng),
            ffn_b1: vec![0.0; hidden],
            ffn_w2: SeqMatrix::init_uniform(hidden, d, hidden, rng),
            ffn_b2: vec![0.0; d],
        })
        .collect();
    ModelParams {
        embed: SeqMatrix::init_uniform(cfg.vocab, d, d, rng),
        pos_embed: SeqMatrix::init_uniform(cfg.n, d, d, rng),
        blocks,
        head_w: SeqMatrix::init_uniform(d, head_dim(kind, cfg.vocab), d, rng),
        head_b: vec![0.0; head_dim(kind, cfg.vocab)],
    }
}

// ── Forward / backward ──────────────────────────────────────────────

struct BlockTrace {
    h_in: SeqMatrix,
    lay_out: LayerOutput,
    lay_tape: LayerTape,
    h2: SeqMatrix,
    v: SeqMatrix,
    pre: SeqMatrix,
    act: SeqMatrix,
}

struct ForwardState {
    tokens: Vec<usize>,
    h_final: SeqMatrix,
    blocks: Vec<BlockTrace>,
}

fn model_forward(
    params: &ModelParams,
    cfg: &ToyModelConfig,
    schedule: &ScaleSchedule,
    tokens: &[usize],
) -> Result<ForwardState> {
    let mut h = SeqMatrix::zeros(cfg.n, cfg.d);
    for (i, &t) in tokens.iter().enumerate() {
        for ((o, &e), &p) in
            h.row_mut(i).iter_mut().zip(params.embed.row(t)).zip(params.pos_embed.row(i))
        {
            *o = e + p;
        }
    }
    let mut traces = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let u = layer_norm(&h, &block.ln1_gain, &block.ln1_bias, LN_EPS)?;
        let (lay_out, lay_tape) = maha_layer_traced(&u, &block.layer, schedule, cfg.method)?;
        // Pre-norm residual: h + O*, where O* = lay_out.y - u.
        let mut h2 = h.add(&lay_out.y)?;
        h2.axpy(-1.0, &u)?;
        let v = layer_norm(&h2, &block.ln2_gain, &block.ln2_bias, LN_EPS)?;
        let mut pre = matmul(&v, &block.ffn_w1)?;
        for i in 0..pre.rows() {
            for (p, b) in pre.row_mut(i).iter_mut().zip(&block.ffn_b1) {
                *p += b;
            }
        }
        let act = relu(&pre);
        let mut ffn = matmul(&act, &block.ffn_w2)?;
        for i in 0..ffn.rows() {
            for (p, b) in ffn.row_mut(i).iter_mut().zip(&block.ffn_b2) {
                *p += b;
            }
        }
        let h3 = h2.add(&ffn)?;
        traces.push(BlockTrace { h_in: h, lay_out, lay_tape, h2: h2.clone(), v, pre, act });
        h = h3;
    }
    Ok(ForwardState { tokens: tokens.to_vec(), h_final: h, blocks: traces })
}

fn col_sums(m: &SeqMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// Loss, head gradients, and the gradient flowing into the final hidden state.
fn head_loss(
    params: &ModelParams,
    state: &ForwardState,
    target: &TaskTarget,
) -> Result<(f64, SeqMatrix, SeqMatrix, Vec<f64>, bool)> {
    match target {
        TaskTarget::Tokens(targets) => {
            let mut logits = matmul(&state.h_final, &params.head_w)?;
            for i in 0..logits.rows() {
                for (p, b) in logits.row_mut(i).iter_mut().zip(&params.head_b) {
                    *p += b;
                }
            }
            logits.ensure_finite("task head logits")?;
            let probs = softmax_rows(&logits);
            let n = probs.rows();
            let mut loss = 0.0;
            let mut d_logits = probs.clone();
            let mut correct = 0usize;
            for (i, &t) in targets.iter().enumerate() {
                loss -= probs.get(i, t).max(1e-300).ln();
                d_logits.set(i, t, d_logits.get(i, t) - 1.0);
                let row = probs.row(i);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(j, _)| j)
                    .unwrap();
                correct += usize::from(argmax == t);
            }
            loss /= n as f64;
            let d_logits = d_logits.scale(1.0 / n as f64);
            let (d_h, d_head_w) = matmul_backward(&state.h_final, &params.head_w, &d_logits)?;
            let d_head_b = col_sums(&d_logits);
            Ok((loss, d_h, d_head_w, d_head_b, correct * 2 > n))
        }
        TaskTarget::Label(label) => {
            let n = state.h_final.rows();
            let mut pooled = SeqMatrix::zeros(1, state.h_final.cols());
            for i in 0..n {
                for (p, &v) in pooled.row_mut(0).iter_mut().zip(state.h_final.row(i)) {
                    *p += v / n as f64;
                }
            }
            let mut logits = matmul(&pooled, &params.head_w)?;
            for (p, b) in logits.row_mut(0).iter_mut().zip(&params.head_b) {
                *p += b;
            }
            logits.ensure_finite("task head logits")?;
            let probs = softmax_rows(&logits);
            let loss = -probs.get(0, *label).max(1e-300).ln();
            let mut d_logits = probs.clone();
            d_logits.set(0, *label, d_logits.get(0, *label) - 1.0);
            let (d_pooled, d_head_w) = matmul_backward(&pooled, &params.head_w, &d_logits)?;
            let d_head_b = col_sums(&d_logits);
            let mut d_h = SeqMatrix::zeros(n, state.h_final.cols());
            for i in 0..n {
                for (o, &g) in d_h.row_mut(i).iter_mut().zip(d_pooled.row(0)) {
                    *o = g / n as f64;
                }
            }
            let predicted = if probs.get(0, 1) > probs.get(0, 0) { 1 } else { 0 };
            Ok((loss, d_h, d_head_w, d_head_b, predicted == *label))
        }
    }
}

fn model_backward(
    params: &ModelParams,
    cfg: &ToyModelConfig,
    schedule: &ScaleSchedule,
    state: &ForwardState,
    d_h_final: SeqMatrix,
    d_head_w: SeqMatrix,
    d_head_b: Vec<f64>,
) -> Result<ModelGrads> {
    let mut d_h = d_h_final;
    let mut block_grads: Vec<BlockGrads> = Vec::with_capacity(params.blocks.len());
    for (block, trace) in params.blocks.iter().zip(&state.blocks).rev() {
        // h3 = h2 + ffn(ln2(h2))
        let d_h3 = d_h;
        let (d_act, d_w2) = matmul_backward(&trace.act, &block.ffn_w2, &d_h3)?;
        let d_b2 = col_sums(&d_h3);
        let d_pre = relu_backward(&trace.pre, &d_act)?;
        let (d_v, d_w1) = matmul_backward(&trace.v, &block.ffn_w1, &d_pre)?;
        let d_b1 = col_sums(&d_pre);
        let (d_h2_ln, d_g2, d_bb2) = layer_norm_backward(&trace.h2, &block.ln2_gain, LN_EPS, &d_v)?;
        let mut d_h2 = d_h3.clone();
        d_h2.axpy(1.0, &d_h2_ln)?;
        // h2 = h + layer(u).y - u
        let lay = maha_layer_backward(&trace.lay_tape, &block.layer, schedule, &d_h2)?;
        let mut d_u = lay.d_x.clone();
        d_u.axpy(-1.0, &d_h2)?;
        let (d_h_ln, d_g1, d_bb1) =
            layer_norm_backward(&trace.h_in, &block.ln1_gain, LN_EPS, &d_u)?;
        let mut d_h_prev = d_h2;
        d_h_prev.axpy(1.0, &d_h_ln)?;
        block_grads.push(BlockGrads {
            ln1_gain: d_g1,
            ln1_bias: d_bb1,
            layer: lay,
            ln2_gain: d_g2,
            ln2_bias: d_bb2,
            ffn_w1: d_w1,
            ffn_b1: d_b1,
            ffn_w2: d_w2,
            ffn_b2: d_b2,
        });
        d_h = d_h_prev;
    }
    block_grads.reverse();
    let mut d_embed = SeqMatrix::zeros(cfg.vocab, cfg.d);
    for (i, &t) in state.tokens.iter().enumerate() {
        for (e, &g) in d_embed.row_mut(t).iter_mut().zip(d_h.row(i)) {
            *e += g;
        }
    }
    Ok(ModelGrads {
        embed: d_embed,
        pos_embed: d_h,
        blocks: block_grads,
        head_w: d_head_w,
        head_b: d_head_b,
    })
}

fn add_scaled(target: &mut [f64], source: &[f64], s: f64) {
    for (t, &g) in target.iter_mut().zip(source) {
        *t += s * g;
    }
}

fn sgd_step(params: &mut ModelParams, grads: &ModelGrads, lr: f64) {
    let s = -lr;
    add_scaled(params.embed.data_mut(), grads.embed.data(), s);
    add_scaled(params.pos_embed.data_mut(), grads.pos_embed.data(), s);
    add_scaled(params.head_w.data_mut(), grads.head_w.data(), s);
    add_scaled(&mut params.head_b, &grads.head_b, s);
    for (block, g) in params.blocks.iter_mut().zip(&grads.blocks) {
        add_scaled(&mut block.ln1_gain, &g.ln1_gain, s);
        add_scaled(&mut block.ln1_bias, &g.ln1_bias, s);
        add_scaled(&mut block.ln2_gain, &g.ln2_gain, s);
        add_scaled(&mut block.ln2_bias, &g.ln2_bias, s);
        add_scaled(block.ffn_w1.data_mut(), g.ffn_w1.data(), s);
        add_scaled(&mut block.ffn_b1, &g.ffn_b1, s);
        add_scaled(block.ffn_w2.data_mut(), g.ffn_w2.data(), s);
        add_scaled(&mut block.ffn_b2, &g.ffn_b2, s);
        let layer = &mut block.layer;
        let lg = &g.layer;
        for (k, dk) in layer.dilated_kernels.iter_mut().zip(&lg.d_dilated_kernels) {
            add_scaled(k.data_mut(), dk.data(), s);
        }
        for (b, db) in layer.dilated_bias.iter_mut().zip(&lg.d_dilated_bias) {
            add_scaled(b, db, s);
        }
        add_scaled(layer.w_g.data_mut(), lg.d_wg.data(), s);
        for (w, dw) in layer.attn.w_q.iter_mut().zip(&lg.d_wq) {
            add_scaled(w.data_mut(), dw.data(), s);
        }
        for (w, dw) in layer.attn.w_k.iter_mut().zip(&lg.d_wk) {
            add_scaled(w.data_mut(), dw.data(), s);
        }
        add_scaled(layer.attn.w_v.data_mut(), lg.d_wv.data(), s);
        for (k, dk) in layer.down.kernels.iter_mut().zip(&lg.d_down_kernels) {
            add_scaled(k.data_mut(), dk.data(), s);
        }
    }
}

impl ModelGrads {
    fn accumulate(&mut self, other: &ModelGrads) {
        fn acc(a: &mut [f64], b: &[f64]) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        acc(self.embed.data_mut(), other.embed.data());
        acc(self.pos_embed.data_mut(), other.pos_embed.data());
        acc(self.head_w.data_mut(), other.head_w.data());
        acc(&mut self.head_b, &other.head_b);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            acc(&mut a.ln1_gain, &b.ln1_gain);
            acc(&mut a.ln1_bias, &b.ln1_bias);
            acc(&mut a.ln2_gain, &b.ln2_gain);
            acc(&mut a.ln2_bias, &b.ln2_bias);
            acc(a.ffn_w1.data_mut(), b.ffn_w1.data());
            acc(&mut a.ffn_b1, &b.ffn_b1);
            acc(a.ffn_w2.data_mut(), b.ffn_w2.data());
            acc(&mut a.ffn_b2, &b.ffn_b2);
            acc(a.layer.d_x.data_mut(), b.layer.d_x.data());
            for (k, dk) in a.layer.d_dilated_kernels.iter_mut().zip(&b.layer.d_dilated_kernels) {
                acc(k.data_mut(), dk.data());
            }
            for (bias, db) in a.layer.d_dilated_bias.iter_mut().zip(&b.layer.d_dilated_bias) {
                acc(bias, db);
            }
            acc(a.layer.d_wg.data_mut(), b.layer.d_wg.data());
            for (w, dw) in a.layer.d_wq.iter_mut().zip(&b.layer.d_wq) {
                acc(w.data_mut(), dw.data());
            }
            for (w, dw) in a.layer.d_wk.iter_mut().zip(&b.layer.d_wk) {
                acc(w.data_mut(), dw.data());
            }
            acc(a.layer.d_wv.data_mut(), b.layer.d_wv.data());
            for (k, dk) in a.layer.d_down_kernels.iter_mut().zip(&b.layer.d_down_kernels) {
                acc(k.data_mut(), dk.data());
            }
        }
    }

    /// Euclidean norm per named parameter group, for gradient-flow checks.
    fn group_norms(&self) -> Vec<(String, f64)> {
        fn norm(v: &[f64]) -> f64 {
            v.iter().map(|&x| x * x).sum::<f64>().sqrt()
        }
        let mut out = vec![
            ("embed".to_string(), norm(self.embed.data())),
            ("pos_embed".to_string(), norm(self.pos_embed.data())),
            ("head_w".to_string(), norm(self.head_w.data())),
            ("head_b".to_string(), norm(&self.head_b)),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}/ln1_gain"), norm(&b.ln1_gain)));
            out.push((format!("block{i}/ln1_bias"), norm(&b.ln1_bias)));
            out.push((format!("block{i}/ln2_gain"), norm(&b.ln2_gain)));
            out.push((format!("block{i}/ln2_bias"), norm(&b.ln2_bias)));
            out.push((format!("block{i}/ffn_w1"), norm(b.ffn_w1.data())));
            out.push((format!("block{i}/ffn_b1"), norm(&b.ffn_b1)));
            out.push((format!("block{i}/ffn_w2"), norm(b.ffn_w2.data())));
            out.push((format!("block{i}/ffn_b2"), norm(&b.ffn_b2)));
            out.push((format!("block{i}/w_g"), norm(b.layer.d_wg.data())));
            out.push((format!("block{i}/w_v"), norm(b.layer.d_wv.data())));
            for (s, w) in b.layer.d_wq.iter().enumerate() {
                out.push((format!("block{i}/w_q{s}"), norm(w.data())));
            }
            for (s, w) in b.layer.d_wk.iter().enumerate() {
                out.push((format!("block{i}/w_k{s}"), norm(w.data())));
            }
            for (s, k) in b.layer.d_dilated_kernels.iter().enumerate() {
                out.push((format!("block{i}/dilated_kernel{s}"), norm(k.data())));
            }
            for (s, bias) in b.layer.d_dilated_bias.iter().enumerate() {
                out.push((format!("block{i}/dilated_bias{s}"), norm(bias)));
            }
            for (l, k) in b.layer.d_down_kernels.iter().enumerate() {
                out.push((format!("block{i}/down_kernel{l}"), norm(k.data())));
            }
        }
        out
    }
}

// ── Training ────────────────────────────────────────────────────────

/// Everything logged during a run.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    /// `weights[step][layer]` are the aggregation weights used at that step.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Copy: mean loss over the last window. Classify: held-out accuracy.
    pub final_metric: f64,
}

/// Moving average with the given window (shorter prefixes use what exists).
pub fn smoothed_losses(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for i in 0..losses.len() {
        acc += losses[i];
        if i >= window {
            acc -= losses[i - window];
        }
        out.push(acc / (i.min(window - 1) + 1) as f64);
    }
    out
}

/// Plain SGD at a fixed learning rate, one sequence per step.
pub fn train(cfg: &ToyModelConfig, kind: TaskKind) -> Result<TrainTrace> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(cfg, &schedule, kind, &mut rng);
    let mut task = make_task(kind, cfg.n, cfg.vocab, cfg.seed.wrapping_add(1))?;

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut weights = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let outcome = (|| -> Result<(f64, ModelGrads, Vec<Vec<f64>>)> {
            let mut batch_loss = 0.0;
            let mut batch_grads: Option<ModelGrads> = None;
            let mut step_weights = Vec::new();
            for b in 0..cfg.batch {
                let sample = task.next_sample();
                let state = model_forward(&params, cfg, &schedule, &sample.tokens)?;
                let (loss, d_h, d_head_w, d_head_b, _) =
                    head_loss(&params, &state, &sample.target)?;
                batch_loss += loss;
                if b == 0 {
                    step_weights =
                        state.blocks.iter().map(|bl| bl.lay_out.weights.w.clone()).collect();
                }
                let grads =
                    model_backward(&params, cfg, &schedule, &state, d_h, d_head_w, d_head_b)?;
                match &mut batch_grads {
                    Some(acc) => acc.accumulate(&grads),
                    None => batch_grads = Some(grads),
                }
            }
            Ok((batch_loss / cfg.batch as f64, batch_grads.expect("batch >= 1"), step_weights))
        })();
        let (loss, grads, step_weights) = match outcome {
            Ok(v) => v,
            Err(MahaError::NonFinite { .. }) => {
                return Err(MahaError::Diverged { step, loss: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > DIVERGENCE_BOUND {
            return Err(MahaError::Diverged { step, loss });
        }
        losses.push(loss);
        weights.push(step_weights);
        sgd_step(&mut params, &grads, cfg.lr / cfg.batch as f64);
    }

    let final_metric = match kind {
        TaskKind::Copy => {
            let tail = losses.len().saturating_sub(50);
            let slice = &losses[tail..];
            slice.iter().sum::<f64>() / slice.len() as f64
        }
        TaskKind::PatternClassify => {
            let mut eval = make_task(kind, cfg.n, cfg.vocab, cfg.seed.wrapping_add(2))?;
            let mut correct = 0usize;
            let total = 200;
            for _ in 0..total {
                let sample = eval.next_sample();
                let state = model_forward(&params, cfg, &schedule, &sample.tokens)?;
                let (_, _, _, _, ok) = head_loss(&params, &state, &sample.target)?;
                correct += usize::from(ok);
            }
            correct as f64 / total as f64
        }
    };
    Ok(TrainTrace { losses, weights, final_metric })
}

/// One training step's gradient-group norms at initialization plus the
/// per-layer aggregation weights of that step (gradient-flow diagnostics; a
/// scale holding zero mixing weight legitimately receives zero gradient
/// through a vertex-supported solve).
pub fn initial_gradient_norms(
    cfg: &ToyModelConfig,
    kind: TaskKind,
) -> Result<(Vec<(String, f64)>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(cfg, &schedule, kind, &mut rng);
    let mut task = make_task(kind, cfg.n, cfg.vocab, cfg.seed.wrapping_add(1))?;
    let sample = task.next_sample();
    let state = model_forward(&params, cfg, &schedule, &sample.tokens)?;
    let (_, d_h, d_head_w, d_head_b, _) = head_loss(&params, &state, &sample.target)?;
    let grads = model_backward(&params, cfg, &schedule, &state, d_h, d_head_w, d_head_b)?;
    let weights = state.blocks.iter().map(|b| b.lay_out.weights.w.clone()).collect();
    Ok((grads.group_norms(), weights))
}

/// One forward pass of a freshly initialized model, returning each layer's
/// aggregation diagnostics (weights, iterations, objective trajectory).
pub fn solver_probe(cfg: &ToyModelConfig) -> Result<Vec<crate::aggregate::AggWeights>> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(cfg, &schedule, TaskKind::Copy, &mut rng);
    let mut task = make_task(TaskKind::Copy, cfg.n, cfg.vocab, cfg.seed.wrapping_add(1))?;
    let sample = task.next_sample();
    let state = model_forward(&params, cfg, &schedule, &sample.tokens)?;
    Ok(state.blocks.iter().map(|b| b.lay_out.weights.clone()).collect())
}

/// Per-layer, per-scale attention matrices of a freshly initialized model on
/// one seeded sample (the heatmap export path).
pub fn attention_maps(cfg: &ToyModelConfig) -> Result<Vec<Vec<SeqMatrix>>> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(cfg, &schedule, TaskKind::Copy, &mut rng);
    let mut task = make_task(TaskKind::Copy, cfg.n, cfg.vocab, cfg.seed.wrapping_add(1))?;
    let sample = task.next_sample();
    let state = model_forward(&params, cfg, &schedule, &sample.tokens)?;
    Ok(state.blocks.iter().map(|b| b.lay_out.scales.attn.clone()).collect())
}

// ── Ablations ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AggAblationRow {
    pub method: AggMethod,
    pub final_metric: f64,
    pub secs_per_step: f64,
    /// Wall-clock relative to the CO run.
    pub wallclock_rel: f64,
}

#[derive(Debug)]
pub struct AggAblation {
    pub rows: Vec<AggAblationRow>,
    pub traces: Vec<(AggMethod, TrainTrace)>,
}

/// Trains co, ne and mean from the same seed and initialization.
pub fn ablate_aggregation(cfg: &ToyModelConfig, kind: TaskKind) -> Result<AggAblation> {
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut co_secs = 0.0;
    for method in [AggMethod::Co, AggMethod::Ne, AggMethod::Mean] {
        let mut run_cfg = cfg.clone();
        run_cfg.method = method;
        let start = Instant::now();
        let trace = train(&run_cfg, kind)?;
        let secs = start.elapsed().as_secs_f64();
        let secs_per_step = secs / cfg.steps as f64;
        if method == AggMethod::Co {
            co_secs = secs_per_step;
        }
        rows.push(AggAblationRow {
            method,
            final_metric: trace.final_metric,
            secs_per_step,
            wallclock_rel: if co_secs > 0.0 { secs_per_step / co_secs } else { 1.0 },
        });
        traces.push((method, trace));
    }
    Ok(AggAblation { rows, traces })
}

#[derive(Debug, Clone)]
pub struct ScaleAblationRow {
    pub depth: usize,
    pub final_metric: f64,
    pub wallclock_rel: f64,
}

/// Trains one model per hierarchy depth. Infeasible depths fail fast with the
/// schedule's config error.
pub fn ablate_scales(
    cfg: &ToyModelConfig,
    kind: TaskKind,
    depths: &[usize],
) -> Result<Vec<ScaleAblationRow>> {
    for &depth in depths {
        make_schedule(cfg.n, cfg.r, depth)?;
    }
    let mut rows = Vec::new();
    let mut first_secs = 0.0;
    for &depth in depths {
        let mut run_cfg = cfg.clone();
        run_cfg.depth = depth;
        let start = Instant::now();
        let trace = train(&run_cfg, kind)?;
        let secs = start.elapsed().as_secs_f64();
        if first_secs == 0.0 {
            first_secs = secs;
        }
        rows.push(ScaleAblationRow {
            depth,
            final_metric: trace.final_metric,
            wallclock_rel: if first_secs > 0.0 { secs / first_secs } else { 1.0 },
        });
    }
    Ok(rows)
}
