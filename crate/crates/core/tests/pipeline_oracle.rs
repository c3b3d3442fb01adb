//! Independent straight-line oracle for the attention pipeline.
//!
//! Everything here is written against plain `Vec<Vec<f64>>` with its own
//! small helpers, so it shares no computational path with the library. It
//! re-derives the per-scale attention outputs and the full layer output for
//! tiny seeded instances and compares them entry by entry.

use maha_core::aggregate::{AggMethod, SolverConfig};
use maha_core::attention::{maha_attention, ScaleAttnParams};
use maha_core::hybrid::{maha_layer, HybridParams};
use maha_core::pyramid::{build_pyramid, make_schedule, DownsampleKind, DownsampleParams};
use maha_core::{ConvKernel, SeqMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Grid = Vec<Vec<f64>>;

fn to_grid(m: &SeqMatrix) -> Grid {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn mat_prod(a: &Grid, b: &Grid) -> Grid {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut acc = 0.0;
            for (k, bk) in b.iter().enumerate() {
                acc += a[i][k] * bk[j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn row_softmax(rows: &Grid) -> Grid {
    rows.iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        })
        .collect()
}

fn max_pool_to(x: &Grid, n_out: usize) -> Grid {
    let rows = x.len();
    (0..n_out)
        .map(|i| {
            let start = i * rows / n_out;
            let end = ((i + 1) * rows).div_ceil(n_out);
            (0..x[0].len())
                .map(|c| (start..end).map(|r| x[r][c]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect()
}

/// Centered convolution over the token axis, zero outside the sequence.
fn conv(x: &Grid, kernel: &ConvKernel, stride: usize, dilation: usize) -> Grid {
    let rows = x.len();
    let out_rows = if stride > 1 { rows / stride } else { rows };
    let half = (kernel.k - 1) / 2;
    let mut out = vec![vec![0.0; kernel.d_out]; out_rows];
    for (j, out_row) in out.iter_mut().enumerate() {
        for t in 0..kernel.k {
            let pos = (j * stride) as isize + (t as isize - half as isize) * dilation as isize;
            if pos < 0 || pos >= rows as isize {
                continue;
            }
            for i in 0..kernel.d_in {
                for (o, slot) in out_row.iter_mut().enumerate() {
                    *slot += x[pos as usize][i] * kernel.at(t, i, o);
                }
            }
        }
    }
    out
}

fn repeat_up(o: &Grid, n: usize) -> Grid {
    (0..n).map(|i| o[i * o.len() / n].clone()).collect()
}

fn assert_grid_close(actual: &SeqMatrix, expected: &Grid, what: &str) {
    assert_eq!(actual.rows(), expected.len(), "{what}: row count");
    for i in 0..actual.rows() {
        for (j, &e) in expected[i].iter().enumerate() {
            let a = actual.get(i, j);
            assert!((a - e).abs() < 1e-12, "{what}[{i}][{j}]: {a} vs {e}");
        }
    }
}

#[test]
fn attention_matches_straight_line_reimplementation() {
    // Tiny instance: n = 8, d = 4, d_k = 2, two scales, pooled downsampling.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x = SeqMatrix::init_uniform(8, 4, 4, &mut rng);
    let schedule = make_schedule(8, 2, 2).unwrap();
    let down = DownsampleParams::pool();
    let params = ScaleAttnParams::init(2, 4, 2, 4, &mut rng);
    let pyramid = build_pyramid(&x, &down, &schedule).unwrap();
    let outs = maha_attention(&pyramid, &params, &down).unwrap();

    // Oracle: pool the inputs and the projected values level by level, then
    // per scale compute softmax(Q K' / sqrt(d_k)) V and repeat rows back up.
    let xg = to_grid(&x);
    let x1 = max_pool_to(&xg, 4);
    let x2 = max_pool_to(&x1, 2);
    let v_base = mat_prod(&xg, &to_grid(&params.w_v));
    let v1 = max_pool_to(&v_base, 4);
    let v2 = max_pool_to(&v1, 2);

    for (s, (x_l, v_l)) in [(x1, v1), (x2, v2)].into_iter().enumerate() {
        let q = mat_prod(&x_l, &to_grid(&params.w_q[s]));
        let k = mat_prod(&x_l, &to_grid(&params.w_k[s]));
        let n_l = q.len();
        let mut scores = vec![vec![0.0; n_l]; n_l];
        for i in 0..n_l {
            for j in 0..n_l {
                let dot: f64 = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum();
                scores[i][j] = dot / 2.0f64.sqrt();
            }
        }
        let a = row_softmax(&scores);
        let o = mat_prod(&a, &v_l);
        let up = repeat_up(&o, 8);
        assert_grid_close(&outs.attn[s], &a, &format!("A_{s}"));
        assert_grid_close(&outs.outputs[s], &o, &format!("O_{s}"));
        assert_grid_close(&outs.upsampled[s], &up, &format!("U_{s}"));
    }
}

#[test]
fn layer_matches_step_by_step_pipeline() {
    // n = 16, d = 8, two scales, strided conv downsampling, gating and
    // dilated blocks on, uniform mixing (the solver has its own oracle).
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let schedule = make_schedule(16, 2, 2).unwrap();
    let params = HybridParams::init(
        &schedule,
        8,
        4,
        DownsampleKind::StridedConv,
        SolverConfig::default(),
        true,
        true,
        2,
        &mut rng,
    );
    let x = SeqMatrix::init_uniform(16, 8, 8, &mut rng);
    let out = maha_layer(&x, &params, &schedule, AggMethod::Mean).unwrap();

    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let xg = to_grid(&x);

    // Gated pyramid: downsample, gate from the coarse result, re-downsample
    // the gated carrier.
    let mut carrier = xg.clone();
    let mut levels: Vec<Grid> = Vec::new();
    for level in 0..2 {
        let kernel = &params.down.kernels[level];
        let raw = conv(&carrier, kernel, 2, 1);
        let gate: Grid = mat_prod(&raw, &to_grid(&params.w_g))
            .into_iter()
            .map(|row| row.into_iter().map(sigmoid).collect())
            .collect();
        let gate_up = repeat_up(&gate, carrier.len());
        let gated: Grid = gate_up
            .iter()
            .zip(&carrier)
            .map(|(g, c)| g.iter().zip(c).map(|(a, b)| a * b).collect())
            .collect();
        let x_l = conv(&gated, kernel, 2, 1);
        levels.push(x_l.clone());
        carrier = x_l;
    }

    // Shared values, ungated.
    let v_base = mat_prod(&xg, &to_grid(&params.attn.w_v));
    let v1 = conv(&v_base, &params.down.kernels[0], 2, 1);
    let v2 = conv(&v1, &params.down.kernels[1], 2, 1);

    // Dilated residual blocks, then per-scale attention and upsampling.
    let mut upsampled: Vec<Grid> = Vec::new();
    for (s, (x_l, v_l)) in levels.iter().zip([&v1, &v2]).enumerate() {
        let mut pre = conv(x_l, &params.dilated_kernels[s], 1, 2);
        for row in &mut pre {
            for (v, b) in row.iter_mut().zip(&params.dilated_bias[s]) {
                *v += b;
            }
        }
        let x_prime: Grid = x_l
            .iter()
            .zip(&pre)
            .map(|(xr, pr)| xr.iter().zip(pr).map(|(a, p)| a + p.max(0.0)).collect())
            .collect();
        let q = mat_prod(&x_prime, &to_grid(&params.attn.w_q[s]));
        let k = mat_prod(&x_prime, &to_grid(&params.attn.w_k[s]));
        let n_l = q.len();
        let mut scores = vec![vec![0.0; n_l]; n_l];
        for i in 0..n_l {
            for j in 0..n_l {
                let dot: f64 = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum();
                scores[i][j] = dot / 2.0;
            }
        }
        let a = row_softmax(&scores);
        let o = mat_prod(&a, v_l);
        upsampled.push(repeat_up(&o, 16));
    }

    // Uniform mixing and the residual connection.
    let expected: Grid = (0..16)
        .map(|i| {
            (0..8)
                .map(|j| xg[i][j] + 0.5 * (upsampled[0][i][j] + upsampled[1][i][j]))
                .collect()
        })
        .collect();
    assert_eq!(out.weights.w, vec![0.5, 0.5]);
    assert_grid_close(&out.y, &expected, "layer output");
}
