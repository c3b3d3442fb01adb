//! Analytical cost model for standard attention vs the hierarchical layer,
//! plus the sweep harness behind the scaling figures.
//!
//! Two metrics are reported everywhere: `score_entries` counts attention
//! matrix cells (`sum of n_l^2`), which is what the headline reduction figures
//! measure, and `full_macs` counts multiply-accumulates across projections,
//! scores, attention-value products, downsampling and the weight solver.

use serde::{Deserialize, Serialize};

use crate::error::{MahaError, Result};
use crate::pyramid::DownsampleKind;

/// Scale lengths used by the absolute policy, finest first.
pub const ABSOLUTE_LENGTHS: [usize; 4] = [256, 128, 64, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    ScoreEntries,
    FullMacs,
}

impl std::fmt::Display for CountMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CountMode::ScoreEntries => "score_entries",
            CountMode::FullMacs => "full_macs",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// `n_l = floor(n_{l-1} / r)`, lengths grow with the input.
    Proportional,
    /// The fixed lengths of [`ABSOLUTE_LENGTHS`] regardless of `n`.
    Absolute,
}

impl std::fmt::Display for ScalePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScalePolicy::Proportional => "proportional",
            ScalePolicy::Absolute => "absolute",
        };
        write!(f, "{s}")
    }
}

/// Model dimensions the MAC counts depend on.
#[derive(Debug, Clone, Copy)]
pub struct FlopsConfig {
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub kernel: usize,
    pub solver_iters: usize,
    pub r: usize,
    pub depth: usize,
    pub downsample: DownsampleKind,
    /// Adds the full-resolution scale to the attention sum.
    pub include_base_scale: bool,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_k: 8,
            d_v: 32,
            kernel: 3,
            solver_iters: 50,
            r: 2,
            depth: 4,
            downsample: DownsampleKind::StridedConv,
            include_base_scale: false,
        }
    }
}

/// Per-configuration operation counts.
#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub n: usize,
    pub per_scale_score_entries: Vec<u64>,
    pub total_score_entries: u64,
    pub total_macs: u64,
    pub baseline_score_entries: u64,
    pub baseline_macs: u64,
    /// `maha / baseline` for the selected metric.
    pub ratio: f64,
    /// `1 - ratio`.
    pub reduction_ratio: f64,
    pub metric: CountMode,
}

/// Attention score entries of standard attention: `n^2`.
pub fn mha_score_entries(n: usize) -> u64 {
    (n as u64) * (n as u64)
}

fn mha_macs(n: usize, cfg: &FlopsConfig) -> u64 {
    let (n, d, d_k, d_v) = (n as u64, cfg.d as u64, cfg.d_k as u64, cfg.d_v as u64);
    2 * n * d * d_k + n * d * d_v + n * n * d_k + n * n * d_v
}

/// Scale lengths for a policy, finest first.
pub fn policy_lengths(policy: ScalePolicy, n: usize, cfg: &FlopsConfig) -> Vec<usize> {
    let mut lengths = match policy {
        ScalePolicy::Proportional => {
            let mut cur = n;
            let mut out = Vec::with_capacity(cfg.depth);
            for _ in 0..cfg.depth {
                cur /= cfg.r;
                if cur == 0 {
                    break;
                }
                out.push(cur);
            }
            out
        }
        ScalePolicy::Absolute => ABSOLUTE_LENGTHS.to_vec(),
    };
    if cfg.include_base_scale {
        lengths.insert(0, n);
    }
    lengths
}

/// Operation counts for one set of scale lengths at input length `n`.
pub fn maha_cost(lengths: &[usize], n: usize, cfg: &FlopsConfig, mode: CountMode) -> Result<FlopsReport> {
    if lengths.is_empty() {
        return Err(MahaError::Config("maha_cost: empty scale lengths".into()));
    }
    let per_scale: Vec<u64> = lengths.iter().map(|&l| (l as u64) * (l as u64)).collect();
    let total_score_entries: u64 = per_scale.iter().sum();

    let (d, d_k, d_v) = (cfg.d as u64, cfg.d_k as u64, cfg.d_v as u64);
    let mut macs = (n as u64) * d * d_v; // shared value projection, once
    for &nl in lengths {
        let nl = nl as u64;
        macs += 2 * nl * d * d_k; // per-scale Q, K projections
        macs += nl * nl * d_k; // scores
        macs += nl * nl * d_v; // attention-value products
    }
    // Downsampling chains (representation and values); pooling has no MACs,
    // nearest-neighbor upsampling has none either.
    if cfg.downsample == DownsampleKind::StridedConv {
        for &nl in lengths.iter().filter(|&&l| l != n) {
            let nl = nl as u64;
            macs += nl * (cfg.kernel as u64) * d * d;
            macs += nl * (cfg.kernel as u64) * d_v * d_v;
        }
    }
    // Weight solver: K sweeps of L inner products over (n x d_v) candidates.
    macs += (cfg.solver_iters as u64) * (lengths.len() as u64) * (n as u64) * d_v;

    let baseline_score_entries = mha_score_entries(n);
    let baseline_macs = mha_macs(n, cfg);
    let (maha, baseline) = match mode {
        CountMode::ScoreEntries => (total_score_entries, baseline_score_entries),
        CountMode::FullMacs => (macs, baseline_macs),
    };
    let ratio = maha as f64 / baseline as f64;
    Ok(FlopsReport {
        n,
        per_scale_score_entries: per_scale,
        total_score_entries,
        total_macs: macs,
        baseline_score_entries,
        baseline_macs,
        ratio,
        reduction_ratio: 1.0 - ratio,
        metric: mode,
    })
}

/// Closed form of the geometric bound: `n^2 / (r^2 - 1)`.
pub fn asymptotic_bound(n: usize, r: usize) -> Result<f64> {
    if r < 2 {
        return Err(MahaError::Config(format!("asymptotic bound needs r >= 2, got {r}")));
    }
    let n = n as f64;
    let r = r as f64;
    Ok(n * n / (r * r - 1.0))
}

/// One sweep row: a single `(n, policy, metric)` combination.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub policy: ScalePolicy,
    pub metric: CountMode,
    pub baseline: u64,
    pub maha: u64,
    pub ratio: f64,
    pub reduction_pct: f64,
    /// Set when the hierarchy does not pay off (`ratio >= 1`).
    pub degenerate: bool,
}

/// Full sweep across input lengths, both policies and both metrics unless
/// restricted. Lengths must be ascending.
pub fn bench_sweep(
    lengths: &[usize],
    cfg: &FlopsConfig,
    policies: &[ScalePolicy],
    metrics: &[CountMode],
) -> Result<Vec<BenchRow>> {
    if lengths.is_empty() {
        return Err(MahaError::Config("bench_sweep: empty length list".into()));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MahaError::Config("bench_sweep: lengths must be strictly ascending".into()));
    }
    let mut rows = Vec::new();
    for &n in lengths {
        for &policy in policies {
            let scale_lengths = policy_lengths(policy, n, cfg);
            if scale_lengths.is_empty() {
                return Err(MahaError::Config(format!(
                    "bench_sweep: n={n} too short for the {policy} policy at r={}",
                    cfg.r
                )));
            }
            for &metric in metrics {
                let report = maha_cost(&scale_lengths, n, cfg, metric)?;
                let (maha, baseline) = match metric {
                    CountMode::ScoreEntries => {
                        (report.total_score_entries, report.baseline_score_entries)
                    }
                    CountMode::FullMacs => (report.total_macs, report.baseline_macs),
                };
                rows.push(BenchRow {
                    n,
                    policy,
                    metric,
                    baseline,
                    maha,
                    ratio: report.ratio,
                    reduction_pct: report.reduction_ratio * 100.0,
                    degenerate: report.ratio >= 1.0,
                });
            }
        }
    }
    Ok(rows)
}

/// Wall-clock comparison row produced by [`timing_sweep`].
#[derive(Debug, Clone)]
pub struct TimingRow {
    pub n: usize,
    pub baseline_secs: f64,
    pub maha_secs: f64,
}

/// Measures the hierarchical attention forward against full-resolution
/// attention at each length. Rows run serially.
pub fn timing_sweep(lengths: &[usize], d: usize, d_k: usize, seed: u64) -> Result<Vec<TimingRow>> {
    use crate::attention::{maha_attention, scaled_dot_attention, ScaleAttnParams};
    use crate::pyramid::{build_pyramid, make_schedule, DownsampleParams};
    use crate::tensor::{matmul, SeqMatrix};
    use rand::SeedableRng;
    use std::time::Instant;

    let mut rows = Vec::new();
    for &n in lengths {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = SeqMatrix::init_uniform(n, d, d, &mut rng);
        let schedule = make_schedule(n, 2, 4)?;
        let down = DownsampleParams::pool();
        let params = ScaleAttnParams::init(4, d, d_k, d, &mut rng);
        let pyramid = build_pyramid(&x, &down, &schedule)?;

        let w_q = SeqMatrix::init_uniform(d, d_k, d, &mut rng);
        let w_k = SeqMatrix::init_uniform(d, d_k, d, &mut rng);
        let w_v = SeqMatrix::init_uniform(d, d, d, &mut rng);

        let t0 = Instant::now();
        let q = matmul(&x, &w_q)?;
        let k = matmul(&x, &w_k)?;
        let a = scaled_dot_attention(&q, &k, d_k)?;
        let v = matmul(&x, &w_v)?;
        let _o = matmul(&a, &v)?;
        let baseline_secs = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let _outs = maha_attention(&pyramid, &params, &down)?;
        let maha_secs = t1.elapsed().as_secs_f64();

        rows.push(TimingRow { n, baseline_secs, maha_secs });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_examples() {
        assert_eq!(mha_score_entries(4096), 16_777_216);
        assert_eq!(mha_score_entries(1), 1);
        assert_eq!(mha_score_entries(512), 262_144);
    }

    #[test]
    fn absolute_policy_score_entries() {
        // 32^2 + 64^2 + 128^2 + 256^2.
        let report = maha_cost(
            &ABSOLUTE_LENGTHS,
            4096,
            &FlopsConfig::default(),
            CountMode::ScoreEntries,
        )
        .unwrap();
        assert_eq!(report.total_score_entries, 87_040);
        assert!(report.reduction_ratio > 0.81);
    }

    #[test]
    fn proportional_policy_score_entries_at_4096() {
        // 2048^2 + 1024^2 + 512^2 + 256^2 = 5,570,560 = (85/256) * 4096^2.
        let lengths = policy_lengths(ScalePolicy::Proportional, 4096, &FlopsConfig::default());
        assert_eq!(lengths, vec![2048, 1024, 512, 256]);
        let report =
            maha_cost(&lengths, 4096, &FlopsConfig::default(), CountMode::ScoreEntries).unwrap();
        assert_eq!(report.total_score_entries, 5_570_560);
        assert!((report.ratio - 85.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn single_scale_matches_baseline() {
        let report =
            maha_cost(&[512], 512, &FlopsConfig::default(), CountMode::ScoreEntries).unwrap();
        assert_eq!(report.total_score_entries, report.baseline_score_entries);
        assert_eq!(report.ratio, 1.0);
    }

    #[test]
    fn asymptotic_bound_examples() {
        assert!((asymptotic_bound(4096, 2).unwrap() - 16_777_216.0 / 3.0).abs() < 1e-9);
        assert!((asymptotic_bound(512, 2).unwrap() - 262_144.0 / 3.0).abs() < 1e-9);
        assert!(asymptotic_bound(512, 1).is_err());
        // Large ratios push the bound toward zero relative to n^2.
        let b = asymptotic_bound(4096, 100).unwrap();
        assert!(b / (4096.0 * 4096.0) < 1e-3);
    }

    #[test]
    fn partial_sum_bound_holds_exactly() {
        // Integer comparison: sum * (r^2 - 1) <= n^2.
        for n in [128usize, 256, 512, 1024, 2048, 4096, 8192] {
            for r in [2usize, 3] {
                let cfg = FlopsConfig { r, ..Default::default() };
                let lengths = policy_lengths(ScalePolicy::Proportional, n, &cfg);
                let sum: u64 = lengths.iter().map(|&l| (l as u64) * (l as u64)).sum();
                let bound_num = (n as u64) * (n as u64);
                assert!(
                    sum * ((r * r - 1) as u64) <= bound_num,
                    "n={n} r={r}: {sum} vs {bound_num}/{}",
                    r * r - 1
                );
            }
        }
    }

    #[test]
    fn score_entries_monotone_in_depth_and_lengths() {
        let cfg = FlopsConfig::default();
        let a = maha_cost(&[64, 32], 512, &cfg, CountMode::ScoreEntries).unwrap();
        let b = maha_cost(&[64, 32, 16], 512, &cfg, CountMode::ScoreEntries).unwrap();
        let c = maha_cost(&[128, 32], 512, &cfg, CountMode::ScoreEntries).unwrap();
        assert!(b.total_score_entries >= a.total_score_entries);
        assert!(c.total_score_entries >= a.total_score_entries);
    }

    #[test]
    fn proportional_ratio_constant_across_doubling() {
        let cfg = FlopsConfig::default();
        let lengths: Vec<usize> = (0..6).map(|i| 128 << i).collect();
        let rows = bench_sweep(&lengths, &cfg, &[ScalePolicy::Proportional], &[CountMode::ScoreEntries])
            .unwrap();
        for row in &rows {
            assert!((row.ratio - 85.0 / 256.0).abs() < 1e-12, "n={} ratio={}", row.n, row.ratio);
        }
    }

    #[test]
    fn degenerate_sweep_flagged() {
        // Absolute lengths at n = 256 include the full length; ratio >= 1.
        let cfg = FlopsConfig::default();
        let rows =
            bench_sweep(&[256], &cfg, &[ScalePolicy::Absolute], &[CountMode::ScoreEntries]).unwrap();
        assert!(rows[0].degenerate);
        assert!(rows[0].ratio >= 1.0);
    }

    /// Optional timing mode: hierarchical attention should scale
    /// sub-quadratically while the full-attention baseline is ~quadratic.
    /// Wall-clock measurements are machine-dependent, so this runs on demand:
    /// `cargo test -p maha-core timing_slope -- --ignored`.
    #[test]
    #[ignore]
    fn timing_slope_is_subquadratic() {
        let lengths = [256usize, 512, 1024, 2048];
        let rows = timing_sweep(&lengths, 32, 8, 7).unwrap();
        let slope = |xs: &[f64], ys: &[f64]| {
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            num / den
        };
        let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
        let maha: Vec<f64> = rows.iter().map(|r| r.maha_secs.ln()).collect();
        let maha_slope = slope(&xs, &maha);
        assert!(maha_slope < 1.9, "log-log slope {maha_slope}");
    }

    #[test]
    fn sweep_rejects_bad_lengths() {
        let cfg = FlopsConfig::default();
        assert!(bench_sweep(&[], &cfg, &[ScalePolicy::Proportional], &[CountMode::ScoreEntries])
            .is_err());
        assert!(bench_sweep(
            &[512, 256],
            &cfg,
            &[ScalePolicy::Proportional],
            &[CountMode::ScoreEntries]
        )
        .is_err());
    }
}
