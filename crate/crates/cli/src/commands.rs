//! Command implementations. Every command validates its inputs, runs the
//! corresponding library pipeline, writes CSV/PGM artifacts plus the resolved
//! config into the output directory, and reports through the exit-code
//! contract.

use std::path::{Path, PathBuf};

use maha_core::aggregate::AggMethod;
use maha_core::checks::{run_gradcheck_suites, GradCheckConfig};
use maha_core::flops::{bench_sweep, timing_sweep, CountMode, FlopsConfig, ScalePolicy};
use maha_core::heatmap::{export_heatmap, HeatmapFormat, HeatmapSpec, Normalization};
use maha_core::toymodel::{ablate_aggregation, ablate_scales, attention_maps, solver_probe, train};
use maha_core::toymodel::{smoothed_losses, TrainTrace};

use crate::config::{MetricChoice, PolicyChoice, RunConfig};
use crate::error::{CliError, Result};
use crate::io::{atomic_write, Csv};

fn persist_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    atomic_write(&out.join("resolved_config.json"), cfg.resolved_json().as_bytes())
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(&cfg.output.directory)
}

// ── bench ───────────────────────────────────────────────────────────

fn flops_config(cfg: &RunConfig) -> FlopsConfig {
    FlopsConfig {
        d: cfg.model.d,
        d_k: cfg.model.d_k,
        d_v: cfg.model.d,
        kernel: maha_core::pyramid::DEFAULT_KERNEL,
        solver_iters: cfg.solver.iters,
        r: cfg.model.r,
        depth: 4,
        downsample: cfg.model.downsample_kind,
        include_base_scale: cfg.model.include_base_scale,
    }
}

/// Writes `flops.csv` (and optionally `timing.csv`) for the configured
/// lengths, policies, and metrics.
pub fn cmd_bench(cfg: &RunConfig, timing: bool) -> Result<()> {
    let out = out_dir(cfg);
    persist_config(cfg, &out)?;
    if cfg.bench.lengths.is_empty() {
        return Err(CliError::Config("bench.lengths must not be empty".into()));
    }
    let policies: &[ScalePolicy] = match cfg.bench.policy {
        PolicyChoice::Both => &[ScalePolicy::Proportional, ScalePolicy::Absolute],
        PolicyChoice::Proportional => &[ScalePolicy::Proportional],
        PolicyChoice::Absolute => &[ScalePolicy::Absolute],
    };
    let metrics: &[CountMode] = match cfg.bench.metric {
        MetricChoice::Both => &[CountMode::ScoreEntries, CountMode::FullMacs],
        MetricChoice::ScoreEntries => &[CountMode::ScoreEntries],
        MetricChoice::FullMacs => &[CountMode::FullMacs],
    };
    let rows = bench_sweep(&cfg.bench.lengths, &flops_config(cfg), policies, metrics)?;
    let mut csv = Csv::new("n,policy,metric,baseline,maha,ratio,reduction_pct");
    for row in &rows {
        if row.degenerate {
            eprintln!(
                "warning: n={} under the {} policy gains nothing (ratio {:.3} >= 1)",
                row.n, row.policy, row.ratio
            );
        }
        csv.row(&[
            row.n.to_string(),
            row.policy.to_string(),
            row.metric.to_string(),
            row.baseline.to_string(),
            row.maha.to_string(),
            row.ratio.to_string(),
            row.reduction_pct.to_string(),
        ]);
    }
    csv.write(&out.join("flops.csv"))?;

    if timing {
        let rows = timing_sweep(&cfg.bench.lengths, cfg.model.d, cfg.model.d_k, cfg.train.seed)?;
        let mut csv = Csv::new("n,baseline_secs,maha_secs");
        for row in &rows {
            csv.row(&[
                row.n.to_string(),
                row.baseline_secs.to_string(),
                row.maha_secs.to_string(),
            ]);
        }
        csv.write(&out.join("timing.csv"))?;
    }
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

fn write_loss_curve(trace: &TrainTrace, path: &Path) -> Result<()> {
    let mut csv = Csv::new("step,loss");
    for (step, loss) in trace.losses.iter().enumerate() {
        csv.row(&[step.to_string(), loss.to_string()]);
    }
    csv.write(path)
}

fn write_weights(trace: &TrainTrace, path: &Path) -> Result<()> {
    let layers = trace.weights.first().map(|w| w.len()).unwrap_or(0);
    let scales = trace.weights.first().and_then(|w| w.first()).map(|w| w.len()).unwrap_or(0);
    let mut header = "step,loss".to_string();
    for layer in 0..layers {
        for s in 1..=scales {
            header.push_str(&format!(",layer{layer}_w{s}"));
        }
    }
    let mut csv = Csv::new(&header);
    for (step, per_layer) in trace.weights.iter().enumerate() {
        let mut fields = vec![step.to_string(), trace.losses[step].to_string()];
        for layer in per_layer {
            for w in layer {
                fields.push(w.to_string());
            }
        }
        csv.row(&fields);
    }
    csv.write(path)
}

/// Trains on the configured task and writes `loss_curve.csv` and
/// `weights.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg);
    persist_config(cfg, &out)?;
    let toy = cfg.toy_config()?;
    let kind = cfg.task_kind()?;
    let trace = train(&toy, kind)?;
    write_loss_curve(&trace, &out.join("loss_curve.csv"))?;
    write_weights(&trace, &out.join("weights.csv"))?;
    println!(
        "trained {} steps on {kind}; final metric {}",
        toy.steps, trace.final_metric
    );
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggChoice {
    One(AggMethod),
    All,
}

/// Aggregation-method and scale-count ablations. Writes per-method loss
/// curves, the comparison table, solver convergence traces, and (optionally)
/// the scale table.
pub fn cmd_ablate(cfg: &RunConfig, agg: AggChoice, scales: Option<&[usize]>) -> Result<()> {
    let out = out_dir(cfg);
    persist_config(cfg, &out)?;
    let toy = cfg.toy_config()?;
    let kind = cfg.task_kind()?;

    match agg {
        AggChoice::All => {
            let ablation = ablate_aggregation(&toy, kind)?;
            let mut table = Csv::new("method,metric,wallclock_rel");
            for row in &ablation.rows {
                table.row(&[
                    row.method.to_string(),
                    row.final_metric.to_string(),
                    row.wallclock_rel.to_string(),
                ]);
            }
            table.write(&out.join("agg_ablation.csv"))?;
            for (method, trace) in &ablation.traces {
                write_loss_curve(trace, &out.join(format!("loss_curve_{method}.csv")))?;
            }
            let mut solver = Csv::new("method,iter,objective");
            for method in [AggMethod::Co, AggMethod::Ne, AggMethod::Mean] {
                let probe = solver_probe(&maha_core::toymodel::ToyModelConfig {
                    method,
                    ..toy.clone()
                })?;
                for (iter, obj) in probe[0].objective_trace.iter().enumerate() {
                    solver.row(&[method.to_string(), iter.to_string(), obj.to_string()]);
                }
            }
            solver.write(&out.join("solver_trace.csv"))?;
        }
        AggChoice::One(method) => {
            let trace = train(
                &maha_core::toymodel::ToyModelConfig { method, ..toy.clone() },
                kind,
            )?;
            write_loss_curve(&trace, &out.join(format!("loss_curve_{method}.csv")))?;
        }
    }

    if let Some(depths) = scales {
        let rows = ablate_scales(&toy, kind, depths)?;
        let mut table = Csv::new("L,metric,wallclock_rel");
        for row in &rows {
            table.row(&[
                row.depth.to_string(),
                row.final_metric.to_string(),
                row.wallclock_rel.to_string(),
            ]);
        }
        table.write(&out.join("scale_ablation.csv"))?;
    }
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────

/// Runs every finite-difference suite at the configured (tiny) sizes.
/// Exit 0 iff all checks pass; larger configs are refused.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg);
    persist_config(cfg, &out)?;
    if cfg.model.n > 32 {
        return Err(CliError::Config(format!(
            "gradcheck is restricted to n <= 32, got {}",
            cfg.model.n
        )));
    }
    let check_cfg = GradCheckConfig {
        n: cfg.model.n,
        d: cfg.model.d,
        d_k: cfg.model.d_k,
        depth: cfg.model.l,
        seed: cfg.train.seed,
    };
    let checks = run_gradcheck_suites(&check_cfg)?;
    let mut failures = Vec::new();
    for check in &checks {
        println!(
            "{} {} (max rel err {:.3e}, tol {:.0e})",
            if check.report.pass { "PASS" } else { "FAIL" },
            check.name,
            check.report.max_rel_err,
            check.report.tolerance
        );
        if !check.report.pass {
            failures.push(format!("{} (rel err {:.3e})", check.name, check.report.max_rel_err));
        }
    }
    if failures.is_empty() {
        println!("all {} gradient checks passed", checks.len());
        Ok(())
    } else {
        Err(CliError::CheckFailed(failures.join("; ")))
    }
}

// ── heatmap ─────────────────────────────────────────────────────────

/// Exports per-scale attention matrices of a seed-instantiated model, one
/// file per scale per selected layer.
pub fn cmd_heatmap(cfg: &RunConfig, layer: Option<usize>) -> Result<()> {
    let out = out_dir(cfg);
    persist_config(cfg, &out)?;
    let toy = cfg.toy_config()?;
    let maps = attention_maps(&toy)?;
    let layers: Vec<usize> = match layer {
        Some(i) if i >= maps.len() => {
            return Err(CliError::Config(format!(
                "layer {i} out of range (model has {} layers)",
                maps.len()
            )))
        }
        Some(i) => vec![i],
        None => (0..maps.len()).collect(),
    };
    for &layer_idx in &layers {
        for (scale_idx, attn) in maps[layer_idx].iter().enumerate() {
            for &format in &cfg.output.formats {
                let spec = HeatmapSpec {
                    scale_index: scale_idx,
                    normalization: Normalization::GlobalMax,
                    format,
                };
                let bytes = export_heatmap(attn, &spec)?;
                let ext = match format {
                    HeatmapFormat::Pgm => "pgm",
                    HeatmapFormat::Csv => "csv",
                };
                atomic_write(
                    &out.join(format!("scale_{scale_idx}_layer_{layer_idx}.{ext}")),
                    &bytes,
                )?;
            }
        }
    }
    println!("wrote heatmaps for {} layer(s)", layers.len());
    Ok(())
}

// ── shared helpers for the acceptance suite and binary ──────────────

/// Smoothed-loss reduction between the first and last window of a run.
pub fn smoothed_reduction(trace: &TrainTrace, window: usize) -> f64 {
    let sm = smoothed_losses(&trace.losses, window);
    let first = sm[window.min(sm.len()) - 1];
    let last = *sm.last().unwrap();
    1.0 - last / first
}
