//! Acceptance suite: one test per criterion, each printing a PASS line and
//! enforcing its tolerance and runtime budget.

use std::path::Path;
use std::time::Instant;

use maha_cli::config::{MetricChoice, PolicyChoice, RunConfig};
use maha_cli::{cmd_bench, cmd_gradcheck, cmd_heatmap, cmd_train};
use maha_core::aggregate::{co_solve, ne_improvement, ne_solve, AggMethod, SolverConfig};
use maha_core::checks::{run_gradcheck_suites, GradCheckConfig};
use maha_core::heatmap::parse_pgm;
use maha_core::pyramid::make_schedule;
use maha_core::toymodel::{ablate_aggregation, smoothed_losses, TaskKind, ToyModelConfig};
use maha_core::SeqMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SeqMatrix {
    SeqMatrix::init_uniform(rows, cols, 1, rng)
}

/// 50 seeded instances with L = 3 candidates of shape 12 x 4.
fn solver_instances() -> Vec<(Vec<SeqMatrix>, SeqMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(20260811);
    (0..50)
        .map(|_| {
            let cands: Vec<SeqMatrix> = (0..3).map(|_| rand_mat(12, 4, &mut rng)).collect();
            let target = rand_mat(12, 4, &mut rng);
            (cands, target)
        })
        .collect()
}

/// Exhaustive grid search over the 2-simplex at the given step count,
/// evaluating the reconstruction error through its Gram expansion.
fn grid_best_objective(cands: &[SeqMatrix], target: &SeqMatrix, steps: usize) -> f64 {
    let mut gram = [[0.0f64; 3]; 3];
    let mut load = [0.0f64; 3];
    for l in 0..3 {
        for m in 0..3 {
            gram[l][m] = cands[l].frob_inner(&cands[m]).unwrap();
        }
        load[l] = cands[l].frob_inner(target).unwrap();
    }
    let tt = target.frob_norm_sq();
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=(steps - i) {
            let w = [i as f64 / steps as f64, j as f64 / steps as f64, 0.0];
            let w2 = 1.0 - w[0] - w[1];
            let w = [w[0], w[1], w2];
            let mut quad = 0.0;
            let mut lin = 0.0;
            for l in 0..3 {
                lin += w[l] * load[l];
                for m in 0..3 {
                    quad += w[l] * gram[l][m] * w[m];
                }
            }
            best = best.min(quad - 2.0 * lin + tt);
        }
    }
    best
}

#[test]
fn criterion_1_flops_reduction() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.output.directory = dir.path().to_string_lossy().to_string();
    cfg.bench.lengths = vec![128, 256, 512, 1024, 2048, 4096];
    cfg.bench.policy = PolicyChoice::Both;
    cfg.bench.metric = MetricChoice::ScoreEntries;
    cmd_bench(&cfg, false).unwrap();

    let text = read(&dir.path().join("flops.csv"));
    let mut absolute = None;
    let mut proportional = None;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == "4096" && f[2] == "score_entries" {
            if f[1] == "absolute" {
                absolute = Some((f[3].to_string(), f[4].to_string(), f[6].parse::<f64>().unwrap()));
            } else if f[1] == "proportional" {
                proportional = Some(f[5].parse::<f64>().unwrap());
            }
        }
    }
    let (baseline, maha, reduction_pct) = absolute.expect("absolute row at n=4096");
    assert_eq!(baseline, "16777216");
    assert_eq!(maha, "87040");
    assert!(reduction_pct > 81.0, "reduction {reduction_pct}% must beat the claimed 81%");
    assert!((reduction_pct - 99.481201171875).abs() < 1e-9);
    let ratio = proportional.expect("proportional row at n=4096");
    assert!((ratio - 85.0 / 256.0).abs() < 1e-12, "proportional ratio {ratio}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget 1 s");
    println!("criterion 1 (flops reduction 99.48% >= 81% at n=4096): PASS in {elapsed:?}");
}

#[test]
fn criterion_2_geometric_bound() {
    let start = Instant::now();
    for exp in 7..=13 {
        let n = 1usize << exp; // 128 .. 8192
        for r in [2usize, 3] {
            let mut depth = 1;
            while let Ok(schedule) = make_schedule(n, r, depth) {
                let sum: u64 =
                    schedule.lengths.iter().map(|&l| (l as u64) * (l as u64)).sum();
                // Exact integer comparison of sum <= n^2 / (r^2 - 1).
                assert!(
                    sum * ((r * r - 1) as u64) <= (n as u64) * (n as u64),
                    "n={n} r={r} L={depth}: {sum}"
                );
                depth += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0);
    println!("criterion 2 (geometric bound, exact, all feasible L): PASS in {elapsed:?}");
}

#[test]
fn criterion_3_solver_optimality() {
    let start = Instant::now();
    let cfg = SolverConfig::default();
    for (i, (cands, target)) in solver_instances().iter().enumerate() {
        let solved = co_solve(cands, target, &cfg).unwrap();
        // The solver objective includes lambda * ||w||_1 = lambda on the simplex.
        let grid = grid_best_objective(cands, target, 1000) + cfg.lambda;
        assert!(
            solved.objective <= grid + 1e-6,
            "instance {i}: solver {} vs grid {grid}",
            solved.objective
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0);
    println!("criterion 3 (co_solve within 1e-6 of the 1e-3 grid oracle, 50 instances): PASS in {elapsed:?}");
}

#[test]
fn criterion_4_lambda_inertness() {
    let start = Instant::now();
    let zero = SolverConfig { lambda: 0.0, ..Default::default() };
    let reg = SolverConfig { lambda: 0.1, ..Default::default() };
    for (i, (cands, target)) in solver_instances().iter().enumerate() {
        let a = co_solve(cands, target, &zero).unwrap();
        let b = co_solve(cands, target, &reg).unwrap();
        for (x, y) in a.w.iter().zip(&b.w) {
            assert!((x - y).abs() < 1e-6, "instance {i}: weights {:?} vs {:?}", a.w, b.w);
        }
        let diff = b.objective - a.objective;
        assert!((diff - 0.1).abs() < 1e-9, "instance {i}: objective gap {diff}");
    }
    let elapsed = start.elapsed();
    println!("criterion 4 (lambda-inert weights, objectives differ by exactly lambda): PASS in {elapsed:?}");
}

#[test]
fn criterion_5_nash_certificate() {
    let start = Instant::now();
    let cfg = SolverConfig::default();
    for (i, (cands, target)) in solver_instances().iter().enumerate() {
        let solved = ne_solve(cands, target, &cfg).unwrap();
        let sum: f64 = solved.w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let improvement = ne_improvement(cands, target, &solved.w, 0.01).unwrap();
        assert!(
            improvement <= 1e-6,
            "instance {i}: a deviation improves a player by {improvement}"
        );
    }
    let elapsed = start.elapsed();
    println!("criterion 5 (epsilon-equilibrium certificate on 50 instances): PASS in {elapsed:?}");
}

#[test]
fn criterion_6_gradient_correctness() {
    let start = Instant::now();
    // Library-level: every suite at the canonical tiny sizes.
    let checks = run_gradcheck_suites(&GradCheckConfig { n: 16, d: 8, d_k: 4, depth: 2, seed: 42 })
        .unwrap();
    for check in &checks {
        assert!(
            check.report.pass,
            "{}: rel err {} (tol {})",
            check.name, check.report.max_rel_err, check.report.tolerance
        );
    }
    // Command-level: exit path agrees.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.output.directory = dir.path().to_string_lossy().to_string();
    cfg.model.n = 16;
    cfg.model.d = 8;
    cfg.model.d_k = 4;
    cfg.model.l = 2;
    cmd_gradcheck(&cfg).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}, budget 2 min");
    println!(
        "criterion 6 (all {} finite-difference checks pass, incl. unrolled solver): PASS in {elapsed:?}",
        checks.len()
    );
}

#[test]
fn criterion_7_convergence_and_solver_cost() {
    let start = Instant::now();
    let ablation = ablate_aggregation(&ToyModelConfig::default(), TaskKind::Copy).unwrap();
    for (method, trace) in &ablation.traces {
        let sm = smoothed_losses(&trace.losses, 50);
        let first = sm[49];
        let last = *sm.last().unwrap();
        assert!(
            last <= 0.5 * first,
            "{method}: smoothed loss {first:.3} -> {last:.3} misses the 50% reduction"
        );
    }
    let co = ablation.rows.iter().find(|r| r.method == AggMethod::Co).unwrap();
    let ne = ablation.rows.iter().find(|r| r.method == AggMethod::Ne).unwrap();
    assert!(
        ne.secs_per_step >= co.secs_per_step,
        "ne {}s/step vs co {}s/step",
        ne.secs_per_step,
        co.secs_per_step
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}, budget 5 min");
    println!("criterion 7 (co/ne/mean all halve smoothed loss; ne costs >= co per step): PASS in {elapsed:?}");
}

#[test]
fn criterion_8_determinism() {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let mut outputs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for run in 0..2 {
        let out = root.path().join(format!("run{run}"));
        let mut cfg = RunConfig::default();
        cfg.output.directory = out.to_string_lossy().to_string();
        cfg.model.l = 2;
        cfg.train.steps = 60;
        cmd_bench(&cfg, false).unwrap();
        cmd_train(&cfg).unwrap();
        cmd_heatmap(&cfg, None).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().to_string(), std::fs::read(e.path()).unwrap())
            })
            // The resolved config embeds the per-run output directory; the
            // criterion is about the emitted CSV/PGM bodies.
            .filter(|(name, _)| name != "resolved_config.json")
            .collect();
        files.sort();
        outputs.push(files);
    }
    assert_eq!(outputs[0].len(), outputs[1].len());
    for (a, b) in outputs[0].iter().zip(&outputs[1]) {
        assert_eq!(a.0, b.0, "file sets differ");
        assert_eq!(a.1, b.1, "{} differs between identical runs", a.0);
    }
    let elapsed = start.elapsed();
    println!(
        "criterion 8 (bench/train/heatmap byte-identical across reruns, {} files): PASS in {elapsed:?}",
        outputs[0].len()
    );
}

#[test]
fn criterion_9_format_fidelity() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.output.directory = dir.path().to_string_lossy().to_string();
    cfg.model.l = 2;
    cmd_heatmap(&cfg, None).unwrap();

    let mut pgm_count = 0;
    let mut csv_count = 0;
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => {
                let bytes = std::fs::read(&path).unwrap();
                let (w, h, pixels) = parse_pgm(&bytes).unwrap();
                // Re-render from the parsed values: bit-exact round trip.
                let mut rendered = format!("P2\n{w} {h}\n255\n");
                for row in pixels.chunks(w) {
                    let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
                    rendered.push_str(&line.join(" "));
                    rendered.push('\n');
                }
                assert_eq!(rendered.as_bytes(), &bytes[..], "{}", path.display());
                pgm_count += 1;
            }
            Some("csv") if path.file_name().unwrap() != "resolved_config.json" => {
                let name = path.file_name().unwrap().to_string_lossy().to_string();
                if !name.starts_with("scale_") {
                    continue;
                }
                for line in read(&path).lines() {
                    let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
                    assert!((sum - 1.0).abs() < 1e-9, "{name}: row sum {sum}");
                }
                csv_count += 1;
            }
            _ => {}
        }
    }
    assert!(pgm_count >= 4 && csv_count >= 4);
    let elapsed = start.elapsed();
    println!("criterion 9 (PGM round-trip bit-exact; CSV rows stochastic): PASS in {elapsed:?}");
}
