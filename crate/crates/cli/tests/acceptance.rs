//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fedprompt::bdro::robust_loss;
use fedprompt::config::{PartitionKind, RunConfig, SemiUotConfig};
use fedprompt::data::{
    gen_synthetic, init_ood_prompts, mean_label_entropy, partition_dirichlet, partition_pathological,
    select_ood_candidates, SyntheticSpec,
};
use fedprompt::federation::{encoder_for, run, RunOptions};
use fedprompt::metrics::{auroc, fpr95};
use fedprompt::prompt::{PromptBank, PromptContext, Role};
use fedprompt::rng::derive_rng;
use fedprompt::server::{aggregate_global, calibrate_global, filter_ood, select_seemly};
use fedprompt::transport::{col_sums, semiuot_solve_traced, Matrix};
use rand::Rng;

const BIN: &str = env!("CARGO_BIN_EXE_fedprompt");
const SEED: u64 = 42;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient certification", gradient_certification),
        ("semiuot correctness", semiuot_correctness),
        ("frank-wolfe monotonicity", frank_wolfe_monotone),
        ("robust-loss properties", robust_loss_properties),
        ("metric oracles", metric_oracles),
        ("aggregation/calibration algebra", aggregation_algebra),
        ("partition contracts", partition_contracts),
        ("directional ablation", directional_ablation),
        ("determinism", determinism),
        ("ood-prompt initialization", ood_init_oracle),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.2}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn gradient_certification() -> Outcome {
    let start = Instant::now();
    let out = Command::new(BIN)
        .args(["grad-check", "--trials", "100", "--tol", "1e-4", "--seed", "42"])
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success(), || format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))?;
    ensure(stdout.lines().last() == Some("PASS"), || format!("unexpected report:\n{stdout}"))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    let worst = stdout
        .lines()
        .filter_map(|l| l.split_once("worst rel err")?.1.split_whitespace().next()?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    Ok(format!("100 trials, worst rel err {worst:.3e}"))
}

// ---------------------------------------------------------------- 2, 3

struct Instance {
    cost: Matrix,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn instances() -> Vec<Instance> {
    let mut rng = derive_rng(SEED, "acceptance/semiuot");
    (0..20)
        .map(|_| Instance {
            cost: (0..3).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
            a: (0..3).map(|_| rng.random_range(0.2..1.0)).collect(),
            b: (0..4).map(|_| rng.random_range(0.1..1.0)).collect(),
        })
        .collect()
}

fn kl_term(r: f64, a: f64) -> f64 {
    let xlogx = if r > 0.0 { r * (r / a).ln() } else { 0.0 };
    xlogx - r + a
}

fn objective(pi: &Matrix, inst: &Instance, lambda: f64) -> f64 {
    let mut lin = 0.0;
    let mut rows = vec![0.0; pi.len()];
    for (c, row) in pi.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            lin += v * inst.cost[c][j];
            rows[c] += v;
        }
    }
    lin + lambda * rows.iter().zip(&inst.a).map(|(r, a)| kl_term(*r, *a)).sum::<f64>()
}

/// Block-coordinate minimization over columns. Each column lives on a
/// scaled 2-simplex and is minimized by a zooming grid.
fn grid_oracle(inst: &Instance, lambda: f64) -> f64 {
    const GRID: usize = 20;
    let cols = inst.b.len();
    let mut pi: Matrix = vec![inst.b.iter().map(|b| b / 3.0).collect(); 3];
    let mut best = objective(&pi, inst, lambda);
    for _sweep in 0..2000 {
        for j in 0..cols {
            let bj = inst.b[j];
            let other: Vec<f64> = (0..3).map(|c| pi[c].iter().sum::<f64>() - pi[c][j]).collect();
            let col_value = |x: [f64; 3]| -> f64 {
                (0..3)
                    .map(|c| x[c] * inst.cost[c][j] + lambda * kl_term(other[c] + x[c], inst.a[c]))
                    .sum()
            };
            let mut center = [pi[0][j], pi[1][j]];
            let mut val = col_value([center[0], center[1], bj - center[0] - center[1]]);
            let mut half = bj;
            while half > 1e-13 * bj {
                let step = 2.0 * half / GRID as f64;
                let base = center;
                for u in 0..=GRID {
                    for v in 0..=GRID {
                        let x0 = base[0] - half + u as f64 * step;
                        let x1 = base[1] - half + v as f64 * step;
                        let x2 = bj - x0 - x1;
                        if x0 < 0.0 || x1 < 0.0 || x2 < 0.0 {
                            continue;
                        }
                        let f = col_value([x0, x1, x2]);
                        if f < val {
                            val = f;
                            center = [x0, x1];
                        }
                    }
                }
                half *= 0.25;
            }
            pi[0][j] = center[0];
            pi[1][j] = center[1];
            pi[2][j] = (bj - center[0] - center[1]).max(0.0);
        }
        let now = objective(&pi, inst, lambda);
        let gain = best - now;
        best = best.min(now);
        if gain < 1e-15 {
            break;
        }
    }
    best
}

#[derive(Default)]
struct Trace {
    iterates: usize,
    worst_rise: f64,
    marginal_violations: usize,
}

fn solve(inst: &Instance, lambda: f64, max_iters: usize, trace: &mut Trace) -> Result<f64, String> {
    let cfg = SemiUotConfig { lambda, max_iters, convergence_tol: 0.0 };
    let mut prev = f64::INFINITY;
    let plan = semiuot_solve_traced(&inst.cost, &inst.a, &inst.b, &cfg, |pi, v| {
        trace.iterates += 1;
        if prev.is_finite() {
            trace.worst_rise = trace.worst_rise.max(v - prev);
        }
        prev = v;
        if col_sums(pi, inst.b.len()) != inst.b {
            trace.marginal_violations += 1;
        }
    })
    .map_err(|e| e.to_string())?;
    Ok(plan.objective_value)
}

const ITERS_LAMBDA0: usize = 2_000_000;
const ITERS_LAMBDA_POS: usize = 200_000;

fn semiuot_correctness() -> Outcome {
    let mut trace = Trace::default();
    let mut worst_vertex: f64 = 0.0;
    let mut worst_grid: f64 = 0.0;
    for (i, inst) in instances().iter().enumerate() {
        let bound: f64 = (0..4)
            .map(|j| inst.b[j] * (0..3).map(|c| inst.cost[c][j]).fold(f64::INFINITY, f64::min))
            .sum();
        let v = solve(inst, 0.0, ITERS_LAMBDA0, &mut trace)?;
        ensure(v >= bound - 1e-12, || format!("instance {i}: objective {v} below vertex bound {bound}"))?;
        worst_vertex = worst_vertex.max(v - bound);
        for lambda in [0.1, 1.0] {
            let v = solve(inst, lambda, ITERS_LAMBDA_POS, &mut trace)?;
            let oracle = grid_oracle(inst, lambda);
            worst_grid = worst_grid.max((v - oracle).abs());
        }
    }
    ensure(worst_vertex <= 1e-6, || format!("lambda=0 gap {worst_vertex:.3e} > 1e-6"))?;
    ensure(worst_grid <= 1e-4, || format!("grid-oracle gap {worst_grid:.3e} > 1e-4"))?;
    ensure(trace.marginal_violations == 0, || {
        format!("{} of {} iterates miss the column marginal", trace.marginal_violations, trace.iterates)
    })?;
    Ok(format!(
        "vertex gap {worst_vertex:.2e}, grid gap {worst_grid:.2e}, {} iterates with exact column sums",
        trace.iterates
    ))
}

fn frank_wolfe_monotone() -> Outcome {
    let mut trace = Trace::default();
    let mut rng = derive_rng(SEED, "acceptance/fw-shapes");
    let mut extra = Vec::new();
    for _ in 0..10 {
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(1..=8);
        extra.push(Instance {
            cost: (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0.0..4.0)).collect()).collect(),
            a: (0..rows).map(|_| rng.random_range(0.05..2.0)).collect(),
            b: (0..cols).map(|_| rng.random_range(0.0..2.0)).collect(),
        });
    }
    for inst in instances().iter() {
        for lambda in [0.0, 0.1, 1.0] {
            solve(inst, lambda, 20_000, &mut trace)?;
        }
    }
    for inst in &extra {
        for lambda in [0.0, 0.001, 0.1, 1.0, 10.0] {
            solve(inst, lambda, 20_000, &mut trace)?;
        }
    }
    ensure(trace.worst_rise <= 1e-12, || format!("objective rose by {:.3e}", trace.worst_rise))?;
    Ok(format!("{} iterates, largest rise {:.1e}", trace.iterates, trace.worst_rise))
}

// ---------------------------------------------------------------- 4

fn robust_loss_properties() -> Outcome {
    let mut rng = derive_rng(SEED, "acceptance/robust");
    let mut worst_jensen = f64::INFINITY;
    let mut worst_max: f64 = 0.0;
    let mut worst_mean: f64 = 0.0;
    for i in 0..1000 {
        let n = rng.random_range(1..=32);
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mean = f.iter().sum::<f64>() / n as f64;
        let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let r = robust_loss(&f, scale);
        ensure(r >= mean - 1e-12, || format!("vector {i}: robust {r} < mean {mean} at scale {scale}"))?;
        worst_jensen = worst_jensen.min(r - mean);
        worst_max = worst_max.max((robust_loss(&f, 1e-6) - max).abs());
        worst_mean = worst_mean.max((robust_loss(&f, 1e6) - mean).abs());
    }
    ensure(worst_max <= 1e-3, || format!("small-scale limit off by {worst_max:.3e}"))?;
    ensure(worst_mean <= 1e-3, || format!("large-scale limit off by {worst_mean:.3e}"))?;
    Ok(format!("1000 vectors, max-limit err {worst_max:.1e}, mean-limit err {worst_mean:.1e}"))
}

// ---------------------------------------------------------------- 5

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for x in id {
        for y in ood {
            twice += if x > y {
                2
            } else if x == y {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

fn scan_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for &t in id.iter().chain(ood) {
        let tp = id.iter().filter(|&&s| s >= t).count();
        if tp as f64 / id.len() as f64 >= 0.95 {
            let fp = ood.iter().filter(|&&s| s >= t).count();
            best = best.min(fp as f64 / ood.len() as f64);
        }
    }
    best
}

fn metric_oracles() -> Outcome {
    let mut rng = derive_rng(SEED, "acceptance/metrics");
    for i in 0..50 {
        let n_id = rng.random_range(1..=120);
        let n_ood = rng.random_range(1..=120);
        // coarse grids force ties on some fixtures
        let levels = if i % 2 == 0 { 8.0 } else { 1e6 };
        let shift = rng.random_range(0.0..0.5);
        let mut draw = |offset: f64| (rng.random_range(0.0f64..1.0) * levels).floor() / levels + offset;
        let id: Vec<f64> = (0..n_id).map(|_| draw(shift)).collect();
        let ood: Vec<f64> = (0..n_ood).map(|_| draw(0.0)).collect();
        let a = auroc(&id, &ood).map_err(|e| e.to_string())?;
        let f = fpr95(&id, &ood).map_err(|e| e.to_string())?;
        let (ea, ef) = (pairwise_auroc(&id, &ood), scan_fpr95(&id, &ood));
        ensure(a == ea, || format!("fixture {i}: auroc {a} vs pairwise {ea}"))?;
        ensure(f == ef, || format!("fixture {i}: fpr95 {f} vs scan {ef}"))?;
    }
    let id = [0.9, 0.8, 0.95, 0.85];
    let ood = [0.1, 0.2, 0.3];
    let (a, f) = (auroc(&id, &ood).unwrap(), fpr95(&id, &ood).unwrap());
    ensure(a == 1.0 && f == 0.0, || format!("perfect separation gave auroc {a}, fpr95 {f}"))?;
    let (a, f) = (auroc(&ood, &id).unwrap(), fpr95(&ood, &id).unwrap());
    ensure(a == 0.0 && f == 1.0, || format!("reversed separation gave auroc {a}, fpr95 {f}"))?;
    Ok("50 fixtures exact, endpoints exact".into())
}

// ---------------------------------------------------------------- 6

fn bank(role: Role, contexts: &[&[f64]]) -> PromptBank {
    let prompts = contexts
        .iter()
        .enumerate()
        .map(|(c, ctx)| match role {
            Role::Ood => PromptContext::ood(ctx.to_vec(), vec![c as f64]),
            _ => PromptContext::id(role, c, ctx.to_vec(), vec![c as f64]),
        })
        .collect();
    PromptBank::new(role, prompts)
}

fn aggregation_algebra() -> Outcome {
    let prev = bank(Role::GlobalId, &[&[9.0, 9.0], &[7.0, 7.0]]);
    let k1 = bank(Role::GlobalId, &[&[0.0, 0.0], &[1.0, 2.0]]);
    let k2 = bank(Role::GlobalId, &[&[4.0, 4.0], &[5.0, 6.0]]);
    let agg = aggregate_global(&[k1, k2], &[vec![1, 0], vec![3, 0]], &prev).map_err(|e| e.to_string())?;
    ensure(agg.bank.prompts[0].context == [3.0, 3.0], || format!("class 0 -> {:?}", agg.bank.prompts[0].context))?;
    ensure(agg.bank.prompts[1].context == [7.0, 7.0], || "untrained class must keep its previous prompt".into())?;
    ensure(agg.kept_classes == [1], || format!("kept {:?}", agg.kept_classes))?;

    let global = bank(Role::GlobalId, &[&[1.0, -1.0], &[0.5, 0.25]]);
    let seemly: Vec<PromptContext> = [[2.0, 0.0], [0.0, 4.0]].iter().map(|c| PromptContext::ood(c.to_vec(), vec![0.0])).collect();
    let plan = vec![vec![0.25, 0.25], vec![0.75, 0.25]];
    let keep = calibrate_global(&global, &seemly, &plan, 1.0).map_err(|e| e.to_string())?;
    ensure(keep == global, || "alpha = 1 must leave the bank unchanged".into())?;
    let moved = calibrate_global(&global, &seemly, &plan, 0.0).map_err(|e| e.to_string())?;
    ensure(moved.prompts[0].context == [1.0, 2.0], || format!("row 0 -> {:?}", moved.prompts[0].context))?;
    ensure(moved.prompts[1].context == [1.5, 1.0], || format!("row 1 -> {:?}", moved.prompts[1].context))?;

    let mut rng = derive_rng(SEED, "acceptance/disjoint");
    let mut cases = 0;
    for _ in 0..500 {
        let j = rng.random_range(1..=20);
        let levels = rng.random_range(1..=6) as f64;
        let scores: Vec<f64> = (0..j).map(|_| (rng.random_range(0.0f64..1.0) * levels).floor()).collect();
        let m = rng.random_range(0..=j);
        let u = rng.random_range(0..=j - m);
        let all = PromptBank::new(
            Role::Ood,
            (0..j).map(|i| PromptContext::ood(vec![i as f64], vec![1.0])).collect(),
        );
        let seemly: BTreeSet<usize> = select_seemly(&scores, m).into_iter().collect();
        let kept: BTreeSet<usize> = filter_ood(&all, &scores, u)
            .map_err(|e| e.to_string())?
            .prompts
            .iter()
            .map(|p| p.context[0] as usize)
            .collect();
        ensure(seemly.len() == m && kept.len() == u, || format!("sizes {} / {} for M={m}, U={u}", seemly.len(), kept.len()))?;
        ensure(seemly.is_disjoint(&kept), || format!("overlap for scores {scores:?}, M={m}, U={u}"))?;
        cases += 1;
    }
    Ok(format!("[3,3] fixture exact, alpha endpoints exact, {cases} disjointness cases"))
}

// ---------------------------------------------------------------- 7

fn is_set_partition(parts: &[Vec<usize>], n: usize) -> bool {
    let mut seen = vec![false; n];
    for &i in parts.iter().flatten() {
        if i >= n || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    seen.into_iter().all(|s| s)
}

fn partition_contracts() -> Outcome {
    let ds = gen_synthetic(&SyntheticSpec::default(), &mut derive_rng(SEED, "data")).map_err(|e| e.to_string())?;
    let labels = ds.train_labels();
    let n = labels.len();
    let mut rng = derive_rng(SEED, "acceptance/partition");
    let mut checked = 0;
    for k in [1, 2, 5, 7] {
        for alpha in [0.05, 0.5, 5.0] {
            let p = partition_dirichlet(&labels, k, alpha, &mut rng).map_err(|e| e.to_string())?;
            ensure(p.len() == k && is_set_partition(&p, n), || format!("dirichlet k={k} alpha={alpha} is not a partition"))?;
            checked += 1;
        }
        for (cpc, overlap) in [(1, false), (2, false), (1, true), (3, true), (4, true)] {
            if !overlap && k * cpc > 10 {
                continue;
            }
            let p = partition_pathological(&labels, 10, k, cpc, overlap, &mut rng).map_err(|e| e.to_string())?;
            ensure(p.len() == k && is_set_partition(&p, n), || format!("pathological k={k} cpc={cpc} is not a partition"))?;
            checked += 1;
        }
    }

    let entropy = |alpha: f64| -> Result<f64, String> {
        let p = partition_dirichlet(&labels, 5, alpha, &mut derive_rng(SEED, "partition")).map_err(|e| e.to_string())?;
        Ok(mean_label_entropy(&p, &labels, 10))
    };
    let (hi, lo) = (entropy(5.0)?, entropy(0.1)?);
    ensure(hi > lo, || format!("entropy alpha=5.0 {hi:.4} <= alpha=0.1 {lo:.4}"))?;

    let p = partition_pathological(&labels, 10, 5, 2, false, &mut derive_rng(SEED, "partition")).map_err(|e| e.to_string())?;
    let class_sets: Vec<BTreeSet<usize>> = p.iter().map(|idx| idx.iter().map(|&i| labels[i]).collect()).collect();
    for (x, a) in class_sets.iter().enumerate() {
        for b in &class_sets[x + 1..] {
            ensure(a.is_disjoint(b), || format!("class sets overlap: {a:?} / {b:?}"))?;
        }
    }
    Ok(format!("{checked} partitions exact, entropy {hi:.3} > {lo:.3}, class sets disjoint"))
}

// ---------------------------------------------------------------- 8

/// Final AUROC of each variant on the bundled benchmark, frozen after the
/// first verified run.
const GOLDEN_AUROC: [(&str, bool, bool, f64); 4] = [
    ("full", true, true, 0.983625),
    ("no-GOC", true, false, 0.984038),
    ("no-BOS", false, true, 0.971275),
    ("baseline", false, false, 0.972825),
];
const GOLDEN_TOL: f64 = 1e-6;

fn directional_ablation() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml")).map_err(|e| e.to_string())?;
    let r = &cfg.run;
    ensure(
        r.num_classes == 10 && r.num_ood_prompts == 5 && r.num_clients == 5 && r.rounds == 15 && r.seed == SEED,
        || "demo config does not describe the bundled benchmark".into(),
    )?;
    ensure(r.partition == PartitionKind::Pathological && !r.overlap, || "benchmark must be pathological non-overlap".into())?;
    let ds = gen_synthetic(&SyntheticSpec::default(), &mut derive_rng(SEED, "data")).map_err(|e| e.to_string())?;
    let enc = encoder_for(&cfg);

    let mut results = Vec::new();
    for (name, bos, goc, golden) in GOLDEN_AUROC {
        let mut c = cfg.clone();
        c.run.enable_bos = bos;
        c.run.enable_goc = goc;
        let out = run(&c, &ds, &enc, RunOptions { threads: 1 }, |_| {}).map_err(|e| e.to_string())?;
        let m = out.final_metrics().ok_or("no final metrics")?;
        let a = m.auroc.ok_or("no AUROC")?;
        results.push((name, a, m.acc, golden));
    }
    let elapsed = start.elapsed();
    let summary: Vec<String> = results.iter().map(|(n, a, _, _)| format!("{n} {a:.4}")).collect();
    let summary = summary.join(", ");

    for (name, a, _, golden) in &results {
        ensure((a - golden).abs() <= GOLDEN_TOL, || format!("{name} AUROC {a:.6} drifted from golden {golden:.6} ({summary})"))?;
    }
    let full = results[0].1;
    ensure(full > results[3].1, || format!("full does not beat baseline ({summary})"))?;
    for (name, a, _, _) in &results[1..3] {
        ensure(full >= a - 0.02, || format!("full trails {name} by more than 0.02 ({summary})"))?;
    }
    ensure(full >= 0.90, || format!("full AUROC {full:.4} < 0.90"))?;
    ensure(results[0].2 >= 0.95, || format!("full ACC {:.4} < 0.95", results[0].2))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    let exact: Vec<String> = results.iter().map(|(n, a, _, _)| format!("{n}={a:.6}")).collect();
    Ok(format!("{summary}; full ACC {:.4}; exact {}", results[0].2, exact.join(" ")))
}

// ---------------------------------------------------------------- 9

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN).args(args).env_remove("FOCOOP_SEED").output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let data = root.join("bench.embds");
    let data_s = data.to_str().ok_or("non-utf8 temp path")?;
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml");
    let config_s = config.to_str().ok_or("non-utf8 config path")?;
    cli(&["gen-data", "--seed", "42", "--out", data_s])?;
    let mut outputs = Vec::new();
    for (tag, threads) in [("a", "1"), ("b", "1"), ("c", "4"), ("d", "4")] {
        let out = root.join(tag);
        let out_s = out.to_str().ok_or("non-utf8 temp path")?;
        cli(&["run", "--config", config_s, "--data", data_s, "--out-dir", out_s, "--threads", threads])?;
        outputs.push((read(&out.join("metrics.csv"))?, read(&out.join("final_banks.json"))?));
    }
    for (i, o) in outputs.iter().enumerate().skip(1) {
        ensure(o.0 == outputs[0].0, || format!("metrics.csv of run {i} differs"))?;
        ensure(o.1 == outputs[0].1, || format!("final_banks.json of run {i} differs"))?;
    }
    let rows = outputs[0].0.iter().filter(|&&b| b == b'\n').count();
    Ok(format!("4 runs (threads 1,1,4,4) byte-identical, {rows} csv lines"))
}

// ---------------------------------------------------------------- 10

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn interp_percentile(mut v: Vec<f64>, eta: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = eta * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn ood_init_oracle() -> Outcome {
    let mut rng = derive_rng(SEED, "acceptance/ood-init");
    let dim = 16;
    for trial in 0..20 {
        let vec_ = |rng: &mut fedprompt::rng::Stream| -> Vec<f64> { (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let names: Vec<Vec<f64>> = (0..10).map(|_| vec_(&mut rng)).collect();
        let mut pool: Vec<Vec<f64>> = (0..50).map(|_| vec_(&mut rng)).collect();
        // duplicates make tied distances
        for d in 0..3 {
            pool[40 + d] = pool[d].clone();
        }
        let eta = [0.0, 0.5, 1.0, 0.9][trial % 4];
        let u = rng.random_range(1..=50);

        let dist: Vec<f64> = pool
            .iter()
            .map(|p| interp_percentile(names.iter().map(|n| -cos(p, n)).collect(), eta))
            .collect();
        let mut expect: Vec<usize> = (0..50).collect();
        expect.sort_by(|&x, &y| dist[y].partial_cmp(&dist[x]).unwrap().then(x.cmp(&y)));
        expect.truncate(u);

        let got = select_ood_candidates(&pool, &names, eta, u).map_err(|e| e.to_string())?;
        ensure(got == expect, || format!("trial {trial} (eta {eta}, U {u}): got {got:?}, want {expect:?}"))?;
        let bank = init_ood_prompts(&pool, &names, eta, u, &[0.0; 4]).map_err(|e| e.to_string())?;
        let names_match = bank.prompts.iter().zip(&expect).all(|(p, &i)| p.class_name == pool[i]);
        ensure(bank.len() == u && names_match, || format!("trial {trial}: bank does not follow the selected order"))?;
    }
    Ok("20 pools of 50 candidates, exact index agreement".into())
}
