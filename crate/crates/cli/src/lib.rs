//! Subcommands of the `fedprompt` binary.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fedprompt::config::{RunConfig, SemiUotConfig};
use fedprompt::data::{gen_synthetic, read_dataset, write_dataset, SyntheticSpec};
use fedprompt::federation::{encoder_for, run, EvalMetrics, RoundReport, RunOptions};
use fedprompt::gradcheck::{run_grad_check, GradCheckReport};
use fedprompt::prompt::PromptBank;
use fedprompt::rng::{derive_rng, RNG_ALGORITHM};
use fedprompt::transport::{semiuot_solve, Matrix, TransportPlan};

pub const SEED_ENV: &str = "FOCOOP_SEED";

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

#[derive(Debug, Parser)]
#[command(name = "fedprompt", version, about = "Federated OOD-aware prompt learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic embedding benchmark
    GenData(GenDataArgs),
    /// Train and evaluate a federation
    Run(RunArgs),
    /// Solve a semi-unbalanced transport instance
    SolveSemiuot(SolveArgs),
    /// Check analytic gradients against finite differences
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub ood_classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Training samples per ID class
    #[arg(long, default_value_t = 60)]
    pub per_class: usize,
    /// Test samples per ID class and per OOD class
    #[arg(long, default_value_t = 40)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    pub shift: f64,
    #[arg(long, default_value_t = 20)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenDataArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            ood_classes: self.ood_classes,
            dim: self.dim,
            train_per_class: self.per_class,
            test_per_class: self.test_per_class,
            ood_per_class: self.test_per_class,
            shift_magnitude: self.shift,
            pool_size: self.pool_size,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub no_bos: bool,
    #[arg(long)]
    pub no_goc: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Instance file, or `-` for stdin
    pub instance: PathBuf,
    #[arg(long, default_value_t = SemiUotConfig::default().max_iters)]
    pub max_iters: usize,
    #[arg(long, default_value_t = SemiUotConfig::default().convergence_tol)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn data(e: impl std::fmt::Display) -> Self {
        Self { code: exit::DATA, message: e.to_string() }
    }
}

impl From<fedprompt::Error> for CliError {
    fn from(e: fedprompt::Error) -> Self {
        Self::data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parse and dispatch; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Run(a) => cmd_run(&a),
        Command::SolveSemiuot(a) => cmd_solve_semiuot(&a),
        Command::GradCheck(a) => cmd_grad_check(&a),
    };
    match result {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CliResult<()> {
    let ds = gen_synthetic(&a.spec(), &mut derive_rng(a.seed, "data"))?;
    write_dataset(&a.out, &ds)?;
    println!(
        "wrote {} ({} train, {} test, {} ood, {} candidates)",
        a.out.display(),
        ds.id_train.len(),
        ds.id_test.len(),
        ds.ood_test.len(),
        ds.candidate_pool.len()
    );
    Ok(())
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| CliError::data(format!("{SEED_ENV}={v}: {e}"))),
        Err(_) => Ok(None),
    }
}

/// Config file, then `FOCOOP_SEED`, then flags.
pub fn resolve_config(a: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    let seed = match a.seed {
        Some(s) => Some(s),
        None => env_seed()?,
    };
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if a.no_bos {
        cfg.run.enable_bos = false;
    }
    if a.no_goc {
        cfg.run.enable_goc = false;
    }
    Ok(cfg.validate()?)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const BANKS_FILE: &str = "final_banks.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Serialize)]
struct FinalBanks<'a> {
    global: &'a PromptBank,
    ood: &'a PromptBank,
    locals: &'a [PromptBank],
}

#[derive(Serialize)]
struct Summary<'a> {
    rounds: usize,
    final_metrics: Option<EvalMetrics>,
    final_train_loss: Option<f64>,
    rng_algorithm: &'a str,
    config: &'a RunConfig,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn round_line(r: &RoundReport) -> String {
    match r.metrics {
        Some(m) => format!(
            "round {:>3}  acc {:.4}  cacc {:.4}  auroc {}  fpr95 {}  loss {:.5}",
            r.round,
            m.acc,
            m.cacc,
            opt(m.auroc),
            opt(m.fpr95),
            r.train_loss
        ),
        None => format!("round {:>3}  loss {:.5}", r.round, r.train_loss),
    }
}

pub fn cmd_run(a: &RunArgs) -> CliResult<()> {
    let cfg = resolve_config(a)?;
    let ds = read_dataset(&a.data)?;
    if a.threads == 0 {
        return Err(CliError { code: exit::USAGE, message: "--threads must be >= 1".into() });
    }
    fs::create_dir_all(&a.out_dir)?;
    let csv_path = a.out_dir.join(METRICS_FILE);
    let mut csv = csv::Writer::from_path(&csv_path).map_err(CliError::data)?;
    csv.write_record(["round", "acc", "cacc", "auroc", "fpr95", "train_loss"]).map_err(CliError::data)?;
    csv.flush()?;

    let enc = encoder_for(&cfg);
    let mut write_err = None;
    let outcome = run(&cfg, &ds, &enc, RunOptions { threads: a.threads }, |r| {
        println!("{}", round_line(r));
        let m = r.metrics;
        let row = [
            r.round.to_string(),
            opt(m.map(|m| m.acc)),
            opt(m.map(|m| m.cacc)),
            opt(m.and_then(|m| m.auroc)),
            opt(m.and_then(|m| m.fpr95)),
            format!("{:.6}", r.train_loss),
        ];
        if let Err(e) = csv.write_record(&row).and_then(|_| Ok(csv.flush()?)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::data(e));
    }

    let banks = FinalBanks { global: &outcome.global, ood: &outcome.ood, locals: &outcome.locals };
    write_json(&a.out_dir.join(BANKS_FILE), &banks)?;
    let summary = Summary {
        rounds: outcome.reports.len(),
        final_metrics: outcome.final_metrics(),
        final_train_loss: outcome.reports.last().map(|r| r.train_loss),
        rng_algorithm: RNG_ALGORITHM,
        config: &cfg,
    };
    write_json(&a.out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::data)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// A transport problem as read from an instance file.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub cost: Matrix,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub lambda: f64,
}

fn numbers(line: &str, n: usize, what: &str) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("{what}: bad number `{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("{what}: expected {n} values, found {}", v.len()));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(format!("{what}: non-finite value {x}"));
    }
    Ok(v)
}

/// Format: `C J`, then C cost rows, the `a` row, the `b` row and λ.
/// Blank lines and `#` comments are ignored.
pub fn parse_instance(text: &str) -> Result<Instance, String> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| lines.next().ok_or_else(|| format!("truncated instance: missing {what}"));

    let (n, head) = next("header")?;
    let dims: Vec<usize> = head
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| format!("line {n}: bad dimension `{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [c, j] = dims[..] else { return Err(format!("line {n}: expected `C J`")) };
    if c == 0 || j == 0 {
        return Err(format!("line {n}: dimensions must be positive"));
    }
    let mut cost = Vec::with_capacity(c);
    for r in 0..c {
        let (n, l) = next("cost row")?;
        cost.push(numbers(l, j, &format!("line {n} (cost row {r})"))?);
    }
    let (n, l) = next("a row")?;
    let a = numbers(l, c, &format!("line {n} (a)"))?;
    let (n, l) = next("b row")?;
    let b = numbers(l, j, &format!("line {n} (b)"))?;
    let (n, l) = next("lambda")?;
    let lambda = numbers(l, 1, &format!("line {n} (lambda)"))?[0];
    if lambda < 0.0 {
        return Err(format!("line {n}: lambda must be >= 0"));
    }
    if let Some((n, _)) = lines.next() {
        return Err(format!("line {n}: trailing content"));
    }
    Ok(Instance { cost, a, b, lambda })
}

/// Objective, iteration count and plan at 12 significant digits.
pub fn format_plan(plan: &TransportPlan) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "objective {:.11e}", plan.objective_value);
    let _ = writeln!(out, "iterations {}", plan.iterations);
    let _ = writeln!(out, "plan {} {}", plan.rows(), plan.cols());
    for row in &plan.pi {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.11e}")).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}

/// Inverse of [`format_plan`]: `(objective, plan)`.
pub fn parse_plan(text: &str) -> Result<(f64, Matrix), String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let field = |l: Option<&str>, key: &str| -> Result<String, String> {
        let l = l.ok_or_else(|| format!("missing `{key}` line"))?;
        l.strip_prefix(key).map(|s| s.trim().to_string()).ok_or_else(|| format!("expected `{key}`, found `{l}`"))
    };
    let objective: f64 = field(lines.next(), "objective")?.parse().map_err(|e| format!("objective: {e}"))?;
    field(lines.next(), "iterations")?;
    let shape = field(lines.next(), "plan")?;
    let dims: Vec<usize> = shape.split_whitespace().map(|t| t.parse().map_err(|e| format!("plan shape: {e}"))).collect::<Result<_, _>>()?;
    let [rows, cols] = dims[..] else { return Err("plan shape needs two numbers".into()) };
    let pi = (0..rows)
        .map(|r| numbers(lines.next().ok_or("truncated plan")?, cols, &format!("plan row {r}")))
        .collect::<Result<Matrix, _>>()?;
    Ok((objective, pi))
}

pub fn cmd_solve_semiuot(a: &SolveArgs) -> CliResult<()> {
    let text = if a.instance.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        s
    } else {
        fs::read_to_string(&a.instance)?
    };
    let inst = parse_instance(&text).map_err(CliError::data)?;
    let cfg = SemiUotConfig { lambda: inst.lambda, max_iters: a.max_iters, convergence_tol: a.tol };
    if cfg.max_iters == 0 || !(cfg.convergence_tol > 0.0) {
        return Err(CliError { code: exit::USAGE, message: "--max-iters must be >= 1 and --tol > 0".into() });
    }
    let plan = semiuot_solve(&inst.cost, &inst.a, &inst.b, &cfg)?;
    print!("{}", format_plan(&plan));
    Ok(())
}

pub fn format_grad_report(r: &GradCheckReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "trials {}  tol {:e}", r.trials, r.tol);
    for (group, err) in &r.worst {
        let _ = writeln!(out, "{group:<12} worst rel err {err:.3e}  {}", if *err <= r.tol { "ok" } else { "FAIL" });
    }
    let _ = writeln!(out, "{}", if r.passed() { "PASS" } else { "FAIL" });
    out
}

pub fn cmd_grad_check(a: &GradCheckArgs) -> CliResult<()> {
    if a.trials == 0 || !(a.tol > 0.0) {
        return Err(CliError { code: exit::USAGE, message: "--trials must be >= 1 and --tol > 0".into() });
    }
    let report = run_grad_check(a.trials, a.tol, a.seed)?;
    print!("{}", format_grad_report(&report));
    if report.passed() {
        Ok(())
    } else {
        Err(CliError { code: exit::NUMERIC, message: format!("gradient check failed: max rel err {:.3e}", report.max_error()) })
    }
}
