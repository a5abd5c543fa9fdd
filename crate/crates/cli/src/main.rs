//! `vptrap` command-line driver.
//!
//! Exit codes: 0 all checks passed, 1 a check failed, 2 usage or config
//! error, 3 runtime or numerical error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use vptrap::acceptance::{self, Lab};
use vptrap::domain::parse_config_text;
use vptrap::history::FieldHistory;
use vptrap::kinetic::{self, RunOptions};
use vptrap::trapped::{self, TrappedOptions};
use vptrap::{linear, modfields, poisson, validate_config, DecaySeries, Error, SimConfig};

#[derive(Parser)]
#[command(name = "vptrap", version, about = "Vlasov-Poisson experiments in the trapping potential -|x|^2/2")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sup-norm decay of the free (linear) density.
    LinearDecay(Common),
    /// Commutator table, Jacobi identity and density identities.
    VerifyAlgebra(Common),
    /// Quadrature table for the Poisson kernel bound.
    KernelCheck(Common),
    /// Particle simulation: writes history.vptrap and diagnostics.csv.
    Simulate(Common),
    /// Samples the trapped set from a recorded history.
    TrappedSet {
        #[command(flatten)]
        common: Common,
        /// History file; defaults to `<out>/history.vptrap`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Transports modified-field coefficients and checks the bootstrap margins (2D only).
    ModifiedCoeffs(Common),
    /// Runs every acceptance criterion and prints a pass/fail table.
    FullVerify(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Config file with `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Config override `key=value`, applied after the file.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Worker threads; 1 gives bitwise reproducible output.
    #[arg(long)]
    workers: Option<usize>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

/// Failure carrying its exit code.
#[derive(Debug)]
enum Failure {
    Check(String),
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidInput(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(common: &Common) -> Result<SimConfig, Failure> {
    let mut raw = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))
                .map_err(Failure::Usage)?;
            parse_config_text(&text)?
        }
        None => Default::default(),
    };
    for item in &common.overrides {
        let (k, v) = item.split_once('=').ok_or_else(|| usage(format!("override '{item}' is not key=value")))?;
        raw.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(validate_config(&raw)?)
}

/// Creates the output directory and checks that none of `files` would be overwritten.
fn prepare_outputs(common: &Common, files: &[&str]) -> Result<Vec<PathBuf>, Failure> {
    fs::create_dir_all(&common.out)
        .with_context(|| format!("cannot create {}", common.out.display()))
        .map_err(Failure::Runtime)?;
    let paths: Vec<PathBuf> = files.iter().map(|f| common.out.join(f)).collect();
    if !common.force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    Ok(paths)
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display())).map_err(Failure::Runtime)
}

fn verdict(failures: &[String]) -> Outcome {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failures.join("; ")))
    }
}

fn series_csv(header: &str, columns: &[&DecaySeries]) -> String {
    let mut out = format!("{header}\n");
    for k in 0..columns[0].times.len() {
        let _ = write!(out, "{:.16e}", columns[0].times[k]);
        for c in columns {
            let _ = write!(out, ",{:.16e}", c.values[k]);
        }
        out.push('\n');
    }
    out
}

fn linear_decay(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let paths = prepare_outputs(common, &["linear_decay.csv", "linear_density.csv"])?;
    let f0 = kinetic::default_initial_data(&cfg);
    let mut sup = DecaySeries { times: vec![], values: vec![] };
    let mut weighted = sup.clone();
    let count = (cfg.t_max / 0.25).round().max(1.0) as usize;
    let mut last = None;
    for k in 0..=count {
        let t = cfg.t_max * k as f64 / count as f64;
        let rho = linear::linear_density_on_grid(&f0, t, &cfg)?;
        sup.push(t, rho.sup_norm());
        weighted.push(t, kinetic::weighted_sup_density(&rho, t, cfg.dim));
        last = Some(rho);
    }
    write(&paths[0], &series_csv("t,sup_rho,weighted_sup_rho", &[&sup, &weighted]))?;
    let rho = last.expect("at least one time");
    let mut grid = (1..=cfg.dim).map(|a| format!("x{a},")).collect::<String>() + "rho\n";
    let mut x = [0.0; 3];
    for node in 0..rho.n_nodes() {
        rho.node_position(node, &mut x);
        for a in &x[..cfg.dim] {
            let _ = write!(grid, "{a:.16e},");
        }
        let _ = writeln!(grid, "{:.16e}", rho.data[node]);
    }
    write(&paths[1], &grid)?;

    let target = -(cfg.dim as f64);
    let fit = kinetic::decay_fit(&sup, 1.0_f64.min(cfg.t_max / 2.0), cfg.t_max)?;
    println!("sup density slope {:.4} (expected {target} +- 0.1)", fit.slope);
    verdict(&if (fit.slope - target).abs() <= 0.1 { vec![] } else { vec![format!("slope {:.4}", fit.slope)] })
}

fn report_checks(lab: &Lab, name: &str) -> Result<(String, Vec<String>), Failure> {
    let report = lab.run_criterion(name)?;
    let mut text = String::new();
    let mut failures = Vec::new();
    for c in &report.checks {
        let _ = writeln!(text, "{} {c}", if c.passed { "ok  " } else { "FAIL" });
        if !c.passed {
            failures.push(c.label.clone());
        }
    }
    Ok((text, failures))
}

fn verify_algebra(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let paths = prepare_outputs(common, &["algebra_report.txt"])?;
    let (text, failures) = report_checks(&Lab::new(cfg), "algebra")?;
    print!("{text}");
    write(&paths[0], &text)?;
    verdict(&failures)
}

fn kernel_check(common: &Common) -> Outcome {
    let _ = load_config(common)?;
    let paths = prepare_outputs(common, &["kernel_table.csv"])?;
    let mut table = String::from("n,t,r,direct,rescaled,relative_difference\n");
    let mut failures = Vec::new();
    for n in [2usize, 3] {
        let bound = poisson::kernel_bound_quadrature(n, &vec![0.0; n])?;
        println!("n={n}: kernel bound at 0 = {bound:.12} (2 pi = {:.12})", 2.0 * std::f64::consts::PI);
        if (bound - 2.0 * std::f64::consts::PI).abs() > 1e-3 {
            failures.push(format!("kernel bound n={n}"));
        }
        for t in [0.0, 1.0, 2.0] {
            for r in [0.0, 0.5, 2.0, 8.0] {
                let mut x = vec![0.0; n];
                x[0] = r;
                let k = poisson::scaled_kernel_decay(n, t, &x)?;
                let _ = writeln!(table, "{n},{t},{r},{:.16e},{:.16e},{:.3e}", k.direct, k.rescaled, k.relative_difference);
            }
        }
    }
    print!("{table}");
    write(&paths[0], &table)?;
    verdict(&failures)
}

fn simulate(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let paths = prepare_outputs(common, &["history.vptrap", "diagnostics.csv"])?;
    let out = kinetic::run_simulation(&cfg, &kinetic::default_initial_data(&cfg))?;
    out.history.save(&paths[0])?;
    write(&paths[1], &out.report.to_csv())?;
    for w in &out.report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} snapshots written to {}", out.history.len(), common.out.display());
    if cfg.t_max > 1.5 {
        match out.report.force_fit(1.0, cfg.t_max) {
            Ok(fit) => println!("sup force slope on [1, {}]: {:.4} +- {:.4}", cfg.t_max, fit.slope, fit.stderr),
            Err(e) => eprintln!("force fit unavailable: {e}"),
        }
    }
    Ok(())
}

fn trapped_set(common: &Common, history: Option<&Path>) -> Outcome {
    let cfg = load_config(common)?;
    let path = history.map(Path::to_path_buf).unwrap_or_else(|| common.out.join("history.vptrap"));
    if !path.exists() {
        return Err(usage(format!("history file {} not found; run `simulate` first", path.display())));
    }
    let h = FieldHistory::load(&path)?;
    if h.dim != cfg.dim {
        return Err(usage(format!("history is {}D but the config says {}D", h.dim, cfg.dim)));
    }
    let paths = prepare_outputs(common, &["manifold.csv", "trapped_report.txt"])?;
    let opts = TrappedOptions::from_config(&cfg);
    let sample = trapped::sample_manifold(&trapped::box_grid(cfg.dim, 9, 1.0), &h, cfg.mu, &opts);
    write(&paths[0], &sample.to_csv())?;

    let mut report = String::new();
    let mut failures = Vec::new();
    let _ = writeln!(report, "points {} failures {}", sample.points.len(), sample.failures.len());
    for (x, e) in &sample.failures {
        let _ = writeln!(report, "failed at x = {x:?}: {e}");
        failures.push(format!("solve at {x:?}"));
    }
    if !sample.points.is_empty() {
        let _ = writeln!(report, "max iterations {}", sample.max_iterations());
        let _ = writeln!(report, "max contraction {:.4e}", sample.max_contraction());
        let _ = writeln!(report, "max defect {:.4e}", sample.max_defect());
        let sup = sample.sup_unstable();
        let _ = writeln!(report, "sup|x+v| {sup:.6e}  / eps {:.6e}  / sqrt(eps) {:.6e}", sup / cfg.eps, sup / cfg.eps.sqrt());
        let shift = 1.0f64.min(h.t_end() / 4.0);
        let mut invariance = 0.0f64;
        for m in &sample.points {
            invariance = invariance.max(trapped::invariance_check(m, &h, cfg.mu, &opts, shift)?);
        }
        let _ = writeln!(report, "invariance defect at shift {shift} {invariance:.4e}");
        if invariance > 1e-6 {
            failures.push("invariance".into());
        }
        let center = sample
            .points
            .iter()
            .min_by(|a, b| a.p.x.iter().map(|v| v.abs()).sum::<f64>().total_cmp(&b.p.x.iter().map(|v| v.abs()).sum()))
            .expect("non-empty");
        match trapped::escape_test(center, 1e-3, &h, cfg.mu, &opts) {
            Ok(e) => {
                let _ = writeln!(report, "escape from x = {:?} with delta 1e-3: time {:.4} slope {:.4}", center.p.x, e.time, e.slope);
            }
            Err(e) => {
                let _ = writeln!(report, "escape test failed: {e}");
                failures.push("escape".into());
            }
        }
    }
    let _ = writeln!(report, "force outside the recorded grid box is taken as zero");
    print!("{report}");
    write(&paths[1], &report)?;
    verdict(&failures)
}

fn modified_coeffs(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    if cfg.dim != 2 {
        return Err(usage("modified-coeffs supports dim=2 only"));
    }
    let paths = prepare_outputs(common, &["coefficients.csv", "margins.txt"])?;
    let opts = RunOptions { keep_potentials: true, ..Default::default() };
    let run = kinetic::run_simulation_with(&cfg, &kinetic::default_initial_data(&cfg), opts)?;
    let coeffs = modfields::transport_coefficients(&run.ensemble, &run.history, cfg.mu, &cfg, 64)?;
    write(&paths[0], &coeffs.to_csv())?;
    let m = modfields::bootstrap_check(&coeffs, &run.report, cfg.eps);
    let slope = modfields::unstable_growth_slope(&coeffs);
    let text = format!(
        "coefficient margin {:.6e}\ngradient margin {:.6e}\nforce margin {:.6e}\ngrowth slope {:.6e} (/ sqrt(eps) {:.4e})\n{}\n",
        m.coefficients,
        m.gradients,
        m.force,
        slope,
        slope / cfg.eps.sqrt(),
        if m.passed() { "bootstrap passed" } else { "bootstrap FAILED" }
    );
    print!("{text}");
    write(&paths[1], &text)?;
    verdict(&if m.passed() { vec![] } else { vec!["bootstrap margins".into()] })
}

fn full_verify(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let lab = Lab::new(cfg);
    let mut failures = Vec::new();
    for name in acceptance::CRITERIA {
        let r = lab.run_criterion(name)?;
        println!("{}", r.line());
        if !r.passed() {
            failures.push(name.to_string());
        }
    }
    verdict(&failures)
}

fn dispatch(cli: &Cli) -> Outcome {
    let common = match &cli.command {
        Command::LinearDecay(c)
        | Command::VerifyAlgebra(c)
        | Command::KernelCheck(c)
        | Command::Simulate(c)
        | Command::ModifiedCoeffs(c)
        | Command::FullVerify(c) => c,
        Command::TrappedSet { common, .. } => common,
    };
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(usage("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    match &cli.command {
        Command::LinearDecay(c) => linear_decay(c),
        Command::VerifyAlgebra(c) => verify_algebra(c),
        Command::KernelCheck(c) => kernel_check(c),
        Command::Simulate(c) => simulate(c),
        Command::TrappedSet { common, history } => trapped_set(common, history.as_deref()),
        Command::ModifiedCoeffs(c) => modified_coeffs(c),
        Command::FullVerify(c) => full_verify(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
                Failure::Usage(e) | Failure::Runtime(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
