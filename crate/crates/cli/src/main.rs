use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ttc_core::exec::ExecMode;
use ttc_core::harness::compare::{compare, compare_fields, Comparison};
use ttc_core::harness::config::{parse_config, Scenario};
use ttc_core::harness::output::{write_comparison, write_run, write_scenarios, write_sweep};
use ttc_core::harness::run::{run_scenario_with, RunManifest};
use ttc_core::harness::{presets, sweep};
use ttc_core::metrics::FrameEncoder;
use ttc_core::oracle;

const DEFAULT_OUT: &str = "ttc-lab-out";

#[derive(Parser)]
#[command(name = "ttc-lab", version, about = "Drift, correction and test-time scaling experiments on a synthetic chunk world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory [default: report.out from the config, else ./ttc-lab-out]
    #[arg(long, env = "TTC_LAB_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file
    #[arg(long)]
    config: PathBuf,
    /// Base seed; replicate i uses a seed derived from (seed, i)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
    /// Run seeds one after another instead of in parallel
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its manifest, rows and CSV summaries
    Run(RunArgs),
    /// Run every point of the scenario's [sweep] grid
    Sweep(RunArgs),
    /// Paired comparison of two manifests (b against a)
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Significance level separating "tie" from a direction
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Also write compare.csv here
        #[arg(long, env = "TTC_LAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Check the analytic components against independent numerical oracles
    Oracle {
        /// Samples for the mixture posterior Monte-Carlo check
        #[arg(long, default_value_t = 200_000)]
        mc_samples: usize,
    },
    /// Write the canonical scenario files
    Presets {
        #[command(flatten)]
        out: OutArg,
    },
}

fn load(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

fn out_dir(arg: &OutArg, scenario: Option<&Scenario>) -> PathBuf {
    arg.out
        .clone()
        .or_else(|| scenario.and_then(|s| s.report.out.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn mode(sequential: bool) -> ExecMode {
    if sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    }
}

fn reference_for(scenario: &Scenario, config: &Path) -> Result<Option<Scenario>> {
    match scenario.report.baseline.as_deref() {
        None => Ok(None),
        Some("self") => Ok(Some(scenario.as_baseline())),
        Some(other) => {
            let path = config.parent().unwrap_or(Path::new(".")).join(other);
            Ok(Some(load(&path).context("loading report.baseline")?))
        }
    }
}

fn print_manifest(m: &RunManifest) {
    println!(
        "{}: {} seeds, {} chunks, {} NFE per chunk, {} NFE total, {:.2}s",
        m.scenario,
        m.seeds.len(),
        m.n_chunks,
        m.nfe_per_chunk,
        m.nfe_total,
        m.wall_time_s
    );
    for a in &m.aggregates {
        let cmp = m.baseline.as_ref().and_then(|c| c.row(&a.field));
        match cmp {
            Some(r) => println!(
                "  {:<14} {:>12.6} ± {:<10.6} vs {:>12.6}  p = {:.3e}  {}",
                a.field,
                a.mean,
                a.std,
                r.mean_a,
                r.p_value,
                r.direction.as_str()
            ),
            None => println!("  {:<14} {:>12.6} ± {:.6}", a.field, a.mean, a.std),
        }
    }
}

fn print_comparison(c: &Comparison) {
    println!("{} vs {} over {} paired seeds", c.b, c.a, c.n_pairs);
    for r in &c.rows {
        println!(
            "  {:<14} {:>12.6} -> {:>12.6}  diff {:>+12.6}  p = {:.3e}  {}",
            r.field,
            r.mean_a,
            r.mean_b,
            r.mean_diff,
            r.p_value,
            r.direction.as_str()
        );
    }
}

fn run_one(scenario: &Scenario, config: &Path, seed: u64, dir: &Path, exec: ExecMode) -> Result<RunManifest> {
    let (mut manifest, records) = run_scenario_with(scenario, seed, exec, scenario.report.rollouts)?;
    if let Some(reference) = reference_for(scenario, config)? {
        let (base, _) = run_scenario_with(&reference, seed, exec, false)?;
        manifest.baseline = Some(compare_fields(&base, &manifest, &manifest.fields, scenario.report.alpha)?);
        write_run(&dir.join("baseline"), &base, &[])?;
    }
    write_run(dir, &manifest, &records)?;
    Ok(manifest)
}

fn run(args: &RunArgs) -> Result<()> {
    let scenario = load(&args.config)?;
    let dir = out_dir(&args.out, Some(&scenario)).join(&scenario.name);
    let manifest = run_one(&scenario, &args.config, args.seed, &dir, mode(args.sequential))?;
    print_manifest(&manifest);
    println!("wrote {}", dir.display());
    Ok(())
}

fn run_sweep(args: &RunArgs) -> Result<()> {
    let scenario = load(&args.config)?;
    if scenario.sweep.is_empty() {
        bail!("{} declares no [sweep] keys", args.config.display());
    }
    let points = sweep::expand(&scenario)?;
    let root = out_dir(&args.out, Some(&scenario)).join(&scenario.name);
    let started = Instant::now();
    let mut manifests = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let m = run_one(&p.scenario, &args.config, args.seed, &root.join(format!("point-{i:03}")), mode(args.sequential))?;
        print_manifest(&m);
        manifests.push(m);
    }
    write_sweep(&root.join("sweep.csv"), &points, &manifests)?;
    println!("{} points in {:.2}s, wrote {}", points.len(), started.elapsed().as_secs_f64(), root.display());
    Ok(())
}

fn read_manifest(path: &Path) -> Result<RunManifest> {
    let p = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
    RunManifest::from_json(&text).with_context(|| format!("in {}", p.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Compare { a, b, alpha, out } => (|| {
            let c = compare(&read_manifest(a)?, &read_manifest(b)?, *alpha)?;
            print_comparison(&c);
            if let Some(dir) = out {
                write_comparison(&dir.join("compare.csv"), &c)?;
            }
            Ok(())
        })(),
        Command::Oracle { mc_samples } => (|| {
            let started = Instant::now();
            let checks = oracle::run_all(&FrameEncoder::nonlinear(8, 32, 16, 7), *mc_samples);
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed, {:.2}s", checks.len(), started.elapsed().as_secs_f64());
            if failed > 0 {
                bail!("{failed} oracle check(s) failed");
            }
            Ok(())
        })(),
        Command::Presets { out } => (|| {
            let dir = out_dir(out, None);
            for p in write_scenarios(&dir, &presets::presets())? {
                println!("{}", p.display());
            }
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
