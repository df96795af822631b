//! `smpc`: offline design, Monte Carlo evaluation and `M`-sweeps for the
//! stochastic MPC controllers in `smpc-core`.

mod report;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use smpc::artifact::{design_from_config, DesignArtifact, DesignBundle};
use smpc::config::ConfigFile;
use smpc::controllers::ControllerKind;
use smpc::design::{ControllerSpec, TubeSet};
use smpc::simulator::{monte_carlo, sweep_m, Entry, Policy};
use smpc::SmpcError;

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_ALARM: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "smpc", version, about = "Stochastic MPC with constraint tightening")]
struct Cli {
    /// Worker threads for Monte Carlo runs (defaults to all cores).
    #[arg(long, global = true, env = "SMPC_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute tightenings and terminal sets and write the design artifact.
    Design(DesignArgs),
    /// Monte Carlo evaluation of every controller and baseline.
    Simulate(SimulateArgs),
    /// Closed-loop cost of multi-step controllers over a range of M.
    SweepM(SweepArgs),
    /// Tables and charts of the tightening profiles.
    PlotTightening(PlotArgs),
}

#[derive(Args, Debug)]
struct DesignArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment seed (overrides the configuration).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of realizations (overrides the configuration).
    #[arg(long)]
    realizations: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Design artifact to reuse instead of designing again.
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long, required_unless_present = "artifact")]
    config: Option<PathBuf>,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Last index included in the tables and charts.
    #[arg(long, default_value_t = 100)]
    max_index: usize,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<SmpcError>() {
        Some(SmpcError::Config(_) | SmpcError::Dimension(_) | SmpcError::Json(_)) => EXIT_CONFIG,
        Some(SmpcError::Design(_) | SmpcError::InitialInfeasible(_)) => EXIT_INFEASIBLE,
        Some(SmpcError::InvariantViolation { .. }) => EXIT_ALARM,
        _ => 1,
    }
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    ConfigFile::load(path).map_err(|e| match e {
        SmpcError::Io(io) => SmpcError::config(format!("{}: {io}", path.display())),
        other => other,
    })
    .with_context(|| format!("loading configuration {}", path.display()))
}

fn load_artifact(path: &Path) -> Result<DesignArtifact> {
    DesignArtifact::load(path)
        .map_err(|e| match e {
            SmpcError::Io(io) => SmpcError::config(format!("{}: {io}", path.display())),
            other => other,
        })
        .with_context(|| format!("loading design artifact {}", path.display()))
}

fn out_dir(cfg: Option<&ConfigFile>, arg: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = match (arg, cfg) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => PathBuf::from(&c.output.dir),
        (None, None) => PathBuf::from("out"),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn apply_overrides(cfg: &mut ConfigFile, run: &RunArgs) -> Result<()> {
    if let Some(seed) = run.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(r) = run.realizations {
        cfg.experiment.realizations = r;
    }
    cfg.experiment.validate()?;
    Ok(())
}

/// Designed controllers from an artifact when given, otherwise from
/// scratch. `None` means a design was infeasible (already reported).
fn bundle(cfg: &ConfigFile, artifact: &Option<PathBuf>) -> Result<Option<DesignBundle>> {
    let state_rows = cfg.constraints.h_x.len();
    match artifact {
        Some(path) => {
            let art = load_artifact(path)?;
            let bad: Vec<&str> = art.controllers.iter().filter(|c| !c.feasible).map(|c| c.name.as_str()).collect();
            if !bad.is_empty() {
                report::print_tubes(&art, state_rows);
                eprintln!("design infeasible for: {}", bad.join(", "));
                return Ok(None);
            }
            Ok(Some(art.restore(cfg)?))
        }
        None => {
            let out = design_from_config(cfg)?;
            if out.feasibility.iter().any(|f| !f.feasible) {
                report::print_tubes(&out.artifact, state_rows);
                report::print_feasibility(&out.feasibility);
                eprintln!("design infeasible; no simulation run");
                return Ok(None);
            }
            Ok(Some(out.bundle))
        }
    }
}

fn design(args: &DesignArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    let dir = out_dir(Some(&cfg), &args.out)?;
    let out = design_from_config(&cfg)?;
    let path = dir.join("design.json");
    out.artifact.save(&path).with_context(|| format!("writing {}", path.display()))?;
    report::print_tubes(&out.artifact, cfg.constraints.h_x.len());
    report::print_feasibility(&out.feasibility);
    println!("artifact written to {}", path.display());
    if out.feasibility.iter().any(|f| !f.feasible) {
        eprintln!("design infeasible");
        return Ok(ExitCode::from(EXIT_INFEASIBLE));
    }
    Ok(ExitCode::SUCCESS)
}

fn report_alarms(reports: &[&smpc::simulator::ControllerReport]) -> usize {
    let mut count = 0;
    for r in reports {
        for a in &r.alarms {
            eprintln!("alarm: {} realization {} step {}: {}", r.name, a.realization, a.step, a.message);
            count += 1;
        }
    }
    count
}

fn simulate(args: &SimulateArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, &args.run)?;
    let dir = out_dir(Some(&cfg), &args.out)?;
    let Some(b) = bundle(&cfg, &args.artifact)? else {
        return Ok(ExitCode::from(EXIT_INFEASIBLE));
    };
    let report = monte_carlo(&b.system, &b.entries(), &b.x0, &cfg.experiment, b.reference.as_deref())?;
    report::write_simulation(&dir, &cfg.output.formats, &report)?;
    report::print_report(&report);
    if report_alarms(&report.controllers.iter().collect::<Vec<_>>()) > 0 {
        return Ok(ExitCode::from(EXIT_ALARM));
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(args: &SweepArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, &args.run)?;
    let Some(section) = cfg.sweep.clone() else {
        return Err(SmpcError::config("the configuration has no sweep section").into());
    };
    let dir = out_dir(Some(&cfg), &args.out)?;
    let Some(b) = bundle(&cfg, &args.artifact)? else {
        return Ok(ExitCode::from(EXIT_INFEASIBLE));
    };

    let mut refs: Vec<Entry<f64>> = b
        .controllers
        .iter()
        .filter(|(_, d)| matches!(d.kind, ControllerKind::Rs | ControllerKind::If))
        .map(|(name, d)| Entry {
            name: name.clone(),
            policy: Policy::Mpc(d.clone()),
        })
        .collect();
    if let Some(name) = &b.reference {
        if !refs.iter().any(|e| &e.name == name) {
            if let Some((_, k)) = b.baselines.iter().find(|(n, _)| n == name) {
                refs.push(Entry {
                    name: name.clone(),
                    policy: Policy::Feedback(k.clone()),
                });
            }
        }
    }
    let baselines = monte_carlo(&b.system, &refs, &b.x0, &cfg.experiment, b.reference.as_deref())?;
    let reference_cost = b.reference.as_deref().and_then(|n| baselines.get(n)).map(|r| r.avg_cost);

    let template = ControllerSpec {
        name: String::new(),
        kind: ControllerKind::If,
        horizon: section.horizon,
        measured_input: section.remark4_input_handling,
        gain: section.gain.to_spec()?,
    };
    let mut tubes = TubeSet::new(cfg.tightening.scenario(), cfg.tightening.k_bar);
    let mut points = sweep_m(
        &b.system,
        &template,
        &section.m,
        &template.gain,
        &mut tubes,
        &b.x0,
        &cfg.experiment,
    )?;
    for p in &mut points {
        if let (Some(r), Some(c)) = (p.report.as_mut(), reference_cost) {
            r.normalized_cost = Some(r.avg_cost / c);
        }
    }
    let out = report::SweepOutput {
        reference: b.reference.clone(),
        reference_cost,
        baselines: &baselines,
        points: &points,
    };
    report::write_sweep(&dir, &cfg.output.formats, &out, cfg.constraints.h_x.len())?;

    for p in &points {
        match &p.report {
            Some(r) => println!(
                "M = {:<4} cost {:.6}{}",
                p.m.to_string(),
                r.avg_cost,
                r.normalized_cost.map(|n| format!("  normalized {n:.4}")).unwrap_or_default()
            ),
            None => println!("M = {:<4} {}", p.m.to_string(), p.error.as_deref().unwrap_or("no result")),
        }
    }
    for r in &baselines.controllers {
        println!("{:<16} cost {:.6}", r.name, r.avg_cost);
    }
    let mut all: Vec<_> = baselines.controllers.iter().collect();
    all.extend(points.iter().filter_map(|p| p.report.as_ref()));
    if report_alarms(&all) > 0 {
        return Ok(ExitCode::from(EXIT_ALARM));
    }
    Ok(ExitCode::SUCCESS)
}

fn plot_tightening(args: &PlotArgs) -> Result<ExitCode> {
    let cfg = args.config.as_deref().map(load_config).transpose()?;
    let art = match (&args.artifact, &cfg) {
        (Some(path), cfg) => {
            let art = load_artifact(path)?;
            if let Some(cfg) = cfg {
                art.check_config(cfg)?;
            }
            art
        }
        (None, Some(cfg)) => design_from_config(cfg)?.artifact,
        (None, None) => bail!("either --config or --artifact is required"),
    };
    let dir = out_dir(cfg.as_ref(), &args.out)?;
    let formats = cfg.as_ref().map(|c| c.output.formats.clone()).unwrap_or_else(|| {
        use smpc::config::Format;
        vec![Format::Json, Format::Csv, Format::Svg]
    });
    for (i, t) in art.tubes.iter().enumerate() {
        report::write_tightening(&dir, &formats, i, t, args.max_index)?;
    }
    println!("wrote tightening profiles of {} tube(s) to {}", art.tubes.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Design(a) => design(a),
        Command::Simulate(a) => simulate(a),
        Command::SweepM(a) => sweep(a),
        Command::PlotTightening(a) => plot_tightening(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SMPC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
