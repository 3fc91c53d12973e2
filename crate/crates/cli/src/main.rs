//! `moeflow`: compile, simulate, verify, and benchmark MoE-FFN taskflows.
//!
//! Exit codes: 0 success, 2 input error, 3 simulation deadlock,
//! 4 verification failure.

mod bench;
mod runspec;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moeflow_core::compile::Compiled;
use moeflow_core::numeric::{
    alloc_buffers, as_f64, init_backward_inputs, init_forward_inputs, max_rel_err, random_weights,
    serial_backward, serial_forward, taskflow_execute,
};
use moeflow_core::routing::RoutingPlan;
use moeflow_core::sched::{deserialize_ssc, serialize_ssc, Ssc};
use moeflow_core::sim::{export_trace, metrics_to_json, simulate, SimOutcome};
use moeflow_core::{Error, Result};

use runspec::{GraphKind, RunSpec};

#[derive(Parser)]
#[command(name = "moeflow", version, about = "Static taskflow compiler and simulator for MoE-FFN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Run specification (JSON) that fully determines the run.
    #[arg(long)]
    config: PathBuf,
    /// Require exactly one trigger event per task during event synthesis.
    #[arg(long)]
    strict_single_trigger: bool,
    /// Disable rank-aware transmission reordering of communication puts.
    #[arg(long)]
    no_ratr: bool,
    /// Disable cache-guided interleaving of paired queue segments.
    #[arg(long)]
    no_interleave: bool,
    /// Apply ring reordering to combine-side puts as well (default: true).
    #[arg(long, value_name = "BOOL")]
    ratr_combine: Option<bool>,
    /// Worker threads for batched work.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the output directory from the run specification.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl CommonOpts {
    fn load_spec(&self) -> Result<RunSpec> {
        let mut spec = RunSpec::load(&self.config)?;
        if self.strict_single_trigger {
            spec.strict_single_trigger = true;
        }
        if self.no_ratr {
            spec.ratr = false;
        }
        if self.no_interleave {
            spec.interleave = false;
        }
        if let Some(rc) = self.ratr_combine {
            spec.ratr_combine = rc;
        }
        if let Some(dir) = &self.output_dir {
            spec.output_dir = dir.clone();
        }
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compile the configured graph into per-rank schedules.
    Compile(CommonOpts),
    /// Simulate a compiled schedule and write metrics and a trace.
    Simulate(CommonOpts),
    /// Execute the taskflow numerically and compare against the oracle.
    Verify(CommonOpts),
    /// Run a benchmark suite and write its CSV.
    Bench {
        /// Suite to run.
        #[arg(long)]
        suite: bench::Suite,
        /// Directory receiving the CSV (default: current directory).
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
        /// Worker threads for independent configurations.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Simulate and write only the timeline trace.
    ExportTrace(CommonOpts),
}

/// Failures carrying their contract exit code.
enum CliError {
    Core(Error),
    Verification(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Deadlock(_)) => 3,
            CliError::Core(_) => 2,
            CliError::Verification(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(Error::Deadlock(_)) => "deadlock",
            CliError::Core(_) => "input_error",
            CliError::Verification(_) => "verification_failure",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::Verification(m) => m.clone(),
        }
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::ConfigError(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, bytes)
        .map_err(|e| Error::ConfigError(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn write_compiled(spec: &RunSpec, compiled: &Compiled, plan: Option<&RoutingPlan>) -> Result<()> {
    for rank in &compiled.ranks {
        let bytes = serialize_ssc(&rank.ssc)?;
        write_file(&spec.output_dir, &format!("ssc_rank{}.json", rank.ssc.rank_id), &bytes)?;
    }
    let report = serde_json::to_vec_pretty(&compiled.report)
        .map_err(|e| Error::ParseError(e.to_string()))?;
    write_file(&spec.output_dir, "report.json", &report)?;
    if let Some(p) = plan {
        write_file(&spec.output_dir, "plan.json", &p.to_json()?)?;
    }
    Ok(())
}

/// Load previously compiled schedules from the output directory, or
/// recompile when none are present.
fn load_or_compile(spec: &RunSpec) -> Result<Vec<Ssc>> {
    let mut sscs = Vec::new();
    loop {
        let path = spec.output_dir.join(format!("ssc_rank{}.json", sscs.len()));
        if !path.is_file() {
            break;
        }
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::ConfigError(format!("cannot read {}: {e}", path.display())))?;
        sscs.push(deserialize_ssc(&bytes)?);
    }
    if sscs.is_empty() {
        let (compiled, _) = spec.compile()?;
        sscs = compiled.sscs();
    }
    Ok(sscs)
}

fn run_simulation(spec: &RunSpec, sscs: &[Ssc]) -> Result<SimOutcome> {
    let cm = spec.cost_model()?;
    simulate(sscs, &cm, spec.sim_mode(), spec.dispatch_mode())
}

fn cmd_compile(opts: &CommonOpts) -> std::result::Result<(), CliError> {
    let spec = opts.load_spec()?;
    let (compiled, plan) = spec.compile()?;
    write_compiled(&spec, &compiled, plan.as_ref())?;
    for r in &compiled.report.ranks {
        println!(
            "rank {}: {} tasks, {} events, ctq {}, vtq {}",
            r.rank_id, r.task_count, r.event_count, r.ctq_len, r.vtq_len
        );
    }
    println!("wrote {} schedule(s) to {}", compiled.ranks.len(), spec.output_dir.display());
    Ok(())
}

fn cmd_simulate(opts: &CommonOpts) -> std::result::Result<(), CliError> {
    let spec = opts.load_spec()?;
    let sscs = load_or_compile(&spec)?;
    let out = run_simulation(&spec, &sscs)?;
    write_file(&spec.output_dir, "metrics.json", &metrics_to_json(&out.per_rank)?)?;
    write_file(&spec.output_dir, "trace.json", &export_trace(&out.trace)?)?;
    println!("makespan: {:.3} us over {} rank(s)", out.makespan(), sscs.len());
    for (r, m) in out.per_rank.iter().enumerate() {
        println!(
            "rank {r}: makespan {:.3} us, aic busy {:.3}, aiv busy {:.3}, exposed comm {:.3}, l2 hit {:.3}",
            m.makespan_us, m.aic_busy_fraction, m.aiv_busy_fraction, m.exposed_comm_fraction, m.l2_hit_rate
        );
    }
    Ok(())
}

fn cmd_export_trace(opts: &CommonOpts) -> std::result::Result<(), CliError> {
    let spec = opts.load_spec()?;
    let sscs = load_or_compile(&spec)?;
    let out = run_simulation(&spec, &sscs)?;
    let path = write_file(&spec.output_dir, "trace.json", &export_trace(&out.trace)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// One verified output tensor: its name and per-rank worst relative error.
struct TensorCheck {
    name: &'static str,
    actual: Vec<f64>,
    expect: Vec<f64>,
}

fn gather(compiled: &Compiled, buffers: &[moeflow_core::numeric::RankBuffers], name: &str) -> Vec<f64> {
    (0..compiled.ranks.len())
        .flat_map(|r| as_f64(&buffers[r].by_name(compiled, r, name).expect("graph tensor").data))
        .collect()
}

fn verify_checks(spec: &RunSpec) -> Result<Vec<TensorCheck>> {
    let cfg = spec
        .shape_config
        .clone()
        .ok_or_else(|| Error::ConfigError("verify requires shape_config".into()))?;
    let (compiled, plan) = spec.compile()?;
    let plan = plan.ok_or_else(|| {
        Error::ConfigError("verify supports the forward and backward graphs only".into())
    })?;

    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    let dist = Uniform::new(0.05f64, 1.0);
    let draw = |seed: u64, n: usize| -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    let w = random_weights(&cfg, spec.input_seed);
    let total = cfg.ep_size * cfg.tokens() * cfg.hidden;
    let x = draw(spec.input_seed + 1, total);

    let sim = run_simulation(spec, &compiled.sscs())?;
    let mut buffers = alloc_buffers(&compiled);
    let mut checks = Vec::new();
    match spec.graph {
        GraphKind::Forward => {
            let oracle = serial_forward(&x, &cfg, &plan, &w)?;
            init_forward_inputs(&compiled, &mut buffers, &plan, &x, &w)?;
            taskflow_execute(&compiled, &plan, &sim.commit_order, &mut buffers)?;
            checks.push(TensorCheck {
                name: "t_y",
                actual: gather(&compiled, &buffers, "t_y"),
                expect: oracle.y,
            });
        }
        GraphKind::Backward => {
            let dy = draw(spec.input_seed + 2, total);
            let fwd = serial_forward(&x, &cfg, &plan, &w)?;
            let oracle = serial_backward(&x, &cfg, &plan, &w, &dy)?;
            init_backward_inputs(&compiled, &mut buffers, &plan, &dy, &w, &fwd)?;
            taskflow_execute(&compiled, &plan, &sim.commit_order, &mut buffers)?;
            checks.push(TensorCheck {
                name: "t_dx",
                actual: gather(&compiled, &buffers, "t_dx"),
                expect: oracle.dx,
            });
            checks.push(TensorCheck {
                name: "t_dw1",
                actual: gather(&compiled, &buffers, "t_dw1"),
                expect: oracle.dw1.iter().flatten().copied().collect(),
            });
            checks.push(TensorCheck {
                name: "t_dw2",
                actual: gather(&compiled, &buffers, "t_dw2"),
                expect: oracle.dw2.iter().flatten().copied().collect(),
            });
        }
        GraphKind::SwigluAdd => unreachable!("plan presence already checked"),
    }

    // test hook: corrupt one value of the named tensor before comparison
    if let Ok(name) = std::env::var("HPMOE_FAULT_TENSOR") {
        for c in &mut checks {
            if c.name == name && !c.actual.is_empty() {
                c.actual[0] = c.actual[0] * 2.0 + 1.0;
            }
        }
    }
    Ok(checks)
}

fn cmd_verify(opts: &CommonOpts) -> std::result::Result<(), CliError> {
    let spec = opts.load_spec()?;
    let checks = verify_checks(&spec)?;
    let mut worst: Option<(&'static str, usize, f64)> = None;
    for c in &checks {
        let err = max_rel_err(&c.actual, &c.expect);
        println!("{}: max relative error {err:.3e}", c.name);
        let elem = c
            .actual
            .iter()
            .zip(&c.expect)
            .enumerate()
            .max_by(|a, b| {
                let ra = (a.1 .0 - a.1 .1).abs() / (a.1 .1.abs() + 1e-12);
                let rb = (b.1 .0 - b.1 .1).abs() / (b.1 .1.abs() + 1e-12);
                ra.total_cmp(&rb)
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        if worst.map_or(true, |(_, _, w)| err > w) {
            worst = Some((c.name, elem, err));
        }
    }
    match worst {
        Some((name, elem, err)) if err >= 1e-5 => Err(CliError::Verification(format!(
            "{name}[{elem}] exceeds tolerance: max relative error {err:.3e} >= 1e-5"
        ))),
        _ => {
            println!("verification passed: all outputs within 1e-5");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Compile(o) => cmd_compile(o),
        Command::Simulate(o) => cmd_simulate(o),
        Command::Verify(o) => cmd_verify(o),
        Command::ExportTrace(o) => cmd_export_trace(o),
        Command::Bench { suite, output_dir, jobs } => {
            bench::run(*suite, output_dir, *jobs).map_err(CliError::from)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = serde_json::json!({
                "error": e.kind(),
                "message": e.message(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{doc}");
            ExitCode::from(e.exit_code())
        }
    }
}
