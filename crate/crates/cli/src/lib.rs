//! Command-line front end: `plan`, `simulate`, `sweep`, `faults`, `presets`.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when the
//! inputs are valid but no plan fits in memory.

pub mod args;
pub mod sweep;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use edgetrain::config::{ConfigFile, PlanFile};
use edgetrain::platform::{DEVICE_PRESETS, TESTBED_PRESETS};
use edgetrain::scheduler::{orchestrate, plan_checkpointing, Objective};
use edgetrain::sim::{inject_faults, simulate, simulate_traced};
use edgetrain::workload::{param_count, MODEL_PRESETS};
use edgetrain::{
    DeviceProfile, ExecMode, FaultModel, NetworkModel, Partition, SimConfig, TrainingJob, TransformerSpec,
    TrustedDomain,
};

use args::{Cli, Command, FaultsArgs, ObjectiveArg, PlanArgs, SetupArgs, SimulateArgs, SweepArgs};
pub use sweep::{sweep, to_csv, SweepRow};

pub const DEFAULT_TESTBED: &str = "homogeneous-nano4";
pub const DEFAULT_MODEL: &str = "gpt2-s";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] edgetrain::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
    /// Valid inputs whose plan does not fit in memory.
    #[error("{0}")]
    OutOfMemory(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::OutOfMemory(_)
            | CliError::Core(edgetrain::Error::Infeasible(_) | edgetrain::Error::NoFeasiblePartition) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Plan(a) => cmd_plan(&a, out, err),
        Command::Simulate(a) => cmd_simulate(&a, out, err),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Faults(a) => cmd_faults(&a, out, err),
        Command::Presets => cmd_presets(out),
    }
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn load_config(path: Option<&Path>) -> CliResult<Option<ConfigFile>> {
    path.map(|p| Ok(ConfigFile::parse(&read(p)?)?)).transpose()
}

/// Domain, model and job described by the common flags.
pub fn resolve_setup(s: &SetupArgs) -> CliResult<(TrustedDomain, TransformerSpec, TrainingJob)> {
    let config = load_config(s.config.as_deref())?.unwrap_or_default();
    let mode = s.mode.map(ExecMode::from);
    let mut domain = match (&config.domain, &s.testbed) {
        (Some(d), _) => d.resolve()?,
        (None, Some(name)) => TrustedDomain::preset(name, mode.unwrap_or_default())?,
        (None, None) if !s.devices.is_empty() => return ad_hoc(s, &config, mode),
        (None, None) => TrustedDomain::preset(DEFAULT_TESTBED, mode.unwrap_or_default())?,
    };
    if let Some(m) = mode {
        domain = domain.with_mode(m);
    }
    if !s.devices.is_empty() {
        domain = domain.subset(&s.devices)?;
    }
    let (spec, job) = model_and_job(s, &config)?;
    Ok((domain, spec, job))
}

fn ad_hoc(s: &SetupArgs, config: &ConfigFile, mode: Option<ExecMode>) -> CliResult<(TrustedDomain, TransformerSpec, TrainingJob)> {
    let mut devices = Vec::new();
    for kind in &s.devices {
        let n = devices.iter().filter(|d: &&DeviceProfile| d.id.starts_with(&format!("{kind}-"))).count();
        devices.push(DeviceProfile::preset(kind, format!("{kind}-{n}"))?);
    }
    let domain = TrustedDomain::new("ad-hoc", devices, NetworkModel::wireless_1000mbps(), mode.unwrap_or_default())?;
    let (spec, job) = model_and_job(s, config)?;
    Ok((domain, spec, job))
}

fn model_and_job(s: &SetupArgs, config: &ConfigFile) -> CliResult<(TransformerSpec, TrainingJob)> {
    let spec = match (&s.model, &config.model) {
        (Some(name), _) => TransformerSpec::preset(name)?,
        (None, Some(m)) => m.resolve()?,
        (None, None) => TransformerSpec::preset(DEFAULT_MODEL)?,
    };
    let job = match &config.job {
        Some(j) => j.resolve()?,
        None => TrainingJob::testbed(),
    };
    Ok((spec, job))
}

fn objective(a: &PlanArgs) -> CliResult<Objective> {
    Ok(match a.objective {
        ObjectiveArg::Energy => Objective::energy(),
        ObjectiveArg::Latency => Objective::latency(),
        ObjectiveArg::Weighted => Objective::weighted(a.weight_energy, a.weight_latency)?,
    })
}

fn sim_config(iterations: u64) -> CliResult<SimConfig> {
    if iterations == 0 {
        return Err(CliError::Usage("--iterations must be at least 1".into()));
    }
    Ok(SimConfig {
        iterations,
        ..SimConfig::default()
    })
}

fn describe_partition(p: &Partition) -> String {
    let list = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    match p {
        Partition::Single => "whole model".into(),
        Partition::Data(d) => format!("samples {} (sync every {})", list(&d.shard_sizes), d.sync_period),
        Partition::Sequence(s) => format!("tokens {}", list(&s.subseq_lengths)),
        Partition::Tensor(t) => format!("heads {}", list(&t.heads_per_device)),
        Partition::Pipeline(pp) => pp
            .stages
            .iter()
            .map(|s| format!("{}:{}-{}", s.device, s.start, s.end - 1))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

fn cmd_plan(a: &PlanArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let (domain, spec, job) = resolve_setup(&a.setup)?;
    let objective = objective(a)?;
    let mut fault_model = FaultModel::default();
    if let Some(m) = a.mtbf {
        fault_model.mtbf_per_device = m;
    }
    fault_model.validate()?;
    let config = sim_config(a.iterations)?;
    let strategy = orchestrate(&domain, &spec, &job, &objective, &fault_model, &config, a.select)?;

    let r = &strategy.predicted;
    let summary = format!(
        "domain:        {} ({})\nmodel:         {} ({} parameters)\nparticipants:  {}\nparallelism:   {}\npartition:     {}\nlatency:       {:.6} s/sample\nenergy:        {:.6} J/sample\ncheckpoint:    {}\n",
        domain.name,
        domain.mode,
        spec.name,
        param_count(&spec),
        strategy.selected_devices.join(", "),
        strategy.plan.kind(),
        describe_partition(&strategy.plan.partition),
        r.latency_per_sample.unwrap_or(f64::NAN),
        r.energy_per_sample.unwrap_or(f64::NAN),
        strategy
            .checkpoint_interval
            .map_or("disabled".to_string(), |t| format!("every {t:.1} s")),
    );
    let text = PlanFile::new(&domain, strategy).to_toml();
    match &a.out {
        Some(path) => {
            write_file(path, &text)?;
            emit(out, &summary)?;
            emit(out, &format!("plan written to {}\n", path.display()))
        }
        None => {
            let _ = err.write_all(summary.as_bytes());
            emit(out, &text)
        }
    }
}

fn load_plan(path: &Path) -> CliResult<(PlanFile, TrustedDomain)> {
    let plan = PlanFile::parse(&read(path)?)?;
    let domain = plan.domain.resolve()?;
    Ok((plan, domain))
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let (plan, domain) = load_plan(&a.plan)?;
    let config = SimConfig {
        warmup_iterations: a.warmup,
        meter_all_devices: a.meter_all,
        ..sim_config(a.iterations)?
    };
    let (result, trace) = if a.trace.is_some() {
        let (r, t) = simulate_traced(&plan.strategy.plan, &domain, &config)?;
        (r, Some(t))
    } else {
        (simulate(&plan.strategy.plan, &domain, &config)?, None)
    };
    if let (Some(path), Some(trace)) = (&a.trace, trace) {
        write_file(path, &trace.to_delimited())?;
    }
    let json = serde_json::to_string_pretty(&result)? + "\n";
    match &a.out {
        Some(path) => write_file(path, &json)?,
        None => emit(out, &json)?,
    }
    if result.oom {
        return Err(CliError::OutOfMemory(format!(
            "plan does not fit in memory on {}",
            result.oom_devices.join(", ")
        )));
    }
    let _ = writeln!(
        err,
        "{}: {:.6} s/sample, {:.6} J/sample over {} iterations",
        result.kind,
        result.latency_per_sample.unwrap_or(f64::NAN),
        result.energy_per_sample.unwrap_or(f64::NAN),
        result.iterations_simulated
    );
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = load_config(a.config.as_deref())?.unwrap_or_default();
    let domain = match (&config.domain, &a.testbed) {
        (Some(d), _) => d.resolve()?,
        (None, Some(name)) => TrustedDomain::preset(name, ExecMode::default())?,
        (None, None) => TrustedDomain::preset(DEFAULT_TESTBED, ExecMode::default())?,
    };
    let names: Vec<&str> = if a.model.is_empty() {
        MODEL_PRESETS.to_vec()
    } else {
        a.model.iter().map(String::as_str).collect()
    };
    let models = names
        .into_iter()
        .map(TransformerSpec::preset)
        .collect::<edgetrain::Result<Vec<_>>>()?;
    let modes = match a.mode {
        Some(m) => vec![m.into()],
        None => vec![ExecMode::GpuEnabled, ExecMode::CpuOnly],
    };
    let job = match &config.job {
        Some(j) => j.resolve()?,
        None => TrainingJob::testbed(),
    };
    let rows = sweep(&domain, &models, &modes, &job, &sim_config(a.iterations)?)?;
    let text = to_csv(&rows)?;
    match &a.out {
        Some(path) => write_file(path, &text),
        None => emit(out, &text),
    }
}

fn cmd_faults(a: &FaultsArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let (plan, domain) = load_plan(&a.plan)?;
    let fault_model = FaultModel {
        mtbf_per_device: a.mtbf,
        rng_seed: a.seed,
        ..FaultModel::default()
    };
    fault_model.validate()?;
    let config = sim_config(a.iterations)?;
    let plan = &plan.strategy.plan;
    let interval = match a.checkpoint_interval {
        Some(t) if !(t.is_finite() && t > 0.0) => {
            return Err(CliError::Usage("--checkpoint-interval must be a positive number".into()))
        }
        Some(t) => Some(t),
        None => {
            let base = simulate(plan, &domain, &config)?;
            let Some(iteration) = base.iteration_time() else {
                return Err(CliError::OutOfMemory(format!(
                    "plan does not fit in memory on {}",
                    base.oom_devices.join(", ")
                )));
            };
            plan_checkpointing(plan, &domain, &fault_model, iteration)?.interval
        }
    };
    let report = inject_faults(plan, &domain, &fault_model, a.horizon, interval, &config)?;
    if report.base.oom {
        return Err(CliError::OutOfMemory(format!(
            "plan does not fit in memory on {}",
            report.base.oom_devices.join(", ")
        )));
    }
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(path) => write_file(path, &json)?,
        None => emit(out, &json)?,
    }
    let _ = writeln!(
        err,
        "{} failures, goodput {:.4} samples/s ({:.1}% of fault-free)",
        report.failures,
        report.goodput,
        100.0 * report.goodput / report.fault_free_throughput
    );
    Ok(())
}

fn cmd_presets(out: &mut dyn Write) -> CliResult<()> {
    let mut text = String::from("testbeds:\n");
    for name in TESTBED_PRESETS {
        let d = TrustedDomain::preset(name, ExecMode::GpuEnabled)?;
        text += &format!("  {name:<20} {}\n", d.ids().join(", "));
    }
    text += "devices:\n";
    for kind in DEVICE_PRESETS {
        let d = DeviceProfile::preset(kind, kind)?;
        text += &format!(
            "  {kind:<6} cpu {:.0} GFLOP/s, gpu {:.0} GFLOP/s, {:.1} GiB, idle {} W, busy {}/{} W (cpu/gpu)\n",
            d.cpu_throughput / 1e9,
            d.gpu_throughput / 1e9,
            d.mem_capacity / (1u64 << 30) as f64,
            d.power_idle,
            d.power_cpu_busy,
            d.power_gpu_busy
        );
    }
    text += "models:\n";
    for name in MODEL_PRESETS {
        let s = TransformerSpec::preset(name)?;
        text += &format!(
            "  {name:<10} L={} h={} heads={} V={} ({} parameters)\n",
            s.num_blocks,
            s.hidden_size,
            s.num_heads,
            s.vocab_size,
            param_count(&s)
        );
    }
    emit(out, &text)
}
