use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};

use clap::{Args, Parser, Subcommand};

use carl_router::config::KeyValues;
use carl_router::data::{generate_synthetic, write_task_splits, SynthConfig};
use carl_router::harness::{ordered_points, point_dir, run_gradcheck, run_point, sweep_table, AblationAxis};
use carl_router::report::{
    build_report, load_run_with, phase_table, read_report, routing_rows, routing_table, trace_table, write_file,
    write_run, write_tables, RunReport,
};
use carl_router::routing::{evaluate_oracle, evaluate_routed, Strategy};
use carl_router::trainer::{run, RunConfig, RunMode};
use carl_router::Error;

#[derive(Parser, Debug)]
#[command(
    name = "carl-router",
    version,
    about = "Continual adapter-routing engine over frozen features"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write synthetic task splits.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a run and write its run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated task order (shorthand for `--set tasks=...`).
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        mode: Option<RunMode>,
        /// Also write per-sample routing traces.
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate a stored run.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "routed", value_parser = ["oracle", "routed"])]
        mode: String,
        #[arg(long, default_value = "selector")]
        strategy: Strategy,
        #[arg(long)]
        trace: bool,
    },
    /// Sweep one configuration axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated values; defaults depend on the axis.
        #[arg(long)]
        values: Option<String>,
        /// Number of concurrent sweep processes.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Finite-difference check of every trainable composite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Re-render the tables of a stored run and print a summary.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::GenSynth { common } => gen_synth(&common),
        Cmd::Train {
            common,
            tasks,
            mode,
            trace,
        } => train(&common, tasks, mode, trace),
        Cmd::Eval {
            common,
            run,
            mode,
            strategy,
            trace,
        } => eval(&common, &run, &mode, strategy, trace),
        Cmd::Ablate {
            common,
            axis,
            values,
            parallel,
        } => ablate(&common, axis, values, parallel),
        Cmd::Gradcheck { common } => gradcheck(&common),
        Cmd::Report { common, run } => report(&common, &run),
    }
}

/// File values first, then `--set` overrides in order.
fn effective_config(common: &Common, known: &[&str]) -> CliResult<KeyValues> {
    let mut kv = match &common.config {
        Some(path) => KeyValues::load(path)?,
        None => KeyValues::new(),
    };
    for assignment in &common.overrides {
        kv.apply_override(assignment)?;
    }
    if let Some(key) = kv.unknown_keys(known).first() {
        return Err(Failure::Usage(format!("unknown configuration key `{key}`")));
    }
    Ok(kv)
}

fn require_out(common: &Common) -> CliResult<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out is required".into()))
}

fn gen_synth(common: &Common) -> CliResult {
    let kv = effective_config(common, &SynthConfig::KEYS)?;
    let cfg = SynthConfig::from_key_values(&kv)?;
    let out = require_out(common)?;
    let tasks = generate_synthetic(&cfg)?;
    for t in &tasks {
        for path in write_task_splits(out, t)? {
            println!("{}", path.display());
        }
    }
    let echo = KeyValues::from_map(cfg.to_key_values());
    write_file(&out.join("synth.echo"), echo.to_text().as_bytes())?;
    Ok(())
}

fn train(common: &Common, tasks: Option<String>, mode: Option<RunMode>, trace: bool) -> CliResult {
    let mut kv = effective_config(common, &RunConfig::KEYS)?;
    if let Some(t) = tasks {
        kv.set("tasks", t);
    }
    if let Some(m) = mode {
        kv.set("mode", m.to_string());
    }
    let config = RunConfig::from_key_values(&kv)?;
    let out = require_out(common)?;
    let data = config.load_tasks()?;
    let state = run(config, data)?;
    let (report, traces) = build_report(&state)?;
    write_run(out, &state, &report, trace.then_some(&traces))?;
    print_summary(&report)
}

fn eval(common: &Common, run_dir: &Path, mode: &str, strategy: Strategy, trace: bool) -> CliResult {
    let mut kv = KeyValues::load(&run_dir.join("config.echo"))?;
    for (k, v) in effective_config(common, &RunConfig::KEYS)?.entries() {
        kv.set(k, v.clone());
    }
    let config = RunConfig::from_key_values(&kv)?;
    let tasks = config.load_tasks()?;
    let stored = load_run_with(run_dir, config)?;
    let test_sets: Vec<_> = tasks.iter().map(|t| &t.test).collect();
    let names: Vec<String> = tasks.iter().map(|t| t.name().to_string()).collect();
    let out = common.out.clone().unwrap_or_else(|| run_dir.join("eval"));
    let (section, traces) = if mode == "oracle" {
        (evaluate_oracle(&stored.modules, &test_sets)?, None)
    } else {
        let (s, t) = evaluate_routed(&stored.modules, stored.selector.as_ref(), &test_sets, strategy)?;
        (s, Some(t))
    };
    let json = serde_json::to_string_pretty(&section).expect("section serializes") + "\n";
    let stem = if mode == "oracle" {
        "oracle".to_string()
    } else {
        format!("routed_{strategy}")
    };
    write_file(
        &out.join("config.echo"),
        stored.config.to_key_values().to_text().as_bytes(),
    )?;
    write_file(&out.join(format!("{stem}.json")), json.as_bytes())?;
    if let Some(t) = &traces {
        let rows = routing_rows(&names, &BTreeMap::from([(strategy.to_string(), section.clone())]));
        rows.write(&out.join(format!("{stem}.csv")))?;
        if trace {
            trace_table(t, &names).write(&out.join(format!("trace_{strategy}.csv")))?;
        }
    }
    print!("{json}");
    Ok(())
}

fn parse_values(axis: AblationAxis, values: Option<String>) -> CliResult<Vec<String>> {
    let Some(raw) = values else {
        return Ok(axis.default_values());
    };
    let list: Vec<String> = raw
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if list.is_empty() {
        return Err(Failure::Usage("--values must name at least one value".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = list.iter().find(|v| !seen.insert(v.as_str())) {
        return Err(Failure::Usage(format!("duplicate sweep value `{dup}`")));
    }
    Ok(list)
}

fn ablate(common: &Common, axis: AblationAxis, values: Option<String>, parallel: usize) -> CliResult {
    if parallel == 0 {
        return Err(Failure::Usage("--parallel must be at least 1".into()));
    }
    let base = effective_config(common, &RunConfig::KEYS)?;
    let values = parse_values(axis, values)?;
    let out = require_out(common)?;
    let points = values
        .iter()
        .map(|v| Ok((v.clone(), axis.apply(&base, v)?)))
        .collect::<CliResult<Vec<_>>>()?;
    write_file(&out.join("config.echo"), base.to_text().as_bytes())?;

    let mut reports = BTreeMap::new();
    if parallel == 1 {
        for (value, kv) in &points {
            log::info!("sweep point {axis}={value}");
            reports.insert(value.clone(), run_point(kv, &point_dir(out, axis, value))?);
        }
    } else {
        run_parallel(out, axis, &points, parallel)?;
        for (value, _) in &points {
            reports.insert(value.clone(), read_report(&point_dir(out, axis, value))?);
        }
    }
    let table = sweep_table(axis, &ordered_points(&values, reports)?);
    let csv = table.to_csv()?;
    write_file(&out.join(format!("ablation_{axis}.csv")), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

/// Each point becomes one `train` process with its own run directory.
fn run_parallel(out: &Path, axis: AblationAxis, points: &[(String, KeyValues)], parallel: usize) -> CliResult {
    let exe = std::env::current_exe().map_err(|e| Failure::Runtime(format!("cannot locate executable: {e}")))?;
    let mut pending = points.iter();
    let mut running: Vec<(String, Child)> = Vec::new();
    loop {
        while running.len() < parallel {
            let Some((value, kv)) = pending.next() else { break };
            let dir = point_dir(out, axis, value);
            let config_path = dir.with_extension("config");
            write_file(&config_path, kv.to_text().as_bytes())?;
            let child = Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(&config_path)
                .arg("--out")
                .arg(&dir)
                .stdout(Stdio::null())
                .spawn()
                .map_err(|e| Failure::Runtime(format!("cannot spawn sweep point `{value}`: {e}")))?;
            running.push((value.clone(), child));
        }
        let Some((value, mut child)) = (!running.is_empty()).then(|| running.remove(0)) else {
            return Ok(());
        };
        let status = child
            .wait()
            .map_err(|e| Failure::Runtime(format!("sweep point `{value}`: {e}")))?;
        if !status.success() {
            for (_, mut c) in running {
                let _ = c.kill();
            }
            return Err(Failure::Runtime(format!("sweep point `{value}` failed with {status}")));
        }
    }
}

fn gradcheck(common: &Common) -> CliResult {
    let kv = effective_config(common, &["seed"])?;
    let seed = kv.parsed_or("seed", 1337u64)?;
    let summary = run_gradcheck(seed)?;
    let text = summary.to_string();
    if let Some(out) = &common.out {
        write_file(&out.join("config.echo"), kv.to_text().as_bytes())?;
        write_file(&out.join("gradcheck.txt"), text.as_bytes())?;
    }
    print!("{text}");
    if summary.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed for: {}",
            summary.failures().join(", ")
        )))
    }
}

fn report(common: &Common, run_dir: &Path) -> CliResult {
    effective_config(common, &[])?;
    let report = read_report(run_dir)?;
    let out = common.out.as_deref().unwrap_or(run_dir);
    write_tables(out, &report, None)?;
    print_summary(&report)
}

fn print_summary(report: &RunReport) -> CliResult {
    println!("mode {}; tasks {}", report.mode, report.task_order.join(" -> "));
    print!("{}", phase_table(report).to_csv()?);
    print!("{}", routing_table(report).to_csv()?);
    for (strategy, reason) in &report.unavailable {
        println!("{strategy}: unavailable ({reason})");
    }
    Ok(())
}
