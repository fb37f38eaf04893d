//! Command-line entry point wiring the whole toolchain together: single-run
//! sizing, one-shot measurement, report checking, repeated campaigns, and
//! variation studies.
//!
//! Exit codes are stable: 0 success, 1 configuration or usage error, 2 a run
//! that completed without meeting its targets (or a failed check), 3 a
//! simulation that would not complete. Every command writes its artifacts
//! under one work directory and lists them in `run_manifest.json` there; the
//! last stdout line is machine-parseable (`status=SUCCESS iters=13`).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::agent::{
    run_optimization, BaselineEngine, DesignEvaluator, LoopOptions, OutcomeStatus, ProposalEngine,
    SpiceEvaluator,
};
use crate::bench::{
    benchmark_names, campaign_csv, curve_study, fixture_names, load_benchmark, load_fixture,
    run_campaign, run_variation, sweep_csv, BenchCircuit, BenchError, CampaignConfig, Manifest,
    VariationConfig,
};
use crate::llm::{Client, LlmProposalEngine, ProviderConfig, TranscriptMode};
use crate::metrics::{MetricKind, MetricReport};
use crate::netlist::{parse_netlist, serialize_netlist, NetlistDoc};
use crate::sim::{EngineConfig, LoadCondition, SpiceRunner, TestbenchTemplate};
use crate::targets::{
    builtin_groups, check_all, group_by_name, load_group_file, CheckResult, Direction, TargetGroup,
};

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "acsizer",
    version,
    about = "Analog circuit sizing through a simulate-and-refine loop"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Size a circuit until it meets its target group
    Size(SizeArgs),
    /// Measure a design point once and report its metrics
    Measure(MeasureArgs),
    /// Check a stored metric report against a target group
    Check(CheckArgs),
    /// Run repeated sizing attempts and summarize the success rate
    Bench(BenchArgs),
    /// Jitter a design point and record characteristic-curve families
    Vary(VaryArgs),
}

#[derive(Args, Clone, Debug)]
struct CircuitArgs {
    /// Bundled benchmark name
    #[arg(long, alias = "circuit", conflicts_with = "netlist")]
    benchmark: Option<String>,
    /// Netlist file on disk
    #[arg(long)]
    netlist: Option<PathBuf>,
    /// Manifest file (testbench, tuning, default targets) for --netlist
    #[arg(long, requires = "netlist")]
    manifest: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
struct EngineArgs {
    /// Proposal engine: "baseline" (offline, seeded) or "llm"
    #[arg(long)]
    engine: Option<String>,
    /// Seed for the baseline engine
    #[arg(long)]
    seed: Option<u64>,
    /// Provider settings file (TOML) for the llm engine
    #[arg(long)]
    provider_config: Option<PathBuf>,
    /// Transcript file to record to or replay from
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Transcript handling: live, record, or replay
    #[arg(long)]
    transcript_mode: Option<String>,
}

#[derive(Args, Clone, Debug)]
struct ToolArgs {
    /// Settings file (TOML); command-line flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// SPICE engine binary
    #[arg(long)]
    spice_bin: Option<PathBuf>,
    /// Per-simulation time limit in seconds
    #[arg(long)]
    timeout_s: Option<f64>,
    /// Directory all artifacts are written under
    #[arg(long)]
    workdir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SizeArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    /// Target group: builtin name, or path to a group file
    #[arg(long)]
    group: Option<String>,
    /// Iteration budget override (defaults to the group's own budget)
    #[arg(long)]
    budget: Option<usize>,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    tool: ToolArgs,
}

#[derive(Args, Debug)]
struct MeasureArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    /// Target group used for load/supply and pass-fail annotation
    #[arg(long)]
    group: Option<String>,
    /// Bundled sized fixture applied before measuring
    #[arg(long)]
    fixture: Option<String>,
    /// Comma-separated metric subset (e.g. "gain_db,pm_deg")
    #[arg(long)]
    metrics: Option<String>,
    /// Also record characteristic curves (transfer, gain, load, CMRR)
    #[arg(long)]
    curves: bool,
    #[command(flatten)]
    tool: ToolArgs,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Metric report file (JSON) produced by `measure`
    #[arg(long)]
    report: PathBuf,
    /// Target group: builtin name, or path to a group file
    #[arg(long)]
    group: String,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    /// Target group (defaults to the benchmark's own)
    #[arg(long)]
    group: Option<String>,
    /// Number of independent attempts
    #[arg(long)]
    attempts: usize,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    tool: ToolArgs,
}

#[derive(Args, Debug)]
struct VaryArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    /// Target group (defaults to the benchmark's own)
    #[arg(long)]
    group: Option<String>,
    /// Bundled sized fixture used as the nominal design point
    #[arg(long)]
    fixture: Option<String>,
    /// Bias-voltage jitter, absolute volts (standard deviation)
    #[arg(long, default_value_t = 0.1)]
    sigma_bias: f64,
    /// Device-size jitter, relative (standard deviation)
    #[arg(long, default_value_t = 0.01)]
    sigma_size: f64,
    /// Number of jittered samples besides the nominal design
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Perturbation seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also run the full metric suite per sample and report its spread
    #[arg(long)]
    stats: bool,
    #[command(flatten)]
    tool: ToolArgs,
}

// ---------------------------------------------------------------------------
// Failures and config file
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Failure {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn simulation(message: impl Into<String>) -> Failure {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Failure {
        Failure::config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::config(e.to_string())
    }
}

/// Settings file contents; every field can be overridden by a flag.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    spice_bin: Option<PathBuf>,
    timeout_s: Option<f64>,
    seed: Option<u64>,
    budget: Option<usize>,
    engine: Option<String>,
    provider_config: Option<PathBuf>,
    workdir: Option<PathBuf>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| Failure::config(format!("config {} does not parse: {e}", path.display())))
}

/// Flags > config file > built-in defaults.
#[derive(Debug)]
struct Settings {
    engine_kind: String,
    seed: u64,
    budget: Option<usize>,
    provider_config: Option<PathBuf>,
    workdir: PathBuf,
    sim: EngineConfig,
}

fn resolve_settings(engine: &EngineArgs, tool: &ToolArgs) -> Result<Settings, Failure> {
    let file = load_file_config(&tool.config)?;
    let engine_kind = engine
        .engine
        .clone()
        .or(file.engine)
        .unwrap_or_else(|| "baseline".to_string());
    if engine_kind != "baseline" && engine_kind != "llm" {
        return Err(Failure::config(format!(
            "unknown engine '{engine_kind}' (expected baseline or llm)"
        )));
    }
    Ok(Settings {
        engine_kind,
        seed: engine.seed.or(file.seed).unwrap_or(0),
        budget: file.budget,
        provider_config: engine.provider_config.clone().or(file.provider_config),
        workdir: tool
            .workdir
            .clone()
            .or(file.workdir)
            .unwrap_or_else(|| PathBuf::from("acsizer_out")),
        sim: EngineConfig {
            binary: tool.spice_bin.clone().or(file.spice_bin),
            timeout_s: tool.timeout_s.or(file.timeout_s).unwrap_or(60.0),
        },
    })
}

// ---------------------------------------------------------------------------
// Circuit and target resolution
// ---------------------------------------------------------------------------

/// Guess the testbench wiring of a bare netlist from its node names.
fn infer_template(doc: &NetlistDoc) -> Result<TestbenchTemplate, String> {
    let mut nodes = BTreeSet::new();
    for card in &doc.elements {
        for node in &card.nodes {
            nodes.insert(node.as_str());
        }
    }
    let supply = ["vdd", "vcc"]
        .iter()
        .find(|name| doc.element(name).is_some())
        .ok_or("no vdd/vcc supply source found")?;
    if nodes.contains("inp") && nodes.contains("inn") && nodes.contains("out") {
        Ok(TestbenchTemplate {
            differential: true,
            input_pos: "inp".to_string(),
            input_neg: Some("inn".to_string()),
            output: "out".to_string(),
            supply_source: supply.to_string(),
        })
    } else if nodes.contains("in") && nodes.contains("out") {
        Ok(TestbenchTemplate {
            differential: false,
            input_pos: "in".to_string(),
            input_neg: None,
            output: "out".to_string(),
            supply_source: supply.to_string(),
        })
    } else {
        Err("cannot infer input/output ports (expected inp/inn/out or in/out)".to_string())
    }
}

fn scan_include_names(text: &str) -> Vec<String> {
    let mut names = Vec::new();
    for line in text.lines() {
        let mut tokens = line.split_whitespace();
        if tokens
            .next()
            .is_some_and(|t| t.eq_ignore_ascii_case(".include"))
        {
            if let Some(raw) = tokens.next() {
                names.push(raw.trim_matches(|c| c == '"' || c == '\'').to_string());
            }
        }
    }
    names
}

/// Gather every file the netlist pulls in via `.include`, transitively, so
/// the engine sees them next to the generated deck.
fn collect_support(dir: &Path, text: &str, depth: usize) -> Result<Vec<(String, String)>, Failure> {
    if depth > 8 {
        return Err(Failure::config("includes nest deeper than 8 levels"));
    }
    let mut out: Vec<(String, String)> = Vec::new();
    for name in scan_include_names(text) {
        if out.iter().any(|(n, _)| *n == name) {
            continue;
        }
        let path = dir.join(&name);
        let body = fs::read_to_string(&path)
            .map_err(|e| Failure::config(format!("cannot read include {}: {e}", path.display())))?;
        let nested_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for entry in collect_support(&nested_dir, &body, depth + 1)? {
            if !out.iter().any(|(n, _)| *n == entry.0) {
                out.push(entry);
            }
        }
        out.push((name, body));
    }
    Ok(out)
}

fn resolve_circuit(args: &CircuitArgs) -> Result<BenchCircuit, Failure> {
    if let Some(name) = &args.benchmark {
        return Ok(load_benchmark(name)?);
    }
    let Some(netlist_path) = &args.netlist else {
        return Err(Failure::config(format!(
            "pass --benchmark <name> or --netlist <file>; bundled benchmarks: {}",
            benchmark_names().join(", ")
        )));
    };
    let text = fs::read_to_string(netlist_path).map_err(|e| {
        Failure::config(format!("cannot read netlist {}: {e}", netlist_path.display()))
    })?;
    let baseline = parse_netlist(&text).map_err(|e| {
        Failure::config(format!("netlist {} does not parse: {e}", netlist_path.display()))
    })?;
    let netlist_dir = netlist_path.parent().map(Path::to_path_buf).unwrap_or_default();

    if let Some(manifest_path) = &args.manifest {
        let manifest_text = fs::read_to_string(manifest_path).map_err(|e| {
            Failure::config(format!("cannot read manifest {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = toml::from_str(&manifest_text).map_err(|e| {
            Failure::config(format!("manifest {} does not parse: {e}", manifest_path.display()))
        })?;
        let manifest_dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut support = Vec::new();
        for file in &manifest.support {
            let path = manifest_dir.join(file);
            let body = fs::read_to_string(&path).map_err(|e| {
                Failure::config(format!("cannot read support file {}: {e}", path.display()))
            })?;
            support.push((file.clone(), body));
        }
        return Ok(BenchCircuit {
            manifest,
            baseline,
            netlist_text: text,
            support,
        });
    }

    // Bare netlist: infer wiring, treat every device as an independent
    // tunable, and leave the target group to --group.
    let testbench = infer_template(&baseline).map_err(|e| {
        Failure::config(format!(
            "{}: {e}; pass --manifest to describe the testbench",
            netlist_path.display()
        ))
    })?;
    let name = netlist_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "netlist".to_string());
    let support = collect_support(&netlist_dir, &text, 0)?;
    let manifest = Manifest {
        name,
        circuit_type: "circuit".to_string(),
        support: support.iter().map(|(n, _)| n.clone()).collect(),
        testbench,
        tuning: Default::default(),
        sensitivity: Vec::new(),
        default_targets: TargetGroup {
            name: "default".to_string(),
            supply_v: 1.8,
            load: LoadCondition { cl: 1e-11, rl: 1e3 },
            max_iterations: 25,
            targets: Vec::new(),
        },
    };
    Ok(BenchCircuit {
        manifest,
        baseline,
        netlist_text: text,
        support,
    })
}

fn group_from_name_or_path(name: &str) -> Result<TargetGroup, Failure> {
    if let Some(group) = group_by_name(name) {
        return Ok(group);
    }
    let path = Path::new(name);
    if path.exists() {
        return load_group_file(path).map_err(Failure::config);
    }
    let known: Vec<String> = builtin_groups().iter().map(|g| g.name.clone()).collect();
    Err(Failure::config(format!(
        "'{name}' is neither a builtin group ({}) nor a file",
        known.join(", ")
    )))
}

fn resolve_group(arg: &Option<String>, bench: &BenchCircuit) -> Result<TargetGroup, Failure> {
    match arg {
        Some(name) => group_from_name_or_path(name),
        None => Ok(bench.default_targets().clone()),
    }
}

fn parse_metric_list(spec: &str) -> Result<BTreeSet<MetricKind>, Failure> {
    let mut wanted = BTreeSet::new();
    for raw in spec.split(',') {
        let name = raw.trim().to_ascii_lowercase();
        if name.is_empty() {
            continue;
        }
        let kind = MetricKind::ALL
            .into_iter()
            .find(|k| k.to_string() == name)
            .ok_or_else(|| {
                let known: Vec<String> = MetricKind::ALL.iter().map(|k| k.to_string()).collect();
                Failure::config(format!("unknown metric '{name}' (known: {})", known.join(", ")))
            })?;
        wanted.insert(kind);
    }
    if wanted.is_empty() {
        return Err(Failure::config("--metrics names no metrics"));
    }
    Ok(wanted)
}

fn normalize_fixture_name(name: &str) -> String {
    name.to_ascii_lowercase().replace('-', "_")
}

/// Apply `--fixture` to the benchmark baseline when given.
fn resolve_design(bench: &BenchCircuit, fixture: &Option<String>) -> Result<NetlistDoc, Failure> {
    match fixture {
        None => Ok(bench.baseline.clone()),
        Some(name) => {
            let fixture = load_fixture(&normalize_fixture_name(name)).map_err(|e| {
                Failure::config(format!("{e}; bundled fixtures: {}", fixture_names().join(", ")))
            })?;
            Ok(fixture.apply(bench)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

fn format_value(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 1e-2 && v.abs() < 1e5) {
        format!("{v:.4}")
    } else {
        format!("{v:.4e}")
    }
}

fn render_report(report: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>14}", "metric", "value");
    for (kind, value) in &report.values {
        let _ = writeln!(out, "{:<16} {:>14}", kind.to_string(), format_value(value.value));
    }
    for (kind, reason) in &report.absent {
        let _ = writeln!(out, "{:<16} {:>14}   ({reason})", kind.to_string(), "--");
    }
    out
}

fn render_checks(check: &CheckResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>14} {:>22} {:>12}  verdict",
        "metric", "value", "target (accepted)", "margin"
    );
    for c in &check.checks {
        let dir = match c.target.direction {
            Direction::AtLeast => ">=",
            Direction::AtMost => "<=",
        };
        let target = format!(
            "{dir} {} ({})",
            format_value(c.target.value),
            format_value(c.relaxed_bound)
        );
        let value = c.value.map(format_value).unwrap_or_else(|| "--".to_string());
        let margin = c.margin.map(format_value).unwrap_or_else(|| "--".to_string());
        let verdict = if c.pass { "pass" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<16} {:>14} {:>22} {:>12}  {verdict}",
            c.kind.to_string(),
            value,
            target,
            margin
        );
        if let Some(reason) = &c.absent_reason {
            let _ = writeln!(out, "{:<16} {:>14}   ({reason})", "", "");
        }
    }
    let _ = writeln!(
        out,
        "overall: {}",
        if check.overall_pass { "pass" } else { "FAIL" }
    );
    out
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::config(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, body + "\n")
        .map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn write_run_manifest(
    workdir: &Path,
    command: &str,
    artifacts: &[String],
) -> Result<(), Failure> {
    let manifest = serde_json::json!({
        "command": command,
        "workdir": workdir.display().to_string(),
        "artifacts": artifacts,
    });
    write_json(&workdir.join("run_manifest.json"), &manifest)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn build_proposal_engine(
    settings: &Settings,
    engine_args: &EngineArgs,
    bench: &BenchCircuit,
) -> Result<Box<dyn ProposalEngine>, Failure> {
    if settings.engine_kind == "baseline" {
        return Ok(Box::new(BaselineEngine::new(settings.seed, bench.sensitivity())));
    }
    let provider_path = settings
        .provider_config
        .as_ref()
        .ok_or_else(|| Failure::config("the llm engine needs --provider-config <file>"))?;
    let text = fs::read_to_string(provider_path).map_err(|e| {
        Failure::config(format!(
            "cannot read provider config {}: {e}",
            provider_path.display()
        ))
    })?;
    let provider: ProviderConfig = toml::from_str(&text).map_err(|e| {
        Failure::config(format!(
            "provider config {} does not parse: {e}",
            provider_path.display()
        ))
    })?;
    let mode = match &engine_args.transcript_mode {
        Some(raw) => raw.parse::<TranscriptMode>().map_err(Failure::config)?,
        None => TranscriptMode::Live,
    };
    let client = match mode {
        TranscriptMode::Live => {
            if engine_args.transcript.is_some() {
                return Err(Failure::config(
                    "--transcript needs --transcript-mode record or replay",
                ));
            }
            Client::new(provider)
        }
        TranscriptMode::Record => {
            let path = engine_args.transcript.as_ref().ok_or_else(|| {
                Failure::config("--transcript-mode record needs --transcript <file>")
            })?;
            Client::recording(provider, path)
        }
        TranscriptMode::Replay => {
            let path = engine_args.transcript.as_ref().ok_or_else(|| {
                Failure::config("--transcript-mode replay needs --transcript <file>")
            })?;
            Client::replaying(provider, path)
        }
    }
    .map_err(|e| Failure::config(e.to_string()))?;
    // Fail before any simulation when the credential is missing; replay runs
    // need no credential at all.
    if client.is_network() && std::env::var(&client.config().api_key_env).is_err() {
        return Err(Failure::config(format!(
            "environment variable {} is not set (required by the llm engine)",
            client.config().api_key_env
        )));
    }
    Ok(Box::new(LlmProposalEngine::new(client)))
}

fn cmd_size(args: &SizeArgs) -> Result<u8, Failure> {
    let settings = resolve_settings(&args.engine, &args.tool)?;
    let bench = resolve_circuit(&args.circuit)?;
    let mut group = resolve_group(&args.group, &bench)?;
    if let Some(budget) = args.budget.or(settings.budget) {
        if budget == 0 {
            return Err(Failure::config("--budget must be at least 1"));
        }
        group.max_iterations = budget;
    }
    if group.targets.is_empty() {
        return Err(Failure::config(format!(
            "target group '{}' declares no targets; pass --group",
            group.name
        )));
    }
    fs::create_dir_all(&settings.workdir)?;

    let mut engine = build_proposal_engine(&settings, &args.engine, &bench)?;
    let runner = SpiceRunner::new(&settings.sim, &settings.workdir.join("sim"), bench.support.clone())
        .map_err(|e| Failure::config(e.to_string()))?;
    let mut evaluator = SpiceEvaluator {
        runner,
        template: bench.template().clone(),
    };
    let opts = LoopOptions {
        circuit_type: bench.manifest.circuit_type.clone(),
        log_dir: Some(settings.workdir.join("logs")),
        ..LoopOptions::default()
    };
    println!(
        "sizing {} against group '{}' with the {} engine (budget {})",
        bench.name(),
        group.name,
        settings.engine_kind,
        group.max_iterations
    );
    let outcome = run_optimization(
        &bench.baseline,
        &group,
        &bench.policy(),
        engine.as_mut(),
        &mut evaluator,
        &opts,
    )
    .map_err(|e| Failure::config(e.to_string()))?;

    fs::write(
        settings.workdir.join("final.sp"),
        serialize_netlist(&outcome.final_netlist),
    )?;
    let summary = serde_json::json!({
        "circuit": bench.name(),
        "group": group.name,
        "engine": settings.engine_kind,
        "status": outcome.status,
        "iterations_used": outcome.iterations_used,
    });
    write_json(&settings.workdir.join("outcome.json"), &summary)?;
    write_run_manifest(
        &settings.workdir,
        "size",
        &[
            "final.sp".to_string(),
            "outcome.json".to_string(),
            "logs/iterations.jsonl".to_string(),
            "logs/history.jsonl".to_string(),
            "logs/reasons.md".to_string(),
        ],
    )?;
    if let Some(record) = outcome.history.records.last() {
        if let Some(check) = &record.check {
            print!("{}", render_checks(check));
        }
    }
    println!("status={} iters={}", outcome.status, outcome.iterations_used);
    Ok(match outcome.status {
        OutcomeStatus::Success => 0,
        OutcomeStatus::BudgetExhausted | OutcomeStatus::Aborted => 2,
    })
}

fn cmd_measure(args: &MeasureArgs) -> Result<u8, Failure> {
    let settings = resolve_settings(
        &EngineArgs {
            engine: None,
            seed: None,
            provider_config: None,
            transcript: None,
            transcript_mode: None,
        },
        &args.tool,
    )?;
    let bench = resolve_circuit(&args.circuit)?;
    let group = resolve_group(&args.group, &bench)?;
    let doc = resolve_design(&bench, &args.fixture)?;
    let wanted = match &args.metrics {
        Some(spec) => parse_metric_list(spec)?,
        None if !group.targets.is_empty() => group.metric_kinds(),
        None => MetricKind::ALL.into_iter().collect(),
    };
    fs::create_dir_all(&settings.workdir)?;

    let runner = SpiceRunner::new(&settings.sim, &settings.workdir.join("sim"), bench.support.clone())
        .map_err(|e| Failure::config(e.to_string()))?;
    let mut evaluator = SpiceEvaluator {
        runner,
        template: bench.template().clone(),
    };
    let report = evaluator
        .evaluate(&doc, &wanted, &group, 0)
        .map_err(|e| Failure::simulation(format!("{} failed: {}", e.stage, e.detail)))?;

    write_json(&settings.workdir.join("report.json"), &report)?;
    let mut artifacts = vec!["report.json".to_string()];
    print!("{}", render_report(&report));

    if args.metrics.is_none() && !group.targets.is_empty() {
        let check = check_all(&report, &group);
        print!("{}", render_checks(&check));
        write_json(&settings.workdir.join("check.json"), &check)?;
        artifacts.push("check.json".to_string());
    }

    if args.curves {
        let runner = SpiceRunner::new(
            &settings.sim,
            &settings.workdir.join("curves"),
            bench.support.clone(),
        )
        .map_err(|e| Failure::config(e.to_string()))?;
        let tpl = bench.template();
        let mut curves = vec![
            crate::bench::sweep_offset_vs_vcm(&doc, tpl, group.load, group.supply_v, &runner),
            crate::bench::sweep_gain_vs_vout(&doc, tpl, group.load, group.supply_v, &runner),
            crate::bench::sweep_gain_vs_rl(&doc, tpl, group.load.cl, group.supply_v, &runner),
        ];
        if tpl.differential {
            curves.push(crate::bench::sweep_cmrr_vs_vcm(
                &doc,
                tpl,
                group.load,
                group.supply_v,
                &runner,
            ));
        }
        let curves: Vec<_> = curves
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::simulation(e.to_string()))?;
        fs::write(settings.workdir.join("curves.csv"), sweep_csv(&curves))?;
        artifacts.push("curves.csv".to_string());
    }

    write_run_manifest(&settings.workdir, "measure", &artifacts)?;
    println!("report={}", settings.workdir.join("report.json").display());
    Ok(0)
}

fn cmd_check(args: &CheckArgs) -> Result<u8, Failure> {
    let text = fs::read_to_string(&args.report)
        .map_err(|e| Failure::config(format!("cannot read report {}: {e}", args.report.display())))?;
    let report: MetricReport = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("report {} does not parse: {e}", args.report.display())))?;
    let group = group_from_name_or_path(&args.group)?;
    let check = check_all(&report, &group);
    print!("{}", render_checks(&check));
    println!("verdict={}", if check.overall_pass { "PASS" } else { "FAIL" });
    Ok(if check.overall_pass { 0 } else { 2 })
}

fn cmd_bench(args: &BenchArgs) -> Result<u8, Failure> {
    if args.attempts == 0 {
        return Err(Failure::config("--attempts must be at least 1"));
    }
    let settings = resolve_settings(&args.engine, &args.tool)?;
    if settings.engine_kind != "baseline" {
        return Err(Failure::config(
            "campaigns run the offline baseline engine; drop --engine llm",
        ));
    }
    let bench = resolve_circuit(&args.circuit)?;
    let group = resolve_group(&args.group, &bench)?;
    if group.targets.is_empty() {
        return Err(Failure::config(format!(
            "target group '{}' declares no targets; pass --group",
            group.name
        )));
    }
    fs::create_dir_all(&settings.workdir)?;
    let cfg = CampaignConfig {
        attempts: args.attempts,
        base_seed: settings.seed.max(1),
        engine: settings.sim.clone(),
    };
    let summary = run_campaign(&bench, &group, &cfg, &settings.workdir)?;
    fs::write(settings.workdir.join("campaign.csv"), campaign_csv(&summary))?;
    write_json(&settings.workdir.join("campaign.json"), &summary)?;
    write_run_manifest(
        &settings.workdir,
        "bench",
        &["campaign.csv".to_string(), "campaign.json".to_string()],
    )?;
    for attempt in &summary.attempts {
        println!(
            "attempt {:02} seed {} -> {} ({} iterations){}",
            attempt.attempt,
            attempt.seed,
            attempt.status,
            attempt.iterations_used,
            attempt
                .error
                .as_ref()
                .map(|e| format!(": {e}"))
                .unwrap_or_default()
        );
    }
    let stats = summary
        .iteration_stats()
        .map(|(mean, min, max)| format!("{mean:.1} (min {min}, max {max})"))
        .unwrap_or_else(|| "--".to_string());
    println!(
        "successes={}/{} rate={:.2} mean_iters={stats}",
        summary.successes(),
        summary.attempts.len(),
        summary.success_rate()
    );
    Ok(0)
}

fn cmd_vary(args: &VaryArgs) -> Result<u8, Failure> {
    let settings = resolve_settings(
        &EngineArgs {
            engine: None,
            seed: Some(args.seed),
            provider_config: None,
            transcript: None,
            transcript_mode: None,
        },
        &args.tool,
    )?;
    let bench = resolve_circuit(&args.circuit)?;
    let group = resolve_group(&args.group, &bench)?;
    let design = resolve_design(&bench, &args.fixture)?;
    fs::create_dir_all(&settings.workdir)?;
    let cfg = VariationConfig {
        sigma_bias_v: args.sigma_bias,
        sigma_size_rel: args.sigma_size,
        samples: args.n,
        seed: args.seed,
    };

    let study = curve_study(
        &bench,
        &design,
        &cfg,
        &settings.sim,
        group.load,
        group.supply_v,
        &settings.workdir.join("curves"),
    )?;
    let mut artifacts = Vec::new();
    for family in &study.families {
        let file = format!("curves_{}.csv", family.kind);
        fs::write(settings.workdir.join(&file), sweep_csv(&family.curves))?;
        artifacts.push(file);
    }
    for failure in &study.failures {
        eprintln!("sweep skipped: {failure}");
    }

    if args.stats {
        let summary = run_variation(
            &bench,
            &design,
            &group,
            &cfg,
            &settings.sim,
            &settings.workdir.join("stats"),
        )?;
        write_json(&settings.workdir.join("variation.json"), &summary)?;
        artifacts.push("variation.json".to_string());
        for (kind, stats) in &summary.stats {
            println!(
                "{:<16} n={:<4} mean={} sd={} min={} max={}",
                kind.to_string(),
                stats.n,
                format_value(stats.mean),
                format_value(stats.std_dev),
                format_value(stats.min),
                format_value(stats.max)
            );
        }
    }

    write_run_manifest(&settings.workdir, "vary", &artifacts)?;
    println!(
        "curves={} samples={} sweep_failures={}",
        study.families.len(),
        args.n,
        study.failures.len()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match &cli.command {
        Cmd::Size(args) => cmd_size(args),
        Cmd::Measure(args) => cmd_measure(args),
        Cmd::Check(args) => cmd_check(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Vary(args) => cmd_vary(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
