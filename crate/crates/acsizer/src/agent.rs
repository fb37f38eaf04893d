//! The sizing optimization loop.
//!
//! A run decomposes into four fixed pipeline stages (analysis planning,
//! sizing-prompt generation, simulation + measurement, comparison +
//! reporting) and then iterates: ask a [`ProposalEngine`] for a parameter
//! patch, apply it under the netlist constraints, measure the patched
//! design, and check the measurements against the target group. The loop
//! stops at the first full pass, when the iteration budget runs out, or
//! when the engine fails unrecoverably. Every iteration — including failed
//! ones — is recorded with its rationale so a run can be audited afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{assemble_report, MetricKind, MetricReport, ReportContext};
use crate::netlist::{
    apply_patch, extract_tunables, validate_constraints, GroupingPolicy, NetlistDoc, ParamPatch,
    PatchAssignment, PhysicalValue, TunableKind, TunableParam,
};
use crate::sim::{plan_analyses, run_planned, SimError, SpiceRunner, TestbenchTemplate};
use crate::targets::{check_all, relaxed_bound, CheckResult, Direction, MetricCheck, TargetGroup};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("target group '{0}' declares no targets")]
    EmptyTargets(String),
    #[error("baseline netlist violates its own sizing constraints: {0}")]
    InvalidBaseline(String),
    #[error("the sizing policy resolves to no tunable parameters")]
    NoTunables,
    #[error("netlist error: {0}")]
    Netlist(#[from] crate::netlist::NetlistError),
    #[error("cannot write run logs: {0}")]
    Log(#[from] std::io::Error),
}

/// What one iteration observed: either a completed measurement pass or the
/// failure that prevented one. Failures are data, not aborts — they go into
/// the history so the engine can react to them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    Report(MetricReport),
    Failure { stage: String, detail: String },
}

/// Everything one loop iteration did and saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based position in the run.
    pub index: usize,
    pub patch: ParamPatch,
    pub observation: Observation,
    /// Present exactly when the observation is a report.
    pub check: Option<CheckResult>,
    pub rationale: String,
    pub wallclock_s: f64,
}

/// The in-context memory of a run: the fixed framing (circuit type,
/// baseline, targets) plus every iteration so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextHistory {
    pub circuit_type: String,
    pub baseline: NetlistDoc,
    pub group: TargetGroup,
    pub records: Vec<IterationRecord>,
}

/// One fixed pipeline stage of an optimization job.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskDescriptor {
    pub index: usize,
    pub name: String,
    pub description: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// For the analysis-planning stage: the simulations that cover the
    /// targeted metrics, as `KIND/topology` labels. Empty for other stages.
    pub analyses: Vec<String>,
}

/// Break a sizing job into its four ordered stages. The first stage resolves
/// the concrete analysis plan implied by the group's metrics.
pub fn decompose_tasks(
    baseline: &NetlistDoc,
    group: &TargetGroup,
) -> Result<Vec<TaskDescriptor>, AgentError> {
    if group.targets.is_empty() {
        return Err(AgentError::EmptyTargets(group.name.clone()));
    }
    let plan = plan_analyses(
        &group.metric_kinds(),
        group.supply_v / 2.0,
        group.load,
        group.supply_v,
    );
    let analyses: Vec<String> = plan
        .iter()
        .map(|p| format!("{}/{}", p.spec.kind_name(), p.testbench.topology))
        .collect();
    Ok(vec![
        TaskDescriptor {
            index: 1,
            name: "analysis_planning".to_string(),
            description: format!(
                "select the simulations that cover the {} targeted metrics",
                group.targets.len()
            ),
            inputs: vec![
                format!("target group '{}'", group.name),
                format!("netlist '{}'", baseline.title),
            ],
            outputs: vec![format!("{} planned analyses", plan.len())],
            analyses,
        },
        TaskDescriptor {
            index: 2,
            name: "sizing_prompt_generation".to_string(),
            description: "render the context history and tunable surface into a proposal prompt"
                .to_string(),
            inputs: vec![
                "context history".to_string(),
                "tunable parameter list".to_string(),
            ],
            outputs: vec!["prompt bundle".to_string()],
            analyses: Vec::new(),
        },
        TaskDescriptor {
            index: 3,
            name: "simulation_and_measurement".to_string(),
            description: "run the planned analyses on the patched netlist and extract the metrics"
                .to_string(),
            inputs: vec![
                "patched netlist".to_string(),
                "planned analyses".to_string(),
            ],
            outputs: vec!["metric report".to_string()],
            analyses: Vec::new(),
        },
        TaskDescriptor {
            index: 4,
            name: "comparison_and_reporting".to_string(),
            description: "check the report against the relaxed targets and record the iteration"
                .to_string(),
            inputs: vec![
                "metric report".to_string(),
                format!("target group '{}'", group.name),
            ],
            outputs: vec!["check result".to_string(), "iteration record".to_string()],
            analyses: Vec::new(),
        },
    ])
}

/// The three pieces of a proposal prompt: fixed constraints, the rendered
/// context (circuit type, targets, previous and current results), and the
/// step-by-step reasoning instructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub context: String,
    pub cot_instructions: String,
}

fn render_target_line(spec: &crate::targets::TargetSpec) -> String {
    let dir = match spec.direction {
        Direction::AtLeast => ">=",
        Direction::AtMost => "<=",
    };
    format!(
        "- {} ({}) {} {} {} (accepted {} {})",
        spec.kind.label(),
        spec.kind,
        dir,
        spec.value,
        spec.kind.unit(),
        dir,
        relaxed_bound(spec)
    )
}

fn render_record(record: &IterationRecord) -> String {
    let mut line = format!("iteration {}:", record.index);
    if record.patch.assignments.is_empty() {
        line.push_str(" no parameter changes;");
    } else {
        line.push_str(" set");
        for a in &record.patch.assignments {
            line.push_str(&format!(" {}.{}={}", a.target, a.param, a.value));
        }
        line.push(';');
    }
    match &record.observation {
        Observation::Report(report) => {
            for (kind, value) in &report.values {
                line.push_str(&format!(" {kind}={}", value.value));
            }
            for (kind, reason) in &report.absent {
                line.push_str(&format!(" {kind}=unavailable ({reason})"));
            }
            if let Some(check) = &record.check {
                let total = check.checks.len();
                let passed = check.checks.iter().filter(|c| c.pass).count();
                if check.overall_pass {
                    line.push_str(&format!(" -> all {total} targets met"));
                } else {
                    let failing: Vec<String> =
                        check.failing().map(|c| c.kind.to_string()).collect();
                    line.push_str(&format!(
                        " -> {passed}/{total} targets met (failing: {})",
                        failing.join(", ")
                    ));
                }
            }
        }
        Observation::Failure { stage, detail } => {
            line.push_str(&format!(" {stage} failed: {detail}"));
        }
    }
    line
}

/// Render the proposal prompt from the run history and the current tunable
/// surface. The context always carries its four sections; before any
/// measurement exists the previous results read "none" and the current
/// results ask for a baseline evaluation.
pub fn build_prompt(history: &ContextHistory, tunables: &[TunableParam]) -> PromptBundle {
    let mut system = String::from(
        "You are an analog circuit sizing assistant. Adjust only the declared \
         tunable parameters of the netlist so that every performance target is \
         met. Hard constraints:\n\
         - keep the power supply voltage unchanged\n\
         - keep the transistor models unchanged\n\
         - do not add, remove, or rewire any element\n\
         - matched groups are addressed by one handle and stay identical\n\
         Tunable parameters (current value, allowed range):\n",
    );
    for t in tunables {
        let lo = PhysicalValue {
            magnitude: t.bounds.0,
            unit: t.param.unit(),
        };
        let hi = PhysicalValue {
            magnitude: t.bounds.1,
            unit: t.param.unit(),
        };
        system.push_str(&format!(
            "- {}.{} = {} (allowed {} to {})\n",
            t.key(),
            t.param,
            t.value,
            lo,
            hi
        ));
    }

    let mut context = String::new();
    context.push_str("[circuit_type]\n");
    context.push_str(&history.circuit_type);
    context.push_str("\n\n[target_performance]\n");
    for spec in &history.group.targets {
        context.push_str(&render_target_line(spec));
        context.push('\n');
    }
    context.push_str("\n[previous_results]\n");
    if history.records.len() <= 1 {
        context.push_str("none\n");
    } else {
        for record in &history.records[..history.records.len() - 1] {
            context.push_str(&render_record(record));
            context.push('\n');
        }
    }
    context.push_str("\n[current_results]\n");
    match history.records.last() {
        None => context.push_str("no measurements yet; evaluate the baseline netlist first\n"),
        Some(record) => {
            context.push_str(&render_record(record));
            context.push('\n');
        }
    }

    let cot_instructions = String::from(
        "Reason step by step before answering:\n\
         1. Compare the current results with the target performance and list \
         every failing metric with its margin.\n\
         2. For each failing metric, recall how it depends on the tunable \
         parameters, and check the previous results for evidence of which \
         changes helped or hurt.\n\
         3. Choose a small set of parameter changes that improves the worst \
         failing metric without breaking the metrics that already pass.\n\
         4. Answer with one apply_sizing call containing the chosen \
         assignments and a concise rationale.\n",
    );

    PromptBundle {
        system,
        context,
        cot_instructions,
    }
}

/// What a proposal engine is and guarantees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineDescriptor {
    pub name: String,
    /// Same prompt + same internal seed/transcript => same proposal.
    pub deterministic: bool,
    pub requires_network: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineFailure {
    #[error("proposal transport failed: {0}")]
    Transport(String),
    #[error("malformed proposal: {0}")]
    Malformed(String),
}

/// Read-only view an engine gets alongside the rendered prompt: the raw
/// history (for engines that prefer structured data over prose) and the
/// current tunable surface with bounds.
pub struct ProposalContext<'a> {
    pub history: &'a ContextHistory,
    pub tunables: &'a [TunableParam],
}

/// Anything that can turn a prompt into the next parameter patch.
pub trait ProposalEngine {
    fn descriptor(&self) -> EngineDescriptor;
    fn propose(
        &mut self,
        prompt: &PromptBundle,
        ctx: &ProposalContext<'_>,
    ) -> Result<ParamPatch, EngineFailure>;
}

/// Ask `engine` for a patch and sanitize it: an empty rationale is replaced,
/// and assignments outside a tunable's bounds are clamped to the bound with
/// a note appended to the rationale.
pub fn propose(
    engine: &mut dyn ProposalEngine,
    prompt: &PromptBundle,
    ctx: &ProposalContext<'_>,
) -> Result<ParamPatch, EngineFailure> {
    let mut patch = engine.propose(prompt, ctx)?;
    if patch.rationale.trim().is_empty() {
        patch.rationale = "(engine provided no rationale)".to_string();
    }
    let mut notes = Vec::new();
    for assignment in &mut patch.assignments {
        let Some(tunable) = ctx
            .tunables
            .iter()
            .find(|t| t.key() == assignment.target && t.param == assignment.param)
        else {
            continue; // unknown targets are apply_patch's call to reject
        };
        let (lo, hi) = tunable.bounds;
        let suggested = assignment.value.magnitude;
        if suggested < lo || suggested > hi {
            let clamped = suggested.clamp(lo, hi);
            notes.push(format!(
                "[clamped {}.{} from {} to {}]",
                assignment.target, assignment.param, suggested, clamped
            ));
            assignment.value.magnitude = clamped;
        }
    }
    if !notes.is_empty() {
        patch.rationale.push(' ');
        patch.rationale.push_str(&notes.join(" "));
    }
    Ok(patch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeStatus {
    Success,
    BudgetExhausted,
    Aborted,
}

impl fmt::Display for OutcomeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OutcomeStatus::Success => "SUCCESS",
            OutcomeStatus::BudgetExhausted => "BUDGET_EXHAUSTED",
            OutcomeStatus::Aborted => "ABORTED",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationOutcome {
    pub status: OutcomeStatus,
    pub final_netlist: NetlistDoc,
    pub history: ContextHistory,
    pub iterations_used: usize,
}

/// A measurement pass that could not complete, attributed to the stage that
/// broke (proposal, patching, simulation, extraction).
#[derive(Clone, Debug)]
pub struct EvalFailure {
    pub stage: String,
    pub detail: String,
}

/// Anything that can measure a design point. The production implementation
/// drives the SPICE engine; tests substitute analytic or scripted stubs.
pub trait DesignEvaluator {
    fn evaluate(
        &mut self,
        doc: &NetlistDoc,
        wanted: &BTreeSet<MetricKind>,
        group: &TargetGroup,
        iteration: usize,
    ) -> Result<MetricReport, EvalFailure>;
}

/// The production evaluator: plan the analyses for the wanted metrics, run
/// them through the SPICE engine in per-iteration work directories, and
/// assemble the report.
pub struct SpiceEvaluator {
    pub runner: SpiceRunner,
    pub template: TestbenchTemplate,
}

fn sim_stage(err: &SimError) -> &'static str {
    match err {
        SimError::ConvergenceFailure { .. } => "simulation_convergence",
        SimError::Timeout { .. } => "simulation_timeout",
        SimError::EngineCrash { .. } => "simulation_crash",
        SimError::ParseFailure { .. } => "rawfile_parse",
        _ => "simulation",
    }
}

impl DesignEvaluator for SpiceEvaluator {
    fn evaluate(
        &mut self,
        doc: &NetlistDoc,
        wanted: &BTreeSet<MetricKind>,
        group: &TargetGroup,
        iteration: usize,
    ) -> Result<MetricReport, EvalFailure> {
        let plan = plan_analyses(wanted, group.supply_v / 2.0, group.load, group.supply_v);
        let results = run_planned(
            doc,
            &plan,
            &self.template,
            &self.runner,
            &format!("iter_{iteration:02}_"),
        )
        .map_err(|e| EvalFailure {
            stage: sim_stage(&e).to_string(),
            detail: e.to_string(),
        })?;
        let ctx = ReportContext {
            template: &self.template,
            supply_v: group.supply_v,
            load: group.load,
            design_point_id: format!("iter_{iteration:02}"),
        };
        assemble_report(&results, wanted, &ctx).map_err(|e| EvalFailure {
            stage: "assemble_report".to_string(),
            detail: e.to_string(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct LoopOptions {
    /// Circuit family label rendered into the prompt ("opamp", "inverter").
    pub circuit_type: String,
    /// When set, the run writes `iterations.jsonl` (full records including
    /// timing), `history.jsonl` (timing-free, replay-stable), and
    /// `reasons.md` (one section per iteration) under this directory.
    pub log_dir: Option<PathBuf>,
    /// Consecutive proposal-engine failures tolerated before aborting.
    pub engine_failure_limit: usize,
}

impl Default for LoopOptions {
    fn default() -> Self {
        LoopOptions {
            circuit_type: "circuit".to_string(),
            log_dir: None,
            engine_failure_limit: 3,
        }
    }
}

/// Serialization of a record with volatile fields (timing) removed — the
/// line format of `history.jsonl`, stable across identical reruns.
pub fn canonical_record_json(record: &IterationRecord) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        index: usize,
        patch: &'a ParamPatch,
        observation: &'a Observation,
        check: &'a Option<CheckResult>,
        rationale: &'a str,
    }
    serde_json::to_string(&Canonical {
        index: record.index,
        patch: &record.patch,
        observation: &record.observation,
        check: &record.check,
        rationale: &record.rationale,
    })
    .expect("iteration records serialize")
}

fn summarize_observation(record: &IterationRecord) -> String {
    match &record.observation {
        Observation::Report(report) => match &record.check {
            Some(check) if check.overall_pass => "all targets met".to_string(),
            Some(check) => {
                let total = check.checks.len();
                let passed = check.checks.iter().filter(|c| c.pass).count();
                let failing: Vec<String> = check.failing().map(|c| c.kind.to_string()).collect();
                format!(
                    "{passed} of {total} targets met (failing: {})",
                    failing.join(", ")
                )
            }
            None => format!("{} metrics measured", report.values.len()),
        },
        Observation::Failure { stage, detail } => format!("{stage} failed: {detail}"),
    }
}

struct RunLogs {
    iterations: File,
    history: File,
    reasons: File,
}

impl RunLogs {
    fn create(dir: &Path) -> std::io::Result<RunLogs> {
        std::fs::create_dir_all(dir)?;
        Ok(RunLogs {
            iterations: File::create(dir.join("iterations.jsonl"))?,
            history: File::create(dir.join("history.jsonl"))?,
            reasons: File::create(dir.join("reasons.md"))?,
        })
    }

    fn append(&mut self, record: &IterationRecord) -> std::io::Result<()> {
        let full = serde_json::to_string(record).expect("iteration records serialize");
        writeln!(self.iterations, "{full}")?;
        writeln!(self.history, "{}", canonical_record_json(record))?;
        writeln!(
            self.reasons,
            "## Iteration {}\n\n{}\n\nOutcome: {}\n",
            record.index,
            record.rationale,
            summarize_observation(record)
        )?;
        self.iterations.flush()?;
        self.history.flush()?;
        self.reasons.flush()
    }
}

fn push_record(
    history: &mut ContextHistory,
    logs: Option<&mut RunLogs>,
    record: IterationRecord,
) -> Result<(), AgentError> {
    if let Some(logs) = logs {
        logs.append(&record)?;
    }
    history.records.push(record);
    Ok(())
}

/// Drive the full loop: iteration 1 measures the baseline as-is; every later
/// iteration asks the engine for a patch, applies it, measures, and checks.
/// Failures at any stage are charged against the budget and recorded as that
/// iteration's observation. The loop aborts only after
/// [`LoopOptions::engine_failure_limit`] consecutive proposal failures.
pub fn run_optimization(
    baseline: &NetlistDoc,
    group: &TargetGroup,
    policy: &GroupingPolicy,
    engine: &mut dyn ProposalEngine,
    evaluator: &mut dyn DesignEvaluator,
    opts: &LoopOptions,
) -> Result<OptimizationOutcome, AgentError> {
    if group.targets.is_empty() {
        return Err(AgentError::EmptyTargets(group.name.clone()));
    }
    let bias_set: BTreeSet<String> = policy.bias_sources.iter().cloned().collect();
    let findings = validate_constraints(baseline, baseline, &bias_set);
    if !findings.is_empty() {
        let joined = findings
            .iter()
            .map(|f| format!("{}: {}", f.element, f.message))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(AgentError::InvalidBaseline(joined));
    }
    if extract_tunables(baseline, policy)?.is_empty() {
        return Err(AgentError::NoTunables);
    }

    let wanted = group.metric_kinds();
    let mut logs = match &opts.log_dir {
        Some(dir) => Some(RunLogs::create(dir)?),
        None => None,
    };
    let mut history = ContextHistory {
        circuit_type: opts.circuit_type.clone(),
        baseline: baseline.clone(),
        group: group.clone(),
        records: Vec::new(),
    };
    let mut doc = baseline.clone();
    let mut consecutive_engine_failures = 0usize;
    let mut status = OutcomeStatus::BudgetExhausted;

    for index in 1..=group.max_iterations {
        let started = Instant::now();
        let tunables = extract_tunables(&doc, policy)?;

        let patch = if index == 1 {
            ParamPatch::identity("baseline evaluation")
        } else {
            let prompt = build_prompt(&history, &tunables);
            let ctx = ProposalContext {
                history: &history,
                tunables: &tunables,
            };
            match propose(engine, &prompt, &ctx) {
                Ok(p) => {
                    consecutive_engine_failures = 0;
                    p
                }
                Err(failure) => {
                    consecutive_engine_failures += 1;
                    let record = IterationRecord {
                        index,
                        patch: ParamPatch::identity("proposal engine failed"),
                        observation: Observation::Failure {
                            stage: "propose".to_string(),
                            detail: failure.to_string(),
                        },
                        check: None,
                        rationale: format!("proposal engine failed: {failure}"),
                        wallclock_s: started.elapsed().as_secs_f64(),
                    };
                    push_record(&mut history, logs.as_mut(), record)?;
                    if consecutive_engine_failures >= opts.engine_failure_limit {
                        status = OutcomeStatus::Aborted;
                        break;
                    }
                    continue;
                }
            }
        };

        let rationale = patch.rationale.clone();
        match apply_patch(&doc, &patch, baseline, &tunables) {
            Ok(next) => doc = next,
            Err(err) => {
                let record = IterationRecord {
                    index,
                    patch,
                    observation: Observation::Failure {
                        stage: "apply_patch".to_string(),
                        detail: err.to_string(),
                    },
                    check: None,
                    rationale,
                    wallclock_s: started.elapsed().as_secs_f64(),
                };
                push_record(&mut history, logs.as_mut(), record)?;
                continue;
            }
        }

        let (observation, check) = match evaluator.evaluate(&doc, &wanted, group, index) {
            Ok(report) => {
                let check = check_all(&report, group);
                (Observation::Report(report), Some(check))
            }
            Err(failure) => (
                Observation::Failure {
                    stage: failure.stage,
                    detail: failure.detail,
                },
                None,
            ),
        };
        let passed = check.as_ref().is_some_and(|c| c.overall_pass);
        let record = IterationRecord {
            index,
            patch,
            observation,
            check,
            rationale,
            wallclock_s: started.elapsed().as_secs_f64(),
        };
        push_record(&mut history, logs.as_mut(), record)?;
        if passed {
            status = OutcomeStatus::Success;
            break;
        }
    }

    let iterations_used = history.records.len();
    Ok(OptimizationOutcome {
        status,
        final_netlist: doc,
        history,
        iterations_used,
    })
}

/// Which way to push a knob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    Increase,
    Decrease,
}

impl StepAction {
    fn reversed(self) -> StepAction {
        match self {
            StepAction::Increase => StepAction::Decrease,
            StepAction::Decrease => StepAction::Increase,
        }
    }
}

/// Multiplicative step factors for the offline engine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub up: f64,
    pub down: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { up: 1.25, down: 0.8 }
    }
}

/// Knob advice: stepping `target`.`param` in direction `action` raises the
/// metric the entry is filed under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub target: String,
    pub param: TunableKind,
    pub action: StepAction,
}

/// Per-metric knob advice, strongest influence first. Benchmarks ship one in
/// their manifest; an empty table degrades the offline engine to seeded
/// random coordinate search.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub entries: BTreeMap<MetricKind, Vec<SensitivityEntry>>,
}

#[derive(Clone)]
struct Snapshot {
    passes: usize,
    margin_sum: f64,
    values: BTreeMap<(String, TunableKind), f64>,
}

struct LastStep {
    metric: MetricKind,
    key: String,
    margin_before: f64,
}

/// Score of a record for best-so-far tracking: passing-target count first,
/// then the sum of the failing targets' (negative) relative margins.
fn score_of(record: &IterationRecord) -> (usize, f64) {
    let Some(check) = &record.check else {
        return (0, f64::NEG_INFINITY);
    };
    let mut passes = 0usize;
    let mut margin_sum = 0.0;
    for c in &check.checks {
        if c.pass {
            passes += 1;
        } else {
            margin_sum += rel_margin(c).min(0.0);
        }
    }
    (passes, margin_sum)
}

/// Margin normalized by the bound's scale so metrics in different units are
/// comparable. An unmeasured metric counts as a large fixed deficit.
fn rel_margin(check: &MetricCheck) -> f64 {
    match check.margin {
        Some(margin) => margin / check.relaxed_bound.abs().max(1e-9),
        None => -1e3,
    }
}

fn better(a: (usize, f64), b: (usize, f64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}

fn margin_for(record: &IterationRecord, kind: MetricKind) -> f64 {
    record
        .check
        .as_ref()
        .and_then(|c| c.check_for(kind))
        .map(rel_margin)
        .unwrap_or(f64::NEG_INFINITY)
}

/// The offline proposal engine: deterministic coordinate search guided by a
/// per-metric sensitivity table.
///
/// Each call scores the latest record, reverts to the best sizing seen when
/// the last change regressed (optional, on by default), and otherwise steps
/// one knob for the worst-failing metric. A step that worsens its metric
/// flips the remembered direction for that (metric, knob) pair; a knob that
/// worsens it in both directions — or that is pinned at a bound — is rotated
/// out for the next entry in the table. The seeded RNG is used only when the
/// table offers no usable knob.
pub struct BaselineEngine {
    seed: u64,
    rng: ChaCha8Rng,
    schedule: StepSchedule,
    sensitivity: SensitivityTable,
    revert_on_regression: bool,
    best: Option<Snapshot>,
    directions: BTreeMap<(MetricKind, String), StepAction>,
    worsened: BTreeMap<(MetricKind, String), usize>,
    cursors: BTreeMap<MetricKind, usize>,
    last_step: Option<LastStep>,
}

impl BaselineEngine {
    pub fn new(seed: u64, sensitivity: SensitivityTable) -> BaselineEngine {
        BaselineEngine {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            schedule: StepSchedule::default(),
            sensitivity,
            revert_on_regression: true,
            best: None,
            directions: BTreeMap::new(),
            worsened: BTreeMap::new(),
            cursors: BTreeMap::new(),
            last_step: None,
        }
    }

    pub fn with_schedule(mut self, schedule: StepSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_revert_on_regression(mut self, on: bool) -> Self {
        self.revert_on_regression = on;
        self
    }

    fn factor(&self, action: StepAction) -> f64 {
        match action {
            StepAction::Increase => self.schedule.up,
            StepAction::Decrease => self.schedule.down,
        }
    }

    /// Try to step one knob; `None` when the knob cannot move (pinned at a
    /// bound or absent from the tunable surface).
    #[allow(clippy::too_many_arguments)]
    fn step_patch(
        &mut self,
        ctx: &ProposalContext<'_>,
        metric: MetricKind,
        worst: &MetricCheck,
        key: &str,
        param: TunableKind,
        action: StepAction,
        margin_before: f64,
    ) -> Option<ParamPatch> {
        let tunable = ctx
            .tunables
            .iter()
            .find(|t| t.key() == key && t.param == param)?;
        let from = tunable.value.magnitude;
        let factor = self.factor(action);
        let to = (from * factor).clamp(tunable.bounds.0, tunable.bounds.1);
        if (to - from).abs() <= from.abs() * 1e-12 {
            return None;
        }
        self.last_step = Some(LastStep {
            metric,
            key: key.to_string(),
            margin_before,
        });
        let measured = match worst.value {
            Some(v) => v.to_string(),
            None => "unmeasured".to_string(),
        };
        let dir = match worst.target.direction {
            Direction::AtLeast => ">=",
            Direction::AtMost => "<=",
        };
        let verb = match action {
            StepAction::Increase => "raising",
            StepAction::Decrease => "lowering",
        };
        let rationale = format!(
            "{metric} is the worst failing metric (value {measured}, accepted {dir} {}); \
             {verb} {key}.{param} x{factor}: {from} -> {to}",
            worst.relaxed_bound
        );
        Some(ParamPatch {
            assignments: vec![PatchAssignment {
                target: key.to_string(),
                param,
                value: PhysicalValue {
                    magnitude: to,
                    unit: param.unit(),
                },
            }],
            rationale,
        })
    }

    /// Seeded fallback when the sensitivity table offers nothing usable.
    fn random_step(&mut self, ctx: &ProposalContext<'_>, why: &str) -> ParamPatch {
        if ctx.tunables.is_empty() {
            return ParamPatch::identity("no tunables available");
        }
        for _ in 0..8 {
            let idx = self.rng.gen_range(0..ctx.tunables.len());
            let tunable = &ctx.tunables[idx];
            let action = if self.rng.gen_bool(0.5) {
                StepAction::Increase
            } else {
                StepAction::Decrease
            };
            let from = tunable.value.magnitude;
            let factor = self.factor(action);
            let to = (from * factor).clamp(tunable.bounds.0, tunable.bounds.1);
            if (to - from).abs() <= from.abs() * 1e-12 {
                continue;
            }
            let key = tunable.key().to_string();
            let param = tunable.param;
            return ParamPatch {
                assignments: vec![PatchAssignment {
                    target: key.clone(),
                    param,
                    value: PhysicalValue {
                        magnitude: to,
                        unit: param.unit(),
                    },
                }],
                rationale: format!("{why}; stepping {key}.{param} x{factor}: {from} -> {to}"),
            };
        }
        ParamPatch::identity("all sampled knobs are pinned at their bounds")
    }
}

impl ProposalEngine for BaselineEngine {
    fn descriptor(&self) -> EngineDescriptor {
        EngineDescriptor {
            name: format!("baseline(seed={})", self.seed),
            deterministic: true,
            requires_network: false,
        }
    }

    fn propose(
        &mut self,
        _prompt: &PromptBundle,
        ctx: &ProposalContext<'_>,
    ) -> Result<ParamPatch, EngineFailure> {
        let Some(last) = ctx.history.records.last() else {
            return Ok(ParamPatch::identity(
                "no measurements yet; evaluate the baseline",
            ));
        };

        let current: BTreeMap<(String, TunableKind), f64> = ctx
            .tunables
            .iter()
            .map(|t| ((t.key().to_string(), t.param), t.value.magnitude))
            .collect();

        // Learn from the previous step: a move that worsened its own metric
        // flips the remembered direction; two consecutive worsenings on one
        // knob rotate to the next knob for that metric.
        if let Some(step) = self.last_step.take() {
            let after = margin_for(last, step.metric);
            if after < step.margin_before {
                let slot = (step.metric, step.key.clone());
                let count = self.worsened.entry(slot.clone()).or_insert(0);
                *count += 1;
                if *count >= 2 {
                    *self.cursors.entry(step.metric).or_insert(0) += 1;
                    self.worsened.remove(&slot);
                    self.directions.remove(&slot);
                } else if let Some(dir) = self.directions.get_mut(&slot) {
                    *dir = dir.reversed();
                }
            } else {
                self.worsened.remove(&(step.metric, step.key));
            }
        }

        // Track the best design point seen; revert when the last move made
        // things strictly worse.
        let score = score_of(last);
        let mut at_best = false;
        match &self.best {
            None => {
                self.best = Some(Snapshot {
                    passes: score.0,
                    margin_sum: score.1,
                    values: current.clone(),
                });
            }
            Some(best) if better(score, (best.passes, best.margin_sum)) => {
                self.best = Some(Snapshot {
                    passes: score.0,
                    margin_sum: score.1,
                    values: current.clone(),
                });
            }
            Some(best) => {
                if self.revert_on_regression && better((best.passes, best.margin_sum), score) {
                    let mut assignments = Vec::new();
                    for tunable in ctx.tunables {
                        let slot = (tunable.key().to_string(), tunable.param);
                        let Some(&target_value) = best.values.get(&slot) else {
                            continue;
                        };
                        let from = tunable.value.magnitude;
                        if (target_value - from).abs() > from.abs().max(1e-30) * 1e-12 {
                            assignments.push(PatchAssignment {
                                target: slot.0,
                                param: tunable.param,
                                value: PhysicalValue {
                                    magnitude: target_value,
                                    unit: tunable.param.unit(),
                                },
                            });
                        }
                    }
                    if !assignments.is_empty() {
                        let best_passes = best.passes;
                        return Ok(ParamPatch {
                            assignments,
                            rationale: format!(
                                "last change regressed ({} of {} targets passing); reverting \
                                 to the best sizing seen ({best_passes} passing)",
                                score.0,
                                ctx.history.group.targets.len()
                            ),
                        });
                    }
                    // Already at the best values (the regression came from a
                    // failed measurement of an unchanged design): fall through
                    // and take a fresh step.
                    at_best = true;
                }
            }
        }

        let Some(check) = &last.check else {
            let why = if at_best {
                "measurement failed at the best-known sizing; exploring"
            } else {
                "measurement failed; exploring"
            };
            return Ok(self.random_step(ctx, why));
        };
        if check.overall_pass {
            return Ok(ParamPatch::identity("no failing metrics"));
        }

        let worst = check
            .checks
            .iter()
            .filter(|c| !c.pass)
            .min_by(|a, b| {
                rel_margin(a)
                    .partial_cmp(&rel_margin(b))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("a failing check exists when overall_pass is false")
            .clone();
        let metric = worst.kind;
        let margin_now = rel_margin(&worst);
        let want_raise = worst.target.direction == Direction::AtLeast;

        let entries = self
            .sensitivity
            .entries
            .get(&metric)
            .cloned()
            .unwrap_or_default();
        if !entries.is_empty() {
            let start = *self.cursors.entry(metric).or_insert(0);
            for offset in 0..entries.len() {
                let entry = &entries[(start + offset) % entries.len()];
                let base = if want_raise {
                    entry.action
                } else {
                    entry.action.reversed()
                };
                let action = *self
                    .directions
                    .entry((metric, entry.target.clone()))
                    .or_insert(base);
                if let Some(patch) = self.step_patch(
                    ctx,
                    metric,
                    &worst,
                    &entry.target.clone(),
                    entry.param,
                    action,
                    margin_now,
                ) {
                    if offset > 0 {
                        self.cursors.insert(metric, start + offset);
                    }
                    return Ok(patch);
                }
            }
        }
        Ok(self.random_step(
            ctx,
            &format!("no usable sensitivity entry for {metric}; exploring"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricValue;
    use crate::netlist::parse_netlist;
    use crate::sim::LoadCondition;
    use crate::targets::TargetSpec;

    fn doc_with_width(w: &str) -> NetlistDoc {
        let text = format!(
            "test cell\nm1 out in 0 0 nch W={w} L=1u\nvdd vdd 0 DC 1.8\n.model nch nmos (level=1 vto=0.45 kp=170u)\n.end\n"
        );
        parse_netlist(&text).unwrap()
    }

    fn gain_group(max_iterations: usize) -> TargetGroup {
        TargetGroup {
            name: "unit".to_string(),
            supply_v: 1.8,
            load: LoadCondition { cl: 10e-12, rl: 1e3 },
            max_iterations,
            targets: vec![TargetSpec {
                kind: MetricKind::GainDb,
                direction: Direction::AtLeast,
                value: 60.0,
                tolerance: 0.05,
            }],
        }
    }

    fn gain_report(iteration: usize, gain: f64, load: LoadCondition) -> MetricReport {
        let mut values = BTreeMap::new();
        values.insert(
            MetricKind::GainDb,
            MetricValue::new(MetricKind::GainDb, gain),
        );
        MetricReport {
            design_point_id: format!("iter_{iteration:02}"),
            load,
            values,
            absent: BTreeMap::new(),
        }
    }

    /// Analytic stand-in for a simulator: gain rises 10 dB per decade of
    /// m1's width.
    struct GainFromWidth {
        slope: f64,
    }

    impl DesignEvaluator for GainFromWidth {
        fn evaluate(
            &mut self,
            doc: &NetlistDoc,
            _wanted: &BTreeSet<MetricKind>,
            group: &TargetGroup,
            iteration: usize,
        ) -> Result<MetricReport, EvalFailure> {
            let w = doc
                .element("m1")
                .and_then(|card| card.param("w"))
                .map(|raw| raw.magnitude)
                .expect("m1 has a width");
            let gain = 40.0 + self.slope * (w / 1e-6).log10();
            Ok(gain_report(iteration, gain, group.load))
        }
    }

    struct StaticGain(f64);

    impl DesignEvaluator for StaticGain {
        fn evaluate(
            &mut self,
            _doc: &NetlistDoc,
            _wanted: &BTreeSet<MetricKind>,
            group: &TargetGroup,
            iteration: usize,
        ) -> Result<MetricReport, EvalFailure> {
            Ok(gain_report(iteration, self.0, group.load))
        }
    }

    struct IdentityEngine;

    impl ProposalEngine for IdentityEngine {
        fn descriptor(&self) -> EngineDescriptor {
            EngineDescriptor {
                name: "identity".to_string(),
                deterministic: true,
                requires_network: false,
            }
        }

        fn propose(
            &mut self,
            _prompt: &PromptBundle,
            _ctx: &ProposalContext<'_>,
        ) -> Result<ParamPatch, EngineFailure> {
            Ok(ParamPatch::identity("stand pat"))
        }
    }

    fn gain_sensitivity() -> SensitivityTable {
        let mut entries = BTreeMap::new();
        entries.insert(
            MetricKind::GainDb,
            vec![SensitivityEntry {
                target: "m1".to_string(),
                param: TunableKind::W,
                action: StepAction::Increase,
            }],
        );
        SensitivityTable { entries }
    }

    #[test]
    fn decomposition_yields_four_stages_with_a_resolved_plan() {
        let doc = doc_with_width("10u");
        let groups = crate::targets::builtin_groups();
        let tasks = decompose_tasks(&doc, &groups[0]).unwrap();
        assert_eq!(tasks.len(), 4);
        assert_eq!(
            tasks.iter().map(|t| t.index).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        // All eight metrics need the full five-analysis plan.
        assert_eq!(tasks[0].analyses.len(), 5);
        assert!(tasks[1].analyses.is_empty());

        let gain_only = gain_group(25);
        let tasks = decompose_tasks(&doc, &gain_only).unwrap();
        assert_eq!(tasks[0].analyses, vec!["AC/open_loop".to_string()]);

        let empty = TargetGroup {
            targets: Vec::new(),
            ..gain_group(25)
        };
        assert!(matches!(
            decompose_tasks(&doc, &empty),
            Err(AgentError::EmptyTargets(_))
        ));
    }

    #[test]
    fn prompt_carries_four_sections_and_relaxed_bounds() {
        let doc = doc_with_width("10u");
        let groups = crate::targets::builtin_groups();
        let policy = GroupingPolicy::default();
        let tunables = extract_tunables(&doc, &policy).unwrap();
        let mut history = ContextHistory {
            circuit_type: "opamp".to_string(),
            baseline: doc.clone(),
            group: groups[0].clone(),
            records: Vec::new(),
        };

        let bundle = build_prompt(&history, &tunables);
        for section in [
            "[circuit_type]",
            "[target_performance]",
            "[previous_results]",
            "[current_results]",
        ] {
            assert!(bundle.context.contains(section), "missing {section}");
        }
        assert!(bundle.context.contains("(accepted >= 52.25)"));
        assert!(bundle.context.contains("[previous_results]\nnone"));
        assert!(bundle.context.contains("no measurements yet"));
        assert!(bundle.system.contains("m1.W"));
        assert!(bundle.system.contains("power supply voltage unchanged"));
        assert!(!bundle.cot_instructions.is_empty());

        for i in 1..=3 {
            history.records.push(IterationRecord {
                index: i,
                patch: ParamPatch::identity("x"),
                observation: Observation::Report(gain_report(i, 50.0, groups[0].load)),
                check: None,
                rationale: "x".to_string(),
                wallclock_s: 0.0,
            });
        }
        let bundle = build_prompt(&history, &tunables);
        let previous = bundle
            .context
            .split("[previous_results]")
            .nth(1)
            .unwrap()
            .split("[current_results]")
            .next()
            .unwrap();
        assert!(previous.contains("iteration 1:"));
        assert!(previous.contains("iteration 2:"));
        assert!(!previous.contains("iteration 3:"));
        let current = bundle.context.split("[current_results]").nth(1).unwrap();
        assert!(current.contains("iteration 3:"));
    }

    #[test]
    fn out_of_bounds_proposals_are_clamped_with_a_note() {
        struct Greedy;
        impl ProposalEngine for Greedy {
            fn descriptor(&self) -> EngineDescriptor {
                EngineDescriptor {
                    name: "greedy".to_string(),
                    deterministic: true,
                    requires_network: false,
                }
            }
            fn propose(
                &mut self,
                _prompt: &PromptBundle,
                _ctx: &ProposalContext<'_>,
            ) -> Result<ParamPatch, EngineFailure> {
                Ok(ParamPatch {
                    assignments: vec![PatchAssignment {
                        target: "m1".to_string(),
                        param: TunableKind::W,
                        value: PhysicalValue::meters(5e-3), // 5000 um
                    }],
                    rationale: "go big".to_string(),
                })
            }
        }

        let doc = doc_with_width("10u");
        let policy = GroupingPolicy::default();
        let tunables = extract_tunables(&doc, &policy).unwrap();
        let history = ContextHistory {
            circuit_type: "test".to_string(),
            baseline: doc.clone(),
            group: gain_group(25),
            records: Vec::new(),
        };
        let prompt = build_prompt(&history, &tunables);
        let ctx = ProposalContext {
            history: &history,
            tunables: &tunables,
        };
        let patch = propose(&mut Greedy, &prompt, &ctx).unwrap();
        assert_eq!(patch.assignments[0].value.magnitude, 1e-3);
        assert!(patch.rationale.contains("clamped"), "{}", patch.rationale);
    }

    #[test]
    fn passing_baseline_succeeds_at_iteration_one() {
        let doc = doc_with_width("100u"); // 40 + 10*log10(100) = 60 dB
        let outcome = run_optimization(
            &doc,
            &gain_group(25),
            &GroupingPolicy::default(),
            &mut IdentityEngine,
            &mut GainFromWidth { slope: 10.0 },
            &LoopOptions::default(),
        )
        .unwrap();
        assert_eq!(outcome.status, OutcomeStatus::Success);
        assert_eq!(outcome.iterations_used, 1);
        assert!(outcome.history.records[0].patch.assignments.is_empty());
        assert!(outcome.history.records[0]
            .check
            .as_ref()
            .unwrap()
            .overall_pass);
    }

    #[test]
    fn never_passing_run_exhausts_budget_with_contiguous_records() {
        let doc = doc_with_width("10u");
        let outcome = run_optimization(
            &doc,
            &gain_group(5),
            &GroupingPolicy::default(),
            &mut IdentityEngine,
            &mut StaticGain(50.0),
            &LoopOptions::default(),
        )
        .unwrap();
        assert_eq!(outcome.status, OutcomeStatus::BudgetExhausted);
        assert_eq!(outcome.iterations_used, 5);
        let indices: Vec<usize> = outcome.history.records.iter().map(|r| r.index).collect();
        assert_eq!(indices, vec![1, 2, 3, 4, 5]);
        assert!(outcome
            .history
            .records
            .iter()
            .all(|r| !r.rationale.is_empty()));
    }

    #[test]
    fn consecutive_engine_failures_abort_the_run() {
        struct Broken;
        impl ProposalEngine for Broken {
            fn descriptor(&self) -> EngineDescriptor {
                EngineDescriptor {
                    name: "broken".to_string(),
                    deterministic: true,
                    requires_network: false,
                }
            }
            fn propose(
                &mut self,
                _prompt: &PromptBundle,
                _ctx: &ProposalContext<'_>,
            ) -> Result<ParamPatch, EngineFailure> {
                Err(EngineFailure::Transport("connection refused".to_string()))
            }
        }

        let doc = doc_with_width("10u");
        let outcome = run_optimization(
            &doc,
            &gain_group(25),
            &GroupingPolicy::default(),
            &mut Broken,
            &mut StaticGain(50.0),
            &LoopOptions::default(),
        )
        .unwrap();
        assert_eq!(outcome.status, OutcomeStatus::Aborted);
        // Baseline evaluation plus three consecutive failures.
        assert_eq!(outcome.iterations_used, 4);
        assert!(matches!(
            outcome.history.records[1].observation,
            Observation::Failure { ref stage, .. } if stage == "propose"
        ));
    }

    #[test]
    fn measurement_failure_is_an_observation_not_an_abort() {
        struct FlakyGain {
            calls: usize,
        }
        impl DesignEvaluator for FlakyGain {
            fn evaluate(
                &mut self,
                _doc: &NetlistDoc,
                _wanted: &BTreeSet<MetricKind>,
                group: &TargetGroup,
                iteration: usize,
            ) -> Result<MetricReport, EvalFailure> {
                self.calls += 1;
                if self.calls == 2 {
                    return Err(EvalFailure {
                        stage: "simulation_convergence".to_string(),
                        detail: "gmin stepping failed".to_string(),
                    });
                }
                let gain = if self.calls >= 3 { 60.0 } else { 50.0 };
                Ok(gain_report(iteration, gain, group.load))
            }
        }

        let doc = doc_with_width("10u");
        let outcome = run_optimization(
            &doc,
            &gain_group(25),
            &GroupingPolicy::default(),
            &mut IdentityEngine,
            &mut FlakyGain { calls: 0 },
            &LoopOptions::default(),
        )
        .unwrap();
        assert_eq!(outcome.status, OutcomeStatus::Success);
        assert_eq!(outcome.iterations_used, 3);
        assert!(matches!(
            outcome.history.records[1].observation,
            Observation::Failure { ref stage, .. } if stage == "simulation_convergence"
        ));
        assert!(outcome.history.records[1].check.is_none());
    }

    #[test]
    fn seeded_engine_converges_deterministically() {
        let doc = doc_with_width("10u"); // 50 dB, needs >= 57 (relaxed)
        let run = || {
            run_optimization(
                &doc,
                &gain_group(25),
                &GroupingPolicy::default(),
                &mut BaselineEngine::new(42, gain_sensitivity()),
                &mut GainFromWidth { slope: 10.0 },
                &LoopOptions::default(),
            )
            .unwrap()
        };
        let first = run();
        assert_eq!(first.status, OutcomeStatus::Success);
        // 0.969 dB per x1.25 step from 50 dB: eight steps clear 57 dB.
        assert_eq!(first.iterations_used, 9);

        let second = run();
        let canon = |o: &OptimizationOutcome| {
            o.history
                .records
                .iter()
                .map(canonical_record_json)
                .collect::<Vec<_>>()
        };
        assert_eq!(canon(&first), canon(&second));
    }

    #[test]
    fn regression_triggers_revert_and_direction_flip() {
        // Gain FALLS as width grows, opposite to the table's advice: the
        // engine must revert the bad step and learn to shrink the width.
        let doc = doc_with_width("10u"); // 40 + (-10)*1 = ... slope -10: 40-10 = 30? no:
        // slope -10 gives gain = 40 - 10*log10(w/1u); w=10u -> 30 dB. Target
        // needs >= 57, unreachable downward from 30 at w=10u... instead grow
        // gain by shrinking W: w=0.4u -> 40 - 10*log10(0.4) = 44. Still short.
        // Use a closer target so the test exercises revert + flip + success.
        let group = TargetGroup {
            targets: vec![TargetSpec {
                kind: MetricKind::GainDb,
                direction: Direction::AtLeast,
                value: 33.0,
                tolerance: 0.05,
            }],
            ..gain_group(25)
        };
        let outcome = run_optimization(
            &doc,
            &group,
            &GroupingPolicy::default(),
            &mut BaselineEngine::new(7, gain_sensitivity()),
            &mut GainFromWidth { slope: -10.0 },
            &LoopOptions::default(),
        )
        .unwrap();
        assert_eq!(outcome.status, OutcomeStatus::Success);
        assert!(outcome
            .history
            .records
            .iter()
            .any(|r| r.rationale.contains("reverting")));
        // The winning move shrinks the width below baseline.
        let final_w = outcome
            .final_netlist
            .element("m1")
            .and_then(|c| c.param("w"))
            .map(|r| r.magnitude)
            .unwrap();
        assert!(final_w < 10e-6, "final width {final_w}");
    }

    #[test]
    fn all_passing_history_yields_identity_patch() {
        let doc = doc_with_width("10u");
        let policy = GroupingPolicy::default();
        let tunables = extract_tunables(&doc, &policy).unwrap();
        let group = gain_group(25);
        let report = gain_report(1, 60.0, group.load);
        let check = check_all(&report, &group);
        assert!(check.overall_pass);
        let history = ContextHistory {
            circuit_type: "test".to_string(),
            baseline: doc.clone(),
            group,
            records: vec![IterationRecord {
                index: 1,
                patch: ParamPatch::identity("baseline evaluation"),
                observation: Observation::Report(report),
                check: Some(check),
                rationale: "baseline evaluation".to_string(),
                wallclock_s: 0.0,
            }],
        };
        let mut engine = BaselineEngine::new(1, gain_sensitivity());
        let prompt = build_prompt(&history, &tunables);
        let ctx = ProposalContext {
            history: &history,
            tunables: &tunables,
        };
        let patch = engine.propose(&prompt, &ctx).unwrap();
        assert!(patch.assignments.is_empty());
        assert_eq!(patch.rationale, "no failing metrics");
    }

    #[test]
    fn run_logs_are_written_and_history_is_timing_free() {
        let dir = tempfile::tempdir().unwrap();
        let log_dir = dir.path().join("run");
        let doc = doc_with_width("10u");
        let opts = LoopOptions {
            circuit_type: "test".to_string(),
            log_dir: Some(log_dir.clone()),
            engine_failure_limit: 3,
        };
        run_optimization(
            &doc,
            &gain_group(3),
            &GroupingPolicy::default(),
            &mut IdentityEngine,
            &mut StaticGain(50.0),
            &opts,
        )
        .unwrap();
        let iterations = std::fs::read_to_string(log_dir.join("iterations.jsonl")).unwrap();
        let history = std::fs::read_to_string(log_dir.join("history.jsonl")).unwrap();
        let reasons = std::fs::read_to_string(log_dir.join("reasons.md")).unwrap();
        assert_eq!(iterations.lines().count(), 3);
        assert_eq!(history.lines().count(), 3);
        assert!(iterations.contains("wallclock_s"));
        assert!(!history.contains("wallclock_s"));
        assert!(reasons.contains("## Iteration 1"));
        assert!(reasons.contains("## Iteration 3"));
    }
}
