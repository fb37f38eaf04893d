//! Built-in benchmark circuits and the batch experiments that run on them.
//!
//! A benchmark bundles a baseline netlist with a manifest describing how it
//! plugs into the shared testbench, which devices tune together, which knob
//! nudges which metric, and the default target group. All of it is compiled
//! into the binary, so a checkout is runnable with no data directory.
//!
//! On top of the registry this module provides three batch drivers:
//! repeated sizing campaigns with varied seeds ([`run_campaign`]), local
//! robustness studies that jitter every tunable around a design point
//! ([`run_variation`]), and characteristic-curve sweeps for reporting
//! ([`sweep_offset_vs_vcm`] and friends).

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    run_optimization, AgentError, BaselineEngine, DesignEvaluator, LoopOptions, OutcomeStatus,
    SensitivityEntry, SensitivityTable, SpiceEvaluator, StepAction,
};
use crate::metrics::{cmrr, dc_gain, MetricKind};
use crate::netlist::{
    apply_patch, extract_tunables, parse_netlist, Bounds, GroupingPolicy, NetlistDoc,
    NetlistError, ParamPatch, PatchAssignment, PhysicalValue, SizeGroup, TunableKind,
};
use crate::sim::{
    build_deck, collect_result, AnalysisSpec, EngineConfig, LoadCondition, SimError, SpiceRunner,
    TbTopology, TestbenchConfig, TestbenchTemplate, AC_FSTART, AC_FSTOP, AC_POINTS_PER_DECADE,
    DC_STEP_V,
};
use crate::targets::TargetGroup;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark '{0}'; known benchmarks: {1}")]
    UnknownBenchmark(String, String),
    #[error("unknown fixture '{0}'; known fixtures: {1}")]
    UnknownFixture(String, String),
    #[error("benchmark '{name}': manifest does not parse: {detail}")]
    ManifestParse { name: String, detail: String },
    #[error("benchmark '{name}': baseline netlist does not parse: {detail}")]
    NetlistParse { name: String, detail: String },
    #[error("benchmark '{name}': support file '{file}' is not bundled")]
    UnknownSupport { name: String, file: String },
    #[error("fixture '{name}': {detail}")]
    FixtureInvalid { name: String, detail: String },
    #[error(transparent)]
    Netlist(#[from] NetlistError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Manifest schema
// ---------------------------------------------------------------------------

/// Device grouping and adjustable-bias declarations from a manifest.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    #[serde(default)]
    pub bias_sources: Vec<String>,
    #[serde(default)]
    pub groups: Vec<SizeGroup>,
    #[serde(default)]
    pub bounds: Option<Bounds>,
}

/// One row of knob advice: nudging `target`.`param` in direction `action`
/// raises `metric`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityRow {
    pub metric: MetricKind,
    pub target: String,
    pub param: TunableKind,
    pub action: StepAction,
}

/// Everything a benchmark declares about itself besides the netlist.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub circuit_type: String,
    #[serde(default)]
    pub support: Vec<String>,
    pub testbench: TestbenchTemplate,
    #[serde(default)]
    pub tuning: TuningSection,
    #[serde(default)]
    pub sensitivity: Vec<SensitivityRow>,
    pub default_targets: TargetGroup,
}

/// A loaded benchmark: parsed manifest, parsed baseline netlist, the raw
/// netlist text, and the support files the SPICE engine must see.
#[derive(Clone, Debug)]
pub struct BenchCircuit {
    pub manifest: Manifest,
    pub baseline: NetlistDoc,
    pub netlist_text: String,
    pub support: Vec<(String, String)>,
}

impl BenchCircuit {
    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn template(&self) -> &TestbenchTemplate {
        &self.manifest.testbench
    }

    pub fn default_targets(&self) -> &TargetGroup {
        &self.manifest.default_targets
    }

    /// The tunable-extraction policy declared by the manifest.
    pub fn policy(&self) -> GroupingPolicy {
        GroupingPolicy {
            groups: self.manifest.tuning.groups.clone(),
            bias_sources: self.manifest.tuning.bias_sources.clone(),
            bounds: self.manifest.tuning.bounds,
        }
    }

    /// The manifest's sensitivity rows folded into per-metric advice,
    /// preserving row order within each metric.
    pub fn sensitivity(&self) -> SensitivityTable {
        let mut entries: BTreeMap<MetricKind, Vec<SensitivityEntry>> = BTreeMap::new();
        for row in &self.manifest.sensitivity {
            entries.entry(row.metric).or_default().push(SensitivityEntry {
                target: row.target.clone(),
                param: row.param,
                action: row.action,
            });
        }
        SensitivityTable { entries }
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

struct BenchmarkSource {
    name: &'static str,
    manifest: &'static str,
    netlist: &'static str,
}

macro_rules! benchmark_source {
    ($name:literal) => {
        BenchmarkSource {
            name: $name,
            manifest: include_str!(concat!("../data/benchmarks/", $name, "/manifest.toml")),
            netlist: include_str!(concat!("../data/benchmarks/", $name, "/netlist.sp")),
        }
    };
}

const BENCHMARKS: &[BenchmarkSource] = &[
    benchmark_source!("5t_ota"),
    benchmark_source!("common_source"),
    benchmark_source!("inverter"),
    benchmark_source!("nand"),
    benchmark_source!("opamp20t"),
    benchmark_source!("rc_filter"),
    benchmark_source!("ring_oscillator"),
    benchmark_source!("xor"),
];

const SUPPORT_FILES: &[(&str, &str)] =
    &[("ptm180.lib", include_str!("../data/models/ptm180.lib"))];

const FIXTURES: &[(&str, &str)] = &[
    ("g1_5", include_str!("../data/fixtures/g1_5.toml")),
    ("g2_4", include_str!("../data/fixtures/g2_4.toml")),
    ("g3_4", include_str!("../data/fixtures/g3_4.toml")),
];

/// Names of every bundled benchmark, in registry order.
pub fn benchmark_names() -> Vec<&'static str> {
    BENCHMARKS.iter().map(|b| b.name).collect()
}

/// Load one bundled benchmark by name.
pub fn load_benchmark(name: &str) -> Result<BenchCircuit, BenchError> {
    let source = BENCHMARKS
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| {
            BenchError::UnknownBenchmark(name.to_string(), benchmark_names().join(", "))
        })?;
    let manifest: Manifest =
        toml::from_str(source.manifest).map_err(|e| BenchError::ManifestParse {
            name: name.to_string(),
            detail: e.to_string(),
        })?;
    if manifest.name != source.name {
        return Err(BenchError::ManifestParse {
            name: name.to_string(),
            detail: format!("manifest names itself '{}'", manifest.name),
        });
    }
    let baseline = parse_netlist(source.netlist).map_err(|e| BenchError::NetlistParse {
        name: name.to_string(),
        detail: e.to_string(),
    })?;
    let mut support = Vec::new();
    for file in &manifest.support {
        let body = SUPPORT_FILES
            .iter()
            .find(|(n, _)| n == file)
            .map(|(_, body)| *body)
            .ok_or_else(|| BenchError::UnknownSupport {
                name: name.to_string(),
                file: file.clone(),
            })?;
        support.push((file.clone(), body.to_string()));
    }
    Ok(BenchCircuit {
        manifest,
        baseline,
        netlist_text: source.netlist.to_string(),
        support,
    })
}

/// Load every bundled benchmark.
pub fn all_benchmarks() -> Result<Vec<BenchCircuit>, BenchError> {
    benchmark_names().into_iter().map(load_benchmark).collect()
}

// ---------------------------------------------------------------------------
// Sized fixtures
// ---------------------------------------------------------------------------

/// A width/length pair in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizePair {
    pub w: f64,
    pub l: f64,
}

/// A complete sized design point for one benchmark: every size handle gets a
/// W/L pair and every adjustable bias gets a voltage.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizedFixture {
    pub benchmark: String,
    pub name: String,
    pub sizes: BTreeMap<String, SizePair>,
    #[serde(default)]
    pub biases: BTreeMap<String, f64>,
}

impl SizedFixture {
    /// The fixture as a patch against the benchmark baseline: sizes in handle
    /// order (W before L), then biases in source order.
    pub fn to_patch(&self) -> ParamPatch {
        let mut assignments = Vec::new();
        for (handle, pair) in &self.sizes {
            assignments.push(PatchAssignment {
                target: handle.clone(),
                param: TunableKind::W,
                value: PhysicalValue::meters(pair.w),
            });
            assignments.push(PatchAssignment {
                target: handle.clone(),
                param: TunableKind::L,
                value: PhysicalValue::meters(pair.l),
            });
        }
        for (source, volts) in &self.biases {
            assignments.push(PatchAssignment {
                target: source.clone(),
                param: TunableKind::Dc,
                value: PhysicalValue::volts(*volts),
            });
        }
        ParamPatch {
            assignments,
            rationale: format!("preset '{}' for benchmark '{}'", self.name, self.benchmark),
        }
    }

    /// Apply the fixture to its benchmark's baseline, enforcing the same
    /// bounds and grouping rules as any other patch.
    pub fn apply(&self, bench: &BenchCircuit) -> Result<NetlistDoc, BenchError> {
        if self.benchmark != bench.name() {
            return Err(BenchError::FixtureInvalid {
                name: self.name.clone(),
                detail: format!(
                    "fixture targets benchmark '{}', not '{}'",
                    self.benchmark,
                    bench.name()
                ),
            });
        }
        let tunables = extract_tunables(&bench.baseline, &bench.policy())?;
        let doc = apply_patch(&bench.baseline, &self.to_patch(), &bench.baseline, &tunables)?;
        Ok(doc)
    }
}

/// Names of every bundled sized fixture.
pub fn fixture_names() -> Vec<&'static str> {
    FIXTURES.iter().map(|(n, _)| *n).collect()
}

/// Load one bundled sized fixture by name.
pub fn load_fixture(name: &str) -> Result<SizedFixture, BenchError> {
    let (_, body) = FIXTURES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| BenchError::UnknownFixture(name.to_string(), fixture_names().join(", ")))?;
    let fixture: SizedFixture =
        toml::from_str(body).map_err(|e| BenchError::FixtureInvalid {
            name: name.to_string(),
            detail: e.to_string(),
        })?;
    if fixture.name != name {
        return Err(BenchError::FixtureInvalid {
            name: name.to_string(),
            detail: format!("fixture names itself '{}'", fixture.name),
        });
    }
    Ok(fixture)
}

// ---------------------------------------------------------------------------
// Sizing campaigns
// ---------------------------------------------------------------------------

/// Outcome of one campaign attempt.
#[derive(Clone, Debug, Serialize)]
pub struct AttemptResult {
    pub attempt: usize,
    pub seed: u64,
    pub status: OutcomeStatus,
    pub iterations_used: usize,
    /// Set when the attempt died before producing an outcome.
    pub error: Option<String>,
}

/// Results of a whole campaign, in attempt order.
#[derive(Clone, Debug, Serialize)]
pub struct CampaignSummary {
    pub benchmark: String,
    pub group: String,
    pub attempts: Vec<AttemptResult>,
}

impl CampaignSummary {
    pub fn successes(&self) -> usize {
        self.attempts
            .iter()
            .filter(|a| a.status == OutcomeStatus::Success)
            .count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.attempts.is_empty() {
            0.0
        } else {
            self.successes() as f64 / self.attempts.len() as f64
        }
    }

    /// Mean, min, and max iterations over the successful attempts.
    pub fn iteration_stats(&self) -> Option<(f64, usize, usize)> {
        let iters: Vec<usize> = self
            .attempts
            .iter()
            .filter(|a| a.status == OutcomeStatus::Success)
            .map(|a| a.iterations_used)
            .collect();
        if iters.is_empty() {
            return None;
        }
        let sum: usize = iters.iter().sum();
        let mean = sum as f64 / iters.len() as f64;
        let min = *iters.iter().min().unwrap();
        let max = *iters.iter().max().unwrap();
        Some((mean, min, max))
    }
}

#[derive(Clone, Debug)]
pub struct CampaignConfig {
    pub attempts: usize,
    /// Attempt `i` runs with seed `base_seed + i`.
    pub base_seed: u64,
    pub engine: EngineConfig,
}

fn run_attempt(
    bench: &BenchCircuit,
    group: &TargetGroup,
    cfg: &CampaignConfig,
    workdir: &Path,
    attempt: usize,
) -> AttemptResult {
    let seed = cfg.base_seed + attempt as u64;
    let fail = |detail: String| AttemptResult {
        attempt,
        seed,
        status: OutcomeStatus::Aborted,
        iterations_used: 0,
        error: Some(detail),
    };
    let subdir = workdir.join(format!("attempt_{attempt:02}"));
    if let Err(e) = fs::create_dir_all(&subdir) {
        return fail(e.to_string());
    }
    let runner = match SpiceRunner::new(&cfg.engine, &subdir, bench.support.clone()) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let mut evaluator = SpiceEvaluator {
        runner,
        template: bench.template().clone(),
    };
    let mut engine = BaselineEngine::new(seed, bench.sensitivity());
    let opts = LoopOptions {
        circuit_type: bench.manifest.circuit_type.clone(),
        log_dir: Some(subdir.join("logs")),
        ..LoopOptions::default()
    };
    match run_optimization(
        &bench.baseline,
        group,
        &bench.policy(),
        &mut engine,
        &mut evaluator,
        &opts,
    ) {
        Ok(outcome) => AttemptResult {
            attempt,
            seed,
            status: outcome.status,
            iterations_used: outcome.iterations_used,
            error: None,
        },
        Err(e) => fail(e.to_string()),
    }
}

/// Run `cfg.attempts` independent sizing attempts against one benchmark,
/// each with its own seed and work directory, in parallel.
pub fn run_campaign(
    bench: &BenchCircuit,
    group: &TargetGroup,
    cfg: &CampaignConfig,
    workdir: &Path,
) -> Result<CampaignSummary, BenchError> {
    fs::create_dir_all(workdir)?;
    let attempts = thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.attempts)
            .map(|i| scope.spawn(move || run_attempt(bench, group, cfg, workdir, i)))
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                h.join().unwrap_or_else(|_| AttemptResult {
                    attempt: i,
                    seed: cfg.base_seed + i as u64,
                    status: OutcomeStatus::Aborted,
                    iterations_used: 0,
                    error: Some("attempt worker panicked".to_string()),
                })
            })
            .collect()
    });
    Ok(CampaignSummary {
        benchmark: bench.name().to_string(),
        group: group.name.clone(),
        attempts,
    })
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Render a campaign summary as CSV (header always present).
pub fn campaign_csv(summary: &CampaignSummary) -> String {
    let mut out = String::from("attempt,seed,status,iterations,error\n");
    for a in &summary.attempts {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            a.attempt,
            a.seed,
            a.status,
            a.iterations_used,
            csv_field(a.error.as_deref().unwrap_or(""))
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Parameter variation
// ---------------------------------------------------------------------------

/// How hard to shake a design point: absolute jitter on bias voltages,
/// relative jitter on device sizes.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VariationConfig {
    pub sigma_bias_v: f64,
    pub sigma_size_rel: f64,
    pub samples: usize,
    pub seed: u64,
}

/// One standard-normal draw via the Box-Muller transform.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Jitter every tunable of `baseline` once: sizes scale by
/// `1 + sigma_size_rel * z`, biases shift by `sigma_bias_v * z`, results are
/// clamped into bounds. One draw per tunable is consumed even when the value
/// ends up unchanged, so sample `i` sees the same draws at any sigma.
pub fn perturbed_doc<R: Rng>(
    baseline: &NetlistDoc,
    policy: &GroupingPolicy,
    sigma_bias_v: f64,
    sigma_size_rel: f64,
    rng: &mut R,
) -> Result<NetlistDoc, NetlistError> {
    let tunables = extract_tunables(baseline, policy)?;
    let mut assignments = Vec::new();
    for tunable in &tunables {
        let z = standard_normal(rng);
        let current = tunable.value.magnitude;
        let next = match tunable.param {
            TunableKind::W | TunableKind::L => current * (1.0 + sigma_size_rel * z),
            TunableKind::Dc => current + sigma_bias_v * z,
        };
        let (lo, hi) = tunable.bounds;
        let next = next.clamp(lo, hi);
        if next == current {
            continue;
        }
        let value = match tunable.param {
            TunableKind::W | TunableKind::L => PhysicalValue::meters(next),
            TunableKind::Dc => PhysicalValue::volts(next),
        };
        assignments.push(PatchAssignment {
            target: tunable.key().to_string(),
            param: tunable.param,
            value,
        });
    }
    let patch = ParamPatch {
        assignments,
        rationale: "parameter variation draw".to_string(),
    };
    apply_patch(baseline, &patch, baseline, &tunables)
}

/// Running mean/spread accumulator (Welford's algorithm).
#[derive(Clone, Copy, Debug)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl Welford {
    fn new() -> Welford {
        Welford {
            n: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
        self.min = self.min.min(x);
        self.max = self.max.max(x);
    }

    fn stats(&self) -> SampleStats {
        SampleStats {
            n: self.n,
            mean: self.mean,
            std_dev: if self.n > 1 {
                (self.m2 / (self.n - 1) as f64).sqrt()
            } else {
                0.0
            },
            min: self.min,
            max: self.max,
        }
    }
}

/// Sample statistics for one metric across the variation draws.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
}

/// One variation sample that failed to measure.
#[derive(Clone, Debug, Serialize)]
pub struct VariationFailure {
    pub sample: usize,
    pub detail: String,
}

/// Results of a variation study around one design point.
#[derive(Clone, Debug, Serialize)]
pub struct VariationSummary {
    pub benchmark: String,
    pub samples_requested: usize,
    pub samples_ok: usize,
    pub failures: Vec<VariationFailure>,
    pub stats: BTreeMap<MetricKind, SampleStats>,
}

/// Measure `cfg.samples` jittered copies of a design point and fold the
/// per-metric outcomes into sample statistics. Samples that fail to simulate
/// are recorded, not fatal.
pub fn run_variation(
    bench: &BenchCircuit,
    design: &NetlistDoc,
    group: &TargetGroup,
    cfg: &VariationConfig,
    engine: &EngineConfig,
    workdir: &Path,
) -> Result<VariationSummary, BenchError> {
    fs::create_dir_all(workdir)?;
    let policy = bench.policy();
    let wanted = group.metric_kinds();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut accumulators: BTreeMap<MetricKind, Welford> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut samples_ok = 0usize;

    for sample in 0..cfg.samples {
        let doc = perturbed_doc(design, &policy, cfg.sigma_bias_v, cfg.sigma_size_rel, &mut rng)?;
        let subdir = workdir.join(format!("sample_{sample:04}"));
        let runner = match SpiceRunner::new(engine, &subdir, bench.support.clone()) {
            Ok(r) => r,
            Err(e) => {
                failures.push(VariationFailure {
                    sample,
                    detail: e.to_string(),
                });
                continue;
            }
        };
        let mut evaluator = SpiceEvaluator {
            runner,
            template: bench.template().clone(),
        };
        match evaluator.evaluate(&doc, &wanted, group, sample) {
            Ok(report) => {
                samples_ok += 1;
                for kind in &wanted {
                    if let Some(value) = report.get(*kind) {
                        accumulators.entry(*kind).or_insert_with(Welford::new).push(value);
                    }
                }
            }
            Err(e) => failures.push(VariationFailure {
                sample,
                detail: format!("{}: {}", e.stage, e.detail),
            }),
        }
    }

    Ok(VariationSummary {
        benchmark: bench.name().to_string(),
        samples_requested: cfg.samples,
        samples_ok,
        failures,
        stats: accumulators.iter().map(|(k, w)| (*k, w.stats())).collect(),
    })
}

/// Sample statistics of the raw perturbation draws themselves — the sanity
/// check that the jitter generator delivers the spread it was asked for.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DrawStats {
    pub n: usize,
    pub bias_mean: f64,
    pub bias_sigma: f64,
    pub size_mean: f64,
    pub size_sigma: f64,
}

/// Draw `n` (bias shift, size factor) perturbation pairs and report their
/// sample statistics. `bias_*` summarize the additive voltage shifts,
/// `size_*` the relative size deltas.
pub fn draw_statistics(sigma_bias_v: f64, sigma_size_rel: f64, n: usize, seed: u64) -> DrawStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bias = Welford::new();
    let mut size = Welford::new();
    for _ in 0..n {
        bias.push(sigma_bias_v * standard_normal(&mut rng));
        size.push(sigma_size_rel * standard_normal(&mut rng));
    }
    DrawStats {
        n,
        bias_mean: bias.stats().mean,
        bias_sigma: bias.stats().std_dev,
        size_mean: size.stats().mean,
        size_sigma: size.stats().std_dev,
    }
}

// ---------------------------------------------------------------------------
// Characteristic-curve sweeps
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepPoint {
    pub x: f64,
    pub y: f64,
}

/// One named curve with axis labels, ready for CSV export.
#[derive(Clone, Debug, Serialize)]
pub struct SweepCurve {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<SweepPoint>,
}

fn run_one(
    doc: &NetlistDoc,
    spec: &AnalysisSpec,
    tb: &TestbenchConfig,
    tpl: &TestbenchTemplate,
    runner: &SpiceRunner,
    tag: &str,
) -> Result<crate::sim::SimResult, SimError> {
    let deck = build_deck(doc, spec, tb, tpl)?;
    let run = runner.run(&deck, tag)?;
    collect_result(spec, tb, run)
}

/// Run the unity-gain DC transfer sweep once and return (input, output).
fn unity_transfer(
    doc: &NetlistDoc,
    tpl: &TestbenchTemplate,
    load: LoadCondition,
    supply_v: f64,
    runner: &SpiceRunner,
    tag: &str,
) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let tb = TestbenchConfig {
        topology: TbTopology::UnityGain,
        vcm: supply_v / 2.0,
        load,
        stimulus: None,
    };
    let spec = AnalysisSpec::DcSweep {
        source: "vin".to_string(),
        start: 0.0,
        stop: supply_v,
        step: DC_STEP_V,
    };
    let result = run_one(doc, &spec, &tb, tpl, runner, tag)?;
    let key = format!("v({})", tpl.output);
    let wave = result
        .waveforms
        .get(&key)
        .ok_or_else(|| SimError::ParseFailure {
            offset: 0,
            detail: format!("sweep output '{key}' missing from rawfile"),
        })?;
    let values = wave
        .real()
        .ok_or_else(|| SimError::ParseFailure {
            offset: 0,
            detail: format!("sweep output '{key}' is not real-valued"),
        })?
        .to_vec();
    Ok((wave.sweep.clone(), values))
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    if xs.len() < 2 || x < xs[0] || x > *xs.last().unwrap() {
        return None;
    }
    let idx = xs.partition_point(|&v| v < x).min(xs.len() - 1).max(1);
    let (x0, x1) = (xs[idx - 1], xs[idx]);
    let (y0, y1) = (ys[idx - 1], ys[idx]);
    if x1 == x0 {
        return Some(y0);
    }
    Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
}

/// Follower error `v(out) - v(in)` across the input range, sampled on a
/// coarse grid from the unity-gain DC transfer curve.
pub fn sweep_offset_vs_vcm(
    doc: &NetlistDoc,
    tpl: &TestbenchTemplate,
    load: LoadCondition,
    supply_v: f64,
    runner: &SpiceRunner,
) -> Result<SweepCurve, SimError> {
    let (xs, ys) = unity_transfer(doc, tpl, load, supply_v, runner, "sweep_offset")?;
    const GRID: usize = 36;
    let mut points = Vec::new();
    for k in 0..=GRID {
        let x = supply_v * k as f64 / GRID as f64;
        if let Some(out) = interpolate(&xs, &ys, x) {
            points.push(SweepPoint { x, y: out - x });
        }
    }
    Ok(SweepCurve {
        name: "offset_vs_vcm".to_string(),
        x_label: "input level (V)".to_string(),
        y_label: "follower error (V)".to_string(),
        points,
    })
}

/// Loop gain versus output level, recovered from the unity-gain transfer
/// slope: a follower slope `s` implies an open-loop gain `s / (1 - s)`.
pub fn sweep_gain_vs_vout(
    doc: &NetlistDoc,
    tpl: &TestbenchTemplate,
    load: LoadCondition,
    supply_v: f64,
    runner: &SpiceRunner,
) -> Result<SweepCurve, SimError> {
    let (xs, ys) = unity_transfer(doc, tpl, load, supply_v, runner, "sweep_gain_vout")?;
    let mut points = Vec::new();
    for i in 1..xs.len().saturating_sub(1) {
        let dx = xs[i + 1] - xs[i - 1];
        if dx == 0.0 {
            continue;
        }
        let slope = (ys[i + 1] - ys[i - 1]) / dx;
        if slope <= 0.0 || slope >= 1.0 {
            continue;
        }
        let gain = slope / (1.0 - slope);
        points.push(SweepPoint {
            x: ys[i],
            y: 20.0 * gain.log10(),
        });
    }
    Ok(SweepCurve {
        name: "gain_vs_vout".to_string(),
        x_label: "output level (V)".to_string(),
        y_label: "open-loop gain (dB)".to_string(),
    points,
    })
}

/// Low-frequency open-loop gain versus load resistance, nine points per
/// decade-and-a-half from 100 ohms to 1 megaohm.
pub fn sweep_gain_vs_rl(
    doc: &NetlistDoc,
    tpl: &TestbenchTemplate,
    cl: f64,
    supply_v: f64,
    runner: &SpiceRunner,
) -> Result<SweepCurve, SimError> {
    let spec = AnalysisSpec::Ac {
        points_per_decade: AC_POINTS_PER_DECADE,
        fstart: AC_FSTART,
        fstop: AC_FSTOP,
    };
    let key = format!("v({})", tpl.output);
    let mut points = Vec::new();
    for k in 0..9 {
        let rl = 100.0 * 10f64.powf(k as f64 / 2.0);
        let tb = TestbenchConfig {
            topology: TbTopology::OpenLoop,
            vcm: supply_v / 2.0,
            load: LoadCondition { cl, rl },
            stimulus: None,
        };
        let result = run_one(doc, &spec, &tb, tpl, runner, &format!("sweep_rl_{k}"))?;
        let Some(wave) = result.waveforms.get(&key) else {
            continue;
        };
        if let Ok(gain) = dc_gain(wave) {
            points.push(SweepPoint { x: rl, y: gain });
        }
    }
    Ok(SweepCurve {
        name: "gain_vs_rl".to_string(),
        x_label: "load resistance (ohm)".to_string(),
        y_label: "open-loop gain (dB)".to_string(),
        points,
    })
}

/// Common-mode rejection versus input common-mode level, for differential
/// benchmarks.
pub fn sweep_cmrr_vs_vcm(
    doc: &NetlistDoc,
    tpl: &TestbenchTemplate,
    load: LoadCondition,
    supply_v: f64,
    runner: &SpiceRunner,
) -> Result<SweepCurve, SimError> {
    let spec = AnalysisSpec::Ac {
        points_per_decade: AC_POINTS_PER_DECADE,
        fstart: AC_FSTART,
        fstop: AC_FSTOP,
    };
    let key = format!("v({})", tpl.output);
    let mut points = Vec::new();
    for i in 0..7 {
        let vcm = 0.3 + 0.2 * i as f64;
        if vcm > supply_v {
            break;
        }
        let diff_tb = TestbenchConfig {
            topology: TbTopology::OpenLoop,
            vcm,
            load,
            stimulus: None,
        };
        let cm_tb = TestbenchConfig {
            topology: TbTopology::CmDrive,
            vcm,
            load,
            stimulus: None,
        };
        let diff = run_one(doc, &spec, &diff_tb, tpl, runner, &format!("sweep_cmrr_dm_{i}"))?;
        let cm = run_one(doc, &spec, &cm_tb, tpl, runner, &format!("sweep_cmrr_cm_{i}"))?;
        let (Some(dw), Some(cw)) = (diff.waveforms.get(&key), cm.waveforms.get(&key)) else {
            continue;
        };
        if let Ok(value) = cmrr(dw, cw) {
            points.push(SweepPoint { x: vcm, y: value });
        }
    }
    Ok(SweepCurve {
        name: "cmrr_vs_vcm".to_string(),
        x_label: "input common-mode (V)".to_string(),
        y_label: "CMRR (dB)".to_string(),
        points,
    })
}

/// One characteristic measured on the nominal design and on each jittered
/// sample; curve names carry a `[label]` suffix identifying the sample.
#[derive(Clone, Debug, Serialize)]
pub struct CurveFamily {
    pub kind: String,
    pub curves: Vec<SweepCurve>,
}

/// Results of a curve study: per-characteristic families plus the sweeps
/// that failed to simulate.
#[derive(Clone, Debug, Serialize)]
pub struct CurveStudy {
    pub families: Vec<CurveFamily>,
    pub failures: Vec<String>,
}

/// Measure characteristic curves on the nominal design and on
/// `cfg.samples` jittered copies of it: follower error and recovered loop
/// gain across the input range, gain versus load, and (for differential
/// circuits) CMRR versus common-mode level. Individual sweep failures are
/// recorded and skipped.
pub fn curve_study(
    bench: &BenchCircuit,
    design: &NetlistDoc,
    cfg: &VariationConfig,
    engine: &EngineConfig,
    load: LoadCondition,
    supply_v: f64,
    workdir: &Path,
) -> Result<CurveStudy, BenchError> {
    fs::create_dir_all(workdir)?;
    let policy = bench.policy();
    let tpl = bench.template();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut subjects = vec![("nominal".to_string(), design.clone())];
    for sample in 0..cfg.samples {
        let doc = perturbed_doc(design, &policy, cfg.sigma_bias_v, cfg.sigma_size_rel, &mut rng)?;
        subjects.push((format!("s{sample:02}"), doc));
    }

    let mut kinds = vec!["offset_vs_vcm", "gain_vs_vout", "gain_vs_rl"];
    if tpl.differential {
        kinds.push("cmrr_vs_vcm");
    }
    let mut families: Vec<CurveFamily> = kinds
        .iter()
        .map(|k| CurveFamily {
            kind: k.to_string(),
            curves: Vec::new(),
        })
        .collect();
    let mut failures = Vec::new();

    for (label, doc) in &subjects {
        let subdir = workdir.join(label);
        let runner = match SpiceRunner::new(engine, &subdir, bench.support.clone()) {
            Ok(r) => r,
            Err(e) => {
                failures.push(format!("{label}: {e}"));
                continue;
            }
        };
        for (slot, kind) in kinds.iter().enumerate() {
            let swept = match *kind {
                "offset_vs_vcm" => sweep_offset_vs_vcm(doc, tpl, load, supply_v, &runner),
                "gain_vs_vout" => sweep_gain_vs_vout(doc, tpl, load, supply_v, &runner),
                "gain_vs_rl" => sweep_gain_vs_rl(doc, tpl, load.cl, supply_v, &runner),
                _ => sweep_cmrr_vs_vcm(doc, tpl, load, supply_v, &runner),
            };
            match swept {
                Ok(mut curve) => {
                    curve.name = format!("{kind}[{label}]");
                    families[slot].curves.push(curve);
                }
                Err(e) => failures.push(format!("{label}/{kind}: {e}")),
            }
        }
    }
    Ok(CurveStudy { families, failures })
}

/// Render curves as CSV, one block per curve separated by blank lines.
pub fn sweep_csv(curves: &[SweepCurve]) -> String {
    let mut out = String::new();
    for (i, curve) in curves.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "# {}", curve.name);
        let _ = writeln!(out, "{},{}", csv_field(&curve.x_label), csv_field(&curve.y_label));
        for p in &curve.points {
            let _ = writeln!(out, "{:e},{:e}", p.x, p.y);
        }
    }
    out
}
