//! Simulation layer: decide which analyses a set of metrics needs, wrap the
//! design in a testbench deck, drive the external batch SPICE engine as a
//! subprocess, and parse its ASCII rawfile output.
//!
//! Engine failures (non-convergence, timeout, crash, unparsable output) are
//! ordinary observable results here — callers record them and move on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::metrics::MetricKind;
use crate::netlist::NetlistDoc;

/// AC sweep grid: 20 points per decade from 1 Hz to 10 GHz.
pub const AC_POINTS_PER_DECADE: usize = 20;
pub const AC_FSTART: f64 = 1.0;
pub const AC_FSTOP: f64 = 1e10;
/// DC transfer sweeps step the input in 1 mV increments.
pub const DC_STEP_V: f64 = 1e-3;
/// Distortion stimulus: 1 kHz sine at 0.8 V amplitude around the bias.
pub const THD_FREQ_HZ: f64 = 1e3;
pub const THD_AMPLITUDE_V: f64 = 0.8;
/// Transient records cover 16 stimulus periods at 512 samples per period,
/// leaving ten clean periods after the settling prefix is discarded.
pub const THD_PERIODS: usize = 16;
pub const THD_SAMPLES_PER_PERIOD: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("netlist exposes no '{0}' port required by the testbench")]
    MissingPort(String),
    #[error("no SPICE engine found: {0}")]
    EngineNotFound(String),
    #[error("simulation did not converge: {detail}")]
    ConvergenceFailure { detail: String },
    #[error("engine exceeded the {seconds} s time limit")]
    Timeout { seconds: f64 },
    #[error("engine exited abnormally (status {status:?}): {detail}")]
    EngineCrash { status: Option<i32>, detail: String },
    #[error("cannot parse engine output at byte {offset}: {detail}")]
    ParseFailure { offset: usize, detail: String },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// One analysis the engine can run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AnalysisSpec {
    Op,
    DcSweep {
        source: String,
        start: f64,
        stop: f64,
        step: f64,
    },
    Ac {
        points_per_decade: usize,
        fstart: f64,
        fstop: f64,
    },
    Tran {
        tstep: f64,
        tstop: f64,
    },
}

impl AnalysisSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AnalysisSpec::Op => "OP",
            AnalysisSpec::DcSweep { .. } => "DC_SWEEP",
            AnalysisSpec::Ac { .. } => "AC",
            AnalysisSpec::Tran { .. } => "TRAN",
        }
    }

    fn card(&self) -> String {
        match self {
            AnalysisSpec::Op => ".op".to_string(),
            AnalysisSpec::DcSweep {
                source,
                start,
                stop,
                step,
            } => format!(".dc {source} {start:e} {stop:e} {step:e}"),
            AnalysisSpec::Ac {
                points_per_decade,
                fstart,
                fstop,
            } => format!(".ac dec {points_per_decade} {fstart:e} {fstop:e}"),
            AnalysisSpec::Tran { tstep, tstop } => format!(".tran {tstep:e} {tstop:e}"),
        }
    }
}

/// How the design under test is wrapped for a measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TbTopology {
    /// Differential drive with the loop opened at AC: the inverting input is
    /// AC-grounded through a large capacitor while a large inductor closes
    /// the loop at DC so the bias point stays servoed.
    OpenLoop,
    /// Output shorted back to the inverting input; input drives directly.
    UnityGain,
    /// Both inputs driven with the same AC signal (bias servo as OpenLoop).
    CmDrive,
    /// Explicit differential drive; same harness as OpenLoop.
    DiffDrive,
}

impl fmt::Display for TbTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TbTopology::OpenLoop => "open_loop",
            TbTopology::UnityGain => "unity_gain",
            TbTopology::CmDrive => "cm_drive",
            TbTopology::DiffDrive => "diff_drive",
        };
        write!(f, "{s}")
    }
}

/// Load attached to the output during measurement. Both components are
/// always present and positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadCondition {
    /// Load capacitance in farads.
    pub cl: f64,
    /// Load resistance in ohms.
    pub rl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineStimulus {
    pub amplitude: f64,
    pub freq_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestbenchConfig {
    pub topology: TbTopology,
    /// Input common-mode bias in volts.
    pub vcm: f64,
    pub load: LoadCondition,
    pub stimulus: Option<SineStimulus>,
}

/// How a benchmark netlist plugs into the shared testbench harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestbenchTemplate {
    /// Differential designs expose `input_pos`/`input_neg`; single-ended
    /// designs expose only `input_pos` and every topology drives it directly.
    pub differential: bool,
    pub input_pos: String,
    #[serde(default)]
    pub input_neg: Option<String>,
    pub output: String,
    /// Element name of the supply source inside the netlist (for quiescent
    /// current measurement).
    pub supply_source: String,
}

/// An analysis together with the bench configuration it runs under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedAnalysis {
    pub spec: AnalysisSpec,
    pub testbench: TestbenchConfig,
}

/// Map the metrics to be measured onto the minimal set of analyses, with
/// duplicates merged and a fixed, deterministic ordering:
///
/// * gain / bandwidth / phase margin / CMRR (differential side) -> AC, open loop
/// * CMRR (common side) -> AC, common drive
/// * power -> OP
/// * offset / output range -> DC transfer sweep in unity gain
/// * distortion -> transient sine in unity gain
pub fn plan_analyses(
    metrics: &BTreeSet<MetricKind>,
    vcm: f64,
    load: LoadCondition,
    supply_v: f64,
) -> Vec<PlannedAnalysis> {
    let wants = |k: MetricKind| metrics.contains(&k);
    let mut plan = Vec::new();
    let bench = |topology, stimulus| TestbenchConfig {
        topology,
        vcm,
        load,
        stimulus,
    };

    if wants(MetricKind::GainDb)
        || wants(MetricKind::UgbwHz)
        || wants(MetricKind::PmDeg)
        || wants(MetricKind::CmrrDb)
    {
        plan.push(PlannedAnalysis {
            spec: AnalysisSpec::Ac {
                points_per_decade: AC_POINTS_PER_DECADE,
                fstart: AC_FSTART,
                fstop: AC_FSTOP,
            },
            testbench: bench(TbTopology::OpenLoop, None),
        });
    }
    if wants(MetricKind::CmrrDb) {
        plan.push(PlannedAnalysis {
            spec: AnalysisSpec::Ac {
                points_per_decade: AC_POINTS_PER_DECADE,
                fstart: AC_FSTART,
                fstop: AC_FSTOP,
            },
            testbench: bench(TbTopology::CmDrive, None),
        });
    }
    if wants(MetricKind::PowerW) {
        plan.push(PlannedAnalysis {
            spec: AnalysisSpec::Op,
            testbench: bench(TbTopology::OpenLoop, None),
        });
    }
    if wants(MetricKind::OffsetV) || wants(MetricKind::OutputRangeV) {
        plan.push(PlannedAnalysis {
            spec: AnalysisSpec::DcSweep {
                source: "vin".to_string(),
                start: 0.0,
                stop: supply_v,
                step: DC_STEP_V,
            },
            testbench: bench(TbTopology::UnityGain, None),
        });
    }
    if wants(MetricKind::ThdDb) {
        let period = 1.0 / THD_FREQ_HZ;
        plan.push(PlannedAnalysis {
            spec: AnalysisSpec::Tran {
                tstep: period / THD_SAMPLES_PER_PERIOD as f64,
                tstop: period * THD_PERIODS as f64,
            },
            testbench: bench(
                TbTopology::UnityGain,
                Some(SineStimulus {
                    amplitude: THD_AMPLITUDE_V,
                    freq_hz: THD_FREQ_HZ,
                }),
            ),
        });
    }
    plan
}

fn port_exists(doc: &NetlistDoc, node: &str) -> bool {
    doc.elements
        .iter()
        .any(|e| e.nodes.iter().any(|n| n == node))
}

/// Render a complete, self-contained engine deck for one planned analysis.
///
/// The same inputs always produce byte-identical deck text. Fails with
/// `MissingPort` when the netlist does not expose the nodes or the supply
/// source the harness needs.
pub fn build_deck(
    doc: &NetlistDoc,
    spec: &AnalysisSpec,
    tb: &TestbenchConfig,
    tpl: &TestbenchTemplate,
) -> Result<String, SimError> {
    let inp = tpl.input_pos.as_str();
    let out = tpl.output.as_str();
    if !port_exists(doc, inp) {
        return Err(SimError::MissingPort(inp.to_string()));
    }
    if !port_exists(doc, out) {
        return Err(SimError::MissingPort(out.to_string()));
    }
    let inn = if tpl.differential {
        let inn = tpl
            .input_neg
            .as_deref()
            .ok_or_else(|| SimError::MissingPort("input_neg".to_string()))?;
        if !port_exists(doc, inn) {
            return Err(SimError::MissingPort(inn.to_string()));
        }
        Some(inn)
    } else {
        None
    };
    if doc.element(&tpl.supply_source).is_none() {
        return Err(SimError::MissingPort(format!(
            "supply source '{}'",
            tpl.supply_source
        )));
    }

    let mut deck = String::new();
    deck.push_str(&format!(
        "{} [{} / {}]\n",
        doc.title,
        spec.kind_name(),
        tb.topology
    ));
    for card in &doc.elements {
        deck.push_str(&crate::netlist::serialize_card(card));
        deck.push('\n');
    }

    // Testbench harness.
    let vcm = tb.vcm;
    let sine = |s: &SineStimulus| format!(" SIN({vcm:e} {:e} {:e})", s.amplitude, s.freq_hz);
    match (tb.topology, inn) {
        (TbTopology::UnityGain, Some(inn)) => {
            let mut drive = format!("vin {inp} 0 DC {vcm:e}");
            if let Some(s) = &tb.stimulus {
                drive.push_str(&sine(s));
            }
            deck.push_str(&drive);
            deck.push('\n');
            deck.push_str(&format!("vfb {inn} {out} DC 0\n"));
        }
        (TbTopology::CmDrive, Some(inn)) => {
            deck.push_str(&format!("vip {inp} 0 DC {vcm:e} AC 1\n"));
            deck.push_str(&format!("lfb {out} {inn} 1g\n"));
            deck.push_str(&format!("cfb {inn} tbcm 1g\n"));
            deck.push_str("vcmac tbcm 0 DC 0 AC 1\n");
        }
        (TbTopology::OpenLoop | TbTopology::DiffDrive, Some(inn)) => {
            deck.push_str(&format!("vip {inp} 0 DC {vcm:e} AC 1\n"));
            deck.push_str(&format!("lfb {out} {inn} 1g\n"));
            deck.push_str(&format!("cfb {inn} 0 1g\n"));
        }
        (TbTopology::UnityGain, None) => {
            let mut drive = format!("vin {inp} 0 DC {vcm:e}");
            if let Some(s) = &tb.stimulus {
                drive.push_str(&sine(s));
            }
            deck.push_str(&drive);
            deck.push('\n');
        }
        (_, None) => {
            deck.push_str(&format!("vip {inp} 0 DC {vcm:e} AC 1\n"));
        }
    }
    // The DC transfer sweep steps a source named "vin"; reject plans that
    // would sweep a source the harness did not create.
    if let AnalysisSpec::DcSweep { source, .. } = spec {
        if !deck.lines().any(|l| l.starts_with(&format!("{source} "))) {
            return Err(SimError::MissingPort(format!("sweep source '{source}'")));
        }
    }
    deck.push_str(&format!("cload {out} 0 {:e}\n", tb.load.cl));
    deck.push_str(&format!("rload {out} 0 {:e}\n", tb.load.rl));

    for directive in &doc.directives {
        deck.push_str(directive);
        deck.push('\n');
    }
    deck.push_str(".options filetype=ascii\n");
    match spec {
        AnalysisSpec::Op => deck.push_str(&format!(".save v({out}) i({})\n", tpl.supply_source)),
        _ => deck.push_str(&format!(".save v({out})\n")),
    }
    deck.push_str(&spec.card());
    deck.push('\n');
    deck.push_str(".end\n");
    Ok(deck)
}

/// Engine selection and time limits, resolved from configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Explicit engine binary. When unset, resolution falls back to the
    /// `ACSIZER_SPICE` environment variable, then `ngspice` on PATH, then a
    /// `minispice` binary next to the running executable or on PATH.
    pub binary: Option<PathBuf>,
    pub timeout_s: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            binary: None,
            timeout_s: 60.0,
        }
    }
}

fn find_on_path(name: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    for dir in std::env::split_paths(&path) {
        let candidate = dir.join(name);
        if candidate.is_file() {
            return Some(candidate);
        }
    }
    None
}

/// Locate the engine binary to run, in configured-explicit > environment >
/// `ngspice` > bundled `minispice` order.
pub fn resolve_engine(cfg: &EngineConfig) -> Result<PathBuf, SimError> {
    if let Some(bin) = &cfg.binary {
        if bin.is_file() {
            return Ok(bin.clone());
        }
        return Err(SimError::EngineNotFound(format!(
            "configured engine '{}' does not exist",
            bin.display()
        )));
    }
    if let Some(env_bin) = std::env::var_os("ACSIZER_SPICE") {
        let p = PathBuf::from(env_bin);
        if p.is_file() {
            return Ok(p);
        }
        return Err(SimError::EngineNotFound(format!(
            "ACSIZER_SPICE points at '{}' which does not exist",
            p.display()
        )));
    }
    if let Some(p) = find_on_path("ngspice") {
        return Ok(p);
    }
    if let Ok(exe) = std::env::current_exe() {
        // Walk up through target/debug/deps style layouts.
        let mut dir = exe.parent();
        for _ in 0..2 {
            if let Some(d) = dir {
                let sibling = d.join("minispice");
                if sibling.is_file() {
                    return Ok(sibling);
                }
                dir = d.parent();
            }
        }
    }
    if let Some(p) = find_on_path("minispice") {
        return Ok(p);
    }
    Err(SimError::EngineNotFound(
        "set engine.binary in the config, export ACSIZER_SPICE, or install ngspice/minispice on PATH"
            .to_string(),
    ))
}

/// A resolved engine plus the sandbox directory simulations run in. Support
/// files (model libraries) are staged into each run directory so relative
/// `.include` lines resolve.
#[derive(Clone, Debug)]
pub struct SpiceRunner {
    pub engine: PathBuf,
    pub timeout: Duration,
    pub workdir: PathBuf,
    pub support_files: Vec<(String, String)>,
}

impl SpiceRunner {
    pub fn new(
        cfg: &EngineConfig,
        workdir: &Path,
        support_files: Vec<(String, String)>,
    ) -> Result<SpiceRunner, SimError> {
        Ok(SpiceRunner {
            engine: resolve_engine(cfg)?,
            timeout: Duration::from_secs_f64(cfg.timeout_s),
            workdir: workdir.to_path_buf(),
            support_files,
        })
    }

    /// Run one deck under `workdir/tag`, returning the raw plots, the engine
    /// log, and the elapsed wallclock time.
    pub fn run(&self, deck: &str, tag: &str) -> Result<EngineRun, SimError> {
        let dir = self.workdir.join(tag);
        std::fs::create_dir_all(&dir)?;
        for (name, content) in &self.support_files {
            let dest = dir.join(name);
            if !dest.exists() {
                std::fs::write(&dest, content)?;
            }
        }
        std::fs::write(dir.join("deck.sp"), deck)?;

        let started = Instant::now();
        let mut child = std::process::Command::new(&self.engine)
            .current_dir(&dir)
            .args(["-b", "deck.sp", "-r", "out.raw", "-o", "out.log"])
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::piped())
            .spawn()?;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(SimError::Timeout {
                    seconds: self.timeout.as_secs_f64(),
                });
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let wallclock_s = started.elapsed().as_secs_f64();

        let mut stderr = String::new();
        if let Some(mut pipe) = child.stderr.take() {
            let _ = pipe.read_to_string(&mut stderr);
        }
        let log = std::fs::read_to_string(dir.join("out.log")).unwrap_or_default();
        if !status.success() {
            let detail = excerpt(&log, &stderr);
            if detail.to_ascii_lowercase().contains("convergence") {
                return Err(SimError::ConvergenceFailure { detail });
            }
            return Err(SimError::EngineCrash {
                status: status.code(),
                detail,
            });
        }
        let raw = std::fs::read_to_string(dir.join("out.raw")).map_err(|_| {
            SimError::ParseFailure {
                offset: 0,
                detail: "engine exited cleanly but wrote no rawfile".to_string(),
            }
        })?;
        let plots = parse_rawfile(&raw)?;
        Ok(EngineRun {
            plots,
            log,
            wallclock_s,
        })
    }
}

fn excerpt(log: &str, stderr: &str) -> String {
    let mut lines: Vec<&str> = log
        .lines()
        .chain(stderr.lines())
        .filter(|l| !l.trim().is_empty())
        .collect();
    let keep = lines.split_off(lines.len().saturating_sub(6));
    keep.join(" | ")
}

pub struct EngineRun {
    pub plots: Vec<RawPlot>,
    pub log: String,
    pub wallclock_s: f64,
}

/// One plot section of an ASCII rawfile.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPlot {
    pub name: String,
    pub complex: bool,
    /// `(name, type)` pairs in column order; names are normalized to
    /// lowercase with `x#branch` rewritten as `i(x)`.
    pub variables: Vec<(String, String)>,
    /// `points[p][v]` = value of variable `v` at point `p`.
    pub points: Vec<Vec<Complex64>>,
}

fn normalize_var(name: &str) -> String {
    let lower = name.to_ascii_lowercase();
    match lower.strip_suffix("#branch") {
        Some(stem) => format!("i({stem})"),
        None => lower,
    }
}

/// Parse an ngspice-style ASCII rawfile (one or more plots).
pub fn parse_rawfile(text: &str) -> Result<Vec<RawPlot>, SimError> {
    let fail = |offset: usize, detail: String| SimError::ParseFailure { offset, detail };
    let mut plots = Vec::new();
    // (byte offset, line) pairs so errors can point into the file.
    let mut lines = Vec::new();
    let mut pos = 0usize;
    for line in text.split_inclusive('\n') {
        lines.push((pos, line.trim_end_matches(['\n', '\r'])));
        pos += line.len();
    }

    let mut i = 0;
    while i < lines.len() {
        // Skip blank separator lines between plots.
        while i < lines.len() && lines[i].1.trim().is_empty() {
            i += 1;
        }
        if i >= lines.len() {
            break;
        }
        let mut name = String::new();
        let mut complex = false;
        let mut n_vars = 0usize;
        let mut n_points = 0usize;
        // Header fields.
        loop {
            let (off, line) = *lines
                .get(i)
                .ok_or_else(|| fail(text.len(), "truncated header".to_string()))?;
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| fail(off, format!("expected 'Key: value', found '{line}'")))?;
            let value = value.trim();
            i += 1;
            match key.trim() {
                "Title" | "Date" | "Command" | "Options" => {}
                "Plotname" => name = value.to_string(),
                "Flags" => complex = value.eq_ignore_ascii_case("complex"),
                "No. Variables" => {
                    n_vars = value
                        .parse()
                        .map_err(|_| fail(off, format!("bad variable count '{value}'")))?
                }
                "No. Points" => {
                    n_points = value
                        .parse()
                        .map_err(|_| fail(off, format!("bad point count '{value}'")))?
                }
                "Variables" => break,
                other => return Err(fail(off, format!("unknown header field '{other}'"))),
            }
        }
        if n_vars == 0 {
            let off = lines.get(i).map(|l| l.0).unwrap_or(text.len());
            return Err(fail(off, "plot declares zero variables".to_string()));
        }
        let mut variables = Vec::with_capacity(n_vars);
        for _ in 0..n_vars {
            let (off, line) = *lines
                .get(i)
                .ok_or_else(|| fail(text.len(), "truncated variable table".to_string()))?;
            let mut parts = line.split_whitespace();
            let _idx = parts.next();
            let vname = parts
                .next()
                .ok_or_else(|| fail(off, "variable line missing name".to_string()))?;
            let vtype = parts.next().unwrap_or("unknown");
            variables.push((normalize_var(vname), vtype.to_string()));
            i += 1;
        }
        {
            let (off, line) = *lines
                .get(i)
                .ok_or_else(|| fail(text.len(), "missing Values section".to_string()))?;
            if !line.trim_start().starts_with("Values:") {
                return Err(fail(off, format!("expected 'Values:', found '{line}'")));
            }
            i += 1;
        }
        // Values: a token stream of `point_index v0 v1 ... v{n-1}` records.
        let mut points = Vec::with_capacity(n_points);
        let mut tokens: Vec<(usize, &str)> = Vec::new();
        let mut consumed_lines = i;
        for p in 0..n_points {
            let mut record: Vec<Complex64> = Vec::with_capacity(n_vars);
            let mut want = n_vars + 1; // index token plus one token per variable
            while want > 0 {
                while tokens.is_empty() {
                    let Some(&(off, line)) = lines.get(consumed_lines) else {
                        return Err(fail(
                            text.len(),
                            format!("point {p} truncated ({} of {n_points} read)", points.len()),
                        ));
                    };
                    consumed_lines += 1;
                    tokens = line.split_whitespace().map(|t| (off, t)).collect();
                    tokens.reverse();
                }
                let (off, tok) = tokens.pop().unwrap();
                if want == n_vars + 1 {
                    tok.parse::<usize>()
                        .map_err(|_| fail(off, format!("expected point index, found '{tok}'")))?;
                } else {
                    let v = if let Some((re, im)) = tok.split_once(',') {
                        Complex64::new(
                            re.parse::<f64>()
                                .map_err(|_| fail(off, format!("bad real part '{re}'")))?,
                            im.parse::<f64>()
                                .map_err(|_| fail(off, format!("bad imaginary part '{im}'")))?,
                        )
                    } else {
                        Complex64::new(
                            tok.parse::<f64>()
                                .map_err(|_| fail(off, format!("bad value '{tok}'")))?,
                            0.0,
                        )
                    };
                    record.push(v);
                }
                want -= 1;
            }
            points.push(record);
        }
        i = consumed_lines;
        plots.push(RawPlot {
            name,
            complex,
            variables,
            points,
        });
    }
    if plots.is_empty() {
        return Err(fail(0, "no plots in rawfile".to_string()));
    }
    Ok(plots)
}

/// Values of one saved vector over a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub name: String,
    pub sweep: Vec<f64>,
    pub values: WaveValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WaveValues {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl Waveform {
    pub fn real(&self) -> Option<&[f64]> {
        match &self.values {
            WaveValues::Real(v) => Some(v),
            WaveValues::Complex(_) => None,
        }
    }

    pub fn complex(&self) -> Option<&[Complex64]> {
        match &self.values {
            WaveValues::Complex(v) => Some(v),
            WaveValues::Real(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        self.sweep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sweep.is_empty()
    }
}

/// Everything one engine invocation produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub analysis: AnalysisSpec,
    pub testbench: TestbenchConfig,
    pub waveforms: BTreeMap<String, Waveform>,
    pub op_point: BTreeMap<String, f64>,
    pub wallclock_s: f64,
    pub engine_log: String,
}

fn strictly_monotonic(sweep: &[f64]) -> bool {
    if sweep.len() < 2 {
        return true;
    }
    let up = sweep[1] > sweep[0];
    sweep
        .windows(2)
        .all(|w| if up { w[1] > w[0] } else { w[1] < w[0] })
}

/// Convert parsed plots into a [`SimResult`], enforcing that sweep abscissas
/// are strictly monotonic.
pub fn collect_result(
    spec: &AnalysisSpec,
    tb: &TestbenchConfig,
    run: EngineRun,
) -> Result<SimResult, SimError> {
    let mut waveforms = BTreeMap::new();
    let mut op_point = BTreeMap::new();
    for plot in &run.plots {
        let single_point = matches!(spec, AnalysisSpec::Op);
        if single_point {
            for (vi, (name, _)) in plot.variables.iter().enumerate() {
                if let Some(point) = plot.points.first() {
                    op_point.insert(name.clone(), point[vi].re);
                }
            }
            continue;
        }
        let sweep: Vec<f64> = plot.points.iter().map(|p| p[0].re).collect();
        if !strictly_monotonic(&sweep) {
            return Err(SimError::ParseFailure {
                offset: 0,
                detail: format!("sweep '{}' is not strictly monotonic", plot.variables[0].0),
            });
        }
        for (vi, (name, _)) in plot.variables.iter().enumerate().skip(1) {
            let values = if plot.complex {
                WaveValues::Complex(plot.points.iter().map(|p| p[vi]).collect())
            } else {
                WaveValues::Real(plot.points.iter().map(|p| p[vi].re).collect())
            };
            waveforms.insert(
                name.clone(),
                Waveform {
                    name: name.clone(),
                    sweep: sweep.clone(),
                    values,
                },
            );
        }
    }
    Ok(SimResult {
        analysis: spec.clone(),
        testbench: tb.clone(),
        waveforms,
        op_point,
        wallclock_s: run.wallclock_s,
        engine_log: run.log,
    })
}

/// Build and run every planned analysis, returning results in plan order.
/// The first engine failure aborts the batch and is returned as the error;
/// callers treat it as an observation about the design point.
pub fn run_planned(
    doc: &NetlistDoc,
    plan: &[PlannedAnalysis],
    tpl: &TestbenchTemplate,
    runner: &SpiceRunner,
    tag_prefix: &str,
) -> Result<Vec<SimResult>, SimError> {
    let mut results = Vec::with_capacity(plan.len());
    for (idx, planned) in plan.iter().enumerate() {
        let deck = build_deck(doc, &planned.spec, &planned.testbench, tpl)?;
        let tag = format!(
            "{tag_prefix}{:02}_{}_{}",
            idx,
            planned.spec.kind_name().to_ascii_lowercase(),
            planned.testbench.topology
        );
        let run = runner.run(&deck, &tag)?;
        results.push(collect_result(&planned.spec, &planned.testbench, run)?);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_metrics() -> BTreeSet<MetricKind> {
        MetricKind::ALL.iter().copied().collect()
    }

    const LOAD: LoadCondition = LoadCondition { cl: 10e-12, rl: 1e3 };

    #[test]
    fn full_metric_set_needs_exactly_five_analyses() {
        let plan = plan_analyses(&all_metrics(), 0.9, LOAD, 1.8);
        let kinds: Vec<(&str, TbTopology)> = plan
            .iter()
            .map(|p| (p.spec.kind_name(), p.testbench.topology))
            .collect();
        assert_eq!(
            kinds,
            vec![
                ("AC", TbTopology::OpenLoop),
                ("AC", TbTopology::CmDrive),
                ("OP", TbTopology::OpenLoop),
                ("DC_SWEEP", TbTopology::UnityGain),
                ("TRAN", TbTopology::UnityGain),
            ]
        );
    }

    #[test]
    fn overlapping_metrics_share_one_analysis() {
        let metrics: BTreeSet<MetricKind> =
            [MetricKind::GainDb, MetricKind::UgbwHz, MetricKind::PmDeg]
                .into_iter()
                .collect();
        let plan = plan_analyses(&metrics, 0.9, LOAD, 1.8);
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].spec.kind_name(), "AC");
    }

    #[test]
    fn transient_plan_covers_sixteen_periods() {
        let metrics: BTreeSet<MetricKind> = [MetricKind::ThdDb].into_iter().collect();
        let plan = plan_analyses(&metrics, 0.9, LOAD, 1.8);
        let AnalysisSpec::Tran { tstep, tstop } = plan[0].spec else {
            panic!("expected transient");
        };
        assert_eq!(tstop, 16e-3);
        assert!((tstop / tstep - 8192.0).abs() < 1e-9);
        assert_eq!(plan[0].testbench.stimulus.unwrap().freq_hz, 1e3);
    }

    #[test]
    fn deck_generation_is_deterministic_and_flags_missing_ports() {
        let doc = crate::netlist::parse_netlist(
            "tiny\nvdd vdd 0 DC 1.8\nm1 out inp t 0 nch W=2u L=1u\nm2 out inn t 0 nch W=2u L=1u\nr1 t 0 1k\n.end\n",
        )
        .unwrap();
        let tpl = TestbenchTemplate {
            differential: true,
            input_pos: "inp".into(),
            input_neg: Some("inn".into()),
            output: "out".into(),
            supply_source: "vdd".into(),
        };
        let tb = TestbenchConfig {
            topology: TbTopology::OpenLoop,
            vcm: 0.9,
            load: LOAD,
            stimulus: None,
        };
        let spec = AnalysisSpec::Ac {
            points_per_decade: 20,
            fstart: 1.0,
            fstop: 1e10,
        };
        let a = build_deck(&doc, &spec, &tb, &tpl).unwrap();
        let b = build_deck(&doc, &spec, &tb, &tpl).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("lfb out inn 1g"), "{a}");
        assert!(a.ends_with(".end\n"));

        let mut bad_tpl = tpl.clone();
        bad_tpl.output = "nonexistent".into();
        assert!(matches!(
            build_deck(&doc, &spec, &tb, &bad_tpl),
            Err(SimError::MissingPort(p)) if p == "nonexistent"
        ));
    }

    #[test]
    fn rawfile_parser_reads_real_and_complex_plots() {
        let raw = "Title: t\nDate: today\nPlotname: AC Analysis\nFlags: complex\n\
                   No. Variables: 2\nNo. Points: 2\nVariables:\n\t0\tfrequency\tfrequency\n\t1\tv(out)\tvoltage\n\
                   Values:\n0\t1.0,0.0\n\t0.5,-0.5\n\n1\t10.0,0.0\n\t0.25,-0.25\n";
        let plots = parse_rawfile(raw).unwrap();
        assert_eq!(plots.len(), 1);
        assert!(plots[0].complex);
        assert_eq!(plots[0].points[1][1], Complex64::new(0.25, -0.25));

        let branch = "Title: t\nPlotname: Operating Point\nFlags: real\n\
                      No. Variables: 2\nNo. Points: 1\nVariables:\n\t0\tv(out)\tvoltage\n\t1\tv1#branch\tcurrent\n\
                      Values:\n0\t0.9\n\t-0.0009\n";
        let plots = parse_rawfile(branch).unwrap();
        assert_eq!(plots[0].variables[1].0, "i(v1)");
    }

    #[test]
    fn rawfile_errors_carry_byte_offsets() {
        let raw = "Title: t\nPlotname: DC transfer characteristic\nFlags: real\n\
                   No. Variables: 2\nNo. Points: 2\nVariables:\n\t0\tv-sweep\tvoltage\n\t1\tv(out)\tvoltage\n\
                   Values:\n0\t0.0\n\t0.0\n1\tnot_a_number\n\t0.1\n";
        let err = parse_rawfile(raw).unwrap_err();
        let SimError::ParseFailure { offset, detail } = err else {
            panic!("expected parse failure");
        };
        assert!(detail.contains("not_a_number"), "{detail}");
        assert_eq!(&raw[offset..offset + 1], "1");
    }

    #[test]
    fn non_monotonic_sweeps_are_rejected() {
        let plot = RawPlot {
            name: "DC transfer characteristic".into(),
            complex: false,
            variables: vec![
                ("v-sweep".into(), "voltage".into()),
                ("v(out)".into(), "voltage".into()),
            ],
            points: vec![
                vec![Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)],
                vec![Complex64::new(0.2, 0.0), Complex64::new(0.1, 0.0)],
                vec![Complex64::new(0.1, 0.0), Complex64::new(0.2, 0.0)],
            ],
        };
        let run = EngineRun {
            plots: vec![plot],
            log: String::new(),
            wallclock_s: 0.0,
        };
        let spec = AnalysisSpec::DcSweep {
            source: "vin".into(),
            start: 0.0,
            stop: 1.8,
            step: 1e-3,
        };
        let tb = TestbenchConfig {
            topology: TbTopology::UnityGain,
            vcm: 0.9,
            load: LOAD,
            stimulus: None,
        };
        assert!(matches!(
            collect_result(&spec, &tb, run),
            Err(SimError::ParseFailure { .. })
        ));
    }
}
