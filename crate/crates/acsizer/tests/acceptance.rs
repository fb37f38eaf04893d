//! Acceptance gate: eight end-to-end criteria, one test each, every test
//! printing exactly one `criterion N: PASS/FAIL` line. Run with
//! `cargo test -p acsizer --test acceptance -- --nocapture` to see the lines
//! for passing criteria too.
//!
//! Tolerances are pinned in the bodies below, next to the values they guard.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use acsizer::agent::{
    canonical_record_json, run_optimization, BaselineEngine, DesignEvaluator, EngineDescriptor,
    EngineFailure, EvalFailure, LoopOptions, Observation, OptimizationOutcome, OutcomeStatus,
    PromptBundle, ProposalContext, ProposalEngine, SpiceEvaluator,
};
use acsizer::bench::{
    benchmark_names, draw_statistics, load_benchmark, load_fixture, perturbed_doc, run_variation,
    VariationConfig,
};
use acsizer::llm::{
    Client, Dialect, LlmError, LlmProposalEngine, ProviderConfig, RecordingTransport, Transport,
    WireRequest, WireResponse,
};
use acsizer::metrics::{
    cmrr, dc_gain, phase_margin, single_pole_response, thd, unity_gain_bandwidth, MetricKind,
    MetricReport, MetricValue,
};
use acsizer::netlist::{
    apply_patch, extract_tunables, parse_netlist, serialize_netlist, NetlistDoc, ParamPatch,
    PatchAssignment, PhysicalValue,
};
use acsizer::sim::{EngineConfig, LoadCondition, SpiceRunner, WaveValues, Waveform};
use acsizer::targets::{check_all, group_by_name, Direction, TargetGroup, TargetSpec};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Runs one criterion body, prints its verdict line, and enforces the
/// criterion's wall-clock budget. Panics (failing the test) on any error.
fn criterion(n: usize, name: &str, budget_s: f64, body: impl FnOnce() -> Result<(), String>) {
    let started = Instant::now();
    let outcome = body();
    let elapsed = started.elapsed().as_secs_f64();
    match outcome {
        Ok(()) if elapsed <= budget_s => {
            println!("criterion {n}: PASS - {name} ({elapsed:.2}s)");
        }
        Ok(()) => {
            println!(
                "criterion {n}: FAIL - {name}: finished correctly but took {elapsed:.2}s \
                 (budget {budget_s}s)"
            );
            panic!("criterion {n} exceeded its time budget");
        }
        Err(msg) => {
            println!("criterion {n}: FAIL - {name}: {msg}");
            panic!("criterion {n} failed: {msg}");
        }
    }
}

fn spice_config() -> EngineConfig {
    EngineConfig {
        binary: Some(PathBuf::from(env!("CARGO_BIN_EXE_minispice"))),
        timeout_s: 60.0,
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: the tolerance checker reproduces a frozen corpus of fifteen
// recorded sizing outcomes — every per-metric verdict and every row verdict.
// ---------------------------------------------------------------------------

struct CorpusRow {
    id: &'static str,
    /// gain dB, ugbw MHz, pm deg, power mW, cmrr dB, thd dB, offset mV, range V
    cells: [f64; 8],
    /// Metrics the corpus records as failing their accepted bound.
    marked_fail: &'static [MetricKind],
    row_passes: bool,
}

/// Cells where the corpus's own per-metric marks contradict the uniform
/// relative-tolerance rule. The rule is canonical; at these cells the checker
/// is required to DISAGREE with the recorded mark (so this list cannot hide a
/// real regression), and the row verdicts below are unaffected because each
/// of these rows fails on other metrics anyway.
///
///   G3-1 output_range_v 1.66 V  marked fail, but 1.66 >= 1.7 * 0.95 = 1.615
///   G3-2 thd_db       -24.68 dB marked pass, but -24.68 > -26 * 0.95 = -24.70
///   G3-5 pm_deg        51.21 deg marked pass, but 51.21 < 55 * 0.95 = 52.25
const MARKING_QUIRKS: [(&str, MetricKind); 3] = [
    ("G3-1", MetricKind::OutputRangeV),
    ("G3-2", MetricKind::ThdDb),
    ("G3-5", MetricKind::PmDeg),
];

const CORPUS: [CorpusRow; 15] = [
    CorpusRow {
        id: "G1-1",
        cells: [67.91, 19.95, 61.59, 4.8, 110.76, -26.06, 0.98, 1.68],
        marked_fail: &[],
        row_passes: true,
    },
    CorpusRow {
        id: "G1-2",
        cells: [68.63, 19.95, 72.26, 13.22, 97.63, -26.09, 5.30, 1.24],
        marked_fail: &[MetricKind::PowerW, MetricKind::OffsetV, MetricKind::OutputRangeV],
        row_passes: false,
    },
    CorpusRow {
        id: "G1-3",
        cells: [68.57, 15.85, 71.75, 4.53, 118.61, -26.02, 0.16, 1.32],
        marked_fail: &[MetricKind::OutputRangeV],
        row_passes: false,
    },
    CorpusRow {
        id: "G1-4",
        cells: [66.07, 12.58, 54.50, 7.69, 124.13, -25.42, 0.40, 1.68],
        marked_fail: &[],
        row_passes: true,
    },
    CorpusRow {
        id: "G1-5",
        cells: [66.45, 50.12, 60.59, 7.43, 105.62, -26.24, 0.69, 1.67],
        marked_fail: &[],
        row_passes: true,
    },
    CorpusRow {
        id: "G2-1",
        cells: [58.73, 5.01, 78.98, 4.2, 100.89, -25.89, 1.80, 1.67],
        marked_fail: &[MetricKind::GainDb, MetricKind::OffsetV],
        row_passes: false,
    },
    CorpusRow {
        id: "G2-2",
        cells: [66.76, 12.59, 34.14, 1.2, 131.64, -24.75, 4.50, 1.77],
        marked_fail: &[MetricKind::PmDeg, MetricKind::OffsetV],
        row_passes: false,
    },
    CorpusRow {
        id: "G2-3",
        cells: [63.27, 9.99, 52.34, 1.5, 111.34, -25.98, 0.99, 1.69],
        marked_fail: &[],
        row_passes: true,
    },
    CorpusRow {
        id: "G2-4",
        cells: [62.19, 7.94, 55.19, 0.7, 131.19, -26.29, 0.42, 1.70],
        marked_fail: &[],
        row_passes: true,
    },
    CorpusRow {
        id: "G2-5",
        cells: [66.74, 15.85, 63.44, 4.9, 112.01, -26.29, 0.86, 1.70],
        marked_fail: &[],
        row_passes: true,
    },
    CorpusRow {
        id: "G3-1",
        cells: [50.97, 99.99, 56.04, 15.83, 93.70, -30.16, 5.16, 1.66],
        marked_fail: &[MetricKind::GainDb, MetricKind::CmrrDb, MetricKind::OutputRangeV],
        row_passes: false,
    },
    CorpusRow {
        id: "G3-2",
        cells: [68.91, 63.09, 64.55, 20.27, 96.77, -24.68, 4.30, 1.39],
        marked_fail: &[MetricKind::OutputRangeV],
        row_passes: false,
    },
    CorpusRow {
        id: "G3-3",
        cells: [58.97, 50.12, 73.84, 4.12, 95.74, -41.57, 42.25, 0.68],
        marked_fail: &[MetricKind::GainDb, MetricKind::OffsetV, MetricKind::OutputRangeV],
        row_passes: false,
    },
    CorpusRow {
        id: "G3-4",
        cells: [69.33, 63.09, 67.82, 10.08, 108.78, -27.22, 2.70, 1.65],
        marked_fail: &[],
        row_passes: true,
    },
    CorpusRow {
        id: "G3-5",
        cells: [68.38, 79.43, 51.21, 47.01, 81.73, -32.62, 14.27, 1.69],
        marked_fail: &[MetricKind::CmrrDb, MetricKind::OffsetV],
        row_passes: false,
    },
];

fn corpus_report(row: &CorpusRow, load: LoadCondition) -> MetricReport {
    let [gain, ugbw_mhz, pm, power_mw, cmrr_db, thd_db, offset_mv, range] = row.cells;
    let pairs = [
        (MetricKind::GainDb, gain),
        (MetricKind::UgbwHz, ugbw_mhz * 1e6),
        (MetricKind::PmDeg, pm),
        (MetricKind::PowerW, power_mw * 1e-3),
        (MetricKind::CmrrDb, cmrr_db),
        (MetricKind::ThdDb, thd_db),
        (MetricKind::OffsetV, offset_mv * 1e-3),
        (MetricKind::OutputRangeV, range),
    ];
    let mut values = BTreeMap::new();
    for (kind, value) in pairs {
        values.insert(kind, MetricValue::new(kind, value));
    }
    MetricReport {
        design_point_id: row.id.to_string(),
        load,
        values,
        absent: BTreeMap::new(),
    }
}

#[test]
fn outcome_corpus_regression() {
    criterion(1, "recorded-outcome corpus regression", 1.0, || {
        // Accepted bounds the builtin groups must produce (hand-computed from
        // target +/- 5% of |target| in the permissive direction).
        let expected_bounds: [(&str, &[(MetricKind, f64)]); 3] = [
            (
                "G1",
                &[
                    (MetricKind::GainDb, 61.75),
                    (MetricKind::UgbwHz, 9.5e6),
                    (MetricKind::PmDeg, 52.25),
                    (MetricKind::PowerW, 10.5e-3),
                    (MetricKind::CmrrDb, 95.0),
                    (MetricKind::ThdDb, -24.7),
                    (MetricKind::OffsetV, 1.05e-3),
                    (MetricKind::OutputRangeV, 1.6625),
                ],
            ),
            (
                "G2",
                &[
                    (MetricKind::UgbwHz, 4.75e6),
                    (MetricKind::PmDeg, 42.75),
                    (MetricKind::PowerW, 5.25e-3),
                ],
            ),
            (
                "G3",
                &[
                    (MetricKind::UgbwHz, 47.5e6),
                    (MetricKind::PowerW, 52.5e-3),
                    (MetricKind::OffsetV, 5.25e-3),
                    (MetricKind::OutputRangeV, 1.615),
                ],
            ),
        ];
        let mut problems = Vec::new();
        for (group_name, bounds) in expected_bounds {
            let group = group_by_name(group_name)
                .ok_or_else(|| format!("builtin group {group_name} missing"))?;
            let probe = corpus_report(&CORPUS[0], group.load);
            let result = check_all(&probe, &group);
            for (kind, want) in bounds {
                let got = result
                    .check_for(*kind)
                    .ok_or_else(|| format!("{group_name} has no {kind} check"))?
                    .relaxed_bound;
                if ((got - want) / want).abs() > 1e-12 {
                    problems.push(format!(
                        "{group_name} {kind}: accepted bound {got}, expected {want}"
                    ));
                }
            }
        }

        for row in &CORPUS {
            let group_name = &row.id[..2];
            let group = group_by_name(group_name)
                .ok_or_else(|| format!("builtin group {group_name} missing"))?;
            let report = corpus_report(row, group.load);
            let result = check_all(&report, &group);
            for spec in &group.targets {
                let check = result
                    .check_for(spec.kind)
                    .ok_or_else(|| format!("{}: no check for {}", row.id, spec.kind))?;
                let recorded_fail = row.marked_fail.contains(&spec.kind);
                let quirk = MARKING_QUIRKS.contains(&(row.id, spec.kind));
                // At quirk cells the recorded mark contradicts the rule, so
                // the checker must land on the opposite side of the mark.
                let expect_pass = if quirk { recorded_fail } else { !recorded_fail };
                if check.pass != expect_pass {
                    problems.push(format!(
                        "{} {}: value {:?} checked pass={}, corpus implies {}",
                        row.id, spec.kind, check.value, check.pass, expect_pass
                    ));
                }
            }
            if result.overall_pass != row.row_passes {
                problems.push(format!(
                    "{}: overall_pass={}, corpus says {}",
                    row.id, result.overall_pass, row.row_passes
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    });
}

// ---------------------------------------------------------------------------
// Criterion 2: metric extractors against closed-form responses, cross-checked
// by independent brute-force math written here rather than in the library.
// ---------------------------------------------------------------------------

/// Unity crossing of |H| by direct scan + interpolation linear in log f /
/// log |H|; returns (frequency, phase in degrees at the crossing).
fn brute_force_unity(wave: &Waveform) -> Result<(f64, f64), String> {
    let values = wave.complex().ok_or("waveform is not complex")?;
    for i in 0..values.len() - 1 {
        let m0 = values[i].norm();
        let m1 = values[i + 1].norm();
        if m0 >= 1.0 && m1 < 1.0 {
            let t = m0.ln() / (m0.ln() - m1.ln());
            let f = (wave.sweep[i].ln() * (1.0 - t) + wave.sweep[i + 1].ln() * t).exp();
            let p0 = values[i].arg().to_degrees();
            let p1 = values[i + 1].arg().to_degrees();
            return Ok((f, p0 * (1.0 - t) + p1 * t));
        }
    }
    Err("no unity crossing found".to_string())
}

#[test]
fn metric_oracles() {
    criterion(2, "metric extraction against closed-form responses", 10.0, || {
        let mut problems = Vec::new();
        let mut check = |label: &str, got: f64, want: f64, tol: f64| {
            if (got - want).abs() > tol {
                problems.push(format!("{label}: got {got}, want {want} +/- {tol}"));
            }
        };

        // One-pole response, a0 = 1000, pole at 1 kHz.
        let wave = single_pole_response(1000.0, 1e3, 1.0, 1e10, 20);
        let gain = dc_gain(&wave).map_err(|e| e.to_string())?;
        let first = wave.complex().ok_or("response is not complex")?[0].norm();
        check("dc gain (analytic)", gain, 60.0, 0.01);
        check("dc gain (brute force)", gain, 20.0 * first.log10(), 1e-9);

        let ugbw = unity_gain_bandwidth(&wave).map_err(|e| e.to_string())?;
        let (bf_f, bf_phase) = brute_force_unity(&wave)?;
        check("ugbw (analytic)", ugbw / 1e6, 1.0, 1e-3);
        check("ugbw (brute force)", ugbw / bf_f, 1.0, 1e-4);

        let pm = phase_margin(&wave).map_err(|e| e.to_string())?;
        check("phase margin (analytic)", pm, 90.06, 0.05);
        check("phase margin (brute force)", pm, 180.0 + bf_phase, 0.02);

        // 1 kHz sine with a 5% second harmonic, sampled over 16 periods.
        let f0 = 1e3;
        let per = 512usize;
        let periods = 16usize;
        let dt = 1.0 / (f0 * per as f64);
        let n = per * periods;
        let mut sweep = Vec::with_capacity(n);
        let mut vals = Vec::with_capacity(n);
        for k in 0..n {
            let t = k as f64 * dt;
            sweep.push(t);
            vals.push(
                (std::f64::consts::TAU * f0 * t).sin()
                    + 0.05 * (std::f64::consts::TAU * 2.0 * f0 * t).sin(),
            );
        }
        let tran = Waveform {
            name: "v(out)".to_string(),
            sweep,
            values: WaveValues::Real(vals.clone()),
        };
        let measured = thd(&tran, f0, 5).map_err(|e| e.to_string())?;
        // Brute force: exact Fourier projection over the final 8 periods.
        let window = 8 * per;
        let tail = &vals[n - window..];
        let mut amps = [0.0f64; 5];
        for (h, amp) in amps.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, y) in tail.iter().enumerate() {
                let ang = std::f64::consts::TAU * (h + 1) as f64 * k as f64 / per as f64;
                acc += y * Complex64::new(ang.cos(), -ang.sin());
            }
            *amp = 2.0 * acc.norm() / window as f64;
        }
        let distortion: f64 = amps[1..].iter().map(|a| a * a).sum::<f64>().sqrt();
        let brute = 20.0 * (distortion / amps[0]).log10();
        check("thd (analytic)", measured, 20.0 * 0.05f64.log10(), 0.05);
        check("thd (brute force)", measured, brute, 0.05);

        // Flat differential gain 1000, flat common-mode gain 0.1.
        let flat = |mag: f64| Waveform {
            name: "v(out)".to_string(),
            sweep: vec![1.0, 10.0, 100.0],
            values: WaveValues::Complex(vec![Complex64::new(mag, 0.0); 3]),
        };
        let rejection = cmrr(&flat(1000.0), &flat(0.1)).map_err(|e| e.to_string())?;
        check("cmrr (analytic)", rejection, 80.0, 1e-9);
        check(
            "cmrr (brute force)",
            rejection,
            20.0 * (1000.0f64 / 0.1).log10(),
            1e-9,
        );

        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    });
}

// ---------------------------------------------------------------------------
// Criterion 3: parse -> serialize -> parse is structurally lossless for every
// shipped benchmark, and stays lossless under randomized patch sequences.
// ---------------------------------------------------------------------------

fn structurally_equal(a: &NetlistDoc, b: &NetlistDoc) -> bool {
    a.title == b.title && a.elements == b.elements && a.directives == b.directives
}

#[test]
fn netlist_round_trip() {
    criterion(3, "netlist round-trip and patch-sequence properties", 5.0, || {
        for name in benchmark_names() {
            let bench = load_benchmark(name).map_err(|e| e.to_string())?;
            let text = serialize_netlist(&bench.baseline);
            let reparsed = parse_netlist(&text).map_err(|e| format!("{name}: {e}"))?;
            if !structurally_equal(&bench.baseline, &reparsed) {
                return Err(format!("{name}: round trip changed the document"));
            }
        }

        let bench = load_benchmark("opamp20t").map_err(|e| e.to_string())?;
        let policy = bench.policy();
        let baseline = bench.baseline.clone();

        use proptest::prelude::*;
        use proptest::test_runner::{Config, TestRunner};
        let mut runner = TestRunner::new(Config {
            cases: 48,
            failure_persistence: None,
            ..Config::default()
        });
        let strategy = proptest::collection::vec((0usize..64, 0.0f64..=1.0), 1..10);
        runner
            .run(&strategy, |steps| {
                let mut doc = baseline.clone();
                for (raw, frac) in steps {
                    let tunables = extract_tunables(&doc, &policy)
                        .map_err(|e| TestCaseError::fail(e.to_string()))?;
                    let t = &tunables[raw % tunables.len()];
                    let (lo, hi) = t.bounds;
                    let requested = lo + frac * (hi - lo);
                    let patch = ParamPatch {
                        assignments: vec![PatchAssignment {
                            target: t.key().to_string(),
                            param: t.param,
                            value: PhysicalValue {
                                magnitude: requested,
                                unit: t.param.unit(),
                            },
                        }],
                        rationale: "randomized sweep".to_string(),
                    };
                    doc = apply_patch(&doc, &patch, &baseline, &tunables)
                        .map_err(|e| TestCaseError::fail(e.to_string()))?;
                    let stored = extract_tunables(&doc, &policy)
                        .map_err(|e| TestCaseError::fail(e.to_string()))?
                        .into_iter()
                        .find(|s| s.key() == t.key() && s.param == t.param)
                        .ok_or_else(|| TestCaseError::fail("tunable vanished".to_string()))?
                        .value
                        .magnitude;
                    // Values are restyled to 9 significant digits on write.
                    prop_assert!(
                        (stored - requested).abs() <= requested.abs() * 1e-8,
                        "stored {} drifted from requested {}",
                        stored,
                        requested
                    );
                }
                let before = extract_tunables(&doc, &policy)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                let text = serialize_netlist(&doc);
                let reparsed =
                    parse_netlist(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert!(
                    structurally_equal(&doc, &reparsed),
                    "round trip changed the patched document"
                );
                let after = extract_tunables(&reparsed, &policy)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert_eq!(before.len(), after.len());
                for (b, a) in before.iter().zip(after.iter()) {
                    prop_assert_eq!(b.key(), a.key());
                    prop_assert_eq!(b.param, a.param);
                    prop_assert_eq!(b.value.magnitude, a.value.magnitude);
                }
                Ok(())
            })
            .map_err(|e| e.to_string())
    });
}

// ---------------------------------------------------------------------------
// Criterion 4: the offline heuristic engine converges on the five-transistor
// OTA gain task, and its run history replays byte-identically.
// ---------------------------------------------------------------------------

#[test]
fn heuristic_engine_converges_reproducibly() {
    criterion(4, "heuristic sizing run converges and reruns identically", 120.0, || {
        let bench = load_benchmark("5t_ota").map_err(|e| e.to_string())?;
        let group = bench.default_targets().clone();
        if group.targets.len() != 1 || group.targets[0].kind != MetricKind::GainDb {
            return Err("expected a single gain target for this benchmark".to_string());
        }
        if group.max_iterations > 20 {
            return Err(format!(
                "iteration cap is {}, expected at most 20",
                group.max_iterations
            ));
        }

        let mut histories = Vec::new();
        for run in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let runner = SpiceRunner::new(&spice_config(), &dir.path().join("sim"), bench.support.clone())
                .map_err(|e| e.to_string())?;
            let mut evaluator = SpiceEvaluator {
                runner,
                template: bench.template().clone(),
            };
            let mut engine = BaselineEngine::new(7, bench.sensitivity());
            let opts = LoopOptions {
                circuit_type: bench.manifest.circuit_type.clone(),
                log_dir: Some(dir.path().join("logs")),
                ..LoopOptions::default()
            };
            let outcome = run_optimization(
                &bench.baseline,
                &group,
                &bench.policy(),
                &mut engine,
                &mut evaluator,
                &opts,
            )
            .map_err(|e| e.to_string())?;
            if outcome.status != OutcomeStatus::Success {
                return Err(format!("run {run}: status {}, expected SUCCESS", outcome.status));
            }
            if outcome.iterations_used > group.max_iterations {
                return Err(format!(
                    "run {run}: {} iterations, cap {}",
                    outcome.iterations_used, group.max_iterations
                ));
            }
            let history = std::fs::read_to_string(dir.path().join("logs/history.jsonl"))
                .map_err(|e| e.to_string())?;
            if history.is_empty() {
                return Err(format!("run {run}: empty history log"));
            }
            histories.push(history);
        }
        if histories[0] != histories[1] {
            return Err("two seeded runs produced different history logs".to_string());
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// Criterion 5: budget exhaustion writes exactly max_iterations records, and a
// mid-run convergence failure is recorded as an observation, not an abort.
// ---------------------------------------------------------------------------

struct HoldEngine;

impl ProposalEngine for HoldEngine {
    fn descriptor(&self) -> EngineDescriptor {
        EngineDescriptor {
            name: "hold".to_string(),
            deterministic: true,
            requires_network: false,
        }
    }

    fn propose(
        &mut self,
        _prompt: &PromptBundle,
        _ctx: &ProposalContext<'_>,
    ) -> Result<ParamPatch, EngineFailure> {
        Ok(ParamPatch::identity("hold every knob in place"))
    }
}

/// Always reports 5 dB of gain (never enough); optionally errors like a
/// non-converging simulation at one chosen iteration.
struct StubEvaluator {
    fail_at: Option<usize>,
}

impl DesignEvaluator for StubEvaluator {
    fn evaluate(
        &mut self,
        _doc: &NetlistDoc,
        _wanted: &BTreeSet<MetricKind>,
        group: &TargetGroup,
        iteration: usize,
    ) -> Result<MetricReport, EvalFailure> {
        if self.fail_at == Some(iteration) {
            return Err(EvalFailure {
                stage: "simulation_convergence".to_string(),
                detail: "operating point did not converge".to_string(),
            });
        }
        let mut values = BTreeMap::new();
        values.insert(
            MetricKind::GainDb,
            MetricValue::new(MetricKind::GainDb, 5.0),
        );
        Ok(MetricReport {
            design_point_id: format!("iter_{iteration:02}"),
            load: group.load,
            values,
            absent: BTreeMap::new(),
        })
    }
}

fn never_passing_group(max_iterations: usize) -> TargetGroup {
    TargetGroup {
        name: "unreachable_gain".to_string(),
        supply_v: 1.8,
        load: LoadCondition { cl: 1e-11, rl: 1e6 },
        max_iterations,
        targets: vec![TargetSpec {
            kind: MetricKind::GainDb,
            direction: Direction::AtLeast,
            value: 20.0,
            tolerance: 0.05,
        }],
    }
}

#[test]
fn budget_and_failure_handling() {
    criterion(5, "budget exhaustion and failure-as-observation", 10.0, || {
        let bench = load_benchmark("inverter").map_err(|e| e.to_string())?;
        let group = never_passing_group(7);
        let policy = bench.policy();

        let run = |fail_at: Option<usize>| -> Result<OptimizationOutcome, String> {
            run_optimization(
                &bench.baseline,
                &group,
                &policy,
                &mut HoldEngine,
                &mut StubEvaluator { fail_at },
                &LoopOptions::default(),
            )
            .map_err(|e| e.to_string())
        };

        let clean = run(None)?;
        if clean.status != OutcomeStatus::BudgetExhausted {
            return Err(format!("clean run: status {}, expected BUDGET_EXHAUSTED", clean.status));
        }
        if clean.history.records.len() != 7 || clean.iterations_used != 7 {
            return Err(format!(
                "clean run: {} records / {} iterations, expected exactly 7",
                clean.history.records.len(),
                clean.iterations_used
            ));
        }
        if !clean.history.records.iter().all(|r| r.check.is_some()) {
            return Err("clean run: some iteration carries no check result".to_string());
        }

        let wobbly = run(Some(3))?;
        if wobbly.status != OutcomeStatus::BudgetExhausted {
            return Err(format!(
                "failure run: status {}, expected BUDGET_EXHAUSTED (a convergence failure must \
                 not abort the run)",
                wobbly.status
            ));
        }
        if wobbly.history.records.len() != 7 {
            return Err(format!(
                "failure run: {} records, expected 7",
                wobbly.history.records.len()
            ));
        }
        match &wobbly.history.records[2].observation {
            Observation::Failure { stage, .. } if stage == "simulation_convergence" => {}
            other => {
                return Err(format!(
                    "iteration 3 observation is {other:?}, expected a simulation_convergence \
                     failure"
                ))
            }
        }
        if wobbly.history.records[2].check.is_some() {
            return Err("a failed iteration must not carry a check result".to_string());
        }
        if !matches!(&wobbly.history.records[3].observation, Observation::Report(_)) {
            return Err("the loop did not resume measuring after the failure".to_string());
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// Criterion 6: every bundled sized design applies cleanly, passes constraint
// validation, and measures a complete eight-metric report end to end through
// the command-line interface.
// ---------------------------------------------------------------------------

#[test]
fn sized_presets_measure_completely() {
    criterion(6, "bundled sized designs measure all eight metrics", 300.0, || {
        let bench = load_benchmark("opamp20t").map_err(|e| e.to_string())?;
        let bias_set: BTreeSet<String> =
            bench.policy().bias_sources.iter().cloned().collect();
        for (fixture_name, group_name) in [("g1_5", "G1"), ("g2_4", "G2"), ("g3_4", "G3")] {
            let fixture = load_fixture(fixture_name).map_err(|e| e.to_string())?;
            let doc = fixture.apply(&bench).map_err(|e| e.to_string())?;
            let findings =
                acsizer::netlist::validate_constraints(&doc, &bench.baseline, &bias_set);
            if !findings.is_empty() {
                return Err(format!(
                    "{fixture_name}: constraint violations: {}",
                    findings
                        .iter()
                        .map(|f| format!("{}: {}", f.element, f.message))
                        .collect::<Vec<_>>()
                        .join("; ")
                ));
            }

            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let output = Command::new(env!("CARGO_BIN_EXE_acsizer"))
                .args([
                    "measure",
                    "--benchmark",
                    "opamp20t",
                    "--fixture",
                    fixture_name,
                    "--group",
                    group_name,
                    "--spice-bin",
                    env!("CARGO_BIN_EXE_minispice"),
                    "--workdir",
                ])
                .arg(dir.path())
                .output()
                .map_err(|e| e.to_string())?;
            if !output.status.success() {
                return Err(format!(
                    "{fixture_name}: measure exited with {:?}: {}",
                    output.status.code(),
                    String::from_utf8_lossy(&output.stderr)
                ));
            }
            let stdout = String::from_utf8_lossy(&output.stdout);
            if !stdout.lines().last().unwrap_or("").starts_with("report=") {
                return Err(format!(
                    "{fixture_name}: final stdout line is not machine-parseable: {stdout:?}"
                ));
            }
            let report: serde_json::Value = serde_json::from_str(
                &std::fs::read_to_string(dir.path().join("report.json"))
                    .map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            let values = report["values"]
                .as_object()
                .ok_or_else(|| format!("{fixture_name}: report has no values object"))?;
            if values.len() != 8 {
                return Err(format!(
                    "{fixture_name}: {} metrics reported, expected 8 ({})",
                    values.len(),
                    values.keys().cloned().collect::<Vec<_>>().join(", ")
                ));
            }
            let absent = report["absent"]
                .as_object()
                .ok_or_else(|| format!("{fixture_name}: report has no absent object"))?;
            if !absent.is_empty() {
                return Err(format!(
                    "{fixture_name}: metrics missing from the report: {}",
                    absent.keys().cloned().collect::<Vec<_>>().join(", ")
                ));
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// Criterion 7: perturbation statistics match the requested sigmas, sigma = 0
// is bit-identical to nominal, and a small sampled study runs end to end.
// ---------------------------------------------------------------------------

#[test]
fn variation_statistics() {
    criterion(7, "perturbation draws match requested spread", 60.0, || {
        let stats = draw_statistics(0.1, 0.01, 10_000, 42);
        if stats.n != 10_000 {
            return Err(format!("{} draws recorded, expected 10000", stats.n));
        }
        // Sample sigma of n=10^4 normal draws concentrates within ~1.4%
        // (3 / sqrt(2n)); 5% is the acceptance band.
        if (stats.bias_sigma - 0.1).abs() > 0.005 {
            return Err(format!(
                "bias spread {} outside 0.1 +/- 5%",
                stats.bias_sigma
            ));
        }
        if (stats.size_sigma - 0.01).abs() > 0.0005 {
            return Err(format!(
                "size spread {} outside 0.01 +/- 5%",
                stats.size_sigma
            ));
        }
        if stats.bias_mean.abs() > 0.005 || stats.size_mean.abs() > 0.0005 {
            return Err(format!(
                "draw means drifted: bias {}, size {}",
                stats.bias_mean, stats.size_mean
            ));
        }

        let bench = load_benchmark("opamp20t").map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let untouched = perturbed_doc(&bench.baseline, &bench.policy(), 0.0, 0.0, &mut rng)
            .map_err(|e| e.to_string())?;
        if serialize_netlist(&untouched) != serialize_netlist(&bench.baseline) {
            return Err("zero-sigma perturbation changed the netlist text".to_string());
        }

        let inverter = load_benchmark("inverter").map_err(|e| e.to_string())?;
        let group = inverter.default_targets().clone();
        let cfg = VariationConfig {
            sigma_bias_v: 0.05,
            sigma_size_rel: 0.01,
            samples: 2,
            seed: 5,
        };
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let summary = run_variation(
            &inverter,
            &inverter.baseline,
            &group,
            &cfg,
            &spice_config(),
            dir.path(),
        )
        .map_err(|e| e.to_string())?;
        if summary.samples_ok != 2 || !summary.failures.is_empty() {
            return Err(format!(
                "sampled study: {} ok, {} failures",
                summary.samples_ok,
                summary.failures.len()
            ));
        }
        let gain = summary
            .stats
            .get(&MetricKind::GainDb)
            .ok_or("sampled study reported no gain statistics")?;
        if gain.n != 2 {
            return Err(format!("gain statistics cover {} samples, expected 2", gain.n));
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// Criterion 8: a recorded proposal transcript replays into a byte-identical
// optimization outcome with no network access.
// ---------------------------------------------------------------------------

struct ScriptTransport {
    script: VecDeque<WireResponse>,
}

impl Transport for ScriptTransport {
    fn send(&mut self, _request: &WireRequest) -> Result<WireResponse, LlmError> {
        self.script.pop_front().ok_or(LlmError::TransportError {
            detail: "script exhausted".to_string(),
            retryable: false,
        })
    }

    fn requires_auth(&self) -> bool {
        false
    }
}

fn scripted_sizing_reply(call_id: &str, width_m: f64) -> WireResponse {
    let arguments = format!(
        r#"{{"assignments":[{{"target":"mn","param":"W","value":{width_m}}}],"rationale":"widen the pull-down device"}}"#
    );
    WireResponse {
        status: 200,
        body: serde_json::json!({
            "choices": [{"message": {
                "role": "assistant",
                "content": null,
                "tool_calls": [{
                    "id": call_id,
                    "type": "function",
                    "function": {"name": "apply_sizing", "arguments": arguments},
                }],
            }}],
            "usage": {"prompt_tokens": 120, "completion_tokens": 24},
        }),
    }
}

fn replay_provider_config() -> ProviderConfig {
    ProviderConfig {
        dialect: Dialect::OpenaiStyle,
        endpoint: "https://example.invalid/v1/chat".to_string(),
        model_id: "scripted-model".to_string(),
        api_key_env: "ACSIZER_ACCEPTANCE_NO_SUCH_KEY".to_string(),
        max_retries: 1,
        timeout_s: 5.0,
        rate_limit_per_min: 0,
        backoff_base_s: 0.0,
        backoff_cap_s: 1.0,
        max_tokens: 512,
    }
}

fn canonical_outcome(outcome: &OptimizationOutcome) -> String {
    let mut text = format!(
        "status={} iterations={}\n",
        outcome.status, outcome.iterations_used
    );
    text.push_str(&serialize_netlist(&outcome.final_netlist));
    for record in &outcome.history.records {
        text.push_str(&canonical_record_json(record));
        text.push('\n');
    }
    text
}

#[test]
fn transcript_replay_is_identical() {
    criterion(8, "recorded transcript replays byte-identically offline", 30.0, || {
        let bench = load_benchmark("inverter").map_err(|e| e.to_string())?;
        let group = never_passing_group(3);
        let policy = bench.policy();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let transcript = dir.path().join("transcript.jsonl");

        let drive = |client: Client| -> Result<OptimizationOutcome, String> {
            let mut engine = LlmProposalEngine::new(client);
            run_optimization(
                &bench.baseline,
                &group,
                &policy,
                &mut engine,
                &mut StubEvaluator { fail_at: None },
                &LoopOptions::default(),
            )
            .map_err(|e| e.to_string())
        };

        // Recording pass: proposals come from a local script; the recorder
        // wraps it and writes the transcript.
        let script = ScriptTransport {
            script: VecDeque::from(vec![
                scripted_sizing_reply("call_1", 2.0e-6),
                scripted_sizing_reply("call_2", 2.5e-6),
            ]),
        };
        let recorder = RecordingTransport::create(Box::new(script), &transcript)
            .map_err(|e| e.to_string())?;
        let recorded = drive(Client::with_transport(
            replay_provider_config(),
            Box::new(recorder),
        ))?;
        if recorded.status != OutcomeStatus::BudgetExhausted || recorded.iterations_used != 3 {
            return Err(format!(
                "recording pass: status {} after {} iterations, expected BUDGET_EXHAUSTED/3",
                recorded.status, recorded.iterations_used
            ));
        }
        let lines = std::fs::read_to_string(&transcript)
            .map_err(|e| e.to_string())?
            .lines()
            .count();
        if lines != 2 {
            return Err(format!("transcript holds {lines} exchanges, expected 2"));
        }

        // Replay pass: no script, no credentials, no network — the transcript
        // is the only source of proposals.
        let replay_client =
            Client::replaying(replay_provider_config(), &transcript).map_err(|e| e.to_string())?;
        if replay_client.is_network() {
            return Err("replay client claims to need the network".to_string());
        }
        let replayed = drive(replay_client)?;

        if canonical_outcome(&recorded) != canonical_outcome(&replayed) {
            return Err("replayed outcome differs from the recorded one".to_string());
        }
        let widths: Vec<f64> = replayed
            .history
            .records
            .iter()
            .skip(1)
            .map(|r| r.patch.assignments[0].value.magnitude)
            .collect();
        if widths != vec![2.0e-6, 2.5e-6] {
            return Err(format!("replayed patches carry widths {widths:?}"));
        }
        Ok(())
    });
}
