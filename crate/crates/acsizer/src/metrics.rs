//! Opamp metric extraction from simulation waveforms: DC gain, unity-gain
//! bandwidth, phase margin, quiescent power, CMRR, total harmonic
//! distortion, input-referred offset, and usable output range — plus report
//! assembly that records uncomputable metrics as absent-with-reason instead
//! of inventing numbers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::sim::{LoadCondition, SimResult, TbTopology, TestbenchTemplate, Waveform};

/// How many leading stimulus periods of a distortion record are treated as
/// settling and discarded.
pub const THD_SETTLE_PERIODS: usize = 6;
/// The distortion window spans exactly this many periods after settling.
pub const THD_WINDOW_PERIODS: usize = 8;
/// Distortion analysis resamples the window onto this many points.
pub const THD_FFT_POINTS: usize = 8192;
/// Harmonics 2..=5 enter the distortion ratio.
pub const THD_HARMONICS: usize = 5;
/// A DC transfer segment counts toward the output range while its
/// small-signal slope stays at or above this value.
pub const RANGE_SLOPE_MIN: f64 = 0.9;
/// Offset is measured with the input at mid-supply.
pub const OFFSET_PROBE_V: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("no unity crossing: {0}")]
    NoCrossing(String),
    #[error("missing branch current: {0}")]
    MissingBranch(String),
    #[error("record too short: {0}")]
    InsufficientRecord(String),
    #[error("no output segment tracks the input: {0}")]
    EmptyRange(String),
    #[error("required simulations missing for: {}", format_kinds(.0))]
    IncompleteInputs(Vec<MetricKind>),
    #[error("waveform '{0}' not in simulation output")]
    MissingWave(String),
}

fn format_kinds(kinds: &[MetricKind]) -> String {
    kinds
        .iter()
        .map(|k| k.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// The eight measured quantities.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    GainDb,
    UgbwHz,
    PmDeg,
    PowerW,
    CmrrDb,
    ThdDb,
    OffsetV,
    OutputRangeV,
}

impl MetricKind {
    pub const ALL: [MetricKind; 8] = [
        MetricKind::GainDb,
        MetricKind::UgbwHz,
        MetricKind::PmDeg,
        MetricKind::PowerW,
        MetricKind::CmrrDb,
        MetricKind::ThdDb,
        MetricKind::OffsetV,
        MetricKind::OutputRangeV,
    ];

    pub fn unit(self) -> &'static str {
        match self {
            MetricKind::GainDb | MetricKind::CmrrDb | MetricKind::ThdDb => "dB",
            MetricKind::UgbwHz => "Hz",
            MetricKind::PmDeg => "deg",
            MetricKind::PowerW => "W",
            MetricKind::OffsetV | MetricKind::OutputRangeV => "V",
        }
    }

    /// Human-readable name for prompts and reports.
    pub fn label(self) -> &'static str {
        match self {
            MetricKind::GainDb => "DC gain",
            MetricKind::UgbwHz => "unity-gain bandwidth",
            MetricKind::PmDeg => "phase margin",
            MetricKind::PowerW => "quiescent power",
            MetricKind::CmrrDb => "common-mode rejection ratio",
            MetricKind::ThdDb => "total harmonic distortion",
            MetricKind::OffsetV => "input-referred offset",
            MetricKind::OutputRangeV => "output voltage range",
        }
    }

    pub fn parse(s: &str) -> Option<MetricKind> {
        match s.to_ascii_lowercase().as_str() {
            "gain_db" | "gain" => Some(MetricKind::GainDb),
            "ugbw_hz" | "ugbw" => Some(MetricKind::UgbwHz),
            "pm_deg" | "pm" => Some(MetricKind::PmDeg),
            "power_w" | "power" => Some(MetricKind::PowerW),
            "cmrr_db" | "cmrr" => Some(MetricKind::CmrrDb),
            "thd_db" | "thd" => Some(MetricKind::ThdDb),
            "offset_v" | "offset" => Some(MetricKind::OffsetV),
            "output_range_v" | "range" => Some(MetricKind::OutputRangeV),
            _ => None,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MetricKind::GainDb => "gain_db",
            MetricKind::UgbwHz => "ugbw_hz",
            MetricKind::PmDeg => "pm_deg",
            MetricKind::PowerW => "power_w",
            MetricKind::CmrrDb => "cmrr_db",
            MetricKind::ThdDb => "thd_db",
            MetricKind::OffsetV => "offset_v",
            MetricKind::OutputRangeV => "output_range_v",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: f64,
}

impl MetricValue {
    pub fn new(kind: MetricKind, value: f64) -> MetricValue {
        MetricValue { kind, value }
    }

    pub fn unit(&self) -> &'static str {
        self.kind.unit()
    }
}

/// Measured values for one design point, with uncomputable metrics listed
/// under `absent` together with the reason extraction failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub design_point_id: String,
    pub load: LoadCondition,
    pub values: BTreeMap<MetricKind, MetricValue>,
    pub absent: BTreeMap<MetricKind, String>,
}

impl MetricReport {
    pub fn get(&self, kind: MetricKind) -> Option<f64> {
        self.values.get(&kind).map(|m| m.value)
    }
}

fn complex_series<'a>(wave: &'a Waveform, what: &str) -> Result<&'a [Complex64], MetricError> {
    wave.complex().ok_or_else(|| {
        MetricError::DegenerateInput(format!("{what} needs a complex (AC) waveform"))
    })
}

fn real_series<'a>(wave: &'a Waveform, what: &str) -> Result<&'a [f64], MetricError> {
    wave.real()
        .ok_or_else(|| MetricError::DegenerateInput(format!("{what} needs a real waveform")))
}

/// Low-frequency gain in dB: `20*log10(|H|)` at the first sweep point.
pub fn dc_gain(ac: &Waveform) -> Result<f64, MetricError> {
    let h = complex_series(ac, "dc_gain")?;
    let first = h
        .first()
        .ok_or_else(|| MetricError::DegenerateInput("empty AC sweep".to_string()))?;
    let mag = first.norm();
    if mag == 0.0 {
        return Err(MetricError::DegenerateInput(
            "zero transfer magnitude at the lowest frequency".to_string(),
        ));
    }
    Ok(20.0 * mag.log10())
}

fn mag_db(h: &[Complex64]) -> Vec<f64> {
    h.iter().map(|c| 20.0 * c.norm().log10()).collect()
}

/// Frequency of the first downward 0 dB crossing, interpolated linearly in
/// (log10 frequency, dB) coordinates.
pub fn unity_gain_bandwidth(ac: &Waveform) -> Result<f64, MetricError> {
    let h = complex_series(ac, "unity_gain_bandwidth")?;
    if h.len() < 2 {
        return Err(MetricError::DegenerateInput(
            "AC sweep needs at least two points".to_string(),
        ));
    }
    let db = mag_db(h);
    if db[0] <= 0.0 {
        return Err(MetricError::NoCrossing(format!(
            "gain is already {:.2} dB at {:.3e} Hz",
            db[0], ac.sweep[0]
        )));
    }
    for k in 0..db.len() - 1 {
        if db[k] >= 0.0 && db[k + 1] < 0.0 {
            let lf0 = ac.sweep[k].log10();
            let lf1 = ac.sweep[k + 1].log10();
            let t = db[k] / (db[k] - db[k + 1]);
            return Ok(10f64.powf(lf0 + t * (lf1 - lf0)));
        }
    }
    Err(MetricError::NoCrossing(format!(
        "gain never falls to unity within the sweep (ends at {:.2} dB)",
        db[db.len() - 1]
    )))
}

/// Unwrapped phase in radians, referenced so the lowest-frequency point sits
/// near zero: the reference is the first point's phase rounded to the nearest
/// half turn. Snapping (rather than subtracting the raw first phase) keeps an
/// inverted measurement well-defined without hiding genuine low-frequency lag.
fn unwrapped_phase(h: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.len());
    let mut offset = 0.0;
    let mut prev = h[0].arg();
    let base = (prev / std::f64::consts::PI).round() * std::f64::consts::PI;
    out.push(prev - base);
    for c in &h[1..] {
        let raw = c.arg();
        let mut d = raw - prev;
        while d > std::f64::consts::PI {
            d -= 2.0 * std::f64::consts::PI;
            offset -= 2.0 * std::f64::consts::PI;
        }
        while d < -std::f64::consts::PI {
            d += 2.0 * std::f64::consts::PI;
            offset += 2.0 * std::f64::consts::PI;
        }
        prev = raw;
        out.push(raw + offset - base);
    }
    out
}

/// Phase margin in degrees: `180 + phase(f_ugbw)` with phase unwrapped,
/// referenced near zero at the lowest frequency, and interpolated on log10 f.
pub fn phase_margin(ac: &Waveform) -> Result<f64, MetricError> {
    let f_u = unity_gain_bandwidth(ac)?;
    let h = complex_series(ac, "phase_margin")?;
    let phase = unwrapped_phase(h);
    let lf_u = f_u.log10();
    let mut k = 0;
    while k + 2 < ac.sweep.len() && ac.sweep[k + 1].log10() < lf_u {
        k += 1;
    }
    let lf0 = ac.sweep[k].log10();
    let lf1 = ac.sweep[k + 1].log10();
    let t = ((lf_u - lf0) / (lf1 - lf0)).clamp(0.0, 1.0);
    let phi = phase[k] + t * (phase[k + 1] - phase[k]);
    Ok(180.0 + phi.to_degrees())
}

/// Quiescent power: supply voltage times the magnitude of the supply branch
/// current at the operating point.
pub fn quiescent_power(
    op_point: &BTreeMap<String, f64>,
    supply_source: &str,
    supply_v: f64,
) -> Result<f64, MetricError> {
    let key = format!("i({supply_source})");
    let current = op_point
        .get(&key)
        .ok_or_else(|| MetricError::MissingBranch(key.clone()))?;
    Ok(supply_v * current.abs())
}

/// Common-mode rejection: differential gain over common-mode gain at the
/// lowest frequency, in dB. A zero common-mode response yields `+inf`,
/// which report assembly records as beyond the measurable range.
pub fn cmrr(ac_diff: &Waveform, ac_cm: &Waveform) -> Result<f64, MetricError> {
    let hd = complex_series(ac_diff, "cmrr")?;
    let hc = complex_series(ac_cm, "cmrr")?;
    let (Some(d), Some(c)) = (hd.first(), hc.first()) else {
        return Err(MetricError::DegenerateInput("empty AC sweep".to_string()));
    };
    let dm = d.norm();
    let cm = c.norm();
    if dm == 0.0 {
        return Err(MetricError::DegenerateInput(
            "zero differential gain".to_string(),
        ));
    }
    if cm == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (dm / cm).log10())
}

/// Total harmonic distortion of a settled sine response, in dB.
///
/// The first [`THD_SETTLE_PERIODS`] periods are discarded, the next
/// [`THD_WINDOW_PERIODS`] are resampled onto a uniform [`THD_FFT_POINTS`]
/// grid (an integer number of periods, so no window function is needed),
/// and the result is `20*log10(sqrt(sum harmonic powers)/fundamental)` over
/// harmonics `2..=n_harmonics`.
pub fn thd(tran: &Waveform, f0: f64, n_harmonics: usize) -> Result<f64, MetricError> {
    let v = real_series(tran, "thd")?;
    let t = &tran.sweep;
    if t.len() < 16 {
        return Err(MetricError::InsufficientRecord(format!(
            "{} samples",
            t.len()
        )));
    }
    let period = 1.0 / f0;
    let duration = t[t.len() - 1] - t[0];
    let total_periods = (duration / period + 1e-9).floor() as usize;
    let clean = total_periods.saturating_sub(THD_SETTLE_PERIODS);
    if clean < 10 {
        return Err(MetricError::InsufficientRecord(format!(
            "{total_periods} periods recorded; need {} settling plus 10 clean",
            THD_SETTLE_PERIODS
        )));
    }

    // Resample the analysis window by linear interpolation.
    let t0 = t[0] + THD_SETTLE_PERIODS as f64 * period;
    let dt = THD_WINDOW_PERIODS as f64 * period / THD_FFT_POINTS as f64;
    let mut buf: Vec<Complex64> = Vec::with_capacity(THD_FFT_POINTS);
    let mut cursor = 0usize;
    for j in 0..THD_FFT_POINTS {
        let tj = t0 + j as f64 * dt;
        while cursor + 2 < t.len() && t[cursor + 1] < tj {
            cursor += 1;
        }
        let (ta, tb) = (t[cursor], t[cursor + 1]);
        let (va, vb) = (v[cursor], v[cursor + 1]);
        let frac = if tb > ta { (tj - ta) / (tb - ta) } else { 0.0 };
        buf.push(Complex64::new(va + frac.clamp(0.0, 1.0) * (vb - va), 0.0));
    }

    FftPlanner::new().plan_fft_forward(THD_FFT_POINTS).process(&mut buf);
    let bin = |k: usize| buf[k * THD_WINDOW_PERIODS].norm();
    let fundamental = bin(1);
    if fundamental == 0.0 {
        return Err(MetricError::DegenerateInput(
            "no fundamental component in the record".to_string(),
        ));
    }
    let mut harmonic_power = 0.0;
    for k in 2..=n_harmonics {
        harmonic_power += bin(k) * bin(k);
    }
    Ok(20.0 * (harmonic_power.sqrt() / fundamental).log10())
}

fn interpolate_at(sweep: &[f64], values: &[f64], x: f64) -> Option<f64> {
    if sweep.len() < 2 {
        return None;
    }
    let ascending = sweep[1] > sweep[0];
    for k in 0..sweep.len() - 1 {
        let (a, b) = (sweep[k], sweep[k + 1]);
        let inside = if ascending { a <= x && x <= b } else { b <= x && x <= a };
        if inside {
            let t = if b != a { (x - a) / (b - a) } else { 0.0 };
            return Some(values[k] + t * (values[k + 1] - values[k]));
        }
    }
    None
}

/// Input-referred offset from a unity-gain DC transfer sweep: the distance
/// between output and input with the input at [`OFFSET_PROBE_V`].
pub fn input_offset(dc: &Waveform) -> Result<f64, MetricError> {
    let v = real_series(dc, "input_offset")?;
    let vout = interpolate_at(&dc.sweep, v, OFFSET_PROBE_V).ok_or_else(|| {
        MetricError::DegenerateInput(format!(
            "sweep does not cover the {OFFSET_PROBE_V} V probe point"
        ))
    })?;
    Ok((vout - OFFSET_PROBE_V).abs())
}

/// Usable output range from a unity-gain DC transfer sweep: the output span
/// over the widest contiguous input interval whose slope (central
/// differences) stays at or above [`RANGE_SLOPE_MIN`].
pub fn output_range(dc: &Waveform) -> Result<f64, MetricError> {
    let v = real_series(dc, "output_range")?;
    let x = &dc.sweep;
    let n = x.len();
    if n < 3 {
        return Err(MetricError::DegenerateInput(
            "DC sweep needs at least three points".to_string(),
        ));
    }
    let slope = |i: usize| -> f64 {
        if i == 0 {
            (v[1] - v[0]) / (x[1] - x[0])
        } else if i == n - 1 {
            (v[n - 1] - v[n - 2]) / (x[n - 1] - x[n - 2])
        } else {
            (v[i + 1] - v[i - 1]) / (x[i + 1] - x[i - 1])
        }
    };
    let mut best: Option<(usize, usize)> = None;
    let mut run_start: Option<usize> = None;
    for i in 0..=n {
        let tracking = i < n && slope(i) >= RANGE_SLOPE_MIN;
        match (tracking, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                let candidate = (s, i - 1);
                let width = x[candidate.1] - x[candidate.0];
                if best.map_or(true, |(bs, be)| width > x[be] - x[bs]) {
                    best = Some(candidate);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    let Some((s, e)) = best else {
        return Err(MetricError::EmptyRange(format!(
            "slope never reaches {RANGE_SLOPE_MIN}"
        )));
    };
    let seg = &v[s..=e];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &y in seg {
        lo = lo.min(y);
        hi = hi.max(y);
    }
    Ok(hi - lo)
}

/// Everything report assembly needs besides the simulation results.
pub struct ReportContext<'a> {
    pub template: &'a TestbenchTemplate,
    pub supply_v: f64,
    pub load: LoadCondition,
    pub design_point_id: String,
}

fn find_result<'a>(
    results: &'a [SimResult],
    want_kind: &str,
    want_topology: Option<TbTopology>,
) -> Option<&'a SimResult> {
    results.iter().find(|r| {
        r.analysis.kind_name() == want_kind
            && want_topology.map_or(true, |t| r.testbench.topology == t)
    })
}

/// Build a [`MetricReport`] for `wanted` from a batch of simulation results.
///
/// Fails with [`MetricError::IncompleteInputs`] when an analysis a wanted
/// metric depends on is missing from `results`; an extraction that fails on
/// data that is present records the metric as absent with the reason.
pub fn assemble_report(
    results: &[SimResult],
    wanted: &BTreeSet<MetricKind>,
    ctx: &ReportContext,
) -> Result<MetricReport, MetricError> {
    let out_key = format!("v({})", ctx.template.output);
    let ac_dm = find_result(results, "AC", Some(TbTopology::OpenLoop))
        .or_else(|| find_result(results, "AC", Some(TbTopology::DiffDrive)));
    let ac_cm = find_result(results, "AC", Some(TbTopology::CmDrive));
    let op = find_result(results, "OP", None);
    let dc = find_result(results, "DC_SWEEP", None);
    let tran = find_result(results, "TRAN", None);

    let mut missing = Vec::new();
    for kind in wanted {
        let satisfied = match kind {
            MetricKind::GainDb | MetricKind::UgbwHz | MetricKind::PmDeg => ac_dm.is_some(),
            MetricKind::CmrrDb => ac_dm.is_some() && ac_cm.is_some(),
            MetricKind::PowerW => op.is_some(),
            MetricKind::OffsetV | MetricKind::OutputRangeV => dc.is_some(),
            MetricKind::ThdDb => tran.is_some(),
        };
        if !satisfied {
            missing.push(*kind);
        }
    }
    if !missing.is_empty() {
        return Err(MetricError::IncompleteInputs(missing));
    }

    let mut report = MetricReport {
        design_point_id: ctx.design_point_id.clone(),
        load: ctx.load,
        values: BTreeMap::new(),
        absent: BTreeMap::new(),
    };
    let wave = |r: &SimResult| -> Result<Waveform, MetricError> {
        r.waveforms
            .get(&out_key)
            .cloned()
            .ok_or_else(|| MetricError::MissingWave(out_key.clone()))
    };
    let put = |report: &mut MetricReport, kind: MetricKind, r: Result<f64, MetricError>| {
        match r {
            Ok(value) if value.is_finite() => {
                report.values.insert(kind, MetricValue::new(kind, value));
            }
            Ok(_) => {
                report
                    .absent
                    .insert(kind, "exceeds measurable range".to_string());
            }
            Err(e) => {
                report.absent.insert(kind, e.to_string());
            }
        }
    };

    for kind in wanted {
        match kind {
            MetricKind::GainDb => {
                let r = wave(ac_dm.unwrap()).and_then(|w| dc_gain(&w));
                put(&mut report, *kind, r);
            }
            MetricKind::UgbwHz => {
                let r = wave(ac_dm.unwrap()).and_then(|w| unity_gain_bandwidth(&w));
                put(&mut report, *kind, r);
            }
            MetricKind::PmDeg => {
                let r = wave(ac_dm.unwrap()).and_then(|w| phase_margin(&w));
                put(&mut report, *kind, r);
            }
            MetricKind::PowerW => {
                let r = quiescent_power(
                    &op.unwrap().op_point,
                    &ctx.template.supply_source,
                    ctx.supply_v,
                );
                put(&mut report, *kind, r);
            }
            MetricKind::CmrrDb => {
                let r = wave(ac_dm.unwrap())
                    .and_then(|d| wave(ac_cm.unwrap()).map(|c| (d, c)))
                    .and_then(|(d, c)| cmrr(&d, &c));
                put(&mut report, *kind, r);
            }
            MetricKind::ThdDb => {
                let f0 = tran
                    .unwrap()
                    .testbench
                    .stimulus
                    .map(|s| s.freq_hz)
                    .unwrap_or(crate::sim::THD_FREQ_HZ);
                let r = wave(tran.unwrap()).and_then(|w| thd(&w, f0, THD_HARMONICS));
                put(&mut report, *kind, r);
            }
            MetricKind::OffsetV => {
                let r = wave(dc.unwrap()).and_then(|w| input_offset(&w));
                put(&mut report, *kind, r);
            }
            MetricKind::OutputRangeV => {
                let r = wave(dc.unwrap()).and_then(|w| output_range(&w));
                put(&mut report, *kind, r);
            }
        }
    }
    Ok(report)
}

/// Synthetic single-pole response `A0 / (1 + j f/fp)` on a log grid — shared
/// by unit tests and the acceptance fixtures.
pub fn single_pole_response(
    a0: f64,
    pole_hz: f64,
    fstart: f64,
    fstop: f64,
    points_per_decade: usize,
) -> Waveform {
    let mut sweep = Vec::new();
    let mut values = Vec::new();
    let decades = (fstop / fstart).log10();
    let n = (decades * points_per_decade as f64).ceil() as usize;
    for k in 0..=n {
        let f = (fstart * 10f64.powf(k as f64 / points_per_decade as f64)).min(fstop);
        sweep.push(f);
        values.push(Complex64::new(a0, 0.0) / Complex64::new(1.0, f / pole_hz));
        if f >= fstop {
            break;
        }
    }
    Waveform {
        name: "v(out)".to_string(),
        sweep,
        values: crate::sim::WaveValues::Complex(values),
    }
}
