//! Performance targets and pass/fail checking with tolerance relaxation:
//! every bound is loosened by a fraction of its own magnitude (5% by
//! default) before a measurement is judged, and margins are signed so that
//! positive always means passing.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::metrics::{MetricKind, MetricReport};
use crate::sim::LoadCondition;

/// Default relative tolerance applied to every target bound.
pub const DEFAULT_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtLeast,
    AtMost,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::AtLeast => write!(f, ">="),
            Direction::AtMost => write!(f, "<="),
        }
    }
}

/// One required bound on one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: MetricKind,
    pub direction: Direction,
    pub value: f64,
    /// Relative tolerance; the accepted bound moves this fraction of
    /// `|value|` in the permissive direction.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

impl TargetSpec {
    pub fn new(kind: MetricKind, direction: Direction, value: f64) -> TargetSpec {
        TargetSpec {
            kind,
            direction,
            value,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// The bound actually enforced: the nominal value relaxed by the tolerance
/// in the permissive direction.
pub fn relaxed_bound(spec: &TargetSpec) -> f64 {
    let slack = spec.tolerance * spec.value.abs();
    match spec.direction {
        Direction::AtLeast => spec.value - slack,
        Direction::AtMost => spec.value + slack,
    }
}

/// Outcome of checking one measurement against one target. `margin` is the
/// signed distance to the relaxed bound in the metric's own unit; positive
/// passes. An absent measurement fails with `margin = None` and carries the
/// absence reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCheck {
    pub kind: MetricKind,
    pub target: TargetSpec,
    pub relaxed_bound: f64,
    pub value: Option<f64>,
    pub margin: Option<f64>,
    pub pass: bool,
    pub absent_reason: Option<String>,
}

/// Judge one measured value against one target.
pub fn check_metric(value: f64, spec: &TargetSpec) -> MetricCheck {
    let bound = relaxed_bound(spec);
    let margin = match spec.direction {
        Direction::AtLeast => value - bound,
        Direction::AtMost => bound - value,
    };
    MetricCheck {
        kind: spec.kind,
        target: *spec,
        relaxed_bound: bound,
        value: Some(value),
        margin: Some(margin),
        pass: margin >= 0.0,
        absent_reason: None,
    }
}

/// A named set of targets with the measurement conditions they assume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetGroup {
    pub name: String,
    pub supply_v: f64,
    pub load: LoadCondition,
    pub max_iterations: usize,
    pub targets: Vec<TargetSpec>,
}

impl TargetGroup {
    pub fn target_for(&self, kind: MetricKind) -> Option<&TargetSpec> {
        self.targets.iter().find(|t| t.kind == kind)
    }

    pub fn metric_kinds(&self) -> std::collections::BTreeSet<MetricKind> {
        self.targets.iter().map(|t| t.kind).collect()
    }
}

/// Result of checking a whole report against a group: one entry per target
/// in group order. The report passes only when every target passes — a
/// missing metric can never pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub group: String,
    pub checks: Vec<MetricCheck>,
    pub overall_pass: bool,
}

impl CheckResult {
    pub fn check_for(&self, kind: MetricKind) -> Option<&MetricCheck> {
        self.checks.iter().find(|c| c.kind == kind)
    }

    pub fn failing(&self) -> impl Iterator<Item = &MetricCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

/// Check every target in `group` against `report`.
pub fn check_all(report: &MetricReport, group: &TargetGroup) -> CheckResult {
    let mut checks = Vec::with_capacity(group.targets.len());
    for spec in &group.targets {
        match report.get(spec.kind) {
            Some(value) => checks.push(check_metric(value, spec)),
            None => checks.push(MetricCheck {
                kind: spec.kind,
                target: *spec,
                relaxed_bound: relaxed_bound(spec),
                value: None,
                margin: None,
                pass: false,
                absent_reason: Some(
                    report
                        .absent
                        .get(&spec.kind)
                        .cloned()
                        .unwrap_or_else(|| "not measured".to_string()),
                ),
            }),
        }
    }
    let overall_pass = checks.iter().all(|c| c.pass);
    CheckResult {
        group: group.name.clone(),
        checks,
        overall_pass,
    }
}

fn group(
    name: &str,
    load: LoadCondition,
    targets: Vec<(MetricKind, Direction, f64)>,
) -> TargetGroup {
    TargetGroup {
        name: name.to_string(),
        supply_v: 1.8,
        load,
        max_iterations: 25,
        targets: targets
            .into_iter()
            .map(|(kind, direction, value)| TargetSpec::new(kind, direction, value))
            .collect(),
    }
}

/// The three built-in target groups. Values are pinned here; tests guard
/// them against drift.
pub fn builtin_groups() -> Vec<TargetGroup> {
    use Direction::{AtLeast, AtMost};
    use MetricKind::*;
    vec![
        group(
            "G1",
            LoadCondition { cl: 10e-12, rl: 1e3 },
            vec![
                (GainDb, AtLeast, 65.0),
                (UgbwHz, AtLeast, 10e6),
                (PmDeg, AtLeast, 55.0),
                (PowerW, AtMost, 10e-3),
                (CmrrDb, AtLeast, 100.0),
                (ThdDb, AtMost, -26.0),
                (OffsetV, AtMost, 1e-3),
                (OutputRangeV, AtLeast, 1.75),
            ],
        ),
        group(
            "G2",
            LoadCondition { cl: 50e-12, rl: 100e3 },
            vec![
                (GainDb, AtLeast, 65.0),
                (UgbwHz, AtLeast, 5e6),
                (PmDeg, AtLeast, 45.0),
                (PowerW, AtMost, 5e-3),
                (CmrrDb, AtLeast, 100.0),
                (ThdDb, AtMost, -26.0),
                (OffsetV, AtMost, 1e-3),
                (OutputRangeV, AtLeast, 1.75),
            ],
        ),
        group(
            "G3",
            LoadCondition { cl: 10e-12, rl: 1e3 },
            vec![
                (GainDb, AtLeast, 65.0),
                (UgbwHz, AtLeast, 50e6),
                (PmDeg, AtLeast, 55.0),
                (PowerW, AtMost, 50e-3),
                (CmrrDb, AtLeast, 100.0),
                (ThdDb, AtMost, -26.0),
                (OffsetV, AtMost, 5e-3),
                (OutputRangeV, AtLeast, 1.7),
            ],
        ),
    ]
}

pub fn group_by_name(name: &str) -> Option<TargetGroup> {
    builtin_groups()
        .into_iter()
        .find(|g| g.name.eq_ignore_ascii_case(name))
}

/// Load a target group from a TOML file (same shape as the built-ins).
pub fn load_group_file(path: &std::path::Path) -> Result<TargetGroup, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("bad target group {}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report(values: &[(MetricKind, f64)]) -> MetricReport {
        MetricReport {
            design_point_id: "test".to_string(),
            load: LoadCondition { cl: 10e-12, rl: 1e3 },
            values: values
                .iter()
                .map(|&(k, v)| (k, crate::metrics::MetricValue::new(k, v)))
                .collect(),
            absent: BTreeMap::new(),
        }
    }

    #[test]
    fn relaxation_moves_bounds_the_permissive_way() {
        let gain = TargetSpec::new(MetricKind::GainDb, Direction::AtLeast, 65.0);
        assert!((relaxed_bound(&gain) - 61.75).abs() < 1e-12);
        let power = TargetSpec::new(MetricKind::PowerW, Direction::AtMost, 10e-3);
        assert!((relaxed_bound(&power) - 10.5e-3).abs() < 1e-15);
        // Negative-valued bound: distortion limit loosens upward by 5% of
        // its magnitude.
        let thd = TargetSpec::new(MetricKind::ThdDb, Direction::AtMost, -26.0);
        assert!((relaxed_bound(&thd) - -24.7).abs() < 1e-12);
    }

    #[test]
    fn margins_are_signed_with_positive_meaning_pass() {
        let spec = TargetSpec::new(MetricKind::PmDeg, Direction::AtLeast, 55.0);
        let pass = check_metric(53.0, &spec);
        assert!(pass.pass);
        assert!((pass.margin.unwrap() - 0.75).abs() < 1e-12);
        let fail = check_metric(51.0, &spec);
        assert!(!fail.pass);
        assert!(fail.margin.unwrap() < 0.0);
    }

    #[test]
    fn zero_tolerance_reduces_to_the_strict_bound() {
        let mut spec = TargetSpec::new(MetricKind::GainDb, Direction::AtLeast, 65.0);
        spec.tolerance = 0.0;
        assert_eq!(relaxed_bound(&spec), 65.0);
        assert!(!check_metric(64.999, &spec).pass);
        assert!(check_metric(65.0, &spec).pass);
    }

    #[test]
    fn missing_metrics_fail_the_whole_group() {
        let g1 = group_by_name("G1").unwrap();
        // All eight present and generous except CMRR which is missing.
        let r = report(&[
            (MetricKind::GainDb, 80.0),
            (MetricKind::UgbwHz, 50e6),
            (MetricKind::PmDeg, 80.0),
            (MetricKind::PowerW, 1e-3),
            (MetricKind::ThdDb, -40.0),
            (MetricKind::OffsetV, 1e-4),
            (MetricKind::OutputRangeV, 1.79),
        ]);
        let result = check_all(&r, &g1);
        assert!(!result.overall_pass);
        let cmrr = result.check_for(MetricKind::CmrrDb).unwrap();
        assert!(!cmrr.pass);
        assert!(cmrr.value.is_none());
        assert!(cmrr.absent_reason.is_some());
    }

    #[test]
    fn builtin_groups_are_pinned() {
        let groups = builtin_groups();
        assert_eq!(groups.len(), 3);
        let g2 = &groups[1];
        assert_eq!(g2.name, "G2");
        assert_eq!(g2.load.cl, 50e-12);
        assert_eq!(g2.load.rl, 100e3);
        assert_eq!(
            g2.target_for(MetricKind::UgbwHz).unwrap().value,
            5e6
        );
        assert_eq!(g2.target_for(MetricKind::PmDeg).unwrap().value, 45.0);
        assert_eq!(g2.target_for(MetricKind::PowerW).unwrap().value, 5e-3);
        let g3 = &groups[2];
        assert_eq!(g3.target_for(MetricKind::UgbwHz).unwrap().value, 50e6);
        assert_eq!(g3.target_for(MetricKind::OffsetV).unwrap().value, 5e-3);
        assert_eq!(g3.target_for(MetricKind::OutputRangeV).unwrap().value, 1.7);
        assert_eq!(g3.target_for(MetricKind::PowerW).unwrap().value, 50e-3);
        for g in &groups {
            assert_eq!(g.max_iterations, 25);
            assert_eq!(g.supply_v, 1.8);
            assert_eq!(g.targets.len(), 8);
            assert!(g.targets.iter().all(|t| t.tolerance == 0.05));
        }
    }
}
