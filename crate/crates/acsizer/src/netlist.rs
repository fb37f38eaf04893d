//! Netlist document model: parse SPICE decks into an editable structure,
//! serialize them back, and expose the tunable sizing surface (MOSFET W/L
//! and bias-source DC values) with bounds and group coherence.
//!
//! The parser covers the card types the sizing flow touches (R/C/L, V/I,
//! E/G, MOSFETs); control lines, model cards, includes, and comments pass
//! through verbatim so a round trip preserves everything the engine needs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Default width bounds in meters.
pub const W_BOUNDS: (f64, f64) = (0.4e-6, 1000e-6);
/// Default length bounds in meters.
pub const L_BOUNDS: (f64, f64) = (0.18e-6, 10e-6);
/// Default bias-voltage bounds in volts.
pub const BIAS_BOUNDS: (f64, f64) = (0.0, 1.8);

#[derive(Debug, thiserror::Error)]
pub enum NetlistError {
    #[error("syntax error, line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown element '{0}'")]
    UnknownElement(String),
    #[error("element '{element}' carries no {param} parameter")]
    MissingParam { element: String, param: String },
    #[error("size group '{0}' members disagree: {1}")]
    InconsistentGroup(String, String),
    #[error("{target}.{param} = {value:e} outside [{lo:e}, {hi:e}]")]
    OutOfBounds {
        target: String,
        param: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
}

/// A numeric field as it appeared in the source: SI magnitude plus the
/// original text, so edits can keep the author's suffix style (`53u` stays
/// micron-styled instead of turning into `5.3e-5`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawValue {
    pub magnitude: f64,
    pub text: String,
}

impl RawValue {
    pub fn parse(text: &str) -> Option<RawValue> {
        minispice::parse_value(text).map(|magnitude| RawValue {
            magnitude,
            text: text.to_string(),
        })
    }

    /// A new value rendered in the same suffix style as `self`.
    pub fn restyled(&self, magnitude: f64) -> RawValue {
        let (suffix, scale) = style_suffix(&self.text);
        let text = format!("{}{}", fmt_sig(magnitude / scale), suffix);
        // Reparse so the stored magnitude is exactly what a round trip
        // through text yields; keeps parse(serialize(doc)) == doc.
        RawValue {
            magnitude: minispice::parse_value(&text).unwrap_or(magnitude),
            text,
        }
    }
}

/// Trailing scale suffix of a value literal, if it is one the SPICE number
/// grammar recognizes. Returns the suffix text and its scale factor.
fn style_suffix(text: &str) -> (&'static str, f64) {
    let trailing: String = text
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    let t = trailing.to_ascii_lowercase();
    for (suffix, scale) in [
        ("meg", 1e6),
        ("mil", 25.4e-6),
        ("t", 1e12),
        ("g", 1e9),
        ("k", 1e3),
        ("m", 1e-3),
        ("u", 1e-6),
        ("n", 1e-9),
        ("p", 1e-12),
        ("f", 1e-15),
    ] {
        if t == suffix {
            return (suffix, scale);
        }
    }
    ("", 1.0)
}

/// Round to nine significant digits and print the shortest representation,
/// so styled rewrites stay readable (`42.4` rather than a 17-digit tail).
fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    format!("{rounded}")
}

/// Measurement units for tunable values and patch assignments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Meter,
    Volt,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Meter => write!(f, "m"),
            Unit::Volt => write!(f, "V"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalValue {
    pub magnitude: f64,
    pub unit: Unit,
}

impl PhysicalValue {
    pub fn meters(magnitude: f64) -> Self {
        PhysicalValue {
            magnitude,
            unit: Unit::Meter,
        }
    }

    pub fn volts(magnitude: f64) -> Self {
        PhysicalValue {
            magnitude,
            unit: Unit::Volt,
        }
    }
}

impl fmt::Display for PhysicalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.unit {
            Unit::Meter => write!(f, "{} um", fmt_sig(self.magnitude / 1e-6)),
            Unit::Volt => write!(f, "{} V", fmt_sig(self.magnitude)),
        }
    }
}

/// One element card. Names, nodes, and model references are canonical
/// lowercase; numeric fields keep their source style in [`RawValue`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementCard {
    pub name: String,
    /// Element class letter: r, c, l, v, i, e, g, m.
    pub kind: char,
    pub nodes: Vec<String>,
    pub model_ref: Option<String>,
    /// Named parameters in source order (`w`/`l` on MOSFETs, `dc` on sources).
    pub params: Vec<(String, RawValue)>,
    /// Positional component value for R/C/L/E/G cards.
    pub value: Option<RawValue>,
    /// Verbatim remainder (waveform specs such as `SIN(...)`, AC terms).
    pub tail: Option<String>,
}

impl ElementCard {
    pub fn param(&self, key: &str) -> Option<&RawValue> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
    }

    pub fn set_param(&mut self, key: &str, value: RawValue) {
        if let Some(slot) = self.params.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.params.push((key.to_string(), value));
        }
    }
}

/// Parsed netlist: title, element cards, and verbatim control/comment lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetlistDoc {
    pub title: String,
    pub elements: Vec<ElementCard>,
    /// Control lines, model cards, includes, and comments in source order.
    pub directives: Vec<String>,
    /// SHA-256 hex digest of the source text this document was parsed from.
    pub source_text_hash: String,
}

impl NetlistDoc {
    pub fn element(&self, name: &str) -> Option<&ElementCard> {
        self.elements.iter().find(|e| e.name == name)
    }

    fn element_mut(&mut self, name: &str) -> Option<&mut ElementCard> {
        self.elements.iter_mut().find(|e| e.name == name)
    }
}

/// Parse a SPICE deck into an editable document.
///
/// The first line is the title. `+` continuations are folded, `*` comment
/// lines and unrecognized control lines are preserved verbatim, and a
/// trailing `.end` is dropped (serialization always re-adds one).
pub fn parse_netlist(text: &str) -> Result<NetlistDoc, NetlistError> {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let source_text_hash = format!("{:x}", hasher.finalize());

    let mut lines = text.lines().enumerate();
    let title = lines.next().map(|(_, l)| l.trim_end()).unwrap_or("");

    // Fold continuation lines, remembering the first physical line number.
    let mut logical: Vec<(usize, String)> = Vec::new();
    for (idx, raw) in lines {
        let line = strip_inline_comment(raw);
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('+') {
            match logical.last_mut() {
                Some((_, prev)) => {
                    prev.push(' ');
                    prev.push_str(rest.trim());
                }
                None => {
                    return Err(NetlistError::Syntax {
                        line: idx + 1,
                        msg: "continuation with nothing to continue".to_string(),
                    })
                }
            }
        } else {
            logical.push((idx + 1, trimmed.to_string()));
        }
    }

    let mut elements: Vec<ElementCard> = Vec::new();
    let mut directives = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_no, line) in logical {
        let first = line.chars().next().unwrap_or('*');
        if first == '*' || first == '.' {
            if line.trim().eq_ignore_ascii_case(".end") {
                continue;
            }
            directives.push(line);
            continue;
        }
        let card = parse_card(&line, line_no)?;
        if !seen.insert(card.name.clone()) {
            return Err(NetlistError::Syntax {
                line: line_no,
                msg: format!("duplicate element name '{}'", card.name),
            });
        }
        elements.push(card);
    }

    Ok(NetlistDoc {
        title: title.to_string(),
        elements,
        directives,
        source_text_hash,
    })
}

fn strip_inline_comment(line: &str) -> &str {
    if let Some(pos) = line.find(';') {
        return &line[..pos];
    }
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'$' && i > 0 && bytes[i - 1].is_ascii_whitespace() {
            return &line[..i];
        }
    }
    line
}

/// Whitespace tokens with their byte offsets in the line.
fn tokens_with_offsets(line: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((line[s..i].to_string(), s));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((line[s..].to_string(), s));
    }
    out
}

fn parse_card(line: &str, line_no: usize) -> Result<ElementCard, NetlistError> {
    let syntax = |msg: String| NetlistError::Syntax { line: line_no, msg };
    let toks = tokens_with_offsets(line);
    let name = toks[0].0.to_ascii_lowercase();
    let kind = name.chars().next().unwrap();
    let node_count = match kind {
        'r' | 'c' | 'l' | 'v' | 'i' => 2,
        'e' | 'g' => 4,
        'm' => 4,
        other => {
            return Err(syntax(format!(
                "unsupported element type '{other}' in card '{}'",
                toks[0].0
            )))
        }
    };
    if toks.len() < 1 + node_count {
        return Err(syntax(format!(
            "'{name}' needs {node_count} nodes, found {}",
            toks.len() - 1
        )));
    }
    let nodes: Vec<String> = toks[1..1 + node_count]
        .iter()
        .map(|(t, _)| t.to_ascii_lowercase())
        .collect();
    let mut card = ElementCard {
        name,
        kind,
        nodes,
        model_ref: None,
        params: Vec::new(),
        value: None,
        tail: None,
    };
    let rest = &toks[1 + node_count..];

    match kind {
        'r' | 'c' | 'l' | 'e' | 'g' => {
            let (tok, _) = rest
                .first()
                .ok_or_else(|| syntax(format!("'{}' is missing its value", card.name)))?;
            card.value = Some(
                RawValue::parse(tok)
                    .ok_or_else(|| syntax(format!("bad value '{tok}' on '{}'", card.name)))?,
            );
            if rest.len() > 1 {
                card.tail = Some(line[rest[1].1..].trim().to_string());
            }
        }
        'v' | 'i' => {
            let mut i = 0;
            while i < rest.len() {
                let tok = rest[i].0.to_ascii_lowercase();
                if tok == "dc" {
                    let (val, _) = rest.get(i + 1).ok_or_else(|| {
                        syntax(format!("'{}' has DC with no value", card.name))
                    })?;
                    let rv = RawValue::parse(val).ok_or_else(|| {
                        syntax(format!("bad DC value '{val}' on '{}'", card.name))
                    })?;
                    card.set_param("dc", rv);
                    i += 2;
                } else if i == 0 && RawValue::parse(&tok).is_some() {
                    // Bare leading number is the DC value.
                    card.set_param("dc", RawValue::parse(&rest[i].0).unwrap());
                    i += 1;
                } else {
                    card.tail = Some(line[rest[i].1..].trim().to_string());
                    break;
                }
            }
        }
        'm' => {
            let (model, _) = rest
                .first()
                .ok_or_else(|| syntax(format!("'{}' is missing its model", card.name)))?;
            if model.contains('=') || RawValue::parse(model).is_some() {
                return Err(syntax(format!(
                    "'{}' needs drain gate source bulk nodes then a model name",
                    card.name
                )));
            }
            card.model_ref = Some(model.to_ascii_lowercase());
            for (tok, _) in &rest[1..] {
                let (k, v) = tok.split_once('=').ok_or_else(|| {
                    syntax(format!("expected key=value, found '{tok}' on '{}'", card.name))
                })?;
                let rv = RawValue::parse(v).ok_or_else(|| {
                    syntax(format!("bad value '{v}' for {k} on '{}'", card.name))
                })?;
                card.params.push((k.to_ascii_lowercase(), rv));
            }
        }
        _ => unreachable!(),
    }
    Ok(card)
}

fn render_card(card: &ElementCard) -> String {
    let mut line = card.name.clone();
    for node in &card.nodes {
        line.push(' ');
        line.push_str(node);
    }
    if let Some(model) = &card.model_ref {
        line.push(' ');
        line.push_str(model);
    }
    if let Some(value) = &card.value {
        line.push(' ');
        line.push_str(&value.text);
    }
    for (key, value) in &card.params {
        line.push(' ');
        match key.as_str() {
            // Conventional uppercase for the sizing surface.
            "w" => line.push_str(&format!("W={}", value.text)),
            "l" => line.push_str(&format!("L={}", value.text)),
            "dc" => line.push_str(&format!("DC {}", value.text)),
            other => line.push_str(&format!("{other}={}", value.text)),
        }
    }
    if let Some(tail) = &card.tail {
        line.push(' ');
        line.push_str(tail);
    }
    line
}

/// Render a single element card as one line of deck text.
pub fn serialize_card(card: &ElementCard) -> String {
    render_card(card)
}

/// Render the document back to deck text: title, element cards, directives
/// in source order, and a closing `.end`. Reparsing the output yields a
/// structurally identical document.
pub fn serialize_netlist(doc: &NetlistDoc) -> String {
    let mut out = String::new();
    out.push_str(&doc.title);
    out.push('\n');
    for card in &doc.elements {
        out.push_str(&render_card(card));
        out.push('\n');
    }
    for directive in &doc.directives {
        out.push_str(directive);
        out.push('\n');
    }
    out.push_str(".end\n");
    out
}

/// Which parameter a tunable controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TunableKind {
    W,
    L,
    #[serde(rename = "DC")]
    Dc,
}

impl fmt::Display for TunableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TunableKind::W => write!(f, "W"),
            TunableKind::L => write!(f, "L"),
            TunableKind::Dc => write!(f, "DC"),
        }
    }
}

impl TunableKind {
    pub fn parse(s: &str) -> Option<TunableKind> {
        match s.to_ascii_uppercase().as_str() {
            "W" => Some(TunableKind::W),
            "L" => Some(TunableKind::L),
            "DC" => Some(TunableKind::Dc),
            _ => None,
        }
    }

    fn card_key(self) -> &'static str {
        match self {
            TunableKind::W => "w",
            TunableKind::L => "l",
            TunableKind::Dc => "dc",
        }
    }

    pub fn unit(self) -> Unit {
        match self {
            TunableKind::W | TunableKind::L => Unit::Meter,
            TunableKind::Dc => Unit::Volt,
        }
    }
}

/// One knob of the sizing surface. Grouped knobs fan out to every member
/// element so matched devices stay identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunableParam {
    /// Representative name: the group id, or the element for singletons.
    pub element: String,
    pub param: TunableKind,
    pub value: PhysicalValue,
    pub bounds: (f64, f64),
    pub group_id: Option<String>,
    pub members: Vec<String>,
}

impl TunableParam {
    /// The name patches use to address this knob.
    pub fn key(&self) -> &str {
        self.group_id.as_deref().unwrap_or(&self.element)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SizeGroup {
    pub id: String,
    pub members: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub w: (f64, f64),
    pub l: (f64, f64),
    pub bias: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            w: W_BOUNDS,
            l: L_BOUNDS,
            bias: BIAS_BOUNDS,
        }
    }
}

impl Bounds {
    fn for_kind(&self, kind: TunableKind) -> (f64, f64) {
        match kind {
            TunableKind::W => self.w,
            TunableKind::L => self.l,
            TunableKind::Dc => self.bias,
        }
    }
}

/// How to carve a netlist into tunables: explicit matched-device groups,
/// which sources are adjustable biases, and the bounds to enforce.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupingPolicy {
    pub groups: Vec<SizeGroup>,
    pub bias_sources: Vec<String>,
    #[serde(default)]
    pub bounds: Option<Bounds>,
}

impl GroupingPolicy {
    pub fn bounds(&self) -> Bounds {
        self.bounds.unwrap_or_default()
    }

    /// Group id owning an element, if any.
    pub fn group_of(&self, element: &str) -> Option<&SizeGroup> {
        self.groups.iter().find(|g| g.members.iter().any(|m| m == element))
    }
}

/// List the sizing surface of `doc` under `policy`: one W and one L knob per
/// size group (ungrouped MOSFETs become singleton groups in card order) plus
/// one DC knob per declared bias source.
pub fn extract_tunables(
    doc: &NetlistDoc,
    policy: &GroupingPolicy,
) -> Result<Vec<TunableParam>, NetlistError> {
    let bounds = policy.bounds();
    let mut out = Vec::new();

    let read_size = |element: &str, key: &str| -> Result<f64, NetlistError> {
        let card = doc
            .element(element)
            .ok_or_else(|| NetlistError::UnknownElement(element.to_string()))?;
        if card.kind != 'm' {
            return Err(NetlistError::UnknownElement(format!(
                "{element} (not a mosfet)"
            )));
        }
        card.param(key)
            .map(|rv| rv.magnitude)
            .ok_or_else(|| NetlistError::MissingParam {
                element: element.to_string(),
                param: key.to_uppercase(),
            })
    };

    let mut grouped: BTreeSet<&str> = BTreeSet::new();
    for group in &policy.groups {
        for member in &group.members {
            grouped.insert(member.as_str());
        }
    }

    let mut emit_group = |id: Option<&str>, members: &[String]| -> Result<(), NetlistError> {
        for kind in [TunableKind::W, TunableKind::L] {
            let key = kind.card_key();
            let first = read_size(&members[0], key)?;
            for member in &members[1..] {
                let v = read_size(member, key)?;
                if (v - first).abs() > first.abs() * 1e-9 {
                    return Err(NetlistError::InconsistentGroup(
                        id.unwrap_or(&members[0]).to_string(),
                        format!("{key} is {v:e} on {member} but {first:e} on {}", members[0]),
                    ));
                }
            }
            out.push(TunableParam {
                element: id.unwrap_or(&members[0]).to_string(),
                param: kind,
                value: PhysicalValue::meters(first),
                bounds: bounds.for_kind(kind),
                group_id: id.map(str::to_string),
                members: members.to_vec(),
            });
        }
        Ok(())
    };

    for group in &policy.groups {
        if group.members.is_empty() {
            return Err(NetlistError::InconsistentGroup(
                group.id.clone(),
                "group has no members".to_string(),
            ));
        }
        emit_group(Some(&group.id), &group.members)?;
    }
    for card in &doc.elements {
        if card.kind == 'm' && !grouped.contains(card.name.as_str()) {
            emit_group(None, std::slice::from_ref(&card.name))?;
        }
    }

    for source in &policy.bias_sources {
        let card = doc
            .element(source)
            .ok_or_else(|| NetlistError::UnknownElement(source.clone()))?;
        if card.kind != 'v' {
            return Err(NetlistError::UnknownElement(format!(
                "{source} (not a voltage source)"
            )));
        }
        let dc = card
            .param("dc")
            .ok_or_else(|| NetlistError::MissingParam {
                element: source.clone(),
                param: "DC".to_string(),
            })?;
        out.push(TunableParam {
            element: source.clone(),
            param: TunableKind::Dc,
            value: PhysicalValue::volts(dc.magnitude),
            bounds: bounds.for_kind(TunableKind::Dc),
            group_id: None,
            members: vec![source.clone()],
        });
    }

    Ok(out)
}

/// One sizing assignment: a tunable key, which parameter, and the new value
/// in SI units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchAssignment {
    pub target: String,
    pub param: TunableKind,
    pub value: PhysicalValue,
}

/// A proposed set of sizing changes plus the reasoning that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamPatch {
    pub assignments: Vec<PatchAssignment>,
    pub rationale: String,
}

impl ParamPatch {
    /// A patch that changes nothing (used for baseline evaluation and for
    /// "all targets already met" iterations).
    pub fn identity(rationale: &str) -> ParamPatch {
        ParamPatch {
            assignments: Vec::new(),
            rationale: rationale.to_string(),
        }
    }
}

/// Apply `patch` to `doc`, enforcing bounds and the fixed-topology rules.
///
/// Every assignment must address a knob in `tunables`; grouped knobs update
/// all members. The result is re-validated against `baseline` so a patch can
/// never change supply sources, model references, or fixed components.
pub fn apply_patch(
    doc: &NetlistDoc,
    patch: &ParamPatch,
    baseline: &NetlistDoc,
    tunables: &[TunableParam],
) -> Result<NetlistDoc, NetlistError> {
    let mut next = doc.clone();
    for assignment in &patch.assignments {
        let tunable = tunables
            .iter()
            .find(|t| t.key() == assignment.target && t.param == assignment.param)
            .ok_or_else(|| {
                // Distinguish "addressed a member of a group" and "touched a
                // real but untunable element" from a plain unknown name.
                if let Some(t) = tunables.iter().find(|t| {
                    t.group_id.is_some()
                        && t.param == assignment.param
                        && t.members.iter().any(|m| m == &assignment.target)
                }) {
                    NetlistError::ConstraintViolation(format!(
                        "'{}' belongs to size group '{}'; address the group",
                        assignment.target,
                        t.key()
                    ))
                } else if doc.element(&assignment.target).is_some() {
                    NetlistError::ConstraintViolation(format!(
                        "'{}' is not a tunable parameter ({} is fixed)",
                        assignment.target, assignment.param
                    ))
                } else {
                    NetlistError::UnknownElement(assignment.target.clone())
                }
            })?;
        let v = assignment.value.magnitude;
        let (lo, hi) = tunable.bounds;
        if !v.is_finite() || v < lo || v > hi {
            return Err(NetlistError::OutOfBounds {
                target: assignment.target.clone(),
                param: assignment.param.to_string(),
                value: v,
                lo,
                hi,
            });
        }
        for member in &tunable.members {
            let card = next
                .element_mut(member)
                .ok_or_else(|| NetlistError::UnknownElement(member.clone()))?;
            let key = assignment.param.card_key();
            let styled = match card.param(key) {
                Some(old) => old.restyled(v),
                None => RawValue::parse(&fmt_sig(v)).unwrap(),
            };
            card.set_param(key, styled);
        }
    }

    let bias: BTreeSet<String> = tunables
        .iter()
        .filter(|t| t.param == TunableKind::Dc)
        .flat_map(|t| t.members.iter().cloned())
        .collect();
    let findings = validate_constraints(&next, baseline, &bias);
    if let Some(first) = findings.first() {
        return Err(NetlistError::ConstraintViolation(first.to_string()));
    }
    Ok(next)
}

/// A way the document drifted from its baseline topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintFinding {
    pub element: String,
    pub message: String,
}

impl fmt::Display for ConstraintFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.element, self.message)
    }
}

/// Compare `doc` against `baseline` and list every fixed aspect that
/// changed: element set, connectivity, model references, supply-source DC
/// values (sources in `bias_sources` are exempt), and fixed component
/// values. Sizing parameters (W/L, bias DC) are free to differ.
pub fn validate_constraints(
    doc: &NetlistDoc,
    baseline: &NetlistDoc,
    bias_sources: &BTreeSet<String>,
) -> Vec<ConstraintFinding> {
    let mut findings = Vec::new();
    let mut flag = |element: &str, message: String| {
        findings.push(ConstraintFinding {
            element: element.to_string(),
            message,
        });
    };

    let doc_names: BTreeMap<&str, &ElementCard> =
        doc.elements.iter().map(|e| (e.name.as_str(), e)).collect();
    for base in &baseline.elements {
        let Some(card) = doc_names.get(base.name.as_str()) else {
            flag(&base.name, "element removed".to_string());
            continue;
        };
        if card.kind != base.kind {
            flag(&base.name, "element type changed".to_string());
            continue;
        }
        if card.nodes != base.nodes {
            flag(
                &base.name,
                format!(
                    "connectivity changed ({} -> {})",
                    base.nodes.join(" "),
                    card.nodes.join(" ")
                ),
            );
        }
        if card.model_ref != base.model_ref {
            flag(
                &base.name,
                format!(
                    "model reference changed ({:?} -> {:?})",
                    base.model_ref, card.model_ref
                ),
            );
        }
        match base.kind {
            'v' | 'i' => {
                if !bias_sources.contains(&base.name) {
                    let old = base.param("dc").map(|r| r.magnitude);
                    let new = card.param("dc").map(|r| r.magnitude);
                    if old != new {
                        flag(
                            &base.name,
                            format!("supply source value changed ({old:?} -> {new:?})"),
                        );
                    }
                }
                if base.tail != card.tail {
                    flag(&base.name, "source waveform changed".to_string());
                }
            }
            'r' | 'c' | 'l' | 'e' | 'g' => {
                let old = base.value.as_ref().map(|r| r.magnitude);
                let new = card.value.as_ref().map(|r| r.magnitude);
                if old != new {
                    flag(
                        &base.name,
                        format!("fixed component value changed ({old:?} -> {new:?})"),
                    );
                }
            }
            _ => {}
        }
    }
    for card in &doc.elements {
        if baseline.element(&card.name).is_none() {
            flag(&card.name, "element added".to_string());
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;

    const OTA: &str = "five transistor ota\n\
        .include ptm180.lib\n\
        vdd vdd 0 DC 1.8\n\
        vb nb 0 DC 0.7\n\
        m1 x1 inp t1 0 nch W=20u L=1u\n\
        m2 out inn t1 0 nch W=20u L=1u\n\
        m3 x1 x1 vdd vdd pch W=10u L=1u\n\
        m4 out x1 vdd vdd pch W=10u L=1u\n\
        m5 t1 nb 0 0 nch W=8u L=1u\n\
        .end\n";

    fn policy() -> GroupingPolicy {
        GroupingPolicy {
            groups: vec![
                SizeGroup {
                    id: "pair".into(),
                    members: vec!["m1".into(), "m2".into()],
                },
                SizeGroup {
                    id: "mirror".into(),
                    members: vec!["m3".into(), "m4".into()],
                },
            ],
            bias_sources: vec!["vb".into()],
            bounds: None,
        }
    }

    #[test]
    fn round_trip_is_structurally_identical() {
        let doc = parse_netlist(OTA).unwrap();
        let text = serialize_netlist(&doc);
        let again = parse_netlist(&text).unwrap();
        assert_eq!(doc.title, again.title);
        assert_eq!(doc.elements, again.elements);
        assert_eq!(doc.directives, again.directives);
        // And serialization is a fixed point after one pass.
        assert_eq!(text, serialize_netlist(&again));
    }

    #[test]
    fn suffix_styles_normalize_to_the_same_magnitude() {
        for text in ["10u", "10U", "10e-6", "0.00001"] {
            assert_eq!(
                RawValue::parse(text).unwrap().magnitude,
                1e-5,
                "text {text:?}"
            );
        }
    }

    #[test]
    fn patched_values_keep_the_source_suffix_style() {
        let doc = parse_netlist(OTA).unwrap();
        let tunables = extract_tunables(&doc, &policy()).unwrap();
        let patch = ParamPatch {
            assignments: vec![PatchAssignment {
                target: "pair".into(),
                param: TunableKind::W,
                value: PhysicalValue::meters(53e-6),
            }],
            rationale: "test".into(),
        };
        let next = apply_patch(&doc, &patch, &doc, &tunables).unwrap();
        let text = serialize_netlist(&next);
        assert!(text.contains("W=53u"), "patched width keeps micron style:\n{text}");
        assert_eq!(next.element("m1").unwrap().param("w").unwrap().magnitude, 53e-6);
        assert_eq!(next.element("m2").unwrap().param("w").unwrap().magnitude, 53e-6);
    }

    #[test]
    fn extraction_covers_groups_singletons_and_biases() {
        let doc = parse_netlist(OTA).unwrap();
        let tunables = extract_tunables(&doc, &policy()).unwrap();
        // pair.W/L, mirror.W/L, m5.W/L, vb.DC
        assert_eq!(tunables.len(), 7);
        let keys: Vec<(String, TunableKind)> = tunables
            .iter()
            .map(|t| (t.key().to_string(), t.param))
            .collect();
        assert!(keys.contains(&("pair".into(), TunableKind::W)));
        assert!(keys.contains(&("m5".into(), TunableKind::L)));
        assert!(keys.contains(&("vb".into(), TunableKind::Dc)));
        let vb = tunables.iter().find(|t| t.key() == "vb").unwrap();
        assert_eq!(vb.value.magnitude, 0.7);
        assert_eq!(vb.bounds, BIAS_BOUNDS);
    }

    #[test]
    fn default_policy_gives_per_transistor_knobs() {
        let doc = parse_netlist(OTA).unwrap();
        let tunables = extract_tunables(&doc, &GroupingPolicy::default()).unwrap();
        assert_eq!(tunables.len(), 10); // five transistors x (W, L)
        assert!(tunables.iter().all(|t| t.group_id.is_none()));
    }

    #[test]
    fn out_of_bounds_and_unknown_targets_are_rejected() {
        let doc = parse_netlist(OTA).unwrap();
        let tunables = extract_tunables(&doc, &policy()).unwrap();
        let oob = ParamPatch {
            assignments: vec![PatchAssignment {
                target: "pair".into(),
                param: TunableKind::L,
                value: PhysicalValue::meters(11e-6),
            }],
            rationale: String::new(),
        };
        assert!(matches!(
            apply_patch(&doc, &oob, &doc, &tunables),
            Err(NetlistError::OutOfBounds { .. })
        ));
        let unknown = ParamPatch {
            assignments: vec![PatchAssignment {
                target: "m99".into(),
                param: TunableKind::W,
                value: PhysicalValue::meters(1e-6),
            }],
            rationale: String::new(),
        };
        assert!(matches!(
            apply_patch(&doc, &unknown, &doc, &tunables),
            Err(NetlistError::UnknownElement(_))
        ));
    }

    #[test]
    fn supply_and_group_members_are_protected() {
        let doc = parse_netlist(OTA).unwrap();
        let tunables = extract_tunables(&doc, &policy()).unwrap();
        let touch_supply = ParamPatch {
            assignments: vec![PatchAssignment {
                target: "vdd".into(),
                param: TunableKind::Dc,
                value: PhysicalValue::volts(1.2),
            }],
            rationale: String::new(),
        };
        assert!(matches!(
            apply_patch(&doc, &touch_supply, &doc, &tunables),
            Err(NetlistError::ConstraintViolation(_))
        ));
        let touch_member = ParamPatch {
            assignments: vec![PatchAssignment {
                target: "m1".into(),
                param: TunableKind::W,
                value: PhysicalValue::meters(30e-6),
            }],
            rationale: String::new(),
        };
        let err = apply_patch(&doc, &touch_member, &doc, &tunables).unwrap_err();
        assert!(err.to_string().contains("size group"), "{err}");
    }

    #[test]
    fn constraint_scan_flags_topology_drift() {
        let doc = parse_netlist(OTA).unwrap();
        let mut tampered = doc.clone();
        tampered.element_mut("m4").unwrap().nodes[1] = "inp".into();
        tampered.element_mut("vdd").unwrap().set_param(
            "dc",
            RawValue::parse("1.2").unwrap(),
        );
        let findings = validate_constraints(&tampered, &doc, &BTreeSet::new());
        assert_eq!(findings.len(), 2);
        assert!(findings.iter().any(|f| f.element == "m4"));
        assert!(findings.iter().any(|f| f.element == "vdd"));
    }

    #[test]
    fn mosfet_cards_need_four_nodes_and_a_model() {
        let bad = "t\nm1 d g s nch W=1u L=1u\n.end\n";
        let err = parse_netlist(bad).unwrap_err();
        assert!(matches!(err, NetlistError::Syntax { line: 2, .. }), "{err}");
    }

    #[test]
    fn group_members_must_match_at_extraction() {
        let text = OTA.replace("m2 out inn t1 0 nch W=20u L=1u", "m2 out inn t1 0 nch W=21u L=1u");
        let doc = parse_netlist(&text).unwrap();
        assert!(matches!(
            extract_tunables(&doc, &policy()),
            Err(NetlistError::InconsistentGroup(..))
        ));
    }
}
