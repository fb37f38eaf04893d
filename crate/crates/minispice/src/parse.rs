//! SPICE deck text to [`Circuit`] parser.
//!
//! Supported syntax: title line, `*` comments, `;`/`$` inline comments,
//! `+` continuations, case-insensitive names, engineering suffixes
//! (t g meg k m mil u n p f, plus `µ` as an alias for `u`), element cards
//! R/C/L/V/I/E/G/M, and the directives `.model`, `.include`, `.save`,
//! `.op`, `.dc`, `.ac`, `.tran`, `.options`, `.temp`, `.end`.

use crate::circuit::{
    AnalysisCard, Circuit, Element, MosModel, MosPolarity, NodeId, SinWave, SpiceError,
};
use std::collections::HashMap;
use std::path::Path;

/// Parse a numeric token with an optional engineering suffix; trailing unit
/// letters after the suffix are ignored (`10pF`, `1.8V`).
pub fn parse_value(tok: &str) -> Option<f64> {
    let t = tok.trim().to_ascii_lowercase().replace('µ', "u");
    let bytes = t.as_bytes();
    let mut end = 0;
    let mut seen_e = false;
    let mut seen_digit = false;
    while end < bytes.len() {
        let c = bytes[end] as char;
        let ok = match c {
            '0'..='9' => {
                seen_digit = true;
                true
            }
            '.' => !seen_e,
            '+' | '-' => end == 0 || bytes[end - 1] == b'e',
            'e' => {
                !seen_e && seen_digit && {
                    match bytes.get(end + 1).copied().map(|b| b as char) {
                        Some('0'..='9') => true,
                        Some('+') | Some('-') => {
                            matches!(bytes.get(end + 2).copied().map(|b| b as char), Some('0'..='9'))
                        }
                        _ => false,
                    }
                }
            }
            _ => false,
        };
        if !ok {
            break;
        }
        if c == 'e' {
            seen_e = true;
        }
        end += 1;
    }
    if end == 0 || !seen_digit {
        return None;
    }
    let prefix = &t[..end];
    let rest = &t[end..];
    if rest.starts_with("mil") {
        return Some(prefix.parse::<f64>().ok()? * 25.4e-6);
    }
    // Rewrite the suffix as a decimal exponent so `10u` parses to exactly
    // the same bits as `10e-6`.
    let exp = if rest.starts_with("meg") {
        "e6"
    } else {
        match rest.chars().next() {
            Some('t') => "e12",
            Some('g') => "e9",
            Some('k') => "e3",
            Some('m') => "e-3",
            Some('u') => "e-6",
            Some('n') => "e-9",
            Some('p') => "e-12",
            Some('f') => "e-15",
            _ => "",
        }
    };
    if exp.is_empty() || seen_e {
        let base: f64 = prefix.parse().ok()?;
        let mult = match exp {
            "e12" => 1e12,
            "e9" => 1e9,
            "e6" => 1e6,
            "e3" => 1e3,
            "e-3" => 1e-3,
            "e-6" => 1e-6,
            "e-9" => 1e-9,
            "e-12" => 1e-12,
            "e-15" => 1e-15,
            _ => 1.0,
        };
        Some(base * mult)
    } else {
        format!("{prefix}{exp}").parse().ok()
    }
}

struct Builder {
    circuit: Circuit,
    node_ids: HashMap<String, NodeId>,
    /// Mosfet model references to validate once the whole deck is read.
    pending_models: Vec<(usize, String)>,
}

impl Builder {
    fn new(title: String) -> Self {
        let mut node_ids = HashMap::new();
        node_ids.insert("0".to_string(), 0);
        Builder {
            circuit: Circuit {
                title,
                elements: Vec::new(),
                models: HashMap::new(),
                analyses: Vec::new(),
                saves: Vec::new(),
                node_names: vec!["0".to_string()],
                warnings: Vec::new(),
            },
            node_ids,
            pending_models: Vec::new(),
        }
    }

    fn node(&mut self, tok: &str) -> NodeId {
        let mut name = tok.to_ascii_lowercase();
        if name == "gnd" {
            name = "0".to_string();
        }
        if let Some(&id) = self.node_ids.get(&name) {
            return id;
        }
        let id = self.circuit.node_names.len();
        self.circuit.node_names.push(name.clone());
        self.node_ids.insert(name, id);
        id
    }
}

fn err(line: usize, msg: impl Into<String>) -> SpiceError {
    SpiceError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Split a logical line into tokens, padding parentheses, commas and `=`
/// so that `sin(0 0.8 1k)` and `w=10u` come apart cleanly.
fn tokenize(line: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(line.len());
    for ch in line.chars() {
        match ch {
            '(' | ')' | '=' | ',' => {
                cleaned.push(' ');
                if ch != ',' {
                    cleaned.push(ch);
                }
                cleaned.push(' ');
            }
            _ => cleaned.push(ch),
        }
    }
    cleaned.split_whitespace().map(|s| s.to_string()).collect()
}

fn strip_inline_comment(line: &str) -> &str {
    let mut cut = line.len();
    if let Some(i) = line.find(';') {
        cut = cut.min(i);
    }
    // `$` starts a comment when preceded by whitespace or at line start.
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'$' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            cut = cut.min(i);
            break;
        }
    }
    &line[..cut]
}

/// Recursively expand `.include` lines into a flat (line_number, text) list.
fn gather_lines(
    text: &str,
    dir: &Path,
    depth: usize,
    skip_first: bool,
    out: &mut Vec<(usize, String)>,
) -> Result<(), SpiceError> {
    if depth > 8 {
        return Err(err(0, "include depth exceeds 8"));
    }
    for (idx, raw) in text.lines().enumerate() {
        if skip_first && idx == 0 {
            continue; // title line
        }
        let line = strip_inline_comment(raw.trim_end_matches('\r'));
        let trimmed = line.trim();
        if trimmed.to_ascii_lowercase().starts_with(".include")
            || trimmed.to_ascii_lowercase().starts_with(".inc ")
        {
            let arg = trimmed
                .split_whitespace()
                .nth(1)
                .ok_or_else(|| err(idx + 1, ".include needs a path"))?
                .trim_matches(|c| c == '"' || c == '\'');
            let path = dir.join(arg);
            let sub = std::fs::read_to_string(&path).map_err(|e| {
                err(idx + 1, format!("cannot read include {}: {e}", path.display()))
            })?;
            let sub_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            gather_lines(&sub, &sub_dir, depth + 1, false, out)?;
        } else {
            out.push((idx + 1, line.to_string()));
        }
    }
    Ok(())
}

/// Join `+` continuations; comment and blank lines are dropped first.
fn logical_lines(lines: &[(usize, String)]) -> Vec<(usize, String)> {
    let mut out: Vec<(usize, String)> = Vec::new();
    for (no, line) in lines {
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('*') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('+') {
            if let Some(last) = out.last_mut() {
                last.1.push(' ');
                last.1.push_str(rest);
                continue;
            }
        }
        out.push((*no, trimmed.to_string()));
    }
    out
}

/// Independent-source trailing parameters: `[dc] <v>`, `ac <mag> [<ph>]`,
/// `sin ( vo va freq [td theta] )`.
struct SourceParams {
    dc: f64,
    ac_mag: f64,
    ac_phase_deg: f64,
    wave: Option<SinWave>,
}

fn parse_source_params(line: usize, toks: &[String]) -> Result<SourceParams, SpiceError> {
    let mut p = SourceParams {
        dc: 0.0,
        ac_mag: 0.0,
        ac_phase_deg: 0.0,
        wave: None,
    };
    let mut dc_given = false;
    let mut i = 0;
    while i < toks.len() {
        let key = toks[i].to_ascii_lowercase();
        match key.as_str() {
            "dc" => {
                let v = toks
                    .get(i + 1)
                    .and_then(|t| parse_value(t))
                    .ok_or_else(|| err(line, "dc needs a value"))?;
                p.dc = v;
                dc_given = true;
                i += 2;
            }
            "ac" => {
                let mag = toks
                    .get(i + 1)
                    .and_then(|t| parse_value(t))
                    .ok_or_else(|| err(line, "ac needs a magnitude"))?;
                p.ac_mag = mag;
                i += 2;
                if let Some(ph) = toks.get(i).and_then(|t| parse_value(t)) {
                    p.ac_phase_deg = ph;
                    i += 1;
                }
            }
            "sin" => {
                // Collect numeric arguments between the padded parens.
                let mut vals = Vec::new();
                let mut j = i + 1;
                if toks.get(j).map(String::as_str) == Some("(") {
                    j += 1;
                }
                while j < toks.len() && toks[j] != ")" {
                    let v = parse_value(&toks[j])
                        .ok_or_else(|| err(line, format!("bad sin parameter '{}'", toks[j])))?;
                    vals.push(v);
                    j += 1;
                }
                if vals.len() < 3 {
                    return Err(err(line, "sin needs at least (vo va freq)"));
                }
                p.wave = Some(SinWave {
                    offset: vals[0],
                    amplitude: vals[1],
                    freq_hz: vals[2],
                    delay_s: vals.get(3).copied().unwrap_or(0.0),
                    damping: vals.get(4).copied().unwrap_or(0.0),
                });
                i = if j < toks.len() { j + 1 } else { j };
            }
            _ => {
                if let Some(v) = parse_value(&toks[i]) {
                    if !dc_given {
                        p.dc = v;
                        dc_given = true;
                    }
                    i += 1;
                } else {
                    return Err(err(line, format!("unexpected source token '{}'", toks[i])));
                }
            }
        }
    }
    if !dc_given {
        if let Some(w) = &p.wave {
            p.dc = w.offset;
        }
    }
    Ok(p)
}

fn parse_model(b: &mut Builder, line: usize, toks: &[String]) -> Result<(), SpiceError> {
    if toks.len() < 3 {
        return Err(err(line, ".model needs a name and a type"));
    }
    let name = toks[1].to_ascii_lowercase();
    let polarity = match toks[2].to_ascii_lowercase().as_str() {
        "nmos" => MosPolarity::Nmos,
        "pmos" => MosPolarity::Pmos,
        other => return Err(err(line, format!("unsupported model type '{other}'"))),
    };
    let mut model = MosModel {
        name: name.clone(),
        polarity,
        vto: 0.0,
        kp: 2.0e-5,
        lambda: 0.0,
        gamma: 0.0,
        phi: 0.6,
    };
    // Remaining tokens are `key = value` triples, possibly inside parens.
    let mut i = 3;
    while i < toks.len() {
        let t = &toks[i];
        if t == "(" || t == ")" {
            i += 1;
            continue;
        }
        if toks.get(i + 1).map(String::as_str) != Some("=") {
            return Err(err(line, format!("expected key=value in .model, got '{t}'")));
        }
        let val = toks
            .get(i + 2)
            .and_then(|v| parse_value(v))
            .ok_or_else(|| err(line, format!("bad value for model parameter '{t}'")))?;
        match t.to_ascii_lowercase().as_str() {
            "vto" => model.vto = val,
            "kp" => model.kp = val,
            "lambda" => model.lambda = val,
            "gamma" => model.gamma = val,
            "phi" => model.phi = val,
            "level" => {
                if (val - 1.0).abs() > 1e-9 {
                    return Err(err(line, "only level=1 models are supported"));
                }
            }
            other => b
                .circuit
                .warnings
                .push(format!("line {line}: ignoring model parameter '{other}'")),
        }
        i += 3;
    }
    b.circuit.models.insert(name, model);
    Ok(())
}

fn parse_directive(b: &mut Builder, line: usize, toks: &[String]) -> Result<bool, SpiceError> {
    let dir = toks[0].to_ascii_lowercase();
    match dir.as_str() {
        ".end" => return Ok(true),
        ".model" => parse_model(b, line, toks)?,
        ".op" => b.circuit.analyses.push(AnalysisCard::Op),
        ".dc" => {
            if toks.len() < 5 {
                return Err(err(line, ".dc needs source, start, stop, step"));
            }
            let nums: Option<Vec<f64>> = toks[2..5].iter().map(|t| parse_value(t)).collect();
            let nums = nums.ok_or_else(|| err(line, "bad .dc sweep bounds"))?;
            b.circuit.analyses.push(AnalysisCard::DcSweep {
                source: toks[1].to_ascii_lowercase(),
                start: nums[0],
                stop: nums[1],
                step: nums[2],
            });
        }
        ".ac" => {
            if toks.len() < 5 || !toks[1].eq_ignore_ascii_case("dec") {
                return Err(err(line, ".ac supports only 'dec <n> <fstart> <fstop>'"));
            }
            let n = parse_value(&toks[2]).ok_or_else(|| err(line, "bad .ac point count"))?;
            let fstart = parse_value(&toks[3]).ok_or_else(|| err(line, "bad .ac fstart"))?;
            let fstop = parse_value(&toks[4]).ok_or_else(|| err(line, "bad .ac fstop"))?;
            if n < 1.0 || fstart <= 0.0 || fstop < fstart {
                return Err(err(line, "invalid .ac sweep range"));
            }
            b.circuit.analyses.push(AnalysisCard::Ac {
                points_per_decade: n as usize,
                fstart,
                fstop,
            });
        }
        ".tran" => {
            if toks.len() < 3 {
                return Err(err(line, ".tran needs tstep and tstop"));
            }
            let tstep = parse_value(&toks[1]).ok_or_else(|| err(line, "bad .tran tstep"))?;
            let tstop = parse_value(&toks[2]).ok_or_else(|| err(line, "bad .tran tstop"))?;
            if tstep <= 0.0 || tstop < tstep {
                return Err(err(line, "invalid .tran range"));
            }
            b.circuit.analyses.push(AnalysisCard::Tran { tstep, tstop });
        }
        ".save" | ".print" | ".plot" => {
            for t in &toks[1..] {
                let t = t.to_ascii_lowercase();
                if t == "(" || t == ")" {
                    continue;
                }
                b.circuit.saves.push(t);
            }
            // Re-join padded `v ( out )` runs back into `v(out)`.
            normalize_saves(&mut b.circuit.saves);
        }
        ".options" | ".option" | ".temp" | ".global" | ".nodeset" | ".ic" => {
            // Accepted and ignored; they do not change what this engine computes.
        }
        other => b
            .circuit
            .warnings
            .push(format!("line {line}: ignoring unsupported directive '{other}'")),
    }
    Ok(false)
}

/// `.save v ( out ) i ( vdd )` tokens arrive padded; glue them back to
/// `v(out)` / `i(vdd)` style names.
fn normalize_saves(saves: &mut Vec<String>) {
    let toks = std::mem::take(saves);
    let mut out = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        if (toks[i] == "v" || toks[i] == "i") && i + 1 < toks.len() {
            out.push(format!("{}({})", toks[i], toks[i + 1]));
            i += 2;
        } else {
            out.push(toks[i].clone());
            i += 1;
        }
    }
    *saves = out;
}

fn parse_element(b: &mut Builder, line: usize, toks: &[String]) -> Result<(), SpiceError> {
    let name = toks[0].to_ascii_lowercase();
    let kind = name.chars().next().unwrap();
    let need = |n: usize| -> Result<(), SpiceError> {
        if toks.len() < n {
            Err(err(line, format!("'{name}' card is missing fields")))
        } else {
            Ok(())
        }
    };
    match kind {
        'r' | 'c' | 'l' => {
            need(4)?;
            let a = b.node(&toks[1]);
            let nb = b.node(&toks[2]);
            let val = parse_value(&toks[3])
                .ok_or_else(|| err(line, format!("bad value '{}'", toks[3])))?;
            let el = match kind {
                'r' => Element::Resistor {
                    name,
                    a,
                    b: nb,
                    ohms: val,
                },
                'c' => Element::Capacitor {
                    name,
                    a,
                    b: nb,
                    farads: val,
                },
                _ => Element::Inductor {
                    name,
                    a,
                    b: nb,
                    henries: val,
                },
            };
            b.circuit.elements.push(el);
        }
        'v' | 'i' => {
            need(3)?;
            let pos = b.node(&toks[1]);
            let neg = b.node(&toks[2]);
            let p = parse_source_params(line, &toks[3..])?;
            let el = if kind == 'v' {
                Element::Vsource {
                    name,
                    pos,
                    neg,
                    dc: p.dc,
                    ac_mag: p.ac_mag,
                    ac_phase_deg: p.ac_phase_deg,
                    wave: p.wave,
                }
            } else {
                Element::Isource {
                    name,
                    pos,
                    neg,
                    dc: p.dc,
                    ac_mag: p.ac_mag,
                    ac_phase_deg: p.ac_phase_deg,
                    wave: p.wave,
                }
            };
            b.circuit.elements.push(el);
        }
        'e' | 'g' => {
            need(6)?;
            let pos = b.node(&toks[1]);
            let neg = b.node(&toks[2]);
            let cpos = b.node(&toks[3]);
            let cneg = b.node(&toks[4]);
            let val = parse_value(&toks[5])
                .ok_or_else(|| err(line, format!("bad gain '{}'", toks[5])))?;
            let el = if kind == 'e' {
                Element::Vcvs {
                    name,
                    pos,
                    neg,
                    cpos,
                    cneg,
                    gain: val,
                }
            } else {
                Element::Vccs {
                    name,
                    pos,
                    neg,
                    cpos,
                    cneg,
                    gm: val,
                }
            };
            b.circuit.elements.push(el);
        }
        'm' => {
            need(6)?;
            let d = b.node(&toks[1]);
            let g = b.node(&toks[2]);
            let s = b.node(&toks[3]);
            let body = b.node(&toks[4]);
            let model = toks[5].to_ascii_lowercase();
            let mut w = 10e-6;
            let mut l = 1e-6;
            let mut i = 6;
            while i < toks.len() {
                if toks.get(i + 1).map(String::as_str) != Some("=") {
                    return Err(err(line, format!("expected key=value, got '{}'", toks[i])));
                }
                let val = toks
                    .get(i + 2)
                    .and_then(|v| parse_value(v))
                    .ok_or_else(|| err(line, format!("bad value for '{}'", toks[i])))?;
                match toks[i].to_ascii_lowercase().as_str() {
                    "w" => w = val,
                    "l" => l = val,
                    other => b
                        .circuit
                        .warnings
                        .push(format!("line {line}: ignoring mosfet parameter '{other}'")),
                }
                i += 3;
            }
            if w <= 0.0 || l <= 0.0 {
                return Err(err(line, "mosfet W and L must be positive"));
            }
            b.pending_models.push((line, model.clone()));
            b.circuit.elements.push(Element::Mosfet {
                name,
                d,
                g,
                s,
                b: body,
                model,
                w,
                l,
            });
        }
        other => {
            return Err(err(line, format!("unsupported element type '{other}'")));
        }
    }
    Ok(())
}

/// Parse a full deck. `search_dir` anchors relative `.include` paths.
pub fn parse_deck(text: &str, search_dir: &Path) -> Result<Circuit, SpiceError> {
    let title = text.lines().next().unwrap_or("").trim().to_string();
    let mut raw = Vec::new();
    gather_lines(text, search_dir, 0, true, &mut raw)?;
    let mut b = Builder::new(title);
    for (no, line) in logical_lines(&raw) {
        let toks = tokenize(&line);
        if toks.is_empty() {
            continue;
        }
        if toks[0].starts_with('.') {
            if parse_directive(&mut b, no, &toks)? {
                break; // .end
            }
        } else {
            parse_element(&mut b, no, &toks)?;
        }
    }
    for (line, model) in &b.pending_models {
        if !b.circuit.models.contains_key(model) {
            return Err(err(*line, format!("undefined mosfet model '{model}'")));
        }
    }
    let mut names = std::collections::HashSet::new();
    for el in &b.circuit.elements {
        if !names.insert(el.name().to_string()) {
            return Err(err(0, format!("duplicate element name '{}'", el.name())));
        }
    }
    Ok(b.circuit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_suffixes() {
        assert_eq!(parse_value("10u"), Some(10e-6));
        assert_eq!(parse_value("10U"), Some(10e-6));
        assert_eq!(parse_value("10µ"), Some(10e-6));
        assert_eq!(parse_value("3MEG"), Some(3e6));
        assert_eq!(parse_value("3m"), Some(3e-3));
        assert_eq!(parse_value("10pF"), Some(10e-12));
        assert_eq!(parse_value("1.8V"), Some(1.8));
        assert_eq!(parse_value("1e-3"), Some(1e-3));
        // Trailing text after the scale factor is ignored, SPICE-style.
        assert_eq!(parse_value("2k2"), Some(2000.0));
        assert_eq!(parse_value("x"), None);
    }

    #[test]
    fn divider_deck() {
        let deck = "t\nV1 in 0 DC 1.8\nR1 in out 1k\nR2 out gnd 1K\n.op\n.end\n";
        let c = parse_deck(deck, Path::new(".")).unwrap();
        assert_eq!(c.elements.len(), 3);
        assert_eq!(c.node_names, vec!["0", "in", "out"]);
        assert_eq!(c.analyses, vec![AnalysisCard::Op]);
    }

    #[test]
    fn continuation_and_sin() {
        let deck = "t\nVin in 0 DC 0.9 AC 1\n+ SIN(0.9 0.8 1k)\n.tran 1u 16m\n";
        let c = parse_deck(deck, Path::new(".")).unwrap();
        match &c.elements[0] {
            Element::Vsource {
                dc, ac_mag, wave, ..
            } => {
                assert_eq!(*dc, 0.9);
                assert_eq!(*ac_mag, 1.0);
                let w = wave.expect("sin wave parsed");
                assert_eq!(w.amplitude, 0.8);
                assert_eq!(w.freq_hz, 1000.0);
            }
            other => panic!("expected Vsource, got {other:?}"),
        }
    }

    #[test]
    fn mosfet_card_and_model() {
        let deck = "t\nM1 d g 0 0 nch W=53u L=1.85u\n.model nch nmos (level=1 vto=0.4 kp=180u lambda=0.05)\n.op\n";
        let c = parse_deck(deck, Path::new(".")).unwrap();
        match &c.elements[0] {
            Element::Mosfet { w, l, model, .. } => {
                assert!((w - 53e-6).abs() < 1e-12);
                assert!((l - 1.85e-6).abs() < 1e-12);
                assert_eq!(model, "nch");
            }
            other => panic!("expected Mosfet, got {other:?}"),
        }
        let m = &c.models["nch"];
        assert_eq!(m.vto, 0.4);
        assert!((m.kp - 180e-6).abs() < 1e-12);
    }

    #[test]
    fn missing_model_is_an_error() {
        let deck = "t\nM1 d g 0 0 nch W=1u L=1u\n.op\n";
        assert!(parse_deck(deck, Path::new(".")).is_err());
    }
}
