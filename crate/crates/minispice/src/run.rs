//! End-to-end batch run: parse a deck, execute its analyses, and produce
//! rawfile text plus a human-readable log.

use crate::analysis::{run_analysis, Plot};
use crate::circuit::SpiceError;
use crate::parse::parse_deck;
use crate::solver::Topology;
use std::fmt::Write as _;
use std::path::Path;

pub struct RunResult {
    pub title: String,
    pub plots: Vec<Plot>,
    pub log: String,
}

/// Run every analysis in the deck. The first analysis failure aborts the
/// run; its message is appended to the log carried inside the error.
pub fn run_deck(text: &str, search_dir: &Path) -> Result<RunResult, (String, SpiceError)> {
    let mut log = String::new();
    let ckt = match parse_deck(text, search_dir) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(log, "Error: {e}");
            return Err((log, e));
        }
    };
    for w in &ckt.warnings {
        let _ = writeln!(log, "Warning: {w}");
    }
    let _ = writeln!(
        log,
        "Circuit: {} ({} elements, {} nodes)",
        ckt.title,
        ckt.elements.len(),
        ckt.node_count() - 1
    );
    if ckt.analyses.is_empty() {
        let _ = writeln!(log, "Warning: deck requests no analyses");
    }
    let topo = Topology::build(&ckt);
    let mut plots = Vec::new();
    for card in &ckt.analyses {
        let _ = writeln!(log, "Doing analysis: {card:?}");
        match run_analysis(&ckt, &topo, card) {
            Ok(plot) => {
                let _ = writeln!(log, "  wrote {} points, {} variables", plot.data.len(), plot.variables.len());
                plots.push(plot);
            }
            Err(e) => {
                let _ = writeln!(log, "Error: {e}");
                return Err((log, e));
            }
        }
    }
    Ok(RunResult {
        title: ckt.title,
        plots,
        log,
    })
}
