//! In-memory circuit representation produced by the netlist parser.

use std::collections::HashMap;

/// Node index into [`Circuit::node_names`]. Index 0 is always ground.
pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MosPolarity {
    Nmos,
    Pmos,
}

/// Level-1 (square-law) MOSFET model card.
#[derive(Debug, Clone)]
pub struct MosModel {
    pub name: String,
    pub polarity: MosPolarity,
    /// Zero-bias threshold voltage in volts (negative for PMOS).
    pub vto: f64,
    /// Process transconductance in A/V^2.
    pub kp: f64,
    /// Channel-length modulation in 1/V.
    pub lambda: f64,
    /// Body-effect coefficient in sqrt(V).
    pub gamma: f64,
    /// Surface potential in volts.
    pub phi: f64,
}

/// `SIN(vo va freq [td theta])` time-domain source waveform.
#[derive(Debug, Clone, Copy, Default)]
pub struct SinWave {
    pub offset: f64,
    pub amplitude: f64,
    pub freq_hz: f64,
    pub delay_s: f64,
    pub damping: f64,
}

impl SinWave {
    pub fn value_at(&self, t: f64) -> f64 {
        if t < self.delay_s {
            self.offset
        } else {
            let tp = t - self.delay_s;
            let env = (-self.damping * tp).exp();
            self.offset
                + self.amplitude * env * (2.0 * std::f64::consts::PI * self.freq_hz * tp).sin()
        }
    }
}

#[derive(Debug, Clone)]
pub enum Element {
    Resistor {
        name: String,
        a: NodeId,
        b: NodeId,
        ohms: f64,
    },
    Capacitor {
        name: String,
        a: NodeId,
        b: NodeId,
        farads: f64,
    },
    Inductor {
        name: String,
        a: NodeId,
        b: NodeId,
        henries: f64,
    },
    /// Independent voltage source. Branch current is an MNA unknown.
    Vsource {
        name: String,
        pos: NodeId,
        neg: NodeId,
        dc: f64,
        ac_mag: f64,
        ac_phase_deg: f64,
        wave: Option<SinWave>,
    },
    /// Independent current source; positive current flows from `pos`
    /// through the source into `neg`.
    Isource {
        name: String,
        pos: NodeId,
        neg: NodeId,
        dc: f64,
        ac_mag: f64,
        ac_phase_deg: f64,
        wave: Option<SinWave>,
    },
    /// Voltage-controlled voltage source (E card).
    Vcvs {
        name: String,
        pos: NodeId,
        neg: NodeId,
        cpos: NodeId,
        cneg: NodeId,
        gain: f64,
    },
    /// Voltage-controlled current source (G card).
    Vccs {
        name: String,
        pos: NodeId,
        neg: NodeId,
        cpos: NodeId,
        cneg: NodeId,
        gm: f64,
    },
    Mosfet {
        name: String,
        d: NodeId,
        g: NodeId,
        s: NodeId,
        b: NodeId,
        model: String,
        /// Channel width in meters.
        w: f64,
        /// Channel length in meters.
        l: f64,
    },
}

impl Element {
    pub fn name(&self) -> &str {
        match self {
            Element::Resistor { name, .. }
            | Element::Capacitor { name, .. }
            | Element::Inductor { name, .. }
            | Element::Vsource { name, .. }
            | Element::Isource { name, .. }
            | Element::Vcvs { name, .. }
            | Element::Vccs { name, .. }
            | Element::Mosfet { name, .. } => name,
        }
    }

    /// True for elements that carry an MNA branch-current unknown.
    pub fn has_branch(&self) -> bool {
        matches!(
            self,
            Element::Vsource { .. } | Element::Vcvs { .. } | Element::Inductor { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisCard {
    Op,
    /// `.dc <source> <start> <stop> <step>`
    DcSweep {
        source: String,
        start: f64,
        stop: f64,
        step: f64,
    },
    /// `.ac dec <points_per_decade> <fstart> <fstop>`
    Ac {
        points_per_decade: usize,
        fstart: f64,
        fstop: f64,
    },
    /// `.tran <tstep> <tstop>`
    Tran { tstep: f64, tstop: f64 },
}

#[derive(Debug, Clone)]
pub struct Circuit {
    pub title: String,
    pub elements: Vec<Element>,
    pub models: HashMap<String, MosModel>,
    pub analyses: Vec<AnalysisCard>,
    /// Lowercased `.save` vector names; empty means save everything.
    pub saves: Vec<String>,
    /// Node index to name; entry 0 is ground ("0").
    pub node_names: Vec<String>,
    /// Parser warnings (unknown directives and the like) for the log.
    pub warnings: Vec<String>,
}

impl Circuit {
    /// Number of nodes including ground.
    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn model_for(&self, mosfet: &Element) -> Option<&MosModel> {
        match mosfet {
            Element::Mosfet { model, .. } => self.models.get(model),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SpiceError {
    #[error("parse error, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{analysis} analysis: no convergence ({detail})")]
    Convergence { analysis: String, detail: String },
    #[error("singular matrix in {0}")]
    Singular(String),
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
