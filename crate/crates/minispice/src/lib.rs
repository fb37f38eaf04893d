//! A compact batch-mode circuit simulator for the SPICE subset that analog
//! sizing testbenches exercise: R/C/L, independent V/I sources (DC, AC,
//! SIN), linear controlled sources (E/G), and level-1 MOSFETs, with OP,
//! DC-sweep, AC, and transient analyses. Results are written as
//! ngspice-compatible ASCII rawfiles, so tools that drive `ngspice -b` can
//! drive this binary unchanged (and vice versa).

pub mod analysis;
pub mod circuit;
pub mod cli;
pub mod parse;
pub mod rawfile;
pub mod run;
pub mod solver;

pub use circuit::{Circuit, Element, SpiceError};
pub use parse::{parse_deck, parse_value};
pub use run::{run_deck, RunResult};
