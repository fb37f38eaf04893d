//! Automated analog circuit sizing with a SPICE engine in the loop.
//!
//! The crate is organized as a pipeline:
//!
//! * [`netlist`] — parse/serialize SPICE decks and expose the tunable
//!   sizing surface (MOSFET W/L, bias DC values) with bounds and matched
//!   groups.
//! * [`sim`] — plan analyses for a set of metrics, wrap the design in
//!   testbench decks, run the external batch SPICE engine, parse rawfiles.
//! * [`metrics`] — extract the eight opamp figures of merit from waveforms.
//! * [`targets`] — tolerance-relaxed bounds and pass/fail checking.
//! * [`agent`] — the iterative sizing loop: proposal engines suggest
//!   patches, the evaluator measures them, history accumulates.
//! * [`llm`] — a chat-completion client (two wire dialects, retries,
//!   record/replay transcripts) and the proposal engine built on it.
//! * [`bench`] — the bundled benchmark circuits, sizing campaigns, and
//!   mismatch/variation studies.
//! * [`cli`] — the `acsizer` command-line interface.

pub mod agent;
pub mod bench;
pub mod cli;
pub mod llm;
pub mod metrics;
pub mod netlist;
pub mod sim;
pub mod targets;
