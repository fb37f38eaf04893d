//! Analysis drivers. Each produces a [`Plot`]: named vectors over a set of
//! points, mirroring what ngspice writes into a rawfile.

use crate::circuit::{AnalysisCard, Circuit, Element, SpiceError};
use crate::solver::{
    self, mos_linearize, newton, solve_dc, vrow, DcParams, NewtonSettings, Stamps, Topology, GMIN,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct Variable {
    pub name: String,
    pub kind: &'static str,
}

#[derive(Debug, Clone)]
pub struct Plot {
    pub name: String,
    pub complex: bool,
    pub variables: Vec<Variable>,
    /// data[point][variable]
    pub data: Vec<Vec<Complex64>>,
}

/// Output vector layout shared by every analysis: optional abscissa, then
/// node voltages in node order, then branch currents in slot order.
struct VectorLayout {
    names: Vec<Variable>,
    /// Solution-vector index feeding each output column (abscissa excluded).
    rows: Vec<usize>,
}

fn layout(ckt: &Circuit, topo: &Topology, abscissa: Option<Variable>) -> VectorLayout {
    let mut names = Vec::new();
    let mut rows = Vec::new();
    if let Some(a) = abscissa {
        names.push(a);
    }
    for (id, node) in ckt.node_names.iter().enumerate().skip(1) {
        names.push(Variable {
            name: format!("v({node})"),
            kind: "voltage",
        });
        rows.push(vrow(id).expect("non-ground node"));
    }
    for (idx, el) in ckt.elements.iter().enumerate() {
        if el.has_branch() {
            names.push(Variable {
                name: format!("{}#branch", el.name()),
                kind: "current",
            });
            rows.push(topo.branch_row(idx));
        }
    }
    VectorLayout { names, rows }
}

/// Apply the `.save` list: keep the abscissa (when present) plus any saved
/// vectors. `i(<name>)` matches `<name>#branch`.
fn apply_saves(ckt: &Circuit, plot: &mut Plot, has_abscissa: bool) {
    if ckt.saves.is_empty() || ckt.saves.iter().any(|s| s == "all") {
        return;
    }
    let wanted: Vec<String> = ckt
        .saves
        .iter()
        .map(|s| {
            if let Some(inner) = s.strip_prefix("i(").and_then(|t| t.strip_suffix(')')) {
                format!("{inner}#branch")
            } else {
                s.clone()
            }
        })
        .collect();
    let keep: Vec<bool> = plot
        .variables
        .iter()
        .enumerate()
        .map(|(i, v)| (has_abscissa && i == 0) || wanted.contains(&v.name))
        .collect();
    plot.variables = plot
        .variables
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(v, _)| v.clone())
        .collect();
    for point in &mut plot.data {
        *point = point
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(v, _)| *v)
            .collect();
    }
}

fn real_point(layout: &VectorLayout, x: &DVector<f64>, abscissa: Option<f64>) -> Vec<Complex64> {
    let mut row = Vec::with_capacity(layout.names.len());
    if let Some(a) = abscissa {
        row.push(Complex64::new(a, 0.0));
    }
    for &r in &layout.rows {
        row.push(Complex64::new(x[r], 0.0));
    }
    row
}

pub fn run_op(ckt: &Circuit, topo: &Topology) -> Result<Plot, SpiceError> {
    let x = solve_dc(ckt, topo, None, None, None).map_err(|e| rename(e, "op"))?;
    let lay = layout(ckt, topo, None);
    let mut plot = Plot {
        name: "Operating Point".into(),
        complex: false,
        variables: lay.names.clone(),
        data: vec![real_point(&lay, &x, None)],
    };
    apply_saves(ckt, &mut plot, false);
    Ok(plot)
}

fn rename(e: SpiceError, analysis: &str) -> SpiceError {
    match e {
        SpiceError::Convergence { detail, .. } => SpiceError::Convergence {
            analysis: analysis.into(),
            detail,
        },
        other => other,
    }
}

pub fn run_dc_sweep(
    ckt: &Circuit,
    topo: &Topology,
    source: &str,
    start: f64,
    stop: f64,
    step: f64,
) -> Result<Plot, SpiceError> {
    if step <= 0.0 || stop < start {
        return Err(SpiceError::Unsupported(
            "dc sweep needs stop >= start and step > 0".into(),
        ));
    }
    if !ckt.elements.iter().any(
        |el| matches!(el, Element::Vsource { name, .. } | Element::Isource { name, .. } if name == source),
    ) {
        return Err(SpiceError::Unsupported(format!(
            "dc sweep source '{source}' not found"
        )));
    }
    let npts = ((stop - start) / step + 0.5).floor() as usize + 1;
    let lay = layout(
        ckt,
        topo,
        Some(Variable {
            name: "v-sweep".into(),
            kind: "voltage",
        }),
    );
    let mut data = Vec::with_capacity(npts);
    let mut prev: Option<DVector<f64>> = None;
    for k in 0..npts {
        let v = (start + k as f64 * step).min(stop);
        let x = solve_dc(ckt, topo, Some((source, v)), prev.as_ref(), None)
            .map_err(|e| rename(e, "dc"))?;
        data.push(real_point(&lay, &x, Some(v)));
        prev = Some(x);
    }
    let mut plot = Plot {
        name: "DC transfer characteristic".into(),
        complex: false,
        variables: lay.names.clone(),
        data,
    };
    apply_saves(ckt, &mut plot, true);
    Ok(plot)
}

/// Complex system for one AC frequency, linearized around the DC operating
/// point `xop`.
fn assemble_ac(
    ckt: &Circuit,
    topo: &Topology,
    xop: &DVector<f64>,
    omega: f64,
) -> (DMatrix<Complex64>, DVector<Complex64>) {
    let mut st = Stamps::<Complex64>::new(topo.n());
    let re = |v: f64| Complex64::new(v, 0.0);
    let jw = Complex64::new(0.0, omega);
    for (idx, el) in ckt.elements.iter().enumerate() {
        match el {
            Element::Resistor { a, b, ohms, .. } => st.conductance(*a, *b, re(1.0 / ohms)),
            Element::Capacitor { a, b, farads, .. } => st.conductance(*a, *b, jw * re(*farads)),
            Element::Inductor { a, b, henries, .. } => {
                let row = topo.branch_row(idx);
                st.branch(row, *a, *b, re(1.0));
                st.add(Some(row), Some(row), -jw * re(*henries));
            }
            Element::Vsource {
                pos, neg, ac_mag, ac_phase_deg, ..
            } => {
                let row = topo.branch_row(idx);
                st.branch(row, *pos, *neg, re(1.0));
                st.rhs(Some(row), Complex64::from_polar(*ac_mag, ac_phase_deg.to_radians()));
            }
            Element::Isource {
                pos, neg, ac_mag, ac_phase_deg, ..
            } => {
                let i = Complex64::from_polar(*ac_mag, ac_phase_deg.to_radians());
                st.current_from_to(*pos, *neg, i);
            }
            Element::Vcvs {
                pos, neg, cpos, cneg, gain, ..
            } => {
                let row = topo.branch_row(idx);
                st.branch(row, *pos, *neg, re(1.0));
                st.add(Some(row), vrow(*cpos), re(-gain));
                st.add(Some(row), vrow(*cneg), re(*gain));
            }
            Element::Vccs {
                pos, neg, cpos, cneg, gm, ..
            } => st.transconductance(*pos, *neg, *cpos, *cneg, re(*gm)),
            Element::Mosfet {
                d, g, s, b, model, w, l, ..
            } => {
                let m = &ckt.models[model];
                let lin = mos_linearize(
                    m,
                    *w,
                    *l,
                    solver::volt(xop, *d),
                    solver::volt(xop, *g),
                    solver::volt(xop, *s),
                    solver::volt(xop, *b),
                );
                let (rd, rg, rs, rb) = (vrow(*d), vrow(*g), vrow(*s), vrow(*b));
                for (col, gx) in [(rd, lin.gd), (rg, lin.gg), (rs, lin.gs), (rb, lin.gb)] {
                    st.add(rd, col, re(gx));
                    st.add(rs, col, re(-gx));
                }
                st.conductance(*d, *s, re(GMIN));
            }
        }
    }
    for i in 0..topo.n_nodes {
        st.a[(i, i)] += re(GMIN);
    }
    (st.a, st.z)
}

pub fn run_ac(
    ckt: &Circuit,
    topo: &Topology,
    points_per_decade: usize,
    fstart: f64,
    fstop: f64,
) -> Result<Plot, SpiceError> {
    let xop = solve_dc(ckt, topo, None, None, None).map_err(|e| rename(e, "ac"))?;
    let lay = layout(
        ckt,
        topo,
        Some(Variable {
            name: "frequency".into(),
            kind: "frequency",
        }),
    );
    let decades = (fstop / fstart).log10();
    let npts = (decades * points_per_decade as f64 + 0.5).floor() as usize + 1;
    let mut data = Vec::with_capacity(npts);
    for k in 0..npts {
        let f = (fstart * 10f64.powf(k as f64 / points_per_decade as f64)).min(fstop);
        let omega = 2.0 * std::f64::consts::PI * f;
        let (a, z) = assemble_ac(ckt, topo, &xop, omega);
        let sol = a
            .lu()
            .solve(&z)
            .ok_or_else(|| SpiceError::Singular("ac".into()))?;
        let mut row = Vec::with_capacity(lay.names.len());
        row.push(Complex64::new(f, 0.0));
        for &r in &lay.rows {
            row.push(sol[r]);
        }
        data.push(row);
    }
    let mut plot = Plot {
        name: "AC Analysis".into(),
        complex: true,
        variables: lay.names.clone(),
        data,
    };
    apply_saves(ckt, &mut plot, true);
    Ok(plot)
}

/// Reactive-element history carried across transient steps.
#[derive(Clone, Default)]
struct TranState {
    /// Capacitor element index -> (voltage, current) at the step start.
    cap: HashMap<usize, (f64, f64)>,
    /// Inductor element index -> (current, voltage) at the step start.
    ind: HashMap<usize, (f64, f64)>,
}

fn assemble_tran(
    ckt: &Circuit,
    topo: &Topology,
    x: &DVector<f64>,
    t: f64,
    h: f64,
    state: &TranState,
) -> Stamps<f64> {
    let p = DcParams {
        time: Some(t),
        ..DcParams::default()
    };
    let mut st = Stamps::<f64>::new(topo.n());
    for (idx, el) in ckt.elements.iter().enumerate() {
        match el {
            Element::Resistor { a, b, ohms, .. } => st.conductance(*a, *b, 1.0 / ohms),
            Element::Capacitor { a, b, farads, .. } => {
                let (v0, i0) = state.cap[&idx];
                let geq = 2.0 * farads / h;
                let ieq = -(geq * v0 + i0);
                st.conductance(*a, *b, geq);
                st.current_from_to(*a, *b, ieq);
            }
            Element::Inductor { a, b, henries, .. } => {
                let (i0, v0) = state.ind[&idx];
                let row = topo.branch_row(idx);
                let req = 2.0 * henries / h;
                st.branch(row, *a, *b, 1.0);
                st.add(Some(row), Some(row), -req);
                st.rhs(Some(row), -(req * i0 + v0));
            }
            Element::Vsource {
                name, pos, neg, dc, wave, ..
            } => {
                let row = topo.branch_row(idx);
                st.branch(row, *pos, *neg, 1.0);
                st.rhs(Some(row), solver::source_value(name, *dc, wave, &p));
            }
            Element::Isource {
                name, pos, neg, dc, wave, ..
            } => {
                let v = solver::source_value(name, *dc, wave, &p);
                st.current_from_to(*pos, *neg, v);
            }
            Element::Vcvs {
                pos, neg, cpos, cneg, gain, ..
            } => {
                let row = topo.branch_row(idx);
                st.branch(row, *pos, *neg, 1.0);
                st.add(Some(row), vrow(*cpos), -gain);
                st.add(Some(row), vrow(*cneg), *gain);
            }
            Element::Vccs {
                pos, neg, cpos, cneg, gm, ..
            } => st.transconductance(*pos, *neg, *cpos, *cneg, *gm),
            Element::Mosfet { .. } => solver::stamp_mosfet(&mut st, ckt, el, x),
        }
    }
    for i in 0..topo.n_nodes {
        st.a[(i, i)] += GMIN;
    }
    st
}

fn diff_volt(x: &DVector<f64>, a: usize, b: usize) -> f64 {
    solver::volt(x, a) - solver::volt(x, b)
}

fn update_state(
    ckt: &Circuit,
    topo: &Topology,
    state: &TranState,
    x: &DVector<f64>,
    h: f64,
) -> TranState {
    let mut next = state.clone();
    for (idx, el) in ckt.elements.iter().enumerate() {
        match el {
            Element::Capacitor { a, b, farads, .. } => {
                let (v0, i0) = state.cap[&idx];
                let geq = 2.0 * farads / h;
                let v1 = diff_volt(x, *a, *b);
                let i1 = geq * (v1 - v0) - i0;
                next.cap.insert(idx, (v1, i1));
            }
            Element::Inductor { henries, .. } => {
                let (i0, v0) = state.ind[&idx];
                let i1 = x[topo.branch_row(idx)];
                let v1 = 2.0 * henries / h * (i1 - i0) - v0;
                next.ind.insert(idx, (i1, v1));
            }
            _ => {}
        }
    }
    next
}

/// One trapezoidal step `t0 -> t1`; halves the step (up to 2^8 pieces) when
/// the Newton iteration refuses to converge.
fn tran_step(
    ckt: &Circuit,
    topo: &Topology,
    x: &DVector<f64>,
    state: &TranState,
    t0: f64,
    t1: f64,
    depth: usize,
) -> Result<(DVector<f64>, TranState), SpiceError> {
    let h = t1 - t0;
    let settings = NewtonSettings::default();
    let attempt = newton(
        |xi| assemble_tran(ckt, topo, xi, t1, h, state),
        x.clone(),
        topo.n_nodes,
        &settings,
    );
    match attempt {
        Ok(xn) => {
            let next = update_state(ckt, topo, state, &xn, h);
            Ok((xn, next))
        }
        Err(e) => {
            if depth >= 8 {
                return Err(SpiceError::Convergence {
                    analysis: "tran".into(),
                    detail: format!("time step {t1:.6e} failed after refinement ({e})"),
                });
            }
            let tm = 0.5 * (t0 + t1);
            let (xm, sm) = tran_step(ckt, topo, x, state, t0, tm, depth + 1)?;
            tran_step(ckt, topo, &xm, &sm, tm, t1, depth + 1)
        }
    }
}

pub fn run_tran(
    ckt: &Circuit,
    topo: &Topology,
    tstep: f64,
    tstop: f64,
) -> Result<Plot, SpiceError> {
    // Initial point: DC solution with time-dependent sources at t=0.
    let x0 = solve_dc(ckt, topo, None, None, Some(0.0)).map_err(|e| rename(e, "tran"))?;
    let mut state = TranState::default();
    for (idx, el) in ckt.elements.iter().enumerate() {
        match el {
            Element::Capacitor { a, b, .. } => {
                state.cap.insert(idx, (diff_volt(&x0, *a, *b), 0.0));
            }
            Element::Inductor { .. } => {
                state.ind.insert(idx, (x0[topo.branch_row(idx)], 0.0));
            }
            _ => {}
        }
    }
    let lay = layout(
        ckt,
        topo,
        Some(Variable {
            name: "time".into(),
            kind: "time",
        }),
    );
    let nsteps = (tstop / tstep + 0.5).floor() as usize;
    let mut data = Vec::with_capacity(nsteps + 1);
    data.push(real_point(&lay, &x0, Some(0.0)));
    let mut x = x0;
    for k in 1..=nsteps {
        let t0 = (k - 1) as f64 * tstep;
        let t1 = (k as f64 * tstep).min(tstop);
        let (xn, sn) = tran_step(ckt, topo, &x, &state, t0, t1, 0)?;
        x = xn;
        state = sn;
        data.push(real_point(&lay, &x, Some(t1)));
    }
    let mut plot = Plot {
        name: "Transient Analysis".into(),
        complex: false,
        variables: lay.names.clone(),
        data,
    };
    apply_saves(ckt, &mut plot, true);
    Ok(plot)
}

pub fn run_analysis(ckt: &Circuit, topo: &Topology, card: &AnalysisCard) -> Result<Plot, SpiceError> {
    match card {
        AnalysisCard::Op => run_op(ckt, topo),
        AnalysisCard::DcSweep {
            source, start, stop, step,
        } => run_dc_sweep(ckt, topo, source, *start, *stop, *step),
        AnalysisCard::Ac {
            points_per_decade, fstart, fstop,
        } => run_ac(ckt, topo, *points_per_decade, *fstart, *fstop),
        AnalysisCard::Tran { tstep, tstop } => run_tran(ckt, topo, *tstep, *tstop),
    }
}
