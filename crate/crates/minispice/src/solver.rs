//! Modified nodal analysis: matrix stamping, the level-1 MOSFET companion
//! model, damped Newton iteration, and the DC solve ladder (direct, then
//! gmin stepping, then source stepping).

use crate::circuit::{Circuit, Element, MosModel, MosPolarity, NodeId, SpiceError};
use nalgebra::{ComplexField, DMatrix, DVector};

/// Conductance tied from every node to ground so the matrix stays
/// well-conditioned with devices cut off.
pub const GMIN: f64 = 1e-12;

/// Unknown ordering: node voltages for ids `1..=n_nodes`, then one branch
/// current per V/E/L element in deck order.
pub struct Topology {
    pub n_nodes: usize,
    pub n_branch: usize,
    /// Element index -> branch slot, for elements that carry one.
    pub branch_slot: Vec<Option<usize>>,
}

impl Topology {
    pub fn build(ckt: &Circuit) -> Self {
        let mut slots = Vec::with_capacity(ckt.elements.len());
        let mut n_branch = 0;
        for el in &ckt.elements {
            if el.has_branch() {
                slots.push(Some(n_branch));
                n_branch += 1;
            } else {
                slots.push(None);
            }
        }
        Topology {
            n_nodes: ckt.node_count() - 1,
            n_branch,
            branch_slot: slots,
        }
    }

    pub fn n(&self) -> usize {
        self.n_nodes + self.n_branch
    }

    pub fn branch_row(&self, element_idx: usize) -> usize {
        self.n_nodes + self.branch_slot[element_idx].expect("element has a branch")
    }
}

/// Matrix row for a node id; ground has none.
pub fn vrow(node: NodeId) -> Option<usize> {
    if node == 0 {
        None
    } else {
        Some(node - 1)
    }
}

/// Dense `A x = z` under assembly, generic over real (DC/TRAN) and complex
/// (AC) scalars.
pub struct Stamps<T: ComplexField + Copy> {
    pub a: DMatrix<T>,
    pub z: DVector<T>,
}

impl<T: ComplexField + Copy> Stamps<T> {
    pub fn new(n: usize) -> Self {
        Stamps {
            a: DMatrix::zeros(n, n),
            z: DVector::zeros(n),
        }
    }

    pub fn add(&mut self, r: Option<usize>, c: Option<usize>, v: T) {
        if let (Some(r), Some(c)) = (r, c) {
            self.a[(r, c)] += v;
        }
    }

    pub fn rhs(&mut self, r: Option<usize>, v: T) {
        if let Some(r) = r {
            self.z[r] += v;
        }
    }

    /// Two-terminal conductance between nodes `a` and `b`.
    pub fn conductance(&mut self, a: NodeId, b: NodeId, g: T) {
        let (ra, rb) = (vrow(a), vrow(b));
        self.add(ra, ra, g);
        self.add(rb, rb, g);
        self.add(ra, rb, -g);
        self.add(rb, ra, -g);
    }

    /// Independent current `i` flowing out of node `from`, through the
    /// element, into node `to`.
    pub fn current_from_to(&mut self, from: NodeId, to: NodeId, i: T) {
        self.rhs(vrow(from), -i);
        self.rhs(vrow(to), i);
    }

    /// VCCS: current `g * (v(cp) - v(cn))` from `pos` into `neg`.
    pub fn transconductance(&mut self, pos: NodeId, neg: NodeId, cp: NodeId, cn: NodeId, g: T) {
        let (rp, rn, rcp, rcn) = (vrow(pos), vrow(neg), vrow(cp), vrow(cn));
        self.add(rp, rcp, g);
        self.add(rp, rcn, -g);
        self.add(rn, rcp, -g);
        self.add(rn, rcn, g);
    }

    /// Couple a branch-current unknown into the KCL rows of its terminals
    /// and start the branch equation `v(pos) - v(neg) ... = rhs`.
    pub fn branch(&mut self, row: usize, pos: NodeId, neg: NodeId, one: T) {
        let (rp, rn) = (vrow(pos), vrow(neg));
        self.add(rp, Some(row), one);
        self.add(rn, Some(row), -one);
        self.add(Some(row), rp, one);
        self.add(Some(row), rn, -one);
    }
}

/// Small-signal linearization of a MOSFET at a bias point: drain current
/// and its partial derivatives with respect to the terminal voltages.
#[derive(Debug, Clone, Copy)]
pub struct MosLin {
    pub id: f64,
    pub gd: f64,
    pub gg: f64,
    pub gs: f64,
    pub gb: f64,
}

/// Square-law drain current (current into the drain terminal, sign included)
/// for arbitrary terminal voltages. Handles PMOS by reflection and drain/source
/// reversal by swapping roles.
pub fn mos_drain_current(m: &MosModel, w: f64, l: f64, vd: f64, vg: f64, vs: f64, vb: f64) -> f64 {
    let p = match m.polarity {
        MosPolarity::Nmos => 1.0,
        MosPolarity::Pmos => -1.0,
    };
    // NMOS-equivalent frame.
    let (fd, fg, fs, fb) = (p * vd, p * vg, p * vs, p * vb);
    let reversed = fd < fs;
    let (hi, lo) = if reversed { (fs, fd) } else { (fd, fs) };
    let vgs = fg - lo;
    let vds = hi - lo;
    let vbs = fb - lo;
    let vto = p * m.vto;
    let vth = if m.gamma != 0.0 {
        let arg = (m.phi - vbs).max(1e-9);
        vto + m.gamma * (arg.sqrt() - m.phi.max(0.0).sqrt())
    } else {
        vto
    };
    let beta = m.kp * w / l;
    let vov = vgs - vth;
    let i_frame = if vov <= 0.0 {
        0.0
    } else if vds >= vov {
        0.5 * beta * vov * vov * (1.0 + m.lambda * vds)
    } else {
        beta * (vov - 0.5 * vds) * vds * (1.0 + m.lambda * vds)
    };
    let into_frame_drain = if reversed { -i_frame } else { i_frame };
    p * into_frame_drain
}

/// Linearize by central differences; the square law is piecewise smooth and
/// a numeric Jacobian keeps the drain/source-reversal bookkeeping honest.
pub fn mos_linearize(m: &MosModel, w: f64, l: f64, vd: f64, vg: f64, vs: f64, vb: f64) -> MosLin {
    const H: f64 = 1e-6;
    let id = mos_drain_current(m, w, l, vd, vg, vs, vb);
    let dd = (mos_drain_current(m, w, l, vd + H, vg, vs, vb)
        - mos_drain_current(m, w, l, vd - H, vg, vs, vb))
        / (2.0 * H);
    let dg = (mos_drain_current(m, w, l, vd, vg + H, vs, vb)
        - mos_drain_current(m, w, l, vd, vg - H, vs, vb))
        / (2.0 * H);
    let ds = (mos_drain_current(m, w, l, vd, vg, vs + H, vb)
        - mos_drain_current(m, w, l, vd, vg, vs - H, vb))
        / (2.0 * H);
    let db = (mos_drain_current(m, w, l, vd, vg, vs, vb + H)
        - mos_drain_current(m, w, l, vd, vg, vs, vb - H))
        / (2.0 * H);
    MosLin {
        id,
        gd: dd,
        gg: dg,
        gs: ds,
        gb: db,
    }
}

/// Read terminal voltages of a node tuple out of the solution vector.
pub fn volt(x: &DVector<f64>, node: NodeId) -> f64 {
    match vrow(node) {
        Some(r) => x[r],
        None => 0.0,
    }
}

/// Stamp a linearized MOSFET around iterate `x`.
pub fn stamp_mosfet(st: &mut Stamps<f64>, ckt: &Circuit, el: &Element, x: &DVector<f64>) {
    let (d, g, s, b, model, w, l) = match el {
        Element::Mosfet {
            d, g, s, b, model, w, l, ..
        } => (*d, *g, *s, *b, model, *w, *l),
        _ => unreachable!("not a mosfet"),
    };
    let m = &ckt.models[model];
    let (vd, vg, vs, vb) = (volt(x, d), volt(x, g), volt(x, s), volt(x, b));
    let lin = mos_linearize(m, w, l, vd, vg, vs, vb);
    let (rd, rg, rs, rb) = (vrow(d), vrow(g), vrow(s), vrow(b));
    for (col, gx) in [(rd, lin.gd), (rg, lin.gg), (rs, lin.gs), (rb, lin.gb)] {
        st.add(rd, col, gx);
        st.add(rs, col, -gx);
    }
    let i_lin = lin.id - (lin.gd * vd + lin.gg * vg + lin.gs * vs + lin.gb * vb);
    st.rhs(rd, -i_lin);
    st.rhs(rs, i_lin);
    // Keep the drain-source path weakly conductive even in cutoff.
    st.conductance(d, s, GMIN);
}

/// DC / operating-point assembly parameters.
#[derive(Clone)]
pub struct DcParams {
    /// Homotopy scale on all independent sources (source stepping).
    pub scale: f64,
    /// Sweep override: (lowercased source name, value).
    pub sweep: Option<(String, f64)>,
    /// Evaluate time-dependent sources at this instant instead of their DC
    /// value (used for the transient initial point).
    pub time: Option<f64>,
    pub gmin: f64,
}

impl Default for DcParams {
    fn default() -> Self {
        DcParams {
            scale: 1.0,
            sweep: None,
            time: None,
            gmin: GMIN,
        }
    }
}

pub fn source_value(
    name: &str,
    dc: f64,
    wave: &Option<crate::circuit::SinWave>,
    p: &DcParams,
) -> f64 {
    let base = if let Some((sw, v)) = &p.sweep {
        if sw == name {
            return *v * p.scale;
        } else {
            dc
        }
    } else {
        dc
    };
    let val = match (p.time, wave) {
        (Some(t), Some(w)) => w.value_at(t),
        _ => base,
    };
    val * p.scale
}

pub fn assemble_dc(ckt: &Circuit, topo: &Topology, x: &DVector<f64>, p: &DcParams) -> Stamps<f64> {
    let mut st = Stamps::<f64>::new(topo.n());
    for (idx, el) in ckt.elements.iter().enumerate() {
        match el {
            Element::Resistor { a, b, ohms, .. } => st.conductance(*a, *b, 1.0 / ohms),
            Element::Capacitor { .. } => {}
            Element::Inductor { a, b, .. } => {
                // DC short: v(a) - v(b) = 0 with a free branch current.
                st.branch(topo.branch_row(idx), *a, *b, 1.0);
            }
            Element::Vsource {
                name, pos, neg, dc, wave, ..
            } => {
                let row = topo.branch_row(idx);
                st.branch(row, *pos, *neg, 1.0);
                st.rhs(Some(row), source_value(name, *dc, wave, p));
            }
            Element::Isource {
                name, pos, neg, dc, wave, ..
            } => {
                let v = source_value(name, *dc, wave, p);
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
            Element::Mosfet { .. } => stamp_mosfet(&mut st, ckt, el, x),
        }
    }
    for i in 0..topo.n_nodes {
        st.a[(i, i)] += p.gmin;
    }
    st
}

pub struct NewtonSettings {
    pub max_iter: usize,
    /// Per-iteration cap on node-voltage movement (damping).
    pub dv_limit: f64,
    pub reltol: f64,
    pub vntol: f64,
    pub abstol: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            max_iter: 200,
            dv_limit: 0.5,
            reltol: 1e-3,
            vntol: 1e-6,
            abstol: 1e-12,
        }
    }
}

/// Damped Newton-Raphson over an assembly closure.
pub fn newton<F>(
    mut assemble: F,
    x0: DVector<f64>,
    n_nodes: usize,
    s: &NewtonSettings,
) -> Result<DVector<f64>, String>
where
    F: FnMut(&DVector<f64>) -> Stamps<f64>,
{
    let mut x = x0;
    for _ in 0..s.max_iter {
        let st = assemble(&x);
        let xn = match st.a.lu().solve(&st.z) {
            Some(v) => v,
            None => return Err("singular matrix".into()),
        };
        if xn.iter().any(|v| !v.is_finite()) {
            return Err("non-finite solution".into());
        }
        let mut converged = true;
        let mut maxdv: f64 = 0.0;
        for i in 0..x.len() {
            let d = (xn[i] - x[i]).abs();
            let floor = if i < n_nodes { s.vntol } else { s.abstol };
            if d > floor + s.reltol * xn[i].abs().max(x[i].abs()) {
                converged = false;
            }
            if i < n_nodes {
                maxdv = maxdv.max(d);
            }
        }
        if converged {
            return Ok(xn);
        }
        if maxdv > s.dv_limit {
            let alpha = s.dv_limit / maxdv;
            x = &x * (1.0 - alpha) + xn * alpha;
        } else {
            x = xn;
        }
    }
    Err(format!("no convergence in {} iterations", s.max_iter))
}

/// Full DC solve: direct Newton, then gmin stepping, then source stepping.
pub fn solve_dc(
    ckt: &Circuit,
    topo: &Topology,
    sweep: Option<(&str, f64)>,
    warm: Option<&DVector<f64>>,
    time: Option<f64>,
) -> Result<DVector<f64>, SpiceError> {
    let settings = NewtonSettings::default();
    let sweep_owned = sweep.map(|(n, v)| (n.to_ascii_lowercase(), v));
    let params = |scale: f64, gmin: f64| DcParams {
        scale,
        sweep: sweep_owned.clone(),
        time,
        gmin,
    };
    let zeros = DVector::zeros(topo.n());

    let starts: Vec<DVector<f64>> = match warm {
        Some(w) => vec![w.clone(), zeros.clone()],
        None => vec![zeros.clone()],
    };
    for x0 in &starts {
        let p = params(1.0, GMIN);
        if let Ok(x) = newton(|x| assemble_dc(ckt, topo, x, &p), x0.clone(), topo.n_nodes, &settings) {
            return Ok(x);
        }
    }

    // Gmin stepping: relax every node toward ground, then tighten.
    'gmin: {
        let mut x = zeros.clone();
        let mut g = 1e-2;
        while g >= GMIN {
            let p = params(1.0, g);
            match newton(|xi| assemble_dc(ckt, topo, xi, &p), x.clone(), topo.n_nodes, &settings) {
                Ok(xs) => x = xs,
                Err(_) => break 'gmin,
            }
            g /= 10.0;
        }
        return Ok(x);
    }

    // Source stepping: ramp all independent sources from zero.
    let mut x = zeros;
    let mut alpha: f64 = 0.0;
    let mut step: f64 = 0.1;
    while alpha < 1.0 {
        let target = (alpha + step).min(1.0);
        let p = params(target, GMIN);
        match newton(|xi| assemble_dc(ckt, topo, xi, &p), x.clone(), topo.n_nodes, &settings) {
            Ok(xs) => {
                x = xs;
                alpha = target;
                step = (step * 2.0).min(0.2);
            }
            Err(e) => {
                step /= 2.0;
                if step < 1e-4 {
                    return Err(SpiceError::Convergence {
                        analysis: "dc".into(),
                        detail: format!("source stepping stalled at {:.1}% ({e})", alpha * 100.0),
                    });
                }
            }
        }
    }
    Ok(x)
}
