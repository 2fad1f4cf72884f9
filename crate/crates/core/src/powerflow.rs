//! Ground-truth DC and AC power flow plus measurement synthesis.
//!
//! Meter layout is index stable across topologies: every branch keeps its
//! flow meters even when switched out (they read zero), so vectors from
//! different MTD periods line up column for column.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::casefile::{branch_admittance, BusKind, LoadProfile, NetworkCase};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Dc,
    Ac,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dc => "dc",
            Mode::Ac => "ac",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dc" => Ok(Mode::Dc),
            "ac" => Ok(Mode::Ac),
            _ => Err(Error::InvalidArgument(format!("unknown mode '{s}'"))),
        }
    }
}

/// One meter. Branch meters hold the branch position, bus meters the bus id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Meter {
    FlowP(usize),
    FlowQ(usize),
    InjP(usize),
    InjQ(usize),
    Vm(usize),
}

impl fmt::Display for Meter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Meter::FlowP(k) => write!(f, "flow_p:{k}"),
            Meter::FlowQ(k) => write!(f, "flow_q:{k}"),
            Meter::InjP(b) => write!(f, "inj_p:{b}"),
            Meter::InjQ(b) => write!(f, "inj_q:{b}"),
            Meter::Vm(b) => write!(f, "vm:{b}"),
        }
    }
}

impl FromStr for Meter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad meter id '{s}'"));
        let (kind, idx) = s.split_once(':').ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        Ok(match kind {
            "flow_p" => Meter::FlowP(idx),
            "flow_q" => Meter::FlowQ(idx),
            "inj_p" => Meter::InjP(idx),
            "inj_q" => Meter::InjQ(idx),
            "vm" => Meter::Vm(idx),
            _ => return Err(bad()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    /// Radians, one per non-slack bus in case order.
    pub angles: Vec<f64>,
    /// Per-unit magnitudes for every bus (AC only).
    pub magnitudes: Option<Vec<f64>>,
    pub mode: Mode,
}

impl StateVector {
    pub fn dc(angles: Vec<f64>) -> Self {
        StateVector { angles, magnitudes: None, mode: Mode::Dc }
    }

    /// Flattened `[angles, magnitudes]`.
    pub fn to_dvector(&self) -> DVector<f64> {
        let mut v = self.angles.clone();
        if let Some(m) = &self.magnitudes {
            v.extend_from_slice(m);
        }
        DVector::from_vec(v)
    }

    pub fn dim(&self) -> usize {
        self.angles.len() + self.magnitudes.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub values: DVector<f64>,
    pub meters: Vec<Meter>,
    pub mode: Mode,
}

impl MeasurementVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same meters, different values.
    pub fn with_values(&self, values: DVector<f64>) -> Self {
        assert_eq!(values.len(), self.meters.len());
        MeasurementVector { values, meters: self.meters.clone(), mode: self.mode }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyMatrix {
    pub entries: DMatrix<f64>,
    pub meters: Vec<Meter>,
    /// Non-slack bus ids, one per column.
    pub state_index: Vec<usize>,
}

impl TopologyMatrix {
    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n(&self) -> usize {
        self.entries.ncols()
    }

    /// Measurements `H x` for a state.
    pub fn apply(&self, x: &DVector<f64>) -> MeasurementVector {
        MeasurementVector { values: &self.entries * x, meters: self.meters.clone(), mode: Mode::Dc }
    }
}

pub fn dc_meters(case: &NetworkCase) -> Vec<Meter> {
    let mut v: Vec<Meter> = (0..case.branch_count()).map(Meter::FlowP).collect();
    v.extend(case.buses.iter().map(|b| Meter::InjP(b.id)));
    v
}

pub fn ac_meters(case: &NetworkCase) -> Vec<Meter> {
    let mut v: Vec<Meter> = (0..case.branch_count()).map(Meter::FlowP).collect();
    v.extend((0..case.branch_count()).map(Meter::FlowQ));
    v.extend(case.buses.iter().map(|b| Meter::InjP(b.id)));
    v.extend(case.buses.iter().map(|b| Meter::InjQ(b.id)));
    v.extend(case.buses.iter().map(|b| Meter::Vm(b.id)));
    v
}

/// Scales every bus demand by an independent `Normal(1, variation²)` factor.
/// The same factor applies to the bus's real and reactive demand.
pub fn sample_loads<R: Rng + ?Sized>(base: &LoadProfile, variation: f64, rng: &mut R) -> LoadProfile {
    assert!(variation >= 0.0, "variation must be non-negative");
    let mut out = base.clone();
    if variation == 0.0 {
        return out;
    }
    for i in 0..base.len() {
        let z: f64 = rng.sample(StandardNormal);
        let mut f = 1.0 + variation * z;
        if f < 0.0 {
            log::warn!("negative load factor {f:.4} at bus position {i} clamped to 0");
            f = 0.0;
        }
        out.p[i] *= f;
        out.q[i] *= f;
    }
    out
}

fn rank_of(h: &DMatrix<f64>) -> usize {
    let sv = h.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * (h.nrows().max(h.ncols()) as f64) * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

/// DC measurement Jacobian over [`dc_meters`].
pub fn build_h_dc(case: &NetworkCase) -> Result<TopologyMatrix> {
    let h = dc_jacobian(case);
    let n = h.entries.ncols();
    let rank = rank_of(&h.entries);
    if rank < n {
        return Err(Error::Unobservable { rank, n });
    }
    Ok(h)
}

// Column of each bus position in the DC state, None for the slack.
fn state_columns(case: &NetworkCase) -> Vec<Option<usize>> {
    let mut col = 0;
    case.buses
        .iter()
        .map(|b| {
            if b.kind == BusKind::Slack {
                None
            } else {
                col += 1;
                Some(col - 1)
            }
        })
        .collect()
}

fn dc_jacobian(case: &NetworkCase) -> TopologyMatrix {
    let cols = state_columns(case);
    let nb = case.bus_count();
    let nl = case.branch_count();
    let n = nb - 1;
    let mut h = DMatrix::zeros(nl + nb, n);
    for (k, br) in case.branches.iter().enumerate() {
        if !br.in_service {
            continue;
        }
        let b = 1.0 / br.reactance_x;
        let f = case.bus_index(br.from_bus).unwrap();
        let t = case.bus_index(br.to_bus).unwrap();
        if let Some(c) = cols[f] {
            h[(k, c)] += b;
            h[(nl + f, c)] += b;
            h[(nl + t, c)] -= b;
        }
        if let Some(c) = cols[t] {
            h[(k, c)] -= b;
            h[(nl + f, c)] -= b;
            h[(nl + t, c)] += b;
        }
    }
    TopologyMatrix { entries: h, meters: dc_meters(case), state_index: case.state_buses() }
}

/// DC power flow: angles from the reduced susceptance system, measurements `H x`.
pub fn dc_flow(case: &NetworkCase, loads: &LoadProfile) -> Result<(StateVector, MeasurementVector)> {
    check_loads(case, loads)?;
    let h = dc_jacobian(case);
    let nl = case.branch_count();
    let cols = state_columns(case);
    let n = h.n();
    let b = h.entries.rows(nl, case.bus_count()).into_owned();
    let mut bred = DMatrix::zeros(n, n);
    let mut p = DVector::zeros(n);
    for (i, bus) in case.buses.iter().enumerate() {
        if let Some(r) = cols[i] {
            bred.set_row(r, &b.row(i));
            p[r] = bus.gen_p - loads.p[i];
        }
    }
    let theta = bred.lu().solve(&p).ok_or(Error::Singular)?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    let z = h.apply(&theta);
    Ok((StateVector::dc(theta.as_slice().to_vec()), z))
}

fn check_loads(case: &NetworkCase, loads: &LoadProfile) -> Result<()> {
    if loads.p.len() != case.bus_count() || loads.q.len() != case.bus_count() {
        return Err(Error::InvalidArgument(format!(
            "load profile has {} entries, case has {} buses",
            loads.p.len(),
            case.bus_count()
        )));
    }
    Ok(())
}

/// Per-branch quantities for the AC model: series (g, b) and half charging.
#[derive(Debug, Clone, Copy)]
struct Line {
    f: usize,
    t: usize,
    g: f64,
    b: f64,
    bsh: f64,
}

fn ac_lines(case: &NetworkCase) -> Vec<Option<Line>> {
    case.branches
        .iter()
        .map(|br| {
            if !br.in_service {
                return None;
            }
            // in-service branches have x != 0, so this cannot fail
            let (g, b) = branch_admittance(br).ok()?;
            Some(Line {
                f: case.bus_index(br.from_bus).unwrap(),
                t: case.bus_index(br.to_bus).unwrap(),
                g,
                b,
                bsh: br.shunt_b / 2.0,
            })
        })
        .collect()
}

// (P_ij, Q_ij, P_ji, Q_ji) of the pi model.
#[inline]
fn flows(l: &Line, vi: f64, vj: f64, th: f64) -> [f64; 4] {
    let (s, c) = th.sin_cos();
    let vv = vi * vj;
    [
        vi * vi * l.g - vv * (l.g * c + l.b * s),
        -vi * vi * (l.b + l.bsh) - vv * (l.g * s - l.b * c),
        vj * vj * l.g - vv * (l.g * c - l.b * s),
        -vj * vj * (l.b + l.bsh) + vv * (l.g * s + l.b * c),
    ]
}

// d/dθi, d/dVi, d/dVj of each flow in `flows`; d/dθj = -d/dθi.
#[inline]
fn flow_partials(l: &Line, vi: f64, vj: f64, th: f64) -> [[f64; 3]; 4] {
    let (s, c) = th.sin_cos();
    let (g, b, bsh) = (l.g, l.b, l.bsh);
    let vv = vi * vj;
    [
        [vv * (g * s - b * c), 2.0 * vi * g - vj * (g * c + b * s), -vi * (g * c + b * s)],
        [-vv * (g * c + b * s), -2.0 * vi * (b + bsh) - vj * (g * s - b * c), -vi * (g * s - b * c)],
        [vv * (g * s + b * c), -vj * (g * c - b * s), 2.0 * vj * g - vi * (g * c - b * s)],
        [vv * (g * c - b * s), vj * (g * s + b * c), -2.0 * vj * (b + bsh) + vi * (g * s + b * c)],
    ]
}

/// AC measurement function `h(θ, V)` over [`ac_meters`]. `theta` and `vm`
/// hold one entry per bus in case order.
pub fn ac_measurements(case: &NetworkCase, theta: &[f64], vm: &[f64]) -> DVector<f64> {
    ac_eval(case, &ac_lines(case), theta, vm)
}

fn ac_eval(case: &NetworkCase, lines: &[Option<Line>], theta: &[f64], vm: &[f64]) -> DVector<f64> {
    let nl = case.branch_count();
    let nb = case.bus_count();
    let mut z = DVector::zeros(2 * nl + 3 * nb);
    for (k, l) in lines.iter().enumerate() {
        let Some(l) = l else { continue };
        let [pij, qij, pji, qji] = flows(l, vm[l.f], vm[l.t], theta[l.f] - theta[l.t]);
        z[k] = pij;
        z[nl + k] = qij;
        z[2 * nl + l.f] += pij;
        z[2 * nl + l.t] += pji;
        z[2 * nl + nb + l.f] += qij;
        z[2 * nl + nb + l.t] += qji;
    }
    for i in 0..nb {
        z[2 * nl + 2 * nb + i] = vm[i];
    }
    z
}

/// Jacobian of [`ac_measurements`] with respect to `[θ (all buses), V (all buses)]`.
pub fn ac_jacobian(case: &NetworkCase, theta: &[f64], vm: &[f64]) -> DMatrix<f64> {
    ac_jac(case, &ac_lines(case), theta, vm)
}

fn ac_jac(case: &NetworkCase, lines: &[Option<Line>], theta: &[f64], vm: &[f64]) -> DMatrix<f64> {
    let nl = case.branch_count();
    let nb = case.bus_count();
    let mut j = DMatrix::zeros(2 * nl + 3 * nb, 2 * nb);
    for (k, l) in lines.iter().enumerate() {
        let Some(l) = l else { continue };
        let d = flow_partials(l, vm[l.f], vm[l.t], theta[l.f] - theta[l.t]);
        // rows hit by each of P_ij, Q_ij, P_ji, Q_ji
        let rows: [&[usize]; 4] = [
            &[k, 2 * nl + l.f],
            &[nl + k, 2 * nl + nb + l.f],
            &[2 * nl + l.t],
            &[2 * nl + nb + l.t],
        ];
        for (q, rs) in rows.iter().enumerate() {
            for &r in rs.iter() {
                j[(r, l.f)] += d[q][0];
                j[(r, l.t)] -= d[q][0];
                j[(r, nb + l.f)] += d[q][1];
                j[(r, nb + l.t)] += d[q][2];
            }
        }
    }
    for i in 0..nb {
        j[(2 * nl + 2 * nb + i, nb + i)] = 1.0;
    }
    j
}

/// Newton-Raphson outcome with solver diagnostics.
#[derive(Debug, Clone)]
pub struct AcSolution {
    pub state: StateVector,
    pub measurements: MeasurementVector,
    pub iterations: usize,
    pub mismatch: f64,
}

pub const NR_MAX_ITER: usize = 20;
pub const NR_TOL: f64 = 1e-6;

/// AC power flow by Newton-Raphson from a flat start.
pub fn ac_flow(case: &NetworkCase, loads: &LoadProfile) -> Result<(StateVector, MeasurementVector)> {
    ac_flow_detailed(case, loads).map(|s| (s.state, s.measurements))
}

pub fn ac_flow_detailed(case: &NetworkCase, loads: &LoadProfile) -> Result<AcSolution> {
    check_loads(case, loads)?;
    let nl = case.branch_count();
    let nb = case.bus_count();
    let lines = ac_lines(case);
    let mut theta = vec![0.0; nb];
    let mut vm: Vec<f64> =
        case.buses.iter().map(|b| if b.kind == BusKind::Load { 1.0 } else { b.v_setpoint }).collect();

    // equations: P at non-slack buses, Q at load buses; unknowns in the same order
    let p_rows: Vec<usize> = (0..nb).filter(|&i| case.buses[i].kind != BusKind::Slack).collect();
    let q_rows: Vec<usize> = (0..nb).filter(|&i| case.buses[i].kind == BusKind::Load).collect();
    let np = p_rows.len();
    let neq = np + q_rows.len();
    let spec_p: Vec<f64> = (0..nb).map(|i| case.buses[i].gen_p - loads.p[i]).collect();
    let spec_q: Vec<f64> = (0..nb).map(|i| -loads.q[i]).collect();

    let mismatch = |z: &DVector<f64>| -> DVector<f64> {
        let mut f = DVector::zeros(neq);
        for (r, &i) in p_rows.iter().enumerate() {
            f[r] = spec_p[i] - z[2 * nl + i];
        }
        for (r, &i) in q_rows.iter().enumerate() {
            f[np + r] = spec_q[i] - z[2 * nl + nb + i];
        }
        f
    };

    let mut iterations = 0;
    loop {
        let z = ac_eval(case, &lines, &theta, &vm);
        let f = mismatch(&z);
        let worst = f.amax();
        if !worst.is_finite() {
            return Err(Error::NonConvergence { iterations, mismatch: worst });
        }
        if worst < NR_TOL {
            let state = StateVector {
                angles: (0..nb).filter(|&i| case.buses[i].kind != BusKind::Slack).map(|i| theta[i]).collect(),
                magnitudes: Some(vm.clone()),
                mode: Mode::Ac,
            };
            let meas = MeasurementVector { values: z, meters: ac_meters(case), mode: Mode::Ac };
            return Ok(AcSolution { state, measurements: meas, iterations, mismatch: worst });
        }
        if iterations == NR_MAX_ITER {
            return Err(Error::NonConvergence { iterations, mismatch: worst });
        }
        let jf = ac_jac(case, &lines, &theta, &vm);
        let mut jac = DMatrix::zeros(neq, neq);
        let rows: Vec<usize> =
            p_rows.iter().map(|&i| 2 * nl + i).chain(q_rows.iter().map(|&i| 2 * nl + nb + i)).collect();
        let cols: Vec<usize> = p_rows.iter().copied().chain(q_rows.iter().map(|&i| nb + i)).collect();
        for (r, &jr) in rows.iter().enumerate() {
            for (c, &jc) in cols.iter().enumerate() {
                jac[(r, c)] = jf[(jr, jc)];
            }
        }
        let dx = jac.lu().solve(&f).ok_or(Error::Singular)?;
        for (r, &i) in p_rows.iter().enumerate() {
            theta[i] += dx[r];
        }
        for (r, &i) in q_rows.iter().enumerate() {
            vm[i] += dx[np + r];
        }
        iterations += 1;
    }
}

/// Noise floor for meters whose reading is near zero, per unit.
pub const NOISE_FLOOR: f64 = 0.01;

/// Per-meter noise standard deviations: `ratio * max(|truth|, NOISE_FLOOR)`.
pub fn noise_scales(truth: &DVector<f64>, noise_ratio: f64) -> Vec<f64> {
    truth.iter().map(|v| noise_ratio * v.abs().max(NOISE_FLOOR)).collect()
}

/// Adds independent Gaussian meter noise to a noiseless measurement vector.
pub fn measure<R: Rng + ?Sized>(truth: &MeasurementVector, noise_ratio: f64, rng: &mut R) -> MeasurementVector {
    assert!(noise_ratio >= 0.0, "noise ratio must be non-negative");
    let mut out = truth.clone();
    if noise_ratio == 0.0 {
        return out;
    }
    for (v, s) in out.values.iter_mut().zip(noise_scales(&truth.values, noise_ratio)) {
        let e: f64 = rng.sample(StandardNormal);
        *v += s * e;
    }
    out
}
