//! Network case model and the plain-text case format.
//!
//! A case file is line oriented. `#` starts a comment. Sections:
//!
//! ```text
//! BASE 100
//! BUS
//! # id kind load_p load_q v_setpoint
//! 1 3 0 0 1.06
//! GEN
//! # bus p_gen
//! 1 232.4
//! BRANCH
//! # from to r x b_sh status
//! 1 2 0.01938 0.05917 0.0528 1
//! ```
//!
//! `kind` is 3 (slack), 2 (generator) or 1 (load); the words `slack`,
//! `gen`/`generator`/`pv` and `load`/`pq` are accepted as well. Loads and
//! generation are in MW/MVAr and are divided by the base on parse. Branch
//! impedances are already per unit; `b_sh` is the total line charging.
//! `status` is 1 for in service, 0 for out of service. The `GEN` section is
//! optional; buses without an entry generate nothing.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusKind {
    Slack,
    Generator,
    Load,
}

impl BusKind {
    fn code(self) -> u8 {
        match self {
            BusKind::Slack => 3,
            BusKind::Generator => 2,
            BusKind::Load => 1,
        }
    }

    fn parse(tok: &str) -> Option<Self> {
        match tok.to_ascii_lowercase().as_str() {
            "3" | "slack" | "ref" => Some(BusKind::Slack),
            "2" | "gen" | "generator" | "pv" => Some(BusKind::Generator),
            "1" | "load" | "pq" => Some(BusKind::Load),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Real demand, per unit.
    pub load_p: f64,
    /// Reactive demand, per unit.
    pub load_q: f64,
    pub v_setpoint: f64,
    /// Scheduled real generation, per unit.
    pub gen_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub resistance_r: f64,
    pub reactance_x: f64,
    /// Total line charging susceptance.
    pub shunt_b: f64,
    pub in_service: bool,
}

impl Branch {
    pub fn new(from_bus: usize, to_bus: usize, r: f64, x: f64, b_sh: f64) -> Self {
        Branch { from_bus, to_bus, resistance_r: r, reactance_x: x, shunt_b: b_sh, in_service: true }
    }
}

/// Per-bus demand, indexed by bus position (not id).
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl LoadProfile {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub base_power: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub slack_bus: usize,
    index: HashMap<usize, usize>,
}

/// Series admittance `(g, b)` of a branch.
pub fn branch_admittance(branch: &Branch) -> Result<(f64, f64)> {
    let (r, x) = (branch.resistance_r, branch.reactance_x);
    let d = r * r + x * x;
    if d == 0.0 || !d.is_finite() {
        return Err(Error::DegenerateImpedance { from: branch.from_bus, to: branch.to_bus });
    }
    Ok((r / d, -x / d))
}

impl NetworkCase {
    /// Builds and validates a case from already per-unit parts.
    pub fn new(base_power: f64, buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self> {
        if !(base_power > 0.0 && base_power.is_finite()) {
            return Err(Error::Semantic(format!("base power must be positive, got {base_power}")));
        }
        let mut index = HashMap::with_capacity(buses.len());
        for (k, b) in buses.iter().enumerate() {
            if index.insert(b.id, k).is_some() {
                return Err(Error::Semantic(format!("duplicate bus id {}", b.id)));
            }
            if !(b.load_p.is_finite() && b.load_q.is_finite() && b.gen_p.is_finite()) {
                return Err(Error::Semantic(format!("bus {} has non-finite power", b.id)));
            }
            if !(b.v_setpoint > 0.0 && b.v_setpoint.is_finite()) {
                return Err(Error::Semantic(format!("bus {} voltage setpoint must be positive", b.id)));
            }
        }
        let slacks: Vec<usize> = buses.iter().filter(|b| b.kind == BusKind::Slack).map(|b| b.id).collect();
        let slack_bus = match slacks.as_slice() {
            [s] => *s,
            [] => return Err(Error::Semantic("no slack bus".into())),
            _ => return Err(Error::Semantic(format!("more than one slack bus: {slacks:?}"))),
        };
        for (k, br) in branches.iter().enumerate() {
            for end in [br.from_bus, br.to_bus] {
                if !index.contains_key(&end) {
                    return Err(Error::Semantic(format!(
                        "branch {} ({}-{}) references unknown bus {}",
                        k + 1,
                        br.from_bus,
                        br.to_bus,
                        end
                    )));
                }
            }
            if br.from_bus == br.to_bus {
                return Err(Error::Semantic(format!("branch {} is a self loop on bus {}", k + 1, br.from_bus)));
            }
            if !(br.resistance_r >= 0.0) || !br.reactance_x.is_finite() || !br.shunt_b.is_finite() {
                return Err(Error::Semantic(format!("branch {} ({}-{}) has invalid impedance", k + 1, br.from_bus, br.to_bus)));
            }
            if br.in_service && br.reactance_x == 0.0 {
                return Err(Error::Semantic(format!("branch {} ({}-{}) has zero reactance", k + 1, br.from_bus, br.to_bus)));
            }
        }
        let case = NetworkCase { base_power, buses, branches, slack_bus, index };
        if !case.is_connected() {
            return Err(Error::Semantic("in-service branch graph is disconnected".into()));
        }
        Ok(case)
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// Position of a bus id in `buses`.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn slack_index(&self) -> usize {
        self.index[&self.slack_bus]
    }

    /// Ids of the non-slack buses in case order. These are the DC state.
    pub fn state_buses(&self) -> Vec<usize> {
        self.buses.iter().filter(|b| b.kind != BusKind::Slack).map(|b| b.id).collect()
    }

    pub fn base_loads(&self) -> LoadProfile {
        LoadProfile {
            p: self.buses.iter().map(|b| b.load_p).collect(),
            q: self.buses.iter().map(|b| b.load_q).collect(),
        }
    }

    /// Connectivity of the in-service branch graph.
    pub fn is_connected(&self) -> bool {
        let n = self.buses.len();
        if n == 0 {
            return false;
        }
        let mut adj = vec![Vec::new(); n];
        for br in self.branches.iter().filter(|b| b.in_service) {
            let (f, t) = (self.index[&br.from_bus], self.index[&br.to_bus]);
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == n
    }

    /// Same case with one branch altered; validation is rerun.
    pub(crate) fn with_branch(&self, line: usize, branch: Branch) -> Result<Self> {
        let mut branches = self.branches.clone();
        branches[line] = branch;
        NetworkCase::new(self.base_power, self.buses.clone(), branches)
    }

    /// Serializes to the case format. Parsing the output gives back an equal case.
    pub fn to_case_text(&self) -> String {
        let base = self.base_power;
        let mut s = String::new();
        let _ = writeln!(s, "BASE {}", base);
        let _ = writeln!(s, "\nBUS\n# id kind load_p load_q v_setpoint");
        for b in &self.buses {
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                b.id,
                b.kind.code(),
                exact_scaled(b.load_p, base),
                exact_scaled(b.load_q, base),
                b.v_setpoint
            );
        }
        let _ = writeln!(s, "\nGEN\n# bus p_gen");
        for b in self.buses.iter().filter(|b| b.gen_p != 0.0) {
            let _ = writeln!(s, "{} {}", b.id, exact_scaled(b.gen_p, base));
        }
        let _ = writeln!(s, "\nBRANCH\n# from to r x b_sh status");
        for br in &self.branches {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                br.from_bus,
                br.to_bus,
                br.resistance_r,
                br.reactance_x,
                br.shunt_b,
                u8::from(br.in_service)
            );
        }
        s
    }
}

// A value v with v / base == x exactly, so per-unit quantities survive a round trip.
fn exact_scaled(x: f64, base: f64) -> f64 {
    let v0 = x * base;
    let mut lo = v0;
    let mut hi = v0;
    for _ in 0..64 {
        if lo / base == x {
            return lo;
        }
        if hi / base == x {
            return hi;
        }
        lo = lo.next_down();
        hi = hi.next_up();
    }
    v0
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Bus,
    Gen,
    Branch,
}

fn num(tok: &str, line: usize, what: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::Syntax { line, msg: format!("expected number for {what}, got '{tok}'") })
}

fn int(tok: &str, line: usize, what: &str) -> Result<usize> {
    let v = num(tok, line, what)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Syntax { line, msg: format!("expected non-negative integer for {what}, got '{tok}'") });
    }
    Ok(v as usize)
}

/// Parses case-format text into a validated [`NetworkCase`].
pub fn parse_case(text: &str) -> Result<NetworkCase> {
    let mut base: Option<f64> = None;
    let mut raw_buses: Vec<(usize, BusKind, f64, f64, f64)> = Vec::new();
    let mut gens: Vec<(usize, f64, usize)> = Vec::new();
    let mut branches = Vec::new();
    let mut section = Section::None;

    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        match toks[0].to_ascii_uppercase().as_str() {
            "BASE" => {
                if toks.len() != 2 {
                    return Err(Error::Syntax { line, msg: "BASE takes one value".into() });
                }
                base = Some(num(toks[1], line, "base power")?);
                section = Section::None;
                continue;
            }
            "BUS" | "GEN" | "BRANCH" => {
                if toks.len() != 1 {
                    return Err(Error::Syntax { line, msg: format!("unexpected tokens after {}", toks[0]) });
                }
                section = match toks[0].to_ascii_uppercase().as_str() {
                    "BUS" => Section::Bus,
                    "GEN" => Section::Gen,
                    _ => Section::Branch,
                };
                continue;
            }
            _ => {}
        }
        match section {
            Section::None => {
                return Err(Error::Syntax { line, msg: format!("data outside a section: '{}'", body.trim()) });
            }
            Section::Bus => {
                if toks.len() != 5 {
                    return Err(Error::Syntax { line, msg: format!("BUS row needs 5 columns, got {}", toks.len()) });
                }
                let kind = BusKind::parse(toks[1])
                    .ok_or_else(|| Error::Syntax { line, msg: format!("unknown bus kind '{}'", toks[1]) })?;
                raw_buses.push((
                    int(toks[0], line, "bus id")?,
                    kind,
                    num(toks[2], line, "load_p")?,
                    num(toks[3], line, "load_q")?,
                    num(toks[4], line, "v_setpoint")?,
                ));
            }
            Section::Gen => {
                if toks.len() != 2 {
                    return Err(Error::Syntax { line, msg: format!("GEN row needs 2 columns, got {}", toks.len()) });
                }
                gens.push((int(toks[0], line, "generator bus")?, num(toks[1], line, "p_gen")?, line));
            }
            Section::Branch => {
                if toks.len() != 6 {
                    return Err(Error::Syntax { line, msg: format!("BRANCH row needs 6 columns, got {}", toks.len()) });
                }
                let status = int(toks[5], line, "status")?;
                if status > 1 {
                    return Err(Error::Syntax { line, msg: format!("status must be 0 or 1, got {status}") });
                }
                branches.push(Branch {
                    from_bus: int(toks[0], line, "from bus")?,
                    to_bus: int(toks[1], line, "to bus")?,
                    resistance_r: num(toks[2], line, "r")?,
                    reactance_x: num(toks[3], line, "x")?,
                    shunt_b: num(toks[4], line, "b_sh")?,
                    in_service: status == 1,
                });
            }
        }
    }

    let base = base.ok_or_else(|| Error::Semantic("missing BASE".into()))?;
    if !(base > 0.0) {
        return Err(Error::Semantic(format!("base power must be positive, got {base}")));
    }
    let mut buses: Vec<Bus> = raw_buses
        .into_iter()
        .map(|(id, kind, p, q, v)| Bus { id, kind, load_p: p / base, load_q: q / base, v_setpoint: v, gen_p: 0.0 })
        .collect();
    for (bus, p, line) in gens {
        let b = buses
            .iter_mut()
            .find(|b| b.id == bus)
            .ok_or_else(|| Error::Semantic(format!("generator on line {line} references unknown bus {bus}")))?;
        b.gen_p += p / base;
    }
    NetworkCase::new(base, buses, branches)
}

const CASE14: &str = include_str!("../data/case14.case");
const CASE118: &str = include_str!("../data/case118.case");

/// Names of the cases shipped with the crate.
pub const BUNDLED: [&str; 2] = ["case14", "case118"];

/// Loads a bundled case by name, or a case file from disk.
pub fn load_case(name_or_path: &str) -> Result<NetworkCase> {
    match name_or_path {
        "case14" | "ieee14" | "14" => parse_case(CASE14),
        "case118" | "ieee118" | "118" => parse_case(CASE118),
        path => parse_case(&std::fs::read_to_string(path)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = "BASE 100\nBUS\n1 slack 0 0 1.0\n2 load 100 0 1.0\nBRANCH\n1 2 0 0.1 0 1\n";

    #[test]
    fn minimal_two_bus() {
        let c = parse_case(TWO_BUS).unwrap();
        assert_eq!(c.bus_count(), 2);
        assert_eq!(c.slack_bus, 1);
        assert_eq!(c.buses[1].load_p, 1.0);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = parse_case("BASE 100\nBUS\n1 3 0 0\n").unwrap_err();
        assert_eq!(e, Error::Syntax { line: 3, msg: "BUS row needs 5 columns, got 4".into() });
        let e = parse_case("BASE 100\nBUS\n1 3 0 0 x\n").unwrap_err();
        assert!(matches!(e, Error::Syntax { line: 3, .. }));
        let e = parse_case("1 2 3\n").unwrap_err();
        assert!(matches!(e, Error::Syntax { line: 1, .. }));
    }

    #[test]
    fn semantic_errors() {
        let no_slack = "BASE 100\nBUS\n1 1 0 0 1\n2 1 0 0 1\nBRANCH\n1 2 0 0.1 0 1\n";
        assert!(matches!(parse_case(no_slack), Err(Error::Semantic(m)) if m.contains("slack")));
        let zero_x = "BASE 100\nBUS\n1 3 0 0 1\n2 1 0 0 1\nBRANCH\n1 2 0.1 0 0 1\n";
        assert!(matches!(parse_case(zero_x), Err(Error::Semantic(m)) if m.contains("zero reactance")));
        let island = "BASE 100\nBUS\n1 3 0 0 1\n2 1 0 0 1\n3 1 0 0 1\nBRANCH\n1 2 0 0.1 0 1\n2 3 0 0.1 0 0\n";
        assert!(matches!(parse_case(island), Err(Error::Semantic(m)) if m.contains("disconnected")));
    }

    #[test]
    fn dangling_reference_names_branch() {
        let text = CASE14.replace("13 14 0.17093", "13 99 0.17093");
        match parse_case(&text) {
            Err(Error::Semantic(m)) => assert!(m.contains("branch 20") && m.contains("99"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn admittance_examples() {
        let (g, b) = branch_admittance(&Branch::new(5, 6, 0.0, 0.25202, 0.0)).unwrap();
        assert_eq!(g, 0.0);
        assert!((b + 3.96794).abs() < 1e-5);
        let (g, b) = branch_admittance(&Branch::new(1, 2, 0.01938, 0.05917, 0.0)).unwrap();
        assert!((g - 4.99913).abs() < 1e-5);
        assert!((b + 15.26309).abs() < 1e-5);
        assert_eq!(branch_admittance(&Branch::new(1, 2, 1.0, 0.0, 0.0)).unwrap(), (1.0, 0.0));
        assert!(branch_admittance(&Branch::new(1, 2, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn exact_scaling_round_trips() {
        for mw in [21.7, 94.2, -3.9, 232.4, 0.0, 1e-7, 13.5] {
            let x = mw / 100.0;
            assert_eq!(exact_scaled(x, 100.0) / 100.0, x);
        }
    }
}
