//! Moving target defense moves: transmission switching, admittance
//! perturbation and the seeded Gaussian watermark, and the per-period
//! schedule that picks among them.
//!
//! Lines are identified by their 0-based position in the case's branch
//! list.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::casefile::{branch_admittance, NetworkCase};
use crate::error::{Error, Result};

/// Perturbation order on the 14-bus system, as (from, to) bus pairs.
pub const IEEE14_LINE_ORDER: [(usize, usize); 16] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (2, 4),
    (2, 5),
    (3, 4),
    (4, 5),
    (4, 7),
    (4, 9),
    (5, 6),
    (6, 11),
    (6, 12),
    (6, 13),
    (9, 10),
    (9, 14),
    (10, 11),
];

/// Longest schedule a case supports.
pub const MAX_NLP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MtdKind {
    Switch,
    Perturb,
    Watermark,
}

impl fmt::Display for MtdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MtdKind::Switch => "switch",
            MtdKind::Perturb => "perturb",
            MtdKind::Watermark => "watermark",
        })
    }
}

impl FromStr for MtdKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "switch" => Ok(MtdKind::Switch),
            "perturb" => Ok(MtdKind::Perturb),
            "watermark" => Ok(MtdKind::Watermark),
            _ => Err(Error::Config(format!("unknown mtd kind {s:?}"))),
        }
    }
}

/// One defense move.
#[derive(Debug, Clone, PartialEq)]
pub struct MtdAction {
    pub kind: MtdKind,
    pub lines: Vec<usize>,
    /// Perturbation fraction or watermark scale `p`; unused for switching.
    pub magnitude: f64,
    /// Watermark generator seed.
    pub seed: Option<u64>,
}

impl MtdAction {
    pub fn new(kind: MtdKind, lines: Vec<usize>, magnitude: f64, seed: Option<u64>) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::InvalidArgument("an MTD action needs at least one line".into()));
        }
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(Error::InvalidArgument(format!("magnitude must be non-negative, got {magnitude}")));
        }
        if kind == MtdKind::Perturb && magnitude >= 1.0 {
            return Err(Error::InvalidArgument(format!("perturbation must be below 1, got {magnitude}")));
        }
        if kind == MtdKind::Watermark && seed.is_none() {
            return Err(Error::InvalidArgument("a watermark needs a seed".into()));
        }
        Ok(MtdAction { kind, lines, magnitude, seed })
    }

    /// The defended case. For a watermark the drawn factors come back too.
    pub fn apply(&self, case: &NetworkCase) -> Result<(NetworkCase, Option<Watermark>)> {
        match self.kind {
            MtdKind::Switch => {
                let mut out = case.clone();
                for &l in &self.lines {
                    out = switch_line(&out, l, false)?;
                }
                Ok((out, None))
            }
            MtdKind::Perturb => {
                let mut out = case.clone();
                for &l in &self.lines {
                    out = perturb_admittance(&out, l, self.magnitude)?;
                }
                Ok((out, None))
            }
            MtdKind::Watermark => {
                let seed = self.seed.ok_or_else(|| Error::InvalidArgument("a watermark needs a seed".into()))?;
                let (out, w) = gaussian_watermark(case, &self.lines, self.magnitude, seed)?;
                Ok((out, Some(w)))
            }
        }
    }
}

fn check_line(case: &NetworkCase, line: usize) -> Result<()> {
    if line >= case.branch_count() {
        return Err(Error::UnknownLine(line));
    }
    Ok(())
}

/// Same case with one branch taken out of (`closed = false`) or put back
/// into service.
pub fn switch_line(case: &NetworkCase, line: usize, closed: bool) -> Result<NetworkCase> {
    check_line(case, line)?;
    let mut br = case.branches[line].clone();
    br.in_service = closed;
    match case.with_branch(line, br) {
        Ok(c) => Ok(c),
        Err(Error::Semantic(msg)) if msg.contains("disconnected") => Err(Error::Islanding(line)),
        Err(e) => Err(e),
    }
}

/// Scales a line's series admittance by `1 + fraction` (both `r` and `x`
/// are divided by it), leaving every other branch untouched.
pub fn perturb_admittance(case: &NetworkCase, line: usize, fraction: f64) -> Result<NetworkCase> {
    check_line(case, line)?;
    if !(fraction.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("|fraction| must be below 1, got {fraction}")));
    }
    let old = &case.branches[line];
    if !old.in_service {
        return Err(Error::InvalidArgument(format!("branch at position {line} is out of service")));
    }
    branch_admittance(old)?;
    if fraction == 0.0 {
        return Ok(case.clone());
    }
    let mut br = old.clone();
    br.resistance_r /= 1.0 + fraction;
    br.reactance_x /= 1.0 + fraction;
    case.with_branch(line, br)
}

/// Factors drawn for one watermark.
#[derive(Debug, Clone, PartialEq)]
pub struct Watermark {
    /// Admittance scale `g` per listed line.
    pub factors: Vec<f64>,
    /// Change in series susceptance per listed line.
    pub susceptance_deltas: Vec<f64>,
    /// Draws rejected because `|g| >= 1`.
    pub redraws: usize,
}

/// Scales each listed line's admittance by `1 + g`, `g ~ Normal(0, p^2)`
/// from a generator seeded by `seed`.
pub fn gaussian_watermark(case: &NetworkCase, lines: &[usize], p: f64, seed: u64) -> Result<(NetworkCase, Watermark)> {
    if !(p >= 0.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("watermark scale must be non-negative, got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = case.clone();
    let mut factors = Vec::with_capacity(lines.len());
    let mut deltas = Vec::with_capacity(lines.len());
    let mut redraws = 0;
    for &l in lines {
        check_line(case, l)?;
        let g = loop {
            let g: f64 = p * rng.sample::<f64, _>(StandardNormal);
            if g.abs() < 1.0 {
                break g;
            }
            redraws += 1;
        };
        let (_, b_old) = branch_admittance(&out.branches[l])?;
        out = perturb_admittance(&out, l, g)?;
        let (_, b_new) = branch_admittance(&out.branches[l])?;
        factors.push(g);
        deltas.push(b_new - b_old);
    }
    if redraws > 0 {
        log::info!("watermark redrew {redraws} factor(s) with |g| >= 1");
    }
    Ok((out, Watermark { factors, susceptance_deltas: deltas, redraws }))
}

/// The case's perturbation order: the 14-bus table when every listed pair
/// exists, otherwise the first branches in case order.
pub fn line_order(case: &NetworkCase) -> Vec<usize> {
    let find = |(f, t): (usize, usize)| {
        case.branches.iter().position(|b| (b.from_bus, b.to_bus) == (f, t) || (b.from_bus, b.to_bus) == (t, f))
    };
    if case.bus_count() == 14 {
        let table: Option<Vec<usize>> = IEEE14_LINE_ORDER.iter().map(|&p| find(p)).collect();
        if let Some(order) = table {
            return order;
        }
    }
    (0..case.branch_count().min(MAX_NLP)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtdSchedule {
    pub nlp: usize,
    /// Topology per period; 0 is the base case, `k` adjusts `line_order[k-1]`.
    pub topology_ids: Vec<usize>,
    pub line_order: Vec<usize>,
}

impl MtdSchedule {
    /// The line adjusted in topology `id`, if any.
    pub fn line_for(&self, id: usize) -> Option<usize> {
        if id == 0 {
            None
        } else {
            self.line_order.get(id - 1).copied()
        }
    }
}

/// Draws a topology id uniformly from `0..=nlp` for every period.
pub fn mtd_schedule<R: Rng + ?Sized>(nlp: usize, periods: usize, line_order: &[usize], rng: &mut R) -> Result<MtdSchedule> {
    if nlp > line_order.len() {
        return Err(Error::InvalidArgument(format!("nlp {nlp} exceeds the {} available lines", line_order.len())));
    }
    let topology_ids = (0..periods).map(|_| if nlp == 0 { 0 } else { rng.random_range(0..=nlp) }).collect();
    Ok(MtdSchedule { nlp, topology_ids, line_order: line_order[..nlp].to_vec() })
}
