//! Monte Carlo scenario engine.
//!
//! Each trial generates an observation history over an MTD schedule, mounts
//! the configured attack on the most recent period, estimates with the
//! defender's knowledge of the true topology and records the bad data
//! detector's verdict. Trials draw from their own generators, seeded from
//! the master seed and the trial index, so the report does not depend on
//! how trials are scheduled across threads.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attacks::{
    blind_ica_attack, cluster_observations, clustered_blind_attack, current_cluster, default_min_cluster,
    full_knowledge_attack, grid_buckets, replay_attack, DbscanParams, LatentShift, ObservationSet, MIN_OBSERVATIONS,
};
use crate::casefile::{load_case, LoadProfile, NetworkCase};
use crate::error::{Error, Result};
use crate::estimator::{ac_estimate_weighted, calibrate_cusum, chi2_threshold, wls_solve, DetectionOutcome, WeightMatrix};
use crate::learning::{tsne_embed, ClusterLabeling, TsneParams};
use crate::mtd::{gaussian_watermark, line_order, mtd_schedule, perturb_admittance, switch_line, MtdKind, MtdSchedule};
use crate::powerflow::{
    ac_flow, ac_measurements, build_h_dc, dc_flow, measure, noise_scales, sample_loads, MeasurementVector, Mode,
    StateVector, TopologyMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    None,
    Full,
    Blind,
    Clustered,
    Replay,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::None => "none",
            AttackKind::Full => "full",
            AttackKind::Blind => "blind",
            AttackKind::Clustered => "clustered",
            AttackKind::Replay => "replay",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AttackKind::None,
            "full" => AttackKind::Full,
            "blind" => AttackKind::Blind,
            "clustered" => AttackKind::Clustered,
            "replay" => AttackKind::Replay,
            _ => return Err(Error::Config(format!("unknown attack {s:?}"))),
        })
    }
}

/// Which alarm counts as a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Detector {
    /// Single-period residual test.
    Instant,
    /// Windowed CUSUM over the attack horizon.
    Cusum,
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Detector::Instant => "instant",
            Detector::Cusum => "cusum",
        })
    }
}

impl FromStr for Detector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instant" => Ok(Detector::Instant),
            "cusum" => Ok(Detector::Cusum),
            _ => Err(Error::Config(format!("unknown detector {s:?}"))),
        }
    }
}

/// One scenario. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario_id: String,
    pub case: String,
    pub mode: Mode,
    pub attack: AttackKind,
    /// `None` disables the defense.
    pub mtd: Option<MtdKind>,
    pub nlp: usize,
    pub perturb_fraction: f64,
    pub watermark_p: f64,
    pub noise_ratio: f64,
    /// Standard deviation of the per-bus load factor.
    pub load_variance: f64,
    /// 0 disables bucketing.
    pub bucket_count: usize,
    pub observations: usize,
    pub trials: usize,
    pub alpha: f64,
    pub cusum_window: usize,
    pub cusum_bound: f64,
    pub seed: u64,
    /// Detector; `None` picks CUSUM for watermark scenarios.
    pub detector: Option<Detector>,
    /// Attacked periods monitored by CUSUM; 0 means one window.
    pub cusum_horizon: usize,
    /// Monitored attack-free periods before the attack; 0 means one window.
    pub attack_start: usize,
    /// Target angle shift of the attack, degrees.
    pub attack_degrees: f64,
    /// Bus whose angle the attack shifts; 0 picks the best-connected
    /// non-slack bus.
    pub attack_bus: usize,
    pub ica_components: usize,
    pub tsne_iterations: usize,
    pub tsne_perplexity: f64,
    /// 0 picks the default for the component count.
    pub min_cluster: usize,
    /// 0 picks the elbow of the k-distance curve.
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    pub parallel: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario_id: "scenario".into(),
            case: "case14".into(),
            mode: Mode::Dc,
            attack: AttackKind::None,
            mtd: None,
            nlp: 0,
            perturb_fraction: 0.10,
            watermark_p: 0.01,
            noise_ratio: 0.01,
            load_variance: 0.001,
            bucket_count: 0,
            observations: 1000,
            trials: 500,
            alpha: 0.99,
            cusum_window: 10,
            cusum_bound: 2.0,
            seed: 1,
            detector: None,
            cusum_horizon: 0,
            attack_start: 0,
            attack_degrees: 20.0,
            attack_bus: 0,
            ica_components: 11,
            tsne_iterations: 1000,
            tsne_perplexity: 30.0,
            min_cluster: 0,
            dbscan_eps: 0.0,
            dbscan_min_pts: 10,
            parallel: true,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl ScenarioConfig {
    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "scenario_id" => self.scenario_id = v.to_string(),
            "case" => self.case = v.to_string(),
            "mode" => self.mode = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "attack" => self.attack = v.parse()?,
            "mtd" => self.mtd = if v == "none" { None } else { Some(v.parse()?) },
            "nlp" => self.nlp = parse_num("nlp", v)?,
            "perturb_fraction" => self.perturb_fraction = parse_num("perturb_fraction", v)?,
            "watermark_p" => self.watermark_p = parse_num("watermark_p", v)?,
            "noise_ratio" => self.noise_ratio = parse_num("noise_ratio", v)?,
            "load_variance" => self.load_variance = parse_num("load_variance", v)?,
            "bucket_count" => self.bucket_count = parse_num("bucket_count", v)?,
            "observations" => self.observations = parse_num("observations", v)?,
            "trials" => self.trials = parse_num("trials", v)?,
            "alpha" => self.alpha = parse_num("alpha", v)?,
            "cusum_window" => self.cusum_window = parse_num("cusum_window", v)?,
            "cusum_bound" => self.cusum_bound = parse_num("cusum_bound", v)?,
            "seed" => self.seed = parse_num("seed", v)?,
            "detector" => self.detector = if v == "auto" { None } else { Some(v.parse()?) },
            "cusum_horizon" => self.cusum_horizon = parse_num("cusum_horizon", v)?,
            "attack_start" => self.attack_start = parse_num("attack_start", v)?,
            "attack_degrees" => self.attack_degrees = parse_num("attack_degrees", v)?,
            "attack_bus" => self.attack_bus = parse_num("attack_bus", v)?,
            "ica_components" => self.ica_components = parse_num("ica_components", v)?,
            "tsne_iterations" => self.tsne_iterations = parse_num("tsne_iterations", v)?,
            "tsne_perplexity" => self.tsne_perplexity = parse_num("tsne_perplexity", v)?,
            "min_cluster" => self.min_cluster = parse_num("min_cluster", v)?,
            "dbscan_eps" => self.dbscan_eps = parse_num("dbscan_eps", v)?,
            "dbscan_min_pts" => self.dbscan_min_pts = parse_num("dbscan_min_pts", v)?,
            "parallel" => self.parallel = parse_bool("parallel", v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
        self.set(k, v)
    }

    /// Parses a flat `key = value` document on top of the defaults. Blank
    /// lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ScenarioConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {}", n + 1, e)))?;
        }
        Ok(cfg)
    }

    /// Every field as `key = value` lines, readable by [`ScenarioConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("scenario_id", self.scenario_id.clone()),
            ("case", self.case.clone()),
            ("mode", self.mode.to_string()),
            ("attack", self.attack.to_string()),
            ("mtd", self.mtd_name()),
            ("nlp", self.nlp.to_string()),
            ("perturb_fraction", self.perturb_fraction.to_string()),
            ("watermark_p", self.watermark_p.to_string()),
            ("noise_ratio", self.noise_ratio.to_string()),
            ("load_variance", self.load_variance.to_string()),
            ("bucket_count", self.bucket_count.to_string()),
            ("observations", self.observations.to_string()),
            ("trials", self.trials.to_string()),
            ("alpha", self.alpha.to_string()),
            ("cusum_window", self.cusum_window.to_string()),
            ("cusum_bound", self.cusum_bound.to_string()),
            ("seed", self.seed.to_string()),
            ("detector", self.detector.map_or("auto".into(), |d| d.to_string())),
            ("cusum_horizon", self.cusum_horizon.to_string()),
            ("attack_start", self.attack_start.to_string()),
            ("attack_degrees", self.attack_degrees.to_string()),
            ("attack_bus", self.attack_bus.to_string()),
            ("ica_components", self.ica_components.to_string()),
            ("tsne_iterations", self.tsne_iterations.to_string()),
            ("tsne_perplexity", self.tsne_perplexity.to_string()),
            ("min_cluster", self.min_cluster.to_string()),
            ("dbscan_eps", self.dbscan_eps.to_string()),
            ("dbscan_min_pts", self.dbscan_min_pts.to_string()),
            ("parallel", self.parallel.to_string()),
        ]
    }

    pub fn mtd_name(&self) -> String {
        self.mtd.map_or("none".into(), |k| k.to_string())
    }

    pub fn detector_kind(&self) -> Detector {
        self.detector.unwrap_or(if self.mtd == Some(MtdKind::Watermark) { Detector::Cusum } else { Detector::Instant })
    }

    pub fn horizon(&self) -> usize {
        if self.cusum_horizon == 0 {
            self.cusum_window
        } else {
            self.cusum_horizon
        }
    }

    pub fn pre_attack(&self) -> usize {
        if self.attack_start == 0 {
            self.cusum_window
        } else {
            self.attack_start
        }
    }

    pub fn calibration_periods(&self) -> usize {
        (10 * self.cusum_window).max(100)
    }

    pub fn min_cluster_size(&self) -> usize {
        if self.min_cluster == 0 {
            default_min_cluster(self.ica_components)
        } else {
            self.min_cluster
        }
    }

    pub fn tsne_params(&self) -> TsneParams {
        let d = TsneParams::default();
        TsneParams {
            perplexity: self.tsne_perplexity,
            iterations: self.tsne_iterations,
            exaggeration_iters: d.exaggeration_iters.min(self.tsne_iterations / 4),
            cost_every: self.tsne_iterations.max(1),
            ..d
        }
    }

    pub fn dbscan_params(&self) -> DbscanParams {
        DbscanParams { eps: if self.dbscan_eps > 0.0 { Some(self.dbscan_eps) } else { None }, min_pts: self.dbscan_min_pts }
    }

    /// Range checks that need no case data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.noise_ratio >= 0.0 && self.noise_ratio.is_finite()) {
            return bad(format!("noise_ratio must be non-negative, got {}", self.noise_ratio));
        }
        if !(self.load_variance >= 0.0 && self.load_variance.is_finite()) {
            return bad(format!("load_variance must be non-negative, got {}", self.load_variance));
        }
        if !(self.perturb_fraction.abs() < 1.0) {
            return bad(format!("perturb_fraction must lie in (-1, 1), got {}", self.perturb_fraction));
        }
        if !(self.watermark_p >= 0.0 && self.watermark_p.is_finite()) {
            return bad(format!("watermark_p must be non-negative, got {}", self.watermark_p));
        }
        if self.observations < 2 {
            return bad("observations must be at least 2".into());
        }
        if matches!(self.attack, AttackKind::Blind | AttackKind::Clustered) && self.observations < MIN_OBSERVATIONS {
            return bad(format!("{} attacks need observations >= {MIN_OBSERVATIONS}, got {}", self.attack, self.observations));
        }
        if self.mtd.is_none() && self.nlp > 0 {
            return bad("nlp > 0 needs an mtd kind".into());
        }
        if self.cusum_window == 0 {
            return bad("cusum_window must be at least 1".into());
        }
        if self.detector_kind() == Detector::Cusum && self.pre_attack() + 1 > self.observations {
            return bad(format!("attack_start {} does not fit in {} observations", self.pre_attack(), self.observations));
        }
        if self.bucket_count > 0 && self.observations < 10 * self.bucket_count {
            return bad(format!("{} buckets need observations >= {}", self.bucket_count, 10 * self.bucket_count));
        }
        if self.ica_components == 0 {
            return bad("ica_components must be at least 1".into());
        }
        if !(self.tsne_perplexity > 0.0) {
            return bad("tsne_perplexity must be positive".into());
        }
        if self.dbscan_min_pts == 0 {
            return bad("dbscan_min_pts must be at least 1".into());
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `trial` under `master`.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    mix(mix(master) ^ (trial as u64))
}

/// Short public digest of the master seed.
pub fn seed_fingerprint(seed: u64) -> String {
    let digest = Sha256::digest(seed.to_le_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// One trial's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    /// Topology id of the attacked period.
    pub topology: usize,
    /// Detector verdict on the attacked period; `None` when the attacker
    /// abstained.
    pub outcome: Option<DetectionOutcome>,
    pub cusum_stat: Option<f64>,
    /// Attacked periods until the first CUSUM alarm, counting the first
    /// attacked period as 1; `None` when censored.
    pub latency: Option<usize>,
    pub abstained: Option<String>,
    /// Whether the attacker's matched cluster is dominated by another
    /// topology.
    pub wrong_cluster: Option<bool>,
}

impl TrialRecord {
    pub fn detected(&self, detector: Detector) -> Option<bool> {
        let o = self.outcome?;
        Some(match detector {
            Detector::Instant => o.instant_alarm,
            Detector::Cusum => o.cusum_alarm.unwrap_or(false),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: ScenarioConfig,
    pub rows: Vec<TrialRecord>,
    pub abstentions: usize,
    /// Alarmed trials over non-abstained trials; `None` when every trial
    /// abstained.
    pub detection_probability: Option<f64>,
    pub seed_fingerprint: String,
}

pub const REPORT_HEADER: &str =
    "scenario_id,case,mode,attack,mtd,nlp,trial,residual,threshold,instant_alarm,cusum_stat,cusum_alarm,abstained";
pub const CURVE_HEADER: &str = "nlp,detection_probability,trials,abstentions";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    pub fn trials(&self) -> usize {
        self.rows.len()
    }

    pub fn detections(&self) -> usize {
        let d = self.config.detector_kind();
        self.rows.iter().filter(|r| r.detected(d) == Some(true)).count()
    }

    /// Per-trial CSV.
    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let o = r.outcome;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.scenario_id,
                c.case,
                c.mode,
                c.attack,
                c.mtd_name(),
                c.nlp,
                r.trial,
                opt(o.map(|o| o.residual)),
                opt(o.map(|o| o.threshold)),
                opt(o.map(|o| o.instant_alarm)),
                opt(r.cusum_stat),
                opt(o.and_then(|o| o.cusum_alarm)),
                r.abstained.is_some()
            );
        }
        s
    }

    pub fn curve_row(&self) -> CurveRow {
        CurveRow {
            nlp: self.config.nlp,
            detection_probability: self.detection_probability,
            trials: self.trials(),
            abstentions: self.abstentions,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub nlp: usize,
    pub detection_probability: Option<f64>,
    pub trials: usize,
    pub abstentions: usize,
}

/// Curve CSV for rows from [`detection_curve`].
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.nlp, opt(r.detection_probability), r.trials, r.abstentions);
    }
    s
}

/// One row per report, ordered by nlp. Reports must agree on everything
/// except nlp and the scenario id.
pub fn detection_curve(reports: &[ExperimentReport]) -> Result<Vec<CurveRow>> {
    let key = |c: &ScenarioConfig| {
        let mut c = c.clone();
        c.nlp = 0;
        c.scenario_id.clear();
        c.parallel = true;
        c
    };
    if let Some(first) = reports.first() {
        let k0 = key(&first.config);
        for r in &reports[1..] {
            if key(&r.config) != k0 {
                return Err(Error::MixedConfigs(format!(
                    "report for nlp {} differs from nlp {} in more than nlp",
                    r.config.nlp, first.config.nlp
                )));
            }
        }
    }
    let mut rows: Vec<CurveRow> = reports.iter().map(ExperimentReport::curve_row).collect();
    rows.sort_by_key(|r| r.nlp);
    Ok(rows)
}

/// Periods-to-alarm over a CUSUM scenario's trials.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    /// Per trial; `None` for censored or abstained trials.
    pub latencies: Vec<Option<usize>>,
    pub censored: usize,
    pub abstentions: usize,
    pub horizon: usize,
}

impl LatencyReport {
    /// Median with censored trials ranked last; `None` when at least half
    /// are censored.
    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.latencies.iter().map(|l| l.map_or(f64::INFINITY, |x| x as f64)).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let m = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        m.is_finite().then_some(m)
    }

    /// Mean over alarmed trials, censored ones counted at `horizon + 1`.
    pub fn mean(&self) -> Option<f64> {
        if self.latencies.is_empty() {
            return None;
        }
        let h = (self.horizon + 1) as f64;
        Some(self.latencies.iter().map(|l| l.map_or(h, |x| x as f64)).sum::<f64>() / self.latencies.len() as f64)
    }
}

/// Runs a CUSUM scenario and collects the periods to first alarm.
pub fn cusum_latency(config: &ScenarioConfig) -> Result<LatencyReport> {
    let mut cfg = config.clone();
    if cfg.detector.is_none() {
        cfg.detector = Some(Detector::Cusum);
    }
    if cfg.detector_kind() != Detector::Cusum {
        return Err(Error::Config("latency needs the cusum detector".into()));
    }
    let report = run_scenario(&cfg)?;
    let abstentions = report.abstentions;
    let rows: Vec<&TrialRecord> = report.rows.iter().filter(|r| r.abstained.is_none()).collect();
    Ok(LatencyReport {
        censored: rows.iter().filter(|r| r.latency.is_none()).count(),
        latencies: rows.iter().map(|r| r.latency).collect(),
        abstentions,
        horizon: cfg.horizon(),
    })
}

/// Fraction of clustered trials whose matched cluster belongs to another
/// topology, for each history length.
pub fn wrong_cluster_rate(config: &ScenarioConfig, observation_counts: &[usize]) -> Result<Vec<(usize, Option<f64>)>> {
    let mut out = Vec::with_capacity(observation_counts.len());
    for &t in observation_counts {
        let mut cfg = config.clone();
        cfg.observations = t;
        cfg.attack = AttackKind::Clustered;
        let report = run_scenario(&cfg)?;
        let judged: Vec<bool> = report.rows.iter().filter_map(|r| r.wrong_cluster).collect();
        let rate = (!judged.is_empty()).then(|| judged.iter().filter(|&&w| w).count() as f64 / judged.len() as f64);
        out.push((t, rate));
    }
    Ok(out)
}

/// One monitored period of a CUSUM run.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    /// 0-based index from the first monitored period.
    pub period: usize,
    pub topology: usize,
    pub residual: f64,
    pub statistic: f64,
    pub limit: f64,
    pub attacked: bool,
    pub alarm: bool,
}

/// Residual and CUSUM statistic per monitored period of one trial. The
/// detector is forced to CUSUM.
pub fn cusum_trace(config: &ScenarioConfig, trial: usize) -> Result<(TrialRecord, Vec<TracePoint>)> {
    let mut cfg = config.clone();
    cfg.detector = Some(Detector::Cusum);
    let setup = Setup::new(&cfg)?;
    let mut trace = Vec::new();
    let record = setup.run_trial(trial, Some(&mut trace))?;
    Ok((record, trace))
}

/// The observation history one trial would hand the attacker, with the
/// topology in force for each row.
pub fn observation_history(config: &ScenarioConfig, trial: usize) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let setup = Setup::new(config)?;
    let mut streams = TrialStreams::new(config.seed, trial);
    let (calibration, horizon) = match config.detector_kind() {
        Detector::Cusum => (config.calibration_periods(), config.horizon()),
        Detector::Instant => (0, 1),
    };
    let t_obs = config.observations;
    let schedule = mtd_schedule(config.nlp, calibration + t_obs + horizon - 1, &setup.order, &mut streams.plant)?;
    for t in 0..calibration {
        setup.period(&schedule, t, &mut streams)?;
    }
    let mut rows = DMatrix::zeros(t_obs, setup.meters);
    for t in 0..t_obs {
        let (p, _) = setup.period(&schedule, calibration + t, &mut streams)?;
        rows.set_row(t, &p.z.transpose());
    }
    Ok((rows, schedule.topology_ids[calibration..calibration + t_obs].to_vec()))
}

/// What the defender knows about one period's plant.
struct Plant {
    case: NetworkCase,
    /// DC measurement matrix; AC uses the case directly.
    h: Option<TopologyMatrix>,
    sigma: Vec<f64>,
}

impl Plant {
    fn new(case: NetworkCase, mode: Mode, noise_ratio: f64) -> Result<Self> {
        let base = case.base_loads();
        let (h, truth) = match mode {
            Mode::Dc => {
                let h = build_h_dc(&case)?;
                let (_, z) = dc_flow(&case, &base)?;
                (Some(h), z)
            }
            Mode::Ac => (None, ac_flow(&case, &base)?.1),
        };
        // a noiseless scenario still needs finite weights
        let ratio = if noise_ratio > 0.0 { noise_ratio } else { 1.0 };
        let sigma = noise_scales(&truth.values, ratio);
        Ok(Plant { case, h, sigma })
    }

    fn flow(&self, mode: Mode, loads: &LoadProfile) -> Result<(StateVector, MeasurementVector)> {
        match mode {
            Mode::Dc => dc_flow(&self.case, loads),
            Mode::Ac => ac_flow(&self.case, loads),
        }
    }

    /// Whitened residual and whether the estimator converged.
    fn residual(&self, z: &DVector<f64>) -> Result<(f64, bool)> {
        let w: Vec<f64> = self.sigma.iter().map(|s| 1.0 / (s * s)).collect();
        match &self.h {
            Some(h) => {
                let x = wls_solve(&h.entries, z, &w)?;
                let r = z - &h.entries * x;
                Ok((r.iter().zip(&self.sigma).map(|(v, s)| (v / s) * (v / s)).sum::<f64>().sqrt(), true))
            }
            None => {
                let mv = MeasurementVector {
                    values: z.clone(),
                    meters: crate::powerflow::ac_meters(&self.case),
                    mode: Mode::Ac,
                };
                let est = ac_estimate_weighted(&mv, &self.case, &WeightMatrix::new(w)?)?;
                Ok((est.residual, est.converged))
            }
        }
    }
}

/// Scenario data shared by every trial.
struct Setup {
    cfg: ScenarioConfig,
    base: NetworkCase,
    base_loads: LoadProfile,
    /// Fixed plants per topology id; empty for watermark scenarios.
    plants: Vec<Plant>,
    order: Vec<usize>,
    /// State shift of the attack, one entry per non-slack bus.
    c: DVector<f64>,
    threshold: f64,
    meters: usize,
    load_buses: Vec<usize>,
}

fn best_connected_bus(case: &NetworkCase) -> usize {
    let mut degree = vec![0usize; case.bus_count()];
    for b in case.branches.iter().filter(|b| b.in_service) {
        degree[case.bus_index(b.from_bus).unwrap()] += 1;
        degree[case.bus_index(b.to_bus).unwrap()] += 1;
    }
    let slack = case.slack_index();
    (0..case.bus_count()).filter(|&i| i != slack).max_by_key(|&i| (degree[i], std::cmp::Reverse(i))).unwrap()
}

impl Setup {
    fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let base = load_case(&cfg.case).map_err(|e| match e {
            Error::Io(_) | Error::Syntax { .. } | Error::Semantic(_) | Error::DegenerateImpedance { .. } => {
                Error::Config(format!("case {:?}: {e}", cfg.case))
            }
            other => other,
        })?;
        let order = line_order(&base);
        if cfg.nlp > order.len() {
            return Err(Error::Config(format!("nlp {} exceeds the {} lines in the perturbation order", cfg.nlp, order.len())));
        }
        let mut plants = Vec::new();
        if cfg.mtd != Some(MtdKind::Watermark) {
            plants.push(Plant::new(base.clone(), cfg.mode, cfg.noise_ratio)?);
            for &line in &order[..cfg.nlp] {
                let case = match cfg.mtd {
                    Some(MtdKind::Switch) => switch_line(&base, line, false)?,
                    Some(MtdKind::Perturb) => perturb_admittance(&base, line, cfg.perturb_fraction)?,
                    _ => unreachable!("nlp > 0 requires an mtd kind"),
                };
                plants.push(Plant::new(case, cfg.mode, cfg.noise_ratio)?);
            }
        }
        let state_buses = base.state_buses();
        let bus = if cfg.attack_bus == 0 { base.buses[best_connected_bus(&base)].id } else { cfg.attack_bus };
        let attack_bus_pos = state_buses
            .iter()
            .position(|&b| b == bus)
            .ok_or_else(|| Error::Config(format!("attack_bus {bus} is not a non-slack bus of {}", cfg.case)))?;
        let mut c = DVector::zeros(state_buses.len());
        c[attack_bus_pos] = cfg.attack_degrees.to_radians();
        let (m, n) = match cfg.mode {
            Mode::Dc => (base.branch_count() + base.bus_count(), state_buses.len()),
            Mode::Ac => (2 * base.branch_count() + 3 * base.bus_count(), state_buses.len() + base.bus_count()),
        };
        let threshold = chi2_threshold(m, n, cfg.alpha, 1.0)?;
        let base_loads = base.base_loads();
        let load_buses = (0..base.bus_count()).filter(|&i| base_loads.p[i] != 0.0 || base_loads.q[i] != 0.0).collect();
        Ok(Setup { cfg: cfg.clone(), base, base_loads, plants, order, c, threshold, meters: m, load_buses })
    }

    /// The plant in force for a period.
    fn plant(&self, topology: usize, wm_seed: u64) -> Result<std::borrow::Cow<'_, Plant>> {
        if self.cfg.mtd != Some(MtdKind::Watermark) {
            return Ok(std::borrow::Cow::Borrowed(&self.plants[topology]));
        }
        if topology == 0 {
            return Ok(std::borrow::Cow::Owned(Plant::new(self.base.clone(), self.cfg.mode, self.cfg.noise_ratio)?));
        }
        let line = self.order[topology - 1];
        let (case, _) = gaussian_watermark(&self.base, &[line], self.cfg.watermark_p, wm_seed)?;
        Ok(std::borrow::Cow::Owned(Plant::new(case, self.cfg.mode, self.cfg.noise_ratio)?))
    }
}

impl Clone for Plant {
    fn clone(&self) -> Self {
        Plant { case: self.case.clone(), h: self.h.clone(), sigma: self.sigma.clone() }
    }
}

/// One generated period.
struct Period {
    topology: usize,
    wm_seed: u64,
    state: StateVector,
    z: DVector<f64>,
}

struct TrialStreams {
    plant: ChaCha8Rng,
    attacker: ChaCha8Rng,
    watermark: u64,
}

impl TrialStreams {
    fn new(master: u64, trial: usize) -> Self {
        let s = trial_seed(master, trial);
        TrialStreams {
            plant: ChaCha8Rng::seed_from_u64(mix(s ^ 0x01)),
            attacker: ChaCha8Rng::seed_from_u64(mix(s ^ 0x02)),
            watermark: mix(s ^ 0x03),
        }
    }
}

impl Setup {
    fn period(&self, schedule: &MtdSchedule, t: usize, streams: &mut TrialStreams) -> Result<(Period, std::borrow::Cow<'_, Plant>)> {
        let topology = schedule.topology_ids[t];
        let wm_seed = mix(streams.watermark ^ (t as u64).wrapping_mul(0x9E37_79B9));
        let plant = self.plant(topology, wm_seed)?;
        let loads = sample_loads(&self.base_loads, self.cfg.load_variance, &mut streams.plant);
        let (state, truth) = plant.flow(self.cfg.mode, &loads)?;
        let z = measure(&truth, self.cfg.noise_ratio, &mut streams.plant).values;
        Ok((Period { topology, wm_seed, state, z }, plant))
    }

    /// Measurement-space bias of the state shift `c` on `plant` at `state`.
    fn intended_bias(&self, plant: &Plant, state: &StateVector) -> DVector<f64> {
        match &plant.h {
            Some(h) => &h.entries * &self.c,
            None => {
                let (theta, vm) = full_angles(&plant.case, state);
                let mut shifted = theta.clone();
                for (k, &i) in non_slack(&plant.case).iter().enumerate() {
                    shifted[i] += self.c[k];
                }
                ac_measurements(&plant.case, &shifted, &vm) - ac_measurements(&plant.case, &theta, &vm)
            }
        }
    }

    /// The attacker's load proxy: negated injection readings at load buses.
    fn load_proxy(&self, obs: &DMatrix<f64>) -> DMatrix<f64> {
        let nl = self.base.branch_count();
        let nb = self.base.bus_count();
        let mut cols: Vec<usize> = self.load_buses.iter().map(|&i| match self.cfg.mode {
            Mode::Dc => nl + i,
            Mode::Ac => 2 * nl + i,
        })
        .collect();
        if self.cfg.mode == Mode::Ac {
            cols.extend(self.load_buses.iter().map(|&i| 2 * nl + nb + i));
        }
        -obs.select_columns(cols.iter())
    }

    fn run_trial(&self, trial: usize, mut trace: Option<&mut Vec<TracePoint>>) -> Result<TrialRecord> {
        let cfg = &self.cfg;
        let mut streams = TrialStreams::new(cfg.seed, trial);
        let detector = cfg.detector_kind();
        let horizon = if detector == Detector::Cusum { cfg.horizon() } else { 1 };
        let calibration = if detector == Detector::Cusum { cfg.calibration_periods() } else { 0 };
        let t_obs = cfg.observations;
        let periods = calibration + t_obs + horizon - 1;
        let schedule = mtd_schedule(cfg.nlp, periods, &self.order, &mut streams.plant)?;

        // attack-free calibration run for the CUSUM baseline
        let mut monitor = None;
        if calibration > 0 {
            let mut stream = Vec::with_capacity(calibration);
            for t in 0..calibration {
                let (p, plant) = self.period(&schedule, t, &mut streams)?;
                stream.push(plant.residual(&p.z)?.0);
            }
            monitor = Some(calibrate_cusum(&stream, cfg.cusum_window, cfg.cusum_bound)?);
        }

        // observation history; its final row is the attacked period
        let mut rows = DMatrix::zeros(t_obs, self.meters);
        let mut history = Vec::with_capacity(t_obs);
        for k in 0..t_obs {
            let (p, _) = self.period(&schedule, calibration + k, &mut streams)?;
            rows.set_row(k, &p.z.transpose());
            history.push(p);
        }
        let current = history.last().expect("at least one observation");
        let current_plant = self.plant(current.topology, current.wm_seed)?;
        let mut record = TrialRecord {
            trial,
            topology: current.topology,
            outcome: None,
            cusum_stat: None,
            latency: None,
            abstained: None,
            wrong_cluster: None,
        };

        let attack = self.build_attack(&rows, &history, &current_plant, &mut streams.attacker);
        let (bias, wrong) = match attack {
            Ok(v) => v,
            Err(Error::Abstain(msg)) => {
                record.abstained = Some(msg);
                return Ok(record);
            }
            Err(e @ (Error::Whitening { .. } | Error::InvalidArgument(_))) if cfg.attack == AttackKind::Clustered => {
                // ICA could not run on the matched cluster; no attack emitted
                record.abstained = Some(e.to_string());
                return Ok(record);
            }
            Err(e) => return Err(e),
        };
        record.wrong_cluster = wrong;

        let za = &current.z + &bias;
        let (r, converged) = current_plant.residual(&za)?;
        let mut outcome = DetectionOutcome::new(r, self.threshold);
        outcome.instant_alarm = outcome.instant_alarm || !converged;

        if let Some(mut mon) = monitor {
            let limit = mon.upper_limit();
            let mut note = |period: usize, topology: usize, residual: f64, statistic: f64, attacked: bool, alarm: bool| {
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push(TracePoint { period, topology, residual, statistic, limit, attacked, alarm });
                }
            };
            let first = t_obs - 1 - cfg.pre_attack();
            for (k, p) in history[first..t_obs - 1].iter().enumerate() {
                let plant = self.plant(p.topology, p.wm_seed)?;
                let rk = plant.residual(&p.z)?.0;
                let (s, fired) = mon.update(rk)?;
                note(k, p.topology, rk, s, false, fired);
            }
            let base = cfg.pre_attack();
            let mut alarm = None;
            let (mut stat, fired) = mon.update(r)?;
            note(base, current.topology, r, stat, true, fired);
            if fired {
                alarm = Some(1);
            }
            for k in 1..horizon {
                let (p, plant) = self.period(&schedule, calibration + t_obs - 1 + k, &mut streams)?;
                let (rk, _) = plant.residual(&(&p.z + &bias))?;
                let (s, fired) = mon.update(rk)?;
                note(base + k, p.topology, rk, s, true, fired);
                stat = s;
                if fired && alarm.is_none() {
                    alarm = Some(k + 1);
                }
            }
            record.cusum_stat = Some(stat);
            record.latency = alarm;
            outcome.cusum_alarm = Some(alarm.is_some());
        }
        record.outcome = Some(outcome);
        Ok(record)
    }

    /// The attack bias on the current period and, for clustered attacks,
    /// whether the matched cluster is dominated by another topology.
    fn build_attack(
        &self,
        rows: &DMatrix<f64>,
        history: &[Period],
        current_plant: &Plant,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DVector<f64>, Option<bool>)> {
        let cfg = &self.cfg;
        let current = history.last().unwrap();
        let m = self.meters;
        match (cfg.attack, cfg.mode) {
            (AttackKind::None, _) => Ok((DVector::zeros(m), None)),
            (AttackKind::Full, Mode::Dc) => {
                // the attacker's model is the undefended topology
                let h = self.plants.first().and_then(|p| p.h.clone()).map_or_else(|| build_h_dc(&self.base), Ok)?;
                let c = StateVector::dc(self.c.as_slice().to_vec());
                Ok((full_knowledge_attack(&h, &c).bias, None))
            }
            (AttackKind::Full, Mode::Ac) => {
                let base = Plant { case: self.base.clone(), h: None, sigma: vec![] };
                Ok((self.intended_bias(&base, &current.state), None))
            }
            (AttackKind::Blind, _) => {
                let obs = ObservationSet::from_rows(rows.clone())?;
                let shift = LatentShift::Fit {
                    target: self.intended_bias(current_plant, &current.state),
                    components: cfg.ica_components,
                };
                Ok((blind_ica_attack(&obs, &shift, rng)?.bias, None))
            }
            (AttackKind::Clustered, Mode::Dc) => {
                let (idx, obs) = self.bucketed(rows, rng)?;
                let shift = LatentShift::Fit {
                    target: self.intended_bias(current_plant, &current.state),
                    components: cfg.ica_components,
                };
                let ca = clustered_blind_attack(
                    &obs,
                    &cfg.tsne_params(),
                    &cfg.dbscan_params(),
                    &shift,
                    cfg.min_cluster_size(),
                    rng,
                )?;
                let members: Vec<usize> = ca.training_rows.iter().map(|&i| idx[i]).collect();
                Ok((ca.attack.bias, Some(self.wrong_cluster(history, &members))))
            }
            (AttackKind::Clustered, Mode::Ac) => {
                // the AC payload replays a row from the matched cluster
                let (idx, obs) = self.bucketed(rows, rng)?;
                let (_, labels) = cluster_observations(&obs, &cfg.tsne_params(), &cfg.dbscan_params(), rng)?;
                // replay needs no ICA sample support, only a second row
                let (_, members) = current_cluster(&labels, 2)?;
                let members: Vec<usize> = members.iter().map(|&i| idx[i]).collect();
                let wrong = self.wrong_cluster(history, &members);
                Ok((replay_attack(&obs, &labels, rng)?.bias, Some(wrong)))
            }
            (AttackKind::Replay, _) => {
                // plain replay ignores topology: any earlier row will do
                let obs = ObservationSet::from_rows(rows.clone())?;
                let n = obs.len();
                let labels = ClusterLabeling { labels: vec![0; n], cluster_count: 1, core: vec![true; n] };
                Ok((replay_attack(&obs, &labels, rng)?.bias, None))
            }
        }
    }

    /// History restricted to the current row's load bucket when bucketing
    /// is on, with the original row indices.
    fn bucketed(&self, rows: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, ObservationSet)> {
        let t = rows.nrows();
        let all: Vec<usize> = (0..t).collect();
        let obs = ObservationSet::from_rows(rows.clone())?;
        if self.cfg.bucket_count <= 1 {
            return Ok((all, obs));
        }
        let proxy = self.load_proxy(rows);
        let emb = tsne_embed(&proxy, &self.cfg.tsne_params(), rng)?;
        let buckets = grid_buckets(&emb.points, self.cfg.bucket_count);
        let idx = buckets.members(buckets.assignment[t - 1]);
        Ok((idx.clone(), obs.subset(&idx)))
    }

    /// True when most of the matched rows (the current row excluded) were
    /// generated under a topology other than the current one.
    fn wrong_cluster(&self, history: &[Period], members: &[usize]) -> bool {
        let t = history.len();
        let current = history[t - 1].topology;
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in members.iter().filter(|&&i| i != t - 1) {
            *counts.entry(history[i].topology).or_default() += 1;
        }
        let best = counts.iter().max_by_key(|&(id, n)| (*n, std::cmp::Reverse(*id))).map(|(&id, _)| id);
        best != Some(current)
    }
}

fn non_slack(case: &NetworkCase) -> Vec<usize> {
    let s = case.slack_index();
    (0..case.bus_count()).filter(|&i| i != s).collect()
}

fn full_angles(case: &NetworkCase, state: &StateVector) -> (Vec<f64>, Vec<f64>) {
    let mut theta = vec![0.0; case.bus_count()];
    for (k, &i) in non_slack(case).iter().enumerate() {
        theta[i] = state.angles[k];
    }
    let vm = state.magnitudes.clone().unwrap_or_else(|| vec![1.0; case.bus_count()]);
    (theta, vm)
}

/// Runs every trial of a scenario and aggregates the report.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ExperimentReport> {
    let setup = Setup::new(config)?;
    let run = |t: usize| setup.run_trial(t, None);
    let rows: Vec<TrialRecord> = if config.parallel {
        (0..config.trials).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..config.trials).map(run).collect::<Result<_>>()?
    };
    let abstentions = rows.iter().filter(|r| r.abstained.is_some()).count();
    let judged = rows.len() - abstentions;
    let detector = config.detector_kind();
    let alarms = rows.iter().filter(|r| r.detected(detector) == Some(true)).count();
    Ok(ExperimentReport {
        config: config.clone(),
        rows,
        abstentions,
        detection_probability: (judged > 0).then(|| alarms as f64 / judged as f64),
        seed_fingerprint: seed_fingerprint(config.seed),
    })
}
