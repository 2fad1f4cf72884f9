//! Attack constructors: full-knowledge and blind false data injection, the
//! clustered blind attack, AC replay, and load bucketing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::learning::{dbscan, estimate_eps, fastica, tsne_embed, ClusterLabeling, Embedding, MixingMatrix, TsneParams, NOISE};
use crate::powerflow::{StateVector, TopologyMatrix};

/// Fewest history rows a blind attacker will learn from.
pub const MIN_OBSERVATIONS: usize = 250;

/// Measurement history visible to the attacker, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    /// `T x m`, one measurement vector per row.
    pub rows: DMatrix<f64>,
    /// Strictly increasing period numbers, one per row.
    pub sequence: Vec<u64>,
}

impl ObservationSet {
    pub fn new(rows: DMatrix<f64>, sequence: Vec<u64>) -> Result<Self> {
        if sequence.len() != rows.nrows() {
            return Err(Error::InvalidArgument(format!("{} sequence numbers for {} rows", sequence.len(), rows.nrows())));
        }
        if sequence.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("sequence numbers must be strictly increasing".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("observations must be finite".into()));
        }
        Ok(ObservationSet { rows, sequence })
    }

    /// Rows numbered `0..T`.
    pub fn from_rows(rows: DMatrix<f64>) -> Result<Self> {
        let t = rows.nrows() as u64;
        ObservationSet::new(rows, (0..t).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn meter_count(&self) -> usize {
        self.rows.ncols()
    }

    /// The most recent measurement.
    pub fn current(&self) -> DVector<f64> {
        self.rows.row(self.len() - 1).transpose()
    }

    /// The rows at `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> ObservationSet {
        let rows = self.rows.select_rows(idx);
        let sequence = idx.iter().map(|&i| self.sequence[i]).collect();
        ObservationSet { rows, sequence }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    FullKnowledge,
    Blind,
    ClusteredBlind,
    Replay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackVector {
    /// Added to the measurement vector.
    pub bias: DVector<f64>,
    /// State shift `c` (full knowledge), latent shift (blind family) or the
    /// replay offset in periods (replay).
    pub intent: DVector<f64>,
    pub provenance: Provenance,
}

/// How the blind attacker chooses its latent shift.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentShift {
    /// Use this latent vector as is; its length sets the component count.
    Exact(DVector<f64>),
    /// Least-squares fit of `G dy` to this measurement-space bias using
    /// `components` independent components.
    Fit { target: DVector<f64>, components: usize },
}

impl LatentShift {
    fn components(&self) -> usize {
        match self {
            LatentShift::Exact(v) => v.len(),
            LatentShift::Fit { components, .. } => *components,
        }
    }
}

/// `a = H c`.
pub fn full_knowledge_attack(h: &TopologyMatrix, c: &StateVector) -> AttackVector {
    let c = c.to_dvector();
    AttackVector { bias: &h.entries * &c, intent: c, provenance: Provenance::FullKnowledge }
}

/// Least-squares latent shift: `argmin ||G dy - target||`.
pub fn fit_latent_shift(mixing: &MixingMatrix, target: &DVector<f64>) -> Result<DVector<f64>> {
    let g = &mixing.entries;
    if target.len() != g.nrows() {
        return Err(Error::InvalidArgument(format!("target has {} entries, mixing matrix {} rows", target.len(), g.nrows())));
    }
    g.clone().svd(true, true).solve(target, 1e-12).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn blind_from_rows(rows: &DMatrix<f64>, shift: &LatentShift, ica_seed: u64, provenance: Provenance) -> Result<(AttackVector, MixingMatrix)> {
    let k = shift.components();
    if k == 0 {
        return Err(Error::InvalidArgument("latent shift must have at least one component".into()));
    }
    let mut ica_rng = ChaCha8Rng::seed_from_u64(ica_seed);
    let mixing = fastica(rows, k, &mut ica_rng)?;
    let dy = match shift {
        LatentShift::Exact(v) => v.clone(),
        LatentShift::Fit { target, .. } => fit_latent_shift(&mixing, target)?,
    };
    let bias = &mixing.entries * &dy;
    Ok((AttackVector { bias, intent: dy, provenance }, mixing))
}

fn check_history(obs: &ObservationSet) -> Result<()> {
    if obs.len() < MIN_OBSERVATIONS {
        return Err(Error::InvalidArgument(format!(
            "blind attacks need at least {MIN_OBSERVATIONS} observations, got {}",
            obs.len()
        )));
    }
    Ok(())
}

/// Blind attack `a = G dy` with `G` estimated by FastICA from the history.
pub fn blind_ica_attack<R: Rng + ?Sized>(obs: &ObservationSet, shift: &LatentShift, rng: &mut R) -> Result<AttackVector> {
    check_history(obs)?;
    // the ICA generator is split off first so the clustered attack can
    // reproduce this one exactly on a single-cluster history
    let ica_seed: u64 = rng.random();
    blind_from_rows(&obs.rows, shift, ica_seed, Provenance::Blind).map(|(a, _)| a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbscanParams {
    /// Neighbourhood radius; `None` picks the elbow of the k-distance curve
    /// with `k = min_pts`.
    pub eps: Option<f64>,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams { eps: None, min_pts: 10 }
    }
}

/// Default smallest cluster the clustered attack will train on.
pub fn default_min_cluster(components: usize) -> usize {
    50.max(3 * components)
}

/// Embeds and clusters the history.
pub fn cluster_observations<R: Rng + ?Sized>(
    obs: &ObservationSet,
    tsne: &TsneParams,
    db: &DbscanParams,
    rng: &mut R,
) -> Result<(Embedding, ClusterLabeling)> {
    let emb = tsne_embed(&obs.rows, tsne, rng)?;
    let eps = match db.eps {
        Some(e) => e,
        None => estimate_eps(&emb.points, db.min_pts)?,
    };
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let labels = dbscan(&emb.points, eps, db.min_pts.max(1));
    Ok((emb, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredAttack {
    pub attack: AttackVector,
    pub labels: ClusterLabeling,
    /// Label of the current (final) row.
    pub cluster: i64,
    /// History rows the mixing matrix was estimated from.
    pub training_rows: Vec<usize>,
    pub mixing: MixingMatrix,
}

/// The current row's cluster, or an abstention.
pub fn current_cluster(labels: &ClusterLabeling, min_size: usize) -> Result<(i64, Vec<usize>)> {
    let n = labels.labels.len();
    if n == 0 {
        return Err(Error::Abstain("empty history".into()));
    }
    let label = labels.labels[n - 1];
    if label == NOISE {
        return Err(Error::Abstain("current observation is labeled noise".into()));
    }
    let members = labels.members(label);
    if members.len() < min_size {
        return Err(Error::Abstain(format!("matched cluster has {} rows, need {min_size}", members.len())));
    }
    Ok((label, members))
}

/// Embed, cluster, keep the rows sharing the current row's cluster, and run
/// the blind attack on those rows only.
pub fn clustered_blind_attack<R: Rng + ?Sized>(
    obs: &ObservationSet,
    tsne: &TsneParams,
    db: &DbscanParams,
    shift: &LatentShift,
    min_cluster: usize,
    rng: &mut R,
) -> Result<ClusteredAttack> {
    check_history(obs)?;
    let ica_seed: u64 = rng.random();
    let (_, labels) = cluster_observations(obs, tsne, db, rng)?;
    let (cluster, members) = current_cluster(&labels, min_cluster)?;
    let rows = obs.rows.select_rows(&members);
    let (attack, mixing) = blind_from_rows(&rows, shift, ica_seed, Provenance::ClusteredBlind)?;
    Ok(ClusteredAttack { attack, labels, cluster, training_rows: members, mixing })
}

/// Replays a uniformly chosen earlier row from the current row's cluster.
pub fn replay_attack<R: Rng + ?Sized>(obs: &ObservationSet, labels: &ClusterLabeling, rng: &mut R) -> Result<AttackVector> {
    let t = obs.len();
    if labels.labels.len() != t {
        return Err(Error::InvalidArgument(format!("{} labels for {t} observations", labels.labels.len())));
    }
    let (_, members) = current_cluster(labels, 2)?;
    let pool: Vec<usize> = members.into_iter().filter(|&i| i != t - 1).collect();
    let pick = pool[rng.random_range(0..pool.len())];
    let current = obs.current();
    let chosen = obs.rows.row(pick).transpose();
    let offset = (obs.sequence[t - 1] - obs.sequence[pick]) as f64;
    Ok(AttackVector { bias: chosen - current, intent: DVector::from_element(1, offset), provenance: Provenance::Replay })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadBuckets {
    /// Bucket of each observation.
    pub assignment: Vec<usize>,
    /// Mean embedded position of each bucket.
    pub centers: Vec<[f64; 2]>,
    pub bucket_count: usize,
}

impl LoadBuckets {
    pub fn members(&self, bucket: usize) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|&(_, &b)| b == bucket).map(|(i, _)| i).collect()
    }
}

// Grid shape with cols * rows == k and the two as close as possible.
fn grid_shape(k: usize) -> (usize, usize) {
    let mut cols = (k as f64).sqrt().floor() as usize;
    while !k.is_multiple_of(cols) {
        cols -= 1;
    }
    (cols, k / cols)
}

// Splits `idx` (sorted by `key`) into `parts` runs of near-equal size.
fn equal_frequency(mut idx: Vec<usize>, parts: usize, key: impl Fn(usize) -> f64) -> Vec<Vec<usize>> {
    idx.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    let n = idx.len();
    (0..parts).map(|p| idx[p * n / parts..(p + 1) * n / parts].to_vec()).collect()
}

/// Equal-frequency grid over a 2-D embedding: columns by x, then rows by y
/// within each column.
pub fn grid_buckets(points: &[[f64; 2]], bucket_count: usize) -> LoadBuckets {
    assert!(bucket_count >= 1 && points.len() >= bucket_count, "need at least one point per bucket");
    let (cols, rows) = grid_shape(bucket_count);
    let mut assignment = vec![0; points.len()];
    let mut centers = Vec::with_capacity(bucket_count);
    let all: Vec<usize> = (0..points.len()).collect();
    for (c, col) in equal_frequency(all, cols, |i| points[i][0]).into_iter().enumerate() {
        for (r, cell) in equal_frequency(col, rows, |i| points[i][1]).into_iter().enumerate() {
            let b = c * rows + r;
            let (mut sx, mut sy) = (0.0, 0.0);
            for &i in &cell {
                assignment[i] = b;
                sx += points[i][0];
                sy += points[i][1];
            }
            let k = cell.len().max(1) as f64;
            centers.push([sx / k, sy / k]);
        }
    }
    LoadBuckets { assignment, centers, bucket_count }
}

/// Buckets load observations by their T-SNE embedding.
pub fn bucket_loads<R: Rng + ?Sized>(
    load_obs: &DMatrix<f64>,
    bucket_count: usize,
    tsne: &TsneParams,
    rng: &mut R,
) -> Result<LoadBuckets> {
    let t = load_obs.nrows();
    if bucket_count == 0 {
        return Err(Error::InvalidArgument("bucket count must be at least 1".into()));
    }
    if t < 10 * bucket_count {
        return Err(Error::InvalidArgument(format!("{bucket_count} buckets need at least {} observations, got {t}", 10 * bucket_count)));
    }
    if bucket_count == 1 {
        return Ok(LoadBuckets { assignment: vec![0; t], centers: vec![[0.0, 0.0]], bucket_count });
    }
    let emb = tsne_embed(load_obs, tsne, rng)?;
    Ok(grid_buckets(&emb.points, bucket_count))
}

// Sum of squared deviations from the row mean, and the mean itself.
fn spread(rows: &DMatrix<f64>, idx: &[usize]) -> (f64, DVector<f64>) {
    let mut mean = DVector::zeros(rows.ncols());
    for &i in idx {
        mean += rows.row(i).transpose();
    }
    mean /= idx.len().max(1) as f64;
    let ss = idx.iter().map(|&i| (rows.row(i).transpose() - &mean).norm_squared()).sum();
    (ss, mean)
}

/// Relative RMS spread of load vectors: `sqrt(mean ||y - ybar||^2) / ||ybar||`.
pub fn load_variation(load_obs: &DMatrix<f64>) -> f64 {
    let idx: Vec<usize> = (0..load_obs.nrows()).collect();
    let (ss, mean) = spread(load_obs, &idx);
    (ss / idx.len() as f64).sqrt() / mean.norm()
}

/// Pooled within-bucket spread relative to the overall mean load, on the
/// same scale as [`load_variation`].
pub fn within_bucket_variation(load_obs: &DMatrix<f64>, buckets: &LoadBuckets) -> f64 {
    let t = load_obs.nrows();
    let all: Vec<usize> = (0..t).collect();
    let (_, mean) = spread(load_obs, &all);
    let ss: f64 = (0..buckets.bucket_count).map(|b| spread(load_obs, &buckets.members(b)).0).sum();
    (ss / t as f64).sqrt() / mean.norm()
}
