//! FastICA with the log-cosh contrast and deflation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const ICA_MAX_ITER: usize = 500;
pub const ICA_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    /// `m x k`, maps sources to centered observations.
    pub entries: DMatrix<f64>,
    pub component_count: usize,
    /// Whether each component's fixed-point iteration converged.
    pub converged: Vec<bool>,
    /// Fixed-point iterations spent on each component.
    pub iterations: Vec<usize>,
    /// Unmixing rows in whitened space (`k x k`, orthonormal).
    pub rotation: DMatrix<f64>,
}

impl MixingMatrix {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Whitening {
    pub mean: DVector<f64>,
    /// `k x m`; whitened scores are `(x - mean) K'`.
    pub transform: DMatrix<f64>,
    /// `m x k` pseudo-inverse of `transform`.
    pub dewhiten: DMatrix<f64>,
    /// `T x k` whitened observations.
    pub scores: DMatrix<f64>,
}

/// PCA whitening onto the top `k` eigenvectors of the sample covariance.
pub fn whiten(obs: &DMatrix<f64>, k: usize) -> Result<Whitening> {
    let (t, m) = obs.shape();
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("component count {k} must lie in 1..={m}")));
    }
    let mean = obs.row_mean().transpose();
    let mut x = obs.clone();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = x.tr_mul(&x) / t as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-12 * lmax.max(f64::MIN_POSITIVE)).count();
    if rank < k || lmax <= 0.0 {
        return Err(Error::Whitening { rank, k });
    }
    let mut transform = DMatrix::zeros(k, m);
    let mut dewhiten = DMatrix::zeros(m, k);
    for (r, &i) in order.iter().take(k).enumerate() {
        let l = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        // fix the eigenvector sign so results do not depend on the solver
        let pivot = v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        transform.row_mut(r).copy_from(&(v.transpose() * (s / l.sqrt())));
        dewhiten.column_mut(r).copy_from(&(v * (s * l.sqrt())));
    }
    let scores = &x * transform.transpose();
    Ok(Whitening { mean, transform, dewhiten, scores })
}

/// Estimates a mixing matrix for `components` independent sources.
pub fn fastica<R: Rng + ?Sized>(observations: &DMatrix<f64>, components: usize, rng: &mut R) -> Result<MixingMatrix> {
    let t = observations.nrows();
    if t < 10 * components {
        return Err(Error::InvalidArgument(format!("need at least {} observations, got {t}", 10 * components)));
    }
    let wh = whiten(observations, components)?;
    let x = &wh.scores;
    let k = components;
    let mut w_rows: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut converged = Vec::with_capacity(k);
    let mut iterations = Vec::with_capacity(k);
    for _ in 0..k {
        let mut w = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        deflate(&mut w, &w_rows);
        w.normalize_mut();
        let mut ok = false;
        let mut used = 0;
        for _ in 0..ICA_MAX_ITER {
            used += 1;
            let u = x * &w;
            let mut ex = DVector::zeros(k);
            let mut eg = 0.0;
            for (i, &ui) in u.iter().enumerate() {
                let g = ui.tanh();
                eg += 1.0 - g * g;
                ex.axpy(g, &x.row(i).transpose(), 1.0);
            }
            let mut wn = ex / t as f64 - &w * (eg / t as f64);
            deflate(&mut wn, &w_rows);
            let norm = wn.norm();
            if !(norm > 0.0) {
                break;
            }
            wn /= norm;
            let change = (1.0 - wn.dot(&w).abs()).abs();
            w = wn;
            if change < ICA_TOL {
                ok = true;
                break;
            }
        }
        converged.push(ok);
        iterations.push(used);
        w_rows.push(w);
    }
    let stuck: Vec<usize> = (0..k).filter(|&p| !converged[p]).collect();
    if !stuck.is_empty() {
        log::warn!("fastica: component(s) {stuck:?} hit the {ICA_MAX_ITER}-iteration cap without converging");
    }
    let mut rotation = DMatrix::zeros(k, k);
    for (r, w) in w_rows.iter().enumerate() {
        rotation.row_mut(r).copy_from(&w.transpose());
    }
    let entries = &wh.dewhiten * rotation.transpose();
    Ok(MixingMatrix { entries, component_count: k, converged, iterations, rotation })
}

fn deflate(w: &mut DVector<f64>, prev: &[DVector<f64>]) {
    for v in prev {
        let d = w.dot(v);
        w.axpy(-d, v, 1.0);
    }
}
