//! Weighted least squares estimation, residual bad-data detection and CUSUM.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::casefile::{BusKind, NetworkCase};
use crate::error::{Error, Result};
use crate::powerflow::{ac_jacobian, ac_measurements, MeasurementVector, Mode, StateVector, TopologyMatrix};

/// Diagonal WLS weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub diagonal: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(diagonal: Vec<f64>) -> Result<Self> {
        if diagonal.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("weights must be positive and finite".into()));
        }
        Ok(WeightMatrix { diagonal })
    }

    pub fn identity(m: usize) -> Self {
        WeightMatrix { diagonal: vec![1.0; m] }
    }

    /// `W = diag(1 / sigma_i^2)`.
    pub fn from_sigmas(sigmas: &[f64]) -> Result<Self> {
        WeightMatrix::new(sigmas.iter().map(|s| 1.0 / (s * s)).collect())
    }

    pub fn len(&self) -> usize {
        self.diagonal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diagonal.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionOutcome {
    pub residual: f64,
    pub threshold: f64,
    pub instant_alarm: bool,
    pub cusum_alarm: Option<bool>,
}

impl DetectionOutcome {
    pub fn new(residual: f64, threshold: f64) -> Self {
        DetectionOutcome { residual, threshold, instant_alarm: residual > threshold, cusum_alarm: None }
    }
}

const RANK_TOL: f64 = 1e-10;

/// Minimizer of `(z - Hx)' W (z - Hx)` via QR of `W^{1/2} H`.
pub fn wls_solve(h: &DMatrix<f64>, z: &DVector<f64>, w: &[f64]) -> Result<DVector<f64>> {
    let (m, n) = h.shape();
    if z.len() != m || w.len() != m {
        return Err(Error::InvalidArgument(format!("shapes: H {m}x{n}, z {}, W {}", z.len(), w.len())));
    }
    if m < n {
        return Err(Error::Unobservable { rank: m, n });
    }
    let mut a = h.clone();
    let mut b = z.clone();
    for i in 0..m {
        let s = w[i].sqrt();
        a.row_mut(i).scale_mut(s);
        b[i] *= s;
    }
    let qr = a.qr();
    let r = qr.r();
    let dmax = r.diagonal().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let rank = r.diagonal().iter().filter(|v| v.abs() > RANK_TOL * dmax).count();
    if rank < n || dmax == 0.0 {
        return Err(Error::Unobservable { rank, n });
    }
    let qtb = qr.q().tr_mul(&b);
    r.solve_upper_triangular(&qtb).ok_or(Error::Singular)
}

/// WLS state estimate `x = (H'WH)^-1 H'W z`.
pub fn wls_estimate(z: &MeasurementVector, h: &TopologyMatrix, w: &WeightMatrix) -> Result<StateVector> {
    let x = wls_solve(&h.entries, &z.values, &w.diagonal)?;
    Ok(StateVector::dc(x.as_slice().to_vec()))
}

/// `||z - H x||_2`.
pub fn residual_norm(z: &MeasurementVector, h: &TopologyMatrix, x_hat: &StateVector) -> f64 {
    (&z.values - &h.entries * x_hat.to_dvector()).norm()
}

/// Detection threshold `sigma * sqrt(chi2_inv(alpha; m - n))`.
pub fn chi2_threshold(m: usize, n: usize, alpha: f64, sigma: f64) -> Result<f64> {
    if m <= n {
        return Err(Error::DegreesOfFreedom { m, n });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
    }
    let chi = ChiSquared::new((m - n) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(sigma * chi.inverse_cdf(alpha).sqrt())
}

#[derive(Debug, Clone)]
pub struct AcEstimate {
    pub state: StateVector,
    /// `||W^{1/2} (z - h(x))||_2`; the plain 2-norm under unit weights.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub const GN_MAX_ITER: usize = 20;
pub const GN_STEP_TOL: f64 = 1e-8;

/// AC state estimation by Gauss-Newton with unit weights.
pub fn ac_estimate(z: &MeasurementVector, case: &NetworkCase) -> Result<AcEstimate> {
    ac_estimate_weighted(z, case, &WeightMatrix::identity(z.len()))
}

/// AC state estimation by Gauss-Newton from a flat start. Non-convergence
/// is reported through `converged`, not as an error.
pub fn ac_estimate_weighted(z: &MeasurementVector, case: &NetworkCase, w: &WeightMatrix) -> Result<AcEstimate> {
    let nb = case.bus_count();
    let slack = case.slack_index();
    let m = 2 * case.branch_count() + 3 * nb;
    if z.len() != m || z.mode != Mode::Ac || w.len() != m {
        return Err(Error::InvalidArgument(format!("expected {m} AC meters, got {}", z.len())));
    }
    // state columns: non-slack angles, then every magnitude
    let cols: Vec<usize> = (0..nb).filter(|&i| i != slack).chain(nb..2 * nb).collect();
    let mut theta = vec![0.0; nb];
    let mut vm = vec![1.0; nb];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < GN_MAX_ITER {
        let r = &z.values - ac_measurements(case, &theta, &vm);
        let jf = ac_jacobian(case, &theta, &vm);
        let j = jf.select_columns(cols.iter());
        let dx = wls_solve(&j, &r, &w.diagonal)?;
        iterations += 1;
        if dx.iter().any(|v| !v.is_finite()) {
            break;
        }
        for (k, &c) in cols.iter().enumerate() {
            if c < nb {
                theta[c] += dx[k];
            } else {
                vm[c - nb] += dx[k];
            }
        }
        if dx.amax() < GN_STEP_TOL {
            converged = true;
            break;
        }
    }
    let r = &z.values - ac_measurements(case, &theta, &vm);
    let residual = r.iter().zip(&w.diagonal).map(|(v, wi)| wi * v * v).sum::<f64>().sqrt();
    let state = StateVector {
        angles: (0..nb).filter(|&i| case.buses[i].kind != BusKind::Slack).map(|i| theta[i]).collect(),
        magnitudes: Some(vm),
        mode: Mode::Ac,
    };
    let converged = converged && residual.is_finite();
    Ok(AcEstimate { state, residual, converged, iterations })
}

/// Closed-form residual after an MTD, for an attack `c` built on the
/// pre-MTD matrix `H_o = H_n + delta_h`:
/// `||(I - H_n F_n) z + (I - H_n F_n) delta_h c||_2`.
pub fn mtd_residual_predicted(
    z: &MeasurementVector,
    c: &StateVector,
    h_new: &TopologyMatrix,
    delta_h: &TopologyMatrix,
    w: &WeightMatrix,
) -> Result<f64> {
    let hn = &h_new.entries;
    let v = &z.values + &delta_h.entries * c.to_dvector();
    let x = wls_solve(hn, &v, &w.diagonal)?;
    Ok((v - hn * x).norm())
}

/// Windowed CUSUM over residuals.
///
/// The statistic is the mean of `r_j - target` over the last `window`
/// residuals, floored at zero. The alarm fires when the windowed mean of
/// `r` exceeds `baseline_mean + bound_sigmas * baseline_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct CusumMonitor {
    pub window: usize,
    pub target: f64,
    pub bound_sigmas: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub history: VecDeque<f64>,
    pub statistic: f64,
    calibrated: bool,
}

impl CusumMonitor {
    /// An uncalibrated monitor; updates fail until baseline values are set.
    pub fn new(window: usize, bound_sigmas: f64) -> Self {
        CusumMonitor {
            window: window.max(1),
            target: 0.0,
            bound_sigmas,
            baseline_mean: 0.0,
            baseline_std: 0.0,
            history: VecDeque::with_capacity(window),
            statistic: 0.0,
            calibrated: false,
        }
    }

    /// Sets the baseline by hand; `target` follows the mean.
    pub fn with_baseline(mut self, mean: f64, std: f64) -> Self {
        self.baseline_mean = mean;
        self.baseline_std = std;
        self.target = mean;
        self.calibrated = true;
        self
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    pub fn upper_limit(&self) -> f64 {
        self.baseline_mean + self.bound_sigmas * self.baseline_std
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.statistic = 0.0;
    }

    pub fn update(&mut self, r: f64) -> Result<(f64, bool)> {
        if !self.calibrated {
            return Err(Error::Uncalibrated);
        }
        self.history.push_back(r);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        let mean = self.history.iter().sum::<f64>() / self.history.len() as f64;
        self.statistic = (mean - self.target).max(0.0);
        Ok((self.statistic, mean > self.upper_limit()))
    }
}

pub fn cusum_update(monitor: &mut CusumMonitor, r: f64) -> Result<(f64, bool)> {
    monitor.update(r)
}

/// Calibrates a monitor on an attack-free residual stream.
pub fn calibrate_cusum(residual_stream: &[f64], window: usize, bound_sigmas: f64) -> Result<CusumMonitor> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    let need = 10 * window;
    if residual_stream.len() < need {
        return Err(Error::StreamTooShort { len: residual_stream.len(), need });
    }
    let n = residual_stream.len() as f64;
    let mean = residual_stream.iter().sum::<f64>() / n;
    let var = residual_stream.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    Ok(CusumMonitor::new(window, bound_sigmas).with_baseline(mean, var.sqrt()))
}
