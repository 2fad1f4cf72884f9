//! Exact t-SNE.
//!
//! Gaussian input affinities with per-row bandwidths found by bisection,
//! symmetrized `p_ij = (p_j|i + p_i|j) / 2N`, Student-t output kernel,
//! gradient descent with momentum, gains and early exaggeration.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    /// Record the cost every this many iterations (the first and last
    /// iterations are always recorded).
    pub cost_every: usize,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            cost_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    /// KL cost at initialization followed by the recorded iterations.
    pub kl_trace: Vec<f64>,
    /// Iteration index of each `kl_trace` entry (0 = before any step).
    pub kl_iterations: Vec<usize>,
    /// Achieved perplexity of each row's conditional distribution.
    pub row_perplexity: Vec<f64>,
}

const PERPLEXITY_TOL: f64 = 1e-3;
const INIT_STD: f64 = 1e-4;

/// The seeded starting layout used by [`tsne_embed`].
pub fn tsne_init<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [INIT_STD * a, INIT_STD * b]
        })
        .collect()
}

fn squared_distances(data: &DMatrix<f64>) -> Vec<f64> {
    let n = data.nrows();
    let m = data.ncols();
    // row-major copy for contiguous access
    let rows: Vec<f64> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| data[(i, j)]).collect();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let ri = &rows[i * m..(i + 1) * m];
        for j in (i + 1)..n {
            let rj = &rows[j * m..(j + 1) * m];
            let s: f64 = ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional affinities `p_j|i` for one row, solving for the precision
/// `beta = 1 / 2 sigma^2` until `exp(H)` is within tolerance of `perplexity`.
/// Newton steps on `H(beta)` are taken while they stay inside the current
/// bracket, bisection otherwise. Returns the achieved perplexity.
fn calibrate_row(dist: &[f64], i: usize, perplexity: f64, out: &mut [f64]) -> f64 {
    let n = dist.len();
    let dmin = dist.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).fold(f64::INFINITY, f64::min);
    let target = perplexity.ln();
    // shift by the nearest distance so the largest term is exp(0); returns
    // the entropy and its derivative in beta
    let eval = |beta: f64, out: &mut [f64]| -> (f64, f64) {
        let (mut sum, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for j in 0..n {
            if j == i {
                out[j] = 0.0;
                continue;
            }
            let dd = dist[j] - dmin;
            let p = (-beta * dd).exp();
            out[j] = p;
            sum += p;
            m1 += dd * p;
            m2 += dd * dd * p;
        }
        let (e1, e2) = (m1 / sum, m2 / sum);
        (sum.ln() + beta * e1, -beta * (e2 - e1 * e1))
    };
    let mut beta = 1.0 / dist.iter().filter(|&&d| d > dmin).cloned().fold(f64::INFINITY, f64::min).max(f64::MIN_POSITIVE);
    if !beta.is_finite() {
        beta = 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let (mut h, mut dh) = eval(beta, out);
    for _ in 0..200 {
        if (h.exp() - perplexity).abs() <= PERPLEXITY_TOL * 0.5 {
            break;
        }
        // entropy decreases in beta
        if h > target {
            lo = beta;
        } else {
            hi = beta;
        }
        let newton = beta - (h - target) / dh;
        beta = if dh < 0.0 && newton > lo && newton < hi {
            newton
        } else if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            beta * 2.0
        };
        (h, dh) = eval(beta, out);
    }
    let sum: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
    h.exp()
}

/// Symmetrized joint affinities (row-major `n x n`) and per-row perplexities.
pub fn joint_affinities(data: &DMatrix<f64>, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = data.nrows();
    if data.ncols() == 0 {
        return Err(Error::InvalidArgument("data has no columns".into()));
    }
    if !(perplexity > 0.0) || (n as f64) < 3.0 * perplexity {
        return Err(Error::Perplexity { perplexity, n });
    }
    let dist = squared_distances(data);
    for i in 0..n {
        if (0..n).all(|j| j == i || dist[i * n + j] == 0.0) {
            return Err(Error::DuplicatePoints(i));
        }
    }
    let mut cond = vec![0.0; n * n];
    let mut perp = vec![0.0; n];
    for i in 0..n {
        perp[i] = calibrate_row(&dist[i * n..(i + 1) * n], i, perplexity, &mut cond[i * n..(i + 1) * n]);
    }
    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / denom).max(f64::EPSILON);
        }
        p[i * n + i] = 0.0;
    }
    Ok((p, perp))
}

// KL(P || Q) for the current layout.
fn kl_cost(p: &[f64], plogp: f64, y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut z = 0.0;
    let mut cross = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let q = 1.0 / (1.0 + dx * dx + dy * dy);
            z += 2.0 * q;
            cross += 2.0 * p[i * n + j] * q.ln();
        }
    }
    plogp - cross + z.ln()
}

const LANES: usize = 8;

/// Force accumulators in struct-of-arrays form.
struct Forces {
    ax: Vec<f32>,
    ay: Vec<f32>,
    rx: Vec<f32>,
    ry: Vec<f32>,
}

impl Forces {
    fn zeroed(n: usize) -> Self {
        Forces { ax: vec![0.0; n], ay: vec![0.0; n], rx: vec![0.0; n], ry: vec![0.0; n] }
    }
}

// Adds the interactions of row i with every j > i to both ends and returns
// the row's share of Z (pairs counted once). The pair kernel runs in single
// precision over contiguous slices with lane accumulators, so it vectorizes
// with a fixed summation order; the order does not depend on the
// instruction set, so every code path gives the same bits.
// The force buffers are separate `&mut` arguments of a non-inlined
// function so the compiler knows they cannot alias, which the vectorizer
// needs.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn row_body(
    (xi, yi): (f32, f32),
    xs: &[f32],
    ys: &[f32],
    pr: &[f32],
    ax: &mut [f32],
    ay: &mut [f32],
    rx: &mut [f32],
    ry: &mut [f32],
) -> [f64; 5] {
    let len = xs.len();
    let mut acc = [[0.0f32; LANES]; 5];
    let body = len - len % LANES;
    let chunks = xs[..body]
        .chunks_exact(LANES)
        .zip(ys[..body].chunks_exact(LANES))
        .zip(pr[..body].chunks_exact(LANES))
        .zip(ax[..body].chunks_exact_mut(LANES))
        .zip(ay[..body].chunks_exact_mut(LANES))
        .zip(rx[..body].chunks_exact_mut(LANES))
        .zip(ry[..body].chunks_exact_mut(LANES));
    for ((((((xc, yc), pc), axc), ayc), rxc), ryc) in chunks {
        for l in 0..LANES {
            let dx = xi - xc[l];
            let dy = yi - yc[l];
            let q = 1.0 / (1.0 + dx * dx + dy * dy);
            let pq = pc[l] * q;
            let qq = q * q;
            acc[0][l] += pq * dx;
            acc[1][l] += pq * dy;
            acc[2][l] += qq * dx;
            acc[3][l] += qq * dy;
            acc[4][l] += q;
            axc[l] -= pq * dx;
            ayc[l] -= pq * dy;
            rxc[l] -= qq * dx;
            ryc[l] -= qq * dy;
        }
    }
    let mut out = [0.0f64; 5];
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = a.iter().map(|&v| v as f64).sum();
    }
    for k in body..len {
        let dx = xi - xs[k];
        let dy = yi - ys[k];
        let q = 1.0 / (1.0 + dx * dx + dy * dy);
        let pq = pr[k] * q;
        let qq = q * q;
        out[0] += (pq * dx) as f64;
        out[1] += (pq * dy) as f64;
        out[2] += (qq * dx) as f64;
        out[3] += (qq * dy) as f64;
        out[4] += q as f64;
        ax[k] -= pq * dx;
        ay[k] -= pq * dy;
        rx[k] -= qq * dx;
        ry[k] -= qq * dy;
    }
    out
}

type RowKernel = fn((f32, f32), &[f32], &[f32], &[f32], &mut [f32], &mut [f32], &mut [f32], &mut [f32]) -> [f64; 5];

#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn row_pass(
    c: (f32, f32),
    xs: &[f32],
    ys: &[f32],
    pr: &[f32],
    ax: &mut [f32],
    ay: &mut [f32],
    rx: &mut [f32],
    ry: &mut [f32],
) -> [f64; 5] {
    row_body(c, xs, ys, pr, ax, ay, rx, ry)
}

// Wider registers only; no fused multiply-add, so results match the
// baseline kernel bit for bit.
#[cfg(target_arch = "x86_64")]
#[allow(clippy::too_many_arguments)]
#[target_feature(enable = "avx2")]
#[inline(never)]
fn row_pass_avx2(
    c: (f32, f32),
    xs: &[f32],
    ys: &[f32],
    pr: &[f32],
    ax: &mut [f32],
    ay: &mut [f32],
    rx: &mut [f32],
    ry: &mut [f32],
) -> [f64; 5] {
    row_body(c, xs, ys, pr, ax, ay, rx, ry)
}

fn row_kernel() -> RowKernel {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return |c, xs, ys, pr, ax, ay, rx, ry| unsafe { row_pass_avx2(c, xs, ys, pr, ax, ay, rx, ry) };
        }
    }
    row_pass
}

/// Attractive and repulsive force sums for every point plus Z.
fn gradient_pass(kernel: RowKernel, xs: &[f32], ys: &[f32], p: &[f32], f: &mut Forces) -> f64 {
    let n = xs.len();
    let Forces { ax, ay, rx, ry } = f;
    let mut z = 0.0;
    for i in 0..n {
        let lo = i + 1;
        let out = kernel(
            (xs[i], ys[i]),
            &xs[lo..],
            &ys[lo..],
            &p[i * n + lo..(i + 1) * n],
            &mut ax[lo..],
            &mut ay[lo..],
            &mut rx[lo..],
            &mut ry[lo..],
        );
        ax[i] += out[0] as f32;
        ay[i] += out[1] as f32;
        rx[i] += out[2] as f32;
        ry[i] += out[3] as f32;
        z += 2.0 * out[4];
    }
    z
}

/// Embeds the rows of `data` into two dimensions.
pub fn tsne_embed<R: Rng + ?Sized>(data: &DMatrix<f64>, params: &TsneParams, rng: &mut R) -> Result<Embedding> {
    let (p, row_perplexity) = joint_affinities(data, params.perplexity)?;
    let n = data.nrows();
    let mut y = tsne_init(n, rng);
    let plogp: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let mut kl_trace = vec![kl_cost(&p, plogp, &y)];
    let mut kl_iterations = vec![0];
    let mut vel = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let p32: Vec<f32> = p.iter().map(|&v| v as f32).collect();
    let mut xs = vec![0.0f32; n];
    let mut ys = vec![0.0f32; n];
    let mut forces = Forces::zeroed(n);
    let kernel = row_kernel();
    let every = params.cost_every.max(1);

    for it in 0..params.iterations {
        let exag = if it < params.exaggeration_iters { params.early_exaggeration } else { 1.0 };
        let mom = if it < params.exaggeration_iters { params.momentum } else { params.final_momentum };
        // one pass per row over contiguous coordinates: attractive sum
        // p*q*(yi-yj), repulsive sum q^2*(yi-yj), and the row's share of Z
        for (k, v) in y.iter().enumerate() {
            xs[k] = v[0] as f32;
            ys[k] = v[1] as f32;
        }
        for v in [&mut forces.ax, &mut forces.ay, &mut forces.rx, &mut forces.ry] {
            v.fill(0.0);
        }
        let z = gradient_pass(kernel, &xs, &ys, &p32, &mut forces);
        for i in 0..n {
            let attr = [forces.ax[i] as f64, forces.ay[i] as f64];
            let rep = [forces.rx[i] as f64, forces.ry[i] as f64];
            for d in 0..2 {
                let g = 4.0 * (exag * attr[d] - rep[d] / z);
                let gain = &mut gains[i][d];
                *gain = if g * vel[i][d] < 0.0 { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
                vel[i][d] = mom * vel[i][d] - params.learning_rate * *gain * g;
                y[i][d] += vel[i][d];
            }
        }
        // recentre
        let (mx, my) = y.iter().fold((0.0, 0.0), |(a, b), v| (a + v[0], b + v[1]));
        let (mx, my) = (mx / n as f64, my / n as f64);
        for v in y.iter_mut() {
            v[0] -= mx;
            v[1] -= my;
        }
        if (it + 1) % every == 0 || it + 1 == params.iterations {
            kl_trace.push(kl_cost(&p, plogp, &y));
            kl_iterations.push(it + 1);
        }
    }
    if y.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
        return Err(Error::InvalidArgument("t-SNE diverged; lower the learning rate".into()));
    }
    Ok(Embedding { points: y, kl_trace, kl_iterations, row_perplexity })
}
