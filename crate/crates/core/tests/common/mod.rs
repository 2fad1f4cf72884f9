//! Independent reference implementations shared by the test targets.
#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};

// Solves H'WH x = H'W z by Gauss-Jordan elimination with partial pivoting.
pub fn normal_equations_oracle(h: &DMatrix<f64>, z: &DVector<f64>, w: &[f64]) -> Vec<f64> {
    let (m, n) = h.shape();
    let mut a = vec![vec![0.0; n + 1]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = (0..m).map(|k| h[(k, i)] * w[k] * h[(k, j)]).sum();
        }
        a[i][n] = (0..m).map(|k| h[(k, i)] * w[k] * z[k]).sum();
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

// Chi-squared quantile from Simpson integration of the density, with the
// substitution x = u^2 to remove the k = 1 singularity.
pub fn chi2_quantile_oracle(k: usize, alpha: f64) -> f64 {
    let half = k as f64 / 2.0;
    // Gamma(k/2) via Gamma(1/2) = sqrt(pi), Gamma(1) = 1 and the recurrence
    let mut gamma = if k.is_multiple_of(2) { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut a = if k.is_multiple_of(2) { 1.0 } else { 0.5 };
    while a < half - 1e-9 {
        gamma *= a;
        a += 1.0;
    }
    let norm = 2f64.powf(half) * gamma;
    let integrand = |u: f64| 2.0 * u.powi(k as i32 - 1) * (-u * u / 2.0).exp() / norm;
    let cdf = |umax: f64| {
        let n = 20_000;
        let h = umax / n as f64;
        let mut s = integrand(0.0) + integrand(umax);
        for i in 1..n {
            s += integrand(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let (mut lo, mut hi) = (0.0, 20.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let u = 0.5 * (lo + hi);
    u * u
}

/// Reference labeling straight from the definitions: core points, the
/// transitive closure of core-core reachability (Warshall on bitsets), and
/// border points attached to their lowest-index core neighbour.
pub fn dbscan_oracle(points: &[[f64; 2]], eps: f64, min_pts: usize) -> (Vec<bool>, Vec<i64>) {
    let n = points.len();
    let words = n.div_ceil(64);
    let within = |i: usize, j: usize| {
        let dx = points[i][0] - points[j][0];
        let dy = points[i][1] - points[j][1];
        dx * dx + dy * dy <= eps * eps
    };
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| within(i, j)).count() >= min_pts).collect();
    let mut reach = vec![vec![0u64; words]; n];
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && within(i, j) {
                reach[i][j / 64] |= 1 << (j % 64);
            }
        }
    }
    for k in 0..n {
        let rk = reach[k].clone();
        for row in reach.iter_mut() {
            if row[k / 64] >> (k % 64) & 1 == 1 {
                for w in 0..words {
                    row[w] |= rk[w];
                }
            }
        }
    }
    // cluster representative = lowest-index core point reachable
    let mut labels = vec![-1i64; n];
    let mut reps: Vec<usize> = Vec::new();
    for i in 0..n {
        if core[i] {
            let rep = (0..n).find(|&j| j == i || reach[i][j / 64] >> (j % 64) & 1 == 1).unwrap();
            let id = match reps.iter().position(|&r| r == rep) {
                Some(p) => p,
                None => {
                    reps.push(rep);
                    reps.len() - 1
                }
            };
            labels[i] = id as i64;
        }
    }
    for i in 0..n {
        if !core[i] {
            if let Some(j) = (0..n).find(|&j| core[j] && within(i, j)) {
                labels[i] = labels[j];
            }
        }
    }
    (core, labels)
}

pub fn same_partition(a: &[i64], b: &[i64]) -> bool {
    let mut map = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        if (x == -1) != (y == -1) {
            return false;
        }
        *map.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
    })
}

// Amari index of P = W A: zero iff P is a scaled permutation.
pub fn amari(p: &DMatrix<f64>) -> f64 {
    let k = p.nrows();
    let a = p.map(f64::abs);
    let mut s = 0.0;
    for i in 0..k {
        let row = a.row(i);
        s += row.sum() / row.max() - 1.0;
        let col = a.column(i);
        s += col.sum() / col.max() - 1.0;
    }
    s / (2.0 * k as f64 * (k as f64 - 1.0))
}

