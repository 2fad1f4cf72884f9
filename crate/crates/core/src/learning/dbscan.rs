//! DBSCAN over 2-D points.
//!
//! A point is core when at least `min_pts` points, itself included, lie
//! within `eps`. Clusters are numbered in order of their lowest-index core
//! point; a border point joins the cluster of its lowest-index core
//! neighbour.

use std::collections::VecDeque;

use crate::error::{Error, Result};

pub const NOISE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterLabeling {
    pub labels: Vec<i64>,
    pub cluster_count: usize,
    pub core: Vec<bool>,
}

impl ClusterLabeling {
    pub fn members(&self, label: i64) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|&(_, &l)| l == label).map(|(i, _)| i).collect()
    }
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

pub fn dbscan(points: &[[f64; 2]], eps: f64, min_pts: usize) -> ClusterLabeling {
    assert!(eps > 0.0 && min_pts >= 1, "eps must be positive and min_pts at least 1");
    let n = points.len();
    let e2 = eps * eps;
    // neighbour lists in increasing index order, self included
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| dist2(&points[i], &points[j]) <= e2).collect()).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut cluster = 0i64;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !core[start] || labels[start] != NOISE {
            continue;
        }
        labels[start] = cluster;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for &v in &neighbors[u] {
                if core[v] && labels[v] == NOISE {
                    labels[v] = cluster;
                    queue.push_back(v);
                }
            }
        }
        cluster += 1;
    }
    for i in 0..n {
        if !core[i] {
            if let Some(&c) = neighbors[i].iter().find(|&&j| core[j]) {
                labels[i] = labels[c];
            }
        }
    }
    ClusterLabeling { labels, cluster_count: cluster as usize, core }
}

/// Radius at the elbow of the sorted k-th nearest neighbour distance curve.
///
/// The elbow is the point farthest below the chord joining the ends of the
/// normalized curve; the radius is placed halfway between it and the next
/// point so that it separates the flat part from the steep tail.
pub fn estimate_eps(points: &[[f64; 2]], k: usize) -> Result<f64> {
    let n = points.len();
    if k == 0 || n < k + 1 {
        return Err(Error::InvalidArgument(format!("need more than k = {k} points, got {n}")));
    }
    let mut kd: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist2(&points[i], &points[j])).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1].sqrt()
        })
        .collect();
    kd.sort_by(f64::total_cmp);
    let (lo, hi) = (kd[0], kd[n - 1]);
    let floor = f64::EPSILON * hi.max(1.0);
    if hi - lo <= floor || n == 1 {
        return Ok(hi.max(floor));
    }
    let mut best = 0;
    let mut best_gap = f64::NEG_INFINITY;
    for (i, &d) in kd.iter().enumerate() {
        let x = i as f64 / (n - 1) as f64;
        let y = (d - lo) / (hi - lo);
        let gap = x - y;
        if gap > best_gap {
            best_gap = gap;
            best = i;
        }
    }
    let next = kd[(best + 1).min(n - 1)];
    Ok((0.5 * (kd[best] + next)).max(floor))
}
