//! Object-level data association between two keypoint sets.
//!
//! Each keypoint is described by its neighbors inside four axis-aligned
//! windows (left, right, top, bottom). Two keypoints are a plausible pair when
//! the summed neighbor distances in each window agree and their rows are
//! close. The resulting cost matrix is solved as a linear sum assignment and
//! high-cost pairs are discarded.

mod hungarian;

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CameraRig, Keypoint2D};

pub use hungarian::{solve_lsap, LsapSolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssocConfig {
    /// Window extent along the search axis, pixels.
    pub delta_px: f64,
    /// Window half-width across the search axis, pixels.
    pub epsilon_px: f64,
    pub r_weight: f64,
    pub cost_filter_threshold: f64,
    /// Per-window contribution (times `r_weight`) when both windows are empty.
    pub missing_neighbor_penalty: f64,
    /// Per-window contribution (times `r_weight`) when exactly one window is empty.
    pub one_sided_neighbor_penalty: f64,
    pub dummy_cost: f64,
    pub symmetric_ratio: bool,
    /// Price of leaving a keypoint unassigned. When set, every keypoint on
    /// either side gets a private reject option at this cost inside the
    /// assignment problem, so a point without a true partner no longer
    /// displaces others. `None` solves the plain padded problem.
    #[serde(default)]
    pub unmatched_cost: Option<f64>,
}

impl AssocConfig {
    /// Defaults scaled to the rig's image width.
    pub fn for_rig(rig: &CameraRig) -> Self {
        let delta_px = rig.width_px / 20.0;
        let r_weight = 1.0;
        // A perfect structural match costs 4r. The solver only pairs two
        // points when that beats rejecting both, i.e. below 2 * unmatched_cost.
        let unmatched_cost = 4.0 * r_weight + 2.0;
        let cost_filter_threshold = 4.0 * r_weight + 7.0;
        Self {
            delta_px,
            epsilon_px: delta_px / 4.0,
            r_weight,
            cost_filter_threshold,
            missing_neighbor_penalty: 1.0,
            one_sided_neighbor_penalty: 4.0,
            dummy_cost: 10.0 * cost_filter_threshold,
            symmetric_ratio: true,
            unmatched_cost: Some(unmatched_cost),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.delta_px > self.epsilon_px
            && self.epsilon_px > 0.0
            && self.r_weight > 0.0
            && self.cost_filter_threshold > 0.0
            && self.dummy_cost > self.cost_filter_threshold
            && self.dummy_cost.is_finite()
            && self.missing_neighbor_penalty >= 0.0
            && self.one_sided_neighbor_penalty >= 0.0
            && self.unmatched_cost.is_none_or(|c| c > 0.0 && c.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid association config {self:?}")))
        }
    }
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self::for_rig(&CameraRig::default())
    }
}

/// Neighbors of one keypoint, split by direction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborSets {
    pub left: Vec<Keypoint2D>,
    pub right: Vec<Keypoint2D>,
    pub top: Vec<Keypoint2D>,
    pub bottom: Vec<Keypoint2D>,
}

impl NeighborSets {
    fn distance_sums(&self, center: &Keypoint2D) -> [WindowSum; 4] {
        let sum = |set: &[Keypoint2D]| WindowSum {
            count: set.len(),
            total: set.iter().map(|p| p.dist(center)).sum(),
        };
        [
            sum(&self.left),
            sum(&self.right),
            sum(&self.bottom),
            sum(&self.top),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct WindowSum {
    count: usize,
    total: f64,
}

/// Membership in each window is decided independently, with strict
/// inequalities on both bounds.
pub fn build_neighbor_sets(node: &Keypoint2D, peers: &[Keypoint2D], cfg: &AssocConfig) -> NeighborSets {
    let (delta, eps) = (cfg.delta_px, cfg.epsilon_px);
    let mut sets = NeighborSets::default();
    for p in peers {
        let dx = node.x - p.x;
        let dy = node.y - p.y;
        if dy.abs() < eps {
            if 0.0 < dx && dx < delta {
                sets.left.push(*p);
            }
            if 0.0 < -dx && -dx < delta {
                sets.right.push(*p);
            }
        }
        if dx.abs() < eps {
            if 0.0 < dy && dy < delta {
                sets.top.push(*p);
            }
            if 0.0 < -dy && -dy < delta {
                sets.bottom.push(*p);
            }
        }
    }
    sets
}

fn window_term(u: WindowSum, v: WindowSum, cfg: &AssocConfig) -> f64 {
    match (u.count, v.count) {
        (0, 0) => cfg.missing_neighbor_penalty,
        (0, _) | (_, 0) => cfg.one_sided_neighbor_penalty,
        _ => {
            // Distinct keypoints are never co-located, so both sums are positive.
            let ratio = u.total / v.total;
            if cfg.symmetric_ratio {
                ratio.max(1.0 / ratio)
            } else {
                ratio
            }
        }
    }
}

fn cost_from_sums(u: &Keypoint2D, v: &Keypoint2D, us: &[WindowSum; 4], vs: &[WindowSum; 4], cfg: &AssocConfig) -> f64 {
    let structure: f64 = us
        .iter()
        .zip(vs)
        .map(|(a, b)| window_term(*a, *b, cfg))
        .sum();
    cfg.r_weight * structure + (u.y - v.y).abs()
}

/// Association cost of pairing `u` (from U) with `v` (from V).
pub fn pair_cost(
    u: &Keypoint2D,
    v: &Keypoint2D,
    u_sets: &NeighborSets,
    v_sets: &NeighborSets,
    cfg: &AssocConfig,
) -> f64 {
    cost_from_sums(u, v, &u_sets.distance_sums(u), &v_sets.distance_sums(v), cfg)
}

fn window_sums(points: &[Keypoint2D], cfg: &AssocConfig) -> Vec<[WindowSum; 4]> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let peers: Vec<Keypoint2D> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| *q)
                .collect();
            build_neighbor_sets(p, &peers, cfg).distance_sums(p)
        })
        .collect()
}

/// Square cost matrix of side `max(|U|, |V|)`; padding entries are
/// `cfg.dummy_cost`.
pub fn cost_matrix(u: &[Keypoint2D], v: &[Keypoint2D], cfg: &AssocConfig) -> DMatrix<f64> {
    let us = window_sums(u, cfg);
    let vs = window_sums(v, cfg);
    let n = u.len().max(v.len());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i < u.len() && j < v.len() {
                        cost_from_sums(&u[i], &v[j], &us[i], &vs[j], cfg)
                    } else {
                        cfg.dummy_cost
                    }
                })
                .collect()
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

/// Accepted pairs plus the indices left unmatched on each side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// `(index into U, index into V, cost)`, sorted by U index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_u: Vec<usize>,
    pub unmatched_v: Vec<usize>,
}

impl Assignment {
    pub fn v_for_u(&self, u_index: usize) -> Option<usize> {
        self.pairs
            .binary_search_by_key(&u_index, |p| p.0)
            .ok()
            .map(|k| self.pairs[k].1)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let io = |e| Error::io(path, e);
        writeln!(out, "u_index,v_index,cost").map_err(io)?;
        for (i, j, c) in &self.pairs {
            writeln!(out, "{i},{j},{c}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Cost matrix with a private reject option per keypoint: side `n + m`,
/// rows are U then V-rejects, columns are V then U-rejects.
fn gated_cost_matrix(real: &DMatrix<f64>, n: usize, m: usize, reject: f64) -> DMatrix<f64> {
    let max_real = real.view((0, 0), (n, m)).max();
    // Never worth taking over the diagonal reject slots.
    let forbidden = (n + m) as f64 * (max_real.max(0.0) + reject) + 1.0;
    DMatrix::from_fn(n + m, n + m, |i, j| match (i < n, j < m) {
        (true, true) => real[(i, j)],
        (true, false) => if j - m == i { reject } else { forbidden },
        (false, true) => if i - n == j { reject } else { forbidden },
        (false, false) => 0.0,
    })
}

/// Full association: neighbor sets, cost matrix, Hungarian solve, then
/// rejection of dummy and over-threshold pairs.
pub fn associate(u: &[Keypoint2D], v: &[Keypoint2D], cfg: &AssocConfig) -> Assignment {
    if u.is_empty() || v.is_empty() {
        return Assignment {
            pairs: Vec::new(),
            unmatched_u: (0..u.len()).collect(),
            unmatched_v: (0..v.len()).collect(),
        };
    }
    let mut costs = cost_matrix(u, v, cfg);
    if let Some(reject) = cfg.unmatched_cost {
        costs = gated_cost_matrix(&costs, u.len(), v.len(), reject);
    }
    let solution = solve_lsap(&costs).expect("cost matrix is square and finite");
    let mut pairs = Vec::new();
    let mut matched_v = vec![false; v.len()];
    let mut unmatched_u = Vec::new();
    for (i, &j) in solution.row_to_col.iter().enumerate().take(u.len()) {
        let c = costs[(i, j)];
        if j < v.len() && c <= cfg.cost_filter_threshold {
            pairs.push((i, j, c));
            matched_v[j] = true;
        } else {
            unmatched_u.push(i);
        }
    }
    let unmatched_v = (0..v.len()).filter(|&j| !matched_v[j]).collect();
    Assignment {
        pairs,
        unmatched_u,
        unmatched_v,
    }
}
