//! Batch nonlinear least squares over poses and landmarks.
//!
//! Each linearization eliminates the landmarks with a Schur complement and
//! solves the reduced camera system with a dense Cholesky factorization.
//! Stereo factors are robustified with Huber IRLS weights; pose 0 is the
//! gauge and stays fixed.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, Vector3, Vector6};

use super::factors::{motion_linearize, motion_residual, motion_sqrt_information, stereo_linearize};
use super::graph::FactorGraphProblem;
use super::robust::{huber_rho, huber_weight};
use super::{BackendConfig, OptimizerKind};
use crate::error::{Error, Result, Variable};
use crate::types::PoseSE3;

const INITIAL_TRUST_RADIUS: f64 = 1.0;
const GROW_RATIO: f64 = 0.75;
const SHRINK_RATIO: f64 = 0.25;
const GRADIENT_TOL: f64 = 1e-12;
const STEP_TOL: f64 = 1e-15;
/// Smallest landmark-block eigenvalue accepted, relative to the largest
/// landmark-block diagonal entry.
const LANDMARK_CONDITION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub poses: Vec<PoseSE3>,
    pub landmarks: Vec<Vector3<f64>>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Stereo factors with the landmark behind the camera at the final state.
    pub deactivated_factors: usize,
}

#[derive(Clone)]
struct State {
    poses: Vec<PoseSE3>,
    landmarks: Vec<Vector3<f64>>,
}

/// Robustified cost of the whole graph at a state.
struct Evaluator<'a> {
    graph: &'a FactorGraphProblem,
    cfg: &'a BackendConfig,
    motion_w: Matrix6<f64>,
    by_landmark: Vec<Vec<usize>>,
}

/// Normal equations in block form. Pose 0 is excluded, so free pose `k`
/// lives at block `k - 1`.
struct System {
    n_free: usize,
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    gl: Vec<Vector3<f64>>,
    /// Per landmark: `(free pose block, H_pl)`.
    hpl: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

impl<'a> Evaluator<'a> {
    fn new(graph: &'a FactorGraphProblem, cfg: &'a BackendConfig) -> Self {
        Self {
            graph,
            cfg,
            motion_w: motion_sqrt_information(
                &graph.motion_direction,
                cfg.motion_sigma_rot,
                cfg.motion_sigma_along,
                cfg.motion_sigma_perp,
            ),
            by_landmark: graph.factors_by_landmark(),
        }
    }

    fn cost(&self, s: &State) -> (f64, usize) {
        let mut total = 0.0;
        let mut inactive = 0;
        for f in &self.graph.stereo_factors {
            let pose = &s.poses[f.pose];
            let pc = pose.inverse_transform_point(&s.landmarks[f.landmark]);
            if !(pc.z > 0.0) {
                inactive += 1;
                continue;
            }
            match super::factors::stereo_residual(pose, &s.landmarks[f.landmark], &f.measured, &self.graph.rig) {
                Ok(r) => total += huber_rho(r.norm() / self.cfg.pixel_sigma, self.cfg.huber_k),
                Err(_) => inactive += 1,
            }
        }
        for m in &self.graph.motion_factors {
            let e = self.motion_w * motion_residual(&s.poses[m.from], &s.poses[m.to], &m.measured);
            total += 0.5 * e.norm_squared();
        }
        (total, inactive)
    }

    fn linearize(&self, s: &State) -> System {
        let n_free = s.poses.len().saturating_sub(1);
        let mut sys = System {
            n_free,
            hpp: DMatrix::zeros(6 * n_free, 6 * n_free),
            gp: DVector::zeros(6 * n_free),
            hll: vec![Matrix3::zeros(); s.landmarks.len()],
            gl: vec![Vector3::zeros(); s.landmarks.len()],
            hpl: vec![Vec::new(); s.landmarks.len()],
        };
        let inv_sigma = 1.0 / self.cfg.pixel_sigma;
        let mut deactivated = 0usize;
        for (slot, factors) in self.by_landmark.iter().enumerate() {
            for &k in factors {
                let f = &self.graph.stereo_factors[k];
                let Some(lin) = stereo_linearize(&s.poses[f.pose], &s.landmarks[slot], &f.measured, &self.graph.rig)
                else {
                    deactivated += 1;
                    continue;
                };
                let r = lin.residual * inv_sigma;
                let w = huber_weight(r.norm(), self.cfg.huber_k);
                let jl = lin.d_landmark * inv_sigma;
                let jp = lin.d_pose * inv_sigma;
                sys.hll[slot] += w * jl.transpose() * jl;
                sys.gl[slot] += w * jl.transpose() * r;
                if f.pose > 0 {
                    let b = f.pose - 1;
                    let mut block = sys.hpp.fixed_view_mut::<6, 6>(6 * b, 6 * b);
                    block += w * jp.transpose() * jp;
                    let mut gb = sys.gp.fixed_rows_mut::<6>(6 * b);
                    gb += w * jp.transpose() * r;
                    sys.hpl[slot].push((b, w * jp.transpose() * jl));
                }
            }
        }
        if deactivated > 0 {
            log::warn!("{deactivated} stereo factors deactivated (landmark behind camera)");
        }
        for m in &self.graph.motion_factors {
            let lin = motion_linearize(&s.poses[m.from], &s.poses[m.to], &m.measured);
            let r = self.motion_w * lin.residual;
            let blocks = [(m.from, self.motion_w * lin.d_from), (m.to, self.motion_w * lin.d_to)];
            for (pa, ja) in &blocks {
                if *pa == 0 {
                    continue;
                }
                let a = pa - 1;
                let mut gb = sys.gp.fixed_rows_mut::<6>(6 * a);
                gb += ja.transpose() * r;
                for (pb, jb) in &blocks {
                    if *pb == 0 {
                        continue;
                    }
                    let b = pb - 1;
                    let mut block = sys.hpp.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                    block += ja.transpose() * jb;
                }
            }
        }
        sys
    }
}

impl System {
    fn len(&self) -> usize {
        6 * self.n_free + 3 * self.hll.len()
    }

    fn gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.len());
        g.rows_mut(0, 6 * self.n_free).copy_from(&self.gp);
        let off = 6 * self.n_free;
        for (l, gl) in self.gl.iter().enumerate() {
            g.fixed_rows_mut::<3>(off + 3 * l).copy_from(gl);
        }
        g
    }

    /// `h^T H h` using the block structure.
    fn quad(&self, h: &DVector<f64>) -> f64 {
        let off = 6 * self.n_free;
        let hp = h.rows(0, off);
        let mut q = (hp.transpose() * &self.hpp * hp)[(0, 0)];
        for l in 0..self.hll.len() {
            let hl: Vector3<f64> = h.fixed_rows::<3>(off + 3 * l).into();
            q += hl.dot(&(self.hll[l] * hl));
            for (b, hpl) in &self.hpl[l] {
                let hb: Vector6<f64> = h.fixed_rows::<6>(6 * b).into();
                q += 2.0 * hb.dot(&(hpl * hl));
            }
        }
        q
    }

    /// Solves `(H + lambda * diag(H)) h = -g` by eliminating landmarks.
    fn solve(&self, lambda: f64, landmark_ids: &[u64]) -> Result<DVector<f64>> {
        let np = 6 * self.n_free;
        let mut s = self.hpp.clone();
        if lambda > 0.0 {
            for i in 0..np {
                s[(i, i)] += lambda * s[(i, i)].max(1e-12);
            }
        }
        let mut rhs = -self.gp.clone();
        let landmark_scale = self
            .hll
            .iter()
            .flat_map(|a| (0..3).map(move |i| a[(i, i)]))
            .fold(0.0, f64::max);
        let mut hll_inv = Vec::with_capacity(self.hll.len());
        for l in 0..self.hll.len() {
            let mut a = self.hll[l];
            if lambda > 0.0 {
                for i in 0..3 {
                    a[(i, i)] += lambda * a[(i, i)].max(1e-12);
                }
            }
            if a.iter().all(|v| *v == 0.0) {
                // Every factor of this landmark is deactivated: hold it.
                hll_inv.push(Matrix3::zeros());
                continue;
            }
            // Blocks far weaker than the best-constrained landmark (points
            // drifting to infinity) poison the reduced system with round-off.
            let weakest = a.symmetric_eigenvalues().min();
            let inv = a
                .cholesky()
                .filter(|_| weakest > LANDMARK_CONDITION_FLOOR * landmark_scale)
                .map(|c| c.inverse())
                .ok_or(Error::Singular {
                    variable: Variable::Landmark(landmark_ids[l]),
                })?;
            for (a_idx, ha) in &self.hpl[l] {
                let ha_inv = ha * inv;
                let mut rb = rhs.fixed_rows_mut::<6>(6 * a_idx);
                rb += ha_inv * self.gl[l];
                for (b_idx, hb) in &self.hpl[l] {
                    let mut block = s.fixed_view_mut::<6, 6>(6 * a_idx, 6 * b_idx);
                    block -= ha_inv * hb.transpose();
                }
            }
            hll_inv.push(inv);
        }

        let hp = cholesky_solve(s, rhs).map_err(|row| Error::Singular {
            variable: Variable::Pose(row / 6 + 1),
        })?;

        let mut h = DVector::zeros(self.len());
        h.rows_mut(0, np).copy_from(&hp);
        for l in 0..self.hll.len() {
            let mut r = -self.gl[l];
            for (b, hb) in &self.hpl[l] {
                let p: Vector6<f64> = hp.fixed_rows::<6>(6 * b).into();
                r -= hb.transpose() * p;
            }
            h.fixed_rows_mut::<3>(np + 3 * l).copy_from(&(hll_inv[l] * r));
        }
        Ok(h)
    }
}

/// Dense Cholesky solve; on failure returns the row whose pivot broke down.
fn cholesky_solve(mut a: DMatrix<f64>, mut b: DVector<f64>) -> std::result::Result<DVector<f64>, usize> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if !(d > 1e-14 * scale) {
            return Err(j);
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = v / d;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[(i, k)] * b[k];
        }
        b[i] = v / a[(i, i)];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= a[(k, i)] * b[k];
        }
        b[i] = v / a[(i, i)];
    }
    Ok(b)
}

fn retract(s: &State, h: &DVector<f64>) -> State {
    let n_free = s.poses.len().saturating_sub(1);
    let mut out = s.clone();
    for k in 1..s.poses.len() {
        let xi: Vector6<f64> = h.fixed_rows::<6>(6 * (k - 1)).into();
        out.poses[k] = s.poses[k].retract(&xi);
    }
    let off = 6 * n_free;
    for (l, p) in out.landmarks.iter_mut().enumerate() {
        *p += h.fixed_rows::<3>(off + 3 * l);
    }
    out
}

fn state_norm(s: &State) -> f64 {
    let p: f64 = s.poses.iter().map(|p| p.translation.norm_squared()).sum();
    let l: f64 = s.landmarks.iter().map(|l| l.norm_squared()).sum();
    (p + l).sqrt()
}

/// Dogleg step inside a trust region of radius `radius`.
fn dogleg_step(gn: &DVector<f64>, g: &DVector<f64>, alpha: f64, radius: f64) -> DVector<f64> {
    let gn_norm = gn.norm();
    if gn_norm <= radius {
        return gn.clone();
    }
    let g_norm = g.norm();
    if alpha * g_norm >= radius {
        return g * (-radius / g_norm);
    }
    let a = g * -alpha;
    let d = gn - &a;
    // ||a + beta d|| = radius, beta in [0, 1]
    let (aa, ad, dd) = (a.norm_squared(), a.dot(&d), d.norm_squared());
    let c = aa - radius * radius;
    let beta = if ad <= 0.0 {
        (-ad + (ad * ad - dd * c).sqrt()) / dd
    } else {
        -c / (ad + (ad * ad - dd * c).sqrt())
    };
    a + d * beta
}

/// Runs the configured optimizer on a copy of the graph's variables.
pub fn optimize(graph: &FactorGraphProblem, cfg: &BackendConfig) -> Result<OptimizeResult> {
    if !graph.poses.is_empty() && graph.gauge_prior.is_none() {
        return Err(Error::Validation("graph has no gauge prior".into()));
    }
    let eval = Evaluator::new(graph, cfg);
    let mut state = State {
        poses: graph.poses.clone(),
        landmarks: graph.landmarks.clone(),
    };
    if let Some(prior) = graph.gauge_prior {
        state.poses[0] = prior;
    }
    let (mut cost, _) = eval.cost(&state);
    if !cost.is_finite() {
        return Err(Error::Divergence { iterations: 0 });
    }
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut iterations = 0usize;
    let mut converged = false;
    let mut radius = INITIAL_TRUST_RADIUS;
    let mut lambda = 1e-4;
    let mut nu = 2.0;

    'outer: while iterations < cfg.max_iterations {
        let sys = eval.linearize(&state);
        let g = sys.gradient();
        if g.amax() <= GRADIENT_TOL || cost == 0.0 {
            converged = true;
            break;
        }
        let g_hg = sys.quad(&g);
        let gn = match cfg.optimizer {
            OptimizerKind::Dogleg => Some(sys.solve(0.0, &graph.landmark_ids)?),
            OptimizerKind::LevenbergMarquardt => None,
        };

        // Inner loop: shrink the region / raise damping until a step is accepted.
        loop {
            if iterations >= cfg.max_iterations {
                break 'outer;
            }
            iterations += 1;
            let h = match (&gn, cfg.optimizer) {
                (Some(gn), _) => {
                    let alpha = g.norm_squared() / g_hg.max(1e-300);
                    dogleg_step(gn, &g, alpha, radius)
                }
                (None, _) => match sys.solve(lambda, &graph.landmark_ids) {
                    Ok(h) => h,
                    Err(e) => {
                        lambda *= nu;
                        nu *= 2.0;
                        if lambda > 1e16 {
                            return Err(e);
                        }
                        continue;
                    }
                },
            };
            let h_norm = h.norm();
            if h_norm <= STEP_TOL * (state_norm(&state) + STEP_TOL) {
                converged = true;
                break 'outer;
            }
            let predicted = -g.dot(&h) - 0.5 * sys.quad(&h);
            let candidate = retract(&state, &h);
            let (new_cost, _) = eval.cost(&candidate);
            if !new_cost.is_finite() {
                return Err(Error::Divergence { iterations });
            }
            let actual = cost - new_cost;
            let rho = if predicted > 0.0 { actual / predicted } else { -1.0 };

            match cfg.optimizer {
                OptimizerKind::Dogleg => {
                    if rho > GROW_RATIO {
                        radius = (2.0 * radius).max(2.0 * h_norm);
                    } else if rho < SHRINK_RATIO {
                        radius *= 0.25;
                    }
                }
                OptimizerKind::LevenbergMarquardt => {
                    if rho > 0.0 && actual >= 0.0 {
                        lambda *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                        nu = 2.0;
                    } else {
                        lambda *= nu;
                        nu *= 2.0;
                    }
                }
            }

            if actual >= 0.0 && (rho > 0.0 || actual == 0.0) {
                let prev = cost;
                state = candidate;
                cost = new_cost;
                history.push(cost);
                if prev - cost <= cfg.convergence_tol * prev {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            if radius <= STEP_TOL * (state_norm(&state) + STEP_TOL) || lambda > 1e16 {
                converged = true;
                break 'outer;
            }
        }
    }

    let (final_cost, deactivated) = eval.cost(&state);
    Ok(OptimizeResult {
        poses: state.poses,
        landmarks: state.landmarks,
        initial_cost,
        final_cost,
        cost_history: history,
        iterations,
        converged,
        deactivated_factors: deactivated,
    })
}
