//! Nuclear norm, its prox, Burer-Monteiro factors and the cone-constrained
//! variant `||Z||_{*,K}` (gauge of `conv{u v^T : K u >= 0, ||u|| ||v|| <= 1}`).

use serde::{Deserialize, Serialize};

use crate::linalg::{row_space_basis, spectral_norm, Mat, Svd, Vector};
use crate::rng::{gaussian_mat, gaussian_vec, seeded, Rng};

pub fn nuclear_norm(z: &Mat) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    Svd::new(z).s.iter().sum()
}

/// Singular value thresholding: the minimizer of `1/2 ||Z - A||_F^2 + tau ||Z||_*`.
pub fn svt_prox(a: &Mat, tau: f64) -> Mat {
    if a.is_empty() {
        return a.clone();
    }
    Svd::new(a).reconstruct_with(|s| (s - tau).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BmFactors {
    pub u: Mat,
    pub v: Mat,
}

impl BmFactors {
    pub fn zeros(rows: usize, cols: usize, rank: usize) -> Self {
        BmFactors { u: Mat::zeros(rows, rank), v: Mat::zeros(cols, rank) }
    }

    pub fn rank_budget(&self) -> usize {
        self.u.ncols()
    }

    pub fn product(&self) -> Mat {
        &self.u * self.v.transpose()
    }

    pub fn frob_sq(&self) -> f64 {
        self.u.norm_squared() + self.v.norm_squared()
    }

    /// Balanced factors of `U V^T` from its SVD; `(||U||^2 + ||V||^2) / 2` then equals `||U V^T||_*`.
    pub fn rebalanced(&self) -> BmFactors {
        let z = self.product();
        let b = self.rank_budget();
        let svd = Svd::new(&z);
        let mut u = Mat::zeros(z.nrows(), b);
        let mut v = Mat::zeros(z.ncols(), b);
        for k in 0..b.min(svd.s.len()) {
            let root = svd.s[k].sqrt();
            u.set_column(k, &(svd.u.column(k) * root));
            v.set_column(k, &(svd.v.column(k) * root));
        }
        BmFactors { u, v }
    }

    /// Equalizes `||u_k|| = ||v_k||` per column pair; keeps any cone constraint on `U`.
    pub fn column_balanced(&self) -> BmFactors {
        let mut out = self.clone();
        for k in 0..self.rank_budget() {
            let (nu, nv) = (self.u.column(k).norm(), self.v.column(k).norm());
            if nu > 0.0 && nv > 0.0 {
                let a = (nv / nu).sqrt();
                out.u.column_mut(k).scale_mut(a);
                out.v.column_mut(k).scale_mut(1.0 / a);
            } else {
                out.u.column_mut(k).fill(0.0);
                out.v.column_mut(k).fill(0.0);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub passes: bool,
    pub spectral_norm: f64,
}

/// Global-optimality test `||sum_i grad||_2 <= beta` for a stationary BM point.
pub fn bm_certificate(gradient_sum: &Mat, beta: f64) -> Certificate {
    let spectral_norm = spectral_norm(gradient_sum);
    Certificate { passes: spectral_norm <= beta + 1e-9, spectral_norm }
}

/// Euclidean projection onto `{u : K u >= 0}`.
///
/// Exact when the row space of `K` has dimension <= 2 (the cone is a planar
/// sector there); otherwise Dykstra's alternating projections, capped at 50 cycles.
#[derive(Debug, Clone)]
pub struct ConeProjector {
    k: Mat,
    basis: Mat,
    /// Unit boundary rays of the planar cone, in basis coordinates.
    rays: Option<Vec<Vector>>,
}

impl ConeProjector {
    pub fn new(k: &Mat) -> Self {
        let basis = row_space_basis(k, 1e-10);
        let r = basis.ncols();
        let rays = (r <= 2).then(|| {
            let kb = k * &basis;
            let tol = 1e-12 * kb.amax().max(1.0);
            let feasible = |w: &Vector| (&kb * w).iter().all(|&x| x >= -tol);
            let mut cands: Vec<Vector> = Vec::new();
            if r == 1 {
                cands.push(Vector::from_element(1, 1.0));
                cands.push(Vector::from_element(1, -1.0));
            } else if r == 2 {
                for row in 0..kb.nrows() {
                    let (a, b) = (kb[(row, 0)], kb[(row, 1)]);
                    let n = a.hypot(b);
                    if n > 0.0 {
                        cands.push(Vector::from_vec(vec![-b / n, a / n]));
                        cands.push(Vector::from_vec(vec![b / n, -a / n]));
                    }
                }
            }
            cands.into_iter().filter(|w| feasible(w)).collect()
        });
        ConeProjector { k: k.clone(), basis, rays }
    }

    pub fn is_exact(&self) -> bool {
        self.rays.is_some()
    }

    /// Most negative entry of `K u`, as a non-negative violation.
    pub fn violation(&self, u: &Vector) -> f64 {
        (&self.k * u).iter().fold(0.0f64, |m, &x| m.max(-x))
    }

    pub fn project(&self, u: &Vector) -> Vector {
        if self.violation(u) <= 0.0 {
            return u.clone();
        }
        match &self.rays {
            Some(rays) => {
                let w = self.basis.transpose() * u;
                let perp = u - &self.basis * &w;
                let mut best = Vector::zeros(w.len());
                let mut best_dist = w.norm_squared();
                for e in rays {
                    let t = w.dot(e).max(0.0);
                    let cand = e * t;
                    let dist = (&w - &cand).norm_squared();
                    if dist < best_dist {
                        best_dist = dist;
                        best = cand;
                    }
                }
                perp + &self.basis * best
            }
            None => self.dykstra(u),
        }
    }

    fn dykstra(&self, u: &Vector) -> Vector {
        let rows = self.k.nrows();
        let norms: Vec<f64> = (0..rows).map(|i| self.k.row(i).norm_squared()).collect();
        let mut x = u.clone();
        let mut incr = vec![Vector::zeros(u.len()); rows];
        for _ in 0..50 {
            for i in 0..rows {
                if norms[i] == 0.0 {
                    continue;
                }
                let z = &x + &incr[i];
                let a = self.k.row(i).transpose();
                let dot = a.dot(&z);
                let next = if dot < 0.0 { &z - &a * (dot / norms[i]) } else { z.clone() };
                incr[i] = z - &next;
                x = next;
            }
            if self.violation(&x) <= 1e-12 {
                break;
            }
        }
        x
    }

    pub fn project_columns(&self, u: &Mat) -> Mat {
        let mut out = u.clone();
        for k in 0..u.ncols() {
            let col = self.project(&u.column(k).into_owned());
            out.set_column(k, &col);
        }
        out
    }

    pub fn max_violation(&self, u: &Mat) -> f64 {
        (0..u.ncols()).map(|k| self.violation(&u.column(k).into_owned())).fold(0.0, f64::max)
    }
}

/// `max { ||G^T u|| : K u >= 0, ||u|| <= 1 }`.
///
/// Exact when `G`'s columns lie in a row space of `K` of dimension <= 2;
/// otherwise the spectral norm of `G`, which upper-bounds it.
pub fn cone_dual_norm(g: &Mat, k: &Mat) -> f64 {
    let basis = row_space_basis(k, 1e-10);
    let r = basis.ncols();
    let outside = (g - &basis * (basis.transpose() * g)).norm();
    if r > 2 || outside > 1e-9 * g.norm().max(1e-300) {
        return spectral_norm(g);
    }
    if r == 0 {
        return 0.0;
    }
    let a = g.transpose() * &basis;
    let kb = k * &basis;
    let tol = 1e-12 * kb.amax().max(1.0);
    let feasible = |w: &Vector| (&kb * w).iter().all(|&x| x >= -tol);
    let mut cands: Vec<Vector> = Vec::new();
    if r == 1 {
        cands.push(Vector::from_element(1, 1.0));
        cands.push(Vector::from_element(1, -1.0));
    } else {
        let q = a.transpose() * &a;
        let phase = q[(0, 1)].atan2(0.5 * (q[(0, 0)] - q[(1, 1)]));
        for k in 0..4 {
            let th = 0.5 * phase + k as f64 * std::f64::consts::FRAC_PI_2;
            cands.push(Vector::from_vec(vec![th.cos(), th.sin()]));
        }
        for row in 0..kb.nrows() {
            let (x, y) = (kb[(row, 0)], kb[(row, 1)]);
            let n = x.hypot(y);
            if n > 0.0 {
                cands.push(Vector::from_vec(vec![-y / n, x / n]));
                cands.push(Vector::from_vec(vec![y / n, -x / n]));
            }
        }
    }
    cands.iter().filter(|w| feasible(w)).map(|w| (&a * w).norm()).fold(0.0, f64::max)
}

/// `(lower, upper)` bounds on `||Z||_{*,K}`; `upper` is `+inf` when no
/// cone-feasible factorization was found.
pub fn constrained_norm_bounds(z: &Mat, k: &Mat, restarts: usize, seed: u64) -> (f64, f64) {
    let lower = nuclear_norm(z);
    if z.amax() == 0.0 {
        return (0.0, 0.0);
    }
    let proj = ConeProjector::new(k);
    let scale = z.norm().max(1.0);
    let feasible_value = |u: &Mat| -> Option<f64> {
        if proj.max_violation(u) > 1e-10 * u.amax().max(1.0) {
            return None;
        }
        // minimum-norm right factor for this U
        let vt = crate::linalg::lstsq(u, z);
        let resid = (u * &vt - z).norm();
        (resid <= 1e-8 * scale).then(|| (0..u.ncols()).map(|j| u.column(j).norm() * vt.row(j).norm()).sum())
    };
    let mut upper = f64::INFINITY;
    let svd = Svd::new(z);
    let rank = svd.rank(1e-12);
    let mut signed = Mat::zeros(z.nrows(), rank);
    for j in 0..rank {
        let col = svd.u.column(j) * svd.s[j].sqrt();
        let flipped = -&col;
        let pick = if proj.violation(&col) <= proj.violation(&flipped) { col } else { flipped };
        signed.set_column(j, &pick);
    }
    if let Some(v) = feasible_value(&signed) {
        upper = upper.min(v);
    }
    let b = (z.nrows().min(z.ncols()) + 1).max(2 * rank);
    for r in 0..restarts.max(1) {
        let mut rng = seeded(seed.wrapping_mul(0x9e37_79b9).wrapping_add(r as u64));
        if let Some(v) = penalty_factor_search(z, &proj, b, &mut rng).and_then(|u| feasible_value(&u)) {
            upper = upper.min(v);
        }
    }
    (lower, upper.max(lower))
}

/// Projected gradient on `1/2(||U||^2 + ||V||^2) + rho/2 ||U V^T - Z||^2` with
/// increasing `rho`, U kept in the cone.
fn penalty_factor_search(z: &Mat, proj: &ConeProjector, b: usize, rng: &mut Rng) -> Option<Mat> {
    let scale = z.norm().sqrt();
    let mut u = proj.project_columns(&(gaussian_mat(rng, z.nrows(), b) * (scale / (b as f64).sqrt())));
    let mut v = gaussian_mat(rng, z.ncols(), b) * (scale / (b as f64).sqrt());
    let f = |u: &Mat, v: &Mat, rho: f64| 0.5 * (u.norm_squared() + v.norm_squared()) + 0.5 * rho * (u * v.transpose() - z).norm_squared();
    let mut step = 1e-2;
    for &rho in &[1.0, 10.0, 1e2, 1e3, 1e4, 1e5, 1e6] {
        for _ in 0..400 {
            let r = &u * v.transpose() - z;
            let gu = &u + &r * &v * rho;
            let gv = &v + r.transpose() * &u * rho;
            let f0 = f(&u, &v, rho);
            let mut accepted = false;
            for _ in 0..60 {
                let nu = proj.project_columns(&(&u - &gu * step));
                let nv = &v - &gv * step;
                let moved = (&nu - &u).norm_squared() + (&nv - &v).norm_squared();
                if f(&nu, &nv, rho) <= f0 - 1e-4 / step * moved {
                    u = nu;
                    v = nv;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            step *= 1.5;
        }
    }
    u.iter().all(|x| x.is_finite()).then_some(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallLabel {
    Extreme,
    Hull,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallSample {
    pub z: Mat,
    pub label: BallLabel,
    /// Left factor for extreme points.
    pub u: Option<Vector>,
}

fn random_feasible_unit(proj: &ConeProjector, dim: usize, rng: &mut Rng) -> Option<Vector> {
    for _ in 0..200 {
        let u = proj.project(&gaussian_vec(rng, dim));
        let n = u.norm();
        if n > 1e-8 {
            return Some(u / n);
        }
    }
    None
}

/// Samples of the unit ball of `||.||_{*,K}` in `rows x cols` matrices: rank-one
/// extreme points `u v^T` with `K u >= 0`, `||u|| = ||v|| = 1`, followed by convex
/// combinations of them. For 2 x 2 matrices the samples lie on the slice
/// `Z[1,0] = 0`.
pub fn sample_constrained_ball(k: &Mat, cols: usize, count: usize, seed: u64) -> Vec<BallSample> {
    let rows = k.ncols();
    let proj = ConeProjector::new(k);
    let mut rng = seeded(seed);
    let slice = rows == 2 && cols == 2;
    let n_extreme = count.div_ceil(2);
    let mut out: Vec<BallSample> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < n_extreme && attempts < 100 * count.max(1) {
        attempts += 1;
        let pair = if slice {
            // u2 v1 = 0: either u = (+-1, 0) or v = (0, +-1)
            if crate::rng::normal(&mut rng) >= 0.0 {
                let sign = if crate::rng::normal(&mut rng) >= 0.0 { 1.0 } else { -1.0 };
                let u = Vector::from_vec(vec![sign, 0.0]);
                if proj.violation(&u) > 1e-12 {
                    None
                } else {
                    let v = gaussian_vec(&mut rng, 2);
                    let n = v.norm();
                    Some((u, v / n))
                }
            } else {
                let sign = if crate::rng::normal(&mut rng) >= 0.0 { 1.0 } else { -1.0 };
                random_feasible_unit(&proj, 2, &mut rng).map(|u| (u, Vector::from_vec(vec![0.0, sign])))
            }
        } else {
            random_feasible_unit(&proj, rows, &mut rng).map(|u| {
                let v = gaussian_vec(&mut rng, cols);
                let n = v.norm();
                (u, v / n)
            })
        };
        if let Some((u, v)) = pair {
            out.push(BallSample { z: &u * v.transpose(), label: BallLabel::Extreme, u: Some(u) });
        }
    }
    let n_ext = out.len();
    if n_ext == 0 {
        return out;
    }
    while out.len() < count {
        let parts = 2 + (rand::Rng::random::<u32>(&mut rng) % 2) as usize;
        let mut weights: Vec<f64> = (0..parts).map(|_| -rand::Rng::random::<f64>(&mut rng).max(1e-300).ln()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mut z = Mat::zeros(rows, cols);
        for w in weights {
            let pick = (rand::Rng::random::<u64>(&mut rng) % n_ext as u64) as usize;
            z += &out[pick].z * w;
        }
        out.push(BallSample { z, label: BallLabel::Hull, u: None });
    }
    out
}
