//! FISTA for nuclear-norm programs, Burer-Monteiro descent with an
//! optimality certificate, multi-restart descent on the non-convex heads, and
//! finite-difference gradient checks.

mod bm;
mod descent;
mod fista;
mod gradcheck;
mod nc;

pub use bm::{bm_certify, bm_solve};
pub use fista::fista_solve;
pub use gradcheck::{grad_check, grad_check_mats};
pub use nc::{nc_gradient, nc_init, nc_solve, NcLayout};

use serde::{Deserialize, Serialize};

use crate::data::{argmax, pool_rows};
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop when the objective changes by less than this (relative) over 10 iterations.
    pub rel_tol: f64,
    /// Stop when the (projected) gradient norm falls below this.
    pub abs_tol: f64,
    /// Relative slack on the duality-gap surrogate of a dense certificate.
    pub gap_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub restarts: usize,
    /// Burer-Monteiro rank or non-convex width; `None` picks a generous default.
    pub rank: Option<usize>,
    pub seed: u64,
    pub deterministic: bool,
    /// Multiplier on the `1/sqrt(fan_in)` initialization scale; 0 starts at the origin.
    pub init_scale: f64,
    pub threads: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 5000,
            rel_tol: 1e-12,
            abs_tol: 1e-10,
            gap_tol: 1e-6,
            armijo: 1e-4,
            restarts: 20,
            rank: None,
            seed: 0,
            deterministic: true,
            init_scale: 1.0,
            threads: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !(pos(self.rel_tol) && pos(self.abs_tol) && pos(self.gap_tol)) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::InvalidArgument("armijo must lie in (0,1)".into()));
        }
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument("restarts and max_iters must be >= 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidArgument("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIters,
    Stalled,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub passes: bool,
    /// Largest spectral (or cone dual) norm of the loss gradient over blocks.
    pub spectral_norm: f64,
    pub beta: f64,
    /// `beta ||Z||_* + <grad, Z>`, zero at an optimum.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub solver: String,
    pub head: String,
    pub activation: String,
    pub mode: String,
    pub seed: u64,
    pub status: Status,
    pub iterations: usize,
    pub restarts: usize,
    pub best_restart: usize,
    pub loss: f64,
    pub reg: f64,
    pub total: f64,
    pub certificate: Option<CertificateReport>,
    pub certified: bool,
    pub cone_violation: Option<f64>,
    pub metrics: Option<Metrics>,
    pub trace: Vec<f64>,
    pub wall_time: Option<f64>,
}

impl TrainReport {
    /// `Err(Divergence)` when the run hit a non-finite objective.
    pub fn check(&self) -> Result<()> {
        match self.status {
            Status::Diverged => Err(Error::Divergence { iter: self.iterations }),
            _ => Ok(()),
        }
    }
}

/// Top-1 / top-5 accuracy of token-pooled predictions against the argmax of pooled targets.
pub fn accuracy(preds: &[Mat], targets: &[Mat]) -> Metrics {
    let n = preds.len().max(1) as f64;
    let (mut top1, mut top5) = (0usize, 0usize);
    for (p, y) in preds.iter().zip(targets) {
        let scores = pool_rows(p);
        let label = argmax(&pool_rows(y));
        // Ties rank the lower class index first, as argmax does.
        let above = scores.iter().enumerate().filter(|&(j, &v)| v > scores[label] || (v == scores[label] && j < label)).count();
        if above == 0 {
            top1 += 1;
        }
        if above < 5 {
            top5 += 1;
        }
    }
    Metrics { top1: top1 as f64 / n, top5: top5 as f64 / n }
}

/// Runs `job(restart)` for every restart, on up to `threads` workers, and
/// returns the results in restart order.
pub(crate) fn run_restarts<T: Send>(restarts: usize, threads: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if threads <= 1 || restarts <= 1 {
        return (0..restarts).map(&job).collect();
    }
    let workers = threads.min(restarts);
    let mut slots: Vec<Option<T>> = (0..restarts).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let job = &job;
                scope.spawn(move || (w..restarts).step_by(workers).map(|r| (r, job(r))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (r, out) in h.join().expect("restart worker panicked") {
                slots[r] = Some(out);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("restart missing")).collect()
}

/// Index of the smallest total; ties go to the earlier restart. NaN totals lose.
pub(crate) fn best_index(totals: &[f64]) -> usize {
    let mut best = 0;
    for (i, &t) in totals.iter().enumerate() {
        let cur = totals[best];
        if (t < cur) || (cur.is_nan() && !t.is_nan()) {
            best = i;
        }
    }
    best
}

pub(crate) fn elapsed(start: std::time::Instant, deterministic: bool) -> Option<f64> {
    (!deterministic).then(|| start.elapsed().as_secs_f64())
}
