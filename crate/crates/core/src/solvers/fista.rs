use std::time::Instant;

use super::descent::{dot, norm_sq};
use super::{accuracy, elapsed, CertificateReport, SolverConfig, Status, TrainReport};
use crate::error::{Error, Result};
use crate::heads::{Activation, ConvexVars, Loss, Problem};
use crate::linalg::{spectral_norm, Mat};
use crate::norms::{nuclear_norm, svt_prox};

/// Accelerated proximal gradient on `loss(Z) + beta sum_j ||Z_j||_*` for
/// linear and gated heads. Backtracking on the quadratic upper model, momentum
/// reset whenever the objective would increase, so the trace is monotone.
pub fn fista_solve(problem: &Problem, cfg: &SolverConfig) -> Result<(ConvexVars, TrainReport)> {
    cfg.validate()?;
    if problem.spec.activation == Activation::Relu {
        return Err(Error::InvalidArgument(
            "relu programs carry cone constraints; use the Burer-Monteiro solver".into(),
        ));
    }
    let start = Instant::now();
    let beta = problem.spec.beta;
    let objective = |z: &[Mat]| problem.loss(z) + problem.reg_dense(z);
    let mut x = problem.zeros();
    let mut fx = objective(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut trace = vec![fx];
    let mut status = Status::MaxIters;
    let mut iters = 0;
    let mut flat = 0;
    let mut next_check = 0;
    while iters < cfg.max_iters {
        iters += 1;
        let (fy, gy) = problem.loss_and_grad(&y);
        if !fy.is_finite() {
            status = Status::Diverged;
            break;
        }
        let mut found = None;
        for _ in 0..200 {
            let xn: Vec<Mat> = y.iter().zip(&gy).map(|(yj, gj)| svt_prox(&(yj - gj / lip), beta / lip)).collect();
            let d: Vec<Mat> = xn.iter().zip(&y).map(|(a, b)| a - b).collect();
            let loss_n = problem.loss(&xn);
            let model = fy + dot(&gy, &d) + 0.5 * lip * norm_sq(&d);
            if loss_n.is_finite() && loss_n <= model + 1e-13 * fy.abs().max(1.0) {
                found = Some((xn, d, loss_n));
                break;
            }
            lip *= 2.0;
        }
        let Some((xn, d, loss_n)) = found else {
            status = Status::Stalled;
            break;
        };
        let fn_ = loss_n + problem.reg_dense(&xn);
        if !fn_.is_finite() {
            status = Status::Diverged;
            break;
        }
        let mapping = lip * norm_sq(&d).sqrt();
        if fn_ > fx {
            if t > 1.0 {
                // Momentum overshoot: restart from the current iterate.
                t = 1.0;
                y = x.clone();
                continue;
            }
            // A plain prox step that does not decrease: the objective is at float
            // resolution. Keep stepping on the gradient mapping for a while.
            if fn_ - fx > 1e-12 * fx.abs().max(1.0) {
                status = Status::Stalled;
                break;
            }
            flat += 1;
            if flat > FLAT_STEPS {
                status = Status::Converged;
                break;
            }
            x = xn;
            fx = fn_;
            y = x.clone();
            if mapping <= cfg.abs_tol {
                status = Status::Converged;
                break;
            }
            continue;
        }
        flat = 0;
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let w = (t - 1.0) / tn;
        y = xn.iter().zip(&x).map(|(a, b)| a + (a - b) * w).collect();
        x = xn;
        fx = fn_;
        t = tn;
        lip *= 0.9;
        trace.push(fx);
        if mapping <= cfg.abs_tol {
            status = Status::Converged;
            break;
        }
        if trace.len() > 10 {
            let old = trace[trace.len() - 11];
            if (old - fx).abs() <= cfg.rel_tol * fx.abs().max(1e-300) && iters >= next_check {
                // Small progress alone is not optimality; also ask the subgradient test.
                let (_, g) = problem.loss_and_grad(&x);
                if dense_certificate(&x, &g, beta).passes {
                    status = Status::Converged;
                    break;
                }
                next_check = iters + 10;
            }
        }
    }
    let vars = ConvexVars::Dense(x);
    let obj = problem.objective(&vars)?;
    let z = vars.to_dense();
    let (_, grads) = problem.loss_and_grad(&z);
    let certificate = dense_certificate(&z, &grads, beta);
    let certified = certificate.passes && certificate.gap.abs() <= cfg.gap_tol * obj.total.abs().max(1.0);
    let metrics = (problem.spec.loss == Loss::CrossEntropy || problem.batch.r == 1)
        .then(|| accuracy(&problem.predict(&z), &problem.targets));
    let report = TrainReport {
        solver: "fista".into(),
        head: problem.spec.kind_name(),
        activation: problem.spec.activation.name().into(),
        mode: "exact".into(),
        seed: cfg.seed,
        status,
        iterations: iters,
        restarts: 1,
        best_restart: 0,
        loss: obj.loss,
        reg: obj.reg,
        total: obj.total,
        certificate: Some(certificate),
        certified,
        cone_violation: None,
        metrics,
        trace,
        wall_time: elapsed(start, cfg.deterministic),
    };
    Ok((vars, report))
}

/// Subgradient test `||grad_j||_2 <= beta` plus the gap `beta ||Z||_* + <grad, Z>`.
const FLAT_STEPS: usize = 200;

pub(crate) fn dense_certificate(z: &[Mat], grads: &[Mat], beta: f64) -> CertificateReport {
    let spectral = grads.iter().map(spectral_norm).fold(0.0, f64::max);
    let gap: f64 = z.iter().zip(grads).map(|(zj, gj)| beta * nuclear_norm(zj) + zj.dot(gj)).sum();
    CertificateReport { passes: spectral <= beta + 1e-9, spectral_norm: spectral, beta, gap }
}
