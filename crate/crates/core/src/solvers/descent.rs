//! Limited-memory quasi-Newton descent and spectral projected gradient with
//! backtracking, shared by the Burer-Monteiro and non-convex solvers.

use std::collections::VecDeque;

use super::{SolverConfig, Status};
use crate::linalg::Mat;

const MEMORY: usize = 10;

pub(crate) fn dot(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

pub(crate) fn norm_sq(a: &[Mat]) -> f64 {
    a.iter().map(|x| x.norm_squared()).sum()
}

fn axpy(x: &[Mat], a: f64, d: &[Mat]) -> Vec<Mat> {
    x.iter().zip(d).map(|(xi, di)| xi + di * a).collect()
}

fn diff(a: &[Mat], b: &[Mat]) -> Vec<Mat> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Two-loop recursion: `-H g` for the inverse-Hessian model built from `pairs`.
fn direction(g: &[Mat], pairs: &VecDeque<(Vec<Mat>, Vec<Mat>, f64)>) -> Vec<Mat> {
    let mut q: Vec<Mat> = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q = axpy(&q, -a, y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / norm_sq(y);
        q.iter_mut().for_each(|m| *m *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q = axpy(&q, a - b, s);
    }
    q.iter_mut().for_each(|m| *m *= -1.0);
    q
}

pub(crate) struct Descent {
    pub x: Vec<Mat>,
    pub trace: Vec<f64>,
    pub iters: usize,
    pub status: Status,
}

/// Unconstrained minimization of `f`.
///
/// Directions come from an L-BFGS model (reset to the negative gradient when
/// they stop being descent directions); the step is halved until
/// `f(x + t d) <= f(x) + armijo t <g, d>`. Stops on the gradient norm, and
/// with `stop_on_stagnation` also when the objective moved by less than
/// `rel_tol` (relative) over 10 iterations.
pub(crate) fn lbfgs_descent(
    f: &dyn Fn(&[Mat]) -> (f64, Vec<Mat>),
    x: Vec<Mat>,
    cfg: &SolverConfig,
    stop_on_stagnation: bool,
) -> Descent {
    let mut x = x;
    let (mut fx, mut g) = f(&x);
    let mut trace = vec![fx];
    if !fx.is_finite() {
        return Descent { x, trace, iters: 0, status: Status::Diverged };
    }
    let mut pairs: VecDeque<(Vec<Mat>, Vec<Mat>, f64)> = VecDeque::new();
    let mut status = Status::MaxIters;
    let mut iters = 0;
    let mut gnorm = norm_sq(&g).sqrt();
    if gnorm <= cfg.abs_tol {
        return Descent { x, trace, iters: 0, status: Status::Converged };
    }
    while iters < cfg.max_iters {
        iters += 1;
        let mut accepted = None;
        for attempt in 0..2 {
            let quasi = attempt == 0 && !pairs.is_empty();
            let d = if quasi { direction(&g, &pairs) } else { g.iter().map(|m| -m).collect() };
            if dot(&d, &g) >= 0.0 {
                continue;
            }
            let mut t = if quasi { 1.0 } else { 1.0 / gnorm.max(1.0) };
            for _ in 0..60 {
                let xn = axpy(&x, t, &d);
                let step = diff(&xn, &x);
                let dec = dot(&g, &step);
                if dec < 0.0 {
                    let (fn_, gn) = f(&xn);
                    // Near the optimum objective differences drown in rounding; a
                    // step that keeps the objective level and shrinks the gradient is kept.
                    let flat = fn_.is_finite() && (fn_ - fx).abs() <= 1e-13 * fx.abs().max(1e-300);
                    if fn_.is_finite() && fn_ <= fx + cfg.armijo * dec {
                        accepted = Some((xn, step, fn_, gn));
                        break;
                    }
                    if flat
                        && norm_sq(&gn).sqrt() < gnorm {
                            accepted = Some((xn, step, fn_, gn));
                            break;
                        }
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            pairs.clear();
        }
        let Some((xn, s, fn_, gn)) = accepted else {
            status = Status::Stalled;
            break;
        };
        let y = diff(&gn, &g);
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm_sq(&s).sqrt() * norm_sq(&y).sqrt() {
            if pairs.len() == MEMORY {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
        gnorm = norm_sq(&g).sqrt();
        if gnorm <= cfg.abs_tol {
            status = Status::Converged;
            break;
        }
        if stop_on_stagnation && trace.len() > 10 {
            let old = trace[trace.len() - 11];
            if (old - fx).abs() <= cfg.rel_tol * fx.abs().max(1e-300) {
                status = Status::Converged;
                break;
            }
        }
    }
    Descent { x, trace, iters, status }
}

/// Spectral projected gradient: Barzilai-Borwein scaled projected-gradient
/// directions with a nonmonotone Armijo search against the worst of the last
/// 10 objective values.
pub(crate) fn spectral_projected(
    f: &dyn Fn(&[Mat]) -> (f64, Vec<Mat>),
    project: &dyn Fn(&mut [Mat]),
    mut x: Vec<Mat>,
    cfg: &SolverConfig,
    stop_on_stagnation: bool,
) -> Descent {
    project(&mut x);
    let (mut fx, mut g) = f(&x);
    let mut trace = vec![fx];
    if !fx.is_finite() {
        return Descent { x, trace, iters: 0, status: Status::Diverged };
    }
    let pgrad = |x: &[Mat], g: &[Mat]| {
        let mut probe = diff(x, g);
        project(&mut probe);
        norm_sq(&diff(&probe, x)).sqrt()
    };
    let mut gnorm = pgrad(&x, &g);
    if gnorm <= cfg.abs_tol {
        return Descent { x, trace, iters: 0, status: Status::Converged };
    }
    let mut lambda = 1.0 / gnorm.max(1.0);
    let mut status = Status::MaxIters;
    let mut iters = 0;
    while iters < cfg.max_iters {
        iters += 1;
        let mut target = axpy(&x, -lambda, &g);
        project(&mut target);
        let d = diff(&target, &x);
        let slope = dot(&g, &d);
        let reference = trace[trace.len().saturating_sub(10)..].iter().copied().fold(fx, f64::max);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = axpy(&x, t, &d);
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= reference + cfg.armijo * t * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            if fn_.is_finite() && (fn_ - fx).abs() <= 1e-13 * fx.abs().max(1e-300) && pgrad(&xn, &gn) < gnorm {
                accepted = Some((xn, fn_, gn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            status = Status::Stalled;
            break;
        };
        let s = diff(&xn, &x);
        let y = diff(&gn, &g);
        let sy = dot(&s, &y);
        lambda = if sy > 0.0 { (norm_sq(&s) / sy).clamp(1e-30, 1e30) } else { 1e30f64.min(lambda * 1e3) };
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
        gnorm = pgrad(&x, &g);
        if gnorm <= cfg.abs_tol {
            status = Status::Converged;
            break;
        }
        if stop_on_stagnation && trace.len() > 10 {
            let old = trace[trace.len() - 11];
            if (old - fx).abs() <= cfg.rel_tol * fx.abs().max(1e-300) {
                status = Status::Converged;
                break;
            }
        }
    }
    Descent { x, trace, iters, status }
}
