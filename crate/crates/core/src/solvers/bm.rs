use std::time::Instant;

use super::descent::{lbfgs_descent, spectral_projected};
use super::{accuracy, best_index, elapsed, run_restarts, CertificateReport, SolverConfig, Status, TrainReport};
use crate::arrangements::cone_constraint;
use crate::error::{Error, Result};
use crate::heads::{Activation, ConvexVars, Loss, Problem};
use crate::linalg::{spectral_norm, Mat};
use crate::norms::{cone_dual_norm, BmFactors, ConeProjector};
use crate::rng::{gaussian_mat, substream};

fn slot_constraints(problem: &Problem) -> Vec<Option<Mat>> {
    problem
        .slots
        .iter()
        .map(|slot| match (&slot.mask, problem.spec.activation) {
            (Some(mask), Activation::Relu) => Some(cone_constraint(&problem.groups[slot.group].data.matrix, mask)),
            _ => None,
        })
        .collect()
}

fn rank_for(problem: &Problem, cfg: &SolverConfig, slot: usize) -> usize {
    let (p, q) = problem.slot_shape(slot);
    cfg.rank.or(problem.bm_rank()).unwrap_or(p.min(q) + 1)
}

fn unpack(x: &[Mat]) -> Vec<BmFactors> {
    x.chunks(2).map(|uv| BmFactors { u: uv[0].clone(), v: uv[1].clone() }).collect()
}

/// Loss gradient at `U V^T` and the certificate: spectral norm for plain
/// nuclear-norm blocks, the cone dual norm for ReLU blocks.
pub fn bm_certify(problem: &Problem, factors: &[BmFactors]) -> Result<CertificateReport> {
    let z: Vec<Mat> = factors.iter().map(BmFactors::product).collect();
    problem.check_vars(&z)?;
    let (_, grads) = problem.loss_and_grad(&z);
    let beta = problem.spec.beta;
    let cones = slot_constraints(problem);
    let mut worst: f64 = 0.0;
    let mut gap = 0.0;
    for ((g, f), k) in grads.iter().zip(factors).zip(&cones) {
        let norm = match k {
            Some(k) => cone_dual_norm(g, k),
            None => spectral_norm(g),
        };
        worst = worst.max(norm);
        gap += 0.5 * beta * f.frob_sq() + f.product().dot(g);
    }
    Ok(CertificateReport { passes: worst <= beta + 1e-9, spectral_norm: worst, beta, gap })
}

struct Run {
    factors: Vec<BmFactors>,
    total: f64,
    trace: Vec<f64>,
    iters: usize,
    status: Status,
}

/// Burer-Monteiro descent on `loss(U V^T) + beta/2 (||U||^2 + ||V||^2)` per
/// slot, with ReLU left factors projected onto `{u : K_j u >= 0}` after every
/// step. Each restart is rebalanced afterwards; the best total wins.
pub fn bm_solve(problem: &Problem, cfg: &SolverConfig) -> Result<(Vec<BmFactors>, TrainReport)> {
    cfg.validate()?;
    if let Some(0) = cfg.rank.or(problem.bm_rank()) {
        return Err(Error::InvalidArgument("Burer-Monteiro rank must be >= 1".into()));
    }
    let start = Instant::now();
    let beta = problem.spec.beta;
    let relu = problem.spec.activation == Activation::Relu;
    let cones = slot_constraints(problem);
    let projectors: Vec<Option<ConeProjector>> = cones.iter().map(|k| k.as_ref().map(ConeProjector::new)).collect();

    let objective = |x: &[Mat]| -> (f64, Vec<Mat>) {
        let z: Vec<Mat> = x.chunks(2).map(|uv| &uv[0] * uv[1].transpose()).collect();
        let (loss, g) = problem.loss_and_grad(&z);
        let mut grad = Vec::with_capacity(x.len());
        let mut reg = 0.0;
        for (uv, gj) in x.chunks(2).zip(&g) {
            reg += uv[0].norm_squared() + uv[1].norm_squared();
            grad.push(gj * &uv[1] + &uv[0] * beta);
            grad.push(gj.transpose() * &uv[0] + &uv[1] * beta);
        }
        (loss + 0.5 * beta * reg, grad)
    };
    let project = |x: &mut [Mat]| {
        for (j, p) in projectors.iter().enumerate() {
            if let Some(p) = p {
                x[2 * j] = p.project_columns(&x[2 * j]);
            }
        }
    };
    let restart = |r: usize| -> Run {
        let mut rng = substream(cfg.seed, r as u64);
        let mut x0 = Vec::with_capacity(2 * problem.slots.len());
        for j in 0..problem.slots.len() {
            let (p, q) = problem.slot_shape(j);
            let b = rank_for(problem, cfg, j);
            x0.push(gaussian_mat(&mut rng, p, b) * (cfg.init_scale / (p.max(1) as f64).sqrt()));
            x0.push(gaussian_mat(&mut rng, q, b) * (cfg.init_scale / (b as f64).sqrt()));
        }
        let out = if relu {
            spectral_projected(&objective, &project, x0, cfg, false)
        } else {
            lbfgs_descent(&objective, x0, cfg, false)
        };
        let raw = unpack(&out.x);
        let balanced: Vec<BmFactors> = raw.iter().map(|f| if relu { f.column_balanced() } else { f.rebalanced() }).collect();
        let total_of = |fs: &[BmFactors]| {
            problem.objective(&ConvexVars::Factored(fs.to_vec())).map(|o| o.total).unwrap_or(f64::NAN)
        };
        let (tr, tb) = (total_of(&raw), total_of(&balanced));
        let (factors, total) = if tb <= tr { (balanced, tb) } else { (raw, tr) };
        Run { factors, total, trace: out.trace, iters: out.iters, status: out.status }
    };
    let runs = run_restarts(cfg.restarts, cfg.threads, restart);
    let best = best_index(&runs.iter().map(|r| r.total).collect::<Vec<_>>());
    let run = runs.into_iter().nth(best).expect("at least one restart");

    let vars = ConvexVars::Factored(run.factors.clone());
    let obj = problem.objective(&vars)?;
    let certificate = bm_certify(problem, &run.factors)?;
    let certified = certificate.passes && certificate.gap.abs() <= cfg.gap_tol * obj.total.abs().max(1.0);
    let cone_violation = relu.then(|| {
        projectors
            .iter()
            .zip(&run.factors)
            .filter_map(|(p, f)| p.as_ref().map(|p| p.max_violation(&f.u)))
            .fold(0.0, f64::max)
    });
    let z = vars.to_dense();
    let metrics = (problem.spec.loss == Loss::CrossEntropy || problem.batch.r == 1)
        .then(|| accuracy(&problem.predict(&z), &problem.targets));
    let report = TrainReport {
        solver: "bm".into(),
        head: problem.spec.kind_name(),
        activation: problem.spec.activation.name().into(),
        mode: if problem.is_restricted() { "restricted" } else { "exact" }.into(),
        seed: cfg.seed,
        status: run.status,
        iterations: run.iters,
        restarts: cfg.restarts,
        best_restart: best,
        loss: obj.loss,
        reg: obj.reg,
        total: obj.total,
        certificate: Some(certificate),
        certified,
        cone_violation,
        metrics,
        trace: run.trace,
        wall_time: elapsed(start, cfg.deterministic),
    };
    Ok((run.factors, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingBatch;
    use crate::heads::{HeadKind, HeadSpec};
    use crate::rng::seeded;
    use crate::solvers::fista_solve;

    fn tight() -> SolverConfig {
        SolverConfig { max_iters: 20000, rel_tol: 1e-15, abs_tol: 1e-11, restarts: 3, ..SolverConfig::default() }
    }

    #[test]
    fn agrees_with_fista_on_linear_attention() {
        let mut rng = seeded(11);
        let xs = (0..2).map(|_| gaussian_mat(&mut rng, 2, 2)).collect();
        let ys = (0..2).map(|_| gaussian_mat(&mut rng, 2, 1)).collect();
        let batch = EmbeddingBatch::new(xs, ys).unwrap();
        let problem = Problem::new(HeadSpec::new(HeadKind::SelfAttention, Activation::Linear, 0.1), &batch).unwrap();
        let (_, f) = fista_solve(&problem, &tight()).unwrap();
        let (_, b) = bm_solve(&problem, &tight()).unwrap();
        assert!(b.certified, "{:?} {:?} {} {}", b.certificate, b.status, b.iterations, f.total - b.total);
        assert!((f.total - b.total).abs() <= 1e-5 * f.total);
    }

    #[test]
    fn zero_start_with_large_beta_stays_put() {
        let batch = EmbeddingBatch::new(vec![Mat::from_element(1, 1, 1.0)], vec![Mat::from_element(1, 1, 1.0)]).unwrap();
        let problem = Problem::new(HeadSpec::new(HeadKind::Mlp, Activation::Linear, 10.0), &batch).unwrap();
        let cfg = SolverConfig { init_scale: 0.0, restarts: 1, ..tight() };
        let (f, rep) = bm_solve(&problem, &cfg).unwrap();
        assert_eq!(f[0].product().amax(), 0.0);
        assert!(rep.certificate.unwrap().passes);
    }
}
