use std::ops::AddAssign;
use std::time::Instant;

use super::descent::lbfgs_descent;
use super::{accuracy, best_index, elapsed, run_restarts, SolverConfig, Status, TrainReport};
use crate::arrangements::DataKind;
use crate::error::Result;
use crate::heads::{Activation, HeadKind, Loss, Problem};
use crate::linalg::{Mat, Vector};
use crate::nonconvex::{nc_forward, nc_objective, uv_to_neuron, NonconvexWeights};
use crate::rng::{gaussian_mat, substream};

/// Neuron bookkeeping for descent on the non-convex heads. Neurons sharing a
/// group (and gate) form one block; the block's variables are `U` (`p x w`) and
/// `V` (`q x w`) in the lifted coordinates of the group, one column per neuron.
#[derive(Debug, Clone)]
pub struct NcLayout {
    /// Engine whose groups evaluate the head (plain attention for block-diagonal specs).
    pub engine: Problem,
    /// `(group, gate index within group, slot holding the gate mask, width)`.
    pub blocks: Vec<(usize, Option<usize>, Option<usize>, usize)>,
    gates: Vec<Vec<Vector>>,
}

impl NcLayout {
    pub fn new(problem: &Problem, width: Option<usize>) -> Result<NcLayout> {
        let spec = problem.spec.clone();
        let engine = match (spec.kind.clone(), spec.activation) {
            (HeadKind::SaBlockdiag, _) => {
                let mut sa = spec.clone();
                sa.kind = HeadKind::SelfAttention;
                Problem::new(sa, &problem.batch)?
            }
            (_, Activation::GatedRelu) => problem.clone(),
            _ => {
                let mut lin = spec.clone();
                lin.activation = Activation::Linear;
                let mut p = Problem::new(lin, &problem.batch)?;
                p.spec = spec.clone();
                p
            }
        };
        let mut blocks = Vec::new();
        match spec.activation {
            Activation::Linear => {
                for (g, group) in engine.groups.iter().enumerate() {
                    let (p, q) = group.var_shape();
                    blocks.push((g, None, None, width.unwrap_or(p.min(q) + 1)));
                }
            }
            Activation::Relu => {
                for g in 0..engine.groups.len() {
                    blocks.push((g, None, None, width.unwrap_or(spec.m)));
                }
            }
            Activation::GatedRelu => {
                let mut seen = vec![0usize; engine.groups.len()];
                for (j, slot) in engine.slots.iter().enumerate() {
                    let (p, q) = engine.groups[slot.group].var_shape();
                    let local = seen[slot.group];
                    seen[slot.group] += 1;
                    blocks.push((slot.group, Some(local), Some(j), width.unwrap_or(p.min(q))));
                }
            }
        }
        let gates = engine.arrangements.iter().map(|a| a.gates.clone().unwrap_or_default()).collect();
        Ok(NcLayout { engine, blocks, gates })
    }

    /// Row mask of every neuron, block by block.
    fn masks(&self, x: &[Mat]) -> Vec<Vec<Option<Vec<bool>>>> {
        self.blocks
            .iter()
            .zip(x.chunks(2))
            .map(|(&(g, _, slot, w), uv)| match (self.engine.spec.activation, slot) {
                (Activation::Relu, _) => {
                    let h = &self.engine.groups[g].data.matrix * &uv[0];
                    h.column_iter().map(|col| Some(col.iter().map(|&v| v >= 0.0).collect())).collect()
                }
                (_, Some(j)) => vec![self.engine.slots[j].mask.clone(); w],
                _ => vec![None; w],
            })
            .collect()
    }

    pub fn weights(&self, x: &[Mat]) -> NonconvexWeights {
        let mut neurons = Vec::new();
        for (&(g, gate, _, _), uv) in self.blocks.iter().zip(x.chunks(2)) {
            for (u, v) in uv[0].column_iter().zip(uv[1].column_iter()) {
                neurons.push(uv_to_neuron(&self.engine, g, gate, &u.into_owned(), &v.into_owned()));
            }
        }
        NonconvexWeights { neurons, gates: self.gates.clone() }
    }
}

/// Objective and gradient in lifted neuron coordinates: with `A` the adjoint of
/// the loss gradient through the neuron's (fixed) row mask,
/// `d/du = A v + beta u` and `d/dv = A^T u + beta v`.
pub fn nc_gradient(layout: &NcLayout, x: &[Mat]) -> (f64, Vec<Mat>) {
    let engine = &layout.engine;
    let beta = engine.spec.beta;
    let masks = layout.masks(x);
    let mut preds = vec![Mat::zeros(engine.s, engine.c); engine.n];
    let reg: f64 = x.iter().map(|m| m.norm_squared()).sum();
    for ((&(g, _, _, _), uv), mask) in layout.blocks.iter().zip(x.chunks(2)).zip(&masks) {
        for (k, m) in mask.iter().enumerate() {
            let (u, v) = (uv[0].column(k).into_owned(), uv[1].column(k).into_owned());
            engine.group_forward_rank1(g, m.as_deref(), &u, &v, &mut preds);
        }
    }
    let (loss, resid) = engine.loss_and_residuals(&preds);
    let mut grad = Vec::with_capacity(x.len());
    for ((&(g, _, _, _), uv), mask) in layout.blocks.iter().zip(x.chunks(2)).zip(&masks) {
        let mut du = &uv[0] * beta;
        let mut dv = &uv[1] * beta;
        for (k, m) in mask.iter().enumerate() {
            let (u, v) = (uv[0].column(k).into_owned(), uv[1].column(k).into_owned());
            let (av, atu) = engine.group_adjoint_rank1(g, m.as_deref(), &resid, &u, &v);
            du.column_mut(k).add_assign(&av);
            dv.column_mut(k).add_assign(&atu);
        }
        grad.push(du);
        grad.push(dv);
    }
    (loss + 0.5 * beta * reg, grad)
}

fn fan_in(kind: DataKind, s: usize, d: usize, p: usize) -> (f64, f64) {
    match kind {
        DataKind::SelfAttention => (d as f64, d as f64),
        DataKind::Mixer => (s as f64, d as f64),
        _ => (p as f64, 1.0),
    }
}

/// Gaussian start with standard deviation `init_scale / sqrt(fan_in)` per layer.
pub fn nc_init(layout: &NcLayout, cfg: &SolverConfig, restart: usize) -> Vec<Mat> {
    let mut rng = substream(cfg.seed ^ 0x6e63, restart as u64);
    let e = &layout.engine;
    let mut x = Vec::with_capacity(2 * layout.blocks.len());
    for &(g, _, _, w) in &layout.blocks {
        let (p, q) = e.groups[g].var_shape();
        let (f1, f2) = fan_in(e.groups[g].data.kind, e.s, e.d, p);
        x.push(gaussian_mat(&mut rng, p, w) * (cfg.init_scale / f1.max(1.0).sqrt()));
        x.push(gaussian_mat(&mut rng, q, w) * (cfg.init_scale / f2.max(1.0).sqrt()));
    }
    x
}

/// Multi-restart full-batch descent on the non-convex head. Totals are
/// re-evaluated with the architecture-level forward.
pub fn nc_solve(problem: &Problem, cfg: &SolverConfig) -> Result<(NonconvexWeights, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let layout = NcLayout::new(problem, cfg.rank)?;
    let spec = &problem.spec;
    let batch = &problem.batch;
    let objective = |x: &[Mat]| nc_gradient(&layout, x);
    let runs = run_restarts(cfg.restarts, cfg.threads, |r| {
        let out = lbfgs_descent(&objective, nc_init(&layout, cfg, r), cfg, true);
        let weights = layout.weights(&out.x);
        let total = nc_objective(spec, &weights, batch).unwrap_or(f64::NAN);
        (weights, total, out)
    });
    let best = best_index(&runs.iter().map(|r| r.1).collect::<Vec<_>>());
    let (weights, total, out) = runs.into_iter().nth(best).expect("at least one restart");
    let preds = nc_forward(spec, &weights, batch)?;
    let loss: f64 = preds
        .iter()
        .zip(&batch.ys)
        .map(|(p, y)| crate::heads::loss_value_and_grad(spec.loss, p, y).0)
        .sum();
    let metrics = (spec.loss == Loss::CrossEntropy || batch.r == 1).then(|| accuracy(&preds, &batch.ys));
    let status = if total.is_finite() { out.status } else { Status::Diverged };
    let report = TrainReport {
        solver: "nc".into(),
        head: spec.kind_name(),
        activation: spec.activation.name().into(),
        mode: "nonconvex".into(),
        seed: cfg.seed,
        status,
        iterations: out.iters,
        restarts: cfg.restarts,
        best_restart: best,
        loss,
        reg: total - loss,
        total,
        certificate: None,
        certified: false,
        cone_violation: None,
        metrics,
        trace: out.trace,
        wall_time: elapsed(start, cfg.deterministic),
    };
    Ok((weights, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingBatch;
    use crate::heads::HeadSpec;
    use crate::rng::seeded;

    #[test]
    fn engine_objective_matches_architecture_forward() {
        let mut rng = seeded(5);
        let xs = (0..2).map(|_| gaussian_mat(&mut rng, 2, 2)).collect();
        let ys = (0..2).map(|_| gaussian_mat(&mut rng, 2, 2)).collect();
        let batch = EmbeddingBatch::new(xs, ys).unwrap();
        for kind in [HeadKind::SelfAttention, HeadKind::Mixer, HeadKind::Fno, HeadKind::Mlp] {
            for act in [Activation::Linear, Activation::Relu] {
                let spec = HeadSpec::new(kind.clone(), act, 0.3).with_m(3);
                let problem = if act == Activation::Linear {
                    Problem::new(spec.clone(), &batch).unwrap()
                } else {
                    Problem::with_mode(spec.clone(), &batch, crate::arrangements::ArrangementMode::Sampled, 50, 1).unwrap()
                };
                let layout = NcLayout::new(&problem, None).unwrap();
                let x = nc_init(&layout, &SolverConfig::default(), 0);
                let (f, _) = nc_gradient(&layout, &x);
                let direct = nc_objective(&spec, &layout.weights(&x), &batch).unwrap();
                assert!((f - direct).abs() <= 1e-10 * direct.abs().max(1.0), "{kind:?} {act:?}");
            }
        }
    }

    #[test]
    fn realizable_target_is_fit() {
        let mut rng = seeded(8);
        let xs: Vec<Mat> = (0..3).map(|_| gaussian_mat(&mut rng, 2, 2)).collect();
        let w1 = gaussian_mat(&mut rng, 2, 2);
        let w2 = gaussian_mat(&mut rng, 2, 1);
        let ys = xs.iter().map(|x| x * &w1 * x.transpose() * x * &w2).collect();
        let batch = EmbeddingBatch::new(xs, ys).unwrap();
        let problem = Problem::new(HeadSpec::new(HeadKind::SelfAttention, Activation::Linear, 0.0), &batch).unwrap();
        let cfg = SolverConfig { restarts: 5, max_iters: 20000, abs_tol: 1e-12, rel_tol: 1e-16, ..SolverConfig::default() };
        let (_, rep) = nc_solve(&problem, &cfg).unwrap();
        assert!(rep.loss < 1e-6, "{}", rep.loss);
    }
}
