//! Non-convex reference heads and the weight mappings to and from their
//! convex programs.
//!
//! Shapes per neuron: attention `W1: d x d`, `W2: d x c` acting as
//! `act(X W1 X^T) X W2`; mixer `W1: s x s`, `W2: d x c` acting as
//! `act(W1 X) W2`; FNO / B-FNO / MLP / fixed-mixing heads use vectors
//! `w1` (column) and `w2` (column, output width) acting as `act(E w1) w2^T`.

use crate::arrangements::{cone_constraint, pattern, DataKind};
use crate::data::EmbeddingBatch;
use crate::error::{shape, Error, Result};
use crate::heads::{loss_value_and_grad, Activation, ConvexVars, HeadKind, HeadSpec, Problem};
use crate::linalg::{circ_grid, unvec, vec, Mat, Svd, Vector};
use crate::norms::{BmFactors, ConeProjector};

#[derive(Debug, Clone, PartialEq)]
pub struct Neuron {
    /// Group (B-FNO feature block); 0 for single-group heads.
    pub group: usize,
    /// Gate index into the group's gate list for gated heads.
    pub gate: Option<usize>,
    pub w1: Mat,
    pub w2: Mat,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NonconvexWeights {
    pub neurons: Vec<Neuron>,
    /// Fixed gates per group (gated heads only), in effective-data coordinates.
    pub gates: Vec<Vec<Vector>>,
}

impl NonconvexWeights {
    pub fn frob_sq(&self) -> f64 {
        self.neurons.iter().map(|n| n.w1.norm_squared() + n.w2.norm_squared()).sum()
    }
}

fn act(a: Activation, pre: Mat, gate_pre: Option<Mat>) -> Mat {
    match a {
        Activation::Linear => pre,
        Activation::Relu => pre.map(|v| v.max(0.0)),
        Activation::GatedRelu => {
            let g = gate_pre.expect("gated neuron without gate");
            pre.zip_map(&g, |v, h| if h >= 0.0 { v } else { 0.0 })
        }
    }
}

/// Architecture-level input for a neuron in group `g`: the matrix its first
/// layer multiplies, in the form each head is written in.
fn first_layer(spec: &HeadSpec, x: &Mat, g: usize) -> Mat {
    let grid = spec.grid_for(x.nrows());
    match &spec.kind {
        HeadKind::Fno => circ_grid(x, grid),
        HeadKind::Bfno => {
            let w = x.ncols() / spec.blocks;
            circ_grid(&x.columns(g * w, w).into_owned(), grid)
        }
        HeadKind::Generic(h) => h.apply(x),
        _ => x.clone(),
    }
}

/// Pre-activation of one neuron on sample `x` with first-layer weights `w1`.
fn pre_activation(spec: &HeadSpec, x: &Mat, g: usize, w1: &Mat) -> Mat {
    match spec.kind {
        HeadKind::SelfAttention | HeadKind::SaBlockdiag => x * w1 * x.transpose(),
        HeadKind::Mixer => w1 * x,
        _ => first_layer(spec, x, g) * w1,
    }
}

fn gate_matrix(spec: &HeadSpec, batch: &EmbeddingBatch, h: &Vector) -> Mat {
    match spec.kind {
        HeadKind::SelfAttention | HeadKind::SaBlockdiag => unvec(h.as_slice(), batch.d, batch.d),
        HeadKind::Mixer => unvec(h.as_slice(), batch.s, batch.s),
        _ => Mat::from_column_slice(h.len(), 1, h.as_slice()),
    }
}

/// Forward pass of the non-convex head, written per architecture.
pub fn nc_forward(spec: &HeadSpec, weights: &NonconvexWeights, batch: &EmbeddingBatch) -> Result<Vec<Mat>> {
    let (s, d, c) = (batch.s, batch.d, batch.c);
    let blocks = if spec.kind == HeadKind::Bfno { spec.blocks.max(1) } else { 1 };
    let cw = c / blocks;
    for n in &weights.neurons {
        let want = match spec.kind {
            HeadKind::SelfAttention | HeadKind::SaBlockdiag => ((d, d), (d, c)),
            HeadKind::Mixer => ((s, s), (d, c)),
            HeadKind::Fno => ((s * d, 1), (c, 1)),
            HeadKind::Bfno => ((s * d / blocks, 1), (cw, 1)),
            HeadKind::Mlp | HeadKind::Generic(_) => ((d, 1), (c, 1)),
        };
        if (n.w1.shape(), n.w2.shape()) != want || n.group >= blocks {
            return Err(shape(format!("neuron shapes {:?}/{:?}, expected {:?}", n.w1.shape(), n.w2.shape(), want)));
        }
        if spec.activation == Activation::GatedRelu
            && n.gate.and_then(|j| weights.gates.get(n.group).and_then(|g| g.get(j))).is_none()
        {
            return Err(Error::InvalidArgument("gated neuron without a valid gate".into()));
        }
    }
    Ok(batch
        .xs
        .iter()
        .map(|x| {
            let mut y = Mat::zeros(s, c);
            for n in &weights.neurons {
                let pre = pre_activation(spec, x, n.group, &n.w1);
                let gate_pre = n.gate.filter(|_| spec.activation == Activation::GatedRelu).map(|j| {
                    pre_activation(spec, x, n.group, &gate_matrix(spec, batch, &weights.gates[n.group][j]))
                });
                let a = act(spec.activation, pre, gate_pre);
                match spec.kind {
                    HeadKind::SelfAttention | HeadKind::SaBlockdiag => y += a * x * &n.w2,
                    HeadKind::Mixer => y += a * &n.w2,
                    _ => {
                        let mut out = y.columns_mut(n.group * cw, cw);
                        out += a * n.w2.transpose();
                    }
                }
            }
            y
        })
        .collect())
}

pub fn nc_objective(spec: &HeadSpec, weights: &NonconvexWeights, batch: &EmbeddingBatch) -> Result<f64> {
    let preds = nc_forward(spec, weights, batch)?;
    let loss: f64 = preds.iter().zip(&batch.ys).map(|(p, y)| loss_value_and_grad(spec.loss, p, y).0).sum();
    Ok(loss + 0.5 * spec.beta * weights.frob_sq())
}

/// `(u, v)` of a neuron in the lifted coordinates of its group.
pub fn neuron_to_uv(problem: &Problem, n: &Neuron) -> (Vector, Vector) {
    let group = &problem.groups[n.group.min(problem.groups.len() - 1)];
    match &group.features {
        Some(part) => (vec(&n.w1.select_columns(part)), vec(&n.w2.select_rows(part).transpose())),
        None => match group.data.kind {
            DataKind::SelfAttention | DataKind::Mixer => (vec(&n.w1), vec(&n.w2.transpose())),
            _ => (vec(&n.w1), vec(&n.w2)),
        },
    }
}

/// Inverse of [`neuron_to_uv`].
pub fn uv_to_neuron(problem: &Problem, group: usize, gate: Option<usize>, u: &Vector, v: &Vector) -> Neuron {
    let (s, d, c) = (problem.s, problem.d, problem.c);
    let g = &problem.groups[group];
    let (w1, w2) = match &g.features {
        Some(part) => {
            let mut w1 = Mat::zeros(d, d);
            let mut w2 = Mat::zeros(d, c);
            let a = unvec(u.as_slice(), d, part.len());
            let b = unvec(v.as_slice(), c, part.len()).transpose();
            for (kk, &k) in part.iter().enumerate() {
                w1.set_column(k, &a.column(kk));
                w2.set_row(k, &b.row(kk));
            }
            (w1, w2)
        }
        None => match g.data.kind {
            DataKind::SelfAttention => (unvec(u.as_slice(), d, d), unvec(v.as_slice(), c, d).transpose()),
            DataKind::Mixer => (unvec(u.as_slice(), s, s), unvec(v.as_slice(), c, d).transpose()),
            _ => (Mat::from_column_slice(u.len(), 1, u.as_slice()), Mat::from_column_slice(v.len(), 1, v.as_slice())),
        },
    };
    Neuron { group: if g.features.is_some() { 0 } else { group }, gate, w1, w2 }
}

fn gate_lists(problem: &Problem) -> Vec<Vec<Vector>> {
    problem.arrangements.iter().map(|a| a.gates.clone().unwrap_or_default()).collect()
}

/// Factor every convex block into neurons: `sqrt(sigma) u`, `sqrt(sigma) v` from
/// an SVD (dense) or the columns of the Burer-Monteiro factors. ReLU blocks
/// need cone-feasible left factors; otherwise the maximal violation is reported.
pub fn map_convex_to_nonconvex(problem: &Problem, vars: &ConvexVars) -> Result<NonconvexWeights> {
    problem.check_vars(&vars.to_dense())?;
    let relu = problem.spec.activation == Activation::Relu;
    let mut neurons = Vec::new();
    for (j, slot) in problem.slots.iter().enumerate() {
        let gate = (problem.spec.activation == Activation::GatedRelu).then(|| {
            problem.slots[..j].iter().filter(|s| s.group == slot.group).count()
        });
        let pairs: Vec<(Vector, Vector)> = match vars {
            ConvexVars::Dense(z) => {
                let svd = Svd::new(&z[j]);
                let top = svd.s.first().copied().unwrap_or(0.0);
                (0..svd.s.len())
                    .filter(|&k| svd.s[k] > 1e-14 * top.max(1e-300) && svd.s[k] > 0.0)
                    .map(|k| {
                        let r = svd.s[k].sqrt();
                        (svd.u.column(k) * r, svd.v.column(k) * r)
                    })
                    .collect()
            }
            ConvexVars::Factored(f) => (0..f[j].rank_budget())
                .map(|k| (f[j].u.column(k).into_owned(), f[j].v.column(k).into_owned()))
                .filter(|(u, v)| u.norm() > 0.0 || v.norm() > 0.0)
                .collect(),
        };
        let proj = match (&slot.mask, relu) {
            (Some(mask), true) => Some(ConeProjector::new(&cone_constraint(&problem.groups[slot.group].data.matrix, mask))),
            _ => None,
        };
        for (u, v) in pairs {
            let (u, v) = match &proj {
                Some(p) => {
                    let tol = 1e-10 * u.norm().max(1.0);
                    let (vp, vn) = (p.violation(&u), p.violation(&-&u));
                    if vp <= tol {
                        (u, v)
                    } else if vn <= tol && matches!(vars, ConvexVars::Dense(_)) {
                        (-u, -v)
                    } else {
                        return Err(Error::ConeViolation(vp.min(vn)));
                    }
                }
                None => (u, v),
            };
            neurons.push(uv_to_neuron(problem, slot.group, gate, &u, &v));
        }
    }
    let out = NonconvexWeights { neurons, gates: gate_lists(problem) };
    #[cfg(debug_assertions)]
    {
        let convex = problem.objective(vars)?.total;
        let mapped = nc_objective(&problem.spec, &out, &problem.batch)?;
        debug_assert!(
            (convex - mapped).abs() <= 1e-9 * convex.abs().max(mapped.abs()).max(1e-12),
            "mapped objective {mapped} differs from convex objective {convex}"
        );
    }
    Ok(out)
}

fn pattern_string(p: &[bool]) -> String {
    p.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// `Z = sum_j u_j v_j^T`, grouped by slot. ReLU neurons go to the arrangement
/// their own activation pattern realizes on the training data and come back
/// as factor columns.
pub fn map_nonconvex_to_convex(problem: &Problem, weights: &NonconvexWeights) -> Result<ConvexVars> {
    let mut z = problem.zeros();
    if problem.spec.kind == HeadKind::SaBlockdiag {
        let d = problem.d;
        let c = problem.c;
        let mut full = Mat::zeros(d * d, d * c);
        for n in &weights.neurons {
            full += vec(&n.w1) * vec(&n.w2.transpose()).transpose();
        }
        for (j, g) in problem.groups.iter().enumerate() {
            let part = g.features.as_ref().expect("block-diagonal group");
            for (kk, &k) in part.iter().enumerate() {
                for (ll, &l) in part.iter().enumerate() {
                    let blk = full.view((k * d, l * c), (d, c)).into_owned();
                    z[j].view_mut((kk * d, ll * c), (d, c)).copy_from(&blk);
                }
            }
        }
        return Ok(ConvexVars::Dense(z));
    }
    let mut cols: Vec<Vec<(Vector, Vector)>> = vec![Vec::new(); problem.slots.len()];
    for n in &weights.neurons {
        if n.group >= problem.groups.len() {
            return Err(shape(format!("neuron group {} out of range", n.group)));
        }
        let (u, v) = neuron_to_uv(problem, n);
        let slots: Vec<usize> = (0..problem.slots.len()).filter(|&j| problem.slots[j].group == n.group).collect();
        let slot = match problem.spec.activation {
            Activation::Linear => slots[0],
            Activation::GatedRelu => {
                let j = n.gate.ok_or_else(|| Error::InvalidArgument("gated neuron without gate".into()))?;
                *slots.get(j).ok_or_else(|| Error::InvalidArgument(format!("gate {j} out of range")))?
            }
            Activation::Relu => {
                let e = &problem.groups[n.group].data.matrix;
                let eu = e * &u;
                let tol = 1e-12 * eu.amax().max(1e-300);
                let own = pattern(e, &u);
                let found = slots.iter().copied().find(|&j| {
                    let mask = problem.slots[j].mask.as_ref().expect("relu slot mask");
                    mask.iter().zip(eu.iter()).all(|(&m, &val)| val.abs() <= tol || m == (val >= 0.0))
                });
                found.ok_or_else(|| Error::PatternMiss { group: n.group, pattern: pattern_string(&own) })?
            }
        };
        z[slot] += &u * v.transpose();
        cols[slot].push((u, v));
    }
    if problem.spec.activation != Activation::Relu {
        return Ok(ConvexVars::Dense(z));
    }
    // The dense ReLU penalty is only a lower bound on the cone-constrained norm;
    // keeping the neurons as factor columns carries the exact value over.
    let factors = cols
        .into_iter()
        .enumerate()
        .map(|(j, list)| {
            let (p, q) = problem.slot_shape(j);
            if list.is_empty() {
                return BmFactors::zeros(p, q, 1);
            }
            let (us, vs): (Vec<Vector>, Vec<Vector>) = list.into_iter().unzip();
            BmFactors { u: Mat::from_columns(&us), v: Mat::from_columns(&vs) }
        })
        .collect();
    Ok(ConvexVars::Factored(factors))
}

/// Scaled copy `(alpha W1, W2 / alpha)`; predictions are unchanged for `alpha > 0`.
pub fn rescale_neuron(n: &Neuron, alpha: f64) -> Neuron {
    Neuron { group: n.group, gate: n.gate, w1: &n.w1 * alpha, w2: &n.w2 / alpha }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{HeadKind, HeadSpec};
    use crate::rng::{gaussian_mat, seeded};

    fn scalar_batch(x: f64, y: f64) -> EmbeddingBatch {
        EmbeddingBatch::new(vec![Mat::from_element(1, 1, x)], vec![Mat::from_element(1, 1, y)]).unwrap()
    }

    #[test]
    fn scalar_attention_chain() {
        let spec = HeadSpec::new(HeadKind::SelfAttention, Activation::Linear, 2.0);
        let batch = scalar_batch(2.0, 8.0);
        let w = NonconvexWeights {
            neurons: vec![Neuron { group: 0, gate: None, w1: Mat::from_element(1, 1, 1.0), w2: Mat::from_element(1, 1, 1.0) }],
            gates: vec![],
        };
        assert_eq!(nc_forward(&spec, &w, &batch).unwrap()[0][(0, 0)], 8.0);
        assert_eq!(nc_objective(&spec, &w, &batch).unwrap(), 2.0);
        let zero = NonconvexWeights::default();
        assert_eq!(nc_objective(&spec, &zero, &batch).unwrap(), 32.0);
    }

    #[test]
    fn scalar_attention_mapping() {
        let spec = HeadSpec::new(HeadKind::SelfAttention, Activation::Linear, 0.5);
        let batch = scalar_batch(2.0, 8.0);
        let problem = Problem::new(spec.clone(), &batch).unwrap();
        let vars = ConvexVars::Dense(vec![Mat::from_element(1, 1, 4.0)]);
        let w = map_convex_to_nonconvex(&problem, &vars).unwrap();
        assert_eq!(w.neurons.len(), 1);
        assert!((w.neurons[0].w1[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((w.neurons[0].w2[(0, 0)] - 2.0).abs() < 1e-12);
        let empty = map_convex_to_nonconvex(&problem, &ConvexVars::Dense(vec![Mat::zeros(1, 1)])).unwrap();
        assert!(empty.neurons.is_empty());
    }

    #[test]
    fn unbalanced_pair_costs_more() {
        let spec = HeadSpec::new(HeadKind::SelfAttention, Activation::Linear, 1.0);
        let batch = scalar_batch(1.0, 0.0);
        let problem = Problem::new(spec.clone(), &batch).unwrap();
        let w = NonconvexWeights {
            neurons: vec![Neuron { group: 0, gate: None, w1: Mat::from_element(1, 1, 4.0), w2: Mat::from_element(1, 1, 1.0) }],
            gates: vec![],
        };
        let z = map_nonconvex_to_convex(&problem, &w).unwrap();
        let convex = problem.objective(&z).unwrap().total;
        assert!(convex < nc_objective(&spec, &w, &batch).unwrap());
        let dup = NonconvexWeights { neurons: vec![w.neurons[0].clone(), w.neurons[0].clone()], gates: vec![] };
        let z2 = map_nonconvex_to_convex(&problem, &dup).unwrap();
        assert_eq!(z2.to_dense()[0][(0, 0)], 8.0);
    }

    #[test]
    fn mixer_round_trip() {
        let mut rng = seeded(7);
        let xs: Vec<Mat> = (0..3).map(|_| gaussian_mat(&mut rng, 2, 2)).collect();
        let ys: Vec<Mat> = (0..3).map(|_| gaussian_mat(&mut rng, 2, 1)).collect();
        let batch = EmbeddingBatch::new(xs, ys).unwrap();
        let spec = HeadSpec::new(HeadKind::Mixer, Activation::Linear, 0.3);
        let problem = Problem::new(spec.clone(), &batch).unwrap();
        let z = gaussian_mat(&mut rng, 4, 2) * gaussian_mat(&mut rng, 2, 2);
        let vars = ConvexVars::Dense(vec![z]);
        let w = map_convex_to_nonconvex(&problem, &vars).unwrap();
        let convex = problem.objective(&vars).unwrap().total;
        let nc = nc_objective(&spec, &w, &batch).unwrap();
        assert!((convex - nc).abs() <= 1e-10 * convex.abs());
        let back = map_nonconvex_to_convex(&problem, &w).unwrap();
        let p1 = problem.predict(&back.to_dense());
        let p0 = problem.predict(&vars.to_dense());
        for (a, b) in p0.iter().zip(&p1) {
            assert!((a - b).amax() <= 1e-10);
        }
    }
}
