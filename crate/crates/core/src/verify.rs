//! Property suites behind `cvxattn verify`. Each check records the measured
//! worst value against its tolerance.

use std::time::Instant;

use rand::Rng as _;
use serde::Serialize;

use crate::arrangements::{angular_grid_masks, cardinality_bound, enumerate_arrangements, ArrangementMode, DataKind, EffectiveData};
use crate::data::EmbeddingBatch;
use crate::error::Result;
use crate::heads::{Activation, ConvexVars, HeadKind, HeadSpec, Loss, MixFn, Problem};
use crate::linalg::{fno_circ_forward, fno_fourier_forward, fno_shift_forward, lift_spatial_weights, lstsq, max_abs_diff, Mat, TokenGrid, Vector};
use crate::nonconvex::{map_convex_to_nonconvex, map_nonconvex_to_convex, nc_objective};
use crate::norms::{svt_prox, BmFactors};
use crate::rng::{gaussian_mat, gaussian_vec, seeded, substream, Rng};
use crate::solvers::{bm_solve, fista_solve, grad_check_mats, nc_gradient, nc_init, nc_solve, NcLayout, SolverConfig};
use crate::synth::{generate, Recipe, SynthDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Mappings,
    Equivalence,
    FnoLemma,
    Blockdiag,
    Grad,
    Prox,
    Arrangements,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Mappings,
        Suite::Equivalence,
        Suite::FnoLemma,
        Suite::Blockdiag,
        Suite::Grad,
        Suite::Prox,
        Suite::Arrangements,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Mappings => "mappings",
            Suite::Equivalence => "equivalence",
            Suite::FnoLemma => "fno-lemma",
            Suite::Blockdiag => "blockdiag",
            Suite::Grad => "grad",
            Suite::Prox => "prox",
            Suite::Arrangements => "arrangements",
        }
    }

    /// A suite name, or `all`.
    pub fn parse(name: &str) -> Option<Vec<Suite>> {
        if name == "all" {
            return Some(Suite::ALL.to_vec());
        }
        Suite::ALL.iter().find(|s| s.name() == name).map(|s| vec![*s])
    }

    fn default_seeds(&self) -> usize {
        match self {
            Suite::Mappings | Suite::Equivalence => 50,
            Suite::FnoLemma | Suite::Arrangements => 20,
            Suite::Blockdiag => 10,
            Suite::Grad => 5,
            Suite::Prox => 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    /// Worst measured value (error, gap, or failing fraction, per check).
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn at_most(suite: Suite, name: impl Into<String>, value: f64, tolerance: f64, detail: impl Into<String>) -> Check {
        Check { suite: suite.name(), name: name.into(), passed: value <= tolerance, value, tolerance, detail: detail.into() }
    }

    fn at_least(suite: Suite, name: impl Into<String>, value: f64, tolerance: f64, detail: impl Into<String>) -> Check {
        Check { suite: suite.name(), name: name.into(), passed: value >= tolerance, value, tolerance, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Overrides the per-suite seed count.
    pub seeds: Option<usize>,
    pub threads: usize,
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let seeds = opts.seeds.unwrap_or(suite.default_seeds()).max(1);
    let threads = opts.threads.max(1);
    match suite {
        Suite::Mappings => mappings(seeds),
        Suite::Equivalence => equivalence(seeds, threads),
        Suite::FnoLemma => fno_lemma(seeds),
        Suite::Blockdiag => blockdiag(seeds),
        Suite::Grad => grad(seeds),
        Suite::Prox => prox(seeds),
        Suite::Arrangements => arrangements(seeds),
    }
}

/// Runs every suite in order; returns the checks and the wall time per suite.
pub fn run_all(suites: &[Suite], opts: &VerifyOptions) -> Result<(Vec<Check>, Vec<(&'static str, f64)>)> {
    let mut checks = Vec::new();
    let mut times = Vec::new();
    for s in suites {
        let start = Instant::now();
        checks.extend(run(*s, opts)?);
        times.push((s.name(), start.elapsed().as_secs_f64()));
    }
    Ok((checks, times))
}

fn random_batch(rng: &mut Rng, n: usize, s: usize, d: usize, c: usize) -> Result<EmbeddingBatch> {
    let xs = (0..n).map(|_| gaussian_mat(rng, s, d)).collect();
    let ys = (0..n).map(|_| gaussian_mat(rng, s, c)).collect();
    EmbeddingBatch::new(xs, ys)
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn kind_label(kind: &HeadKind, blocks: usize) -> String {
    let name = HeadSpec::new(kind.clone(), Activation::Linear, 0.0).kind_name();
    if *kind == HeadKind::Bfno {
        format!("{name}(B={blocks})")
    } else {
        name
    }
}

// ---------------------------------------------------------------- mappings

const MAPPING_KINDS: [HeadKind; 9] = [
    HeadKind::Mlp,
    HeadKind::SelfAttention,
    HeadKind::SaBlockdiag,
    HeadKind::Mixer,
    HeadKind::Fno,
    HeadKind::Bfno,
    HeadKind::Generic(MixFn::MeanPool),
    HeadKind::Generic(MixFn::FNet),
    HeadKind::Generic(MixFn::LocalPool { radius: 1 }),
];

/// Left factor column with exactly the arrangement's sign pattern: the strict
/// witness plus a perturbation small enough not to flip any row.
fn feasible_column(rng: &mut Rng, e: &Mat, witness: &Vector) -> Vector {
    let base = e * witness;
    let g = gaussian_vec(rng, witness.len());
    let eg = e * &g;
    let mut t: f64 = 1.0;
    for (b, p) in base.iter().zip(eg.iter()) {
        if b.abs() > 0.0 && p.abs() > 0.0 {
            t = t.min(0.5 * b.abs() / p.abs());
        }
    }
    (witness + g * t) * rng.random_range(0.2..2.0)
}

fn mapping_instance(kind: &HeadKind, act: Activation, seed: u64) -> Result<Option<(Problem, ConvexVars)>> {
    let mut rng = substream(seed, 0x6d6170);
    let beta = rng.random_range(0.01..1.0);
    let (n, s, d, c) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2));
    let mut blocks = 1;
    let batch = match kind {
        HeadKind::SaBlockdiag => {
            if act != Activation::Linear {
                return Ok(None);
            }
            let dims = SynthDims { n, s: s.max(2), d: d.max(2), c, ..SynthDims::default() };
            generate(&Recipe::BlockdiagGram { blocks: 2 }, dims, seed)?
        }
        HeadKind::Bfno => {
            let common: Vec<usize> = (1..=d.min(c)).filter(|b| d % b == 0 && c % b == 0).collect();
            blocks = common[rng.random_range(0..common.len())];
            random_batch(&mut rng, n, s, d, c)?
        }
        _ => random_batch(&mut rng, n, s, d, c)?,
    };
    let spec = HeadSpec::new(kind.clone(), act, beta).with_blocks(blocks).with_m(3);
    let problem = match act {
        Activation::Linear => Problem::new(spec, &batch)?,
        Activation::Relu => Problem::with_mode(spec, &batch, ArrangementMode::Sampled, 12, seed)?,
        Activation::GatedRelu => Problem::with_mode(spec, &batch, ArrangementMode::Gated, 0, seed)?,
    };
    let vars = match act {
        Activation::Relu => {
            let mut factors = Vec::new();
            for slot in &problem.slots {
                let g = &problem.groups[slot.group];
                let set = &problem.arrangements[slot.group];
                let mask = slot.mask.as_ref().expect("relu slot");
                let k = set.masks.iter().position(|m| m == mask).expect("slot mask from its set");
                let (p, q) = g.var_shape();
                let cols: Vec<Vector> = (0..2).map(|_| feasible_column(&mut rng, &g.data.matrix, &set.witnesses[k])).collect();
                let _ = p;
                factors.push(BmFactors { u: Mat::from_columns(&cols), v: gaussian_mat(&mut rng, q, 2) });
            }
            ConvexVars::Factored(factors)
        }
        _ => {
            let z = (0..problem.slots.len())
                .map(|j| {
                    let (p, q) = problem.slot_shape(j);
                    gaussian_mat(&mut rng, p, q)
                })
                .collect();
            ConvexVars::Dense(z)
        }
    };
    Ok(Some((problem, vars)))
}

fn mappings(seeds: usize) -> Result<Vec<Check>> {
    let suite = Suite::Mappings;
    let mut out = Vec::new();
    for kind in &MAPPING_KINDS {
        for act in [Activation::Linear, Activation::Relu, Activation::GatedRelu] {
            let mut worst: f64 = 0.0;
            let mut worst_back: f64 = 0.0;
            let mut count = 0;
            for seed in 0..seeds as u64 {
                let Some((problem, vars)) = mapping_instance(kind, act, seed)? else { break };
                count += 1;
                let convex = problem.objective(&vars)?.total;
                let weights = map_convex_to_nonconvex(&problem, &vars)?;
                let nonconvex = nc_objective(&problem.spec, &weights, &problem.batch)?;
                worst = worst.max(rel_gap(convex, nonconvex));
                // Mapping back can only merge neurons, which never raises the objective.
                let back = problem.objective(&map_nonconvex_to_convex(&problem, &weights)?)?.total;
                worst_back = worst_back.max((back - nonconvex) / nonconvex.abs().max(1e-300));
            }
            if count == 0 {
                continue;
            }
            let label = format!("{} {}", kind_label(kind, 0).trim_end_matches("(B=0)"), act.name());
            out.push(Check::at_most(suite, format!("{label}: convex -> non-convex objective"), worst, 1e-9, format!("{count} random variable sets, relative gap")));
            out.push(Check::at_most(suite, format!("{label}: non-convex -> convex objective"), worst_back, 1e-9, "relative increase after mapping back"));
        }
    }
    Ok(out)
}

// ------------------------------------------------------------- equivalence

/// `(kind, blocks, n, s, d, c)` tiny instances; the ReLU ones keep the
/// effective data at rank <= 2 so the arrangement sweep is exhaustive.
pub const LINEAR_EQUIVALENCE: [(HeadKind, usize, usize, usize, usize, usize); 6] = [
    (HeadKind::SelfAttention, 1, 3, 2, 2, 2),
    (HeadKind::Mixer, 1, 3, 2, 2, 2),
    (HeadKind::Fno, 1, 3, 2, 2, 2),
    (HeadKind::Bfno, 2, 3, 2, 2, 2),
    (HeadKind::Mlp, 1, 3, 2, 2, 2),
    (HeadKind::Generic(MixFn::MeanPool), 1, 3, 2, 2, 2),
];

pub const RELU_EQUIVALENCE: [(HeadKind, usize, usize, usize, usize, usize); 6] = [
    (HeadKind::SelfAttention, 1, 2, 2, 1, 1),
    (HeadKind::Mixer, 1, 2, 1, 2, 1),
    (HeadKind::Fno, 1, 2, 2, 1, 1),
    (HeadKind::Bfno, 2, 2, 2, 2, 2),
    (HeadKind::Mlp, 1, 2, 2, 2, 1),
    (HeadKind::Generic(MixFn::MeanPool), 1, 2, 2, 2, 1),
];

pub const EQUIVALENCE_BETA: f64 = 0.1;

pub fn equivalence_problem(case: &(HeadKind, usize, usize, usize, usize, usize), act: Activation, seed: u64) -> Result<Problem> {
    let (kind, blocks, n, s, d, c) = case;
    let mut rng = seeded(seed);
    let batch = random_batch(&mut rng, *n, *s, *d, *c)?;
    let spec = HeadSpec::new(kind.clone(), act, EQUIVALENCE_BETA).with_blocks(*blocks);
    Problem::build(spec, &batch, seed)
}

pub fn fista_config(seed: u64) -> SolverConfig {
    SolverConfig { max_iters: 100_000, rel_tol: 1e-16, abs_tol: 1e-12, restarts: 1, seed, ..SolverConfig::default() }
}

pub fn bm_config(seed: u64, threads: usize) -> SolverConfig {
    SolverConfig { max_iters: 20_000, rel_tol: 1e-16, abs_tol: 1e-12, restarts: 2, seed, threads, ..SolverConfig::default() }
}

pub fn nc_config(seed: u64, relu: bool, threads: usize) -> SolverConfig {
    let (max_iters, rel_tol) = if relu { (500, 1e-9) } else { (5000, 1e-12) };
    SolverConfig { max_iters, rel_tol, abs_tol: 1e-12, restarts: 20, seed, threads, ..SolverConfig::default() }
}

fn equivalence(seeds: usize, threads: usize) -> Result<Vec<Check>> {
    let suite = Suite::Equivalence;
    let mut out = Vec::new();
    for case in &LINEAR_EQUIVALENCE {
        let label = kind_label(&case.0, case.1);
        let (mut below, mut agree, mut worst_excess) = (0, 0, f64::NEG_INFINITY);
        for seed in 0..seeds as u64 {
            let problem = equivalence_problem(case, Activation::Linear, seed)?;
            let (_, f) = fista_solve(&problem, &fista_config(seed))?;
            let (_, nc) = nc_solve(&problem, &nc_config(seed, false, threads))?;
            let excess = f.total - nc.total;
            worst_excess = worst_excess.max(excess);
            below += (excess <= 1e-9) as usize;
            agree += (rel_gap(f.total, nc.total) <= 1e-3) as usize;
        }
        out.push(Check::at_most(suite, format!("{label} linear: fista <= nc + 1e-9"), worst_excess, 1e-9, format!("{below}/{seeds} instances")));
        out.push(Check::at_least(suite, format!("{label} linear: agreement within 1e-3"), agree as f64 / seeds as f64, 0.8, format!("{agree}/{seeds} instances")));
    }
    for case in &RELU_EQUIVALENCE {
        let label = kind_label(&case.0, case.1);
        let (mut certified, mut agree, mut worst_excess) = (0, 0, f64::NEG_INFINITY);
        for seed in 0..seeds as u64 {
            let problem = equivalence_problem(case, Activation::Relu, seed)?;
            let (_, bm) = bm_solve(&problem, &bm_config(seed, threads))?;
            let (_, nc) = nc_solve(&problem, &nc_config(seed, true, threads))?;
            if bm.certified {
                certified += 1;
                worst_excess = worst_excess.max(bm.total - nc.total);
                agree += (rel_gap(bm.total, nc.total) <= 1e-3) as usize;
            }
        }
        out.push(Check::at_most(suite, format!("{label} relu: certified bm <= nc + 1e-9"), worst_excess, 1e-9, format!("{certified}/{seeds} certified")));
        out.push(Check::at_least(
            suite,
            format!("{label} relu: certified and within 1e-3"),
            agree as f64 / seeds as f64,
            0.8,
            format!("{agree}/{seeds} instances"),
        ));
    }
    out.extend(bm_against_fista(seeds.min(20), threads)?);
    out.extend(beta_zero_collapse(seeds.min(10))?);
    out.push(mixer_witness()?);
    Ok(out)
}

/// Certified Burer-Monteiro totals against FISTA on the linear heads.
pub fn bm_against_fista(seeds: usize, threads: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for case in &LINEAR_EQUIVALENCE {
        let label = kind_label(&case.0, case.1);
        let (mut certified, mut worst) = (0, 0.0f64);
        for seed in 0..seeds as u64 {
            let problem = equivalence_problem(case, Activation::Linear, seed)?;
            let (_, f) = fista_solve(&problem, &fista_config(seed))?;
            let (_, bm) = bm_solve(&problem, &bm_config(seed, threads))?;
            if bm.certificate.as_ref().is_some_and(|c| c.passes) {
                certified += 1;
                worst = worst.max(rel_gap(f.total, bm.total));
            }
        }
        out.push(Check::at_most(
            Suite::Equivalence,
            format!("{label} linear: certified bm matches fista"),
            worst,
            1e-5,
            format!("{certified}/{seeds} certificates passed"),
        ));
    }
    Ok(out)
}

/// Least-squares optimum loss of a linear head at `beta = 0`.
pub fn unregularized_loss(problem: &Problem) -> f64 {
    let (phi, y) = problem.squared_design();
    let z = lstsq(&phi, &Mat::from_column_slice(y.len(), 1, y.as_slice()));
    let resid = &phi * z - Mat::from_column_slice(y.len(), 1, y.as_slice());
    0.5 * resid.norm_squared()
}

/// Linear attention and the linear MLP reach the same optimum at `beta = 0`
/// on instances where both interpolate (`n s <= d`).
pub fn beta_zero_collapse(seeds: usize) -> Result<Vec<Check>> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds as u64 {
        let mut rng = seeded(seed);
        let batch = random_batch(&mut rng, 2, 2, 4, 2)?;
        let sa = Problem::new(HeadSpec::new(HeadKind::SelfAttention, Activation::Linear, 0.0), &batch)?;
        let mlp = Problem::new(HeadSpec::new(HeadKind::Mlp, Activation::Linear, 0.0), &batch)?;
        worst = worst.max((unregularized_loss(&sa) - unregularized_loss(&mlp)).abs());
    }
    Ok(vec![Check::at_most(
        Suite::Equivalence,
        "beta=0: linear attention loss equals linear MLP loss",
        worst,
        1e-6,
        format!("{seeds} instances with n=2, s=2, d=4"),
    )])
}

/// Two samples with equal column means whose targets swap the tokens: the
/// mixer fits them exactly, a token-wise linear map cannot.
pub fn mixer_witness_batch() -> Result<EmbeddingBatch> {
    let xs = vec![Mat::from_row_slice(2, 1, &[1.0, 0.0]), Mat::from_row_slice(2, 1, &[0.0, 1.0])];
    let ys = vec![Mat::from_row_slice(2, 1, &[0.0, 1.0]), Mat::from_row_slice(2, 1, &[1.0, 0.0])];
    EmbeddingBatch::new(xs, ys)
}

fn mixer_witness() -> Result<Check> {
    let batch = mixer_witness_batch()?;
    let mixer = unregularized_loss(&Problem::new(HeadSpec::new(HeadKind::Mixer, Activation::Linear, 0.0), &batch)?);
    let mlp = unregularized_loss(&Problem::new(HeadSpec::new(HeadKind::Mlp, Activation::Linear, 0.0), &batch)?);
    let passed = mixer < 1e-9 && mlp > 1e-3;
    Ok(Check {
        suite: Suite::Equivalence.name(),
        name: "beta=0: mixer fits the token-swap witness, MLP does not".into(),
        passed,
        value: mlp,
        tolerance: 1e-3,
        detail: format!("mixer residual {mixer:.3e}, MLP residual {mlp:.3e}"),
    })
}

// --------------------------------------------------------------- fno-lemma

fn fno_lemma(seeds: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for s in [1usize, 2, 4] {
        for d in [1usize, 2, 3] {
            let mut bs = vec![1, d];
            bs.dedup();
            for b in bs {
                let mut worst: f64 = 0.0;
                for seed in 0..seeds as u64 {
                    let mut rng = seeded(seed);
                    let grid = TokenGrid::line(s);
                    let x = gaussian_mat(&mut rng, s, d);
                    let w = d / b;
                    let l: Vec<Mat> = (0..s)
                        .map(|_| {
                            let full = gaussian_mat(&mut rng, d, d);
                            Mat::from_fn(d, d, |i, j| if i / w == j / w { full[(i, j)] } else { 0.0 })
                        })
                        .collect();
                    let w1 = gaussian_mat(&mut rng, d, 3);
                    let w2 = gaussian_mat(&mut rng, 3, 2);
                    let v = lift_spatial_weights(&l, grid);
                    for act in [Activation::Linear, Activation::Relu] {
                        let fourier = fno_fourier_forward(&x, &v, &w1, &w2, act, grid)?;
                        let circ = fno_circ_forward(&x, &l, &w1, &w2, act, grid);
                        let shift = fno_shift_forward(&x, &l, &w1, &w2, act, grid);
                        worst = worst.max(max_abs_diff(&fourier, &circ)).max(max_abs_diff(&shift, &circ));
                    }
                }
                out.push(Check::at_most(Suite::FnoLemma, format!("s={s} d={d} B={b}: Fourier vs circulant"), worst, 1e-8, format!("{seeds} seeds, max-abs")));
            }
        }
    }
    Ok(out)
}

// --------------------------------------------------------------- blockdiag

/// Full linear attention against its block-separated program on inputs with
/// block-diagonal Gram matrices.
pub fn blockdiag_totals(seed: u64) -> Result<(f64, f64)> {
    let dims = SynthDims { n: 4, s: 4, d: 4, c: 1, ..SynthDims::default() };
    let batch = generate(&Recipe::BlockdiagGram { blocks: 2 }, dims, seed)?;
    let cfg = fista_config(seed);
    let full = Problem::new(HeadSpec::new(HeadKind::SelfAttention, Activation::Linear, EQUIVALENCE_BETA), &batch)?;
    let split = Problem::new(HeadSpec::new(HeadKind::SaBlockdiag, Activation::Linear, EQUIVALENCE_BETA), &batch)?;
    Ok((fista_solve(&full, &cfg)?.1.total, fista_solve(&split, &cfg)?.1.total))
}

fn blockdiag(seeds: usize) -> Result<Vec<Check>> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds as u64 {
        let (full, split) = blockdiag_totals(seed)?;
        worst = worst.max(rel_gap(full, split));
    }
    Ok(vec![Check::at_most(Suite::Blockdiag, "B=2, d=4: full vs block-separated optimum", worst, 1e-6, format!("{seeds} seeds, relative"))])
}

// -------------------------------------------------------------------- grad

fn grad(seeds: usize) -> Result<Vec<Check>> {
    let suite = Suite::Grad;
    let mut out = Vec::new();
    let kinds = [
        (HeadKind::Mlp, 1),
        (HeadKind::SelfAttention, 1),
        (HeadKind::Mixer, 1),
        (HeadKind::Fno, 1),
        (HeadKind::Bfno, 2),
        (HeadKind::Generic(MixFn::FNet), 1),
    ];
    for (kind, blocks) in &kinds {
        for act in [Activation::Linear, Activation::Relu, Activation::GatedRelu] {
            for loss in [Loss::Squared, Loss::CrossEntropy] {
                let (mut convex, mut nonconvex): (f64, f64) = (0.0, 0.0);
                for seed in 0..seeds as u64 {
                    let mut rng = seeded(seed);
                    let batch = random_batch(&mut rng, 2, 3, 2, 2)?;
                    let spec = HeadSpec::new(kind.clone(), act, 0.3).with_blocks(*blocks).with_loss(loss).with_m(3);
                    let problem = match act {
                        Activation::Linear => Problem::new(spec, &batch)?,
                        Activation::Relu => Problem::with_mode(spec, &batch, ArrangementMode::Sampled, 6, seed)?,
                        Activation::GatedRelu => Problem::with_mode(spec, &batch, ArrangementMode::Gated, 0, seed)?,
                    };
                    let z: Vec<Mat> = (0..problem.slots.len())
                        .map(|j| {
                            let (p, q) = problem.slot_shape(j);
                            gaussian_mat(&mut rng, p, q)
                        })
                        .collect();
                    let (_, g) = problem.loss_and_grad(&z);
                    convex = convex.max(grad_check_mats(|v| problem.loss(v), &z, &g, 1e-6, seed)?);

                    let layout = NcLayout::new(&problem, Some(2))?;
                    let x = nc_init(&layout, &SolverConfig { seed, ..SolverConfig::default() }, 0);
                    let (_, gx) = nc_gradient(&layout, &x);
                    let f = |v: &[Mat]| nc_objective(&problem.spec, &layout.weights(v), &problem.batch).unwrap_or(f64::NAN);
                    nonconvex = nonconvex.max(grad_check_mats(f, &x, &gx, 1e-6, seed)?);
                }
                let label = format!("{} {} {:?}", kind_label(kind, *blocks), act.name(), loss).to_lowercase();
                out.push(Check::at_most(suite, format!("{label}: convex loss gradient"), convex, 1e-5, format!("{seeds} random points")));
                out.push(Check::at_most(suite, format!("{label}: non-convex objective gradient"), nonconvex, 1e-5, format!("{seeds} random points")));
            }
        }
    }
    Ok(out)
}

// -------------------------------------------------------------------- prox

/// Symmetric-eigenvalue route to singular values, independent of the SVD.
fn singular_values(m: &Mat) -> Vec<f64> {
    let gram = if m.nrows() >= m.ncols() { m.transpose() * m } else { m * m.transpose() };
    gram.symmetric_eigen().eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect()
}

/// `A - X` must lie in `tau` times the nuclear-norm subdifferential at `X`:
/// `||A - X||_2 <= tau` and `<A - X, X> = tau ||X||_*`.
pub fn prox_violation(a: &Mat, tau: f64) -> f64 {
    let x = svt_prox(a, tau);
    let g = a - &x;
    let spectral = singular_values(&g).into_iter().fold(0.0, f64::max);
    let nuclear: f64 = singular_values(&x).iter().sum();
    let scale = a.norm().max(1.0);
    ((spectral - tau).max(0.0) / scale).max((g.dot(&x) - tau * nuclear).abs() / (scale * scale))
}

fn prox(cases: usize) -> Result<Vec<Check>> {
    let mut worst: f64 = 0.0;
    for case in 0..cases as u64 {
        let mut rng = seeded(case);
        let (r, c) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let a = gaussian_mat(&mut rng, r, c);
        let top = singular_values(&a).into_iter().fold(0.0, f64::max);
        let tau = rng.random_range(0.0..1.2) * top + 1e-3;
        worst = worst.max(prox_violation(&a, tau));
    }
    Ok(vec![Check::at_most(Suite::Prox, "svt_prox subgradient conditions", worst, 1e-8, format!("{cases} random (A, tau)"))])
}

// ------------------------------------------------------------ arrangements

fn arrangements(seeds: usize) -> Result<Vec<Check>> {
    let (mut mismatches, mut over_bound) = (0, 0);
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..seeds as u64 {
        let mut rng = seeded(seed);
        let rows = rng.random_range(2..=8);
        let rank = if seed % 4 == 3 { 1 } else { 2 };
        let basis = gaussian_mat(&mut rng, rank, 3);
        let e = gaussian_mat(&mut rng, rows, rank) * basis;
        let data = EffectiveData { kind: DataKind::Mlp, matrix: e, ranges: vec![(0, rows)] };
        let set = enumerate_arrangements(&data, ArrangementMode::Exhaustive, 0, seed)?;
        let grid = angular_grid_masks(&data, 1 << 16)?;
        let mut found = set.masks.clone();
        found.sort();
        mismatches += (found != grid) as usize;
        let bound = cardinality_bound(rank, rows);
        over_bound += (set.len() as f64 > bound) as usize;
        worst_ratio = worst_ratio.max(set.len() as f64 / bound);
    }
    Ok(vec![
        Check::at_most(Suite::Arrangements, "2-D sweep equals angular grid", mismatches as f64, 0.0, format!("{seeds} random data matrices")),
        Check::at_most(Suite::Arrangements, "counts within 2r(e(n-1)/r)^r", over_bound as f64, 0.0, format!("largest count/bound {worst_ratio:.3}")),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()), Some(vec![s]));
        }
        assert_eq!(Suite::parse("all").unwrap().len(), 7);
        assert!(Suite::parse("everything").is_none());
    }

    #[test]
    fn prox_at_zero_threshold_is_identity() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(prox_violation(&a, 1e-12) <= 1e-12);
    }
}
