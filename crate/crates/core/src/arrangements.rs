//! Effective data matrices and their hyperplane arrangements `diag(1{E u >= 0})`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingBatch;
use crate::error::{shape, Error, Result};
use crate::heads::MixFn;
use crate::linalg::{circ_grid, kron, row_space_basis, Mat, Svd, TokenGrid, Vector};
use crate::rng::{gaussian_vec, normal, seeded};

/// Witnesses must clear every non-zero row by this margin.
pub const STRICT_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Mlp,
    SelfAttention,
    Mixer,
    Fno,
    Bfno { block: usize, blocks: usize },
    Generic,
}

impl DataKind {
    pub fn name(&self) -> String {
        match self {
            DataKind::Mlp => "mlp".into(),
            DataKind::SelfAttention => "self_attention".into(),
            DataKind::Mixer => "mixer".into(),
            DataKind::Fno => "fno".into(),
            DataKind::Bfno { block, blocks } => format!("bfno({block}/{blocks})"),
            DataKind::Generic => "generic_h".into(),
        }
    }
}

/// Per-sample blocks stacked in sample order.
#[derive(Debug, Clone)]
pub struct EffectiveData {
    pub matrix: Mat,
    pub ranges: Vec<(usize, usize)>,
    pub kind: DataKind,
}

impl EffectiveData {
    pub fn from_blocks(kind: DataKind, blocks: &[Mat]) -> Self {
        let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
        let cols = blocks.first().map(|b| b.ncols()).unwrap_or(0);
        let mut matrix = Mat::zeros(rows, cols);
        let mut ranges = Vec::with_capacity(blocks.len());
        let mut at = 0;
        for b in blocks {
            matrix.view_mut((at, 0), b.shape()).copy_from(b);
            ranges.push((at, b.nrows()));
            at += b.nrows();
        }
        EffectiveData { matrix, ranges, kind }
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// The matrix whose row signs a first-layer neuron sees for one sample.
pub fn sample_block(kind: DataKind, x: &Mat, mix: Option<MixFn>, grid: TokenGrid) -> Result<Mat> {
    let (s, d) = x.shape();
    Ok(match kind {
        DataKind::Mlp => x.clone(),
        DataKind::SelfAttention => kron(x, x),
        DataKind::Mixer => kron(&x.transpose(), &Mat::identity(s, s)),
        DataKind::Fno => circ_grid(x, grid),
        DataKind::Bfno { block, blocks } => {
            if blocks == 0 || d % blocks != 0 || block >= blocks {
                return Err(Error::InvalidArgument(format!("B = {blocks} must divide d = {d}")));
            }
            let w = d / blocks;
            circ_grid(&x.columns(block * w, w).into_owned(), grid)
        }
        DataKind::Generic => {
            let h = mix.ok_or_else(|| Error::InvalidArgument("generic head needs a mixing function".into()))?;
            let out = h.apply(x);
            if out.shape() != (s, d) {
                return Err(shape("mixing function must preserve shape"));
            }
            out
        }
    })
}

pub fn effective_data(
    kind: DataKind,
    batch: &EmbeddingBatch,
    mix: Option<MixFn>,
    grid: Option<TokenGrid>,
) -> Result<EffectiveData> {
    let grid = grid.unwrap_or(TokenGrid::line(batch.s));
    if grid.len() != batch.s {
        return Err(shape(format!("grid {}x{} does not cover s = {}", grid.h, grid.w, batch.s)));
    }
    let blocks = batch
        .xs
        .iter()
        .map(|x| sample_block(kind, x, mix, grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectiveData::from_blocks(kind, &blocks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrangementMode {
    Exhaustive,
    Sampled,
    Gated,
}

impl ArrangementMode {
    pub fn name(&self) -> &'static str {
        match self {
            ArrangementMode::Exhaustive => "exhaustive",
            ArrangementMode::Sampled => "sampled",
            ArrangementMode::Gated => "gated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrangementSet {
    pub kind: DataKind,
    pub mode: ArrangementMode,
    pub rank: usize,
    pub rows: usize,
    pub cols: usize,
    pub masks: Vec<Vec<bool>>,
    pub witnesses: Vec<Vector>,
    pub gates: Option<Vec<Vector>>,
}

impl ArrangementSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Only exhaustive sets give the full convex program.
    pub fn is_exact(&self) -> bool {
        self.mode != ArrangementMode::Sampled
    }
}

fn row_scale(e: &Mat) -> f64 {
    (0..e.nrows()).map(|k| e.row(k).norm()).fold(0.0, f64::max)
}

fn zero_rows(e: &Mat) -> Vec<bool> {
    let tol = 1e-13 * row_scale(e).max(1.0);
    (0..e.nrows()).map(|k| e.row(k).norm() <= tol).collect()
}

/// `1{E u >= 0}` row by row.
pub fn pattern(e: &Mat, u: &Vector) -> Vec<bool> {
    (e * u).iter().map(|&v| v >= 0.0).collect()
}

/// Whether `u` clears every non-zero row of `e` by [`STRICT_MARGIN`].
pub fn is_strict(e: &Mat, u: &Vector) -> bool {
    let zero = zero_rows(e);
    (e * u).iter().zip(&zero).all(|(v, &z)| z || v.abs() > STRICT_MARGIN)
}

/// Sign pattern of a strict witness; zero rows count as active.
fn strict_pattern(e: &Mat, zero: &[bool], u: &Vector) -> Option<Vec<bool>> {
    let eu = e * u;
    let mut out = Vec::with_capacity(eu.len());
    for (v, &z) in eu.iter().zip(zero) {
        if z {
            out.push(true);
        } else if v.abs() > STRICT_MARGIN {
            out.push(*v > 0.0);
        } else {
            return None;
        }
    }
    Some(out)
}

/// `K_j = (2 D_j - I) E`.
pub fn cone_constraint(e: &Mat, mask: &[bool]) -> Mat {
    let mut k = e.clone();
    for (row, &on) in mask.iter().enumerate() {
        if !on {
            k.row_mut(row).neg_mut();
        }
    }
    k
}

/// `2 r (e (n - 1) / r)^r`.
pub fn cardinality_bound(r: usize, n_rows: usize) -> f64 {
    let r = r as f64;
    2.0 * r * (std::f64::consts::E * (n_rows as f64 - 1.0) / r).powf(r)
}

struct Projected {
    basis: Mat,
    coords: Mat,
    zero: Vec<bool>,
}

fn project(e: &Mat) -> Projected {
    let basis = row_space_basis(e, 1e-10);
    Projected { coords: e * &basis, basis, zero: zero_rows(e) }
}

fn collect(kind: DataKind, mode: ArrangementMode, rank: usize, e: &Mat, found: BTreeMap<Vec<bool>, Vector>) -> ArrangementSet {
    let (masks, witnesses) = found.into_iter().unzip();
    ArrangementSet { kind, mode, rank, rows: e.nrows(), cols: e.ncols(), masks, witnesses, gates: None }
}

/// Critical angles of the 2-D sweep: directions orthogonal to some non-zero row.
fn sweep_directions(coords: &Mat, zero: &[bool]) -> Vec<f64> {
    let mut crit: Vec<f64> = Vec::new();
    for k in 0..coords.nrows() {
        if zero[k] {
            continue;
        }
        let a = coords[(k, 1)].atan2(coords[(k, 0)]) + PI / 2.0;
        for t in [a, a + PI] {
            crit.push(t.rem_euclid(2.0 * PI));
        }
    }
    crit.sort_by(f64::total_cmp);
    crit.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    if crit.is_empty() {
        return vec![0.0];
    }
    let mut mids = Vec::with_capacity(crit.len());
    for (i, &a) in crit.iter().enumerate() {
        let b = if i + 1 < crit.len() { crit[i + 1] } else { crit[0] + 2.0 * PI };
        mids.push(0.5 * (a + b));
    }
    mids
}

pub fn enumerate_arrangements(data: &EffectiveData, mode: ArrangementMode, budget: usize, seed: u64) -> Result<ArrangementSet> {
    let e = &data.matrix;
    let proj = project(e);
    let r = proj.basis.ncols();
    let mut found: BTreeMap<Vec<bool>, Vector> = BTreeMap::new();
    let keep = |found: &mut BTreeMap<Vec<bool>, Vector>, w: &Vector| {
        let u = &proj.basis * w;
        if let Some(p) = strict_pattern(e, &proj.zero, &u) {
            found.entry(p).or_insert(u);
        }
    };
    match mode {
        ArrangementMode::Gated => {
            return Err(Error::InvalidArgument("gated arrangements come from explicit gates".into()))
        }
        ArrangementMode::Exhaustive => {
            if r > 2 {
                return Err(Error::UnsupportedMode(r));
            }
            match r {
                0 => {
                    found.insert(vec![true; e.nrows()], Vector::zeros(e.ncols()));
                }
                1 => {
                    for sgn in [1.0, -1.0] {
                        keep(&mut found, &Vector::from_element(1, sgn));
                    }
                }
                _ => {
                    for theta in sweep_directions(&proj.coords, &proj.zero) {
                        keep(&mut found, &Vector::from_vec(vec![theta.cos(), theta.sin()]));
                    }
                }
            }
        }
        ArrangementMode::Sampled => {
            if budget == 0 {
                return Err(Error::InvalidArgument("sampled mode needs budget >= 1".into()));
            }
            if r == 0 {
                found.insert(vec![true; e.nrows()], Vector::zeros(e.ncols()));
            } else {
                let live: Vec<usize> = (0..e.nrows()).filter(|&k| !proj.zero[k]).collect();
                let mut rng = seeded(seed);
                for i in 0..budget {
                    let w = if r >= 2 && i % 2 == 1 && live.len() >= r - 1 {
                        let mut picked: Vec<usize> = Vec::with_capacity(r - 1);
                        while picked.len() < r - 1 {
                            let k = live[(rand::Rng::random::<u64>(&mut rng) % live.len() as u64) as usize];
                            if !picked.contains(&k) {
                                picked.push(k);
                            }
                        }
                        let mut a = Mat::zeros(r, r);
                        for (row, &k) in picked.iter().enumerate() {
                            let y = proj.coords.row(k);
                            a.row_mut(row).copy_from(&(y / y.norm()));
                        }
                        let null = Svd::new(&a).v.column(r - 1).into_owned();
                        let sign = if normal(&mut rng) >= 0.0 { 1.0 } else { -1.0 };
                        null * sign + gaussian_vec(&mut rng, r) * 1e-4
                    } else {
                        gaussian_vec(&mut rng, r)
                    };
                    keep(&mut found, &w);
                }
            }
        }
    }
    Ok(collect(data.kind, mode, r, e, found))
}

/// Fixed gates `h_j`; masks are `1{E h_j >= 0}` with duplicates kept in order.
pub fn gates_to_arrangements(gates: &[Vector], data: &EffectiveData) -> Result<ArrangementSet> {
    let e = &data.matrix;
    for h in gates {
        if h.len() != e.ncols() {
            return Err(shape(format!("gate length {} vs {} columns", h.len(), e.ncols())));
        }
    }
    Ok(ArrangementSet {
        kind: data.kind,
        mode: ArrangementMode::Gated,
        rank: Svd::new(e).rank(1e-10),
        rows: e.nrows(),
        cols: e.ncols(),
        masks: gates.iter().map(|h| pattern(e, h)).collect(),
        witnesses: gates.to_vec(),
        gates: Some(gates.to_vec()),
    })
}

/// Brute-force reference for rank <= 2: the distinct strict patterns over
/// `directions` equally spaced angles in the row space.
pub fn angular_grid_masks(data: &EffectiveData, directions: usize) -> Result<Vec<Vec<bool>>> {
    let e = &data.matrix;
    let proj = project(e);
    let r = proj.basis.ncols();
    let mut out: std::collections::BTreeSet<Vec<bool>> = Default::default();
    let mut push = |coords: &Mat, w: &[f64]| {
        let mut p = Vec::with_capacity(coords.nrows());
        for k in 0..coords.nrows() {
            if proj.zero[k] {
                p.push(true);
                continue;
            }
            let v: f64 = (0..w.len()).map(|a| coords[(k, a)] * w[a]).sum();
            if v.abs() <= STRICT_MARGIN {
                return;
            }
            p.push(v > 0.0);
        }
        out.insert(p);
    };
    match r {
        0 => push(&proj.coords, &[]),
        1 => {
            push(&proj.coords, &[1.0]);
            push(&proj.coords, &[-1.0]);
        }
        2 => {
            for k in 0..directions {
                let theta = 2.0 * PI * (k as f64 + 0.5) / directions as f64;
                push(&proj.coords, &[theta.cos(), theta.sin()]);
            }
        }
        other => return Err(Error::UnsupportedMode(other)),
    }
    Ok(out.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_mat;

    fn data(m: Mat) -> EffectiveData {
        EffectiveData::from_blocks(DataKind::Mlp, &[m])
    }

    #[test]
    fn effective_data_scalar_examples() {
        let x = Mat::from_element(1, 1, 2.0);
        let batch = EmbeddingBatch::new(vec![x.clone()], vec![Mat::from_element(1, 1, 0.0)]).unwrap();
        let sa = effective_data(DataKind::SelfAttention, &batch, None, None).unwrap();
        assert_eq!(sa.matrix, Mat::from_element(1, 1, 4.0));
        let mixer = effective_data(DataKind::Mixer, &batch, None, None).unwrap();
        assert_eq!(mixer.matrix, Mat::from_element(1, 1, 2.0));
        let fno = effective_data(DataKind::Fno, &batch, None, None).unwrap();
        assert_eq!(fno.matrix, x);
        let bad = effective_data(DataKind::Bfno { block: 0, blocks: 2 }, &batch, None, None);
        assert!(bad.is_err());
    }

    #[test]
    fn effective_data_stacks_samples() {
        let mut rng = seeded(1);
        let xs: Vec<Mat> = (0..3).map(|_| gaussian_mat(&mut rng, 2, 3)).collect();
        let ys = vec![Mat::zeros(1, 1); 3];
        let batch = EmbeddingBatch::new(xs, ys).unwrap();
        let e = effective_data(DataKind::Mixer, &batch, None, None).unwrap();
        assert_eq!(e.matrix.shape(), (18, 4));
        assert_eq!(e.ranges, vec![(0, 6), (6, 6), (12, 6)]);
    }

    #[test]
    fn exhaustive_one_dimensional() {
        let set = enumerate_arrangements(&data(Mat::from_row_slice(2, 1, &[1.0, -1.0])), ArrangementMode::Exhaustive, 0, 0).unwrap();
        assert_eq!(set.masks, vec![vec![false, true], vec![true, false]]);
        assert!((set.len() as f64) <= cardinality_bound(1, 2));
        let single = enumerate_arrangements(&data(Mat::from_row_slice(1, 2, &[1.0, 0.0])), ArrangementMode::Exhaustive, 0, 0).unwrap();
        assert_eq!(single.masks, vec![vec![false], vec![true]]);
    }

    #[test]
    fn exhaustive_rejects_rank_three() {
        let mut rng = seeded(2);
        let err = enumerate_arrangements(&data(gaussian_mat(&mut rng, 5, 3)), ArrangementMode::Exhaustive, 0, 0);
        assert!(matches!(err, Err(Error::UnsupportedMode(3))));
    }

    #[test]
    fn witnesses_realize_masks() {
        let mut rng = seeded(3);
        let e = gaussian_mat(&mut rng, 6, 2);
        let set = enumerate_arrangements(&data(e.clone()), ArrangementMode::Exhaustive, 0, 0).unwrap();
        assert_eq!(set.len(), 12);
        for (mask, u) in set.masks.iter().zip(&set.witnesses) {
            assert_eq!(&pattern(&e, u), mask);
            assert!(is_strict(&e, u));
            let k = cone_constraint(&e, mask);
            assert!((k * u).iter().all(|&v| v >= -1e-10));
        }
    }

    #[test]
    fn sampled_matches_sweep_and_is_monotone() {
        let mut rng = seeded(4);
        let d = data(gaussian_mat(&mut rng, 4, 2));
        let exact = enumerate_arrangements(&d, ArrangementMode::Exhaustive, 0, 0).unwrap();
        let sampled = enumerate_arrangements(&d, ArrangementMode::Sampled, 10_000, 9).unwrap();
        assert_eq!(exact.masks, sampled.masks);
        let small = enumerate_arrangements(&d, ArrangementMode::Sampled, 5, 9).unwrap();
        assert!(small.masks.iter().all(|m| sampled.masks.contains(m)));
    }

    #[test]
    fn gates_keep_zero_rows_active() {
        let d = data(Mat::identity(2, 2));
        let e1 = Vector::from_vec(vec![1.0, 0.0]);
        let set = gates_to_arrangements(&[e1.clone(), -e1.clone(), e1], &d).unwrap();
        assert_eq!(set.masks, vec![vec![true, true], vec![false, true], vec![true, true]]);
    }

    #[test]
    fn bound_values() {
        assert!((cardinality_bound(1, 2) - 2.0 * std::f64::consts::E).abs() < 1e-12);
        assert!((cardinality_bound(2, 3) - 4.0 * std::f64::consts::E.powi(2)).abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_high_dimensional_data_is_swept() {
        let mut rng = seeded(5);
        let a = gaussian_mat(&mut rng, 5, 2);
        let b = gaussian_mat(&mut rng, 2, 4);
        let d = data(a * b);
        let set = enumerate_arrangements(&d, ArrangementMode::Exhaustive, 0, 0).unwrap();
        assert_eq!(set.rank, 2);
        assert_eq!(set.masks, angular_grid_masks(&d, 100_000).unwrap());
    }
}
