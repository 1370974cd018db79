//! Every convex head written as one lifted linear model.
//!
//! A group holds per-sample effective data `E_i` (T*s rows), a readout matrix
//! `W_i` (T x Q) and a column range of the output. A variable `Z` for that
//! group is `p x (Q * c_g)` and contributes
//!
//! `Y_hat[o, p] += sum_{t,q} W_i[t, q] * (D (.) E_i Z)[t*s + o, q*c_g + p]`.
//!
//! Self-attention uses `E_i = X_i (x) X_i`, `W_i = X_i`; the mixer uses
//! `E_i = X_i^T (x) I_s`, `W_i = I_d`; FNO, B-FNO, the MLP and generic heads use
//! `W_i = [1]` with `E_i` the (circulant / mixed) data itself.

use serde::{Deserialize, Serialize};

use super::{loss_value_and_grad, Activation, HeadKind, HeadSpec, Parametrization};
use crate::arrangements::{
    enumerate_arrangements, gates_to_arrangements, sample_block, ArrangementMode, ArrangementSet, DataKind,
    EffectiveData,
};
use crate::data::EmbeddingBatch;
use crate::error::{shape, Error, Result};
use crate::linalg::{detect_gram_blocks, kron, Mat, Vector};
use crate::norms::{nuclear_norm, BmFactors};
use crate::rng::{gaussian_vec, seeded};

#[derive(Debug, Clone)]
pub struct Group {
    pub data: EffectiveData,
    pub readouts: Vec<Mat>,
    pub col_start: usize,
    pub col_width: usize,
    /// Feature indices when the group is one part of a block-diagonal Gram.
    pub features: Option<Vec<usize>>,
}

impl Group {
    pub fn p(&self) -> usize {
        self.data.cols()
    }

    pub fn q(&self) -> usize {
        self.readouts[0].ncols()
    }

    pub fn var_shape(&self) -> (usize, usize) {
        (self.p(), self.q() * self.col_width)
    }

    pub fn sample_data(&self, i: usize) -> nalgebra::DMatrixView<'_, f64> {
        let (start, len) = self.data.ranges[i];
        self.data.matrix.rows(start, len)
    }
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub group: usize,
    pub mask: Option<Vec<bool>>,
}

/// `Z^{(k,l)}` views: row block `k`, column block `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub rows: usize,
    pub cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
}

impl BlockLayout {
    pub fn block(&self, z: &Mat, k: usize, l: usize) -> Mat {
        z.view((k * self.block_rows, l * self.block_cols), (self.block_rows, self.block_cols)).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvexVars {
    Dense(Vec<Mat>),
    Factored(Vec<BmFactors>),
}

impl ConvexVars {
    pub fn to_dense(&self) -> Vec<Mat> {
        match self {
            ConvexVars::Dense(z) => z.clone(),
            ConvexVars::Factored(f) => f.iter().map(|b| b.product()).collect(),
        }
    }

    pub fn scaled(&self, alpha: f64) -> ConvexVars {
        match self {
            ConvexVars::Dense(z) => ConvexVars::Dense(z.iter().map(|m| m * alpha).collect()),
            ConvexVars::Factored(f) => ConvexVars::Factored(
                f.iter().map(|b| BmFactors { u: &b.u * alpha.abs().sqrt(), v: &b.v * (alpha.signum() * alpha.abs().sqrt()) }).collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub reg: f64,
    pub total: f64,
    /// ReLU program over a sampled (incomplete) arrangement set.
    pub restricted: bool,
    /// ReLU program with dense `Z` whose regularizer is the plain nuclear norm,
    /// a lower bound on the cone-constrained one.
    pub relaxed_reg: bool,
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: HeadSpec,
    pub n: usize,
    pub s: usize,
    pub d: usize,
    pub c: usize,
    pub groups: Vec<Group>,
    pub slots: Vec<Slot>,
    pub arrangements: Vec<ArrangementSet>,
    pub targets: Vec<Mat>,
    pub batch: EmbeddingBatch,
}

/// Which data kind each group of a head uses.
pub fn group_kinds(spec: &HeadSpec, d: usize, c: usize) -> Result<Vec<DataKind>> {
    Ok(match &spec.kind {
        HeadKind::Mlp => vec![DataKind::Mlp],
        HeadKind::SelfAttention | HeadKind::SaBlockdiag => vec![DataKind::SelfAttention],
        HeadKind::Mixer => vec![DataKind::Mixer],
        HeadKind::Fno => vec![DataKind::Fno],
        HeadKind::Generic(_) => vec![DataKind::Generic],
        HeadKind::Bfno => {
            let b = spec.blocks;
            if b == 0 || !d.is_multiple_of(b) || !c.is_multiple_of(b) {
                return Err(Error::InvalidArgument(format!("B = {b} must divide d = {d} and c = {c}")));
            }
            (0..b).map(|block| DataKind::Bfno { block, blocks: b }).collect()
        }
    })
}

fn build_groups(spec: &HeadSpec, batch: &EmbeddingBatch) -> Result<Vec<Group>> {
    let (s, d, c) = (batch.s, batch.d, batch.c);
    let grid = spec.grid_for(s);
    if grid.len() != s {
        return Err(shape(format!("grid {}x{} does not cover s = {s}", grid.h, grid.w)));
    }
    let mix = match &spec.kind {
        HeadKind::Generic(h) => Some(*h),
        _ => None,
    };
    let one = Mat::from_element(1, 1, 1.0);
    if spec.kind == HeadKind::SaBlockdiag {
        if spec.activation != Activation::Linear {
            return Err(Error::InvalidArgument("block-diagonal attention is a linear head".into()));
        }
        let parts = detect_gram_blocks(&batch.xs, 1e-10);
        return Ok(parts
            .into_iter()
            .map(|part| {
                let blocks: Vec<Mat> = batch.xs.iter().map(|x| kron(&x.select_columns(&part), x)).collect();
                Group {
                    data: EffectiveData::from_blocks(DataKind::SelfAttention, &blocks),
                    readouts: batch.xs.iter().map(|x| x.select_columns(&part)).collect(),
                    col_start: 0,
                    col_width: c,
                    features: Some(part),
                }
            })
            .collect());
    }
    let kinds = group_kinds(spec, d, c)?;
    let width = c / kinds.len();
    kinds
        .into_iter()
        .enumerate()
        .map(|(g, kind)| {
            let blocks = batch.xs.iter().map(|x| sample_block(kind, x, mix, grid)).collect::<Result<Vec<_>>>()?;
            let readouts = batch
                .xs
                .iter()
                .map(|x| match kind {
                    DataKind::SelfAttention => x.clone(),
                    DataKind::Mixer => Mat::identity(d, d),
                    _ => one.clone(),
                })
                .collect();
            Ok(Group {
                data: EffectiveData::from_blocks(kind, &blocks),
                readouts,
                col_start: g * width,
                col_width: width,
                features: None,
            })
        })
        .collect()
}

impl Problem {
    /// Linear heads (one dense variable per group).
    pub fn new(spec: HeadSpec, batch: &EmbeddingBatch) -> Result<Problem> {
        if spec.activation != Activation::Linear {
            return Err(Error::InvalidArgument(format!("{} head needs an arrangement set", spec.activation.name())));
        }
        Self::assemble(spec, batch, Vec::new())
    }

    /// ReLU or gated heads with one arrangement set per group.
    pub fn with_arrangements(spec: HeadSpec, batch: &EmbeddingBatch, arrangements: Vec<ArrangementSet>) -> Result<Problem> {
        Self::assemble(spec, batch, arrangements)
    }

    /// Linear heads directly; ReLU heads with a complete 2-D sweep; gated heads with `m` Gaussian gates.
    pub fn build(spec: HeadSpec, batch: &EmbeddingBatch, seed: u64) -> Result<Problem> {
        match spec.activation {
            Activation::Linear => Self::new(spec, batch),
            Activation::Relu => Self::with_mode(spec, batch, ArrangementMode::Exhaustive, 0, seed),
            Activation::GatedRelu => Self::with_mode(spec, batch, ArrangementMode::Gated, 0, seed),
        }
    }

    pub fn with_mode(spec: HeadSpec, batch: &EmbeddingBatch, mode: ArrangementMode, budget: usize, seed: u64) -> Result<Problem> {
        let groups = build_groups(&spec, batch)?;
        let mut sets = Vec::with_capacity(groups.len());
        for (g, group) in groups.iter().enumerate() {
            let set = match mode {
                ArrangementMode::Gated => {
                    let mut rng = seeded(seed.wrapping_add(g as u64));
                    let gates: Vec<Vector> = (0..spec.m.max(1)).map(|_| gaussian_vec(&mut rng, group.p())).collect();
                    gates_to_arrangements(&gates, &group.data)?
                }
                _ => enumerate_arrangements(&group.data, mode, budget, seed.wrapping_add(g as u64))?,
            };
            sets.push(set);
        }
        Self::assemble(spec, batch, sets)
    }

    fn assemble(spec: HeadSpec, batch: &EmbeddingBatch, arrangements: Vec<ArrangementSet>) -> Result<Problem> {
        batch.validate()?;
        if spec.beta < 0.0 || !spec.beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be finite and >= 0".into()));
        }
        let groups = build_groups(&spec, batch)?;
        let mut slots = Vec::new();
        match spec.activation {
            Activation::Linear => {
                if !arrangements.is_empty() {
                    return Err(Error::InvalidArgument("linear heads take no arrangements".into()));
                }
                slots.extend((0..groups.len()).map(|group| Slot { group, mask: None }));
            }
            Activation::Relu | Activation::GatedRelu => {
                if arrangements.len() != groups.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} arrangement sets for {} groups",
                        arrangements.len(),
                        groups.len()
                    )));
                }
                for (g, (group, set)) in groups.iter().zip(&arrangements).enumerate() {
                    if set.kind != group.data.kind {
                        return Err(Error::ArrangementKind { expected: group.data.kind.name(), got: set.kind.name() });
                    }
                    if set.rows != group.data.rows() || set.cols != group.p() {
                        return Err(shape("arrangement set was built on different data"));
                    }
                    let gated = set.mode == ArrangementMode::Gated;
                    if gated != (spec.activation == Activation::GatedRelu) {
                        return Err(Error::ArrangementKind {
                            expected: if gated { "relu arrangements".into() } else { "gates".into() },
                            got: set.mode.name().into(),
                        });
                    }
                    slots.extend(set.masks.iter().map(|m| Slot { group: g, mask: Some(m.clone()) }));
                }
            }
        }
        Ok(Problem {
            spec,
            n: batch.n,
            s: batch.s,
            d: batch.d,
            c: batch.c,
            groups,
            slots,
            arrangements,
            targets: batch.ys.clone(),
            batch: batch.clone(),
        })
    }

    pub fn slot_shape(&self, slot: usize) -> (usize, usize) {
        self.groups[self.slots[slot].group].var_shape()
    }

    pub fn zeros(&self) -> Vec<Mat> {
        (0..self.slots.len()).map(|j| {
            let (r, c) = self.slot_shape(j);
            Mat::zeros(r, c)
        }).collect()
    }

    pub fn layout(&self, slot: usize) -> BlockLayout {
        let (rows, cols) = self.slot_shape(slot);
        let g = &self.groups[self.slots[slot].group];
        let block_rows = match g.data.kind {
            DataKind::SelfAttention => self.d,
            DataKind::Mixer => self.s,
            _ => rows,
        };
        BlockLayout { rows, cols, block_rows, block_cols: g.col_width }
    }

    /// ReLU program over an incomplete arrangement set.
    pub fn is_restricted(&self) -> bool {
        self.spec.activation == Activation::Relu && self.arrangements.iter().any(|a| !a.is_exact())
    }

    pub fn check_vars(&self, z: &[Mat]) -> Result<()> {
        if z.len() != self.slots.len() {
            return Err(shape(format!("{} variable blocks for {} slots", z.len(), self.slots.len())));
        }
        for (j, zj) in z.iter().enumerate() {
            if zj.shape() != self.slot_shape(j) {
                return Err(shape(format!("block {j} is {:?}, expected {:?}", zj.shape(), self.slot_shape(j))));
            }
        }
        Ok(())
    }

    /// Adds the contribution of `z` through group `g` with row mask `mask` to `preds`.
    pub fn group_forward(&self, g: usize, mask: Option<&[bool]>, z: &Mat, preds: &mut [Mat]) {
        let group = &self.groups[g];
        let (s, cw) = (self.s, group.col_width);
        for (i, pred) in preds.iter_mut().enumerate() {
            let mut m = group.sample_data(i) * z;
            if let Some(mask) = mask {
                let (start, len) = group.data.ranges[i];
                for (row, &on) in mask[start..start + len].iter().enumerate() {
                    if !on {
                        m.row_mut(row).fill(0.0);
                    }
                }
            }
            let w = &group.readouts[i];
            let mut out = pred.columns_mut(group.col_start, cw);
            for q in 0..w.ncols() {
                for t in 0..w.nrows() {
                    let coef = w[(t, q)];
                    if coef != 0.0 {
                        out += m.view((t * s, q * cw), (s, cw)) * coef;
                    }
                }
            }
        }
    }

    /// `sum_i E_i^T (D (.) (W_i (x) R_i))` for per-sample prediction gradients `R_i`.
    pub fn group_adjoint(&self, g: usize, mask: Option<&[bool]>, resid: &[Mat]) -> Mat {
        let group = &self.groups[g];
        let (p, cols) = group.var_shape();
        let mut acc = Mat::zeros(p, cols);
        for (i, r) in resid.iter().enumerate() {
            let r_g = r.columns(group.col_start, group.col_width).into_owned();
            let mut lifted = kron(&group.readouts[i], &r_g);
            if let Some(mask) = mask {
                let (start, len) = group.data.ranges[i];
                for (row, &on) in mask[start..start + len].iter().enumerate() {
                    if !on {
                        lifted.row_mut(row).fill(0.0);
                    }
                }
            }
            acc += group.sample_data(i).transpose() * lifted;
        }
        acc
    }

    /// [`Problem::group_forward`] for a rank-one variable `u v^T`.
    pub fn group_forward_rank1(&self, g: usize, mask: Option<&[bool]>, u: &Vector, v: &Vector, preds: &mut [Mat]) {
        let group = &self.groups[g];
        let (s, cw) = (self.s, group.col_width);
        for (i, pred) in preds.iter_mut().enumerate() {
            let mut h = group.sample_data(i) * u;
            if let Some(mask) = mask {
                let (start, len) = group.data.ranges[i];
                for (row, &on) in mask[start..start + len].iter().enumerate() {
                    if !on {
                        h[row] = 0.0;
                    }
                }
            }
            let w = &group.readouts[i];
            let mut out = pred.columns_mut(group.col_start, cw);
            for q in 0..w.ncols() {
                let vq = v.rows(q * cw, cw);
                for t in 0..w.nrows() {
                    let coef = w[(t, q)];
                    if coef != 0.0 {
                        out.ger(coef, &h.rows(t * s, s), &vq, 1.0);
                    }
                }
            }
        }
    }

    /// `(A v, A^T u)` for `A = group_adjoint(g, mask, resid)` without forming `A`.
    pub fn group_adjoint_rank1(&self, g: usize, mask: Option<&[bool]>, resid: &[Mat], u: &Vector, v: &Vector) -> (Vector, Vector) {
        let group = &self.groups[g];
        let (s, cw) = (self.s, group.col_width);
        let (p, cols) = group.var_shape();
        let mut du = Vector::zeros(p);
        let mut dv = Vector::zeros(cols);
        for (i, r) in resid.iter().enumerate() {
            let r_g = r.columns(group.col_start, cw);
            let e = group.sample_data(i);
            let w = &group.readouts[i];
            let mut h = e * u;
            let mut lv = Vector::zeros(e.nrows());
            for t in 0..w.nrows() {
                for q in 0..w.ncols() {
                    let coef = w[(t, q)];
                    if coef != 0.0 {
                        let mut seg = lv.rows_mut(t * s, s);
                        seg.gemv(coef, &r_g, &v.rows(q * cw, cw), 1.0);
                    }
                }
            }
            if let Some(mask) = mask {
                let (start, len) = group.data.ranges[i];
                for (row, &on) in mask[start..start + len].iter().enumerate() {
                    if !on {
                        lv[row] = 0.0;
                        h[row] = 0.0;
                    }
                }
            }
            du.gemv_tr(1.0, &e, &lv, 1.0);
            for q in 0..w.ncols() {
                let mut seg = dv.rows_mut(q * cw, cw);
                for t in 0..w.nrows() {
                    let coef = w[(t, q)];
                    if coef != 0.0 {
                        seg.gemv_tr(coef, &r_g, &h.rows(t * s, s), 1.0);
                    }
                }
            }
        }
        (du, dv)
    }

    pub fn predict(&self, z: &[Mat]) -> Vec<Mat> {
        let mut preds = vec![Mat::zeros(self.s, self.c); self.n];
        for (slot, zj) in self.slots.iter().zip(z) {
            self.group_forward(slot.group, slot.mask.as_deref(), zj, &mut preds);
        }
        preds
    }

    /// Loss and per-sample prediction gradients.
    pub fn loss_and_residuals(&self, preds: &[Mat]) -> (f64, Vec<Mat>) {
        let mut total = 0.0;
        let mut resid = Vec::with_capacity(preds.len());
        for (yhat, y) in preds.iter().zip(&self.targets) {
            let (v, g) = loss_value_and_grad(self.spec.loss, yhat, y);
            total += v;
            resid.push(g);
        }
        (total, resid)
    }

    pub fn loss(&self, z: &[Mat]) -> f64 {
        self.loss_and_residuals(&self.predict(z)).0
    }

    pub fn loss_and_grad(&self, z: &[Mat]) -> (f64, Vec<Mat>) {
        let (loss, resid) = self.loss_and_residuals(&self.predict(z));
        let grads = self.slots.iter().map(|slot| self.group_adjoint(slot.group, slot.mask.as_deref(), &resid)).collect();
        (loss, grads)
    }

    pub fn reg_dense(&self, z: &[Mat]) -> f64 {
        self.spec.beta * z.iter().map(nuclear_norm).sum::<f64>()
    }

    pub fn objective(&self, vars: &ConvexVars) -> Result<ObjectiveValue> {
        let dense = vars.to_dense();
        self.check_vars(&dense)?;
        let loss = self.loss(&dense);
        let (reg, relaxed) = match vars {
            ConvexVars::Dense(z) => (self.reg_dense(z), self.spec.activation == Activation::Relu),
            ConvexVars::Factored(f) => (0.5 * self.spec.beta * f.iter().map(|b| b.frob_sq()).sum::<f64>(), false),
        };
        Ok(ObjectiveValue { loss, reg, total: loss + reg, restricted: self.is_restricted(), relaxed_reg: relaxed })
    }

    /// Squared-loss design: `loss = 1/2 ||Phi vec(z) - y||^2` with the slot
    /// variables vectorized column-major and concatenated.
    pub fn squared_design(&self) -> (Mat, Vector) {
        let pooled = self.targets[0].nrows() == 1 && self.s > 1;
        let out_rows = if pooled { 1 } else { self.s };
        let per = out_rows * self.c;
        let sizes: Vec<usize> = (0..self.slots.len()).map(|j| {
            let (a, b) = self.slot_shape(j);
            a * b
        }).collect();
        let total: usize = sizes.iter().sum();
        let mut phi = Mat::zeros(self.n * per, total);
        let mut col = 0;
        for (j, slot) in self.slots.iter().enumerate() {
            let (a, b) = self.slot_shape(j);
            for idx in 0..a * b {
                let mut z = Mat::zeros(a, b);
                z[(idx % a, idx / a)] = 1.0;
                let mut preds = vec![Mat::zeros(self.s, self.c); self.n];
                self.group_forward(slot.group, slot.mask.as_deref(), &z, &mut preds);
                for (i, yhat) in preds.iter().enumerate() {
                    let flat = if pooled { Mat::from_row_slice(1, self.c, &crate::data::pool_rows(yhat)) } else { yhat.clone() };
                    for (k, v) in flat.iter().enumerate() {
                        phi[(i * per + k, col)] = *v;
                    }
                }
                col += 1;
            }
        }
        let mut y = Vector::zeros(self.n * per);
        for (i, t) in self.targets.iter().enumerate() {
            for (k, v) in t.iter().enumerate() {
                y[i * per + k] = *v;
            }
        }
        (phi, y)
    }

    /// Inverse of the vectorization used by [`Problem::squared_design`].
    pub fn unflatten(&self, flat: &[f64]) -> Vec<Mat> {
        let mut at = 0;
        (0..self.slots.len())
            .map(|j| {
                let (a, b) = self.slot_shape(j);
                let m = Mat::from_column_slice(a, b, &flat[at..at + a * b]);
                at += a * b;
                m
            })
            .collect()
    }

    pub fn flatten(z: &[Mat]) -> Vec<f64> {
        z.iter().flat_map(|m| m.iter().copied()).collect()
    }

    pub fn bm_rank(&self) -> Option<usize> {
        match self.spec.param {
            Parametrization::Bm(b) => Some(b),
            Parametrization::Dense => None,
        }
    }
}
