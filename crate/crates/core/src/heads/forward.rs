//! Forward maps of the convex heads written term by term, independent of the
//! lifted engine in `problem.rs`; the two are cross-checked in tests.

use crate::arrangements::{ArrangementSet, DataKind};
use crate::data::EmbeddingBatch;
use crate::error::{shape, Error, Result};
use crate::linalg::{circ_grid, gram, kron, Mat, TokenGrid};

use super::MixFn;

fn check_kind(arr: &ArrangementSet, want: DataKind) -> Result<()> {
    if arr.kind != want {
        return Err(Error::ArrangementKind { expected: want.name(), got: arr.kind.name() });
    }
    Ok(())
}

fn mask_slice(arr: &ArrangementSet, j: usize, i: usize, per: usize) -> &[bool] {
    &arr.masks[j][i * per..(i + 1) * per]
}

fn check_shape(z: &Mat, rows: usize, cols: usize, what: &str) -> Result<()> {
    if z.shape() != (rows, cols) {
        return Err(shape(format!("{what}: expected {rows}x{cols}, got {}x{}", z.nrows(), z.ncols())));
    }
    Ok(())
}

/// `Z^{(k,l)}`: rows `k*d..`, columns `l*c..`.
fn sa_block(z: &Mat, d: usize, c: usize, k: usize, l: usize) -> Mat {
    z.view((k * d, l * c), (d, c)).into_owned()
}

/// Linear attention via the contraction `Y_i = X_i M(Z, G_i)`, `M = sum_{k,l} G_i[k,l] Z^{(k,l)}`.
pub fn forward_sa_linear(batch: &EmbeddingBatch, z: &Mat) -> Result<Vec<Mat>> {
    let (d, c) = (batch.d, batch.c);
    check_shape(z, d * d, d * c, "attention Z")?;
    Ok(batch
        .xs
        .iter()
        .map(|x| {
            let g = gram(x);
            let mut m = Mat::zeros(d, c);
            for k in 0..d {
                for l in 0..d {
                    m += sa_block(z, d, c, k, l) * g[(k, l)];
                }
            }
            x * m
        })
        .collect())
}

/// Linear attention as the Gram-weighted double sum `sum_{k,l} G_i[k,l] X_i Z^{(k,l)}`.
pub fn forward_sa_linear_double_sum(batch: &EmbeddingBatch, z: &Mat) -> Result<Vec<Mat>> {
    let (d, c) = (batch.d, batch.c);
    check_shape(z, d * d, d * c, "attention Z")?;
    Ok(batch
        .xs
        .iter()
        .map(|x| {
            let g = gram(x);
            let mut y = Mat::zeros(batch.s, c);
            for k in 0..d {
                for l in 0..d {
                    y += x * sa_block(z, d, c, k, l) * g[(k, l)];
                }
            }
            y
        })
        .collect())
}

/// Block-separated attention; `blocks[b]` is `d_b d x d_b c` for part `partition[b]`.
pub fn forward_sa_blockdiag(batch: &EmbeddingBatch, blocks: &[Mat], partition: &[Vec<usize>], tol: f64) -> Result<Vec<Mat>> {
    let (d, c) = (batch.d, batch.c);
    if blocks.len() != partition.len() {
        return Err(shape("one variable block per part"));
    }
    let mut owner = vec![usize::MAX; d];
    for (b, part) in partition.iter().enumerate() {
        for &k in part {
            owner[k] = b;
        }
    }
    if owner.contains(&usize::MAX) {
        return Err(Error::InvalidArgument("partition does not cover every feature".into()));
    }
    for x in &batch.xs {
        let g = gram(x);
        for k in 0..d {
            for l in 0..d {
                if owner[k] != owner[l] && g[(k, l)].abs() > tol {
                    return Err(Error::Partition { k, l, value: g[(k, l)] });
                }
            }
        }
    }
    for (zb, part) in blocks.iter().zip(partition) {
        check_shape(zb, part.len() * d, part.len() * c, "block Z")?;
    }
    Ok(batch
        .xs
        .iter()
        .map(|x| {
            let g = gram(x);
            let mut y = Mat::zeros(batch.s, c);
            for (zb, part) in blocks.iter().zip(partition) {
                for (kk, &k) in part.iter().enumerate() {
                    for (ll, &l) in part.iter().enumerate() {
                        y += x * sa_block(zb, d, c, kk, ll) * g[(k, l)];
                    }
                }
            }
            y
        })
        .collect())
}

/// ReLU attention with `G_{i,j}^{(k,l)} = sum_t X_i[t,k] X_i[t,l] D_j^{(i,t)}`.
pub fn forward_sa_relu(batch: &EmbeddingBatch, arr: &ArrangementSet, zs: &[Mat]) -> Result<Vec<Mat>> {
    check_kind(arr, DataKind::SelfAttention)?;
    let (s, d, c) = (batch.s, batch.d, batch.c);
    if zs.len() != arr.len() {
        return Err(shape("one Z per arrangement"));
    }
    let mut out = Vec::with_capacity(batch.n);
    for (i, x) in batch.xs.iter().enumerate() {
        let mut y = Mat::zeros(s, c);
        for (j, z) in zs.iter().enumerate() {
            check_shape(z, d * d, d * c, "attention Z_j")?;
            let mask = mask_slice(arr, j, i, s * s);
            for k in 0..d {
                for l in 0..d {
                    let mut gkl = Mat::zeros(s, s);
                    for t in 0..s {
                        let w = x[(t, k)] * x[(t, l)];
                        for o in 0..s {
                            if mask[t * s + o] {
                                gkl[(o, o)] += w;
                            }
                        }
                    }
                    y += gkl * x * sa_block(z, d, c, k, l);
                }
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// ReLU attention with `G_{i,j} = (X_i (x) I_s)^T D_j^{(i)} (X_i (x) I_s)` formed explicitly.
pub fn forward_sa_relu_kron(batch: &EmbeddingBatch, arr: &ArrangementSet, zs: &[Mat]) -> Result<Vec<Mat>> {
    check_kind(arr, DataKind::SelfAttention)?;
    let (s, d, c) = (batch.s, batch.d, batch.c);
    let mut out = Vec::with_capacity(batch.n);
    for (i, x) in batch.xs.iter().enumerate() {
        let lift = kron(x, &Mat::identity(s, s));
        let mut y = Mat::zeros(s, c);
        for (j, z) in zs.iter().enumerate() {
            let mask = mask_slice(arr, j, i, s * s);
            let dm = Mat::from_diagonal(&crate::linalg::Vector::from_iterator(s * s, mask.iter().map(|&b| b as u8 as f64)));
            let g = lift.transpose() * dm * &lift;
            for k in 0..d {
                for l in 0..d {
                    let gkl = g.view((k * s, l * s), (s, s));
                    y += gkl * x * sa_block(z, d, c, k, l);
                }
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// Token-row stacking `(X[0,:], X[1,:], ...)`, the vectorization the mixer blocks act on.
fn token_rows(x: &Mat) -> crate::linalg::Vector {
    crate::linalg::Vector::from_iterator(x.len(), (0..x.nrows()).flat_map(|t| (0..x.ncols()).map(move |k| x[(t, k)])))
}

/// Linear mixer, `Y_i[:, p] = Z^{(p)} vec(X_i)` with `Z^{(p)} = [Z^{(p,1)} ... Z^{(p,s)}]`
/// and block `(t, p)` of `Z` (s x d) at rows `t*s..`, columns `p*d..`.
pub fn forward_mixer_linear(batch: &EmbeddingBatch, z: &Mat) -> Result<Vec<Mat>> {
    let (s, d, c) = (batch.s, batch.d, batch.c);
    check_shape(z, s * s, d * c, "mixer Z")?;
    Ok(batch
        .xs
        .iter()
        .map(|x| {
            let v = token_rows(x);
            let mut y = Mat::zeros(s, c);
            for p in 0..c {
                let mut zp = Mat::zeros(s, s * d);
                for t in 0..s {
                    zp.view_mut((0, t * d), (s, d)).copy_from(&z.view((t * s, p * d), (s, d)));
                }
                y.set_column(p, &(zp * &v));
            }
            y
        })
        .collect())
}

/// Column permutation taking the block layout of [`forward_mixer_linear`] to the
/// permuted layout with `Z~^{(t,k)}` (s x c) at rows `t*s..`, columns `k*c..`.
pub fn mixer_permute(z: &Mat, s: usize, d: usize, c: usize) -> Mat {
    Mat::from_fn(s * s, d * c, |row, col| {
        let (k, p) = (col / c, col % c);
        z[(row, p * d + k)]
    })
}

pub fn mixer_unpermute(zt: &Mat, s: usize, d: usize, c: usize) -> Mat {
    Mat::from_fn(s * s, d * c, |row, col| {
        let (p, k) = (col / d, col % d);
        zt[(row, k * c + p)]
    })
}

/// Permuted linear mixer: `sum_{t,k} X_i[t,k] Z~^{(t,k)}`.
pub fn forward_mixer_linear_permuted(batch: &EmbeddingBatch, zt: &Mat) -> Result<Vec<Mat>> {
    let (s, d, c) = (batch.s, batch.d, batch.c);
    check_shape(zt, s * s, d * c, "mixer Z~")?;
    Ok(batch
        .xs
        .iter()
        .map(|x| {
            let mut y = Mat::zeros(s, c);
            for t in 0..s {
                for k in 0..d {
                    y += zt.view((t * s, k * c), (s, c)) * x[(t, k)];
                }
            }
            y
        })
        .collect())
}

/// ReLU mixer in block form: `Y_i[:, p] = sum_j [D^{(i,1)} Z_j^{(p,1)} ... D^{(i,d)} Z_j^{(p,d)}] vec(X_i)`
/// with `vec` column-major and `Z_j^{(p,k)}[o,t] = Z~_j[t*s + o, k*c + p]`.
pub fn forward_mixer_relu(batch: &EmbeddingBatch, arr: &ArrangementSet, zts: &[Mat]) -> Result<Vec<Mat>> {
    check_kind(arr, DataKind::Mixer)?;
    let (s, d, c) = (batch.s, batch.d, batch.c);
    if zts.len() != arr.len() {
        return Err(shape("one Z per arrangement"));
    }
    let mut out = Vec::with_capacity(batch.n);
    for (i, x) in batch.xs.iter().enumerate() {
        let v = crate::linalg::vec(x);
        let mut y = Mat::zeros(s, c);
        for (j, zt) in zts.iter().enumerate() {
            check_shape(zt, s * s, d * c, "mixer Z~_j")?;
            let mask = mask_slice(arr, j, i, s * d);
            for p in 0..c {
                let mut row_block = Mat::zeros(s, s * d);
                for k in 0..d {
                    let zpk = Mat::from_fn(s, s, |o, t| zt[(t * s + o, k * c + p)]);
                    let dk = Mat::from_fn(s, s, |a, b| if a == b && mask[k * s + a] { 1.0 } else { 0.0 });
                    row_block.view_mut((0, k * s), (s, s)).copy_from(&(dk * zpk));
                }
                let col = row_block * &v;
                let mut yp = y.column_mut(p);
                yp += col;
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// Permuted ReLU mixer: `sum_j sum_{t,k} X_i[t,k] D_j^{(i,k)} Z~_j^{(t,k)}`.
pub fn forward_mixer_relu_permuted(batch: &EmbeddingBatch, arr: &ArrangementSet, zts: &[Mat]) -> Result<Vec<Mat>> {
    check_kind(arr, DataKind::Mixer)?;
    let (s, d, c) = (batch.s, batch.d, batch.c);
    let mut out = Vec::with_capacity(batch.n);
    for (i, x) in batch.xs.iter().enumerate() {
        let mut y = Mat::zeros(s, c);
        for (j, zt) in zts.iter().enumerate() {
            let mask = mask_slice(arr, j, i, s * d);
            for t in 0..s {
                for k in 0..d {
                    let mut blk = zt.view((t * s, k * c), (s, c)).into_owned();
                    for o in 0..s {
                        if !mask[k * s + o] {
                            blk.row_mut(o).fill(0.0);
                        }
                    }
                    y += blk * x[(t, k)];
                }
            }
        }
        out.push(y);
    }
    Ok(out)
}

fn masked_direct(e: &Mat, zs: &[Mat], arr: Option<&ArrangementSet>, i: usize) -> Result<Mat> {
    let mut y: Option<Mat> = None;
    for (j, z) in zs.iter().enumerate() {
        if z.nrows() != e.ncols() {
            return Err(shape(format!("Z has {} rows, data has {} columns", z.nrows(), e.ncols())));
        }
        let mut term = e * z;
        if let Some(arr) = arr {
            let per = e.nrows();
            for (o, &on) in mask_slice(arr, j, i, per).iter().enumerate() {
                if !on {
                    term.row_mut(o).fill(0.0);
                }
            }
        }
        y = Some(match y {
            Some(acc) => acc + term,
            None => term,
        });
    }
    y.ok_or_else(|| shape("no variables"))
}

/// FNO: `circ(X_i) Z` (linear) or `sum_j D_j^{(i)} circ(X_i) Z_j` with arrangements.
pub fn forward_fno(batch: &EmbeddingBatch, zs: &[Mat], arr: Option<&ArrangementSet>, grid: TokenGrid) -> Result<Vec<Mat>> {
    if let Some(a) = arr {
        check_kind(a, DataKind::Fno)?;
        if a.len() != zs.len() {
            return Err(shape("one Z per arrangement"));
        }
    } else if zs.len() != 1 {
        return Err(shape("linear FNO takes a single Z"));
    }
    batch.xs.iter().enumerate().map(|(i, x)| masked_direct(&circ_grid(x, grid), zs, arr, i)).collect()
}

/// B-FNO: output column block `b` is the FNO of feature block `X_i^{(b)}` with `zs[b]`.
pub fn forward_bfno(
    batch: &EmbeddingBatch,
    zs: &[Vec<Mat>],
    arrs: Option<&[ArrangementSet]>,
    blocks: usize,
    grid: TokenGrid,
) -> Result<Vec<Mat>> {
    let (d, c) = (batch.d, batch.c);
    if blocks == 0 || d % blocks != 0 || c % blocks != 0 {
        return Err(Error::InvalidArgument(format!("B = {blocks} must divide d = {d} and c = {c}")));
    }
    if zs.len() != blocks {
        return Err(shape("one variable list per block"));
    }
    let (dw, cw) = (d / blocks, c / blocks);
    let mut out = vec![Mat::zeros(batch.s, c); batch.n];
    for b in 0..blocks {
        let arr = arrs.map(|a| &a[b]);
        if let Some(a) = arr {
            check_kind(a, DataKind::Bfno { block: b, blocks })?;
        }
        for (i, x) in batch.xs.iter().enumerate() {
            let xb = x.columns(b * dw, dw).into_owned();
            let yb = masked_direct(&circ_grid(&xb, grid), &zs[b], arr, i)?;
            if yb.ncols() != cw {
                return Err(shape("block Z must have c/B columns"));
            }
            out[i].columns_mut(b * cw, cw).copy_from(&yb);
        }
    }
    Ok(out)
}

/// Fixed-mixing head: `h(X_i) Z` (linear) or `sum_j D_j^{(i)} h(X_i) Z_j`.
pub fn forward_generic(batch: &EmbeddingBatch, h: MixFn, zs: &[Mat], arr: Option<&ArrangementSet>) -> Result<Vec<Mat>> {
    if let Some(a) = arr {
        check_kind(a, DataKind::Generic)?;
    }
    batch
        .xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let hx = h.apply(x);
            if hx.shape() != x.shape() {
                return Err(shape("mixing function must preserve shape"));
            }
            masked_direct(&hx, zs, arr, i)
        })
        .collect()
}
