//! Dense linear algebra used to state every head: column-major `vec`,
//! Kronecker products, commutation matrices, circulant token stacks, Gram
//! matrices and a Fourier-domain FNO forward used as an oracle against the
//! circulant form.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{shape, Error, Result};
use crate::heads::Activation;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type CMat = DMatrix<Complex<f64>>;

/// Column-major vectorization.
pub fn vec(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`]: consecutive chunks of length `rows` become columns.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Mat {
    assert_eq!(v.len(), rows * cols, "unvec length");
    Mat::from_column_slice(rows, cols, v)
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// The (c, s) commutation matrix: `K * vec(V) == vec(V^T)` for `V` of shape s x c.
pub fn commutation_matrix(c: usize, s: usize) -> Mat {
    let n = c * s;
    let mut k = Mat::zeros(n, n);
    for i in 0..s {
        for j in 0..c {
            k[(i * c + j, j * s + i)] = 1.0;
        }
    }
    k
}

/// Token layout for circulant shifts and 2-D DFTs. `h * w` tokens, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    /// A 1 x s strip; shifts reduce to plain cyclic shifts of the token index.
    pub fn line(s: usize) -> Self {
        TokenGrid { h: 1, w: s }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of token `t` shifted by `u` (componentwise, modulo the grid).
    pub fn shift(&self, t: usize, u: usize) -> usize {
        let (th, tw) = (t / self.w, t % self.w);
        let (uh, uw) = (u / self.w, u % self.w);
        ((th + uh) % self.h) * self.w + (tw + uw) % self.w
    }
}

/// All `s` circular token shifts side by side: block `u` of columns holds
/// `X[(t + u) mod s, :]` in row `t`.
pub fn circ(x: &Mat) -> Mat {
    circ_grid(x, TokenGrid::line(x.nrows()))
}

/// Circulant stack over a 2-D token grid (shifts act on both grid axes).
pub fn circ_grid(x: &Mat, grid: TokenGrid) -> Mat {
    let (s, d) = x.shape();
    assert_eq!(grid.len(), s, "grid does not match token count");
    let mut out = Mat::zeros(s, s * d);
    for t in 0..s {
        for u in 0..s {
            let src = grid.shift(t, u);
            for k in 0..d {
                out[(t, u * d + k)] = x[(src, k)];
            }
        }
    }
    out
}

pub fn gram(x: &Mat) -> Mat {
    x.transpose() * x
}

/// Finest partition of feature indices such that every Gram matrix vanishes
/// (up to `tol`) across parts. Parts are ordered by their smallest index.
pub fn detect_gram_blocks(xs: &[Mat], tol: f64) -> Vec<Vec<usize>> {
    let d = xs.first().map(|x| x.ncols()).unwrap_or(0);
    let mut parent: Vec<usize> = (0..d).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for x in xs {
        let g = gram(x);
        for k in 0..d {
            for l in (k + 1)..d {
                if g[(k, l)].abs() > tol {
                    let (a, b) = (find(&mut parent, k), find(&mut parent, l));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut parts: Vec<Vec<usize>> = Vec::new();
    let mut root_to_part = vec![usize::MAX; d];
    for k in 0..d {
        let r = find(&mut parent, k);
        if root_to_part[r] == usize::MAX {
            root_to_part[r] = parts.len();
            parts.push(Vec::new());
        }
        parts[root_to_part[r]].push(k);
    }
    parts
}

/// Thin SVD with singular values sorted descending and a deterministic sign:
/// the largest-magnitude entry of every left singular vector is positive.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub v: Mat,
}

impl Svd {
    pub fn new(a: &Mat) -> Svd {
        let (m, n) = a.shape();
        let k = m.min(n);
        if k == 0 {
            return Svd { u: Mat::zeros(m, 0), s: Vec::new(), v: Mat::zeros(n, 0) };
        }
        let (u, sv, v) = if m >= n {
            jacobi_svd(a.clone())
        } else {
            let (v, sv, u) = jacobi_svd(a.transpose());
            (u, sv, v)
        };
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
        let mut out_u = Mat::zeros(m, k);
        let mut out_v = Mat::zeros(n, k);
        let mut s = Vec::with_capacity(k);
        for (dst, &src) in order.iter().enumerate() {
            let mut col_u = u.column(src).into_owned();
            let mut col_v = v.column(src).into_owned();
            let pivot = col_u.iter().fold(0.0f64, |best, &x| if x.abs() > best.abs() { x } else { best });
            if pivot < 0.0 {
                col_u.neg_mut();
                col_v.neg_mut();
            }
            out_u.set_column(dst, &col_u);
            out_v.set_column(dst, &col_v);
            s.push(sv[src]);
        }
        Svd { u: out_u, s, v: out_v }
    }

    pub fn rank(&self, tol: f64) -> usize {
        let top = self.s.first().copied().unwrap_or(0.0);
        self.s.iter().filter(|&&x| x > tol * top.max(1.0)).count()
    }

    /// Rebuild `U diag(f(s)) V^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Mat {
        let mut us = self.u.clone();
        for (j, &sj) in self.s.iter().enumerate() {
            let w = f(sj);
            us.column_mut(j).scale_mut(w);
        }
        us * self.v.transpose()
    }
}

/// One-sided (Hestenes) Jacobi SVD of a tall matrix: `(U, s, V)` with
/// `a = U diag(s) V^T`. Columns of `U` belonging to zero singular values are
/// completed to an orthonormal set.
fn jacobi_svd(mut a: Mat) -> (Mat, Vec<f64>, Mat) {
    let (m, n) = a.shape();
    let mut v = Mat::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = a.column(i).norm_squared();
                let beta = a.column(j).norm_squared();
                let gamma = a.column(i).dot(&a.column(j));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for r in 0..mat.nrows() {
                        let (x, y) = (mat[(r, i)], mat[(r, j)]);
                        mat[(r, i)] = c * x - s * y;
                        mat[(r, j)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sv: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let top = sv.iter().copied().fold(0.0, f64::max);
    let mut u = Mat::zeros(m, n);
    let mut missing = Vec::new();
    for j in 0..n {
        if sv[j] > top * 1e-300_f64.max(f64::MIN_POSITIVE) && sv[j] > 0.0 {
            u.set_column(j, &(a.column(j) / sv[j]));
        } else {
            missing.push(j);
        }
    }
    // Complete with canonical vectors orthogonalized against what is there.
    let mut e = 0;
    for j in missing {
        while e < m {
            let mut cand = Vector::zeros(m);
            cand[e] = 1.0;
            e += 1;
            for _ in 0..2 {
                for k in 0..n {
                    let col = u.column(k).into_owned();
                    let proj = col.dot(&cand);
                    cand -= col * proj;
                }
            }
            let nrm = cand.norm();
            if nrm > 1e-8 {
                u.set_column(j, &(cand / nrm));
                break;
            }
        }
    }
    (u, sv, v)
}

pub fn spectral_norm(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    Svd::new(a).s.first().copied().unwrap_or(0.0)
}

/// Orthonormal basis (columns) for the row space of `a`.
pub fn row_space_basis(a: &Mat, rel_tol: f64) -> Mat {
    let svd = Svd::new(a);
    let top = svd.s.first().copied().unwrap_or(0.0);
    let r = svd.s.iter().filter(|&&x| top > 0.0 && x > rel_tol * top).count();
    svd.v.columns(0, r).into_owned()
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn lstsq(a: &Mat, b: &Mat) -> Mat {
    let svd = Svd::new(a);
    let top = svd.s.first().copied().unwrap_or(0.0);
    let cut = top * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    let utb = svd.u.transpose() * b;
    let mut scaled = utb;
    for (j, &sj) in svd.s.iter().enumerate() {
        let w = if sj > cut { 1.0 / sj } else { 0.0 };
        scaled.row_mut(j).scale_mut(w);
    }
    &svd.v * scaled
}

/// Unitary DFT matrix of size n.
pub fn dft_matrix(n: usize) -> CMat {
    let norm = 1.0 / (n as f64).sqrt();
    CMat::from_fn(n, n, |t, a| {
        let angle = -2.0 * std::f64::consts::PI * ((t * a) % n) as f64 / n as f64;
        Complex::new(angle.cos(), angle.sin()) * norm
    })
}

/// 2-D unitary DFT on a token grid, `F_h (x) F_w`.
pub fn dft_grid(grid: TokenGrid) -> CMat {
    dft_matrix(grid.h).kronecker(&dft_matrix(grid.w))
}

/// Per-token Fourier weights `V` from real spatial weights `L` (`s` blocks of d x d).
/// Scaled so that the Fourier forward equals the circulant form with the same `L`.
pub fn lift_spatial_weights(l: &[Mat], grid: TokenGrid) -> Vec<CMat> {
    let s = grid.len();
    assert_eq!(l.len(), s, "one spatial block per token");
    let f = dft_grid(grid);
    let root = (s as f64).sqrt();
    (0..s)
        .map(|t| {
            let (r, c) = l[0].shape();
            let mut v = CMat::zeros(r, c);
            for (u, lu) in l.iter().enumerate() {
                let coeff = f[(t, u)].conj() * root;
                v += lu.map(|x| Complex::new(x, 0.0)) * coeff;
            }
            v
        })
        .collect()
}

/// FNO block evaluated in the Fourier domain: DFT over tokens, per-token
/// d x d multiply, inverse DFT, then `act(. W1) W2`.
pub fn fno_fourier_forward(
    x: &Mat,
    v: &[CMat],
    w1: &Mat,
    w2: &Mat,
    activation: Activation,
    grid: TokenGrid,
) -> Result<Mat> {
    let (s, d) = x.shape();
    if grid.len() != s || v.len() != s {
        return Err(shape(format!("grid {}x{} / {} weight blocks for {} tokens", grid.h, grid.w, v.len(), s)));
    }
    if w1.nrows() != d || w2.nrows() != w1.ncols() {
        return Err(shape("W1 must be d x m and W2 m x c"));
    }
    let f = dft_grid(grid);
    let fx = &f * x.map(|a| Complex::new(a, 0.0));
    let mut mixed = CMat::zeros(s, d);
    for t in 0..s {
        if v[t].shape() != (d, d) {
            return Err(shape("Fourier weight blocks must be d x d"));
        }
        let row = fx.row(t) * &v[t];
        mixed.set_row(t, &row);
    }
    let back = f.adjoint() * mixed;
    let residue = back.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    if residue > 1e-8 {
        return Err(Error::NonReal(residue));
    }
    let real = back.map(|z| z.re);
    let pre = real * w1;
    let act = match activation {
        Activation::Linear => pre,
        Activation::Relu => pre.map(|a| a.max(0.0)),
        Activation::GatedRelu => {
            return Err(Error::InvalidArgument("gated activation needs explicit gates".into()))
        }
    };
    Ok(act * w2)
}

/// Circulant-form FNO with the full spatial weights kept separate:
/// `act(circ(X) L W1) W2`, with `L` the vertical stack of the `s` blocks.
pub fn fno_circ_forward(x: &Mat, l: &[Mat], w1: &Mat, w2: &Mat, activation: Activation, grid: TokenGrid) -> Mat {
    let d = x.ncols();
    let stacked = Mat::from_fn(l.len() * d, d, |r, c| l[r / d][(r % d, c)]);
    let pre = circ_grid(x, grid) * stacked * w1;
    let act = match activation {
        Activation::Relu => pre.map(|a| a.max(0.0)),
        _ => pre,
    };
    act * w2
}

/// The same FNO written as an explicit sum over shifted copies of `X`.
pub fn fno_shift_forward(x: &Mat, l: &[Mat], w1: &Mat, w2: &Mat, activation: Activation, grid: TokenGrid) -> Mat {
    let (s, d) = x.shape();
    let mut acc = Mat::zeros(s, d);
    for (u, lu) in l.iter().enumerate() {
        let shifted = Mat::from_fn(s, d, |t, k| x[(grid.shift(t, u), k)]);
        acc += shifted * lu;
    }
    let pre = acc * w1;
    let act = match activation {
        Activation::Relu => pre.map(|a| a.max(0.0)),
        _ => pre,
    };
    act * w2
}

pub fn frob_sq(m: &Mat) -> f64 {
    m.iter().map(|x| x * x).sum()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}
