//! Browser bindings for three small pictures: the 2 x 2 slice of the
//! cone-constrained nuclear-norm ball, the arrangement sweep of planar data,
//! and singular values along the shrinkage path of `svt_prox`.

use wasm_bindgen::prelude::*;

use cvx_attn::arrangements::{cardinality_bound, enumerate_arrangements, ArrangementMode, DataKind, EffectiveData};
use cvx_attn::linalg::{Mat, Svd};
use cvx_attn::norms::{sample_constrained_ball, svt_prox, BallLabel};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Ball samples on the slice `Z[1,0] = 0`, flattened as `z1, z2, z4, extreme`
/// (1 for extreme points, 0 for hull points). `k` holds the constraint rows of
/// a `k_rows x 2` matrix; an empty slice means no constraint.
#[wasm_bindgen]
pub fn ball_samples(k: &[f64], count: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    if !k.len().is_multiple_of(2) {
        return Err(js_err("K needs two columns"));
    }
    let k = if k.is_empty() { Mat::zeros(1, 2) } else { Mat::from_row_slice(k.len() / 2, 2, k) };
    let samples = sample_constrained_ball(&k, 2, count, seed);
    let mut out = Vec::with_capacity(4 * samples.len());
    for s in samples {
        out.extend([s.z[(0, 0)], s.z[(0, 1)], s.z[(1, 1)], (s.label == BallLabel::Extreme) as u8 as f64]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub struct Sweep {
    rows: usize,
    masks: Vec<u8>,
    witnesses: Vec<f64>,
    bound: f64,
}

#[wasm_bindgen]
impl Sweep {
    pub fn count(&self) -> usize {
        self.witnesses.len() / 2
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Row-major `count x rows` activation flags.
    pub fn masks(&self) -> Vec<u8> {
        self.masks.clone()
    }

    /// One strictly interior direction per pattern, as `(x, y)` pairs.
    pub fn witnesses(&self) -> Vec<f64> {
        self.witnesses.clone()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

/// Every sign pattern `1{X u >= 0}` of the planar points `(x, y)` in `points`.
#[wasm_bindgen]
pub fn sweep(points: &[f64]) -> Result<Sweep, JsError> {
    if points.is_empty() || !points.len().is_multiple_of(2) {
        return Err(js_err("points come in (x, y) pairs"));
    }
    let rows = points.len() / 2;
    let data = EffectiveData { kind: DataKind::Mlp, matrix: Mat::from_row_slice(rows, 2, points), ranges: vec![(0, rows)] };
    let set = enumerate_arrangements(&data, ArrangementMode::Exhaustive, 0, 0).map_err(js_err)?;
    let masks = set.masks.iter().flatten().map(|&b| b as u8).collect();
    let witnesses = set.witnesses.iter().flat_map(|w| [w[0], w[1]]).collect();
    Ok(Sweep { rows, masks, witnesses, bound: cardinality_bound(set.rank.max(1), rows) })
}

/// Singular values of `svt_prox(A, tau)` for each `tau`, `min(rows, cols)`
/// per threshold, largest first.
#[wasm_bindgen]
pub fn svt_path(a: &[f64], rows: usize, cols: usize, taus: &[f64]) -> Result<Vec<f64>, JsError> {
    if rows * cols != a.len() || rows == 0 || cols == 0 {
        return Err(js_err("A must hold rows * cols entries"));
    }
    let a = Mat::from_row_slice(rows, cols, a);
    let k = rows.min(cols);
    let mut out = Vec::with_capacity(k * taus.len());
    for &tau in taus {
        let s = Svd::new(&svt_prox(&a, tau.max(0.0))).s;
        out.extend((0..k).map(|i| s.get(i).copied().unwrap_or(0.0)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_shrinks_every_value_by_tau() {
        let a = [3.0, 0.0, 0.0, 1.0];
        let s = svt_path(&a, 2, 2, &[0.0, 0.5, 2.0]).unwrap();
        assert_eq!(s, vec![3.0, 1.0, 2.5, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn opposite_points_have_two_patterns() {
        let sw = sweep(&[1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(sw.count(), 2);
        assert!(sw.count() as f64 <= sw.bound());
    }

    #[test]
    fn four_values_per_ball_sample() {
        let out = ball_samples(&[1.0, 0.0, 0.0, 1.0], 50, 3).unwrap();
        assert_eq!(out.len(), 200);
    }
}
