//! Synthetic embedding batches: separable Gaussian classes, targets planted by
//! a random non-convex head, and inputs whose Gram matrices are block diagonal.

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingBatch, Provenance};
use crate::error::{Error, Result};
use crate::heads::{Activation, HeadKind, HeadSpec, Problem};
use crate::linalg::Mat;
use crate::nonconvex::{nc_forward, uv_to_neuron, NonconvexWeights};
use crate::rng::{gaussian_mat, gaussian_vec, normal, seeded, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "snake_case")]
pub enum Recipe {
    /// `k` classes; every token of a sample is its class mean plus unit noise,
    /// means placed `sep` apart on average. Targets are one-hot rows.
    GaussianClasses { k: usize, sep: f64 },
    /// Random inputs, targets from a random non-convex head of this kind.
    PlantedHead { kind: HeadKind, activation: Activation },
    /// `blocks` feature groups living on disjoint token sets, so every Gram
    /// matrix `X^T X` is block diagonal.
    BlockdiagGram { blocks: usize },
}

impl Recipe {
    pub fn name(&self) -> String {
        match self {
            Recipe::GaussianClasses { k, sep } => format!("gaussian_classes(k={k}, sep={sep})"),
            Recipe::PlantedHead { kind, activation } => {
                let spec = HeadSpec::new(kind.clone(), *activation, 0.0);
                format!("planted_head({}, {})", spec.kind_name(), activation.name())
            }
            Recipe::BlockdiagGram { blocks } => format!("blockdiag_gram(B={blocks})"),
        }
    }
}

/// Sample sizes for a synthetic batch. `c` is ignored by `gaussian_classes`
/// (one output per class); `m` and `blocks` only matter for planted heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthDims {
    pub n: usize,
    pub s: usize,
    pub d: usize,
    pub c: usize,
    pub m: usize,
    pub blocks: usize,
}

impl Default for SynthDims {
    fn default() -> Self {
        SynthDims { n: 60, s: 4, d: 6, c: 2, m: 4, blocks: 1 }
    }
}

pub fn generate(recipe: &Recipe, dims: SynthDims, seed: u64) -> Result<EmbeddingBatch> {
    if dims.n == 0 || dims.s == 0 || dims.d == 0 {
        return Err(Error::InvalidArgument("n, s and d must be positive".into()));
    }
    let batch = match recipe {
        Recipe::GaussianClasses { k, sep } => gaussian_classes(*k, *sep, dims, seed)?,
        Recipe::PlantedHead { kind, activation } => planted_head(kind, *activation, dims, seed)?.0,
        Recipe::BlockdiagGram { blocks } => blockdiag_gram(*blocks, dims, seed)?,
    };
    Ok(batch.with_provenance(Provenance::Synthetic { seed, recipe: recipe.name() }))
}

fn gaussian_classes(k: usize, sep: f64, dims: SynthDims, seed: u64) -> Result<EmbeddingBatch> {
    if k < 2 || !(sep.is_finite() && sep >= 0.0) {
        return Err(Error::InvalidArgument(format!("gaussian_classes needs k >= 2 and sep >= 0, got k = {k}, sep = {sep}")));
    }
    let mut rng = seeded(seed);
    // Independent directions of length sep / sqrt(2) sit about sep apart.
    let means: Vec<Mat> = (0..k)
        .map(|_| {
            let v = gaussian_vec(&mut rng, dims.d);
            let norm = v.norm().max(1e-12);
            Mat::from_row_slice(1, dims.d, (v * (sep / (2f64.sqrt() * norm))).as_slice())
        })
        .collect();
    let mut xs = Vec::with_capacity(dims.n);
    let mut ys = Vec::with_capacity(dims.n);
    for i in 0..dims.n {
        let class = i % k;
        let noise = gaussian_mat(&mut rng, dims.s, dims.d);
        xs.push(Mat::from_fn(dims.s, dims.d, |t, f| means[class][(0, f)] + noise[(t, f)]));
        let mut y = Mat::zeros(1, k);
        y[(0, class)] = 1.0;
        ys.push(y);
    }
    EmbeddingBatch::new(xs, ys)
}

/// Planted batch together with the weights that produced its targets.
pub fn planted_head(kind: &HeadKind, activation: Activation, dims: SynthDims, seed: u64) -> Result<(EmbeddingBatch, HeadSpec, NonconvexWeights)> {
    let kind = if *kind == HeadKind::SaBlockdiag { HeadKind::SelfAttention } else { kind.clone() };
    let spec = HeadSpec::new(kind, activation, 0.0).with_blocks(dims.blocks.max(1)).with_m(dims.m.max(1));
    let mut rng = seeded(seed);
    let xs: Vec<Mat> = (0..dims.n).map(|_| gaussian_mat(&mut rng, dims.s, dims.d)).collect();
    let placeholder: Vec<Mat> = (0..dims.n).map(|_| Mat::zeros(dims.s, dims.c)).collect();
    let batch = EmbeddingBatch::new(xs, placeholder)?;
    let mut lin = spec.clone();
    lin.activation = Activation::Linear;
    let shapes = Problem::new(lin, &batch)?;
    let mut wrng = substream(seed, 1);
    let mut weights = NonconvexWeights::default();
    for (g, group) in shapes.groups.iter().enumerate() {
        let (p, q) = group.var_shape();
        if activation == Activation::GatedRelu {
            weights.gates.push((0..spec.m).map(|_| gaussian_vec(&mut wrng, p)).collect());
        }
        for j in 0..spec.m {
            let u = gaussian_vec(&mut wrng, p) / (p as f64).sqrt();
            let v = gaussian_vec(&mut wrng, q);
            let gate = (activation == Activation::GatedRelu).then_some(j);
            weights.neurons.push(uv_to_neuron(&shapes, g, gate, &u, &v));
        }
    }
    let ys = nc_forward(&spec, &weights, &batch)?;
    Ok((batch.with_targets(ys)?, spec, weights))
}

fn blockdiag_gram(blocks: usize, dims: SynthDims, seed: u64) -> Result<EmbeddingBatch> {
    if blocks == 0 || blocks > dims.d || blocks > dims.s {
        return Err(Error::InvalidArgument(format!("blockdiag_gram needs 1 <= B <= min(s, d), got B = {blocks}")));
    }
    let mut rng = seeded(seed);
    // Feature f and token t belong to part f mod B and t mod B respectively.
    let mut xs = Vec::with_capacity(dims.n);
    let mut ys = Vec::with_capacity(dims.n);
    for _ in 0..dims.n {
        xs.push(Mat::from_fn(dims.s, dims.d, |t, f| if t % blocks == f % blocks { normal(&mut rng) } else { 0.0 }));
        ys.push(gaussian_mat(&mut rng, dims.s, dims.c));
    }
    EmbeddingBatch::new(xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::detect_gram_blocks;
    use crate::nonconvex::nc_objective;

    #[test]
    fn blockdiag_parts_detected() {
        let dims = SynthDims { n: 5, s: 4, d: 4, ..SynthDims::default() };
        let batch = generate(&Recipe::BlockdiagGram { blocks: 2 }, dims, 3).unwrap();
        assert_eq!(detect_gram_blocks(&batch.xs, 1e-12).len(), 2);
    }

    #[test]
    fn planted_attention_is_fit_exactly() {
        let dims = SynthDims { n: 4, s: 3, d: 2, c: 2, m: 2, blocks: 1 };
        let (batch, spec, w) = planted_head(&HeadKind::SelfAttention, Activation::Linear, dims, 0).unwrap();
        assert_eq!(nc_objective(&spec, &w, &batch).unwrap(), 0.0);
    }

    #[test]
    fn classes_are_balanced_one_hot() {
        let dims = SynthDims { n: 9, s: 2, d: 3, ..SynthDims::default() };
        let batch = generate(&Recipe::GaussianClasses { k: 3, sep: 5.0 }, dims, 0).unwrap();
        assert_eq!((batch.r, batch.c), (1, 3));
        assert_eq!(batch.labels(), vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }
}
