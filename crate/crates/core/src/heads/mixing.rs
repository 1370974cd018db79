use serde::{Deserialize, Serialize};

use crate::linalg::{dft_matrix, Mat};

/// Fixed token-mixing maps `h: R^{s x d} -> R^{s x d}` for the generic head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixFn {
    Identity,
    /// Every token replaced by the mean over all tokens.
    MeanPool,
    /// Circular window average over `2 * radius + 1` neighbouring tokens.
    LocalPool { radius: usize },
    /// Real part of the unnormalized 2-D DFT over tokens and features.
    FNet,
}

impl MixFn {
    pub fn apply(&self, x: &Mat) -> Mat {
        let (s, d) = x.shape();
        match self {
            MixFn::Identity => x.clone(),
            MixFn::MeanPool => {
                let mean = x.row_mean();
                Mat::from_fn(s, d, |_, k| mean[k])
            }
            MixFn::LocalPool { radius } => {
                let width = (2 * radius + 1).min(s);
                let back = if width == s { 0 } else { *radius };
                Mat::from_fn(s, d, |t, k| {
                    let mut acc = 0.0;
                    for off in 0..width {
                        acc += x[((t + off + s - back) % s, k)];
                    }
                    acc / width as f64
                })
            }
            MixFn::FNet => {
                let fs = dft_matrix(s) * nalgebra::Complex::new((s as f64).sqrt(), 0.0);
                let fd = dft_matrix(d) * nalgebra::Complex::new((d as f64).sqrt(), 0.0);
                let xc = x.map(|a| nalgebra::Complex::new(a, 0.0));
                (fs * xc * fd.transpose()).map(|z| z.re)
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            MixFn::Identity => "identity".into(),
            MixFn::MeanPool => "meanpool".into(),
            MixFn::LocalPool { radius } => format!("localpool{radius}"),
            MixFn::FNet => "fnet".into(),
        }
    }

    pub fn parse(name: &str) -> Option<MixFn> {
        match name {
            "identity" => Some(MixFn::Identity),
            "meanpool" => Some(MixFn::MeanPool),
            "fnet" => Some(MixFn::FNet),
            other => other.strip_prefix("localpool").and_then(|r| r.parse().ok()).map(|radius| MixFn::LocalPool { radius }),
        }
    }
}
