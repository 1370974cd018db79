//! Convex token-mixing heads: specs, formula-level forwards, and the lifted
//! problem used by the solvers.

mod forward;
mod loss;
mod mixing;
mod problem;

pub use forward::*;
pub use loss::{loss_value_and_grad, pooled_scores};
pub use mixing::MixFn;
pub use problem::{BlockLayout, ConvexVars, Group, ObjectiveValue, Problem, Slot};

use serde::{Deserialize, Serialize};

use crate::linalg::TokenGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Plain two-layer network on `X_i` itself (the baseline MLP).
    Mlp,
    SelfAttention,
    SaBlockdiag,
    Mixer,
    Fno,
    Bfno,
    Generic(MixFn),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    GatedRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `1/2 ||Y_hat - Y||_F^2`; with one target row the prediction is token-averaged first.
    Squared,
    /// Softmax cross-entropy on token-averaged predictions.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    Dense,
    Bm(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub activation: Activation,
    pub beta: f64,
    /// Neuron count of the non-convex form (and gate count for gated heads).
    pub m: usize,
    /// Feature groups for B-FNO.
    pub blocks: usize,
    pub loss: Loss,
    pub param: Parametrization,
    /// Token grid for circulant shifts; `None` means a 1 x s strip.
    pub grid: Option<TokenGrid>,
}

impl HeadSpec {
    pub fn new(kind: HeadKind, activation: Activation, beta: f64) -> Self {
        HeadSpec {
            kind,
            activation,
            beta,
            m: 8,
            blocks: 1,
            loss: Loss::Squared,
            param: Parametrization::Dense,
            grid: None,
        }
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }

    pub fn with_loss(mut self, loss: Loss) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn with_param(mut self, param: Parametrization) -> Self {
        self.param = param;
        self
    }

    pub fn with_grid(mut self, grid: TokenGrid) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn grid_for(&self, s: usize) -> TokenGrid {
        self.grid.unwrap_or(TokenGrid::line(s))
    }

    pub fn kind_name(&self) -> String {
        match &self.kind {
            HeadKind::Mlp => "mlp".into(),
            HeadKind::SelfAttention => "sa".into(),
            HeadKind::SaBlockdiag => "sa_blockdiag".into(),
            HeadKind::Mixer => "mixer".into(),
            HeadKind::Fno => "fno".into(),
            HeadKind::Bfno => "bfno".into(),
            HeadKind::Generic(h) => format!("generic_{}", h.name()),
        }
    }
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::GatedRelu => "gated_relu",
        }
    }
}
