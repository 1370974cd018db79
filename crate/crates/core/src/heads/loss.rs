use super::Loss;
use crate::data::pool_rows;
use crate::linalg::Mat;

/// Token-averaged prediction row used for classification.
pub fn pooled_scores(yhat: &Mat) -> Vec<f64> {
    pool_rows(yhat)
}

/// Per-sample loss and its gradient with respect to the s x c prediction.
pub fn loss_value_and_grad(loss: Loss, yhat: &Mat, y: &Mat) -> (f64, Mat) {
    let (s, c) = yhat.shape();
    match loss {
        Loss::Squared if y.nrows() == s => {
            let diff = yhat - y;
            (0.5 * diff.norm_squared(), diff)
        }
        Loss::Squared => {
            let pooled = pool_rows(yhat);
            let diff: Vec<f64> = (0..c).map(|k| pooled[k] - y[(0, k)]).collect();
            let value = 0.5 * diff.iter().map(|v| v * v).sum::<f64>();
            let grad = Mat::from_fn(s, c, |_, k| diff[k] / s as f64);
            (value, grad)
        }
        Loss::CrossEntropy => {
            let z = pool_rows(yhat);
            let target = pool_rows(y);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
            let lse = zmax + sum_exp.ln();
            let mass: f64 = target.iter().sum();
            let value: f64 = target.iter().zip(&z).map(|(t, zk)| t * (lse - zk)).sum();
            let grad = Mat::from_fn(s, c, |_, k| (mass * (z[k] - lse).exp() - target[k]) / s as f64);
            (value, grad)
        }
    }
}
