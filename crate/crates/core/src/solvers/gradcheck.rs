use rand::Rng as _;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::seeded;

/// Largest relative error `|fd - g| / max(1, |g|, |fd|)` between central
/// differences of `f` and `grad` over 50 random coordinates (all of them when
/// there are fewer).
pub fn grad_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], eps: f64, seed: u64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if x.len() != grad.len() {
        return Err(Error::Shape(format!("{} coordinates, {} gradient entries", x.len(), grad.len())));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let coords: Vec<usize> = if x.len() <= 50 {
        (0..x.len()).collect()
    } else {
        let mut rng = seeded(seed);
        (0..50).map(|_| rng.random_range(0..x.len())).collect()
    };
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((fd - grad[i]).abs() / 1f64.max(grad[i].abs()).max(fd.abs()));
    }
    Ok(worst)
}

/// [`grad_check`] for objectives over lists of matrices.
pub fn grad_check_mats(
    f: impl Fn(&[Mat]) -> f64,
    x: &[Mat],
    grad: &[Mat],
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let shapes: Vec<(usize, usize)> = x.iter().map(|m| m.shape()).collect();
    let unflat = |v: &[f64]| {
        let mut at = 0;
        shapes
            .iter()
            .map(|&(r, c)| {
                let m = Mat::from_column_slice(r, c, &v[at..at + r * c]);
                at += r * c;
                m
            })
            .collect::<Vec<_>>()
    };
    let flat_x: Vec<f64> = x.iter().flat_map(|m| m.iter().copied()).collect();
    let flat_g: Vec<f64> = grad.iter().flat_map(|m| m.iter().copied()).collect();
    grad_check(|v| f(&unflat(v)), &flat_x, &flat_g, eps, seed)
}
