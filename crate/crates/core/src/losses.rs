//! Loss kernels shared by the autograd graph and by direct callers.
//!
//! The contrastive kernel works in `f64` so that finite-difference checks can
//! be run against it at tight tolerances.

use crate::error::{Error, Result};

/// Least-squares GAN losses for one discriminator/generator round.
///
/// `loss_d = ½·mean((d_real − 1)²) + ½·mean(d_fake²)` and
/// `loss_g = mean((d_fake − 1)²)`.
pub fn adv_losses(d_real: &[f32], d_fake: &[f32]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Argument("empty score map".into()));
    }
    if !d_real.iter().chain(d_fake).all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite discriminator score".into()));
    }
    let mean = |xs: &[f32], target: f64| {
        xs.iter().map(|&v| (v as f64 - target).powi(2)).sum::<f64>() / xs.len() as f64
    };
    let loss_d = 0.5 * mean(d_real, 1.0) + 0.5 * mean(d_fake, 0.0);
    let loss_g = mean(d_fake, 1.0);
    Ok((loss_d, loss_g))
}

/// Output of [`nce_forward_backward`].
#[derive(Debug, Clone)]
pub struct NceResult {
    pub loss: f64,
    pub grad_q: Vec<f64>,
    pub grad_k: Vec<f64>,
}

/// Patchwise InfoNCE over `groups` independent groups of `per_group` locations.
///
/// `q` and `k` are `[groups * per_group, dim]` row-major. For every query row
/// `i` of a group the logits are `q_i · k_j / tau` over the keys `j` of the same
/// group, with the positive at `j = i`. The loss is the mean cross-entropy over
/// all query rows.
pub fn nce_forward_backward(
    q: &[f64],
    k: &[f64],
    groups: usize,
    per_group: usize,
    dim: usize,
    tau: f64,
) -> NceResult {
    let rows = groups * per_group;
    assert_eq!(q.len(), rows * dim);
    assert_eq!(k.len(), rows * dim);
    let mut loss = 0.0;
    let mut grad_q = vec![0.0; q.len()];
    let mut grad_k = vec![0.0; k.len()];
    let scale = 1.0 / rows as f64;
    let mut logits = vec![0.0; per_group];
    for g in 0..groups {
        let base = g * per_group;
        for i in 0..per_group {
            let qi = &q[(base + i) * dim..(base + i + 1) * dim];
            for (j, l) in logits.iter_mut().enumerate() {
                let kj = &k[(base + j) * dim..(base + j + 1) * dim];
                *l = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / tau;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            loss += (max + z.ln() - logits[i]) * scale;
            for j in 0..per_group {
                let p = (logits[j] - max).exp() / z;
                let dl = (p - if i == j { 1.0 } else { 0.0 }) * scale / tau;
                if dl == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    grad_q[(base + i) * dim + d] += dl * k[(base + j) * dim + d];
                    grad_k[(base + j) * dim + d] += dl * q[(base + i) * dim + d];
                }
            }
        }
    }
    NceResult {
        loss,
        grad_q,
        grad_k,
    }
}
