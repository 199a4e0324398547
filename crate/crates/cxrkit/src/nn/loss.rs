//! Loss functions with analytic gradients with respect to logits.

use ndarray::Array2;

use super::Tensor;

/// Softmax of a two-column (or k-column) score matrix, row-wise.
pub fn softmax_rows(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy over the batch plus the gradient with respect to the
/// logits.
pub fn softmax_cross_entropy(logits: &Array2<f32>, targets: &[usize]) -> (f32, Array2<f32>) {
    let n = logits.nrows();
    assert_eq!(n, targets.len());
    let probs = softmax_rows(logits);
    let mut loss = 0.0f32;
    let mut grad = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        let p = probs[[i, t]].max(1e-12);
        loss -= p.ln();
        grad[[i, t]] -= 1.0;
    }
    loss /= n as f32;
    grad.mapv_inplace(|g| g / n as f32);
    (loss, grad)
}

#[inline]
fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy (computed stably from logits) plus soft-Dice loss,
/// equally weighted, over an (N, 1, H, W) logit map and a matching {0,1}
/// target map. Returns (bce, dice_loss, gradient wrt logits).
pub fn bce_dice_loss(logits: &Tensor, targets: &Tensor) -> (f32, f32, Tensor) {
    assert_eq!(logits.shape(), targets.shape());
    let m = logits.len() as f32;
    let eps = 1e-6f32;

    let mut bce = 0.0f32;
    let mut sum_p = 0.0f32;
    let mut sum_t = 0.0f32;
    let mut sum_pt = 0.0f32;
    let mut probs = logits.clone();
    for (p, (&z, &t)) in probs
        .iter_mut()
        .zip(logits.iter().zip(targets.iter()))
    {
        // log(1 + e^-|z|) + max(z, 0) - z t
        bce += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
        let s = sigmoid(z);
        *p = s;
        sum_p += s;
        sum_t += t;
        sum_pt += s * t;
    }
    bce /= m;

    let denom = sum_p + sum_t + eps;
    let dice = (2.0 * sum_pt + eps) / denom;
    let dice_loss = 1.0 - dice;

    let mut grad = Tensor::zeros(logits.raw_dim());
    for ((g, &p), &t) in grad.iter_mut().zip(probs.iter()).zip(targets.iter()) {
        let g_bce = (p - t) / m;
        // d(1 - dice)/dp = -(2 t * denom - (2 sum_pt + eps)) / denom^2
        let d_dice_dp = (2.0 * t * denom - (2.0 * sum_pt + eps)) / (denom * denom);
        let g_dice = -d_dice_dp * p * (1.0 - p);
        *g = g_bce + g_dice;
    }
    (bce, dice_loss, grad)
}
