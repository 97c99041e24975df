//! Row-wise primitives shared by the forward and backward passes.

use crate::scalar::Scalar;

/// Layer norm over rows of width `d`: returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F], d: usize, eps: F) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::one() / F::from_usize_lossy(d);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gain[i] + bias[i];
        }
    }
    (y, xhat, rstd)
}

/// Backward of [`layer_norm`]. Adds into `dx`, `dgain`, `dbias`.
pub(crate) fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gain: &[F],
    d: usize,
    dx: &mut [F],
    dgain: &mut [F],
    dbias: &mut [F],
) {
    let inv_d = F::one() / F::from_usize_lossy(d);
    let mut dxhat = vec![F::zero(); d];
    for (r, &rs) in rstd.iter().enumerate() {
        let base = r * d;
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            let g = dy[base + i];
            dgain[i] += g * xhat[base + i];
            dbias[i] += g;
            dxhat[i] = g * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[base + i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for i in 0..d {
            dx[base + i] += rs * (dxhat[i] - mean_dxhat - xhat[base + i] * mean_dxhat_xhat);
        }
    }
}

fn gelu_consts<F: Scalar>() -> (F, F) {
    (F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()), F::from_f64_lossy(0.044715))
}

/// Tanh-approximated GELU.
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let (c, k) = gelu_consts::<F>();
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let (c, k) = gelu_consts::<F>();
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

pub(crate) fn add_bias<F: Scalar>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn add_column_sums<F: Scalar>(x: &[F], out: &mut [F]) {
    for row in x.chunks_exact(out.len()) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// In-place softmax of `row`; returns log-sum-exp.
pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Indices of the `k` largest entries, ties broken by the lower index.
pub(crate) fn top_k<F: Scalar>(row: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Argmax with ties broken by the lowest index.
pub(crate) fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_central_difference() {
        let d = 5;
        let x: Vec<f64> = vec![0.3, -1.2, 0.8, 2.0, -0.1, 1.0, 1.5, -0.5, 0.0, 0.25];
        let gain: Vec<f64> = vec![1.0, 0.5, -0.7, 1.3, 0.9];
        let bias = vec![0.1; d];
        let w: Vec<f64> = (0..x.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let objective = |x: &[f64]| -> f64 {
            let (y, _, _) = layer_norm(x, &gain, &bias, d, 1e-5);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, xhat, rstd) = layer_norm(&x, &gain, &bias, d, 1e-5);
        let mut dx = vec![0.0; x.len()];
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        layer_norm_backward(&w, &xhat, &rstd, &gain, d, &mut dx, &mut dg, &mut db);
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (objective(&xp) - objective(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "i={i} fd={fd} an={}", dx[i]);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_ties_pick_low_ids() {
        let mut row = vec![1.0f64, 3.0, 3.0, -2.0];
        assert_eq!(argmax(&row), 1);
        assert_eq!(top_k(&row, 3), vec![1, 2, 0]);
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&[0.0f64; 4]), 0);
    }
}
