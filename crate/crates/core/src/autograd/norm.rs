//! Per-channel batch normalisation over `(N, H, W)`.

use super::{shape_err, Scalar, Tensor, TensorError};

/// Running-statistics momentum (PyTorch convention: new = (1-m)·old + m·batch).
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

pub(crate) struct BnSaved<S> {
    pub mean: Vec<S>,
    pub invstd: Vec<S>,
}

fn check<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<[usize; 4], TensorError> {
    let dims = x.dims4()?;
    if dims[0] == 0 {
        return Err(TensorError::EmptyBatch { op: "batch_norm" });
    }
    if gamma.len() != dims[1] || beta.len() != dims[1] {
        return Err(shape_err(
            "batch_norm",
            format!(
                "input has {} channels, gamma {} and beta {}",
                dims[1],
                gamma.len(),
                beta.len()
            ),
        ));
    }
    Ok(dims)
}

/// Train-mode forward. Returns the output, the values needed by backward and
/// the unbiased batch variance for the running estimate.
pub(crate) fn bn_train_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, BnSaved<S>, Vec<S>), TensorError> {
    let [n, c, h, w] = check(x, gamma, beta)?;
    let hw = h * w;
    let count = n * hw;
    let mut mean = vec![S::zero(); c];
    let mut invstd = vec![S::zero(); c];
    let mut unbiased = vec![S::zero(); c];
    let xd = x.data();
    for ch in 0..c {
        let mut acc = 0.0f64;
        for s in 0..n {
            let off = (s * c + ch) * hw;
            acc += xd[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = acc / count as f64;
        let mut var = 0.0f64;
        for s in 0..n {
            let off = (s * c + ch) * hw;
            var += xd[off..off + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        let biased = var / count as f64;
        mean[ch] = S::from_f64(m);
        invstd[ch] = S::one() / (S::from_f64(biased) + eps).sqrt();
        unbiased[ch] = S::from_f64(if count > 1 { var / (count - 1) as f64 } else { biased });
    }
    let mut out = vec![S::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            let (g, b, m, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], invstd[ch]);
            for (o, v) in out[off..off + hw].iter_mut().zip(&xd[off..off + hw]) {
                *o = g * (*v - m) * is + b;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BnSaved { mean, invstd },
        unbiased,
    ))
}

pub(crate) fn bn_train_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    saved: &BnSaved<S>,
    dy: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let [n, c, h, w] = x.dims4().expect("checked in forward");
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.data();
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    // Channel sums in f64: the dx expression below cancels heavily.
    for ch in 0..c {
        let (mu, is) = (saved.mean[ch].as_f64(), saved.invstd[ch].as_f64());
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let xhat = (xd[i].as_f64() - mu) * is;
                sum_dy += dy[i].as_f64();
                sum_dy_xhat += dy[i].as_f64() * xhat;
            }
        }
        dgamma[ch] = S::from_f64(sum_dy_xhat);
        dbeta[ch] = S::from_f64(sum_dy);
        let k = gamma.data()[ch].as_f64() * is / m;
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let xhat = (xd[i].as_f64() - mu) * is;
                dx[i] = S::from_f64(k * (m * dy[i].as_f64() - sum_dy - xhat * sum_dy_xhat));
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode affine transform with fixed statistics.
pub(crate) fn bn_eval_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>, TensorError> {
    let [n, c, h, w] = check(x, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(shape_err("batch_norm", "running statistics do not match channels"));
    }
    let hw = h * w;
    let mut out = vec![S::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] / (var.data()[ch] + eps).sqrt();
            let shift = beta.data()[ch] - mean.data()[ch] * scale;
            let off = (s * c + ch) * hw;
            for (o, v) in out[off..off + hw].iter_mut().zip(&x.data()[off..off + hw]) {
                *o = *v * scale + shift;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn bn_eval_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    eps: S,
    dy: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let [n, c, h, w] = x.dims4().expect("checked in forward");
    let hw = h * w;
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for ch in 0..c {
        let is = S::one() / (var.data()[ch] + eps).sqrt();
        let scale = gamma.data()[ch] * is;
        let (mut dg, mut db) = (0.0f64, 0.0f64);
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = dy[i] * scale;
                dg += (dy[i] * (x.data()[i] - mean.data()[ch]) * is).as_f64();
                db += dy[i].as_f64();
            }
        }
        dgamma[ch] = S::from_f64(dg);
        dbeta[ch] = S::from_f64(db);
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_normalises_to_zero() {
        let x = Tensor::<f32>::full(&[2, 3, 2, 2], 4.5);
        let g = Tensor::full(&[3], 1.0);
        let b = Tensor::zeros(&[3]);
        let (y, _, _) = bn_train_forward(&x, &g, &b, BN_EPS as f32).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn eval_with_unit_stats_is_identity_up_to_eps() {
        let x = Tensor::<f64>::new(vec![1, 2, 1, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let m = Tensor::zeros(&[2]);
        let v = Tensor::full(&[2], 1.0);
        let y = bn_eval_forward(&x, &g, &b, &m, &v, BN_EPS).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn empty_batch_is_error() {
        let x = Tensor::<f32>::zeros(&[0, 2, 2, 2]);
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            bn_train_forward(&x, &g, &b, 1e-5),
            Err(TensorError::EmptyBatch { .. })
        ));
    }
}
