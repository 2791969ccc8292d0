//! Max pooling with argmax routing.

use super::{conv::conv_output_size, shape_err, Scalar, Tensor, TensorError};

/// Forward pass; also returns, per output element, the flat input index that
/// won the window (first maximal element in row-major order on ties).
pub(crate) fn maxpool_forward<S: Scalar>(
    x: &Tensor<S>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<S>, Vec<usize>), TensorError> {
    let [n, c, h, w] = x.dims4()?;
    let ho = conv_output_size(h, kernel, stride, padding)
        .ok_or_else(|| shape_err("max_pool2d", format!("H={} smaller than kernel {}", h, kernel)))?;
    let wo = conv_output_size(w, kernel, stride, padding)
        .ok_or_else(|| shape_err("max_pool2d", format!("W={} smaller than kernel {}", w, kernel)))?;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = S::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub(crate) fn maxpool_backward<S: Scalar>(input_len: usize, argmax: &[usize], dy: &[S]) -> Vec<S> {
    let mut dx = vec![S::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] = dx[i] + g;
    }
    dx
}
