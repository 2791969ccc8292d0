//! 2-D cross-correlation via im2col + GEMM, with a direct reference loop.

use super::{shape_err, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// `floor((size + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cg: usize,
    pub cout_g: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.cg * self.kh * self.kw
    }
    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self, cfg: &Conv2dConfig) -> bool {
        self.kh == 1 && self.kw == 1 && cfg.stride == 1 && cfg.padding == 0 && cfg.groups == 1
    }
}

pub(crate) fn geometry<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    cfg: &Conv2dConfig,
) -> Result<ConvGeometry, TensorError> {
    let [n, cin, h, wd] = x.dims4()?;
    let [cout, cg, kh, kw] = w
        .dims4()
        .map_err(|_| shape_err("conv2d", format!("weight must be 4-D, got {:?}", w.shape())))?;
    if cfg.groups == 0 || cin % cfg.groups != 0 || cout % cfg.groups != 0 {
        return Err(shape_err(
            "conv2d",
            format!("Cin={} and Cout={} must be divisible by groups={}", cin, cout, cfg.groups),
        ));
    }
    if cin / cfg.groups != cg {
        return Err(shape_err(
            "conv2d",
            format!(
                "weight expects Cin/groups={} but input has Cin={} with groups={}",
                cg, cin, cfg.groups
            ),
        ));
    }
    let ho = conv_output_size(h, kh, cfg.stride, cfg.padding)
        .ok_or_else(|| shape_err("conv2d", format!("H={} too small for kernel {}", h, kh)))?;
    let wo = conv_output_size(wd, kw, cfg.stride, cfg.padding)
        .ok_or_else(|| shape_err("conv2d", format!("W={} too small for kernel {}", wd, kw)))?;
    Ok(ConvGeometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho,
        wo,
        cg,
        cout_g: cout / cfg.groups,
    })
}

fn im2col<S: Scalar>(
    g: &ConvGeometry,
    cfg: &Conv2dConfig,
    x_n: &[S],
    group: usize,
    pad_fill: Option<&[S]>,
    cols: &mut [S],
) {
    let hw_out = g.out_hw();
    let s = cfg.stride;
    let p = cfg.padding as isize;
    for c in 0..g.cg {
        let ch = group * g.cg + c;
        let plane = &x_n[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        let fill = pad_fill.map_or(S::zero(), |f| f[ch]);
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = fill);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize {
                            fill
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(
    g: &ConvGeometry,
    cfg: &Conv2dConfig,
    cols: &[S],
    group: usize,
    dx_n: &mut [S],
) {
    let hw_out = g.out_hw();
    let s = cfg.stride;
    let p = cfg.padding as isize;
    for c in 0..g.cg {
        let ch = group * g.cg + c;
        let plane = &mut dx_n[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + *v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<S: Scalar>(b: Option<&Tensor<S>>, cout: usize) -> Result<(), TensorError> {
    if let Some(b) = b {
        if b.len() != cout {
            return Err(shape_err(
                "conv2d",
                format!("bias has {} values, Cout={}", b.len(), cout),
            ));
        }
    }
    Ok(())
}

fn check_fill<S: Scalar>(fill: Option<&[S]>, cin: usize) -> Result<(), TensorError> {
    if let Some(f) = fill {
        if f.len() != cin {
            return Err(shape_err(
                "conv2d",
                format!("padding fill has {} values, Cin={}", f.len(), cin),
            ));
        }
    }
    Ok(())
}

/// Forward pass. `pad_fill`, when given, replaces the zero padding value per
/// input channel (used by convolutions that absorbed a preceding batch norm).
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    cfg: &Conv2dConfig,
    pad_fill: Option<&[S]>,
) -> Result<Tensor<S>, TensorError> {
    let g = geometry(x, w, cfg)?;
    check_bias(b, g.cout)?;
    check_fill(pad_fill, g.cin)?;
    let hw_out = g.out_hw();
    let rows = g.col_rows();
    let mut out = vec![S::zero(); g.n * g.cout * hw_out];
    let mut cols = if g.is_pointwise(cfg) {
        Vec::new()
    } else {
        vec![S::zero(); rows * hw_out]
    };
    let in_stride = g.cin * g.h * g.w;
    for n in 0..g.n {
        let x_n = &x.data()[n * in_stride..(n + 1) * in_stride];
        let out_n = &mut out[n * g.cout * hw_out..(n + 1) * g.cout * hw_out];
        for group in 0..cfg.groups {
            let src: &[S] = if g.is_pointwise(cfg) {
                x_n
            } else {
                im2col(&g, cfg, x_n, group, pad_fill, &mut cols);
                &cols
            };
            let w_g = &w.data()[group * g.cout_g * rows..(group + 1) * g.cout_g * rows];
            let out_g = &mut out_n[group * g.cout_g * hw_out..(group + 1) * g.cout_g * hw_out];
            S::gemm(
                g.cout_g,
                rows,
                hw_out,
                S::one(),
                w_g,
                rows as isize,
                1,
                src,
                hw_out as isize,
                1,
                S::zero(),
                out_g,
                hw_out as isize,
                1,
            );
        }
        if let Some(b) = b {
            for (co, bias) in b.data().iter().enumerate() {
                out_n[co * hw_out..(co + 1) * hw_out]
                    .iter_mut()
                    .for_each(|v| *v = *v + *bias);
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients `(dx, dw, db)` given the upstream gradient `dy`.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    cfg: &Conv2dConfig,
    pad_fill: Option<&[S]>,
    dy: &[S],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>), TensorError> {
    let g = geometry(x, w, cfg)?;
    let hw_out = g.out_hw();
    let rows = g.col_rows();
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * hw_out;
    let mut dx = need_dx.then(|| vec![S::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![S::zero(); w.len()]);
    let db = need_db.then(|| {
        let mut db = vec![S::zero(); g.cout];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = n * out_stride + co * hw_out;
                *acc = *acc + dy[off..off + hw_out].iter().copied().sum::<S>();
            }
        }
        db
    });
    if !need_dx && !need_dw {
        return Ok((dx, dw, db));
    }
    let pointwise = g.is_pointwise(cfg);
    let mut cols = vec![S::zero(); if pointwise { 0 } else { rows * hw_out }];
    let mut dcols = vec![S::zero(); rows * hw_out];
    for n in 0..g.n {
        let x_n = &x.data()[n * in_stride..(n + 1) * in_stride];
        let dy_n = &dy[n * out_stride..(n + 1) * out_stride];
        for group in 0..cfg.groups {
            let dy_g = &dy_n[group * g.cout_g * hw_out..(group + 1) * g.cout_g * hw_out];
            let w_off = group * g.cout_g * rows;
            if let Some(dw) = dw.as_mut() {
                let src: &[S] = if pointwise {
                    x_n
                } else {
                    im2col(&g, cfg, x_n, group, pad_fill, &mut cols);
                    &cols
                };
                S::gemm(
                    g.cout_g,
                    hw_out,
                    rows,
                    S::one(),
                    dy_g,
                    hw_out as isize,
                    1,
                    src,
                    1,
                    hw_out as isize,
                    S::one(),
                    &mut dw[w_off..w_off + g.cout_g * rows],
                    rows as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let w_g = &w.data()[w_off..w_off + g.cout_g * rows];
                let dx_n = &mut dx[n * in_stride..(n + 1) * in_stride];
                if pointwise {
                    S::gemm(
                        rows,
                        g.cout_g,
                        hw_out,
                        S::one(),
                        w_g,
                        1,
                        rows as isize,
                        dy_g,
                        hw_out as isize,
                        1,
                        S::one(),
                        dx_n,
                        hw_out as isize,
                        1,
                    );
                } else {
                    S::gemm(
                        rows,
                        g.cout_g,
                        hw_out,
                        S::one(),
                        w_g,
                        1,
                        rows as isize,
                        dy_g,
                        hw_out as isize,
                        1,
                        S::zero(),
                        &mut dcols,
                        hw_out as isize,
                        1,
                    );
                    col2im_add(&g, cfg, &dcols, group, dx_n);
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Straightforward nested-loop convolution, kept as an independent route for
/// verifying the im2col path.
pub fn conv2d_direct<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    cfg: &Conv2dConfig,
    pad_fill: Option<&[S]>,
) -> Result<Tensor<S>, TensorError> {
    let g = geometry(x, w, cfg)?;
    check_bias(b, g.cout)?;
    check_fill(pad_fill, g.cin)?;
    let mut out = vec![S::zero(); g.n * g.cout * g.ho * g.wo];
    let xd = x.data();
    let wd = w.data();
    for n in 0..g.n {
        for co in 0..g.cout {
            let group = co / g.cout_g;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = b.map_or(S::zero(), |b| b.data()[co]);
                    for c in 0..g.cg {
                        let ci = group * g.cg + c;
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * cfg.stride + ki) as isize - cfg.padding as isize;
                                let ix = (ox * cfg.stride + kj) as isize - cfg.padding as isize;
                                let v = if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    pad_fill.map_or(S::zero(), |f| f[ci])
                                } else {
                                    xd[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize]
                                };
                                acc = acc + v * wd[((co * g.cg + c) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)
}
