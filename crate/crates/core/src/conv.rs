//! 2-D valid cross-correlation in HWC layout, its gradients, and the
//! transposed convolution built from them.
//!
//! Inputs are `[H, W, Cin]`, filters `[kh, kw, Cin, Cout]`, outputs
//! `[H', W', Cout]` with `H' = (H - kh) / stride + 1` (floor division).
//! No padding anywhere.

use crate::tensor::{axpy, dot};
use crate::{Error, Result, Tensor};

/// Output extent of a valid convolution along one axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            reason: "stride must be positive",
        });
    }
    if kernel == 0 || kernel > input {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            reason: "filter larger than input",
        });
    }
    if stride > kernel {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            reason: "stride exceeds kernel size, some inputs would never be read",
        });
    }
    Ok((input - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl Geometry {
    fn new(input_hw: (usize, usize), filters: &Tensor, stride: usize) -> Result<Self> {
        let fs = filters.shape();
        if fs.len() != 4 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                reason: "filters must have shape [kh, kw, Cin, Cout]",
            });
        }
        let (h, w) = input_hw;
        Ok(Self {
            h,
            w,
            cin: fs[2],
            kh: fs[0],
            kw: fs[1],
            cout: fs[3],
            oh: output_extent(h, fs[0], stride)?,
            ow: output_extent(w, fs[1], stride)?,
            stride,
        })
    }

    fn input_shape(&self) -> [usize; 3] {
        [self.h, self.w, self.cin]
    }

    fn output_shape(&self) -> [usize; 3] {
        [self.oh, self.ow, self.cout]
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        input.expect_shape("conv2d", &self.input_shape())
    }

    fn check_output(&self, output: &Tensor) -> Result<()> {
        output.expect_shape("conv2d", &self.output_shape())
    }
}

fn hwc(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w, _] => Ok((*h, *w)),
        _ => Err(Error::InvalidArgument {
            op,
            reason: "expected a rank-3 [H, W, C] tensor",
        }),
    }
}

pub fn conv2d_forward(input: &Tensor, filters: &Tensor, stride: usize) -> Result<Tensor> {
    let g = Geometry::new(hwc("conv2d_forward", input)?, filters, stride)?;
    g.check_input(input)?;
    let mut out = Tensor::zeros(&g.output_shape());
    forward_into(&g, input.data(), filters.data(), out.data_mut());
    out.ensure_finite("conv2d_forward")?;
    Ok(out)
}

/// Exact gradients of `sum(upstream * conv2d_forward(input, filters))` with
/// respect to `input` and `filters`.
pub fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = Geometry::new(hwc("conv2d_backward", input)?, filters, stride)?;
    g.check_input(input)?;
    g.check_output(upstream)?;
    let mut grad_input = Tensor::zeros(&g.input_shape());
    input_grad_into(&g, upstream.data(), filters.data(), grad_input.data_mut());
    let mut grad_filters = Tensor::zeros(filters.shape());
    filter_grad_into(&g, input.data(), upstream.data(), grad_filters.data_mut());
    grad_input.ensure_finite("conv2d_backward")?;
    grad_filters.ensure_finite("conv2d_backward")?;
    Ok((grad_input, grad_filters))
}

/// Filter gradient alone; skips the input gradient when the input is data.
pub fn conv2d_filter_grad(
    input: &Tensor,
    filters_shape: &[usize],
    stride: usize,
    upstream: &Tensor,
) -> Result<Tensor> {
    let mut grad_filters = Tensor::zeros(filters_shape);
    let g = Geometry::new(hwc("conv2d_filter_grad", input)?, &grad_filters, stride)?;
    g.check_input(input)?;
    g.check_output(upstream)?;
    filter_grad_into(&g, input.data(), upstream.data(), grad_filters.data_mut());
    grad_filters.ensure_finite("conv2d_filter_grad")?;
    Ok(grad_filters)
}

/// Transposed convolution: the adjoint of [`conv2d_forward`] with the same
/// `filters`. Maps `[H', W', Cout]` back to `[H, W, Cin]`; the output
/// extent is given explicitly because several `H` share one `H'` when
/// `stride > 1`.
pub fn conv_transpose2d_forward(
    features: &Tensor,
    filters: &Tensor,
    stride: usize,
    output_hw: (usize, usize),
) -> Result<Tensor> {
    let g = Geometry::new(output_hw, filters, stride)?;
    g.check_output(features)?;
    let mut out = Tensor::zeros(&g.input_shape());
    input_grad_into(&g, features.data(), filters.data(), out.data_mut());
    out.ensure_finite("conv_transpose2d_forward")?;
    Ok(out)
}

/// Gradients of `sum(upstream * conv_transpose2d_forward(features, filters))`
/// with respect to `features` and `filters`.
pub fn conv_transpose2d_backward(
    features: &Tensor,
    filters: &Tensor,
    stride: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = Geometry::new(hwc("conv_transpose2d_backward", upstream)?, filters, stride)?;
    g.check_input(upstream)?;
    g.check_output(features)?;
    let mut grad_features = Tensor::zeros(&g.output_shape());
    forward_into(&g, upstream.data(), filters.data(), grad_features.data_mut());
    let mut grad_filters = Tensor::zeros(filters.shape());
    filter_grad_into(&g, upstream.data(), features.data(), grad_filters.data_mut());
    grad_features.ensure_finite("conv_transpose2d_backward")?;
    grad_filters.ensure_finite("conv_transpose2d_backward")?;
    Ok((grad_features, grad_filters))
}

// out[oy, ox, :] += input[iy, ix, ci] * filters[ky, kx, ci, :]
fn forward_into(g: &Geometry, input: &[f64], filters: &[f64], out: &mut [f64]) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = (oy * g.ow + ox) * g.cout;
            let out_px = &mut out[o..o + g.cout];
            for ky in 0..g.kh {
                let iy = oy * g.stride + ky;
                for kx in 0..g.kw {
                    let ix = ox * g.stride + kx;
                    let ibase = (iy * g.w + ix) * g.cin;
                    let fbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let v = input[ibase + ci];
                        if v != 0.0 {
                            let f = fbase + ci * g.cout;
                            axpy(v, &filters[f..f + g.cout], out_px);
                        }
                    }
                }
            }
        }
    }
}

// grad_in[iy, ix, ci] += dot(upstream[oy, ox, :], filters[ky, kx, ci, :])
fn input_grad_into(g: &Geometry, upstream: &[f64], filters: &[f64], grad_in: &mut [f64]) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = (oy * g.ow + ox) * g.cout;
            let up = &upstream[o..o + g.cout];
            if up.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..g.kh {
                let iy = oy * g.stride + ky;
                for kx in 0..g.kw {
                    let ix = ox * g.stride + kx;
                    let ibase = (iy * g.w + ix) * g.cin;
                    let fbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let f = fbase + ci * g.cout;
                        grad_in[ibase + ci] += dot(up, &filters[f..f + g.cout]);
                    }
                }
            }
        }
    }
}

// grad_f[ky, kx, ci, :] += input[iy, ix, ci] * upstream[oy, ox, :]
fn filter_grad_into(g: &Geometry, input: &[f64], upstream: &[f64], grad_f: &mut [f64]) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = (oy * g.ow + ox) * g.cout;
            let up = &upstream[o..o + g.cout];
            for ky in 0..g.kh {
                let iy = oy * g.stride + ky;
                for kx in 0..g.kw {
                    let ix = ox * g.stride + kx;
                    let ibase = (iy * g.w + ix) * g.cin;
                    let fbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let v = input[ibase + ci];
                        if v != 0.0 {
                            let f = fbase + ci * g.cout;
                            axpy(v, up, &mut grad_f[f..f + g.cout]);
                        }
                    }
                }
            }
        }
    }
}
