//! Direct (loop) 2-D cross-correlation kernels, NCHW layout.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output spatial size `floor((size + 2 * padding - kernel) / stride) + 1`.
pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be >= 1"));
    }
    if kernel == 0 || kernel > size + 2 * padding {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit input {size} with padding {padding}"
        )));
    }
    Ok((size + 2 * padding - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects [n,c,h,w] and [o,c,kh,kw], got {input:?} and {kernel:?}"
            )));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c {
            return Err(Error::shape(format!(
                "kernel has {kc} input channels, input has {c}"
            )));
        }
        let oh = conv2d_output_size(h, kh, stride, padding)?;
        let ow = conv2d_output_size(w, kw, stride, padding)?;
        Ok(ConvGeometry { n, c, h, w, o, kh, kw, stride, padding, oh, ow })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    /// Input coordinate for an output position and kernel offset, if it
    /// lands inside the (unpadded) image.
    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    for n in 0..g.n {
        for o in 0..g.o {
            for y in 0..g.oh {
                for x in 0..g.ow {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        for i in 0..g.kh {
                            let Some(sy) = g.source(y, i, g.h) else { continue };
                            for j in 0..g.kw {
                                let Some(sx) = g.source(x, j, g.w) else { continue };
                                acc += input[((n * g.c + c) * g.h + sy) * g.w + sx]
                                    * kernel[((o * g.c + c) * g.kh + i) * g.kw + j];
                            }
                        }
                    }
                    out[((n * g.o + o) * g.oh + y) * g.ow + x] = acc;
                }
            }
        }
    }
    out
}

/// Gradients with respect to the input and the kernel. Either may be skipped.
pub(crate) fn backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    upstream: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut d_in = want_input.then(|| vec![0.0; input.len()]);
    let mut d_k = want_kernel.then(|| vec![0.0; kernel.len()]);
    for n in 0..g.n {
        for o in 0..g.o {
            for y in 0..g.oh {
                for x in 0..g.ow {
                    let up = upstream[((n * g.o + o) * g.oh + y) * g.ow + x];
                    if up == 0.0 {
                        continue;
                    }
                    for c in 0..g.c {
                        for i in 0..g.kh {
                            let Some(sy) = g.source(y, i, g.h) else { continue };
                            for j in 0..g.kw {
                                let Some(sx) = g.source(x, j, g.w) else { continue };
                                let ii = ((n * g.c + c) * g.h + sy) * g.w + sx;
                                let ki = ((o * g.c + c) * g.kh + i) * g.kw + j;
                                if let Some(d) = d_in.as_mut() {
                                    d[ii] += up * kernel[ki];
                                }
                                if let Some(d) = d_k.as_mut() {
                                    d[ki] += up * input[ii];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (d_in, d_k)
}
