// Raw loops behind the tape ops. Everything here works on flat row-major slices.

pub const BN_EPS: f64 = 1e-5;

/// Output extent of a strided window: `floor((size + 2 pad - k) / stride) + 1`,
/// or `None` when the padded input is narrower than the kernel.
pub fn conv_output_extent(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = size + 2 * padding;
    if stride == 0 || span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    /// Output positions `o` with `o * stride + tap - pad` inside `0..size`, as a half-open range.
    fn valid(&self, tap: usize, size: usize, out: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
        if size + p <= tap {
            return 0..0;
        }
        let hi = ((size - 1 + p - tap) / s + 1).min(out);
        lo.min(hi)..hi
    }

    fn taps(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one sample into a `[c_in k k, oh ow]` matrix whose row `(ci, ky, kx)`
    /// holds the input value each output position sees through that tap.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        let p = self.positions();
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                let ys = self.valid(ky, self.h, self.oh);
                for kx in 0..self.k {
                    let xs = self.valid(kx, self.w, self.ow);
                    let row = &mut cols[((ci * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in ys.clone() {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &x[(ci * self.h + iy) * self.w..][..self.w];
                        let dst = &mut row[oy * self.ow..][..self.ow];
                        for ox in xs.clone() {
                            dst[ox] = src[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back onto the input.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                let ys = self.valid(ky, self.h, self.oh);
                for kx in 0..self.k {
                    let xs = self.valid(kx, self.w, self.ow);
                    let row = &cols[((ci * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in ys.clone() {
                        let iy = oy * self.stride + ky - self.pad;
                        let dst = &mut dx[(ci * self.h + iy) * self.w..][..self.w];
                        let src = &row[oy * self.ow..][..self.ow];
                        for ox in xs.clone() {
                            dst[ox * self.stride + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c += a b` for row-major `a: [m,k]` and `b: [k,n]`, either of which may be
/// read transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above keeps every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation over a batch of `batch` samples laid out back to back.
pub(crate) fn conv2d_forward(g: &ConvGeom, batch: usize, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * g.out_len()];
    let mut cols = vec![0.0; g.taps() * g.positions()];
    for b in 0..batch {
        g.im2col(&input[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        let y = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        gemm(g.c_out, g.taps(), g.positions(), kernel, false, &cols, false, y);
    }
    out
}

pub(crate) fn conv2d_backward_input(g: &ConvGeom, batch: usize, grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
    let mut cols = vec![0.0; g.taps() * g.positions()];
    for b in 0..batch {
        cols.fill(0.0);
        let dy = &grad_out[b * g.out_len()..(b + 1) * g.out_len()];
        gemm(g.taps(), g.c_out, g.positions(), kernel, true, dy, false, &mut cols);
        g.col2im(&cols, &mut grad_in[b * g.in_len()..(b + 1) * g.in_len()]);
    }
}

pub(crate) fn conv2d_backward_kernel(g: &ConvGeom, batch: usize, grad_out: &[f64], input: &[f64], grad_kernel: &mut [f64]) {
    let mut cols = vec![0.0; g.taps() * g.positions()];
    for b in 0..batch {
        g.im2col(&input[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        let dy = &grad_out[b * g.out_len()..(b + 1) * g.out_len()];
        gemm(g.c_out, g.positions(), g.taps(), dy, false, &cols, true, grad_kernel);
    }
}

/// Per-channel statistics of one training-mode batch-norm call. `var` is the
/// unbiased estimate used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) struct NormForward {
    pub out: Vec<f64>,
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub stats: Option<BatchStats>,
}

/// `x` is `[batch, channels, plane]`; statistics run over batch and plane.
pub(crate) fn batchnorm_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> NormForward {
    let count = (batch * plane) as f64;
    let (mean, var_biased, stats) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
        None => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for b in 0..batch {
                    s += x[(b * channels + c) * plane..][..plane].iter().sum::<f64>();
                }
                let m = s / count;
                let mut ss = 0.0;
                for b in 0..batch {
                    ss += x[(b * channels + c) * plane..][..plane]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[c] = m;
                var[c] = ss / count;
            }
            let unbiased = if count > 1.0 {
                var.iter().map(|v| v * count / (count - 1.0)).collect()
            } else {
                var.clone()
            };
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * plane;
            for p in base..base + plane {
                let xh = (x[p] - mean[c]) * inv_std[c];
                normalized[p] = xh;
                out[p] = gamma[c] * xh + beta[c];
            }
        }
    }
    NormForward {
        out,
        normalized,
        inv_std,
        stats,
    }
}
