//! Same-padded, stride-1 2-D cross-correlation kernels on raw NCHW buffers.
//!
//! Each sample is lowered to a column matrix (im2col) and multiplied against
//! the flattened weight with `matrixmultiply::dgemm`. Work is split per
//! sample and reductions over the batch run in sample order, so results do
//! not depend on scheduling.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }
    fn plane(&self) -> usize {
        self.height * self.width
    }
    /// Rows of the column matrix: in_ch * k * k.
    fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1
    }
}

fn im2col(input: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (h, w, k, p) = (g.height, g.width, g.k, g.pad());
    let hw = g.plane();
    for ci in 0..g.in_ch {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let x_lo = p.saturating_sub(kx);
                let x_hi = (w + p).saturating_sub(kx).min(w);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < p || sy - p >= h || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let sy = sy - p;
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let sx_lo = x_lo + kx - p;
                    let n = x_hi - x_lo;
                    out[x_lo..x_hi].copy_from_slice(&plane[sy * w + sx_lo..sy * w + sx_lo + n]);
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (h, w, k, p) = (g.height, g.width, g.k, g.pad());
    let hw = g.plane();
    for ci in 0..g.in_ch {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x_lo = p.saturating_sub(kx);
                let x_hi = (w + p).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < p || sy - p >= h {
                        continue;
                    }
                    let sy = sy - p;
                    let sx_lo = x_lo + kx - p;
                    let dst = &mut plane[sy * w + sx_lo..sy * w + sx_lo + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every caller passes buffers whose extents cover the strided
    // m×k, k×n and m×n views described by the stride pairs.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(input: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let hw = g.plane();
    let kk = g.patch();
    let in_stride = g.in_ch * hw;
    let out_stride = g.out_ch * hw;
    let mut out = vec![0.0; g.batch * out_stride];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * hw] };

    for b in 0..g.batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let y = &mut out[b * out_stride..(b + 1) * out_stride];
        let beta = match bias {
            Some(bias) => {
                for (co, chunk) in y.chunks_exact_mut(hw).enumerate() {
                    chunk.fill(bias[co]);
                }
                1.0
            }
            None => 0.0,
        };
        let cols: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut col);
            &col
        };
        gemm(g.out_ch, kk, hw, weight, (kk as isize, 1), cols, (hw as isize, 1), beta, y);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let (want_input, want_weight, want_bias) = want;
    let hw = g.plane();
    let kk = g.patch();
    let in_stride = g.in_ch * hw;
    let out_stride = g.out_ch * hw;

    let mut g_input = want_input.then(|| vec![0.0; input.len()]);
    let mut g_weight = want_weight.then(|| vec![0.0; weight.len()]);
    let mut g_bias = want_bias.then(|| vec![0.0; g.out_ch]);
    let mut col = if g.is_pointwise() || !want_weight { Vec::new() } else { vec![0.0; kk * hw] };
    let mut g_col = if g.is_pointwise() || !want_input { Vec::new() } else { vec![0.0; kk * hw] };

    for b in 0..g.batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let gy = &grad_out[b * out_stride..(b + 1) * out_stride];

        if let Some(gb) = g_bias.as_mut() {
            for (co, chunk) in gy.chunks_exact(hw).enumerate() {
                gb[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = g_weight.as_mut() {
            let cols: &[f64] = if g.is_pointwise() {
                x
            } else {
                im2col(x, g, &mut col);
                &col
            };
            // (out_ch × hw) · (hw × kk), reading the column matrix transposed
            gemm(g.out_ch, hw, kk, gy, (hw as isize, 1), cols, (1, hw as isize), 1.0, gw);
        }
        if let Some(gi) = g_input.as_mut() {
            let gx = &mut gi[b * in_stride..(b + 1) * in_stride];
            // (kk × out_ch) · (out_ch × hw), reading the weight transposed
            if g.is_pointwise() {
                gemm(kk, g.out_ch, hw, weight, (1, kk as isize), gy, (hw as isize, 1), 0.0, gx);
            } else {
                gemm(kk, g.out_ch, hw, weight, (1, kk as isize), gy, (hw as isize, 1), 0.0, &mut g_col);
                col2im_add(&g_col, g, gx);
            }
        }
    }
    ConvGrads {
        input: g_input,
        weight: g_weight,
        bias: g_bias,
    }
}
