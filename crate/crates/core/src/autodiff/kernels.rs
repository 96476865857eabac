//! Slice-level numeric kernels shared by the tape and by tape-free inference.
//!
//! Every kernel uses a fixed loop order so results are reproducible bit for
//! bit, and each output row of `matmul` depends only on the matching input
//! row.

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m×n] · bᵀ` accumulated into `ga[m×k]`.
pub fn matmul_grad_lhs(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            ga[i * k + p] += acc;
        }
    }
}

/// `aᵀ · g[m×n]` accumulated into `gb[k×n]`.
pub fn matmul_grad_rhs(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (o, gv) in gbrow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output extent along one axis, or `None` when it is not integral.
    pub fn out_extent(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = size + 2 * padding;
        if stride == 0 || k > padded || !(padded - k).is_multiple_of(stride) {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let oh = Self::out_extent(self.height, self.kh, self.stride, self.padding)
            .expect("validated conv geometry");
        let ow = Self::out_extent(self.width, self.kw, self.stride, self.padding)
            .expect("validated conv geometry");
        (oh, ow)
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub fn conv2d(input: &[f64], kernel: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = geo.out_hw();
    let ConvGeometry {
        batch,
        in_channels: c_in,
        height: h,
        width: w,
        filters,
        kh,
        kw,
        ..
    } = *geo;
    let mut out = vec![0.0; batch * filters * oh * ow];
    for n in 0..batch {
        for f in 0..filters {
            let obase = (n * filters + f) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        let ibase = (n * c_in + c) * h * w;
                        let kbase = (f * c_in + c) * kh * kw;
                        for ty in 0..kh {
                            let Some(iy) = geo.src(oy, ty, h) else { continue };
                            for tx in 0..kw {
                                let Some(ix) = geo.src(ox, tx, w) else { continue };
                                acc += input[ibase + iy * w + ix] * kernel[kbase + ty * kw + tx];
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients of [`conv2d`].
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    g: &[f64],
    geo: &ConvGeometry,
    g_input: Option<&mut [f64]>,
    g_kernel: Option<&mut [f64]>,
) {
    let (oh, ow) = geo.out_hw();
    let ConvGeometry {
        batch,
        in_channels: c_in,
        height: h,
        width: w,
        filters,
        kh,
        kw,
        ..
    } = *geo;
    let mut g_input = g_input;
    let mut g_kernel = g_kernel;
    for n in 0..batch {
        for f in 0..filters {
            let obase = (n * filters + f) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[obase + oy * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for c in 0..c_in {
                        let ibase = (n * c_in + c) * h * w;
                        let kbase = (f * c_in + c) * kh * kw;
                        for ty in 0..kh {
                            let Some(iy) = geo.src(oy, ty, h) else { continue };
                            for tx in 0..kw {
                                let Some(ix) = geo.src(ox, tx, w) else { continue };
                                let ii = ibase + iy * w + ix;
                                let ki = kbase + ty * kw + tx;
                                if let Some(gi) = g_input.as_deref_mut() {
                                    gi[ii] += go * kernel[ki];
                                }
                                if let Some(gk) = g_kernel.as_deref_mut() {
                                    gk[ki] += go * input[ii];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation stencil of align-corners linear resizing of `n` samples to
/// `m`: output `i` reads `(lo, hi, frac)` as `v[lo]·(1−frac) + v[hi]·frac`.
pub fn resize_stencil(n: usize, m: usize, i: usize) -> (usize, usize, f64) {
    if n == 1 || m == 1 {
        return (0, 0, 0.0);
    }
    let num = i * (n - 1);
    let den = m - 1;
    let lo = num / den;
    let rem = num % den;
    if rem == 0 {
        return (lo, lo, 0.0);
    }
    (lo, lo + 1, rem as f64 / den as f64)
}

pub fn resize_linear(v: &[f64], m: usize) -> Vec<f64> {
    let n = v.len();
    (0..m)
        .map(|i| {
            let (lo, hi, frac) = resize_stencil(n, m, i);
            if frac == 0.0 {
                v[lo]
            } else {
                v[lo] * (1.0 - frac) + v[hi] * frac
            }
        })
        .collect()
}

pub fn resize_linear_backward(g: &[f64], n: usize, gv: &mut [f64]) {
    let m = g.len();
    for (i, gi) in g.iter().enumerate() {
        let (lo, hi, frac) = resize_stencil(n, m, i);
        if frac == 0.0 {
            gv[lo] += gi;
        } else {
            gv[lo] += gi * (1.0 - frac);
            gv[hi] += gi * frac;
        }
    }
}

/// Row-wise softmax over the last axis of a `rows × cols` matrix.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    out
}

/// Adds `bias[c]` along axis 1 of an `[N, C, rest…]` buffer.
pub fn add_bias(x: &[f64], bias: &[f64], inner: usize) -> Vec<f64> {
    let c = bias.len();
    let mut out = x.to_vec();
    for (idx, o) in out.iter_mut().enumerate() {
        *o += bias[(idx / inner) % c];
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
