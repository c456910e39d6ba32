//! Slice-level numeric kernels shared by the forward and backward passes.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserted slice lengths cover every index addressed by the
    // strides above.
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

/// Split `n` samples into runs whose column matrices hold at most about
/// 2^20 values, with `per_sample` values per sample.
pub fn sample_chunks(n: usize, per_sample: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let m = ((1 << 20) / per_sample.max(1)).clamp(1, n.max(1));
    (0..n).step_by(m).map(move |s| s..(s + m).min(n))
}

/// `[N, C, plane]` to `[C, N*plane]`.
pub fn to_channel_major(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let src = &x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            out[(ch * n + s) * plane..(ch * n + s + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`to_channel_major`].
pub fn from_channel_major(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let src = &x[(ch * n + s) * plane..(ch * n + s + 1) * plane];
            out[(s * c + ch) * plane..(s * c + ch + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Geometry of a 2-D correlation from a `[C, H, W]` image to `[F, OH, OW]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if stride == 0 || kh == 0 || kw == 0 || kh > ph || kw > pw {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// For a kernel tap and output coordinate range, the valid output span
    /// `[lo, hi)` whose input coordinate `o*stride + tap - padding` is in
    /// `[0, extent)`.
    #[inline]
    fn valid_span(&self, tap: usize, out: usize, extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let hi_num = extent as isize - 1 - off;
        let hi = if hi_num < 0 {
            0
        } else {
            (hi_num / s + 1).min(out as isize)
        };
        (
            lo.min(out as isize) as usize,
            hi.max(lo.min(out as isize)) as usize,
        )
    }
}

/// Unfold one image `[C, H, W]` into columns `[C*kh*kw, OH*OW]`. Row `r`
/// starts at `col[r * ld]`, so a batch can share one wide column matrix.
pub fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64], ld: usize) {
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let src = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_span(ki, g.out_h, g.height);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ld..row * ld + plane];
                let (xlo, xhi) = g.valid_span(kj, g.out_w, g.width);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < ylo || oy >= yhi {
                        line.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.padding;
                    let srow = &src[iy * g.width..(iy + 1) * g.width];
                    line[..xlo].fill(0.0);
                    line[xhi..].fill(0.0);
                    if g.stride == 1 {
                        let ix0 = xlo + kj - g.padding;
                        line[xlo..xhi].copy_from_slice(&srow[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            line[ox] = srow[ox * g.stride + kj - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im(col: &[f64], g: &ConvGeom, img: &mut [f64], ld: usize) {
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let dst = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_span(ki, g.out_h, g.height);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ld..row * ld + plane];
                let (xlo, xhi) = g.valid_span(kj, g.out_w, g.width);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.padding;
                    let drow = &mut dst[iy * g.width..(iy + 1) * g.width];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in xlo..xhi {
                        drow[ox * g.stride + kj - g.padding] += line[ox];
                    }
                }
            }
        }
    }
}

/// Per-(sample, group) statistics saved by the group-norm forward pass.
pub struct GroupNormSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Group normalization of `[N, C, plane]` data followed by a per-channel affine.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, GroupNormSaved) {
    let cg = c / groups;
    let m = cg * plane;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n * groups];
    for s in 0..n {
        for g in 0..groups {
            let base = (s * c + g * cg) * plane;
            let chunk = &x[base..base + m];
            let mean = chunk.iter().sum::<f64>() / m as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[s * groups + g] = is;
            for ch in 0..cg {
                let channel = g * cg + ch;
                let off = base + ch * plane;
                for p in 0..plane {
                    let h = (x[off + p] - mean) * is;
                    xhat[off + p] = h;
                    out[off + p] = gamma[channel] * h + beta[channel];
                }
            }
        }
    }
    (out, GroupNormSaved { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    dy: &[f64],
    saved: &GroupNormSaved,
    n: usize,
    c: usize,
    plane: usize,
    groups: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = (cg * plane) as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for g in 0..groups {
            let base = (s * c + g * cg) * plane;
            let mut sum_dh = 0.0;
            let mut sum_dh_h = 0.0;
            for ch in 0..cg {
                let channel = g * cg + ch;
                let off = base + ch * plane;
                for p in 0..plane {
                    let d = dy[off + p];
                    let h = saved.xhat[off + p];
                    dgamma[channel] += d * h;
                    dbeta[channel] += d;
                    let dh = d * gamma[channel];
                    sum_dh += dh;
                    sum_dh_h += dh * h;
                }
            }
            let is = saved.inv_std[s * groups + g];
            let mean_dh = sum_dh / m;
            let mean_dh_h = sum_dh_h / m;
            for ch in 0..cg {
                let channel = g * cg + ch;
                let off = base + ch * plane;
                for p in 0..plane {
                    let dh = dy[off + p] * gamma[channel];
                    dx[off + p] = is * (dh - mean_dh - saved.xhat[off + p] * mean_dh_h);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2x2 mean pooling with stride 2 over `[planes, H, W]`; odd trailing rows
/// and columns are dropped.
pub fn avg_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * src[y * ow + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] += g;
                dst[i + 1] += g;
                dst[i + w] += g;
                dst[i + w + 1] += g;
            }
        }
    }
    dx
}

/// Valid-mode separable correlation of `[planes, H, W]` with `k` along both
/// axes; output is `[planes, H-k+1, W-k+1]`.
pub fn separable_filter(x: &[f64], planes: usize, h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let kl = k.len();
    let (oh, ow) = (h + 1 - kl, w + 1 - kl);
    let mut tmp = vec![0.0; h * ow];
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let trow = &mut tmp[y * ow..(y + 1) * ow];
            for (xx, t) in trow.iter_mut().enumerate() {
                *t = k.iter().zip(&row[xx..xx + kl]).map(|(a, b)| a * b).sum();
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, &kv) in k.iter().enumerate() {
            for y in 0..oh {
                let trow = &tmp[(y + i) * ow..(y + i + 1) * ow];
                let drow = &mut dst[y * ow..(y + 1) * ow];
                for (d, t) in drow.iter_mut().zip(trow) {
                    *d += kv * t;
                }
            }
        }
    }
    out
}

pub fn separable_filter_backward(
    dy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: &[f64],
) -> Vec<f64> {
    let kl = k.len();
    let (oh, ow) = (h + 1 - kl, w + 1 - kl);
    let mut dtmp = vec![0.0; h * ow];
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        dtmp.fill(0.0);
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (i, &kv) in k.iter().enumerate() {
            for y in 0..oh {
                let srow = &src[y * ow..(y + 1) * ow];
                let trow = &mut dtmp[(y + i) * ow..(y + i + 1) * ow];
                for (t, s) in trow.iter_mut().zip(srow) {
                    *t += kv * s;
                }
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let trow = &dtmp[y * ow..(y + 1) * ow];
            let drow = &mut dst[y * w..(y + 1) * w];
            for (xx, &t) in trow.iter().enumerate() {
                for (d, &kv) in drow[xx..xx + kl].iter_mut().zip(k) {
                    *d += kv * t;
                }
            }
        }
    }
    dx
}
