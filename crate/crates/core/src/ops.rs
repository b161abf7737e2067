//! Forward and analytic backward kernels for every layer primitive.
//!
//! These are plain functions over tensors; [`crate::autodiff::Tape`] wires
//! them into a trace. All image tensors are NCHW.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Upper bound on the im2col buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

/// Output extent of a zero-padded ("same") convolution.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (extent + 2 * pad - kernel) / stride + 1
}

fn check_conv<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<ConvGeom> {
    let (n, cin, h, w) = input.nchw()?;
    let (cout, kcin, kh, kw) = kernel.nchw()?;
    if kcin != cin {
        return shape_err(format!("conv2d: input has {cin} channels, kernel expects {kcin}"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return shape_err(format!("conv2d: same-zero padding needs odd kernel, got {kh}x{kw}"));
    }
    if cout == 0 || stride == 0 {
        return shape_err("conv2d: out channels and stride must be positive");
    }
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return shape_err(format!("conv2d: bias dims {:?}, expected [{cout}]", b.dims()));
        }
    }
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(w, kw, stride);
    Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, ho, wo })
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.k() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Fill `cols` (K × rows·Wo) with the receptive fields of output rows `y0..y1`.
    fn im2col<T: Real>(&self, plane: &[T], y0: usize, y1: usize, cols: &mut [T]) {
        let p = (y1 - y0) * self.wo;
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for ic in 0..self.cin {
            let src = &plane[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ic * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in y0..y1 {
                        let iy = (oy * self.stride) as isize + ky as isize - ph;
                        let out_row = &mut dst[(oy - y0) * self.wo..(oy - y0 + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride) as isize + kx as isize - pw;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Valid output rows and columns for kernel tap offset `(dy, dx)` at
    /// stride 1, as `(oy0, oy1, ox0, ox1)`.
    fn tap_range(&self, dy: isize, dx: isize) -> (usize, usize, usize, usize) {
        let clip = |d: isize, n: usize| ((-d).max(0) as usize, (n as isize - d.max(0)).max(0) as usize);
        let (oy0, oy1) = clip(dy, self.h);
        let (ox0, ox1) = clip(dx, self.w);
        (oy0, oy1, ox0, ox1)
    }

    /// Stride-1 convolution as row-wise multiply-adds, one kernel tap at a time.
    fn direct_forward<T: Real>(&self, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Tensor<T> {
        let (hw, kk) = (self.h * self.w, self.kh * self.kw);
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let mut out = Tensor::zeros(&[self.n, self.cout, self.h, self.w]);
        let od = out.data_mut();
        for n in 0..self.n {
            for oc in 0..self.cout {
                let o = &mut od[(n * self.cout + oc) * hw..][..hw];
                if let Some(b) = bias {
                    o.iter_mut().for_each(|v| *v = b[oc]);
                }
                for ic in 0..self.cin {
                    let x = &input[(n * self.cin + ic) * hw..][..hw];
                    let taps = &kernel[(oc * self.cin + ic) * kk..][..kk];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wv = taps[ky * self.kw + kx];
                            let (dy, dx) = (ky as isize - ph, kx as isize - pw);
                            let (oy0, oy1, ox0, ox1) = self.tap_range(dy, dx);
                            for oy in oy0..oy1 {
                                let iy = (oy as isize + dy) as usize;
                                let ix0 = (ox0 as isize + dx) as usize;
                                let dst = &mut o[oy * self.w + ox0..oy * self.w + ox1];
                                let src = &x[iy * self.w + ix0..iy * self.w + ix0 + (ox1 - ox0)];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = *d + wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn direct_backward<T: Real>(&self, input: &[T], kernel: &[T], grad_out: &[T]) -> ConvGrads<T> {
        let (hw, kk) = (self.h * self.w, self.kh * self.kw);
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let mut gin = Tensor::zeros(&[self.n, self.cin, self.h, self.w]);
        let mut gker = Tensor::zeros(&[self.cout, self.cin, self.kh, self.kw]);
        let mut gbias = Tensor::zeros(&[self.cout]);
        for n in 0..self.n {
            for oc in 0..self.cout {
                let go = &grad_out[(n * self.cout + oc) * hw..][..hw];
                gbias.data_mut()[oc] = gbias.data()[oc] + go.iter().copied().sum::<T>();
                for ic in 0..self.cin {
                    let x = &input[(n * self.cin + ic) * hw..][..hw];
                    let gi = &mut gin.data_mut()[(n * self.cin + ic) * hw..][..hw];
                    let taps = &kernel[(oc * self.cin + ic) * kk..][..kk];
                    let gtaps = &mut gker.data_mut()[(oc * self.cin + ic) * kk..][..kk];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wv = taps[ky * self.kw + kx];
                            let (dy, dx) = (ky as isize - ph, kx as isize - pw);
                            let (oy0, oy1, ox0, ox1) = self.tap_range(dy, dx);
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = (oy as isize + dy) as usize;
                                let ix0 = (ox0 as isize + dx) as usize;
                                let g = &go[oy * self.w + ox0..oy * self.w + ox1];
                                let xi = iy * self.w + ix0..iy * self.w + ix0 + (ox1 - ox0);
                                acc = acc + dot(g, &x[xi.clone()]);
                                for (d, &s) in gi[xi].iter_mut().zip(g) {
                                    *d = *d + wv * s;
                                }
                            }
                            gtaps[ky * self.kw + kx] = gtaps[ky * self.kw + kx] + acc;
                        }
                    }
                }
            }
        }
        ConvGrads { input: gin, kernel: gker, bias: gbias }
    }

    /// Scatter-add `cols` back into the input-gradient plane (adjoint of `im2col`).
    fn col2im<T: Real>(&self, cols: &[T], y0: usize, y1: usize, plane: &mut [T]) {
        let p = (y1 - y0) * self.wo;
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for ic in 0..self.cin {
            let dst = &mut plane[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ic * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in y0..y1 {
                        let iy = (oy * self.stride) as isize + ky as isize - ph;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let src_row = &src[(oy - y0) * self.wo..(oy - y0 + 1) * self.wo];
                        for (ox, &v) in src_row.iter().enumerate() {
                            let ix = (ox * self.stride) as isize + kx as isize - pw;
                            if ix >= 0 && ix < self.w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] = lanes[i] + x[i] * y[i];
        }
    }
    let mut s = lanes.iter().copied().sum::<T>();
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// Zero-padded 2-D convolution (cross-correlation).
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = check_conv(input, kernel, bias, stride)?;
    input.ensure_finite("conv2d input")?;
    if stride == 1 {
        return Ok(g.direct_forward(input.data(), kernel.data(), bias.map(|b| b.data())));
    }
    let k = g.k();
    let plane_out = g.ho * g.wo;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    let rows = g.rows_per_chunk();
    let mut cols = vec![T::zero(); k * rows * g.wo];
    let in_len = g.cin * g.h * g.w;
    for n in 0..g.n {
        let plane = &input.data()[n * in_len..(n + 1) * in_len];
        let out_n = &mut out.data_mut()[n * g.cout * plane_out..(n + 1) * g.cout * plane_out];
        if let Some(b) = bias {
            for (oc, chunk) in out_n.chunks_mut(plane_out).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[oc]);
            }
        }
        let mut y0 = 0;
        while y0 < g.ho {
            let y1 = (y0 + rows).min(g.ho);
            let p = (y1 - y0) * g.wo;
            g.im2col(plane, y0, y1, &mut cols[..k * p]);
            T::gemm(
                g.cout,
                k,
                p,
                T::one(),
                kernel.data(),
                (k as isize, 1),
                &cols[..k * p],
                (p as isize, 1),
                T::one(),
                &mut out_n[y0 * g.wo..],
                (plane_out as isize, 1),
            );
            y0 = y1;
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = check_conv(input, kernel, None, stride)?;
    if grad_out.dims() != [g.n, g.cout, g.ho, g.wo] {
        return shape_err(format!("conv2d backward: grad dims {:?}", grad_out.dims()));
    }
    if stride == 1 {
        return Ok(g.direct_backward(input.data(), kernel.data(), grad_out.data()));
    }
    let k = g.k();
    let plane_out = g.ho * g.wo;
    let in_len = g.cin * g.h * g.w;
    let mut gin = Tensor::zeros(input.dims());
    let mut gker = Tensor::zeros(kernel.dims());
    let mut gbias = Tensor::zeros(&[g.cout]);
    let rows = g.rows_per_chunk();
    let mut cols = vec![T::zero(); k * rows * g.wo];
    let mut gcols = vec![T::zero(); k * rows * g.wo];
    for n in 0..g.n {
        let plane = &input.data()[n * in_len..(n + 1) * in_len];
        let gout_n = &grad_out.data()[n * g.cout * plane_out..(n + 1) * g.cout * plane_out];
        for (oc, chunk) in gout_n.chunks(plane_out).enumerate() {
            let s: T = chunk.iter().copied().sum();
            gbias.data_mut()[oc] = gbias.data()[oc] + s;
        }
        let gin_n = &mut gin.data_mut()[n * in_len..(n + 1) * in_len];
        let mut y0 = 0;
        while y0 < g.ho {
            let y1 = (y0 + rows).min(g.ho);
            let p = (y1 - y0) * g.wo;
            g.im2col(plane, y0, y1, &mut cols[..k * p]);
            // dK += dY · colsᵀ
            T::gemm(
                g.cout,
                p,
                k,
                T::one(),
                &gout_n[y0 * g.wo..],
                (plane_out as isize, 1),
                &cols[..k * p],
                (1, p as isize),
                T::one(),
                gker.data_mut(),
                (k as isize, 1),
            );
            // dcols = Kᵀ · dY
            T::gemm(
                k,
                g.cout,
                p,
                T::one(),
                kernel.data(),
                (1, k as isize),
                &gout_n[y0 * g.wo..],
                (plane_out as isize, 1),
                T::zero(),
                &mut gcols[..k * p],
                (p as isize, 1),
            );
            g.col2im(&gcols[..k * p], y0, y1, gin_n);
            y0 = y1;
        }
    }
    Ok(ConvGrads { input: gin, kernel: gker, bias: gbias })
}

/// Per-channel statistics cached by a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Real> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub training: bool,
}

fn check_bn<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let (_, c, _, _) = input.nchw()?;
    if gamma.dims() != [c] || beta.dims() != [c] {
        return shape_err(format!(
            "batchnorm: input has {c} channels, gamma {:?} beta {:?}",
            gamma.dims(),
            beta.dims()
        ));
    }
    Ok(c)
}

/// Batch normalization. In training mode statistics come from the batch
/// (biased variance over N, H, W); otherwise from `running`.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&Tensor<T>, &Tensor<T>)>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = check_bn(input, gamma, beta)?;
    let (n, _, h, w) = input.nchw()?;
    let hw = h * w;
    let count = T::from_usize(n * hw).expect("count");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let training = running.is_none();
    match running {
        None => {
            if n * hw == 0 {
                return shape_err("batchnorm: empty batch in training mode");
            }
            for ch in 0..c {
                let s: T = (0..n).map(|b| input.plane(b, ch).iter().copied().sum::<T>()).sum();
                mean[ch] = s / count;
                let ss: T = (0..n)
                    .map(|b| {
                        input.plane(b, ch).iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>()
                    })
                    .sum();
                var[ch] = ss / count;
            }
        }
        Some((rm, rv)) => {
            if rm.dims() != [c] || rv.dims() != [c] {
                return shape_err("batchnorm: running stats channel mismatch");
            }
            mean.copy_from_slice(rm.data());
            var.copy_from_slice(rv.data());
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(input.dims());
    let mut out = Tensor::zeros(input.dims());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let src = &input.data()[off..off + hw];
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in 0..hw {
                let xh = (src[i] - mean[ch]) * inv_std[ch];
                x_hat.data_mut()[off + i] = xh;
                out.data_mut()[off + i] = gm * xh + bt;
            }
        }
    }
    Ok((out, BatchNormCache { x_hat, inv_std, batch_mean: mean, batch_var: var, training }))
}

pub struct BatchNormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_backward<T: Real>(
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (n, c, h, w) = grad_out.nchw()?;
    if grad_out.dims() != cache.x_hat.dims() {
        return shape_err("batchnorm backward: gradient dims mismatch");
    }
    let hw = h * w;
    let m = T::from_usize(n * hw).expect("count");
    let mut gin = Tensor::zeros(grad_out.dims());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let dy = grad_out.data()[i];
                sum_dy = sum_dy + dy;
                sum_dy_xh = sum_dy_xh + dy * cache.x_hat.data()[i];
            }
        }
        gbeta.data_mut()[ch] = sum_dy;
        ggamma.data_mut()[ch] = sum_dy_xh;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let dy = grad_out.data()[i];
                gin.data_mut()[i] = if cache.training {
                    scale / m * (m * dy - sum_dy - cache.x_hat.data()[i] * sum_dy_xh)
                } else {
                    scale * dy
                };
            }
        }
    }
    Ok(BatchNormGrads { input: gin, gamma: ggamma, beta: gbeta })
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient only where the input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.dims(), data).expect("same dims")
}

/// 2×2 max pooling, stride 2. Returns the output and, per output element,
/// the flat input index of the (first, row-major) maximum.
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("maxpool2: spatial extent {h}x{w} is not even"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let x = input.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                out.data_mut()[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Real>(
    input_dims: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gin = Tensor::zeros(input_dims);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gin.data_mut()[i] = gin.data()[i] + g;
    }
    gin
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for p in 0..n * c {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                dst[y * wo + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    Ok(out)
}

/// Sums each 2×2 block of the output gradient.
pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, ho, wo) = grad_out.nchw()?;
    let (h, w) = (ho / 2, wo / 2);
    let mut gin = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let src = &grad_out.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut gin.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let d = &mut dst[(y / 2) * w + x / 2];
                *d = *d + src[y * wo + x];
            }
        }
    }
    Ok(gin)
}

/// Channel concatenation, `a` first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.nchw()?;
    let (nb, cb, hb, wb) = b.nchw()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return shape_err(format!(
            "concat: batch/spatial mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        ));
    }
    let hw = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(&a.data()[n * ca * hw..(n + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[n * cb * hw..(n + 1) * cb * hw]);
    }
    Tensor::from_vec(&[na, ca + cb, ha, wa], data)
}

pub fn concat_backward<T: Real>(
    ca: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.nchw()?;
    let cb = c - ca;
    let hw = h * w;
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for s in 0..n {
        let off = s * c * hw;
        ga.extend_from_slice(&grad_out.data()[off..off + ca * hw]);
        gb.extend_from_slice(&grad_out.data()[off + ca * hw..off + c * hw]);
    }
    Ok((Tensor::from_vec(&[n, ca, h, w], ga)?, Tensor::from_vec(&[n, cb, h, w], gb)?))
}

/// Per-pixel softmax over the channel axis, stabilized by max subtraction.
pub fn softmax_channels<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    if c < 2 {
        return shape_err(format!("softmax needs at least 2 channels, got {c}"));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(input.dims());
    let x = input.data();
    let mut buf = vec![T::zero(); c];
    for s in 0..n {
        let base = s * c * hw;
        for i in 0..hw {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(x[base + ch * hw + i]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                buf[ch] = (x[base + ch * hw + i] - mx).exp();
                z = z + buf[ch];
            }
            for ch in 0..c {
                out.data_mut()[base + ch * hw + i] = buf[ch] / z;
            }
        }
    }
    Ok(out)
}

/// `dx = y ⊙ (dy − Σ_c y·dy)` per pixel.
pub fn softmax_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = output.nchw()?;
    let hw = h * w;
    let (y, dy) = (output.data(), grad_out.data());
    let mut gin = Tensor::zeros(output.dims());
    for s in 0..n {
        let base = s * c * hw;
        for i in 0..hw {
            let dot: T = (0..c).map(|ch| y[base + ch * hw + i] * dy[base + ch * hw + i]).sum();
            for ch in 0..c {
                let j = base + ch * hw + i;
                gin.data_mut()[j] = y[j] * (dy[j] - dot);
            }
        }
    }
    Ok(gin)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return shape_err(format!("add: dims {:?} vs {:?}", a.dims(), b.dims()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.dims(), data)
}
