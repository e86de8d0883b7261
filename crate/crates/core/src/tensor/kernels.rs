//! Raw numeric kernels over flat row-major slices.
//!
//! These carry no autodiff bookkeeping. The tape calls into them, and
//! inference-only paths (teacher inputs, generation) use them directly so both
//! routes produce bitwise-identical values.

/// Dot product with eight independent accumulators (fixed order, so results
/// are reproducible).
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let aa = &a[c * 8..c * 8 + 8];
        let bb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += aa[l] * bb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], out_row);
            }
        }
    }
}

pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc(out: &mut [f32], g: &[f32], b: &[f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(g_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn matmul_tn_acc(out: &mut [f32], a: &[f32], g: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, g_row, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Spatial output size of a convolution, `None` when the kernel does not fit.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 || x_shape[1] != w_shape[1] {
            return None;
        }
        let oh = conv_out_size(x_shape[2], w_shape[2], stride, pad)?;
        let ow = conv_out_size(x_shape[3], w_shape[3], stride, pad)?;
        Some(ConvGeom {
            batch: x_shape[0],
            in_ch: x_shape[1],
            h: x_shape[2],
            w: x_shape[3],
            out_ch: w_shape[0],
            kh: w_shape[2],
            kw: w_shape[3],
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.oh, self.ow]
    }
}

/// Unfold one image `[C×H×W]` into columns `[C·kh·kw × oh·ow]`.
fn im2col(img: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plane = g.out_plane();
    let mut cols = vec![0.0; g.patch_len() * plane];
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &img[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(cols: &[f32], g: &ConvGeom, img: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            img[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `x[B×C×H×W] ⋆ w[O×C×kh×kw]`, no bias.
pub fn conv2d_forward(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let in_img = g.in_ch * g.h * g.w;
    let out_img = g.out_ch * g.out_plane();
    let mut out = vec![0.0; g.batch * out_img];
    for b in 0..g.batch {
        let cols = im2col(&x[b * in_img..(b + 1) * in_img], g);
        matmul_acc(
            &mut out[b * out_img..(b + 1) * out_img],
            w,
            &cols,
            g.out_ch,
            g.patch_len(),
            g.out_plane(),
        );
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and weights.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let in_img = g.in_ch * g.h * g.w;
    let out_img = g.out_ch * g.out_plane();
    let patch = g.patch_len();
    let plane = g.out_plane();
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    let wt = want_x.then(|| transpose(w, g.out_ch, patch));
    for b in 0..g.batch {
        let go = &grad_out[b * out_img..(b + 1) * out_img];
        if let Some(gw) = gw.as_mut() {
            let cols = im2col(&x[b * in_img..(b + 1) * in_img], g);
            matmul_nt_acc(gw, go, &cols, g.out_ch, plane, patch);
        }
        if let (Some(gx), Some(wt)) = (gx.as_mut(), wt.as_ref()) {
            let gcols = matmul(wt, go, patch, g.out_ch, plane);
            col2im_acc(&gcols, g, &mut gx[b * in_img..(b + 1) * in_img]);
        }
    }
    (gx, gw)
}

/// Convolution with optional per-output-channel bias; inference convenience.
pub fn conv2d(x: &[f32], g: &ConvGeom, w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = conv2d_forward(x, w, g);
    if let Some(bias) = bias {
        let plane = g.out_plane();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = bias[i % g.out_ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Linear interpolation taps along one axis (align-corners-false convention).
#[derive(Debug, Clone)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f32>,
}

impl AxisTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for d in 0..out_len {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push((src - i0 as f64) as f32);
        }
        AxisTaps { lo, hi, frac }
    }
}

/// Bilinear resize of `planes` independent `in_h×in_w` maps.
pub fn bilinear_resize(
    x: &[f32],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    if in_h == out_h && in_w == out_w {
        return x.to_vec();
    }
    let ty = AxisTaps::new(in_h, out_h);
    let tx = AxisTaps::new(in_w, out_w);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = (1.0 - fx) * src[y0 * in_w + x0] + fx * src[y0 * in_w + x1];
                let bot = (1.0 - fx) * src[y1 * in_w + x0] + fx * src[y1 * in_w + x1];
                dst[oy * out_w + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

pub fn bilinear_resize_backward(
    grad: &[f32],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    if in_h == out_h && in_w == out_w {
        return grad.to_vec();
    }
    let ty = AxisTaps::new(in_h, out_h);
    let tx = AxisTaps::new(in_w, out_w);
    let mut gx = vec![0.0; planes * in_h * in_w];
    for p in 0..planes {
        let src = &grad[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut gx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let g = src[oy * out_w + ox];
                dst[y0 * in_w + x0] += (1.0 - fy) * (1.0 - fx) * g;
                dst[y0 * in_w + x1] += (1.0 - fy) * fx * g;
                dst[y1 * in_w + x0] += fy * (1.0 - fx) * g;
                dst[y1 * in_w + x1] += fy * fx * g;
            }
        }
    }
    gx
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))) as f32
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    (cdf + x * pdf) as f32
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    let x = x as f64;
    (1.0 / (1.0 + (-x).exp())) as f32
}

/// Numerically stable softmax in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
