//! Raw compute kernels shared by the plain ops and the autodiff graph.
//!
//! Everything here is single-threaded and iterates in a fixed order, so
//! identical inputs always produce bitwise-identical outputs.

use crate::scalar::Scalar;

/// im2col for a 3x3 kernel, padding 1, stride 1, into a strided destination.
/// `x` is one sample `(c_in, h, w)`; row `r` of the logical `(c_in*9, h*w)`
/// patch matrix lands at `col[r * row_stride + col_offset ..]`.
pub fn im2col3x3_strided<T: Scalar>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    col: &mut [T],
    row_stride: usize,
    col_offset: usize,
) {
    debug_assert_eq!(x.len(), c_in * h * w);
    let hw = h * w;
    for c in 0..c_in {
        let xc = &x[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (c * 9 + ky * 3 + kx) * row_stride + col_offset;
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut col[row + y * w..row + (y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[sy as usize * w..(sy as usize + 1) * w];
                    if dx == 0 {
                        dst.copy_from_slice(src);
                    } else if dx < 0 {
                        dst[0] = T::zero();
                        dst[1..].copy_from_slice(&src[..w - 1]);
                    } else {
                        dst[w - 1] = T::zero();
                        dst[..w - 1].copy_from_slice(&src[1..]);
                    }
                }
            }
        }
    }
}

/// im2col for one sample into a dense `(c_in * 9, h * w)` matrix.
pub fn im2col3x3<T: Scalar>(x: &[T], c_in: usize, h: usize, w: usize, col: &mut [T]) {
    debug_assert_eq!(col.len(), c_in * 9 * h * w);
    im2col3x3_strided(x, c_in, h, w, col, h * w, 0);
}

/// Adjoint of [`im2col3x3_strided`]: scatters the strided patch matrix back
/// onto the input grid (accumulating into `dx`).
pub fn col2im3x3_strided<T: Scalar>(
    col: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    dx: &mut [T],
    row_stride: usize,
    col_offset: usize,
) {
    debug_assert_eq!(dx.len(), c_in * h * w);
    let hw = h * w;
    for c in 0..c_in {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (c * 9 + ky * 3 + kx) * row_stride + col_offset;
                let dy = ky as isize - 1;
                let dxo = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &col[row + y * w..row + (y + 1) * w];
                    let base = c * hw + sy as usize * w;
                    if dxo == 0 {
                        for x in 0..w {
                            dx[base + x] += src[x];
                        }
                    } else if dxo < 0 {
                        for x in 1..w {
                            dx[base + x - 1] += src[x];
                        }
                    } else {
                        for x in 0..w - 1 {
                            dx[base + x + 1] += src[x];
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 convolution (cross-correlation), padding 1, stride 1.
/// Shapes: x `(n, c_in, h, w)`, weight `(c_out, c_in, 3, 3)`, bias `(c_out)`.
///
/// The whole batch runs as one GEMM over an `(c_in*9, n*h*w)` patch matrix;
/// the `(c_out, n*h*w)` product is then scattered back to NCHW layout.
pub fn conv3x3_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    out: &mut [T],
) {
    let hw = h * w;
    let k = c_in * 9;
    let cols = n * hw;
    let mut col = vec![T::zero(); k * cols];
    for s in 0..n {
        im2col3x3_strided(&x[s * c_in * hw..(s + 1) * c_in * hw], c_in, h, w, &mut col, cols, s * hw);
    }
    let mut prod = vec![T::zero(); c_out * cols];
    T::gemm(c_out, k, cols, T::one(), weight, &col, T::zero(), &mut prod);
    for s in 0..n {
        for o in 0..c_out {
            let b = bias[o];
            let src = &prod[o * cols + s * hw..o * cols + (s + 1) * hw];
            let dst = &mut out[(s * c_out + o) * hw..(s * c_out + o + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
}

/// Backward of [`conv3x3_fwd`]. Accumulates into `dw`, `db`; overwrites `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_bwd<T: Scalar>(
    x: &[T],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    c_out: usize,
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    let hw = h * w;
    let k = c_in * 9;
    let cols = n * hw;
    // gather dY into (c_out, n*hw) layout and take bias sums along the way
    let mut dyb = vec![T::zero(); c_out * cols];
    for s in 0..n {
        for o in 0..c_out {
            let src = &dy[(s * c_out + o) * hw..(s * c_out + o + 1) * hw];
            let dst = &mut dyb[o * cols + s * hw..o * cols + (s + 1) * hw];
            dst.copy_from_slice(src);
            let mut acc = T::zero();
            for &g in src {
                acc += g;
            }
            db[o] += acc;
        }
    }
    let mut col = vec![T::zero(); k * cols];
    for s in 0..n {
        im2col3x3_strided(&x[s * c_in * hw..(s + 1) * c_in * hw], c_in, h, w, &mut col, cols, s * hw);
    }
    // dW += dY (c_out, cols) x col^T (cols, k)
    T::gemm_strided(
        c_out, cols, k, T::one(),
        &dyb, cols as isize, 1,
        &col, 1, cols as isize,
        T::one(), dw, k as isize, 1,
    );
    // dcol = W^T (k, c_out) x dY (c_out, cols)
    let mut dcol = vec![T::zero(); k * cols];
    T::gemm_strided(
        k, c_out, cols, T::one(),
        weight, 1, k as isize,
        &dyb, cols as isize, 1,
        T::zero(), &mut dcol, cols as isize, 1,
    );
    dx.fill(T::zero());
    for s in 0..n {
        col2im3x3_strided(&dcol, c_in, h, w, &mut dx[s * c_in * hw..(s + 1) * c_in * hw], cols, s * hw);
    }
}

/// Pointwise (1x1) convolution. Weight `(c_out, c_in)`, bias `(c_out)`.
pub fn conv1x1_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    c_in: usize,
    hw: usize,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    out: &mut [T],
) {
    for s in 0..n {
        let xs = &x[s * c_in * hw..(s + 1) * c_in * hw];
        let y = &mut out[s * c_out * hw..(s + 1) * c_out * hw];
        T::gemm(c_out, c_in, hw, T::one(), weight, xs, T::zero(), y);
        for o in 0..c_out {
            let b = bias[o];
            for v in &mut y[o * hw..(o + 1) * hw] {
                *v += b;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1x1_bwd<T: Scalar>(
    x: &[T],
    n: usize,
    c_in: usize,
    hw: usize,
    weight: &[T],
    c_out: usize,
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    for s in 0..n {
        let xs = &x[s * c_in * hw..(s + 1) * c_in * hw];
        let dys = &dy[s * c_out * hw..(s + 1) * c_out * hw];
        for o in 0..c_out {
            let mut acc = T::zero();
            for &g in &dys[o * hw..(o + 1) * hw] {
                acc += g;
            }
            db[o] += acc;
        }
        // dW += dY (c_out, hw) x X^T (hw, c_in)
        T::gemm_strided(
            c_out, hw, c_in, T::one(),
            dys, hw as isize, 1,
            xs, 1, hw as isize,
            T::one(), dw, c_in as isize, 1,
        );
        // dX = W^T (c_in, c_out) x dY
        T::gemm_strided(
            c_in, c_out, hw, T::one(),
            weight, 1, c_in as isize,
            dys, hw as isize, 1,
            T::zero(), &mut dx[s * c_in * hw..(s + 1) * c_in * hw], hw as isize, 1,
        );
    }
}

/// Affine map over the last dimension: y = x W^T + b.
/// `x` is `(rows, d_in)` flattened, weight `(d_out, d_in)`.
pub fn linear_fwd<T: Scalar>(x: &[T], rows: usize, d_in: usize, weight: &[T], bias: &[T], d_out: usize, out: &mut [T]) {
    T::gemm_strided(
        rows, d_in, d_out, T::one(),
        x, d_in as isize, 1,
        weight, 1, d_in as isize,
        T::zero(), out, d_out as isize, 1,
    );
    for r in 0..rows {
        let row = &mut out[r * d_out..(r + 1) * d_out];
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<T: Scalar>(
    x: &[T],
    rows: usize,
    d_in: usize,
    weight: &[T],
    d_out: usize,
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    // dX = dY (rows, d_out) x W (d_out, d_in)
    T::gemm(rows, d_out, d_in, T::one(), dy, weight, T::zero(), dx);
    // dW += dY^T (d_out, rows) x X (rows, d_in)
    T::gemm_strided(
        d_out, rows, d_in, T::one(),
        dy, 1, d_out as isize,
        x, d_in as isize, 1,
        T::one(), dw, d_in as isize, 1,
    );
    for r in 0..rows {
        let row = &dy[r * d_out..(r + 1) * d_out];
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_rows<T: Scalar>(data: &mut [T], row_len: usize) {
    debug_assert_eq!(data.len() % row_len, 0);
    for row in data.chunks_mut(row_len) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// LayerNorm over the channel axis of an `(n, c, h, w)` tensor.
/// Returns per-position `(mean, rstd)` for the backward pass, laid out `(n, h, w)`.
pub fn layernorm_chan_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let mut mean = vec![T::zero(); n * hw];
    let mut rstd = vec![T::zero(); n * hw];
    let cf = T::from_f64(c as f64);
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let mut m = T::zero();
            for ch in 0..c {
                m += x[base + ch * hw + p];
            }
            m = m / cf;
            let mut var = T::zero();
            for ch in 0..c {
                let d = x[base + ch * hw + p] - m;
                var += d * d;
            }
            var = var / cf;
            let r = T::one() / (var + eps).sqrt();
            mean[s * hw + p] = m;
            rstd[s * hw + p] = r;
            for ch in 0..c {
                let xh = (x[base + ch * hw + p] - m) * r;
                out[base + ch * hw + p] = xh * gamma[ch] + beta[ch];
            }
        }
    }
    (mean, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_chan_bwd<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let cf = T::from_f64(c as f64);
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let m = mean[s * hw + p];
            let r = rstd[s * hw + p];
            // First pass: the two reductions over channels.
            let mut sum_gdy = T::zero();
            let mut sum_gdy_xh = T::zero();
            for ch in 0..c {
                let idx = base + ch * hw + p;
                let xh = (x[idx] - m) * r;
                let g = gamma[ch] * dy[idx];
                sum_gdy += g;
                sum_gdy_xh += g * xh;
                dgamma[ch] += dy[idx] * xh;
                dbeta[ch] += dy[idx];
            }
            let inv_c = T::one() / cf;
            for ch in 0..c {
                let idx = base + ch * hw + p;
                let xh = (x[idx] - m) * r;
                let g = gamma[ch] * dy[idx];
                dx[idx] = (g - sum_gdy * inv_c - xh * (sum_gdy_xh * inv_c)) * r;
            }
        }
    }
}

/// Space-to-depth: `(n, c, h, w)` -> `(n, c*s^2, h/s, w/s)`.
/// Output channel index is `c*s^2 + dy*s + dx` for sub-pixel offset `(dy, dx)`.
pub fn pixel_unshuffle_raw<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, s: usize, out: &mut [T]) {
    let oh = h / s;
    let ow = w / s;
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..s {
                for dx in 0..s {
                    let oc = ch * s * s + dy * s + dx;
                    for y in 0..oh {
                        let src_row = b * c * h * w + ch * h * w + (y * s + dy) * w;
                        let dst_row = b * c * s * s * oh * ow + oc * oh * ow + y * ow;
                        for xo in 0..ow {
                            out[dst_row + xo] = x[src_row + xo * s + dx];
                        }
                    }
                }
            }
        }
    }
}

/// Depth-to-space, the exact inverse of [`pixel_unshuffle_raw`].
pub fn pixel_shuffle_raw<T: Scalar>(x: &[T], n: usize, c_out: usize, h: usize, w: usize, s: usize, out: &mut [T]) {
    // x is (n, c_out*s^2, h, w); out is (n, c_out, h*s, w*s)
    let oh = h * s;
    let ow = w * s;
    for b in 0..n {
        for ch in 0..c_out {
            for dy in 0..s {
                for dx in 0..s {
                    let ic = ch * s * s + dy * s + dx;
                    for y in 0..h {
                        let src_row = b * c_out * s * s * h * w + ic * h * w + y * w;
                        let dst_row = b * c_out * oh * ow + ch * oh * ow + (y * s + dy) * ow;
                        for xo in 0..w {
                            out[dst_row + xo * s + dx] = x[src_row + xo];
                        }
                    }
                }
            }
        }
    }
}

/// Cyclic 2-D roll of the spatial dims of an `(n, c, h, w)` tensor.
pub fn roll2d_raw<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, dy: isize, dx: isize, out: &mut [T]) {
    let hw = h * w;
    let dy = dy.rem_euclid(h as isize) as usize;
    let dx = dx.rem_euclid(w as isize) as usize;
    for plane in 0..n * c {
        let src = &x[plane * hw..(plane + 1) * hw];
        let dst = &mut out[plane * hw..(plane + 1) * hw];
        for y in 0..h {
            let ty = (y + dy) % h;
            for xo in 0..w {
                let tx = (xo + dx) % w;
                dst[ty * w + tx] = src[y * w + xo];
            }
        }
    }
}

/// Partition `(n, c, h, w)` into non-overlapping `win x win` windows as
/// token sequences: output `(n*nh*nw, win*win, c)`.
pub fn window_partition_raw<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, win: usize, out: &mut [T]) {
    let nh = h / win;
    let nw = w / win;
    let t = win * win;
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                let widx = (b * nh + wy) * nw + wx;
                for ty in 0..win {
                    for tx in 0..win {
                        let tok = ty * win + tx;
                        let sy = wy * win + ty;
                        let sx = wx * win + tx;
                        for ch in 0..c {
                            out[(widx * t + tok) * c + ch] = x[((b * c + ch) * h + sy) * w + sx];
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`window_partition_raw`].
pub fn window_merge_raw<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, win: usize, out: &mut [T]) {
    let nh = h / win;
    let nw = w / win;
    let t = win * win;
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                let widx = (b * nh + wy) * nw + wx;
                for ty in 0..win {
                    for tx in 0..win {
                        let tok = ty * win + tx;
                        let sy = wy * win + ty;
                        let sx = wx * win + tx;
                        for ch in 0..c {
                            out[((b * c + ch) * h + sy) * w + sx] = x[(widx * t + tok) * c + ch];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise valid-mode correlation with a constant square kernel
/// (used by the SSIM Gaussian window). Output is `(n, c, h-k+1, w-k+1)`.
pub fn filter_valid_fwd<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, kernel: &[T], k: usize, out: &mut [T]) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = T::zero();
                for ky in 0..k {
                    let row = &src[(y + ky) * w + xo..(y + ky) * w + xo + k];
                    let krow = &kernel[ky * k..(ky + 1) * k];
                    for (a, b) in row.iter().zip(krow) {
                        acc += *a * *b;
                    }
                }
                dst[y * ow + xo] = acc;
            }
        }
    }
}

/// Adjoint of [`filter_valid_fwd`]: scatters `dy` through the kernel
/// back onto the input grid (accumulating into `dx`).
pub fn filter_valid_bwd<T: Scalar>(dy: &[T], n: usize, c: usize, h: usize, w: usize, kernel: &[T], k: usize, dx: &mut [T]) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    for plane in 0..n * c {
        let g = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let gv = g[y * ow + xo];
                for ky in 0..k {
                    let base = (y + ky) * w + xo;
                    let krow = &kernel[ky * k..(ky + 1) * k];
                    for kx in 0..k {
                        d[base + kx] += gv * krow[kx];
                    }
                }
            }
        }
    }
}

/// Global average pooling `(n, c, h, w)` -> `(n, c)`.
///
/// Accumulates in f64 so the result is exactly invariant to spatial
/// permutations of f32 inputs.
pub fn gap_fwd<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize, out: &mut [T]) {
    for b in 0..n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let mut acc = 0.0f64;
            for &v in plane {
                acc += v.as_f64();
            }
            out[b * c + ch] = T::from_f64(acc / hw as f64);
        }
    }
}
