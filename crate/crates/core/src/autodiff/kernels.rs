//! Raw slice kernels behind the differentiable ops. Nothing here knows about
//! graphs; every function takes row-major buffers and returns a fresh one.

/// Geometry shared by a convolution and its two adjoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + k - pad` lands
/// inside `[0, in_len)`.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let k = k as isize;
    let pad = pad as isize;
    let s = stride as isize;
    // smallest o with o*s + k - pad >= 0
    let lo = if pad - k <= 0 { 0 } else { (pad - k + s - 1) / s };
    // largest o with o*s + k - pad <= in_len - 1
    let top = in_len as isize - 1 + pad - k;
    let hi = if top < 0 { 0 } else { (top / s + 1).min(out_len as isize) };
    let lo = lo.min(out_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

/// Unfolds one image `(C_in, H, W)` into columns `(C_in·KH·KW, OH·OW)`.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let plane = oh_n * ow_n;
    col.fill(0.0);
    for ci in 0..g.c_in {
        let xin = &x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, oh_n);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, ow_n);
                let dst = &mut col[((ci * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let row = &xin[iy * g.w..][..g.w];
                    let drow = &mut dst[oy * ow_n..][..ow_n];
                    if g.stride == 1 {
                        let off = ox0 + kx - g.pad;
                        drow[ox0..ox1].copy_from_slice(&row[off..off + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] = row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let plane = oh_n * ow_n;
    for ci in 0..g.c_in {
        let xin = &mut x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, oh_n);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, ow_n);
                let src = &col[((ci * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let row = &mut xin[iy * g.w..][..g.w];
                    let srow = &src[oy * ow_n..][..ow_n];
                    if g.stride == 1 {
                        let off = ox0 + kx - g.pad;
                        for (d, s) in row[off..off + (ox1 - ox0)].iter_mut().zip(&srow[ox0..ox1]) {
                            *d += s;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            row[ox * g.stride + kx - g.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let k = g.c_in * g.kh * g.kw;
    let mut col = vec![0.0; k * plane];
    let mut out = Vec::with_capacity(g.batch * g.c_out * plane);
    for b in 0..g.batch {
        im2col(&x[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w], g, &mut col);
        out.extend(matmul(w, &col, g.c_out, k, plane));
    }
    out
}

/// Adjoint of [`conv2d`] in its input argument.
pub fn conv2d_grad_input(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let k = g.c_in * g.kh * g.kw;
    let img = g.c_in * g.h * g.w;
    let wt = transpose(w, g.c_out, k);
    let mut gx = vec![0.0; g.batch * img];
    for b in 0..g.batch {
        let col = matmul(&wt, &gy[b * g.c_out * plane..][..g.c_out * plane], k, g.c_out, plane);
        col2im(&col, g, &mut gx[b * img..][..img]);
    }
    gx
}

/// Adjoint of [`conv2d`] in its weight argument.
pub fn conv2d_grad_weight(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let k = g.c_in * g.kh * g.kw;
    let mut col = vec![0.0; k * plane];
    let mut gw = vec![0.0; g.c_out * k];
    for b in 0..g.batch {
        im2col(&x[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w], g, &mut col);
        let gyb = &gy[b * g.c_out * plane..][..g.c_out * plane];
        for (co, grow) in gyb.chunks(plane).enumerate() {
            let dst = &mut gw[co * k..][..k];
            for (d, crow) in dst.iter_mut().zip(col.chunks(plane)) {
                *d += dot(grow, crow);
            }
        }
    }
    gw
}

/// Dot product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if n < 8 {
        // narrow outputs: dot products against the transposed right factor
        let bt = transpose(b, k, n);
        let mut out = Vec::with_capacity(m * n);
        for arow in a.chunks(k.max(1)).take(m) {
            out.extend(bt.chunks(k.max(1)).take(n).map(|bcol| dot(arow, bcol)));
        }
        out.resize(m * n, 0.0);
        return out;
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for (p, &av) in a[i * k..][..k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Non-overlapping `k`x`k` average pooling over the trailing two axes.
/// Rows/columns that do not fill a whole window are dropped.
pub fn avg_pool2d(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for (xin, o) in x.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for iy in 0..oh * k {
            let orow = &mut o[(iy / k) * ow..][..ow];
            for (ox, chunk) in xin[iy * w..][..ow * k].chunks(k).enumerate() {
                orow[ox] += chunk.iter().sum::<f64>() * scale;
            }
        }
    }
    debug_assert_eq!(out.len(), planes * oh * ow);
    out
}

pub fn avg_pool2d_adjoint(gy: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; planes * h * w];
    for (g, o) in gy.chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
        for iy in 0..oh * k {
            let grow = &g[(iy / k) * ow..][..ow];
            for (ox, chunk) in o[iy * w..][..ow * k].chunks_mut(k).enumerate() {
                chunk.fill(grow[ox] * scale);
            }
        }
    }
    debug_assert_eq!(gx.len(), planes * h * w);
    gx
}

/// Source index of every max-pool output; ties resolve to the first maximal
/// element in row-major scan order.
pub fn max_pool2d_argmax(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<usize> {
    let (oh, ow) = (h / k, w / k);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let at = base + (oy * k + dy) * w + ox * k + dx;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> ConvGeom {
        ConvGeom {
            batch: 1,
            c_in: 1,
            c_out: 1,
            h,
            w,
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    // Direct definition of cross-correlation with zero padding.
    fn conv_naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.out_h() * g.out_w()];
        for oy in 0..g.out_h() {
            for ox in 0..g.out_w() {
                let mut acc = 0.0;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            acc += x[iy as usize * g.w + ix as usize] * w[ky * g.kw + kx];
                        }
                    }
                }
                out[oy * g.out_w() + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn ones_image_ones_kernel() {
        let g = geom(4, 4, 3, 1, 0);
        assert_eq!(conv2d(&[1.0; 16], &[1.0; 9], &g), vec![9.0; 4]);
    }

    #[test]
    fn matches_naive_with_stride_and_pad() {
        let x: Vec<f64> = (0..35).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..9).map(|i| (i as f64 * 1.3).cos()).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let g = ConvGeom { h: 5, w: 7, ..geom(5, 7, 3, stride, pad) };
            let fast = conv2d(&x, &w, &g);
            let slow = conv_naive(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let g = ConvGeom {
            batch: 2,
            c_in: 2,
            c_out: 3,
            h: 5,
            w: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 2 * 20).map(|i| (i as f64 * 0.71).sin()).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.13).cos()).collect();
        let gy: Vec<f64> = (0..2 * 3 * g.out_h() * g.out_w())
            .map(|i| (i as f64 * 0.29).sin())
            .collect();
        let y = conv2d(&x, &w, &g);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let gx = conv2d_grad_input(&gy, &w, &g);
        let gw = conv2d_grad_weight(&x, &gy, &g);
        let via_x: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn max_pool_ties_pick_first() {
        let x = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(max_pool2d_argmax(&x, 1, 2, 2, 2), vec![0]);
        let x = [0.0, 2.0, 2.0, 1.0];
        assert_eq!(max_pool2d_argmax(&x, 1, 2, 2, 2), vec![1]);
    }
}
