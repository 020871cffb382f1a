//! Slice-level numeric kernels shared by the tape's forward and backward
//! passes. Layouts are row-major; image tensors are `[N, C, H, W]`.

/// `c = a · b + beta · c` for row-major operands, with optional transposes
/// of the stored `a` (`[k, m]` when `ta`) and `b` (`[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index addressed through the
    // strides stays inside the slices.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfolds `channels` planes of `x` into `[channels * kh * kw, oh * ow]`,
/// zero-filling outside the image.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let dxc = &mut dx[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dxc[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Mean of a block computed as `x0 + Σ(xi - x0) / n`, which returns `x0`
/// exactly when the block is constant.
#[inline]
fn block_mean(values: impl Iterator<Item = f64>, first: f64, n: f64) -> f64 {
    first + values.map(|v| v - first).sum::<f64>() / n
}

/// Non-overlapping `k × k` average pooling over `planes` planes.
pub fn avg_pool(x: &[f64], planes: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let (oh, ow) = (h / k, w / k);
    let n = (k * k) as f64;
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let first = xp[oy * k * w + ox * k];
                let vals = (0..k).flat_map(|dy| {
                    let row = (oy * k + dy) * w + ox * k;
                    xp[row..row + k].iter().copied()
                });
                out[p * oh * ow + oy * ow + ox] = block_mean(vals, first, n);
            }
        }
    }
}

pub fn upsample_nearest(x: &[f64], planes: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let (oh, ow) = (h * k, w * k);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                out[p * oh * ow + oy * ow + ox] = x[p * h * w + (oy / k) * w + ox / k];
            }
        }
    }
}

/// Sum over each `k × k` block; the adjoint of [`upsample_nearest`].
pub fn block_sum(dy: &[f64], planes: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let (oh, ow) = (h * k, w * k);
    out[..planes * h * w].fill(0.0);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                out[p * h * w + (oy / k) * w + ox / k] += dy[p * oh * ow + oy * ow + ox];
            }
        }
    }
}

pub fn pad_replicate(x: &[f64], planes: usize, h: usize, w: usize, p: usize, out: &mut [f64]) {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    for c in 0..planes {
        for y in 0..ph {
            let sy = y.saturating_sub(p).min(h - 1);
            for xx in 0..pw {
                let sx = xx.saturating_sub(p).min(w - 1);
                out[c * ph * pw + y * pw + xx] = x[c * h * w + sy * w + sx];
            }
        }
    }
}

pub fn pad_replicate_backward(dy: &[f64], planes: usize, h: usize, w: usize, p: usize, dx: &mut [f64]) {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    for c in 0..planes {
        for y in 0..ph {
            let sy = y.saturating_sub(p).min(h - 1);
            for xx in 0..pw {
                let sx = xx.saturating_sub(p).min(w - 1);
                dx[c * h * w + sy * w + sx] += dy[c * ph * pw + y * pw + xx];
            }
        }
    }
}

/// `[C, H, W] -> [C·r·r, H/r, W/r]`; output channel `c·r² + dy·r + dx`.
pub fn space_to_depth(x: &[f64], c: usize, h: usize, w: usize, r: usize, out: &mut [f64]) {
    let (oh, ow) = (h / r, w / r);
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let oc = ci * r * r + dy * r + dx;
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[oc * oh * ow + oy * ow + ox] = x[ci * h * w + (oy * r + dy) * w + ox * r + dx];
                    }
                }
            }
        }
    }
}

/// Inverse of [`space_to_depth`]: `[C·r·r, H, W] -> [C, H·r, W·r]`.
pub fn depth_to_space(x: &[f64], c: usize, h: usize, w: usize, r: usize, out: &mut [f64]) {
    let (oh, ow) = (h * r, w * r);
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let ic = ci * r * r + dy * r + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out[ci * oh * ow + (y * r + dy) * ow + xx * r + dx] = x[ic * h * w + y * w + xx];
                    }
                }
            }
        }
    }
}

/// Row-wise softmax over the last dimension of length `n`.
pub fn softmax_rows(x: &[f64], n: usize, out: &mut [f64]) {
    for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            total += *y;
        }
        yr.iter_mut().for_each(|y| *y /= total);
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn space_depth_roundtrip() {
        let x: Vec<f64> = (0..2 * 4 * 4).map(|v| v as f64).collect();
        let mut s = vec![0.0; x.len()];
        let mut back = vec![0.0; x.len()];
        space_to_depth(&x, 2, 4, 4, 2, &mut s);
        depth_to_space(&s, 2, 2, 2, 2, &mut back);
        assert_eq!(x, back);
    }

    #[test]
    fn pooled_constant_block_is_exact() {
        let v = 0.1 + 0.2;
        let x = vec![v; 9 * 4];
        let mut out = vec![0.0; 4];
        avg_pool(&x, 1, 6, 6, 3, &mut out);
        assert!(out.iter().all(|&o| o == v));
    }
}
