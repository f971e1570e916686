//! Per-sample building blocks: patch extraction, max pooling, grouped softmax.

/// Geometry of one convolution + pooling stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct StageGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub pad: usize,
    pub stride: usize,
    pub conv_h: usize,
    pub conv_w: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub pool_h: usize,
    pub pool_w: usize,
}

impl StageGeom {
    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn conv_area(&self) -> usize {
        self.conv_h * self.conv_w
    }

    pub fn conv_len(&self) -> usize {
        self.out_c * self.conv_area()
    }

    pub fn pool_len(&self) -> usize {
        self.out_c * self.pool_h * self.pool_w
    }
}

/// Unfold `x` (`in_c x in_h x in_w`) into `cols` (`patch_len x conv_area`).
pub(crate) fn im2col(g: &StageGeom, x: &[f64], cols: &mut [f64]) {
    let area = g.conv_area();
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.conv_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.conv_w..(oy + 1) * g.conv_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `cols` back into `dx`.
pub(crate) fn col2im(g: &StageGeom, cols: &[f64], dx: &mut [f64]) {
    let area = g.conv_area();
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.conv_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, &v) in src[oy * g.conv_w..(oy + 1) * g.conv_w].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over `out_c` planes of `conv_h x conv_w`. `argmax` receives the
/// flat position (within the stage activation) of each winner; ties go to the
/// first maximum in scan order.
pub(crate) fn max_pool(g: &StageGeom, act: &[f64], out: &mut [f64], argmax: &mut [u32]) {
    let (w, s) = (g.pool_window, g.pool_stride);
    let area = g.conv_area();
    let mut o = 0;
    for c in 0..g.out_c {
        let base = c * area;
        for py in 0..g.pool_h {
            for px in 0..g.pool_w {
                let mut best_idx = base + py * s * g.conv_w + px * s;
                let mut best = act[best_idx];
                for dy in 0..w {
                    let row = base + (py * s + dy) * g.conv_w + px * s;
                    for dx in 0..w {
                        let v = act[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out[o] = best;
                argmax[o] = best_idx as u32;
                o += 1;
            }
        }
    }
}

/// Independent softmax over each consecutive block of `classes` logits.
pub(crate) fn grouped_softmax(logits: &mut [f64], classes: usize) {
    for block in logits.chunks_exact_mut(classes) {
        let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in block.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in block.iter_mut() {
            *v /= total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(in_c: usize, h: usize, w: usize, k: usize, pad: usize, stride: usize) -> StageGeom {
        let conv_h = (h + 2 * pad - k) / stride + 1;
        let conv_w = (w + 2 * pad - k) / stride + 1;
        StageGeom {
            in_c,
            in_h: h,
            in_w: w,
            out_c: 1,
            kernel: k,
            pad,
            stride,
            conv_h,
            conv_w,
            pool_window: 1,
            pool_stride: 1,
            pool_h: conv_h,
            pool_w: conv_w,
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c.
        let g = geom(2, 5, 7, 3, 1, 2);
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.patch_len() * g.conv_area())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let mut dx = vec![0.0; x.len()];
        col2im(&g, &c, &mut dx);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn im2col_identity_kernel() {
        let g = geom(1, 3, 4, 1, 0, 1);
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let mut cols = vec![0.0; 12];
        im2col(&g, &x, &mut cols);
        assert_eq!(cols, x);
    }

    #[test]
    fn pool_ties_route_to_first() {
        let mut g = geom(1, 2, 2, 1, 0, 1);
        g.pool_window = 2;
        g.pool_stride = 2;
        g.pool_h = 1;
        g.pool_w = 1;
        let mut out = [0.0];
        let mut arg = [0u32];
        max_pool(&g, &[3.0, 3.0, 1.0, 3.0], &mut out, &mut arg);
        assert_eq!((out[0], arg[0]), (3.0, 0));
        max_pool(&g, &[1.0, 2.0, 5.0, 5.0], &mut out, &mut arg);
        assert_eq!((out[0], arg[0]), (5.0, 2));
    }

    #[test]
    fn softmax_blocks_normalize() {
        let mut v = vec![1.0, 2.0, 3.0, 1000.0, 1000.0, -1000.0];
        grouped_softmax(&mut v, 3);
        assert!((v[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((v[3] - 0.5).abs() < 1e-15 && v[5] == 0.0);
    }
}
