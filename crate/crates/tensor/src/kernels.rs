//! Raw CPU kernels behind the graph ops. Everything here works on plain
//! slices in NCHW layout; shape checking happens in the graph layer.

/// `c = a·b + beta * c` for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
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
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided views; the
    // asserts below check the last addressed element of each operand.
    debug_assert!(k == 0 || (m - 1) as isize * rsa + (k - 1) as isize * csa < a.len() as isize);
    debug_assert!(k == 0 || (k - 1) as isize * rsb + (n - 1) as isize * csb < b.len() as isize);
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
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * s + kx - p` lies in `[0, w)`.
#[inline]
fn valid_range(kx: usize, s: usize, p: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // largest ox with ox * s + kx - p <= w - 1
    let hi = if kx > p + w - 1 {
        0
    } else {
        ((p + w - 1 - kx) / s + 1).min(wo)
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_range(kx, s, p, g.w, wo);
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if s == 1 {
                        let start = lo + kx - p;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[(lo + ox) * s + kx - p];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_range(kx, s, p, g.w, wo);
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        let start = lo + kx - p;
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * s + kx - p] += line[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> =
        const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Runs `f` with two reusable buffers of at least the requested lengths.
/// Their contents are unspecified on entry.
fn with_scratch<T>(a: usize, b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> T) -> T {
    SCRATCH.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (x, y) = &mut *guard;
        if x.len() < a {
            x.resize(a, 0.0);
        }
        if y.len() < b {
            y.resize(b, 0.0);
        }
        f(&mut x[..a], &mut y[..b])
    })
}

pub fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let kk = g.c_in * g.k * g.k;
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    let col_len = if g.is_pointwise() { 0 } else { kk * plane };
    with_scratch(col_len, 0, |col, _| {
        for n in 0..g.batch {
            let xn = &x[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
            let cols: &[f64] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, col);
                col
            };
            let on = &mut out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
            if let Some(b) = b {
                for (co, chunk) in on.chunks_mut(plane).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            gemm(
                g.c_out,
                kk,
                plane,
                w,
                (kk as isize, 1),
                cols,
                (plane as isize, 1),
                if b.is_some() { 1.0 } else { 0.0 },
                on,
            );
        }
    });
    out
}

/// Returns `(dx, dw, db)`; each is only computed when requested.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let kk = g.c_in * g.k * g.k;
    let in_sz = g.c_in * g.h * g.w;
    let mut dx = want.0.then(|| vec![0.0; g.batch * in_sz]);
    let mut dw = want.1.then(|| vec![0.0; g.c_out * kk]);
    let db = want.2.then(|| {
        let mut db = vec![0.0; g.c_out];
        for n in 0..g.batch {
            for (co, d) in db.iter_mut().enumerate() {
                let off = (n * g.c_out + co) * plane;
                *d += grad[off..off + plane].iter().sum::<f64>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let col_len = if pointwise || dw.is_none() {
        0
    } else {
        kk * plane
    };
    let dcol_len = if dx.is_some() && !pointwise {
        kk * plane
    } else {
        0
    };
    with_scratch(col_len, dcol_len, |col, dcol| {
        for n in 0..g.batch {
            let gn = &grad[n * g.c_out * plane..(n + 1) * g.c_out * plane];
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            if let Some(dw) = dw.as_mut() {
                let cols: &[f64] = if pointwise {
                    xn
                } else {
                    im2col(xn, g, col);
                    col
                };
                // dW += G · colᵀ
                gemm(
                    g.c_out,
                    plane,
                    kk,
                    gn,
                    (plane as isize, 1),
                    cols,
                    (1, plane as isize),
                    1.0,
                    dw,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
                // dcol = Wᵀ · G
                if pointwise {
                    gemm(
                        kk,
                        g.c_out,
                        plane,
                        w,
                        (1, kk as isize),
                        gn,
                        (plane as isize, 1),
                        0.0,
                        dxn,
                    );
                } else {
                    gemm(
                        kk,
                        g.c_out,
                        plane,
                        w,
                        (1, kk as isize),
                        gn,
                        (plane as isize, 1),
                        0.0,
                        dcol,
                    );
                    col2im(dcol, g, dxn);
                }
            }
        }
    });
    (dx, dw, db)
}

/// Applies `rows · X · colsᵀ` to every `(n, c)` plane.
///
/// `rows` is `(ho, h)` and `cols` is `(wo, w)`, both row-major.
pub fn separable_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    rows: &[f64],
    ho: usize,
    cols: &[f64],
    wo: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; planes * ho * wo];
    let mut tmp = vec![0.0; ho * w];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        gemm(
            ho,
            h,
            w,
            rows,
            (h as isize, 1),
            xp,
            (w as isize, 1),
            0.0,
            &mut tmp,
        );
        gemm(
            ho,
            w,
            wo,
            &tmp,
            (w as isize, 1),
            cols,
            (1, w as isize),
            0.0,
            &mut out[p * ho * wo..(p + 1) * ho * wo],
        );
    }
    out
}

/// Adjoint of [`separable_forward`]: `rowsᵀ · G · cols` per plane.
pub fn separable_backward(
    grad: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    rows: &[f64],
    ho: usize,
    cols: &[f64],
    wo: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    let mut tmp = vec![0.0; h * wo];
    for p in 0..planes {
        let gp = &grad[p * ho * wo..(p + 1) * ho * wo];
        gemm(
            h,
            ho,
            wo,
            rows,
            (1, h as isize),
            gp,
            (wo as isize, 1),
            0.0,
            &mut tmp,
        );
        gemm(
            h,
            wo,
            w,
            &tmp,
            (wo as isize, 1),
            cols,
            (w as isize, 1),
            0.0,
            &mut dx[p * h * w..(p + 1) * h * w],
        );
    }
    dx
}

/// `(N, C·r², H, W) → (N, C, H·r, W·r)`; `inverse` runs the mapping backwards.
pub fn pixel_shuffle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    r: usize,
    inverse: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let (ho, wo) = (h * r, w * r);
    for b in 0..n {
        for co in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((b * c * r * r + ci) * h + y) * w + xx;
                            let dst = ((b * c + co) * ho + y * r + i) * wo + xx * r + j;
                            if inverse {
                                out[src] = x[dst];
                            } else {
                                out[dst] = x[src];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; g.batch * g.c_out * ho * wo];
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x[((n * g.c_in + ci) * g.h + iy as usize) * g.w
                                        + ix as usize]
                                        * w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        out[((n * g.c_out + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.37 + seed).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (4, 2, 1)] {
            let g = ConvGeom {
                batch: 2,
                c_in: 3,
                h: 7,
                w: 6,
                c_out: 4,
                k,
                stride,
                pad,
            };
            let x = ramp(2 * 3 * 7 * 6, 0.1);
            let w = ramp(4 * 3 * k * k, 1.3);
            let got = conv2d_forward(&x, &w, None, &g);
            let want = naive_conv(&x, &w, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, dx(g)> and == <w, dw(g)>
        let g = ConvGeom {
            batch: 2,
            c_in: 2,
            h: 6,
            w: 5,
            c_out: 3,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let (ho, wo) = g.out_hw();
        let x = ramp(2 * 2 * 6 * 5, 0.2);
        let w = ramp(3 * 2 * 9, 0.7);
        let gr = ramp(2 * 3 * ho * wo, 2.1);
        let y = conv2d_forward(&x, &w, None, &g);
        let lhs: f64 = y.iter().zip(&gr).map(|(a, b)| a * b).sum();
        let (dx, dw, _) = conv2d_backward(&x, &w, &gr, &g, (true, true, false));
        let rx: f64 = x.iter().zip(dx.unwrap()).map(|(a, b)| a * b).sum();
        let rw: f64 = w.iter().zip(dw.unwrap()).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-10);
        assert!((lhs - rw).abs() < 1e-10);
    }

    #[test]
    fn separable_backward_is_adjoint() {
        let (h, w, ho, wo) = (5, 4, 3, 6);
        let x = ramp(2 * h * w, 0.4);
        let rows = ramp(ho * h, 1.1);
        let cols = ramp(wo * w, 2.2);
        let gr = ramp(2 * ho * wo, 3.3);
        let y = separable_forward(&x, 2, (h, w), &rows, ho, &cols, wo);
        let dx = separable_backward(&gr, 2, (h, w), &rows, ho, &cols, wo);
        let lhs: f64 = y.iter().zip(&gr).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pixel_shuffle_round_trips() {
        let x = ramp(2 * 8 * 3 * 2, 0.0);
        let y = pixel_shuffle(&x, (2, 2, 3, 2), 2, false);
        let back = pixel_shuffle(&y, (2, 2, 3, 2), 2, true);
        assert_eq!(x, back);
        // channel index i*r + j lands at sub-pixel offset (i, j)
        assert_eq!(y[1], x[3 * 2]);
    }
}
