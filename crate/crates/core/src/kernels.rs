//! Raw slice kernels behind the graph ops.
//!
//! Every kernel is single-threaded with a fixed accumulation order. The
//! convolution accumulates each output element over `(c_in, ky, kx)` in
//! ascending order starting from zero and adds the bias last, which makes it
//! bitwise equal to the textbook nested loop.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfold one sample `[c_in, h, w]` into `[c_in*kh*kw, oh*ow]`; padded taps are zero.
fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pixels = oh * ow;
    let pad = g.padding as isize;
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * pixels..(row + 1) * pixels];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`].
fn col2im<T: Real>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pixels = oh * ow;
    let pad = g.padding as isize;
    let mut row = 0;
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * pixels..(row + 1) * pixels];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = ci * g.h * g.w + iy as usize * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight fixed accumulator lanes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let mut acc = T::zero();
    for l in lanes {
        acc += l;
    }
    acc + tail
}

pub fn conv2d_forward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let pixels = g.out_pixels();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.c_out * pixels];
    let mut col = vec![T::zero(); patch * pixels];
    let sample_in = g.c_in * g.h * g.w;
    for n in 0..g.batch {
        im2col(g, &x[n * sample_in..(n + 1) * sample_in], &mut col);
        for co in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + co) * pixels..(n * g.c_out + co + 1) * pixels];
            let wrow = &kernel[co * patch..(co + 1) * patch];
            for (r, &wv) in wrow.iter().enumerate() {
                axpy(wv, &col[r * pixels..(r + 1) * pixels], dst);
            }
            if let Some(b) = bias {
                let bv = b[co];
                for v in dst.iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let pixels = g.out_pixels();
    let patch = g.patch_len();
    let sample_in = g.c_in * g.h * g.w;
    let mut dx = need_x.then(|| vec![T::zero(); g.batch * sample_in]);
    let mut dw = need_w.then(|| vec![T::zero(); g.c_out * patch]);
    let mut db = need_b.then(|| vec![T::zero(); g.c_out]);
    let mut col = vec![T::zero(); patch * pixels];
    let mut dcol = vec![T::zero(); patch * pixels];

    for n in 0..g.batch {
        let dy_n = &dy[n * g.c_out * pixels..(n + 1) * g.c_out * pixels];
        if let Some(db) = db.as_mut() {
            for co in 0..g.c_out {
                let mut s = T::zero();
                for &v in &dy_n[co * pixels..(co + 1) * pixels] {
                    s += v;
                }
                db[co] += s;
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * sample_in..(n + 1) * sample_in], &mut col);
            for co in 0..g.c_out {
                let dyrow = &dy_n[co * pixels..(co + 1) * pixels];
                for r in 0..patch {
                    dw[co * patch + r] += dot(dyrow, &col[r * pixels..(r + 1) * pixels]);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcol.fill(T::zero());
            for co in 0..g.c_out {
                let dyrow = &dy_n[co * pixels..(co + 1) * pixels];
                let wrow = &kernel[co * patch..(co + 1) * patch];
                for (r, &wv) in wrow.iter().enumerate() {
                    axpy(wv, dyrow, &mut dcol[r * pixels..(r + 1) * pixels]);
                }
            }
            col2im(g, &dcol, &mut dx[n * sample_in..(n + 1) * sample_in]);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dw,
        bias: db,
    }
}

/// Bin bounds of adaptive average pooling: `[floor(i*len/out), ceil((i+1)*len/out))`.
pub fn adaptive_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out)))
        .collect()
}

pub fn adaptive_avg_pool<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let rows = adaptive_bins(h, oh);
    let cols = adaptive_bins(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let mut s = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += plane[y * w + xx];
                    }
                }
                out.push(s / T::from_usize((y1 - y0) * (x1 - x0)));
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Real>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let rows = adaptive_bins(h, oh);
    let cols = adaptive_bins(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for (i, &(y0, y1)) in rows.iter().enumerate() {
            for (j, &(x0, x1)) in cols.iter().enumerate() {
                let g = dy[(p * oh + i) * ow + j] / T::from_usize((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[p * h * w + y * w + xx] += g;
                    }
                }
            }
        }
    }
    dx
}
