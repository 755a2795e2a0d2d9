//! Same-padded, stride-1 2-D convolution via im2col + GEMM.
//!
//! Kernels are laid out `(k, k, c_in, m)` row-major, which is exactly the
//! `(k·k·c_in) × m` matrix the im2col rows multiply against. Output pixels
//! are processed in bounded chunks so the column buffer stays small even for
//! 7×7 kernels on full-resolution images.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::image_dims;

/// Upper bound on elements in one im2col chunk.
const CHUNK_ELEMS: usize = 1 << 20;

/// Reusable column buffers for the single-threaded path.
#[derive(Default)]
pub struct ConvScratch<T> {
    col: Vec<T>,
    dcol: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub m: usize,
}

impl ConvGeom {
    fn pixels(&self) -> usize {
        self.b * self.h * self.w
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    fn chunk_rows(&self) -> usize {
        (CHUNK_ELEMS / self.patch_len()).max(1)
    }
}

pub(crate) fn conv_geometry(x: &[usize], kernel: &[usize], bias: &[usize]) -> Result<ConvGeom> {
    let (b, h, w, c) = image_dims(x)?;
    let &[k, k2, c_in, m] = kernel else {
        return Err(Error::dim(format!(
            "conv2d kernel must be (k,k,c_in,m), got {kernel:?}"
        )));
    };
    if k != k2 {
        return Err(Error::dim(format!("conv2d kernel {kernel:?} is not square")));
    }
    if k % 2 == 0 {
        return Err(Error::config(format!(
            "conv2d kernel size {k} is even; same padding needs an odd size"
        )));
    }
    if c_in != c {
        return Err(Error::dim(format!(
            "conv2d input {x:?} has {c} channels but kernel {kernel:?} expects {c_in}"
        )));
    }
    if bias != [m] {
        return Err(Error::dim(format!(
            "conv2d bias {bias:?} does not match kernel {kernel:?} filter count {m}"
        )));
    }
    Ok(ConvGeom { b, h, w, c, k, m })
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, p0: usize, p1: usize, col: &mut [T]) {
    let r = g.k / 2;
    let row_len = g.patch_len();
    let hw = g.h * g.w;
    for p in p0..p1 {
        let n = p / hw;
        let rem = p % hw;
        let (y, xx) = (rem / g.w, rem % g.w);
        let row = &mut col[(p - p0) * row_len..(p - p0 + 1) * row_len];
        for di in 0..g.k {
            let seg = &mut row[di * g.k * g.c..(di + 1) * g.k * g.c];
            let sy = y as isize + di as isize - r as isize;
            if sy < 0 || sy >= g.h as isize {
                seg.fill(T::zero());
                continue;
            }
            let base = (n * g.h + sy as usize) * g.w;
            for dj in 0..g.k {
                let dst = &mut seg[dj * g.c..(dj + 1) * g.c];
                let sx = xx as isize + dj as isize - r as isize;
                if sx < 0 || sx >= g.w as isize {
                    dst.fill(T::zero());
                } else {
                    let src = (base + sx as usize) * g.c;
                    dst.copy_from_slice(&x[src..src + g.c]);
                }
            }
        }
    }
}

/// Scatter-adds column gradients back onto the input image. `dx` starts at
/// flat element `offset` of the full input.
fn col2im_add<T: Scalar>(
    dcol: &[T],
    g: &ConvGeom,
    p0: usize,
    p1: usize,
    dx: &mut [T],
    offset: usize,
) {
    let r = g.k / 2;
    let row_len = g.patch_len();
    let hw = g.h * g.w;
    for p in p0..p1 {
        let n = p / hw;
        let rem = p % hw;
        let (y, xx) = (rem / g.w, rem % g.w);
        let row = &dcol[(p - p0) * row_len..(p - p0 + 1) * row_len];
        for di in 0..g.k {
            let sy = y as isize + di as isize - r as isize;
            if sy < 0 || sy >= g.h as isize {
                continue;
            }
            let base = (n * g.h + sy as usize) * g.w;
            for dj in 0..g.k {
                let sx = xx as isize + dj as isize - r as isize;
                if sx < 0 || sx >= g.w as isize {
                    continue;
                }
                let dst = (base + sx as usize) * g.c - offset;
                let src = &row[(di * g.k + dj) * g.c..(di * g.k + dj + 1) * g.c];
                for (d, s) in dx[dst..dst + g.c].iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
    }
}

/// Forward pass over output pixels `[p0, p1)`; `out` holds exactly those rows.
fn forward_range<T: Scalar>(
    x: &[T],
    kernel: &[T],
    g: &ConvGeom,
    p0: usize,
    p1: usize,
    out: &mut [T],
    col: &mut Vec<T>,
) {
    let kk = g.patch_len();
    if g.k == 1 {
        T::gemm(p1 - p0, kk, g.m, &x[p0 * kk..p1 * kk], false, kernel, false, out, false);
        return;
    }
    let step = g.chunk_rows();
    let mut start = p0;
    while start < p1 {
        let end = (start + step).min(p1);
        let len = end - start;
        col.resize(len * kk, T::zero());
        im2col(x, g, start, end, &mut col[..len * kk]);
        let dst = &mut out[(start - p0) * g.m..(end - p0) * g.m];
        T::gemm(len, kk, g.m, &col[..len * kk], false, kernel, false, dst, false);
        start = end;
    }
}

struct GradTargets<'a, T> {
    dx: Option<(&'a mut [T], usize)>,
    dw: Option<&'a mut [T]>,
}

fn backward_range<T: Scalar>(
    x: &[T],
    kernel: &[T],
    g: &ConvGeom,
    dy: &[T],
    p0: usize,
    p1: usize,
    mut targets: GradTargets<'_, T>,
    col: &mut Vec<T>,
    dcol: &mut Vec<T>,
) {
    let kk = g.patch_len();
    let m = g.m;
    if g.k == 1 {
        let dy_rows = &dy[p0 * m..p1 * m];
        if let Some(dw) = targets.dw.as_deref_mut() {
            T::gemm(kk, p1 - p0, m, &x[p0 * kk..p1 * kk], true, dy_rows, false, dw, true);
        }
        if let Some((dx, offset)) = targets.dx.as_mut() {
            let dst = &mut dx[p0 * kk - *offset..p1 * kk - *offset];
            T::gemm(p1 - p0, m, kk, dy_rows, false, kernel, true, dst, true);
        }
        return;
    }
    let step = g.chunk_rows();
    let mut start = p0;
    while start < p1 {
        let end = (start + step).min(p1);
        let len = end - start;
        let dy_rows = &dy[start * m..end * m];
        if let Some(dw) = targets.dw.as_deref_mut() {
            col.resize(len * kk, T::zero());
            im2col(x, g, start, end, &mut col[..len * kk]);
            T::gemm(kk, len, m, &col[..len * kk], true, dy_rows, false, dw, true);
        }
        if let Some((dx, offset)) = targets.dx.as_mut() {
            dcol.resize(len * kk, T::zero());
            T::gemm(len, m, kk, dy_rows, false, kernel, true, &mut dcol[..len * kk], false);
            col2im_add(&dcol[..len * kk], g, start, end, dx, *offset);
        }
        start = end;
    }
}

/// Splits the batch into at most `threads` contiguous image ranges.
fn image_segments(b: usize, threads: usize) -> Vec<(usize, usize)> {
    let parts = threads.clamp(1, b.max(1));
    let per = b / parts;
    let extra = b % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = per + usize::from(i < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

pub(crate) fn forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeom,
    scratch: &mut ConvScratch<T>,
) -> Vec<T> {
    let p = g.pixels();
    let mut out = vec![T::zero(); p * g.m];
    let threads = crate::worker_threads().min(g.b);
    if threads <= 1 {
        forward_range(x.data(), kernel.data(), g, 0, p, &mut out, &mut scratch.col);
    } else {
        let hw = g.h * g.w;
        let segments = image_segments(g.b, threads);
        std::thread::scope(|s| {
            let mut rest = out.as_mut_slice();
            for &(n0, n1) in &segments {
                let (mine, tail) = rest.split_at_mut((n1 - n0) * hw * g.m);
                rest = tail;
                s.spawn(move || {
                    let mut col = Vec::new();
                    forward_range(x.data(), kernel.data(), g, n0 * hw, n1 * hw, mine, &mut col);
                });
            }
        });
    }
    for row in out.chunks_mut(g.m) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += *b;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeom,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    scratch: &mut ConvScratch<T>,
) {
    if let Some(db) = db {
        for row in dy.chunks(g.m) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += *v;
            }
        }
    }
    let p = g.pixels();
    let threads = crate::worker_threads().min(g.b);
    if threads <= 1 {
        let targets = GradTargets {
            dx: dx.map(|d| (d, 0)),
            dw,
        };
        backward_range(
            x.data(),
            kernel.data(),
            g,
            dy,
            0,
            p,
            targets,
            &mut scratch.col,
            &mut scratch.dcol,
        );
        return;
    }
    let hw = g.h * g.w;
    let img = hw * g.c;
    let segments = image_segments(g.b, threads);
    let want_dw = dw.is_some();
    let partials: Vec<Vec<T>> = std::thread::scope(|s| {
        let mut handles = Vec::new();
        let mut dx_rest = dx;
        for &(n0, n1) in &segments {
            let dx_mine = match dx_rest.take() {
                Some(d) => {
                    let (mine, tail) = d.split_at_mut((n1 - n0) * img);
                    dx_rest = Some(tail);
                    Some((mine, n0 * img))
                }
                None => None,
            };
            handles.push(s.spawn(move || {
                let mut local_dw = if want_dw {
                    vec![T::zero(); g.patch_len() * g.m]
                } else {
                    Vec::new()
                };
                let targets = GradTargets {
                    dx: dx_mine,
                    dw: want_dw.then_some(local_dw.as_mut_slice()),
                };
                let (mut col, mut dcol) = (Vec::new(), Vec::new());
                backward_range(
                    x.data(),
                    kernel.data(),
                    g,
                    dy,
                    n0 * hw,
                    n1 * hw,
                    targets,
                    &mut col,
                    &mut dcol,
                );
                local_dw
            }));
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("conv worker panicked"))
            .collect()
    });
    if let Some(dw) = dw {
        for part in &partials {
            for (d, v) in dw.iter_mut().zip(part) {
                *d += *v;
            }
        }
    }
}

/// Direct nested-loop same-padded convolution, accumulated in `f64`.
pub fn conv2d_reference<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x.shape(), kernel.shape(), bias.shape())?;
    let r = (g.k / 2) as isize;
    let (xs, ws) = (x.data(), kernel.data());
    let mut out = Vec::with_capacity(g.pixels() * g.m);
    for n in 0..g.b {
        for y in 0..g.h {
            for xx in 0..g.w {
                for f in 0..g.m {
                    let mut acc = bias.data()[f].as_f64();
                    for i in -r..=r {
                        for j in -r..=r {
                            let (sy, sx) = (y as isize + i, xx as isize + j);
                            if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                                continue;
                            }
                            for z in 0..g.c {
                                let xv = xs[((n * g.h + sy as usize) * g.w + sx as usize) * g.c + z];
                                let wi = ((((i + r) as usize) * g.k + (j + r) as usize) * g.c + z)
                                    * g.m
                                    + f;
                                acc += xv.as_f64() * ws[wi].as_f64();
                            }
                        }
                    }
                    out.push(T::from_f64(acc));
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = g.m;
    Tensor::new(shape, out)
}
