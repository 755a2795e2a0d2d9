use super::{rebinarize, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source coordinate for output index `i` under half-pixel centre alignment.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

pub(crate) fn bilinear(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let &[h, w, c] = t.shape() else { unreachable!("images are rank 3") };
    let src = t.data();
    let mut out = vec![0.0f32; oh * ow * c];
    for i in 0..oh {
        let y = source_coord(i, h, oh);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..ow {
            let x = source_coord(j, w, ow);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let at = |r: usize, q: usize| src[(r * w + q) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(i * ow + j) * c + ch] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out).expect("sized from shape")
}

pub(crate) fn nearest(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let &[h, w, c] = t.shape() else { unreachable!("images are rank 3") };
    let src = t.data();
    let pick = |i: usize, src_n: usize, dst_n: usize| {
        (((i as f64 + 0.5) * src_n as f64 / dst_n as f64) as usize).min(src_n - 1)
    };
    let mut out = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        let y = pick(i, h, oh);
        for j in 0..ow {
            let x = pick(j, w, ow);
            out.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    Tensor::new(vec![oh, ow, c], out).expect("sized from shape")
}

/// Resizes the image bilinearly and the mask by nearest neighbour.
pub fn resize_bilinear(sample: &Sample, height: usize, width: usize) -> Result<Sample> {
    if height == 0 || width == 0 {
        return Err(Error::config(format!("cannot resize to {height}×{width}")));
    }
    Ok(Sample {
        image: bilinear(&sample.image, height, width),
        mask: rebinarize(&nearest(&sample.mask, height, width)),
        source_id: sample.source_id.clone(),
        origin: sample.origin,
    })
}

/// Per-axis window: `(src_start, dst_start, len)`. Crops are centred with
/// the odd pixel removed from the far edge; pads are centred with the odd
/// pixel added on the far edge.
fn axis_window(n: usize, side: usize) -> (usize, usize, usize) {
    if n >= side {
        ((n - side) / 2, 0, side)
    } else {
        (0, (side - n) / 2, n)
    }
}

fn crop_pad(t: &Tensor<f32>, side: usize) -> Tensor<f32> {
    let &[h, w, c] = t.shape() else { unreachable!("images are rank 3") };
    let (sy, dy, ly) = axis_window(h, side);
    let (sx, dx, lx) = axis_window(w, side);
    let mut out = vec![0.0f32; side * side * c];
    let src = t.data();
    for r in 0..ly {
        let s = ((sy + r) * w + sx) * c;
        let d = ((dy + r) * side + dx) * c;
        out[d..d + lx * c].copy_from_slice(&src[s..s + lx * c]);
    }
    Tensor::new(vec![side, side, c], out).expect("sized from shape")
}

/// Centre-crops or zero-pads each axis to `side`.
pub fn crop_pad_square(sample: &Sample, side: usize) -> Result<Sample> {
    if side == 0 {
        return Err(Error::config("square side must be positive"));
    }
    Ok(Sample {
        image: crop_pad(&sample.image, side),
        mask: crop_pad(&sample.mask, side),
        source_id: sample.source_id.clone(),
        origin: sample.origin,
    })
}
