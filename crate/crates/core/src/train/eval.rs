use crate::arch::Network;
use crate::autograd::BatchNormMode;
use crate::data::{crop_patch, grid_origins, normalize, reconstruct_from_patches, ChannelStats, Sample};
use crate::error::{Error, Result};
use crate::metrics::{Averaging, MetricsAccumulator, MetricsReport};
use crate::tensor::Tensor;

use super::SampleSource;

/// How full images are fed to the network at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tiling {
    /// One pass over the whole image, zero-padded up to the network's
    /// spatial multiple.
    Whole,
    /// Overlapping square windows averaged back together.
    Grid { size: usize, stride: usize },
}

fn pad_to(image: &Tensor<f32>, ph: usize, pw: usize) -> Tensor<f32> {
    let &[h, w, c] = image.shape() else { unreachable!("images are rank 3") };
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let mut out = vec![0.0f32; ph * pw * c];
    for r in 0..h {
        out[r * pw * c..(r * pw + w) * c].copy_from_slice(&image.data()[r * w * c..(r + 1) * w * c]);
    }
    Tensor::new(vec![ph, pw, c], out).expect("sized from shape")
}

fn unpad(prob: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let &[_, pw, _] = prob.shape() else { unreachable!("maps are rank 3") };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        out.extend_from_slice(&prob.data()[r * pw..r * pw + w]);
    }
    Tensor::new(vec![h, w, 1], out).expect("sized from shape")
}

/// Eval-mode probabilities for a batch of same-sized `(h,w,c)` images.
pub fn predict_batch(net: &mut Network<f32>, images: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let batch = Tensor::stack(images)?;
    Ok(net.forward(&batch, BatchNormMode::Eval)?.unstack())
}

/// Probability map `(h,w,1)` for one already-normalized image.
pub fn predict_image(net: &mut Network<f32>, image: &Tensor<f32>, tiling: Tiling, batch: usize) -> Result<Tensor<f32>> {
    let &[h, w, _] = image.shape() else {
        return Err(Error::dim(format!("image must be (h,w,c), got {:?}", image.shape())));
    };
    match tiling {
        Tiling::Whole => {
            let f = net.spec().spatial_multiple();
            let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
            let out = predict_batch(net, &[pad_to(image, ph, pw)])?;
            Ok(unpad(&out[0], h, w))
        }
        Tiling::Grid { size, stride } => {
            let origins = grid_origins(h, w, size, stride)?;
            let holder = Sample {
                image: image.clone(),
                mask: Tensor::zeros(&[h, w, 1]),
                source_id: String::new(),
                origin: None,
            };
            let mut preds = Vec::with_capacity(origins.len());
            for chunk in origins.chunks(batch.max(1)) {
                let tiles: Vec<Tensor<f32>> = chunk.iter().map(|&(r, c)| crop_patch(&holder, r, c, size).image).collect();
                preds.extend(predict_batch(net, &tiles)?.into_iter().zip(chunk.iter().copied()));
            }
            reconstruct_from_patches(&preds, h, w)
        }
    }
}

/// Thresholded metrics of `net` over every sample of `source`.
pub fn evaluate(
    net: &mut Network<f32>,
    source: &dyn SampleSource,
    norm: Option<&ChannelStats>,
    threshold: f64,
    averaging: Averaging,
    tiling: Tiling,
    batch: usize,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(averaging);
    let prepare = |i: usize| -> Result<Sample> {
        let s = source.get(i);
        match norm {
            Some(n) => normalize(&s, n),
            None => Ok(s),
        }
    };
    let mut i = 0;
    while i < source.len() {
        let first = prepare(i)?;
        let direct = tiling == Tiling::Whole && first.height() % net.spec().spatial_multiple() == 0
            && first.width() % net.spec().spatial_multiple() == 0;
        if !direct {
            let prob = predict_image(net, &first.image, tiling, batch)?;
            acc.add_prediction(&prob, &first.mask, threshold)?;
            i += 1;
            continue;
        }
        let mut group = vec![first];
        while group.len() < batch.max(1) && i + group.len() < source.len() {
            let next = prepare(i + group.len())?;
            if next.image.shape() != group[0].image.shape() {
                break;
            }
            group.push(next);
        }
        let images: Vec<Tensor<f32>> = group.iter().map(|s| s.image.clone()).collect();
        for (prob, s) in predict_batch(net, &images)?.iter().zip(&group) {
            acc.add_prediction(prob, &s.mask, threshold)?;
        }
        i += group.len();
    }
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchitectureSpec, Variant};

    #[test]
    fn whole_image_prediction_pads_and_crops() {
        let spec = ArchitectureSpec::new(Variant::UNet, false).with_size(3, 2);
        let mut net = Network::<f32>::build(&spec, 1).unwrap();
        let image = Tensor::from_fn(&[6, 10, 1], |i| (i % 5) as f32 / 5.0);
        let p = predict_image(&mut net, &image, Tiling::Whole, 4).unwrap();
        assert_eq!(p.shape(), &[6, 10, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn grid_prediction_covers_canvas() {
        let spec = ArchitectureSpec::new(Variant::UNet, false).with_size(2, 2);
        let mut net = Network::<f32>::build(&spec, 1).unwrap();
        let image = Tensor::from_fn(&[10, 14, 1], |i| (i % 7) as f32 / 7.0);
        let p = predict_image(&mut net, &image, Tiling::Grid { size: 8, stride: 4 }, 3).unwrap();
        assert_eq!(p.shape(), &[10, 14, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
