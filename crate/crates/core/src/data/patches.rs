use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A patch location: index of the source sample and its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    pub source: usize,
    pub row: usize,
    pub col: usize,
}

/// Patch locations over a list of samples. Pixels are copied out only on
/// demand, since full training sets run to hundreds of thousands of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub patches: Vec<PatchRef>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn materialize(&self, index: usize, samples: &[Sample]) -> Sample {
        let p = self.patches[index];
        crop_patch(&samples[p.source], p.row, p.col, self.size)
    }

    /// Moves the trailing `fraction` of patches into a second set.
    pub fn split_off(mut self, fraction: f64) -> (PatchSet, PatchSet) {
        let n_tail = (self.patches.len() as f64 * fraction).floor() as usize;
        let tail = self.patches.split_off(self.patches.len() - n_tail);
        let size = self.size;
        (self, PatchSet { size, patches: tail })
    }
}

fn crop_tensor(t: &Tensor<f32>, row: usize, col: usize, size: usize) -> Tensor<f32> {
    let &[_, w, c] = t.shape() else { unreachable!("images are rank 3") };
    let src = t.data();
    let mut out = Vec::with_capacity(size * size * c);
    for r in row..row + size {
        let s = (r * w + col) * c;
        out.extend_from_slice(&src[s..s + size * c]);
    }
    Tensor::new(vec![size, size, c], out).expect("sized from shape")
}

/// Copies the `size`×`size` window at `(row, col)`. Panics when the window
/// leaves the image.
pub fn crop_patch(sample: &Sample, row: usize, col: usize, size: usize) -> Sample {
    assert!(row + size <= sample.height() && col + size <= sample.width());
    Sample {
        image: crop_tensor(&sample.image, row, col, size),
        mask: crop_tensor(&sample.mask, row, col, size),
        source_id: sample.source_id.clone(),
        origin: Some((row, col)),
    }
}

/// Draws `count` patch locations uniformly: a source image, then a
/// top-left corner that keeps the window inside it.
pub fn extract_patches(samples: &[Sample], size: usize, count: usize, seed: u64) -> Result<PatchSet> {
    if size == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    if samples.is_empty() && count > 0 {
        return Err(Error::data("cannot extract patches from an empty sample list"));
    }
    if let Some(s) = samples.iter().find(|s| s.height() < size || s.width() < size) {
        return Err(Error::data(format!(
            "{} is {}×{}, smaller than the {size}-pixel patch",
            s.source_id,
            s.height(),
            s.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = (0..count)
        .map(|_| {
            let source = rng.random_range(0..samples.len());
            let s = &samples[source];
            PatchRef {
                source,
                row: rng.random_range(0..=s.height() - size),
                col: rng.random_range(0..=s.width() - size),
            }
        })
        .collect();
    Ok(PatchSet { size, patches })
}

fn axis_origins(n: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = n - size;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

/// Top-left corners of a sliding window that covers the whole image,
/// with the final row and column snapped to the border.
pub fn grid_origins(height: usize, width: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if size == 0 || stride == 0 {
        return Err(Error::config("patch size and stride must be positive"));
    }
    if height < size || width < size {
        return Err(Error::data(format!(
            "{height}×{width} image is smaller than the {size}-pixel window"
        )));
    }
    let cols = axis_origins(width, size, stride);
    Ok(axis_origins(height, size, stride)
        .into_iter()
        .flat_map(|r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// Averages overlapping `(size,size,1)` predictions onto an `(h,w,1)`
/// canvas; uncovered pixels are 0.
pub fn reconstruct_from_patches(
    patches: &[(Tensor<f32>, (usize, usize))],
    height: usize,
    width: usize,
) -> Result<Tensor<f32>> {
    let mut sum = vec![0.0f64; height * width];
    let mut hits = vec![0u32; height * width];
    for (t, (row, col)) in patches {
        let &[ph, pw, 1] = t.shape() else {
            return Err(Error::dim(format!("patch must be (h,w,1), got {:?}", t.shape())));
        };
        if row + ph > height || col + pw > width {
            return Err(Error::dim(format!(
                "{ph}×{pw} patch at ({row},{col}) leaves the {height}×{width} canvas"
            )));
        }
        for r in 0..ph {
            for c in 0..pw {
                let i = (row + r) * width + col + c;
                sum[i] += t.data()[r * pw + c] as f64;
                hits[i] += 1;
            }
        }
    }
    let data = sum
        .iter()
        .zip(&hits)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { (s / n as f64) as f32 })
        .collect();
    Tensor::new(vec![height, width, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, id: &str) -> Sample {
        Sample::new(
            Tensor::from_fn(&[h, w, 1], |i| i as f32),
            Tensor::from_fn(&[h, w, 1], |i| ((i / w + i % w) % 2) as f32),
            id,
        )
        .unwrap()
    }

    #[test]
    fn patches_match_their_source_window() {
        let samples = vec![ramp(20, 30, "a"), ramp(16, 16, "b")];
        let set = extract_patches(&samples, 8, 200, 3).unwrap();
        assert_eq!(set.len(), 200);
        for i in 0..set.len() {
            let p = set.patches[i];
            let s = &samples[p.source];
            assert!(p.row + 8 <= s.height() && p.col + 8 <= s.width());
            let m = set.materialize(i, &samples);
            assert_eq!(m.origin, Some((p.row, p.col)));
            assert_eq!(m.source_id, s.source_id);
            assert_eq!(m.image.data()[0], (p.row * s.width() + p.col) as f32);
            assert_eq!(m.image.data()[63], ((p.row + 7) * s.width() + p.col + 7) as f32);
        }
        assert!(set.patches.iter().any(|p| p.source == 1));
        assert_eq!(set, extract_patches(&samples, 8, 200, 3).unwrap());
    }

    #[test]
    fn rejects_oversized_patch() {
        let err = extract_patches(&[ramp(4, 10, "tiny")], 5, 1, 0).unwrap_err();
        assert!(err.to_string().contains("tiny"));
    }

    #[test]
    fn grid_covers_borders() {
        let g = grid_origins(100, 60, 48, 24).unwrap();
        let rows: Vec<usize> = g.iter().map(|o| o.0).collect();
        assert!(rows.contains(&0) && rows.contains(&52));
        assert_eq!(g.len(), 4 * 2);
        assert!(g.contains(&(52, 12)));
    }

    #[test]
    fn reconstruction_averages_overlap() {
        let ones = Tensor::full(&[2, 2, 1], 1.0f32);
        let threes = Tensor::full(&[2, 2, 1], 3.0f32);
        let out = reconstruct_from_patches(&[(ones, (0, 0)), (threes, (0, 1))], 2, 4).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn grid_reconstruction_recovers_image() {
        let s = ramp(53, 70, "r");
        let origins = grid_origins(53, 70, 16, 8).unwrap();
        let patches: Vec<_> = origins
            .iter()
            .map(|&(r, c)| (crop_patch(&s, r, c, 16).image, (r, c)))
            .collect();
        let out = reconstruct_from_patches(&patches, 53, 70).unwrap();
        assert!(out.max_abs_diff(&s.image) < 1e-3);
    }

    #[test]
    fn split_off_takes_the_tail() {
        let set = extract_patches(&[ramp(10, 10, "a")], 4, 10, 1).unwrap();
        let (head, tail) = set.clone().split_off(0.2);
        assert_eq!(head.len(), 8);
        assert_eq!(tail.patches, set.patches[8..]);
    }
}
