use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transform::{bilinear, nearest};
use super::{rebinarize, Sample};
use crate::tensor::Tensor;

/// Magnitudes for the random augmentations. Zero disables an op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub flip_prob: f64,
    /// Largest fraction of each side removed before resizing back.
    pub crop_margin: f64,
    /// Largest translation as a fraction of each side.
    pub shift: f64,
    /// Contrast factor is drawn from `1 ± contrast`.
    pub contrast: f64,
    pub brightness: f64,
    /// Hue offset as a fraction of the colour wheel.
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            flip_prob: 0.5,
            crop_margin: 0.1,
            shift: 0.1,
            contrast: 0.2,
            brightness: 0.1,
            hue: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            rotate: false,
            flip_prob: 0.0,
            crop_margin: 0.0,
            shift: 0.0,
            contrast: 0.0,
            brightness: 0.0,
            hue: 0.0,
        }
    }
}

/// One concrete draw of every augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    /// Clockwise quarter turns.
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Crop window side as a fraction of the image side.
    pub crop_scale: f64,
    /// Window placement within the slack, `(row, col)` in `[0,1]`.
    pub crop_pos: (f64, f64),
    /// Translation as a fraction of `(height, width)`.
    pub shift: (f64, f64),
    pub contrast: f64,
    pub brightness: f64,
    pub hue: f64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self::identity()
    }
}

fn symmetric(rng: &mut impl Rng, a: f64) -> f64 {
    if a > 0.0 {
        rng.random_range(-a..=a)
    } else {
        0.0
    }
}

impl AugmentPlan {
    pub fn identity() -> Self {
        Self {
            quarter_turns: 0,
            flip_h: false,
            flip_v: false,
            crop_scale: 1.0,
            crop_pos: (0.0, 0.0),
            shift: (0.0, 0.0),
            contrast: 1.0,
            brightness: 0.0,
            hue: 0.0,
        }
    }

    /// Draws a plan. Non-square images only get half turns so the output
    /// keeps its shape.
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng, square: bool, channels: usize) -> Self {
        let quarter_turns = match (cfg.rotate, square) {
            (false, _) => 0,
            (true, true) => rng.random_range(0..4u8),
            (true, false) => 2 * rng.random_range(0..2u8),
        };
        let flip_h = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
        let flip_v = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
        let crop_scale = 1.0 - cfg.crop_margin.max(0.0) * rng.random::<f64>();
        let crop_pos = (rng.random::<f64>(), rng.random::<f64>());
        let shift = (symmetric(rng, cfg.shift), symmetric(rng, cfg.shift));
        let contrast = 1.0 + symmetric(rng, cfg.contrast);
        let brightness = symmetric(rng, cfg.brightness);
        let hue = symmetric(rng, cfg.hue);
        Self {
            quarter_turns,
            flip_h,
            flip_v,
            crop_scale,
            crop_pos,
            shift,
            contrast,
            brightness,
            hue: if channels == 3 { hue } else { 0.0 },
        }
    }

    /// Geometry on image and mask alike, then photometry on the image,
    /// which is clamped to `[0,1]`.
    pub fn apply(&self, s: &Sample) -> Sample {
        let mut image = s.image.clone();
        let mut mask = s.mask.clone();
        for _ in 0..self.quarter_turns % 4 {
            image = rotate_cw(&image);
            mask = rotate_cw(&mask);
        }
        if self.flip_h {
            image = flip(&image, false);
            mask = flip(&mask, false);
        }
        if self.flip_v {
            image = flip(&image, true);
            mask = flip(&mask, true);
        }
        if self.crop_scale < 1.0 {
            let (h, w) = (image.shape()[0], image.shape()[1]);
            let window = |n: usize, pos: f64| {
                let len = ((n as f64 * self.crop_scale).round() as usize).clamp(1, n);
                ((((n - len) as f64) * pos.clamp(0.0, 1.0)).round() as usize, len)
            };
            let (top, ch) = window(h, self.crop_pos.0);
            let (left, cw) = window(w, self.crop_pos.1);
            image = bilinear(&crop(&image, top, left, ch, cw), h, w);
            mask = nearest(&crop(&mask, top, left, ch, cw), h, w);
        }
        if self.shift != (0.0, 0.0) {
            let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
            let (dy, dx) = ((self.shift.0 * h).round() as isize, (self.shift.1 * w).round() as isize);
            image = translate(&image, dy, dx);
            mask = translate(&mask, dy, dx);
        }
        if self.contrast != 1.0 {
            let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / image.numel().max(1) as f64;
            let c = self.contrast;
            image = image.map(|v| ((v as f64 - mean) * c + mean) as f32);
        }
        if self.brightness != 0.0 {
            let b = self.brightness as f32;
            image = image.map(|v| v + b);
        }
        if self.hue != 0.0 && image.shape()[2] == 3 {
            shift_hue(&mut image, self.hue);
        }
        Sample {
            image: image.map(|v| v.clamp(0.0, 1.0)),
            mask: rebinarize(&mask),
            source_id: s.source_id.clone(),
            origin: s.origin,
        }
    }
}

/// Applies a random augmentation drawn from `seed`.
pub fn augment(s: &Sample, seed: u64, cfg: &AugmentConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentPlan::sample(cfg, &mut rng, s.height() == s.width(), s.channels()).apply(s)
}

fn dims(t: &Tensor<f32>) -> (usize, usize, usize) {
    let &[h, w, c] = t.shape() else { unreachable!("images are rank 3") };
    (h, w, c)
}

fn remap(t: &Tensor<f32>, oh: usize, ow: usize, src: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Tensor<f32> {
    let (_, w, c) = dims(t);
    let mut out = vec![0.0f32; oh * ow * c];
    for r in 0..oh {
        for q in 0..ow {
            if let Some((sr, sq)) = src(r, q) {
                let s = (sr * w + sq) * c;
                let d = (r * ow + q) * c;
                out[d..d + c].copy_from_slice(&t.data()[s..s + c]);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out).expect("sized from shape")
}

fn rotate_cw(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, _) = dims(t);
    remap(t, w, h, |r, q| Some((h - 1 - q, r)))
}

fn flip(t: &Tensor<f32>, vertical: bool) -> Tensor<f32> {
    let (h, w, _) = dims(t);
    if vertical {
        remap(t, h, w, |r, q| Some((h - 1 - r, q)))
    } else {
        remap(t, h, w, |r, q| Some((r, w - 1 - q)))
    }
}

fn crop(t: &Tensor<f32>, top: usize, left: usize, ch: usize, cw: usize) -> Tensor<f32> {
    remap(t, ch, cw, |r, q| Some((top + r, left + q)))
}

fn translate(t: &Tensor<f32>, dy: isize, dx: isize) -> Tensor<f32> {
    let (h, w, _) = dims(t);
    remap(t, h, w, |r, q| {
        let (sr, sq) = (r as isize - dy, q as isize - dx);
        (sr >= 0 && sq >= 0 && (sr as usize) < h && (sq as usize) < w).then_some((sr as usize, sq as usize))
    })
}

fn shift_hue(t: &mut Tensor<f32>, delta: f64) {
    for px in t.data_mut().chunks_exact_mut(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let chroma = max - min;
        if chroma <= 0.0 {
            continue;
        }
        let hue = if max == r {
            ((g - b) / chroma).rem_euclid(6.0)
        } else if max == g {
            (b - r) / chroma + 2.0
        } else {
            (r - g) / chroma + 4.0
        };
        let hue = (hue / 6.0 + delta).rem_euclid(1.0) * 6.0;
        let x = chroma * (1.0 - ((hue % 2.0) - 1.0).abs());
        let (r1, g1, b1) = match hue as u32 {
            0 => (chroma, x, 0.0),
            1 => (x, chroma, 0.0),
            2 => (0.0, chroma, x),
            3 => (0.0, x, chroma),
            4 => (x, 0.0, chroma),
            _ => (chroma, 0.0, x),
        };
        let m = max - chroma;
        px[0] = (r1 + m) as f32;
        px[1] = (g1 + m) as f32;
        px[2] = (b1 + m) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blob(h: usize, w: usize, cells: &[(usize, usize)]) -> Sample {
        let mut mask = Tensor::zeros(&[h, w, 1]);
        for &(r, c) in cells {
            mask.data_mut()[r * w + c] = 1.0;
        }
        Sample::new(mask.clone(), mask, "blob").unwrap()
    }

    fn near(a: (f64, f64), b: (f64, f64)) -> bool {
        (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9
    }

    fn centroid(mask: &Tensor<f32>) -> (f64, f64) {
        let (_, w, _) = dims(mask);
        let (mut n, mut sy, mut sx) = (0.0, 0.0, 0.0);
        for (i, &v) in mask.data().iter().enumerate() {
            n += v as f64;
            sy += v as f64 * (i / w) as f64;
            sx += v as f64 * (i % w) as f64;
        }
        (sy / n, sx / n)
    }

    #[test]
    fn identity_config_leaves_sample_unchanged() {
        let s = blob(6, 6, &[(1, 2), (4, 4)]);
        for seed in 0..20 {
            assert_eq!(augment(&s, seed, &AugmentConfig::identity()), s);
        }
        assert_eq!(AugmentPlan::identity().apply(&s), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = blob(5, 7, &[(0, 1), (3, 6)]);
        let once = AugmentPlan { flip_h: true, ..AugmentPlan::identity() };
        assert_ne!(once.apply(&s), s);
        assert_eq!(once.apply(&once.apply(&s)), s);
    }

    #[test]
    fn brightness_is_additive() {
        let s = Sample::new(Tensor::full(&[3, 3, 1], 0.5), Tensor::zeros(&[3, 3, 1]), "c").unwrap();
        let plan = AugmentPlan { brightness: 0.1, ..AugmentPlan::identity() };
        assert!(plan.apply(&s).image.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
        let plan = AugmentPlan { brightness: 0.9, ..AugmentPlan::identity() };
        assert!(plan.apply(&s).image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn centroids_move_as_the_op_dictates() {
        let (h, w) = (8, 8);
        let s = blob(h, w, &[(1, 2), (1, 3), (2, 2)]);
        let (y, x) = centroid(&s.mask);
        let rot = AugmentPlan { quarter_turns: 1, ..AugmentPlan::identity() }.apply(&s);
        let (ry, rx) = centroid(&rot.mask);
        assert!(near((ry, rx), (x, h as f64 - 1.0 - y)));
        let fh = AugmentPlan { flip_h: true, ..AugmentPlan::identity() }.apply(&s);
        assert!(near(centroid(&fh.mask), (y, w as f64 - 1.0 - x)));
        let fv = AugmentPlan { flip_v: true, ..AugmentPlan::identity() }.apply(&s);
        assert!(near(centroid(&fv.mask), (h as f64 - 1.0 - y, x)));
        let sh = AugmentPlan { shift: (0.25, -0.125), ..AugmentPlan::identity() }.apply(&s);
        assert!(near(centroid(&sh.mask), (y + 2.0, x - 1.0)));
    }

    #[test]
    fn hue_shift_keeps_gray_and_rotates_colour() {
        let mut t = Tensor::from_f64_slice(&[1, 2, 3], &[0.4, 0.4, 0.4, 1.0, 0.0, 0.0]).unwrap();
        shift_hue(&mut t, 1.0 / 3.0);
        let d = t.data();
        assert_eq!(&d[..3], &[0.4, 0.4, 0.4]);
        assert!((d[3] - 0.0).abs() < 1e-6 && (d[4] - 1.0).abs() < 1e-6 && d[5].abs() < 1e-6);
    }

    #[test]
    fn non_square_keeps_shape() {
        let s = blob(4, 6, &[(0, 0)]);
        for seed in 0..40 {
            let out = augment(&s, seed, &AugmentConfig::default());
            assert_eq!(out.image.shape(), &[4, 6, 1]);
        }
    }

    proptest! {
        #[test]
        fn geometry_keeps_image_and_mask_aligned(seed in any::<u64>(), cells in prop::collection::vec((0usize..12, 0usize..12), 1..20)) {
            let s = blob(12, 12, &cells);
            let cfg = AugmentConfig { contrast: 0.0, brightness: 0.0, hue: 0.0, crop_margin: 0.0, ..AugmentConfig::default() };
            let out = augment(&s, seed, &cfg);
            prop_assert_eq!(&out.image, &out.mask);
            prop_assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn outputs_stay_in_range(seed in any::<u64>()) {
            let image = Tensor::from_fn(&[10, 10, 3], |i| (i % 7) as f32 / 6.0);
            let mask = Tensor::from_fn(&[10, 10, 1], |i| (i % 3 == 0) as u8 as f32);
            let out = augment(&Sample::new(image, mask, "x").unwrap(), seed, &AugmentConfig::default());
            prop_assert!(out.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
