//! Synthetic image/mask generators for smoke tests and benchmarks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::io::{save_image, save_mask};
use super::Sample;
use crate::error::Result;
use crate::tensor::Tensor;

const BACKGROUND: f32 = 0.25;
const FOREGROUND: f32 = 0.75;
const NOISE_STD: f64 = 0.05;

fn render(id: String, h: usize, w: usize, mask: Vec<f32>, rng: &mut ChaCha8Rng) -> Sample {
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let image: Vec<f32> = mask
        .iter()
        .map(|&m| {
            let base = if m > 0.0 { FOREGROUND } else { BACKGROUND };
            (base + noise.sample(rng) as f32).clamp(0.0, 1.0)
        })
        .collect();
    Sample::new(
        Tensor::new(vec![h, w, 1], image).expect("sized from dims"),
        Tensor::new(vec![h, w, 1], mask).expect("sized from dims"),
        id,
    )
    .expect("aligned by construction")
}

fn paint_ellipse(mask: &mut [f32], h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) {
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = ((r as f64 - cy) / ry, (c as f64 - cx) / rx);
            if dy * dy + dx * dx <= 1.0 {
                mask[r * w + c] = 1.0;
            }
        }
    }
}

/// Paints a segment of the given width between two points.
fn paint_segment(mask: &mut [f32], h: usize, w: usize, a: (f64, f64), b: (f64, f64), width: f64) {
    let (vy, vx) = (b.0 - a.0, b.1 - a.1);
    let len2 = (vy * vy + vx * vx).max(1e-12);
    let half = width / 2.0;
    for r in 0..h {
        for c in 0..w {
            let (py, px) = (r as f64 + 0.5 - a.0, c as f64 + 0.5 - a.1);
            let t = ((py * vy + px * vx) / len2).clamp(0.0, 1.0);
            let (dy, dx) = (py - t * vy, px - t * vx);
            if dy * dy + dx * dx <= half * half {
                mask[r * w + c] = 1.0;
            }
        }
    }
}

/// Grayscale images holding one to three random filled ellipses.
pub fn blobs(n: usize, h: usize, w: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = h.min(w) as f64;
    (0..n)
        .map(|i| {
            let mut mask = vec![0.0f32; h * w];
            for _ in 0..rng.random_range(1..=3) {
                let ry = rng.random_range(side * 0.08..side * 0.25);
                let rx = rng.random_range(side * 0.08..side * 0.25);
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                paint_ellipse(&mut mask, h, w, cy, cx, ry, rx);
            }
            render(format!("blob_{i:04}"), h, w, mask, &mut rng)
        })
        .collect()
}

pub const THIN_WIDTH: f64 = 2.0;
pub const THICK_WIDTH: f64 = 12.0;

/// Images mixing 2-pixel lines with 12-pixel bars, so that both small and
/// large receptive fields matter.
pub fn thin_and_thick(n: usize, h: usize, w: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    (0..n)
        .map(|i| {
            let mut mask = vec![0.0f32; h * w];
            for _ in 0..rng.random_range(2..=3) {
                let (a, b) = (point(&mut rng), point(&mut rng));
                paint_segment(&mut mask, h, w, a, b, THIN_WIDTH);
            }
            let (a, b) = (point(&mut rng), point(&mut rng));
            paint_segment(&mut mask, h, w, a, b, THICK_WIDTH);
            render(format!("mix_{i:04}"), h, w, mask, &mut rng)
        })
        .collect()
}

/// Writes `<id>.png` and `<id>_mask.png` for every sample.
pub fn write_pairs(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        save_image(&dir.join(format!("{}.png", s.source_id)), &s.image)?;
        save_mask(&dir.join(format!("{}_mask.png", s.source_id)), &s.mask)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic_and_nontrivial() {
        for gen in [blobs, thin_and_thick] {
            let a = gen(4, 48, 48, 7);
            assert_eq!(a, gen(4, 48, 48, 7));
            for s in &a {
                let fg = s.mask.sum();
                assert!(fg > 0.0 && fg < (48 * 48) as f32, "{}: {fg}", s.source_id);
            }
        }
    }

    #[test]
    fn written_pairs_ingest_back() {
        let dir = tempfile::tempdir().unwrap();
        let samples = blobs(3, 12, 16, 1);
        write_pairs(dir.path(), &samples).unwrap();
        let back = super::super::ingest(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-6);
        }
    }
}
