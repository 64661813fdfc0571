use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Number of distinct class templates available.
pub const TEMPLATE_COUNT: usize = 8;

/// Parameters of a generated ShapeSet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSetSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of the i.i.d. uniform pixel noise.
    pub noise: f32,
    /// Gap between "on" and "off" template pixels, centred on 0.5.
    pub contrast: f32,
}

impl Default for ShapeSetSpec {
    fn default() -> Self {
        Self { classes: 5, per_class: 600, channels: 1, height: 16, width: 16, noise: 0.3, contrast: 0.7 }
    }
}

/// Noise-free template for class `class` on an `h x w` grid, full contrast.
pub fn template(class: usize, h: usize, w: usize) -> Vec<f32> {
    template_with_contrast(class, h, w, 0.7)
}

pub fn template_with_contrast(class: usize, h: usize, w: usize, contrast: f32) -> Vec<f32> {
    let (low, high) = (0.5 - contrast / 2.0, 0.5 + contrast / 2.0);
    let (hf, wf) = (h as f32, w as f32);
    let (cy, cx) = ((hf - 1.0) / 2.0, (wf - 1.0) / 2.0);
    let period = (h.min(w) / 4).max(2);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            let r = (dy * dy + dx * dx).sqrt() / (hf.min(wf) / 2.0);
            let on = match class {
                // horizontal bars
                0 => (y / (period / 2).max(1)) % 2 == 0,
                // vertical bars
                1 => (x / (period / 2).max(1)) % 2 == 0,
                // central blob
                2 => r < 0.45,
                // checkerboard
                3 => ((y / period) + (x / period)) % 2 == 0,
                // ring
                4 => (0.55..0.85).contains(&r),
                // diagonal bars
                5 => ((x + y) / (period / 2).max(1)) % 2 == 0,
                // cross
                6 => dy.abs() < hf / 8.0 || dx.abs() < wf / 8.0,
                // hollow frame
                _ => {
                    let m = (h.min(w) / 6).max(1);
                    let inner = y >= m && y < h - m && x >= m && x < w - m;
                    let inner2 = y >= 2 * m && y < h - 2 * m && x >= 2 * m && x < w - 2 * m;
                    inner && !inner2
                }
            };
            out.push(if on { high } else { low });
        }
    }
    out
}

/// Procedural dataset: `per_class` noisy copies of each class template,
/// interleaved by class, with uniform noise in `[-noise, noise]`.
pub fn generate_shapeset(spec: &ShapeSetSpec, seed: u64) -> Result<Dataset> {
    let &ShapeSetSpec { classes, per_class: n_per_class, channels, height, width, noise: noise_level, contrast } = spec;
    if classes < 2 {
        return Err(Error::invalid("shapeset needs at least 2 classes"));
    }
    if classes > TEMPLATE_COUNT {
        return Err(Error::invalid(format!("shapeset has only {TEMPLATE_COUNT} templates, {classes} classes requested")));
    }
    if height < 8 || width < 8 {
        return Err(Error::invalid("shapeset images must be at least 8x8"));
    }
    if channels == 0 || !(0.0..=1.0).contains(&noise_level) {
        return Err(Error::invalid("channels must be positive and noise in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&contrast) {
        return Err(Error::invalid("contrast must be in [0, 1]"));
    }
    let templates: Vec<Vec<f32>> = (0..classes).map(|c| template_with_contrast(c, height, width, contrast)).collect();
    let mut rng = stream(seed, Purpose::Dataset, 0, 0);
    let n = classes * n_per_class;
    let plane = height * width;
    let mut data = Vec::with_capacity(n * channels * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        for _ in 0..channels {
            for &t in &templates[class] {
                let noise = if noise_level > 0.0 { rng.random_range(-noise_level..=noise_level) } else { 0.0 };
                data.push((t + noise).clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, channels, height, width], data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_distinct() {
        for a in 0..TEMPLATE_COUNT {
            for b in a + 1..TEMPLATE_COUNT {
                assert_ne!(template(a, 16, 16), template(b, 16, 16), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let d = generate_shapeset(&ShapeSetSpec { classes: 5, per_class: 4, channels: 1, height: 16, width: 16, noise: 0.0, contrast: 0.7 }, 3).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.images.item(i), d.images.item(i % 5));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_shapeset(&ShapeSetSpec { classes: 5, per_class: 10, channels: 2, height: 12, width: 12, noise: 0.2, contrast: 0.7 }, 42).unwrap();
        let b = generate_shapeset(&ShapeSetSpec { classes: 5, per_class: 10, channels: 2, height: 12, width: 12, noise: 0.2, contrast: 0.7 }, 42).unwrap();
        let c = generate_shapeset(&ShapeSetSpec { classes: 5, per_class: 10, channels: 2, height: 12, width: 12, noise: 0.2, contrast: 0.7 }, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_shapeset(&ShapeSetSpec { classes: 9, per_class: 1, channels: 1, height: 16, width: 16, noise: 0.1, contrast: 0.7 }, 0).is_err());
        assert!(generate_shapeset(&ShapeSetSpec { classes: 1, per_class: 1, channels: 1, height: 16, width: 16, noise: 0.1, contrast: 0.7 }, 0).is_err());
        assert!(generate_shapeset(&ShapeSetSpec { classes: 5, per_class: 1, channels: 1, height: 7, width: 16, noise: 0.1, contrast: 0.7 }, 0).is_err());
    }

    #[test]
    fn nearest_template_is_nearly_perfect() {
        let d = generate_shapeset(&ShapeSetSpec { classes: 5, per_class: 200, channels: 1, height: 16, width: 16, noise: 0.1, contrast: 0.7 }, 7).unwrap();
        let templates: Vec<Vec<f32>> = (0..5).map(|c| template(c, 16, 16)).collect();
        let correct = (0..d.len())
            .filter(|&i| {
                let img = d.images.item(i);
                let dist = |t: &Vec<f32>| img.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
                let best = (0..5).min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b]))).unwrap();
                best == d.labels[i]
            })
            .count();
        assert!(correct as f64 / d.len() as f64 >= 0.99);
    }
}
