//! Synthetic data for desk-scale experiments: textured images standing in
//! for a natural-image corpus, labelled blob images for the toy classifier,
//! and norm-budgeted noise for clean/perturbed evaluation pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::LabeledDataset;
use crate::error::Result;
use crate::learning::CorpusImage;
use crate::patches::ImageTensor;
use crate::util::{derive_seed, gauss};

/// Textured images: a dim background with oriented strokes, pixel-scale
/// gratings and soft blobs, lightly noised. The local structure (sharp
/// oriented edges over flat regions, brightness varying image to image)
/// gives patch statistics close enough to small natural images for
/// dictionary learning to behave the way it does on photographs.
#[must_use]
pub fn texture_images(n: usize, height: usize, width: usize, channels: usize, seed: u64) -> Vec<ImageTensor> {
    (0..n)
        .map(|i| texture_image(height, width, channels, derive_seed(seed, i as u64)))
        .collect()
}

/// Same images wrapped with stable ids.
#[must_use]
pub fn texture_corpus(n: usize, height: usize, width: usize, channels: usize, seed: u64) -> Vec<CorpusImage> {
    texture_images(n, height, width, channels, seed)
        .into_iter()
        .enumerate()
        .map(|(i, image)| CorpusImage { id: format!("tex_{i:04}"), image })
        .collect()
}

fn texture_image(height: usize, width: usize, channels: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fh, fw) = (height as f64, width as f64);

    // Dim background with a soft ramp; overall brightness varies image to
    // image so the corpus holds both dark and bright patches.
    let base = rng.gen_range(0.08..0.45);
    let (gx, gy) = (0.25 * (rng.gen::<f64>() - 0.5), 0.25 * (rng.gen::<f64>() - 0.5));
    let mut plane = vec![0.0f64; height * width];
    for r in 0..height {
        for c in 0..width {
            plane[r * width + c] = base + gx * c as f64 / fw + gy * r as f64 / fh;
        }
    }
    // Oriented strokes: lines with a Gaussian cross profile, a couple of
    // pixels wide, the dominant source of edge patches.
    for _ in 0..rng.gen_range(2..=5) {
        let angle = rng.gen::<f64>() * std::f64::consts::PI;
        let (ca, sa) = (angle.cos(), angle.sin());
        // Signed distance to a line through a random anchor point.
        let (ay, ax) = (rng.gen::<f64>() * fh, rng.gen::<f64>() * fw);
        let sigma = rng.gen_range(0.7..2.0);
        let amp = rng.gen_range(0.3..0.9) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        for r in 0..height {
            for c in 0..width {
                let d = -sa * (c as f64 - ax) + ca * (r as f64 - ay);
                plane[r * width + c] += amp * (-d * d / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    // Pixel-scale gratings: period in pixels so every patch size sees real
    // oscillation, not a near-constant ramp.
    for _ in 0..rng.gen_range(1..=3) {
        let angle = rng.gen::<f64>() * std::f64::consts::PI;
        let period = rng.gen_range(2.5..10.0);
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let amp = rng.gen_range(0.08..0.35);
        let (ca, sa) = (angle.cos(), angle.sin());
        for r in 0..height {
            for c in 0..width {
                let t = (ca * c as f64 + sa * r as f64) * std::f64::consts::TAU / period;
                plane[r * width + c] += amp * (t + phase).sin();
            }
        }
    }
    // Soft blobs.
    for _ in 0..rng.gen_range(1..=3) {
        let (cy, cx) = (rng.gen::<f64>() * fh, rng.gen::<f64>() * fw);
        let sigma = rng.gen_range(1.2..4.0);
        let amp = rng.gen_range(-0.8..0.8);
        for r in 0..height {
            for c in 0..width {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                plane[r * width + c] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for v in &mut plane {
        *v += 0.03 * gauss(&mut rng);
    }

    let mut data = Vec::with_capacity(height * width * channels);
    for r in 0..height {
        for c in 0..width {
            let v = plane[r * width + c].clamp(0.005, 0.995);
            if channels == 1 {
                data.push(v);
            } else {
                // Channel tints keep color planes correlated but distinct.
                for ch in 0..channels {
                    let tint = 1.0 - 0.12 * ch as f64;
                    data.push((v * tint).clamp(0.0, 1.0));
                }
            }
        }
    }
    ImageTensor::new(height, width, channels, data).expect("generated image is well-formed")
}

/// Geometry of the labelled blob task. Class `k` places a Gaussian bump at a
/// fixed position on a ring; tighter rings and more noise make the task
/// harder and shrink classifier margins.
#[derive(Debug, Clone)]
pub struct BlobTaskSpec {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Bump radius in pixels.
    pub blob_sigma: f64,
    /// Bump peak height above the background.
    pub amplitude: f64,
    /// Per-pixel Gaussian sample noise.
    pub noise_sigma: f64,
    /// Uniform jitter of the bump centre, in pixels.
    pub jitter: f64,
    pub background: f64,
}

impl Default for BlobTaskSpec {
    fn default() -> Self {
        // The bright background matters: perturbation budgets are relative
        // to the image norm, so it hands the attacker a budget comparable
        // to the class margins while the bumps stay easy to classify.
        BlobTaskSpec {
            n_classes: 10,
            height: 16,
            width: 16,
            blob_sigma: 2.2,
            amplitude: 0.55,
            noise_sigma: 0.03,
            jitter: 0.8,
            background: 0.5,
        }
    }
}

/// Draws `n_per_class` labelled images per class, clamped to [0, 1].
pub fn blob_dataset(spec: &BlobTaskSpec, n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let radius = 0.30 * h.min(w) as f64;
    let (cy0, cx0) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut images = Vec::with_capacity(spec.n_classes * n_per_class);
    let mut labels = Vec::with_capacity(spec.n_classes * n_per_class);
    for class in 0..spec.n_classes {
        let angle = std::f64::consts::TAU * class as f64 / spec.n_classes as f64;
        let (by, bx) = (cy0 + radius * angle.sin(), cx0 + radius * angle.cos());
        for _ in 0..n_per_class {
            let jy = by + spec.jitter * (rng.gen::<f64>() * 2.0 - 1.0);
            let jx = bx + spec.jitter * (rng.gen::<f64>() * 2.0 - 1.0);
            let mut data = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let d2 = (r as f64 - jy).powi(2) + (c as f64 - jx).powi(2);
                    let v = spec.background
                        + spec.amplitude * (-d2 / (2.0 * spec.blob_sigma * spec.blob_sigma)).exp()
                        + spec.noise_sigma * gauss(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            images.push(ImageTensor::new(h, w, 1, data)?);
            labels.push(class);
        }
    }
    LabeledDataset::new(images, labels, spec.n_classes)
}

/// `img` plus Gaussian noise rescaled to `||noise|| = budget * ||img||`.
/// The sum is kept in floating point, deliberately unclamped, mirroring how
/// adversarial perturbations are applied.
#[must_use]
pub fn noisy_copy(img: &ImageTensor, relative_budget: f64, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise: Vec<f64> = (0..img.data().len()).map(|_| gauss(&mut rng)).collect();
    let n = crate::util::l2_norm(&noise);
    let target = relative_budget * img.norm_l2();
    if n > 0.0 {
        for v in &mut noise {
            *v *= target / n;
        }
    }
    let data: Vec<f64> = img.data().iter().zip(&noise).map(|(a, b)| a + b).collect();
    ImageTensor::new(img.height(), img.width(), img.channels(), data)
        .expect("noisy copy keeps the geometry")
}

/// Clean/perturbed pairs at a fixed relative noise budget.
#[must_use]
pub fn noisy_pairs(
    images: &[ImageTensor],
    relative_budget: f64,
    seed: u64,
) -> Vec<(ImageTensor, ImageTensor)> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.clone(), noisy_copy(img, relative_budget, derive_seed(seed, i as u64))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_in_range() {
        let a = texture_images(3, 20, 18, 1, 5);
        let b = texture_images(3, 20, 18, 1, 5);
        assert_eq!(a, b);
        for img in &a {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let c = texture_images(3, 20, 18, 1, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn blob_classes_differ_in_mean_position() {
        let spec = BlobTaskSpec { noise_sigma: 0.0, jitter: 0.0, ..BlobTaskSpec::default() };
        let data = blob_dataset(&spec, 1, 0).unwrap();
        assert_eq!(data.len(), 10);
        for i in 0..data.len() {
            for j in (i + 1)..data.len() {
                let d: f64 = data.images[i]
                    .data()
                    .iter()
                    .zip(data.images[j].data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > 0.3, "classes {i},{j} distance {d}");
            }
        }
    }

    #[test]
    fn noise_budget_is_exact() {
        let img = texture_images(1, 16, 16, 1, 1).pop().unwrap();
        let noisy = noisy_copy(&img, 0.06, 3);
        let d: f64 = img
            .data()
            .iter()
            .zip(noisy.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((d / img.norm_l2() - 0.06).abs() < 1e-9);
    }
}
