//! Per-pixel importance weights used to bias patch sampling during
//! dictionary learning toward the regions a classifier would care about.
//!
//! Three sources are supported: uniform weights, a gradient-magnitude
//! stand-in computed from the image itself, and precomputed maps loaded from
//! a directory (one `D3SAL001` file per image, keyed by image id).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{D3Error, Result};
use crate::patches::ImageTensor;
use crate::util::io_with_path;

pub const SALIENCY_MAGIC: &[u8; 8] = b"D3SAL001";

/// Non-negative weight per pixel; not required to be normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(D3Error::Dimension(format!(
                "saliency dimensions must be positive, got {height}x{width}"
            )));
        }
        if weights.len() != height * width {
            return Err(D3Error::Dimension(format!(
                "saliency data length {} does not match {height}x{width}",
                weights.len()
            )));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(D3Error::Format(format!(
                "saliency weight {w} at index {i} is not a finite non-negative value"
            )));
        }
        Ok(Self { height, width, weights })
    }

    #[must_use]
    pub fn height(&self) -> usize {
        self.height
    }

    #[must_use]
    pub fn width(&self) -> usize {
        self.width
    }

    #[must_use]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    #[must_use]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width + col]
    }

    #[must_use]
    pub fn is_all_zero(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }
}

/// All-ones map: every window is equally likely.
#[must_use]
pub fn uniform_saliency(img: &ImageTensor) -> SaliencyMap {
    SaliencyMap {
        height: img.height(),
        width: img.width(),
        weights: vec![1.0; img.height() * img.width()],
    }
}

/// Image-gradient magnitude: central differences in the interior, one-sided
/// at the borders, combined over channels and directions as an l2 norm.
/// A cheap stand-in for classifier-gradient saliency that still concentrates
/// weight on edges and texture.
#[must_use]
pub fn gradient_magnitude_saliency(img: &ImageTensor) -> SaliencyMap {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut weights = vec![0.0f64; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0f64;
            for ch in 0..c {
                let gx = if w == 1 {
                    0.0
                } else if col == 0 {
                    img.get(row, 1, ch) - img.get(row, 0, ch)
                } else if col == w - 1 {
                    img.get(row, w - 1, ch) - img.get(row, w - 2, ch)
                } else {
                    (img.get(row, col + 1, ch) - img.get(row, col - 1, ch)) / 2.0
                };
                let gy = if h == 1 {
                    0.0
                } else if row == 0 {
                    img.get(1, col, ch) - img.get(0, col, ch)
                } else if row == h - 1 {
                    img.get(h - 1, col, ch) - img.get(h - 2, col, ch)
                } else {
                    (img.get(row + 1, col, ch) - img.get(row - 1, col, ch)) / 2.0
                };
                acc += gx * gx + gy * gy;
            }
            weights[row * w + col] = acc.sqrt();
        }
    }
    SaliencyMap { height: h, width: w, weights }
}

fn saliency_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.d3sal"))
}

/// Loads `<dir>/<image_id>.d3sal`.
pub fn load_saliency(dir: &Path, image_id: &str) -> Result<SaliencyMap> {
    let path = saliency_path(dir, image_id);
    let bytes = fs::read(&path).map_err(|e| io_with_path(e, &path))?;
    saliency_from_bytes(&bytes)
}

/// Writes `<dir>/<image_id>.d3sal`.
pub fn save_saliency(map: &SaliencyMap, dir: &Path, image_id: &str) -> Result<()> {
    let path = saliency_path(dir, image_id);
    fs::write(&path, saliency_to_bytes(map)).map_err(|e| io_with_path(e, &path))?;
    Ok(())
}

#[must_use]
pub fn saliency_to_bytes(map: &SaliencyMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + map.weights.len() * 4);
    out.extend_from_slice(SALIENCY_MAGIC);
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for &w in &map.weights {
        out.extend_from_slice(&(w as f32).to_le_bytes());
    }
    out
}

pub fn saliency_from_bytes(bytes: &[u8]) -> Result<SaliencyMap> {
    if bytes.len() < 16 {
        return Err(D3Error::Format("saliency file too short for its header".into()));
    }
    if &bytes[..8] != SALIENCY_MAGIC {
        return Err(D3Error::Format("not a saliency file (bad magic)".into()));
    }
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != height * width * 4 {
        return Err(D3Error::Format(format!(
            "saliency payload holds {} bytes but {height}x{width} needs {}",
            body.len(),
            height * width * 4
        )));
    }
    let weights: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    SaliencyMap::new(height, width, weights)
}

/// Source of saliency maps during dictionary learning.
pub trait SaliencyProvider: Sync {
    fn saliency_for(&self, img: &ImageTensor, image_id: &str) -> Result<SaliencyMap>;
}

pub struct UniformSaliency;

impl SaliencyProvider for UniformSaliency {
    fn saliency_for(&self, img: &ImageTensor, _image_id: &str) -> Result<SaliencyMap> {
        Ok(uniform_saliency(img))
    }
}

pub struct GradientMagnitudeSaliency;

impl SaliencyProvider for GradientMagnitudeSaliency {
    fn saliency_for(&self, img: &ImageTensor, _image_id: &str) -> Result<SaliencyMap> {
        Ok(gradient_magnitude_saliency(img))
    }
}

/// Precomputed maps on disk, one file per image id.
pub struct DirectorySaliency {
    dir: PathBuf,
}

impl DirectorySaliency {
    #[must_use]
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }
}

impl SaliencyProvider for DirectorySaliency {
    fn saliency_for(&self, img: &ImageTensor, image_id: &str) -> Result<SaliencyMap> {
        let map = load_saliency(&self.dir, image_id)?;
        if map.height() != img.height() || map.width() != img.width() {
            return Err(D3Error::Dimension(format!(
                "saliency map for '{image_id}' is {}x{} but the image is {}x{}",
                map.height(),
                map.width(),
                img.height(),
                img.width()
            )));
        }
        Ok(map)
    }
}
