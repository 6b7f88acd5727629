//! Images as flat float tensors and their decomposition into overlapping
//! square patches.
//!
//! A patch grid is produced by sliding a `P x P` window over the image with a
//! fixed stride, row-major. Each window is flattened into a single vector of
//! length `P * P * C` with channels interleaved, so color patches are matched
//! jointly across channels rather than per channel. Merging averages every
//! window value that covers a pixel and clamps the result to `[0, 1]`.
//!
//! When the stride does not divide `dim - P` a margin on the right/bottom is
//! covered by no window. [`merge_patches`] leaves that margin at zero;
//! [`merge_patches_over`] copies it from a base image, which is what the
//! full denoising pipeline does.

use crate::error::{D3Error, Result};

/// Row-major image with interleaved channels. Values are finite `f64`;
/// they are only guaranteed to lie in `[0, 1]` at I/O boundaries (decoding,
/// encoding, merge output). Intermediate tensors, e.g. an image with
/// adversarial noise added, may leave the range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(D3Error::Dimension(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(D3Error::Dimension(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(D3Error::Dimension(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(D3Error::Dimension(format!(
                "image contains non-finite value {bad}"
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
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
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[must_use]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. The caller keeps values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    #[must_use]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    #[must_use]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    #[must_use]
    pub fn norm_l2(&self) -> f64 {
        crate::util::l2_norm(&self.data)
    }

    /// Copy with every value clamped to `[0, 1]`.
    #[must_use]
    pub fn clamped(&self) -> ImageTensor {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        ImageTensor { height: self.height, width: self.width, channels: self.channels, data }
    }
}

/// Patches of one image, row-major over window positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patch_size: usize,
    stride: usize,
    channels: usize,
    rows: usize,
    cols: usize,
    patches: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn new(
        patch_size: usize,
        stride: usize,
        channels: usize,
        rows: usize,
        cols: usize,
        patches: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if patch_size == 0 || stride == 0 || stride > patch_size {
            return Err(D3Error::Dimension(format!(
                "invalid grid geometry: patch size {patch_size}, stride {stride}"
            )));
        }
        if patches.len() != rows * cols {
            return Err(D3Error::Dimension(format!(
                "grid holds {} patches but {rows}x{cols} were declared",
                patches.len()
            )));
        }
        let dim = patch_size * patch_size * channels;
        if let Some((i, p)) = patches.iter().enumerate().find(|(_, p)| p.len() != dim) {
            return Err(D3Error::Dimension(format!(
                "patch {i} has length {} but the grid expects {dim}",
                p.len()
            )));
        }
        Ok(Self { patch_size, stride, channels, rows, cols, patches })
    }

    #[must_use]
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    #[must_use]
    pub fn stride(&self) -> usize {
        self.stride
    }

    #[must_use]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Flattened patch vector length, `P * P * C`.
    #[must_use]
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    #[must_use]
    pub fn patches(&self) -> &[Vec<f64>] {
        &self.patches
    }

    #[must_use]
    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        &self.patches[row * self.cols + col]
    }

    /// Same geometry, different patch contents.
    pub fn with_patches(&self, patches: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.patch_size, self.stride, self.channels, self.rows, self.cols, patches)
    }
}

fn grid_axis(dim: usize, patch: usize, stride: usize) -> usize {
    (dim - patch) / stride + 1
}

/// Pixels left uncovered by the window grid; nonzero only when the stride
/// does not divide `dim - P` on some axis.
#[must_use]
pub fn uncovered_pixels(height: usize, width: usize, patch: usize, stride: usize) -> usize {
    let covered_h = (grid_axis(height, patch, stride) - 1) * stride + patch;
    let covered_w = (grid_axis(width, patch, stride) - 1) * stride + patch;
    height * width - covered_h * covered_w
}

/// Slides a `patch x patch` window over the image with the given stride and
/// flattens each window row-major with interleaved channels.
pub fn extract_patches(img: &ImageTensor, patch: usize, stride: usize) -> Result<PatchGrid> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if patch == 0 || patch > h.min(w) {
        return Err(D3Error::Dimension(format!(
            "patch size {patch} out of range for a {h}x{w} image"
        )));
    }
    if stride == 0 || stride > patch {
        return Err(D3Error::Dimension(format!(
            "stride {stride} out of range for patch size {patch}"
        )));
    }
    let rows = grid_axis(h, patch, stride);
    let cols = grid_axis(w, patch, stride);
    let dim = patch * patch * c;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for col in 0..cols {
            let (top, left) = (r * stride, col * stride);
            let mut v = Vec::with_capacity(dim);
            for py in 0..patch {
                let row_base = (top + py) * w;
                let start = (row_base + left) * c;
                v.extend_from_slice(&img.data()[start..start + patch * c]);
            }
            patches.push(v);
        }
    }
    PatchGrid::new(patch, stride, c, rows, cols, patches)
}

/// Per-pixel sums and coverage counts of a grid placed on an `h x w` canvas.
fn accumulate(grid: &PatchGrid, height: usize, width: usize) -> Result<(Vec<f64>, Vec<u32>)> {
    let (p, s, c) = (grid.patch_size(), grid.stride(), grid.channels());
    if p > height.min(width) {
        return Err(D3Error::Dimension(format!(
            "patch size {p} does not fit a {height}x{width} canvas"
        )));
    }
    let (rows, cols) = (grid_axis(height, p, s), grid_axis(width, p, s));
    if rows != grid.rows() || cols != grid.cols() {
        return Err(D3Error::Dimension(format!(
            "grid is {}x{} but a {height}x{width} canvas implies {rows}x{cols}",
            grid.rows(),
            grid.cols()
        )));
    }
    let mut sums = vec![0.0f64; height * width * c];
    let mut counts = vec![0u32; height * width];
    for r in 0..rows {
        for col in 0..cols {
            let (top, left) = (r * s, col * s);
            let patch = grid.patch(r, col);
            for py in 0..p {
                for px in 0..p {
                    let pixel = (top + py) * width + (left + px);
                    counts[pixel] += 1;
                    let src = (py * p + px) * c;
                    let dst = pixel * c;
                    for ch in 0..c {
                        sums[dst + ch] += patch[src + ch];
                    }
                }
            }
        }
    }
    Ok((sums, counts))
}

/// Averages overlapping patches back into an image and clamps to `[0, 1]`.
/// Uncovered margin pixels are left at zero; see [`merge_patches_over`].
pub fn merge_patches(grid: &PatchGrid, height: usize, width: usize) -> Result<ImageTensor> {
    let c = grid.channels();
    let (sums, counts) = accumulate(grid, height, width)?;
    let mut data = vec![0.0f64; height * width * c];
    for pixel in 0..height * width {
        if counts[pixel] > 0 {
            let n = f64::from(counts[pixel]);
            for ch in 0..c {
                data[pixel * c + ch] = (sums[pixel * c + ch] / n).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(height, width, c, data)
}

/// Like [`merge_patches`], but pixels covered by no window keep the value of
/// `base`. The base image must have the geometry the grid was extracted with.
pub fn merge_patches_over(grid: &PatchGrid, base: &ImageTensor) -> Result<ImageTensor> {
    if grid.channels() != base.channels() {
        return Err(D3Error::Dimension(format!(
            "grid has {} channels but the base image has {}",
            grid.channels(),
            base.channels()
        )));
    }
    let (height, width, c) = (base.height(), base.width(), base.channels());
    let (sums, counts) = accumulate(grid, height, width)?;
    let mut data = base.data().to_vec();
    for pixel in 0..height * width {
        if counts[pixel] > 0 {
            let n = f64::from(counts[pixel]);
            for ch in 0..c {
                data[pixel * c + ch] = (sums[pixel * c + ch] / n).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(height, width, c, data)
}
