//! Greedy per-patch reconstruction with one dictionary per sparsity level,
//! and the image-level divide / denoise / merge pipeline built on top of it.
//!
//! At step `i` the residual is correlated against level `i`'s dictionary
//! only; the best-matching atom (largest `|correlation|`) is added to the
//! reconstruction and subtracted from the residual. Running the levels in
//! order means the reconstruction of a patch always lies in the span of at
//! most `kappa` atoms, one drawn from each level. With non-overlapping
//! patches the whole transformed image therefore lives in a union of
//! subspaces of dimension at most `kappa * n_patches`, a tiny fraction of the
//! pixel space, which is what strips perturbations that do not align with
//! the learned atoms.
//!
//! Selection is deterministic by default. The randomized mode restricts each
//! selection to a fresh uniform subsample of the level's atoms and then picks
//! uniformly among the strongest `top_k` correlations, which makes the
//! transform unpredictable to an attacker who knows the dictionaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dictionary::{Dictionary, DictionarySet};
use crate::error::{D3Error, Result};
use crate::patches::{self, ImageTensor};

/// How an atom is chosen from a level's correlations.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionMode {
    /// Largest `|correlation|`; exact ties resolve to the lowest atom index.
    Deterministic,
    /// Sample `ceil(eta * subsample_fraction)` atoms uniformly without
    /// replacement, rank them by `|correlation|`, then pick uniformly among
    /// the strongest `top_k`. The subsample and the pick are redrawn at
    /// every level.
    Randomized {
        subsample_fraction: f64,
        top_k: usize,
        seed: u64,
    },
}

impl SelectionMode {
    /// The randomized defaults: a fifth of the atoms, best two.
    #[must_use]
    pub fn randomized(seed: u64) -> Self {
        SelectionMode::Randomized { subsample_fraction: 0.2, top_k: 2, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if let SelectionMode::Randomized { subsample_fraction, top_k, .. } = self {
            if !(*subsample_fraction > 0.0 && *subsample_fraction <= 1.0) {
                return Err(D3Error::Dimension(format!(
                    "subsample fraction must lie in (0, 1], got {subsample_fraction}"
                )));
            }
            if *top_k == 0 {
                return Err(D3Error::Dimension("top_k must be at least 1".into()));
            }
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        match self {
            SelectionMode::Deterministic => 0,
            SelectionMode::Randomized { seed, .. } => *seed,
        }
    }
}

/// Settings of the full denoising transform.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    /// Number of pursuit steps; must not exceed the set's level count.
    pub sparsity: usize,
    pub mode: SelectionMode,
    /// Window step. The default `max(1, P/4)` gives 75% overlap.
    pub stride: usize,
    /// Patch-match tolerance used by the matching-rate metric.
    pub mr_delta: f64,
}

pub const DEFAULT_MR_DELTA: f64 = 1e-4;

impl DenoiseConfig {
    /// Defaults for a given set: full sparsity, deterministic, 75% overlap.
    #[must_use]
    pub fn for_set(set: &DictionarySet) -> Self {
        DenoiseConfig {
            sparsity: set.sparsity(),
            mode: SelectionMode::Deterministic,
            stride: default_stride(set.patch_size()),
            mr_delta: DEFAULT_MR_DELTA,
        }
    }

    pub fn validate(&self, set: &DictionarySet) -> Result<()> {
        if self.sparsity == 0 || self.sparsity > set.sparsity() {
            return Err(D3Error::Dimension(format!(
                "sparsity {} out of range; the set has {} levels",
                self.sparsity,
                set.sparsity()
            )));
        }
        if self.stride == 0 || self.stride > set.patch_size() {
            return Err(D3Error::Dimension(format!(
                "stride {} out of range for patch size {}",
                self.stride,
                set.patch_size()
            )));
        }
        if !(self.mr_delta >= 0.0 && self.mr_delta.is_finite()) {
            return Err(D3Error::Dimension(format!(
                "match tolerance must be finite and non-negative, got {}",
                self.mr_delta
            )));
        }
        self.mode.validate()
    }

    /// Copy with selection forced deterministic (used by the metrics, which
    /// measure the transform itself rather than one randomized draw).
    #[must_use]
    pub fn deterministic(&self) -> Self {
        DenoiseConfig { mode: SelectionMode::Deterministic, ..self.clone() }
    }
}

/// 75% overlap between neighbouring windows.
#[must_use]
pub fn default_stride(patch_size: usize) -> usize {
    (patch_size / 4).max(1)
}

/// One pursuit step: which atom of which level was used, with its weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub level: usize,
    pub atom: usize,
    pub coefficient: f64,
}

/// Picks an atom from `dict` for the given residual.
pub fn select_atom(
    dict: &Dictionary,
    residual: &[f64],
    mode: &SelectionMode,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64)> {
    if dict.is_empty() {
        return Err(D3Error::Dimension(format!(
            "level {} dictionary holds no atoms",
            dict.level()
        )));
    }
    let corr = dict.correlate(residual)?;
    match mode {
        SelectionMode::Deterministic => {
            let mut best = 0usize;
            for (k, a) in corr.iter().enumerate().skip(1) {
                if a.abs() > corr[best].abs() {
                    best = k;
                }
            }
            Ok((best, corr[best]))
        }
        SelectionMode::Randomized { subsample_fraction, top_k, .. } => {
            let n = corr.len();
            let m = ((n as f64 * subsample_fraction).ceil() as usize).clamp(1, n);
            let mut picked: Vec<usize> = rand::seq::index::sample(rng, n, m).into_vec();
            picked.sort_unstable_by(|&i, &j| {
                corr[j]
                    .abs()
                    .partial_cmp(&corr[i].abs())
                    .expect("correlations are finite")
                    .then(i.cmp(&j))
            });
            let k = (*top_k).min(m);
            let choice = picked[rng.gen_range(0..k)];
            Ok((choice, corr[choice]))
        }
    }
}

/// Runs the level-indexed pursuit over the first `sparsity` dictionaries of
/// `levels`. Returns the reconstruction and one trace entry per step.
pub(crate) fn pursue(
    levels: &[Dictionary],
    patch: &[f64],
    sparsity: usize,
    mode: &SelectionMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<TraceEntry>)> {
    let dim = patch.len();
    let mut residual = patch.to_vec();
    let mut recon = vec![0.0f64; dim];
    let mut trace = Vec::with_capacity(sparsity);
    for dict in levels.iter().take(sparsity) {
        // A residual that is exactly zero carries no direction to match;
        // keep the trace length fixed by emitting a zero-weight step.
        if residual.iter().all(|&v| v == 0.0) {
            trace.push(TraceEntry { level: dict.level(), atom: 0, coefficient: 0.0 });
            continue;
        }
        let (atom, coefficient) = select_atom(dict, &residual, mode, rng)?;
        let s = dict.atom(atom);
        for i in 0..dim {
            let step = coefficient * f64::from(s[i]);
            recon[i] += step;
            residual[i] -= step;
        }
        trace.push(TraceEntry { level: dict.level(), atom, coefficient });
    }
    Ok((recon, trace))
}

/// Denoises a single flattened patch with the level-indexed pursuit.
pub fn mp_denoise_patch(
    set: &DictionarySet,
    patch: &[f64],
    cfg: &DenoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<TraceEntry>)> {
    cfg.validate(set)?;
    if patch.len() != set.atom_dim() {
        return Err(D3Error::Dimension(format!(
            "patch length {} does not match the set's atom dimension {}",
            patch.len(),
            set.atom_dim()
        )));
    }
    pursue(set.levels(), patch, cfg.sparsity, &cfg.mode, rng)
}

/// Output of the image-level pipeline.
#[derive(Debug, Clone)]
pub struct DenoisedImage {
    pub image: ImageTensor,
    /// Margin pixels no window covered; they were copied from the input.
    pub uncovered_pixels: usize,
}

/// The full transform: extract overlapping patches, denoise each patch,
/// merge by averaging, clamp to `[0, 1]`. Patches are processed in parallel;
/// randomized selection derives one RNG stream per patch as
/// `seed ^ patch_index`, so results do not depend on the thread count.
pub fn denoise_image(
    set: &DictionarySet,
    img: &ImageTensor,
    cfg: &DenoiseConfig,
) -> Result<DenoisedImage> {
    cfg.validate(set)?;
    if img.channels() != set.channels() {
        return Err(D3Error::Dimension(format!(
            "image has {} channels but the dictionary was built for {}",
            img.channels(),
            set.channels()
        )));
    }
    let grid = patches::extract_patches(img, set.patch_size(), cfg.stride)?;
    let base_seed = cfg.mode.seed();
    let denoised: Result<Vec<Vec<f64>>> = grid
        .patches()
        .par_iter()
        .enumerate()
        .map(|(idx, patch)| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ idx as u64);
            pursue(set.levels(), patch, cfg.sparsity, &cfg.mode, &mut rng).map(|(q, _)| q)
        })
        .collect();
    let out_grid = grid.with_patches(denoised?)?;
    let image = patches::merge_patches_over(&out_grid, img)?;
    let uncovered =
        patches::uncovered_pixels(img.height(), img.width(), set.patch_size(), cfg.stride);
    Ok(DenoisedImage { image, uncovered_pixels: uncovered })
}
