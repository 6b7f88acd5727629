//! Greedy dictionary construction.
//!
//! Levels are built in order. Level 1 collects raw patches; every later
//! level first reconstructs the candidate patch with the already-built
//! levels (one atom per level) and works on the residual instead, so each
//! dictionary specialises in what the previous levels leave behind. A
//! candidate is admitted only when the best single atom of the level under
//! construction still leaves a relative residual above `epsilon`, which
//! keeps atoms within a level mutually dissimilar.
//!
//! Candidates are drawn by picking a corpus image uniformly (with
//! replacement) and then a window whose probability is proportional to the
//! total saliency mass inside it. Admission always runs the deterministic
//! selection rule; randomized selection is a test-time device.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dictionary::{Dictionary, DictionarySet};
use crate::error::{D3Error, Result};
use crate::patches::ImageTensor;
use crate::pursuit::{self, SelectionMode};
use crate::saliency::{SaliencyMap, SaliencyProvider};
use crate::util;

/// A corpus entry: the id keys saliency lookups and provenance reports.
#[derive(Debug, Clone)]
pub struct CorpusImage {
    pub id: String,
    pub image: ImageTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub patch_size: usize,
    pub channels: usize,
    /// Atoms per level.
    pub eta: usize,
    /// Number of levels.
    pub kappa: usize,
    /// Admission threshold on the relative residual, in (0, 1).
    pub epsilon: f64,
    /// Candidate-draw budget per level.
    pub max_attempts: usize,
    pub seed: u64,
    /// Keep the raw source vector of every admitted candidate in the build
    /// report (used by replay checks; costly for large eta).
    pub record_sources: bool,
}

pub const DEFAULT_EPSILON: f64 = 0.85;

impl LearnConfig {
    /// Defaults: `epsilon` 0.85 and a draw budget of `200 * eta` per level.
    #[must_use]
    pub fn new(patch_size: usize, channels: usize, eta: usize, kappa: usize) -> Self {
        LearnConfig {
            patch_size,
            channels,
            eta,
            kappa,
            epsilon: DEFAULT_EPSILON,
            max_attempts: 200 * eta,
            seed: 0,
            record_sources: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(D3Error::Dimension("patch size must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(D3Error::Dimension(format!(
                "channel count must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.eta == 0 {
            return Err(D3Error::Dimension("eta must be at least 1".into()));
        }
        if self.kappa == 0 {
            return Err(D3Error::Dimension("kappa must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(D3Error::Dimension(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.max_attempts < self.eta {
            return Err(D3Error::Dimension(format!(
                "max_attempts {} cannot be smaller than eta {}",
                self.max_attempts, self.eta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct LevelStats {
    pub level: usize,
    pub admitted: usize,
    pub rejected: usize,
    pub attempts: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub levels: Vec<LevelStats>,
    /// Corpus fingerprint, hex.
    pub corpus_hash: String,
    pub seed: u64,
    pub patch_size: usize,
    pub channels: usize,
    pub eta: usize,
    pub kappa: usize,
    pub epsilon: f64,
    /// Raw candidate vectors behind each admitted atom, per level, in
    /// admission order. Only filled when `record_sources` is set.
    #[serde(skip)]
    pub admitted_sources: Vec<Vec<Vec<f64>>>,
}

/// Relative residual after reconstructing `candidate` with the single best
/// atom of `partial`. An empty dictionary reconstructs nothing, so the
/// ratio is 1.
#[must_use]
pub fn admission_ratio(partial: &Dictionary, candidate: &[f64]) -> f64 {
    let norm = util::l2_norm(candidate);
    if norm == 0.0 {
        return 0.0;
    }
    if partial.is_empty() {
        return 1.0;
    }
    let corr = partial
        .correlate(candidate)
        .expect("candidate dimension checked by the caller");
    let mut best = 0usize;
    for (k, a) in corr.iter().enumerate().skip(1) {
        if a.abs() > corr[best].abs() {
            best = k;
        }
    }
    let atom = partial.atom(best);
    let mut res = 0.0f64;
    for i in 0..candidate.len() {
        let r = candidate[i] - corr[best] * f64::from(atom[i]);
        res += r * r;
    }
    res.sqrt() / norm
}

/// Admission rule: keep the candidate only if the level under construction
/// cannot already reconstruct it to within `epsilon`.
#[must_use]
pub fn admission_test(partial: &Dictionary, candidate: &[f64], epsilon: f64) -> bool {
    admission_ratio(partial, candidate) > epsilon
}

/// Draws one flattened patch from `img`, with window probability
/// proportional to the saliency mass inside the window. Zero-norm patches
/// are rejected and redrawn; an all-zero map falls back to uniform.
pub fn sample_patch(
    img: &ImageTensor,
    weights: &SaliencyMap,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(D3Error::Dimension(format!(
            "patch size {patch_size} out of range for a {h}x{w} image"
        )));
    }
    if weights.height() != h || weights.width() != w {
        return Err(D3Error::Dimension(format!(
            "saliency map is {}x{} but the image is {h}x{w}",
            weights.height(),
            weights.width()
        )));
    }
    // Integral image over the saliency map; window mass in O(1) per window.
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for row in 0..h {
        for col in 0..w {
            integral[(row + 1) * (w + 1) + (col + 1)] = weights.get(row, col)
                + integral[row * (w + 1) + (col + 1)]
                + integral[(row + 1) * (w + 1) + col]
                - integral[row * (w + 1) + col];
        }
    }
    let window_mass = |top: usize, left: usize| -> f64 {
        let (b, r) = (top + patch_size, left + patch_size);
        integral[b * (w + 1) + r] - integral[top * (w + 1) + r] - integral[b * (w + 1) + left]
            + integral[top * (w + 1) + left]
    };
    let (wr, wc) = (h - patch_size + 1, w - patch_size + 1);
    let mut cum = Vec::with_capacity(wr * wc);
    let mut total = 0.0f64;
    for top in 0..wr {
        for left in 0..wc {
            total += window_mass(top, left).max(0.0);
            cum.push(total);
        }
    }
    if total <= 0.0 {
        warn!("all-zero saliency map; falling back to uniform window weights");
        total = (wr * wc) as f64;
        for (i, c) in cum.iter_mut().enumerate() {
            *c = (i + 1) as f64;
        }
    }

    for _ in 0..1024 {
        let r = rng.gen::<f64>() * total;
        let mut idx = cum.partition_point(|&c| c <= r);
        if idx >= cum.len() {
            idx = cum.len() - 1;
        }
        let (top, left) = (idx / wc, idx % wc);
        let mut patch = Vec::with_capacity(patch_size * patch_size * c);
        for py in 0..patch_size {
            let start = ((top + py) * w + left) * c;
            patch.extend_from_slice(&img.data()[start..start + patch_size * c]);
        }
        if patch.iter().any(|&v| v != 0.0) {
            return Ok(patch);
        }
    }
    Err(D3Error::Dimension(
        "every sampled window was zero-valued; the image carries no usable patches".into(),
    ))
}

pub(crate) fn corpus_fingerprint(corpus: &[CorpusImage]) -> u64 {
    let mut state = 0u64;
    for entry in corpus {
        let img = &entry.image;
        state = util::fnv1a64(&(img.height() as u64).to_le_bytes(), state);
        state = util::fnv1a64(&(img.width() as u64).to_le_bytes(), state);
        state = util::fnv1a64(&(img.channels() as u64).to_le_bytes(), state);
        for v in img.data() {
            state = util::fnv1a64(&v.to_le_bytes(), state);
        }
    }
    state
}

/// Builds `kappa` dictionaries of `eta` atoms each from the corpus.
pub fn learn_dictionaries(
    corpus: &[CorpusImage],
    provider: &dyn SaliencyProvider,
    cfg: &LearnConfig,
) -> Result<(DictionarySet, BuildReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(D3Error::Dimension("the corpus is empty".into()));
    }
    for entry in corpus {
        let img = &entry.image;
        if img.channels() != cfg.channels {
            return Err(D3Error::Dimension(format!(
                "corpus image '{}' has {} channels but the config says {}",
                entry.id,
                img.channels(),
                cfg.channels
            )));
        }
        if img.height() < cfg.patch_size || img.width() < cfg.patch_size {
            return Err(D3Error::Dimension(format!(
                "corpus image '{}' is {}x{}, smaller than the patch size {}",
                entry.id,
                img.height(),
                img.width(),
                cfg.patch_size
            )));
        }
    }

    // Saliency is a pure function of the image; compute each map once.
    let mut maps = Vec::with_capacity(corpus.len());
    for entry in corpus {
        let map = provider.saliency_for(&entry.image, &entry.id)?;
        if map.height() != entry.image.height() || map.width() != entry.image.width() {
            return Err(D3Error::Dimension(format!(
                "saliency map for '{}' is {}x{} but the image is {}x{}",
                entry.id,
                map.height(),
                map.width(),
                entry.image.height(),
                entry.image.width()
            )));
        }
        if map.is_all_zero() {
            warn!(
                "saliency map for '{}' is all-zero; sampling will fall back to uniform",
                entry.id
            );
        }
        maps.push(map);
    }

    let dim = cfg.patch_size * cfg.patch_size * cfg.channels;
    let hash = corpus_fingerprint(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let det = SelectionMode::Deterministic;

    let mut levels: Vec<Dictionary> = Vec::with_capacity(cfg.kappa);
    let mut stats = Vec::with_capacity(cfg.kappa);
    let mut sources: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.kappa);

    for level in 1..=cfg.kappa {
        let mut dict = Dictionary::new(level, dim)?;
        let mut level_sources = Vec::new();
        let mut attempts = 0usize;
        let mut rejected = 0usize;
        let mut last_ratio = f64::NAN;

        while dict.n_atoms() < cfg.eta {
            if attempts >= cfg.max_attempts {
                return Err(D3Error::Learning {
                    level,
                    admitted: dict.n_atoms(),
                    target: cfg.eta,
                    attempts,
                    last_ratio,
                });
            }
            attempts += 1;
            let pick = rng.gen_range(0..corpus.len());
            let patch = match sample_patch(&corpus[pick].image, &maps[pick], cfg.patch_size, &mut rng)
            {
                Ok(p) => p,
                Err(_) => {
                    // A degenerate image (no non-zero window) just burns the
                    // attempt; other corpus images can still supply atoms.
                    rejected += 1;
                    continue;
                }
            };

            // Level 1 works on the raw patch; later levels on the residual
            // the already-built levels leave behind.
            let candidate = if level == 1 {
                patch.clone()
            } else {
                let mut scratch = ChaCha8Rng::seed_from_u64(0);
                let (recon, _) = pursuit::pursue(&levels, &patch, level - 1, &det, &mut scratch)?;
                patch.iter().zip(&recon).map(|(p, q)| p - q).collect()
            };

            let norm = util::l2_norm(&candidate);
            if norm == 0.0 {
                rejected += 1;
                last_ratio = 0.0;
                continue;
            }
            let ratio = admission_ratio(&dict, &candidate);
            last_ratio = ratio;
            if ratio > cfg.epsilon {
                // Normalize in f64, then round through f32 so the in-memory
                // atoms match their on-disk representation bit for bit.
                let atom: Vec<f64> = candidate.iter().map(|v| (v / norm) as f32 as f64).collect();
                dict.push_atom(&atom)?;
                if cfg.record_sources {
                    level_sources.push(patch);
                }
            } else {
                rejected += 1;
            }
        }

        stats.push(LevelStats { level, admitted: dict.n_atoms(), rejected, attempts });
        sources.push(level_sources);
        levels.push(dict);
    }

    let set = DictionarySet::new(
        cfg.patch_size,
        cfg.channels,
        cfg.epsilon as f32,
        hash,
        cfg.seed,
        levels,
    )?;
    let report = BuildReport {
        levels: stats,
        corpus_hash: format!("{hash:016x}"),
        seed: cfg.seed,
        patch_size: cfg.patch_size,
        channels: cfg.channels,
        eta: cfg.eta,
        kappa: cfg.kappa,
        epsilon: cfg.epsilon,
        admitted_sources: sources,
    };
    Ok((set, report))
}
