//! Classifier-free proxies for how well the denoising transform defends.
//!
//! The matching rate (MR) asks how often a patch of a perturbed image is
//! mapped to (numerically) the same reconstruction as the corresponding
//! clean patch; high MR means the perturbation rarely changes which atoms
//! fire. The reconstruction error (RE) measures how much the transform
//! distorts clean images; `1 - RE` is the fidelity the defense retains.
//! Good operating points keep both high, and the two move in opposite
//! directions along every knob (sparsity, patch size, admission threshold),
//! which is what the sweep helper charts.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dictionary::DictionarySet;
use crate::error::{D3Error, Result};
use crate::learning::{self, CorpusImage, LearnConfig};
use crate::patches::{self, ImageTensor};
use crate::pursuit::{self, DenoiseConfig, SelectionMode};
use crate::saliency::SaliencyProvider;
use crate::util;

/// Summary of one metric evaluation.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    /// Fraction of patches whose clean and perturbed reconstructions agree
    /// within `delta` in max norm, averaged over images.
    pub mr: f64,
    /// Mean relative l2 distortion of clean images under the full transform.
    pub re: f64,
    pub n_images: usize,
    pub n_patches_per_image: usize,
    pub delta: f64,
    /// Hash of the dictionary provenance and the evaluation settings.
    pub fingerprint: String,
}

fn patch_transform_agreement(
    set: &DictionarySet,
    cfg: &DenoiseConfig,
    clean: &ImageTensor,
    perturbed: &ImageTensor,
    delta: f64,
) -> Result<f64> {
    if clean.height() != perturbed.height()
        || clean.width() != perturbed.width()
        || clean.channels() != perturbed.channels()
    {
        return Err(D3Error::Dimension(format!(
            "pair geometry mismatch: {}x{}x{} vs {}x{}x{}",
            clean.height(),
            clean.width(),
            clean.channels(),
            perturbed.height(),
            perturbed.width(),
            perturbed.channels()
        )));
    }
    let a = patches::extract_patches(clean, set.patch_size(), cfg.stride)?;
    let b = patches::extract_patches(perturbed, set.patch_size(), cfg.stride)?;
    let seed = match &cfg.mode {
        SelectionMode::Deterministic => 0,
        SelectionMode::Randomized { seed, .. } => *seed,
    };
    let matches: Result<usize> = a
        .patches()
        .par_iter()
        .zip(b.patches().par_iter())
        .enumerate()
        .map(|(idx, (p, q))| {
            // The deployed transform derives one stream per patch index, so
            // the clean and perturbed sides see the same draw.
            let mut r1 = ChaCha8Rng::seed_from_u64(seed ^ idx as u64);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed ^ idx as u64);
            let (tp, _) = pursuit::mp_denoise_patch(set, p, cfg, &mut r1)?;
            let (tq, _) = pursuit::mp_denoise_patch(set, q, cfg, &mut r2)?;
            let linf = tp
                .iter()
                .zip(&tq)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            Ok(usize::from(linf <= delta))
        })
        .sum();
    Ok(matches? as f64 / a.len() as f64)
}

/// Matching rate over clean/perturbed pairs, per-patch transform only (no
/// merge). Selection is forced deterministic: the metric describes the
/// transform, not one randomized draw. Use [`matching_rate_with_mode`] to
/// honor a randomized config.
pub fn matching_rate(
    set: &DictionarySet,
    cfg: &DenoiseConfig,
    pairs: &[(ImageTensor, ImageTensor)],
    delta: f64,
) -> Result<f64> {
    matching_rate_with_mode(set, &cfg.deterministic(), pairs, delta)
}

/// Matching rate honoring whatever selection mode the config carries.
pub fn matching_rate_with_mode(
    set: &DictionarySet,
    cfg: &DenoiseConfig,
    pairs: &[(ImageTensor, ImageTensor)],
    delta: f64,
) -> Result<f64> {
    cfg.validate(set)?;
    if pairs.is_empty() {
        return Err(D3Error::Dimension("no image pairs to evaluate".into()));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(D3Error::Dimension(format!(
            "match tolerance must be finite and non-negative, got {delta}"
        )));
    }
    let per_image: Result<Vec<f64>> = pairs
        .iter()
        .map(|(c, p)| patch_transform_agreement(set, cfg, c, p, delta))
        .collect();
    let per_image = per_image?;
    Ok(per_image.iter().sum::<f64>() / per_image.len() as f64)
}

/// Mean relative l2 distortion of the full transform on clean images.
/// Zero-norm images carry no scale to compare against and are skipped.
pub fn reconstruction_error(
    set: &DictionarySet,
    cfg: &DenoiseConfig,
    images: &[ImageTensor],
) -> Result<f64> {
    let det = cfg.deterministic();
    det.validate(set)?;
    if images.is_empty() {
        return Err(D3Error::Dimension("no images to evaluate".into()));
    }
    let per_image: Result<Vec<Option<f64>>> = images
        .par_iter()
        .map(|img| {
            let norm = img.norm_l2();
            if norm == 0.0 {
                return Ok(None);
            }
            let out = pursuit::denoise_image(set, img, &det)?;
            let dist: f64 = img
                .data()
                .iter()
                .zip(out.image.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok(Some(dist / norm))
        })
        .collect();
    let mut vals = Vec::with_capacity(images.len());
    let mut skipped = 0usize;
    for v in per_image? {
        match v {
            Some(x) => vals.push(x),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} zero-norm image(s) in the reconstruction-error average");
    }
    if vals.is_empty() {
        return Err(D3Error::Dimension("every image had zero norm".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn fingerprint(set: &DictionarySet, cfg: &DenoiseConfig, delta: f64) -> String {
    let mut state = 0u64;
    for chunk in [
        set.corpus_hash(),
        set.seed(),
        set.patch_size() as u64,
        set.channels() as u64,
        set.sparsity() as u64,
        cfg.sparsity as u64,
        cfg.stride as u64,
    ] {
        state = util::fnv1a64(&chunk.to_le_bytes(), state);
    }
    state = util::fnv1a64(&f64::from(set.epsilon()).to_le_bytes(), state);
    state = util::fnv1a64(&delta.to_le_bytes(), state);
    match &cfg.mode {
        SelectionMode::Deterministic => {
            state = util::fnv1a64(&[0u8], state);
        }
        SelectionMode::Randomized { subsample_fraction, top_k, seed } => {
            state = util::fnv1a64(&[1u8], state);
            state = util::fnv1a64(&subsample_fraction.to_le_bytes(), state);
            state = util::fnv1a64(&(*top_k as u64).to_le_bytes(), state);
            state = util::fnv1a64(&seed.to_le_bytes(), state);
        }
    }
    format!("{state:016x}")
}

/// Both metrics over the same pairs: MR on (clean, perturbed), RE on the
/// clean halves.
pub fn metrics_report(
    set: &DictionarySet,
    cfg: &DenoiseConfig,
    pairs: &[(ImageTensor, ImageTensor)],
    delta: f64,
) -> Result<MetricsReport> {
    let mr = matching_rate(set, cfg, pairs, delta)?;
    let clean: Vec<ImageTensor> = pairs.iter().map(|(c, _)| c.clone()).collect();
    let re = reconstruction_error(set, cfg, &clean)?;
    let grid = patches::extract_patches(&pairs[0].0, set.patch_size(), cfg.stride)?;
    Ok(MetricsReport {
        mr,
        re,
        n_images: pairs.len(),
        n_patches_per_image: grid.len(),
        delta,
        fingerprint: fingerprint(set, cfg, delta),
    })
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Pursuit depth; one build at the maximum, evaluated at each value.
    Kappa,
    /// Patch size; dictionaries are rebuilt per value, the evaluation
    /// stride follows `max(1, P/4)`.
    PatchSize,
    /// Admission threshold; dictionaries are rebuilt per value.
    Epsilon,
}

impl std::str::FromStr for SweepAxis {
    type Err = D3Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kappa" => Ok(SweepAxis::Kappa),
            "patch" | "patch-size" | "patch_size" => Ok(SweepAxis::PatchSize),
            "eps" | "epsilon" => Ok(SweepAxis::Epsilon),
            other => Err(D3Error::Dimension(format!(
                "unknown sweep axis '{other}' (expected kappa, patch or epsilon)"
            ))),
        }
    }
}

/// One sweep point; failed points carry the error text so the remaining
/// points still run.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Everything a sweep needs: a corpus plus saliency to (re)build sets, base
/// configs, and fixed evaluation pairs.
pub struct SweepInputs<'a> {
    pub corpus: &'a [CorpusImage],
    pub provider: &'a dyn SaliencyProvider,
    pub learn: LearnConfig,
    pub denoise: DenoiseConfig,
    pub pairs: &'a [(ImageTensor, ImageTensor)],
    pub delta: f64,
}

fn integral_values(axis: SweepAxis, values: &[f64]) -> Result<Vec<usize>> {
    values
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || v < 1.0 {
                return Err(D3Error::Dimension(format!(
                    "{axis:?} sweep values must be positive integers, got {v}"
                )));
            }
            Ok(v as usize)
        })
        .collect()
}

/// Evaluates the metrics along one axis. Build or evaluation failures are
/// recorded per point; the sweep itself only fails on invalid inputs.
pub fn metric_sweep(inputs: &SweepInputs, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(D3Error::Dimension("a sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    match axis {
        SweepAxis::Kappa => {
            let kappas = integral_values(axis, values)?;
            let max_kappa = *kappas.iter().max().expect("nonempty");
            let mut learn = inputs.learn.clone();
            learn.kappa = max_kappa;
            // One build serves every point; evaluation varies the depth.
            let (set, _) = learning::learn_dictionaries(inputs.corpus, inputs.provider, &learn)?;
            for &kappa in &kappas {
                let cfg = DenoiseConfig { sparsity: kappa, ..inputs.denoise.clone() };
                rows.push(row(kappa as f64, metrics_report(&set, &cfg, inputs.pairs, inputs.delta)));
            }
        }
        SweepAxis::PatchSize => {
            for &p in &integral_values(axis, values)? {
                let mut learn = inputs.learn.clone();
                learn.patch_size = p;
                let cfg = DenoiseConfig {
                    stride: pursuit::default_stride(p),
                    ..inputs.denoise.clone()
                };
                let outcome = learning::learn_dictionaries(inputs.corpus, inputs.provider, &learn)
                    .and_then(|(set, _)| metrics_report(&set, &cfg, inputs.pairs, inputs.delta));
                rows.push(row(p as f64, outcome));
            }
        }
        SweepAxis::Epsilon => {
            for &eps in values {
                if !(eps > 0.0 && eps < 1.0) {
                    return Err(D3Error::Dimension(format!(
                        "epsilon sweep values must lie in (0, 1), got {eps}"
                    )));
                }
                let mut learn = inputs.learn.clone();
                learn.epsilon = eps;
                let outcome = learning::learn_dictionaries(inputs.corpus, inputs.provider, &learn)
                    .and_then(|(set, _)| metrics_report(&set, &inputs.denoise, inputs.pairs, inputs.delta));
                rows.push(row(eps, outcome));
            }
        }
    }
    Ok(rows)
}

fn row(value: f64, outcome: Result<MetricsReport>) -> SweepRow {
    match outcome {
        Ok(report) => SweepRow { value, report: Some(report), error: None },
        Err(e) => {
            warn!("sweep point {value} failed: {e}");
            SweepRow { value, report: None, error: Some(e.to_string()) }
        }
    }
}

/// Deterministic subsample without replacement, used to cap evaluation sets.
#[must_use]
pub fn sample_pairs(
    pairs: Vec<(ImageTensor, ImageTensor)>,
    max_n: usize,
    seed: u64,
) -> Vec<(ImageTensor, ImageTensor)> {
    if pairs.len() <= max_n {
        return pairs;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pairs.len(), max_n).into_vec();
    picked.sort_unstable();
    let mut keep: Vec<Option<(ImageTensor, ImageTensor)>> = pairs.into_iter().map(Some).collect();
    picked.iter().map(|&i| keep[i].take().expect("indices unique")).collect()
}
