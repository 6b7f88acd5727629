//! Patch-based image denoising as a defense against adversarial perturbations.
//!
//! The pipeline splits an image into overlapping patches, reconstructs each
//! patch greedily from a stack of learned dictionaries (one dictionary per
//! sparsity level), and merges the reconstructions back by averaging. Because
//! every patch is projected onto a handful of atoms, high-frequency
//! perturbations that do not align with the learned atoms are discarded.
//!
//! The crate also ships the tooling needed to study the defense end to end:
//! saliency-weighted dictionary learning ([`learning`]), stability and
//! reconstruction metrics ([`metrics`]), and a small attack harness with
//! gradient-based attacks on toy classifiers ([`attack`]).

pub mod attack;
pub mod dictionary;
pub mod error;
pub mod learning;
pub mod metrics;
pub mod patches;
pub mod pursuit;
pub mod saliency;
pub mod synth;

mod util;

pub use attack::{
    accuracy, apply_perturbation, deepfool, evaluate_defense, fgsm, train_toy, transform_dataset,
    Arch, AttackKind, AttackSpec, DeepFoolResult, DefenseEval, LabeledDataset, ThreatModel,
    ToyClassifier,
};
pub use dictionary::{Dictionary, DictionarySet};
pub use error::{D3Error, Result};
pub use learning::{learn_dictionaries, BuildReport, CorpusImage, LearnConfig, LevelStats};
pub use metrics::{
    matching_rate, matching_rate_with_mode, metric_sweep, metrics_report, reconstruction_error,
    MetricsReport, SweepAxis, SweepRow,
};
pub use patches::{extract_patches, merge_patches, merge_patches_over, ImageTensor, PatchGrid};
pub use pursuit::{
    denoise_image, mp_denoise_patch, DenoiseConfig, DenoisedImage, SelectionMode, TraceEntry,
};
pub use saliency::{SaliencyMap, SaliencyProvider};
pub use util::{derive_seed, io_with_path};
