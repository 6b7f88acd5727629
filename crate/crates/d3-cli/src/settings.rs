//! Effective run settings: built-in defaults, overlaid by an optional TOML
//! config file, overlaid by command-line flags. The resolved result can be
//! dumped as TOML; the dump parses back to the identical struct, which is
//! the reproducibility contract (same dump, same outputs).

use serde::{Deserialize, Serialize};

use std::fs;
use std::path::Path;

use d3_core::pursuit::default_stride;
use d3_core::{io_with_path, D3Error, DictionarySet, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub global: GlobalSettings,
    pub learn: LearnSettings,
    pub denoise: DenoiseSettings,
    pub metrics: MetricsSettings,
    pub sweep: SweepSettings,
    pub attack_eval: AttackEvalSettings,
    pub inspect: InspectSettings,
    /// Informational only; filled in by `--dump-settings` when a dictionary
    /// is loadable so the dump pins the exact artifact being used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            global: GlobalSettings::default(),
            learn: LearnSettings::default(),
            denoise: DenoiseSettings::default(),
            metrics: MetricsSettings::default(),
            sweep: SweepSettings::default(),
            attack_eval: AttackEvalSettings::default(),
            inspect: InspectSettings::default(),
            provenance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalSettings {
    pub seed: u64,
    /// 0 lets rayon size the pool; D3_THREADS overrides this, flags override
    /// both.
    pub threads: usize,
}

impl Default for GlobalSettings {
    fn default() -> Self {
        GlobalSettings { seed: 0, threads: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnSettings {
    pub corpus: String,
    pub patch_size: usize,
    pub channels: usize,
    pub eta: usize,
    pub kappa: usize,
    pub epsilon: f64,
    /// 0 resolves to 200 * eta.
    pub max_attempts: usize,
    /// "uniform", "gradmag", or "dir:PATH".
    pub saliency: String,
    pub out: String,
    /// Extra copy of the JSON build report; stdout always gets it.
    pub report: String,
}

impl Default for LearnSettings {
    fn default() -> Self {
        LearnSettings {
            corpus: String::new(),
            patch_size: 8,
            channels: 1,
            eta: 64,
            kappa: 2,
            epsilon: 0.85,
            max_attempts: 0,
            saliency: "gradmag".into(),
            out: "dict.d3".into(),
            report: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseSettings {
    pub dict: String,
    pub input: String,
    pub output: String,
    /// 0 resolves to the dictionary's sparsity.
    pub sparsity: usize,
    /// 0 resolves to max(1, P/4).
    pub stride: usize,
    pub randomize: bool,
    pub subsample_fraction: f64,
    pub top_k: usize,
}

impl Default for DenoiseSettings {
    fn default() -> Self {
        DenoiseSettings {
            dict: String::new(),
            input: String::new(),
            output: String::new(),
            sparsity: 0,
            stride: 0,
            randomize: false,
            subsample_fraction: 0.2,
            top_k: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSettings {
    pub dict: String,
    pub clean: String,
    /// Directory of perturbed images paired by file stem; empty generates
    /// noise at `noise_budget` instead.
    pub noisy: String,
    pub noise_budget: f64,
    pub delta: f64,
    pub sample: usize,
    /// Compute MR under the randomized mode instead of forcing
    /// deterministic.
    pub randomized_mr: bool,
    pub sparsity: usize,
    pub stride: usize,
    pub out_json: String,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        MetricsSettings {
            dict: String::new(),
            clean: String::new(),
            noisy: String::new(),
            noise_budget: 0.06,
            delta: 1e-4,
            sample: 500,
            randomized_mr: false,
            sparsity: 0,
            stride: 0,
            out_json: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub axis: String,
    pub values: String,
    pub corpus: String,
    pub patch_size: usize,
    pub channels: usize,
    pub eta: usize,
    pub kappa: usize,
    pub epsilon: f64,
    pub max_attempts: usize,
    pub saliency: String,
    pub noise_budget: f64,
    pub delta: f64,
    pub sample: usize,
    pub csv: String,
    pub svg: String,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            axis: "kappa".into(),
            values: "1,2,3,4,5".into(),
            corpus: String::new(),
            patch_size: 8,
            channels: 1,
            eta: 64,
            kappa: 2,
            epsilon: 0.85,
            max_attempts: 0,
            saliency: "gradmag".into(),
            noise_budget: 0.06,
            delta: 1e-4,
            sample: 500,
            csv: "sweep.csv".into(),
            svg: "sweep.svg".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackEvalSettings {
    pub dict: String,
    /// Empty trains a fresh model on transformed images.
    pub model: String,
    pub save_model: String,
    /// "synth" or "cifar:DIR".
    pub data: String,
    pub attack: String,
    pub threat: String,
    pub budget: f64,
    pub max_iter: usize,
    pub overshoot: f64,
    pub randomize: bool,
    pub subsample_fraction: f64,
    pub top_k: usize,
    pub sparsity: usize,
    pub stride: usize,
    /// "linear" or "mlp:H".
    pub arch: String,
    pub epochs: usize,
    pub lr: f64,
    pub n_per_class: usize,
    pub train_fraction: f64,
    pub out_json: String,
}

impl Default for AttackEvalSettings {
    fn default() -> Self {
        AttackEvalSettings {
            dict: String::new(),
            model: String::new(),
            save_model: String::new(),
            data: "synth".into(),
            attack: "fgsm".into(),
            threat: "grey".into(),
            budget: 0.06,
            max_iter: 50,
            overshoot: 0.02,
            randomize: false,
            subsample_fraction: 0.2,
            top_k: 2,
            sparsity: 0,
            stride: 0,
            arch: "mlp:32".into(),
            epochs: 30,
            lr: 0.3,
            n_per_class: 40,
            train_fraction: 0.7,
            out_json: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InspectSettings {
    pub dict: String,
    pub json: bool,
}

impl Default for InspectSettings {
    fn default() -> Self {
        InspectSettings { dict: String::new(), json: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dictionary: String,
    pub corpus_hash: String,
    pub build_seed: u64,
    pub patch_size: usize,
    pub channels: usize,
    pub kappa: usize,
    pub epsilon: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_with_path(e, path))?;
        toml::from_str(&text)
            .map_err(|e| D3Error::Format(format!("{}: {e}", path.display())))
    }

    /// Replaces the zero sentinels with their concrete defaults so the dump
    /// shows the values that will actually be used.
    pub fn resolve(&mut self) {
        if self.learn.max_attempts == 0 {
            self.learn.max_attempts = 200 * self.learn.eta.max(1);
        }
        if self.sweep.max_attempts == 0 {
            self.sweep.max_attempts = 200 * self.sweep.eta.max(1);
        }
        // Stride and sparsity defaults depend on the dictionary; resolve
        // from the file when one is named and readable.
        for (dict, sparsity, stride) in [
            (&self.denoise.dict, &mut self.denoise.sparsity, &mut self.denoise.stride),
            (&self.metrics.dict, &mut self.metrics.sparsity, &mut self.metrics.stride),
            (&self.attack_eval.dict, &mut self.attack_eval.sparsity, &mut self.attack_eval.stride),
        ] {
            if dict.is_empty() {
                continue;
            }
            if let Ok(set) = DictionarySet::load(Path::new(dict)) {
                if *sparsity == 0 {
                    *sparsity = set.sparsity();
                }
                if *stride == 0 {
                    *stride = default_stride(set.patch_size());
                }
                if self.provenance.is_none() {
                    self.provenance = Some(Provenance {
                        dictionary: dict.clone(),
                        corpus_hash: format!("{:016x}", set.corpus_hash()),
                        build_seed: set.seed(),
                        patch_size: set.patch_size(),
                        channels: set.channels(),
                        kappa: set.sparsity(),
                        epsilon: f64::from(set.epsilon()),
                    });
                }
            }
        }
    }

    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("settings serialize to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.global.seed = 99;
        cfg.learn.eta = 12;
        cfg.resolve();
        let dump = cfg.dump();
        let parsed: RunConfig = toml::from_str(&dump).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.dump(), dump);
    }

    #[test]
    fn defaults_carry_the_documented_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.learn.epsilon, 0.85);
        assert_eq!(cfg.attack_eval.budget, 0.06);
        assert_eq!(cfg.metrics.delta, 1e-4);
        assert_eq!(cfg.denoise.subsample_fraction, 0.2);
        assert_eq!(cfg.denoise.top_k, 2);
    }

    #[test]
    fn resolve_expands_attempt_budget() {
        let mut cfg = RunConfig::default();
        cfg.learn.eta = 7;
        cfg.resolve();
        assert_eq!(cfg.learn.max_attempts, 1400);
    }
}
