//! One function per subcommand. Each takes the fully resolved settings,
//! does its work, and prints a machine-readable result (JSON, CSV+SVG, or
//! plain text for `inspect`/`denoise`).

use log::warn;
use serde::Serialize;
use serde_json::json;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use d3_core::pursuit::default_stride;
use d3_core::saliency::{DirectorySaliency, GradientMagnitudeSaliency, UniformSaliency};
use d3_core::synth::{blob_dataset, noisy_pairs, BlobTaskSpec};
use d3_core::{
    accuracy, attack, denoise_image, derive_seed, evaluate_defense, io_with_path,
    learn_dictionaries, matching_rate_with_mode, metric_sweep, metrics, metrics_report, train_toy,
    transform_dataset, Arch, AttackKind, AttackSpec, D3Error, DenoiseConfig, DictionarySet,
    ImageTensor, LearnConfig, Result, SaliencyProvider, SelectionMode, SweepAxis, ThreatModel,
    ToyClassifier,
};

use crate::imageio;
use crate::plot::{self, Series};
use crate::settings::RunConfig;

fn saliency_provider(name: &str) -> Result<Box<dyn SaliencyProvider>> {
    match name {
        "uniform" => Ok(Box::new(UniformSaliency)),
        "gradmag" => Ok(Box::new(GradientMagnitudeSaliency)),
        _ => match name.strip_prefix("dir:") {
            Some(dir) if !dir.is_empty() => {
                Ok(Box::new(DirectorySaliency::new(PathBuf::from(dir))))
            }
            _ => Err(D3Error::Format(format!(
                "unknown saliency source '{name}' (expected uniform, gradmag or dir:PATH)"
            ))),
        },
    }
}

fn selection_mode(
    randomize: bool,
    subsample_fraction: f64,
    top_k: usize,
    seed: u64,
) -> SelectionMode {
    if randomize {
        SelectionMode::Randomized { subsample_fraction, top_k, seed }
    } else {
        SelectionMode::Deterministic
    }
}

fn denoise_config(
    set: &DictionarySet,
    sparsity: usize,
    stride: usize,
    mode: SelectionMode,
    mr_delta: f64,
) -> DenoiseConfig {
    DenoiseConfig {
        sparsity: if sparsity == 0 { set.sparsity() } else { sparsity },
        stride: if stride == 0 { default_stride(set.patch_size()) } else { stride },
        mode,
        mr_delta,
    }
}

fn emit_json<T: Serialize>(value: &T, extra_path: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| D3Error::Format(format!("serializing report: {e}")))?;
    println!("{text}");
    if !extra_path.is_empty() {
        fs::write(extra_path, format!("{text}\n"))?;
    }
    Ok(())
}

pub fn learn(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.learn;
    let corpus = imageio::load_corpus(Path::new(&s.corpus))?;
    let provider = saliency_provider(&s.saliency)?;
    let learn_cfg = LearnConfig {
        patch_size: s.patch_size,
        channels: s.channels,
        eta: s.eta,
        kappa: s.kappa,
        epsilon: s.epsilon,
        max_attempts: s.max_attempts,
        seed: cfg.global.seed,
        record_sources: false,
    };
    let (set, report) = learn_dictionaries(&corpus, provider.as_ref(), &learn_cfg)?;
    set.save(Path::new(&s.out))?;
    emit_json(&report, &s.report)
}

pub fn denoise(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.denoise;
    let set = DictionarySet::load(Path::new(&s.dict))?;
    let mode = selection_mode(s.randomize, s.subsample_fraction, s.top_k, cfg.global.seed);
    let dn = denoise_config(&set, s.sparsity, s.stride, mode, d3_core::pursuit::DEFAULT_MR_DELTA);
    if s.output.is_empty() {
        return Err(D3Error::Format("denoise needs --output".into()));
    }

    let input = Path::new(&s.input);
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        let out_dir = Path::new(&s.output);
        fs::create_dir_all(out_dir)?;
        imageio::image_files(input)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().expect("listed files have names").to_owned();
                (p, out_dir.join(name))
            })
            .collect()
    } else {
        vec![(input.to_path_buf(), PathBuf::from(&s.output))]
    };

    for (i, (src, dst)) in jobs.iter().enumerate() {
        let img = imageio::load_image(src)?;
        let per_image =
            DenoiseConfig { mode: reseeded(&dn.mode, i as u64), ..dn.clone() };
        let out = denoise_image(&set, &img, &per_image)?;
        if out.uncovered_pixels > 0 {
            warn!(
                "{}: {} margin pixels not covered by any window; copied from the input",
                src.display(),
                out.uncovered_pixels
            );
        }
        let denom = img.norm_l2();
        let residual = if denom > 0.0 {
            let diff: f64 = img
                .data()
                .iter()
                .zip(out.image.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            diff.sqrt() / denom
        } else {
            0.0
        };
        imageio::save_image(dst, &out.image)?;
        println!("{} relative_residual {residual:.6}", src.display());
    }
    Ok(())
}

/// Gives image `i` its own randomized stream; deterministic mode is left
/// alone so it stays reproducible by construction.
fn reseeded(mode: &SelectionMode, image_index: u64) -> SelectionMode {
    match mode {
        SelectionMode::Deterministic => SelectionMode::Deterministic,
        SelectionMode::Randomized { subsample_fraction, top_k, seed } => {
            SelectionMode::Randomized {
                subsample_fraction: *subsample_fraction,
                top_k: *top_k,
                seed: derive_seed(*seed, image_index),
            }
        }
    }
}

pub fn run_metrics(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.metrics;
    let set = DictionarySet::load(Path::new(&s.dict))?;
    let base = denoise_config(&set, s.sparsity, s.stride, SelectionMode::Deterministic, s.delta);

    let clean_dir = Path::new(&s.clean);
    let pairs = if s.noisy.is_empty() {
        let images: Vec<ImageTensor> = imageio::load_corpus(clean_dir)?
            .into_iter()
            .map(|c| c.image)
            .collect();
        noisy_pairs(&images, s.noise_budget, cfg.global.seed)
    } else {
        imageio::load_pairs(clean_dir, Path::new(&s.noisy))?
    };
    let pairs = metrics::sample_pairs(pairs, s.sample, cfg.global.seed);

    let report = metrics_report(&set, &base, &pairs, s.delta)?;
    let mut value = serde_json::to_value(&report)
        .map_err(|e| D3Error::Format(format!("serializing report: {e}")))?;
    if s.randomized_mr {
        let randomized = DenoiseConfig {
            mode: SelectionMode::randomized(cfg.global.seed),
            ..base.clone()
        };
        let mr = matching_rate_with_mode(&set, &randomized, &pairs, s.delta)?;
        value["mr_randomized"] = json!(mr);
    }
    emit_json(&value, &s.out_json)
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.sweep;
    let axis = SweepAxis::from_str(&s.axis)?;
    let values: Vec<f64> = s
        .values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| D3Error::Format(format!("sweep value '{v}': {e}")))
        })
        .collect::<Result<_>>()?;

    let corpus = imageio::load_corpus(Path::new(&s.corpus))?;
    let provider = saliency_provider(&s.saliency)?;
    let learn_cfg = LearnConfig {
        patch_size: s.patch_size,
        channels: s.channels,
        eta: s.eta,
        kappa: s.kappa,
        epsilon: s.epsilon,
        max_attempts: s.max_attempts,
        seed: cfg.global.seed,
        record_sources: false,
    };
    let denoise_cfg = DenoiseConfig {
        sparsity: s.kappa,
        mode: SelectionMode::Deterministic,
        stride: default_stride(s.patch_size),
        mr_delta: s.delta,
    };
    let images: Vec<ImageTensor> = corpus.iter().map(|c| c.image.clone()).collect();
    let pairs = metrics::sample_pairs(
        noisy_pairs(&images, s.noise_budget, cfg.global.seed),
        s.sample,
        cfg.global.seed,
    );
    let inputs = metrics::SweepInputs {
        corpus: &corpus,
        provider: provider.as_ref(),
        learn: learn_cfg,
        denoise: denoise_cfg,
        pairs: &pairs,
        delta: s.delta,
    };
    let rows = metric_sweep(&inputs, axis, &values)?;

    let header = ["value", "mr", "re", "one_minus_re", "n_images", "n_patches_per_image", "error"];
    let mut csv_rows = Vec::with_capacity(rows.len());
    let (mut mr_pts, mut omre_pts) = (Vec::new(), Vec::new());
    for row in &rows {
        match (&row.report, &row.error) {
            (Some(r), _) => {
                csv_rows.push(vec![
                    format!("{}", row.value),
                    format!("{:.6}", r.mr),
                    format!("{:.6}", r.re),
                    format!("{:.6}", 1.0 - r.re),
                    r.n_images.to_string(),
                    r.n_patches_per_image.to_string(),
                    String::new(),
                ]);
                mr_pts.push((row.value, r.mr));
                omre_pts.push((row.value, 1.0 - r.re));
                println!("{} {:.6} {:.6}", row.value, r.mr, 1.0 - r.re);
            }
            (None, err) => {
                let msg = err.clone().unwrap_or_else(|| "unknown failure".into());
                csv_rows.push(vec![
                    format!("{}", row.value),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    msg.clone(),
                ]);
                eprintln!("{}: {msg}", row.value);
            }
        }
    }
    plot::write_csv(Path::new(&s.csv), &header, &csv_rows)?;
    let series = [
        Series { name: "mr", points: mr_pts },
        Series { name: "1 - re", points: omre_pts },
    ];
    plot::write_line_svg(Path::new(&s.svg), &format!("{} sweep", s.axis), &s.axis, &series)?;
    println!("wrote {} and {}", s.csv, s.svg);
    Ok(())
}

fn parse_arch(name: &str) -> Result<Arch> {
    if name == "linear" {
        return Ok(Arch::Linear);
    }
    if let Some(h) = name.strip_prefix("mlp:") {
        let hidden: usize = h
            .parse()
            .map_err(|e| D3Error::Format(format!("mlp width '{h}': {e}")))?;
        if hidden == 0 {
            return Err(D3Error::Format("mlp width must be positive".into()));
        }
        return Ok(Arch::Mlp { hidden });
    }
    Err(D3Error::Format(format!(
        "unknown architecture '{name}' (expected linear or mlp:H)"
    )))
}

fn load_attack_data(spec: &str, n_per_class: usize, seed: u64) -> Result<d3_core::LabeledDataset> {
    if spec == "synth" {
        return blob_dataset(&BlobTaskSpec::default(), n_per_class, derive_seed(seed, 0xb10b));
    }
    if let Some(dir) = spec.strip_prefix("cifar:") {
        let mut bins: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_with_path(e, Path::new(dir)))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        bins.sort();
        if bins.is_empty() {
            return Err(D3Error::Dimension(format!("no .bin batches in {dir}")));
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for bin in bins {
            let bytes = fs::read(&bin).map_err(|e| io_with_path(e, &bin))?;
            let (mut i, mut l) = attack::read_cifar_batch(&bytes)?;
            images.append(&mut i);
            labels.append(&mut l);
        }
        return d3_core::LabeledDataset::new(images, labels, 10);
    }
    Err(D3Error::Format(format!(
        "unknown data source '{spec}' (expected synth or cifar:DIR)"
    )))
}

#[derive(Serialize)]
struct AttackEvalReport {
    attack: String,
    threat: String,
    budget: f64,
    randomize: bool,
    arch: Arch,
    n_train: usize,
    n_test: usize,
    train_accuracy: f64,
    #[serde(flatten)]
    eval: d3_core::DefenseEval,
}

pub fn attack_eval(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.attack_eval;
    let seed = cfg.global.seed;
    let set = DictionarySet::load(Path::new(&s.dict))?;
    let mode = selection_mode(s.randomize, s.subsample_fraction, s.top_k, seed);
    let dn = denoise_config(&set, s.sparsity, s.stride, mode, d3_core::pursuit::DEFAULT_MR_DELTA);

    let data = load_attack_data(&s.data, s.n_per_class, seed)?;
    if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
        return Err(D3Error::Dimension(format!(
            "train fraction must lie in (0, 1), got {}",
            s.train_fraction
        )));
    }
    let n_train = ((data.len() as f64 * s.train_fraction).round() as usize)
        .clamp(1, data.len() - 1);
    let (train, test) = data.split(n_train, derive_seed(seed, 0x5011))?;

    // Classifiers behind the defense are trained on what they will see in
    // deployment: deterministically transformed images. The randomized mode
    // only varies at evaluation time.
    let train_view = transform_dataset(&set, &dn.deterministic(), &train)?;
    let arch = parse_arch(&s.arch)?;
    let (model, _) = if s.model.is_empty() {
        train_toy(&train_view, arch, s.epochs, s.lr, seed)?
    } else {
        (ToyClassifier::load(Path::new(&s.model))?, Vec::new())
    };
    if !s.save_model.is_empty() {
        model.save(Path::new(&s.save_model))?;
    }

    let threat = match s.threat.as_str() {
        "grey" | "gray" => ThreatModel::Grey,
        "white" => ThreatModel::White,
        "black" => {
            let (surrogate, _) =
                train_toy(&train_view, model.arch(), s.epochs, s.lr, seed.wrapping_add(1))?;
            ThreatModel::Black { surrogate }
        }
        other => {
            return Err(D3Error::Format(format!(
                "unknown threat model '{other}' (expected black, grey or white)"
            )))
        }
    };
    let attack_spec = match s.attack.as_str() {
        "fgsm" => AttackSpec { kind: AttackKind::Fgsm, budget: s.budget, max_iter: s.max_iter, overshoot: s.overshoot },
        "deepfool" => AttackSpec { kind: AttackKind::DeepFool, budget: s.budget, max_iter: s.max_iter, overshoot: s.overshoot },
        other => {
            return Err(D3Error::Format(format!(
                "unknown attack '{other}' (expected fgsm or deepfool)"
            )))
        }
    };

    let eval = evaluate_defense(&model, &set, &dn, &test, &attack_spec, &threat)?;
    let report = AttackEvalReport {
        attack: s.attack.clone(),
        threat: s.threat.clone(),
        budget: s.budget,
        randomize: s.randomize,
        arch: model.arch(),
        n_train: train_view.len(),
        n_test: eval.n_images,
        train_accuracy: accuracy(&model, &train_view)?,
        eval,
    };
    emit_json(&report, &s.out_json)
}

pub fn inspect(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.inspect;
    let path = Path::new(&s.dict);
    let set = DictionarySet::load(path)?;

    #[derive(Serialize)]
    struct LevelNorms {
        level: usize,
        atoms: usize,
        norm_min: f64,
        norm_max: f64,
        norm_mean: f64,
    }
    let levels: Vec<LevelNorms> = set
        .levels()
        .iter()
        .map(|d| {
            let norms: Vec<f64> = (0..d.n_atoms())
                .map(|k| d.atom(k).iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
                .collect();
            let n = norms.len().max(1) as f64;
            LevelNorms {
                level: d.level(),
                atoms: d.n_atoms(),
                norm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
                norm_max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                norm_mean: norms.iter().sum::<f64>() / n,
            }
        })
        .collect();

    if s.json {
        let value = json!({
            "dictionary": s.dict,
            "patch_size": set.patch_size(),
            "channels": set.channels(),
            "kappa": set.sparsity(),
            "epsilon": set.epsilon(),
            "corpus_hash": format!("{:016x}", set.corpus_hash()),
            "build_seed": set.seed(),
            "atom_dim": set.atom_dim(),
            "levels": levels,
        });
        return emit_json(&value, "");
    }
    println!("dictionary {}", s.dict);
    println!(
        "patch size {}, channels {}, levels {}, epsilon {}",
        set.patch_size(),
        set.channels(),
        set.sparsity(),
        set.epsilon()
    );
    println!("corpus hash {:016x}, build seed {}", set.corpus_hash(), set.seed());
    for l in &levels {
        println!(
            "level {}: {} atoms, norms {:.6}..{:.6} (mean {:.6})",
            l.level, l.atoms, l.norm_min, l.norm_max, l.norm_mean
        );
    }
    Ok(())
}
