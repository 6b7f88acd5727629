//! Desk-scale attack harness: small analytic classifiers, two classic
//! gradient attacks, and an evaluation loop that measures how much of the
//! attacked accuracy the denoising transform restores.
//!
//! Perturbations follow a fixed-norm protocol: whatever the attack computes
//! is rescaled to `||v||_2 = budget * ||x||_2` and added to the image in
//! floating point, without clamping. Three threat models are covered:
//! black box (gradients from a surrogate trained with a different seed),
//! grey box (true model, gradients at `x`), and white box (true model,
//! gradients taken at `T(x)` to step through the non-differentiable
//! transform, noise still added to `x`).

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use std::fs;
use std::path::Path;

use crate::dictionary::DictionarySet;
use crate::error::{D3Error, Result};
use crate::patches::ImageTensor;
use crate::pursuit::{self, DenoiseConfig, SelectionMode};
use crate::util::{derive_seed, gauss, io_with_path, l2_norm};

pub const MODEL_MAGIC: &[u8; 8] = b"D3MODL01";

/// Classifier architecture. The MLP uses one tanh hidden layer, so all
/// gradients are smooth and finite-difference checks are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Linear,
    Mlp { hidden: usize },
}

/// A small dense classifier over flattened images with analytic gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    arch: Arch,
    input_dim: usize,
    n_classes: usize,
    // Linear: w1 is classes x d, b1 classes, w2/b2 empty.
    // Mlp: w1 hidden x d, b1 hidden, w2 classes x hidden, b2 classes.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ToyClassifier {
    /// Seeded random initialization, scaled by `1/sqrt(fan_in)`.
    pub fn init(arch: Arch, input_dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || n_classes < 2 {
            return Err(D3Error::Dimension(format!(
                "classifier needs a positive input dimension and at least 2 classes, got {input_dim} and {n_classes}"
            )));
        }
        if let Arch::Mlp { hidden } = arch {
            if hidden == 0 {
                return Err(D3Error::Dimension("hidden width must be positive".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init_layer = |rows: usize, cols: usize| -> (Vec<f64>, Vec<f64>) {
            let scale = 1.0 / (cols as f64).sqrt();
            let w = (0..rows * cols).map(|_| scale * gauss(&mut rng)).collect();
            (w, vec![0.0; rows])
        };
        let (w1, b1, w2, b2) = match arch {
            Arch::Linear => {
                let (w, b) = init_layer(n_classes, input_dim);
                (w, b, Vec::new(), Vec::new())
            }
            Arch::Mlp { hidden } => {
                let (w1, b1) = init_layer(hidden, input_dim);
                let (w2, b2) = init_layer(n_classes, hidden);
                (w1, b1, w2, b2)
            }
        };
        Ok(Self { arch, input_dim, n_classes, w1, b1, w2, b2 })
    }

    #[must_use]
    pub fn arch(&self) -> Arch {
        self.arch
    }

    #[must_use]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[must_use]
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(D3Error::Dimension(format!(
                "input length {} does not match the classifier's {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let Arch::Mlp { hidden } = self.arch else {
            unreachable!("hidden() is only called for the mlp");
        };
        let mut h = Vec::with_capacity(hidden);
        for j in 0..hidden {
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[j];
            h.push(z.tanh());
        }
        h
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(match self.arch {
            Arch::Linear => matvec(&self.w1, x, &self.b1, self.n_classes),
            Arch::Mlp { .. } => {
                let h = self.hidden(x);
                matvec(&self.w2, &h, &self.b2, self.n_classes)
            }
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.logits(x)?;
        Ok(argmax(&logits))
    }

    /// Softmax cross-entropy against `label`, plus its gradient with respect
    /// to the input.
    pub fn loss_and_input_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        if label >= self.n_classes {
            return Err(D3Error::Dimension(format!(
                "label {label} out of range for {} classes",
                self.n_classes
            )));
        }
        let logits = self.logits(x)?;
        let (loss, dlogits) = softmax_ce(&logits, label);
        let grad = match self.arch {
            Arch::Linear => matvec_t(&self.w1, &dlogits, self.input_dim),
            Arch::Mlp { hidden } => {
                let h = self.hidden(x);
                let dh = matvec_t(&self.w2, &dlogits, hidden);
                let dz: Vec<f64> = dh.iter().zip(&h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
                matvec_t(&self.w1, &dz, self.input_dim)
            }
        };
        Ok((loss, grad))
    }

    /// Gradient of one logit with respect to the input.
    pub fn logit_input_grad(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if class >= self.n_classes {
            return Err(D3Error::Dimension(format!(
                "class {class} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(match self.arch {
            Arch::Linear => {
                self.w1[class * self.input_dim..(class + 1) * self.input_dim].to_vec()
            }
            Arch::Mlp { hidden } => {
                let h = self.hidden(x);
                let row = &self.w2[class * hidden..(class + 1) * hidden];
                let dz: Vec<f64> = row.iter().zip(&h).map(|(w, hv)| w * (1.0 - hv * hv)).collect();
                matvec_t(&self.w1, &dz, self.input_dim)
            }
        })
    }

    #[must_use]
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let (tag, hidden) = match self.arch {
            Arch::Linear => (0u32, 0u32),
            Arch::Mlp { hidden } => (1u32, hidden as u32),
        };
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_classes as u32).to_le_bytes());
        out.extend_from_slice(&hidden.to_le_bytes());
        for block in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for &v in block {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(D3Error::Format("model file too short for its header".into()));
        }
        if &bytes[..8] != MODEL_MAGIC {
            return Err(D3Error::Format("not a model file (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (tag, input_dim, n_classes, hidden) = (word(8), word(12), word(16), word(20));
        let arch = match tag {
            0 => Arch::Linear,
            1 => Arch::Mlp { hidden },
            other => return Err(D3Error::Format(format!("unknown architecture tag {other}"))),
        };
        let sizes = match arch {
            Arch::Linear => [n_classes * input_dim, n_classes, 0, 0],
            Arch::Mlp { hidden } => {
                [hidden * input_dim, hidden, n_classes * hidden, n_classes]
            }
        };
        let want = 24 + 4 * sizes.iter().sum::<usize>();
        if bytes.len() != want {
            return Err(D3Error::Format(format!(
                "model payload holds {} bytes but the header implies {want}",
                bytes.len()
            )));
        }
        let mut pos = 24;
        let mut blocks: Vec<Vec<f64>> = Vec::with_capacity(4);
        for &n in &sizes {
            let mut block = Vec::with_capacity(n);
            for _ in 0..n {
                let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
                if !v.is_finite() {
                    return Err(D3Error::Format("model weight is not finite".into()));
                }
                block.push(f64::from(v));
                pos += 4;
            }
            blocks.push(block);
        }
        let b2 = blocks.pop().unwrap();
        let w2 = blocks.pop().unwrap();
        let b1 = blocks.pop().unwrap();
        let w1 = blocks.pop().unwrap();
        if input_dim == 0 || n_classes < 2 {
            return Err(D3Error::Format(format!(
                "implausible model dimensions {input_dim}x{n_classes}"
            )));
        }
        Ok(Self { arch, input_dim, n_classes, w1, b1, w2, b2 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| io_with_path(e, path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| io_with_path(e, path))?)
    }
}

fn matvec(w: &[f64], x: &[f64], b: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(wv, xv)| wv * xv)
                .sum::<f64>()
                + b[r]
        })
        .collect()
}

/// `w^T y` for a row-major `rows x cols` matrix.
fn matvec_t(w: &[f64], y: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; cols];
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += yr * wv;
        }
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Returns the loss and `softmax(logits) - onehot(label)`. The loss is the
/// log-sum-exp form, so it stays finite for any finite logits and goes NaN
/// only when the logits themselves overflow.
fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[label];
    let mut d: Vec<f64> = exps.iter().map(|e| e / z).collect();
    d[label] -= 1.0;
    (loss, d)
}

/// Labelled flattened-image dataset.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(D3Error::Dimension(format!(
                "dataset holds {} images and {} labels",
                images.len(),
                labels.len()
            )));
        }
        if n_classes < 2 {
            return Err(D3Error::Dimension("a dataset needs at least 2 classes".into()));
        }
        let (h, w, c) = (images[0].height(), images[0].width(), images[0].channels());
        for img in &images {
            if img.height() != h || img.width() != w || img.channels() != c {
                return Err(D3Error::Dimension("dataset images differ in geometry".into()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(D3Error::Dimension(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self { images, labels, n_classes })
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.images.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    #[must_use]
    pub fn input_dim(&self) -> usize {
        self.images[0].data().len()
    }

    /// Seeded shuffle-and-split; the first part holds `n_train` samples.
    pub fn split(self, n_train: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(D3Error::Dimension(format!(
                "cannot split {} samples into {n_train} train",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let n_classes = self.n_classes;
        let take = |idx: &[usize]| -> (Vec<ImageTensor>, Vec<usize>) {
            (
                idx.iter().map(|&i| self.images[i].clone()).collect(),
                idx.iter().map(|&i| self.labels[i]).collect(),
            )
        };
        let (train_imgs, train_labels) = take(&order[..n_train]);
        let (test_imgs, test_labels) = take(&order[n_train..]);
        Ok((
            LabeledDataset::new(train_imgs, train_labels, n_classes)?,
            LabeledDataset::new(test_imgs, test_labels, n_classes)?,
        ))
    }
}

/// Minibatch SGD on softmax cross-entropy. Returns the model and the mean
/// loss per epoch; a non-finite loss aborts with a hint to lower the rate.
pub fn train_toy(
    data: &LabeledDataset,
    arch: Arch,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(ToyClassifier, Vec<f64>)> {
    let mut model = ToyClassifier::init(arch, data.input_dim(), data.n_classes, seed)?;
    let mut losses = Vec::with_capacity(epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7261_696e));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = 32usize;
    for epoch in 0..epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(batch) {
            epoch_loss += sgd_step(&mut model, data, chunk, lr)?;
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(D3Error::Diverged { epoch, lr });
        }
        log::debug!("epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }
    Ok((model, losses))
}

fn sgd_step(
    model: &mut ToyClassifier,
    data: &LabeledDataset,
    batch: &[usize],
    lr: f64,
) -> Result<f64> {
    let d = model.input_dim;
    let classes = model.n_classes;
    let mut loss_sum = 0.0f64;
    match model.arch {
        Arch::Linear => {
            let mut gw = vec![0.0f64; classes * d];
            let mut gb = vec![0.0f64; classes];
            for &i in batch {
                let x = data.images[i].data();
                let logits = matvec(&model.w1, x, &model.b1, classes);
                let (loss, dlogits) = softmax_ce(&logits, data.labels[i]);
                loss_sum += loss;
                for (k, &dk) in dlogits.iter().enumerate() {
                    gb[k] += dk;
                    let row = &mut gw[k * d..(k + 1) * d];
                    for (g, &xv) in row.iter_mut().zip(x) {
                        *g += dk * xv;
                    }
                }
            }
            let scale = lr / batch.len() as f64;
            update(&mut model.w1, &gw, scale);
            update(&mut model.b1, &gb, scale);
        }
        Arch::Mlp { hidden } => {
            let mut gw1 = vec![0.0f64; hidden * d];
            let mut gb1 = vec![0.0f64; hidden];
            let mut gw2 = vec![0.0f64; classes * hidden];
            let mut gb2 = vec![0.0f64; classes];
            for &i in batch {
                let x = data.images[i].data();
                let h = model.hidden(x);
                let logits = matvec(&model.w2, &h, &model.b2, classes);
                let (loss, dlogits) = softmax_ce(&logits, data.labels[i]);
                loss_sum += loss;
                for (k, &dk) in dlogits.iter().enumerate() {
                    gb2[k] += dk;
                    let row = &mut gw2[k * hidden..(k + 1) * hidden];
                    for (g, &hv) in row.iter_mut().zip(&h) {
                        *g += dk * hv;
                    }
                }
                let dh = matvec_t(&model.w2, &dlogits, hidden);
                for j in 0..hidden {
                    let dz = dh[j] * (1.0 - h[j] * h[j]);
                    gb1[j] += dz;
                    let row = &mut gw1[j * d..(j + 1) * d];
                    for (g, &xv) in row.iter_mut().zip(x) {
                        *g += dz * xv;
                    }
                }
            }
            let scale = lr / batch.len() as f64;
            update(&mut model.w1, &gw1, scale);
            update(&mut model.b1, &gb1, scale);
            update(&mut model.w2, &gw2, scale);
            update(&mut model.b2, &gb2, scale);
        }
    }
    Ok(loss_sum)
}

fn update(w: &mut [f64], g: &[f64], scale: f64) {
    for (wv, gv) in w.iter_mut().zip(g) {
        *wv -= scale * gv;
    }
}

/// Fraction of the dataset the model labels correctly.
pub fn accuracy(model: &ToyClassifier, data: &LabeledDataset) -> Result<f64> {
    let mut hits = 0usize;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        if model.predict(img.data())? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Fast gradient sign perturbation, rescaled to `budget * ||x||_2`.
/// A zero gradient yields a zero perturbation with a warning.
pub fn fgsm(model: &ToyClassifier, x: &ImageTensor, label: usize, budget: f64) -> Result<Vec<f64>> {
    if !(budget >= 0.0 && budget.is_finite()) {
        return Err(D3Error::Dimension(format!(
            "budget must be finite and non-negative, got {budget}"
        )));
    }
    let (_, grad) = model.loss_and_input_grad(x.data(), label)?;
    let mut v: Vec<f64> = grad.iter().map(|&g| if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 }).collect();
    let n = l2_norm(&v);
    if n == 0.0 {
        warn!("fgsm: zero loss gradient; returning a zero perturbation");
        return Ok(v);
    }
    let target = budget * x.norm_l2();
    for vi in &mut v {
        *vi *= target / n;
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct DeepFoolResult {
    /// Final perturbation, already scaled by `1 + overshoot`.
    pub perturbation: Vec<f64>,
    /// Linearization steps taken.
    pub iterations: usize,
    /// Whether the perturbed image changed the predicted label.
    pub flipped: bool,
}

/// Iterative minimal-perturbation attack: at each step, linearize every
/// competing logit margin, move to the nearest linearized boundary, stop
/// once the label flips. For a binary linear model this is the exact
/// projection `-f(x) w / ||w||^2` in a single step.
pub fn deepfool(
    model: &ToyClassifier,
    x: &ImageTensor,
    max_iter: usize,
    overshoot: f64,
) -> Result<DeepFoolResult> {
    if !(overshoot >= 0.0 && overshoot.is_finite()) {
        return Err(D3Error::Dimension(format!(
            "overshoot must be finite and non-negative, got {overshoot}"
        )));
    }
    let x0 = x.data();
    let d = x0.len();
    let k0 = model.predict(x0)?;
    let mut r_tot = vec![0.0f64; d];
    let mut iterations = 0usize;
    let mut flipped = false;
    while iterations < max_iter {
        let xi: Vec<f64> = x0
            .iter()
            .zip(&r_tot)
            .map(|(a, r)| a + (1.0 + overshoot) * r)
            .collect();
        if model.predict(&xi)? != k0 {
            flipped = true;
            break;
        }
        let logits = model.logits(&xi)?;
        let g0 = model.logit_input_grad(&xi, k0)?;
        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        for k in 0..model.n_classes() {
            if k == k0 {
                continue;
            }
            let gk = model.logit_input_grad(&xi, k)?;
            let w: Vec<f64> = gk.iter().zip(&g0).map(|(a, b)| a - b).collect();
            let wn = l2_norm(&w);
            if wn < 1e-12 {
                continue;
            }
            let f = logits[k] - logits[k0];
            let score = f.abs() / wn;
            if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
                best = Some((score, w, f));
            }
        }
        let Some((_, w, f)) = best else {
            warn!("deepfool: no usable boundary direction; stopping early");
            break;
        };
        let step = f.abs() / w.iter().map(|v| v * v).sum::<f64>();
        for (r, wv) in r_tot.iter_mut().zip(&w) {
            *r += step * wv;
        }
        iterations += 1;
    }
    if !flipped {
        let xi: Vec<f64> = x0
            .iter()
            .zip(&r_tot)
            .map(|(a, r)| a + (1.0 + overshoot) * r)
            .collect();
        flipped = model.predict(&xi)? != k0;
    }
    let perturbation = r_tot.iter().map(|r| (1.0 + overshoot) * r).collect();
    Ok(DeepFoolResult { perturbation, iterations, flipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    DeepFool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Relative l2 budget the final perturbation is scaled to.
    pub budget: f64,
    /// DeepFool iteration cap.
    pub max_iter: usize,
    /// DeepFool boundary overshoot.
    pub overshoot: f64,
}

impl AttackSpec {
    #[must_use]
    pub fn fgsm(budget: f64) -> Self {
        AttackSpec { kind: AttackKind::Fgsm, budget, max_iter: 50, overshoot: 0.02 }
    }

    #[must_use]
    pub fn deepfool(budget: f64) -> Self {
        AttackSpec { kind: AttackKind::DeepFool, budget, max_iter: 50, overshoot: 0.02 }
    }
}

/// What the attacker sees.
pub enum ThreatModel {
    /// Gradients come from an independently trained surrogate.
    Black { surrogate: ToyClassifier },
    /// Gradients of the true model at the raw input.
    Grey,
    /// Gradients of the true model at the transformed input.
    White,
}

/// Accuracy of the deployed pipeline, of the bare model under attack, and of
/// the pipeline under attack.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DefenseEval {
    pub clean: f64,
    pub attacked_no_defense: f64,
    pub attacked_with_defense: f64,
    pub n_images: usize,
}

/// Adds a flat perturbation to an image; values stay in floating point.
pub fn apply_perturbation(img: &ImageTensor, v: &[f64]) -> Result<ImageTensor> {
    if v.len() != img.data().len() {
        return Err(D3Error::Dimension(format!(
            "perturbation length {} does not match the image's {}",
            v.len(),
            img.data().len()
        )));
    }
    let data = img.data().iter().zip(v).map(|(a, b)| a + b).collect();
    ImageTensor::new(img.height(), img.width(), img.channels(), data)
}

/// Applies the denoising transform to every image of a dataset (used to
/// train classifiers on what they will actually see behind the defense).
/// Randomized modes draw one per-image stream exactly as the deployed
/// defense does, so the training distribution matches deployment.
pub fn transform_dataset(
    set: &DictionarySet,
    cfg: &DenoiseConfig,
    data: &LabeledDataset,
) -> Result<LabeledDataset> {
    let images: Result<Vec<ImageTensor>> = data
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let per_image = DenoiseConfig {
                mode: per_image_mode(&cfg.mode, i as u64, 0),
                ..cfg.clone()
            };
            pursuit::denoise_image(set, img, &per_image).map(|d| d.image)
        })
        .collect();
    LabeledDataset::new(images?, data.labels.clone(), data.n_classes)
}

fn per_image_mode(mode: &SelectionMode, image_index: u64, salt: u64) -> SelectionMode {
    match mode {
        SelectionMode::Deterministic => SelectionMode::Deterministic,
        SelectionMode::Randomized { subsample_fraction, top_k, seed } => {
            SelectionMode::Randomized {
                subsample_fraction: *subsample_fraction,
                top_k: *top_k,
                seed: derive_seed(seed ^ salt, image_index),
            }
        }
    }
}

const ATTACKER_SALT: u64 = 0xa77a_c4e5_0000_0001;

/// Runs one attack over a dataset under one threat model and scores the
/// three accuracies. Randomized defenses re-seed per image; the white-box
/// attacker gets its own independent draw of the transform.
pub fn evaluate_defense(
    model: &ToyClassifier,
    set: &DictionarySet,
    cfg: &DenoiseConfig,
    data: &LabeledDataset,
    attack: &AttackSpec,
    threat: &ThreatModel,
) -> Result<DefenseEval> {
    cfg.validate(set)?;
    if data.input_dim() != model.input_dim() {
        return Err(D3Error::Dimension(format!(
            "dataset input dimension {} does not match the model's {}",
            data.input_dim(),
            model.input_dim()
        )));
    }
    if let ThreatModel::Black { surrogate } = threat {
        if surrogate.input_dim() != model.input_dim()
            || surrogate.n_classes() != model.n_classes()
        {
            return Err(D3Error::Dimension(
                "surrogate and true model geometries differ".into(),
            ));
        }
    }
    if !(attack.budget >= 0.0 && attack.budget.is_finite()) {
        return Err(D3Error::Dimension(format!(
            "budget must be finite and non-negative, got {}",
            attack.budget
        )));
    }

    let per_image: Result<Vec<(bool, bool, bool)>> = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let defender = DenoiseConfig {
                mode: per_image_mode(&cfg.mode, i as u64, 0),
                ..cfg.clone()
            };
            let t_clean = pursuit::denoise_image(set, x, &defender)?.image;
            let clean_ok = model.predict(t_clean.data())? == y;

            let v = if attack.budget == 0.0 {
                vec![0.0; x.data().len()]
            } else {
                let grad_model = match threat {
                    ThreatModel::Black { surrogate } => surrogate,
                    _ => model,
                };
                let attack_point = match threat {
                    ThreatModel::White => {
                        let attacker = DenoiseConfig {
                            mode: per_image_mode(&cfg.mode, i as u64, ATTACKER_SALT),
                            ..cfg.clone()
                        };
                        pursuit::denoise_image(set, x, &attacker)?.image
                    }
                    _ => x.clone(),
                };
                let raw = match attack.kind {
                    AttackKind::Fgsm => fgsm(grad_model, &attack_point, y, attack.budget)?,
                    AttackKind::DeepFool => {
                        deepfool(grad_model, &attack_point, attack.max_iter, attack.overshoot)?
                            .perturbation
                    }
                };
                // The protocol fixes the norm relative to the carrier image.
                let n = l2_norm(&raw);
                let target = attack.budget * x.norm_l2();
                if n == 0.0 {
                    raw
                } else {
                    raw.iter().map(|r| r * target / n).collect()
                }
            };

            let x_adv = apply_perturbation(x, &v)?;
            let nodef_ok = model.predict(x_adv.data())? == y;
            let t_adv = pursuit::denoise_image(set, &x_adv, &defender)?.image;
            let withdef_ok = model.predict(t_adv.data())? == y;
            Ok((clean_ok, nodef_ok, withdef_ok))
        })
        .collect();

    let per_image = per_image?;
    let n = per_image.len() as f64;
    let count = |f: fn(&(bool, bool, bool)) -> bool| {
        per_image.iter().filter(|t| f(t)).count() as f64 / n
    };
    Ok(DefenseEval {
        clean: count(|t| t.0),
        attacked_no_defense: count(|t| t.1),
        attacked_with_defense: count(|t| t.2),
        n_images: per_image.len(),
    })
}

/// Reads a CIFAR-10-format binary file: 3073-byte records of a label byte
/// followed by three 1024-byte channel planes of a 32x32 image.
pub fn read_cifar_batch(bytes: &[u8]) -> Result<(Vec<ImageTensor>, Vec<usize>)> {
    const RECORD: usize = 3073;
    const SIDE: usize = 32;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(D3Error::Format(format!(
            "batch length {} is not a multiple of the {RECORD}-byte record",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for rec in bytes.chunks_exact(RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(D3Error::Format(format!("label byte {label} out of range")));
        }
        let mut data = vec![0.0f64; SIDE * SIDE * 3];
        for ch in 0..3 {
            let plane = &rec[1 + ch * SIDE * SIDE..1 + (ch + 1) * SIDE * SIDE];
            for (pix, &b) in plane.iter().enumerate() {
                data[pix * 3 + ch] = f64::from(b) / 255.0;
            }
        }
        images.push(ImageTensor::new(SIDE, SIDE, 3, data)?);
        labels.push(label);
    }
    Ok((images, labels))
}
