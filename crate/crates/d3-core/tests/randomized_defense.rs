//! Reseeding the randomized defense must change what the attacker sees
//! without turning clean accuracy into a lottery: two deployments with
//! different defense seeds produce different transformed images, yet their
//! clean accuracy agrees to within two points.

use d3_core::saliency::GradientMagnitudeSaliency;
use d3_core::synth::{blob_dataset, texture_corpus, BlobTaskSpec};
use d3_core::{
    accuracy, apply_perturbation, fgsm, learn_dictionaries, train_toy, transform_dataset, Arch,
    DenoiseConfig, LabeledDataset, LearnConfig, SelectionMode,
};

#[test]
fn reseeding_changes_the_transform_but_not_clean_accuracy() {
    let base_seed = 4u64;
    let corpus = texture_corpus(80, 48, 48, 1, base_seed ^ 0xd1c7);
    let mut lc = LearnConfig::new(8, 1, 32, 2);
    lc.max_attempts = 400 * lc.eta;
    lc.seed = base_seed;
    let (set, _) = learn_dictionaries(&corpus, &GradientMagnitudeSaliency, &lc).unwrap();

    let data = blob_dataset(&BlobTaskSpec::default(), 250, base_seed).unwrap();
    let n_train = (data.len() as f64 * 0.6).round() as usize;
    let (train, test) = data.split(n_train, base_seed ^ 1).unwrap();

    let defense = |seed: u64| DenoiseConfig {
        mode: SelectionMode::Randomized { subsample_fraction: 0.5, top_k: 2, seed },
        ..DenoiseConfig::for_set(&set)
    };

    // The deployed model is trained behind the randomized transform it will
    // serve with; only the defense seed changes between the two deployments.
    let train_view = transform_dataset(&set, &defense(base_seed), &train).unwrap();
    let (model, _) = train_toy(&train_view, Arch::Mlp { hidden: 64 }, 80, 0.3, base_seed).unwrap();

    // Non-degeneracy, on inputs an attacker would actually submit: the two
    // seeds must not collapse to the same transform.
    let adversarial: Vec<_> = test
        .images
        .iter()
        .zip(&test.labels)
        .take(32)
        .map(|(x, &y)| {
            let v = fgsm(&model, x, y, 0.06).unwrap();
            apply_perturbation(x, &v).unwrap()
        })
        .collect();
    let labels = test.labels[..adversarial.len()].to_vec();
    let adv_data = LabeledDataset::new(adversarial, labels, test.n_classes).unwrap();
    let t_a = transform_dataset(&set, &defense(1000), &adv_data).unwrap();
    let t_b = transform_dataset(&set, &defense(1001), &adv_data).unwrap();
    let any_differ = t_a
        .images
        .iter()
        .zip(&t_b.images)
        .any(|(a, b)| a.data() != b.data());
    assert!(any_differ, "two defense seeds produced byte-identical transforms");

    let clean = |seed: u64| {
        let view = transform_dataset(&set, &defense(seed), &test).unwrap();
        accuracy(&model, &view).unwrap()
    };
    let (acc_a, acc_b) = (clean(1000), clean(1001));
    assert!(acc_a > 0.8, "defended clean accuracy collapsed: {acc_a}");
    assert!(
        (acc_a - acc_b).abs() < 0.02,
        "clean accuracy swings {:.3} between defense seeds ({acc_a:.3} vs {acc_b:.3})",
        (acc_a - acc_b).abs()
    );
}
