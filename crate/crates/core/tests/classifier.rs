use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speech_refine::audio::DspConfig;
use speech_refine::fixtures::{constant_level_dataset, synthetic_dataset};
use speech_refine::sir::{
    evaluate, metrics_from_posteriors, train, ClassPosterior, ImpairmentClass, LabeledDataset, PoolMode, SirError,
    SirModel, TrainHyper,
};

#[test]
fn constant_levels_are_learned_within_50_epochs() {
    let cfg = DspConfig { n_mels: 16, ..DspConfig::default() };
    let data = constant_level_dataset(20, 8, &cfg, 3);
    let (tr, te) = data.stratified_split(0.1);
    let hyper = TrainHyper { d: 16, epochs: 50, seed: 1, ..TrainHyper::default() };
    let out = train(&tr, &hyper, &cfg.fingerprint()).unwrap();
    assert!((out.initial_loss - 4f64.ln()).abs() < 0.1, "initial loss {}", out.initial_loss);
    let report = evaluate(&out.model, &te).unwrap();
    assert_eq!(report.overall.micro_accuracy, 1.0, "{report:?}");
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = DspConfig { n_mels: 12, ..DspConfig::default() };
    let data = constant_level_dataset(6, 5, &cfg, 8);
    for pool_mode in [PoolMode::Mean, PoolMode::Attention] {
        let hyper = TrainHyper { d: 8, epochs: 15, batch: 4, seed: 42, pool_mode, ..TrainHyper::default() };
        let a = train(&data, &hyper, "fp").unwrap();
        let b = train(&data, &hyper, "fp").unwrap();
        let bits = |m: &SirModel| m.param_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.model), bits(&b.model));
        assert_eq!(a.epoch_losses, b.epoch_losses);
        let c = train(&data, &TrainHyper { seed: 43, ..hyper }, "fp").unwrap();
        assert_ne!(bits(&a.model), bits(&c.model));
    }
}

#[test]
fn synthetic_audio_fixture_separates() {
    let cfg = DspConfig::default();
    let data = synthetic_dataset(20, 5, &cfg).unwrap();
    let (tr, te) = data.stratified_split(0.2);
    let hyper = TrainHyper { d: 16, epochs: 60, seed: 5, ..TrainHyper::default() };
    let out = train(&tr, &hyper, &cfg.fingerprint()).unwrap();
    let report = evaluate(&out.model, &te).unwrap();
    assert!(report.overall.accuracy >= 0.95, "{report:?}");
}

#[test]
fn model_file_round_trip_and_fingerprint_guard() {
    let cfg = DspConfig { n_mels: 10, ..DspConfig::default() };
    let data = constant_level_dataset(3, 4, &cfg, 1);
    let out = train(&data, &TrainHyper { d: 4, epochs: 3, ..TrainHyper::default() }, &cfg.fingerprint()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sir.json");
    out.model.save(&path).unwrap();
    let back = SirModel::load(&path, &cfg).unwrap();
    assert_eq!(back.param_vector(), out.model.param_vector());

    let other = DspConfig { hop_size: 128, ..cfg };
    assert!(matches!(SirModel::load(&path, &other), Err(SirError::FingerprintMismatch { .. })));
}

fn one_hot(label: ImpairmentClass) -> ClassPosterior {
    let mut logits = [0.0; 4];
    logits[label.index()] = 10.0;
    ClassPosterior::from_logits(logits)
}

#[test]
fn perfect_predictions_score_one_everywhere() {
    let labels: Vec<_> = ImpairmentClass::ALL.iter().cycle().take(12).copied().collect();
    let posts: Vec<_> = labels.iter().map(|&l| one_hot(l)).collect();
    let r = metrics_from_posteriors(&labels, &posts).unwrap();
    for c in &r.per_class {
        assert_eq!((c.accuracy, c.f1, c.auc), (1.0, 1.0, Some(1.0)));
    }
    assert_eq!((r.overall.accuracy, r.overall.f1, r.overall.auc), (1.0, 1.0, Some(1.0)));
}

#[test]
fn label_independent_posteriors_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels: Vec<_> = (0..2000).map(|i| ImpairmentClass::ALL[i % 4]).collect();
    let posts: Vec<_> = labels
        .iter()
        .map(|_| ClassPosterior::from_logits(std::array::from_fn(|_| rng.random_range(-2.0..2.0))))
        .collect();
    let r = metrics_from_posteriors(&labels, &posts).unwrap();
    assert!((r.overall.auc.unwrap() - 0.5).abs() < 0.05, "{:?}", r.overall);
}

#[test]
fn shuffled_training_labels_give_chance_auc() {
    let cfg = DspConfig { n_mels: 8, ..DspConfig::default() };
    let data = constant_level_dataset(100, 4, &cfg, 2);
    let mut labels: Vec<_> = data.items.iter().map(|i| i.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let items = data.items.iter().zip(labels).map(|(it, label)| speech_refine::sir::LabeledItem { mel: it.mel.clone(), label }).collect();
    let (tr, te) = LabeledDataset::new(items, 4).stratified_split(0.5);
    let out = train(&tr, &TrainHyper { d: 8, epochs: 30, seed: 3, ..TrainHyper::default() }, "fp").unwrap();
    let auc = evaluate(&out.model, &te).unwrap().overall.auc.unwrap();
    assert!((auc - 0.5).abs() <= 0.07, "auc {auc}");
}

#[test]
fn missing_class_omits_its_auc() {
    let labels = [ImpairmentClass::Stutter, ImpairmentClass::Healthy, ImpairmentClass::Stutter];
    let posts: Vec<_> = labels.iter().map(|&l| one_hot(l)).collect();
    let r = metrics_from_posteriors(&labels, &posts).unwrap();
    let aphasia = r.per_class.iter().find(|c| c.class == ImpairmentClass::Aphasia);
    assert!(aphasia.is_none_or(|c| c.auc.is_none()));
    assert_eq!(r.overall.auc, Some(1.0));
}
