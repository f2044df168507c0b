use condsep::classifier::{classify, Classifier, ClassifierConfig, NUM_GROUPS};
use condsep::embeddings::{assemble, resample_to_frames, AssembleKind, EmbeddingKind};
use condsep::frontend::{analyze, BasisConfig, BasisKind, MelFrontend};
use condsep::objectives::{pit_loss, si_sdr_improvement};
use condsep::separator::{separate, separate_iterative, ModelSpec, SeparationModel, SeparatorConfig, Stage1Conditioning};
use condsep::synthdata::{default_catalog, generate_example, DatasetConfig, Split};
use condsep::AudioClip;

const CLASSES: usize = 4;

fn data_config() -> DatasetConfig {
    DatasetConfig { num_classes: CLASSES, train: 2, validation: 2, test: 2, duration: 0.5, seed: 11, ..Default::default() }
}

fn separator(kind: BasisKind) -> SeparatorConfig {
    SeparatorConfig { num_blocks: 2, bottleneck: 6, hidden: 8, cond_channels: 6, basis: BasisConfig::for_kind(kind), ..Default::default() }
}

#[test]
fn examples_are_deterministic_and_additive() {
    let cfg = data_config();
    let catalog = default_catalog(CLASSES).unwrap();
    let a = generate_example(&cfg, &catalog, Split::Validation, 1).unwrap();
    let b = generate_example(&cfg, &catalog, Split::Validation, 1).unwrap();
    assert_eq!(a, b);
    let other = generate_example(&cfg, &catalog, Split::Validation, 0).unwrap();
    assert_ne!(a.mixture, other.mixture);
    for (t, m) in a.mixture.samples().iter().enumerate() {
        let sum: f64 = a.sources.iter().map(|s| s.samples()[t]).sum();
        assert!((m - sum).abs() < 1e-12);
    }
    assert!(a.labels.iter().all(|l| l.iter().map(|&v| v as usize).sum::<usize>() == 1));
}

#[test]
fn silent_mixture_gives_silent_estimates() {
    for kind in [BasisKind::Stft, BasisKind::Learned] {
        let model = SeparationModel::new(ModelSpec::unconditioned(separator(kind), 16000, true), 2).unwrap();
        let out = separate_iterative(&AudioClip::zeros(4000, 16000), None, &model).unwrap();
        for stage in [&out.stage1, out.stage2.as_ref().unwrap()] {
            assert!(stage.estimates.iter().all(|e| e.samples().iter().all(|&v| v.abs() < 1e-12)), "{kind}");
        }
    }
}

#[test]
fn second_stage_refines_first_stage() {
    let ex = generate_example(&data_config(), &default_catalog(CLASSES).unwrap(), Split::Test, 0).unwrap();
    let model = SeparationModel::new(ModelSpec::unconditioned(separator(BasisKind::Stft), 16000, true), 4).unwrap();
    let out = separate_iterative(&ex.mixture, None, &model).unwrap();
    let stage2 = out.stage2.as_ref().unwrap();
    assert_eq!((out.stage1.stage, stage2.stage), (1, 2));
    assert_ne!(out.stage1.estimates, stage2.estimates);
    assert_eq!(out.final_output(), stage2);
    let (loss, _) = pit_loss(&ex.sources, &stage2.estimates).unwrap();
    assert!(loss.is_finite());
}

#[test]
fn classifier_embeddings_condition_the_separator() {
    let ex = generate_example(&data_config(), &default_catalog(CLASSES).unwrap(), Split::Train, 0).unwrap();
    let classifier = Classifier::new(ClassifierConfig { num_classes: CLASSES, widths: vec![4; NUM_GROUPS] }, "classifier").unwrap();
    let params = classifier.init_params(3);

    let mixture = classify(&ex.mixture, &params).unwrap();
    let frames = MelFrontend::frame_count(ex.mixture.len());
    assert_eq!(mixture.values.shape(), &[frames, CLASSES]);
    let sources: Vec<_> = ex
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut e = classify(s, &params).unwrap();
            e.kind = EmbeddingKind::Source(i);
            e
        })
        .collect();
    let all = assemble(AssembleKind::All, &mixture, &sources).unwrap();
    assert_eq!(all.classes(), CLASSES);
    assert_eq!(all.values.rows(), 3 * frames);

    let coeff_frames = analyze(&ex.mixture, &BasisConfig::stft(), None).unwrap().frames();
    let resampled = resample_to_frames(&all, coeff_frames).unwrap();
    assert_eq!(resampled.values.shape(), &[coeff_frames, 3 * CLASSES]);

    let spec = ModelSpec { stage1: Stage1Conditioning::Given { channels: 3 * CLASSES }, ..ModelSpec::unconditioned(separator(BasisKind::Stft), 16000, false) };
    let model = SeparationModel::new(spec, 5).unwrap();
    let a = separate(&ex.mixture, Some(&all), &model).unwrap();
    let mut shifted = all.clone();
    shifted.values = shifted.values.map(|v| v + 1.0);
    let b = separate(&ex.mixture, Some(&shifted), &model).unwrap();
    assert_ne!(a.masks, b.masks);
    for (e, r) in a.estimates.iter().zip(&ex.sources) {
        assert_eq!(e.len(), ex.mixture.len());
        assert!(si_sdr_improvement(r, e, &ex.mixture).unwrap().is_finite());
    }
}

#[test]
fn silent_source_keeps_embeddings_finite() {
    let classifier = Classifier::new(ClassifierConfig { num_classes: CLASSES, widths: vec![4; NUM_GROUPS] }, "classifier").unwrap();
    let logits = classify(&AudioClip::zeros(8000, 16000), &classifier.init_params(1)).unwrap();
    assert!(logits.values.is_finite());
    assert_eq!(logits.values.shape(), &[MelFrontend::frame_count(8000), CLASSES]);
}
