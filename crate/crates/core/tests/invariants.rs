use autograd::Tensor;
use condsep::embeddings::{resample_index, resample_to_frames, soft_or, to_prob, EmbeddingKind, LogitsEmbedding};
use condsep::frontend::{analyze, BasisConfig};
use condsep::objectives::{pit_loss, si_sdr};
use condsep::AudioClip;
use proptest::prelude::*;

fn clip(len: usize) -> impl Strategy<Value = AudioClip> {
    prop::collection::vec(-0.5f64..0.5, len).prop_map(|s| AudioClip::new(s, 16000))
}

fn embedding(frames: usize, classes: usize, kind: EmbeddingKind) -> impl Strategy<Value = LogitsEmbedding> {
    prop::collection::vec(-6.0f64..6.0, frames * classes)
        .prop_map(move |d| LogitsEmbedding::new(Tensor::matrix(frames, classes, d), kind))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn soft_or_dominates_every_source(a in embedding(5, 3, EmbeddingKind::Source(0)), b in embedding(5, 3, EmbeddingKind::Source(1))) {
        let or = to_prob(&soft_or(&[a.clone(), b.clone()]).unwrap());
        for src in [&a, &b] {
            let p = to_prob(src);
            prop_assert!(or.values.data().iter().zip(p.values.data()).all(|(o, s)| *o >= *s - 1e-9));
        }
    }

    #[test]
    fn resampling_only_repeats_rows(e in embedding(7, 2, EmbeddingKind::Mixture), w in 1usize..30) {
        let r = resample_to_frames(&e, w).unwrap();
        prop_assert_eq!(r.values.rows(), w);
        let index = resample_index(7, w);
        prop_assert!(index.windows(2).all(|p| p[0] <= p[1]));
        for (row, &src) in index.iter().enumerate() {
            prop_assert_eq!(r.values.row(row), e.values.row(src));
        }
    }

    #[test]
    fn si_sdr_ignores_estimate_scale(r in clip(400), e in clip(400), g in 0.1f64..10.0) {
        let scaled = e.scaled(g);
        let (a, b) = (si_sdr(&r, &e).unwrap(), si_sdr(&r, &scaled).unwrap());
        prop_assert!((a - b).abs() < 1e-6, "{a} {b}");
    }

    #[test]
    fn pit_ignores_estimate_order(r1 in clip(300), r2 in clip(300), e1 in clip(300), e2 in clip(300)) {
        let refs = [r1, r2];
        let (a, pa) = pit_loss(&refs, &[e1.clone(), e2.clone()]).unwrap();
        let (b, pb) = pit_loss(&refs, &[e2, e1]).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert_eq!(pa.is_identity(), !pb.is_identity());
    }

    #[test]
    fn stft_magnitudes_are_homogeneous(x in clip(1200), g in 0.05f64..20.0) {
        let cfg = BasisConfig::stft();
        let base = analyze(&x, &cfg, None).unwrap().values;
        let scaled = analyze(&x.scaled(g), &cfg, None).unwrap().values;
        for (a, b) in base.data().iter().zip(scaled.data()) {
            prop_assert!((g * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
