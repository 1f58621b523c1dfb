//! Property-based invariants across modules.

use proptest::prelude::*;

use clipinv::analysis::{
    classify_embedding, load_lexicon, nearest_words, Lexicon, LexiconFile, LexiconSource,
    GENDER_CLASSES,
};
use clipinv::augmentations::{
    apply_transform, sample_transform, transform_from_seed, AugmentationPolicy,
};
use clipinv::canvas::ResizePlan;
use clipinv::inversion::{InversionConfig, RunManifest, TraceEntry, MANIFEST_SCHEMA_VERSION};
use clipinv::objective::{cosine_similarity, l1_norm, total_variation, LossBreakdown};
use clipinv::{EmbeddingVector, PixelCanvas};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn canvas(c: usize, h: usize, w: usize) -> impl Strategy<Value = PixelCanvas> {
    prop::collection::vec(0.0f64..=1.0, c * h * w)
        .prop_map(move |v| PixelCanvas::from_vec(c, h, w, v).unwrap())
}

fn any_canvas() -> impl Strategy<Value = PixelCanvas> {
    (1usize..=3, 1usize..=9, 1usize..=9).prop_flat_map(|(c, h, w)| canvas(c, h, w))
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, dim)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_identity_holds(sim in -1.0f64..=1.0, tv in 0.0f64..4.0, l1 in 0.0f64..1.0,
                           alpha in 0.0f64..1.0, beta in 0.0f64..1.0) {
        let l = LossBreakdown::assemble(sim, tv, l1, alpha, beta);
        prop_assert!(l.identity_holds(alpha, beta));
        prop_assert!((l.total - (-sim + alpha * tv + beta * l1)).abs() <= 1e-12);
    }

    #[test]
    fn regularizers_are_nonnegative_and_homogeneous(x in any_canvas(), s in 0.0f64..3.0) {
        let tv = total_variation(&x);
        let l1 = l1_norm(&x);
        prop_assert!(tv >= 0.0 && l1 >= 0.0);
        let y = x.scaled(s);
        prop_assert!((total_variation(&y) - s * tv).abs() <= 1e-12 * (1.0 + s * tv));
        prop_assert!((l1_norm(&y) - s * l1).abs() <= 1e-12 * (1.0 + s * l1));
    }

    #[test]
    fn constant_canvas_has_zero_variation(v in 0.0f64..=1.0, h in 1usize..8, w in 1usize..8) {
        let x = PixelCanvas::filled(3, h, w, v);
        prop_assert_eq!(total_variation(&x), 0.0);
        prop_assert!((l1_norm(&x) - v).abs() < 1e-14);
    }

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_invariant(a in nonzero_vec(6), b in nonzero_vec(6), s in 0.01f64..100.0) {
        let ea = EmbeddingVector::new(a).unwrap();
        let eb = EmbeddingVector::new(b).unwrap();
        let c = cosine_similarity(&ea, &eb).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        prop_assert!((c - cosine_similarity(&eb, &ea).unwrap()).abs() < 1e-12);
        prop_assert!((c - cosine_similarity(&ea.scaled(s), &eb).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn sampled_transforms_stay_in_policy(seed in any::<u64>()) {
        let policy = AugmentationPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            prop_assert!(sample_transform(&policy, &mut rng).within(&policy));
        }
        prop_assert_eq!(transform_from_seed(&policy, seed), transform_from_seed(&policy, seed));
    }

    #[test]
    fn augmented_views_keep_shape_and_range(x in canvas(3, 8, 8), seed in any::<u64>()) {
        let t = transform_from_seed(&AugmentationPolicy::default(), seed);
        let y = apply_transform(&x, &t);
        prop_assert!(y.same_shape(&x));
        prop_assert!(y.is_in_unit_range());
        prop_assert_eq!(&y, &apply_transform(&x, &t));
    }

    #[test]
    fn identity_policy_is_identity(x in canvas(3, 6, 6), seed in any::<u64>()) {
        let t = transform_from_seed(&AugmentationPolicy::identity(), seed);
        prop_assert_eq!(apply_transform(&x, &t), x);
    }

    #[test]
    fn resize_adjoint_is_transpose(x in canvas(1, 5, 7), g in canvas(1, 9, 4)) {
        let plan = ResizePlan::new(5, 7, 9, 4);
        let lhs = plan.apply(&x).dot(&g);
        let rhs = x.dot(&plan.adjoint(&g));
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn nearest_words_match_exhaustive_oracle(
        rows in prop::collection::vec(nonzero_vec(4), 2..60),
        q in nonzero_vec(4),
        k_frac in 0.0f64..1.0,
    ) {
        let names: Vec<String> = (0..rows.len()).map(|i| format!("w{i:03}")).collect();
        let lex = Lexicon::from_entries(names.iter().map(|n| (n.as_str(), LexiconSource::CommonEnglish)));
        let embs: Vec<EmbeddingVector> = rows.iter().map(|r| EmbeddingVector::new(r.clone()).unwrap().normalized().unwrap()).collect();
        let q = EmbeddingVector::new(q).unwrap().normalized().unwrap();
        let k = 1 + ((rows.len() - 1) as f64 * k_frac) as usize;
        let got = nearest_words(&q, &embs, &lex, k).unwrap();

        let mut oracle: Vec<(f64, &str)> = embs.iter().zip(&names).map(|(e, n)| (cosine_similarity(&q, e).unwrap(), n.as_str())).collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        prop_assert_eq!(got.len(), k);
        for (i, (n, (s, w))) in got.iter().zip(oracle.iter()).enumerate() {
            prop_assert_eq!(n.rank, i + 1);
            prop_assert_eq!(n.word.as_str(), *w);
            prop_assert!((n.similarity - s).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_shot_argmax_ignores_positive_scaling(img in nonzero_vec(5), a in nonzero_vec(5), b in nonzero_vec(5), s in 0.01f64..50.0) {
        let classes = embed_pair(a, b);
        let e = EmbeddingVector::new(img).unwrap();
        let base = classify_embedding(&e, &classes, &GENDER_CLASSES).unwrap();
        let scaled = classify_embedding(&e.scaled(s), &classes, &GENDER_CLASSES).unwrap();
        prop_assert_eq!(base.index, scaled.index);
        prop_assert_eq!(base.class, scaled.class);
    }

    #[test]
    fn lexicon_ingestion_is_idempotent(words in prop::collection::vec("[A-Za-z]{1,8}( [a-z]{1,5})?", 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.txt");
        let mut text = String::from("\u{feff}");
        for w in &words {
            text.push_str(&format!("  {w}\n"));
        }
        std::fs::write(&raw, text).unwrap();
        let once = load_lexicon(&[LexiconFile::new(&raw, LexiconSource::BodyParts)]).unwrap();
        let tsv = dir.path().join("lexicon.tsv");
        std::fs::write(&tsv, once.to_tsv()).unwrap();
        let twice = load_lexicon(&[LexiconFile::new(&tsv, LexiconSource::CommonEnglish)]).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.words().iter().all(|w| w == &w.trim().to_lowercase()));
    }

    #[test]
    fn manifest_json_round_trips(
        prompt in "[ -~]{0,40}",
        seed in any::<u64>(),
        lr in 0.0f64..1.0,
        losses in prop::collection::vec((-1.0f64..1.0, 0.0f64..2.0, 0.0f64..1.0, any::<u64>()), 0..12),
        sim in -1.0f64..1.0,
    ) {
        let config = InversionConfig { seed, learning_rate: lr, ..InversionConfig::default() };
        let loss_trace = losses
            .iter()
            .enumerate()
            .map(|(i, &(s, tv, l1, vs))| TraceEntry {
                iteration: i,
                resolution: 64,
                loss: LossBreakdown::assemble(s, tv, l1, config.alpha, config.beta),
                view_seeds: vec![vs, vs.rotate_left(7)],
            })
            .collect();
        let m = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            prompt,
            encoder_id: "toy-8".into(),
            config,
            loss_trace,
            snapshot_paths: vec!["snapshots/0000.png".into()],
            final_similarity: sim,
            wall_time: 0.0,
        };
        let text = m.to_json().unwrap();
        let back = RunManifest::from_json(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}

fn embed_pair(a: Vec<f64>, b: Vec<f64>) -> Vec<EmbeddingVector> {
    vec![
        EmbeddingVector::new(a).unwrap(),
        EmbeddingVector::new(b).unwrap(),
    ]
}
