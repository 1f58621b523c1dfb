//! Conformance checks every loadable adapter must pass.

use std::path::Path;

use clipinv::encoders::synthetic::SyntheticClip;
use clipinv::encoders::{AdapterKind, EncoderRegistry};
use clipinv::{DualEncoder, EmbeddingVector, Error, PixelCanvas};

fn test_image(res: usize, phase: f64) -> PixelCanvas {
    let vals = (0..3 * res * res)
        .map(|i| 0.5 + 0.45 * ((i as f64) * 0.173 + phase).sin())
        .collect();
    PixelCanvas::from_vec(3, res, res, vals).unwrap()
}

fn check_contract(enc: &dyn DualEncoder) {
    let id = enc.encoder_id().to_string();
    let res = enc.native_resolution();
    let images = [test_image(res, 0.0), test_image(res, 1.3)];

    let img = enc.encode_image(&images).unwrap();
    assert_eq!(img.len(), 2, "{id}: one embedding per image");
    let txt = enc.encode_text(&["a dog", "a cat", "a man"]).unwrap();
    assert_eq!(txt.len(), 3, "{id}: one embedding per prompt");
    for e in img.iter().chain(&txt) {
        assert_eq!(e.len(), enc.embedding_dim(), "{id}: dimension");
        assert!(
            (e.norm() - 1.0).abs() < 1e-9,
            "{id}: unit norm, got {}",
            e.norm()
        );
        assert!(e.as_slice().iter().all(|v| v.is_finite()), "{id}: finite");
    }

    assert_eq!(
        img,
        enc.encode_image(&images).unwrap(),
        "{id}: image determinism"
    );
    assert_eq!(
        txt,
        enc.encode_text(&["a dog", "a cat", "a man"]).unwrap(),
        "{id}: text determinism"
    );
    let single = enc.encode_text(&["a cat"]).unwrap();
    assert_eq!(
        single[0], txt[1],
        "{id}: batching does not change embeddings"
    );

    // a non-native input goes through the adapter's own resize
    let other = enc.encode_image(&[test_image(res + 5, 0.4)]).unwrap();
    assert_eq!(other[0].len(), enc.embedding_dim());

    check_pullback(enc, &images[0], &txt[0]);
}

/// Finite differences of `<e(x), t>` at three pixels against the pullback.
fn check_pullback(enc: &dyn DualEncoder, x: &PixelCanvas, t: &EmbeddingVector) {
    let (embs, pullback) = enc
        .encode_image_with_pullback(std::slice::from_ref(x))
        .unwrap();
    assert_eq!(
        embs[0],
        enc.encode_image(std::slice::from_ref(x)).unwrap()[0]
    );
    let grad = pullback(std::slice::from_ref(t)).unwrap().remove(0);
    assert!(grad.same_shape(x));
    let f = |c: &PixelCanvas| enc.encode_image(std::slice::from_ref(c)).unwrap()[0].dot(t);
    let h = 1e-5;
    let n = x.len();
    for &i in &[n / 7, n / 2, n - 3] {
        let mut plus = x.clone();
        plus.values_mut()[i] += h;
        let mut minus = x.clone();
        minus.values_mut()[i] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let an = grad.values()[i];
        let scale = fd.abs().max(an.abs()).max(1e-6);
        assert!(
            (fd - an).abs() / scale < 1e-4,
            "{}: pixel {i}: finite difference {fd} vs pullback {an}",
            enc.encoder_id()
        );
    }
}

#[test]
fn builtin_toy_encoders_conform() {
    let registry = EncoderRegistry::builtin();
    let mut checked = 0;
    for e in registry.entries() {
        if matches!(e.adapter, AdapterKind::Toy { .. }) {
            let enc = registry
                .load(&e.encoder_id, Path::new("/nonexistent"))
                .unwrap();
            assert_eq!(enc.encoder_id(), e.encoder_id);
            assert_eq!(enc.embedding_dim(), e.embedding_dim);
            assert_eq!(enc.native_resolution(), e.native_resolution);
            check_contract(enc.as_ref());
            checked += 1;
        }
    }
    assert!(checked >= 4);
}

#[test]
fn synthetic_patch_transformer_conforms() {
    let cache = tempfile::tempdir().unwrap();
    let synth = SyntheticClip::default();
    let mut registry = EncoderRegistry::builtin();
    registry
        .insert(synth.registry_entry("synthetic-vit"))
        .unwrap();
    synth
        .write(&cache.path().join("synthetic-vit"), 11)
        .unwrap();
    let enc = registry.load("synthetic-vit", cache.path()).unwrap();
    assert_eq!(enc.embedding_dim(), synth.embedding_dim);
    assert_eq!(enc.native_resolution(), synth.patch * synth.grid);
    check_contract(enc.as_ref());
}

#[test]
fn loading_is_idempotent() {
    let cache = tempfile::tempdir().unwrap();
    let synth = SyntheticClip::default();
    let mut registry = EncoderRegistry::builtin();
    registry
        .insert(synth.registry_entry("synthetic-vit"))
        .unwrap();
    synth.write(&cache.path().join("synthetic-vit"), 5).unwrap();
    for id in ["toy-8", "toy-16", "synthetic-vit"] {
        let a = registry.load(id, cache.path()).unwrap();
        let b = registry.load(id, cache.path()).unwrap();
        let res = a.native_resolution();
        let img = [test_image(res, 0.7)];
        assert_eq!(
            a.encode_image(&img).unwrap(),
            b.encode_image(&img).unwrap(),
            "{id}"
        );
        assert_eq!(
            a.encode_text(&["a red car"]).unwrap(),
            b.encode_text(&["a red car"]).unwrap(),
            "{id}"
        );
    }
}

#[test]
fn uncached_weights_are_an_availability_error() {
    let registry = EncoderRegistry::builtin();
    let cache = tempfile::tempdir().unwrap();
    for id in ["vit-b-16-openai", "rn50-openai", "convnext-base-laion400m"] {
        match registry.load(id, cache.path()) {
            Err(Error::Availability(_)) => {}
            Err(e) => panic!("{id}: unexpected error {e}"),
            Ok(_) => panic!("{id}: loaded without weights"),
        }
    }
    assert!(matches!(
        registry.load("no-such-encoder", cache.path()),
        Err(Error::UnknownEncoder { .. })
    ));
}

#[test]
fn aliases_resolve_to_canonical_ids() {
    let registry = EncoderRegistry::builtin();
    assert_eq!(
        registry.get("ViT-B/16").unwrap().encoder_id,
        "vit-b-16-openai"
    );
    assert_eq!(
        registry.get("vit-b-16-laion400b").unwrap().encoder_id,
        "vit-b-16-laion400m"
    );
}
