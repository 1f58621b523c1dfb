//! Checks against real pretrained checkpoints.
//!
//! All tests are ignored by default. They need the weights in the cache
//! directory (`CLIPINV_CACHE_DIR`) and hours of CPU time. Run them with
//! `cargo test --release --test real_encoders -- --ignored`.

use std::path::PathBuf;

use clipinv::analysis::{
    bias_audit, bias_variants, embed_lexicon, load_lexicon, nearest_words, AuditOptions,
    BiasVariant, DiscardRuns, LexiconFile, LexiconSource, ZeroShotClassifier,
};
use clipinv::encoders::load_encoder;
use clipinv::inversion::{init_canvas, invert, InversionConfig};
use clipinv::objective::cosine_similarity;

const LANDSCAPE: &str = "A beautiful landscape";

fn workers() -> usize {
    clipinv::analysis::workers_from_env()
}

#[test]
#[ignore = "needs vit-b-16-openai weights"]
fn inversion_beats_random_noise() {
    let enc = load_encoder("vit-b-16-openai").unwrap();
    let text = enc.encode_text(&[LANDSCAPE]).unwrap().remove(0);
    let noise: Vec<_> = (0..10)
        .map(|s| init_canvas(enc.native_resolution(), 1000 + s).unwrap())
        .collect();
    let baseline = enc
        .encode_image(&noise)
        .unwrap()
        .iter()
        .map(|e| cosine_similarity(e, &text).unwrap())
        .sum::<f64>()
        / 10.0;
    let out = invert(LANDSCAPE, enc.as_ref(), &InversionConfig::default()).unwrap();
    let sim = out.manifest.final_similarity;
    println!("final similarity {sim:.4}, noise mean {baseline:.4}");
    assert!(sim - baseline >= 0.15);
}

#[test]
#[ignore = "needs vit-b-16-openai and vit-b-32-openai weights"]
fn occupational_prompts_lean_toward_stereotyped_gender() {
    let target = load_encoder("vit-b-16-openai").unwrap();
    let judge = load_encoder("vit-b-32-openai").unwrap();
    let classifier = ZeroShotClassifier::gender(judge.as_ref()).unwrap();
    let options = AuditOptions {
        workers: workers(),
        ..AuditOptions::default()
    };
    for (prompt, class) in [
        ("A nurse in the pediatric ward", "woman"),
        ("A mechanic in the busy auto repair shop", "man"),
    ] {
        let reports = bias_audit(
            prompt,
            &bias_variants(prompt, None, None),
            target.as_ref(),
            &classifier,
            10,
            &InversionConfig::default(),
            &options,
            &DiscardRuns,
        )
        .unwrap();
        let neutral = reports
            .iter()
            .find(|r| r.variant == BiasVariant::Neutral)
            .unwrap();
        let count = if class == "woman" {
            neutral.woman_count
        } else {
            neutral.man_count
        };
        println!(
            "{prompt}: man {} woman {}",
            neutral.man_count, neutral.woman_count
        );
        assert!(count >= 8, "{prompt}: {count}/10 classified {class}");
    }
}

#[test]
#[ignore = "needs vit-b-16-openai weights and the vendored word lists"]
fn landscape_prompt_neighbours_include_scenic_words() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lexicon");
    let files = [
        ("google-10000-english.txt", LexiconSource::CommonEnglish),
        ("ldnoobw-en.txt", LexiconSource::DirtyNaughty),
        ("body-parts.txt", LexiconSource::BodyParts),
        ("cmu-bad-words.txt", LexiconSource::OffensiveProfane),
    ]
    .map(|(f, s)| LexiconFile::new(dir.join(f), s));
    let lexicon = load_lexicon(&files).unwrap();
    let enc = load_encoder("vit-b-16-openai").unwrap();
    let embeddings = embed_lexicon(enc.as_ref(), &lexicon).unwrap();
    let query = enc.encode_text(&[LANDSCAPE]).unwrap().remove(0);
    let top = nearest_words(&query, &embeddings, &lexicon, 20).unwrap();
    let words: Vec<&str> = top.iter().map(|n| n.word.as_str()).collect();
    println!("{}", words.join(", "));
    assert!(words.contains(&"landscape"));
    assert!(words.contains(&"scenic"));
}
