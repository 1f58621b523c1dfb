//! Encoder registry: maps ids to architectures, corpora and checkpoint
//! locations, and resolves ids to ready adapters.
//!
//! Checkpoints are never vendored. Real adapters read weights from the cache
//! directory (`$CLIPINV_CACHE_DIR`, default `~/.cache/clipinv`), one
//! subdirectory per encoder id. A registry file named by `$CLIPINV_REGISTRY`
//! may add entries or pin checksums.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::clip::ClipVitEncoder;
use super::toy::{ToyEncoder, ToyTextMode, TOY_NATIVE_RESOLUTION};
use super::DualEncoder;
use crate::error::{Error, Result};

pub const CACHE_DIR_ENV: &str = "CLIPINV_CACHE_DIR";
pub const REGISTRY_FILE_ENV: &str = "CLIPINV_REGISTRY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AdapterKind {
    Toy {
        seed: u64,
        dim: usize,
        bag_of_words: bool,
    },
    /// Patch-transformer CLIP checkpoint in the Hugging Face layout.
    ClipVit,
    /// Architecture without an in-process adapter (residual-conv, ConvNeXt).
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderRegistryEntry {
    pub encoder_id: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub architecture: String,
    pub corpus: String,
    /// Where the weights come from, e.g. a Hugging Face repo id.
    pub locator: String,
    /// SHA-256 of the weights file, hex. Unpinned when absent.
    #[serde(default)]
    pub checksum: Option<String>,
    pub license: String,
    pub embedding_dim: usize,
    pub native_resolution: usize,
    pub adapter: AdapterKind,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderRegistry {
    entries: BTreeMap<String, EncoderRegistryEntry>,
}

#[allow(clippy::too_many_arguments)]
fn entry(
    id: &str,
    aliases: &[&str],
    architecture: &str,
    corpus: &str,
    locator: &str,
    license: &str,
    dim: usize,
    native: usize,
    adapter: AdapterKind,
    provenance: &str,
) -> EncoderRegistryEntry {
    EncoderRegistryEntry {
        encoder_id: id.into(),
        aliases: aliases.iter().map(|s| s.to_string()).collect(),
        architecture: architecture.into(),
        corpus: corpus.into(),
        locator: locator.into(),
        checksum: None,
        license: license.into(),
        embedding_dim: dim,
        native_resolution: native,
        adapter,
        provenance: provenance.into(),
    }
}

fn toy(id: &str, seed: u64, dim: usize, bag_of_words: bool) -> EncoderRegistryEntry {
    entry(
        id,
        &[],
        "toy-linear",
        "none",
        "builtin",
        "Apache-2.0",
        dim,
        TOY_NATIVE_RESOLUTION,
        AdapterKind::Toy {
            seed,
            dim,
            bag_of_words,
        },
        "seeded random linear map; test oracle",
    )
}

impl EncoderRegistry {
    pub fn builtin() -> Self {
        use AdapterKind::{ClipVit, External};
        let mit = "MIT";
        let openclip = "MIT (OpenCLIP weights)";
        let list = vec![
            toy("toy-8", 0, 8, false),
            toy("toy-8-alt", 1, 8, false),
            toy("toy-8-bow", 0, 8, true),
            toy("toy-16", 0, 16, false),
            entry(
                "vit-b-16-openai",
                &["ViT-B-16", "ViT-B/16"],
                "patch-transformer",
                "openai-wit-400m",
                "openai/clip-vit-base-patch16",
                mit,
                512,
                224,
                ClipVit,
                "inversion target of the NSFW and bias audits",
            ),
            entry(
                "vit-b-32-openai",
                &["ViT-B-32", "ViT-B/32"],
                "patch-transformer",
                "openai-wit-400m",
                "openai/clip-vit-base-patch32",
                mit,
                512,
                224,
                ClipVit,
                "independent zero-shot gender classifier",
            ),
            entry(
                "vit-l-14-openai",
                &["ViT-L-14"],
                "patch-transformer",
                "openai-wit-400m",
                "openai/clip-vit-large-patch14",
                mit,
                768,
                224,
                ClipVit,
                "model-variant grid",
            ),
            entry(
                "vit-b-16-laion2b",
                &[],
                "patch-transformer",
                "laion-2b",
                "laion/CLIP-ViT-B-16-laion2B-s34B-b88K",
                openclip,
                512,
                224,
                ClipVit,
                "OpenCLIP laion2b_s34b_b88k; NSFW audit comparison",
            ),
            entry(
                "vit-b-16-laion400m",
                &["vit-b-16-laion400b"],
                "patch-transformer",
                "laion-400m",
                "open_clip:ViT-B-16/laion400m_e32",
                openclip,
                512,
                224,
                ClipVit,
                "OpenCLIP laion400m_e32; also known as 'Laion400B'",
            ),
            entry(
                "vit-h-14-laion2b",
                &["ViT-H-14"],
                "patch-transformer",
                "laion-2b",
                "laion/CLIP-ViT-H-14-laion2B-s32B-b79K",
                openclip,
                1024,
                224,
                ClipVit,
                "model-variant grid, best-effort match",
            ),
            entry(
                "vit-g-14-laion2b",
                &["ViT-g-14"],
                "patch-transformer",
                "laion-2b",
                "laion/CLIP-ViT-g-14-laion2B-s12B-b42K",
                openclip,
                1024,
                224,
                ClipVit,
                "model-variant grid, best-effort match",
            ),
            entry(
                "rn50-openai",
                &["RN50"],
                "residual-conv",
                "openai-wit-400m",
                "open_clip:RN50/openai",
                mit,
                1024,
                224,
                External,
                "model-variant grid; data-scale study",
            ),
            entry(
                "rn50x4-openai",
                &["RN50x4"],
                "residual-conv",
                "openai-wit-400m",
                "open_clip:RN50x4/openai",
                mit,
                640,
                288,
                External,
                "model-variant grid",
            ),
            entry(
                "rn50x16-openai",
                &["RN50x16"],
                "residual-conv",
                "openai-wit-400m",
                "open_clip:RN50x16/openai",
                mit,
                768,
                384,
                External,
                "model-variant grid",
            ),
            entry(
                "rn50-cc12m",
                &[],
                "residual-conv",
                "cc12m",
                "open_clip:RN50/cc12m",
                openclip,
                1024,
                224,
                External,
                "data-scale study",
            ),
            entry(
                "rn50-yfcc15m",
                &[],
                "residual-conv",
                "yfcc15m",
                "open_clip:RN50/yfcc15m",
                openclip,
                1024,
                224,
                External,
                "data-scale study",
            ),
            entry(
                "convnext-base-laion400m",
                &["convnext-base"],
                "convnext",
                "laion-400m",
                "open_clip:convnext_base/laion400m_s13b_b51k",
                openclip,
                512,
                224,
                External,
                "model-variant grid, best-effort match",
            ),
            entry(
                "convnext-large-laion2b",
                &["convnext-large"],
                "convnext",
                "laion-2b",
                "open_clip:convnext_large_d/laion2b_s26b_b102k_augreg",
                openclip,
                768,
                256,
                External,
                "model-variant grid, best-effort match",
            ),
            entry(
                "convnext-xxlarge-laion2b",
                &["convnext-xxlarge"],
                "convnext",
                "laion-2b",
                "open_clip:convnext_xxlarge/laion2b_s34b_b82k_augreg",
                openclip,
                1024,
                256,
                External,
                "model-variant grid, best-effort match",
            ),
        ];
        Self {
            entries: list
                .into_iter()
                .map(|e| (e.encoder_id.clone(), e))
                .collect(),
        }
    }

    /// Built-in entries, extended or overridden by `$CLIPINV_REGISTRY` if set.
    pub fn from_env() -> Result<Self> {
        let mut reg = Self::builtin();
        if let Some(path) = std::env::var_os(REGISTRY_FILE_ENV) {
            reg.merge_file(Path::new(&path))?;
        }
        Ok(reg)
    }

    /// Reads a JSON array of entries and inserts them, replacing same-id entries.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let extra: Vec<EncoderRegistryEntry> = serde_json::from_str(&text)?;
        for e in extra {
            self.insert(e)?;
        }
        Ok(())
    }

    pub fn insert(&mut self, e: EncoderRegistryEntry) -> Result<()> {
        for alias in &e.aliases {
            if let Some(owner) = self.resolve_id(alias) {
                if owner != e.encoder_id {
                    return Err(Error::Config(format!(
                        "alias `{alias}` already names `{owner}`"
                    )));
                }
            }
        }
        self.entries.insert(e.encoder_id.clone(), e);
        Ok(())
    }

    fn resolve_id(&self, id: &str) -> Option<String> {
        if self.entries.contains_key(id) {
            return Some(id.to_string());
        }
        self.entries
            .values()
            .find(|e| e.aliases.iter().any(|a| a == id))
            .map(|e| e.encoder_id.clone())
    }

    pub fn get(&self, id: &str) -> Result<&EncoderRegistryEntry> {
        self.resolve_id(id)
            .and_then(|k| self.entries.get(&k))
            .ok_or_else(|| Error::UnknownEncoder {
                id: id.to_string(),
                known: self.ids(),
            })
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &EncoderRegistryEntry> {
        self.entries.values()
    }

    pub fn load(&self, id: &str, cache: &Path) -> Result<Box<dyn DualEncoder>> {
        let entry = self.get(id)?;
        match &entry.adapter {
            AdapterKind::Toy {
                seed,
                dim,
                bag_of_words,
            } => {
                let mode = if *bag_of_words {
                    ToyTextMode::BagOfWords
                } else {
                    ToyTextMode::Ordered
                };
                let enc = ToyEncoder::new(*seed, *dim, entry.native_resolution, mode)?
                    .with_id(&entry.encoder_id);
                Ok(Box::new(enc))
            }
            AdapterKind::ClipVit => {
                let dir = cache.join(&entry.encoder_id);
                let weights = dir.join(ClipVitEncoder::WEIGHTS_FILE);
                if !weights.is_file() {
                    return Err(Error::Availability(format!(
                        "weights for `{}` not cached at {}; fetch `{}` into that directory (model.safetensors, vocab.json, merges.txt)",
                        entry.encoder_id,
                        dir.display(),
                        entry.locator
                    )));
                }
                if let Some(expected) = &entry.checksum {
                    verify_checksum(&weights, expected)?;
                }
                Ok(Box::new(ClipVitEncoder::load(&dir, entry)?))
            }
            AdapterKind::External => Err(Error::Availability(format!(
                "`{}` is a {} checkpoint; no in-process adapter exists for that architecture",
                entry.encoder_id, entry.architecture
            ))),
        }
    }
}

pub fn cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("clipinv")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn verify_checksum(path: &Path, expected: &str) -> Result<()> {
    let got = sha256_file(path)?;
    if !got.eq_ignore_ascii_case(expected) {
        return Err(Error::Integrity(format!(
            "{} has sha256 {got}, registry pins {expected}",
            path.display()
        )));
    }
    Ok(())
}

/// Resolves `encoder_id` against the environment's registry and cache.
pub fn load_encoder(encoder_id: &str) -> Result<Box<dyn DualEncoder>> {
    load_encoder_from(&EncoderRegistry::from_env()?, encoder_id, &cache_dir())
}

pub fn load_encoder_from(
    registry: &EncoderRegistry,
    encoder_id: &str,
    cache: &Path,
) -> Result<Box<dyn DualEncoder>> {
    registry.load(encoder_id, cache)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_entry_loads_offline() {
        let reg = EncoderRegistry::builtin();
        let enc = reg.load("toy-8", Path::new("/nonexistent")).unwrap();
        assert_eq!(enc.embedding_dim(), 8);
        assert_eq!(enc.encoder_id(), "toy-8");
    }

    #[test]
    fn unknown_id_lists_known() {
        let reg = EncoderRegistry::builtin();
        match reg.load("nope", Path::new("/nonexistent")) {
            Err(Error::UnknownEncoder { known, .. }) => {
                assert!(known.contains(&"toy-8".to_string()));
                assert!(known.contains(&"vit-b-16-openai".to_string()));
            }
            Err(other) => panic!("expected registry error, got {other:?}"),
            Ok(_) => panic!("expected registry error"),
        }
    }

    #[test]
    fn metadata_of_target_model() {
        let reg = EncoderRegistry::builtin();
        let e = reg.get("vit-b-16-openai").unwrap();
        assert_eq!((e.embedding_dim, e.native_resolution), (512, 224));
        assert_eq!(
            reg.get("vit-b-16-laion400b").unwrap().encoder_id,
            "vit-b-16-laion400m"
        );
    }

    #[test]
    fn missing_cache_is_availability_error() {
        let dir = tempfile::tempdir().unwrap();
        let reg = EncoderRegistry::builtin();
        assert!(matches!(
            reg.load("vit-b-16-openai", dir.path()),
            Err(Error::Availability(_))
        ));
        assert!(matches!(
            reg.load("rn50-openai", dir.path()),
            Err(Error::Availability(_))
        ));
    }

    #[test]
    fn checksum_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let model_dir = dir.path().join("vit-b-16-openai");
        std::fs::create_dir_all(&model_dir).unwrap();
        std::fs::write(
            model_dir.join(ClipVitEncoder::WEIGHTS_FILE),
            b"not really weights",
        )
        .unwrap();
        let mut reg = EncoderRegistry::builtin();
        let mut e = reg.get("vit-b-16-openai").unwrap().clone();
        e.checksum = Some("00".repeat(32));
        reg.insert(e).unwrap();
        assert!(matches!(
            reg.load("vit-b-16-openai", dir.path()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn registry_file_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.json");
        let mut e = EncoderRegistry::builtin().get("toy-8").unwrap().clone();
        e.encoder_id = "toy-8-custom".into();
        e.adapter = AdapterKind::Toy {
            seed: 42,
            dim: 8,
            bag_of_words: false,
        };
        std::fs::write(&path, serde_json::to_string(&vec![e]).unwrap()).unwrap();
        let mut reg = EncoderRegistry::builtin();
        reg.merge_file(&path).unwrap();
        assert!(reg.load("toy-8-custom", dir.path()).is_ok());
    }

    #[test]
    fn ids_are_unique_including_aliases() {
        let reg = EncoderRegistry::builtin();
        let mut names: Vec<&str> = reg.entries().map(|e| e.encoder_id.as_str()).collect();
        names.extend(
            reg.entries()
                .flat_map(|e| e.aliases.iter().map(String::as_str)),
        );
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(n, names.len());
    }
}
