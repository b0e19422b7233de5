//! Artifact directory.
//!
//! Checkpoints carry their seed and config hash inside the model metadata.
//! Every other artifact is either a JSON envelope holding the tag next to
//! the body, or a CSV file with a `<file>.meta.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use umslim::{store as checkpoint, UnifiedToyModel};

/// Provenance stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    #[serde(flatten)]
    tag: Tag,
    body: T,
}

pub struct Store {
    root: PathBuf,
    seed: u64,
    hash: String,
}

impl Store {
    pub fn open(root: &Path, seed: u64, hash: String) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating store {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            seed,
            hash,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    fn tag(&self, kind: &str) -> Tag {
        Tag {
            kind: kind.into(),
            seed: self.seed,
            config_hash: self.hash.clone(),
        }
    }

    fn write_atomic(&self, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(file);
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn put_json<T: Serialize>(&self, file: &str, kind: &str, body: &T) -> Result<PathBuf> {
        let env = Envelope {
            tag: self.tag(kind),
            body,
        };
        self.write_atomic(file, &serde_json::to_vec_pretty(&env)?)
    }

    pub fn get_json<T: DeserializeOwned>(&self, file: &str, kind: &str) -> Result<(Tag, T)> {
        let path = self.path(file);
        let text = fs::read(&path).with_context(|| format!("missing artifact {}", path.display()))?;
        let env: Envelope<T> = serde_json::from_slice(&text).with_context(|| format!("reading {}", path.display()))?;
        if env.tag.kind != kind {
            bail!("{} holds a {} artifact, expected {kind}", path.display(), env.tag.kind);
        }
        self.check(&env.tag, &path);
        Ok((env.tag, env.body))
    }

    /// Writes a CSV produced by `fill` plus its provenance sidecar.
    pub fn put_csv(&self, file: &str, kind: &str, fill: impl FnOnce(&mut Vec<u8>) -> umslim::Result<()>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        let path = self.write_atomic(file, &buf)?;
        self.write_atomic(&format!("{file}.meta.json"), &serde_json::to_vec_pretty(&self.tag(kind))?)?;
        Ok(path)
    }

    pub fn put_text(&self, file: &str, kind: &str, text: &[u8]) -> Result<PathBuf> {
        let path = self.write_atomic(file, text)?;
        self.write_atomic(&format!("{file}.meta.json"), &serde_json::to_vec_pretty(&self.tag(kind))?)?;
        Ok(path)
    }

    pub fn get_text(&self, file: &str) -> Result<(Tag, Vec<u8>)> {
        let path = self.path(file);
        let bytes = fs::read(&path).with_context(|| format!("missing artifact {}", path.display()))?;
        let meta = fs::read(self.path(&format!("{file}.meta.json")))
            .with_context(|| format!("{} has no provenance sidecar", path.display()))?;
        let tag: Tag = serde_json::from_slice(&meta)?;
        self.check(&tag, &path);
        Ok((tag, bytes))
    }

    pub fn put_model(&self, name: &str, model: &mut UnifiedToyModel<f32>) -> Result<PathBuf> {
        model.meta.seed = self.seed;
        model.meta.config_hash = self.hash.clone();
        let path = self.path(&format!("{name}.umc"));
        checkpoint::save(model, &path)?;
        Ok(path)
    }

    pub fn get_model(&self, name: &str) -> Result<UnifiedToyModel<f32>> {
        let path = self.path(&format!("{name}.umc"));
        if !path.exists() {
            bail!("missing checkpoint {}", path.display());
        }
        let model: UnifiedToyModel<f32> = checkpoint::load(&path)?;
        self.check(
            &Tag {
                kind: "checkpoint".into(),
                seed: model.meta.seed,
                config_hash: model.meta.config_hash.clone(),
            },
            &path,
        );
        Ok(model)
    }

    fn check(&self, tag: &Tag, path: &Path) {
        if tag.config_hash != self.hash {
            log::warn!(
                "{} was produced under config {} (current {})",
                path.display(),
                tag.config_hash,
                self.hash
            );
        }
    }
}
