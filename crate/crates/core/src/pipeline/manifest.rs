//! JSON Lines manifests: a header line, then one triplet per line.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::training::TripletSample;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub version: u32,
    pub extractor: String,
    pub n: usize,
    pub seed: u64,
}

/// One record. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageTriplet {
    pub content: String,
    pub style: String,
    pub stylized: String,
    pub caption: String,
    pub cas: f64,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub triplets: Vec<ImageTriplet>,
}

impl DatasetManifest {
    pub fn new(extractor: impl Into<String>, n: usize, seed: u64) -> Self {
        Self {
            header: ManifestHeader {
                version: MANIFEST_VERSION,
                extractor: extractor.into(),
                n,
                seed,
            },
            triplets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Appends a record, rejecting a repeated (content, style) pair.
    pub fn push(&mut self, triplet: ImageTriplet) -> Result<()> {
        if self
            .triplets
            .iter()
            .any(|t| t.content == triplet.content && t.style == triplet.style)
        {
            return Err(Error::invalid(format!(
                "duplicate pair ({}, {})",
                triplet.content, triplet.style
            )));
        }
        self.triplets.push(triplet);
        Ok(())
    }

    /// The JSONL text; equal manifests give equal bytes.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for t in &self.triplets {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(manifest.to_jsonl()?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut manifest: Option<DatasetManifest> = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match manifest.as_mut() {
            None => {
                let h: ManifestHeader = serde_json::from_str(&line).map_err(|e| bad(n, format!("bad header: {e}")))?;
                if h.version != MANIFEST_VERSION {
                    return Err(bad(n, format!("unsupported manifest version {}", h.version)));
                }
                manifest = Some(DatasetManifest {
                    header: h,
                    triplets: Vec::new(),
                });
            }
            Some(m) => {
                let t: ImageTriplet = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
                if !(t.cas.is_finite() && t.cas >= 0.) {
                    return Err(bad(n, format!("cas must be finite and non-negative, got {}", t.cas)));
                }
                m.push(t).map_err(|e| bad(n, e.to_string()))?;
            }
        }
    }
    manifest.ok_or_else(|| bad(0, "missing header line".into()))
}

/// Directory relative paths in a manifest resolve against.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Loads every triplet's images for training.
pub fn load_samples(manifest: &DatasetManifest, root: &Path) -> Result<Vec<TripletSample>> {
    manifest
        .triplets
        .iter()
        .map(|t| {
            Ok(TripletSample {
                content: Image::load(root.join(&t.content))?,
                style: Image::load(root.join(&t.style))?,
                target: Image::load(root.join(&t.stylized))?,
                caption: t.caption.clone(),
            })
        })
        .collect()
}
