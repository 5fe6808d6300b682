//! Triplet dataset construction: generate candidates for every
//! (content, style) pair, keep the one with the lowest content alignment
//! score, and record it in a manifest.

mod adapter;
pub mod manifest;

pub use adapter::{AdapterConfig, AdapterGenerator, AdapterSet};
pub use manifest::{read_manifest, write_manifest, DatasetManifest, ImageTriplet, ManifestHeader};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cas::{cas, CasResult, FeatureExtractor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synthetic::{noise_image, stylize_image, StyleSpec, Texture};

/// Produces candidate stylizations of a content image in a style.
pub trait CandidateGenerator: Send + Sync {
    fn descriptor(&self) -> String;

    fn generate(&self, content: &Image, style: &Image, n: usize, seed: u64) -> Result<Vec<Image>>;
}

/// Checked generation: exactly `n` candidates at content resolution.
pub fn generate_candidates(
    generator: &dyn CandidateGenerator,
    content: &Image,
    style: &Image,
    n: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let out = generator.generate(content, style, n, seed)?;
    if out.len() != n {
        return Err(Error::invalid(format!(
            "generator {} returned {} candidates, expected {n}",
            generator.descriptor(),
            out.len()
        )));
    }
    if let Some(bad) = out.iter().find(|c| c.dims() != content.dims()) {
        return Err(Error::shape(content.dims(), bad.dims()));
    }
    Ok(out)
}

/// Index of the lowest score (first one on ties) and every score.
pub fn select_best(
    extractor: &dyn FeatureExtractor,
    content: &Image,
    candidates: &[Image],
) -> Result<(usize, Vec<CasResult>)> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to select from"));
    }
    let scores = candidates
        .iter()
        .map(|c| cas(extractor, content, c))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.score < scores[best].score {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Guesses a flat two-colour palette: the mean of the darker and of the
/// lighter half of the pixels.
pub fn estimate_palette(style: &Image) -> StyleSpec {
    let mut pixels: Vec<[f32; 3]> = style.data().chunks(3).map(|p| [p[0], p[1], p[2]]).collect();
    pixels.sort_by(|a, b| {
        let la = a[0] + a[1] + a[2];
        let lb = b[0] + b[1] + b[2];
        la.total_cmp(&lb)
    });
    let half = (pixels.len() / 2).max(1);
    let mean = |ps: &[[f32; 3]]| {
        let mut m = [0f32; 3];
        for p in ps {
            for c in 0..3 {
                m[c] += p[c] / ps.len() as f32;
            }
        }
        m
    };
    let dark = mean(&pixels[..half]);
    let light = mean(&pixels[half.min(pixels.len() - 1)..]);
    StyleSpec {
        ink: dark,
        paper: light,
        texture: Texture::Flat,
        period: 2,
        strength: 0.,
    }
}

/// A corruption ladder: candidate `k` blends a clean rendering with seeded
/// noise at level `levels[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGenerator {
    /// Fixed levels, cycled when `n` exceeds their count. When absent,
    /// levels are drawn uniformly from `[0, 1)` per seed.
    pub levels: Option<Vec<f64>>,
    /// Recolour the content with the style palette before corrupting;
    /// otherwise the clean rendering is the content itself.
    pub recolor: bool,
}

impl Default for SyntheticGenerator {
    fn default() -> Self {
        Self {
            levels: None,
            recolor: true,
        }
    }
}

impl SyntheticGenerator {
    pub fn ladder(levels: Vec<f64>) -> Self {
        Self {
            levels: Some(levels),
            recolor: false,
        }
    }

    /// Corruption level of each candidate for a given seed.
    pub fn levels_for(&self, n: usize, seed: u64) -> Vec<f64> {
        match &self.levels {
            Some(l) if !l.is_empty() => (0..n).map(|k| l[k % l.len()]).collect(),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| rng.random::<f64>()).collect()
            }
        }
    }
}

impl CandidateGenerator for SyntheticGenerator {
    fn descriptor(&self) -> String {
        match &self.levels {
            Some(l) => format!("synthetic(levels={l:?},recolor={})", self.recolor),
            None => format!("synthetic(recolor={})", self.recolor),
        }
    }

    fn generate(&self, content: &Image, style: &Image, n: usize, seed: u64) -> Result<Vec<Image>> {
        let clean = if self.recolor {
            stylize_image(content, &estimate_palette(style))
        } else {
            content.clone()
        };
        let levels = self.levels_for(n, seed);
        let (h, w) = content.dims();
        let noise = noise_image(h.max(w), seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(levels
            .iter()
            .map(|&l| {
                let l = l.clamp(0., 1.) as f32;
                Image::from_fn(h, w, |y, x| {
                    let (c, z) = (clean.pixel(y, x), noise.pixel(y, x));
                    [0, 1, 2].map(|i| (1. - l) * c[i] + l * z[i])
                })
            })
            .collect())
    }
}

/// Captions a content image.
pub trait Captioner: Send + Sync {
    fn caption(&self, content: &Image, name: &str) -> String;
}

/// Emits the same prompt for every image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateCaptioner(pub String);

impl Default for TemplateCaptioner {
    fn default() -> Self {
        Self("a [vcp]".into())
    }
}

impl Captioner for TemplateCaptioner {
    fn caption(&self, _: &Image, _: &str) -> String {
        self.0.clone()
    }
}

/// An input image with a stable name (used for output file names).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: Image,
}

impl NamedImage {
    /// Every PNG in `dir`, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<Self>> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
            ));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        paths
            .into_iter()
            .map(|p| {
                Ok(Self {
                    name: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                    image: Image::load(&p)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Candidates per pair.
    pub n: usize,
    pub workers: usize,
    /// `synthetic` or `adapter`.
    pub generator: String,
    /// `pixels` or `conv`.
    pub extractor: String,
    pub caption: String,
    pub adapter: AdapterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n: 4,
            workers: 1,
            generator: "synthetic".into(),
            extractor: "conv".into(),
            caption: TemplateCaptioner::default().0,
            adapter: AdapterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub content: String,
    pub style: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub manifest: DatasetManifest,
    pub skips: Vec<SkipRecord>,
}

/// Seed for one (content, style) pair, independent of scheduling.
pub fn pair_seed(seed: u64, content_index: usize, style_index: usize) -> u64 {
    let mut z = seed
        ^ (content_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (style_index as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct BuildOptions<'a> {
    pub n: usize,
    pub seed: u64,
    pub workers: usize,
    /// Root for images, the manifest, and the skip log.
    pub out_dir: &'a Path,
    pub captioner: &'a dyn Captioner,
}

fn check_unique(names: &[NamedImage], what: &str) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for n in names {
        if !seen.insert(&n.name) {
            return Err(Error::invalid(format!("duplicate {what} name {:?}", n.name)));
        }
    }
    Ok(())
}

/// Runs the whole construction over the content x style product (contents
/// outer, styles inner). Pairs run on `workers` threads; results are merged
/// in pair order, so the manifest does not depend on the worker count.
/// Images are stored 8-bit and scored after quantization, so recorded
/// scores recompute exactly from the files.
pub fn build_dataset(
    contents: &[NamedImage],
    styles: &[NamedImage],
    generator: &dyn CandidateGenerator,
    extractor: &dyn FeatureExtractor,
    options: &BuildOptions<'_>,
) -> Result<BuildOutcome> {
    if contents.is_empty() || styles.is_empty() {
        return Err(Error::invalid("need at least one content and one style image"));
    }
    if options.n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    check_unique(contents, "content")?;
    check_unique(styles, "style")?;
    let out = options.out_dir;
    for sub in ["content", "style", "stylized"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let content_q: Vec<Image> = contents.iter().map(|c| c.image.quantized()).collect();
    for (c, q) in contents.iter().zip(&content_q) {
        q.save(out.join("content").join(format!("{}.png", c.name)))?;
    }
    for s in styles {
        s.image.save(out.join("style").join(format!("{}.png", s.name)))?;
    }

    let pairs: Vec<(usize, usize)> = (0..contents.len())
        .flat_map(|ci| (0..styles.len()).map(move |si| (ci, si)))
        .collect();
    let run_pair = |&(ci, si): &(usize, usize)| -> std::result::Result<ImageTriplet, SkipRecord> {
        let (c, s) = (&contents[ci], &styles[si]);
        let skip = |reason: String| SkipRecord {
            content: c.name.clone(),
            style: s.name.clone(),
            reason,
        };
        let seed = pair_seed(options.seed, ci, si);
        let candidates = generate_candidates(generator, &content_q[ci], &s.image, options.n, seed)
            .map_err(|e| skip(e.to_string()))?;
        let candidates: Vec<Image> = candidates.iter().map(Image::quantized).collect();
        let (best, scores) = select_best(extractor, &content_q[ci], &candidates).map_err(|e| skip(e.to_string()))?;
        let stylized = format!("stylized/{}__{}.png", c.name, s.name);
        candidates[best]
            .save(out.join(&stylized))
            .map_err(|e| skip(e.to_string()))?;
        Ok(ImageTriplet {
            content: format!("content/{}.png", c.name),
            style: format!("style/{}.png", s.name),
            stylized,
            caption: options.captioner.caption(&contents[ci].image, &c.name),
            cas: scores[best].score,
            generator: generator.descriptor(),
        })
    };
    let results: Vec<_> = if options.workers <= 1 {
        pairs.iter().map(run_pair).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| pairs.par_iter().map(run_pair).collect())
    };

    let mut manifest = DatasetManifest::new(extractor.descriptor(), options.n, options.seed);
    let mut skips = Vec::new();
    for r in results {
        match r {
            Ok(t) => manifest.push(t)?,
            Err(s) => {
                log::warn!("skipped ({}, {}): {}", s.content, s.style, s.reason);
                skips.push(s);
            }
        }
    }
    write_manifest(&manifest, out.join("manifest.jsonl"))?;
    let skip_path = out.join("skips.jsonl");
    let mut f = std::fs::File::create(&skip_path).map_err(|e| Error::io(&skip_path, e))?;
    for s in &skips {
        writeln!(f, "{}", serde_json::to_string(s)?).map_err(|e| Error::io(&skip_path, e))?;
    }
    Ok(BuildOutcome { manifest, skips })
}
