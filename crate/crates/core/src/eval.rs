//! Test-set evaluation and one-axis ablation sweeps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cas::{cas, style_stat_distance, FeatureExtractor};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inference::{style_transfer, GenerationRequest, InferenceConfig, Mode};
use crate::model::CsgoModel;
use crate::pipeline::DatasetManifest;

/// Anything that renders a content image in a style.
pub trait Stylizer: Sync {
    fn stylize(
        &self,
        content: &Image,
        style: &Image,
        caption: &str,
        config: &InferenceConfig,
        seed: u64,
    ) -> Result<Image>;
}

/// Image-driven transfer with a trained model.
pub struct ModelStylizer<'a> {
    pub model: &'a CsgoModel,
    pub schedule: &'a NoiseSchedule,
}

impl Stylizer for ModelStylizer<'_> {
    fn stylize(
        &self,
        content: &Image,
        style: &Image,
        caption: &str,
        config: &InferenceConfig,
        seed: u64,
    ) -> Result<Image> {
        let request = GenerationRequest {
            mode: Mode::Transfer,
            content: Some(content.clone()),
            style: style.clone(),
            prompt: caption.to_string(),
            config: *config,
            seed,
        };
        style_transfer(self.model, self.schedule, &request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub content: String,
    pub style: String,
    /// Saved output path, relative to the output directory.
    pub output: Option<String>,
    pub cas: Option<f64>,
    pub style_distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub extractor: String,
    pub config: InferenceConfig,
    pub seed: u64,
    pub mean_cas: f64,
    pub mean_style_distance: f64,
    pub failed: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Arithmetic means over successful rows.
    pub fn recompute_means(rows: &[EvalRow]) -> (f64, f64) {
        let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        if ok.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = ok.len() as f64;
        (
            ok.iter().filter_map(|r| r.cas).sum::<f64>() / n,
            ok.iter().filter_map(|r| r.style_distance).sum::<f64>() / n,
        )
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["index", "content", "style", "output", "cas", "style_distance", "error"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.content.clone(),
                r.style.clone(),
                r.output.clone().unwrap_or_default(),
                opt(r.cas),
                opt(r.style_distance),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }
}

pub struct EvalOptions<'a> {
    pub config: InferenceConfig,
    pub seed: u64,
    pub extractor: &'a dyn FeatureExtractor,
    /// Directory the manifest's relative paths resolve against.
    pub root: &'a Path,
    /// Where generated images go (`None` keeps them in memory).
    pub out_dir: Option<&'a Path>,
    /// Prefix for saved output names.
    pub tag: String,
    pub checkpoint: String,
}

/// Generated images in manifest order (`None` for failed rows).
pub type Outputs = Vec<Option<Image>>;

/// Generates every manifest item with item seed `seed + index` and scores
/// it: CAS against the content, style distance against the style. Outputs
/// are scored after 8-bit quantization, so saved files reproduce the rows.
pub fn evaluate_with_outputs(
    stylizer: &dyn Stylizer,
    manifest: &DatasetManifest,
    options: &EvalOptions<'_>,
) -> Result<(EvalReport, Outputs)> {
    if manifest.is_empty() {
        return Err(Error::invalid("evaluation manifest is empty"));
    }
    if let Some(dir) = options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let score = |index: usize| -> Result<(EvalRow, Image)> {
        let t = &manifest.triplets[index];
        let content = Image::load(options.root.join(&t.content))?;
        let style = Image::load(options.root.join(&t.style))?;
        let seed = options.seed.wrapping_add(index as u64);
        let out = stylizer
            .stylize(&content, &style, &t.caption, &options.config, seed)?
            .quantized();
        let output = match options.out_dir {
            Some(dir) => {
                let name = format!("{}{index:04}.png", options.tag);
                out.save(dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        Ok((
            EvalRow {
                index,
                content: t.content.clone(),
                style: t.style.clone(),
                output,
                cas: Some(cas(options.extractor, &content, &out)?.score),
                style_distance: Some(style_stat_distance(options.extractor, &style, &out)?),
                error: None,
            },
            out,
        ))
    };
    let results: Vec<(EvalRow, Option<Image>)> = (0..manifest.len())
        .into_par_iter()
        .map(|i| match score(i) {
            Ok((row, img)) => (row, Some(img)),
            Err(e) => {
                let t = &manifest.triplets[i];
                (
                    EvalRow {
                        index: i,
                        content: t.content.clone(),
                        style: t.style.clone(),
                        output: None,
                        cas: None,
                        style_distance: None,
                        error: Some(e.to_string()),
                    },
                    None,
                )
            }
        })
        .collect();
    let (rows, outputs): (Vec<EvalRow>, Outputs) = results.into_iter().unzip();
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let (mean_cas, mean_style_distance) = EvalReport::recompute_means(&rows);
    Ok((
        EvalReport {
            checkpoint: options.checkpoint.clone(),
            extractor: options.extractor.descriptor(),
            config: options.config,
            seed: options.seed,
            mean_cas,
            mean_style_distance,
            failed,
            rows,
        },
        outputs,
    ))
}

pub fn evaluate(stylizer: &dyn Stylizer, manifest: &DatasetManifest, options: &EvalOptions<'_>) -> Result<EvalReport> {
    Ok(evaluate_with_outputs(stylizer, manifest, options)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    DeltaC,
    LambdaC,
    LambdaS,
    CfgW,
    NStyleTokens,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::DeltaC => "delta_c",
            Axis::LambdaC => "lambda_c",
            Axis::LambdaS => "lambda_s",
            Axis::CfgW => "cfg_w",
            Axis::NStyleTokens => "n_style_tokens",
        }
    }

    /// `config` with this axis set to `value`.
    pub fn apply(self, config: &InferenceConfig, value: f64) -> Result<InferenceConfig> {
        let mut c = *config;
        match self {
            Axis::DeltaC => c.injection.delta_c = value,
            Axis::LambdaC => c.injection.lambda_c = value,
            Axis::LambdaS => c.injection.lambda_s = value,
            Axis::CfgW => c.injection.cfg_w = value,
            Axis::NStyleTokens => {
                if value < 1. || value.fract() != 0. {
                    return Err(Error::invalid(format!(
                        "n_style_tokens must be a positive integer, got {value}"
                    )));
                }
                c.injection.n_style_tokens = value as usize;
            }
        }
        c.injection.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Axis::DeltaC,
            Axis::LambdaC,
            Axis::LambdaS,
            Axis::CfgW,
            Axis::NStyleTokens,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("sweep needs at least one value"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sweep values must be finite"));
        }
        Ok(())
    }
}

/// One stylizer for every value, or (for architecture-changing axes) one
/// per value in order.
pub enum SweepModels<'a> {
    Shared(&'a dyn Stylizer),
    PerValue(Vec<&'a dyn Stylizer>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: Axis,
    pub entries: Vec<SweepEntry>,
}

impl SweepTable {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record([self.axis.name(), "mean_cas", "mean_style_distance", "failed", "error"])?;
        for e in &self.entries {
            let (c, s, f) = match &e.report {
                Some(r) => (
                    r.mean_cas.to_string(),
                    r.mean_style_distance.to_string(),
                    r.failed.to_string(),
                ),
                None => Default::default(),
            };
            w.write_record([e.value.to_string(), c, s, f, e.error.clone().unwrap_or_default()])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }
}

/// Tiles images into a sheet (rows x columns); missing cells are grey.
pub fn contact_sheet(rows: &[Vec<Option<Image>>]) -> Result<Image> {
    let cell = rows
        .iter()
        .flatten()
        .flatten()
        .next()
        .map(Image::dims)
        .ok_or_else(|| Error::invalid("contact sheet has no images"))?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (ch, cw) = cell;
    Ok(Image::from_fn(rows.len() * ch, cols * cw, |y, x| {
        let (r, c) = (y / ch, x / cw);
        match rows[r].get(c).and_then(Option::as_ref) {
            Some(img) if img.dims() == cell => img.pixel(y % ch, x % cw),
            _ => [0.5; 3],
        }
    }))
}

fn value_tag(v: f64) -> String {
    v.to_string().replace('-', "m")
}

/// Evaluates each axis value with every other knob frozen. Failures of a
/// value are recorded and the sweep continues. With `out_dir`, writes
/// `sweep_<axis>.csv`, `report_<axis>_<value>.json`, and `grid_<axis>.png`.
pub fn ablation_sweep(
    models: &SweepModels<'_>,
    spec: &SweepSpec,
    manifest: &DatasetManifest,
    options: &EvalOptions<'_>,
) -> Result<SweepTable> {
    spec.validate()?;
    if let SweepModels::PerValue(m) = models {
        if m.len() != spec.values.len() {
            return Err(Error::shape(spec.values.len(), m.len()));
        }
    } else if spec.axis == Axis::NStyleTokens && spec.values.len() > 1 {
        return Err(Error::invalid("an n_style_tokens sweep needs one checkpoint per value"));
    }
    let axis = spec.axis.name();
    let mut entries = Vec::new();
    let mut grid = Vec::new();
    for (i, &value) in spec.values.iter().enumerate() {
        let stylizer = match models {
            SweepModels::Shared(s) => *s,
            SweepModels::PerValue(m) => m[i],
        };
        let run = || -> Result<(EvalReport, Outputs)> {
            let opts = EvalOptions {
                config: spec.axis.apply(&options.config, value)?,
                seed: options.seed,
                extractor: options.extractor,
                root: options.root,
                out_dir: options.out_dir,
                tag: format!("{}{axis}_{}_", options.tag, value_tag(value)),
                checkpoint: options.checkpoint.clone(),
            };
            evaluate_with_outputs(stylizer, manifest, &opts)
        };
        match run() {
            Ok((report, outputs)) => {
                if let Some(dir) = options.out_dir {
                    report.write_json(dir.join(format!("report_{axis}_{}.json", value_tag(value))))?;
                }
                grid.push(outputs);
                entries.push(SweepEntry {
                    value,
                    report: Some(report),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("sweep {axis}={value} failed: {e}");
                grid.push(vec![None; manifest.len()]);
                entries.push(SweepEntry {
                    value,
                    report: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let table = SweepTable {
        axis: spec.axis,
        entries,
    };
    if let Some(dir) = options.out_dir {
        table.write_csv(dir.join(format!("sweep_{axis}.csv")))?;
        if let Ok(sheet) = contact_sheet(&grid) {
            sheet.save(dir.join(format!("grid_{axis}.png")))?;
        }
    }
    Ok(table)
}
