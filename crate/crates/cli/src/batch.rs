//! Batch commands: label generation, offline input encoding and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use forge_core::input_assembly::assemble;
use forge_core::io::{
    load_image, load_mask, resolve_prompts, save_mask, save_model_input, DatasetManifest,
};
use forge_core::metrics::{aggregate, evaluate_image, write_csv, MetricConfig, MetricReport};
use forge_core::pipeline::{run_image, PipelineConfig};
use forge_core::prompt_encoding::{tei_encode, TeiConfig};
use forge_core::saliency_backend::{Backend, BackendKind};
use forge_core::{ForgeError, Result};

/// Everything that influences generated labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub backend: BackendKind,
    pub pipeline: PipelineConfig,
}

impl GenerateConfig {
    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config is always serializable");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub elapsed_ms: f64,
    pub prompts: usize,
    pub candidates: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub config: GenerateConfig,
    pub images: Vec<ImageRecord>,
    pub succeeded: usize,
    pub failed: usize,
    pub elapsed_ms: f64,
}

pub const SUMMARY_FILE: &str = "summary.json";

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the pipeline over every manifest image in parallel, writing
/// `<out>/<image_id>.png` and `<out>/summary.json`. Per-image failures are
/// logged and recorded, never fatal.
pub fn generate(
    manifest: &DatasetManifest,
    cfg: &GenerateConfig,
    out: &Path,
) -> Result<RunSummary> {
    cfg.pipeline.validate()?;
    let backend = Backend::new(cfg.backend.clone())?;
    fs::create_dir_all(out).map_err(|e| ForgeError::io(out, e))?;
    let start = Instant::now();
    let images: Vec<ImageRecord> = manifest
        .images
        .par_iter()
        .map(|entry| {
            let t = Instant::now();
            let id = &entry.image_id;
            let result = (|| -> Result<(usize, usize, usize)> {
                let image = load_image(manifest.image_path(entry))?;
                let prompts = resolve_prompts(manifest, id)?;
                let res = run_image(&image, &prompts, &backend, &cfg.pipeline)?;
                save_mask(&res.label, out.join(format!("{id}.png")))?;
                Ok((prompts.len(), res.candidates.len(), res.outcome.kept.len()))
            })();
            let elapsed_ms = ms_since(t);
            match result {
                Ok((prompts, candidates, kept)) => {
                    log::info!("{id}: {kept}/{candidates} clusters kept in {elapsed_ms:.1} ms");
                    ImageRecord {
                        image_id: id.clone(),
                        ok: true,
                        error: None,
                        elapsed_ms,
                        prompts,
                        candidates,
                        kept,
                    }
                }
                Err(e) => {
                    log::error!("{id}: {e}");
                    ImageRecord {
                        image_id: id.clone(),
                        ok: false,
                        error: Some(e.to_string()),
                        elapsed_ms,
                        prompts: 0,
                        candidates: 0,
                        kept: 0,
                    }
                }
            }
        })
        .collect();
    let failed = images.iter().filter(|r| !r.ok).count();
    let summary = RunSummary {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        succeeded: images.len() - failed,
        failed,
        images,
        elapsed_ms: ms_since(start),
    };
    let path = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary is serializable");
    fs::write(&path, text).map_err(|e| ForgeError::io(path, e))?;
    Ok(summary)
}

/// Writes `<out>/<image_id>.tnsr` model inputs for offline inference.
/// Returns the ids that failed.
pub fn encode(manifest: &DatasetManifest, tei: &TeiConfig, out: &Path) -> Result<Vec<String>> {
    tei.validate()?;
    fs::create_dir_all(out).map_err(|e| ForgeError::io(out, e))?;
    let failed = manifest
        .images
        .par_iter()
        .filter_map(|entry| {
            let id = &entry.image_id;
            let result = (|| -> Result<()> {
                let image = load_image(manifest.image_path(entry))?;
                let prompts = resolve_prompts(manifest, id)?;
                let (w, h) = image.dims();
                prompts.validate_bounds(w, h)?;
                let energy = tei_encode(&prompts, w, h, tei)?;
                save_model_input(&assemble(&image, &energy)?, out.join(format!("{id}.tnsr")))
            })();
            match result {
                Ok(()) => None,
                Err(e) => {
                    log::error!("{id}: {e}");
                    Some(id.clone())
                }
            }
        })
        .collect();
    Ok(failed)
}

/// PNG files of a directory keyed by file stem.
pub fn list_masks(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| ForgeError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| ForgeError::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Scores every prediction against the ground truth of the same id.
pub fn evaluate(pred: &Path, gt: &Path, cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let preds = list_masks(pred)?;
    let gts = list_masks(gt)?;
    if preds.is_empty() && gts.is_empty() {
        return Err(ForgeError::Domain(format!(
            "no masks in {} or {}",
            pred.display(),
            gt.display()
        )));
    }
    let missing_pred: Vec<&str> = gts
        .keys()
        .filter(|k| !preds.contains_key(*k))
        .map(String::as_str)
        .collect();
    let missing_gt: Vec<&str> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        return Err(ForgeError::Domain(format!(
            "image ids differ; missing predictions: [{}]; missing ground truth: [{}]",
            missing_pred.join(", "),
            missing_gt.join(", ")
        )));
    }
    let per_image = preds
        .par_iter()
        .map(|(id, p)| evaluate_image(id.clone(), &load_mask(p)?, &load_mask(&gts[id])?, cfg))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&per_image, cfg)
}

/// Companion CSV path for a JSON report.
pub fn csv_path(report: &Path) -> PathBuf {
    report.with_extension("csv")
}

/// Writes the JSON report and its CSV companion.
pub fn write_report(report: &MetricReport, path: &Path) -> anyhow::Result<()> {
    let csv = csv_path(path);
    if csv == path {
        bail!("report path {} must not end in .csv", path.display());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    let file = fs::File::create(&csv).with_context(|| format!("writing {}", csv.display()))?;
    write_csv(report, file)?;
    Ok(())
}
