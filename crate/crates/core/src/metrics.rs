//! Pixel-level IoU and target-level Pd, Fa and Fat.
//!
//! Targets are eight-connected components. A predicted and a ground-truth
//! target match when their centroids are within `deviation_px` of each other;
//! matching is one-to-one, greedy by ascending distance. Dataset figures are
//! micro-averages over summed counts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::postprocess::cluster8;
use crate::types::{BinaryMask, ClusterSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Centroid match threshold in pixels.
    pub deviation_px: f64,
    /// Multiplier applied to Fa for reporting.
    pub fa_scale: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            deviation_px: 3.0,
            fa_scale: 1e6,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deviation_px.is_nan() || self.deviation_px <= 0.0 {
            return Err(ForgeError::Config(format!(
                "deviation threshold must be positive, got {}",
                self.deviation_px
            )));
        }
        Ok(())
    }
}

/// Raw counts behind every ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub intersection: u64,
    pub union: u64,
    /// Ground-truth targets.
    pub n_all: u64,
    /// Ground-truth targets with a matched prediction.
    pub detected: u64,
    /// Predicted targets without a ground-truth match.
    pub t_false: u64,
    /// Pixels predicted as target where the ground truth is background.
    pub false_px: u64,
    pub total_px: u64,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            intersection: self.intersection + o.intersection,
            union: self.union + o.union,
            n_all: self.n_all + o.n_all,
            detected: self.detected + o.detected,
            t_false: self.t_false + o.t_false,
            false_px: self.false_px + o.false_px,
            total_px: self.total_px + o.total_px,
        }
    }
}

/// Ratios derived from [`Counts`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub iou: f64,
    pub pd: f64,
    pub fa: f64,
    pub fat: f64,
    /// False when there are no ground-truth targets and `fat` is reported as 0.
    pub fat_defined: bool,
}

impl Counts {
    pub fn ratios(&self) -> Ratios {
        let iou = if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        };
        let pd = if self.n_all == 0 {
            1.0
        } else {
            self.detected as f64 / self.n_all as f64
        };
        let fa = if self.total_px == 0 {
            0.0
        } else {
            self.false_px as f64 / self.total_px as f64
        };
        let (fat, fat_defined) = if self.n_all == 0 {
            (0.0, false)
        } else {
            (self.t_false as f64 / self.n_all as f64, true)
        };
        Ratios {
            iou,
            pd,
            fa,
            fat,
            fat_defined,
        }
    }
}

/// Per-image scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub iou: f64,
    pub pd: f64,
    pub fa: f64,
    pub fat: f64,
    pub fat_defined: bool,
    pub counts: Counts,
}

impl ImageMetrics {
    pub fn from_counts(image_id: impl Into<String>, counts: Counts) -> Self {
        let r = counts.ratios();
        Self {
            image_id: image_id.into(),
            iou: r.iou,
            pd: r.pd,
            fa: r.fa,
            fat: r.fat,
            fat_defined: r.fat_defined,
            counts,
        }
    }
}

/// Dataset-level scores plus the per-image breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub pd: f64,
    /// Fa as a plain pixel ratio.
    pub fa: f64,
    /// Fa multiplied by `fa_scale`.
    pub fa_scaled: f64,
    pub fa_scale: f64,
    pub fat: f64,
    pub fat_defined: bool,
    pub deviation_px: f64,
    pub counts: Counts,
    pub per_image: Vec<ImageMetrics>,
}

/// A one-to-one centroid pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetMatch {
    pub pred_label: u32,
    pub gt_label: u32,
    pub distance: f64,
}

/// Target-level fragment returned by [`pd_fa_fat`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetMetrics {
    pub pd: f64,
    pub fa: f64,
    pub fat: f64,
    pub fat_defined: bool,
    pub n_all: u64,
    pub detected: u64,
    pub t_false: u64,
    pub false_px: u64,
    pub total_px: u64,
}

fn check_same_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(ForgeError::Shape {
            expected: gt.dims(),
            found: pred.dims(),
        });
    }
    Ok(())
}

fn overlap_counts(pred: &BinaryMask, gt: &BinaryMask) -> (u64, u64, u64) {
    pred.data()
        .iter()
        .zip(gt.data())
        .fold((0, 0, 0), |(i, u, f), (&p, &g)| {
            (
                i + (p & g) as u64,
                u + (p | g) as u64,
                f + (p & (1 - g)) as u64,
            )
        })
}

/// `|pred ∧ gt| / |pred ∨ gt|`, or 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same_dims(pred, gt)?;
    let (i, u, _) = overlap_counts(pred, gt);
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Greedy one-to-one matching of centroids within `deviation_px`, ascending
/// by distance with ties broken by ground-truth label, then predicted label.
pub fn match_targets(
    pred_clusters: &ClusterSet,
    gt_clusters: &ClusterSet,
    cfg: &MetricConfig,
) -> Vec<TargetMatch> {
    let mut pairs = Vec::new();
    for g in &gt_clusters.clusters {
        for p in &pred_clusters.clusters {
            let distance = (p.centroid.0 - g.centroid.0).hypot(p.centroid.1 - g.centroid.1);
            if distance <= cfg.deviation_px {
                pairs.push(TargetMatch {
                    pred_label: p.label,
                    gt_label: g.label,
                    distance,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.gt_label.cmp(&b.gt_label))
            .then(a.pred_label.cmp(&b.pred_label))
    });
    let mut pred_used = vec![false; pred_clusters.len()];
    let mut gt_used = vec![false; gt_clusters.len()];
    pairs
        .into_iter()
        .filter(|m| {
            let (pi, gi) = (m.pred_label as usize - 1, m.gt_label as usize - 1);
            if pred_used[pi] || gt_used[gi] {
                return false;
            }
            pred_used[pi] = true;
            gt_used[gi] = true;
            true
        })
        .collect()
}

/// Pd, pixel-level Fa and Fat of one prediction.
pub fn pd_fa_fat(pred: &BinaryMask, gt: &BinaryMask, cfg: &MetricConfig) -> Result<TargetMetrics> {
    check_same_dims(pred, gt)?;
    cfg.validate()?;
    let pred_c = cluster8(pred);
    let gt_c = cluster8(gt);
    let matches = match_targets(&pred_c, &gt_c, cfg);
    let (_, _, false_px) = overlap_counts(pred, gt);
    let counts = Counts {
        n_all: gt_c.len() as u64,
        detected: matches.len() as u64,
        t_false: (pred_c.len() - matches.len()) as u64,
        false_px,
        total_px: (pred.width() * pred.height()) as u64,
        ..Counts::default()
    };
    let r = counts.ratios();
    Ok(TargetMetrics {
        pd: r.pd,
        fa: r.fa,
        fat: r.fat,
        fat_defined: r.fat_defined,
        n_all: counts.n_all,
        detected: counts.detected,
        t_false: counts.t_false,
        false_px,
        total_px: counts.total_px,
    })
}

/// All metrics for one image.
pub fn evaluate_image(
    image_id: impl Into<String>,
    pred: &BinaryMask,
    gt: &BinaryMask,
    cfg: &MetricConfig,
) -> Result<ImageMetrics> {
    let t = pd_fa_fat(pred, gt, cfg)?;
    let (intersection, union, _) = overlap_counts(pred, gt);
    Ok(ImageMetrics::from_counts(
        image_id,
        Counts {
            intersection,
            union,
            n_all: t.n_all,
            detected: t.detected,
            t_false: t.t_false,
            false_px: t.false_px,
            total_px: t.total_px,
        },
    ))
}

/// Micro-averaged dataset report.
pub fn aggregate(per_image: &[ImageMetrics], cfg: &MetricConfig) -> Result<MetricReport> {
    if per_image.is_empty() {
        return Err(ForgeError::Domain("cannot aggregate zero images".into()));
    }
    let counts = per_image
        .iter()
        .map(|m| m.counts)
        .fold(Counts::default(), |a, b| a + b);
    let r = counts.ratios();
    Ok(MetricReport {
        iou: r.iou,
        pd: r.pd,
        fa: r.fa,
        fa_scaled: r.fa * cfg.fa_scale,
        fa_scale: cfg.fa_scale,
        fat: r.fat,
        fat_defined: r.fat_defined,
        deviation_px: cfg.deviation_px,
        counts,
        per_image: per_image.to_vec(),
    })
}

/// Writes one CSV row per image:
/// `image_id,iou,pd,fa,fat,n_all,t_false`. `fa` is the unscaled ratio.
pub fn write_csv<W: Write>(report: &MetricReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| ForgeError::Domain(format!("writing metric csv: {e}"));
    w.write_record(["image_id", "iou", "pd", "fa", "fat", "n_all", "t_false"])
        .map_err(to_err)?;
    for m in &report.per_image {
        w.write_record([
            m.image_id.clone(),
            m.iou.to_string(),
            m.pd.to_string(),
            m.fa.to_string(),
            m.fat.to_string(),
            m.counts.n_all.to_string(),
            m.counts.t_false.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| ForgeError::Domain(format!("writing metric csv: {e}")))?;
    Ok(())
}
