//! Saliency post-processing: thresholding, eight-connected clustering and
//! prompt-driven false-alarm removal.
//!
//! Three matchers decide which candidate clusters survive:
//!
//! * [`bbm`] keeps the first unclaimed cluster whose bounding box contains
//!   the prompt, so clicks on or just outside a target boundary still count;
//! * [`tpm`] keeps clusters whose centroid is within a radius of a prompt;
//! * [`erm`] keeps clusters that contain the prompt pixel itself.

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::types::{bbox_of, centroid_of, BinaryMask, Cluster, ClusterSet, FloatMap, PromptSet};

pub const DEFAULT_TAU_S: f64 = 0.5;
pub const DEFAULT_TPM_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    #[default]
    Bbm,
    Tpm,
    Erm,
    None,
}

impl std::str::FromStr for Matcher {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bbm" => Ok(Matcher::Bbm),
            "tpm" => Ok(Matcher::Tpm),
            "erm" => Ok(Matcher::Erm),
            "none" => Ok(Matcher::None),
            other => Err(ForgeError::Config(format!(
                "unknown matcher `{other}` (expected bbm, tpm, erm or none)"
            ))),
        }
    }
}

impl std::fmt::Display for Matcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Matcher::Bbm => "bbm",
            Matcher::Tpm => "tpm",
            Matcher::Erm => "erm",
            Matcher::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub tau_s: f64,
    pub matcher: Matcher,
    pub tpm_radius: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            tau_s: DEFAULT_TAU_S,
            matcher: Matcher::Bbm,
            tpm_radius: DEFAULT_TPM_RADIUS,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau_s)?;
        if self.tpm_radius.is_nan() || self.tpm_radius <= 0.0 {
            return Err(ForgeError::Config(format!(
                "tpm radius must be positive, got {}",
                self.tpm_radius
            )));
        }
        Ok(())
    }
}

fn check_tau(tau_s: f64) -> Result<()> {
    if !(tau_s > 0.0 && tau_s < 1.0) {
        return Err(ForgeError::Config(format!(
            "segmentation threshold must lie in (0, 1), got {tau_s}"
        )));
    }
    Ok(())
}

/// A surviving cluster and the prompt that claimed it, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KeptCluster {
    pub prompt: Option<usize>,
    pub label: u32,
}

/// Matcher bookkeeping. Every candidate label appears in exactly one of
/// `kept` and `removed`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct MatchOutcome {
    pub kept: Vec<KeptCluster>,
    pub removed: Vec<u32>,
    pub unmatched_prompts: Vec<usize>,
}

impl MatchOutcome {
    fn from_claims(candidates: &ClusterSet, claims: &[Option<u32>]) -> Self {
        let mut claimed_by = vec![None; candidates.len()];
        for (prompt, claim) in claims.iter().enumerate() {
            if let Some(label) = claim {
                claimed_by[*label as usize - 1] = Some(prompt);
            }
        }
        let mut kept: Vec<KeptCluster> = claims
            .iter()
            .enumerate()
            .filter_map(|(prompt, c)| {
                c.map(|label| KeptCluster {
                    prompt: Some(prompt),
                    label,
                })
            })
            .collect();
        kept.sort_by_key(|k| k.label);
        Self {
            kept,
            removed: (1..=candidates.len() as u32)
                .filter(|l| claimed_by[*l as usize - 1].is_none())
                .collect(),
            unmatched_prompts: claims
                .iter()
                .enumerate()
                .filter(|(_, c)| c.is_none())
                .map(|(i, _)| i)
                .collect(),
        }
    }

    pub fn kept_labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.kept.iter().map(|k| k.label)
    }

    pub fn is_kept(&self, label: u32) -> bool {
        self.kept.iter().any(|k| k.label == label)
    }
}

/// Candidate map: 1 where `saliency > tau_s`, strictly.
pub fn binarize(saliency: &FloatMap, tau_s: f64) -> Result<BinaryMask> {
    check_tau(tau_s)?;
    let data = saliency
        .data()
        .iter()
        .map(|&v| u8::from(v > tau_s))
        .collect();
    BinaryMask::new(saliency.width(), saliency.height(), data)
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        // Slot 0 is the background label.
        Self { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let grand = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = grand;
            i = grand;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Two-pass eight-connected component labeling. Labels are dense and follow
/// the raster order of each component's first pixel; cluster pixels are
/// listed in raster order.
pub fn cluster8(mask: &BinaryMask) -> ClusterSet {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut uf = UnionFind::new();

    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut current = 0u32;
            // W, NW, N, NE: the already visited half of the neighborhood.
            for (dx, dy) in [(-1isize, 0isize), (-1, -1), (0, -1), (1, -1)] {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize {
                    continue;
                }
                let l = labels[ny as usize * w + nx as usize];
                if l == 0 {
                    continue;
                }
                current = if current == 0 {
                    l
                } else {
                    uf.union(current, l)
                };
            }
            labels[y * w + x] = if current == 0 { uf.make() } else { current };
        }
    }

    let mut dense = vec![0u32; uf.parent.len()];
    let mut pixels: Vec<Vec<(u32, u32)>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if labels[i] == 0 {
                continue;
            }
            let root = uf.find(labels[i]) as usize;
            if dense[root] == 0 {
                pixels.push(Vec::new());
                dense[root] = pixels.len() as u32;
            }
            let label = dense[root];
            labels[i] = label;
            pixels[label as usize - 1].push((x as u32, y as u32));
        }
    }

    let clusters = pixels
        .into_iter()
        .enumerate()
        .map(|(i, pixels)| Cluster {
            label: i as u32 + 1,
            bbox: bbox_of(&pixels).expect("components are non-empty"),
            centroid: centroid_of(&pixels).expect("components are non-empty"),
            pixels,
        })
        .collect();

    ClusterSet {
        width: w,
        height: h,
        clusters,
        label_map: labels,
    }
}

/// Bounding box matching. Prompts are visited in order; each claims the
/// first cluster (by label) that is still unclaimed and whose inclusive
/// bounding box contains it.
pub fn bbm(candidates: &ClusterSet, prompts: &PromptSet) -> (BinaryMask, MatchOutcome) {
    let mut claimed = vec![false; candidates.len()];
    let claims: Vec<Option<u32>> = prompts
        .iter()
        .map(|p| {
            let hit = candidates
                .clusters
                .iter()
                .find(|c| !claimed[c.label as usize - 1] && c.bbox.contains(p.x, p.y))?;
            claimed[hit.label as usize - 1] = true;
            Some(hit.label)
        })
        .collect();
    finish(candidates, &claims)
}

/// Centroid-distance matching. All (prompt, cluster) pairs within `radius`
/// are claimed greedily by ascending distance, ties broken by prompt index
/// then label, each prompt and cluster used at most once.
pub fn tpm(
    candidates: &ClusterSet,
    prompts: &PromptSet,
    radius: f64,
) -> (BinaryMask, MatchOutcome) {
    let mut pairs: Vec<(f64, usize, u32)> = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        for c in &candidates.clusters {
            let d = (p.x as f64 - c.centroid.0).hypot(p.y as f64 - c.centroid.1);
            if d <= radius {
                pairs.push((d, i, c.label));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut claims = vec![None; prompts.len()];
    let mut claimed = vec![false; candidates.len()];
    for (_, prompt, label) in pairs {
        if claims[prompt].is_none() && !claimed[label as usize - 1] {
            claims[prompt] = Some(label);
            claimed[label as usize - 1] = true;
        }
    }
    finish(candidates, &claims)
}

/// Region-membership matching: a cluster survives when a prompt pixel is one
/// of its pixels. Later prompts on an already kept cluster stay unmatched.
pub fn erm(candidates: &ClusterSet, prompts: &PromptSet) -> (BinaryMask, MatchOutcome) {
    let mut claimed = vec![false; candidates.len()];
    let claims: Vec<Option<u32>> = prompts
        .iter()
        .map(|p| {
            if p.x as usize >= candidates.width || p.y as usize >= candidates.height {
                return None;
            }
            let label = candidates.label_at(p.x, p.y);
            if label == 0 || claimed[label as usize - 1] {
                return None;
            }
            claimed[label as usize - 1] = true;
            Some(label)
        })
        .collect();
    finish(candidates, &claims)
}

/// Keeps every candidate.
pub fn keep_all(candidates: &ClusterSet, prompts: &PromptSet) -> (BinaryMask, MatchOutcome) {
    let outcome = MatchOutcome {
        kept: candidates
            .clusters
            .iter()
            .map(|c| KeptCluster {
                prompt: None,
                label: c.label,
            })
            .collect(),
        removed: Vec::new(),
        unmatched_prompts: (0..prompts.len()).collect(),
    };
    (candidates.mask_of(outcome.kept_labels()), outcome)
}

fn finish(candidates: &ClusterSet, claims: &[Option<u32>]) -> (BinaryMask, MatchOutcome) {
    let outcome = MatchOutcome::from_claims(candidates, claims);
    (candidates.mask_of(outcome.kept_labels()), outcome)
}

/// Runs the configured matcher.
pub fn apply_matcher(
    cfg: &PostprocessConfig,
    candidates: &ClusterSet,
    prompts: &PromptSet,
) -> (BinaryMask, MatchOutcome) {
    match cfg.matcher {
        Matcher::Bbm => bbm(candidates, prompts),
        Matcher::Tpm => tpm(candidates, prompts, cfg.tpm_radius),
        Matcher::Erm => erm(candidates, prompts),
        Matcher::None => keep_all(candidates, prompts),
    }
}

/// Result of thresholding, clustering and matching one saliency map.
#[derive(Debug, Clone)]
pub struct Postprocessed {
    pub candidates: ClusterSet,
    pub label: BinaryMask,
    pub outcome: MatchOutcome,
}

pub fn postprocess(
    saliency: &FloatMap,
    prompts: &PromptSet,
    cfg: &PostprocessConfig,
) -> Result<Postprocessed> {
    cfg.validate()?;
    let candidates = cluster8(&binarize(saliency, cfg.tau_s)?);
    let (label, outcome) = apply_matcher(cfg, &candidates, prompts);
    Ok(Postprocessed {
        candidates,
        label,
        outcome,
    })
}
