//! Target energy initialization: every click becomes an isotropic Gaussian
//! blob, and the blobs are accumulated into one energy map.
//!
//! Also derives prompts from already-labeled masks so the evaluation harness
//! can simulate centroid and coarse clicks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ForgeError, Result};
use crate::postprocess::cluster8;
use crate::types::{BinaryMask, FloatMap, Prompt, PromptKind, PromptSet};

/// Default Gaussian peak half-width in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// How overlapping blobs are accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Sum,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeiConfig {
    pub sigma: f64,
    /// Blob support radius; the Gaussian is exactly zero beyond it.
    pub truncation_radius: f64,
    pub combine: Combine,
}

impl TeiConfig {
    /// Config with the given sigma and a `ceil(3 * sigma)` truncation radius.
    pub fn with_sigma(sigma: f64) -> Result<Self> {
        let cfg = Self {
            sigma,
            truncation_radius: (3.0 * sigma).ceil().max(1.0),
            combine: Combine::Sum,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(ForgeError::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.truncation_radius >= 1.0 && self.truncation_radius.is_finite()) {
            return Err(ForgeError::Config(format!(
                "truncation radius must be at least 1, got {}",
                self.truncation_radius
            )));
        }
        Ok(())
    }
}

impl Default for TeiConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            truncation_radius: (3.0 * DEFAULT_SIGMA).ceil(),
            combine: Combine::Sum,
        }
    }
}

/// Init shape map together with the prompts it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    pub map: FloatMap,
    pub prompts: PromptSet,
}

impl EnergyMap {
    pub fn dims(&self) -> (usize, usize) {
        self.map.dims()
    }
}

/// Truncated isotropic Gaussian `exp(-(dx² + dy²) / 2σ²)`.
pub fn gaussian_at(dx: f64, dy: f64, sigma: f64, truncation_radius: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(ForgeError::Config(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    Ok(gaussian_unchecked(dx, dy, sigma, truncation_radius))
}

#[inline]
fn gaussian_unchecked(dx: f64, dy: f64, sigma: f64, truncation_radius: f64) -> f64 {
    let r2 = dx * dx + dy * dy;
    if r2.sqrt() > truncation_radius {
        0.0
    } else {
        (-r2 / (2.0 * sigma * sigma)).exp()
    }
}

/// Expands prompts into Gaussian blobs clipped at the image border.
pub fn tei_encode(
    prompts: &PromptSet,
    width: usize,
    height: usize,
    cfg: &TeiConfig,
) -> Result<EnergyMap> {
    cfg.validate()?;
    prompts.validate_bounds(width, height)?;
    let mut map = FloatMap::zeros(width, height)?;
    let reach = cfg.truncation_radius.floor() as i64;
    let data = map.data_mut();
    for p in prompts {
        let (px, py) = (p.x as i64, p.y as i64);
        let ys = (py - reach).max(0)..=(py + reach).min(height as i64 - 1);
        for y in ys {
            let xs = (px - reach).max(0)..=(px + reach).min(width as i64 - 1);
            for x in xs {
                let g = gaussian_unchecked(
                    (x - px) as f64,
                    (y - py) as f64,
                    cfg.sigma,
                    cfg.truncation_radius,
                );
                let cell = &mut data[y as usize * width + x as usize];
                match cfg.combine {
                    Combine::Sum => *cell += g,
                    Combine::Max => *cell = cell.max(g),
                }
            }
        }
    }
    Ok(EnergyMap {
        map,
        prompts: prompts.clone(),
    })
}

/// Derives one prompt per eight-connected ground-truth component.
///
/// `Centroid` rounds the component centroid to the nearest pixel and snaps it
/// to the closest member pixel when rounding lands outside the component.
/// `Coarse` picks a uniformly random member pixel from a generator keyed by
/// `(seed, image_id, component label)`.
pub fn derive_prompts(gt: &BinaryMask, mode: PromptKind, seed: u64, image_id: &str) -> PromptSet {
    let clusters = cluster8(gt);
    let prompts = clusters
        .clusters
        .iter()
        .map(|c| match mode {
            PromptKind::Centroid => {
                let (cx, cy) = c.centroid;
                let (rx, ry) = (cx.round() as u32, cy.round() as u32);
                if clusters.label_at(rx, ry) == c.label {
                    Prompt::centroid(rx, ry)
                } else {
                    let &(x, y) = c
                        .pixels
                        .iter()
                        .min_by(|a, b| {
                            let da = dist2(**a, cx, cy);
                            let db = dist2(**b, cx, cy);
                            da.total_cmp(&db)
                        })
                        .expect("clusters are non-empty");
                    Prompt::centroid(x, y)
                }
            }
            PromptKind::Coarse => {
                let mut rng = component_rng(seed, image_id, c.label);
                let (x, y) = c.pixels[rng.gen_range(0..c.pixels.len())];
                Prompt::coarse(x, y)
            }
        })
        .collect();
    // Components are disjoint, so derived coordinates never collide.
    PromptSet::new(image_id, prompts).expect("one prompt per disjoint component")
}

fn dist2((x, y): (u32, u32), cx: f64, cy: f64) -> f64 {
    let dx = x as f64 - cx;
    let dy = y as f64 - cy;
    dx * dx + dy * dy
}

fn component_rng(seed: u64, image_id: &str, label: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((image_id.len() as u64).to_le_bytes());
    h.update(image_id.as_bytes());
    h.update(label.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
