//! Raster, mask, geometry and prompt types shared by every stage.
//!
//! Coordinates are 0-based with `x` the column and `y` the row. All rasters
//! are stored row-major, so pixel `(x, y)` lives at index `y * width + x`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(ForgeError::InvalidRaster(format!(
            "dimensions must be positive, got {width}x{height}"
        )));
    }
    if width.checked_mul(height) != Some(len) {
        return Err(ForgeError::InvalidRaster(format!(
            "{width}x{height} raster needs {} values, got {len}",
            width.saturating_mul(height)
        )));
    }
    Ok(())
}

/// Single-channel intensity image normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(ForgeError::InvalidRaster(format!(
                "intensity {} at index {i} is outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// All-zero image.
    pub fn blank(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_float_map(&self) -> FloatMap {
        FloatMap {
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
    }
}

/// Row-major `{0, 1}` mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(ForgeError::InvalidRaster(format!(
                "mask value {} at index {i} is not 0 or 1",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub(crate) fn set(&mut self, x: usize, y: usize) {
        self.data[y * self.width + x] = 1;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

/// Real-valued map: energy maps, edge maps and saliency maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ForgeError::InvalidRaster(format!(
                "non-finite value {} at index {i}",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// How a prompt was placed relative to its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    #[default]
    Centroid,
    Coarse,
}

impl std::fmt::Display for PromptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptKind::Centroid => "centroid",
            PromptKind::Coarse => "coarse",
        })
    }
}

impl std::str::FromStr for PromptKind {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centroid" => Ok(PromptKind::Centroid),
            "coarse" => Ok(PromptKind::Coarse),
            other => Err(ForgeError::Config(format!("unknown prompt kind `{other}`"))),
        }
    }
}

/// A single user click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub x: u32,
    pub y: u32,
    #[serde(default)]
    pub kind: PromptKind,
}

impl Prompt {
    pub fn new(x: u32, y: u32, kind: PromptKind) -> Self {
        Self { x, y, kind }
    }

    pub fn centroid(x: u32, y: u32) -> Self {
        Self::new(x, y, PromptKind::Centroid)
    }

    pub fn coarse(x: u32, y: u32) -> Self {
        Self::new(x, y, PromptKind::Coarse)
    }
}

/// Ordered prompts of one image. Coordinates are unique within a set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptSet {
    image_id: String,
    prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            prompts: Vec::new(),
        }
    }

    pub fn new(image_id: impl Into<String>, prompts: Vec<Prompt>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(prompts.len());
        for p in &prompts {
            if !seen.insert((p.x, p.y)) {
                return Err(ForgeError::DuplicatePrompt { x: p.x, y: p.y });
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            prompts,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Prompt> {
        self.prompts.iter()
    }

    pub fn push(&mut self, prompt: Prompt) -> Result<()> {
        if self
            .prompts
            .iter()
            .any(|p| p.x == prompt.x && p.y == prompt.y)
        {
            return Err(ForgeError::DuplicatePrompt {
                x: prompt.x,
                y: prompt.y,
            });
        }
        self.prompts.push(prompt);
        Ok(())
    }

    pub fn pop(&mut self) -> Option<Prompt> {
        self.prompts.pop()
    }

    /// Checks every prompt against the image bounds.
    pub fn validate_bounds(&self, width: usize, height: usize) -> Result<()> {
        for (index, p) in self.prompts.iter().enumerate() {
            if p.x as usize >= width || p.y as usize >= height {
                return Err(ForgeError::Coordinate {
                    index,
                    x: p.x as i64,
                    y: p.y as i64,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a PromptSet {
    type Item = &'a Prompt;
    type IntoIter = std::slice::Iter<'a, Prompt>;

    fn into_iter(self) -> Self::IntoIter {
        self.prompts.iter()
    }
}

/// Inclusive pixel extent of a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BoundingBox {
    /// Inclusive containment test on both axes.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x1 as f64 <= x && x <= self.x2 as f64 && self.y1 as f64 <= y && y <= self.y2 as f64
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1 + 1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1 + 1
    }
}

/// One eight-connected region.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Dense label, starting at 1.
    pub label: u32,
    /// Member pixels in raster order.
    pub pixels: Vec<(u32, u32)>,
    pub bbox: BoundingBox,
    pub centroid: (f64, f64),
}

impl Cluster {
    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        self.bbox.contains(x, y)
            && self
                .pixels
                .binary_search_by_key(&(y, x), |&(px, py)| (py, px))
                .is_ok()
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Labeled partition of a mask's foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub width: usize,
    pub height: usize,
    pub clusters: Vec<Cluster>,
    /// Row-major labels, 0 for background.
    pub label_map: Vec<u32>,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn get(&self, label: u32) -> Option<&Cluster> {
        label
            .checked_sub(1)
            .and_then(|i| self.clusters.get(i as usize))
    }

    pub fn label_at(&self, x: u32, y: u32) -> u32 {
        self.label_map[y as usize * self.width + x as usize]
    }

    /// Mask covering the listed clusters.
    pub fn mask_of(&self, labels: impl IntoIterator<Item = u32>) -> BinaryMask {
        let mut mask = BinaryMask {
            width: self.width,
            height: self.height,
            data: vec![0; self.width * self.height],
        };
        for label in labels {
            if let Some(c) = self.get(label) {
                for &(x, y) in &c.pixels {
                    mask.set(x as usize, y as usize);
                }
            }
        }
        mask
    }
}

/// Prompt map: 1 exactly at prompt coordinates, 0 elsewhere.
pub fn mask_from_prompts(prompts: &PromptSet, width: usize, height: usize) -> Result<BinaryMask> {
    let mut mask = BinaryMask::zeros(width, height)?;
    prompts.validate_bounds(width, height)?;
    for p in prompts {
        mask.set(p.x as usize, p.y as usize);
    }
    Ok(mask)
}

pub fn bbox_of(pixels: &[(u32, u32)]) -> Result<BoundingBox> {
    let (&(x0, y0), rest) = pixels
        .split_first()
        .ok_or_else(|| ForgeError::Domain("bounding box of an empty pixel set".into()))?;
    Ok(rest.iter().fold(
        BoundingBox {
            x1: x0,
            y1: y0,
            x2: x0,
            y2: y0,
        },
        |b, &(x, y)| BoundingBox {
            x1: b.x1.min(x),
            y1: b.y1.min(y),
            x2: b.x2.max(x),
            y2: b.y2.max(y),
        },
    ))
}

/// Arithmetic mean of pixel coordinates. Sums are accumulated as integers
/// so the result does not depend on pixel order.
pub fn centroid_of(pixels: &[(u32, u32)]) -> Result<(f64, f64)> {
    if pixels.is_empty() {
        return Err(ForgeError::Domain("centroid of an empty pixel set".into()));
    }
    let (sx, sy) = pixels.iter().fold((0u64, 0u64), |(sx, sy), &(x, y)| {
        (sx + x as u64, sy + y as u64)
    });
    let n = pixels.len() as f64;
    Ok((sx as f64 / n, sy as f64 / n))
}
