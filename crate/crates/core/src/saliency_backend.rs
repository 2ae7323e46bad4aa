//! Saliency providers.
//!
//! * a deterministic local-contrast region grower that needs no trained model;
//! * a loader for saliency maps computed offline;
//! * an HTTP client for remote inference servers speaking the TNSR wire format.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::input_assembly::{BackendContract, ModelInput};
use crate::io::{decode_tnsr, encode_model_input, load_floatmap, load_image};
use crate::prompt_encoding::EnergyMap;
use crate::types::FloatMap;

/// Seed snapping reach around a prompt: a 5x5 neighborhood.
const SEED_SNAP: i64 = 2;
/// Width of the background ring beyond `window`.
const RING_WIDTH: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSegmenterConfig {
    /// Inner radius of the background ring around the seed.
    pub window: u32,
    /// Threshold interpolation weight between background and peak.
    pub growth_factor: f64,
    /// Chebyshev cap on growth distance from the seed.
    pub max_radius: u32,
}

impl Default for ReferenceSegmenterConfig {
    fn default() -> Self {
        Self {
            window: 8,
            growth_factor: 0.5,
            max_radius: 16,
        }
    }
}

impl ReferenceSegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(ForgeError::Config(format!(
                "window must be at least 2, got {}",
                self.window
            )));
        }
        if !(self.growth_factor > 0.0 && self.growth_factor <= 1.0) {
            return Err(ForgeError::Config(format!(
                "growth factor must lie in (0, 1], got {}",
                self.growth_factor
            )));
        }
        if self.max_radius < 1 {
            return Err(ForgeError::Config("max radius must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{endpoint}/infer`.
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Extra attempts after the first failure.
    pub retries: u32,
    /// Upper bound on concurrent requests from one client.
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: 30_000,
            retries: 2,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackendKind {
    ReferenceLocalContrast(ReferenceSegmenterConfig),
    /// Path pattern with an `{id}` placeholder; `.png` files are read as
    /// normalized grayscale, anything else as single-channel TNSR.
    Precomputed {
        pattern: String,
    },
    Remote(RemoteConfig),
}

impl BackendKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackendKind::ReferenceLocalContrast(cfg) => cfg.validate(),
            BackendKind::Precomputed { pattern } => {
                if !pattern.contains("{id}") {
                    return Err(ForgeError::Config(format!(
                        "precomputed pattern `{pattern}` lacks an {{id}} placeholder"
                    )));
                }
                Ok(())
            }
            BackendKind::Remote(r) => {
                if r.timeout_ms == 0 {
                    return Err(ForgeError::Config("remote timeout must be positive".into()));
                }
                if r.max_in_flight == 0 {
                    return Err(ForgeError::Config("max in-flight must be positive".into()));
                }
                if !(r.endpoint.starts_with("http://") || r.endpoint.starts_with("https://")) {
                    return Err(ForgeError::Config(format!(
                        "remote endpoint `{}` is not an http(s) URL",
                        r.endpoint
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, BackendKind::Remote(_))
    }
}

/// Parses `reference`, `precomputed:PATTERN` or `remote:URL`.
impl std::str::FromStr for BackendKind {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        let kind = if s == "reference" {
            BackendKind::ReferenceLocalContrast(ReferenceSegmenterConfig::default())
        } else if let Some(pattern) = s.strip_prefix("precomputed:") {
            BackendKind::Precomputed {
                pattern: pattern.to_string(),
            }
        } else if let Some(url) = s.strip_prefix("remote:") {
            BackendKind::Remote(RemoteConfig::new(url.trim_end_matches('/')))
        } else {
            return Err(ForgeError::Config(format!(
                "unknown backend `{s}` (expected reference, precomputed:PATTERN or remote:URL)"
            )));
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Anything that can turn a model input into a saliency map.
pub trait SaliencyBackend: Send + Sync {
    fn infer(&self, input: &ModelInput, energy: &EnergyMap) -> Result<FloatMap>;
}

/// Backend built from a [`BackendKind`], enforcing the contract on both ends.
pub struct Backend {
    kind: BackendKind,
    remote: Option<RemoteClient>,
}

impl Backend {
    pub fn new(kind: BackendKind) -> Result<Self> {
        kind.validate()?;
        let remote = match &kind {
            BackendKind::Remote(cfg) => Some(RemoteClient::new(cfg.clone())),
            _ => None,
        };
        Ok(Self { kind, remote })
    }

    pub fn kind(&self) -> &BackendKind {
        &self.kind
    }
}

impl SaliencyBackend for Backend {
    fn infer(&self, input: &ModelInput, energy: &EnergyMap) -> Result<FloatMap> {
        BackendContract::check_input(input, energy)?;
        let out = match &self.kind {
            BackendKind::ReferenceLocalContrast(cfg) => {
                reference_segment_map(input.image(), energy, cfg)?
            }
            BackendKind::Precomputed { pattern } => {
                load_precomputed(pattern, energy.prompts.image_id())?
            }
            BackendKind::Remote(_) => self
                .remote
                .as_ref()
                .expect("remote backends own a client")
                .infer(input)?,
        };
        BackendContract::check_output(input, &out)?;
        Ok(out)
    }
}

/// One-shot inference with a freshly built backend.
pub fn infer(input: &ModelInput, energy: &EnergyMap, kind: &BackendKind) -> Result<FloatMap> {
    Backend::new(kind.clone())?.infer(input, energy)
}

pub fn precomputed_path(pattern: &str, image_id: &str) -> PathBuf {
    PathBuf::from(pattern.replace("{id}", image_id))
}

fn load_precomputed(pattern: &str, image_id: &str) -> Result<FloatMap> {
    let path = precomputed_path(pattern, image_id);
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        Ok(load_image(&path)?.to_float_map())
    } else {
        load_floatmap(&path)
    }
}

/// Local-contrast region growing from each prompt.
///
/// For every prompt the seed is the brightest pixel of its 5x5 neighborhood.
/// The background level is the mean over the square ring at Chebyshev
/// distance `window..=window + 2` from the seed. The region is the
/// eight-connected set of pixels reachable from the seed whose intensity is at
/// least `bg + k * (peak - bg)`, limited to `max_radius` from the seed. Region
/// pixels get `(I - bg) / (peak - bg)` clamped to `[0, 1]`; overlapping
/// regions keep the larger value. A prompt whose peak does not exceed the
/// background contributes nothing.
pub fn reference_segment(
    image: &crate::types::RasterImage,
    energy: &EnergyMap,
    cfg: &ReferenceSegmenterConfig,
) -> Result<FloatMap> {
    reference_segment_map(&image.to_float_map(), energy, cfg)
}

fn reference_segment_map(
    image: &FloatMap,
    energy: &EnergyMap,
    cfg: &ReferenceSegmenterConfig,
) -> Result<FloatMap> {
    cfg.validate()?;
    if image.dims() != energy.dims() {
        return Err(ForgeError::Shape {
            expected: image.dims(),
            found: energy.dims(),
        });
    }
    let (w, h) = image.dims();
    energy.prompts.validate_bounds(w, h)?;
    let (wi, hi) = (w as i64, h as i64);
    let at = |x: i64, y: i64| image.get(x as usize, y as usize);
    let mut out = FloatMap::zeros(w, h)?;
    let mut visited = vec![u32::MAX; w * h];

    for (n, p) in energy.prompts.iter().enumerate() {
        let (px, py) = (p.x as i64, p.y as i64);
        // Brightest pixel of the 5x5 neighborhood, first in raster order.
        let mut seed = ((px - SEED_SNAP).max(0), (py - SEED_SNAP).max(0));
        for y in (py - SEED_SNAP).max(0)..=(py + SEED_SNAP).min(hi - 1) {
            for x in (px - SEED_SNAP).max(0)..=(px + SEED_SNAP).min(wi - 1) {
                if at(x, y) > at(seed.0, seed.1) {
                    seed = (x, y);
                }
            }
        }
        let peak = at(seed.0, seed.1);

        let inner = cfg.window as i64;
        let outer = inner + RING_WIDTH;
        let (mut sum, mut count) = (0.0, 0usize);
        for y in (seed.1 - outer).max(0)..=(seed.1 + outer).min(hi - 1) {
            for x in (seed.0 - outer).max(0)..=(seed.0 + outer).min(wi - 1) {
                let d = (x - seed.0).abs().max((y - seed.1).abs());
                if d >= inner {
                    sum += at(x, y);
                    count += 1;
                }
            }
        }
        if count == 0 {
            continue;
        }
        let background = sum / count as f64;
        let contrast = peak - background;
        if contrast.is_nan() || contrast <= 0.0 {
            continue;
        }
        let threshold = background + cfg.growth_factor * contrast;
        let reach = cfg.max_radius as i64;

        let tag = n as u32;
        let mut queue = VecDeque::from([seed]);
        visited[seed.1 as usize * w + seed.0 as usize] = tag;
        while let Some((x, y)) = queue.pop_front() {
            let v = ((at(x, y) - background) / contrast).clamp(0.0, 1.0);
            let cell = &mut out.data_mut()[y as usize * w + x as usize];
            *cell = cell.max(v);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= wi || ny >= hi {
                        continue;
                    }
                    if (nx - seed.0).abs().max((ny - seed.1).abs()) > reach {
                        continue;
                    }
                    let i = ny as usize * w + nx as usize;
                    if visited[i] == tag || at(nx, ny) < threshold {
                        continue;
                    }
                    visited[i] = tag;
                    queue.push_back((nx, ny));
                }
            }
        }
    }
    Ok(out)
}

struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Blocking client for `POST {endpoint}/infer`. The request body is the TNSR
/// encoding of the three input channels; the response must be a
/// single-channel TNSR saliency map with status 200.
pub struct RemoteClient {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

enum Attempt {
    Retryable(String),
    Fatal(String),
}

impl RemoteClient {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let in_flight = InFlight {
            limit: cfg.max_in_flight.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        };
        Self {
            cfg,
            agent,
            in_flight,
        }
    }

    pub fn url(&self) -> String {
        format!("{}/infer", self.cfg.endpoint.trim_end_matches('/'))
    }

    pub fn infer(&self, input: &ModelInput) -> Result<FloatMap> {
        let body = encode_model_input(input)?;
        let url = self.url();
        let attempts_allowed = self.cfg.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts_allowed {
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.try_once(&url, &body)
            };
            match outcome {
                Ok(bytes) => return self.decode(&bytes, input),
                Err(Attempt::Fatal(detail)) => {
                    return Err(ForgeError::Transport {
                        endpoint: url,
                        attempts: attempt,
                        detail,
                    })
                }
                Err(Attempt::Retryable(detail)) => {
                    log::warn!(
                        "inference attempt {attempt}/{attempts_allowed} to {url} failed: {detail}"
                    );
                    last = detail;
                }
            }
        }
        Err(ForgeError::Transport {
            endpoint: url,
            attempts: attempts_allowed,
            detail: last,
        })
    }

    fn try_once(&self, url: &str, body: &[u8]) -> std::result::Result<Vec<u8>, Attempt> {
        let mut resp = self
            .agent
            .post(url)
            .header("Content-Type", "application/octet-stream")
            .send(body)
            .map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let detail = format!("HTTP status {status}");
            return Err(if status >= 500 {
                Attempt::Retryable(detail)
            } else {
                Attempt::Fatal(detail)
            });
        }
        resp.body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(|e| Attempt::Retryable(e.to_string()))
    }

    fn decode(&self, bytes: &[u8], input: &ModelInput) -> Result<FloatMap> {
        let mut maps = decode_tnsr(bytes, "<remote response>").map_err(|e| {
            ForgeError::Contract(format!("undecodable response from {}: {e}", self.url()))
        })?;
        if maps.len() != 1 {
            return Err(ForgeError::Contract(format!(
                "expected a single saliency channel, got {}",
                maps.len()
            )));
        }
        let out = maps.remove(0);
        BackendContract::check_output(input, &out)?;
        Ok(out)
    }
}
