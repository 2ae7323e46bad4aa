//! File formats: PNG images and masks, the `TNSR` tensor container, JSON
//! dataset manifests, CSV prompt files and run-length encoded masks.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::input_assembly::ModelInput;
use crate::prompt_encoding::derive_prompts;
use crate::types::{BinaryMask, FloatMap, Prompt, PromptKind, PromptSet, RasterImage};

// ---------------------------------------------------------------------------
// PNG

fn open_png(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| ForgeError::format(path, e.to_string()))
}

fn decode_gray(img: DynamicImage, path: &Path) -> Result<RasterImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / u8::MAX as f64)
            .collect(),
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => img
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / u16::MAX as f64)
            .collect(),
        other => {
            return Err(ForgeError::format(
                path,
                format!("unsupported bit depth ({:?})", other.color()),
            ))
        }
    };
    RasterImage::new(w, h, data)
}

/// Loads an 8- or 16-bit PNG as a normalized grayscale image. Color inputs
/// are reduced to luminance.
pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    decode_gray(open_png(path)?, path)
}

/// Decodes PNG bytes already in memory.
pub fn decode_image_png(bytes: &[u8]) -> Result<RasterImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ForgeError::format("<upload>", e.to_string()))?;
    decode_gray(img, Path::new("<upload>"))
}

/// Encodes an image as 16-bit grayscale PNG bytes.
pub fn encode_image_png(image: &RasterImage) -> Vec<u8> {
    let raw: Vec<u16> = image
        .data()
        .iter()
        .map(|v| (v * u16::MAX as f64).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, raw)
            .expect("buffer length matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    out.into_inner()
}

/// Saves an image as a 16-bit grayscale PNG.
pub fn save_image(image: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image_png(image)).map_err(|e| ForgeError::io(path, e))
}

fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    let raw = mask.data().iter().map(|&v| v * u8::MAX).collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer length matches dimensions")
}

/// Encodes a mask as 8-bit PNG bytes, foreground 255.
pub fn encode_mask_png(mask: &BinaryMask) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    mask_to_gray(mask)
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    out.into_inner()
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask_png(mask)).map_err(|e| ForgeError::io(path, e))
}

/// Loads a mask PNG; any 8-bit gray value above 127 is foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = open_png(path)?;
    if matches!(
        img,
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_)
    ) {
        return Err(ForgeError::format(path, "unsupported bit depth"));
    }
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    BinaryMask::new(
        w,
        h,
        gray.into_raw()
            .into_iter()
            .map(|v| u8::from(v > 127))
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// TNSR container
//
// magic "TNSR" | u8 version = 1 | u8 dtype = 1 (f32) | u16 channels |
// u32 height | u32 width | channel-major, row-major f32 payload.
// All integers and floats little-endian.

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u8 = 1;
pub const TNSR_DTYPE_F32: u8 = 1;
pub const TNSR_HEADER_LEN: usize = 16;

/// Serializes same-sized channels into a TNSR byte buffer.
pub fn encode_tnsr(channels: &[FloatMap]) -> Result<Vec<u8>> {
    let first = channels
        .first()
        .ok_or_else(|| ForgeError::Domain("a tensor needs at least one channel".into()))?;
    let (w, h) = first.dims();
    if let Some(c) = channels.iter().find(|c| c.dims() != (w, h)) {
        return Err(ForgeError::Shape {
            expected: (w, h),
            found: c.dims(),
        });
    }
    let n = u16::try_from(channels.len())
        .map_err(|_| ForgeError::Domain(format!("too many channels: {}", channels.len())))?;
    let (hw, ww) = (
        u32::try_from(h).map_err(|_| ForgeError::Domain("height exceeds u32".into()))?,
        u32::try_from(w).map_err(|_| ForgeError::Domain("width exceeds u32".into()))?,
    );
    let mut out = Vec::with_capacity(TNSR_HEADER_LEN + 4 * w * h * channels.len());
    out.extend_from_slice(TNSR_MAGIC);
    out.push(TNSR_VERSION);
    out.push(TNSR_DTYPE_F32);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&hw.to_le_bytes());
    out.extend_from_slice(&ww.to_le_bytes());
    for c in channels {
        for &v in c.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a TNSR buffer. `source` only labels errors.
pub fn decode_tnsr(bytes: &[u8], source: impl AsRef<Path>) -> Result<Vec<FloatMap>> {
    let source = source.as_ref();
    let truncated = |what: &str| {
        ForgeError::io(
            source,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("truncated {what}"),
            ),
        )
    };
    if bytes.len() < 4 || &bytes[..4] != TNSR_MAGIC {
        if bytes.len() < 4 && TNSR_MAGIC.starts_with(bytes) {
            return Err(truncated("header"));
        }
        return Err(ForgeError::format(source, "bad magic, expected TNSR"));
    }
    if bytes.len() < TNSR_HEADER_LEN {
        return Err(truncated("header"));
    }
    if bytes[4] != TNSR_VERSION {
        return Err(ForgeError::format(
            source,
            format!("unsupported TNSR version {}", bytes[4]),
        ));
    }
    if bytes[5] != TNSR_DTYPE_F32 {
        return Err(ForgeError::format(
            source,
            format!("unsupported TNSR dtype {}", bytes[5]),
        ));
    }
    let channels = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if channels == 0 {
        return Err(ForgeError::format(source, "TNSR with zero channels"));
    }
    if w == 0 || h == 0 {
        return Err(ForgeError::format(
            source,
            format!("TNSR with empty plane {w}x{h}"),
        ));
    }
    let plane = w * h;
    let need = TNSR_HEADER_LEN + 4 * plane * channels;
    if bytes.len() < need {
        return Err(truncated("payload"));
    }
    if bytes.len() > need {
        return Err(ForgeError::format(
            source,
            format!("{} trailing bytes after payload", bytes.len() - need),
        ));
    }
    let values: Vec<f64> = bytes[TNSR_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    values
        .chunks_exact(plane)
        .map(|c| {
            FloatMap::new(w, h, c.to_vec()).map_err(|e| ForgeError::format(source, e.to_string()))
        })
        .collect()
}

pub fn save_tensor(channels: &[FloatMap], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tnsr(channels)?;
    fs::write(path, bytes).map_err(|e| ForgeError::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Vec<FloatMap>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    decode_tnsr(&bytes, path)
}

pub fn save_floatmap(map: &FloatMap, path: impl AsRef<Path>) -> Result<()> {
    save_tensor(std::slice::from_ref(map), path)
}

/// Loads a single-channel TNSR file.
pub fn load_floatmap(path: impl AsRef<Path>) -> Result<FloatMap> {
    let path = path.as_ref();
    let mut channels = load_tensor(path)?;
    if channels.len() != 1 {
        return Err(ForgeError::format(
            path,
            format!("expected 1 channel, found {}", channels.len()),
        ));
    }
    Ok(channels.remove(0))
}

pub fn encode_model_input(input: &ModelInput) -> Result<Vec<u8>> {
    encode_tnsr(input.channels())
}

pub fn decode_model_input(bytes: &[u8], source: impl AsRef<Path>) -> Result<ModelInput> {
    let source = source.as_ref();
    let channels: [FloatMap; 3] =
        decode_tnsr(bytes, source)?
            .try_into()
            .map_err(|v: Vec<FloatMap>| {
                ForgeError::format(
                    source,
                    format!("model input needs 3 channels, found {}", v.len()),
                )
            })?;
    ModelInput::from_channels(channels)
}

pub fn save_model_input(input: &ModelInput, path: impl AsRef<Path>) -> Result<()> {
    save_tensor(input.channels(), path)
}

pub fn load_model_input(path: impl AsRef<Path>) -> Result<ModelInput> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    decode_model_input(&bytes, path)
}

// ---------------------------------------------------------------------------
// Prompt CSV files: image_id,x,y,kind

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRow {
    pub image_id: String,
    pub x: u32,
    pub y: u32,
    pub kind: PromptKind,
}

pub fn read_prompt_rows(path: impl AsRef<Path>) -> Result<Vec<PromptRow>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> ForgeError {
    let location = e
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "-".into());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => ForgeError::io(path, io),
        kind => ForgeError::Parse {
            path: path.to_path_buf(),
            location,
            detail: format!("{kind:?}"),
        },
    }
}

/// Prompts of one image from a prompt CSV, in file order.
pub fn load_prompt_file(path: impl AsRef<Path>, image_id: &str) -> Result<PromptSet> {
    let prompts = read_prompt_rows(path)?
        .into_iter()
        .filter(|r| r.image_id == image_id)
        .map(|r| Prompt::new(r.x, r.y, r.kind))
        .collect();
    PromptSet::new(image_id, prompts)
}

pub fn prompt_rows(prompts: &PromptSet) -> Vec<PromptRow> {
    prompts
        .iter()
        .map(|p| PromptRow {
            image_id: prompts.image_id().to_string(),
            x: p.x,
            y: p.y,
            kind: p.kind,
        })
        .collect()
}

/// Writes a complete prompt CSV, replacing any existing file.
pub fn write_prompt_rows(path: impl AsRef<Path>, rows: &[PromptRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(["image_id", "x", "y", "kind"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| ForgeError::io(path, e))
}

/// Appends rows to a prompt CSV, writing the header when the file is new.
pub fn append_prompt_rows(path: impl AsRef<Path>, rows: &[PromptRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ForgeError::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    if fresh && rows.is_empty() {
        w.write_record(["image_id", "x", "y", "kind"])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| ForgeError::io(path, e))
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptSource {
    /// Rows for this image in a prompt CSV.
    File {
        path: PathBuf,
    },
    DeriveCentroid,
    DeriveCoarse {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_path: Option<PathBuf>,
    pub prompt_source: PromptSource,
}

/// Parsed manifest. Relative paths are resolved against `base_dir`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub images: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entry(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.images.iter().find(|e| e.image_id == image_id)
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.resolve(&entry.image_path)
    }

    pub fn gt_path(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        entry.gt_path.as_deref().map(|p| self.resolve(p))
    }

    /// Checks id uniqueness, prompt-source requirements and file existence.
    pub fn validate(&self) -> Result<()> {
        let source = self.base_dir.join("<manifest>");
        if self.version != MANIFEST_VERSION {
            return Err(ForgeError::Parse {
                path: source,
                location: "version".into(),
                detail: format!("unsupported manifest version {}", self.version),
            });
        }
        let mut ids = HashSet::new();
        for (i, e) in self.images.iter().enumerate() {
            validate_image_id(&e.image_id).map_err(|detail| ForgeError::Parse {
                path: source.clone(),
                location: format!("images[{i}].image_id"),
                detail,
            })?;
            if !ids.insert(e.image_id.as_str()) {
                return Err(ForgeError::Parse {
                    path: source,
                    location: format!("images[{i}].image_id"),
                    detail: format!("duplicate image_id `{}`", e.image_id),
                });
            }
            let mut required = vec![("image_path", self.image_path(e))];
            if let Some(gt) = self.gt_path(e) {
                required.push(("gt_path", gt));
            }
            match &e.prompt_source {
                PromptSource::File { path } => {
                    required.push(("prompt_source.path", self.resolve(path)))
                }
                PromptSource::DeriveCentroid | PromptSource::DeriveCoarse { .. } => {
                    if e.gt_path.is_none() {
                        return Err(ForgeError::Config(format!(
                            "image `{}` derives prompts but has no gt_path",
                            e.image_id
                        )));
                    }
                }
            }
            for (field, p) in required {
                if !p.exists() {
                    return Err(ForgeError::io(
                        &p,
                        std::io::Error::new(
                            std::io::ErrorKind::NotFound,
                            format!("images[{i}].{field} does not exist"),
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Image ids double as output file stems, so they must be a single plain
/// path component.
pub fn validate_image_id(id: &str) -> std::result::Result<(), String> {
    if id.is_empty() {
        return Err("image_id is empty".into());
    }
    if id == "." || id == ".." || id.contains(['/', '\\', '\0']) {
        return Err(format!("image_id `{id}` is not a plain file name"));
    }
    Ok(())
}

/// Parses manifest JSON without touching the filesystem.
pub fn parse_manifest(text: &str, source: impl AsRef<Path>) -> Result<DatasetManifest> {
    let source = source.as_ref();
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ForgeError::Parse {
        path: source.to_path_buf(),
        location: e.path().to_string(),
        detail: e.inner().to_string(),
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
    let mut manifest = parse_manifest(&text, path)?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

/// Prompts for one manifest image, read from its prompt file or derived from
/// its ground truth.
pub fn resolve_prompts(manifest: &DatasetManifest, image_id: &str) -> Result<PromptSet> {
    let entry = manifest
        .entry(image_id)
        .ok_or_else(|| ForgeError::Config(format!("image `{image_id}` is not in the manifest")))?;
    let derive = |mode, seed| -> Result<PromptSet> {
        let gt_path = manifest.gt_path(entry).ok_or_else(|| {
            ForgeError::Config(format!(
                "image `{image_id}` derives prompts but has no gt_path"
            ))
        })?;
        Ok(derive_prompts(&load_mask(gt_path)?, mode, seed, image_id))
    };
    match &entry.prompt_source {
        PromptSource::File { path } => load_prompt_file(manifest.resolve(path), image_id),
        PromptSource::DeriveCentroid => derive(PromptKind::Centroid, 0),
        PromptSource::DeriveCoarse { seed } => derive(PromptKind::Coarse, *seed),
    }
}

// ---------------------------------------------------------------------------
// Run-length encoding

/// Row-major run lengths, alternating background and foreground and always
/// starting with a (possibly zero) background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u64>,
}

pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u64;
    for &v in mask.data() {
        if v == current {
            run += 1;
        } else {
            counts.push(run);
            current = v;
            run = 1;
        }
    }
    counts.push(run);
    Rle {
        width: mask.width(),
        height: mask.height(),
        counts,
    }
}

pub fn rle_decode(rle: &Rle) -> Result<BinaryMask> {
    let total: u64 = rle.counts.iter().sum();
    if total != (rle.width * rle.height) as u64 {
        return Err(ForgeError::Domain(format!(
            "run lengths cover {total} pixels, mask has {}",
            rle.width * rle.height
        )));
    }
    let mut data = Vec::with_capacity(rle.width * rle.height);
    for (i, &n) in rle.counts.iter().enumerate() {
        data.extend(std::iter::repeat_n((i % 2) as u8, n as usize));
    }
    BinaryMask::new(rle.width, rle.height, data)
}
