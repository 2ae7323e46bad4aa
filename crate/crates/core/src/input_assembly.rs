//! Three-channel backend input: intensity, Sobel edges and energy, plus the
//! contract every saliency backend has to satisfy.

use crate::error::{ForgeError, Result};
use crate::prompt_encoding::EnergyMap;
use crate::types::{FloatMap, RasterImage};

/// Channel order of [`ModelInput`].
pub const CHANNEL_IMAGE: usize = 0;
pub const CHANNEL_EDGE: usize = 1;
pub const CHANNEL_ENERGY: usize = 2;

/// Backbone input `(image, edges, energy)`, all at the same resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    channels: [FloatMap; 3],
}

impl ModelInput {
    /// Builds an input from already computed channels in the fixed order.
    pub fn from_channels(channels: [FloatMap; 3]) -> Result<Self> {
        let dims = channels[0].dims();
        for c in &channels[1..] {
            if c.dims() != dims {
                return Err(ForgeError::Shape {
                    expected: dims,
                    found: c.dims(),
                });
            }
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[FloatMap; 3] {
        &self.channels
    }

    pub fn image(&self) -> &FloatMap {
        &self.channels[CHANNEL_IMAGE]
    }

    pub fn edges(&self) -> &FloatMap {
        &self.channels[CHANNEL_EDGE]
    }

    pub fn energy(&self) -> &FloatMap {
        &self.channels[CHANNEL_ENERGY]
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    pub fn into_channels(self) -> [FloatMap; 3] {
        self.channels
    }
}

/// Sobel gradient magnitude with clamp-to-edge borders, scaled by its global
/// maximum into `[0, 1]`. A flat image gives an all-zero map.
pub fn sobel(image: &RasterImage) -> FloatMap {
    let (w, h) = image.dims();
    let px = |x: isize, y: isize| -> f64 {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        image.get(cx, cy)
    };
    let mut out = vec![0.0; w * h];
    let mut peak = 0.0f64;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            let m = (gx * gx + gy * gy).sqrt();
            peak = peak.max(m);
            out[y as usize * w + x as usize] = m;
        }
    }
    if peak > 0.0 {
        for v in &mut out {
            *v /= peak;
        }
    }
    FloatMap::new(w, h, out).expect("sobel output has image dimensions")
}

/// Concatenates `(image, sobel(image), energy)`.
pub fn assemble(image: &RasterImage, energy: &EnergyMap) -> Result<ModelInput> {
    if image.dims() != energy.dims() {
        return Err(ForgeError::Shape {
            expected: image.dims(),
            found: energy.dims(),
        });
    }
    Ok(ModelInput {
        channels: [image.to_float_map(), sobel(image), energy.map.clone()],
    })
}

/// Obligations of a saliency backend.
///
/// * input: three channels in `(image, edges, energy)` order;
/// * tail: the energy map is handed over again, at full resolution, for the
///   backend's final mapping stage;
/// * output: one map of the input's dimensions with every value in `[0, 1]`.
///
/// Out-of-range output is rejected rather than clamped.
#[derive(Debug, Clone, Copy, Default)]
pub struct BackendContract;

impl BackendContract {
    pub const INPUT_CHANNELS: usize = 3;

    pub fn check_input(input: &ModelInput, energy: &EnergyMap) -> Result<()> {
        if energy.dims() != input.dims() {
            return Err(ForgeError::Contract(format!(
                "tail energy map is {:?} but the input is {:?}",
                energy.dims(),
                input.dims()
            )));
        }
        if energy.map != *input.energy() {
            return Err(ForgeError::Contract(
                "tail energy map differs from the energy input channel".into(),
            ));
        }
        Ok(())
    }

    pub fn check_output(input: &ModelInput, output: &FloatMap) -> Result<()> {
        if output.dims() != input.dims() {
            return Err(ForgeError::Contract(format!(
                "saliency map is {:?} but the input is {:?}",
                output.dims(),
                input.dims()
            )));
        }
        if let Some((i, v)) = output
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ForgeError::Contract(format!(
                "saliency value {v} at index {i} is outside [0, 1]"
            )));
        }
        Ok(())
    }
}
