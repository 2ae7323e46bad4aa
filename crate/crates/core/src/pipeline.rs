//! One image through the whole chain: energy encoding, input assembly,
//! saliency inference and post-processing.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::input_assembly::assemble;
use crate::postprocess::{postprocess, PostprocessConfig, Postprocessed};
use crate::prompt_encoding::{tei_encode, TeiConfig};
use crate::saliency_backend::SaliencyBackend;
use crate::types::{PromptSet, RasterImage};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tei: TeiConfig,
    pub postprocess: PostprocessConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.tei.validate()?;
        self.postprocess.validate()
    }
}

/// Runs the pipeline for a single image. Prompts are bounds-checked first.
pub fn run_image(
    image: &RasterImage,
    prompts: &PromptSet,
    backend: &dyn SaliencyBackend,
    cfg: &PipelineConfig,
) -> Result<Postprocessed> {
    cfg.validate()?;
    let (w, h) = image.dims();
    prompts.validate_bounds(w, h)?;
    let energy = tei_encode(prompts, w, h, &cfg.tei)?;
    let input = assemble(image, &energy)?;
    let saliency = backend.infer(&input, &energy)?;
    postprocess(&saliency, prompts, &cfg.postprocess)
}
