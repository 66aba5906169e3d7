//! Zero-shot classification: softmax over temperature-scaled cosine
//! similarities between one image and every prompted class text.

use crate::dist::{softmax_from_similarities, PredictionDistribution, SimilarityVector};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Embedding, PromptContext, VisionLanguageModel};

#[derive(Clone, Copy)]
pub struct ZeroShot<'a> {
    model: &'a dyn VisionLanguageModel,
    temperature: f64,
}

impl<'a> ZeroShot<'a> {
    pub fn new(model: &'a dyn VisionLanguageModel, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { model, temperature })
    }

    pub fn model(&self) -> &'a dyn VisionLanguageModel {
        self.model
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn labels(&self) -> &'a [String] {
        self.model.labels()
    }

    pub fn text_embeddings(&self, prompt: &PromptContext) -> Result<Vec<Embedding>> {
        (0..self.model.num_classes())
            .map(|k| self.model.encode_text(prompt, k))
            .collect()
    }

    pub fn encode_images(&self, images: &[Image]) -> Result<Vec<Embedding>> {
        images.iter().map(|x| self.model.encode_image(x)).collect()
    }

    /// Distribution for an already-encoded image.
    pub fn distribution(&self, image: &Embedding, texts: &[Embedding]) -> Result<PredictionDistribution> {
        let sims = texts.iter().map(|t| image.dot(t).clamp(-1.0, 1.0)).collect();
        softmax_from_similarities(&SimilarityVector::new(sims, self.temperature)?, self.labels())
    }

    pub fn predict(&self, prompt: &PromptContext, x: &Image) -> Result<PredictionDistribution> {
        let texts = self.text_embeddings(prompt)?;
        self.distribution(&self.model.encode_image(x)?, &texts)
    }
}
