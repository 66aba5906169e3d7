//! Test-time erasure of spurious-feature shortcuts.
//!
//! For each test sample an [`AdaptationSession`] builds auxiliary images that
//! carry the features to erase, then runs gradient descent on the prompt's
//! context vectors to minimize
//!
//! ```text
//! L = λ_e · mean_j KL(p(y | x_e^j) || uniform) + λ_k · H(mean_v p(y | view_v))
//! ```
//!
//! where the views are augmentations of the content to keep (the boxed
//! foreground when a mask exists, else the whole image). The original test
//! image is then classified with the adapted prompt and the prompt is reset.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::auxiliary::{
    corner_patches, extract_background, extract_foreground, random_patches, select_reference_images,
    shuffle_patches, AuxStrategy, AuxiliaryImageSet,
};
use crate::dist::PredictionDistribution;
use crate::error::{Error, Result};
use crate::image::{ForegroundMask, Image};
use crate::model::{Embedding, PromptContext};
use crate::objective::{LossTerm, PromptObjective};
use crate::seed::derive_seed;
use crate::zeroshot::ZeroShot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EraserConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub erase_weight: f64,
    pub keep_weight: f64,
    pub keep_views: usize,
    pub augment: AugmentPolicy,
    pub strategies: Vec<AuxStrategy>,
    /// Tiles drawn by the random-patches strategy.
    pub random_patches: usize,
    /// Images taken from the reference pool.
    pub reference_count: usize,
    pub seed: u64,
}

impl Default for EraserConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            learning_rate: 5e-3,
            erase_weight: 1.0,
            keep_weight: 1.0,
            keep_views: 8,
            augment: AugmentPolicy::default(),
            strategies: vec![AuxStrategy::AnnotationBackground],
            random_patches: 4,
            reference_count: 1,
            seed: 0,
        }
    }
}

impl EraserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("eraser.steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("eraser.learning_rate must be positive"));
        }
        if !(self.erase_weight >= 0.0 && self.keep_weight >= 0.0) {
            return Err(Error::invalid("eraser weights must be non-negative"));
        }
        if self.erase_weight + self.keep_weight <= 0.0 {
            return Err(Error::invalid("eraser.erase_weight + eraser.keep_weight must be > 0"));
        }
        if self.keep_views == 0 {
            return Err(Error::invalid("eraser.keep_views must be >= 1"));
        }
        if self.strategies.is_empty() {
            return Err(Error::invalid("eraser.strategies must be non-empty"));
        }
        if self.random_patches == 0 || self.reference_count == 0 {
            return Err(Error::invalid("eraser.random_patches and eraser.reference_count must be >= 1"));
        }
        self.augment.validate()
    }

    pub fn needs_mask(&self) -> bool {
        self.strategies.contains(&AuxStrategy::AnnotationBackground)
    }
}

/// One test sample as seen by test-time methods.
#[derive(Debug, Clone, Copy)]
pub struct SampleInput<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    pub mask: Option<&'a ForegroundMask>,
}

/// Loss trace of one adaptation: `steps + 1` entries, the last one evaluated
/// at the final prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub strategies: Vec<AuxStrategy>,
    pub aux_images: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_erase_loss: f64,
    pub final_erase_loss: f64,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EraserPrediction {
    pub label: String,
    pub distribution: PredictionDistribution,
    pub diagnostics: Diagnostics,
}

/// Per-sample adaptation state. The model is read-only; only the context
/// vectors of `prompt` change, and they are reset after every prediction.
pub struct AdaptationSession<'a> {
    zs: ZeroShot<'a>,
    config: &'a EraserConfig,
    reference_pool: &'a [Image],
    initial: PromptContext,
    prompt: PromptContext,
}

impl<'a> AdaptationSession<'a> {
    pub fn new(
        zs: ZeroShot<'a>,
        initial: PromptContext,
        config: &'a EraserConfig,
        reference_pool: &'a [Image],
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            zs,
            config,
            reference_pool,
            prompt: initial.clone(),
            initial,
        })
    }

    pub fn prompt(&self) -> &PromptContext {
        &self.prompt
    }

    pub fn initial_prompt(&self) -> &PromptContext {
        &self.initial
    }

    pub fn reset(&mut self) {
        self.prompt = self.initial.clone();
    }

    fn unavailable(sample: &SampleInput<'_>, strategy: AuxStrategy, missing: &str) -> Error {
        Error::StrategyUnavailable {
            sample_id: sample.id.to_string(),
            strategy: strategy.name().to_string(),
            missing: missing.to_string(),
        }
    }

    /// Auxiliary images for every configured strategy.
    pub fn build_auxiliary(&self, sample: &SampleInput<'_>) -> Result<Vec<AuxiliaryImageSet>> {
        let (h, w, _) = self.zs.model().input_shape();
        let seed = |tag: &str| derive_seed(self.config.seed, sample.id, tag);
        self.config
            .strategies
            .iter()
            .map(|&strategy| {
                let set = match strategy {
                    AuxStrategy::AnnotationBackground => {
                        let mask = sample
                            .mask
                            .ok_or_else(|| Self::unavailable(sample, strategy, "mask"))?;
                        extract_background(sample.image, mask)?
                    }
                    AuxStrategy::CornerPatches => corner_patches(sample.image, (h, w))?,
                    AuxStrategy::RandomPatches => {
                        random_patches(sample.image, self.config.random_patches, seed("random-patches"), (h, w))?
                    }
                    AuxStrategy::Shuffle => shuffle_patches(sample.image, seed("shuffle"))?,
                    AuxStrategy::Reference => {
                        if self.reference_pool.is_empty() {
                            return Err(Self::unavailable(sample, strategy, "reference pool"));
                        }
                        let n = self.config.reference_count.min(self.reference_pool.len());
                        return select_reference_images(self.zs.model(), sample.image, self.reference_pool, n);
                    }
                };
                Ok(set.with_source(sample.id))
            })
            .collect()
    }

    /// Augmented views of the content to keep.
    pub fn keep_views(&self, sample: &SampleInput<'_>) -> Result<Vec<Image>> {
        let retained = match sample.mask {
            Some(mask) => extract_foreground(sample.image, mask)?,
            None => sample.image.clone(),
        };
        Ok(self.config.augment.views(
            &retained,
            self.config.keep_views,
            derive_seed(self.config.seed, sample.id, "keep"),
        ))
    }

    fn erase_term(&self, aux: &[Embedding]) -> PromptObjective {
        PromptObjective::new(self.zs.temperature()).with_term(LossTerm::UniformKl {
            weight: 1.0,
            images: aux.to_vec(),
        })
    }

    /// Mean KL divergence to uniform of the predictions on `aux` under the
    /// current prompt.
    pub fn erase_loss(&self, aux: &AuxiliaryImageSet) -> Result<f64> {
        let embs = self.zs.encode_images(&aux.images)?;
        self.erase_term(&embs).value(&self.zs.text_embeddings(&self.prompt)?)
    }

    /// Entropy of the mean prediction over the keep views under the current
    /// prompt.
    pub fn keep_loss(&self, sample: &SampleInput<'_>) -> Result<f64> {
        let embs = self.zs.encode_images(&self.keep_views(sample)?)?;
        PromptObjective::new(self.zs.temperature())
            .with_term(LossTerm::MarginalEntropy { weight: 1.0, images: embs })
            .value(&self.zs.text_embeddings(&self.prompt)?)
    }

    /// The weighted objective over fixed auxiliary and keep-view embeddings.
    pub fn objective(&self, aux: &[Embedding], keep: &[Embedding]) -> PromptObjective {
        let mut obj = PromptObjective::new(self.zs.temperature());
        if self.config.erase_weight > 0.0 {
            obj = obj.with_term(LossTerm::UniformKl {
                weight: self.config.erase_weight,
                images: aux.to_vec(),
            });
        }
        if self.config.keep_weight > 0.0 {
            obj = obj.with_term(LossTerm::MarginalEntropy {
                weight: self.config.keep_weight,
                images: keep.to_vec(),
            });
        }
        obj
    }

    /// Runs `config.steps` gradient-descent steps on the context vectors and
    /// leaves the adapted prompt in the session.
    pub fn adapt_prompt(&mut self, sample: &SampleInput<'_>, aux: &[AuxiliaryImageSet]) -> Result<Diagnostics> {
        let model = self.zs.model();
        if !model.provides_prompt_gradients() {
            return Err(Error::Unsupported(format!(
                "{} does not provide prompt gradients",
                model.identity()
            )));
        }
        let aux_images: Vec<Image> = aux.iter().flat_map(|s| s.images.iter().cloned()).collect();
        if aux_images.is_empty() {
            return Err(Error::invalid("no auxiliary images"));
        }
        let aux_embs = self.zs.encode_images(&aux_images)?;
        let keep_embs = if self.config.keep_weight > 0.0 {
            self.zs.encode_images(&self.keep_views(sample)?)?
        } else {
            Vec::new()
        };
        let objective = self.objective(&aux_embs, &keep_embs);
        let erase = self.erase_term(&aux_embs);
        let initial_erase_loss = erase.value(&self.zs.text_embeddings(&self.prompt)?)?;

        let mut trace = Vec::with_capacity(self.config.steps + 1);
        for step in 0..self.config.steps {
            let g = model.prompt_gradient(&self.prompt, &objective)?;
            if !g.loss.is_finite() || g.grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NumericFailure {
                    step,
                    detail: format!("loss = {}", g.loss),
                });
            }
            trace.push(g.loss);
            self.prompt.descend(&g.grads, self.config.learning_rate)?;
        }
        let texts = self.zs.text_embeddings(&self.prompt)?;
        let final_loss = objective.value(&texts)?;
        if !final_loss.is_finite() {
            return Err(Error::NumericFailure {
                step: self.config.steps,
                detail: format!("loss = {final_loss}"),
            });
        }
        trace.push(final_loss);
        let mut strategies: Vec<AuxStrategy> = aux.iter().map(|s| s.strategy).collect();
        strategies.dedup();
        Ok(Diagnostics {
            strategies,
            aux_images: aux_images.len(),
            steps: self.config.steps,
            initial_loss: trace[0],
            final_loss,
            initial_erase_loss,
            final_erase_loss: erase.value(&texts)?,
            loss_trace: trace,
        })
    }

    /// Builds auxiliary images, adapts, classifies the original image with the
    /// adapted prompt, and resets the prompt (also on error).
    pub fn predict(&mut self, sample: &SampleInput<'_>) -> Result<EraserPrediction> {
        let result = self.predict_inner(sample);
        self.reset();
        result
    }

    fn predict_inner(&mut self, sample: &SampleInput<'_>) -> Result<EraserPrediction> {
        let aux = self.build_auxiliary(sample)?;
        let diagnostics = self.adapt_prompt(sample, &aux)?;
        let distribution = self.zs.predict(&self.prompt, sample.image)?;
        Ok(EraserPrediction {
            label: distribution.labels()[distribution.argmax()].clone(),
            distribution,
            diagnostics,
        })
    }
}
