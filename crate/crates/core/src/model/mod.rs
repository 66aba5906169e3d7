//! Vision-language model abstraction.
//!
//! A model encodes images and prompted class texts into a shared embedding
//! space. Only the prompt's context vectors are ever optimized; the model
//! weights and the class tokens are fixed, which [`VisionLanguageModel::fingerprint`]
//! makes checkable.

mod toy;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::Image;

pub use toy::{
    build_toy_world, ToyModel, ToyWorld, ToyWorldSpec, ToySample, GLYPH_ORIGIN, GLYPH_SIZE,
    TOY_CONTEXT_LEN, TOY_EMBED_DIM, TOY_IMAGE_SIZE, TOY_TOKEN_WIDTH,
};

/// Text hypothesis used by presence filters: "nothing but background".
pub const BACKGROUND_ONLY: &str = "background only";

/// A `D`-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding must be non-empty and finite"));
        }
        Ok(Self(values))
    }

    /// Scales `values` to unit norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
        }
        Self::new(values.into_iter().map(|v| v / n).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        (self.dot(other) / (self.norm() * other.norm())).clamp(-1.0, 1.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `M` learnable context vectors shared by all classes, plus `K` fixed
/// class tokens. Every vector has the token width `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    context: Vec<Vec<f64>>,
    class_tokens: Arc<Vec<Vec<f64>>>,
}

impl PromptContext {
    pub fn new(context: Vec<Vec<f64>>, class_tokens: Arc<Vec<Vec<f64>>>) -> Result<Self> {
        let width = context
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("a prompt needs at least one context vector"))?;
        if width == 0
            || context.iter().any(|v| v.len() != width)
            || class_tokens.iter().any(|v| v.len() != width)
        {
            return Err(Error::invalid("context vectors and class tokens must share one width"));
        }
        if context.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("context vectors must be finite"));
        }
        Ok(Self {
            context,
            class_tokens,
        })
    }

    pub fn context(&self) -> &[Vec<f64>] {
        &self.context
    }

    pub fn class_tokens(&self) -> &[Vec<f64>] {
        &self.class_tokens
    }

    pub fn num_context(&self) -> usize {
        self.context.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn width(&self) -> usize {
        self.context[0].len()
    }

    /// Mean of the context vectors.
    pub fn context_mean(&self) -> Vec<f64> {
        let m = self.context.len() as f64;
        let mut mean = vec![0.0; self.width()];
        for v in &self.context {
            for (a, x) in mean.iter_mut().zip(v) {
                *a += x / m;
            }
        }
        mean
    }

    /// One gradient-descent step on the context vectors.
    pub fn descend(&mut self, grads: &[Vec<f64>], learning_rate: f64) -> Result<()> {
        if grads.len() != self.context.len() || grads.iter().any(|g| g.len() != self.width()) {
            return Err(Error::invalid("gradient shape does not match the prompt"));
        }
        for (v, g) in self.context.iter_mut().zip(grads) {
            for (x, d) in v.iter_mut().zip(g) {
                *x -= learning_rate * d;
            }
        }
        Ok(())
    }

    /// Largest absolute coordinate difference between the context vectors.
    pub fn max_context_diff(&self, other: &PromptContext) -> f64 {
        self.context
            .iter()
            .flatten()
            .zip(other.context.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Little-endian bytes of the class tokens.
    pub fn class_token_bytes(&self) -> Vec<u8> {
        self.class_tokens
            .iter()
            .flatten()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    /// Mutable access for finite-difference probes and tests.
    pub fn context_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.context
    }
}

/// A scalar loss over the `K` unit text embeddings.
///
/// Image embeddings are fixed for the lifetime of an adaptation step, so a
/// loss captures them and only exposes its dependence on the texts.
pub trait TextLoss {
    /// Returns the loss and `∂loss/∂z_k` for each unit text embedding `z_k`.
    fn value_and_grad(&self, texts: &[Embedding]) -> Result<(f64, Vec<Vec<f64>>)>;
}

/// Loss value together with `∂loss/∂v_i` for every context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGradient {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// An image/text encoder pair with fixed weights.
pub trait VisionLanguageModel: Send + Sync {
    /// Stable identifier, e.g. `"toy"` or `"adapter:clip-vit-b16"`.
    fn identity(&self) -> &str;

    /// Expected `(H, W, C)` input.
    fn input_shape(&self) -> (usize, usize, usize);

    /// Class names, in class-index order.
    fn labels(&self) -> &[String];

    fn num_classes(&self) -> usize {
        self.labels().len()
    }

    /// Unit-norm image embedding.
    fn encode_image(&self, x: &Image) -> Result<Embedding>;

    /// Unit-norm text embedding of class `class_index` under `prompt`.
    fn encode_text(&self, prompt: &PromptContext, class_index: usize) -> Result<Embedding>;

    /// Unit-norm embedding of a free phrase under `prompt`.
    fn encode_phrase(&self, prompt: &PromptContext, phrase: &str) -> Result<Embedding> {
        match self.labels().iter().position(|l| l == phrase) {
            Some(k) => self.encode_text(prompt, k),
            None => Err(Error::Unsupported(format!(
                "{} cannot encode phrase {phrase:?}",
                self.identity()
            ))),
        }
    }

    /// The unadapted prompt.
    fn initial_prompt(&self, seed: u64) -> PromptContext;

    fn provides_prompt_gradients(&self) -> bool;

    /// `∂loss/∂v_i` for every context vector of `prompt`.
    fn prompt_gradient(&self, prompt: &PromptContext, loss: &dyn TextLoss) -> Result<PromptGradient>;

    /// Hash of every fixed weight.
    fn fingerprint(&self) -> String;
}

pub type ModelHandle = Arc<dyn VisionLanguageModel>;

type AdapterFactory = Box<dyn Fn() -> Result<ModelHandle> + Send + Sync>;

/// Resolves `model.backend` strings of the form `adapter:<name>` to plugins
/// registered at start-up.
#[derive(Default)]
pub struct AdapterRegistry {
    factories: BTreeMap<String, AdapterFactory>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn() -> Result<ModelHandle> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, name: &str) -> Result<ModelHandle> {
        match self.factories.get(name) {
            Some(f) => f(),
            None => Err(Error::Unsupported(format!(
                "no model adapter registered under {name:?}"
            ))),
        }
    }
}
