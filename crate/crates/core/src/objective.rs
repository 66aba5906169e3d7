//! Differentiable prompt objectives over fixed image embeddings.
//!
//! Each term maps the `K` unit text embeddings to a scalar and returns its
//! gradient with respect to those embeddings; the model backend chains that
//! through its text encoder to the context vectors.

use crate::dist::log_softmax;
use crate::error::{Error, Result};
use crate::model::{dot, Embedding, TextLoss};

/// One weighted loss term.
#[derive(Debug, Clone)]
pub enum LossTerm {
    /// Mean over images of `KL(p(y|x) || uniform)`.
    UniformKl { weight: f64, images: Vec<Embedding> },
    /// Entropy of the mean prediction over images.
    MarginalEntropy { weight: f64, images: Vec<Embedding> },
}

/// Weighted sum of [`LossTerm`]s at a fixed temperature.
#[derive(Debug, Clone)]
pub struct PromptObjective {
    temperature: f64,
    terms: Vec<LossTerm>,
}

impl PromptObjective {
    pub fn new(temperature: f64) -> Self {
        Self {
            temperature,
            terms: Vec::new(),
        }
    }

    pub fn with_term(mut self, term: LossTerm) -> Self {
        self.terms.push(term);
        self
    }

    pub fn terms(&self) -> &[LossTerm] {
        &self.terms
    }

    /// Loss value only.
    pub fn value(&self, texts: &[Embedding]) -> Result<f64> {
        Ok(self.value_and_grad(texts)?.0)
    }

    fn log_probs(&self, image: &Embedding, texts: &[Embedding]) -> Vec<f64> {
        let logits: Vec<f64> = texts
            .iter()
            .map(|t| image.dot(t) / self.temperature)
            .collect();
        log_softmax(&logits)
    }

    /// Adds `Σ_k dlogit_k · e / τ` to each text gradient.
    fn push_image_grad(&self, grads: &mut [Vec<f64>], image: &Embedding, dlogits: &[f64]) {
        for (g, dl) in grads.iter_mut().zip(dlogits) {
            if *dl == 0.0 {
                continue;
            }
            let scale = dl / self.temperature;
            for (a, e) in g.iter_mut().zip(image.values()) {
                *a += scale * e;
            }
        }
    }

    fn uniform_kl(&self, weight: f64, images: &[Embedding], texts: &[Embedding], grads: &mut [Vec<f64>]) -> f64 {
        let k = texts.len() as f64;
        let n = images.len() as f64;
        let mut total = 0.0;
        for image in images {
            let logp = self.log_probs(image, texts);
            let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let neg_entropy: f64 = p.iter().zip(&logp).map(|(p, l)| p * l).sum();
            total += neg_entropy + k.ln();
            // d/dl_j Σ p ln p = p_j (ln p_j - Σ p ln p)
            let dlogits: Vec<f64> = p
                .iter()
                .zip(&logp)
                .map(|(pj, lj)| weight / n * pj * (lj - neg_entropy))
                .collect();
            self.push_image_grad(grads, image, &dlogits);
        }
        weight * total / n
    }

    fn marginal_entropy(&self, weight: f64, images: &[Embedding], texts: &[Embedding], grads: &mut [Vec<f64>]) -> f64 {
        let n = images.len() as f64;
        let probs: Vec<Vec<f64>> = images
            .iter()
            .map(|e| self.log_probs(e, texts).into_iter().map(f64::exp).collect())
            .collect();
        let mut mean = vec![0.0; texts.len()];
        for p in &probs {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x / n;
            }
        }
        let h: f64 = mean.iter().filter(|&&m| m > 0.0).map(|m| -m * m.ln()).sum();
        // dH/dp̄_k = -(ln p̄_k + 1); a class with p̄_k = 0 has p_vk = 0 in every view.
        let dmean: Vec<f64> = mean
            .iter()
            .map(|&m| if m > 0.0 { -(m.ln() + 1.0) } else { 0.0 })
            .collect();
        for (image, p) in images.iter().zip(&probs) {
            let inner = dot(p, &dmean);
            let dlogits: Vec<f64> = p
                .iter()
                .zip(&dmean)
                .map(|(pj, gj)| weight / n * pj * (gj - inner))
                .collect();
            self.push_image_grad(grads, image, &dlogits);
        }
        weight * h
    }
}

impl TextLoss for PromptObjective {
    fn value_and_grad(&self, texts: &[Embedding]) -> Result<(f64, Vec<Vec<f64>>)> {
        let dim = texts
            .first()
            .map(Embedding::dim)
            .ok_or_else(|| Error::invalid("objective needs at least one text embedding"))?;
        let mut grads = vec![vec![0.0; dim]; texts.len()];
        let mut total = 0.0;
        for term in &self.terms {
            total += match term {
                LossTerm::UniformKl { weight, images } if !images.is_empty() => {
                    self.uniform_kl(*weight, images, texts, &mut grads)
                }
                LossTerm::MarginalEntropy { weight, images } if !images.is_empty() => {
                    self.marginal_entropy(*weight, images, texts, &mut grads)
                }
                _ => return Err(Error::invalid("loss term without images")),
            };
        }
        Ok((total, grads))
    }
}
