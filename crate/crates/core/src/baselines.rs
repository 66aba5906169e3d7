//! Comparison methods: vanilla zero-shot, MASK (classify the boxed
//! foreground only) and TPT-style entropy minimization over confident views.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::auxiliary::extract_foreground;
use crate::dist::{entropy, PredictionDistribution};
use crate::error::{Error, Result};
use crate::image::{ForegroundMask, Image};
use crate::model::PromptContext;
use crate::objective::{LossTerm, PromptObjective};
use crate::seed::derive_seed;
use crate::zeroshot::ZeroShot;

/// Zero-shot prediction with the unadapted prompt.
pub fn vanilla_predict(zs: &ZeroShot<'_>, prompt: &PromptContext, x: &Image) -> Result<PredictionDistribution> {
    zs.predict(prompt, x)
}

/// Zero-shot prediction on the image with everything outside the
/// foreground boxes blacked out.
pub fn mask_predict(
    zs: &ZeroShot<'_>,
    prompt: &PromptContext,
    x: &Image,
    mask: &ForegroundMask,
) -> Result<PredictionDistribution> {
    zs.predict(prompt, &extract_foreground(x, mask)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TptConfig {
    pub num_views: usize,
    /// Fraction of views kept, lowest entropy first.
    pub confidence_fraction: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TptConfig {
    fn default() -> Self {
        Self {
            num_views: 32,
            confidence_fraction: 0.1,
            steps: 1,
            learning_rate: 5e-3,
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl TptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 {
            return Err(Error::invalid("tpt.num_views must be >= 1"));
        }
        if !(self.confidence_fraction > 0.0 && self.confidence_fraction <= 1.0) {
            return Err(Error::invalid("tpt.confidence_fraction must lie in (0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("tpt.learning_rate must be positive"));
        }
        self.augment.validate()
    }
}

/// `ceil(ρ·n)`, guarded against products like `0.3 * 10 = 3.0000000000000004`.
pub fn retained_view_count(fraction: f64, num_views: usize) -> usize {
    let raw = fraction * num_views as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(num_views)
}

/// Indices of the `ceil(ρ·n)` lowest-entropy views; ties by view index.
/// Returned in ascending entropy order.
pub fn select_confident_views(dists: &[PredictionDistribution], fraction: f64) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = dists.iter().map(entropy).enumerate().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    order
        .into_iter()
        .take(retained_view_count(fraction, dists.len()))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TptDiagnostics {
    pub retained_views: Vec<usize>,
    pub loss_trace: Vec<f64>,
}

/// Test-time prompt tuning: minimize the entropy of the averaged prediction
/// over the most confident augmented views, then classify `x`. The caller's
/// prompt is not modified.
pub fn tpt_predict(
    zs: &ZeroShot<'_>,
    prompt: &PromptContext,
    x: &Image,
    cfg: &TptConfig,
    sample_id: &str,
) -> Result<(PredictionDistribution, TptDiagnostics)> {
    cfg.validate()?;
    let model = zs.model();
    if cfg.steps > 0 && !model.provides_prompt_gradients() {
        return Err(Error::Unsupported(format!(
            "{} does not provide prompt gradients",
            model.identity()
        )));
    }
    let views = cfg.augment.views(x, cfg.num_views, derive_seed(cfg.seed, sample_id, "tpt"));
    let embs = zs.encode_images(&views)?;
    let texts = zs.text_embeddings(prompt)?;
    let dists = embs
        .iter()
        .map(|e| zs.distribution(e, &texts))
        .collect::<Result<Vec<_>>>()?;
    let retained = select_confident_views(&dists, cfg.confidence_fraction);
    let objective = PromptObjective::new(zs.temperature()).with_term(LossTerm::MarginalEntropy {
        weight: 1.0,
        images: retained.iter().map(|&i| embs[i].clone()).collect(),
    });

    let mut tuned = prompt.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let g = model.prompt_gradient(&tuned, &objective)?;
        if !g.loss.is_finite() || g.grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                step,
                detail: format!("loss = {}", g.loss),
            });
        }
        trace.push(g.loss);
        tuned.descend(&g.grads, cfg.learning_rate)?;
    }
    let final_texts = zs.text_embeddings(&tuned)?;
    trace.push(objective.value(&final_texts)?);
    let dist = zs.distribution(&model.encode_image(x)?, &final_texts)?;
    Ok((
        dist,
        TptDiagnostics {
            retained_views: retained,
            loss_trace: trace,
        },
    ))
}
