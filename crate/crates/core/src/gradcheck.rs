//! Finite-difference verification of the analytic prompt gradients.
//!
//! Each check pairs a seeded random prompt with a test sample, builds the
//! full adaptation objective (erase plus keep terms) for that sample, and
//! compares the backend's analytic `∂L/∂v_i` with central differences
//! `(L(v + h e) - L(v - h e)) / 2h` over every context coordinate.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::eraser::{AdaptationSession, EraserConfig, SampleInput};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{PromptContext, TextLoss};
use crate::seed::derive_indexed;
use crate::zeroshot::ZeroShot;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub pairs: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Standard deviation of the noise added to the initial prompt's context
    /// coordinates, so checks also cover prompts away from initialization.
    pub prompt_noise: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            pairs: 50,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            prompt_noise: 0.1,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::invalid("gradcheck.pairs must be >= 1"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("gradcheck.step must be positive"));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::invalid("gradcheck.tolerance must be positive"));
        }
        if !(self.prompt_noise >= 0.0 && self.prompt_noise.is_finite()) {
            return Err(Error::invalid("gradcheck.prompt_noise must be non-negative"));
        }
        Ok(())
    }
}

/// Result of one (prompt, sample) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub sample_id: String,
    pub loss: f64,
    pub analytic_norm: f64,
    /// `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)`, or the
    /// absolute difference when both norms are below `1e-12`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub pairs: Vec<PairCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central-difference gradient of `loss` with respect to every context
/// coordinate of `prompt`.
pub fn numeric_gradient(
    zs: &ZeroShot<'_>,
    prompt: &PromptContext,
    loss: &dyn TextLoss,
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let eval = |p: &PromptContext| -> Result<f64> { Ok(loss.value_and_grad(&zs.text_embeddings(p)?)?.0) };
    let mut work = prompt.clone();
    let mut grads = vec![vec![0.0; prompt.width()]; prompt.num_context()];
    for (i, row) in grads.iter_mut().enumerate() {
        for (j, g) in row.iter_mut().enumerate() {
            let orig = work.context()[i][j];
            work.context_mut()[i][j] = orig + step;
            let plus = eval(&work)?;
            work.context_mut()[i][j] = orig - step;
            let minus = eval(&work)?;
            work.context_mut()[i][j] = orig;
            *g = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// Norm-wise relative error between two gradients.
pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let sq = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let diff = sq(&mut a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x - y));
    let scale = sq(&mut a.iter().flatten().copied()).max(sq(&mut b.iter().flatten().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Runs `cfg.pairs` checks. Pair `i` draws its sample and prompt noise from
/// a seed derived from `(cfg.seed, i)`, so reports are reproducible.
pub fn run_gradcheck(
    zs: &ZeroShot<'_>,
    samples: &[SampleInput<'_>],
    eraser: &EraserConfig,
    reference_pool: &[Image],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    let model = zs.model();
    if !model.provides_prompt_gradients() {
        return Err(Error::Unsupported(format!(
            "{} does not provide prompt gradients",
            model.identity()
        )));
    }
    if samples.is_empty() {
        return Err(Error::invalid("gradient check needs at least one sample"));
    }
    let noise = Normal::new(0.0, cfg.prompt_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(cfg.seed, "gradcheck", i as u64));
        let sample = samples.choose(&mut rng).expect("non-empty");
        let mut prompt = model.initial_prompt(derive_indexed(cfg.seed, "gradcheck-prompt", i as u64));
        for v in prompt.context_mut().iter_mut().flatten() {
            *v += noise.sample(&mut rng);
        }

        let session = AdaptationSession::new(*zs, prompt.clone(), eraser, reference_pool)?;
        let aux: Vec<Image> = session
            .build_auxiliary(sample)?
            .into_iter()
            .flat_map(|s| s.images)
            .collect();
        let keep = if eraser.keep_weight > 0.0 {
            zs.encode_images(&session.keep_views(sample)?)?
        } else {
            Vec::new()
        };
        let objective = session.objective(&zs.encode_images(&aux)?, &keep);

        let analytic = model.prompt_gradient(&prompt, &objective)?;
        let numeric = numeric_gradient(zs, &prompt, &objective, cfg.step)?;
        pairs.push(PairCheck {
            sample_id: sample.id.to_string(),
            loss: analytic.loss,
            analytic_norm: analytic.grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt(),
            relative_error: relative_error(&analytic.grads, &numeric),
        });
    }
    let max_relative_error = pairs.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_relative_error <= cfg.tolerance,
        max_relative_error,
        tolerance: cfg.tolerance,
        pairs,
    })
}
