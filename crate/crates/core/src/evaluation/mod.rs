//! Grouped evaluation: average and worst-group accuracy of a test-time
//! method over a manifest.

mod hard;
mod manifest;
mod report;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{mask_predict, tpt_predict, vanilla_predict, TptConfig};
use crate::eraser::{AdaptationSession, EraserConfig, SampleInput};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{PromptContext, VisionLanguageModel};
use crate::zeroshot::ZeroShot;

pub use hard::{confusion_matrix, hard_subset_from_confusion, select_hard_subset, WORST_CLASSES};
pub use manifest::{
    load_images, load_samples, read_manifest, write_dataset, write_manifest, DatasetEntry, GroupedSample, LoadedSample,
};
pub use report::{read_report, write_report, GroupReport, GroupStats, SampleRecord, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    Mask,
    Tpt,
    Seraser,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vanilla, Method::Mask, Method::Tpt, Method::Seraser];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Mask => "mask",
            Method::Tpt => "tpt",
            Method::Seraser => "seraser",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}; expected vanilla, mask, tpt or seraser")))
    }
}

/// Everything that determines an evaluation's predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub method: Method,
    pub temperature: f64,
    pub eraser: EraserConfig,
    pub tpt: TptConfig,
    /// Seeds the initial prompt and every per-sample random draw; overrides
    /// the seeds inside `eraser` and `tpt`.
    pub seed: u64,
    /// Worker threads. Results do not depend on it.
    pub parallelism: usize,
    /// Record failing samples as errored instead of aborting.
    pub skip_errors: bool,
}

impl EvalSettings {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            temperature: crate::dist::DEFAULT_TEMPERATURE,
            eraser: EraserConfig::default(),
            tpt: TptConfig::default(),
            seed: 0,
            parallelism: 1,
            skip_errors: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::invalid("parallelism must be >= 1"));
        }
        self.eraser.validate()?;
        self.tpt.validate()
    }

    fn effective_eraser(&self) -> EraserConfig {
        EraserConfig {
            seed: self.seed,
            ..self.eraser.clone()
        }
    }

    fn effective_tpt(&self) -> TptConfig {
        TptConfig {
            seed: self.seed,
            ..self.tpt.clone()
        }
    }

    /// SHA-256 over the settings that affect predictions and the model's
    /// weight fingerprint.
    pub fn fingerprint(&self, model_fingerprint: &str) -> String {
        #[derive(Serialize)]
        struct Canon<'a> {
            model: &'a str,
            method: Method,
            temperature: f64,
            eraser: &'a EraserConfig,
            tpt: &'a TptConfig,
            seed: u64,
            skip_errors: bool,
        }
        let canon = Canon {
            model: model_fingerprint,
            method: self.method,
            temperature: self.temperature,
            eraser: &self.eraser,
            tpt: &self.tpt,
            seed: self.seed,
            skip_errors: self.skip_errors,
        };
        let bytes = serde_json::to_vec(&canon).expect("settings serialize");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn run_sample(
    zs: &ZeroShot<'_>,
    prompt: &PromptContext,
    sample: &LoadedSample,
    method: Method,
    eraser: &EraserConfig,
    tpt: &TptConfig,
    reference_pool: &[Image],
) -> Result<SampleRecord> {
    let mut record = SampleRecord {
        id: sample.id.clone(),
        group: sample.group.clone(),
        label: sample.label.clone(),
        predicted: None,
        probs: None,
        error: None,
        eraser: None,
        tpt: None,
    };
    let dist = match method {
        Method::Vanilla => vanilla_predict(zs, prompt, &sample.image)?,
        Method::Mask => {
            let mask = sample.mask.as_ref().ok_or_else(|| Error::StrategyUnavailable {
                sample_id: sample.id.clone(),
                strategy: "mask".into(),
                missing: "mask".into(),
            })?;
            mask_predict(zs, prompt, &sample.image, mask)?
        }
        Method::Tpt => {
            let (d, diag) = tpt_predict(zs, prompt, &sample.image, tpt, &sample.id)?;
            record.tpt = Some(diag);
            d
        }
        Method::Seraser => {
            let mut session = AdaptationSession::new(*zs, prompt.clone(), eraser, reference_pool)?;
            let input = SampleInput {
                id: &sample.id,
                image: &sample.image,
                mask: sample.mask.as_ref(),
            };
            let pred = session.predict(&input)?;
            record.eraser = Some(pred.diagnostics);
            pred.distribution
        }
    };
    record.predicted = Some(dist.labels()[dist.argmax()].clone());
    record.probs = Some(dist.probs().to_vec());
    Ok(record)
}

/// Runs `settings.method` on every sample and aggregates per group.
///
/// Samples are independent: each one starts from the same initial prompt
/// and derives its random draws from `(settings.seed, sample id)`, so the
/// report does not depend on manifest order or on `parallelism`.
pub fn evaluate(
    model: &dyn VisionLanguageModel,
    samples: &[LoadedSample],
    settings: &EvalSettings,
    reference_pool: &[Image],
) -> Result<GroupReport> {
    settings.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("manifest has no samples"));
    }
    let labels = model.labels();
    if let Some(s) = samples.iter().find(|s| !labels.contains(&s.label)) {
        return Err(Error::invalid(format!("sample {}: label {:?} unknown to the model", s.id, s.label)));
    }
    let zs = ZeroShot::new(model, settings.temperature)?;
    let prompt = model.initial_prompt(settings.seed);
    let eraser = settings.effective_eraser();
    let tpt = settings.effective_tpt();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.parallelism)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let mut results: Vec<(String, Result<SampleRecord>)> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let r = run_sample(&zs, &prompt, s, settings.method, &eraser, &tpt, reference_pool);
                (s.id.clone(), r)
            })
            .collect()
    });
    results.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = results.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid(format!("duplicate sample id {:?}", w[0].0)));
    }

    let mut records = Vec::with_capacity(results.len());
    for ((id, result), sample) in results.into_iter().zip(sorted(samples)) {
        match result {
            Ok(r) => records.push(r),
            Err(e) if settings.skip_errors => records.push(SampleRecord {
                id: id.clone(),
                group: sample.group.clone(),
                label: sample.label.clone(),
                predicted: None,
                probs: None,
                error: Some(e.for_sample(&id).to_string()),
                eraser: None,
                tpt: None,
            }),
            Err(e) => return Err(e.for_sample(&id)),
        }
    }
    GroupReport::from_records(
        settings.method,
        model.identity().to_string(),
        settings.seed,
        settings.fingerprint(&model.fingerprint()),
        records,
    )
}

fn sorted(samples: &[LoadedSample]) -> Vec<&LoadedSample> {
    let mut v: Vec<&LoadedSample> = samples.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}
