//! Run configuration: one JSON document with `model`, `eraser`, `tpt`,
//! `eval` and `output` sections. Every field has a default, unknown keys
//! are rejected, and validation errors name the offending field path.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::TptConfig;
use crate::eraser::EraserConfig;
use crate::error::{Error, Result};
use crate::evaluation::{EvalSettings, Method};
use crate::model::{AdapterRegistry, ModelHandle, ToyWorld, ToyWorldSpec, TOY_IMAGE_SIZE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backend {
    Toy,
    Adapter(String),
}

impl Backend {
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "toy" => Ok(Backend::Toy),
            Some(("adapter", name)) if !name.is_empty() => Ok(Backend::Adapter(name.to_string())),
            _ => Err(Error::invalid(format!("expected \"toy\" or \"adapter:<name>\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `"toy"` or `"adapter:<name>"`.
    pub backend: String,
    /// Square input side in pixels.
    pub input_size: usize,
    pub temperature: f64,
    /// World used by the toy backend.
    pub toy: ToyWorldSpec,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            input_size: TOY_IMAGE_SIZE,
            temperature: crate::dist::DEFAULT_TEMPERATURE,
            toy: ToyWorldSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub manifest: Option<PathBuf>,
    pub method: Method,
    pub skip_errors: bool,
    pub parallelism: usize,
    pub seed: u64,
    /// Manifest whose images form the pool for the reference strategy.
    pub reference_pool: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            manifest: None,
            method: Method::Vanilla,
            skip_errors: false,
            parallelism: 1,
            seed: 0,
            reference_pool: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub eraser: EraserConfig,
    pub tpt: TptConfig,
    pub eval: EvalSection,
    /// Report path.
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let location = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text, &location)?;
        cfg.validate(&location)?;
        Ok(cfg)
    }

    /// Parses without validating. Parse errors carry the field path.
    pub fn from_json(text: &str, location: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let (line, column) = (inner.line(), inner.column());
            let full = inner.to_string();
            let detail = full
                .strip_suffix(&format!(" at line {line} column {column}"))
                .unwrap_or(&full);
            Error::Parse {
                location: location.to_string(),
                line,
                column,
                message: if path == "." {
                    detail.to_string()
                } else {
                    format!("{path}: {detail}")
                },
            }
        })
    }

    pub fn validate(&self, location: &str) -> Result<()> {
        let fail = |field: &str, message: String| {
            Err(Error::Validation {
                location: location.to_string(),
                field: field.to_string(),
                message,
            })
        };
        let backend = match Backend::parse(&self.model.backend) {
            Ok(b) => b,
            Err(e) => return fail("model.backend", e.to_string()),
        };
        if !(self.model.temperature > 0.0 && self.model.temperature.is_finite()) {
            return fail("model.temperature", format!("must be positive, got {}", self.model.temperature));
        }
        if self.model.input_size == 0 {
            return fail("model.input_size", "must be positive".into());
        }
        if backend == Backend::Toy {
            if self.model.input_size != TOY_IMAGE_SIZE {
                return fail(
                    "model.input_size",
                    format!("the toy backend takes {TOY_IMAGE_SIZE}x{TOY_IMAGE_SIZE} images"),
                );
            }
            if let Err(e) = self.model.toy.validate() {
                return fail("model.toy", e.to_string());
            }
        }
        if let Err(e) = self.eraser.validate() {
            return fail("eraser", e.to_string());
        }
        if let Err(e) = self.tpt.validate() {
            return fail("tpt", e.to_string());
        }
        if self.eval.parallelism == 0 {
            return fail("eval.parallelism", "must be >= 1".into());
        }
        Ok(())
    }

    /// The model named by `model.backend`.
    pub fn resolve_model(&self, adapters: &AdapterRegistry) -> Result<ModelHandle> {
        match Backend::parse(&self.model.backend)? {
            Backend::Toy => {
                let handle: ModelHandle = ToyWorld::new(self.model.toy.clone())?.model();
                Ok(handle)
            }
            Backend::Adapter(name) => {
                let handle = adapters.create(&name)?;
                let (h, w, _) = handle.input_shape();
                if (h, w) != (self.model.input_size, self.model.input_size) {
                    return Err(Error::invalid(format!(
                        "adapter {name} expects {h}x{w} inputs but model.input_size is {}",
                        self.model.input_size
                    )));
                }
                Ok(Arc::clone(&handle))
            }
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            method: self.eval.method,
            temperature: self.model.temperature,
            eraser: self.eraser.clone(),
            tpt: self.tpt.clone(),
            seed: self.eval.seed,
            parallelism: self.eval.parallelism,
            skip_errors: self.eval.skip_errors,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::from_json("{}", "t").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.temperature, 0.01);
        assert_eq!(c.eval.parallelism, 1);
        c.validate("t").unwrap();
    }

    #[test]
    fn unknown_keys_report_path() {
        match RunConfig::from_json("{\n  \"eval\": {\"paralelism\": 2}\n}", "c.json") {
            Err(Error::Parse { message, line, .. }) => {
                assert!(message.starts_with("eval"), "{message}");
                assert!(message.contains("paralelism"));
                assert_eq!(line, 2);
            }
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_json("{\"eraser\": {\"steps\": \"x\"}}", "c").is_err());
    }

    #[test]
    fn validation_names_fields() {
        let field = |json: &str| match RunConfig::from_json(json, "c").unwrap().validate("c") {
            Err(Error::Validation { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(r#"{"eval": {"parallelism": 0}}"#), "eval.parallelism");
        assert_eq!(field(r#"{"model": {"temperature": 0}}"#), "model.temperature");
        assert_eq!(field(r#"{"model": {"backend": "clip"}}"#), "model.backend");
        assert_eq!(field(r#"{"model": {"input_size": 224}}"#), "model.input_size");
        assert_eq!(field(r#"{"model": {"toy": {"correlation": 0.2}}}"#), "model.toy");
        assert_eq!(field(r#"{"eraser": {"steps": 0}}"#), "eraser");
        assert_eq!(field(r#"{"tpt": {"confidence_fraction": 0}}"#), "tpt");
    }

    #[test]
    fn backends() {
        assert_eq!(Backend::parse("toy").unwrap(), Backend::Toy);
        assert_eq!(Backend::parse("adapter:clip").unwrap(), Backend::Adapter("clip".into()));
        assert!(Backend::parse("adapter:").is_err());
        let mut c = RunConfig::default();
        c.model.backend = "adapter:clip".into();
        assert!(matches!(c.resolve_model(&AdapterRegistry::new()), Err(Error::Unsupported(_))));
        let toy = RunConfig::default().resolve_model(&AdapterRegistry::new()).unwrap();
        assert_eq!(toy.identity(), "toy");
    }
}
