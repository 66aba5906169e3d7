//! Shortcut-to-evaluate dataset construction.
//!
//! Two classes that are habitually seen in different contexts swap
//! contexts: each class is generated in the other's habitat, images that do
//! not visibly contain the subject are filtered out with a zero-shot
//! presence check, and the survivors are written as an evaluation manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{softmax_from_similarities, SimilarityVector};
use crate::error::{Error, Result};
use crate::evaluation::{write_dataset, DatasetEntry};
use crate::image::{ForegroundMask, Image};
use crate::model::{PromptContext, ToyModel, ToyWorld, ToyWorldSpec, BACKGROUND_ONLY};
use crate::seed::{derive_indexed, derive_seed};
use crate::zeroshot::ZeroShot;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Two confusable classes and the context each is habitually seen in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPair {
    pub class_a: String,
    pub class_b: String,
    pub association_a: String,
    pub association_b: String,
}

impl ClassPair {
    pub fn validate(&self) -> Result<()> {
        if self.class_a.trim().is_empty() || self.class_b.trim().is_empty() {
            return Err(Error::invalid("class names must be non-empty"));
        }
        if self.class_a == self.class_b {
            return Err(Error::invalid(format!("pair repeats class {:?}", self.class_a)));
        }
        if self.association_a.trim().is_empty() || self.association_b.trim().is_empty() {
            return Err(Error::invalid("associations must be non-empty"));
        }
        Ok(())
    }
}

/// Reads a JSON list of class pairs.
pub fn read_pairs(path: &Path) -> Result<Vec<ClassPair>> {
    let location = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pairs: Vec<ClassPair> = serde_json::from_str(&text).map_err(|e| Error::parse(&location, &e))?;
    if pairs.is_empty() {
        return Err(Error::Validation {
            location,
            field: "pairs".into(),
            message: "no class pairs".into(),
        });
    }
    for (i, p) in pairs.iter().enumerate() {
        p.validate().map_err(|e| Error::Validation {
            location: location.clone(),
            field: format!("[{i}]"),
            message: e.to_string(),
        })?;
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub subject: String,
    /// The other class's habitual context.
    pub context: String,
    pub prompt: String,
    pub count: usize,
    pub seed: u64,
}

pub fn render_prompt(class: &str, context: &str) -> String {
    format!("a photo of a {class} in {context}")
}

fn request(subject: &str, context: &str, count: usize, seed: u64) -> GenerationRequest {
    GenerationRequest {
        subject: subject.to_string(),
        context: context.to_string(),
        prompt: render_prompt(subject, context),
        count,
        seed: derive_seed(seed, &format!("{subject}\u{1f}{context}"), "s2e-request"),
    }
}

/// Each class of the pair placed in the other class's context.
pub fn swap_associations(p: &ClassPair, count: usize, seed: u64) -> Result<(GenerationRequest, GenerationRequest)> {
    p.validate()?;
    Ok((
        request(&p.class_a, &p.association_b, count, seed),
        request(&p.class_b, &p.association_a, count, seed),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub image: Image,
    /// Subject extent, when the generator knows it.
    pub mask: Option<ForegroundMask>,
}

/// An image generator, e.g. a text-to-image service behind a plugin.
pub trait GeneratorClient: Send + Sync {
    fn identity(&self) -> &str;

    /// Exactly `req.count` images for the request.
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GeneratedImage>>;
}

/// Runs `client` on `req`, echoing the request in any failure.
pub fn generate_images(client: &dyn GeneratorClient, req: &GenerationRequest) -> Result<Vec<GeneratedImage>> {
    if req.count == 0 {
        return Err(Error::invalid("generation count must be >= 1"));
    }
    let fail = |message: String| Error::Generation {
        request: format!("{:?} x{} (seed {})", req.prompt, req.count, req.seed),
        message,
    };
    let images = client
        .generate(req)
        .map_err(|e| fail(format!("{}: {e}", client.identity())))?;
    if images.len() != req.count {
        return Err(fail(format!("{} returned {} images", client.identity(), images.len())));
    }
    Ok(images)
}

/// Offline generator: renders the toy-world glyph of the subject over the
/// texture of the requested context. Every `decoy_every`-th image omits the
/// glyph, standing in for generations that miss the subject.
#[derive(Debug)]
pub struct StubGenerator {
    world: ToyWorld,
    decoy_every: Option<usize>,
}

impl StubGenerator {
    /// One toy class per distinct class name and one texture per distinct
    /// context; each class habitually appears in its own association.
    pub fn from_pairs(pairs: &[ClassPair], seed: u64, decoy_every: Option<usize>) -> Result<Self> {
        if decoy_every == Some(0) {
            return Err(Error::invalid("decoy_every must be >= 1"));
        }
        Ok(Self {
            world: ToyWorld::new(Self::world_spec(pairs, seed)?)?,
            decoy_every,
        })
    }

    /// The toy world a stub built from `pairs` renders from.
    pub fn world_spec(pairs: &[ClassPair], seed: u64) -> Result<ToyWorldSpec> {
        if pairs.is_empty() {
            return Err(Error::invalid("no class pairs"));
        }
        let mut classes: Vec<String> = Vec::new();
        let mut contexts: Vec<String> = Vec::new();
        let mut home: BTreeMap<String, String> = BTreeMap::new();
        for p in pairs {
            p.validate()?;
            for (class, ctx) in [(&p.class_a, &p.association_a), (&p.class_b, &p.association_b)] {
                match home.get(class) {
                    Some(prev) if prev != ctx => {
                        return Err(Error::invalid(format!(
                            "class {class:?} is associated with both {prev:?} and {ctx:?}"
                        )))
                    }
                    Some(_) => {}
                    None => {
                        home.insert(class.clone(), ctx.clone());
                        classes.push(class.clone());
                    }
                }
                if !contexts.contains(ctx) {
                    contexts.push(ctx.clone());
                }
            }
        }
        let habitual = classes
            .iter()
            .map(|c| contexts.iter().position(|x| *x == home[c]).expect("context recorded"))
            .collect();
        Ok(ToyWorldSpec {
            num_classes: classes.len(),
            num_backgrounds: contexts.len(),
            class_names: Some(classes),
            background_names: Some(contexts),
            habitual_backgrounds: Some(habitual),
            seed,
            ..ToyWorldSpec::default()
        })
    }

    pub fn world(&self) -> &ToyWorld {
        &self.world
    }

    /// The toy model matching the rendered images.
    pub fn model(&self) -> Arc<ToyModel> {
        self.world.model()
    }
}

impl GeneratorClient for StubGenerator {
    fn identity(&self) -> &str {
        "stub"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GeneratedImage>> {
        let class = self
            .world
            .class_index(&req.subject)
            .ok_or_else(|| Error::invalid(format!("unknown subject {:?}", req.subject)))?;
        let background = self
            .world
            .background_index(&req.context)
            .ok_or_else(|| Error::invalid(format!("unknown context {:?}", req.context)))?;
        Ok((0..req.count)
            .map(|i| {
                let decoy = self.decoy_every.is_some_and(|n| (i + 1) % n == 0);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(req.seed, "s2e-image", i as u64));
                let (image, mask) = self.world.render((!decoy).then_some(class), background, &mut rng);
                GeneratedImage {
                    image,
                    mask: (!decoy).then_some(mask),
                }
            })
            .collect())
    }
}

type GeneratorFactory = Box<dyn Fn(&[ClassPair], u64) -> Result<Box<dyn GeneratorClient>> + Send + Sync>;

/// Resolves `plugin:<name>` clients registered at start-up.
#[derive(Default)]
pub struct GeneratorRegistry {
    factories: BTreeMap<String, GeneratorFactory>,
}

impl GeneratorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn(&[ClassPair], u64) -> Result<Box<dyn GeneratorClient>> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn create(&self, name: &str, pairs: &[ClassPair], seed: u64) -> Result<Box<dyn GeneratorClient>> {
        match self.factories.get(name) {
            Some(f) => f(pairs, seed),
            None => Err(Error::Unsupported(format!("no generator plugin registered under {name:?}"))),
        }
    }
}

/// Presence decision for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub index: usize,
    /// Probability of the subject against "background only".
    pub score: f64,
    pub kept: bool,
}

/// Zero-shot probability that `image` shows `subject` rather than only
/// background: a two-way softmax over the two phrases' similarities.
pub fn presence_score(zs: &ZeroShot<'_>, prompt: &PromptContext, image: &Image, subject: &str) -> Result<f64> {
    let model = zs.model();
    let img = model.encode_image(image)?;
    let sims = vec![
        img.cosine(&model.encode_phrase(prompt, subject)?),
        img.cosine(&model.encode_phrase(prompt, BACKGROUND_ONLY)?),
    ];
    let s = SimilarityVector::new(sims, zs.temperature())?;
    let d = softmax_from_similarities(&s, &[subject.to_string(), BACKGROUND_ONLY.to_string()])?;
    Ok(d.probs()[0])
}

/// Keeps images whose presence score strictly exceeds `threshold`.
pub fn filter_images(
    zs: &ZeroShot<'_>,
    prompt: &PromptContext,
    images: &[Image],
    subject: &str,
    threshold: f64,
) -> Result<Vec<FilterDecision>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1], got {threshold}")));
    }
    images
        .iter()
        .enumerate()
        .map(|(index, img)| {
            let score = presence_score(zs, prompt, img, subject)?;
            Ok(FilterDecision {
                index,
                score,
                kept: score > threshold,
            })
        })
        .collect()
}

/// A kept image ready for emission.
#[derive(Debug, Clone, PartialEq)]
pub struct EmitEntry {
    pub image: Image,
    pub mask: Option<ForegroundMask>,
    pub label: String,
    pub group: String,
}

pub fn group_name(class: &str, context: &str) -> String {
    format!("{class}_{context}")
}

/// Writes the kept images as `s2e-<n>` samples with a manifest under
/// `out_dir`; returns the manifest path.
pub fn emit_manifest(entries: &[EmitEntry], out_dir: &Path) -> Result<PathBuf> {
    let ids: Vec<String> = (0..entries.len()).map(|i| format!("s2e-{i:05}")).collect();
    let rows: Vec<DatasetEntry<'_>> = entries
        .iter()
        .zip(&ids)
        .map(|(e, id)| DatasetEntry {
            id,
            image: &e.image,
            mask: e.mask.as_ref(),
            label: &e.label,
            group: &e.group,
        })
        .collect();
    write_dataset(out_dir, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct S2eSettings {
    /// Images requested per (class, swapped context).
    pub count: usize,
    pub threshold: f64,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for S2eSettings {
    fn default() -> Self {
        Self {
            count: 50,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            temperature: crate::dist::DEFAULT_TEMPERATURE,
        }
    }
}

/// One line of the filter log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterLogEntry {
    pub request: String,
    pub index: usize,
    pub score: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct S2eSummary {
    pub manifest: PathBuf,
    pub kept_per_group: BTreeMap<String, usize>,
    pub rejected: usize,
    pub log: Vec<FilterLogEntry>,
}

/// Swaps contexts for every pair, generates, filters against `zs` with
/// `prompt`, and emits the kept images plus `filter_log.jsonl`.
pub fn build_dataset(
    pairs: &[ClassPair],
    client: &dyn GeneratorClient,
    zs: &ZeroShot<'_>,
    prompt: &PromptContext,
    settings: &S2eSettings,
    out_dir: &Path,
) -> Result<S2eSummary> {
    let mut entries = Vec::new();
    let mut log = Vec::new();
    let mut kept_per_group = BTreeMap::new();
    for p in pairs {
        let (r1, r2) = swap_associations(p, settings.count, settings.seed)?;
        for req in [r1, r2] {
            let generated = generate_images(client, &req)?;
            let images: Vec<Image> = generated.iter().map(|g| g.image.clone()).collect();
            let decisions = filter_images(zs, prompt, &images, &req.subject, settings.threshold)?;
            let group = group_name(&req.subject, &req.context);
            let kept = kept_per_group.entry(group.clone()).or_insert(0);
            for (d, g) in decisions.iter().zip(generated) {
                log.push(FilterLogEntry {
                    request: req.prompt.clone(),
                    index: d.index,
                    score: d.score,
                    kept: d.kept,
                });
                if d.kept {
                    *kept += 1;
                    entries.push(EmitEntry {
                        image: g.image,
                        mask: g.mask,
                        label: req.subject.clone(),
                        group: group.clone(),
                    });
                }
            }
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = emit_manifest(&entries, out_dir)?;
    let log_path = out_dir.join("filter_log.jsonl");
    let mut buf = Vec::new();
    for l in &log {
        serde_json::to_writer(&mut buf, l).expect("log entries serialize");
        buf.push(b'\n');
    }
    fs::File::create(&log_path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&log_path, e))?;
    Ok(S2eSummary {
        manifest,
        rejected: log.iter().filter(|l| !l.kept).count(),
        kept_per_group,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VisionLanguageModel;

    fn camel_deer() -> ClassPair {
        ClassPair {
            class_a: "camel".into(),
            class_b: "deer".into(),
            association_a: "desert".into(),
            association_b: "grassland".into(),
        }
    }

    #[test]
    fn swap_places_each_class_in_the_other_context() {
        let (a, b) = swap_associations(&camel_deer(), 3, 0).unwrap();
        assert_eq!(a.prompt, "a photo of a camel in grassland");
        assert_eq!(b.prompt, "a photo of a deer in desert");
        assert_eq!((a.count, b.count), (3, 3));

        let same = ClassPair {
            association_b: "desert".into(),
            ..camel_deer()
        };
        let (a, b) = swap_associations(&same, 1, 0).unwrap();
        assert_eq!(a.context, b.context);
        assert_ne!(a.subject, b.subject);

        // Swapping the swapped pair restores the original contexts.
        let swapped = ClassPair {
            association_a: a.context.clone(),
            association_b: b.context.clone(),
            ..same
        };
        let (a2, b2) = swap_associations(&swapped, 1, 0).unwrap();
        assert_eq!((a2.context.as_str(), b2.context.as_str()), ("desert", "desert"));

        let bad = ClassPair {
            class_b: "camel".into(),
            ..camel_deer()
        };
        assert!(swap_associations(&bad, 1, 0).is_err());
    }

    #[test]
    fn stub_is_deterministic_with_exact_masks() {
        let stub = StubGenerator::from_pairs(&[camel_deer()], 0, Some(5)).unwrap();
        let (req, _) = swap_associations(&camel_deer(), 10, 0).unwrap();
        let a = generate_images(&stub, &req).unwrap();
        let b = generate_images(&stub, &req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|g| g.mask.is_none()).count(), 2);
        for g in a.iter().filter(|g| g.mask.is_some()) {
            assert_eq!(g.mask.as_ref().unwrap().count(), 16 * 16);
        }
        let zero = GenerationRequest { count: 0, ..req };
        assert!(generate_images(&stub, &zero).is_err());
    }

    #[test]
    fn threshold_extremes() {
        let stub = StubGenerator::from_pairs(&[camel_deer()], 0, Some(2)).unwrap();
        let model = stub.model();
        let zs = ZeroShot::new(model.as_ref(), 0.01).unwrap();
        let prompt = model.initial_prompt(0);
        let (req, _) = swap_associations(&camel_deer(), 6, 0).unwrap();
        let imgs: Vec<Image> = generate_images(&stub, &req).unwrap().into_iter().map(|g| g.image).collect();
        let all = filter_images(&zs, &prompt, &imgs, "camel", f64::MIN_POSITIVE).unwrap();
        assert!(all.iter().all(|d| d.kept));
        let none = filter_images(&zs, &prompt, &imgs, "camel", 1.0).unwrap();
        assert!(none.iter().all(|d| !d.kept));
        assert!(filter_images(&zs, &prompt, &imgs, "camel", 0.0).is_err());
    }

    #[test]
    fn conflicting_associations_rejected() {
        let other = ClassPair {
            class_a: "camel".into(),
            class_b: "crab".into(),
            association_a: "beach".into(),
            association_b: "sea".into(),
        };
        assert!(StubGenerator::from_pairs(&[camel_deer(), other], 0, None).is_err());
    }

    #[test]
    fn unknown_plugin_is_unsupported() {
        let reg = GeneratorRegistry::new();
        assert!(matches!(reg.create("dalle", &[camel_deer()], 0), Err(Error::Unsupported(_))));
    }
}
