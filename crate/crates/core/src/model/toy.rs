//! Deterministic toy vision-language model with a planted background shortcut.
//!
//! Images are 64×64 RGB. A class glyph occupies a fixed 16×16 box in the blue
//! channel; a background texture fills the rest of the red/green channels.
//! The image encoder is affine in the pixels: a common bias direction shared
//! with the text side, plus glyph and texture detector responses mapped to
//! fixed embedding directions. Texture `b` is mapped partly onto the text
//! direction of the class it co-occurs with, scaled by `shortcut_strength`,
//! which is the shortcut a zero-shot classifier then follows.
//!
//! The text encoder is `normalize(W_txt · (mean(v) + c_k))`, differentiable in
//! closed form with respect to every context vector.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{dot, norm, Embedding, PromptContext, PromptGradient, TextLoss, VisionLanguageModel, BACKGROUND_ONLY};
use crate::error::{Error, Result};
use crate::image::{ForegroundMask, Image, MaskProvenance};
use crate::seed::{derive_indexed, derive_seed};

pub const TOY_IMAGE_SIZE: usize = 64;
pub const GLYPH_SIZE: usize = 16;
pub const GLYPH_ORIGIN: usize = 24;
pub const TOY_EMBED_DIM: usize = 64;
pub const TOY_TOKEN_WIDTH: usize = 32;
pub const TOY_CONTEXT_LEN: usize = 4;

const CHANNELS: usize = 3;
const PIXELS: usize = TOY_IMAGE_SIZE * TOY_IMAGE_SIZE * CHANNELS;
const GLYPH_CELLS: usize = 8;

// Text geometry: class texts share a common direction and differ by an offset
// of relative size CLASS_OFFSET, giving CLIP-like inter-class cosines (~0.8).
const TEXT_SCALE: f64 = 1.0;
const CLASS_OFFSET: f64 = 0.5;
const BACKGROUND_TEXT_OFFSET: f64 = 0.484;
// Image geometry, relative to the common component.
const COMMON_GAIN: f64 = 1.0;
const GLYPH_GAIN: f64 = 0.03;
const TEXTURE_GAIN: f64 = 0.035;
const CONTEXT_INIT_SCALE: f64 = 0.02;

const INTENSITY_RANGE: (f64, f64) = (0.8, 1.0);
const TEXTURE_NOISE: f64 = 0.04;

/// Parameters of a toy world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWorldSpec {
    pub num_classes: usize,
    pub num_backgrounds: usize,
    /// Defaults to `class_0 .. class_{K-1}`.
    pub class_names: Option<Vec<String>>,
    /// Defaults to `bg_0 .. bg_{B-1}`.
    pub background_names: Option<Vec<String>>,
    /// Background each class usually appears on; defaults to `k mod B`.
    pub habitual_backgrounds: Option<Vec<usize>>,
    /// How strongly textures align with their co-occurring class text, in `[0, 1]`.
    pub shortcut_strength: f64,
    /// Fraction of each class shown on its habitual background, in `(0.5, 1]`.
    pub correlation: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for ToyWorldSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            num_backgrounds: 2,
            class_names: None,
            background_names: None,
            habitual_backgrounds: None,
            shortcut_strength: 1.0,
            correlation: 0.95,
            num_samples: 400,
            seed: 0,
        }
    }
}

impl ToyWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        let b = self.num_backgrounds;
        if !(2..=TOY_TOKEN_WIDTH - 3).contains(&k) {
            return Err(Error::invalid(format!(
                "toy world supports 2..={} classes, got {k}",
                TOY_TOKEN_WIDTH - 3
            )));
        }
        if b == 0 || k + b + 2 > TOY_TOKEN_WIDTH {
            return Err(Error::invalid(format!(
                "toy world needs 1 <= backgrounds <= {} for {k} classes, got {b}",
                TOY_TOKEN_WIDTH - 2 - k
            )));
        }
        if !(0.0..=1.0).contains(&self.shortcut_strength) {
            return Err(Error::invalid("shortcut_strength must lie in [0, 1]"));
        }
        if !(self.correlation > 0.5 && self.correlation <= 1.0) {
            return Err(Error::invalid("correlation must lie in (0.5, 1]"));
        }
        if self.num_samples == 0 {
            return Err(Error::invalid("num_samples must be positive"));
        }
        check_names(self.class_names.as_deref(), k, "class_names")?;
        check_names(self.background_names.as_deref(), b, "background_names")?;
        if let Some(h) = &self.habitual_backgrounds {
            if h.len() != k || h.iter().any(|&i| i >= b) {
                return Err(Error::invalid("habitual_backgrounds must give one valid background per class"));
            }
        }
        Ok(())
    }

    fn class_names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.num_classes).map(|k| format!("class_{k}")).collect())
    }

    fn background_names(&self) -> Vec<String> {
        self.background_names
            .clone()
            .unwrap_or_else(|| (0..self.num_backgrounds).map(|b| format!("bg_{b}")).collect())
    }

    fn habitual(&self) -> Vec<usize> {
        self.habitual_backgrounds
            .clone()
            .unwrap_or_else(|| (0..self.num_classes).map(|k| k % self.num_backgrounds).collect())
    }
}

fn check_names(names: Option<&[String]>, n: usize, field: &str) -> Result<()> {
    if let Some(names) = names {
        if names.len() != n {
            return Err(Error::invalid(format!("{field} has {} entries, expected {n}", names.len())));
        }
        let mut sorted: Vec<&String> = names.iter().collect();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != n || names.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::invalid(format!("{field} must be distinct and non-empty")));
        }
    }
    Ok(())
}

/// The toy encoder pair.
#[derive(Debug, Clone)]
pub struct ToyModel {
    labels: Vec<String>,
    /// `D×E`, row-major.
    text_proj: Vec<f64>,
    class_tokens: Arc<Vec<Vec<f64>>>,
    background_token: Vec<f64>,
    image_bias: Vec<f64>,
    glyph_detectors: Vec<Vec<f64>>,
    glyph_dirs: Vec<Vec<f64>>,
    texture_detectors: Vec<Vec<f64>>,
    texture_dirs: Vec<Vec<f64>>,
    fingerprint: String,
    // Test hook: deliberately wrong analytic gradients.
    corrupt_gradients: bool,
}

impl ToyModel {
    /// `W_txt · (mean(v) + c)` before normalization.
    fn project(&self, prompt: &PromptContext, token: &[f64]) -> Vec<f64> {
        let mut arg = prompt.context_mean();
        for (a, t) in arg.iter_mut().zip(token) {
            *a += t;
        }
        self.text_proj
            .chunks_exact(TOY_TOKEN_WIDTH)
            .map(|row| dot(row, &arg))
            .collect()
    }

    /// Text embedding of class `k` before normalization.
    pub fn text_preactivation(&self, prompt: &PromptContext, class_index: usize) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        let token = prompt
            .class_tokens()
            .get(class_index)
            .ok_or_else(|| Error::invalid(format!("class index {class_index} out of range")))?;
        Ok(self.project(prompt, token))
    }

    /// Image embedding before normalization.
    pub fn image_preactivation(&self, x: &Image) -> Result<Vec<f64>> {
        if x.shape() != (TOY_IMAGE_SIZE, TOY_IMAGE_SIZE, CHANNELS) {
            return Err(Error::invalid(format!(
                "toy model expects 64x64x3 images, got {:?}",
                x.shape()
            )));
        }
        let mut e = self.image_bias.clone();
        let respond = |e: &mut Vec<f64>, detectors: &[Vec<f64>], dirs: &[Vec<f64>]| {
            for (det, dir) in detectors.iter().zip(dirs) {
                let r = dot(det, x.data());
                for (a, d) in e.iter_mut().zip(dir) {
                    *a += r * d;
                }
            }
        };
        respond(&mut e, &self.glyph_detectors, &self.glyph_dirs);
        respond(&mut e, &self.texture_detectors, &self.texture_dirs);
        Ok(e)
    }

    /// Test hook: make `prompt_gradient` return a perturbed gradient.
    pub fn with_corrupted_gradients(mut self) -> Self {
        self.corrupt_gradients = true;
        self
    }

    fn check_prompt(&self, prompt: &PromptContext) -> Result<()> {
        if prompt.width() != TOY_TOKEN_WIDTH || prompt.class_tokens() != self.class_tokens.as_slice() {
            return Err(Error::invalid("prompt was not built for this toy model"));
        }
        Ok(())
    }
}

impl VisionLanguageModel for ToyModel {
    fn identity(&self) -> &str {
        "toy"
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (TOY_IMAGE_SIZE, TOY_IMAGE_SIZE, CHANNELS)
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn encode_image(&self, x: &Image) -> Result<Embedding> {
        Embedding::normalized(self.image_preactivation(x)?)
    }

    fn encode_text(&self, prompt: &PromptContext, class_index: usize) -> Result<Embedding> {
        Embedding::normalized(self.text_preactivation(prompt, class_index)?)
    }

    fn encode_phrase(&self, prompt: &PromptContext, phrase: &str) -> Result<Embedding> {
        if phrase == BACKGROUND_ONLY {
            self.check_prompt(prompt)?;
            return Embedding::normalized(self.project(prompt, &self.background_token));
        }
        match self.labels.iter().position(|l| l == phrase) {
            Some(k) => self.encode_text(prompt, k),
            None => Err(Error::Unsupported(format!("toy model has no text for {phrase:?}"))),
        }
    }

    fn initial_prompt(&self, seed: u64) -> PromptContext {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "", "toy-prompt-init"));
        let context = (0..TOY_CONTEXT_LEN)
            .map(|_| {
                let v = gaussian_vec(&mut rng, TOY_TOKEN_WIDTH);
                let n = norm(&v);
                v.into_iter().map(|x| CONTEXT_INIT_SCALE * x / n).collect()
            })
            .collect();
        PromptContext::new(context, Arc::clone(&self.class_tokens)).expect("toy prompt shape")
    }

    fn provides_prompt_gradients(&self) -> bool {
        true
    }

    fn prompt_gradient(&self, prompt: &PromptContext, loss: &dyn TextLoss) -> Result<PromptGradient> {
        self.check_prompt(prompt)?;
        let pre: Vec<Vec<f64>> = prompt
            .class_tokens()
            .iter()
            .map(|c| self.project(prompt, c))
            .collect();
        let texts = pre
            .iter()
            .map(|p| Embedding::normalized(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let (value, text_grads) = loss.value_and_grad(&texts)?;
        if text_grads.len() != texts.len() {
            return Err(Error::invalid("loss returned the wrong number of text gradients"));
        }

        // d/dp of p/|p| applied to g is (g - (g·z) z) / |p|; then back through W_txt.
        let mut grad_arg = vec![0.0; TOY_TOKEN_WIDTH];
        for ((p, z), g) in pre.iter().zip(&texts).zip(&text_grads) {
            let n = norm(p);
            let gz = dot(g, z.values());
            for (d, row) in self.text_proj.chunks_exact(TOY_TOKEN_WIDTH).enumerate() {
                let gp = (g[d] - gz * z.values()[d]) / n;
                if gp != 0.0 {
                    for (a, w) in grad_arg.iter_mut().zip(row) {
                        *a += gp * w;
                    }
                }
            }
        }
        let m = prompt.num_context() as f64;
        let mut grads: Vec<Vec<f64>> = (0..prompt.num_context())
            .map(|_| grad_arg.iter().map(|g| g / m).collect())
            .collect();
        if self.corrupt_gradients {
            for (i, g) in grads[0].iter_mut().enumerate() {
                *g = *g * 1.01 + if i == 0 { 1e-3 } else { 0.0 };
            }
        }
        Ok(PromptGradient { loss: value, grads })
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// `Σ_j (G⁻¹)_{ij} v_j` for the Gram matrix `G` of `vectors`: the dual basis,
/// so that `⟨dual_i, v_j⟩ = δ_ij`.
fn dual_basis(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = vectors.len();
    let gram = DMatrix::from_fn(n, n, |i, j| dot(&vectors[i], &vectors[j]));
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::invalid("toy patterns are linearly dependent"))?;
    Ok((0..n)
        .map(|i| {
            let mut d = vec![0.0; vectors[i].len()];
            for (j, v) in vectors.iter().enumerate() {
                let c = inv[(i, j)];
                for (a, x) in d.iter_mut().zip(v) {
                    *a += c * x;
                }
            }
            d
        })
        .collect())
}

#[inline]
fn pixel_index(y: usize, x: usize, c: usize) -> usize {
    (y * TOY_IMAGE_SIZE + x) * CHANNELS + c
}

#[inline]
fn in_glyph_box(y: usize, x: usize) -> bool {
    (GLYPH_ORIGIN..GLYPH_ORIGIN + GLYPH_SIZE).contains(&y)
        && (GLYPH_ORIGIN..GLYPH_ORIGIN + GLYPH_SIZE).contains(&x)
}

/// A rendered, labelled toy sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub id: String,
    pub class_index: usize,
    pub background_index: usize,
    pub label: String,
    pub group: String,
    pub image: Image,
    pub mask: ForegroundMask,
}

/// A toy world: glyph and texture patterns plus the matching model.
#[derive(Debug)]
pub struct ToyWorld {
    spec: ToyWorldSpec,
    class_names: Vec<String>,
    background_names: Vec<String>,
    habitual: Vec<usize>,
    /// Class whose text each texture is pulled toward.
    shortcut_class: Vec<usize>,
    glyphs: Vec<Vec<f64>>,
    textures: Vec<Vec<f64>>,
    model: Arc<ToyModel>,
}

impl ToyWorld {
    pub fn new(spec: ToyWorldSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.num_classes;
        let b = spec.num_backgrounds;
        let class_names = spec.class_names();
        let background_names = spec.background_names();
        let habitual = spec.habitual();
        let shortcut_class: Vec<usize> = (0..b)
            .map(|bg| habitual.iter().position(|&h| h == bg).unwrap_or(bg % k))
            .collect();

        let glyphs = make_glyphs(spec.seed, k)?;
        let textures = make_textures(b);

        // Orthonormal basis of the embedding space: the first E columns span
        // the text range.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "", "toy-model"));
        let gaussian = DMatrix::from_fn(TOY_EMBED_DIM, TOY_EMBED_DIM, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let q = gaussian.qr().q();
        let column = |j: usize| -> Vec<f64> { q.column(j).iter().copied().collect() };

        let mut text_proj = vec![0.0; TOY_EMBED_DIM * TOY_TOKEN_WIDTH];
        for d in 0..TOY_EMBED_DIM {
            for e in 0..TOY_TOKEN_WIDTH {
                text_proj[d * TOY_TOKEN_WIDTH + e] = TEXT_SCALE * q[(d, e)];
            }
        }
        let token = |offset_axis: usize, offset: f64| -> Vec<f64> {
            let mut t = vec![0.0; TOY_TOKEN_WIDTH];
            t[0] = 1.0 / TEXT_SCALE;
            t[offset_axis] = offset / TEXT_SCALE;
            t
        };
        let class_tokens: Vec<Vec<f64>> = (0..k).map(|c| token(1 + c, CLASS_OFFSET)).collect();
        let background_token = token(1 + k, BACKGROUND_TEXT_OFFSET);

        let common = column(0);
        let class_dir = |c: usize| column(1 + c);
        let image_bias: Vec<f64> = common.iter().map(|v| COMMON_GAIN * v).collect();
        let glyph_dirs: Vec<Vec<f64>> = (0..k)
            .map(|c| class_dir(c).iter().map(|v| GLYPH_GAIN * v).collect())
            .collect();
        let s = spec.shortcut_strength;
        let texture_dirs: Vec<Vec<f64>> = (0..b)
            .map(|bg| {
                let toward = class_dir(shortcut_class[bg]);
                let own = column(2 + k + bg);
                toward
                    .iter()
                    .zip(&own)
                    .map(|(t, o)| TEXTURE_GAIN * (s * t + o))
                    .collect()
            })
            .collect();

        let glyph_vectors: Vec<Vec<f64>> = glyphs
            .iter()
            .map(|g| {
                let mut v = vec![0.0; PIXELS];
                for gy in 0..GLYPH_SIZE {
                    for gx in 0..GLYPH_SIZE {
                        v[pixel_index(GLYPH_ORIGIN + gy, GLYPH_ORIGIN + gx, 2)] = g[gy * GLYPH_SIZE + gx];
                    }
                }
                v
            })
            .collect();
        let texture_vectors: Vec<Vec<f64>> = textures
            .iter()
            .map(|t| {
                let mut v = t.clone();
                for y in 0..TOY_IMAGE_SIZE {
                    for x in 0..TOY_IMAGE_SIZE {
                        if in_glyph_box(y, x) {
                            for c in 0..CHANNELS {
                                v[pixel_index(y, x, c)] = 0.0;
                            }
                        }
                    }
                }
                v
            })
            .collect();
        let glyph_detectors = dual_basis(&glyph_vectors)?;
        let texture_detectors = dual_basis(&texture_vectors)?;

        let mut h = Sha256::new();
        h.update(b"toy");
        for l in &class_names {
            h.update((l.len() as u64).to_le_bytes());
            h.update(l.as_bytes());
        }
        let mut feed = |xs: &[f64]| {
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        feed(&text_proj);
        class_tokens.iter().for_each(|t| feed(t));
        feed(&background_token);
        feed(&image_bias);
        glyph_detectors.iter().for_each(|t| feed(t));
        glyph_dirs.iter().for_each(|t| feed(t));
        texture_detectors.iter().for_each(|t| feed(t));
        texture_dirs.iter().for_each(|t| feed(t));
        let fingerprint = hex::encode(h.finalize());

        let model = ToyModel {
            labels: class_names.clone(),
            text_proj,
            class_tokens: Arc::new(class_tokens),
            background_token,
            image_bias,
            glyph_detectors,
            glyph_dirs,
            texture_detectors,
            texture_dirs,
            fingerprint,
            corrupt_gradients: false,
        };

        Ok(Self {
            spec,
            class_names,
            background_names,
            habitual,
            shortcut_class,
            glyphs,
            textures,
            model: Arc::new(model),
        })
    }

    pub fn spec(&self) -> &ToyWorldSpec {
        &self.spec
    }

    pub fn model(&self) -> Arc<ToyModel> {
        Arc::clone(&self.model)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn background_names(&self) -> &[String] {
        &self.background_names
    }

    pub fn habitual_background(&self, class_index: usize) -> usize {
        self.habitual[class_index]
    }

    pub fn shortcut_class(&self, background_index: usize) -> usize {
        self.shortcut_class[background_index]
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn background_index(&self, name: &str) -> Option<usize> {
        self.background_names.iter().position(|n| n == name)
    }

    pub fn group_name(&self, class_index: usize, background_index: usize) -> String {
        format!(
            "{}_on_{}",
            self.class_names[class_index], self.background_names[background_index]
        )
    }

    /// Glyph pattern of class `k`, `GLYPH_SIZE²` blue-channel values.
    pub fn glyph(&self, class_index: usize) -> &[f64] {
        &self.glyphs[class_index]
    }

    /// Renders the glyph of `class` (if any) over texture `background`,
    /// with intensity jitter and texture noise drawn from `rng`. Values are
    /// quantized to 8 bits so PNG storage is lossless.
    pub fn render(
        &self,
        class: Option<usize>,
        background: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Image, ForegroundMask) {
        let glyph_intensity = uniform(rng, INTENSITY_RANGE);
        let texture_intensity = uniform(rng, INTENSITY_RANGE);
        let texture = &self.textures[background];
        let mut data = vec![0.0; PIXELS];
        for y in 0..TOY_IMAGE_SIZE {
            for x in 0..TOY_IMAGE_SIZE {
                if let (Some(c), true) = (class, in_glyph_box(y, x)) {
                    let g = self.glyphs[c][(y - GLYPH_ORIGIN) * GLYPH_SIZE + (x - GLYPH_ORIGIN)];
                    data[pixel_index(y, x, 2)] = g * glyph_intensity;
                } else {
                    for ch in 0..2 {
                        let i = pixel_index(y, x, ch);
                        let noise = TEXTURE_NOISE * (2.0 * rng.random::<f64>() - 1.0);
                        data[i] = (texture[i] * texture_intensity + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
        let mut image = Image::new(TOY_IMAGE_SIZE, TOY_IMAGE_SIZE, CHANNELS, data)
            .expect("toy pixels lie in [0, 1]");
        image.quantize();
        let mask = match class {
            Some(_) => ForegroundMask::from_box(
                TOY_IMAGE_SIZE,
                TOY_IMAGE_SIZE,
                (GLYPH_ORIGIN, GLYPH_ORIGIN, GLYPH_ORIGIN + GLYPH_SIZE, GLYPH_ORIGIN + GLYPH_SIZE),
                MaskProvenance::ToyExact,
            ),
            None => ForegroundMask::empty(TOY_IMAGE_SIZE, TOY_IMAGE_SIZE, MaskProvenance::ToyExact),
        };
        (image, mask)
    }

    /// The labelled test set: `num_samples` images, `correlation` of each
    /// class on its habitual background.
    pub fn samples(&self) -> Vec<ToySample> {
        let k = self.spec.num_classes;
        let b = self.spec.num_backgrounds;
        let n = self.spec.num_samples;
        let mut out = Vec::with_capacity(n);
        for class in 0..k {
            let n_class = n / k + usize::from(class < n % k);
            let habitual = self.habitual[class];
            let n_major = if b == 1 {
                n_class
            } else {
                (self.spec.correlation * n_class as f64).round() as usize
            };
            let others: Vec<usize> = (0..b).filter(|&bg| bg != habitual).collect();
            for j in 0..n_class {
                let background = if j < n_major {
                    habitual
                } else {
                    others[(j - n_major) % others.len()]
                };
                let index = out.len();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_indexed(self.spec.seed, "toy-sample", index as u64));
                let (image, mask) = self.render(Some(class), background, &mut rng);
                out.push(ToySample {
                    id: format!("toy-{index:05}"),
                    class_index: class,
                    background_index: background,
                    label: self.class_names[class].clone(),
                    group: self.group_name(class, background),
                    image,
                    mask,
                });
            }
        }
        out
    }

    /// Glyph-free texture images, usable as a reference pool of images that
    /// belong to no class.
    pub fn reference_pool(&self, n: usize, seed: u64) -> Vec<Image> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(seed, "toy-reference", i as u64));
                self.render(None, i % self.spec.num_backgrounds, &mut rng).0
            })
            .collect()
    }
}

fn make_glyphs(seed: u64, k: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "", "toy-glyphs"));
    for _attempt in 0..64 {
        let cells: Vec<Vec<bool>> = (0..k)
            .map(|_| (0..GLYPH_CELLS * GLYPH_CELLS).map(|_| rng.random::<bool>()).collect())
            .collect();
        let glyphs: Vec<Vec<f64>> = cells
            .iter()
            .map(|c| {
                let cell = GLYPH_SIZE / GLYPH_CELLS;
                (0..GLYPH_SIZE * GLYPH_SIZE)
                    .map(|i| {
                        let (gy, gx) = (i / GLYPH_SIZE, i % GLYPH_SIZE);
                        if c[(gy / cell) * GLYPH_CELLS + gx / cell] {
                            1.0
                        } else {
                            0.35
                        }
                    })
                    .collect()
            })
            .collect();
        if dual_basis(&glyphs).is_ok() {
            let gram = DMatrix::from_fn(k, k, |i, j| dot(&glyphs[i], &glyphs[j]));
            // Reject near-singular draws so detector responses stay well scaled.
            let svd = gram.singular_values();
            if svd.min() > 1.0 {
                return Ok(glyphs);
            }
        }
    }
    Err(Error::invalid("could not draw independent glyph patterns"))
}

fn make_textures(b: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|bg| {
            let theta = std::f64::consts::FRAC_PI_2 * (bg as f64 + 0.5) / b as f64;
            let (rw, gw) = (theta.cos(), theta.sin());
            let phi = std::f64::consts::PI * bg as f64 / b as f64;
            let period = 6.0 + 2.0 * bg as f64;
            let mut t = vec![0.0; PIXELS];
            for y in 0..TOY_IMAGE_SIZE {
                for x in 0..TOY_IMAGE_SIZE {
                    let phase = (y as f64 * phi.cos() + x as f64 * phi.sin()) / period;
                    let v = 0.6 + 0.3 * (std::f64::consts::TAU * phase).sin();
                    t[pixel_index(y, x, 0)] = 0.9 * rw * v;
                    t[pixel_index(y, x, 1)] = 0.9 * gw * v;
                }
            }
            t
        })
        .collect()
}

/// Builds the toy world's model and its labelled test set.
pub fn build_toy_world(spec: ToyWorldSpec) -> Result<(Arc<ToyModel>, Vec<ToySample>)> {
    let world = ToyWorld::new(spec)?;
    Ok((world.model(), world.samples()))
}
