//! Group-diversity question augmentation.
//!
//! A rollout group is filled with semantically equivalent variants of one
//! question: textual rewrites paired with answer-preserving perturbations of
//! the image feature. Different prompts push the policy's responses apart,
//! which makes all-equal reward groups less likely.

use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{OptionEntry, QuestionRecord};
use crate::embedding::{cosine_slices, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const ORIGINAL_TAG: &str = "orig";

/// One prompt presented to the policy: a question's text and (possibly
/// perturbed) stimulus, with the question's options and answer unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantPrompt {
    pub question_id: String,
    pub variant_tag: String,
    pub text: String,
    pub stimulus: Embedding,
    pub options: Arc<[OptionEntry]>,
    pub correct_index: usize,
}

impl VariantPrompt {
    /// The unmodified prompt.
    pub fn original(q: &QuestionRecord) -> Self {
        VariantPrompt {
            question_id: q.id.clone(),
            variant_tag: ORIGINAL_TAG.to_string(),
            text: q.text.clone(),
            stimulus: q.image_feature.clone(),
            options: Arc::clone(&q.options),
            correct_index: q.correct_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub num_text_variants: usize,
    pub noise_sigma: f64,
    /// Minimum cosine between original and perturbed stimulus.
    pub min_cosine: f64,
    pub max_rejections: usize,
    pub include_original: bool,
    /// Weight of the rewritten text's embedding added to the stimulus.
    pub text_coupling: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            num_text_variants: 3,
            noise_sigma: 0.1,
            min_cosine: 0.9,
            max_rejections: 16,
            include_original: true,
            text_coupling: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        if !(self.min_cosine > 0.0 && self.min_cosine <= 1.0) {
            return Err(Error::invalid("min_cosine must lie in (0, 1]"));
        }
        if self.max_rejections == 0 {
            return Err(Error::invalid("max_rejections must be at least 1"));
        }
        if !self.text_coupling.is_finite() {
            return Err(Error::invalid("text_coupling must be finite"));
        }
        Ok(())
    }
}

/// Rewrite templates; each contains a `{question}` placeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    templates: Vec<String>,
}

const BUILTIN_TEMPLATES: [&str; 10] = [
    "Looking at this image: {question}",
    "Can you identify the anatomy being asked about? {question}",
    "{question} Focus on the fine-grained visual details.",
    "Please answer the following question about the surgical scene. {question}",
    "Consider the anatomical structures shown. {question}",
    "{question} Choose the single best option.",
    "Examine the highlighted region carefully. {question}",
    "As an expert surgeon, answer: {question}",
    "Which anatomical structures are located here? Specifically: {question}",
    "{question} Answer based only on what is visible.",
];

impl Default for TemplateBank {
    fn default() -> Self {
        TemplateBank {
            templates: BUILTIN_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TemplateBank {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if let Some(t) = templates.iter().find(|t| !t.contains("{question}")) {
            return Err(Error::invalid(format!("template `{t}` lacks a {{question}} placeholder")));
        }
        Ok(TemplateBank { templates })
    }

    /// One template per non-blank line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TemplateBank::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    fn render(&self, question: &str) -> impl Iterator<Item = String> + '_ {
        let question = question.to_string();
        self.templates.iter().map(move |t| t.replace("{question}", &question))
    }
}

fn push_distinct(pool: &mut Vec<String>, candidate: String, original: &str) {
    if candidate != original && !pool.contains(&candidate) {
        pool.push(candidate);
    }
}

/// `k` distinct rewrites of the question text, none equal to the original.
///
/// Stored variants are used first; templates fill any remainder.
pub fn rewrite_text(q: &QuestionRecord, k: usize, bank: &TemplateBank, rng: &mut Stream) -> Result<Vec<String>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut stored = Vec::new();
    for v in &q.text_variants {
        push_distinct(&mut stored, v.clone(), &q.text);
    }
    if k <= stored.len() {
        return Ok(stored.choose_multiple(rng, k).cloned().collect());
    }
    let mut templated = stored.clone();
    for t in bank.render(&q.text) {
        push_distinct(&mut templated, t, &q.text);
    }
    let templated = templated.split_off(stored.len());
    let missing = k - stored.len();
    if missing > templated.len() {
        return Err(Error::RewriteShortfall {
            requested: k,
            available: stored.len() + templated.len(),
        });
    }
    stored.shuffle(rng);
    stored.extend(templated.choose_multiple(rng, missing).cloned());
    Ok(stored)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    pub stimulus: Embedding,
    /// True when every draw failed the cosine guard and the input was kept.
    pub fell_back: bool,
}

/// Adds isotropic Gaussian noise, redrawing until the result keeps cosine
/// `>= min_cosine` with the input. Falls back to the input after
/// `max_rejections` failed draws.
pub fn perturb_image(stimulus: &Embedding, cfg: &AugmentConfig, rng: &mut Stream) -> Perturbed {
    if cfg.noise_sigma == 0.0 {
        return Perturbed {
            stimulus: stimulus.clone(),
            fell_back: false,
        };
    }
    let base = stimulus.as_slice();
    for _ in 0..cfg.max_rejections {
        let candidate: Vec<f64> = base
            .iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(rng);
                x + cfg.noise_sigma * z
            })
            .collect();
        if let Ok(c) = cosine_slices(base, &candidate) {
            if c >= cfg.min_cosine {
                return Perturbed {
                    stimulus: Embedding::new(candidate).expect("finite perturbation"),
                    fell_back: false,
                };
            }
        }
    }
    log::debug!("perturbation rejected {} times, keeping original stimulus", cfg.max_rejections);
    Perturbed {
        stimulus: stimulus.clone(),
        fell_back: true,
    }
}

#[derive(Debug, Clone)]
pub struct VariantGroup {
    pub prompts: Vec<VariantPrompt>,
    pub fallbacks: usize,
}

/// Everything needed to expand a question into a variant group.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub config: AugmentConfig,
    pub templates: TemplateBank,
    pub provider: EmbeddingProvider,
}

impl Augmenter {
    pub fn new(config: AugmentConfig, templates: TemplateBank, provider: EmbeddingProvider) -> Result<Self> {
        config.validate()?;
        Ok(Augmenter {
            config,
            templates,
            provider,
        })
    }

    pub fn build_variant_group(&self, q: &QuestionRecord, group_size: usize, rng: &mut Stream) -> Result<VariantGroup> {
        build_variant_group(q, group_size, &self.config, &self.templates, &self.provider, rng)
    }
}

/// Exactly `group_size` prompts for `q`: the original (when configured)
/// followed by variants `v1, v2, ...` that cycle through the rewrites, each
/// with its own stimulus perturbation.
pub fn build_variant_group(
    q: &QuestionRecord,
    group_size: usize,
    cfg: &AugmentConfig,
    bank: &TemplateBank,
    provider: &EmbeddingProvider,
    rng: &mut Stream,
) -> Result<VariantGroup> {
    if group_size < 2 {
        return Err(Error::invalid("group size must be at least 2"));
    }
    let rewrites = rewrite_text(q, cfg.num_text_variants, bank, rng)?;
    let member_seed: u64 = rng.random();

    let mut prompts = Vec::with_capacity(group_size);
    if cfg.include_original {
        prompts.push(VariantPrompt::original(q));
    }
    let mut fallbacks = 0;
    for i in 1..=group_size - prompts.len() {
        let text = if rewrites.is_empty() {
            q.text.clone()
        } else {
            rewrites[(i - 1) % rewrites.len()].clone()
        };
        let mut member_rng = rng::stream(member_seed, &[i as u64]);
        let perturbed = perturb_image(&q.image_feature, cfg, &mut member_rng);
        fallbacks += usize::from(perturbed.fell_back);
        let mut stimulus = perturbed.stimulus;
        if text != q.text && cfg.text_coupling != 0.0 {
            let t = provider.embed(&text)?;
            if t.dim() != stimulus.dim() {
                return Err(Error::DimensionMismatch {
                    expected: stimulus.dim(),
                    found: t.dim(),
                });
            }
            let coupled = stimulus
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(s, e)| s + cfg.text_coupling * e)
                .collect();
            stimulus = Embedding::new(coupled)?;
        }
        prompts.push(VariantPrompt {
            question_id: q.id.clone(),
            variant_tag: format!("v{i}"),
            text,
            stimulus,
            options: Arc::clone(&q.options),
            correct_index: q.correct_index,
        });
    }
    Ok(VariantGroup { prompts, fallbacks })
}
