//! Flat `key = value` run configuration with dotted keys, plus the glue that
//! turns a configuration into a dataset, scores, an augmenter and a training
//! run.
//!
//! Later assignments override earlier ones, so command-line overrides are
//! applied with [`RunConfig::set`] after the file is read. Unknown keys are
//! errors.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::{AugmentConfig, Augmenter, TemplateBank};
use crate::curriculum::{CurriculumSettings, CurriculumState};
use crate::dataset::{load_dataset, synth_generate, Dataset, SynthSpec};
use crate::embedding::{score_dataset, DifficultyScore, EmbeddingProvider, HashProvider, TableProvider};
use crate::error::{Error, Result};
use crate::grpo::{self, GrpoConfig, RunInputs, Strategy, TrainOutcome};
use crate::io::Provenance;
use crate::policy::PolicyParams;

/// Which embedding provider backs text embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProviderKind {
    #[default]
    Hash,
    Table,
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(ProviderKind::Hash),
            "table" => Ok(ProviderKind::Table),
            other => Err(Error::Config(format!("unknown provider kind `{other}`"))),
        }
    }
}

impl Display for ProviderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProviderKind::Hash => "hash",
            ProviderKind::Table => "table",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_path: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Seed for the synthetic generator; the run seed when unset.
    pub synth_seed: Option<u64>,
    synth_set: bool,
    /// Keep only questions whose difficulty score lies in this range.
    pub min_score: f64,
    pub max_score: f64,
    pub provider_kind: ProviderKind,
    pub provider_seed: u64,
    pub provider_table: Option<PathBuf>,
    /// Score from provider embeddings of option texts instead of stored features.
    pub score_use_provider: bool,
    pub grpo: GrpoConfig,
    pub temperature: f64,
    pub augment: AugmentConfig,
    pub templates: Option<PathBuf>,
    pub curriculum_enabled: bool,
    pub curriculum: CurriculumSettings,
    pub metrics_window: usize,
    pub eval_samples: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_path: None,
            synth: SynthSpec::default(),
            synth_seed: None,
            synth_set: false,
            min_score: f64::NEG_INFINITY,
            max_score: f64::INFINITY,
            provider_kind: ProviderKind::Hash,
            provider_seed: 0,
            provider_table: None,
            score_use_provider: false,
            grpo: GrpoConfig::default(),
            temperature: 1.0,
            augment: AugmentConfig::default(),
            templates: None,
            curriculum_enabled: false,
            curriculum: CurriculumSettings::default(),
            metrics_window: 50,
            eval_samples: 5,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse::<f64>(key, v.trim()))
        .collect()
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn path_string(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_relative(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(key.trim(), value.trim())
    }

    fn resolve_relative(&mut self, base: &Path) {
        for p in [&mut self.data_path, &mut self.provider_table, &mut self.templates]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(field) = key.strip_prefix("synth.") {
            self.synth_set = true;
            return self.set_synth(key, field, value);
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.path" => self.data_path = Some(PathBuf::from(value)),
            "data.min_score" => self.min_score = parse(key, value)?,
            "data.max_score" => self.max_score = parse(key, value)?,
            "provider.kind" => self.provider_kind = value.parse()?,
            "provider.seed" => self.provider_seed = parse(key, value)?,
            "provider.table" => self.provider_table = Some(PathBuf::from(value)),
            "score.use_provider" => self.score_use_provider = parse(key, value)?,
            "grpo.group_size" => self.grpo.group_size = parse(key, value)?,
            "grpo.epsilon" => self.grpo.clip_epsilon = parse(key, value)?,
            "grpo.beta" => self.grpo.kl_beta = parse(key, value)?,
            "grpo.learning_rate" => self.grpo.learning_rate = parse(key, value)?,
            "grpo.std_floor" => self.grpo.std_floor = parse(key, value)?,
            "grpo.strategy" => self.grpo.strategy = value.parse()?,
            "grpo.dapo_max_retries" => self.grpo.dapo_max_retries = parse(key, value)?,
            "grpo.gpg_scale_mode" => self.grpo.gpg_scale_mode = value.parse()?,
            "grpo.steps" => self.grpo.steps = parse(key, value)?,
            "grpo.batch_size" => self.grpo.batch_size = parse(key, value)?,
            "policy.temperature" => self.temperature = parse(key, value)?,
            "policy.old_refresh_every" => self.grpo.old_refresh_every = parse(key, value)?,
            "policy.ref_refresh_every" => self.grpo.ref_refresh_every = parse(key, value)?,
            "augment.num_text_variants" => self.augment.num_text_variants = parse(key, value)?,
            "augment.noise_sigma" => self.augment.noise_sigma = parse(key, value)?,
            "augment.min_cosine" => self.augment.min_cosine = parse(key, value)?,
            "augment.max_rejections" => self.augment.max_rejections = parse(key, value)?,
            "augment.include_original" => self.augment.include_original = parse(key, value)?,
            "augment.text_coupling" => self.augment.text_coupling = parse(key, value)?,
            "augment.templates" => self.templates = Some(PathBuf::from(value)),
            "curriculum.enabled" => self.curriculum_enabled = parse(key, value)?,
            "curriculum.num_bins" => self.curriculum.num_bins = parse(key, value)?,
            "curriculum.strategy" => self.curriculum.strategy = value.parse()?,
            "curriculum.threshold" => self.curriculum.threshold = parse(key, value)?,
            "curriculum.window" => self.curriculum.window_size = parse(key, value)?,
            "curriculum.replay_fraction" => self.curriculum.replay_fraction = parse(key, value)?,
            "metrics.window" => self.metrics_window = parse(key, value)?,
            "eval.samples" => self.eval_samples = parse(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn set_synth(&mut self, key: &str, field: &str, value: &str) -> Result<()> {
        let s = &mut self.synth;
        match field {
            "seed" => self.synth_seed = Some(parse(key, value)?),
            "dimension" => s.dimension = parse(key, value)?,
            "questions_per_class" => s.questions_per_class = parse(key, value)?,
            "options_per_question" => s.options_per_question = parse(key, value)?,
            "margins" => s.margins = parse_list(key, value)?,
            "shared_dims" => s.shared_dims = parse(key, value)?,
            "shared_gain" => s.shared_gain = parse(key, value)?,
            "private_gain" => s.private_gain = parse(key, value)?,
            "stimulus_jitter" => s.stimulus_jitter = parse(key, value)?,
            "score_jitter" => s.score_jitter = parse(key, value)?,
            "lure_threshold" => s.lure_threshold = parse(key, value)?,
            "lure_correct" => s.lure_correct = parse(key, value)?,
            "lure_distractor" => s.lure_distractor = parse(key, value)?,
            "private_deviation" => s.private_deviation = parse(key, value)?,
            "deviation_noise" => s.deviation_noise = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every effective setting as `(key, value)`, in a fixed order. Settings
    /// that do not apply to the chosen data source are omitted.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(&str, String)> = vec![("seed", self.seed.to_string())];
        match &self.data_path {
            Some(p) => e.push(("data.path", p.display().to_string())),
            None => {
                let s = &self.synth;
                e.extend([
                    ("synth.seed", self.effective_synth_seed().to_string()),
                    ("synth.dimension", s.dimension.to_string()),
                    ("synth.questions_per_class", s.questions_per_class.to_string()),
                    ("synth.options_per_question", s.options_per_question.to_string()),
                    ("synth.margins", join(&s.margins)),
                    ("synth.shared_dims", s.shared_dims.to_string()),
                    ("synth.shared_gain", format!("{:?}", s.shared_gain)),
                    ("synth.private_gain", format!("{:?}", s.private_gain)),
                    ("synth.stimulus_jitter", format!("{:?}", s.stimulus_jitter)),
                    ("synth.score_jitter", format!("{:?}", s.score_jitter)),
                    ("synth.lure_threshold", format!("{:?}", s.lure_threshold)),
                    ("synth.lure_correct", format!("{:?}", s.lure_correct)),
                    ("synth.lure_distractor", format!("{:?}", s.lure_distractor)),
                    ("synth.private_deviation", format!("{:?}", s.private_deviation)),
                    ("synth.deviation_noise", format!("{:?}", s.deviation_noise)),
                ]);
            }
        }
        let g = &self.grpo;
        let a = &self.augment;
        let c = &self.curriculum;
        e.extend([
            ("data.min_score", format!("{:?}", self.min_score)),
            ("data.max_score", format!("{:?}", self.max_score)),
            ("provider.kind", self.provider_kind.to_string()),
            ("provider.seed", self.provider_seed.to_string()),
            ("provider.table", path_string(&self.provider_table)),
            ("score.use_provider", self.score_use_provider.to_string()),
            ("grpo.group_size", g.group_size.to_string()),
            ("grpo.epsilon", format!("{:?}", g.clip_epsilon)),
            ("grpo.beta", format!("{:?}", g.kl_beta)),
            ("grpo.learning_rate", format!("{:?}", g.learning_rate)),
            ("grpo.std_floor", format!("{:?}", g.std_floor)),
            ("grpo.strategy", g.strategy.to_string()),
            ("grpo.dapo_max_retries", g.dapo_max_retries.to_string()),
            ("grpo.gpg_scale_mode", g.gpg_scale_mode.to_string()),
            ("grpo.steps", g.steps.to_string()),
            ("grpo.batch_size", g.batch_size.to_string()),
            ("policy.temperature", format!("{:?}", self.temperature)),
            ("policy.old_refresh_every", g.old_refresh_every.to_string()),
            ("policy.ref_refresh_every", g.ref_refresh_every.to_string()),
            ("augment.num_text_variants", a.num_text_variants.to_string()),
            ("augment.noise_sigma", format!("{:?}", a.noise_sigma)),
            ("augment.min_cosine", format!("{:?}", a.min_cosine)),
            ("augment.max_rejections", a.max_rejections.to_string()),
            ("augment.include_original", a.include_original.to_string()),
            ("augment.text_coupling", format!("{:?}", a.text_coupling)),
            ("augment.templates", path_string(&self.templates)),
            ("curriculum.enabled", self.curriculum_enabled.to_string()),
            ("curriculum.num_bins", c.num_bins.to_string()),
            ("curriculum.strategy", c.strategy.to_string()),
            ("curriculum.threshold", format!("{:?}", c.threshold)),
            ("curriculum.window", c.window_size.to_string()),
            ("curriculum.replay_fraction", format!("{:?}", c.replay_fraction)),
            ("metrics.window", self.metrics_window.to_string()),
            ("eval.samples", self.eval_samples.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ]);
        e.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The effective configuration as re-parseable text.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the effective configuration, excluding the output directory
    /// so that relocating a run does not change its identity.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "output.dir" {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config_hash(),
            seed: self.seed,
        }
    }

    pub fn effective_synth_seed(&self) -> u64 {
        self.synth_seed.unwrap_or(self.seed)
    }

    /// The training configuration with the run seed applied.
    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            seed: self.seed,
            ..self.grpo.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.data_path.is_some() && self.synth_set {
            return Err(Error::Config("set either data.path or synth.* keys, not both".into()));
        }
        for (key, path) in [
            ("data.path", &self.data_path),
            ("provider.table", &self.provider_table),
            ("augment.templates", &self.templates),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("{key}: `{}` does not exist", p.display())));
                }
            }
        }
        if self.provider_kind == ProviderKind::Table && self.provider_table.is_none() {
            return Err(Error::Config("provider.kind = table needs provider.table".into()));
        }
        if self.min_score > self.max_score {
            return Err(Error::Config("data.min_score exceeds data.max_score".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("policy.temperature must be positive".into()));
        }
        if self.metrics_window == 0 {
            return Err(Error::Config("metrics.window must be at least 1".into()));
        }
        if self.eval_samples < 5 {
            return Err(Error::Config("eval.samples must be at least 5".into()));
        }
        if self.data_path.is_none() {
            self.synth.validate().map_err(cfg_err)?;
        }
        self.grpo_config().validate()?;
        self.augment.validate().map_err(cfg_err)
    }

    fn provider(&self, dimension: usize) -> Result<EmbeddingProvider> {
        match (self.provider_kind, &self.provider_table) {
            (ProviderKind::Table, Some(path)) => {
                let table: EmbeddingProvider = TableProvider::load(path)?.into();
                if table.dimension() != dimension {
                    return Err(Error::DimensionMismatch {
                        expected: dimension,
                        found: table.dimension(),
                    });
                }
                Ok(table)
            }
            _ => Ok(HashProvider::new(self.provider_seed, dimension).into()),
        }
    }

    /// Loads or generates the dataset, scores it and applies the score filter.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let full = match &self.data_path {
            Some(p) => load_dataset(p)?,
            None => synth_generate(&self.synth, self.effective_synth_seed())?,
        };
        let provider = self.provider(full.dimension)?;
        let all_scores = score_dataset(&full, self.score_use_provider.then_some(&provider))?;
        let keep = |s: f64| s >= self.min_score && s <= self.max_score;
        let kept: std::collections::HashSet<&str> = all_scores
            .iter()
            .filter(|s| keep(s.score))
            .map(|s| s.question_id.as_str())
            .collect();
        let dataset = full.filter(|q| kept.contains(q.id.as_str()));
        let scores: Vec<DifficultyScore> = all_scores.iter().filter(|s| keep(s.score)).cloned().collect();
        if dataset.is_empty() {
            return Err(Error::invalid("no questions left after the score filter"));
        }
        let templates = match &self.templates {
            Some(p) => TemplateBank::load(p)?,
            None => TemplateBank::default(),
        };
        let augmenter = Augmenter::new(self.augment.clone(), templates, provider)?;
        Ok(Prepared {
            dataset,
            scores,
            augmenter,
        })
    }

    /// A fresh curriculum when enabled.
    pub fn curriculum_state(&self, prepared: &Prepared) -> Result<Option<CurriculumState>> {
        if !self.curriculum_enabled {
            return Ok(None);
        }
        CurriculumState::from_scores(&prepared.scores, &self.curriculum).map(Some)
    }

    /// Trains from a zero-initialized policy.
    pub fn train(&self, prepared: &Prepared) -> Result<TrainOutcome> {
        let cfg = self.grpo_config();
        let augmenter = (cfg.strategy == Strategy::Gdqa).then_some(&prepared.augmenter);
        let inputs = RunInputs {
            dataset: &prepared.dataset,
            scores: &prepared.scores,
            curriculum: self.curriculum_state(prepared)?,
            augmenter,
            init: PolicyParams::zeros(prepared.dataset.dimension, self.temperature)?,
        };
        grpo::run_training(inputs, &cfg)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Everything a run needs that is derived from the configuration alone.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub scores: Vec<DifficultyScore>,
    pub augmenter: Augmenter,
}
