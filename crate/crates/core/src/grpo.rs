//! Group-relative policy optimization.
//!
//! Each step samples questions, expands each into a rollout group, turns
//! rewards into group-normalized advantages and takes one plain
//! gradient-ascent step on the clipped, KL-regularized surrogate.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::augment::{Augmenter, VariantPrompt};
use crate::curriculum::CurriculumState;
use crate::dataset::{Dataset, QuestionRecord};
use crate::embedding::DifficultyScore;
use crate::error::{Error, Result};
use crate::metrics::{MetricsLog, MetricsRow};
use crate::policy::{self, Contrasts, PolicyParams, PolicySnapshot, ResponseSample};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    Vanilla,
    DapoResample,
    GpgScale,
    Gdqa,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Vanilla,
        Strategy::DapoResample,
        Strategy::GpgScale,
        Strategy::Gdqa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::DapoResample => "dapo_resample",
            Strategy::GpgScale => "gpg_scale",
            Strategy::Gdqa => "gdqa",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// How `gpg_scale` compensates for dropped groups. Only batch rescaling is
/// defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GpgScaleMode {
    #[default]
    BatchRescale,
}

impl FromStr for GpgScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch-rescale" | "batch_rescale" => Ok(GpgScaleMode::BatchRescale),
            other => Err(Error::Config(format!("unknown gpg scale mode `{other}`"))),
        }
    }
}

impl fmt::Display for GpgScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("batch-rescale")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub std_floor: f64,
    pub strategy: Strategy,
    /// Total generations allowed per group under `dapo_resample`.
    pub dapo_max_retries: usize,
    pub gpg_scale_mode: GpgScaleMode,
    pub steps: usize,
    pub seed: u64,
    /// Groups per optimizer step.
    pub batch_size: usize,
    /// Steps between refreshes of the sampling snapshot.
    pub old_refresh_every: usize,
    /// Steps between refreshes of the KL anchor; 0 keeps the initial policy.
    pub ref_refresh_every: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            learning_rate: 0.05,
            std_floor: 1e-8,
            strategy: Strategy::Vanilla,
            dapo_max_retries: 4,
            gpg_scale_mode: GpgScaleMode::BatchRescale,
            steps: 2000,
            seed: 0,
            batch_size: 1,
            old_refresh_every: 1,
            ref_refresh_every: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size < 2 {
            return fail("grpo.group_size must be at least 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite()) {
            return fail("grpo.epsilon must be positive");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return fail("grpo.beta must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("grpo.learning_rate must be positive");
        }
        if !(self.std_floor > 0.0 && self.std_floor.is_finite()) {
            return fail("grpo.std_floor must be positive");
        }
        if self.dapo_max_retries == 0 {
            return fail("grpo.dapo_max_retries must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("grpo.batch_size must be at least 1");
        }
        if self.old_refresh_every == 0 {
            return fail("policy.old_refresh_every must be at least 1");
        }
        Ok(())
    }
}

/// Binary correctness.
pub fn reward(response: &ResponseSample, q: &QuestionRecord) -> f64 {
    if response.option_index == q.correct_index {
        1.0
    } else {
        0.0
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(R_i - mean) / std` with population std; all zeros when std falls
/// below `std_floor`.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid("advantages need at least two rewards"));
    }
    let (mean, std) = mean_std(rewards);
    if std < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// True when every response in the group was wrong.
pub fn is_invalid_group(rewards: &[f64]) -> bool {
    rewards.iter().all(|r| *r == 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub question_id: String,
    pub anatomy_label: String,
    pub prompts: Vec<VariantPrompt>,
    pub responses: Vec<ResponseSample>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub invalid: bool,
    /// Generations spent on this group (more than one only under resampling).
    pub attempts: usize,
    pub fallbacks: usize,
}

impl RolloutGroup {
    /// Assembles a group from prompts and their sampled responses.
    pub fn new(
        q: &QuestionRecord,
        prompts: Vec<VariantPrompt>,
        responses: Vec<ResponseSample>,
        std_floor: f64,
    ) -> Result<Self> {
        if prompts.len() != responses.len() || prompts.len() < 2 {
            return Err(Error::invalid("a group needs at least two prompt/response pairs"));
        }
        let rewards: Vec<f64> = responses.iter().map(|r| reward(r, q)).collect();
        let advantages = compute_advantages(&rewards, std_floor)?;
        Ok(RolloutGroup {
            question_id: q.id.clone(),
            anatomy_label: q.anatomy_label.clone(),
            invalid: is_invalid_group(&rewards),
            prompts,
            responses,
            rewards,
            advantages,
            attempts: 1,
            fallbacks: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|a| *a == 0.0)
    }

    pub fn reward_mean_std(&self) -> (f64, f64) {
        mean_std(&self.rewards)
    }
}

/// Surrogate value and mean KL, with the gradient accumulated into `grad`
/// when requested.
fn surrogate_impl(
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<(f64, f64)> {
    let g = group.len() as f64;
    let (lo, hi) = (1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    let mut value = 0.0;
    let mut kl_total = 0.0;
    for ((prompt, resp), &adv) in group.prompts.iter().zip(&group.responses).zip(&group.advantages) {
        let contrasts = Contrasts::of(prompt, params.dim())?;
        let o = resp.option_index;
        if o >= contrasts.len() {
            return Err(Error::invalid(format!("response option {o} out of range")));
        }
        let lp_new = policy::log_probs(&contrasts.logits(params));
        let lp_old = policy::log_probs(&contrasts.logits(old))[o];
        let ratio = (lp_new[o] - lp_old).exp();
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(lo, hi) * adv;
        let term = unclipped.min(clipped);

        let kl = policy::kl_and_grad(
            &contrasts,
            params,
            reference,
            -cfg.kl_beta / g,
            grad.as_deref_mut(),
        );
        if let Some(grad) = grad.as_deref_mut() {
            if unclipped <= clipped && adv != 0.0 {
                // d(r A)/dz_j = r A (1[j = o] - p_j)
                let scale = ratio * adv / g;
                let weights: Vec<f64> = lp_new
                    .iter()
                    .enumerate()
                    .map(|(j, l)| scale * (f64::from(u8::from(j == o)) - l.exp()))
                    .collect();
                contrasts.backprop(&weights, params.temperature, grad);
            }
        }
        value += term - cfg.kl_beta * kl;
        kl_total += kl;
    }
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite surrogate for `{}`", group.question_id)));
    }
    Ok((value / g, kl_total / g))
}

/// Clipped, KL-regularized surrogate averaged over the group.
pub fn surrogate_objective(
    params_new: &PolicyParams,
    snap_old: &PolicySnapshot,
    snap_ref: &PolicySnapshot,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<f64> {
    surrogate_impl(params_new, snap_old.params(), snap_ref.params(), group, cfg, None).map(|(v, _)| v)
}

/// Exact gradient of [`surrogate_objective`]. Members whose minimum picks
/// the clipped branch while the clip binds contribute no policy gradient.
pub fn grad_surrogate(
    params_new: &PolicyParams,
    snap_old: &PolicySnapshot,
    snap_ref: &PolicySnapshot,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params_new.dim()];
    surrogate_impl(params_new, snap_old.params(), snap_ref.params(), group, cfg, Some(&mut grad))?;
    Ok(grad)
}

/// Samples one response per prompt, member `i` drawing from the stream
/// tagged `(member_tag..., i)` under `seed`.
fn sample_members(
    params: &PolicyParams,
    prompts: &[VariantPrompt],
    seed: u64,
    member_tags: &[u64],
) -> Result<Vec<ResponseSample>> {
    let mut tags = member_tags.to_vec();
    tags.push(0);
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            *tags.last_mut().expect("tag slot") = i as u64;
            policy::sample_response(params, p, &mut rng::stream(seed, &tags))
        })
        .collect()
}

/// Builds the rollout group for `q` under the configured strategy.
///
/// `group_seed` identifies the group; every member samples from its own
/// derived stream, and augmentation draws from a separate stream, so the
/// responses under `gdqa` with augmentation switched off match `vanilla`
/// exactly.
pub fn build_group(
    q: &QuestionRecord,
    params: &PolicyParams,
    cfg: &GrpoConfig,
    augmenter: Option<&Augmenter>,
    group_seed: u64,
) -> Result<RolloutGroup> {
    let g = cfg.group_size;
    match cfg.strategy {
        Strategy::Vanilla | Strategy::GpgScale => {
            let prompts = vec![VariantPrompt::original(q); g];
            let responses = sample_members(params, &prompts, group_seed, &[tag::MEMBER])?;
            RolloutGroup::new(q, prompts, responses, cfg.std_floor)
        }
        Strategy::DapoResample => {
            let prompts = vec![VariantPrompt::original(q); g];
            let mut attempt = 0;
            loop {
                let responses = if attempt == 0 {
                    sample_members(params, &prompts, group_seed, &[tag::MEMBER])?
                } else {
                    sample_members(params, &prompts, group_seed, &[tag::RETRY, attempt as u64])?
                };
                attempt += 1;
                let mut group = RolloutGroup::new(q, prompts.clone(), responses, cfg.std_floor)?;
                group.attempts = attempt;
                if !group.is_degenerate() || attempt >= cfg.dapo_max_retries {
                    return Ok(group);
                }
            }
        }
        Strategy::Gdqa => {
            let aug = augmenter.ok_or_else(|| Error::Config("strategy gdqa needs augmentation settings".into()))?;
            let mut aug_rng = rng::stream(group_seed, &[tag::AUGMENT]);
            let variants = aug.build_variant_group(q, g, &mut aug_rng)?;
            let responses = sample_members(params, &variants.prompts, group_seed, &[tag::MEMBER])?;
            let mut group = RolloutGroup::new(q, variants.prompts, responses, cfg.std_floor)?;
            group.fallbacks = variants.fallbacks;
            Ok(group)
        }
    }
}

/// Parameters plus the sampling and KL-anchor snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PolicyParams,
    pub old: PolicySnapshot,
    pub reference: PolicySnapshot,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: PolicyParams) -> Self {
        TrainState {
            old: params.snapshot(),
            reference: params.snapshot(),
            params,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// The applied update direction before the learning rate.
    pub gradient: Vec<f64>,
    /// Mean KL to the reference for each group, evaluated before the update.
    pub kl: Vec<f64>,
    /// Groups that contributed to the update.
    pub surviving: usize,
}

/// One gradient-ascent step over a batch of groups.
///
/// Group gradients are averaged over the batch. Under `gpg_scale`,
/// degenerate groups are dropped and the rest are scaled by
/// `batch / surviving` before averaging.
pub fn train_step(state: &mut TrainState, groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<StepReport> {
    if groups.is_empty() {
        return Err(Error::invalid("train_step needs a non-empty batch"));
    }
    let dim = state.params.dim();
    let mut sum = vec![0.0; dim];
    let mut kl = Vec::with_capacity(groups.len());
    let gpg = cfg.strategy == Strategy::GpgScale;
    let mut surviving = 0;
    for group in groups {
        let mut grad = vec![0.0; dim];
        let (_, k) = surrogate_impl(
            &state.params,
            state.old.params(),
            state.reference.params(),
            group,
            cfg,
            Some(&mut grad),
        )?;
        kl.push(k);
        if gpg && group.is_degenerate() {
            continue;
        }
        surviving += 1;
        sum.iter_mut().zip(&grad).for_each(|(s, g)| *s += g);
    }
    let batch = groups.len() as f64;
    let gradient: Vec<f64> = if surviving == 0 {
        log::info!("step {}: every group in the batch is degenerate, skipping update", state.step);
        vec![0.0; dim]
    } else if gpg {
        let factor = batch / surviving as f64;
        sum.iter().map(|s| s * factor / batch).collect()
    } else {
        sum.iter().map(|s| s / batch).collect()
    };
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    for (t, g) in state.params.theta.iter_mut().zip(&gradient) {
        *t += cfg.learning_rate * g;
    }
    if state.params.theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numerical("non-finite theta after update".into()));
    }
    state.step += 1;
    if state.step.is_multiple_of(cfg.old_refresh_every) {
        state.old = state.params.snapshot();
    }
    if cfg.ref_refresh_every > 0 && state.step.is_multiple_of(cfg.ref_refresh_every) {
        state.reference = state.params.snapshot();
    }
    Ok(StepReport {
        gradient,
        kl,
        surviving,
    })
}

/// Everything a training run consumes besides its configuration.
#[derive(Debug, Clone)]
pub struct RunInputs<'a> {
    pub dataset: &'a Dataset,
    /// Difficulty scores used to report the active bin's mean score.
    pub scores: &'a [DifficultyScore],
    pub curriculum: Option<CurriculumState>,
    pub augmenter: Option<&'a Augmenter>,
    pub init: PolicyParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub state: TrainState,
    pub curriculum: Option<CurriculumState>,
}

fn bin_stats(
    curriculum: Option<&CurriculumState>,
    scores: &HashMap<&str, f64>,
    all_mean: f64,
    all_max: f64,
) -> (usize, f64, f64) {
    match curriculum {
        None => (0, all_mean, all_max),
        Some(c) => {
            let bin = c.active_bin();
            let vals: Vec<f64> = bin
                .question_ids
                .iter()
                .filter_map(|id| scores.get(id.as_str()).copied())
                .collect();
            let mean = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            (c.active_index(), mean, bin.upper)
        }
    }
}

/// Runs `cfg.steps` optimizer steps. Questions come from the curriculum when
/// one is given, otherwise uniformly from the dataset. The run is a pure
/// function of its inputs and `cfg.seed`.
pub fn run_training(inputs: RunInputs<'_>, cfg: &GrpoConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let RunInputs {
        dataset,
        scores,
        mut curriculum,
        augmenter,
        init,
    } = inputs;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if init.dim() != dataset.dimension {
        return Err(Error::DimensionMismatch {
            expected: dataset.dimension,
            found: init.dim(),
        });
    }
    if cfg.strategy == Strategy::Gdqa && augmenter.is_none() {
        return Err(Error::Config("strategy gdqa needs augmentation settings".into()));
    }
    let score_map: HashMap<&str, f64> = scores.iter().map(|s| (s.question_id.as_str(), s.score)).collect();
    let all_mean = if scores.is_empty() {
        f64::NAN
    } else {
        scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64
    };
    let all_max = scores.iter().map(|s| s.score).fold(f64::NAN, f64::max);

    let mut state = TrainState::new(init);
    let mut log = MetricsLog::default();
    let strategy = cfg.strategy.name().to_string();

    for step in 0..cfg.steps {
        let at_step = |e: Error| Error::Step {
            step,
            source: Box::new(e),
        };
        let (active_bin, bin_mean_sq, bin_upper) = bin_stats(curriculum.as_ref(), &score_map, all_mean, all_max);
        let mut question_rng = rng::stream(cfg.seed, &[tag::QUESTION, step as u64]);
        let mut groups = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let q = match &curriculum {
                Some(c) => c.sample_question(dataset, &mut question_rng).map_err(at_step)?,
                None => &dataset.records[question_rng.random_range(0..dataset.len())],
            };
            let group_index = (step * cfg.batch_size + b) as u64;
            let group_seed = rng::derive_seed(cfg.seed, &[group_index]);
            groups.push(build_group(q, &state.params, cfg, augmenter, group_seed).map_err(at_step)?);
        }
        let report = train_step(&mut state, &groups, cfg).map_err(at_step)?;
        let theta_norm = state.params.theta_norm();
        for (group, kl) in groups.iter().zip(&report.kl) {
            let (reward_mean, reward_std) = group.reward_mean_std();
            log.perturbation_fallbacks += group.fallbacks;
            log.rows.push(MetricsRow {
                step,
                question_id: group.question_id.clone(),
                anatomy_label: group.anatomy_label.clone(),
                strategy: strategy.clone(),
                reward_mean,
                reward_std,
                invalid: group.invalid,
                active_bin,
                bin_mean_sq,
                bin_upper,
                kl_mean: *kl,
                theta_norm,
            });
            if let Some(c) = curriculum.as_mut() {
                c.record_outcome(reward_mean).map_err(at_step)?;
            }
        }
        if let Some(c) = curriculum.as_mut() {
            if c.maybe_promote() {
                log::info!("step {step}: promoted to bin {}", c.active_index());
            }
        }
    }
    if log.perturbation_fallbacks > 0 {
        log::info!("{} perturbations fell back to the original stimulus", log.perturbation_fallbacks);
    }
    Ok(TrainOutcome { log, state, curriculum })
}
