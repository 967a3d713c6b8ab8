//! Evaluation metrics, training telemetry and report files.
//!
//! Avg@5 here is per-sample binary correctness averaged over five samples,
//! not an expert-graded score. Reports carry a note saying so.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::augment::VariantPrompt;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::{self, Provenance};
use crate::policy::{self, PolicyParams};
use crate::rng;

pub const AVG_NOTE: &str = "avg@5 is binary correctness averaged over 5 samples, not an expert-graded score";

/// One logged rollout group.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub question_id: String,
    pub anatomy_label: String,
    pub strategy: String,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub invalid: bool,
    pub active_bin: usize,
    pub bin_mean_sq: f64,
    pub bin_upper: f64,
    pub kl_mean: f64,
    pub theta_norm: f64,
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "step",
    "question_id",
    "anatomy_label",
    "strategy",
    "reward_mean",
    "reward_std",
    "invalid",
    "active_bin",
    "bin_mean_sq",
    "kl_mean",
    "theta_norm",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    /// Perturbations that exhausted their rejection budget and kept the
    /// original stimulus.
    pub perturbation_fallbacks: usize,
}

impl MetricsLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn anatomy_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.rows.iter().map(|r| r.anatomy_label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    pub fn write_csv<W: Write>(&self, mut w: W, provenance: Option<&Provenance>) -> std::io::Result<()> {
        if let Some(p) = provenance {
            writeln!(w, "{}", p.comment_line("#"))?;
        }
        writeln!(w, "{}", METRICS_COLUMNS.join(","))?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{:?},{:?},{},{},{:?},{:?},{:?}",
                r.step,
                csv_field(&r.question_id),
                csv_field(&r.anatomy_label),
                r.strategy,
                r.reward_mean,
                r.reward_std,
                u8::from(r.invalid),
                r.active_bin,
                r.bin_mean_sq,
                r.kl_mean,
                r.theta_norm
            )?;
        }
        w.flush()
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, provenance: Option<&Provenance>) -> Result<()> {
        let path = path.as_ref();
        let w = io::create(path)?;
        self.write_csv(w, provenance).map_err(|e| Error::io(path, e))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn check_samples(samples: &[Vec<usize>], truths: &[usize], k: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("metric undefined on an empty question set"));
    }
    if samples.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} sample rows but {} truths",
            samples.len(),
            truths.len()
        )));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if let Some(row) = samples.iter().find(|s| s.len() < k) {
        return Err(Error::invalid(format!("k = {k} exceeds sample count {}", row.len())));
    }
    Ok(())
}

/// Fraction of questions where any of the first `k` samples is correct.
pub fn pass_at_k(samples: &[Vec<usize>], truths: &[usize], k: usize) -> Result<f64> {
    check_samples(samples, truths, k)?;
    let hits = samples
        .iter()
        .zip(truths)
        .filter(|(s, t)| s[..k].contains(t))
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

pub fn pass_at_1(samples: &[Vec<usize>], truths: &[usize]) -> Result<f64> {
    pass_at_k(samples, truths, 1)
}

/// Mean per-question fraction of correct samples among the first five.
pub fn avg_at_5(samples: &[Vec<usize>], truths: &[usize]) -> Result<f64> {
    check_samples(samples, truths, 5)?;
    let total: f64 = samples
        .iter()
        .zip(truths)
        .map(|(s, t)| s[..5].iter().filter(|o| *o == t).count() as f64 / 5.0)
        .sum();
    Ok(total / samples.len() as f64)
}

/// Most frequent option among `votes`, smallest index on ties.
pub fn majority_vote(votes: &[usize]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in votes {
        *counts.entry(*v).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|(_, c)| *c == best).map(|(o, _)| o)
}

pub fn major_at_5(samples: &[Vec<usize>], truths: &[usize]) -> Result<f64> {
    check_samples(samples, truths, 5)?;
    let hits = samples
        .iter()
        .zip(truths)
        .filter(|(s, t)| majority_vote(&s[..5]) == Some(**t))
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Rolling invalid-group fraction over the trailing `window` groups.
#[derive(Debug, Clone, PartialEq)]
pub struct InvalidCurves {
    pub overall: Vec<f64>,
    /// Per label, the fraction of that label's groups within the trailing
    /// window that were invalid; `None` where the window holds none.
    pub by_anatomy: BTreeMap<String, Vec<Option<f64>>>,
}

/// Rolling invalid ratio. Before the window fills, the ratio is taken over
/// the groups seen so far.
pub fn invalid_ratio(log: &MetricsLog, window: usize, group_by_anatomy: bool) -> Result<InvalidCurves> {
    if window == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    let rows = &log.rows;
    let labels = if group_by_anatomy { log.anatomy_labels() } else { Vec::new() };
    let mut overall = Vec::with_capacity(rows.len());
    let mut by_anatomy: BTreeMap<String, Vec<Option<f64>>> =
        labels.iter().map(|l| (l.clone(), Vec::with_capacity(rows.len()))).collect();
    let mut invalid = 0usize;
    let mut per_label: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (t, r) in rows.iter().enumerate() {
        invalid += usize::from(r.invalid);
        let e = per_label.entry(r.anatomy_label.as_str()).or_default();
        e.0 += usize::from(r.invalid);
        e.1 += 1;
        if t >= window {
            let old = &rows[t - window];
            invalid -= usize::from(old.invalid);
            let e = per_label.get_mut(old.anatomy_label.as_str()).expect("label seen");
            e.0 -= usize::from(old.invalid);
            e.1 -= 1;
        }
        let n = (t + 1).min(window);
        overall.push(invalid as f64 / n as f64);
        for (label, curve) in by_anatomy.iter_mut() {
            let ratio = per_label
                .get(label.as_str())
                .filter(|(_, c)| *c > 0)
                .map(|(i, c)| *i as f64 / *c as f64);
            curve.push(ratio);
        }
    }
    Ok(InvalidCurves { overall, by_anatomy })
}

/// Trailing mean of `values` over `window` entries (partial at the start).
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (t, v) in values.iter().enumerate() {
        sum += v;
        if t >= window {
            sum -= values[t - window];
        }
        out.push(sum / (t + 1).min(window) as f64);
    }
    out
}

/// Writes `curves.csv`: rolling reward mean, rolling invalid ratio overall
/// and per anatomy label, active bin, and the active bin's mean score and
/// upper edge. One row per logged group.
pub fn write_curves<W: Write>(log: &MetricsLog, window: usize, mut w: W, provenance: Option<&Provenance>) -> Result<()> {
    let curves = invalid_ratio(log, window, true)?;
    let rewards: Vec<f64> = log.rows.iter().map(|r| r.reward_mean).collect();
    let reward = rolling_mean(&rewards, window);
    let io_err = |e| Error::io("curves", e);
    if let Some(p) = provenance {
        writeln!(w, "{}", p.comment_line("#")).map_err(io_err)?;
    }
    let mut header = vec!["step".to_string(), "reward_mean".into(), "invalid_ratio".into()];
    header.extend(curves.by_anatomy.keys().map(|l| csv_field(&format!("invalid_{l}"))));
    header.extend(["active_bin".into(), "bin_mean_sq".into(), "bin_upper".into()]);
    writeln!(w, "{}", header.join(",")).map_err(io_err)?;
    for (t, r) in log.rows.iter().enumerate() {
        let mut line = format!("{},{:?},{:?}", r.step, reward[t], curves.overall[t]);
        for curve in curves.by_anatomy.values() {
            match curve[t] {
                Some(v) => line.push_str(&format!(",{v:?}")),
                None => line.push(','),
            }
        }
        line.push_str(&format!(",{},{:?},{:?}", r.active_bin, r.bin_mean_sq, r.bin_upper));
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn save_curves(log: &MetricsLog, window: usize, path: impl AsRef<Path>, provenance: Option<&Provenance>) -> Result<()> {
    let path = path.as_ref();
    let w = io::create(path)?;
    write_curves(log, window, w, provenance).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionEval {
    pub question_id: String,
    pub anatomy_label: String,
    pub correct_index: usize,
    pub samples: Vec<usize>,
}

impl QuestionEval {
    pub fn correct(&self) -> Vec<bool> {
        self.samples.iter().map(|s| *s == self.correct_index).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub questions: usize,
    pub avg_at_5: f64,
    pub pass_at_1: f64,
    pub major_at_5: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub questions: Vec<QuestionEval>,
    pub overall: Aggregates,
    pub by_anatomy: BTreeMap<String, Aggregates>,
}

impl EvalResult {
    /// Recomputes every aggregate from per-question samples.
    pub fn from_questions(questions: Vec<QuestionEval>) -> Result<Self> {
        let overall = aggregate(questions.iter())?;
        let mut groups: BTreeMap<String, Vec<&QuestionEval>> = BTreeMap::new();
        for q in &questions {
            groups.entry(q.anatomy_label.clone()).or_default().push(q);
        }
        let by_anatomy = groups
            .into_iter()
            .map(|(label, qs)| Ok((label, aggregate(qs.into_iter())?)))
            .collect::<Result<_>>()?;
        Ok(EvalResult {
            questions,
            overall,
            by_anatomy,
        })
    }

    pub fn write_questions<W: Write>(&self, mut w: W, provenance: Option<&Provenance>) -> std::io::Result<()> {
        if let Some(p) = provenance {
            writeln!(w, "{}", p.comment_line("#"))?;
        }
        writeln!(w, "question_id,anatomy_label,correct_index,samples,num_correct")?;
        for q in &self.questions {
            let samples: Vec<String> = q.samples.iter().map(usize::to_string).collect();
            writeln!(
                w,
                "{},{},{},{},{}",
                csv_field(&q.question_id),
                csv_field(&q.anatomy_label),
                q.correct_index,
                samples.join(" "),
                q.correct().iter().filter(|c| **c).count()
            )?;
        }
        w.flush()
    }

    pub fn write_summary<W: Write>(&self, mut w: W, provenance: Option<&Provenance>) -> std::io::Result<()> {
        if let Some(p) = provenance {
            writeln!(w, "{}", p.comment_line("#"))?;
        }
        writeln!(w, "# {AVG_NOTE}")?;
        writeln!(w, "scope,questions,avg_at_5,pass_at_1,major_at_5")?;
        let row = |w: &mut W, scope: &str, a: &Aggregates| {
            writeln!(
                w,
                "{},{},{:?},{:?},{:?}",
                csv_field(scope),
                a.questions,
                a.avg_at_5,
                a.pass_at_1,
                a.major_at_5
            )
        };
        row(&mut w, "overall", &self.overall)?;
        for (label, a) in &self.by_anatomy {
            row(&mut w, label, a)?;
        }
        w.flush()
    }
}

fn aggregate<'a>(qs: impl Iterator<Item = &'a QuestionEval>) -> Result<Aggregates> {
    let (samples, truths): (Vec<Vec<usize>>, Vec<usize>) = qs.map(|q| (q.samples.clone(), q.correct_index)).unzip();
    Ok(Aggregates {
        questions: samples.len(),
        avg_at_5: avg_at_5(&samples, &truths)?,
        pass_at_1: pass_at_1(&samples, &truths)?,
        major_at_5: major_at_5(&samples, &truths)?,
    })
}

/// Samples each question's unmodified prompt `samples_per_question` times.
/// Question `i` draws from its own stream, so results do not depend on
/// evaluation order.
pub fn evaluate(params: &PolicyParams, dataset: &Dataset, seed: u64, samples_per_question: usize) -> Result<EvalResult> {
    if samples_per_question < 5 {
        return Err(Error::invalid("evaluation needs at least 5 samples per question"));
    }
    let mut questions = Vec::with_capacity(dataset.len());
    for (i, q) in dataset.records.iter().enumerate() {
        let prompt = VariantPrompt::original(q);
        let probs = policy::action_probs(&policy::option_logits(params, &prompt)?);
        let mut rng = rng::stream(seed, &[rng::tag::EVAL, i as u64]);
        let samples = (0..samples_per_question).map(|_| policy::draw(&probs, &mut rng)).collect();
        questions.push(QuestionEval {
            question_id: q.id.clone(),
            anatomy_label: q.anatomy_label.clone(),
            correct_index: q.correct_index,
            samples,
        });
    }
    EvalResult::from_questions(questions)
}
