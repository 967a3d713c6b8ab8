//! The simulated student: a softmax policy over a prompt's options.
//!
//! Option `j` scores `theta . (stimulus ⊙ feature_j) / temperature`. The
//! stimulus gates which coordinates of `theta` a question can use, so
//! questions share parameters only where their stimuli overlap.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::augment::VariantPrompt;
use crate::embedding::dot;
use crate::error::{Error, Result};
use crate::io::{self, Provenance};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    pub temperature: f64,
}

impl PolicyParams {
    pub fn new(theta: Vec<f64>, temperature: f64) -> Result<Self> {
        if theta.is_empty() || theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("theta must be non-empty and finite"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(PolicyParams { theta, temperature })
    }

    pub fn zeros(dimension: usize, temperature: f64) -> Result<Self> {
        PolicyParams::new(vec![0.0; dimension], temperature)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta_norm(&self) -> f64 {
        dot(&self.theta, &self.theta).sqrt()
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(self.clone())
    }

    /// Writes a checkpoint: a provenance comment, a `dimension <n>
    /// temperature <t>` header, then one theta component per line.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, provenance: Option<&Provenance>) -> std::io::Result<()> {
        if let Some(p) = provenance {
            writeln!(w, "{}", p.comment_line("#"))?;
        }
        writeln!(w, "dimension {} temperature {:?}", self.dim(), self.temperature)?;
        for t in &self.theta {
            writeln!(w, "{t:?}")?;
        }
        w.flush()
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, provenance: Option<&Provenance>) -> Result<()> {
        let path = path.as_ref();
        let w = io::create(path)?;
        self.write_checkpoint(w, provenance).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let lines = io::content_lines(path)?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut iter = lines.into_iter();
        let (hline, header) = iter
            .next()
            .ok_or_else(|| parse_err(1, "missing checkpoint header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (dimension, temperature) = match fields.as_slice() {
            ["dimension", d, "temperature", t] => (
                d.parse::<usize>().map_err(|e| parse_err(hline, e.to_string()))?,
                t.parse::<f64>().map_err(|e| parse_err(hline, e.to_string()))?,
            ),
            _ => return Err(parse_err(hline, format!("bad checkpoint header `{header}`"))),
        };
        let theta = iter
            .map(|(n, l)| l.trim().parse::<f64>().map_err(|e| parse_err(n, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if theta.len() != dimension {
            return Err(Error::DimensionMismatch {
                expected: dimension,
                found: theta.len(),
            });
        }
        PolicyParams::new(theta, temperature)
    }
}

/// Frozen copy of the parameters (old-policy and reference anchors).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot(PolicyParams);

impl PolicySnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

impl AsRef<PolicyParams> for PolicySnapshot {
    fn as_ref(&self) -> &PolicyParams {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseSample {
    pub option_index: usize,
    pub logprob: f64,
}

/// Per-option inputs `x_j = stimulus ⊙ feature_j` for one prompt.
#[derive(Debug, Clone)]
pub(crate) struct Contrasts(Vec<Vec<f64>>);

impl Contrasts {
    pub(crate) fn of(prompt: &VariantPrompt, dim: usize) -> Result<Self> {
        let s = prompt.stimulus.as_slice();
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: s.len(),
            });
        }
        let mut rows = Vec::with_capacity(prompt.options.len());
        for o in prompt.options.iter() {
            let f = o.feature.as_slice();
            if f.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: f.len(),
                });
            }
            rows.push(s.iter().zip(f).map(|(a, b)| a * b).collect());
        }
        Ok(Contrasts(rows))
    }

    pub(crate) fn len(&self) -> usize {
        self.0.len()
    }

    pub(crate) fn logits(&self, params: &PolicyParams) -> Vec<f64> {
        self.0
            .iter()
            .map(|x| dot(&params.theta, x) / params.temperature)
            .collect()
    }

    /// `sum_j w_j x_j / temperature`, the chain rule from logits to theta.
    pub(crate) fn backprop(&self, weights: &[f64], temperature: f64, out: &mut [f64]) {
        for (w, x) in weights.iter().zip(&self.0) {
            if *w != 0.0 {
                out.iter_mut().zip(x).for_each(|(o, xi)| *o += w * xi / temperature);
            }
        }
    }
}

pub fn option_logits(params: &PolicyParams, prompt: &VariantPrompt) -> Result<Vec<f64>> {
    Ok(Contrasts::of(prompt, params.dim())?.logits(params))
}

/// Numerically stable softmax.
pub fn action_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log-softmax; stays finite where `action_probs` would underflow to zero.
pub fn log_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::invalid(format!("option index {index} out of range for {len} options")));
    }
    Ok(())
}

/// Inverse-CDF draw from `probs` using one uniform variate.
pub(crate) fn draw(probs: &[f64], rng: &mut Stream) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (j, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = j;
        }
        cumulative += p;
        if u < cumulative && *p > 0.0 {
            return j;
        }
    }
    last_positive
}

pub fn sample_response(params: &PolicyParams, prompt: &VariantPrompt, rng: &mut Stream) -> Result<ResponseSample> {
    let logits = option_logits(params, prompt)?;
    let option_index = draw(&action_probs(&logits), rng);
    Ok(ResponseSample {
        option_index,
        logprob: log_probs(&logits)[option_index],
    })
}

pub fn logprob(params: &PolicyParams, prompt: &VariantPrompt, option_index: usize) -> Result<f64> {
    let logits = option_logits(params, prompt)?;
    check_index(option_index, logits.len())?;
    Ok(log_probs(&logits)[option_index])
}

/// `(x_j - sum_k p_k x_k) / temperature`.
pub fn grad_logprob(params: &PolicyParams, prompt: &VariantPrompt, option_index: usize) -> Result<Vec<f64>> {
    let contrasts = Contrasts::of(prompt, params.dim())?;
    check_index(option_index, contrasts.len())?;
    let probs = action_probs(&contrasts.logits(params));
    let weights: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(k, p)| f64::from(u8::from(k == option_index)) - p)
        .collect();
    let mut g = vec![0.0; params.dim()];
    contrasts.backprop(&weights, params.temperature, &mut g);
    Ok(g)
}

/// `sum_j p_new_j ln(p_new_j / p_ref_j)`; zero-probability terms of `p_new`
/// contribute nothing.
pub fn kl_divergence(p_new: &[f64], p_ref: &[f64]) -> Result<f64> {
    if p_new.len() != p_ref.len() {
        return Err(Error::DimensionMismatch {
            expected: p_new.len(),
            found: p_ref.len(),
        });
    }
    let mut kl = 0.0;
    for (j, (&p, &q)) in p_new.iter().zip(p_ref).enumerate() {
        if p > 0.0 {
            if q <= 0.0 {
                return Err(Error::InfiniteKl(j));
            }
            kl += p * (p / q).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// KL between the two policies on one prompt, computed from logits so that
/// it stays finite, with its gradient with respect to `params.theta`
/// accumulated into `grad` scaled by `scale`.
pub(crate) fn kl_and_grad(
    contrasts: &Contrasts,
    params: &PolicyParams,
    reference: &PolicyParams,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let lp = log_probs(&contrasts.logits(params));
    let lq = log_probs(&contrasts.logits(reference));
    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).map(|(pj, (a, b))| pj * (a - b)).sum();
    if let Some(grad) = grad {
        // dKL/dz_j = p_j (ln p_j - ln q_j - KL)
        let weights: Vec<f64> = p
            .iter()
            .zip(lp.iter().zip(&lq))
            .map(|(pj, (a, b))| scale * pj * (a - b - kl))
            .collect();
        contrasts.backprop(&weights, params.temperature, grad);
    }
    kl.max(0.0)
}
