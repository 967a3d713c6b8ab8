//! Question data model, the line-delimited dataset format and the seeded
//! synthetic task generator.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm, Embedding};
use crate::error::{Error, Result};
use crate::io::{self, Header};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionEntry {
    pub text: String,
    pub feature: Embedding,
}

/// One multiple-choice question: an image (as a feature vector), a textual
/// question and its answer options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub id: String,
    pub text: String,
    pub image_feature: Embedding,
    pub options: Arc<[OptionEntry]>,
    pub correct_index: usize,
    pub anatomy_label: String,
    #[serde(default)]
    pub text_variants: Vec<String>,
}

impl QuestionRecord {
    fn validate(&self, dimension: usize) -> Result<()> {
        let fail = |message: String| {
            Err(Error::Validation {
                id: self.id.clone(),
                message,
            })
        };
        if self.options.len() < 2 {
            return fail(format!("needs at least 2 options, has {}", self.options.len()));
        }
        if self.correct_index >= self.options.len() {
            return fail(format!(
                "correct_index {} out of range for {} options",
                self.correct_index,
                self.options.len()
            ));
        }
        if self.image_feature.dim() != dimension {
            return fail(format!(
                "image_feature has dimension {}, dataset declares {dimension}",
                self.image_feature.dim()
            ));
        }
        let mut seen = HashSet::new();
        for (i, o) in self.options.iter().enumerate() {
            if o.feature.dim() != dimension {
                return fail(format!(
                    "option {i} feature has dimension {}, dataset declares {dimension}",
                    o.feature.dim()
                ));
            }
            if !seen.insert(o.text.as_str()) {
                return fail(format!("duplicate option text `{}`", o.text));
            }
        }
        Ok(())
    }
}

/// A validated, immutable collection of questions sharing one feature
/// dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dimension: usize,
    pub records: Vec<QuestionRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.dimension == other.dimension && self.records == other.records
    }
}

impl Dataset {
    pub fn new(dimension: usize, records: Vec<QuestionRecord>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::invalid("dataset dimension must be positive"));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate(dimension)?;
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::Validation {
                    id: r.id.clone(),
                    message: "duplicate id".into(),
                });
            }
        }
        Ok(Dataset {
            dimension,
            records,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QuestionRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Keeps the records for which `keep` returns true, in order.
    pub fn filter(&self, mut keep: impl FnMut(&QuestionRecord) -> bool) -> Dataset {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Dataset::new(self.dimension, records).expect("subset of a valid dataset is valid")
    }

    /// Distinct anatomy labels in first-appearance order.
    pub fn anatomy_labels(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.anatomy_label.as_str()))
            .map(|r| r.anatomy_label.clone())
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        io::write_json_line(&mut w, &Header { dimension: self.dimension })?;
        for r in &self.records {
            io::write_json_line(&mut w, r)?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let w = io::create(path)?;
        self.write(w).map_err(|e| Error::io(path, e))
    }
}

/// Reads a dataset file: a `{"dimension": n}` header line, then one JSON
/// record per line. Blank lines and `#` comment lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut lines = io::content_lines(path)?.into_iter();
    let Some((line_no, first)) = lines.next() else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing dimension header".into(),
        });
    };
    let header: Header = io::parse_line(path, line_no, &first)?;
    let records = lines
        .map(|(n, l)| io::parse_line::<QuestionRecord>(path, n, &l))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(header.dimension, records)
}

const ANATOMY_NAMES: [&str; 8] = [
    "liver",
    "gallbladder",
    "cystic duct",
    "cystic artery",
    "abdominal wall",
    "omentum",
    "hepatocystic triangle",
    "cystic plate",
];

fn anatomy_name(k: usize) -> String {
    if k < ANATOMY_NAMES.len() {
        ANATOMY_NAMES[k].to_string()
    } else {
        format!("{} {}", ANATOMY_NAMES[k % ANATOMY_NAMES.len()], k / ANATOMY_NAMES.len())
    }
}

/// Parameters of the synthetic task family.
///
/// Every class has one correct-option prototype; each distractor sits at
/// cosine `1 - margin/2` from it (plus a small per-question jitter), so the
/// class margin directly sets the difficulty score.
///
/// Image features gate which parameter coordinates a question can use: all
/// classes see the `shared_dims` leading coordinates, and each class also
/// sees its own block of private coordinates. A shared "lure" direction in
/// the shared block is tilted into the correct prototypes of easy classes
/// (margin at or above `lure_threshold`) and into the distractors of hard
/// classes, so learning the easy classes first makes the hard classes'
/// distractors attractive.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dimension: usize,
    pub questions_per_class: usize,
    pub options_per_question: usize,
    /// One separation margin per class, each in (0, 2].
    pub margins: Vec<f64>,
    pub shared_dims: usize,
    pub shared_gain: f64,
    pub private_gain: f64,
    pub stimulus_jitter: f64,
    pub score_jitter: f64,
    pub lure_threshold: f64,
    pub lure_correct: f64,
    pub lure_distractor: f64,
    pub private_deviation: f64,
    pub deviation_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dimension: 16,
            questions_per_class: 50,
            options_per_question: 4,
            margins: vec![1.6, 1.0, 0.5, 0.15],
            shared_dims: 8,
            shared_gain: 1.0,
            private_gain: 2.0,
            stimulus_jitter: 0.1,
            score_jitter: 0.02,
            lure_threshold: 0.3,
            lure_correct: 1.0,
            lure_distractor: 1.5,
            private_deviation: 0.5,
            deviation_noise: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        self.margins.len()
    }

    /// Target difficulty score for a class margin.
    pub fn target_score(margin: f64) -> f64 {
        1.0 - margin / 2.0
    }

    fn private_dims(&self) -> usize {
        (self.dimension - self.shared_dims) / self.num_classes().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension < 2 {
            return Err(Error::invalid("synthetic dimension must be at least 2"));
        }
        if self.margins.is_empty() {
            return Err(Error::invalid("synthetic spec needs at least one class margin"));
        }
        if let Some(m) = self.margins.iter().find(|m| !(**m > 0.0 && **m <= 2.0)) {
            return Err(Error::invalid(format!("class margin {m} outside (0, 2]")));
        }
        if self.options_per_question < 2 {
            return Err(Error::invalid("options per question must be at least 2"));
        }
        if self.shared_dims > self.dimension {
            return Err(Error::invalid("shared_dims exceeds dimension"));
        }
        if !(0.0..0.5).contains(&self.score_jitter) {
            return Err(Error::invalid("score_jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut Stream, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

/// Deterministic synthetic dataset for `(spec, seed)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.dimension;
    let shared = spec.shared_dims;
    let per_class = spec.private_dims();
    let mut rng = rng::stream(seed, &[rng::tag::SYNTH]);

    let mut lure = vec![0.0; dim];
    if shared > 0 {
        let l = normalized(gaussian(&mut rng, shared));
        lure[..shared].copy_from_slice(&l);
    }

    let mut records = Vec::with_capacity(spec.num_classes() * spec.questions_per_class);
    for (k, &margin) in spec.margins.iter().enumerate() {
        let label = anatomy_name(k);
        let easy = margin >= spec.lure_threshold;
        let private = shared + k * per_class..shared + (k + 1) * per_class;

        let mut stimulus = vec![0.0; dim];
        stimulus[..shared].iter_mut().for_each(|x| *x = spec.shared_gain);
        stimulus[private.clone()].iter_mut().for_each(|x| *x = spec.private_gain);

        let mut private_dir = vec![0.0; dim];
        if per_class > 0 {
            let p = normalized(gaussian(&mut rng, per_class));
            private_dir[private.clone()].copy_from_slice(&p);
        }

        let mut proto = gaussian(&mut rng, dim);
        if easy {
            axpy(spec.lure_correct * norm(&proto), &lure, &mut proto);
        }
        let correct = normalized(proto);

        for qi in 0..spec.questions_per_class {
            let mut image = stimulus.clone();
            axpy(spec.stimulus_jitter, &gaussian(&mut rng, dim), &mut image);

            let mut features = vec![correct.clone()];
            for _ in 1..spec.options_per_question {
                let jitter = rng.random_range(-1.0..=1.0) * spec.score_jitter;
                let cos = (SynthSpec::target_score(margin) + jitter).clamp(-1.0, 1.0);
                let sin = (1.0 - cos * cos).sqrt();
                let u = loop {
                    let mut u: Vec<f64> = gaussian(&mut rng, dim)
                        .into_iter()
                        .map(|x| x * spec.deviation_noise / (dim as f64).sqrt())
                        .collect();
                    axpy(spec.private_deviation, &private_dir, &mut u);
                    if !easy {
                        axpy(spec.lure_distractor, &lure, &mut u);
                    }
                    let along = dot(&u, &correct);
                    axpy(-along, &correct, &mut u);
                    if norm(&u) > 1e-9 {
                        break normalized(u);
                    }
                };
                let mut d: Vec<f64> = correct.iter().map(|c| c * cos).collect();
                axpy(sin, &u, &mut d);
                features.push(d);
            }

            let mut order: Vec<usize> = (0..spec.options_per_question).collect();
            order.shuffle(&mut rng);
            let correct_index = order.iter().position(|&o| o == 0).unwrap();
            let options: Vec<OptionEntry> = order
                .iter()
                .map(|&o| OptionEntry {
                    text: if o == 0 {
                        label.clone()
                    } else {
                        format!("{label} look-alike {o}")
                    },
                    feature: Embedding::new(features[o].clone()).expect("finite synthetic feature"),
                })
                .collect();

            let region = qi + 1;
            records.push(QuestionRecord {
                id: format!("c{k}-q{qi:03}"),
                text: format!("Which anatomical structure is visible in region {region} of the image?"),
                image_feature: Embedding::new(image).expect("finite synthetic stimulus"),
                options: Arc::from(options),
                correct_index,
                anatomy_label: label.clone(),
                text_variants: vec![
                    format!("Can you identify the anatomy present in region {region} of the picture?"),
                    format!("What structure appears in region {region}?"),
                    format!("Name the anatomical structure located in region {region} of this image."),
                ],
            });
        }
    }
    Dataset::new(dim, records)
}
