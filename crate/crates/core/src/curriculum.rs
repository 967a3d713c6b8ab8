//! Similarity curriculum: questions are binned by difficulty score and
//! training moves to the next bin once rolling performance on the current
//! one clears a threshold.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, QuestionRecord};
use crate::embedding::DifficultyScore;
use crate::error::{Error, Result};
use crate::io::{self, Provenance};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumBin {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub question_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BinStrategy {
    EqualWidth,
    #[default]
    Quantile,
}

impl FromStr for BinStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-width" | "equal_width" => Ok(BinStrategy::EqualWidth),
            "quantile" => Ok(BinStrategy::Quantile),
            other => Err(Error::Config(format!("unknown bin strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for BinStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BinStrategy::EqualWidth => "equal-width",
            BinStrategy::Quantile => "quantile",
        })
    }
}

/// Splits scored questions into `num_bins` ordered bins.
///
/// Equal-width bins split `[min, max]` evenly; membership is
/// `lower <= s < upper`, with the last bin closed above. Quantile bins sort by
/// (score, id) and cut the sequence into runs whose sizes differ by at most
/// one, so equal scores straddling a cut are separated by id.
pub fn partition_bins(scores: &[DifficultyScore], num_bins: usize, strategy: BinStrategy) -> Result<Vec<CurriculumBin>> {
    if num_bins == 0 {
        return Err(Error::invalid("num_bins must be at least 1"));
    }
    if scores.is_empty() {
        return Err(Error::invalid("cannot partition an empty score set"));
    }
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score for `{}`", s.question_id)));
    }
    let min = scores.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
    let max = scores.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);

    match strategy {
        BinStrategy::EqualWidth => {
            let width = (max - min) / num_bins as f64;
            let edges: Vec<f64> = (0..=num_bins)
                .map(|i| if i == num_bins { max } else { min + i as f64 * width })
                .collect();
            let mut bins: Vec<CurriculumBin> = (0..num_bins)
                .map(|i| CurriculumBin {
                    index: i,
                    lower: edges[i],
                    upper: edges[i + 1],
                    question_ids: Vec::new(),
                })
                .collect();
            for s in scores {
                let i = (0..num_bins)
                    .find(|&i| edges[i] <= s.score && (s.score < edges[i + 1] || i == num_bins - 1))
                    .unwrap_or(num_bins - 1);
                bins[i].question_ids.push(s.question_id.clone());
            }
            Ok(bins)
        }
        BinStrategy::Quantile => {
            let mut sorted: Vec<&DifficultyScore> = scores.iter().collect();
            sorted.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.question_id.cmp(&b.question_id)));
            let mut distinct = sorted.iter().map(|s| s.score).collect::<Vec<_>>();
            distinct.dedup();
            if num_bins > distinct.len() {
                return Err(Error::invalid(format!(
                    "{num_bins} quantile bins requested but only {} distinct scores",
                    distinct.len()
                )));
            }
            let (base, extra) = (sorted.len() / num_bins, sorted.len() % num_bins);
            let mut bins = Vec::with_capacity(num_bins);
            let mut start = 0;
            for i in 0..num_bins {
                let end = start + base + usize::from(i < extra);
                bins.push(CurriculumBin {
                    index: i,
                    lower: if i == 0 { min } else { sorted[start].score },
                    upper: if i + 1 == num_bins { max } else { sorted[end].score },
                    question_ids: sorted[start..end].iter().map(|s| s.question_id.clone()).collect(),
                });
                start = end;
            }
            Ok(bins)
        }
    }
}

pub fn write_bins<W: Write>(bins: &[CurriculumBin], mut w: W, provenance: Option<&Provenance>) -> std::io::Result<()> {
    if let Some(p) = provenance {
        writeln!(w, "{}", p.comment_line("#"))?;
    }
    for b in bins {
        io::write_json_line(&mut w, b)?;
    }
    w.flush()
}

pub fn save_bins(bins: &[CurriculumBin], path: impl AsRef<Path>, provenance: Option<&Provenance>) -> Result<()> {
    let path = path.as_ref();
    let w = io::create(path)?;
    write_bins(bins, w, provenance).map_err(|e| Error::io(path, e))
}

pub fn load_bins(path: impl AsRef<Path>) -> Result<Vec<CurriculumBin>> {
    let path = path.as_ref();
    io::content_lines(path)?
        .into_iter()
        .map(|(n, l)| io::parse_line(path, n, &l))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSettings {
    pub num_bins: usize,
    pub strategy: BinStrategy,
    pub threshold: f64,
    pub window_size: usize,
    pub replay_fraction: f64,
}

impl Default for CurriculumSettings {
    fn default() -> Self {
        CurriculumSettings {
            num_bins: 4,
            strategy: BinStrategy::Quantile,
            threshold: 0.7,
            window_size: 50,
            replay_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub bins: Vec<CurriculumBin>,
    active_index: usize,
    window: VecDeque<f64>,
    pub threshold: f64,
    pub window_size: usize,
    pub replay_fraction: f64,
}

impl CurriculumState {
    pub fn new(bins: Vec<CurriculumBin>, threshold: f64, window_size: usize, replay_fraction: f64) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::invalid("curriculum needs at least one bin"));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::invalid("threshold must lie in [0, 1]"));
        }
        if window_size == 0 {
            return Err(Error::invalid("window size must be positive"));
        }
        if !(0.0..1.0).contains(&replay_fraction) {
            return Err(Error::invalid("replay_fraction must lie in [0, 1)"));
        }
        Ok(CurriculumState {
            bins,
            active_index: 0,
            window: VecDeque::with_capacity(window_size),
            threshold,
            window_size,
            replay_fraction,
        })
    }

    /// Scores and bins `scores` according to `settings`.
    pub fn from_scores(scores: &[DifficultyScore], settings: &CurriculumSettings) -> Result<Self> {
        let bins = partition_bins(scores, settings.num_bins, settings.strategy)?;
        CurriculumState::new(bins, settings.threshold, settings.window_size, settings.replay_fraction)
    }

    pub fn active_index(&self) -> usize {
        self.active_index
    }

    pub fn active_bin(&self) -> &CurriculumBin {
        &self.bins[self.active_index]
    }

    pub fn window(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    pub fn window_mean(&self) -> Option<f64> {
        (!self.window.is_empty()).then(|| self.window.iter().sum::<f64>() / self.window.len() as f64)
    }

    pub fn record_outcome(&mut self, group_mean_reward: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&group_mean_reward) {
            return Err(Error::invalid(format!("group mean reward {group_mean_reward} outside [0, 1]")));
        }
        if self.window.len() == self.window_size {
            self.window.pop_front();
        }
        self.window.push_back(group_mean_reward);
        Ok(())
    }

    /// Advances one bin and clears the window when the window is full, its
    /// mean reaches the threshold and a harder bin exists.
    pub fn maybe_promote(&mut self) -> bool {
        let ready = self.window.len() == self.window_size
            && self.window_mean().is_some_and(|m| m >= self.threshold)
            && self.active_index + 1 < self.bins.len();
        if ready {
            self.active_index += 1;
            self.window.clear();
        }
        ready
    }

    /// Uniform draw from the active bin, or with probability
    /// `replay_fraction` from all earlier bins combined.
    pub fn sample_question<'d>(&self, dataset: &'d Dataset, rng: &mut Stream) -> Result<&'d QuestionRecord> {
        let active = self.active_bin();
        if active.question_ids.is_empty() {
            return Err(Error::EmptyBin(self.active_index));
        }
        let replay = rng.random::<f64>() < self.replay_fraction && self.active_index > 0;
        let id = if replay {
            let total: usize = self.bins[..self.active_index].iter().map(|b| b.question_ids.len()).sum();
            if total == 0 {
                &active.question_ids[rng.random_range(0..active.question_ids.len())]
            } else {
                let mut k = rng.random_range(0..total);
                let mut chosen = None;
                for b in &self.bins[..self.active_index] {
                    if k < b.question_ids.len() {
                        chosen = Some(&b.question_ids[k]);
                        break;
                    }
                    k -= b.question_ids.len();
                }
                chosen.expect("index within total")
            }
        } else {
            &active.question_ids[rng.random_range(0..active.question_ids.len())]
        };
        dataset
            .get(id)
            .ok_or_else(|| Error::invalid(format!("curriculum question `{id}` not in dataset")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SynthSpec};
    use crate::rng;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn scores(values: &[f64]) -> Vec<DifficultyScore> {
        values
            .iter()
            .enumerate()
            .map(|(i, &score)| DifficultyScore {
                question_id: format!("q{i}"),
                score,
            })
            .collect()
    }

    fn ids(bin: &CurriculumBin) -> Vec<&str> {
        bin.question_ids.iter().map(String::as_str).collect()
    }

    #[test]
    fn partition_examples() {
        let s = scores(&[0.1, 0.2, 0.8, 0.9]);
        for strategy in [BinStrategy::EqualWidth, BinStrategy::Quantile] {
            let bins = partition_bins(&s, 2, strategy).unwrap();
            assert_eq!(ids(&bins[0]), ["q0", "q1"]);
            assert_eq!(ids(&bins[1]), ["q2", "q3"]);
        }
        let bins = partition_bins(&s, 1, BinStrategy::Quantile).unwrap();
        assert_eq!(bins[0].question_ids.len(), 4);
        let bins = partition_bins(&s, 1, BinStrategy::EqualWidth).unwrap();
        assert_eq!(bins[0].question_ids.len(), 4);
        assert_eq!((bins[0].lower, bins[0].upper), (0.1, 0.9));
    }

    #[test]
    fn partition_errors() {
        let s = scores(&[0.5, 0.5, 0.7]);
        assert!(partition_bins(&s, 3, BinStrategy::Quantile).is_err());
        assert!(partition_bins(&s, 0, BinStrategy::Quantile).is_err());
        assert!(partition_bins(&[], 1, BinStrategy::Quantile).is_err());
        assert!(partition_bins(&s, 3, BinStrategy::EqualWidth).is_ok());
    }

    #[test]
    fn quantile_ties_break_by_id() {
        let s = scores(&[0.5, 0.5, 0.5, 0.9]);
        let bins = partition_bins(&s, 2, BinStrategy::Quantile).unwrap();
        assert_eq!(ids(&bins[0]), ["q0", "q1"]);
        assert_eq!(ids(&bins[1]), ["q2", "q3"]);
    }

    fn state(window: usize, threshold: f64, nbins: usize) -> CurriculumState {
        let bins = (0..nbins)
            .map(|i| CurriculumBin {
                index: i,
                lower: i as f64,
                upper: i as f64 + 1.0,
                question_ids: vec![format!("b{i}")],
            })
            .collect();
        CurriculumState::new(bins, threshold, window, 0.0).unwrap()
    }

    #[test]
    fn window_ring_buffer() {
        let mut s = state(3, 0.7, 2);
        s.record_outcome(0.5).unwrap();
        assert_eq!(s.window().collect::<Vec<_>>(), [0.5]);
        for r in [0.1, 0.2, 0.3] {
            s.record_outcome(r).unwrap();
        }
        assert_eq!(s.window().collect::<Vec<_>>(), [0.1, 0.2, 0.3]);
        s.record_outcome(0.4).unwrap();
        assert_eq!(s.window().collect::<Vec<_>>(), [0.2, 0.3, 0.4]);
        assert!(s.record_outcome(1.2).is_err());
        assert!(s.record_outcome(-0.1).is_err());
    }

    #[test]
    fn promotion_rule() {
        let mut s = state(4, 0.7, 4);
        for r in [0.5, 1.0, 0.75, 0.75] {
            s.record_outcome(r).unwrap();
        }
        assert!(s.maybe_promote());
        assert_eq!(s.active_index(), 1);
        assert_eq!(s.window().len(), 0);

        s.record_outcome(1.0).unwrap();
        s.record_outcome(1.0).unwrap();
        let before = s.clone();
        assert!(!s.maybe_promote());
        assert!(!s.maybe_promote());
        assert_eq!(s, before);

        let mut last = state(2, 0.7, 1);
        last.record_outcome(1.0).unwrap();
        last.record_outcome(1.0).unwrap();
        assert!(!last.maybe_promote());
        assert_eq!(last.active_index(), 0);

        let mut low = state(2, 0.7, 3);
        low.record_outcome(0.6).unwrap();
        low.record_outcome(0.7).unwrap();
        assert!(!low.maybe_promote());
    }

    #[test]
    fn sampling_rules() {
        let spec = SynthSpec {
            questions_per_class: 20,
            margins: vec![1.5, 0.5],
            ..SynthSpec::default()
        };
        let d = synth_generate(&spec, 1).unwrap();
        let sc = crate::embedding::score_dataset(&d, None).unwrap();
        let bins = partition_bins(&sc, 2, BinStrategy::Quantile).unwrap();
        let early: HashSet<&String> = bins[0].question_ids.iter().collect();
        let mut rng = rng::stream(5, &[]);

        let mut single = CurriculumState::new(bins.clone(), 0.7, 5, 0.0).unwrap();
        single.bins[0].question_ids.truncate(1);
        let only = single.bins[0].question_ids[0].clone();
        for _ in 0..50 {
            assert_eq!(single.sample_question(&d, &mut rng).unwrap().id, only);
        }

        let s = CurriculumState::new(bins.clone(), 0.7, 5, 0.5).unwrap();
        for _ in 0..200 {
            assert!(early.contains(&s.sample_question(&d, &mut rng).unwrap().id));
        }

        let mut s = CurriculumState::new(bins.clone(), 0.0, 1, 0.25).unwrap();
        s.record_outcome(1.0).unwrap();
        assert!(s.maybe_promote());
        let n = 10_000;
        let replayed = (0..n)
            .filter(|_| early.contains(&s.sample_question(&d, &mut rng).unwrap().id))
            .count();
        assert!((replayed as f64 / n as f64 - 0.25).abs() < 0.02);

        let mut empty = CurriculumState::new(bins, 0.7, 5, 0.0).unwrap();
        empty.bins[0].question_ids.clear();
        assert!(matches!(empty.sample_question(&d, &mut rng), Err(Error::EmptyBin(0))));
    }

    #[test]
    fn bins_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bins.jsonl");
        let bins = partition_bins(&scores(&[0.1, 0.4, 0.3, 0.9, 0.7]), 2, BinStrategy::Quantile).unwrap();
        let prov = Provenance {
            config_hash: "h".into(),
            seed: 1,
        };
        save_bins(&bins, &path, Some(&prov)).unwrap();
        assert_eq!(load_bins(&path).unwrap(), bins);
    }

    proptest! {
        #[test]
        fn partition_properties(
            values in prop::collection::vec(0u32..40, 1..60),
            nbins in 1usize..6,
            equal_width in any::<bool>(),
        ) {
            let s = scores(&values.iter().map(|v| *v as f64 / 40.0).collect::<Vec<_>>());
            let strategy = if equal_width { BinStrategy::EqualWidth } else { BinStrategy::Quantile };
            let bins = match partition_bins(&s, nbins, strategy) {
                Ok(b) => b,
                Err(_) => {
                    let mut d: Vec<u32> = values.clone();
                    d.sort();
                    d.dedup();
                    prop_assert!(!equal_width && nbins > d.len());
                    return Ok(());
                }
            };
            let all: Vec<&String> = bins.iter().flat_map(|b| &b.question_ids).collect();
            let set: HashSet<&String> = all.iter().copied().collect();
            prop_assert_eq!(all.len(), s.len());
            prop_assert_eq!(set.len(), s.len());

            let score_of = |id: &str| s.iter().find(|x| x.question_id == id).unwrap().score;
            for w in bins.windows(2) {
                prop_assert!(w[1].lower >= w[0].upper || !equal_width && w[1].lower == w[0].upper);
                let hi = w[0].question_ids.iter().map(|i| score_of(i)).fold(f64::NEG_INFINITY, f64::max);
                let lo = w[1].question_ids.iter().map(|i| score_of(i)).fold(f64::INFINITY, f64::min);
                prop_assert!(hi <= lo);
            }
            if equal_width {
                for b in &bins {
                    for id in &b.question_ids {
                        let sc = score_of(id);
                        prop_assert!(b.lower <= sc && (sc < b.upper || b.index == nbins - 1));
                    }
                }
            } else {
                let sizes: Vec<usize> = bins.iter().map(|b| b.question_ids.len()).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
        }
    }
}
