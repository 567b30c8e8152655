//! Reliable-annotation selection: entity- and sample-level threshold
//! filtering, two-stage majority voting, and the gold oracle.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::annotator::{empty_sample_score, mean_votes, parsed_answers};
use crate::corpus::{dedup_pairs, AnnotatedSample, EntityPair, EntityPrediction, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    None,
    EntityThreshold,
    SampleThreshold,
    TwoStageMajority,
    Oracle,
}

impl std::str::FromStr for SelectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => SelectionKind::None,
            "entity_threshold" | "entity-threshold" => SelectionKind::EntityThreshold,
            "sample_threshold" | "sample-threshold" => SelectionKind::SampleThreshold,
            "two_stage_majority" | "two-stage-majority" | "tsmv" => SelectionKind::TwoStageMajority,
            "oracle" => SelectionKind::Oracle,
            other => return Err(Error::Config(format!("unknown selection kind {other:?}"))),
        })
    }
}

/// Which confidence signal thresholds and rankings read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreChannel {
    Sc,
    Sv,
}

impl std::str::FromStr for ScoreChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sc" => Ok(ScoreChannel::Sc),
            "sv" => Ok(ScoreChannel::Sv),
            other => Err(Error::Config(format!("unknown score channel {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub kind: SelectionKind,
    pub th_entity: f64,
    pub th_sample: f64,
    pub score_channel: ScoreChannel,
    /// Remove samples left with no predictions.
    pub drop_empty: bool,
    /// Recompute the sample score after entity-level filtering.
    pub rescore: bool,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            kind: SelectionKind::TwoStageMajority,
            th_entity: 4.0,
            th_sample: 4.0,
            score_channel: ScoreChannel::Sc,
            drop_empty: false,
            rescore: false,
        }
    }
}

impl SelectionPolicy {
    pub fn validate(&self, n_samples: u32) -> Result<()> {
        let max = match self.score_channel {
            ScoreChannel::Sc => n_samples as f64,
            ScoreChannel::Sv => 5.0,
        };
        for (name, th) in [("th_entity", self.th_entity), ("th_sample", self.th_sample)] {
            if !(0.0..=max).contains(&th) {
                return Err(Error::Config(format!("{name}={th} outside [0, {max}]")));
            }
        }
        Ok(())
    }
}

/// Per-entity score on the chosen channel.
pub fn entity_score(sample: &AnnotatedSample, idx: usize, channel: ScoreChannel) -> f64 {
    match channel {
        ScoreChannel::Sc => sample.predictions[idx].votes as f64,
        ScoreChannel::Sv => sample
            .sv_scores
            .as_ref()
            .and_then(|s| s.get(idx))
            .map(|&v| v as f64)
            .unwrap_or(0.0),
    }
}

/// Sample-level score on the chosen channel. Under SV it is the mean entity
/// SV score; a prediction-free sample gets 5 when its SC score records
/// unanimous emptiness, else 0.
pub fn sample_channel_score(sample: &AnnotatedSample, channel: ScoreChannel) -> f64 {
    match channel {
        ScoreChannel::Sc => sample.sample_score,
        ScoreChannel::Sv => {
            if sample.predictions.is_empty() {
                if sample.n_samples > 0 && sample.sample_score >= sample.n_samples as f64 {
                    5.0
                } else {
                    0.0
                }
            } else {
                let n = sample.predictions.len();
                (0..n).map(|i| entity_score(sample, i, channel)).sum::<f64>() / n as f64
            }
        }
    }
}

fn retain_predictions(sample: &mut AnnotatedSample, keep: &[bool]) {
    let mut it = keep.iter();
    sample.predictions.retain(|_| *it.next().expect("aligned"));
    if let Some(sv) = sample.sv_scores.as_mut() {
        let mut it = keep.iter();
        sv.retain(|_| *it.next().unwrap_or(&false));
    }
    if let Some(flags) = sample.sv_flags.as_mut() {
        let mut it = keep.iter();
        flags.retain(|_| *it.next().unwrap_or(&false));
    }
}

pub fn filter_entity_threshold(pool: &[AnnotatedSample], th: f64) -> Vec<AnnotatedSample> {
    filter_entity_threshold_on(pool, th, ScoreChannel::Sc, false)
}

/// Drop every prediction scoring below `th`. Samples stay even when emptied;
/// the sample score is left as annotated unless `rescore` is set.
pub fn filter_entity_threshold_on(
    pool: &[AnnotatedSample],
    th: f64,
    channel: ScoreChannel,
    rescore: bool,
) -> Vec<AnnotatedSample> {
    pool.iter()
        .map(|s| {
            let keep: Vec<bool> = (0..s.predictions.len())
                .map(|i| entity_score(s, i, channel) >= th)
                .collect();
            let mut out = s.clone();
            retain_predictions(&mut out, &keep);
            if rescore && out.predictions.len() != s.predictions.len() {
                out.sample_score = mean_votes(&out.predictions).unwrap_or(0.0);
            }
            out
        })
        .collect()
}

pub fn filter_sample_threshold(pool: &[AnnotatedSample], th: f64) -> Vec<AnnotatedSample> {
    filter_sample_threshold_on(pool, th, ScoreChannel::Sc)
}

pub fn filter_sample_threshold_on(pool: &[AnnotatedSample], th: f64, channel: ScoreChannel) -> Vec<AnnotatedSample> {
    pool.iter()
        .filter(|s| sample_channel_score(s, channel) >= th)
        .cloned()
        .collect()
}

struct SpanTally {
    count: u32,
    /// type -> (answers containing (span, type), first (ordinal, position))
    types: IndexMap<String, (u32, (usize, usize))>,
}

/// Keep spans found in a strict majority of the sampled answers, then give
/// each the type most often paired with it (ties go to the type seen in the
/// earliest answer). Votes become the span counts.
pub fn two_stage_majority_vote(annotated: &AnnotatedSample) -> Result<AnnotatedSample> {
    if annotated.raw_answers.is_empty() {
        return Err(Error::Data(format!(
            "two-stage majority voting needs the raw answers of sample {:?}",
            annotated.id
        )));
    }
    let parsed = parsed_answers(annotated);
    let n = parsed.len();
    let mut tallies: IndexMap<String, SpanTally> = IndexMap::new();
    for (ord, answer) in parsed.iter().enumerate() {
        let mut spans_seen = HashSet::new();
        let mut pairs_seen = HashSet::new();
        for (pos, (span, etype)) in answer.predictions.iter().enumerate() {
            let tally = tallies.entry(span.clone()).or_insert_with(|| SpanTally {
                count: 0,
                types: IndexMap::new(),
            });
            if spans_seen.insert(span) {
                tally.count += 1;
            }
            if pairs_seen.insert((span, etype)) {
                let t = tally.types.entry(etype.clone()).or_insert((0, (ord, pos)));
                t.0 += 1;
            }
        }
    }
    let predictions: Vec<EntityPrediction> = tallies
        .into_iter()
        .filter(|(_, t)| 2 * t.count as usize > n)
        .map(|(span, t)| {
            let (etype, _) = t
                .types
                .into_iter()
                .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)))
                .expect("kept span has a type");
            EntityPrediction {
                span,
                etype,
                votes: t.count,
            }
        })
        .collect();
    let sample_score = mean_votes(&predictions)
        .unwrap_or_else(|| empty_sample_score(&parsed, annotated.n_samples));
    Ok(AnnotatedSample {
        predictions,
        sample_score,
        sv_scores: None,
        sv_flags: None,
        ..annotated.clone()
    })
}

/// Gold pairs by sample id, normalized and deduplicated.
pub fn gold_index(samples: &[Sample]) -> HashMap<String, Vec<EntityPair>> {
    samples
        .iter()
        .filter_map(|s| s.gold_set().map(|g| (s.id.clone(), g)))
        .collect()
}

/// Keep only predictions that exactly match a gold pair.
pub fn oracle_select(pool: &[AnnotatedSample], gold: &HashMap<String, Vec<EntityPair>>) -> Result<Vec<AnnotatedSample>> {
    pool.iter()
        .map(|s| {
            let g = match gold.get(&s.id) {
                Some(g) => g.clone(),
                None => s
                    .gold
                    .clone()
                    .map(dedup_pairs)
                    .ok_or_else(|| Error::Data(format!("no gold for pool sample {:?}", s.id)))?,
            };
            let g: HashSet<EntityPair> = g.into_iter().collect();
            let keep: Vec<bool> = s.predictions.iter().map(|p| g.contains(&p.pair())).collect();
            let mut out = s.clone();
            retain_predictions(&mut out, &keep);
            Ok(out)
        })
        .collect()
}

/// Apply a full policy to an annotated pool.
pub fn apply_policy(
    pool: &[AnnotatedSample],
    policy: &SelectionPolicy,
    gold: Option<&HashMap<String, Vec<EntityPair>>>,
) -> Result<Vec<AnnotatedSample>> {
    let selected = match policy.kind {
        SelectionKind::None => pool.to_vec(),
        SelectionKind::EntityThreshold => {
            filter_entity_threshold_on(pool, policy.th_entity, policy.score_channel, policy.rescore)
        }
        SelectionKind::SampleThreshold => filter_sample_threshold_on(pool, policy.th_sample, policy.score_channel),
        SelectionKind::TwoStageMajority => pool
            .iter()
            .map(two_stage_majority_vote)
            .collect::<Result<Vec<_>>>()?,
        SelectionKind::Oracle => {
            let empty = HashMap::new();
            oracle_select(pool, gold.unwrap_or(&empty))?
        }
    };
    Ok(if policy.drop_empty {
        selected.into_iter().filter(|s| !s.predictions.is_empty()).collect()
    } else {
        selected
    })
}
