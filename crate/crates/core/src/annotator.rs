//! Self-annotation with self-consistency scoring, plus the self-verification
//! score channel.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSample, EntityPair, EntityPrediction, LabelSet, Sample};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, PromptRequest};
use crate::prompting::{
    build_sv_prompt, parse_answer, parse_sv_answer, serialize_answer, ParseResult, ParseStatus,
    PromptTemplate, SvParse,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SCConfig {
    pub n_samples: u32,
    pub temperature: f64,
}

impl Default for SCConfig {
    fn default() -> Self {
        SCConfig {
            n_samples: 5,
            temperature: 0.7,
        }
    }
}

impl SCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Count, for every pair seen in any answer, how many answers contain it.
/// Each answer must already be deduplicated. Keys keep first-seen order.
pub fn entity_votes(answers: &[Vec<EntityPair>]) -> IndexMap<EntityPair, u32> {
    let mut votes: IndexMap<EntityPair, u32> = IndexMap::new();
    for answer in answers {
        for pair in answer {
            *votes.entry(pair.clone()).or_insert(0) += 1;
        }
    }
    votes
}

/// Sample-level score when no prediction survives: `n_samples` when every
/// answer cleanly parsed to the empty list, otherwise 0.
pub fn empty_sample_score(parsed: &[ParseResult], n_samples: u32) -> f64 {
    let unanimous_empty = !parsed.is_empty()
        && parsed
            .iter()
            .all(|p| p.status == ParseStatus::Ok && p.predictions.is_empty());
    if unanimous_empty {
        n_samples as f64
    } else {
        0.0
    }
}

pub fn mean_votes(predictions: &[EntityPrediction]) -> Option<f64> {
    if predictions.is_empty() {
        None
    } else {
        Some(predictions.iter().map(|p| p.votes as f64).sum::<f64>() / predictions.len() as f64)
    }
}

/// Re-parse the raw answers retained on an annotated sample.
pub fn parsed_answers(annotated: &AnnotatedSample) -> Vec<ParseResult> {
    annotated.raw_answers.iter().map(|a| parse_answer(a)).collect()
}

/// Builds prompts and turns sampled answers into SC-scored annotations.
#[derive(Debug, Clone)]
pub struct Annotator {
    pub labelset: LabelSet,
    pub template: PromptTemplate,
    pub sc: SCConfig,
    pub model: String,
}

impl Annotator {
    pub fn new(labelset: LabelSet, sc: SCConfig, model: impl Into<String>) -> Self {
        Annotator {
            labelset,
            template: PromptTemplate::default(),
            sc,
            model: model.into(),
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    /// Zero-shot prompt when `demos` is empty, ICL prompt otherwise.
    pub fn prompt(&self, sample: &Sample, demos: &[(String, Vec<EntityPair>)]) -> String {
        self.template.icl(&self.labelset, demos, &sample.text)
    }

    pub fn annotate_sample(
        &self,
        gateway: &Gateway,
        sample: &Sample,
        demos: &[(String, Vec<EntityPair>)],
        run_seed: u64,
    ) -> Result<AnnotatedSample> {
        self.sc.validate()?;
        let mut req = PromptRequest::new(self.prompt(sample, demos), self.sc.temperature, self.model.clone());
        req.max_answer_len = 512;
        let completions = gateway.complete(&req, self.sc.n_samples as usize, run_seed)?;
        let raw_answers: Vec<String> = completions.into_iter().map(|c| c.text).collect();
        Ok(self.from_answers(sample, raw_answers))
    }

    /// Score a sample from already-sampled raw answers.
    pub fn from_answers(&self, sample: &Sample, raw_answers: Vec<String>) -> AnnotatedSample {
        let parsed: Vec<ParseResult> = raw_answers.iter().map(|a| parse_answer(a)).collect();
        let parse_failures = parsed.iter().filter(|p| p.status == ParseStatus::Failed).count() as u32;
        let sets: Vec<Vec<EntityPair>> = parsed.iter().map(|p| p.predictions.clone()).collect();
        let predictions: Vec<EntityPrediction> = entity_votes(&sets)
            .into_iter()
            .map(|((span, etype), votes)| EntityPrediction { span, etype, votes })
            .collect();
        let n_samples = raw_answers.len() as u32;
        let sample_score =
            mean_votes(&predictions).unwrap_or_else(|| empty_sample_score(&parsed, n_samples));
        AnnotatedSample {
            id: sample.id.clone(),
            text: sample.text.clone(),
            gold: sample.gold.clone(),
            predictions,
            sample_score,
            n_samples,
            raw_answers,
            parse_failures,
            sv_scores: None,
            sv_flags: None,
        }
    }

    /// Ask the model to rate each of its merged predictions on 0..=5 and
    /// attach the scores alongside the SC votes.
    pub fn self_verify(&self, gateway: &Gateway, annotated: &mut AnnotatedSample, run_seed: u64) -> Result<SvParse> {
        if annotated.predictions.is_empty() {
            return Err(Error::Data(format!(
                "sample {:?} has no predictions to verify",
                annotated.id
            )));
        }
        let pairs = annotated.pairs();
        let exchange = self.template.zero_shot(&self.labelset, &annotated.text);
        let prompt = build_sv_prompt(&exchange, &serialize_answer(&pairs));
        let completion = gateway
            .complete(&PromptRequest::new(prompt, 0.0, self.model.clone()), 1, run_seed)?
            .remove(0);
        let sv = parse_sv_answer(&completion.text, &pairs);
        annotated.sv_scores = Some(sv.scores.clone());
        annotated.sv_flags = Some(sv.flags.clone());
        Ok(sv)
    }
}
