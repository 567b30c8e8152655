//! Deterministic offline annotator. It answers from the gold labels of a
//! known corpus, corrupted by a seeded noise profile, and emits answers in
//! the same single-quoted format a chat model is asked to produce.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, PromptRequest};
use crate::corpus::{dedup_pairs, EntityPair, LabelSet, Sample};
use crate::error::{Error, Result};
use crate::prompting::{parse_answer, serialize_answer, PromptTemplate, SV_QUESTION};
use crate::rng::{keyed_rng, KeyPart};

pub const DISTRACTORS: [&str; 32] = [
    "However", "Yesterday", "Meanwhile", "Today", "Nothing", "Everyone", "Something", "Later",
    "Morning", "Tonight", "Perhaps", "Indeed", "Finally", "Overall", "Recently", "Tomorrow",
    "Although", "Besides", "Moreover", "Anyway", "Earlier", "Somewhere", "Whatever", "Nobody",
    "Someone", "Because", "During", "Instead", "Otherwise", "Several", "Another", "Therefore",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub p_hit: f64,
    pub p_confuse: f64,
    pub p_spurious: f64,
    pub seed: u64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile::noiseless(0)
    }
}

impl NoiseProfile {
    pub fn noiseless(seed: u64) -> Self {
        NoiseProfile {
            p_hit: 1.0,
            p_confuse: 0.0,
            p_spurious: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_hit", self.p_hit),
            ("p_confuse", self.p_confuse),
            ("p_spurious", self.p_spurious),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} is not a probability")));
            }
        }
        Ok(())
    }
}

fn pick(u: f64, n: usize) -> usize {
    ((u * n as f64) as usize).min(n - 1)
}

/// The `ordinal`-th scripted answer for a gold-labelled sample.
///
/// Each gold entity consumes three uniform draws (hit, confuse, replacement
/// type) and the answer then consumes three more (spurious, word, type),
/// all from a generator keyed by `(profile.seed, sample.id, ordinal)`.
pub fn scripted_answer(sample: &Sample, labelset: &LabelSet, profile: &NoiseProfile, ordinal: usize) -> Result<String> {
    let gold = sample.gold.as_ref().ok_or_else(|| {
        Error::Data(format!(
            "scripted backend needs gold entities for sample {:?}",
            sample.id
        ))
    })?;
    let mut rng = keyed_rng(
        "scripted-answer",
        &[
            KeyPart::U64(profile.seed),
            KeyPart::Str(&sample.id),
            KeyPart::U64(ordinal as u64),
        ],
    );
    let mut out: Vec<EntityPair> = Vec::new();
    for (span, etype) in gold {
        let u_hit: f64 = rng.random();
        let u_confuse: f64 = rng.random();
        let u_other: f64 = rng.random();
        if u_hit >= profile.p_hit {
            continue;
        }
        let others: Vec<&String> = labelset.types.iter().filter(|t| *t != etype).collect();
        let etype = if u_confuse < profile.p_confuse && !others.is_empty() {
            others[pick(u_other, others.len())].clone()
        } else {
            etype.clone()
        };
        out.push((span.clone(), etype));
    }
    let u_spurious: f64 = rng.random();
    let u_word: f64 = rng.random();
    let u_type: f64 = rng.random();
    if u_spurious < profile.p_spurious {
        out.push((
            DISTRACTORS[pick(u_word, DISTRACTORS.len())].to_string(),
            labelset.types[pick(u_type, labelset.types.len())].clone(),
        ));
    }
    Ok(serialize_answer(&dedup_pairs(out)))
}

/// Offline backend answering from a gold corpus.
///
/// Prompts are mapped back to their sample through the query text. At
/// temperature 0 every ordinal receives the ordinal-0 answer. Prompts that
/// end with the self-verification question are answered with one
/// `span: score` line per entity of the prior answer.
pub struct ScriptedBackend {
    id: String,
    labelset: LabelSet,
    by_text: HashMap<String, Sample>,
    profile: NoiseProfile,
    template: PromptTemplate,
    sv_score: u8,
}

impl ScriptedBackend {
    pub fn new(labelset: LabelSet, corpus: impl IntoIterator<Item = Sample>, profile: NoiseProfile) -> Result<Self> {
        profile.validate()?;
        let mut by_text = HashMap::new();
        for s in corpus {
            if s.gold.is_none() {
                return Err(Error::Data(format!(
                    "scripted backend needs gold entities for sample {:?}",
                    s.id
                )));
            }
            by_text.entry(s.text.clone()).or_insert(s);
        }
        Ok(ScriptedBackend {
            id: format!(
                "scripted:{}:{}:{}:{}",
                profile.seed, profile.p_hit, profile.p_confuse, profile.p_spurious
            ),
            labelset,
            by_text,
            profile,
            template: PromptTemplate::default(),
            sv_score: 5,
        })
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_sv_score(mut self, score: u8) -> Self {
        self.sv_score = score.min(5);
        self
    }

    fn answer_sv(&self, prompt: &str) -> std::result::Result<String, String> {
        let prior = prompt
            .strip_suffix(SV_QUESTION)
            .map(|p| p.trim_end_matches('\n'))
            .ok_or("not a self-verification prompt")?;
        let (_, suffix) = self
            .template
            .example_block
            .split_once("{text}")
            .ok_or("template has no {text} slot")?;
        let answer = prior
            .rfind(suffix)
            .map(|i| &prior[i + suffix.len()..])
            .ok_or("no prior answer in self-verification prompt")?;
        let lines: Vec<String> = parse_answer(answer)
            .predictions
            .iter()
            .map(|(span, _)| format!("{span}: {}", self.sv_score))
            .collect();
        Ok(lines.join("\n"))
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &PromptRequest, ordinal: usize, _run_seed: u64) -> std::result::Result<String, String> {
        if req.prompt.ends_with(SV_QUESTION) {
            return self.answer_sv(&req.prompt);
        }
        let query = self
            .template
            .extract_query(&req.prompt)
            .ok_or("prompt does not end with a query block")?;
        let sample = self
            .by_text
            .get(query)
            .ok_or_else(|| format!("scripted backend has no gold for text {query:?}"))?;
        let ordinal = if req.temperature == 0.0 { 0 } else { ordinal };
        scripted_answer(sample, &self.labelset, &self.profile, ordinal).map_err(|e| e.to_string())
    }
}
