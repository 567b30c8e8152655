//! Core data model: samples, label sets, scored predictions, and the JSON
//! Lines dataset format shared by the unlabeled corpus, the demonstration
//! pool, and test sets.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(span, type)` pair. Entity identity is the normalized surface string
/// plus its type; no offsets are kept.
pub type EntityPair = (String, String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<EntityPair>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Sample {
            id: id.into(),
            text: text.into(),
            gold: None,
        }
    }

    pub fn with_gold<S: Into<String>, T: Into<String>>(
        mut self,
        gold: impl IntoIterator<Item = (S, T)>,
    ) -> Self {
        self.gold = Some(gold.into_iter().map(|(s, t)| (s.into(), t.into())).collect());
        self
    }

    /// Gold entities as a deduplicated, normalized set (first occurrence wins).
    pub fn gold_set(&self) -> Option<Vec<EntityPair>> {
        self.gold.as_ref().map(|g| dedup_pairs(g.iter().cloned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub name: String,
    pub types: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(name: impl Into<String>, types: impl IntoIterator<Item = S>) -> Result<Self> {
        let set = LabelSet {
            name: name.into(),
            types: types.into_iter().map(Into::into).collect(),
        };
        set.validate()?;
        Ok(set)
    }

    /// The seven ACE05 entity types in the order the prompts list them.
    pub fn ace05() -> Self {
        LabelSet {
            name: "ACE05".into(),
            types: [
                "Person",
                "Organization",
                "Location",
                "Facility",
                "Weapon",
                "Vehicle",
                "Geo-Political Entity",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::Config(format!("label set {:?} has no types", self.name)));
        }
        let mut seen = HashSet::new();
        for t in &self.types {
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!(
                    "label set {:?} lists type {t:?} twice",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, etype: &str) -> bool {
        self.types.iter().any(|t| t == etype)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let set: LabelSet = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        set.validate()?;
        Ok(set)
    }
}

/// One merged prediction with its entity-level consistency score
/// (the number of sampled answers that contained it).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(String, String, u32)", into = "(String, String, u32)")]
pub struct EntityPrediction {
    pub span: String,
    pub etype: String,
    pub votes: u32,
}

impl From<(String, String, u32)> for EntityPrediction {
    fn from((span, etype, votes): (String, String, u32)) -> Self {
        EntityPrediction { span, etype, votes }
    }
}

impl From<EntityPrediction> for (String, String, u32) {
    fn from(p: EntityPrediction) -> Self {
        (p.span, p.etype, p.votes)
    }
}

impl EntityPrediction {
    pub fn pair(&self) -> EntityPair {
        (self.span.clone(), self.etype.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<EntityPair>>,
    pub predictions: Vec<EntityPrediction>,
    pub sample_score: f64,
    pub n_samples: u32,
    #[serde(default)]
    pub raw_answers: Vec<String>,
    #[serde(default)]
    pub parse_failures: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sv_scores: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sv_flags: Option<Vec<bool>>,
}

impl AnnotatedSample {
    pub fn sample(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            text: self.text.clone(),
            gold: self.gold.clone(),
        }
    }

    pub fn pairs(&self) -> Vec<EntityPair> {
        self.predictions.iter().map(EntityPrediction::pair).collect()
    }

    /// A gold-labelled sample turned into a pool entry: every gold entity
    /// carries the maximal vote count.
    pub fn from_gold(sample: &Sample, n_samples: u32) -> Result<Self> {
        let gold = sample.gold_set().ok_or_else(|| {
            Error::Data(format!("sample {:?} has no gold entities", sample.id))
        })?;
        Ok(AnnotatedSample {
            id: sample.id.clone(),
            text: sample.text.clone(),
            gold: sample.gold.clone(),
            predictions: gold
                .into_iter()
                .map(|(span, etype)| EntityPrediction {
                    span,
                    etype,
                    votes: n_samples,
                })
                .collect(),
            sample_score: n_samples as f64,
            n_samples,
            raw_answers: Vec::new(),
            parse_failures: 0,
            sv_scores: None,
            sv_flags: None,
        })
    }
}

/// Trim, then collapse every internal whitespace run to a single space.
/// Case is preserved.
pub fn normalize_span(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalize and deduplicate pairs, keeping the first occurrence and
/// dropping pairs whose span normalizes to the empty string.
pub fn dedup_pairs(pairs: impl IntoIterator<Item = EntityPair>) -> Vec<EntityPair> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (span, etype) in pairs {
        let span = normalize_span(&span);
        let etype = normalize_span(&etype);
        if span.is_empty() {
            continue;
        }
        if seen.insert((span.clone(), etype.clone())) {
            out.push((span, etype));
        }
    }
    out
}

/// Load a JSON Lines dataset, validating ids and gold types.
pub fn load_dataset(path: &Path, labelset: &LabelSet) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    parse_dataset(BufReader::new(file), path, labelset)
}

pub fn parse_dataset(reader: impl BufRead, path: &Path, labelset: &LabelSet) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !ids.insert(sample.id.clone()) {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("duplicate sample id {:?}", sample.id),
            });
        }
        if let Some(gold) = &sample.gold {
            for (_, etype) in gold {
                if !labelset.contains(etype) {
                    return Err(Error::UnknownType {
                        etype: etype.clone(),
                        sample_id: sample.id.clone(),
                        labelset: labelset.name.clone(),
                    });
                }
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    write_jsonl(path, samples.iter())
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl Iterator<Item = &'a T>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    out.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Draw `min(n, len)` samples without replacement, deterministically for a
/// given seed, keeping their original relative order.
pub fn subsample<T: Clone>(samples: &[T], n: usize, seed: u64) -> Vec<T> {
    if n >= samples.len() {
        return samples.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, samples.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| samples[i].clone()).collect()
}
