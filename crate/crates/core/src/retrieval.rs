//! Demonstration retrieval: sentence embeddings, exact cosine kNN, and the
//! random / nearest / diverse-nearest / diverse-nearest-with-score-ranking
//! strategies.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{write_jsonl, AnnotatedSample, EntityPair};
use crate::error::{Error, Result};
use crate::gateway::{RemoteBackend, ResponseCache};
use crate::selection::{sample_channel_score, ScoreChannel};

pub const LOCAL_DIM: usize = 1024;
pub const LOCAL_EMBEDDER_ID: &str = "local-char3-fnv1a-1024";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f32>,
    /// True for the zero vector produced from text too short to embed.
    #[serde(default)]
    pub degenerate: bool,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn normalized(mut values: Vec<f32>) -> Self {
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Embedding { values, degenerate: true };
        }
        for v in &mut values {
            *v = (*v as f64 / norm) as f32;
        }
        Embedding { values, degenerate: false }
    }
}

/// Dot product of two stored unit vectors, accumulated in f64 in index order.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub trait Embedder: Send + Sync {
    /// Identity recorded in index files; indexes and queries must agree.
    fn identity(&self) -> String;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>>;

    fn embed(&self, text: &str) -> Result<Embedding> {
        Ok(self.embed_batch(&[text.to_string()])?.remove(0))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed character-trigram counts over the lowercased text, L2-normalized.
pub fn embed_local(text: &str) -> Embedding {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut counts = vec![0f32; LOCAL_DIM];
    let mut buf = String::new();
    for w in chars.windows(3) {
        buf.clear();
        buf.extend(w);
        counts[(fnv1a64(buf.as_bytes()) % LOCAL_DIM as u64) as usize] += 1.0;
    }
    Embedding::normalized(counts)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LocalEmbedder;

impl Embedder for LocalEmbedder {
    fn identity(&self) -> String {
        LOCAL_EMBEDDER_ID.into()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        Ok(texts.par_iter().map(|t| embed_local(t)).collect())
    }
}

/// Embeddings from an OpenAI-compatible endpoint, cached per text digest.
pub struct RemoteEmbedder {
    backend: Arc<RemoteBackend>,
    cache: Option<ResponseCache>,
    batch_size: usize,
}

impl RemoteEmbedder {
    pub fn new(backend: Arc<RemoteBackend>, cache: Option<ResponseCache>) -> Self {
        RemoteEmbedder {
            backend,
            cache,
            batch_size: 64,
        }
    }

    fn key(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(b"selfner-embedding-v1\0");
        h.update(self.identity().as_bytes());
        h.update(b"\0");
        h.update(text.as_bytes());
        format!("emb-{}", hex::encode(h.finalize()))
    }
}

impl Embedder for RemoteEmbedder {
    fn identity(&self) -> String {
        format!("remote:{}", self.backend.config().embed_model)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let mut out: Vec<Option<Embedding>> = vec![None; texts.len()];
        let mut missing = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            let cached = match &self.cache {
                Some(c) => c.lookup(&self.key(t))?,
                None => None,
            };
            match cached {
                Some(s) => out[i] = Some(Embedding::normalized(serde_json::from_str(&s)?)),
                None => missing.push(i),
            }
        }
        for chunk in missing.chunks(self.batch_size) {
            let batch: Vec<String> = chunk.iter().map(|&i| texts[i].clone()).collect();
            let mut last = String::new();
            let mut vectors = None;
            for attempt in 0..3u32 {
                if attempt > 0 {
                    std::thread::sleep(std::time::Duration::from_secs(1 << (attempt - 1)));
                }
                match self.backend.embed(&batch) {
                    Ok(v) => {
                        vectors = Some(v);
                        break;
                    }
                    Err(e) => last = e,
                }
            }
            let vectors = vectors.ok_or(Error::Embedding(last))?;
            for (&i, v) in chunk.iter().zip(vectors) {
                if let Some(c) = &self.cache {
                    c.store(&self.key(&texts[i]), &serde_json::to_string(&v)?, None)?;
                }
                out[i] = Some(Embedding::normalized(v));
            }
        }
        Ok(out.into_iter().map(|e| e.expect("filled")).collect())
    }
}

/// Exact top-`j` pool entries by cosine similarity, ordered by similarity
/// descending then id ascending.
pub fn knn<'a>(pool: &'a [(String, Vec<f32>)], query: &[f32], j: usize) -> Result<Vec<(&'a str, f64)>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut scored: Vec<(&str, f64)> = pool.iter().map(|(id, v)| (id.as_str(), cosine(v, query))).collect();
    let rank = |a: &(&str, f64), b: &(&str, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0));
    let j = j.min(scored.len());
    if j < scored.len() && j > 0 {
        scored.select_nth_unstable_by(j - 1, rank);
        scored.truncate(j);
    }
    scored.truncate(j);
    scored.sort_by(rank);
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalKind {
    /// No demonstrations: the zero-shot baseline.
    NoDemos,
    Random,
    Nearest,
    DiverseRandom,
    DiverseScRanking,
}

impl std::str::FromStr for RetrievalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "no-demos" | "no_demos" | "none" => RetrievalKind::NoDemos,
            "random" => RetrievalKind::Random,
            "nearest" => RetrievalKind::Nearest,
            "diverse-random" | "diverse_random" => RetrievalKind::DiverseRandom,
            "diverse-sc-ranking" | "diverse_sc_ranking" => RetrievalKind::DiverseScRanking,
            other => return Err(Error::Config(format!("unknown retrieval kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPolicy {
    pub kind: RetrievalKind,
    pub k: usize,
    pub big_k: usize,
    pub seed: u64,
}

impl Default for RetrievalPolicy {
    fn default() -> Self {
        RetrievalPolicy {
            kind: RetrievalKind::DiverseScRanking,
            k: 16,
            big_k: 50,
            seed: 0,
        }
    }
}

impl RetrievalPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.kind == RetrievalKind::NoDemos {
            return Ok(());
        }
        if self.k == 0 || self.k > self.big_k {
            return Err(Error::Config(format!(
                "retrieval needs 1 <= k <= K, got k={} K={}",
                self.k, self.big_k
            )));
        }
        Ok(())
    }
}

/// The reliable pool with one embedding per sample.
#[derive(Debug, Clone)]
pub struct DemoPool {
    pub samples: Vec<AnnotatedSample>,
    pub vectors: Vec<(String, Vec<f32>)>,
    rank_scores: Vec<f64>,
    by_id: HashMap<String, usize>,
}

impl DemoPool {
    pub fn new(samples: Vec<AnnotatedSample>, index: &DemoIndex, channel: ScoreChannel) -> Result<Self> {
        let by_vec: HashMap<&str, &Vec<f32>> = index.entries.iter().map(|(id, v)| (id.as_str(), v)).collect();
        let vectors = samples
            .iter()
            .map(|s| {
                by_vec
                    .get(s.id.as_str())
                    .map(|v| (s.id.clone(), (*v).clone()))
                    .ok_or_else(|| Error::Data(format!("index has no vector for pool sample {:?}", s.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let rank_scores = samples.iter().map(|s| sample_channel_score(s, channel)).collect();
        let by_id = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        Ok(DemoPool {
            samples,
            vectors,
            rank_scores,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedSample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    /// A view without the sample `id`, so a sentence never demonstrates itself.
    pub fn excluding(&self, id: &str) -> DemoPool {
        match self.by_id.get(id) {
            None => self.clone(),
            Some(&skip) => {
                let keep = |i: &usize| *i != skip;
                let samples: Vec<_> = (0..self.len()).filter(keep).map(|i| self.samples[i].clone()).collect();
                DemoPool {
                    vectors: (0..self.len()).filter(keep).map(|i| self.vectors[i].clone()).collect(),
                    rank_scores: (0..self.len()).filter(keep).map(|i| self.rank_scores[i]).collect(),
                    by_id: samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect(),
                    samples,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    /// Pool ids in final ranking order (best first).
    pub ids: Vec<String>,
    pub warning: Option<String>,
}

/// Select demonstrations for one query.
pub fn retrieve(pool: &DemoPool, query: &Embedding, policy: &RetrievalPolicy) -> Result<Retrieved> {
    if policy.kind == RetrievalKind::NoDemos {
        return Ok(Retrieved {
            ids: Vec::new(),
            warning: None,
        });
    }
    policy.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let warning = (pool.len() < policy.k).then(|| {
        format!(
            "pool has {} samples, fewer than k={}; using the whole pool",
            pool.len(),
            policy.k
        )
    });
    let k = policy.k.min(pool.len());
    let ids: Vec<String> = match policy.kind {
        RetrievalKind::NoDemos => unreachable!(),
        RetrievalKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
            index::sample(&mut rng, pool.len(), k)
                .into_iter()
                .map(|i| pool.samples[i].id.clone())
                .collect()
        }
        RetrievalKind::Nearest => knn(&pool.vectors, &query.values, k)?
            .into_iter()
            .map(|(id, _)| id.to_string())
            .collect(),
        RetrievalKind::DiverseRandom => {
            let candidates = knn(&pool.vectors, &query.values, policy.big_k)?;
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
            index::sample(&mut rng, candidates.len(), k.min(candidates.len()))
                .into_iter()
                .map(|i| candidates[i].0.to_string())
                .collect()
        }
        RetrievalKind::DiverseScRanking => {
            let mut candidates: Vec<(&str, f64, f64)> = knn(&pool.vectors, &query.values, policy.big_k)?
                .into_iter()
                .map(|(id, sim)| (id, sim, pool.rank_scores[pool.by_id[id]]))
                .collect();
            candidates.sort_by(|a, b| {
                b.2.total_cmp(&a.2)
                    .then_with(|| b.1.total_cmp(&a.1))
                    .then_with(|| a.0.cmp(b.0))
            });
            candidates.into_iter().take(k).map(|(id, _, _)| id.to_string()).collect()
        }
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(Retrieved { ids, warning })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    /// Best-ranked demonstration placed last, next to the query.
    Ascending,
    /// Best-ranked demonstration first.
    Descending,
}

impl std::str::FromStr for DemoOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascending" => Ok(DemoOrder::Ascending),
            "descending" => Ok(DemoOrder::Descending),
            other => Err(Error::Config(format!("unknown demo order {other:?}"))),
        }
    }
}

/// `(text, answer)` pairs in prompt order.
pub fn demos_for_prompt(pool: &DemoPool, retrieved: &Retrieved, order: DemoOrder) -> Vec<(String, Vec<EntityPair>)> {
    let mut demos: Vec<(String, Vec<EntityPair>)> = retrieved
        .ids
        .iter()
        .filter_map(|id| pool.get(id))
        .map(|s| (s.text.clone(), s.pairs()))
        .collect();
    if order == DemoOrder::Ascending {
        demos.reverse();
    }
    demos
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    embedder: String,
    dim: usize,
    count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexRecord {
    id: String,
    dim: usize,
    values: Vec<f32>,
}

/// Persisted pool embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoIndex {
    pub embedder: String,
    pub dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

impl DemoIndex {
    pub fn build(samples: &[AnnotatedSample], embedder: &dyn Embedder) -> Result<Self> {
        let texts: Vec<String> = samples.iter().map(|s| s.text.clone()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        let dim = vectors.first().map(Embedding::dim).unwrap_or(0);
        Ok(DemoIndex {
            embedder: embedder.identity(),
            dim,
            entries: samples
                .iter()
                .zip(vectors)
                .map(|(s, e)| (s.id.clone(), e.values))
                .collect(),
        })
    }

    pub fn check_embedder(&self, embedder: &dyn Embedder) -> Result<()> {
        let id = embedder.identity();
        if id != self.embedder {
            return Err(Error::Config(format!(
                "index was built with embedder {:?} but queries use {id:?}",
                self.embedder
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_value(IndexHeader {
            embedder: self.embedder.clone(),
            dim: self.dim,
            count: self.entries.len(),
        })?;
        let records: Vec<serde_json::Value> = std::iter::once(Ok(serde_json::json!({ "header": header })))
            .chain(self.entries.iter().map(|(id, v)| {
                serde_json::to_value(IndexRecord {
                    id: id.clone(),
                    dim: v.len(),
                    values: v.clone(),
                })
            }))
            .collect::<std::result::Result<_, _>>()?;
        write_jsonl(path, records.iter())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut lines = BufReader::new(file).lines();
        let bad = |line: usize, message: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line,
            message,
        };
        let first = lines
            .next()
            .ok_or_else(|| bad(1, "index file is empty".into()))?
            .map_err(|e| Error::io("reading index", e))?;
        let v: serde_json::Value = serde_json::from_str(&first).map_err(|e| bad(1, e.to_string()))?;
        let header: IndexHeader =
            serde_json::from_value(v["header"].clone()).map_err(|e| bad(1, format!("bad index header: {e}")))?;
        let mut entries = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("reading index", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: IndexRecord = serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?;
            if r.dim != header.dim || r.values.len() != header.dim {
                return Err(bad(i + 2, format!("vector of dim {} in a dim-{} index", r.values.len(), header.dim)));
            }
            entries.push((r.id, r.values));
        }
        Ok(DemoIndex {
            embedder: header.embedder,
            dim: header.dim,
            entries,
        })
    }
}
