//! Stage orchestration: run configuration, the annotate / select / index /
//! infer / eval stages, the iterative self-improving loop and sweeps.
//!
//! Every stage reads and writes JSON Lines files whose first line is a
//! `{"header": ...}` record carrying the config digest and label set.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::annotator::{Annotator, SCConfig};
use crate::corpus::{load_dataset, subsample, write_jsonl, AnnotatedSample, EntityPair, LabelSet, Sample};
use crate::error::{Error, Result};
use crate::eval::{
    comparison_table, micro_f1, multi_seed_report, sc_density, AggregateReport, ComparisonTable, DensityTable,
    ScoreReport, TableRow,
};
use crate::gateway::{Backend, Gateway, NoiseProfile, RemoteBackend, RemoteConfig, ResponseCache, RetryPolicy, ScriptedBackend};
use crate::prompting::{parse_answer, ParseStatus, PromptTemplate};
use crate::retrieval::{
    demos_for_prompt, retrieve, DemoIndex, DemoOrder, DemoPool, Embedder, Embedding, LocalEmbedder, RemoteEmbedder,
    RetrievalKind, RetrievalPolicy,
};
use crate::rng::{derive_u64, KeyPart};
use crate::selection::{apply_policy, gold_index, two_stage_majority_vote, SelectionKind, SelectionPolicy};

pub const ANNOTATED_FILE: &str = "annotated.jsonl";
pub const POOL_FILE: &str = "pool.jsonl";
pub const INDEX_FILE: &str = "index.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

pub fn predictions_file(seed: u64) -> String {
    format!("predictions_seed{seed}.jsonl")
}

pub fn iteration_dir(out: &Path, t: usize) -> PathBuf {
    out.join(format!("iter_{t}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `ace05` for the built-in set, otherwise a JSON label-set file.
    pub labelset: String,
    pub backend: BackendKind,
    pub noise: NoiseProfile,
    pub remote: RemoteConfig,
    pub sc: SCConfig,
    pub selection: SelectionPolicy,
    pub retrieval: RetrievalPolicy,
    pub embedder: EmbedderKind,
    pub demo_order: DemoOrder,
    pub seeds: Vec<u64>,
    pub run_seed: u64,
    pub test_subsample: usize,
    pub unlabeled_subsample: usize,
    pub iterations: usize,
    pub parallelism: usize,
    pub infer_sc: bool,
    pub self_verify: bool,
    pub prompt_template: Option<PathBuf>,
    pub retry_attempts: u32,
    pub out: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            labelset: "ace05".into(),
            backend: BackendKind::Scripted,
            noise: NoiseProfile::default(),
            remote: RemoteConfig::default(),
            sc: SCConfig::default(),
            selection: SelectionPolicy::default(),
            retrieval: RetrievalPolicy::default(),
            embedder: EmbedderKind::Local,
            demo_order: DemoOrder::Ascending,
            seeds: vec![0, 1],
            run_seed: 0,
            test_subsample: 300,
            unlabeled_subsample: 500,
            iterations: 1,
            parallelism: 4,
            infer_sc: false,
            self_verify: false,
            prompt_template: None,
            retry_attempts: 3,
            out: PathBuf::from("out"),
            cache_dir: None,
        }
    }
}

/// Keys that do not change any output and are left out of the digest.
const UNDIGESTED: &[&str] = &["out", "cache_dir", "api_key", "parallelism", "retry_attempts", "timeout_secs"];

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Defaults overlaid with the `SELFNER_*` environment variables.
    pub fn from_env() -> Self {
        RunConfig {
            remote: RemoteConfig::from_env(),
            ..RunConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "labelset" => self.labelset = value.to_string(),
            "backend" => {
                self.backend = match value {
                    "scripted" => BackendKind::Scripted,
                    "remote" => BackendKind::Remote,
                    _ => return Err(Error::Config(format!("unknown backend {value:?}"))),
                }
            }
            "p_hit" => self.noise.p_hit = parse_value(key, value)?,
            "p_confuse" => self.noise.p_confuse = parse_value(key, value)?,
            "p_spurious" => self.noise.p_spurious = parse_value(key, value)?,
            "noise_seed" => self.noise.seed = parse_value(key, value)?,
            "endpoint" => self.remote.endpoint = value.to_string(),
            "api_key" => self.remote.api_key = (!value.is_empty()).then(|| value.to_string()),
            "model" => self.remote.model = value.to_string(),
            "embed_model" => self.remote.embed_model = value.to_string(),
            "timeout_secs" => self.remote.timeout = Duration::from_secs(parse_value(key, value)?),
            "n_samples" => self.sc.n_samples = parse_value(key, value)?,
            "temperature" => self.sc.temperature = parse_value(key, value)?,
            "selection" => self.selection.kind = value.parse()?,
            "th_entity" => self.selection.th_entity = parse_value(key, value)?,
            "th_sample" => self.selection.th_sample = parse_value(key, value)?,
            "score_channel" => self.selection.score_channel = value.parse()?,
            "drop_empty" => self.selection.drop_empty = parse_bool(key, value)?,
            "rescore" => self.selection.rescore = parse_bool(key, value)?,
            "retrieval" => self.retrieval.kind = value.parse()?,
            "k" => self.retrieval.k = parse_value(key, value)?,
            "big_k" => self.retrieval.big_k = parse_value(key, value)?,
            "retrieval_seed" => self.retrieval.seed = parse_value(key, value)?,
            "embedder" => {
                self.embedder = match value {
                    "local" => EmbedderKind::Local,
                    "remote" => EmbedderKind::Remote,
                    _ => return Err(Error::Config(format!("unknown embedder {value:?}"))),
                }
            }
            "demo_order" => self.demo_order = value.parse()?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_>>()?
            }
            "run_seed" => self.run_seed = parse_value(key, value)?,
            "test_subsample" => self.test_subsample = parse_value(key, value)?,
            "unlabeled_subsample" => self.unlabeled_subsample = parse_value(key, value)?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "parallelism" => self.parallelism = parse_value(key, value)?,
            "infer_sc" => self.infer_sc = parse_bool(key, value)?,
            "self_verify" => self.self_verify = parse_bool(key, value)?,
            "prompt_template" => self.prompt_template = (!value.is_empty()).then(|| PathBuf::from(value)),
            "retry_attempts" => self.retry_attempts = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "cache_dir" => self.cache_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` file. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Every setting as `(key, value)`, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("labelset", self.labelset.clone()),
            ("backend", enum_name(&self.backend)),
            ("p_hit", self.noise.p_hit.to_string()),
            ("p_confuse", self.noise.p_confuse.to_string()),
            ("p_spurious", self.noise.p_spurious.to_string()),
            ("noise_seed", self.noise.seed.to_string()),
            ("endpoint", self.remote.endpoint.clone()),
            ("api_key", self.remote.api_key.clone().unwrap_or_default()),
            ("model", self.remote.model.clone()),
            ("embed_model", self.remote.embed_model.clone()),
            ("timeout_secs", self.remote.timeout.as_secs().to_string()),
            ("n_samples", self.sc.n_samples.to_string()),
            ("temperature", self.sc.temperature.to_string()),
            ("selection", enum_name(&self.selection.kind)),
            ("th_entity", self.selection.th_entity.to_string()),
            ("th_sample", self.selection.th_sample.to_string()),
            ("score_channel", enum_name(&self.selection.score_channel)),
            ("drop_empty", self.selection.drop_empty.to_string()),
            ("rescore", self.selection.rescore.to_string()),
            ("retrieval", enum_name(&self.retrieval.kind)),
            ("k", self.retrieval.k.to_string()),
            ("big_k", self.retrieval.big_k.to_string()),
            ("retrieval_seed", self.retrieval.seed.to_string()),
            ("embedder", enum_name(&self.embedder)),
            ("demo_order", enum_name(&self.demo_order)),
            (
                "seeds",
                self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            ),
            ("run_seed", self.run_seed.to_string()),
            ("test_subsample", self.test_subsample.to_string()),
            ("unlabeled_subsample", self.unlabeled_subsample.to_string()),
            ("iterations", self.iterations.to_string()),
            ("parallelism", self.parallelism.to_string()),
            ("infer_sc", self.infer_sc.to_string()),
            ("self_verify", self.self_verify.to_string()),
            ("prompt_template", opt_path(&self.prompt_template)),
            ("retry_attempts", self.retry_attempts.to_string()),
            ("out", self.out.display().to_string()),
            ("cache_dir", opt_path(&self.cache_dir)),
        ]
    }

    /// The config rendered in the file format, without the API key.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .filter(|(k, _)| *k != "api_key")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// sha256 over every setting that can change an output.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            if UNDIGESTED.contains(&k) {
                continue;
            }
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        self.sc.validate()?;
        if !(0.0..=2.0).contains(&self.sc.temperature) {
            return Err(Error::Config(format!("temperature {} outside [0, 2]", self.sc.temperature)));
        }
        self.selection.validate(self.sc.n_samples)?;
        self.effective_retrieval().validate()?;
        if self.backend == BackendKind::Scripted {
            self.noise.validate()?;
        }
        Ok(())
    }

    /// The retrieval policy actually used: `k = 0` means no demonstrations.
    pub fn effective_retrieval(&self) -> RetrievalPolicy {
        let mut p = self.retrieval;
        if p.k == 0 {
            p.kind = RetrievalKind::NoDemos;
        }
        p
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out.join("cache"))
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub text: String,
    pub prompt: String,
    pub demo_ids: Vec<String>,
    pub raw_answers: Vec<String>,
    pub predictions: Vec<EntityPair>,
    pub parse_failures: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub samples: usize,
    pub score: ScoreReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormattedScores {
    pub precision: String,
    pub recall: String,
    pub f1: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub labelset: LabelSet,
    pub backend: String,
    pub model: String,
    pub seeds: Vec<u64>,
    pub selection: SelectionPolicy,
    pub retrieval: RetrievalPolicy,
    pub infer_sc: bool,
    pub per_seed: Vec<SeedReport>,
    pub aggregate: AggregateReport,
    pub formatted: FormattedScores,
    /// Unix time; recorded for remote backends only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    fn row(&self, name: &str) -> TableRow {
        TableRow {
            name: name.to_string(),
            cells: vec![
                ("P".into(), self.formatted.precision.clone()),
                ("R".into(), self.formatted.recall.clone()),
                ("F1".into(), self.formatted.f1.clone()),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    ThEntity,
    ThSample,
    K,
    PoolSize,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "th_entity" | "th-entity" => SweepAxis::ThEntity,
            "th_sample" | "th-sample" => SweepAxis::ThSample,
            "k" => SweepAxis::K,
            "pool_size" | "pool-size" => SweepAxis::PoolSize,
            other => return Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        })
    }
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::ThEntity => "th_entity",
            SweepAxis::ThSample => "th_sample",
            SweepAxis::K => "k",
            SweepAxis::PoolSize => "pool_size",
        }
    }
}

/// Where a demonstration pool comes from.
#[derive(Debug, Clone, Copy)]
pub struct PoolSource<'a> {
    pub pool: &'a Path,
    /// Prebuilt index; built in memory when absent.
    pub index: Option<&'a Path>,
}

fn header_of(v: &Value) -> Option<&Value> {
    v.as_object().filter(|o| o.len() == 1).and_then(|o| o.get("header"))
}

/// Read a stage file: optional header line, then one record per line.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<(Option<Value>, Vec<T>)> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let v: Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if records.is_empty() && header.is_none() {
            if let Some(h) = header_of(&v) {
                header = Some(h.clone());
                continue;
            }
        }
        records.push(serde_json::from_value(v).map_err(|e| bad(e.to_string()))?);
    }
    Ok((header, records))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// A validated configuration with its label set, prompt template, response
/// cache and embedder resolved.
pub struct Pipeline {
    pub config: RunConfig,
    pub labelset: LabelSet,
    pub template: PromptTemplate,
    cache: ResponseCache,
    remote: Option<Arc<RemoteBackend>>,
    embedder: Arc<dyn Embedder>,
    backend_calls: AtomicUsize,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let labelset = match config.labelset.as_str() {
            "ace05" => LabelSet::ace05(),
            path => LabelSet::load(Path::new(path))?,
        };
        let template = match &config.prompt_template {
            Some(p) => PromptTemplate::load_override(p)?,
            None => PromptTemplate::default(),
        };
        let cache = ResponseCache::open(config.cache_path())?;
        let needs_remote = config.backend == BackendKind::Remote || config.embedder == EmbedderKind::Remote;
        let remote = needs_remote.then(|| Arc::new(RemoteBackend::new(config.remote.clone())));
        let embedder: Arc<dyn Embedder> = match config.embedder {
            EmbedderKind::Local => Arc::new(LocalEmbedder),
            EmbedderKind::Remote => Arc::new(RemoteEmbedder::new(
                remote.clone().expect("remote backend configured"),
                Some(cache.clone()),
            )),
        };
        Ok(Pipeline {
            config,
            labelset,
            template,
            cache,
            remote,
            embedder,
            backend_calls: AtomicUsize::new(0),
        })
    }

    /// Same resolved resources under a modified configuration.
    fn derived(&self, config: RunConfig) -> Result<Pipeline> {
        config.validate()?;
        Ok(Pipeline {
            config,
            labelset: self.labelset.clone(),
            template: self.template.clone(),
            cache: self.cache.clone(),
            remote: self.remote.clone(),
            embedder: self.embedder.clone(),
            backend_calls: AtomicUsize::new(0),
        })
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }

    /// Completions requested from the backend so far (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    /// A gateway whose scripted backend (if any) knows `corpus`.
    pub fn gateway(&self, corpus: &[Sample]) -> Result<Gateway> {
        let backend: Arc<dyn Backend> = match self.config.backend {
            BackendKind::Scripted => Arc::new(
                ScriptedBackend::new(self.labelset.clone(), corpus.iter().cloned(), self.config.noise)?
                    .with_template(self.template.clone()),
            ),
            BackendKind::Remote => self.remote.clone().expect("remote backend configured"),
        };
        let retry = RetryPolicy {
            attempts: self.config.retry_attempts.max(1),
            ..RetryPolicy::default()
        };
        Ok(Gateway::new(backend, Some(self.cache.clone())).with_retry(retry))
    }

    pub fn backend_id(&self) -> Result<String> {
        Ok(self.gateway(&[])?.backend_id().to_string())
    }

    fn annotator(&self) -> Annotator {
        Annotator::new(self.labelset.clone(), self.config.sc, self.config.remote.model.clone())
            .with_template(self.template.clone())
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn finish_gateway(&self, gw: &Gateway) {
        self.backend_calls.fetch_add(gw.backend_calls(), Ordering::Relaxed);
        for w in gw.warnings() {
            log::warn!("{w}");
        }
    }

    fn header(&self, stage: &str, extra: Value) -> Value {
        let mut h = json!({
            "stage": stage,
            "config_digest": self.digest(),
            "labelset": self.labelset,
        });
        if let (Some(h), Some(extra)) = (h.as_object_mut(), extra.as_object()) {
            for (k, v) in extra {
                h.insert(k.clone(), v.clone());
            }
        }
        json!({ "header": h })
    }

    fn check_labelset(&self, header: &Option<Value>, path: &Path) -> Result<()> {
        if let Some(ls) = header.as_ref().and_then(|h| h.get("labelset")) {
            let ls: LabelSet = serde_json::from_value(ls.clone())
                .map_err(|e| Error::Data(format!("{}: bad label set in header: {e}", path.display())))?;
            if ls != self.labelset {
                return Err(Error::Data(format!(
                    "{} was produced with label set {:?}, expected {:?}",
                    path.display(),
                    ls.name,
                    self.labelset.name
                )));
            }
        }
        Ok(())
    }

    fn write_stage<T: Serialize>(&self, path: &Path, header: Value, records: &[T]) -> Result<()> {
        let mut lines = Vec::with_capacity(records.len() + 1);
        lines.push(header);
        for r in records {
            lines.push(serde_json::to_value(r)?);
        }
        write_jsonl(path, lines.iter())
    }

    pub fn read_annotated(&self, path: &Path) -> Result<Vec<AnnotatedSample>> {
        let (header, samples) = read_records(path)?;
        self.check_labelset(&header, path)?;
        Ok(samples)
    }

    pub fn load_pool(&self, source: PoolSource<'_>) -> Result<DemoPool> {
        let samples = self.read_annotated(source.pool)?;
        let index = match source.index {
            Some(p) => {
                let index = DemoIndex::read(p)?;
                index.check_embedder(self.embedder())?;
                index
            }
            None => DemoIndex::build(&samples, self.embedder())?,
        };
        DemoPool::new(samples, &index, self.config.selection.score_channel)
    }

    fn query_policy(&self, policy: &RetrievalPolicy, query_id: &str) -> RetrievalPolicy {
        RetrievalPolicy {
            seed: derive_u64("retrieval-query", &[KeyPart::U64(policy.seed), KeyPart::Str(query_id)]),
            ..*policy
        }
    }

    fn query_embeddings(&self, samples: &[Sample]) -> Result<Vec<Embedding>> {
        let texts: Vec<String> = samples.iter().map(|s| s.text.clone()).collect();
        self.embedder.embed_batch(&texts)
    }

    fn demos(
        &self,
        pool: &DemoPool,
        query: &Sample,
        embedding: &Embedding,
        policy: &RetrievalPolicy,
        exclude_self: bool,
    ) -> Result<(Vec<String>, Vec<(String, Vec<EntityPair>)>)> {
        let view;
        let pool = if exclude_self && pool.get(&query.id).is_some() {
            view = pool.excluding(&query.id);
            &view
        } else {
            pool
        };
        let r = retrieve(pool, embedding, &self.query_policy(policy, &query.id))?;
        let demos = demos_for_prompt(pool, &r, self.config.demo_order);
        Ok((r.ids, demos))
    }

    /// Self-annotate the (subsampled) unlabeled corpus. With a prior pool,
    /// annotation prompts carry demonstrations retrieved from it.
    pub fn run_annotate(&self, unlabeled: &Path, prior: Option<PoolSource<'_>>, out: &Path) -> Result<Vec<AnnotatedSample>> {
        let all = load_dataset(unlabeled, &self.labelset)?;
        let samples = subsample(&all, self.config.unlabeled_subsample, self.config.run_seed);
        let policy = self.config.effective_retrieval();
        let pool = match prior {
            Some(src) if policy.kind != RetrievalKind::NoDemos => {
                let pool = self.load_pool(src)?;
                if pool.is_empty() {
                    return Err(Error::EmptyPool);
                }
                Some(pool)
            }
            _ => None,
        };
        let embeddings = match &pool {
            Some(_) => self.query_embeddings(&samples)?,
            None => Vec::new(),
        };
        let gw = self.gateway(&samples)?;
        let annotator = self.annotator();
        let run_seed = self.config.run_seed;
        let result = self.thread_pool()?.install(|| {
            samples
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let demos = match &pool {
                        Some(pool) => self.demos(pool, s, &embeddings[i], &policy, true)?.1,
                        None => Vec::new(),
                    };
                    let mut a = annotator.annotate_sample(&gw, s, &demos, run_seed)?;
                    if self.config.self_verify && !a.predictions.is_empty() {
                        annotator.self_verify(&gw, &mut a, run_seed)?;
                    }
                    Ok(a)
                })
                .collect::<Result<Vec<_>>>()
        });
        self.finish_gateway(&gw);
        let annotated = result?;
        let header = self.header("annotate", json!({ "bootstrapped": pool.is_some() }));
        self.write_stage(out, header, &annotated)?;
        Ok(annotated)
    }

    /// Apply the configured selection policy to an annotated file.
    pub fn run_select(&self, annotated: &Path, out: &Path) -> Result<Vec<AnnotatedSample>> {
        let pool = self.read_annotated(annotated)?;
        let gold = (self.config.selection.kind == SelectionKind::Oracle)
            .then(|| gold_index(&pool.iter().map(AnnotatedSample::sample).collect::<Vec<_>>()));
        let selected = apply_policy(&pool, &self.config.selection, gold.as_ref())?;
        let header = self.header("select", json!({ "selection": self.config.selection }));
        self.write_stage(out, header, &selected)?;
        Ok(selected)
    }

    /// Embed a pool file and persist the index.
    pub fn run_index(&self, pool: &Path, out: &Path) -> Result<DemoIndex> {
        let samples = self.read_annotated(pool)?;
        let index = DemoIndex::build(&samples, self.embedder())?;
        index.write(out)?;
        Ok(index)
    }

    /// Predict every per-seed test subsample, writing one predictions file
    /// per seed into `out_dir`.
    pub fn run_infer(&self, pool: Option<PoolSource<'_>>, test: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
        self.infer_with(&self.config.effective_retrieval(), pool, test, out_dir)
    }

    fn infer_with(
        &self,
        policy: &RetrievalPolicy,
        pool: Option<PoolSource<'_>>,
        test: &Path,
        out_dir: &Path,
    ) -> Result<Vec<PathBuf>> {
        let all = load_dataset(test, &self.labelset)?;
        let pool = if policy.kind == RetrievalKind::NoDemos {
            None
        } else {
            let src = pool.ok_or_else(|| Error::Config("inference with demonstrations needs a pool file".into()))?;
            let pool = self.load_pool(src)?;
            if pool.is_empty() {
                return Err(Error::EmptyPool);
            }
            Some(pool)
        };
        let gw = self.gateway(&all)?;
        let annotator = self.annotator();
        let threads = self.thread_pool()?;
        let mut written = Vec::new();
        let result = (|| {
            for &seed in &self.config.seeds {
                let samples = subsample(&all, self.config.test_subsample, seed);
                let embeddings = match &pool {
                    Some(_) => self.query_embeddings(&samples)?,
                    None => Vec::new(),
                };
                let records = threads.install(|| {
                    samples
                        .par_iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let (demo_ids, demos) = match &pool {
                                Some(pool) => self.demos(pool, s, &embeddings[i], policy, false)?,
                                None => (Vec::new(), Vec::new()),
                            };
                            self.predict(&gw, &annotator, s, demo_ids, &demos)
                        })
                        .collect::<Result<Vec<_>>>()
                })?;
                let path = out_dir.join(predictions_file(seed));
                let header = self.header("infer", json!({ "seed": seed, "retrieval": policy, "infer_sc": self.config.infer_sc }));
                self.write_stage(&path, header, &records)?;
                written.push(path);
            }
            Ok(())
        })();
        self.finish_gateway(&gw);
        result.map(|_| written)
    }

    fn predict(
        &self,
        gw: &Gateway,
        annotator: &Annotator,
        sample: &Sample,
        demo_ids: Vec<String>,
        demos: &[(String, Vec<EntityPair>)],
    ) -> Result<PredictionRecord> {
        let prompt = annotator.prompt(sample, demos);
        let run_seed = self.config.run_seed;
        let (raw_answers, predictions, parse_failures) = if self.config.infer_sc {
            let a = annotator.annotate_sample(gw, sample, demos, run_seed)?;
            let voted = two_stage_majority_vote(&a)?;
            (a.raw_answers, voted.pairs(), a.parse_failures)
        } else {
            let req = crate::gateway::PromptRequest::new(prompt.clone(), 0.0, annotator.model.clone());
            let text = gw.complete(&req, 1, run_seed)?.remove(0).text;
            let parsed = parse_answer(&text);
            let failed = (parsed.status == ParseStatus::Failed) as u32;
            (vec![text], parsed.predictions, failed)
        };
        Ok(PredictionRecord {
            id: sample.id.clone(),
            text: sample.text.clone(),
            prompt,
            demo_ids,
            raw_answers,
            predictions,
            parse_failures,
        })
    }

    pub fn read_predictions(&self, path: &Path) -> Result<(Option<Value>, Vec<PredictionRecord>)> {
        let (header, records) = read_records(path)?;
        self.check_labelset(&header, path)?;
        Ok((header, records))
    }

    /// Score the predictions files in `pred_dir` against the gold test
    /// subsamples and write `report.json` / `report.csv` into `out_dir`.
    pub fn run_eval(&self, test: &Path, pred_dir: &Path, out_dir: &Path) -> Result<RunReport> {
        let all = load_dataset(test, &self.labelset)?;
        let mut per_seed = Vec::new();
        let mut retrieval = self.config.effective_retrieval();
        let mut infer_sc = self.config.infer_sc;
        for &seed in &self.config.seeds {
            let path = pred_dir.join(predictions_file(seed));
            let (header, records) = self.read_predictions(&path)?;
            if let Some(h) = &header {
                if let Some(r) = h.get("retrieval") {
                    retrieval = serde_json::from_value(r.clone())?;
                }
                if let Some(b) = h.get("infer_sc").and_then(Value::as_bool) {
                    infer_sc = b;
                }
            }
            let golds = subsample(&all, self.config.test_subsample, seed)
                .into_iter()
                .map(|s| {
                    let g = s
                        .gold_set()
                        .ok_or_else(|| Error::Data(format!("test sample {:?} has no gold entities", s.id)))?;
                    Ok((s.id, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let preds: Vec<(String, Vec<EntityPair>)> =
                records.into_iter().map(|r| (r.id, r.predictions)).collect();
            let score = micro_f1(&preds, &golds)?;
            per_seed.push(SeedReport {
                seed,
                samples: golds.len(),
                score,
            });
        }
        let scores: Vec<ScoreReport> = per_seed.iter().map(|s| s.score.clone()).collect();
        let aggregate = multi_seed_report(&scores)?;
        let backend = self.backend_id()?;
        let report = RunReport {
            config_digest: self.digest(),
            labelset: self.labelset.clone(),
            generated_at: (self.config.backend == BackendKind::Remote).then(unix_now),
            backend,
            model: self.config.remote.model.clone(),
            seeds: self.config.seeds.clone(),
            selection: self.config.selection,
            retrieval,
            infer_sc,
            formatted: FormattedScores {
                precision: aggregate.precision.format_percent(),
                recall: aggregate.recall.format_percent(),
                f1: aggregate.f1.format_percent(),
            },
            per_seed,
            aggregate,
        };
        write_text(&out_dir.join(REPORT_FILE), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        write_text(&out_dir.join(REPORT_CSV), &report_csv(&report))?;
        Ok(report)
    }

    /// One annotate, select, index, infer and eval pass in `dir`.
    fn full_iteration(&self, unlabeled: &Path, test: &Path, prior: Option<&Path>, dir: &Path) -> Result<RunReport> {
        let prior_index = prior.map(|p| p.with_file_name(INDEX_FILE));
        let prior = prior.map(|p| PoolSource {
            pool: p,
            index: prior_index.as_deref().filter(|i| i.exists()),
        });
        self.run_annotate(unlabeled, prior, &dir.join(ANNOTATED_FILE))?;
        self.select_infer_eval(&dir.join(ANNOTATED_FILE), test, dir)
    }

    fn select_infer_eval(&self, annotated: &Path, test: &Path, dir: &Path) -> Result<RunReport> {
        let pool = dir.join(POOL_FILE);
        let index = dir.join(INDEX_FILE);
        self.run_select(annotated, &pool)?;
        self.run_index(&pool, &index)?;
        self.run_infer(
            Some(PoolSource {
                pool: &pool,
                index: Some(&index),
            }),
            test,
            dir,
        )?;
        self.run_eval(test, dir, dir)
    }

    /// Iteration 0 is the no-demos baseline; iteration `t >= 1` annotates
    /// with the pool selected at `t - 1` (zero-shot at `t = 1`).
    pub fn run_loop(&self, unlabeled: &Path, test: &Path, out: &Path) -> Result<Vec<RunReport>> {
        let mut reports = Vec::new();
        let base = iteration_dir(out, 0);
        let no_demos = RetrievalPolicy {
            kind: RetrievalKind::NoDemos,
            ..self.config.retrieval
        };
        self.infer_with(&no_demos, None, test, &base)?;
        reports.push(self.run_eval(test, &base, &base)?);
        let finish = |reports: &[RunReport]| write_loop_summary(out, reports);
        for t in 1..=self.config.iterations {
            let dir = iteration_dir(out, t);
            let prior = (t >= 2).then(|| iteration_dir(out, t - 1).join(POOL_FILE));
            match self.full_iteration(unlabeled, test, prior.as_deref(), &dir) {
                Ok(r) => reports.push(r),
                Err(e) => {
                    finish(&reports)?;
                    return Err(e);
                }
            }
        }
        finish(&reports)?;
        Ok(reports)
    }

    /// One select + infer + eval per value, sharing one annotation pass
    /// (or, for `pool_size`, the response cache).
    pub fn run_sweep(
        &self,
        axis: SweepAxis,
        values: &[String],
        unlabeled: &Path,
        test: &Path,
        out: &Path,
    ) -> Result<ComparisonTable> {
        if values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        let shared = out.join(ANNOTATED_FILE);
        if axis != SweepAxis::PoolSize {
            self.run_annotate(unlabeled, None, &shared)?;
        }
        let mut rows = Vec::new();
        for value in values {
            let name = format!("{}={value}", axis.name());
            let dir = out.join(&name);
            let outcome = self.sweep_config(axis, value).and_then(|cfg| {
                let p = self.derived(cfg)?;
                let r = if axis == SweepAxis::PoolSize {
                    p.full_iteration(unlabeled, test, None, &dir)
                } else {
                    p.select_infer_eval(&shared, test, &dir)
                };
                self.backend_calls.fetch_add(p.backend_calls(), Ordering::Relaxed);
                r
            });
            rows.push(match outcome {
                Ok(r) => r.row(&name),
                Err(e) => {
                    log::error!("sweep value {name} failed: {e}");
                    TableRow {
                        name,
                        cells: vec![("error".into(), e.to_string())],
                    }
                }
            });
        }
        let table = comparison_table(&rows);
        write_text(&out.join("sweep.csv"), &table.to_csv())?;
        write_text(&out.join("sweep.txt"), &table.to_text())?;
        Ok(table)
    }

    fn sweep_config(&self, axis: SweepAxis, value: &str) -> Result<RunConfig> {
        let mut cfg = self.config.clone();
        match axis {
            SweepAxis::ThEntity => {
                cfg.selection.kind = SelectionKind::EntityThreshold;
                cfg.selection.th_entity = parse_value("th_entity", value)?;
            }
            SweepAxis::ThSample => {
                cfg.selection.kind = SelectionKind::SampleThreshold;
                cfg.selection.th_sample = parse_value("th_sample", value)?;
            }
            SweepAxis::K => {
                cfg.retrieval.k = parse_value("k", value)?;
                cfg.retrieval.big_k = cfg.retrieval.big_k.max(cfg.retrieval.k);
            }
            SweepAxis::PoolSize => cfg.unlabeled_subsample = parse_value("pool_size", value)?,
        }
        Ok(cfg)
    }

    /// Vote histograms of true versus false predictions in an annotated file.
    pub fn run_density(&self, annotated: &Path, bins: usize, out_dir: &Path) -> Result<DensityTable> {
        let pool = self.read_annotated(annotated)?;
        let gold: HashMap<String, Vec<EntityPair>> =
            gold_index(&pool.iter().map(AnnotatedSample::sample).collect::<Vec<_>>());
        let table = sc_density(&pool, &gold, bins)?;
        write_text(&out_dir.join("density.csv"), &table.to_csv())?;
        write_text(
            &out_dir.join("density.json"),
            &(serde_json::to_string_pretty(&table)? + "\n"),
        )?;
        Ok(table)
    }

    /// Validate a dataset and optionally subsample it. With `as_pool`, the
    /// gold labels become a pool file with maximal votes.
    pub fn run_ingest(&self, input: &Path, out: &Path, n: Option<usize>, seed: u64, as_pool: bool) -> Result<usize> {
        let all = load_dataset(input, &self.labelset)?;
        let samples = match n {
            Some(n) => subsample(&all, n, seed),
            None => all,
        };
        if as_pool {
            let pool = samples
                .iter()
                .map(|s| AnnotatedSample::from_gold(s, self.config.sc.n_samples))
                .collect::<Result<Vec<_>>>()?;
            self.write_stage(out, self.header("ingest", json!({ "gold_pool": true })), &pool)?;
        } else {
            crate::corpus::write_dataset(out, &samples)?;
        }
        Ok(samples.len())
    }
}

fn report_csv(report: &RunReport) -> String {
    let mut out = String::from("seed,type,tp,fp,fn,precision,recall,f1\n");
    for s in &report.per_seed {
        for (t, c) in &s.score.per_type {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.seed,
                t,
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall(),
                c.f1()
            ));
        }
        let r = &s.score;
        out.push_str(&format!(
            "{},all,{},{},{},{},{},{}\n",
            s.seed, r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1
        ));
    }
    out
}

fn write_loop_summary(out: &Path, reports: &[RunReport]) -> Result<()> {
    let rows: Vec<TableRow> = reports
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let mut row = r.row(&format!("iter_{t}"));
            row.cells.push(("F1 mean".into(), format!("{:.6}", r.aggregate.f1.mean)));
            row
        })
        .collect();
    let table = comparison_table(&rows);
    write_text(&out.join("summary.csv"), &table.to_csv())?;
    write_text(&out.join("summary.txt"), &table.to_text())
}

/// Comparison table over named report files. All reports must share one
/// label set.
pub fn compare_reports(named: &[(String, PathBuf)]) -> Result<ComparisonTable> {
    let mut rows = Vec::new();
    let mut labelset: Option<LabelSet> = None;
    for (name, path) in named {
        let r = RunReport::load(path)?;
        match &labelset {
            None => labelset = Some(r.labelset.clone()),
            Some(ls) if *ls != r.labelset => {
                return Err(Error::Data(format!(
                    "{} uses label set {:?} but earlier reports use {:?}",
                    path.display(),
                    r.labelset.name,
                    ls.name
                )))
            }
            _ => {}
        }
        rows.push(r.row(name));
    }
    Ok(comparison_table(&rows))
}
