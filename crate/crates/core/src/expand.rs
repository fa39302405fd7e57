//! Description dictionary construction and the three-step boundary expansion.
//!
//! Captions for every frame are generated once, before training, through a
//! [`CaptionProvider`]. During training the initial boundary `p_o` selects the
//! frames whose descriptions feed one sampled region description, which is
//! embedded and used as the query of the second predictor to produce `p_n`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Duration;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::matchers::TokenEmbedder;
use crate::model::{predict_boundary, DiffBoundary, ParamVars};
use crate::rng::{self, fnv1a, Stream};
use crate::diff::Tape;
use crate::types::{timeline, Description, DescriptionDict, GroundingInstance, TemporalBoundary};

/// The five captioning prompts.
pub const DEFAULT_PROMPTS: [&str; 5] = [
    "Generate captions for that video frame.",
    "Provide a detailed description of the following frame.",
    "Describe the following frame in detail.",
    "Elaborate on the details of this frame in your own words.",
    "Describe the image concisely.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    /// Descriptions per frame.
    pub n_p: usize,
    /// Frames sampled from a region when building its description.
    pub n_f: usize,
    pub prompts: Vec<String>,
    pub rng_seed: u64,
    /// Upper bound on concurrent provider requests.
    pub max_in_flight: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            n_p: 5,
            n_f: 5,
            prompts: DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect(),
            rng_seed: 0,
            max_in_flight: 8,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.n_f == 0 {
            return Err(Error::Config("n_p and n_f must be >= 1".into()));
        }
        if self.prompts.is_empty() {
            return Err(Error::Config("at least one prompt is required".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

/// What the provider gets to look at for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramePayload {
    Features(Vec<f64>),
    ImageRef(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub video_id: String,
    pub frame_index: usize,
    pub frame_payload: FramePayload,
    pub prompts: Vec<String>,
    /// Number of descriptions expected back.
    pub n_descriptions: usize,
}

/// Source of frame descriptions.
pub trait CaptionProvider: Sync {
    /// Returns exactly `req.n_descriptions` strings; description `j` is
    /// attributed to prompt `j % req.prompts.len()`.
    fn describe(&self, req: &CaptionRequest) -> Result<Vec<String>>;
}

/// Offline stub that echoes the known tokens of each frame, with optional
/// per-description token dropout.
#[derive(Debug, Clone)]
pub struct EchoProvider {
    frame_tokens: BTreeMap<String, Vec<Vec<String>>>,
    dropout: f64,
    seed: u64,
}

impl EchoProvider {
    pub fn new(frame_tokens: BTreeMap<String, Vec<Vec<String>>>, dropout: f64, seed: u64) -> Self {
        Self {
            frame_tokens,
            dropout,
            seed,
        }
    }
}

impl CaptionProvider for EchoProvider {
    fn describe(&self, req: &CaptionRequest) -> Result<Vec<String>> {
        let tokens = self
            .frame_tokens
            .get(&req.video_id)
            .and_then(|frames| frames.get(req.frame_index))
            .ok_or_else(|| Error::Provider(format!("no tokens for {}/{}", req.video_id, req.frame_index)))?;
        Ok((0..req.n_descriptions)
            .map(|j| {
                let mut r = rng::stream(
                    self.seed,
                    Stream::Captions,
                    &[fnv1a(req.video_id.as_bytes()), req.frame_index as u64, j as u64],
                );
                let kept: Vec<&str> = tokens
                    .iter()
                    .filter(|_| self.dropout <= 0.0 || r.random::<f64>() >= self.dropout)
                    .map(String::as_str)
                    .collect();
                kept.join(" ")
            })
            .collect())
    }
}

/// Replays descriptions from an existing dictionary file.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    dict: DescriptionDict,
}

impl ReplayProvider {
    pub fn new(dict: DescriptionDict) -> Self {
        Self { dict }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(io::load_dictionary(path)?))
    }
}

impl CaptionProvider for ReplayProvider {
    fn describe(&self, req: &CaptionRequest) -> Result<Vec<String>> {
        let ds = self
            .dict
            .lookup(&req.video_id, req.frame_index)
            .ok_or_else(|| Error::Provider(format!("no replay entry for {}/{}", req.video_id, req.frame_index)))?;
        if ds.len() < req.n_descriptions {
            return Err(Error::Provider(format!(
                "replay entry for {}/{} has {} descriptions, {} requested",
                req.video_id,
                req.frame_index,
                ds.len(),
                req.n_descriptions
            )));
        }
        Ok(ds.iter().take(req.n_descriptions).map(|d| d.text.clone()).collect())
    }
}

/// Body of `POST /describe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeRequest {
    pub video_id: String,
    pub frame_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    pub prompts: Vec<String>,
    pub repeats: usize,
    pub temperature: f64,
}

/// Reply of `POST /describe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeResponse {
    pub descriptions: Vec<String>,
    pub model_id: String,
    pub latency_ms: f64,
}

/// Body of `POST /similarity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRequest {
    pub query: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResponse {
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_id: String,
}

/// Blocking JSON client for the caption/similarity service. Retries on 503
/// with exponential backoff.
#[derive(Debug, Clone)]
pub struct HttpCaptionClient {
    base: String,
    agent: ureq::Agent,
    pub max_retries: u32,
    pub backoff: Duration,
    pub temperature: f64,
}

impl HttpCaptionClient {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .new_agent();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
            max_retries: 4,
            backoff: Duration::from_millis(200),
            temperature: 0.0,
        }
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}{}", self.base, path);
        let mut attempt = 0;
        loop {
            let resp = self
                .agent
                .post(&url)
                .send_json(body)
                .map_err(|e| Error::Provider(format!("{url}: {e}")))?;
            let status = resp.status().as_u16();
            if status == 503 && attempt < self.max_retries {
                std::thread::sleep(self.backoff * 2u32.pow(attempt));
                attempt += 1;
                continue;
            }
            if status != 200 {
                return Err(Error::Provider(format!("{url}: HTTP {status}")));
            }
            return resp
                .into_body()
                .read_json()
                .map_err(|e| Error::Provider(format!("{url}: bad response body: {e}")));
        }
    }

    pub fn describe_raw(&self, req: &DescribeRequest) -> Result<DescribeResponse> {
        self.post("/describe", req)
    }

    /// Raw similarities of `query` to each candidate; normalization is left to
    /// the caller.
    pub fn similarity(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let resp: SimilarityResponse = self.post(
            "/similarity",
            &SimilarityRequest {
                query: query.to_string(),
                candidates: candidates.to_vec(),
            },
        )?;
        if resp.scores.len() != candidates.len() {
            return Err(Error::Provider(format!(
                "similarity returned {} scores for {} candidates",
                resp.scores.len(),
                candidates.len()
            )));
        }
        Ok(resp.scores)
    }

    pub fn health(&self) -> Result<HealthResponse> {
        let url = format!("{}/healthz", self.base);
        let resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| Error::Provider(format!("{url}: {e}")))?;
        if resp.status().as_u16() != 200 {
            return Err(Error::Provider(format!("{url}: HTTP {}", resp.status())));
        }
        resp.into_body()
            .read_json()
            .map_err(|e| Error::Provider(format!("{url}: {e}")))
    }
}

impl CaptionProvider for HttpCaptionClient {
    fn describe(&self, req: &CaptionRequest) -> Result<Vec<String>> {
        let repeats = req.n_descriptions.div_ceil(req.prompts.len());
        let (image_b64, features) = match &req.frame_payload {
            FramePayload::ImageRef(s) => (Some(s.clone()), None),
            FramePayload::Features(f) => (None, Some(f.clone())),
        };
        let resp = self.describe_raw(&DescribeRequest {
            video_id: req.video_id.clone(),
            frame_index: req.frame_index,
            image_b64,
            features,
            prompts: req.prompts.clone(),
            repeats,
            temperature: self.temperature,
        })?;
        let expected = req.prompts.len() * repeats;
        if resp.descriptions.len() != expected {
            return Err(Error::Provider(format!(
                "describe returned {} descriptions, expected {expected}",
                resp.descriptions.len()
            )));
        }
        if resp.model_id.is_empty() {
            return Err(Error::Provider("describe response has an empty model_id".into()));
        }
        Ok(resp.descriptions.into_iter().take(req.n_descriptions).collect())
    }
}

/// Generates `n_p` descriptions for every frame of every distinct video.
///
/// Requests fan out over at most `cfg.max_in_flight` workers. Any failed frame
/// fails the build with the full list of missing `(video, frame)` pairs.
pub fn build_dictionary(
    dataset: &[GroundingInstance],
    provider: &dyn CaptionProvider,
    cfg: &ExpansionConfig,
) -> Result<DescriptionDict> {
    use rayon::prelude::*;
    cfg.validate()?;
    let mut seen = HashSet::new();
    let requests: Vec<CaptionRequest> = dataset
        .iter()
        .filter(|inst| seen.insert(inst.video_id.clone()))
        .flat_map(|inst| {
            inst.frames.iter().enumerate().map(|(i, f)| CaptionRequest {
                video_id: inst.video_id.clone(),
                frame_index: i,
                frame_payload: FramePayload::Features(f.clone()),
                prompts: cfg.prompts.clone(),
                n_descriptions: cfg.n_p,
            })
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<String>>> =
        pool.install(|| requests.par_iter().map(|r| provider.describe(r)).collect());

    let mut dict = DescriptionDict::new(cfg.n_p);
    let mut missing = Vec::new();
    for (req, res) in requests.iter().zip(results) {
        match res {
            Ok(texts) if texts.len() == cfg.n_p => {
                let ds = texts
                    .into_iter()
                    .enumerate()
                    .map(|(j, text)| Description {
                        prompt_id: j % cfg.prompts.len(),
                        text,
                    })
                    .collect();
                dict.insert(&req.video_id, req.frame_index, ds)?;
            }
            _ => missing.push((req.video_id.clone(), req.frame_index)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEntries { missing });
    }
    Ok(dict)
}

/// Frames whose centers fall in the clamped interval of `b`; falls back to the
/// frame nearest the center when none does.
pub fn region_frames(b: &TemporalBoundary, t: usize) -> Vec<usize> {
    let iv = b.clamp_interval();
    let tl = timeline(t);
    let inside: Vec<usize> = (0..t).filter(|&i| iv.contains(tl[i])).collect();
    if !inside.is_empty() {
        return inside;
    }
    let nearest = (0..t)
        .min_by(|&a, &b_| {
            (tl[a] - b.center)
                .abs()
                .total_cmp(&(tl[b_] - b.center).abs())
        })
        .unwrap_or(0);
    vec![nearest]
}

/// Samples up to `n_f` distinct frames of the region, pools their
/// descriptions and returns one uniformly at random.
pub fn sample_region_description<R: Rng + ?Sized>(
    dict: &DescriptionDict,
    video_id: &str,
    t: usize,
    b: &TemporalBoundary,
    cfg: &ExpansionConfig,
    rng: &mut R,
) -> Result<String> {
    let frames = region_frames(b, t);
    let take = cfg.n_f.min(frames.len());
    let mut chosen: Vec<usize> = index::sample(rng, frames.len(), take)
        .into_iter()
        .map(|j| frames[j])
        .collect();
    chosen.sort_unstable();
    let mut pool: Vec<&str> = Vec::new();
    let mut missing = Vec::new();
    for f in chosen {
        match dict.lookup(video_id, f) {
            Some(ds) => pool.extend(ds.iter().map(|d| d.text.as_str())),
            None => missing.push((video_id.to_string(), f)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEntries { missing });
    }
    pool.choose(rng)
        .map(|s| s.to_string())
        .ok_or_else(|| Error::Data(format!("{video_id}: empty description pool")))
}

/// Turns text into a query embedding for the second predictor.
pub trait TextEmbedder {
    fn embed_text(&self, text: &str) -> Vec<f64>;
}

impl TextEmbedder for TokenEmbedder {
    fn embed_text(&self, text: &str) -> Vec<f64> {
        TokenEmbedder::embed_text(self, text)
    }
}

impl<F: Fn(&str) -> Vec<f64>> TextEmbedder for F {
    fn embed_text(&self, text: &str) -> Vec<f64> {
        self(text)
    }
}

/// Result of one expansion step.
#[derive(Debug, Clone)]
pub struct Expansion {
    pub p_o: DiffBoundary,
    pub p_n: DiffBoundary,
    pub description: String,
    /// Constant input of the second predictor; no gradient flows into it.
    pub expanded_embedding: Vec<f64>,
}

/// (1) predict `p_o` from the original query, (2) sample a description of
/// the region it covers, (3) predict `p_n` from that description.
#[allow(clippy::too_many_arguments)]
pub fn expand_step<R: Rng + ?Sized>(
    tape: &mut Tape,
    instance: &GroundingInstance,
    params_o: &ParamVars,
    params_n: &ParamVars,
    dict: &DescriptionDict,
    embedder: &dyn TextEmbedder,
    cfg: &ExpansionConfig,
    rng: &mut R,
) -> Result<Expansion> {
    let p_o = predict_boundary(tape, instance, &instance.query_embedding, params_o)?;
    let region = p_o.value(tape);
    let description = sample_region_description(dict, &instance.video_id, instance.num_frames(), &region, cfg, rng)?;
    let expanded_embedding = embedder.embed_text(&description);
    let p_n = predict_boundary(tape, instance, &expanded_embedding, params_n)?;
    Ok(Expansion {
        p_o,
        p_n,
        description,
        expanded_embedding,
    })
}
