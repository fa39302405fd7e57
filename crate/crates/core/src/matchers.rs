//! Query-description (QDM) and query-frame (QFM) score sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{dot, norm};
use crate::error::{Error, Result};
use crate::rng::fnv1a;
use crate::types::{DescriptionDict, FrameScoreSequence, GroundingInstance, ScoreKind};

/// Deterministic hashed bag-of-tokens embedder.
///
/// Each token hashes into one of `hash_size` buckets; each bucket owns a fixed
/// Gaussian direction in `R^dim`. A token sequence embeds to the L2-normalized
/// sum of its bucket vectors. The empty sequence embeds to the zero vector.
#[derive(Debug, Clone)]
pub struct TokenEmbedder {
    dim: usize,
    hash_size: usize,
    table: Vec<f64>,
}

pub const DEFAULT_HASH_SIZE: usize = 4096;

impl TokenEmbedder {
    pub fn new(dim: usize, hash_size: usize) -> Self {
        let mut table = Vec::with_capacity(dim * hash_size);
        for bucket in 0..hash_size {
            let mut rng = ChaCha8Rng::seed_from_u64(0x70C3_u64 ^ (bucket as u64).wrapping_mul(0x9E37_79B9));
            for _ in 0..dim {
                table.push(StandardNormal.sample(&mut rng));
            }
        }
        Self {
            dim,
            hash_size,
            table,
        }
    }

    pub fn with_dim(dim: usize) -> Self {
        Self::new(dim, DEFAULT_HASH_SIZE)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn bucket(&self, token: &str) -> &[f64] {
        let b = (fnv1a(token.as_bytes()) % self.hash_size as u64) as usize;
        &self.table[b * self.dim..(b + 1) * self.dim]
    }

    pub fn embed<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in tokens {
            for (acc, x) in v.iter_mut().zip(self.bucket(t.as_ref())) {
                *acc += x;
            }
        }
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        self.embed(&tokenize(text))
    }
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric() && c != '_')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// `(x − min) / (max − min)`, or all zeros for a constant input.
pub fn minmax_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// How a frame's `n_p` description similarities collapse to one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

fn aggregate(values: impl Iterator<Item = f64>, agg: Aggregation) -> f64 {
    match agg {
        Aggregation::Max => values.fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => {
            let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            s / n as f64
        }
    }
}

/// Raw (unnormalized) query-description similarity per frame.
pub fn qdm_raw<S: AsRef<str>>(
    query_tokens: &[S],
    dict: &DescriptionDict,
    video_id: &str,
    t: usize,
    embedder: &TokenEmbedder,
    agg: Aggregation,
) -> Result<Vec<f64>> {
    let missing = dict.missing_frames(video_id, t);
    if !missing.is_empty() {
        return Err(Error::MissingEntries {
            missing: missing.into_iter().map(|f| (video_id.to_string(), f)).collect(),
        });
    }
    let q = embedder.embed(query_tokens);
    Ok((0..t)
        .map(|i| {
            let descs = dict.lookup(video_id, i).expect("checked above");
            aggregate(
                descs.iter().map(|d| cosine(&q, &embedder.embed_text(&d.text))),
                agg,
            )
        })
        .collect())
}

/// Min-max normalized QDM sequence.
pub fn qdm_scores<S: AsRef<str>>(
    query_tokens: &[S],
    dict: &DescriptionDict,
    video_id: &str,
    t: usize,
    embedder: &TokenEmbedder,
    agg: Aggregation,
) -> Result<FrameScoreSequence> {
    let raw = qdm_raw(query_tokens, dict, video_id, t, embedder, agg)?;
    Ok(FrameScoreSequence {
        scores: minmax_normalize(&raw),
        kind: ScoreKind::Qdm,
    })
}

/// Min-max normalized cosine between the query embedding and every frame.
pub fn qfm_scores(query_embedding: &[f64], instance: &GroundingInstance) -> Result<FrameScoreSequence> {
    if query_embedding.len() != instance.feature_dim() {
        return Err(Error::Config(format!(
            "query embedding dim {} vs frame dim {}",
            query_embedding.len(),
            instance.feature_dim()
        )));
    }
    let raw: Vec<f64> = instance
        .frames
        .iter()
        .map(|f| cosine(query_embedding, f))
        .collect();
    Ok(FrameScoreSequence {
        scores: minmax_normalize(&raw),
        kind: ScoreKind::Qfm,
    })
}

/// One line of the score cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCacheRow {
    pub video_id: String,
    pub query_hash: String,
    pub kind: ScoreKind,
    pub scores: Vec<f64>,
}

pub fn query_hash<S: AsRef<str>>(tokens: &[S]) -> String {
    let joined = tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
    format!("{:016x}", fnv1a(joined.as_bytes()))
}

/// QDM and QFM sequences of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceScores {
    pub qdm: FrameScoreSequence,
    pub qfm: FrameScoreSequence,
}

/// Computes both sequences for every instance, in order.
pub fn score_dataset(
    instances: &[GroundingInstance],
    dict: &DescriptionDict,
    embedder: &TokenEmbedder,
    agg: Aggregation,
) -> Result<Vec<InstanceScores>> {
    use rayon::prelude::*;
    instances
        .par_iter()
        .map(|inst| {
            Ok(InstanceScores {
                qdm: qdm_scores(
                    &inst.query_tokens,
                    dict,
                    &inst.video_id,
                    inst.num_frames(),
                    embedder,
                    agg,
                )?,
                qfm: qfm_scores(&inst.query_embedding, inst)?,
            })
        })
        .collect()
}

pub fn cache_rows(instances: &[GroundingInstance], scores: &[InstanceScores]) -> Vec<ScoreCacheRow> {
    instances
        .iter()
        .zip(scores)
        .flat_map(|(inst, s)| {
            let h = query_hash(&inst.query_tokens);
            [&s.qdm, &s.qfm].map(|seq| ScoreCacheRow {
                video_id: inst.video_id.clone(),
                query_hash: h.clone(),
                kind: seq.kind,
                scores: seq.scores.clone(),
            })
        })
        .collect()
}

/// Rebuilds per-instance scores from cache rows; every instance needs both kinds.
pub fn scores_from_cache(instances: &[GroundingInstance], rows: &[ScoreCacheRow]) -> Result<Vec<InstanceScores>> {
    use std::collections::HashMap;
    let index: HashMap<(&str, &str, ScoreKind), &ScoreCacheRow> = rows
        .iter()
        .map(|r| ((r.video_id.as_str(), r.query_hash.as_str(), r.kind), r))
        .collect();
    instances
        .iter()
        .map(|inst| {
            let h = query_hash(&inst.query_tokens);
            let get = |kind| -> Result<FrameScoreSequence> {
                let row = index
                    .get(&(inst.video_id.as_str(), h.as_str(), kind))
                    .ok_or_else(|| Error::Data(format!("no {kind:?} scores cached for {}", inst.video_id)))?;
                if row.scores.len() != inst.num_frames() {
                    return Err(Error::Data(format!("cached {kind:?} length mismatch for {}", inst.video_id)));
                }
                Ok(FrameScoreSequence {
                    scores: row.scores.clone(),
                    kind,
                })
            };
            Ok(InstanceScores {
                qdm: get(ScoreKind::Qdm)?,
                qfm: get(ScoreKind::Qfm)?,
            })
        })
        .collect()
}
