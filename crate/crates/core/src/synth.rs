//! Synthetic grounding benchmark with known ground truth, and brute-force
//! minimizers of the contrastive objective used as oracles.
//!
//! Every video has one event. Frames whose centers fall inside the event carry
//! a per-video set of content tokens; all other frames carry a per-video set of
//! distractor tokens. Frame features are the embedding of the frame tokens plus
//! Gaussian noise. The query names only a fraction of the content tokens,
//! while the stub captioner describes each frame with all of its tokens.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{sigmoid, Tape};
use crate::error::{Error, Result};
use crate::expand::EchoProvider;
use crate::losses::{hard_pcl_contrast, hard_pcl_loss, pcl_contrast};
use crate::matchers::TokenEmbedder;
use crate::model::DiffBoundary;
use crate::optim::{anneal, Adam};
use crate::rng::{self, Stream};
use crate::types::{timeline, FrameScoreSequence, GroundingInstance, Interval, ScoreKind, TemporalBoundary, MAX_FRAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_instances: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub gt_width_range: (f64, f64),
    pub noise_sigma: f64,
    pub partial_query_fraction: f64,
    pub vocab: Vec<String>,
    pub seed: u64,
    /// Content tokens per event.
    pub content_size: usize,
    /// Distractor tokens per video.
    pub distractor_size: usize,
    /// Probability of dropping each token from a stub description.
    pub description_dropout: f64,
    /// Prefix of generated video ids, so train and test splits never collide.
    pub id_prefix: String,
}

/// `w000`, `w001`, ...
pub fn default_vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i:03}")).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_instances: 500,
            t: 64,
            c: 16,
            gt_width_range: (0.15, 0.45),
            noise_sigma: 0.5,
            partial_query_fraction: 0.5,
            vocab: default_vocab(200),
            seed: 0,
            content_size: 6,
            distractor_size: 6,
            description_dropout: 0.0,
            id_prefix: "syn".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t == 0 || self.t > MAX_FRAMES {
            return bad(format!("T = {} outside 1..={MAX_FRAMES}", self.t));
        }
        if self.c == 0 {
            return bad("C must be >= 1".into());
        }
        let (lo, hi) = self.gt_width_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("gt_width_range {:?} must satisfy 0 < min <= max < 1", self.gt_width_range));
        }
        if lo < 1.0 / self.t as f64 {
            return bad(format!("minimum gt width {lo} is narrower than one frame (1/{})", self.t));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma = {}", self.noise_sigma));
        }
        if !(self.partial_query_fraction > 0.0 && self.partial_query_fraction <= 1.0) {
            return bad(format!("partial_query_fraction = {} outside (0, 1]", self.partial_query_fraction));
        }
        if !(0.0..1.0).contains(&self.description_dropout) {
            return bad(format!("description_dropout = {} outside [0, 1)", self.description_dropout));
        }
        if self.content_size == 0 || self.distractor_size == 0 {
            return bad("content_size and distractor_size must be >= 1".into());
        }
        if self.vocab.len() < self.content_size + self.distractor_size {
            return bad(format!(
                "vocab of {} tokens cannot supply {} content + {} distractor tokens",
                self.vocab.len(),
                self.content_size,
                self.distractor_size
            ));
        }
        Ok(())
    }

    /// Number of content tokens kept in each query.
    pub fn query_size(&self) -> usize {
        ((self.partial_query_fraction * self.content_size as f64).ceil() as usize).clamp(1, self.content_size)
    }
}

/// Known construction of one synthetic video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub gt: Interval,
    pub content: Vec<String>,
    pub distractors: Vec<String>,
    /// Tokens carried by each frame.
    pub frame_tokens: Vec<Vec<String>>,
}

/// Ground-truth sidecar of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub videos: BTreeMap<String, VideoTruth>,
}

impl SynthTruth {
    /// Offline captioner that describes every frame with its tokens.
    pub fn caption_provider(&self) -> EchoProvider {
        let tokens = self
            .videos
            .iter()
            .map(|(id, v)| (id.clone(), v.frame_tokens.clone()))
            .collect();
        EchoProvider::new(tokens, self.config.description_dropout, self.config.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub instances: Vec<GroundingInstance>,
    pub truth: SynthTruth,
}

fn generate_one(cfg: &SynthConfig, embedder: &TokenEmbedder, i: usize) -> (GroundingInstance, VideoTruth) {
    let mut rng = rng::stream(cfg.seed, Stream::Data, &[i as u64]);
    let (lo, hi) = cfg.gt_width_range;
    let width = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let center = rng.random_range(width / 2.0..=1.0 - width / 2.0);
    let gt = Interval::new(center - width / 2.0, center + width / 2.0);

    let picks = index::sample(&mut rng, cfg.vocab.len(), cfg.content_size + cfg.distractor_size).into_vec();
    let content: Vec<String> = picks[..cfg.content_size].iter().map(|&j| cfg.vocab[j].clone()).collect();
    let distractors: Vec<String> = picks[cfg.content_size..].iter().map(|&j| cfg.vocab[j].clone()).collect();

    let tl = timeline(cfg.t);
    let frame_tokens: Vec<Vec<String>> = tl
        .iter()
        .map(|&t| if gt.contains(t) { content.clone() } else { distractors.clone() })
        .collect();
    let (e_content, e_distractor) = (embedder.embed(&content), embedder.embed(&distractors));
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let frames = tl
        .iter()
        .map(|&t| {
            let base = if gt.contains(t) { &e_content } else { &e_distractor };
            base.iter()
                .map(|x| if cfg.noise_sigma > 0.0 { x + noise.sample(&mut rng) } else { *x })
                .collect()
        })
        .collect();

    let query_tokens: Vec<String> = content[..cfg.query_size()].to_vec();
    let instance = GroundingInstance {
        video_id: format!("{}{:05}", cfg.id_prefix, i),
        frames,
        query_embedding: embedder.embed(&query_tokens),
        query_tokens,
        gt: Some(gt),
    };
    (
        instance,
        VideoTruth {
            gt,
            content,
            distractors,
            frame_tokens,
        },
    )
}

/// Generates `cfg.n_instances` videos, one query each.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let embedder = TokenEmbedder::with_dim(cfg.c);
    let generated: Vec<(GroundingInstance, VideoTruth)> = (0..cfg.n_instances)
        .into_par_iter()
        .map(|i| generate_one(cfg, &embedder, i))
        .collect();
    let mut instances = Vec::with_capacity(generated.len());
    let mut videos = BTreeMap::new();
    for (inst, truth) in generated {
        videos.insert(inst.video_id.clone(), truth);
        instances.push(inst);
    }
    Ok(SynthDataset {
        instances,
        truth: SynthTruth {
            config: cfg.clone(),
            videos,
        },
    })
}

/// A score sequence with one contiguous plateau at 1 and exponentially
/// decaying shoulders, min-max normalized.
pub fn unimodal_scores<R: Rng + ?Sized>(t: usize, rng: &mut R) -> FrameScoreSequence {
    let width = rng.random_range(0.15..0.5);
    let center = rng.random_range(width / 2.0 + 0.05..1.0 - width / 2.0 - 0.05);
    let (a, b) = (center - width / 2.0, center + width / 2.0);
    let decay = rng.random_range(0.01..0.06);
    let shoulder = rng.random_range(0.2..0.6);
    let raw: Vec<f64> = timeline(t)
        .iter()
        .map(|&x| {
            let d = if x < a { a - x } else if x > b { x - b } else { 0.0 };
            if d == 0.0 {
                1.0
            } else {
                shoulder * (-d / decay).exp()
            }
        })
        .collect();
    FrameScoreSequence {
        scores: crate::matchers::minmax_normalize(&raw),
        kind: ScoreKind::Qfm,
    }
}

/// Grid point `j` of an `n`-step axis over `(0, 1)`.
pub fn grid_value(j: usize, n: usize) -> f64 {
    (j as f64 + 0.5) / n as f64
}

/// Ranking of a boundary under the hard-window contrastive loss: the hinged
/// loss first, then the pre-hinge contrast sum with an empty flank counted
/// as `δ`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct HardKey {
    loss: f64,
    pre_hinge: f64,
}

fn hard_key(b: TemporalBoundary, s: &[f64], tau: f64, delta_pcl: f64, tl: &[f64]) -> HardKey {
    let (c1, c2) = hard_pcl_contrast(b, s, tau, tl);
    HardKey {
        loss: hard_pcl_loss(b, s, tau, delta_pcl, tl),
        pre_hinge: c1.unwrap_or(delta_pcl) + c2.unwrap_or(delta_pcl),
    }
}

/// Exhaustive minimizer of the hard-window contrastive loss.
///
/// The hinged loss is flat at `2δ` wherever both contrasts are below `δ`, so
/// ties are broken by the pre-hinge contrast sum (an empty flank counts as
/// `δ`), then by the smallest center, then by the smallest width.
pub fn oracle_boundary(scores: &FrameScoreSequence, grid_resolution: usize, tau: f64, delta_pcl: f64) -> TemporalBoundary {
    let n = grid_resolution.max(1);
    let tl = timeline(scores.scores.len());
    let s = &scores.scores;
    let eval = |ci: usize, wi: usize| {
        let b = TemporalBoundary {
            center: grid_value(ci, n),
            width: grid_value(wi, n),
        };
        let k = hard_key(b, s, tau, delta_pcl, &tl);
        (k.loss, k.pre_hinge, ci, wi)
    };
    let better = |a: (f64, f64, usize, usize), b: (f64, f64, usize, usize)| {
        match a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)) {
            std::cmp::Ordering::Greater => b,
            _ => a,
        }
    };
    let best = (0..n)
        .into_par_iter()
        .map(|ci| (0..n).map(|wi| eval(ci, wi)).reduce(better).expect("non-empty grid"))
        .collect::<Vec<_>>()
        .into_iter()
        .reduce(better)
        .expect("non-empty grid");
    TemporalBoundary {
        center: grid_value(best.2, n),
        width: grid_value(best.3, n),
    }
}

/// Settings of the gradient-descent minimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    pub k_start: f64,
    pub k_end: f64,
    pub tau: f64,
    pub delta_pcl: f64,
    pub seed: u64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            steps: 500,
            lr: 0.02,
            k_start: 50.0,
            k_end: 500.0,
            tau: 0.25,
            delta_pcl: 0.15,
            seed: 0,
        }
    }
}

/// Soft pre-hinge contrast sum and its gradient w.r.t. the `(c, w)` logits.
fn soft_objective(scores: &FrameScoreSequence, tl: &[f64], logits: [f64; 2], tau: f64, delta: f64, k: f64) -> Result<(f64, [f64; 2])> {
    let mut tape = Tape::new();
    let zc = tape.var(logits[0]);
    let zw = tape.var(logits[1]);
    let b = DiffBoundary {
        center: tape.sigmoid(zc),
        width: tape.sigmoid(zw),
    };
    let c = pcl_contrast(&mut tape, &b, scores, tau, tl, k)?;
    let floor = tape.constant(delta);
    let l = tape.add(c.before.unwrap_or(floor), c.after.unwrap_or(floor));
    let g = tape.backward(l);
    Ok((tape.value(l), [g.wrt(zc), g.wrt(zw)]))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Multi-restart Adam descent on the soft-window contrast, with the mask
/// sharpness annealed linearly. Restarts start in separate strata of the
/// timeline; the one whose end point ranks best under the hard loss wins,
/// using the same ordering as [`oracle_boundary`].
pub fn descend_pcl(scores: &FrameScoreSequence, cfg: &DescentConfig, sequence_id: u64) -> Result<TemporalBoundary> {
    let tl = timeline(scores.scores.len());
    let mut best: Option<(HardKey, TemporalBoundary)> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = rng::stream(cfg.seed, Stream::Init, &[sequence_id, r as u64]);
        // One jittered center per stratum so some restart always starts
        // near the signal.
        let n = cfg.restarts.max(1) as f64;
        let (lo, hi) = (0.1 + 0.8 * r as f64 / n, 0.1 + 0.8 * (r + 1) as f64 / n);
        let mut z = [logit(rng.random_range(lo..hi)), logit(rng.random_range(0.15..0.4))];
        let mut opt = Adam::new(2);
        for step in 0..cfg.steps {
            let progress = step as f64 / (cfg.steps.max(2) - 1) as f64;
            let k = anneal(cfg.k_start, cfg.k_end, progress);
            let (_, g) = soft_objective(scores, &tl, z, cfg.tau, cfg.delta_pcl, k)?;
            opt.step(&mut z, &g, cfg.lr);
        }
        let b = TemporalBoundary {
            center: sigmoid(z[0]),
            width: sigmoid(z[1]),
        };
        let value = hard_key(b, &scores.scores, cfg.tau, cfg.delta_pcl, &tl);
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            best = Some((value, b));
        }
    }
    Ok(best.expect("at least one restart").1)
}
