//! Shared data model: boundaries, instances, score sequences and the
//! description dictionary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of sampled frames per video.
pub const MAX_FRAMES: usize = 200;
/// Maximum number of query tokens.
pub const MAX_QUERY_TOKENS: usize = 20;

/// A boundary on the normalized timeline, parameterized by center and width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalBoundary {
    pub center: f64,
    pub width: f64,
}

impl TemporalBoundary {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(center) || !open(width) {
            return Err(Error::Data(format!(
                "boundary (c={center}, w={width}) outside (0,1)^2"
            )));
        }
        Ok(Self { center, width })
    }

    /// Unclamped start `c - w/2`.
    pub fn raw_start(&self) -> f64 {
        self.center - self.width / 2.0
    }

    /// Unclamped end `c + w/2`.
    pub fn raw_end(&self) -> f64 {
        self.center + self.width / 2.0
    }

    /// The boundary as an interval clipped to `[0, 1]`.
    pub fn clamp_interval(&self) -> Interval {
        Interval {
            start: self.raw_start().max(0.0),
            end: self.raw_end().min(1.0),
        }
    }
}

/// `(start, end)` interval; serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0.0
    }

    pub fn intersection_len(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }
}

impl From<[f64; 2]> for Interval {
    fn from(a: [f64; 2]) -> Self {
        Interval::new(a[0], a[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.start, i.end]
    }
}

/// Frame-center timeline `t_i = (i + 0.5) / T`.
pub fn timeline(t: usize) -> Vec<f64> {
    (0..t).map(|i| (i as f64 + 0.5) / t as f64).collect()
}

/// One video-query pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingInstance {
    pub video_id: String,
    pub frames: Vec<Vec<f64>>,
    pub query_tokens: Vec<String>,
    pub query_embedding: Vec<f64>,
    /// Ground truth, used for evaluation only.
    pub gt: Option<Interval>,
}

impl GroundingInstance {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.query_embedding.len()
    }

    pub fn timeline(&self) -> Vec<f64> {
        timeline(self.frames.len())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 || t > MAX_FRAMES {
            return Err(Error::Data(format!(
                "{}: {t} frames, expected 1..={MAX_FRAMES}",
                self.video_id
            )));
        }
        if self.query_tokens.len() > MAX_QUERY_TOKENS {
            return Err(Error::Data(format!(
                "{}: query has {} tokens, max {MAX_QUERY_TOKENS}",
                self.video_id,
                self.query_tokens.len()
            )));
        }
        let c = self.query_embedding.len();
        if let Some(bad) = self.frames.iter().position(|f| f.len() != c) {
            return Err(Error::Data(format!(
                "{}: frame {bad} has dim {}, query embedding has {c}",
                self.video_id,
                self.frames[bad].len()
            )));
        }
        let finite = self
            .frames
            .iter()
            .flatten()
            .chain(&self.query_embedding)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Data(format!("{}: non-finite feature", self.video_id)));
        }
        if let Some(gt) = self.gt {
            if !(0.0..=1.0).contains(&gt.start) || !(0.0..=1.0).contains(&gt.end) || gt.start > gt.end
            {
                return Err(Error::Data(format!(
                    "{}: gt [{}, {}] is not a normalized interval",
                    self.video_id, gt.start, gt.end
                )));
            }
        }
        Ok(())
    }

    /// Mean of the frame features.
    pub fn mean_frame(&self) -> Vec<f64> {
        let c = self.feature_dim();
        let mut m = vec![0.0; c];
        for f in &self.frames {
            for (acc, x) in m.iter_mut().zip(f) {
                *acc += x;
            }
        }
        let n = self.frames.len() as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreKind {
    /// Query-description match.
    #[serde(rename = "QDM")]
    Qdm,
    /// Query-frame match.
    #[serde(rename = "QFM")]
    Qfm,
}

/// Per-frame match scores after min-max normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreSequence {
    pub scores: Vec<f64>,
    pub kind: ScoreKind,
}

/// Positive/negative video-query matching scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScorePair {
    pub m_pos: f64,
    pub m_neg: f64,
}

/// One generated description with the prompt that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub prompt_id: usize,
    pub text: String,
}

/// One row of the dictionary JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictRow {
    pub video_id: String,
    pub frame_index: usize,
    pub prompt_id: usize,
    pub text: String,
}

/// Precomputed frame descriptions keyed by `(video_id, frame_index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptionDict {
    n_p: usize,
    entries: BTreeMap<(String, usize), Vec<Description>>,
    frames: BTreeMap<String, usize>,
}

impl DescriptionDict {
    pub fn new(n_p: usize) -> Self {
        Self {
            n_p,
            ..Default::default()
        }
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    /// Registers all `descriptions` for one frame. Must hold exactly `n_p`.
    pub fn insert(
        &mut self,
        video_id: &str,
        frame_index: usize,
        mut descriptions: Vec<Description>,
    ) -> Result<()> {
        if descriptions.len() != self.n_p {
            return Err(Error::Data(format!(
                "{video_id}/{frame_index}: {} descriptions, expected {}",
                descriptions.len(),
                self.n_p
            )));
        }
        descriptions.sort_by_key(|d| d.prompt_id);
        let count = self.frames.entry(video_id.to_string()).or_insert(0);
        *count = (*count).max(frame_index + 1);
        self.entries
            .insert((video_id.to_string(), frame_index), descriptions);
        Ok(())
    }

    pub fn lookup(&self, video_id: &str, frame_index: usize) -> Option<&[Description]> {
        self.entries
            .get(&(video_id.to_string(), frame_index))
            .map(Vec::as_slice)
    }

    /// Frames in `0..t` of `video_id` that have no entry.
    pub fn missing_frames(&self, video_id: &str, t: usize) -> Vec<usize> {
        (0..t)
            .filter(|&i| self.lookup(video_id, i).is_none())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rows in `(video_id, frame_index, prompt_id)` order.
    pub fn rows(&self) -> impl Iterator<Item = DictRow> + '_ {
        self.entries.iter().flat_map(|((v, f), ds)| {
            ds.iter().map(move |d| DictRow {
                video_id: v.clone(),
                frame_index: *f,
                prompt_id: d.prompt_id,
                text: d.text.clone(),
            })
        })
    }

    /// Rebuilds a dictionary from rows; every frame must end up with `n_p`
    /// descriptions.
    pub fn from_rows(rows: impl IntoIterator<Item = DictRow>) -> Result<Self> {
        let mut grouped: BTreeMap<(String, usize), Vec<Description>> = BTreeMap::new();
        for r in rows {
            grouped
                .entry((r.video_id, r.frame_index))
                .or_default()
                .push(Description {
                    prompt_id: r.prompt_id,
                    text: r.text,
                });
        }
        let n_p = grouped.values().map(Vec::len).next().unwrap_or(0);
        let mut dict = DescriptionDict::new(n_p);
        for ((v, f), ds) in grouped {
            dict.insert(&v, f, ds)?;
        }
        Ok(dict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn iv(c: f64, w: f64) -> Interval {
        TemporalBoundary::new(c, w).unwrap().clamp_interval()
    }

    #[test]
    fn clamp_examples() {
        let a = iv(0.5, 0.4);
        assert_abs_diff_eq!(a.start, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(a.end, 0.7, epsilon = 1e-15);
        let b = iv(0.1, 0.4);
        assert_eq!(b.start, 0.0);
        assert_abs_diff_eq!(b.end, 0.3, epsilon = 1e-15);
        let c = iv(0.95, 0.3);
        assert_abs_diff_eq!(c.start, 0.8, epsilon = 1e-15);
        assert_eq!(c.end, 1.0);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(TemporalBoundary::new(0.0, 0.5).is_err());
        assert!(TemporalBoundary::new(0.5, 1.0).is_err());
    }

    #[test]
    fn timeline_centers() {
        assert_eq!(timeline(4), vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn instance_validation() {
        let mut inst = GroundingInstance {
            video_id: "v".into(),
            frames: vec![vec![0.0, 1.0]; 3],
            query_tokens: vec!["a".into()],
            query_embedding: vec![1.0, 0.0],
            gt: Some(Interval::new(0.2, 0.4)),
        };
        inst.validate().unwrap();
        inst.frames[1] = vec![0.0];
        assert!(inst.validate().is_err());
        inst.frames = vec![];
        assert!(inst.validate().is_err());
        inst.frames = vec![vec![0.0, 1.0]; 201];
        assert!(inst.validate().is_err());
    }

    #[test]
    fn gt_serializes_as_pair() {
        let inst = GroundingInstance {
            video_id: "v".into(),
            frames: vec![vec![0.5]],
            query_tokens: vec![],
            query_embedding: vec![1.0],
            gt: Some(Interval::new(0.25, 0.5)),
        };
        let s = serde_json::to_string(&inst).unwrap();
        assert!(s.contains(r#""gt":[0.25,0.5]"#), "{s}");
        let none = GroundingInstance { gt: None, ..inst };
        assert!(serde_json::to_string(&none).unwrap().contains(r#""gt":null"#));
    }

    #[test]
    fn dict_rows_sorted_and_rebuilt() {
        let mut d = DescriptionDict::new(2);
        let desc = |p: usize, t: &str| Description {
            prompt_id: p,
            text: t.into(),
        };
        d.insert("b", 0, vec![desc(1, "y"), desc(0, "x")]).unwrap();
        d.insert("a", 1, vec![desc(0, "p"), desc(1, "q")]).unwrap();
        let rows: Vec<_> = d.rows().collect();
        assert_eq!(rows[0].video_id, "a");
        assert_eq!(rows[2].text, "x");
        assert_eq!(DescriptionDict::from_rows(rows).unwrap(), d);
        assert!(d.insert("a", 2, vec![desc(0, "p")]).is_err());
        assert_eq!(d.missing_frames("a", 2), vec![0]);
    }
}
