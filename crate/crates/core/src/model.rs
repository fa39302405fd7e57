//! Boundary predictor head and differentiable frame masks.
//!
//! The predictor maps a fixed-length encoding of a (video, query) pair to a
//! `(center, width)` boundary through a two-layer perceptron with a sigmoid
//! output. The encoding is parameter free. It joins the mean frame feature
//! and the query embedding with five statistics of the query-to-frame cosine
//! profile, which locate and size the matching region on the timeline.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{self, sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::types::{GroundingInstance, TemporalBoundary};

/// Number of cross-modal profile statistics appended to the encoding.
pub const PROFILE_FEATURES: usize = 5;

/// Sharpness of the attention over the normalized cosine profile.
const PROFILE_SHARPNESS: f64 = 8.0;

/// Half-width (in frames) of the box filter applied to the cosine profile.
const PROFILE_SMOOTHING: usize = 2;

pub fn input_dim(feature_dim: usize) -> usize {
    2 * feature_dim + PROFILE_FEATURES
}

/// Statistics of the cosine profile between `query` and every frame, after a
/// small box filter and min-max normalization: the attention-weighted center
/// and spread of the matching region, the fraction of frames above half
/// height (all rescaled to roughly unit range), the peak cosine and the
/// peak-to-mean contrast.
pub fn profile_features(frames: &[Vec<f64>], query: &[f64], timeline: &[f64]) -> [f64; PROFILE_FEATURES] {
    let q_norm = diff::norm(query);
    let cos: Vec<f64> = frames
        .iter()
        .map(|f| {
            let n = diff::norm(f);
            if n == 0.0 || q_norm == 0.0 {
                0.0
            } else {
                diff::dot(f, query) / (n * q_norm)
            }
        })
        .collect();
    let t = cos.len();
    let smooth: Vec<f64> = (0..t)
        .map(|i| {
            let lo = i.saturating_sub(PROFILE_SMOOTHING);
            let hi = (i + PROFILE_SMOOTHING + 1).min(t);
            cos[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_cos = cos.iter().sum::<f64>() / t as f64;
    let peak = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm: Vec<f64> = if hi > lo {
        smooth.iter().map(|c| (c - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; t]
    };
    let weights: Vec<f64> = norm.iter().map(|p| (PROFILE_SHARPNESS * (p - 1.0)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mu = weights.iter().zip(timeline).map(|(a, t)| a * t).sum::<f64>() / total;
    let var = weights
        .iter()
        .zip(timeline)
        .map(|(a, t)| a * (t - mu) * (t - mu))
        .sum::<f64>()
        / total;
    let above = norm.iter().filter(|&&p| p > 0.5).count() as f64 / t as f64;
    [
        4.0 * (mu - 0.5),
        4.0 * var.sqrt(),
        4.0 * (above - 0.25),
        peak,
        peak - mean_cos,
    ]
}

/// Encoder input for one (video, query) pair.
pub fn encode(instance: &GroundingInstance, query: &[f64]) -> Result<Vec<f64>> {
    if query.len() != instance.feature_dim() {
        return Err(Error::Config(format!(
            "query embedding has dim {}, video features have dim {}",
            query.len(),
            instance.feature_dim()
        )));
    }
    if instance.frames.is_empty() {
        return Err(Error::Data(format!("{}: no frames", instance.video_id)));
    }
    let mut x = instance.mean_frame();
    x.extend_from_slice(query);
    x.extend_from_slice(&profile_features(
        &instance.frames,
        query,
        &instance.timeline(),
    ));
    Ok(x)
}

/// Weights of the two-layer predictor head plus the mask sharpness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    /// `hidden x input`.
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    /// `2 x hidden`.
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    /// Soft-window sharpness.
    pub k: f64,
}

impl PredictorParams {
    pub fn zeros(input: usize, hidden: usize, k: f64) -> Self {
        Self {
            w1: vec![vec![0.0; input]; hidden],
            b1: vec![0.0; hidden],
            w2: vec![vec![0.0; hidden]; 2],
            b2: vec![0.0; 2],
            k,
        }
    }

    /// Scaled-normal initialization from the `Init` stream of `seed`.
    /// `branch` separates the two predictors.
    pub fn init(input: usize, hidden: usize, k: f64, seed: u64, branch: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::Init, &[branch]);
        let mut p = Self::zeros(input, hidden, k);
        let n1 = Normal::new(0.0, (1.0 / input as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        for row in &mut p.w1 {
            row.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
        }
        for row in &mut p.w2 {
            row.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
        }
        p.b1.iter_mut().for_each(|b| *b = 0.1 * rng.random_range(-1.0..1.0));
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.first().map_or(0, Vec::len)
    }

    pub fn hidden_dim(&self) -> usize {
        self.b1.len()
    }

    pub fn num_weights(&self) -> usize {
        let h = self.hidden_dim();
        h * self.input_dim() + h + 2 * h + 2
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim();
        let d = self.input_dim();
        let shapes_ok = h >= 2
            && self.w1.len() == h
            && self.w1.iter().all(|r| r.len() == d)
            && self.w2.len() == 2
            && self.w2.iter().all(|r| r.len() == h)
            && self.b2.len() == 2;
        if !shapes_ok {
            return Err(Error::Config("malformed predictor parameters".into()));
        }
        if !(self.k > 0.0) {
            return Err(Error::Config(format!("sharpness k = {} must be > 0", self.k)));
        }
        if !self.flatten().iter().all(|w| w.is_finite()) {
            return Err(Error::Config("non-finite predictor weight".into()));
        }
        Ok(())
    }

    /// Weights in the order `w1` (row-major), `b1`, `w2` (row-major), `b2`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_weights());
        self.w1.iter().for_each(|r| v.extend_from_slice(r));
        v.extend_from_slice(&self.b1);
        self.w2.iter().for_each(|r| v.extend_from_slice(r));
        v.extend_from_slice(&self.b2);
        v
    }

    /// Inverse of [`flatten`](Self::flatten), keeping this shape and `k`.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.num_weights());
        let (h, d) = (self.hidden_dim(), self.input_dim());
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let w1 = (0..h).map(|_| take(d)).collect();
        let b1 = take(h);
        let w2 = (0..2).map(|_| take(h)).collect();
        let b2 = take(2);
        Self {
            w1,
            b1,
            w2,
            b2,
            k: self.k,
        }
    }

    /// Places the weights on `tape` in flattened order.
    pub fn to_tape(&self, tape: &mut Tape) -> ParamVars {
        let vars = tape.vars(&self.flatten());
        ParamVars {
            vars,
            input: self.input_dim(),
            hidden: self.hidden_dim(),
        }
    }
}

/// Predictor weights living on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
    input: usize,
    hidden: usize,
}

impl ParamVars {
    /// Wraps existing nodes laid out as [`PredictorParams::flatten`].
    pub fn from_vars(vars: Vec<Var>, input: usize, hidden: usize) -> Self {
        assert_eq!(vars.len(), hidden * input + 3 * hidden + 2);
        Self { vars, input, hidden }
    }

    fn w1_row(&self, j: usize) -> &[Var] {
        &self.vars[j * self.input..(j + 1) * self.input]
    }

    fn b1(&self, j: usize) -> Var {
        self.vars[self.hidden * self.input + j]
    }

    fn w2_row(&self, m: usize) -> &[Var] {
        let off = self.hidden * self.input + self.hidden + m * self.hidden;
        &self.vars[off..off + self.hidden]
    }

    fn b2(&self, m: usize) -> Var {
        self.vars[self.hidden * self.input + 3 * self.hidden + m]
    }
}

/// A boundary whose center and width are tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct DiffBoundary {
    pub center: Var,
    pub width: Var,
}

impl DiffBoundary {
    pub fn value(&self, tape: &Tape) -> TemporalBoundary {
        TemporalBoundary {
            center: tape.value(self.center),
            width: tape.value(self.width),
        }
    }

    /// Unclamped `(c - w/2, c + w/2)`.
    pub fn edges(&self, tape: &mut Tape) -> (Var, Var) {
        let c = tape.value(self.center);
        let w = tape.value(self.width);
        let sta = tape.record(c - w / 2.0, [(self.center, 1.0), (self.width, -0.5)]);
        let end = tape.record(c + w / 2.0, [(self.center, 1.0), (self.width, 0.5)]);
        (sta, end)
    }
}

/// Head output logits for an already encoded input.
pub fn head_logits(tape: &mut Tape, x: &[f64], params: &ParamVars) -> Result<[Var; 2]> {
    if x.len() != params.input {
        return Err(Error::Config(format!(
            "encoded input has dim {}, predictor expects {}",
            x.len(),
            params.input
        )));
    }
    let mut hidden = Vec::with_capacity(params.hidden);
    for j in 0..params.hidden {
        let pre = tape.weighted_sum(params.w1_row(j), x)?;
        let pre = tape.add(pre, params.b1(j));
        hidden.push(tape.tanh(pre));
    }
    let mut out = [hidden[0]; 2];
    for (m, o) in out.iter_mut().enumerate() {
        let z = tape.dot(params.w2_row(m), &hidden)?;
        *o = tape.add(z, params.b2(m));
    }
    Ok(out)
}

/// Differentiable boundary prediction for `instance` under `query`.
pub fn predict_boundary(
    tape: &mut Tape,
    instance: &GroundingInstance,
    query: &[f64],
    params: &ParamVars,
) -> Result<DiffBoundary> {
    let x = encode(instance, query)?;
    predict_encoded(tape, &x, params)
}

pub fn predict_encoded(tape: &mut Tape, x: &[f64], params: &ParamVars) -> Result<DiffBoundary> {
    let [zc, zw] = head_logits(tape, x, params)?;
    Ok(DiffBoundary {
        center: tape.sigmoid(zc),
        width: tape.sigmoid(zw),
    })
}

/// Tape-free forward pass with the same arithmetic as [`predict_boundary`].
pub fn predict_value(
    instance: &GroundingInstance,
    query: &[f64],
    params: &PredictorParams,
) -> Result<TemporalBoundary> {
    let x = encode(instance, query)?;
    if x.len() != params.input_dim() {
        return Err(Error::Config(format!(
            "encoded input has dim {}, predictor expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let hidden: Vec<f64> = params
        .w1
        .iter()
        .zip(&params.b1)
        .map(|(row, b)| (row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>() + b).tanh())
        .collect();
    let out: Vec<f64> = params
        .w2
        .iter()
        .zip(&params.b2)
        .map(|(row, b)| row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b)
        .collect();
    Ok(TemporalBoundary {
        center: sigmoid(out[0]),
        width: sigmoid(out[1]),
    })
}

/// Soft membership of one frame at time `t` in `[sta, end]`.
fn soft_rect(tape: &mut Tape, sta: Var, end: Var, t: f64, k: f64) -> Var {
    let s1 = sigmoid(k * (t - tape.value(sta)));
    let s2 = sigmoid(k * (tape.value(end) - t));
    tape.record(
        s1 * s2,
        [
            (sta, -k * s1 * (1.0 - s1) * s2),
            (end, k * s2 * (1.0 - s2) * s1),
        ],
    )
}

/// `m_i = σ(k(t_i − sta)) · σ(k(end − t_i))` for the window `[sta, end]`.
pub fn soft_window(tape: &mut Tape, sta: Var, end: Var, timeline: &[f64], k: f64) -> Vec<Var> {
    timeline
        .iter()
        .map(|&t| soft_rect(tape, sta, end, t, k))
        .collect()
}

/// Soft mask over the (unclamped) boundary interval.
pub fn soft_window_mask(tape: &mut Tape, b: &DiffBoundary, timeline: &[f64], k: f64) -> Vec<Var> {
    let (sta, end) = b.edges(tape);
    soft_window(tape, sta, end, timeline, k)
}

/// Soft masks over the flanking windows `[sta − τw, sta]` and `[end, end + τw]`.
pub fn shifted_outside_masks(
    tape: &mut Tape,
    b: &DiffBoundary,
    tau: f64,
    timeline: &[f64],
    k: f64,
) -> (Vec<Var>, Vec<Var>) {
    let (sta, end) = b.edges(tape);
    let (before, after) = outside_edges(tape, b, sta, end, tau);
    (
        soft_window(tape, before, sta, timeline, k),
        soft_window(tape, end, after, timeline, k),
    )
}

/// `sta − τw` and `end + τw`.
pub(crate) fn outside_edges(tape: &mut Tape, b: &DiffBoundary, sta: Var, end: Var, tau: f64) -> (Var, Var) {
    let (s, e, w) = (tape.value(sta), tape.value(end), tape.value(b.width));
    let before = tape.record(s - tau * w, [(sta, 1.0), (b.width, -tau)]);
    let after = tape.record(e + tau * w, [(end, 1.0), (b.width, tau)]);
    (before, after)
}

/// Hard membership `sta ≤ t_i ≤ end`.
pub fn hard_window(sta: f64, end: f64, timeline: &[f64]) -> Vec<bool> {
    timeline.iter().map(|&t| sta <= t && t <= end).collect()
}

/// Mask-weighted mean of the frame features, `Σ m_i v_i / Σ m_i`.
pub fn pool_boundary_feature(
    tape: &mut Tape,
    instance: &GroundingInstance,
    mask: &[Var],
) -> Result<Vec<Var>> {
    if mask.len() != instance.num_frames() {
        return Err(Error::Config(format!(
            "mask has {} entries for {} frames",
            mask.len(),
            instance.num_frames()
        )));
    }
    let total = tape.sum(mask);
    let mut column = vec![0.0; mask.len()];
    (0..instance.feature_dim())
        .map(|d| {
            for (c, f) in column.iter_mut().zip(&instance.frames) {
                *c = f[d];
            }
            let num = tape.weighted_sum(mask, &column)?;
            Ok(tape.div(num, total)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use crate::types::timeline;
    use approx::assert_abs_diff_eq;

    fn instance(t: usize, c: usize, seed: u64) -> GroundingInstance {
        let mut rng = rng::stream(seed, Stream::Data, &[]);
        let frames = (0..t)
            .map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let q = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        GroundingInstance {
            video_id: "v".into(),
            frames,
            query_tokens: vec![],
            query_embedding: q,
            gt: None,
        }
    }

    #[test]
    fn zero_params_predict_center() {
        let inst = instance(8, 4, 1);
        let p = PredictorParams::zeros(input_dim(4), 3, 50.0);
        let b = predict_value(&inst, &inst.query_embedding, &p).unwrap();
        assert_eq!((b.center, b.width), (0.5, 0.5));
        let mut tape = Tape::new();
        let pv = p.to_tape(&mut tape);
        let db = predict_boundary(&mut tape, &inst, &inst.query_embedding, &pv).unwrap();
        assert_eq!(db.value(&tape), b);
    }

    #[test]
    fn saturated_logits() {
        let inst = instance(8, 4, 2);
        let mut p = PredictorParams::zeros(input_dim(4), 3, 50.0);
        p.b2 = vec![20.0, -20.0];
        let b = predict_value(&inst, &inst.query_embedding, &p).unwrap();
        assert_abs_diff_eq!(b.center, 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(b.width, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let inst = instance(8, 4, 3);
        let p = PredictorParams::zeros(input_dim(4), 3, 50.0);
        let err = predict_value(&inst, &[1.0, 2.0], &p).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn random_prediction_in_range_and_grad_checks() {
        for seed in 0..5 {
            let inst = instance(16, 4, seed);
            let p = PredictorParams::init(input_dim(4), 6, 50.0, seed, 0);
            let b = predict_value(&inst, &inst.query_embedding, &p).unwrap();
            assert!(b.center > 0.0 && b.center < 1.0 && b.width > 0.0 && b.width < 1.0);
            let (d, h) = (p.input_dim(), p.hidden_dim());
            let r = grad_check(
                |t, v| {
                    let pv = ParamVars::from_vars(v.to_vec(), d, h);
                    let db = predict_boundary(t, &inst, &inst.query_embedding, &pv).map_err(to_diff)?;
                    let s = t.add(db.center, db.width);
                    Ok(t.square(s))
                },
                &p.flatten(),
                1e-5,
                1e-4,
            );
            assert!(r.passed(), "seed {seed}: {}", r.max_rel_error);
        }
    }

    fn to_diff(e: Error) -> diff::DiffError {
        match e {
            Error::Diff(d) => d,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn flatten_round_trip() {
        let p = PredictorParams::init(10, 4, 50.0, 9, 1);
        assert_eq!(p.with_flat(&p.flatten()), p);
        assert_eq!(p.flatten().len(), p.num_weights());
        p.validate().unwrap();
    }

    fn mask_values(c: f64, w: f64, tl: &[f64], k: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let b = DiffBoundary {
            center: tape.var(c),
            width: tape.var(w),
        };
        let m = soft_window_mask(&mut tape, &b, tl, k);
        tape.values(&m)
    }

    #[test]
    fn full_cover_saturates() {
        let tl = timeline(32);
        assert!(mask_values(0.5, 1.2, &tl, 500.0).iter().all(|&m| m > 0.999));
    }

    #[test]
    fn frame_at_start_is_half() {
        // T = 4: t_1 = 0.375; sta = 0.375 with end far away.
        let tl = timeline(4);
        let m = mask_values(0.375 + 0.45, 0.9, &tl, 500.0);
        assert_abs_diff_eq!(m[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn soft_mask_matches_hard_indicator_away_from_edges() {
        let tl = timeline(64);
        let m = mask_values(0.5, 0.4, &tl, 500.0);
        let hard = hard_window(0.3, 0.7, &tl);
        for ((mi, hi), t) in m.iter().zip(&hard).zip(&tl) {
            if (t - 0.3).abs() >= 0.02 && (t - 0.7).abs() >= 0.02 {
                let h = if *hi { 1.0 } else { 0.0 };
                assert!((mi - h).abs() < 1e-3, "t = {t}: {mi} vs {h}");
            }
        }
    }

    #[test]
    fn outside_windows() {
        let mut tape = Tape::new();
        let b = DiffBoundary {
            center: tape.var(0.5),
            width: tape.var(0.4),
        };
        let (sta, end) = b.edges(&mut tape);
        let (lo, hi) = outside_edges(&mut tape, &b, sta, end, 0.25);
        assert_abs_diff_eq!(tape.value(lo), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(sta), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(end), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(hi), 0.8, epsilon = 1e-12);

        let mut tape = Tape::new();
        let b = DiffBoundary {
            center: tape.var(0.5),
            width: tape.var(0.2),
        };
        let (sta, end) = b.edges(&mut tape);
        let (lo, hi) = outside_edges(&mut tape, &b, sta, end, 1.0);
        assert_abs_diff_eq!(tape.value(lo), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(sta), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(end), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(hi), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn off_timeline_flank_vanishes() {
        let tl = timeline(64);
        let mut tape = Tape::new();
        let b = DiffBoundary {
            center: tape.var(0.1),
            width: tape.var(0.4),
        };
        let (out1, _) = shifted_outside_masks(&mut tape, &b, 0.25, &tl, 500.0);
        assert!(tape.values(&out1).iter().all(|&m| m < 1e-8));
    }

    #[test]
    fn pooling_uniform_and_one_hot() {
        let inst = instance(10, 3, 4);
        let mut tape = Tape::new();
        let ones = tape.vars(&[1.0; 10]);
        let v = pool_boundary_feature(&mut tape, &inst, &ones).unwrap();
        let mean = inst.mean_frame();
        for (a, b) in tape.values(&v).iter().zip(&mean) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        // Only frame 3 (t = 0.35) inside [0.31, 0.39].
        let tl = inst.timeline();
        let mut tape = Tape::new();
        let b = DiffBoundary {
            center: tape.var(0.35),
            width: tape.var(0.08),
        };
        let m = soft_window_mask(&mut tape, &b, &tl, 5000.0);
        let v = pool_boundary_feature(&mut tape, &inst, &m).unwrap();
        for (a, b) in tape.values(&v).iter().zip(&inst.frames[3]) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn pooled_feature_grad_check() {
        let inst = instance(20, 3, 5);
        let tl = inst.timeline();
        for d in 0..3 {
            let r = grad_check(
                |t, p| {
                    let b = DiffBoundary {
                        center: p[0],
                        width: p[1],
                    };
                    let m = soft_window_mask(t, &b, &tl, 50.0);
                    let v = pool_boundary_feature(t, &inst, &m).map_err(to_diff)?;
                    Ok(v[d])
                },
                &[0.45, 0.3],
                1e-5,
                1e-4,
            );
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn mask_monotone_in_width() {
        let tl = timeline(40);
        for ci in 1..10 {
            let c = ci as f64 / 10.0;
            let mut prev = mask_values(c, 0.05, &tl, 50.0);
            for wi in 2..20 {
                let cur = mask_values(c, wi as f64 * 0.05, &tl, 50.0);
                for (a, b) in prev.iter().zip(&cur) {
                    assert!(b >= a, "c={c}");
                }
                prev = cur;
            }
        }
    }
}
