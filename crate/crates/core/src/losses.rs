//! Training objectives: MIL grounding loss, mutual learning, proposal-level
//! contrastive loss and their weighted total.
//!
//! Both hinges are implemented as `max(x, floor)`: the loss never drops
//! below its floor and carries no gradient once `x` is at or under it.

use serde::{Deserialize, Serialize};

use crate::diff::{Result, Tape, Var};
use crate::model::{hard_window, outside_edges, soft_window, DiffBoundary};
use crate::types::{FrameScoreSequence, TemporalBoundary};

/// Windows whose total mask weight is below this are treated as empty.
pub const MIN_WINDOW_WEIGHT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the mutual learning term.
    pub alpha: f64,
    /// Weight of the two contrastive terms.
    pub beta: f64,
    /// Floor of the MIL hinge.
    pub delta_mil: f64,
    /// Flank width as a fraction of the boundary width.
    pub tau: f64,
    /// Floor of each contrastive hinge.
    pub delta_pcl: f64,
}

impl LossWeights {
    /// ActivityNet-Captions-style weights.
    pub fn anc() -> Self {
        Self {
            alpha: 0.25,
            beta: 0.05,
            delta_mil: DEFAULT_DELTA_MIL,
            tau: 0.25,
            delta_pcl: 0.15,
        }
    }

    /// Charades-STA-style weights.
    pub fn charades() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            ..Self::anc()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.delta_pcl >= 0.0) {
            return Err(format!("loss weights must be non-negative: {self:?}"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(format!("tau = {} outside (0, 1]", self.tau));
        }
        if !self.delta_mil.is_finite() {
            return Err("delta_mil must be finite".into());
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::anc()
    }
}

/// Default MIL floor.
pub const DEFAULT_DELTA_MIL: f64 = 0.2;

/// `max(Δ, M_neg − M_pos)`.
pub fn mil_loss(tape: &mut Tape, m_pos: Var, m_neg: Var, delta_mil: f64) -> Var {
    let gap = tape.sub(m_neg, m_pos);
    tape.max_const(gap, delta_mil)
}

fn mse(tape: &mut Tape, a: &DiffBoundary, b_center: Var, b_width: Var) -> Result<Var> {
    let dc = tape.sub(a.center, b_center);
    let dw = tape.sub(a.width, b_width);
    let sc = tape.square(dc);
    let sw = tape.square(dw);
    tape.mean(&[sc, sw])
}

/// `MSE(p_o, ψ(p_n)) + MSE(p_n, ψ(p_o))` over the `(c, w)` pair.
pub fn mutual_loss(tape: &mut Tape, p_o: &DiffBoundary, p_n: &DiffBoundary) -> Result<Var> {
    let n_c = tape.stop_gradient(p_n.center);
    let n_w = tape.stop_gradient(p_n.width);
    let o_c = tape.stop_gradient(p_o.center);
    let o_w = tape.stop_gradient(p_o.width);
    let first = mse(tape, p_o, n_c, n_w)?;
    let second = mse(tape, p_n, o_c, o_w)?;
    Ok(tape.add(first, second))
}

/// Pre-hinge contrasts `S̄_out1 − S̄_in` and `S̄_out2 − S̄_in`. `None` marks a
/// degenerate term (inside or flank window carrying no weight).
#[derive(Debug, Clone, Copy)]
pub struct PclContrast {
    pub before: Option<Var>,
    pub after: Option<Var>,
}

fn masked_mean(tape: &mut Tape, mask: &[Var], scores: &[f64]) -> Result<Option<Var>> {
    let total = tape.sum(mask);
    if tape.value(total) < MIN_WINDOW_WEIGHT {
        return Ok(None);
    }
    let num = tape.weighted_sum(mask, scores)?;
    Ok(Some(tape.div(num, total)?))
}

/// Soft-window contrasts between the flanks of `b` and its interior.
pub fn pcl_contrast(
    tape: &mut Tape,
    b: &DiffBoundary,
    scores: &FrameScoreSequence,
    tau: f64,
    timeline: &[f64],
    k: f64,
) -> Result<PclContrast> {
    let (sta, end) = b.edges(tape);
    let (before, after) = outside_edges(tape, b, sta, end, tau);
    let inside = soft_window(tape, sta, end, timeline, k);
    let out1 = soft_window(tape, before, sta, timeline, k);
    let out2 = soft_window(tape, end, after, timeline, k);
    let s = &scores.scores;
    let Some(s_in) = masked_mean(tape, &inside, s)? else {
        return Ok(PclContrast {
            before: None,
            after: None,
        });
    };
    let s_out1 = masked_mean(tape, &out1, s)?;
    let s_out2 = masked_mean(tape, &out2, s)?;
    Ok(PclContrast {
        before: s_out1.map(|o| tape.sub(o, s_in)),
        after: s_out2.map(|o| tape.sub(o, s_in)),
    })
}

fn hinge_or_floor(tape: &mut Tape, x: Option<Var>, delta: f64) -> Var {
    match x {
        Some(x) => tape.max_const(x, delta),
        None => tape.constant(delta),
    }
}

/// `max(S̄_out1 − S̄_in, δ) + max(S̄_out2 − S̄_in, δ)` with soft windows.
pub fn pcl_loss(
    tape: &mut Tape,
    b: &DiffBoundary,
    scores: &FrameScoreSequence,
    tau: f64,
    delta_pcl: f64,
    timeline: &[f64],
    k: f64,
) -> Result<Var> {
    let c = pcl_contrast(tape, b, scores, tau, timeline, k)?;
    let l1 = hinge_or_floor(tape, c.before, delta_pcl);
    let l2 = hinge_or_floor(tape, c.after, delta_pcl);
    Ok(tape.add(l1, l2))
}

/// Contrasts with hard windows `[sta−τw, sta]`, `[sta, end]`, `[end, end+τw]`
/// (inclusive, unclamped). `None` marks an empty window.
pub fn hard_pcl_contrast(
    b: TemporalBoundary,
    scores: &[f64],
    tau: f64,
    timeline: &[f64],
) -> (Option<f64>, Option<f64>) {
    let (sta, end) = (b.raw_start(), b.raw_end());
    let tw = tau * b.width;
    let mean = |mask: Vec<bool>| -> Option<f64> {
        let (mut n, mut s) = (0usize, 0.0);
        for (&m, &x) in mask.iter().zip(scores) {
            if m {
                n += 1;
                s += x;
            }
        }
        (n > 0).then(|| s / n as f64)
    };
    let Some(s_in) = mean(hard_window(sta, end, timeline)) else {
        return (None, None);
    };
    let o1 = mean(hard_window(sta - tw, sta, timeline));
    let o2 = mean(hard_window(end, end + tw, timeline));
    (o1.map(|o| o - s_in), o2.map(|o| o - s_in))
}

/// Reference contrastive loss with hard windows.
pub fn hard_pcl_loss(
    b: TemporalBoundary,
    scores: &[f64],
    tau: f64,
    delta_pcl: f64,
    timeline: &[f64],
) -> f64 {
    let (c1, c2) = hard_pcl_contrast(b, scores, tau, timeline);
    let hinge = |x: Option<f64>| x.map_or(delta_pcl, |x| x.max(delta_pcl));
    hinge(c1) + hinge(c2)
}

/// Individual loss terms of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_go: Var,
    pub l_gn: Var,
    pub l_m: Var,
    pub l_c: Var,
    pub l_cf: Var,
}

/// `L = l_go + l_gn + α·l_m + β·(l_c + l_cf)`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Var {
    let g = tape.add(terms.l_go, terms.l_gn);
    let m = tape.scale(terms.l_m, w.alpha);
    let c = tape.add(terms.l_c, terms.l_cf);
    let c = tape.scale(c, w.beta);
    let gm = tape.add(g, m);
    tape.add(gm, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use crate::types::{timeline, ScoreKind};
    use approx::assert_abs_diff_eq;

    fn mil_value(pos: f64, neg: f64, delta: f64) -> f64 {
        let mut t = Tape::new();
        let (p, n) = (t.var(pos), t.var(neg));
        let l = mil_loss(&mut t, p, n, delta);
        t.value(l)
    }

    #[test]
    fn mil_examples() {
        assert_abs_diff_eq!(mil_value(0.9, 0.1, 0.2), 0.2);
        assert_abs_diff_eq!(mil_value(0.4, 0.4, 0.2), 0.2);
        assert_abs_diff_eq!(mil_value(0.1, 0.9, 0.2), 0.8, epsilon = 1e-15);
    }

    fn boundary(t: &mut Tape, c: f64, w: f64) -> DiffBoundary {
        DiffBoundary {
            center: t.var(c),
            width: t.var(w),
        }
    }

    #[test]
    fn mutual_examples() {
        let mut t = Tape::new();
        let a = boundary(&mut t, 0.5, 0.4);
        let l = mutual_loss(&mut t, &a, &a).unwrap();
        assert_eq!(t.value(l), 0.0);

        let mut t = Tape::new();
        let o = boundary(&mut t, 0.5, 0.4);
        let n = boundary(&mut t, 0.6, 0.2);
        let l = mutual_loss(&mut t, &o, &n).unwrap();
        assert_abs_diff_eq!(t.value(l), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn mutual_gradient_only_through_first_term() {
        // d/dp_o of MSE(p_o, const p_n) = (p_o - p_n) componentwise.
        let mut t = Tape::new();
        let o = boundary(&mut t, 0.5, 0.4);
        let n = boundary(&mut t, 0.6, 0.2);
        let l = mutual_loss(&mut t, &o, &n).unwrap();
        let g = t.backward(l);
        assert_abs_diff_eq!(g.wrt(o.center), 0.5 - 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g.wrt(o.width), 0.4 - 0.2, epsilon = 1e-15);
        let r = grad_check(
            |t, p| {
                let o = DiffBoundary { center: p[0], width: p[1] };
                let nc = t.constant(0.6);
                let nw = t.constant(0.2);
                mse(t, &o, nc, nw)
            },
            &[0.5, 0.4],
            1e-5,
            1e-6,
        );
        assert_abs_diff_eq!(r.numeric[0], g.wrt(o.center), epsilon = 1e-8);
        assert_abs_diff_eq!(r.numeric[1], g.wrt(o.width), epsilon = 1e-8);
    }

    fn step_scores() -> FrameScoreSequence {
        FrameScoreSequence {
            scores: vec![0., 0., 0., 1., 1., 1., 1., 0., 0., 0.],
            kind: ScoreKind::Qdm,
        }
    }

    #[test]
    fn pcl_step_example_hard_and_soft() {
        let s = step_scores();
        let tl = timeline(10);
        let b = TemporalBoundary::new(0.5, 0.4).unwrap();
        assert_eq!(hard_pcl_contrast(b, &s.scores, 0.25, &tl), (Some(-1.0), Some(-1.0)));
        assert_abs_diff_eq!(hard_pcl_loss(b, &s.scores, 0.25, 0.15, &tl), 0.30, epsilon = 1e-15);

        let mut t = Tape::new();
        let db = boundary(&mut t, 0.5, 0.4);
        let l = pcl_loss(&mut t, &db, &s, 0.25, 0.15, &tl, 500.0).unwrap();
        assert!((t.value(l) - 0.30).abs() < 1e-3);
    }

    #[test]
    fn pcl_constant_scores_floor() {
        let s = FrameScoreSequence {
            scores: vec![0.0; 10],
            kind: ScoreKind::Qfm,
        };
        let tl = timeline(10);
        let mut t = Tape::new();
        let db = boundary(&mut t, 0.5, 0.4);
        let l = pcl_loss(&mut t, &db, &s, 0.25, 0.15, &tl, 50.0).unwrap();
        assert_abs_diff_eq!(t.value(l), 0.30, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_flank_gives_floor_and_no_gradient() {
        let s = step_scores();
        let tl = timeline(10);
        let mut t = Tape::new();
        // Left flank [-0.2, -0.1] is off the timeline.
        let db = boundary(&mut t, 0.1, 0.4);
        let c = pcl_contrast(&mut t, &db, &s, 0.25, &tl, 500.0).unwrap();
        assert!(c.before.is_none());
        assert!(c.after.is_some());
    }

    #[test]
    fn total_examples() {
        let mut t = Tape::new();
        let v = t.vars(&[0.2, 0.2, 0.05, 0.30, 0.30]);
        let terms = LossTerms {
            l_go: v[0],
            l_gn: v[1],
            l_m: v[2],
            l_c: v[3],
            l_cf: v[4],
        };
        let w = LossWeights { alpha: 0.25, beta: 0.05, ..LossWeights::anc() };
        let l = total_loss(&mut t, &terms, &w);
        assert_eq!(t.value(l), 0.4425);
        let zero = LossWeights { alpha: 0.0, beta: 0.0, ..w };
        let l = total_loss(&mut t, &terms, &zero);
        assert_eq!(t.value(l), 0.4);
    }

    #[test]
    fn presets() {
        let a = LossWeights::anc();
        assert_eq!((a.alpha, a.beta, a.tau, a.delta_pcl), (0.25, 0.05, 0.25, 0.15));
        let c = LossWeights::charades();
        assert_eq!((c.alpha, c.beta), (0.5, 0.1));
        assert!(LossWeights { tau: 0.0, ..a }.validate().is_err());
    }
}
