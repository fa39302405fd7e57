//! Property tests over the numeric building blocks.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use etc_core::diff::{grad_check, Tape};
use etc_core::eval::{interval_iou, rank1_at_iou};
use etc_core::expand::region_frames;
use etc_core::losses::{hard_pcl_contrast, mil_loss, mutual_loss, pcl_contrast, pcl_loss};
use etc_core::matchers::{minmax_normalize, qdm_scores, Aggregation, TokenEmbedder};
use etc_core::model::{soft_window_mask, DiffBoundary};
use etc_core::synth::{generate_dataset, SynthConfig};
use etc_core::{timeline, Description, DescriptionDict, FrameScoreSequence, Interval, ScoreKind, TemporalBoundary};

fn boundary(tape: &mut Tape, c: f64, w: f64) -> DiffBoundary {
    DiffBoundary {
        center: tape.var(c),
        width: tape.var(w),
    }
}

fn seq(scores: Vec<f64>) -> FrameScoreSequence {
    FrameScoreSequence {
        scores,
        kind: ScoreKind::Qdm,
    }
}

fn unit_scores(t: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, t)
}

fn interval() -> impl Strategy<Value = Interval> {
    (0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b)| Interval::new(a.min(b), a.max(b)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn clamp_is_identity_in_range(c in 0.0..1.0f64, w in 0.0..1.0f64) {
        prop_assume!(c - w / 2.0 >= 0.0 && c + w / 2.0 <= 1.0);
        let b = TemporalBoundary::new(c, w).unwrap();
        let iv = b.clamp_interval();
        prop_assert_eq!((iv.start, iv.end), (c - w / 2.0, c + w / 2.0));
    }

    #[test]
    fn boundary_json_round_trip(c in 0.0..1.0f64, w in 0.0..1.0f64) {
        let b = TemporalBoundary::new(c, w).unwrap();
        let text = serde_json::to_string(&b).unwrap();
        let back: TemporalBoundary = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(b.center.to_bits(), back.center.to_bits());
        prop_assert_eq!(b.width.to_bits(), back.width.to_bits());
    }

    #[test]
    fn hinge_subgradient(x in -2.0..2.0f64, k in -1.0..1.0f64) {
        let mut t = Tape::new();
        let v = t.var(x);
        let y = t.max_const(v, k);
        let g = t.backward(y).wrt(v);
        prop_assert_eq!(g, if x > k { 1.0 } else { 0.0 });
        let mut t = Tape::new();
        let v = t.var(k);
        let y = t.max_const(v, k);
        prop_assert_eq!(t.backward(y).wrt(v), 0.0);
    }

    #[test]
    fn pcl_never_below_two_delta(
        s in unit_scores(2..80),
        c in 0.01..0.99f64,
        w in 0.01..0.99f64,
        tau in 0.05..1.0f64,
        delta in 0.0..0.5f64,
        k in 10.0..1000.0f64,
    ) {
        let tl = timeline(s.len());
        let mut t = Tape::new();
        let b = boundary(&mut t, c, w);
        let l = pcl_loss(&mut t, &b, &seq(s), tau, delta, &tl, k).unwrap();
        prop_assert!(t.value(l) >= 2.0 * delta);
    }

    #[test]
    fn mil_never_below_delta(pos in -1.0..1.0f64, neg in -1.0..1.0f64, delta in 0.0..1.0f64) {
        let mut t = Tape::new();
        let (p, n) = (t.var(pos), t.var(neg));
        let l = mil_loss(&mut t, p, n, delta);
        prop_assert!(t.value(l) >= delta);
    }

    #[test]
    fn mutual_is_symmetric_and_zero_only_on_equality(
        a in (0.0..1.0f64, 0.0..1.0f64),
        b in (0.0..1.0f64, 0.0..1.0f64),
    ) {
        let mut t = Tape::new();
        let (o, n) = (boundary(&mut t, a.0, a.1), boundary(&mut t, b.0, b.1));
        let ab = mutual_loss(&mut t, &o, &n).unwrap();
        let ba = mutual_loss(&mut t, &n, &o).unwrap();
        prop_assert_eq!(t.value(ab), t.value(ba));
        prop_assert!(t.value(ab) >= 0.0);
        prop_assert_eq!(t.value(ab) == 0.0, a == b);
    }

    #[test]
    fn pre_hinge_contrast_scales_with_scores(
        s in unit_scores(8..64),
        a in 0.1..10.0f64,
        c in 0.2..0.8f64,
        w in 0.1..0.5f64,
    ) {
        let tl = timeline(s.len());
        let b = TemporalBoundary::new(c, w).unwrap();
        let scaled: Vec<f64> = s.iter().map(|x| a * x).collect();
        let (u1, u2) = hard_pcl_contrast(b, &s, 0.25, &tl);
        let (v1, v2) = hard_pcl_contrast(b, &scaled, 0.25, &tl);
        for (u, v) in [(u1, v1), (u2, v2)] {
            prop_assert_eq!(u.is_some(), v.is_some());
            if let (Some(u), Some(v)) = (u, v) {
                prop_assert!((v - a * u).abs() <= 1e-12 * (1.0 + a), "{} vs {}", v, a * u);
            }
        }

        let soft = |scores: &[f64]| {
            let mut t = Tape::new();
            let db = boundary(&mut t, c, w);
            let pc = pcl_contrast(&mut t, &db, &seq(scores.to_vec()), 0.25, &tl, 50.0).unwrap();
            (pc.before.map(|v| t.value(v)), pc.after.map(|v| t.value(v)))
        };
        let (u1, u2) = soft(&s);
        let (v1, v2) = soft(&scaled);
        for (u, v) in [(u1, v1), (u2, v2)] {
            if let (Some(u), Some(v)) = (u, v) {
                prop_assert!((v - a * u).abs() <= 1e-12 * (1.0 + a));
            }
        }
    }

    #[test]
    fn mask_grows_with_width(c in 0.0..1.0f64, w in 0.01..0.9f64, dw in 0.0..0.5f64, t in 2usize..100) {
        let tl = timeline(t);
        let mut tape = Tape::new();
        let narrow = boundary(&mut tape, c, w);
        let wide = boundary(&mut tape, c, w + dw);
        let m1 = soft_window_mask(&mut tape, &narrow, &tl, 50.0);
        let m2 = soft_window_mask(&mut tape, &wide, &tl, 50.0);
        for (a, b) in m1.iter().zip(&m2) {
            prop_assert!(tape.value(*b) >= tape.value(*a));
        }
    }

    #[test]
    fn mask_values_finite(c in 0.0..1.0f64, w in 0.0..1.0f64, k in 1.0..5000.0f64) {
        let tl = timeline(64);
        let mut tape = Tape::new();
        let b = boundary(&mut tape, c, w);
        let m = soft_window_mask(&mut tape, &b, &tl, k);
        for v in m {
            let x = tape.value(v);
            prop_assert!(x.is_finite() && (0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn minmax_range_and_extremes(raw in prop::collection::vec(-100.0..100.0f64, 1..50)) {
        let n = minmax_normalize(&raw);
        prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            prop_assert!(n.contains(&0.0));
            prop_assert!(n.contains(&1.0));
        } else {
            prop_assert!(n.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn minmax_affine_invariance(
        raw in prop::collection::vec(-10.0..10.0f64, 2..50),
        a in 0.01..100.0f64,
        b in -100.0..100.0f64,
    ) {
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi - lo > 1e-3);
        let moved: Vec<f64> = raw.iter().map(|x| a * x + b).collect();
        for (x, y) in minmax_normalize(&raw).iter().zip(minmax_normalize(&moved)) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn iou_symmetric_and_bounded(a in interval(), b in interval()) {
        prop_assert_eq!(interval_iou(a, b), interval_iou(b, a));
        if a.len() > 0.0 && b.len() > 0.0 {
            let bound = a.len().min(b.len()) / a.len().max(b.len());
            prop_assert!(interval_iou(a, b) <= bound + 1e-12);
        }
    }

    #[test]
    fn recall_at_zero_counts_overlaps(pairs in prop::collection::vec((interval(), interval()), 1..30)) {
        let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let rep = rank1_at_iou(&p, &g, &[0.0]).unwrap();
        let expect = p.iter().zip(&g).filter(|(a, b)| interval_iou(**a, **b) > 0.0).count() as f64 / p.len() as f64;
        prop_assert_eq!(rep.recall_at(0.0).unwrap(), expect);
    }

    #[test]
    fn region_set_monotone_in_width(c in 0.001..0.999f64, w in 0.001..0.6f64, dw in 0.0..0.39f64, t in 1usize..100) {
        let narrow = region_frames(&TemporalBoundary::new(c, w).unwrap(), t);
        let wide = region_frames(&TemporalBoundary::new(c, w + dw).unwrap(), t);
        // The nearest-frame fallback only applies to regions with no frame.
        let narrow_has_frames = {
            let iv = TemporalBoundary::new(c, w).unwrap().clamp_interval();
            timeline(t).iter().any(|&x| iv.contains(x))
        };
        if narrow_has_frames {
            prop_assert!(narrow.iter().all(|f| wide.contains(f)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn qdm_is_permutation_equivariant(seed in 0u64..1000, t in 2usize..12) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = ["door", "open", "dog", "run", "cup", "table", "light", "walk"];
        let texts: Vec<Vec<String>> = (0..t)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        let mut words: Vec<&str> = vocab.to_vec();
                        words.shuffle(&mut rng);
                        words[..3].join(" ")
                    })
                    .collect()
            })
            .collect();
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let build = |order: &[usize]| {
            let mut d = DescriptionDict::new(3);
            for (i, &src) in order.iter().enumerate() {
                let ds = texts[src]
                    .iter()
                    .enumerate()
                    .map(|(j, s)| Description { prompt_id: j, text: s.clone() })
                    .collect();
                d.insert("v", i, ds).unwrap();
            }
            d
        };
        let ident: Vec<usize> = (0..t).collect();
        let emb = TokenEmbedder::with_dim(16);
        let q = ["open", "door"];
        let base = qdm_scores(&q, &build(&ident), "v", t, &emb, Aggregation::Max).unwrap();
        let permuted = qdm_scores(&q, &build(&perm), "v", t, &emb, Aggregation::Max).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.scores[i], base.scores[src]);
        }
    }

    #[test]
    fn composed_graph_matches_finite_differences(seed in 0u64..10_000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let r = grad_check(
            |t, v| {
                let a = t.mul(v[0], v[1]);
                let b = t.tanh(a);
                let c = t.sigmoid(v[2]);
                let d = t.exp(c);
                let e = t.add(b, d);
                Ok(t.square(e))
            },
            &x,
            1e-5,
            1e-4,
        );
        prop_assert!(r.passed(), "{:?}", r);
    }

    #[test]
    fn graph_evaluation_is_deterministic(c in 0.05..0.95f64, w in 0.05..0.9f64, s in unit_scores(4..40)) {
        let tl = timeline(s.len());
        let run = || {
            let mut t = Tape::new();
            let b = boundary(&mut t, c, w);
            let l = pcl_loss(&mut t, &b, &seq(s.clone()), 0.25, 0.15, &tl, 50.0).unwrap();
            let g = t.backward(l);
            (t.value(l).to_bits(), g.wrt(b.center).to_bits(), g.wrt(b.width).to_bits())
        };
        prop_assert_eq!(run(), run());
    }
}

/// Smooth bump of height 1 centered at `c_star`.
fn bump(t: usize, c_star: f64) -> FrameScoreSequence {
    let raw: Vec<f64> = timeline(t)
        .iter()
        .map(|&x| (-(x - c_star).powi(2) / (2.0 * 0.08f64.powi(2))).exp())
        .collect();
    seq(minmax_normalize(&raw))
}

fn pcl_center_gradient(s: &FrameScoreSequence, c: f64, w: f64, k: f64) -> f64 {
    let tl = timeline(s.scores.len());
    let mut t = Tape::new();
    let b = boundary(&mut t, c, w);
    let l = pcl_loss(&mut t, &b, s, 0.25, 0.15, &tl, k).unwrap();
    t.backward(l).wrt(b.center)
}

#[test]
fn pcl_gradient_recenters_on_the_bump() {
    let mut checked = 0;
    for k in [50.0, 500.0] {
        for c_star in [0.35, 0.5, 0.65] {
            let s = bump(64, c_star);
            for w in [0.1, 0.2, 0.3] {
                for i in 0..=80 {
                    let c = 0.1 + 0.8 * i as f64 / 80.0;
                    // Off-center boundaries whose window still covers the peak.
                    let off = (c - c_star).abs();
                    if off < 1.0 / 64.0 || off >= w / 2.0 {
                        continue;
                    }
                    let g = pcl_center_gradient(&s, c, w, k);
                    if g.abs() < 1e-9 {
                        continue;
                    }
                    checked += 1;
                    // A descent step moves c by -g.
                    assert_eq!((-g).signum(), (c_star - c).signum(), "k={k} c*={c_star} c={c} w={w} dL/dc={g}");
                }
            }
        }
    }
    assert!(checked > 50, "only {checked} active grid points");
}

#[test]
fn pcl_gradient_on_the_far_tail_points_away() {
    // With the window entirely on the rising tail, the after-flank sits higher
    // on the slope than the interior, so the contrast grows toward the bump
    // and descent drifts away until both hinges go flat.
    let s = bump(64, 0.5);
    for k in [50.0, 500.0] {
        assert!(pcl_center_gradient(&s, 0.25, 0.2, k) > 0.0);
        assert!(pcl_center_gradient(&s, 0.75, 0.2, k) < 0.0);
    }
}

#[test]
fn soft_mask_converges_to_hard_mean() {
    let s: Vec<f64> = timeline(64)
        .iter()
        .map(|&x| if (0.3..=0.7).contains(&x) { 1.0 } else { 0.0 })
        .collect();
    let tl = timeline(64);
    let hard = {
        let inside: Vec<f64> = tl
            .iter()
            .zip(&s)
            .filter(|(t, _)| (0.33..=0.73).contains(*t))
            .map(|(_, x)| *x)
            .collect();
        inside.iter().sum::<f64>() / inside.len() as f64
    };
    let mut last = f64::INFINITY;
    for k in [50.0, 500.0, 5000.0] {
        let mut t = Tape::new();
        let b = boundary(&mut t, 0.53, 0.4);
        let m = soft_window_mask(&mut t, &b, &tl, k);
        let num = t.weighted_sum(&m, &s).unwrap();
        let den = t.sum(&m);
        let mean = t.value(num) / t.value(den);
        let err = (mean - hard).abs();
        assert!(err < last, "k={k}: error {err} did not shrink from {last}");
        last = err;
    }
    assert!(last < 1e-3);
}

#[test]
fn synthetic_gt_always_covers_a_frame() {
    for seed in 0..5 {
        let cfg = SynthConfig {
            n_instances: 200,
            t: 20,
            gt_width_range: (0.05, 0.3),
            seed,
            ..SynthConfig::default()
        };
        for inst in generate_dataset(&cfg).unwrap().instances {
            let gt = inst.gt.unwrap();
            assert!(inst.timeline().iter().any(|&t| gt.contains(t)), "{}", inst.video_id);
        }
    }
}
