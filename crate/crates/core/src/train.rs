//! Training loop: warm-up on the grounding losses, then the full objective,
//! with Adam, an inverse-square-root schedule and ablation switches.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::eval::{rank1_at_iou, RecallAt, ANC_THRESHOLDS};
use crate::expand::{expand_step, sample_region_description, ExpansionConfig};
use crate::losses::{mil_loss, mutual_loss, pcl_loss, total_loss, LossTerms, LossWeights};
use crate::matchers::{InstanceScores, TokenEmbedder};
use crate::model::{input_dim, pool_boundary_feature, predict_value, soft_window_mask, DiffBoundary, PredictorParams};
use crate::optim::{anneal, inverse_sqrt_lr, Adam};
use crate::rng::{self, Stream};
use crate::types::{DescriptionDict, GroundingInstance, Interval, TemporalBoundary};

/// Which clarification components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Grounding losses only.
    None,
    Mutual,
    Pcl,
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::Mutual, Ablation::Pcl, Ablation::Full];

    pub fn mutual(self) -> bool {
        matches!(self, Ablation::Mutual | Ablation::Full)
    }

    pub fn pcl(self) -> bool {
        matches!(self, Ablation::Pcl | Ablation::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Mutual => "mutual",
            Ablation::Pcl => "pcl",
            Ablation::Full => "full",
        }
    }

    /// Row label in an ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::None => "Base",
            Ablation::Mutual => "+Mutual",
            Ablation::Pcl => "+PCL",
            Ablation::Full => "Full",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Ablation::None),
            "mutual" => Ok(Ablation::Mutual),
            "pcl" => Ok(Ablation::Pcl),
            "full" => Ok(Ablation::Full),
            other => Err(format!("unknown ablation `{other}` (expected none, mutual, pcl or full)")),
        }
    }
}

/// Branch whose boundary is reported at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferBranch {
    #[default]
    Original,
    Expanded,
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
    /// Mask sharpness at the first and last step, interpolated linearly.
    pub k_schedule: (f64, f64),
    pub hidden: usize,
    pub infer_branch: InferBranch,
    pub expansion: ExpansionConfig,
    pub thresholds: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 32,
            weights: LossWeights::anc(),
            ablation: Ablation::Full,
            seed: 0,
            k_schedule: (50.0, 500.0),
            hidden: 16,
            infer_branch: InferBranch::Original,
            expansion: ExpansionConfig::default(),
            thresholds: ANC_THRESHOLDS.to_vec(),
        }
    }
}

impl TrainConfig {
    /// Charades-STA-style preset: longer warm-up and heavier clarification.
    pub fn charades() -> Self {
        Self {
            warmup_epochs: 7,
            weights: LossWeights::charades(),
            thresholds: crate::eval::CHARADES_THRESHOLDS.to_vec(),
            ..Self::default()
        }
    }

    /// Settings used on the synthetic benchmark: a larger step size, since
    /// the default takes too few steps to move the predictor at this scale,
    /// and a zero MIL floor so the grounding loss keeps its gradient while the
    /// positive pair already wins.
    pub fn synthetic_benchmark() -> Self {
        let mut cfg = Self {
            lr: 5e-3,
            ..Self::default()
        };
        cfg.weights.delta_mil = 0.0;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be > 0", self.lr)));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.hidden < 2 {
            return Err(Error::Config("hidden must be >= 2".into()));
        }
        let (k0, k1) = self.k_schedule;
        if !(k0 > 0.0 && k1 > 0.0) {
            return Err(Error::Config(format!("k_schedule {:?} must be positive", self.k_schedule)));
        }
        self.weights.validate().map_err(Error::Config)?;
        self.expansion.validate()
    }
}

/// Loss breakdown of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_go: f64,
    pub l_gn: f64,
    pub l_m: f64,
    pub l_c: f64,
    pub l_cf: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub k: f64,
    pub warmup: bool,
    pub l_go: f64,
    pub l_gn: f64,
    pub l_m: f64,
    pub l_c: f64,
    pub l_cf: f64,
    pub total: f64,
    pub val_recall: Vec<RecallAt>,
    pub val_mean_iou: Option<f64>,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params_o: PredictorParams,
    pub params_n: PredictorParams,
    pub adam: Adam,
    /// Optimizer steps taken.
    pub step: u64,
    pub epoch: usize,
    /// Next batch within `epoch`.
    pub batch: usize,
}

/// Read-only inputs of a training run.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub instances: &'a [GroundingInstance],
    pub scores: &'a [InstanceScores],
    pub dict: &'a DescriptionDict,
    pub embedder: &'a TokenEmbedder,
}

impl TrainData<'_> {
    fn check(&self) -> Result<()> {
        if self.instances.len() < 2 {
            return Err(Error::Data("training needs at least two instances for negative pairs".into()));
        }
        if self.scores.len() != self.instances.len() {
            return Err(Error::Data(format!(
                "{} score entries for {} instances",
                self.scores.len(),
                self.instances.len()
            )));
        }
        let c = self.instances[0].feature_dim();
        if self.embedder.dim() != c {
            return Err(Error::Config(format!("embedder dim {} != feature dim {c}", self.embedder.dim())));
        }
        Ok(())
    }
}

struct InstanceResult {
    grad: Vec<f64>,
    terms: [f64; 6],
}

/// Owns the optimizer state and advances it one batch at a time.
pub struct Trainer {
    cfg: TrainConfig,
    state: TrainState,
    n_train: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, feature_dim: usize, n_train: usize) -> Result<Self> {
        cfg.validate()?;
        let d = input_dim(feature_dim);
        let k = cfg.k_schedule.0;
        let params_o = PredictorParams::init(d, cfg.hidden, k, cfg.seed, 0);
        let params_n = PredictorParams::init(d, cfg.hidden, k, cfg.seed, 1);
        let adam = Adam::new(params_o.num_weights() + params_n.num_weights());
        Ok(Self {
            cfg,
            state: TrainState {
                params_o,
                params_n,
                adam,
                step: 0,
                epoch: 0,
                batch: 0,
            },
            n_train,
        })
    }

    pub fn from_state(cfg: TrainConfig, state: TrainState, n_train: usize) -> Result<Self> {
        cfg.validate()?;
        state.params_o.validate()?;
        state.params_n.validate()?;
        Ok(Self { cfg, state, n_train })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.batches_per_epoch() * self.cfg.epochs) as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    pub fn in_warmup(&self) -> bool {
        self.state.epoch < self.cfg.warmup_epochs
    }

    /// Learning rate of the next step.
    pub fn current_lr(&self) -> f64 {
        let warmup_steps = (self.batches_per_epoch() * self.cfg.warmup_epochs) as u64;
        inverse_sqrt_lr(self.cfg.lr, self.state.step + 1, warmup_steps)
    }

    /// Mask sharpness of the next step.
    pub fn current_k(&self) -> f64 {
        let total = self.total_steps().max(2) - 1;
        let (k0, k1) = self.cfg.k_schedule;
        anneal(k0, k1, self.state.step as f64 / total as f64)
    }

    /// Loss weights in effect: clarification terms are off during warm-up
    /// and when ablated.
    pub fn effective_weights(&self) -> LossWeights {
        let warm = self.in_warmup();
        LossWeights {
            alpha: if warm || !self.cfg.ablation.mutual() { 0.0 } else { self.cfg.weights.alpha },
            beta: if warm || !self.cfg.ablation.pcl() { 0.0 } else { self.cfg.weights.beta },
            ..self.cfg.weights
        }
    }

    /// Instance order of the current epoch.
    pub fn epoch_order(&self) -> Vec<usize> {
        epoch_permutation(self.cfg.seed, self.state.epoch, self.n_train)
    }

    /// Runs the next batch. On a non-finite loss the state is left untouched
    /// and the offending term is reported.
    pub fn step(&mut self, data: &TrainData) -> Result<StepLog> {
        if self.is_done() {
            return Err(Error::Config("training already finished".into()));
        }
        if data.instances.len() != self.n_train {
            return Err(Error::Data(format!(
                "trainer built for {} instances, got {}",
                self.n_train,
                data.instances.len()
            )));
        }
        data.check()?;
        let order = self.epoch_order();
        let bs = self.cfg.batch_size;
        let batch: Vec<usize> = order[self.state.batch * bs..((self.state.batch + 1) * bs).min(order.len())].to_vec();
        let negatives = batch_negatives(&batch, &order, self.state.batch * bs);

        let k = self.current_k();
        let lr = self.current_lr();
        let weights = self.effective_weights();
        let mut po = self.state.params_o.clone();
        let mut pn = self.state.params_n.clone();
        po.k = k;
        pn.k = k;
        let epoch = self.state.epoch;
        let seed = self.cfg.seed;
        let expansion = &self.cfg.expansion;

        let results: Vec<Result<InstanceResult>> = batch
            .par_iter()
            .zip(&negatives)
            .map(|(&i, &neg)| instance_step(data, i, neg, &po, &pn, &weights, expansion, seed, epoch))
            .collect();

        let n_weights = self.state.adam.m.len();
        let mut grad = vec![0.0; n_weights];
        let mut terms = [0.0; 6];
        for r in results {
            let r = r?;
            for (g, x) in grad.iter_mut().zip(&r.grad) {
                *g += x;
            }
            for (t, x) in terms.iter_mut().zip(&r.terms) {
                *t += x;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        terms.iter_mut().for_each(|t| *t *= scale);
        let step = self.state.step + 1;
        for (name, value) in TERM_NAMES.iter().zip(&terms) {
            if !value.is_finite() {
                return Err(Error::NonFinite { term: name, step });
            }
        }
        if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
            let term = if bad < po.num_weights() { "grad(params_o)" } else { "grad(params_n)" };
            return Err(Error::NonFinite { term, step });
        }

        let mut flat = po.flatten();
        flat.extend(pn.flatten());
        self.state.adam.step(&mut flat, &grad, lr);
        let split = po.num_weights();
        self.state.params_o = po.with_flat(&flat[..split]);
        self.state.params_n = pn.with_flat(&flat[split..]);
        self.state.step = step;
        self.state.batch += 1;
        if self.state.batch >= self.batches_per_epoch() {
            self.state.batch = 0;
            self.state.epoch += 1;
        }
        let [l_go, l_gn, l_m, l_c, l_cf, total] = terms;
        Ok(StepLog {
            step,
            l_go,
            l_gn,
            l_m,
            l_c,
            l_cf,
            total,
        })
    }

    /// Trained parameters with the sharpness of the last step.
    pub fn params(&self) -> (PredictorParams, PredictorParams) {
        let k = self.current_k();
        let (mut po, mut pn) = (self.state.params_o.clone(), self.state.params_n.clone());
        po.k = k;
        pn.k = k;
        (po, pn)
    }
}

const TERM_NAMES: [&str; 6] = ["l_go", "l_gn", "l_m", "l_c", "l_cf", "total"];

/// Seeded shuffle of `0..n` for one epoch.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Sampler, &[epoch as u64]));
    order
}

/// Negative partner of every batch member: the next member of the batch
/// (a cyclic derangement), or the next instance of the epoch order for a
/// batch of one.
fn batch_negatives(batch: &[usize], order: &[usize], offset: usize) -> Vec<usize> {
    if batch.len() >= 2 {
        (0..batch.len()).map(|j| batch[(j + 1) % batch.len()]).collect()
    } else {
        vec![order[(offset + 1) % order.len()]]
    }
}

#[allow(clippy::too_many_arguments)]
fn instance_step(
    data: &TrainData,
    i: usize,
    neg: usize,
    po: &PredictorParams,
    pn: &PredictorParams,
    w: &LossWeights,
    expansion: &ExpansionConfig,
    seed: u64,
    epoch: usize,
) -> Result<InstanceResult> {
    let inst = &data.instances[i];
    let q_neg = &data.instances[neg].query_embedding;
    let mut tape = Tape::with_capacity(8192);
    let vo = po.to_tape(&mut tape);
    let vn = pn.to_tape(&mut tape);
    let mut rng = rng::stream(seed, Stream::Description, &[epoch as u64, i as u64]);
    let e = expand_step(&mut tape, inst, &vo, &vn, data.dict, data.embedder, expansion, &mut rng)?;
    let tl = inst.timeline();

    let l_go = grounding_loss(&mut tape, inst, &e.p_o, &inst.query_embedding, q_neg, po.k, w.delta_mil)?;
    let l_gn = grounding_loss(&mut tape, inst, &e.p_n, &e.expanded_embedding, q_neg, pn.k, w.delta_mil)?;
    let l_m = mutual_loss(&mut tape, &e.p_o, &e.p_n)?;
    let scores = &data.scores[i];
    let l_c = pcl_loss(&mut tape, &e.p_o, &scores.qdm, w.tau, w.delta_pcl, &tl, po.k)?;
    let l_cf = pcl_loss(&mut tape, &e.p_o, &scores.qfm, w.tau, w.delta_pcl, &tl, po.k)?;
    let terms = LossTerms {
        l_go,
        l_gn,
        l_m,
        l_c,
        l_cf,
    };
    let total = total_loss(&mut tape, &terms, w);
    let values = [l_go, l_gn, l_m, l_c, l_cf, total].map(|v| tape.value(v));

    // Zero-weighted terms stay on the tape for logging but must not reach
    // the optimizer, not even as 0 · NaN.
    let mut effective = tape.add(l_go, l_gn);
    if w.alpha != 0.0 {
        let m = tape.scale(l_m, w.alpha);
        effective = tape.add(effective, m);
    }
    if w.beta != 0.0 {
        let c = tape.add(l_c, l_cf);
        let c = tape.scale(c, w.beta);
        effective = tape.add(effective, c);
    }
    let g = tape.backward(effective);
    let mut grad = g.wrt_all(&vo.vars);
    grad.extend(g.wrt_all(&vn.vars));
    Ok(InstanceResult { grad, terms: values })
}

/// MIL loss of one branch: the proposal's pooled feature against the
/// branch query (positive) and a mismatched query (negative).
fn grounding_loss(
    tape: &mut Tape,
    inst: &GroundingInstance,
    b: &DiffBoundary,
    query: &[f64],
    q_neg: &[f64],
    k: f64,
    delta_mil: f64,
) -> Result<crate::diff::Var> {
    let mask = soft_window_mask(tape, b, &inst.timeline(), k);
    let pooled = pool_boundary_feature(tape, inst, &mask)?;
    let q: Vec<_> = query.iter().map(|&x| tape.constant(x)).collect();
    let qn: Vec<_> = q_neg.iter().map(|&x| tape.constant(x)).collect();
    let m_pos = tape.cosine(&pooled, &q)?;
    let m_neg = tape.cosine(&pooled, &qn)?;
    Ok(mil_loss(tape, m_pos, m_neg, delta_mil))
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params_o: PredictorParams,
    pub params_n: PredictorParams,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub state: TrainState,
}

/// Trains to completion. `on_epoch` sees every epoch row with the state at
/// its end, e.g. to write checkpoints.
pub fn train<F>(
    data: &TrainData,
    validation: Option<&[GroundingInstance]>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &TrainState) -> Result<()>,
{
    data.check()?;
    let trainer = Trainer::new(cfg.clone(), data.instances[0].feature_dim(), data.instances.len())?;
    resume(trainer, data, validation, &mut on_epoch)
}

/// Continues a trainer to completion.
pub fn resume<F>(
    mut trainer: Trainer,
    data: &TrainData,
    validation: Option<&[GroundingInstance]>,
    on_epoch: &mut F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &TrainState) -> Result<()>,
{
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut epoch_steps: Vec<StepLog> = Vec::new();
    while !trainer.is_done() {
        let epoch = trainer.state().epoch;
        let warmup = trainer.in_warmup();
        let (lr, k) = (trainer.current_lr(), trainer.current_k());
        let log = trainer.step(data)?;
        steps.push(log);
        epoch_steps.push(log);
        if trainer.state().epoch != epoch {
            let n = epoch_steps.len() as f64;
            let mean = |f: fn(&StepLog) -> f64| epoch_steps.iter().map(f).sum::<f64>() / n;
            let (val_recall, val_mean_iou) = match validation {
                Some(val) if !val.is_empty() => {
                    let (po, pn) = trainer.params();
                    let preds = infer(val, &po, &pn, InferBranch::Original, None)?;
                    let gts = ground_truths(val)?;
                    let rep = rank1_at_iou(&preds, &gts, &trainer.config().thresholds)?;
                    (rep.recall, Some(rep.mean_iou))
                }
                _ => (Vec::new(), None),
            };
            let row = EpochLog {
                epoch,
                step: log.step,
                lr,
                k,
                warmup,
                l_go: mean(|s| s.l_go),
                l_gn: mean(|s| s.l_gn),
                l_m: mean(|s| s.l_m),
                l_c: mean(|s| s.l_c),
                l_cf: mean(|s| s.l_cf),
                total: mean(|s| s.total),
                val_recall,
                val_mean_iou,
            };
            on_epoch(&row, trainer.state())?;
            epochs.push(row);
            epoch_steps.clear();
        }
    }
    let (params_o, params_n) = trainer.params();
    Ok(TrainOutcome {
        params_o,
        params_n,
        steps,
        epochs,
        state: trainer.state().clone(),
    })
}

/// Ground-truth intervals of every instance; errors if one is missing.
pub fn ground_truths(instances: &[GroundingInstance]) -> Result<Vec<Interval>> {
    instances
        .iter()
        .map(|i| {
            i.gt.ok_or_else(|| Error::Data(format!("{}: no ground truth", i.video_id)))
        })
        .collect()
}

/// What the expanded branch needs at inference.
pub struct ExpansionContext<'a> {
    pub dict: &'a DescriptionDict,
    pub embedder: &'a TokenEmbedder,
    pub cfg: &'a ExpansionConfig,
    pub seed: u64,
}

/// Clamped predicted interval per instance. The original branch needs no
/// dictionary; the other branches sample one region description per
/// instance from a fixed stream.
pub fn infer(
    instances: &[GroundingInstance],
    params_o: &PredictorParams,
    params_n: &PredictorParams,
    branch: InferBranch,
    expansion: Option<&ExpansionContext>,
) -> Result<Vec<Interval>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let b_o = predict_value(inst, &inst.query_embedding, params_o)?;
            let b = match branch {
                InferBranch::Original => b_o,
                InferBranch::Expanded | InferBranch::Midpoint => {
                    let ctx = expansion.ok_or_else(|| {
                        Error::Config("the expanded branch needs a description dictionary".into())
                    })?;
                    let mut rng = rng::stream(ctx.seed, Stream::Description, &[u64::MAX, i as u64]);
                    let text = sample_region_description(ctx.dict, &inst.video_id, inst.num_frames(), &b_o, ctx.cfg, &mut rng)?;
                    let b_n = predict_value(inst, &ctx.embedder.embed_text(&text), params_n)?;
                    if branch == InferBranch::Expanded {
                        b_n
                    } else {
                        TemporalBoundary {
                            center: (b_o.center + b_n.center) / 2.0,
                            width: (b_o.width + b_n.width) / 2.0,
                        }
                    }
                }
            };
            Ok(b.clamp_interval())
        })
        .collect()
}
