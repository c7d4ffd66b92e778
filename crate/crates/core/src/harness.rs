//! Semi-supervised training protocol and the experiments built on it.
//!
//! Phase 1 trains the segmenter on the labeled frames only. Phase 2
//! continues from that checkpoint with the consistency loss switched on for
//! adjacent unlabeled frame pairs. Depth, motion and intrinsics come from
//! the renderer (optionally perturbed) and are constants in every graph.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{perturb, relative_motion, DepthMap, Se3Motion, WarpMap, WarpMode};
use crate::graph::{Graph, Var};
use crate::losses::{consistency_term, edge_map, supervised_ce, LossVariant};
use crate::metrics::{spearman, ConfusionMatrix, MiouResult};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::scenegen::{class_census, generate_dataset, Frame, SceneConfig, Sequence};
use crate::segmenter::{init_params, predict, segmenter_forward, segmenter_forward_graph, Architecture, SegmenterParams};
use crate::tensor::Tensor;

/// Floor on the baseline IOU when computing relative improvement.
pub const RELATIVE_IMPROVEMENT_EPS: f64 = 1e-3;

/// Rendered sequences with a scene-level train / evaluation split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SceneConfig,
    pub seed: u64,
    pub sequences: Vec<Sequence>,
    /// Sequence indices used for training and consistency.
    pub train: Vec<usize>,
    /// Held-out sequence indices used only for evaluation.
    pub eval: Vec<usize>,
}

/// Address of a frame inside a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameRef {
    pub sequence: usize,
    pub frame: usize,
}

impl Dataset {
    /// Hold out the last `eval_fraction` of sequences (at least one when
    /// there are two or more).
    pub fn from_sequences(config: SceneConfig, seed: u64, sequences: Vec<Sequence>, eval_fraction: f64) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Config("dataset has no sequences".into()));
        }
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::Config(format!("eval fraction {eval_fraction} outside [0, 1)")));
        }
        let n = sequences.len();
        let mut n_eval = (eval_fraction * n as f64).round() as usize;
        if n >= 2 && eval_fraction > 0.0 {
            n_eval = n_eval.clamp(1, n - 1);
        } else {
            n_eval = 0;
        }
        Ok(Dataset {
            config,
            seed,
            sequences,
            train: (0..n - n_eval).collect(),
            eval: (n - n_eval..n).collect(),
        })
    }

    pub fn generate(config: &SceneConfig, seed: u64, eval_fraction: f64) -> Result<Self> {
        let sequences = generate_dataset(config, seed)?;
        Self::from_sequences(config.clone(), seed, sequences, eval_fraction)
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn frame(&self, r: FrameRef) -> &Frame {
        &self.sequences[r.sequence].frames[r.frame]
    }

    fn refs(&self, seqs: &[usize]) -> Vec<FrameRef> {
        seqs.iter()
            .flat_map(|&s| {
                (0..self.sequences[s].frames.len()).map(move |f| FrameRef { sequence: s, frame: f })
            })
            .collect()
    }

    pub fn train_frames(&self) -> Vec<FrameRef> {
        self.refs(&self.train)
    }

    pub fn eval_frames(&self) -> Vec<FrameRef> {
        self.refs(&self.eval)
    }

    /// Adjacent `(t, t+1)` pairs inside training sequences.
    pub fn train_pairs(&self) -> Vec<(FrameRef, FrameRef)> {
        self.train
            .iter()
            .flat_map(|&s| {
                (1..self.sequences[s].frames.len()).map(move |f| {
                    (
                        FrameRef { sequence: s, frame: f - 1 },
                        FrameRef { sequence: s, frame: f },
                    )
                })
            })
            .collect()
    }
}

/// Which training frames keep their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub labeled: Vec<bool>,
    pub fraction: f64,
    pub seed: u64,
}

impl LabelSplit {
    pub fn count(&self) -> usize {
        self.labeled.iter().filter(|&&b| b).count()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labeled
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Keep labels on `max(1, round(fraction * total))` frames chosen uniformly
/// without replacement.
pub fn split_labels(total: usize, fraction: f64, seed: u64) -> Result<LabelSplit> {
    if total == 0 {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    let count = ((fraction * total as f64).round() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, total, count).into_vec();
    chosen.sort_unstable();
    let mut labeled = vec![false; total];
    for i in chosen {
        labeled[i] = true;
    }
    Ok(LabelSplit {
        labeled,
        fraction,
        seed,
    })
}

/// Noise injected into the oracle geometry.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbation {
    pub rotation: f64,
    pub translation: f64,
    pub depth: f64,
}

impl Perturbation {
    pub fn is_zero(&self) -> bool {
        self.rotation == 0.0 && self.translation == 0.0 && self.depth == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub labeled_per_step: usize,
    pub pairs_per_step: usize,
    /// Weight of the consistency term relative to supervised cross entropy.
    pub lambda: f64,
    pub adam: AdamConfig,
    /// Learning rate used once the consistency phase starts.
    pub phase2_lr: f64,
    /// Decay the learning rate linearly to zero over each phase.
    pub lr_decay: bool,
    pub warp_mode: WarpMode,
    pub variant: LossVariant,
    pub perturbation: Perturbation,
    /// Hidden layer widths of the segmenter.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_steps: 600,
            phase2_steps: 600,
            labeled_per_step: 2,
            pairs_per_step: 2,
            lambda: 1.0,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            phase2_lr: 1e-3,
            lr_decay: true,
            warp_mode: WarpMode::ForwardSplat,
            variant: LossVariant::Combined,
            perturbation: Perturbation::default(),
            widths: vec![8, 16, 16],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled_per_step == 0 {
            return Err(Error::Config("labeled_per_step must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !(self.adam.lr > 0.0) || !(self.phase2_lr > 0.0) {
            return Err(Error::Config("lambda must be >= 0 and learning rates > 0".into()));
        }
        let p = &self.perturbation;
        if p.rotation < 0.0 || p.translation < 0.0 || p.depth < 0.0 {
            return Err(Error::Config("perturbation sigmas must be >= 0".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, classes: usize) -> Architecture {
        Architecture::with_widths(&self.widths, classes)
    }
}

/// Everything a command needs beyond the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Labeled fraction for single runs and for the loss ablation.
    pub fraction: f64,
    /// Labeled fractions of the supervision sweep.
    pub fractions: Vec<f64>,
    /// Replicates per sweep cell or ablation row.
    pub seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            fraction: 0.005,
            fractions: vec![0.005, 0.01, 0.02, 0.04, 0.08],
            seeds: 3,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be positive".into()));
        }
        if let Some(f) = std::iter::once(&self.fraction)
            .chain(&self.fractions)
            .find(|&&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
        }
        Ok(())
    }
}

/// Stable hash of any serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Model and optimizer state after a training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SegmenterParams<f32>,
    pub adam: AdamState<f32>,
    /// 1 after the supervised phase, 2 after the consistency phase.
    pub phase: u8,
    /// Steps completed inside `phase`.
    pub step: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub supervised: Vec<f64>,
    pub consistency: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: LossCurve,
}

fn step_rng(seed: u64, phase: u8, step: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([phase]);
    h.update(step.to_le_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Cached geometry for one adjacent frame pair.
struct PairGeometry {
    first: FrameRef,
    second: FrameRef,
    /// Warps frame-t logits into frame t+1.
    forward: Arc<WarpMap>,
    /// Warps frame-t+1 logits into frame t.
    backward: Arc<WarpMap>,
}

fn pair_maps(
    a: &Frame,
    b: &Frame,
    mode: WarpMode,
    noise: &Perturbation,
    seed: u64,
) -> Result<(WarpMap, WarpMap)> {
    let m_ab = relative_motion(&a.pose, &b.pose);
    let m_ba = m_ab.inverse();
    let noisy = |m: &Se3Motion, d: &DepthMap, salt: u64| -> Result<(Se3Motion, DepthMap)> {
        if noise.is_zero() {
            Ok((*m, d.clone()))
        } else {
            perturb(m, d, noise.rotation, noise.translation, noise.depth, seed ^ salt)
        }
    };
    let k = &a.intrinsics;
    // the map into frame t+1 and the map into frame t
    let (into_b, into_a) = match mode {
        WarpMode::ForwardSplat => {
            let (m, d) = noisy(&m_ab, &a.depth, 1)?;
            let (m2, d2) = noisy(&m_ba, &b.depth, 2)?;
            (WarpMap::build(&d, &m, k, mode)?, WarpMap::build(&d2, &m2, k, mode)?)
        }
        WarpMode::InverseSample => {
            let (m, d) = noisy(&m_ba, &b.depth, 1)?;
            let (m2, d2) = noisy(&m_ab, &a.depth, 2)?;
            (WarpMap::build(&d, &m, k, mode)?, WarpMap::build(&d2, &m2, k, mode)?)
        }
    };
    Ok((into_b, into_a))
}

/// Warp between adjacent frames with the given mode and noise.
pub fn adjacent_warps(a: &Frame, b: &Frame, mode: WarpMode, noise: &Perturbation, seed: u64) -> Result<(WarpMap, WarpMap)> {
    pair_maps(a, b, mode, noise, seed)
}

/// Share of valid pixels where ground-truth labels warped between adjacent
/// frames, in both directions, agree with the target frame's labels.
pub fn label_warp_agreement(data: &Dataset, mode: WarpMode) -> Result<f64> {
    let classes = data.classes();
    let counts = data
        .sequences
        .par_iter()
        .map(|seq| {
            let (mut agree, mut valid) = (0u64, 0u64);
            for pair in seq.frames.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let (into_b, into_a) = pair_maps(a, b, mode, &Perturbation::default(), 0)?;
                for (map, src, dst) in [(&into_b, a, b), (&into_a, b, a)] {
                    let warped = map.apply(&src.seg.to_one_hot::<f32>(classes, 1.0)?)?;
                    let labels = predict(&warped)?;
                    for ((&ok, &got), &want) in map.validity().values().iter().zip(labels.ids()).zip(dst.seg.ids()) {
                        if ok {
                            valid += 1;
                            agree += u64::from(got == want);
                        }
                    }
                }
            }
            Ok((agree, valid))
        })
        .collect::<Result<Vec<_>>>()?;
    let (agree, valid) = counts.iter().fold((0, 0), |(a, v), &(x, y)| (a + x, v + y));
    if valid == 0 {
        return Err(Error::Numeric("no valid pixels in any adjacent warp".into()));
    }
    Ok(agree as f64 / valid as f64)
}

/// Precomputed per-dataset state for phase 2.
struct ConsistencyContext {
    pairs: Vec<PairGeometry>,
    edges: BTreeMap<FrameRef, Tensor<f32>>,
}

impl ConsistencyContext {
    fn build(data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let refs = data.train_pairs();
        let pairs = refs
            .par_iter()
            .enumerate()
            .map(|(i, &(first, second))| {
                let seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64);
                let (forward, backward) =
                    pair_maps(data.frame(first), data.frame(second), cfg.warp_mode, &cfg.perturbation, seed)?;
                Ok(PairGeometry {
                    first,
                    second,
                    forward: Arc::new(forward),
                    backward: Arc::new(backward),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let frames = data.train_frames();
        let edges = frames
            .par_iter()
            .map(|&r| Ok((r, edge_map(&data.frame(r).rgb)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        Ok(ConsistencyContext { pairs, edges })
    }
}

struct StepLoss {
    supervised: f64,
    consistency: f64,
}

fn frame_logits(g: &mut Graph<f32>, arch: &Architecture, frame: &Frame, vars: &[Var]) -> Result<Var> {
    let x = g.constant(frame.rgb.clone());
    segmenter_forward_graph(g, arch, x, vars)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut SegmenterParams<f32>,
    adam: &mut AdamState<f32>,
    adam_cfg: &AdamConfig,
    data: &Dataset,
    labeled: &[FrameRef],
    ctx: Option<&ConsistencyContext>,
    cfg: &TrainConfig,
    phase: u8,
    step: u64,
    total_steps: u64,
) -> Result<StepLoss> {
    let mut rng = step_rng(cfg.seed, phase, step);
    let arch = params.arch.clone();
    let mut g = Graph::<f32>::new();
    let vars = params.register(&mut g);

    let mut sup_terms = Vec::with_capacity(cfg.labeled_per_step);
    let inv_b = 1.0 / cfg.labeled_per_step as f32;
    for _ in 0..cfg.labeled_per_step {
        let r = labeled[rng.random_range(0..labeled.len())];
        let f = data.frame(r);
        let logits = frame_logits(&mut g, &arch, f, &vars)?;
        let all = vec![true; f.seg.ids().len()];
        sup_terms.push((supervised_ce(&mut g, logits, &f.seg, &all)?, inv_b));
    }
    let sup = g.weighted_sum(&sup_terms)?;
    let mut total = sup;
    let mut cons_value = 0.0;

    if let Some(ctx) = ctx.filter(|_| cfg.pairs_per_step > 0) {
        let mut terms = Vec::with_capacity(2 * cfg.pairs_per_step);
        let k = 0.5 / cfg.pairs_per_step as f32;
        for _ in 0..cfg.pairs_per_step {
            let pair = &ctx.pairs[rng.random_range(0..ctx.pairs.len())];
            let la = frame_logits(&mut g, &arch, data.frame(pair.first), &vars)?;
            let lb = frame_logits(&mut g, &arch, data.frame(pair.second), &vars)?;
            let warped_b = pair.forward.record(&mut g, la)?;
            let fwd = consistency_term(
                &mut g,
                cfg.variant,
                warped_b,
                lb,
                &ctx.edges[&pair.second],
                pair.forward.validity(),
            )?;
            let warped_a = pair.backward.record(&mut g, lb)?;
            let bwd = consistency_term(
                &mut g,
                cfg.variant,
                warped_a,
                la,
                &ctx.edges[&pair.first],
                pair.backward.validity(),
            )?;
            terms.push((fwd, k));
            terms.push((bwd, k));
        }
        let cons = g.weighted_sum(&terms)?;
        cons_value = g.value(cons).item() as f64;
        total = g.weighted_sum(&[(sup, 1.0), (cons, cfg.lambda as f32)])?;
    }

    let loss = g.value(total).item();
    let sup_value = g.value(sup).item() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "loss diverged at phase {phase} step {step}: supervised {sup_value}, consistency {cons_value}"
        )));
    }
    let mut grads = g.backward(total)?;
    let grads: Vec<Tensor<f32>> = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.dims())))
        .collect();
    if let Some(bad) = grads.iter().position(|t| !t.all_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for parameter tensor {bad} at phase {phase} step {step}"
        )));
    }
    adam_step(&mut params.tensors, &grads, adam, &decayed(adam_cfg, cfg.lr_decay, step, total_steps))?;
    Ok(StepLoss {
        supervised: sup_value,
        consistency: cons_value,
    })
}

fn decayed(cfg: &AdamConfig, decay: bool, step: u64, total: u64) -> AdamConfig {
    if !decay {
        return *cfg;
    }
    AdamConfig {
        lr: cfg.lr * (1.0 - step as f64 / total as f64),
        ..*cfg
    }
}

fn labeled_refs(data: &Dataset, split: &LabelSplit) -> Result<Vec<FrameRef>> {
    let frames = data.train_frames();
    if split.labeled.len() != frames.len() {
        return Err(Error::Config(format!(
            "label split covers {} frames, dataset has {} training frames",
            split.labeled.len(),
            frames.len()
        )));
    }
    let labeled: Vec<FrameRef> = split.labeled_indices().into_iter().map(|i| frames[i]).collect();
    if labeled.is_empty() {
        return Err(Error::Config("label split has no labeled frames".into()));
    }
    Ok(labeled)
}

/// Fresh phase-0 checkpoint from the configured seed.
pub fn initial_checkpoint(data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    let params = init_params(&cfg.architecture(data.classes()), cfg.seed)?;
    let adam = AdamState::new(&params.tensors);
    Ok(Checkpoint {
        params,
        adam,
        phase: 0,
        step: 0,
        config_hash: config_hash(cfg),
    })
}

/// Phase 1: supervised training on labeled frames only.
pub fn train_baseline(data: &Dataset, split: &LabelSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labeled = labeled_refs(data, split)?;
    let mut ck = initial_checkpoint(data, cfg)?;
    let mut curve = LossCurve::default();
    for step in 0..cfg.phase1_steps {
        let l = train_step(&mut ck.params, &mut ck.adam, &cfg.adam, data, &labeled, None, cfg, 1, step, cfg.phase1_steps)?;
        curve.supervised.push(l.supervised);
    }
    ck.phase = 1;
    ck.step = cfg.phase1_steps;
    Ok(TrainOutcome { checkpoint: ck, curve })
}

/// Phase 2: continue from `baseline` with the consistency loss on.
pub fn train_with_consistency(
    data: &Dataset,
    split: &LabelSplit,
    baseline: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labeled = labeled_refs(data, split)?;
    let ctx = if cfg.pairs_per_step > 0 && cfg.phase2_steps > 0 {
        let ctx = ConsistencyContext::build(data, cfg)?;
        if ctx.pairs.is_empty() {
            return Err(Error::Config("no adjacent training frame pairs".into()));
        }
        Some(ctx)
    } else {
        None
    };
    let mut ck = baseline.clone();
    let adam_cfg = AdamConfig {
        lr: cfg.phase2_lr,
        ..cfg.adam
    };
    let mut curve = LossCurve::default();
    for step in 0..cfg.phase2_steps {
        let l = train_step(&mut ck.params, &mut ck.adam, &adam_cfg, data, &labeled, ctx.as_ref(), cfg, 2, step, cfg.phase2_steps)?;
        curve.supervised.push(l.supervised);
        curve.consistency.push(l.consistency);
    }
    ck.phase = 2;
    ck.step = cfg.phase2_steps;
    Ok(TrainOutcome { checkpoint: ck, curve })
}

/// Confusion matrix of `params` over `frames`.
pub fn confusion(data: &Dataset, params: &SegmenterParams<f32>, frames: &[FrameRef]) -> Result<ConfusionMatrix> {
    let partial = frames
        .par_iter()
        .map(|&r| {
            let f = data.frame(r);
            let pred = predict(&segmenter_forward(&f.rgb, params)?)?;
            let mut cm = ConfusionMatrix::new(data.classes());
            cm.accumulate(&pred, &f.seg)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(data.classes());
    for p in &partial {
        cm.merge(p);
    }
    Ok(cm)
}

/// MIOU on the held-out sequences.
pub fn evaluate(data: &Dataset, params: &SegmenterParams<f32>) -> Result<MiouResult> {
    Ok(confusion(data, params, &data.eval_frames())?.iou())
}

/// Mean supervised cross entropy over the labeled frames.
pub fn labeled_loss(data: &Dataset, split: &LabelSplit, params: &SegmenterParams<f32>) -> Result<f64> {
    let labeled = labeled_refs(data, split)?;
    let mut total = 0.0;
    for &r in &labeled {
        let f = data.frame(r);
        let mut g = Graph::<f32>::new();
        let vars = params.register(&mut g);
        let logits = frame_logits(&mut g, &params.arch, f, &vars)?;
        let all = vec![true; f.seg.ids().len()];
        let l = supervised_ce(&mut g, logits, &f.seg, &all)?;
        total += g.value(l).item() as f64;
    }
    Ok(total / labeled.len() as f64)
}

/// Pixel share of each class in the labeled training frames.
pub fn labeled_class_frequency(data: &Dataset, split: &LabelSplit) -> Result<Vec<f64>> {
    let labeled = labeled_refs(data, split)?;
    Ok(class_census(labeled.iter().map(|&r| data.frame(r)), data.classes()))
}

/// Metrics and curves of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub class_frequency: Vec<f64>,
    pub loss_curve: LossCurve,
    pub config: serde_json::Value,
    /// Seconds spent; kept out of serialized reports so reruns are
    /// byte-identical.
    #[serde(skip)]
    pub wall_clock: f64,
}

/// Evaluate a trained model and package it with its curves.
pub fn run_report(
    data: &Dataset,
    split: &LabelSplit,
    outcome: &TrainOutcome,
    config: serde_json::Value,
    wall_clock: f64,
) -> Result<RunReport> {
    let m = evaluate(data, &outcome.checkpoint.params)?;
    Ok(RunReport {
        per_class_iou: m.per_class,
        miou: m.miou,
        class_frequency: labeled_class_frequency(data, split)?,
        loss_curve: outcome.curve.clone(),
        config,
        wall_clock,
    })
}

/// Baseline and consistency-trained reports for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRun {
    pub split: LabelSplit,
    pub baseline: TrainOutcome,
    pub consistency: TrainOutcome,
    pub baseline_report: RunReport,
    pub consistency_report: RunReport,
}

/// Train both phases and evaluate each.
pub fn run_paired(data: &Dataset, fraction: f64, split_seed: u64, cfg: &TrainConfig) -> Result<PairedRun> {
    let split = split_labels(data.train_frames().len(), fraction, split_seed)?;
    let echo = serde_json::to_value(cfg)?;
    let t0 = Instant::now();
    let baseline = train_baseline(data, &split, cfg)?;
    let baseline_report = run_report(data, &split, &baseline, echo.clone(), t0.elapsed().as_secs_f64())?;
    let t1 = Instant::now();
    let consistency = train_with_consistency(data, &split, &baseline.checkpoint, cfg)?;
    let consistency_report = run_report(data, &split, &consistency, echo, t1.elapsed().as_secs_f64())?;
    Ok(PairedRun {
        split,
        baseline,
        consistency,
        baseline_report,
        consistency_report,
    })
}

/// Split and training seeds for replicate `i`.
pub fn replicate_seeds(base: u64, i: usize) -> (u64, u64) {
    let s = base.wrapping_add(1000 * i as u64);
    (s + 1, s + 2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: usize,
    pub labeled_frames: usize,
    pub baseline_miou: f64,
    pub consist_miou: f64,
    pub baseline_per_class: Vec<Option<f64>>,
    pub consist_per_class: Vec<Option<f64>>,
    pub class_frequency: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMean {
    pub fraction: f64,
    pub baseline_miou: f64,
    pub consist_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub means: Vec<SweepMean>,
    /// Largest ratio `f_base / f_consist` such that the consistency model
    /// trained on `f_consist` matches the baseline trained on `f_base`.
    pub label_efficiency: Option<f64>,
    pub config: serde_json::Value,
}

impl SweepTable {
    pub fn mean_at(&self, fraction: f64) -> Option<&SweepMean> {
        self.means.iter().find(|m| m.fraction == fraction)
    }
}

/// Label-efficiency factor from per-fraction means.
pub fn label_efficiency(means: &[SweepMean]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for b in means {
        let matching = means
            .iter()
            .filter(|c| c.consist_miou >= b.baseline_miou)
            .map(|c| c.fraction)
            .fold(None, |acc: Option<f64>, f| Some(acc.map_or(f, |a| a.min(f))));
        if let Some(fc) = matching {
            let factor = b.fraction / fc;
            best = Some(best.map_or(factor, |x| x.max(factor)));
        }
    }
    best
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Baseline vs consistency MIOU for every fraction and seed.
pub fn sweep_supervision(
    data: &Dataset,
    fractions: &[f64],
    seeds: usize,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<SweepTable> {
    if fractions.is_empty() || seeds == 0 {
        return Err(Error::Config("sweep needs at least one fraction and one seed".into()));
    }
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
    }
    let cells: Vec<(f64, usize)> = fractions
        .iter()
        .flat_map(|&f| (0..seeds).map(move |s| (f, s)))
        .collect();
    let rows = pool(workers)?.install(|| {
        cells
            .par_iter()
            .map(|&(fraction, seed)| {
                let (split_seed, train_seed) = replicate_seeds(cfg.seed, seed);
                let c = TrainConfig {
                    seed: train_seed,
                    ..cfg.clone()
                };
                let run = run_paired(data, fraction, split_seed, &c)?;
                Ok(SweepRow {
                    fraction,
                    seed,
                    labeled_frames: run.split.count(),
                    baseline_miou: run.baseline_report.miou,
                    consist_miou: run.consistency_report.miou,
                    baseline_per_class: run.baseline_report.per_class_iou,
                    consist_per_class: run.consistency_report.per_class_iou,
                    class_frequency: run.baseline_report.class_frequency,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let means: Vec<SweepMean> = fractions
        .iter()
        .map(|&fraction| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.fraction == fraction).collect();
            let n = sel.len() as f64;
            SweepMean {
                fraction,
                baseline_miou: sel.iter().map(|r| r.baseline_miou).sum::<f64>() / n,
                consist_miou: sel.iter().map(|r| r.consist_miou).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(SweepTable {
        label_efficiency: label_efficiency(&means),
        rows,
        means,
        config: serde_json::to_value(cfg)?,
    })
}

/// One row of the loss ablation; `variant` is `None` for the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Option<LossVariant>,
    pub miou: Vec<f64>,
    pub mean_miou: f64,
}

impl AblationRow {
    pub fn label(&self) -> &'static str {
        self.variant.map_or("baseline", LossVariant::label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub fraction: f64,
    pub rows: Vec<AblationRow>,
    pub config: serde_json::Value,
}

impl AblationTable {
    pub fn row(&self, variant: Option<LossVariant>) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// The baseline plus every consistency variant, each continued from the
/// same per-seed baseline checkpoint.
pub fn ablate_losses(
    data: &Dataset,
    fraction: f64,
    seeds: usize,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<AblationTable> {
    if seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let pool = pool(workers)?;
    let baselines = pool.install(|| {
        (0..seeds)
            .into_par_iter()
            .map(|s| {
                let (split_seed, train_seed) = replicate_seeds(cfg.seed, s);
                let c = TrainConfig {
                    seed: train_seed,
                    ..cfg.clone()
                };
                let split = split_labels(data.train_frames().len(), fraction, split_seed)?;
                let b = train_baseline(data, &split, &c)?;
                let m = evaluate(data, &b.checkpoint.params)?.miou;
                Ok((split, c, b, m))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let cells: Vec<(LossVariant, usize)> = LossVariant::ALL
        .iter()
        .flat_map(|&v| (0..seeds).map(move |s| (v, s)))
        .collect();
    let scores = pool.install(|| {
        cells
            .par_iter()
            .map(|&(v, s)| {
                let (split, c, b, _) = &baselines[s];
                let c = TrainConfig {
                    variant: v,
                    ..c.clone()
                };
                let out = train_with_consistency(data, split, &b.checkpoint, &c)?;
                evaluate(data, &out.checkpoint.params).map(|m| m.miou)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base: Vec<f64> = baselines.iter().map(|b| b.3).collect();
    let mut rows = vec![AblationRow {
        variant: None,
        mean_miou: mean(&base),
        miou: base,
    }];
    for (i, &v) in LossVariant::ALL.iter().enumerate() {
        let m = scores[i * seeds..(i + 1) * seeds].to_vec();
        rows.push(AblationRow {
            variant: Some(v),
            mean_miou: mean(&m),
            miou: m,
        });
    }
    Ok(AblationTable {
        fraction,
        rows,
        config: serde_json::to_value(cfg)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassImprovement {
    pub class: usize,
    pub frequency: f64,
    pub baseline_iou: Option<f64>,
    pub consist_iou: Option<f64>,
    pub relative_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyAnalysis {
    pub classes: Vec<ClassImprovement>,
    /// Spearman correlation of frequency against relative improvement over
    /// classes with both IOUs defined.
    pub spearman: Option<f64>,
}

/// Relative per-class IOU change as a function of labeled class frequency.
pub fn frequency_analysis(base: &RunReport, consist: &RunReport) -> Result<FrequencyAnalysis> {
    frequency_analysis_parts(&base.per_class_iou, &consist.per_class_iou, &base.class_frequency)
}

pub fn frequency_analysis_parts(
    base: &[Option<f64>],
    consist: &[Option<f64>],
    frequency: &[f64],
) -> Result<FrequencyAnalysis> {
    if base.len() != consist.len() || base.len() != frequency.len() {
        return Err(Error::dim("reports cover different class counts"));
    }
    let classes: Vec<ClassImprovement> = (0..base.len())
        .map(|c| {
            let rel = match (base[c], consist[c]) {
                (Some(b), Some(k)) => Some((k - b) / b.max(RELATIVE_IMPROVEMENT_EPS)),
                _ => None,
            };
            ClassImprovement {
                class: c,
                frequency: frequency[c],
                baseline_iou: base[c],
                consist_iou: consist[c],
                relative_improvement: rel,
            }
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = classes
        .iter()
        .filter_map(|c| c.relative_improvement.map(|r| (c.frequency, r)))
        .unzip();
    Ok(FrequencyAnalysis {
        spearman: spearman(&xs, &ys),
        classes,
    })
}
