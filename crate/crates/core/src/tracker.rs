//! Online tracking: first-frame fine-tuning, candidate scoring, sample
//! memory with short- and long-term frame sets, hard minibatch mining and
//! bounding-box refinement.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::SequenceTracker;
use crate::geometry::{
    draw_candidates, draw_training_samples, extract_patches, BoundingBox, CandidateGenConfig,
    Frame, SampleRequest, TargetState,
};
use crate::model::{LayerId, MDNet, Mode, Stage};
use crate::regression::{train_regressor, RegressionConfig, RegressorWeights};
use crate::tensor::ops::{BACKGROUND, TARGET};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub candidates: CandidateGenConfig,
    /// Capacity of the short-term frame set.
    pub tau_s: usize,
    /// Capacity of the long-term frame set.
    pub tau_l: usize,
    pub score_threshold: f32,
    pub init_iters: usize,
    pub update_iters: usize,
    pub lr_fc45_init: f32,
    pub lr_fc6_init: f32,
    /// Online updates use the initial rates times this factor.
    pub update_lr_factor: f32,
    pub m_plus: usize,
    pub m_hard: usize,
    pub m_neg_pool: usize,
    pub first_frame: SampleRequest,
    pub frame: SampleRequest,
    pub long_update_period: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Translation spread multiplier applied after each failed frame.
    pub expansion_factor: f64,
    pub max_expansion: f64,
    /// Keep drawing candidates around the last confident state while the
    /// score stays at or below the threshold, instead of following the argmax.
    pub hold_on_failure: bool,
    pub regression: RegressionConfig,
    pub bbox_regression: bool,
    /// Keep raw patches instead of conv3 features in the sample store.
    pub store_patches: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            candidates: CandidateGenConfig::default(),
            tau_s: 20,
            tau_l: 100,
            score_threshold: 0.5,
            init_iters: 30,
            update_iters: 10,
            lr_fc45_init: 1e-4,
            lr_fc6_init: 1e-3,
            update_lr_factor: 3.0,
            m_plus: 32,
            m_hard: 96,
            m_neg_pool: 1024,
            first_frame: SampleRequest {
                positives: 500,
                negatives: 5000,
                pos_iou: 0.7,
                neg_iou: 0.3,
            },
            frame: SampleRequest {
                positives: 50,
                negatives: 200,
                pos_iou: 0.7,
                neg_iou: 0.3,
            },
            long_update_period: 10,
            momentum: 0.9,
            weight_decay: 5e-4,
            expansion_factor: 1.5,
            max_expansion: 3.0,
            hold_on_failure: true,
            regression: RegressionConfig::default(),
            bbox_regression: true,
            store_patches: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.m_hard <= self.m_neg_pool, "m_hard must not exceed m_neg_pool"),
            (self.tau_s <= self.tau_l, "tau_s must not exceed tau_l"),
            (
                self.tau_s > 0
                    && self.m_plus > 0
                    && self.m_hard > 0
                    && self.candidates.count > 0
                    && self.long_update_period > 0
                    && self.first_frame.positives > 0
                    && self.first_frame.negatives > 0
                    && self.frame.positives > 0
                    && self.frame.negatives > 0,
                "counts must be positive",
            ),
            (
                self.lr_fc45_init > 0.0 && self.lr_fc6_init > 0.0 && self.update_lr_factor > 0.0,
                "learning rates must be positive",
            ),
            (self.expansion_factor >= 1.0 && self.max_expansion >= 1.0, "expansion must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        Ok(())
    }
}

/// Stored training samples of one frame.
#[derive(Debug, Clone)]
pub struct FrameSampleSet {
    pub frame_index: usize,
    pub positives: Tensor,
    pub negatives: Tensor,
}

/// The short- and long-term frame-index sets. Each is capped independently
/// and drops its minimum index on overflow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMemory {
    tau_s: usize,
    tau_l: usize,
    short: BTreeSet<usize>,
    long: BTreeSet<usize>,
}

impl FrameMemory {
    pub fn new(tau_s: usize, tau_l: usize, first: usize) -> Self {
        Self {
            tau_s,
            tau_l,
            short: BTreeSet::from([first]),
            long: BTreeSet::from([first]),
        }
    }

    pub fn short_term(&self) -> &BTreeSet<usize> {
        &self.short
    }

    pub fn long_term(&self) -> &BTreeSet<usize> {
        &self.long
    }

    /// Adds `t` to both sets and returns indices that left both.
    pub fn push(&mut self, t: usize) -> Vec<usize> {
        self.short.insert(t);
        self.long.insert(t);
        let mut dropped = Vec::new();
        for (set, cap) in [(&mut self.short, self.tau_s), (&mut self.long, self.tau_l)] {
            while set.len() > cap {
                dropped.extend(set.pop_first());
            }
        }
        dropped.retain(|v| !self.short.contains(v) && !self.long.contains(v));
        dropped
    }
}

/// What a frame triggered after its estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameAction {
    /// Score above threshold: samples stored, no update.
    Collected,
    /// Score above threshold on a long-term period frame.
    CollectedAndLongTermUpdate,
    ShortTermUpdate,
    LongTermUpdate,
    /// Score exactly at the threshold on a non-period frame.
    None,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reported: BoundingBox,
    pub estimate: TargetState,
    pub f_plus: f32,
    pub action: FrameAction,
}

/// Result of scoring one frame's candidates.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub state: TargetState,
    pub f_plus: f32,
    pub candidate_index: usize,
    /// Flattened conv3 feature of the chosen candidate.
    pub feature: Vec<f64>,
}

/// A mined minibatch with the selection-time scores of the negative pool.
#[derive(Debug, Clone)]
pub struct HardMinibatch {
    pub positives: Tensor,
    pub negatives: Tensor,
    pub selected_scores: Vec<f32>,
    pub rejected_scores: Vec<f32>,
}

/// Index of the first maximum.
pub fn argmax_first(scores: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Indices of the `k` highest scores, ties resolved by position.
pub fn top_k_stable(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Debug, Clone)]
pub struct Tracker {
    net: MDNet,
    cfg: TrackerConfig,
    memory: FrameMemory,
    store: BTreeMap<usize, FrameSampleSet>,
    current: TargetState,
    regressor: Option<RegressorWeights>,
    last_score: f32,
    expansion: f64,
    last_frame: usize,
}

impl Tracker {
    /// First-frame setup: swaps in a fresh branch, stores frame-1 samples,
    /// fits the box regressor and fine-tunes fc4–fc6.
    pub fn init_first_frame(
        mut net: MDNet,
        frame: &Frame,
        gt: &BoundingBox,
        cfg: TrackerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if gt.w <= 1.0 || gt.h <= 1.0 {
            return Err(Error::input(format!("degenerate initial box {gt:?}")));
        }
        if net.mode() != Mode::Pretrain {
            return Err(Error::usage("initialization needs a pretrained (multi-branch) network"));
        }
        net.replace_branches(rng)?;
        net.set_trainable(&LayerId::FULLY_CONNECTED);
        let regressor = if cfg.bbox_regression {
            Some(train_regressor(&net, frame, gt, &cfg.regression, rng)?)
        } else {
            None
        };
        let mut tracker = Self {
            net,
            memory: FrameMemory::new(cfg.tau_s, cfg.tau_l, 1),
            store: BTreeMap::new(),
            current: TargetState::from_box(gt),
            regressor,
            last_score: 1.0,
            expansion: 1.0,
            last_frame: 1,
            cfg,
        };
        let set = tracker.collect_samples(frame, gt, 1, &tracker.cfg.first_frame.clone(), rng)?;
        tracker.store.insert(1, set);
        let lr = tracker.cfg.lr_fc6_init;
        tracker.fine_tune(&[1], &[1], tracker.cfg.init_iters, lr, rng)?;
        Ok(tracker)
    }

    pub fn net(&self) -> &MDNet {
        &self.net
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &FrameMemory {
        &self.memory
    }

    pub fn stored_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.store.keys().copied()
    }

    pub fn sample_set(&self, t: usize) -> Option<&FrameSampleSet> {
        self.store.get(&t)
    }

    /// Center of the next frame's candidate draw.
    pub fn current(&self) -> &TargetState {
        &self.current
    }

    pub fn last_score(&self) -> f32 {
        self.last_score
    }

    pub fn search_expansion(&self) -> f64 {
        self.expansion
    }

    pub fn regressor(&self) -> Option<&RegressorWeights> {
        self.regressor.as_ref()
    }

    /// Balanced eval-mode accuracy on the stored samples of frame `t`.
    pub fn stored_accuracy(&self, t: usize) -> Result<f64> {
        let set = self
            .store
            .get(&t)
            .ok_or_else(|| Error::usage(format!("no stored samples for frame {t}")))?;
        let rate = |x: &Tensor, positive: bool| -> Result<f64> {
            let mut hits = 0;
            for start in (0..x.batch()).step_by(512) {
                let idx: Vec<usize> = (start..(start + 512).min(x.batch())).collect();
                let scores = self.net.positive_scores(&x.select(&idx), self.stage(), 0)?;
                hits += scores.iter().filter(|&&p| (p > 0.5) == positive).count();
            }
            Ok(hits as f64 / x.batch() as f64)
        };
        Ok(0.5 * (rate(&set.positives, true)? + rate(&set.negatives, false)?))
    }

    fn stage(&self) -> Stage {
        if self.cfg.store_patches {
            Stage::Patches
        } else {
            Stage::Conv3
        }
    }

    /// Network inputs for boxes in the stored representation.
    fn encode_boxes(&self, frame: &Frame, boxes: &[BoundingBox]) -> Result<Tensor> {
        let size = self.net.config().input_size;
        let mut parts = Vec::new();
        for chunk in boxes.chunks(256) {
            let patches = extract_patches(frame, chunk, size)?;
            parts.push(if self.cfg.store_patches {
                patches
            } else {
                self.net.forward_conv3(&patches)?
            });
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs)
    }

    fn collect_samples(
        &self,
        frame: &Frame,
        around: &BoundingBox,
        t: usize,
        req: &SampleRequest,
        rng: &mut impl Rng,
    ) -> Result<FrameSampleSet> {
        let (pos, neg) = draw_training_samples(around, req, frame.size(), rng)?;
        Ok(FrameSampleSet {
            frame_index: t,
            positives: self.encode_boxes(frame, &pos)?,
            negatives: self.encode_boxes(frame, &neg)?,
        })
    }

    /// Scores `N` candidates around the current state and returns the first
    /// highest-scoring one.
    pub fn estimate_target(&self, frame: &Frame, rng: &mut impl Rng) -> Result<Estimate> {
        let candidates = draw_candidates(&self.current, &self.cfg.candidates, self.expansion, rng);
        let boxes: Vec<BoundingBox> = candidates.iter().map(TargetState::bbox).collect();
        let size = self.net.config().input_size;
        let patches = extract_patches(frame, &boxes, size)?;
        let conv3 = self.net.forward_conv3(&patches)?;
        let scores = self.net.positive_scores(&conv3, Stage::Conv3, 0)?;
        let best = argmax_first(&scores).expect("at least one candidate");
        Ok(Estimate {
            state: candidates[best],
            f_plus: scores[best],
            candidate_index: best,
            feature: conv3.item(best).iter().map(|&v| v as f64).collect(),
        })
    }

    /// `m_plus` positives from the positive frames, and the `m_hard`
    /// highest-scoring negatives out of `m_neg_pool` drawn from the negative frames.
    pub fn assemble_hard_minibatch(
        &self,
        pos_frames: &[usize],
        neg_frames: &[usize],
        rng: &mut impl Rng,
    ) -> Result<HardMinibatch> {
        let positives = self.draw_pooled(pos_frames, self.cfg.m_plus, true, rng)?;
        let pool = self.draw_pooled(neg_frames, self.cfg.m_neg_pool, false, rng)?;
        let scores = self.net.positive_scores(&pool, self.stage(), 0)?;
        let chosen = top_k_stable(&scores, self.cfg.m_hard);
        let mut is_chosen = vec![false; scores.len()];
        for &i in &chosen {
            is_chosen[i] = true;
        }
        let rejected_scores = scores
            .iter()
            .zip(&is_chosen)
            .filter(|(_, &c)| !c)
            .map(|(&s, _)| s)
            .collect();
        Ok(HardMinibatch {
            positives,
            negatives: pool.select(&chosen),
            selected_scores: chosen.iter().map(|&i| scores[i]).collect(),
            rejected_scores,
        })
    }

    /// Uniform draws from the union of stored samples of the given frames,
    /// without replacement while the union is large enough.
    fn draw_pooled(
        &self,
        frames: &[usize],
        count: usize,
        positive: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let sets: Vec<&Tensor> = frames
            .iter()
            .filter_map(|t| self.store.get(t))
            .map(|s| if positive { &s.positives } else { &s.negatives })
            .collect();
        let total: usize = sets.iter().map(|s| s.batch()).sum();
        if total == 0 {
            return Err(Error::usage(format!(
                "no stored {} samples for frames {frames:?}",
                if positive { "positive" } else { "negative" }
            )));
        }
        let flat: Vec<usize> = if total >= count {
            sample_indices(rng, total, count).into_vec()
        } else {
            (0..count).map(|_| rng.gen_range(0..total)).collect()
        };
        let item = sets[0].item_len();
        let mut data = Vec::with_capacity(count * item);
        for mut i in flat {
            let mut k = 0;
            while i >= sets[k].batch() {
                i -= sets[k].batch();
                k += 1;
            }
            data.extend_from_slice(sets[k].item(i));
        }
        let mut dims = sets[0].dims().to_vec();
        dims[0] = count;
        Tensor::new(&dims, data)
    }

    /// `iters` SGD iterations on freshly mined minibatches. `base_lr` is the
    /// fc6 rate; fc4–5 run at the configured fraction of it.
    fn fine_tune(
        &mut self,
        pos_frames: &[usize],
        neg_frames: &[usize],
        iters: usize,
        base_lr: f32,
        rng: &mut impl Rng,
    ) -> Result<Vec<f32>> {
        let fc45 = self.cfg.lr_fc45_init / self.cfg.lr_fc6_init;
        // conv multiplier is irrelevant while the conv layers are frozen
        self.net.set_lr_multipliers(fc45, fc45, 1.0)?;
        let stage = self.stage();
        let mut trace = Vec::with_capacity(iters);
        for _ in 0..iters {
            let batch = self.assemble_hard_minibatch(pos_frames, neg_frames, rng)?;
            let input = Tensor::concat(&[&batch.positives, &batch.negatives])?;
            let mut labels = vec![TARGET; batch.positives.batch()];
            labels.resize(input.batch(), BACKGROUND);
            let loss = self.net.accumulate_gradients(&input, stage, &labels, 0, rng)?;
            self.net
                .sgd_step(0, base_lr, self.cfg.momentum, self.cfg.weight_decay)?;
            trace.push(loss);
        }
        Ok(trace)
    }

    /// Online update on the given frame sets at the boosted learning rate.
    /// Returns the per-iteration loss.
    pub fn update_network(
        &mut self,
        pos_frames: &[usize],
        neg_frames: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Vec<f32>> {
        let lr = self.cfg.lr_fc6_init * self.cfg.update_lr_factor;
        self.fine_tune(pos_frames, neg_frames, self.cfg.update_iters, lr, rng)
    }

    fn short_term_update(&mut self, rng: &mut impl Rng) -> Result<()> {
        let s: Vec<usize> = self.memory.short.iter().copied().collect();
        self.update_network(&s, &s, rng).map(drop)
    }

    fn long_term_update(&mut self, rng: &mut impl Rng) -> Result<()> {
        let l: Vec<usize> = self.memory.long.iter().copied().collect();
        let s: Vec<usize> = self.memory.short.iter().copied().collect();
        self.update_network(&l, &s, rng).map(drop)
    }

    /// Everything that follows the estimate of frame `t`: sample
    /// collection, frame-set bookkeeping, updates and box refinement.
    ///
    /// `feature` is the estimate's conv3 feature, used for refinement.
    pub fn after_estimate(
        &mut self,
        frame: &Frame,
        t: usize,
        estimate: TargetState,
        f_plus: f32,
        feature: Option<&[f64]>,
        rng: &mut impl Rng,
    ) -> Result<StepOutcome> {
        if t <= self.last_frame {
            return Err(Error::usage(format!(
                "frame {t} does not follow frame {}",
                self.last_frame
            )));
        }
        let threshold = self.cfg.score_threshold;
        let est_box = estimate.bbox();
        let mut reported = est_box;
        let success = f_plus > threshold;
        if success {
            let set = self.collect_samples(frame, &est_box, t, &self.cfg.frame.clone(), rng)?;
            self.store.insert(t, set);
            for gone in self.memory.push(t) {
                self.store.remove(&gone);
            }
            if let Some(reg) = &self.regressor {
                reported = match feature {
                    Some(f) => reg.refine(f, &est_box)?,
                    None => {
                        let f = crate::regression::conv3_features(&self.net, frame, &[est_box])?;
                        reg.refine(&f, &est_box)?
                    }
                };
            }
            self.expansion = 1.0;
        }
        let action = if f_plus < threshold {
            self.short_term_update(rng)?;
            self.expansion = (self.expansion * self.cfg.expansion_factor).min(self.cfg.max_expansion);
            FrameAction::ShortTermUpdate
        } else if t % self.cfg.long_update_period == 0 {
            self.long_term_update(rng)?;
            if success {
                FrameAction::CollectedAndLongTermUpdate
            } else {
                FrameAction::LongTermUpdate
            }
        } else if success {
            FrameAction::Collected
        } else {
            FrameAction::None
        };
        if success || !self.cfg.hold_on_failure {
            self.current = estimate;
        }
        self.last_score = f_plus;
        self.last_frame = t;
        Ok(StepOutcome {
            reported,
            estimate,
            f_plus,
            action,
        })
    }

    /// Processes frame `t` (1-based, `t ≥ 2`).
    pub fn step(&mut self, frame: &Frame, t: usize, rng: &mut impl Rng) -> Result<StepOutcome> {
        if t < 2 {
            return Err(Error::usage("frame 1 is the initialization frame"));
        }
        let est = self.estimate_target(frame, rng)?;
        self.after_estimate(frame, t, est.state, est.f_plus, Some(&est.feature), rng)
    }
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub boxes: Vec<BoundingBox>,
    pub scores: Vec<f32>,
}

/// Tracks a whole sequence from the first-frame box. Frame 1 reports the box itself.
pub fn track_sequence(
    net: &MDNet,
    frames: &[Frame],
    first: &BoundingBox,
    cfg: &TrackerConfig,
    rng: &mut impl Rng,
) -> Result<TrackResult> {
    let Some((head, rest)) = frames.split_first() else {
        return Err(Error::input("empty sequence"));
    };
    let mut tracker = Tracker::init_first_frame(net.clone(), head, first, cfg.clone(), rng)?;
    let mut out = TrackResult {
        boxes: vec![*first],
        scores: vec![1.0],
    };
    for (i, frame) in rest.iter().enumerate() {
        let o = tracker.step(frame, i + 2, rng)?;
        out.boxes.push(o.reported);
        out.scores.push(o.f_plus);
    }
    Ok(out)
}

/// Restartable adapter for the reinitializing evaluation harness.
pub struct OnlineTracker<R: Rng> {
    pretrained: MDNet,
    cfg: TrackerConfig,
    rng: R,
    active: Option<(Tracker, usize)>,
}

impl<R: Rng> OnlineTracker<R> {
    pub fn new(pretrained: MDNet, cfg: TrackerConfig, rng: R) -> Self {
        Self {
            pretrained,
            cfg,
            rng,
            active: None,
        }
    }
}

impl<R: Rng> SequenceTracker for OnlineTracker<R> {
    fn start(&mut self, frame: &Frame, gt: &BoundingBox) -> Result<()> {
        let t = Tracker::init_first_frame(
            self.pretrained.clone(),
            frame,
            gt,
            self.cfg.clone(),
            &mut self.rng,
        )?;
        self.active = Some((t, 1));
        Ok(())
    }

    fn next(&mut self, frame: &Frame) -> Result<BoundingBox> {
        let (tracker, t) = self
            .active
            .as_mut()
            .ok_or_else(|| Error::usage("tracker used before start"))?;
        *t += 1;
        Ok(tracker.step(frame, *t, &mut self.rng)?.reported)
    }
}
