//! Offline multi-domain pretraining: one domain per iteration, cycling
//! through the domains, with only that domain's branch enabled.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{draw_training_samples, extract_patches, BoundingBox, Frame, SampleRequest};
use crate::model::{Mode, MDNet, Stage};
use crate::tensor::ops::{BACKGROUND, TARGET};
use crate::tensor::Tensor;

/// Stored sample boxes of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSamples {
    pub positives: Vec<BoundingBox>,
    pub negatives: Vec<BoundingBox>,
}

/// Offline per-frame sampling: 50 positives at IoU ≥ 0.7, 200 negatives at IoU ≤ 0.5.
pub const OFFLINE_SAMPLES: SampleRequest = SampleRequest {
    positives: 50,
    negatives: 200,
    pos_iou: 0.7,
    neg_iou: 0.5,
};

/// One training sequence with its cached sample boxes.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain_id: usize,
    frames: Vec<Frame>,
    gt: Vec<BoundingBox>,
    samples: Vec<FrameSamples>,
    request: SampleRequest,
}

impl DomainDataset {
    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn gt(&self) -> &[BoundingBox] {
        &self.gt
    }

    pub fn samples(&self) -> &[FrameSamples] {
        &self.samples
    }

    pub fn request(&self) -> &SampleRequest {
        &self.request
    }

    pub fn positive_count(&self) -> usize {
        self.samples.iter().map(|s| s.positives.len()).sum()
    }

    pub fn negative_count(&self) -> usize {
        self.samples.iter().map(|s| s.negatives.len()).sum()
    }

    /// Re-checks every cached box against the thresholds it was drawn with.
    pub fn audit(&self) -> Result<()> {
        for (t, (s, g)) in self.samples.iter().zip(&self.gt).enumerate() {
            if let Some(b) = s.positives.iter().find(|b| b.iou(g) < self.request.pos_iou) {
                return Err(Error::input(format!("frame {t}: positive {b:?} below threshold")));
            }
            if let Some(b) = s.negatives.iter().find(|b| b.iou(g) > self.request.neg_iou) {
                return Err(Error::input(format!("frame {t}: negative {b:?} above threshold")));
            }
        }
        Ok(())
    }

    /// A dataset from boxes chosen elsewhere, audited against `request`.
    pub fn from_parts(
        domain_id: usize,
        frames: Vec<Frame>,
        gt: Vec<BoundingBox>,
        samples: Vec<FrameSamples>,
        request: SampleRequest,
    ) -> Result<Self> {
        if frames.is_empty() || frames.len() != gt.len() || gt.len() != samples.len() {
            return Err(Error::input(format!(
                "domain {domain_id}: {} frames, {} annotations, {} sample sets",
                frames.len(),
                gt.len(),
                samples.len()
            )));
        }
        let data = Self {
            domain_id,
            frames,
            gt,
            samples,
            request,
        };
        data.audit()?;
        Ok(data)
    }

    /// Pools several datasets into one domain (single-branch training).
    pub fn merge(parts: &[DomainDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::config("nothing to merge"))?;
        let mut out = Self {
            domain_id: 0,
            frames: Vec::new(),
            gt: Vec::new(),
            samples: Vec::new(),
            request: first.request,
        };
        for p in parts {
            out.frames.extend(p.frames.iter().cloned());
            out.gt.extend_from_slice(&p.gt);
            out.samples.extend(p.samples.iter().cloned());
        }
        Ok(out)
    }
}

/// Draws and caches training boxes for every annotated frame.
pub fn build_domain_dataset(
    domain_id: usize,
    frames: Vec<Frame>,
    gt: Vec<BoundingBox>,
    request: &SampleRequest,
    rng: &mut impl Rng,
) -> Result<DomainDataset> {
    if frames.is_empty() || frames.len() != gt.len() {
        return Err(Error::input(format!(
            "domain {domain_id}: {} frames with {} annotations",
            frames.len(),
            gt.len()
        )));
    }
    let samples = frames
        .iter()
        .zip(&gt)
        .map(|(f, g)| {
            let (positives, negatives) = draw_training_samples(g, request, f.size(), rng)?;
            Ok(FrameSamples {
                positives,
                negatives,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DomainDataset {
        domain_id,
        frames,
        gt,
        samples,
        request: *request,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr_conv: f32,
    pub lr_fc: f32,
    pub pos_per_batch: usize,
    pub neg_per_batch: usize,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl PretrainConfig {
    /// Defaults with `100·K` iterations.
    pub fn for_domains(num_domains: usize) -> Self {
        Self {
            iterations: 100 * num_domains,
            lr_conv: 1e-4,
            lr_fc: 1e-3,
            pos_per_batch: 32,
            neg_per_batch: 96,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }

    pub fn validate(&self, num_domains: usize) -> Result<()> {
        if self.iterations < num_domains {
            return Err(Error::config(format!(
                "{} iterations cannot visit {num_domains} domains",
                self.iterations
            )));
        }
        if !(self.lr_conv > 0.0 && self.lr_fc > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.pos_per_batch + self.neg_per_batch == 0 {
            return Err(Error::config("empty minibatch"));
        }
        Ok(())
    }
}

/// Domain visited at 0-based iteration `k`.
pub fn active_domain(k: usize, num_domains: usize) -> usize {
    k % num_domains
}

/// Patches and labels for one minibatch: positives first, frames chosen
/// uniformly with replacement.
pub fn sample_minibatch(
    data: &DomainDataset,
    positives: usize,
    negatives: usize,
    input_size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let mut parts = Vec::with_capacity(positives + negatives);
    let mut labels = Vec::with_capacity(positives + negatives);
    for (count, label) in [(positives, TARGET), (negatives, BACKGROUND)] {
        for _ in 0..count {
            let t = rng.gen_range(0..data.frames.len());
            let pool = if label == TARGET {
                &data.samples[t].positives
            } else {
                &data.samples[t].negatives
            };
            if pool.is_empty() {
                return Err(Error::usage(format!("frame {t} has no cached samples")));
            }
            let b = pool[rng.gen_range(0..pool.len())];
            parts.push(extract_patches(&data.frames[t], &[b], input_size)?);
            labels.push(label);
        }
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok((Tensor::concat(&refs)?, labels))
}

fn prepare(net: &mut MDNet, cfg: &PretrainConfig, num_domains: usize) -> Result<()> {
    if net.mode() != Mode::Pretrain {
        return Err(Error::usage("pretraining needs a network in pretrain mode"));
    }
    if net.num_branches() != num_domains {
        return Err(Error::config(format!(
            "network has {} branches for {num_domains} domains",
            net.num_branches()
        )));
    }
    cfg.validate(num_domains)?;
    net.set_lr_multipliers(cfg.lr_conv / cfg.lr_fc, 1.0, 1.0)
}

/// Runs iteration `k` on domain `k mod K` and returns its loss.
pub fn pretrain_iteration(
    net: &mut MDNet,
    datasets: &[DomainDataset],
    k: usize,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<f32> {
    prepare(net, cfg, datasets.len())?;
    step(net, datasets, k, cfg, rng)
}

fn step(
    net: &mut MDNet,
    datasets: &[DomainDataset],
    k: usize,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<f32> {
    let d = active_domain(k, datasets.len());
    let input = net.config().input_size;
    let (patches, labels) =
        sample_minibatch(&datasets[d], cfg.pos_per_batch, cfg.neg_per_batch, input, rng)?;
    let loss = net.accumulate_gradients(&patches, Stage::Patches, &labels, d, rng)?;
    net.sgd_step(d, cfg.lr_fc, cfg.momentum, cfg.weight_decay)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("pretraining loss at iteration {k}")));
    }
    Ok(loss)
}

/// Multi-domain pretraining. Returns the per-iteration loss trace.
pub fn pretrain(
    net: &mut MDNet,
    datasets: &[DomainDataset],
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    prepare(net, cfg, datasets.len())?;
    (0..cfg.iterations)
        .map(|k| step(net, datasets, k, cfg, rng))
        .collect()
}

/// Single-branch baseline: all sequences pooled into one domain.
pub fn pretrain_single_domain(
    net: &mut MDNet,
    datasets: &[DomainDataset],
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    let merged = DomainDataset::merge(datasets)?;
    pretrain(net, std::slice::from_ref(&merged), cfg, rng)
}

/// Patches drawn from every dataset used to calibrate activation scales.
pub const CALIBRATION_PER_DOMAIN: usize = 64;

/// Rescales the shared layers of a fresh network to the width-compensated
/// pre-activation spread on patches from all datasets (a quarter positives).
/// Returns the per-layer gains.
pub fn calibrate(net: &mut MDNet, datasets: &[DomainDataset], rng: &mut impl Rng) -> Result<Vec<f64>> {
    let input = net.config().input_size;
    let mut parts = Vec::with_capacity(datasets.len());
    for d in datasets {
        let pos = CALIBRATION_PER_DOMAIN / 4;
        parts.push(sample_minibatch(d, pos, CALIBRATION_PER_DOMAIN - pos, input, rng)?.0);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let target = net.config().width_gain();
    net.calibrate_shared(&Tensor::concat(&refs)?, target)
}

/// Mean of the positive and negative hit rates over cached samples,
/// classifying by `f+ > 0.5`.
pub fn balanced_accuracy(net: &MDNet, branch: usize, data: &DomainDataset) -> Result<f64> {
    let input = net.config().input_size;
    let (mut pos_hit, mut pos_n, mut neg_hit, mut neg_n) = (0usize, 0usize, 0usize, 0usize);
    for (frame, s) in data.frames.iter().zip(&data.samples) {
        for (boxes, positive) in [(&s.positives, true), (&s.negatives, false)] {
            for chunk in boxes.chunks(128) {
                let patches = extract_patches(frame, chunk, input)?;
                let scores = net.positive_scores(&patches, Stage::Patches, branch)?;
                let hits = scores.iter().filter(|&&p| (p > 0.5) == positive).count();
                if positive {
                    pos_hit += hits;
                    pos_n += chunk.len();
                } else {
                    neg_hit += hits;
                    neg_n += chunk.len();
                }
            }
        }
    }
    let rate = |h: usize, n: usize| if n == 0 { 1.0 } else { h as f64 / n as f64 };
    Ok(0.5 * (rate(pos_hit, pos_n) + rate(neg_hit, neg_n)))
}
