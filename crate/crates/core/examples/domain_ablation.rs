//! Multi-domain vs single-domain pretraining on domains whose labels
//! conflict: the target texture of one domain is the distractor of the next.
//! A fresh classifier is then fitted on one held-out frame per domain and
//! scored on the rest.
//!
//! cargo run --release --example domain_ablation -- [seed]

use mdnet::geometry::{draw_positives, draw_training_samples};
use mdnet::model::{MDNet, MDNetConfig};
use mdnet::synth::{generate_sequence, SyntheticSequenceSpec, Texture};
use mdnet::tracker::{Tracker, TrackerConfig};
use mdnet::trainer::{
    balanced_accuracy, calibrate, pretrain, pretrain_single_domain, DomainDataset, FrameSamples,
    PretrainConfig, OFFLINE_SAMPLES,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn domain(
    d: usize,
    textures: &[Texture],
    frames: std::ops::Range<usize>,
    rng: &mut ChaCha8Rng,
) -> anyhow::Result<DomainDataset> {
    let s = generate_sequence(&SyntheticSequenceSpec {
        frames: 30,
        target_texture: Some(textures[d].clone()),
        distractor_texture: Some(textures[(d + 1) % textures.len()].clone()),
        seed: 40 + d as u64,
        ..Default::default()
    })?;
    let mut samples = Vec::new();
    for t in frames.clone() {
        let (positives, mut negatives) = draw_training_samples(&s.gt[t], &OFFLINE_SAMPLES, s.frames[t].size(), rng)?;
        let near = draw_positives(&s.distractors[t][0], 50, 0.7, rng)?;
        negatives.extend(near.into_iter().filter(|b| b.iou(&s.gt[t]) <= OFFLINE_SAMPLES.neg_iou));
        samples.push(FrameSamples { positives, negatives });
    }
    Ok(DomainDataset::from_parts(d, s.frames[frames.clone()].to_vec(), s.gt[frames].to_vec(), samples, OFFLINE_SAMPLES)?)
}

fn fresh_classifier_accuracy(net: &MDNet, held: &[DomainDataset], rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let cfg = TrackerConfig { bbox_regression: false, ..TrackerConfig::default() };
    let mut sum = 0.0;
    for h in held {
        let tracker = Tracker::init_first_frame(net.clone(), &h.frames()[0], &h.gt()[0], cfg.clone(), rng)?;
        let rest = DomainDataset::from_parts(0, h.frames()[1..].to_vec(), h.gt()[1..].to_vec(), h.samples()[1..].to_vec(), *h.request())?;
        sum += balanced_accuracy(tracker.net(), 0, &rest)?;
    }
    Ok(sum / held.len() as f64)
}

fn main() -> anyhow::Result<()> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let textures: Vec<Texture> = (0..3).map(|_| Texture::random(4, &mut rng)).collect();
    let mut train = Vec::new();
    let mut held = Vec::new();
    for d in 0..3 {
        train.push(domain(d, &textures, 0..20, &mut rng)?);
        held.push(domain(d, &textures, 20..30, &mut rng)?);
    }
    let cfg = PretrainConfig { iterations: 300, ..PretrainConfig::for_domains(3) };

    let mut multi = MDNet::new(MDNetConfig::scaled(3, 1.0 / 16.0, false)?, &mut ChaCha8Rng::seed_from_u64(seed + 1))?;
    calibrate(&mut multi, &train, &mut rng)?;
    pretrain(&mut multi, &train, &cfg, &mut rng)?;

    let mut single = MDNet::new(MDNetConfig::scaled(1, 1.0 / 16.0, false)?, &mut ChaCha8Rng::seed_from_u64(seed + 1))?;
    calibrate(&mut single, &train, &mut rng)?;
    let losses = pretrain_single_domain(&mut single, &train, &cfg, &mut rng)?;
    let tail = &losses[losses.len() - 50..];
    println!("single-domain final loss {:.4}", tail.iter().sum::<f32>() / tail.len() as f32);

    println!("multi-domain shared layers:  {:.3}", fresh_classifier_accuracy(&multi, &held, &mut rng)?);
    println!("single-domain shared layers: {:.3}", fresh_classifier_accuracy(&single, &held, &mut rng)?);
    Ok(())
}
