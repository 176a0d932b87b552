//! Tracks a synthetic sequence with an occlusion, printing per-frame scores,
//! the update each frame triggered, and the final curves.
//!
//! cargo run --release --example online_tracking -- [checkpoint]
//!
//! Without a checkpoint a small network is pretrained first.

use mdnet::eval::{evaluate, EvalGrid};
use mdnet::io;
use mdnet::model::{MDNet, MDNetConfig};
use mdnet::synth::{generate_sequence, Occlusion, SyntheticSequenceSpec};
use mdnet::tracker::{Tracker, TrackerConfig};
use mdnet::trainer::{build_domain_dataset, calibrate, pretrain, PretrainConfig, OFFLINE_SAMPLES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pretrained(rng: &mut ChaCha8Rng) -> anyhow::Result<MDNet> {
    let mut data = Vec::new();
    for d in 0..3 {
        let s = generate_sequence(&SyntheticSequenceSpec { frames: 20, seed: 100 + d as u64, ..Default::default() })?;
        data.push(build_domain_dataset(d, s.frames, s.gt, &OFFLINE_SAMPLES, rng)?);
    }
    let mut net = MDNet::new(MDNetConfig::desk(3), rng)?;
    calibrate(&mut net, &data, rng)?;
    pretrain(&mut net, &data, &PretrainConfig::for_domains(3), rng)?;
    Ok(net)
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = match std::env::args().nth(1) {
        Some(path) => io::load_checkpoint(path.as_ref())?,
        None => pretrained(&mut rng)?,
    };

    let seq = generate_sequence(&SyntheticSequenceSpec {
        occlusions: vec![Occlusion { start: 30, len: 10 }],
        seed: 1001,
        ..Default::default()
    })?;
    let mut tracker = Tracker::init_first_frame(net, &seq.frames[0], &seq.gt[0], TrackerConfig::default(), &mut rng)?;
    println!("first-frame accuracy {:.3}", tracker.stored_accuracy(1)?);

    let mut boxes = vec![seq.gt[0]];
    for (i, frame) in seq.frames.iter().enumerate().skip(1) {
        let out = tracker.step(frame, i + 1, &mut rng)?;
        println!(
            "frame {:>2}: f+ {:.3} iou {:.2} {:?}",
            i + 1,
            out.f_plus,
            out.reported.iou(&seq.gt[i]),
            out.action
        );
        boxes.push(out.reported);
    }
    let m = tracker.memory();
    println!("short-term frames {:?}", m.short_term());
    println!("long-term frames: {}", m.long_term().len());
    println!("{}", evaluate(&boxes, &seq.gt, &EvalGrid::default())?);
    Ok(())
}
