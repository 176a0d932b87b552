//! Pretrains the shared layers on three synthetic domains and reports
//! held-out accuracy of each domain branch.
//!
//! cargo run --release --example multi_domain_pretraining -- [iterations] [checkpoint]

use mdnet::io;
use mdnet::model::{MDNet, MDNetConfig};
use mdnet::synth::{generate_sequence, SyntheticSequenceSpec};
use mdnet::trainer::{balanced_accuracy, build_domain_dataset, calibrate, pretrain, PretrainConfig, OFFLINE_SAMPLES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    let checkpoint = args.next();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let (mut train, mut held) = (Vec::new(), Vec::new());
    for d in 0..3 {
        let s = generate_sequence(&SyntheticSequenceSpec { frames: 30, seed: 100 + d as u64, ..Default::default() })?;
        let (frames, gt) = (s.frames, s.gt);
        train.push(build_domain_dataset(d, frames[..20].to_vec(), gt[..20].to_vec(), &OFFLINE_SAMPLES, &mut rng)?);
        held.push(build_domain_dataset(d, frames[20..].to_vec(), gt[20..].to_vec(), &OFFLINE_SAMPLES, &mut rng)?);
    }

    let mut net = MDNet::new(MDNetConfig::desk(3), &mut rng)?;
    let gains = calibrate(&mut net, &train, &mut rng)?;
    println!("calibration gains {gains:.3?}");

    let cfg = PretrainConfig { iterations, ..PretrainConfig::for_domains(3) };
    let start = std::time::Instant::now();
    let losses = pretrain(&mut net, &train, &cfg, &mut rng)?;
    for (i, chunk) in losses.chunks(50).enumerate() {
        let mean = chunk.iter().sum::<f32>() / chunk.len() as f32;
        println!("iterations {:>4}..{:<4} loss {mean:.4}", i * 50, i * 50 + chunk.len());
    }
    println!("pretraining took {:.1?}", start.elapsed());

    for d in 0..3 {
        println!(
            "domain {d}: train accuracy {:.3}, held-out accuracy {:.3}",
            balanced_accuracy(&net, d, &train[d])?,
            balanced_accuracy(&net, d, &held[d])?
        );
    }
    if let Some(path) = checkpoint {
        io::save_checkpoint(&net, path.as_ref())?;
        println!("saved {path}");
    }
    Ok(())
}
