//! Assembles online minibatches and shows that the kept negatives are the
//! highest-scoring ones in the pool.

use mdnet::model::{MDNet, MDNetConfig};
use mdnet::synth::{generate_sequence, SyntheticSequenceSpec};
use mdnet::tracker::{Tracker, TrackerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seq = generate_sequence(&SyntheticSequenceSpec { frames: 1, ..Default::default() })?;
    let net = MDNet::new(MDNetConfig::scaled(1, 1.0 / 16.0, false)?, &mut rng)?;
    let tracker = Tracker::init_first_frame(net, &seq.frames[0], &seq.gt[0], TrackerConfig::default(), &mut rng)?;

    for round in 0..5 {
        let batch = tracker.assemble_hard_minibatch(&[1], &[1], &mut rng)?;
        let lowest_kept = batch.selected_scores.iter().copied().fold(f32::INFINITY, f32::min);
        let highest_dropped = batch.rejected_scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mean_dropped = batch.rejected_scores.iter().sum::<f32>() / batch.rejected_scores.len() as f32;
        println!(
            "round {round}: {} positives, {} hard negatives; lowest kept f+ {lowest_kept:.4}, highest dropped {highest_dropped:.4}, mean dropped {mean_dropped:.4}",
            batch.positives.batch(),
            batch.negatives.batch()
        );
    }
    Ok(())
}
