//! Candidate and training-sample generation around a target box.

use mdnet::geometry::{draw_candidates, draw_training_samples, BoundingBox, CandidateGenConfig, TargetState};
use mdnet::tracker::TrackerConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spread(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = BoundingBox::new(60.0, 40.0, 40.0, 30.0)?;
    let state = TargetState::from_box(&gt);
    let r = gt.mean_extent();

    let cfg = CandidateGenConfig { count: 20_000, ..Default::default() };
    for expansion in [1.0, 1.5, 3.0] {
        let c = draw_candidates(&state, &cfg, expansion, &mut rng);
        println!(
            "expansion {expansion}: x std {:.2} (0.3r = {:.2}), scale-exponent std {:.3}",
            spread(c.iter().map(|s| s.cx)),
            0.3 * r * expansion,
            spread(c.iter().map(|s| s.s)),
        );
    }

    let req = TrackerConfig::default().first_frame;
    let (pos, neg) = draw_training_samples(&gt, &req, (200, 160), &mut rng)?;
    let min_pos = pos.iter().map(|b| b.iou(&gt)).fold(1.0, f64::min);
    let max_neg = neg.iter().map(|b| b.iou(&gt)).fold(0.0, f64::max);
    println!("{} positives, lowest IoU {min_pos:.3}", pos.len());
    println!("{} negatives, highest IoU {max_neg:.3}", neg.len());
    Ok(())
}
