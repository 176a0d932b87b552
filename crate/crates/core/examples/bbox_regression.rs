//! Fits the box regressor on first-frame proposals and measures how much it
//! improves overlap on proposals from a later frame.

use mdnet::geometry::BoundingBox;
use mdnet::model::{MDNet, MDNetConfig};
use mdnet::regression::{apply_regressor, draw_regression_proposals, train_regressor, RegressionConfig};
use mdnet::synth::{generate_sequence, SyntheticSequenceSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_iou(boxes: &[BoundingBox], gt: &BoundingBox) -> f64 {
    boxes.iter().map(|b| b.iou(gt)).sum::<f64>() / boxes.len() as f64
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seq = generate_sequence(&SyntheticSequenceSpec { frames: 6, scale_amplitude: 0.0, ..Default::default() })?;
    let net = MDNet::new(MDNetConfig::desk(1), &mut rng)?;

    let reg = train_regressor(&net, &seq.frames[0], &seq.gt[0], &RegressionConfig::default(), &mut rng)?;
    println!("fitted on {} features per box, lambda {}", reg.dim(), reg.lambda());

    let (frame, gt) = (&seq.frames[5], &seq.gt[5]);
    let proposals = draw_regression_proposals(gt, 200, 0.6, &mut rng)?;
    let refined = proposals
        .iter()
        .map(|p| apply_regressor(&reg, &net, frame, p))
        .collect::<mdnet::Result<Vec<_>>>()?;
    println!("mean IoU before {:.3}, after {:.3}", mean_iou(&proposals, gt), mean_iou(&refined, gt));
    Ok(())
}
