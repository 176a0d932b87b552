//! Precision and success curves for a toy trajectory, plus the
//! reinitializing protocol on a tracker that freezes in place.

use mdnet::eval::{evaluate, run_with_reinit, EvalGrid, SequenceTracker};
use mdnet::geometry::{BoundingBox, Frame};
use mdnet::synth::{generate_sequence, SyntheticSequenceSpec};

/// Reports the start box forever.
struct Frozen(Option<BoundingBox>);

impl SequenceTracker for Frozen {
    fn start(&mut self, _: &Frame, gt: &BoundingBox) -> mdnet::Result<()> {
        self.0 = Some(*gt);
        Ok(())
    }

    fn next(&mut self, _: &Frame) -> mdnet::Result<BoundingBox> {
        Ok(self.0.expect("started"))
    }
}

fn main() -> anyhow::Result<()> {
    let gt: Vec<BoundingBox> = (0..4).map(|_| BoundingBox::new(50.0, 50.0, 20.0, 20.0)).collect::<Result<_, _>>()?;
    let results: Vec<BoundingBox> = [0.0, 5.0, 15.0, 60.0]
        .iter()
        .map(|dx| BoundingBox::new(50.0 + dx, 50.0, 20.0, 20.0))
        .collect::<Result<_, _>>()?;
    let curves = evaluate(&results, &gt, &EvalGrid::default())?;
    println!("toy trajectory: {curves}");
    for t in [0.0, 5.0, 10.0, 20.0, 50.0] {
        println!("  precision at {t:>2} px: {:.2}", curves.precision.at(t));
    }

    let seq = generate_sequence(&SyntheticSequenceSpec { frames: 60, velocity: (2.5, 1.5), ..Default::default() })?;
    let report = run_with_reinit(&mut Frozen(None), &seq.frames, &seq.gt)?;
    println!("frozen tracker: {} failures, accuracy {:.3}", report.failures, report.accuracy);
    print!("{}", curves.to_csv().lines().take(4).collect::<Vec<_>>().join("\n"));
    println!("\n...");
    Ok(())
}
