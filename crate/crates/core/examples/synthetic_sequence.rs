//! Renders a synthetic sequence with a distractor and a short occlusion and
//! writes it as a sequence directory (img/0001.png ..., groundtruth_rect.txt).
//!
//! cargo run --release --example synthetic_sequence -- /tmp/seq

use mdnet::io;
use mdnet::synth::{generate_sequence, Occlusion, SyntheticSequenceSpec};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_seq".into());
    let spec = SyntheticSequenceSpec {
        frames: 60,
        occlusions: vec![Occlusion { start: 25, len: 8 }],
        seed: 3,
        ..Default::default()
    };
    let seq = generate_sequence(&spec)?;

    for (t, gt) in seq.gt.iter().enumerate().step_by(10) {
        let hidden = if seq.occluders[t].is_some() { " (occluded)" } else { "" };
        println!("frame {:>2}: target {:.1},{:.1} {:.1}x{:.1}{hidden}", t + 1, gt.x, gt.y, gt.w, gt.h);
    }
    io::save_sequence(out.as_ref(), &seq.frames, &seq.gt)?;
    println!("wrote {} frames to {out}", seq.frames.len());
    Ok(())
}
