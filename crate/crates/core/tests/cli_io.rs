use std::fs;
use std::path::Path;

use mdnet::cli::cli_main;
use mdnet::io;
use mdnet::synth::{generate_sequence, SyntheticSequenceSpec};

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("mdnet").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_sequence(dir: &Path, frames: usize, seed: u64) {
    let seq = generate_sequence(&SyntheticSequenceSpec {
        frames,
        seed,
        ..Default::default()
    })
    .unwrap();
    io::save_sequence(dir, &seq.frames, &seq.gt).unwrap();
}

#[test]
fn sequence_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seq = generate_sequence(&SyntheticSequenceSpec {
        frames: 4,
        ..Default::default()
    })
    .unwrap();
    io::save_sequence(dir.path(), &seq.frames, &seq.gt).unwrap();
    let (frames, gt) = io::load_sequence(dir.path()).unwrap();
    assert_eq!(frames, seq.frames);
    assert_eq!(gt.len(), seq.gt.len());
    for (a, b) in gt.iter().zip(&seq.gt) {
        for (x, y) in [(a.x, b.x), (a.y, b.y), (a.w, b.w), (a.h, b.h)] {
            assert!((x - y).abs() <= 0.005 + 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn synth_pretrain_track_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = root.join("spec.txt");
    fs::write(&spec, "# short clip\nframes = 3\nseed = 9\nocclusions = 2:1\n").unwrap();
    let data = root.join("data");
    assert_eq!(run(&["synth", "--spec", s(&spec), "--out", s(&data.join("a"))]), 0);
    write_sequence(&data.join("b"), 3, 10);
    assert_eq!(io::list_frames(&data.join("a")).unwrap().len(), 3);

    let model = root.join("net.mdnc");
    let code = run(&["pretrain", "--data", s(&data), "--out", s(&model), "--iters", "4", "--scale", "0.0625"]);
    assert_eq!(code, 0);
    let net = io::load_checkpoint(&model).unwrap();
    assert_eq!(net.num_branches(), 2);
    let trace = fs::read_to_string(root.join("net.loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 5);

    let single = root.join("single");
    write_sequence(&single, 1, 11);
    let out = root.join("one.txt");
    assert_eq!(run(&["track", "--model", s(&model), "--seq", s(&single), "--out", s(&out)]), 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);

    let gt = single.join(io::GROUNDTRUTH_FILE);
    let curves = root.join("curves.csv");
    assert_eq!(run(&["eval", "--results", s(&gt), "--gt", s(&gt), "--out", s(&curves)]), 0);
    let csv = fs::read_to_string(&curves).unwrap();
    assert!(csv.starts_with("curve,threshold,value"));
    for line in csv.lines().skip(1) {
        let expected = if line.starts_with("success,1,") { "0.000000" } else { "1.000000" };
        assert!(line.ends_with(expected), "{line}");
    }
}

#[test]
fn gradcheck_subcommand_passes() {
    assert_eq!(run(&["gradcheck", "--ops", "relu,linear", "--shapes", "2"]), 0);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "1,2,3\n").unwrap();
    assert_eq!(run(&["eval", "--results", s(&bad), "--gt", s(&bad), "--out", s(&dir.path().join("o"))]), 4);

    let spec = dir.path().join("spec.txt");
    fs::write(&spec, "width = 10\n").unwrap();
    assert_eq!(run(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("x"))]), 3);

    let junk = dir.path().join("junk.mdnc");
    fs::write(&junk, b"nope").unwrap();
    let seq = dir.path().join("seq");
    write_sequence(&seq, 1, 1);
    assert_eq!(run(&["track", "--model", s(&junk), "--seq", s(&seq), "--out", s(&dir.path().join("r"))]), 6);
    assert_eq!(run(&["pretrain", "--data", s(dir.path()), "--out", s(&junk), "--iters", "1", "--scale", "2"]), 3);
}
