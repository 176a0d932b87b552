//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --release --test acceptance -- 3 7`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mdnet::eval::{evaluate, precision_curve, success_curve_and_auc, EvalGrid};
use mdnet::geometry::{
    draw_candidates, draw_positives, draw_training_samples, BoundingBox, CandidateGenConfig,
    Frame, SampleRequest, TargetState,
};
use mdnet::io;
use mdnet::model::{MDNet, MDNetConfig};
use mdnet::regression::{decode, encode, Deltas, RegressorWeights};
use mdnet::synth::{generate_sequence, Occlusion, SyntheticSequenceSpec, Texture};
use mdnet::tensor::gradcheck::{run_suite, OpKind, DEFAULT_TOLERANCE};
use mdnet::tensor::Tensor;
use mdnet::tracker::{track_sequence, FrameAction, Tracker, TrackerConfig};
use mdnet::trainer::{
    balanced_accuracy, build_domain_dataset, calibrate, pretrain, pretrain_iteration,
    pretrain_single_domain, DomainDataset, FrameSamples, PretrainConfig, OFFLINE_SAMPLES,
};

type Criterion = fn() -> Result<String>;

fn main() -> ExitCode {
    let criteria: [(usize, &str, Criterion); 12] = [
        (1, "gradient suite", gradient_suite),
        (2, "paper geometry", paper_geometry),
        (3, "branch exclusivity", branch_exclusivity),
        (4, "multi-domain learning", multi_domain_learning),
        (5, "multi- vs single-domain ablation", ablation_direction),
        (6, "hard-negative dominance", hard_mining_dominance),
        (7, "sampling statistics", sampling_statistics),
        (8, "frame-set bookkeeping", tracker_bookkeeping),
        (9, "synthetic tracking", synthetic_tracking),
        (10, "box regression oracle", regression_oracle),
        (11, "evaluation goldens", eval_goldens),
        (12, "reproducibility", reproducibility),
    ];
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} ({secs:.1}s)"),
            Err(e) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {e:#} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bits(groups: &[&mdnet::tensor::ParamGroup]) -> Vec<u32> {
    groups
        .iter()
        .flat_map(|g| g.weights.data().iter().chain(g.bias.data()).map(|v| v.to_bits()))
        .collect()
}

/// Synthetic domains with default appearance, split into training and held-out frames.
fn synthetic_domains(
    count: usize,
    train_frames: usize,
    held_frames: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DomainDataset>, Vec<DomainDataset>)> {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for d in 0..count {
        let spec = SyntheticSequenceSpec {
            frames: train_frames + held_frames,
            seed: seed + d as u64,
            ..Default::default()
        };
        let s = generate_sequence(&spec)?;
        let (tf, hf) = s.frames.split_at(train_frames);
        let (tg, hg) = s.gt.split_at(train_frames);
        train.push(build_domain_dataset(d, tf.to_vec(), tg.to_vec(), &OFFLINE_SAMPLES, rng)?);
        if held_frames > 0 {
            held.push(build_domain_dataset(d, hf.to_vec(), hg.to_vec(), &OFFLINE_SAMPLES, rng)?);
        }
    }
    Ok((train, held))
}

fn gradient_suite() -> Result<String> {
    let start = Instant::now();
    let reports = run_suite(&OpKind::DIFFERENTIABLE, 5, 11)?;
    let elapsed = start.elapsed();
    for kind in OpKind::DIFFERENTIABLE {
        let n = reports.iter().filter(|r| r.op == kind).count();
        ensure!(n >= 5, "{} checked on {n} shapes", kind.name());
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .expect("reports");
    ensure!(worst.passed(DEFAULT_TOLERANCE), "worst check: {worst}");
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "{} checks, worst relative error {:.2e} ({})",
        reports.len(),
        worst.max_relative_error,
        worst.op.name()
    ))
}

fn paper_geometry() -> Result<String> {
    let net = MDNet::new(MDNetConfig::paper(1), &mut rng(2))?;
    let x = Tensor::<f32>::zeros(&[2, 3, 107, 107]);
    let y = net.forward_conv3(&x)?;
    ensure!(y.dims() == [2, 512, 3, 3], "conv3 output {:?}", y.dims());
    Ok(format!("conv3 {:?} from 107x107 input", &y.dims()[1..]))
}

fn branch_exclusivity() -> Result<String> {
    let mut r = rng(3);
    let (data, _) = synthetic_domains(3, 4, 0, 300, &mut r)?;
    let mut net = MDNet::new(MDNetConfig::scaled(3, 1.0 / 16.0, false)?, &mut r)?;
    let cfg = PretrainConfig {
        iterations: 300,
        pos_per_batch: 4,
        neg_per_batch: 12,
        ..PretrainConfig::for_domains(3)
    };
    for k in 0..cfg.iterations {
        let branches_before: Vec<Vec<u32>> = net.branches().iter().map(|b| bits(&[b])).collect();
        let shared_before = bits(&net.shared().collect::<Vec<_>>());
        pretrain_iteration(&mut net, &data, k, &cfg, &mut r)?;
        let active = k % 3;
        for (i, before) in branches_before.iter().enumerate() {
            let same = *before == bits(&[&net.branches()[i]]);
            if i == active {
                ensure!(!same, "iteration {k}: active branch {i} unchanged");
            } else {
                ensure!(same, "iteration {k}: inactive branch {i} changed");
            }
        }
        ensure!(
            shared_before != bits(&net.shared().collect::<Vec<_>>()),
            "iteration {k}: shared layers unchanged"
        );
    }
    Ok(format!("{} iterations checked", cfg.iterations))
}

fn multi_domain_learning() -> Result<String> {
    let start = Instant::now();
    let mut r = rng(7);
    let (train, held) = synthetic_domains(3, 20, 10, 100, &mut r)?;
    let mut net = MDNet::new(MDNetConfig::desk(3), &mut r)?;
    calibrate(&mut net, &train, &mut r)?;
    let cfg = PretrainConfig {
        iterations: 300,
        ..PretrainConfig::for_domains(3)
    };
    pretrain(&mut net, &train, &cfg, &mut r)?;
    let acc: Vec<f64> = (0..3)
        .map(|d| balanced_accuracy(&net, d, &held[d]))
        .collect::<mdnet::Result<_>>()?;
    let elapsed = start.elapsed();
    let shown: Vec<String> = acc.iter().map(|a| format!("{a:.3}")).collect();
    ensure!(acc.iter().all(|&a| a >= 0.95), "held-out accuracy [{}]", shown.join(", "));
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!("held-out accuracy [{}]", shown.join(", ")))
}

/// Domains where the target texture of domain `i` is the distractor of
/// domain `i - 1`. Distractor boxes are added as explicit negatives.
fn conflict_domain(
    d: usize,
    textures: &[Texture],
    frames: std::ops::Range<usize>,
    seed: u64,
    r: &mut ChaCha8Rng,
) -> Result<DomainDataset> {
    let spec = SyntheticSequenceSpec {
        frames: 30,
        target_texture: Some(textures[d].clone()),
        distractor_texture: Some(textures[(d + 1) % textures.len()].clone()),
        seed,
        ..Default::default()
    };
    let s = generate_sequence(&spec)?;
    let mut samples = Vec::new();
    for t in frames.clone() {
        let (positives, mut negatives) = draw_training_samples(&s.gt[t], &OFFLINE_SAMPLES, s.frames[t].size(), r)?;
        let near = draw_positives(&s.distractors[t][0], 50, 0.7, r)?;
        negatives.extend(near.into_iter().filter(|b| b.iou(&s.gt[t]) <= OFFLINE_SAMPLES.neg_iou));
        samples.push(FrameSamples { positives, negatives });
    }
    Ok(DomainDataset::from_parts(
        d,
        s.frames[frames.clone()].to_vec(),
        s.gt[frames].to_vec(),
        samples,
        OFFLINE_SAMPLES,
    )?)
}

fn fresh_branch_accuracy(net: &MDNet, held: &[DomainDataset], r: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = TrackerConfig {
        bbox_regression: false,
        first_frame: SampleRequest {
            positives: 200,
            negatives: 2000,
            ..TrackerConfig::default().first_frame
        },
        ..TrackerConfig::default()
    };
    let mut total = 0.0;
    for h in held {
        let tracker = Tracker::init_first_frame(net.clone(), &h.frames()[0], &h.gt()[0], cfg.clone(), r)?;
        let rest = DomainDataset::from_parts(
            0,
            h.frames()[1..].to_vec(),
            h.gt()[1..].to_vec(),
            h.samples()[1..].to_vec(),
            *h.request(),
        )?;
        total += balanced_accuracy(tracker.net(), 0, &rest)?;
    }
    Ok(total / held.len() as f64)
}

fn ablation_direction() -> Result<String> {
    let seeds = 5;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..seeds {
        let mut r = rng(500 + seed);
        let textures: Vec<Texture> = (0..3).map(|_| Texture::random(4, &mut r)).collect();
        let mut train = Vec::new();
        let mut held = Vec::new();
        for d in 0..3 {
            let s = 5000 + 10 * seed + d as u64;
            train.push(conflict_domain(d, &textures, 0..20, s, &mut r)?);
            held.push(conflict_domain(d, &textures, 20..30, s, &mut r)?);
        }
        let config = |k| MDNetConfig::scaled(k, 1.0 / 16.0, false);
        let cfg = PretrainConfig {
            iterations: 300,
            pos_per_batch: 16,
            neg_per_batch: 48,
            ..PretrainConfig::for_domains(3)
        };
        let mut md = MDNet::new(config(3)?, &mut rng(900 + seed))?;
        calibrate(&mut md, &train, &mut r)?;
        pretrain(&mut md, &train, &cfg, &mut r)?;
        let mut sd = MDNet::new(config(1)?, &mut rng(900 + seed))?;
        calibrate(&mut sd, &train, &mut r)?;
        pretrain_single_domain(&mut sd, &train, &cfg, &mut r)?;
        let md_acc = fresh_branch_accuracy(&md, &held, &mut r)?;
        let sd_acc = fresh_branch_accuracy(&sd, &held, &mut r)?;
        if md_acc > sd_acc {
            wins += 1;
        }
        lines.push(format!("{md_acc:.3}/{sd_acc:.3}"));
    }
    let detail = format!("multi/single accuracy per seed [{}]", lines.join(", "));
    ensure!(wins >= 4, "multi-domain won {wins}/{seeds}: {detail}");
    Ok(format!("multi-domain won {wins}/{seeds}; {detail}"))
}

fn small_tracker_config() -> TrackerConfig {
    TrackerConfig {
        init_iters: 2,
        update_iters: 1,
        m_plus: 8,
        m_hard: 24,
        m_neg_pool: 96,
        first_frame: SampleRequest {
            positives: 40,
            negatives: 160,
            pos_iou: 0.7,
            neg_iou: 0.3,
        },
        frame: SampleRequest {
            positives: 4,
            negatives: 16,
            pos_iou: 0.7,
            neg_iou: 0.3,
        },
        bbox_regression: false,
        ..TrackerConfig::default()
    }
}

fn hard_mining_dominance() -> Result<String> {
    let mut r = rng(6);
    let s = generate_sequence(&SyntheticSequenceSpec {
        frames: 4,
        seed: 60,
        ..Default::default()
    })?;
    let net = MDNet::new(MDNetConfig::scaled(1, 1.0 / 16.0, false)?, &mut r)?;
    let mut tracker = Tracker::init_first_frame(net, &s.frames[0], &s.gt[0], TrackerConfig::default(), &mut r)?;
    for t in 2..=4 {
        let state = TargetState::from_box(&s.gt[t - 1]);
        tracker.after_estimate(&s.frames[t - 1], t, state, 0.9, None, &mut r)?;
    }
    let frames: Vec<usize> = tracker.stored_frames().collect();
    let cfg = tracker.config().clone();
    let mut checked = 0;
    for i in 0..100 {
        let pos: Vec<usize> = frames.iter().copied().filter(|_| r.gen_bool(0.7)).collect();
        let neg: Vec<usize> = frames.iter().copied().filter(|_| r.gen_bool(0.7)).collect();
        let pos = if pos.is_empty() { vec![1] } else { pos };
        let neg = if neg.is_empty() { vec![1] } else { neg };
        let batch = tracker.assemble_hard_minibatch(&pos, &neg, &mut r)?;
        ensure!(batch.positives.batch() == cfg.m_plus, "assembly {i}: positive count");
        ensure!(batch.negatives.batch() == cfg.m_hard, "assembly {i}: hard negative count");
        ensure!(
            batch.rejected_scores.len() == cfg.m_neg_pool - cfg.m_hard,
            "assembly {i}: rejected count"
        );
        let min_sel = batch.selected_scores.iter().copied().fold(f32::INFINITY, f32::min);
        let max_rej = batch.rejected_scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        ensure!(min_sel >= max_rej, "assembly {i}: selected {min_sel} < rejected {max_rej}");
        if i % 20 == 19 {
            tracker.update_network(&frames, &frames, &mut r)?;
        }
        checked += 1;
    }
    Ok(format!("{checked} assemblies, zero violations"))
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn sampling_statistics() -> Result<String> {
    let mut r = rng(7);
    let b = BoundingBox::new(40.0, 30.0, 48.0, 32.0)?;
    let state = TargetState::from_box(&b);
    let rad = b.mean_extent();
    let cfg = CandidateGenConfig {
        count: 100_000,
        ..CandidateGenConfig::default()
    };
    let c = draw_candidates(&state, &cfg, 1.0, &mut r);
    let xs: Vec<f64> = c.iter().map(|s| s.cx).collect();
    let ys: Vec<f64> = c.iter().map(|s| s.cy).collect();
    let ss: Vec<f64> = c.iter().map(|s| s.s).collect();
    let ratios = [std_dev(&xs) / (0.3 * rad), std_dev(&ys) / (0.3 * rad), std_dev(&ss) / 0.5];
    for (what, q) in ["x", "y", "scale"].iter().zip(ratios) {
        ensure!((q - 1.0).abs() < 0.02, "{what} std ratio {q:.4}");
    }
    let requests = [
        OFFLINE_SAMPLES,
        TrackerConfig::default().first_frame,
        TrackerConfig::default().frame,
    ];
    let mut audited = 0;
    for (i, req) in requests.iter().enumerate() {
        for k in 0..5 {
            let gt = BoundingBox::new(10.0 + 25.0 * k as f64, 20.0 + 7.0 * i as f64, 20.0 + 6.0 * k as f64, 30.0)?;
            let (pos, neg) = draw_training_samples(&gt, req, (200, 160), &mut r)?;
            ensure!(pos.len() == req.positives && neg.len() == req.negatives, "sample counts");
            ensure!(pos.iter().all(|p| p.iou(&gt) >= req.pos_iou), "positive below {}", req.pos_iou);
            ensure!(neg.iter().all(|n| n.iou(&gt) <= req.neg_iou), "negative above {}", req.neg_iou);
            audited += pos.len() + neg.len();
        }
    }
    Ok(format!(
        "std ratios {:.4}/{:.4}/{:.4}; {audited} samples audited",
        ratios[0], ratios[1], ratios[2]
    ))
}

/// Hand simulation of the frame sets: frame 1 seeds both sets; every
/// success adds its index to both and evicts the smallest index past capacity.
struct FrameSetOracle {
    short: Vec<usize>,
    long: Vec<usize>,
}

impl FrameSetOracle {
    fn success(&mut self, t: usize, tau_s: usize, tau_l: usize) {
        self.short.push(t);
        self.long.push(t);
        if self.short.len() > tau_s {
            self.short.remove(0);
        }
        if self.long.len() > tau_l {
            self.long.remove(0);
        }
    }
}

fn tracker_bookkeeping() -> Result<String> {
    let mut r = rng(8);
    let s = generate_sequence(&SyntheticSequenceSpec {
        frames: 2,
        velocity: (0.0, 0.0),
        jitter: 0.0,
        seed: 80,
        ..Default::default()
    })?;
    let frame: &Frame = &s.frames[0];
    let gt = s.gt[0];
    let net = MDNet::new(MDNetConfig::scaled(1, 1.0 / 32.0, false)?, &mut r)?;
    let cfg = small_tracker_config();
    let (tau_s, tau_l) = (cfg.tau_s, cfg.tau_l);
    let mut tracker = Tracker::init_first_frame(net, frame, &gt, cfg, &mut r)?;
    let mut oracle = FrameSetOracle {
        short: vec![1],
        long: vec![1],
    };
    let state = TargetState::from_box(&gt);
    let (mut successes, mut long_updates) = (0, 0);
    for t in 2..=150 {
        let score = match r.gen_range(0..10) {
            0..=5 => 0.9,
            6 => 0.5,
            _ => 0.1,
        };
        let out = tracker.after_estimate(frame, t, state, score, None, &mut r)?;
        if score > 0.5 {
            oracle.success(t, tau_s, tau_l);
            successes += 1;
        }
        let expect_long = score >= 0.5 && t % 10 == 0;
        if expect_long {
            long_updates += 1;
        }
        let long = matches!(out.action, FrameAction::LongTermUpdate | FrameAction::CollectedAndLongTermUpdate);
        ensure!(long == expect_long, "frame {t}: action {:?}", out.action);
        ensure!(
            (out.action == FrameAction::ShortTermUpdate) == (score < 0.5),
            "frame {t}: action {:?} for score {score}",
            out.action
        );
        let short: Vec<usize> = tracker.memory().short_term().iter().copied().collect();
        let long: Vec<usize> = tracker.memory().long_term().iter().copied().collect();
        ensure!(short == oracle.short, "frame {t}: short-term {short:?} vs {:?}", oracle.short);
        ensure!(long == oracle.long, "frame {t}: long-term {long:?} vs {:?}", oracle.long);
        let stored: Vec<usize> = tracker.stored_frames().collect();
        ensure!(stored == oracle.long, "frame {t}: stored {stored:?}");
    }
    Ok(format!(
        "149 frames, {successes} successes, {long_updates} long-term updates, sets match after every frame"
    ))
}

fn synthetic_tracking() -> Result<String> {
    let start = Instant::now();
    let mut r = rng(9);
    let (train, _) = synthetic_domains(3, 20, 0, 100, &mut r)?;
    let mut net = MDNet::new(MDNetConfig::desk(3), &mut r)?;
    calibrate(&mut net, &train, &mut r)?;
    let cfg = PretrainConfig {
        iterations: 300,
        ..PretrainConfig::for_domains(3)
    };
    pretrain(&mut net, &train, &cfg, &mut r)?;
    let grid = EvalGrid::default();
    let tcfg = TrackerConfig::default();
    let occlusion = Occlusion { start: 30, len: 10 };
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    let mut recovered = 0;
    for seed in 0..5u64 {
        let spec = SyntheticSequenceSpec {
            seed: 1000 + seed,
            ..Default::default()
        };
        let s = generate_sequence(&spec)?;
        let res = track_sequence(&net, &s.frames, &s.gt[0], &tcfg, &mut rng(seed))?;
        let e = evaluate(&res.boxes, &s.gt, &grid)?;
        if e.mean_iou < 0.6 || e.representative_precision < 0.9 {
            problems.push(format!("seed {seed}: {e}"));
        }
        let occluded = SyntheticSequenceSpec {
            occlusions: vec![occlusion],
            ..spec
        };
        let s = generate_sequence(&occluded)?;
        let res = track_sequence(&net, &s.frames, &s.gt[0], &tcfg, &mut rng(seed))?;
        let end = occlusion.start + occlusion.len;
        let back = (end..(end + 15).min(s.gt.len())).find(|&t| res.boxes[t].iou(&s.gt[t]) > 0.5);
        if back.is_some() {
            recovered += 1;
        }
        summary.push(format!(
            "iou {:.2} p20 {:.2} back {}",
            e.mean_iou,
            e.representative_precision,
            back.map_or("never".to_string(), |t| format!("+{}", t - end))
        ));
    }
    let elapsed = start.elapsed();
    let detail = summary.join("; ");
    ensure!(problems.is_empty(), "{}; {detail}", problems.join("; "));
    ensure!(recovered >= 4, "re-acquired after occlusion in {recovered}/5: {detail}");
    ensure!(elapsed < Duration::from_secs(1200), "took {elapsed:?}");
    Ok(format!("re-acquired {recovered}/5; {detail}"))
}

fn regression_oracle() -> Result<String> {
    let mut r = rng(10);
    let dim = 12;
    let w: Vec<[f64; 12]> = (0..4).map(|_| std::array::from_fn(|_| r.gen_range(-0.02..0.02))).collect();
    let bias: Deltas = std::array::from_fn(|_| r.gen_range(-0.05..0.05));
    let planted = |f: &[f64]| -> Deltas {
        std::array::from_fn(|k| bias[k] + w[k].iter().zip(f).map(|(a, b)| a * b).sum::<f64>())
    };
    let draw = |r: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n * dim).map(|_| r.gen_range(-3.0..3.0)).collect() };
    let train = draw(&mut r, 400);
    let targets: Vec<Deltas> = train.chunks(dim).map(planted).collect();
    let reg = RegressorWeights::fit(&train, dim, &targets, 1e-9)?;
    let held = draw(&mut r, 100);
    let mut worst_delta = 0.0f64;
    let mut worst_px = 0.0f64;
    let mut worst_trip = 0.0f64;
    for f in held.chunks(dim) {
        let truth = planted(f);
        let got = reg.predict(f)?;
        for k in 0..4 {
            worst_delta = worst_delta.max((got[k] - truth[k]).abs());
        }
        let proposal = BoundingBox::new(r.gen_range(0.0..100.0), r.gen_range(0.0..100.0), r.gen_range(10.0..60.0), r.gen_range(10.0..60.0))?;
        let gt = decode(&proposal, &truth);
        let moved = reg.refine(f, &proposal)?;
        for (a, b) in [(moved.x, gt.x), (moved.y, gt.y), (moved.right(), gt.right()), (moved.bottom(), gt.bottom())] {
            worst_px = worst_px.max((a - b).abs());
        }
        let back = decode(&proposal, &encode(&gt, &proposal));
        for (a, b) in [(back.x, gt.x), (back.y, gt.y), (back.w, gt.w), (back.h, gt.h)] {
            worst_trip = worst_trip.max((a - b).abs() / b.abs().max(1e-12));
        }
    }
    ensure!(worst_delta < 1e-6, "delta error {worst_delta:e}");
    ensure!(worst_px < 0.1, "refined box off by {worst_px} px");
    ensure!(worst_trip < 1e-9, "round trip relative error {worst_trip:e}");
    Ok(format!(
        "delta error {worst_delta:.1e}, box error {worst_px:.1e} px, round trip {worst_trip:.1e}"
    ))
}

fn eval_goldens() -> Result<String> {
    let grid = EvalGrid::default();
    let gt = vec![BoundingBox::new(50.0, 50.0, 20.0, 20.0)?; 4];
    let results: Vec<BoundingBox> = [0.0, 5.0, 15.0, 60.0]
        .iter()
        .map(|dx| BoundingBox::new(50.0 + dx, 50.0, 20.0, 20.0))
        .collect::<mdnet::Result<_>>()?;
    let p = precision_curve(&results, &gt, &grid)?;
    ensure!(p.at(20.0) == 0.75, "precision@20 {}", p.at(20.0));
    ensure!(p.at(4.0) == 0.25 && p.at(5.0) == 0.5 && p.at(50.0) == 0.75, "precision curve {:?}", p.values);

    let g = vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0)?; 2];
    let res = vec![BoundingBox::new(0.0, 0.0, 10.0, 5.0)?, g[1]];
    let (success, auc) = success_curve_and_auc(&res, &g, &grid)?;
    ensure!(success.at(0.45) == 1.0 && success.at(0.75) == 0.5, "success curve {:?}", success.values);
    ensure!(auc == 15.0 / 21.0, "auc {auc}");

    let mut r = rng(11);
    let mut fuzzed = 0;
    for _ in 0..200 {
        let n = r.gen_range(1..40);
        let mk = |r: &mut ChaCha8Rng| BoundingBox::new(r.gen_range(0.0..150.0), r.gen_range(0.0..150.0), r.gen_range(1.0..60.0), r.gen_range(1.0..60.0));
        let a: Vec<BoundingBox> = (0..n).map(|_| mk(&mut r)).collect::<mdnet::Result<_>>()?;
        let b: Vec<BoundingBox> = (0..n).map(|_| mk(&mut r)).collect::<mdnet::Result<_>>()?;
        let e = evaluate(&a, &b, &grid)?;
        ensure!(e.precision.values.windows(2).all(|w| w[0] <= w[1]), "precision not monotone");
        ensure!(e.success.values.windows(2).all(|w| w[0] >= w[1]), "success not monotone");
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        ensure!(e.precision.values.iter().all(in_unit) && e.success.values.iter().all(in_unit), "value outside [0, 1]");
        fuzzed += 1;
    }
    Ok(format!("precision@20 0.75, auc 15/21, {fuzzed} fuzzed trajectories monotone"))
}

fn reproducibility() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let mut r = rng(12);
    let net = MDNet::new(MDNetConfig::scaled(2, 1.0 / 16.0, false)?, &mut r)?;
    let bytes = io::checkpoint_bytes(&net);
    let back = io::checkpoint_from_bytes(&bytes)?;
    ensure!(back.config() == net.config(), "config changed");
    let a = bits(&net.groups().collect::<Vec<_>>());
    let b = bits(&back.groups().collect::<Vec<_>>());
    ensure!(a == b, "parameters changed in round trip");
    ensure!(io::checkpoint_bytes(&back) == bytes, "re-encoding differs");

    let model = dir.path().join("net.mdnc");
    io::save_checkpoint(&net, &model)?;
    let s = generate_sequence(&SyntheticSequenceSpec {
        frames: 5,
        seed: 120,
        ..Default::default()
    })?;
    let seq = dir.path().join("seq");
    io::save_sequence(&seq, &s.frames, &s.gt)?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}.txt"));
        let args = [
            "mdnet", "track",
            "--model", model.to_str().unwrap(),
            "--seq", seq.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
            "--seed", "42",
        ];
        ensure!(mdnet::cli::cli_main(args) == 0, "track run {run} failed");
        outputs.push(std::fs::read(&out)?);
    }
    ensure!(outputs[0] == outputs[1], "result files differ");
    Ok(format!(
        "{} parameters bit-exact; identical {}-byte result files",
        a.len(),
        outputs[0].len()
    ))
}
