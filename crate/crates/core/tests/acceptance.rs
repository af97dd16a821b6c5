//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default. `MEDNET_ACCEPTANCE=1,5,7` selects a
//! subset (criterion 8 needs 4 and runs it if absent). Exits nonzero if any
//! selected criterion fails or overruns its time budget.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mednet_core::data::{
    augment, oversample_balance, split, synth_with, AugmentOp, Colorspace, Dataset, Sample, SynthOptions,
};
use mednet_core::gradcheck::{run_suite, with_fault, Fault, GradCheckConfig};
use mednet_core::graph::{build_mednet, MedNetConfig, ModelGraph, Projection, Stage, Variant};
use mednet_core::layers::{Layer, Mode};
use mednet_core::train::{train, train_with, LrSchedule, MetricsWriter, TrainConfig, TrainMetrics};
use mednet_core::transfer::{
    apply_freeze, compare_transfer, load_checkpoint, replace_head, save_checkpoint, Checkpoint, CompareConfig,
    FreezePlan, Provenance,
};
use mednet_core::{Rng, Tensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn snapshot(g: &ModelGraph<f32>) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    g.named_params().into_iter().map(|(n, p)| (n, p.value.shape().to_vec(), bits(&p.value))).collect()
}

/// Names whose shape or bits differ between two snapshots, plus names
/// present in only one.
fn changed(a: &[(String, Vec<usize>, Vec<u32>)], b: &[(String, Vec<usize>, Vec<u32>)]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (n, s, v) in a {
        match b.iter().find(|(m, ..)| m == n) {
            Some((_, s2, v2)) if s == s2 && v == v2 => {}
            _ => {
                out.insert(n.clone());
            }
        }
    }
    for (n, ..) in b {
        if !a.iter().any(|(m, ..)| m == n) {
            out.insert(n.clone());
        }
    }
    out
}

// ---------------------------------------------------------------- 1

fn architecture() -> Check {
    let mut notes = Vec::new();
    for variant in [Variant::Gray, Variant::Color] {
        let cfg = MedNetConfig::canonical(variant, 8);
        // Independent count from the config alone.
        let expected = cfg.stem.len()
            + cfg.blocks.len() * 4
            + cfg.connections.iter().filter(|c| c.projection == Projection::Conv1x1).count();
        let g = ok(build_mednet::<f32>(&cfg, &mut Rng::new(1)))?;
        let convs = g.count_conv_layers();
        ensure(convs == 44 && expected == 44, || format!("{variant}: {convs} convs, config implies {expected}"))?;
        let in_graph = g.nodes().iter().filter(|n| matches!(n.layer(), Some(Layer::Conv2d(_)))).count();
        ensure(in_graph == 44, || format!("{variant}: {in_graph} conv nodes"))?;

        let blocks: BTreeSet<usize> =
            g.nodes().iter().filter_map(|n| if let Stage::Block(k) = n.stage { Some(k) } else { None }).collect();
        ensure(blocks == (1..=8).collect(), || format!("blocks {blocks:?}"))?;
        for k in 1..=8 {
            let mut kernels: Vec<usize> = g
                .nodes()
                .iter()
                .filter(|n| n.stage == Stage::Block(k) && n.name.contains(".branch"))
                .filter_map(|n| match n.layer() {
                    Some(Layer::Conv2d(c)) => Some(c.spec().kernel_h),
                    _ => None,
                })
                .collect();
            kernels.sort_unstable();
            ensure(kernels == [1, 3, 5, 7], || format!("block {k} branch kernels {kernels:?}"))?;
        }
        ensure(g.skip_edges().len() == 12, || format!("{} connections", g.skip_edges().len()))?;
        notes.push(format!("{variant} ok"));
    }
    for i in 0..2 {
        let mut cfg = MedNetConfig::canonical(Variant::Gray, 8);
        cfg.stem[i].kernel = 1;
        ensure(build_mednet::<f32>(&cfg, &mut Rng::new(1)).is_err(), || format!("1x1 stem conv {i} accepted"))?;
    }
    Ok(format!("44 convs, 8 blocks of {{1,3,5,7}}, 12 connections, 1x1 stem rejected ({})", notes.join(", ")))
}

// ---------------------------------------------------------------- 2

const PRIMITIVES: [&str; 9] = [
    "conv2d",
    "batchnorm2d",
    "relu",
    "dropout",
    "concat",
    "add",
    "global_avg_pool",
    "fully_connected",
    "softmax_output",
];

fn gradients() -> Check {
    let cfg = GradCheckConfig::default();
    ensure(cfg.step == 1e-5 && cfg.trials >= 20, || format!("config {cfg:?}"))?;
    ensure(cfg.layer_tolerance == 1e-4 && cfg.network_tolerance == 1e-3, || format!("tolerances {cfg:?}"))?;
    let report = ok(run_suite(&cfg))?;
    for p in PRIMITIVES {
        ensure(report.results.iter().any(|r| r.name == p), || format!("no check for {p}"))?;
    }
    let (network, layers): (Vec<_>, Vec<_>) = report.results.iter().partition(|r| r.name.starts_with("mednet"));
    ensure(network.len() == 1, || "missing end-to-end check".into())?;
    let mut worst_layer = 0.0f64;
    for r in &layers {
        ensure(r.trials >= 20, || format!("{}: {} trials", r.name, r.trials))?;
        ensure(r.max_rel_error < 1e-4, || format!("{}: max rel error {:.3e}", r.name, r.max_rel_error))?;
        worst_layer = worst_layer.max(r.max_rel_error);
    }
    let net = network[0];
    ensure(net.max_rel_error < 1e-3, || format!("end to end: max rel error {:.3e}", net.max_rel_error))?;

    // The suite must be able to fail.
    let broken = ok(with_fault(Fault::ReluBackward, || run_suite(&GradCheckConfig { trials: 2, ..cfg.clone() })))?;
    ensure(!broken.passed(), || "a broken relu backward went unnoticed".into())?;
    Ok(format!(
        "{} layer checks, worst {:.2e} < 1e-4; end to end {:.2e} < 1e-3 over {} coords; broken relu caught",
        layers.len(),
        worst_layer,
        net.max_rel_error,
        net.coordinates
    ))
}

// ---------------------------------------------------------------- 3

fn overfit() -> Check {
    let data = ok(synth_with(&SynthOptions::new(Colorspace::Gray, 4, 4, 32, 21)))?;
    ensure(data.len() == 16, || format!("{} samples", data.len()))?;
    let cfg = MedNetConfig::canonical_with_input(Variant::Gray, 4, 32);
    let mut g = ok(build_mednet::<f32>(&cfg, &mut Rng::new(1)))?;
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 16,
        lr: 0.01,
        seed: 2,
        record_wall_time: false,
        train_metrics: TrainMetrics::EvalPass,
        ..TrainConfig::default()
    };
    let history = ok(train_with(&mut g, &data, &data, &tc, |_| Ok(())))?;
    let last = history.last().ok_or("no epochs")?;
    ensure(last.train_accuracy == 1.0, || format!("final train accuracy {}", last.train_accuracy))?;

    // Loss over 5-epoch windows after epoch 20 never rises (beyond
    // weight-decay drift).
    let windows: Vec<f64> =
        history[20..].chunks(5).map(|w| w.iter().map(|r| r.train_loss).sum::<f64>() / w.len() as f64).collect();
    for (i, pair) in windows.windows(2).enumerate() {
        ensure(pair[1] <= pair[0] + 1e-6, || {
            format!("window {} mean loss {:.3e} > previous {:.3e}", i + 1, pair[1], pair[0])
        })?;
    }
    let first = history.iter().position(|r| r.train_accuracy == 1.0).unwrap();
    Ok(format!(
        "train accuracy 1.0 (first at epoch {}), final loss {:.2e}, {} windows non-increasing",
        first + 1,
        last.train_loss,
        windows.len()
    ))
}

// ---------------------------------------------------------------- 4 and 8

fn pretrain_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 32,
        lr: 0.01,
        seed: 5,
        lr_decay: LrSchedule::None,
        record_wall_time: false,
        ..TrainConfig::default()
    }
}

const SOURCE_SEED: u64 = 100;

/// Full source pretraining: 8 gray classes, 2000 images at 64×64. Writes
/// the metrics CSV and, if asked, the checkpoint.
fn pretrain(dir: &Path, tag: &str, checkpoint: bool) -> Result<PathBuf, String> {
    let source = ok(synth_with(&SynthOptions::new(Colorspace::Gray, 8, 250, 64, SOURCE_SEED)))?;
    ensure(source.len() == 2000, || format!("{} source images", source.len()))?;
    let parts = ok(split(&source, &[0.9, 0.1], 1))?;
    let mut g = ok(build_mednet::<f32>(&MedNetConfig::canonical(Variant::Gray, 8), &mut Rng::new(5)))?;
    let csv = dir.join(format!("{tag}.csv"));
    let mut writer = ok(MetricsWriter::create(&csv))?;
    let tc = pretrain_config();
    let h = ok(train_with(&mut g, &parts[0], &parts[1], &tc, |r| writer.append(r)))?;
    eprintln!("  pretrain {tag}: val accuracy {:?}", h.iter().map(|r| r.val_accuracy).collect::<Vec<_>>());
    if checkpoint {
        let path = dir.join("source.mdnt");
        ok(save_checkpoint(&g, &path, Provenance::new(5, tc.epochs, "synth-gray-8")))?;
    }
    Ok(csv)
}

struct Shared {
    dir: tempfile::TempDir,
    pretrain_csv: Option<PathBuf>,
    c4_elapsed: Duration,
}

fn transfer(shared: &mut Shared) -> Check {
    let csv = pretrain(shared.dir.path(), "first", true)?;
    shared.pretrain_csv = Some(csv);
    // Same texture family as the source, new images.
    let mut opts = SynthOptions::new(Colorspace::Gray, 2, 50, 64, 777);
    opts.family_seed = Some(SOURCE_SEED);
    let target = ok(synth_with(&opts))?;
    ensure(target.len() == 100 && target.num_classes() == 2, || "target fixture shape".into())?;
    let cfg = CompareConfig {
        train: TrainConfig {
            epochs: 12,
            batch_size: 16,
            lr: 0.01,
            seed: 1,
            lr_decay: LrSchedule::None,
            record_wall_time: false,
            ..TrainConfig::default()
        },
        plan: FreezePlan::None,
        n_seeds: 5,
    };
    let report = ok(compare_transfer::<f32>(&shared.dir.path().join("source.mdnt"), &target, &cfg, |c| {
        eprintln!("  {c:?}");
    }))?;
    let per_seed: Vec<String> = report
        .comparisons
        .iter()
        .map(|c| {
            let ft = c.finetuned_epochs_to_scratch_best.map_or("-".into(), |e| e.to_string());
            format!("{}/{}", ft, c.scratch_epochs_to_best)
        })
        .collect();
    let detail = format!(
        "{}/5 seeds halved (fine-tuned/scratch epochs to scratch best: {})",
        report.halved_count,
        per_seed.join(" ")
    );
    ensure(report.halved_count >= 4, || detail.clone())?;
    Ok(detail)
}

fn determinism(shared: &mut Shared) -> Check {
    let first = shared.pretrain_csv.clone().ok_or("criterion 4 produced no pretrain run")?;
    let second = pretrain(shared.dir.path(), "second", false)?;
    let (a, b) = (ok(std::fs::read(&first))?, ok(std::fs::read(&second))?);
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    ensure(rows == 3, || format!("{rows} csv lines"))?;
    ensure(a == b, || "metrics CSVs differ".into())?;
    Ok(format!("two pretrain runs, {} byte CSVs identical", a.len()))
}

// ---------------------------------------------------------------- 5

fn checkpoints() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let mut rng = Rng::new(2024);
    let mut seen = Vec::new();
    for i in 0..5 {
        let variant = if rng.bernoulli(0.5) { Variant::Gray } else { Variant::Color };
        let classes = 2 + rng.below(9);
        let size = [32, 48, 64][rng.below(3)];
        let mut cfg = MedNetConfig::canonical_with_input(variant, classes, size);
        cfg.fc1_width = [32, 64, 128, 256][rng.below(4)];
        cfg.dropout_rate = rng.uniform_range(0.0, 0.6);
        let mut g = ok(build_mednet::<f32>(&cfg, &mut Rng::new(i)))?;

        // One train-mode pass so the running statistics are not at their
        // initial values.
        let x = Tensor::<f32>::from_fn(&[4, size, size, variant.channels()], |_| rng.uniform() as f32);
        g.set_mode(Mode::Train);
        ok(g.forward(&x, &mut Rng::new(9)))?;
        g.clear();
        g.set_mode(Mode::Eval);

        let path = dir.path().join(format!("m{i}.mdnt"));
        ok(save_checkpoint(&g, &path, Provenance::new(i, 0, "acceptance")))?;
        let back: ModelGraph<f32> = ok(load_checkpoint(&path))?;
        ensure(changed(&snapshot(&g), &snapshot(&back)).is_empty(), || format!("config {i}: parameters differ"))?;
        ensure(back.config() == g.config(), || format!("config {i}: architecture differs"))?;
        let y0 = ok(g.infer(&x))?.logits;
        let y1 = ok(back.infer(&x))?.logits;
        ensure(bits(&y0) == bits(&y1), || format!("config {i}: eval logits differ"))?;

        let bytes = ok(std::fs::read(&path))?;
        for cut in [0, 3, 11, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            ensure(Checkpoint::from_bytes(&bytes[..cut]).is_err(), || format!("config {i}: {cut} byte prefix loaded"))?;
        }
        let truncated = dir.path().join("cut.mdnt");
        ok(std::fs::write(&truncated, &bytes[..bytes.len() - 4]))?;
        ensure(load_checkpoint::<f32>(&truncated).is_err(), || "truncated file loaded".into())?;
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        let e = Checkpoint::from_bytes(&bad).err().ok_or("bad magic accepted")?;
        ensure(e.to_string().contains("magic"), || format!("bad magic error reads {e}"))?;
        seen.push(format!("{variant}/{classes}c/{size}px"));
    }
    Ok(format!("bit-identical eval forward for {}; truncation and bad magic rejected", seen.join(", ")))
}

// ---------------------------------------------------------------- 6

fn surgery() -> Check {
    let source = ok(build_mednet::<f32>(&MedNetConfig::canonical(Variant::Gray, 8), &mut Rng::new(3)))?;
    let before = snapshot(&source);
    let head: BTreeSet<String> = ["head.fc2.weight", "head.fc2.bias"].iter().map(|s| s.to_string()).collect();
    for k in [2, 4] {
        let mut g = source.clone();
        ok(replace_head(&mut g, k, &mut Rng::new(11)))?;
        let diff = changed(&before, &snapshot(&g));
        ensure(diff == head, || format!("{k}-class head changed {diff:?}"))?;
        let w = g.param("head.fc2.weight").ok_or("no head weight")?.value.shape().to_vec();
        ensure(w.contains(&k) && g.config().num_classes == k, || format!("{k}-class head has shape {w:?}"))?;
    }

    // 10 optimizer steps: 40 samples in batches of 4, one epoch.
    let data = ok(synth_with(&SynthOptions::new(Colorspace::Gray, 4, 10, 32, 5)))?;
    let cfg = MedNetConfig::canonical_with_input(Variant::Gray, 8, 32);
    let base = ok(build_mednet::<f32>(&cfg, &mut Rng::new(4)))?;
    let tc = TrainConfig { epochs: 1, batch_size: 4, lr: 0.05, seed: 6, ..TrainConfig::default() };
    let mut checked = Vec::new();
    for plan in [FreezePlan::Stem, FreezePlan::Block(4), FreezePlan::AllButHead] {
        let mut g = base.clone();
        ok(replace_head(&mut g, 4, &mut Rng::new(12)))?;
        ok(apply_freeze(&mut g, plan))?;
        let frozen: BTreeSet<String> = plan.frozen_names(&g).into_iter().collect();
        let before = snapshot(&g);
        ok(train(&mut g, &data, &data, &tc))?;
        let diff = changed(&before, &snapshot(&g));
        let moved: Vec<&String> = frozen.intersection(&diff).collect();
        ensure(moved.is_empty(), || format!("{plan}: frozen params moved: {moved:?}"))?;
        ensure(diff.contains("head.fc2.weight"), || format!("{plan}: head did not train"))?;
        checked.push(format!("{plan} ({} frozen)", frozen.len()));
    }
    Ok(format!("head swap touches only head.fc2 for 2 and 4 classes; invariant after 10 steps: {}", checked.join(", ")))
}

// ---------------------------------------------------------------- 7

fn image(h: usize, w: usize, c: usize, rng: &mut Rng) -> Sample {
    Sample { image: Tensor::from_fn(&[h, w, c], |_| rng.uniform() as f32), label: 0, source_id: String::new() }
}

fn nearest_centroid(train: &Dataset, test: &Dataset) -> f64 {
    let k = train.num_classes();
    let d = train.samples()[0].image.numel();
    let mut sums = vec![vec![0.0f64; d]; k];
    let mut counts = vec![0usize; k];
    for s in train.samples() {
        counts[s.label] += 1;
        for (a, &v) in sums[s.label].iter_mut().zip(s.image.data()) {
            *a += v as f64;
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        sum.iter_mut().for_each(|v| *v /= n as f64);
    }
    let hits = test
        .samples()
        .iter()
        .filter(|s| {
            let dist = |c: &[f64]| c.iter().zip(s.image.data()).map(|(m, &v)| (m - v as f64).powi(2)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| dist(&sums[a]).total_cmp(&dist(&sums[b]))).unwrap();
            best == s.label
        })
        .count();
    hits as f64 / test.len() as f64
}

fn data_pipeline() -> Check {
    // Balance: classes of 3, 7 and 12 become 12 each, originals kept.
    let full = ok(synth_with(&SynthOptions::new(Colorspace::Gray, 3, 12, 32, 8)))?;
    let keep = [3, 7, 12];
    let mut taken = [0; 3];
    let samples: Vec<Sample> = full
        .samples()
        .iter()
        .filter(|s| {
            taken[s.label] += 1;
            taken[s.label] <= keep[s.label]
        })
        .cloned()
        .collect();
    let skewed = ok(full.with_samples(samples))?;
    let balanced = ok(oversample_balance(&skewed, &mut Rng::new(1)))?;
    ensure(balanced.class_counts() == [12, 12, 12], || format!("counts {:?}", balanced.class_counts()))?;
    for s in skewed.samples() {
        ensure(balanced.samples().contains(s), || format!("original {} dropped", s.source_id))?;
    }

    // Involutions.
    let mut rng = Rng::new(3);
    for (h, w, c) in [(32, 32, 1), (16, 16, 3), (12, 20, 1), (9, 7, 3)] {
        let s = image(h, w, c, &mut rng);
        let flip2 = augment(&s, &[AugmentOp::HFlip, AugmentOp::HFlip], &mut rng);
        let rot4 = augment(&s, &[AugmentOp::Rot90; 4], &mut rng);
        ensure(bits(&flip2.image) == bits(&s.image), || format!("hflip twice changed a {h}x{w}x{c} image"))?;
        ensure(bits(&rot4.image) == bits(&s.image), || format!("rot90 four times changed a {h}x{w}x{c} image"))?;
        let once = augment(&s, &[AugmentOp::HFlip], &mut rng);
        ensure(bits(&once.image) != bits(&s.image), || "hflip is a no-op".into())?;
    }

    // Determinism.
    let opts = SynthOptions::new(Colorspace::Gray, 4, 50, 32, 42);
    let a = ok(synth_with(&opts))?;
    let b = ok(synth_with(&opts))?;
    ensure(a == b, || "same seed, different data".into())?;
    let c = ok(synth_with(&SynthOptions { seed: 43, ..opts.clone() }))?;
    ensure(a != c, || "different seeds, same data".into())?;

    // Separability.
    let parts = ok(split(&a, &[0.5, 0.5], 7))?;
    let acc = nearest_centroid(&parts[0], &parts[1]);
    let chance = 1.0 / a.num_classes() as f64;
    ensure(acc > chance + 0.15, || format!("nearest-centroid accuracy {acc:.3}"))?;
    Ok(format!(
        "balance exact, hflip^2 and rot90^4 identities, deterministic, nearest centroid {acc:.3} > {:.2}",
        chance + 0.15
    ))
}

// ---------------------------------------------------------------- driver

fn main() {
    let selected: Option<BTreeSet<u32>> = std::env::var("MEDNET_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wants = |n: u32| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut shared = Shared { dir: tempfile::tempdir().expect("tempdir"), pretrain_csv: None, c4_elapsed: Duration::ZERO };
    let mut failures = 0;
    let mut ran = 0;

    let run = |n: u32, name: &str, budget: Duration, f: &mut dyn FnMut(&mut Shared) -> Check, shared: &mut Shared| {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f(shared))).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let mut elapsed = t.elapsed();
        if n == 4 {
            shared.c4_elapsed = elapsed;
        }
        if n == 8 {
            // Shares criterion 4's budget.
            elapsed += shared.c4_elapsed;
        }
        let (passed, detail) = match result {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(e) => (false, e),
        };
        println!(
            "{} criterion {n} {name} [{:.1}s / {}s]: {detail}",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        passed
    };

    let s = Duration::from_secs;
    let mut criteria: Vec<(u32, &str, Duration, Box<dyn FnMut(&mut Shared) -> Check>)> = vec![
        (1, "architecture", s(1), Box::new(|_| architecture())),
        (2, "gradient suite", s(300), Box::new(|_| gradients())),
        (3, "tiny-batch overfit", s(600), Box::new(|_| overfit())),
        (4, "transfer", s(3600), Box::new(transfer)),
        (5, "checkpoint round-trip", s(60), Box::new(|_| checkpoints())),
        (6, "fine-tune surgery", s(120), Box::new(|_| surgery())),
        (7, "data pipeline", s(120), Box::new(|_| data_pipeline())),
        (8, "determinism", s(3600), Box::new(determinism)),
    ];
    for (n, name, budget, f) in criteria.iter_mut() {
        let needed = wants(*n) || (*n == 4 && wants(8));
        if !needed {
            continue;
        }
        ran += 1;
        if !run(*n, name, *budget, f.as_mut(), &mut shared) {
            failures += 1;
        }
    }
    println!("acceptance: {}/{ran} passed", ran - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
