//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run everything with `cargo test --test acceptance`, or a subset by number:
//! `cargo test --test acceptance -- 1 3 5`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ipsinet::backbone::BackboneSpec;
use ipsinet::data::{
    generate_synthetic, make_batches, stratified_split, IpsilateralCase, Side, SynthSpec,
};
use ipsinet::experiment::{
    prepare_splits, run_matrix, run_single, DataSource, ExperimentConfig, MatrixAxes, HISTORY,
};
use ipsinet::fusion::aggregate;
use ipsinet::gradcheck;
use ipsinet::loss::{focal_loss, focal_loss_gradient, softmax, FocalLossParams};
use ipsinet::metrics::{auc_roc, macro_f1};
use ipsinet::nn::{Mode, Parameterized};
use ipsinet::{
    lr_at, AggregationKind, FeatureMap, FusionConfig, FusionNet, FusionSite, FusionType,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {elapsed:.1?}, limit {limit:?}")
    })
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// Channel arithmetic for the parameter oracle.

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k
}

fn backbone_oracle(spec: &BackboneSpec) -> usize {
    let mut total = conv(spec.input_channels, spec.stem_width, 7) + 2 * spec.stem_width;
    let mut cin = spec.stem_width;
    for (stage, (&units, &w)) in spec
        .stage_block_counts
        .iter()
        .zip(&spec.stage_widths)
        .enumerate()
    {
        for u in 0..units {
            let first_in = if u == 0 { cin } else { w };
            total += conv(first_in, w, 3) + conv(w, w, 3) + 4 * w;
            if u == 0 && stage > 0 {
                total += conv(first_in, w, 1) + 2 * w;
            }
        }
        cin = w;
    }
    total + cin * 2 + 2
}

fn site_width(t: FusionType, spec: &BackboneSpec) -> usize {
    match t {
        FusionType::Pre => spec.input_channels,
        FusionType::Early => spec.stem_width,
        FusionType::Middle => spec.stage_widths[1],
        FusionType::Last | FusionType::Post => spec.stage_widths[3],
    }
}

fn fusion_oracle(kind: AggregationKind, width: usize) -> usize {
    let fused = match kind {
        AggregationKind::Average => width,
        AggregationKind::Concatenate => 2 * width,
    };
    fused * width + width + 2 * width
}

fn random_map(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> FeatureMap {
    let n = shape.iter().product();
    FeatureMap::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn structural_coverage() -> Outcome {
    let start = Instant::now();
    let mut configs: Vec<FusionConfig> = MatrixAxes::table1().cells(&FusionConfig::default());
    configs.extend(MatrixAxes::table2().cells(&FusionConfig::new(
        FusionType::Middle,
        AggregationKind::Concatenate,
    )));
    ensure(configs.len() == 16, || {
        format!("{} configurations", configs.len())
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = random_map(&mut rng, [16, 1, 64, 64]);
    let aux = random_map(&mut rng, [16, 1, 64, 64]);
    for cfg in &configs {
        let name = format!(
            "{} {} skip-{} r{}",
            cfg.fusion_type,
            cfg.aggregation,
            cfg.skip.label(),
            cfg.depth
        );
        let mut net = ok(FusionNet::new(cfg, 0))?;
        let spec = BackboneSpec::new(cfg.depth, 1);
        let expected = backbone_oracle(&spec)
            + fusion_oracle(cfg.aggregation, site_width(cfg.fusion_type, &spec));
        ensure(net.learnable_count() == expected, || {
            format!(
                "{name}: {} parameters, oracle {expected}",
                net.learnable_count()
            )
        })?;
        let logits = ok(net.forward(&ex, &aux, Mode::Train)).map_err(|e| format!("{name}: {e}"))?;
        ensure(logits.shape() == [16, 2, 1, 1], || {
            format!("{name}: logits {:?}", logits.shape())
        })?;
        ok(net.backward(&logits.map(|v| v / 16.0))).map_err(|e| format!("{name}: {e}"))?;
        let mut finite = true;
        net.visit_params("", &mut |_, p| {
            finite &= p.grad.iter().all(|g| g.is_finite())
        });
        ensure(finite, || format!("{name}: non-finite gradient"))?;
    }
    let mf = ok(FusionNet::new(
        &FusionConfig::new(FusionType::Middle, AggregationKind::Concatenate),
        0,
    ))?;
    let proj = mf.count_parameters().fusion_projection;
    ensure(proj == 32_896, || {
        format!("MF/concat projection has {proj} parameters")
    })?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "16 configurations, MF/concat projection {proj} params, {:.1?}",
        start.elapsed()
    ))
}

fn aggregation_exactness() -> Outcome {
    let a =
        FeatureMap::from_vec([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 8.0]).unwrap();
    let b = FeatureMap::from_vec(
        [1, 2, 2, 2],
        vec![3.0, -2.0, 0.0, 1.0, 5.0, 1.5, -0.75, 2.0],
    )
    .unwrap();
    let avg = ok(aggregate(&a, &b, AggregationKind::Average))?;
    let expected_avg = [2.0, 0.0, 1.5, 2.5, 2.0, 1.0, -0.25, 5.0];
    ensure(avg.shape() == [1, 2, 2, 2], || {
        format!("average shape {:?}", avg.shape())
    })?;
    ensure(
        avg.data()
            .iter()
            .zip(expected_avg)
            .all(|(x, y)| (x - y).abs() <= 1e-12),
        || format!("average {:?}", avg.data()),
    )?;
    let cat = ok(aggregate(&a, &b, AggregationKind::Concatenate))?;
    let expected_cat = [
        1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 8.0, 3.0, -2.0, 0.0, 1.0, 5.0, 1.5, -0.75, 2.0,
    ];
    ensure(cat.shape() == [1, 4, 2, 2], || {
        format!("concatenate shape {:?}", cat.shape())
    })?;
    ensure(
        cat.data()
            .iter()
            .zip(expected_cat)
            .all(|(x, y)| (x - y).abs() <= 1e-12),
        || format!("concatenate {:?}", cat.data()),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = random_map(&mut rng, [2, 1, 64, 64]);
    let mut sites = Vec::new();
    for t in FusionType::ALL {
        for kind in AggregationKind::ALL {
            let mut net = ok(FusionNet::new(&FusionConfig::new(t, kind), 0))?;
            let site = net.plan.fusion_site;
            let width = site.channels();
            let name = format!("{t} {kind}");
            let proj = &net.fusion.projection;
            let fused = match kind {
                AggregationKind::Average => width,
                AggregationKind::Concatenate => 2 * width,
            };
            ensure(
                proj.in_channels == fused && proj.out_channels == width,
                || {
                    format!(
                        "{name}: projection {} -> {}, per-view width {width}",
                        proj.in_channels, proj.out_channels
                    )
                },
            )?;
            let coarse = ok(net.coarse_forward(&images, Mode::Train))?;
            let (ea, eb) = (coarse.clone(), coarse.map(|v| 0.5 * v));
            let out = ok(net.fusion.fuse_views(&ea, &eb, Mode::Train))?;
            ensure(out.shape() == coarse.shape(), || {
                format!(
                    "{name}: fused {:?} vs per-view {:?}",
                    out.shape(),
                    coarse.shape()
                )
            })?;
            if kind == AggregationKind::Concatenate {
                sites.push(match site {
                    FusionSite::ImageLevel { .. } => "image-level",
                    FusionSite::FeatureMap { .. } => "feature-map",
                    FusionSite::FlattenedVector { .. } => "flattened-vector",
                });
            }
        }
    }
    for needed in ["image-level", "feature-map", "flattened-vector"] {
        ensure(sites.contains(&needed), || {
            format!("no {needed} fusion site exercised")
        })?;
    }
    Ok(format!(
        "2x2 maps exact, width contracts hold at {} sites",
        sites.len()
    ))
}

fn loss_and_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ce = FocalLossParams::cross_entropy(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let z: [f64; 2] = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
        let t = rng.random_range(0..2);
        let m = z[0].max(z[1]);
        let reference = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln() - z[t];
        worst = worst.max((ok(focal_loss(&z, t, &ce))? - reference).abs());
        let p = softmax(&z);
        let g = ok(focal_loss_gradient(&z, t, &ce))?;
        for j in 0..2 {
            let onehot = if j == t { 1.0 } else { 0.0 };
            worst = worst.max((g[j] - (p[j] - onehot)).abs());
        }
    }
    ensure(worst <= 1e-10, || {
        format!("cross-entropy deviation {worst:e}")
    })?;

    let loss = ok(gradcheck::check_loss(0, 200))?;
    ensure(loss.tolerance == 1e-5 && loss.passed(), || {
        format!("{loss}")
    })?;
    let e2e = ok(gradcheck::check_end_to_end(0))?;
    ensure(e2e.tolerance == 1e-3 && e2e.passed(), || format!("{e2e}"))?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "CE dev {worst:.1e}, loss grad {:.1e}, end-to-end {:.1e} ({:.1}% kinks), {:.1?}",
        loss.max_error(),
        e2e.max_error(),
        100.0 * e2e.kink_fraction(),
        start.elapsed()
    ))
}

fn brute_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn brute_macro_f1(preds: &[usize], labels: &[usize]) -> f64 {
    let f1 = |c: usize| {
        let count = |p: bool, l: bool| {
            preds
                .iter()
                .zip(labels)
                .filter(|&(&x, &y)| (x == c) == p && (y == c) == l)
                .count()
        };
        let (tp, fp, fn_) = (
            count(true, true) as f64,
            count(true, false) as f64,
            count(false, true) as f64,
        );
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    };
    (f1(0) + f1(1)) / 2.0
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut f1_dev, mut auc_dev): (f64, f64) = (0.0, 0.0);
    for i in 0..500 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        // A coarse grid makes ties common and keeps 1 - s exact.
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..=32u32)) / 32.0)
            .collect();
        f1_dev =
            f1_dev.max((ok(macro_f1(&preds, &labels))? - brute_macro_f1(&preds, &labels)).abs());
        let auc = ok(auc_roc(&scores, &labels))?;
        auc_dev = auc_dev.max((auc - brute_auc(&scores, &labels)).abs());
        let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let sum = auc + ok(auc_roc(&flipped, &labels))?;
        ensure(sum == 1.0, || {
            format!("instance {i}: AUC(s) + AUC(1-s) = {sum:.17}")
        })?;
    }
    ensure(f1_dev <= 1e-12, || format!("macro-F1 deviation {f1_dev:e}"))?;
    ensure(auc_dev <= 1e-12, || format!("AUC deviation {auc_dev:e}"))?;
    Ok(format!(
        "500 instances, max dev F1 {f1_dev:.1e} AUC {auc_dev:.1e}, complement exact"
    ))
}

fn dummy_cases(benign: usize, malignant: usize) -> Vec<IpsilateralCase> {
    (0..benign + malignant)
        .map(|i| IpsilateralCase {
            patient_id: format!("p{i}"),
            side: Side::L,
            image_size: 1,
            examined: vec![0.0],
            auxiliary: vec![0.0],
            label: usize::from(i >= benign),
            split: None,
        })
        .collect()
}

fn protocol_fidelity() -> Outcome {
    let paper = TrainConfig::paper();
    for epoch in 1..=paper.epochs {
        let expected = match epoch {
            1..=20 => 1e-3,
            21..=40 => 1e-4,
            41..=60 => 1e-5,
            61..=80 => 1e-6,
            _ => 1e-7,
        };
        let lr = lr_at(epoch, &paper);
        ensure((lr - expected).abs() <= 1e-12 * expected, || {
            format!("epoch {epoch}: lr {lr:e}, expected {expected:e}")
        })?;
    }

    let cases = ok(generate_synthetic(&SynthSpec {
        n_cases: 40,
        ..SynthSpec::default()
    }))?;
    let config = ExperimentConfig::default();
    let data = ok(ipsinet::data::Dataset::new(
        cases,
        ipsinet::data::Standardizer::default(),
    ))?;
    let batches = make_batches(data.len(), config.train.batch_cases, 0, 1, true);
    let batch = ok(data.batch(&batches[0]))?;
    let images = batch.examined.batch() + batch.auxiliary.batch();
    ensure(config.train.batch_cases == 16 && images == 32, || {
        format!("{images} images per batch")
    })?;

    let mut worst: f64 = 0.0;
    for (benign, malignant) in [(498, 1157), (586, 1362)] {
        for seed in 0..5 {
            let (_, test) = ok(stratified_split(dummy_cases(benign, malignant), 0.85, seed))?;
            let pos = test.iter().filter(|c| c.label == 1).count();
            for (got, n) in [(test.len() - pos, benign), (pos, malignant)] {
                let dev = (got as f64 - 0.15 * n as f64).abs();
                worst = worst.max(dev);
                ensure(dev <= 1.0, || format!("{n} cases: {got} in test"))?;
            }
        }
    }
    Ok(format!(
        "schedule exact over 200 epochs, 32 images/batch, split within {worst:.2} cases"
    ))
}

fn trend_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.fusion.width_divisor = 8;
    config
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fusion_necessity() -> Outcome {
    let start = Instant::now();
    let config = trend_config();
    let splits = ok(prepare_splits(&config))?;
    let mf = FusionConfig {
        width_divisor: 8,
        ..FusionConfig::new(FusionType::Middle, AggregationKind::Concatenate)
    };
    let single = FusionConfig {
        zero_auxiliary: true,
        ..mf.clone()
    };
    let pre = FusionConfig {
        fusion_type: FusionType::Pre,
        ..mf.clone()
    };
    let mut means = Vec::new();
    for fusion in [&mf, &single, &pre] {
        let mut f1 = Vec::new();
        for seed in 0..5 {
            f1.push(
                ok(run_single(fusion, &config.train, seed, &splits, None))?
                    .row
                    .macro_f1
                    .unwrap(),
            );
        }
        means.push(mean(&f1));
    }
    let (m, s, p) = (means[0], means[1], means[2]);
    let detail = format!(
        "MF {m:.3}, aux-zeroed {s:.3}, PreF {p:.3}, {:.0?}",
        start.elapsed()
    );
    ensure(m >= 0.90, || {
        format!("MF mean macro-F1 below 0.90: {detail}")
    })?;
    ensure(s <= 0.65, || {
        format!("single-view ablation above 0.65: {detail}")
    })?;
    ensure(m >= p - 0.02, || format!("MF below PreF - 0.02: {detail}"))?;
    Ok(detail)
}

fn determinism() -> Outcome {
    let config = trend_config();
    let splits = ok(prepare_splits(&config))?;
    let dirs = [ok(tempfile::tempdir())?, ok(tempfile::tempdir())?];
    let mut runs = Vec::new();
    for dir in &dirs {
        let out = ok(run_single(
            &config.fusion,
            &config.train,
            0,
            &splits,
            Some(dir.path()),
        ))?;
        let history = ok(fs::read(dir.path().join(HISTORY)))?;
        runs.push((history, out.outcome.final_report));
    }
    ensure(runs[0].0 == runs[1].0, || {
        "history.jsonl differs between identical runs".into()
    })?;
    ensure(runs[0].1 == runs[1].1, || {
        "final metrics differ between identical runs".into()
    })?;

    let mut small = ExperimentConfig {
        data: DataSource::Synthetic(SynthSpec {
            n_cases: 24,
            image_size: 32,
            ..SynthSpec::default()
        }),
        seeds: vec![0, 1],
        ..ExperimentConfig::default()
    };
    small.fusion.width_divisor = 16;
    small.train.epochs = 2;
    small.train.image_size = 32;
    let rows = |workers| -> Result<Vec<_>, String> {
        let table = ok(run_matrix(
            &small,
            &MatrixAxes::table1(),
            workers,
            None,
            |_| {},
        ))?;
        Ok(table
            .rows()
            .iter()
            .cloned()
            .map(|mut r| {
                r.wall_time = 0.0;
                r
            })
            .collect())
    };
    let (one, four) = (rows(1)?, rows(4)?);
    ensure(one.len() == 20 && one.iter().all(|r| r.is_ok()), || {
        format!("{} rows", one.len())
    })?;
    ensure(one == four, || "matrix rows depend on worker count".into())?;
    Ok(format!(
        "history.jsonl byte-identical ({} bytes), matrix of {} runs equal at 1 and 4 workers",
        runs[0].0.len(),
        one.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("structural coverage", structural_coverage),
        ("aggregation exactness", aggregation_exactness),
        ("loss exactness and gradients", loss_and_gradients),
        ("metric oracles", metric_oracles),
        ("protocol fidelity", protocol_fidelity),
        ("fusion necessity trend", fusion_necessity),
        ("determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {number} ({name}): PASS - {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {number} ({name}): FAIL - {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
