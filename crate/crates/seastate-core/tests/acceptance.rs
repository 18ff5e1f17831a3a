//! Acceptance suite: one test per shipping criterion. Every test prints a
//! single summary line
//!
//! ```text
//! acceptance criterion NN (<name>): PASS|FAIL|SKIP
//! ```
//!
//! visible with `cargo test --test acceptance -- --nocapture`. Criteria 7 and
//! 8 train small models end to end and take a few minutes each; the rest are
//! seconds. Criterion 9 needs real pretrained backbone assets and skips with
//! a named reason when none are registered.
//!
//! Reference-table fixtures are duplicated here on purpose: this suite is the
//! independent check and must not share constants with the library's own
//! tests.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;

use seastate_core::augment::{
    augment_train, augment_train_traced, center_crop, flip_horizontal, motion_blur_kernel,
    AugmentConfig,
};
use seastate_core::dataset::{
    build_dataset, compute_sampling_interval, verify_manifest, BuildOptions, BuildTargets,
    CropRegion, FrameSource, LabelRange, LoadingCondition, SeaStateLabel, Split, Strategy,
    VideoSession,
};
use seastate_core::eval::{aggregate, evaluate_model, performance_drop, ConfusionMatrix};
use seastate_core::img::Image;
use seastate_core::model::{
    build_classifier, spec_for, surrogate_spec, Architecture, HeadConfig, PretrainedAssets, Stage,
    ASSET_REGISTRY_ENV,
};
use seastate_core::nn::softmax_cross_entropy;
use seastate_core::profile::profile_inference;
use seastate_core::rng::{derive, tag};
use seastate_core::synth::{generate_dataset, SynthConfig};
use seastate_core::train::{
    ablate_training_size, plateau_lr, train_two_stage, OptimizerKind, PlateauConfig, StageConfig,
    TrainConfig,
};

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

/// Several criteria assert wall-clock budgets or throughput stability, so no
/// two criteria may share the CPU. The default test harness already runs
/// single-threaded on single-core machines; this lock enforces the same
/// serialization everywhere.
static SERIAL: Mutex<()> = Mutex::new(());

enum Verdict {
    Pass,
    Skip(String),
}

fn run_criterion(number: u8, name: &str, body: impl FnOnce() -> Verdict) {
    let _guard = SERIAL.lock().unwrap_or_else(|poisoned| poisoned.into_inner());
    let clock = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let elapsed = clock.elapsed().as_secs_f64();
    match &outcome {
        Ok(Verdict::Pass) => {
            println!("acceptance criterion {number:02} ({name}): PASS [{elapsed:.1}s]");
        }
        Ok(Verdict::Skip(reason)) => {
            println!("acceptance criterion {number:02} ({name}): SKIP — {reason}");
        }
        Err(_) => {
            println!("acceptance criterion {number:02} ({name}): FAIL [{elapsed:.1}s]");
        }
    }
    if let Err(panic) = outcome {
        std::panic::resume_unwind(panic);
    }
}

fn label(value: u8) -> SeaStateLabel {
    SeaStateLabel::new(i64::from(value), LabelRange::NATIVE).expect("label in native range")
}

/// Two-decimal reference values carry up to 0.005 rounding error; the extra
/// 1e-9 absorbs float representation error at the boundary.
const ROUND2: f64 = 0.005 + 1e-9;

// ---------------------------------------------------------------------------
// Criterion 1 — metrics oracle fixture
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_metrics_oracle_fixture() {
    run_criterion(1, "metrics oracle fixture", || {
        let clock = Instant::now();

        // Reference cross-domain confusion matrix: an 8-class model applied
        // to a 4-class foreign test set, 1200 samples per present class.
        let counts: Vec<Vec<u64>> = vec![
            vec![56, 655, 47, 1, 35, 238, 4, 164],
            vec![0, 1091, 2, 0, 19, 15, 0, 73],
            vec![0, 945, 173, 12, 0, 69, 0, 1],
            vec![0, 13, 0, 0, 0, 0, 1187, 0],
            vec![0; 8],
            vec![0; 8],
            vec![0; 8],
            vec![0; 8],
        ];
        let cm = ConfusionMatrix::from_counts((1..=8).map(label).collect(), counts)
            .expect("fixture is a valid matrix");
        let report = aggregate(&cm).expect("fixture is non-empty");

        // Reported per-class precision/recall/f1 for the four present classes.
        let expected: [(f64, f64, f64); 4] = [
            (1.00, 0.05, 0.09),
            (0.40, 0.91, 0.56),
            (0.78, 0.14, 0.24),
            (0.00, 0.00, 0.00),
        ];
        for (m, (p, r, f1)) in report.per_class.iter().zip(expected) {
            assert!((m.precision - p).abs() <= ROUND2, "class {}: precision {} vs {p}", m.label, m.precision);
            assert!((m.recall - r).abs() <= ROUND2, "class {}: recall {} vs {r}", m.label, m.recall);
            assert!((m.f1 - f1).abs() <= ROUND2, "class {}: f1 {} vs {f1}", m.label, m.f1);
        }
        // Absent classes score zero everywhere.
        for m in &report.per_class[4..] {
            assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        }
        assert!((report.accuracy - 0.28).abs() <= ROUND2, "accuracy {}", report.accuracy);
        assert!((report.weighted_precision - 0.55).abs() <= ROUND2);
        assert!((report.weighted_recall - 0.28).abs() <= ROUND2);
        assert!((report.weighted_f1 - 0.22).abs() <= ROUND2);

        assert!(clock.elapsed() < Duration::from_secs(1), "budget: < 1 s");
        Verdict::Pass
    });
}

// ---------------------------------------------------------------------------
// Criterion 2 — macro/weighted identities + brute-force oracle
// ---------------------------------------------------------------------------

/// Metric oracle computed straight from the count definitions, sharing no
/// code with the library: tp = diagonal, predicted = column sum, support =
/// row sum.
#[allow(clippy::type_complexity)]
fn oracle_from_counts(counts: &[Vec<u64>]) -> (Vec<(f64, f64, f64)>, f64, [f64; 3], [f64; 3]) {
    let n = counts.len();
    let total: u64 = counts.iter().flatten().sum();
    let mut per_class = Vec::with_capacity(n);
    let mut supports = Vec::with_capacity(n);
    for c in 0..n {
        let tp = counts[c][c];
        let predicted: u64 = (0..n).map(|i| counts[i][c]).sum();
        let support: u64 = counts[c].iter().sum();
        let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let r = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        per_class.push((p, r, f1));
        supports.push(support);
    }
    let hits: u64 = (0..n).map(|i| counts[i][i]).sum();
    let macros = [
        per_class.iter().map(|m| m.0).sum::<f64>() / n as f64,
        per_class.iter().map(|m| m.1).sum::<f64>() / n as f64,
        per_class.iter().map(|m| m.2).sum::<f64>() / n as f64,
    ];
    let weighted = |pick: fn(&(f64, f64, f64)) -> f64| {
        per_class
            .iter()
            .zip(&supports)
            .map(|(m, &s)| s as f64 * pick(m))
            .sum::<f64>()
            / total as f64
    };
    let weights = [weighted(|m| m.0), weighted(|m| m.1), weighted(|m| m.2)];
    (per_class, hits as f64 / total as f64, macros, weights)
}

#[test]
fn criterion_02_average_identities() {
    run_criterion(2, "macro/weighted identities", || {
        // Reference 8-class in-domain per-class f1 row: its plain mean is the
        // reported macro f1.
        let f1_row = [0.981, 0.970, 0.934, 0.971, 0.991, 0.944, 1.000, 0.971];
        let macro_f1 = f1_row.iter().sum::<f64>() / f1_row.len() as f64;
        assert!((macro_f1 - 0.970).abs() <= 0.0005, "macro f1 {macro_f1}");

        // Reference 4-class precision row under equal support: the weighted
        // average degenerates to the plain mean.
        let precisions = [0.93, 0.59, 0.67, 0.99];
        let mean = precisions.iter().sum::<f64>() / precisions.len() as f64;
        assert!((mean - 0.795).abs() < 1e-12, "mean {mean}");
        assert!((mean - 0.7928).abs() <= 0.005, "vs reported weighted {mean}");

        // Brute-force oracle equality on 1000 random small matrices.
        let mut rng = derive(0xACCE97, &[tag("criterion-2")]);
        for case in 0..1000 {
            let n = rng.gen_range(2..=6usize);
            let mut counts = vec![vec![0u64; n]; n];
            loop {
                for row in counts.iter_mut() {
                    for cell in row.iter_mut() {
                        *cell = rng.gen_range(0..40);
                    }
                }
                if counts.iter().flatten().any(|&c| c > 0) {
                    break;
                }
            }
            let labels: Vec<SeaStateLabel> = (1..=n as u8).map(label).collect();
            let cm = ConfusionMatrix::from_counts(labels, counts.clone()).unwrap();
            let report = aggregate(&cm).unwrap();
            let (per_class, accuracy, macros, weighted) = oracle_from_counts(&counts);
            for (m, (p, r, f1)) in report.per_class.iter().zip(per_class) {
                assert_eq!(m.precision, p, "case {case}: precision");
                assert_eq!(m.recall, r, "case {case}: recall");
                assert_eq!(m.f1, f1, "case {case}: f1");
            }
            assert_eq!(report.accuracy, accuracy, "case {case}: accuracy");
            assert_eq!(report.macro_precision, macros[0], "case {case}");
            assert_eq!(report.macro_recall, macros[1], "case {case}");
            assert_eq!(report.macro_f1, macros[2], "case {case}");
            assert_eq!(report.weighted_precision, weighted[0], "case {case}");
            assert_eq!(report.weighted_recall, weighted[1], "case {case}");
            assert_eq!(report.weighted_f1, weighted[2], "case {case}");
        }
        Verdict::Pass
    });
}

// ---------------------------------------------------------------------------
// Criterion 3 — performance-drop fixture
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_performance_drop_fixture() {
    run_criterion(3, "performance-drop fixture", || {
        let clock = Instant::now();

        // Paired weighted aggregates of one model evaluated at home and on a
        // foreign dataset, as in the reference row.
        let mut home = aggregate(&ConfusionMatrix::from_counts(
            (1..=2).map(label).collect(),
            vec![vec![1, 0], vec![0, 1]],
        )
        .unwrap())
        .unwrap();
        let mut foreign = home.clone();
        home.accuracy = 0.7794;
        home.weighted_precision = 0.7928;
        home.weighted_recall = 0.7794;
        home.weighted_f1 = 0.7833;
        foreign.accuracy = 0.3133;
        foreign.weighted_precision = 0.491;
        foreign.weighted_recall = 0.3133;
        foreign.weighted_f1 = 0.2339;

        let drop = performance_drop(&home, &foreign);
        assert!((drop.weighted_precision - 0.30).abs() <= 0.01, "{}", drop.weighted_precision);
        assert!((drop.weighted_recall - 0.47).abs() <= 0.01, "{}", drop.weighted_recall);
        assert!((drop.weighted_f1 - 0.55).abs() <= 0.01, "{}", drop.weighted_f1);

        // Companion pair from the second reference cross-domain row; the
        // recomputed drop sits exactly one rounding step from the reported
        // value, hence the half-ulp guard.
        assert!(((0.88 - 0.28) - 0.61_f64).abs() <= 0.01 + 1e-9);

        assert!(clock.elapsed() < Duration::from_secs(1), "budget: < 1 s");
        Verdict::Pass
    });
}

// ---------------------------------------------------------------------------
// Criterion 4 — dataset-builder properties
// ---------------------------------------------------------------------------

/// Deterministic stand-in for video decoding: every frame is a flat image
/// whose level encodes (session, frame), cheap to fabricate at full frame
/// size. Pixel content is irrelevant to the planning properties under test.
struct ProceduralVideo;

impl FrameSource for ProceduralVideo {
    fn frame(&self, session: &VideoSession, frame_index: usize) -> seastate_core::Result<Image> {
        let (w, h) = session.resolution;
        let level = ((frame_index * 7919 + session.id.len() * 31) % 200) as f32 / 255.0 + 0.1;
        Ok(Image::from_elem((h, w, 3), level))
    }
}

fn stand_in_sessions() -> Vec<VideoSession> {
    (1..=8u8)
        .flat_map(|class| {
            (0..2).map(move |i| {
                let frames = 1150 + usize::from(class) * 23 + i * 11;
                VideoSession {
                    id: format!("c{class}-{i}"),
                    path: PathBuf::from(format!("sessions/c{class}-{i}")),
                    label: label(class),
                    frame_count: frames,
                    duration_s: frames as f64 / 25.0,
                    resolution: (960, 720),
                    camera_height_m: 38.5,
                    loading_condition: if i == 0 {
                        LoadingCondition::Cargo
                    } else {
                        LoadingCondition::Ballast
                    },
                    sea_region: Some(CropRegion::new(0, 340, 960, 380)),
                }
            })
        })
        .collect()
}

#[test]
fn criterion_04_dataset_builder_properties() {
    run_criterion(4, "dataset-builder properties", || {
        let clock = Instant::now();

        // Interval arithmetic oracle.
        assert_eq!(compute_sampling_interval(46_303, 750).unwrap(), 61);
        assert_eq!(compute_sampling_interval(6_393, 770).unwrap(), 8);

        let sessions = stand_in_sessions();

        // Full-size manifest-only build: per-class counts within ±10% of
        // target for every split.
        let mut opts = BuildOptions::new(
            "acceptance-ll",
            Strategy::LL,
            23,
            BuildTargets {
                train: 750,
                val: 150,
                test: 150,
            },
        );
        opts.write_images = false;
        let dir_a = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&sessions, &ProceduralVideo, &opts, dir_a.path()).unwrap();
        for split in Split::ALL {
            let target = match split {
                Split::Train => 750.0,
                Split::Val => 150.0,
                Split::Test => 150.0,
            };
            let counts = manifest.class_counts(split);
            assert_eq!(counts.len(), 8, "{split}: all classes present");
            for (&class, &count) in &counts {
                assert!(
                    (count as f64 - target).abs() <= 0.10 * target,
                    "{split} class {class}: {count} images vs target {target}"
                );
            }
        }

        // Split disjointness: no (session, frame) pair serves two splits.
        let mut seen: BTreeSet<(&str, usize)> = BTreeSet::new();
        for record in &manifest.records {
            assert!(
                seen.insert((record.session_id.as_str(), record.frame_index)),
                "frame {} of session {} sampled twice",
                record.frame_index,
                record.session_id
            );
        }

        // Determinism: a second build writes a byte-identical manifest.
        let dir_b = tempfile::tempdir().unwrap();
        build_dataset(&sessions, &ProceduralVideo, &opts, dir_b.path()).unwrap();
        let bytes_a = std::fs::read(dir_a.path().join("manifest.tsv")).unwrap();
        let bytes_b = std::fs::read(dir_b.path().join("manifest.tsv")).unwrap();
        assert!(!bytes_a.is_empty() && bytes_a == bytes_b, "manifests must match byte for byte");

        // Small build with pixels: every manifest record gets its image file
        // and the balance report agrees.
        let mut small = BuildOptions::new(
            "acceptance-r",
            Strategy::R,
            23,
            BuildTargets {
                train: 8,
                val: 2,
                test: 2,
            },
        );
        small.crop_size = 331;
        let dir_c = tempfile::tempdir().unwrap();
        let written = build_dataset(&sessions, &ProceduralVideo, &small, dir_c.path()).unwrap();
        for record in &written.records {
            assert!(
                dir_c.path().join(record.relative_path()).is_file(),
                "missing image {}",
                record.relative_path()
            );
        }
        assert!(verify_manifest(&written).balanced());

        assert!(clock.elapsed() < Duration::from_secs(120), "budget: < 2 min");
        Verdict::Pass
    });
}

// ---------------------------------------------------------------------------
// Criterion 5 — augmentation suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_augmentation_suite() {
    run_criterion(5, "augmentation suite", || {
        let clock = Instant::now();
        let mut rng = derive(0xACCE97, &[tag("criterion-5")]);

        // Blur kernels are normalized for every legal size.
        for k in [1, 3, 5, 7, 9, 13] {
            let kernel = motion_blur_kernel(k);
            let sum: f64 = kernel.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "kernel {k}: sum {sum}");
        }

        // Horizontal flip is an involution.
        let img = Image::from_shape_fn((64, 96, 3), |_| rng.gen::<f32>());
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);

        // All-off configuration is the identity (center crop at full size).
        let mut identity_cfg = AugmentConfig::disabled();
        identity_cfg.crop_out = 96;
        let square = Image::from_shape_fn((96, 96, 3), |_| rng.gen::<f32>());
        let out = augment_train(&square, &mut rng, &identity_cfg).unwrap();
        assert_eq!(out, square, "zeroed probabilities must be the identity");

        // Center crop of the native 331 strip to the 224 model input starts
        // at offset exactly 53 on both axes.
        let coords = Image::from_shape_fn((331, 331, 3), |(y, x, c)| {
            if c == 0 { x as f32 } else { y as f32 }
        });
        let cropped = center_crop(&coords, 224).unwrap();
        assert_eq!(cropped[[0, 0, 0]], 53.0);
        assert_eq!(cropped[[0, 0, 1]], 53.0);
        let mut eval_cfg = AugmentConfig::disabled();
        eval_cfg.crop_out = 224;
        let (_, trace) = augment_train_traced(&coords, &mut rng, &eval_cfg).unwrap();
        assert_eq!((trace.crop_x, trace.crop_y), (53, 53));

        // Application rates match their probabilities within binomial 3σ.
        let rates_cfg = AugmentConfig {
            crop_out: 96,
            motion_blur_prob: 0.3,
            flip_prob: 0.5,
            grayscale_prob: 0.2,
            ..AugmentConfig::default()
        };
        let source = Image::from_shape_fn((128, 128, 3), |_| rng.gen::<f32>());
        let n = 1000usize;
        let (mut blurs, mut flips, mut grays) = (0u32, 0u32, 0u32);
        let mut in_range = true;
        for _ in 0..n {
            let (out, trace) = augment_train_traced(&source, &mut rng, &rates_cfg).unwrap();
            blurs += u32::from(trace.blur);
            flips += u32::from(trace.flip);
            grays += u32::from(trace.grayscale);
            in_range &= out.iter().all(|&v| (0.0..=1.0).contains(&v));
        }
        assert!(in_range, "augmented outputs must stay in [0, 1]");
        for (name, hits, p) in [
            ("motion blur", blurs, 0.3),
            ("flip", flips, 0.5),
            ("grayscale", grays, 0.2),
        ] {
            let mean = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (f64::from(hits) - mean).abs() <= 3.0 * sigma,
                "{name}: {hits}/{n} outside {mean} ± 3·{sigma:.1}"
            );
        }

        assert!(clock.elapsed() < Duration::from_secs(60), "budget: < 1 min");
        Verdict::Pass
    });
}

// ---------------------------------------------------------------------------
// Criterion 6 — trainer protocol
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_trainer_protocol() {
    run_criterion(6, "trainer protocol", || {
        let clock = Instant::now();

        // Plateau schedule against the reference simulation: the first epoch
        // establishes the best, each later flat epoch ages the patience
        // counter, reduction divides by 5 down to the 1e-6 floor.
        let plateau = PlateauConfig::default();
        let flat = |n: usize| vec![0.5; n];
        assert_eq!(plateau_lr(&flat(30), 1e-4, &plateau), 1e-4, "patience not yet exhausted");
        assert_eq!(plateau_lr(&flat(31), 1e-4, &plateau), 2e-5, "first reduction");
        let second = plateau_lr(&flat(61), 1e-4, &plateau);
        assert!((second - 4e-6).abs() / 4e-6 < 1e-12, "second reduction: {second:e}");
        assert_eq!(plateau_lr(&flat(93), 1e-4, &plateau), 1e-6, "clamped at min_lr");
        let improving: Vec<f64> = (0..120).map(|i| f64::from(i) / 120.0).collect();
        assert_eq!(plateau_lr(&improving, 1e-4, &plateau), 1e-4, "improvement resets patience");

        // Stage 1 leaves every backbone weight bit-identical while the head
        // moves.
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            num_classes: 3,
            sessions_per_class: 1,
            images_per_class: BuildTargets {
                train: 6,
                val: 3,
                test: 3,
            },
            seed: 33,
            ..SynthConfig::default()
        };
        let manifest = generate_dataset(dir.path(), &synth, "freeze-check", Strategy::LL, true).unwrap();
        let spec = surrogate_spec();
        let mut model =
            build_classifier(spec, 3, &PretrainedAssets::empty(), HeadConfig::default()).unwrap();
        let backbone_before = model.backbone_weights();
        let all_before = model.snapshot_weights();
        let mut cfg = TrainConfig::for_spec(&spec);
        cfg.stage1.epochs = 2;
        cfg.stage2.epochs = 0;
        cfg.batch_size = 4;
        cfg.augment = AugmentConfig::disabled();
        train_two_stage(&mut model, dir.path(), &manifest, &cfg, None).unwrap();
        assert_eq!(model.backbone_weights(), backbone_before, "backbone must stay frozen");
        assert_ne!(model.snapshot_weights(), all_before, "head must train");

        // Uniform 8-class prediction costs ln(8) nats per sample.
        let logits = ndarray::Array2::<f32>::zeros((4, 8));
        let (loss, _, _) = softmax_cross_entropy(&logits, &[0, 3, 5, 7]).unwrap();
        assert!((loss - 8.0_f64.ln()).abs() <= 1e-6, "loss {loss}");

        assert!(clock.elapsed() < Duration::from_secs(60), "budget: < 1 min");
        Verdict::Pass
    });
}

// ---------------------------------------------------------------------------
// Criterion 7 — end-to-end desk-scale learning
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_end_to_end_learning() {
    run_criterion(7, "end-to-end desk-scale learning", || {
        let clock = Instant::now();

        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            num_classes: 8,
            images_per_class: BuildTargets {
                train: 300,
                val: 40,
                test: 100,
            },
            image_size: 224,
            seed: 99,
            ..SynthConfig::default()
        };
        let manifest = generate_dataset(dir.path(), &synth, "e2e", Strategy::R, true).unwrap();

        let spec = surrogate_spec();
        let mut model =
            build_classifier(spec, 8, &PretrainedAssets::empty(), HeadConfig::default()).unwrap();
        let mut cfg = TrainConfig::for_spec(&spec);
        // Reduced protocol: 5 head-only epochs, 30 fine-tuning epochs. The
        // epoch budget is fixed by the criterion, so the rate is raised to
        // converge within it.
        cfg.stage1 = StageConfig {
            epochs: 5,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
        };
        cfg.stage2 = StageConfig {
            epochs: 30,
            lr: 1e-3,
            optimizer: OptimizerKind::RmsProp,
        };
        cfg.augment = AugmentConfig::disabled();
        cfg.augment.crop_out = 224;
        cfg.seed = 1;

        let result = train_two_stage(&mut model, dir.path(), &manifest, &cfg, None).unwrap();
        assert_eq!(result.log.records.len(), 35, "5 + 30 epochs");

        let report = evaluate_model(&mut model, dir.path(), &manifest, Split::Test, None).unwrap();
        assert_eq!(report.total, 800, "8 classes x 100 test images");
        assert!(
            report.macro_f1 >= 0.90,
            "macro f1 {:.3} below the 0.90 bar",
            report.macro_f1
        );

        assert!(
            clock.elapsed() <= Duration::from_secs(2 * 3600),
            "budget: <= 2 h CPU-only"
        );
        Verdict::Pass
    });
}

// ---------------------------------------------------------------------------
// Criterion 8 — training-size ablation shape
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_ablation_shape() {
    run_criterion(8, "ablation shape", || {
        let clock = Instant::now();

        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            num_classes: 8,
            images_per_class: BuildTargets {
                train: 375,
                val: 40,
                test: 100,
            },
            image_size: 224,
            seed: 42,
            ..SynthConfig::default()
        };
        let manifest = generate_dataset(dir.path(), &synth, "ablate", Strategy::R, true).unwrap();

        let spec = surrogate_spec();
        let mut cfg = TrainConfig::for_spec(&spec);
        cfg.stage1 = StageConfig {
            epochs: 2,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
        };
        cfg.stage2 = StageConfig {
            epochs: 6,
            lr: 1e-3,
            optimizer: OptimizerKind::RmsProp,
        };
        cfg.augment = AugmentConfig::disabled();
        cfg.augment.crop_out = 224;
        cfg.seed = 1;

        let sizes = [10usize, 40, 160, 375];
        let points = ablate_training_size(
            dir.path(),
            &manifest,
            &sizes,
            spec,
            HeadConfig::default(),
            &PretrainedAssets::empty(),
            &cfg,
        )
        .unwrap();

        assert_eq!(points.len(), sizes.len());
        for (point, &size) in points.iter().zip(&sizes) {
            assert_eq!(point.per_class_train, size);
            assert_eq!(point.train_images, size * 8);
        }
        for pair in points.windows(2) {
            assert!(
                pair[1].macro_f1 >= pair[0].macro_f1 - 0.01,
                "f1 fell more than one point: {:.3} -> {:.3} at {} images/class",
                pair[0].macro_f1,
                pair[1].macro_f1,
                pair[1].per_class_train
            );
            assert!(
                pair[1].train_seconds > pair[0].train_seconds,
                "training time must strictly increase: {:.2}s -> {:.2}s",
                pair[0].train_seconds,
                pair[1].train_seconds
            );
        }

        assert!(clock.elapsed() <= Duration::from_secs(3600), "budget: <= 1 h");
        Verdict::Pass
    });
}

// ---------------------------------------------------------------------------
// Criterion 9 — stage-2 parameter budgets (needs real pretrained assets)
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_parameter_budgets() {
    run_criterion(9, "stage-2 parameter budgets", || {
        let registry = match std::env::var_os(ASSET_REGISTRY_ENV) {
            Some(path) => PathBuf::from(path),
            None => {
                return Verdict::Skip(format!(
                    "pretrained backbone weights are not distributed with this \
                     repository; point {ASSET_REGISTRY_ENV} at an asset registry \
                     file to enable this check"
                ))
            }
        };
        let assets = PretrainedAssets::load(&registry).unwrap();
        let budgets = [
            (Architecture::Resnet101, 24_800_000u64),
            (Architecture::VitB32, 21_300_000),
            (Architecture::MobilenetV2, 700_000),
            (Architecture::NasnetMobile, 1_600_000),
        ];
        for (arch, budget) in budgets {
            let mut model =
                build_classifier(spec_for(arch), 8, &assets, HeadConfig::default()).unwrap();
            model.configure_stage(Stage::FineTune);
            let actual = model.trainable_param_count();
            let deviation = (actual as f64 - budget as f64).abs() / budget as f64;
            assert!(
                deviation <= 0.05,
                "{arch}: {actual} trainable parameters deviate {:.1}% from {budget}",
                deviation * 100.0
            );
            model.check_stage2_budget().unwrap();
        }
        Verdict::Pass
    });
}

// ---------------------------------------------------------------------------
// Criterion 10 — profiler consistency
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_profiler_consistency() {
    run_criterion(10, "profiler consistency", || {
        let dir = tempfile::tempdir().unwrap();
        let model = build_classifier(
            surrogate_spec(),
            8,
            &PretrainedAssets::empty(),
            HeadConfig::default(),
        )
        .unwrap();
        let bundle = dir.path().join("bundle");
        model.save_bundle(&bundle).unwrap();

        let first = profile_inference(&bundle, 16, 12, 2).unwrap();
        let second = profile_inference(&bundle, 16, 12, 2).unwrap();
        first.check_consistency().unwrap();
        second.check_consistency().unwrap();

        let a = first.throughput_images_per_s.unwrap();
        let b = second.throughput_images_per_s.unwrap();
        let spread = (a - b).abs() / a.max(b);
        assert!(
            spread <= 0.15,
            "consecutive runs disagree by {:.1}% ({a:.1} vs {b:.1} images/s)",
            spread * 100.0
        );

        let peak = first.peak_memory_mb.expect("peak RSS available on this platform");
        let model_only = first.model_memory_mb.expect("model memory always reported");
        assert!(peak >= model_only, "peak {peak} MB below model-only {model_only} MB");

        // Every report column, training-side and inference-side.
        let rendered = first.render();
        for column in [
            "model",
            "input size (px)",
            "batch size",
            "epochs",
            "total training time (h:mm)",
            "training time per epoch (s)",
            "inference batches",
            "warmup batches",
            "avg inference throughput (images/s)",
            "compute-only throughput (images/s)",
            "model-only memory (MB)",
            "peak memory (MB)",
            "memory source",
            "hardware",
        ] {
            assert!(rendered.contains(column), "report misses the '{column}' column");
        }
        Verdict::Pass
    });
}
