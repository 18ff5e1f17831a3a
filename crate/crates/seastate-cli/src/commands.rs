//! Subcommand implementations. Every command resolves paths against the
//! workdir, writes its resolved configuration snapshot before any other
//! output, and leaves previously written run directories untouched (`report`
//! excepted — it only adds derived files to an experiment directory).

use std::path::{Path, PathBuf};

use seastate_core::augment::augment_train;
use seastate_core::dataset::{
    build_dataset, load_split, read_session_index, verify_manifest, BuildOptions, DatasetManifest,
    FrameDirSource, Split, VideoSession,
};
use seastate_core::error::{Error, Result};
use seastate_core::eval::{cross_dataset_eval, evaluate_model, EvalReport};
use seastate_core::img::{contact_sheet, save_png};
use seastate_core::model::{
    build_classifier, spec_for, ClassifierModel, HeadConfig, PretrainedAssets, ASSET_REGISTRY_ENV,
};
use seastate_core::profile::{profile_inference, profile_training, ResourceProfile};
use seastate_core::rng::{derive, tag};
use seastate_core::synth::generate_dataset;
use seastate_core::train::{
    ablate_training_size, ablation_to_tsv, train_two_stage, AblationPoint, ExperimentResult,
    TrainingLog,
};

use crate::config::{RunConfig, SNAPSHOT_FILE};
use crate::plot;

pub const EVAL_REPORT_JSON: &str = "eval_report.json";
pub const EVAL_REPORT_TSV: &str = "eval_report.tsv";
pub const CONFUSION_TSV: &str = "confusion.tsv";
pub const ABLATION_TSV: &str = "ablation.tsv";
pub const TRAIN_LOG_TSV: &str = "train_log.tsv";

/// A command invocation: the merged configuration plus the base directory
/// every relative path resolves against.
pub struct Ctx {
    pub workdir: PathBuf,
    pub config: RunConfig,
}

impl Ctx {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.workdir.join(path)
        }
    }

    fn output_dir(&self) -> Result<PathBuf> {
        if self.config.output_dir.as_os_str().is_empty() {
            return Err(Error::Config(
                "output_dir is not set (use --out or the output_dir key)".into(),
            ));
        }
        Ok(self.resolve(&self.config.output_dir))
    }

    /// Resolve the run directory, refuse to reuse one that already holds a
    /// run, and persist the configuration snapshot before any work happens.
    fn begin_run(&self) -> Result<PathBuf> {
        let dir = self.output_dir()?;
        if dir.join(SNAPSHOT_FILE).exists() {
            return Err(Error::Config(format!(
                "{} already contains a run; pick a fresh output directory",
                dir.display()
            )));
        }
        self.config.write_snapshot(&dir)?;
        Ok(dir)
    }

    fn dataset_dir(&self) -> Result<PathBuf> {
        let dir = self.config.dataset.dir.as_ref().ok_or_else(|| {
            Error::Config("dataset.dir is not set (use --dataset or the dataset.dir key)".into())
        })?;
        Ok(self.resolve(dir))
    }

    fn load_manifest(&self) -> Result<(PathBuf, DatasetManifest)> {
        let root = self.dataset_dir()?;
        let manifest = DatasetManifest::read_from(&root.join("manifest.tsv"))?;
        Ok((root, manifest))
    }

    /// Pretrained-asset registry: the environment variable wins over the
    /// configured path; with neither, the registry is empty.
    fn assets(&self) -> Result<PretrainedAssets> {
        let path = match std::env::var_os(ASSET_REGISTRY_ENV) {
            Some(p) if !p.is_empty() => Some(PathBuf::from(p)),
            _ => self.config.model.asset_registry.clone(),
        };
        match path {
            Some(p) => PretrainedAssets::load(&self.resolve(&p)),
            None => Ok(PretrainedAssets::empty()),
        }
    }

    fn build_model(&self) -> Result<ClassifierModel> {
        let spec = spec_for(self.config.model.architecture);
        let head = HeadConfig {
            seed: self.config.model.head_seed,
            vit_hidden: self.config.model.vit_head_width,
        };
        build_classifier(spec, self.config.model.num_classes, &self.assets()?, head)
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_eval_artifacts(dir: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Runtime(format!("serializing evaluation report: {e}")))?;
    write(&dir.join(EVAL_REPORT_JSON), &json)?;
    write(&dir.join(EVAL_REPORT_TSV), &report.render_table())?;
    write(&dir.join(CONFUSION_TSV), &report.confusion.render_grid())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth / build-dataset
// ---------------------------------------------------------------------------

pub fn synth(ctx: &Ctx) -> Result<()> {
    let section = &ctx.config.dataset;
    let synth_cfg = section.synth.clone().ok_or_else(|| {
        Error::Config("synth needs a [dataset.synth] section describing the generator".into())
    })?;
    let root = ctx.dataset_dir()?;
    if root.join("manifest.tsv").exists() {
        return Err(Error::Config(format!(
            "{} already contains a dataset",
            root.display()
        )));
    }
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    ctx.config.write_snapshot(&root)?;
    let manifest = generate_dataset(&root, &synth_cfg, &section.name, section.strategy, true)?;
    let balance = verify_manifest(&manifest);
    write(&root.join("balance_report.txt"), &balance.render())?;
    println!(
        "wrote {} images across {} classes to {}",
        manifest.records.len(),
        manifest.label_range.count(),
        root.display()
    );
    print!("{}", balance.render());
    Ok(())
}

pub fn build_dataset_cmd(ctx: &Ctx) -> Result<()> {
    let section = &ctx.config.dataset;
    let index_path = section.session_index.as_ref().ok_or_else(|| {
        Error::Config("build-dataset needs dataset.session_index (or --session-index)".into())
    })?;
    let index_path = ctx.resolve(index_path);
    let label_range = section.label_range()?;
    let entries = read_session_index(&index_path, label_range)?;
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "session index {} lists no sessions",
            index_path.display()
        )));
    }
    let index_dir = index_path.parent().unwrap_or(Path::new("."));
    let mut sessions: Vec<VideoSession> = Vec::with_capacity(entries.len());
    for mut entry in entries {
        if entry.path.is_relative() {
            entry.path = index_dir.join(&entry.path);
        }
        let (frame_count, resolution) = FrameDirSource::probe(&entry.path)?;
        sessions.push(entry.into_session(frame_count, resolution, section.fps));
    }

    let root = ctx.dataset_dir()?;
    if root.join("manifest.tsv").exists() {
        return Err(Error::Config(format!(
            "{} already contains a dataset",
            root.display()
        )));
    }
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    ctx.config.write_snapshot(&root)?;

    let mut opts = BuildOptions::new(&section.name, section.strategy, section.seed, section.targets());
    opts.label_range = label_range;
    opts.ll_offset = (section.ll_offset_x, section.ll_offset_y);
    opts.holdout = section.holdout;
    opts.tolerance = section.tolerance;
    opts.crop_size = section.crop_size;
    let manifest = build_dataset(&sessions, &FrameDirSource, &opts, &root)?;
    let balance = verify_manifest(&manifest);
    write(&root.join("balance_report.txt"), &balance.render())?;
    println!(
        "built {} records from {} sessions into {}",
        manifest.records.len(),
        sessions.len(),
        root.display()
    );
    print!("{}", balance.render());
    Ok(())
}

// ---------------------------------------------------------------------------
// augment-preview
// ---------------------------------------------------------------------------

pub fn augment_preview(ctx: &Ctx, rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Usage("preview needs at least a 1x1 grid".into()));
    }
    let (root, manifest) = ctx.load_manifest()?;
    let out_dir = ctx.begin_run()?;
    let spec = spec_for(ctx.config.model.architecture);
    let train_cfg = ctx.config.training.merged(&spec);
    let aug = &train_cfg.augment;

    let split = load_split(&root, &manifest, Split::Train)?;
    let mut rng = derive(train_cfg.seed, &[tag("preview")]);
    let mut tiles = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        // first column shows the untouched source of each row
        let idx = (i / cols) * (split.len() / rows.max(1)).max(1) % split.len();
        let image = split.image(idx);
        if i % cols == 0 {
            tiles.push(seastate_core::augment::prepare_eval(&image, aug.crop_out)?);
        } else {
            tiles.push(augment_train(&image, &mut rng, aug)?);
        }
    }
    let sheet = contact_sheet(&tiles, cols)?;
    let path = out_dir.join("augment_preview.png");
    save_png(&sheet, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train / evaluate / cross-eval / ablate-size
// ---------------------------------------------------------------------------

fn summary_tsv(result: &ExperimentResult, eval: Option<&EvalReport>) -> String {
    let mut out = String::from("key\tvalue\n");
    let mut push = |k: &str, v: String| out.push_str(&format!("{k}\t{v}\n"));
    push("model", result.spec.name.to_string());
    push("best_stage", result.best_stage.to_string());
    push("best_epoch", result.best_epoch.to_string());
    push("best_val_acc", format!("{:.6}", result.best_val_acc));
    push("epochs_logged", result.log.records.len().to_string());
    push("manifest_hash", result.manifest_hash.clone());
    if let Some(r) = eval {
        push("test_accuracy", format!("{:.6}", r.accuracy));
        push("test_macro_f1", format!("{:.6}", r.macro_f1));
        push("test_weighted_f1", format!("{:.6}", r.weighted_f1));
    }
    out
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let (root, manifest) = ctx.load_manifest()?;
    let spec = spec_for(ctx.config.model.architecture);
    let train_cfg = ctx.config.training.merged(&spec);

    // snapshot records the fully resolved configuration
    let mut snapshot = ctx.config.clone();
    snapshot.training = crate::config::TrainingSection::materialized(&train_cfg);
    let out_dir = Ctx {
        workdir: ctx.workdir.clone(),
        config: snapshot,
    }
    .begin_run()?;

    let mut model = ctx.build_model()?;
    let mut result = train_two_stage(&mut model, &root, &manifest, &train_cfg, Some(&out_dir))?;

    let split = ctx.config.evaluation.split;
    let mapping = match &ctx.config.evaluation.mapping {
        Some(m) => Some(m.to_mapping()?),
        None => None,
    };
    let report = evaluate_model(&mut model, &root, &manifest, split, mapping.as_ref())?;
    write_eval_artifacts(&out_dir, &report)?;
    result.eval_report = Some(out_dir.join(EVAL_REPORT_JSON));
    write(&out_dir.join("summary.tsv"), &summary_tsv(&result, Some(&report)))?;

    println!(
        "trained {} for {} epochs; best val accuracy {:.4} (stage {} epoch {})",
        result.spec.name,
        result.log.records.len(),
        result.best_val_acc,
        result.best_stage,
        result.best_epoch
    );
    println!(
        "{} split: accuracy {:.4}, macro F1 {:.4}",
        split, report.accuracy, report.macro_f1
    );
    print!("{}", report.render_table());
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

pub fn evaluate(ctx: &Ctx, bundle: &Path) -> Result<()> {
    let (root, manifest) = ctx.load_manifest()?;
    let out_dir = ctx.begin_run()?;
    let mut model = ClassifierModel::load_bundle(&ctx.resolve(bundle))?;
    let mapping = match &ctx.config.evaluation.mapping {
        Some(m) => Some(m.to_mapping()?),
        None => None,
    };
    let split = ctx.config.evaluation.split;
    let report = evaluate_model(&mut model, &root, &manifest, split, mapping.as_ref())?;
    write_eval_artifacts(&out_dir, &report)?;
    println!(
        "{} on {} ({} split): accuracy {:.4}, macro F1 {:.4}",
        model.spec.name,
        manifest.name,
        split,
        report.accuracy,
        report.macro_f1
    );
    print!("{}", report.render_table());
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

pub fn cross_eval(ctx: &Ctx, bundle: &Path, home: &Path, foreign: Option<&Path>) -> Result<()> {
    let foreign = match foreign {
        Some(f) => f.to_path_buf(),
        None => ctx.config.evaluation.foreign.clone().ok_or_else(|| {
            Error::Config("cross-eval needs a foreign dataset (--foreign or evaluation.foreign)".into())
        })?,
    };
    let out_dir = ctx.begin_run()?;
    let mut model = ClassifierModel::load_bundle(&ctx.resolve(bundle))?;

    let home_root = ctx.resolve(home);
    let foreign_root = ctx.resolve(&foreign);
    let home_manifest = DatasetManifest::read_from(&home_root.join("manifest.tsv"))?;
    let foreign_manifest = DatasetManifest::read_from(&foreign_root.join("manifest.tsv"))?;

    let mapping = match &ctx.config.evaluation.mapping {
        Some(m) => m.to_mapping()?,
        None => seastate_core::eval::LabelMapping {
            model_range: model.label_range,
            dataset_range: foreign_manifest.label_range,
        },
    };
    let split = ctx.config.evaluation.split;
    let report = cross_dataset_eval(
        &mut model,
        &home_root,
        &home_manifest,
        &foreign_root,
        &foreign_manifest,
        split,
        &mapping,
    )?;

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Runtime(format!("serializing cross-eval report: {e}")))?;
    write(&out_dir.join("cross_eval.json"), &json)?;
    write(&out_dir.join("cross_eval.tsv"), &report.render_table())?;
    print!("{}", report.render_table());
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

pub fn ablate_size(ctx: &Ctx, sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Usage("ablate-size needs --sizes (e.g. --sizes 10,40,160)".into()));
    }
    let (root, manifest) = ctx.load_manifest()?;
    let spec = spec_for(ctx.config.model.architecture);
    let train_cfg = ctx.config.training.merged(&spec);
    let mut snapshot = ctx.config.clone();
    snapshot.training = crate::config::TrainingSection::materialized(&train_cfg);
    let out_dir = Ctx {
        workdir: ctx.workdir.clone(),
        config: snapshot,
    }
    .begin_run()?;

    let head = HeadConfig {
        seed: ctx.config.model.head_seed,
        vit_hidden: ctx.config.model.vit_head_width,
    };
    let points = ablate_training_size(
        &root,
        &manifest,
        sizes,
        spec,
        head,
        &ctx.assets()?,
        &train_cfg,
    )?;
    let table = ablation_to_tsv(&points);
    write(&out_dir.join(ABLATION_TSV), &table)?;
    print!("{table}");
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// profile
// ---------------------------------------------------------------------------

/// Rebuild the training-side experiment record from a run directory written
/// by `train` (config snapshot + training log).
fn load_experiment(dir: &Path) -> Result<ExperimentResult> {
    let snapshot_path = dir.join(SNAPSHOT_FILE);
    if !snapshot_path.exists() {
        return Err(Error::Data(format!(
            "{} is not a run directory (missing {SNAPSHOT_FILE})",
            dir.display()
        )));
    }
    let snapshot = RunConfig::load(&snapshot_path)?;
    let spec = spec_for(snapshot.model.architecture);
    let config = snapshot.training.merged(&spec);
    let log = TrainingLog::read_from(&dir.join(TRAIN_LOG_TSV))?;
    let best = log.best().ok_or_else(|| {
        Error::Data(format!("{} holds an empty training log", dir.display()))
    })?;
    Ok(ExperimentResult {
        best_stage: best.stage,
        best_epoch: best.epoch,
        best_val_acc: best.val_acc,
        manifest_hash: String::new(),
        best_bundle: Some(dir.join("best")).filter(|p| p.exists()),
        final_bundle: Some(dir.join("final")).filter(|p| p.exists()),
        eval_report: Some(dir.join(EVAL_REPORT_JSON)).filter(|p| p.exists()),
        log,
        spec,
        config,
    })
}

pub fn profile(ctx: &Ctx, bundle: Option<&Path>, experiment: Option<&Path>) -> Result<()> {
    if bundle.is_none() && experiment.is_none() {
        return Err(Error::Usage(
            "profile needs --bundle (inference) and/or --experiment (training)".into(),
        ));
    }
    let out_dir = ctx.begin_run()?;
    let mut profiles: Vec<(&str, ResourceProfile)> = Vec::new();
    if let Some(dir) = experiment {
        let run = load_experiment(&ctx.resolve(dir))?;
        profiles.push(("training", profile_training(&run)?));
    }
    if let Some(bundle) = bundle {
        let p = ctx.config.profiling;
        profiles.push((
            "inference",
            profile_inference(
                &ctx.resolve(bundle),
                p.batch_size,
                p.num_batches,
                p.warmup_batches,
            )?,
        ));
    }
    for (kind, profile) in &profiles {
        profile.check_consistency()?;
        write(&out_dir.join(format!("profile_{kind}.tsv")), &profile.to_tsv())?;
        println!("--- {kind} profile ---");
        print!("{}", profile.render());
    }
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn report(ctx: &Ctx, experiment: &Path) -> Result<()> {
    let dir = ctx.resolve(experiment);
    let log_path = dir.join(TRAIN_LOG_TSV);
    let eval_path = dir.join(EVAL_REPORT_JSON);
    let ablation_path = dir.join(ABLATION_TSV);

    let mut rendered = Vec::new();
    let mut absent = Vec::new();

    if log_path.exists() {
        let log = TrainingLog::read_from(&log_path)?;
        let out = dir.join("training_curves.svg");
        plot::training_curves(&log, &out)?;
        rendered.push(out);
    } else {
        absent.push(log_path);
    }

    if eval_path.exists() {
        let text = std::fs::read_to_string(&eval_path).map_err(|e| Error::io(&eval_path, e))?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", eval_path.display())))?;
        let out = dir.join("confusion_heatmap.svg");
        plot::confusion_heatmap(&report, &out)?;
        rendered.push(out);
    } else {
        absent.push(eval_path);
    }

    if ablation_path.exists() {
        let points = read_ablation_tsv(&ablation_path)?;
        let out = dir.join("ablation_curves.svg");
        plot::ablation_curves(&points, &out)?;
        rendered.push(out);
    } else {
        absent.push(ablation_path);
    }

    if rendered.is_empty() {
        let listing = absent
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::Data(format!(
            "nothing to report: no inputs found (absent: {listing})"
        )));
    }
    for path in &rendered {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn read_ablation_tsv(path: &Path) -> Result<Vec<AblationPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "per_class_train\ttrain_images\tmacro_f1\ttrain_seconds")) => {}
        _ => return Err(err(1, "unexpected ablation table header")),
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(i + 1, "expected 4 fields"));
        }
        points.push(AblationPoint {
            per_class_train: fields[0].parse().map_err(|_| err(i + 1, "bad size"))?,
            train_images: fields[1].parse().map_err(|_| err(i + 1, "bad count"))?,
            macro_f1: fields[2].parse().map_err(|_| err(i + 1, "bad f1"))?,
            train_seconds: fields[3].parse().map_err(|_| err(i + 1, "bad seconds"))?,
        });
    }
    Ok(points)
}
