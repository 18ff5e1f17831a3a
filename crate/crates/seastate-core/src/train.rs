//! Two-stage transfer-training protocol: a head-only warmup stage with Adam,
//! then partial fine-tuning with RMSProp under a reduce-on-plateau schedule
//! keyed to validation accuracy. Also hosts the training-set-size ablation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::augment::{augment_train, prepare_eval, AugmentConfig};
use crate::dataset::{load_split, DatasetManifest, Split, SplitData};
use crate::error::{Error, Result};
use crate::model::{
    build_classifier, ArchitectureSpec, ClassifierModel, HeadConfig, PretrainedAssets, Stage,
};
use crate::nn::{softmax_cross_entropy, Adam, Optimizer, RmsProp, Tensor};
use crate::rng::{derive, tag};

// ---------------------------------------------------------------------------
// Reduce-on-plateau schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    /// Divisor applied to the learning rate on each reduction.
    pub factor: f64,
    /// Reduce after this many consecutive non-improving epochs.
    pub patience: usize,
    pub min_lr: f64,
    /// Improvements must exceed the previous best by more than this.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 5.0,
            patience: 30,
            min_lr: 1e-6,
            threshold: 1e-6,
        }
    }
}

/// Plateau tracker. The first observation always establishes the best; each
/// reduction resets the patience counter.
#[derive(Debug, Clone)]
pub struct PlateauState {
    best: f64,
    wait: usize,
    lr: f64,
}

impl PlateauState {
    pub fn new(initial_lr: f64) -> Self {
        PlateauState {
            best: f64::NEG_INFINITY,
            wait: 0,
            lr: initial_lr,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's monitored value; returns the learning rate for the
    /// next epoch.
    pub fn observe(&mut self, value: f64, cfg: &PlateauConfig) -> f64 {
        if value > self.best + cfg.threshold {
            self.best = value;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= cfg.patience {
                self.lr = (self.lr / cfg.factor).max(cfg.min_lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Learning rate in force after observing a whole history, as a pure
/// function; the loop in `train_two_stage` feeds the same state epoch by
/// epoch.
pub fn plateau_lr(history: &[f64], initial_lr: f64, cfg: &PlateauConfig) -> f64 {
    let mut state = PlateauState::new(initial_lr);
    for &v in history {
        state.observe(v, cfg);
    }
    state.lr()
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl OptimizerKind {
    fn build(self, lr: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
            OptimizerKind::RmsProp => Box::new(RmsProp::new(lr)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub batch_size: usize,
    pub plateau: PlateauConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Restore the best-validation weights into the model after training.
    pub keep_best: bool,
}

impl TrainConfig {
    /// Protocol defaults for a backbone: stage 1 is 30 epochs of Adam at
    /// 1e-4 on the head alone; stage 2 fine-tunes with RMSProp at 1e-4 for
    /// the spec's epoch budget.
    pub fn for_spec(spec: &ArchitectureSpec) -> Self {
        TrainConfig {
            stage1: StageConfig {
                epochs: 30,
                lr: 1e-4,
                optimizer: OptimizerKind::Adam,
            },
            stage2: StageConfig {
                epochs: spec.stage2_epochs,
                lr: 1e-4,
                optimizer: OptimizerKind::RmsProp,
            },
            batch_size: spec.batch_size,
            plateau: PlateauConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            keep_best: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.stage1.epochs + self.stage2.epochs == 0 {
            return Err(Error::Config("at least one training epoch is required".into()));
        }
        for (name, stage) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if !(stage.lr > 0.0 && stage.lr.is_finite()) {
                return Err(Error::Config(format!(
                    "{name}: learning rate must be positive, got {}",
                    stage.lr
                )));
            }
        }
        if !(self.plateau.factor > 1.0) {
            return Err(Error::Config(format!(
                "plateau factor must exceed 1, got {}",
                self.plateau.factor
            )));
        }
        if self.plateau.patience == 0 {
            return Err(Error::Config("plateau patience must be positive".into()));
        }
        self.augment.validate()
    }
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    /// 1-based epoch index within its stage.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate in force during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_COLUMNS: &str = "stage\tepoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc\tlr\tseconds";

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(LOG_COLUMNS);
        out.push('\n');
        for r in &self.records {
            // metrics use Rust's shortest-roundtrip float rendering so a
            // written log rereads bit-identically
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{:e}\t{:.3}\n",
                r.stage, r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr, r.seconds
            ));
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == LOG_COLUMNS => {}
            _ => return Err(parse_err(1, format!("expected header '{LOG_COLUMNS}'"))),
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 8 {
                return Err(parse_err(i + 1, format!("expected 8 fields, got {}", fields.len())));
            }
            let num = |j: usize| -> Result<f64> {
                fields[j]
                    .parse()
                    .map_err(|e| parse_err(i + 1, format!("field {}: {e}", j + 1)))
            };
            records.push(EpochRecord {
                stage: fields[0]
                    .parse()
                    .map_err(|e| parse_err(i + 1, format!("stage: {e}")))?,
                epoch: fields[1]
                    .parse()
                    .map_err(|e| parse_err(i + 1, format!("epoch: {e}")))?,
                train_loss: num(2)?,
                train_acc: num(3)?,
                val_loss: num(4)?,
                val_acc: num(5)?,
                lr: num(6)?,
                seconds: num(7)?,
            });
        }
        Ok(TrainingLog { records })
    }

    /// Structural invariants: stage 1 precedes stage 2, epochs count up from
    /// 1 within each stage, every metric is finite, and the stage-2 learning
    /// rate never increases and never sinks below the plateau floor.
    pub fn validate(&self, plateau: &PlateauConfig) -> Result<()> {
        let mut prev: Option<&EpochRecord> = None;
        for r in &self.records {
            if !(r.stage == 1 || r.stage == 2) {
                return Err(Error::Data(format!("log stage {} out of range", r.stage)));
            }
            for (name, v) in [
                ("train_loss", r.train_loss),
                ("train_acc", r.train_acc),
                ("val_loss", r.val_loss),
                ("val_acc", r.val_acc),
                ("lr", r.lr),
            ] {
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "stage {} epoch {}: non-finite {name}",
                        r.stage, r.epoch
                    )));
                }
            }
            match prev {
                None => {
                    if r.epoch != 1 {
                        return Err(Error::Data("log does not start at epoch 1".into()));
                    }
                }
                Some(p) => {
                    let ok = (r.stage == p.stage && r.epoch == p.epoch + 1)
                        || (r.stage == p.stage + 1 && r.epoch == 1);
                    if !ok {
                        return Err(Error::Data(format!(
                            "log jumps from stage {} epoch {} to stage {} epoch {}",
                            p.stage, p.epoch, r.stage, r.epoch
                        )));
                    }
                    if r.stage == 2 && p.stage == 2 {
                        if r.lr > p.lr {
                            return Err(Error::Data(format!(
                                "stage-2 learning rate rose at epoch {}",
                                r.epoch
                            )));
                        }
                    }
                }
            }
            if r.stage == 2 && r.lr < plateau.min_lr {
                return Err(Error::Data(format!(
                    "stage-2 learning rate {} fell below the floor {}",
                    r.lr, plateau.min_lr
                )));
            }
            prev = Some(r);
        }
        Ok(())
    }

    /// Record with the highest validation accuracy (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().reduce(|best, r| {
            if r.val_acc > best.val_acc {
                r
            } else {
                best
            }
        })
    }

    /// Equality over everything except wall-clock timings.
    pub fn equivalent_ignoring_time(&self, other: &TrainingLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                (a.stage, a.epoch) == (b.stage, b.epoch)
                    && a.train_loss == b.train_loss
                    && a.train_acc == b.train_acc
                    && a.val_loss == b.val_loss
                    && a.val_acc == b.val_acc
                    && a.lr == b.lr
            })
    }
}

// ---------------------------------------------------------------------------
// Two-stage training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub log: TrainingLog,
    /// Snapshot of the spec and config the run used; together with the seed
    /// and manifest hash this reconstructs the experiment.
    pub spec: ArchitectureSpec,
    pub config: TrainConfig,
    pub best_stage: u8,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// SHA-256 of the training manifest, tying the result to its data.
    pub manifest_hash: String,
    /// Bundle of the best-validation weights, when an output dir was given.
    pub best_bundle: Option<PathBuf>,
    /// Bundle of the final-epoch weights, when an output dir was given.
    pub final_bundle: Option<PathBuf>,
    /// Evaluation report file, once an evaluation has been attached.
    pub eval_report: Option<PathBuf>,
}

struct TrainerState<'a> {
    train: &'a SplitData,
    val: &'a SplitData,
    log: TrainingLog,
    best: Option<(u8, usize, f64)>,
    best_weights: Option<Vec<f32>>,
    last_good: Vec<f32>,
}

fn batch_targets(data: &SplitData, indices: &[usize], min_label: u8) -> Vec<usize> {
    indices
        .iter()
        .map(|&i| usize::from(data.label(i).value() - min_label))
        .collect()
}

fn count_hits(probs: &ndarray::Array2<f64>, targets: &[usize]) -> usize {
    probs
        .rows()
        .into_iter()
        .zip(targets)
        .filter(|(row, &t)| {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(i, _)| i)
                .expect("non-empty row");
            arg == t
        })
        .count()
}

/// Center-crop validation pass: mean loss and accuracy, or NaN loss when the
/// forward pass stops being finite.
fn validate_epoch(model: &mut ClassifierModel, val: &SplitData, batch: usize) -> Result<(f64, f64)> {
    let input = model.spec.input_size;
    let min_label = model.label_range.min;
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut index = 0;
    while index < val.len() {
        let end = (index + batch).min(val.len());
        let indices: Vec<usize> = (index..end).collect();
        let images: Vec<crate::img::Image> = indices
            .iter()
            .map(|&i| prepare_eval(&val.image(i), input))
            .collect::<Result<_>>()?;
        let targets = batch_targets(val, &indices, min_label);
        let logits = model.forward_logits(&images)?;
        if !logits.iter().all(|v| v.is_finite()) {
            return Ok((f64::NAN, 0.0));
        }
        let (loss, _, probs) = softmax_cross_entropy(&logits, &targets)?;
        loss_sum += loss * indices.len() as f64;
        hits += count_hits(&probs, &targets);
        index = end;
    }
    Ok((loss_sum / val.len() as f64, hits as f64 / val.len() as f64))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut ClassifierModel,
    state: &mut TrainerState<'_>,
    cfg: &TrainConfig,
    stage_no: u8,
    stage_cfg: &StageConfig,
    use_plateau: bool,
) -> Result<()> {
    model.configure_stage(if stage_no == 1 {
        Stage::HeadOnly
    } else {
        Stage::FineTune
    });
    let mut optimizer = stage_cfg.optimizer.build(stage_cfg.lr);
    let mut plateau = PlateauState::new(stage_cfg.lr);
    let min_label = model.label_range.min;

    for epoch in 1..=stage_cfg.epochs {
        let started = Instant::now();
        let lr_used = optimizer.lr();
        let diverged = |loss: f64| Error::Divergence {
            stage: stage_no,
            epoch,
            loss,
        };

        let mut order: Vec<usize> = (0..state.train.len()).collect();
        order.shuffle(&mut derive(
            cfg.seed,
            &[tag("order"), u64::from(stage_no), epoch as u64],
        ));

        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut sample_rng = derive(
                    cfg.seed,
                    &[tag("aug"), u64::from(stage_no), epoch as u64, idx as u64],
                );
                images.push(augment_train(
                    &state.train.image(idx),
                    &mut sample_rng,
                    &cfg.augment,
                )?);
            }
            let targets = batch_targets(state.train, chunk, min_label);

            model.zero_grads();
            let logits = model.forward_logits(&images)?;
            if !logits.iter().all(|v| v.is_finite()) {
                return Err(diverged(f64::NAN));
            }
            let (loss, grad, probs) = softmax_cross_entropy(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            loss_sum += loss * chunk.len() as f64;
            hits += count_hits(&probs, &targets);
            model.backward(Tensor::Flat(grad))?;
            optimizer.step(&mut model.trainable_params());
        }

        let (val_loss, val_acc) = validate_epoch(model, state.val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(diverged(val_loss));
        }

        state.log.records.push(EpochRecord {
            stage: stage_no,
            epoch,
            train_loss: loss_sum / state.train.len() as f64,
            train_acc: hits as f64 / state.train.len() as f64,
            val_loss,
            val_acc,
            lr: lr_used,
            seconds: started.elapsed().as_secs_f64(),
        });

        if state.best.map_or(true, |(_, _, b)| val_acc > b) {
            state.best = Some((stage_no, epoch, val_acc));
            state.best_weights = Some(model.snapshot_weights());
        }
        state.last_good = model.snapshot_weights();

        if use_plateau {
            let next = plateau.observe(val_acc, &cfg.plateau);
            optimizer.set_lr(next);
        }
    }
    Ok(())
}

/// Run the full protocol on a built dataset. Stage 1 trains the head with the
/// backbone frozen (bit-identical weights); stage 2 unfreezes the spec's top
/// layers under the plateau schedule. Divergence aborts with the last healthy
/// weights restored (and exported, when an output directory is given).
pub fn train_two_stage(
    model: &mut ClassifierModel,
    root: &Path,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if manifest.label_range.count() != model.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes but manifest labels span {}",
            model.num_classes, manifest.label_range
        )));
    }
    if cfg.augment.crop_out != model.spec.input_size {
        return Err(Error::Config(format!(
            "augmentation crops to {} but the model expects {}",
            cfg.augment.crop_out, model.spec.input_size
        )));
    }
    model.label_range = manifest.label_range;

    let train = load_split(root, manifest, Split::Train)?;
    let val = load_split(root, manifest, Split::Val)?;
    if train.len() == 0 || val.len() == 0 {
        return Err(Error::Data(
            "training requires non-empty train and val splits".into(),
        ));
    }

    let mut state = TrainerState {
        train: &train,
        val: &val,
        log: TrainingLog::default(),
        best: None,
        best_weights: None,
        last_good: model.snapshot_weights(),
    };

    let outcome = run_stage(model, &mut state, cfg, 1, &cfg.stage1, false)
        .and_then(|()| run_stage(model, &mut state, cfg, 2, &cfg.stage2, true));

    if let Err(err) = outcome {
        if matches!(err, Error::Divergence { .. }) {
            model.restore_weights(&state.last_good)?;
            if let Some(out) = out_dir {
                model.save_bundle(&out.join("last_good"))?;
                state.log.write_to(&out.join("train_log.tsv"))?;
            }
        }
        return Err(err);
    }

    let (best_stage, best_epoch, best_val_acc) = state.best.expect("at least one epoch ran");
    let final_weights = model.snapshot_weights();

    let mut best_bundle = None;
    let mut final_bundle = None;
    if let Some(out) = out_dir {
        let final_dir = out.join("final");
        model.save_bundle(&final_dir)?;
        final_bundle = Some(final_dir);
        if let Some(w) = &state.best_weights {
            model.restore_weights(w)?;
            let best_dir = out.join("best");
            model.save_bundle(&best_dir)?;
            best_bundle = Some(best_dir);
            if !cfg.keep_best {
                model.restore_weights(&final_weights)?;
            }
        }
        state.log.write_to(&out.join("train_log.tsv"))?;
    } else if cfg.keep_best {
        if let Some(w) = &state.best_weights {
            model.restore_weights(w)?;
        }
    }

    Ok(ExperimentResult {
        log: state.log,
        spec: model.spec,
        config: cfg.clone(),
        best_stage,
        best_epoch,
        best_val_acc,
        manifest_hash: manifest.content_hash(),
        best_bundle,
        final_bundle,
        eval_report: None,
    })
}

// ---------------------------------------------------------------------------
// Training-set-size ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationPoint {
    pub per_class_train: usize,
    pub train_images: usize,
    pub macro_f1: f64,
    pub train_seconds: f64,
}

pub fn ablation_to_tsv(points: &[AblationPoint]) -> String {
    let mut out = String::from("per_class_train\ttrain_images\tmacro_f1\ttrain_seconds\n");
    for p in points {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.3}\n",
            p.per_class_train, p.train_images, p.macro_f1, p.train_seconds
        ));
    }
    out
}

/// Balanced subset of the train split: `per_class` records per class, spread
/// evenly across each class's record list; val and test pass through intact.
pub fn subset_manifest(manifest: &DatasetManifest, per_class: usize) -> Result<DatasetManifest> {
    let mut subset = manifest.clone();
    subset.name = format!("{}-n{per_class}", manifest.name);
    let mut kept = Vec::new();
    for label in manifest.label_range.labels() {
        let class_records: Vec<_> = manifest
            .records_for(Split::Train)
            .filter(|r| r.label == label)
            .cloned()
            .collect();
        if class_records.len() < per_class {
            return Err(Error::Data(format!(
                "class {} has {} train records, need {per_class}",
                label.value(),
                class_records.len()
            )));
        }
        for i in 0..per_class {
            kept.push(class_records[i * class_records.len() / per_class].clone());
        }
    }
    subset.records = kept;
    subset
        .records
        .extend(manifest.records_for(Split::Val).cloned());
    subset
        .records
        .extend(manifest.records_for(Split::Test).cloned());
    Ok(subset)
}

/// Train a fresh model per training-set size and score each on the *same*
/// full test split. Returns one point per requested size, in order.
pub fn ablate_training_size(
    root: &Path,
    manifest: &DatasetManifest,
    sizes: &[usize],
    spec: ArchitectureSpec,
    head: HeadConfig,
    assets: &PretrainedAssets,
    cfg: &TrainConfig,
) -> Result<Vec<AblationPoint>> {
    if sizes.is_empty() {
        return Err(Error::Config("ablation needs at least one size".into()));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config("ablation sizes must be positive".into()));
    }
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let subset = subset_manifest(manifest, size)?;
        let mut model = build_classifier(spec, manifest.label_range.count(), assets, head)?;
        let started = Instant::now();
        train_two_stage(&mut model, root, &subset, cfg, None)?;
        let train_seconds = started.elapsed().as_secs_f64();
        let report = crate::eval::evaluate_model(&mut model, root, manifest, Split::Test, None)?;
        points.push(AblationPoint {
            per_class_train: size,
            train_images: size * manifest.label_range.count(),
            macro_f1: report.macro_f1,
            train_seconds,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BuildTargets, Strategy};
    use crate::model::{surrogate_spec, PretrainedAssets};
    use crate::synth::{generate_dataset, SynthConfig};

    // Literal transcription of the documented plateau behavior, kept
    // independent of the production state machine.
    fn plateau_oracle(history: &[f64], initial_lr: f64, cfg: &PlateauConfig) -> f64 {
        let mut lr = initial_lr;
        let mut best = f64::NEG_INFINITY;
        let mut wait = 0usize;
        for &value in history {
            if value > best + cfg.threshold {
                best = value;
                wait = 0;
            } else {
                wait += 1;
                if wait >= cfg.patience {
                    lr = (lr / cfg.factor).max(cfg.min_lr);
                    wait = 0;
                }
            }
        }
        lr
    }

    #[test]
    fn plateau_reference_cases() {
        let cfg = PlateauConfig::default();
        // a flat history: first epoch sets the best, then 30 stall epochs
        // trigger one reduction
        let flat = vec![0.5; 31];
        assert_eq!(plateau_lr(&flat, 1e-4, &cfg), 2e-5);
        // one fewer stall epoch: no reduction yet
        assert_eq!(plateau_lr(&flat[..30], 1e-4, &cfg), 1e-4);
        // long stall: 1e-4 -> 2e-5 -> 4e-6 -> clamped at the floor
        let long = vec![0.5; 93];
        assert!((plateau_lr(&long, 1e-4, &cfg) - 1e-6).abs() < 1e-18);
        // improvements keep the rate at its initial value
        let improving: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(plateau_lr(&improving, 1e-4, &cfg), 1e-4);
        // sub-threshold improvements do not count
        let tiny = PlateauConfig {
            patience: 3,
            threshold: 0.01,
            ..cfg
        };
        let creeping = vec![0.5, 0.5005, 0.501, 0.5015];
        assert_eq!(plateau_lr(&creeping, 1e-4, &tiny), 2e-5);
    }

    #[test]
    fn plateau_matches_oracle_on_varied_histories() {
        use rand::Rng as _;
        let cfg = PlateauConfig {
            factor: 5.0,
            patience: 4,
            min_lr: 1e-6,
            threshold: 1e-3,
        };
        let mut rng = derive(99, &[tag("plateau")]);
        for case in 0..200 {
            let len = rng.gen_range(0..60);
            let history: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
            assert_eq!(
                plateau_lr(&history, 1e-4, &cfg),
                plateau_oracle(&history, 1e-4, &cfg),
                "case {case}: {history:?}"
            );
        }
    }

    // -- end-to-end fixtures --------------------------------------------

    struct Fixture {
        dir: tempfile::TempDir,
        manifest: DatasetManifest,
    }

    fn tiny_dataset() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_classes: 3,
            sessions_per_class: 1,
            seed: 21,
            images_per_class: BuildTargets {
                train: 6,
                val: 3,
                test: 3,
            },
            ..SynthConfig::default()
        };
        let manifest =
            generate_dataset(dir.path(), &cfg, "train-test", Strategy::LL, true).unwrap();
        Fixture { dir, manifest }
    }

    fn tiny_model(num_classes: usize, seed: u64) -> ClassifierModel {
        build_classifier(
            surrogate_spec(),
            num_classes,
            &PretrainedAssets::empty(),
            HeadConfig {
                seed,
                ..HeadConfig::default()
            },
        )
        .unwrap()
    }

    fn tiny_config(stage1: usize, stage2: usize) -> TrainConfig {
        let mut cfg = TrainConfig::for_spec(&surrogate_spec());
        cfg.stage1.epochs = stage1;
        cfg.stage2.epochs = stage2;
        cfg.batch_size = 4;
        cfg.augment = AugmentConfig::disabled();
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn stage1_freezes_backbone_bit_identically() {
        let fx = tiny_dataset();
        let mut model = tiny_model(3, 1);
        let backbone_before = model.backbone_weights();
        let head_before = model.snapshot_weights();

        let result = train_two_stage(
            &mut model,
            fx.dir.path(),
            &fx.manifest,
            &tiny_config(2, 0),
            None,
        )
        .unwrap();

        assert_eq!(model.backbone_weights(), backbone_before);
        assert_ne!(model.snapshot_weights(), head_before, "head must move");
        assert_eq!(result.log.records.len(), 2);
        assert!(result.log.records.iter().all(|r| r.stage == 1));
    }

    #[test]
    fn two_stage_run_logs_and_exports_bundles() {
        let fx = tiny_dataset();
        let out = tempfile::tempdir().unwrap();
        let mut model = tiny_model(3, 2);
        let cfg = tiny_config(1, 2);

        let result = train_two_stage(
            &mut model,
            fx.dir.path(),
            &fx.manifest,
            &cfg,
            Some(out.path()),
        )
        .unwrap();

        assert_eq!(result.log.records.len(), 3);
        result.log.validate(&cfg.plateau).unwrap();
        assert_eq!(result.manifest_hash, fx.manifest.content_hash());

        // stage numbering and epoch counters
        let stages: Vec<(u8, usize)> =
            result.log.records.iter().map(|r| (r.stage, r.epoch)).collect();
        assert_eq!(stages, vec![(1, 1), (2, 1), (2, 2)]);

        // best tracking agrees with the log
        let best = result.log.best().unwrap();
        assert_eq!(best.val_acc, result.best_val_acc);
        assert_eq!((result.best_stage, result.best_epoch), (best.stage, best.epoch));

        // log file roundtrips
        let reread = TrainingLog::read_from(&out.path().join("train_log.tsv")).unwrap();
        assert!(reread.equivalent_ignoring_time(&result.log));

        // both bundles load and carry the manifest's label range
        let best_model =
            ClassifierModel::load_bundle(result.best_bundle.as_deref().unwrap()).unwrap();
        let final_model =
            ClassifierModel::load_bundle(result.final_bundle.as_deref().unwrap()).unwrap();
        assert_eq!(best_model.label_range, fx.manifest.label_range);
        assert_eq!(final_model.label_range, fx.manifest.label_range);

        // keep_best left the best weights in the live model
        assert_eq!(model.snapshot_weights(), best_model.snapshot_weights());
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let fx = tiny_dataset();
        let run = || {
            let mut model = tiny_model(3, 7);
            train_two_stage(
                &mut model,
                fx.dir.path(),
                &fx.manifest,
                &tiny_config(1, 1),
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.log.equivalent_ignoring_time(&b.log));
        assert_eq!(a.best_val_acc, b.best_val_acc);
    }

    #[test]
    fn divergence_aborts_and_retains_last_good_weights() {
        let fx = tiny_dataset();
        let out = tempfile::tempdir().unwrap();
        let mut model = tiny_model(3, 3);
        let mut cfg = tiny_config(1, 3);
        cfg.stage2.lr = 1e12;

        let err = train_two_stage(
            &mut model,
            fx.dir.path(),
            &fx.manifest,
            &cfg,
            Some(out.path()),
        )
        .unwrap_err();
        match err {
            Error::Divergence { stage, .. } => assert_eq!(stage, 2),
            other => panic!("expected divergence, got {other}"),
        }

        // the live model was rolled back to finite weights
        assert!(model.snapshot_weights().iter().all(|v| v.is_finite()));
        // and the salvage bundle loads
        let salvaged = ClassifierModel::load_bundle(&out.path().join("last_good")).unwrap();
        assert!(salvaged.snapshot_weights().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn class_count_mismatch_is_a_config_error() {
        let fx = tiny_dataset();
        let mut model = tiny_model(8, 4);
        let err = train_two_stage(
            &mut model,
            fx.dir.path(),
            &fx.manifest,
            &tiny_config(1, 0),
            None,
        )
        .unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::Config);
    }

    #[test]
    fn log_validation_catches_rising_stage2_lr() {
        let mk = |lr1, lr2| TrainingLog {
            records: vec![
                EpochRecord {
                    stage: 2,
                    epoch: 1,
                    train_loss: 1.0,
                    train_acc: 0.5,
                    val_loss: 1.0,
                    val_acc: 0.5,
                    lr: lr1,
                    seconds: 0.1,
                },
                EpochRecord {
                    stage: 2,
                    epoch: 2,
                    train_loss: 0.9,
                    train_acc: 0.6,
                    val_loss: 0.9,
                    val_acc: 0.6,
                    lr: lr2,
                    seconds: 0.1,
                },
            ],
        };
        let plateau = PlateauConfig::default();
        mk(1e-4, 1e-4).validate(&plateau).unwrap();
        mk(1e-4, 2e-5).validate(&plateau).unwrap();
        assert!(mk(1e-4, 2e-4).validate(&plateau).is_err());
        assert!(mk(1e-4, 1e-9).validate(&plateau).is_err());
    }

    #[test]
    fn ablation_trains_one_point_per_size() {
        let fx = tiny_dataset();
        let cfg = tiny_config(1, 1);
        let points = ablate_training_size(
            fx.dir.path(),
            &fx.manifest,
            &[2, 4],
            surrogate_spec(),
            HeadConfig::default(),
            &PretrainedAssets::empty(),
            &cfg,
        )
        .unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(points[0].per_class_train, 2);
        assert_eq!(points[0].train_images, 6);
        assert_eq!(points[1].train_images, 12);
        for p in &points {
            assert!((0.0..=1.0).contains(&p.macro_f1));
            assert!(p.train_seconds > 0.0);
        }

        // oversized request names the shortfall
        assert!(subset_manifest(&fx.manifest, 100).is_err());
        // subset keeps balance and passes val/test through
        let sub = subset_manifest(&fx.manifest, 2).unwrap();
        for (_, n) in sub.class_counts(Split::Train) {
            assert_eq!(n, 2);
        }
        assert_eq!(
            sub.records_for(Split::Test).count(),
            fx.manifest.records_for(Split::Test).count()
        );
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let spec = surrogate_spec();
        let mut cfg = TrainConfig::for_spec(&spec);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_spec(&spec);
        cfg.stage2.lr = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_spec(&spec);
        cfg.plateau.factor = 0.5;
        assert!(cfg.validate().is_err());
    }
}
