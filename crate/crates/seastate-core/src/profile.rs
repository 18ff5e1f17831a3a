//! Resource profiling: training time, inference throughput, and memory, in a
//! fixed two-table report format. Absolute numbers are hardware-bound, so
//! nothing here asserts them — only format, internal consistency, and
//! repeatability are contractual.

use std::path::Path;
use std::sync::{Mutex, MutexGuard, TryLockError};
use std::time::Instant;

use rand::Rng;

use crate::augment::prepare_eval;
use crate::dataset::CROP_SIZE;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::model::ClassifierModel;
use crate::rng::{derive, tag};
use crate::train::ExperimentResult;

/// One profile covers either a training run or an inference measurement;
/// fields outside its mode stay `None` and render as "n/a" (never zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceProfile {
    pub model: String,
    pub input_size: usize,
    pub batch_size: usize,
    pub epochs: Option<usize>,
    pub batches: Option<usize>,
    pub warmup_batches: Option<usize>,
    pub total_training_seconds: Option<f64>,
    pub seconds_per_epoch: Option<f64>,
    /// Images/second including the evaluation preprocessing step.
    pub throughput_images_per_s: Option<f64>,
    /// Images/second for the forward pass alone.
    pub compute_throughput_images_per_s: Option<f64>,
    pub model_memory_mb: Option<f64>,
    pub peak_memory_mb: Option<f64>,
    /// Where the memory figures came from (or why they are unavailable).
    pub memory_source: String,
    pub hardware: String,
}

/// Seconds rendered as h:mm.
pub fn format_hmm(seconds: f64) -> String {
    let minutes = (seconds / 60.0).round().max(0.0) as u64;
    format!("{}:{:02}", minutes / 60, minutes % 60)
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "n/a".to_string(),
    }
}

fn fmt_opt_f(v: &Option<f64>, digits: usize) -> String {
    match v {
        Some(x) => format!("{x:.digits$}"),
        None => "n/a".to_string(),
    }
}

impl ResourceProfile {
    fn empty(model: String, input_size: usize, batch_size: usize) -> Self {
        ResourceProfile {
            model,
            input_size,
            batch_size,
            epochs: None,
            batches: None,
            warmup_batches: None,
            total_training_seconds: None,
            seconds_per_epoch: None,
            throughput_images_per_s: None,
            compute_throughput_images_per_s: None,
            model_memory_mb: None,
            peak_memory_mb: None,
            memory_source: "unavailable".to_string(),
            hardware: hardware_descriptor(),
        }
    }

    /// Internal consistency: positive throughput, peak >= model-only memory,
    /// and per-epoch x epochs within 20% of the reported total.
    pub fn check_consistency(&self) -> Result<()> {
        if let Some(t) = self.throughput_images_per_s {
            if !(t > 0.0) {
                return Err(Error::Profile(format!("non-positive throughput {t}")));
            }
        }
        if let Some(t) = self.compute_throughput_images_per_s {
            if !(t > 0.0) {
                return Err(Error::Profile(format!("non-positive compute throughput {t}")));
            }
        }
        if let (Some(peak), Some(model)) = (self.peak_memory_mb, self.model_memory_mb) {
            if peak < model {
                return Err(Error::Profile(format!(
                    "peak memory {peak} MB below model-only memory {model} MB"
                )));
            }
        }
        if let (Some(per), Some(total), Some(epochs)) = (
            self.seconds_per_epoch,
            self.total_training_seconds,
            self.epochs,
        ) {
            let projected = per * epochs as f64;
            if total > 0.0 && (projected - total).abs() / total > 0.20 {
                return Err(Error::Profile(format!(
                    "per-epoch {per} s x {epochs} epochs = {projected} s strays more \
                     than 20% from total {total} s"
                )));
            }
        }
        Ok(())
    }

    /// Human-readable two-section table (training and inference columns).
    pub fn render(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("model", self.model.clone()),
            ("input size (px)", self.input_size.to_string()),
            ("batch size", self.batch_size.to_string()),
            ("epochs", fmt_opt(&self.epochs)),
            (
                "total training time (h:mm)",
                self.total_training_seconds
                    .map(format_hmm)
                    .unwrap_or_else(|| "n/a".to_string()),
            ),
            (
                "training time per epoch (s)",
                fmt_opt_f(&self.seconds_per_epoch, 2),
            ),
            ("inference batches", fmt_opt(&self.batches)),
            ("warmup batches", fmt_opt(&self.warmup_batches)),
            (
                "avg inference throughput (images/s)",
                fmt_opt_f(&self.throughput_images_per_s, 2),
            ),
            (
                "compute-only throughput (images/s)",
                fmt_opt_f(&self.compute_throughput_images_per_s, 2),
            ),
            ("model-only memory (MB)", fmt_opt_f(&self.model_memory_mb, 2)),
            ("peak memory (MB)", fmt_opt_f(&self.peak_memory_mb, 2)),
            ("memory source", self.memory_source.clone()),
            ("hardware", self.hardware.clone()),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        out
    }

    /// Machine-readable key\tvalue lines, one per report column.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k}\t{v}\n"));
        push("model", self.model.clone());
        push("input_size", self.input_size.to_string());
        push("batch_size", self.batch_size.to_string());
        push("epochs", fmt_opt(&self.epochs));
        push("batches", fmt_opt(&self.batches));
        push("warmup_batches", fmt_opt(&self.warmup_batches));
        push(
            "total_training_seconds",
            fmt_opt_f(&self.total_training_seconds, 3),
        );
        push("seconds_per_epoch", fmt_opt_f(&self.seconds_per_epoch, 3));
        push(
            "throughput_images_per_s",
            fmt_opt_f(&self.throughput_images_per_s, 3),
        );
        push(
            "compute_throughput_images_per_s",
            fmt_opt_f(&self.compute_throughput_images_per_s, 3),
        );
        push("model_memory_mb", fmt_opt_f(&self.model_memory_mb, 3));
        push("peak_memory_mb", fmt_opt_f(&self.peak_memory_mb, 3));
        push("memory_source", self.memory_source.clone());
        push("hardware", self.hardware.clone());
        out
    }
}

pub fn hardware_descriptor() -> String {
    let cpus = std::thread::available_parallelism()
        .map(|n| n.get().to_string())
        .unwrap_or_else(|_| "?".to_string());
    format!(
        "{} {} / {cpus} cpu(s) / single-threaded f32 compute",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Peak resident set size of this process in MB, if the kernel exposes it.
fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: f64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            return Some(kb / 1024.0);
        }
    }
    None
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite durations"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Training-side profile from a finished run: per-epoch time is the median
/// epoch duration excluding the first (warmup) epoch; the total is the sum
/// of all of them.
pub fn profile_training(run: &ExperimentResult) -> Result<ResourceProfile> {
    let durations: Vec<f64> = run.log.records.iter().map(|r| r.seconds).collect();
    if durations.is_empty() {
        return Err(Error::Profile("training log holds no epochs".into()));
    }
    if durations.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::Profile("training log is missing timing data".into()));
    }
    let total: f64 = durations.iter().sum();
    let mut steady: Vec<f64> = if durations.len() > 1 {
        durations[1..].to_vec()
    } else {
        durations.clone()
    };
    let per_epoch = median(&mut steady);

    let mut profile = ResourceProfile::empty(
        run.spec.name.to_string(),
        run.spec.input_size,
        run.config.batch_size,
    );
    profile.epochs = Some(durations.len());
    profile.total_training_seconds = Some(total);
    profile.seconds_per_epoch = Some(per_epoch);
    Ok(profile)
}

static MEASUREMENT: Mutex<()> = Mutex::new(());

/// The process-wide measurement lock. Profiling needs the machine to itself;
/// a second concurrent measurement is rejected rather than queued.
pub fn measurement_lock() -> Result<MutexGuard<'static, ()>> {
    match MEASUREMENT.try_lock() {
        Ok(guard) => Ok(guard),
        Err(TryLockError::WouldBlock) => Err(Error::Profile(
            "another profiling measurement is already running in this process".into(),
        )),
        Err(TryLockError::Poisoned(_)) => Err(Error::Profile(
            "a previous profiling measurement panicked; restart the process".into(),
        )),
    }
}

/// Inference profile of a saved bundle: `warmup_batches` unmeasured batches,
/// then `num_batches` timed ones, reported both with the evaluation
/// preprocessing step and compute-only. Memory is parameter-byte accounting
/// for the model and kernel-reported peak RSS for the process.
pub fn profile_inference(
    bundle: &Path,
    batch_size: usize,
    num_batches: usize,
    warmup_batches: usize,
) -> Result<ResourceProfile> {
    let _guard = measurement_lock()?;
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if num_batches == 0 {
        return Err(Error::Profile(
            "num_batches must be at least 1 after warmup".into(),
        ));
    }
    let mut model = ClassifierModel::load_bundle(bundle)?;
    let input = model.spec.input_size;
    let model_memory_mb = model.total_param_count() as f64 * 4.0 / (1024.0 * 1024.0);

    // deterministic synthetic frames at the dataset crop size; preparing
    // them for the model is the preprocessing being measured
    let mut rng = derive(0xC0FFEE, &[tag("profile")]);
    let frame_side = CROP_SIZE.max(input);
    let frames: Vec<Image> = (0..batch_size)
        .map(|_| {
            let data: Vec<f32> = (0..frame_side * frame_side * 3)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect();
            ndarray::Array3::from_shape_vec((frame_side, frame_side, 3), data)
                .expect("shape matches length")
        })
        .collect();
    let prepared: Vec<Image> = frames
        .iter()
        .map(|f| prepare_eval(f, input))
        .collect::<Result<_>>()?;

    for _ in 0..warmup_batches {
        model.predict_batch(&prepared)?;
    }

    let started = Instant::now();
    for _ in 0..num_batches {
        let batch: Vec<Image> = frames
            .iter()
            .map(|f| prepare_eval(f, input))
            .collect::<Result<_>>()?;
        model.predict_batch(&batch)?;
    }
    let with_prep = started.elapsed().as_secs_f64();

    let started = Instant::now();
    for _ in 0..num_batches {
        model.predict_batch(&prepared)?;
    }
    let compute_only = started.elapsed().as_secs_f64();

    let images = (num_batches * batch_size) as f64;
    if !(with_prep > 0.0 && compute_only > 0.0) {
        return Err(Error::Profile("timer resolution too coarse to measure".into()));
    }

    let mut profile =
        ResourceProfile::empty(model.spec.name.to_string(), input, batch_size);
    profile.batches = Some(num_batches);
    profile.warmup_batches = Some(warmup_batches);
    profile.throughput_images_per_s = Some(images / with_prep);
    profile.compute_throughput_images_per_s = Some(images / compute_only);
    profile.model_memory_mb = Some(model_memory_mb);
    profile.peak_memory_mb = peak_rss_mb();
    profile.memory_source = if profile.peak_memory_mb.is_some() {
        "model: parameter bytes; peak: /proc/self/status VmHWM".to_string()
    } else {
        "model: parameter bytes; peak: unavailable".to_string()
    };
    profile.check_consistency()?;
    Ok(profile)
}
