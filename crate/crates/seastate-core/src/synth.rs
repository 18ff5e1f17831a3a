//! Deterministic procedural sea-texture generator: a stand-in data source
//! with the same directory/manifest layout as real footage, cheap enough for
//! CI and end-to-end training exercises.
//!
//! Each class-c texture superposes:
//!   * one "swell" grating — the largest single component — whose wavelength
//!     and amplitude both grow monotonically with c,
//!   * three short "ripple" gratings whose *total* amplitude grows linearly
//!     with c (the dominant gradient-energy cue),
//!   * smooth low-pass noise of constant amplitude.
//!
//! The construction keeps the mean gradient magnitude strictly increasing in
//! class index (the ripple term's linear growth dwarfs the swell term's slow
//! decline), which the nearest-centroid baseline and the tests lean on.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;

use crate::dataset::{
    build_dataset, BuildOptions, BuildTargets, CropRegion, DatasetManifest, FrameSource,
    LabelRange, LoadingCondition, SeaStateLabel, Split, Strategy, VideoSession,
};
use crate::error::{Error, Result};
use crate::img::{hw, Image};
use crate::rng::{derive, tag};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Classes are labeled 1..=num_classes.
    pub num_classes: u8,
    /// Per-split image targets for each class.
    pub images_per_class: BuildTargets,
    /// Side length of the cropped dataset images.
    pub image_size: usize,
    pub seed: u64,
    /// Class-separation factor: scales the per-class amplitude increments.
    /// Larger values spread the classes further apart.
    pub difficulty: f64,
    /// Amplitude of the smooth background noise (class-independent).
    pub noise_amplitude: f32,
    /// Synthetic recording sessions per class.
    pub sessions_per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 8,
            images_per_class: BuildTargets {
                train: 100,
                val: 30,
                test: 30,
            },
            image_size: 331,
            seed: 7,
            difficulty: 1.0,
            noise_amplitude: 0.04,
            sessions_per_class: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic dataset needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 224 {
            return Err(Error::Config(format!(
                "image_size must be at least 224, got {}",
                self.image_size
            )));
        }
        if !(self.difficulty > 0.0 && self.difficulty.is_finite()) {
            return Err(Error::Config(format!(
                "difficulty must be positive, got {}",
                self.difficulty
            )));
        }
        if self.sessions_per_class == 0 {
            return Err(Error::Config("sessions_per_class must be positive".into()));
        }
        if !(0.0..=0.2).contains(&self.noise_amplitude) {
            return Err(Error::Config(format!(
                "noise amplitude {} outside [0, 0.2]",
                self.noise_amplitude
            )));
        }
        Ok(())
    }

    fn label_range(&self) -> Result<LabelRange> {
        LabelRange::new(1, self.num_classes)
    }

    /// Side length of the generated frames: crops plus a sampling margin.
    pub fn frame_side(&self) -> usize {
        self.image_size + (self.image_size / 5).max(40)
    }
}

/// Swell wavelength in pixels for 0-based class index c.
fn swell_wavelength(c: usize) -> f32 {
    12.0 * 1.35f32.powi(c as i32)
}

/// Swell amplitude: grows with class, capped below the clipping budget.
fn swell_amplitude(c: usize, difficulty: f64) -> f32 {
    (0.05 + 0.022 * c as f32 * difficulty as f32).min(0.25)
}

/// Total ripple amplitude: the linear class cue that dominates the texture's
/// gradient energy.
fn ripple_amplitude(c: usize, difficulty: f64) -> f32 {
    (0.02 + 0.03 * c as f32 * difficulty as f32).min(0.30)
}

const RIPPLE_WAVELENGTH: f32 = 9.0;

struct Grating {
    amplitude: f32,
    kx: f32,
    ky: f32,
    phase: f32,
}

impl Grating {
    fn new<R: Rng>(amplitude: f32, wavelength: f32, theta: f32, rng: &mut R) -> Self {
        let k = 2.0 * PI / wavelength;
        Grating {
            amplitude,
            kx: k * theta.cos(),
            ky: k * theta.sin(),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn eval(&self, y: f32, x: f32) -> f32 {
        self.amplitude * (self.kx * x + self.ky * y + self.phase).sin()
    }
}

/// Smooth low-pass noise: a coarse uniform grid, bilinearly upsampled.
struct SmoothNoise {
    grid: Vec<f32>,
    cols: usize,
    step: f32,
}

impl SmoothNoise {
    fn new<R: Rng>(shape: (usize, usize), amplitude: f32, rng: &mut R) -> Self {
        let step = 16.0f32;
        let rows = (shape.0 as f32 / step).ceil() as usize + 2;
        let cols = (shape.1 as f32 / step).ceil() as usize + 2;
        let grid = (0..rows * cols)
            .map(|_| rng.gen_range(-amplitude..=amplitude))
            .collect();
        SmoothNoise { grid, cols, step }
    }

    fn eval(&self, y: f32, x: f32) -> f32 {
        let gy = y / self.step;
        let gx = x / self.step;
        let y0 = gy.floor() as usize;
        let x0 = gx.floor() as usize;
        let fy = gy - y0 as f32;
        let fx = gx - x0 as f32;
        let at = |r: usize, c: usize| self.grid[r * self.cols + c];
        at(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + at(y0, x0 + 1) * (1.0 - fy) * fx
            + at(y0 + 1, x0) * fy * (1.0 - fx)
            + at(y0 + 1, x0 + 1) * fy * fx
    }
}

/// Per-image stream seed for a frame of a synthetic session.
pub fn texture_seed(run_seed: u64, session_id: &str, frame_index: usize) -> u64 {
    derive(run_seed, &[tag("frame"), tag(session_id), frame_index as u64]).gen()
}

/// Deterministic texture: bit-identical for identical (class, seed, shape).
pub fn generate_texture(
    cfg: &SynthConfig,
    class_index: usize,
    seed: u64,
    shape: (usize, usize),
) -> Image {
    let mut rng = derive(seed, &[tag("texture"), class_index as u64]);
    let c = class_index;

    let mut gratings = Vec::with_capacity(4);
    // swell: both wavelength and amplitude grow with class; stays the
    // largest single grating
    let swell_lambda = swell_wavelength(c) * rng.gen_range(0.92..1.08);
    let swell_amp = swell_amplitude(c, cfg.difficulty) * rng.gen_range(0.95..1.05);
    let swell_theta = 0.35 * c as f32 + rng.gen_range(-0.25..0.25);
    gratings.push(Grating::new(swell_amp, swell_lambda, swell_theta, &mut rng));
    // ripples: short gratings sharing a linearly-growing total amplitude.
    // The count is the same for every class: k same-band random-phase
    // gratings with total amplitude T contribute ~T/sqrt(k) to the mean
    // gradient, so varying k would break the statistic's monotonicity.
    let n_ripples = 3;
    let ripple_total = ripple_amplitude(c, cfg.difficulty) * rng.gen_range(0.95..1.05);
    for _ in 0..n_ripples {
        let lambda = RIPPLE_WAVELENGTH * rng.gen_range(0.88..1.12);
        let theta = rng.gen_range(0.0..PI);
        gratings.push(Grating::new(
            ripple_total / n_ripples as f32,
            lambda,
            theta,
            &mut rng,
        ));
    }
    let noise = SmoothNoise::new(shape, cfg.noise_amplitude, &mut rng);

    let (h, w) = shape;
    let mut img = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f32, x as f32);
            let mut v = 0.5 + noise.eval(yf, xf);
            for g in &gratings {
                v += g.eval(yf, xf);
            }
            let v = v.clamp(0.0, 1.0);
            img[[y, x, 0]] = v;
            img[[y, x, 1]] = v;
            img[[y, x, 2]] = v;
        }
    }
    img
}

/// Frame source backed by the texture generator: frames are derived from
/// (config seed, session id, frame index), independent of request order.
pub struct SynthFrameSource {
    cfg: SynthConfig,
    min_label: u8,
}

impl SynthFrameSource {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let min_label = cfg.label_range()?.min;
        Ok(SynthFrameSource { cfg, min_label })
    }
}

impl FrameSource for SynthFrameSource {
    fn frame(&self, session: &VideoSession, frame_index: usize) -> Result<Image> {
        if frame_index >= session.frame_count {
            return Err(Error::Data(format!(
                "frame {frame_index} out of range for session {} ({} frames)",
                session.id, session.frame_count
            )));
        }
        let class_index = (session.label.value() - self.min_label) as usize;
        let (w, h) = session.resolution;
        Ok(generate_texture(
            &self.cfg,
            class_index,
            texture_seed(self.cfg.seed, &session.id, frame_index),
            (h, w),
        ))
    }
}

/// Synthetic recording sessions: `sessions_per_class` per class, alternating
/// loading condition, full-width sea region below a sky band.
pub fn synth_sessions(cfg: &SynthConfig, frames_per_class: usize) -> Result<Vec<VideoSession>> {
    cfg.validate()?;
    let range = cfg.label_range()?;
    let side = cfg.frame_side();
    let sky = side / 8;
    let sea_region = CropRegion {
        x: 0,
        y: sky,
        width: side,
        height: side - sky,
    };
    let per_session = frames_per_class.div_ceil(cfg.sessions_per_class);
    let mut sessions = Vec::new();
    for label in range.labels() {
        for k in 0..cfg.sessions_per_class {
            sessions.push(VideoSession {
                id: format!("synth-c{}-s{k}", label.value()),
                path: PathBuf::new(),
                label,
                frame_count: per_session,
                duration_s: per_session as f64 / 25.0,
                resolution: (side, side),
                camera_height_m: 20.0,
                loading_condition: if k % 2 == 0 {
                    LoadingCondition::Ballast
                } else {
                    LoadingCondition::Cargo
                },
                sea_region: Some(sea_region),
            });
        }
    }
    Ok(sessions)
}

/// Generate a complete on-disk dataset (crops + manifest) with the standard
/// builder; sized so every split reaches its target exactly.
pub fn generate_dataset(
    root: &Path,
    cfg: &SynthConfig,
    name: &str,
    strategy: Strategy,
    write_images: bool,
) -> Result<DatasetManifest> {
    let targets = cfg.images_per_class;
    let frames_per_class = targets.total() + (targets.total() / 4).max(24);
    let sessions = synth_sessions(cfg, frames_per_class)?;
    let source = SynthFrameSource::new(cfg.clone())?;
    let mut opts = BuildOptions::new(name, strategy, cfg.seed, targets);
    opts.label_range = cfg.label_range()?;
    opts.crop_size = cfg.image_size;
    opts.write_images = write_images;
    build_dataset(&sessions, &source, &opts, root)
}

// ---------------------------------------------------------------------------
// Gradient statistic and nearest-centroid baseline
// ---------------------------------------------------------------------------

/// Mean gradient magnitude of the luminance channel: the texture-energy
/// statistic the generator keeps strictly monotone in class.
pub fn mean_gradient_magnitude(img: &Image) -> f64 {
    let (h, w) = hw(img);
    let lum = |y: usize, x: usize| -> f64 {
        f64::from(img[[y, x, 0]] + img[[y, x, 1]] + img[[y, x, 2]]) / 3.0
    };
    let mut total = 0.0;
    let mut count = 0u64;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let v = lum(y, x);
            total += (lum(y, x + 1) - v).abs() + (lum(y + 1, x) - v).abs();
            count += 2;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Per-class mean of the gradient statistic over one split.
pub fn gradient_centroids(
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<(SeaStateLabel, f64)>> {
    let data = crate::dataset::load_split(root, manifest, split)?;
    let labels: Vec<SeaStateLabel> = manifest.label_range.labels().collect();
    let mut sums = vec![0.0f64; labels.len()];
    let mut counts = vec![0u64; labels.len()];
    for i in 0..data.len() {
        let idx = manifest
            .label_range
            .index_of(data.label(i))
            .expect("split labels lie in the manifest range");
        sums[idx] += mean_gradient_magnitude(&data.image(i));
        counts[idx] += 1;
    }
    Ok(labels
        .into_iter()
        .zip(sums.iter().zip(&counts))
        .map(|(label, (&s, &n))| (label, if n == 0 { 0.0 } else { s / n as f64 }))
        .collect())
}

/// Nearest-centroid accuracy of the gradient statistic: fit centroids on one
/// split, classify another. A sanity floor for any learned model.
pub fn gradient_baseline_accuracy(
    root: &Path,
    manifest: &DatasetManifest,
    train_split: Split,
    eval_split: Split,
) -> Result<f64> {
    let centroids = gradient_centroids(root, manifest, train_split)?;
    let data = crate::dataset::load_split(root, manifest, eval_split)?;
    if data.len() == 0 {
        return Err(Error::Data(format!("no records in {eval_split} split")));
    }
    let mut hits = 0u64;
    for i in 0..data.len() {
        let feature = mean_gradient_magnitude(&data.image(i));
        let (nearest, _) = centroids
            .iter()
            .map(|&(label, center)| (label, (feature - center).abs()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"))
            .expect("at least one centroid");
        if nearest == data.label(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
