//! Training-time augmentation stack and the deterministic evaluation crop.
//!
//! Dataset images are 331x331; model inputs are 224x224. Training applies, in
//! order: random crop (always), horizontal motion blur, horizontal flip,
//! brightness/contrast, rotation, grayscale. Evaluation uses a fixed center
//! crop and nothing else, so repeated evaluation is bit-identical.

use rand::Rng;

use crate::error::{Error, Result};
use crate::img::{crop, hw, Image};

pub const DEFAULT_CROP_OUT: usize = 224;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Output side length of the crop fed to the model.
    pub crop_out: usize,
    /// Replace the random crop with the deterministic center crop.
    pub center_crop: bool,
    pub motion_blur_prob: f64,
    pub blur_kernel_size: usize,
    pub flip_prob: f64,
    /// Additive brightness delta drawn uniformly from this interval.
    pub brightness_delta_range: (f64, f64),
    /// Multiplicative contrast factor around the per-channel mean.
    pub contrast_range: (f64, f64),
    /// Rotation angle interval in radians.
    pub rotation_range: (f64, f64),
    pub grayscale_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_out: DEFAULT_CROP_OUT,
            center_crop: false,
            motion_blur_prob: 0.5,
            blur_kernel_size: 7,
            flip_prob: 0.5,
            brightness_delta_range: (-0.2, 0.2),
            contrast_range: (0.5, 1.5),
            rotation_range: (-0.2 * std::f64::consts::PI, 0.2 * std::f64::consts::PI),
            grayscale_prob: 0.2,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// All stochastic transforms off: center crop only. Matches [`prepare_eval`].
    pub fn disabled() -> Self {
        AugmentConfig {
            center_crop: true,
            motion_blur_prob: 0.0,
            flip_prob: 0.0,
            brightness_delta_range: (0.0, 0.0),
            contrast_range: (1.0, 1.0),
            rotation_range: (0.0, 0.0),
            grayscale_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("motion_blur_prob", self.motion_blur_prob),
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.blur_kernel_size == 0 || self.blur_kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "blur_kernel_size must be odd and >= 1, got {}",
                self.blur_kernel_size
            )));
        }
        if self.crop_out == 0 || self.crop_out > 331 {
            return Err(Error::Config(format!(
                "crop_out must be in 1..=331, got {}",
                self.crop_out
            )));
        }
        if self.contrast_range.0 <= 0.0 || self.contrast_range.1 < self.contrast_range.0 {
            return Err(Error::Config(format!(
                "contrast_range must be positive and ordered, got {:?}",
                self.contrast_range
            )));
        }
        for (name, (lo, hi)) in [
            ("brightness_delta_range", self.brightness_delta_range),
            ("rotation_range", self.rotation_range),
        ] {
            if hi < lo {
                return Err(Error::Config(format!("{name} is reversed: ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// Which stochastic transforms fired for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentTrace {
    pub crop_x: usize,
    pub crop_y: usize,
    pub blur: bool,
    pub flip: bool,
    pub brightness_delta: f64,
    pub contrast_factor: f64,
    pub rotation: f64,
    pub grayscale: bool,
}

/// Contiguous sub-window at offsets drawn uniformly from
/// `[0, H-out] x [0, W-out]` (y drawn first, then x).
pub fn random_crop<R: Rng>(img: &Image, out: usize, rng: &mut R) -> Result<(Image, (usize, usize))> {
    let (h, w) = hw(img);
    if h < out || w < out {
        return Err(Error::Geometry(format!(
            "random crop of {out}x{out} from {w}x{h} frame"
        )));
    }
    let y = rng.gen_range(0..=h - out);
    let x = rng.gen_range(0..=w - out);
    Ok((crop(img, x, y, out, out)?, (x, y)))
}

/// Center crop at offsets `floor((dim - out) / 2)`.
pub fn center_crop(img: &Image, out: usize) -> Result<Image> {
    let (h, w) = hw(img);
    if h < out || w < out {
        return Err(Error::Geometry(format!(
            "center crop of {out}x{out} from {w}x{h} frame"
        )));
    }
    crop(img, (w - out) / 2, (h - out) / 2, out, out)
}

/// Deterministic evaluation-time input: center crop, no other transforms.
pub fn prepare_eval(img: &Image, out: usize) -> Result<Image> {
    center_crop(img, out)
}

/// The k x k horizontal motion blur kernel: center row 1/k per tap, zero
/// elsewhere. Taps sum to 1.
pub fn motion_blur_kernel(k: usize) -> ndarray::Array2<f64> {
    let mut kernel = ndarray::Array2::zeros((k, k));
    for x in 0..k {
        kernel[[k / 2, x]] = 1.0 / k as f64;
    }
    kernel
}

fn blur_horizontal(img: &Image, k: usize) -> Image {
    let (h, w) = hw(img);
    let r = (k / 2) as isize;
    let mut out = Image::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut sum = 0.0f32;
                for i in -r..=r {
                    let xi = (x as isize + i).clamp(0, w as isize - 1) as usize;
                    sum += img[[y, xi, c]];
                }
                out[[y, x, c]] = sum / k as f32;
            }
        }
    }
    out
}

/// With probability `p`, convolve with the horizontal k x k motion blur
/// kernel (edge replication at the border); otherwise return the input
/// unchanged. The coin is drawn even when p is 0 or 1.
pub fn motion_blur<R: Rng>(img: &Image, rng: &mut R, p: f64, k: usize) -> Result<Image> {
    motion_blur_traced(img, rng, p, k).map(|(img, _)| img)
}

fn motion_blur_traced<R: Rng>(
    img: &Image,
    rng: &mut R,
    p: f64,
    k: usize,
) -> Result<(Image, bool)> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("blur kernel size must be odd, got {k}")));
    }
    let fire = rng.gen::<f64>() < p;
    if !fire {
        return Ok((img.clone(), false));
    }
    Ok((blur_horizontal(img, k), true))
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(1));
    out
}

fn adjust_brightness(img: &mut Image, delta: f32) {
    img.mapv_inplace(|v| (v + delta).clamp(0.0, 1.0));
}

/// Per-channel mean-centered contrast scaling.
fn adjust_contrast(img: &mut Image, factor: f32) {
    for c in 0..3 {
        let mut ch = img.slice_mut(ndarray::s![.., .., c]);
        let mean = ch.mean().unwrap_or(0.0);
        ch.mapv_inplace(|v| ((v - mean) * factor + mean).clamp(0.0, 1.0));
    }
}

/// Rotate around the image center with bilinear sampling; the exposed border
/// is filled by edge replication. Angle 0 is the identity.
pub fn rotate(img: &Image, angle: f64) -> Image {
    if angle == 0.0 {
        return img.clone();
    }
    let (h, w) = hw(img);
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let (sin, cos) = (angle as f32).sin_cos();
    let mut out = Image::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            // inverse mapping: rotate the output coordinate back by -angle
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, w as f32 - 1.0);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, h as f32 - 1.0);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            for c in 0..3 {
                let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
                let bot = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
                out[[y, x, c]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Replace all three channels with ITU-R 601 luminance.
pub fn to_grayscale3(img: &Image) -> Image {
    let (h, w) = hw(img);
    let mut out = Image::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let l = 0.299 * img[[y, x, 0]] + 0.587 * img[[y, x, 1]] + 0.114 * img[[y, x, 2]];
            for c in 0..3 {
                out[[y, x, c]] = l;
            }
        }
    }
    out
}

/// The photometric/geometric tail of the stack: horizontal flip, brightness,
/// contrast, rotation, grayscale, each with its configured probability or
/// range. Draw order is fixed: flip coin, brightness delta, contrast factor,
/// rotation angle, grayscale coin.
pub fn flip_brightness_contrast_rotate_grayscale<R: Rng>(
    img: &Image,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> (Image, AugmentTrace) {
    let mut trace = AugmentTrace {
        crop_x: 0,
        crop_y: 0,
        blur: false,
        flip: false,
        brightness_delta: 0.0,
        contrast_factor: 1.0,
        rotation: 0.0,
        grayscale: false,
    };
    let mut out = img.clone();

    trace.flip = rng.gen::<f64>() < cfg.flip_prob;
    if trace.flip {
        out = flip_horizontal(&out);
    }

    let (blo, bhi) = cfg.brightness_delta_range;
    trace.brightness_delta = rng.gen_range(blo..=bhi);
    if trace.brightness_delta != 0.0 {
        adjust_brightness(&mut out, trace.brightness_delta as f32);
    }

    let (clo, chi) = cfg.contrast_range;
    trace.contrast_factor = rng.gen_range(clo..=chi);
    if trace.contrast_factor != 1.0 {
        adjust_contrast(&mut out, trace.contrast_factor as f32);
    }

    let (rlo, rhi) = cfg.rotation_range;
    trace.rotation = rng.gen_range(rlo..=rhi);
    if trace.rotation != 0.0 {
        out = rotate(&out, trace.rotation);
    }

    trace.grayscale = rng.gen::<f64>() < cfg.grayscale_prob;
    if trace.grayscale {
        out = to_grayscale3(&out);
    }

    (out, trace)
}

/// Full training-time stack; returns which transforms fired.
pub fn augment_train_traced<R: Rng>(
    img: &Image,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(Image, AugmentTrace)> {
    let (cropped, (cx, cy)) = if cfg.center_crop {
        let (h, w) = hw(img);
        if h < cfg.crop_out || w < cfg.crop_out {
            return Err(Error::Geometry(format!(
                "center crop of {0}x{0} from {w}x{h} frame",
                cfg.crop_out
            )));
        }
        (
            center_crop(img, cfg.crop_out)?,
            ((w - cfg.crop_out) / 2, (h - cfg.crop_out) / 2),
        )
    } else {
        let (c, xy) = random_crop(img, cfg.crop_out, rng)?;
        (c, xy)
    };
    let (blurred, blur_fired) =
        motion_blur_traced(&cropped, rng, cfg.motion_blur_prob, cfg.blur_kernel_size)?;
    let (out, mut trace) = flip_brightness_contrast_rotate_grayscale(&blurred, rng, cfg);
    trace.crop_x = cx;
    trace.crop_y = cy;
    trace.blur = blur_fired;
    Ok((out, trace))
}

/// Convert a dataset image into one stochastically augmented model input.
/// Output is `crop_out` square and fully determined by (image, rng state).
pub fn augment_train<R: Rng>(img: &Image, rng: &mut R, cfg: &AugmentConfig) -> Result<Image> {
    augment_train_traced(img, rng, cfg).map(|(img, _)| img)
}
